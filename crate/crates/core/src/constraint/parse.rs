//! S-expression parser for constraint text.
//!
//! Grammar:
//!
//! ```text
//! scalar := FLOAT | (add s s) | (sub s s) | (mul s s) | (div s s)
//!         | (neg s) | (abs s) | (min s s) | (max s s) | (sq s)
//!         | (norm v) | (dot v v) | (x v) | (y v) | (z v)
//! vec    := (kp INT) | (kpprev INT) | (vsub v v) | (vadd v v)
//!         | (vscale s v) | (const3 FLOAT FLOAT FLOAT)
//! ```
//!
//! Top-level expressions must be scalar-valued.

use thiserror::Error;

use super::expr::{Axis, ConstraintExpr, ScalarExpr, VecExpr};

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("lexer error at byte {pos}: {msg}")]
    Lexer { pos: usize, msg: String },
    #[error("unexpected end of input")]
    UnexpectedEnd,
    #[error("unexpected token at byte {pos}: {msg}")]
    UnexpectedToken { pos: usize, msg: String },
    #[error("unknown operator `{name}` at byte {pos}")]
    UnknownOperator { pos: usize, name: String },
    #[error("operator `{op}` at byte {pos} expects {expected} argument(s), got {got}")]
    Arity {
        pos: usize,
        op: String,
        expected: usize,
        got: String,
    },
    #[error("operator `{op}` at byte {pos} expects a {expected} argument")]
    TypeMismatch {
        pos: usize,
        op: String,
        expected: &'static str,
    },
    #[error("top-level expression must be scalar-valued, found vector operator `{name}`")]
    NonScalarTopLevel { name: String },
    #[error("`const3` at byte {pos} takes literal number arguments only")]
    Const3NonLiteral { pos: usize },
    #[error("keypoint index at byte {pos} must be a non-negative integer")]
    IntegerExpected { pos: usize },
    #[error("trailing input at byte {pos}")]
    TrailingInput { pos: usize },
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    LParen,
    RParen,
    Symbol(String),
    Number { value: f64, is_int: bool },
}

#[derive(Debug, Clone)]
struct Spanned {
    token: Token,
    pos: usize,
}

fn lex(text: &str) -> Result<Vec<Spanned>, ParseError> {
    let bytes = text.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '(' => {
                tokens.push(Spanned { token: Token::LParen, pos: i });
                i += 1;
            }
            ')' => {
                tokens.push(Spanned { token: Token::RParen, pos: i });
                i += 1;
            }
            c if c.is_ascii_alphabetic() => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_')
                {
                    i += 1;
                }
                tokens.push(Spanned {
                    token: Token::Symbol(text[start..i].to_string()),
                    pos: start,
                });
            }
            c if c.is_ascii_digit() || c == '-' || c == '+' || c == '.' => {
                let start = i;
                i += 1;
                let mut is_int = c != '.';
                while i < bytes.len() {
                    let b = bytes[i] as char;
                    if b.is_ascii_digit() {
                        i += 1;
                    } else if b == '.' || b == 'e' || b == 'E' {
                        is_int = false;
                        i += 1;
                        // allow exponent sign
                        if (b == 'e' || b == 'E')
                            && i < bytes.len()
                            && (bytes[i] == b'-' || bytes[i] == b'+')
                        {
                            i += 1;
                        }
                    } else {
                        break;
                    }
                }
                let raw = &text[start..i];
                let value: f64 = raw.parse().map_err(|_| ParseError::Lexer {
                    pos: start,
                    msg: format!("invalid number `{raw}`"),
                })?;
                tokens.push(Spanned {
                    token: Token::Number { value, is_int },
                    pos: start,
                });
            }
            other => {
                return Err(ParseError::Lexer {
                    pos: i,
                    msg: format!("unexpected character `{other}`"),
                })
            }
        }
    }
    Ok(tokens)
}

struct Parser {
    tokens: Vec<Spanned>,
    cursor: usize,
}

const SCALAR_OPS: &[&str] = &[
    "add", "sub", "mul", "div", "neg", "abs", "min", "max", "sq", "norm", "dot", "x", "y", "z",
];
const VEC_OPS: &[&str] = &["kp", "kpprev", "vsub", "vadd", "vscale", "const3"];

impl Parser {
    fn peek(&self) -> Option<&Spanned> {
        self.tokens.get(self.cursor)
    }

    fn next(&mut self) -> Result<Spanned, ParseError> {
        let t = self.tokens.get(self.cursor).cloned().ok_or(ParseError::UnexpectedEnd)?;
        self.cursor += 1;
        Ok(t)
    }

    fn expect_rparen(&mut self, op: &str, op_pos: usize, expected: usize) -> Result<(), ParseError> {
        match self.next()? {
            Spanned { token: Token::RParen, .. } => Ok(()),
            Spanned { pos, .. } => Err(ParseError::Arity {
                pos: op_pos.min(pos),
                op: op.to_string(),
                expected,
                got: "more".to_string(),
            }),
        }
    }

    fn parse_scalar(&mut self) -> Result<ScalarExpr, ParseError> {
        let t = self.next()?;
        match t.token {
            Token::Number { value, .. } => Ok(ScalarExpr::Lit(value)),
            Token::Symbol(name) => Err(ParseError::UnexpectedToken {
                pos: t.pos,
                msg: format!("bare symbol `{name}` where a scalar expression is expected"),
            }),
            Token::RParen => Err(ParseError::UnexpectedToken {
                pos: t.pos,
                msg: "`)` where a scalar expression is expected".to_string(),
            }),
            Token::LParen => {
                let head = self.next()?;
                let (name, pos) = match head.token {
                    Token::Symbol(name) => (name, head.pos),
                    _ => {
                        return Err(ParseError::UnexpectedToken {
                            pos: head.pos,
                            msg: "operator name expected after `(`".to_string(),
                        })
                    }
                };
                if VEC_OPS.contains(&name.as_str()) {
                    return Err(ParseError::TypeMismatch {
                        pos,
                        op: name,
                        expected: "scalar (found vector-valued operator)",
                    });
                }
                match name.as_str() {
                    "add" | "sub" | "mul" | "div" | "min" | "max" => {
                        let a = self.parse_scalar_arg(&name, pos, 2)?;
                        let b = self.parse_scalar_arg(&name, pos, 2)?;
                        self.expect_rparen(&name, pos, 2)?;
                        Ok(match name.as_str() {
                            "add" => ScalarExpr::Add(Box::new(a), Box::new(b)),
                            "sub" => ScalarExpr::Sub(Box::new(a), Box::new(b)),
                            "mul" => ScalarExpr::Mul(Box::new(a), Box::new(b)),
                            "div" => ScalarExpr::Div(Box::new(a), Box::new(b)),
                            "min" => ScalarExpr::Min(Box::new(a), Box::new(b)),
                            _ => ScalarExpr::Max(Box::new(a), Box::new(b)),
                        })
                    }
                    "neg" | "abs" | "sq" => {
                        let a = self.parse_scalar_arg(&name, pos, 1)?;
                        self.expect_rparen(&name, pos, 1)?;
                        Ok(match name.as_str() {
                            "neg" => ScalarExpr::Neg(Box::new(a)),
                            "abs" => ScalarExpr::Abs(Box::new(a)),
                            _ => ScalarExpr::Sq(Box::new(a)),
                        })
                    }
                    "norm" => {
                        let v = self.parse_vec_arg(&name, pos, 1)?;
                        self.expect_rparen(&name, pos, 1)?;
                        Ok(ScalarExpr::Norm(Box::new(v)))
                    }
                    "dot" => {
                        let a = self.parse_vec_arg(&name, pos, 2)?;
                        let b = self.parse_vec_arg(&name, pos, 2)?;
                        self.expect_rparen(&name, pos, 2)?;
                        Ok(ScalarExpr::Dot(Box::new(a), Box::new(b)))
                    }
                    "x" | "y" | "z" => {
                        let axis = match name.as_str() {
                            "x" => Axis::X,
                            "y" => Axis::Y,
                            _ => Axis::Z,
                        };
                        let v = self.parse_vec_arg(&name, pos, 1)?;
                        self.expect_rparen(&name, pos, 1)?;
                        Ok(ScalarExpr::Comp(axis, Box::new(v)))
                    }
                    _ => Err(ParseError::UnknownOperator { pos, name }),
                }
            }
        }
    }

    fn parse_scalar_arg(
        &mut self,
        op: &str,
        op_pos: usize,
        expected: usize,
    ) -> Result<ScalarExpr, ParseError> {
        if let Some(Spanned { token: Token::RParen, .. }) = self.peek() {
            return Err(ParseError::Arity {
                pos: op_pos,
                op: op.to_string(),
                expected,
                got: "fewer".to_string(),
            });
        }
        self.parse_scalar()
    }

    fn parse_vec_arg(
        &mut self,
        op: &str,
        op_pos: usize,
        expected: usize,
    ) -> Result<VecExpr, ParseError> {
        match self.peek() {
            Some(Spanned { token: Token::RParen, .. }) => Err(ParseError::Arity {
                pos: op_pos,
                op: op.to_string(),
                expected,
                got: "fewer".to_string(),
            }),
            Some(Spanned { token: Token::Number { .. }, pos }) => Err(ParseError::TypeMismatch {
                pos: *pos,
                op: op.to_string(),
                expected: "vector",
            }),
            _ => self.parse_vec(),
        }
    }

    fn parse_vec(&mut self) -> Result<VecExpr, ParseError> {
        let t = self.next()?;
        match t.token {
            Token::LParen => {
                let head = self.next()?;
                let (name, pos) = match head.token {
                    Token::Symbol(name) => (name, head.pos),
                    _ => {
                        return Err(ParseError::UnexpectedToken {
                            pos: head.pos,
                            msg: "operator name expected after `(`".to_string(),
                        })
                    }
                };
                if SCALAR_OPS.contains(&name.as_str()) {
                    return Err(ParseError::TypeMismatch {
                        pos,
                        op: name,
                        expected: "vector (found scalar-valued operator)",
                    });
                }
                match name.as_str() {
                    "kp" | "kpprev" => {
                        let idx_tok = self.next()?;
                        let index = match idx_tok.token {
                            Token::Number { value, is_int: true }
                                if value >= 0.0 && value.fract() == 0.0 =>
                            {
                                value as usize
                            }
                            _ => return Err(ParseError::IntegerExpected { pos: idx_tok.pos }),
                        };
                        self.expect_rparen(&name, pos, 1)?;
                        Ok(if name == "kp" {
                            VecExpr::Kp(index)
                        } else {
                            VecExpr::KpPrev(index)
                        })
                    }
                    "vsub" | "vadd" => {
                        let a = self.parse_vec_arg(&name, pos, 2)?;
                        let b = self.parse_vec_arg(&name, pos, 2)?;
                        self.expect_rparen(&name, pos, 2)?;
                        Ok(if name == "vsub" {
                            VecExpr::VSub(Box::new(a), Box::new(b))
                        } else {
                            VecExpr::VAdd(Box::new(a), Box::new(b))
                        })
                    }
                    "vscale" => {
                        let s = self.parse_scalar_arg(&name, pos, 2)?;
                        let v = self.parse_vec_arg(&name, pos, 2)?;
                        self.expect_rparen(&name, pos, 2)?;
                        Ok(VecExpr::VScale(Box::new(s), Box::new(v)))
                    }
                    "const3" => {
                        let mut components = [0.0; 3];
                        for slot in &mut components {
                            let arg = self.next()?;
                            *slot = match arg.token {
                                Token::Number { value, .. } => value,
                                Token::RParen => {
                                    return Err(ParseError::Arity {
                                        pos,
                                        op: name.clone(),
                                        expected: 3,
                                        got: "fewer".to_string(),
                                    })
                                }
                                _ => return Err(ParseError::Const3NonLiteral { pos: arg.pos }),
                            };
                        }
                        self.expect_rparen(&name, pos, 3)?;
                        Ok(VecExpr::Const3(components[0], components[1], components[2]))
                    }
                    _ => Err(ParseError::UnknownOperator { pos, name }),
                }
            }
            Token::Number { .. } => Err(ParseError::TypeMismatch {
                pos: t.pos,
                op: "<vector position>".to_string(),
                expected: "vector",
            }),
            Token::Symbol(name) => Err(ParseError::UnexpectedToken {
                pos: t.pos,
                msg: format!("bare symbol `{name}` where a vector expression is expected"),
            }),
            Token::RParen => Err(ParseError::UnexpectedToken {
                pos: t.pos,
                msg: "`)` where a vector expression is expected".to_string(),
            }),
        }
    }
}

/// Parses constraint text into a scalar expression tree.
pub fn parse(text: &str) -> Result<ConstraintExpr, ParseError> {
    let tokens = lex(text)?;
    // A top-level vector form is reported as such, not as a type mismatch.
    if let [Spanned { token: Token::LParen, .. }, Spanned { token: Token::Symbol(name), .. }, ..] =
        tokens.as_slice()
    {
        if VEC_OPS.contains(&name.as_str()) {
            return Err(ParseError::NonScalarTopLevel { name: name.clone() });
        }
    }
    let mut parser = Parser { tokens, cursor: 0 };
    let root = parser.parse_scalar()?;
    if let Some(t) = parser.peek() {
        return Err(ParseError::TrailingInput { pos: t.pos });
    }
    Ok(ConstraintExpr::new(root))
}
