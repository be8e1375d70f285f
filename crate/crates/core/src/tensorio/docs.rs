//! JSON document schemas shared across the pipeline: scenes, constraint
//! files, and run reports. All loads validate invariants and report the
//! offending field path; malformed input never panics.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraint::{Constraint, ConstraintSet};
use crate::geometry::{Intrinsics, Pose};
use crate::tensorio::{load_tensor, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DocError {
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
    #[error("JSON syntax: {0}")]
    Json(#[from] serde_json::Error),
    #[error("schema violation at `{path}`: {message}")]
    Invalid { path: String, message: String },
    #[error("constraint `{name}` does not parse: {source}")]
    ConstraintParse {
        name: String,
        source: crate::constraint::ParseError,
    },
    #[error(transparent)]
    Constraint(#[from] crate::constraint::ConstraintError),
    #[error("tensor load: {0}")]
    Tensor(#[from] TensorError),
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> DocError {
    DocError::Invalid {
        path: path.into(),
        message: message.into(),
    }
}

// ---------------------------------------------------------------------------
// Scene
// ---------------------------------------------------------------------------

/// One task-relevant entity: a keypointed object, optionally with a mask.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Entity {
    pub id: String,
    /// Keypoints in the camera frame at the initial observation, meters.
    pub keypoints_3d: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
}

/// Initial observation of a manipulation scene.
///
/// All 3D quantities live in the camera frame; keypoint indices used by
/// constraints are global, with entities concatenated in file order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneDoc {
    pub intrinsics: Intrinsics,
    pub entities: Vec<Entity>,
    pub grasped_entity: String,
    pub grasp_transform: Pose,
    /// `[min_xyz, max_xyz]`, meters.
    pub workspace_aabb: [[f64; 3]; 2],
    /// Ground-truth depth tensor (H×W), relative to the scene file's directory.
    pub depth_path: String,
}

impl SceneDoc {
    pub fn validate(&self) -> Result<(), DocError> {
        self.intrinsics
            .validate()
            .map_err(|e| invalid("intrinsics", e.to_string()))?;

        let mut seen = std::collections::HashSet::new();
        for (i, e) in self.entities.iter().enumerate() {
            if !seen.insert(e.id.clone()) {
                return Err(invalid(
                    format!("entities[{i}].id"),
                    format!("duplicate entity id `{}`", e.id),
                ));
            }
            for (j, kp) in e.keypoints_3d.iter().enumerate() {
                if !kp.iter().all(|v| v.is_finite()) {
                    return Err(invalid(
                        format!("entities[{i}].keypoints_3d[{j}]"),
                        "non-finite coordinate",
                    ));
                }
            }
        }

        let grasped = self
            .entity_index(&self.grasped_entity)
            .ok_or_else(|| {
                invalid(
                    "grasped_entity",
                    format!("no entity with id `{}`", self.grasped_entity),
                )
            })?;
        if self.entities[grasped].keypoints_3d.len() < 3 {
            return Err(invalid(
                format!("entities[{grasped}].keypoints_3d"),
                "grasped entity needs at least 3 keypoints for a rigid fit",
            ));
        }

        if !self.grasp_transform.is_valid() {
            return Err(invalid(
                "grasp_transform.rotation",
                "not a proper rotation matrix",
            ));
        }

        let [lo, hi] = self.workspace_aabb;
        for a in 0..3 {
            if !(lo[a].is_finite() && hi[a].is_finite() && lo[a] < hi[a]) {
                return Err(invalid(
                    "workspace_aabb",
                    format!("min must be strictly below max on axis {a}"),
                ));
            }
        }
        Ok(())
    }

    pub fn entity_index(&self, id: &str) -> Option<usize> {
        self.entities.iter().position(|e| e.id == id)
    }

    pub fn grasped_index(&self) -> usize {
        self.entity_index(&self.grasped_entity)
            .expect("validated scene")
    }

    pub fn total_keypoints(&self) -> usize {
        self.entities.iter().map(|e| e.keypoints_3d.len()).sum()
    }

    /// Global keypoint index range of entity `index` (entities concatenated
    /// in file order).
    pub fn keypoint_range(&self, index: usize) -> std::ops::Range<usize> {
        let start: usize = self.entities[..index]
            .iter()
            .map(|e| e.keypoints_3d.len())
            .sum();
        start..start + self.entities[index].keypoints_3d.len()
    }

    /// Initial keypoint configuration in global order.
    pub fn initial_keypoints(&self) -> Vec<Vector3<f64>> {
        self.entities
            .iter()
            .flat_map(|e| e.keypoints_3d.iter().map(|k| Vector3::new(k[0], k[1], k[2])))
            .collect()
    }

    /// Loads the ground-truth depth tensor, resolving `depth_path` relative
    /// to `scene_dir`.
    pub fn load_depth(&self, scene_dir: &Path) -> Result<Tensor, DocError> {
        let t = load_tensor(scene_dir.join(&self.depth_path))?;
        if t.ndim() != 2 {
            return Err(invalid(
                "depth_path",
                format!("depth tensor must be 2-D, got {:?}", t.dims()),
            ));
        }
        Ok(t)
    }
}

pub fn load_scene<P: AsRef<Path>>(path: P) -> Result<SceneDoc, DocError> {
    let file = File::open(path.as_ref())?;
    let doc: SceneDoc = serde_json::from_reader(BufReader::new(file))?;
    doc.validate()?;
    Ok(doc)
}

pub fn save_scene<P: AsRef<Path>>(doc: &SceneDoc, path: P) -> Result<(), DocError> {
    doc.validate()?;
    write_json_pretty(doc, path.as_ref())
}

/// Directory containing a scene file; mask/depth paths resolve against it.
pub fn scene_dir(scene_path: &Path) -> PathBuf {
    scene_path.parent().unwrap_or(Path::new(".")).to_path_buf()
}

// ---------------------------------------------------------------------------
// Constraint files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ConstraintEntry {
    name: String,
    expr: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    window: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ConstraintFile {
    constraints: Vec<ConstraintEntry>,
}

/// Parses constraint JSON text into a validated set.
pub fn constraints_from_str(text: &str) -> Result<ConstraintSet, DocError> {
    let file: ConstraintFile = serde_json::from_str(text)?;
    let mut out = Vec::with_capacity(file.constraints.len());
    for entry in file.constraints {
        let expr = crate::constraint::parse(&entry.expr).map_err(|source| {
            DocError::ConstraintParse {
                name: entry.name.clone(),
                source,
            }
        })?;
        out.push(Constraint {
            name: entry.name,
            expr,
            window: entry
                .window
                .map_or((0.0, 1.0), |w| (w[0], w[1])),
        });
    }
    Ok(ConstraintSet::new(out)?)
}

pub fn load_constraints<P: AsRef<Path>>(path: P) -> Result<ConstraintSet, DocError> {
    let text = std::fs::read_to_string(path.as_ref())?;
    constraints_from_str(&text)
}

pub fn save_constraints<P: AsRef<Path>>(cs: &ConstraintSet, path: P) -> Result<(), DocError> {
    let file = ConstraintFile {
        constraints: cs
            .constraints()
            .iter()
            .map(|c| ConstraintEntry {
                name: c.name.clone(),
                expr: c.expr.pretty(),
                window: (c.window != (0.0, 1.0)).then_some([c.window.0, c.window.1]),
            })
            .collect(),
    };
    write_json_pretty(&file, path.as_ref())
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

/// Per-rollout scoring record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub index: usize,
    pub s_vis: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_spatial: Option<f64>,
    pub accepted: bool,
    /// Present when spatial evaluation failed; such candidates are rejected.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_error: Option<String>,
}

/// One optimizer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub objective: f64,
    pub constraint_term: f64,
    pub fidelity_term: f64,
    pub max_violation: f64,
}

/// Full run record: rollout scores, selection outcome, optimizer trace, and
/// the final trajectory.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ReportDoc {
    pub rollouts: Vec<RolloutRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_index: Option<usize>,
    #[serde(default)]
    pub fallback: bool,
    #[serde(default)]
    pub trace: Vec<TraceRow>,
    #[serde(default)]
    pub final_trajectory: Vec<Pose>,
}

impl ReportDoc {
    pub fn validate(&self) -> Result<(), DocError> {
        let accepted = self.rollouts.iter().filter(|r| r.accepted).count();
        if self.fallback {
            if accepted != 0 {
                return Err(invalid(
                    "rollouts",
                    "fallback reports must have no accepted rollout",
                ));
            }
        } else if !self.rollouts.is_empty() && accepted != 1 {
            return Err(invalid(
                "rollouts",
                format!("expected exactly one accepted rollout, found {accepted}"),
            ));
        }
        for (i, r) in self.rollouts.iter().enumerate() {
            if r.accepted && r.s_spatial.is_none() {
                return Err(invalid(
                    format!("rollouts[{i}]"),
                    "accepted rollout must carry a spatial score",
                ));
            }
        }
        if let Some(sel) = self.selected_index {
            if !self.rollouts.iter().any(|r| r.index == sel) {
                return Err(invalid(
                    "selected_index",
                    format!("selected index {sel} has no rollout record"),
                ));
            }
        }
        for (i, p) in self.final_trajectory.iter().enumerate() {
            if !p.is_valid() {
                return Err(invalid(
                    format!("final_trajectory[{i}]"),
                    "not a proper rotation",
                ));
            }
        }
        Ok(())
    }
}

pub fn load_report<P: AsRef<Path>>(path: P) -> Result<ReportDoc, DocError> {
    let file = File::open(path.as_ref())?;
    let doc: ReportDoc = serde_json::from_reader(BufReader::new(file))?;
    doc.validate()?;
    Ok(doc)
}

pub fn save_report<P: AsRef<Path>>(doc: &ReportDoc, path: P) -> Result<(), DocError> {
    doc.validate()?;
    write_json_pretty(doc, path.as_ref())
}

fn write_json_pretty<T: Serialize>(value: &T, path: &Path) -> Result<(), DocError> {
    let file = File::create(path)?;
    let mut writer = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut writer, value)?;
    writer.write_all(b"\n")?;
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;

    pub(crate) fn minimal_scene() -> SceneDoc {
        SceneDoc {
            intrinsics: Intrinsics {
                fx: 600.0,
                fy: 600.0,
                cx: 320.0,
                cy: 240.0,
                width: 640,
                height: 480,
            },
            entities: vec![Entity {
                id: "block".into(),
                keypoints_3d: vec![
                    [0.0, 0.0, 1.0],
                    [0.1, 0.0, 1.0],
                    [0.0, 0.1, 1.1],
                ],
                mask_path: None,
            }],
            grasped_entity: "block".into(),
            grasp_transform: Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 1.0)).unwrap(),
            workspace_aabb: [[-0.5, -0.5, 0.2], [0.5, 0.5, 1.5]],
            depth_path: "depth.eatn".into(),
        }
    }

    #[test]
    fn minimal_scene_validates() {
        minimal_scene().validate().unwrap();
    }

    #[test]
    fn dangling_grasped_entity() {
        let mut scene = minimal_scene();
        scene.grasped_entity = "cup".into();
        let err = scene.validate().unwrap_err();
        assert!(err.to_string().contains("grasped_entity"));
        assert!(err.to_string().contains("cup"));
    }

    #[test]
    fn duplicate_entity_ids() {
        let mut scene = minimal_scene();
        scene.entities.push(scene.entities[0].clone());
        let err = scene.validate().unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn degenerate_aabb() {
        let mut scene = minimal_scene();
        scene.workspace_aabb[1][2] = scene.workspace_aabb[0][2];
        assert!(scene.validate().is_err());
    }

    #[test]
    fn too_few_grasped_keypoints() {
        let mut scene = minimal_scene();
        scene.entities[0].keypoints_3d.truncate(2);
        assert!(scene.validate().is_err());
    }

    #[test]
    fn scene_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.json");
        save_scene(&minimal_scene(), &path).unwrap();
        let loaded = load_scene(&path).unwrap();
        assert_eq!(loaded.total_keypoints(), 3);
        assert_eq!(loaded.keypoint_range(0), 0..3);
    }

    #[test]
    fn constraint_file_round_trip() {
        let text = r#"{
            "constraints": [
                {"name": "close", "expr": "(sub (norm (vsub (kp 0) (kp 1))) 0.1)"},
                {"name": "goal", "expr": "(z (kp 2))", "window": [0.8, 1.0]}
            ]
        }"#;
        let cs = constraints_from_str(text).unwrap();
        assert_eq!(cs.len(), 2);
        assert_eq!(cs.constraints()[1].window, (0.8, 1.0));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("constraints.json");
        save_constraints(&cs, &path).unwrap();
        assert_eq!(load_constraints(&path).unwrap(), cs);
    }

    #[test]
    fn constraint_parse_error_names_constraint() {
        let text = r#"{"constraints": [{"name": "broken", "expr": "(norm 3.0)"}]}"#;
        let err = constraints_from_str(text).unwrap_err();
        assert!(err.to_string().contains("broken"));
    }

    #[test]
    fn report_accept_invariant() {
        let mut doc = ReportDoc {
            rollouts: vec![
                RolloutRecord {
                    index: 0,
                    s_vis: 0.1,
                    s_spatial: Some(0.0),
                    accepted: true,
                    eval_error: None,
                },
                RolloutRecord {
                    index: 1,
                    s_vis: 0.2,
                    s_spatial: None,
                    accepted: false,
                    eval_error: None,
                },
            ],
            selected_index: Some(0),
            fallback: false,
            trace: vec![],
            final_trajectory: vec![],
        };
        doc.validate().unwrap();

        doc.rollouts[1].accepted = true;
        assert!(doc.validate().is_err());

        doc.rollouts[0].accepted = false;
        doc.rollouts[1].accepted = false;
        assert!(doc.validate().is_err());
        doc.fallback = true;
        doc.validate().unwrap();
    }
}
