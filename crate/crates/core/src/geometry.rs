//! Camera model, SE(3) poses, rigid point-set registration, depth
//! calibration, and mask-based keypoint sampling.
//!
//! Everything here is a pure function over immutable inputs and safe to call
//! from multiple threads.

use nalgebra::{Matrix3, Matrix4, SymmetricEigen, Vector2, Vector3, SVD};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensorio::Tensor;

/// Orthonormality / determinant tolerance for rotation validation.
pub const ROTATION_TOL: f64 = 1e-9;

/// Reference depths outside (0, MAX_VALID_DEPTH] meters are treated as
/// invalid when no explicit mask is supplied.
pub const MAX_VALID_DEPTH: f64 = 10.0;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("rotation matrix is not a proper rotation (|R Rᵀ − I| = {orth:.3e}, det − 1 = {det:.3e})")]
    InvalidRotation { orth: f64, det: f64 },
    #[error("intrinsics invalid: {0}")]
    InvalidIntrinsics(String),
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("point has non-positive z = {0}, cannot project")]
    NonPositiveZ(f64),
    #[error("pixel ({x:.1}, {y:.1}) outside {width}x{height} image")]
    PixelOutOfBounds { x: f64, y: f64, width: usize, height: usize },
    #[error("rigid fit needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("rigid fit input is degenerate (collinear or coincident points)")]
    DegenerateConfiguration,
    #[error("point set size mismatch: {src} source vs {dst} destination")]
    SizeMismatch { src: usize, dst: usize },
    #[error("no valid pixels for depth calibration")]
    AllInvalid,
    #[error("estimated depth is constant over valid pixels, affine fit is rank-deficient")]
    RankDeficient,
    #[error("least-squares scale is non-positive ({0:.3e})")]
    NegativeScale(f64),
    #[error("depth map shape mismatch: {0:?} vs {1:?}")]
    DepthShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("mask is empty")]
    EmptyMask,
    #[error("mask has no interior pixels but {requested} interior samples requested")]
    NoInteriorPixels { requested: usize },
}

// ---------------------------------------------------------------------------
// Pose
// ---------------------------------------------------------------------------

/// Rigid-body transform: `p ↦ R p + t`. Rotation is a proper rotation
/// (orthonormal, det +1); translation in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Validates the rotation invariants before constructing.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let orth = (rotation * rotation.transpose() - Matrix3::identity()).norm();
        let det = rotation.determinant();
        if orth > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
            return Err(GeometryError::InvalidRotation { orth, det: det - 1.0 });
        }
        Ok(Self::from_parts_unchecked(rotation, translation))
    }

    /// Constructs without validation; for internal paths that produce
    /// rotations by construction (SVD, axis-angle exponential).
    pub(crate) fn from_parts_unchecked(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = rotation[(i, j)];
            }
        }
        Self {
            rotation: r,
            translation: [translation.x, translation.y, translation.z],
        }
    }

    pub fn from_rotvec_translation(rotvec: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self::from_parts_unchecked(rotation_from_rotvec(rotvec), translation)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.rotation[i][j])
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.translation[0], self.translation[1], self.translation[2])
    }

    /// Canonical rotation vector (axis · angle, angle ∈ [0, π]).
    pub fn rotation_vector(&self) -> Vector3<f64> {
        rotvec_from_rotation(&self.rotation())
    }

    pub fn is_valid(&self) -> bool {
        let r = self.rotation();
        let orth = (r * r.transpose() - Matrix3::identity()).norm();
        orth <= ROTATION_TOL && (r.determinant() - 1.0).abs() <= ROTATION_TOL
    }
}

/// `compose(a, b)`: apply `b` first, then `a`.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    let r = a.rotation() * b.rotation();
    let t = a.rotation() * b.translation() + a.translation();
    Pose::from_parts_unchecked(r, t)
}

/// Group inverse: `compose(a, invert(a))` is the identity.
pub fn invert(a: &Pose) -> Pose {
    let rt = a.rotation().transpose();
    Pose::from_parts_unchecked(rt, -(rt * a.translation()))
}

/// Applies the transform to a point.
pub fn apply(a: &Pose, p: Vector3<f64>) -> Vector3<f64> {
    a.rotation() * p + a.translation()
}

// --- rotation vector conversions -------------------------------------------

/// Rodrigues exponential: rotation vector (axis · angle) to matrix.
pub fn rotation_from_rotvec(rv: Vector3<f64>) -> Matrix3<f64> {
    let angle = rv.norm();
    if angle < 1e-300 {
        return Matrix3::identity();
    }
    let axis = rv / angle;
    let k = Matrix3::new(
        0.0, -axis.z, axis.y, //
        axis.z, 0.0, -axis.x, //
        -axis.y, axis.x, 0.0,
    );
    Matrix3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos())
}

/// Canonical logarithm: rotation matrix to axis · angle with angle ∈ [0, π].
///
/// At angle π the axis sign is ambiguous; the convention here is that the
/// first nonzero axis component is positive.
pub fn rotvec_from_rotation(r: &Matrix3<f64>) -> Vector3<f64> {
    // Quaternion extraction (Shepperd's method) is stable over all angles.
    let trace = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
    let (mut w, mut v);
    if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        w = 0.25 * s;
        v = Vector3::new(
            (r[(2, 1)] - r[(1, 2)]) / s,
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(1, 0)] - r[(0, 1)]) / s,
        );
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
        w = (r[(2, 1)] - r[(1, 2)]) / s;
        v = Vector3::new(
            0.25 * s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
        );
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
        w = (r[(0, 2)] - r[(2, 0)]) / s;
        v = Vector3::new(
            (r[(0, 1)] + r[(1, 0)]) / s,
            0.25 * s,
            (r[(1, 2)] + r[(2, 1)]) / s,
        );
    } else {
        let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
        w = (r[(1, 0)] - r[(0, 1)]) / s;
        v = Vector3::new(
            (r[(0, 2)] + r[(2, 0)]) / s,
            (r[(1, 2)] + r[(2, 1)]) / s,
            0.25 * s,
        );
    }
    // Force w ≥ 0 so the angle lands in [0, π].
    if w < 0.0 {
        w = -w;
        v = -v;
    }
    let sin_half = v.norm();
    if sin_half < 1e-12 {
        return Vector3::zeros();
    }
    let angle = 2.0 * sin_half.atan2(w);
    let mut axis = v / sin_half;
    // Antipodal convention at angle π: first nonzero axis component positive.
    if (std::f64::consts::PI - angle).abs() < 1e-9 {
        for i in 0..3 {
            if axis[i].abs() > 1e-12 {
                if axis[i] < 0.0 {
                    axis = -axis;
                }
                break;
            }
        }
    }
    axis * angle
}

// ---------------------------------------------------------------------------
// Camera model
// ---------------------------------------------------------------------------

/// Pinhole intrinsics, pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={}, fy={}",
                self.fx, self.fy
            )));
        }
        if !(0.0 <= self.cx && self.cx < self.width as f64)
            || !(0.0 <= self.cy && self.cy < self.height as f64)
        {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn contains(&self, px: Vector2<f64>) -> bool {
        px.x >= 0.0 && px.x < self.width as f64 && px.y >= 0.0 && px.y < self.height as f64
    }
}

/// Back-projects a pixel at the given depth into the camera frame.
pub fn back_project(
    px: Vector2<f64>,
    depth: f64,
    intr: &Intrinsics,
) -> Result<Vector3<f64>, GeometryError> {
    if depth <= 0.0 {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    if !intr.contains(px) {
        return Err(GeometryError::PixelOutOfBounds {
            x: px.x,
            y: px.y,
            width: intr.width,
            height: intr.height,
        });
    }
    Ok(Vector3::new(
        (px.x - intr.cx) * depth / intr.fx,
        (px.y - intr.cy) * depth / intr.fy,
        depth,
    ))
}

/// Pinhole projection of a camera-frame point.
pub fn project(p: Vector3<f64>, intr: &Intrinsics) -> Result<Vector2<f64>, GeometryError> {
    if p.z <= 0.0 {
        return Err(GeometryError::NonPositiveZ(p.z));
    }
    Ok(Vector2::new(
        intr.fx * p.x / p.z + intr.cx,
        intr.fy * p.y / p.z + intr.cy,
    ))
}

// ---------------------------------------------------------------------------
// Rigid registration (Kabsch/Umeyama without scale)
// ---------------------------------------------------------------------------

/// Result of a rigid fit: the pose mapping `src` onto `dst` and the weighted
/// RMS residual in meters.
#[derive(Debug, Clone, Copy)]
pub struct RigidFit {
    pub pose: Pose,
    pub residual: f64,
}

/// Least-squares rigid transform minimizing Σ wⱼ ‖R srcⱼ + t − dstⱼ‖².
///
/// SVD solution with determinant sign-correction, so the result is always a
/// proper rotation even for mirrored inputs. Residual is the weighted RMS
/// point error.
pub fn fit_rigid(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    weights: Option<&[f64]>,
) -> Result<RigidFit, GeometryError> {
    if src.len() != dst.len() {
        return Err(GeometryError::SizeMismatch {
            src: src.len(),
            dst: dst.len(),
        });
    }
    if src.len() < 3 {
        return Err(GeometryError::TooFewPoints(src.len()));
    }
    let uniform = vec![1.0; src.len()];
    let w = weights.unwrap_or(&uniform);
    if w.len() != src.len() {
        return Err(GeometryError::SizeMismatch {
            src: src.len(),
            dst: w.len(),
        });
    }
    let w_sum: f64 = w.iter().sum();
    if w_sum <= 0.0 {
        return Err(GeometryError::DegenerateConfiguration);
    }

    let mut mu_s = Vector3::zeros();
    let mut mu_d = Vector3::zeros();
    for ((s, d), &wi) in src.iter().zip(dst).zip(w) {
        mu_s += wi * s;
        mu_d += wi * d;
    }
    mu_s /= w_sum;
    mu_d /= w_sum;

    // Cross-covariance H = Σ w (dst − μd)(src − μs)ᵀ.
    let mut h = Matrix3::zeros();
    let mut spread = 0.0;
    for ((s, d), &wi) in src.iter().zip(dst).zip(w) {
        let sc = s - mu_s;
        let dc = d - mu_d;
        h += wi * dc * sc.transpose();
        spread += wi * sc.norm_squared();
    }
    if spread <= 1e-24 {
        // All source points coincide.
        return Err(GeometryError::DegenerateConfiguration);
    }

    let svd = SVD::new(h, true, true);
    let u = svd.u.ok_or(GeometryError::DegenerateConfiguration)?;
    let v_t = svd.v_t.ok_or(GeometryError::DegenerateConfiguration)?;
    // Collinear sources leave the rotation about the line unconstrained:
    // two singular values of H vanish.
    let sv = &svd.singular_values;
    let max_sv = sv.max();
    if max_sv <= 0.0 || sv[1] <= max_sv * 1e-12 {
        return Err(GeometryError::DegenerateConfiguration);
    }

    let mut d_fix = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d_fix[(2, 2)] = -1.0;
    }
    let rotation = u * d_fix * v_t;
    let translation = mu_d - rotation * mu_s;

    let mut sq_err = 0.0;
    for ((s, d), &wi) in src.iter().zip(dst).zip(w) {
        sq_err += wi * (rotation * s + translation - d).norm_squared();
    }
    let residual = (sq_err / w_sum).max(0.0).sqrt();

    Ok(RigidFit {
        pose: Pose::from_parts_unchecked(rotation, translation),
        residual,
    })
}

/// Independent rigid-registration route used for cross-checking: Horn's
/// closed-form quaternion method (largest eigenvector of the 4×4 profile
/// matrix). Unweighted.
pub fn fit_rigid_quaternion_oracle(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
) -> Result<RigidFit, GeometryError> {
    if src.len() != dst.len() {
        return Err(GeometryError::SizeMismatch {
            src: src.len(),
            dst: dst.len(),
        });
    }
    if src.len() < 3 {
        return Err(GeometryError::TooFewPoints(src.len()));
    }
    let n = src.len() as f64;
    let mu_s: Vector3<f64> = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d: Vector3<f64> = dst.iter().sum::<Vector3<f64>>() / n;

    let mut m = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        m += (s - mu_s) * (d - mu_d).transpose();
    }
    let (sxx, sxy, sxz) = (m[(0, 0)], m[(0, 1)], m[(0, 2)]);
    let (syx, syy, syz) = (m[(1, 0)], m[(1, 1)], m[(1, 2)]);
    let (szx, szy, szz) = (m[(2, 0)], m[(2, 1)], m[(2, 2)]);
    let q = Matrix4::new(
        sxx + syy + szz, syz - szy, szx - sxz, sxy - syx, //
        syz - szy, sxx - syy - szz, sxy + syx, szx + sxz, //
        szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy, //
        sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz,
    );
    let eig = SymmetricEigen::new(q);
    let mut best = 0;
    for i in 1..4 {
        if eig.eigenvalues[i] > eig.eigenvalues[best] {
            best = i;
        }
    }
    let qv = eig.eigenvectors.column(best);
    let (w, x, y, z) = (qv[0], qv[1], qv[2], qv[3]);
    let rotation = Matrix3::new(
        1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y), //
        2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x), //
        2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y),
    );
    let translation = mu_d - rotation * mu_s;
    let mut sq_err = 0.0;
    for (s, d) in src.iter().zip(dst) {
        sq_err += (rotation * s + translation - d).norm_squared();
    }
    Ok(RigidFit {
        pose: Pose::from_parts_unchecked(rotation, translation),
        residual: (sq_err / n).sqrt(),
    })
}

/// Angle of the relative rotation between two poses, radians.
pub fn rotation_distance(a: &Pose, b: &Pose) -> f64 {
    let rel = a.rotation().transpose() * b.rotation();
    rotvec_from_rotation(&rel).norm()
}

// ---------------------------------------------------------------------------
// Depth calibration
// ---------------------------------------------------------------------------

/// Global affine depth correction: `metric = alpha · estimated + beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthCalibration {
    pub alpha: f64,
    pub beta: f64,
}

impl DepthCalibration {
    pub fn apply(&self, estimated: f64) -> f64 {
        self.alpha * estimated + self.beta
    }
}

/// Closed-form least squares for (α, β) minimizing Σ (α d̂ + β − d)² over
/// pairs. Errors if fewer than 2 pairs, the estimates are constant, or the
/// solution has α ≤ 0.
pub fn calibrate_depth_pairs(pairs: &[(f64, f64)]) -> Result<DepthCalibration, GeometryError> {
    if pairs.len() < 2 {
        return Err(GeometryError::AllInvalid);
    }
    let n = pairs.len() as f64;
    let mean_e = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_r = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let mut var_e = 0.0;
    let mut cov = 0.0;
    for &(e, r) in pairs {
        var_e += (e - mean_e) * (e - mean_e);
        cov += (e - mean_e) * (r - mean_r);
    }
    if var_e <= 1e-24 {
        return Err(GeometryError::RankDeficient);
    }
    let alpha = cov / var_e;
    if alpha <= 0.0 {
        return Err(GeometryError::NegativeScale(alpha));
    }
    Ok(DepthCalibration {
        alpha,
        beta: mean_r - alpha * mean_e,
    })
}

/// Fits (α, β) so that `alpha · estimated + beta ≈ reference` over pixels
/// where `valid_mask` is nonzero. Pass `None` to use the default validity
/// rule: reference depth in (0, [`MAX_VALID_DEPTH`]] meters.
pub fn calibrate_depth(
    estimated: &Tensor,
    reference: &Tensor,
    valid_mask: Option<&Tensor>,
) -> Result<DepthCalibration, GeometryError> {
    if estimated.dims() != reference.dims() {
        return Err(GeometryError::DepthShapeMismatch(
            estimated.dims().to_vec(),
            reference.dims().to_vec(),
        ));
    }
    if let Some(mask) = valid_mask {
        if mask.dims() != reference.dims() {
            return Err(GeometryError::DepthShapeMismatch(
                mask.dims().to_vec(),
                reference.dims().to_vec(),
            ));
        }
    }
    let mut pairs = Vec::new();
    for i in 0..reference.len() {
        let valid = match valid_mask {
            Some(mask) => mask.data()[i] != 0.0,
            None => {
                let r = f64::from(reference.data()[i]);
                r > 0.0 && r <= MAX_VALID_DEPTH
            }
        };
        if valid {
            pairs.push((f64::from(estimated.data()[i]), f64::from(reference.data()[i])));
        }
    }
    if pairs.is_empty() {
        return Err(GeometryError::AllInvalid);
    }
    calibrate_depth_pairs(&pairs)
}

// ---------------------------------------------------------------------------
// Mask-based keypoint sampling
// ---------------------------------------------------------------------------

/// Boolean mask view over an H×W tensor of 0.0/1.0 values.
pub struct MaskView<'a> {
    tensor: &'a Tensor,
    height: usize,
    width: usize,
}

impl<'a> MaskView<'a> {
    pub fn new(tensor: &'a Tensor) -> Result<Self, GeometryError> {
        if tensor.ndim() != 2 {
            return Err(GeometryError::DepthShapeMismatch(
                tensor.dims().to_vec(),
                vec![0, 0],
            ));
        }
        Ok(Self {
            tensor,
            height: tensor.dims()[0],
            width: tensor.dims()[1],
        })
    }

    pub fn get(&self, x: i64, y: i64) -> bool {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return false;
        }
        self.tensor.at2(y as usize, x as usize) != 0.0
    }
}

/// Samples keypoint pixels from a mask: the four axis-aligned extrema
/// (min-x, max-x, min-y, max-y, ties broken by the lower other coordinate)
/// plus `n_interior` uniform draws from interior pixels (pixels whose
/// 4-neighborhood lies inside the mask). Deterministic given the seed.
pub fn sample_keypoints(
    mask: &Tensor,
    n_interior: usize,
    seed: u64,
) -> Result<Vec<Vector2<f64>>, GeometryError> {
    let view = MaskView::new(mask)?;
    let mut on = Vec::new();
    for y in 0..view.height {
        for x in 0..view.width {
            if view.get(x as i64, y as i64) {
                on.push((x as i64, y as i64));
            }
        }
    }
    if on.is_empty() {
        return Err(GeometryError::EmptyMask);
    }

    // Extrema with deterministic tie-breaks: for min-x/max-x ties pick the
    // lower y; for min-y/max-y ties pick the lower x.
    let min_x = *on.iter().min_by_key(|p| (p.0, p.1)).expect("non-empty");
    let max_x = *on.iter().max_by_key(|p| (p.0, -p.1)).expect("non-empty");
    let min_y = *on.iter().min_by_key(|p| (p.1, p.0)).expect("non-empty");
    let max_y = *on.iter().max_by_key(|p| (p.1, -p.0)).expect("non-empty");
    let mut points: Vec<Vector2<f64>> = [min_x, max_x, min_y, max_y]
        .iter()
        .map(|&(x, y)| Vector2::new(x as f64, y as f64))
        .collect();

    if n_interior > 0 {
        let interior: Vec<(i64, i64)> = on
            .iter()
            .copied()
            .filter(|&(x, y)| {
                view.get(x - 1, y) && view.get(x + 1, y) && view.get(x, y - 1) && view.get(x, y + 1)
            })
            .collect();
        if interior.is_empty() {
            return Err(GeometryError::NoInteriorPixels {
                requested: n_interior,
            });
        }
        let mut rng = crate::seeding::rng_from(seed);
        for _ in 0..n_interior {
            let (x, y) = interior[rng.random_range(0..interior.len())];
            points.push(Vector2::new(x as f64, y as f64));
        }
    }
    Ok(points)
}
