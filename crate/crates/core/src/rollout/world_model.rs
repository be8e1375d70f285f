//! Latent world-model interface and the visual plausibility score.
//!
//! The score slides a context/prediction window over a rollout's frame
//! features: at each anchor the model predicts the latent encoding of the
//! full window from the context alone, and the discrepancy is one minus the
//! cosine between prediction and observation, averaged over anchors. Lower
//! means more predictable dynamics.

use std::collections::HashMap;
use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WorldModelError {
    #[error("context window holds {got} frames, need at least 2 for a velocity estimate")]
    WindowTooShort { got: usize },
    #[error("rollout of {t} frames is too short for context {c} + horizon {m}: empty anchor set")]
    EmptyAnchorSet { t: usize, c: usize, m: usize },
    #[error("frame feature length changed mid-rollout: {got} vs {expected}")]
    InconsistentFeatures { got: usize, expected: usize },
}

/// Behavior contract of a latent video world model.
///
/// `encode` maps a window of frame features to a latent vector; `predict`
/// forecasts the latent encoding of the context-plus-horizon window from the
/// context frames alone. Both must be deterministic. A learned model can
/// stand in by implementing this trait.
pub trait LatentWorldModel: Send + Sync {
    fn latent_dim(&self) -> usize;
    /// Context length C, frames.
    fn context_len(&self) -> usize;
    /// Prediction horizon M, frames.
    fn horizon(&self) -> usize;
    /// Anchor stride, frames.
    fn stride(&self) -> usize;
    fn encode(&self, window: &[Vec<f64>]) -> Vec<f64>;
    fn predict(&self, context: &[Vec<f64>], horizon: usize) -> Result<Vec<f64>, WorldModelError>;
}

/// Desk-scale deterministic world model.
///
/// `encode` is the window mean of frame features pushed through a fixed
/// seeded orthonormal map; `predict` extrapolates at constant velocity in
/// latent space from the last two context-step encodings. Exact on frame
/// features that vary linearly in time, so any discrepancy comes from
/// non-linearity or injected corruption.
pub struct ToyWorldModel {
    latent_dim: usize,
    context_len: usize,
    horizon: usize,
    stride: usize,
    seed: u64,
    maps: Mutex<HashMap<usize, DMatrix<f64>>>,
}

impl ToyWorldModel {
    pub fn new(latent_dim: usize, context_len: usize, horizon: usize, stride: usize, seed: u64) -> Self {
        assert!(latent_dim >= 4, "latent dimension must be at least 4");
        assert!(context_len >= 2 && horizon >= 1 && stride >= 1);
        Self {
            latent_dim,
            context_len,
            horizon,
            stride,
            seed,
            maps: Mutex::new(HashMap::new()),
        }
    }

    /// Defaults: d = 32, C = 4, M = 2, stride = 1.
    pub fn with_defaults(seed: u64) -> Self {
        Self::new(32, 4, 2, 1, seed)
    }

    /// Orthonormal d×F map derived from (seed, F); cached per feature size.
    fn map_for(&self, feature_dim: usize) -> DMatrix<f64> {
        let mut maps = self.maps.lock().expect("map cache poisoned");
        maps.entry(feature_dim)
            .or_insert_with(|| orthonormal_map(self.latent_dim, feature_dim, self.seed))
            .clone()
    }

    fn project(&self, feature: &[f64]) -> DVector<f64> {
        let map = self.map_for(feature.len());
        map * DVector::from_column_slice(feature)
    }
}

/// d×F matrix with orthonormal rows (d ≤ F) or orthonormal columns (d > F),
/// derived deterministically from the seed via QR of a Gaussian matrix.
fn orthonormal_map(d: usize, f: usize, seed: u64) -> DMatrix<f64> {
    let m = d.max(f);
    let mut rng = crate::seeding::rng_for(seed, "wm-map", f as u64);
    let gauss: DMatrix<f64> = DMatrix::from_fn(m, m, |_, _| {
        // Box-Muller keeps this independent of distribution-crate internals.
        let u1: f64 = rng.random_range(f64::EPSILON..1.0);
        let u2: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        (-2.0 * u1.ln()).sqrt() * u2.cos()
    });
    let qr = gauss.qr();
    let q = qr.q();
    let mut out = DMatrix::zeros(d, f);
    if d <= f {
        // First d rows of Qᵀ: orthonormal rows.
        for i in 0..d {
            for j in 0..f {
                out[(i, j)] = q[(j, i)];
            }
        }
    } else {
        // First f columns of Q: orthonormal columns.
        for i in 0..d {
            for j in 0..f {
                out[(i, j)] = q[(i, j)];
            }
        }
    }
    out
}

impl LatentWorldModel for ToyWorldModel {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn context_len(&self) -> usize {
        self.context_len
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn stride(&self) -> usize {
        self.stride
    }

    fn encode(&self, window: &[Vec<f64>]) -> Vec<f64> {
        assert!(!window.is_empty(), "encode needs at least one frame");
        let feature_dim = window[0].len();
        let mut mean = vec![0.0; feature_dim];
        for frame in window {
            for (m, v) in mean.iter_mut().zip(frame) {
                *m += v;
            }
        }
        let n = window.len() as f64;
        for m in &mut mean {
            *m /= n;
        }
        self.project(&mean).as_slice().to_vec()
    }

    fn predict(&self, context: &[Vec<f64>], horizon: usize) -> Result<Vec<f64>, WorldModelError> {
        if context.len() < 2 {
            return Err(WorldModelError::WindowTooShort { got: context.len() });
        }
        let len = context.len();
        let prev = self.project(&context[len - 2]);
        let last = self.project(&context[len - 1]);
        let velocity = &last - &prev;
        // The prediction target is encode(full C+M window), whose mean sits
        // (M − C + 1)/2 steps past the last context frame.
        let steps = (horizon as f64 - len as f64 + 1.0) / 2.0;
        Ok((last + velocity * steps).as_slice().to_vec())
    }
}

/// Mean cosine discrepancy between predicted and observed window encodings
/// over the anchor set {C, C+stride, …, T−M}. Zero-norm latents contribute
/// discrepancy 1. Always in [0, 2].
pub fn visual_plausibility(
    frames: &[Vec<f64>],
    wm: &dyn LatentWorldModel,
) -> Result<f64, WorldModelError> {
    let t = frames.len();
    let c = wm.context_len();
    let m = wm.horizon();
    if t < c + m {
        return Err(WorldModelError::EmptyAnchorSet { t, c, m });
    }
    let feature_dim = frames.first().map_or(0, |f| f.len());
    for f in frames {
        if f.len() != feature_dim {
            return Err(WorldModelError::InconsistentFeatures {
                got: f.len(),
                expected: feature_dim,
            });
        }
    }

    let mut total = 0.0;
    let mut count = 0usize;
    let mut s = c;
    while s + m <= t {
        // 1-based anchor s: context frames s−C+1..s, observation window
        // s−C+1..s+M; 0-based slice ranges below.
        let context = &frames[s - c..s];
        let window = &frames[s - c..s + m];
        let predicted = DVector::from_vec(wm.predict(context, m)?);
        let observed = DVector::from_vec(wm.encode(window));
        let np = predicted.norm();
        let no = observed.norm();
        let term = if np == 0.0 || no == 0.0 {
            1.0
        } else {
            1.0 - predicted.dot(&observed) / (np * no)
        };
        total += term;
        count += 1;
        s += wm.stride();
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_frames(t: usize, f: usize, v: f64) -> Vec<Vec<f64>> {
        vec![vec![v; f]; t]
    }

    #[test]
    fn constant_frames_have_zero_discrepancy() {
        let wm = ToyWorldModel::new(8, 4, 2, 1, 7);
        let frames = constant_frames(12, 10, 0.5);
        let score = visual_plausibility(&frames, &wm).unwrap();
        assert!(score.abs() < 1e-12, "score = {score}");
    }

    #[test]
    fn linear_frames_are_predicted_exactly() {
        let wm = ToyWorldModel::new(8, 4, 2, 1, 7);
        let frames: Vec<Vec<f64>> = (0..16)
            .map(|t| (0..10).map(|j| 0.3 + 0.01 * t as f64 + 0.05 * j as f64).collect())
            .collect();
        let score = visual_plausibility(&frames, &wm).unwrap();
        assert!(score.abs() < 1e-9, "score = {score}");
    }

    #[test]
    fn step_discontinuity_scores_positive() {
        // The jump must change the feature direction, not just its scale:
        // cosine discrepancy is invariant to uniform scaling.
        let wm = ToyWorldModel::new(8, 4, 2, 1, 7);
        let mut frames = constant_frames(16, 10, 0.5);
        for frame in frames.iter_mut().skip(8) {
            for v in frame.iter_mut().take(5) {
                *v = 2.5;
            }
        }
        let score = visual_plausibility(&frames, &wm).unwrap();
        assert!(score > 1e-6, "score = {score}");
        assert!(score <= 2.0);
    }

    #[test]
    fn too_short_rollout_is_an_error() {
        let wm = ToyWorldModel::new(8, 4, 2, 1, 7);
        let frames = constant_frames(5, 10, 1.0);
        assert!(matches!(
            visual_plausibility(&frames, &wm),
            Err(WorldModelError::EmptyAnchorSet { .. })
        ));
    }

    #[test]
    fn score_stays_in_range_on_random_frames() {
        let wm = ToyWorldModel::new(8, 4, 2, 1, 3);
        let mut rng = crate::seeding::rng_from(99);
        for _ in 0..50 {
            let frames: Vec<Vec<f64>> = (0..10)
                .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let score = visual_plausibility(&frames, &wm).unwrap();
            assert!((0.0..=2.0).contains(&score));
        }
    }

    #[test]
    fn orthonormal_map_shapes() {
        let wide = orthonormal_map(4, 10, 1);
        let gram = &wide * wide.transpose();
        assert!((gram - DMatrix::<f64>::identity(4, 4)).norm() < 1e-10);

        let tall = orthonormal_map(10, 4, 1);
        let gram = tall.transpose() * &tall;
        assert!((gram - DMatrix::<f64>::identity(4, 4)).norm() < 1e-10);
    }

    #[test]
    fn encode_is_deterministic_across_instances() {
        let a = ToyWorldModel::new(8, 4, 2, 1, 42);
        let b = ToyWorldModel::new(8, 4, 2, 1, 42);
        let frames = constant_frames(6, 9, 0.7);
        assert_eq!(a.encode(&frames), b.encode(&frames));
    }
}
