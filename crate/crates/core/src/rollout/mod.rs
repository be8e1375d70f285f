//! Candidate rollout data model, the synthetic generator standing in for a
//! video generative model, and the latent-world-model plausibility score.

mod generate;
mod world_model;

pub use generate::{
    generate_rollout, nominal_plan, GenerateError, GeneratedRollout, HallucinationMode,
    HallucinationSpec, MotionPlan, NoiseSpec, TaskTemplate,
};
pub use world_model::{visual_plausibility, LatentWorldModel, ToyWorldModel, WorldModelError};

use std::path::Path;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Intrinsics;
use crate::tensorio::{load_tensor, save_tensor, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("tensor: {0}")]
    Tensor(#[from] TensorError),
    #[error("meta.json: {0}")]
    Meta(#[from] serde_json::Error),
    #[error("rollout arrays disagree on {what}: {got} vs {expected}")]
    Inconsistent {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("visible track ({x:.1}, {y:.1}) at frame {frame}, keypoint {keypoint} is out of bounds")]
    TrackOutOfBounds {
        frame: usize,
        keypoint: usize,
        x: f64,
        y: f64,
    },
    #[error("depth tensor must be 2-D (per-keypoint) or 3-D (full frames), got {0} dims")]
    BadDepthRank(usize),
}

/// Estimated depth attached to a rollout: the compact per-keypoint form
/// (default) or full per-frame maps.
#[derive(Debug, Clone, PartialEq)]
pub enum DepthData {
    /// T×K estimated depth at each tracked pixel.
    PerKeypoint(Vec<Vec<f64>>),
    /// T frames of H×W estimated depth, row-major.
    Full {
        height: usize,
        width: usize,
        frames: Vec<Vec<f64>>,
    },
}

impl DepthData {
    pub fn frame_count(&self) -> usize {
        match self {
            DepthData::PerKeypoint(rows) => rows.len(),
            DepthData::Full { frames, .. } => frames.len(),
        }
    }
}

/// Generation metadata carried alongside each rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutMeta {
    pub seed: u64,
    pub injected_mode: HallucinationMode,
    pub template: String,
    pub magnitude: f64,
    pub onset_frac: f64,
    pub track_sigma_px: f64,
    pub depth_alpha_true: f64,
    pub depth_beta_true: f64,
    pub depth_sigma: f64,
}

/// One candidate rollout: latent frame features, 2D keypoint tracks,
/// estimated depth, and per-keypoint visibility.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// T×F frame features (F = 3K + 1: flattened keypoints + mean depth).
    pub frames: Vec<Vec<f64>>,
    /// T×K pixel tracks.
    pub tracks: Vec<Vec<Vector2<f64>>>,
    pub est_depth: DepthData,
    /// T×K; invisible keypoints freeze at their last visible estimate.
    pub visibility: Vec<Vec<bool>>,
    pub meta: RolloutMeta,
}

impl Rollout {
    pub fn frame_count(&self) -> usize {
        self.tracks.len()
    }

    pub fn keypoint_count(&self) -> usize {
        self.tracks.first().map_or(0, |r| r.len())
    }

    /// Shape consistency across all arrays.
    pub fn validate(&self) -> Result<(), RolloutError> {
        let t = self.tracks.len();
        let k = self.keypoint_count();
        let check = |what, got, expected| {
            if got != expected {
                Err(RolloutError::Inconsistent { what, got, expected })
            } else {
                Ok(())
            }
        };
        check("frame count (features)", self.frames.len(), t)?;
        check("frame count (visibility)", self.visibility.len(), t)?;
        check("frame count (depth)", self.est_depth.frame_count(), t)?;
        for row in &self.tracks {
            check("keypoints per track row", row.len(), k)?;
        }
        for row in &self.visibility {
            check("keypoints per visibility row", row.len(), k)?;
        }
        if let DepthData::PerKeypoint(rows) = &self.est_depth {
            for row in rows {
                check("keypoints per depth row", row.len(), k)?;
            }
        }
        Ok(())
    }

    /// Shape consistency plus the visible-tracks-in-bounds invariant.
    pub fn validate_against(&self, intr: &Intrinsics) -> Result<(), RolloutError> {
        self.validate()?;
        for (t, (row, vis)) in self.tracks.iter().zip(&self.visibility).enumerate() {
            for (k, (px, &v)) in row.iter().zip(vis).enumerate() {
                if v && !intr.contains(*px) {
                    return Err(RolloutError::TrackOutOfBounds {
                        frame: t,
                        keypoint: k,
                        x: px.x,
                        y: px.y,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Writes a rollout as `dir/{frames,tracks,depth,visibility}.eatn` plus
/// `dir/meta.json`.
pub fn save_rollout_dir(rollout: &Rollout, dir: &Path) -> Result<(), RolloutError> {
    rollout.validate()?;
    std::fs::create_dir_all(dir)?;
    let t = rollout.frame_count();
    let k = rollout.keypoint_count();
    let f = rollout.frames.first().map_or(0, |r| r.len());

    let frames_flat: Vec<f64> = rollout.frames.iter().flatten().copied().collect();
    save_tensor(&Tensor::from_f64(vec![t, f], &frames_flat)?, dir.join("frames.eatn"))?;

    let tracks_flat: Vec<f64> = rollout
        .tracks
        .iter()
        .flatten()
        .flat_map(|p| [p.x, p.y])
        .collect();
    save_tensor(
        &Tensor::from_f64(vec![t, k, 2], &tracks_flat)?,
        dir.join("tracks.eatn"),
    )?;

    match &rollout.est_depth {
        DepthData::PerKeypoint(rows) => {
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            save_tensor(&Tensor::from_f64(vec![t, k], &flat)?, dir.join("depth.eatn"))?;
        }
        DepthData::Full { height, width, frames } => {
            let flat: Vec<f64> = frames.iter().flatten().copied().collect();
            save_tensor(
                &Tensor::from_f64(vec![t, *height, *width], &flat)?,
                dir.join("depth.eatn"),
            )?;
        }
    }

    let vis_flat: Vec<f64> = rollout
        .visibility
        .iter()
        .flatten()
        .map(|&v| if v { 1.0 } else { 0.0 })
        .collect();
    save_tensor(
        &Tensor::from_f64(vec![t, k], &vis_flat)?,
        dir.join("visibility.eatn"),
    )?;

    let meta = serde_json::to_string_pretty(&rollout.meta)?;
    std::fs::write(dir.join("meta.json"), meta + "\n")?;
    Ok(())
}

/// Reads a rollout directory written by [`save_rollout_dir`]. Values come
/// back at f32 precision, the on-disk numeric type.
pub fn load_rollout_dir(dir: &Path) -> Result<Rollout, RolloutError> {
    let frames_t = load_tensor(dir.join("frames.eatn"))?;
    let tracks_t = load_tensor(dir.join("tracks.eatn"))?;
    let depth_t = load_tensor(dir.join("depth.eatn"))?;
    let vis_t = load_tensor(dir.join("visibility.eatn"))?;
    let meta: RolloutMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;

    let (t, f) = (frames_t.dims()[0], frames_t.dims()[1]);
    let frames: Vec<Vec<f64>> = (0..t)
        .map(|i| (0..f).map(|j| f64::from(frames_t.at2(i, j))).collect())
        .collect();

    if tracks_t.ndim() != 3 || tracks_t.dims()[2] != 2 {
        return Err(RolloutError::Inconsistent {
            what: "tracks tensor rank",
            got: tracks_t.ndim(),
            expected: 3,
        });
    }
    let k = tracks_t.dims()[1];
    let tracks: Vec<Vec<Vector2<f64>>> = (0..tracks_t.dims()[0])
        .map(|i| {
            (0..k)
                .map(|j| {
                    Vector2::new(
                        f64::from(tracks_t.at3(i, j, 0)),
                        f64::from(tracks_t.at3(i, j, 1)),
                    )
                })
                .collect()
        })
        .collect();

    let est_depth = match depth_t.ndim() {
        2 => DepthData::PerKeypoint(
            (0..depth_t.dims()[0])
                .map(|i| {
                    (0..depth_t.dims()[1])
                        .map(|j| f64::from(depth_t.at2(i, j)))
                        .collect()
                })
                .collect(),
        ),
        3 => {
            let (h, w) = (depth_t.dims()[1], depth_t.dims()[2]);
            DepthData::Full {
                height: h,
                width: w,
                frames: (0..depth_t.dims()[0])
                    .map(|i| {
                        (0..h * w)
                            .map(|j| f64::from(depth_t.data()[i * h * w + j]))
                            .collect()
                    })
                    .collect(),
            }
        }
        other => return Err(RolloutError::BadDepthRank(other)),
    };

    let visibility: Vec<Vec<bool>> = (0..vis_t.dims()[0])
        .map(|i| (0..vis_t.dims()[1]).map(|j| vis_t.at2(i, j) != 0.0).collect())
        .collect();

    let rollout = Rollout {
        frames,
        tracks,
        est_depth,
        visibility,
        meta,
    };
    rollout.validate()?;
    Ok(rollout)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rollout_dir_round_trip_at_f32_precision() {
        let scene = crate::tasks::build_task(TaskTemplate::Stack).scene;
        let gen = generate_rollout(
            &scene,
            TaskTemplate::Stack,
            &HallucinationSpec::none(4),
            &NoiseSpec::defaults(),
            12,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rollout_0");
        save_rollout_dir(&gen.rollout, &path).unwrap();
        let loaded = load_rollout_dir(&path).unwrap();

        assert_eq!(loaded.meta, gen.rollout.meta);
        assert_eq!(loaded.visibility, gen.rollout.visibility);
        assert_eq!(loaded.frame_count(), gen.rollout.frame_count());
        for (a, b) in loaded.tracks.iter().flatten().zip(gen.rollout.tracks.iter().flatten()) {
            assert!((a - b).norm() < 1e-3); // f32 rounding on pixel values
        }
        // A second save of the loaded rollout must be byte-identical: the
        // values already sit on the f32 grid.
        let path2 = dir.path().join("rollout_copy");
        save_rollout_dir(&loaded, &path2).unwrap();
        for name in ["frames.eatn", "tracks.eatn", "depth.eatn", "visibility.eatn"] {
            let a = std::fs::read(path.join(name)).unwrap();
            let b = std::fs::read(path2.join(name)).unwrap();
            assert_eq!(a, b, "{name}");
        }
    }

    #[test]
    fn validate_against_flags_out_of_bounds_visible_tracks() {
        let scene = crate::tasks::build_task(TaskTemplate::Stack).scene;
        let mut gen = generate_rollout(
            &scene,
            TaskTemplate::Stack,
            &HallucinationSpec::none(4),
            &NoiseSpec::noiseless(),
            12,
        )
        .unwrap();
        gen.rollout.validate_against(&scene.intrinsics).unwrap();
        gen.rollout.tracks[0][0].x = -40.0;
        assert!(matches!(
            gen.rollout.validate_against(&scene.intrinsics),
            Err(RolloutError::TrackOutOfBounds { frame: 0, keypoint: 0, .. })
        ));
    }
}
