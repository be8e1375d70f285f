use keyalign::harness::{run_episode, RunConfig, Variant};
use keyalign::rollout::{NoiseSpec, TaskTemplate};
use keyalign::tasks::build_task;
use rayon::prelude::*;

fn main() {
    let trials: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let ds: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0.012);
    let mut cfg = RunConfig::default();
    cfg.noise = NoiseSpec { track_sigma_px: 1.0, depth_alpha_true: 2.0, depth_beta_true: 0.5, depth_sigma: ds };
    for t in TaskTemplate::ALL {
        let build = build_task(t);
        let recs: Vec<_> = (0..trials).into_par_iter().map(|e| run_episode(&build, &cfg, Variant::PlusSelection, e).record).collect();
        let miss = recs.iter().filter(|r| r.selected_mode.as_deref().is_some_and(|m| m != "none")).count();
        let fallback = recs.iter().filter(|r| r.fallback).count();
        let ok = recs.iter().filter(|r| r.success).count();
        println!("{:>7}: miss {:>3}/{} fallback {:>3} success {:>3}", t.name(), miss, trials, fallback, ok);
        if miss > 0 {
            for r in recs.iter().filter(|r| r.selected_mode.as_deref().is_some_and(|m| m != "none")).take(4) {
                println!("     ep{} mode={:?} fb={} nspat={}", r.episode, r.selected_mode, r.fallback, r.spatial_evaluations);
            }
        }
    }
}
