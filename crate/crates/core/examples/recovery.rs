//! Fits a batch of synthetic scenes, clusters the fitted fields and prints
//! the recovery metrics. Knobs come from the environment like `fit_scene`;
//! SCENES sets the batch size.

use lanembed::cluster::{fast_cluster, ClusterParams};
use lanembed::metrics::{evaluate_scene, EvalParams, EvalReport};
use lanembed::optimize::{fit, FitConfig};
use lanembed::synth::{generate_scene, SynthConfig};

fn env(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> lanembed::Result<()> {
    let mut cfg = FitConfig::default();
    cfg.max_steps = env("STEPS", cfg.max_steps as f64) as usize;
    cfg.step_size = env("LR", cfg.step_size);
    cfg.momentum = env("MOM", cfg.momentum);
    cfg.step_scales.offsets = env("OFFSET_SCALE", cfg.step_scales.offsets);
    cfg.step_scales.sigma = env("SIGMA_SCALE", cfg.step_scales.sigma);
    cfg.step_scales.seed = env("SEED_SCALE", cfg.step_scales.seed);
    let w = &mut cfg.loss.weights;
    w.w_b = env("WB", w.w_b);
    w.w_s = env("WS", w.w_s);
    let first = env("FIRST", 0.0) as u64;
    let n = env("SCENES", 20.0) as u64;

    let t = std::time::Instant::now();
    let mut rows = Vec::new();
    for i in first..first + n {
        let scene = generate_scene(&SynthConfig {
            rng_seed: i,
            num_lanes: 3 + (i % 3) as usize,
            ..SynthConfig::default()
        })?;
        let (state, traj) = fit(&scene.labeling, &cfg)?;
        let pred = fast_cluster(
            &state.embedding(),
            &state.sigma(),
            &state.seed(),
            &scene.fg_mask,
            &ClusterParams::default(),
        )?;
        let r = evaluate_scene(&format!("{i}"), &pred, &scene, &EvalParams::for_width(scene.config.width))?;
        let last = traj.last().unwrap();
        println!(
            "scene {i} K {} pred {} rec {:.2} prec {:.2} iou {:.3} acc {:.3} | e {:.4} s {:.5}",
            r.gt_instances, r.pred_instances, r.instance_recall, r.instance_precision, r.mean_instance_iou, r.accuracy,
            last.embedding, last.seed
        );
        rows.push(r);
    }
    let rep = EvalReport::from_scenes(rows);
    println!(
        "TOTAL rec {:.3} prec {:.3} iou {:.3} acc {:.3} fp {:.3} fn {:.3} in {:?}",
        rep.instance_recall, rep.instance_precision, rep.mean_instance_iou, rep.accuracy, rep.fp_rate, rep.fn_rate, t.elapsed()
    );
    Ok(())
}
