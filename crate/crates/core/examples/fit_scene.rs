//! Fits one synthetic scene and prints the loss trajectory.
//!
//! Knobs come from the environment: SEED, LANES, STEPS, LR, MOM, SIGMA_SCALE,
//! SEED_SCALE, WB, WE, WD, WS, TRACE.
//!
//! cargo run --release -p lanembed-core --example fit_scene

use lanembed::optimize::{fit, init_state, step, FitConfig};
use lanembed::synth::{generate_scene, SynthConfig};

fn env(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> lanembed::Result<()> {
    let scene = generate_scene(&SynthConfig {
        rng_seed: env("SEED", 0.0) as u64,
        num_lanes: env("LANES", 4.0) as usize,
        height: env("H", 64.0) as usize,
        width: env("W", 128.0) as usize,
        ..SynthConfig::default()
    })?;
    let mut cfg = FitConfig::default();
    cfg.max_steps = env("STEPS", cfg.max_steps as f64) as usize;
    cfg.step_size = env("LR", cfg.step_size);
    cfg.momentum = env("MOM", cfg.momentum);
    cfg.step_scales.sigma = env("SIGMA_SCALE", cfg.step_scales.sigma);
    cfg.step_scales.seed = env("SEED_SCALE", cfg.step_scales.seed);
    let w = &mut cfg.loss.weights;
    w.w_e = env("WE", w.w_e);
    w.w_b = env("WB", w.w_b);
    w.w_d = env("WD", w.w_d);
    w.w_s = env("WS", w.w_s);

    let t = std::time::Instant::now();
    let trace = env("TRACE", 0.0) as usize;
    if trace > 0 {
        let mut st = init_state(&scene.labeling, &cfg);
        for i in 0..cfg.max_steps {
            let (next, r) = step(&st, &scene.labeling, &cfg)?;
            if i % trace == 0 {
                let stats = lanembed::instance_stats(&st.embedding(), &st.sigma(), &scene.labeling)?;
                let sig: Vec<String> = stats.sigma_means.iter().map(|s| format!("{s:.2}")).collect();
                println!(
                    "{i:5} e {:.4} b {:.4} d {:.4} s {:.5} sig_k {}",
                    r.embedding,
                    r.bandwidth,
                    r.push,
                    r.seed,
                    sig.join(" ")
                );
            }
            st = next;
        }
        return Ok(());
    }
    let (state, traj) = fit(&scene.labeling, &cfg)?;
    for (i, r) in traj.iter().enumerate() {
        if i % (traj.len() / 10).max(1) == 0 || i + 1 == traj.len() {
            println!(
                "{i:5} total {:.5} e {:.5} b {:.5} d {:.5} s {:.6} |g| {:.2e} {:.2e} {:.2e}",
                r.total, r.embedding, r.bandwidth, r.push, r.seed, r.grad_inf_offsets, r.grad_inf_sigma, r.grad_inf_seed
            );
        }
    }
    let sigma = state.sigma();
    let seed = state.seed();
    let fg = scene.labeling.foreground_pixels();
    let smax = fg.iter().map(|&p| seed.data()[p]).fold(0.0, f64::max);
    let sig_mean = fg.iter().map(|&p| sigma.data()[p]).sum::<f64>() / fg.len() as f64;
    println!("elapsed {:?}, max fg seed {smax:.3}, mean fg sigma {sig_mean:.3}", t.elapsed());
    Ok(())
}
