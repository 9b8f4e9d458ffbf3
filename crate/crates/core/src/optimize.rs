//! Direct fitting of offset, bandwidth and seed fields to a labeling.
//!
//! Bandwidth and seed are parametrized as `sigma = exp(sigma_logit)` and
//! `S = logistic(seed_logit)` so their constraints hold after every step.
//! Updates use heavy-ball momentum:
//!
//! ```text
//! v <- g + momentum * v
//! p <- p - step_size * v
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{make_coordinate_maps, spatial_embedding, EmbeddingField, FieldF32, FieldF64, InstanceLabeling};
use crate::io;
use crate::losses::{total_loss_and_gradients, LossConfig, LossInputs, LossReport};

pub const INITIAL_SIGMA: f64 = 1.0;
pub const INITIAL_SEED: f64 = 0.01;

/// Optimizer settings. The defaults suit instances of tens to hundreds of
/// pixels; gradients scale like one over the instance size, so instances of a
/// handful of pixels need a proportionally smaller `step_size`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub step_size: f64,
    pub momentum: f64,
    pub max_steps: usize,
    /// Stop once the largest L-infinity gradient norm drops to this value.
    pub stop_tolerance: f64,
    /// Reserved; initialization is deterministic and draws no randomness.
    pub rng_seed: u64,
    /// Per-field multipliers on `step_size`, see [`StepScales`].
    pub step_scales: StepScales,
    pub loss: LossConfig,
}

/// Multipliers applied to `step_size` for each parameter field.
///
/// The losses average over very different populations (instance members for
/// the embedding, every pixel for the seed map), so raw gradient magnitudes
/// differ by orders of magnitude between fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepScales {
    pub offsets: f64,
    pub sigma: f64,
    pub seed: f64,
}

impl Default for StepScales {
    fn default() -> Self {
        Self {
            offsets: 1.0,
            sigma: 1.0,
            seed: 1.0,
        }
    }
}

/// Bandwidth weight used for fitting.
///
/// On an instance much longer than its bandwidth, the embedding loss pulls
/// `sigma_k` up with a force of roughly `sqrt(2 pi) / (K * rows)`, independent
/// of `sigma_k`. With the loss default `w_b = 0.1` the bandwidth hinge wins
/// once the margin passes `delta_margin`, `sigma` stalls near 3.4 px and pixels
/// more than a few bandwidths from the centroid never receive a usable
/// gradient. A smaller weight lets `sigma` grow until the whole lane is
/// reachable and still drives it back below the cap once the lane collapses.
pub const FIT_BANDWIDTH_WEIGHT: f64 = 0.01;

impl Default for FitConfig {
    fn default() -> Self {
        let mut loss = LossConfig::default();
        loss.weights.w_b = FIT_BANDWIDTH_WEIGHT;
        Self {
            step_size: 30.0,
            momentum: 0.9,
            max_steps: 2000,
            stop_tolerance: 0.0,
            rng_seed: 0,
            step_scales: StepScales::default(),
            loss,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("step_size must be finite and >= 0, got {}", self.step_size)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be >= 1".into()));
        }
        if !(self.stop_tolerance >= 0.0) {
            return Err(Error::Config("stop_tolerance must be >= 0".into()));
        }
        let s = self.step_scales;
        if [s.offsets, s.sigma, s.seed].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config("step scales must be finite and >= 0".into()));
        }
        self.loss.validate()
    }
}

/// Optimizable parameters plus their momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldState {
    pub offsets_raw: FieldF32,
    pub sigma_logit: FieldF32,
    pub seed_logit: FieldF32,
    velocity: Velocity,
}

#[derive(Debug, Clone, PartialEq)]
struct Velocity {
    offsets: Vec<f64>,
    sigma: Vec<f64>,
    seed: Vec<f64>,
}

impl Velocity {
    fn zeros(pixels: usize) -> Self {
        Self {
            offsets: vec![0.0; 2 * pixels],
            sigma: vec![0.0; pixels],
            seed: vec![0.0; pixels],
        }
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl FieldState {
    /// Builds a state from parameter fields with zero momentum.
    pub fn from_fields(offsets_raw: FieldF32, sigma_logit: FieldF32, seed_logit: FieldF32) -> Result<Self> {
        let (h, w) = (offsets_raw.height(), offsets_raw.width());
        offsets_raw.expect_shape(h, w, 2, "offsets_raw")?;
        sigma_logit.expect_shape(h, w, 1, "sigma_logit")?;
        seed_logit.expect_shape(h, w, 1, "seed_logit")?;
        Ok(Self {
            velocity: Velocity::zeros(h * w),
            offsets_raw,
            sigma_logit,
            seed_logit,
        })
    }

    pub fn height(&self) -> usize {
        self.offsets_raw.height()
    }

    pub fn width(&self) -> usize {
        self.offsets_raw.width()
    }

    pub fn sigma(&self) -> FieldF64 {
        self.sigma_logit.map(|l| f64::from(l).exp())
    }

    pub fn seed(&self) -> FieldF64 {
        self.seed_logit.map(|l| logistic(f64::from(l)))
    }

    pub fn embedding(&self) -> EmbeddingField<f64> {
        let coords = make_coordinate_maps(self.height(), self.width()).expect("state has valid dimensions");
        spatial_embedding(&self.offsets_raw.to_f64(), &coords).expect("offsets have two channels")
    }

    /// Parameters only; momentum is not compared.
    pub fn same_parameters(&self, other: &FieldState) -> bool {
        self.offsets_raw == other.offsets_raw && self.sigma_logit == other.sigma_logit && self.seed_logit == other.seed_logit
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        io::save_field(dir.join(OFFSETS_FILE), &self.offsets_raw)?;
        io::save_field(dir.join(SIGMA_FILE), &self.sigma_logit)?;
        io::save_field(dir.join(SEED_FILE), &self.seed_logit)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        Self::from_fields(
            io::load_field(dir.join(OFFSETS_FILE))?,
            io::load_field(dir.join(SIGMA_FILE))?,
            io::load_field(dir.join(SEED_FILE))?,
        )
    }
}

pub const OFFSETS_FILE: &str = "offsets.lef";
pub const SIGMA_FILE: &str = "sigma_logit.lef";
pub const SEED_FILE: &str = "seed_logit.lef";

pub fn init_state(labeling: &InstanceLabeling, _cfg: &FitConfig) -> FieldState {
    let (h, w) = (labeling.height(), labeling.width());
    let sigma_logit = INITIAL_SIGMA.ln() as f32;
    let seed_logit = (INITIAL_SEED / (1.0 - INITIAL_SEED)).ln() as f32;
    FieldState::from_fields(
        FieldF32::filled(h, w, 2, 0.0).expect("labeling has valid dimensions"),
        FieldF32::filled(h, w, 1, sigma_logit).expect("labeling has valid dimensions"),
        FieldF32::filled(h, w, 1, seed_logit).expect("labeling has valid dimensions"),
    )
    .expect("shapes agree by construction")
}

/// Loss report plus gradients for raw offsets, sigma logits and seed logits.
type ParamGrads = (LossReport, Vec<f64>, Vec<f64>, Vec<f64>);

/// Gradients with respect to the stored parameters and the report, whose
/// gradient norms refer to those parameters.
fn parameter_gradients(
    state: &FieldState,
    labeling: &InstanceLabeling,
    loss: &LossConfig,
) -> Result<ParamGrads> {
    if !labeling.same_grid(&state.offsets_raw) {
        return Err(Error::Shape(format!(
            "state is {}x{}, labeling is {}x{}",
            state.height(),
            state.width(),
            labeling.height(),
            labeling.width()
        )));
    }
    let offsets = state.offsets_raw.to_f64();
    let sigma = state.sigma();
    let seed = state.seed();
    if sigma.data().iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::Numeric { field: "sigma_logit" });
    }
    let (mut report, grads) = total_loss_and_gradients(
        LossInputs {
            offsets: &offsets,
            sigma: &sigma,
            seed: &seed,
            labeling,
        },
        loss,
    )?;

    let g_off = grads.d_offsets.into_vec();
    let g_sigma: Vec<f64> = grads.d_sigma.data().iter().zip(sigma.data()).map(|(g, s)| g * s).collect();
    let g_seed: Vec<f64> = grads.d_seed.data().iter().zip(seed.data()).map(|(g, s)| g * s * (1.0 - s)).collect();

    for (name, g) in [("offsets", &g_off), ("sigma_logit", &g_sigma), ("seed_logit", &g_seed)] {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { field: name });
        }
    }
    let inf = |g: &[f64]| g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    report.grad_inf_offsets = inf(&g_off);
    report.grad_inf_sigma = inf(&g_sigma);
    report.grad_inf_seed = inf(&g_seed);
    Ok((report, g_off, g_sigma, g_seed))
}

/// One heavy-ball step. Returns the updated state and the report evaluated
/// before the update.
pub fn step(state: &FieldState, labeling: &InstanceLabeling, cfg: &FitConfig) -> Result<(FieldState, LossReport)> {
    let (report, g_off, g_sigma, g_seed) = parameter_gradients(state, labeling, &cfg.loss)?;
    let mut next = state.clone();
    let scales = cfg.step_scales;
    apply(
        next.offsets_raw.data_mut(),
        &mut next.velocity.offsets,
        &g_off,
        cfg.step_size * scales.offsets,
        cfg.momentum,
    );
    apply(
        next.sigma_logit.data_mut(),
        &mut next.velocity.sigma,
        &g_sigma,
        cfg.step_size * scales.sigma,
        cfg.momentum,
    );
    apply(
        next.seed_logit.data_mut(),
        &mut next.velocity.seed,
        &g_seed,
        cfg.step_size * scales.seed,
        cfg.momentum,
    );
    Ok((next, report))
}

fn apply(params: &mut [f32], velocity: &mut [f64], grad: &[f64], lr: f64, momentum: f64) {
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = g + momentum * *v;
        *p = (f64::from(*p) - lr * *v) as f32;
    }
}

/// Runs [`step`] from [`init_state`] until `max_steps` or until the largest
/// gradient norm is at most `stop_tolerance`.
pub fn fit(labeling: &InstanceLabeling, cfg: &FitConfig) -> Result<(FieldState, Vec<LossReport>)> {
    fit_from(init_state(labeling, cfg), labeling, cfg)
}

pub fn fit_from(
    mut state: FieldState,
    labeling: &InstanceLabeling,
    cfg: &FitConfig,
) -> Result<(FieldState, Vec<LossReport>)> {
    cfg.validate()?;
    let mut trajectory = Vec::with_capacity(cfg.max_steps);
    for _ in 0..cfg.max_steps {
        let (next, report) = step(&state, labeling, cfg)?;
        state = next;
        trajectory.push(report);
        if report.max_grad_inf() <= cfg.stop_tolerance {
            break;
        }
    }
    Ok((state, trajectory))
}

/// Trailing moving average of the total loss over `window` steps.
pub fn smoothed_totals(trajectory: &[LossReport], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(trajectory.len());
    let mut sum = 0.0;
    for (i, r) in trajectory.iter().enumerate() {
        sum += r.total;
        if i >= window {
            sum -= trajectory[i - window].total;
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}
