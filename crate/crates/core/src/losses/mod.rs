//! Training losses for spatial-embedding instance segmentation and their
//! analytic gradients.
//!
//! Four terms make up the objective:
//!
//! - **embedding** (`L_e`): per-instance Lovász hinge over foreground pixels
//!   of the Gaussian affinity `phi_k(e_i) = exp(-|e_i - C_k|^2 / 2 sigma_k^2)`,
//!   mapped to scores `2 phi - 1`. Background pixels take no part.
//! - **bandwidth saturation** (`L_b`): hinge on the instance margin
//!   `sqrt(-2 sigma_k^2 ln Pr)` exceeding `delta_margin`.
//! - **push** (`L_d`): squared hinge keeping centroids `2 delta_push` apart.
//! - **seed** (`L_s`): mean squared error of the seed map against the
//!   affinity of each pixel to its own instance (0 on background). The
//!   targets are detached, so this term only produces seed gradients.
//!
//! Everything here is computed in `f64`.

mod lovasz;

pub use lovasz::lovasz_hinge;
use lovasz::LovaszScratch;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{instance_stats, make_coordinate_maps, spatial_embedding, EmbeddingField, FieldF64, InstanceLabeling, InstanceStats};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub w_e: f64,
    pub w_b: f64,
    pub w_d: f64,
    pub w_s: f64,
}

impl LossWeights {
    pub const ZERO: LossWeights = LossWeights {
        w_e: 0.0,
        w_b: 0.0,
        w_d: 0.0,
        w_s: 0.0,
    };
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_e: 1.0,
            w_b: 0.1,
            w_d: 0.1,
            w_s: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Affinity level `Pr` at which a pixel counts as a member.
    pub prob_threshold: f64,
    /// Largest margin (pixels) the bandwidth term tolerates.
    pub delta_margin: f64,
    /// Centroids closer than `2 * delta_push` pixels are pushed apart.
    pub delta_push: f64,
    pub weights: LossWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            prob_threshold: 0.5,
            delta_margin: 4.0,
            delta_push: 8.0,
            weights: LossWeights::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.prob_threshold > 0.0 && self.prob_threshold < 1.0) {
            return Err(Error::Config(format!(
                "prob_threshold must lie in (0, 1), got {}",
                self.prob_threshold
            )));
        }
        if !(self.delta_margin > 0.0) || !(self.delta_push > 0.0) {
            return Err(Error::Config("delta_margin and delta_push must be > 0".into()));
        }
        let w = self.weights;
        if [w.w_e, w.w_b, w.w_d, w.w_s].iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }

    /// `sqrt(-2 ln Pr)`, the margin per unit of sigma.
    fn margin_factor(&self) -> f64 {
        (-2.0 * self.prob_threshold.ln()).sqrt()
    }
}

/// Loss values and gradient magnitudes for one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub embedding: f64,
    pub bandwidth: f64,
    pub push: f64,
    pub seed: f64,
    /// L-infinity norms of the gradient with respect to each parameter field.
    pub grad_inf_offsets: f64,
    pub grad_inf_sigma: f64,
    pub grad_inf_seed: f64,
}

impl LossReport {
    pub fn max_grad_inf(&self) -> f64 {
        self.grad_inf_offsets.max(self.grad_inf_sigma).max(self.grad_inf_seed)
    }
}

/// Gradients of the weighted total with respect to the offsets (2 channels),
/// the bandwidth map and the seed map.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub d_offsets: FieldF64,
    pub d_sigma: FieldF64,
    pub d_seed: FieldF64,
}

/// The per-pixel quantities the losses are functions of.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    pub offsets: &'a FieldF64,
    pub sigma: &'a FieldF64,
    pub seed: &'a FieldF64,
    pub labeling: &'a InstanceLabeling,
}

pub fn gaussian_affinity(e: [f64; 2], center: [f64; 2], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("sigma must be > 0, got {sigma}")));
    }
    Ok(affinity(e, center, sigma))
}

#[inline]
fn affinity(e: [f64; 2], center: [f64; 2], sigma: f64) -> f64 {
    let dx = e[0] - center[0];
    let dy = e[1] - center[1];
    (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
}

/// Radius at which the affinity of bandwidth `sigma` falls to `prob`.
pub fn margin(sigma: f64, prob: f64) -> Result<f64> {
    if !(prob > 0.0 && prob < 1.0) {
        return Err(Error::Domain(format!("probability threshold must lie in (0, 1), got {prob}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("sigma must be > 0, got {sigma}")));
    }
    Ok((-2.0 * sigma * sigma * prob.ln()).sqrt())
}

pub fn embedding_loss(
    embedding: &EmbeddingField<f64>,
    sigma: &FieldF64,
    labeling: &InstanceLabeling,
    _cfg: &LossConfig,
) -> Result<f64> {
    let stats = instance_stats(embedding, sigma, labeling)?;
    let fg = labeling.foreground_pixels();
    if fg.is_empty() {
        return Err(Error::Domain("embedding loss needs foreground pixels".into()));
    }
    Ok(EmbeddingTerm::eval(embedding, labeling, &stats, &fg, None))
}

pub fn bandwidth_saturation_loss(stats: &InstanceStats, cfg: &LossConfig) -> f64 {
    let k = stats.num_instances();
    if k == 0 {
        return 0.0;
    }
    let factor = cfg.margin_factor();
    let sum: f64 = stats
        .sigma_means
        .iter()
        .map(|&s| (s * factor - cfg.delta_margin).max(0.0))
        .sum();
    sum / k as f64
}

pub fn push_loss(stats: &InstanceStats, cfg: &LossConfig) -> f64 {
    let k = stats.num_instances();
    if k < 2 {
        return 0.0;
    }
    let reach = 2.0 * cfg.delta_push;
    let mut sum = 0.0;
    for a in 0..k {
        for b in 0..k {
            if a != b {
                let h = (reach - dist(stats.centroids[a], stats.centroids[b])).max(0.0);
                sum += h * h;
            }
        }
    }
    sum / (k * (k - 1)) as f64
}

/// Affinity of every pixel to its own instance; 0 on background.
pub fn seed_targets(embedding: &EmbeddingField<f64>, labeling: &InstanceLabeling, stats: &InstanceStats) -> Vec<f64> {
    labeling
        .labels()
        .iter()
        .enumerate()
        .map(|(p, &l)| {
            if l == 0 {
                0.0
            } else {
                let k = l as usize - 1;
                affinity(embedding.point(p), stats.centroids[k], stats.sigma_means[k])
            }
        })
        .collect()
}

pub fn seed_loss(
    seed: &FieldF64,
    embedding: &EmbeddingField<f64>,
    sigma: &FieldF64,
    labeling: &InstanceLabeling,
    _cfg: &LossConfig,
) -> Result<f64> {
    seed.expect_shape(labeling.height(), labeling.width(), 1, "seed")?;
    let stats = instance_stats(embedding, sigma, labeling)?;
    let targets = seed_targets(embedding, labeling, &stats);
    Ok(mse(seed.data(), &targets))
}

fn mse(values: &[f64], targets: &[f64]) -> f64 {
    let sum: f64 = values.iter().zip(targets).map(|(v, t)| (v - t) * (v - t)).sum();
    sum / values.len() as f64
}

#[inline]
fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Gradient accumulators for quantities the terms depend on before they are
/// distributed back to pixels.
struct Accum {
    /// d/d e_i, per pixel.
    embedding: Vec<[f64; 2]>,
    /// d/d C_k, per instance.
    centroid: Vec<[f64; 2]>,
    /// d/d sigma_k, per instance.
    sigma_mean: Vec<f64>,
}

impl Accum {
    fn new(pixels: usize, instances: usize) -> Self {
        Self {
            embedding: vec![[0.0; 2]; pixels],
            centroid: vec![[0.0; 2]; instances],
            sigma_mean: vec![0.0; instances],
        }
    }
}

struct EmbeddingTerm;

impl EmbeddingTerm {
    /// Mean over instances of the Lovász hinge on foreground affinities. When
    /// `acc` is given, `scale * dL_e` is added to it.
    fn eval(
        embedding: &EmbeddingField<f64>,
        labeling: &InstanceLabeling,
        stats: &InstanceStats,
        fg: &[usize],
        mut acc: Option<(&mut Accum, f64)>,
    ) -> f64 {
        let k_count = stats.num_instances();
        let inv_k = 1.0 / k_count as f64;
        let mut scratch = LovaszScratch::default();
        let mut errors = vec![0.0; fg.len()];
        let mut phis = vec![0.0; fg.len()];
        let mut labels = vec![0u8; fg.len()];
        let mut d_err = vec![0.0; fg.len()];
        let mut total = 0.0;

        for k in 0..k_count {
            let center = stats.centroids[k];
            let sigma = stats.sigma_means[k];
            let id = (k + 1) as u16;
            for (j, &p) in fg.iter().enumerate() {
                let phi = affinity(embedding.point(p), center, sigma);
                let positive = labeling.label(p) == id;
                phis[j] = phi;
                labels[j] = positive as u8;
                // hinge error of score 2 phi - 1 against label +-1
                errors[j] = if positive { 2.0 - 2.0 * phi } else { 2.0 * phi };
            }
            let want_grad = acc.is_some();
            let loss_k = scratch.eval(&errors, &labels, want_grad.then_some(&mut d_err[..]));
            total += loss_k;

            if let Some((acc, scale)) = acc.as_mut() {
                let s2 = sigma * sigma;
                let s3 = s2 * sigma;
                for (j, &p) in fg.iter().enumerate() {
                    let d_phi = d_err[j] * if labels[j] == 1 { -2.0 } else { 2.0 } * inv_k * *scale;
                    if d_phi == 0.0 {
                        continue;
                    }
                    let e = embedding.point(p);
                    let diff = [e[0] - center[0], e[1] - center[1]];
                    let common = d_phi * phis[j] / s2;
                    acc.embedding[p][0] -= common * diff[0];
                    acc.embedding[p][1] -= common * diff[1];
                    acc.centroid[k][0] += common * diff[0];
                    acc.centroid[k][1] += common * diff[1];
                    acc.sigma_mean[k] += d_phi * phis[j] * (diff[0] * diff[0] + diff[1] * diff[1]) / s3;
                }
            }
        }
        total * inv_k
    }
}

/// Weighted total of all four terms plus its gradient with respect to the
/// offsets, the bandwidth map and the seed map.
///
/// Gradients flow into each pixel directly through `e_i` and indirectly
/// through the instance centroid and mean bandwidth it contributes to.
pub fn total_loss_and_gradients(inputs: LossInputs<'_>, cfg: &LossConfig) -> Result<(LossReport, Gradients)> {
    cfg.validate()?;
    let labeling = inputs.labeling;
    let (h, w) = (labeling.height(), labeling.width());
    inputs.offsets.expect_shape(h, w, 2, "offsets")?;
    inputs.sigma.expect_shape(h, w, 1, "sigma")?;
    inputs.seed.expect_shape(h, w, 1, "seed")?;
    let k_count = labeling.num_instances();
    if k_count == 0 {
        return Err(Error::Domain("losses need at least one instance".into()));
    }

    let coords = make_coordinate_maps(h, w)?;
    let embedding = spatial_embedding(inputs.offsets, &coords)?;
    let stats = instance_stats(&embedding, inputs.sigma, labeling)?;
    let fg = labeling.foreground_pixels();
    let weights = cfg.weights;
    let n = h * w;
    let mut acc = Accum::new(n, k_count);

    let l_e = EmbeddingTerm::eval(&embedding, labeling, &stats, &fg, Some((&mut acc, weights.w_e)));

    // bandwidth saturation
    let factor = cfg.margin_factor();
    let inv_k = 1.0 / k_count as f64;
    let mut l_b = 0.0;
    for k in 0..k_count {
        let excess = stats.sigma_means[k] * factor - cfg.delta_margin;
        if excess > 0.0 {
            l_b += excess;
            acc.sigma_mean[k] += weights.w_b * factor * inv_k;
        }
    }
    l_b *= inv_k;

    // push
    let mut l_d = 0.0;
    if k_count > 1 {
        let norm = 1.0 / (k_count * (k_count - 1)) as f64;
        let reach = 2.0 * cfg.delta_push;
        for a in 0..k_count {
            for b in (a + 1)..k_count {
                let (ca, cb) = (stats.centroids[a], stats.centroids[b]);
                let d = dist(ca, cb);
                let hinge = reach - d;
                if hinge <= 0.0 {
                    continue;
                }
                // both ordered pairs (a, b) and (b, a)
                l_d += 2.0 * hinge * hinge * norm;
                if d > 0.0 {
                    let coef = weights.w_d * norm * 4.0 * hinge / d;
                    for c in 0..2 {
                        let g = coef * (ca[c] - cb[c]);
                        acc.centroid[a][c] -= g;
                        acc.centroid[b][c] += g;
                    }
                }
            }
        }
    }

    // seed, detached targets
    let targets = seed_targets(&embedding, labeling, &stats);
    let seed_vals = inputs.seed.data();
    let l_s = mse(seed_vals, &targets);
    let d_seed: Vec<f64> = seed_vals
        .iter()
        .zip(&targets)
        .map(|(s, t)| weights.w_s * 2.0 * (s - t) / n as f64)
        .collect();

    // distribute centroid and bandwidth gradients to member pixels
    let mut d_offsets = vec![0.0; 2 * n];
    let mut d_sigma = vec![0.0; n];
    for p in 0..n {
        let mut g = acc.embedding[p];
        let l = labeling.label(p);
        if l > 0 {
            let k = l as usize - 1;
            let inv_n = 1.0 / stats.pixel_counts[k] as f64;
            g[0] += acc.centroid[k][0] * inv_n;
            g[1] += acc.centroid[k][1] * inv_n;
            d_sigma[p] = acc.sigma_mean[k] * inv_n;
        }
        d_offsets[2 * p] = g[0];
        d_offsets[2 * p + 1] = g[1];
    }

    let grads = Gradients {
        d_offsets: FieldF64::from_vec(h, w, 2, d_offsets)?,
        d_sigma: FieldF64::from_vec(h, w, 1, d_sigma)?,
        d_seed: FieldF64::from_vec(h, w, 1, d_seed)?,
    };
    let report = LossReport {
        total: weights.w_e * l_e + weights.w_b * l_b + weights.w_d * l_d + weights.w_s * l_s,
        embedding: l_e,
        bandwidth: l_b,
        push: l_d,
        seed: l_s,
        grad_inf_offsets: grads.d_offsets.max_abs(),
        grad_inf_sigma: grads.d_sigma.max_abs(),
        grad_inf_seed: grads.d_seed.max_abs(),
    };
    Ok((report, grads))
}

#[cfg(test)]
mod tests;
