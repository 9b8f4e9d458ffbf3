//! Test-only reference implementations used as independent oracles.
//!
//! Nothing here calls into the loss code under test: the forward pass is a
//! straight-line re-derivation and the Lovász weights come from evaluating
//! the Jaccard set loss on explicit prefix sets.
#![allow(dead_code)]

use lanembed::{InstanceLabeling, LossConfig, LossWeights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Raw per-pixel quantities in 64-bit.
#[derive(Debug, Clone)]
pub struct Params {
    pub height: usize,
    pub width: usize,
    pub offsets: Vec<f64>,
    pub sigma: Vec<f64>,
    pub seed: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Terms {
    pub embedding: f64,
    pub bandwidth: f64,
    pub push: f64,
    pub seed: f64,
}

impl Terms {
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        w.w_e * self.embedding + w.w_b * self.bandwidth + w.w_d * self.push + w.w_s * self.seed
    }
}

/// Everything that changes the piecewise-linear pieces the loss lives on.
#[derive(Debug, Clone, PartialEq)]
pub struct Signature {
    pub sort_orders: Vec<Vec<usize>>,
    pub bandwidth_active: Vec<bool>,
    pub push_active: Vec<bool>,
}

/// Jaccard loss of a mispredicted set given as a membership vector.
fn jaccard_of_set(wrong: &[bool], labels: &[u8]) -> f64 {
    let mut n_wrong = 0.0;
    let mut union = 0.0;
    for (w, y) in wrong.iter().zip(labels) {
        if *w {
            n_wrong += 1.0;
        }
        if *y == 1 || *w {
            union += 1.0;
        }
    }
    if union == 0.0 {
        0.0
    } else {
        n_wrong / union
    }
}

/// Lovász hinge from hinge errors; returns the loss and the sort order.
pub fn reference_lovasz(errors: &[f64], labels: &[u8]) -> (f64, Vec<usize>) {
    let n = errors.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| errors[b].partial_cmp(&errors[a]).unwrap().then(a.cmp(&b)));
    let mut in_set = vec![false; n];
    let mut prev = 0.0;
    let mut loss = 0.0;
    for &i in &order {
        in_set[i] = true;
        let cur = jaccard_of_set(&in_set, labels);
        loss += errors[i].max(0.0) * (cur - prev);
        prev = cur;
    }
    (loss, order)
}

/// Jaccard set loss of the mispredicted set given as a bit mask.
fn jaccard_of_mask(mask: usize, labels: &[u8]) -> f64 {
    let wrong: Vec<bool> = (0..labels.len()).map(|i| mask >> i & 1 == 1).collect();
    jaccard_of_set(&wrong, labels)
}

/// Lovász extension of the Jaccard loss at `max(errors, 0)`, evaluated from
/// the Möbius transform of the set function:
/// `sum over nonempty A of mu(A) * min_{i in A} m_i`. Exponential in `n`.
pub fn mobius_lovasz(errors: &[f64], labels: &[u8]) -> f64 {
    let n = errors.len();
    assert!(n <= 12, "exhaustive oracle is exponential");
    let m: Vec<f64> = errors.iter().map(|e| e.max(0.0)).collect();
    let full = 1usize << n;
    let mut total = 0.0;
    for a in 1..full {
        // mu(A) = sum over B subset of A of (-1)^{|A \ B|} f(B)
        let mut mu = 0.0;
        let mut b = a;
        loop {
            let sign = if (a & !b).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
            mu += sign * jaccard_of_mask(b, labels);
            if b == 0 {
                break;
            }
            b = (b - 1) & a;
        }
        let min = (0..n).filter(|&i| a >> i & 1 == 1).map(|i| m[i]).fold(f64::INFINITY, f64::min);
        total += mu * min;
    }
    total
}

/// Forward pass over all four terms. `seed_targets` freezes the seed-loss
/// targets (the library detaches them); `None` recomputes them here.
pub fn reference_terms(
    p: &Params,
    labeling: &InstanceLabeling,
    cfg: &LossConfig,
    seed_targets: Option<&[f64]>,
) -> (Terms, Signature, Vec<f64>) {
    let w = p.width;
    let n = p.height * p.width;
    let k = labeling.num_instances();
    let labels = labeling.labels();
    let e: Vec<[f64; 2]> = (0..n)
        .map(|i| {
            [
                (i % w) as f64 + 0.5 + p.offsets[2 * i],
                (i / w) as f64 + 0.5 + p.offsets[2 * i + 1],
            ]
        })
        .collect();

    let mut centroids = vec![[0.0; 2]; k];
    let mut sigmas = vec![0.0; k];
    let mut counts = vec![0.0; k];
    for i in 0..n {
        if labels[i] > 0 {
            let c = labels[i] as usize - 1;
            centroids[c][0] += e[i][0];
            centroids[c][1] += e[i][1];
            sigmas[c] += p.sigma[i];
            counts[c] += 1.0;
        }
    }
    for c in 0..k {
        centroids[c][0] /= counts[c];
        centroids[c][1] /= counts[c];
        sigmas[c] /= counts[c];
    }
    let phi = |i: usize, c: usize| {
        let dx = e[i][0] - centroids[c][0];
        let dy = e[i][1] - centroids[c][1];
        (-(dx * dx + dy * dy) / (2.0 * sigmas[c] * sigmas[c])).exp()
    };

    let fg: Vec<usize> = (0..n).filter(|&i| labels[i] > 0).collect();
    let mut sort_orders = Vec::new();
    let mut embedding = 0.0;
    for c in 0..k {
        let ys: Vec<u8> = fg.iter().map(|&i| (labels[i] as usize == c + 1) as u8).collect();
        let errs: Vec<f64> = fg
            .iter()
            .zip(&ys)
            .map(|(&i, &y)| {
                let score = 2.0 * phi(i, c) - 1.0;
                1.0 - score * if y == 1 { 1.0 } else { -1.0 }
            })
            .collect();
        let (l, order) = reference_lovasz(&errs, &ys);
        embedding += l;
        sort_orders.push(order);
    }
    embedding /= k as f64;

    let factor = (-2.0 * cfg.prob_threshold.ln()).sqrt();
    let mut bandwidth = 0.0;
    let mut bandwidth_active = Vec::new();
    for &s in &sigmas {
        let m = (-2.0 * s * s * cfg.prob_threshold.ln()).sqrt();
        bandwidth += (m - cfg.delta_margin).max(0.0);
        bandwidth_active.push(s * factor > cfg.delta_margin);
    }
    bandwidth /= k as f64;

    let mut push = 0.0;
    let mut push_active = Vec::new();
    if k > 1 {
        for a in 0..k {
            for b in 0..k {
                if a == b {
                    continue;
                }
                let d = ((centroids[a][0] - centroids[b][0]).powi(2) + (centroids[a][1] - centroids[b][1]).powi(2)).sqrt();
                let h = (2.0 * cfg.delta_push - d).max(0.0);
                push += h * h;
                push_active.push(h > 0.0);
            }
        }
        push /= (k * (k - 1)) as f64;
    }

    let targets: Vec<f64> = match seed_targets {
        Some(t) => t.to_vec(),
        None => (0..n)
            .map(|i| if labels[i] == 0 { 0.0 } else { phi(i, labels[i] as usize - 1) })
            .collect(),
    };
    let seed = (0..n).map(|i| (p.seed[i] - targets[i]).powi(2)).sum::<f64>() / n as f64;

    (
        Terms {
            embedding,
            bandwidth,
            push,
            seed,
        },
        Signature {
            sort_orders,
            bandwidth_active,
            push_active,
        },
        targets,
    )
}

/// Which parameter vector a coordinate belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Offsets,
    Sigma,
    Seed,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FdOutcome {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
}

/// Relative error with a floor so exactly-zero gradients compare absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central differences of the weighted reference loss at every coordinate of
/// every parameter field, compared with `analytic`. Coordinates whose ±eps
/// evaluations leave the base point's piecewise-linear region are counted as
/// kinks and skipped.
pub fn finite_difference_check(
    p: &Params,
    labeling: &InstanceLabeling,
    cfg: &LossConfig,
    eps: f64,
    analytic: &dyn Fn(ParamKind, usize) -> f64,
) -> FdOutcome {
    let (_, base_sig, targets) = reference_terms(p, labeling, cfg, None);
    let eval = |q: &Params| {
        let (t, sig, _) = reference_terms(q, labeling, cfg, Some(&targets));
        (t.weighted(&cfg.weights), sig)
    };
    let mut out = FdOutcome::default();
    for kind in [ParamKind::Offsets, ParamKind::Sigma, ParamKind::Seed] {
        let len = match kind {
            ParamKind::Offsets => p.offsets.len(),
            _ => p.sigma.len(),
        };
        for idx in 0..len {
            let mut plus = p.clone();
            let mut minus = p.clone();
            {
                let (a, b) = match kind {
                    ParamKind::Offsets => (&mut plus.offsets, &mut minus.offsets),
                    ParamKind::Sigma => (&mut plus.sigma, &mut minus.sigma),
                    ParamKind::Seed => (&mut plus.seed, &mut minus.seed),
                };
                a[idx] += eps;
                b[idx] -= eps;
            }
            let (fp, sp) = eval(&plus);
            let (fm, sm) = eval(&minus);
            if sp != base_sig || sm != base_sig {
                out.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let err = rel_err(analytic(kind, idx), numeric);
            out.max_rel_err = out.max_rel_err.max(err);
            out.checked += 1;
        }
    }
    out
}

/// Random scene on an `h`×`w` grid with exactly `k` instances, parameters in
/// ranges that put some bandwidth hinges on each side of their kink.
pub fn random_scene(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize) -> (Params, InstanceLabeling) {
    let n = h * w;
    loop {
        let labels: Vec<u16> = (0..n)
            .map(|_| if rng.gen_bool(0.5) { 0 } else { rng.gen_range(1..=k as u16) })
            .collect();
        let Ok(lab) = InstanceLabeling::new(h, w, k, labels) else { continue };
        let params = Params {
            height: h,
            width: w,
            offsets: (0..2 * n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            sigma: (0..n).map(|_| rng.gen_range(1.0..5.5)).collect(),
            seed: (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
        };
        return (params, lab);
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
