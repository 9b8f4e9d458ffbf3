use super::*;
use crate::field::{make_coordinate_maps, spatial_embedding, FieldF64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn embed(offsets: &FieldF64) -> EmbeddingField<f64> {
    let coords = make_coordinate_maps(offsets.height(), offsets.width()).unwrap();
    spatial_embedding(offsets, &coords).unwrap()
}

/// Offsets sending every pixel of instance k to `targets[k - 1]`.
fn collapsing_offsets(lab: &InstanceLabeling, targets: &[[f64; 2]]) -> FieldF64 {
    let (h, w) = (lab.height(), lab.width());
    let mut off = FieldF64::filled(h, w, 2, 0.0).unwrap();
    for p in 0..h * w {
        let l = lab.label(p);
        if l > 0 {
            let t = targets[l as usize - 1];
            let (x, y) = ((p % w) as f64 + 0.5, (p / w) as f64 + 0.5);
            off.data_mut()[2 * p] = t[0] - x;
            off.data_mut()[2 * p + 1] = t[1] - y;
        }
    }
    off
}

fn stats_with(centroids: Vec<[f64; 2]>, sigmas: Vec<f64>) -> InstanceStats {
    let n = centroids.len();
    InstanceStats {
        centroids,
        sigma_means: sigmas,
        pixel_counts: vec![1; n],
    }
}

#[test]
fn affinity_closed_forms() {
    assert_eq!(gaussian_affinity([3.0, 4.0], [3.0, 4.0], 2.0).unwrap(), 1.0);
    let v = gaussian_affinity([1.0, 0.0], [0.0, 0.0], 1.0).unwrap();
    // 1 / sqrt(e)
    assert!((v - 1.0 / std::f64::consts::E.sqrt()).abs() < 1e-15);
    assert!((v - 0.606531).abs() < 1e-6);
    assert!(matches!(gaussian_affinity([0.0; 2], [0.0; 2], 0.0), Err(Error::Domain(_))));
    assert!(matches!(gaussian_affinity([0.0; 2], [0.0; 2], -1.0), Err(Error::Domain(_))));
}

#[test]
fn margin_inverts_affinity() {
    assert!((margin(1.0, (-0.5f64).exp()).unwrap() - 1.0).abs() < 1e-15);
    assert!((margin(1.0, 0.5).unwrap() - (2.0 * 2f64.ln()).sqrt()).abs() < 1e-15);
    assert!((margin(1.0, 0.5).unwrap() - 1.177410).abs() < 1e-6);
    for &pr in &[0.1, 0.5, 0.9] {
        assert!((margin(2.0, pr).unwrap() - 2.0 * margin(1.0, pr).unwrap()).abs() < 1e-14);
        for &sigma in &[0.1, 1.0, 10.0] {
            let r = margin(sigma, pr).unwrap();
            let phi = gaussian_affinity([r, 0.0], [0.0, 0.0], sigma).unwrap();
            assert!((phi - pr).abs() < 1e-12, "sigma={sigma} pr={pr}");
        }
    }
    assert!(margin(1.0, 0.0).is_err());
    assert!(margin(1.0, 1.0).is_err());
    assert!(margin(0.0, 0.5).is_err());
}

#[test]
fn embedding_loss_perfect_embedding_is_zero() {
    let lab = InstanceLabeling::new(4, 4, 1, (0..16).map(|p| (p % 2) as u16).collect()).unwrap();
    let off = collapsing_offsets(&lab, &[[2.0, 2.0]]);
    let sigma = FieldF64::filled(4, 4, 1, 1.0).unwrap();
    let l = embedding_loss(&embed(&off), &sigma, &lab, &LossConfig::default()).unwrap();
    assert_eq!(l, 0.0);
}

#[test]
fn embedding_loss_requires_foreground() {
    let lab = InstanceLabeling::background(3, 3).unwrap();
    let off = FieldF64::filled(3, 3, 2, 0.0).unwrap();
    let sigma = FieldF64::filled(3, 3, 1, 1.0).unwrap();
    assert!(matches!(
        embedding_loss(&embed(&off), &sigma, &lab, &LossConfig::default()),
        Err(Error::Domain(_))
    ));
}

#[test]
fn embedding_loss_ignores_background_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let labels: Vec<u16> = (0..36).map(|_| rng.gen_range(0..3)).collect();
    let lab = InstanceLabeling::from_ids_compacting(6, 6, &labels.iter().map(|&l| l as u32).collect::<Vec<_>>()).unwrap();
    let off = FieldF64::from_vec(6, 6, 2, (0..72).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
    let sigma = FieldF64::from_vec(6, 6, 1, (0..36).map(|_| rng.gen_range(0.5..3.0)).collect()).unwrap();
    let cfg = LossConfig::default();
    let base = embedding_loss(&embed(&off), &sigma, &lab, &cfg).unwrap();

    let (mut off2, mut sigma2) = (off.clone(), sigma.clone());
    for p in 0..36 {
        if lab.label(p) == 0 {
            off2.data_mut()[2 * p] += rng.gen_range(-50.0..50.0);
            off2.data_mut()[2 * p + 1] = f64::from(rng.gen_range(-9i8..9));
            sigma2.data_mut()[p] = rng.gen_range(-5.0..5.0);
        }
    }
    let moved = embedding_loss(&embed(&off2), &sigma2, &lab, &cfg).unwrap();
    assert_eq!(base.to_bits(), moved.to_bits());
}

/// Straight-line evaluation with an exhaustive-subset Lovász oracle.
fn reference_embedding_loss(off: &FieldF64, sigma: &FieldF64, lab: &InstanceLabeling) -> f64 {
    let w = lab.width();
    let k = lab.num_instances();
    let fg: Vec<usize> = (0..lab.labels().len()).filter(|&p| lab.label(p) > 0).collect();
    let mut total = 0.0;
    for id in 1..=k as u16 {
        let members: Vec<usize> = fg.iter().copied().filter(|&p| lab.label(p) == id).collect();
        let n = members.len() as f64;
        let mut c = [0.0; 2];
        let mut s = 0.0;
        for &p in &members {
            c[0] += (p % w) as f64 + 0.5 + off.data()[2 * p];
            c[1] += (p / w) as f64 + 0.5 + off.data()[2 * p + 1];
            s += sigma.data()[p];
        }
        let (c, s) = ([c[0] / n, c[1] / n], s / n);
        let mut errs = Vec::new();
        let mut ys = Vec::new();
        for &p in &fg {
            let ex = (p % w) as f64 + 0.5 + off.data()[2 * p];
            let ey = (p / w) as f64 + 0.5 + off.data()[2 * p + 1];
            let phi = (-((ex - c[0]).powi(2) + (ey - c[1]).powi(2)) / (2.0 * s * s)).exp();
            let y = (lab.label(p) == id) as u8;
            let score = 2.0 * phi - 1.0;
            errs.push((1.0 - score * (2.0 * y as f64 - 1.0)).max(0.0));
            ys.push(y);
        }
        total += subset_lovasz(&errs, &ys);
    }
    total / k as f64
}

fn subset_lovasz(m: &[f64], ys: &[u8]) -> f64 {
    let n = m.len();
    let jac = |mask: u32| {
        let (mut wrong, mut union) = (0.0, 0.0);
        for i in 0..n {
            let miss = mask & (1 << i) != 0;
            wrong += miss as u8 as f64;
            union += (ys[i] == 1 || miss) as u8 as f64;
        }
        if union == 0.0 { 0.0 } else { wrong / union }
    };
    let mut total = 0.0;
    for a in 1u32..(1 << n) {
        let mut mu = 0.0;
        let mut b = a;
        loop {
            let sign = if (a & !b).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
            mu += sign * jac(b);
            if b == 0 {
                break;
            }
            b = (b - 1) & a;
        }
        let min = (0..n).filter(|i| a & (1 << i) != 0).map(|i| m[i]).fold(f64::INFINITY, f64::min);
        total += mu * min;
    }
    total
}

#[test]
fn embedding_loss_matches_reference_on_two_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..5 {
        let mut labels = vec![0u16; 36];
        // five pixels per instance keeps the subset oracle small
        for id in 1..=2u16 {
            let mut placed = 0;
            while placed < 5 {
                let p = rng.gen_range(0..36);
                if labels[p] == 0 {
                    labels[p] = id;
                    placed += 1;
                }
            }
        }
        let lab = InstanceLabeling::new(6, 6, 2, labels).unwrap();
        let off = FieldF64::from_vec(6, 6, 2, (0..72).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let sigma = FieldF64::from_vec(6, 6, 1, (0..36).map(|_| rng.gen_range(0.5..2.5)).collect()).unwrap();
        let got = embedding_loss(&embed(&off), &sigma, &lab, &LossConfig::default()).unwrap();
        let want = reference_embedding_loss(&off, &sigma, &lab);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
}

#[test]
fn bandwidth_loss_cases() {
    let mut cfg = LossConfig::default();
    // margin 1.18 * 2 < 4
    assert_eq!(bandwidth_saturation_loss(&stats_with(vec![[0.0; 2]; 2], vec![2.0, 3.0]), &cfg), 0.0);

    cfg.delta_margin = 1.0;
    let one = bandwidth_saturation_loss(&stats_with(vec![[0.0; 2]], vec![1.0]), &cfg);
    assert!((one - ((2.0 * 2f64.ln()).sqrt() - 1.0)).abs() < 1e-15);
    assert!((one - 0.177410).abs() < 1e-6);

    let t = |s: f64| (margin(s, 0.5).unwrap() - 1.0).max(0.0);
    let two = bandwidth_saturation_loss(&stats_with(vec![[0.0; 2]; 2], vec![1.5, 3.0]), &cfg);
    assert!((two - (t(1.5) + t(3.0)) / 2.0).abs() < 1e-14);
}

#[test]
fn push_loss_cases() {
    let mut cfg = LossConfig::default();
    assert_eq!(push_loss(&stats_with(vec![[1.0, 1.0]], vec![1.0]), &cfg), 0.0);
    assert_eq!(push_loss(&stats_with(vec![[0.0, 0.0], [16.0, 0.0]], vec![1.0; 2]), &cfg), 0.0);
    cfg.delta_push = 1.0;
    assert_eq!(push_loss(&stats_with(vec![[5.0, 5.0], [5.0, 5.0]], vec![1.0; 2]), &cfg), 4.0);
}

#[test]
fn seed_loss_cases() {
    let cfg = LossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let lab = InstanceLabeling::from_ids_compacting(5, 5, &(0..25).map(|p| (p % 3) as u32).collect::<Vec<_>>()).unwrap();
    let off = FieldF64::from_vec(5, 5, 2, (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let sigma = FieldF64::filled(5, 5, 1, 1.5).unwrap();
    let e = embed(&off);
    let stats = instance_stats(&e, &sigma, &lab).unwrap();
    let seed = FieldF64::from_vec(5, 5, 1, seed_targets(&e, &lab, &stats)).unwrap();
    assert_eq!(seed_loss(&seed, &e, &sigma, &lab, &cfg).unwrap(), 0.0);

    let bg = InstanceLabeling::background(4, 4).unwrap();
    let zeros = FieldF64::filled(4, 4, 1, 0.0).unwrap();
    let e0 = embed(&FieldF64::filled(4, 4, 2, 0.0).unwrap());
    assert_eq!(seed_loss(&zeros, &e0, &FieldF64::filled(4, 4, 1, 1.0).unwrap(), &bg, &cfg).unwrap(), 0.0);

    let mut labels = vec![0u16; 16];
    labels[5] = 1;
    let single = InstanceLabeling::new(4, 4, 1, labels).unwrap();
    let l = seed_loss(&zeros, &e0, &FieldF64::filled(4, 4, 1, 1.0).unwrap(), &single, &cfg).unwrap();
    assert_eq!(l, 1.0 / 16.0);
}

#[test]
fn zero_weights_give_zero_total_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let lab = InstanceLabeling::from_ids_compacting(6, 6, &(0..36).map(|p| (p % 4) as u32).collect::<Vec<_>>()).unwrap();
    let off = FieldF64::from_vec(6, 6, 2, (0..72).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    let sigma = FieldF64::filled(6, 6, 1, 2.0).unwrap();
    let seed = FieldF64::filled(6, 6, 1, 0.3).unwrap();
    let cfg = LossConfig {
        weights: LossWeights::ZERO,
        ..LossConfig::default()
    };
    let inputs = LossInputs {
        offsets: &off,
        sigma: &sigma,
        seed: &seed,
        labeling: &lab,
    };
    let (report, grads) = total_loss_and_gradients(inputs, &cfg).unwrap();
    assert_eq!(report.total, 0.0);
    assert!(report.embedding > 0.0);
    assert_eq!(report.max_grad_inf(), 0.0);
    assert!(grads.d_offsets.data().iter().all(|&g| g == 0.0));
}

#[test]
fn perfect_scene_total_is_zero() {
    let cfg = LossConfig::default();
    // far enough apart that cross-instance affinities underflow to exactly 0
    let ids: Vec<u32> = (0..1200).map(|p| if p % 200 < 3 { 1 } else if p % 200 > 196 { 2 } else { 0 }).collect();
    let lab = InstanceLabeling::from_ids_compacting(6, 200, &ids).unwrap();
    let off = collapsing_offsets(&lab, &[[1.5, 3.0], [198.5, 3.0]]);
    let e = embed(&off);
    // margin exactly delta_margin
    let sigma = FieldF64::filled(6, 200, 1, cfg.delta_margin / cfg.margin_factor()).unwrap();
    let stats = instance_stats(&e, &sigma, &lab).unwrap();
    let seed = FieldF64::from_vec(6, 200, 1, seed_targets(&e, &lab, &stats)).unwrap();
    let inputs = LossInputs {
        offsets: &off,
        sigma: &sigma,
        seed: &seed,
        labeling: &lab,
    };
    let (report, grads) = total_loss_and_gradients(inputs, &cfg).unwrap();
    assert_eq!(report.total, 0.0, "{report:?}");
    assert_eq!(report.max_grad_inf(), 0.0);
    assert_eq!(grads.d_sigma.max_abs(), 0.0);
}

#[test]
fn report_total_is_weighted_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let lab = InstanceLabeling::from_ids_compacting(8, 8, &(0..64).map(|_| rng.gen_range(0..4)).collect::<Vec<u32>>()).unwrap();
    let off = FieldF64::from_vec(8, 8, 2, (0..128).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    let sigma = FieldF64::from_vec(8, 8, 1, (0..64).map(|_| rng.gen_range(1.0..5.0)).collect()).unwrap();
    let seed = FieldF64::from_vec(8, 8, 1, (0..64).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let cfg = LossConfig {
        weights: LossWeights {
            w_e: 0.7,
            w_b: 2.0,
            w_d: 0.3,
            w_s: 1.5,
        },
        ..LossConfig::default()
    };
    let (r, _) = total_loss_and_gradients(
        LossInputs {
            offsets: &off,
            sigma: &sigma,
            seed: &seed,
            labeling: &lab,
        },
        &cfg,
    )
    .unwrap();
    let w = cfg.weights;
    let sum = w.w_e * r.embedding + w.w_b * r.bandwidth + w.w_d * r.push + w.w_s * r.seed;
    assert!((r.total - sum).abs() <= 1e-6 * sum.abs());

    // individual entry points agree with the aggregate
    let e = embed(&off);
    let stats = instance_stats(&e, &sigma, &lab).unwrap();
    assert_eq!(r.embedding, embedding_loss(&e, &sigma, &lab, &cfg).unwrap());
    assert!((r.bandwidth - bandwidth_saturation_loss(&stats, &cfg)).abs() < 1e-14);
    assert!((r.push - push_loss(&stats, &cfg)).abs() < 1e-12);
    assert_eq!(r.seed, seed_loss(&seed, &e, &sigma, &lab, &cfg).unwrap());
}

#[test]
fn embedding_and_push_are_translation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = LossConfig::default();
    let lab = InstanceLabeling::from_ids_compacting(8, 8, &(0..64).map(|_| rng.gen_range(0..4)).collect::<Vec<u32>>()).unwrap();
    let off = FieldF64::from_vec(8, 8, 2, (0..128).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    let sigma = FieldF64::from_vec(8, 8, 1, (0..64).map(|_| rng.gen_range(0.5..3.0)).collect()).unwrap();
    let mut shifted = off.clone();
    for pair in shifted.data_mut().chunks_exact_mut(2) {
        pair[0] += 3.0;
        pair[1] -= 7.0;
    }
    let (e0, e1) = (embed(&off), embed(&shifted));
    let a = embedding_loss(&e0, &sigma, &lab, &cfg).unwrap();
    let b = embedding_loss(&e1, &sigma, &lab, &cfg).unwrap();
    assert!((a - b).abs() < 1e-12);
    let p0 = push_loss(&instance_stats(&e0, &sigma, &lab).unwrap(), &cfg);
    let p1 = push_loss(&instance_stats(&e1, &sigma, &lab).unwrap(), &cfg);
    assert!((p0 - p1).abs() < 1e-9);
}

#[test]
fn config_validation_and_json_names() {
    let cfg = LossConfig::default();
    cfg.validate().unwrap();
    let json = serde_json::to_value(cfg).unwrap();
    for key in ["prob_threshold", "delta_margin", "delta_push", "weights"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    for key in ["w_e", "w_b", "w_d", "w_s"] {
        assert!(json["weights"].get(key).is_some(), "{key}");
    }
    let back: LossConfig = serde_json::from_value(json).unwrap();
    assert_eq!(back, cfg);

    for bad in [
        LossConfig { prob_threshold: 1.0, ..cfg },
        LossConfig { prob_threshold: 0.0, ..cfg },
        LossConfig { delta_margin: 0.0, ..cfg },
        LossConfig { delta_push: -1.0, ..cfg },
        LossConfig { weights: LossWeights { w_b: -0.1, ..cfg.weights }, ..cfg },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
