//! Lane-level accuracy, instance-level clustering quality and the clustering
//! latency harness.
//!
//! Lanes are compared as row-sampled x positions in column-index units. A gt
//! point is correct when the matched prediction has a point on the same row
//! within `point_tolerance` columns.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{dbscan, fast_cluster, match_instances, ClusterParams, DbscanParams};
use crate::error::{Error, Result};
use crate::field::{make_coordinate_maps, EmbeddingField, Field, FieldF64, InstanceLabeling};
use crate::synth::LaneScene;

/// Row-sampled lane: `(row, x)` pairs with increasing rows.
pub type LanePoints = Vec<(usize, f64)>;

/// Tolerance used by the lane benchmark at its native 1280 px width.
pub const REFERENCE_TOLERANCE: f64 = 20.0;
pub const REFERENCE_WIDTH: f64 = 1280.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalParams {
    pub point_tolerance: f64,
    pub lane_accept_threshold: f64,
    pub iou_threshold: f64,
}

impl EvalParams {
    /// Defaults with the point tolerance scaled to an image `width` px wide.
    pub fn for_width(width: usize) -> Self {
        Self {
            point_tolerance: REFERENCE_TOLERANCE * width as f64 / REFERENCE_WIDTH,
            lane_accept_threshold: 0.85,
            iou_threshold: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.point_tolerance > 0.0) {
            return Err(Error::Config(format!(
                "point_tolerance must be > 0, got {}",
                self.point_tolerance
            )));
        }
        if !(self.lane_accept_threshold > 0.0 && self.lane_accept_threshold < 1.0) {
            return Err(Error::Config(format!(
                "lane_accept_threshold must be in (0, 1), got {}",
                self.lane_accept_threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.iou_threshold) {
            return Err(Error::Config(format!("iou_threshold must be in [0, 1], got {}", self.iou_threshold)));
        }
        Ok(())
    }
}

impl Default for EvalParams {
    fn default() -> Self {
        Self::for_width(REFERENCE_WIDTH as usize)
    }
}

/// Mean column of each instance on rows `0, row_stride, 2 * row_stride, ..`.
/// Rows an instance does not touch are left out. Index `k - 1` is instance `k`.
pub fn extract_pred_lanes(labeling: &InstanceLabeling, row_stride: usize) -> Vec<LanePoints> {
    let k = labeling.num_instances();
    let w = labeling.width();
    let stride = row_stride.max(1);
    let mut lanes = vec![Vec::new(); k];
    let mut sums = vec![(0.0f64, 0usize); k];
    for row in (0..labeling.height()).step_by(stride) {
        sums.iter_mut().for_each(|s| *s = (0.0, 0));
        for (col, &l) in labeling.labels()[row * w..(row + 1) * w].iter().enumerate() {
            if l > 0 {
                let s = &mut sums[l as usize - 1];
                s.0 += col as f64;
                s.1 += 1;
            }
        }
        for (lane, &(sum, n)) in lanes.iter_mut().zip(&sums) {
            if n > 0 {
                lane.push((row, sum / n as f64));
            }
        }
    }
    lanes
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaneScore {
    pub accuracy: f64,
    pub fp_rate: f64,
    pub fn_rate: f64,
    pub correct_points: usize,
    pub gt_points: usize,
}

fn correct_points(pred: &LanePoints, gt: &LanePoints, tol: f64) -> usize {
    // both are sorted by row
    let mut i = 0;
    let mut hits = 0;
    for &(row, x) in gt {
        while i < pred.len() && pred[i].0 < row {
            i += 1;
        }
        if i < pred.len() && pred[i].0 == row && (pred[i].1 - x).abs() <= tol {
            hits += 1;
        }
    }
    hits
}

/// Lane accuracy with false-positive and false-negative rates.
///
/// Pairs are matched greedily by point accuracy (fraction of the gt lane's
/// points hit), highest first, ties to the smaller indices, skipping pairs
/// with no hits. Matched pairs contribute their hits to `accuracy`; a
/// matched pair whose point accuracy reaches `lane_accept_threshold` makes
/// both lanes true positives, and every other lane counts as FP or FN. With
/// no gt points accuracy is 1.
pub fn tusimple_eval(pred: &[LanePoints], gt: &[LanePoints], params: &EvalParams) -> LaneScore {
    let mut candidates = Vec::new();
    for (a, p) in pred.iter().enumerate() {
        for (b, g) in gt.iter().enumerate() {
            let hits = correct_points(p, g, params.point_tolerance);
            if hits > 0 {
                candidates.push((a, b, hits, hits as f64 / g.len() as f64));
            }
        }
    }
    candidates.sort_by(|x, y| y.3.total_cmp(&x.3).then(x.0.cmp(&y.0)).then(x.1.cmp(&y.1)));
    let mut pred_used = vec![false; pred.len()];
    let mut gt_used = vec![false; gt.len()];
    let mut correct = 0;
    let mut tp = 0;
    for (a, b, hits, acc) in candidates {
        if pred_used[a] || gt_used[b] {
            continue;
        }
        pred_used[a] = true;
        gt_used[b] = true;
        correct += hits;
        if acc >= params.lane_accept_threshold {
            tp += 1;
        }
    }
    let gt_points: usize = gt.iter().map(Vec::len).sum();
    let rate = |miss: usize, total: usize| if total == 0 { 0.0 } else { miss as f64 / total as f64 };
    LaneScore {
        accuracy: if gt_points == 0 {
            1.0
        } else {
            correct as f64 / gt_points as f64
        },
        fp_rate: rate(pred.len() - tp, pred.len()),
        fn_rate: rate(gt.len() - tp, gt.len()),
        correct_points: correct,
        gt_points,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusteringQuality {
    /// Mean IoU over matched pairs, 0 when nothing matched.
    pub mean_iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub matched: usize,
    pub pred_count: usize,
    pub gt_count: usize,
}

/// Instance precision and recall at `iou_threshold` plus the mean IoU of the
/// matched pairs. Two empty labelings score 1 across the board; otherwise an
/// empty side scores 0.
pub fn clustering_quality(pred: &InstanceLabeling, gt: &InstanceLabeling, iou_threshold: f64) -> Result<ClusteringQuality> {
    let m = match_instances(pred, gt, iou_threshold)?;
    let (np, ng, nm) = (pred.num_instances(), gt.num_instances(), m.pairs.len());
    if np == 0 && ng == 0 {
        return Ok(ClusteringQuality {
            mean_iou: 1.0,
            precision: 1.0,
            recall: 1.0,
            matched: 0,
            pred_count: 0,
            gt_count: 0,
        });
    }
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(ClusteringQuality {
        mean_iou: if nm == 0 {
            0.0
        } else {
            m.pairs.iter().map(|p| p.iou).sum::<f64>() / nm as f64
        },
        precision: frac(nm, np),
        recall: frac(nm, ng),
        matched: nm,
        pred_count: np,
        gt_count: ng,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEval {
    pub scene: String,
    pub accuracy: f64,
    pub fp_rate: f64,
    pub fn_rate: f64,
    pub mean_instance_iou: f64,
    pub instance_precision: f64,
    pub instance_recall: f64,
    pub pred_instances: usize,
    pub gt_instances: usize,
}

/// Scores one predicted labeling against a synthetic scene.
pub fn evaluate_scene(name: &str, pred: &InstanceLabeling, scene: &LaneScene, params: &EvalParams) -> Result<SceneEval> {
    params.validate()?;
    let q = clustering_quality(pred, &scene.labeling, params.iou_threshold)?;
    let lanes = extract_pred_lanes(pred, scene.config.row_stride);
    let score = tusimple_eval(&lanes, &scene.gt_lanes(), params);
    Ok(SceneEval {
        scene: name.to_string(),
        accuracy: score.accuracy,
        fp_rate: score.fp_rate,
        fn_rate: score.fn_rate,
        mean_instance_iou: q.mean_iou,
        instance_precision: q.precision,
        instance_recall: q.recall,
        pred_instances: q.pred_count,
        gt_instances: q.gt_count,
    })
}

/// Scene-averaged metrics with the per-scene rows they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub fp_rate: f64,
    pub fn_rate: f64,
    pub mean_instance_iou: f64,
    pub instance_precision: f64,
    pub instance_recall: f64,
    pub scenes: Vec<SceneEval>,
}

impl EvalReport {
    pub fn from_scenes(scenes: Vec<SceneEval>) -> Self {
        let n = scenes.len().max(1) as f64;
        let mean = |f: fn(&SceneEval) -> f64| scenes.iter().map(f).sum::<f64>() / n;
        Self {
            accuracy: mean(|s| s.accuracy),
            fp_rate: mean(|s| s.fp_rate),
            fn_rate: mean(|s| s.fn_rate),
            mean_instance_iou: mean(|s| s.mean_instance_iou),
            instance_precision: mean(|s| s.instance_precision),
            instance_recall: mean(|s| s.instance_recall),
            scenes,
        }
    }

    /// One CSV row per scene, with a header.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for s in &self.scenes {
            w.serialize(s).map_err(|e| Error::Format {
                format: "csv",
                reason: e.to_string(),
            })?;
        }
        w.flush().map_err(|e| Error::Format {
            format: "csv",
            reason: e.to_string(),
        })
    }
}

/// Everything a clustering method consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterInput {
    pub embedding: EmbeddingField<f64>,
    pub sigma: FieldF64,
    pub seed: FieldF64,
    pub fg_mask: Vec<bool>,
}

impl ClusterInput {
    pub fn fast(&self, params: &ClusterParams) -> Result<InstanceLabeling> {
        fast_cluster(&self.embedding, &self.sigma, &self.seed, &self.fg_mask, params)
    }

    pub fn dbscan(&self, params: &DbscanParams) -> Result<InstanceLabeling> {
        dbscan(&self.embedding, &self.fg_mask, params)
    }
}

/// Fields a well-trained model would produce for `scene`: every lane pixel
/// embeds at its lane's mean pixel center plus uniform jitter of up to
/// `jitter` px per axis, sigma is `sigma` everywhere and the seed map is the
/// affinity to the pixel's own lane center (0 on background).
pub fn ideal_fields(scene: &LaneScene, jitter: f64, sigma: f64, rng_seed: u64) -> Result<ClusterInput> {
    let lab = &scene.labeling;
    let (h, w) = (lab.height(), lab.width());
    let coords = make_coordinate_maps(h, w)?;
    let k = lab.num_instances();
    let mut centers = vec![[0.0f64; 2]; k];
    for (p, &l) in lab.labels().iter().enumerate() {
        if l > 0 {
            centers[l as usize - 1][0] += coords.x.data()[p] as f64;
            centers[l as usize - 1][1] += coords.y.data()[p] as f64;
        }
    }
    for (c, &n) in centers.iter_mut().zip(&lab.pixel_counts()) {
        c[0] /= n as f64;
        c[1] /= n as f64;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut e = Vec::with_capacity(2 * h * w);
    let mut s = vec![0.0; h * w];
    for (p, &l) in lab.labels().iter().enumerate() {
        if l == 0 {
            e.push(coords.x.data()[p] as f64);
            e.push(coords.y.data()[p] as f64);
            continue;
        }
        let c = centers[l as usize - 1];
        let point = [
            c[0] + rng.gen_range(-jitter..=jitter),
            c[1] + rng.gen_range(-jitter..=jitter),
        ];
        let d2 = (point[0] - c[0]).powi(2) + (point[1] - c[1]).powi(2);
        s[p] = (-d2 / (2.0 * sigma * sigma)).exp();
        e.extend_from_slice(&point);
    }
    Ok(ClusterInput {
        embedding: EmbeddingField {
            e: Field::from_vec(h, w, 2, e)?,
        },
        sigma: Field::filled(h, w, 1, sigma)?,
        seed: Field::from_vec(h, w, 1, s)?,
        fg_mask: lab.foreground_mask(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub warmups: usize,
    pub runs: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { warmups: 3, runs: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    /// Median wall time per scene, milliseconds.
    pub fast_ms: f64,
    pub dbscan_ms: f64,
    pub speedup_ratio: f64,
    pub scenes: usize,
    pub warmups: usize,
    pub runs: usize,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn time_batch(cfg: &BenchConfig, scenes: usize, mut run: impl FnMut() -> Result<()>) -> Result<f64> {
    for _ in 0..cfg.warmups {
        run()?;
    }
    let mut samples = Vec::with_capacity(cfg.runs);
    for _ in 0..cfg.runs {
        let t = Instant::now();
        run()?;
        let dt = t.elapsed().max(Duration::from_nanos(1));
        samples.push(dt.as_secs_f64() * 1e3 / scenes as f64);
    }
    Ok(median(samples))
}

/// Times both clusterers on the same inputs on the calling thread. Before
/// timing, both must find the same number of instances on every input.
pub fn bench_clustering(
    inputs: &[ClusterInput],
    params: &ClusterParams,
    dbscan_params: &DbscanParams,
    cfg: &BenchConfig,
) -> Result<TimingReport> {
    if inputs.is_empty() {
        return Err(Error::Config("bench needs at least one scene".into()));
    }
    if cfg.runs == 0 {
        return Err(Error::Config("bench needs at least one timed run".into()));
    }
    for (i, input) in inputs.iter().enumerate() {
        let a = input.fast(params)?.num_instances();
        let b = input.dbscan(dbscan_params)?.num_instances();
        if a != b {
            return Err(Error::BenchSanity(format!(
                "scene {i}: fast_cluster found {a} instances, dbscan found {b}"
            )));
        }
    }
    let n = inputs.len();
    let fast_ms = time_batch(cfg, n, || {
        for input in inputs {
            std::hint::black_box(input.fast(params)?);
        }
        Ok(())
    })?;
    let dbscan_ms = time_batch(cfg, n, || {
        for input in inputs {
            std::hint::black_box(input.dbscan(dbscan_params)?);
        }
        Ok(())
    })?;
    Ok(TimingReport {
        fast_ms,
        dbscan_ms,
        speedup_ratio: dbscan_ms / fast_ms,
        scenes: n,
        warmups: cfg.warmups,
        runs: cfg.runs,
    })
}
