//! Turning embedding fields into instances.
//!
//! [`fast_cluster`] repeatedly takes the unassigned foreground pixel with the
//! highest seed score as an instance center and claims every unassigned
//! foreground pixel whose Gaussian affinity to it reaches `Pr`. [`dbscan`] is
//! the density-clustering baseline over the same embedding points.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{EmbeddingField, FieldF64, InstanceLabeling};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterParams {
    pub seed_threshold: f64,
    pub prob_threshold: f64,
    pub max_instances: usize,
    /// Instances smaller than this are dissolved back to background.
    pub min_pixels: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            seed_threshold: 0.5,
            prob_threshold: 0.5,
            max_instances: 32,
            min_pixels: 8,
        }
    }
}

impl ClusterParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("seed_threshold", self.seed_threshold), ("prob_threshold", self.prob_threshold)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must be in (0, 1), got {v}")));
            }
        }
        if self.max_instances == 0 {
            return Err(Error::Config("max_instances must be >= 1".into()));
        }
        if self.max_instances > u16::MAX as usize {
            return Err(Error::Config(format!("max_instances must be <= {}", u16::MAX)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DbscanParams {
    pub eps: f64,
    pub min_pts: usize,
}

impl Default for DbscanParams {
    fn default() -> Self {
        Self { eps: 2.0, min_pts: 3 }
    }
}

impl DbscanParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::Config(format!("eps must be a positive number, got {}", self.eps)));
        }
        if self.min_pts == 0 {
            return Err(Error::Config("min_pts must be >= 1".into()));
        }
        Ok(())
    }
}

fn check_inputs(embedding: &EmbeddingField<f64>, fg_mask: &[bool]) -> Result<(usize, usize)> {
    let (h, w) = (embedding.height(), embedding.width());
    if embedding.e.channels() != 2 {
        return Err(Error::Shape(format!("embedding needs 2 channels, got {}", embedding.e.channels())));
    }
    if fg_mask.len() != h * w {
        return Err(Error::Shape(format!(
            "foreground mask has {} entries for a {h}x{w} grid",
            fg_mask.len()
        )));
    }
    Ok((h, w))
}

/// Seed-then-mask clustering. Instance ids follow emission order after
/// dissolved instances are removed.
pub fn fast_cluster(
    embedding: &EmbeddingField<f64>,
    sigma: &FieldF64,
    seed: &FieldF64,
    fg_mask: &[bool],
    params: &ClusterParams,
) -> Result<InstanceLabeling> {
    params.validate()?;
    let (h, w) = check_inputs(embedding, fg_mask)?;
    sigma.expect_shape(h, w, 1, "sigma")?;
    seed.expect_shape(h, w, 1, "seed")?;
    let sig = sigma.data();
    let s = seed.data();
    let e = embedding.e.data();

    let mut unassigned: Vec<usize> = (0..h * w).filter(|&p| fg_mask[p]).collect();
    if let Some(&p) = unassigned.iter().find(|&&p| !(sig[p] > 0.0)) {
        return Err(Error::Domain(format!("sigma must be > 0 on foreground, pixel {p} has {}", sig[p])));
    }
    let mut labels = vec![0u32; h * w];
    let mut sizes = Vec::new();
    let neg_two_ln_pr = -2.0 * params.prob_threshold.ln();

    while sizes.len() < params.max_instances {
        // `unassigned` stays in row-major order, so strict > keeps the
        // smallest index among equal seeds.
        let mut best: Option<usize> = None;
        for &p in &unassigned {
            if s[p] >= params.seed_threshold && best.is_none_or(|b| s[p] > s[b]) {
                best = Some(p);
            }
        }
        let Some(center) = best else { break };
        let c = [e[2 * center], e[2 * center + 1]];
        let sc = sig[center];
        let r2 = neg_two_ln_pr * sc * sc;
        let id = sizes.len() as u32 + 1;
        let mut size = 0;
        unassigned.retain(|&p| {
            let dx = e[2 * p] - c[0];
            let dy = e[2 * p + 1] - c[1];
            let d2 = dx * dx + dy * dy;
            let member = if (d2 - r2).abs() <= 1e-9 * r2 {
                (-d2 / (2.0 * sc * sc)).exp() >= params.prob_threshold
            } else {
                d2 <= r2
            };
            if member {
                labels[p] = id;
                size += 1;
            }
            !member
        });
        sizes.push(size);
    }

    let mut remap = vec![0u16; sizes.len() + 1];
    let mut kept = 0;
    for (k, &size) in sizes.iter().enumerate() {
        if size >= params.min_pixels {
            kept += 1;
            remap[k + 1] = kept;
        }
    }
    let labels = labels.into_iter().map(|l| remap[l as usize]).collect();
    InstanceLabeling::new(h, w, kept as usize, labels)
}

/// Uniform grid over the points with cells at least `eps` wide, so every
/// neighbor of a point lies in the 3×3 block of cells around it.
struct Grid {
    origin: [f64; 2],
    cell: f64,
    nx: usize,
    ny: usize,
    starts: Vec<usize>,
    members: Vec<usize>,
}

impl Grid {
    const MAX_CELLS_PER_POINT: usize = 4;

    fn new(points: &[[f64; 2]], eps: f64) -> Self {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in points {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        if points.is_empty() {
            lo = [0.0; 2];
            hi = [0.0; 2];
        }
        let budget = (points.len() * Self::MAX_CELLS_PER_POINT).max(1024) as f64;
        let area = (hi[0] - lo[0] + eps) * (hi[1] - lo[1] + eps);
        let cell = eps.max((area / budget).sqrt());
        let nx = ((hi[0] - lo[0]) / cell) as usize + 1;
        let ny = ((hi[1] - lo[1]) / cell) as usize + 1;

        let mut grid = Self {
            origin: lo,
            cell,
            nx,
            ny,
            starts: vec![0; nx * ny + 1],
            members: vec![0; points.len()],
        };
        let cells: Vec<usize> = points.iter().map(|p| grid.cell_of(p)).collect();
        for &c in &cells {
            grid.starts[c + 1] += 1;
        }
        for i in 0..nx * ny {
            grid.starts[i + 1] += grid.starts[i];
        }
        let mut fill = grid.starts.clone();
        for (i, &c) in cells.iter().enumerate() {
            grid.members[fill[c]] = i;
            fill[c] += 1;
        }
        grid
    }

    fn coords(&self, p: &[f64; 2]) -> (usize, usize) {
        let cx = (((p[0] - self.origin[0]) / self.cell) as usize).min(self.nx - 1);
        let cy = (((p[1] - self.origin[1]) / self.cell) as usize).min(self.ny - 1);
        (cx, cy)
    }

    fn cell_of(&self, p: &[f64; 2]) -> usize {
        let (cx, cy) = self.coords(p);
        cy * self.nx + cx
    }

    fn neighbors(&self, points: &[[f64; 2]], i: usize, eps2: f64, out: &mut Vec<usize>) {
        out.clear();
        let p = points[i];
        let (cx, cy) = self.coords(&p);
        for gy in cy.saturating_sub(1)..=(cy + 1).min(self.ny - 1) {
            for gx in cx.saturating_sub(1)..=(cx + 1).min(self.nx - 1) {
                let c = gy * self.nx + gx;
                for &j in &self.members[self.starts[c]..self.starts[c + 1]] {
                    let dx = points[j][0] - p[0];
                    let dy = points[j][1] - p[1];
                    if dx * dx + dy * dy <= eps2 {
                        out.push(j);
                    }
                }
            }
        }
    }
}

/// Classical DBSCAN over the embedding points of foreground pixels. A point's
/// neighborhood includes itself; a point is core when it has at least
/// `min_pts` neighbors within distance `eps`.
pub fn dbscan(embedding: &EmbeddingField<f64>, fg_mask: &[bool], params: &DbscanParams) -> Result<InstanceLabeling> {
    let (h, w) = check_inputs(embedding, fg_mask)?;
    let pixels: Vec<usize> = (0..h * w).filter(|&p| fg_mask[p]).collect();
    dbscan_in_order(embedding, &pixels, h, w, params)
}

/// DBSCAN visiting foreground pixels in the given order.
pub(crate) fn dbscan_in_order(
    embedding: &EmbeddingField<f64>,
    pixels: &[usize],
    h: usize,
    w: usize,
    params: &DbscanParams,
) -> Result<InstanceLabeling> {
    params.validate()?;
    const UNVISITED: u32 = u32::MAX;
    let points: Vec<[f64; 2]> = pixels.iter().map(|&p| embedding.point(p)).collect();
    if let Some(i) = points.iter().position(|q| !(q[0].is_finite() && q[1].is_finite())) {
        return Err(Error::Domain(format!("embedding of pixel {} is not finite", pixels[i])));
    }
    let grid = Grid::new(&points, params.eps);
    let eps2 = params.eps * params.eps;

    // 0 = noise, 1.. = cluster id
    let mut assign = vec![UNVISITED; points.len()];
    let mut next_id = 0u32;
    let mut nbrs = Vec::new();
    let mut frontier = Vec::new();
    for i in 0..points.len() {
        if assign[i] != UNVISITED {
            continue;
        }
        grid.neighbors(&points, i, eps2, &mut nbrs);
        if nbrs.len() < params.min_pts {
            assign[i] = 0;
            continue;
        }
        next_id += 1;
        assign[i] = next_id;
        frontier.clear();
        frontier.extend(nbrs.iter().copied().filter(|&j| j != i));
        while let Some(j) = frontier.pop() {
            if assign[j] == 0 {
                // border point previously marked as noise
                assign[j] = next_id;
                continue;
            }
            if assign[j] != UNVISITED {
                continue;
            }
            assign[j] = next_id;
            grid.neighbors(&points, j, eps2, &mut nbrs);
            if nbrs.len() >= params.min_pts {
                frontier.extend(nbrs.iter().copied().filter(|&q| assign[q] == UNVISITED || assign[q] == 0));
            }
        }
    }

    let mut ids = vec![0u32; h * w];
    for (k, &p) in pixels.iter().enumerate() {
        ids[p] = assign[k];
    }
    let k = next_id as usize;
    if k > u16::MAX as usize {
        return Err(Error::Domain(format!("dbscan found {k} clusters, more than a labeling can hold")));
    }
    InstanceLabeling::new(h, w, k, ids.into_iter().map(|l| l as u16).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub pred: u16,
    pub gt: u16,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Matching {
    pub pairs: Vec<MatchedPair>,
    pub unmatched_pred: Vec<u16>,
    pub unmatched_gt: Vec<u16>,
}

/// Pixel IoU of every (pred, gt) instance pair; entry `[a - 1][b - 1]`.
pub fn iou_table(pred: &InstanceLabeling, gt: &InstanceLabeling) -> Result<Vec<Vec<f64>>> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::Shape(format!(
            "labelings differ in size: {}x{} vs {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let (kp, kg) = (pred.num_instances(), gt.num_instances());
    let mut inter = vec![vec![0usize; kg]; kp];
    for (&a, &b) in pred.labels().iter().zip(gt.labels()) {
        if a > 0 && b > 0 {
            inter[a as usize - 1][b as usize - 1] += 1;
        }
    }
    let sp = pred.pixel_counts();
    let sg = gt.pixel_counts();
    Ok((0..kp)
        .map(|a| {
            (0..kg)
                .map(|b| inter[a][b] as f64 / (sp[a] + sg[b] - inter[a][b]) as f64)
                .collect()
        })
        .collect())
}

/// Greedy one-to-one matching by descending IoU. Only overlapping pairs are
/// candidates; ties go to the smaller (pred, gt) ids.
pub fn match_instances(pred: &InstanceLabeling, gt: &InstanceLabeling, iou_threshold: f64) -> Result<Matching> {
    let table = iou_table(pred, gt)?;
    let (kp, kg) = (pred.num_instances(), gt.num_instances());
    let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
    for (a, row) in table.iter().enumerate() {
        for (b, &iou) in row.iter().enumerate() {
            if iou > 0.0 && iou >= iou_threshold {
                candidates.push((a, b, iou));
            }
        }
    }
    candidates.sort_by(|x, y| y.2.total_cmp(&x.2).then(x.0.cmp(&y.0)).then(x.1.cmp(&y.1)));
    let mut pred_used = vec![false; kp];
    let mut gt_used = vec![false; kg];
    let mut pairs = Vec::new();
    for (a, b, iou) in candidates {
        if !pred_used[a] && !gt_used[b] {
            pred_used[a] = true;
            gt_used[b] = true;
            pairs.push(MatchedPair {
                pred: a as u16 + 1,
                gt: b as u16 + 1,
                iou,
            });
        }
    }
    Ok(Matching {
        pairs,
        unmatched_pred: (0..kp).filter(|&a| !pred_used[a]).map(|a| a as u16 + 1).collect(),
        unmatched_gt: (0..kg).filter(|&b| !gt_used[b]).map(|b| b as u16 + 1).collect(),
    })
}

/// Partition as a canonical id sequence: ids renumbered by first appearance.
pub fn canonical_partition(labeling: &InstanceLabeling) -> Vec<u16> {
    let mut remap = vec![0u16; labeling.num_instances() + 1];
    let mut next = 0u16;
    labeling
        .labels()
        .iter()
        .map(|&l| {
            if l == 0 {
                return 0;
            }
            if remap[l as usize] == 0 {
                next += 1;
                remap[l as usize] = next;
            }
            remap[l as usize]
        })
        .collect()
}
