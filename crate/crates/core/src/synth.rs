//! Deterministic synthetic lane scenes.
//!
//! Each lane is a quadratic in normalized row position,
//! `x(r) = a + b (r / H) + c (r / H)^2`, with `x` in column units (column
//! index `j` covers `x` in `(j - 0.5, j + 0.5]`). Lanes are rasterized row by
//! row: pixel `(r, j)` belongs to a lane when `x(r) - t/2 < j <= x(r) + t/2`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::InstanceLabeling;
use crate::io;

pub const MAX_ATTEMPTS: usize = 1000;
pub const MAX_LANES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub num_lanes: usize,
    /// Lane width in pixels.
    pub thickness: f64,
    /// Bounds for the quadratic coefficient `c`.
    pub curvature_range: [f64; 2],
    /// Bounds for the linear coefficient `b`.
    pub slope_range: [f64; 2],
    /// Minimum horizontal distance between neighbouring lane centerlines at
    /// every row. Never less than `2 * thickness`.
    pub min_separation: f64,
    pub rng_seed: u64,
    /// Rows between sampled centerline points.
    pub row_stride: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 128,
            num_lanes: 4,
            thickness: 3.0,
            curvature_range: [-12.0, 12.0],
            slope_range: [-24.0, 24.0],
            min_separation: 0.0,
            rng_seed: 0,
            row_stride: 4,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("scene dimensions must be >= 1".into()));
        }
        if !(1..=MAX_LANES).contains(&self.num_lanes) {
            return Err(Error::Config(format!("num_lanes must be 1..={MAX_LANES}, got {}", self.num_lanes)));
        }
        if !(self.thickness >= 1.0) {
            return Err(Error::Config(format!("thickness must be >= 1, got {}", self.thickness)));
        }
        for (name, [lo, hi]) in [("curvature_range", self.curvature_range), ("slope_range", self.slope_range)] {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!("{name} must be finite with lo <= hi")));
            }
        }
        if self.row_stride == 0 {
            return Err(Error::Config("row_stride must be >= 1".into()));
        }
        Ok(())
    }

    pub fn separation(&self) -> f64 {
        self.min_separation.max(2.0 * self.thickness)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaneCurve {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl LaneCurve {
    pub fn x_at(&self, row: usize, height: usize) -> f64 {
        let t = row as f64 / height as f64;
        self.a + self.b * t + self.c * t * t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub id: u16,
    pub curve: LaneCurve,
    /// `(row, x)` samples every `row_stride` rows, starting at row 0.
    pub centerline: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaneScene {
    pub config: SynthConfig,
    pub labeling: InstanceLabeling,
    pub fg_mask: Vec<bool>,
    pub lanes: Vec<Lane>,
}

/// JSON sidecar stored next to the scene labeling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSidecar {
    pub config: SynthConfig,
    pub lanes: Vec<Lane>,
}

pub const LABELS_FILE: &str = "labels.lel";
pub const SIDECAR_FILE: &str = "scene.json";

impl LaneScene {
    pub fn gt_lanes(&self) -> Vec<Vec<(usize, f64)>> {
        self.lanes.iter().map(|l| l.centerline.clone()).collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        io::save_labeling(dir.join(LABELS_FILE), &self.labeling)?;
        let sidecar = SceneSidecar {
            config: self.config.clone(),
            lanes: self.lanes.clone(),
        };
        let path = dir.join(SIDECAR_FILE);
        let json = serde_json::to_string_pretty(&sidecar)?;
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let labeling = io::load_labeling(dir.join(LABELS_FILE))?;
        let path = dir.join(SIDECAR_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let sidecar: SceneSidecar = serde_json::from_str(&text)?;
        if labeling.height() != sidecar.config.height || labeling.width() != sidecar.config.width {
            return Err(Error::Shape("scene labeling does not match its sidecar config".into()));
        }
        Ok(Self {
            fg_mask: labeling.foreground_mask(),
            config: sidecar.config,
            labeling,
            lanes: sidecar.lanes,
        })
    }
}

/// Row-wise interval rasterization clipped to the image.
pub fn rasterize_lane(curve: &LaneCurve, thickness: f64, height: usize, width: usize) -> Vec<bool> {
    let mut mask = vec![false; height * width];
    let half = thickness / 2.0;
    for r in 0..height {
        let x = curve.x_at(r, height);
        // columns j with x - half < j <= x + half
        let lo = (x - half).floor() + 1.0;
        let hi = (x + half).floor();
        if hi < 0.0 || lo > (width - 1) as f64 {
            continue;
        }
        let lo = lo.max(0.0) as usize;
        let hi = hi.min((width - 1) as f64) as usize;
        for j in lo..=hi {
            mask[r * width + j] = true;
        }
    }
    mask
}

fn draw(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Samples lane curves by rejection until every lane stays inside the image
/// and neighbouring lanes keep the configured separation at every row.
pub fn sample_curves(cfg: &SynthConfig) -> Result<Vec<LaneCurve>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let (h, w) = (cfg.height, cfg.width);
    let half = cfg.thickness / 2.0;
    let (x_min, x_max) = (half, w as f64 - 1.0 - half);
    if x_min > x_max {
        return Err(Error::Config("lanes are wider than the image".into()));
    }
    let gap = cfg.separation();

    'attempt: for _ in 0..MAX_ATTEMPTS {
        let mut curves = Vec::with_capacity(cfg.num_lanes);
        for _ in 0..cfg.num_lanes {
            let b = draw(&mut rng, cfg.slope_range);
            let c = draw(&mut rng, cfg.curvature_range);
            let a = draw(&mut rng, [x_min, x_max]);
            let curve = LaneCurve { a, b, c };
            if (0..h).any(|r| !(x_min..=x_max).contains(&curve.x_at(r, h))) {
                continue 'attempt;
            }
            curves.push(curve);
        }
        curves.sort_by(|p, q| p.x_at(h - 1, h).total_cmp(&q.x_at(h - 1, h)));
        for pair in curves.windows(2) {
            if (0..h).any(|r| pair[1].x_at(r, h) - pair[0].x_at(r, h) < gap) {
                continue 'attempt;
            }
        }
        return Ok(curves);
    }
    Err(Error::Config(format!(
        "could not place {} lanes {gap} px apart in a {h}x{w} image after {MAX_ATTEMPTS} attempts",
        cfg.num_lanes
    )))
}

pub fn generate_scene(cfg: &SynthConfig) -> Result<LaneScene> {
    let curves = sample_curves(cfg)?;
    scene_from_curves(cfg, &curves)
}

/// Rasterizes the given curves (already ordered left to right) into a scene.
pub fn scene_from_curves(cfg: &SynthConfig, curves: &[LaneCurve]) -> Result<LaneScene> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut labels = vec![0u16; h * w];
    let mut lanes = Vec::with_capacity(curves.len());
    for (i, curve) in curves.iter().enumerate() {
        let id = (i + 1) as u16;
        for (p, on) in rasterize_lane(curve, cfg.thickness, h, w).into_iter().enumerate() {
            if on {
                if labels[p] != 0 {
                    return Err(Error::Config(format!("lanes {} and {id} overlap", labels[p])));
                }
                labels[p] = id;
            }
        }
        let centerline = (0..h).step_by(cfg.row_stride).map(|r| (r, curve.x_at(r, h))).collect();
        lanes.push(Lane {
            id,
            curve: *curve,
            centerline,
        });
    }
    let labeling = InstanceLabeling::new(h, w, curves.len(), labels)?;
    Ok(LaneScene {
        config: cfg.clone(),
        fg_mask: labeling.foreground_mask(),
        labeling,
        lanes,
    })
}
