//! Dense per-pixel fields, pixel coordinate maps, spatial embeddings and
//! per-instance statistics.
//!
//! Fields are stored row-major with the channel index innermost. Coordinates
//! follow the pixel-center convention: the pixel in row `r`, column `c` sits
//! at `(c + 0.5, r + 0.5)` in raw pixel units.

use num_traits::Float;

use crate::error::{Error, Result};

/// H×W×C grid of reals, row-major, channel-innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Field<T = f32> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

pub type FieldF32 = Field<f32>;
pub type FieldF64 = Field<f64>;

impl<T: Copy> Field<T> {
    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        check_dims(height, width)?;
        if channels == 0 {
            return Err(Error::Dimension("field must have at least one channel".into()));
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} field needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Result<Self> {
        check_dims(height, width)?;
        Self::from_vec(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> T {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: T) {
        self.data[(row * self.width + col) * self.channels + channel] = value;
    }

    /// Value of channel `channel` at flat pixel index `pixel`.
    #[inline]
    pub fn at(&self, pixel: usize, channel: usize) -> T {
        self.data[pixel * self.channels + channel]
    }

    pub fn same_grid<U>(&self, other: &Field<U>) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Field<U> {
        Field {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn expect_shape(&self, height: usize, width: usize, channels: usize, what: &str) -> Result<()> {
        if self.height != height || self.width != width || self.channels != channels {
            return Err(Error::Shape(format!(
                "{what}: expected {height}x{width}x{channels}, got {}x{}x{}",
                self.height, self.width, self.channels
            )));
        }
        Ok(())
    }
}

impl<T: Float> Field<T> {
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute value, 0 for an all-zero field.
    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

impl Field<f32> {
    pub fn to_f64(&self) -> Field<f64> {
        self.map(f64::from)
    }
}

impl Field<f64> {
    pub fn to_f32(&self) -> Field<f32> {
        self.map(|v| v as f32)
    }
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::Dimension(format!(
            "height and width must be >= 1, got {height}x{width}"
        )));
    }
    Ok(())
}

/// Per-pixel x and y coordinate maps (pixel-center convention).
#[derive(Debug, Clone, PartialEq)]
pub struct CoordMaps {
    pub x: FieldF32,
    pub y: FieldF32,
}

impl CoordMaps {
    pub fn height(&self) -> usize {
        self.x.height()
    }

    pub fn width(&self) -> usize {
        self.x.width()
    }
}

pub fn make_coordinate_maps(height: usize, width: usize) -> Result<CoordMaps> {
    check_dims(height, width)?;
    let mut x = Vec::with_capacity(height * width);
    let mut y = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            x.push(c as f32 + 0.5);
            y.push(r as f32 + 0.5);
        }
    }
    Ok(CoordMaps {
        x: Field::from_vec(height, width, 1, x)?,
        y: Field::from_vec(height, width, 1, y)?,
    })
}

/// Pixel-center coordinate of flat pixel index `pixel` in a grid `width` wide.
#[inline]
pub fn pixel_center(pixel: usize, width: usize) -> [f64; 2] {
    [(pixel % width) as f64 + 0.5, (pixel / width) as f64 + 0.5]
}

/// Two-channel field `e = [x + o^x; y + o^y]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingField<T = f32> {
    pub e: Field<T>,
}

impl<T: Float> EmbeddingField<T> {
    #[inline]
    pub fn point(&self, pixel: usize) -> [T; 2] {
        [self.e.at(pixel, 0), self.e.at(pixel, 1)]
    }

    pub fn height(&self) -> usize {
        self.e.height()
    }

    pub fn width(&self) -> usize {
        self.e.width()
    }
}

pub fn spatial_embedding<T: Float>(offsets: &Field<T>, coords: &CoordMaps) -> Result<EmbeddingField<T>> {
    offsets.expect_shape(coords.height(), coords.width(), 2, "offsets")?;
    let mut e = offsets.clone();
    let xs = coords.x.data();
    let ys = coords.y.data();
    for (p, pair) in e.data_mut().chunks_exact_mut(2).enumerate() {
        pair[0] = T::from(xs[p]).unwrap() + pair[0];
        pair[1] = T::from(ys[p]).unwrap() + pair[1];
    }
    Ok(EmbeddingField { e })
}

/// Per-pixel instance ids: 0 is background, `1..=num_instances` are instances.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceLabeling {
    height: usize,
    width: usize,
    num_instances: usize,
    labels: Vec<u16>,
}

impl InstanceLabeling {
    /// Validates that every label is in `0..=num_instances` and that each
    /// instance id occurs at least once.
    pub fn new(height: usize, width: usize, num_instances: usize, labels: Vec<u16>) -> Result<Self> {
        check_dims(height, width)?;
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} labeling needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        if num_instances > u16::MAX as usize {
            return Err(Error::Domain(format!("too many instances: {num_instances}")));
        }
        let mut seen = vec![false; num_instances + 1];
        for &l in &labels {
            let l = l as usize;
            if l > num_instances {
                return Err(Error::Domain(format!(
                    "label {l} exceeds instance count {num_instances}"
                )));
            }
            seen[l] = true;
        }
        if let Some(k) = (1..=num_instances).find(|&k| !seen[k]) {
            return Err(Error::Domain(format!("instance {k} has no pixels")));
        }
        Ok(Self {
            height,
            width,
            num_instances,
            labels,
        })
    }

    /// Builds a labeling from arbitrary ids, renumbering the ids that occur to
    /// `1..=K` in order of first appearance (row-major). 0 stays background.
    pub fn from_ids_compacting(height: usize, width: usize, ids: &[u32]) -> Result<Self> {
        let mut remap = std::collections::HashMap::new();
        let mut labels = Vec::with_capacity(ids.len());
        for &id in ids {
            if id == 0 {
                labels.push(0);
                continue;
            }
            let next = remap.len() + 1;
            let l = *remap.entry(id).or_insert(next);
            labels.push(l as u16);
        }
        Self::new(height, width, remap.len(), labels)
    }

    pub fn background(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, 0, vec![0; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_instances(&self) -> usize {
        self.num_instances
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    #[inline]
    pub fn label(&self, pixel: usize) -> u16 {
        self.labels[pixel]
    }

    pub fn foreground_mask(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l > 0).collect()
    }

    pub fn foreground_pixels(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&p| self.labels[p] > 0).collect()
    }

    pub fn pixel_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_instances];
        for &l in &self.labels {
            if l > 0 {
                counts[l as usize - 1] += 1;
            }
        }
        counts
    }

    pub fn same_grid<T: Copy>(&self, field: &Field<T>) -> bool {
        self.height == field.height() && self.width == field.width()
    }
}

/// Centroid, mean bandwidth and size of every instance; index `k - 1` holds
/// instance `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceStats {
    pub centroids: Vec<[f64; 2]>,
    pub sigma_means: Vec<f64>,
    pub pixel_counts: Vec<usize>,
}

impl InstanceStats {
    pub fn num_instances(&self) -> usize {
        self.centroids.len()
    }
}

pub fn instance_stats<T: Float + Into<f64>>(
    embedding: &EmbeddingField<T>,
    sigma: &Field<T>,
    labeling: &InstanceLabeling,
) -> Result<InstanceStats> {
    let (h, w) = (labeling.height(), labeling.width());
    embedding.e.expect_shape(h, w, 2, "embedding")?;
    sigma.expect_shape(h, w, 1, "sigma")?;

    let k = labeling.num_instances();
    let mut sums = vec![[0.0f64; 2]; k];
    let mut sigma_sums = vec![0.0f64; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in labeling.labels().iter().enumerate() {
        if l == 0 {
            continue;
        }
        let s: f64 = sigma.at(p, 0).into();
        if !(s > 0.0) {
            return Err(Error::Domain(format!(
                "sigma must be > 0 on foreground, got {s} at pixel {p}"
            )));
        }
        let idx = l as usize - 1;
        let [ex, ey] = embedding.point(p);
        sums[idx][0] += ex.into();
        sums[idx][1] += ey.into();
        sigma_sums[idx] += s;
        counts[idx] += 1;
    }
    let centroids = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| [s[0] / n as f64, s[1] / n as f64])
        .collect();
    let sigma_means = sigma_sums.iter().zip(&counts).map(|(s, &n)| s / n as f64).collect();
    Ok(InstanceStats {
        centroids,
        sigma_means,
        pixel_counts: counts,
    })
}
