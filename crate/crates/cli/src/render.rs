//! Binary PPM (P6) rendering of labelings and embeddings.

use lanembed::{EmbeddingField, InstanceLabeling};

/// Instance colors; id `k` uses entry `(k - 1) % len`. Background is black.
pub const PALETTE: [[u8; 3]; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 190],
];

pub fn color(id: u16) -> [u8; 3] {
    if id == 0 {
        [0, 0, 0]
    } else {
        PALETTE[(id as usize - 1) % PALETTE.len()]
    }
}

/// RGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Image {
    pub fn black(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgb: vec![0; 3 * width * height],
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = 3 * (row * self.width + col);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    fn put(&mut self, row: usize, col: usize, c: [u8; 3]) {
        let i = 3 * (row * self.width + col);
        self.rgb[i..i + 3].copy_from_slice(&c);
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }
}

/// Each pixel colored by its instance id.
pub fn render_labels(labeling: &InstanceLabeling) -> Image {
    let w = labeling.width();
    let mut img = Image::black(w, labeling.height());
    for (p, &l) in labeling.labels().iter().enumerate() {
        img.put(p / w, p % w, color(l));
    }
    img
}

/// Foreground pixels scattered to the raster cell containing their embedding,
/// colored by `labeling`. Points outside the image are dropped; later pixels
/// in row-major order overwrite earlier ones.
pub fn render_embedding(embedding: &EmbeddingField<f64>, labeling: &InstanceLabeling) -> Image {
    let (h, w) = (labeling.height(), labeling.width());
    let mut img = Image::black(w, h);
    for (p, &l) in labeling.labels().iter().enumerate() {
        if l == 0 {
            continue;
        }
        let [x, y] = embedding.point(p);
        if x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64 {
            img.put(y as usize, x as usize, color(l));
        }
    }
    img
}
