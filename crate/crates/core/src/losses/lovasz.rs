//! Lovász hinge: the Lovász extension of the Jaccard set loss applied to
//! hinge errors.

use crate::error::{Error, Result};

/// Hinge errors `max(0, 1 - s * (2y - 1))` would be the usual input; this
/// takes scores and binary labels directly.
pub fn lovasz_hinge(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores.len(), labels)?;
    let errors: Vec<f64> = scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| 1.0 - s * (2.0 * y as f64 - 1.0))
        .collect();
    let mut scratch = LovaszScratch::default();
    Ok(scratch.eval(&errors, labels, None))
}

pub(crate) fn check_inputs(n: usize, labels: &[u8]) -> Result<()> {
    if n == 0 {
        return Err(Error::Domain("lovasz hinge needs at least one element".into()));
    }
    if n != labels.len() {
        return Err(Error::Shape(format!("{n} scores but {} labels", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Domain(format!("labels must be 0 or 1, got {bad}")));
    }
    Ok(())
}

/// Reusable buffers for repeated Lovász evaluations over equally sized inputs.
#[derive(Debug, Default)]
pub(crate) struct LovaszScratch {
    order: Vec<usize>,
    weights: Vec<f64>,
}

impl LovaszScratch {
    /// Loss of hinge errors `errors` (pre-`relu`) against `labels`. When
    /// `grad` is given it receives d loss / d error for each element, with the
    /// sort permutation held fixed (ties resolved by index order).
    pub(crate) fn eval(&mut self, errors: &[f64], labels: &[u8], grad: Option<&mut [f64]>) -> f64 {
        let n = errors.len();
        self.order.clear();
        self.order.extend(0..n);
        // stable: equal errors keep ascending index order
        self.order
            .sort_by(|&a, &b| errors[b].partial_cmp(&errors[a]).unwrap_or(std::cmp::Ordering::Equal));

        let positives = labels.iter().filter(|&&y| y == 1).count() as f64;
        self.weights.clear();
        let (mut seen_pos, mut seen_neg) = (0.0f64, 0.0f64);
        let mut prev_jaccard = 0.0;
        for &i in &self.order {
            if labels[i] == 1 {
                seen_pos += 1.0;
            } else {
                seen_neg += 1.0;
            }
            let intersection = positives - seen_pos;
            let union = positives + seen_neg;
            let jaccard = 1.0 - intersection / union;
            self.weights.push(jaccard - prev_jaccard);
            prev_jaccard = jaccard;
        }

        let mut loss = 0.0;
        for (r, &i) in self.order.iter().enumerate() {
            loss += errors[i].max(0.0) * self.weights[r];
        }
        if let Some(g) = grad {
            for (r, &i) in self.order.iter().enumerate() {
                g[i] = if errors[i] > 0.0 { self.weights[r] } else { 0.0 };
            }
        }
        loss
    }
}
