//! Class-weighted cross-entropy, pseudo-labels and the combined training objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Real;
use crate::tensor::{LabelMap, ProbabilityMap, IGNORE};
use crate::weighting::ClassWeightVector;

/// Lower clamp applied to probabilities before taking the log.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelConfig {
    pub confidence_threshold: f64,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        PseudoLabelConfig {
            confidence_threshold: 0.0,
        }
    }
}

impl PseudoLabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::validation("confidence threshold must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// The five loss terms of one training step and the consistency weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub source_labeled: f64,
    pub target_labeled: f64,
    pub target_fp: f64,
    pub target_s1: f64,
    pub target_s2: f64,
    pub lambda: f64,
}

impl LossBundle {
    pub const DEFAULT_LAMBDA: f64 = 1.0 / 3.0;

    /// Bundle with only the supervised terms set.
    pub fn supervised(source_labeled: f64, target_labeled: f64) -> Self {
        LossBundle {
            source_labeled,
            target_labeled,
            target_fp: 0.0,
            target_s1: 0.0,
            target_s2: 0.0,
            lambda: Self::DEFAULT_LAMBDA,
        }
    }

    pub fn terms(&self) -> [(&'static str, f64); 6] {
        [
            ("source_labeled", self.source_labeled),
            ("target_labeled", self.target_labeled),
            ("target_fp", self.target_fp),
            ("target_s1", self.target_s1),
            ("target_s2", self.target_s2),
            ("lambda", self.lambda),
        ]
    }

    pub fn total(&self) -> f64 {
        total_loss(self)
    }
}

/// `L_s + L_t + lambda * (L_fp + L_s1 + L_s2)`.
pub fn total_loss(b: &LossBundle) -> f64 {
    b.source_labeled + b.target_labeled + b.lambda * (b.target_fp + b.target_s1 + b.target_s2)
}

fn check_pair(p: &ProbabilityMap, y: &LabelMap, w: &ClassWeightVector) -> Result<()> {
    if p.shape != y.shape {
        return Err(Error::contract(format!(
            "probability map {:?} and label map {:?} differ in shape",
            p.shape, y.shape
        )));
    }
    if w.weights.len() != p.num_classes {
        return Err(Error::contract(format!(
            "{} class weights for {} classes",
            w.weights.len(),
            p.num_classes
        )));
    }
    if let Some(&bad) = y.data.iter().find(|&&v| v != IGNORE && v as usize >= p.num_classes) {
        return Err(Error::contract(format!("label {bad} outside [0, {})", p.num_classes)));
    }
    Ok(())
}

/// Unnormalized weighted negative log-likelihood and the number of labeled pixels.
///
/// Batch losses are formed by summing both parts over the batch and dividing.
pub fn weighted_nll_parts(p: &ProbabilityMap, y: &LabelMap, w: &ClassWeightVector) -> Result<(f64, usize)> {
    check_pair(p, y, w)?;
    let n = p.shape.pixels();
    let mut sum = 0.0;
    let mut count = 0;
    for (i, &label) in y.data.iter().enumerate() {
        if label == IGNORE {
            continue;
        }
        let c = label as usize;
        sum -= w.weights[c] * p.data[c * n + i].max(LOG_EPS).ln();
        count += 1;
    }
    Ok((sum, count))
}

/// `-(1/N) sum_i w_{y_i} log p_i(y_i)` over the `N` non-IGNORE pixels; 0 if none.
pub fn weighted_cross_entropy(p: &ProbabilityMap, y: &LabelMap, w: &ClassWeightVector) -> Result<f64> {
    let (sum, count) = weighted_nll_parts(p, y, w)?;
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Gradient of `scale * sum_i w_{y_i} * -log softmax(z_i)[y_i]` w.r.t. the logits `z`.
///
/// Callers pass `scale = coefficient / N` to differentiate a mean. IGNORE pixels
/// receive exactly zero.
pub fn weighted_cross_entropy_grad<T: Real>(p: &ProbabilityMap, y: &LabelMap, w: &ClassWeightVector, scale: f64) -> Vec<T> {
    let n = p.shape.pixels();
    let c_count = p.num_classes;
    let mut g = vec![T::zero(); c_count * n];
    for (i, &label) in y.data.iter().enumerate() {
        if label == IGNORE {
            continue;
        }
        let yc = label as usize;
        let s = scale * w.weights[yc];
        for c in 0..c_count {
            let indicator = if c == yc { 1.0 } else { 0.0 };
            g[c * n + i] = T::from_f64(s * (p.data[c * n + i] - indicator));
        }
    }
    g
}

/// Argmax where the max probability strictly exceeds the threshold, IGNORE elsewhere.
pub fn make_pseudo_label(p: &ProbabilityMap, cfg: &PseudoLabelConfig) -> LabelMap {
    let data = (0..p.shape.pixels())
        .map(|i| {
            let (c, m) = p.max_at(i);
            if m > cfg.confidence_threshold {
                c as u8
            } else {
                IGNORE
            }
        })
        .collect();
    LabelMap { shape: p.shape, data }
}
