//! Per-class IoU on the labeled target pool and the loss weights derived from it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{class_frequency, ConfusionMatrix};
use crate::tensor::LabelMap;

/// Per-class loss weights, each in `[1, upper_bound]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeightVector {
    pub weights: Vec<f64>,
    pub upper_bound: f64,
}

impl ClassWeightVector {
    pub fn new(weights: Vec<f64>, upper_bound: f64) -> Result<Self> {
        check_upper_bound(upper_bound)?;
        if let Some(w) = weights
            .iter()
            .find(|w| !(w.is_finite() && **w >= 1.0 && **w <= upper_bound))
        {
            return Err(Error::validation(format!("class weight {w} outside [1, {upper_bound}]")));
        }
        Ok(ClassWeightVector { weights, upper_bound })
    }

    /// All-ones weights, i.e. the plain cross-entropy.
    pub fn uniform(num_classes: usize) -> Self {
        ClassWeightVector {
            weights: vec![1.0; num_classes],
            upper_bound: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Per-class IoU; `None` where the class is absent from both prediction and ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIoUVector {
    pub iou: Vec<Option<f64>>,
}

impl ClassIoUVector {
    pub fn defined(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.iou.iter().enumerate().filter_map(|(i, v)| v.map(|v| (i, v)))
    }
}

fn check_upper_bound(u: f64) -> Result<()> {
    if !(u.is_finite() && u >= 1.0) {
        return Err(Error::validation(format!("weight upper bound u = {u} must be >= 1")));
    }
    Ok(())
}

/// Which rule turns labeled-pool statistics into class weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingScheme {
    Iou,
    Frequency,
}

/// `TP / (TP + FP + FN)` per class over all pairs, IGNORE ground truth excluded.
pub fn per_class_iou(pred: &[LabelMap], gt: &[LabelMap], num_classes: usize) -> Result<ClassIoUVector> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.accumulate_all(pred, gt)?;
    Ok(cm.iou())
}

/// `w_i = (1 - IoU_i)(u - 1) + 1`; undefined classes get `u`.
pub fn iou_weights(iou: &ClassIoUVector, u: f64) -> Result<ClassWeightVector> {
    check_upper_bound(u)?;
    let weights = iou
        .iou
        .iter()
        .map(|v| match v {
            Some(v) => ((1.0 - v.clamp(0.0, 1.0)) * (u - 1.0) + 1.0).clamp(1.0, u),
            None => u,
        })
        .collect();
    Ok(ClassWeightVector { weights, upper_bound: u })
}

/// Frequency baseline: `w_i = 1 + (u - 1)(1 - F_i / max_j F_j)`.
pub fn frequency_weights(labels: &[LabelMap], num_classes: usize, u: f64) -> Result<ClassWeightVector> {
    check_upper_bound(u)?;
    let freq = class_frequency(labels, num_classes)?;
    let max = freq.iter().cloned().fold(0.0, f64::max);
    let weights = freq
        .iter()
        .map(|&f| {
            if f == 0.0 {
                u
            } else {
                (1.0 + (u - 1.0) * (1.0 - f / max)).clamp(1.0, u)
            }
        })
        .collect();
    Ok(ClassWeightVector { weights, upper_bound: u })
}
