//! Segmentation metrics and class-frequency statistics.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, IGNORE};
use crate::weighting::ClassIoUVector;

/// Ground-truth x prediction pixel counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    /// Row-major, `counts[gt * C + pred]`.
    pub counts: Vec<u64>,
    /// Labeled pixels whose prediction is not a valid class.
    pub missed: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
            missed: vec![0; num_classes],
        }
    }

    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.shape != gt.shape {
            return Err(Error::contract(format!(
                "prediction {:?} and ground truth {:?} differ in shape",
                pred.shape, gt.shape
            )));
        }
        let c = self.num_classes;
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if g == IGNORE {
                continue;
            }
            let g = g as usize;
            if g >= c {
                return Err(Error::contract(format!("ground-truth label {g} outside [0, {c})")));
            }
            if (p as usize) < c {
                self.counts[g * c + p as usize] += 1;
            } else {
                self.missed[g] += 1;
            }
        }
        Ok(())
    }

    pub fn accumulate_all(&mut self, pred: &[LabelMap], gt: &[LabelMap]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::contract(format!(
                "{} predictions for {} ground-truth maps",
                pred.len(),
                gt.len()
            )));
        }
        for (p, g) in pred.iter().zip(gt) {
            self.accumulate(p, g)?;
        }
        Ok(())
    }

    pub fn iou(&self) -> ClassIoUVector {
        let c = self.num_classes;
        let iou = (0..c)
            .map(|k| {
                let tp = self.counts[k * c + k];
                let gt_total: u64 = self.counts[k * c..(k + 1) * c].iter().sum::<u64>() + self.missed[k];
                let pred_total: u64 = (0..c).map(|g| self.counts[g * c + k]).sum();
                let denom = gt_total + pred_total - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect();
        ClassIoUVector { iou }
    }
}

/// Per-class IoU and their mean over defined classes.
pub fn miou(pred: &[LabelMap], gt: &[LabelMap], num_classes: usize) -> Result<(ClassIoUVector, f64)> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.accumulate_all(pred, gt)?;
    let iou = cm.iou();
    let defined: Vec<f64> = iou.defined().map(|(_, v)| v).collect();
    if defined.is_empty() {
        return Err(Error::validation("mIoU undefined: no class occurs in prediction or ground truth"));
    }
    let mean = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok((iou, mean))
}

/// Raw per-class pixel counts over non-IGNORE pixels.
pub fn class_counts(labels: &[LabelMap], num_classes: usize) -> Vec<u64> {
    let mut counts = vec![0u64; num_classes];
    for l in labels {
        for (c, n) in l.histogram(num_classes).into_iter().enumerate() {
            counts[c] += n;
        }
    }
    counts
}

/// `F_i = N_i / sum_j N_j` over non-IGNORE pixels.
pub fn class_frequency(labels: &[LabelMap], num_classes: usize) -> Result<Vec<f64>> {
    let counts = class_counts(labels, num_classes);
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::validation("class frequency undefined: no labeled pixels"));
    }
    Ok(counts.iter().map(|&n| n as f64 / total as f64).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrequencyRow {
    pub class_id: usize,
    pub selected: f64,
    pub pool: f64,
    /// `selected / pool`; `None` when the class never occurs in the pool.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrequencyReport {
    pub rows: Vec<FrequencyRow>,
}

impl FrequencyReport {
    /// Ratio of the summed frequency of `classes` in the selection vs. the pool.
    pub fn group_ratio(&self, classes: &[usize]) -> Option<f64> {
        let sel: f64 = classes.iter().map(|&c| self.rows[c].selected).sum();
        let pool: f64 = classes.iter().map(|&c| self.rows[c].pool).sum();
        (pool > 0.0).then(|| sel / pool)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class_id,selected_freq,pool_freq,ratio\n");
        for r in &self.rows {
            let ratio = r.ratio.map(|v| format!("{v:.17e}")).unwrap_or_else(|| "undef".into());
            out.push_str(&format!("{},{:.17e},{:.17e},{}\n", r.class_id, r.selected, r.pool, ratio));
        }
        out
    }
}

/// Class frequencies of a selected subset next to those of the whole pool.
pub fn selection_frequency_report(
    selected: &[LabelMap],
    pool: &[LabelMap],
    num_classes: usize,
) -> Result<FrequencyReport> {
    if selected.is_empty() || pool.is_empty() {
        return Err(Error::validation("frequency report needs non-empty selected and pool sets"));
    }
    let s = class_frequency(selected, num_classes)?;
    let p = class_frequency(pool, num_classes)?;
    let rows = (0..num_classes)
        .map(|c| FrequencyRow {
            class_id: c,
            selected: s[c],
            pool: p[c],
            ratio: (p[c] > 0.0).then(|| s[c] / p[c]),
        })
        .collect();
    Ok(FrequencyReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lm(h: usize, w: usize, v: Vec<u8>) -> LabelMap {
        LabelMap::from_data(Shape::new(h, w), v).unwrap()
    }

    #[test]
    fn perfect_and_mean() {
        let g = lm(2, 2, vec![0, 1, 1, 2]);
        let (_, m) = miou(&[g.clone()], &[g.clone()], 5).unwrap();
        assert_eq!(m, 1.0);
        // class 0: IoU 1/2 (tp=1, fn=1); class 1: IoU 1.0
        let gt = lm(1, 3, vec![0, 0, 1]);
        let pr = lm(1, 3, vec![0, 1, 1]);
        let (v, _) = miou(&[pr], &[gt], 2).unwrap();
        assert_eq!(v.iou, vec![Some(0.5), Some(0.5)]);
        let gt = lm(1, 3, vec![0, 0, 1]);
        let pr = lm(1, 3, vec![0, IGNORE, 1]);
        let (v, m) = miou(&[pr], &[gt], 2).unwrap();
        assert_eq!(v.iou, vec![Some(0.5), Some(1.0)]);
        assert_eq!(m, 0.75);
    }

    #[test]
    fn no_defined_class_is_error() {
        let g = lm(1, 2, vec![IGNORE, IGNORE]);
        assert!(miou(&[g.clone()], &[g], 3).is_err());
    }

    #[test]
    fn frequencies() {
        let f = class_frequency(&[lm(2, 2, vec![0; 4])], 3).unwrap();
        assert_eq!(f, vec![1.0, 0.0, 0.0]);
        let f = class_frequency(&[lm(2, 2, vec![0, 1, 1, 0])], 4).unwrap();
        assert_eq!(f, vec![0.5, 0.5, 0.0, 0.0]);
        assert!(class_frequency(&[lm(1, 1, vec![IGNORE])], 2).is_err());
    }

    #[test]
    fn frequencies_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let maps: Vec<_> = (0..3)
                .map(|_| lm(5, 7, (0..35).map(|_| rng.random_range(0..7u8)).collect()))
                .collect();
            let f = class_frequency(&maps, 7).unwrap();
            assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn report_ratios() {
        let pool = vec![lm(1, 4, vec![0, 0, 0, 1]), lm(1, 4, vec![0, 0, 0, 2])];
        let r = selection_frequency_report(&pool, &pool, 4).unwrap();
        assert!(r.rows[..3].iter().all(|row| row.ratio == Some(1.0)));
        assert_eq!(r.rows[3].ratio, None);
        let rare = selection_frequency_report(&pool[1..], &pool, 4).unwrap();
        assert!(rare.rows[2].ratio.unwrap() > 1.0);
        assert!(rare.group_ratio(&[2]).unwrap() > 1.0);
        assert!(selection_frequency_report(&[], &pool, 4).is_err());
    }

    #[test]
    fn miou_invariant_under_consistent_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let perm = [3u8, 0, 4, 1, 2];
        for _ in 0..30 {
            let gt: Vec<u8> = (0..64).map(|_| rng.random_range(0..5)).collect();
            let pr: Vec<u8> = (0..64).map(|_| rng.random_range(0..5)).collect();
            let (_, a) = miou(&[lm(8, 8, pr.clone())], &[lm(8, 8, gt.clone())], 5).unwrap();
            let map = |v: &[u8]| v.iter().map(|&x| perm[x as usize]).collect::<Vec<_>>();
            let (_, b) = miou(&[lm(8, 8, map(&pr))], &[lm(8, 8, map(&gt))], 5).unwrap();
            assert!((a - b).abs() < 1e-15);
        }
    }
}
