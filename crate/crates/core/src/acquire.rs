//! Image-level uncertainty scores, ranking and the annotation budget schedule.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ProbabilityMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Highest mean pixel entropy first.
    Entropy,
    /// Lowest mean max-probability first.
    Confidence,
    /// Seeded uniform draw.
    Random,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Entropy => "entropy",
            Strategy::Confidence => "confidence",
            Strategy::Random => "random",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entropy" => Ok(Strategy::Entropy),
            "confidence" => Ok(Strategy::Confidence),
            "random" => Ok(Strategy::Random),
            other => Err(Error::validation(format!("unknown acquisition strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionScore {
    pub sample_id: String,
    pub strategy: Strategy,
    pub score: f64,
    /// 1-based position in selection order.
    pub rank: usize,
}

/// Mean over pixels of `-sum_c p log p` (natural log, `0 log 0 = 0`).
pub fn entropy_score(p: &ProbabilityMap) -> f64 {
    let n = p.shape.pixels();
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        let mut h = 0.0;
        for c in 0..p.num_classes {
            let v = p.data[c * n + i];
            if v > 0.0 {
                h -= v * v.ln();
            }
        }
        total += h;
    }
    total / n as f64
}

/// Mean over pixels of the max class probability.
pub fn confidence_score(p: &ProbabilityMap) -> f64 {
    let n = p.shape.pixels();
    if n == 0 {
        return 1.0;
    }
    (0..n).map(|i| p.max_at(i).1).sum::<f64>() / n as f64
}

/// Score of one map under `strategy`; `None` for the random baseline.
pub fn score_map(p: &ProbabilityMap, strategy: Strategy) -> Option<f64> {
    match strategy {
        Strategy::Entropy => Some(entropy_score(p)),
        Strategy::Confidence => Some(confidence_score(p)),
        Strategy::Random => None,
    }
}

fn selection_order(a: &AcquisitionScore, b: &AcquisitionScore) -> Ordering {
    let by_score = match a.strategy {
        Strategy::Confidence => a.score.total_cmp(&b.score),
        Strategy::Entropy | Strategy::Random => b.score.total_cmp(&a.score),
    };
    by_score.then_with(|| a.sample_id.cmp(&b.sample_id))
}

/// Uniform random keys for the random baseline, drawn in ascending id order.
pub fn random_scores(ids: &[String], seed: u64) -> Vec<AcquisitionScore> {
    let mut sorted: Vec<&String> = ids.iter().collect();
    sorted.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted
        .into_iter()
        .map(|id| AcquisitionScore {
            sample_id: id.clone(),
            strategy: Strategy::Random,
            score: rng.random::<f64>(),
            rank: 0,
        })
        .collect()
}

/// Sorts into selection order and assigns ranks `1..=M`.
pub fn rank(mut scores: Vec<AcquisitionScore>) -> Result<Vec<AcquisitionScore>> {
    if let Some(first) = scores.first() {
        let s = first.strategy;
        if scores.iter().any(|x| x.strategy != s) {
            return Err(Error::contract("cannot rank scores from different strategies together"));
        }
    }
    scores.sort_by(selection_order);
    for (i, s) in scores.iter_mut().enumerate() {
        s.rank = i + 1;
    }
    Ok(scores)
}

/// The first `k` sample ids in selection order (ties by ascending id).
pub fn select(scores: &[AcquisitionScore], k: usize) -> Result<Vec<String>> {
    if k > scores.len() {
        return Err(Error::contract(format!(
            "cannot select {k} samples from {} candidates",
            scores.len()
        )));
    }
    let ranked = rank(scores.to_vec())?;
    Ok(ranked.into_iter().take(k).map(|s| s.sample_id).collect())
}

/// Trigger epochs and the annotation quota drawn at each.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetSchedule {
    pub trigger_epochs: Vec<usize>,
    pub per_trigger_quota: Vec<usize>,
    pub total: usize,
}

impl BudgetSchedule {
    pub fn quota_at(&self, epoch: usize) -> Option<usize> {
        self.trigger_epochs
            .iter()
            .position(|&e| e == epoch)
            .map(|i| self.per_trigger_quota[i])
    }
}

/// Splits `total` samples over the triggers as evenly as possible, remainder
/// going to the earliest triggers. Triggers must lie in `[1, total_epochs / 2]`.
pub fn make_schedule(total_epochs: usize, triggers: &[usize], total: usize) -> Result<BudgetSchedule> {
    if triggers.is_empty() {
        return Err(Error::validation("at least one trigger epoch is required"));
    }
    if triggers.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::validation(format!("trigger epochs {triggers:?} must be strictly increasing")));
    }
    if let Some(&t) = triggers.iter().find(|&&t| t == 0 || 2 * t > total_epochs) {
        return Err(Error::validation(format!(
            "trigger epoch {t} is outside the first half of training (1..={}); \
             active learning must be triggered within the first half of the {total_epochs} epochs",
            total_epochs / 2
        )));
    }
    let n = triggers.len();
    let base = total / n;
    let rem = total % n;
    let per_trigger_quota = (0..n).map(|i| base + usize::from(i < rem)).collect();
    Ok(BudgetSchedule {
        trigger_epochs: triggers.to_vec(),
        per_trigger_quota,
        total,
    })
}

/// One CSV row of the selection log.
pub fn selection_log_row(epoch: usize, s: &AcquisitionScore) -> String {
    format!("{},{},{},{:.16e},{}\n", epoch, s.sample_id, s.strategy, s.score, s.rank)
}

pub const SELECTION_LOG_HEADER: &str = "epoch,sample_id,strategy,score,rank\n";
