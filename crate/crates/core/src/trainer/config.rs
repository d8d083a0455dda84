use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acquire::Strategy;
use crate::error::{Error, Result};
use crate::losses::{LossBundle, PseudoLabelConfig};
use crate::model::{SegModelConfig, SgdConfig};
use crate::perturb::PerturbationSpec;
use crate::weighting::WeightingScheme;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Source labels only.
    SourceOnly,
    /// Target labeled pool only, grown at random.
    SupervisedTarget,
    /// Source plus target labeled pool.
    Joint,
    /// Source, target labeled and unlabeled consistency; random acquisition.
    SemiRandom,
    /// The full method; modules switched by the toggles.
    SsAda,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::SourceOnly,
        Mode::SupervisedTarget,
        Mode::Joint,
        Mode::SemiRandom,
        Mode::SsAda,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::SourceOnly => "source_only",
            Mode::SupervisedTarget => "supervised_target",
            Mode::Joint => "joint",
            Mode::SemiRandom => "semi_random",
            Mode::SsAda => "ss_ada",
        }
    }

    pub fn default_toggles(self) -> Toggles {
        match self {
            Mode::SourceOnly | Mode::SupervisedTarget | Mode::Joint => Toggles::none(),
            Mode::SemiRandom => Toggles {
                use_semi: true,
                use_active: false,
                use_weighting: false,
            },
            Mode::SsAda => Toggles::all(),
        }
    }

    pub fn uses_source(self) -> bool {
        self != Mode::SupervisedTarget
    }

    pub fn uses_target_labels(self) -> bool {
        self != Mode::SourceOnly
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub use_semi: bool,
    pub use_active: bool,
    pub use_weighting: bool,
}

impl Toggles {
    pub fn none() -> Self {
        Toggles {
            use_semi: false,
            use_active: false,
            use_weighting: false,
        }
    }

    pub fn all() -> Self {
        Toggles {
            use_semi: true,
            use_active: true,
            use_weighting: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// Directory holding `manifest.json`.
    pub dataset: PathBuf,
    pub model: SegModelConfig,
    pub optimizer: SgdConfig,
    pub pseudo_label: PseudoLabelConfig,
    pub perturbation: PerturbationSpec,
    pub strategy: Strategy,
    pub triggers: Vec<usize>,
    /// Fraction of the target training set annotated over all triggers.
    pub budget_fraction: f64,
    pub init_fraction: f64,
    pub u: f64,
    pub weighting_scheme: WeightingScheme,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub toggles: Toggles,
    /// Save a checkpoint every this many epochs (0 disables; the final one is always written).
    pub checkpoint_every: usize,
    /// Write every batch's sample ids to `batches.csv`.
    pub log_batches: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::for_mode(Mode::SsAda)
    }
}

impl ExperimentConfig {
    pub fn for_mode(mode: Mode) -> Self {
        let model = SegModelConfig::default();
        ExperimentConfig {
            mode,
            dataset: PathBuf::from("data"),
            perturbation: PerturbationSpec::for_shape(model.input_shape()),
            model,
            optimizer: SgdConfig::default(),
            pseudo_label: PseudoLabelConfig::default(),
            strategy: Strategy::Entropy,
            triggers: vec![20, 40, 60],
            budget_fraction: 0.25,
            init_fraction: 0.01,
            u: 2.0,
            weighting_scheme: WeightingScheme::Iou,
            lambda: LossBundle::DEFAULT_LAMBDA,
            epochs: 120,
            batch_size: 4,
            seed: 0,
            toggles: mode.default_toggles(),
            checkpoint_every: 10,
            log_batches: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.pseudo_label.validate()?;
        self.perturbation.validate(self.model.input_shape())?;
        if !(0.0..=1.0).contains(&self.budget_fraction) {
            return Err(Error::validation(format!(
                "budget_fraction {} must lie in [0, 1]",
                self.budget_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.init_fraction) {
            return Err(Error::validation(format!("init_fraction {} must lie in [0, 1]", self.init_fraction)));
        }
        if !(self.u.is_finite() && self.u >= 1.0) {
            return Err(Error::validation(format!("weight upper bound u = {} must be >= 1", self.u)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::validation("lambda must be finite and >= 0"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::validation("epochs and batch_size must be positive"));
        }
        crate::acquire::make_schedule(self.epochs, &self.triggers, 0)?;
        let t = self.toggles;
        let consistent = match self.mode {
            Mode::SourceOnly | Mode::SupervisedTarget | Mode::Joint => t == Toggles::none(),
            Mode::SemiRandom => t == Mode::SemiRandom.default_toggles(),
            Mode::SsAda => true,
        };
        if !consistent {
            return Err(Error::validation(format!(
                "toggles {{use_semi: {}, use_active: {}, use_weighting: {}}} are inconsistent with mode {}",
                t.use_semi, t.use_active, t.use_weighting, self.mode
            )));
        }
        Ok(())
    }

    /// Strategy actually used at triggers.
    pub fn effective_strategy(&self) -> Strategy {
        if self.mode == Mode::SsAda && self.toggles.use_active {
            self.strategy
        } else {
            Strategy::Random
        }
    }

    /// Canonical JSON used for hashing and `config.json`.
    pub fn canonical_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.canonical_json()).expect("value serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Human-readable list of fields that differ between two configs.
    pub fn diff(&self, other: &ExperimentConfig) -> Vec<String> {
        let mut out = Vec::new();
        diff_values("", &self.canonical_json(), &other.canonical_json(), &mut out);
        out
    }
}

fn diff_values(prefix: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match (x.get(k), y.get(k)) {
                    (Some(va), Some(vb)) => diff_values(&path, va, vb, out),
                    (va, vb) => out.push(format!("{path}: {} -> {}", show(va), show(vb))),
                }
            }
        }
        _ if a != b => out.push(format!("{prefix}: {a} -> {b}")),
        _ => {}
    }
}

fn show(v: Option<&serde_json::Value>) -> String {
    v.map(|v| v.to_string()).unwrap_or_else(|| "<absent>".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_for_every_mode() {
        for m in Mode::ALL {
            ExperimentConfig::for_mode(m).validate().unwrap();
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
    }

    #[test]
    fn toggle_consistency() {
        let mut c = ExperimentConfig::for_mode(Mode::SourceOnly);
        c.toggles.use_semi = true;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::for_mode(Mode::SsAda);
        c.toggles.use_weighting = false;
        c.validate().unwrap();
        assert_eq!(c.effective_strategy(), Strategy::Entropy);
        c.toggles.use_active = false;
        assert_eq!(c.effective_strategy(), Strategy::Random);
    }

    #[test]
    fn late_trigger_cites_first_half_rule() {
        let c = ExperimentConfig {
            epochs: 80,
            triggers: vec![20, 41],
            ..Default::default()
        };
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("first half"), "{msg}");
    }

    #[test]
    fn hash_and_diff() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 3;
        b.model.base_channels = 8;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.diff(&b), vec!["model.base_channels: 16 -> 8", "seed: 0 -> 3"]);
    }

    #[test]
    fn json_round_trip_and_unknown_fields() {
        let a = ExperimentConfig::for_mode(Mode::Joint);
        let s = serde_json::to_string(&a).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&s).unwrap(), a);
        let mut v = a.canonical_json();
        v["bogus"] = serde_json::json!(1);
        assert!(serde_json::from_value::<ExperimentConfig>(v).is_err());
    }
}
