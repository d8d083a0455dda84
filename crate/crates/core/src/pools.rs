//! Labeled/unlabeled partition of the target training set and the annotation oracle.

use std::collections::{BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{load_label, Domain, SampleRecord, Split};
use crate::error::{Error, IoContext, Result};
use crate::tensor::LabelMap;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolEvent {
    pub epoch: usize,
    pub sample_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolState {
    pub labeled: BTreeSet<String>,
    pub unlabeled: BTreeSet<String>,
    pub history: Vec<PoolEvent>,
}

/// Per-trigger audit record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSnapshot {
    pub epoch: usize,
    pub labeled: Vec<String>,
    pub unlabeled_count: usize,
}

/// Target-train ids of a manifest, in manifest order.
pub fn target_train_ids(records: &[SampleRecord]) -> Vec<String> {
    records
        .iter()
        .filter(|r| r.domain == Domain::Target && r.split == Split::Train)
        .map(|r| r.sample_id.clone())
        .collect()
}

/// `ceil(f * M)`, robust to representation error in `f`.
pub fn initial_count(init_fraction: f64, m: usize) -> usize {
    let x = init_fraction * m as f64;
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// Moves `ceil(init_fraction * M)` uniformly drawn ids to the labeled pool.
pub fn init_pool(ids: &[String], init_fraction: f64, seed: u64) -> Result<PoolState> {
    if !(0.0..=1.0).contains(&init_fraction) {
        return Err(Error::validation(format!("init_fraction {init_fraction} must lie in [0, 1]")));
    }
    let mut all: Vec<String> = ids.to_vec();
    all.sort();
    let before = all.len();
    all.dedup();
    if all.len() != before {
        return Err(Error::validation("duplicate target sample ids"));
    }
    let k = initial_count(init_fraction, all.len());
    let mut shuffled = all.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let labeled: BTreeSet<String> = shuffled[..k].iter().cloned().collect();
    let unlabeled = all.into_iter().filter(|id| !labeled.contains(id)).collect();
    Ok(PoolState {
        history: vec![PoolEvent { epoch: 0, sample_ids: labeled.iter().cloned().collect() }],
        labeled,
        unlabeled,
    })
}

impl PoolState {
    /// Moves `ids` from unlabeled to labeled; all-or-nothing.
    pub fn annotate(&mut self, epoch: usize, ids: &[String]) -> Result<()> {
        let mut seen = BTreeSet::new();
        for id in ids {
            if self.labeled.contains(id) || !seen.insert(id) {
                return Err(Error::contract(format!("sample `{id}` is already labeled")));
            }
            if !self.unlabeled.contains(id) {
                return Err(Error::contract(format!("sample `{id}` is not in the target pool")));
            }
        }
        if ids.is_empty() {
            return Ok(());
        }
        for id in ids {
            self.unlabeled.remove(id);
            self.labeled.insert(id.clone());
        }
        self.history.push(PoolEvent { epoch, sample_ids: ids.to_vec() });
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    /// Disjointness plus coverage of `universe`.
    pub fn check_partition(&self, universe: &[String]) -> Result<()> {
        if let Some(id) = self.labeled.intersection(&self.unlabeled).next() {
            return Err(Error::contract(format!("sample `{id}` is both labeled and unlabeled")));
        }
        let all: BTreeSet<&String> = universe.iter().collect();
        let covered: BTreeSet<&String> = self.labeled.iter().chain(&self.unlabeled).collect();
        if all != covered {
            return Err(Error::contract("pools do not cover exactly the target training set"));
        }
        Ok(())
    }

    pub fn snapshot(&self, epoch: usize) -> PoolSnapshot {
        PoolSnapshot {
            epoch,
            labeled: self.labeled.iter().cloned().collect(),
            unlabeled_count: self.unlabeled.len(),
        }
    }
}

pub fn snapshot_file_name(epoch: usize) -> String {
    format!("pool_epoch{epoch:03}.json")
}

/// Simulated annotator: the only reader of target-train ground truth.
pub struct LabelOracle {
    base: PathBuf,
    paths: HashMap<String, PathBuf>,
    log: Option<File>,
    accesses: Vec<String>,
}

impl LabelOracle {
    /// `base` is the directory the manifest paths are relative to.
    pub fn new(base: &Path, records: &[SampleRecord]) -> Self {
        let paths = records
            .iter()
            .filter(|r| r.domain == Domain::Target && r.split == Split::Train)
            .map(|r| (r.sample_id.clone(), r.label_path.clone()))
            .collect();
        LabelOracle {
            base: base.to_path_buf(),
            paths,
            log: None,
            accesses: Vec::new(),
        }
    }

    /// Appends one line per access to `path`.
    pub fn with_log(mut self, path: &Path) -> Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path).at(path)?;
        self.log = Some(f);
        Ok(self)
    }

    /// Reveals the ground truth of a labeled sample.
    pub fn label(&mut self, pool: &PoolState, epoch: usize, id: &str) -> Result<LabelMap> {
        if !pool.labeled.contains(id) {
            return Err(Error::contract(format!("oracle refused `{id}`: sample is not in the labeled pool")));
        }
        let rel = self
            .paths
            .get(id)
            .ok_or_else(|| Error::contract(format!("oracle has no label for `{id}`")))?;
        let label = load_label(&self.base.join(rel))?;
        self.accesses.push(id.to_string());
        if let Some(f) = &mut self.log {
            writeln!(f, "{epoch},{id}").map_err(|e| Error::io("oracle log", e))?;
        }
        Ok(label)
    }

    pub fn accesses(&self) -> &[String] {
        &self.accesses
    }
}
