//! Run-directory layout and append-only logs.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::batches::Batch;
use super::config::ExperimentConfig;
use super::RunSummary;
use crate::acquire::{selection_log_row, AcquisitionScore, SELECTION_LOG_HEADER};
use crate::error::{Error, IoContext, Result};
use crate::pools::{snapshot_file_name, PoolSnapshot};
use crate::weighting::{ClassIoUVector, ClassWeightVector};

pub const CONFIG_FILE: &str = "config.json";
pub const EVENTS_FILE: &str = "events.csv";
pub const SELECTION_LOG_FILE: &str = "selection_log.csv";
pub const WEIGHTS_LOG_FILE: &str = "weights_log.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const ORACLE_LOG_FILE: &str = "oracle_log.csv";
pub const BATCHES_FILE: &str = "batches.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const POOL_DIR: &str = "pools";

/// Logs whose first column is the epoch.
const EPOCH_LOGS: [&str; 7] = [
    EVENTS_FILE,
    SELECTION_LOG_FILE,
    WEIGHTS_LOG_FILE,
    METRICS_FILE,
    TRAIN_LOG_FILE,
    ORACLE_LOG_FILE,
    BATCHES_FILE,
];

#[derive(Debug, Serialize, Deserialize)]
struct StoredConfig {
    hash: String,
    config: ExperimentConfig,
}

pub struct RunDir {
    root: PathBuf,
}

/// `(epoch, path)` of the newest periodic checkpoint.
pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<(usize, PathBuf)>> {
    let dir = run_dir.join(CHECKPOINT_DIR);
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(&dir).at(&dir)? {
        let path = entry.at(&dir)?.path();
        let epoch = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("epoch_"))
            .and_then(|n| n.strip_suffix(".ckpt"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(e) = epoch {
            if best.as_ref().is_none_or(|(b, _)| e > *b) {
                best = Some((e, path));
            }
        }
    }
    Ok(best)
}

/// All data rows of a CSV file with a header line.
pub fn read_csv_rows(path: &Path) -> Result<Vec<Vec<String>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    reader
        .records()
        .map(|r| r.map(|r| r.iter().map(str::to_string).collect()).map_err(|e| csv_err(path, e)))
        .collect()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("{other:?}"),
        },
    }
}

fn is_non_empty_dir(p: &Path) -> Result<bool> {
    Ok(p.is_dir() && fs::read_dir(p).at(p)?.next().is_some())
}

impl RunDir {
    /// Creates a fresh run directory, or validates an existing one for resumption.
    /// Returns the checkpoint to resume from, if any.
    pub fn prepare(root: &Path, cfg: &ExperimentConfig, force: bool) -> Result<(RunDir, Option<PathBuf>)> {
        if is_non_empty_dir(root)? {
            if force {
                fs::remove_dir_all(root).at(root)?;
            } else {
                let cfg_path = root.join(CONFIG_FILE);
                if !cfg_path.is_file() {
                    return Err(Error::validation(format!(
                        "{} is not empty and is not a run directory; pass --force to overwrite",
                        root.display()
                    )));
                }
                let text = fs::read_to_string(&cfg_path).at(&cfg_path)?;
                let stored: StoredConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
                    path: cfg_path.clone(),
                    line: Some(e.line()),
                    msg: e.to_string(),
                })?;
                if stored.hash != cfg.hash() {
                    let diff = stored.config.diff(cfg);
                    return Err(Error::validation(format!(
                        "refusing to resume {}: config hash {} differs from stored {}; changed fields: {}",
                        root.display(),
                        cfg.hash(),
                        stored.hash,
                        if diff.is_empty() { "<none listed>".to_string() } else { diff.join("; ") }
                    )));
                }
                if root.join(SUMMARY_FILE).is_file() {
                    return Err(Error::validation(format!(
                        "run {} is already complete; pass --force to overwrite",
                        root.display()
                    )));
                }
                if let Some((_, ckpt)) = latest_checkpoint(root)? {
                    return Ok((RunDir { root: root.to_path_buf() }, Some(ckpt)));
                }
                fs::remove_dir_all(root).at(root)?;
            }
        }
        let dir = RunDir { root: root.to_path_buf() };
        dir.create(cfg)?;
        Ok((dir, None))
    }

    fn create(&self, cfg: &ExperimentConfig) -> Result<()> {
        for sub in [CHECKPOINT_DIR, POOL_DIR] {
            let p = self.root.join(sub);
            fs::create_dir_all(&p).at(&p)?;
        }
        let stored = StoredConfig {
            hash: cfg.hash(),
            config: cfg.clone(),
        };
        let p = self.path(CONFIG_FILE);
        fs::write(&p, serde_json::to_string_pretty(&stored).expect("config serializes") + "\n").at(&p)?;
        let c = cfg.model.num_classes;
        let per_class = |prefix: &str| (0..c).map(|i| format!(",{prefix}{i}")).collect::<String>();
        let headers = [
            (EVENTS_FILE, "epoch,event\n".to_string()),
            (SELECTION_LOG_FILE, SELECTION_LOG_HEADER.to_string()),
            (WEIGHTS_LOG_FILE, "epoch,class_id,iou,weight\n".to_string()),
            (METRICS_FILE, format!("epoch,split,miou{}\n", per_class("iou_"))),
            (
                TRAIN_LOG_FILE,
                "epoch,steps,lr,loss_total,loss_source,loss_target,loss_fp,loss_s1,loss_s2\n".to_string(),
            ),
            (ORACLE_LOG_FILE, "epoch,sample_id\n".to_string()),
        ];
        for (name, header) in headers {
            let p = self.path(name);
            fs::write(&p, header).at(&p)?;
        }
        if cfg.log_batches {
            let p = self.path(BATCHES_FILE);
            fs::write(&p, "epoch,step,stream,sample_ids\n").at(&p)?;
        }
        Ok(())
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.root.join(CHECKPOINT_DIR).join(name)
    }

    fn append(&self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        let mut f = OpenOptions::new().append(true).create(true).open(&p).at(&p)?;
        f.write_all(text.as_bytes()).at(&p)
    }

    pub fn event(&self, epoch: usize, name: &str) -> Result<()> {
        self.append(EVENTS_FILE, &format!("{epoch},{name}\n"))
    }

    pub fn log_batch(&self, epoch: usize, step: usize, batch: &Batch) -> Result<()> {
        let mut s = String::new();
        for (stream, ids) in [("source", &batch.source), ("labeled", &batch.labeled), ("unlabeled", &batch.unlabeled)] {
            if !ids.is_empty() {
                s.push_str(&format!("{epoch},{step},{stream},{}\n", ids.join(" ")));
            }
        }
        self.append(BATCHES_FILE, &s)
    }

    pub fn log_selection(&self, epoch: usize, chosen: &[AcquisitionScore]) -> Result<()> {
        let s: String = chosen.iter().map(|c| selection_log_row(epoch, c)).collect();
        self.append(SELECTION_LOG_FILE, &s)
    }

    pub fn write_pool_snapshot(&self, snap: &PoolSnapshot) -> Result<()> {
        let p = self.root.join(POOL_DIR).join(snapshot_file_name(snap.epoch));
        fs::write(&p, serde_json::to_string_pretty(snap).expect("snapshot serializes") + "\n").at(&p)
    }

    pub fn log_weights(&self, epoch: usize, iou: Option<&ClassIoUVector>, w: &ClassWeightVector) -> Result<()> {
        let mut s = String::new();
        for (c, weight) in w.weights.iter().enumerate() {
            let iou = iou
                .and_then(|v| v.iou[c])
                .map(|v| format!("{v:.8}"))
                .unwrap_or_else(|| "undef".into());
            s.push_str(&format!("{epoch},{c},{iou},{weight:.8}\n"));
        }
        self.append(WEIGHTS_LOG_FILE, &s)
    }

    pub fn log_train(&self, epoch: usize, steps: usize, lr: f64, sums: &[f64; 6]) -> Result<()> {
        let n = steps.max(1) as f64;
        let means: Vec<String> = sums.iter().map(|v| format!("{:.8}", v / n)).collect();
        self.append(TRAIN_LOG_FILE, &format!("{epoch},{steps},{lr:.8},{}\n", means.join(",")))
    }

    pub fn log_metrics(&self, epoch: usize, split: &str, miou: f64, iou: &ClassIoUVector) -> Result<()> {
        let per: String = iou
            .iou
            .iter()
            .map(|v| v.map(|v| format!(",{v:.8}")).unwrap_or_else(|| ",undef".into()))
            .collect();
        self.append(METRICS_FILE, &format!("{epoch},{split},{miou:.8}{per}\n"))
    }

    pub fn write_summary(&self, summary: &RunSummary) -> Result<()> {
        let p = self.path(SUMMARY_FILE);
        fs::write(&p, serde_json::to_string_pretty(summary).expect("summary serializes") + "\n").at(&p)
    }

    /// Drops log rows, snapshots and checkpoints written after `epoch`.
    pub fn truncate_after(&self, epoch: usize) -> Result<()> {
        for name in EPOCH_LOGS {
            let p = self.path(name);
            if !p.is_file() {
                continue;
            }
            let text = fs::read_to_string(&p).at(&p)?;
            let mut lines = text.lines();
            let mut kept = String::new();
            if let Some(h) = lines.next() {
                kept.push_str(h);
                kept.push('\n');
            }
            for line in lines {
                let e = line.split(',').next().and_then(|v| v.parse::<usize>().ok());
                if e.is_some_and(|e| e <= epoch) {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
            fs::write(&p, kept).at(&p)?;
        }
        for (sub, prefix, suffix) in [(POOL_DIR, "pool_epoch", ".json"), (CHECKPOINT_DIR, "epoch_", ".ckpt")] {
            let dir = self.root.join(sub);
            for entry in fs::read_dir(&dir).at(&dir)? {
                let path = entry.at(&dir)?.path();
                let e = path
                    .file_name()
                    .and_then(|n| n.to_str())
                    .and_then(|n| n.strip_prefix(prefix))
                    .and_then(|n| n.strip_suffix(suffix))
                    .and_then(|n| n.parse::<usize>().ok());
                if e.is_some_and(|e| e > epoch) {
                    fs::remove_file(&path).at(&path)?;
                }
            }
        }
        Ok(())
    }
}
