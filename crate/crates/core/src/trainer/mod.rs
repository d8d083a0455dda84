//! The training loop: pool initialization, trigger-time acquisition and weight
//! refresh, and labeled plus weak-to-strong consistency steps.

mod batches;
mod config;
mod rundir;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use batches::{derive_rng, derive_seed, Batch, BatchAssembler, RngStream, Stream};
pub use config::{ExperimentConfig, Mode, Toggles};
pub use rundir::{
    latest_checkpoint, read_csv_rows, RunDir, BATCHES_FILE, CHECKPOINT_DIR, CONFIG_FILE, EVENTS_FILE, METRICS_FILE,
    ORACLE_LOG_FILE, POOL_DIR, SELECTION_LOG_FILE, SUMMARY_FILE, TRAIN_LOG_FILE, WEIGHTS_LOG_FILE,
};

use crate::acquire::{make_schedule, random_scores, rank, score_map, AcquisitionScore, BudgetSchedule, Strategy};
use crate::datagen::{load_image, load_label, load_manifest, Domain, SampleRecord, Split, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::losses::{make_pseudo_label, weighted_cross_entropy_grad, weighted_nll_parts, LossBundle};
use crate::metrics::miou;
use crate::model::{load_checkpoint, save_checkpoint, DecoderTrace, EncoderTrace, ParamSet, SegModel, Sgd};
use crate::nn::ChannelDropout;
use crate::perturb::{apply_strong, apply_weak, cutmix, CutBox};
use crate::pools::{init_pool, target_train_ids, LabelOracle, PoolState};
use crate::tensor::{Image, LabelMap, ProbabilityMap};
use crate::weighting::{frequency_weights, iou_weights, per_class_iou, ClassIoUVector, ClassWeightVector, WeightingScheme};

/// Images plus every label the trainer may read freely: source and target-val.
/// Target-train labels are only reachable through the [`LabelOracle`].
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
    pub images: HashMap<String, Image>,
    pub source_ids: Vec<String>,
    pub source_labels: HashMap<String, LabelMap>,
    pub target_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub val_labels: Vec<LabelMap>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let records = load_manifest(&dir.join(MANIFEST_FILE))?;
        let mut images = HashMap::new();
        let mut source_ids = Vec::new();
        let mut source_labels = HashMap::new();
        let mut val_ids = Vec::new();
        let mut val_labels = Vec::new();
        for r in &records {
            images.insert(r.sample_id.clone(), load_image(&dir.join(&r.image_path))?);
            match (r.domain, r.split) {
                (Domain::Source, _) => {
                    source_ids.push(r.sample_id.clone());
                    source_labels.insert(r.sample_id.clone(), load_label(&dir.join(&r.label_path))?);
                }
                (Domain::Target, Split::Val) => {
                    val_ids.push(r.sample_id.clone());
                    val_labels.push(load_label(&dir.join(&r.label_path))?);
                }
                (Domain::Target, Split::Train) => {}
            }
        }
        Ok(Dataset {
            root: dir.to_path_buf(),
            target_ids: target_train_ids(&records),
            records,
            images,
            source_ids,
            source_labels,
            val_ids,
            val_labels,
        })
    }
}

/// Trainer state persisted in checkpoint metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub epoch: usize,
    pub config_hash: String,
    pub pool: PoolState,
    pub weights: ClassWeightVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub seed: u64,
    pub epochs: usize,
    pub final_miou: f64,
    pub final_iou: ClassIoUVector,
    pub labeled_count: usize,
    pub target_count: usize,
    pub budget_fraction: f64,
    pub selections: Vec<(usize, Vec<String>)>,
    pub weights: ClassWeightVector,
}

/// Mean IoU of deterministic predictions.
pub fn evaluate(model: &SegModel<f32>, images: &[&Image], labels: &[LabelMap]) -> Result<(ClassIoUVector, f64)> {
    let preds = images
        .iter()
        .map(|im| model.predict(im).map(|p| p.argmax()))
        .collect::<Result<Vec<_>>>()?;
    miou(&preds, labels, model.config().num_classes)
}

/// Annotation total for a budget fraction of `m` target images.
pub fn budget_total(budget_fraction: f64, m: usize) -> usize {
    (budget_fraction * m as f64).round() as usize
}

struct Trainer<'a> {
    cfg: &'a ExperimentConfig,
    data: &'a Dataset,
    model: SegModel<f32>,
    opt: Sgd<f32>,
    weights: ClassWeightVector,
    pool: PoolState,
    oracle: LabelOracle,
    target_labels: HashMap<String, LabelMap>,
    schedule: Option<BudgetSchedule>,
    dir: RunDir,
}

struct Forward {
    enc: EncoderTrace<f32>,
    dec: DecoderTrace<f32>,
    masks: Option<Vec<ChannelDropout<f32>>>,
    prob: ProbabilityMap,
    target: LabelMap,
}

/// Means of each loss term over an epoch's steps.
#[derive(Debug, Default, Clone)]
struct EpochLosses {
    steps: usize,
    sums: [f64; 6],
}

impl<'a> Trainer<'a> {
    fn acquires(&self) -> bool {
        self.cfg.mode.uses_target_labels()
    }

    /// Forward pass of a batch, then backward with the batch-mean scale.
    fn backward_term(&self, items: Vec<Forward>, coef: f64, grads: &mut ParamSet<f32>) -> Result<f64> {
        let mut sum = 0.0;
        let mut count = 0;
        for it in &items {
            let (s, c) = weighted_nll_parts(&it.prob, &it.target, &self.weights)?;
            sum += s;
            count += c;
        }
        if count == 0 {
            return Ok(0.0);
        }
        let scale = coef / count as f64;
        for it in &items {
            let dl = weighted_cross_entropy_grad::<f32>(&it.prob, &it.target, &self.weights, scale);
            self.model.backward(&it.enc, &it.dec, it.masks.as_deref(), &dl, grads);
        }
        Ok(sum / count as f64)
    }

    fn forward(&self, image: &Image, target: LabelMap, masks: Option<Vec<ChannelDropout<f32>>>) -> Result<Forward> {
        let input = self.model.prepare_input(image)?;
        let enc = self.model.encode(&input);
        let dec = self.model.decode(&enc, masks.as_deref());
        let prob = self.model.probabilities(&dec.logits);
        Ok(Forward { enc, dec, masks, prob, target })
    }

    fn labeled_term<R: Rng>(
        &self,
        ids: &[String],
        labels: &HashMap<String, LabelMap>,
        rng: &mut R,
        grads: &mut ParamSet<f32>,
    ) -> Result<f64> {
        let mut items = Vec::with_capacity(ids.len());
        for id in ids {
            let (img, lab, _) = apply_weak(&self.data.images[id], Some(&labels[id]), &self.cfg.perturbation.weak, rng)?;
            items.push(self.forward(&img, lab.expect("label given"), None)?);
        }
        self.backward_term(items, 1.0, grads)
    }

    /// Feature-perturbed and two strong views against weak-view pseudo-labels.
    fn unlabeled_terms<R: Rng>(&self, ids: &[String], rng: &mut R, grads: &mut ParamSet<f32>) -> Result<[f64; 3]> {
        let spec = &self.cfg.perturbation;
        let lambda = self.cfg.lambda;
        let mut weak = Vec::with_capacity(ids.len());
        let mut pseudo = Vec::with_capacity(ids.len());
        let mut fp_items = Vec::with_capacity(ids.len());
        for id in ids {
            let (img, _, _) = apply_weak(&self.data.images[id], None, &spec.weak, rng)?;
            let input = self.model.prepare_input(&img)?;
            let enc = self.model.encode(&input);
            let clean = self.model.decode(&enc, None);
            let y_w = make_pseudo_label(&self.model.probabilities(&clean.logits), &self.cfg.pseudo_label);
            let masks = self.model.sample_feature_masks(rng);
            let dec = self.model.decode(&enc, Some(&masks));
            let prob = self.model.probabilities(&dec.logits);
            fp_items.push(Forward {
                enc,
                dec,
                masks: Some(masks),
                prob,
                target: y_w.clone(),
            });
            weak.push(img);
            pseudo.push(y_w);
        }
        let fp = self.backward_term(fp_items, lambda, grads)?;

        let mut strong_losses = [0.0; 2];
        for loss in &mut strong_losses {
            let views: Vec<Image> = weak.iter().map(|w| apply_strong(w, &spec.strong, rng)).collect();
            let b = views.len();
            let mut items = Vec::with_capacity(b);
            for i in 0..b {
                let j = (i + 1) % b;
                let (img, lab) = match CutBox::sample(views[i].shape, &spec.cutmix, rng) {
                    Some(cut) => {
                        let (img, lab, _) = cutmix(&views[i], &views[j], &pseudo[i], &pseudo[j], &cut)?;
                        (img, lab)
                    }
                    None => (views[i].clone(), pseudo[i].clone()),
                };
                items.push(self.forward(&img, lab, None)?);
            }
            *loss = self.backward_term(items, lambda, grads)?;
        }
        Ok([fp, strong_losses[0], strong_losses[1]])
    }

    fn train_epoch(&mut self, epoch: usize) -> Result<EpochLosses> {
        let cfg = self.cfg;
        let assembler = BatchAssembler::new(
            &self.pool,
            &self.data.source_ids,
            cfg.mode,
            cfg.toggles,
            cfg.batch_size,
            cfg.seed,
            epoch,
        );
        let mut rng = derive_rng(cfg.seed, RngStream::Augment, epoch);
        let mut losses = EpochLosses::default();
        let mut grads = ParamSet::zeros_like(self.model.config());
        for (step, batch) in assembler.enumerate() {
            if cfg.log_batches {
                self.dir.log_batch(epoch, step, &batch)?;
            }
            grads.fill_zero();
            let source = if batch.source.is_empty() {
                0.0
            } else {
                self.labeled_term(&batch.source, &self.data.source_labels, &mut rng, &mut grads)?
            };
            let target = if batch.labeled.is_empty() {
                0.0
            } else {
                self.labeled_term(&batch.labeled, &self.target_labels, &mut rng, &mut grads)?
            };
            let [fp, s1, s2] = if batch.unlabeled.is_empty() {
                [0.0; 3]
            } else {
                self.unlabeled_terms(&batch.unlabeled, &mut rng, &mut grads)?
            };
            let bundle = LossBundle {
                source_labeled: source,
                target_labeled: target,
                target_fp: fp,
                target_s1: s1,
                target_s2: s2,
                lambda: cfg.lambda,
            };
            let total = self.opt.train_step(&mut self.model, &grads, &bundle)?;
            losses.steps += 1;
            for (acc, v) in losses.sums.iter_mut().zip([total, source, target, fp, s1, s2]) {
                *acc += v;
            }
        }
        Ok(losses)
    }

    fn reveal(&mut self, epoch: usize, ids: &[String]) -> Result<()> {
        for id in ids {
            let label = self.oracle.label(&self.pool, epoch, id)?;
            self.target_labels.insert(id.clone(), label);
        }
        Ok(())
    }

    fn score_unlabeled(&self, epoch: usize, strategy: Strategy) -> Result<Vec<AcquisitionScore>> {
        let ids: Vec<String> = self.pool.unlabeled.iter().cloned().collect();
        if strategy == Strategy::Random {
            return Ok(random_scores(
                &ids,
                derive_seed(self.cfg.seed, RngStream::RandomAcquire, epoch),
            ));
        }
        ids.into_iter()
            .map(|id| {
                let p = self.model.predict(&self.data.images[&id])?;
                Ok(AcquisitionScore {
                    score: score_map(&p, strategy).expect("model-based strategy"),
                    sample_id: id,
                    strategy,
                    rank: 0,
                })
            })
            .collect()
    }

    /// Selection, annotation, pool snapshot; returns the selected ids.
    fn trigger(&mut self, epoch: usize, quota: usize) -> Result<Vec<String>> {
        let strategy = self.cfg.effective_strategy();
        let ranked = rank(self.score_unlabeled(epoch, strategy)?)?;
        if quota > ranked.len() {
            return Err(Error::contract(format!(
                "quota {quota} exceeds {} unlabeled samples",
                ranked.len()
            )));
        }
        let chosen = &ranked[..quota];
        let ids: Vec<String> = chosen.iter().map(|s| s.sample_id.clone()).collect();
        self.pool.annotate(epoch, &ids)?;
        self.pool.check_partition(&self.data.target_ids)?;
        self.reveal(epoch, &ids)?;
        self.dir.log_selection(epoch, chosen)?;
        self.dir.write_pool_snapshot(&self.pool.snapshot(epoch))?;
        self.dir.event(epoch, "selection")?;
        info!("epoch {epoch}: annotated {} samples ({strategy}), |D_t^l| = {}", ids.len(), self.pool.labeled.len());
        Ok(ids)
    }

    fn refresh_weights(&mut self, epoch: usize) -> Result<()> {
        let ids: Vec<&String> = self.pool.labeled.iter().collect();
        let labels: Vec<LabelMap> = ids.iter().map(|id| self.target_labels[*id].clone()).collect();
        let c = self.model.config().num_classes;
        let (iou, weights) = match self.cfg.weighting_scheme {
            WeightingScheme::Iou => {
                let preds = ids
                    .iter()
                    .map(|id| self.model.predict(&self.data.images[*id]).map(|p| p.argmax()))
                    .collect::<Result<Vec<_>>>()?;
                let iou = per_class_iou(&preds, &labels, c)?;
                let w = iou_weights(&iou, self.cfg.u)?;
                (Some(iou), w)
            }
            WeightingScheme::Frequency => (None, frequency_weights(&labels, c, self.cfg.u)?),
        };
        self.dir.log_weights(epoch, iou.as_ref(), &weights)?;
        self.dir.event(epoch, "weights_refresh")?;
        self.weights = weights;
        Ok(())
    }

    fn checkpoint(&self, epoch: usize, name: &str) -> Result<()> {
        let state = TrainerState {
            epoch,
            config_hash: self.cfg.hash(),
            pool: self.pool.clone(),
            weights: self.weights.clone(),
        };
        let meta = serde_json::to_value(&state).expect("state serializes");
        save_checkpoint(&self.dir.checkpoint_path(name), &self.model, &self.opt, meta)?;
        self.dir.event(epoch, "checkpoint")
    }
}

/// Executes a full run into `run_dir`, resuming from the latest checkpoint when
/// the directory holds an unfinished run with the same config.
pub fn run(cfg: &ExperimentConfig, run_dir: &Path, force: bool) -> Result<RunSummary> {
    cfg.validate()?;
    let data = Dataset::open(&cfg.dataset)?;
    run_with_dataset(cfg, &data, run_dir, force)
}

pub fn run_with_dataset(cfg: &ExperimentConfig, data: &Dataset, run_dir: &Path, force: bool) -> Result<RunSummary> {
    cfg.validate()?;
    check_dataset(cfg, data)?;
    let m = data.target_ids.len();
    let schedule = if cfg.mode.uses_target_labels() {
        let total = budget_total(cfg.budget_fraction, m);
        let init = crate::pools::initial_count(cfg.init_fraction, m);
        if init + total > m {
            return Err(Error::validation(format!(
                "initial pool {init} plus budget {total} exceeds the {m} target training images"
            )));
        }
        Some(make_schedule(cfg.epochs, &cfg.triggers, total)?)
    } else {
        None
    };

    let (dir, resume) = RunDir::prepare(run_dir, cfg, force)?;
    let oracle = LabelOracle::new(&data.root, &data.records).with_log(&dir.path(ORACLE_LOG_FILE))?;
    let c = cfg.model.num_classes;
    let mut trainer = Trainer {
        cfg,
        data,
        model: SegModel::new(cfg.model.clone(), derive_seed(cfg.seed, RngStream::ModelInit, 0))?,
        opt: Sgd::new(cfg.optimizer.clone(), &cfg.model),
        weights: ClassWeightVector::uniform(c),
        pool: PoolState {
            labeled: Default::default(),
            unlabeled: data.target_ids.iter().cloned().collect(),
            history: Vec::new(),
        },
        oracle,
        target_labels: HashMap::new(),
        schedule,
        dir,
    };

    let start = match resume {
        Some(ckpt_path) => {
            let ck = load_checkpoint::<f32>(&ckpt_path)?;
            let state: TrainerState = serde_json::from_value(ck.meta)
                .map_err(|e| Error::Parse { path: ckpt_path.clone(), line: None, msg: e.to_string() })?;
            if state.config_hash != cfg.hash() {
                return Err(Error::validation(format!(
                    "checkpoint {} was written by config {}, current config hashes to {}",
                    ckpt_path.display(),
                    state.config_hash,
                    cfg.hash()
                )));
            }
            trainer.model = ck.model;
            trainer.opt = ck.optimizer;
            trainer.pool = state.pool;
            trainer.weights = state.weights;
            trainer.dir.truncate_after(state.epoch)?;
            let ids: Vec<String> = trainer.pool.labeled.iter().cloned().collect();
            trainer.reveal(state.epoch, &ids)?;
            trainer.dir.event(state.epoch, "resume")?;
            info!("resuming {} after epoch {}", run_dir.display(), state.epoch);
            state.epoch + 1
        }
        None => {
            trainer.dir.event(0, "run_begin")?;
            if trainer.acquires() {
                trainer.pool = init_pool(&data.target_ids, cfg.init_fraction, derive_seed(cfg.seed, RngStream::PoolInit, 0))?;
                let ids: Vec<String> = trainer.pool.labeled.iter().cloned().collect();
                trainer.reveal(0, &ids)?;
            }
            trainer.pool.check_partition(&data.target_ids)?;
            trainer.dir.write_pool_snapshot(&trainer.pool.snapshot(0))?;
            trainer.dir.event(0, "pool_init")?;
            1
        }
    };

    let val_images: Vec<&Image> = data.val_ids.iter().map(|id| &data.images[id]).collect();
    let mut last = None;
    for epoch in start..=cfg.epochs {
        if let Some(quota) = trainer.schedule.as_ref().and_then(|s| s.quota_at(epoch)) {
            if trainer.acquires() {
                trainer.trigger(epoch, quota)?;
                if cfg.toggles.use_weighting {
                    trainer.refresh_weights(epoch)?;
                }
            }
        }
        trainer.dir.event(epoch, "train_begin")?;
        let losses = trainer.train_epoch(epoch)?;
        trainer.dir.log_train(epoch, losses.steps, trainer.opt.learning_rate(trainer.opt.iteration), &losses.sums)?;
        let (iou, mean) = evaluate(&trainer.model, &val_images, &data.val_labels)?;
        trainer.dir.log_metrics(epoch, "target_val", mean, &iou)?;
        trainer.dir.event(epoch, "eval")?;
        info!(
            "{} seed {} epoch {epoch}/{}: loss {:.4}, target-val mIoU {:.4}",
            cfg.mode,
            cfg.seed,
            cfg.epochs,
            losses.sums[0] / losses.steps.max(1) as f64,
            mean
        );
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            trainer.checkpoint(epoch, &format!("epoch_{epoch:03}.ckpt"))?;
        }
        last = Some((iou, mean));
    }
    trainer.checkpoint(cfg.epochs, "final.ckpt")?;
    let (final_iou, final_miou) = match last {
        Some(v) => v,
        None => evaluate(&trainer.model, &val_images, &data.val_labels)?,
    };
    let summary = RunSummary {
        mode: cfg.mode,
        seed: cfg.seed,
        epochs: cfg.epochs,
        final_miou,
        final_iou,
        labeled_count: trainer.pool.labeled.len(),
        target_count: m,
        budget_fraction: cfg.budget_fraction,
        selections: trainer
            .pool
            .history
            .iter()
            .filter(|e| e.epoch > 0)
            .map(|e| (e.epoch, e.sample_ids.clone()))
            .collect(),
        weights: trainer.weights.clone(),
    };
    trainer.dir.event(cfg.epochs, "run_end")?;
    trainer.dir.write_summary(&summary)?;
    Ok(summary)
}

fn check_dataset(cfg: &ExperimentConfig, data: &Dataset) -> Result<()> {
    let shape = cfg.model.input_shape();
    if let Some((id, img)) = data.images.iter().find(|(_, im)| im.shape != shape) {
        return Err(Error::validation(format!(
            "sample `{id}` is {}x{} but the model expects {}x{}",
            img.shape.height, img.shape.width, shape.height, shape.width
        )));
    }
    let c = cfg.model.num_classes;
    for l in data.source_labels.values().chain(&data.val_labels) {
        if let Some(&v) = l.data.iter().find(|&&v| v != crate::IGNORE && v as usize >= c) {
            return Err(Error::validation(format!("dataset label {v} exceeds model num_classes {c}")));
        }
    }
    if cfg.mode.uses_source() && data.source_ids.is_empty() {
        return Err(Error::validation(format!("mode {} needs source images", cfg.mode)));
    }
    if data.val_ids.is_empty() {
        return Err(Error::validation("dataset has no target validation images"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_counts() {
        assert_eq!(budget_total(0.25, 200), 50);
        assert_eq!(budget_total(0.125, 200), 25);
        assert_eq!(budget_total(0.05, 200), 10);
        assert_eq!(budget_total(0.0, 200), 0);
    }
}
