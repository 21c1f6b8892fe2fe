//! Adversarial training loop with validation, checkpoints and a metrics log.

mod checkpoint;
mod optim;
mod step;

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{config_hash, Checkpoint, CheckpointMeta, FORMAT_VERSION};
pub use optim::{clip_global_norm, global_norm, Adam};
pub use step::{train_step, Optimizers, StepLosses, TrainConfig};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{image_scores, roc_auc, score_dataset, Aggregation};
use crate::model::{Model, ModelConfig};

/// One row of the metrics log: epoch means of the step losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_adv: f64,
    pub l_con: f64,
    pub l_lat: f64,
    pub total: f64,
    pub d_loss: f64,
    pub val_auc: Option<f64>,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

pub struct TrainRun<'a> {
    pub model: &'a ModelConfig,
    pub config: &'a TrainConfig,
    pub seed: u64,
    /// Blend used for validation scores.
    pub eta: f64,
    pub aggregation: Aggregation,
    pub train_data: &'a Dataset,
    pub validation: Option<&'a Dataset>,
    pub out_dir: &'a Path,
    pub resume: Option<Checkpoint>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochMetrics>,
    pub best: Option<(usize, f64)>,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

/// Shuffled sample order for `epoch`, fixed by the run seed.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Image-level AUC of `model` on `data`, or `None` when it lacks a label.
pub fn validation_auc(model: &Model, data: &Dataset, eta: f64, how: Aggregation, batch_size: usize) -> Result<Option<f64>> {
    let pairs = score_dataset(model, data, batch_size)?;
    let scores = image_scores(data, &pairs, eta, how);
    match roc_auc(&scores.raw, &scores.labels) {
        Ok(roc) => Ok(Some(roc.auc)),
        Err(Error::UndefinedMetric(msg)) => {
            log::warn!("validation AUC undefined: {msg}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

fn append_metrics(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let exists = path.exists();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Runs epochs until `max_epochs`, saving `last.ckpt` after every epoch and
/// `best.ckpt` whenever validation AUC improves. A non-finite loss aborts the
/// epoch and leaves the previous checkpoints in place.
pub fn train(run: TrainRun<'_>) -> Result<TrainOutcome> {
    run.model.validate()?;
    run.config.validate()?;
    if run.train_data.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    if let Some(r) = run.train_data.manifest().records.iter().find(|r| r.label.is_anomalous()) {
        return Err(Error::Dataset(format!(
            "training data contains anomalous record {}",
            r.path.display()
        )));
    }
    let hash = config_hash(run.model, run.config, run.seed);
    let (mut model, mut optim, mut meta) = match run.resume {
        Some(ckpt) => {
            if ckpt.meta.config_hash != hash {
                return Err(Error::Checkpoint(format!(
                    "config hash mismatch: checkpoint {}, run {hash}",
                    ckpt.meta.config_hash
                )));
            }
            let mut meta = ckpt.meta;
            meta.train.max_epochs = run.config.max_epochs;
            (ckpt.model, ckpt.optimizers, meta)
        }
        None => {
            let model = Model::build(run.model, run.seed)?;
            let optim = Optimizers::new(&model, run.config);
            let meta = CheckpointMeta {
                version: FORMAT_VERSION,
                epoch: 0,
                config_hash: hash,
                seed: run.seed,
                model: run.model.clone(),
                train: run.config.clone(),
                history: Vec::new(),
                best: None,
            };
            (model, optim, meta)
        }
    };
    fs::create_dir_all(run.out_dir).map_err(|e| Error::io(run.out_dir, e))?;
    let metrics_path = run.out_dir.join(METRICS_FILE);
    let last_path = run.out_dir.join(LAST_CHECKPOINT);
    let best_path = run.out_dir.join(BEST_CHECKPOINT);
    if !metrics_path.exists() && !meta.history.is_empty() {
        append_metrics(&metrics_path, &meta.history)?;
    }

    let cfg = run.config;
    let n = run.train_data.len();
    for epoch in meta.epoch + 1..=cfg.max_epochs {
        let mut rng = epoch_rng(run.seed, epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut sums = [0.0; 5];
        let steps = order.len().div_ceil(cfg.batch_size);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = run
                .train_data
                .load_batch(chunk, cfg.augment.then_some(&mut rng))?;
            let losses = train_step(&mut model, &mut optim, &batch, cfg).map_err(|e| match e {
                Error::NonFinite { location } => {
                    log::error!("epoch {epoch} step {step}: {location}; keeping the previous checkpoint");
                    Error::NonFinite {
                        location: format!("epoch {epoch}, step {step}: {location}"),
                    }
                }
                other => other,
            })?;
            let b = losses.generator;
            for (s, v) in sums.iter_mut().zip([b.l_adv, b.l_con, b.l_lat, b.total, losses.d_loss]) {
                *s += v;
            }
        }
        let mean = |k: usize| sums[k] / steps as f64;
        let val_auc = match run.validation {
            Some(v) => validation_auc(&model, v, run.eta, run.aggregation, cfg.batch_size)?,
            None => None,
        };
        let row = EpochMetrics {
            epoch,
            l_adv: mean(0),
            l_con: mean(1),
            l_lat: mean(2),
            total: mean(3),
            d_loss: mean(4),
            val_auc,
        };
        log::info!(
            "epoch {epoch}/{}: l_adv {:.4} l_con {:.4} l_lat {:.4} total {:.4} d_loss {:.4} val_auc {}",
            cfg.max_epochs,
            row.l_adv,
            row.l_con,
            row.l_lat,
            row.total,
            row.d_loss,
            val_auc.map_or("n/a".to_string(), |a| format!("{a:.4}"))
        );
        append_metrics(&metrics_path, std::slice::from_ref(&row))?;
        meta.history.push(row);
        meta.epoch = epoch;
        let improved = match (val_auc, meta.best) {
            (Some(a), Some((_, b))) => a > b,
            (Some(_), None) => true,
            (None, _) => run.validation.is_none(),
        };
        if improved {
            meta.best = val_auc.map(|a| (epoch, a));
        }
        let ckpt = Checkpoint {
            meta: meta.clone(),
            model: model.clone(),
            optimizers: optim.clone(),
        };
        ckpt.save(&last_path)?;
        if improved || !best_path.exists() {
            ckpt.save(&best_path)?;
        }
    }
    Ok(TrainOutcome {
        model,
        history: meta.history,
        best: meta.best,
        last_checkpoint: last_path,
        best_checkpoint: best_path,
    })
}
