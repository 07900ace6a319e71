//! Minibatch training loop with resumable state.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{
    class_weights_from_labels, combine_losses, load_balance_term, sparsity_loss, total_loss,
    weighted_cross_entropy, LossConfig, LossParts,
};
use super::optim::{OptimizerConfig, OptimizerState};
use super::schedule::{sparsity_schedule, ScheduleConfig};
use crate::autodiff::Graph;
use crate::data::SeriesBatch;
use crate::enhancement::{augment, AugmentConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{collect_grads, ParamGroup};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub batch_size: usize,
    /// Stop after this many epochs without a validation macro-F1 gain.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub early_stopping_patience: Option<usize>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            batch_size: 32,
            early_stopping_patience: None,
        }
    }
}

/// Everything `fit` needs besides the model and the data.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub schedule: ScheduleConfig,
    pub optimizer: OptimizerConfig,
    pub train: TrainSettings,
    pub seed: u64,
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        self.augment.validate()?;
        self.loss.validate()?;
        self.schedule.validate()?;
        self.optimizer.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training report; field order is the serialized order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub keep_ratio: f64,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_moe: f64,
    pub loss_sparsity: f64,
    pub val_accuracy: Option<f64>,
    pub val_precision: Option<f64>,
    pub val_f1: Option<f64>,
    pub gate_fraction: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub stopped_early: bool,
}

impl TrainReport {
    /// One JSON object per epoch, newline terminated.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Format {
                    line: i + 1,
                    msg: e.to_string(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            records,
            stopped_early: false,
        })
    }
}

/// Seed plus position of a ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

impl RngState {
    fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        Self {
            seed,
            word_pos: rng.get_word_pos(),
        }
    }

    fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Serializable trainer state for exact resume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub config: FitConfig,
    pub class_weights: Vec<f64>,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Keep ratio to evaluate the model with.
    pub keep_ratio: f64,
    pub shuffle_rng: RngState,
    pub augment_rng: RngState,
    pub best_val_f1: Option<f64>,
    pub epochs_since_best: usize,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format {
            line: e.line(),
            msg: e.to_string(),
        })
    }
}

pub struct Trainer {
    pub model: Model,
    optimizer: OptimizerState,
    config: FitConfig,
    class_weights: Vec<f64>,
    epoch: usize,
    keep_ratio: f64,
    shuffle_seed: u64,
    shuffle_rng: ChaCha8Rng,
    augment_rng: ChaCha8Rng,
    best_val_f1: Option<f64>,
    epochs_since_best: usize,
}

impl Trainer {
    pub fn new(model: Model, train: &SeriesBatch, config: FitConfig) -> Result<Self> {
        config.validate()?;
        if train.num_classes != model.dims.classes {
            return Err(Error::Data(format!(
                "training data has {} classes, model expects {}",
                train.num_classes, model.dims.classes
            )));
        }
        if train.class_counts().iter().filter(|&&c| c > 0).count() < 2 {
            return Err(Error::Data("training data must contain at least 2 classes".into()));
        }
        let class_weights = match &config.loss.class_weights {
            Some(w) if w.len() != model.dims.classes => {
                return Err(Error::Config(format!(
                    "{} class weights for {} classes",
                    w.len(),
                    model.dims.classes
                )))
            }
            Some(w) => w.clone(),
            None => class_weights_from_labels(&train.labels, model.dims.classes)?,
        };
        let optimizer = OptimizerState::new(config.optimizer.clone(), &model.params);
        let shuffle_seed = config.seed.wrapping_add(1);
        Ok(Self {
            model,
            optimizer,
            class_weights,
            epoch: 0,
            keep_ratio: 1.0,
            shuffle_seed,
            shuffle_rng: ChaCha8Rng::seed_from_u64(shuffle_seed),
            augment_rng: ChaCha8Rng::seed_from_u64(config.augment.seed),
            best_val_f1: None,
            epochs_since_best: 0,
            config,
        })
    }

    pub fn from_checkpoint(c: Checkpoint) -> Result<Self> {
        c.config.validate()?;
        Ok(Self {
            shuffle_seed: c.shuffle_rng.seed,
            shuffle_rng: c.shuffle_rng.restore(),
            augment_rng: c.augment_rng.restore(),
            model: c.model,
            optimizer: c.optimizer,
            config: c.config,
            class_weights: c.class_weights,
            epoch: c.epoch,
            keep_ratio: c.keep_ratio,
            best_val_f1: c.best_val_f1,
            epochs_since_best: c.epochs_since_best,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            config: self.config.clone(),
            class_weights: self.class_weights.clone(),
            epoch: self.epoch,
            keep_ratio: self.keep_ratio,
            shuffle_rng: RngState::capture(self.shuffle_seed, &self.shuffle_rng),
            augment_rng: RngState::capture(self.config.augment.seed, &self.augment_rng),
            best_val_f1: self.best_val_f1,
            epochs_since_best: self.epochs_since_best,
        }
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn keep_ratio(&self) -> f64 {
        self.keep_ratio
    }

    pub fn class_weights(&self) -> &[f64] {
        &self.class_weights
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.schedule.total_epochs
    }

    /// Runs one epoch; returns the record and whether early stopping fired.
    pub fn run_epoch(&mut self, train: &SeriesBatch, val: Option<&SeriesBatch>) -> Result<(EpochRecord, bool)> {
        let epoch = self.epoch;
        let diverged = || Error::Diverged {
            epoch,
            last_good: epoch.checked_sub(1),
        };
        let r = sparsity_schedule(epoch, &self.config.schedule);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.shuffle_rng);

        let use_augment = self.model.config.ablation.data_enhancement && !self.config.augment.is_identity();
        let mut sums = LossParts::default();
        let mut experts = Vec::new();
        for idx in order.chunks(self.config.train.batch_size) {
            let mut batch = train.select(idx)?;
            if use_augment {
                batch = augment(&batch, &self.config.augment, &mut self.augment_rng)?;
            }
            let g = Graph::new();
            let vars = self.model.params.bind(&g, true);
            let out = self.model.forward(&g, &vars, g.constant(batch.x.clone()), r)?;
            let cls = weighted_cross_entropy(&g, out.logits, &batch.labels, &self.class_weights)?;
            // Terms with a zero weight are left out and reported as 0.
            let lc = &self.config.loss;
            let moe = match (&out.gate_probs, &out.gate_stats) {
                (Some(p), Some(s)) if lc.lambda_moe != 0.0 => Some(load_balance_term(&g, *p, s)?),
                _ => None,
            };
            let sp = match out.scores {
                Some(s) if lc.lambda_sparsity != 0.0 => Some(sparsity_loss(&g, s)?),
                _ => None,
            };
            let parts = LossParts {
                cls: g.value(cls).item(),
                moe: moe.map_or(0.0, |v| g.value(v).item()),
                sparsity: sp.map_or(0.0, |v| g.value(v).item()),
            };
            if total_loss(&parts, &self.config.loss).is_err() {
                return Err(diverged());
            }
            let loss = combine_losses(&g, cls, moe, sp, &self.config.loss)?;
            g.backward(loss)?;
            let grads = collect_grads(&g, &self.model.params, &vars);
            match self.optimizer.step(&mut self.model.params, &grads) {
                Err(Error::Training(_)) => return Err(diverged()),
                other => other?,
            }
            let w = idx.len() as f64;
            sums.cls += w * parts.cls;
            sums.moe += w * parts.moe;
            sums.sparsity += w * parts.sparsity;
            if let Some(s) = &out.gate_stats {
                experts.resize(s.token_fraction.len(), 0.0);
                experts.iter_mut().zip(&s.token_fraction).for_each(|(a, f)| *a += w * f);
            }
        }
        let n = train.len() as f64;
        let mean = LossParts {
            cls: sums.cls / n,
            moe: sums.moe / n,
            sparsity: sums.sparsity / n,
        };
        let total = total_loss(&mean, &self.config.loss).map_err(|_| diverged())?;
        let metrics = val.map(|v| self.model.evaluate(v, r)).transpose()?;

        self.epoch += 1;
        self.keep_ratio = r;
        let mut stop = false;
        if let (Some(m), Some(patience)) = (&metrics, self.config.train.early_stopping_patience) {
            if self.best_val_f1.is_none_or(|b| m.macro_f1 > b) {
                self.best_val_f1 = Some(m.macro_f1);
                self.epochs_since_best = 0;
            } else {
                self.epochs_since_best += 1;
                stop = self.epochs_since_best >= patience;
            }
        }
        let record = EpochRecord {
            epoch,
            keep_ratio: r,
            loss_total: total,
            loss_cls: mean.cls,
            loss_moe: mean.moe,
            loss_sparsity: mean.sparsity,
            val_accuracy: metrics.as_ref().map(|m| m.accuracy),
            val_precision: metrics.as_ref().map(|m| m.macro_precision),
            val_f1: metrics.as_ref().map(|m| m.macro_f1),
            gate_fraction: experts.iter().map(|v| v / n).collect(),
        };
        Ok((record, stop))
    }

    /// Runs the remaining epochs, calling `on_epoch` after each.
    pub fn run(
        &mut self,
        train: &SeriesBatch,
        val: Option<&SeriesBatch>,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<TrainReport> {
        let mut report = TrainReport::default();
        while !self.is_finished() {
            let (record, stop) = self.run_epoch(train, val)?;
            on_epoch(&record);
            report.records.push(record);
            if stop {
                report.stopped_early = true;
                break;
            }
        }
        Ok(report)
    }
}

/// Trains `model` for the configured number of epochs.
pub fn fit(
    model: Model,
    train: &SeriesBatch,
    val: Option<&SeriesBatch>,
    config: &FitConfig,
) -> Result<(Model, TrainReport)> {
    let mut t = Trainer::new(model, train, config.clone())?;
    let report = t.run(train, val, |_| {})?;
    Ok((t.model, report))
}
