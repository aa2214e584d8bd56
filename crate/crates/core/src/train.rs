//! Mini-batch optimization of every trainable parameter, including the
//! adaptive branch weights, with seeded shuffling and checkpointing.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_dataset, TieMode};
use crate::losses::LossBreakdown;
use crate::model::{HydraVit, ModelConfig};
use crate::optim::{Adam, AdamConfig};
use crate::params::Parameters;

fn default_true() -> bool {
    true
}

fn default_every() -> usize {
    1
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Sum per-sample gradients in sample order regardless of thread count.
    #[serde(default = "default_true")]
    pub deterministic: bool,
    /// Global-norm gradient clip; off when absent.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Epoch cadence of `last.ckpt`; 0 disables periodic checkpoints.
    #[serde(default = "default_every")]
    pub checkpoint_every: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::standard()
    }
}

impl TrainConfig {
    /// Batch 35, learning rate 1e-4, 120 epochs.
    pub fn standard() -> Self {
        Self {
            batch_size: 35,
            learning_rate: 1e-4,
            epochs: 120,
            seed: 0,
            deterministic: true,
            grad_clip: None,
            checkpoint_every: 1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config(format!("grad_clip {c} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One row of the per-epoch metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub bce_mean: f64,
    pub mlce: f64,
    pub consistency: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub w_min: f64,
    pub w_max: f64,
    pub val_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: HydraVit,
    pub optimizer: Adam<HydraVit>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub history: Vec<EpochMetrics>,
    pub best_val_auc: Option<f64>,
}

impl TrainState {
    pub fn new(config: TrainConfig, model: HydraVit) -> Result<Self> {
        config.validate()?;
        let optimizer = Adam::new(config.adam(), &model);
        Ok(Self {
            config,
            model,
            optimizer,
            epoch: 0,
            step: 0,
            history: Vec::new(),
            best_val_auc: None,
        })
    }

    /// Fresh state whose model is initialized from `config.seed` and the
    /// class ratios of `train`.
    pub fn initialize(model_config: &ModelConfig, config: TrainConfig, train: &Dataset) -> Result<Self> {
        if train.classes() != model_config.classes {
            return Err(Error::Config(format!(
                "dataset has {} classes, model expects {}",
                train.classes(),
                model_config.classes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = HydraVit::new(model_config, &train.class_counts(), train.len(), &mut rng)?;
        Self::new(config, model)
    }
}

/// Sample visiting order of `epoch`; a pure function of seed and epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn sample_grad(model: &HydraVit, s: &Sample) -> Result<(LossBreakdown, HydraVit)> {
    let (loss, grad) = model.loss_and_grad(&s.image, &s.labels.to_f64())?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss of sample {}", s.id)));
    }
    if let Some(name) = grad.first_non_finite() {
        return Err(Error::NonFinite(format!("gradient {name} of sample {}", s.id)));
    }
    Ok((loss, grad))
}

/// Mean loss and mean gradient over a batch.
pub fn batch_gradient(model: &HydraVit, batch: &[&Sample], deterministic: bool) -> Result<(LossBreakdown, HydraVit)> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let mut losses = Vec::with_capacity(batch.len());
    let mut total = model.zeros_like();
    if deterministic {
        let width = rayon::current_num_threads().max(1);
        for chunk in batch.chunks(width) {
            let parts: Vec<_> = chunk.par_iter().map(|s| sample_grad(model, s)).collect::<Result<_>>()?;
            for (loss, grad) in parts {
                losses.push(loss);
                total.add_assign(&grad);
            }
        }
    } else {
        let (l, g) = batch
            .par_iter()
            .map(|s| sample_grad(model, s).map(|(l, g)| (vec![l], g)))
            .try_reduce(
                || (Vec::new(), model.zeros_like()),
                |(mut la, mut ga), (lb, gb)| {
                    la.extend(lb);
                    ga.add_assign(&gb);
                    Ok((la, ga))
                },
            )?;
        losses = l;
        total = g;
    }
    total.scale(1.0 / batch.len() as f64);
    Ok((LossBreakdown::mean(&losses), total))
}

/// One optimizer update on `batch`; returns the loss before the update.
pub fn train_step(state: &mut TrainState, batch: &[&Sample]) -> Result<LossBreakdown> {
    let (loss, mut grad) = batch_gradient(&state.model, batch, state.config.deterministic)?;
    if let Some(clip) = state.config.grad_clip {
        let norm = grad.squared_norm().sqrt();
        if norm > clip {
            grad.scale(clip / norm);
        }
    }
    let mut next = state.model.clone();
    let mut optimizer = state.optimizer.clone();
    optimizer.step(&mut next, &grad);
    if let Some(name) = next.first_non_finite() {
        return Err(Error::NonFinite(format!(
            "parameter {name} after step {}",
            state.step + 1
        )));
    }
    state.model = next;
    state.optimizer = optimizer;
    state.step += 1;
    let w = &state.model.weights;
    if w.w.iter().any(|&v| v <= 0.0) || w.w_aggregate <= 0.0 {
        log::warn!("step {}: a branch weight became nonpositive", state.step);
    }
    Ok(loss)
}

/// Where `train` writes its artifacts; both are optional.
#[derive(Clone, Debug, Default)]
pub struct TrainArtifacts {
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics_csv: Option<PathBuf>,
}

pub fn write_metrics(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record([
            "epoch",
            "bce_mean",
            "mlce",
            "consistency",
            "total",
            "alpha",
            "beta",
            "w_min",
            "w_max",
            "val_auc",
        ])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the remaining epochs of `state` (resuming after `state.epoch`) and
/// returns the metrics of the epochs run by this call.
pub fn train(
    state: &mut TrainState,
    train_set: &Dataset,
    validation: Option<&Dataset>,
    artifacts: &TrainArtifacts,
) -> Result<Vec<EpochMetrics>> {
    state.config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    if train_set.classes() != state.model.config.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model expects {}",
            train_set.classes(),
            state.model.config.classes
        )));
    }
    let mut produced = Vec::new();
    while state.epoch < state.config.epochs {
        let epoch = state.epoch;
        let order = epoch_order(state.config.seed, epoch, train_set.len());
        let mut sums = LossBreakdown::default();
        for chunk in order.chunks(state.config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set.samples[i]).collect();
            let loss = train_step(state, &batch)?;
            let n = batch.len() as f64;
            sums.bce_mean += loss.bce_mean * n;
            sums.mlce += loss.mlce * n;
            sums.consistency += loss.consistency * n;
            sums.total += loss.total * n;
        }
        let n = train_set.len() as f64;
        let val_auc = match validation {
            Some(v) => match evaluate_dataset(&state.model, v, TieMode::Literal) {
                Ok(r) => Some(r.macro_mean),
                Err(Error::Report(msg)) => {
                    log::warn!("validation AUC unavailable: {msg}");
                    None
                }
                Err(e) => return Err(e),
            },
            None => None,
        };
        let w = &state.model.weights;
        let metrics = EpochMetrics {
            epoch: epoch + 1,
            bce_mean: sums.bce_mean / n,
            mlce: sums.mlce / n,
            consistency: sums.consistency / n,
            total: sums.total / n,
            alpha: w.alpha,
            beta: w.beta,
            w_min: w.w.iter().cloned().fold(f64::INFINITY, f64::min),
            w_max: w.w.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            val_auc,
        };
        log::info!(
            "epoch {} total {:.6} bce {:.6} mlce {:.6} cl {:.6} alpha {:.4} beta {:.4}",
            metrics.epoch,
            metrics.total,
            metrics.bce_mean,
            metrics.mlce,
            metrics.consistency,
            metrics.alpha,
            metrics.beta
        );
        state.epoch += 1;
        state.history.push(metrics.clone());
        produced.push(metrics);
        if let Some(path) = &artifacts.metrics_csv {
            write_metrics(path, &state.history)?;
        }
        let improved = match (val_auc, state.best_val_auc) {
            (Some(v), Some(best)) => v > best,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            state.best_val_auc = val_auc;
        }
        if let Some(dir) = &artifacts.checkpoint_dir {
            let every = state.config.checkpoint_every;
            if every > 0 && state.epoch.is_multiple_of(every) {
                save_checkpoint(&dir.join("last.ckpt"), state)?;
            }
            if improved {
                save_checkpoint(&dir.join("best.ckpt"), state)?;
            }
        }
    }
    if let Some(path) = &artifacts.metrics_csv {
        if produced.is_empty() {
            write_metrics(path, &state.history)?;
        }
    }
    if let Some(dir) = &artifacts.checkpoint_dir {
        save_checkpoint(&dir.join("final.ckpt"), state)?;
    }
    Ok(produced)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_defaults() {
        let c = TrainConfig::standard();
        assert_eq!((c.batch_size, c.learning_rate, c.epochs), (35, 1e-4, 120));
        let text = serde_json::to_string(&c).unwrap();
        let back: TrainConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(7, 3, 50);
        assert_eq!(a, epoch_order(7, 3, 50));
        assert_ne!(a, epoch_order(7, 4, 50));
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = TrainConfig::standard();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::standard();
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
    }
}
