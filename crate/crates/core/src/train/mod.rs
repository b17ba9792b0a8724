//! SGD training with a step learning-rate schedule, evaluation and cost accounting.

mod cost;
mod eval;

pub use cost::{cost_report, count_flops, count_params, BranchCost, CostReport};
pub use eval::{evaluate, predict, ConfusionMatrix, Evaluation, Output};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::blocks::{apply_stat_updates, ForwardCtx, Mode};
use crate::branch::EnsembleModel;
use crate::data::Dataset;
use crate::distill::{total_loss, LossValues, LossWeights};
use crate::error::{Error, Result};
use crate::tensor::{argmax, rng_from_seed, sgd_step, Rng, SgdState, Tape};

/// Distillation weights before the branch count is known. Missing `alpha` means 1 per branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSettings {
    #[serde(default)]
    pub alpha: Option<Vec<f32>>,
    #[serde(default = "one")]
    pub beta: f32,
    #[serde(default = "one")]
    pub lambda: f32,
    #[serde(default = "yes")]
    pub detach_teacher: bool,
}

fn one() -> f32 {
    1.0
}

fn yes() -> bool {
    true
}

impl Default for LossSettings {
    fn default() -> Self {
        LossSettings {
            alpha: None,
            beta: 1.0,
            lambda: 1.0,
            detach_teacher: true,
        }
    }
}

impl LossSettings {
    pub fn resolve(&self, num_branches: usize) -> Result<LossWeights> {
        let w = LossWeights {
            alpha: self.alpha.clone().unwrap_or_else(|| vec![1.0; num_branches]),
            beta: self.beta,
            lambda: self.lambda,
            detach_teacher: self.detach_teacher,
        };
        w.validate(num_branches)?;
        Ok(w)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub base_lr: f32,
    #[serde(default)]
    pub lr_drop_epochs: Vec<usize>,
    #[serde(default = "default_drop")]
    pub lr_drop_factor: f32,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    #[serde(default)]
    pub weight_decay: f32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub loss: LossSettings,
    /// Random flip and pad-and-crop; 0 disables augmentation.
    #[serde(default)]
    pub augment_pad: usize,
    #[serde(default = "default_batch")]
    pub eval_batch_size: usize,
}

fn default_batch() -> usize {
    128
}

fn default_lr() -> f32 {
    0.1
}

fn default_drop() -> f32 {
    0.1
}

fn default_momentum() -> f32 {
    0.9
}

impl TrainConfig {
    /// Defaults for everything except the epoch count.
    pub fn new(epochs: usize) -> Self {
        TrainConfig {
            epochs,
            batch_size: default_batch(),
            base_lr: default_lr(),
            lr_drop_epochs: Vec::new(),
            lr_drop_factor: default_drop(),
            momentum: default_momentum(),
            weight_decay: 0.0,
            seed: 0,
            loss: LossSettings::default(),
            augment_pad: 0,
            eval_batch_size: default_batch(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.lr_drop_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("lr_drop_epochs must be strictly ascending, got {:?}", self.lr_drop_epochs));
        }
        if let Some(&e) = self.lr_drop_epochs.iter().find(|&&e| e >= self.epochs) {
            return bad(format!("lr drop at epoch {e} is not below the epoch count {}", self.epochs));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor.is_finite()) {
            return bad(format!("lr_drop_factor must be positive, got {}", self.lr_drop_factor));
        }
        SgdState::new(self.base_lr, self.momentum, self.weight_decay)?;
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f32 {
        let drops = self.lr_drop_epochs.iter().filter(|&&e| e <= epoch).count();
        let mut lr = self.base_lr;
        for _ in 0..drops {
            lr *= self.lr_drop_factor;
        }
        lr
    }
}

/// One row of training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f32,
    /// Sample-weighted epoch means of the loss parts.
    pub ce_sum: f32,
    pub kl: f32,
    pub mse: f32,
    pub total: f32,
    /// Main-branch accuracy on the training batches as seen during the epoch.
    pub train_acc: f32,
    /// NaN when no test set is given.
    pub main_test_acc: f32,
    pub ensemble_test_acc: f32,
}

/// The training generator: same seed as model init, separate stream.
pub fn training_rng(seed: u64) -> Rng {
    let mut rng = rng_from_seed(seed);
    rng.set_stream(1);
    rng
}

/// Optimizer, generator and epoch counter of a training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub weights: LossWeights,
    pub sgd: SgdState,
    pub rng: Rng,
    pub epoch: usize,
}

impl Trainer {
    pub fn new(model: &EnsembleModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let weights = config.loss.resolve(model.num_branches())?;
        let sgd = SgdState::new(config.base_lr, config.momentum, config.weight_decay)?;
        let rng = training_rng(config.seed);
        Ok(Trainer {
            config,
            weights,
            sgd,
            rng,
            epoch: 0,
        })
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// One pass over `train` in a seeded shuffled order, then evaluation on `test`.
    pub fn run_epoch(&mut self, model: &mut EnsembleModel, train: &Dataset, test: Option<&Dataset>) -> Result<EpochMetrics> {
        if train.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        check_shapes(model, train)?;
        let epoch = self.epoch;
        let lr = self.config.lr_at(epoch);
        self.sgd.learning_rate = lr;

        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sums = [0.0f64; 4];
        let mut correct = 0usize;
        for (step, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let augment = (self.config.augment_pad > 0).then_some((&mut self.rng, self.config.augment_pad));
            let (x, labels) = train.batch(chunk, augment)?;
            let mut tape = Tape::new();
            let (bundle, updates, main_logits) = {
                let mut ctx = ForwardCtx::new(&mut tape, model.store(), Mode::Train, &mut self.rng);
                let xv = ctx.tape.constant(x);
                let outputs = model.forward_all(&mut ctx, xv)?;
                let bundle = total_loss(ctx.tape, &outputs, &labels, &self.weights)?;
                (bundle, ctx.stat_updates, outputs.logits[0])
            };
            let values: LossValues = bundle.values(&tape);
            if let Some(term) = values.first_non_finite() {
                return Err(Error::NonFinite { epoch, step, term });
            }
            correct += tape
                .value(main_logits)
                .rows().zip(&labels).filter(|(r, &y)| argmax(r) == y).count();
            tape.backward(bundle.total)?;
            tape.accumulate_param_grads(model.store_mut())?;
            sgd_step(model.store_mut(), &mut self.sgd)?;
            apply_stat_updates(model.store_mut(), &updates);
            let n = labels.len() as f64;
            sums[0] += values.ce_sum() as f64 * n;
            sums[1] += values.kl as f64 * n;
            sums[2] += values.mse as f64 * n;
            sums[3] += values.total as f64 * n;
        }
        let n = train.len() as f64;
        let (main_test_acc, ensemble_test_acc) = match test {
            Some(t) => {
                let bs = self.config.eval_batch_size;
                let main = evaluate(model, t, Output::Main, bs)?.accuracy;
                let ens = if model.num_branches() > 1 {
                    evaluate(model, t, Output::Ensemble, bs)?.accuracy
                } else {
                    main
                };
                (main, ens)
            }
            None => (f32::NAN, f32::NAN),
        };
        self.epoch += 1;
        Ok(EpochMetrics {
            epoch,
            lr,
            ce_sum: (sums[0] / n) as f32,
            kl: (sums[1] / n) as f32,
            mse: (sums[2] / n) as f32,
            total: (sums[3] / n) as f32,
            train_acc: (correct as f64 / n) as f32,
            main_test_acc,
            ensemble_test_acc,
        })
    }
}

fn check_shapes(model: &EnsembleModel, data: &Dataset) -> Result<()> {
    let spec = model.spec();
    let want = [spec.in_channels, spec.input_size, spec.input_size];
    if data.shape() != want {
        return Err(Error::Data(format!("dataset images are {:?}, the model expects {want:?}", data.shape())));
    }
    if data.num_classes() != spec.num_classes {
        return Err(Error::Data(format!(
            "dataset has {} classes, the model {}",
            data.num_classes(),
            spec.num_classes
        )));
    }
    Ok(())
}

/// Trains for `config.epochs` epochs and returns the per-epoch metrics.
pub fn train(model: &mut EnsembleModel, train_set: &Dataset, test: Option<&Dataset>, config: &TrainConfig) -> Result<Vec<EpochMetrics>> {
    let mut trainer = Trainer::new(model, config.clone())?;
    let mut history = Vec::with_capacity(config.epochs);
    while !trainer.finished() {
        let m = trainer.run_epoch(model, train_set, test)?;
        log::info!(
            "epoch {} lr {:.4} loss {:.4} train {:.3} main {:.3} ensemble {:.3}",
            m.epoch,
            m.lr,
            m.total,
            m.train_acc,
            m.main_test_acc,
            m.ensemble_test_acc
        );
        history.push(m);
    }
    Ok(history)
}

/// Mean and sample standard deviation (zero for a single run).
#[derive(Clone, Debug, PartialEq)]
pub struct RepeatSummary {
    pub results: Vec<f32>,
    pub mean: f64,
    pub std: f64,
}

pub fn summarize(results: &[f32]) -> RepeatSummary {
    let n = results.len() as f64;
    let mean = results.iter().map(|v| *v as f64).sum::<f64>() / n;
    let std = if results.len() > 1 {
        (results.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    RepeatSummary {
        results: results.to_vec(),
        mean,
        std,
    }
}

/// Runs `run` once per seed and aggregates the returned accuracies.
pub fn run_repeated_with_seeds(seeds: &[u64], mut run: impl FnMut(u64) -> Result<f32>) -> Result<RepeatSummary> {
    if seeds.is_empty() {
        return Err(Error::Config("run_repeated needs at least one run".into()));
    }
    let results = seeds.iter().map(|&s| run(s)).collect::<Result<Vec<_>>>()?;
    Ok(summarize(&results))
}

/// `n_runs` runs with seeds `base_seed, base_seed + 1, …`.
pub fn run_repeated(base_seed: u64, n_runs: usize, run: impl FnMut(u64) -> Result<f32>) -> Result<RepeatSummary> {
    let seeds: Vec<u64> = (0..n_runs as u64).map(|i| base_seed + i).collect();
    run_repeated_with_seeds(&seeds, run)
}

#[cfg(test)]
mod tests;
