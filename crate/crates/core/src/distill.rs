//! Self-distillation objective: per-branch cross-entropy, KL from the
//! ensemble logits to the main branch, and MSE from the ensemble feature map
//! to the main branch's map.
//!
//! The ensemble teachers are detached by default, so the distillation terms
//! send gradient to the main branch only.

use serde::{Deserialize, Serialize};

use crate::branch::{ensemble_logits, BranchOutputs};
use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, Tape, Tensor, Var};

/// Added to teacher probabilities inside logarithms.
pub const KL_EPS: f32 = 1e-12;
/// Added to the population std when standardizing feature maps.
pub const MAP_EPS: f32 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Cross-entropy weight per branch, main branch first.
    pub alpha: Vec<f32>,
    pub beta: f32,
    pub lambda: f32,
    /// Stop gradients through the ensemble teachers.
    pub detach_teacher: bool,
}

impl LossWeights {
    /// `α_i = 1`, `β = 1`, `λ = 1`, detached teachers.
    pub fn defaults(num_branches: usize) -> Self {
        LossWeights {
            alpha: vec![1.0; num_branches],
            beta: 1.0,
            lambda: 1.0,
            detach_teacher: true,
        }
    }

    pub fn validate(&self, num_branches: usize) -> Result<()> {
        if self.alpha.len() != num_branches {
            return Err(Error::Config(format!(
                "{} alpha weights given for {num_branches} branches",
                self.alpha.len()
            )));
        }
        let all = self.alpha.iter().chain([&self.beta, &self.lambda]);
        if let Some(bad) = all.into_iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative, got {bad}")));
        }
        Ok(())
    }
}

/// Tape handles of every loss term. `kl` and `mse` are absent for a single branch.
#[derive(Clone, Debug)]
pub struct LossBundle {
    pub ce: Vec<Var>,
    pub kl: Option<Var>,
    pub mse: Option<Var>,
    pub total: Var,
    /// Batch size `T`.
    pub batch: usize,
}

/// Scalar values of a [`LossBundle`].
#[derive(Clone, Debug, PartialEq)]
pub struct LossValues {
    pub ce: Vec<f32>,
    pub kl: f32,
    pub mse: f32,
    pub total: f32,
}

impl LossBundle {
    pub fn values(&self, tape: &Tape) -> LossValues {
        let item = |v: Var| tape.value(v).data()[0];
        LossValues {
            ce: self.ce.iter().map(|&v| item(v)).collect(),
            kl: self.kl.map_or(0.0, item),
            mse: self.mse.map_or(0.0, item),
            total: item(self.total),
        }
    }
}

impl LossValues {
    pub fn ce_sum(&self) -> f32 {
        self.ce.iter().sum()
    }

    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        if let Some(i) = self.ce.iter().position(|v| !v.is_finite()) {
            return Some(format!("ce[{i}]"));
        }
        if !self.kl.is_finite() {
            return Some("kl".into());
        }
        if !self.mse.is_finite() {
            return Some("mse".into());
        }
        (!self.total.is_finite()).then(|| "total".into())
    }
}

/// Max-shifted softmax of one logit vector.
pub fn softmax_probs(logits: &[f32]) -> Vec<f32> {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    p
}

/// Mean over the batch of `−log softmax(logits)[label]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let logp = tape.log_softmax(logits);
    tape.nll(logp, labels)
}

fn batch_of(tape: &Tape, v: Var) -> Result<usize> {
    tape.shape(v)
        .first()
        .copied()
        .ok_or_else(|| Error::dim("distill", "batch", 1, 0))
}

/// `mean_t Σ_i p_e(i)·(ln p_e(i) − ln p_m(i))` with `p_e = softmax(mean of branch logits)`
/// and `p_m = softmax(main_logits)`.
pub fn kl_distill_logits(tape: &mut Tape, branch_logits: &[Var], main_logits: Var, detach_teacher: bool) -> Result<Var> {
    let outputs = BranchOutputs {
        logits: branch_logits.to_vec(),
        final_maps: Vec::new(),
    };
    let mut ensemble = ensemble_logits(tape, &outputs)?;
    if detach_teacher {
        ensemble = tape.detach(ensemble);
    }
    kl_to_teacher(tape, ensemble, main_logits)
}

/// KL divergence from `softmax(teacher_logits)` to `softmax(main_logits)`, averaged over the batch.
pub fn kl_to_teacher(tape: &mut Tape, teacher_logits: Var, main_logits: Var) -> Result<Var> {
    let shape = tape.shape(main_logits).to_vec();
    if tape.shape(teacher_logits) != shape.as_slice() {
        return Err(Error::dim("kl", "logits", shape.iter().product(), tape.value(teacher_logits).numel()));
    }
    let t = batch_of(tape, main_logits)?;
    let pe = tape.softmax(teacher_logits);
    let eps = tape.constant(Tensor::full(&shape, KL_EPS));
    let guarded = tape.add(pe, eps)?;
    let ln_pe = tape.log(guarded);
    let ln_pm = tape.log_softmax(main_logits);
    let diff = tape.sub(ln_pe, ln_pm)?;
    let weighted = tape.mul(pe, diff)?;
    let s = tape.sum(weighted);
    Ok(tape.scale(s, 1.0 / t as f32))
}

/// Channel-summed, per-sample standardized map `F` of an N×C×H×W activation.
pub fn normalized_map(tape: &mut Tape, feature_map: Var) -> Result<Var> {
    let g = tape.channel_sum(feature_map)?;
    tape.normalize_map(g, MAP_EPS)
}

/// Elementwise mean of the branch maps.
pub fn ensemble_feature_map(tape: &mut Tape, maps: &[Var], detach_teacher: bool) -> Result<Var> {
    let (&first, rest) = maps
        .split_first()
        .ok_or_else(|| Error::Usage("ensemble of zero feature maps".into()))?;
    let mut sum = first;
    for &m in rest {
        sum = tape.add(sum, m)?;
    }
    let mean = if rest.is_empty() { sum } else { tape.scale(sum, 1.0 / maps.len() as f32) };
    Ok(if detach_teacher { tape.detach(mean) } else { mean })
}

/// `(1/T)·Σ_t Σ_ij (F_e − F_m)²`.
pub fn mse_feature_loss(tape: &mut Tape, teacher: Var, main: Var) -> Result<Var> {
    let t = batch_of(tape, main)?;
    let diff = tape.sub(teacher, main)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / t as f32))
}

/// `Σ α_i·CE_i + β·KL + λ·MSE`. Terms with zero weight stay off the tape,
/// as do KL and MSE when there is a single branch.
pub fn total_loss(tape: &mut Tape, outputs: &BranchOutputs, labels: &[usize], weights: &LossWeights) -> Result<LossBundle> {
    let n = outputs.num_branches();
    weights.validate(n)?;
    if outputs.final_maps.len() != n {
        return Err(Error::Usage(format!("{n} logits but {} feature maps", outputs.final_maps.len())));
    }
    let main = outputs.logits[0];
    let batch = batch_of(tape, main)?;
    let ce = outputs
        .logits
        .iter()
        .map(|&l| cross_entropy(tape, l, labels))
        .collect::<Result<Vec<_>>>()?;

    let (kl, mse) = if n > 1 {
        let kl = kl_distill_logits(tape, &outputs.logits, main, weights.detach_teacher)?;
        let maps = outputs
            .final_maps
            .iter()
            .map(|&m| normalized_map(tape, m))
            .collect::<Result<Vec<_>>>()?;
        let fe = ensemble_feature_map(tape, &maps, weights.detach_teacher)?;
        let mse = mse_feature_loss(tape, fe, maps[0])?;
        (Some(kl), Some(mse))
    } else {
        (None, None)
    };

    let mut total: Option<Var> = None;
    let mut add = |tape: &mut Tape, term: Var, w: f32| -> Result<()> {
        if w == 0.0 {
            return Ok(());
        }
        let scaled = tape.scale(term, w);
        total = Some(match total {
            Some(t) => tape.add(t, scaled)?,
            None => scaled,
        });
        Ok(())
    };
    for (&c, &a) in ce.iter().zip(&weights.alpha) {
        add(tape, c, a)?;
    }
    if let Some(kl) = kl {
        add(tape, kl, weights.beta)?;
    }
    if let Some(mse) = mse {
        add(tape, mse, weights.lambda)?;
    }
    let total = match total {
        Some(t) => t,
        None => tape.scale(ce[0], 0.0),
    };
    Ok(LossBundle {
        ce,
        kl,
        mse,
        total,
        batch,
    })
}
