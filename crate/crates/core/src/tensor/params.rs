use std::collections::HashMap;

use super::Tensor;
use crate::error::{Error, Result};

/// Epsilon added to the batch variance inside batch normalization.
pub const BN_EPS: f32 = 1e-5;
/// Weight given to the newest batch statistic when updating running stats.
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel running mean and variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub momentum: f32,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Exponential moving update; the variance uses the unbiased batch estimate.
    pub fn update(&mut self, batch: &BatchStats) {
        let m = self.momentum;
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var_unbiased) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

/// Statistics of one training-mode batch-norm application.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var_unbiased: Vec<f32>,
}

#[derive(Clone, Debug)]
struct Param {
    name: String,
    value: Tensor,
    grad: Option<Vec<f32>>,
}

#[derive(Clone, Debug)]
struct Buffer {
    name: String,
    stats: RunningStats,
}

/// Named trainable parameters plus batch-norm running-stat buffers.
///
/// Names are unique across parameters and buffers. A buffer named `x` is
/// persisted as the two tensors `x.running_mean` and `x.running_var`.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    buffers: Vec<Buffer>,
    names: HashMap<String, Slot>,
}

#[derive(Clone, Copy, Debug)]
enum Slot {
    Param(usize),
    Buffer(usize),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        self.claim(&name, Slot::Param(self.params.len()))?;
        self.params.push(Param {
            name,
            value,
            grad: None,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, stats: RunningStats) -> Result<BufferId> {
        let name = name.into();
        self.claim(&name, Slot::Buffer(self.buffers.len()))?;
        self.buffers.push(Buffer { name, stats });
        Ok(BufferId(self.buffers.len() - 1))
    }

    fn claim(&mut self, name: &str, slot: Slot) -> Result<()> {
        if self.names.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.names.insert(name.to_string(), slot);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn buffer_ids(&self) -> impl Iterator<Item = BufferId> {
        (0..self.buffers.len()).map(BufferId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&[f32]> {
        self.params[id.0].grad.as_deref()
    }

    pub fn grad_mut(&mut self, id: ParamId) -> Option<&mut Vec<f32>> {
        self.params[id.0].grad.as_mut()
    }

    /// Adds `grad` into the accumulated gradient of `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[f32]) -> Result<()> {
        let p = &mut self.params[id.0];
        if grad.len() != p.value.numel() {
            return Err(Error::dim("accumulate_grad", "numel", p.value.numel(), grad.len()));
        }
        match &mut p.grad {
            Some(g) => g.iter_mut().zip(grad).for_each(|(a, b)| *a += b),
            None => p.grad = Some(grad.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub(crate) fn take_grad(&mut self, id: ParamId) -> Option<Vec<f32>> {
        self.params[id.0].grad.take()
    }

    pub fn buffer_name(&self, id: BufferId) -> &str {
        &self.buffers[id.0].name
    }

    pub fn stats(&self, id: BufferId) -> &RunningStats {
        &self.buffers[id.0].stats
    }

    pub fn stats_mut(&mut self, id: BufferId) -> &mut RunningStats {
        &mut self.buffers[id.0].stats
    }

    pub fn param_by_name(&self, name: &str) -> Option<ParamId> {
        match self.names.get(name) {
            Some(Slot::Param(i)) => Some(ParamId(*i)),
            _ => None,
        }
    }

    pub fn buffer_by_name(&self, name: &str) -> Option<BufferId> {
        match self.names.get(name) {
            Some(Slot::Buffer(i)) => Some(BufferId(*i)),
            _ => None,
        }
    }

    /// Total trainable element count.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Flattened `(name, tensor)` view of parameters followed by buffer statistics.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        for b in &self.buffers {
            let c = b.stats.channels();
            out.push((
                format!("{}.running_mean", b.name),
                Tensor::new(vec![c], b.stats.mean.clone()).expect("channel count is positive"),
            ));
            out.push((
                format!("{}.running_var", b.name),
                Tensor::new(vec![c], b.stats.var.clone()).expect("channel count is positive"),
            ));
        }
        out
    }

    /// Overwrites every parameter and buffer from a named table.
    ///
    /// The table must cover exactly the names this store declares, with matching shapes.
    pub fn load_named(&mut self, table: &[(String, Tensor)]) -> Result<()> {
        let mut seen = vec![false; self.params.len()];
        let mut seen_buf = vec![[false; 2]; self.buffers.len()];
        for (name, t) in table {
            if let Some(id) = self.param_by_name(name) {
                let p = &mut self.params[id.0];
                if p.value.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!(
                        "shape mismatch for {name}: model has {:?}, file has {:?}",
                        p.value.shape(),
                        t.shape()
                    )));
                }
                p.value = t.clone();
                seen[id.0] = true;
                continue;
            }
            let (base, which) = if let Some(b) = name.strip_suffix(".running_mean") {
                (b, 0)
            } else if let Some(b) = name.strip_suffix(".running_var") {
                (b, 1)
            } else {
                return Err(Error::Checkpoint(format!("unknown parameter {name:?}")));
            };
            let id = self
                .buffer_by_name(base)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name:?}")))?;
            let stats = &mut self.buffers[id.0].stats;
            if t.shape() != [stats.channels()] {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: expected [{}], got {:?}",
                    stats.channels(),
                    t.shape()
                )));
            }
            if which == 0 {
                stats.mean = t.data().to_vec();
            } else {
                stats.var = t.data().to_vec();
            }
            seen_buf[id.0][which] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Checkpoint(format!(
                "missing parameter {:?}",
                self.params[i].name
            )));
        }
        if let Some(i) = seen_buf.iter().position(|s| !(s[0] && s[1])) {
            return Err(Error::Checkpoint(format!(
                "missing running stats for {:?}",
                self.buffers[i].name
            )));
        }
        Ok(())
    }
}
