//! Binary checkpoint container.
//!
//! ```text
//! "ESDMB1\n"
//! u64 header length, then a JSON header {model, epoch, rng, optimizer}
//! parameter table
//! velocity table (empty without optimizer state)
//! ```
//!
//! A table is a u64 entry count followed by entries of
//! `u32 name length, utf-8 name, u32 rank, u64 dims, f32 payload`.
//! Every integer and float is little-endian.

use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::branch::{EnsembleModel, ModelDesc};
use crate::error::{Error, Result};
use crate::tensor::{rng_from_seed, Rng, SgdState, Tensor};

pub const MAGIC: &[u8] = b"ESDMB1\n";

/// Position of a ChaCha generator, enough to continue its sequence exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal string; JSON numbers cannot carry 128 bits portably.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad rng word position {:?}", self.word_pos)))?;
        let mut rng = Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdHyper {
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelDesc,
    epoch: usize,
    rng: Option<RngState>,
    optimizer: Option<SgdHyper>,
}

/// Momentum buffers keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub hyper: SgdHyper,
    pub velocity: Vec<(String, Tensor)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelDesc,
    /// Parameters, then BN running statistics.
    pub tensors: Vec<(String, Tensor)>,
    pub optimizer: Option<OptimizerState>,
    pub rng: Option<RngState>,
    /// Completed epochs.
    pub epoch: usize,
}

impl Checkpoint {
    /// Weights only.
    pub fn of_model(model: &EnsembleModel, epoch: usize) -> Self {
        Checkpoint {
            model: model.desc().clone(),
            tensors: model.store().named_tensors(),
            optimizer: None,
            rng: None,
            epoch,
        }
    }

    /// Weights plus the optimizer and generator needed to resume training.
    pub fn of_training(model: &EnsembleModel, sgd: &SgdState, rng: &Rng, epoch: usize) -> Self {
        let store = model.store();
        let velocity = sgd
            .velocities()
            .map(|(id, v)| {
                let shape = store.value(id).shape().to_vec();
                let t = Tensor::new(shape, v.to_vec()).expect("velocity matches its parameter");
                (store.name(id).to_string(), t)
            })
            .collect();
        Checkpoint {
            optimizer: Some(OptimizerState {
                hyper: SgdHyper {
                    learning_rate: sgd.learning_rate,
                    momentum: sgd.momentum,
                    weight_decay: sgd.weight_decay,
                },
                velocity,
            }),
            rng: Some(RngState::capture(rng)),
            ..Self::of_model(model, epoch)
        }
    }

    /// Rebuilds the model and loads every stored tensor.
    pub fn to_model(&self) -> Result<EnsembleModel> {
        let mut model = EnsembleModel::build(self.model.clone(), &mut rng_from_seed(0))?;
        model.store_mut().load_named(&self.tensors)?;
        Ok(model)
    }

    /// Optimizer state mapped onto `model`'s parameter ids.
    pub fn sgd_state(&self, model: &EnsembleModel) -> Result<Option<SgdState>> {
        let Some(opt) = &self.optimizer else {
            return Ok(None);
        };
        let h = &opt.hyper;
        let mut sgd = SgdState::new(h.learning_rate, h.momentum, h.weight_decay)?;
        for (name, v) in &opt.velocity {
            let id = model
                .store()
                .param_by_name(name)
                .ok_or_else(|| Error::Checkpoint(format!("velocity for unknown parameter {name:?}")))?;
            if model.store().value(id).shape() != v.shape() {
                return Err(Error::Checkpoint(format!("velocity shape mismatch for {name}")));
            }
            sgd.set_velocity(id, v.data().to_vec());
        }
        Ok(Some(sgd))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            model: self.model.clone(),
            epoch: self.epoch,
            rng: self.rng.clone(),
            optimizer: self.optimizer.as_ref().map(|o| o.hyper.clone()),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = MAGIC.to_vec();
        out.extend((json.len() as u64).to_le_bytes());
        out.extend(json);
        write_table(&mut out, &self.tensors);
        let empty = Vec::new();
        write_table(&mut out, self.optimizer.as_ref().map_or(&empty, |o| &o.velocity));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(MAGIC)
            .ok_or_else(|| Error::Checkpoint("missing ESDMB1 magic".into()))?;
        let mut r = Reader { buf: rest, pos: 0 };
        let len = r.u64()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let tensors = read_table(&mut r)?;
        let velocity = read_table(&mut r)?;
        if r.pos != r.buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.buf.len() - r.pos)));
        }
        let optimizer = match header.optimizer {
            Some(hyper) => Some(OptimizerState { hyper, velocity }),
            None if velocity.is_empty() => None,
            None => return Err(Error::Checkpoint("velocity table without optimizer settings".into())),
        };
        Ok(Checkpoint {
            model: header.model,
            tensors,
            optimizer,
            rng: header.rng,
            epoch: header.epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&super::read(path)?)
    }
}

fn write_table(out: &mut Vec<u8>, table: &[(String, Tensor)]) {
    out.extend((table.len() as u64).to_le_bytes());
    for (name, t) in table {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated: need {n} bytes at offset {}", self.pos + MAGIC.len()))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_table(r: &mut Reader<'_>) -> Result<Vec<(String, Tensor)>> {
    let count = r.u64()?;
    let mut table = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank > 4 {
            return Err(Error::Checkpoint(format!("{name}: rank {rank} exceeds 4")));
        }
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape {shape:?} overflows")))?;
        let data = r.take(numel)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        table.push((name, t));
    }
    Ok(table)
}
