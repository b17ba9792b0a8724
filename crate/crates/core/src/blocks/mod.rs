//! Backbone blocks, classifier heads and the attention modules that set
//! sub-branches apart from the main branch.
//!
//! Blocks register their parameters in a shared [`ParamStore`] under
//! dotted names (`f1.unit0.conv1.weight`), so the same block can be executed
//! on several branch paths while owning one set of weights.

mod attention;
mod layers;
mod spec;

pub use attention::{cam_forward, se_forward, Attention, AttentionKind};
pub use layers::{attach_attention, BatchNorm, Block, Conv, ConvBn, DenseLayer, Head, Layer, Linear, Residual};
pub use spec::{BackboneSpec, ConvSpec, HeadSpec, PoolSpec, Shape3, StageSpec, StemSpec, Unit};

use crate::error::Result;
use crate::tensor::{BatchStats, BufferId, ParamId, ParamStore, Rng, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// State threaded through one forward pass.
///
/// Batch-norm statistics gathered in training mode are queued in
/// `stat_updates` rather than written, so a forward pass only needs `&ParamStore`;
/// call [`apply_stat_updates`] afterwards. `executed` lists block and head names
/// in execution order.
pub struct ForwardCtx<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    pub mode: Mode,
    pub rng: &'a mut Rng,
    pub stat_updates: Vec<(BufferId, BatchStats)>,
    pub executed: Vec<String>,
}

impl<'a> ForwardCtx<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, mode: Mode, rng: &'a mut Rng) -> Self {
        ForwardCtx {
            tape,
            store,
            mode,
            rng,
            stat_updates: Vec::new(),
            executed: Vec::new(),
        }
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }
}

/// Folds queued batch statistics into the running stats, in queue order.
pub fn apply_stat_updates(store: &mut ParamStore, updates: &[(BufferId, BatchStats)]) {
    for (id, batch) in updates {
        store.stats_mut(*id).update(batch);
    }
}

/// Blocks `f0..fm` and head `fc` of a plain classifier.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub blocks: Vec<Block>,
    pub head: Head,
}

/// Builds `f0..fm` (named `<prefix>0..<prefix>m`) and a head named `head_name`.
pub fn build_backbone(
    spec: &BackboneSpec,
    prefix: &str,
    head_name: &str,
    store: &mut ParamStore,
    rng: &mut Rng,
) -> Result<Backbone> {
    let shapes = spec.block_shapes()?;
    let input = [spec.in_channels, spec.input_size, spec.input_size];
    let mut blocks = vec![Block::build_stem(&spec.stem, input, &format!("{prefix}0"), store, rng)?];
    for (k, stage) in spec.stages.iter().enumerate() {
        blocks.push(Block::build_stage(stage, shapes[k], &format!("{prefix}{}", k + 1), store, rng)?);
    }
    debug_assert!(blocks.iter().zip(&shapes).all(|(b, s)| b.out_shape == *s));
    let head = Head::build(&spec.head, shapes[spec.depth()], spec.num_classes, head_name, store, rng)?;
    Ok(Backbone { blocks, head })
}

impl Backbone {
    /// Sequential forward `fc∘fm∘…∘f0`, returning logits and the final feature map.
    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<(Var, Var)> {
        let mut y = x;
        for b in &self.blocks {
            y = b.forward(ctx, y)?;
        }
        Ok((self.head.forward(ctx, y)?, y))
    }
}
