use serde::{Deserialize, Serialize};

use super::layers::{Builder, Linear};
use super::ForwardCtx;
use crate::error::{Error, Result};
use crate::tensor::{ParamId, Tensor, Var};

/// Module placed in front of sub-branch blocks to diversify them from the main branch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttentionKind {
    None,
    /// Squeeze-and-excitation with hidden width `C / reduction`.
    Se { reduction: usize },
    /// Channel attention with a learnable residual scale initialized to 0.
    Cam,
    Dropout { p: f32 },
}

impl AttentionKind {
    pub fn validate(&self, channels: usize) -> Result<()> {
        match *self {
            AttentionKind::Se { reduction } => {
                if reduction == 0 || !channels.is_multiple_of(reduction) || channels / reduction == 0 {
                    return Err(Error::Config(format!(
                        "SE reduction {reduction} does not divide {channels} channels"
                    )));
                }
            }
            AttentionKind::Dropout { p } => {
                if !(0.0..1.0).contains(&p) {
                    return Err(Error::Config(format!("dropout probability must lie in [0, 1), got {p}")));
                }
            }
            AttentionKind::None | AttentionKind::Cam => {}
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match self {
            AttentionKind::None => "none".into(),
            AttentionKind::Se { reduction } => format!("se{reduction}"),
            AttentionKind::Cam => "cam".into(),
            AttentionKind::Dropout { p } => format!("dropout{p}"),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Attention {
    Identity,
    Se { squeeze: Linear, excite: Linear },
    Cam { gamma: ParamId },
    Dropout { p: f32 },
}

impl Attention {
    pub(crate) fn build(kind: AttentionKind, b: &mut Builder<'_>) -> Result<Self> {
        let [c, h, w] = b.shape;
        kind.validate(c)?;
        Ok(match kind {
            AttentionKind::None => Attention::Identity,
            AttentionKind::Se { reduction } => {
                b.flops += (c * h * w) as u64;
                let squeeze = b.linear("se.squeeze", c, c / reduction)?;
                b.flops += (c / reduction) as u64;
                let excite = b.linear("se.excite", c / reduction, c)?;
                b.flops += 4 * c as u64 + (c * h * w) as u64;
                Attention::Se { squeeze, excite }
            }
            AttentionKind::Cam => {
                let gamma = b.param("cam.gamma", Tensor::zeros(&[1]))?;
                let hw = (h * w) as u64;
                let c = c as u64;
                b.flops += 4 * c * c * hw + 5 * c * c + 3 * c * hw;
                Attention::Cam { gamma }
            }
            AttentionKind::Dropout { p } => Attention::Dropout { p },
        })
    }

    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        match self {
            Attention::Identity => Ok(x),
            Attention::Se { squeeze, excite } => se_forward(ctx, x, squeeze, excite),
            Attention::Cam { gamma } => {
                let g = ctx.param(*gamma);
                cam_forward(ctx, x, g)
            }
            Attention::Dropout { p } => {
                let training = ctx.training();
                ctx.tape.dropout(x, *p, training, ctx.rng)
            }
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, Attention::Identity)
    }
}

/// `x ⊙ sigmoid(W₂·relu(W₁·GAP(x)))`, the gate broadcast over H×W.
pub fn se_forward(ctx: &mut ForwardCtx<'_>, x: Var, squeeze: &Linear, excite: &Linear) -> Result<Var> {
    let pooled = ctx.tape.global_avg_pool(x)?;
    let hidden = squeeze.forward(ctx, pooled)?;
    let hidden = ctx.tape.relu(hidden);
    let logits = excite.forward(ctx, hidden)?;
    let gate = ctx.tape.sigmoid(logits);
    ctx.tape.scale_channels(x, gate)
}

/// Channel attention: with `A = x` viewed as C×HW per sample,
/// `out = γ·softmax(rowmax(AAᵀ) − AAᵀ)·A + x`.
pub fn cam_forward(ctx: &mut ForwardCtx<'_>, x: Var, gamma: Var) -> Result<Var> {
    let shape = ctx.tape.shape(x).to_vec();
    let &[n, c, h, w] = shape.as_slice() else {
        return Err(Error::dim("cam", "rank", 4, shape.len()));
    };
    let t = &mut *ctx.tape;
    let a = t.reshape(x, &[n, c, h * w])?;
    let at = t.transpose(a)?;
    let energy = t.matmul(a, at)?;
    let shifted = t.row_max_minus(energy);
    let attention = t.softmax(shifted);
    let mixed = t.matmul(attention, a)?;
    let mixed = t.reshape(mixed, &[n, c, h, w])?;
    let scaled = t.mul_scalar(mixed, gamma)?;
    t.add(scaled, x)
}
