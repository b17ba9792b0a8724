//! Compact multi-branch ensemble CNNs trained with embedded self-distillation.
//!
//! A backbone is split into blocks `f0..fm`. Sub-branches reuse those blocks
//! in two routing patterns (zigzag `v1` with shared sub-blocks, star `v2` with
//! independent branches), their logits and final feature maps form an
//! ensemble teacher for the main branch, and after training everything but the
//! main branch is pruned away.

pub mod blocks;
pub mod data;
pub mod branch;
pub mod distill;
pub mod error;
pub mod io;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
