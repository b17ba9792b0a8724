use std::collections::HashSet;

use serde::Serialize;

use crate::branch::{EnsembleModel, Step};
use crate::tensor::ParamStore;

/// Trainable parameter count.
pub fn count_params(model: &EnsembleModel) -> usize {
    model.store().num_elements()
}

/// Forward FLOPs for `batch` samples through every branch. Blocks shared at
/// the same path position are counted once, matching how the forward pass runs them.
pub fn count_flops(model: &EnsembleModel, batch: usize) -> u64 {
    let mut seen: HashSet<&[Step]> = HashSet::new();
    let mut per_sample = 0u64;
    for path in model.paths() {
        for end in 1..=path.steps.len() {
            if seen.insert(&path.steps[..end]) {
                per_sample += model.block(path.steps[end - 1]).flops;
            }
        }
        per_sample += model.head(path.head).flops;
    }
    per_sample * batch as u64
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BranchCost {
    /// Head name of the branch.
    pub name: String,
    /// Parameters along the branch, counting shared blocks in full.
    pub params: usize,
    /// Per-sample FLOPs of the branch run on its own.
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub params: usize,
    /// Per-sample FLOPs of the whole model.
    pub flops: u64,
    pub branches: Vec<BranchCost>,
}

fn params_under(store: &ParamStore, block: &str) -> usize {
    let prefix = format!("{block}.");
    store
        .ids()
        .filter(|&id| store.name(id).starts_with(&prefix))
        .map(|id| store.value(id).numel())
        .sum()
}

pub fn cost_report(model: &EnsembleModel) -> CostReport {
    let store = model.store();
    let branches = model
        .paths()
        .iter()
        .map(|path| {
            let head = model.head(path.head);
            let mut params = params_under(store, &head.name);
            let mut flops = head.flops;
            for &s in &path.steps {
                let block = model.block(s);
                params += params_under(store, &block.name);
                flops += block.flops;
            }
            BranchCost {
                name: head.name.clone(),
                params,
                flops,
            }
        })
        .collect();
    CostReport {
        params: count_params(model),
        flops: count_flops(model, 1),
        branches,
    }
}
