use std::collections::BTreeMap;

use super::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Learning rate, momentum and per-parameter velocity of SGD with momentum.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: BTreeMap<ParamId, Vec<f32>>,
}

impl SgdState {
    pub fn new(learning_rate: f32, momentum: f32, weight_decay: f32) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        if weight_decay.is_nan() || weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight decay must be nonnegative, got {weight_decay}"
            )));
        }
        Ok(SgdState {
            learning_rate,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        })
    }

    pub fn velocity(&self, id: ParamId) -> Option<&[f32]> {
        self.velocity.get(&id).map(Vec::as_slice)
    }

    pub fn velocities(&self) -> impl Iterator<Item = (ParamId, &[f32])> {
        self.velocity.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn set_velocity(&mut self, id: ParamId, v: Vec<f32>) {
        self.velocity.insert(id, v);
    }
}

/// One momentum step over every parameter in `store`:
/// `v ← momentum·v + g`, `p ← p − lr·v`. Gradients are cleared afterwards.
///
/// Fails without touching any parameter if one of them has no gradient.
pub fn sgd_step(store: &mut ParamStore, state: &mut SgdState) -> Result<()> {
    if let Some(missing) = store.ids().find(|&id| store.grad(id).is_none()) {
        return Err(Error::Usage(format!(
            "parameter {:?} has no gradient; run backward before sgd_step",
            store.name(missing)
        )));
    }
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let grad = store.take_grad(id).expect("checked above");
        let lr = state.learning_rate;
        let momentum = state.momentum;
        let wd = state.weight_decay;
        let value = store.value_mut(id).data_mut();
        let v = state
            .velocity
            .entry(id)
            .or_insert_with(|| vec![0.0; value.len()]);
        for ((p, vel), g) in value.iter_mut().zip(v.iter_mut()).zip(&grad) {
            let g = if wd != 0.0 { g + wd * *p } else { *g };
            *vel = momentum * *vel + g;
            *p -= lr * *vel;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_param(value: f32) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::full(&[1], value)).unwrap();
        (s, id)
    }

    #[test]
    fn plain_step_without_momentum() {
        let (mut s, id) = one_param(1.0);
        let mut st = SgdState::new(0.1, 0.0, 0.0).unwrap();
        s.accumulate_grad(id, &[1.0]).unwrap();
        sgd_step(&mut s, &mut st).unwrap();
        assert!((s.value(id).data()[0] - 0.9).abs() < 1e-7);
        assert!(s.grad(id).is_none(), "grads are cleared after the step");
    }

    #[test]
    fn momentum_recurrence_two_steps() {
        let (mut s, id) = one_param(0.0);
        let mut st = SgdState::new(1.0, 0.9, 0.0).unwrap();
        for _ in 0..2 {
            s.accumulate_grad(id, &[1.0]).unwrap();
            sgd_step(&mut s, &mut st).unwrap();
        }
        // v1 = 1, v2 = 0.9 + 1 = 1.9
        assert!((s.value(id).data()[0] + 2.9).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let (mut s, id) = one_param(0.25);
        let mut st = SgdState::new(0.5, 0.9, 0.0).unwrap();
        s.accumulate_grad(id, &[0.0]).unwrap();
        sgd_step(&mut s, &mut st).unwrap();
        assert_eq!(s.value(id).data()[0], 0.25);
    }

    #[test]
    fn missing_gradient_is_usage_error() {
        let (mut s, _) = one_param(1.0);
        let mut st = SgdState::new(0.1, 0.9, 0.0).unwrap();
        assert!(matches!(sgd_step(&mut s, &mut st), Err(Error::Usage(_))));
    }

    #[test]
    fn invalid_hyperparameters() {
        assert!(SgdState::new(0.0, 0.9, 0.0).is_err());
        assert!(SgdState::new(0.1, 1.0, 0.0).is_err());
        assert!(SgdState::new(0.1, 0.5, -1.0).is_err());
    }
}
