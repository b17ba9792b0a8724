//! Finite-difference checking of tape gradients: central differences at
//! steps `h` and `2h`, combined by Richardson extrapolation.
//!
//! The function under test maps input tensors to an output of any shape. It is
//! reduced to a scalar with a fixed random projection `L = Σ rᵢ·outᵢ`, the
//! projection being summed in f64 so the finite differences see only the op's
//! own f32 rounding.

use rand::seq::index::sample;
use rand::Rng as _;

use super::{Rng, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor of the relative error, so near-zero gradients are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct Probe {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    pub fn rel_err(&self) -> f64 {
        let denom = self.analytic.abs().max(self.numeric.abs()).max(REL_ERR_FLOOR);
        (self.analytic - self.numeric).abs() / denom
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().map(Probe::rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_err().total_cmp(&b.rel_err()))
    }
}

/// Compares analytic and numeric gradients at `probes` random coordinates of
/// every input listed in `check` (all inputs when `check` is empty).
pub fn check_gradients<F>(
    inputs: &[Tensor],
    check: &[usize],
    f: F,
    probes: usize,
    step: f32,
    rng: &mut Rng,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |tape: &mut Tape, ins: &[Tensor]| -> Result<(Vec<Var>, Var)> {
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(tape, &vars)?;
        Ok((vars, out))
    };

    let mut tape = Tape::new();
    let (leaves, out) = eval(&mut tape, inputs)?;
    let out_shape = tape.shape(out).to_vec();
    let weights: Vec<f32> = (0..tape.value(out).numel())
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    let r = tape.constant(Tensor::new(out_shape, weights.clone())?);
    let weighted = tape.mul(out, r)?;
    let loss = tape.sum(weighted);
    tape.backward(loss)?;

    let projected = |ins: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let (_, o) = eval(&mut t, ins)?;
        Ok(t.value(o)
            .data()
            .iter()
            .zip(&weights)
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum())
    };

    let targets: Vec<usize> = if check.is_empty() {
        (0..inputs.len()).collect()
    } else {
        check.to_vec()
    };
    let mut report = GradCheckReport::default();
    for &input in &targets {
        let grad = tape.grad(leaves[input]).map(<[f32]>::to_vec);
        let numel = inputs[input].numel();
        let picks = sample(rng, numel, probes.min(numel));
        for index in picks.iter() {
            let diff = |h: f32| -> Result<f64> {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                let x0 = inputs[input].data()[index];
                plus[input].data_mut()[index] = x0 + h;
                minus[input].data_mut()[index] = x0 - h;
                let width = (plus[input].data()[index] - minus[input].data()[index]) as f64;
                if width == 0.0 {
                    return Err(Error::Usage("finite-difference step vanished in f32".into()));
                }
                Ok((projected(&plus)? - projected(&minus)?) / width)
            };
            // Richardson: cancels the h² term of the central difference.
            let (d1, d2) = (diff(step)?, diff(2.0 * step)?);
            let numeric = (4.0 * d1 - d2) / 3.0;
            let analytic = grad.as_ref().map_or(0.0, |g| g[index] as f64);
            report.probes.push(Probe {
                input,
                index,
                analytic,
                numeric,
            });
        }
    }
    Ok(report)
}
