use serde::{Deserialize, Serialize};

use crate::blocks::{ForwardCtx, Mode};
use crate::branch::{ensemble_logits, EnsembleModel};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{argmax, rng_from_seed, Tape};

/// Which logits to classify with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Output {
    Main,
    Ensemble,
}

/// Counts indexed `[true][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.classes + predicted] += 1;
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn row(&self, truth: usize) -> &[u64] {
        &self.counts[truth * self.classes..(truth + 1) * self.classes]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    pub fn accuracy(&self) -> f32 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (self.trace() as f64 / total as f64) as f32
    }

    /// CSV with a `true\predicted` header row; one row per true label.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for p in 0..self.classes {
            out.push_str(&format!(",{p}"));
        }
        out.push('\n');
        for t in 0..self.classes {
            out.push_str(&t.to_string());
            for c in self.row(t) {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f32,
    pub confusion: ConfusionMatrix,
}

/// Eval-mode top-1 predictions for every sample, in dataset order.
pub fn predict(model: &EnsembleModel, data: &Dataset, output: Output, batch_size: usize) -> Result<Vec<usize>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    super::check_shapes(model, data)?;
    // Eval mode draws nothing; the generator only satisfies the interface.
    let mut rng = rng_from_seed(0);
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut preds = Vec::with_capacity(data.len());
    for chunk in indices.chunks(batch_size) {
        let (x, _) = data.batch(chunk, None)?;
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::new(&mut tape, model.store(), Mode::Eval, &mut rng);
        let xv = ctx.tape.constant(x);
        let logits = match output {
            Output::Main => model.forward_main(&mut ctx, xv)?,
            Output::Ensemble => {
                let out = model.forward_all(&mut ctx, xv)?;
                ensemble_logits(ctx.tape, &out)?
            }
        };
        preds.extend(tape.value(logits).rows().map(argmax));
    }
    Ok(preds)
}

pub fn evaluate(model: &EnsembleModel, data: &Dataset, output: Output, batch_size: usize) -> Result<Evaluation> {
    let preds = predict(model, data, output, batch_size)?;
    let mut confusion = ConfusionMatrix::new(data.num_classes());
    for (&p, &y) in preds.iter().zip(data.labels()) {
        confusion.record(y, p);
    }
    Ok(Evaluation {
        accuracy: confusion.accuracy(),
        confusion,
    })
}
