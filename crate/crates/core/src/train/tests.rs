use super::*;
use crate::blocks::{AttentionKind, BackboneSpec};
use crate::branch::{build_v1, EnsembleModel, Placement};
use crate::tensor::rng_from_seed;

fn blobs(n_per_class: usize, classes: usize, size: usize, seed: u64) -> Dataset {
    let mut rng = rng_from_seed(seed);
    let per = 3 * size * size;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n_per_class * classes {
        let y = i % classes;
        let noise = Tensor::randn(&[per], 0.3, &mut rng);
        images.extend(noise.data().iter().enumerate().map(|(j, v)| v + if j % classes == y { 1.0 } else { 0.0 }));
        labels.push(y);
    }
    Dataset::new([3, size, size], classes, images, labels).unwrap()
}

use crate::tensor::Tensor;

fn tiny_v1(seed: u64) -> EnsembleModel {
    build_v1(
        BackboneSpec::tiny_cnn(4),
        vec![0],
        AttentionKind::Se { reduction: 4 },
        Placement::EveryBlock,
        &mut rng_from_seed(seed),
    )
    .unwrap()
}

fn small_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        base_lr: 0.05,
        eval_batch_size: 8,
        ..TrainConfig::new(epochs)
    }
}

#[test]
fn step_schedule() {
    let c = TrainConfig {
        lr_drop_epochs: vec![40, 70, 90],
        ..TrainConfig::new(100)
    };
    c.validate().unwrap();
    let close = |a: f32, b: f32| (a - b).abs() <= 1e-6 * b;
    for (e, want) in [(0, 0.1), (39, 0.1), (40, 0.01), (69, 0.01), (70, 0.001), (90, 0.0001), (99, 0.0001)] {
        assert!(close(c.lr_at(e), want), "epoch {e}: {}", c.lr_at(e));
    }
}

#[test]
fn config_validation() {
    assert!(TrainConfig::new(0).validate().is_err());
    let unsorted = TrainConfig {
        lr_drop_epochs: vec![5, 3],
        ..TrainConfig::new(10)
    };
    assert!(matches!(unsorted.validate(), Err(Error::Config(_))));
    let late = TrainConfig {
        lr_drop_epochs: vec![10],
        ..TrainConfig::new(10)
    };
    assert!(late.validate().is_err());
    let neg = TrainConfig {
        momentum: -0.1,
        ..TrainConfig::new(10)
    };
    assert!(neg.validate().is_err());
    let parsed: std::result::Result<TrainConfig, _> = serde_json::from_str(r#"{"epochs": 3, "bogus": 1}"#);
    assert!(parsed.is_err());
    let parsed: TrainConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
    assert_eq!(parsed, TrainConfig::new(3));
}

#[test]
fn alpha_length_must_match() {
    let s = LossSettings {
        alpha: Some(vec![1.0]),
        ..LossSettings::default()
    };
    assert!(s.resolve(2).is_err());
    assert_eq!(LossSettings::default().resolve(3).unwrap(), LossWeights::defaults(3));
}

#[test]
fn loss_decreases_on_small_set() {
    let data = blobs(2, 4, 32, 1);
    let mut model = tiny_v1(3);
    let mut trainer = Trainer::new(&model, small_config(6)).unwrap();
    let first = trainer.run_epoch(&mut model, &data, None).unwrap();
    let mut last = first.clone();
    while !trainer.finished() {
        last = trainer.run_epoch(&mut model, &data, Some(&data)).unwrap();
    }
    assert!(last.total < first.total, "{} -> {}", first.total, last.total);
    assert!(first.main_test_acc.is_nan());
    assert!((0.0..=1.0).contains(&last.ensemble_test_acc));
    assert_eq!(last.epoch, 5);
}

#[test]
fn training_is_deterministic() {
    let data = blobs(2, 4, 32, 2);
    let cfg = TrainConfig {
        augment_pad: 2,
        ..small_config(2)
    };
    let run = || {
        let mut model = tiny_v1(5);
        let h = train(&mut model, &data, Some(&data), &cfg).unwrap();
        (h, model.store().named_tensors())
    };
    assert_eq!(run(), run());
}

#[test]
fn shape_mismatch_is_reported() {
    let data = blobs(1, 4, 16, 1);
    let mut model = tiny_v1(1);
    let mut trainer = Trainer::new(&model, small_config(1)).unwrap();
    assert!(matches!(trainer.run_epoch(&mut model, &data, None), Err(Error::Data(_))));
}

#[test]
fn divergence_is_detected() {
    let data = blobs(2, 4, 32, 4);
    let mut model = tiny_v1(6);
    let id = model.store().param_by_name("fc.out.weight").unwrap();
    model.store_mut().value_mut(id).data_mut()[0] = f32::NAN;
    let err = train(&mut model, &data, None, &small_config(1)).unwrap_err();
    match err {
        Error::NonFinite { epoch, step, term } => {
            assert_eq!((epoch, step), (0, 0));
            assert_eq!(term, "ce[0]");
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn confusion_matrix_cases() {
    let mut perfect = ConfusionMatrix::new(3);
    for y in [0, 1, 2, 2] {
        perfect.record(y, y);
    }
    assert_eq!(perfect.accuracy(), 1.0);
    assert_eq!(perfect.trace(), 4);

    let mut constant = ConfusionMatrix::new(3);
    for y in [0, 1, 2, 0] {
        constant.record(y, 0);
    }
    assert_eq!(constant.accuracy(), 0.5);
    assert_eq!(constant.row(1), &[1, 0, 0]);
    assert_eq!(constant.to_csv(), "true\\predicted,0,1,2\n0,2,0,0\n1,1,0,0\n2,1,0,0\n");
    assert_eq!(ConfusionMatrix::new(2).accuracy(), 0.0);
}

#[test]
fn evaluation_matches_argmax_oracle() {
    let data = blobs(3, 4, 32, 7);
    let model = tiny_v1(8);
    let eval = evaluate(&model, &data, Output::Ensemble, 5).unwrap();
    let mut rng = rng_from_seed(0);
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::new(&mut tape, model.store(), Mode::Eval, &mut rng);
    let (x, y) = data.batch(&(0..data.len()).collect::<Vec<_>>(), None).unwrap();
    let xv = ctx.tape.constant(x);
    let out = model.forward_all(&mut ctx, xv).unwrap();
    let mut hits = 0;
    for (i, &label) in y.iter().enumerate() {
        let mut mean = [0.0f64; 4];
        for &l in &out.logits {
            for (c, m) in mean.iter_mut().enumerate() {
                *m += tape.value(l).data()[i * 4 + c] as f64 / out.logits.len() as f64;
            }
        }
        let best = (0..4).fold(0, |b, c| if mean[c] > mean[b] { c } else { b });
        hits += usize::from(best == label);
    }
    assert_eq!(eval.confusion.trace() as usize, hits);
    assert_eq!(eval.confusion.total() as usize, data.len());
    assert!(evaluate(&model, &data, Output::Main, 0).is_err());
}

#[test]
fn head_cost() {
    let model = EnsembleModel::build(
        crate::branch::ModelDesc {
            backbone: BackboneSpec::resnet_cifar(20, 10).unwrap(),
            topology: crate::branch::Topology::Baseline,
        },
        &mut rng_from_seed(0),
    )
    .unwrap();
    let head = model.head(0);
    // 64·10 weights + 10 biases; GAP adds over 64×8×8, then 2 per MAC plus the bias adds.
    let report = cost_report(&model);
    assert_eq!(report.branches[0].params, report.params);
    assert_eq!(head.flops, 64 * 64 + 2 * 640 + 10);
    let fc: usize = model
        .store()
        .ids()
        .filter(|&id| model.store().name(id).starts_with("fc."))
        .map(|id| model.store().value(id).numel())
        .sum();
    assert_eq!(fc, 650);
    assert_eq!(count_flops(&model, 3), 3 * report.flops);
}

#[test]
fn ensemble_costs_more_than_pruned() {
    let model = tiny_v1(0);
    let pruned = model.prune_to_main().unwrap();
    let full = cost_report(&model);
    let main = cost_report(&pruned);
    assert!(main.params < full.params);
    assert!(main.flops < full.flops);
    assert_eq!(full.branches[0], main.branches[0]);
    // Branch 1 shares only f0, which the whole-model count includes once.
    let f0 = model.block(crate::branch::Step::Main(0)).flops;
    assert_eq!(full.flops, full.branches[0].flops + full.branches[1].flops - f0);
}

#[test]
fn repeated_runs() {
    let one = run_repeated(0, 1, |_| Ok(0.7)).unwrap();
    assert_eq!((one.mean, one.std), (0.7f32 as f64, 0.0));
    let same = run_repeated_with_seeds(&[4, 4, 4], |s| Ok(s as f32 / 10.0)).unwrap();
    assert_eq!(same.std, 0.0);
    let mut seen = Vec::new();
    let three = run_repeated(10, 3, |s| {
        seen.push(s);
        Ok([0.5, 0.6, 0.7][(s - 10) as usize])
    })
    .unwrap();
    assert_eq!(seen, [10, 11, 12]);
    let vals = [0.5f32 as f64, 0.6f32 as f64, 0.7f32 as f64];
    let mean = vals.iter().sum::<f64>() / 3.0;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2.0;
    assert!((three.mean - mean).abs() < 1e-12);
    assert!((three.std - var.sqrt()).abs() < 1e-12);
    assert!(run_repeated(0, 0, |_| Ok(0.0)).is_err());
}
