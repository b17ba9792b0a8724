//! Acceptance checks. Prints one line per criterion and exits nonzero if any fails.
//!
//! The CIFAR-10 direction-of-effect run needs the real dataset and hours of CPU
//! time; it runs only when `ESDMB_CIFAR10_DIR` points at the extracted binary batches.

use std::f64::consts::LN_2;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use esdmb_core::blocks::{apply_stat_updates, build_backbone, cam_forward, AttentionKind, BackboneSpec, ForwardCtx, Layer, Mode};
use esdmb_core::branch::{build_v1, EnsembleModel, ModelDesc, Placement, Step, Topology};
use esdmb_core::data::Dataset;
use esdmb_core::distill::{
    cross_entropy, ensemble_feature_map, kl_distill_logits, mse_feature_loss, normalized_map, total_loss, LossWeights,
};
use esdmb_core::io::cifar::{self, PIXELS, RECORD};
use esdmb_core::io::metrics::append_metrics;
use esdmb_core::io::synthetic::{gen_synthetic, SyntheticSpec};
use esdmb_core::tensor::gradcheck::check_gradients;
use esdmb_core::tensor::{rng_from_seed, sgd_step, Rng, RunningStats, SgdState, Tape, Tensor, Var};
use esdmb_core::train::{count_params, run_repeated, train, training_rng, LossSettings, TrainConfig};
use esdmb_core::branch::BranchOutputs;
use esdmb_core::tensor::ParamStore;
use rand::seq::SliceRandom;
use rand::Rng as _;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    ensure(elapsed.as_secs() < limit_s, || format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------------------
// 1. finite-difference gradient suite

const PROBES: usize = 6;
const FD_TOL: f64 = 1e-3;

/// Ops that are at most quadratic along any single coordinate. Central differences
/// are exact on those, so a wide step only lowers the f32 rounding noise.
const MULTILINEAR: &[&str] = &[
    "conv2d",
    "linear",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "mul_scalar",
    "scale_channels",
    "reshape+transpose",
    "sum",
    "channel_sum",
    "avg_pool2d",
    "global_avg_pool",
    "dropout",
    "concat_channels",
    "batchnorm2d (eval)",
];

type Case = (&'static str, Vec<Tensor>, Vec<usize>, Box<dyn Fn(&mut Tape, &[Var]) -> esdmb_core::Result<Var>>);

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn positive(shape: &[usize], rng: &mut Rng) -> Tensor {
    let t = randn(shape, rng);
    let data = t.data().iter().map(|v| v.abs() + 0.5).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values at least 0.2 away from zero, so no probe crosses the ReLU kink.
fn off_zero(shape: &[usize], rng: &mut Rng) -> Tensor {
    let data = randn(shape, rng).data().iter().map(|v| v.signum() * (0.2 + v.abs())).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// A shuffled grid with spacing 0.2, so maxima stay unique under every probe.
fn spaced(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data: Vec<f32> = (0..n).map(|i| (i as f32 - n as f32 / 2.0) * 0.2).collect();
    data.shuffle(rng);
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `base` plus a small perturbation: a teacher that roughly agrees with its student.
fn near(base: &Tensor, rng: &mut Rng) -> Tensor {
    let noise = Tensor::randn(base.shape(), 0.3, rng);
    let data = base.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
    Tensor::new(base.shape().to_vec(), data).unwrap()
}

fn op_cases(rng: &mut Rng) -> Vec<Case> {
    let mut cases: Vec<Case> = Vec::new();
    let x4 = randn(&[2, 3, 5, 5], rng);
    let w = randn(&[4, 3, 3, 3], rng);
    let b4 = randn(&[4], rng);
    cases.push(("conv2d", vec![x4.clone(), w, b4], vec![], Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1))));
    let lw = randn(&[5, 3], rng);
    let lb = randn(&[3], rng);
    cases.push(("linear", vec![randn(&[4, 5], rng), lw, lb], vec![], Box::new(|t, v| t.linear(v[0], v[1], Some(v[2])))));
    cases.push(("matmul", vec![randn(&[2, 3, 4], rng), randn(&[2, 4, 5], rng)], vec![], Box::new(|t, v| t.matmul(v[0], v[1]))));
    let (a, b) = (randn(&[3, 4], rng), randn(&[3, 4], rng));
    cases.push(("add", vec![a.clone(), b.clone()], vec![], Box::new(|t, v| t.add(v[0], v[1]))));
    cases.push(("sub", vec![a.clone(), b.clone()], vec![], Box::new(|t, v| t.sub(v[0], v[1]))));
    cases.push(("mul", vec![a.clone(), b], vec![], Box::new(|t, v| t.mul(v[0], v[1]))));
    cases.push(("scale", vec![a.clone()], vec![], Box::new(|t, v| Ok(t.scale(v[0], -1.7)))));
    cases.push(("mul_scalar", vec![a.clone(), randn(&[1], rng)], vec![], Box::new(|t, v| t.mul_scalar(v[0], v[1]))));
    cases.push((
        "scale_channels",
        vec![x4.clone(), randn(&[2, 3], rng)],
        vec![],
        Box::new(|t, v| t.scale_channels(v[0], v[1])),
    ));
    cases.push(("relu", vec![off_zero(&[4, 6], rng)], vec![], Box::new(|t, v| Ok(t.relu(v[0])))));
    cases.push(("sigmoid", vec![randn(&[4, 6], rng)], vec![], Box::new(|t, v| Ok(t.sigmoid(v[0])))));
    cases.push(("log", vec![positive(&[4, 6], rng)], vec![], Box::new(|t, v| Ok(t.log(v[0])))));
    cases.push(("softmax", vec![randn(&[3, 7], rng)], vec![], Box::new(|t, v| Ok(t.softmax(v[0])))));
    cases.push(("log_softmax", vec![randn(&[3, 7], rng)], vec![], Box::new(|t, v| Ok(t.log_softmax(v[0])))));
    cases.push(("row_max_minus", vec![spaced(&[3, 7], rng)], vec![], Box::new(|t, v| Ok(t.row_max_minus(v[0])))));
    cases.push((
        "reshape+transpose",
        vec![randn(&[2, 6], rng)],
        vec![],
        Box::new(|t, v| {
            let r = t.reshape(v[0], &[3, 4])?;
            t.transpose(r)
        }),
    ));
    cases.push(("sum", vec![randn(&[3, 4], rng)], vec![], Box::new(|t, v| Ok(t.sum(v[0])))));
    cases.push(("channel_sum", vec![x4.clone()], vec![], Box::new(|t, v| t.channel_sum(v[0]))));
    cases.push(("normalize_map", vec![randn(&[2, 4, 4], rng)], vec![], Box::new(|t, v| t.normalize_map(v[0], 1e-6))));
    cases.push((
        "batchnorm2d",
        vec![x4.clone(), positive(&[3], rng), randn(&[3], rng)],
        vec![],
        Box::new(|t, v| Ok(t.batchnorm2d(v[0], v[1], v[2], &RunningStats::new(3), true)?.0)),
    ));
    cases.push(("max_pool2d", vec![spaced(&[2, 3, 5, 5], rng)], vec![], Box::new(|t, v| t.max_pool2d(v[0], 3, 2, 1))));
    cases.push(("avg_pool2d", vec![randn(&[2, 3, 4, 4], rng)], vec![], Box::new(|t, v| t.avg_pool2d(v[0], 2, 2))));
    cases.push(("global_avg_pool", vec![x4.clone()], vec![], Box::new(|t, v| t.global_avg_pool(v[0]))));
    cases.push((
        "dropout",
        vec![x4.clone()],
        vec![],
        Box::new(|t, v| t.dropout(v[0], 0.3, true, &mut rng_from_seed(77))),
    ));
    cases.push((
        "concat_channels",
        vec![x4, randn(&[2, 2, 5, 5], rng)],
        vec![],
        Box::new(|t, v| t.concat_channels(&[v[0], v[1]])),
    ));
    cases.push((
        "nll",
        vec![randn(&[4, 5], rng)],
        vec![],
        Box::new(|t, v| {
            let lp = t.log_softmax(v[0]);
            t.nll(lp, &[0, 3, 4, 1])
        }),
    ));
    cases
}

fn loss_cases(rng: &mut Rng) -> Vec<Case> {
    let mut cases: Vec<Case> = Vec::new();
    cases.push((
        "cross_entropy",
        vec![randn(&[4, 10], rng)],
        vec![],
        Box::new(|t, v| cross_entropy(t, v[0], &[1, 9, 0, 4])),
    ));
    // Detached teachers: the teacher reads frozen copies, the probes move only the student.
    let main = randn(&[3, 6], rng);
    let subs = [randn(&[3, 6], rng), randn(&[3, 6], rng)];
    cases.push((
        "kl_distill_logits",
        vec![main.clone(), main, subs[0].clone(), subs[1].clone()],
        vec![0],
        Box::new(|t, v| kl_distill_logits(t, &v[1..], v[0], true)),
    ));
    let student = randn(&[2, 2, 3, 3], rng);
    let maps = [student.clone(), near(&student, rng), near(&student, rng)];
    cases.push((
        "mse_feature_loss",
        vec![maps[0].clone(), maps[0].clone(), maps[1].clone(), maps[2].clone()],
        vec![0],
        Box::new(|t, v| {
            let student = normalized_map(t, v[0])?;
            let teachers = v[1..].iter().map(|&m| normalized_map(t, m)).collect::<esdmb_core::Result<Vec<_>>>()?;
            let fe = ensemble_feature_map(t, &teachers, true)?;
            mse_feature_loss(t, fe, student)
        }),
    ));
    let l0 = randn(&[2, 5], rng);
    let logits = [l0.clone(), near(&l0, rng), near(&l0, rng)];
    let f0 = randn(&[2, 2, 3, 3], rng);
    let fmaps = [f0.clone(), near(&f0, rng), near(&f0, rng)];
    cases.push((
        "total_loss",
        [logits, fmaps].concat(),
        vec![],
        Box::new(|t, v| {
            let out = BranchOutputs {
                logits: v[..3].to_vec(),
                final_maps: v[3..].to_vec(),
            };
            let w = LossWeights {
                alpha: vec![1.0, 0.7, 0.4],
                beta: 1.3,
                lambda: 0.6,
                detach_teacher: false,
            };
            Ok(total_loss(t, &out, &[2, 4], &w)?.total)
        }),
    ));
    cases
}

/// The attention modules as they sit inside a built model, differentiated with respect to their input.
fn attention_cases(rng: &mut Rng) -> Vec<Case> {
    let mut cases: Vec<Case> = Vec::new();
    let mut spec = BackboneSpec::tiny_cnn(3);
    spec.input_size = 8;
    let model = build_v1(spec, vec![0], AttentionKind::Se { reduction: 4 }, Placement::EveryBlock, &mut rng_from_seed(1)).unwrap();
    let g1 = model.block(Step::Sub(1)).clone();
    let Layer::Attention(se) = g1.layers[0].clone() else {
        panic!("g1 does not start with its attention layer");
    };
    let [c, h, w] = g1.in_shape;
    cases.push((
        "SE attention",
        vec![randn(&[2, c, h, w], rng)],
        vec![],
        Box::new(move |t, v| {
            let mut r = rng_from_seed(0);
            let mut ctx = ForwardCtx::new(t, model.store(), Mode::Eval, &mut r);
            se.forward(&mut ctx, v[0])
        }),
    ));
    cases.push((
        "CAM attention",
        vec![randn(&[2, 4, 3, 3], rng), randn(&[1], rng)],
        vec![],
        Box::new(|t, v| {
            let store = ParamStore::new();
            let mut r = rng_from_seed(0);
            let mut ctx = ForwardCtx::new(t, &store, Mode::Eval, &mut r);
            cam_forward(&mut ctx, v[0], v[1])
        }),
    ));
    let mut running = RunningStats::new(3);
    running.mean = vec![0.3, -0.2, 1.0];
    running.var = vec![0.5, 2.0, 1.3];
    cases.push((
        "batchnorm2d (eval)",
        vec![randn(&[2, 3, 4, 4], rng), positive(&[3], rng), randn(&[3], rng)],
        vec![],
        Box::new(move |t, v| Ok(t.batchnorm2d(v[0], v[1], v[2], &running, false)?.0)),
    ));
    cases
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = rng_from_seed(2024);
    let mut cases = op_cases(&mut rng);
    cases.extend(loss_cases(&mut rng));
    cases.extend(attention_cases(&mut rng));
    let mut worst = (0.0f64, "");
    for (name, inputs, check, f) in &cases {
        let step = if MULTILINEAR.contains(name) { 0.25 } else { 3e-2 };
        let report = check_gradients(inputs, check, f, PROBES, step, &mut rng).map_err(|e| format!("{name}: {e}"))?;
        ensure(report.probes.len() >= PROBES, || format!("{name}: only {} probes", report.probes.len()))?;
        let err = report.max_rel_err();
        ensure(err < FD_TOL, || format!("{name}: rel err {err:.2e} at {:?}", report.worst()))?;
        if err > worst.0 {
            worst = (err, name);
        }
    }
    within(start.elapsed(), 60)?;
    Ok(format!(
        "{} checks, {PROBES} probes per input, max rel err {:.2e} ({}), {:.1}s",
        cases.len(),
        worst.0,
        worst.1,
        start.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// 2. prune equivalence, 8. cost direction

fn random_attention(rng: &mut Rng) -> AttentionKind {
    match rng.random_range(0..4) {
        0 => AttentionKind::None,
        1 => AttentionKind::Se { reduction: 4 },
        2 => AttentionKind::Cam,
        _ => AttentionKind::Dropout { p: 0.2 },
    }
}

fn random_topology(depth: usize, rng: &mut Rng) -> Topology {
    if rng.random_bool(0.5) {
        let mut sp: Vec<usize> = (0..depth).filter(|_| rng.random_bool(0.5)).collect();
        if sp.is_empty() {
            sp.push(rng.random_range(0..depth));
        }
        Topology::V1 {
            split_points: sp,
            attention: random_attention(rng),
            placement: if rng.random_bool(0.5) { Placement::EveryBlock } else { Placement::Entry },
        }
    } else {
        let n = rng.random_range(1..=3);
        Topology::V2 {
            split_point: rng.random_range(0..depth),
            branches: (0..n).map(|_| random_attention(rng)).collect(),
        }
    }
}

fn random_models(count: usize, seed: u64) -> Vec<EnsembleModel> {
    let mut rng = rng_from_seed(seed);
    (0..count)
        .map(|i| {
            let spec = if i % 2 == 0 {
                BackboneSpec::tiny_cnn(10)
            } else {
                BackboneSpec::resnet_cifar(20, 10).unwrap()
            };
            let topology = random_topology(spec.depth(), &mut rng);
            EnsembleModel::build(ModelDesc { backbone: spec, topology }, &mut rng).unwrap()
        })
        .collect()
}

/// One training-mode pass so BN running statistics move away from their init.
fn warm_stats(model: &mut EnsembleModel, x: &Tensor) {
    let mut tape = Tape::new();
    let mut rng = rng_from_seed(5);
    let updates = {
        let mut ctx = ForwardCtx::new(&mut tape, model.store(), Mode::Train, &mut rng);
        let xv = ctx.tape.constant(x.clone());
        model.forward_all(&mut ctx, xv).unwrap();
        ctx.stat_updates
    };
    apply_stat_updates(model.store_mut(), &updates);
}

fn eval_main(model: &EnsembleModel, x: &Tensor, all: bool) -> Vec<f32> {
    let mut tape = Tape::new();
    let mut rng = rng_from_seed(0);
    let mut ctx = ForwardCtx::new(&mut tape, model.store(), Mode::Eval, &mut rng);
    let xv = ctx.tape.constant(x.clone());
    let v = if all {
        model.forward_all(&mut ctx, xv).unwrap().logits[0]
    } else {
        model.forward_main(&mut ctx, xv).unwrap()
    };
    tape.value(v).data().to_vec()
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = rng_from_seed(31);
    let mut models = random_models(20, 30);
    for (i, model) in models.iter_mut().enumerate() {
        let x = Tensor::randn(&[3, 3, 32, 32], 1.0, &mut rng);
        warm_stats(model, &x);
        let pruned = model.prune_to_main().map_err(|e| e.to_string())?;
        let full = eval_main(model, &x, true);
        let main = eval_main(&pruned, &x, false);
        let same = full.len() == main.len() && full.iter().zip(&main).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, || format!("model {i} ({:?}): pruned logits differ", model.topology()))?;
    }
    within(start.elapsed(), 60)?;
    Ok(format!("20 random v1/v2 topologies, logits bit-identical, {:.1}s", start.elapsed().as_secs_f64()))
}

fn criterion_8() -> Outcome {
    for (i, m) in random_models(20, 30).iter().enumerate() {
        let pruned = m.prune_to_main().map_err(|e| e.to_string())?;
        ensure(count_params(&pruned) < count_params(m), || format!("model {i}: pruned not smaller"))?;
    }
    let base = EnsembleModel::build(
        ModelDesc {
            backbone: BackboneSpec::densenet121(10),
            topology: Topology::V1 {
                split_points: vec![],
                attention: AttentionKind::None,
                placement: Placement::EveryBlock,
            },
        },
        &mut rng_from_seed(0),
    )
    .map_err(|e| e.to_string())?;
    ensure(count_params(&base) == count_params(&base.prune_to_main().unwrap()), || "N=1 prune changed params".into())?;

    // Main branch at the 1000-class head, the ensemble at the 45-class head with
    // parameter-free attention and all three split points.
    let main = count_params(
        &EnsembleModel::build(
            ModelDesc {
                backbone: BackboneSpec::densenet121(1000),
                topology: Topology::Baseline,
            },
            &mut rng_from_seed(0),
        )
        .map_err(|e| e.to_string())?,
    );
    let ens = count_params(
        &build_v1(
            BackboneSpec::densenet121(45),
            vec![0, 1, 2],
            AttentionKind::Dropout { p: 0.2 },
            Placement::EveryBlock,
            &mut rng_from_seed(0),
        )
        .map_err(|e| e.to_string())?,
    );
    let rel = |got: usize, want: f64| (got as f64 - want).abs() / want;
    ensure(rel(main, 7.98e6) < 0.05, || format!("main {main} not within 5% of 7.98M"))?;
    ensure(rel(ens, 14.08e6) < 0.05, || format!("ensemble {ens} not within 5% of 14.08M"))?;
    Ok(format!(
        "pruned < ensemble on 20 topologies; DenseNet121 main {main} ({:+.2}%), v1 ensemble {ens} ({:+.2}%)",
        100.0 * (main as f64 / 7.98e6 - 1.0),
        100.0 * (ens as f64 / 14.08e6 - 1.0)
    ))
}

// ---------------------------------------------------------------------------
// 3. branch-count and path laws

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = rng_from_seed(41);
    let specs = [BackboneSpec::tiny_cnn4(5), BackboneSpec::resnet_cifar(20, 5).unwrap()];
    let mut laws = 0;
    for spec in &specs {
        let m = spec.depth();
        for _ in 0..25 {
            let mut sp: Vec<usize> = (0..m).filter(|_| rng.random_bool(0.5)).collect();
            sp.sort_unstable();
            let model = build_v1(spec.clone(), sp.clone(), AttentionKind::None, Placement::EveryBlock, &mut rng)
                .map_err(|e| e.to_string())?;
            ensure(model.num_branches() == sp.len() + 1, || format!("sp {sp:?}: N = {}", model.num_branches()))?;
            laws += 1;
        }
    }
    // Routed execution against a hand-composed sequential pass along each path.
    let mut checked = 0;
    for (i, mut model) in random_models(10, 42).into_iter().enumerate() {
        let spec = model.spec().clone();
        let x = Tensor::randn(&[2, 3, spec.input_size, spec.input_size], 1.0, &mut rng);
        warm_stats(&mut model, &x);
        let mut tape = Tape::new();
        let mut r = rng_from_seed(0);
        let mut ctx = ForwardCtx::new(&mut tape, model.store(), Mode::Eval, &mut r);
        let xv = ctx.tape.constant(x.clone());
        let routed = model.forward_all(&mut ctx, xv).map_err(|e| e.to_string())?;
        for (b, path) in model.paths().iter().enumerate() {
            let mut y = ctx.tape.constant(x.clone());
            for &s in &path.steps {
                y = model.block(s).forward(&mut ctx, y).map_err(|e| e.to_string())?;
            }
            let logits = model.head(path.head).forward(&mut ctx, y).map_err(|e| e.to_string())?;
            let a = ctx.tape.value(logits).data().to_vec();
            let b_ = ctx.tape.value(routed.logits[b]).data().to_vec();
            ensure(a == b_, || format!("model {i} branch {b} differs from sequential execution"))?;
            checked += 1;
        }
    }
    within(start.elapsed(), 60)?;
    Ok(format!("{laws} random split-point sets, {checked} paths match sequential execution"))
}

// ---------------------------------------------------------------------------
// 4. normalization suite

fn criterion_4() -> Outcome {
    let mut rng = rng_from_seed(51);
    let mut tape = Tape::new();
    let mut worst_mu = 0.0f64;
    let mut worst_sigma = 0.0f64;
    for _ in 0..20 {
        let c = rng.random_range(1..6);
        let h = rng.random_range(2..9);
        let scale = rng.random_range(0.1f32..20.0);
        let fm = tape.constant(Tensor::randn(&[3, c, h, h], scale, &mut rng));
        let f = normalized_map(&mut tape, fm).map_err(|e| e.to_string())?;
        for row in tape.value(f).data().chunks(h * h) {
            let n = row.len() as f64;
            let mu = row.iter().map(|v| *v as f64).sum::<f64>() / n;
            let sigma = (row.iter().map(|v| (*v as f64 - mu).powi(2)).sum::<f64>() / n).sqrt();
            worst_mu = worst_mu.max(mu.abs());
            worst_sigma = worst_sigma.max((sigma - 1.0).abs());
        }
    }
    ensure(worst_mu < 1e-5, || format!("|mean| {worst_mu:.2e}"))?;
    ensure(worst_sigma < 1e-3, || format!("|std - 1| {worst_sigma:.2e}"))?;

    let constant = tape.constant(Tensor::full(&[2, 3, 4, 4], 2.5));
    let z = normalized_map(&mut tape, constant).map_err(|e| e.to_string())?;
    ensure(tape.value(z).data().iter().all(|v| *v == 0.0), || "constant map not zero".into())?;

    let m = tape.constant(Tensor::randn(&[2, 4, 4], 1.0, &mut rng));
    let fe = ensemble_feature_map(&mut tape, &[m, m, m], true).map_err(|e| e.to_string())?;
    let diff = tape
        .value(fe)
        .data()
        .iter()
        .zip(tape.value(m).data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    ensure(diff < 1e-6, || format!("ensemble of identical maps differs by {diff:.2e}"))?;
    Ok(format!("max |mean| {worst_mu:.1e}, max |std-1| {worst_sigma:.1e}, constant map -> 0, identical ensemble ok"))
}

// ---------------------------------------------------------------------------
// 5. distillation identities

fn criterion_5() -> Outcome {
    let mut rng = rng_from_seed(61);
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::randn(&[4, 10], 3.0, &mut rng));
    let kl = kl_distill_logits(&mut tape, &[l, l, l], l, true).map_err(|e| e.to_string())?;
    let klv = tape.value(kl).data()[0];
    ensure(klv.abs() < 1e-6, || format!("KL of agreeing branches {klv:e}"))?;

    for m in [10usize, 21, 30, 45] {
        let u = tape.constant(Tensor::full(&[3, m], 0.37));
        let ce = cross_entropy(&mut tape, u, &[0, m - 1, m / 2]).map_err(|e| e.to_string())?;
        let got = tape.value(ce).data()[0] as f64;
        ensure((got - (m as f64).ln()).abs() < 1e-4, || format!("uniform CE for M={m}: {got}"))?;
    }

    let mut worst = 0.0f64;
    for trial in 0..10 {
        let n = 1 + trial % 4;
        let logits: Vec<Var> = (0..n).map(|_| tape.constant(Tensor::randn(&[5, 7], 2.0, &mut rng))).collect();
        let maps: Vec<Var> = (0..n).map(|_| tape.constant(Tensor::randn(&[5, 3, 4, 4], 1.0, &mut rng))).collect();
        let w = LossWeights {
            alpha: (0..n).map(|_| rng.random_range(0.0f32..2.0)).collect(),
            beta: rng.random_range(0.0f32..2.0),
            lambda: rng.random_range(0.0f32..2.0),
            detach_teacher: true,
        };
        let out = BranchOutputs { logits, final_maps: maps };
        let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..7)).collect();
        let bundle = total_loss(&mut tape, &out, &labels, &w).map_err(|e| e.to_string())?;
        let v = bundle.values(&tape);
        let recomposed: f64 = v.ce.iter().zip(&w.alpha).map(|(c, a)| (*c as f64) * (*a as f64)).sum::<f64>()
            + w.beta as f64 * v.kl as f64
            + w.lambda as f64 * v.mse as f64;
        let err = (recomposed - v.total as f64).abs() / (1.0 + v.total.abs() as f64);
        worst = worst.max(err);
        ensure(v.kl >= -1e-6 && v.mse >= 0.0 && v.ce.iter().all(|c| *c >= 0.0), || "negative loss term".into())?;
    }
    ensure(worst < 1e-6, || format!("total recomposition error {worst:.2e}"))?;
    let one_hot_limit = {
        let teacher = tape.constant(Tensor::new(vec![1, 2], vec![40.0, -40.0]).unwrap());
        let student = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let k = esdmb_core::distill::kl_to_teacher(&mut tape, teacher, student).map_err(|e| e.to_string())?;
        tape.value(k).data()[0] as f64
    };
    ensure((one_hot_limit - LN_2).abs() < 1e-3, || format!("one-hot KL {one_hot_limit}"))?;
    Ok(format!("|KL| {klv:.1e}; CE = ln M for M in 10/21/30/45; recomposition error {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 6. degeneration

/// A plain classifier trainer with no branch machinery at all.
fn plain_training(spec: &BackboneSpec, data: &Dataset, cfg: &TrainConfig) -> (Vec<f32>, Vec<(String, Tensor)>) {
    let mut store = ParamStore::new();
    let net = build_backbone(spec, "f", "fc", &mut store, &mut rng_from_seed(cfg.seed)).unwrap();
    let mut sgd = SgdState::new(cfg.base_lr, cfg.momentum, cfg.weight_decay).unwrap();
    let mut rng = training_rng(cfg.seed);
    let mut losses = Vec::new();
    for epoch in 0..cfg.epochs {
        sgd.learning_rate = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = data.batch(chunk, None).unwrap();
            let mut tape = Tape::new();
            let (loss, updates) = {
                let mut ctx = ForwardCtx::new(&mut tape, &store, Mode::Train, &mut rng);
                let xv = ctx.tape.constant(x);
                let (logits, _) = net.forward(&mut ctx, xv).unwrap();
                let loss = cross_entropy(ctx.tape, logits, &y).unwrap();
                (loss, ctx.stat_updates)
            };
            losses.push(tape.value(loss).data()[0]);
            tape.backward(loss).unwrap();
            tape.accumulate_param_grads(&mut store).unwrap();
            sgd_step(&mut store, &mut sgd).unwrap();
            apply_stat_updates(&mut store, &updates);
        }
    }
    (losses, store.named_tensors())
}

fn criterion_6() -> Outcome {
    let data = gen_synthetic(&SyntheticSpec {
        num_classes: 3,
        per_class: 8,
        size: 16,
        channels: 3,
        noise: 0.3,
        seed: 3,
    })
    .unwrap();
    let mut spec = BackboneSpec::tiny_cnn(3);
    spec.input_size = 16;
    let cfg = TrainConfig {
        batch_size: 5,
        base_lr: 0.05,
        lr_drop_epochs: vec![2],
        seed: 11,
        loss: LossSettings {
            beta: 0.0,
            lambda: 0.0,
            ..LossSettings::default()
        },
        ..TrainConfig::new(3)
    };
    let (plain_losses, plain_params) = plain_training(&spec, &data, &cfg);

    let mut ensemble_losses = Vec::new();
    let mut model = build_v1(spec, vec![], AttentionKind::Se { reduction: 4 }, Placement::EveryBlock, &mut rng_from_seed(cfg.seed))
        .map_err(|e| e.to_string())?;
    ensure(model.num_branches() == 1, || "expected one branch".into())?;
    let history = train(&mut model, &data, None, &cfg).map_err(|e| e.to_string())?;
    ensemble_losses.extend(history.iter().map(|m| m.total));

    // Per-epoch loss means from the plain run's per-step losses, weighted as the trainer does.
    let steps = data.len().div_ceil(cfg.batch_size);
    let sizes: Vec<usize> = (0..steps).map(|s| cfg.batch_size.min(data.len() - s * cfg.batch_size)).collect();
    let plain_epoch: Vec<f32> = plain_losses
        .chunks(steps)
        .map(|c| (c.iter().zip(&sizes).map(|(l, n)| *l as f64 * *n as f64).sum::<f64>() / data.len() as f64) as f32)
        .collect();
    ensure(plain_epoch == ensemble_losses, || format!("losses differ: {plain_epoch:?} vs {ensemble_losses:?}"))?;
    ensure(plain_params == model.store().named_tensors(), || "final parameters differ".into())?;
    Ok(format!("3 epochs, {} steps, parameters and losses bit-identical", plain_losses.len()))
}

// ---------------------------------------------------------------------------
// 7. CIFAR-10 direction of effect, 9. determinism

fn resnet20_run(desc: ModelDesc, train_set: &Dataset, test: &Dataset, cfg: &TrainConfig) -> esdmb_core::Result<Vec<esdmb_core::train::EpochMetrics>> {
    let mut model = EnsembleModel::build(desc, &mut rng_from_seed(cfg.seed))?;
    train(&mut model, train_set, Some(test), cfg)
}

fn cifar_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        lr_drop_epochs: if epochs >= 40 { vec![20, 30] } else { vec![] },
        augment_pad: 4,
        ..TrainConfig::new(epochs)
    }
}

fn v1_default(num_classes: usize) -> ModelDesc {
    ModelDesc {
        backbone: BackboneSpec::resnet_cifar(20, num_classes).unwrap(),
        topology: Topology::V1 {
            split_points: vec![0, 1, 2],
            attention: AttentionKind::Se { reduction: 4 },
            placement: Placement::EveryBlock,
        },
    }
}

fn criterion_7() -> Option<Outcome> {
    let dir = std::env::var_os("ESDMB_CIFAR10_DIR")?;
    let run = || -> Result<String, String> {
        let (train_set, test) = cifar::load_cifar10(Path::new(&dir), cifar::MEAN, cifar::STD, (Some(500), Some(100)))
            .map_err(|e| e.to_string())?;
        let cfg = cifar_config(40);
        let final_acc = |desc: ModelDesc, seed: u64| -> esdmb_core::Result<(f32, f32)> {
            let h = resnet20_run(desc, &train_set, &test, &TrainConfig { seed, ..cfg.clone() })?;
            let last = h.last().expect("40 epochs");
            Ok((last.main_test_acc, last.ensemble_test_acc))
        };
        let base = run_repeated(0, 3, |s| {
            let desc = ModelDesc {
                backbone: BackboneSpec::resnet_cifar(20, 10).unwrap(),
                topology: Topology::Baseline,
            };
            Ok(final_acc(desc, s)?.0)
        })
        .map_err(|e| e.to_string())?;
        let mut ens = Vec::new();
        let main = run_repeated(0, 3, |s| {
            let (m, e) = final_acc(v1_default(10), s)?;
            ens.push(e);
            Ok(m)
        })
        .map_err(|e| e.to_string())?;
        let ens_mean = ens.iter().map(|v| *v as f64).sum::<f64>() / ens.len() as f64;
        let gain = 100.0 * (main.mean - base.mean);
        let detail = format!(
            "baseline {:.2}±{:.2}%, v1 main {:.2}±{:.2}%, v1 ensemble {:.2}%",
            100.0 * base.mean,
            100.0 * base.std,
            100.0 * main.mean,
            100.0 * main.std,
            100.0 * ens_mean
        );
        ensure(gain >= 0.5, || format!("main gain {gain:.2} pts < 0.5: {detail}"))?;
        ensure(100.0 * (ens_mean - main.mean) >= -0.3, || format!("ensemble below main by > 0.3 pts: {detail}"))?;
        Ok(detail)
    };
    Some(run())
}

/// Random images in the CIFAR-10 binary layout, parsed through the real loader.
fn cifar_fixture(dir: &Path) -> (Dataset, Dataset) {
    let mut rng = rng_from_seed(91);
    let mut records = |n: usize| {
        let mut out = Vec::with_capacity(n * RECORD);
        for i in 0..n {
            out.push((i % 10) as u8);
            out.extend((0..PIXELS).map(|_| rng.random::<u8>()));
        }
        out
    };
    std::fs::write(dir.join("data_batch_1.bin"), records(60)).unwrap();
    std::fs::write(dir.join("test_batch.bin"), records(20)).unwrap();
    cifar::load_cifar10(dir, cifar::MEAN, cifar::STD, (Some(5), Some(2))).unwrap()
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (train_set, test) = cifar_fixture(dir.path());
    let cfg = TrainConfig {
        batch_size: 16,
        ..cifar_config(2)
    };
    let mut files = Vec::new();
    for run in 0..2 {
        let history = resnet20_run(v1_default(10), &train_set, &test, &cfg).map_err(|e| e.to_string())?;
        let path = dir.path().join(format!("metrics{run}.csv"));
        append_metrics(&path, &history).map_err(|e| e.to_string())?;
        files.push(std::fs::read(&path).map_err(|e| e.to_string())?);
    }
    ensure(files[0] == files[1], || "metrics files differ".into())?;
    Ok(format!(
        "ResNet20 v1 on a CIFAR-format fixture, 2 epochs with augmentation, {} byte metrics files identical",
        files[0].len()
    ))
}

fn main() -> ExitCode {
    let criteria: Vec<(u32, &str, Box<dyn Fn() -> Option<Outcome>>)> = vec![
        (1, "gradient suite", Box::new(|| Some(criterion_1()))),
        (2, "prune equivalence", Box::new(|| Some(criterion_2()))),
        (3, "branch-count and path laws", Box::new(|| Some(criterion_3()))),
        (4, "normalization suite", Box::new(|| Some(criterion_4()))),
        (5, "distillation identities", Box::new(|| Some(criterion_5()))),
        (6, "degeneration equivalence", Box::new(|| Some(criterion_6()))),
        (7, "CIFAR-10 direction of effect", Box::new(criterion_7)),
        (8, "cost accounting", Box::new(|| Some(criterion_8()))),
        (9, "determinism", Box::new(|| Some(criterion_9()))),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(run))
            .unwrap_or_else(|_| Some(Err("panicked".into())));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Some(Ok(detail)) => println!("PASS criterion {id} ({name}): {detail} [{secs:.1}s]"),
            Some(Err(why)) => {
                failed += 1;
                println!("FAIL criterion {id} ({name}): {why} [{secs:.1}s]");
            }
            None => println!("SKIP criterion {id} ({name}): not run, set ESDMB_CIFAR10_DIR to the CIFAR-10 binary batches"),
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
