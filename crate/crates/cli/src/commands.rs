use std::path::{Path, PathBuf};

use esdmb_core::branch::EnsembleModel;
use esdmb_core::io::checkpoint::Checkpoint;
use esdmb_core::io::config::RunConfig;
use esdmb_core::io::metrics::append_metrics;
use esdmb_core::io::write_atomic;
use esdmb_core::tensor::rng_from_seed;
use esdmb_core::train::{cost_report, evaluate, CostReport, Output, Trainer};
use esdmb_core::{Error, Result};

fn config_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

pub fn train(config_path: &Path, output: Option<PathBuf>, resume: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let base = config_dir(config_path);
    let out = output.unwrap_or_else(|| base.join(&cfg.output_dir));
    let (train_set, test_set) = cfg.data.load(base)?;
    let desc = cfg.model_desc()?;

    let (mut model, mut trainer) = match resume {
        None => {
            let model = EnsembleModel::build(desc, &mut rng_from_seed(cfg.train.seed))?;
            let trainer = Trainer::new(&model, cfg.train.clone())?;
            (model, trainer)
        }
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.model != desc {
                return Err(Error::Checkpoint(format!("{} was written for a different model", path.display())));
            }
            let model = ck.to_model()?;
            let mut trainer = Trainer::new(&model, cfg.train.clone())?;
            let missing = || Error::Checkpoint(format!("{} holds no training state", path.display()));
            trainer.sgd = ck.sgd_state(&model)?.ok_or_else(missing)?;
            trainer.rng = ck.rng.as_ref().ok_or_else(missing)?.restore()?;
            trainer.epoch = ck.epoch;
            (model, trainer)
        }
    };

    std::fs::create_dir_all(&out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    write_atomic(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    let metrics = out.join("metrics.csv");
    if resume.is_none() {
        write_atomic(&metrics, b"")?;
        append_metrics(&metrics, &[])?;
    }
    log::info!(
        "{} parameters, {} branches, {} train / {} test samples",
        model.store().num_elements(),
        model.num_branches(),
        train_set.len(),
        test_set.len()
    );

    let mut last = None;
    while !trainer.finished() {
        let m = trainer.run_epoch(&mut model, &train_set, Some(&test_set))?;
        log::info!(
            "epoch {} lr {:.4} loss {:.4} (ce {:.4} kl {:.4} mse {:.4}) train {:.4} main {:.4} ensemble {:.4}",
            m.epoch,
            m.lr,
            m.total,
            m.ce_sum,
            m.kl,
            m.mse,
            m.train_acc,
            m.main_test_acc,
            m.ensemble_test_acc
        );
        append_metrics(&metrics, std::slice::from_ref(&m))?;
        Checkpoint::of_training(&model, &trainer.sgd, &trainer.rng, trainer.epoch).save(&out.join("checkpoint.bin"))?;
        last = Some(m);
    }
    Checkpoint::of_model(&model, trainer.epoch).save(&out.join("final.bin"))?;
    if let Some(m) = last {
        println!("main_test_acc {:.4}", m.main_test_acc);
        println!("ensemble_test_acc {:.4}", m.ensemble_test_acc);
    }
    println!("wrote {}", out.display());
    Ok(())
}

pub fn eval(
    checkpoint: &Path,
    config_path: &Path,
    output: Output,
    confusion: Option<PathBuf>,
    batch_size: usize,
) -> Result<()> {
    let model = Checkpoint::load(checkpoint)?.to_model()?;
    let cfg = RunConfig::load(config_path)?;
    let (_, test) = cfg.data.load(config_dir(config_path))?;
    let result = evaluate(&model, &test, output, batch_size)?;
    let label = match output {
        Output::Main => "main",
        Output::Ensemble => "ensemble",
    };
    let path = confusion.unwrap_or_else(|| {
        let mut name = checkpoint.file_name().unwrap_or_default().to_os_string();
        name.push(format!(".confusion-{label}.csv"));
        checkpoint.with_file_name(name)
    });
    write_atomic(&path, result.confusion.to_csv().as_bytes())?;
    println!("{label} accuracy {:.4} ({}/{})", result.accuracy, result.confusion.trace(), result.confusion.total());
    println!("confusion matrix {}", path.display());
    Ok(())
}

pub fn prune(checkpoint: &Path, output: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.to_model()?;
    if model.num_branches() == 1 {
        log::warn!("{} has a single branch; pruning leaves it unchanged", checkpoint.display());
    }
    let pruned = model.prune_to_main()?;
    Checkpoint::of_model(&pruned, ck.epoch).save(output)?;
    let (before, after) = (model.store().num_elements(), pruned.store().num_elements());
    println!("params {before} -> {after} (removed {})", before - after);
    Ok(())
}

fn load_model(checkpoint: Option<PathBuf>, config: Option<PathBuf>) -> Result<EnsembleModel> {
    match (checkpoint, config) {
        (Some(ck), _) => Checkpoint::load(&ck)?.to_model(),
        (None, Some(cfg)) => {
            let cfg = RunConfig::load(&cfg)?;
            EnsembleModel::build(cfg.model_desc()?, &mut rng_from_seed(cfg.train.seed))
        }
        (None, None) => Err(Error::Usage("give --checkpoint or --config".into())),
    }
}

fn print_report(title: &str, r: &CostReport) {
    println!("{title}: params {} flops {}", r.params, r.flops);
    for b in &r.branches {
        println!("  branch {}: params {} flops {}", b.name, b.params, b.flops);
    }
}

pub fn cost(checkpoint: Option<PathBuf>, config: Option<PathBuf>, json: bool) -> Result<()> {
    let model = load_model(checkpoint, config)?;
    let ensemble = cost_report(&model);
    let pruned = cost_report(&model.prune_to_main()?);
    if json {
        let v = serde_json::json!({ "ensemble": ensemble, "pruned": pruned });
        println!("{v}");
    } else {
        println!("flops are per sample, counting a multiply-accumulate as 2");
        print_report("ensemble", &ensemble);
        print_report("pruned", &pruned);
    }
    Ok(())
}

pub fn inspect(checkpoint: Option<PathBuf>, config: Option<PathBuf>) -> Result<()> {
    let model = load_model(checkpoint, config)?;
    let topology = serde_json::to_string(model.topology()).expect("topology serializes");
    println!("topology {topology}");
    println!("branches {}", model.num_branches());
    for b in 0..model.num_branches() {
        println!("path {b}: {}", model.path_names(b).join(" "));
    }
    Ok(())
}
