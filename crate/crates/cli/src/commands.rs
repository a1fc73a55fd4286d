use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use eedn_core::backbone::{load_activations, save_activations, synth_generate, DatasetSplit};
use eedn_core::evaluation::{
    evaluate_model, exit_predictions, fit_temperatures, frozen_im_ablation, lambda_sweep,
    select_threshold_grid, threshold_gm_baseline, warm_start, write_curve, CurvePoint, ExitPolicy,
    DEFAULT_LAMBDAS,
};
use eedn_core::trainer::{bilevel_train, init_model, warmup, EpochLog};
use eedn_core::uncertainty::{conformal_thresholds, CalibrationArtifact, CalibrationResult};
use eedn_core::{load_checkpoint, save_checkpoint, CostTable, ExitModel};
use log::info;
use serde::Serialize;

use crate::config::{DatasetSource, RunConfig};
use crate::Invalid;

const THRESHOLD_POINTS: usize = 12;

fn load_data(cfg: &RunConfig) -> Result<(DatasetSplit, CostTable)> {
    let data = match &cfg.dataset {
        DatasetSource::Synth(s) => synth_generate(s)?,
        DatasetSource::Manifest(p) => load_activations(p)
            .with_context(|| format!("loading activations from {}", p.display()))?,
    };
    let costs = cfg.model.cost_table(&data.meta)?;
    Ok((data, costs))
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    let dir = cfg.output_dir.as_path();
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn append_log(log: &mut impl Write, entries: &[EpochLog]) -> Result<()> {
    for e in entries {
        serde_json::to_writer(&mut *log, e)?;
        log.write_all(b"\n")?;
    }
    log.flush()?;
    Ok(())
}

fn load_model(
    cfg: &RunConfig,
    checkpoint: Option<PathBuf>,
    data: &DatasetSplit,
) -> Result<ExitModel> {
    let path = checkpoint.unwrap_or_else(|| cfg.output_dir.join("checkpoint"));
    let model = load_checkpoint(&path)?;
    if model.dims() != data.meta.dims || model.classes() != data.meta.classes {
        return Err(Invalid(format!(
            "checkpoint {} has dims {:?} and {} classes; the dataset has {:?} and {}",
            path.display(),
            model.dims(),
            model.classes(),
            data.meta.dims,
            data.meta.classes
        ))
        .into());
    }
    Ok(model)
}

fn print_point(p: &CurvePoint) {
    println!(
        "accuracy {:.4}  ic_norm {:.4}  ece {:.4}  coverage {:.4}  inefficiency {:.3}",
        p.accuracy, p.ic_norm, p.ece, p.coverage, p.inefficiency
    );
}

pub fn gen(cfg: &RunConfig) -> Result<()> {
    let DatasetSource::Synth(synth) = &cfg.dataset else {
        return Err(Invalid("gen needs a `dataset.synth` section".into()).into());
    };
    let data = synth_generate(synth)?;
    let manifest = save_activations(&data, &out_dir(cfg)?.join("data"))?;
    println!("{}", manifest.display());
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let (data, costs) = load_data(cfg)?;
    let dir = out_dir(cfg)?;
    write_json(&dir.join("config.json"), cfg)?;
    write_json(&dir.join("costs.json"), &costs)?;
    let log_path = dir.join("train_log.jsonl");
    let mut log = BufWriter::new(
        File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
    );

    let mut model = init_model(&data, &cfg.train);
    let warm_log = warmup(&mut model, &data, &costs, &cfg.train)?;
    append_log(&mut log, &warm_log)?;
    info!("warm-up done after {} epochs", warm_log.len());
    let outcome = bilevel_train(model, &data, &costs, &cfg.train)?;
    append_log(&mut log, &outcome.log)?;

    let manifest = save_checkpoint(&outcome.model, &dir.join("checkpoint"))?;
    if let Some(last) = outcome.log.last() {
        println!(
            "epoch {}  val_acc {:.4}  avg_ic_norm {:.4}",
            last.epoch, last.val_acc, last.avg_ic_norm
        );
    }
    println!("{}", manifest.display());
    Ok(())
}

pub fn eval(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> Result<()> {
    let (data, costs) = load_data(cfg)?;
    let model = load_model(cfg, checkpoint, &data)?;
    let point = evaluate_model(&model, &data, &costs, cfg.train.lambda, &cfg.eval())?;
    write_json(&out_dir(cfg)?.join("eval.json"), &point)?;
    print_point(&point);
    println!("gate  count  fraction  acc(exited)  acc(all)");
    for g in &point.usage.gates {
        let exited = g
            .exited_accuracy
            .map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
        println!(
            "{:>4}  {:>5}  {:>8.4}  {:>11}  {:>8.4}",
            g.layer, g.count, g.fraction, exited, g.full_accuracy
        );
    }
    Ok(())
}

pub fn calibrate(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> Result<()> {
    let (data, _) = load_data(cfg)?;
    let model = load_model(cfg, checkpoint, &data)?;
    let eval = cfg.eval();
    let temps = if eval.temperature_scaling {
        fit_temperatures(&model, &data.val2)?
    } else {
        vec![CalibrationResult::default(); model.layers()]
    };
    let preds = exit_predictions(
        &model,
        &temps,
        &data.validation(),
        ExitPolicy::Gates(eval.conformal_exit),
        eval.seed,
    );
    let cal = conformal_thresholds(&preds, eval.strategy, eval.alpha)?;
    let artifact = CalibrationArtifact::new(&cal, &temps);
    write_json(&out_dir(cfg)?.join("calibration.json"), &artifact)?;
    println!("{}", serde_json::to_string_pretty(&artifact)?);
    Ok(())
}

pub fn sweep(cfg: &RunConfig, lambdas: Option<Vec<f64>>) -> Result<()> {
    let lambdas = lambdas.unwrap_or_else(|| DEFAULT_LAMBDAS.to_vec());
    if let Some(bad) = lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(Invalid(format!("--lambdas: {bad} is not a finite value >= 0")).into());
    }
    let (data, costs) = load_data(cfg)?;
    let dir = out_dir(cfg)?;
    let runs = lambda_sweep(&cfg.train, &data, &costs, &lambdas, &cfg.eval())?;
    for run in &runs {
        let sub = dir
            .join("sweep")
            .join(format!("lambda_{}", run.point.lambda));
        save_checkpoint(&run.outcome.model, &sub.join("checkpoint"))?;
        let mut log = BufWriter::new(File::create(sub.join("train_log.jsonl"))?);
        append_log(&mut log, &run.outcome.log)?;
    }
    let points: Vec<CurvePoint> = runs.into_iter().map(|r| r.point).collect();
    write_curve(&points, dir, "curve")?;
    print!("{}", eedn_core::evaluation::curve_csv(&points));
    Ok(())
}

pub fn ablate(cfg: &RunConfig) -> Result<()> {
    let (data, costs) = load_data(cfg)?;
    let dir = out_dir(cfg)?;
    let eval = cfg.eval();
    let warm = warm_start(&data, &costs, &cfg.train)?;
    let grid = select_threshold_grid(&warm, &data.val1, THRESHOLD_POINTS);
    let threshold = threshold_gm_baseline(&warm, &grid, &data, &costs, &eval)?;
    write_curve(&threshold, dir, "ablation_threshold")?;
    let (frozen, _) = frozen_im_ablation(&warm, &cfg.train, &data, &costs, &eval)?;
    write_curve(std::slice::from_ref(&frozen), dir, "ablation_frozen")?;

    println!("threshold  accuracy  ic_norm");
    for p in &threshold {
        println!(
            "{:>9.4}  {:>8.4}  {:>7.4}",
            p.threshold.unwrap_or(f64::NAN),
            p.accuracy,
            p.ic_norm
        );
    }
    print!("frozen IMs (lambda {}): ", cfg.train.lambda);
    print_point(&frozen);
    Ok(())
}
