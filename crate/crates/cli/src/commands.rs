//! Implementation of the subcommands.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use layerseg::checkpoint::Checkpoint;
use layerseg::dataset::{read_dataset, write_dataset, Dataset, MANIFEST_FILE};
use layerseg::nn::Mode;
use layerseg::synth::generate_corpus;
use layerseg::train::{
    evaluate_with_predictions, predict, subset_labels, EvalReport, Event, StepRecord, Trainer,
};
use layerseg::{FlushDenormals, SurfaceCurveSet};

use crate::config::{Overrides, RunConfig};
use crate::error::{CliError, IoContext, Result};
use crate::manifest::{unix_now, write_atomic, RunManifest};
use crate::render;

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const VALIDATION_LOG: &str = "validation.csv";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const PRIORS_FILE: &str = "priors.toml";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";
pub const OVERLAY_DIR: &str = "overlays";
pub const SURFACES_DIR: &str = "surfaces";

/// Options shared by every subcommand.
#[derive(Clone, Debug)]
pub struct Common {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub resume: bool,
    pub overrides: Overrides,
    /// Raw arguments, recorded in the run manifest.
    pub argv: Vec<String>,
}

impl Common {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self {
            config: None,
            out: out.into(),
            resume: false,
            overrides: Overrides::default(),
            argv: Vec::new(),
        }
    }

    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load_or_default(self.config.as_deref())?;
        cfg.apply(&self.overrides);
        Ok(cfg)
    }

    fn manifest(
        &self,
        command: &str,
        cfg: &RunConfig,
        seed: u64,
        inputs: &[&Path],
    ) -> Result<RunManifest> {
        Ok(RunManifest {
            command: command.into(),
            args: self.argv.clone(),
            config: serde_json::to_value(cfg)?,
            seed,
            started_unix: unix_now(),
            finished_unix: 0.0,
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs: Vec::new(),
        })
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).at(dir)
}

/// `dir` itself if it holds a dataset manifest, else `dir/<split>` if that does.
pub fn resolve_split(dir: &Path, split: &str) -> Option<PathBuf> {
    if dir.join(MANIFEST_FILE).is_file() {
        return Some(dir.to_path_buf());
    }
    let sub = dir.join(split);
    sub.join(MANIFEST_FILE).is_file().then_some(sub)
}

fn load_split(dir: &Path, split: &str) -> Result<(PathBuf, Dataset)> {
    let path = resolve_split(dir, split).ok_or_else(|| {
        CliError::Usage(format!(
            "{} holds neither a dataset nor a `{split}` split",
            dir.display()
        ))
    })?;
    let ds = read_dataset(&path)?;
    Ok((path, ds))
}

/// Generates the train, validation and test splits under `out`.
pub fn synth(common: &Common) -> Result<RunManifest> {
    let cfg = common.run_config()?;
    let manifest = common.manifest("synth", &cfg, cfg.synth.seed, &[])?;
    let [train, val, test] = generate_corpus(&cfg.synth)?;
    create_dir(&common.out)?;
    for (name, ds) in [("train", &train), ("val", &val), ("test", &test)] {
        write_dataset(ds, &common.out.join(name))?;
        log::info!("{name}: {} samples, {} labeled", ds.len(), ds.num_labeled());
    }
    write_atomic(
        &common.out.join(CONFIG_SNAPSHOT),
        cfg.to_toml_string().as_bytes(),
    )?;
    manifest.finish(&common.out)
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: u64,
    pub best_step: Option<u64>,
    pub best_rmse: Option<f64>,
    pub manifest: RunManifest,
}

fn validation_header(surfaces: usize) -> String {
    let mut cols = vec![
        "step".to_string(),
        "mean_rmse".into(),
        "std_rmse".into(),
        "recon_mae".into(),
        "ordering_violations".into(),
    ];
    cols.extend((1..=surfaces).map(|s| format!("rmse_surface_{s}")));
    cols.join(",")
}

fn validation_row(step: u64, r: &EvalReport) -> String {
    let mut cols = vec![
        step.to_string(),
        r.mean_rmse.to_string(),
        r.std_rmse.to_string(),
        r.recon_mae.to_string(),
        r.ordering_violations.to_string(),
    ];
    cols.extend(r.per_surface_rmse.iter().map(|v| v.to_string()));
    cols.join(",")
}

/// Drops log rows written after `step`; the header is kept.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let text = fs::read_to_string(path).at(path)?;
    let mut kept = String::new();
    for (k, line) in text.lines().enumerate() {
        let row_step = line.split(',').next().and_then(|f| f.parse::<u64>().ok());
        if k == 0 || row_step.is_some_and(|s| s <= step) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    write_atomic(path, kept.as_bytes())
}

fn open_log(path: &Path, header: &str, append: bool) -> Result<BufWriter<File>> {
    if append {
        let f = OpenOptions::new().append(true).open(path).at(path)?;
        return Ok(BufWriter::new(f));
    }
    let mut w = BufWriter::new(File::create(path).at(path)?);
    writeln!(w, "{header}").at(path)?;
    Ok(w)
}

/// Trains on `data` (a dataset or a corpus root), validating on `val` or the
/// corpus `val` split. Writes logs, `last.ckpt`, `best.ckpt` and a manifest.
pub fn train(common: &Common, data: &Path, val: Option<&Path>) -> Result<TrainSummary> {
    let cfg = common.run_config()?;
    let (train_dir, mut train_ds) = load_split(data, "train")?;
    let (val_dir, val_ds) = match val {
        Some(v) => load_split(v, "val")?,
        None => load_split(data, "val").map_err(|_| {
            CliError::Usage(format!(
                "no validation split under {}; pass --val",
                data.display()
            ))
        })?,
    };
    if let Some(f) = cfg.labeled_subset {
        train_ds = subset_labels(&train_ds, f, cfg.train.seed)?;
        log::info!(
            "kept labels on {} of {} samples",
            train_ds.num_labeled(),
            train_ds.len()
        );
    }
    let out = &common.out;
    let last_path = out.join(LAST_CHECKPOINT);
    let best_path = out.join(BEST_CHECKPOINT);
    let log_path = out.join(TRAIN_LOG);
    let val_path = out.join(VALIDATION_LOG);

    let mut trainer = if common.resume {
        let ck = Checkpoint::load(&last_path)?;
        let trainer = Trainer::resume(cfg.train.clone(), &train_ds, &ck)?;
        truncate_log(&log_path, ck.header.step)?;
        truncate_log(&val_path, ck.header.step)?;
        log::info!("resuming at step {}", ck.header.step);
        trainer
    } else {
        if last_path.exists() {
            return Err(CliError::Usage(format!(
                "{} already holds a run; pass --resume to continue it",
                out.display()
            )));
        }
        create_dir(out)?;
        Trainer::new(cfg.train.clone(), &train_ds)?
    };
    let manifest = common.manifest("train", &cfg, cfg.train.seed, &[&train_dir, &val_dir])?;
    write_atomic(&out.join(CONFIG_SNAPSHOT), cfg.to_toml_string().as_bytes())?;
    trainer.priors().save(&out.join(PRIORS_FILE))?;

    let mut log = open_log(&log_path, &StepRecord::HEADER.join(","), common.resume)?;
    let mut val_log = open_log(
        &val_path,
        &validation_header(val_ds.surfaces),
        common.resume,
    )?;
    let total = cfg.train.iterations;
    let outcome = trainer.fit(Some(&val_ds), |event| {
        match event {
            Event::Step(r) => {
                writeln!(log, "{}", r.csv_row())?;
                log::debug!("step {}/{total} loss {:.4}", r.step, r.loss.total);
            }
            Event::Validation {
                step,
                report,
                improved,
                checkpoint,
            } => {
                writeln!(val_log, "{}", validation_row(step, report))?;
                log.flush()?;
                val_log.flush()?;
                checkpoint.save(&last_path)?;
                if improved {
                    checkpoint.save(&best_path)?;
                }
                log::info!(
                    "step {step}/{total}: val RMSE {:.3} px, recon MAE {:.3}{}",
                    report.mean_rmse,
                    report.recon_mae,
                    if improved { " (best)" } else { "" }
                );
            }
        }
        Ok(())
    })?;
    log.flush().at(&log_path)?;
    val_log.flush().at(&val_path)?;
    drop((log, val_log));
    let manifest = manifest.finish(out)?;
    Ok(TrainSummary {
        steps: trainer.step(),
        best_step: outcome.best.map(|b| b.step),
        best_rmse: outcome.best.map(|b| b.mean_rmse),
        manifest,
    })
}

fn load_model(checkpoint: &Path) -> Result<layerseg::nn::LayerNet> {
    Ok(Checkpoint::load(checkpoint)?.model()?)
}

fn safe_name(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Report table: one row per surface and a final `mean` row.
pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("surface,rmse_px,std_px\n");
    for (s, (m, sd)) in report
        .per_surface_rmse
        .iter()
        .zip(&report.per_surface_std)
        .enumerate()
    {
        out.push_str(&format!("{},{m},{sd}\n", s + 1));
    }
    out.push_str(&format!("mean,{},{}\n", report.mean_rmse, report.std_rmse));
    out
}

/// Evaluates a checkpoint on a labeled dataset, writing the report and one
/// overlay image per sample.
pub fn eval(common: &Common, checkpoint: &Path, data: &Path) -> Result<EvalReport> {
    let cfg = common.run_config()?;
    let model = load_model(checkpoint)?;
    let (data_dir, ds) = load_split(data, "test")?;
    let manifest = common.manifest(
        "eval",
        &cfg,
        model_seed(checkpoint)?,
        &[checkpoint, &data_dir],
    )?;
    let (report, predictions) = evaluate_with_predictions(&model, &ds)?;
    let out = &common.out;
    let overlays = out.join(OVERLAY_DIR);
    create_dir(&overlays)?;
    write_atomic(&out.join(REPORT_CSV), report_csv(&report).as_bytes())?;
    write_atomic(
        &out.join(REPORT_JSON),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    for (k, (sample, pred)) in ds.samples.iter().zip(&predictions).enumerate() {
        let path = overlays.join(format!("{k:05}_{}.png", safe_name(&sample.id)));
        render::save_overlay(
            &path,
            &sample.image,
            ds.width,
            ds.height,
            pred,
            sample.surfaces.as_ref(),
        )?;
    }
    manifest.finish(out)?;
    Ok(report)
}

fn model_seed(checkpoint: &Path) -> Result<u64> {
    Ok(Checkpoint::load(checkpoint)?.header.seed)
}

fn surfaces_csv(y: &SurfaceCurveSet<f32>) -> String {
    let mut out = String::new();
    for s in 0..y.surfaces() {
        let row: Vec<String> = y.surface(s).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Writes predicted surfaces (S rows × W columns) for every sample.
pub fn segment(common: &Common, checkpoint: &Path, data: &Path) -> Result<usize> {
    let cfg = common.run_config()?;
    let model = load_model(checkpoint)?;
    let (data_dir, ds) = load_split(data, "test")?;
    layerseg::train::check_compatible(model.config(), &ds)?;
    let manifest = common.manifest(
        "segment",
        &cfg,
        model_seed(checkpoint)?,
        &[checkpoint, &data_dir],
    )?;
    let predictions = predict(&model, &ds)?;
    let dir = common.out.join(SURFACES_DIR);
    create_dir(&dir)?;
    for (k, (sample, pred)) in ds.samples.iter().zip(&predictions).enumerate() {
        let path = dir.join(format!("{k:05}_{}.csv", safe_name(&sample.id)));
        write_atomic(&path, surfaces_csv(pred).as_bytes())?;
    }
    manifest.finish(&common.out)?;
    Ok(predictions.len())
}

/// Writes `factor_<s>.png` per layer, `texture.png` when the model has a
/// texture head, and `reconstruction.png` for one sample, chosen by id or index.
pub fn inspect_factors(
    common: &Common,
    checkpoint: &Path,
    data: &Path,
    sample: &str,
) -> Result<Vec<PathBuf>> {
    let cfg = common.run_config()?;
    let model = load_model(checkpoint)?;
    let (data_dir, ds) = load_split(data, "test")?;
    layerseg::train::check_compatible(model.config(), &ds)?;
    let index = ds
        .samples
        .iter()
        .position(|s| s.id == sample)
        .or_else(|| sample.parse::<usize>().ok().filter(|&k| k < ds.len()))
        .ok_or_else(|| {
            CliError::Usage(format!("no sample `{sample}` in {}", data_dir.display()))
        })?;
    let manifest = common.manifest(
        "inspect-factors",
        &cfg,
        model_seed(checkpoint)?,
        &[checkpoint, &data_dir],
    )?;
    let chosen = &ds.samples[index];
    let _ftz = FlushDenormals::new();
    let fwd = model.forward(&ds.images_tensor([chosen]), Mode::Inference)?;
    let factors = fwd.tape.value(fwd.factors);
    let recon = fwd.tape.value(fwd.recon);
    let (_, channels, h, w) = factors.dims4();
    let out = &common.out;
    create_dir(out)?;
    let mut written = Vec::new();
    let layers = model.config().surfaces;
    for c in 0..channels {
        let name = if c < layers {
            format!("factor_{}.png", c + 1)
        } else {
            "texture.png".into()
        };
        let path = out.join(name);
        let plane = &factors.data()[c * h * w..(c + 1) * h * w];
        render::save_gray(&path, w, h, render::binary_pixels(plane))?;
        written.push(path);
    }
    // the input's range keeps intensities comparable with the original
    let (lo, hi) = render::value_range(&chosen.image);
    let path = out.join("reconstruction.png");
    render::save_gray(&path, w, h, render::to_gray(recon.data(), lo, hi))?;
    written.push(path);
    manifest.finish(out)?;
    Ok(written)
}
