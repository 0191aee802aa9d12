//! The subcommands as library functions.

use std::path::{Path, PathBuf};

use ahnet_core::data::image::{encode_mask_png, encode_overlay_png, save_png};
use ahnet_core::data::{
    pair_by_identifier, read_bundle, slices_from_pair, synth_dataset, write_bundle, DatasetBundle, Gray8,
    LesionKind, SynthConfig,
};
use ahnet_core::metrics::MetricsReport;
use ahnet_core::segnet::{evaluate, score, train, Network, Prediction, TrainConfig, Trainer, TrainingReport};
use anyhow::{bail, Context, Result};
use serde::Serialize;

use crate::config::Config;
use crate::inference::segment;

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_bundle(path: &Path) -> Result<DatasetBundle> {
    read_bundle(path).with_context(|| format!("reading bundle {}", path.display()))
}

fn load_model(path: &Path) -> Result<Network> {
    Network::load(path).with_context(|| format!("loading model {}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthSummary {
    pub output: PathBuf,
    pub slices: usize,
    pub patients: usize,
}

pub fn synth(out: &Path, seed: u64, count: usize, size: usize, kind: LesionKind) -> Result<SynthSummary> {
    let bundle = synth_dataset(&SynthConfig::new(seed, count, size, kind))?;
    ensure_parent(out)?;
    write_bundle(&bundle, out)?;
    Ok(SynthSummary {
        output: out.to_path_buf(),
        slices: bundle.len(),
        patients: bundle.index().len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PreprocessSummary {
    pub output: Option<PathBuf>,
    pub volumes: usize,
    pub slices: usize,
    pub patients: usize,
    pub unmatched: Vec<PathBuf>,
    /// One line per volume pair that could not be read.
    pub errors: Vec<String>,
}

fn list_volumes(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "nii") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Pairs image and label volumes under `input`, slices and resizes them,
/// and writes one bundle. Pairs that fail are reported and skipped.
pub fn preprocess(cfg: &Config, input: &Path, output: &Path) -> Result<PreprocessSummary> {
    let p = &cfg.preprocess;
    let images = list_volumes(&input.join(&p.image_dir))?;
    let labels = list_volumes(&input.join(&p.label_dir))?;
    if images.is_empty() && labels.is_empty() {
        bail!("no volumes found in {}", input.display());
    }
    let pattern = regex::Regex::new(&p.id_pattern)?;
    let pairing = pair_by_identifier(&images, &labels, &pattern)?;
    let mut records = Vec::new();
    let mut errors = Vec::new();
    let mut volumes = 0;
    for pair in &pairing.pairs {
        match slices_from_pair(&pair.id, &pair.image, &pair.label, p.size) {
            Ok(r) => {
                volumes += 1;
                records.extend(r);
            }
            Err(e) => errors.push(format!("{}: {e}", pair.id)),
        }
    }
    let mut unmatched = pairing.unmatched_images;
    unmatched.extend(pairing.unmatched_labels);
    let mut summary = PreprocessSummary {
        output: None,
        volumes,
        slices: records.len(),
        patients: 0,
        unmatched,
        errors,
    };
    if records.is_empty() {
        return Ok(summary);
    }
    let bundle = DatasetBundle::new(records)?;
    ensure_parent(output)?;
    write_bundle(&bundle, output)?;
    summary.patients = bundle.index().len();
    summary.output = Some(output.to_path_buf());
    Ok(summary)
}

/// Trains from scratch or from `resume`, writes per-epoch checkpoints, the
/// final model and the training report.
pub fn train_cmd(cfg: &Config, resume: Option<&Path>) -> Result<TrainingReport> {
    let bundle = load_bundle(&cfg.paths.bundle)?;
    let mut trainer = match resume {
        Some(path) => {
            let mut t = Trainer::resume(path).with_context(|| format!("resuming from {}", path.display()))?;
            t.set_epochs(cfg.train.epochs)?;
            t
        }
        None => {
            let (spec, hooks) = cfg.network_spec();
            Trainer::new(spec, hooks, cfg.train)?
        }
    };
    let report = trainer.run(&bundle, Some(&cfg.paths.checkpoint_dir))?;
    ensure_parent(&cfg.paths.model)?;
    trainer.network().save(&cfg.paths.model)?;
    write_json(&cfg.paths.train_report, &report)?;
    Ok(report)
}

/// Scores the model (or, with `oracle`, the labels themselves) on the
/// evaluation bundle and writes the metrics report.
pub fn eval_cmd(cfg: &Config, model: Option<&Path>, oracle: bool) -> Result<MetricsReport> {
    let bundle = load_bundle(cfg.eval_bundle())?;
    let report = if oracle {
        let preds: Vec<Prediction> = bundle
            .records()
            .iter()
            .map(|r| Prediction {
                mask: r.label.clone(),
                foreground: r.label.bits().iter().map(|&b| f64::from(u8::from(b))).collect(),
            })
            .collect();
        score(bundle.records(), &preds)?
    } else {
        let net = load_model(model.unwrap_or(&cfg.paths.model))?;
        evaluate(&net, &bundle)?
    };
    write_json(&cfg.paths.eval_report, &report)?;
    Ok(report)
}

pub enum PredictInput<'a> {
    Png(&'a Path),
    BundleSlice(&'a Path, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictSummary {
    pub mask: PathBuf,
    pub overlay: PathBuf,
    pub height: usize,
    pub width: usize,
    pub foreground_pixels: usize,
}

pub fn predict_cmd(cfg: &Config, model: Option<&Path>, input: PredictInput, out_dir: &Path) -> Result<PredictSummary> {
    let net = load_model(model.unwrap_or(&cfg.paths.model))?;
    let (img, stem): (Gray8, String) = match input {
        PredictInput::Png(path) => {
            let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            let img = ahnet_core::data::image::decode_png(&bytes).with_context(|| format!("decoding {}", path.display()))?;
            let stem = path.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
            (img, stem)
        }
        PredictInput::BundleSlice(path, index) => {
            let bundle = load_bundle(path)?;
            let rec = bundle
                .records()
                .get(index)
                .with_context(|| format!("slice {index} out of range (bundle has {})", bundle.len()))?;
            (rec.image.clone(), rec.case_id.clone())
        }
    };
    let pred = segment(&net, &img)?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mask = out_dir.join(format!("{stem}_mask.png"));
    let overlay = out_dir.join(format!("{stem}_overlay.png"));
    save_png(&mask, &encode_mask_png(&pred.mask)?)?;
    save_png(&overlay, &encode_overlay_png(&img, &pred.mask)?)?;
    Ok(PredictSummary {
        mask,
        overlay,
        height: img.height,
        width: img.width,
        foreground_pixels: pred.mask.count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MachineInfo {
    pub os: &'static str,
    pub arch: &'static str,
    pub cpus: usize,
}

impl MachineInfo {
    pub fn current() -> Self {
        MachineInfo {
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
            cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub variant: String,
    pub parameter_count: usize,
    pub epochs: usize,
    pub repeats: usize,
    /// Mean over repeats of the mean seconds per epoch.
    pub seconds_per_epoch: f64,
    /// Population standard deviation over repeats.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub machine: MachineInfo,
    pub slices: usize,
    pub input_size: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn table(&self) -> String {
        let m = &self.machine;
        let mut s = format!(
            "# {} {} cpus={} slices={} size={}\nvariant\tparams\tsec/epoch\tstd\n",
            m.os, m.arch, m.cpus, self.slices, self.input_size
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{}\t{:.3}\t{:.3}\n",
                r.variant, r.parameter_count, r.seconds_per_epoch, r.std
            ));
        }
        s
    }
}

/// Per-epoch training time of each listed variant.
pub fn bench_cmd(cfg: &Config) -> Result<BenchReport> {
    let b = &cfg.bench;
    if b.variants.is_empty() {
        bail!("bench.variants is empty");
    }
    if b.epochs == 0 || b.repeats == 0 {
        bail!("bench.epochs and bench.repeats must be positive");
    }
    let bundle = if cfg.paths.bundle.exists() {
        load_bundle(&cfg.paths.bundle)?
    } else {
        synth_dataset(&SynthConfig::new(
            cfg.train.seed,
            b.synth_cases,
            cfg.network.input_size,
            LesionKind::Blob,
        ))?
    };
    let mut rows = Vec::new();
    for &variant in &b.variants {
        let (spec, hooks) = variant.configure(cfg.network);
        let tc = TrainConfig {
            epochs: b.epochs,
            target_dsc: None,
            ..cfg.train
        };
        let mut per_repeat = Vec::with_capacity(b.repeats);
        let mut params = 0;
        for _ in 0..b.repeats {
            let (_, report) = train(spec, hooks, tc, &bundle, None)?;
            params = report.parameter_count;
            per_repeat.push(report.total_seconds() / report.epochs.len() as f64);
        }
        let n = per_repeat.len() as f64;
        let mean = per_repeat.iter().sum::<f64>() / n;
        let std = (per_repeat.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        rows.push(BenchRow {
            variant: variant.name().into(),
            parameter_count: params,
            epochs: b.epochs,
            repeats: b.repeats,
            seconds_per_epoch: mean,
            std,
        });
    }
    Ok(BenchReport {
        machine: MachineInfo::current(),
        slices: bundle.len(),
        input_size: bundle.records()[0].image.height,
        rows,
    })
}
