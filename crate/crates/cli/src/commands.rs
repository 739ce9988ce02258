//! Subcommand implementations. Every command writes `manifests/<command>.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use ldpm_core::data::{generate_dataset, load_dataset, save_dataset, Dataset};
use ldpm_core::generator::{self, train_generator, ControlDenoiser};
use ldpm_core::kspace::MagnitudeImage;
use ldpm_core::metrics::{write_reports, MetricReport};
use ldpm_core::nn::read_manifest;
use ldpm_core::pipeline::{
    evaluate_method, evaluate_sketch, evaluate_zero_filled, reconstruct, sample_seed, Ablation, Models,
};
use ldpm_core::rawio::write_f32;
use ldpm_core::sampler::SamplerConfig;
use ldpm_core::sketcher::{self, train_sketcher, RepairModel};
use ldpm_core::vae::{self, train_vae, VaeModel};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{Overrides, PipelineConfig};
use crate::manifest::{hash_dir, Layout, RunManifest, VERSION};

#[derive(Debug, Parser)]
#[command(name = "ldpm", version = VERSION, about = "Latent diffusion reconstruction of undersampled MRI")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub options: Options,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Build the phantom (or volume-file) dataset.
    Simulate,
    /// Train the repair network of the sketcher.
    TrainSketcher,
    /// Train the autoencoder.
    TrainVae,
    /// Train the denoiser and its control branch; needs sketcher and VAE checkpoints.
    TrainGenerator,
    /// Reconstruct the test split and write images, raw arrays and sampler traces.
    Reconstruct,
    /// Score the configured method against the zero-filled and sketch baselines.
    Evaluate,
    /// Score the full method and each single-component ablation.
    Ablate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::TrainSketcher => "train-sketcher",
            Command::TrainVae => "train-vae",
            Command::TrainGenerator => "train-generator",
            Command::Reconstruct => "reconstruct",
            Command::Evaluate => "evaluate",
            Command::Ablate => "ablate",
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Options {
    /// TOML configuration, or a run manifest (`.json`) to repeat a run.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Condition the generator on the zero-filled image instead of the sketch.
    #[arg(long, global = true)]
    pub no_skm: bool,
    /// Use an untrained autoencoder of the same architecture.
    #[arg(long, global = true)]
    pub no_mrvae: bool,
    /// Sample with plain deterministic DDIM.
    #[arg(long, global = true)]
    pub no_dss: bool,
    /// Acceleration factor for simulation and evaluation.
    #[arg(long, global = true, value_name = "N")]
    pub af: Option<f64>,
    /// Number of sampler steps.
    #[arg(long, global = true, value_name = "N")]
    pub steps: Option<usize>,
}

impl Options {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            no_skm: self.no_skm,
            no_mrvae: self.no_mrvae,
            no_dss: self.no_dss,
            af: self.af,
            steps: self.steps,
        }
    }

    /// Configuration file (or defaults) with the command-line overrides applied.
    pub fn config(&self) -> anyhow::Result<PipelineConfig> {
        let mut config = match &self.config {
            Some(path) => PipelineConfig::from_path(path)?,
            None => PipelineConfig::default(),
        };
        config.apply(&self.overrides())?;
        let config = config.resolved();
        config.validate()?;
        Ok(config)
    }
}

/// Runs `command` with an already resolved configuration.
pub fn run_with(command: Command, config: &PipelineConfig) -> anyhow::Result<RunManifest> {
    let layout = Layout::new(&config.out);
    let mut manifest = RunManifest::new(command.name(), config);
    match command {
        Command::Simulate => simulate(config, &layout, &mut manifest)?,
        Command::TrainSketcher => train_sketcher_cmd(config, &layout, &mut manifest)?,
        Command::TrainVae => train_vae_cmd(config, &layout, &mut manifest)?,
        Command::TrainGenerator => train_generator_cmd(config, &layout, &mut manifest)?,
        Command::Reconstruct => reconstruct_cmd(config, &layout, &mut manifest)?,
        Command::Evaluate => evaluate_cmd(config, &layout, &mut manifest)?,
        Command::Ablate => ablate_cmd(config, &layout, &mut manifest)?,
    }
    manifest.write(&layout)?;
    Ok(manifest)
}

pub fn run(cli: &Cli) -> anyhow::Result<RunManifest> {
    run_with(cli.command, &cli.options.config()?)
}

fn simulate(config: &PipelineConfig, layout: &Layout, manifest: &mut RunManifest) -> anyhow::Result<()> {
    let dataset = generate_dataset(&config.dataset)?;
    let dir = layout.dataset();
    if dir.exists() {
        fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    save_dataset(&dataset, &dir)?;
    let zf = evaluate_zero_filled(&dataset.test)?;
    manifest.dataset_hash = Some(hash_dir(&dir)?);
    manifest.metrics = json!({
        "n_train": dataset.train.len(),
        "n_val": dataset.val.len(),
        "n_test": dataset.test.len(),
        "test_zero_filled": summary(&zf),
    });
    Ok(())
}

fn open_dataset(layout: &Layout, manifest: &mut RunManifest) -> anyhow::Result<Dataset> {
    let dir = layout.dataset();
    let dataset = load_dataset(&dir).with_context(|| format!("no usable dataset in {}; run `ldpm simulate` first", dir.display()))?;
    manifest.dataset_hash = Some(hash_dir(&dir)?);
    Ok(dataset)
}

fn record_checkpoint(layout: &Layout, stage: &str, manifest: &mut RunManifest) -> anyhow::Result<PathBuf> {
    let dir = layout.checkpoint(stage);
    let meta = read_manifest(&dir, stage)
        .with_context(|| format!("the `{stage}` stage must be trained first (expected a checkpoint in {})", dir.display()))?;
    manifest.checkpoints.insert(stage.to_string(), meta.param_hash);
    Ok(dir)
}

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    fs::create_dir_all(path.parent().expect("report path has a parent"))?;
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn train_sketcher_cmd(config: &PipelineConfig, layout: &Layout, manifest: &mut RunManifest) -> anyhow::Result<()> {
    let ds = open_dataset(layout, manifest)?;
    let (model, log) = train_sketcher(config.sketcher.model.clone(), &ds.train, &ds.val, &config.sketcher.train)?;
    let saved = model.save(&layout.checkpoint(sketcher::CHECKPOINT_KIND), log.best_epoch, log.to_json())?;
    manifest.checkpoints.insert(sketcher::CHECKPOINT_KIND.into(), saved.param_hash);
    write_json(&layout.reports().join("train-sketcher.json"), &log.to_json())?;
    manifest.metrics = log.to_json();
    Ok(())
}

fn train_vae_cmd(config: &PipelineConfig, layout: &Layout, manifest: &mut RunManifest) -> anyhow::Result<()> {
    let ds = open_dataset(layout, manifest)?;
    let (model, log) = train_vae(config.vae.model.clone(), &ds.train, &ds.val, &config.vae.train)?;
    let saved = model.save(&layout.checkpoint(vae::CHECKPOINT_KIND), log.best_epoch, log.to_json())?;
    manifest.checkpoints.insert(vae::CHECKPOINT_KIND.into(), saved.param_hash);
    let mut metrics = log.to_json();
    metrics["latent_scale"] = json!(model.latent_scale());
    write_json(&layout.reports().join("train-vae.json"), &metrics)?;
    manifest.metrics = metrics;
    Ok(())
}

fn train_generator_cmd(config: &PipelineConfig, layout: &Layout, manifest: &mut RunManifest) -> anyhow::Result<()> {
    let sketcher_dir = record_checkpoint(layout, sketcher::CHECKPOINT_KIND, manifest)?;
    let vae_dir = record_checkpoint(layout, vae::CHECKPOINT_KIND, manifest)?;
    let ds = open_dataset(layout, manifest)?;
    let sketcher = RepairModel::load(&sketcher_dir)?;
    let vae = VaeModel::load(&vae_dir)?;
    let (model, log) =
        train_generator(&vae, &sketcher, &ds.train, &ds.val, config.generator.model.clone(), &config.generator.train)?;
    let metrics = serde_json::to_value(&log)?;
    let saved = model.save(&layout.checkpoint(generator::CHECKPOINT_KIND), log.control.best_epoch, metrics.clone())?;
    manifest.checkpoints.insert(generator::CHECKPOINT_KIND.into(), saved.param_hash);
    write_json(&layout.reports().join("train-generator.json"), &metrics)?;
    manifest.metrics = metrics;
    Ok(())
}

fn load_models(layout: &Layout, manifest: &mut RunManifest) -> anyhow::Result<Models> {
    let sketcher = RepairModel::load(&record_checkpoint(layout, sketcher::CHECKPOINT_KIND, manifest)?)?;
    let vae = VaeModel::load(&record_checkpoint(layout, vae::CHECKPOINT_KIND, manifest)?)?;
    let generator = ControlDenoiser::load(&record_checkpoint(layout, generator::CHECKPOINT_KIND, manifest)?)?;
    Ok(Models::new(sketcher, vae, generator)?)
}

/// Manifest notes describing how each disabled component was replaced.
fn ablation_notes(ablation: Ablation) -> Vec<String> {
    let mut notes = Vec::new();
    if ablation.no_skm {
        notes.push("no_skm: generator conditioned on the zero-filled image".into());
    }
    if ablation.no_mrvae {
        notes.push("no_mrvae: randomly initialized, frozen autoencoder of identical architecture".into());
    }
    if ablation.no_dss {
        notes.push("no_dss: plain deterministic DDIM without data consistency or guidance".into());
    }
    notes
}

fn condition_source(ablation: Ablation) -> &'static str {
    if ablation.no_skm {
        "zero_filled"
    } else {
        "sketch"
    }
}

fn af_label(af: f64) -> String {
    format!("af{af}")
}

fn report_stem(prefix: &str, config: &PipelineConfig, af: f64) -> String {
    format!("{prefix}-{}-{}", config.evaluation.split.as_str(), af_label(af))
}

fn config_hash(config: &PipelineConfig) -> anyhow::Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(config)?)))
}

fn summary(r: &MetricReport) -> serde_json::Value {
    json!({ "psnr": r.mean_psnr, "ssim": r.mean_ssim })
}

/// Writes an 8-bit grayscale preview, clamping to `[0, 1]`.
pub fn write_png(img: &MagnitudeImage, path: &Path) -> anyhow::Result<()> {
    let (h, w) = img.shape();
    let data = img.data();
    let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(data[(y as usize, x as usize)].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    buf.save_with_format(path, image::ImageFormat::Png).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn reconstruct_cmd(config: &PipelineConfig, layout: &Layout, manifest: &mut RunManifest) -> anyhow::Result<()> {
    let ds = open_dataset(layout, manifest)?;
    let models = load_models(layout, manifest)?;
    let ablation = config.ablation;
    let method = ablation.name();
    let sampler = SamplerConfig { record_trace: true, ..config.sampler.clone() };
    let hash = config_hash(config)?;
    let mut metrics = serde_json::Map::new();
    for &af in &config.evaluation.afs {
        let samples = ds.split_at(config.evaluation.split, af)?;
        let dir = layout.reconstructions().join(&method).join(config.evaluation.split.as_str()).join(af_label(af));
        fs::create_dir_all(&dir)?;
        let mut images = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            let out = reconstruct(&models, &s.k_u, &s.mask, ablation, &sampler, sample_seed(config.seed, i))?;
            write_png(&out.image, &dir.join(format!("{}.png", s.id)))?;
            write_f32(&dir.join(format!("{}.f32", s.id)), out.image.data().iter().map(|&v| v as f32))?;
            if let Some(trace) = &out.trace {
                fs::write(dir.join(format!("{}.trace.jsonl", s.id)), trace.to_jsonl()?)?;
            }
            images.push(out.image);
        }
        let mut images = images.into_iter();
        let report = ldpm_core::metrics::evaluate(&method, &samples, |_| Ok(images.next().expect("one image per sample")))?
            .with_provenance(&ds_label(manifest), &hash, config.seed);
        write_reports(&[report.clone()], &layout.reports(), &report_stem(&format!("reconstruct-{method}"), config, af))?;
        metrics.insert(af_label(af), summary(&report));
    }
    manifest.notes = ablation_notes(ablation);
    manifest.metrics = json!({
        "method": method,
        "condition": condition_source(ablation),
        "split": config.evaluation.split,
        "results": metrics,
    });
    Ok(())
}

fn ds_label(manifest: &RunManifest) -> String {
    manifest.dataset_hash.as_deref().map_or_else(String::new, |h| h[..16].to_string())
}

fn evaluate_cmd(config: &PipelineConfig, layout: &Layout, manifest: &mut RunManifest) -> anyhow::Result<()> {
    let ds = open_dataset(layout, manifest)?;
    let models = load_models(layout, manifest)?;
    let hash = config_hash(config)?;
    let label = ds_label(manifest);
    let mut metrics = serde_json::Map::new();
    for &af in &config.evaluation.afs {
        let samples = ds.split_at(config.evaluation.split, af)?;
        let reports: Vec<MetricReport> = [
            evaluate_zero_filled(&samples)?,
            evaluate_sketch(&models.sketcher, &samples)?,
            evaluate_method(&models, &samples, config.ablation, &config.sampler, config.seed)?,
        ]
        .into_iter()
        .map(|r| r.with_provenance(&label, &hash, config.seed))
        .collect();
        write_reports(&reports, &layout.reports(), &report_stem("evaluate", config, af))?;
        let row: serde_json::Map<String, serde_json::Value> =
            reports.iter().map(|r| (r.method.clone(), summary(r))).collect();
        metrics.insert(af_label(af), row.into());
    }
    manifest.notes = ablation_notes(config.ablation);
    manifest.metrics = json!({
        "condition": condition_source(config.ablation),
        "split": config.evaluation.split,
        "results": metrics,
    });
    Ok(())
}

/// Header and rows of the ablation table: one row per variant, a PSNR and
/// an SSIM column per acceleration factor.
pub fn ablation_table(afs: &[f64], results: &BTreeMap<String, Vec<MetricReport>>) -> String {
    let mut csv = String::from("method");
    for &af in afs {
        csv.push_str(&format!(",psnr_{0},ssim_{0}", af_label(af)));
    }
    csv.push('\n');
    for ablation in Ablation::study() {
        let name = ablation.name();
        csv.push_str(&name);
        for &af in afs {
            let r = results[&af_label(af)].iter().find(|r| r.method == name).expect("every variant evaluated");
            csv.push_str(&format!(",{},{}", r.mean_psnr, r.mean_ssim));
        }
        csv.push('\n');
    }
    csv
}

fn ablate_cmd(config: &PipelineConfig, layout: &Layout, manifest: &mut RunManifest) -> anyhow::Result<()> {
    let ds = open_dataset(layout, manifest)?;
    let models = load_models(layout, manifest)?;
    let hash = config_hash(config)?;
    let label = ds_label(manifest);
    let mut results = BTreeMap::new();
    let mut metrics = serde_json::Map::new();
    for &af in &config.evaluation.afs {
        let samples = ds.split_at(config.evaluation.split, af)?;
        let mut reports = vec![evaluate_zero_filled(&samples)?.with_provenance(&label, &hash, config.seed)];
        for ablation in Ablation::study() {
            log::info!("ablate {} at AF {af}", ablation.name());
            let r = evaluate_method(&models, &samples, ablation, &config.sampler, config.seed)?;
            reports.push(r.with_provenance(&label, &hash, config.seed));
        }
        write_reports(&reports, &layout.reports(), &report_stem("ablate", config, af))?;
        let row: serde_json::Map<String, serde_json::Value> =
            reports.iter().map(|r| (r.method.clone(), summary(r))).collect();
        metrics.insert(af_label(af), row.into());
        results.insert(af_label(af), reports);
    }
    let table = ablation_table(&config.evaluation.afs, &results);
    fs::write(layout.reports().join(format!("ablation-{}.csv", config.evaluation.split.as_str())), &table)?;
    manifest.notes = Ablation::study().into_iter().flat_map(ablation_notes).collect();
    manifest.metrics = json!({ "split": config.evaluation.split, "results": metrics });
    Ok(())
}
