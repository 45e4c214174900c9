//! Experiment orchestration: one structured run configuration, subcommand
//! implementations, seeded reproducibility, and report emission.
//!
//! Every command writes a run manifest (config hash, seeds, versions) next to
//! its artifacts; metric CSVs carry no timestamps so identical configs and
//! seeds reproduce identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::ablation;
use crate::boosting::{self, Describer};
use crate::dataset::{self, Dataset, Split, SyntheticConfig};
use crate::decoder::{self, topk_accuracy, DecoderHyper, DecoderModel};
use crate::diffusion::{Engine, EngineConfig, StageHyper};
use crate::metrics::{
    embedding_rows, embedding_similarity, fid, inception_score, perceptual_distance,
    FeatureBackbone, GaussianSummary, ToyCnnBackbone,
};
use crate::montage::{self, Montage};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("missing prerequisite artifact: {0}")]
    MissingPrerequisite(PathBuf),
    #[error("configuration error: {0}")]
    ConfigValidation(String),
    #[error("output directory is locked by another writer: {0}")]
    Locked(PathBuf),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error(transparent)]
    Montage(#[from] montage::MontageError),
    #[error(transparent)]
    Decoder(#[from] decoder::DecoderError),
    #[error(transparent)]
    Diffusion(#[from] crate::diffusion::DiffusionError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error(transparent)]
    Boost(#[from] boosting::BoostError),
    #[error(transparent)]
    Ablation(#[from] ablation::AblationError),
    #[error(transparent)]
    Stats(#[from] crate::stats::StatsError),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl PipelineError {
    /// Process exit code: 1 for validation failures, 2 for missing
    /// prerequisites.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::MissingPrerequisite(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineSettings {
    pub timesteps: usize,
    pub unet_base: usize,
    pub ae_base: usize,
    pub t_emb_dim: usize,
    pub text_dim: usize,
    pub fproj_base: usize,
    pub pixel_space: bool,
    pub caption_dropout: f64,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for EngineSettings {
    fn default() -> Self {
        EngineSettings {
            timesteps: 200,
            unet_base: 32,
            ae_base: 16,
            t_emb_dim: 32,
            text_dim: 32,
            fproj_base: 16,
            pixel_space: false,
            caption_dropout: 0.1,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BoostSettings {
    pub strength: f64,
    pub gamma: f64,
    pub steps: usize,
    pub describer: Describer,
}

impl Default for BoostSettings {
    fn default() -> Self {
        BoostSettings {
            strength: 0.4,
            gamma: 7.5,
            steps: 50,
            describer: Describer::Mock,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricSettings {
    pub is_splits: usize,
    /// N for N-way accuracy; clamped to the class count.
    pub n_ways: usize,
    pub backbone_epochs: usize,
    pub backbone_batch: usize,
    pub backbone_lr: f64,
    pub backbone_base: usize,
}

impl Default for MetricSettings {
    fn default() -> Self {
        MetricSettings {
            is_splits: 10,
            n_ways: 50,
            backbone_epochs: 40,
            backbone_batch: 32,
            backbone_lr: 3e-3,
            backbone_base: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationSettings {
    /// Montage to ablate; empty = first montage in the run list.
    pub montage: String,
    pub mode: ablation::RegionMode,
    /// Decoder hyperparameters for retrain mode.
    pub retrain: DecoderHyper,
}

impl Default for AblationSettings {
    fn default() -> Self {
        AblationSettings {
            montage: String::new(),
            mode: ablation::RegionMode::ZeroFill,
            retrain: DecoderHyper::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct StudySettings {
    pub input_csv: PathBuf,
    pub output_json: PathBuf,
}

impl Default for StudySettings {
    fn default() -> Self {
        StudySettings {
            input_csv: PathBuf::from("study.csv"),
            output_json: PathBuf::from("study_summary.json"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    pub montages: Vec<String>,
    pub gammas: Vec<f64>,
    pub samples_per_trial: usize,
    pub sample_steps: usize,
    pub seed: u64,
    /// When present, `prepare` generates this synthetic dataset at `dataset`.
    pub synth: Option<SyntheticConfig>,
    pub decoder: DecoderHyper,
    pub autoencoder: StageHyper,
    pub backbone: StageHyper,
    pub controlnet: StageHyper,
    pub engine: EngineSettings,
    pub boost: BoostSettings,
    pub metrics: MetricSettings,
    pub ablation: AblationSettings,
    pub study: StudySettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: PathBuf::from("dataset"),
            out_dir: PathBuf::from("out"),
            montages: vec![
                "std-128".into(),
                "std-64".into(),
                "std-32".into(),
                "std-24".into(),
            ],
            gammas: vec![4.0, 7.5],
            samples_per_trial: 4,
            sample_steps: 50,
            seed: 7,
            synth: None,
            decoder: DecoderHyper::default(),
            autoencoder: StageHyper {
                epochs: 30,
                batch: 32,
                lr: 2e-3,
            },
            backbone: StageHyper {
                epochs: 60,
                batch: 32,
                lr: 2e-3,
            },
            controlnet: StageHyper {
                epochs: 20,
                batch: 32,
                lr: 3e-4,
            },
            engine: EngineSettings::default(),
            boost: BoostSettings::default(),
            metrics: MetricSettings::default(),
            ablation: AblationSettings::default(),
            study: StudySettings::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.montages.is_empty() {
            return Err(PipelineError::ConfigValidation("no montages listed".into()));
        }
        for name in &self.montages {
            resolve_montage(name)?;
        }
        if self.gammas.is_empty() {
            return Err(PipelineError::ConfigValidation("no gammas listed".into()));
        }
        if self.gammas.iter().any(|g| *g < 0.0 || !g.is_finite()) {
            return Err(PipelineError::ConfigValidation(
                "guidance scales must be finite and >= 0".into(),
            ));
        }
        if !(self.boost.strength > 0.0 && self.boost.strength <= 1.0) {
            return Err(PipelineError::ConfigValidation(format!(
                "boost strength {} outside (0, 1]",
                self.boost.strength
            )));
        }
        if self.samples_per_trial == 0 {
            return Err(PipelineError::ConfigValidation(
                "samples_per_trial must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Stable short identifier derived from the configuration content.
    pub fn run_id(&self) -> String {
        use sha2::{Digest, Sha256};
        let text = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Resolves a montage by builtin name or fixture-file path.
pub fn resolve_montage(name: &str) -> Result<Montage, PipelineError> {
    match montage::builtin(name) {
        Ok(m) => Ok(m),
        Err(montage::MontageError::UnknownMontage(_)) => {
            let path = Path::new(name);
            if path.is_file() {
                Ok(montage::from_fixture_file(path)?)
            } else {
                Err(PipelineError::ConfigValidation(format!(
                    "montage '{name}' is neither a builtin ({:?}) nor a fixture file",
                    montage::builtin_names()
                )))
            }
        }
        Err(e) => Err(e.into()),
    }
}

fn derive_seed(master: u64, parts: &[&str]) -> u64 {
    let mut h: u64 = master ^ 0x9e37_79b9_7f4a_7c15;
    for part in parts {
        for b in part.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h = h.rotate_left(17);
    }
    h
}

// ---------------------------------------------------------------------------
// Output-directory lock and run manifests
// ---------------------------------------------------------------------------

/// Advisory single-writer lock on the output directory.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(out_dir: &Path) -> Result<Self, PipelineError> {
        fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
        let path = out_dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(PipelineError::Locked(path))
            }
            Err(source) => Err(PipelineError::Io { path, source }),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    run_id: String,
    seed: u64,
    crate_version: &'a str,
    config: &'a RunConfig,
}

fn write_manifest(cfg: &RunConfig, command: &str) -> Result<(), PipelineError> {
    let dir = cfg.out_dir.join("manifests");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let manifest = RunManifest {
        command,
        run_id: cfg.run_id(),
        seed: cfg.seed,
        crate_version: env!("CARGO_PKG_VERSION"),
        config: cfg,
    };
    let path = dir.join(format!("{command}.json"));
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(())
}

fn require(path: PathBuf) -> Result<PathBuf, PipelineError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(PipelineError::MissingPrerequisite(path))
    }
}

// ---------------------------------------------------------------------------
// Artifact paths
// ---------------------------------------------------------------------------

pub fn decoder_path(cfg: &RunConfig, montage: &str) -> PathBuf {
    cfg.out_dir.join("decoders").join(format!("{montage}.ckpt"))
}

pub fn base_engine_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("engine_base.ckpt")
}

pub fn engine_path(cfg: &RunConfig, montage: &str) -> PathBuf {
    cfg.out_dir.join("engines").join(format!("{montage}.ckpt"))
}

pub fn backbone_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("backbone.ckpt")
}

pub fn generated_dir(cfg: &RunConfig, montage: &str) -> PathBuf {
    cfg.out_dir.join("generated").join(montage)
}

pub fn boosted_dir(cfg: &RunConfig, montage: &str) -> PathBuf {
    cfg.out_dir.join("boosted").join(montage)
}

pub fn reports_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("reports")
}

fn gamma_label(gamma: f64) -> String {
    format!("{gamma}")
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

/// `prepare`: generate the synthetic dataset (when configured) or validate an
/// existing one.
pub fn cmd_prepare(cfg: &RunConfig) -> Result<(), PipelineError> {
    cfg.validate()?;
    let _lock = DirLock::acquire(&cfg.out_dir)?;
    if let Some(synth) = &cfg.synth {
        dataset::generate_synthetic(synth, &cfg.dataset)?;
    }
    let ds = dataset::load_dataset(&cfg.dataset)?;
    println!(
        "prepare: dataset '{}' ok ({} classes, {} channels, {} train / {} val / {} test)",
        ds.manifest.name,
        ds.manifest.num_classes,
        ds.manifest.channels,
        ds.manifest.splits.train.len(),
        ds.manifest.splits.val.len(),
        ds.manifest.splits.test.len()
    );
    write_manifest(cfg, "prepare")
}

/// `train-decoder`: one decoder per montage in the run list.
pub fn cmd_train_decoder(cfg: &RunConfig) -> Result<(), PipelineError> {
    cfg.validate()?;
    let _lock = DirLock::acquire(&cfg.out_dir)?;
    let ds = dataset::load_dataset(&cfg.dataset)?;
    let dir = cfg.out_dir.join("decoders");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    for name in &cfg.montages {
        let m = resolve_montage(name)?;
        let seed = derive_seed(cfg.seed, &["decoder", name]);
        let model = decoder::train_decoder(&ds, &m, &cfg.decoder, seed)?;
        let path = decoder_path(cfg, name);
        model.save(&path)?;
        let hist_path = dir.join(format!("{name}_history.json"));
        let mut text = serde_json::to_string_pretty(&model.meta.history)?;
        text.push('\n');
        fs::write(&hist_path, text).map_err(io_err(&hist_path))?;
        let last = model.meta.history.last();
        println!(
            "train-decoder: {name} -> {} (val top-1 {:.3})",
            path.display(),
            last.map(|h| h.val_top1).unwrap_or(0.0)
        );
    }
    write_manifest(cfg, "train-decoder")
}

fn load_train_images(ds: &Dataset) -> Result<(Vec<RgbImage>, Vec<usize>, Vec<String>), PipelineError> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut captions = Vec::new();
    for id in ds.split_ids(Split::Train) {
        let meta = &ds.manifest.trial_meta[id];
        let img = ds.load_image(&meta.image_id)?;
        images.push(img.pixels);
        labels.push(meta.class_label);
        captions.push(format!("Image of {}", ds.class_name(meta.class_label)));
    }
    Ok((images, labels, captions))
}

fn engine_config_for(cfg: &RunConfig, ds: &Dataset, montage_name: &str, channels: usize) -> EngineConfig {
    EngineConfig {
        image_size: ds.manifest.image_size,
        pixel_space: cfg.engine.pixel_space,
        latent_channels: 4,
        ae_base: cfg.engine.ae_base,
        unet_base: cfg.engine.unet_base,
        t_emb_dim: cfg.engine.t_emb_dim,
        text_dim: cfg.engine.text_dim,
        timesteps: cfg.engine.timesteps,
        beta_start: cfg.engine.beta_start,
        beta_end: cfg.engine.beta_end,
        montage_name: montage_name.to_string(),
        eeg_channels: channels,
        eeg_samples: ds.manifest.samples_per_trial,
        fproj_base: cfg.engine.fproj_base,
        caption_dropout: cfg.engine.caption_dropout,
        seed: derive_seed(cfg.seed, &["engine", montage_name]),
        latent_scale: 1.0,
        stages: Default::default(),
    }
}

/// `train-controlnet`: pretrains the shared base (autoencoder + backbone)
/// once, then trains one adapter stack per montage against its decoder.
pub fn cmd_train_controlnet(cfg: &RunConfig) -> Result<(), PipelineError> {
    cfg.validate()?;
    let _lock = DirLock::acquire(&cfg.out_dir)?;
    let ds = dataset::load_dataset(&cfg.dataset)?;
    let (images, _, captions) = load_train_images(&ds)?;

    let base_path = base_engine_path(cfg);
    let base = if base_path.exists() {
        Engine::load(&base_path)?
    } else {
        let mut base = Engine::new(engine_config_for(cfg, &ds, "base", ds.manifest.channels));
        let ae_losses = base.pretrain_autoencoder(
            &images,
            &cfg.autoencoder,
            derive_seed(cfg.seed, &["ae"]),
        )?;
        let bb_losses =
            base.pretrain_backbone(&images, &captions, &cfg.backbone, derive_seed(cfg.seed, &["bb"]))?;
        base.save(&base_path)?;
        println!(
            "train-controlnet: base pretrained (ae loss {:.4} -> {:.4}, backbone loss {:.4} -> {:.4})",
            ae_losses.first().copied().unwrap_or(0.0),
            ae_losses.last().copied().unwrap_or(0.0),
            bb_losses.first().copied().unwrap_or(0.0),
            bb_losses.last().copied().unwrap_or(0.0)
        );
        base
    };

    let dir = cfg.out_dir.join("engines");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    for name in &cfg.montages {
        let m = resolve_montage(name)?;
        let dec_path = require(decoder_path(cfg, name))?;
        let decoder = DecoderModel::load(&dec_path)?;
        let mut engine = Engine::new(engine_config_for(cfg, &ds, name, m.len()));
        engine.import_pretrained(base.params(), base.config.latent_scale)?;
        let report = engine.train_controlnet(
            &ds,
            &m,
            &decoder,
            &cfg.controlnet,
            derive_seed(cfg.seed, &["controlnet", name]),
        )?;
        let path = engine_path(cfg, name);
        engine.save(&path)?;
        let report_path = dir.join(format!("{name}_training.json"));
        let mut text = serde_json::to_string_pretty(&report)?;
        text.push('\n');
        fs::write(&report_path, text).map_err(io_err(&report_path))?;
        println!(
            "train-controlnet: {name} -> {} (loss {:.4} -> {:.4}, frozen hash stable: {})",
            path.display(),
            report.step_losses.first().copied().unwrap_or(0.0),
            report.step_losses.last().copied().unwrap_or(0.0),
            report.frozen_hash_before == report.frozen_hash_after
        );
    }
    write_manifest(cfg, "train-controlnet")
}

/// One generated-sample record in the JSONL sidecar.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub trial_id: String,
    pub sample_idx: usize,
    pub gamma: f64,
    pub seed: u64,
    pub montage: String,
    pub predicted_label: usize,
    pub predicted_class: String,
    pub caption: String,
    pub file: String,
    pub true_label: usize,
    pub image_id: String,
}

/// `generate`: reconstruct every test trial, `samples_per_trial` images per
/// gamma, named `<trial_id>_<sample_idx>_<gamma>.png` plus a JSONL sidecar.
pub fn cmd_generate(cfg: &RunConfig) -> Result<(), PipelineError> {
    cfg.validate()?;
    let _lock = DirLock::acquire(&cfg.out_dir)?;
    let ds = dataset::load_dataset(&cfg.dataset)?;
    for name in &cfg.montages {
        let m = resolve_montage(name)?;
        let dec_path = require(decoder_path(cfg, name))?;
        let eng_path = require(engine_path(cfg, name))?;
        let decoder = DecoderModel::load(&dec_path)?;
        let engine = Engine::load(&eng_path)?;
        let out = generated_dir(cfg, name);
        fs::create_dir_all(&out).map_err(io_err(&out))?;
        let mut sidecar = Vec::new();
        for id in ds.split_ids(Split::Test) {
            let trial = m.project_trial(&ds.load_trial_normalized(id)?)?;
            let scores = decoder.decode(&trial)?;
            let caption = decoder::make_caption(&scores, &decoder.meta.class_names);
            for &gamma in &cfg.gammas {
                for sample_idx in 0..cfg.samples_per_trial {
                    let seed = derive_seed(
                        cfg.seed,
                        &[
                            "generate",
                            name,
                            id,
                            &sample_idx.to_string(),
                            &gamma_label(gamma),
                        ],
                    );
                    let img = engine.sample_with_caption(
                        &trial,
                        &caption.text,
                        gamma,
                        cfg.sample_steps,
                        seed,
                    )?;
                    let file = format!("{id}_{sample_idx}_{}.png", gamma_label(gamma));
                    let path = out.join(&file);
                    img.save(&path)?;
                    sidecar.push(SampleRecord {
                        trial_id: id.clone(),
                        sample_idx,
                        gamma,
                        seed,
                        montage: name.clone(),
                        predicted_label: caption.source_label,
                        predicted_class: decoder.meta.class_names[caption.source_label].clone(),
                        caption: caption.text.clone(),
                        file,
                        true_label: trial.class_label,
                        image_id: trial.image_id.clone(),
                    });
                }
            }
        }
        write_jsonl(&out.join("metadata.jsonl"), &sidecar)?;
        println!("generate: {name} -> {} samples", sidecar.len());
    }
    write_manifest(cfg, "generate")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoostRecord {
    pub trial_id: String,
    pub sample_idx: usize,
    pub gamma: f64,
    pub description: String,
    pub prompt: String,
    pub strength: f64,
    pub seed: u64,
    pub file: String,
    pub source_file: String,
}

/// `boost`: refine every generated sample through the describer + img2img
/// stage; reads only images, prompts, weights, and seeds.
pub fn cmd_boost(cfg: &RunConfig) -> Result<(), PipelineError> {
    cfg.validate()?;
    let _lock = DirLock::acquire(&cfg.out_dir)?;
    for name in &cfg.montages {
        let eng_path = require(engine_path(cfg, name))?;
        let engine = Engine::load(&eng_path)?;
        let gen_dir = generated_dir(cfg, name);
        let meta_path = require(gen_dir.join("metadata.jsonl"))?;
        let records: Vec<SampleRecord> = read_jsonl(&meta_path)?;
        let out = boosted_dir(cfg, name);
        fs::create_dir_all(&out).map_err(io_err(&out))?;
        let mut sidecar = Vec::new();
        for rec in &records {
            let src = gen_dir.join(&rec.file);
            let img = image::open(&src)?.to_rgb8();
            let seed = derive_seed(cfg.seed, &["boost", name, &rec.file]);
            let outcome = boosting::boost(
                &img,
                &cfg.boost.describer,
                &engine,
                cfg.boost.strength,
                cfg.boost.gamma,
                cfg.boost.steps,
                seed,
                Some(&rec.predicted_class),
            )?;
            let file = format!(
                "{}_{}_{}_boosted.png",
                rec.trial_id,
                rec.sample_idx,
                gamma_label(rec.gamma)
            );
            let path = out.join(&file);
            outcome.image.save(&path)?;
            sidecar.push(BoostRecord {
                trial_id: rec.trial_id.clone(),
                sample_idx: rec.sample_idx,
                gamma: rec.gamma,
                description: outcome.description,
                prompt: outcome.prompt,
                strength: outcome.strength,
                seed,
                file,
                source_file: rec.file.clone(),
            });
        }
        write_jsonl(&out.join("metadata.jsonl"), &sidecar)?;
        println!("boost: {name} -> {} boosted samples", sidecar.len());
    }
    write_manifest(cfg, "boost")
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), PipelineError> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(PipelineError::from))
        .collect()
}

/// One row of the metric report grid.
#[derive(Debug, Clone)]
pub struct MetricRow {
    pub run_id: String,
    pub montage: String,
    pub channels: usize,
    pub gamma: f64,
    pub boosted: bool,
    pub n_images: usize,
    pub is: f64,
    pub fid: f64,
    pub lpips: f64,
    /// None for boosted rows (excluded to avoid prompt-alignment bias).
    pub clip_sim: Option<f64>,
    pub backbone_tag: String,
    pub seed: u64,
}

pub fn metric_csv_header() -> &'static str {
    "run_id,montage,channels,gamma,boosted,n_images,is,fid,lpips,clip_sim,backbone_tag,seed"
}

pub fn metric_csv_row(r: &MetricRow) -> String {
    format!(
        "{},{},{},{},{},{},{:.6},{:.6},{:.6},{},{},{}",
        r.run_id,
        r.montage,
        r.channels,
        gamma_label(r.gamma),
        r.boosted,
        r.n_images,
        r.is,
        r.fid,
        r.lpips,
        r.clip_sim.map(|v| format!("{v:.6}")).unwrap_or_default(),
        r.backbone_tag,
        r.seed
    )
}

fn train_or_load_backbone(cfg: &RunConfig, ds: &Dataset) -> Result<ToyCnnBackbone, PipelineError> {
    let path = backbone_path(cfg);
    if path.exists() {
        return Ok(ToyCnnBackbone::load(&path)?);
    }
    let (images, labels, _) = load_train_images(ds)?;
    let tag = format!("toy-cnn-v1-{}", ds.manifest.name);
    let mut bb = ToyCnnBackbone::new(
        &tag,
        ds.manifest.num_classes,
        ds.manifest.image_size,
        cfg.metrics.backbone_base,
        derive_seed(cfg.seed, &["metric-backbone"]),
    );
    bb.train(
        &images,
        &labels,
        cfg.metrics.backbone_epochs,
        cfg.metrics.backbone_batch,
        cfg.metrics.backbone_lr,
        derive_seed(cfg.seed, &["metric-backbone-train"]),
    );
    bb.save(&path)?;
    Ok(bb)
}

struct EvalSet {
    images: Vec<RgbImage>,
    gt_images: Vec<RgbImage>,
    true_labels: Vec<usize>,
}

fn load_eval_set(
    dir: &Path,
    records: &[SampleRecord],
    files: &[String],
    ds: &Dataset,
) -> Result<EvalSet, PipelineError> {
    let mut images = Vec::with_capacity(files.len());
    let mut gt_images = Vec::with_capacity(files.len());
    let mut true_labels = Vec::with_capacity(files.len());
    for (rec, file) in records.iter().zip(files) {
        images.push(image::open(dir.join(file))?.to_rgb8());
        gt_images.push(ds.load_image(&rec.image_id)?.pixels);
        true_labels.push(rec.true_label);
    }
    Ok(EvalSet {
        images,
        gt_images,
        true_labels,
    })
}

/// `evaluate`: emits the metric grid (montage x gamma x raw/boosted), the
/// accuracy table, and the raw-vs-boosted gain table.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<(), PipelineError> {
    cfg.validate()?;
    let _lock = DirLock::acquire(&cfg.out_dir)?;
    let ds = dataset::load_dataset(&cfg.dataset)?;
    let bb = train_or_load_backbone(cfg, &ds)?;
    let run_id = cfg.run_id();
    let n_ways = cfg.metrics.n_ways.clamp(2, ds.manifest.num_classes);
    let k_hi = n_ways.min(5);

    // reference Gaussian from the ground-truth test images
    let gt_test: Vec<RgbImage> = ds
        .split_ids(Split::Test)
        .iter()
        .map(|id| {
            ds.load_image(&ds.manifest.trial_meta[id].image_id)
                .map(|s| s.pixels)
        })
        .collect::<Result<_, _>>()?;
    if gt_test.len() < 2 {
        return Err(PipelineError::ConfigValidation(
            "test split needs at least 2 trials for evaluation".into(),
        ));
    }
    let gt_summary = GaussianSummary::from_rows(&embedding_rows(&bb, &gt_test))?;

    let mut metric_rows = Vec::new();
    let mut accuracy_lines = vec![
        "run_id,montage,channels,level,gamma,n_way,k,accuracy,seed".to_string(),
    ];

    for name in &cfg.montages {
        let m = resolve_montage(name)?;
        let gen_dir = generated_dir(cfg, name);
        let gen_meta = require(gen_dir.join("metadata.jsonl"))?;
        let records: Vec<SampleRecord> = read_jsonl(&gen_meta)?;
        let boost_dir = boosted_dir(cfg, name);
        let boost_records: Vec<BoostRecord> = if boost_dir.join("metadata.jsonl").exists() {
            read_jsonl(&boost_dir.join("metadata.jsonl"))?
        } else {
            Vec::new()
        };

        // decoder-level N-way accuracy over the test split
        let dec_path = require(decoder_path(cfg, name))?;
        let decoder = DecoderModel::load(&dec_path)?;
        let test_trials: Vec<_> = ds
            .split_ids(Split::Test)
            .iter()
            .map(|id| {
                ds.load_trial_normalized(id)
                    .map_err(PipelineError::from)
                    .and_then(|t| m.project_trial(&t).map_err(PipelineError::from))
            })
            .collect::<Result<_, _>>()?;
        let scores = decoder.decode_batch(&test_trials)?;
        let labels: Vec<usize> = test_trials.iter().map(|t| t.class_label).collect();
        let acc_seed = derive_seed(cfg.seed, &["accuracy", name]);
        for k in [1usize, k_hi] {
            let acc = topk_accuracy(&scores, &labels, n_ways, k, acc_seed)?;
            accuracy_lines.push(format!(
                "{run_id},{name},{},decoder,,{n_ways},{k},{acc:.6},{acc_seed}",
                m.len()
            ));
        }

        for &gamma in &cfg.gammas {
            let of_gamma = |r: &&SampleRecord| r.gamma == gamma;
            let gamma_records: Vec<SampleRecord> =
                records.iter().filter(of_gamma).cloned().collect();
            if gamma_records.is_empty() {
                continue;
            }
            let files: Vec<String> = gamma_records.iter().map(|r| r.file.clone()).collect();
            let raw = load_eval_set(&gen_dir, &gamma_records, &files, &ds)?;
            let is_splits = cfg.metrics.is_splits.min(raw.images.len() / 2).max(1);
            let is_value = inception_score(&raw.images, &bb, is_splits)?;
            let gen_summary = GaussianSummary::from_rows(&embedding_rows(&bb, &raw.images))?;
            let fid_value = fid(&gen_summary, &gt_summary)?;
            let mut lpips_acc = 0.0;
            let mut clip_acc = 0.0;
            for (img, gt) in raw.images.iter().zip(&raw.gt_images) {
                lpips_acc += perceptual_distance(img, gt, &bb)?;
                clip_acc += embedding_similarity(img, gt, &bb)?;
            }
            let n = raw.images.len();
            metric_rows.push(MetricRow {
                run_id: run_id.clone(),
                montage: name.clone(),
                channels: m.len(),
                gamma,
                boosted: false,
                n_images: n,
                is: is_value,
                fid: fid_value,
                lpips: lpips_acc / n as f64,
                clip_sim: Some(clip_acc / n as f64),
                backbone_tag: bb.meta.tag.clone(),
                seed: cfg.seed,
            });

            // image-level N-way accuracy from the backbone classifier
            let probs = bb.class_probs(&raw.images);
            let img_acc_seed = derive_seed(cfg.seed, &["image-accuracy", name, &gamma_label(gamma)]);
            for k in [1usize, k_hi] {
                let acc = topk_accuracy(&probs, &raw.true_labels, n_ways, k, img_acc_seed)?;
                accuracy_lines.push(format!(
                    "{run_id},{name},{},image,{},{n_ways},{k},{acc:.6},{img_acc_seed}",
                    m.len(),
                    gamma_label(gamma)
                ));
            }

            // boosted rows: IS, FID, LPIPS only (no CLIP-Sim, no accuracy)
            let boosted_of_gamma: Vec<BoostRecord> = boost_records
                .iter()
                .filter(|r| r.gamma == gamma)
                .cloned()
                .collect();
            if !boosted_of_gamma.is_empty() {
                let b_files: Vec<String> =
                    boosted_of_gamma.iter().map(|r| r.file.clone()).collect();
                // align boosted records with their source sample records
                let by_file: BTreeMap<&str, &SampleRecord> =
                    records.iter().map(|r| (r.file.as_str(), r)).collect();
                let aligned: Vec<SampleRecord> = boosted_of_gamma
                    .iter()
                    .map(|b| (*by_file[b.source_file.as_str()]).clone())
                    .collect();
                let boosted = load_eval_set(&boost_dir, &aligned, &b_files, &ds)?;
                let is_b = inception_score(&boosted.images, &bb, is_splits)?;
                let sum_b = GaussianSummary::from_rows(&embedding_rows(&bb, &boosted.images))?;
                let fid_b = fid(&sum_b, &gt_summary)?;
                let mut lpips_b = 0.0;
                for (img, gt) in boosted.images.iter().zip(&boosted.gt_images) {
                    lpips_b += perceptual_distance(img, gt, &bb)?;
                }
                metric_rows.push(MetricRow {
                    run_id: run_id.clone(),
                    montage: name.clone(),
                    channels: m.len(),
                    gamma,
                    boosted: true,
                    n_images: boosted.images.len(),
                    is: is_b,
                    fid: fid_b,
                    lpips: lpips_b / boosted.images.len() as f64,
                    clip_sim: None,
                    backbone_tag: bb.meta.tag.clone(),
                    seed: cfg.seed,
                });
            }
        }
    }

    let dir = reports_dir(cfg);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut csv = String::from(metric_csv_header());
    csv.push('\n');
    for r in &metric_rows {
        csv.push_str(&metric_csv_row(r));
        csv.push('\n');
    }
    let metrics_path = dir.join("metrics.csv");
    fs::write(&metrics_path, csv).map_err(io_err(&metrics_path))?;

    let acc_path = dir.join("accuracy.csv");
    fs::write(&acc_path, accuracy_lines.join("\n") + "\n").map_err(io_err(&acc_path))?;

    // gain table: signed percent, positive = improvement
    let mut gains = vec!["run_id,montage,gamma,metric,raw,boosted,gain_pct".to_string()];
    for raw in metric_rows.iter().filter(|r| !r.boosted) {
        if let Some(b) = metric_rows
            .iter()
            .find(|r| r.boosted && r.montage == raw.montage && r.gamma == raw.gamma)
        {
            let entries = [
                ("is", raw.is, b.is, true),
                ("fid", raw.fid, b.fid, false),
                ("lpips", raw.lpips, b.lpips, false),
            ];
            for (metric, rv, bv, higher_better) in entries {
                let gain = if higher_better {
                    (bv - rv) / rv * 100.0
                } else {
                    (rv - bv) / rv * 100.0
                };
                gains.push(format!(
                    "{},{},{},{metric},{rv:.6},{bv:.6},{gain:.4}",
                    raw.run_id,
                    raw.montage,
                    gamma_label(raw.gamma)
                ));
            }
        }
    }
    let gains_path = dir.join("gains.csv");
    fs::write(&gains_path, gains.join("\n") + "\n").map_err(io_err(&gains_path))?;

    println!(
        "evaluate: {} metric rows -> {}",
        metric_rows.len(),
        metrics_path.display()
    );
    write_manifest(cfg, "evaluate")
}

#[derive(Debug, Serialize)]
struct AblationSummaryOut {
    montage: String,
    n_ways: usize,
    k_hi: usize,
    mode: ablation::RegionMode,
    baseline_top1: f64,
    baseline_top5: f64,
    electrodes: Vec<ablation::ElectrodeKnockoutResult>,
    regions: Vec<ablation::RegionKnockoutResult>,
}

/// `ablate`: per-electrode knockout sweep, region-removal study, topomap
/// exports, and a summary JSON with baseline and per-ablation deltas.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<(), PipelineError> {
    cfg.validate()?;
    let _lock = DirLock::acquire(&cfg.out_dir)?;
    let ds = dataset::load_dataset(&cfg.dataset)?;
    let name = if cfg.ablation.montage.is_empty() {
        cfg.montages[0].clone()
    } else {
        cfg.ablation.montage.clone()
    };
    let m = resolve_montage(&name)?;
    let dec_path = require(decoder_path(cfg, &name))?;
    let decoder = DecoderModel::load(&dec_path)?;
    let parent_trials: Vec<_> = ds
        .split_ids(Split::Test)
        .iter()
        .map(|id| ds.load_trial_normalized(id))
        .collect::<Result<_, _>>()?;
    let test_trials: Vec<_> = parent_trials
        .iter()
        .map(|t| m.project_trial(t))
        .collect::<Result<_, _>>()?;

    let n_ways = cfg.metrics.n_ways.clamp(2, ds.manifest.num_classes);
    let seed = derive_seed(cfg.seed, &["ablate", &name]);
    let sweep = ablation::electrode_sweep(&test_trials, &decoder, &m, n_ways, seed)?;
    let regions = match cfg.ablation.mode {
        ablation::RegionMode::ZeroFill => {
            ablation::region_sweep_zero_fill(&test_trials, &decoder, &m, n_ways, seed)?
        }
        ablation::RegionMode::Retrain => {
            let hyper = cfg.ablation.retrain.clone();
            let ds_ref = &ds;
            let factory = move |reduced: &Montage| {
                decoder::train_decoder(
                    ds_ref,
                    reduced,
                    &hyper,
                    derive_seed(seed, &["region-retrain", &reduced.name]),
                )
            };
            ablation::region_sweep_retrain(&test_trials, &m, &factory, n_ways, seed)?
        }
    };

    let dir = cfg.out_dir.join("ablation").join(&name);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    for (column, values) in [
        ("top1", sweep.results.iter().map(|r| r.top1).collect::<Vec<_>>()),
        ("top1_drop", sweep.results.iter().map(|r| r.top1_drop).collect()),
        ("top5", sweep.results.iter().map(|r| r.top5).collect()),
        ("top5_drop", sweep.results.iter().map(|r| r.top5_drop).collect()),
    ] {
        ablation::topomap_export(&values, &m, &dir.join(format!("topomap_{column}")))?;
    }
    let summary = AblationSummaryOut {
        montage: name.clone(),
        n_ways,
        k_hi: sweep.k_hi,
        mode: cfg.ablation.mode,
        baseline_top1: sweep.baseline_top1,
        baseline_top5: sweep.baseline_top5,
        electrodes: sweep.results,
        regions,
    };
    let path = dir.join("summary.json");
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))?;
    println!("ablate: {name} -> {}", path.display());
    write_manifest(cfg, "ablate")
}

/// `study-stats`: CSV of 2AFC preference trials in, JSON summary out.
pub fn cmd_study_stats(cfg: &RunConfig) -> Result<(), PipelineError> {
    let _lock = DirLock::acquire(&cfg.out_dir)?;
    let input = require(cfg.study.input_csv.clone())?;
    let file = fs::File::open(&input).map_err(io_err(&input))?;
    let trials = crate::stats::read_csv(file)?;
    let summary = crate::stats::summarize(&trials)?;
    let out = if cfg.study.output_json.is_absolute() {
        cfg.study.output_json.clone()
    } else {
        cfg.out_dir.join(&cfg.study.output_json)
    };
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    fs::write(&out, text).map_err(io_err(&out))?;
    println!(
        "study-stats: n={} preference {:.4} weighted {:.4} z {:.2} -> {}",
        summary.overall.n,
        summary.overall.preference_rate,
        summary.overall.weighted_preference_rate,
        summary.binomial.z,
        out.display()
    );
    write_manifest(cfg, "study-stats")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_id_is_deterministic_and_config_sensitive() {
        let a = RunConfig::default();
        let b = RunConfig::default();
        assert_eq!(a.run_id(), b.run_id());
        let c = RunConfig {
            seed: 8,
            ..RunConfig::default()
        };
        assert_ne!(a.run_id(), c.run_id());
    }

    #[test]
    fn validation_catches_bad_montages_gammas_and_strength() {
        let mut cfg = RunConfig {
            montages: vec!["synth-16".into()],
            ..RunConfig::default()
        };
        cfg.validate().unwrap();
        cfg.montages = vec!["no-such-montage".into()];
        assert!(matches!(
            cfg.validate(),
            Err(PipelineError::ConfigValidation(_))
        ));
        cfg.montages = vec!["synth-16".into()];
        cfg.gammas = vec![-1.0];
        assert!(cfg.validate().is_err());
        cfg.gammas = vec![4.0];
        cfg.boost.strength = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn dir_lock_blocks_second_writer_and_releases_on_drop() {
        let dir = tempfile::tempdir().unwrap();
        let lock = DirLock::acquire(dir.path()).unwrap();
        assert!(matches!(
            DirLock::acquire(dir.path()),
            Err(PipelineError::Locked(_))
        ));
        drop(lock);
        DirLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn derive_seed_separates_contexts() {
        let a = derive_seed(7, &["generate", "synth-16", "trial_k00_000", "0", "4"]);
        let b = derive_seed(7, &["generate", "synth-16", "trial_k00_000", "0", "7.5"]);
        let c = derive_seed(7, &["generate", "synth-16", "trial_k00_000", "1", "4"]);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(
            a,
            derive_seed(7, &["generate", "synth-16", "trial_k00_000", "0", "4"])
        );
    }

    #[test]
    fn missing_prerequisite_maps_to_exit_code_2() {
        let e = PipelineError::MissingPrerequisite(PathBuf::from("/nope/decoder.ckpt"));
        assert_eq!(e.exit_code(), 2);
        let v = PipelineError::ConfigValidation("bad".into());
        assert_eq!(v.exit_code(), 1);
    }
}
