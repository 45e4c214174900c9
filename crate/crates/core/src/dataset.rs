//! Paired EEG/image dataset IO.
//!
//! On-disk interchange layout:
//!
//! ```text
//! <root>/
//!   manifest.json        # dataset description, splits, per-trial metadata
//!   trials/<id>.bin      # row-major C x L float32 little-endian
//!   images/<id>.png      # 8-bit RGB
//! ```
//!
//! A deterministic synthetic generator plants a class-specific oscillation on
//! chosen channels so decoding and ablation behaviour can be checked against
//! known ground truth.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::nn::params::normal_sample;

/// One EEG recording: channels x samples, in microvolts.
#[derive(Debug, Clone)]
pub struct EegTrial {
    pub trial_id: String,
    pub subject: u32,
    pub data: Array2<f64>,
    pub class_label: usize,
    pub image_id: String,
}

impl EegTrial {
    pub fn channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn samples(&self) -> usize {
        self.data.ncols()
    }
}

/// A stimulus image paired with one or more trials.
#[derive(Debug, Clone)]
pub struct StimulusImage {
    pub image_id: String,
    pub pixels: RgbImage,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn all_ids(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(self.val.iter()).chain(self.test.iter())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Per-channel statistics gathered from the training split.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Normalization {
    pub channel_mean: Vec<f64>,
    pub channel_std: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrialMeta {
    pub subject: u32,
    pub class_label: usize,
    pub image_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub channels: usize,
    pub samples_per_trial: usize,
    pub sampling_rate_hz: f64,
    pub electrode_labels: Vec<String>,
    pub splits: Splits,
    /// Per-trial subject/class/image metadata, keyed by trial id.
    pub trial_meta: BTreeMap<String, TrialMeta>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
    /// Image side length (images are square HxW=WxH).
    pub image_size: u32,
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("missing manifest: {0}")]
    MissingManifest(PathBuf),
    #[error("trial {trial_id}: expected {expected} bytes (C*L*4), found {actual}")]
    ShapeMismatch {
        trial_id: String,
        expected: u64,
        actual: u64,
    },
    #[error("unknown trial id in split: {0}")]
    UnknownTrialId(String),
    #[error("trial {0} contains non-finite samples")]
    NonFinite(String),
    #[error("image {image_id}: expected {expected}x{expected}, found {w}x{h}")]
    ImageShape {
        image_id: String,
        expected: u32,
        w: u32,
        h: u32,
    },
    #[error("informative channel index {index} out of range for C={channels}")]
    InvalidChannelIndex { index: usize, channels: usize },
    #[error("split ratios must sum to 1 (got {0})")]
    RatioSumError(f64),
    #[error("class label {label} out of range for K={num_classes}")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest parse error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error for {id}: {source}")]
    Image {
        id: String,
        source: image::ImageError,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// An opened dataset directory. Trials and images are read lazily; loading is
/// read-only and safe for concurrent readers.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    pub manifest: DatasetManifest,
}

/// Opens and validates a dataset directory.
///
/// Every trial id referenced by a split must have a `trials/<id>.bin` of
/// exactly `C*L*4` bytes, metadata, and an existing image file.
pub fn load_dataset(root: &Path) -> Result<Dataset, DatasetError> {
    let manifest_path = root.join("manifest.json");
    if !manifest_path.is_file() {
        return Err(DatasetError::MissingManifest(manifest_path));
    }
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    let ds = Dataset {
        root: root.to_path_buf(),
        manifest,
    };
    ds.validate()?;
    Ok(ds)
}

impl Dataset {
    pub fn root(&self) -> &Path {
        &self.root
    }

    fn validate(&self) -> Result<(), DatasetError> {
        let m = &self.manifest;
        if m.electrode_labels.len() != m.channels {
            return Err(DatasetError::InvalidConfig(format!(
                "electrode_labels has {} entries for C={}",
                m.electrode_labels.len(),
                m.channels
            )));
        }
        if m.class_names.len() != m.num_classes {
            return Err(DatasetError::InvalidConfig(format!(
                "class_names has {} entries for K={}",
                m.class_names.len(),
                m.num_classes
            )));
        }
        let expected = (m.channels * m.samples_per_trial * 4) as u64;
        for id in m.splits.all_ids() {
            let meta = m
                .trial_meta
                .get(id)
                .ok_or_else(|| DatasetError::UnknownTrialId(id.clone()))?;
            if meta.class_label >= m.num_classes {
                return Err(DatasetError::LabelOutOfRange {
                    label: meta.class_label,
                    num_classes: m.num_classes,
                });
            }
            let bin = self.trial_path(id);
            let len = fs::metadata(&bin).map_err(io_err(&bin))?.len();
            if len != expected {
                return Err(DatasetError::ShapeMismatch {
                    trial_id: id.clone(),
                    expected,
                    actual: len,
                });
            }
            let img = self.image_path(&meta.image_id);
            if !img.is_file() {
                return Err(DatasetError::Io {
                    path: img,
                    source: std::io::Error::new(std::io::ErrorKind::NotFound, "missing image"),
                });
            }
        }
        Ok(())
    }

    pub fn trial_path(&self, id: &str) -> PathBuf {
        self.root.join("trials").join(format!("{id}.bin"))
    }

    pub fn image_path(&self, image_id: &str) -> PathBuf {
        self.root.join("images").join(format!("{image_id}.png"))
    }

    /// Raw trial as stored on disk (no normalization applied).
    pub fn load_trial(&self, id: &str) -> Result<EegTrial, DatasetError> {
        let meta = self
            .manifest
            .trial_meta
            .get(id)
            .ok_or_else(|| DatasetError::UnknownTrialId(id.to_string()))?;
        let path = self.trial_path(id);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let c = self.manifest.channels;
        let l = self.manifest.samples_per_trial;
        if bytes.len() != c * l * 4 {
            return Err(DatasetError::ShapeMismatch {
                trial_id: id.to_string(),
                expected: (c * l * 4) as u64,
                actual: bytes.len() as u64,
            });
        }
        let mut data = Array2::<f64>::zeros((c, l));
        for (i, chunk) in bytes.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
            data[[i / l, i % l]] = v;
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DatasetError::NonFinite(id.to_string()));
        }
        Ok(EegTrial {
            trial_id: id.to_string(),
            subject: meta.subject,
            data,
            class_label: meta.class_label,
            image_id: meta.image_id.clone(),
        })
    }

    /// Trial with per-channel z-scoring from the manifest's train statistics.
    pub fn load_trial_normalized(&self, id: &str) -> Result<EegTrial, DatasetError> {
        let mut trial = self.load_trial(id)?;
        if let Some(norm) = &self.manifest.normalization {
            for (ch, mut row) in trial.data.rows_mut().into_iter().enumerate() {
                let mean = norm.channel_mean[ch];
                let std = norm.channel_std[ch].max(1e-12);
                row.mapv_inplace(|v| (v - mean) / std);
            }
        }
        Ok(trial)
    }

    pub fn load_image(&self, image_id: &str) -> Result<StimulusImage, DatasetError> {
        let path = self.image_path(image_id);
        let img = image::open(&path)
            .map_err(|source| DatasetError::Image {
                id: image_id.to_string(),
                source,
            })?
            .to_rgb8();
        let expected = self.manifest.image_size;
        if img.width() != expected || img.height() != expected {
            return Err(DatasetError::ImageShape {
                image_id: image_id.to_string(),
                expected,
                w: img.width(),
                h: img.height(),
            });
        }
        Ok(StimulusImage {
            image_id: image_id.to_string(),
            pixels: img,
        })
    }

    /// Lazily yields normalized trials of a split, in split order.
    pub fn trials<'a>(
        &'a self,
        split: Split,
    ) -> impl Iterator<Item = Result<EegTrial, DatasetError>> + 'a {
        self.manifest
            .splits
            .get(split)
            .iter()
            .map(move |id| self.load_trial_normalized(id))
    }

    pub fn split_ids(&self, split: Split) -> &[String] {
        self.manifest.splits.get(split)
    }

    pub fn class_name(&self, label: usize) -> &str {
        &self.manifest.class_names[label]
    }
}

/// Configuration for [`generate_synthetic`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub channels: usize,
    pub samples_per_trial: usize,
    pub n_per_class: usize,
    pub informative_channels: Vec<usize>,
    pub seed: u64,
    pub sampling_rate_hz: f64,
    /// Amplitude of the planted class oscillation (1.0 = the default recipe).
    pub amplitude: f64,
    pub noise_std: f64,
    pub image_size: u32,
    pub electrode_labels: Option<Vec<String>>,
    pub split_ratios: (f64, f64, f64),
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_classes: 4,
            channels: 16,
            samples_per_trial: 128,
            n_per_class: 50,
            informative_channels: vec![0, 1, 14, 15],
            seed: 7,
            sampling_rate_hz: 128.0,
            amplitude: 1.0,
            noise_std: 1.0,
            image_size: 32,
            electrode_labels: None,
            split_ratios: (0.8, 0.1, 0.1),
        }
    }
}

const COLOR_NAMES: [&str; 10] = [
    "red", "green", "blue", "yellow", "purple", "orange", "teal", "magenta", "olive", "navy",
];
const COLORS: [[u8; 3]; 10] = [
    [220, 50, 47],
    [40, 160, 60],
    [38, 90, 220],
    [230, 200, 40],
    [140, 60, 180],
    [235, 130, 30],
    [30, 160, 160],
    [200, 40, 140],
    [120, 130, 40],
    [30, 40, 120],
];
const SHAPE_NAMES: [&str; 6] = ["circle", "square", "triangle", "diamond", "ring", "cross"];

/// Default class names for the synthetic set: "<color> <shape>".
pub fn synthetic_class_name(k: usize) -> String {
    format!(
        "{} {}",
        COLOR_NAMES[k % COLOR_NAMES.len()],
        SHAPE_NAMES[(k / COLOR_NAMES.len() + k) % SHAPE_NAMES.len()]
    )
}

fn inside_shape(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= r && dy.abs() <= r,
        2 => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
        3 => dx.abs() + dy.abs() <= r,
        4 => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (r * 0.55) * (r * 0.55)
        }
        _ => (dx.abs() <= r / 3.0 || dy.abs() <= r / 3.0) && dx.abs() <= r && dy.abs() <= r,
    }
}

/// Draws one class icon: a colored shape with seeded position/size jitter on
/// a lightly tinted background.
pub fn draw_class_icon(class: usize, size: u32, rng: &mut ChaCha12Rng) -> RgbImage {
    use rand::Rng;
    let color = COLORS[class % COLORS.len()];
    let shape = (class / COLOR_NAMES.len() + class) % SHAPE_NAMES.len();
    let half = size as f64 / 2.0;
    let cx = half + rng.gen_range(-3.0..3.0);
    let cy = half + rng.gen_range(-3.0..3.0);
    let r = rng.gen_range(0.25 * size as f64..0.38 * size as f64);
    let tint: i16 = rng.gen_range(-12..12);
    let bg = |v: i32| (v + tint as i32).clamp(0, 255) as u8;
    let mut img = RgbImage::from_pixel(size, size, image::Rgb([bg(231), bg(229), bg(226)]));
    for py in 0..size {
        for px in 0..size {
            let dx = px as f64 + 0.5 - cx;
            let dy = py as f64 + 0.5 - cy;
            if inside_shape(shape, dx, dy, r) {
                img.put_pixel(px, py, image::Rgb(color));
            }
        }
    }
    img
}

/// Generates a deterministic synthetic dataset on disk and returns it opened.
///
/// Class `k` emits `amplitude * sin(2*pi*(4+2k)Hz * t)` on every informative
/// channel; every channel carries i.i.d. `N(0, noise_std^2)` noise. The same
/// seed reproduces the dataset byte for byte.
pub fn generate_synthetic(cfg: &SyntheticConfig, out_dir: &Path) -> Result<Dataset, DatasetError> {
    if cfg.num_classes < 2 {
        return Err(DatasetError::InvalidConfig("K must be >= 2".into()));
    }
    for &ix in &cfg.informative_channels {
        if ix >= cfg.channels {
            return Err(DatasetError::InvalidChannelIndex {
                index: ix,
                channels: cfg.channels,
            });
        }
    }
    let labels = match &cfg.electrode_labels {
        Some(l) => {
            if l.len() != cfg.channels {
                return Err(DatasetError::InvalidConfig(format!(
                    "electrode_labels has {} entries for C={}",
                    l.len(),
                    cfg.channels
                )));
            }
            l.clone()
        }
        None => (0..cfg.channels).map(|i| format!("ch{i:03}")).collect(),
    };

    let trials_dir = out_dir.join("trials");
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&trials_dir).map_err(io_err(&trials_dir))?;
    fs::create_dir_all(&images_dir).map_err(io_err(&images_dir))?;

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut trial_meta = BTreeMap::new();
    let mut raw_by_id: BTreeMap<String, Vec<f64>> = BTreeMap::new();

    for k in 0..cfg.num_classes {
        let freq = 4.0 + 2.0 * k as f64;
        for i in 0..cfg.n_per_class {
            let trial_id = format!("trial_k{k:02}_{i:03}");
            let image_id = format!("img_k{k:02}_{i:03}");
            let mut data = vec![0f32; cfg.channels * cfg.samples_per_trial];
            for c in 0..cfg.channels {
                let informative = cfg.informative_channels.contains(&c);
                for t in 0..cfg.samples_per_trial {
                    let mut v = cfg.noise_std * normal_sample(&mut rng);
                    if informative {
                        let phase =
                            2.0 * std::f64::consts::PI * freq * t as f64 / cfg.sampling_rate_hz;
                        v += cfg.amplitude * phase.sin();
                    }
                    data[c * cfg.samples_per_trial + t] = v as f32;
                }
            }
            let bin_path = trials_dir.join(format!("{trial_id}.bin"));
            let mut f = fs::File::create(&bin_path).map_err(io_err(&bin_path))?;
            let mut bytes = Vec::with_capacity(data.len() * 4);
            for v in &data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            f.write_all(&bytes).map_err(io_err(&bin_path))?;
            raw_by_id.insert(trial_id.clone(), data.iter().map(|&v| v as f64).collect());

            let img = draw_class_icon(k, cfg.image_size, &mut rng);
            let img_path = images_dir.join(format!("{image_id}.png"));
            img.save(&img_path).map_err(|source| DatasetError::Image {
                id: image_id.clone(),
                source,
            })?;
            trial_meta.insert(
                trial_id,
                TrialMeta {
                    subject: 0,
                    class_label: k,
                    image_id,
                },
            );
        }
    }

    let mut manifest = DatasetManifest {
        name: format!("synthetic-k{}-c{}", cfg.num_classes, cfg.channels),
        num_classes: cfg.num_classes,
        class_names: (0..cfg.num_classes).map(synthetic_class_name).collect(),
        channels: cfg.channels,
        samples_per_trial: cfg.samples_per_trial,
        sampling_rate_hz: cfg.sampling_rate_hz,
        electrode_labels: labels,
        splits: Splits::default(),
        trial_meta,
        normalization: None,
        image_size: cfg.image_size,
    };
    split_trials(&mut manifest, cfg.split_ratios, cfg.seed)?;

    // Per-channel z-scoring statistics from the train split.
    let l = cfg.samples_per_trial;
    let mut sum = vec![0f64; cfg.channels];
    let mut sq = vec![0f64; cfg.channels];
    let mut count = 0usize;
    for id in &manifest.splits.train {
        let row = raw_by_id
            .get(id)
            .ok_or_else(|| DatasetError::UnknownTrialId(id.clone()))?;
        for c in 0..cfg.channels {
            for t in 0..l {
                let v = row[c * l + t];
                sum[c] += v;
                sq[c] += v * v;
            }
        }
        count += l;
    }
    let norm = Normalization {
        channel_mean: sum.iter().map(|m| m / count as f64).collect(),
        channel_std: sum
            .iter()
            .zip(&sq)
            .map(|(m, s)| {
                let mu = m / count as f64;
                ((s / count as f64 - mu * mu).max(0.0)).sqrt()
            })
            .collect(),
    };
    manifest.normalization = Some(norm);

    write_manifest(out_dir, &manifest)?;
    load_dataset(out_dir)
}

pub fn write_manifest(root: &Path, manifest: &DatasetManifest) -> Result<(), DatasetError> {
    let path = root.join("manifest.json");
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(())
}

/// Reassigns splits: stratified per class, deterministic under `seed`.
/// Per-class counts come from largest-remainder allocation, so they deviate
/// from the exact ratio by at most one trial.
pub fn split_trials(
    manifest: &mut DatasetManifest,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(), DatasetError> {
    let sum = ratios.0 + ratios.1 + ratios.2;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(DatasetError::RatioSumError(sum));
    }
    let mut by_class: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (id, meta) in &manifest.trial_meta {
        by_class.entry(meta.class_label).or_default().push(id.clone());
    }
    let mut splits = Splits::default();
    for (class, mut ids) in by_class {
        ids.sort();
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ (0x9e3779b9 * (class as u64 + 1)));
        ids.shuffle(&mut rng);
        let n = ids.len();
        let exact = [ratios.0 * n as f64, ratios.1 * n as f64, ratios.2 * n as f64];
        let mut alloc: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut leftover = n - alloc.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| {
            let ra = exact[a] - exact[a].floor();
            let rb = exact[b] - exact[b].floor();
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        for &ix in &order {
            if leftover == 0 {
                break;
            }
            alloc[ix] += 1;
            leftover -= 1;
        }
        let mut it = ids.into_iter();
        splits.train.extend(it.by_ref().take(alloc[0]));
        splits.val.extend(it.by_ref().take(alloc[1]));
        splits.test.extend(it.by_ref().take(alloc[2]));
    }
    manifest.splits = splits;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use sha2::{Digest, Sha256};

    fn tiny_cfg() -> SyntheticConfig {
        SyntheticConfig {
            num_classes: 3,
            channels: 4,
            samples_per_trial: 16,
            n_per_class: 10,
            informative_channels: vec![0],
            seed: 11,
            image_size: 16,
            ..SyntheticConfig::default()
        }
    }

    fn dir_hash(root: &Path) -> String {
        let mut paths: Vec<PathBuf> = walk(root);
        paths.sort();
        let mut hasher = Sha256::new();
        for p in paths {
            hasher.update(p.strip_prefix(root).unwrap().to_string_lossy().as_bytes());
            hasher.update(fs::read(&p).unwrap());
        }
        format!("{:x}", hasher.finalize())
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn same_seed_gives_byte_identical_datasets() {
        let cfg = tiny_cfg();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_synthetic(&cfg, d1.path()).unwrap();
        generate_synthetic(&cfg, d2.path()).unwrap();
        assert_eq!(dir_hash(d1.path()), dir_hash(d2.path()));
    }

    #[test]
    fn roundtrip_preserves_float32_bits() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&tiny_cfg(), dir.path()).unwrap();
        let id = ds.manifest.splits.train[0].clone();
        let raw = fs::read(ds.trial_path(&id)).unwrap();
        let trial = ds.load_trial(&id).unwrap();
        let mut rebuilt = Vec::with_capacity(raw.len());
        for v in trial.data.iter() {
            rebuilt.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        assert_eq!(raw, rebuilt);
    }

    #[test]
    fn split_is_stratified_within_one_trial() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = generate_synthetic(&tiny_cfg(), dir.path()).unwrap();
        split_trials(&mut ds.manifest, (0.8, 0.1, 0.1), 3).unwrap();
        for k in 0..3usize {
            let count = |ids: &[String]| {
                ids.iter()
                    .filter(|id| ds.manifest.trial_meta[*id].class_label == k)
                    .count() as f64
            };
            let n = 10.0;
            assert!((count(&ds.manifest.splits.train) - 0.8 * n).abs() <= 1.0);
            assert!((count(&ds.manifest.splits.val) - 0.1 * n).abs() <= 1.0);
            assert!((count(&ds.manifest.splits.test) - 0.1 * n).abs() <= 1.0);
        }
    }

    #[test]
    fn fifty_per_class_at_80_10_10_gives_40_5_5() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig {
            n_per_class: 50,
            num_classes: 2,
            channels: 2,
            samples_per_trial: 8,
            informative_channels: vec![0],
            image_size: 8,
            ..SyntheticConfig::default()
        };
        let ds = generate_synthetic(&cfg, dir.path()).unwrap();
        for k in 0..2usize {
            let count = |ids: &[String]| {
                ids.iter()
                    .filter(|id| ds.manifest.trial_meta[*id].class_label == k)
                    .count()
            };
            assert_eq!(count(&ds.manifest.splits.train), 40);
            assert_eq!(count(&ds.manifest.splits.val), 5);
            assert_eq!(count(&ds.manifest.splits.test), 5);
        }
    }

    #[test]
    fn bad_ratios_and_bad_channels_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = generate_synthetic(&tiny_cfg(), dir.path()).unwrap();
        assert!(matches!(
            split_trials(&mut ds.manifest, (0.5, 0.5, 0.1), 1),
            Err(DatasetError::RatioSumError(_))
        ));
        split_trials(&mut ds.manifest, (1.0, 0.0, 0.0), 1).unwrap();
        assert_eq!(ds.manifest.splits.train.len(), 30);
        assert!(ds.manifest.splits.val.is_empty());

        let bad = SyntheticConfig {
            informative_channels: vec![20],
            ..tiny_cfg()
        };
        let dir2 = tempfile::tempdir().unwrap();
        assert!(matches!(
            generate_synthetic(&bad, dir2.path()),
            Err(DatasetError::InvalidChannelIndex { index: 20, .. })
        ));
    }

    #[test]
    fn truncated_trial_file_is_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&tiny_cfg(), dir.path()).unwrap();
        let id = ds.manifest.splits.train[0].clone();
        let path = ds.trial_path(&id);
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(DatasetError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn empty_dataset_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("trials")).unwrap();
        fs::create_dir_all(dir.path().join("images")).unwrap();
        let manifest = DatasetManifest {
            name: "empty".into(),
            num_classes: 2,
            class_names: vec!["a".into(), "b".into()],
            channels: 4,
            samples_per_trial: 8,
            sampling_rate_hz: 128.0,
            electrode_labels: (0..4).map(|i| format!("ch{i}")).collect(),
            splits: Splits::default(),
            trial_meta: BTreeMap::new(),
            normalization: None,
            image_size: 8,
        };
        write_manifest(dir.path(), &manifest).unwrap();
        assert!(load_dataset(dir.path()).is_ok());
    }

    #[test]
    fn missing_manifest_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(DatasetError::MissingManifest(_))
        ));
    }

    #[test]
    fn split_referencing_unknown_trial_fails() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&tiny_cfg(), dir.path()).unwrap();
        let mut manifest = ds.manifest.clone();
        manifest.splits.test.push("trial_missing".into());
        write_manifest(dir.path(), &manifest).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(DatasetError::UnknownTrialId(_))
        ));
    }

    #[test]
    fn normalization_z_scores_train_channels() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&tiny_cfg(), dir.path()).unwrap();
        let norm = ds.manifest.normalization.as_ref().unwrap();
        // Recompute mean over train split from normalized trials: ~0 per channel.
        let mut sums = vec![0f64; 4];
        let mut n = 0usize;
        for t in ds.trials(Split::Train) {
            let t = t.unwrap();
            for (c, row) in t.data.rows().into_iter().enumerate() {
                sums[c] += row.sum();
            }
            n += t.samples();
        }
        for s in &sums {
            assert!((s / n as f64).abs() < 1e-6);
        }
        assert_eq!(norm.channel_mean.len(), 4);
    }
}
