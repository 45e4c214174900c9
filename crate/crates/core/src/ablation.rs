//! Electrode knockout and region-removal studies against a trained decoder,
//! with topographic map export.
//!
//! A knockout zeroes one channel and re-evaluates decoding accuracy over the
//! full test split; the region study removes all electrodes of one region,
//! either by zero-filling their rows (one decoder serves every sweep) or by
//! retraining on the remaining channels.

use image::RgbImage;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::dataset::EegTrial;
use crate::decoder::{topk_accuracy, DecoderError, DecoderModel};
use crate::montage::{Montage, MontageError, Region, ALL_REGIONS};

#[derive(Debug, thiserror::Error)]
pub enum AblationError {
    #[error("channel index {index} out of range for {channels} channels")]
    IndexOutOfRange { index: usize, channels: usize },
    #[error("region {0} absent from montage")]
    EmptyRegion(Region),
    #[error("got {values} values for {electrodes} electrodes")]
    CountMismatch { values: usize, electrodes: usize },
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Montage(#[from] MontageError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("png encode error: {0}")]
    Png(#[from] image::ImageError),
}

/// Returns a copy of the trial with one channel zeroed; the input is not
/// mutated and double knockout equals single knockout.
pub fn knockout_electrode(trial: &EegTrial, channel_index: usize) -> Result<EegTrial, AblationError> {
    if channel_index >= trial.channels() {
        return Err(AblationError::IndexOutOfRange {
            index: channel_index,
            channels: trial.channels(),
        });
    }
    let mut out = trial.clone();
    out.data.row_mut(channel_index).fill(0.0);
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct ElectrodeKnockoutResult {
    pub label: String,
    pub top1: f64,
    pub top5: f64,
    pub top1_drop: f64,
    pub top5_drop: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ElectrodeSweep {
    pub n_ways: usize,
    /// The "top5" column uses k = min(5, n_ways).
    pub k_hi: usize,
    pub baseline_top1: f64,
    pub baseline_top5: f64,
    pub results: Vec<ElectrodeKnockoutResult>,
}

fn accuracy_pair(
    decoder: &DecoderModel,
    trials: &[EegTrial],
    n_ways: usize,
    k_hi: usize,
    seed: u64,
) -> Result<(f64, f64), AblationError> {
    let scores = decoder.decode_batch(trials)?;
    let labels: Vec<usize> = trials.iter().map(|t| t.class_label).collect();
    let top1 = topk_accuracy(&scores, &labels, n_ways, 1, seed)?;
    let tophi = topk_accuracy(&scores, &labels, n_ways, k_hi, seed)?;
    Ok((top1, tophi))
}

/// Zeroes each electrode in turn and measures N-way accuracy over the full
/// test split. The distractor seed is shared across electrodes so accuracy
/// differences come from the knockout alone.
pub fn electrode_sweep(
    test_trials: &[EegTrial],
    decoder: &DecoderModel,
    montage: &Montage,
    n_ways: usize,
    seed: u64,
) -> Result<ElectrodeSweep, AblationError> {
    let k_hi = n_ways.min(5);
    let (baseline_top1, baseline_top5) = accuracy_pair(decoder, test_trials, n_ways, k_hi, seed)?;
    let mut results = Vec::with_capacity(montage.len());
    for (ch, electrode) in montage.electrodes.iter().enumerate() {
        let knocked: Vec<EegTrial> = test_trials
            .iter()
            .map(|t| knockout_electrode(t, ch))
            .collect::<Result<_, _>>()?;
        let (top1, top5) = accuracy_pair(decoder, &knocked, n_ways, k_hi, seed)?;
        results.push(ElectrodeKnockoutResult {
            label: electrode.label.clone(),
            top1,
            top5,
            top1_drop: baseline_top1 - top1,
            top5_drop: baseline_top5 - top5,
        });
    }
    Ok(ElectrodeSweep {
        n_ways,
        k_hi,
        baseline_top1,
        baseline_top5,
        results,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionMode {
    /// Zero the region's rows, keeping the decoder input shape.
    ZeroFill,
    /// Retrain a decoder on the montage without the region.
    Retrain,
}

#[derive(Debug, Clone, Serialize)]
pub struct RegionKnockoutResult {
    pub region: Region,
    pub remaining_channels: usize,
    pub top1: f64,
    pub top5: f64,
    pub mode: RegionMode,
}

/// Region study in zero-fill mode: one decoder serves all five sweeps.
pub fn region_sweep_zero_fill(
    test_trials: &[EegTrial],
    decoder: &DecoderModel,
    montage: &Montage,
    n_ways: usize,
    seed: u64,
) -> Result<Vec<RegionKnockoutResult>, AblationError> {
    let k_hi = n_ways.min(5);
    let mut out = Vec::with_capacity(ALL_REGIONS.len());
    for region in ALL_REGIONS {
        let members = montage.region_indices(region);
        if members.is_empty() {
            return Err(AblationError::EmptyRegion(region));
        }
        let knocked: Vec<EegTrial> = test_trials
            .iter()
            .map(|t| {
                let mut t = t.clone();
                for &ch in &members {
                    t.data.row_mut(ch).fill(0.0);
                }
                t
            })
            .collect();
        let (top1, top5) = accuracy_pair(decoder, &knocked, n_ways, k_hi, seed)?;
        out.push(RegionKnockoutResult {
            region,
            remaining_channels: montage.len() - members.len(),
            top1,
            top5,
            mode: RegionMode::ZeroFill,
        });
    }
    Ok(out)
}

/// Region study in retrain mode: `factory` builds and trains a decoder for
/// each reduced montage, and `project` yields the test trials in the parent
/// layout for reprojection.
pub fn region_sweep_retrain(
    parent_trials: &[EegTrial],
    montage: &Montage,
    factory: &dyn Fn(&Montage) -> Result<DecoderModel, DecoderError>,
    n_ways: usize,
    seed: u64,
) -> Result<Vec<RegionKnockoutResult>, AblationError> {
    let k_hi = n_ways.min(5);
    let mut out = Vec::with_capacity(ALL_REGIONS.len());
    for region in ALL_REGIONS {
        let members = montage.region_indices(region);
        if members.is_empty() {
            return Err(AblationError::EmptyRegion(region));
        }
        let remaining: Vec<String> = montage
            .electrodes
            .iter()
            .enumerate()
            .filter(|(i, _)| !members.contains(i))
            .map(|(_, e)| e.label.clone())
            .collect();
        let reduced = Montage::reduce(
            montage,
            &format!("{}-minus-{region}", montage.name),
            &remaining,
        )?;
        let decoder = factory(&reduced)?;
        let projected: Vec<EegTrial> = parent_trials
            .iter()
            .map(|t| reduced.project_trial(t))
            .collect::<Result<_, _>>()?;
        let (top1, top5) = accuracy_pair(&decoder, &projected, n_ways, k_hi, seed)?;
        out.push(RegionKnockoutResult {
            region,
            remaining_channels: reduced.len(),
            top1,
            top5,
            mode: RegionMode::Retrain,
        });
    }
    Ok(out)
}

/// Inverse-distance-weighted interpolation (power 2) of per-electrode values
/// onto a grid masked to the unit disc. Cells outside the disc are NaN.
pub fn render_grid(
    values: &[f64],
    montage: &Montage,
    resolution: usize,
) -> Result<Array2<f64>, AblationError> {
    if values.len() != montage.len() {
        return Err(AblationError::CountMismatch {
            values: values.len(),
            electrodes: montage.len(),
        });
    }
    let mut grid = Array2::<f64>::from_elem((resolution, resolution), f64::NAN);
    for gy in 0..resolution {
        for gx in 0..resolution {
            let x = 2.0 * (gx as f64 + 0.5) / resolution as f64 - 1.0;
            let y = 1.0 - 2.0 * (gy as f64 + 0.5) / resolution as f64;
            if x * x + y * y > 1.0 {
                continue;
            }
            let mut num = 0.0;
            let mut den = 0.0;
            let mut exact = None;
            for (e, &v) in montage.electrodes.iter().zip(values) {
                let d2 = (x - e.x) * (x - e.x) + (y - e.y) * (y - e.y);
                if d2 < 1e-9 {
                    exact = Some(v);
                    break;
                }
                let w = 1.0 / d2;
                num += w * v;
                den += w;
            }
            grid[[gy, gx]] = exact.unwrap_or(num / den);
        }
    }
    Ok(grid)
}

fn colormap(t: f64) -> [u8; 3] {
    // blue -> cyan -> yellow -> red ramp
    let t = t.clamp(0.0, 1.0);
    let stops: [(f64, [f64; 3]); 4] = [
        (0.0, [40.0, 60.0, 180.0]),
        (0.35, [60.0, 200.0, 220.0]),
        (0.7, [235.0, 220.0, 80.0]),
        (1.0, [200.0, 40.0, 40.0]),
    ];
    for w in stops.windows(2) {
        let (t0, c0) = w[0];
        let (t1, c1) = w[1];
        if t <= t1 {
            let f = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
            return [0, 1, 2].map(|i| (c0[i] + f * (c1[i] - c0[i])).round() as u8);
        }
    }
    [200, 40, 40]
}

/// Writes `<stem>.csv` (label,x,y,value) and `<stem>.png` (IDW disc with
/// electrode dots). Returns the two paths.
pub fn topomap_export(
    values: &[f64],
    montage: &Montage,
    stem: &Path,
) -> Result<(PathBuf, PathBuf), AblationError> {
    let csv_path = stem.with_extension("csv");
    let png_path = stem.with_extension("png");

    let mut csv = String::from("label,x,y,value\n");
    for (e, v) in montage.electrodes.iter().zip(values) {
        csv.push_str(&format!("{},{:.4},{:.4},{:.6}\n", e.label, e.x, e.y, v));
    }
    std::fs::write(&csv_path, csv).map_err(|source| AblationError::Io {
        path: csv_path.clone(),
        source,
    })?;

    let res = 256usize;
    let grid = render_grid(values, montage, res)?;
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
        (l.min(v), h.max(v))
    });
    let span = (hi - lo).max(1e-12);
    let mut img = RgbImage::from_pixel(res as u32, res as u32, image::Rgb([255, 255, 255]));
    for gy in 0..res {
        for gx in 0..res {
            let v = grid[[gy, gx]];
            if v.is_nan() {
                continue;
            }
            img.put_pixel(gx as u32, gy as u32, image::Rgb(colormap((v - lo) / span)));
        }
    }
    // electrode positions as dark dots
    for e in &montage.electrodes {
        let gx = ((e.x + 1.0) / 2.0 * res as f64) as i64;
        let gy = ((1.0 - e.y) / 2.0 * res as f64) as i64;
        for dy in -1..=1i64 {
            for dx in -1..=1i64 {
                let (px, py) = (gx + dx, gy + dy);
                if px >= 0 && py >= 0 && (px as usize) < res && (py as usize) < res {
                    img.put_pixel(px as u32, py as u32, image::Rgb([30, 30, 30]));
                }
            }
        }
    }
    img.save(&png_path)?;
    Ok((csv_path, png_path))
}
