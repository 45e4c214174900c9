//! EEG-to-class decoding: the recurrent decoder that supplies the coarse
//! semantic prior, caption construction, and N-way Top-k accuracy.
//!
//! A separate decoder is trained per montage; [`decode`] refuses trials whose
//! channel count does not match the montage the model was trained for.

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::dataset::{Dataset, DatasetError, EegTrial, Split};
use crate::montage::{Montage, MontageError};
use crate::nn::layers::{Linear, Lstm};
use crate::nn::{Adam, ParamStore, Tape};

#[derive(Debug, thiserror::Error)]
pub enum DecoderError {
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error("training diverged at step {step}: non-finite loss")]
    Divergence { step: usize },
    #[error("trial has {actual} channels but the model expects {expected}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("N-way accuracy needs 2 <= N <= K (got N={n}, K={k_classes})")]
    BadWays { n: usize, k_classes: usize },
    #[error("top-k needs 1 <= k <= N (got k={k}, N={n})")]
    BadK { k: usize, n: usize },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Montage(#[from] MontageError),
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
}

/// Training hyperparameters. Paper-scale values (epochs=8192, batch=256,
/// lr=3e-4) are accepted; desk-scale defaults keep training in minutes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecoderHyper {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub hidden: usize,
    /// Mean-pool factor applied along time before the recurrence.
    pub time_pool: usize,
}

impl Default for DecoderHyper {
    fn default() -> Self {
        DecoderHyper {
            epochs: 200,
            batch: 32,
            lr: 3e-4,
            hidden: 128,
            time_pool: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_top1: f64,
}

/// Metadata embedded in decoder checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecoderMeta {
    pub montage_name: String,
    pub channels: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub hyper: DecoderHyper,
    pub seed: u64,
    pub history: Vec<EpochStats>,
}

/// A trained (or freshly initialized) EEG class decoder.
pub struct DecoderModel {
    pub meta: DecoderMeta,
    store: ParamStore,
    lstm: Lstm,
    head: Linear,
}

/// The caption control derived from a decoder prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionControl {
    pub text: String,
    pub source_label: usize,
}

/// Builds the caption "Image of <name of argmax>"; ties break to the lowest
/// class index.
pub fn make_caption(scores: &[f64], class_names: &[String]) -> CaptionControl {
    let label = argmax(scores);
    CaptionControl {
        text: format!("Image of {}", class_names[label]),
        source_label: label,
    }
}

pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in scores.iter().enumerate().skip(1) {
        if v > scores[best] {
            best = i;
        }
    }
    best
}

fn pool_time(data: &Array2<f64>, factor: usize) -> Array2<f64> {
    if factor <= 1 {
        return data.clone();
    }
    let (c, l) = data.dim();
    let lp = l / factor;
    let mut out = Array2::<f64>::zeros((c, lp));
    for ch in 0..c {
        for t in 0..lp {
            let mut acc = 0.0;
            for j in 0..factor {
                acc += data[[ch, t * factor + j]];
            }
            out[[ch, t]] = acc / factor as f64;
        }
    }
    out
}

impl DecoderModel {
    fn init(meta: DecoderMeta) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(meta.seed);
        let mut store = ParamStore::new();
        let lstm = Lstm::new(
            &mut store,
            &mut rng,
            "decoder.lstm",
            meta.channels,
            meta.hyper.hidden,
            true,
        );
        let head = Linear::new(
            &mut store,
            &mut rng,
            "decoder.head",
            meta.hyper.hidden,
            meta.num_classes,
            true,
        );
        DecoderModel {
            meta,
            store,
            lstm,
            head,
        }
    }

    fn forward_batch(&self, batch: &Array3<f64>) -> Array2<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone().into_dyn());
        let h = self.lstm.forward(&mut tape, &self.store, x);
        let logits = self.head.forward(&mut tape, &self.store, h);
        tape.value(logits)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned()
    }

    /// Class scores for one trial (already projected to this montage).
    pub fn decode(&self, trial: &EegTrial) -> Result<Vec<f64>, DecoderError> {
        if trial.channels() != self.meta.channels {
            return Err(DecoderError::ChannelMismatch {
                expected: self.meta.channels,
                actual: trial.channels(),
            });
        }
        let pooled = pool_time(&trial.data, self.meta.hyper.time_pool);
        let (c, l) = pooled.dim();
        let mut batch = Array3::<f64>::zeros((1, c, l));
        batch.index_axis_mut(ndarray::Axis(0), 0).assign(&pooled);
        let logits = self.forward_batch(&batch);
        Ok(logits.row(0).to_vec())
    }

    /// Batched scores for many trials of equal shape.
    pub fn decode_batch(&self, trials: &[EegTrial]) -> Result<Vec<Vec<f64>>, DecoderError> {
        let mut out = Vec::with_capacity(trials.len());
        // batches amortize the tape overhead
        for chunk in trials.chunks(64) {
            let pooled: Vec<Array2<f64>> = chunk
                .iter()
                .map(|t| {
                    if t.channels() != self.meta.channels {
                        Err(DecoderError::ChannelMismatch {
                            expected: self.meta.channels,
                            actual: t.channels(),
                        })
                    } else {
                        Ok(pool_time(&t.data, self.meta.hyper.time_pool))
                    }
                })
                .collect::<Result<_, _>>()?;
            let (c, l) = pooled[0].dim();
            let mut batch = Array3::<f64>::zeros((chunk.len(), c, l));
            for (i, p) in pooled.iter().enumerate() {
                batch.index_axis_mut(ndarray::Axis(0), i).assign(p);
            }
            let logits = self.forward_batch(&batch);
            for row in logits.rows() {
                out.push(row.to_vec());
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<(), DecoderError> {
        let config = serde_json::to_value(&self.meta).expect("meta serializes");
        crate::checkpoint::save(path, "decoder", &config, &self.store)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DecoderError> {
        let (config, store) = crate::checkpoint::load(path, "decoder")?;
        let meta: DecoderMeta = serde_json::from_value(config)
            .map_err(|e| DecoderError::Dataset(DatasetError::Json(e)))?;
        let lstm = Lstm {
            w: "decoder.lstm.w".into(),
            b: "decoder.lstm.b".into(),
            input: meta.channels,
            hidden: meta.hyper.hidden,
        };
        let head = Linear {
            w: "decoder.head.w".into(),
            b: "decoder.head.b".into(),
        };
        Ok(DecoderModel {
            meta,
            store,
            lstm,
            head,
        })
    }
}

/// Trains a decoder for one montage. Trials are projected through the
/// montage and z-scored with the manifest's train statistics; training is
/// deterministic given the seed (single-threaded).
pub fn train_decoder(
    dataset: &Dataset,
    montage: &Montage,
    hyper: &DecoderHyper,
    seed: u64,
) -> Result<DecoderModel, DecoderError> {
    let load_split = |split: Split| -> Result<Vec<EegTrial>, DecoderError> {
        dataset
            .trials(split)
            .map(|t| Ok(montage.project_trial(&t?)?))
            .collect()
    };
    let train = load_split(Split::Train)?;
    let val = load_split(Split::Val)?;
    if train.is_empty() {
        return Err(DecoderError::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(DecoderError::EmptySplit("val"));
    }

    let meta = DecoderMeta {
        montage_name: montage.name.clone(),
        channels: montage.len(),
        num_classes: dataset.manifest.num_classes,
        class_names: dataset.manifest.class_names.clone(),
        hyper: hyper.clone(),
        seed,
        history: Vec::new(),
    };
    let mut model = DecoderModel::init(meta);
    let mut opt = Adam::new(hyper.lr);
    let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(1));

    let pooled: Vec<(Array2<f64>, usize)> = train
        .iter()
        .map(|t| (pool_time(&t.data, hyper.time_pool), t.class_label))
        .collect();
    let (c, l) = pooled[0].0.dim();
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    let mut step = 0usize;

    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(hyper.batch) {
            let mut batch = Array3::<f64>::zeros((chunk.len(), c, l));
            let mut labels = Vec::with_capacity(chunk.len());
            for (i, &ix) in chunk.iter().enumerate() {
                batch.index_axis_mut(ndarray::Axis(0), i).assign(&pooled[ix].0);
                labels.push(pooled[ix].1);
            }
            let mut tape = Tape::new();
            let x = tape.constant(batch.into_dyn());
            let h = model.lstm.forward(&mut tape, &model.store, x);
            let logits = model.head.forward(&mut tape, &model.store, h);
            let loss = tape.softmax_cross_entropy(logits, &labels);
            let loss_val = tape.value(loss)[[]];
            if !loss_val.is_finite() {
                return Err(DecoderError::Divergence { step });
            }
            let grads = tape.backward(loss);
            model.store.zero_grads();
            tape.accumulate(&grads, &mut model.store);
            opt.step(&mut model.store);
            epoch_loss += loss_val;
            batches += 1;
            step += 1;
        }
        let val_top1 = top1_accuracy(&model, &val)?;
        model.meta.history.push(EpochStats {
            epoch,
            train_loss: epoch_loss / batches.max(1) as f64,
            val_top1,
        });
    }
    Ok(model)
}

/// Plain top-1 accuracy over a set of projected trials.
pub fn top1_accuracy(model: &DecoderModel, trials: &[EegTrial]) -> Result<f64, DecoderError> {
    if trials.is_empty() {
        return Ok(0.0);
    }
    let scores = model.decode_batch(trials)?;
    let hits = scores
        .iter()
        .zip(trials)
        .filter(|(s, t)| argmax(s) == t.class_label)
        .count();
    Ok(hits as f64 / trials.len() as f64)
}

/// N-way Top-k accuracy.
///
/// For each sample the candidate set is the true class plus `n_ways - 1`
/// distinct distractors drawn without replacement from a seeded generator;
/// the sample counts as a hit when the true class ranks within the top `k`
/// candidates by score (ties break toward the lower class index).
pub fn topk_accuracy(
    scores_batch: &[Vec<f64>],
    labels: &[usize],
    n_ways: usize,
    k: usize,
    seed: u64,
) -> Result<f64, DecoderError> {
    assert_eq!(scores_batch.len(), labels.len());
    let k_classes = scores_batch.first().map(|s| s.len()).unwrap_or(0);
    if n_ways < 2 || n_ways > k_classes {
        return Err(DecoderError::BadWays { n: n_ways, k_classes });
    }
    if k == 0 || k > n_ways {
        return Err(DecoderError::BadK { k, n: n_ways });
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for (scores, &label) in scores_batch.iter().zip(labels) {
        let mut candidates = vec![label];
        while candidates.len() < n_ways {
            let c = rng.gen_range(0..k_classes);
            if !candidates.contains(&c) {
                candidates.push(c);
            }
        }
        // rank: higher score first, lower class index on ties
        candidates.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap()
                .then_with(|| a.cmp(&b))
        });
        let rank = candidates.iter().position(|&c| c == label).unwrap();
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / scores_batch.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticConfig};
    use crate::montage;

    fn mini_dataset() -> (tempfile::TempDir, Dataset) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig {
            num_classes: 3,
            channels: 6,
            samples_per_trial: 64,
            n_per_class: 20,
            informative_channels: vec![0, 1],
            seed: 5,
            image_size: 16,
            ..SyntheticConfig::default()
        };
        let ds = generate_synthetic(&cfg, dir.path()).unwrap();
        (dir, ds)
    }

    fn mini_montage(ds: &Dataset) -> Montage {
        let electrodes = ds
            .manifest
            .electrode_labels
            .iter()
            .enumerate()
            .map(|(i, _)| crate::montage::Electrode {
                label: format!("C{}", i + 1),
                x: 0.0,
                y: 0.0,
                region: crate::montage::Region::Central,
                hemisphere: crate::montage::Hemisphere::Left,
            })
            .collect();
        Montage {
            name: "mini-6".into(),
            electrodes,
            source_indices: Vec::new(),
        }
    }

    #[test]
    fn caption_is_byte_exact_with_tie_break() {
        let names: Vec<String> = vec!["panda".into(), "red circle".into()];
        let c = make_caption(&[0.1, 0.9], &names);
        assert_eq!(c.text, "Image of red circle");
        assert_eq!(c.source_label, 1);
        // uniform scores -> class 0 by tie rule
        let c = make_caption(&[0.5, 0.5], &names);
        assert_eq!(c.text, "Image of panda");
        assert_eq!(c.source_label, 0);
        // K=1 always class 0
        let c = make_caption(&[3.0], &names[..1].to_vec());
        assert_eq!(c.source_label, 0);
    }

    #[test]
    fn topk_equals_one_when_k_equals_n() {
        let scores = vec![vec![0.1, 0.2, 0.3, 0.4]; 7];
        let labels = vec![0, 1, 2, 3, 0, 1, 2];
        let acc = topk_accuracy(&scores, &labels, 4, 4, 9).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn topk_hand_oracle_three_samples() {
        // K=3 classes, N=3 => candidate set is all classes, no sampling noise.
        // sample 0: scores rank 2>1>0, label 0 -> miss at k=1
        // sample 1: label 2 top -> hit
        // sample 2: label 1 top -> hit => 2/3
        let scores = vec![
            vec![0.1, 0.5, 0.9],
            vec![0.0, 0.2, 0.7],
            vec![0.3, 0.8, 0.1],
        ];
        let labels = vec![0, 2, 1];
        let acc = topk_accuracy(&scores, &labels, 3, 1, 1).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn topk_is_monotone_in_k_and_scale_invariant() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let scores: Vec<Vec<f64>> = (0..24)
            .map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..24).map(|i| i % 8).collect();
        let mut prev = 0.0;
        for k in 1..=5 {
            let acc = topk_accuracy(&scores, &labels, 5, k, 77).unwrap();
            assert!(acc >= prev, "top-k accuracy must be non-decreasing in k");
            prev = acc;
        }
        let scaled: Vec<Vec<f64>> = scores
            .iter()
            .map(|s| s.iter().map(|v| v * 3.5).collect())
            .collect();
        for k in 1..=3 {
            assert_eq!(
                topk_accuracy(&scores, &labels, 5, k, 77).unwrap(),
                topk_accuracy(&scaled, &labels, 5, k, 77).unwrap()
            );
        }
    }

    #[test]
    fn topk_rejects_bad_arguments() {
        let scores = vec![vec![0.0; 4]; 3];
        let labels = vec![0, 1, 2];
        assert!(matches!(
            topk_accuracy(&scores, &labels, 1, 1, 0),
            Err(DecoderError::BadWays { .. })
        ));
        assert!(matches!(
            topk_accuracy(&scores, &labels, 8, 1, 0),
            Err(DecoderError::BadWays { .. })
        ));
        assert!(matches!(
            topk_accuracy(&scores, &labels, 3, 4, 0),
            Err(DecoderError::BadK { .. })
        ));
    }

    #[test]
    fn zero_lr_training_leaves_model_at_initialization() {
        let (_dir, ds) = mini_dataset();
        let m = mini_montage(&ds);
        let hyper = DecoderHyper {
            epochs: 3,
            batch: 16,
            lr: 0.0,
            hidden: 16,
            time_pool: 4,
        };
        let trained = train_decoder(&ds, &m, &hyper, 42).unwrap();
        let fresh = DecoderModel::init(DecoderMeta {
            montage_name: m.name.clone(),
            channels: m.len(),
            num_classes: ds.manifest.num_classes,
            class_names: ds.manifest.class_names.clone(),
            hyper: hyper.clone(),
            seed: 42,
            history: Vec::new(),
        });
        for name in trained.store.names() {
            assert_eq!(trained.store.value(name), fresh.store.value(name), "{name}");
        }
        let h = &trained.meta.history;
        assert!((h[0].val_top1 - h[2].val_top1).abs() < 1e-12);
    }

    #[test]
    fn decode_checks_channel_count_and_emits_finite_scores() {
        let (_dir, ds) = mini_dataset();
        let m = mini_montage(&ds);
        let model = DecoderModel::init(DecoderMeta {
            montage_name: m.name.clone(),
            channels: 6,
            num_classes: 3,
            class_names: ds.manifest.class_names.clone(),
            hyper: DecoderHyper {
                hidden: 16,
                ..DecoderHyper::default()
            },
            seed: 0,
            history: Vec::new(),
        });
        let zero_trial = EegTrial {
            trial_id: "z".into(),
            subject: 0,
            data: Array2::zeros((6, 64)),
            class_label: 0,
            image_id: "i".into(),
        };
        let scores = model.decode(&zero_trial).unwrap();
        assert_eq!(scores.len(), 3);
        assert!(scores.iter().all(|v| v.is_finite()));

        let wrong = EegTrial {
            data: Array2::zeros((4, 64)),
            ..zero_trial
        };
        assert!(matches!(
            model.decode(&wrong),
            Err(DecoderError::ChannelMismatch { expected: 6, actual: 4 })
        ));
    }

    #[test]
    fn trained_decoder_beats_chance_and_roundtrips_through_checkpoint() {
        let (_dir, ds) = mini_dataset();
        let m = mini_montage(&ds);
        let hyper = DecoderHyper {
            epochs: 40,
            batch: 16,
            lr: 3e-3,
            hidden: 24,
            time_pool: 4,
        };
        let model = train_decoder(&ds, &m, &hyper, 42).unwrap();
        let val: Vec<EegTrial> = ds
            .trials(Split::Val)
            .map(|t| m.project_trial(&t.unwrap()).unwrap())
            .collect();
        let acc = top1_accuracy(&model, &val).unwrap();
        assert!(acc > 0.5, "val accuracy {acc} should beat 1/3 chance clearly");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("decoder.ckpt");
        model.save(&path).unwrap();
        let loaded = DecoderModel::load(&path).unwrap();
        assert_eq!(loaded.meta.montage_name, "mini-6");
        let t = val[0].clone();
        assert_eq!(model.decode(&t).unwrap(), loaded.decode(&t).unwrap());
    }

    #[test]
    fn paper_scale_hyper_is_accepted_and_recorded() {
        let hyper = DecoderHyper {
            epochs: 8192,
            batch: 256,
            lr: 3e-4,
            ..DecoderHyper::default()
        };
        let meta = DecoderMeta {
            montage_name: "std-128".into(),
            channels: 128,
            num_classes: 40,
            class_names: (0..40).map(|i| format!("c{i}")).collect(),
            hyper,
            seed: 1,
            history: Vec::new(),
        };
        let json = serde_json::to_value(&meta).unwrap();
        assert_eq!(json["hyper"]["epochs"], 8192);
        assert_eq!(json["hyper"]["batch"], 256);
        assert_eq!(json["hyper"]["lr"], 3e-4);
    }
}
