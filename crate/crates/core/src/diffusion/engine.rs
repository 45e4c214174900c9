//! The conditional latent diffusion engine.
//!
//! Weights live in one [`ParamStore`] under four prefixes: `ae.` (image
//! autoencoder), `backbone.` (UNet denoiser), `adapter.` (trainable encoder
//! copy), `fproj.`/`zconv.` (EEG projection and the zero-initialized 1x1
//! injection). Pretraining freezes `ae.` then `backbone.`; the control stage
//! optimizes only the adapter, projection, and zero-conv, which is asserted
//! by hashing the frozen set before and after.

use image::RgbImage;
use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use super::autoencoder::{image_to_array, Autoencoder, DOWN_FACTOR};
use super::schedule::{forward_diffuse, DiffusionSchedule};
use super::text::TextEmbedder;
use super::unet::{batch_embeddings, SkipFeatures, UnetDecoder, UnetEncoder};
use super::DiffusionError;
use crate::dataset::{Dataset, EegTrial, Split};
use crate::decoder::{make_caption, DecoderModel};
use crate::montage::Montage;
use crate::nn::layers::{Conv1d, Conv2d, Linear};
use crate::nn::params::randn;
use crate::nn::{Adam, ParamStore, Tape, Var};

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct EngineStages {
    pub autoencoder: bool,
    pub backbone: bool,
    pub controlnet: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EngineConfig {
    pub image_size: u32,
    /// Bypass the autoencoder: the latent is the normalized pixel tensor.
    pub pixel_space: bool,
    pub latent_channels: usize,
    pub ae_base: usize,
    pub unet_base: usize,
    pub t_emb_dim: usize,
    pub text_dim: usize,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub montage_name: String,
    pub eeg_channels: usize,
    pub eeg_samples: usize,
    pub fproj_base: usize,
    pub caption_dropout: f64,
    pub seed: u64,
    /// Filled in after autoencoder pretraining; latents are divided by this.
    pub latent_scale: f64,
    pub stages: EngineStages,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            image_size: 32,
            pixel_space: false,
            latent_channels: 4,
            ae_base: 16,
            unet_base: 32,
            t_emb_dim: 32,
            text_dim: 32,
            timesteps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
            montage_name: String::new(),
            eeg_channels: 16,
            eeg_samples: 128,
            fproj_base: 16,
            caption_dropout: 0.1,
            seed: 0,
            latent_scale: 1.0,
            stages: EngineStages::default(),
        }
    }
}

impl EngineConfig {
    pub fn latent_hw(&self) -> usize {
        if self.pixel_space {
            self.image_size as usize
        } else {
            (self.image_size / DOWN_FACTOR) as usize
        }
    }

    fn effective_latent_channels(&self) -> usize {
        if self.pixel_space {
            3
        } else {
            self.latent_channels
        }
    }
}

fn conv1d_out_len(l: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (l + 2 * pad - kernel) / stride + 1
}

/// EEG projection: stacked temporal 1-D convolutions, then a reshape onto the
/// latent grid.
#[derive(Debug, Clone)]
struct FProj {
    conv1: Conv1d,
    conv2: Conv1d,
    fc: Linear,
    flat: usize,
    out_shape: (usize, usize, usize),
}

impl FProj {
    fn new(store: &mut ParamStore, rng: &mut ChaCha12Rng, cfg: &EngineConfig) -> Self {
        let base = cfg.fproj_base;
        let l1 = conv1d_out_len(cfg.eeg_samples, 5, 2, 2);
        let l2 = conv1d_out_len(l1, 5, 2, 2);
        let flat = 2 * base * l2;
        let d = cfg.effective_latent_channels();
        let hw = cfg.latent_hw();
        let conv1 = Conv1d::new(store, rng, "fproj.conv1", cfg.eeg_channels, base, 5, 2, 2, true);
        let conv2 = Conv1d::new(store, rng, "fproj.conv2", base, 2 * base, 5, 2, 2, true);
        let fc = Linear::new(store, rng, "fproj.fc", flat, d * hw * hw, true);
        FProj {
            conv1,
            conv2,
            fc,
            flat,
            out_shape: (d, hw, hw),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let n = tape.shape(x)[0];
        let h = self.conv1.forward(tape, store, x);
        let h = tape.silu(h);
        let h = self.conv2.forward(tape, store, h);
        let h = tape.silu(h);
        let h = tape.reshape(h, &[n, self.flat]);
        let h = self.fc.forward(tape, store, h);
        let (d, hh, ww) = self.out_shape;
        tape.reshape(h, &[n, d, hh, ww])
    }
}

/// One training batch for the control stage, fully materialized so the same
/// inputs can be replayed for gradient checks.
#[derive(Debug, Clone)]
pub struct ControlBatch {
    /// `[B, C, L]` normalized EEG.
    pub eeg: Array3<f64>,
    /// `[B, D, H, W]` clean latents.
    pub z0: Array4<f64>,
    pub ts: Vec<usize>,
    /// `[B, D, H, W]` target noise.
    pub eps: Array4<f64>,
    /// `[B, text_dim]` caption embeddings (zero rows = dropped captions).
    pub c_emb: Array2<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageHyper {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlReport {
    pub step_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    pub frozen_hash_before: String,
    pub frozen_hash_after: String,
}

pub struct Engine {
    pub config: EngineConfig,
    pub schedule: DiffusionSchedule,
    store: ParamStore,
    ae: Autoencoder,
    backbone_enc: UnetEncoder,
    backbone_dec: UnetDecoder,
    adapter: UnetEncoder,
    zconv: Conv2d,
    fproj: FProj,
    pub text: TextEmbedder,
}

impl Engine {
    pub fn new(config: EngineConfig) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.effective_latent_channels();
        let ae = Autoencoder::new(
            &mut store,
            &mut rng,
            config.pixel_space,
            config.latent_channels,
            config.ae_base,
        );
        let backbone_enc = UnetEncoder::new(
            &mut store,
            &mut rng,
            "backbone.enc",
            d,
            config.unet_base,
            config.t_emb_dim,
            config.text_dim,
            true,
        );
        let backbone_dec = UnetDecoder::new(
            &mut store,
            &mut rng,
            "backbone.dec",
            d,
            config.unet_base,
            config.t_emb_dim,
            config.text_dim,
            true,
        );
        let adapter = UnetEncoder::new(
            &mut store,
            &mut rng,
            "adapter",
            d,
            config.unet_base,
            config.t_emb_dim,
            config.text_dim,
            true,
        );
        let zconv = Conv2d::new_zero_init(&mut store, "zconv", d, d, true);
        let fproj = FProj::new(&mut store, &mut rng, &config);
        let text = TextEmbedder::new(config.text_dim, config.seed ^ 0x7465_7874);
        let schedule = DiffusionSchedule::linear(config.timesteps, config.beta_start, config.beta_end);
        let mut engine = Engine {
            config,
            schedule,
            store,
            ae,
            backbone_enc,
            backbone_dec,
            adapter,
            zconv,
            fproj,
            text,
        };
        if engine.config.stages.autoencoder {
            engine.store.freeze_prefix("ae.");
        }
        if engine.config.stages.backbone {
            engine.store.freeze_prefix("backbone.");
        }
        engine
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Hash of the frozen weight set (autoencoder + UNet backbone).
    pub fn frozen_hash(&self) -> String {
        self.store.frozen_hash()
    }

    // ---------------------------------------------------------------- image

    /// Deterministic latent of a stimulus image (posterior mean, then scaled).
    pub fn encode_image(&self, img: &RgbImage) -> Result<Array3<f64>, DiffusionError> {
        let (w, h) = img.dimensions();
        if w % DOWN_FACTOR != 0 || h % DOWN_FACTOR != 0 {
            return Err(DiffusionError::BadDimensions {
                w,
                h,
                factor: DOWN_FACTOR,
            });
        }
        if self.config.pixel_space {
            return Ok(image_to_array(img) / self.config.latent_scale);
        }
        let z = self.ae.encode_one(&self.store, img)?;
        Ok(z / self.config.latent_scale)
    }

    pub fn decode_latent(&self, z: &Array3<f64>) -> RgbImage {
        let raw = z * self.config.latent_scale;
        if self.config.pixel_space {
            return super::autoencoder::array_to_image(&raw);
        }
        self.ae.decode_one(&self.store, &raw)
    }

    /// Autoencoder round trip of an image (the `strength -> 0` reference).
    pub fn roundtrip_image(&self, img: &RgbImage) -> Result<RgbImage, DiffusionError> {
        let z = self.encode_image(img)?;
        Ok(self.decode_latent(&z))
    }

    // ----------------------------------------------------------------- eeg

    /// Maps one normalized EEG trial onto the latent grid.
    pub fn project_eeg(&self, trial: &EegTrial) -> Result<Array3<f64>, DiffusionError> {
        if trial.channels() != self.config.eeg_channels {
            return Err(DiffusionError::ChannelMismatch {
                expected: self.config.eeg_channels,
                actual: trial.channels(),
            });
        }
        let (c, l) = trial.data.dim();
        let mut batch = Array3::<f64>::zeros((1, c, l));
        batch.index_axis_mut(Axis(0), 0).assign(&trial.data);
        let mut tape = Tape::new();
        let x = tape.constant(batch.into_dyn());
        let z = self.fproj.forward(&mut tape, &self.store, x);
        Ok(tape
            .value(z)
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
            .index_axis(Axis(0), 0)
            .to_owned())
    }

    /// `c_eeg = z_t + Z(z_eeg)`. With the zero-initialized 1x1 convolution
    /// this is the identity on `z_t` until training moves `Z`.
    pub fn inject(
        &self,
        z_t: &Array3<f64>,
        z_eeg: &Array3<f64>,
    ) -> Result<Array3<f64>, DiffusionError> {
        if z_t.dim() != z_eeg.dim() {
            return Err(DiffusionError::ShapeMismatch {
                expected: format!("{:?}", z_t.dim()),
                actual: format!("{:?}", z_eeg.dim()),
            });
        }
        let (d, h, w) = z_eeg.dim();
        let mut batch = Array4::<f64>::zeros((1, d, h, w));
        batch.index_axis_mut(Axis(0), 0).assign(z_eeg);
        let mut tape = Tape::new();
        let z = tape.constant(batch.into_dyn());
        let zc = self.zconv.forward(&mut tape, &self.store, z);
        let out = tape
            .value(zc)
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
            .index_axis(Axis(0), 0)
            .to_owned();
        Ok(z_t + &out)
    }

    // ------------------------------------------------------------- training

    /// Stage 1: reconstruct images through the autoencoder, then freeze it
    /// and calibrate the latent scale. Returns per-step losses.
    pub fn pretrain_autoencoder(
        &mut self,
        images: &[RgbImage],
        hyper: &StageHyper,
        seed: u64,
    ) -> Result<Vec<f64>, DiffusionError> {
        if self.config.pixel_space {
            self.config.stages.autoencoder = true;
            self.config.latent_scale = 1.0;
            return Ok(Vec::new());
        }
        let arrays: Vec<Array3<f64>> = images.iter().map(image_to_array).collect();
        let mut opt = Adam::new(hyper.lr);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..arrays.len()).collect();
        let mut losses = Vec::new();
        for _ in 0..hyper.epochs {
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
            for chunk in order.chunks(hyper.batch) {
                let batch = stack3(&arrays, chunk);
                let mut tape = Tape::new();
                let x = tape.constant(batch.into_dyn());
                let z = self.ae.encode_graph(&mut tape, &self.store, x);
                let y = self.ae.decode_graph(&mut tape, &self.store, z);
                let loss = tape.mse(y, x);
                let lv = tape.value(loss)[[]];
                if !lv.is_finite() {
                    return Err(DiffusionError::Divergence { step: losses.len() });
                }
                let grads = tape.backward(loss);
                self.store.zero_grads();
                tape.accumulate(&grads, &mut self.store);
                opt.step(&mut self.store);
                losses.push(lv);
            }
        }
        // latent scale: std of raw latents over the pretraining set
        let all: Vec<usize> = (0..arrays.len()).collect();
        let z = self.ae.encode_batch(&self.store, &stack3(&arrays, &all))?;
        let mean = z.mean().unwrap();
        let var = z.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
        self.config.latent_scale = var.sqrt().max(1e-6);
        self.store.freeze_prefix("ae.");
        self.config.stages.autoencoder = true;
        Ok(losses)
    }

    /// Stage 2: denoising pretraining of the UNet backbone on (image,
    /// caption) pairs, no EEG involved; freezes the backbone afterwards.
    pub fn pretrain_backbone(
        &mut self,
        images: &[RgbImage],
        captions: &[String],
        hyper: &StageHyper,
        seed: u64,
    ) -> Result<Vec<f64>, DiffusionError> {
        if !self.config.stages.autoencoder {
            return Err(DiffusionError::NotTrained("autoencoder"));
        }
        assert_eq!(images.len(), captions.len());
        let z0: Vec<Array3<f64>> = images
            .iter()
            .map(|im| self.encode_image(im))
            .collect::<Result<_, _>>()?;
        let c_embs: Vec<Array1<f64>> = captions.iter().map(|c| self.text.embed(c)).collect();
        let mut opt = Adam::new(hyper.lr);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..z0.len()).collect();
        let mut losses = Vec::new();
        for _ in 0..hyper.epochs {
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
            for chunk in order.chunks(hyper.batch) {
                let (zt, ts, eps, cemb) = self.noise_batch(&z0, &c_embs, chunk, &mut rng);
                let mut tape = Tape::new();
                let zt_v = tape.constant(zt.into_dyn());
                let t_v = tape.constant(batch_embeddings(&ts, self.config.t_emb_dim).into_dyn());
                let c_v = tape.constant(cemb.into_dyn());
                let skips = self.backbone_enc.forward(&mut tape, &self.store, zt_v, t_v, c_v);
                let pred = self.backbone_dec.forward(&mut tape, &self.store, skips, t_v, c_v);
                let eps_v = tape.constant(eps.into_dyn());
                let loss = tape.mse(pred, eps_v);
                let lv = tape.value(loss)[[]];
                if !lv.is_finite() {
                    return Err(DiffusionError::Divergence { step: losses.len() });
                }
                let grads = tape.backward(loss);
                self.store.zero_grads();
                tape.accumulate(&grads, &mut self.store);
                opt.step(&mut self.store);
                losses.push(lv);
            }
        }
        self.store.freeze_prefix("backbone.");
        self.config.stages.backbone = true;
        Ok(losses)
    }

    fn noise_batch(
        &self,
        z0: &[Array3<f64>],
        c_embs: &[Array1<f64>],
        chunk: &[usize],
        rng: &mut ChaCha12Rng,
    ) -> (Array4<f64>, Vec<usize>, Array4<f64>, Array2<f64>) {
        let (d, h, w) = z0[0].dim();
        let b = chunk.len();
        let mut zt = Array4::<f64>::zeros((b, d, h, w));
        let mut eps = Array4::<f64>::zeros((b, d, h, w));
        let mut ts = Vec::with_capacity(b);
        let mut cemb = Array2::<f64>::zeros((b, self.config.text_dim));
        for (i, &ix) in chunk.iter().enumerate() {
            let t = rng.gen_range(1..=self.config.timesteps);
            ts.push(t);
            let e = randn(rng, &[d, h, w], 1.0)
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap();
            let z = forward_diffuse(&z0[ix], t, &e, &self.schedule).expect("t in range");
            zt.index_axis_mut(Axis(0), i).assign(&z);
            eps.index_axis_mut(Axis(0), i).assign(&e);
            let dropped = rng.gen_range(0.0..1.0) < self.config.caption_dropout;
            if !dropped {
                cemb.row_mut(i).assign(&c_embs[ix]);
            }
        }
        (zt, ts, eps, cemb)
    }

    /// Builds a [`ControlBatch`] from raw pieces; `z0` here are clean latents
    /// and the returned batch carries everything the loss needs.
    #[allow(clippy::too_many_arguments)]
    pub fn make_control_batch(
        &self,
        trials: &[&EegTrial],
        z0: &[Array3<f64>],
        captions: &[String],
        rng: &mut ChaCha12Rng,
        with_dropout: bool,
    ) -> ControlBatch {
        let b = trials.len();
        let (d, h, w) = z0[0].dim();
        let (c, l) = trials[0].data.dim();
        let mut eeg = Array3::<f64>::zeros((b, c, l));
        let mut z0b = Array4::<f64>::zeros((b, d, h, w));
        let mut eps = Array4::<f64>::zeros((b, d, h, w));
        let mut ts = Vec::with_capacity(b);
        let mut cemb = Array2::<f64>::zeros((b, self.config.text_dim));
        for i in 0..b {
            eeg.index_axis_mut(Axis(0), i).assign(&trials[i].data);
            z0b.index_axis_mut(Axis(0), i).assign(&z0[i]);
            let t = rng.gen_range(1..=self.config.timesteps);
            ts.push(t);
            let e = randn(rng, &[d, h, w], 1.0)
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap();
            eps.index_axis_mut(Axis(0), i).assign(&e);
            let dropped = with_dropout && rng.gen_range(0.0..1.0) < self.config.caption_dropout;
            if !dropped {
                cemb.row_mut(i).assign(&self.text.embed(&captions[i]));
            }
        }
        ControlBatch {
            eeg,
            z0: z0b,
            ts,
            eps,
            c_emb: cemb,
        }
    }

    fn control_graph(&self, tape: &mut Tape, batch: &ControlBatch) -> Var {
        let b = batch.ts.len();
        let (_, d, h, w) = batch.z0.dim();
        // z_t from the frozen forward process
        let mut zt = Array4::<f64>::zeros((b, d, h, w));
        for i in 0..b {
            let z = forward_diffuse(
                &batch.z0.index_axis(Axis(0), i).to_owned(),
                batch.ts[i],
                &batch.eps.index_axis(Axis(0), i).to_owned(),
                &self.schedule,
            )
            .expect("t in range");
            zt.index_axis_mut(Axis(0), i).assign(&z);
        }
        let zt_v = tape.constant(zt.into_dyn());
        let t_v = tape.constant(batch_embeddings(&batch.ts, self.config.t_emb_dim).into_dyn());
        let c_v = tape.constant(batch.c_emb.clone().into_dyn());
        let eeg_v = tape.constant(batch.eeg.clone().into_dyn());

        let z_eeg = self.fproj.forward(tape, &self.store, eeg_v);
        let z_ctl = self.zconv.forward(tape, &self.store, z_eeg);
        let c_eeg = tape.add(zt_v, z_ctl);
        let a = self.adapter.forward(tape, &self.store, c_eeg, t_v, c_v);
        let bskips = self.backbone_enc.forward(tape, &self.store, zt_v, t_v, c_v);
        let merged = SkipFeatures {
            s1: tape.add(bskips.s1, a.s1),
            s2: tape.add(bskips.s2, a.s2),
            mid: tape.add(bskips.mid, a.mid),
        };
        let pred = self.backbone_dec.forward(tape, &self.store, merged, t_v, c_v);
        let eps_v = tape.constant(batch.eps.clone().into_dyn());
        tape.mse(pred, eps_v)
    }

    /// Control-stage loss value for a fixed batch (pure).
    pub fn control_loss(&self, batch: &ControlBatch) -> f64 {
        let mut tape = Tape::new();
        let loss = self.control_graph(&mut tape, batch);
        tape.value(loss)[[]]
    }

    /// Runs backward on the control loss, accumulating gradients into the
    /// store (zeroed first). Returns the loss.
    pub fn control_loss_backward(&mut self, batch: &ControlBatch) -> f64 {
        let mut tape = Tape::new();
        let loss = self.control_graph(&mut tape, batch);
        let lv = tape.value(loss)[[]];
        let grads = tape.backward(loss);
        self.store.zero_grads();
        tape.accumulate(&grads, &mut self.store);
        lv
    }

    /// Stage 3: ControlNet adapter training. The backbone and autoencoder
    /// stay frozen (hash-checked); only `adapter.`, `fproj.`, and `zconv.`
    /// move. Captions come from the decoder's predictions, matching the
    /// semantic-prior pipeline, and are dropped with the configured
    /// probability to keep the unconditional branch trained.
    pub fn train_controlnet(
        &mut self,
        dataset: &Dataset,
        montage: &Montage,
        decoder: &DecoderModel,
        hyper: &StageHyper,
        seed: u64,
    ) -> Result<ControlReport, DiffusionError> {
        if !self.config.stages.autoencoder {
            return Err(DiffusionError::NotTrained("autoencoder"));
        }
        if !self.config.stages.backbone {
            return Err(DiffusionError::NotTrained("backbone"));
        }
        let load = |split: Split| -> Result<Vec<EegTrial>, DiffusionError> {
            dataset
                .trials(split)
                .map(|t| {
                    let t = t.map_err(crate::decoder::DecoderError::from)?;
                    Ok(montage.project_trial(&t).map_err(crate::decoder::DecoderError::from)?)
                })
                .collect()
        };
        let train = load(Split::Train)?;
        let val = load(Split::Val)?;
        if train.is_empty() {
            return Err(DiffusionError::Decoder(
                crate::decoder::DecoderError::EmptySplit("train"),
            ));
        }

        let prep = |trials: &[EegTrial]| -> Result<(Vec<Array3<f64>>, Vec<String>), DiffusionError> {
            let mut latents = Vec::with_capacity(trials.len());
            let mut captions = Vec::with_capacity(trials.len());
            let scores = decoder.decode_batch(trials)?;
            for (trial, s) in trials.iter().zip(scores) {
                let img = dataset
                    .load_image(&trial.image_id)
                    .map_err(crate::decoder::DecoderError::from)?;
                latents.push(self.encode_image(&img.pixels)?);
                captions.push(make_caption(&s, &decoder.meta.class_names).text);
            }
            Ok((latents, captions))
        };
        let (train_z0, train_captions) = prep(&train)?;
        let (val_z0, val_captions) = prep(&val)?;

        let hash_before = self.frozen_hash();
        let mut opt = Adam::new(hyper.lr);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut step_losses = Vec::new();
        let mut val_losses = Vec::new();
        for _ in 0..hyper.epochs {
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
            for chunk in order.chunks(hyper.batch) {
                let trials: Vec<&EegTrial> = chunk.iter().map(|&i| &train[i]).collect();
                let z0: Vec<Array3<f64>> = chunk.iter().map(|&i| train_z0[i].clone()).collect();
                let captions: Vec<String> =
                    chunk.iter().map(|&i| train_captions[i].clone()).collect();
                let batch = self.make_control_batch(&trials, &z0, &captions, &mut rng, true);
                let lv = self.control_loss_backward(&batch);
                if !lv.is_finite() {
                    return Err(DiffusionError::Divergence {
                        step: step_losses.len(),
                    });
                }
                opt.step(&mut self.store);
                step_losses.push(lv);
            }
            if !val.is_empty() {
                let trials: Vec<&EegTrial> = val.iter().collect();
                let mut vrng = ChaCha12Rng::seed_from_u64(seed ^ 0x5641_4c21);
                let batch =
                    self.make_control_batch(&trials, &val_z0, &val_captions, &mut vrng, false);
                val_losses.push(self.control_loss(&batch));
            }
        }
        let hash_after = self.frozen_hash();
        if hash_before != hash_after {
            return Err(DiffusionError::FrozenWeightMutation);
        }
        self.config.stages.controlnet = true;
        Ok(ControlReport {
            step_losses,
            val_losses,
            frozen_hash_before: hash_before,
            frozen_hash_after: hash_after,
        })
    }

    // ------------------------------------------------------------- sampling

    /// Conditional noise prediction: backbone modulated by adapter residuals,
    /// driven by the EEG control and caption embedding.
    pub fn eps_conditional(
        &self,
        z_t: &Array3<f64>,
        t: usize,
        c_emb: &Array1<f64>,
        eeg: &Array2<f64>,
    ) -> Array3<f64> {
        let mut tape = Tape::new();
        let zt_v = tape.constant(to_batch4(z_t));
        let t_v = tape.constant(batch_embeddings(&[t], self.config.t_emb_dim).into_dyn());
        let c_v = tape.constant(to_batch2(c_emb));
        let eeg_v = tape.constant(to_batch3(eeg));
        let z_eeg = self.fproj.forward(&mut tape, &self.store, eeg_v);
        let z_ctl = self.zconv.forward(&mut tape, &self.store, z_eeg);
        let c_eeg = tape.add(zt_v, z_ctl);
        let a = self.adapter.forward(&mut tape, &self.store, c_eeg, t_v, c_v);
        let b = self.backbone_enc.forward(&mut tape, &self.store, zt_v, t_v, c_v);
        let merged = SkipFeatures {
            s1: tape.add(b.s1, a.s1),
            s2: tape.add(b.s2, a.s2),
            mid: tape.add(b.mid, a.mid),
        };
        let pred = self.backbone_dec.forward(&mut tape, &self.store, merged, t_v, c_v);
        from_batch4(tape.value(pred))
    }

    /// Unconditional prediction: frozen backbone only, null caption, no
    /// adapter; independent of EEG and caption inputs by construction.
    pub fn eps_unconditional(&self, z_t: &Array3<f64>, t: usize) -> Array3<f64> {
        let mut tape = Tape::new();
        let zt_v = tape.constant(to_batch4(z_t));
        let t_v = tape.constant(batch_embeddings(&[t], self.config.t_emb_dim).into_dyn());
        let null = self.text.null_embedding();
        let c_v = tape.constant(to_batch2(&null));
        let b = self.backbone_enc.forward(&mut tape, &self.store, zt_v, t_v, c_v);
        let pred = self.backbone_dec.forward(&mut tape, &self.store, b, t_v, c_v);
        from_batch4(tape.value(pred))
    }

    /// Prompt-conditional prediction without any EEG pathway (image-to-image
    /// mode: the backbone is conditioned on text alone).
    pub fn eps_prompt(&self, z_t: &Array3<f64>, t: usize, c_emb: &Array1<f64>) -> Array3<f64> {
        let mut tape = Tape::new();
        let zt_v = tape.constant(to_batch4(z_t));
        let t_v = tape.constant(batch_embeddings(&[t], self.config.t_emb_dim).into_dyn());
        let c_v = tape.constant(to_batch2(c_emb));
        let b = self.backbone_enc.forward(&mut tape, &self.store, zt_v, t_v, c_v);
        let pred = self.backbone_dec.forward(&mut tape, &self.store, b, t_v, c_v);
        from_batch4(tape.value(pred))
    }

    /// Timestep grid for `steps` denoising steps: `t_max` down to 0.
    pub fn sample_grid(&self, steps: usize) -> Vec<usize> {
        let t_max = self.config.timesteps;
        let steps = steps.clamp(1, t_max);
        let mut ts: Vec<usize> = (0..=steps)
            .map(|i| (t_max * (steps - i) + steps / 2) / steps)
            .collect();
        ts.dedup();
        if *ts.last().unwrap() != 0 {
            ts.push(0);
        }
        ts
    }

    fn ancestral_step(
        &self,
        z: &Array3<f64>,
        eps_hat: &Array3<f64>,
        t: usize,
        t_next: usize,
        rng: &mut ChaCha12Rng,
    ) -> Array3<f64> {
        let ab_t = self.schedule.alpha_bar[t];
        let ab_n = self.schedule.alpha_bar[t_next];
        let x0 = (z - &(eps_hat * (1.0 - ab_t).sqrt())) / ab_t.sqrt();
        let sigma2 = ((1.0 - ab_n) / (1.0 - ab_t)) * (1.0 - ab_t / ab_n);
        let sigma = sigma2.max(0.0).sqrt();
        let dir_coef = (1.0 - ab_n - sigma2).max(0.0).sqrt();
        let noise = randn(rng, &[z.dim().0, z.dim().1, z.dim().2], 1.0)
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        &x0 * ab_n.sqrt() + &(eps_hat * dir_coef) + &(noise * sigma)
    }

    /// Generates one image from an EEG trial under classifier-free guidance.
    ///
    /// `caption` is the semantic prior text ("Image of <class>"); the
    /// unconditional branch is the frozen backbone with the null caption and
    /// no adapter, so `gamma = 0` ignores both EEG and caption.
    pub fn sample_with_caption(
        &self,
        trial: &EegTrial,
        caption: &str,
        gamma: f64,
        steps: usize,
        seed: u64,
    ) -> Result<RgbImage, DiffusionError> {
        if !self.config.stages.controlnet {
            return Err(DiffusionError::NotTrained("controlnet"));
        }
        if trial.channels() != self.config.eeg_channels {
            return Err(DiffusionError::ChannelMismatch {
                expected: self.config.eeg_channels,
                actual: trial.channels(),
            });
        }
        let d = self.config.effective_latent_channels();
        let hw = self.config.latent_hw();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut z = randn(&mut rng, &[d, hw, hw], 1.0)
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        let c_emb = self.text.embed(caption);
        let grid = self.sample_grid(steps);
        for win in grid.windows(2) {
            let (t, t_next) = (win[0], win[1]);
            let eps_hat = self.guided_eps(&z, t, &c_emb, &trial.data, gamma);
            z = self.ancestral_step(&z, &eps_hat, t, t_next, &mut rng);
        }
        Ok(self.decode_latent(&z))
    }

    /// Decoder-in-the-loop convenience: predicts the class, builds the
    /// caption, and samples.
    pub fn sample(
        &self,
        trial: &EegTrial,
        decoder: &DecoderModel,
        gamma: f64,
        steps: usize,
        seed: u64,
    ) -> Result<(RgbImage, crate::decoder::CaptionControl), DiffusionError> {
        let scores = decoder.decode(trial)?;
        let caption = make_caption(&scores, &decoder.meta.class_names);
        let img = self.sample_with_caption(trial, &caption.text, gamma, steps, seed)?;
        Ok((img, caption))
    }

    fn guided_eps(
        &self,
        z: &Array3<f64>,
        t: usize,
        c_emb: &Array1<f64>,
        eeg: &Array2<f64>,
        gamma: f64,
    ) -> Array3<f64> {
        if gamma == 0.0 {
            return self.eps_unconditional(z, t);
        }
        let eps_c = self.eps_conditional(z, t, c_emb, eeg);
        if gamma == 1.0 {
            return eps_c;
        }
        let eps_u = self.eps_unconditional(z, t);
        guidance(&eps_u, &eps_c, gamma)
    }

    /// Image-to-image refinement: encode, forward-diffuse to `round(s*T)`,
    /// then denoise under prompt-only guidance. `strength` in (0, 1].
    pub fn img2img(
        &self,
        init: &RgbImage,
        prompt_emb: &Array1<f64>,
        strength: f64,
        gamma: f64,
        steps: usize,
        seed: u64,
    ) -> Result<RgbImage, DiffusionError> {
        if !self.config.stages.backbone {
            return Err(DiffusionError::NotTrained("backbone"));
        }
        if !(strength > 0.0 && strength <= 1.0) {
            return Err(DiffusionError::BadStrength(strength));
        }
        let t_max = self.config.timesteps;
        let t_start = ((strength * t_max as f64).round() as usize).clamp(1, t_max);
        let z0 = self.encode_image(init)?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let eps = randn(&mut rng, &[z0.dim().0, z0.dim().1, z0.dim().2], 1.0)
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        let mut z = forward_diffuse(&z0, t_start, &eps, &self.schedule)?;
        let mut grid: Vec<usize> = self
            .sample_grid(steps)
            .into_iter()
            .filter(|&t| t < t_start)
            .collect();
        grid.insert(0, t_start);
        for win in grid.windows(2) {
            let (t, t_next) = (win[0], win[1]);
            let eps_hat = if gamma == 0.0 {
                self.eps_unconditional(&z, t)
            } else {
                let eps_c = self.eps_prompt(&z, t, prompt_emb);
                if gamma == 1.0 {
                    eps_c
                } else {
                    let eps_u = self.eps_unconditional(&z, t);
                    guidance(&eps_u, &eps_c, gamma)
                }
            };
            z = self.ancestral_step(&z, &eps_hat, t, t_next, &mut rng);
        }
        Ok(self.decode_latent(&z))
    }

    /// Copies the pretrained autoencoder and backbone weights from another
    /// engine's store (the shared base) and freezes them. The architectures
    /// must agree; only the EEG-side dimensions may differ between engines.
    pub fn import_pretrained(
        &mut self,
        base: &ParamStore,
        latent_scale: f64,
    ) -> Result<(), DiffusionError> {
        let names: Vec<String> = self
            .store
            .names()
            .filter(|n| n.starts_with("ae.") || n.starts_with("backbone."))
            .cloned()
            .collect();
        for name in names {
            if !base.contains(&name) {
                return Err(DiffusionError::BadSchedule(format!(
                    "base engine lacks parameter {name}"
                )));
            }
            let src = base.value(&name).clone();
            if src.shape() != self.store.value(&name).shape() {
                return Err(DiffusionError::ShapeMismatch {
                    expected: format!("{:?}", self.store.value(&name).shape()),
                    actual: format!("{:?}", src.shape()),
                });
            }
            self.store.value_mut(&name).assign(&src);
        }
        self.store.freeze_prefix("ae.");
        self.store.freeze_prefix("backbone.");
        self.config.latent_scale = latent_scale;
        self.config.stages.autoencoder = true;
        self.config.stages.backbone = true;
        Ok(())
    }

    // ---------------------------------------------------------- persistence

    pub fn save(&self, path: &Path) -> Result<(), DiffusionError> {
        let config = serde_json::to_value(&self.config).expect("config serializes");
        crate::checkpoint::save(path, "engine", &config, &self.store)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DiffusionError> {
        let (config, store) = crate::checkpoint::load(path, "engine")?;
        let config: EngineConfig =
            serde_json::from_value(config).map_err(DiffusionError::BadConfig)?;
        let mut engine = Engine::new(config);
        let expected: Vec<String> = engine.store.names().cloned().collect();
        let found: Vec<String> = store.names().cloned().collect();
        if expected != found {
            return Err(DiffusionError::BadSchedule(
                "checkpoint parameters do not match the configured architecture".into(),
            ));
        }
        engine.store = store;
        Ok(engine)
    }
}

/// Classifier-free guidance blend; `gamma = 0` and `gamma = 1` return the
/// branch predictions untouched.
pub fn guidance(eps_u: &Array3<f64>, eps_c: &Array3<f64>, gamma: f64) -> Array3<f64> {
    if gamma == 0.0 {
        eps_u.clone()
    } else if gamma == 1.0 {
        eps_c.clone()
    } else {
        eps_u + &((eps_c - eps_u) * gamma)
    }
}

fn stack3(arrays: &[Array3<f64>], idx: &[usize]) -> Array4<f64> {
    let (c, h, w) = arrays[0].dim();
    let mut out = Array4::<f64>::zeros((idx.len(), c, h, w));
    for (i, &ix) in idx.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&arrays[ix]);
    }
    out
}

fn to_batch4(a: &Array3<f64>) -> ndarray::ArrayD<f64> {
    let (d, h, w) = a.dim();
    let mut out = Array4::<f64>::zeros((1, d, h, w));
    out.index_axis_mut(Axis(0), 0).assign(a);
    out.into_dyn()
}

fn to_batch3(a: &Array2<f64>) -> ndarray::ArrayD<f64> {
    let (c, l) = a.dim();
    let mut out = Array3::<f64>::zeros((1, c, l));
    out.index_axis_mut(Axis(0), 0).assign(a);
    out.into_dyn()
}

fn to_batch2(a: &Array1<f64>) -> ndarray::ArrayD<f64> {
    let mut out = Array2::<f64>::zeros((1, a.len()));
    out.row_mut(0).assign(a);
    out.into_dyn()
}

fn from_batch4(v: &ndarray::ArrayD<f64>) -> Array3<f64> {
    v.view()
        .into_dimensionality::<ndarray::Ix4>()
        .unwrap()
        .index_axis(Axis(0), 0)
        .to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> EngineConfig {
        EngineConfig {
            image_size: 16,
            latent_channels: 2,
            ae_base: 4,
            unet_base: 4,
            t_emb_dim: 8,
            text_dim: 8,
            timesteps: 20,
            eeg_channels: 4,
            eeg_samples: 16,
            fproj_base: 4,
            montage_name: "tiny".into(),
            seed: 11,
            ..EngineConfig::default()
        }
    }

    fn tiny_engine() -> Engine {
        Engine::new(tiny_config())
    }

    fn rand3(rng: &mut ChaCha12Rng, d: usize, h: usize, w: usize) -> Array3<f64> {
        randn(rng, &[d, h, w], 1.0)
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()
    }

    fn tiny_trial(rng: &mut ChaCha12Rng) -> EegTrial {
        EegTrial {
            trial_id: "t".into(),
            subject: 0,
            data: randn(rng, &[4, 16], 1.0)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap(),
            class_label: 0,
            image_id: "i".into(),
        }
    }

    #[test]
    fn inject_is_bitwise_identity_at_initialization() {
        let engine = tiny_engine();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for _ in 0..20 {
            let z_t = rand3(&mut rng, 2, 4, 4);
            let z_eeg = rand3(&mut rng, 2, 4, 4);
            let c = engine.inject(&z_t, &z_eeg).unwrap();
            for (a, b) in c.iter().zip(z_t.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn inject_rejects_shape_mismatch() {
        let engine = tiny_engine();
        let z_t = Array3::<f64>::zeros((2, 8, 8));
        let z_eeg = Array3::<f64>::zeros((2, 4, 4));
        assert!(matches!(
            engine.inject(&z_t, &z_eeg),
            Err(DiffusionError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn one_optimizer_step_moves_the_injection_off_identity() {
        let mut engine = tiny_engine();
        engine.params_mut().freeze_prefix("ae.");
        engine.params_mut().freeze_prefix("backbone.");
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let trial = tiny_trial(&mut rng);
        let z0 = vec![rand3(&mut rng, 2, 4, 4)];
        let captions = vec!["Image of red circle".to_string()];
        let batch = engine.make_control_batch(&[&trial], &z0, &captions, &mut rng, false);
        let mut opt = Adam::new(1e-2);
        let loss = engine.control_loss_backward(&batch);
        assert!(loss.is_finite());
        opt.step(engine.params_mut());

        let z_t = rand3(&mut rng, 2, 4, 4);
        let z_eeg = rand3(&mut rng, 2, 4, 4);
        let c = engine.inject(&z_t, &z_eeg).unwrap();
        let max_abs = (&c - &z_t).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_abs > 0.0, "zero-conv failed to move after one step");
    }

    #[test]
    fn project_eeg_checks_channels_and_sees_every_channel() {
        let engine = tiny_engine();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let trial = tiny_trial(&mut rng);
        let a = engine.project_eeg(&trial).unwrap();
        assert_eq!(a.dim(), (2, 4, 4));

        let mut other = trial.clone();
        other.data.row_mut(3).mapv_inplace(|v| v + 0.5);
        let b = engine.project_eeg(&other).unwrap();
        assert!((&a - &b).iter().any(|v| v.abs() > 1e-12),
            "projection ignored a perturbed channel");

        let mut wrong = trial.clone();
        wrong.data = ndarray::Array2::zeros((3, 16));
        assert!(matches!(
            engine.project_eeg(&wrong),
            Err(DiffusionError::ChannelMismatch { expected: 4, actual: 3 })
        ));
    }

    #[test]
    fn pixel_space_mode_bypasses_the_autoencoder() {
        let cfg = EngineConfig {
            pixel_space: true,
            ..tiny_config()
        };
        let engine = Engine::new(cfg);
        let img = RgbImage::from_fn(16, 16, |x, y| image::Rgb([x as u8 * 10, y as u8 * 10, 7]));
        let z = engine.encode_image(&img).unwrap();
        assert_eq!(z.dim(), (3, 16, 16));
        let expected = image_to_array(&img);
        assert_eq!(z, expected);
        let back = engine.decode_latent(&z);
        assert_eq!(back, img);
    }

    #[test]
    fn non_divisible_image_dimensions_are_rejected() {
        let engine = tiny_engine();
        let img = RgbImage::new(31, 32);
        assert!(matches!(
            engine.encode_image(&img),
            Err(DiffusionError::BadDimensions { w: 31, h: 32, factor: 4 })
        ));
    }

    #[test]
    fn guidance_blend_is_exact_at_zero_and_one_and_affine() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let eu = rand3(&mut rng, 2, 4, 4);
        let ec = rand3(&mut rng, 2, 4, 4);
        assert_eq!(guidance(&eu, &ec, 0.0), eu);
        assert_eq!(guidance(&eu, &ec, 1.0), ec);
        let g0 = guidance(&eu, &ec, 0.0);
        let g1 = guidance(&eu, &ec, 1.0);
        let g2 = guidance(&eu, &ec, 2.0);
        let lhs = &g2 - &g1;
        let rhs = &g1 - &g0;
        for (a, b) in lhs.iter().zip(rhs.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn img2img_rejects_out_of_range_strength() {
        let mut engine = tiny_engine();
        engine.config.stages.backbone = true;
        let img = RgbImage::new(16, 16);
        let emb = engine.text.embed("x");
        for s in [0.0, -0.1, 1.5] {
            assert!(matches!(
                engine.img2img(&img, &emb, s, 1.0, 10, 0),
                Err(DiffusionError::BadStrength(_))
            ));
        }
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let mut engine = tiny_engine();
        engine.config.stages = EngineStages {
            autoencoder: true,
            backbone: true,
            controlnet: true,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let trial = tiny_trial(&mut rng);
        let a = engine
            .sample_with_caption(&trial, "Image of red circle", 4.0, 10, 99)
            .unwrap();
        let b = engine
            .sample_with_caption(&trial, "Image of red circle", 4.0, 10, 99)
            .unwrap();
        assert_eq!(a.as_raw(), b.as_raw());
        let c = engine
            .sample_with_caption(&trial, "Image of red circle", 4.0, 10, 100)
            .unwrap();
        assert_ne!(a.as_raw(), c.as_raw());
    }

    #[test]
    fn sample_grid_descends_to_zero_without_duplicates() {
        let engine = tiny_engine();
        for steps in [1, 3, 5, 20, 50] {
            let grid = engine.sample_grid(steps);
            assert_eq!(*grid.first().unwrap(), 20);
            assert_eq!(*grid.last().unwrap(), 0);
            for w in grid.windows(2) {
                assert!(w[0] > w[1], "grid not strictly decreasing: {grid:?}");
            }
        }
    }

    #[test]
    fn untrained_engine_refuses_to_sample() {
        let engine = tiny_engine();
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let trial = tiny_trial(&mut rng);
        assert!(matches!(
            engine.sample_with_caption(&trial, "x", 1.0, 5, 0),
            Err(DiffusionError::NotTrained("controlnet"))
        ));
    }

    #[test]
    fn control_loss_gradients_match_finite_differences() {
        let mut engine = tiny_engine();
        // Move the zero-conv off zero so gradients reach the projection.
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let z_w = randn(&mut rng, &[2, 2, 1, 1], 0.3);
        engine.params_mut().value_mut("zconv.w").assign(&z_w);

        let trial_a = tiny_trial(&mut rng);
        let trial_b = tiny_trial(&mut rng);
        let z0 = vec![rand3(&mut rng, 2, 4, 4), rand3(&mut rng, 2, 4, 4)];
        let captions = vec!["Image of red circle".into(), "Image of blue square".into()];
        let batch =
            engine.make_control_batch(&[&trial_a, &trial_b], &z0, &captions, &mut rng, false);

        let loss = engine.control_loss_backward(&batch);
        assert!(loss.is_finite());
        let grads: std::collections::BTreeMap<String, ndarray::ArrayD<f64>> = engine
            .params()
            .names()
            .map(|n| (n.clone(), engine.params().grad(n).clone()))
            .collect();

        let h = 1e-5;
        for name in [
            "fproj.conv1.w",
            "fproj.fc.w",
            "zconv.w",
            "zconv.b",
            "adapter.stem.conv.w",
            "adapter.mid.t.w",
        ] {
            let len = engine.params().value(name).len();
            for i in (0..len).step_by((len / 5).max(1)) {
                let orig = engine.params().value(name).as_slice().unwrap()[i];
                engine.params_mut().value_mut(name).as_slice_mut().unwrap()[i] = orig + h;
                let fp = engine.control_loss(&batch);
                engine.params_mut().value_mut(name).as_slice_mut().unwrap()[i] = orig - h;
                let fm = engine.control_loss(&batch);
                engine.params_mut().value_mut(name).as_slice_mut().unwrap()[i] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let an = grads[name].as_slice().unwrap()[i];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    ((an - fd) / denom).abs() < 1e-4,
                    "{name}[{i}]: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn save_load_roundtrip_reproduces_predictions() {
        let mut engine = tiny_engine();
        engine.config.stages = EngineStages {
            autoencoder: true,
            backbone: true,
            controlnet: true,
        };
        engine.params_mut().freeze_prefix("ae.");
        engine.params_mut().freeze_prefix("backbone.");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("engine.ckpt");
        engine.save(&path).unwrap();
        let loaded = Engine::load(&path).unwrap();
        assert_eq!(engine.frozen_hash(), loaded.frozen_hash());
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let z = rand3(&mut rng, 2, 4, 4);
        let a = engine.eps_unconditional(&z, 3);
        let b = loaded.eps_unconditional(&z, 3);
        assert_eq!(a, b);
        assert!(loaded.config.stages.controlnet);
    }
}
