//! Conditioned UNet towers over the latent grid.
//!
//! The backbone splits into an encoder (stem, two down levels, mid) and a
//! decoder (two up levels, head). The control adapter is a structural copy of
//! the encoder; its skip features are added to the backbone's skips before
//! the decoder consumes them. Timestep and caption embeddings enter every
//! block as per-sample channel biases.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha12Rng;

use crate::nn::layers::{Conv2d, Linear};
use crate::nn::{ParamStore, Tape, Var};

/// Sinusoidal timestep embedding, `dim` even.
pub fn timestep_embedding(t: usize, dim: usize) -> Array1<f64> {
    let mut out = Array1::<f64>::zeros(dim);
    let half = dim / 2;
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        let angle = t as f64 * freq;
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    out
}

pub fn batch_embeddings(ts: &[usize], dim: usize) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((ts.len(), dim));
    for (i, &t) in ts.iter().enumerate() {
        out.row_mut(i).assign(&timestep_embedding(t, dim));
    }
    out
}

/// conv3x3 -> (+ t-proj + caption-proj per channel) -> SiLU
#[derive(Debug, Clone)]
struct CondBlock {
    conv: Conv2d,
    t_proj: Linear,
    c_proj: Linear,
}

impl CondBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        t_dim: usize,
        text_dim: usize,
        trainable: bool,
    ) -> Self {
        CondBlock {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), c_in, c_out, 3, 1, 1, trainable),
            t_proj: Linear::new(store, rng, &format!("{name}.t"), t_dim, c_out, trainable),
            c_proj: Linear::new(store, rng, &format!("{name}.c"), text_dim, c_out, trainable),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, t_emb: Var, c_emb: Var) -> Var {
        let h = self.conv.forward(tape, store, x);
        let tb = self.t_proj.forward(tape, store, t_emb);
        let cb = self.c_proj.forward(tape, store, c_emb);
        let h = tape.add_chan_per_sample(h, tb);
        let h = tape.add_chan_per_sample(h, cb);
        tape.silu(h)
    }
}

/// Skip features produced by an encoder tower.
#[derive(Debug, Clone, Copy)]
pub struct SkipFeatures {
    pub s1: Var,
    pub s2: Var,
    pub mid: Var,
}

/// Encoder half: stem at full latent resolution, one downsample per level.
#[derive(Debug, Clone)]
pub struct UnetEncoder {
    stem: CondBlock,
    down1: CondBlock,
    mid: CondBlock,
}

impl UnetEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        latent_channels: usize,
        base: usize,
        t_dim: usize,
        text_dim: usize,
        trainable: bool,
    ) -> Self {
        UnetEncoder {
            stem: CondBlock::new(
                store,
                rng,
                &format!("{prefix}.stem"),
                latent_channels,
                base,
                t_dim,
                text_dim,
                trainable,
            ),
            down1: CondBlock::new(
                store,
                rng,
                &format!("{prefix}.down1"),
                base,
                base * 2,
                t_dim,
                text_dim,
                trainable,
            ),
            mid: CondBlock::new(
                store,
                rng,
                &format!("{prefix}.mid"),
                base * 2,
                base * 2,
                t_dim,
                text_dim,
                trainable,
            ),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        t_emb: Var,
        c_emb: Var,
    ) -> SkipFeatures {
        let s1 = self.stem.forward(tape, store, x, t_emb, c_emb);
        let p1 = tape.avg_pool_2d(s1);
        let s2 = self.down1.forward(tape, store, p1, t_emb, c_emb);
        let p2 = tape.avg_pool_2d(s2);
        let mid = self.mid.forward(tape, store, p2, t_emb, c_emb);
        SkipFeatures { s1, s2, mid }
    }
}

/// Decoder half: consumes (possibly adapter-modulated) skips, emits epsilon.
#[derive(Debug, Clone)]
pub struct UnetDecoder {
    up2: CondBlock,
    up1: CondBlock,
    head: Conv2d,
}

impl UnetDecoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        latent_channels: usize,
        base: usize,
        t_dim: usize,
        text_dim: usize,
        trainable: bool,
    ) -> Self {
        UnetDecoder {
            up2: CondBlock::new(
                store,
                rng,
                &format!("{prefix}.up2"),
                base * 2,
                base * 2,
                t_dim,
                text_dim,
                trainable,
            ),
            up1: CondBlock::new(
                store,
                rng,
                &format!("{prefix}.up1"),
                base * 2,
                base,
                t_dim,
                text_dim,
                trainable,
            ),
            head: Conv2d::new(
                store,
                rng,
                &format!("{prefix}.head"),
                base,
                latent_channels,
                3,
                1,
                1,
                trainable,
            ),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        skips: SkipFeatures,
        t_emb: Var,
        c_emb: Var,
    ) -> Var {
        let m = self.up2.forward(tape, store, skips.mid, t_emb, c_emb);
        let u2 = tape.upsample_2d(m);
        let u2 = tape.add(u2, skips.s2);
        let h = self.up1.forward(tape, store, u2, t_emb, c_emb);
        let u1 = tape.upsample_2d(h);
        let u1 = tape.add(u1, skips.s1);
        self.head.forward(tape, store, u1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn unet_shapes_flow_8x8_and_4x4() {
        for hw in [8usize, 4] {
            let mut rng = ChaCha12Rng::seed_from_u64(1);
            let mut store = ParamStore::new();
            let enc = UnetEncoder::new(&mut store, &mut rng, "backbone.enc", 4, 8, 16, 12, true);
            let dec = UnetDecoder::new(&mut store, &mut rng, "backbone.dec", 4, 8, 16, 12, true);
            let mut tape = Tape::new();
            let x = tape.constant(crate::nn::params::randn(&mut rng, &[2, 4, hw, hw], 1.0));
            let t = tape.constant(batch_embeddings(&[3, 7], 16).into_dyn());
            let c = tape.constant(crate::nn::params::randn(&mut rng, &[2, 12], 1.0));
            let skips = enc.forward(&mut tape, &store, x, t, c);
            let eps = dec.forward(&mut tape, &store, skips, t, c);
            assert_eq!(tape.shape(eps), &[2, 4, hw, hw]);
        }
    }

    #[test]
    fn timestep_embedding_distinguishes_timesteps() {
        let a = timestep_embedding(1, 32);
        let b = timestep_embedding(199, 32);
        assert!((&a - &b).iter().any(|v| v.abs() > 0.1));
        assert_eq!(timestep_embedding(5, 32), timestep_embedding(5, 32));
    }
}
