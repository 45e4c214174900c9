//! Small convolutional image autoencoder (x4 spatial downsampling) with an
//! optional pixel-space bypass. Inference uses the deterministic posterior
//! mean; there is no sampling path.

use image::RgbImage;
use ndarray::{Array3, Array4, Axis};
use rand_chacha::ChaCha12Rng;

use super::DiffusionError;
use crate::nn::layers::Conv2d;
use crate::nn::{ParamStore, Tape, Var};

pub const DOWN_FACTOR: u32 = 4;

/// Pixel values mapped to [-1, 1].
pub fn image_to_array(img: &RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    let mut out = Array3::<f64>::zeros((3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = p.0[c] as f64 / 127.5 - 1.0;
        }
    }
    out
}

pub fn array_to_image(arr: &Array3<f64>) -> RgbImage {
    let (_, h, w) = arr.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| {
                ((arr[[c, y, x]].clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
            });
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img
}

#[derive(Debug, Clone)]
pub struct Autoencoder {
    pub pixel_space: bool,
    pub latent_channels: usize,
    enc1: Conv2d,
    enc2: Conv2d,
    enc3: Conv2d,
    dec1: Conv2d,
    dec2: Conv2d,
    dec3: Conv2d,
}

impl Autoencoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        pixel_space: bool,
        latent_channels: usize,
        base: usize,
    ) -> Self {
        let enc1 = Conv2d::new(store, rng, "ae.enc1", 3, base, 3, 2, 1, true);
        let enc2 = Conv2d::new(store, rng, "ae.enc2", base, base * 2, 3, 2, 1, true);
        let enc3 = Conv2d::new(store, rng, "ae.enc3", base * 2, latent_channels, 3, 1, 1, true);
        let dec1 = Conv2d::new(store, rng, "ae.dec1", latent_channels, base * 2, 3, 1, 1, true);
        let dec2 = Conv2d::new(store, rng, "ae.dec2", base * 2, base, 3, 1, 1, true);
        let dec3 = Conv2d::new(store, rng, "ae.dec3", base, 3, 3, 1, 1, true);
        Autoencoder {
            pixel_space,
            latent_channels,
            enc1,
            enc2,
            enc3,
            dec1,
            dec2,
            dec3,
        }
    }

    /// Encoder graph over a `[n,3,h,w]` batch -> `[n,d,h/4,w/4]`.
    pub fn encode_graph(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.enc1.forward(tape, store, x);
        let h = tape.silu(h);
        let h = self.enc2.forward(tape, store, h);
        let h = tape.silu(h);
        self.enc3.forward(tape, store, h)
    }

    /// Decoder graph over `[n,d,hz,wz]` -> `[n,3,4hz,4wz]`.
    pub fn decode_graph(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Var {
        let h = self.dec1.forward(tape, store, z);
        let h = tape.silu(h);
        let h = tape.upsample_2d(h);
        let h = self.dec2.forward(tape, store, h);
        let h = tape.silu(h);
        let h = tape.upsample_2d(h);
        self.dec3.forward(tape, store, h)
    }

    /// Batched deterministic encoding of normalized images.
    pub fn encode_batch(
        &self,
        store: &ParamStore,
        images: &Array4<f64>,
    ) -> Result<Array4<f64>, DiffusionError> {
        let (_, _, h, w) = images.dim();
        if h % DOWN_FACTOR as usize != 0 || w % DOWN_FACTOR as usize != 0 {
            return Err(DiffusionError::BadDimensions {
                w: w as u32,
                h: h as u32,
                factor: DOWN_FACTOR,
            });
        }
        if self.pixel_space {
            return Ok(images.clone());
        }
        let mut tape = Tape::new();
        let x = tape.constant(images.clone().into_dyn());
        let z = self.encode_graph(&mut tape, store, x);
        Ok(tape
            .value(z)
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
            .to_owned())
    }

    pub fn decode_batch(&self, store: &ParamStore, latents: &Array4<f64>) -> Array4<f64> {
        if self.pixel_space {
            return latents.clone();
        }
        let mut tape = Tape::new();
        let z = tape.constant(latents.clone().into_dyn());
        let x = self.decode_graph(&mut tape, store, z);
        tape.value(x)
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
            .to_owned()
    }

    /// Encoder applied to one image.
    pub fn encode_one(
        &self,
        store: &ParamStore,
        img: &RgbImage,
    ) -> Result<Array3<f64>, DiffusionError> {
        let arr = image_to_array(img);
        let (c, h, w) = arr.dim();
        let mut batch = Array4::<f64>::zeros((1, c, h, w));
        batch.index_axis_mut(Axis(0), 0).assign(&arr);
        let z = self.encode_batch(store, &batch)?;
        Ok(z.index_axis(Axis(0), 0).to_owned())
    }

    pub fn decode_one(&self, store: &ParamStore, z: &Array3<f64>) -> RgbImage {
        let (c, h, w) = z.dim();
        let mut batch = Array4::<f64>::zeros((1, c, h, w));
        batch.index_axis_mut(Axis(0), 0).assign(z);
        let x = self.decode_batch(store, &batch);
        array_to_image(&x.index_axis(Axis(0), 0).to_owned())
    }
}

/// Peak signal-to-noise ratio between two images, in dB.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> f64 {
    assert_eq!(a.dimensions(), b.dimensions());
    let mut mse = 0.0;
    let mut n = 0usize;
    for (pa, pb) in a.pixels().zip(b.pixels()) {
        for c in 0..3 {
            let d = pa.0[c] as f64 - pb.0[c] as f64;
            mse += d * d;
            n += 1;
        }
    }
    let mse = mse / n as f64;
    if mse == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (255.0f64 * 255.0 / mse).log10()
}
