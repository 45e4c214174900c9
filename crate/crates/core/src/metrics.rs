//! Generative image metrics over a pluggable feature backbone: Inception
//! Score, Fréchet distance between feature Gaussians, a layered perceptual
//! distance, and embedding cosine similarity.
//!
//! Desk scale swaps the ImageNet classifier for a small CNN trained on the
//! synthetic image set; every report carries the backbone tag so numbers are
//! never compared across backbones.

use image::RgbImage;
use ndarray::{Array1, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::diffusion::autoencoder::image_to_array;
use crate::nn::layers::{Conv2d, Linear};
use crate::nn::{Adam, ParamStore, Tape};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("need at least {needed} images, got {got}")]
    TooFewImages { needed: usize, got: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("matrix square-root product has eigenvalue {min_eig} below -1e-6")]
    NonPSDProduct { min_eig: f64 },
    #[error("embedding has (near-)zero norm")]
    ZeroEmbedding,
    #[error("a Gaussian summary needs at least 2 samples, got {0}")]
    NeedsTwoSamples(usize),
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
    #[error("backbone meta parse error: {0}")]
    BadMeta(#[from] serde_json::Error),
}

/// Classifier head plus intermediate feature taps and a penultimate
/// embedding. All methods must be deterministic in inference mode.
pub trait FeatureBackbone {
    fn tag(&self) -> &str;
    fn num_classes(&self) -> usize;
    /// Softmax class probabilities, one row per image.
    fn class_probs(&self, images: &[RgbImage]) -> Vec<Vec<f64>>;
    /// Intermediate feature maps `[C, H, W]`, outermost first.
    fn taps(&self, image: &RgbImage) -> Vec<Array3<f64>>;
    /// Penultimate-layer embedding.
    fn embedding(&self, image: &RgbImage) -> Array1<f64>;
}

/// Two-moment summary of a feature distribution.
#[derive(Debug, Clone)]
pub struct GaussianSummary {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
    pub n: usize,
}

impl GaussianSummary {
    /// Mean and unbiased covariance of feature rows.
    pub fn from_rows(rows: &Array2<f64>) -> Result<Self, MetricsError> {
        let n = rows.nrows();
        if n < 2 {
            return Err(MetricsError::NeedsTwoSamples(n));
        }
        let d = rows.ncols();
        let mean = rows.mean_axis(Axis(0)).unwrap();
        let mut cov = Array2::<f64>::zeros((d, d));
        for row in rows.rows() {
            let c = &row - &mean;
            for i in 0..d {
                for j in i..d {
                    cov[[i, j]] += c[i] * c[j];
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[[i, j]] / (n - 1) as f64;
                cov[[i, j]] = v;
                cov[[j, i]] = v;
            }
        }
        Ok(GaussianSummary { mean, cov, n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Collects backbone embeddings into a feature matrix.
pub fn embedding_rows(backbone: &dyn FeatureBackbone, images: &[RgbImage]) -> Array2<f64> {
    let d = backbone.embedding(&images[0]).len();
    let mut rows = Array2::<f64>::zeros((images.len(), d));
    for (i, img) in images.iter().enumerate() {
        rows.row_mut(i).assign(&backbone.embedding(img));
    }
    rows
}

/// Inception Score: `exp(mean over splits of E_x KL(p(y|x) || p_split(y)))`.
pub fn inception_score(
    images: &[RgbImage],
    backbone: &dyn FeatureBackbone,
    splits: usize,
) -> Result<f64, MetricsError> {
    let probs = backbone.class_probs(images);
    inception_score_from_probs(&probs, splits)
}

/// The same score computed directly from probability rows.
pub fn inception_score_from_probs(
    probs: &[Vec<f64>],
    splits: usize,
) -> Result<f64, MetricsError> {
    let n = probs.len();
    let splits = splits.max(1);
    if n < 2 * splits {
        return Err(MetricsError::TooFewImages {
            needed: 2 * splits,
            got: n,
        });
    }
    let k = probs[0].len();
    let mut total_kl = 0.0;
    for s in 0..splits {
        let from = s * n / splits;
        let to = (s + 1) * n / splits;
        let group = &probs[from..to];
        let mut marginal = vec![0f64; k];
        for row in group {
            for (m, &p) in marginal.iter_mut().zip(row) {
                *m += p;
            }
        }
        for m in marginal.iter_mut() {
            *m /= group.len() as f64;
        }
        let mut kl_sum = 0.0;
        for row in group {
            let mut kl = 0.0;
            for (&p, &q) in row.iter().zip(&marginal) {
                if p > 0.0 {
                    kl += p * (p.ln() - q.ln());
                }
            }
            kl_sum += kl;
        }
        total_kl += kl_sum / group.len() as f64;
    }
    Ok((total_kl / splits as f64).exp())
}

fn sym_eigenvalues_and_sqrt(m: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let d = m.nrows();
    let dm = nalgebra::DMatrix::from_fn(d, d, |i, j| m[[i, j]]);
    let eig = nalgebra::linalg::SymmetricEigen::new(dm);
    let vals: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
    let mut sqrt = Array2::<f64>::zeros((d, d));
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for (kk, &lam) in vals.iter().enumerate() {
                let s = lam.max(0.0).sqrt();
                acc += eig.eigenvectors[(i, kk)] * s * eig.eigenvectors[(j, kk)];
            }
            sqrt[[i, j]] = acc;
        }
    }
    (vals, sqrt)
}

/// Fréchet distance between two feature Gaussians:
/// `||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2})`.
///
/// The matrix square root of the product uses the symmetrized form
/// `sqrt(Sa)^T Sb sqrt(Sa)`; eigenvalues below -1e-6 raise, values in
/// `[-1e-6, 0)` clamp to zero.
pub fn fid(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64, MetricsError> {
    if a.dim() != b.dim() {
        return Err(MetricsError::DimMismatch(format!(
            "features {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let diff = &a.mean - &b.mean;
    let mean_term = diff.dot(&diff);
    let (_, sqrt_a) = sym_eigenvalues_and_sqrt(&a.cov);
    let product = sqrt_a.dot(&b.cov).dot(&sqrt_a);
    // numerical symmetrization before the eigen-decomposition
    let product = (&product + &product.t()) * 0.5;
    let (vals, _) = sym_eigenvalues_and_sqrt(&product);
    let mut tr_sqrt = 0.0;
    for lam in vals {
        if lam < -1e-6 {
            return Err(MetricsError::NonPSDProduct { min_eig: lam });
        }
        tr_sqrt += lam.max(0.0).sqrt();
    }
    let trace = |m: &Array2<f64>| (0..m.nrows()).map(|i| m[[i, i]]).sum::<f64>();
    Ok(mean_term + trace(&a.cov) + trace(&b.cov) - 2.0 * tr_sqrt)
}

/// Layered perceptual distance: per tap layer, unit-normalize the channel
/// vector at each spatial location, take the squared difference norm,
/// average spatially, then average over layers. Symmetric and zero at x == y.
pub fn perceptual_distance(
    x: &RgbImage,
    y: &RgbImage,
    backbone: &dyn FeatureBackbone,
) -> Result<f64, MetricsError> {
    if x.dimensions() != y.dimensions() {
        return Err(MetricsError::DimMismatch(format!(
            "images {:?} vs {:?}",
            x.dimensions(),
            y.dimensions()
        )));
    }
    let taps_x = backbone.taps(x);
    let taps_y = backbone.taps(y);
    let mut layer_sum = 0.0;
    for (fx, fy) in taps_x.iter().zip(&taps_y) {
        let (c, h, w) = fx.dim();
        let mut spatial_sum = 0.0;
        for yy in 0..h {
            for xx in 0..w {
                let mut nx = 0.0;
                let mut ny = 0.0;
                for ch in 0..c {
                    nx += fx[[ch, yy, xx]] * fx[[ch, yy, xx]];
                    ny += fy[[ch, yy, xx]] * fy[[ch, yy, xx]];
                }
                let nx = nx.sqrt().max(1e-12);
                let ny = ny.sqrt().max(1e-12);
                let mut d2 = 0.0;
                for ch in 0..c {
                    let d = fx[[ch, yy, xx]] / nx - fy[[ch, yy, xx]] / ny;
                    d2 += d * d;
                }
                spatial_sum += d2;
            }
        }
        layer_sum += spatial_sum / (h * w) as f64;
    }
    Ok(layer_sum / taps_x.len() as f64)
}

/// Cosine similarity of penultimate embeddings, in [-1, 1].
pub fn embedding_similarity(
    x: &RgbImage,
    y: &RgbImage,
    backbone: &dyn FeatureBackbone,
) -> Result<f64, MetricsError> {
    let ex = backbone.embedding(x);
    let ey = backbone.embedding(y);
    cosine(&ex, &ey)
}

pub fn cosine(ex: &Array1<f64>, ey: &Array1<f64>) -> Result<f64, MetricsError> {
    let nx = ex.dot(ex).sqrt();
    let ny = ey.dot(ey).sqrt();
    if nx < 1e-12 || ny < 1e-12 {
        return Err(MetricsError::ZeroEmbedding);
    }
    Ok(ex.dot(ey) / (nx * ny))
}

// --------------------------------------------------------------------------
// Toy CNN backbone
// --------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackboneMeta {
    pub tag: String,
    pub num_classes: usize,
    pub image_size: u32,
    pub base: usize,
    pub seed: u64,
    pub final_train_accuracy: f64,
}

/// Small CNN classifier: three strided conv taps, a pooled embedding, and a
/// linear head.
pub struct ToyCnnBackbone {
    pub meta: BackboneMeta,
    store: ParamStore,
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
    head: Linear,
}

impl ToyCnnBackbone {
    pub fn new(tag: &str, num_classes: usize, image_size: u32, base: usize, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let conv1 = Conv2d::new(&mut store, &mut rng, "bb.conv1", 3, base, 3, 2, 1, true);
        let conv2 = Conv2d::new(&mut store, &mut rng, "bb.conv2", base, base * 2, 3, 2, 1, true);
        let conv3 = Conv2d::new(&mut store, &mut rng, "bb.conv3", base * 2, base * 4, 3, 2, 1, true);
        let head = Linear::new(&mut store, &mut rng, "bb.head", base * 4, num_classes, true);
        ToyCnnBackbone {
            meta: BackboneMeta {
                tag: tag.to_string(),
                num_classes,
                image_size,
                base,
                seed,
                final_train_accuracy: 0.0,
            },
            store,
            conv1,
            conv2,
            conv3,
            head,
        }
    }

    fn graph(
        &self,
        tape: &mut Tape,
        x: crate::nn::Var,
    ) -> (crate::nn::Var, crate::nn::Var, crate::nn::Var, crate::nn::Var, crate::nn::Var) {
        let h1 = self.conv1.forward(tape, &self.store, x);
        let h1 = tape.silu(h1);
        let h2 = self.conv2.forward(tape, &self.store, h1);
        let h2 = tape.silu(h2);
        let h3 = self.conv3.forward(tape, &self.store, h2);
        let h3 = tape.silu(h3);
        let emb = tape.mean_spatial(h3);
        let logits = self.head.forward(tape, &self.store, emb);
        (h1, h2, h3, emb, logits)
    }

    fn batch_of(&self, images: &[RgbImage]) -> ndarray::Array4<f64> {
        let s = self.meta.image_size as usize;
        let mut out = ndarray::Array4::<f64>::zeros((images.len(), 3, s, s));
        for (i, img) in images.iter().enumerate() {
            out.index_axis_mut(Axis(0), i).assign(&image_to_array(img));
        }
        out
    }

    /// Cross-entropy training on labeled images; deterministic under seed.
    pub fn train(
        &mut self,
        images: &[RgbImage],
        labels: &[usize],
        epochs: usize,
        batch: usize,
        lr: f64,
        seed: u64,
    ) {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut opt = Adam::new(lr);
        let mut order: Vec<usize> = (0..images.len()).collect();
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(batch) {
                let imgs: Vec<RgbImage> = chunk.iter().map(|&i| images[i].clone()).collect();
                let labs: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                let arr = self.batch_of(&imgs);
                let mut tape = Tape::new();
                let x = tape.constant(arr.into_dyn());
                let (_, _, _, _, logits) = self.graph(&mut tape, x);
                let loss = tape.softmax_cross_entropy(logits, &labs);
                let grads = tape.backward(loss);
                self.store.zero_grads();
                tape.accumulate(&grads, &mut self.store);
                opt.step(&mut self.store);
            }
        }
        // record the closing train accuracy in the metadata
        let probs = self.class_probs(images);
        let hits = probs
            .iter()
            .zip(labels)
            .filter(|(p, &l)| crate::decoder::argmax(p) == l)
            .count();
        self.meta.final_train_accuracy = hits as f64 / images.len().max(1) as f64;
    }

    pub fn save(&self, path: &Path) -> Result<(), MetricsError> {
        let config = serde_json::to_value(&self.meta)?;
        crate::checkpoint::save(path, "backbone", &config, &self.store)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MetricsError> {
        let (config, store) = crate::checkpoint::load(path, "backbone")?;
        let meta: BackboneMeta = serde_json::from_value(config)?;
        let mut bb = ToyCnnBackbone::new(
            &meta.tag.clone(),
            meta.num_classes,
            meta.image_size,
            meta.base,
            meta.seed,
        );
        bb.store = store;
        bb.meta = meta;
        Ok(bb)
    }
}

impl FeatureBackbone for ToyCnnBackbone {
    fn tag(&self) -> &str {
        &self.meta.tag
    }

    fn num_classes(&self) -> usize {
        self.meta.num_classes
    }

    fn class_probs(&self, images: &[RgbImage]) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let arr = self.batch_of(chunk);
            let mut tape = Tape::new();
            let x = tape.constant(arr.into_dyn());
            let (_, _, _, _, logits) = self.graph(&mut tape, x);
            let lv = tape
                .value(logits)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned();
            for row in lv.rows() {
                out.push(softmax(row.as_slice().unwrap()));
            }
        }
        out
    }

    fn taps(&self, image: &RgbImage) -> Vec<Array3<f64>> {
        let arr = self.batch_of(std::slice::from_ref(image));
        let mut tape = Tape::new();
        let x = tape.constant(arr.into_dyn());
        let (h1, h2, h3, _, _) = self.graph(&mut tape, x);
        [h1, h2, h3]
            .iter()
            .map(|&v| {
                tape.value(v)
                    .view()
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap()
                    .index_axis(Axis(0), 0)
                    .to_owned()
            })
            .collect()
    }

    fn embedding(&self, image: &RgbImage) -> Array1<f64> {
        let arr = self.batch_of(std::slice::from_ref(image));
        let mut tape = Tape::new();
        let x = tape.constant(arr.into_dyn());
        let (_, _, _, emb, _) = self.graph(&mut tape, x);
        tape.value(emb)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .row(0)
            .to_owned()
    }
}

/// Frozen random-projection backbone. Exists to demonstrate backbone
/// pluggability; never trained.
pub struct RandomProjBackbone {
    tag: String,
    num_classes: usize,
    w_probs: Array2<f64>,
    w_emb: Array2<f64>,
    pixels: usize,
}

impl RandomProjBackbone {
    pub fn new(tag: &str, num_classes: usize, image_size: u32, emb_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let pixels = (image_size * image_size * 3) as usize;
        let scale = (1.0 / pixels as f64).sqrt();
        let w_probs = crate::nn::params::randn(&mut rng, &[pixels, num_classes], scale)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let w_emb = crate::nn::params::randn(&mut rng, &[pixels, emb_dim], scale)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        RandomProjBackbone {
            tag: tag.to_string(),
            num_classes,
            w_probs,
            w_emb,
            pixels,
        }
    }

    fn flat(&self, image: &RgbImage) -> Array1<f64> {
        let arr = image_to_array(image);
        Array1::from_iter(arr.iter().cloned()).slice(ndarray::s![..self.pixels]).to_owned()
    }
}

impl FeatureBackbone for RandomProjBackbone {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn class_probs(&self, images: &[RgbImage]) -> Vec<Vec<f64>> {
        images
            .iter()
            .map(|img| {
                let logits = self.flat(img).dot(&self.w_probs);
                softmax(logits.as_slice().unwrap())
            })
            .collect()
    }

    fn taps(&self, image: &RgbImage) -> Vec<Array3<f64>> {
        let e = self.flat(image).dot(&self.w_emb);
        let d = e.len();
        vec![e.into_shape_with_order((d, 1, 1)).unwrap()]
    }

    fn embedding(&self, image: &RgbImage) -> Array1<f64> {
        self.flat(image).dot(&self.w_emb)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    struct FixedBackbone {
        probs: Vec<Vec<f64>>,
        taps_by_key: std::collections::BTreeMap<u8, Vec<Array3<f64>>>,
        emb_by_key: std::collections::BTreeMap<u8, Array1<f64>>,
    }

    impl FeatureBackbone for FixedBackbone {
        fn tag(&self) -> &str {
            "fixed-test"
        }
        fn num_classes(&self) -> usize {
            self.probs.first().map(|p| p.len()).unwrap_or(0)
        }
        fn class_probs(&self, images: &[RgbImage]) -> Vec<Vec<f64>> {
            images
                .iter()
                .enumerate()
                .map(|(i, _)| self.probs[i % self.probs.len()].clone())
                .collect()
        }
        fn taps(&self, image: &RgbImage) -> Vec<Array3<f64>> {
            self.taps_by_key[&image.get_pixel(0, 0).0[0]].clone()
        }
        fn embedding(&self, image: &RgbImage) -> Array1<f64> {
            self.emb_by_key[&image.get_pixel(0, 0).0[0]].clone()
        }
    }

    fn keyed_image(key: u8) -> RgbImage {
        RgbImage::from_pixel(2, 2, image::Rgb([key, 0, 0]))
    }

    fn dummy_images(n: usize) -> Vec<RgbImage> {
        (0..n).map(|i| keyed_image(i as u8)).collect()
    }

    #[test]
    fn uniform_probabilities_give_is_exactly_one() {
        let probs = vec![vec![0.25; 4]; 8];
        let is = inception_score_from_probs(&probs, 2).unwrap();
        assert_eq!(is, 1.0);
    }

    #[test]
    fn one_hot_uniform_coverage_gives_is_k() {
        let mut probs = Vec::new();
        for i in 0..8 {
            let mut row = vec![0.0; 4];
            row[i % 4] = 1.0;
            probs.push(row);
        }
        let is = inception_score_from_probs(&probs, 2).unwrap();
        assert!((is - 4.0).abs() < 1e-9, "IS {is}");
    }

    #[test]
    fn is_matches_brute_force_oracle_on_hand_rows() {
        let probs = vec![
            vec![0.7, 0.2, 0.1],
            vec![0.1, 0.8, 0.1],
            vec![0.3, 0.3, 0.4],
            vec![0.25, 0.5, 0.25],
            vec![0.6, 0.3, 0.1],
            vec![0.2, 0.2, 0.6],
            vec![0.05, 0.9, 0.05],
            vec![0.4, 0.4, 0.2],
        ];
        let splits = 2;
        // independent summation oracle
        let mut split_kls = Vec::new();
        for group in [&probs[0..4], &probs[4..8]] {
            let mut marginal = [0.0f64; 3];
            for row in group {
                for j in 0..3 {
                    marginal[j] += row[j] / group.len() as f64;
                }
            }
            let mut acc = 0.0;
            for row in group {
                for j in 0..3 {
                    acc += row[j] * (row[j] / marginal[j]).ln() / group.len() as f64;
                }
            }
            split_kls.push(acc);
        }
        let oracle = ((split_kls[0] + split_kls[1]) / 2.0).exp();
        let is = inception_score_from_probs(&probs, splits).unwrap();
        assert!((is - oracle).abs() < 1e-9, "{is} vs oracle {oracle}");
    }

    #[test]
    fn is_rejects_too_few_images_and_stays_in_bounds() {
        let probs = vec![vec![0.5, 0.5]; 3];
        assert!(matches!(
            inception_score_from_probs(&probs, 2),
            Err(MetricsError::TooFewImages { .. })
        ));
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        use rand::Rng;
        for _ in 0..20 {
            let rows: Vec<Vec<f64>> = (0..12)
                .map(|_| {
                    let raw: Vec<f64> = (0..5).map(|_| rng.gen_range(0.01..1.0)).collect();
                    let s: f64 = raw.iter().sum();
                    raw.iter().map(|v| v / s).collect()
                })
                .collect();
            let is = inception_score_from_probs(&rows, 3).unwrap();
            assert!((1.0 - 1e-9..=5.0 + 1e-9).contains(&is), "IS {is} out of [1, K]");
        }
    }

    #[test]
    fn fid_of_identical_summaries_is_zero() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let rows = crate::nn::params::randn(&mut rng, &[40, 6], 1.0)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let s = GaussianSummary::from_rows(&rows).unwrap();
        let v = fid(&s, &s).unwrap();
        assert!(v.abs() < 1e-6, "FID(X,X) = {v}");
    }

    #[test]
    fn fid_matches_scalar_gaussian_closed_form() {
        // (mu=0, var=1) vs (mu=1, var=4): 1 + (1 + 4 - 2*2) = 2
        let a = GaussianSummary {
            mean: Array1::from_vec(vec![0.0]),
            cov: Array2::from_shape_vec((1, 1), vec![1.0]).unwrap(),
            n: 100,
        };
        let b = GaussianSummary {
            mean: Array1::from_vec(vec![1.0]),
            cov: Array2::from_shape_vec((1, 1), vec![4.0]).unwrap(),
            n: 100,
        };
        let v = fid(&a, &b).unwrap();
        assert!((v - 2.0).abs() < 1e-12, "scalar FID {v}");
    }

    #[test]
    fn fid_is_symmetric_and_nonnegative_on_random_summaries() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        for _ in 0..10 {
            let ra = crate::nn::params::randn(&mut rng, &[30, 5], 1.0)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let rb = crate::nn::params::randn(&mut rng, &[25, 5], 2.0)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let a = GaussianSummary::from_rows(&ra).unwrap();
            let b = GaussianSummary::from_rows(&rb).unwrap();
            let ab = fid(&a, &b).unwrap();
            let ba = fid(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-6, "asymmetry {ab} vs {ba}");
            assert!(ab >= -1e-6, "negative FID {ab}");
        }
    }

    #[test]
    fn fid_rejects_dim_mismatch() {
        let a = GaussianSummary {
            mean: Array1::zeros(3),
            cov: Array2::eye(3),
            n: 10,
        };
        let b = GaussianSummary {
            mean: Array1::zeros(4),
            cov: Array2::eye(4),
            n: 10,
        };
        assert!(matches!(fid(&a, &b), Err(MetricsError::DimMismatch(_))));
    }

    #[test]
    fn perceptual_distance_zero_symmetric_and_hand_checked() {
        use ndarray::arr1;
        let mut taps = std::collections::BTreeMap::new();
        // two-channel 1x2 feature maps, hand-normalized below
        taps.insert(
            0u8,
            vec![Array3::from_shape_vec((2, 1, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap()],
        );
        taps.insert(
            1u8,
            vec![Array3::from_shape_vec((2, 1, 2), vec![0.0, 1.0, 1.0, 0.0]).unwrap()],
        );
        let mut embs = std::collections::BTreeMap::new();
        embs.insert(0u8, arr1(&[1.0, 0.0]));
        embs.insert(1u8, arr1(&[0.0, 1.0]));
        let bb = FixedBackbone {
            probs: vec![vec![0.5, 0.5]],
            taps_by_key: taps,
            emb_by_key: embs,
        };
        let x = keyed_image(0);
        let y = keyed_image(1);
        assert_eq!(perceptual_distance(&x, &x, &bb).unwrap(), 0.0);
        let dxy = perceptual_distance(&x, &y, &bb).unwrap();
        let dyx = perceptual_distance(&y, &x, &bb).unwrap();
        assert!((dxy - dyx).abs() < 1e-9);
        // hand computation: locations are ([1,0] vs [0,1]) and ([0,1] vs [1,0]),
        // each unit-norm, squared difference norm = 2; spatial mean = 2.
        assert!((dxy - 2.0).abs() < 1e-9, "hand oracle says 2, got {dxy}");
    }

    #[test]
    fn embedding_similarity_extremes_and_zero_rejection() {
        use ndarray::arr1;
        let mut embs = std::collections::BTreeMap::new();
        embs.insert(0u8, arr1(&[0.3, -0.4, 0.5]));
        embs.insert(1u8, arr1(&[-0.3, 0.4, -0.5]));
        embs.insert(2u8, arr1(&[0.0, 0.0, 0.0]));
        let bb = FixedBackbone {
            probs: vec![vec![1.0]],
            taps_by_key: std::collections::BTreeMap::new(),
            emb_by_key: embs,
        };
        let x = keyed_image(0);
        assert!((embedding_similarity(&x, &x, &bb).unwrap() - 1.0).abs() < 1e-9);
        let y = keyed_image(1);
        assert!((embedding_similarity(&x, &y, &bb).unwrap() + 1.0).abs() < 1e-9);
        let z = keyed_image(2);
        assert!(matches!(
            embedding_similarity(&x, &z, &bb),
            Err(MetricsError::ZeroEmbedding)
        ));
    }

    #[test]
    fn all_metrics_run_against_two_distinct_backbones() {
        let images: Vec<RgbImage> = (0..8)
            .map(|i| {
                RgbImage::from_fn(16, 16, |x, y| {
                    image::Rgb([(x * 16) as u8, (y * 16) as u8, (i * 31) as u8])
                })
            })
            .collect();
        let cnn = ToyCnnBackbone::new("toy-cnn-test", 4, 16, 4, 3);
        let rp = RandomProjBackbone::new("toy-randproj-test", 4, 16, 8, 4);
        for bb in [&cnn as &dyn FeatureBackbone, &rp as &dyn FeatureBackbone] {
            let is = inception_score(&images, bb, 2).unwrap();
            assert!(is >= 1.0 - 1e-9);
            let rows = embedding_rows(bb, &images);
            let s1 = GaussianSummary::from_rows(&rows.slice(ndarray::s![..4, ..]).to_owned()).unwrap();
            let s2 = GaussianSummary::from_rows(&rows.slice(ndarray::s![4.., ..]).to_owned()).unwrap();
            let f = fid(&s1, &s2).unwrap();
            assert!(f.is_finite());
            let d = perceptual_distance(&images[0], &images[1], bb).unwrap();
            assert!(d >= 0.0);
            let c = embedding_similarity(&images[0], &images[1], bb).unwrap();
            assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&c));
        }
    }

    #[test]
    fn gaussian_summary_needs_two_samples_and_is_symmetric() {
        let one = Array2::<f64>::zeros((1, 3));
        assert!(matches!(
            GaussianSummary::from_rows(&one),
            Err(MetricsError::NeedsTwoSamples(1))
        ));
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let rows = crate::nn::params::randn(&mut rng, &[10, 4], 1.0)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let s = GaussianSummary::from_rows(&rows).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!((s.cov[[i, j]] - s.cov[[j, i]]).abs() < 1e-9);
            }
        }
        assert_eq!(s.n, 10);
    }

    #[test]
    fn toy_cnn_learns_to_separate_shapes_and_roundtrips() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for k in 0..3usize {
            for _ in 0..12 {
                images.push(crate::dataset::draw_class_icon(k, 16, &mut rng));
                labels.push(k);
            }
        }
        let mut bb = ToyCnnBackbone::new("toy-cnn-v1", 3, 16, 4, 5);
        bb.train(&images, &labels, 30, 12, 3e-3, 9);
        assert!(
            bb.meta.final_train_accuracy > 0.8,
            "train accuracy {}",
            bb.meta.final_train_accuracy
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("backbone.ckpt");
        bb.save(&path).unwrap();
        let loaded = ToyCnnBackbone::load(&path).unwrap();
        assert_eq!(loaded.meta.tag, "toy-cnn-v1");
        assert_eq!(
            bb.class_probs(&images[..2].to_vec()),
            loaded.class_probs(&images[..2].to_vec())
        );
    }
}
