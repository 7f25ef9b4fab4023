//! Desk-scale generation metrics built on a fixed random-feature extractor.
//!
//! The extractor is a frozen 4-layer strided conv stack with seeded random
//! weights and global average pooling; random convolutional features are a
//! serviceable perceptual proxy and keep the project free of pretrained
//! networks. The same extractor backs the perceptual training loss, the
//! Fréchet-distance quality score, and the pairwise diversity score.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Result, XmError};
use crate::nn::{conv2d, global_avg_pool};
use crate::rng;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Documented seed for the extractor weights; every run shares it so scores
/// stay comparable across runs and processes.
pub const PHI_SEED: u64 = 4242;
pub const FEATURE_DIM: usize = 64;
const PHI_CHANNELS: [usize; 4] = [16, 32, 48, FEATURE_DIM];
const COV_SHRINKAGE: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct PerceptualExtractor {
    layers: Vec<(Tensor, Tensor)>,
    pub seed: u64,
}

impl PerceptualExtractor {
    pub fn new(seed: u64) -> Self {
        let mut r = rng::stream(seed, rng::domain::INIT, &[u64::MAX]);
        let mut layers = Vec::new();
        let mut in_ch = 3;
        for &out_ch in &PHI_CHANNELS {
            let std = (2.0 / (in_ch * 9) as f64).sqrt();
            let kernel = Tensor::randn(vec![out_ch, in_ch, 3, 3], std, &mut r);
            let bias = Tensor::randn(vec![out_ch], 0.1, &mut r);
            layers.push((kernel, bias));
            in_ch = out_ch;
        }
        PerceptualExtractor { layers, seed }
    }

    pub fn feature_dim(&self) -> usize {
        FEATURE_DIM
    }

    /// Differentiable path: `[B,3,H,W] -> [B,F]`. Extractor weights enter
    /// the tape as constants, so gradients flow only into the images.
    pub fn features(&self, tape: &mut Tape, x: TensorId) -> TensorId {
        let mut cur = x;
        for (kernel, bias) in &self.layers {
            let k = tape.constant(kernel);
            let b = tape.constant(bias);
            cur = conv2d(tape, cur, k, b, 2, 1);
            cur = tape.leaky_relu(cur, 0.2);
        }
        global_avg_pool(tape, cur)
    }

    /// Non-differentiable convenience: one feature vector per image,
    /// computed in parallel with a fixed output order.
    pub fn extract(&self, images: &[Tensor]) -> Vec<Vec<f64>> {
        images
            .par_iter()
            .map(|img| {
                let mut tape = Tape::new();
                let mut input = img.clone();
                input.shape = vec![1, img.shape[0], img.shape[1], img.shape[2]];
                input.requires_grad = false;
                let x = tape.leaf(input);
                let f = self.features(&mut tape, x);
                tape.data(f).to_vec()
            })
            .collect()
    }
}

// ── Feature Gaussians and Fréchet distance ──────────────────────────

#[derive(Clone, Debug)]
pub struct FeatureGaussian {
    pub mean: Vec<f64>,
    /// Row-major `F x F`, symmetric, shrinkage-regularized.
    pub cov: Vec<f64>,
}

/// Unbiased covariance with `1e-6 I` shrinkage for small-sample safety.
pub fn fit_gaussian(features: &[Vec<f64>]) -> Result<FeatureGaussian> {
    if features.len() < 2 {
        return Err(XmError::Contract(format!(
            "need at least 2 samples to fit a feature Gaussian, got {}",
            features.len()
        )));
    }
    let n = features.len();
    let f = features[0].len();
    let mut mean = vec![0.0; f];
    for row in features {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; f * f];
    for row in features {
        for i in 0..f {
            let di = row[i] - mean[i];
            for j in i..f {
                cov[i * f + j] += di * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..f {
        for j in i..f {
            let v = cov[i * f + j] / (n - 1) as f64;
            cov[i * f + j] = v;
            cov[j * f + i] = v;
        }
        cov[i * f + i] += COV_SHRINKAGE;
    }
    Ok(FeatureGaussian { mean, cov })
}

/// Symmetric PSD square root via eigendecomposition with eigenvalue
/// clipping at zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let sqrt_vals: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let v = &eig.eigenvectors;
    let mut scaled = v.clone();
    for (c, s) in sqrt_vals.iter().enumerate() {
        for r in 0..scaled.nrows() {
            scaled[(r, c)] *= s;
        }
    }
    &scaled * v.transpose()
}

/// `|mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2)`, clamped at 0.
pub fn frechet_distance(a: &FeatureGaussian, b: &FeatureGaussian) -> Result<f64> {
    let f = a.mean.len();
    if a.mean.iter().chain(&b.mean).any(|v| !v.is_finite())
        || a.cov.iter().chain(&b.cov).any(|v| !v.is_finite())
    {
        return Err(XmError::Contract("non-finite Gaussian statistics".into()));
    }
    assert_eq!(b.mean.len(), f, "feature dims differ: {} vs {}", f, b.mean.len());
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let sa = DMatrix::from_row_slice(f, f, &a.cov);
    let sb = DMatrix::from_row_slice(f, f, &b.cov);
    let sa_sqrt = psd_sqrt(&sa);
    let inner = &sa_sqrt * &sb * &sa_sqrt;
    let sym = (&inner + inner.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let trace_sqrt: f64 = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let d = mean_term + sa.trace() + sb.trace() - 2.0 * trace_sqrt;
    Ok(d.max(0.0))
}

/// Fréchet distance between feature Gaussians of two image sets.
pub fn fid_lite(real: &[Tensor], fake: &[Tensor], phi: &PerceptualExtractor) -> Result<f64> {
    if real.len() < 2 || fake.len() < 2 {
        return Err(XmError::Contract(format!(
            "fid_lite needs at least 2 images per side, got {} real / {} fake",
            real.len(),
            fake.len()
        )));
    }
    let ga = fit_gaussian(&phi.extract(real))?;
    let gb = fit_gaussian(&phi.extract(fake))?;
    frechet_distance(&ga, &gb)
}

/// Mean pairwise distance between unit-normalized feature vectors over all
/// unordered pairs; higher means more diverse.
pub fn lpips_lite(images: &[Tensor], phi: &PerceptualExtractor) -> Result<f64> {
    if images.len() < 2 {
        return Err(XmError::Contract(format!(
            "lpips_lite needs at least 2 images, got {}",
            images.len()
        )));
    }
    let feats = phi.extract(images);
    let normed: Vec<Vec<f64>> = feats
        .iter()
        .map(|f| {
            let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                f.clone()
            } else {
                f.iter().map(|v| v / norm).collect()
            }
        })
        .collect();
    let n = normed.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += normed[i]
                .iter()
                .zip(&normed[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}
