//! Adversarial losses, the perceptual distance and the combined generator
//! objective.
//!
//! All losses are empirical batch means over discriminator probabilities,
//! clamped to `[ε, 1 - ε]` with `ε = 1e-7` before taking logs:
//!
//! ```text
//! d_loss     = -mean(log D(real)) - mean(log(1 - D(fake)))
//! g_adv_loss = -mean(log D(fake))
//! g_total    = g_adv + g_lpips
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{load_safetensors, take, FeatureExtractor, StubExtractor, Vgg16Extractor};

pub const SCORE_EPS: f64 = 1e-7;
/// Floor inside the feature-norm square root; keeps the gradient finite at
/// all-zero feature vectors.
pub const NORM_EPS: f64 = 1e-10;

fn check_scores(scores: &Tensor, what: &str) -> Result<()> {
    if scores.elem_count() == 0 {
        return Err(Error::validation(format!("{what}: empty batch")));
    }
    Ok(())
}

fn clamped(scores: &Tensor) -> Result<Tensor> {
    Ok(scores.clamp(SCORE_EPS, 1.0 - SCORE_EPS)?)
}

/// Discriminator loss over probability batches.
pub fn d_loss(real_scores: &Tensor, fake_scores: &Tensor) -> Result<Tensor> {
    check_scores(real_scores, "real scores")?;
    check_scores(fake_scores, "fake scores")?;
    let real = clamped(real_scores)?.log()?.mean_all()?;
    let fake = clamped(fake_scores)?.affine(-1.0, 1.0)?.log()?.mean_all()?;
    Ok((real + fake)?.neg()?)
}

/// Non-saturating generator loss.
pub fn g_adv_loss(fake_scores: &Tensor) -> Result<Tensor> {
    check_scores(fake_scores, "fake scores")?;
    Ok(clamped(fake_scores)?.log()?.mean_all()?.neg()?)
}

/// Per-layer weighting of squared feature differences.
#[derive(Debug, Clone)]
pub enum LayerWeights {
    /// One scalar per layer; the layer term is `w_l * mean_{h,w,c} d²`.
    Uniform(Vec<f64>),
    /// Per-channel `(C_l,)` vectors; the layer term is
    /// `mean_{h,w} Σ_c w_{l,c} d²`.
    PerChannel(Vec<Tensor>),
}

/// Weighted squared distance between (optionally unit-normalized) deep
/// features of two images.
#[derive(Clone)]
pub struct Lpips {
    extractor: Arc<dyn FeatureExtractor>,
    weights: Option<LayerWeights>,
    normalize: bool,
}

impl std::fmt::Debug for Lpips {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Lpips")
            .field("extractor", &self.extractor.name())
            .field("weights", &self.weights)
            .field("normalize", &self.normalize)
            .finish()
    }
}

/// Unit-normalizes features along the channel axis.
pub fn normalize_channels(f: &Tensor) -> Result<Tensor> {
    let norm = (f.sqr()?.sum_keepdim(1)? + NORM_EPS * NORM_EPS)?.sqrt()?;
    Ok(f.broadcast_div(&norm)?)
}

impl Lpips {
    /// Uniform weight 1.0 on every layer unless `weights` is given.
    pub fn new(extractor: Arc<dyn FeatureExtractor>, weights: Option<LayerWeights>, normalize: bool) -> Self {
        Lpips {
            extractor,
            weights,
            normalize,
        }
    }

    pub fn extractor(&self) -> &Arc<dyn FeatureExtractor> {
        &self.extractor
    }

    pub fn normalizes(&self) -> bool {
        self.normalize
    }

    /// Per-image distances, shape `(N,)`, for `(N, 1, H, W)` inputs.
    pub fn distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.dims() != b.dims() {
            return Err(Error::validation(format!(
                "perceptual distance: shapes {:?} and {:?} differ",
                a.dims(),
                b.dims()
            )));
        }
        let n = a.dims4()?.0;
        // one pass through the extractor for both images
        let both = Tensor::cat(&[a, b], 0)?;
        let feats = self.extractor.features(&both)?;
        if let Some(LayerWeights::Uniform(w)) = &self.weights {
            if w.len() != feats.len() {
                return Err(Error::validation(format!(
                    "{} layer weights for {} extractor layers",
                    w.len(),
                    feats.len()
                )));
            }
        }
        if let Some(LayerWeights::PerChannel(w)) = &self.weights {
            if w.len() != feats.len() {
                return Err(Error::validation(format!(
                    "{} layer weights for {} extractor layers",
                    w.len(),
                    feats.len()
                )));
            }
        }
        let mut total: Option<Tensor> = None;
        for (l, f) in feats.iter().enumerate() {
            let f = if self.normalize {
                normalize_channels(f)?
            } else {
                f.clone()
            };
            let fa = f.narrow(0, 0, n)?;
            let fb = f.narrow(0, n, n)?;
            let d2 = (fa - fb)?.sqr()?;
            let term = match &self.weights {
                None => d2.flatten_from(1)?.mean(1)?,
                Some(LayerWeights::Uniform(w)) => (d2.flatten_from(1)?.mean(1)? * w[l])?,
                Some(LayerWeights::PerChannel(w)) => {
                    let c = d2.dims4()?.1;
                    let wc = w[l].reshape((1, c, 1, 1))?;
                    d2.broadcast_mul(&wc)?.sum_keepdim(1)?.flatten_from(1)?.mean(1)?
                }
            };
            total = Some(match total {
                None => term,
                Some(t) => (t + term)?,
            });
        }
        total.ok_or_else(|| Error::validation("extractor produced no feature layers"))
    }

    /// Batch-mean distance as a scalar tensor.
    pub fn lpips(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Ok(self.distance(a, b)?.mean_all()?)
    }
}

/// Perceptual-distance settings as they appear in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LpipsConfig {
    /// Pretrained VGG16 weights (safetensors, torchvision names). Absent:
    /// the seeded test stub is used.
    pub weights: Option<PathBuf>,
    /// Optional per-channel layer weights (`lin<l>.model.1.weight`).
    pub lin_weights: Option<PathBuf>,
    /// Disable channel normalization and use the bare weighted formula.
    pub raw_eq8: bool,
    pub stub_seed: u64,
}

impl Default for LpipsConfig {
    fn default() -> Self {
        LpipsConfig {
            weights: None,
            lin_weights: None,
            raw_eq8: false,
            stub_seed: 0x5eed,
        }
    }
}

fn load_lin_weights(path: &Path, layers: usize, device: &Device) -> Result<LayerWeights> {
    let map = load_safetensors(path, device)?;
    let mut out = Vec::with_capacity(layers);
    for l in 0..layers {
        let t = take(&map, &format!("lin{l}.model.1.weight"), path)?;
        out.push(t.flatten_all()?);
    }
    Ok(LayerWeights::PerChannel(out))
}

/// Builds the perceptual distance described by `cfg`.
pub fn build_lpips(cfg: &LpipsConfig, device: &Device) -> Result<Lpips> {
    let extractor: Arc<dyn FeatureExtractor> = match &cfg.weights {
        Some(path) => Arc::new(Vgg16Extractor::load(path, device)?),
        None => {
            log::warn!(
                "no perceptual-loss weights configured (lpips.weights); using the random \
                 test-stub extractor, values are NOT comparable with published LPIPS"
            );
            Arc::new(StubExtractor::new(cfg.stub_seed, device)?)
        }
    };
    let weights = match &cfg.lin_weights {
        Some(path) => {
            let layers = if cfg.weights.is_some() { 5 } else { StubExtractor::WIDTHS.len() };
            Some(load_lin_weights(path, layers, device)?)
        }
        None => None,
    };
    Ok(Lpips::new(extractor, weights, !cfg.raw_eq8))
}

/// Loss values of one generator/discriminator step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub d_loss: f64,
    pub g_adv: f64,
    pub g_lpips: f64,
    pub g_total: f64,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        self.d_loss.is_finite() && self.g_adv.is_finite() && self.g_lpips.is_finite() && self.g_total.is_finite()
    }
}

/// Weights of the two generator terms; both 1 reproduces the plain sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub adversarial: f64,
    pub perceptual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            adversarial: 1.0,
            perceptual: 1.0,
        }
    }
}

/// Generator objective and its components. The returned tensor carries the
/// graph for backpropagation; the bundle holds the reported values with
/// `g_total` assembled from the reported components so the sum is exact.
/// `d_loss` is left at zero for the caller to fill in.
pub fn combined_g_loss(
    fake_scores: &Tensor,
    generated: &Tensor,
    target: &Tensor,
    lpips: &Lpips,
    weights: &LossWeights,
) -> Result<(Tensor, LossBundle)> {
    let adv = g_adv_loss(fake_scores)?;
    let perc = lpips.lpips(generated, target)?;
    let total = ((&adv * weights.adversarial)? + (&perc * weights.perceptual)?)?;
    let g_adv = scalar(&adv)?;
    let g_lpips = scalar(&perc)?;
    let bundle = LossBundle {
        d_loss: 0.0,
        g_adv,
        g_lpips,
        g_total: weights.adversarial * g_adv + weights.perceptual * g_lpips,
    };
    Ok((total, bundle))
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_vec0::<f64>()?)
}
