//! Frozen deep feature extractors used by the perceptual loss and FID.
//!
//! Two sources exist for each role. The pretrained networks (VGG16 blocks
//! for the perceptual distance, Inception pool features for FID) are loaded
//! from safetensors files in torchvision parameter naming. When no weights
//! are configured a small fixed-seed random convolutional stub stands in so
//! everything runs offline; values produced with the stub are only
//! comparable with other stub values.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Conv2d;

/// Maps `(N, 1, H, W)` images in `[0, 1]` to per-layer feature maps
/// `(N, C_l, H_l, W_l)`.
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;
}

/// Maps `(N, 1, H, W)` images in `[0, 1]` to `(N, d)` embeddings.
pub trait FeatureModel: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, x: &Tensor) -> Result<Tensor>;
}

fn gray_to_rgb_signed(x: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    if c != 1 {
        return Err(Error::validation(format!(
            "feature extractors take single-channel images, got {c} channels"
        )));
    }
    Ok(((x * 2.0)? - 1.0)?.repeat((1, 3, 1, 1))?)
}

/// Seeded random ReLU convnet with three taps: 8 channels at full
/// resolution, 16 at 1/2 and 32 at 1/4.
#[derive(Debug, Clone)]
pub struct StubExtractor {
    layers: Vec<Conv2d>,
    name: String,
}

impl StubExtractor {
    pub const WIDTHS: [usize; 3] = [8, 16, 32];

    pub fn new(seed: u64, device: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut prev = 3;
        for (k, &out) in Self::WIDTHS.iter().enumerate() {
            let fan_in = prev * 9;
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let w: Vec<f32> = (0..out * fan_in).map(|_| dist.sample(&mut rng) as f32).collect();
            let b: Vec<f32> = (0..out).map(|_| rng.random_range(-0.1f32..0.1)).collect();
            let weight = Tensor::from_vec(w, (out, prev, 3, 3), device)?;
            let bias = Tensor::from_vec(b, out, device)?;
            layers.push(Conv2d::frozen(weight, Some(bias), if k == 0 { 1 } else { 2 }));
            prev = out;
        }
        Ok(StubExtractor {
            layers,
            name: format!("test-stub(seed={seed})"),
        })
    }
}

impl FeatureExtractor for StubExtractor {
    fn name(&self) -> &str {
        &self.name
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = gray_to_rgb_signed(x)?;
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            h = l.forward(&h)?.relu()?;
            out.push(h.clone());
        }
        Ok(out)
    }
}

/// FID embedding from the stub: spatial mean of the deepest tap.
#[derive(Debug, Clone)]
pub struct StubFeatureModel {
    inner: StubExtractor,
}

impl StubFeatureModel {
    pub fn new(seed: u64, device: &Device) -> Result<Self> {
        Ok(StubFeatureModel {
            inner: StubExtractor::new(seed, device)?,
        })
    }
}

impl FeatureModel for StubFeatureModel {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn dim(&self) -> usize {
        StubExtractor::WIDTHS[2]
    }

    fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let feats = self.inner.features(x)?;
        let last = feats.last().expect("stub has taps");
        Ok(last.flatten_from(2)?.mean(D::Minus1)?)
    }
}

pub(crate) fn load_safetensors(path: &Path, device: &Device) -> Result<std::collections::HashMap<String, Tensor>> {
    candle_core::safetensors::load(path, device).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub(crate) fn take(
    map: &std::collections::HashMap<String, Tensor>,
    key: &str,
    path: &Path,
) -> Result<Tensor> {
    map.get(key)
        .ok_or_else(|| Error::Checkpoint {
            path: path.to_path_buf(),
            message: format!("missing tensor {key}"),
        })?
        .to_dtype(DType::F32)
        .map_err(Error::from)
}

/// VGG16 convolutional trunk with taps after relu1_2, relu2_2, relu3_3,
/// relu4_3 and relu5_3. Expects torchvision names `features.<idx>.weight`
/// and `features.<idx>.bias`.
#[derive(Debug, Clone)]
pub struct Vgg16Extractor {
    blocks: Vec<Vec<Conv2d>>,
    shift: Tensor,
    scale: Tensor,
}

impl Vgg16Extractor {
    /// torchvision `features` indices of the conv layers, grouped by block.
    const CONV_INDICES: [&'static [usize]; 5] = [
        &[0, 2],
        &[5, 7],
        &[10, 12, 14],
        &[17, 19, 21],
        &[24, 26, 28],
    ];

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let map = load_safetensors(path, device)?;
        let mut blocks = Vec::new();
        for idxs in Self::CONV_INDICES {
            let mut convs = Vec::new();
            for &i in idxs {
                let w = take(&map, &format!("features.{i}.weight"), path)?;
                let b = take(&map, &format!("features.{i}.bias"), path)?;
                convs.push(Conv2d::frozen(w, Some(b), 1));
            }
            blocks.push(convs);
        }
        // input normalization used by the reference perceptual metric
        let shift = Tensor::new(&[-0.030f32, -0.088, -0.188], device)?.reshape((1, 3, 1, 1))?;
        let scale = Tensor::new(&[0.458f32, 0.448, 0.450], device)?.reshape((1, 3, 1, 1))?;
        Ok(Vgg16Extractor { blocks, shift, scale })
    }
}

impl FeatureExtractor for Vgg16Extractor {
    fn name(&self) -> &str {
        "pretrained-vgg16"
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let x = gray_to_rgb_signed(x)?;
        let mut h = x.broadcast_sub(&self.shift)?.broadcast_div(&self.scale)?;
        let mut out = Vec::with_capacity(5);
        for (k, block) in self.blocks.iter().enumerate() {
            if k > 0 {
                h = h.max_pool2d(2)?;
            }
            for conv in block {
                h = conv.forward(&h)?.relu()?;
            }
            out.push(h.clone());
        }
        Ok(out)
    }
}

/// FID embedding settings as they appear in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureModelConfig {
    /// Pretrained Inception weights (safetensors). Absent: the seeded stub.
    pub weights: Option<PathBuf>,
    pub stub_seed: u64,
}

impl Default for FeatureModelConfig {
    fn default() -> Self {
        FeatureModelConfig {
            weights: None,
            stub_seed: 0xf1d,
        }
    }
}

pub fn build_feature_model(cfg: &FeatureModelConfig, device: &Device) -> Result<Box<dyn FeatureModel>> {
    match &cfg.weights {
        Some(path) => Ok(Box::new(crate::inception::InceptionV3::load(path, device)?)),
        None => {
            log::warn!(
                "no FID feature weights configured (fid.weights); using the random test-stub \
                 embedding, FID values are only comparable with other stub values"
            );
            Ok(Box::new(StubFeatureModel::new(cfg.stub_seed, device)?))
        }
    }
}
