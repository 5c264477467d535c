//! Generator (two-channel U-Net) and discriminator (plain strided CNN).
//!
//! The generator encodes `[masked image, mask]` through four convolution
//! stages with kernels `[7, 5, 5, 5]` and strides `[1, 2, 2, 2]`, widths
//! doubling from `base_width`. The decoder mirrors every stride-2 stage with
//! a nearest-neighbour x2 upsample, concatenation of the matching encoder
//! output and a 3x3 convolution. A 1x1 convolution and a sigmoid produce the
//! single-channel output in `[0, 1]`.
//!
//! The discriminator is four 3x3 convolutions over channels
//! `[1, 32, 64, 128, 128]` with strides `[1, 2, 2, 2]`, global average
//! pooling and a linear layer to one logit.

use candle_core::{DType, Device, Tensor, D};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BinaryMask;
use crate::nn::{conv_block_params, Activation, Conv2d, ConvBlock, Norm, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub down_kernels: Vec<usize>,
    pub down_strides: Vec<usize>,
    pub base_width: usize,
    pub norm: Norm,
    pub activation: Activation,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            in_channels: 2,
            out_channels: 1,
            down_kernels: vec![7, 5, 5, 5],
            down_strides: vec![1, 2, 2, 2],
            base_width: 32,
            norm: Norm::Instance,
            activation: Activation::LeakyRelu { slope: 0.2 },
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.down_kernels.len() != 4 || self.down_strides.len() != 4 {
            return Err(Error::validation(
                "generator needs exactly four down stages (kernels and strides)",
            ));
        }
        if self.down_strides[0] != 1 || self.down_strides.iter().any(|&s| s != 1 && s != 2) {
            return Err(Error::validation(
                "generator strides must start at 1 and be 1 or 2",
            ));
        }
        if self.down_kernels.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(Error::validation("generator kernels must be odd"));
        }
        if self.in_channels != 2 || self.out_channels != 1 {
            return Err(Error::validation(
                "generator maps 2 input channels (image, mask) to 1 output channel",
            ));
        }
        if self.base_width == 0 {
            return Err(Error::validation("base_width must be positive"));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        (0..self.down_kernels.len())
            .map(|k| self.base_width << k)
            .collect()
    }

    /// Total spatial reduction; input sides must be multiples of it.
    pub fn downsample_factor(&self) -> usize {
        self.down_strides.iter().product()
    }

    pub fn parameter_count(&self) -> usize {
        let w = self.widths();
        let mut n = 0;
        let mut prev = self.in_channels;
        for (k, &kernel) in self.down_kernels.iter().enumerate() {
            n += conv_block_params(prev, w[k], kernel, self.norm);
            prev = w[k];
        }
        for k in (1..w.len()).rev() {
            n += conv_block_params(w[k] + w[k - 1], w[k - 1], 3, self.norm);
        }
        n + w[0] * self.out_channels + self.out_channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiscriminatorHead {
    /// Global average pool, then a linear map to one logit.
    GlobalAverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub head: DiscriminatorHead,
    /// Normalization after every conv except the first.
    pub norm: Norm,
    pub activation: Activation,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            channels: vec![1, 32, 64, 128, 128],
            strides: vec![1, 2, 2, 2],
            kernel: 3,
            head: DiscriminatorHead::GlobalAverage,
            norm: Norm::Instance,
            activation: Activation::LeakyRelu { slope: 0.2 },
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != self.strides.len() + 1 || self.strides.is_empty() {
            return Err(Error::validation(
                "discriminator needs one more channel entry than strides",
            ));
        }
        if self.channels[0] != 1 {
            return Err(Error::validation("discriminator takes single-channel images"));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::validation("discriminator kernel must be odd"));
        }
        if self.strides.iter().any(|&s| s == 0) || self.channels.iter().any(|&c| c == 0) {
            return Err(Error::validation("discriminator strides and channels must be positive"));
        }
        Ok(())
    }

    pub fn downsample_factor(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        for (k, pair) in self.channels.windows(2).enumerate() {
            let norm = if k == 0 { Norm::None } else { self.norm };
            n += conv_block_params(pair[0], pair[1], self.kernel, norm);
        }
        let last = *self.channels.last().expect("validated non-empty");
        n + last + 1
    }
}

/// Model family for [`count_parameters`].
#[derive(Debug, Clone, Copy)]
pub enum ModelConfig<'a> {
    Generator(&'a GeneratorConfig),
    Discriminator(&'a DiscriminatorConfig),
}

pub fn count_parameters(config: ModelConfig<'_>) -> usize {
    match config {
        ModelConfig::Generator(c) => c.parameter_count(),
        ModelConfig::Discriminator(c) => c.parameter_count(),
    }
}

fn check_input(x: &Tensor, channels: usize, factor: usize) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x
        .dims4()
        .map_err(|_| Error::validation(format!("expected NCHW input, got {:?}", x.dims())))?;
    if c != channels {
        return Err(Error::validation(format!(
            "expected {channels} input channel(s), got {c}"
        )));
    }
    if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::validation(format!(
            "input {h}x{w} must be divisible by {factor}"
        )));
    }
    Ok((n, h, w))
}

#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    down: Vec<ConvBlock>,
    /// `up[k]` merges stage `k + 1` back into stage `k`.
    up: Vec<ConvBlock>,
    head: Conv2d,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(config: &GeneratorConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let w = config.widths();
        let mut down = Vec::new();
        let mut prev = config.in_channels;
        for (k, (&kernel, &stride)) in config
            .down_kernels
            .iter()
            .zip(&config.down_strides)
            .enumerate()
        {
            down.push(ConvBlock::new(
                store,
                &format!("gen.down{k}"),
                prev,
                w[k],
                kernel,
                stride,
                config.norm,
                config.activation,
                rng,
            )?);
            prev = w[k];
        }
        let mut up = Vec::new();
        for k in 0..w.len() - 1 {
            up.push(ConvBlock::new(
                store,
                &format!("gen.up{k}"),
                w[k + 1] + w[k],
                w[k],
                3,
                1,
                config.norm,
                config.activation,
                rng,
            )?);
        }
        let head = Conv2d::new(store, "gen.head", w[0], config.out_channels, 1, 1, true, 1.0, rng)?;
        Ok(Generator {
            config: config.clone(),
            down,
            up,
            head,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// `masked` and `mask` are `(N, 1, H, W)`; returns `(N, 1, H, W)` in
    /// `[0, 1]`.
    pub fn forward(&self, masked: &Tensor, mask: &Tensor) -> Result<Tensor> {
        if masked.dims() != mask.dims() {
            return Err(Error::validation(format!(
                "image {:?} and mask {:?} shapes differ",
                masked.dims(),
                mask.dims()
            )));
        }
        let x = Tensor::cat(&[masked, mask], 1)?;
        check_input(&x, self.config.in_channels, self.config.downsample_factor())?;
        let mut skips = Vec::with_capacity(self.down.len());
        let mut h = x;
        for block in &self.down {
            h = block.forward(&h)?;
            skips.push(h.clone());
        }
        for k in (0..self.up.len()).rev() {
            let skip = &skips[k];
            let (_, _, sh, sw) = skip.dims4()?;
            let up = if h.dims()[2] != sh || h.dims()[3] != sw {
                h.upsample_nearest2d(sh, sw)?
            } else {
                h
            };
            h = self.up[k].forward(&Tensor::cat(&[&up, skip], 1)?)?;
        }
        Ok(candle_nn::ops::sigmoid(&self.head.forward(&h)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    blocks: Vec<ConvBlock>,
    head_weight: Tensor,
    head_bias: Tensor,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(config: &DiscriminatorConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::new();
        for (k, (pair, &stride)) in config.channels.windows(2).zip(&config.strides).enumerate() {
            let norm = if k == 0 { Norm::None } else { config.norm };
            blocks.push(ConvBlock::new(
                store,
                &format!("disc.conv{k}"),
                pair[0],
                pair[1],
                config.kernel,
                stride,
                norm,
                config.activation,
                rng,
            )?);
        }
        let last = *config.channels.last().expect("validated");
        let head_weight = store.kaiming("disc.head.weight", &[last, 1], last, 1.0, rng)?;
        let head_bias = store.constant("disc.head.bias", &[1], 0.0)?;
        Ok(Discriminator {
            config: config.clone(),
            blocks,
            head_weight,
            head_bias,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    /// One logit per image, shape `(N,)`.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        check_input(x, 1, self.config.downsample_factor())?;
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        let pooled = h.flatten_from(2)?.mean(D::Minus1)?;
        let logit = pooled.matmul(&self.head_weight)?.broadcast_add(&self.head_bias)?;
        Ok(logit.squeeze(1)?)
    }

    /// Probability that each image is real, shape `(N,)`, strictly in (0, 1)
    /// up to float saturation.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(candle_nn::ops::sigmoid(&self.logits(x)?)?)
    }
}

/// Runs the generator on a single `H x W` frame.
pub fn generator_forward(
    generator: &Generator,
    masked_image: &Array2<f32>,
    mask: &BinaryMask,
    device: &Device,
) -> Result<Array2<f32>> {
    let (h, w) = masked_image.dim();
    if mask.shape() != (h, w) {
        return Err(Error::validation(format!(
            "image {:?} and mask {:?} shapes differ",
            (h, w),
            mask.shape()
        )));
    }
    let x = image_to_tensor(masked_image, device)?;
    let m = image_to_tensor(&mask.to_f32(), device)?;
    let y = generator.forward(&x, &m)?;
    tensor_to_image(&y.squeeze(0)?.squeeze(0)?)
}

/// `(H, W)` array to a `(1, 1, H, W)` tensor.
pub fn image_to_tensor(img: &Array2<f32>, device: &Device) -> Result<Tensor> {
    let (h, w) = img.dim();
    let data: Vec<f32> = img.iter().copied().collect();
    Ok(Tensor::from_vec(data, (1, 1, h, w), device)?)
}

/// Stacks frames into an `(N, 1, H, W)` tensor.
pub fn images_to_tensor(imgs: &[&Array2<f32>], device: &Device) -> Result<Tensor> {
    let first = imgs
        .first()
        .ok_or_else(|| Error::validation("empty image batch"))?;
    let (h, w) = first.dim();
    let mut data = Vec::with_capacity(imgs.len() * h * w);
    for img in imgs {
        if img.dim() != (h, w) {
            return Err(Error::validation("images in a batch must share a shape"));
        }
        data.extend(img.iter().copied());
    }
    Ok(Tensor::from_vec(data, (imgs.len(), 1, h, w), device)?)
}

/// `(H, W)` tensor to an array.
pub fn tensor_to_image(t: &Tensor) -> Result<Array2<f32>> {
    let (h, w) = t.dims2()?;
    let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(Array2::from_shape_vec((h, w), data).expect("tensor dims match"))
}
