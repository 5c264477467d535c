//! Minimal layer kit on top of candle: a named parameter store with seeded
//! initialization, convolution, instance normalization and activations.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Trainable parameters keyed by dotted path, iterated in name order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    device: Device,
}

impl ParamStore {
    pub fn new(device: &Device) -> Self {
        ParamStore {
            vars: BTreeMap::new(),
            device: device.clone(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: String, values: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(Error::validation(format!("duplicate parameter {name}")));
        }
        let var = Var::from_tensor(&Tensor::from_vec(values, shape, &self.device)?)?;
        let t = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(t)
    }

    /// He-normal weights for a layer feeding a leaky ReLU.
    pub fn kaiming<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        slope: f64,
        rng: &mut R,
    ) -> Result<Tensor> {
        let std = (2.0 / (1.0 + slope * slope)).sqrt() / (fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| dist.sample(rng) as f32).collect();
        self.insert(name.into(), values, shape)
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f32) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name.into(), vec![value; n], shape)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Snapshot of every parameter, detached from the graph.
    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().detach()))
            .collect()
    }

    /// Overwrites parameters in place from `values`; every parameter must be
    /// present with a matching shape.
    pub fn assign(&self, values: &BTreeMap<String, Tensor>, prefix: &str) -> Result<()> {
        for (name, var) in &self.vars {
            let key = format!("{prefix}{name}");
            let src = values
                .get(&key)
                .ok_or_else(|| Error::validation(format!("missing parameter {key}")))?;
            if src.dims() != var.dims() {
                return Err(Error::validation(format!(
                    "parameter {key}: shape {:?} does not match {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(DType::F32)?)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Norm {
    Instance,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Relu,
}

impl Activation {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(match *self {
            Activation::LeakyRelu { slope } => candle_nn::ops::leaky_relu(x, slope)?,
            Activation::Relu => x.relu()?,
        })
    }

    pub fn slope(&self) -> f64 {
        match *self {
            Activation::LeakyRelu { slope } => slope,
            Activation::Relu => 0.0,
        }
    }
}

/// 2-D convolution with "same" padding (`kernel / 2`).
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        slope: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.kaiming(
            format!("{name}.weight"),
            &[out_ch, in_ch, kernel, kernel],
            in_ch * kernel * kernel,
            slope,
            rng,
        )?;
        let bias = if bias {
            Some(store.constant(format!("{name}.bias"), &[out_ch], 0.0)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    /// Wraps fixed (non-trainable) tensors.
    pub fn frozen(weight: Tensor, bias: Option<Tensor>, stride: usize) -> Self {
        let padding = weight.dim(D::Minus1).unwrap_or(1) / 2;
        Conv2d {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Per-sample, per-channel normalization over spatial positions with a
/// learned affine transform.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl InstanceNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(InstanceNorm {
            gamma: store.constant(format!("{name}.gamma"), &[channels], 1.0)?,
            beta: store.constant(format!("{name}.beta"), &[channels], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let flat = x.reshape((n, c, h * w))?;
        let mean = flat.mean_keepdim(2)?;
        let centered = flat.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(2)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let g = self.gamma.reshape((1, c, 1))?;
        let b = self.beta.reshape((1, c, 1))?;
        Ok(normed.broadcast_mul(&g)?.broadcast_add(&b)?.reshape((n, c, h, w))?)
    }
}

/// Convolution, optional instance norm, activation.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    conv: Conv2d,
    norm: Option<InstanceNorm>,
    act: Activation,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        norm: Norm,
        act: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        // a bias directly before instance norm is cancelled by the mean subtraction
        let with_norm = norm == Norm::Instance;
        let conv = Conv2d::new(
            store,
            &format!("{name}.conv"),
            in_ch,
            out_ch,
            kernel,
            stride,
            !with_norm,
            act.slope(),
            rng,
        )?;
        let norm = if with_norm {
            Some(InstanceNorm::new(store, &format!("{name}.norm"), out_ch)?)
        } else {
            None
        };
        Ok(ConvBlock { conv, norm, act })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.conv.forward(x)?;
        if let Some(n) = &self.norm {
            y = n.forward(&y)?;
        }
        self.act.apply(&y)
    }
}

/// Parameters a conv block contributes, matching [`ConvBlock::new`].
pub(crate) fn conv_block_params(in_ch: usize, out_ch: usize, kernel: usize, norm: Norm) -> usize {
    let weights = out_ch * in_ch * kernel * kernel;
    match norm {
        Norm::Instance => weights + 2 * out_ch,
        Norm::None => weights + out_ch,
    }
}
