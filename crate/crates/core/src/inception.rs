//! InceptionV3 pool features in the variant used by the standard FID tools
//! (`pt_inception-2015-12-05` weights, torchvision parameter names).
//! Batch norms are folded into the preceding convolutions at load time.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor, D};

use crate::error::Result;
use crate::features::{load_safetensors, take, FeatureModel};

const BN_EPS: f64 = 1e-3;
const INPUT_SIZE: usize = 299;

#[derive(Debug, Clone)]
struct BasicConv {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    /// (top/bottom, left/right)
    pad: (usize, usize),
}

impl BasicConv {
    fn load(
        map: &HashMap<String, Tensor>,
        path: &Path,
        name: &str,
        stride: usize,
        pad: (usize, usize),
    ) -> Result<Self> {
        let w = take(map, &format!("{name}.conv.weight"), path)?;
        let gamma = take(map, &format!("{name}.bn.weight"), path)?;
        let beta = take(map, &format!("{name}.bn.bias"), path)?;
        let mean = take(map, &format!("{name}.bn.running_mean"), path)?;
        let var = take(map, &format!("{name}.bn.running_var"), path)?;
        let scale = (gamma / (var + BN_EPS)?.sqrt()?)?;
        let weight = w.broadcast_mul(&scale.reshape(((), 1, 1, 1))?)?;
        let bias = (beta - (mean * &scale)?)?;
        Ok(BasicConv {
            weight,
            bias,
            stride,
            pad,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        if self.pad.0 > 0 {
            x = x.pad_with_zeros(2, self.pad.0, self.pad.0)?;
        }
        if self.pad.1 > 0 {
            x = x.pad_with_zeros(3, self.pad.1, self.pad.1)?;
        }
        let y = x.conv2d(&self.weight, 0, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?.relu()?)
    }
}

fn seq(x: &Tensor, convs: &[BasicConv]) -> Result<Tensor> {
    let mut h = x.clone();
    for c in convs {
        h = c.forward(&h)?;
    }
    Ok(h)
}

/// 3x3 stride-1 average pool with one pixel of padding that is left out of
/// the divisor.
fn avg_pool_exclude_pad(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let p = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
    let sum = (p.avg_pool2d_with_stride(3, 1)? * 9.0)?;
    let ones = Tensor::ones((1, 1, h, w), x.dtype(), x.device())?;
    let count = (ones
        .pad_with_zeros(2, 1, 1)?
        .pad_with_zeros(3, 1, 1)?
        .avg_pool2d_with_stride(3, 1)?
        * 9.0)?;
    Ok(sum.broadcast_div(&count)?)
}

fn max_pool_same(x: &Tensor) -> Result<Tensor> {
    let p = x.pad_with_same(2, 1, 1)?.pad_with_same(3, 1, 1)?;
    Ok(p.max_pool2d_with_stride(3, 1)?)
}

#[derive(Debug, Clone)]
enum Block {
    A {
        b1: BasicConv,
        b5: [BasicConv; 2],
        b3: [BasicConv; 3],
        pool: BasicConv,
    },
    B {
        b3: BasicConv,
        b3dbl: [BasicConv; 3],
    },
    C {
        b1: BasicConv,
        b7: [BasicConv; 3],
        b7dbl: [BasicConv; 5],
        pool: BasicConv,
    },
    D {
        b3: [BasicConv; 2],
        b7: [BasicConv; 4],
    },
    E {
        b1: BasicConv,
        b3_1: BasicConv,
        b3_2: [BasicConv; 2],
        b3dbl_1: [BasicConv; 2],
        b3dbl_3: [BasicConv; 2],
        pool: BasicConv,
        max_pool: bool,
    },
}

impl Block {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let parts = match self {
            Block::A { b1, b5, b3, pool } => vec![
                b1.forward(x)?,
                seq(x, b5)?,
                seq(x, b3)?,
                pool.forward(&avg_pool_exclude_pad(x)?)?,
            ],
            Block::B { b3, b3dbl } => vec![
                b3.forward(x)?,
                seq(x, b3dbl)?,
                x.max_pool2d_with_stride(3, 2)?,
            ],
            Block::C { b1, b7, b7dbl, pool } => vec![
                b1.forward(x)?,
                seq(x, b7)?,
                seq(x, b7dbl)?,
                pool.forward(&avg_pool_exclude_pad(x)?)?,
            ],
            Block::D { b3, b7 } => vec![seq(x, b3)?, seq(x, b7)?, x.max_pool2d_with_stride(3, 2)?],
            Block::E {
                b1,
                b3_1,
                b3_2,
                b3dbl_1,
                b3dbl_3,
                pool,
                max_pool,
            } => {
                let h = b3_1.forward(x)?;
                let b3 = Tensor::cat(&[b3_2[0].forward(&h)?, b3_2[1].forward(&h)?], 1)?;
                let h = seq(x, b3dbl_1)?;
                let b3dbl = Tensor::cat(&[b3dbl_3[0].forward(&h)?, b3dbl_3[1].forward(&h)?], 1)?;
                let pooled = if *max_pool {
                    max_pool_same(x)?
                } else {
                    avg_pool_exclude_pad(x)?
                };
                vec![b1.forward(x)?, b3, b3dbl, pool.forward(&pooled)?]
            }
        };
        Ok(Tensor::cat(&parts, 1)?)
    }
}

#[derive(Debug, Clone)]
pub struct InceptionV3 {
    stem: Vec<BasicConv>,
    blocks: Vec<Block>,
}

impl InceptionV3 {
    pub const DIM: usize = 2048;

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let map = load_safetensors(path, device)?;
        let c = |name: &str, stride: usize, pad: (usize, usize)| BasicConv::load(&map, path, name, stride, pad);
        let stem = vec![
            c("Conv2d_1a_3x3", 2, (0, 0))?,
            c("Conv2d_2a_3x3", 1, (0, 0))?,
            c("Conv2d_2b_3x3", 1, (1, 1))?,
            c("Conv2d_3b_1x1", 1, (0, 0))?,
            c("Conv2d_4a_3x3", 1, (0, 0))?,
        ];
        let a = |n: &str| -> Result<Block> {
            Ok(Block::A {
                b1: c(&format!("{n}.branch1x1"), 1, (0, 0))?,
                b5: [c(&format!("{n}.branch5x5_1"), 1, (0, 0))?, c(&format!("{n}.branch5x5_2"), 1, (2, 2))?],
                b3: [
                    c(&format!("{n}.branch3x3dbl_1"), 1, (0, 0))?,
                    c(&format!("{n}.branch3x3dbl_2"), 1, (1, 1))?,
                    c(&format!("{n}.branch3x3dbl_3"), 1, (1, 1))?,
                ],
                pool: c(&format!("{n}.branch_pool"), 1, (0, 0))?,
            })
        };
        let cc = |n: &str| -> Result<Block> {
            Ok(Block::C {
                b1: c(&format!("{n}.branch1x1"), 1, (0, 0))?,
                b7: [
                    c(&format!("{n}.branch7x7_1"), 1, (0, 0))?,
                    c(&format!("{n}.branch7x7_2"), 1, (0, 3))?,
                    c(&format!("{n}.branch7x7_3"), 1, (3, 0))?,
                ],
                b7dbl: [
                    c(&format!("{n}.branch7x7dbl_1"), 1, (0, 0))?,
                    c(&format!("{n}.branch7x7dbl_2"), 1, (3, 0))?,
                    c(&format!("{n}.branch7x7dbl_3"), 1, (0, 3))?,
                    c(&format!("{n}.branch7x7dbl_4"), 1, (3, 0))?,
                    c(&format!("{n}.branch7x7dbl_5"), 1, (0, 3))?,
                ],
                pool: c(&format!("{n}.branch_pool"), 1, (0, 0))?,
            })
        };
        let e = |n: &str, max_pool: bool| -> Result<Block> {
            Ok(Block::E {
                b1: c(&format!("{n}.branch1x1"), 1, (0, 0))?,
                b3_1: c(&format!("{n}.branch3x3_1"), 1, (0, 0))?,
                b3_2: [c(&format!("{n}.branch3x3_2a"), 1, (0, 1))?, c(&format!("{n}.branch3x3_2b"), 1, (1, 0))?],
                b3dbl_1: [
                    c(&format!("{n}.branch3x3dbl_1"), 1, (0, 0))?,
                    c(&format!("{n}.branch3x3dbl_2"), 1, (1, 1))?,
                ],
                b3dbl_3: [
                    c(&format!("{n}.branch3x3dbl_3a"), 1, (0, 1))?,
                    c(&format!("{n}.branch3x3dbl_3b"), 1, (1, 0))?,
                ],
                pool: c(&format!("{n}.branch_pool"), 1, (0, 0))?,
                max_pool,
            })
        };
        let blocks = vec![
            a("Mixed_5b")?,
            a("Mixed_5c")?,
            a("Mixed_5d")?,
            Block::B {
                b3: c("Mixed_6a.branch3x3", 2, (0, 0))?,
                b3dbl: [
                    c("Mixed_6a.branch3x3dbl_1", 1, (0, 0))?,
                    c("Mixed_6a.branch3x3dbl_2", 1, (1, 1))?,
                    c("Mixed_6a.branch3x3dbl_3", 2, (0, 0))?,
                ],
            },
            cc("Mixed_6b")?,
            cc("Mixed_6c")?,
            cc("Mixed_6d")?,
            cc("Mixed_6e")?,
            Block::D {
                b3: [c("Mixed_7a.branch3x3_1", 1, (0, 0))?, c("Mixed_7a.branch3x3_2", 2, (0, 0))?],
                b7: [
                    c("Mixed_7a.branch7x7x3_1", 1, (0, 0))?,
                    c("Mixed_7a.branch7x7x3_2", 1, (0, 3))?,
                    c("Mixed_7a.branch7x7x3_3", 1, (3, 0))?,
                    c("Mixed_7a.branch7x7x3_4", 2, (0, 0))?,
                ],
            },
            e("Mixed_7b", false)?,
            e("Mixed_7c", true)?,
        ];
        Ok(InceptionV3 { stem, blocks })
    }
}

impl FeatureModel for InceptionV3 {
    fn name(&self) -> &str {
        "pretrained-inception-v3"
    }

    fn dim(&self) -> usize {
        Self::DIM
    }

    fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let x = x
            .upsample_bilinear2d(INPUT_SIZE, INPUT_SIZE, false)?
            .repeat((1, 3, 1, 1))?;
        let mut h = ((x * 2.0)? - 1.0)?;
        for (k, conv) in self.stem.iter().enumerate() {
            h = conv.forward(&h)?;
            if k == 2 || k == 4 {
                h = h.max_pool2d_with_stride(3, 2)?;
            }
        }
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        Ok(h.flatten_from(2)?.mean(D::Minus1)?)
    }
}
