//! Building blocks of the denoising UNet.

use candle_core::{Module, Tensor, D};
use super::kernels::{group_normalize, im2col};
use super::params::{Init, ParamBuilder};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        pb: &mut ParamBuilder,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let weight = pb.get("weight", &[out_ch, in_ch, kernel, kernel], Init::FanIn(fan_in))?;
        let bias = pb.get("bias", &[out_ch], Init::FanIn(fan_in))?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let b = x.dim(0)?;
        let (out_ch, in_ch, k, _) = self.weight.dims4()?;
        let (patches, h_out, w_out) = im2col(x, k, self.stride, self.padding)?;
        let w = self.weight.reshape((out_ch, in_ch * k * k))?;
        // (B·H·W, O) -> (B, O, H, W)
        let y = patches
            .matmul(&w.t()?)?
            .reshape((b, h_out * w_out, out_ch))?
            .transpose(1, 2)?
            .reshape((b, out_ch, h_out, w_out))?;
        y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)
    }
}

/// Group normalization with a per-channel affine transform.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
}

impl Module for GroupNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let xhat = group_normalize(x, self.groups, 1e-5)?;
        xhat.broadcast_mul(&self.weight.reshape((1, (), 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, (), 1, 1))?)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = pb.get("weight", &[out_dim, in_dim], Init::FanIn(in_dim))?;
        let bias = pb.get("bias", &[out_dim], Init::FanIn(in_dim))?;
        Ok(Self { weight, bias })
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        x.broadcast_matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)
    }
}

pub fn group_norm(pb: &mut ParamBuilder, channels: usize, groups: usize) -> Result<GroupNorm> {
    let weight = pb.get("weight", &[channels], Init::Const(1.0))?;
    let bias = pb.get("bias", &[channels], Init::Const(0.0))?;
    Ok(GroupNorm {
        weight,
        bias,
        groups,
    })
}

/// Largest group count ≤ `preferred` that divides `channels`.
pub fn groups_for(channels: usize, preferred: usize) -> usize {
    (1..=preferred.min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

/// Sinusoidal features of integer timesteps, `(B, dim)`.
pub fn timestep_features(timesteps: &[usize], dim: usize, like: &Tensor) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        let mut row = vec![0.0f64; dim];
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            row[i] = arg.sin();
            row[half + i] = arg.cos();
        }
        data.extend(row);
    }
    Ok(Tensor::from_vec(data, (timesteps.len(), dim), like.device())?.to_dtype(like.dtype())?)
}

/// Residual block with an additive timestep projection.
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(
        pb: &mut ParamBuilder,
        in_ch: usize,
        out_ch: usize,
        time_dim: usize,
        groups: usize,
    ) -> Result<Self> {
        let norm1 = pb.scoped("norm1", |pb| group_norm(pb, in_ch, groups_for(in_ch, groups)))?;
        let conv1 = pb.scoped("conv1", |pb| Conv2d::new(pb, in_ch, out_ch, 3, 1, 1))?;
        let time_proj = pb.scoped("time_proj", |pb| Linear::new(pb, time_dim, out_ch))?;
        let norm2 = pb.scoped("norm2", |pb| group_norm(pb, out_ch, groups_for(out_ch, groups)))?;
        let conv2 = pb.scoped("conv2", |pb| Conv2d::new(pb, out_ch, out_ch, 3, 1, 1))?;
        let shortcut = if in_ch != out_ch {
            Some(pb.scoped("shortcut", |pb| Conv2d::new(pb, in_ch, out_ch, 1, 1, 0))?)
        } else {
            None
        };
        Ok(Self {
            norm1,
            conv1,
            time_proj,
            norm2,
            conv2,
            shortcut,
        })
    }

    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self.time_proj.forward(&temb.silu()?)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.shortcut {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Single-head spatial attention.
///
/// With a context map, image tokens and context tokens form one joint
/// sequence for keys and values; only the image positions are read back out.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    norm: GroupNorm,
    context_norm: Option<GroupNorm>,
    query: Linear,
    key: Linear,
    value: Linear,
    proj_out: Linear,
    channels: usize,
}

impl AttentionBlock {
    pub fn new(pb: &mut ParamBuilder, channels: usize, groups: usize, with_context: bool) -> Result<Self> {
        let g = groups_for(channels, groups);
        let norm = pb.scoped("norm", |pb| group_norm(pb, channels, g))?;
        let context_norm = if with_context {
            Some(pb.scoped("context_norm", |pb| group_norm(pb, channels, g))?)
        } else {
            None
        };
        Ok(Self {
            norm,
            context_norm,
            query: pb.scoped("query", |pb| Linear::new(pb, channels, channels))?,
            key: pb.scoped("key", |pb| Linear::new(pb, channels, channels))?,
            value: pb.scoped("value", |pb| Linear::new(pb, channels, channels))?,
            proj_out: pb.scoped("proj_out", |pb| Linear::new(pb, channels, channels))?,
            channels,
        })
    }

    fn tokens(x: &Tensor) -> Result<Tensor> {
        // (B, C, H, W) -> (B, HW, C)
        Ok(x.flatten_from(2)?.transpose(1, 2)?.contiguous()?)
    }

    pub fn forward(&self, x: &Tensor, context: Option<&Tensor>) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let image = Self::tokens(&self.norm.forward(x)?)?;
        let joint = match (context, &self.context_norm) {
            (Some(ctx), Some(norm)) => Tensor::cat(&[&image, &Self::tokens(&norm.forward(ctx)?)?], 1)?,
            _ => image.clone(),
        };
        let q = self.query.forward(&image)?;
        let k = self.key.forward(&joint)?;
        let v = self.value.forward(&joint)?;
        let scale = 1.0 / (self.channels as f64).sqrt();
        let scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let attended = self.proj_out.forward(&weights.matmul(&v)?)?;
        let attended = attended.transpose(1, 2)?.reshape((b, c, h, w))?;
        Ok((x + attended)?)
    }
}

#[derive(Clone, Debug)]
pub struct Downsample {
    conv: Conv2d,
}

impl Downsample {
    pub fn new(pb: &mut ParamBuilder, channels: usize) -> Result<Self> {
        Ok(Self {
            conv: pb.scoped("conv", |pb| Conv2d::new(pb, channels, channels, 3, 2, 1))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.conv.forward(x)?)
    }
}

#[derive(Clone, Debug)]
pub struct Upsample {
    conv: Conv2d,
}

impl Upsample {
    pub fn new(pb: &mut ParamBuilder, channels: usize) -> Result<Self> {
        Ok(Self {
            conv: pb.scoped("conv", |pb| Conv2d::new(pb, channels, channels, 3, 1, 1))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        Ok(self.conv.forward(&x.upsample_nearest2d(2 * h, 2 * w)?)?)
    }
}
