//! Conditional denoising network.
//!
//! A UNet maps the noisy high-resolution frame, concatenated with the identity
//! image and the noised previous frame, to its prediction of the next (less
//! noisy) frame. The low-resolution expression frame is encoded separately
//! and fused by joint attention at one UNet level.

mod kernels;
mod layers;
pub mod params;

use candle_core::{DType, Device, Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{ImageTensor, CHANNELS};
use layers::{
    group_norm, groups_for, timestep_features, AttentionBlock, Conv2d, Downsample, GroupNorm, Linear,
    ResBlock, Upsample,
};
pub use params::{Init, ParamBuilder, Params};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub high_res: usize,
    pub low_res: usize,
    pub hidden_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub res_blocks_per_level: usize,
    /// 1-based levels that carry an attention block.
    pub attention_levels: Vec<usize>,
    /// 1-based level where expression features are fused.
    pub expression_injection_level: usize,
    pub timestep_embedding_dim: usize,
    pub norm_groups: usize,
    pub use_expression_encoder: bool,
    pub use_previous_frame: bool,
    pub noise_previous_frame: bool,
    /// Standard deviation of the noise added to the previous frame.
    pub previous_noise_scale: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            high_res: 192,
            low_res: 64,
            hidden_channels: 128,
            channel_multipliers: vec![1, 1, 2, 2, 4, 8],
            res_blocks_per_level: 1,
            attention_levels: vec![5],
            expression_injection_level: 5,
            timestep_embedding_dim: 512,
            norm_groups: 32,
            use_expression_encoder: true,
            use_previous_frame: true,
            noise_previous_frame: true,
            previous_noise_scale: 1.0,
        }
    }
}

impl DenoiserConfig {
    /// Desk-scale configuration: 32×32 frames, 8×8 expression input.
    pub fn toy() -> Self {
        Self {
            high_res: 32,
            low_res: 8,
            hidden_channels: 32,
            channel_multipliers: vec![1, 2, 4],
            res_blocks_per_level: 1,
            attention_levels: vec![3],
            expression_injection_level: 3,
            timestep_embedding_dim: 128,
            norm_groups: 8,
            ..Self::default()
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    /// Channels of the stacked network input: noisy frame, identity image,
    /// plus the previous frame and the upsampled expression frame when those
    /// are fed by concatenation.
    pub fn in_channels(&self) -> usize {
        let mut images = 2;
        if self.use_previous_frame {
            images += 1;
        }
        if !self.use_expression_encoder {
            images += 1;
        }
        CHANNELS * images
    }

    pub fn level_width(&self, level: usize) -> usize {
        self.hidden_channels * self.channel_multipliers[level - 1]
    }

    pub fn level_resolution(&self, level: usize) -> usize {
        self.high_res >> (level - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return Err(Error::config("channel_multipliers", "need at least one positive entry"));
        }
        if self.hidden_channels == 0 {
            return Err(Error::config("hidden_channels", "must be positive"));
        }
        if self.timestep_embedding_dim < 2 {
            return Err(Error::config("timestep_embedding_dim", "must be at least 2"));
        }
        if self.norm_groups == 0 {
            return Err(Error::config("norm_groups", "must be positive"));
        }
        let stride = 1usize << (self.levels() - 1);
        if self.high_res == 0 || self.high_res % stride != 0 {
            return Err(Error::config(
                "high_res",
                format!("{} is not divisible by 2^{}", self.high_res, self.levels() - 1),
            ));
        }
        if let Some(&bad) = self
            .attention_levels
            .iter()
            .find(|&&l| l == 0 || l > self.levels())
        {
            return Err(Error::config(
                "attention_levels",
                format!("level {bad} outside 1..={}", self.levels()),
            ));
        }
        if self.use_expression_encoder {
            if !self.attention_levels.contains(&self.expression_injection_level) {
                return Err(Error::config(
                    "expression_injection_level",
                    format!("{} is not an attention level", self.expression_injection_level),
                ));
            }
            let grid = self.level_resolution(self.expression_injection_level);
            if self.low_res < grid {
                return Err(Error::config(
                    "low_res",
                    format!("{} is smaller than the injection grid {grid}", self.low_res),
                ));
            }
        }
        if self.low_res == 0 {
            return Err(Error::config("low_res", "must be positive"));
        }
        if !(self.previous_noise_scale >= 0.0) {
            return Err(Error::config("previous_noise_scale", "must be non-negative"));
        }
        Ok(())
    }

    /// The previous-frame conditioning image: `previous + scale·z` when
    /// noising is on, `previous` verbatim otherwise.
    pub fn condition_previous(&self, previous: &ImageTensor, z: &ImageTensor) -> Result<ImageTensor> {
        if self.noise_previous_frame {
            previous.affine(1.0, z, self.previous_noise_scale)
        } else {
            previous.check_same_shape(z, "previous frame vs z")?;
            Ok(previous.clone())
        }
    }
}

/// Guidance for one reverse step of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle {
    pub noisy_frame: ImageTensor,
    pub identity_image: ImageTensor,
    pub low_res_frame: ImageTensor,
    /// `None` for models trained without the previous frame.
    pub previous_frame_noised: Option<ImageTensor>,
    pub timestep: usize,
}

/// A batch of bundles as tensors, `(B, 3, H, W)` each.
#[derive(Clone, Debug)]
pub struct BatchInputs {
    pub noisy: Tensor,
    pub identity: Tensor,
    pub low_res: Tensor,
    pub previous: Option<Tensor>,
    pub timesteps: Vec<usize>,
}

impl BatchInputs {
    pub fn from_bundles(bundles: &[&ConditioningBundle], dtype: DType, device: &Device) -> Result<Self> {
        let collect = |f: fn(&ConditioningBundle) -> &ImageTensor| {
            ImageTensor::stack(&bundles.iter().map(|b| f(b)).collect::<Vec<_>>(), dtype, device)
        };
        let previous = if bundles.iter().all(|b| b.previous_frame_noised.is_some()) {
            let imgs: Vec<&ImageTensor> = bundles
                .iter()
                .filter_map(|b| b.previous_frame_noised.as_ref())
                .collect();
            Some(ImageTensor::stack(&imgs, dtype, device)?)
        } else if bundles.iter().all(|b| b.previous_frame_noised.is_none()) {
            None
        } else {
            return Err(Error::Shape("bundles disagree on the previous frame".into()));
        };
        Ok(Self {
            noisy: collect(|b| &b.noisy_frame)?,
            identity: collect(|b| &b.identity_image)?,
            low_res: collect(|b| &b.low_res_frame)?,
            previous,
            timesteps: bundles.iter().map(|b| b.timestep).collect(),
        })
    }
}

/// Expression features on the injection level's grid, `(B, C, h, w)`.
#[derive(Clone, Debug)]
pub struct ExpressionEmbedding(pub Tensor);

impl ExpressionEmbedding {
    /// `(channels, height, width)` of a single embedding.
    pub fn shape(&self) -> Result<(usize, usize, usize)> {
        let (_, c, h, w) = self.0.dims4()?;
        Ok((c, h, w))
    }
}

/// Strided convolutional encoder for the low-resolution expression frame.
#[derive(Clone, Debug)]
struct ExpressionEncoder {
    stem: Conv2d,
    downs: Vec<(GroupNorm, Conv2d)>,
    head_norm: GroupNorm,
    head: Conv2d,
}

impl ExpressionEncoder {
    fn new(pb: &mut ParamBuilder, config: &DenoiserConfig) -> Result<Self> {
        let width = config.hidden_channels;
        let groups = groups_for(width, config.norm_groups);
        let target = config.level_resolution(config.expression_injection_level);
        let out_ch = config.level_width(config.expression_injection_level);

        let stem = pb.scoped("stem", |pb| Conv2d::new(pb, CHANNELS, width, 3, 1, 1))?;
        let mut downs = Vec::new();
        let mut size = config.low_res;
        while size / 2 >= target {
            let i = downs.len();
            let norm = pb.scoped(&format!("down{i}.norm"), |pb| group_norm(pb, width, groups))?;
            let conv = pb.scoped(&format!("down{i}.conv"), |pb| Conv2d::new(pb, width, width, 3, 2, 1))?;
            downs.push((norm, conv));
            size = size.div_ceil(2);
        }
        let head_norm = pb.scoped("head_norm", |pb| group_norm(pb, width, groups))?;
        // A valid convolution trims whatever halving could not reach exactly.
        let head = if size == target {
            pb.scoped("head", |pb| Conv2d::new(pb, width, out_ch, 3, 1, 1))?
        } else {
            pb.scoped("head", |pb| Conv2d::new(pb, width, out_ch, size - target + 1, 1, 0))?
        };
        Ok(Self {
            stem,
            downs,
            head_norm,
            head,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.stem.forward(x)?;
        for (norm, conv) in &self.downs {
            h = conv.forward(&norm.forward(&h)?.silu()?)?;
        }
        Ok(self.head.forward(&self.head_norm.forward(&h)?.silu()?)?)
    }
}

#[derive(Clone, Debug)]
struct Level {
    res: Vec<ResBlock>,
    attn: Vec<Option<AttentionBlock>>,
    down: Option<Downsample>,
    up: Option<Upsample>,
    injects: bool,
}

/// The full conditional denoiser θ (UNet and expression encoder).
#[derive(Clone, Debug)]
pub struct Denoiser {
    config: DenoiserConfig,
    max_timestep: usize,
    dtype: DType,
    device: Device,
    conv_in: Conv2d,
    time_in: Linear,
    time_out: Linear,
    down: Vec<Level>,
    mid: (ResBlock, ResBlock),
    up: Vec<Level>,
    out_norm: GroupNorm,
    conv_out: Conv2d,
    encoder: Option<ExpressionEncoder>,
}

impl Denoiser {
    /// Builds the network, creating or resolving parameters through `pb`.
    ///
    /// `max_timestep` is the schedule length the network is conditioned on.
    pub fn build(config: &DenoiserConfig, max_timestep: usize, pb: &mut ParamBuilder) -> Result<Self> {
        config.validate()?;
        if max_timestep == 0 {
            return Err(Error::config("total_steps", "must be at least 1"));
        }
        let hidden = config.hidden_channels;
        let tdim = config.timestep_embedding_dim;
        let groups = config.norm_groups;
        let levels = config.levels();

        let conv_in = pb.scoped("conv_in", |pb| Conv2d::new(pb, config.in_channels(), hidden, 3, 1, 1))?;
        let time_in = pb.scoped("time.in", |pb| Linear::new(pb, hidden, tdim))?;
        let time_out = pb.scoped("time.out", |pb| Linear::new(pb, tdim, tdim))?;

        let injects_at = |level: usize| config.use_expression_encoder && level == config.expression_injection_level;
        let attention = |pb: &mut ParamBuilder, name: &str, level: usize, ch: usize| -> Result<Option<AttentionBlock>> {
            if config.attention_levels.contains(&level) {
                Ok(Some(pb.scoped(name, |pb| AttentionBlock::new(pb, ch, groups, injects_at(level)))?))
            } else {
                Ok(None)
            }
        };

        let mut ch = hidden;
        let mut skips = vec![ch];
        let mut down = Vec::with_capacity(levels);
        for l in 1..=levels {
            let out = config.level_width(l);
            let mut level = Level {
                res: Vec::new(),
                attn: Vec::new(),
                down: None,
                up: None,
                injects: injects_at(l),
            };
            for r in 0..config.res_blocks_per_level {
                let res = pb.scoped(&format!("down{l}.res{r}"), |pb| ResBlock::new(pb, ch, out, tdim, groups))?;
                level.res.push(res);
                ch = out;
                level.attn.push(attention(pb, &format!("down{l}.attn{r}"), l, ch)?);
                skips.push(ch);
            }
            if l < levels {
                level.down = Some(pb.scoped(&format!("down{l}.downsample"), |pb| Downsample::new(pb, ch))?);
                skips.push(ch);
            }
            down.push(level);
        }

        let mid = (
            pb.scoped("mid.res0", |pb| ResBlock::new(pb, ch, ch, tdim, groups))?,
            pb.scoped("mid.res1", |pb| ResBlock::new(pb, ch, ch, tdim, groups))?,
        );

        let mut up = Vec::with_capacity(levels);
        for l in (1..=levels).rev() {
            let out = config.level_width(l);
            let mut level = Level {
                res: Vec::new(),
                attn: Vec::new(),
                down: None,
                up: None,
                injects: injects_at(l),
            };
            for r in 0..=config.res_blocks_per_level {
                let skip = skips.pop().expect("skip bookkeeping");
                let res = pb.scoped(&format!("up{l}.res{r}"), |pb| ResBlock::new(pb, ch + skip, out, tdim, groups))?;
                level.res.push(res);
                ch = out;
                level.attn.push(attention(pb, &format!("up{l}.attn{r}"), l, ch)?);
            }
            if l > 1 {
                level.up = Some(pb.scoped(&format!("up{l}.upsample"), |pb| Upsample::new(pb, ch))?);
            }
            up.push(level);
        }
        debug_assert!(skips.is_empty());

        let out_norm = pb.scoped("out_norm", |pb| group_norm(pb, ch, groups_for(ch, groups)))?;
        let conv_out = pb.scoped("conv_out", |pb| Conv2d::new(pb, ch, CHANNELS, 3, 1, 1))?;

        let encoder = if config.use_expression_encoder {
            Some(pb.scoped("expression_encoder", |pb| ExpressionEncoder::new(pb, config))?)
        } else {
            None
        };

        Ok(Self {
            config: config.clone(),
            max_timestep,
            dtype: pb.dtype(),
            device: pb.device(),
            conv_in,
            time_in,
            time_out,
            down,
            mid,
            up,
            out_norm,
            conv_out,
            encoder,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn max_timestep(&self) -> usize {
        self.max_timestep
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn check_image(&self, t: &Tensor, res: usize, what: &str) -> Result<usize> {
        let (b, c, h, w) = t.dims4()?;
        if c != CHANNELS || h != res || w != res {
            return Err(Error::Shape(format!(
                "{what} is {c}x{h}x{w}, model expects {CHANNELS}x{res}x{res}"
            )));
        }
        Ok(b)
    }

    /// Expression features for a `(B, 3, low_res, low_res)` batch.
    pub fn encode_expression_batch(&self, low_res: &Tensor) -> Result<ExpressionEmbedding> {
        self.check_image(low_res, self.config.low_res, "low-resolution frame")?;
        let encoder = self
            .encoder
            .as_ref()
            .ok_or_else(|| Error::Input("model was built without the expression encoder".into()))?;
        Ok(ExpressionEmbedding(encoder.forward(low_res)?))
    }

    /// Expression embedding of a single low-resolution frame.
    pub fn encode_expression(&self, low_res_frame: &ImageTensor) -> Result<ExpressionEmbedding> {
        self.encode_expression_batch(&low_res_frame.to_tensor(self.dtype, &self.device)?)
    }

    fn validate_batch(&self, inputs: &BatchInputs) -> Result<()> {
        let res = self.config.high_res;
        let b = self.check_image(&inputs.noisy, res, "noisy frame")?;
        if self.check_image(&inputs.identity, res, "identity image")? != b
            || self.check_image(&inputs.low_res, self.config.low_res, "low-resolution frame")? != b
        {
            return Err(Error::Shape("batch sizes differ across inputs".into()));
        }
        match (&inputs.previous, self.config.use_previous_frame) {
            (Some(p), true) => {
                if self.check_image(p, res, "previous frame")? != b {
                    return Err(Error::Shape("batch sizes differ across inputs".into()));
                }
            }
            (None, false) => {}
            (Some(_), false) => {
                return Err(Error::Shape("model was built without the previous frame input".into()))
            }
            (None, true) => return Err(Error::Shape("model needs a previous frame".into())),
        }
        if inputs.timesteps.len() != b {
            return Err(Error::Shape(format!(
                "{} timesteps for a batch of {b}",
                inputs.timesteps.len()
            )));
        }
        if let Some(&t) = inputs
            .timesteps
            .iter()
            .find(|&&t| t == 0 || t > self.max_timestep)
        {
            return Err(Error::Index {
                t,
                max: self.max_timestep,
            });
        }
        Ok(())
    }

    /// Batched prediction of the less-noisy frame, `(B, 3, H, W)`.
    pub fn forward(&self, inputs: &BatchInputs) -> Result<Tensor> {
        self.validate_batch(inputs)?;
        let res = self.config.high_res;

        let mut stacked = vec![inputs.noisy.clone(), inputs.identity.clone()];
        if let Some(p) = &inputs.previous {
            stacked.push(p.clone());
        }
        if self.encoder.is_none() {
            stacked.push(inputs.low_res.upsample_nearest2d(res, res)?);
        }
        let x = Tensor::cat(&stacked, 1)?;

        let context = match &self.encoder {
            Some(enc) => Some(enc.forward(&inputs.low_res)?),
            None => None,
        };

        let temb = timestep_features(&inputs.timesteps, self.config.hidden_channels, &x)?;
        let temb = self.time_out.forward(&self.time_in.forward(&temb)?.silu()?)?;

        let mut h = self.conv_in.forward(&x)?;
        let mut skips = vec![h.clone()];
        for level in &self.down {
            for (res, attn) in level.res.iter().zip(&level.attn) {
                h = res.forward(&h, &temb)?;
                if let Some(attn) = attn {
                    h = attn.forward(&h, if level.injects { context.as_ref() } else { None })?;
                }
                skips.push(h.clone());
            }
            if let Some(down) = &level.down {
                h = down.forward(&h)?;
                skips.push(h.clone());
            }
        }

        h = self.mid.0.forward(&h, &temb)?;
        h = self.mid.1.forward(&h, &temb)?;

        for level in &self.up {
            for (res, attn) in level.res.iter().zip(&level.attn) {
                let skip = skips.pop().expect("skip bookkeeping");
                h = res.forward(&Tensor::cat(&[&h, &skip], 1)?, &temb)?;
                if let Some(attn) = attn {
                    h = attn.forward(&h, if level.injects { context.as_ref() } else { None })?;
                }
            }
            if let Some(up) = &level.up {
                h = up.forward(&h)?;
            }
        }

        Ok(self.conv_out.forward(&self.out_norm.forward(&h)?.silu()?)?)
    }
}

/// Predicts the frame one diffusion step less noisy than `bundle.noisy_frame`.
pub fn denoise_step(bundle: &ConditioningBundle, model: &Denoiser) -> Result<ImageTensor> {
    let inputs = BatchInputs::from_bundles(&[bundle], model.dtype(), model.device())?;
    ImageTensor::from_tensor(&model.forward(&inputs)?)
}

/// Builds a fresh network with parameters drawn from `seed`.
pub fn init_denoiser(
    config: &DenoiserConfig,
    max_timestep: usize,
    seed: u64,
    dtype: DType,
) -> Result<(Params, Denoiser)> {
    let mut params = Params::new(dtype, Device::Cpu);
    let model = Denoiser::build(config, max_timestep, &mut params.initializer(seed))?;
    Ok((params, model))
}
