//! Reverse diffusion for one frame and recurrent enhancement of a clip.
//!
//! Each reverse step feeds the network output back in as the next state. A
//! video is enhanced frame by frame, with the previous output (plus fresh
//! noise) conditioning the next frame; the identity image stands in for the
//! frame before the first.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{denoise_step, ConditioningBundle, Denoiser};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::frame::{ImageTensor, VideoClip};
use crate::training::ModelCheckpoint;

/// Hooks into the reverse loop. All methods default to no-ops.
pub trait InferenceObserver {
    /// Called before every network evaluation. `frame` is 0-based.
    fn on_step(&mut self, _frame: usize, _t: usize, _bundle: &ConditioningBundle) {}
    /// Called with each z image drawn for the previous-frame condition.
    fn on_z_draw(&mut self, _frame: usize, _t: usize, _z: &ImageTensor) {}
    /// Called with the clamped output of each frame.
    fn on_frame(&mut self, _frame: usize, _output: &ImageTensor) {}
}

/// Observer that records nothing.
pub struct Silent;

impl InferenceObserver for Silent {}

/// Counts network evaluations and z draws.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DrawAudit {
    pub evaluations: usize,
    pub z_draws: usize,
    pub frames: usize,
}

impl InferenceObserver for DrawAudit {
    fn on_step(&mut self, _: usize, _: usize, _: &ConditioningBundle) {
        self.evaluations += 1;
    }
    fn on_z_draw(&mut self, _: usize, _: usize, _: &ImageTensor) {
        self.z_draws += 1;
    }
    fn on_frame(&mut self, _: usize, _: &ImageTensor) {
        self.frames += 1;
    }
}

/// A denoiser paired with the schedule it was trained on.
#[derive(Clone, Debug)]
pub struct Enhancer {
    model: Denoiser,
    schedule: NoiseSchedule,
    stride: usize,
}

impl Enhancer {
    pub fn new(model: Denoiser, schedule: NoiseSchedule) -> Result<Self> {
        if model.max_timestep() != schedule.total_steps() {
            return Err(Error::config(
                "total_steps",
                format!(
                    "model expects T = {}, schedule has {}",
                    model.max_timestep(),
                    schedule.total_steps()
                ),
            ));
        }
        Ok(Self {
            model,
            schedule,
            stride: 1,
        })
    }

    /// EMA weights when `use_ema`, live weights otherwise.
    pub fn from_checkpoint(checkpoint: &ModelCheckpoint, use_ema: bool) -> Result<Self> {
        Self::new(checkpoint.denoiser(use_ema)?, checkpoint.schedule()?)
    }

    /// Evaluates every `stride`-th timestep, jumping between them through the
    /// clean image implied by each prediction. 1 runs the full chain.
    pub fn with_stride(mut self, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::config("stride", "must be at least 1"));
        }
        self.stride = stride;
        Ok(self)
    }

    pub fn model(&self) -> &Denoiser {
        &self.model
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Network evaluations per frame.
    pub fn steps_per_frame(&self) -> usize {
        self.schedule.total_steps().div_ceil(self.stride)
    }

    fn check_inputs(&self, low: &ImageTensor, identity: &ImageTensor, previous: &ImageTensor) -> Result<()> {
        let c = self.model.config();
        let expect = |img: &ImageTensor, res: usize, what: &str| {
            if img.height() != res || img.width() != res {
                Err(Error::Shape(format!(
                    "{what} is {}x{}, checkpoint expects {res}x{res}",
                    img.height(),
                    img.width()
                )))
            } else {
                Ok(())
            }
        };
        expect(low, c.low_res, "low-resolution frame")?;
        expect(identity, c.high_res, "identity image")?;
        expect(previous, c.high_res, "previous frame")
    }

    /// Enhances one frame. Uses stream 0 of `seed`.
    pub fn infer_frame(
        &self,
        low_res: &ImageTensor,
        identity: &ImageTensor,
        previous: &ImageTensor,
        seed: u64,
    ) -> Result<ImageTensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.reverse(low_res, identity, previous, &mut rng, 0, &mut Silent)
    }

    fn reverse(
        &self,
        low_res: &ImageTensor,
        identity: &ImageTensor,
        previous: &ImageTensor,
        rng: &mut ChaCha8Rng,
        frame: usize,
        observer: &mut dyn InferenceObserver,
    ) -> Result<ImageTensor> {
        self.check_inputs(low_res, identity, previous)?;
        let config = self.model.config();
        let res = config.high_res;
        let mut x = ImageTensor::gaussian(res, res, rng);
        let mut t = self.schedule.total_steps();
        while t > 0 {
            let previous_frame_noised = if config.use_previous_frame {
                let z = ImageTensor::gaussian(res, res, rng);
                observer.on_z_draw(frame, t, &z);
                Some(config.condition_previous(previous, &z)?)
            } else {
                None
            };
            let bundle = ConditioningBundle {
                noisy_frame: x,
                identity_image: identity.clone(),
                low_res_frame: low_res.clone(),
                previous_frame_noised,
                timestep: t,
            };
            observer.on_step(frame, t, &bundle);
            let pred = denoise_step(&bundle, &self.model)?;
            let s = t.saturating_sub(self.stride);
            x = if s + 1 == t {
                pred
            } else {
                self.jump(&bundle.noisy_frame, &pred, t, s)?
            };
            if x.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite state after step t = {t}")));
            }
            t = s;
        }
        let out = x.clamp_unit();
        observer.on_frame(frame, &out);
        Ok(out)
    }

    /// From x_t and the predicted x_{t−1}, recovers the implied clean image
    /// and noise, then re-diffuses to step `s`.
    fn jump(&self, xt: &ImageTensor, pred: &ImageTensor, t: usize, s: usize) -> Result<ImageTensor> {
        let ab_t = self.schedule.alpha_bar(t);
        let ab_p = self.schedule.alpha_bar(t - 1);
        let r = ((1.0 - ab_p) / (1.0 - ab_t)).sqrt();
        let denom = ab_p.sqrt() - r * ab_t.sqrt();
        let x0 = pred.affine(1.0 / denom, xt, -r / denom)?;
        let eps = xt.affine(1.0 / (1.0 - ab_t).sqrt(), &x0, -ab_t.sqrt() / (1.0 - ab_t).sqrt())?;
        let ab_s = self.schedule.alpha_bar(s);
        x0.affine(ab_s.sqrt(), &eps, (1.0 - ab_s).sqrt())
    }

    /// Enhances a clip. Frame `n` (0-based) uses stream `n` of `seed`, so a
    /// one-frame clip matches [`Enhancer::infer_frame`].
    pub fn infer_video(&self, clip: &VideoClip, identity: &ImageTensor, seed: u64) -> Result<VideoClip> {
        self.infer_video_observed(clip.frames(), identity, seed, &mut Silent)
    }

    pub fn infer_video_observed(
        &self,
        frames: &[ImageTensor],
        identity: &ImageTensor,
        seed: u64,
        observer: &mut dyn InferenceObserver,
    ) -> Result<VideoClip> {
        if frames.is_empty() {
            return Err(Error::Input("low-resolution clip has no frames".into()));
        }
        let mut out: Vec<ImageTensor> = Vec::with_capacity(frames.len());
        for (n, low) in frames.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(n as u64);
            let previous = out.last().unwrap_or(identity);
            let frame = self
                .reverse(low, identity, previous, &mut rng, n, observer)
                .map_err(|e| Error::Frame {
                    index: n,
                    source: Box::new(e),
                })?;
            out.push(frame);
        }
        VideoClip::new(out)
    }
}

/// Single-frame enhancement from a checkpoint (EMA weights).
pub fn infer_frame(
    low_res: &ImageTensor,
    identity: &ImageTensor,
    previous: &ImageTensor,
    checkpoint: &ModelCheckpoint,
    seed: u64,
) -> Result<ImageTensor> {
    Enhancer::from_checkpoint(checkpoint, true)?.infer_frame(low_res, identity, previous, seed)
}

/// Recurrent clip enhancement from a checkpoint (EMA weights).
pub fn infer_video(
    clip: &VideoClip,
    identity: &ImageTensor,
    checkpoint: &ModelCheckpoint,
    seed: u64,
) -> Result<VideoClip> {
    Enhancer::from_checkpoint(checkpoint, true)?.infer_video(clip, identity, seed)
}
