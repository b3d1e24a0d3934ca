//! Training: paired noisy-frame regression with EMA shadow weights.

pub mod checkpoint;
mod optim;

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{init_denoiser, BatchInputs, Denoiser, DenoiserConfig, Params};
use crate::diffusion::{diffuse_pair, NoiseSchedule, ScheduleParams};
use crate::error::{Error, Result};
use crate::frame::ImageTensor;
pub use checkpoint::{ModelCheckpoint, OptimizerState, FORMAT_VERSION};
pub use optim::{ema_update, Adam, OptimizerConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub ema_decay: f64,
    pub schedule: ScheduleParams,
    pub seed: u64,
    /// Steps between periodic checkpoints; 0 disables them.
    pub checkpoint_interval: u64,
    /// Overrides the epoch budget when set.
    pub max_steps: Option<u64>,
    /// Global gradient-norm ceiling; off when `None`.
    pub grad_clip: Option<f64>,
    pub optimizer: OptimizerConfig,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            learning_rate: 2e-5,
            batch_size: 4,
            ema_decay: 0.9999,
            schedule: ScheduleParams::default(),
            seed: 0,
            checkpoint_interval: 10_000,
            max_steps: None,
            grad_clip: None,
            optimizer: OptimizerConfig::default(),
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        // Decay 1 freezes the shadow; allowed so the EMA can be pinned.
        if !(self.ema_decay > 0.0 && self.ema_decay <= 1.0) {
            return Err(Error::config("ema_decay", format!("{} not in (0, 1]", self.ema_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.max_steps.is_none() && self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config("grad_clip", "must be positive"));
            }
        }
        let OptimizerConfig::Adam { beta1, beta2, eps } = self.optimizer;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
            return Err(Error::config("optimizer", "betas must lie in [0, 1) and eps be positive"));
        }
        self.schedule.build().map(|_| ())
    }

    /// Total optimizer steps for a dataset of `n` samples.
    pub fn step_budget(&self, n: usize) -> u64 {
        self.max_steps
            .unwrap_or_else(|| (self.epochs * n.div_ceil(self.batch_size)) as u64)
    }
}

/// One supervised example: the target frame with its guidance.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub low_res: ImageTensor,
    pub identity: ImageTensor,
    pub target: ImageTensor,
    /// Ground-truth previous frame; the identity image for the first frame.
    pub previous: ImageTensor,
    pub subject_id: String,
    pub expression: String,
    /// 1-based position in the clip.
    pub frame_index: usize,
}

/// Random draws consumed by one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDraws {
    pub timesteps: Vec<usize>,
    pub noise: Vec<ImageTensor>,
    pub z: Vec<ImageTensor>,
}

impl StepDraws {
    /// Draws for step `step` (0-based). Each step has its own ChaCha stream,
    /// so any step can be replayed without the ones before it.
    pub fn sample(seed: u64, step: u64, batch: usize, total_steps: usize, height: usize, width: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(step);
        let timesteps = (0..batch).map(|_| rng.random_range(1..=total_steps)).collect();
        let noise = (0..batch).map(|_| ImageTensor::gaussian(height, width, &mut rng)).collect();
        let z = (0..batch).map(|_| ImageTensor::gaussian(height, width, &mut rng)).collect();
        Self { timesteps, noise, z }
    }
}

/// Dataset position of batch slot `j` at step `step`: sample `i = step·B + j`
/// falls in epoch `i / n`, whose order is a seeded permutation.
pub fn sample_index(seed: u64, step: u64, slot: usize, batch: usize, n: usize) -> usize {
    let i = step as usize * batch + slot;
    epoch_order(seed, (i / n) as u64, n)[i % n]
}

fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5348_5546_464c_4553);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// 1-based index of the step just taken.
    pub step: u64,
    pub loss: f64,
    pub timesteps: Vec<usize>,
}

/// Live weights, EMA shadow, optimizer and schedule for one run.
pub struct Trainer {
    model_config: DenoiserConfig,
    config: TrainConfig,
    schedule: NoiseSchedule,
    live: Params,
    ema: Params,
    model: Denoiser,
    adam: Adam,
    step: u64,
    last_draws: Option<StepDraws>,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("step", &self.step)
            .field("params", &self.live)
            .finish()
    }
}

impl Trainer {
    /// Fresh weights drawn from `config.seed`; EMA starts as a copy.
    pub fn new(model_config: &DenoiserConfig, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let schedule = config.schedule.build()?;
        let (live, _) = init_denoiser(model_config, schedule.total_steps(), config.seed, config.precision.dtype())?;
        let ema = live.deep_clone()?;
        Self::assemble(model_config.clone(), config.clone(), schedule, live, ema, None, 0)
    }

    /// Continues from a checkpoint. The stored train config is used unless
    /// `config` is given; the schedule and seed must agree with it.
    pub fn resume(checkpoint: &ModelCheckpoint, config: Option<&TrainConfig>) -> Result<Self> {
        let config = config.cloned().unwrap_or_else(|| checkpoint.train.clone());
        config.validate()?;
        if config.schedule != checkpoint.schedule {
            return Err(Error::config("schedule", "differs from the checkpoint's schedule"));
        }
        if config.precision.dtype() != checkpoint.live.dtype() {
            return Err(Error::config("precision", "differs from the checkpoint's weights"));
        }
        Self::assemble(
            checkpoint.denoiser.clone(),
            config,
            checkpoint.schedule()?,
            checkpoint.live.deep_clone()?,
            checkpoint.ema.deep_clone()?,
            checkpoint.optimizer.clone(),
            checkpoint.global_step,
        )
    }

    fn assemble(
        model_config: DenoiserConfig,
        config: TrainConfig,
        schedule: NoiseSchedule,
        mut live: Params,
        ema: Params,
        optimizer: Option<OptimizerState>,
        step: u64,
    ) -> Result<Self> {
        let model = Denoiser::build(&model_config, schedule.total_steps(), &mut live.loader())?;
        live.check_same_layout(&ema)?;
        let mut adam = Adam::new(config.optimizer, config.learning_rate, &live)?;
        if let Some(state) = optimizer {
            adam.restore(state.step, state.first, state.second)?;
        }
        Ok(Self {
            model_config,
            config,
            schedule,
            live,
            ema,
            model,
            adam,
            step,
            last_draws: None,
        })
    }

    pub fn global_step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model_config(&self) -> &DenoiserConfig {
        &self.model_config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn live(&self) -> &Params {
        &self.live
    }

    pub fn ema(&self) -> &Params {
        &self.ema
    }

    pub fn model(&self) -> &Denoiser {
        &self.model
    }

    /// Draws used by the most recent step.
    pub fn last_draws(&self) -> Option<&StepDraws> {
        self.last_draws.as_ref()
    }

    /// Scalar MSE between the network's prediction and x_{t−1} for a batch
    /// under fixed draws. Gradients flow to the live weights.
    pub fn loss(&self, batch: &[&TrainingSample], draws: &StepDraws) -> Result<Tensor> {
        let (inputs, target) = self.batch_tensors(batch, draws)?;
        let pred = self.model.forward(&inputs)?;
        Ok((pred - target)?.sqr()?.mean_all()?)
    }

    fn batch_tensors(&self, batch: &[&TrainingSample], draws: &StepDraws) -> Result<(BatchInputs, Tensor)> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        if draws.timesteps.len() != batch.len() {
            return Err(Error::Shape(format!(
                "{} draws for a batch of {}",
                draws.timesteps.len(),
                batch.len()
            )));
        }
        let dtype = self.live.dtype();
        let device = Device::Cpu;
        let mut noisy = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        let mut previous = Vec::with_capacity(batch.len());
        for (i, s) in batch.iter().enumerate() {
            let (xt, prev) = diffuse_pair(&s.target, draws.timesteps[i], &draws.noise[i], &self.schedule)?;
            noisy.push(xt);
            targets.push(prev);
            if self.model_config.use_previous_frame {
                previous.push(self.model_config.condition_previous(&s.previous, &draws.z[i])?);
            }
        }
        let stack = |imgs: Vec<&ImageTensor>| ImageTensor::stack(&imgs, dtype, &device);
        let inputs = BatchInputs {
            noisy: stack(noisy.iter().collect())?,
            identity: stack(batch.iter().map(|s| &s.identity).collect())?,
            low_res: stack(batch.iter().map(|s| &s.low_res).collect())?,
            previous: if self.model_config.use_previous_frame {
                Some(stack(previous.iter().collect())?)
            } else {
                None
            },
            timesteps: draws.timesteps.clone(),
        };
        Ok((inputs, stack(targets.iter().collect())?))
    }

    /// One optimizer step on `batch` with this step's seeded draws.
    pub fn train_step(&mut self, batch: &[&TrainingSample]) -> Result<StepReport> {
        let first = batch.first().ok_or_else(|| Error::Input("empty batch".into()))?;
        let (h, w, _) = first.target.shape();
        let draws = StepDraws::sample(
            self.config.seed,
            self.step,
            batch.len(),
            self.schedule.total_steps(),
            h,
            w,
        );
        self.train_step_with(batch, draws)
    }

    /// One optimizer step under caller-supplied draws.
    pub fn train_step_with(&mut self, batch: &[&TrainingSample], draws: StepDraws) -> Result<StepReport> {
        let loss = self.loss(batch, &draws)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let step = self.step + 1;
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "loss is {value} at step {step} (t = {:?})",
                draws.timesteps
            )));
        }
        let grads = loss.backward()?;
        let scale = match self.config.grad_clip {
            Some(limit) => {
                let norm = Adam::grad_norm(&self.live, &grads)?;
                if norm > limit {
                    limit / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.adam.apply(&self.live, &grads, scale)?;
        ema_update(&self.ema, &self.live, self.config.ema_decay)?;
        self.step = step;
        let timesteps = draws.timesteps.clone();
        self.last_draws = Some(draws);
        Ok(StepReport {
            step,
            loss: value,
            timesteps,
        })
    }

    pub fn checkpoint(&self) -> Result<ModelCheckpoint> {
        let copy = |m: &std::collections::BTreeMap<String, Tensor>| -> Result<_> {
            m.iter()
                .map(|(k, v)| Ok((k.clone(), v.copy()?)))
                .collect::<Result<std::collections::BTreeMap<_, _>>>()
        };
        let first = self.adam.state().map(|(n, m, _)| (n.clone(), m.clone())).collect();
        let second = self.adam.state().map(|(n, _, v)| (n.clone(), v.clone())).collect();
        Ok(ModelCheckpoint {
            format_version: FORMAT_VERSION,
            denoiser: self.model_config.clone(),
            train: self.config.clone(),
            schedule: self.config.schedule,
            global_step: self.step,
            live: self.live.deep_clone()?,
            ema: self.ema.deep_clone()?,
            optimizer: Some(OptimizerState {
                step: self.adam.step_count(),
                first: copy(&first)?,
                second: copy(&second)?,
            }),
        })
    }

    /// Trains until the step budget for `dataset` is spent.
    pub fn run(&mut self, dataset: &[TrainingSample], mut sink: Option<&mut RunOutput>) -> Result<Vec<StepReport>> {
        if dataset.is_empty() {
            return Err(Error::config("dataset", "no training samples"));
        }
        let budget = self.config.step_budget(dataset.len());
        let b = self.config.batch_size;
        let mut reports = Vec::new();
        while self.step < budget {
            let batch: Vec<&TrainingSample> = (0..b)
                .map(|j| &dataset[sample_index(self.config.seed, self.step, j, b, dataset.len())])
                .collect();
            let report = self.train_step(&batch)?;
            tracing::debug!(step = report.step, loss = report.loss, "train step");
            if let Some(out) = sink.as_deref_mut() {
                out.log_step(&report, self.config.learning_rate)?;
                let interval = self.config.checkpoint_interval;
                if interval > 0 && report.step % interval == 0 && report.step < budget {
                    self.checkpoint()?.save(&out.periodic_path(report.step))?;
                }
            }
            reports.push(report);
        }
        if let Some(out) = sink {
            self.checkpoint()?.save(&out.final_path())?;
        }
        Ok(reports)
    }
}

/// On-disk artifacts of a run: metrics log and checkpoints.
#[derive(Debug)]
pub struct RunOutput {
    dir: PathBuf,
    log: File,
}

impl RunOutput {
    pub const LOG_NAME: &'static str = "metrics.log";
    pub const FINAL_NAME: &'static str = "final.ckpt";

    /// Opens `dir` for a run starting after `resume_step` completed steps.
    /// Log lines past that step (from an interrupted run) are dropped.
    pub fn open(dir: &Path, resume_step: u64) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(Self::LOG_NAME);
        let mut kept = String::new();
        if resume_step > 0 && path.exists() {
            let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                let step: Option<u64> = line.split_whitespace().next().and_then(|s| s.parse().ok());
                if step.is_some_and(|s| s <= resume_step) {
                    kept.push_str(&line);
                    kept.push('\n');
                }
            }
        }
        fs::write(&path, kept).map_err(|e| Error::io(&path, e))?;
        let log = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            log,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn periodic_path(&self, step: u64) -> PathBuf {
        self.dir.join(format!("step-{step:08}.ckpt"))
    }

    pub fn final_path(&self) -> PathBuf {
        self.dir.join(Self::FINAL_NAME)
    }

    fn log_step(&mut self, report: &StepReport, lr: f64) -> Result<()> {
        let ts = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        writeln!(self.log, "{} {:.8e} {:e} {:.3}", report.step, report.loss, lr, ts)
            .map_err(|e| Error::io(self.dir.join(Self::LOG_NAME), e))
    }
}

/// Trains a fresh model on `dataset`, writing log and checkpoints to `out_dir`.
pub fn train(
    dataset: &[TrainingSample],
    model_config: &DenoiserConfig,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<ModelCheckpoint> {
    if dataset.is_empty() {
        return Err(Error::config("dataset", "no training samples"));
    }
    let mut trainer = Trainer::new(model_config, config)?;
    let mut out = RunOutput::open(out_dir, 0)?;
    trainer.run(dataset, Some(&mut out))?;
    trainer.checkpoint()
}

/// Continues training from `checkpoint` in `out_dir`.
pub fn resume_training(
    dataset: &[TrainingSample],
    checkpoint: &ModelCheckpoint,
    config: Option<&TrainConfig>,
    out_dir: &Path,
) -> Result<ModelCheckpoint> {
    let mut trainer = Trainer::resume(checkpoint, config)?;
    let mut out = RunOutput::open(out_dir, trainer.global_step())?;
    trainer.run(dataset, Some(&mut out))?;
    trainer.checkpoint()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn micro() -> DenoiserConfig {
        DenoiserConfig {
            high_res: 8,
            low_res: 4,
            hidden_channels: 8,
            channel_multipliers: vec![1, 2],
            attention_levels: vec![2],
            expression_injection_level: 2,
            timestep_embedding_dim: 16,
            norm_groups: 4,
            ..DenoiserConfig::toy()
        }
    }

    fn micro_train() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 2,
            ema_decay: 0.99,
            schedule: ScheduleParams {
                total_steps: 10,
                beta_start: 0.01,
                beta_end: 0.2,
                ..ScheduleParams::default()
            },
            seed: 11,
            checkpoint_interval: 0,
            ..TrainConfig::default()
        }
    }

    fn sample(seed: u64, n: usize) -> TrainingSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let identity = ImageTensor::gaussian(8, 8, &mut rng).scale(0.4).clamp_unit();
        TrainingSample {
            low_res: ImageTensor::gaussian(4, 4, &mut rng).scale(0.4).clamp_unit(),
            target: ImageTensor::gaussian(8, 8, &mut rng).scale(0.4).clamp_unit(),
            previous: identity.clone(),
            identity,
            subject_id: format!("s{seed}"),
            expression: "happiness".into(),
            frame_index: n,
        }
    }

    #[test]
    fn defaults_match_reference_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!(c.epochs, 400);
        assert_eq!(c.learning_rate, 2e-5);
        assert_eq!(c.batch_size, 4);
        assert_eq!(c.ema_decay, 0.9999);
        assert_eq!(c.schedule.total_steps, 1000);
        c.validate().unwrap();
    }

    #[test]
    fn invalid_train_configs_name_the_field() {
        let field = |c: TrainConfig| match c.validate() {
            Err(Error::Config { field, .. }) => field,
            other => panic!("unexpected {other:?}"),
        };
        assert_eq!(field(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }), "learning_rate");
        assert_eq!(field(TrainConfig { ema_decay: 0.0, ..TrainConfig::default() }), "ema_decay");
        assert_eq!(field(TrainConfig { ema_decay: 1.5, ..TrainConfig::default() }), "ema_decay");
        assert_eq!(field(TrainConfig { batch_size: 0, ..TrainConfig::default() }), "batch_size");
    }

    #[test]
    fn timesteps_are_uniform_over_deciles() {
        let t_max = 1000;
        let mut bins = [0usize; 10];
        let mut total = 0;
        for step in 0..1000 {
            let d = StepDraws::sample(5, step, 100, t_max, 1, 1);
            for t in d.timesteps {
                assert!((1..=t_max).contains(&t));
                bins[(t - 1) * 10 / t_max] += 1;
                total += 1;
            }
        }
        assert_eq!(total, 100_000);
        for b in bins {
            let frac = b as f64 / total as f64;
            assert!((frac - 0.1).abs() < 0.01, "decile fraction {frac}");
        }
    }

    #[test]
    fn z_is_fresh_every_step() {
        let s = sample(1, 1);
        let mut tr = Trainer::new(&micro(), &micro_train()).unwrap();
        tr.train_step(&[&s]).unwrap();
        let z1 = tr.last_draws().unwrap().z[0].clone();
        tr.train_step(&[&s]).unwrap();
        let z2 = tr.last_draws().unwrap().z[0].clone();
        assert!(z1.max_abs_diff(&z2).unwrap() > 0.0);
        // The audit trail replays exactly from (seed, step).
        assert_eq!(StepDraws::sample(11, 1, 1, 10, 8, 8).z[0], z2);
    }

    #[test]
    fn fresh_loss_is_finite_and_positive() {
        let s = sample(2, 1);
        let tr = Trainer::new(&micro(), &micro_train()).unwrap();
        let draws = StepDraws::sample(0, 0, 1, 10, 8, 8);
        let loss: f64 = tr.loss(&[&s], &draws).unwrap().to_dtype(DType::F64).unwrap().to_scalar().unwrap();
        assert!(loss.is_finite() && loss > 0.0);
    }

    #[test]
    fn ema_with_unit_decay_stays_at_initialization() {
        let cfg = TrainConfig { ema_decay: 1.0, ..micro_train() };
        let mut tr = Trainer::new(&micro(), &cfg).unwrap();
        let init = tr.ema().deep_clone().unwrap();
        let s = [sample(3, 1), sample(4, 2)];
        for _ in 0..3 {
            tr.train_step(&[&s[0], &s[1]]).unwrap();
        }
        for (name, var) in init.iter() {
            let a: Vec<f32> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            let b: Vec<f32> = tr.ema().get(name).unwrap().as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(a, b, "{name}");
        }
        let moved = tr
            .live()
            .iter()
            .any(|(n, v)| {
                let d: f32 = (v.as_tensor() - init.get(n).unwrap().as_tensor())
                    .unwrap()
                    .abs()
                    .unwrap()
                    .max_all()
                    .unwrap()
                    .to_scalar()
                    .unwrap();
                d > 0.0
            });
        assert!(moved);
    }

    #[test]
    fn encoder_weights_receive_gradient() {
        let s = sample(5, 1);
        let tr = Trainer::new(&micro(), &micro_train()).unwrap();
        let draws = StepDraws::sample(0, 0, 1, 10, 8, 8);
        let grads = tr.loss(&[&s], &draws).unwrap().backward().unwrap();
        let mut total = 0.0f32;
        let mut seen = 0;
        for (name, var) in tr.live().iter().filter(|(n, _)| n.starts_with("expression_encoder.")) {
            let g = grads.get(var).unwrap_or_else(|| panic!("no gradient for {name}"));
            total += g.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
            seen += 1;
        }
        assert!(seen > 0);
        assert!(total > 0.0);
    }

    #[test]
    fn previous_frame_ablation_trains_with_six_input_channels() {
        let model = DenoiserConfig { use_previous_frame: false, ..micro() };
        let mut tr = Trainer::new(&model, &micro_train()).unwrap();
        assert_eq!(tr.live().get("conv_in.weight").unwrap().dims()[1], 6);
        let s = sample(6, 1);
        assert!(tr.train_step(&[&s]).unwrap().loss.is_finite());
    }

    #[test]
    fn non_finite_loss_names_step_and_timesteps() {
        let mut s = sample(7, 1);
        s.target = s.target.map(|_| f64::NAN);
        let mut tr = Trainer::new(&micro(), &micro_train()).unwrap();
        let draws = StepDraws::sample(0, 0, 1, 10, 8, 8);
        let t = draws.timesteps[0];
        match tr.train_step_with(&[&s], draws) {
            Err(Error::Numerical(msg)) => {
                assert!(msg.contains("step 1"), "{msg}");
                assert!(msg.contains(&format!("[{t}]")), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn epoch_order_is_a_permutation() {
        let n = 7;
        let mut seen: Vec<usize> = (0..n).map(|i| sample_index(3, 0, i, 1, n)).collect();
        seen.sort();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
        let next: Vec<usize> = (0..n).map(|i| sample_index(3, (n + i) as u64, 0, 1, n)).collect();
        let this: Vec<usize> = (0..n).map(|i| sample_index(3, i as u64, 0, 1, n)).collect();
        assert_ne!(this, next);
    }

    #[test]
    fn empty_dataset_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            train(&[], &micro(), &micro_train(), dir.path()),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn unwritable_checkpoint_dir_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let cfg = TrainConfig { max_steps: Some(1), ..micro_train() };
        let err = train(&[sample(8, 1)], &micro(), &cfg, &blocker.join("run")).unwrap_err();
        match err {
            Error::Io { path, .. } => assert!(path.starts_with(&blocker)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_trajectory() {
        let data: Vec<TrainingSample> = (0..5).map(|i| sample(20 + i, i as usize + 1)).collect();
        let cfg = TrainConfig { max_steps: Some(20), ..micro_train() };

        let mut straight = Trainer::new(&micro(), &cfg).unwrap();
        let full = straight.run(&data, None).unwrap();

        let half = TrainConfig { max_steps: Some(10), ..cfg.clone() };
        let mut first = Trainer::new(&micro(), &half).unwrap();
        first.run(&data, None).unwrap();
        let bytes = first.checkpoint().unwrap().to_bytes().unwrap();
        let ck = ModelCheckpoint::from_bytes(&bytes).unwrap();
        let mut second = Trainer::resume(&ck, Some(&cfg)).unwrap();
        let tail = second.run(&data, None).unwrap();

        assert_eq!(tail.len(), 10);
        for (a, b) in full[10..].iter().zip(&tail) {
            assert_eq!(a.step, b.step);
            assert!((a.loss - b.loss).abs() <= 1e-6, "{} vs {}", a.loss, b.loss);
        }
    }

    #[test]
    fn log_and_checkpoints_follow_the_step_count() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<TrainingSample> = (0..3).map(|i| sample(30 + i, i as usize + 1)).collect();
        let cfg = TrainConfig {
            max_steps: Some(6),
            checkpoint_interval: 3,
            ..micro_train()
        };
        train(&data, &micro(), &cfg, dir.path()).unwrap();
        let log = fs::read_to_string(dir.path().join(RunOutput::LOG_NAME)).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines.len(), 6);
        for (i, line) in lines.iter().enumerate() {
            let fields: Vec<&str> = line.split(' ').collect();
            assert_eq!(fields.len(), 4);
            assert_eq!(fields[0].parse::<u64>().unwrap(), i as u64 + 1);
            assert!(fields[1].parse::<f64>().unwrap() > 0.0);
            assert_eq!(fields[2].parse::<f64>().unwrap(), 1e-3);
        }
        let mid = ModelCheckpoint::load(&dir.path().join("step-00000003.ckpt")).unwrap();
        assert_eq!(mid.global_step, 3);

        let more = TrainConfig { max_steps: Some(8), ..cfg };
        resume_training(&data, &mid, Some(&more), dir.path()).unwrap();
        let log = fs::read_to_string(dir.path().join(RunOutput::LOG_NAME)).unwrap();
        let steps: Vec<u64> = log.lines().map(|l| l.split(' ').next().unwrap().parse().unwrap()).collect();
        assert_eq!(steps, (1..=8).collect::<Vec<_>>());
        assert_eq!(ModelCheckpoint::load(&dir.path().join(RunOutput::FINAL_NAME)).unwrap().global_step, 8);
    }

    #[test]
    fn loss_trends_down_on_a_tiny_set() {
        let data: Vec<TrainingSample> = (0..2).map(|i| sample(40 + i, i as usize + 1)).collect();
        let cfg = TrainConfig { max_steps: Some(1000), ..micro_train() };
        let mut tr = Trainer::new(&micro(), &cfg).unwrap();
        let reports = tr.run(&data, None).unwrap();
        let median = |r: &[StepReport]| {
            let mut v: Vec<f64> = r.iter().map(|x| x.loss).collect();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[v.len() / 2]
        };
        assert!(median(&reports[900..]) < median(&reports[..100]));
    }
}
