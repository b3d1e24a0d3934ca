use std::fs;
use std::path::{Path, PathBuf};

use recdiff::data::{Split, SynthConfig};
use recdiff::denoiser::DenoiserConfig;
use recdiff::diffusion::ScheduleParams;
use recdiff::training::TrainConfig;
use recdiff::{Error, Result};
use serde::{Deserialize, Serialize};
use toml::Value;

/// Everything a command needs, resolved from defaults, the config file and
/// command-line overrides (in that order).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub infer: InferSection,
    pub metrics: MetricsSection,
    pub report: ReportSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// JSON-lines manifest for train, enhance and evaluate.
    pub manifest: Option<PathBuf>,
    /// Resample every clip to this many frames on load.
    pub standardize_frames: Option<usize>,
    pub n_subjects: usize,
    pub n_frames: usize,
    pub high_res: usize,
    pub low_res: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// The trained recurrent model.
    Model,
    /// Bilinear upsampling of the low-resolution input.
    Upsample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferSection {
    pub checkpoint: Option<PathBuf>,
    pub use_ema: bool,
    pub stride: usize,
    pub method: Method,
    /// Single-clip mode; otherwise every manifest clip of `split` is enhanced.
    pub low_res_dir: Option<PathBuf>,
    pub identity_image: Option<PathBuf>,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImageEmbedderKind {
    Pixel,
    RandomProjection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub label: Option<String>,
    pub image_embedder: ImageEmbedderKind,
    pub embedder_seed: u64,
    pub embedder_grid: usize,
    pub embedder_dim: usize,
    pub generated_dir: Option<PathBuf>,
    pub reference_dir: Option<PathBuf>,
    pub identity_image: Option<PathBuf>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    pub reports: Vec<PathBuf>,
    /// Clip directories shown as grid rows, top to bottom.
    pub grid_clips: Vec<PathBuf>,
    pub grid_cols: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output_dir: PathBuf::from("runs/toy"),
            data: DataSection::default(),
            model: DenoiserConfig::toy(),
            train: toy_train(),
            infer: InferSection::default(),
            metrics: MetricsSection::default(),
            report: ReportSection::default(),
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            manifest: None,
            standardize_frames: None,
            n_subjects: s.n_subjects,
            n_frames: s.n_frames,
            high_res: s.high_res,
            low_res: s.low_res,
        }
    }
}

impl Default for InferSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            use_ema: true,
            stride: 1,
            method: Method::Model,
            low_res_dir: None,
            identity_image: None,
            split: Split::Test,
        }
    }
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            label: None,
            image_embedder: ImageEmbedderKind::Pixel,
            embedder_seed: 0,
            embedder_grid: 16,
            embedder_dim: 8,
            generated_dir: None,
            reference_dir: None,
            identity_image: None,
            split: Split::Test,
        }
    }
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            reports: Vec::new(),
            grid_clips: Vec::new(),
            grid_cols: 8,
        }
    }
}

/// Short-chain training settings sized for the toy model on one CPU core.
pub fn toy_train() -> TrainConfig {
    TrainConfig {
        epochs: 100,
        learning_rate: 5e-4,
        batch_size: 4,
        ema_decay: 0.995,
        schedule: ScheduleParams {
            total_steps: 50,
            beta_start: 0.002,
            beta_end: 0.4,
            ..ScheduleParams::default()
        },
        checkpoint_interval: 500,
        grad_clip: Some(1.0),
        ..TrainConfig::default()
    }
}

impl RunConfig {
    /// Builds the config: defaults, then `file`, then `key=value` overrides,
    /// then typed flag values. The top-level seed replaces `train.seed`.
    #[cfg(test)]
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        Self::resolve_with(file, overrides, Vec::new())
    }

    pub fn resolve_with(file: Option<&Path>, overrides: &[String], flags: Vec<(String, Value)>) -> Result<Self> {
        let mut value = Value::try_from(RunConfig::default())
            .map_err(|e| Error::config("defaults", e.to_string()))?;
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let user: Value = toml::from_str(&text)
                .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
            merge(&mut value, user);
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        for (key, v) in flags {
            set_value(&mut value, &key, v)?;
        }
        // TOML has no null, so `grad_clip = false` switches the toy clip off.
        if let Some(train) = value.get_mut("train").and_then(Value::as_table_mut) {
            if train.get("grad_clip") == Some(&Value::Boolean(false)) {
                train.remove("grad_clip");
            }
        }
        let mut config: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
        config.train.seed = config.seed;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth().validate()?;
        if self.infer.stride == 0 {
            return Err(Error::config("infer.stride", "must be at least 1"));
        }
        if self.report.grid_cols == 0 {
            return Err(Error::config("report.grid_cols", "must be at least 1"));
        }
        Ok(())
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            n_subjects: self.data.n_subjects,
            n_frames: self.data.n_frames,
            high_res: self.data.high_res,
            low_res: self.data.low_res,
            seed: self.seed,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config("config", e.to_string()))
    }

    /// Writes the resolved config to `output_dir/config.toml`.
    pub fn echo(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.output_dir).map_err(|e| Error::io(&self.output_dir, e))?;
        let path = self.output_dir.join("config.toml");
        fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Applies `section.key=value`. The value is parsed as a TOML literal and
/// falls back to a plain string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "expected KEY=VALUE"))?;
    let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    set_value(root, key.trim(), parsed)
}

pub fn set_value(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "empty key segment"));
    }
    let mut node = root;
    for p in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{p}` is not a section")))?;
        node = table
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::config(key, "parent is not a section"))?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
