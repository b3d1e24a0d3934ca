//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` manifest length, JSON
//! manifest, raw little-endian array payload, SHA-256 of everything before it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{Denoiser, DenoiserConfig, Params};
use crate::diffusion::{NoiseSchedule, ScheduleParams};
use crate::error::{Error, Result};
use crate::training::TrainConfig;

pub const MAGIC: &[u8; 8] = b"RDIFFCK\0";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Adam moment buffers and step count.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub step: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleParams,
    pub global_step: u64,
    pub live: Params,
    pub ema: Params,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    denoiser: DenoiserConfig,
    train: TrainConfig,
    schedule: ScheduleParams,
    /// SHA-256 over the rebuilt ᾱ table, guards against schedule drift.
    schedule_digest: String,
    config_digest: String,
    global_step: u64,
    dtype: String,
    optimizer_step: Option<u64>,
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

const GROUPS: [&str; 4] = ["live", "ema", "adam_m", "adam_v"];

fn schedule_digest(schedule: &NoiseSchedule) -> String {
    let mut h = Sha256::new();
    for v in schedule.alpha_bars() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn config_digest(denoiser: &DenoiserConfig, train: &TrainConfig) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(denoiser)?);
    h.update(serde_json::to_vec(train)?);
    Ok(hex::encode(h.finalize()))
}

fn dtype_name(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn element_size(dtype: DType) -> usize {
    if dtype == DType::F64 {
        8
    } else {
        4
    }
}

fn append_tensor(payload: &mut Vec<u8>, t: &Tensor) -> Result<()> {
    let flat = t.flatten_all()?;
    match t.dtype() {
        DType::F32 => flat
            .to_vec1::<f32>()?
            .iter()
            .for_each(|v| payload.extend_from_slice(&v.to_le_bytes())),
        DType::F64 => flat
            .to_vec1::<f64>()?
            .iter()
            .for_each(|v| payload.extend_from_slice(&v.to_le_bytes())),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
    Ok(())
}

fn read_tensor(bytes: &[u8], shape: &[usize], dtype: DType) -> Result<Tensor> {
    let t = match dtype {
        DType::F32 => {
            let v: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        _ => {
            let v: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
    };
    Ok(t)
}

impl ModelCheckpoint {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.schedule.build()
    }

    /// Rebuilds the network on the EMA weights, or the live ones.
    pub fn denoiser(&self, use_ema: bool) -> Result<Denoiser> {
        let mut params = if use_ema { self.ema.clone() } else { self.live.clone() };
        Denoiser::build(&self.denoiser, self.schedule.total_steps, &mut params.frozen_loader())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let dtype = self.live.dtype();
        let schedule = self.schedule.build()?;
        let mut payload = Vec::new();
        let mut arrays = Vec::new();
        let mut push = |group: &str, name: &str, t: &Tensor, payload: &mut Vec<u8>| -> Result<()> {
            if t.dtype() != dtype {
                return Err(Error::Checkpoint(format!(
                    "{group}/{name} is {:?}, checkpoint is {dtype:?}",
                    t.dtype()
                )));
            }
            arrays.push(ArrayEntry {
                group: group.into(),
                name: name.into(),
                shape: t.dims().to_vec(),
                offset: payload.len(),
            });
            append_tensor(payload, t)
        };
        for (name, var) in self.live.iter() {
            push("live", name, var.as_tensor(), &mut payload)?;
        }
        for (name, var) in self.ema.iter() {
            push("ema", name, var.as_tensor(), &mut payload)?;
        }
        if let Some(opt) = &self.optimizer {
            for (name, t) in &opt.first {
                push("adam_m", name, t, &mut payload)?;
            }
            for (name, t) in &opt.second {
                push("adam_v", name, t, &mut payload)?;
            }
        }
        let manifest = Manifest {
            format_version: self.format_version,
            denoiser: self.denoiser.clone(),
            train: self.train.clone(),
            schedule: self.schedule,
            schedule_digest: schedule_digest(&schedule),
            config_digest: config_digest(&self.denoiser, &self.train)?,
            global_step: self.global_step,
            dtype: dtype_name(dtype)?.into(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            arrays,
        };
        let manifest = serde_json::to_vec(&manifest)?;

        let mut out = Vec::with_capacity(20 + manifest.len() + payload.len() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = MAGIC.len() + 4 + 8;
        if bytes.len() < header + DIGEST_LEN {
            return Err(Error::Checkpoint(format!("file too short ({} bytes)", bytes.len())));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let (body, stored) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != stored {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let manifest_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let payload_start = header
            .checked_add(manifest_len)
            .filter(|&end| end <= body.len())
            .ok_or_else(|| Error::Checkpoint("manifest length exceeds file".into()))?;
        let manifest: Manifest = serde_json::from_slice(&body[header..payload_start])?;
        let payload = &body[payload_start..];

        let schedule = manifest.schedule.build()?;
        if schedule_digest(&schedule) != manifest.schedule_digest {
            return Err(Error::Checkpoint(
                "stored schedule does not rebuild to the recorded table".into(),
            ));
        }
        if config_digest(&manifest.denoiser, &manifest.train)? != manifest.config_digest {
            return Err(Error::Checkpoint("config digest mismatch".into()));
        }
        let dtype = match manifest.dtype.as_str() {
            "f32" => DType::F32,
            "f64" => DType::F64,
            other => return Err(Error::Checkpoint(format!("unknown dtype `{other}`"))),
        };

        let mut groups: BTreeMap<&str, BTreeMap<String, Tensor>> =
            GROUPS.iter().map(|g| (*g, BTreeMap::new())).collect();
        let mut expected_offset = 0;
        for entry in &manifest.arrays {
            let len = entry.shape.iter().product::<usize>() * element_size(dtype);
            if entry.offset != expected_offset || entry.offset + len > payload.len() {
                return Err(Error::Checkpoint(format!(
                    "array {}/{} has an inconsistent extent",
                    entry.group, entry.name
                )));
            }
            expected_offset += len;
            let group = groups
                .get_mut(entry.group.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("unknown group `{}`", entry.group)))?;
            let t = read_tensor(&payload[entry.offset..entry.offset + len], &entry.shape, dtype)?;
            group.insert(entry.name.clone(), t);
        }
        if expected_offset != payload.len() {
            return Err(Error::Checkpoint("trailing bytes after the last array".into()));
        }

        let to_params = |arrays: BTreeMap<String, Tensor>| -> Result<Params> {
            let mut p = Params::new(dtype, Device::Cpu);
            for (name, t) in arrays {
                p.insert(name, t)?;
            }
            Ok(p)
        };
        let mut groups = groups.into_iter().map(|(_, v)| v);
        // BTreeMap order: adam_m, adam_v, ema, live
        let (adam_m, adam_v, ema, live) = (
            groups.next().unwrap(),
            groups.next().unwrap(),
            groups.next().unwrap(),
            groups.next().unwrap(),
        );
        let live = to_params(live)?;
        let ema = to_params(ema)?;
        live.check_same_layout(&ema)
            .map_err(|e| Error::Checkpoint(format!("EMA weights do not match live weights: {e}")))?;
        let optimizer = match manifest.optimizer_step {
            Some(step) => Some(OptimizerState {
                step,
                first: adam_m,
                second: adam_v,
            }),
            None => None,
        };

        Ok(Self {
            format_version: version,
            denoiser: manifest.denoiser,
            train: manifest.train,
            schedule: manifest.schedule,
            global_step: manifest.global_step,
            live,
            ema,
            optimizer,
        })
    }

    /// Writes to a sibling temp file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
