use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// How a freshly created parameter is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// U(-b, b) with b = 1/√fan_in.
    FanIn(usize),
    Const(f64),
}

/// Named trainable parameters, ordered by name.
#[derive(Clone)]
pub struct Params {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for Params {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Params")
            .field("count", &self.vars.len())
            .field("elements", &self.element_count())
            .field("dtype", &self.dtype)
            .finish()
    }
}

impl Params {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn insert(&mut self, name: String, tensor: Tensor) -> Result<()> {
        let var = Var::from_tensor(&tensor.to_dtype(self.dtype)?.to_device(&self.device)?.copy()?)?;
        self.vars.insert(name, var);
        Ok(())
    }

    /// Deep copy with independent storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = Self::new(self.dtype, self.device.clone());
        for (name, var) in &self.vars {
            out.vars
                .insert(name.clone(), Var::from_tensor(&var.as_tensor().copy()?)?);
        }
        Ok(out)
    }

    /// Copies of all parameters, converted to `dtype`.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut out = Self::new(dtype, self.device.clone());
        for (name, var) in &self.vars {
            out.vars
                .insert(name.clone(), Var::from_tensor(&var.as_tensor().to_dtype(dtype)?.copy()?)?);
        }
        Ok(out)
    }

    /// Overwrites every parameter in place with the same-named one from `other`.
    pub fn assign_from(&self, other: &Params) -> Result<()> {
        self.check_same_layout(other)?;
        for (name, var) in &self.vars {
            var.set(other.vars[name].as_tensor())?;
        }
        Ok(())
    }

    pub fn check_same_layout(&self, other: &Params) -> Result<()> {
        if self.vars.len() != other.vars.len() {
            return Err(Error::Shape(format!(
                "parameter sets differ in size: {} vs {}",
                self.vars.len(),
                other.vars.len()
            )));
        }
        for (name, var) in &self.vars {
            let theirs = other
                .vars
                .get(name)
                .ok_or_else(|| Error::Shape(format!("missing parameter `{name}`")))?;
            if var.dims() != theirs.dims() {
                return Err(Error::Shape(format!(
                    "parameter `{name}`: {:?} vs {:?}",
                    var.dims(),
                    theirs.dims()
                )));
            }
        }
        Ok(())
    }

    /// Starts a builder that creates missing parameters from `seed`.
    pub fn initializer(&mut self, seed: u64) -> ParamBuilder<'_> {
        ParamBuilder {
            store: self,
            prefix: String::new(),
            marks: Vec::new(),
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            frozen: false,
        }
    }

    /// Starts a builder that only resolves existing parameters.
    pub fn loader(&mut self) -> ParamBuilder<'_> {
        ParamBuilder {
            store: self,
            prefix: String::new(),
            marks: Vec::new(),
            rng: None,
            frozen: false,
        }
    }

    /// Like [`Params::loader`], but the model sees detached tensors and
    /// records no autodiff graph. Storage is still shared.
    pub fn frozen_loader(&mut self) -> ParamBuilder<'_> {
        ParamBuilder {
            store: self,
            prefix: String::new(),
            marks: Vec::new(),
            rng: None,
            frozen: true,
        }
    }
}

/// Resolves parameters by dotted path while layers are constructed.
pub struct ParamBuilder<'a> {
    store: &'a mut Params,
    prefix: String,
    marks: Vec<usize>,
    rng: Option<ChaCha8Rng>,
    frozen: bool,
}

impl ParamBuilder<'_> {
    pub fn push(&mut self, name: &str) {
        self.marks.push(self.prefix.len());
        if !self.prefix.is_empty() {
            self.prefix.push('.');
        }
        self.prefix.push_str(name);
    }

    pub fn pop(&mut self) {
        let len = self.marks.pop().unwrap_or(0);
        self.prefix.truncate(len);
    }

    /// Runs `f` with `name` appended to the path.
    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        self.push(name);
        let out = f(self);
        self.pop();
        out
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let path = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        if let Some(var) = self.store.vars.get(&path) {
            if var.dims() != shape {
                return Err(Error::Shape(format!(
                    "parameter `{path}` is {:?}, model expects {shape:?}",
                    var.dims()
                )));
            }
            return Ok(if self.frozen {
                var.as_tensor().detach()
            } else {
                var.as_tensor().clone()
            });
        }
        let rng = self
            .rng
            .as_mut()
            .ok_or_else(|| Error::Shape(format!("missing parameter `{path}`")))?;
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
            Init::Const(v) => vec![v; n],
        };
        let tensor = Tensor::from_vec(data, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&tensor)?;
        let out = var.as_tensor().clone();
        self.store.vars.insert(path, var);
        Ok(out)
    }
}
