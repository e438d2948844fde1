//! Named, seeded parameter storage.
//!
//! Initialisation draws from a caller-supplied ChaCha generator rather than
//! the device RNG, so a seed fully determines every weight.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::EncoderError;

#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: &Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: device.clone(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(
        &mut self,
        name: &str,
        values: Vec<f64>,
        shape: &[usize],
    ) -> Result<Tensor, EncoderError> {
        let tensor = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&tensor)?;
        let t = var.as_tensor().clone();
        if self.vars.insert(name.to_string(), var).is_some() {
            return Err(EncoderError::Checkpoint(format!(
                "parameter {name} defined twice"
            )));
        }
        Ok(t)
    }

    pub fn normal(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<Tensor, EncoderError> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("positive std");
        let values = (0..n).map(|_| dist.sample(rng)).collect();
        self.insert(name, values, shape)
    }

    pub fn uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        scale: f64,
        rng: &mut impl Rng,
    ) -> Result<Tensor, EncoderError> {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.gen_range(-scale..=scale)).collect();
        self.insert(name, values, shape)
    }

    pub fn constant(
        &mut self,
        name: &str,
        shape: &[usize],
        value: f64,
    ) -> Result<Tensor, EncoderError> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    pub fn from_values(
        &mut self,
        name: &str,
        shape: &[usize],
        values: Vec<f64>,
    ) -> Result<Tensor, EncoderError> {
        self.insert(name, values, shape)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn fingerprint(&self) -> Result<String, EncoderError> {
        let mut hasher = Sha256::new();
        for (name, var) in &self.vars {
            hasher.update(name.as_bytes());
            for d in var.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            let flat = var.as_tensor().flatten_all()?;
            match flat.dtype() {
                DType::F64 => flat
                    .to_vec1::<f64>()?
                    .iter()
                    .for_each(|v| hasher.update(v.to_bits().to_le_bytes())),
                _ => flat
                    .to_dtype(DType::F32)?
                    .to_vec1::<f32>()?
                    .iter()
                    .for_each(|v| hasher.update(v.to_bits().to_le_bytes())),
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }

    /// Deep copy of the current values.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>, EncoderError> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    pub fn restore(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<(), EncoderError> {
        for (name, var) in &self.vars {
            let value = snapshot
                .get(name)
                .ok_or_else(|| EncoderError::Checkpoint(format!("snapshot lacks {name}")))?;
            var.set(value)?;
        }
        Ok(())
    }

    /// Overwrites values from `tensors`; every parameter must be present with a
    /// matching shape. Names may carry an extra `prefix.` (as in full-model
    /// checkpoints) which is stripped before matching.
    pub fn assign(
        &self,
        tensors: &HashMap<String, Tensor>,
        prefix: Option<&str>,
    ) -> Result<(), EncoderError> {
        for (name, var) in &self.vars {
            let tensor = tensors
                .get(name)
                .or_else(|| prefix.and_then(|p| tensors.get(&format!("{p}.{name}"))))
                .ok_or_else(|| EncoderError::Checkpoint(format!("checkpoint lacks {name}")))?;
            if tensor.dims() != var.dims() {
                return Err(EncoderError::Checkpoint(format!(
                    "{name}: checkpoint shape {:?}, model shape {:?}",
                    tensor.dims(),
                    var.dims()
                )));
            }
            var.set(&tensor.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EncoderError> {
        let tensors: HashMap<String, Tensor> = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&tensors, path.as_ref())?;
        Ok(())
    }

    pub fn load_values(
        &self,
        path: impl AsRef<Path>,
        prefix: Option<&str>,
    ) -> Result<(), EncoderError> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(EncoderError::Checkpoint(format!(
                "missing weights file {}",
                path.display()
            )));
        }
        let tensors = candle_core::safetensors::load(path, &self.device)?;
        self.assign(&tensors, prefix)
    }
}
