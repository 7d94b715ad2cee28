use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::array::{Array, Scalar};
use super::vtf::{read_vtf, write_vtf, VtfTensor};
use crate::error::{Error, Result};
use crate::rng::Generator;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<S: Scalar> {
    pub name: String,
    pub value: Array<S>,
    pub grad: Array<S>,
}

/// Named trainable arrays with same-shape gradient accumulators.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S: Scalar = f32> {
    params: Vec<Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array<S>) -> ParamId {
        let grad = Array::zeros(value.shape().to_vec());
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        gen: &mut Generator,
    ) -> ParamId {
        let value = Array::from_fn(shape.to_vec(), |_| S::lit(gen.normal() * std));
        self.add(name, value)
    }

    pub fn add_full(&mut self, name: impl Into<String>, shape: &[usize], v: f64) -> ParamId {
        self.add(name, Array::full(shape.to_vec(), S::lit(v)))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Array<S> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array<S> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Array<S> {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Array<S> {
        &mut self.params[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(S::zero());
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Same parameters in another precision (gradients reset).
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.add(p.name.clone(), p.value.cast());
        }
        out
    }

    /// Writes one 32-bit VTF1 file per parameter, named `<name>.vtf`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for p in &self.params {
            write_vtf(&dir.join(format!("{}.vtf", p.name)), &VtfTensor::F32(p.value.cast()))?;
        }
        Ok(())
    }

    /// Overwrites every parameter from `<dir>/<name>.vtf`; shapes must match.
    pub fn load_dir(&mut self, dir: &Path) -> Result<()> {
        for p in &mut self.params {
            let path = dir.join(format!("{}.vtf", p.name));
            let arr = read_vtf(&path)?.into_f32(&path)?;
            if arr.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load parameter",
                    left: p.value.shape().to_vec(),
                    right: arr.shape().to_vec(),
                });
            }
            p.value = arr.cast();
        }
        Ok(())
    }
}

/// Plain-text `key=value` manifest written next to checkpoint tensors.
pub fn write_manifest(path: &Path, entries: &BTreeMap<String, String>) -> Result<()> {
    let mut text = String::new();
    for (k, v) in entries {
        text.push_str(&format!("{k}={v}\n"));
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            reason: format!("line {} is not key=value", n + 1),
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}
