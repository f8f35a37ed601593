use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Parameter namespaces: backbone `g`, flow head `s`, detection head `h`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Namespace {
    #[serde(rename = "g")]
    Backbone,
    #[serde(rename = "s")]
    Flow,
    #[serde(rename = "h")]
    Detect,
}

impl Namespace {
    pub const ALL: [Namespace; 3] = [Namespace::Backbone, Namespace::Flow, Namespace::Detect];

    pub fn prefix(self) -> &'static str {
        match self {
            Namespace::Backbone => "g",
            Namespace::Flow => "s",
            Namespace::Detect => "h",
        }
    }

    /// Namespace of a parameter name such as `g.sa.l0.w`.
    pub fn of(name: &str) -> Option<Namespace> {
        let head = name.split('.').next()?;
        head.parse().ok()
    }
}

impl fmt::Display for Namespace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

impl FromStr for Namespace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "g" => Ok(Namespace::Backbone),
            "s" => Ok(Namespace::Flow),
            "h" => Ok(Namespace::Detect),
            other => Err(Error::invalid(format!("unknown namespace `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T = f32> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, value, grad });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .map(|p| &p.grad)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &Tensor<T>) -> Result<()> {
        let p = self
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        p.grad.add_assign(g)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    pub fn scale_grads(&mut self, s: T) {
        for p in &mut self.params {
            p.grad.scale(s);
        }
    }

    /// Sets every value in `ns` to zero.
    pub fn zero_namespace(&mut self, ns: Namespace) {
        for p in &mut self.params {
            if Namespace::of(&p.name) == Some(ns) {
                p.value.fill(T::zero());
            }
        }
    }

    /// Copies values of every parameter in `ns` from `other`.
    pub fn copy_namespace_from(&mut self, other: &ParamStore<T>, ns: Namespace) -> Result<()> {
        for p in &mut self.params {
            if Namespace::of(&p.name) != Some(ns) {
                continue;
            }
            let src = other.value(&p.name)?;
            if src.shape() != p.value.shape() {
                return Err(Error::shape("copy_namespace_from", p.value.shape(), src.shape()));
            }
            p.value = src.clone();
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// SHA-256 over names, shapes and f32 little-endian values of one namespace.
    pub fn namespace_hash(&self, ns: Namespace) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            if Namespace::of(&p.name) != Some(ns) {
                continue;
            }
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                h.update((v.as_f64() as f32).to_le_bytes());
            }
        }
        hex_digest(h)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

pub(crate) fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
