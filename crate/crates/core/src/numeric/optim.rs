use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

fn check_grads<T: Real>(params: &ParamStore<T>) -> Result<()> {
    for p in params.iter() {
        if !p.grad.is_finite() {
            let bad = p.grad.data().iter().filter(|v| !v.is_finite()).count();
            return Err(Error::NonFinite(format!(
                "gradient of `{}` ({bad} of {} entries)",
                p.name,
                p.grad.len()
            )));
        }
    }
    Ok(())
}

/// `value ← value − lr·grad`, then zeroes the gradients.
///
/// A non-finite gradient aborts the step before any value is touched.
pub fn sgd_step<T: Real>(params: &mut ParamStore<T>, lr: f64) -> Result<()> {
    check_grads(params)?;
    let lr = T::of(lr);
    for p in params.iter_mut() {
        for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
            *v -= lr * *g;
        }
        p.grad.fill(T::zero());
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// First and second moments per parameter name, plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T = f32> {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    cfg: &AdamConfig,
    state: &mut AdamState<T>,
) -> Result<()> {
    check_grads(params)?;
    for p in params.iter() {
        for moments in [&state.m, &state.v] {
            if let Some(t) = moments.get(&p.name) {
                if t.shape() != p.value.shape() {
                    return Err(Error::shape("adam_step", p.value.shape(), t.shape()));
                }
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = cfg.beta1;
    let b2 = cfg.beta2;
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for p in params.iter_mut() {
        let m = state
            .m
            .entry(p.name.clone())
            .or_insert_with(|| Tensor::zeros(p.value.shape()));
        let v = state
            .v
            .entry(p.name.clone())
            .or_insert_with(|| Tensor::zeros(p.value.shape()));
        for (((val, &g), mi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(p.grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gf = g.as_f64();
            let mn = b1 * mi.as_f64() + (1.0 - b1) * gf;
            let vn = b2 * vi.as_f64() + (1.0 - b2) * gf * gf;
            *mi = T::of(mn);
            *vi = T::of(vn);
            let mhat = mn / bc1;
            let vhat = vn / bc2;
            *val -= T::of(cfg.lr * mhat / (vhat.sqrt() + cfg.eps));
        }
        p.grad.fill(T::zero());
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerSpec {
    Sgd { lr: f64 },
    Adam(AdamConfig),
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec::Adam(AdamConfig::default())
    }
}

/// An optimizer together with its mutable state.
#[derive(Clone, Debug)]
pub struct Optimizer<T = f32> {
    pub spec: OptimizerSpec,
    pub adam: AdamState<T>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(spec: OptimizerSpec) -> Self {
        Self {
            spec,
            adam: AdamState {
                step: 0,
                m: BTreeMap::new(),
                v: BTreeMap::new(),
            },
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        match &self.spec {
            OptimizerSpec::Sgd { lr } => sgd_step(params, *lr),
            OptimizerSpec::Adam(cfg) => adam_step(params, cfg, &mut self.adam),
        }
    }
}
