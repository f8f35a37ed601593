use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::{linear_backward, linear_forward, relu_backward, relu_forward};
use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

/// Widths and activations of a shared per-row MLP.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl MlpSpec {
    /// ReLU after every layer.
    pub fn relu(widths: &[usize]) -> Self {
        Self {
            layer_widths: widths.to_vec(),
            activations: vec![Activation::Relu; widths.len()],
        }
    }

    /// ReLU after every layer except the last, which is linear.
    pub fn linear_head(widths: &[usize]) -> Self {
        let mut activations = vec![Activation::Relu; widths.len()];
        if let Some(last) = activations.last_mut() {
            *last = Activation::None;
        }
        Self {
            layer_widths: widths.to_vec(),
            activations,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.is_empty() {
            return Err(Error::Config("MLP needs at least one layer".into()));
        }
        if self.layer_widths.len() != self.activations.len() {
            return Err(Error::Config(format!(
                "MLP has {} widths but {} activations",
                self.layer_widths.len(),
                self.activations.len()
            )));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::Config("MLP widths must be positive".into()));
        }
        Ok(())
    }

    pub fn out_dim(&self) -> usize {
        self.layer_widths.last().copied().unwrap_or(0)
    }
}

pub fn layer_names(prefix: &str, layer: usize) -> (String, String) {
    (format!("{prefix}.l{layer}.w"), format!("{prefix}.l{layer}.b"))
}

/// Registers the weights of an MLP under `prefix` with He-style initialization.
pub fn mlp_init<T: Real, R: Rng + ?Sized>(
    params: &mut ParamStore<T>,
    prefix: &str,
    spec: &MlpSpec,
    in_dim: usize,
    rng: &mut R,
) -> Result<()> {
    spec.validate()?;
    let mut din = in_dim;
    for (i, (&dout, act)) in spec.layer_widths.iter().zip(&spec.activations).enumerate() {
        let gain = match act {
            Activation::Relu => 2.0,
            Activation::None => 1.0,
        };
        let std = (gain / din.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let w: Vec<T> = (0..din * dout).map(|_| T::of(normal.sample(rng))).collect();
        let (wn, bn) = layer_names(prefix, i);
        params.insert(wn, Tensor::matrix(din, dout, w)?)?;
        params.insert(bn, Tensor::zeros(&[dout]))?;
        din = dout;
    }
    Ok(())
}

/// Activations saved by [`mlp_forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct MlpCache<T> {
    /// Input to each layer.
    inputs: Vec<Tensor<T>>,
    /// Pre-activation output of each layer.
    pre: Vec<Tensor<T>>,
}

pub fn mlp_forward<T: Real>(
    params: &ParamStore<T>,
    prefix: &str,
    spec: &MlpSpec,
    x: Tensor<T>,
) -> Result<(Tensor<T>, MlpCache<T>)> {
    let mut inputs = Vec::with_capacity(spec.layer_widths.len());
    let mut pre = Vec::with_capacity(spec.layer_widths.len());
    let mut h = x;
    for (i, act) in spec.activations.iter().enumerate() {
        let (wn, bn) = layer_names(prefix, i);
        let z = linear_forward(&h, params.value(&wn)?, params.value(&bn)?)?;
        let next = match act {
            Activation::Relu => relu_forward(&z),
            Activation::None => z.clone(),
        };
        inputs.push(h);
        pre.push(z);
        h = next;
    }
    Ok((h, MlpCache { inputs, pre }))
}

/// Accumulates weight gradients into `params` and returns the input gradient.
pub fn mlp_backward<T: Real>(
    params: &mut ParamStore<T>,
    prefix: &str,
    spec: &MlpSpec,
    cache: &MlpCache<T>,
    dy: Tensor<T>,
) -> Result<Tensor<T>> {
    let mut g = dy;
    for i in (0..spec.layer_widths.len()).rev() {
        if spec.activations[i] == Activation::Relu {
            g = relu_backward(&cache.pre[i], &g)?;
        }
        let (wn, bn) = layer_names(prefix, i);
        let grads = linear_backward(&cache.inputs[i], params.value(&wn)?, &g)?;
        params.accumulate_grad(&wn, &grads.dw)?;
        params.accumulate_grad(&bn, &grads.db)?;
        g = grads.dx;
    }
    Ok(g)
}
