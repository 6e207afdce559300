//! Bottleneck adapter: `up(GELU(down(h)))`, optionally plus `h`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::{Forward, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vit::linear;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterConfig {
    pub width: usize,
    pub ratio: f64,
    pub internal_skip: bool,
}

impl AdapterConfig {
    pub fn new(width: usize, ratio: f64, internal_skip: bool) -> Result<Self> {
        let cfg = AdapterConfig {
            width,
            ratio,
            internal_skip,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::Config(format!(
                "bottleneck ratio {} outside (0, 1]",
                self.ratio
            )));
        }
        if self.bottleneck() == 0 {
            return Err(Error::Config(format!(
                "bottleneck ratio {} leaves no hidden channels at width {}",
                self.ratio, self.width
            )));
        }
        Ok(())
    }

    /// Hidden width `floor(ratio * width)`.
    pub fn bottleneck(&self) -> usize {
        bottleneck(self.width, self.ratio)
    }

    /// Two fully connected layers with biases: `2*D*b + b + D`.
    pub fn param_count(&self) -> usize {
        let (d, b) = (self.width, self.bottleneck());
        2 * d * b + b + d
    }

    pub fn param_shapes(&self, prefix: &str) -> Vec<(String, Vec<usize>)> {
        let (d, b) = (self.width, self.bottleneck());
        vec![
            (format!("{prefix}.fc1.weight"), vec![d, b]),
            (format!("{prefix}.fc1.bias"), vec![b]),
            (format!("{prefix}.fc2.weight"), vec![b, d]),
            (format!("{prefix}.fc2.bias"), vec![d]),
        ]
    }
}

pub(crate) fn bottleneck(width: usize, ratio: f64) -> usize {
    // tolerate representation error in products like 0.1 * 30
    libm::floor(ratio * width as f64 + 1e-9) as usize
}

/// Down/up projections of one adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams<E: Element> {
    pub down_weight: Tensor<E>,
    pub down_bias: Tensor<E>,
    pub up_weight: Tensor<E>,
    pub up_bias: Tensor<E>,
}

impl<E: Element> AdapterParams<E> {
    /// Down projection uniform in `±1/sqrt(D)`; up projection and both biases zero.
    pub fn init(config: &AdapterConfig, rng: &mut Rng) -> Self {
        let (d, b) = (config.width, config.bottleneck());
        let bound = 1.0 / libm::sqrt(d as f64);
        AdapterParams {
            down_weight: Tensor::from_fn(&[d, b], |_| E::of(rng.gen_range(-bound..bound))),
            down_bias: Tensor::zeros(&[b]),
            up_weight: Tensor::zeros(&[b, d]),
            up_bias: Tensor::zeros(&[d]),
        }
    }

    pub fn insert_into(self, store: &mut ParamStore<E>, prefix: &str) {
        store.insert(format!("{prefix}.fc1.weight"), self.down_weight);
        store.insert(format!("{prefix}.fc1.bias"), self.down_bias);
        store.insert(format!("{prefix}.fc2.weight"), self.up_weight);
        store.insert(format!("{prefix}.fc2.bias"), self.up_bias);
    }
}

/// Applies the adapter stored under `prefix` over the last axis of `h`.
pub fn adapter_forward<E: Element>(
    ctx: &mut Forward<'_, E>,
    h: Var,
    prefix: &str,
    internal_skip: bool,
) -> Result<Var> {
    if !ctx.has_param(&format!("{prefix}.fc1.weight")) {
        return Err(Error::Config(format!("adapter `{prefix}` is not present")));
    }
    let z = linear(ctx, h, &format!("{prefix}.fc1"))?;
    let z = ctx.graph.gelu(z);
    let core = linear(ctx, z, &format!("{prefix}.fc2"))?;
    if internal_skip {
        ctx.graph.add(h, core)
    } else {
        Ok(core)
    }
}
