//! AdamW with decoupled weight decay, and the warmup + cosine schedule.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::model::FreezePartition;
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    decay: bool,
}

/// Moment buffers exist only for tunable names.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    state: BTreeMap<String, Moments>,
}

/// Decay applies to weight matrices only; biases, norm scales and embeddings are exempt.
pub fn decays(name: &str, shape: &[usize]) -> bool {
    shape.len() >= 2 && name.ends_with(".weight")
}

impl AdamW {
    pub fn new<E: Element>(config: AdamWConfig, params: &ParamStore<E>, partition: &FreezePartition) -> Result<Self> {
        let mut state = BTreeMap::new();
        for name in &partition.tunable {
            let t = params
                .get(name)
                .ok_or_else(|| Error::Config(format!("tunable `{name}` not in the model")))?;
            state.insert(
                name.clone(),
                Moments {
                    m: vec![0.0; t.len()],
                    v: vec![0.0; t.len()],
                    decay: decays(name, t.shape()),
                },
            );
        }
        Ok(AdamW {
            config,
            step: 0,
            state,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn state_names(&self) -> impl Iterator<Item = &str> {
        self.state.keys().map(|k| k.as_str())
    }

    /// One update of every tunable parameter. Parameters without optimizer
    /// state are never touched.
    pub fn step<E: Element>(
        &mut self,
        params: &mut ParamStore<E>,
        grads: &BTreeMap<String, Vec<E>>,
        lr: f64,
    ) -> Result<()> {
        for name in self.state.keys() {
            if !grads.contains_key(name) {
                return Err(Error::Contract(format!("no gradient for tunable `{name}`")));
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - libm::pow(beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(beta2, self.step as f64);
        for (name, st) in self.state.iter_mut() {
            let g = &grads[name];
            let t = params
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("parameter `{name}` disappeared")))?;
            let wd = if st.decay { weight_decay } else { 0.0 };
            for (i, theta) in t.data_mut().iter_mut().enumerate() {
                let gi = g[i].as_f64();
                st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * gi;
                st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                let old = theta.as_f64();
                let new = old - lr * (m_hat / (libm::sqrt(v_hat) + eps) + wd * old);
                *theta = E::of(new);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub min_lr: f64,
}

impl ScheduleConfig {
    /// Warmup over `warmup_frac` of `total_steps`, rounded.
    pub fn with_warmup_fraction(base_lr: f64, total_steps: usize, warmup_frac: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&warmup_frac) {
            return Err(Error::Config(format!("warmup fraction {warmup_frac} outside [0, 1)")));
        }
        let warmup_steps = libm::round(total_steps as f64 * warmup_frac) as usize;
        let s = ScheduleConfig {
            base_lr,
            warmup_steps,
            total_steps,
            min_lr: 0.0,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {} is invalid", self.base_lr)));
        }
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup of {} steps does not fit in {} total",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }
}

/// Linear warmup from 0, then half-cosine decay to `min_lr` at `total_steps`.
pub fn lr_at(step: usize, schedule: &ScheduleConfig) -> Result<f64> {
    if step > schedule.total_steps {
        return Err(Error::Contract(format!(
            "step {step} beyond schedule of {} steps",
            schedule.total_steps
        )));
    }
    let ScheduleConfig {
        base_lr,
        warmup_steps,
        total_steps,
        min_lr,
    } = *schedule;
    if total_steps == 0 {
        return Ok(0.0);
    }
    if step < warmup_steps {
        return Ok(base_lr * step as f64 / warmup_steps as f64);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(min_lr + 0.5 * (base_lr - min_lr) * (1.0 + libm::cos(core::f64::consts::PI * progress)))
}
