//! AdamW with decoupled weight decay and a linear warm-up / linear decay
//! learning-rate schedule.

use std::collections::BTreeMap;

use ndiff::{Params, Tensor};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config("optimizer requires betas in [0,1), eps > 0, weight_decay >= 0".into()))
        }
    }
}

/// Per-parameter first and second moment estimates.
#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every parameter that has a gradient. Decay is applied
    /// first, `θ ← θ·(1 − lr·λ)`, then the bias-corrected adaptive step.
    pub fn step(&mut self, params: &mut Params, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.t += 1;
        let c = &self.config;
        let t = self.t as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.len() != g.len() {
                return Err(Error::DimMismatch {
                    expected: p.len(),
                    got: g.len(),
                });
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let decay = 1.0 - lr * c.weight_decay;
            for (((theta, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *theta *= decay;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Linear warm-up from 0 to `peak`, then linear decay to 0 at `total_steps`.
/// Steps are counted from 0, so the first update uses `lr = 0` whenever
/// there is any warm-up.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LinearSchedule {
    /// `warmup_steps = ⌈ratio · total_steps⌉`.
    pub fn new(peak: f64, warmup_ratio: f64, total_steps: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&warmup_ratio) {
            return Err(Error::Config(format!("warm-up ratio {warmup_ratio} outside [0, 1)")));
        }
        if !(peak.is_finite() && peak > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(Self {
            peak,
            warmup_steps: (warmup_ratio * total_steps as f64).ceil() as usize,
            total_steps,
        })
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        let remaining = self.total_steps.saturating_sub(step) as f64;
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
        self.peak * remaining / span
    }
}
