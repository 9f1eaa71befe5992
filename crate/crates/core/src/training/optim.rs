use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::synthesizer::{is_motion_param, ParameterSet};

/// Ratio between the motion-layer rate and the base rate.
pub const MOTION_RATE_MULTIPLIER: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// How the rate evolves over a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RateSchedule {
    Constant,
    /// Half a cosine from the full rate down to `final_rate_fraction` of it.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    /// Rate for every parameter outside the motion layers.
    pub learning_rate: f64,
    /// Motion layers train at `learning_rate × motion_rate_multiplier`.
    pub motion_rate_multiplier: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Rescales the whole gradient when its Euclidean norm exceeds this.
    pub clip_norm: Option<f64>,
    pub schedule: RateSchedule,
    pub final_rate_fraction: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 2e-3,
            motion_rate_multiplier: MOTION_RATE_MULTIPLIER,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: None,
            schedule: RateSchedule::Cosine,
            final_rate_fraction: 0.05,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.learning_rate) || !ok(self.motion_rate_multiplier) {
            return Err(config("learning rates must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(config("momentum and Adam betas must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(config("Adam epsilon must be positive"));
        }
        if !(0.0..=1.0).contains(&self.final_rate_fraction) {
            return Err(config("final_rate_fraction must lie in [0, 1]"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(config("clip_norm must be positive"));
            }
        }
        Ok(())
    }

    /// Multiplier on every rate at `step` (1-based) of a `total`-step run.
    pub fn rate_scale(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            RateSchedule::Constant => 1.0,
            RateSchedule::Cosine if total <= 1 => 1.0,
            RateSchedule::Cosine => {
                let t = (step.saturating_sub(1)) as f64 / (total - 1) as f64;
                let f = self.final_rate_fraction;
                f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
            }
        }
    }
}

/// First-order optimizer over a [`ParameterSet`] with two rate groups.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: HashMap<String, Vec<f64>>,
    second: HashMap<String, Vec<f64>>,
    steps: u64,
    scale: f64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            first: HashMap::new(),
            second: HashMap::new(),
            steps: 0,
            scale: 1.0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Applies the schedule for `step` of a `total`-step run to later
    /// updates.
    pub fn set_progress(&mut self, step: usize, total: usize) {
        self.scale = self.config.rate_scale(step, total);
    }

    /// Learning rate applied to the tensor called `name`.
    pub fn rate_for(&self, name: &str) -> f64 {
        let base = self.config.learning_rate * self.scale;
        if is_motion_param(name) {
            base * self.config.motion_rate_multiplier
        } else {
            base
        }
    }

    /// Applies one update; `grads` follows the order of `params`.
    /// Returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &[Vec<f64>]) -> Result<f64> {
        if grads.len() != params.len() {
            return Err(config(format!(
                "{} gradients for {} parameter tensors",
                grads.len(),
                params.len()
            )));
        }
        for (t, g) in params.iter().zip(grads) {
            if t.data.len() != g.len() {
                return Err(config(format!("gradient for `{}` has the wrong length", t.name)));
            }
        }
        let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        let clip = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.steps += 1;
        let c = self.config.clone();
        let bias1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bias2 = 1.0 - c.beta2.powi(self.steps as i32);
        for (t, g) in params.iter_mut().zip(grads) {
            let rate = self.rate_for(&t.name);
            let m = self.first.entry(t.name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            match c.kind {
                OptimizerKind::Sgd => {
                    for ((w, m), g) in t.data.iter_mut().zip(m.iter_mut()).zip(g) {
                        *m = c.momentum * *m + clip * g;
                        *w -= rate * *m;
                    }
                }
                OptimizerKind::Adam => {
                    let v = self.second.entry(t.name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    for (((w, m), v), g) in t.data.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                        let g = clip * g;
                        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                        let mh = *m / bias1;
                        let vh = *v / bias2;
                        *w -= rate * mh / (vh.sqrt() + c.epsilon);
                    }
                }
            }
        }
        Ok(norm)
    }
}
