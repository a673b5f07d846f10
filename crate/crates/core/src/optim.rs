//! Adam and WGAN-style weight clipping.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    /// `beta1 = 0.5` keeps critic training stable under clipping.
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::usage(format!("invalid Adam hyperparameters {self:?}")))
        }
    }
}

/// Whether a step minimizes or maximizes the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Descend,
    Ascend,
}

/// Moment estimates for one group of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            m: params.iter().map(Tensor::zeros_like).collect(),
            v: params.iter().map(Tensor::zeros_like).collect(),
            t: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// One bias-corrected Adam update of `params` in place. Ascending negates
    /// the gradient before it enters the moment estimates.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], direction: Direction) -> Result<()> {
        self.step_refs(params.iter_mut().collect(), grads, direction)
    }

    /// As [`AdamState::step`] for parameters spread over several owners.
    pub fn step_refs(&mut self, mut params: Vec<&mut Tensor>, grads: &[Tensor], direction: Direction) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::dim(format!(
                "Adam state tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            p.expect_same_shape(g)?;
            p.expect_same_shape(m)?;
        }

        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let sign = match direction {
            Direction::Descend => 1.0,
            Direction::Ascend => -1.0,
        };
        let bias1 = 1.0 - beta1.powf(self.t as f64);
        let bias2 = 1.0 - beta2.powf(self.t as f64);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = sign * g;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Clamps every entry to `[-c, c]`.
pub fn clip_weights(params: &mut [Tensor], c: f64) -> Result<()> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::usage(format!("clip constant must be positive, got {c}")));
    }
    for p in params {
        p.data_mut().iter_mut().for_each(|w| *w = w.clamp(-c, c));
    }
    Ok(())
}
