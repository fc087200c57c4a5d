//! Adam with step learning-rate decay, plus a helper that turns a loss
//! builder into parameter gradients.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::math;
use crate::nn::{GradBuffer, ParamStore};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiply the learning rate by `decay_factor` every `decay_every` epochs.
    pub decay_every: usize,
    pub decay_factor: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_every: 10,
            decay_factor: 1.0 / 3.0,
            clip_norm: 5.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return Err(Error::InvalidConfig(
                "adam: need lr > 0 and betas in [0, 1)".into(),
            ));
        }
        if self.decay_every == 0 || !(self.decay_factor > 0.0) {
            return Err(Error::InvalidConfig(
                "adam: decay_every >= 1 and decay_factor > 0".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * math::pow(self.decay_factor, (epoch / self.decay_every) as f64)
    }
}

pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let zeros = || {
            store
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.tensor.shape()))
                .collect()
        };
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// One update at the learning rate scheduled for `epoch`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer, epoch: usize) {
        let c = self.cfg;
        self.t += 1;
        let norm = math::sqrt(
            grads
                .tensors()
                .iter()
                .flat_map(|g| g.data())
                .map(|g| g * g)
                .sum::<f64>(),
        );
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };
        let bc1 = 1.0 - math::pow(c.beta1, self.t as f64);
        let bc2 = 1.0 - math::pow(c.beta2, self.t as f64);
        let lr = c.lr_at(epoch);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = grads.get(id).data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                let gk = g[k] * clip;
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                p[k] -= lr * (m[k] / bc1) / (math::sqrt(v[k] / bc2) + c.eps);
            }
        }
    }
}

/// Runs `build` on a fresh tape and returns the loss value and the
/// parameter gradients of `store`.
pub fn loss_and_grad<F>(store: &ParamStore, build: F) -> Result<(f64, GradBuffer)>
where
    F: FnOnce(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    let mut buf = GradBuffer::zeros_like(store);
    tape.backward(loss).accumulate_into(&mut buf, 1.0);
    if !buf.is_finite() {
        return Err(Error::NonFinite("gradients"));
    }
    Ok((value, buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_schedule() {
        let c = AdamConfig {
            lr: 0.9,
            ..AdamConfig::default()
        };
        assert_eq!(c.lr_at(0), 0.9);
        assert_eq!(c.lr_at(9), 0.9);
        assert!((c.lr_at(10) - 0.3).abs() < 1e-15);
        assert!((c.lr_at(25) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::from_vec(&[2], alloc::vec![3.0, -2.0]));
        let target = Tensor::from_vec(&[2], alloc::vec![0.5, 1.0]);
        let mut opt = Adam::new(
            &store,
            AdamConfig {
                lr: 0.05,
                clip_norm: 0.0,
                ..AdamConfig::default()
            },
        );
        for _ in 0..2000 {
            let (_, g) = loss_and_grad(&store, |t| {
                let x = t.param(&store, id);
                let c = t.constant(target.clone());
                let d = t.sub(x, c);
                let s = t.square(d);
                Ok(t.sum(s))
            })
            .unwrap();
            opt.step(&mut store, &g, 0);
        }
        let x = store.get(id).data();
        assert!(
            (x[0] - 0.5).abs() < 1e-3 && (x[1] - 1.0).abs() < 1e-3,
            "{x:?}"
        );
    }

    #[test]
    fn bad_configs_rejected() {
        assert!(AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        }
        .validate()
        .is_err());
        assert!(AdamConfig {
            decay_every: 0,
            ..AdamConfig::default()
        }
        .validate()
        .is_err());
        assert!(AdamConfig::default().validate().is_ok());
    }
}
