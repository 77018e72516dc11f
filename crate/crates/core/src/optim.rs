//! Adam optimizer.

use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::nn::{named_params, named_params_mut, Layer};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 5e-4, beta1: 0.9, beta2: 0.99, eps: 1e-8 }
    }
}

/// First and second moment estimates, one pair per parameter in visitation order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    moments: Vec<(String, Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new<L: Layer<T> + ?Sized>(config: AdamConfig, model: &L) -> Self {
        let moments = named_params(model)
            .into_iter()
            .map(|(name, p)| (name, vec![T::zero(); p.len()], vec![T::zero(); p.len()]))
            .collect();
        Self { config, step: 0, moments }
    }

    /// Applies one update from the accumulated gradients. Frozen parameters are skipped.
    pub fn update<L: Layer<T> + ?Sized>(&mut self, model: &mut L) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = T::lit(1.0 - c.beta1.powi(t));
        let bias2 = T::lit(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        let one = T::one();
        for ((name, p), (mname, m, v)) in named_params_mut(model).into_iter().zip(self.moments.iter_mut()) {
            debug_assert_eq!(&name, mname);
            if !p.requires_grad {
                continue;
            }
            for i in 0..p.data.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    pub fn write(&self, archive: &mut Archive, prefix: &str) {
        for (name, m, v) in &self.moments {
            archive.insert(&format!("{prefix}.{name}.m"), &[m.len()], m);
            archive.insert(&format!("{prefix}.{name}.v"), &[v.len()], v);
        }
    }

    pub fn read(&mut self, archive: &Archive, prefix: &str, step: u64) -> Result<()> {
        for (name, m, v) in &mut self.moments {
            for (suffix, buf) in [("m", &mut *m), ("v", &mut *v)] {
                let key = format!("{prefix}.{name}.{suffix}");
                let (_, data) = archive
                    .get::<T>(&key)
                    .ok_or_else(|| Error::Config(format!("checkpoint lacks optimizer state {key}")))?;
                if data.len() != buf.len() {
                    return Err(Error::Shape(format!("optimizer state {key} has {} values, expected {}", data.len(), buf.len())));
                }
                *buf = data;
            }
        }
        self.step = step;
        Ok(())
    }
}
