use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimiser for one [`ParamStore`]. No learning-rate decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients. Does not clear them.
    pub fn step(&mut self, store: &mut ParamStore) {
        assert_eq!(self.first.len(), store.len(), "optimizer built for another store");
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let t = store.tensor_mut(id);
            let Some(g) = t.grad().map(<[f64]>::to_vec) else { continue };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let data = t.data_mut();
            for j in 0..data.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    /// Moment buffers as named tensors, for checkpoints.
    pub fn export(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.first.len() + 1);
        for (i, (name, t)) in store.iter().enumerate() {
            out.push((
                format!("m.{name}"),
                Tensor::new(t.shape(), self.first[i].clone()).expect("moment shape"),
            ));
            out.push((
                format!("v.{name}"),
                Tensor::new(t.shape(), self.second[i].clone()).expect("moment shape"),
            ));
        }
        out.push(("step".to_string(), Tensor::scalar(self.step as f64)));
        out
    }

    pub fn import(
        config: AdamConfig,
        store: &ParamStore,
        mut lookup: impl FnMut(&str) -> Option<Tensor>,
    ) -> Result<Self, String> {
        let mut opt = Self::new(config, store);
        for (i, (name, t)) in store.iter().enumerate() {
            for (key, buf) in [("m", &mut opt.first[i]), ("v", &mut opt.second[i])] {
                let full = format!("{key}.{name}");
                let saved = lookup(&full).ok_or_else(|| format!("missing optimizer state {full}"))?;
                if saved.shape() != t.shape() {
                    return Err(format!("optimizer state {full} has wrong shape"));
                }
                buf.copy_from_slice(saved.data());
            }
        }
        let step = lookup("step").ok_or("missing optimizer step")?;
        opt.step = step.data()[0] as u64;
        Ok(opt)
    }
}
