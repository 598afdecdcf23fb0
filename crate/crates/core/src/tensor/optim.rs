//! Adam optimizer and the step-decay learning-rate schedule.

use super::nn::ParamStore;
use super::Tensor;
use crate::error::{Error, Result};

/// Learning rate at `epoch`: `lr0 · 0.8^floor(epoch / 100)`.
pub fn step_decay(lr0: f64, epoch: usize) -> f64 {
    lr0 * 0.8f64.powi((epoch / 100) as i32)
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected Adam update of every parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Precondition(
                "gradients missing for some parameters".into(),
            ));
        }
        for g in grads {
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("gradient".into()));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let p = store.get_mut(id).data_mut();
            for (((p, g), m), v) in p.iter_mut().zip(grads[k].data()).zip(m).zip(v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Moment buffers as named tensors (`adam.m.<param>`, `adam.v.<param>`) plus
    /// the step counter `adam.t`, for checkpointing.
    pub fn export(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = vec![("adam.t".to_string(), Tensor::scalar(self.t as f64))];
        for (k, (name, t)) in store.iter().enumerate() {
            let shape = t.shape().to_vec();
            out.push((
                format!("adam.m.{name}"),
                Tensor::new(shape.clone(), self.m[k].clone()).expect("moment shape"),
            ));
            out.push((
                format!("adam.v.{name}"),
                Tensor::new(shape, self.v[k].clone()).expect("moment shape"),
            ));
        }
        out
    }

    /// Restores state written by [`Adam::export`].
    pub fn import(store: &ParamStore, records: &[(String, Tensor)]) -> Result<Self> {
        let find = |key: &str| {
            records
                .iter()
                .find(|(n, _)| n == key)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::format("checkpoint", format!("missing record {key}")))
        };
        let mut adam = Self::new(store);
        adam.t = find("adam.t")?.item()? as u64;
        for (k, (name, t)) in store.iter().enumerate() {
            for (buf, prefix) in [(&mut adam.m[k], "m"), (&mut adam.v[k], "v")] {
                let rec = find(&format!("adam.{prefix}.{name}"))?;
                if rec.shape() != t.shape() {
                    return Err(Error::format(
                        "checkpoint",
                        format!("bad shape for adam.{prefix}.{name}"),
                    ));
                }
                buf.copy_from_slice(rec.data());
            }
        }
        Ok(adam)
    }
}
