//! Adam with bias correction over named parameter tensors.

use crate::error::{FlowError, Result};
use crate::nn::{BoundParams, ParamStore};
use crate::tape::Gradients;
use crate::tensor::Tensor;
use std::collections::BTreeMap;

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam { lr, beta1, beta2, eps, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Apply one update over every trainable parameter bound in `bound`,
    /// pulling gradients from a finished backward pass. Parameters without a
    /// gradient (unreached by the loss) are left alone.
    pub fn apply(
        &mut self,
        store: &mut ParamStore,
        bound: &BoundParams,
        grads: &Gradients,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for name in bound.trainable_names() {
            let Some(grad) = grads.get(bound.var(name)) else { continue };
            if !grad.is_finite() {
                return Err(FlowError::NonFinite { what: format!("gradient of {name}") });
            }
            let param = store.get(name)?.clone();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(param.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(param.shape()));
            let mut updated = param;
            for i in 0..grad.numel() {
                let g = grad.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                updated.data_mut()[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            store.set(name, updated)?;
        }
        Ok(())
    }

    /// Moment tensors for checkpointing, keyed `m/<param>` and `v/<param>`.
    pub fn export_moments(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.m {
            out.insert(format!("m/{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("v/{k}"), t.clone());
        }
        out
    }

    pub fn import_moments(&mut self, moments: &BTreeMap<String, Tensor>, t: u64) {
        self.t = t;
        for (k, tensor) in moments {
            if let Some(name) = k.strip_prefix("m/") {
                self.m.insert(name.to_string(), tensor.clone());
            } else if let Some(name) = k.strip_prefix("v/") {
                self.v.insert(name.to_string(), tensor.clone());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Init, ParamSpec};
    use crate::tape::Tape;

    #[test]
    fn adam_descends_a_quadratic() {
        let specs = vec![ParamSpec::new("x", &[2], Init::Zeros)];
        let mut store = ParamStore::init(&specs, 0).unwrap();
        store.set("x", Tensor::from_vec(&[2], vec![3.0, -2.0])).unwrap();
        let mut adam = Adam::new(0.1, 0.9, 0.999, 1e-8);
        for _ in 0..200 {
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, &store, |_| true);
            let x = bound.var("x");
            let sq = tape.square(x);
            let loss = tape.sum(sq);
            let grads = tape.backward(loss);
            adam.apply(&mut store, &bound, &grads).unwrap();
        }
        let x = store.get("x").unwrap();
        assert!(x.data().iter().all(|v| v.abs() < 1e-2), "{:?}", x.data());
    }

    #[test]
    fn moments_roundtrip_through_export() {
        let specs = vec![ParamSpec::new("x", &[1], Init::Zeros)];
        let mut store = ParamStore::init(&specs, 0).unwrap();
        store.set("x", Tensor::from_vec(&[1], vec![1.0])).unwrap();
        let mut adam = Adam::new(0.05, 0.9, 0.999, 1e-8);
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &store, |_| true);
        let sq = tape.square(bound.var("x"));
        let loss = tape.sum(sq);
        let grads = tape.backward(loss);
        adam.apply(&mut store, &bound, &grads).unwrap();
        let exported = adam.export_moments();
        let mut fresh = Adam::new(0.05, 0.9, 0.999, 1e-8);
        fresh.import_moments(&exported, adam.step_count());
        assert_eq!(fresh.export_moments(), exported);
        assert_eq!(fresh.step_count(), 1);
    }
}
