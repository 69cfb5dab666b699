use std::collections::BTreeMap;

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter named in `grads` at learning rate `lr`.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.numel()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.numel()]);
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Hook run on the gradients of every step before the optimizer update.
///
/// The default training loop uses [`NoHook`]. An adversarial-training
/// scheme would perturb inputs here and replace `grads` with the gradients
/// of the perturbed loss.
pub trait UpdateHook {
    fn before_update(
        &mut self,
        _params: &ParamStore,
        _grads: &mut BTreeMap<String, Tensor>,
    ) -> Result<()> {
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct NoHook;

impl UpdateHook for NoHook {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new(0);
        store.insert("w", Tensor::row(&[1.0, -2.0, 0.5])).unwrap();
        let grads = BTreeMap::from([("w".to_string(), Tensor::row(&[3.0, -0.1, 0.0]))]);
        let mut adam = Adam::default();
        adam.step(&mut store, &grads, 0.1).unwrap();
        let w = store.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-8);
        assert!((w[1] + 1.9).abs() < 1e-6);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::new(0);
        store.insert("w", Tensor::row(&[5.0])).unwrap();
        let mut adam = Adam::default();
        for _ in 0..2000 {
            let w = store.get("w").unwrap().data()[0];
            let grads = BTreeMap::from([("w".to_string(), Tensor::row(&[2.0 * (w - 1.0)]))]);
            adam.step(&mut store, &grads, 0.05).unwrap();
        }
        assert!((store.get("w").unwrap().data()[0] - 1.0).abs() < 1e-3);
    }
}
