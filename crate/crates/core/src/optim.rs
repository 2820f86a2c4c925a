//! Momentum SGD and Adam over a [`ParamStore`].
//!
//! Parameters without a gradient are updated as if their gradient were zero.

use crate::error::{Error, Result};
use crate::params::{EntryKind, ParamStore};
use crate::tensor::Tensor;

fn check_lr(lr: f64) -> Result<()> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::InvalidArgument(format!("learning rate must be >= 0, got {lr}")));
    }
    Ok(())
}

fn check_grads(store: &ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
    if grads.len() != store.len() {
        return Err(Error::shape("optimizer", format!("{} gradients for {} entries", grads.len(), store.len())));
    }
    for (e, g) in store.entries().iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != e.value.shape() {
                return Err(Error::shape(
                    "optimizer",
                    format!("gradient {:?} for `{}` {:?}", g.shape(), e.name, e.value.shape()),
                ));
            }
        }
    }
    Ok(())
}

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay:
/// `v <- momentum * v + (g + weight_decay * p)`, `p <- p - lr * v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Tensor>,
    pub steps: u64,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: store.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect(),
            steps: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        check_lr(lr)?;
        check_grads(store, grads)?;
        for ((entry, g), v) in store.entries_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            if entry.kind != EntryKind::Param {
                continue;
            }
            let p = entry.value.data_mut();
            let v = v.data_mut();
            for i in 0..p.len() {
                let gi = g.as_ref().map_or(0.0, |g| g.data()[i]);
                v[i] = self.momentum * v[i] + gi + self.weight_decay * p[i];
                p[i] -= lr * v[i];
            }
        }
        self.steps += 1;
        Ok(())
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub steps: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Self::with_betas(store, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || store.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Self { beta1, beta2, eps, m: zeros(), v: zeros(), steps: 0 }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        check_lr(lr)?;
        check_grads(store, grads)?;
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((entry, g), m), v) in store.entries_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if entry.kind != EntryKind::Param {
                continue;
            }
            let p = entry.value.data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.as_ref().map_or(0.0, |g| g.data()[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add_param("p", Tensor::scalar(v));
        s
    }

    fn grad(v: f64) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::scalar(v))]
    }

    #[test]
    fn sgd_zero_gradient_is_noop() {
        let mut s = scalar_store(1.25);
        let mut opt = Sgd::new(&s, 0.9, 0.0);
        opt.step(&mut s, &grad(0.0), 0.1).unwrap();
        assert_eq!(s.entries()[0].value.item(), 1.25);
    }

    #[test]
    fn sgd_single_step() {
        let mut s = scalar_store(1.0);
        let mut opt = Sgd::new(&s, 0.9, 0.0);
        opt.step(&mut s, &grad(0.5), 0.1).unwrap();
        assert!((s.entries()[0].value.item() - 0.95).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_second_step_is_1_9x() {
        let mut s = scalar_store(0.0);
        let mut opt = Sgd::new(&s, 0.9, 0.0);
        opt.step(&mut s, &grad(1.0), 0.1).unwrap();
        let first = -s.entries()[0].value.item();
        opt.step(&mut s, &grad(1.0), 0.1).unwrap();
        let second = -s.entries()[0].value.item() - first;
        assert!((second / first - 1.9).abs() < 1e-12);
        assert_eq!(opt.steps, 2);
    }

    #[test]
    fn sgd_weight_decay_pulls_towards_zero() {
        let mut s = scalar_store(2.0);
        let mut opt = Sgd::new(&s, 0.0, 5e-4);
        opt.step(&mut s, &[None], 1.0).unwrap();
        assert!((s.entries()[0].value.item() - (2.0 - 1e-3)).abs() < 1e-15);
    }

    #[test]
    fn rejects_negative_lr() {
        let mut s = scalar_store(1.0);
        assert!(Sgd::new(&s, 0.9, 0.0).step(&mut s, &grad(1.0), -0.1).is_err());
        assert!(Adam::new(&s).step(&mut s, &grad(1.0), -0.1).is_err());
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut s = scalar_store(0.3);
        let mut opt = Adam::new(&s);
        opt.step(&mut s, &grad(0.0), 0.01).unwrap();
        assert_eq!(s.entries()[0].value.item(), 0.3);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = scalar_store(0.0);
        let mut opt = Adam::new(&s);
        opt.step(&mut s, &grad(1.0), 0.01).unwrap();
        // m_hat = 1, v_hat = 1 -> displacement lr / (1 + eps)
        let expected = -0.01 / (1.0 + 1e-8);
        assert!((s.entries()[0].value.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_constant_gradient_step_tends_to_lr() {
        for g in [1e-3, 1.0, 250.0] {
            let mut s = scalar_store(0.0);
            let mut opt = Adam::new(&s);
            let mut prev = 0.0;
            let mut last_step = 0.0;
            for _ in 0..1000 {
                opt.step(&mut s, &grad(g), 0.01).unwrap();
                let now = s.entries()[0].value.item();
                last_step = now - prev;
                prev = now;
            }
            assert!((last_step + 0.01).abs() < 1e-6, "g={g}: {last_step}");
        }
    }
}
