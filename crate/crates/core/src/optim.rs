//! MADGRAD and Adam over a [`ParamStore`], plus global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::autograd::Gradients;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Madgrad,
    Adam,
}

/// Scales `grads` in place so that their global L2 norm is at most
/// `max_norm`. Returns the norms before and after clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> (f64, f64) {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale((max_norm / (norm + 1e-6)) as f32);
    }
    (norm, grads.global_norm())
}

/// Momentumized, adaptive, dual-averaged gradient method.
///
/// With `λ_k = lr·√(k+1)`:
/// `s ← s + λ_k·g`, `ν ← ν + λ_k·g²`, `z = x₀ − s / (∛ν + ε)`,
/// `x ← (1 − c)·x + c·z` with `c = 1 − momentum`.
#[derive(Clone, Debug)]
pub struct Madgrad {
    pub lr: f64,
    pub momentum: f64,
    pub eps: f64,
    step: u64,
    grad_sum: Vec<Vec<f32>>,
    grad_sum_sq: Vec<Vec<f32>>,
    origin: Vec<Vec<f32>>,
}

impl Madgrad {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros = || {
            (0..store.len())
                .map(|i| vec![0.0f32; store.get(i).numel()])
                .collect()
        };
        Self {
            lr,
            momentum: 0.9,
            eps: 1e-6,
            step: 0,
            grad_sum: zeros(),
            grad_sum_sq: zeros(),
            origin: (0..store.len())
                .map(|i| store.get(i).data().to_vec())
                .collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        let lamb = (self.lr * ((self.step + 1) as f64).sqrt()) as f32;
        let ck = (1.0 - self.momentum) as f32;
        let eps = self.eps as f32;
        for p in 0..store.len() {
            let Some(g) = grads.get(p) else {
                // missing gradient contributes zero; the dual average still moves x
                let x = store.get_mut(p).data_mut();
                for k in 0..x.len() {
                    let rms = self.grad_sum_sq[p][k].cbrt() + eps;
                    let z = self.origin[p][k] - self.grad_sum[p][k] / rms;
                    x[k] = (1.0 - ck) * x[k] + ck * z;
                }
                continue;
            };
            let x = store.get_mut(p).data_mut();
            let (s, nu, x0) = (
                &mut self.grad_sum[p],
                &mut self.grad_sum_sq[p],
                &self.origin[p],
            );
            for k in 0..x.len() {
                let gk = g.data()[k];
                nu[k] += lamb * gk * gk;
                s[k] += lamb * gk;
                let rms = nu[k].cbrt() + eps;
                let z = x0[k] - s[k] / rms;
                x[k] = (1.0 - ck) * x[k] + ck * z;
            }
        }
        self.step += 1;
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros = || {
            (0..store.len())
                .map(|i| vec![0.0f32; store.get(i).numel()])
                .collect()
        };
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (p, g) in grads.iter() {
            let x = store.get_mut(p).data_mut();
            let (m, v) = (&mut self.m[p], &mut self.v[p]);
            for k in 0..x.len() {
                let gk = g.data()[k];
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                x[k] -= step_size * m[k] / (v[k].sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub enum Optimizer {
    Madgrad(Madgrad),
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, store: &ParamStore, lr: f64) -> Self {
        match kind {
            OptimizerKind::Madgrad => Self::Madgrad(Madgrad::new(store, lr)),
            OptimizerKind::Adam => Self::Adam(Adam::new(store, lr)),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Self::Madgrad(_) => OptimizerKind::Madgrad,
            Self::Adam(_) => OptimizerKind::Adam,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        match self {
            Self::Madgrad(o) => o.step(store, grads),
            Self::Adam(o) => o.step(store, grads),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        match self {
            Self::Madgrad(o) => o.step,
            Self::Adam(o) => o.step,
        }
    }

    /// Named state buffers, aligned with the parameter order of `store`.
    pub fn export_state(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let named = |tag: &str, bufs: &[Vec<f32>]| -> Vec<(String, Tensor)> {
            bufs.iter()
                .enumerate()
                .map(|(p, b)| {
                    let t =
                        Tensor::new(store.get(p).shape().to_vec(), b.clone()).expect("state shape");
                    (format!("{tag}/{}", store.name(p)), t)
                })
                .collect()
        };
        match self {
            Self::Madgrad(o) => [
                named("grad_sum", &o.grad_sum),
                named("grad_sum_sq", &o.grad_sum_sq),
                named("origin", &o.origin),
            ]
            .concat(),
            Self::Adam(o) => [named("m", &o.m), named("v", &o.v)].concat(),
        }
    }

    pub fn import_state(
        &mut self,
        store: &ParamStore,
        step: u64,
        state: &[(String, Tensor)],
    ) -> Result<()> {
        let fetch = |tag: &str| -> Result<Vec<Vec<f32>>> {
            (0..store.len())
                .map(|p| {
                    let key = format!("{tag}/{}", store.name(p));
                    state
                        .iter()
                        .find(|(k, _)| *k == key)
                        .filter(|(_, t)| t.shape() == store.get(p).shape())
                        .map(|(_, t)| t.data().to_vec())
                        .ok_or_else(|| {
                            Error::Checkpoint(format!(
                                "optimizer state `{key}` missing or misshapen"
                            ))
                        })
                })
                .collect()
        };
        match self {
            Self::Madgrad(o) => {
                o.grad_sum = fetch("grad_sum")?;
                o.grad_sum_sq = fetch("grad_sum_sq")?;
                o.origin = fetch("origin")?;
                o.step = step;
            }
            Self::Adam(o) => {
                o.m = fetch("m")?;
                o.v = fetch("v")?;
                o.step = step;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    fn quadratic_grads(store: &ParamStore, target: &[f32]) -> Gradients {
        // L = ½‖x − target‖²
        let mut tape = Tape::new();
        let x = store.leaf(&mut tape, 0);
        let t = target.to_vec();
        let xv = tape.value(x).data().to_vec();
        let value: f32 = xv
            .iter()
            .zip(&t)
            .map(|(a, b)| 0.5 * (a - b) * (a - b))
            .sum();
        let loss = tape.custom(
            &[x],
            Tensor::scalar(value),
            Box::new(move |g| {
                let d = xv.iter().zip(&t).map(|(a, b)| (a - b) * g.item()).collect();
                vec![Tensor::new([xv.len()], d).unwrap()]
            }),
        );
        tape.backward(loss)
    }

    fn converges(kind: OptimizerKind, lr: f64) -> f32 {
        let mut store = ParamStore::default();
        store.add("x", Tensor::new([3], vec![2.0, -1.0, 0.5]).unwrap());
        let target = [0.3f32, 0.7, -0.2];
        let mut opt = Optimizer::new(kind, &store, lr);
        for _ in 0..500 {
            let g = quadratic_grads(&store, &target);
            opt.step(&mut store, &g);
        }
        store
            .get(0)
            .data()
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    #[test]
    fn madgrad_minimizes_quadratic() {
        assert!(converges(OptimizerKind::Madgrad, 1e-2) < 1e-2);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        assert!(converges(OptimizerKind::Adam, 5e-2) < 1e-2);
    }

    #[test]
    fn madgrad_first_step_matches_hand_computation() {
        let mut store = ParamStore::default();
        store.add("x", Tensor::new([1], vec![1.0]).unwrap());
        let mut opt = Madgrad::new(&store, 0.1);
        let g = quadratic_grads(&store, &[0.0]); // gradient 1
        opt.step(&mut store, &g);
        // s = 0.1, ν = 0.1, z = 1 − 0.1/(0.1^{1/3} + 1e-6), x = 0.9·1 + 0.1·z
        let z = 1.0 - 0.1 / (0.1f64.cbrt() + 1e-6);
        let want = 0.9 + 0.1 * z;
        assert!((store.get(0).data()[0] as f64 - want).abs() < 1e-6);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut store = ParamStore::default();
        store.add("x", Tensor::new([2], vec![30.0, 40.0]).unwrap());
        let mut g = quadratic_grads(&store, &[0.0, 0.0]);
        let (pre, post) = clip_grad_norm(&mut g, 0.5);
        assert!((pre - 50.0).abs() < 1e-4);
        assert!(post <= 0.5 + 1e-6);
        let mut small = quadratic_grads(&store, &[29.9, 40.0]);
        let (pre, post) = clip_grad_norm(&mut small, 0.5);
        assert_eq!(pre, post);
    }
}
