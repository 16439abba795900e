use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip applied before the update; `None` disables it.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Vec<S>,
    /// Adam first and second moments.
    pub m: Vec<S>,
    pub v: Vec<S>,
}

/// Named parameters in insertion order, with gradients and optimizer state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore<S> {
    params: Vec<Parameter<S>>,
    by_name: HashMap<String, usize>,
    /// Number of Adam updates applied so far.
    pub step: u64,
}

impl<S: Scalar> ParameterStore<S> {
    pub fn new() -> Self {
        ParameterStore {
            params: Vec::new(),
            by_name: HashMap::new(),
            step: 0,
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<S>) -> Result<usize> {
        if self.by_name.contains_key(name) {
            return Err(Error::Domain(format!("duplicate parameter '{name}'")));
        }
        let n = value.len();
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad: vec![S::zero(); n],
            m: vec![S::zero(); n],
            v: vec![S::zero(); n],
        });
        let idx = self.params.len() - 1;
        self.by_name.insert(name.to_string(), idx);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, index: usize) -> &Parameter<S> {
        &self.params[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Parameter<S> {
        &mut self.params[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<S>> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = S::zero());
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| &p.grad)
            .map(|g| g.f64() * g.f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Scale every gradient by `factor` (e.g. to average over a batch).
    pub fn scale_grads(&mut self, factor: S) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// One Adam update from the accumulated gradients, then zero them.
    /// Returns the gradient norm before clipping.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> f64 {
        let norm = self.grad_norm();
        let clip = match cfg.clip_norm {
            Some(c) if norm > c => S::of(c / norm),
            _ => S::one(),
        };
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (S::of(cfg.beta1), S::of(cfg.beta2));
        let c1 = S::one() - S::of(cfg.beta1.powi(t));
        let c2 = S::one() - S::of(cfg.beta2.powi(t));
        let (lr, eps) = (S::of(cfg.lr), S::of(cfg.eps));
        for p in &mut self.params {
            for i in 0..p.grad.len() {
                let g = p.grad[i] * clip;
                p.m[i] = b1 * p.m[i] + (S::one() - b1) * g;
                p.v[i] = b2 * p.v[i] + (S::one() - b2) * g * g;
                let m_hat = p.m[i] / c1;
                let v_hat = p.v[i] / c2;
                p.value.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                p.grad[i] = S::zero();
            }
        }
        norm
    }

    /// Forget optimizer moments and the step counter.
    pub fn reset_optimizer(&mut self) {
        self.step = 0;
        for p in &mut self.params {
            p.m.iter_mut().for_each(|x| *x = S::zero());
            p.v.iter_mut().for_each(|x| *x = S::zero());
        }
    }

    pub fn cast<T: Scalar>(&self) -> ParameterStore<T> {
        let conv = |v: &[S]| v.iter().map(|x| T::of(x.f64())).collect::<Vec<T>>();
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: conv(&p.grad),
                    m: conv(&p.m),
                    v: conv(&p.v),
                })
                .collect(),
            by_name: self.by_name.clone(),
            step: self.step,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut store = ParameterStore::<f64>::new();
        store.add("w", Tensor::from_vec(vec![1.0, -2.0, 0.5])).unwrap();
        store.get_mut(0).grad = vec![0.3, -0.1, 0.0];
        let cfg = AdamConfig {
            clip_norm: None,
            ..AdamConfig::default()
        };
        store.adam_step(&cfg);
        let w = &store.get(0).value.data;
        // bias-corrected first step is lr * sign(g)
        assert!((w[0] - (1.0 - 3e-4)).abs() < 1e-9);
        assert!((w[1] - (-2.0 + 3e-4)).abs() < 1e-9);
        assert_eq!(w[2], 0.5);
        assert!(store.get(0).grad.iter().all(|&g| g == 0.0));
        assert_eq!(store.step, 1);
    }

    #[test]
    fn clipping_uses_global_norm() {
        let mut store = ParameterStore::<f64>::new();
        store.add("a", Tensor::from_vec(vec![0.0])).unwrap();
        store.add("b", Tensor::from_vec(vec![0.0])).unwrap();
        store.get_mut(0).grad = vec![3.0];
        store.get_mut(1).grad = vec![4.0];
        let cfg = AdamConfig {
            lr: 1.0,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
            clip_norm: Some(1.0),
        };
        let norm = store.adam_step(&cfg);
        assert_eq!(norm, 5.0);
        // with beta = 0, the update is g / |g| regardless of scale
        assert!((store.get(0).value.data[0] + 1.0).abs() < 1e-12);
        assert!((store.get(0).m[0] - 0.6).abs() < 1e-12);
        assert!((store.get(1).m[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParameterStore::<f32>::new();
        store.add("x", Tensor::zeros(&[2])).unwrap();
        assert!(store.add("x", Tensor::zeros(&[2])).is_err());
        assert_eq!(store.index_of("x"), Some(0));
        assert_eq!(store.num_scalars(), 2);
    }
}
