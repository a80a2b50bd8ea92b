//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter moments plus the shared step counter.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamW {
    /// Optimizer with no moment buffers yet; call [`AdamW::init`] first.
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn for_store(config: AdamWConfig, store: &ParamStore) -> Self {
        let mut opt = Self::new(config);
        opt.init(store);
        opt
    }

    pub fn init(&mut self, store: &ParamStore) {
        self.first = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        self.second = self.first.clone();
        self.step = 0;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update from the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.first.len() != store.len() {
            let name = store
                .iter()
                .nth(self.first.len())
                .map_or_else(|| "<none>".to_string(), |p| p.name.clone());
            return Err(Error::UninitializedState(name));
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            if !p.trainable {
                continue;
            }
            if m.shape() != p.value.shape() {
                return Err(Error::UninitializedState(p.name.clone()));
            }
            let decay = 1.0 - c.lr * c.weight_decay;
            let g = p.grad.data();
            for (((x, gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *x *= decay;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::scalar(v)).unwrap();
        s
    }

    #[test]
    fn first_step_closed_form() {
        let mut s = scalar_store(1.0);
        s.iter_mut().next().unwrap().grad = Tensor::scalar(1.0);
        let cfg = AdamWConfig::default();
        let mut opt = AdamW::for_store(cfg.clone(), &s);
        opt.step(&mut s).unwrap();
        let expected = 1.0 - 1e-4 * 1.0 / (1.0 + cfg.eps) - 1e-4 * 0.01 * 1.0;
        let got = s.iter().next().unwrap().value.item();
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut s = scalar_store(0.37);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::for_store(cfg, &s);
        for _ in 0..10 {
            opt.step(&mut s).unwrap();
        }
        assert_eq!(s.iter().next().unwrap().value.item(), 0.37);
    }

    #[test]
    fn pure_decay_factor_per_step() {
        let mut s = scalar_store(2.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut opt = AdamW::for_store(cfg, &s);
        let mut expected = 2.0;
        for _ in 0..5 {
            opt.step(&mut s).unwrap();
            expected *= 1.0 - 0.1 * 0.5;
            assert_eq!(s.iter().next().unwrap().value.item(), expected);
        }
    }

    #[test]
    fn zero_decay_matches_adam() {
        // Plain Adam written out independently.
        let mut s = scalar_store(0.5);
        let cfg = AdamWConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::for_store(cfg.clone(), &s);
        let (mut p, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for t in 1..=20 {
            let g = (t as f64).sin();
            s.iter_mut().next().unwrap().grad = Tensor::scalar(g);
            opt.step(&mut s).unwrap();
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t));
            let vh = v / (1.0 - cfg.beta2.powi(t));
            p -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
        assert!((s.iter().next().unwrap().value.item() - p).abs() < 1e-15);
    }

    #[test]
    fn uninitialized_state_errors() {
        let mut s = scalar_store(1.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        assert!(matches!(opt.step(&mut s), Err(Error::UninitializedState(_))));
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut s = scalar_store(1.0);
        s.set_trainable("p", false);
        s.iter_mut().next().unwrap().grad = Tensor::scalar(1.0);
        let mut opt = AdamW::for_store(AdamWConfig::default(), &s);
        opt.step(&mut s).unwrap();
        assert_eq!(s.iter().next().unwrap().value.item(), 1.0);
    }

    #[test]
    fn identical_runs_are_bitwise_equal() {
        let run = || {
            let mut rng = Rng::new(5);
            let mut s = ParamStore::new();
            s.add_normal("w", &[4, 4], 1.0, &mut rng).unwrap();
            let mut opt = AdamW::for_store(AdamWConfig::default(), &s);
            for _ in 0..50 {
                for p in s.iter_mut() {
                    let g: Vec<f64> = (0..p.value.numel()).map(|_| rng.normal()).collect();
                    p.grad = Tensor::new(p.value.shape().to_vec(), g).unwrap();
                }
                opt.step(&mut s).unwrap();
            }
            s.iter()
                .flat_map(|p| p.value.data().iter().map(|x| x.to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
