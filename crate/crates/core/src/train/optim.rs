use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{ParamKind, ParamStore, Real};
use crate::{Error, Result};

/// He initialisation: weights `N(0, sqrt(2 / fan_in))`, biases and
/// batch-norm shifts zero, batch-norm scales one.
pub fn he_init<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R) {
    for p in store.params_mut() {
        match p.kind {
            ParamKind::Weight => {
                let std = (2.0 / p.fan_in.max(1) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                for v in p.value.data_mut() {
                    *v = T::lit(normal.sample(rng));
                }
            }
            ParamKind::Bias | ParamKind::BnShift => p.value.data_mut().fill(T::zero()),
            ParamKind::BnScale => p.value.data_mut().fill(T::one()),
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros: Vec<Vec<T>> = store.params().iter().map(|p| vec![T::zero(); p.value.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    /// Every parameter must have received a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if let Some(p) = store.params().iter().find(|p| !p.has_grad()) {
            return Err(Error::Invalid(format!("parameter `{}` received no gradient", p.name)));
        }
        if self.m.len() != store.len() {
            return Err(Error::Invalid("optimizer state does not match the parameter store".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = T::lit(1.0 - b1.powi(t));
        let c2 = T::lit(1.0 - b2.powi(t));
        let (b1, b2, eps, lr) = (T::lit(b1), T::lit(b2), T::lit(self.eps), T::lit(self.lr));
        for ((p, m), v) in store.params_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.grad.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p.value.data_mut()[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        store.zero_grads();
        Ok(())
    }
}

/// Step-wise learning-rate and batch-norm momentum decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub lr_init: f64,
    pub lr_decay: f64,
    pub lr_every: usize,
    pub bn_momentum_init: f64,
    pub bn_decay: f64,
    pub bn_every: usize,
    pub bn_floor: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            lr_init: 0.001,
            lr_decay: 0.7,
            lr_every: 20,
            bn_momentum_init: 0.9,
            bn_decay: 0.5,
            bn_every: 20,
            bn_floor: 0.01,
        }
    }
}

impl Schedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        self.lr_init * self.lr_decay.powi((epoch / self.lr_every.max(1)) as i32)
    }

    pub fn bn_momentum(&self, epoch: usize) -> f64 {
        (self.bn_momentum_init * self.bn_decay.powi((epoch / self.bn_every.max(1)) as i32)).max(self.bn_floor)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| x > 0.0 && x <= 1.0;
        if !(unit(self.lr_decay) && unit(self.bn_decay) && unit(self.bn_momentum_init)) {
            return Err(Error::Config("decay factors and momentum must lie in (0, 1]".into()));
        }
        if self.lr_init <= 0.0 || self.lr_every == 0 || self.bn_every == 0 {
            return Err(Error::Config("learning rate and decay periods must be positive".into()));
        }
        Ok(())
    }
}

/// Sets the learning rate and every batch-norm momentum for `epoch`.
pub fn apply_schedules<T: Real>(schedule: &Schedule, epoch: usize, opt: &mut Adam<T>, store: &mut ParamStore<T>) {
    opt.lr = schedule.lr(epoch);
    store.set_bn_momentum(T::lit(schedule.bn_momentum(epoch)));
}
