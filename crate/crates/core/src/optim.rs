//! Adam with bias correction and learning-rate schedules.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient. Off unless configured.
    pub weight_decay: f64,
    /// Global gradient-norm clip applied by [`Adam::step`]. Off unless set.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            max_grad_norm: None,
        }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize, cfg: &AdamConfig) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }
}

/// One Adam update of `param` in place. The gradient is checked for
/// non-finite entries before anything is modified.
pub fn adam_step<T: Real>(
    param: &mut Tensor<T>,
    grad: &[T],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if grad.len() != param.len() || state.m.len() != param.len() {
        return Err(Error::Shape {
            op: "adam_step",
            lhs: param.shape().to_vec(),
            rhs: vec![grad.len()],
        });
    }
    if !(lr >= 0.0) {
        return Err(contract("learning rate must be non-negative"));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!(
            "gradient for tensor of shape {:?} has non-finite entries",
            param.shape()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let b1 = T::of(state.beta1);
    let b2 = T::of(state.beta2);
    let one = T::one();
    let bc1 = T::of(1.0 - state.beta1.powi(t));
    let bc2 = T::of(1.0 - state.beta2.powi(t));
    let lr = T::of(lr);
    let eps = T::of(state.eps);
    let data = param.data_mut();
    for i in 0..data.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (one - b1) * g;
        state.v[i] = b2 * state.v[i] + (one - b2) * g * g;
        let mh = state.m[i] / bc1;
        let vh = state.v[i] / bc2;
        data[i] = data[i] - lr * mh / (vh.sqrt() + eps);
    }
    Ok(())
}

/// Adam over a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    states: Vec<AdamState<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig, lens: &[usize]) -> Self {
        Self {
            cfg,
            states: lens.iter().map(|&n| AdamState::new(n, &cfg)).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.states.first().map(|s| s.t).unwrap_or(0)
    }

    /// Applies one step to every parameter. `grads[i]` pairs with
    /// `params[i]`; a `None` gradient counts as all zeros.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &mut [Option<Vec<T>>], lr: f64) -> Result<()> {
        if params.len() != self.states.len() || grads.len() != params.len() {
            return Err(contract("optimizer parameter list changed between steps"));
        }
        for (p, g) in params.iter().zip(grads.iter_mut()) {
            let g = g.get_or_insert_with(|| vec![T::zero(); p.len()]);
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "gradient for tensor of shape {:?} has non-finite entries",
                    p.shape()
                )));
            }
            if self.cfg.weight_decay != 0.0 {
                let wd = T::of(self.cfg.weight_decay);
                for (gi, &pi) in g.iter_mut().zip(p.data()) {
                    *gi = *gi + wd * pi;
                }
            }
        }
        if let Some(max) = self.cfg.max_grad_norm {
            let sq: f64 = grads
                .iter()
                .flatten()
                .flat_map(|g| g.iter())
                .map(|x| x.f64() * x.f64())
                .sum();
            let norm = sq.sqrt();
            if norm > max {
                let s = T::of(max / norm);
                for g in grads.iter_mut().flatten() {
                    g.iter_mut().for_each(|x| *x = *x * s);
                }
            }
        }
        for ((p, g), st) in params.iter_mut().zip(grads.iter()).zip(self.states.iter_mut()) {
            adam_step(p, g.as_deref().unwrap_or(&[]), st, lr)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr0: f64,
    pub total_steps: u64,
    pub kind: ScheduleKind,
}

impl LrSchedule {
    pub fn cosine(lr0: f64, total_steps: u64) -> Result<Self> {
        Self::new(lr0, total_steps, ScheduleKind::Cosine)
    }

    pub fn new(lr0: f64, total_steps: u64, kind: ScheduleKind) -> Result<Self> {
        if !(lr0 > 0.0) || total_steps == 0 {
            return Err(contract("schedule needs lr0 > 0 and at least one step"));
        }
        Ok(Self {
            lr0,
            total_steps,
            kind,
        })
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        match self.kind {
            ScheduleKind::Cosine => cosine_lr(step, self),
            ScheduleKind::Constant if step <= self.total_steps => Ok(self.lr0),
            ScheduleKind::Constant => Err(contract("schedule step out of range")),
        }
    }
}

/// `lr0 · (1 + cos(π·step/total)) / 2`, floored at zero.
pub fn cosine_lr(step: u64, sched: &LrSchedule) -> Result<f64> {
    if step > sched.total_steps {
        return Err(contract("schedule step out of range"));
    }
    let frac = step as f64 / sched.total_steps as f64;
    let lr = sched.lr0 * (1.0 + Float::cos(PI * frac)) / 2.0;
    Ok(lr.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = Tensor::<f64>::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(3, &AdamConfig::default());
        adam_step(&mut p, &[0.0; 3], &mut st, 1e-3).unwrap();
        assert_eq!(p, before);
        assert!(st.m.iter().chain(&st.v).all(|&x| x == 0.0));
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        // m̂ = g and v̂ = g² after one step, so the update is lr·g/(|g|+eps).
        let mut p = Tensor::<f64>::new(&[2], vec![0.0, 0.0]).unwrap();
        let mut st = AdamState::new(2, &AdamConfig::default());
        adam_step(&mut p, &[0.3, -7.0], &mut st, 1e-2).unwrap();
        let expect0 = -1e-2 * 0.3 / (0.3 + 1e-8);
        let expect1 = 1e-2 * 7.0 / (7.0 + 1e-8);
        assert!((p.data()[0] - expect0).abs() < 1e-15);
        assert!((p.data()[1] - expect1).abs() < 1e-15);
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        let mut w = Tensor::<f64>::new(&[1], vec![0.0]).unwrap();
        let mut st = AdamState::new(1, &AdamConfig::default());
        for _ in 0..200 {
            let g = 2.0 * (w.data()[0] - 3.0);
            adam_step(&mut w, &[g], &mut st, 1e-1).unwrap();
        }
        assert!((w.data()[0] - 3.0).abs() < 1e-2, "w = {}", w.data()[0]);
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let mut p = Tensor::<f64>::new(&[2], vec![1.0, 1.0]).unwrap();
        let mut st = AdamState::new(2, &AdamConfig::default());
        let err = adam_step(&mut p, &[f64::NAN, 0.0], &mut st, 1e-3).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(p.data(), &[1.0, 1.0]);
        assert_eq!(st.t, 0);
    }

    #[test]
    fn cosine_endpoints() {
        let s = LrSchedule::cosine(1e-3, 100).unwrap();
        assert_eq!(cosine_lr(0, &s).unwrap(), 1e-3);
        assert_eq!(cosine_lr(100, &s).unwrap(), 0.0);
        assert!((cosine_lr(50, &s).unwrap() - 5e-4).abs() < 1e-18);
        assert!(cosine_lr(101, &s).is_err());
    }

    #[test]
    fn cosine_is_non_increasing_and_bounded() {
        let s = LrSchedule::cosine(0.7, 37).unwrap();
        let mut prev = f64::INFINITY;
        for step in 0..=37 {
            let lr = cosine_lr(step, &s).unwrap();
            assert!(lr <= prev && (0.0..=0.7).contains(&lr));
            prev = lr;
        }
    }
}
