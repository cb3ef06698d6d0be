//! SGD with momentum, weight decay, gradient accumulation and a step
//! learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Params};

#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Gradients of this many iterations are averaged per update.
    pub accumulate: usize,
    /// The learning rate is divided by `lr_decay` every `lr_step` iterations.
    pub lr_step: usize,
    pub lr_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 3e-5,
            momentum: 0.9,
            weight_decay: 2e-4,
            accumulate: 10,
            lr_step: 10_000,
            lr_decay: 10.0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr {} must be finite and >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be finite and >= 0".into()));
        }
        if self.accumulate == 0 || self.lr_step == 0 {
            return Err(Error::Config("accumulate and lr_step must be >= 1".into()));
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0) {
            return Err(Error::Config("lr_decay must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate in effect at a 0-based training iteration.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        self.lr / self.lr_decay.powi((iteration / self.lr_step) as i32)
    }
}

/// Velocity and accumulation buffers, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: SgdConfig,
    velocity: Vec<Vec<f64>>,
    accum: Vec<Vec<f64>>,
    pending: usize,
    updates: usize,
}

impl OptimState {
    pub fn new(params: &Params, config: SgdConfig) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Vec<f64>> = params
            .entries()
            .iter()
            .map(|e| vec![0.0; e.values.len()])
            .collect();
        Ok(OptimState {
            config,
            velocity: zeros.clone(),
            accum: zeros,
            pending: 0,
            updates: 0,
        })
    }

    /// Adds one iteration's gradients. Parameters absent from `grads`
    /// contribute zero.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (i, acc) in self.accum.iter_mut().enumerate() {
            if let Some(g) = grads.param(crate::tensor::ParamId(i)) {
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        self.pending += 1;
    }

    /// Adds raw per-parameter gradients in parameter order.
    pub fn accumulate_raw(&mut self, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != self.accum.len()
            || grads.iter().zip(&self.accum).any(|(g, a)| g.len() != a.len())
        {
            return Err(Error::shape("accumulate", "gradients do not mirror the parameters"));
        }
        for (acc, g) in self.accum.iter_mut().zip(grads) {
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        self.pending += 1;
        Ok(())
    }

    pub fn ready(&self) -> bool {
        self.pending >= self.config.accumulate
    }

    pub fn pending(&self) -> usize {
        self.pending
    }

    /// Number of parameter updates applied so far.
    pub fn updates(&self) -> usize {
        self.updates
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }
}

/// `v <- m v - lr (g_mean + wd theta); theta <- theta + v`, then clears the
/// accumulator.
pub fn sgd_step(params: &mut Params, state: &mut OptimState, lr: f64) -> Result<()> {
    if !state.ready() {
        return Err(Error::invalid(format!(
            "sgd_step with {} of {} gradients accumulated",
            state.pending, state.config.accumulate
        )));
    }
    if params.len() != state.velocity.len() {
        return Err(Error::shape("sgd_step", "optimizer state belongs to another model"));
    }
    let inv = 1.0 / state.pending as f64;
    let (m, wd) = (state.config.momentum, state.config.weight_decay);
    let ids: Vec<_> = params.ids().collect();
    for (id, (v, acc)) in ids.into_iter().zip(state.velocity.iter_mut().zip(&mut state.accum)) {
        let theta = params.values_mut(id);
        for ((t, v), a) in theta.iter_mut().zip(v.iter_mut()).zip(acc.iter_mut()) {
            *v = m * *v - lr * (*a * inv + wd * *t);
            *t += *v;
            *a = 0.0;
        }
    }
    state.pending = 0;
    state.updates += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ConvKernel;

    fn params() -> Params {
        let mut p = Params::new();
        p.add_kernel("k", &ConvKernel::pointwise(1, 2, vec![1.0, -2.0]).unwrap());
        p.add_bias("b", vec![0.5]);
        p
    }

    fn plain(accumulate: usize) -> SgdConfig {
        SgdConfig {
            lr: 1.0,
            momentum: 0.0,
            weight_decay: 0.0,
            accumulate,
            ..Default::default()
        }
    }

    #[test]
    fn zero_gradients_leave_parameters() {
        let mut p = params();
        let before = p.clone();
        let mut s = OptimState::new(&p, plain(1)).unwrap();
        s.accumulate_raw(&[vec![0.0, 0.0], vec![0.0]]).unwrap();
        sgd_step(&mut p, &mut s, 1.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn unit_step_subtracts_gradient() {
        let mut p = params();
        let mut s = OptimState::new(&p, plain(1)).unwrap();
        s.accumulate_raw(&[vec![0.25, 1.0], vec![-0.5]]).unwrap();
        sgd_step(&mut p, &mut s, 1.0).unwrap();
        assert_eq!(p.entries()[0].values, vec![0.75, -3.0]);
        assert_eq!(p.entries()[1].values, vec![1.0]);
    }

    #[test]
    fn accumulation_averages() {
        let mut p = params();
        let mut s = OptimState::new(&p, plain(2)).unwrap();
        s.accumulate_raw(&[vec![1.0, 0.0], vec![0.0]]).unwrap();
        assert!(sgd_step(&mut p, &mut s, 1.0).is_err());
        s.accumulate_raw(&[vec![3.0, 0.0], vec![0.0]]).unwrap();
        sgd_step(&mut p, &mut s, 1.0).unwrap();
        assert_eq!(p.entries()[0].values[0], -1.0);
        assert_eq!(s.pending(), 0);
    }

    #[test]
    fn momentum_and_decay() {
        let mut p = Params::new();
        p.add_bias("b", vec![2.0]);
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.5,
            weight_decay: 0.5,
            accumulate: 1,
            ..Default::default()
        };
        let mut s = OptimState::new(&p, cfg).unwrap();
        s.accumulate_raw(&[vec![1.0]]).unwrap();
        sgd_step(&mut p, &mut s, 0.1).unwrap();
        // v = -0.1 * (1 + 1) = -0.2
        assert!((p.entries()[0].values[0] - 1.8).abs() < 1e-15);
        s.accumulate_raw(&[vec![0.0]]).unwrap();
        sgd_step(&mut p, &mut s, 0.1).unwrap();
        // v = 0.5 * -0.2 - 0.1 * 0.9 = -0.19
        assert!((p.entries()[0].values[0] - 1.61).abs() < 1e-15);
    }

    #[test]
    fn step_schedule() {
        let c = SgdConfig {
            lr: 1e-3,
            lr_step: 100,
            ..Default::default()
        };
        assert_eq!(c.lr_at(0), 1e-3);
        assert_eq!(c.lr_at(99), 1e-3);
        assert!((c.lr_at(100) - 1e-4).abs() < 1e-18);
        assert!((c.lr_at(250) - 1e-5).abs() < 1e-19);
    }
}
