//! SGD with classic momentum and a stepwise learning-rate decay schedule.

use crate::error::{Error, Result};

/// A named trainable tensor living outside any graph. Training steps
/// register it on a fresh graph, read back the gradient, and update the
/// values in place.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub values: Vec<f64>,
    pub shape: Vec<usize>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, values: Vec<f64>, shape: Vec<usize>) -> Self {
        debug_assert_eq!(values.len(), shape.iter().product::<usize>());
        Parameter { name: name.into(), values, shape }
    }
}

/// Momentum buffers for one parameter list, in registration order.
///
/// The update is the classic convention: velocity accumulates the raw
/// gradient and the parameter moves by `lr * velocity`.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(learning_rate: f64, momentum: f64, param_lens: &[usize]) -> Self {
        OptimizerState {
            learning_rate,
            momentum,
            velocity: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn velocity(&self, i: usize) -> &[f64] {
        &self.velocity[i]
    }
}

/// One SGD step: `v' = momentum * v + g`, `p' = p - lr * v'`.
pub fn sgd_step(params: &mut [&mut Parameter], grads: &[Vec<f64>], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::ShapeMismatch(format!(
            "sgd_step: {} params, {} grads, {} velocity buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        if p.values.len() != g.len() || p.values.len() != v.len() {
            return Err(Error::ShapeMismatch(format!(
                "sgd_step: parameter {} has {} values, gradient {}, velocity {}",
                p.name,
                p.values.len(),
                g.len(),
                v.len()
            )));
        }
        for i in 0..v.len() {
            v[i] = state.momentum * v[i] + g[i];
            p.values[i] -= state.learning_rate * v[i];
        }
    }
    Ok(())
}

/// Stepwise decay: divide the base rate by `decay_ratio` every
/// `decay_every` epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub decay_ratio: f64,
    pub decay_every: u32,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { base_lr: 0.001, decay_ratio: 10.0, decay_every: 70 }
    }
}

pub fn lr_at_epoch(epoch: u32, cfg: &ScheduleConfig) -> f64 {
    cfg.base_lr / cfg.decay_ratio.powi((epoch / cfg.decay_every) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_free_step_is_plain_sgd() {
        let mut p = Parameter::new("p", vec![1.0], vec![1]);
        let mut state = OptimizerState::new(0.1, 0.0, &[1]);
        sgd_step(&mut [&mut p], &[vec![0.5]], &mut state).unwrap();
        assert_eq!(p.values[0], 1.0 - 0.1 * 0.5);
    }

    #[test]
    fn momentum_accumulates_gradient() {
        // v' = 0.9*0 + 0.5 = 0.5, p' = 1.0 - 0.1*0.5 = 0.95
        let mut p = Parameter::new("p", vec![1.0], vec![1]);
        let mut state = OptimizerState::new(0.1, 0.9, &[1]);
        sgd_step(&mut [&mut p], &[vec![0.5]], &mut state).unwrap();
        assert_eq!(state.velocity(0), &[0.5]);
        assert_eq!(p.values[0], 0.95);
    }

    #[test]
    fn zero_gradient_decays_velocity() {
        // v = 1.0, g = 0 -> v' = 0.9, p moves by lr * 0.9
        let mut p = Parameter::new("p", vec![2.0], vec![1]);
        let mut state = OptimizerState::new(0.1, 0.9, &[1]);
        state.velocity[0][0] = 1.0;
        sgd_step(&mut [&mut p], &[vec![0.0]], &mut state).unwrap();
        assert_eq!(state.velocity(0), &[0.9]);
        assert!((p.values[0] - (2.0 - 0.09)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Parameter::new("p", vec![1.0, 2.0], vec![2]);
        let mut state = OptimizerState::new(0.1, 0.9, &[2]);
        assert!(sgd_step(&mut [&mut p], &[vec![0.5]], &mut state).is_err());
    }

    #[test]
    fn schedule_steps_at_decay_boundaries() {
        let cfg = ScheduleConfig { base_lr: 0.001, decay_ratio: 10.0, decay_every: 70 };
        assert_eq!(lr_at_epoch(0, &cfg), 0.001);
        assert_eq!(lr_at_epoch(69, &cfg), 0.001);
        assert!((lr_at_epoch(70, &cfg) - 0.0001).abs() < 1e-19);
        assert!((lr_at_epoch(139, &cfg) - 0.0001).abs() < 1e-19);
        assert!((lr_at_epoch(140, &cfg) - 0.00001).abs() < 1e-20);
    }

    #[test]
    fn schedule_is_non_increasing() {
        let cfg = ScheduleConfig { base_lr: 0.01, decay_ratio: 3.0, decay_every: 5 };
        let mut prev = f64::INFINITY;
        for epoch in 0..50 {
            let lr = lr_at_epoch(epoch, &cfg);
            assert!(lr <= prev && lr > 0.0);
            prev = lr;
        }
    }
}
