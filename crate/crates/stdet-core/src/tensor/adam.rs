//! Adam optimizer with bias correction, keyed by parameter name.

use std::collections::BTreeMap;

use super::{Elem, Result, TensorError};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug)]
struct Slot<S> {
    m: Vec<S>,
    v: Vec<S>,
}

/// Textbook Adam. State is per parameter name; step count is global.
#[derive(Debug)]
pub struct Adam<S: Elem> {
    pub config: AdamConfig,
    t: u64,
    slots: BTreeMap<String, Slot<S>>,
}

impl<S: Elem> Adam<S> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            t: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    /// Advances the global step counter. Call once per optimization step,
    /// before updating parameters.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Applies one Adam update to a single named parameter.
    pub fn update(&mut self, name: &str, param: &mut [S], grad: &[S]) -> Result<()> {
        if param.len() != grad.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                detail: format!(
                    "param '{name}' has {} values, grad has {}",
                    param.len(),
                    grad.len()
                ),
            });
        }
        let slot = self.slots.entry(name.to_string()).or_insert_with(|| Slot {
            m: vec![S::ZERO; param.len()],
            v: vec![S::ZERO; param.len()],
        });
        if slot.m.len() != param.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                detail: format!("param '{name}' changed size"),
            });
        }
        let b1 = S::from_f64(self.config.beta1);
        let b2 = S::from_f64(self.config.beta2);
        let one = S::ONE;
        let bc1 = 1.0 - self.config.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.config.beta2.powi(self.t as i32);
        let lr = S::from_f64(self.config.lr);
        let eps = S::from_f64(self.config.eps);
        let ibc1 = S::from_f64(1.0 / bc1);
        let ibc2 = S::from_f64(1.0 / bc2);
        for ((p, &g), (m, v)) in param
            .iter_mut()
            .zip(grad.iter())
            .zip(slot.m.iter_mut().zip(slot.v.iter_mut()))
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let mhat = *m * ibc1;
            let vhat = *v * ibc2;
            *p -= lr * mhat / (vhat.sqrt_e() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut opt: Adam<f64> = Adam::new(AdamConfig::default());
        let mut p = vec![1.5, -0.25];
        opt.begin_step();
        opt.update("w", &mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![1.5, -0.25]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut opt: Adam<f64> = Adam::new(AdamConfig::default());
        let mut p = vec![0.0, 0.0];
        opt.begin_step();
        opt.update("w", &mut p, &[3.0, -0.7]).unwrap();
        // bias-corrected first step: delta = lr * g / (|g| + eps') ~ lr * sign(g)
        assert!((p[0] + 0.001).abs() < 1e-6);
        assert!((p[1] - 0.001).abs() < 1e-6);
    }

    #[test]
    fn converges_to_quadratic_minimum() {
        // f(x) = (x - 2)^2, minimum at 2
        let mut opt: Adam<f64> = Adam::new(AdamConfig {
            lr: 0.3,
            ..AdamConfig::default()
        });
        let mut p = vec![0.0];
        for _ in 0..100 {
            let g = 2.0 * (p[0] - 2.0);
            opt.begin_step();
            opt.update("x", &mut p, &[g]).unwrap();
        }
        assert!((p[0] - 2.0).abs() < 1e-3, "got {}", p[0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut opt: Adam<f64> = Adam::new(AdamConfig::default());
        let mut p = vec![0.0; 3];
        opt.begin_step();
        assert!(opt.update("w", &mut p, &[0.0; 2]).is_err());
    }
}
