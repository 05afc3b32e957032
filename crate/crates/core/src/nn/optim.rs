use crate::error::{Error, Result};

/// Polynomial ("poly") decay: `lr0 · (1 − iter/max_iter)^power`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr0: f64,
    pub max_iter: usize,
    pub power: f64,
}

impl LrSchedule {
    pub fn poly(lr0: f64, max_iter: usize) -> Self {
        LrSchedule {
            lr0,
            max_iter,
            power: 0.9,
        }
    }

    pub fn at(&self, iter: usize) -> Result<f64> {
        poly_lr(self, iter)
    }
}

pub fn poly_lr(s: &LrSchedule, iter: usize) -> Result<f64> {
    if s.max_iter == 0 || iter > s.max_iter {
        return Err(Error::invalid(
            "poly_lr",
            format!("iteration {iter} outside [0, {}]", s.max_iter),
        ));
    }
    Ok(s.lr0 * (1.0 - iter as f64 / s.max_iter as f64).powf(s.power))
}

/// One SGD update with momentum and L2 weight decay:
/// `v ← m·v + g + wd·θ`, `θ ← θ − lr·v`.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::shape(
            "sgd_step",
            &[params.len()],
            &[grads.len(), velocity.len()],
        ));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}
