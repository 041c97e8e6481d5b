use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{param_err, Error, Result};

/// A trainable tensor with its gradient and AdamW moments.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
    pub moment1: Matrix,
    pub moment2: Matrix,
}

impl Param {
    pub fn new(value: Matrix) -> Self {
        let z = Matrix::zeros_like(&value);
        Self {
            grad: z.clone(),
            moment1: z.clone(),
            moment2: z,
            value,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: Some(1.0),
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return param_err("lr", format!("must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return param_err("betas", format!("must lie in [0, 1), got ({}, {})", self.beta1, self.beta2));
        }
        if self.weight_decay < 0.0 {
            return param_err("weight_decay", "must be non-negative");
        }
        Ok(())
    }
}

/// One decoupled-weight-decay Adam update of a single tensor; `step` is
/// 1-based and drives bias correction.
pub fn adamw_update(
    value: &mut Matrix,
    grad: &Matrix,
    m1: &mut Matrix,
    m2: &mut Matrix,
    cfg: &AdamWConfig,
    step: u64,
    grad_scale: f64,
) {
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    let v = value.data_mut();
    let g = grad.data();
    let a = m1.data_mut();
    let b = m2.data_mut();
    for i in 0..v.len() {
        let gi = g[i] * grad_scale;
        a[i] = cfg.beta1 * a[i] + (1.0 - cfg.beta1) * gi;
        b[i] = cfg.beta2 * b[i] + (1.0 - cfg.beta2) * gi * gi;
        let mhat = a[i] / bc1;
        let vhat = b[i] / bc2;
        v[i] = v[i] * decay - cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}

fn clip_scale<'a>(grads: impl Iterator<Item = &'a Matrix>, clip: Option<f64>) -> Result<f64> {
    let mut norm_sq = 0.0;
    for (i, g) in grads.enumerate() {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of tensor #{i}")));
        }
        norm_sq += g.frobenius_sq();
    }
    Ok(match clip {
        Some(c) if norm_sq.sqrt() > c => c / norm_sq.sqrt(),
        _ => 1.0,
    })
}

/// AdamW over a slice of [`Param`]s. Aborts without touching any value if a
/// gradient is non-finite.
pub fn adamw_step(params: &mut [Param], cfg: &AdamWConfig, step: u64) -> Result<()> {
    let scale = clip_scale(params.iter().map(|p| &p.grad), cfg.grad_clip)?;
    for p in params.iter_mut() {
        adamw_update(&mut p.value, &p.grad, &mut p.moment1, &mut p.moment2, cfg, step, scale);
    }
    Ok(())
}

/// AdamW state for tensors owned elsewhere (e.g. a model's weight list).
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    moments: Vec<(Matrix, Matrix)>,
    step: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let moments = shapes
            .into_iter()
            .map(|(r, c)| (Matrix::zeros(r, c), Matrix::zeros(r, c)))
            .collect();
        Self { cfg, moments, step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, values: &mut [Matrix], grads: &[Matrix]) -> Result<()> {
        if values.len() != self.moments.len() || grads.len() != values.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, got {} values / {} grads",
                self.moments.len(),
                values.len(),
                grads.len()
            )));
        }
        let scale = clip_scale(grads.iter(), self.cfg.grad_clip)?;
        self.step += 1;
        for ((v, g), (m1, m2)) in values.iter_mut().zip(grads).zip(self.moments.iter_mut()) {
            adamw_update(v, g, m1, m2, &self.cfg, self.step, scale);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_decay() -> AdamWConfig {
        AdamWConfig {
            weight_decay: 0.0,
            grad_clip: None,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut ps = vec![Param::new(Matrix::from_rows(&[[1.0, -2.0]]))];
        for step in 1..=5 {
            adamw_step(&mut ps, &no_decay(), step).unwrap();
        }
        assert_eq!(ps[0].value, Matrix::from_rows(&[[1.0, -2.0]]));
    }

    #[test]
    fn one_step_on_square_descends() {
        let mut ps = vec![Param::new(Matrix::from_rows(&[[1.0]]))];
        let f = |w: f64| w * w;
        let before = f(ps[0].value.get(0, 0));
        let g = 2.0 * ps[0].value.get(0, 0);
        ps[0].grad.set(0, 0, g);
        adamw_step(&mut ps, &no_decay(), 1).unwrap();
        assert!(f(ps[0].value.get(0, 0)) < before);
    }

    #[test]
    fn hundred_steps_are_bit_reproducible() {
        let run = || {
            let mut rng = crate::ndcompute::RngState::new(17);
            let init: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let mut ps = vec![Param::new(Matrix::from_vec(2, 3, init).unwrap())];
            let cfg = AdamWConfig {
                weight_decay: 0.01,
                ..AdamWConfig::default()
            };
            for step in 1..=100 {
                let w = ps[0].value.clone();
                for (g, x) in ps[0].grad.data_mut().iter_mut().zip(w.data()) {
                    *g = 2.0 * x + rng.normal() * 0.1;
                }
                adamw_step(&mut ps, &cfg, step).unwrap();
            }
            ps.remove(0).value
        };
        let a = run();
        let b = run();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn non_finite_gradient_aborts_before_update() {
        let mut ps = vec![Param::new(Matrix::from_rows(&[[1.0, 1.0]]))];
        ps[0].grad.set(0, 1, f64::NAN);
        let err = adamw_step(&mut ps, &no_decay(), 1).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(ps[0].value, Matrix::from_rows(&[[1.0, 1.0]]));
    }

    #[test]
    fn clipping_bounds_the_effective_gradient() {
        let mut opt = AdamW::new(
            AdamWConfig {
                grad_clip: Some(1.0),
                ..no_decay()
            },
            [(1, 1)],
        );
        let mut v = vec![Matrix::from_rows(&[[0.0]])];
        opt.step(&mut v, &[Matrix::from_rows(&[[1e6]])]).unwrap();
        // Adam's first step moves by ~lr regardless, but must stay finite.
        assert!((v[0].get(0, 0) + 1e-3).abs() < 1e-6);
    }
}
