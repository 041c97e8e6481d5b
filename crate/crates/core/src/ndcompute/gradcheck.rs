use serde::Serialize;

use super::matrix::Matrix;
use super::rng::RngState;
use crate::error::{param_err, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference half step, within `[1e-7, 1e-3]`.
    pub epsilon: f64,
    /// Coordinates sampled per tensor (all of them if the tensor is smaller).
    pub coords_per_tensor: usize,
    pub seed: u64,
    /// Denominator floor of the relative error. Below this magnitude the
    /// comparison degrades to an absolute one scaled by `1 / floor`.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            coords_per_tensor: 8,
            seed: 0,
            floor: 1e-4,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckEntry {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
    pub worst: Option<GradCheckEntry>,
}

/// Compares `analytic` against central differences of `loss` at sampled
/// coordinates of `params`. `params` is perturbed in place and restored
/// bit-exactly before returning.
pub fn grad_check<F>(
    params: &mut [Matrix],
    analytic: &[Matrix],
    mut loss: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Matrix]) -> f64,
{
    if !(1e-7..=1e-3).contains(&cfg.epsilon) {
        return param_err("epsilon", format!("must lie in [1e-7, 1e-3], got {}", cfg.epsilon));
    }
    if analytic.len() != params.len() {
        return param_err("analytic", "one gradient tensor per parameter tensor required");
    }
    let mut rng = RngState::new(cfg.seed);
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        max_abs_analytic: 0.0,
        max_abs_numeric: 0.0,
        worst: None,
    };
    for ti in 0..params.len() {
        let len = params[ti].data().len();
        let picks = if len <= cfg.coords_per_tensor {
            (0..len).collect()
        } else {
            rng.choose_distinct(len, cfg.coords_per_tensor)
        };
        for idx in picks {
            let orig = params[ti].data()[idx];
            params[ti].data_mut()[idx] = orig + cfg.epsilon;
            let up = loss(params);
            params[ti].data_mut()[idx] = orig - cfg.epsilon;
            let down = loss(params);
            params[ti].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * cfg.epsilon);
            let a = analytic[ti].data()[idx];
            let abs_err = (a - numeric).abs();
            let rel_err = abs_err / a.abs().max(numeric.abs()).max(cfg.floor);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs_err);
            report.max_abs_analytic = report.max_abs_analytic.max(a.abs());
            report.max_abs_numeric = report.max_abs_numeric.max(numeric.abs());
            if report.worst.is_none() || rel_err > report.max_rel_err {
                report.max_rel_err = rel_err;
                report.worst = Some(GradCheckEntry {
                    tensor: ti,
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_err,
                });
            }
        }
    }
    Ok(report)
}
