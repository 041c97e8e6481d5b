//! Losses over logit rows, returning the value together with the gradient
//! with respect to the (student) logits.

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::ops::{log_softmax_into, softmax_into};
use crate::error::{param_err, Error, Result};

#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    /// Same shape as the logits the loss was computed on.
    pub grad: Matrix,
}

/// `-Σ_{t ∈ mask} log softmax(logits[t])[targets[t]]`, summed (not averaged).
///
/// Rows outside `mask` receive an exactly zero gradient; an empty mask gives
/// a zero loss.
pub fn masked_cross_entropy(logits: &Matrix, targets: &[u32], mask: &[usize]) -> Result<LossGrad> {
    let (t_len, vocab) = logits.shape();
    if targets.len() != t_len {
        return Err(Error::Dimension {
            op: "masked_cross_entropy(targets)",
            lhs: logits.shape(),
            rhs: (targets.len(), 1),
        });
    }
    let mut grad = Matrix::zeros(t_len, vocab);
    let mut loss = 0.0;
    for &t in mask {
        if t >= t_len {
            return Err(Error::Input(format!("masked position {t} outside length {t_len}")));
        }
        let target = targets[t] as usize;
        if target >= vocab {
            return Err(Error::Input(format!(
                "target {target} at position {t} outside vocabulary {vocab}"
            )));
        }
        let g = grad.row_mut(t);
        log_softmax_into(logits.row(t), g);
        loss -= g[target];
        g.iter_mut().for_each(|v| *v = v.exp());
        g[target] -= 1.0;
    }
    Ok(LossGrad { loss, grad })
}

/// Which argument of the KL divergence the student occupies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KlDirection {
    /// `KL(student ‖ teacher)`, mode-seeking.
    #[default]
    Reverse,
    /// `KL(teacher ‖ student)`, mean-seeking.
    Forward,
}

impl std::str::FromStr for KlDirection {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "reverse" => Ok(Self::Reverse),
            "forward" => Ok(Self::Forward),
            other => Err(format!("unknown KL direction `{other}` (reverse|forward)")),
        }
    }
}

/// Temperature-scaled KL between row distributions, `τ²/n · Σ_rows KL`.
///
/// Reverse: gradient at logit `i` is `τ/n · p_s,i (log p_s,i − log p_t,i − KL)`,
/// i.e. weighted by the student's own probabilities.
/// Forward: gradient is `τ/n · (p_s,i − p_t,i)`, weighted by the teacher.
pub fn kl_rows(
    student: &Matrix,
    teacher: &Matrix,
    tau: f64,
    direction: KlDirection,
) -> Result<LossGrad> {
    if !(tau > 0.0) || !tau.is_finite() {
        return param_err("tau", format!("temperature must be positive, got {tau}"));
    }
    if student.shape() != teacher.shape() {
        return Err(Error::Dimension {
            op: "kl_rows",
            lhs: student.shape(),
            rhs: teacher.shape(),
        });
    }
    let (n, vocab) = student.shape();
    let mut grad = Matrix::zeros(n, vocab);
    if n == 0 {
        return Ok(LossGrad { loss: 0.0, grad });
    }
    let mut zs = vec![0.0; vocab];
    let mut zt = vec![0.0; vocab];
    let mut ls = vec![0.0; vocab];
    let mut lt = vec![0.0; vocab];
    let mut ps = vec![0.0; vocab];
    let mut pt = vec![0.0; vocab];
    let row_scale = tau / n as f64;
    let mut total = 0.0;
    for r in 0..n {
        for c in 0..vocab {
            zs[c] = student.get(r, c) / tau;
            zt[c] = teacher.get(r, c) / tau;
        }
        log_softmax_into(&zs, &mut ls);
        log_softmax_into(&zt, &mut lt);
        softmax_into(&zs, &mut ps);
        softmax_into(&zt, &mut pt);
        let g = grad.row_mut(r);
        match direction {
            KlDirection::Reverse => {
                let kl: f64 = (0..vocab).map(|c| ps[c] * (ls[c] - lt[c])).sum();
                total += kl;
                for c in 0..vocab {
                    g[c] = row_scale * ps[c] * (ls[c] - lt[c] - kl);
                }
            }
            KlDirection::Forward => {
                let kl: f64 = (0..vocab).map(|c| pt[c] * (lt[c] - ls[c])).sum();
                total += kl;
                for c in 0..vocab {
                    g[c] = row_scale * (ps[c] - pt[c]);
                }
            }
        }
    }
    Ok(LossGrad {
        loss: tau * tau * total / n as f64,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcompute::RngState;
    use approx::assert_abs_diff_eq;

    fn random(rows: usize, cols: usize, scale: f64, rng: &mut RngState) -> Matrix {
        let data = (0..rows * cols).map(|_| scale * rng.normal()).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let logits = Matrix::from_rows(&[[0.0, 800.0, 0.0]]);
        let out = masked_cross_entropy(&logits, &[1], &[0]).unwrap();
        assert_abs_diff_eq!(out.loss, 0.0, epsilon = 1e-300);
    }

    #[test]
    fn uniform_logits_give_ln_vocab() {
        let logits = Matrix::zeros(2, 4);
        let out = masked_cross_entropy(&logits, &[3, 0], &[1]).unwrap();
        assert_abs_diff_eq!(out.loss, 4.0f64.ln(), epsilon = 1e-14);
        assert_abs_diff_eq!(out.loss, 1.38629, epsilon = 1e-5);
    }

    #[test]
    fn unmasked_rows_have_exactly_zero_gradient() {
        let mut rng = RngState::new(9);
        let logits = random(5, 6, 2.0, &mut rng);
        let out = masked_cross_entropy(&logits, &[0, 1, 2, 3, 4], &[1, 3]).unwrap();
        for r in [0, 2, 4] {
            assert!(out.grad.row(r).iter().all(|&g| g == 0.0));
        }
        assert!(out.grad.row(1).iter().any(|&g| g != 0.0));
    }

    #[test]
    fn empty_mask_is_zero_with_zero_gradient() {
        let logits = Matrix::filled(3, 4, 1.7);
        let out = masked_cross_entropy(&logits, &[0, 0, 0], &[]).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn out_of_range_target_is_input_error() {
        let logits = Matrix::zeros(1, 4);
        assert!(matches!(
            masked_cross_entropy(&logits, &[4], &[0]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn kl_of_identical_rows_is_zero() {
        let mut rng = RngState::new(4);
        let z = random(3, 5, 3.0, &mut rng);
        for dir in [KlDirection::Reverse, KlDirection::Forward] {
            let out = kl_rows(&z, &z, 2.0, dir).unwrap();
            assert_abs_diff_eq!(out.loss, 0.0, epsilon = 1e-14);
            assert!(out.grad.data().iter().all(|g| g.abs() < 1e-15));
        }
    }

    #[test]
    fn kl_rejects_non_positive_tau() {
        let z = Matrix::zeros(1, 2);
        assert!(matches!(
            kl_rows(&z, &z, 0.0, KlDirection::Reverse),
            Err(Error::Parameter { name: "tau", .. })
        ));
    }

    /// Central-difference oracle on the scalar loss.
    fn fd_grad(s: &Matrix, t: &Matrix, tau: f64, dir: KlDirection) -> Matrix {
        let h = 1e-6;
        let mut g = Matrix::zeros_like(s);
        for i in 0..s.data().len() {
            let mut p = s.clone();
            p.data_mut()[i] += h;
            let mut m = s.clone();
            m.data_mut()[i] -= h;
            let lp = kl_rows(&p, t, tau, dir).unwrap().loss;
            let lm = kl_rows(&m, t, tau, dir).unwrap().loss;
            g.data_mut()[i] = (lp - lm) / (2.0 * h);
        }
        g
    }

    #[test]
    fn kl_gradients_match_finite_differences() {
        let mut rng = RngState::new(11);
        let mut worst: f64 = 0.0;
        for _ in 0..10 {
            let s = random(2, 5, 1.5, &mut rng);
            let t = random(2, 5, 1.5, &mut rng);
            for dir in [KlDirection::Reverse, KlDirection::Forward] {
                let an = kl_rows(&s, &t, 2.0, dir).unwrap().grad;
                let fd = fd_grad(&s, &t, 2.0, dir);
                for (a, n) in an.data().iter().zip(fd.data()) {
                    let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-4);
                    worst = worst.max(rel);
                }
            }
        }
        assert!(worst < 1e-6, "max relative error {worst}");
    }

    #[test]
    fn reverse_gradient_is_weighted_by_student_probability() {
        // Shrinking the student's mass on a coordinate shrinks its reverse-KL
        // gradient there proportionally; forward KL keeps a teacher-sized pull.
        let t = Matrix::from_rows(&[[2.0, 0.0, 0.0]]);
        let s = Matrix::from_rows(&[[0.0, 0.0, -30.0]]);
        let rev = kl_rows(&s, &t, 1.0, KlDirection::Reverse).unwrap().grad;
        let fwd = kl_rows(&s, &t, 1.0, KlDirection::Forward).unwrap().grad;
        assert!(rev.get(0, 2).abs() < 1e-10);
        assert!(fwd.get(0, 2).abs() > 0.05);
    }

    proptest::proptest! {
        #[test]
        fn kl_is_non_negative(
            s in proptest::collection::vec(-8.0f64..8.0, 6),
            t in proptest::collection::vec(-8.0f64..8.0, 6),
            tau in 0.25f64..4.0,
        ) {
            let s = Matrix::from_vec(2, 3, s).unwrap();
            let t = Matrix::from_vec(2, 3, t).unwrap();
            for dir in [KlDirection::Reverse, KlDirection::Forward] {
                let out = kl_rows(&s, &t, tau, dir).unwrap();
                proptest::prop_assert!(out.loss >= -1e-12);
            }
        }
    }
}
