//! Alignment objectives and their gradients with respect to network outputs.
//!
//! Per-sample losses:
//!
//! - pairwise: `‖new − h‖²`
//! - discriminative: label-smoothed cross entropy of the frozen classifier
//!   head's logits on `h`
//! - uncertainty weighting: `exp(−s)·L + s/λ` with `s = log σ²`
//!
//! Batch objectives are arithmetic means of the per-sample values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    L2,
    Disc,
    L2PlusDisc,
}

fn default_eps() -> f64 {
    0.1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "default_eps")]
    pub label_smoothing_eps: f64,
    /// Weight of `log σ²` is `1/lambda`. `None` means `1/d`.
    #[serde(default)]
    pub lambda: Option<f64>,
    pub loss_kind: LossKind,
    pub uncertainty: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            label_smoothing_eps: default_eps(),
            lambda: None,
            loss_kind: LossKind::L2PlusDisc,
            uncertainty: true,
        }
    }
}

impl LossConfig {
    /// The pairwise-only objective without uncertainty.
    pub fn l2_baseline() -> Self {
        Self {
            loss_kind: LossKind::L2,
            uncertainty: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.label_smoothing_eps) {
            return Err(Error::config("label_smoothing_eps", "must be in [0, 1)"));
        }
        if let Some(l) = self.lambda {
            if !(l.is_finite() && l > 0.0) {
                return Err(Error::config("lambda", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn lambda_for_dim(&self, dim: usize) -> f64 {
        self.lambda.unwrap_or(1.0 / dim as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Dimension {
            expected: a,
            got: b,
        });
    }
    Ok(())
}

/// `‖new_feat − h_out‖²` and its gradient `2(h_out − new_feat)`.
pub fn loss_l2(h_out: &[f64], new_feat: &[f64]) -> Result<LossGrad> {
    check_dims(new_feat.len(), h_out.len())?;
    let mut value = 0.0;
    let grad = h_out
        .iter()
        .zip(new_feat)
        .map(|(h, n)| {
            let e = h - n;
            value += e * e;
            2.0 * e
        })
        .collect();
    Ok(LossGrad { value, grad })
}

/// Softmax probabilities, the max logit, and `log Σ exp(z − max)`.
///
/// The log term is computed as `ln_1p` of the non-max mass so that nearly
/// one-hot logits keep full relative precision.
pub fn softmax(logits: &[f64]) -> (Vec<f64>, f64, f64) {
    let (arg, max) =
        logits
            .iter()
            .copied()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, z)| if z > acc.1 { (i, z) } else { acc },
            );
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let rest: f64 = exps
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, e)| e)
        .sum();
    let sum = 1.0 + rest;
    (
        exps.into_iter().map(|e| e / sum).collect(),
        max,
        rest.ln_1p(),
    )
}

/// Cross entropy against the smoothed target `(1−eps)·onehot + eps/k`.
pub fn loss_disc(logits: &[f64], label: usize, eps: f64) -> Result<LossGrad> {
    let k = logits.len();
    if label >= k {
        return Err(Error::invalid(format!(
            "label {label} out of range for {k} classes"
        )));
    }
    let (probs, max, log_sum) = softmax(logits);
    let uniform = eps / k as f64;
    let mut value = 0.0;
    let grad = probs
        .iter()
        .zip(logits)
        .enumerate()
        .map(|(j, (p, z))| {
            let t = if j == label {
                1.0 - eps + uniform
            } else {
                uniform
            };
            value += t * (log_sum - (z - max));
            p - t
        })
        .collect();
    Ok(LossGrad { value, grad })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedLoss {
    pub value: f64,
    pub l2: f64,
    pub disc: f64,
    /// Gradient reaching `h_out` directly (the pairwise term).
    pub grad_h: Vec<f64>,
    /// Gradient with respect to the logits (the discriminative term).
    pub grad_logits: Vec<f64>,
}

/// Sum of the enabled component losses, with unit weights.
pub fn loss_combined(
    h_out: &[f64],
    new_feat: &[f64],
    logits: &[f64],
    label: usize,
    cfg: &LossConfig,
) -> Result<CombinedLoss> {
    let use_l2 = cfg.loss_kind != LossKind::Disc;
    let use_disc = cfg.loss_kind != LossKind::L2;
    let (l2, grad_h) = if use_l2 {
        let r = loss_l2(h_out, new_feat)?;
        (r.value, r.grad)
    } else {
        check_dims(new_feat.len(), h_out.len())?;
        (0.0, vec![0.0; h_out.len()])
    };
    let (disc, grad_logits) = if use_disc {
        let r = loss_disc(logits, label, cfg.label_smoothing_eps)?;
        (r.value, r.grad)
    } else {
        (0.0, vec![0.0; logits.len()])
    };
    Ok(CombinedLoss {
        value: l2 + disc,
        l2,
        disc,
        grad_h,
        grad_logits,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertainLoss {
    pub value: f64,
    pub d_base: f64,
    pub d_log_var: f64,
}

/// `exp(−s)·base + s/λ` where `s = log σ²`.
pub fn loss_uncertain(base: f64, log_var: f64, lambda: f64) -> Result<UncertainLoss> {
    if !base.is_finite() || !log_var.is_finite() || !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::invalid(format!(
            "non-finite uncertainty loss inputs (base {base}, s {log_var}, lambda {lambda})"
        )));
    }
    let w = (-log_var).exp();
    Ok(UncertainLoss {
        value: w * base + log_var / lambda,
        d_base: w,
        d_log_var: -w * base + 1.0 / lambda,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fd<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], i: usize) -> f64 {
        let h = 1e-5;
        let mut up = x.to_vec();
        up[i] += h;
        let mut down = x.to_vec();
        down[i] -= h;
        (f(&up) - f(&down)) / (2.0 * h)
    }

    #[test]
    fn l2_hand_values() {
        let r = loss_l2(&[0.0, 0.0], &[3.0, 4.0]).unwrap();
        assert_eq!(r.value, 25.0);
        assert_eq!(r.grad, vec![-6.0, -8.0]);
        let same = loss_l2(&[1.5, -2.0], &[1.5, -2.0]).unwrap();
        assert_eq!(same.value, 0.0);
        assert!(same.grad.iter().all(|&g| g == 0.0));
        assert!(loss_l2(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn disc_uniform_logits_give_log_k() {
        for &eps in &[0.0, 0.1, 0.5] {
            for label in 0..5 {
                let r = loss_disc(&[0.3; 5], label, eps).unwrap();
                assert!((r.value - 5f64.ln()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn disc_two_class_closed_form() {
        let r = loss_disc(&[10.0, -10.0], 0, 0.0).unwrap();
        let softplus = (-20f64).exp().ln_1p();
        assert!((r.value - softplus).abs() < 1e-18);
        assert!((r.value - 2.06e-9).abs() < 1e-11);
    }

    #[test]
    fn disc_is_stable_for_huge_logits() {
        let r = loss_disc(&[1e4, -1e4, 0.0], 1, 0.1).unwrap();
        assert!(r.value.is_finite());
        assert!(r.grad.iter().all(|g| g.is_finite()));
        assert!(loss_disc(&[0.0, 1.0], 2, 0.0).is_err());
    }

    #[test]
    fn combined_reduces_to_components() {
        let cfg = LossConfig::default();
        let r = loss_combined(&[1.0, 2.0], &[1.0, 2.0], &[0.0; 4], 2, &cfg).unwrap();
        assert!((r.value - 4f64.ln()).abs() < 1e-12);

        let l2cfg = LossConfig::l2_baseline();
        let h = [0.5, -1.0, 2.0];
        let n = [1.0, 1.0, -1.0];
        let r = loss_combined(&h, &n, &[1.0, 2.0], 1, &l2cfg).unwrap();
        let l2 = loss_l2(&h, &n).unwrap();
        assert_eq!(r.value, l2.value);
        assert_eq!(r.grad_h, l2.grad);
        assert!(r.grad_logits.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn uncertain_at_unit_variance() {
        let r = loss_uncertain(3.0, 0.0, 0.25).unwrap();
        assert_eq!(r.value, 3.0);
        assert_eq!(r.d_log_var, 4.0 - 3.0);
        assert_eq!(r.d_base, 1.0);
    }

    #[test]
    fn uncertain_stationary_point_is_lambda_times_base() {
        let (base, lambda) = (2.5f64, 0.125f64);
        let s_star = (lambda * base).ln();
        let r = loss_uncertain(base, s_star, lambda).unwrap();
        assert!(r.d_log_var.abs() < 1e-12);
        // Decreasing before, increasing after.
        assert!(
            loss_uncertain(base, s_star - 0.5, lambda)
                .unwrap()
                .d_log_var
                < 0.0
        );
        assert!(
            loss_uncertain(base, s_star + 0.5, lambda)
                .unwrap()
                .d_log_var
                > 0.0
        );
        assert!(loss_uncertain(f64::NAN, 0.0, 1.0).is_err());
    }

    #[test]
    fn random_instances_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let d = rng.random_range(1..8);
            let k = rng.random_range(2..7);
            let h: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let n: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let z: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
            let label = rng.random_range(0..k);
            let eps = rng.random_range(0.0..0.5);

            let l2 = loss_l2(&h, &n).unwrap();
            for i in 0..d {
                let g = fd(|x| loss_l2(x, &n).unwrap().value, &h, i);
                assert!((g - l2.grad[i]).abs() < 1e-8);
            }
            let disc = loss_disc(&z, label, eps).unwrap();
            for i in 0..k {
                let g = fd(|x| loss_disc(x, label, eps).unwrap().value, &z, i);
                assert!((g - disc.grad[i]).abs() < 1e-8);
            }
            let cfg = LossConfig {
                label_smoothing_eps: eps,
                ..LossConfig::default()
            };
            let c = loss_combined(&h, &n, &z, label, &cfg).unwrap();
            assert!((c.value - (l2.value + disc.value)).abs() < 1e-12);

            let base = rng.random_range(0.0..10.0);
            let s = rng.random_range(-3.0..3.0);
            let lambda = rng.random_range(0.05..2.0);
            let u = loss_uncertain(base, s, lambda).unwrap();
            let gb = fd(
                |x| loss_uncertain(x[0], s, lambda).unwrap().value,
                &[base],
                0,
            );
            let gs = fd(
                |x| loss_uncertain(base, x[0], lambda).unwrap().value,
                &[s],
                0,
            );
            assert!((gb - u.d_base).abs() < 1e-8);
            assert!((gs - u.d_log_var).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn l2_is_nonnegative_and_zero_only_at_equality(
            h in proptest::collection::vec(-10.0f64..10.0, 1..6),
            shift in proptest::collection::vec(-1.0f64..1.0, 6),
        ) {
            let n: Vec<f64> = h.iter().zip(&shift).map(|(a, b)| a + b).collect();
            let v = loss_l2(&h, &n).unwrap().value;
            prop_assert!(v >= 0.0);
            prop_assert_eq!(v == 0.0, h == n);
        }

        #[test]
        fn disc_finite_for_large_logits(
            z in proptest::collection::vec(-1e4f64..1e4, 2..10),
            eps in 0.0f64..0.99,
        ) {
            let r = loss_disc(&z, 0, eps).unwrap();
            prop_assert!(r.value.is_finite() && r.value >= 0.0);
        }

        #[test]
        fn uncertain_has_single_interior_minimum(
            base in 0.01f64..100.0,
            lambda in 0.01f64..10.0,
        ) {
            let s_star = (lambda * base).ln();
            let at = |s: f64| loss_uncertain(base, s, lambda).unwrap().value;
            prop_assert!(at(s_star - 1.0) > at(s_star));
            prop_assert!(at(s_star + 1.0) > at(s_star));
        }
    }
}
