//! Categorical cross-entropy with optional focal and class-balanced factors.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Tape, Tensor, Var};

/// Probabilities are clamped to `[EPS, 1]` before every logarithm.
pub const EPS: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("gamma {0} must be finite and >= 0")]
    Gamma(f64),
    #[error("beta {0} outside [0, 1)")]
    Beta(f64),
    #[error("class count must be >= 1")]
    ZeroCount,
    #[error("truth class {truth} out of range for {classes} classes")]
    Truth { truth: usize, classes: usize },
}

/// `−ln clamp(P[truth], ε, 1)`.
pub fn cce(p: &[f64], truth: usize) -> f64 {
    -p[truth].clamp(EPS, 1.0).ln()
}

/// `(1 − P[truth])^γ`.
pub fn focal_factor(p: &[f64], truth: usize, gamma: f64) -> f64 {
    (1.0 - p[truth]).max(0.0).powf(gamma)
}

/// Reciprocal of the effective number of samples, `(1 − β) / (1 − βⁿ)`.
pub fn cb_weight(n: u64, beta: f64) -> f64 {
    assert!(n >= 1, "class count must be >= 1");
    assert!((0.0..1.0).contains(&beta), "beta must lie in [0, 1)");
    if beta == 0.0 {
        return 1.0;
    }
    // 1 − βⁿ = −expm1(n · ln β), accurate for β close to 1.
    let denom = -(n as f64 * (-(1.0 - beta)).ln_1p()).exp_m1();
    (1.0 - beta) / denom
}

/// Training samples per class, each at least 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts(Vec<u64>);

impl ClassCounts {
    pub fn new(counts: Vec<u64>) -> Result<Self, LossError> {
        if counts.iter().any(|&c| c == 0) {
            return Err(LossError::ZeroCount);
        }
        Ok(ClassCounts(counts))
    }

    /// Counts labels in `0..classes`; empty classes are raised to 1.
    pub fn from_labels(labels: impl IntoIterator<Item = usize>, classes: usize) -> Self {
        let mut c = vec![0u64; classes];
        for l in labels {
            c[l] += 1;
        }
        ClassCounts(c.into_iter().map(|v| v.max(1)).collect())
    }

    pub fn get(&self, class: usize) -> u64 {
        self.0[class]
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.0
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub gamma: f64,
    pub beta: f64,
    pub focal: bool,
    pub class_balanced: bool,
}

impl LossConfig {
    /// Plain categorical cross-entropy.
    pub fn cce() -> Self {
        LossConfig { gamma: 0.0, beta: 0.0, focal: false, class_balanced: false }
    }

    pub fn cfcc(gamma: f64, beta: f64) -> Self {
        LossConfig { gamma, beta, focal: true, class_balanced: true }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(LossError::Gamma(self.gamma));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(LossError::Beta(self.beta));
        }
        Ok(())
    }

    fn effective_gamma(&self) -> f64 {
        if self.focal { self.gamma } else { 0.0 }
    }

    /// Per-class weights, fixed before training.
    pub fn class_weights(&self, counts: &ClassCounts) -> Vec<f64> {
        counts
            .as_slice()
            .iter()
            .map(|&n| if self.class_balanced { cb_weight(n, self.beta) } else { 1.0 })
            .collect()
    }
}

/// Loss of one frame: `cb_weight(n_truth, β) · (1 − p_GT)^γ · cce`.
pub fn cfcc(p: &[f64], truth: usize, counts: &ClassCounts, cfg: &LossConfig) -> f64 {
    let w = if cfg.class_balanced { cb_weight(counts.get(truth), cfg.beta) } else { 1.0 };
    w * focal_factor(p, truth, cfg.effective_gamma()) * cce(p, truth)
}

/// Summed loss over the rows of `probs` (`[B, K]`), built on the tape.
pub fn loss_on_tape(tape: &mut Tape, probs: Var, truth: &[usize], class_weights: &[f64], cfg: &LossConfig) -> Var {
    let p_gt = tape.pick(probs, Arc::new(truth.to_vec()));
    let clamped = tape.clamp(p_gt, EPS, 1.0);
    let log_p = tape.log(clamped);
    let mut per_frame = tape.scale(log_p, -1.0);
    let gamma = cfg.effective_gamma();
    if gamma != 0.0 {
        let one_minus = tape.affine(p_gt, -1.0, 1.0);
        let one_minus = tape.clamp(one_minus, 0.0, 1.0);
        let focal = tape.pow(one_minus, gamma);
        per_frame = tape.mul(per_frame, focal);
    }
    if cfg.class_balanced {
        let w = tape.constant(Tensor::vector(truth.iter().map(|&t| class_weights[t]).collect()));
        per_frame = tape.mul(per_frame, w);
    }
    tape.sum(per_frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn cce_cases() {
        assert_eq!(cce(&[0.0, 1.0], 1), 0.0);
        assert!((cce(&[0.5, 0.5], 0) - LN2).abs() < 1e-15);
        assert!((cce(&[1.0, 0.0], 1) - 16.118095650958319).abs() < 1e-12);
    }

    #[test]
    fn focal_cases() {
        assert_eq!(focal_factor(&[0.3, 0.7], 0, 0.0), 1.0);
        assert_eq!(focal_factor(&[0.0, 1.0], 1, 2.0), 0.0);
        assert_eq!(focal_factor(&[0.5, 0.5], 0, 2.0), 0.25);
        assert!((0.25 * cce(&[0.5, 0.5], 0) - 0.173287).abs() < 1e-6);
    }

    #[test]
    fn cb_weight_cases() {
        assert_eq!(cb_weight(1, 0.9999), 1.0);
        assert_eq!(cb_weight(1, 0.3), 1.0);
        assert_eq!(cb_weight(500, 0.0), 1.0);
        assert!((cb_weight(10_000, 0.9999) / 1.5819e-4 - 1.0).abs() < 1e-4);
    }

    #[test]
    fn cfcc_composition() {
        let counts = ClassCounts::new(vec![10_000, 10]).unwrap();
        let got = cfcc(&[0.5, 0.5], 0, &counts, &LossConfig::cfcc(2.0, 0.9999));
        assert!((got / 2.741e-5 - 1.0).abs() < 1e-3, "{got}");
        let plain = cfcc(&[0.2, 0.8], 1, &counts, &LossConfig { gamma: 0.0, beta: 0.0, ..LossConfig::cfcc(0.0, 0.0) });
        assert!((plain - cce(&[0.2, 0.8], 1)).abs() < 1e-12);
    }

    #[test]
    fn counts_are_at_least_one() {
        assert_eq!(ClassCounts::new(vec![3, 0]), Err(LossError::ZeroCount));
        assert_eq!(ClassCounts::from_labels([0, 0, 2], 3).as_slice(), &[2, 1, 1]);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::cfcc(0.5, 0.9999).validate().is_ok());
        assert_eq!(LossConfig::cfcc(-1.0, 0.5).validate(), Err(LossError::Gamma(-1.0)));
        assert_eq!(LossConfig::cfcc(1.0, 1.0).validate(), Err(LossError::Beta(1.0)));
    }

    fn probs() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, 2..7).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn cb_weight_decreases_in_n(n in 1u64..100_000, beta in 0.001f64..0.99999) {
            let (cur, next) = (cb_weight(n, beta), cb_weight(n + 1, beta));
            prop_assert!(next <= cur);
            // Strict only while βⁿ still registers against 1 in f64.
            if beta.powf(n as f64) > 1e-12 {
                prop_assert!(next < cur);
            }
        }

        #[test]
        fn focal_non_increasing(a in 0.0f64..1.0, b in 0.0f64..1.0, gamma in 0.01f64..3.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(focal_factor(&[hi, 1.0 - hi], 0, gamma) <= focal_factor(&[lo, 1.0 - lo], 0, gamma));
        }

        #[test]
        fn cfcc_non_negative_and_zero_only_at_certainty(p in probs(), gamma in 0.0f64..3.0, beta in 0.0f64..0.9999) {
            let counts = ClassCounts::new(vec![7; p.len()]).unwrap();
            let cfg = LossConfig::cfcc(gamma, beta);
            for t in 0..p.len() {
                let l = cfcc(&p, t, &counts, &cfg);
                prop_assert!(l >= 0.0);
                prop_assert!(l > 0.0 || p[t] >= 1.0 - EPS);
            }
        }

        #[test]
        fn uniform_counts_scale_cce_by_a_constant(p in probs(), beta in 0.0f64..0.9999, n in 1u64..5000) {
            let counts = ClassCounts::new(vec![n; p.len()]).unwrap();
            let cfg = LossConfig::cfcc(0.0, beta);
            let w = cb_weight(n, beta);
            for t in 0..p.len() {
                prop_assert!((cfcc(&p, t, &counts, &cfg) - w * cce(&p, t)).abs() <= 1e-12 * (1.0 + cce(&p, t)));
            }
        }
    }

    #[test]
    fn tape_loss_matches_scalar_sum() {
        let rows = [vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3]];
        let truth = [1usize, 2];
        let counts = ClassCounts::new(vec![40, 9, 300]).unwrap();
        let cfg = LossConfig::cfcc(1.5, 0.999);
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::matrix(2, 3, rows.concat()));
        let l = loss_on_tape(&mut tape, p, &truth, &cfg.class_weights(&counts), &cfg);
        let want: f64 = rows.iter().zip(truth).map(|(r, t)| cfcc(r, t, &counts, &cfg)).sum();
        assert!((tape.value(l).item() - want).abs() < 1e-15);
    }
}
