//! Training losses: Jaccard distance, regional KLD, and their composites.
//!
//! Every loss returns a [`LossValue`]: the scalar plus the analytic gradient
//! with respect to the *first* prediction argument. The peer prediction in
//! the composite losses is a constant target (stop-gradient): each model
//! optimizes its own objective and never receives gradient through the other
//! model's output. Gradients are validated against central finite
//! differences in the test suites.

use serde::{Deserialize, Serialize};

use crate::error::{GmlError, Result};
use crate::grid::{Grid, MaskGrid, ProbabilityGrid};

/// Default symmetric smoothing for the Jaccard distance.
pub const DEFAULT_JACCARD_EPS: f64 = 1e-5;
/// Default clamp applied to probabilities before logarithms.
pub const DEFAULT_PROB_CLAMP: f64 = 1e-7;

/// Which regional KLD formula to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KldVariant {
    /// Single tumor-class term `p1 ln(p1/p2)`. Can be negative.
    #[default]
    Eq1,
    /// Full per-cell Bernoulli KLD, adds `(1-p1) ln((1-p1)/(1-p2))`.
    /// Non-negative by Gibbs' inequality.
    Full,
}

/// Knobs shared by the composite losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub eps: f64,
    pub clamp: f64,
    pub kld_variant: KldVariant,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            eps: DEFAULT_JACCARD_EPS,
            clamp: DEFAULT_PROB_CLAMP,
            kld_variant: KldVariant::Eq1,
        }
    }
}

/// Scalar loss plus its gradient with respect to the first prediction.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub grad_wrt_first_prediction: Grid,
}

fn require_same_shape(a: &Grid, b: &Grid, what: &str) -> Result<()> {
    if !a.same_shape(b) {
        return Err(GmlError::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Smoothed Jaccard distance `1 - (sum p*t + eps) / (sum p + sum t - sum p*t + eps)`.
///
/// The smoothing is symmetric, so a prediction identical to its binary truth
/// scores exactly 0, as does the all-empty pair.
pub fn jaccard_distance(pred: &ProbabilityGrid, truth: &MaskGrid, eps: f64) -> Result<LossValue> {
    require_same_shape(pred, truth, "jaccard_distance")?;
    assert!(eps > 0.0, "jaccard eps must be positive");
    let mut inter = 0.0;
    let mut p_sum = 0.0;
    let mut t_sum = 0.0;
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        inter += p * t;
        p_sum += p;
        t_sum += t;
    }
    let num = inter + eps;
    let den = p_sum + t_sum - inter + eps;
    let value = 1.0 - num / den;
    // d/dp_i [1 - N/D] with dN/dp_i = t_i and dD/dp_i = 1 - t_i.
    let den2 = den * den;
    let grad = truth.map(|t| -(t * den - num * (1.0 - t)) / den2);
    Ok(LossValue {
        value,
        grad_wrt_first_prediction: grad,
    })
}

/// Regional KLD with the default variant and clamp.
pub fn rkld(p1: &ProbabilityGrid, p2: &ProbabilityGrid, mask: &MaskGrid) -> Result<LossValue> {
    rkld_with(p1, p2, mask, KldVariant::Eq1, DEFAULT_PROB_CLAMP)
}

/// Regional KLD `[sum p1 ln(p1/p2) t] / [sum t]`, both probabilities clamped
/// into `[clamp, 1-clamp]` before the logarithm.
///
/// An all-zero mask yields exactly zero: the region average is 0/0 there and
/// zero is the one choice under which tumor-free samples exert no alignment
/// pressure. The gradient is with respect to `p1`; `p2` is a constant. Where
/// the clamp is active the gradient is zero (the clamped value no longer
/// responds to its input).
pub fn rkld_with(
    p1: &ProbabilityGrid,
    p2: &ProbabilityGrid,
    mask: &MaskGrid,
    variant: KldVariant,
    clamp: f64,
) -> Result<LossValue> {
    require_same_shape(p1, p2, "rkld predictions")?;
    require_same_shape(p1, mask, "rkld mask")?;
    assert!(
        clamp > 0.0 && clamp < 0.5,
        "probability clamp must lie in (0, 0.5)"
    );
    let t_sum = mask.sum();
    if t_sum == 0.0 {
        return Ok(LossValue {
            value: 0.0,
            grad_wrt_first_prediction: Grid::zeros_like(p1),
        });
    }
    let lo = clamp;
    let hi = 1.0 - clamp;
    let mut acc = 0.0;
    let mut grad = Grid::zeros_like(p1);
    for (i, ((&raw_a, &raw_b), &t)) in p1
        .data()
        .iter()
        .zip(p2.data())
        .zip(mask.data())
        .enumerate()
    {
        if t == 0.0 {
            continue;
        }
        let a = raw_a.clamp(lo, hi);
        let b = raw_b.clamp(lo, hi);
        let log_ratio = (a / b).ln();
        let (term, dterm_da) = match variant {
            KldVariant::Eq1 => (a * log_ratio, log_ratio + 1.0),
            KldVariant::Full => {
                let comp = ((1.0 - a) / (1.0 - b)).ln();
                (a * log_ratio + (1.0 - a) * comp, log_ratio - comp)
            }
        };
        acc += t * term;
        // The clamp saturates outside (lo, hi); its derivative is zero there.
        if raw_a > lo && raw_a < hi {
            grad[i] = t * dterm_da / t_sum;
        }
    }
    Ok(LossValue {
        value: acc / t_sum,
        grad_wrt_first_prediction: grad,
    })
}

fn composite(jd: LossValue, rk: LossValue) -> Result<LossValue> {
    let grad = Grid::map2(
        &jd.grad_wrt_first_prediction,
        &rk.grad_wrt_first_prediction,
        |a, b| a + b,
    )?;
    Ok(LossValue {
        value: jd.value + rk.value,
        grad_wrt_first_prediction: grad,
    })
}

/// Receiver-side mutual objective: `JD(pred_r, truth) + rKLD(pred_r, pred_s | truth)`.
///
/// The gradient is with respect to `pred_r` only; `pred_s` is a constant
/// target and contributes no gradient of its own.
pub fn mutual_loss_receiver(
    pred_r: &ProbabilityGrid,
    pred_s: &ProbabilityGrid,
    truth: &MaskGrid,
    eps: f64,
) -> Result<LossValue> {
    mutual_loss_receiver_with(pred_r, pred_s, truth, &LossConfig { eps, ..LossConfig::default() })
}

/// [`mutual_loss_receiver`] with an explicit [`LossConfig`].
pub fn mutual_loss_receiver_with(
    pred_r: &ProbabilityGrid,
    pred_s: &ProbabilityGrid,
    truth: &MaskGrid,
    cfg: &LossConfig,
) -> Result<LossValue> {
    let jd = jaccard_distance(pred_r, truth, cfg.eps)?;
    let rk = rkld_with(pred_r, pred_s, truth, cfg.kld_variant, cfg.clamp)?;
    composite(jd, rk)
}

/// Sender-side mutual objective: `JD(pred_s, truth) + rKLD(pred_s, pred_r | truth)`.
///
/// Symmetric to [`mutual_loss_receiver`] with the roles swapped: the gradient
/// is with respect to `pred_s` only.
pub fn mutual_loss_sender(
    pred_s: &ProbabilityGrid,
    pred_r: &ProbabilityGrid,
    truth: &MaskGrid,
    eps: f64,
) -> Result<LossValue> {
    mutual_loss_sender_with(pred_s, pred_r, truth, &LossConfig { eps, ..LossConfig::default() })
}

/// [`mutual_loss_sender`] with an explicit [`LossConfig`].
pub fn mutual_loss_sender_with(
    pred_s: &ProbabilityGrid,
    pred_r: &ProbabilityGrid,
    truth: &MaskGrid,
    cfg: &LossConfig,
) -> Result<LossValue> {
    let jd = jaccard_distance(pred_s, truth, cfg.eps)?;
    let rk = rkld_with(pred_s, pred_r, truth, cfg.kld_variant, cfg.clamp)?;
    composite(jd, rk)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_rel_err, numerical_grad};
    use crate::rng::Rng;

    const EPS: f64 = DEFAULT_JACCARD_EPS;

    fn grid(shape: &[usize], data: Vec<f64>) -> Grid {
        Grid::from_vec(shape, data).unwrap()
    }

    fn random_probs(rng: &mut Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.uniform_in(0.05, 0.95)).collect()
    }

    fn random_mask(rng: &mut Rng, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 })
            .collect()
    }

    #[test]
    fn jaccard_of_prediction_equal_to_binary_truth_is_zero() {
        let t = grid(&[2, 3], vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let v = jaccard_distance(&t.clone(), &t, EPS).unwrap();
        assert_eq!(v.value, 0.0);
    }

    #[test]
    fn jaccard_all_wrong_scalar_case() {
        // By hand: intersection 0, union 4, so 1 - 1e-5 / (4 + 1e-5).
        let p = grid(&[2, 2], vec![0.0; 4]);
        let t = grid(&[2, 2], vec![1.0; 4]);
        let v = jaccard_distance(&p, &t, EPS).unwrap();
        let expected = 1.0 - 1e-5 / 4.00001;
        assert!((v.value - expected).abs() < 1e-12);
        assert!((v.value - 0.9999975).abs() < 1e-6);
    }

    #[test]
    fn jaccard_half_probability_scalar_case() {
        // By hand: sum p*t = 0.5, sum p = 1, sum t = 1, so 1 - 0.50001/1.50001.
        let p = grid(&[2], vec![0.5, 0.5]);
        let t = grid(&[2], vec![1.0, 0.0]);
        let v = jaccard_distance(&p, &t, EPS).unwrap();
        assert!((v.value - (1.0 - 0.50001 / 1.50001)).abs() < 1e-12);
        assert!((v.value - 0.6666622).abs() < 1e-6);
    }

    #[test]
    fn jaccard_shape_mismatch_is_rejected() {
        let p = grid(&[2, 2], vec![0.5; 4]);
        let t = grid(&[4], vec![1.0; 4]);
        assert!(matches!(
            jaccard_distance(&p, &t, EPS),
            Err(GmlError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn rkld_of_identical_predictions_is_exactly_zero() {
        let mut rng = Rng::derive(11, "rkld-identical");
        for _ in 0..50 {
            let p = grid(&[5, 5], random_probs(&mut rng, 25));
            let m = grid(&[5, 5], random_mask(&mut rng, 25));
            let v = rkld(&p, &p, &m).unwrap();
            assert_eq!(v.value, 0.0);
        }
    }

    #[test]
    fn rkld_empty_mask_is_zero_with_zero_gradient() {
        let mut rng = Rng::derive(12, "rkld-empty");
        let p1 = grid(&[3, 3], random_probs(&mut rng, 9));
        let p2 = grid(&[3, 3], random_probs(&mut rng, 9));
        let m = Grid::zeros(&[3, 3]).unwrap();
        let v = rkld(&p1, &p2, &m).unwrap();
        assert_eq!(v.value, 0.0);
        assert!(v.grad_wrt_first_prediction.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn rkld_single_voxel_scalar_case() {
        // By hand: 0.8 * ln(0.8/0.4) = 0.8 * ln 2 = 0.55451774444795624.
        let p1 = grid(&[1], vec![0.8]);
        let p2 = grid(&[1], vec![0.4]);
        let m = grid(&[1], vec![1.0]);
        let v = rkld(&p1, &p2, &m).unwrap();
        assert!((v.value - 0.5545177444479562).abs() < 1e-15);
    }

    #[test]
    fn rkld_ignores_p2_outside_mask() {
        let mut rng = Rng::derive(13, "rkld-outside");
        for _ in 0..50 {
            let p1 = grid(&[5, 5], random_probs(&mut rng, 25));
            let mut p2 = grid(&[5, 5], random_probs(&mut rng, 25));
            let m = grid(&[5, 5], random_mask(&mut rng, 25));
            let before = rkld(&p1, &p2, &m).unwrap();
            for i in 0..25 {
                if m[i] == 0.0 {
                    p2[i] = rng.uniform_in(0.001, 0.999);
                }
            }
            let after = rkld(&p1, &p2, &m).unwrap();
            assert_eq!(before.value, after.value);
            assert_eq!(
                before.grad_wrt_first_prediction.data(),
                after.grad_wrt_first_prediction.data()
            );
        }
    }

    #[test]
    fn full_variant_is_nonnegative() {
        let mut rng = Rng::derive(14, "rkld-full-nonneg");
        for _ in 0..200 {
            let p1 = grid(&[5, 5], random_probs(&mut rng, 25));
            let p2 = grid(&[5, 5], random_probs(&mut rng, 25));
            let m = grid(&[5, 5], random_mask(&mut rng, 25));
            let v = rkld_with(&p1, &p2, &m, KldVariant::Full, DEFAULT_PROB_CLAMP).unwrap();
            assert!(v.value >= 0.0, "full KLD came out negative: {}", v.value);
        }
    }

    #[test]
    fn clamp_saturation_zeroes_the_gradient_and_bounds_the_value() {
        let p1 = grid(&[2], vec![0.0, 1.0]);
        let p2 = grid(&[2], vec![1.0, 0.0]);
        let m = grid(&[2], vec![1.0, 1.0]);
        let v = rkld(&p1, &p2, &m).unwrap();
        assert!(v.value.is_finite());
        assert!(v.grad_wrt_first_prediction.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn receiver_loss_collapses_to_jaccard_when_predictions_agree() {
        let mut rng = Rng::derive(15, "recv-collapse");
        let p = grid(&[4, 4], random_probs(&mut rng, 16));
        let m = grid(&[4, 4], random_mask(&mut rng, 16));
        let full = mutual_loss_receiver(&p, &p, &m, EPS).unwrap();
        let jd = jaccard_distance(&p, &m, EPS).unwrap();
        assert_eq!(full.value, jd.value);
    }

    #[test]
    fn receiver_loss_single_voxel_scalar_case() {
        // By hand: JD = 1 - 0.80001/1.00001, rKLD = 0.8 ln 2; sum ~ 0.754516.
        let pr = grid(&[1], vec![0.8]);
        let ps = grid(&[1], vec![0.4]);
        let m = grid(&[1], vec![1.0]);
        let v = mutual_loss_receiver(&pr, &ps, &m, EPS).unwrap();
        let expected = (1.0 - 0.80001 / 1.00001) + 0.5545177444479562;
        assert!((v.value - expected).abs() < 1e-12);
        assert!((v.value - 0.7545157).abs() < 1e-6);
    }

    #[test]
    fn sender_loss_single_voxel_scalar_case() {
        // Same voxel with roles swapped. By hand:
        //   rKLD = 0.4 ln(0.5) = -0.27725887222397812 (negative is expected),
        //   JD = 1 - 0.40001/1.00001 = 0.59999400005999940,
        //   total = 0.32273512783602128.
        let ps = grid(&[1], vec![0.4]);
        let pr = grid(&[1], vec![0.8]);
        let m = grid(&[1], vec![1.0]);
        let v = mutual_loss_sender(&ps, &pr, &m, EPS).unwrap();
        assert!((v.value - 0.32273512783602128).abs() < 1e-12);
    }

    #[test]
    fn both_equal_to_truth_gives_zero() {
        let t = grid(&[3, 3], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let v = mutual_loss_sender(&t.clone(), &t.clone(), &t, EPS).unwrap();
        assert_eq!(v.value, 0.0);
    }

    #[test]
    fn jaccard_gradient_matches_finite_differences() {
        let mut rng = Rng::derive(16, "fd-jd");
        for _ in 0..5 {
            let p = random_probs(&mut rng, 25);
            let t = grid(&[5, 5], random_mask(&mut rng, 25));
            let analytic = jaccard_distance(&grid(&[5, 5], p.clone()), &t, EPS).unwrap();
            let numeric = numerical_grad(&p, 1e-6, |v| {
                jaccard_distance(&grid(&[5, 5], v.to_vec()), &t, EPS)
                    .unwrap()
                    .value
            });
            let err = max_rel_err(analytic.grad_wrt_first_prediction.data(), &numeric);
            assert!(err < 1e-4, "max relative error {err}");
        }
    }

    #[test]
    fn rkld_gradient_matches_finite_differences_both_variants() {
        let mut rng = Rng::derive(17, "fd-rkld");
        for variant in [KldVariant::Eq1, KldVariant::Full] {
            for _ in 0..5 {
                let p1 = random_probs(&mut rng, 25);
                let p2 = grid(&[5, 5], random_probs(&mut rng, 25));
                let mut m = random_mask(&mut rng, 25);
                m[0] = 1.0; // keep the mask non-empty
                let m = grid(&[5, 5], m);
                let analytic =
                    rkld_with(&grid(&[5, 5], p1.clone()), &p2, &m, variant, DEFAULT_PROB_CLAMP)
                        .unwrap();
                let numeric = numerical_grad(&p1, 1e-6, |v| {
                    rkld_with(&grid(&[5, 5], v.to_vec()), &p2, &m, variant, DEFAULT_PROB_CLAMP)
                        .unwrap()
                        .value
                });
                let err = max_rel_err(analytic.grad_wrt_first_prediction.data(), &numeric);
                assert!(err < 1e-4, "variant {variant:?}: max relative error {err}");
            }
        }
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        let mut rng = Rng::derive(18, "fd-composite");
        for _ in 0..5 {
            let own = random_probs(&mut rng, 25);
            let peer = grid(&[5, 5], random_probs(&mut rng, 25));
            let mut m = random_mask(&mut rng, 25);
            m[7] = 1.0;
            let m = grid(&[5, 5], m);

            let recv = mutual_loss_receiver(&grid(&[5, 5], own.clone()), &peer, &m, EPS).unwrap();
            let recv_fd = numerical_grad(&own, 1e-6, |v| {
                mutual_loss_receiver(&grid(&[5, 5], v.to_vec()), &peer, &m, EPS)
                    .unwrap()
                    .value
            });
            let err = max_rel_err(recv.grad_wrt_first_prediction.data(), &recv_fd);
            assert!(err < 1e-4, "receiver: max relative error {err}");

            let send = mutual_loss_sender(&grid(&[5, 5], own.clone()), &peer, &m, EPS).unwrap();
            let send_fd = numerical_grad(&own, 1e-6, |v| {
                mutual_loss_sender(&grid(&[5, 5], v.to_vec()), &peer, &m, EPS)
                    .unwrap()
                    .value
            });
            let err = max_rel_err(send.grad_wrt_first_prediction.data(), &send_fd);
            assert!(err < 1e-4, "sender: max relative error {err}");
        }
    }

    #[test]
    fn gradient_is_with_respect_to_first_argument_only() {
        // The returned gradient aligns with the first prediction; perturbing
        // the peer changes the value but there is no peer-gradient channel,
        // which is the stop-gradient contract.
        let mut rng = Rng::derive(19, "stop-grad");
        let own = grid(&[4, 4], random_probs(&mut rng, 16));
        let peer = grid(&[4, 4], random_probs(&mut rng, 16));
        let m = grid(&[4, 4], vec![1.0; 16]);
        let v = mutual_loss_receiver(&own, &peer, &m, EPS).unwrap();
        assert!(v.grad_wrt_first_prediction.same_shape(&own));
        // FD of the value w.r.t. the first argument reproduces the gradient.
        let own_data = own.data().to_vec();
        let fd = numerical_grad(&own_data, 1e-6, |v| {
            mutual_loss_receiver(&grid(&[4, 4], v.to_vec()), &peer, &m, EPS)
                .unwrap()
                .value
        });
        assert!(max_rel_err(v.grad_wrt_first_prediction.data(), &fd) < 1e-4);
    }
}
