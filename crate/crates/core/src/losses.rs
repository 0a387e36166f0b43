//! Loss kernels with analytic gradients.
//!
//! Every loss is a mean over the batch, and every returned gradient is with
//! respect to the mean. For softmax cross-entropy against a target
//! distribution `p` the per-row gradient is `softmax(z) - p`, which is what
//! makes the combined observed/teacher loss collapse onto a single
//! cross-entropy against the mixed target `a * p_o + (1 - a) * p_t`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Tolerance used when checking that a target row is a distribution.
pub const DISTRIBUTION_TOL: f64 = 1e-9;

fn log_sum_exp(row: ArrayView1<f64>) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

pub fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let lse = log_sum_exp(row.view());
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let lse = log_sum_exp(logits);
    logits.mapv(|v| (v - lse).exp())
}

/// One-hot rows for `labels` over `classes` classes.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((labels.len(), classes));
    for (index, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange { index, label, classes });
        }
        out[[index, label]] = 1.0;
    }
    Ok(out)
}

/// Shannon entropy of each row, `-sum p log p` with `0 log 0 = 0`.
pub fn row_entropy(probs: &Array2<f64>) -> Array1<f64> {
    probs.map_axis(Axis(1), |row| -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
}

fn check_distributions(targets: &Array2<f64>) -> Result<()> {
    for (row, r) in targets.rows().into_iter().enumerate() {
        if let Some(v) = r.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::NotADistribution { row, detail: format!("entry {v}") });
        }
        let sum = r.sum();
        if (sum - 1.0).abs() > DISTRIBUTION_TOL {
            return Err(Error::NotADistribution { row, detail: format!("sums to {sum}") });
        }
    }
    Ok(())
}

fn check_same_shape(a: &Array2<f64>, b: &Array2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.nrows() == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaseLoss {
    #[serde(rename = "CE")]
    Ce,
    #[serde(rename = "LA")]
    La,
}

impl fmt::Display for BaseLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaseLoss::Ce => "CE",
            BaseLoss::La => "LA",
        })
    }
}

impl FromStr for BaseLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ce" => Ok(BaseLoss::Ce),
            "la" => Ok(BaseLoss::La),
            other => Err(Error::invalid(format!("unknown base loss {other:?} (expected CE or LA)"))),
        }
    }
}

/// Estimated class prior `pi_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrior(Array1<f64>);

impl ClassPrior {
    pub fn new(pi: Array1<f64>) -> Result<Self> {
        if pi.len() < 2 {
            return Err(Error::invalid("prior needs at least 2 classes"));
        }
        if let Some(c) = pi.iter().position(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(Error::invalid(format!("prior entry {c} is not strictly positive")));
        }
        let sum = pi.sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("prior sums to {sum}")));
        }
        Ok(Self(pi))
    }

    pub fn uniform(classes: usize) -> Result<Self> {
        Self::new(Array1::from_elem(classes, 1.0 / classes as f64))
    }

    /// Frequencies of `labels` with add-one smoothing.
    pub fn from_labels(labels: &[usize], classes: usize) -> Result<Self> {
        let mut counts = Array1::from_elem(classes, 1.0);
        for (index, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(Error::LabelOutOfRange { index, label, classes });
            }
            counts[label] += 1.0;
        }
        let total = counts.sum();
        Self::new(counts / total)
    }

    pub fn probs(&self) -> &Array1<f64> {
        &self.0
    }

    /// `m_c = -log pi_c`, the per-class logit margin.
    pub fn margins(&self) -> Array1<f64> {
        self.0.mapv(|p| -p.ln())
    }
}

/// Row-wise blend `a * observed + (1 - a) * teacher`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedTarget {
    pub probs: Array2<f64>,
    pub a: f64,
}

impl MixedTarget {
    pub fn new(observed: &Array2<f64>, teacher: &Array2<f64>, a: f64) -> Result<Self> {
        check_mix(a)?;
        check_same_shape(observed, teacher, "mixed target")?;
        let probs = observed * a + teacher * (1.0 - a);
        Ok(Self { probs, a })
    }
}

fn check_mix(a: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::invalid(format!("mixing coefficient must be in [0, 1], got {a}")));
    }
    Ok(())
}

/// Mean loss and its gradient with respect to the logits.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Array2<f64>,
}

/// Softmax cross-entropy against target distributions.
pub fn ce_loss_and_grad(logits: &Array2<f64>, targets: &Array2<f64>) -> Result<LossGrad> {
    check_same_shape(logits, targets, "cross-entropy")?;
    check_distributions(targets)?;
    let b = logits.nrows() as f64;
    let log_q = log_softmax_rows(logits);
    let mut loss = 0.0;
    Zip::from(&log_q).and(targets).for_each(|&lq, &p| {
        if p > 0.0 {
            loss -= p * lq;
        }
    });
    let mut grad = softmax_rows(logits);
    grad -= targets;
    grad /= b;
    Ok(LossGrad { loss: loss / b, grad })
}

/// `z + log pi`, broadcast over rows.
pub fn adjust_logits_la(logits: &Array2<f64>, prior: &ClassPrior) -> Result<Array2<f64>> {
    if logits.ncols() != prior.probs().len() {
        return Err(Error::DimensionMismatch(format!(
            "{} logit columns for a {}-class prior",
            logits.ncols(),
            prior.probs().len()
        )));
    }
    let log_pi = prior.probs().mapv(f64::ln);
    Ok(logits + &log_pi)
}

#[derive(Debug, Clone)]
pub struct KlOutput {
    pub loss: f64,
    pub grad_logits: Array2<f64>,
    /// Derivative with respect to the teacher's log-temperature, assuming
    /// `teacher_probs = softmax(s / exp(theta))`.
    pub grad_log_temperature: f64,
}

/// `KL(P_t || P_I)` averaged over the batch, where `P_I = softmax(student)`.
///
/// With `u = s / T` and `theta = log T`, `dp_c/dtheta = -p_c (u_c - E_p[u])`
/// and `u_c - E_p[u] = log p_c + H(p)`, so the temperature gradient only
/// needs the teacher probabilities themselves.
pub fn kl_teacher_loss_and_grad(student_logits: &Array2<f64>, teacher_probs: &Array2<f64>) -> Result<KlOutput> {
    check_same_shape(student_logits, teacher_probs, "KL")?;
    check_distributions(teacher_probs)?;
    let b = student_logits.nrows() as f64;
    let log_q = log_softmax_rows(student_logits);
    let mut loss = 0.0;
    let mut grad_theta = 0.0;
    for (pt, lq) in teacher_probs.rows().into_iter().zip(log_q.rows()) {
        let entropy = -pt.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
        for (&p, &lq) in pt.iter().zip(lq.iter()) {
            if p > 0.0 {
                let log_ratio = p.ln() - lq;
                loss += p * log_ratio;
                grad_theta -= p * log_ratio * (p.ln() + entropy);
            }
        }
    }
    let mut grad = softmax_rows(student_logits);
    grad -= teacher_probs;
    grad /= b;
    Ok(KlOutput { loss: loss / b, grad_logits: grad, grad_log_temperature: grad_theta / b })
}

#[derive(Debug, Clone)]
pub struct CombinedOutput {
    /// `a * observed_loss + (1 - a) * teacher_loss`.
    pub loss: f64,
    pub observed_loss: f64,
    pub teacher_loss: f64,
    pub grad_logits: Array2<f64>,
    pub grad_log_temperature: f64,
}

/// `a * L_O + (1 - a) * KL(P_t || P_I)`.
///
/// `L_O` is cross-entropy on raw logits for [`BaseLoss::Ce`] and on
/// prior-adjusted logits for [`BaseLoss::La`]; the KL term always sees the
/// raw student distribution. `prior` is required for LA only.
pub fn combined_loss(
    student_logits: &Array2<f64>,
    observed: &Array2<f64>,
    teacher_probs: &Array2<f64>,
    a: f64,
    base: BaseLoss,
    prior: Option<&ClassPrior>,
) -> Result<CombinedOutput> {
    check_mix(a)?;
    let obs = observed_loss(student_logits, observed, base, prior)?;
    let kl = kl_teacher_loss_and_grad(student_logits, teacher_probs)?;
    let grad_logits = obs.grad * a + kl.grad_logits * (1.0 - a);
    Ok(CombinedOutput {
        loss: a * obs.loss + (1.0 - a) * kl.loss,
        observed_loss: obs.loss,
        teacher_loss: kl.loss,
        grad_logits,
        grad_log_temperature: (1.0 - a) * kl.grad_log_temperature,
    })
}

/// The observed-label loss `L_O` alone.
pub fn observed_loss(
    student_logits: &Array2<f64>,
    observed: &Array2<f64>,
    base: BaseLoss,
    prior: Option<&ClassPrior>,
) -> Result<LossGrad> {
    match base {
        BaseLoss::Ce => ce_loss_and_grad(student_logits, observed),
        BaseLoss::La => {
            let prior = prior.ok_or_else(|| Error::MissingField("class prior for LA".into()))?;
            // d/dz of CE(z + log pi) equals d/d(z + log pi), the shift is constant
            ce_loss_and_grad(&adjust_logits_la(student_logits, prior)?, observed)
        }
    }
}

/// `softmax(z - m) - softmax(z)` per class: how a margin shifts the
/// target-class gradient relative to plain cross-entropy.
pub fn la_gradient_difference(logits: ArrayView1<f64>, margins: ArrayView1<f64>) -> Result<Array1<f64>> {
    if logits.len() != margins.len() {
        return Err(Error::DimensionMismatch(format!("{} logits, {} margins", logits.len(), margins.len())));
    }
    if margins.iter().any(|m| !m.is_finite()) {
        return Err(Error::NonFinite("margins".into()));
    }
    let shifted = &logits - &margins;
    Ok(softmax(shifted.view()) - softmax(logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, array};
    use proptest::prelude::*;
    use rand::Rng as _;

    use crate::rng_from_seed;

    fn random_distribution(rng: &mut crate::Rng, c: usize) -> Array1<f64> {
        let v: Array1<f64> = (0..c).map(|_| rng.random::<f64>() + 1e-3).collect();
        let s = v.sum();
        v / s
    }

    fn ce_value(z: &Array2<f64>, p: &Array2<f64>) -> f64 {
        // independent: loss from explicit exp/sum/log, no log-sum-exp helper
        let mut total = 0.0;
        for (zr, pr) in z.rows().into_iter().zip(p.rows()) {
            let denom: f64 = zr.iter().map(|v| v.exp()).sum();
            for (zc, pc) in zr.iter().zip(pr.iter()) {
                total -= pc * (zc.exp() / denom).ln();
            }
        }
        total / z.nrows() as f64
    }

    #[test]
    fn ce_uniform_logits() {
        let out = ce_loss_and_grad(&array![[0.0, 0.0]], &array![[1.0, 0.0]]).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(out.grad, array![[-0.5, 0.5]]);
        let out = ce_loss_and_grad(&array![[0.0, 0.0], [0.0, 0.0]], &array![[1.0, 0.0], [1.0, 0.0]]).unwrap();
        assert_eq!(out.grad, array![[-0.25, 0.25], [-0.25, 0.25]]);
    }

    #[test]
    fn ce_fixed_point() {
        let z = array![[0.3, -1.2, 2.0]];
        let p = softmax_rows(&z);
        let out = ce_loss_and_grad(&z, &p).unwrap();
        assert!(out.grad.iter().all(|g| g.abs() < 1e-16));
    }

    #[test]
    fn ce_rejects_bad_targets() {
        let z = array![[0.0, 0.0]];
        assert!(matches!(ce_loss_and_grad(&z, &array![[0.7, 0.7]]), Err(Error::NotADistribution { .. })));
        assert!(matches!(ce_loss_and_grad(&z, &array![[1.5, -0.5]]), Err(Error::NotADistribution { .. })));
    }

    #[test]
    fn ce_gradient_matches_central_differences() {
        let mut rng = rng_from_seed(17);
        let h = 1e-5;
        for trial in 0..100 {
            let c = 2 + trial % 9;
            let b = 1 + trial % 3;
            let z = Array2::from_shape_fn((b, c), |_| rng.random_range(-3.0..3.0));
            let mut p = Array2::zeros((b, c));
            for mut row in p.rows_mut() {
                row.assign(&random_distribution(&mut rng, c));
            }
            let analytic = ce_loss_and_grad(&z, &p).unwrap().grad;
            for i in 0..b {
                for j in 0..c {
                    let mut zp = z.clone();
                    zp[[i, j]] += h;
                    let mut zm = z.clone();
                    zm[[i, j]] -= h;
                    let fd = (ce_value(&zp, &p) - ce_value(&zm, &p)) / (2.0 * h);
                    assert!((fd - analytic[[i, j]]).abs() < 1e-6, "trial {trial}: {fd} vs {}", analytic[[i, j]]);
                }
            }
        }
    }

    #[test]
    fn la_adjustment_examples() {
        let prior = ClassPrior::new(arr1(&[0.9, 0.1])).unwrap();
        let adj = adjust_logits_la(&array![[0.0, 0.0]], &prior).unwrap();
        assert_eq!(adj, array![[0.9f64.ln(), 0.1f64.ln()]]);

        let z = array![[0.4, -0.2, 1.0]];
        let uni = adjust_logits_la(&z, &ClassPrior::uniform(3).unwrap()).unwrap();
        let (a, b) = (softmax_rows(&z), softmax_rows(&uni));
        assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-15));
        assert!((uni[[0, 0]] - (0.4 - 3f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn la_can_flip_argmax() {
        // brute-force search for a logit pair whose argmax moves to the tail class
        let prior = ClassPrior::new(arr1(&[0.99, 0.01])).unwrap();
        let mut found = None;
        'outer: for i in 0..50 {
            for j in 0..50 {
                let z = array![[i as f64 * 0.2, j as f64 * 0.2]];
                let adj = adjust_logits_la(&z, &prior).unwrap();
                if z[[0, 1]] > z[[0, 0]] && adj[[0, 0]] > adj[[0, 1]] {
                    found = Some(z);
                    break 'outer;
                }
            }
        }
        let z = found.expect("some logit pair flips");
        // the head class wins after adjustment even though the tail logit is larger
        assert!(z[[0, 1]] - z[[0, 0]] < (0.99f64 / 0.01).ln());

        // a head-favoured pair keeps its argmax
        let adj = adjust_logits_la(&array![[0.1, 0.0]], &prior).unwrap();
        assert!(adj[[0, 0]] > adj[[0, 1]]);
    }

    #[test]
    fn zero_prior_rejected() {
        assert!(ClassPrior::new(arr1(&[1.0, 0.0])).is_err());
        let p = ClassPrior::from_labels(&[0, 0, 0], 3).unwrap();
        assert!(p.probs().iter().all(|&v| v > 0.0));
        assert!((p.probs()[0] - 4.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn kl_examples() {
        let z = array![[0.2, -0.7, 1.1]];
        let out = kl_teacher_loss_and_grad(&z, &softmax_rows(&z)).unwrap();
        assert!(out.loss.abs() < 1e-15);
        assert!(out.grad_logits.iter().all(|g| g.abs() < 1e-16));

        let out = kl_teacher_loss_and_grad(&array![[0.0, 0.0]], &array![[1.0, 0.0]]).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn combined_endpoints() {
        let z = array![[0.5, -0.1, 0.3], [1.0, 0.0, -1.0]];
        let po = one_hot(&[2, 0], 3).unwrap();
        let pt = softmax_rows(&array![[0.1, 0.4, -0.2], [0.3, 0.3, 0.0]]);
        let prior = ClassPrior::new(arr1(&[0.6, 0.3, 0.1])).unwrap();
        for base in [BaseLoss::Ce, BaseLoss::La] {
            let c = combined_loss(&z, &po, &pt, 1.0, base, Some(&prior)).unwrap();
            let o = observed_loss(&z, &po, base, Some(&prior)).unwrap();
            assert_eq!(c.loss, o.loss);
            assert_eq!(c.grad_logits, o.grad);
            assert_eq!(c.grad_log_temperature, 0.0);
        }
        let c = combined_loss(&z, &po, &pt, 0.0, BaseLoss::Ce, None).unwrap();
        let k = kl_teacher_loss_and_grad(&z, &pt).unwrap();
        assert_eq!(c.loss, k.loss);
        assert_eq!(c.grad_logits, k.grad_logits);
        assert!(combined_loss(&z, &po, &pt, 0.5, BaseLoss::La, None).is_err());
        assert!(combined_loss(&z, &po, &pt, 1.5, BaseLoss::Ce, None).is_err());
    }

    #[test]
    fn gradient_difference_examples() {
        let z = arr1(&[0.3, -0.4, 1.2, 0.0]);
        let d = la_gradient_difference(z.view(), Array1::zeros(4).view()).unwrap();
        assert!(d.iter().all(|v| *v == 0.0));

        let m = arr1(&[0.0, 0.5, 1.0, 2.0]);
        let d = la_gradient_difference(z.view(), m.view()).unwrap();
        assert!(d[3] < 0.0);
        assert!(d[0] > 0.0);
    }

    #[test]
    fn gradient_difference_signs_direct() {
        // C=5, pi decaying by IF=100; compare against direct softmax evaluation
        let pi: Array1<f64> = (0..5).map(|c| 100f64.powf(-(c as f64) / 4.0)).collect();
        let prior = ClassPrior::new(&pi / pi.sum()).unwrap();
        let m = prior.margins();
        let mut rng = rng_from_seed(3);
        for _ in 0..200 {
            let z: Array1<f64> = (0..5).map(|_| rng.random_range(-4.0..4.0)).collect();
            let d = la_gradient_difference(z.view(), m.view()).unwrap();
            for y in 0..5 {
                let num_la = (z[y] - m[y]).exp();
                let den_la: f64 = (0..5).map(|j| (z[j] - m[j]).exp()).sum();
                let num: f64 = z[y].exp();
                let den: f64 = z.iter().map(|v| v.exp()).sum();
                let direct = num_la / den_la - num / den;
                assert!((direct - d[y]).abs() < 1e-14);
            }
            assert!(d[4] < 0.0 && d[0] > 0.0);
        }
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(
            z in proptest::collection::vec(-5.0f64..5.0, 6),
            s in proptest::collection::vec(-5.0f64..5.0, 6),
        ) {
            let z = Array2::from_shape_vec((2, 3), z).unwrap();
            let pt = softmax_rows(&Array2::from_shape_vec((2, 3), s).unwrap());
            let out = kl_teacher_loss_and_grad(&z, &pt).unwrap();
            prop_assert!(out.loss >= -1e-12);
        }

        #[test]
        fn mixed_target_rows_sum_to_one(
            s in proptest::collection::vec(-3.0f64..3.0, 8),
            labels in proptest::collection::vec(0usize..4, 2),
            a in 0.0f64..=1.0,
        ) {
            let pt = softmax_rows(&Array2::from_shape_vec((2, 4), s).unwrap());
            let po = one_hot(&labels, 4).unwrap();
            let m = MixedTarget::new(&po, &pt, a).unwrap();
            for row in m.probs.rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }
}
