//! Executable checks of the identities the method rests on.
//!
//! Each check compares a kernel from [`crate::losses`] or [`crate::teacher`]
//! against an independent route: central finite differences over naively
//! evaluated losses, direct construction of the mixed target, or a plain
//! loop. All inputs come from fixed seeds, so a run is reproducible.

use std::fmt;

use ndarray::{Array1, Array2};
use rand::Rng as _;

use crate::losses::{
    ce_loss_and_grad, combined_loss, kl_teacher_loss_and_grad, la_gradient_difference, one_hot, row_entropy, BaseLoss,
    ClassPrior, MixedTarget,
};
use crate::teacher::{overlap_ratio, teacher_probs, text_predicted_labels};
use crate::{rng_from_seed, Result, Rng};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-6;
pub const EQUIVALENCE_TOL: f64 = 1e-12;
pub const LOSS_OFFSET_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, Default)]
pub struct CheckOptions {
    /// Adds a small bias to every analytic gradient before comparison.
    /// Used to confirm the checks actually catch a broken kernel.
    pub corrupt_gradient: bool,
}

const CORRUPTION: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    /// Inputs of the worst case when the check failed.
    pub detail: Option<String>,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {:<36} cases={:<5} max_err={:.3e} tol={:.0e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.max_error,
            self.tolerance
        )?;
        if let Some(d) = &self.detail {
            write!(f, "\n       worst case: {d}")?;
        }
        Ok(())
    }
}

struct Worst {
    error: f64,
    detail: String,
}

impl Worst {
    fn new() -> Self {
        Self { error: 0.0, detail: String::new() }
    }

    fn observe(&mut self, error: f64, detail: impl FnOnce() -> String) {
        if error > self.error || error.is_nan() {
            self.error = if error.is_nan() { f64::INFINITY } else { error };
            self.detail = detail();
        }
    }

    fn finish(self, name: &'static str, cases: usize, tolerance: f64) -> CheckResult {
        let passed = self.error < tolerance;
        CheckResult { name, passed, cases, max_error: self.error, tolerance, detail: (!passed).then_some(self.detail) }
    }
}

/// Softmax via explicit exponentials and a plain sum.
fn naive_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `-mean_i sum_c p log softmax(z)` by direct evaluation.
pub fn naive_cross_entropy(z: &Array2<f64>, p: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for (zr, pr) in z.rows().into_iter().zip(p.rows()) {
        let q = naive_softmax(&zr.to_vec());
        total -= pr.iter().zip(&q).map(|(pc, qc)| pc * qc.ln()).sum::<f64>();
    }
    total / z.nrows() as f64
}

/// `mean_i KL(softmax(s / exp(theta)) || softmax(z))` by direct evaluation.
pub fn naive_kl(z: &Array2<f64>, s: &Array2<f64>, theta: f64) -> f64 {
    let t = theta.exp();
    let mut total = 0.0;
    for (zr, sr) in z.rows().into_iter().zip(s.rows()) {
        let q = naive_softmax(&zr.to_vec());
        let scaled: Vec<f64> = sr.iter().map(|v| v / t).collect();
        let p = naive_softmax(&scaled);
        total += p.iter().zip(&q).map(|(pc, qc)| pc * (pc / qc).ln()).sum::<f64>();
    }
    total / z.nrows() as f64
}

/// Central differences of `f` at every entry of `x`.
pub fn central_difference<F: Fn(&Array2<f64>) -> f64>(f: F, x: &Array2<f64>, h: f64) -> Array2<f64> {
    let mut out = Array2::zeros(x.dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let (i, j) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[i, j]];
        probe[[i, j]] = orig + h;
        let up = f(&probe);
        probe[[i, j]] = orig - h;
        let down = f(&probe);
        probe[[i, j]] = orig;
        out[[i, j]] = (up - down) / (2.0 * h);
    }
    out
}

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

fn random_distributions(rng: &mut Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = Array2::from_shape_fn((rows, cols), |_| rng.random::<f64>() + 1e-3);
    for mut r in m.rows_mut() {
        let s = r.sum();
        r.mapv_inplace(|v| v / s);
    }
    m
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn corrupt(mut g: Array2<f64>, opts: CheckOptions) -> Array2<f64> {
    if opts.corrupt_gradient {
        g += CORRUPTION;
    }
    g
}

/// CE gradient `softmax(z) - p` against central differences.
pub fn check_ce_gradient(opts: CheckOptions) -> Result<CheckResult> {
    let mut rng = rng_from_seed(0x7E0);
    let mut worst = Worst::new();
    let cases = 100;
    for case in 0..cases {
        let c = 2 + case % 9;
        let b = 1 + case % 4;
        let z = random_matrix(&mut rng, b, c, 4.0);
        let p = random_distributions(&mut rng, b, c);
        let analytic = corrupt(ce_loss_and_grad(&z, &p)?.grad, opts);
        let numeric = central_difference(|zz| naive_cross_entropy(zz, &p), &z, FD_STEP);
        let err = max_abs_diff(&analytic, &numeric);
        worst.observe(err, || format!("case {case}: C={c} B={b} z={z:?} p={p:?}"));
    }
    Ok(worst.finish("ce gradient vs finite differences", cases, FD_TOL))
}

/// KL student and log-temperature gradients against central differences.
pub fn check_kl_gradients(opts: CheckOptions) -> Result<CheckResult> {
    let mut rng = rng_from_seed(0x4B1);
    let mut worst = Worst::new();
    let cases = 100;
    for case in 0..cases {
        let c = 2 + case % 9;
        let b = 1 + case % 3;
        let z = random_matrix(&mut rng, b, c, 3.0);
        let s = random_matrix(&mut rng, b, c, 1.0);
        let theta: f64 = rng.random_range(-2.0..1.0);
        let pt = teacher_probs(&s, theta.exp())?;
        let out = kl_teacher_loss_and_grad(&z, &pt)?;
        let analytic = corrupt(out.grad_logits, opts);
        let numeric = central_difference(|zz| naive_kl(zz, &s, theta), &z, FD_STEP);
        let mut err = max_abs_diff(&analytic, &numeric);
        let fd_theta = (naive_kl(&z, &s, theta + FD_STEP) - naive_kl(&z, &s, theta - FD_STEP)) / (2.0 * FD_STEP);
        let g_theta = out.grad_log_temperature + if opts.corrupt_gradient { CORRUPTION } else { 0.0 };
        err = err.max((fd_theta - g_theta).abs());
        worst.observe(err, || format!("case {case}: C={c} B={b} theta={theta} z={z:?} s={s:?}"));
    }
    Ok(worst.finish("kl gradients vs finite differences", cases, FD_TOL))
}

/// Combined CE+KL gradient equals CE against the mixed target, and the loss
/// values differ by `(1 - a) * mean H(P_t)`.
pub fn check_mixed_target_equivalence(opts: CheckOptions) -> Result<CheckResult> {
    let mut rng = rng_from_seed(0x9A1);
    let mut worst = Worst::new();
    let mut cases = 0;
    for batch in 0..100 {
        let c = 2 + batch % 9;
        let b = 1 + batch % 16;
        let z = random_matrix(&mut rng, b, c, 4.0);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let po = one_hot(&labels, c)?;
        let s = random_matrix(&mut rng, b, c, 1.0);
        let pt = teacher_probs(&s, rng.random_range(0.05..2.0))?;
        let entropy = row_entropy(&pt).mean().unwrap_or(0.0);
        for a in [0.0, 0.25, 0.5, 0.75, 1.0] {
            cases += 1;
            let combined = combined_loss(&z, &po, &pt, a, BaseLoss::Ce, None)?;
            let mixed = MixedTarget::new(&po, &pt, a)?;
            let direct = ce_loss_and_grad(&z, &mixed.probs)?;
            let grad_err = max_abs_diff(&corrupt(combined.grad_logits, opts), &direct.grad);
            let offset = direct.loss - combined.loss;
            let offset_err = (offset - (1.0 - a) * entropy).abs();
            // the loss identity is held to its own, looser tolerance
            let err = grad_err.max(offset_err * (EQUIVALENCE_TOL / LOSS_OFFSET_TOL));
            worst.observe(err, || {
                format!("batch {batch} a={a}: grad_err={grad_err:.3e} offset_err={offset_err:.3e} labels={labels:?} z={z:?} s={s:?}")
            });
        }
    }
    Ok(worst.finish("mixed-target gradient equivalence", cases, EQUIVALENCE_TOL))
}

/// Exponentially decaying prior with `pi_0 / pi_{C-1} = imbalance`.
pub fn exponential_prior(classes: usize, imbalance: f64) -> Result<ClassPrior> {
    let raw: Array1<f64> = (0..classes).map(|c| imbalance.powf(-(c as f64) / (classes - 1) as f64)).collect();
    let total = raw.sum();
    ClassPrior::new(raw / total)
}

/// With margins `-log pi` for a strictly decaying prior, the rarest class's
/// target gradient grows and the most frequent class's shrinks.
pub fn check_margin_signs() -> Result<CheckResult> {
    let classes = 10;
    let prior = exponential_prior(classes, 100.0)?;
    let margins = prior.margins();
    let mut rng = rng_from_seed(0x5E2);
    let cases = 1000;
    let mut violations = 0usize;
    let mut first = None;
    for case in 0..cases {
        let z: Array1<f64> = (0..classes).map(|_| rng.random_range(-6.0..6.0)).collect();
        let d = la_gradient_difference(z.view(), margins.view())?;
        if !(d[classes - 1] < 0.0 && d[0] > 0.0) {
            violations += 1;
            first.get_or_insert_with(|| format!("case {case}: z={z} d_g={d}"));
        }
    }
    Ok(CheckResult {
        name: "margin gradient sign property",
        passed: violations == 0,
        cases,
        max_error: violations as f64,
        tolerance: 1.0,
        detail: first,
    })
}

/// Temperature never changes the teacher's argmax, and the overlap ratio
/// equals a plain counting loop.
pub fn check_argmax_invariance() -> Result<CheckResult> {
    let mut rng = rng_from_seed(0xA27);
    let mut worst = Worst::new();
    let cases = 1000;
    for case in 0..cases {
        let c = 2 + case % 15;
        let b = 1 + case % 64;
        let s = random_matrix(&mut rng, b, c, 1.0);
        let t = 10f64.powf(rng.random_range(-2.0..=2.0));
        let raw = text_predicted_labels(&s);
        let tempered = text_predicted_labels(&teacher_probs(&s, t)?);
        let mismatches = raw.iter().zip(&tempered).filter(|(a, b)| a != b).count();
        let observed: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let mut hits = 0usize;
        for i in 0..b {
            if raw[i] == observed[i] {
                hits += 1;
            }
        }
        let naive = hits as f64 / b as f64;
        let or = overlap_ratio(&raw, &observed)?;
        let err = mismatches as f64 + if or == naive { 0.0 } else { 1.0 };
        worst.observe(err, || format!("case {case}: T={t} s={s:?} observed={observed:?}"));
    }
    Ok(worst.finish("argmax temperature invariance + OR", cases, 0.5))
}

/// Runs every check in a fixed order.
pub fn run_all(opts: CheckOptions) -> Result<Vec<CheckResult>> {
    Ok(vec![
        check_ce_gradient(opts)?,
        check_kl_gradients(opts)?,
        check_mixed_target_equivalence(opts)?,
        check_margin_signs()?,
        check_argmax_invariance()?,
    ])
}
