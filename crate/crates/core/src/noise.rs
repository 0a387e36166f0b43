//! Long-tailed subsampling and label corruption.
//!
//! Classes are indexed head-first: class 0 keeps `n_max` samples and class
//! `C-1` keeps `n_max / IF`. Noise is applied to the subsampled set through a
//! row-stochastic transition matrix `T[i][j] = P(observed = j | true = i)`.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::index;
use rand::Rng as _;

use crate::{rng_from_seed, Error, Result};

/// Tolerance for row sums of a transition matrix.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Per-class sample counts `n_c`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassHistogram(Vec<usize>);

impl ClassHistogram {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if counts.len() < 2 {
            return Err(Error::invalid(format!("histogram needs at least 2 classes, got {}", counts.len())));
        }
        if counts.iter().sum::<usize>() == 0 {
            return Err(Error::EmptyDataset);
        }
        Ok(Self(counts))
    }

    /// Counts labels in `[0, classes)`.
    pub fn from_labels(labels: &[usize], classes: usize) -> Result<Self> {
        let mut counts = vec![0; classes];
        for (index, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(Error::LabelOutOfRange { index, label, classes });
            }
            counts[label] += 1;
        }
        Self::new(counts)
    }

    pub fn counts(&self) -> &[usize] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    /// Ratio of the largest to the smallest class count.
    pub fn imbalance_factor(&self) -> f64 {
        let max = *self.0.iter().max().unwrap_or(&0) as f64;
        let min = *self.0.iter().min().unwrap_or(&0) as f64;
        max / min
    }
}

/// Target class counts for an exponentially decaying long tail.
///
/// Class `c` (0-indexed) gets `round(n_max * IF^(-c/(C-1)))`, rounded half
/// to even and never below 1.
pub fn longtail_counts(classes: usize, imbalance_factor: f64, n_max: usize) -> Result<Vec<usize>> {
    if classes < 2 {
        return Err(Error::invalid("long-tail construction needs C >= 2"));
    }
    if !imbalance_factor.is_finite() || imbalance_factor < 1.0 {
        return Err(Error::invalid(format!("imbalance factor must be >= 1, got {imbalance_factor}")));
    }
    if n_max == 0 {
        return Err(Error::invalid("n_max must be positive"));
    }
    let last = (classes - 1) as f64;
    Ok((0..classes)
        .map(|c| {
            let exact = n_max as f64 * imbalance_factor.powf(-(c as f64) / last);
            (exact.round_ties_even() as usize).max(1)
        })
        .collect())
}

/// Draws a long-tailed subset from per-class candidate index lists.
///
/// Returns the selected indices (grouped by class, ascending within each
/// class) and the resulting histogram. Selection within a class is uniform
/// without replacement.
pub fn subsample_longtail(
    per_class: &[Vec<usize>],
    imbalance_factor: f64,
    n_max: usize,
    seed: u64,
) -> Result<(Vec<usize>, ClassHistogram)> {
    let targets = longtail_counts(per_class.len(), imbalance_factor, n_max)?;
    for (class, (pool, &need)) in per_class.iter().zip(&targets).enumerate() {
        if pool.len() < need {
            return Err(Error::InsufficientSamples { class, available: pool.len(), required: need });
        }
    }
    let mut rng = rng_from_seed(seed);
    let mut selected = Vec::with_capacity(targets.iter().sum());
    for (pool, &need) in per_class.iter().zip(&targets) {
        let mut picked: Vec<usize> = index::sample(&mut rng, pool.len(), need).into_iter().map(|k| pool[k]).collect();
        picked.sort_unstable();
        selected.extend(picked);
    }
    Ok((selected, ClassHistogram::new(targets)?))
}

/// Groups sample indices by label.
pub fn indices_by_class(labels: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut out = vec![Vec::new(); classes];
    for (index, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange { index, label, classes });
        }
        out[label].push(index);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    Joint,
    Symmetric,
    Asymmetric,
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseKind::Joint => "joint",
            NoiseKind::Symmetric => "symmetric",
            NoiseKind::Asymmetric => "asymmetric",
        })
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "joint" | "jn" => Ok(NoiseKind::Joint),
            "symmetric" | "sn" => Ok(NoiseKind::Symmetric),
            "asymmetric" | "an" => Ok(NoiseKind::Asymmetric),
            other => Err(Error::invalid(format!("unknown noise kind {other:?}"))),
        }
    }
}

/// Row-stochastic label-corruption matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    kind: NoiseKind,
    gamma: f64,
    rows: Array2<f64>,
    mapping: Option<Vec<usize>>,
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::invalid(format!("noise ratio must be in [0, 1), got {gamma}")));
    }
    Ok(())
}

impl TransitionMatrix {
    /// Joint noise: off-diagonal mass proportional to the target class size,
    /// `T[i][j] = gamma * n_j / (N - n_i)`.
    pub fn joint(histogram: &ClassHistogram, gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        let counts = histogram.counts();
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::invalid(format!("joint noise needs n_c > 0, class {c} is empty")));
        }
        let total = histogram.total();
        let c = counts.len();
        let mut rows = Array2::zeros((c, c));
        for i in 0..c {
            let others = total - counts[i];
            if others == 0 {
                return Err(Error::invalid(format!("class {i} holds every sample")));
            }
            for j in 0..c {
                rows[[i, j]] = if i == j { 1.0 - gamma } else { counts[j] as f64 / others as f64 * gamma };
            }
        }
        Ok(Self { kind: NoiseKind::Joint, gamma, rows, mapping: None })
    }

    /// Symmetric noise: `gamma / C` everywhere plus `1 - gamma` on the diagonal.
    pub fn symmetric(classes: usize, gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        if classes < 2 {
            return Err(Error::invalid("symmetric noise needs C >= 2"));
        }
        let off = gamma / classes as f64;
        let mut rows = Array2::from_elem((classes, classes), off);
        for i in 0..classes {
            rows[[i, i]] = off + (1.0 - gamma);
        }
        Ok(Self { kind: NoiseKind::Symmetric, gamma, rows, mapping: None })
    }

    /// Asymmetric noise: each class flips to exactly one other class.
    pub fn asymmetric(classes: usize, gamma: f64, mapping: &[usize]) -> Result<Self> {
        check_gamma(gamma)?;
        if classes < 2 {
            return Err(Error::invalid("asymmetric noise needs C >= 2"));
        }
        if mapping.len() != classes {
            return Err(Error::DimensionMismatch(format!(
                "mapping has {} entries for {classes} classes",
                mapping.len()
            )));
        }
        let mut rows = Array2::zeros((classes, classes));
        for (i, &j) in mapping.iter().enumerate() {
            if j >= classes {
                return Err(Error::LabelOutOfRange { index: i, label: j, classes });
            }
            if j == i {
                return Err(Error::invalid(format!("mapping has a fixed point at class {i}")));
            }
            rows[[i, i]] = 1.0 - gamma;
            rows[[i, j]] = gamma;
        }
        Ok(Self { kind: NoiseKind::Asymmetric, gamma, rows, mapping: Some(mapping.to_vec()) })
    }

    pub fn kind(&self) -> NoiseKind {
        self.kind
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn mapping(&self) -> Option<&[usize]> {
        self.mapping.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.rows.nrows()
    }

    /// Largest deviation of any row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        self.rows.rows().into_iter().map(|r| (r.sum() - 1.0).abs()).fold(0.0, f64::max)
    }
}

/// Cyclic shift `i -> (i + 1) mod C`, the default asymmetric target.
pub fn cyclic_mapping(classes: usize) -> Vec<usize> {
    (0..classes).map(|i| (i + 1) % classes).collect()
}

/// Ground-truth and observed labels for one corruption run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelAssignment {
    pub classes: usize,
    pub true_labels: Vec<usize>,
    pub observed_labels: Vec<usize>,
    pub seed: u64,
}

impl LabelAssignment {
    pub fn flip_rate(&self) -> f64 {
        let flips = self.true_labels.iter().zip(&self.observed_labels).filter(|(t, o)| t != o).count();
        flips as f64 / self.true_labels.len().max(1) as f64
    }

    /// Text form: header `C N seed`, then one `true observed` pair per line.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{} {} {}", self.classes, self.true_labels.len(), self.seed)?;
        for (t, o) in self.true_labels.iter().zip(&self.observed_labels) {
            writeln!(w, "{t} {o}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let header = match lines.next() {
            Some((_, line)) => line?,
            None => return Err(Error::Truncated("missing label file header".into())),
        };
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse { line: 1, msg: format!("expected `C N seed`, got {header:?}") });
        }
        let parse = |s: &str, line: usize| -> Result<u64> {
            s.parse().map_err(|_| Error::Parse { line, msg: format!("not an integer: {s:?}") })
        };
        let classes = parse(fields[0], 1)? as usize;
        let n = parse(fields[1], 1)? as usize;
        let seed = parse(fields[2], 1)?;
        let mut true_labels = Vec::with_capacity(n);
        let mut observed_labels = Vec::with_capacity(n);
        for (idx, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(t), Some(o), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Parse { line: idx + 1, msg: format!("expected two labels, got {line:?}") });
            };
            let t = parse(t, idx + 1)? as usize;
            let o = parse(o, idx + 1)? as usize;
            for label in [t, o] {
                if label >= classes {
                    return Err(Error::LabelOutOfRange { index: true_labels.len(), label, classes });
                }
            }
            true_labels.push(t);
            observed_labels.push(o);
        }
        if true_labels.len() != n {
            return Err(Error::Truncated(format!("header declares {n} labels, found {}", true_labels.len())));
        }
        Ok(Self { classes, true_labels, observed_labels, seed })
    }
}

/// Draws one observed label per true label from the matrix row.
pub fn apply_noise(true_labels: &[usize], matrix: &TransitionMatrix, seed: u64) -> Result<LabelAssignment> {
    let classes = matrix.num_classes();
    let mut rng = rng_from_seed(seed);
    let mut observed = Vec::with_capacity(true_labels.len());
    for (index, &label) in true_labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange { index, label, classes });
        }
        let row = matrix.rows.row(label);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = None;
        for (j, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = Some(j);
                break;
            }
        }
        // rounding can leave `acc` a hair below 1; fall back to the last
        // class with positive mass
        let pick = pick.unwrap_or_else(|| row.iter().rposition(|&p| p > 0.0).unwrap_or(label));
        observed.push(pick);
    }
    Ok(LabelAssignment { classes, true_labels: true_labels.to_vec(), observed_labels: observed, seed })
}
