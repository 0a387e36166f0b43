//! Frozen text-prototype teacher.
//!
//! The teacher scores an image embedding against every class prototype by
//! cosine similarity, predicts the argmax class, and turns the similarities
//! into a distribution with a learnable temperature `T = exp(theta)`.

use ndarray::{Array2, ArrayView1};

use crate::losses::softmax_rows;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherHead {
    prototypes: Array2<f64>,
    prototype_norms: Vec<f64>,
    /// `theta` with `T = exp(theta)`; the only trainable teacher parameter.
    pub log_temperature: f64,
}

/// Similarities, teacher distribution and hard predictions for one batch.
#[derive(Debug, Clone)]
pub struct TeacherOutput {
    pub similarities: Array2<f64>,
    pub probabilities: Array2<f64>,
    pub predicted_labels: Vec<usize>,
}

fn row_norms(m: &Array2<f64>) -> Result<Vec<f64>> {
    m.rows()
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let n = r.dot(&r).sqrt();
            if n > 0.0 && n.is_finite() {
                Ok(n)
            } else {
                Err(Error::ZeroRow(i))
            }
        })
        .collect()
}

impl TeacherHead {
    /// Teacher over `prototypes` (one row per class) at temperature 1.
    pub fn new(prototypes: Array2<f64>) -> Result<Self> {
        let prototype_norms = row_norms(&prototypes)?;
        Ok(Self { prototypes, prototype_norms, log_temperature: 0.0 })
    }

    pub fn prototypes(&self) -> &Array2<f64> {
        &self.prototypes
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.nrows()
    }

    pub fn temperature(&self) -> f64 {
        self.log_temperature.exp()
    }

    /// Cosine similarity `s[i][c]` between image `i` and prototype `c`.
    pub fn similarities(&self, images: &Array2<f64>) -> Result<Array2<f64>> {
        if images.ncols() != self.prototypes.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "images have dim {}, prototypes {}",
                images.ncols(),
                self.prototypes.ncols()
            )));
        }
        let image_norms = row_norms(images)?;
        let mut s = images.dot(&self.prototypes.t());
        for (mut row, fi) in s.rows_mut().into_iter().zip(&image_norms) {
            for (v, tc) in row.iter_mut().zip(&self.prototype_norms) {
                *v = (*v / (fi * tc)).clamp(-1.0, 1.0);
            }
        }
        Ok(s)
    }

    /// `softmax(s / T)` per row.
    pub fn probs(&self, similarities: &Array2<f64>) -> Result<Array2<f64>> {
        teacher_probs(similarities, self.temperature())
    }

    pub fn predict(&self, images: &Array2<f64>) -> Result<TeacherOutput> {
        let similarities = self.similarities(images)?;
        let probabilities = self.probs(&similarities)?;
        let predicted_labels = text_predicted_labels(&similarities);
        Ok(TeacherOutput { similarities, probabilities, predicted_labels })
    }
}

/// Row-wise `softmax(s / temperature)`.
pub fn teacher_probs(similarities: &Array2<f64>, temperature: f64) -> Result<Array2<f64>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    Ok(softmax_rows(&(similarities / temperature)))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Per-row argmax of similarities or probabilities.
pub fn text_predicted_labels(scores: &Array2<f64>) -> Vec<usize> {
    scores.rows().into_iter().map(argmax).collect()
}

/// Fraction of the batch where the teacher's label equals the observed one.
pub fn overlap_ratio(predicted: &[usize], observed: &[usize]) -> Result<f64> {
    if predicted.len() != observed.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predicted vs {} observed labels",
            predicted.len(),
            observed.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let hits = predicted.iter().zip(observed).filter(|(p, o)| p == o).count();
    Ok(hits as f64 / predicted.len() as f64)
}
