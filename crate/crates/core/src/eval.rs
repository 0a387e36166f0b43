//! Top-1 accuracy overall, per class and per head/medium/tail group.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingDataset;
use crate::probe::StudentProbe;
use crate::teacher::{text_predicted_labels, TeacherHead};
use crate::{Error, Result};

/// Anything that maps embeddings to hard class predictions.
pub trait Classifier {
    fn predict(&self, images: &Array2<f64>) -> Result<Vec<usize>>;
}

impl Classifier for StudentProbe {
    /// Argmax of the raw (never prior-adjusted) logits.
    fn predict(&self, images: &Array2<f64>) -> Result<Vec<usize>> {
        Ok(text_predicted_labels(&self.logits(images)?))
    }
}

impl Classifier for TeacherHead {
    /// Zero-shot prediction: argmax cosine similarity.
    fn predict(&self, images: &Array2<f64>) -> Result<Vec<usize>> {
        Ok(text_predicted_labels(&self.similarities(images)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Head,
    Medium,
    Tail,
}

/// Ranks classes by count (descending, ties by index) and assigns the top
/// `ceil(C/3)` to head, the bottom `floor(C/3)` to tail, the rest to medium.
/// With fewer than three classes everything is head.
pub fn group_split(counts: &[usize]) -> Vec<Group> {
    let c = counts.len();
    if c < 3 {
        return vec![Group::Head; c];
    }
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let head = c.div_ceil(3);
    let tail = c / 3;
    let mut groups = vec![Group::Medium; c];
    for (rank, &class) in order.iter().enumerate() {
        if rank < head {
            groups[class] = Group::Head;
        } else if rank >= c - tail {
            groups[class] = Group::Tail;
        }
    }
    groups
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub head: Option<f64>,
    pub medium: Option<f64>,
    pub tail: Option<f64>,
}

/// Accuracy report. Classes or groups with no evaluation samples are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub overall: f64,
    pub per_class: Vec<Option<f64>>,
    pub groups: GroupAccuracy,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

impl RunMetrics {
    pub fn from_predictions(predicted: &[usize], truth: &[usize], groups: &[Group]) -> Result<Self> {
        let c = groups.len();
        if predicted.len() != truth.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} predictions for {} labels",
                predicted.len(),
                truth.len()
            )));
        }
        if truth.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut confusion = vec![vec![0u64; c]; c];
        for (index, (&t, &p)) in truth.iter().zip(predicted).enumerate() {
            for label in [t, p] {
                if label >= c {
                    return Err(Error::LabelOutOfRange { index, label, classes: c });
                }
            }
            confusion[t][p] += 1;
        }
        let support: Vec<u64> = confusion.iter().map(|r| r.iter().sum()).collect();
        let correct: Vec<u64> = (0..c).map(|k| confusion[k][k]).collect();
        let per_class = (0..c).map(|k| (support[k] > 0).then(|| correct[k] as f64 / support[k] as f64)).collect();
        let group_acc = |g: Group| {
            let (hit, n) =
                (0..c).filter(|&k| groups[k] == g).fold((0u64, 0u64), |(h, n), k| (h + correct[k], n + support[k]));
            (n > 0).then(|| hit as f64 / n as f64)
        };
        let overall = correct.iter().sum::<u64>() as f64 / truth.len() as f64;
        Ok(Self {
            overall,
            per_class,
            groups: GroupAccuracy {
                head: group_acc(Group::Head),
                medium: group_acc(Group::Medium),
                tail: group_acc(Group::Tail),
            },
            confusion,
        })
    }
}

/// Scores `model` on the dataset's ground-truth labels.
pub fn evaluate<M: Classifier + ?Sized>(model: &M, dataset: &EmbeddingDataset, groups: &[Group]) -> Result<RunMetrics> {
    let truth = dataset.require_true_labels()?;
    if groups.len() != dataset.num_classes() {
        return Err(Error::DimensionMismatch(format!(
            "{} group assignments for {} classes",
            groups.len(),
            dataset.num_classes()
        )));
    }
    let predicted = model.predict(dataset.image_embeddings())?;
    RunMetrics::from_predictions(&predicted, truth, groups)
}

/// Groups derived from a training set: its true-label histogram when
/// available, otherwise the observed one.
pub fn groups_for(train: &EmbeddingDataset) -> Vec<Group> {
    let labels = train.true_labels().unwrap_or(train.observed_labels());
    let mut counts = vec![0; train.num_classes()];
    for &l in labels {
        counts[l] += 1;
    }
    group_split(&counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn split_sizes() {
        let count = |g: &[Group], x: Group| g.iter().filter(|&&v| v == x).count();
        let g = group_split(&[9, 8, 7, 6, 5, 4, 3, 2, 1]);
        assert_eq!((count(&g, Group::Head), count(&g, Group::Medium), count(&g, Group::Tail)), (3, 3, 3));
        let g = group_split(&[10, 9, 8, 7, 6, 5, 4, 3, 2, 1]);
        assert_eq!((count(&g, Group::Head), count(&g, Group::Medium), count(&g, Group::Tail)), (4, 3, 3));
        assert_eq!(&g[..4], &[Group::Head; 4]);
        assert_eq!(&g[7..], &[Group::Tail; 3]);
        assert_eq!(group_split(&[3, 1]), vec![Group::Head, Group::Head]);
    }

    #[test]
    fn split_ties_by_index() {
        let g = group_split(&[5; 6]);
        assert_eq!(g, vec![Group::Head, Group::Head, Group::Medium, Group::Medium, Group::Tail, Group::Tail]);
        // a larger class later in index order still ranks first
        let g = group_split(&[1, 1, 9]);
        assert_eq!(g, vec![Group::Medium, Group::Tail, Group::Head]);
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let truth = vec![0, 0, 0, 1, 1, 2];
        let groups = group_split(&[3, 2, 1]);
        let m = RunMetrics::from_predictions(&truth, &truth, &groups).unwrap();
        assert_eq!(m.overall, 1.0);
        assert!(m.per_class.iter().all(|&a| a == Some(1.0)));
        assert_eq!(m.groups, GroupAccuracy { head: Some(1.0), medium: Some(1.0), tail: Some(1.0) });
        assert_eq!(m.confusion, vec![vec![3, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);

        let m = RunMetrics::from_predictions(&[0; 6], &truth, &groups).unwrap();
        assert_eq!(m.overall, 0.5);
        assert_eq!(m.per_class, vec![Some(1.0), Some(0.0), Some(0.0)]);
    }

    #[test]
    fn random_case_matches_hand_count() {
        let mut rng = crate::rng_from_seed(4);
        let truth: Vec<usize> = (0..60).map(|_| rng.random_range(0..3)).collect();
        let pred: Vec<usize> = (0..60).map(|_| rng.random_range(0..3)).collect();
        let groups = group_split(&[30, 20, 10]);
        let m = RunMetrics::from_predictions(&pred, &truth, &groups).unwrap();
        for t in 0..3 {
            for p in 0..3 {
                let n = truth.iter().zip(&pred).filter(|&(&a, &b)| a == t && b == p).count() as u64;
                assert_eq!(m.confusion[t][p], n);
            }
        }
        let trace: u64 = (0..3).map(|k| m.confusion[k][k]).sum();
        assert!((m.overall - trace as f64 / 60.0).abs() < 1e-12);
        // groups are sample-weighted, so their weighted mean is the overall
        let supports: Vec<f64> = (0..3).map(|k| m.confusion[k].iter().sum::<u64>() as f64).collect();
        let weighted = m.groups.head.unwrap() * supports[0]
            + m.groups.medium.unwrap() * supports[1]
            + m.groups.tail.unwrap() * supports[2];
        assert!((weighted / 60.0 - m.overall).abs() < 1e-12);
    }

    #[test]
    fn json_schema() {
        let m = RunMetrics::from_predictions(&[0, 1], &[0, 0], &[Group::Head, Group::Head]).unwrap();
        let v = serde_json::to_value(&m).unwrap();
        for key in ["overall", "per_class", "groups", "confusion"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert!(v["groups"]["tail"].is_null());
    }
}
