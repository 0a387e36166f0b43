//! Embedding datasets: image features, labels and class text prototypes.
//!
//! On disk (`WTSEMB1\0`, little-endian):
//!
//! ```text
//! magic[8] | u32 N | u32 D | u32 C | u8 has_true_labels
//! N*D f32 image embeddings (row-major)
//! N u32 observed labels
//! [N u32 true labels]             if has_true_labels
//! C*D f32 text embeddings
//! C x (u16 len | utf-8 bytes)      class names
//! ```
//!
//! In memory every value is `f64`. Values are always exactly representable
//! as `f32` so a save/load cycle is lossless.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};

use crate::{rng_from_seed, Error, Result, Rng};

pub const EMBEDDING_MAGIC: &[u8; 8] = b"WTSEMB1\0";

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    image_embeddings: Array2<f64>,
    observed_labels: Vec<usize>,
    true_labels: Option<Vec<usize>>,
    text_embeddings: Array2<f64>,
    class_names: Vec<String>,
}

impl EmbeddingDataset {
    pub fn new(
        image_embeddings: Array2<f64>,
        observed_labels: Vec<usize>,
        true_labels: Option<Vec<usize>>,
        text_embeddings: Array2<f64>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let (n, d) = image_embeddings.dim();
        let c = text_embeddings.nrows();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if d < 2 {
            return Err(Error::invalid(format!("embedding dimension must be >= 2, got {d}")));
        }
        if c < 2 {
            return Err(Error::invalid(format!("need at least 2 classes, got {c}")));
        }
        if text_embeddings.ncols() != d {
            return Err(Error::DimensionMismatch(format!(
                "text embeddings have dim {}, image embeddings {d}",
                text_embeddings.ncols()
            )));
        }
        if class_names.len() != c {
            return Err(Error::DimensionMismatch(format!("{} class names for {c} classes", class_names.len())));
        }
        if observed_labels.len() != n {
            return Err(Error::DimensionMismatch(format!("{} observed labels for {n} samples", observed_labels.len())));
        }
        if image_embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image embeddings".into()));
        }
        if text_embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("text embeddings".into()));
        }
        check_labels(&observed_labels, c)?;
        if let Some(t) = &true_labels {
            if t.len() != n {
                return Err(Error::DimensionMismatch(format!("{} true labels for {n} samples", t.len())));
            }
            check_labels(t, c)?;
        }
        for (i, row) in text_embeddings.rows().into_iter().enumerate() {
            if row.dot(&row) == 0.0 {
                return Err(Error::ZeroRow(i));
            }
        }
        Ok(Self { image_embeddings, observed_labels, true_labels, text_embeddings, class_names })
    }

    pub fn len(&self) -> usize {
        self.image_embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.image_embeddings.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.text_embeddings.nrows()
    }

    pub fn image_embeddings(&self) -> &Array2<f64> {
        &self.image_embeddings
    }

    pub fn observed_labels(&self) -> &[usize] {
        &self.observed_labels
    }

    pub fn true_labels(&self) -> Option<&[usize]> {
        self.true_labels.as_deref()
    }

    /// True labels, or an error naming the missing field.
    pub fn require_true_labels(&self) -> Result<&[usize]> {
        self.true_labels().ok_or_else(|| Error::MissingField("true_labels".into()))
    }

    pub fn text_embeddings(&self) -> &Array2<f64> {
        &self.text_embeddings
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// Rows `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let n = self.len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!("index {bad} out of range for {n} samples")));
        }
        Self::new(
            self.image_embeddings.select(Axis(0), indices),
            indices.iter().map(|&i| self.observed_labels[i]).collect(),
            self.true_labels.as_ref().map(|t| indices.iter().map(|&i| t[i]).collect()),
            self.text_embeddings.clone(),
            self.class_names.clone(),
        )
    }

    pub fn with_observed_labels(&self, observed: Vec<usize>) -> Result<Self> {
        Self::new(
            self.image_embeddings.clone(),
            observed,
            self.true_labels.clone(),
            self.text_embeddings.clone(),
            self.class_names.clone(),
        )
    }

    /// Splits off a class-balanced holdout of `per_class` samples per true
    /// class. Returns `(rest, holdout)`, both keeping original row order.
    pub fn split_holdout(&self, per_class: usize, seed: u64) -> Result<(Self, Self)> {
        let truth = self.require_true_labels()?;
        let pools = crate::noise::indices_by_class(truth, self.num_classes())?;
        let mut rng = rng_from_seed(seed);
        let mut held = vec![false; self.len()];
        for (class, pool) in pools.iter().enumerate() {
            if pool.len() < per_class {
                return Err(Error::InsufficientSamples { class, available: pool.len(), required: per_class });
            }
            for k in index::sample(&mut rng, pool.len(), per_class) {
                held[pool[k]] = true;
            }
        }
        let rest: Vec<usize> = (0..self.len()).filter(|&i| !held[i]).collect();
        let holdout: Vec<usize> = (0..self.len()).filter(|&i| held[i]).collect();
        Ok((self.subset(&rest)?, self.subset(&holdout)?))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (n, d) = self.image_embeddings.dim();
        let c = self.num_classes();
        let mut out = Vec::with_capacity(25 + 4 * (n * d + 2 * n + c * d));
        out.extend_from_slice(EMBEDDING_MAGIC);
        for v in [n, d, c] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(self.true_labels.is_some() as u8);
        for &v in self.image_embeddings.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &l in &self.observed_labels {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
        if let Some(t) = &self.true_labels {
            for &l in t {
                out.extend_from_slice(&(l as u32).to_le_bytes());
            }
        }
        for &v in self.text_embeddings.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for name in &self.class_names {
            let bytes = name.as_bytes();
            let len = bytes.len().min(u16::MAX as usize);
            out.extend_from_slice(&(len as u16).to_le_bytes());
            out.extend_from_slice(&bytes[..len]);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != EMBEDDING_MAGIC {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(EMBEDDING_MAGIC).into_owned(),
                found: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let n = r.u32("header")? as usize;
        let d = r.u32("header")? as usize;
        let c = r.u32("header")? as usize;
        let has_true = r.take(1, "header")?[0];
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if has_true > 1 {
            return Err(Error::invalid(format!("has_true_labels flag must be 0 or 1, got {has_true}")));
        }
        let image = r.f32_matrix(n, d, "image embeddings")?;
        let observed = r.u32_labels(n, c, "observed labels")?;
        let truth = if has_true == 1 { Some(r.u32_labels(n, c, "true labels")?) } else { None };
        let text = r.f32_matrix(c, d, "text embeddings")?;
        let mut names = Vec::with_capacity(c);
        for _ in 0..c {
            let len = u16::from_le_bytes(r.take(2, "class names")?.try_into().unwrap()) as usize;
            let raw = r.take(len, "class names")?;
            let name = std::str::from_utf8(raw).map_err(|_| Error::invalid("class name is not valid UTF-8"))?;
            names.push(name.to_owned());
        }
        if r.pos != bytes.len() {
            return Err(Error::invalid(format!("{} trailing bytes after class names", bytes.len() - r.pos)));
        }
        Self::new(image, observed, truth, text, names)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().position(|&l| l >= classes) {
        Some(index) => Err(Error::LabelOutOfRange { index, label: labels[index], classes }),
        None => Ok(()),
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated(format!(
                "need {len} bytes for {what} at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32_matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<Array2<f64>> {
        let len = rows.checked_mul(cols).and_then(|v| v.checked_mul(4));
        let raw = self.take(len.ok_or_else(|| Error::Truncated(what.into()))?, what)?;
        let mut values = Vec::with_capacity(rows * cols);
        for chunk in raw.chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::NonFinite(what.into()));
            }
            values.push(v as f64);
        }
        Ok(Array2::from_shape_vec((rows, cols), values).expect("shape checked"))
    }

    fn u32_labels(&mut self, n: usize, classes: usize, what: &str) -> Result<Vec<usize>> {
        let raw = self.take(n * 4, what)?;
        let labels: Vec<usize> =
            raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize).collect();
        check_labels(&labels, classes)?;
        Ok(labels)
    }
}

/// Scales each row to unit L2 norm.
pub fn normalize_rows(matrix: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = matrix.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroRow(i));
        }
        row.mapv_inplace(|v| v / norm);
    }
    Ok(out)
}

/// Parameters for the Gaussian-cluster stand-in for a vision-language encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    /// Isotropic standard deviation added to each class centroid.
    pub cluster_spread: f64,
    /// 1 puts each text prototype on its class centroid; smaller values mix
    /// in a random direction.
    pub teacher_quality: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.dim < 2 || self.samples_per_class == 0 {
            return Err(Error::invalid("synthetic spec needs C >= 2, D >= 2, samples_per_class >= 1"));
        }
        if !(self.cluster_spread.is_finite() && self.cluster_spread > 0.0) {
            return Err(Error::invalid("cluster_spread must be positive"));
        }
        if !(self.teacher_quality > 0.0 && self.teacher_quality <= 1.0) {
            return Err(Error::invalid("teacher_quality must be in (0, 1]"));
        }
        Ok(())
    }
}

fn random_unit(rng: &mut Rng, dim: usize) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.dot(&v).sqrt();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

fn to_f32_precision(mut m: Array2<f64>) -> Array2<f64> {
    m.mapv_inplace(|v| v as f32 as f64);
    m
}

/// Generates a clean (observed == true) dataset laid out class by class.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<EmbeddingDataset> {
    spec.validate()?;
    let (c, d, per) = (spec.classes, spec.dim, spec.samples_per_class);
    let mut rng = rng_from_seed(spec.seed);

    let centroids: Vec<Array1<f64>> = (0..c).map(|_| random_unit(&mut rng, d)).collect();
    let mut text = Array2::zeros((c, d));
    for (k, centroid) in centroids.iter().enumerate() {
        let noise = random_unit(&mut rng, d);
        let mixed = centroid * spec.teacher_quality + noise * (1.0 - spec.teacher_quality);
        text.row_mut(k).assign(&mixed);
    }
    let text = normalize_rows(&text)?;

    let mut image = Array2::zeros((c * per, d));
    for (k, centroid) in centroids.iter().enumerate() {
        for s in 0..per {
            let mut row = image.row_mut(k * per + s);
            for (j, v) in row.iter_mut().enumerate() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = centroid[j] + spec.cluster_spread * z;
            }
        }
    }
    let image = normalize_rows(&image)?;
    let labels: Vec<usize> = (0..c).flat_map(|k| std::iter::repeat_n(k, per)).collect();
    EmbeddingDataset::new(
        to_f32_precision(image),
        labels.clone(),
        Some(labels),
        to_f32_precision(text),
        (0..c).map(|k| format!("class_{k}")).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny() -> EmbeddingDataset {
        EmbeddingDataset::new(
            array![[0.6, 0.8], [1.0, 0.0], [0.0, 1.0]],
            vec![0, 1, 1],
            Some(vec![0, 0, 1]),
            array![[1.0, 0.0], [0.0, 1.0]],
            vec!["cat".into(), "dog".into()],
        )
        .unwrap()
    }

    #[test]
    fn normalize_examples() {
        let n = normalize_rows(&array![[3.0, 4.0]]).unwrap();
        assert!((n[[0, 0]] - 0.6).abs() < 1e-15 && (n[[0, 1]] - 0.8).abs() < 1e-15);
        let unit = array![[1.0, 0.0], [0.0, -1.0]];
        assert_eq!(normalize_rows(&unit).unwrap(), unit);
        assert!(matches!(normalize_rows(&array![[0.0, 0.0]]), Err(Error::ZeroRow(0))));
    }

    #[test]
    fn bytes_round_trip() {
        let ds = tiny();
        let bytes = ds.to_bytes();
        let back = EmbeddingDataset::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.class_names(), ds.class_names());
        assert_eq!(back.true_labels(), ds.true_labels());
    }

    #[test]
    fn header_layout() {
        let bytes = tiny().to_bytes();
        assert_eq!(&bytes[..8], b"WTSEMB1\0");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 2);
        assert_eq!(bytes[20], 1);
        // 21 header + 24 image + 12 observed + 12 true + 16 text + (2+3)*2 names
        assert_eq!(bytes.len(), 21 + 24 + 12 + 12 + 16 + 10);
    }

    #[test]
    fn load_errors_are_distinct() {
        let good = tiny().to_bytes();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(EmbeddingDataset::from_bytes(&bad), Err(Error::BadMagic { .. })));

        assert!(matches!(EmbeddingDataset::from_bytes(&good[..good.len() - 3]), Err(Error::Truncated(_))));

        let mut empty = good[..21].to_vec();
        empty[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(EmbeddingDataset::from_bytes(&empty), Err(Error::EmptyDataset)));

        let mut nan = good.clone();
        nan[21..25].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(EmbeddingDataset::from_bytes(&nan), Err(Error::NonFinite(_))));

        let mut label = good.clone();
        // first observed label sits after the 3x2 image block
        label[45..49].copy_from_slice(&2u32.to_le_bytes());
        let err = EmbeddingDataset::from_bytes(&label).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { label: 2, classes: 2, .. }));
        assert!(err.to_string().contains("label out of range"));
    }

    #[test]
    fn subset_and_holdout() {
        let spec = SyntheticSpec {
            classes: 3,
            dim: 4,
            samples_per_class: 10,
            cluster_spread: 0.1,
            teacher_quality: 1.0,
            seed: 5,
        };
        let ds = generate_synthetic(&spec).unwrap();
        let (rest, held) = ds.split_holdout(4, 9).unwrap();
        assert_eq!(held.len(), 12);
        assert_eq!(rest.len(), 18);
        let t = held.true_labels().unwrap();
        for c in 0..3 {
            assert_eq!(t.iter().filter(|&&l| l == c).count(), 4);
        }
        assert!(ds.split_holdout(11, 9).is_err());
    }

    #[test]
    fn synthetic_is_reproducible_and_unit() {
        let spec = SyntheticSpec {
            classes: 4,
            dim: 8,
            samples_per_class: 20,
            cluster_spread: 0.3,
            teacher_quality: 0.7,
            seed: 123,
        };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        for row in a.image_embeddings().rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
        }
        let c = generate_synthetic(&SyntheticSpec { seed: 124, ..spec }).unwrap();
        assert_ne!(a.image_embeddings(), c.image_embeddings());
    }

    #[test]
    fn rejects_bad_spec() {
        let spec = SyntheticSpec {
            classes: 4,
            dim: 8,
            samples_per_class: 20,
            cluster_spread: 0.3,
            teacher_quality: 1.5,
            seed: 1,
        };
        assert!(generate_synthetic(&spec).is_err());
    }
}
