//! Linear student probe and its checkpoint format.
//!
//! Checkpoint layout (little-endian): magic `WTSPRB1\0`, u32 C, u32 D,
//! C*D f32 weights (row-major), C f32 bias, f32 log-temperature.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};

use crate::{Error, Result};

pub const PROBE_MAGIC: &[u8; 8] = b"WTSPRB1\0";

/// `z = W f + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentProbe {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Parameter gradients of a [`StudentProbe`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeGrad {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl StudentProbe {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self { weights: Array2::zeros((classes, dim)), bias: Array1::zeros(classes) }
    }

    pub fn num_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn logits(&self, images: &Array2<f64>) -> Result<Array2<f64>> {
        if images.ncols() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "images have dim {}, probe expects {}",
                images.ncols(),
                self.dim()
            )));
        }
        Ok(images.dot(&self.weights.t()) + &self.bias)
    }

    /// Back-propagates `grad_logits` (B x C) through the linear map.
    pub fn backward(&self, images: &Array2<f64>, grad_logits: &Array2<f64>) -> ProbeGrad {
        ProbeGrad { weights: grad_logits.t().dot(images), bias: grad_logits.sum_axis(Axis(0)) }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

/// A trained probe plus the teacher's learned log-temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub probe: StudentProbe,
    pub log_temperature: f64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let (c, d) = self.probe.weights.dim();
        let mut out = Vec::with_capacity(16 + 4 * (c * d + c + 1));
        out.extend_from_slice(PROBE_MAGIC);
        out.extend_from_slice(&(c as u32).to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        for &v in self.probe.weights.iter().chain(self.probe.bias.iter()) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend_from_slice(&(self.log_temperature as f32).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Truncated(format!("checkpoint header needs 16 bytes, got {}", bytes.len())));
        }
        if &bytes[..8] != PROBE_MAGIC {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(PROBE_MAGIC).into_owned(),
                found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
            });
        }
        let c = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let expected = 16 + 4 * (c * d + c + 1);
        if bytes.len() < expected {
            return Err(Error::Truncated(format!("checkpoint needs {expected} bytes, got {}", bytes.len())));
        }
        if bytes.len() > expected {
            return Err(Error::invalid(format!("{} trailing bytes in checkpoint", bytes.len() - expected)));
        }
        let values: Vec<f64> =
            bytes[16..].chunks_exact(4).map(|ch| f32::from_le_bytes(ch.try_into().unwrap()) as f64).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        let weights = Array2::from_shape_vec((c, d), values[..c * d].to_vec()).expect("sized above");
        let bias = Array1::from(values[c * d..c * d + c].to_vec());
        Ok(Self { probe: StudentProbe { weights, bias }, log_temperature: values[c * d + c] })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
