//! Case records, on-disk formats, preprocessing and synthetic phantoms.

pub mod manifest;
pub mod phantom;
pub mod preprocess;
pub mod svol;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::survival::Mask;
use crate::tensor::Tensor;

pub use manifest::{read_manifest, save_cases, write_manifest, Manifest, ManifestEntry};
pub use phantom::{ellipsoid_mask, phantom_survival, synthesize_phantoms, PhantomConfig};
pub use preprocess::{
    augment_scale, compute_norm_stats, downsample, downsample_factor, downsample_mask, normalize, prepare,
    prepare_split, scale_intensities, split, MeanStd, NormStats, PreparedCase, PreparedSplit,
};
pub use svol::{load_volume, save_volume};

/// MRI sequences, in channel order.
pub const MODALITIES: [&str; 4] = ["flair", "t1", "t1ce", "t2"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Resection {
    /// Gross total resection.
    #[serde(rename = "GTR")]
    Gtr,
    /// Subtotal resection.
    #[serde(rename = "STR")]
    Str,
    #[default]
    #[serde(rename = "unknown")]
    Unknown,
}

impl Resection {
    pub fn as_str(self) -> &'static str {
        match self {
            Resection::Gtr => "GTR",
            Resection::Str => "STR",
            Resection::Unknown => "unknown",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "GTR" => Ok(Resection::Gtr),
            "STR" => Ok(Resection::Str),
            "" | "NA" | "unknown" => Ok(Resection::Unknown),
            other => Err(Error::Data(format!("unknown resection status {other:?}"))),
        }
    }
}

/// One patient: four co-registered volumes, demographics and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseRecord {
    pub id: String,
    /// Flair, T1, T1ce, T2.
    pub volumes: [Tensor; 4],
    pub age_years: f64,
    pub survival_days: Option<f64>,
    /// Stored for completeness; the model never reads it.
    pub resection: Resection,
    /// Whole-tumor segmentation, used only for evaluation.
    pub tumor_mask: Option<Mask>,
}

impl CaseRecord {
    pub fn validate(&self) -> Result<()> {
        let shape = self.volumes[0].shape();
        if shape.len() != 3 {
            return Err(Error::Data(format!(
                "case {}: volumes must be rank 3, got {shape:?}",
                self.id
            )));
        }
        for (name, v) in MODALITIES.iter().zip(&self.volumes) {
            if v.shape() != shape {
                return Err(Error::Data(format!(
                    "case {}: {name} volume {:?} differs from flair {shape:?}",
                    self.id,
                    v.shape()
                )));
            }
        }
        if let Some(mask) = &self.tumor_mask {
            if mask.shape() != shape {
                return Err(Error::Data(format!(
                    "case {}: mask {:?} differs from volumes {shape:?}",
                    self.id,
                    mask.shape()
                )));
            }
        }
        if let Some(days) = self.survival_days {
            if !(days >= 0.0 && days.is_finite()) {
                return Err(Error::Data(format!(
                    "case {}: survival days {days} is not >= 0",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn edge(&self) -> usize {
        self.volumes[0].shape()[0]
    }
}
