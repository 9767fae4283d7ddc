//! Raw-feature datasets: images with captions and candidate regions, before
//! any encoder has been applied.

use serde::{Deserialize, Serialize};

use crate::error::{RavlError, Result};
use crate::mitigate::Encoder;
use crate::zeroshot::{EvalDataset, ImageRecord, RegionRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawImage {
    pub id: String,
    /// Ground-truth class index (not visible to the fine-tuning objective).
    pub label: usize,
    pub caption: String,
    pub features: Vec<f64>,
    /// Indices into `RawDataset::regions`.
    pub regions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRegion {
    pub id: String,
    pub image: usize,
    pub bbox: [f64; 4],
    pub features: Vec<f64>,
    pub concept: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RawDataset {
    pub images: Vec<RawImage>,
    pub regions: Vec<RawRegion>,
}

impl RawDataset {
    pub fn feature_dim(&self) -> Option<usize> {
        self.images.first().map(|i| i.features.len())
    }

    /// Applies the encoder to every image and region.
    pub fn embed(&self, encoder: &Encoder) -> Result<EvalDataset> {
        let images = self
            .images
            .iter()
            .map(|img| {
                Ok(ImageRecord {
                    id: img.id.clone(),
                    embedding: encoder.embed(&img.features)?,
                    label: img.label,
                    regions: img.regions.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let regions = self
            .regions
            .iter()
            .map(|r| {
                Ok(RegionRecord {
                    id: r.id.clone(),
                    image: r.image,
                    bbox: r.bbox,
                    embedding: encoder.embed(&r.features)?,
                    concept: r.concept.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalDataset { images, regions })
    }

    /// Whether image `i` has a region tagged with `concept`.
    pub fn has_concept(&self, i: usize, concept: &str) -> bool {
        self.images[i].regions.iter().any(|&r| self.regions[r].concept.as_deref() == Some(concept))
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.feature_dim().unwrap_or(0);
        for img in &self.images {
            if img.features.len() != dim {
                return Err(RavlError::DimMismatch { expected: dim, got: img.features.len() });
            }
            for &r in &img.regions {
                if r >= self.regions.len() {
                    return Err(RavlError::InvalidArgument(format!("image {} references missing region {r}", img.id)));
                }
            }
        }
        for r in &self.regions {
            if r.features.len() != dim {
                return Err(RavlError::DimMismatch { expected: dim, got: r.features.len() });
            }
            if r.image >= self.images.len() {
                return Err(RavlError::InvalidArgument(format!("region {} has no image", r.id)));
            }
        }
        Ok(())
    }
}
