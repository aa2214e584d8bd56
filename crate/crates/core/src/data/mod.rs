//! Label manifests, image preprocessing, patient-level splitting and the
//! synthetic co-occurrence generator.

mod manifest;
mod preprocess;
mod split;
mod synth;

pub use manifest::{
    load_manifest, read_manifest, write_manifest, DatasetManifest, LabelVector, ManifestRow, CHESTXRAY14_CLASSES,
    NO_FINDING,
};
pub use preprocess::{load_raw_image, preprocess_image, resize_bilinear, RawImage, TARGET_EXTENT};
pub use split::{content_hash, patient_split, prevalence_deviation, read_split, write_split, SplitSpec};
pub use synth::{synth_generate, CoocSpec, SyntheticSet};

use std::path::Path;

use rayon::prelude::*;

use crate::error::Result;
use crate::spatial::CxrImage;

/// One preprocessed sample ready for training or evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub patient_id: String,
    pub image: CxrImage,
    pub labels: LabelVector,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    /// Positive count `N_c` per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes()];
        for s in &self.samples {
            for (c, &b) in s.labels.bits().iter().enumerate() {
                counts[c] += b as usize;
            }
        }
        counts
    }

    /// Samples whose ids appear in `ids`, in dataset order.
    pub fn subset(&self, ids: &[String]) -> Dataset {
        let keep: std::collections::HashSet<&str> = ids.iter().map(String::as_str).collect();
        Dataset {
            class_names: self.class_names.clone(),
            samples: self
                .samples
                .iter()
                .filter(|s| keep.contains(s.id.as_str()))
                .cloned()
                .collect(),
        }
    }

    /// Per-class 0/1 label columns.
    pub fn label_columns(&self) -> Vec<Vec<u8>> {
        (0..self.classes())
            .map(|c| self.samples.iter().map(|s| s.labels.bits()[c]).collect())
            .collect()
    }
}

/// Decodes and preprocesses every image of a manifest. Relative image paths
/// are resolved against `root`; output order follows the manifest.
pub fn load_dataset(manifest: &DatasetManifest, root: &Path, target: usize) -> Result<Dataset> {
    let samples = manifest
        .rows
        .par_iter()
        .map(|row| {
            let path = if row.image_path.is_absolute() {
                row.image_path.clone()
            } else {
                root.join(&row.image_path)
            };
            let raw = load_raw_image(&path)?;
            Ok(Sample {
                id: row.sample_id.clone(),
                patient_id: row.patient_id.clone(),
                image: preprocess_image(&raw, target)?,
                labels: row.labels.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        class_names: manifest.class_names.clone(),
        samples,
    })
}
