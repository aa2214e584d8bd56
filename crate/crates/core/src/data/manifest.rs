use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NO_FINDING: &str = "No Finding";

/// The fourteen pathology labels of the public chest X-ray release.
pub const CHESTXRAY14_CLASSES: [&str; 14] = [
    "Atelectasis",
    "Cardiomegaly",
    "Effusion",
    "Infiltration",
    "Mass",
    "Nodule",
    "Pneumonia",
    "Pneumothorax",
    "Consolidation",
    "Edema",
    "Emphysema",
    "Fibrosis",
    "Pleural_Thickening",
    "Hernia",
];

/// Binary indicator per class; the all-zero vector means "No Finding".
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelVector {
    bits: Vec<u8>,
}

impl LabelVector {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::Argument(format!("label entries must be 0 or 1, found {b}")));
        }
        Ok(Self { bits })
    }

    pub fn zeros(classes: usize) -> Self {
        Self { bits: vec![0; classes] }
    }

    pub fn from_indices(classes: usize, indices: &[usize]) -> Self {
        let mut bits = vec![0; classes];
        for &i in indices {
            bits[i] = 1;
        }
        Self { bits }
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as f64).collect()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub sample_id: String,
    pub image_path: PathBuf,
    pub patient_id: String,
    pub labels: LabelVector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub rows: Vec<ManifestRow>,
}

impl DatasetManifest {
    pub fn new(class_names: Vec<String>) -> Self {
        Self {
            class_names,
            rows: Vec::new(),
        }
    }

    pub fn total(&self) -> usize {
        self.rows.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for row in &self.rows {
            for (c, &b) in row.labels.bits().iter().enumerate() {
                counts[c] += b as usize;
            }
        }
        counts
    }

    fn label_string(&self, labels: &LabelVector) -> String {
        let names: Vec<&str> = labels
            .bits()
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == 1)
            .map(|(c, _)| self.class_names[c].as_str())
            .collect();
        if names.is_empty() {
            NO_FINDING.to_string()
        } else {
            names.join("|")
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    sample_id: String,
    image: String,
    patient_id: String,
    labels: String,
}

/// Parses a manifest CSV with columns `sample_id,image,patient_id,labels`,
/// where `labels` is a `|`-separated list of class names or `No Finding`.
pub fn read_manifest<R: Read>(reader: R, class_names: &[String]) -> Result<DatasetManifest> {
    let mut manifest = DatasetManifest::new(class_names.to_vec());
    let mut seen = HashSet::new();
    let mut rdr = csv::Reader::from_reader(reader);
    for (i, rec) in rdr.deserialize::<CsvRow>().enumerate() {
        let row_number = i + 1;
        let rec = rec.map_err(|e| Error::Parse {
            row: row_number,
            message: e.to_string(),
        })?;
        let mut bits = vec![0u8; class_names.len()];
        for name in rec.labels.split('|').map(str::trim).filter(|s| !s.is_empty()) {
            if name == NO_FINDING {
                continue;
            }
            let c = class_names.iter().position(|n| n == name).ok_or_else(|| Error::Parse {
                row: row_number,
                message: format!("unknown label `{name}`"),
            })?;
            bits[c] = 1;
        }
        if !seen.insert(rec.sample_id.clone()) {
            return Err(Error::Integrity(format!(
                "duplicate sample_id `{}` at row {row_number}",
                rec.sample_id
            )));
        }
        manifest.rows.push(ManifestRow {
            sample_id: rec.sample_id,
            image_path: PathBuf::from(rec.image),
            patient_id: rec.patient_id,
            labels: LabelVector { bits },
        });
    }
    Ok(manifest)
}

pub fn load_manifest(path: &Path, class_names: &[String]) -> Result<DatasetManifest> {
    let file = std::fs::File::open(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    read_manifest(file, class_names)
}

pub fn write_manifest<W: Write>(writer: W, manifest: &DatasetManifest) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in &manifest.rows {
        w.serialize(CsvRow {
            sample_id: row.sample_id.clone(),
            image: row.image_path.to_string_lossy().into_owned(),
            patient_id: row.patient_id.clone(),
            labels: manifest.label_string(&row.labels),
        })?;
    }
    if manifest.rows.is_empty() {
        w.write_record(["sample_id", "image", "patient_id", "labels"])?;
    }
    w.flush()?;
    Ok(())
}
