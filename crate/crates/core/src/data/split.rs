use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::manifest::DatasetManifest;
use crate::error::{Error, Result};

/// A train/test partition of manifest sample ids.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub target_test_fraction: f64,
    pub achieved_test_fraction: f64,
}

/// Assigns whole patients to the test side greedily, largest patients
/// first (ties in seeded random order), accepting a patient whenever it
/// lowers the weighted squared deviation of the test counts (samples and
/// per-class positives) from their targets.
pub fn patient_split(manifest: &DatasetManifest, target_test_fraction: f64, seed: u64) -> Result<SplitSpec> {
    if manifest.rows.is_empty() {
        return Err(Error::Argument("cannot split an empty manifest".into()));
    }
    if !(target_test_fraction > 0.0 && target_test_fraction < 1.0) {
        return Err(Error::Argument(format!(
            "test fraction must lie in (0, 1), got {target_test_fraction}"
        )));
    }
    let classes = manifest.class_names.len();
    let mut patients: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, row) in manifest.rows.iter().enumerate() {
        patients.entry(row.patient_id.as_str()).or_default().push(i);
    }
    if patients.len() == 1 {
        log::warn!("manifest holds a single patient; all samples go to the training split");
        return Ok(SplitSpec {
            train_ids: manifest.rows.iter().map(|r| r.sample_id.clone()).collect(),
            test_ids: Vec::new(),
            target_test_fraction,
            achieved_test_fraction: 0.0,
        });
    }

    // count vector: [samples, positives of class 0, ..., positives of class C-1]
    let counts_of = |rows: &[usize]| {
        let mut v = vec![0.0; classes + 1];
        for &i in rows {
            v[0] += 1.0;
            for (c, &b) in manifest.rows[i].labels.bits().iter().enumerate() {
                v[c + 1] += b as f64;
            }
        }
        v
    };
    let mut groups: Vec<(&str, Vec<f64>)> = patients.iter().map(|(p, rows)| (*p, counts_of(rows))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups.shuffle(&mut rng);
    groups.sort_by(|a, b| b.1[0].total_cmp(&a.1[0]));

    let totals = counts_of(&(0..manifest.rows.len()).collect::<Vec<_>>());
    let targets: Vec<f64> = totals.iter().map(|t| t * target_test_fraction).collect();
    let weights: Vec<f64> = totals.iter().map(|t| 1.0 / t.max(1.0)).collect();
    let mut test = vec![0.0; classes + 1];
    let mut test_patients = HashSet::new();
    for (patient, v) in &groups {
        let delta: f64 = (0..=classes)
            .map(|k| {
                let before = test[k] - targets[k];
                let after = before + v[k];
                weights[k] * (after * after - before * before)
            })
            .sum();
        if delta < 0.0 {
            for k in 0..=classes {
                test[k] += v[k];
            }
            test_patients.insert(*patient);
        }
    }

    let (mut train_ids, mut test_ids) = (Vec::new(), Vec::new());
    for row in &manifest.rows {
        if test_patients.contains(row.patient_id.as_str()) {
            test_ids.push(row.sample_id.clone());
        } else {
            train_ids.push(row.sample_id.clone());
        }
    }
    let achieved = test_ids.len() as f64 / manifest.rows.len() as f64;
    log::info!(
        "patient split: {} train / {} test (target test fraction {target_test_fraction:.4}, achieved {achieved:.4})",
        train_ids.len(),
        test_ids.len()
    );
    Ok(SplitSpec {
        train_ids,
        test_ids,
        target_test_fraction,
        achieved_test_fraction: achieved,
    })
}

/// Absolute difference in per-class prevalence between the two sides.
pub fn prevalence_deviation(manifest: &DatasetManifest, split: &SplitSpec) -> Vec<f64> {
    let by_id: HashMap<&str, usize> = manifest
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| (r.sample_id.as_str(), i))
        .collect();
    let prevalence = |ids: &[String]| {
        let mut pos = vec![0.0; manifest.class_names.len()];
        for id in ids {
            for (c, &b) in manifest.rows[by_id[id.as_str()]].labels.bits().iter().enumerate() {
                pos[c] += b as f64;
            }
        }
        let n = ids.len().max(1) as f64;
        pos.into_iter().map(|p| p / n).collect::<Vec<_>>()
    };
    prevalence(&split.train_ids)
        .into_iter()
        .zip(prevalence(&split.test_ids))
        .map(|(a, b)| (a - b).abs())
        .collect()
}

#[derive(Serialize, Deserialize)]
struct SplitRow {
    sample_id: String,
    split: String,
}

/// Writes `sample_id,split` rows, train ids first.
pub fn write_split<W: Write>(writer: W, split: &SplitSpec) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for (ids, side) in [(&split.train_ids, "train"), (&split.test_ids, "test")] {
        for id in ids {
            w.serialize(SplitRow {
                sample_id: id.clone(),
                split: side.to_string(),
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads an externally supplied split file in the [`write_split`] layout.
pub fn read_split<R: Read>(reader: R) -> Result<SplitSpec> {
    let mut rdr = csv::Reader::from_reader(reader);
    let (mut train_ids, mut test_ids) = (Vec::new(), Vec::new());
    for (i, rec) in rdr.deserialize::<SplitRow>().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            row: i + 1,
            message: e.to_string(),
        })?;
        match rec.split.as_str() {
            "train" => train_ids.push(rec.sample_id),
            "test" => test_ids.push(rec.sample_id),
            other => {
                return Err(Error::Parse {
                    row: i + 1,
                    message: format!("split must be `train` or `test`, got `{other}`"),
                })
            }
        }
    }
    let total = (train_ids.len() + test_ids.len()).max(1) as f64;
    let achieved = test_ids.len() as f64 / total;
    Ok(SplitSpec {
        train_ids,
        test_ids,
        target_test_fraction: achieved,
        achieved_test_fraction: achieved,
    })
}

/// Hex SHA-256 over a git-style blob header (`blob <len>\0`) plus content.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::super::manifest::{LabelVector, ManifestRow};
    use super::*;
    use std::path::PathBuf;

    fn manifest(rows: &[(&str, &str, &[usize])]) -> DatasetManifest {
        let mut m = DatasetManifest::new(vec!["a".into(), "b".into()]);
        for (id, patient, labels) in rows {
            m.rows.push(ManifestRow {
                sample_id: id.to_string(),
                image_path: PathBuf::new(),
                patient_id: patient.to_string(),
                labels: LabelVector::from_indices(2, labels),
            });
        }
        m
    }

    #[test]
    fn single_patient_goes_to_train() {
        let m = manifest(&[("x", "p", &[0]), ("y", "p", &[])]);
        let s = patient_split(&m, 0.2, 1).unwrap();
        assert_eq!(s.train_ids.len(), 2);
        assert!(s.test_ids.is_empty());
    }

    #[test]
    fn invalid_fraction_is_rejected() {
        let m = manifest(&[("x", "p", &[0]), ("y", "q", &[])]);
        assert!(patient_split(&m, 1.0, 1).is_err());
        assert!(patient_split(&m, 0.0, 1).is_err());
    }

    #[test]
    fn split_file_round_trip() {
        let s = SplitSpec {
            train_ids: vec!["a".into(), "b".into()],
            test_ids: vec!["c".into()],
            target_test_fraction: 1.0 / 3.0,
            achieved_test_fraction: 1.0 / 3.0,
        };
        let mut buf = Vec::new();
        write_split(&mut buf, &s).unwrap();
        let back = read_split(buf.as_slice()).unwrap();
        assert_eq!(back.train_ids, s.train_ids);
        assert_eq!(back.test_ids, s.test_ids);
    }

    #[test]
    fn hash_matches_git_blob_layout() {
        let expected = hex::encode(Sha256::digest(b"blob 3\0abc"));
        assert_eq!(content_hash(b"abc"), expected);
    }

    #[test]
    fn full_scale_fraction_is_accepted() {
        let fraction = 25_596.0 / (86_524.0 + 25_596.0);
        let rows: Vec<(String, String)> = (0..50).map(|i| (format!("s{i}"), format!("p{}", i / 2))).collect();
        let mut m = DatasetManifest::new(vec!["a".into(), "b".into()]);
        for (i, (id, p)) in rows.iter().enumerate() {
            m.rows.push(ManifestRow {
                sample_id: id.clone(),
                image_path: PathBuf::new(),
                patient_id: p.clone(),
                labels: LabelVector::from_indices(2, if i % 3 == 0 { &[0] } else { &[1] }),
            });
        }
        let s = patient_split(&m, fraction, 7).unwrap();
        assert!((s.target_test_fraction - 0.2283).abs() < 1e-3);
        assert_eq!(s.train_ids.len() + s.test_ids.len(), 50);
    }
}
