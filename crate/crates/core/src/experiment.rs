//! Experiment configuration files, key overrides and data preparation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{
    content_hash, load_dataset, load_manifest, patient_split, read_split, synth_generate, write_split, CoocSpec,
    Dataset, SplitSpec, CHESTXRAY14_CLASSES, TARGET_EXTENT,
};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Test share of the published patient split (25,596 of 112,120 images).
pub const CHESTXRAY14_TEST_FRACTION: f64 = 25_596.0 / 112_120.0;

fn default_classes() -> Vec<String> {
    CHESTXRAY14_CLASSES.iter().map(|s| s.to_string()).collect()
}

fn default_fraction() -> f64 {
    CHESTXRAY14_TEST_FRACTION
}

fn default_extent() -> usize {
    TARGET_EXTENT
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Images listed in a label manifest, split by patient.
    Manifest {
        manifest: PathBuf,
        /// Base for relative image paths; defaults to the manifest directory.
        #[serde(default)]
        image_root: Option<PathBuf>,
        #[serde(default = "default_classes")]
        class_names: Vec<String>,
        #[serde(default = "default_fraction")]
        test_fraction: f64,
        #[serde(default)]
        split_seed: u64,
        /// Reuse an existing split instead of computing one.
        #[serde(default)]
        split_file: Option<PathBuf>,
        #[serde(default = "default_extent")]
        extent: usize,
    },
    /// Generated train and test sets; the test set uses `spec.seed + 1`.
    Synthetic {
        spec: CoocSpec,
        train_samples: usize,
        test_samples: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl ExperimentConfig {
    /// Miniature model on the 4-class synthetic task with a planted
    /// co-occurrence between classes 1 and 2.
    pub fn synthetic_default(seed: u64) -> Self {
        let spec = CoocSpec::independent(4, 0.3, 16, seed).with_boost(1, 2, 2.0);
        Self {
            model: ModelConfig::miniature(4),
            train: TrainConfig {
                batch_size: 32,
                learning_rate: 1e-3,
                epochs: 30,
                seed,
                ..TrainConfig::standard()
            },
            data: DataConfig::Synthetic {
                spec,
                train_samples: 2000,
                test_samples: 500,
            },
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let classes = match &self.data {
            DataConfig::Manifest { class_names, .. } => class_names.len(),
            DataConfig::Synthetic { spec, .. } => spec.classes,
        };
        if classes != self.model.classes {
            return Err(Error::Config(format!(
                "data has {classes} classes but model.classes is {}",
                self.model.classes
            )));
        }
        Ok(())
    }

    /// Applies `key=value` overrides. A key is either a dotted path such as
    /// `train.epochs` or a bare field name that occurs exactly once in the
    /// configuration. Values are read as JSON, falling back to a string.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut tree = serde_json::to_value(self)?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not of the form key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let path = resolve_key(&tree, key.trim())?;
            let mut slot = &mut tree;
            for part in &path {
                slot = slot.get_mut(part.as_str()).expect("resolved path exists");
            }
            *slot = value;
        }
        serde_json::from_value(tree).map_err(|e| Error::Config(format!("override produced an invalid config: {e}")))
    }
}

fn collect_paths(v: &Value, prefix: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
    if let Value::Object(map) = v {
        for (k, child) in map {
            prefix.push(k.clone());
            out.push(prefix.clone());
            collect_paths(child, prefix, out);
            prefix.pop();
        }
    }
}

fn resolve_key(tree: &Value, key: &str) -> Result<Vec<String>> {
    let mut all = Vec::new();
    collect_paths(tree, &mut Vec::new(), &mut all);
    let parts: Vec<String> = key.split('.').map(str::to_string).collect();
    if all.contains(&parts) {
        return Ok(parts);
    }
    if parts.len() == 1 {
        let hits: Vec<_> = all.iter().filter(|p| p.last() == Some(&parts[0])).collect();
        match hits.len() {
            1 => return Ok(hits[0].clone()),
            0 => {}
            _ => {
                let names: Vec<String> = hits.iter().map(|p| p.join(".")).collect();
                return Err(Error::Config(format!(
                    "ambiguous config key `{key}`; use one of {}",
                    names.join(", ")
                )));
            }
        }
    }
    Err(Error::Config(format!("unknown config key `{key}`")))
}

/// Train and test sets plus the split that produced them.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub split: SplitSpec,
}

impl PreparedData {
    /// The split file contents and their content hash.
    pub fn split_file(&self) -> Result<(Vec<u8>, String)> {
        let mut bytes = Vec::new();
        write_split(&mut bytes, &self.split)?;
        let hash = content_hash(&bytes);
        Ok((bytes, hash))
    }
}

fn rename(mut ds: Dataset, prefix: &str) -> Dataset {
    for (i, s) in ds.samples.iter_mut().enumerate() {
        s.id = format!("{prefix}{i:06}");
        s.patient_id = format!("{prefix}pat{}", s.patient_id);
    }
    ds
}

pub fn prepare_data(config: &DataConfig) -> Result<PreparedData> {
    match config {
        DataConfig::Synthetic {
            spec,
            train_samples,
            test_samples,
        } => {
            let train = rename(synth_generate(spec, *train_samples)?.into_dataset(), "trn");
            let test_spec = CoocSpec {
                seed: spec.seed.wrapping_add(1),
                ..spec.clone()
            };
            let test = rename(synth_generate(&test_spec, *test_samples)?.into_dataset(), "tst");
            let fraction = *test_samples as f64 / (*train_samples + *test_samples).max(1) as f64;
            let split = SplitSpec {
                train_ids: train.samples.iter().map(|s| s.id.clone()).collect(),
                test_ids: test.samples.iter().map(|s| s.id.clone()).collect(),
                target_test_fraction: fraction,
                achieved_test_fraction: fraction,
            };
            Ok(PreparedData { train, test, split })
        }
        DataConfig::Manifest {
            manifest,
            image_root,
            class_names,
            test_fraction,
            split_seed,
            split_file,
            extent,
        } => {
            let rows = load_manifest(manifest, class_names)?;
            let split = match split_file {
                Some(path) => read_split(std::fs::File::open(path)?)?,
                None => patient_split(&rows, *test_fraction, *split_seed)?,
            };
            let root = image_root
                .clone()
                .or_else(|| manifest.parent().map(Path::to_path_buf))
                .unwrap_or_default();
            let all = load_dataset(&rows, &root, *extent)?;
            Ok(PreparedData {
                train: all.subset(&split.train_ids),
                test: all.subset(&split.test_ids),
                split,
            })
        }
    }
}
