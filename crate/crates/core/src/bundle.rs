//! External weight bundles.
//!
//! A bundle is a directory holding `manifest.json` plus one payload file per
//! array. The manifest looks like
//!
//! ```json
//! {"version": 1, "arrays": [{"name": "conv0.weight", "shape": [64, 3, 3, 3], "file": "conv0.weight.f32"}]}
//! ```
//!
//! and each payload is the row-major little-endian `f32` contents of the
//! array, with no header.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BUNDLE_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    arrays: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

/// Named `f32` arrays with their shapes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightBundle {
    arrays: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl WeightBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "array `{name}` has {} values but shape {shape:?} needs {expected}",
                data.len()
            )));
        }
        self.arrays.insert(name, (shape, data));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<(&Vec<usize>, &Vec<f32>)> {
        self.arrays.get(name).map(|(s, d)| (s, d))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for (name, (shape, data)) in &self.arrays {
            let file = format!("{name}.f32");
            let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
            fs::write(dir.join(&file), bytes)?;
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: shape.clone(),
                file,
            });
        }
        let manifest = Manifest {
            version: BUNDLE_VERSION,
            arrays: entries,
        };
        fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
        if manifest.version != BUNDLE_VERSION {
            return Err(Error::Config(format!(
                "weight bundle version {} is not supported",
                manifest.version
            )));
        }
        let mut bundle = Self::new();
        for entry in manifest.arrays {
            let bytes = fs::read(dir.join(&entry.file))?;
            if bytes.len() % 4 != 0 {
                return Err(Error::Config(format!(
                    "payload for `{}` is not a whole number of f32 values",
                    entry.name
                )));
            }
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            bundle.insert(entry.name, entry.shape, data)?;
        }
        Ok(bundle)
    }
}
