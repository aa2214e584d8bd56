//! Synthetic multi-label images with planted label co-occurrence.
//!
//! Labels follow a pairwise log-linear model
//! `P(y) ∝ Π_c θ_c^{y_c} Π_{c<d} boost_cd^{y_c y_d}` over all `2^C` label
//! vectors, with the fields `θ` fitted so that every class marginal equals
//! the requested prevalence. A boost of 1 is independence, above 1 makes the
//! pair co-occur more often. Each present class adds a Gaussian blob at its
//! own location, scaled by `signal_strength`, on a noisy background.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{write_manifest, DatasetManifest, LabelVector, ManifestRow};
use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::spatial::CxrImage;

const MAX_ENUMERATED_CLASSES: usize = 16;
const BACKGROUND: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoocSpec {
    pub classes: usize,
    pub marginals: Vec<f64>,
    /// Symmetric `C x C` odds multipliers with unit diagonal.
    pub pair_boost: Vec<Vec<f64>>,
    /// Side length of the generated square images.
    pub extent: usize,
    pub signal_strength: f64,
    pub noise_std: f64,
    pub samples_per_patient: usize,
    pub seed: u64,
}

impl CoocSpec {
    /// Independent labels with equal prevalence.
    pub fn independent(classes: usize, prevalence: f64, extent: usize, seed: u64) -> Self {
        Self {
            classes,
            marginals: vec![prevalence; classes],
            pair_boost: vec![vec![1.0; classes]; classes],
            extent,
            signal_strength: 0.6,
            noise_std: 0.1,
            samples_per_patient: 1,
            seed,
        }
    }

    pub fn with_boost(mut self, a: usize, b: usize, boost: f64) -> Self {
        self.pair_boost[a][b] = boost;
        self.pair_boost[b][a] = boost;
        self
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.classes).map(|c| format!("class_{c}")).collect()
    }

    fn validate(&self) -> Result<()> {
        let c = self.classes;
        if c == 0 || c > MAX_ENUMERATED_CLASSES {
            return Err(Error::Generation(format!(
                "class count must lie in 1..={MAX_ENUMERATED_CLASSES}, got {c}"
            )));
        }
        if self.marginals.len() != c || self.marginals.iter().any(|&m| !(m > 0.0 && m < 1.0)) {
            return Err(Error::Generation("marginals must be C values in (0, 1)".into()));
        }
        if self.pair_boost.len() != c || self.pair_boost.iter().any(|r| r.len() != c) {
            return Err(Error::Generation("pair_boost must be a C x C matrix".into()));
        }
        for a in 0..c {
            if self.pair_boost[a][a] != 1.0 {
                return Err(Error::Generation("pair_boost diagonal must be 1".into()));
            }
            for b in 0..c {
                let v = self.pair_boost[a][b];
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::Generation(format!(
                        "pair_boost[{a}][{b}] = {v} is not a positive finite multiplier"
                    )));
                }
                if v != self.pair_boost[b][a] {
                    return Err(Error::Generation("pair_boost must be symmetric".into()));
                }
            }
        }
        if self.extent < 4 || self.samples_per_patient == 0 {
            return Err(Error::Generation(
                "extent must be at least 4 and samples_per_patient nonzero".into(),
            ));
        }
        if !(self.signal_strength.is_finite() && self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Generation("signal and noise levels must be finite".into()));
        }
        Ok(())
    }

    /// Probability of every label state (bit `c` of the index is class `c`).
    pub fn state_distribution(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let c = self.classes;
        let states = 1usize << c;
        let interaction: Vec<f64> = (0..states)
            .map(|s| {
                let mut v = 1.0;
                for a in 0..c {
                    for b in a + 1..c {
                        if s >> a & 1 == 1 && s >> b & 1 == 1 {
                            v *= self.pair_boost[a][b];
                        }
                    }
                }
                v
            })
            .collect();
        let odds = |p: f64| p / (1.0 - p);
        let mut theta: Vec<f64> = self.marginals.iter().map(|&p| odds(p)).collect();
        for _ in 0..2000 {
            let probs = normalized(&interaction, &theta, c);
            let marg = marginals_of(&probs, c);
            let err = marg
                .iter()
                .zip(&self.marginals)
                .map(|(m, t)| (m - t).abs())
                .fold(0.0, f64::max);
            if err < 1e-12 {
                return Ok(probs);
            }
            for k in 0..c {
                theta[k] *= odds(self.marginals[k]) / odds(marg[k]);
                if !(theta[k].is_finite() && theta[k] > 0.0) {
                    break;
                }
            }
        }
        Err(Error::Generation(
            "marginals and pair boosts are not jointly attainable".into(),
        ))
    }

    /// Unit-peak Gaussian blob for class `c`; centers sit on a circle.
    pub fn template(&self, class: usize) -> Array2<f64> {
        let e = self.extent as f64;
        let angle = 2.0 * PI * class as f64 / self.classes as f64;
        let radius = if self.classes == 1 { 0.0 } else { 0.28 * e };
        let (cy, cx) = (
            e / 2.0 - 0.5 + radius * angle.sin(),
            e / 2.0 - 0.5 + radius * angle.cos(),
        );
        let sigma = (e / 8.0).max(1.0);
        Array2::from_shape_fn((self.extent, self.extent), |(y, x)| {
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            (-d2 / (2.0 * sigma * sigma)).exp()
        })
    }
}

fn normalized(interaction: &[f64], theta: &[f64], c: usize) -> Vec<f64> {
    let w: Vec<f64> = interaction
        .iter()
        .enumerate()
        .map(|(s, &v)| (0..c).filter(|k| s >> k & 1 == 1).fold(v, |acc, k| acc * theta[k]))
        .collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

fn marginals_of(probs: &[f64], c: usize) -> Vec<f64> {
    (0..c)
        .map(|k| {
            probs
                .iter()
                .enumerate()
                .filter(|(s, _)| s >> k & 1 == 1)
                .map(|(_, p)| p)
                .sum()
        })
        .collect()
}

/// A generated manifest with its images held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSet {
    pub manifest: DatasetManifest,
    pub images: Vec<CxrImage>,
}

impl SyntheticSet {
    pub fn into_dataset(self) -> Dataset {
        let samples = self
            .manifest
            .rows
            .into_iter()
            .zip(self.images)
            .map(|(row, image)| Sample {
                id: row.sample_id,
                patient_id: row.patient_id,
                image,
                labels: row.labels,
            })
            .collect();
        Dataset {
            class_names: self.manifest.class_names,
            samples,
        }
    }

    /// Writes 8-bit PNGs under `dir/images` and `dir/manifest.csv`.
    pub fn export(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir.join("images"))?;
        for (row, img) in self.manifest.rows.iter().zip(&self.images) {
            let (h, w) = (img.height() as u32, img.width() as u32);
            let buf = image::GrayImage::from_fn(w, h, |x, y| {
                image::Luma([(img.pixels()[[y as usize, x as usize]] * 255.0).round() as u8])
            });
            buf.save(dir.join(&row.image_path))?;
        }
        let path = dir.join("manifest.csv");
        write_manifest(fs::File::create(&path)?, &self.manifest)?;
        Ok(path)
    }
}

/// Draws `n` labelled images. Output is a pure function of `(spec, n)`.
pub fn synth_generate(spec: &CoocSpec, n: usize) -> Result<SyntheticSet> {
    let probs = spec.state_distribution()?;
    let mut cumulative = Vec::with_capacity(probs.len());
    let mut acc = 0.0;
    for p in &probs {
        acc += p;
        cumulative.push(acc);
    }
    let templates: Vec<Array2<f64>> = (0..spec.classes).map(|c| spec.template(c)).collect();
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("finite std");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut manifest = DatasetManifest::new(spec.class_names());
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let u: f64 = rng.random::<f64>() * acc;
        let state = cumulative.partition_point(|&c| c <= u).min(probs.len() - 1);
        let present: Vec<usize> = (0..spec.classes).filter(|k| state >> k & 1 == 1).collect();
        let mut px = Array2::from_elem((spec.extent, spec.extent), BACKGROUND);
        for &k in &present {
            px.scaled_add(spec.signal_strength, &templates[k]);
        }
        if spec.noise_std > 0.0 {
            px.mapv_inplace(|v| v + noise.sample(&mut rng));
        }
        px.mapv_inplace(|v| v.clamp(0.0, 1.0));
        let id = format!("syn{i:06}");
        manifest.rows.push(ManifestRow {
            image_path: PathBuf::from(format!("images/{id}.png")),
            sample_id: id,
            patient_id: format!("pat{:06}", i / spec.samples_per_patient),
            labels: LabelVector::from_indices(spec.classes, &present),
        });
        images.push(CxrImage::new(px)?);
    }
    Ok(SyntheticSet { manifest, images })
}
