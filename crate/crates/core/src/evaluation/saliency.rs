use std::path::Path;

use ndarray::{Array2, Array3};
use serde::Serialize;

use crate::data::resize_bilinear;
use crate::error::{Error, Result};
use crate::model::HydraVit;
use crate::spatial::{CxrImage, FeatureMap};

/// Class-discriminative heatmap at input resolution, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub heatmap: Array2<f64>,
    pub target_class: usize,
    /// Pixel (row, col) of the maximum; `None` when the map is all zero.
    pub peak: Option<(usize, usize)>,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    sample_id: &'a str,
    target_class: usize,
    class_name: &'a str,
    height: usize,
    width: usize,
    peak: Option<(usize, usize)>,
    max_before_normalization: f64,
}

/// Grad-CAM on a spatial map: channel weights are the spatially averaged
/// gradients, the weighted channel sum is rectified, upsampled and scaled so
/// its maximum is 1.
pub fn gradcam_from_gradients(
    map: &FeatureMap,
    grad: &Array3<f64>,
    target_class: usize,
    height: usize,
    width: usize,
) -> Result<SaliencyMap> {
    let (r, c, z) = map.values.dim();
    if grad.dim() != (r, c, z) {
        return Err(Error::Dimension(format!(
            "gradient shape {:?} does not match feature map {:?}",
            grad.dim(),
            (r, c, z)
        )));
    }
    let area = (r * c) as f64;
    let weights: Vec<f64> = (0..z)
        .map(|k| grad.slice(ndarray::s![.., .., k]).sum() / area)
        .collect();
    let coarse = Array2::from_shape_fn((r, c), |(i, j)| {
        let s: f64 = (0..z).map(|k| weights[k] * map.values[[i, j, k]]).sum();
        s.max(0.0)
    });
    let mut heatmap = if (r, c) == (height, width) {
        coarse
    } else {
        resize_bilinear(&coarse, height, width)
    };
    let max = heatmap.iter().cloned().fold(0.0, f64::max);
    let peak = if max > 0.0 {
        heatmap.mapv_inplace(|v| v / max);
        heatmap.indexed_iter().find(|(_, &v)| v == 1.0).map(|(idx, _)| idx)
    } else {
        heatmap.fill(0.0);
        None
    };
    Ok(SaliencyMap {
        heatmap,
        target_class,
        peak,
    })
}

pub fn gradcam_saliency(model: &HydraVit, image: &CxrImage, class: usize) -> Result<SaliencyMap> {
    let (map, grad) = model.logit_gradient(image, class)?;
    gradcam_from_gradients(&map, &grad, class, image.height(), image.width())
}

impl SaliencyMap {
    /// Writes `<stem>.png` (8-bit grayscale) and `<stem>.json` into `dir`.
    pub fn export(&self, dir: &Path, stem: &str, sample_id: &str, class_name: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let (h, w) = self.heatmap.dim();
        let bytes: Vec<u8> = self
            .heatmap
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = image::GrayImage::from_raw(w as u32, h as u32, bytes)
            .ok_or_else(|| Error::Report("heatmap buffer size mismatch".into()))?;
        img.save(dir.join(format!("{stem}.png")))?;
        let sidecar = Sidecar {
            sample_id,
            target_class: self.target_class,
            class_name,
            height: h,
            width: w,
            peak: self.peak,
            max_before_normalization: if self.peak.is_some() { 1.0 } else { 0.0 },
        };
        let file = std::fs::File::create(dir.join(format!("{stem}.json")))?;
        serde_json::to_writer_pretty(file, &sidecar)?;
        Ok(())
    }
}
