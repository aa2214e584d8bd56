use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::spatial::CxrImage;

pub const TARGET_EXTENT: usize = 224;

/// A decoded raster, row-major `[row][col][channel]`, intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl RawImage {
    pub fn gray(pixels: &Array2<f64>) -> Self {
        Self {
            height: pixels.nrows(),
            width: pixels.ncols(),
            channels: 1,
            data: pixels.iter().copied().collect(),
        }
    }

    fn channel_mean(&self) -> Array2<f64> {
        let c = self.channels;
        Array2::from_shape_fn((self.height, self.width), |(y, x)| {
            let base = (y * self.width + x) * c;
            self.data[base..base + c].iter().sum::<f64>() / c as f64
        })
    }
}

pub fn load_raw_image(path: &Path) -> Result<RawImage> {
    let img = image::open(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let (channels, data): (usize, Vec<f64>) = if img.color().channel_count() <= 2 {
        (1, img.to_luma32f().into_raw().into_iter().map(f64::from).collect())
    } else {
        (3, img.to_rgb32f().into_raw().into_iter().map(f64::from).collect())
    };
    Ok(RawImage {
        height,
        width,
        channels,
        data,
    })
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn resize_bilinear(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let taps = |out: usize, len: usize| -> Vec<(usize, usize, f64)> {
        let scale = len as f64 / out as f64;
        (0..out)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(len - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let rows = taps(out_h, h);
    let cols = taps(out_w, w);
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let (y0, y1, fy) = rows[i];
        let (x0, x1, fx) = cols[j];
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Channel-average, resize to `target x target`, then min-max normalize.
/// Constant images become all-zero.
pub fn preprocess_image(raw: &RawImage, target: usize) -> Result<CxrImage> {
    if raw.height == 0 || raw.width == 0 || raw.channels == 0 {
        return Err(Error::Argument("cannot preprocess an empty image".into()));
    }
    if raw.data.len() != raw.height * raw.width * raw.channels {
        return Err(Error::Dimension(format!(
            "raw image buffer holds {} values, expected {}x{}x{}",
            raw.data.len(),
            raw.height,
            raw.width,
            raw.channels
        )));
    }
    let gray = raw.channel_mean();
    let resized = if raw.height == target && raw.width == target {
        gray
    } else {
        resize_bilinear(&gray, target, target)
    };
    let min = resized.fold(f64::INFINITY, |m, &v| m.min(v));
    let max = resized.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let span = max - min;
    let normalized = if span > 0.0 {
        resized.mapv(|v| ((v - min) / span).clamp(0.0, 1.0))
    } else {
        Array2::zeros((target, target))
    };
    CxrImage::new(normalized)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_image_maps_to_zeros() {
        let raw = RawImage::gray(&Array2::from_elem((30, 40), 0.7));
        let img = preprocess_image(&raw, 224).unwrap();
        assert!(img.pixels().iter().all(|&v| v == 0.0));
        assert_eq!(img.height(), 224);
    }

    #[test]
    fn normalized_target_size_is_identity() {
        let px = Array2::from_shape_fn((224, 224), |(y, x)| ((y * 7 + x * 3) % 256) as f64 / 255.0);
        let img = preprocess_image(&RawImage::gray(&px), 224).unwrap();
        let diff = (img.pixels() - &px).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(diff <= 1e-6);
    }

    #[test]
    fn color_channels_are_averaged() {
        let raw = RawImage {
            height: 1,
            width: 2,
            channels: 3,
            data: vec![0.0, 0.3, 0.6, 0.9, 0.9, 0.9],
        };
        let img = preprocess_image(&raw, 2).unwrap();
        // means 0.3 and 0.9, then min-max
        assert_eq!(img.pixels()[[0, 0]], 0.0);
        assert_eq!(img.pixels()[[0, 1]], 1.0);
    }

    #[test]
    fn bad_buffer_is_rejected() {
        let raw = RawImage {
            height: 2,
            width: 2,
            channels: 1,
            data: vec![0.0; 3],
        };
        assert!(preprocess_image(&raw, 4).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn preprocessing_is_idempotent(h in 3usize..40, w in 3usize..40, seed in 0u64..1000) {
            let px = Array2::from_shape_fn((h, w), |(y, x)| {
                (((y * 131 + x * 71) as u64 ^ seed) % 97) as f64 / 96.0
            });
            let once = preprocess_image(&RawImage::gray(&px), 32).unwrap();
            let twice = preprocess_image(&RawImage::gray(once.pixels()), 32).unwrap();
            let diff = (once.pixels() - twice.pixels()).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
            prop_assert!(diff <= 1e-6);
        }
    }
}
