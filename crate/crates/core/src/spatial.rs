//! Convolutional spatial encoder.
//!
//! A VGG-style stack of 3x3 convolutions with rectifiers, where every stage
//! ends in a 2x2/stride-2 max pooling. The output is an `r x r x z` map of
//! local features. The single input channel is replicated to the declared
//! number of input channels on entry.

use ndarray::{s, Array1, Array2, Array3, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::WeightBundle;
use crate::error::{Error, Result};
use crate::params::{self, ParamMut, ParamRef, Parameters};

pub const KERNEL: usize = 3;

/// A single-channel image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CxrImage {
    pixels: Array2<f64>,
}

impl CxrImage {
    pub fn new(pixels: Array2<f64>) -> Result<Self> {
        if let Some(v) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Argument(format!(
                "image intensities must be finite and within [0,1], found {v}"
            )));
        }
        Ok(Self { pixels })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            pixels: Array2::zeros((height, width)),
        }
    }

    pub fn pixels(&self) -> &Array2<f64> {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }
}

/// Encoder output: `values[[row, col, channel]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub values: Array3<f64>,
}

impl FeatureMap {
    pub fn extent(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    /// Row-major flattening over (row, column, channel).
    pub fn flatten(&self) -> Array1<f64> {
        Array1::from_iter(self.values.iter().copied())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatialConfig {
    /// Square input extent the encoder accepts.
    pub input_extent: usize,
    /// Channels after replicating the grayscale input.
    pub input_channels: usize,
    /// Convolution widths per stage; each stage is followed by a pooling.
    pub stages: Vec<Vec<usize>>,
}

impl SpatialConfig {
    /// The 13-convolution / 5-pooling VGG16 feature extractor on 224x224 input.
    pub fn vgg16() -> Self {
        Self {
            input_extent: 224,
            input_channels: 3,
            stages: vec![
                vec![64, 64],
                vec![128, 128],
                vec![256, 256, 256],
                vec![512, 512, 512],
                vec![512, 512, 512],
            ],
        }
    }

    /// Two convolutions with two poolings on 16x16 input (16 -> 4).
    pub fn miniature() -> Self {
        Self {
            input_extent: 16,
            input_channels: 3,
            stages: vec![vec![4], vec![8]],
        }
    }

    /// `(in_channels, out_channels)` for every convolution, in order.
    pub fn conv_layout(&self) -> Vec<(usize, usize)> {
        let mut layout = Vec::new();
        let mut channels = self.input_channels;
        for stage in &self.stages {
            for &width in stage {
                layout.push((channels, width));
                channels = width;
            }
        }
        layout
    }

    pub fn output_extent(&self) -> usize {
        self.stages.iter().fold(self.input_extent, |extent, _| extent / 2)
    }

    pub fn output_channels(&self) -> usize {
        self.stages
            .iter()
            .rev()
            .find_map(|s| s.last().copied())
            .unwrap_or(self.input_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.input_extent == 0 {
            return Err(Error::Config("spatial encoder needs a nonzero input".into()));
        }
        if self.stages.iter().any(|s| s.is_empty() || s.contains(&0)) {
            return Err(Error::Config(
                "every spatial stage needs at least one convolution of nonzero width".into(),
            ));
        }
        if self.output_extent() == 0 {
            return Err(Error::Config(format!(
                "input extent {} is too small for {} poolings",
                self.input_extent,
                self.stages.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `[out, in, 3, 3]`
    pub kernel: Array4<f64>,
    pub bias: Array1<f64>,
}

impl ConvLayer {
    fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    fn tap(&self, ky: usize, kx: usize) -> Array2<f64> {
        self.kernel.slice(s![.., .., ky, kx]).to_owned()
    }

    fn forward(&self, input: &Array3<f64>) -> Array3<f64> {
        let (_, h, w) = input.dim();
        let mut out = Array2::<f64>::zeros((self.out_channels(), h * w));
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let shifted = shift(input, ky as isize - 1, kx as isize - 1);
                ndarray::linalg::general_mat_mul(1.0, &self.tap(ky, kx), &shifted, 1.0, &mut out);
            }
        }
        out += &self.bias.view().insert_axis(Axis(1));
        out.into_shape_with_order((self.out_channels(), h, w))
            .expect("conv output reshape")
    }

    /// Accumulates parameter gradients into `grad`; returns the input
    /// gradient when `need_input` is set.
    fn backward(
        &self,
        input: &Array3<f64>,
        d_out: &Array3<f64>,
        grad: &mut ConvLayer,
        need_input: bool,
    ) -> Option<Array3<f64>> {
        let (c, h, w) = input.dim();
        let d_flat = d_out
            .view()
            .into_shape_with_order((self.out_channels(), h * w))
            .expect("contiguous gradient");
        grad.bias += &d_flat.sum_axis(Axis(1));
        let mut d_input = need_input.then(|| Array3::<f64>::zeros((c, h, w)));
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let (dy, dx) = (ky as isize - 1, kx as isize - 1);
                let shifted = shift(input, dy, dx);
                let d_tap = d_flat.dot(&shifted.t());
                grad.kernel
                    .slice_mut(s![.., .., ky, kx])
                    .zip_mut_with(&d_tap, |g, d| *g += d);
                if let Some(d_input) = d_input.as_mut() {
                    let d_shifted = self.tap(ky, kx).t().dot(&d_flat);
                    unshift_add(d_input, &d_shifted, dy, dx);
                }
            }
        }
        d_input
    }
}

/// `out[c, y*w + x] = input[c, y+dy, x+dx]`, zero outside the image.
fn shift(input: &Array3<f64>, dy: isize, dx: isize) -> Array2<f64> {
    let (c, h, w) = input.dim();
    let mut out = Array2::<f64>::zeros((c, h * w));
    let (y0, y1) = valid_range(h, dy);
    let (x0, x1) = valid_range(w, dx);
    for ch in 0..c {
        let src = input.index_axis(Axis(0), ch);
        let mut dst = out.row_mut(ch);
        for y in y0..y1 {
            let sy = (y as isize + dy) as usize;
            for x in x0..x1 {
                dst[y * w + x] = src[[sy, (x as isize + dx) as usize]];
            }
        }
    }
    out
}

fn unshift_add(d_input: &mut Array3<f64>, d_shifted: &Array2<f64>, dy: isize, dx: isize) {
    let (c, h, w) = d_input.dim();
    let (y0, y1) = valid_range(h, dy);
    let (x0, x1) = valid_range(w, dx);
    for ch in 0..c {
        let src = d_shifted.row(ch);
        let mut dst = d_input.index_axis_mut(Axis(0), ch);
        for y in y0..y1 {
            let sy = (y as isize + dy) as usize;
            for x in x0..x1 {
                dst[[sy, (x as isize + dx) as usize]] += src[y * w + x];
            }
        }
    }
}

/// Output positions `p` for which `p + offset` lies in `0..len`.
fn valid_range(len: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset.max(0)).max(0) as usize;
    (lo.min(len), hi.min(len))
}

/// 2x2/stride-2 max pooling; `argmax` holds the flat `y*w + x` source index.
fn max_pool(input: &Array3<f64>) -> (Array3<f64>, Array3<usize>) {
    let (c, h, w) = input.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::<f64>::zeros((c, oh, ow));
    let mut argmax = Array3::<usize>::zeros((c, oh, ow));
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for (y, x) in [
                    (2 * i, 2 * j),
                    (2 * i, 2 * j + 1),
                    (2 * i + 1, 2 * j),
                    (2 * i + 1, 2 * j + 1),
                ] {
                    let v = input[[ch, y, x]];
                    if v > best {
                        best = v;
                        best_idx = y * w + x;
                    }
                }
                out[[ch, i, j]] = best;
                argmax[[ch, i, j]] = best_idx;
            }
        }
    }
    (out, argmax)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialEncoder {
    pub config: SpatialConfig,
    pub convs: Vec<ConvLayer>,
}

/// Intermediate activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct SpatialCache {
    conv_inputs: Vec<Array3<f64>>,
    conv_outputs: Vec<Array3<f64>>,
    pool_argmax: Vec<(Array3<usize>, (usize, usize, usize))>,
}

/// Builds an encoder for `config`, taking parameters from `weights` when
/// supplied and otherwise drawing fan-in scaled uniform values
/// (`U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero biases).
///
/// Bundle arrays are named `conv{i}.weight` (`[out, in, 3, 3]`) and
/// `conv{i}.bias` (`[out]`).
pub fn build_spatial_encoder<R: Rng + ?Sized>(
    config: &SpatialConfig,
    weights: Option<&WeightBundle>,
    rng: &mut R,
) -> Result<SpatialEncoder> {
    config.validate()?;
    let mut convs = Vec::new();
    for (i, (cin, cout)) in config.conv_layout().into_iter().enumerate() {
        let layer = match weights {
            Some(bundle) => {
                let kname = format!("conv{i}.weight");
                let bname = format!("conv{i}.bias");
                let (kshape, kdata) = bundle
                    .get(&kname)
                    .ok_or_else(|| Error::Config(format!("weight bundle lacks `{kname}`")))?;
                if kshape.len() != 4 {
                    return Err(Error::Config(format!(
                        "layer conv{i}: kernel `{kname}` must be 4-D, got shape {kshape:?}"
                    )));
                }
                if kshape[2] != KERNEL || kshape[3] != KERNEL {
                    return Err(Error::Config(format!(
                        "layer conv{i}: kernel size must be 3x3, got {}x{}",
                        kshape[2], kshape[3]
                    )));
                }
                if kshape[0] != cout || kshape[1] != cin {
                    return Err(Error::Config(format!(
                        "layer conv{i}: kernel shape {kshape:?} does not match layout [{cout}, {cin}, 3, 3]"
                    )));
                }
                let (bshape, bdata) = bundle
                    .get(&bname)
                    .ok_or_else(|| Error::Config(format!("weight bundle lacks `{bname}`")))?;
                if bshape.as_slice() != [cout] {
                    return Err(Error::Config(format!(
                        "layer conv{i}: bias shape {bshape:?} does not match [{cout}]"
                    )));
                }
                ConvLayer {
                    kernel: Array4::from_shape_vec(
                        (cout, cin, KERNEL, KERNEL),
                        kdata.iter().map(|&v| v as f64).collect(),
                    )
                    .expect("validated shape"),
                    bias: Array1::from_iter(bdata.iter().map(|&v| v as f64)),
                }
            }
            None => {
                let bound = (6.0 / (cin * KERNEL * KERNEL) as f64).sqrt();
                ConvLayer {
                    kernel: Array4::from_shape_simple_fn((cout, cin, KERNEL, KERNEL), || {
                        rng.random_range(-bound..bound)
                    }),
                    bias: Array1::zeros(cout),
                }
            }
        };
        convs.push(layer);
    }
    Ok(SpatialEncoder {
        config: config.clone(),
        convs,
    })
}

impl SpatialEncoder {
    /// Replicates the image over the configured input channels.
    fn input_tensor(&self, image: &CxrImage) -> Result<Array3<f64>> {
        let extent = self.config.input_extent;
        if image.height() != extent || image.width() != extent {
            return Err(Error::Dimension(format!(
                "spatial encoder expects {extent}x{extent} input, got {}x{}",
                image.height(),
                image.width()
            )));
        }
        let c = self.config.input_channels;
        let px = image.pixels();
        Ok(Array3::from_shape_fn((c, extent, extent), |(_, y, x)| px[[y, x]]))
    }

    fn run(&self, image: &CxrImage, mut cache: Option<&mut SpatialCache>) -> Result<FeatureMap> {
        let mut x = self.input_tensor(image)?;
        let mut conv = self.convs.iter();
        for stage in &self.config.stages {
            for _ in stage {
                let layer = conv.next().expect("layout matches config");
                let mut y = layer.forward(&x);
                y.mapv_inplace(|v| v.max(0.0));
                if let Some(c) = cache.as_deref_mut() {
                    c.conv_inputs.push(x);
                    c.conv_outputs.push(y.clone());
                }
                x = y;
            }
            let (pooled, argmax) = max_pool(&x);
            if let Some(c) = cache.as_deref_mut() {
                c.pool_argmax.push((argmax, x.dim()));
            }
            x = pooled;
        }
        Ok(FeatureMap {
            values: x.permuted_axes([1, 2, 0]).as_standard_layout().to_owned(),
        })
    }

    /// Maps an image to its feature map.
    pub fn encode(&self, image: &CxrImage) -> Result<FeatureMap> {
        self.run(image, None)
    }

    pub fn encode_cached(&self, image: &CxrImage) -> Result<(FeatureMap, SpatialCache)> {
        let mut cache = SpatialCache {
            conv_inputs: Vec::new(),
            conv_outputs: Vec::new(),
            pool_argmax: Vec::new(),
        };
        let map = self.run(image, Some(&mut cache))?;
        Ok((map, cache))
    }

    /// Back-propagates a feature-map gradient (`[row, col, channel]`) and
    /// accumulates parameter gradients into `grad`.
    pub fn backward(&self, cache: &SpatialCache, d_map: &Array3<f64>, grad: &mut SpatialEncoder) {
        let mut d = d_map.view().permuted_axes([2, 0, 1]).as_standard_layout().to_owned();
        let mut conv_idx = self.convs.len();
        for (stage_idx, stage) in self.config.stages.iter().enumerate().rev() {
            let (argmax, (c, h, w)) = &cache.pool_argmax[stage_idx];
            let mut d_pre = Array3::<f64>::zeros((*c, *h, *w));
            for ((ch, i, j), &idx) in argmax.indexed_iter() {
                d_pre[[ch, idx / w, idx % w]] += d[[ch, i, j]];
            }
            d = d_pre;
            for _ in stage.iter().rev() {
                conv_idx -= 1;
                let out = &cache.conv_outputs[conv_idx];
                d.zip_mut_with(out, |g, &o| {
                    if o <= 0.0 {
                        *g = 0.0;
                    }
                });
                let need_input = conv_idx > 0;
                let layer = &self.convs[conv_idx];
                if let Some(d_in) =
                    layer.backward(&cache.conv_inputs[conv_idx], &d, &mut grad.convs[conv_idx], need_input)
                {
                    d = d_in;
                }
            }
        }
    }
}

/// Free-function form of [`SpatialEncoder::encode`].
pub fn encode_spatial(image: &CxrImage, params: &SpatialEncoder) -> Result<FeatureMap> {
    params.encode(image)
}

impl Parameters for SpatialEncoder {
    fn params(&self) -> Vec<ParamRef<'_>> {
        self.convs
            .iter()
            .enumerate()
            .flat_map(|(i, c)| {
                [
                    params::view(format!("conv{i}.weight"), &c.kernel),
                    params::view(format!("conv{i}.bias"), &c.bias),
                ]
            })
            .collect()
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        self.convs
            .iter_mut()
            .enumerate()
            .flat_map(|(i, c)| {
                [
                    params::view_mut(format!("conv{i}.weight"), &mut c.kernel),
                    params::view_mut(format!("conv{i}.bias"), &mut c.bias),
                ]
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn vgg16_layout_has_thirteen_convs_ending_at_512() {
        let cfg = SpatialConfig::vgg16();
        let layout = cfg.conv_layout();
        assert_eq!(layout.len(), 13);
        assert_eq!(layout.last().unwrap().1, 512);
        assert_eq!(cfg.stages.len(), 5);
        assert_eq!(cfg.output_extent(), 7);
        assert_eq!(cfg.output_channels(), 512);
    }

    #[test]
    fn rejects_wrong_input_extent() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = build_spatial_encoder(&SpatialConfig::miniature(), None, &mut rng).unwrap();
        let err = enc.encode(&CxrImage::zeros(15, 16)).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn zero_parameters_give_zero_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut enc = build_spatial_encoder(&SpatialConfig::miniature(), None, &mut rng).unwrap();
        enc.fill_zero();
        let img = CxrImage::new(Array2::from_shape_fn((16, 16), |(y, x)| {
            ((y * 16 + x) % 7) as f64 / 7.0
        }))
        .unwrap();
        let map = enc.encode(&img).unwrap();
        assert_eq!(map.values.dim(), (4, 4, 8));
        assert!(map.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn image_rejects_out_of_range_pixels() {
        assert!(CxrImage::new(Array2::from_elem((2, 2), 1.5)).is_err());
        assert!(CxrImage::new(Array2::from_elem((2, 2), f64::NAN)).is_err());
    }

    #[test]
    fn valid_range_bounds() {
        assert_eq!(valid_range(5, -1), (1, 5));
        assert_eq!(valid_range(5, 1), (0, 4));
        assert_eq!(valid_range(5, 0), (0, 5));
    }
}
