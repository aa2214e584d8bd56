//! Independent reference implementations used as test oracles. Everything
//! here is written with plain loops, sharing no code with the library.

#![allow(dead_code)]

use hydravit::context::{ContextEncoder, TransformerBlock};
use hydravit::evaluation::TieMode;
use hydravit::spatial::{CxrImage, SpatialEncoder};
use hydravit::{HydraVit, Parameters};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(extent: usize, seed: u64) -> CxrImage {
    let mut r = rng(seed);
    CxrImage::new(Array2::from_shape_simple_fn((extent, extent), || r.random::<f64>())).unwrap()
}

/// `(channel, row, col)` zero-padded 3x3 cross-correlation followed by ReLU.
pub fn naive_conv_relu(input: &Array3<f64>, kernel: &ndarray::Array4<f64>, bias: &ndarray::Array1<f64>) -> Array3<f64> {
    let (cin, h, w) = input.dim();
    let cout = kernel.dim().0;
    let mut out = Array3::zeros((cout, h, w));
    for o in 0..cout {
        for y in 0..h {
            for x in 0..w {
                let mut s = bias[o];
                for i in 0..cin {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let yy = y as isize + ky as isize - 1;
                            let xx = x as isize + kx as isize - 1;
                            if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                continue;
                            }
                            s += kernel[[o, i, ky, kx]] * input[[i, yy as usize, xx as usize]];
                        }
                    }
                }
                out[[o, y, x]] = s.max(0.0);
            }
        }
    }
    out
}

pub fn naive_pool(input: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = input.dim();
    let mut out = Array3::zeros((c, h / 2, w / 2));
    for k in 0..c {
        for y in 0..h / 2 {
            for x in 0..w / 2 {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(input[[k, 2 * y + dy, 2 * x + dx]]);
                    }
                }
                out[[k, y, x]] = m;
            }
        }
    }
    out
}

/// Reference spatial encoding, returned as `(row, col, channel)`.
pub fn naive_spatial(enc: &SpatialEncoder, image: &CxrImage) -> Array3<f64> {
    let n = image.height();
    let mut x = Array3::from_shape_fn((enc.config.input_channels, n, n), |(_, y, xx)| image.pixels()[[y, xx]]);
    let mut layer = 0;
    for stage in &enc.config.stages {
        for _ in stage {
            x = naive_conv_relu(&x, &enc.convs[layer].kernel, &enc.convs[layer].bias);
            layer += 1;
        }
        x = naive_pool(&x);
    }
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((h, w, c), |(y, xx, k)| x[[k, y, xx]])
}

pub fn matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (n, k) = a.dim();
    let m = b.ncols();
    assert_eq!(k, b.nrows());
    let mut out = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[[i, t]] * b[[t, j]];
            }
            out[[i, j]] = s;
        }
    }
    out
}

fn add_row(a: &mut Array2<f64>, b: &ndarray::Array1<f64>) {
    for mut row in a.rows_mut() {
        for (v, w) in row.iter_mut().zip(b) {
            *v += w;
        }
    }
}

pub fn naive_layer_norm(
    x: &Array2<f64>,
    gain: &ndarray::Array1<f64>,
    bias: &ndarray::Array1<f64>,
    eps: f64,
) -> Array2<f64> {
    let d = x.ncols();
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gain[j] + bias[j];
        }
    }
    out
}

/// Step-by-step pre-norm block: returns the output and per-head attention.
pub fn naive_block(block: &TransformerBlock, x: &Array2<f64>) -> (Array2<f64>, Vec<Array2<f64>>) {
    let (n, d) = x.dim();
    let dh = d / block.heads;
    let h1 = naive_layer_norm(x, &block.norm1_gain, &block.norm1_bias, block.norm_eps);
    let mut q = matmul(&h1, &block.query);
    add_row(&mut q, &block.query_bias);
    let mut k = matmul(&h1, &block.key);
    add_row(&mut k, &block.key_bias);
    let mut v = matmul(&h1, &block.value);
    add_row(&mut v, &block.value_bias);
    let mut concat = Array2::zeros((n, d));
    let mut maps = Vec::new();
    for h in 0..block.heads {
        let mut a = Array2::zeros((n, n));
        for i in 0..n {
            let mut logits = vec![0.0; n];
            for j in 0..n {
                let mut s = 0.0;
                for t in 0..dh {
                    s += q[[i, h * dh + t]] * k[[j, h * dh + t]];
                }
                logits[j] = s / (dh as f64).sqrt();
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for j in 0..n {
                a[[i, j]] = (logits[j] - m).exp() / z;
            }
        }
        for i in 0..n {
            for t in 0..dh {
                let mut s = 0.0;
                for j in 0..n {
                    s += a[[i, j]] * v[[j, h * dh + t]];
                }
                concat[[i, h * dh + t]] = s;
            }
        }
        maps.push(a);
    }
    let mut attended = matmul(&concat, &block.out);
    add_row(&mut attended, &block.out_bias);
    attended += x;
    let h2 = naive_layer_norm(&attended, &block.norm2_gain, &block.norm2_bias, block.norm_eps);
    let mut hidden = matmul(&h2, &block.mlp_in);
    add_row(&mut hidden, &block.mlp_in_bias);
    hidden.mapv_inplace(|v| v.max(0.0));
    let mut out = matmul(&hidden, &block.mlp_out);
    add_row(&mut out, &block.mlp_out_bias);
    out += &attended;
    (out, maps)
}

/// Reference patch embedding of a `(row, col, channel)` map.
pub fn naive_embed(enc: &ContextEncoder, map: &Array3<f64>) -> Array2<f64> {
    let p = enc.config.patch_size;
    let (r, _, z) = map.dim();
    let g = r.div_ceil(p);
    let mut patches = Array2::zeros((g * g, p * p * z));
    for gi in 0..g {
        for gj in 0..g {
            for pr in 0..p {
                for pc in 0..p {
                    for k in 0..z {
                        let (y, x) = (gi * p + pr, gj * p + pc);
                        let v = if y < r && x < r { map[[y, x, k]] } else { 0.0 };
                        patches[[gi * g + gj, (pr * p + pc) * z + k]] = v;
                    }
                }
            }
        }
    }
    matmul(&patches, &enc.projection) + &enc.positional
}

/// Literal pair count: positives strictly above negatives, plus half credit
/// for ties in conventional mode.
pub fn brute_auc(scores: &[f64], labels: &[u8], mode: TieMode) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] < labels[j] {
                den += 1.0;
                if scores[i] < scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] && mode == TieMode::Conventional {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

/// Flat `(tensor, element)` coordinates of every parameter.
pub fn coordinates(model: &HydraVit) -> Vec<(String, usize, usize)> {
    model
        .params()
        .iter()
        .enumerate()
        .flat_map(|(t, p)| (0..p.data.len()).map(move |e| (p.name.clone(), t, e)))
        .collect()
}

pub fn perturbed(model: &HydraVit, tensor: usize, elem: usize, delta: f64) -> HydraVit {
    let mut m = model.clone();
    m.params_mut()[tensor].data[elem] += delta;
    m
}

pub fn grad_at(grad: &HydraVit, tensor: usize, elem: usize) -> f64 {
    grad.params()[tensor].data[elem]
}

/// `|a - n| / max(|a|, |n|, 1e-6)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central finite difference of the composite loss total.
pub fn numeric_grad(model: &HydraVit, image: &CxrImage, labels: &[f64], tensor: usize, elem: usize, h: f64) -> f64 {
    let up = perturbed(model, tensor, elem, h).loss(image, labels).unwrap().total;
    let down = perturbed(model, tensor, elem, -h).loss(image, labels).unwrap().total;
    (up - down) / (2.0 * h)
}

/// 10,000-row manifest over 2,000 patients with 14 classes of uneven
/// prevalence; each patient carries a propensity so labels cluster within
/// patients.
pub fn clustered_manifest(seed: u64) -> hydravit::data::DatasetManifest {
    use hydravit::data::{DatasetManifest, LabelVector, ManifestRow, CHESTXRAY14_CLASSES};
    let names: Vec<String> = CHESTXRAY14_CLASSES.iter().map(|s| s.to_string()).collect();
    let base = [
        0.10, 0.025, 0.12, 0.18, 0.05, 0.06, 0.012, 0.05, 0.04, 0.02, 0.02, 0.015, 0.03, 0.002,
    ];
    let mut r = rng(seed);
    let mut m = DatasetManifest::new(names);
    let mut next = 0;
    for p in 0..2000 {
        let propensity: Vec<f64> = base
            .iter()
            .map(|b| (b * r.random_range(0.0..2.0f64)).min(1.0))
            .collect();
        for _ in 0..5 {
            let present: Vec<usize> = (0..14).filter(|&c| r.random::<f64>() < propensity[c]).collect();
            m.rows.push(ManifestRow {
                sample_id: format!("s{next:05}"),
                image_path: format!("img/{next:05}.png").into(),
                patient_id: format!("p{p:04}"),
                labels: LabelVector::from_indices(14, &present),
            });
            next += 1;
        }
    }
    m
}

/// Reference half-pixel bilinear resampler with edge clamping.
pub fn naive_bilinear(src: &Array2<f64>, oh: usize, ow: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let mut out = Array2::zeros((oh, ow));
    for i in 0..oh {
        for j in 0..ow {
            let sy = ((i as f64 + 0.5) * h as f64 / oh as f64 - 0.5)
                .max(0.0)
                .min((h - 1) as f64);
            let sx = ((j as f64 + 0.5) * w as f64 / ow as f64 - 0.5)
                .max(0.0)
                .min((w - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
            let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
            out[[i, j]] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

/// Caps branch weights so every weighted probability stays strictly inside
/// the clamp interval, where the loss is differentiable.
pub fn keep_clamps_inactive(model: &mut HydraVit, image: &CxrImage) {
    let pass = model.forward(image).unwrap();
    match &pass.outputs {
        hydravit::model::HeadOutputs::MultiBranch(b) => {
            for (w, p) in model.weights.w.iter_mut().zip(&b.individual) {
                *w = w.min(0.9 / p);
            }
            let top = b.aggregate.iter().cloned().fold(0.0, f64::max);
            model.weights.w_aggregate = model.weights.w_aggregate.min(0.9 / top);
        }
        hydravit::model::HeadOutputs::Individual(p) => {
            for (w, p) in model.weights.w.iter_mut().zip(p) {
                *w = w.min(0.9 / p);
            }
        }
        hydravit::model::HeadOutputs::Aggregate(p) => {
            let top = p.iter().cloned().fold(0.0, f64::max);
            model.weights.w_aggregate = model.weights.w_aggregate.min(0.9 / top);
        }
        hydravit::model::HeadOutputs::Softmax(_) => {}
    }
}
