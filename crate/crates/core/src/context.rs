//! Transformer context encoder.
//!
//! The feature map is zero-padded to a multiple of the patch size, cut into
//! non-overlapping `P x P` patches, linearly projected with a learnable
//! positional table, and passed through pre-normalized attention/MLP blocks
//! with residual connections.

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{self, ParamMut, ParamRef, Parameters};
use crate::spatial::FeatureMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_hidden: usize,
    pub norm_eps: f64,
}

impl ContextConfig {
    /// 12 blocks of width 512 with 16 heads over 4x4 patches.
    pub fn full_size() -> Self {
        Self {
            patch_size: 4,
            embed_dim: 512,
            heads: 16,
            blocks: 12,
            mlp_hidden: 4 * 512,
            norm_eps: 1e-6,
        }
    }

    pub fn miniature() -> Self {
        Self {
            patch_size: 2,
            embed_dim: 32,
            heads: 4,
            blocks: 1,
            mlp_hidden: 4 * 32,
            norm_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::Argument("patch size must be at least 1".into()));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "head count {} must divide embedding width {}",
                self.heads, self.embed_dim
            )));
        }
        if self.mlp_hidden == 0 {
            return Err(Error::Config("MLP hidden width must be nonzero".into()));
        }
        Ok(())
    }

    /// Side length after zero padding, and the number of patches.
    pub fn patch_grid(&self, extent: usize) -> (usize, usize) {
        let grid = extent.div_ceil(self.patch_size);
        (grid * self.patch_size, grid * grid)
    }
}

/// Flattened patches, one per row, in row-major patch order. Within a patch
/// entries are ordered by (row, column, channel).
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    pub patches: Array2<f64>,
    pub patch_size: usize,
    /// Patches per side.
    pub grid: usize,
}

impl PatchSequence {
    pub fn len(&self) -> usize {
        self.patches.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.nrows() == 0
    }
}

/// Splits a feature map into patches, zero-padding bottom and right edges up
/// to the next multiple of `patch_size`.
pub fn patchify(map: &FeatureMap, patch_size: usize) -> Result<PatchSequence> {
    if patch_size == 0 {
        return Err(Error::Argument("patch size must be at least 1".into()));
    }
    let (rows, cols, z) = map.values.dim();
    if rows != cols {
        return Err(Error::Dimension(format!(
            "feature map must be square, got {rows}x{cols}"
        )));
    }
    let grid = rows.div_ceil(patch_size);
    let width = patch_size * patch_size * z;
    let mut patches = Array2::<f64>::zeros((grid * grid, width));
    for gi in 0..grid {
        for gj in 0..grid {
            let mut row = patches.row_mut(gi * grid + gj);
            for pr in 0..patch_size {
                let y = gi * patch_size + pr;
                if y >= rows {
                    continue;
                }
                for pc in 0..patch_size {
                    let x = gj * patch_size + pc;
                    if x >= cols {
                        continue;
                    }
                    let base = (pr * patch_size + pc) * z;
                    row.slice_mut(s![base..base + z])
                        .assign(&map.values.slice(s![y, x, ..]));
                }
            }
        }
    }
    Ok(PatchSequence {
        patches,
        patch_size,
        grid,
    })
}

/// Adjoint of [`patchify`]: scatters patch gradients back onto the unpadded map.
fn unpatchify(d_patches: &Array2<f64>, patch_size: usize, grid: usize, extent: usize, z: usize) -> Array3<f64> {
    let mut d_map = Array3::<f64>::zeros((extent, extent, z));
    for gi in 0..grid {
        for gj in 0..grid {
            let row = d_patches.row(gi * grid + gj);
            for pr in 0..patch_size {
                let y = gi * patch_size + pr;
                if y >= extent {
                    continue;
                }
                for pc in 0..patch_size {
                    let x = gj * patch_size + pc;
                    if x >= extent {
                        continue;
                    }
                    let base = (pr * patch_size + pc) * z;
                    d_map.slice_mut(s![y, x, ..]).assign(&row.slice(s![base..base + z]));
                }
            }
        }
    }
    d_map
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSequence {
    /// `[N_p, N_D]`
    pub values: Array2<f64>,
    pub layer_index: usize,
}

impl EmbeddingSequence {
    pub fn flatten(&self) -> Array1<f64> {
        Array1::from_iter(self.values.iter().copied())
    }
}

fn xavier<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>, eps: f64) -> (Array2<f64>, NormCache) {
    let n = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::<f64>::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / n;
        *inv = 1.0 / (var + eps).sqrt();
        row.mapv_inplace(|v| v * *inv);
    }
    let out = &xhat * gain + bias;
    (out, NormCache { xhat, inv_std })
}

fn layer_norm_backward(
    d_out: &Array2<f64>,
    cache: &NormCache,
    gain: &Array1<f64>,
    d_gain: &mut Array1<f64>,
    d_bias: &mut Array1<f64>,
) -> Array2<f64> {
    *d_gain += &(d_out * &cache.xhat).sum_axis(Axis(0));
    *d_bias += &d_out.sum_axis(Axis(0));
    let d_xhat = d_out * gain;
    let n = d_out.ncols() as f64;
    let mut d_x = Array2::<f64>::zeros(d_out.raw_dim());
    for (((mut dx, dxh), xh), &inv) in d_x
        .rows_mut()
        .into_iter()
        .zip(d_xhat.rows())
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let sum = dxh.sum();
        let dot = dxh.dot(&xh);
        for ((d, &g), &h) in dx.iter_mut().zip(dxh.iter()).zip(xh.iter()) {
            *d = inv / n * (n * g - sum - h * dot);
        }
    }
    d_x
}

fn softmax_rows(mut scores: Array2<f64>) -> Array2<f64> {
    for mut row in scores.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    scores
}

/// Pre-normalized attention + MLP block.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock {
    pub heads: usize,
    pub norm_eps: f64,
    pub norm1_gain: Array1<f64>,
    pub norm1_bias: Array1<f64>,
    pub query: Array2<f64>,
    pub query_bias: Array1<f64>,
    pub key: Array2<f64>,
    pub key_bias: Array1<f64>,
    pub value: Array2<f64>,
    pub value_bias: Array1<f64>,
    pub out: Array2<f64>,
    pub out_bias: Array1<f64>,
    pub norm2_gain: Array1<f64>,
    pub norm2_bias: Array1<f64>,
    pub mlp_in: Array2<f64>,
    pub mlp_in_bias: Array1<f64>,
    pub mlp_out: Array2<f64>,
    pub mlp_out_bias: Array1<f64>,
}

/// Activations of one block's forward pass.
pub struct BlockCache {
    input: Array2<f64>,
    norm1: NormCache,
    normed1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attention: Vec<Array2<f64>>,
    concat: Array2<f64>,
    norm2: NormCache,
    normed2: Array2<f64>,
    hidden_pre: Array2<f64>,
    hidden: Array2<f64>,
}

impl BlockCache {
    /// Attention weights per head, `[N_p, N_p]` each.
    pub fn attention(&self) -> &[Array2<f64>] {
        &self.attention
    }

    pub fn input(&self) -> &Array2<f64> {
        &self.input
    }
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(config: &ContextConfig, rng: &mut R) -> Self {
        let d = config.embed_dim;
        let h = config.mlp_hidden;
        Self {
            heads: config.heads,
            norm_eps: config.norm_eps,
            norm1_gain: Array1::ones(d),
            norm1_bias: Array1::zeros(d),
            query: xavier(d, d, rng),
            query_bias: Array1::zeros(d),
            key: xavier(d, d, rng),
            key_bias: Array1::zeros(d),
            value: xavier(d, d, rng),
            value_bias: Array1::zeros(d),
            out: xavier(d, d, rng),
            out_bias: Array1::zeros(d),
            norm2_gain: Array1::ones(d),
            norm2_bias: Array1::zeros(d),
            mlp_in: xavier(d, h, rng),
            mlp_in_bias: Array1::zeros(h),
            mlp_out: xavier(h, d, rng),
            mlp_out_bias: Array1::zeros(d),
        }
    }

    pub fn width(&self) -> usize {
        self.norm1_gain.len()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, BlockCache)> {
        let d = self.width();
        if x.ncols() != d {
            return Err(Error::Dimension(format!(
                "transformer block expects width {d}, got {}",
                x.ncols()
            )));
        }
        let head_dim = d / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();

        let (normed1, norm1) = layer_norm(x, &self.norm1_gain, &self.norm1_bias, self.norm_eps);
        let q = normed1.dot(&self.query) + &self.query_bias;
        let k = normed1.dot(&self.key) + &self.key_bias;
        let v = normed1.dot(&self.value) + &self.value_bias;

        let mut concat = Array2::<f64>::zeros(x.raw_dim());
        let mut attention = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * head_dim..(h + 1) * head_dim];
            let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            let a = softmax_rows(scores);
            concat.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
            attention.push(a);
        }
        let attended = concat.dot(&self.out) + &self.out_bias + x;

        let (normed2, norm2) = layer_norm(&attended, &self.norm2_gain, &self.norm2_bias, self.norm_eps);
        let hidden_pre = normed2.dot(&self.mlp_in) + &self.mlp_in_bias;
        let hidden = hidden_pre.mapv(|v| v.max(0.0));
        let output = hidden.dot(&self.mlp_out) + &self.mlp_out_bias + &attended;

        Ok((
            output,
            BlockCache {
                input: x.clone(),
                norm1,
                normed1,
                q,
                k,
                v,
                attention,
                concat,
                norm2,
                normed2,
                hidden_pre,
                hidden,
            },
        ))
    }

    /// Returns the input gradient; parameter gradients accumulate in `grad`.
    pub fn backward(&self, cache: &BlockCache, d_out: &Array2<f64>, grad: &mut TransformerBlock) -> Array2<f64> {
        let d = self.width();
        let head_dim = d / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();

        // MLP branch
        grad.mlp_out += &cache.hidden.t().dot(d_out);
        grad.mlp_out_bias += &d_out.sum_axis(Axis(0));
        let mut d_hidden = d_out.dot(&self.mlp_out.t());
        d_hidden.zip_mut_with(&cache.hidden_pre, |g, &pre| {
            if pre <= 0.0 {
                *g = 0.0;
            }
        });
        grad.mlp_in += &cache.normed2.t().dot(&d_hidden);
        grad.mlp_in_bias += &d_hidden.sum_axis(Axis(0));
        let d_normed2 = d_hidden.dot(&self.mlp_in.t());
        let d_attended = d_out
            + &layer_norm_backward(
                &d_normed2,
                &cache.norm2,
                &self.norm2_gain,
                &mut grad.norm2_gain,
                &mut grad.norm2_bias,
            );

        // attention branch
        grad.out += &cache.concat.t().dot(&d_attended);
        grad.out_bias += &d_attended.sum_axis(Axis(0));
        let d_concat = d_attended.dot(&self.out.t());
        let mut d_q = Array2::<f64>::zeros(cache.q.raw_dim());
        let mut d_k = Array2::<f64>::zeros(cache.k.raw_dim());
        let mut d_v = Array2::<f64>::zeros(cache.v.raw_dim());
        for (h, a) in cache.attention.iter().enumerate() {
            let cols = s![.., h * head_dim..(h + 1) * head_dim];
            let d_head = d_concat.slice(cols);
            let d_a = d_head.dot(&cache.v.slice(cols).t());
            d_v.slice_mut(cols).assign(&a.t().dot(&d_head));
            let mut d_scores = a * &d_a;
            let row_dot = d_scores.sum_axis(Axis(1));
            d_scores -= &(a * &row_dot.insert_axis(Axis(1)));
            d_scores *= scale;
            d_q.slice_mut(cols).assign(&d_scores.dot(&cache.k.slice(cols)));
            d_k.slice_mut(cols).assign(&d_scores.t().dot(&cache.q.slice(cols)));
        }
        grad.query += &cache.normed1.t().dot(&d_q);
        grad.query_bias += &d_q.sum_axis(Axis(0));
        grad.key += &cache.normed1.t().dot(&d_k);
        grad.key_bias += &d_k.sum_axis(Axis(0));
        grad.value += &cache.normed1.t().dot(&d_v);
        grad.value_bias += &d_v.sum_axis(Axis(0));
        let d_normed1 = d_q.dot(&self.query.t()) + d_k.dot(&self.key.t()) + d_v.dot(&self.value.t());
        d_attended
            + layer_norm_backward(
                &d_normed1,
                &cache.norm1,
                &self.norm1_gain,
                &mut grad.norm1_gain,
                &mut grad.norm1_bias,
            )
    }
}

impl Parameters for TransformerBlock {
    fn params(&self) -> Vec<ParamRef<'_>> {
        vec![
            params::view("norm1.gain", &self.norm1_gain),
            params::view("norm1.bias", &self.norm1_bias),
            params::view("attn.query", &self.query),
            params::view("attn.query_bias", &self.query_bias),
            params::view("attn.key", &self.key),
            params::view("attn.key_bias", &self.key_bias),
            params::view("attn.value", &self.value),
            params::view("attn.value_bias", &self.value_bias),
            params::view("attn.out", &self.out),
            params::view("attn.out_bias", &self.out_bias),
            params::view("norm2.gain", &self.norm2_gain),
            params::view("norm2.bias", &self.norm2_bias),
            params::view("mlp.in", &self.mlp_in),
            params::view("mlp.in_bias", &self.mlp_in_bias),
            params::view("mlp.out", &self.mlp_out),
            params::view("mlp.out_bias", &self.mlp_out_bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        vec![
            params::view_mut("norm1.gain", &mut self.norm1_gain),
            params::view_mut("norm1.bias", &mut self.norm1_bias),
            params::view_mut("attn.query", &mut self.query),
            params::view_mut("attn.query_bias", &mut self.query_bias),
            params::view_mut("attn.key", &mut self.key),
            params::view_mut("attn.key_bias", &mut self.key_bias),
            params::view_mut("attn.value", &mut self.value),
            params::view_mut("attn.value_bias", &mut self.value_bias),
            params::view_mut("attn.out", &mut self.out),
            params::view_mut("attn.out_bias", &mut self.out_bias),
            params::view_mut("norm2.gain", &mut self.norm2_gain),
            params::view_mut("norm2.bias", &mut self.norm2_bias),
            params::view_mut("mlp.in", &mut self.mlp_in),
            params::view_mut("mlp.in_bias", &mut self.mlp_in_bias),
            params::view_mut("mlp.out", &mut self.mlp_out),
            params::view_mut("mlp.out_bias", &mut self.mlp_out_bias),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextEncoder {
    pub config: ContextConfig,
    /// `[z * P^2, N_D]`
    pub projection: Array2<f64>,
    /// `[N_p, N_D]`
    pub positional: Array2<f64>,
    pub blocks: Vec<TransformerBlock>,
}

pub struct ContextCache {
    extent: usize,
    channels: usize,
    grid: usize,
    patches: Array2<f64>,
    blocks: Vec<BlockCache>,
}

impl ContextCache {
    pub fn block(&self, index: usize) -> &BlockCache {
        &self.blocks[index]
    }
}

/// Builds a randomly initialized encoder for `extent x extent x channels` maps.
/// Positional codes are drawn from `N(0, 0.02^2)`.
pub fn build_context_encoder<R: Rng + ?Sized>(
    config: &ContextConfig,
    extent: usize,
    channels: usize,
    rng: &mut R,
) -> Result<ContextEncoder> {
    config.validate()?;
    let (_, num_patches) = config.patch_grid(extent);
    let patch_dim = channels * config.patch_size * config.patch_size;
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    let projection = xavier(patch_dim, config.embed_dim, rng);
    let positional = Array2::from_shape_simple_fn((num_patches, config.embed_dim), || normal.sample(rng));
    let blocks = (0..config.blocks).map(|_| TransformerBlock::new(config, rng)).collect();
    Ok(ContextEncoder {
        config: config.clone(),
        projection,
        positional,
        blocks,
    })
}

/// `E^0 = patches . P_E + P_E^pos`
pub fn embed_patches(seq: &PatchSequence, params: &ContextEncoder) -> Result<EmbeddingSequence> {
    if seq.patches.ncols() != params.projection.nrows() {
        return Err(Error::Dimension(format!(
            "patch width {} does not match projection input width {}",
            seq.patches.ncols(),
            params.projection.nrows()
        )));
    }
    if seq.patches.nrows() != params.positional.nrows() {
        return Err(Error::Dimension(format!(
            "{} patches but positional table has {} rows",
            seq.patches.nrows(),
            params.positional.nrows()
        )));
    }
    Ok(EmbeddingSequence {
        values: seq.patches.dot(&params.projection) + &params.positional,
        layer_index: 0,
    })
}

pub fn transformer_block(seq: &EmbeddingSequence, block: &TransformerBlock) -> Result<EmbeddingSequence> {
    let (values, _) = block.forward(&seq.values)?;
    Ok(EmbeddingSequence {
        values,
        layer_index: seq.layer_index + 1,
    })
}

pub fn encode_context(map: &FeatureMap, params: &ContextEncoder) -> Result<EmbeddingSequence> {
    params.encode(map)
}

impl ContextEncoder {
    pub fn num_patches(&self) -> usize {
        self.positional.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn encode(&self, map: &FeatureMap) -> Result<EmbeddingSequence> {
        let mut seq = embed_patches(&patchify(map, self.config.patch_size)?, self)?;
        for block in &self.blocks {
            seq = transformer_block(&seq, block)?;
        }
        Ok(seq)
    }

    pub fn encode_cached(&self, map: &FeatureMap) -> Result<(EmbeddingSequence, ContextCache)> {
        let patches = patchify(map, self.config.patch_size)?;
        let mut seq = embed_patches(&patches, self)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (values, cache) = block.forward(&seq.values)?;
            caches.push(cache);
            seq = EmbeddingSequence {
                values,
                layer_index: seq.layer_index + 1,
            };
        }
        Ok((
            seq,
            ContextCache {
                extent: map.extent(),
                channels: map.channels(),
                grid: patches.grid,
                patches: patches.patches,
                blocks: caches,
            },
        ))
    }

    /// Back-propagates an embedding gradient, accumulating parameter
    /// gradients, and returns the gradient with respect to the feature map.
    pub fn backward(&self, cache: &ContextCache, d_embeddings: &Array2<f64>, grad: &mut ContextEncoder) -> Array3<f64> {
        let mut d = d_embeddings.clone();
        for ((block, block_cache), block_grad) in
            self.blocks.iter().zip(&cache.blocks).zip(grad.blocks.iter_mut()).rev()
        {
            d = block.backward(block_cache, &d, block_grad);
        }
        grad.positional += &d;
        grad.projection += &cache.patches.t().dot(&d);
        let d_patches = d.dot(&self.projection.t());
        unpatchify(
            &d_patches,
            self.config.patch_size,
            cache.grid,
            cache.extent,
            cache.channels,
        )
    }
}

impl Parameters for ContextEncoder {
    fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = vec![
            params::view("projection", &self.projection),
            params::view("positional", &self.positional),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(params::prefixed(&format!("block{i}"), b.params()));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = vec![
            params::view_mut("projection", &mut self.projection),
            params::view_mut("positional", &mut self.positional),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(params::prefixed_mut(&format!("block{i}"), b.params_mut()));
        }
        out
    }
}
