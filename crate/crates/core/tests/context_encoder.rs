mod common;

use common::{naive_block, naive_embed, rng};
use hydravit::context::{
    build_context_encoder, embed_patches, patchify, transformer_block, ContextConfig, EmbeddingSequence,
    TransformerBlock,
};
use hydravit::spatial::FeatureMap;
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn random_map(extent: usize, channels: usize, seed: u64) -> FeatureMap {
    let mut r = rng(seed);
    FeatureMap {
        values: Array3::from_shape_simple_fn((extent, extent, channels), || r.random::<f64>()),
    }
}

fn perturbed_block(cfg: &ContextConfig, seed: u64) -> TransformerBlock {
    // Non-trivial norm and bias parameters so the oracle exercises them.
    let mut r = rng(seed);
    let mut b = TransformerBlock::new(cfg, &mut r);
    let n = Normal::new(0.0, 0.1).unwrap();
    for v in b
        .norm1_gain
        .iter_mut()
        .chain(b.norm1_bias.iter_mut())
        .chain(b.norm2_gain.iter_mut())
        .chain(b.norm2_bias.iter_mut())
        .chain(b.query_bias.iter_mut())
        .chain(b.key_bias.iter_mut())
        .chain(b.value_bias.iter_mut())
        .chain(b.out_bias.iter_mut())
        .chain(b.mlp_in_bias.iter_mut())
        .chain(b.mlp_out_bias.iter_mut())
    {
        *v += n.sample(&mut r);
    }
    b
}

#[test]
fn patch_embedding_matches_matmul_oracle() {
    let cfg = ContextConfig::miniature();
    for (extent, seed) in [(4, 1), (5, 2), (7, 3)] {
        let enc = build_context_encoder(&cfg, extent, 3, &mut rng(seed)).unwrap();
        let map = random_map(extent, 3, seed + 10);
        let emb = embed_patches(&patchify(&map, cfg.patch_size).unwrap(), &enc).unwrap();
        let oracle = naive_embed(&enc, &map.values);
        assert_eq!(emb.values.dim(), oracle.dim());
        for (a, b) in emb.values.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn full_size_geometry_pads_seven_to_eight() {
    let cfg = ContextConfig::full_size();
    assert_eq!(cfg.patch_grid(7), (8, 4));
    let seq = patchify(&random_map(7, 512, 4), cfg.patch_size).unwrap();
    assert_eq!(seq.patches.dim(), (4, 8192));
}

#[test]
fn block_matches_step_by_step_oracle() {
    let cfg = ContextConfig {
        patch_size: 2,
        embed_dim: 16,
        heads: 4,
        blocks: 1,
        mlp_hidden: 24,
        norm_eps: 1e-6,
    };
    for seed in 0..5 {
        let block = perturbed_block(&cfg, seed);
        let mut r = rng(seed + 50);
        let x = Array2::from_shape_simple_fn((5, 16), || r.random_range(-2.0..2.0));
        let (out, cache) = block.forward(&x).unwrap();
        let (oracle, maps) = naive_block(&block, &x);
        for (a, b) in out.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
        for (a, m) in cache.attention().iter().zip(&maps) {
            for row in a.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
            }
            for (p, q) in a.iter().zip(m.iter()) {
                assert!((p - q).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn zeroed_sublayer_outputs_give_identity() {
    let cfg = ContextConfig::miniature();
    let mut block = TransformerBlock::new(&cfg, &mut rng(7));
    block.out.fill(0.0);
    block.mlp_out.fill(0.0);
    let mut r = rng(8);
    let x = Array2::from_shape_simple_fn((4, cfg.embed_dim), || r.random::<f64>());
    let (out, _) = block.forward(&x).unwrap();
    assert_eq!(out, x);
}

#[test]
fn zero_input_stays_finite() {
    let cfg = ContextConfig::miniature();
    let block = TransformerBlock::new(&cfg, &mut rng(9));
    let (out, cache) = block.forward(&Array2::zeros((4, cfg.embed_dim))).unwrap();
    assert!(out.iter().all(|v| v.is_finite()));
    // constant rows: every attention weight equals 1/N
    for a in cache.attention() {
        assert!(a.iter().all(|&w| (w - 0.25).abs() < 1e-12));
    }
}

#[test]
fn positional_codes_break_permutation_equivariance() {
    let cfg = ContextConfig::miniature();
    let enc = build_context_encoder(&cfg, 4, 8, &mut rng(11)).unwrap();
    let map = random_map(4, 8, 12);
    let out = enc.encode(&map).unwrap();
    // swap the top-left and bottom-right 2x2 patches
    let mut swapped = map.clone();
    for y in 0..2 {
        for x in 0..2 {
            for k in 0..8 {
                swapped.values[[y, x, k]] = map.values[[y + 2, x + 2, k]];
                swapped.values[[y + 2, x + 2, k]] = map.values[[y, x, k]];
            }
        }
    }
    let out_s = enc.encode(&swapped).unwrap();
    let mut permuted = out_s.values.clone();
    permuted.row_mut(0).assign(&out_s.values.row(3));
    permuted.row_mut(3).assign(&out_s.values.row(0));
    let diff = (&permuted - &out.values).mapv(f64::abs).sum();
    assert!(diff > 1e-6);
}

#[test]
fn zero_blocks_return_the_embedding() {
    let cfg = ContextConfig {
        blocks: 0,
        ..ContextConfig::miniature()
    };
    let enc = build_context_encoder(&cfg, 4, 8, &mut rng(13)).unwrap();
    let map = random_map(4, 8, 14);
    let emb = embed_patches(&patchify(&map, 2).unwrap(), &enc).unwrap();
    let out = enc.encode(&map).unwrap();
    assert_eq!(out.values, emb.values);
}

#[test]
fn layer_index_advances() {
    let cfg = ContextConfig::miniature();
    let block = TransformerBlock::new(&cfg, &mut rng(15));
    let seq = EmbeddingSequence {
        values: Array2::zeros((4, cfg.embed_dim)),
        layer_index: 0,
    };
    assert_eq!(transformer_block(&seq, &block).unwrap().layer_index, 1);
}

#[test]
fn full_size_context_shape() {
    let cfg = ContextConfig::full_size();
    let enc = build_context_encoder(&cfg, 7, 512, &mut rng(16)).unwrap();
    let out = enc.encode(&random_map(7, 512, 17)).unwrap();
    assert_eq!(out.values.dim(), (4, 512));
    assert_eq!(enc.blocks.len(), 12);
}
