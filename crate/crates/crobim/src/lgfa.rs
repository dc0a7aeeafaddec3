//! Language-guided feature aggregation: per-stage gated cross-modal fusion
//! plus attention-deficit compensation across scales.
//!
//! Fusion (per stage i): `S_i = Flatten(Wq(V_i))ᵀ · Wk(L)`, softmax along the
//! feature axis scaled by 1/sqrt(ℓ), mixed with `Wv(L)ᵀ`, gated by a 1×1
//! convolution + GELU, and multiplied elementwise into `V_i` after a second
//! 1×1 convolution. Compensation: resample the per-stage saliency to the
//! coarsest grid, take the cells where consecutive stages disagree most, and
//! refine the four scale features at those cells with a shared
//! LayerNorm + multi-head self-attention block, writing the deltas back
//! residually over each level's aligned block.

use crate::config::ModelConfig;
use crate::encoders::{FeaturePyramid, TokenFeatures};
use crate::error::{ensure_finite, CrobimError, Result};
use crate::params::{glorot, zeros, BoundParams, Params};
use crate::tape::{Graph, Var};
use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use std::collections::BinaryHeap;

/// Raw per-stage attention scores, retained for deficit compensation and
/// attention dumps. Row count of entry `i` is `H_i·W_i`.
#[derive(Debug, Clone)]
pub struct ScoreSet {
    pub scores: [Array2<f64>; 4],
    pub level_dims: [(usize, usize); 4],
}

/// Token-axis size entering fusion: prompts included unless the literal
/// mode slices them off.
pub fn fusion_len(config: &ModelConfig) -> usize {
    if config.literal_token_axis {
        config.max_tokens
    } else {
        config.joint_tokens()
    }
}

pub fn register_params(params: &mut Params, config: &ModelConfig, rng: &mut ChaCha8Rng) {
    let l = fusion_len(config);
    let dl = config.text_dim;
    for i in 0..4 {
        let c = config.channels[i];
        let p = format!("lgfa.stage{}", i + 1);
        params.insert(format!("{p}.wq"), glorot(rng, c, l));
        params.insert(format!("{p}.bq"), zeros(&[l]));
        params.insert(format!("{p}.wk"), glorot(rng, dl, dl));
        params.insert(format!("{p}.wv"), glorot(rng, dl, dl));
        params.insert(format!("{p}.gate.w"), glorot(rng, l, l));
        params.insert(format!("{p}.gate.b"), zeros(&[l]));
        params.insert(format!("{p}.reweight.w"), glorot(rng, l, c));
        params.insert(format!("{p}.reweight.b"), zeros(&[c]));
    }
    let cv = config.comp_dim;
    for i in 0..4 {
        let c = config.channels[i];
        params.insert(format!("lgfa.comp.fwd{}.w", i + 1), glorot(rng, c, cv));
        params.insert(format!("lgfa.comp.fwd{}.b", i + 1), zeros(&[cv]));
        params.insert(format!("lgfa.comp.inv{}.w", i + 1), glorot(rng, cv, c));
        params.insert(format!("lgfa.comp.inv{}.b", i + 1), zeros(&[c]));
    }
    params.insert("lgfa.comp.ln.gain", ArrayD::from_elem(IxDyn(&[cv]), 1.0));
    params.insert("lgfa.comp.ln.bias", zeros(&[cv]));
    for n in ["wq", "wk", "wv", "wo"] {
        params.insert(format!("lgfa.comp.{n}"), glorot(rng, cv, cv));
    }
    // no key bias: a per-key constant shift cancels inside the softmax
    for n in ["bq", "bv", "bo"] {
        params.insert(format!("lgfa.comp.{n}"), zeros(&[cv]));
    }
}

/// Token rows entering the fusion stages, after the literal-length slice
/// and optional padding mask-out.
pub fn fusion_tokens(g: &mut Graph, tf: &TokenFeatures, config: &ModelConfig) -> Var {
    let mut tokens = tf.values;
    let mut mask = tf.pad_mask.clone();
    if config.literal_token_axis {
        tokens = g.slice_rows(tokens, 0, config.max_tokens);
        mask.truncate(config.max_tokens);
    }
    if config.mask_pad_tokens {
        let dl = g.shape(tokens)[1];
        let mut m = ArrayD::zeros(IxDyn(&[mask.len(), dl]));
        for (i, keep) in mask.iter().enumerate() {
            if *keep {
                for d in 0..dl {
                    m[[i, d]] = 1.0;
                }
            }
        }
        let mvar = g.constant(m);
        tokens = g.mul(tokens, mvar);
    }
    tokens
}

/// One gated fusion stage. Returns the fused level (same shape as the
/// input level) and the raw score matrix `(H_i·W_i, D_l)`.
pub fn fuse_stage(
    g: &mut Graph,
    level: Var,
    tokens: Var,
    bound: &BoundParams,
    stage: usize,
    config: &ModelConfig,
) -> Result<(Var, Array2<f64>)> {
    let shape = g.shape(level).to_vec();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let l = fusion_len(config);
    let tshape = g.shape(tokens);
    if tshape != [l, config.text_dim] {
        return Err(CrobimError::shape(
            format!("lgfa.fuse_stage[{stage}] tokens"),
            format!("[{l}, {}]", config.text_dim),
            format!("{tshape:?}"),
        ));
    }
    if c != config.channels[stage - 1] {
        return Err(CrobimError::shape(
            format!("lgfa.fuse_stage[{stage}] level"),
            format!("channels {}", config.channels[stage - 1]),
            format!("channels {c}"),
        ));
    }
    let p = format!("lgfa.stage{stage}");
    // projected and spatially expanded visual feature
    let flat = g.reshape(level, &[h * w, c]);
    let vq = g.matmul(flat, bound.var(&format!("{p}.wq")));
    let vq = g.add_bias_row(vq, bound.var(&format!("{p}.bq")));
    let lik = g.matmul(tokens, bound.var(&format!("{p}.wk")));
    let liv = g.matmul(tokens, bound.var(&format!("{p}.wv")));
    let scores = g.matmul(vq, lik); // (H·W, D_l)
    ensure_finite(g.value(scores), &format!("lgfa.fuse_stage[{stage}] scores"))?;
    let scaled = g.scale(scores, 1.0 / (l as f64).sqrt());
    let attn = g.softmax_rows(scaled, &format!("lgfa.stage{stage}.attn"));
    let livt = g.transpose(liv);
    let mixed = g.matmul(attn, livt); // (H·W, ℓ)
    let gated = g.matmul(mixed, bound.var(&format!("{p}.gate.w")));
    let gated = g.add_bias_row(gated, bound.var(&format!("{p}.gate.b")));
    let gated = g.gelu(gated);
    let reweight = g.matmul(gated, bound.var(&format!("{p}.reweight.w")));
    let reweight = g.add_bias_row(reweight, bound.var(&format!("{p}.reweight.b")));
    let reweight3 = g.reshape(reweight, &[h, w, c]);
    let fused = g.mul(reweight3, level);
    let score_value = g
        .value(scores)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("2d scores")
        .to_owned();
    Ok((fused, score_value))
}

/// Fuse all four stages against the same token rows.
pub fn fuse_all(
    g: &mut Graph,
    pyramid: &FeaturePyramid,
    tokens: Var,
    bound: &BoundParams,
    config: &ModelConfig,
) -> Result<([Var; 4], ScoreSet)> {
    let mut fused = Vec::with_capacity(4);
    let mut scores = Vec::with_capacity(4);
    let mut dims = Vec::with_capacity(4);
    for (i, level) in pyramid.levels.iter().enumerate() {
        let shape = g.shape(*level);
        dims.push((shape[0], shape[1]));
        let (f, s) = fuse_stage(g, *level, tokens, bound, i + 1, config)?;
        fused.push(f);
        scores.push(s);
    }
    Ok((
        [fused[0], fused[1], fused[2], fused[3]],
        ScoreSet {
            scores: [
                scores.remove(0),
                scores.remove(0),
                scores.remove(0),
                scores.remove(0),
            ],
            level_dims: [dims[0], dims[1], dims[2], dims[3]],
        },
    ))
}

/// Per-stage saliency at the coarsest grid: resample scores to `(H_4, W_4)`,
/// softmax each feature column over the cells, average the columns. Each map
/// sums to 1 over the grid, making stages comparable.
pub fn saliency_maps(scores: &ScoreSet, h4: usize, w4: usize) -> [Array2<f64>; 4] {
    let mut out = Vec::with_capacity(4);
    for (s, &(h, w)) in scores.scores.iter().zip(scores.level_dims.iter()) {
        let dl = s.shape()[1];
        let mut g = Graph::new();
        let cube = g.constant(s.clone().into_dyn());
        let cube = g.reshape(cube, &[h, w, dl]);
        let resized = g.bilinear_resize(cube, h4, w4);
        let rows = g.reshape(resized, &[h4 * w4, dl]);
        let cols = g.transpose(rows);
        let sm = g.softmax_rows(cols, "lgfa.saliency");
        let v = g.value(sm);
        let mut map = Array2::zeros((h4, w4));
        for d in 0..dl {
            for cell in 0..h4 * w4 {
                map[[cell / w4, cell % w4]] += v[[d, cell]] / dl as f64;
            }
        }
        out.push(map);
    }
    [out.remove(0), out.remove(0), out.remove(0), out.remove(0)]
}

/// Chained absolute differences of consecutive saliency maps.
pub fn deficit_from_saliency(saliency: &[Array2<f64>; 4]) -> Array2<f64> {
    let mut m = Array2::zeros(saliency[0].raw_dim());
    for k in 0..3 {
        m += &(&saliency[k] - &saliency[k + 1]).mapv(f64::abs);
    }
    m
}

/// Attention deficit map at `(H_4, W_4)`; zero wherever all four reduced
/// maps agree.
pub fn deficit_map(scores: &ScoreSet, config: &ModelConfig) -> Array2<f64> {
    let h4 = config.level_side(4);
    deficit_from_saliency(&saliency_maps(scores, h4, h4))
}

/// The `k` cells with the largest deficit, ties broken by row-major index
/// ascending. Selection runs through a bounded heap rather than a full sort.
pub fn topk_regions(m: &Array2<f64>, k: usize) -> Result<Vec<(usize, usize)>> {
    let (h, w) = (m.shape()[0], m.shape()[1]);
    if k > h * w {
        return Err(CrobimError::InvalidArgument(format!(
            "top-k count {k} exceeds the {h}x{w} grid"
        )));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    // BinaryHeap is a max-heap; keep the k best under reversed ordering.
    #[derive(PartialEq)]
    struct Entry(f64, usize);
    impl Eq for Entry {}
    impl PartialOrd for Entry {
        fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(other))
        }
    }
    impl Ord for Entry {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            // worst-first: lower value (or higher index on ties) at the top
            other
                .0
                .partial_cmp(&self.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(self.1.cmp(&other.1))
        }
    }
    let mut heap: BinaryHeap<Entry> = BinaryHeap::with_capacity(k + 1);
    for (idx, &value) in m.iter().enumerate() {
        heap.push(Entry(value, idx));
        if heap.len() > k {
            heap.pop();
        }
    }
    let mut picked: Vec<usize> = heap.into_iter().map(|e| e.1).collect();
    picked.sort_unstable();
    // restore best-first order for reporting: sort by value desc, index asc
    picked.sort_by(|&a, &b| {
        let (va, vb) = (
            m.iter().nth(a).copied().unwrap(),
            m.iter().nth(b).copied().unwrap(),
        );
        vb.partial_cmp(&va)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    Ok(picked.into_iter().map(|idx| (idx / w, idx % w)).collect())
}

/// Refine the fused levels at the selected coarse cells. Empty `regions`
/// returns the inputs untouched.
pub fn compensate_regions(
    g: &mut Graph,
    fused: &[Var; 4],
    regions: &[(usize, usize)],
    bound: &BoundParams,
    config: &ModelConfig,
) -> Result<[Var; 4]> {
    if regions.is_empty() {
        return Ok(*fused);
    }
    let h4 = config.level_side(4);
    let w4 = h4;
    for &(r, c) in regions {
        if r >= h4 || c >= w4 {
            return Err(CrobimError::InvalidArgument(format!(
                "region ({r}, {c}) outside the {h4}x{w4} grid"
            )));
        }
    }
    let k = regions.len();
    let cv = config.comp_dim;
    let cells: Vec<usize> = regions.iter().map(|&(r, c)| r * w4 + c).collect();
    // gather the four scale features at each cell through the shared resize
    let mut gathered = Vec::with_capacity(4); // (K, C_i) per level
    let mut projected = Vec::with_capacity(4); // (K, C_v̂) per level
    for (i, level) in fused.iter().enumerate() {
        let resized = g.bilinear_resize(*level, h4, w4);
        let rows = g.reshape(resized, &[h4 * w4, config.channels[i]]);
        let gath = g.gather_rows(rows, cells.clone());
        let w_fwd = bound.var(&format!("lgfa.comp.fwd{}.w", i + 1));
        let b_fwd = bound.var(&format!("lgfa.comp.fwd{}.b", i + 1));
        let proj = g.matmul(gath, w_fwd);
        let proj = g.add_bias_row(proj, b_fwd);
        gathered.push(gath);
        projected.push(proj);
    }
    let heads = config.comp_heads;
    let dh = cv / heads;
    // per-cell token matrices (4, C_v̂) -> enhanced rows, collected per level
    let mut deltas_per_level: Vec<Vec<Var>> = vec![Vec::with_capacity(k); 4];
    for cell in 0..k {
        let rows: Vec<Var> = (0..4)
            .map(|i| g.slice_rows(projected[i], cell, cell + 1))
            .collect();
        let x = g.concat_rows(&rows);
        let ln = g.layer_norm_rows(
            x,
            bound.var("lgfa.comp.ln.gain"),
            bound.var("lgfa.comp.ln.bias"),
            1e-5,
        );
        let q = g.matmul(ln, bound.var("lgfa.comp.wq"));
        let q = g.add_bias_row(q, bound.var("lgfa.comp.bq"));
        let kk = g.matmul(ln, bound.var("lgfa.comp.wk"));
        let v = g.matmul(ln, bound.var("lgfa.comp.wv"));
        let v = g.add_bias_row(v, bound.var("lgfa.comp.bv"));
        let mut head_outs = Vec::with_capacity(heads);
        for hh in 0..heads {
            let qh = g.slice_cols(q, hh * dh, (hh + 1) * dh);
            let kh = g.slice_cols(kk, hh * dh, (hh + 1) * dh);
            let vh = g.slice_cols(v, hh * dh, (hh + 1) * dh);
            let kt = g.transpose(kh);
            let s = g.matmul(qh, kt);
            let s = g.scale(s, 1.0 / (dh as f64).sqrt());
            ensure_finite(g.value(s), "lgfa.compensate_regions attention scores")?;
            let a = g.softmax_rows(s, "lgfa.comp.attn");
            head_outs.push(g.matmul(a, vh));
        }
        let concat = g.concat_cols(&head_outs);
        let msa = g.matmul(concat, bound.var("lgfa.comp.wo"));
        let msa = g.add_bias_row(msa, bound.var("lgfa.comp.bo"));
        let enhanced = g.add(msa, x);
        for i in 0..4 {
            let row = g.slice_rows(enhanced, i, i + 1);
            let w_inv = bound.var(&format!("lgfa.comp.inv{}.w", i + 1));
            let b_inv = bound.var(&format!("lgfa.comp.inv{}.b", i + 1));
            let back = g.matmul(row, w_inv);
            let back = g.add_bias_row(back, b_inv);
            let gathered_row = g.slice_rows(gathered[i], cell, cell + 1);
            let delta = g.sub(back, gathered_row);
            deltas_per_level[i].push(delta);
        }
    }
    let mut out = Vec::with_capacity(4);
    for (i, level) in fused.iter().enumerate() {
        let deltas = g.concat_rows(&deltas_per_level[i]);
        let scale = config.level_side(i + 1) / h4;
        let blocks: Vec<(usize, usize, usize, usize)> = regions
            .iter()
            .map(|&(r, c)| (r * scale, (r + 1) * scale, c * scale, (c + 1) * scale))
            .collect();
        out.push(g.add_blocks(*level, deltas, blocks));
    }
    Ok([out[0], out[1], out[2], out[3]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders;
    use crate::verify;
    use ndarray::{Array1, Array3};
    use rand::{Rng, SeedableRng};

    fn setup(config: &ModelConfig) -> Params {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Params::new();
        encoders::register_params(&mut params, config, &mut rng);
        crate::capm::register_params(&mut params, config, &mut rng);
        register_params(&mut params, config, &mut rng);
        params
    }

    fn random_tokens(g: &mut Graph, config: &ModelConfig, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        g.leaf(ArrayD::from_shape_fn(
            IxDyn(&[fusion_len(config), config.text_dim]),
            |_| rng.gen_range(-1.0..1.0),
        ))
    }

    fn random_level(g: &mut Graph, config: &ModelConfig, stage: usize, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = config.level_side(stage);
        g.leaf(ArrayD::from_shape_fn(
            IxDyn(&[side, side, config.channels[stage - 1]]),
            |_| rng.gen_range(-1.0..1.0),
        ))
    }

    #[test]
    fn all_ones_reweight_is_identity() {
        let config = ModelConfig::toy();
        let mut params = setup(&config);
        // zero the reweight matrix and set its bias to one: the 1x1 conv
        // output is exactly 1 everywhere, so fusion multiplies by ones
        for i in 1..=4 {
            params
                .get_mut(&format!("lgfa.stage{i}.reweight.w"))
                .fill(0.0);
            params
                .get_mut(&format!("lgfa.stage{i}.reweight.b"))
                .fill(1.0);
        }
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let level = random_level(&mut g, &config, 2, 5);
        let tokens = random_tokens(&mut g, &config, 6);
        let (fused, _) = fuse_stage(&mut g, level, tokens, &bound, 2, &config).unwrap();
        assert_eq!(g.value(fused), g.value(level));
    }

    #[test]
    fn identical_token_rows_collapse_columns() {
        let config = ModelConfig::toy();
        let params = setup(&config);
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let row: Vec<f64> = (0..config.text_dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let l = fusion_len(&config);
        let tokens = g.constant(ArrayD::from_shape_fn(IxDyn(&[l, config.text_dim]), |ix| {
            row[ix[1]]
        }));
        // spatially constant level -> spatially constant fused output
        let side = config.level_side(3);
        let level = g.constant(ArrayD::from_shape_fn(
            IxDyn(&[side, side, config.channels[2]]),
            |ix| 0.3 + 0.1 * ix[2] as f64,
        ));
        let (fused, _) = fuse_stage(&mut g, level, tokens, &bound, 3, &config).unwrap();
        let fv = g.value(fused);
        for i in 0..side {
            for j in 0..side {
                for c in 0..config.channels[2] {
                    assert!((fv[[i, j, c]] - fv[[0, 0, c]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fuse_stage_matches_loop_oracle() {
        let config = ModelConfig::toy();
        let params = setup(&config);
        for trial in 0..5u64 {
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let stage = (trial as usize % 4) + 1;
            let level = random_level(&mut g, &config, stage, 100 + trial);
            let tokens = random_tokens(&mut g, &config, 200 + trial);
            let (fused, scores) =
                fuse_stage(&mut g, level, tokens, &bound, stage, &config).unwrap();
            let p = format!("lgfa.stage{stage}");
            let as2 = |n: &str| {
                params
                    .get(&format!("{p}.{n}"))
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap()
                    .to_owned()
            };
            let as1 = |n: &str| {
                params
                    .get(&format!("{p}.{n}"))
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap()
                    .to_owned()
            };
            let (wq, bq, wk, wv) = (as2("wq"), as1("bq"), as2("wk"), as2("wv"));
            let (gw, gb, rw, rb) = (
                as2("gate.w"),
                as1("gate.b"),
                as2("reweight.w"),
                as1("reweight.b"),
            );
            let oracle_params = verify::FuseOracleParams {
                wq: &wq,
                bq: &bq,
                wk: &wk,
                wv: &wv,
                gate_w: &gw,
                gate_b: &gb,
                reweight_w: &rw,
                reweight_b: &rb,
            };
            let level3 = g
                .value(level)
                .view()
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap()
                .to_owned();
            let tok2 = g
                .value(tokens)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned();
            let (oracle_fused, oracle_scores) =
                verify::oracle_fuse_stage(&level3, &tok2, &oracle_params);
            let fv = g.value(fused);
            let max_f = fv
                .iter()
                .zip(oracle_fused.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            let max_s = scores
                .iter()
                .zip(oracle_scores.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(
                max_f < 1e-10 && max_s < 1e-10,
                "trial {trial}: {max_f} {max_s}"
            );
        }
    }

    #[test]
    fn fusion_softmax_rows_normalized() {
        let config = ModelConfig::toy();
        let params = setup(&config);
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let level = random_level(&mut g, &config, 1, 11);
        let tokens = random_tokens(&mut g, &config, 12);
        fuse_stage(&mut g, level, tokens, &bound, 1, &config).unwrap();
        let nodes = g.softmax_nodes();
        assert!(!nodes.is_empty());
        for (_, m) in nodes {
            for row in m.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }
    }

    fn random_scoreset(config: &ModelConfig, seed: u64) -> ScoreSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims: Vec<(usize, usize)> = (1..=4)
            .map(|i| (config.level_side(i), config.level_side(i)))
            .collect();
        let scores: Vec<Array2<f64>> = dims
            .iter()
            .map(|&(h, w)| {
                Array2::from_shape_fn((h * w, config.text_dim), |_| rng.gen_range(-2.0..2.0))
            })
            .collect();
        ScoreSet {
            scores: [
                scores[0].clone(),
                scores[1].clone(),
                scores[2].clone(),
                scores[3].clone(),
            ],
            level_dims: [dims[0], dims[1], dims[2], dims[3]],
        }
    }

    #[test]
    fn identical_scores_zero_deficit() {
        let config = ModelConfig::desk();
        let mut set = random_scoreset(&config, 3);
        // resampled saliency differs across levels unless the raw maps agree
        // after resizing; force exact agreement by tiling one coarse map
        let coarse = set.scores[3].clone();
        for i in 0..4 {
            let (h, w) = set.level_dims[i];
            let mut s = Array2::zeros((h * w, config.text_dim));
            let h4 = config.level_side(4);
            let scale = h / h4;
            for r in 0..h {
                for c in 0..w {
                    for d in 0..config.text_dim {
                        s[[r * w + c, d]] = coarse[[(r / scale) * h4 + (c / scale), d]];
                    }
                }
            }
            set.scores[i] = s;
        }
        let m = deficit_map(&set, &config);
        // constant blocks resample to themselves, so every stage shares one
        // saliency map and the chain of absolute differences vanishes
        for v in m.iter() {
            assert!(v.abs() < 1e-12, "deficit {v}");
        }
    }

    #[test]
    fn constant_saliency_example() {
        let mk = |v: f64| Array2::from_elem((2, 2), v);
        let m = deficit_from_saliency(&[mk(0.0), mk(1.0), mk(0.0), mk(1.0)]);
        for v in m.iter() {
            assert_eq!(*v, 3.0);
        }
    }

    #[test]
    fn deficit_matches_oracle_and_reversal_invariance() {
        let config = ModelConfig::desk();
        for seed in 0..5u64 {
            let set = random_scoreset(&config, 40 + seed);
            let h4 = config.level_side(4);
            let m = deficit_map(&set, &config);
            let oracle = verify::oracle_deficit_map(&set.scores, &set.level_dims, h4, h4);
            let max = m
                .iter()
                .zip(oracle.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max < 1e-10, "seed {seed}: {max}");
            // reversal invariance of the |a-b| chain
            let rev = ScoreSet {
                scores: [
                    set.scores[3].clone(),
                    set.scores[2].clone(),
                    set.scores[1].clone(),
                    set.scores[0].clone(),
                ],
                level_dims: [
                    set.level_dims[3],
                    set.level_dims[2],
                    set.level_dims[1],
                    set.level_dims[0],
                ],
            };
            let m_rev = deficit_map(&rev, &config);
            let max = m
                .iter()
                .zip(m_rev.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max < 1e-12);
        }
    }

    #[test]
    fn topk_contract() {
        let mut m = Array2::zeros((2, 3));
        m[[1, 2]] = 7.0;
        assert_eq!(topk_regions(&m, 1).unwrap(), vec![(1, 2)]);
        let flat = Array2::from_elem((2, 3), 4.0);
        assert_eq!(topk_regions(&flat, 2).unwrap(), vec![(0, 0), (0, 1)]);
        assert!(topk_regions(&flat, 0).unwrap().is_empty());
        assert!(topk_regions(&flat, 7).is_err());
        // invariance under adding a constant
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = Array2::from_shape_fn((4, 4), |_| rng.gen_range(-1.0..1.0));
        let shifted = m.mapv(|v| v + 42.0);
        assert_eq!(
            topk_regions(&m, 5).unwrap(),
            topk_regions(&shifted, 5).unwrap()
        );
        // against the full-sort oracle
        for k in [1usize, 3, 5, 16] {
            assert_eq!(topk_regions(&m, k).unwrap(), verify::oracle_topk(&m, k));
        }
    }

    fn square_channel_config() -> ModelConfig {
        let mut config = ModelConfig::toy();
        config.channels = [8, 8, 8, 8];
        config.comp_dim = 8;
        config
    }

    fn random_fused(g: &mut Graph, config: &ModelConfig, seed: u64) -> [Var; 4] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for i in 1..=4 {
            let side = config.level_side(i);
            out.push(g.leaf(ArrayD::from_shape_fn(
                IxDyn(&[side, side, config.channels[i - 1]]),
                |_| rng.gen_range(-1.0..1.0),
            )));
        }
        [out[0], out[1], out[2], out[3]]
    }

    #[test]
    fn empty_regions_is_identity() {
        let config = ModelConfig::toy();
        let params = setup(&config);
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let fused = random_fused(&mut g, &config, 21);
        let out = compensate_regions(&mut g, &fused, &[], &bound, &config).unwrap();
        for (a, b) in fused.iter().zip(out.iter()) {
            assert_eq!(a, b, "identity must return the same nodes");
        }
    }

    #[test]
    fn zeroed_msa_identity_projections_roundtrip() {
        let config = square_channel_config();
        let mut params = setup(&config);
        for i in 1..=4 {
            let eye = ndarray::Array2::<f64>::eye(8).into_dyn();
            *params.get_mut(&format!("lgfa.comp.fwd{i}.w")) = eye.clone();
            params.get_mut(&format!("lgfa.comp.fwd{i}.b")).fill(0.0);
            *params.get_mut(&format!("lgfa.comp.inv{i}.w")) = eye;
            params.get_mut(&format!("lgfa.comp.inv{i}.b")).fill(0.0);
        }
        params.get_mut("lgfa.comp.wv").fill(0.0);
        params.get_mut("lgfa.comp.bv").fill(0.0);
        params.get_mut("lgfa.comp.wo").fill(0.0);
        params.get_mut("lgfa.comp.bo").fill(0.0);
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let fused = random_fused(&mut g, &config, 22);
        let out = compensate_regions(&mut g, &fused, &[(0, 0)], &bound, &config).unwrap();
        for (a, b) in fused.iter().zip(out.iter()) {
            let max = g
                .value(*a)
                .iter()
                .zip(g.value(*b).iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            assert!(max < 1e-12, "residual identity broken: {max}");
        }
    }

    #[test]
    fn compensate_matches_loop_oracle() {
        let config = ModelConfig::toy();
        let params = setup(&config);
        let h4 = config.level_side(4);
        for trial in 0..3u64 {
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let fused = random_fused(&mut g, &config, 300 + trial);
            let regions = vec![(0usize, 0usize)];
            let out = compensate_regions(&mut g, &fused, &regions, &bound, &config).unwrap();
            let as2 = |n: &str| {
                params
                    .get(n)
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap()
                    .to_owned()
            };
            let as1 = |n: &str| {
                params
                    .get(n)
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap()
                    .to_owned()
            };
            let fwd_w: Vec<Array2<f64>> = (1..=4)
                .map(|i| as2(&format!("lgfa.comp.fwd{i}.w")))
                .collect();
            let fwd_b: Vec<Array1<f64>> = (1..=4)
                .map(|i| as1(&format!("lgfa.comp.fwd{i}.b")))
                .collect();
            let inv_w: Vec<Array2<f64>> = (1..=4)
                .map(|i| as2(&format!("lgfa.comp.inv{i}.w")))
                .collect();
            let inv_b: Vec<Array1<f64>> = (1..=4)
                .map(|i| as1(&format!("lgfa.comp.inv{i}.b")))
                .collect();
            let (ln_g, ln_b) = (as1("lgfa.comp.ln.gain"), as1("lgfa.comp.ln.bias"));
            let (wq, bq) = (as2("lgfa.comp.wq"), as1("lgfa.comp.bq"));
            let wk = as2("lgfa.comp.wk");
            let (wv, bv) = (as2("lgfa.comp.wv"), as1("lgfa.comp.bv"));
            let (wo, bo) = (as2("lgfa.comp.wo"), as1("lgfa.comp.bo"));
            let oracle_params = verify::CompOracleParams {
                fwd_w: [&fwd_w[0], &fwd_w[1], &fwd_w[2], &fwd_w[3]],
                fwd_b: [&fwd_b[0], &fwd_b[1], &fwd_b[2], &fwd_b[3]],
                inv_w: [&inv_w[0], &inv_w[1], &inv_w[2], &inv_w[3]],
                inv_b: [&inv_b[0], &inv_b[1], &inv_b[2], &inv_b[3]],
                ln_gain: &ln_g,
                ln_bias: &ln_b,
                wq: &wq,
                bq: &bq,
                wk: &wk,
                wv: &wv,
                bv: &bv,
                wo: &wo,
                bo: &bo,
                heads: config.comp_heads,
            };
            let levels: Vec<Array3<f64>> = fused
                .iter()
                .map(|v| {
                    g.value(*v)
                        .view()
                        .into_dimensionality::<ndarray::Ix3>()
                        .unwrap()
                        .to_owned()
                })
                .collect();
            let levels4 = [
                levels[0].clone(),
                levels[1].clone(),
                levels[2].clone(),
                levels[3].clone(),
            ];
            let oracle = verify::oracle_compensate(&levels4, &regions, &oracle_params, h4, h4);
            for (i, v) in out.iter().enumerate() {
                let max = g
                    .value(*v)
                    .iter()
                    .zip(oracle[i].iter())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                assert!(max < 1e-10, "trial {trial} level {i}: {max}");
            }
        }
    }
}
