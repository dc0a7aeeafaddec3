//! Mutual-interaction decoder: cascaded bidirectional cross-attention
//! alignment and mask prediction.
//!
//! Language-to-vision first (`L̂ = FFN(SelfAttn(CrossAttn(L, V)))`), then
//! vision-to-language (`V̂ = FFN(MSDeformAttn(CrossAttn(V, L̂)))`), each
//! sub-layer in pre-norm residual form `x + Sub(LN(x))` so that zeroed
//! output projections reduce every sub-layer to the identity. The mask is
//! the per-pixel dot product between the fused visual embedding and the
//! summary-token feature.

use crate::config::ModelConfig;
use crate::encoders::TokenFeatures;
use crate::error::{ensure_finite, CrobimError, Result};
use crate::params::{glorot, zeros, BoundParams, Params};
use crate::tape::{Graph, Var};
use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

/// Flattened decoder state shared by the interaction steps.
pub struct DecoderState {
    /// Multi-scale visual tokens (N, D), level order 1→4, row-major per level.
    pub v_ms: Var,
    /// Projected linguistic tokens (ℓ, D).
    pub l_proj: Var,
    /// Post-interaction linguistic tokens; starts equal to `l_proj`.
    pub l_hat: Var,
    /// Post-interaction visual tokens; starts equal to `v_ms`.
    pub v_hat: Var,
    pub level_dims: [(usize, usize); 4],
    /// Token index span of each level in [0, N).
    pub level_ranges: [(usize, usize); 4],
    pub cls_index: usize,
    /// Normalized (x, y) reference point per visual token.
    pub refs: Array2<f64>,
}

pub fn register_params(params: &mut Params, config: &ModelConfig, rng: &mut ChaCha8Rng) {
    let d = config.hidden_dim;
    for i in 0..4 {
        params.insert(
            format!("mid.proj_v{}.w", i + 1),
            glorot(rng, config.channels[i], d),
        );
        params.insert(format!("mid.proj_v{}.b", i + 1), zeros(&[d]));
    }
    params.insert("mid.proj_l.w", glorot(rng, config.text_dim, d));
    params.insert("mid.proj_l.b", zeros(&[d]));
    for block in ["mid.l2v.cross", "mid.l2v.self", "mid.v2l.cross"] {
        for n in ["wq", "wk", "wv", "wo"] {
            params.insert(format!("{block}.{n}"), glorot(rng, d, d));
        }
        params.insert(format!("{block}.bo"), zeros(&[d]));
    }
    for side in ["l2v", "v2l"] {
        for ln in ["ln1", "ln2", "ln3"] {
            params.insert(
                format!("mid.{side}.{ln}.gain"),
                ArrayD::from_elem(IxDyn(&[d]), 1.0),
            );
            params.insert(format!("mid.{side}.{ln}.bias"), zeros(&[d]));
        }
        let hidden = config.ffn_mult * d;
        params.insert(format!("mid.{side}.ffn.w1"), glorot(rng, d, hidden));
        params.insert(format!("mid.{side}.ffn.b1"), zeros(&[hidden]));
        params.insert(format!("mid.{side}.ffn.w2"), glorot(rng, hidden, d));
        params.insert(format!("mid.{side}.ffn.b2"), zeros(&[d]));
    }
    let taps = config.msda_heads * 4 * config.msda_points;
    params.insert("mid.v2l.deform.val.w", glorot(rng, d, d));
    params.insert("mid.v2l.deform.val.b", zeros(&[d]));
    // deformable predictors start at zero with a direction-grid offset bias,
    // so early sampling stays near the reference points with uniform weights
    params.insert("mid.v2l.deform.off.w", zeros(&[d, taps * 2]));
    params.insert("mid.v2l.deform.off.b", offset_bias_grid(config));
    params.insert("mid.v2l.deform.wgt.w", zeros(&[d, taps]));
    params.insert("mid.v2l.deform.wgt.b", zeros(&[taps]));
    params.insert("mid.v2l.deform.out.w", glorot(rng, d, d));
    params.insert("mid.v2l.deform.out.b", zeros(&[d]));
    // zero mask head: logits start at zero, cross-entropy at ln 2
    params.insert("mid.mask.w", zeros(&[d, d]));
    params.insert("mid.mask.b", zeros(&[d]));
}

/// Per-(head, level, point) initial offsets: unit directions spread over
/// the heads, magnitude growing with the point index (pixel units).
fn offset_bias_grid(config: &ModelConfig) -> ArrayD<f64> {
    let heads = config.msda_heads;
    let points = config.msda_points;
    let taps = heads * 4 * points;
    let mut b = ArrayD::zeros(IxDyn(&[taps * 2]));
    for h in 0..heads {
        // off-axis angles and non-half-integer magnitudes keep the initial
        // sampling locations away from bilinear cell boundaries
        let angle = 2.0 * std::f64::consts::PI * (h as f64 + 0.3) / heads as f64;
        for l in 0..4 {
            for p in 0..points {
                let idx = (h * 4 + l) * points + p;
                let mag = (p + 1) as f64 * 0.6;
                b[[idx * 2]] = angle.cos() * mag;
                b[[idx * 2 + 1]] = angle.sin() * mag;
            }
        }
    }
    b
}

/// Normalized cell-center reference point for every visual token.
pub fn reference_points(level_dims: &[(usize, usize); 4]) -> Array2<f64> {
    let n: usize = level_dims.iter().map(|&(h, w)| h * w).sum();
    let mut refs = Array2::zeros((n, 2));
    let mut t = 0;
    for &(h, w) in level_dims {
        for r in 0..h {
            for c in 0..w {
                refs[[t, 0]] = (c as f64 + 0.5) / w as f64;
                refs[[t, 1]] = (r as f64 + 0.5) / h as f64;
                t += 1;
            }
        }
    }
    refs
}

/// Project every level to the hidden width, flatten, concatenate in level
/// order, and project the linguistic tokens alongside.
pub fn harmonize(
    g: &mut Graph,
    fused: &[Var; 4],
    tokens: &TokenFeatures,
    bound: &BoundParams,
    config: &ModelConfig,
) -> Result<DecoderState> {
    let d = config.hidden_dim;
    let mut parts = Vec::with_capacity(4);
    let mut level_dims = [(0usize, 0usize); 4];
    let mut level_ranges = [(0usize, 0usize); 4];
    let mut start = 0;
    for (i, level) in fused.iter().enumerate() {
        let shape = g.shape(*level).to_vec();
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        if c != config.channels[i] {
            return Err(CrobimError::shape(
                format!("mid.harmonize level {}", i + 1),
                format!("channels {}", config.channels[i]),
                format!("channels {c}"),
            ));
        }
        level_dims[i] = (h, w);
        level_ranges[i] = (start, start + h * w);
        start += h * w;
        let flat = g.reshape(*level, &[h * w, c]);
        let proj = g.matmul(flat, bound.var(&format!("mid.proj_v{}.w", i + 1)));
        let proj = g.add_bias_row(proj, bound.var(&format!("mid.proj_v{}.b", i + 1)));
        parts.push(proj);
    }
    let v_ms = g.concat_rows(&parts);
    debug_assert_eq!(g.shape(v_ms), &[config.num_visual_tokens(), d]);
    let l_proj = g.matmul(tokens.values, bound.var("mid.proj_l.w"));
    let l_proj = g.add_bias_row(l_proj, bound.var("mid.proj_l.b"));
    Ok(DecoderState {
        v_ms,
        l_proj,
        l_hat: l_proj,
        v_hat: v_ms,
        level_dims,
        level_ranges,
        cls_index: tokens.cls_index,
        refs: reference_points(&level_dims),
    })
}

/// Plain single-head attention with an output projection.
fn attention(
    g: &mut Graph,
    queries: Var,
    keys_values: Var,
    bound: &BoundParams,
    block: &str,
    config: &ModelConfig,
) -> Result<Var> {
    let q = g.matmul(queries, bound.var(&format!("{block}.wq")));
    let k = g.matmul(keys_values, bound.var(&format!("{block}.wk")));
    let v = g.matmul(keys_values, bound.var(&format!("{block}.wv")));
    let kt = g.transpose(k);
    let s = g.matmul(q, kt);
    let s = g.scale(s, 1.0 / (config.hidden_dim as f64).sqrt());
    ensure_finite(g.value(s), &format!("{block} attention scores"))?;
    let a = g.softmax_rows(s, &format!("{block}.attn"));
    let mixed = g.matmul(a, v);
    let out = g.matmul(mixed, bound.var(&format!("{block}.wo")));
    Ok(g.add_bias_row(out, bound.var(&format!("{block}.bo"))))
}

fn layer_norm(g: &mut Graph, x: Var, bound: &BoundParams, name: &str) -> Var {
    g.layer_norm_rows(
        x,
        bound.var(&format!("{name}.gain")),
        bound.var(&format!("{name}.bias")),
        1e-5,
    )
}

fn feed_forward(g: &mut Graph, x: Var, bound: &BoundParams, block: &str) -> Var {
    let h = g.matmul(x, bound.var(&format!("{block}.w1")));
    let h = g.add_bias_row(h, bound.var(&format!("{block}.b1")));
    let h = g.gelu(h);
    let o = g.matmul(h, bound.var(&format!("{block}.w2")));
    g.add_bias_row(o, bound.var(&format!("{block}.b2")))
}

/// Language-to-vision interaction: update the linguistic tokens against the
/// visual tokens through cross-attention, self-attention, and a
/// feed-forward block, each in pre-norm residual form.
pub fn l2v_interact(
    g: &mut Graph,
    state: &mut DecoderState,
    bound: &BoundParams,
    config: &ModelConfig,
) -> Result<()> {
    let mut x = state.l_hat;
    let n1 = layer_norm(g, x, bound, "mid.l2v.ln1");
    let cross = attention(g, n1, state.v_ms, bound, "mid.l2v.cross", config)?;
    x = g.add(x, cross);
    let n2 = layer_norm(g, x, bound, "mid.l2v.ln2");
    let selfa = attention(g, n2, n2, bound, "mid.l2v.self", config)?;
    x = g.add(x, selfa);
    let n3 = layer_norm(g, x, bound, "mid.l2v.ln3");
    let ffn = feed_forward(g, n3, bound, "mid.l2v.ffn");
    state.l_hat = g.add(x, ffn);
    Ok(())
}

/// Multiscale deformable attention over the visual token maps: offsets and
/// weights are predicted per query; value maps are sampled bilinearly at
/// reference + offset on every level (zero padding outside) and combined
/// with softmax weights across (levels × points) per head.
pub fn ms_deform_attn(
    g: &mut Graph,
    queries: Var,
    values_src: Var,
    level_dims: &[(usize, usize); 4],
    level_ranges: &[(usize, usize); 4],
    refs: &Array2<f64>,
    bound: &BoundParams,
    config: &ModelConfig,
) -> Result<Var> {
    let d = config.hidden_dim;
    let heads = config.msda_heads;
    let points = config.msda_points;
    let val = g.matmul(values_src, bound.var("mid.v2l.deform.val.w"));
    let val = g.add_bias_row(val, bound.var("mid.v2l.deform.val.b"));
    let mut maps = Vec::with_capacity(4);
    for (i, &(h, w)) in level_dims.iter().enumerate() {
        let (start, end) = level_ranges[i];
        let rows = g.slice_rows(val, start, end);
        maps.push(g.reshape(rows, &[h, w, d]));
    }
    let off = g.matmul(queries, bound.var("mid.v2l.deform.off.w"));
    let off = g.add_bias_row(off, bound.var("mid.v2l.deform.off.b"));
    let wraw = g.matmul(queries, bound.var("mid.v2l.deform.wgt.w"));
    let wraw = g.add_bias_row(wraw, bound.var("mid.v2l.deform.wgt.b"));
    ensure_finite(g.value(wraw), "mid.ms_deform_attn weight logits")?;
    let n = g.shape(queries)[0];
    let grouped = g.reshape(wraw, &[n * heads, 4 * points]);
    let weights = g.softmax_rows(grouped, "mid.deform.weights");
    let weights = g.reshape(weights, &[n, heads * 4 * points]);
    let sampled = g.msdeform_sample(&maps, off, weights, refs.clone(), heads, points);
    let out = g.matmul(sampled, bound.var("mid.v2l.deform.out.w"));
    Ok(g.add_bias_row(out, bound.var("mid.v2l.deform.out.b")))
}

/// Vision-to-language interaction: cross-attend the visual tokens over the
/// updated linguistic tokens, refine with deformable attention over the
/// visual maps, then feed-forward; pre-norm residual throughout.
pub fn v2l_interact(
    g: &mut Graph,
    state: &mut DecoderState,
    bound: &BoundParams,
    config: &ModelConfig,
) -> Result<()> {
    let mut y = state.v_hat;
    let n1 = layer_norm(g, y, bound, "mid.v2l.ln1");
    let cross = attention(g, n1, state.l_hat, bound, "mid.v2l.cross", config)?;
    y = g.add(y, cross);
    let n2 = layer_norm(g, y, bound, "mid.v2l.ln2");
    let deform = ms_deform_attn(
        g,
        n2,
        n2,
        &state.level_dims,
        &state.level_ranges,
        &state.refs,
        bound,
        config,
    )?;
    y = g.add(y, deform);
    let n3 = layer_norm(g, y, bound, "mid.v2l.ln3");
    let ffn = feed_forward(g, n3, bound, "mid.v2l.ffn");
    state.v_hat = g.add(y, ffn);
    Ok(())
}

/// Run the configured number of interaction rounds. Zero rounds bypasses
/// both interactions; a unidirectional decoder skips the language update.
pub fn interact(
    g: &mut Graph,
    state: &mut DecoderState,
    bound: &BoundParams,
    config: &ModelConfig,
) -> Result<()> {
    for _ in 0..config.decoder_rounds {
        if config.bidirectional_decoder {
            l2v_interact(g, state, bound, config)?;
        }
        v2l_interact(g, state, bound, config)?;
    }
    Ok(())
}

/// Build the mask embedding and dot it with the summary token.
/// Returns logits at `(H_1, W_1)` and bilinearly upsampled `(H, W)`.
pub fn predict_mask(
    g: &mut Graph,
    state: &DecoderState,
    bound: &BoundParams,
    config: &ModelConfig,
) -> Result<(Var, Var)> {
    let d = config.hidden_dim;
    let (h1, w1) = state.level_dims[0];
    let v_sum = g.add(state.v_hat, state.v_ms);
    let mut acc: Option<Var> = None;
    for (i, &(h, w)) in state.level_dims.iter().enumerate() {
        let (start, end) = state.level_ranges[i];
        let rows = g.slice_rows(v_sum, start, end);
        let cube = g.reshape(rows, &[h, w, d]);
        let up = g.bilinear_resize(cube, h1, w1);
        acc = Some(match acc {
            None => up,
            Some(a) => g.add(a, up),
        });
    }
    let summed = acc.expect("four levels");
    let flat = g.reshape(summed, &[h1 * w1, d]);
    let v_out = g.matmul(flat, bound.var("mid.mask.w"));
    let v_out = g.add_bias_row(v_out, bound.var("mid.mask.b"));
    let cls = g.slice_rows(state.l_hat, state.cls_index, state.cls_index + 1);
    let cls_t = g.transpose(cls);
    let logits_flat = g.matmul(v_out, cls_t);
    let logits = g.reshape(logits_flat, &[h1, w1]);
    let h = config.image_size;
    let cube = g.reshape(logits, &[h1, w1, 1]);
    let up = g.bilinear_resize(cube, h, h);
    let logits_up = g.reshape(up, &[h, h]);
    Ok((logits, logits_up))
}
