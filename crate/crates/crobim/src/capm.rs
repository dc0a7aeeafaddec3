//! Context-aware prompt modulation: learnable text prompts attend over
//! pooled multi-scale visual context before text encoding.

use crate::config::{ContextConcatMode, ModelConfig};
use crate::encoders::{self, FeaturePyramid, TokenFeatures};
use crate::error::{ensure_finite, Result};
use crate::params::{glorot, zeros, BoundParams, Params};
use crate::tape::{Graph, Var};
use rand_chacha::ChaCha8Rng;

pub fn register_params(params: &mut Params, config: &ModelConfig, rng: &mut ChaCha8Rng) {
    let dl = config.text_dim;
    params.insert("capm.prompts", glorot(rng, config.num_prompts, dl));
    // registered regardless of ablation flags so parameter layouts stay
    // stable; disabled paths simply never touch their weights
    let ct = config.channels_total();
    for i in 0..4 {
        params.insert(
            format!("capm.ctx_proj{}.w", i + 1),
            glorot(rng, config.channels[i], ct),
        );
        params.insert(format!("capm.ctx_proj{}.b", i + 1), zeros(&[ct]));
    }
    params.insert("capm.wq", glorot(rng, dl, dl));
    params.insert("capm.wk", glorot(rng, ct, dl));
    params.insert("capm.wv", glorot(rng, ct, dl));
}

/// Pool every pyramid level to `s×s` and assemble the context rows.
///
/// Row-stack mode projects each pooled level to `C_total` and stacks the
/// four levels along the row axis (`4s²` rows). Channel-concat mode keeps
/// the raw pooled channels side by side (`s²` rows).
pub fn pool_context(
    g: &mut Graph,
    bound: &BoundParams,
    pyramid: &FeaturePyramid,
    config: &ModelConfig,
) -> Var {
    let s = config.pool_size;
    let ct = config.channels_total();
    let mut blocks = Vec::with_capacity(4);
    for (i, level) in pyramid.levels.iter().enumerate() {
        let pooled = g.adaptive_avg_pool(*level, s);
        let rows = g.reshape(pooled, &[s * s, config.channels[i]]);
        blocks.push(rows);
    }
    match config.context_mode {
        ContextConcatMode::RowStack => {
            let projected: Vec<Var> = blocks
                .into_iter()
                .enumerate()
                .map(|(i, rows)| {
                    let w = bound.var(&format!("capm.ctx_proj{}.w", i + 1));
                    let b = bound.var(&format!("capm.ctx_proj{}.b", i + 1));
                    let p = g.matmul(rows, w);
                    g.add_bias_row(p, b)
                })
                .collect();
            let out = g.concat_rows(&projected);
            debug_assert_eq!(g.shape(out), &[4 * s * s, ct]);
            out
        }
        ContextConcatMode::ChannelConcat => {
            let out = g.concat_cols(&blocks);
            debug_assert_eq!(g.shape(out), &[s * s, ct]);
            out
        }
    }
}

/// Cross-attend the learnable prompts over the context rows:
/// `P_v = Softmax(P·Wq · (Ve·Wk)ᵀ) · Ve·Wv`, single head, optionally
/// scaled by 1/sqrt(D_l).
pub fn modulate_prompts(
    g: &mut Graph,
    bound: &BoundParams,
    context: Var,
    config: &ModelConfig,
) -> Result<Var> {
    let prompts = bound.var("capm.prompts");
    let q = g.matmul(prompts, bound.var("capm.wq"));
    let k = g.matmul(context, bound.var("capm.wk"));
    let v = g.matmul(context, bound.var("capm.wv"));
    let kt = g.transpose(k);
    let mut scores = g.matmul(q, kt);
    if config.scale_capm_scores {
        scores = g.scale(scores, 1.0 / (config.text_dim as f64).sqrt());
    }
    ensure_finite(g.value(scores), "capm.modulate_prompts scores")?;
    let attn = g.softmax_rows(scores, "capm.prompt_attn");
    Ok(g.matmul(attn, v))
}

/// Full composition: pool the pyramid, modulate the prompts, encode the
/// expression jointly with the modulated prompts.
pub fn encode_with_prompts(
    g: &mut Graph,
    bound: &BoundParams,
    tokens: &[usize],
    pyramid: &FeaturePyramid,
    config: &ModelConfig,
) -> Result<TokenFeatures> {
    let context = pool_context(g, bound, pyramid, config);
    let modulated = modulate_prompts(g, bound, context, config)?;
    encoders::encode_text(g, bound, tokens, Some(modulated), config)
}
