//! Stub image and text encoders plus the core array contracts.
//!
//! The image encoder is a four-stage patchify pyramid (stride-4 stem, then
//! stride-2 stages) reproducing the output geometry of the full-scale
//! backbones at a tiny parameter count. The text encoder is a token
//! embedding with sinusoidal positions and one self-attention block, the
//! smallest shape that lets appended prompt vectors influence every token.

use crate::config::ModelConfig;
use crate::error::{ensure_finite, CrobimError, Result};
use crate::params::{glorot, zeros, BoundParams, Params};
use crate::tape::{Graph, Var};
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

/// Reserved token ids of the synthetic vocabulary.
pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const UNK_ID: usize = 2;

/// Four per-scale visual feature maps, graph-bound.
#[derive(Debug)]
pub struct FeaturePyramid {
    pub levels: [Var; 4],
}

impl FeaturePyramid {
    /// Check the four-level halving contract and finiteness.
    pub fn validate(&self, g: &Graph, config: &ModelConfig) -> Result<()> {
        for (i, level) in self.levels.iter().enumerate() {
            let side = config.level_side(i + 1);
            let shape = g.shape(*level);
            let expect = [side, side, config.channels[i]];
            if shape != expect {
                return Err(CrobimError::shape(
                    format!("pyramid level {}", i + 1),
                    format!("{expect:?}"),
                    format!("{shape:?}"),
                ));
            }
            ensure_finite(g.value(*level), &format!("pyramid level {}", i + 1))?;
        }
        Ok(())
    }
}

/// Linguistic features with padding mask and the summary-token position.
#[derive(Debug)]
pub struct TokenFeatures {
    pub values: Var,
    pub pad_mask: Vec<bool>,
    pub cls_index: usize,
}

/// One (image, expression, mask) sample.
#[derive(Debug, Clone)]
pub struct Triplet {
    /// H×W×3, values in [0, 1].
    pub image: Array3<f64>,
    /// Token-id sequence (vocabulary ids, no reserved ids).
    pub expression: Vec<usize>,
    /// H×W binary ground truth.
    pub mask: Array2<u8>,
    pub meta: TripletMeta,
}

#[derive(Debug, Clone, Default)]
pub struct TripletMeta {
    pub category: String,
    pub source_id: String,
    pub expression_text: String,
}

impl Triplet {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let h = config.image_size;
        if self.image.shape() != [h, h, 3] {
            return Err(CrobimError::shape(
                format!("triplet {} image", self.meta.source_id),
                format!("[{h}, {h}, 3]"),
                format!("{:?}", self.image.shape()),
            ));
        }
        if self.mask.shape() != [h, h] {
            return Err(CrobimError::shape(
                format!("triplet {} mask", self.meta.source_id),
                format!("[{h}, {h}]"),
                format!("{:?}", self.mask.shape()),
            ));
        }
        if let Some(&id) = self.expression.iter().find(|&&id| id >= config.vocab_size) {
            return Err(CrobimError::InvalidArgument(format!(
                "token id {id} exceeds vocabulary size {}",
                config.vocab_size
            )));
        }
        Ok(())
    }
}

/// Channel count entering each pyramid stage after patch rearrangement.
fn stage_inputs(config: &ModelConfig) -> [usize; 4] {
    [
        3 * 16,
        config.channels[0] * 4,
        config.channels[1] * 4,
        config.channels[2] * 4,
    ]
}

pub fn register_params(params: &mut Params, config: &ModelConfig, rng: &mut ChaCha8Rng) {
    let ins = stage_inputs(config);
    for i in 0..4 {
        params.insert(
            format!("enc.img.stage{}.w", i + 1),
            glorot(rng, ins[i], config.channels[i]),
        );
        params.insert(
            format!("enc.img.stage{}.b", i + 1),
            zeros(&[config.channels[i]]),
        );
    }
    let dl = config.text_dim;
    params.insert("enc.txt.embed", glorot(rng, config.vocab_size, dl));
    params.insert("enc.txt.ln.gain", ArrayD::from_elem(IxDyn(&[dl]), 1.0));
    params.insert("enc.txt.ln.bias", zeros(&[dl]));
    for name in ["wq", "wk", "wv", "wo"] {
        params.insert(format!("enc.txt.attn.{name}"), glorot(rng, dl, dl));
    }
    params.insert("enc.txt.attn.bo", zeros(&[dl]));
}

/// Encode an image into the four-level pyramid.
pub fn encode_image(
    g: &mut Graph,
    bound: &BoundParams,
    image: &Array3<f64>,
    config: &ModelConfig,
) -> Result<FeaturePyramid> {
    let h = config.image_size;
    if image.shape() != [h, h, 3] {
        return Err(CrobimError::shape(
            "encode_image",
            format!("[{h}, {h}, 3]"),
            format!("{:?}", image.shape()),
        ));
    }
    ensure_finite(&image.clone().into_dyn(), "encode_image input")?;
    let mut x = g.constant(image.clone().into_dyn());
    let mut levels = Vec::with_capacity(4);
    for i in 0..4 {
        let patch = if i == 0 { 4 } else { 2 };
        let packed = g.space_to_depth(x, patch);
        let [ph, pw, pc] = [g.shape(packed)[0], g.shape(packed)[1], g.shape(packed)[2]];
        let flat = g.reshape(packed, &[ph * pw, pc]);
        let w = bound.var(&format!("enc.img.stage{}.w", i + 1));
        let b = bound.var(&format!("enc.img.stage{}.b", i + 1));
        let lin = g.matmul(flat, w);
        let lin = g.add_bias_row(lin, b);
        let level = g.reshape(lin, &[ph, pw, config.channels[i]]);
        levels.push(level);
        if i < 3 {
            let act2d = g.reshape(level, &[ph * pw, config.channels[i]]);
            let act = g.gelu(act2d);
            x = g.reshape(act, &[ph, pw, config.channels[i]]);
        }
    }
    let pyramid = FeaturePyramid {
        levels: [levels[0], levels[1], levels[2], levels[3]],
    };
    pyramid.validate(g, config)?;
    Ok(pyramid)
}

/// Sinusoidal position table, one row per sequence position.
fn position_table(len: usize, dim: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((len, dim));
    for pos in 0..len {
        for i in 0..dim {
            let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            pe[[pos, i]] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// Encode a token sequence, optionally with prompt vectors appended after
/// the `l_m` token positions. Position 0 is always the summary token.
pub fn encode_text(
    g: &mut Graph,
    bound: &BoundParams,
    tokens: &[usize],
    prompt_embeds: Option<Var>,
    config: &ModelConfig,
) -> Result<TokenFeatures> {
    if tokens.is_empty() {
        return Err(CrobimError::InvalidArgument(
            "empty expression: at least one token is required".into(),
        ));
    }
    if let Some(&id) = tokens.iter().find(|&&id| id >= config.vocab_size) {
        return Err(CrobimError::InvalidArgument(format!(
            "token id {id} exceeds vocabulary size {}",
            config.vocab_size
        )));
    }
    let lm = config.max_tokens;
    let capacity = lm - 1; // summary token occupies position 0
    let tokens: Vec<usize> = if tokens.len() > capacity {
        if config.truncate_expressions {
            tokens[..capacity].to_vec()
        } else {
            return Err(CrobimError::InvalidArgument(format!(
                "expression of {} tokens exceeds the {capacity}-token capacity (max_tokens {lm} minus the summary slot)",
                tokens.len()
            )));
        }
    } else {
        tokens.to_vec()
    };
    let mut ids = Vec::with_capacity(lm);
    ids.push(CLS_ID);
    ids.extend_from_slice(&tokens);
    ids.resize(lm, PAD_ID);
    let mut pad_mask = vec![false; lm];
    for m in pad_mask.iter_mut().take(tokens.len() + 1) {
        *m = true;
    }
    let table = bound.var("enc.txt.embed");
    let emb = g.embed(table, ids);
    let mut x = emb;
    let mut seq_len = lm;
    if let Some(p) = prompt_embeds {
        let pshape = g.shape(p);
        if pshape != [config.num_prompts, config.text_dim] {
            return Err(CrobimError::shape(
                "encode_text prompt_embeds",
                format!("[{}, {}]", config.num_prompts, config.text_dim),
                format!("{pshape:?}"),
            ));
        }
        x = g.concat_rows(&[x, p]);
        seq_len += config.num_prompts;
        pad_mask.extend(std::iter::repeat(true).take(config.num_prompts));
    }
    let pos = g.constant(position_table(seq_len, config.text_dim).into_dyn());
    let x0 = g.add(x, pos);
    // one pre-norm self-attention block
    let ln = g.layer_norm_rows(
        x0,
        bound.var("enc.txt.ln.gain"),
        bound.var("enc.txt.ln.bias"),
        1e-5,
    );
    let q = g.matmul(ln, bound.var("enc.txt.attn.wq"));
    let k = g.matmul(ln, bound.var("enc.txt.attn.wk"));
    let v = g.matmul(ln, bound.var("enc.txt.attn.wv"));
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt);
    let scores = g.scale(scores, 1.0 / (config.text_dim as f64).sqrt());
    ensure_finite(g.value(scores), "encode_text attention scores")?;
    let attn = g.softmax_rows(scores, "encoders.text.self_attn");
    let mixed = g.matmul(attn, v);
    let out = g.matmul(mixed, bound.var("enc.txt.attn.wo"));
    let out = g.add_bias_row(out, bound.var("enc.txt.attn.bo"));
    let values = g.add(x0, out);
    Ok(TokenFeatures {
        values,
        pad_mask,
        cls_index: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn setup(config: &ModelConfig) -> (Params, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Params::new();
        register_params(&mut params, config, &mut rng);
        (params, rng)
    }

    fn zero_image(h: usize) -> Array3<f64> {
        Array3::zeros((h, h, 3))
    }

    fn random_image(h: usize, seed: u64) -> Array3<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((h, h, 3), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn pyramid_shapes_desk() {
        let config = ModelConfig::desk();
        let (params, _) = setup(&config);
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let pyr = encode_image(&mut g, &bound, &random_image(64, 7), &config).unwrap();
        let expect = [[16, 16, 16], [8, 8, 32], [4, 4, 64], [2, 2, 128]];
        for (level, want) in pyr.levels.iter().zip(expect.iter()) {
            assert_eq!(g.shape(*level), want);
        }
    }

    #[test]
    fn pyramid_shape_law_any_h() {
        for h in [32usize, 64, 96, 128] {
            let mut config = ModelConfig::toy();
            config.image_size = h;
            let (params, _) = setup(&config);
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let pyr = encode_image(&mut g, &bound, &zero_image(h), &config).unwrap();
            for (i, level) in pyr.levels.iter().enumerate() {
                assert_eq!(g.shape(*level)[0], h >> (i + 2));
            }
        }
    }

    #[test]
    fn zero_image_zero_biases_gives_zero_pyramid() {
        let config = ModelConfig::toy();
        let (params, _) = setup(&config);
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let pyr = encode_image(&mut g, &bound, &zero_image(32), &config).unwrap();
        for level in pyr.levels {
            assert!(g.value(level).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn encode_image_is_deterministic() {
        let config = ModelConfig::toy();
        let (params, _) = setup(&config);
        let image = random_image(32, 3);
        let run = || {
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let pyr = encode_image(&mut g, &bound, &image, &config).unwrap();
            pyr.levels.map(|l| g.value(l).clone())
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn encode_image_rejects_wrong_dims() {
        let config = ModelConfig::desk();
        let (params, _) = setup(&config);
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let err = encode_image(&mut g, &bound, &zero_image(32), &config).unwrap_err();
        assert!(matches!(err, CrobimError::Shape { .. }));
    }

    #[test]
    fn encode_text_padding_arithmetic() {
        let config = ModelConfig::desk(); // l_m = 12
        let (params, _) = setup(&config);
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let tf = encode_text(&mut g, &bound, &[5, 6, 7, 8, 9], None, &config).unwrap();
        assert_eq!(g.shape(tf.values), &[12, config.text_dim]);
        assert_eq!(tf.pad_mask.iter().filter(|m| **m).count(), 6); // tokens + summary
        assert_eq!(tf.cls_index, 0);
        assert!(tf.pad_mask[tf.cls_index]);
    }

    #[test]
    fn encode_text_with_prompts_extends_length() {
        let config = ModelConfig::desk();
        let (params, _) = setup(&config);
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let prompts = g.constant(ArrayD::zeros(IxDyn(&[4, config.text_dim])));
        let tf = encode_text(&mut g, &bound, &[5, 6, 7, 8, 9], Some(prompts), &config).unwrap();
        assert_eq!(g.shape(tf.values), &[16, config.text_dim]);
        assert_eq!(tf.pad_mask.len(), 16);
        assert!(tf.pad_mask[12..].iter().all(|m| *m));
    }

    #[test]
    fn encode_text_rejects_empty_and_truncates() {
        let config = ModelConfig::desk();
        let (params, _) = setup(&config);
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        assert!(encode_text(&mut g, &bound, &[], None, &config).is_err());
        let long: Vec<usize> = (3..3 + 20).collect();
        let tf = encode_text(&mut g, &bound, &long, None, &config).unwrap();
        assert_eq!(g.shape(tf.values)[0], 12);
        let mut strict = config.clone();
        strict.truncate_expressions = false;
        let err = encode_text(&mut g, &bound, &long, None, &strict).unwrap_err();
        assert!(matches!(err, CrobimError::InvalidArgument(_)));
    }

    #[test]
    fn prompts_change_all_token_features() {
        // the self-attention block must let prompts reach token positions
        let config = ModelConfig::desk();
        let (params, _) = setup(&config);
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p1 = g.constant(ArrayD::from_shape_fn(IxDyn(&[4, config.text_dim]), |_| {
            rng.gen_range(-1.0..1.0)
        }));
        let p2 = g.constant(ArrayD::from_shape_fn(IxDyn(&[4, config.text_dim]), |_| {
            rng.gen_range(-1.0..1.0)
        }));
        let a = encode_text(&mut g, &bound, &[5, 6], Some(p1), &config).unwrap();
        let b = encode_text(&mut g, &bound, &[5, 6], Some(p2), &config).unwrap();
        let va = g.value(a.values).clone();
        let vb = g.value(b.values).clone();
        let first_rows_differ = (0..config.max_tokens)
            .any(|r| (0..config.text_dim).any(|c| (va[[r, c]] - vb[[r, c]]).abs() > 1e-12));
        assert!(first_rows_differ);
    }
}
