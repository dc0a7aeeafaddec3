//! Full forward graph: stub encoders → prompt modulation → language-guided
//! aggregation with deficit compensation → mutual-interaction decoding →
//! mask logits, plus the batch loss used for training.

use crate::capm;
use crate::config::ModelConfig;
use crate::encoders::{self, Triplet};
use crate::error::Result;
use crate::lgfa::{self, ScoreSet};
use crate::mid;
use crate::objective::{self, LossReport};
use crate::params::{BoundParams, Params};
use crate::tape::{Graph, Var};
use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The assembled model: configuration plus named parameters.
pub struct CroBim {
    pub config: ModelConfig,
    pub params: Params,
}

/// Everything one forward pass produces beyond the logits, kept for
/// attention dumps and inspection.
pub struct ForwardTrace {
    pub scores: ScoreSet,
    pub saliency: [Array2<f64>; 4],
    pub deficit: Array2<f64>,
    pub regions: Vec<(usize, usize)>,
}

pub struct ForwardOutput {
    /// Logits at (H/4, W/4).
    pub logits: Var,
    /// Bilinearly upsampled logits at (H, W).
    pub logits_up: Var,
    pub trace: ForwardTrace,
}

impl CroBim {
    /// Initialize all parameters from the config seed.
    pub fn new(config: ModelConfig) -> Result<CroBim> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Params::new();
        encoders::register_params(&mut params, &config, &mut rng);
        capm::register_params(&mut params, &config, &mut rng);
        lgfa::register_params(&mut params, &config, &mut rng);
        mid::register_params(&mut params, &config, &mut rng);
        Ok(CroBim { config, params })
    }

    /// Rebuild around restored parameters (shape template comes from a
    /// fresh initialization of the same config).
    pub fn with_params(config: ModelConfig, params: Params) -> Result<CroBim> {
        config.validate()?;
        Ok(CroBim { config, params })
    }

    /// One sample through the whole architecture.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        image: &Array3<f64>,
        tokens: &[usize],
    ) -> Result<ForwardOutput> {
        let config = &self.config;
        let pyramid = encoders::encode_image(g, bound, image, config)?;
        let token_features = if config.enable_capm {
            capm::encode_with_prompts(g, bound, tokens, &pyramid, config)?
        } else {
            // ablated: raw learnable prompts, no visual modulation
            let raw = bound.var("capm.prompts");
            encoders::encode_text(g, bound, tokens, Some(raw), config)?
        };
        let fusion_tokens = lgfa::fusion_tokens(g, &token_features, config);
        let (fused, scores) = lgfa::fuse_all(g, &pyramid, fusion_tokens, bound, config)?;
        let h4 = config.level_side(4);
        let saliency = lgfa::saliency_maps(&scores, h4, h4);
        let deficit = lgfa::deficit_from_saliency(&saliency);
        let regions = lgfa::topk_regions(&deficit, config.top_k())?;
        let compensated = lgfa::compensate_regions(g, &fused, &regions, bound, config)?;
        let mut state = mid::harmonize(g, &compensated, &token_features, bound, config)?;
        mid::interact(g, &mut state, bound, config)?;
        let (logits, logits_up) = mid::predict_mask(g, &state, bound, config)?;
        Ok(ForwardOutput {
            logits,
            logits_up,
            trace: ForwardTrace {
                scores,
                saliency,
                deficit,
                regions,
            },
        })
    }

    /// Mean combined loss over a batch, built in one graph so a single
    /// backward pass yields all gradients.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        batch: &[&Triplet],
    ) -> Result<(Var, Vec<LossReport>)> {
        assert!(!batch.is_empty(), "empty batch");
        let mut reports = Vec::with_capacity(batch.len());
        let mut acc: Option<Var> = None;
        for triplet in batch {
            triplet.validate(&self.config)?;
            let out = self.forward(g, bound, &triplet.image, &triplet.expression)?;
            let target = triplet.mask.mapv(|v| v as f64);
            let (loss, report) = objective::combined_loss(g, out.logits_up, &target, &self.config)?;
            reports.push(report);
            acc = Some(match acc {
                None => loss,
                Some(a) => g.add(a, loss),
            });
        }
        let total = g.scale(acc.expect("nonempty batch"), 1.0 / batch.len() as f64);
        Ok((total, reports))
    }

    /// Inference helper: fresh graph, realized logit arrays.
    pub fn predict(
        &self,
        image: &Array3<f64>,
        tokens: &[usize],
    ) -> Result<(
        Array2<f64>,
        Array2<f64>,
        ForwardTrace,
        Vec<(String, ndarray::ArrayD<f64>)>,
    )> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let out = self.forward(&mut g, &bound, image, tokens)?;
        let as2 = |v: Var, g: &Graph| {
            g.value(v)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("2d logits")
                .to_owned()
        };
        let logits = as2(out.logits, &g);
        let logits_up = as2(out.logits_up, &g);
        let attn = g.softmax_nodes();
        Ok((logits, logits_up, out.trace, attn))
    }
}
