//! Model and run configuration, presets, and the flat key-value config file.

use crate::error::{CrobimError, Result};
use serde::{Deserialize, Serialize};

/// How the pooled multi-scale context rows are assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextConcatMode {
    /// Each pooled level is projected to `C_total` and the four levels are
    /// stacked along the row axis: `4·s²` rows.
    RowStack,
    /// Pooled levels are concatenated along channels: `s²` rows of width
    /// `C_total`, no per-scale projections.
    ChannelConcat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input image side (H = W); must be divisible by 32.
    pub image_size: usize,
    /// Per-scale channel widths C_1..C_4.
    pub channels: [usize; 4],
    /// Linguistic feature width D_l.
    pub text_dim: usize,
    /// Maximum token length l_m (includes the summary token slot).
    pub max_tokens: usize,
    /// Number of learnable prompt vectors N_p.
    pub num_prompts: usize,
    /// Decoder hidden width D.
    pub hidden_dim: usize,
    /// Adaptive-pool output side s for context pooling.
    pub pool_size: usize,
    /// Cross-entropy weight λ in the combined objective.
    pub lambda_ce: f64,
    /// Fraction of the (H_4·W_4) grid compensated; K = ceil(fraction · cells).
    pub topk_fraction: f64,
    /// Deformable attention heads.
    pub msda_heads: usize,
    /// Deformable sampling points per head per level.
    pub msda_points: usize,
    /// Channel width C_v̂ the compensation block projects every scale to.
    pub comp_dim: usize,
    /// Heads of the compensation self-attention block.
    pub comp_heads: usize,
    /// Feed-forward expansion factor in the decoder.
    pub ffn_mult: usize,
    /// Synthetic vocabulary size (ids, including PAD/CLS/UNK).
    pub vocab_size: usize,
    /// Parameter initialization seed.
    pub seed: u64,
    /// Decoder interaction rounds; 0 bypasses both interactions.
    pub decoder_rounds: usize,
    /// Scale prompt-modulation attention scores by 1/sqrt(D_l). Disable for
    /// the literal unscaled form.
    pub scale_capm_scores: bool,
    /// Context row assembly mode.
    pub context_mode: ContextConcatMode,
    /// Truncate over-length expressions instead of erroring.
    pub truncate_expressions: bool,
    /// Zero out padding-token rows before stage fusion.
    pub mask_pad_tokens: bool,
    /// Feed only the first l_m token rows (no prompt rows) into stage fusion.
    pub literal_token_axis: bool,
    /// Ablations: context-aware prompt modulation on/off (off = raw prompts).
    pub enable_capm: bool,
    /// Ablations: attention-deficit compensation on/off (off = K forced to 0).
    pub enable_compensation: bool,
    /// Ablations: bidirectional decoder; false skips the language-side update.
    pub bidirectional_decoder: bool,
}

impl ModelConfig {
    /// Small configuration for CPU-scale runs and tests.
    pub fn desk() -> Self {
        ModelConfig {
            image_size: 64,
            channels: [16, 32, 64, 128],
            text_dim: 32,
            max_tokens: 12,
            num_prompts: 4,
            hidden_dim: 64,
            pool_size: 1,
            lambda_ce: 0.9,
            topk_fraction: 0.1,
            msda_heads: 2,
            msda_points: 2,
            comp_dim: 32,
            comp_heads: 2,
            ffn_mult: 4,
            vocab_size: 64,
            seed: 0,
            decoder_rounds: 1,
            scale_capm_scores: true,
            context_mode: ContextConcatMode::RowStack,
            truncate_expressions: true,
            mask_pad_tokens: false,
            literal_token_axis: false,
            enable_capm: true,
            enable_compensation: true,
            bidirectional_decoder: true,
        }
    }

    /// Published-scale hyperparameters (Swin-B widths, BERT-base text dim).
    /// Far too large to train here; kept as the reference preset.
    pub fn paper_scale() -> Self {
        ModelConfig {
            image_size: 480,
            channels: [128, 256, 512, 1024],
            text_dim: 768,
            max_tokens: 20,
            num_prompts: 4,
            hidden_dim: 256,
            pool_size: 1,
            lambda_ce: 0.9,
            topk_fraction: 0.1,
            msda_heads: 8,
            msda_points: 4,
            comp_dim: 256,
            comp_heads: 8,
            ffn_mult: 4,
            vocab_size: 64,
            seed: 0,
            decoder_rounds: 1,
            scale_capm_scores: true,
            context_mode: ContextConcatMode::RowStack,
            truncate_expressions: true,
            mask_pad_tokens: false,
            literal_token_axis: false,
            enable_capm: true,
            enable_compensation: true,
            bidirectional_decoder: true,
        }
    }

    /// Tiny dimensions for gradient-check and oracle tests.
    pub fn toy() -> Self {
        ModelConfig {
            image_size: 32,
            channels: [4, 6, 8, 12],
            text_dim: 8,
            max_tokens: 6,
            num_prompts: 2,
            hidden_dim: 16,
            pool_size: 1,
            comp_dim: 8,
            comp_heads: 2,
            msda_heads: 2,
            msda_points: 2,
            ..ModelConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(CrobimError::Config(format!(
                "image_size must be a positive multiple of 32, got {}",
                self.image_size
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda_ce) {
            return Err(CrobimError::Config(format!(
                "lambda_ce must lie in [0, 1], got {}",
                self.lambda_ce
            )));
        }
        if !(self.topk_fraction > 0.0 && self.topk_fraction <= 1.0) {
            return Err(CrobimError::Config(format!(
                "topk_fraction must lie in (0, 1], got {}",
                self.topk_fraction
            )));
        }
        if self.pool_size < 1 {
            return Err(CrobimError::Config("pool_size must be >= 1".into()));
        }
        if self.num_prompts < 1 {
            return Err(CrobimError::Config("num_prompts must be >= 1".into()));
        }
        if self.max_tokens < 2 {
            return Err(CrobimError::Config("max_tokens must be >= 2".into()));
        }
        if self.hidden_dim % self.msda_heads != 0 {
            return Err(CrobimError::Config(format!(
                "msda_heads {} must divide hidden_dim {}",
                self.msda_heads, self.hidden_dim
            )));
        }
        if self.comp_dim % self.comp_heads != 0 {
            return Err(CrobimError::Config(format!(
                "comp_heads {} must divide comp_dim {}",
                self.comp_heads, self.comp_dim
            )));
        }
        if self.vocab_size < crate::dataio::vocab::MIN_VOCAB_SIZE {
            return Err(CrobimError::Config(format!(
                "vocab_size must be at least {}",
                crate::dataio::vocab::MIN_VOCAB_SIZE
            )));
        }
        Ok(())
    }

    /// Side of pyramid level `i` (1-based): H / 2^{i+1}.
    pub fn level_side(&self, i: usize) -> usize {
        self.image_size >> (i + 1)
    }

    /// Total channel width of the pooled context.
    pub fn channels_total(&self) -> usize {
        self.channels.iter().sum()
    }

    /// Token rows entering fusion and decoding: l_m + N_p prompt rows.
    pub fn joint_tokens(&self) -> usize {
        self.max_tokens + self.num_prompts
    }

    /// Number of compensated cells on the (H_4, W_4) grid.
    pub fn top_k(&self) -> usize {
        if !self.enable_compensation {
            return 0;
        }
        let cells = self.level_side(4) * self.level_side(4);
        ((self.topk_fraction * cells as f64).ceil() as usize).min(cells)
    }

    /// Visual token count N = Σ H_i·W_i.
    pub fn num_visual_tokens(&self) -> usize {
        (1..=4)
            .map(|i| self.level_side(i) * self.level_side(i))
            .sum()
    }
}

/// Learning-rate schedule: polynomial decay `lr · (1 - step/steps)^power`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr_power: f64,
    /// Data source: `synth` or a manifest path.
    pub data: String,
    /// Synthetic dataset sizes when `data = "synth"`.
    pub synth_train: usize,
    pub synth_val: usize,
    pub out_dir: std::path::PathBuf,
    pub checkpoint_every: usize,
    pub dump_attention: bool,
}

impl RunConfig {
    pub fn desk() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            learning_rate: 1e-3,
            weight_decay: 0.01,
            steps: 500,
            batch_size: 4,
            lr_power: 0.9,
            data: "synth".into(),
            synth_train: 8,
            synth_val: 4,
            out_dir: "out".into(),
            checkpoint_every: 100,
            dump_attention: false,
        }
    }

    /// Published optimizer settings (for reference; not desk-trainable).
    pub fn paper_scale() -> Self {
        RunConfig {
            model: ModelConfig::paper_scale(),
            learning_rate: 5e-5,
            weight_decay: 0.01,
            lr_power: 0.9,
            batch_size: 32,
            ..RunConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.steps == 0 || self.batch_size == 0 {
            return Err(CrobimError::Config(
                "steps and batch_size must be positive".into(),
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(CrobimError::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let frac = 1.0 - step as f64 / self.steps as f64;
        self.learning_rate * frac.max(0.0).powf(self.lr_power)
    }
}

fn get_bool(v: &toml::Value, key: &str) -> Result<bool> {
    v.as_bool()
        .ok_or_else(|| CrobimError::Config(format!("key {key} must be a boolean")))
}

fn get_f64(v: &toml::Value, key: &str) -> Result<f64> {
    match v {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        _ => Err(CrobimError::Config(format!("key {key} must be a number"))),
    }
}

fn get_usize(v: &toml::Value, key: &str) -> Result<usize> {
    v.as_integer()
        .filter(|i| *i >= 0)
        .map(|i| i as usize)
        .ok_or_else(|| CrobimError::Config(format!("key {key} must be a non-negative integer")))
}

fn get_str(v: &toml::Value, key: &str) -> Result<String> {
    v.as_str()
        .map(|s| s.to_string())
        .ok_or_else(|| CrobimError::Config(format!("key {key} must be a string")))
}

impl RunConfig {
    /// Parse the flat `section.key = value` config format. Unknown keys are
    /// rejected so typos do not silently fall back to defaults.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let table: toml::Value = text
            .parse()
            .map_err(|e| CrobimError::Config(format!("config parse error: {e}")))?;
        let mut cfg = RunConfig::desk();
        let Some(table) = table.as_table() else {
            return Err(CrobimError::Config("config root must be a table".into()));
        };
        for (section, content) in table {
            let Some(entries) = content.as_table() else {
                return Err(CrobimError::Config(format!(
                    "top-level key {section} must use a section prefix, e.g. model.{section} or run.{section}"
                )));
            };
            for (key, value) in entries {
                cfg.apply_kv(section, key, value)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one `--set section.key=value` override. The raw value is parsed
    /// as a TOML literal, falling back to a plain string.
    pub fn set_override(&mut self, dotted: &str, raw: &str) -> Result<()> {
        let (section, key) = dotted.split_once('.').ok_or_else(|| {
            CrobimError::Config(format!(
                "override key {dotted:?} must look like section.key"
            ))
        })?;
        let value = format!("v = {raw}")
            .parse::<toml::Value>()
            .ok()
            .and_then(|t| t.get("v").cloned())
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        self.apply_kv(section, key, &value)
    }

    fn apply_kv(&mut self, section: &str, key: &str, value: &toml::Value) -> Result<()> {
        let cfg = self;
        let full = &format!("{section}.{key}");
        match (section, key) {
            ("model", "image_size") => cfg.model.image_size = get_usize(value, full)?,
            ("model", "channels") => {
                let arr = value.as_array().ok_or_else(|| {
                    CrobimError::Config("model.channels must be an array of 4".into())
                })?;
                if arr.len() != 4 {
                    return Err(CrobimError::Config(
                        "model.channels must have exactly 4 entries".into(),
                    ));
                }
                for (i, v) in arr.iter().enumerate() {
                    cfg.model.channels[i] = get_usize(v, full)?;
                }
            }
            ("model", "text_dim") => cfg.model.text_dim = get_usize(value, full)?,
            ("model", "max_tokens") => cfg.model.max_tokens = get_usize(value, full)?,
            ("model", "num_prompts") => cfg.model.num_prompts = get_usize(value, full)?,
            ("model", "hidden_dim") => cfg.model.hidden_dim = get_usize(value, full)?,
            ("model", "pool_size") => cfg.model.pool_size = get_usize(value, full)?,
            ("model", "lambda_ce") => cfg.model.lambda_ce = get_f64(value, full)?,
            ("model", "topk_fraction") => cfg.model.topk_fraction = get_f64(value, full)?,
            ("model", "msda_heads") => cfg.model.msda_heads = get_usize(value, full)?,
            ("model", "msda_points") => cfg.model.msda_points = get_usize(value, full)?,
            ("model", "comp_dim") => cfg.model.comp_dim = get_usize(value, full)?,
            ("model", "comp_heads") => cfg.model.comp_heads = get_usize(value, full)?,
            ("model", "ffn_mult") => cfg.model.ffn_mult = get_usize(value, full)?,
            ("model", "vocab_size") => cfg.model.vocab_size = get_usize(value, full)?,
            ("model", "seed") => cfg.model.seed = get_usize(value, full)? as u64,
            ("model", "decoder_rounds") => cfg.model.decoder_rounds = get_usize(value, full)?,
            ("model", "scale_capm_scores") => cfg.model.scale_capm_scores = get_bool(value, full)?,
            ("model", "context_mode") => {
                cfg.model.context_mode = match get_str(value, full)?.as_str() {
                    "row_stack" => ContextConcatMode::RowStack,
                    "channel_concat" => ContextConcatMode::ChannelConcat,
                    other => {
                        return Err(CrobimError::Config(format!(
                            "model.context_mode must be row_stack or channel_concat, got {other}"
                        )))
                    }
                }
            }
            ("model", "truncate_expressions") => {
                cfg.model.truncate_expressions = get_bool(value, full)?
            }
            ("model", "mask_pad_tokens") => cfg.model.mask_pad_tokens = get_bool(value, full)?,
            ("model", "literal_token_axis") => {
                cfg.model.literal_token_axis = get_bool(value, full)?
            }
            ("model", "enable_capm") => cfg.model.enable_capm = get_bool(value, full)?,
            ("model", "enable_compensation") => {
                cfg.model.enable_compensation = get_bool(value, full)?
            }
            ("model", "bidirectional_decoder") => {
                cfg.model.bidirectional_decoder = get_bool(value, full)?
            }
            ("run", "learning_rate") => cfg.learning_rate = get_f64(value, full)?,
            ("run", "weight_decay") => cfg.weight_decay = get_f64(value, full)?,
            ("run", "steps") => cfg.steps = get_usize(value, full)?,
            ("run", "batch_size") => cfg.batch_size = get_usize(value, full)?,
            ("run", "lr_power") => cfg.lr_power = get_f64(value, full)?,
            ("run", "data") => cfg.data = get_str(value, full)?,
            ("run", "synth_train") => cfg.synth_train = get_usize(value, full)?,
            ("run", "synth_val") => cfg.synth_val = get_usize(value, full)?,
            ("run", "out_dir") => cfg.out_dir = get_str(value, full)?.into(),
            ("run", "checkpoint_every") => cfg.checkpoint_every = get_usize(value, full)?,
            ("run", "dump_attention") => cfg.dump_attention = get_bool(value, full)?,
            _ => {
                return Err(CrobimError::Config(format!("unknown config key: {full}")));
            }
        }
        Ok(())
    }

    pub fn from_kv_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_kv_str(&text)
    }

    /// Flat key-value echo, parseable by [`RunConfig::from_kv_str`].
    pub fn to_kv_string(&self) -> String {
        let m = &self.model;
        let mode = match m.context_mode {
            ContextConcatMode::RowStack => "row_stack",
            ContextConcatMode::ChannelConcat => "channel_concat",
        };
        format!(
            "model.image_size = {}\n\
             model.channels = [{}, {}, {}, {}]\n\
             model.text_dim = {}\n\
             model.max_tokens = {}\n\
             model.num_prompts = {}\n\
             model.hidden_dim = {}\n\
             model.pool_size = {}\n\
             model.lambda_ce = {:?}\n\
             model.topk_fraction = {:?}\n\
             model.msda_heads = {}\n\
             model.msda_points = {}\n\
             model.comp_dim = {}\n\
             model.comp_heads = {}\n\
             model.ffn_mult = {}\n\
             model.vocab_size = {}\n\
             model.seed = {}\n\
             model.decoder_rounds = {}\n\
             model.scale_capm_scores = {}\n\
             model.context_mode = \"{}\"\n\
             model.truncate_expressions = {}\n\
             model.mask_pad_tokens = {}\n\
             model.literal_token_axis = {}\n\
             model.enable_capm = {}\n\
             model.enable_compensation = {}\n\
             model.bidirectional_decoder = {}\n\
             run.learning_rate = {:?}\n\
             run.weight_decay = {:?}\n\
             run.steps = {}\n\
             run.batch_size = {}\n\
             run.lr_power = {:?}\n\
             run.data = \"{}\"\n\
             run.synth_train = {}\n\
             run.synth_val = {}\n\
             run.out_dir = \"{}\"\n\
             run.checkpoint_every = {}\n\
             run.dump_attention = {}\n",
            m.image_size,
            m.channels[0],
            m.channels[1],
            m.channels[2],
            m.channels[3],
            m.text_dim,
            m.max_tokens,
            m.num_prompts,
            m.hidden_dim,
            m.pool_size,
            m.lambda_ce,
            m.topk_fraction,
            m.msda_heads,
            m.msda_points,
            m.comp_dim,
            m.comp_heads,
            m.ffn_mult,
            m.vocab_size,
            m.seed,
            m.decoder_rounds,
            m.scale_capm_scores,
            mode,
            m.truncate_expressions,
            m.mask_pad_tokens,
            m.literal_token_axis,
            m.enable_capm,
            m.enable_compensation,
            m.bidirectional_decoder,
            self.learning_rate,
            self.weight_decay,
            self.steps,
            self.batch_size,
            self.lr_power,
            self.data,
            self.synth_train,
            self.synth_val,
            self.out_dir.display(),
            self.checkpoint_every,
            self.dump_attention,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_preset_is_valid_and_divisible() {
        let cfg = ModelConfig::desk();
        cfg.validate().unwrap();
        assert_eq!(cfg.level_side(1), 16);
        assert_eq!(cfg.level_side(4), 2);
        assert_eq!(cfg.num_visual_tokens(), 340);
        assert_eq!(cfg.top_k(), 1);
    }

    #[test]
    fn paper_preset_records_published_values() {
        let cfg = RunConfig::paper_scale();
        assert_eq!(cfg.model.lambda_ce, 0.9);
        assert_eq!(cfg.model.pool_size, 1);
        assert_eq!(cfg.model.num_prompts, 4);
        assert_eq!(cfg.model.max_tokens, 20);
        assert_eq!(cfg.model.hidden_dim, 256);
        assert_eq!(cfg.model.text_dim, 768);
        assert_eq!(cfg.learning_rate, 5e-5);
        assert_eq!(cfg.weight_decay, 0.01);
    }

    #[test]
    fn rejects_bad_sizes() {
        let mut cfg = ModelConfig::desk();
        cfg.image_size = 48;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk();
        cfg.lambda_ce = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn kv_roundtrip_and_unknown_key() {
        let cfg = RunConfig::desk();
        let text = cfg.to_kv_string();
        let parsed = RunConfig::from_kv_str(&text).unwrap();
        assert_eq!(parsed, cfg);
        assert!(RunConfig::from_kv_str("model.bogus = 3\n").is_err());
        let overridden = RunConfig::from_kv_str("model.image_size = 128\nrun.steps = 7\n").unwrap();
        assert_eq!(overridden.model.image_size, 128);
        assert_eq!(overridden.steps, 7);
    }

    #[test]
    fn polynomial_decay() {
        let cfg = RunConfig::desk();
        assert_eq!(cfg.lr_at(0), cfg.learning_rate);
        let half = cfg.lr_at(cfg.steps / 2);
        assert!((half - cfg.learning_rate * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert_eq!(cfg.lr_at(cfg.steps), 0.0);
    }
}
