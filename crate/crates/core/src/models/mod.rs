//! The six encoder/decoder wirings and their shared entry points.
//!
//! | variant            | encoder                         | language LSTM            |
//! |--------------------|---------------------------------|--------------------------|
//! | `s2vt_uni`         | shared LSTM reads frames        | same shared LSTM         |
//! | `s2vt_bi`          | FU+BU merged, fed to shared     | same shared LSTM         |
//! | `s2vt_reinforced`  | FU+BU merged ++ frames → shared | same shared LSTM         |
//! | `joint_uni`        | FU(1024-style) → MU             | separate SU              |
//! | `joint_bi`         | FU+BU merged → MU               | separate SU              |
//! | `joint_reinforced` | FU+BU merged ++ frames → MU     | separate SU              |
//!
//! Joint variants hand the final `(c, h)` of MU to SU as its initial state.

mod checkpoint;
mod s2vt;

use std::fmt;
use std::str::FromStr;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainingMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use s2vt::{BiFront, S2vtParams};

use crate::decoder::{decoder_backward, decoder_forward, greedy_decode, DecoderParams, Sentence};
use crate::encoder::{encode_video, encode_video_cached, encoder_backward, EncoderDims, EncoderMode, EncoderParams, VideoRepresentation};
use crate::error::{Error, Result};
use crate::lstm::{LstmOptions, LstmParams, LstmState};
use crate::numkit::{Matrix, ParamSet, Rng};
use crate::params::Parameters;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    S2vtUni,
    S2vtBi,
    S2vtReinforced,
    JointUni,
    JointBi,
    JointReinforced,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::S2vtUni,
        Variant::S2vtBi,
        Variant::S2vtReinforced,
        Variant::JointUni,
        Variant::JointBi,
        Variant::JointReinforced,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::S2vtUni => "s2vt_uni",
            Variant::S2vtBi => "s2vt_bi",
            Variant::S2vtReinforced => "s2vt_reinforced",
            Variant::JointUni => "joint_uni",
            Variant::JointBi => "joint_bi",
            Variant::JointReinforced => "joint_reinforced",
        }
    }

    pub fn is_joint(self) -> bool {
        matches!(self, Variant::JointUni | Variant::JointBi | Variant::JointReinforced)
    }

    pub fn encoder_mode(self) -> EncoderMode {
        match self {
            Variant::S2vtUni | Variant::JointUni => EncoderMode::Unidirectional,
            Variant::S2vtBi | Variant::JointBi => EncoderMode::Bidirectional,
            Variant::S2vtReinforced | Variant::JointReinforced => EncoderMode::Reinforced,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant `{s}` (valid: {})", valid.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub feature_dim: usize,
    pub hidden: usize,
    /// First-stage hidden size of the unidirectional joint encoder.
    pub uni_first_hidden: usize,
    pub embed_dim: usize,
    pub merge_dim: usize,
    pub vocab_size: usize,
    /// Frame + word budget per training pair.
    pub max_steps: usize,
    pub seed: u64,
    /// Half-width of the uniform weight initialization.
    pub init_scale: f64,
    pub lstm_bias: bool,
    pub tied_forget: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::JointReinforced,
            feature_dim: 4096,
            hidden: 512,
            uni_first_hidden: 1024,
            embed_dim: 512,
            merge_dim: 512,
            vocab_size: 4,
            max_steps: 80,
            seed: 0,
            init_scale: 0.08,
            lstm_bias: false,
            tied_forget: false,
        }
    }
}

/// Key order used when serializing a config.
pub const MODEL_CONFIG_KEYS: [&str; 12] = [
    "variant",
    "feature_dim",
    "hidden",
    "uni_first_hidden",
    "embed_dim",
    "merge_dim",
    "vocab_size",
    "max_steps",
    "seed",
    "init_scale",
    "lstm_bias",
    "tied_forget",
];

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("feature_dim", self.feature_dim),
            ("hidden", self.hidden),
            ("uni_first_hidden", self.uni_first_hidden),
            ("embed_dim", self.embed_dim),
            ("merge_dim", self.merge_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config(format!(
                "vocab_size must be at least 4 (reserved tokens), got {}",
                self.vocab_size
            )));
        }
        if self.max_steps < 2 {
            return Err(Error::Config(format!("max_steps must be at least 2, got {}", self.max_steps)));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config(format!("init_scale must be finite and >= 0, got {}", self.init_scale)));
        }
        Ok(())
    }

    pub fn lstm_options(&self) -> LstmOptions {
        LstmOptions {
            bias: self.lstm_bias,
            tied_forget: self.tied_forget,
        }
    }

    fn encoder_dims(&self) -> EncoderDims {
        EncoderDims {
            feature_dim: self.feature_dim,
            hidden: self.hidden,
            uni_first_hidden: self.uni_first_hidden,
            merge_dim: self.merge_dim,
        }
    }

    fn s2vt_dims(&self) -> s2vt::S2vtDims {
        s2vt::S2vtDims {
            feature_dim: self.feature_dim,
            hidden: self.hidden,
            merge_dim: self.merge_dim,
            embed_dim: self.embed_dim,
            vocab_size: self.vocab_size,
        }
    }

    /// Closed-form parameter count for the configured variant.
    ///
    /// With `L(i, h) = 4hi + 4h² (3h² if tied) + 4h (with bias)`, `D` features,
    /// `H` hidden, `U` uni first hidden, `M` merge, `E` embed, `V` vocab:
    ///
    /// ```text
    /// joint_uni        L(D,U) + L(U,H)                 + L(E,H) + EV + VH + V
    /// joint_bi         2L(D,H) + 2HM + L(M,H)          + L(E,H) + EV + VH + V
    /// joint_reinforced 2L(D,H) + 2HM + L(M+D,H)        + L(E,H) + EV + VH + V
    /// s2vt_uni         L(D+E,H)                        + EV + VH + V
    /// s2vt_bi          2L(D,H) + 2HM + L(M+E,H)        + EV + VH + V
    /// s2vt_reinforced  2L(D,H) + 2HM + L(M+D+E,H)      + EV + VH + V
    /// ```
    pub fn expected_param_count(&self) -> usize {
        let lstm = |i: usize, h: usize| {
            4 * h * i
                + if self.tied_forget { 3 } else { 4 } * h * h
                + if self.lstm_bias { 4 * h } else { 0 }
        };
        let (d, h, u, m, e, v) = (
            self.feature_dim,
            self.hidden,
            self.uni_first_hidden,
            self.merge_dim,
            self.embed_dim,
            self.vocab_size,
        );
        let head = e * v + v * h + v;
        let front = 2 * lstm(d, h) + 2 * h * m;
        match self.variant {
            Variant::JointUni => lstm(d, u) + lstm(u, h) + lstm(e, h) + head,
            Variant::JointBi => front + lstm(m, h) + lstm(e, h) + head,
            Variant::JointReinforced => front + lstm(m + d, h) + lstm(e, h) + head,
            Variant::S2vtUni => lstm(d + e, h) + head,
            Variant::S2vtBi => front + lstm(m + e, h) + head,
            Variant::S2vtReinforced => front + lstm(m + d + e, h) + head,
        }
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let values = [
            self.variant.name().to_string(),
            self.feature_dim.to_string(),
            self.hidden.to_string(),
            self.uni_first_hidden.to_string(),
            self.embed_dim.to_string(),
            self.merge_dim.to_string(),
            self.vocab_size.to_string(),
            self.max_steps.to_string(),
            self.seed.to_string(),
            self.init_scale.to_string(),
            self.lstm_bias.to_string(),
            self.tied_forget.to_string(),
        ];
        MODEL_CONFIG_KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    /// Sets one field from its textual form. Returns `Ok(false)` for keys
    /// that are not model-config keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
        }
        match key {
            "variant" => self.variant = value.trim().parse()?,
            "feature_dim" => self.feature_dim = num(key, value)?,
            "hidden" => self.hidden = num(key, value)?,
            "uni_first_hidden" => self.uni_first_hidden = num(key, value)?,
            "embed_dim" => self.embed_dim = num(key, value)?,
            "merge_dim" => self.merge_dim = num(key, value)?,
            "vocab_size" => self.vocab_size = num(key, value)?,
            "max_steps" => self.max_steps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "init_scale" => self.init_scale = num(key, value)?,
            "lstm_bias" => self.lstm_bias = num(key, value)?,
            "tied_forget" => self.tied_forget = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Inverse of [`ModelConfig::to_pairs`]; every key must be present.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for key in MODEL_CONFIG_KEYS {
            let value = pairs
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v)
                .ok_or_else(|| Error::Schema(format!("config is missing `{key}`")))?;
            cfg.set(key, value)?;
        }
        if let Some((k, _)) = pairs.iter().find(|(k, _)| !MODEL_CONFIG_KEYS.contains(&k.as_str())) {
            return Err(Error::Schema(format!("unknown config key `{k}`")));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelParams {
    Joint {
        encoder: EncoderParams,
        decoder: DecoderParams,
    },
    S2vt(S2vtParams),
}

impl Parameters for ModelParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        match self {
            ModelParams::Joint { encoder, decoder } => {
                encoder.visit(prefix, f);
                decoder.visit(prefix, f);
            }
            ModelParams::S2vt(p) => p.visit(prefix, f),
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Matrix)) {
        match self {
            ModelParams::Joint { encoder, decoder } => {
                encoder.visit_mut(prefix, f);
                decoder.visit_mut(prefix, f);
            }
            ModelParams::S2vt(p) => p.visit_mut(prefix, f),
        }
    }
}

impl ModelParams {
    fn zeros(cfg: &ModelConfig) -> Self {
        let opts = cfg.lstm_options();
        let mode = cfg.variant.encoder_mode();
        if cfg.variant.is_joint() {
            ModelParams::Joint {
                encoder: EncoderParams::zeros(mode, cfg.encoder_dims(), opts),
                decoder: DecoderParams::zeros(cfg.vocab_size, cfg.embed_dim, cfg.hidden, opts),
            }
        } else {
            ModelParams::S2vt(S2vtParams::zeros(mode, &cfg.s2vt_dims(), opts))
        }
    }

    fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let opts = cfg.lstm_options();
        let mode = cfg.variant.encoder_mode();
        let scale = cfg.init_scale;
        if cfg.variant.is_joint() {
            let encoder = EncoderParams::init(mode, cfg.encoder_dims(), opts, scale, rng);
            let decoder = DecoderParams::init(cfg.vocab_size, cfg.embed_dim, cfg.hidden, opts, scale, rng);
            ModelParams::Joint { encoder, decoder }
        } else {
            ModelParams::S2vt(S2vtParams::init(mode, &cfg.s2vt_dims(), opts, scale, rng))
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, m| m.data_mut().fill(0.0));
        z
    }
}

/// Encode or decode phase of a step in a loss breakdown.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Encode,
    Decode,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub stage: Stage,
    pub loss: f64,
}

/// Negative log-likelihood with its per-step breakdown.
#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub nll: f64,
    pub steps: Vec<StepLoss>,
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub nll: f64,
    pub steps: Vec<StepLoss>,
    /// Gradient of `nll` for every parameter, same layout as the model.
    pub grads: ModelParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ModelParams,
}

/// Allocates and initializes the parameters the variant needs.
pub fn build_model(cfg: &ModelConfig, rng: &mut Rng) -> Result<Model> {
    cfg.validate()?;
    Ok(Model {
        config: cfg.clone(),
        params: ModelParams::init(cfg, rng),
    })
}

impl Model {
    /// Initialized from `cfg.seed`.
    pub fn new(cfg: &ModelConfig) -> Result<Model> {
        build_model(cfg, &mut Rng::new(cfg.seed))
    }

    pub fn zeros(cfg: &ModelConfig) -> Result<Model> {
        cfg.validate()?;
        Ok(Model {
            config: cfg.clone(),
            params: ModelParams::zeros(cfg),
        })
    }

    pub fn from_param_set(cfg: &ModelConfig, set: &ParamSet) -> Result<Model> {
        let mut model = Model::zeros(cfg)?;
        model.params.load_param_set(set)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn param_set(&self) -> ParamSet {
        self.params.to_param_set()
    }

    pub fn load_param_set(&mut self, set: &ParamSet) -> Result<()> {
        self.params.load_param_set(set)
    }

    /// Parameters of the word-side path (language LSTM, embedding, output).
    pub fn language_param_names(&self) -> Vec<String> {
        let prefix = if self.config.variant.is_joint() { "su." } else { "shared." };
        self.params
            .param_names()
            .into_iter()
            .filter(|n| n.starts_with(prefix) || matches!(n.as_str(), "w_emb" | "w_out" | "b_out"))
            .collect()
    }

    /// The LSTM that runs during `stage`. S2VT variants return the same
    /// shared parameters for both stages.
    pub fn stage_lstm(&self, stage: Stage) -> &LstmParams {
        match (&self.params, stage) {
            (ModelParams::Joint { encoder, .. }, Stage::Encode) => &encoder.second,
            (ModelParams::Joint { decoder, .. }, Stage::Decode) => &decoder.lm,
            (ModelParams::S2vt(p), _) => &p.shared,
        }
    }

    /// Video representation (joint variants only).
    pub fn encode(&self, feats: &Matrix) -> Result<VideoRepresentation> {
        match &self.params {
            ModelParams::Joint { encoder, .. } => encode_video(encoder, feats),
            ModelParams::S2vt(_) => Err(Error::Argument(format!(
                "{} has no standalone video representation",
                self.config.variant
            ))),
        }
    }

    fn check_budget(&self, feats: &Matrix, sentence: &Sentence) -> Result<()> {
        let used = feats.rows() + sentence.content_len();
        if used > self.config.max_steps {
            return Err(Error::Protocol(format!(
                "{} frames + {} words exceed the {}-step budget",
                feats.rows(),
                sentence.content_len(),
                self.config.max_steps
            )));
        }
        if feats.rows() == 0 {
            return Err(Error::Argument("video has no frames".into()));
        }
        Ok(())
    }

    /// Forward pass only.
    pub fn nll(&self, feats: &Matrix, sentence: &Sentence) -> Result<LossBreakdown> {
        self.check_budget(feats, sentence)?;
        match &self.params {
            ModelParams::Joint { encoder, decoder } => {
                let rep = encode_video(encoder, feats)?;
                let (lp, cache) = decoder_forward(decoder, &rep, sentence)?;
                Ok(LossBreakdown {
                    nll: -lp,
                    steps: joint_steps(feats.rows(), &cache.step_log_probs),
                })
            }
            ModelParams::S2vt(p) => {
                let (steps, _) = s2vt::forward(p, feats, sentence.tokens())?;
                Ok(LossBreakdown {
                    nll: steps.iter().map(|s| s.loss).sum(),
                    steps,
                })
            }
        }
    }

    /// Teacher-forced output logits for every decode step, in sentence order.
    pub fn decode_logits(&self, feats: &Matrix, sentence: &Sentence) -> Result<Vec<Vec<f64>>> {
        self.check_budget(feats, sentence)?;
        match &self.params {
            ModelParams::Joint { encoder, decoder } => {
                let rep = encode_video(encoder, feats)?;
                let (_, cache) = decoder_forward(decoder, &rep, sentence)?;
                Ok(cache.logits().to_vec())
            }
            ModelParams::S2vt(p) => {
                let (_, run) = s2vt::forward(p, feats, sentence.tokens())?;
                Ok(run.logits().to_vec())
            }
        }
    }

    /// Negative log-likelihood and its gradient for one video/sentence pair.
    pub fn loss(&self, feats: &Matrix, sentence: &Sentence) -> Result<LossOutput> {
        self.check_budget(feats, sentence)?;
        match &self.params {
            ModelParams::Joint { encoder, decoder } => {
                let (rep, enc_cache) = encode_video_cached(encoder, feats)?;
                let (lp, dec_cache) = decoder_forward(decoder, &rep, sentence)?;
                let dec = decoder_backward(decoder, &rep, sentence, &dec_cache)?;
                let enc = encoder_backward(encoder, &enc_cache, &dec.rep)?;
                Ok(LossOutput {
                    nll: -lp,
                    steps: joint_steps(feats.rows(), &dec_cache.step_log_probs),
                    grads: ModelParams::Joint {
                        encoder: enc.params,
                        decoder: dec.params,
                    },
                })
            }
            ModelParams::S2vt(p) => {
                let (steps, run) = s2vt::forward(p, feats, sentence.tokens())?;
                let grads = s2vt::backward(p, &run)?;
                Ok(LossOutput {
                    nll: steps.iter().map(|s| s.loss).sum(),
                    steps,
                    grads: ModelParams::S2vt(grads),
                })
            }
        }
    }

    /// Sentence loss with no video: the language path starts from a zero
    /// state and every non-word input slot is zero. Gradients outside the
    /// language path are zero.
    pub fn text_loss(&self, sentence: &Sentence) -> Result<LossOutput> {
        match &self.params {
            ModelParams::Joint { encoder, decoder } => {
                let rep = LstmState::zeros(decoder.hidden());
                let (lp, cache) = decoder_forward(decoder, &rep, sentence)?;
                let dec = decoder_backward(decoder, &rep, sentence, &cache)?;
                Ok(LossOutput {
                    nll: -lp,
                    steps: joint_steps(0, &cache.step_log_probs),
                    grads: ModelParams::Joint {
                        encoder: encoder.zeros_like(),
                        decoder: dec.params,
                    },
                })
            }
            ModelParams::S2vt(p) => {
                let empty = Matrix::zeros(0, p.feature_dim());
                let (steps, run) = s2vt::forward(p, &empty, sentence.tokens())?;
                let grads = s2vt::backward(p, &run)?;
                Ok(LossOutput {
                    nll: steps.iter().map(|s| s.loss).sum(),
                    steps,
                    grads: ModelParams::S2vt(grads),
                })
            }
        }
    }

    /// Greedy caption, at most `max_len` content words.
    pub fn caption(&self, feats: &Matrix, max_len: usize) -> Result<Sentence> {
        if max_len == 0 {
            return Err(Error::Argument("max_len must be at least 1".into()));
        }
        if feats.cols() != self.config.feature_dim {
            return Err(Error::shape(
                "caption features",
                (feats.rows(), self.config.feature_dim),
                feats.shape(),
            ));
        }
        match &self.params {
            ModelParams::Joint { encoder, decoder } => {
                let rep = encode_video(encoder, feats)?;
                greedy_decode(decoder, &rep, max_len)
            }
            ModelParams::S2vt(p) => s2vt::caption(p, feats, max_len),
        }
    }
}

fn joint_steps(frames: usize, step_log_probs: &[f64]) -> Vec<StepLoss> {
    let encode = (0..frames).map(|_| StepLoss {
        stage: Stage::Encode,
        loss: 0.0,
    });
    let decode = step_log_probs.iter().map(|lp| StepLoss {
        stage: Stage::Decode,
        loss: -lp,
    });
    encode.chain(decode).collect()
}

/// Free-function form of [`Model::loss`].
pub fn model_loss(model: &Model, feats: &Matrix, sentence: &Sentence) -> Result<LossOutput> {
    model.loss(feats, sentence)
}

/// Free-function form of [`Model::caption`].
pub fn caption(model: &Model, feats: &Matrix, max_len: usize) -> Result<Sentence> {
    model.caption(feats, max_len)
}
