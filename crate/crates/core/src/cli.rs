//! Command-line front end: `synth`, `train`, `caption`, `eval`, `gradcheck`.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage or configuration error,
//! 3 data or I/O error, 4 numeric divergence.
//!
//! Configuration files are flat `key = value` text; `#` starts a comment.
//! Values are resolved as built-in defaults, then the file, then `--set`
//! overrides, then dedicated flags such as `--variant`. Unknown keys are
//! rejected. The resolved configuration is printed before any work starts.

use std::collections::{BTreeSet, HashMap};
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{
    build_vocab, detokenize, gen_synthetic, load_corpus, load_features, save_corpus, tokenize_caption, truncate_pair,
    Corpus, Split, Vocabulary, MAX_EACH,
};
use crate::decoder::{Sentence, DEFAULT_MAX_LEN};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalSample, EvalSet};
use crate::models::{Checkpoint, Model, ModelConfig, TrainingMeta, Variant, MODEL_CONFIG_KEYS};
use crate::numkit::{grad_check, GradCheckReport, Matrix, Rng};
use crate::params::Parameters;
use crate::training::{pretrain_lm, train_with, TrainConfig, TRAIN_CONFIG_KEYS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_EPS: f64 = 1e-5;

#[derive(Parser, Debug)]
#[command(name = "vidcap", version, about = "Bidirectional-LSTM video captioning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus: .vfm features plus a manifest.
    Synth(SynthArgs),
    /// Train a model on a manifest and write a checkpoint.
    Train(TrainArgs),
    /// Caption one feature file.
    Caption(CaptionArgs),
    /// Score captions for one split of a manifest.
    Eval(EvalArgs),
    /// Finite-difference check of the full-model gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    /// Number of latent event classes.
    #[arg(long, default_value_t = 4)]
    events: usize,
    #[arg(long, default_value_t = 0)]
    val: usize,
    #[arg(long, default_value_t = 0)]
    test: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Override any config key, e.g. `--set hidden=32`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug)]
struct CaptionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
    max_len: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, required_unless_present = "candidates")]
    checkpoint: Option<PathBuf>,
    /// Pre-computed captions, one `id<TAB>caption` per line.
    #[arg(long, conflicts_with = "checkpoint")]
    candidates: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct GradcheckArgs {
    /// Variant name or `all`.
    #[arg(long, default_value = "all")]
    pub variant: String,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub dim: usize,
    #[arg(long, default_value_t = 6)]
    pub vocab: usize,
    #[arg(long, default_value_t = 3)]
    pub frames: usize,
    #[arg(long, default_value_t = 3)]
    pub words: usize,
    #[arg(long, default_value_t = 1.0)]
    pub init_scale: f64,
    #[arg(long)]
    pub bias: bool,
    #[arg(long)]
    pub tied_forget: bool,
    /// Test hook: scale the analytic gradient of this parameter by 1.5.
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
}

impl Default for GradcheckArgs {
    fn default() -> Self {
        GradcheckArgs {
            variant: "all".into(),
            seed: 1,
            hidden: 3,
            dim: 4,
            vocab: 6,
            frames: 3,
            words: 3,
            init_scale: 1.0,
            bias: false,
            tied_forget: false,
            corrupt: None,
        }
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(err, "{text}");
            } else {
                let _ = write!(out, "{text}");
            }
            return code;
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Caption(a) => cmd_caption(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Argument(_) => EXIT_USAGE,
        Error::Divergence { .. } => EXIT_DIVERGED,
        Error::Evaluation(_) => EXIT_CHECK_FAILED,
        _ => EXIT_DATA,
    }
}

/// Prefixes I/O errors with the path involved.
fn at_path(path: &Path) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    }
}

/// Wraps any error as a data error (exit 3).
fn data_err(e: Error) -> Error {
    match e {
        Error::Config(m) | Error::Argument(m) => Error::Schema(m),
        other => other,
    }
}

fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> Result<i32> {
    let mut corpus = gen_synthetic(a.seed, a.n, a.frames, a.dim, a.events)?;
    corpus.assign_holdout(a.val, a.test)?;
    let manifest = save_corpus(&corpus, &a.out)?;
    writeln!(out, "{}", manifest.display())?;
    Ok(EXIT_OK)
}

/// Model and training configuration with the set of keys given explicitly.
#[derive(Clone, Debug, Default)]
pub struct CliConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    explicit: BTreeSet<String>,
}

impl CliConfig {
    pub fn keys() -> impl Iterator<Item = &'static str> {
        MODEL_CONFIG_KEYS.into_iter().chain(TRAIN_CONFIG_KEYS)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let known = self.model.set(key, value)? || self.train.set(key, value)?;
        if !known {
            let valid: Vec<&str> = CliConfig::keys().collect();
            return Err(Error::Config(format!("unknown config key `{key}` (valid keys: {})", valid.join(", "))));
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    /// Applies a `key = value` file. Errors name the line.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got `{raw}`", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("config error: "))))?;
        }
        Ok(())
    }

    pub fn apply_override(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{pair}` is not KEY=VALUE")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn resolved(&self) -> Vec<(String, String)> {
        let mut pairs = self.model.to_pairs();
        pairs.extend(self.train.to_pairs());
        pairs
    }
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let mut cfg = CliConfig::default();
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for o in &a.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(v) = &a.variant {
        cfg.set("variant", v)?;
    }
    if let Some(e) = a.epochs {
        cfg.set("epochs", &e.to_string())?;
    }
    if let Some(lr) = a.lr {
        cfg.set("lr", &lr.to_string())?;
    }
    cfg.train.validate()?;

    let corpus = load_corpus(&a.manifest).map_err(data_err).map_err(at_path(&a.manifest))?;
    let train_split: Vec<_> = corpus.split(Split::Train).collect();
    if train_split.is_empty() {
        return Err(Error::Schema("manifest has no train samples".into()));
    }
    let dim = corpus.feature_dim().expect("non-empty");
    if let Some(s) = corpus.samples.iter().find(|s| s.features.cols() != dim) {
        return Err(Error::Schema(format!("sample `{}` has feature width {}, expected {dim}", s.id, s.features.cols())));
    }
    if cfg.is_explicit("feature_dim") && cfg.model.feature_dim != dim {
        return Err(Error::Schema(format!(
            "config feature_dim {} does not match the corpus feature width {dim}",
            cfg.model.feature_dim
        )));
    }
    cfg.model.feature_dim = dim;

    let pretrain_text = match &cfg.train.pretrain {
        Some(path) => Some(read_text_corpus(path)?),
        None => None,
    };
    let mut corpora = vec![corpus.tokenized(Split::Train)];
    if let Some(t) = &pretrain_text {
        corpora.push(t.clone());
    }
    let vocab = build_vocab(&corpora);
    if cfg.is_explicit("vocab_size") && cfg.model.vocab_size != vocab.len() {
        return Err(Error::Schema(format!(
            "config vocab_size {} does not match the corpus vocabulary size {}",
            cfg.model.vocab_size,
            vocab.len()
        )));
    }
    cfg.model.vocab_size = vocab.len();
    cfg.model.validate()?;

    writeln!(out, "# resolved configuration")?;
    for (k, v) in cfg.resolved() {
        writeln!(out, "{k}={v}")?;
    }
    out.flush()?;

    let train_pairs = corpus.pairs(Split::Train, &vocab, cfg.model.max_steps)?;
    let val_pairs = corpus.pairs(Split::Val, &vocab, cfg.model.max_steps)?;
    let mut model = Model::new(&cfg.model)?;

    if let Some(text) = &pretrain_text {
        let sentences: Vec<Sentence> = text.iter().map(|t| vocab.encode_sentence(t).truncated(MAX_EACH)).collect();
        let log = pretrain_lm(&mut model, &sentences, &cfg.train)?;
        for r in &log.records {
            writeln!(out, "pretrain\t{r}")?;
        }
    }

    let vocab_tokens = Some(vocab.tokens().to_vec());
    Checkpoint::from_model(&model, TrainingMeta::default(), vocab_tokens.clone()).save(&a.out)?;
    let mut history = Vec::new();
    let result = train_with(&mut model, &train_pairs, &val_pairs, &cfg.train, |m, record| {
        history.push(record.train_nll);
        let meta = TrainingMeta {
            epoch: record.epoch as u64,
            loss_history: history.clone(),
        };
        Checkpoint::from_model(m, meta, vocab_tokens.clone()).save(&a.out)?;
        writeln!(out, "{record}")?;
        Ok(())
    });
    // On divergence the file still holds the last completed epoch.
    result.map(|_| EXIT_OK)
}

/// One caption per non-empty line.
fn read_text_corpus(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| at_path(path)(e.into()))?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(tokenize_caption).collect())
}

fn checkpoint_vocab(ck: &Checkpoint) -> Result<Option<Vocabulary>> {
    ck.vocab.clone().map(Vocabulary::from_tokens).transpose()
}

fn render_caption(sentence: &Sentence, vocab: Option<&Vocabulary>) -> String {
    match vocab {
        Some(v) => detokenize(&v.decode_content(sentence)),
        None => sentence.content().iter().map(|i| format!("#{i}")).collect::<Vec<_>>().join(" "),
    }
}

/// Frames used at inference: the same head-first cap as a maximal caption.
fn inference_frames(feats: &Matrix) -> Result<Matrix> {
    let (frames, _) = truncate_pair(feats.rows(), MAX_EACH, 2 * MAX_EACH, MAX_EACH)?;
    Ok(feats.head_rows(frames))
}

fn caption_with(model: &Model, feats: &Matrix, max_len: usize) -> Result<Sentence> {
    let expected = model.config().feature_dim;
    if feats.cols() != expected {
        return Err(Error::Schema(format!(
            "feature width {} does not match the checkpoint's feature_dim {expected}",
            feats.cols()
        )));
    }
    model.caption(&inference_frames(feats)?, max_len)
}

fn cmd_caption(a: &CaptionArgs, out: &mut dyn Write) -> Result<i32> {
    let ck = Checkpoint::load(&a.checkpoint).map_err(at_path(&a.checkpoint))?;
    let model = ck.model()?;
    let vocab = checkpoint_vocab(&ck)?;
    let feats = load_features(&a.features).map_err(at_path(&a.features))?;
    let sentence = caption_with(&model, &feats, a.max_len)?;
    writeln!(out, "{}", render_caption(&sentence, vocab.as_ref()))?;
    Ok(EXIT_OK)
}

fn content_tokens(caption: &str) -> Vec<String> {
    let toks = tokenize_caption(caption);
    toks[1..toks.len() - 1].to_vec()
}

fn read_candidates(path: &Path) -> Result<HashMap<String, String>> {
    let text = fs::read_to_string(path)?;
    let mut map = HashMap::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let at = offset;
        offset += line.len() as u64;
        let line = line.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, caption) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(at, "expected `id<TAB>caption`"))?;
        if map.insert(id.to_string(), caption.to_string()).is_some() {
            return Err(Error::format(at, format!("duplicate candidate for `{id}`")));
        }
    }
    Ok(map)
}

fn build_eval_set(corpus: &Corpus, split: Split, mut candidate: impl FnMut(&crate::data::VideoSample) -> Result<Vec<String>>) -> Result<EvalSet> {
    let mut samples = Vec::new();
    for s in corpus.split(split) {
        let references: Vec<Vec<String>> = s.captions.iter().map(|c| content_tokens(c)).collect();
        if references.is_empty() {
            return Err(Error::Schema(format!("sample `{}` has no reference captions", s.id)));
        }
        samples.push(EvalSample {
            id: s.id.clone(),
            candidate: candidate(s)?,
            references,
        });
    }
    if samples.is_empty() {
        return Err(Error::Schema(format!("split `{split}` is empty")));
    }
    EvalSet::new(samples)
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let split: Split = a.split.parse()?;
    let corpus = load_corpus(&a.manifest).map_err(data_err).map_err(at_path(&a.manifest))?;
    let eval = if let Some(path) = &a.candidates {
        let cands = read_candidates(path)?;
        build_eval_set(&corpus, split, |s| {
            cands
                .get(&s.id)
                .map(|c| content_tokens(c))
                .ok_or_else(|| Error::Schema(format!("no candidate caption for `{}`", s.id)))
        })?
    } else {
        let path = a.checkpoint.as_ref().expect("required by clap");
        let ck = Checkpoint::load(path).map_err(at_path(path))?;
        let model = ck.model()?;
        let vocab = checkpoint_vocab(&ck)?;
        build_eval_set(&corpus, split, |s| {
            let sentence = caption_with(&model, &s.features, DEFAULT_MAX_LEN)?;
            Ok(content_tokens(&render_caption(&sentence, vocab.as_ref())))
        })?
    };
    let report = evaluate(&eval).map_err(data_err)?.render();
    if let Some(path) = &a.out {
        fs::write(path, &report)?;
    }
    write!(out, "{report}")?;
    Ok(EXIT_OK)
}

/// Tiny model config used by the gradient check.
pub fn gradcheck_config(variant: Variant, a: &GradcheckArgs) -> ModelConfig {
    ModelConfig {
        variant,
        feature_dim: a.dim,
        hidden: a.hidden,
        uni_first_hidden: 2 * a.hidden,
        embed_dim: a.hidden,
        merge_dim: a.hidden,
        vocab_size: a.vocab,
        max_steps: a.frames + a.words,
        seed: a.seed,
        init_scale: a.init_scale,
        lstm_bias: a.bias,
        tied_forget: a.tied_forget,
    }
}

/// Central-difference check of every named parameter of one variant on a
/// random clip and caption drawn from `a.seed`.
pub fn gradcheck_model(variant: Variant, a: &GradcheckArgs) -> Result<GradCheckReport> {
    if a.hidden == 0 || a.hidden > 8 {
        return Err(Error::Argument(format!("gradcheck needs 1 <= hidden <= 8, got {}", a.hidden)));
    }
    if a.vocab < 5 || a.frames == 0 || a.words == 0 {
        return Err(Error::Argument("gradcheck needs vocab >= 5, frames >= 1 and words >= 1".into()));
    }
    let cfg = gradcheck_config(variant, a);
    let model = Model::new(&cfg)?;
    let mut rng = Rng::new(a.seed ^ 0x9E37_79B9_7F4A_7C15);
    let feats = rng.uniform_matrix(a.frames, a.dim, 1.0);
    let content: Vec<usize> = (0..a.words).map(|_| 3 + rng.below(a.vocab - 3)).collect();
    let sentence = Sentence::from_content(&content)?;

    let mut analytic = model.loss(&feats, &sentence)?.grads.to_param_set();
    if let Some(name) = &a.corrupt {
        let g = analytic
            .get_mut(name)
            .ok_or_else(|| Error::Argument(format!("no parameter `{name}` to corrupt")))?;
        *g = g.scale(1.5);
        if g.max_abs() == 0.0 {
            g.data_mut().fill(1.0);
        }
    }
    grad_check(
        |set| match Model::from_param_set(&cfg, set).and_then(|m| m.nll(&feats, &sentence)) {
            Ok(b) => b.nll,
            Err(_) => f64::NAN,
        },
        &model.param_set(),
        &analytic,
        GRADCHECK_EPS,
    )
}

fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let variants: Vec<Variant> = if a.variant == "all" {
        Variant::ALL.to_vec()
    } else {
        vec![a.variant.parse()?]
    };
    let mut all_pass = true;
    let mut worst = 0.0f64;
    for v in variants.iter().copied() {
        let report = gradcheck_model(v, a)?;
        for p in &report.params {
            let verdict = if p.max_rel_error <= GRADCHECK_TOLERANCE { "ok" } else { "FAIL" };
            writeln!(out, "{v}\t{}\t{:.3e}\t{verdict}", p.name, p.max_rel_error)?;
        }
        all_pass &= report.passes(GRADCHECK_TOLERANCE);
        worst = worst.max(report.max_rel_error());
    }
    let verdict = if all_pass { "PASS" } else { "FAIL" };
    writeln!(
        out,
        "gradcheck {verdict}: {} variant(s), max relative error {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:e})",
        variants.len()
    )?;
    Ok(if all_pass { EXIT_OK } else { EXIT_CHECK_FAILED })
}
