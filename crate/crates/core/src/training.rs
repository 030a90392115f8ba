//! Minibatch SGD with global-norm clipping, the epoch loop, and text-only
//! pretraining of the language path.
//!
//! Per-pair forward/backward passes inside a minibatch run on the rayon
//! pool. Their gradients are summed in sample order and then averaged, so
//! results do not depend on the number of worker threads.

use std::fmt;
use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;

use crate::data::Pair;
use crate::decoder::Sentence;
use crate::error::{Error, Result};
use crate::models::{LossOutput, Model, ModelParams};
use crate::numkit::{ParamSet, Rng};
use crate::params::Parameters;

/// Pairs whose gradients are held in memory at once.
const GRAD_CHUNK: usize = 8;

/// A batch whose mean NLL exceeds this multiple of the uniform-model NLL
/// counts as diverged.
pub const DIVERGENCE_FACTOR: f64 = 100.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub seed: u64,
    /// Text corpus for language-model pretraining, one caption per line.
    pub pretrain: Option<PathBuf>,
    pub pretrain_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            batch_size: 16,
            epochs: 10,
            clip_norm: 5.0,
            seed: 0,
            pretrain: None,
            pretrain_epochs: 5,
        }
    }
}

pub const TRAIN_CONFIG_KEYS: [&str; 7] =
    ["lr", "batch_size", "epochs", "clip_norm", "train_seed", "pretrain", "pretrain_epochs"];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let pretrain = self.pretrain.as_ref().map_or(String::new(), |p| p.display().to_string());
        [
            self.lr.to_string(),
            self.batch_size.to_string(),
            self.epochs.to_string(),
            self.clip_norm.to_string(),
            self.seed.to_string(),
            pretrain,
            self.pretrain_epochs.to_string(),
        ]
        .into_iter()
        .zip(TRAIN_CONFIG_KEYS)
        .map(|(v, k)| (k.to_string(), v))
        .collect()
    }

    /// Sets one key; `Ok(false)` when the key is not a training key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
        }
        match key {
            "lr" => self.lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "clip_norm" => self.clip_norm = num(key, value)?,
            "train_seed" => self.seed = num(key, value)?,
            "pretrain" => self.pretrain = (!value.trim().is_empty()).then(|| PathBuf::from(value.trim())),
            "pretrain_epochs" => self.pretrain_epochs = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Factor the gradient was multiplied by (1 when not clipped).
    pub clip_scale: f64,
    /// Norm of the applied update `lr · scale · grad`.
    pub update_norm: f64,
}

fn clip_scale(norm: f64, clip: f64) -> f64 {
    if norm > clip {
        clip / norm
    } else {
        1.0
    }
}

/// `θ ← θ − lr · s · g` with `s = min(1, clip / ‖g‖)` over the global norm.
pub fn sgd_step(params: &mut ParamSet, grads: &ParamSet, lr: f64, clip_norm: f64) -> Result<StepStats> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Schema(format!("no gradient for parameter `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(Error::Schema(format!(
                "gradient for `{name}` has shape {}x{}, parameter is {}x{}",
                g.rows(),
                g.cols(),
                p.rows(),
                p.cols()
            )));
        }
    }
    if let Some(extra) = grads.keys().find(|k| !params.contains_key(*k)) {
        return Err(Error::Schema(format!("gradient for unknown parameter `{extra}`")));
    }
    let norm = crate::numkit::global_norm(grads);
    let scale = clip_scale(norm, clip_norm);
    for (name, p) in params.iter_mut() {
        p.add_scaled(&grads[name], -lr * scale)?;
    }
    Ok(StepStats {
        grad_norm: norm,
        clip_scale: scale,
        update_norm: lr * scale * norm,
    })
}

/// Typed form of [`sgd_step`]. Only parameters accepted by `mask` are
/// updated, and only they contribute to the clipping norm.
fn sgd_update(params: &mut ModelParams, grads: &ModelParams, lr: f64, clip: f64, mask: &dyn Fn(&str) -> bool) -> StepStats {
    let mut sq = 0.0;
    grads.visit("", &mut |name, g| {
        if mask(&name) {
            sq += g.sum_squares();
        }
    });
    let norm = sq.sqrt();
    let scale = clip_scale(norm, clip);
    let mut sources = Vec::new();
    grads.visit("", &mut |_, g| sources.push(g));
    let mut it = sources.into_iter();
    params.visit_mut("", &mut |name, p| {
        let g = it.next().expect("identical layouts");
        if mask(&name) {
            for (a, b) in p.data_mut().iter_mut().zip(g.data()) {
                *a -= lr * scale * b;
            }
        }
    });
    StepStats {
        grad_norm: norm,
        clip_scale: scale,
        update_norm: lr * scale * norm,
    }
}

/// Sums per-item losses and gradients in item order, evaluating up to
/// `GRAD_CHUNK` items in parallel. Returns the means.
fn mean_gradient<T: Sync>(
    model: &Model,
    items: &[&T],
    loss: impl Fn(&Model, &T) -> Result<LossOutput> + Sync,
) -> Result<(f64, ModelParams)> {
    if items.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let mut total = model.params().zeros_like();
    let mut nll = 0.0;
    for chunk in items.chunks(GRAD_CHUNK) {
        let outs: Vec<LossOutput> = chunk.par_iter().map(|it| loss(model, it)).collect::<Result<_>>()?;
        for out in outs {
            nll += out.nll;
            total.accumulate(&out.grads);
        }
    }
    let inv = 1.0 / items.len() as f64;
    total.visit_mut("", &mut |_, m| m.data_mut().iter_mut().for_each(|v| *v *= inv));
    Ok((nll * inv, total))
}

/// Mean NLL and mean gradient over a batch of pairs.
pub fn batch_gradient(model: &Model, batch: &[&Pair]) -> Result<(f64, ModelParams)> {
    mean_gradient(model, batch, |m, p: &Pair| m.loss(&p.features, &p.sentence))
}

/// Mean per-pair NLL, forward passes only.
pub fn mean_nll(model: &Model, pairs: &[Pair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Argument("no pairs to score".into()));
    }
    let nlls: Vec<f64> = pairs
        .par_iter()
        .map(|p| model.nll(&p.features, &p.sentence).map(|b| b.nll))
        .collect::<Result<_>>()?;
    Ok(nlls.iter().sum::<f64>() / pairs.len() as f64)
}

/// Fraction of teacher-forced decode steps whose argmax is the target token.
pub fn token_accuracy(model: &Model, pairs: &[Pair]) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for p in pairs {
        let logits = model.decode_logits(&p.features, &p.sentence)?;
        for (l, &target) in logits.iter().zip(&p.sentence.tokens()[1..]) {
            hits += usize::from(crate::numkit::argmax(l) == target);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Argument("no decode steps to score".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-pair NLL over the epoch, measured before each batch update.
    pub train_nll: f64,
    /// Mean per-pair NLL on the validation pairs after the epoch.
    pub val_nll: Option<f64>,
    /// Mean pre-clip gradient norm over the epoch's updates.
    pub grad_norm: f64,
    /// Largest single update norm in the epoch.
    pub max_update_norm: f64,
    pub seconds: f64,
}

impl fmt::Display for EpochRecord {
    /// `epoch=<n>\ttrain_nll=<x>\tval_nll=<x|->\tgrad_norm=<x>\tseconds=<x>`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let val = self.val_nll.map_or("-".to_string(), |v| format!("{v:.6}"));
        write!(
            f,
            "epoch={}\ttrain_nll={:.6}\tval_nll={val}\tgrad_norm={:.6}\tseconds={:.3}",
            self.epoch, self.train_nll, self.grad_norm, self.seconds
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn train_history(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.train_nll).collect()
    }
}

fn uniform_nll(vocab: usize, predictions: usize) -> f64 {
    predictions as f64 * (vocab as f64).ln()
}

/// Shared epoch loop over `n` items.
fn run_epochs<T: Sync>(
    model: &mut Model,
    items: &[T],
    cfg: &TrainConfig,
    epochs: usize,
    predictions: impl Fn(&T) -> usize,
    loss: impl Fn(&Model, &T) -> Result<LossOutput> + Sync,
    mask: &dyn Fn(&str) -> bool,
    mut after_epoch: impl FnMut(&Model, EpochRecord) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::Argument("training corpus is empty".into()));
    }
    let vocab = model.config().vocab_size;
    let mut rng = Rng::new(cfg.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    for epoch in 1..=epochs {
        let start = Instant::now();
        rng.shuffle(&mut order);
        let (mut nll_sum, mut norm_sum, mut max_update, mut steps) = (0.0, 0.0, 0.0f64, 0usize);
        for batch_idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&T> = batch_idx.iter().map(|&i| &items[i]).collect();
            let (nll, grads) = mean_gradient(model, &batch, &loss)?;
            let bound = DIVERGENCE_FACTOR
                * batch.iter().map(|it| uniform_nll(vocab, predictions(it))).sum::<f64>()
                / batch.len() as f64;
            if !nll.is_finite() || nll > bound {
                return Err(Error::Divergence { epoch, loss: nll });
            }
            let stats = sgd_update(model.params_mut(), &grads, cfg.lr, cfg.clip_norm, mask);
            let mut finite = true;
            model.params().visit("", &mut |_, m| finite &= m.is_finite());
            if !finite || !stats.grad_norm.is_finite() {
                return Err(Error::Divergence { epoch, loss: f64::NAN });
            }
            nll_sum += nll * batch.len() as f64;
            norm_sum += stats.grad_norm;
            max_update = max_update.max(stats.update_norm);
            steps += 1;
        }
        let record = EpochRecord {
            epoch,
            train_nll: nll_sum / items.len() as f64,
            val_nll: None,
            grad_norm: norm_sum / steps as f64,
            max_update_norm: max_update,
            seconds: start.elapsed().as_secs_f64(),
        };
        after_epoch(model, record)?;
    }
    Ok(())
}

/// Trains on `train`, scoring `val` after every epoch. `observer` sees the
/// model and record after each completed epoch; an error from it stops
/// training.
pub fn train_with(
    model: &mut Model,
    train: &[Pair],
    val: &[Pair],
    cfg: &TrainConfig,
    mut observer: impl FnMut(&Model, &EpochRecord) -> Result<()>,
) -> Result<TrainLog> {
    let budget = model.config().max_steps;
    if let Some(p) = train.iter().chain(val).find(|p| p.features.rows() + p.sentence.content_len() > budget) {
        return Err(Error::Protocol(format!(
            "pair `{}` uses {} frames + {} words, over the {budget}-step budget",
            p.id,
            p.features.rows(),
            p.sentence.content_len()
        )));
    }
    let vocab = model.config().vocab_size;
    let mut log = TrainLog::default();
    run_epochs(
        model,
        train,
        cfg,
        cfg.epochs,
        |p: &Pair| p.sentence.tokens().len() - 1,
        |m, p: &Pair| m.loss(&p.features, &p.sentence),
        &|_| true,
        |m, mut record| {
            if !val.is_empty() {
                let v = mean_nll(m, val)?;
                let bound = DIVERGENCE_FACTOR
                    * val.iter().map(|p| uniform_nll(vocab, p.sentence.tokens().len() - 1)).sum::<f64>()
                    / val.len() as f64;
                if !v.is_finite() || v > bound {
                    return Err(Error::Divergence { epoch: record.epoch, loss: v });
                }
                record.val_nll = Some(v);
            }
            observer(m, &record)?;
            log.records.push(record);
            Ok(())
        },
    )?;
    Ok(log)
}

pub fn train(model: &mut Model, train: &[Pair], val: &[Pair], cfg: &TrainConfig) -> Result<TrainLog> {
    train_with(model, train, val, cfg, |_, _| Ok(()))
}

/// Trains only the language path on text, starting each sentence from a
/// zero state with no video input. Every other parameter is left bitwise
/// unchanged. Runs `cfg.pretrain_epochs` epochs.
pub fn pretrain_lm(model: &mut Model, sentences: &[Sentence], cfg: &TrainConfig) -> Result<TrainLog> {
    let names = model.language_param_names();
    let mut log = TrainLog::default();
    run_epochs(
        model,
        sentences,
        cfg,
        cfg.pretrain_epochs,
        |s: &Sentence| s.tokens().len() - 1,
        |m, s: &Sentence| m.text_loss(s),
        &|name| names.iter().any(|n| n == name),
        |_, record| {
            log.records.push(record);
            Ok(())
        },
    )?;
    Ok(log)
}
