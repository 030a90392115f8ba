//! Language-model decoder: an LSTM started from the video representation,
//! word inputs through an embedding matrix, and a softmax projection over
//! the vocabulary.

use crate::error::{Error, Result};
use crate::lstm::{lstm_backward_seq, step_unchecked, LstmOptions, LstmParams, LstmState, StepCache};
use crate::numkit::{argmax, init_uniform, log_softmax_at, softmax, Matrix, Rng};
use crate::params::{join, Parameters};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
/// Surface forms of the reserved indices `0..4`.
pub const RESERVED_TOKENS: [&str; 4] = ["<PAD>", "<BOS>", "<EOS>", "<UNK>"];

/// Content-token cap used for inference.
pub const DEFAULT_MAX_LEN: usize = 40;

/// Token indices `<BOS> w_1 .. w_N <EOS>`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Sentence {
    tokens: Vec<usize>,
}

impl Sentence {
    /// Checks the `<BOS> ... <EOS>` framing and that no reserved token other
    /// than `<UNK>` appears inside.
    pub fn new(tokens: Vec<usize>) -> Result<Self> {
        if tokens.len() < 2 || tokens[0] != BOS || *tokens.last().unwrap() != EOS {
            return Err(Error::Argument(format!(
                "sentence must start with <BOS> and end with <EOS>: {tokens:?}"
            )));
        }
        if let Some(bad) = tokens[1..tokens.len() - 1]
            .iter()
            .find(|&&t| t == PAD || t == BOS || t == EOS)
        {
            return Err(Error::Argument(format!(
                "reserved token {bad} inside sentence {tokens:?}"
            )));
        }
        Ok(Sentence { tokens })
    }

    pub fn from_content(content: &[usize]) -> Result<Self> {
        let mut tokens = Vec::with_capacity(content.len() + 2);
        tokens.push(BOS);
        tokens.extend_from_slice(content);
        tokens.push(EOS);
        Sentence::new(tokens)
    }

    /// Framed output of greedy decoding, which may contain any token.
    pub(crate) fn generated(content: Vec<usize>) -> Self {
        let mut tokens = Vec::with_capacity(content.len() + 2);
        tokens.push(BOS);
        tokens.extend(content);
        tokens.push(EOS);
        Sentence { tokens }
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn content(&self) -> &[usize] {
        &self.tokens[1..self.tokens.len() - 1]
    }

    /// Number of content words `N`.
    pub fn content_len(&self) -> usize {
        self.tokens.len() - 2
    }

    /// Keeps the first `n` content words.
    pub fn truncated(&self, n: usize) -> Sentence {
        let keep = n.min(self.content_len());
        Sentence::generated(self.content()[..keep].to_vec())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    /// SU.
    pub lm: LstmParams,
    /// `embed_dim × vocab_size`; column `k` embeds token `k`.
    pub w_emb: Matrix,
    /// `vocab_size × hidden`.
    pub w_out: Matrix,
    /// `vocab_size × 1`.
    pub b_out: Matrix,
}

impl DecoderParams {
    pub fn zeros(vocab_size: usize, embed_dim: usize, hidden: usize, opts: LstmOptions) -> Self {
        DecoderParams {
            lm: LstmParams::zeros(embed_dim, hidden, opts),
            w_emb: Matrix::zeros(embed_dim, vocab_size),
            w_out: Matrix::zeros(vocab_size, hidden),
            b_out: Matrix::zeros(vocab_size, 1),
        }
    }

    /// Uniform weights; the LSTM biases and `b_out` start at zero.
    pub fn init(
        vocab_size: usize,
        embed_dim: usize,
        hidden: usize,
        opts: LstmOptions,
        scale: f64,
        rng: &mut Rng,
    ) -> Self {
        let mut p = DecoderParams::zeros(vocab_size, embed_dim, hidden, opts);
        p.visit_mut("", &mut |name, m| {
            if !name.contains("b_") {
                *m = init_uniform(m.rows(), m.cols(), scale, rng);
            }
        });
        p
    }

    pub fn zeros_like(&self) -> Self {
        DecoderParams::zeros(
            self.vocab_size(),
            self.w_emb.rows(),
            self.lm.hidden_dim(),
            self.lm.options(),
        )
    }

    pub fn vocab_size(&self) -> usize {
        self.w_emb.cols()
    }

    pub fn hidden(&self) -> usize {
        self.lm.hidden_dim()
    }
}

impl Parameters for DecoderParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        self.lm.visit(&join(prefix, "su"), f);
        f(join(prefix, "w_emb"), &self.w_emb);
        f(join(prefix, "w_out"), &self.w_out);
        f(join(prefix, "b_out"), &self.b_out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Matrix)) {
        self.lm.visit_mut(&join(prefix, "su"), f);
        f(join(prefix, "w_emb"), &mut self.w_emb);
        f(join(prefix, "w_out"), &mut self.w_out);
        f(join(prefix, "b_out"), &mut self.b_out);
    }
}

/// `W_out · h + b_out`.
pub(crate) fn project(w_out: &Matrix, b_out: &Matrix, h: &[f64]) -> Vec<f64> {
    let mut logits = b_out.data().to_vec();
    w_out.matvec_acc(h, &mut logits);
    logits
}

/// Accumulates the softmax cross-entropy gradient for one prediction into
/// `w_out`/`b_out` and returns `(d_logits, d_h)`.
pub(crate) fn project_backward(
    w_out: &Matrix,
    logits: &[f64],
    target: usize,
    h: &[f64],
    d_w_out: &mut Matrix,
    d_b_out: &mut Matrix,
) -> (Vec<f64>, Vec<f64>) {
    let mut d_logits = softmax(logits).expect("vocabulary is non-empty");
    d_logits[target] -= 1.0;
    d_w_out.add_outer(&d_logits, h);
    for (b, d) in d_b_out.data_mut().iter_mut().zip(&d_logits) {
        *b += d;
    }
    let d_h = w_out.matvec_t(&d_logits).expect("shapes checked upstream");
    (d_logits, d_h)
}

pub(crate) fn check_token(token: usize, vocab_size: usize) -> Result<()> {
    if token >= vocab_size {
        return Err(Error::Vocabulary {
            token,
            size: vocab_size,
        });
    }
    Ok(())
}

fn check_rep(params: &DecoderParams, rep: &LstmState) -> Result<()> {
    let h = params.hidden();
    if rep.c.len() != h || rep.h.len() != h {
        return Err(Error::shape(
            "decoder initial state",
            (h, h),
            (rep.c.len(), rep.h.len()),
        ));
    }
    Ok(())
}

/// Feeds `token` and returns the next-word logits with the advanced state.
pub fn decode_step(
    params: &DecoderParams,
    token: usize,
    state: &LstmState,
) -> Result<(Vec<f64>, LstmState)> {
    check_token(token, params.vocab_size())?;
    check_rep(params, state)?;
    let x = params.w_emb.column(token);
    let (next, _) = step_unchecked(&params.lm, &x, state);
    let logits = project(&params.w_out, &params.b_out, &next.h);
    Ok((logits, next))
}

/// Forward activations of one scored sentence.
#[derive(Clone, Debug)]
pub struct DecoderCache {
    tokens: Vec<usize>,
    steps: Vec<StepCache>,
    logits: Vec<Vec<f64>>,
    /// `log p(token[t+1] | ...)` for each prediction step.
    pub step_log_probs: Vec<f64>,
}

impl DecoderCache {
    /// Output logits of each prediction step.
    pub fn logits(&self) -> &[Vec<f64>] {
        &self.logits
    }
}

/// `Σ_t log p(tokens[t+1] | V, tokens[..=t])` for an arbitrary token path.
pub fn sequence_log_prob(params: &DecoderParams, rep: &LstmState, tokens: &[usize]) -> Result<f64> {
    decoder_forward_tokens(params, rep, tokens).map(|(lp, _)| lp)
}

/// Log-probability of a well-formed sentence given the video representation,
/// including the `<EOS>` prediction.
pub fn sentence_log_prob(params: &DecoderParams, rep: &LstmState, sentence: &Sentence) -> Result<f64> {
    decoder_forward(params, rep, sentence).map(|(lp, _)| lp)
}

pub fn decoder_forward(
    params: &DecoderParams,
    rep: &LstmState,
    sentence: &Sentence,
) -> Result<(f64, DecoderCache)> {
    decoder_forward_tokens(params, rep, sentence.tokens())
}

fn decoder_forward_tokens(
    params: &DecoderParams,
    rep: &LstmState,
    tokens: &[usize],
) -> Result<(f64, DecoderCache)> {
    if tokens.len() < 2 {
        return Err(Error::Argument("need at least one prediction step".into()));
    }
    check_rep(params, rep)?;
    for &t in tokens {
        check_token(t, params.vocab_size())?;
    }
    let n = tokens.len() - 1;
    let mut steps = Vec::with_capacity(n);
    let mut logits_all = Vec::with_capacity(n);
    let mut step_log_probs = Vec::with_capacity(n);
    let mut state = rep.clone();
    for t in 0..n {
        let x = params.w_emb.column(tokens[t]);
        let (next, cache) = step_unchecked(&params.lm, &x, &state);
        let logits = project(&params.w_out, &params.b_out, &next.h);
        step_log_probs.push(log_softmax_at(&logits, tokens[t + 1]));
        logits_all.push(logits);
        steps.push(cache);
        state = next;
    }
    let total = step_log_probs.iter().sum();
    Ok((
        total,
        DecoderCache {
            tokens: tokens.to_vec(),
            steps,
            logits: logits_all,
            step_log_probs,
        },
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderGradients {
    pub params: DecoderParams,
    /// Gradient on the initial `(c, h)`, i.e. on the video representation.
    pub rep: LstmState,
    /// Gradient on each step's logits.
    pub logits: Vec<Vec<f64>>,
}

/// Gradients of the negative log-likelihood `-log p(S|V)`.
pub fn decoder_backward(
    params: &DecoderParams,
    rep: &LstmState,
    sentence: &Sentence,
    cache: &DecoderCache,
) -> Result<DecoderGradients> {
    if cache.tokens != sentence.tokens() || cache.steps.len() + 1 != sentence.tokens().len() {
        return Err(Error::shape(
            "decoder_backward cache",
            (cache.tokens.len(), 0),
            (sentence.tokens().len(), 0),
        ));
    }
    check_rep(params, rep)?;
    let mut grads = params.zeros_like();
    let mut d_h = Vec::with_capacity(cache.steps.len());
    let mut d_logits_all = Vec::with_capacity(cache.steps.len());
    for (t, step) in cache.steps.iter().enumerate() {
        let (d_logits, dh) = project_backward(
            &params.w_out,
            &cache.logits[t],
            cache.tokens[t + 1],
            &step.h,
            &mut grads.w_out,
            &mut grads.b_out,
        );
        d_logits_all.push(d_logits);
        d_h.push(dh);
    }
    let hidden = params.hidden();
    let lstm = lstm_backward_seq(&params.lm, &cache.steps, &d_h, &LstmState::zeros(hidden))?;
    grads.lm = lstm.params;
    let embed = params.w_emb.rows();
    for (t, dx) in lstm.inputs.iter().enumerate() {
        let token = cache.tokens[t];
        for r in 0..embed {
            let v = grads.w_emb.get(r, token) + dx[r];
            grads.w_emb.set(r, token, v);
        }
    }
    Ok(DecoderGradients {
        params: grads,
        rep: lstm.init,
        logits: d_logits_all,
    })
}

/// Greedy loop shared by every decoder wiring: `step(token)` feeds a token
/// and returns the next logits. Stops at `<EOS>` or after `max_len` content
/// tokens.
pub(crate) fn greedy_loop<F>(max_len: usize, mut step: F) -> Result<Sentence>
where
    F: FnMut(usize) -> Result<Vec<f64>>,
{
    let mut content = Vec::new();
    let mut token = BOS;
    while content.len() < max_len {
        let logits = step(token)?;
        let next = argmax(&logits);
        if next == EOS {
            break;
        }
        content.push(next);
        token = next;
    }
    Ok(Sentence::generated(content))
}

/// Argmax decoding from `<BOS>`; ties pick the lowest index.
pub fn greedy_decode(params: &DecoderParams, rep: &LstmState, max_len: usize) -> Result<Sentence> {
    if max_len == 0 {
        return Err(Error::Argument("max_len must be at least 1".into()));
    }
    check_rep(params, rep)?;
    let mut state = rep.clone();
    greedy_loop(max_len, |token| {
        let (logits, next) = decode_step(params, token, &state)?;
        state = next;
        Ok(logits)
    })
}
