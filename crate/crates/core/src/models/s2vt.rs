//! Shared-LSTM (S2VT-style) wiring.
//!
//! One LSTM reads the frames and then emits the words. Its input at every
//! step is the concatenation of three slots, in this order:
//!
//! ```text
//! [ merged (bi / reinforced) ; frame (uni / reinforced) ; word embedding ]
//! ```
//!
//! During the encode stage the word slot is zero. During the decode stage the
//! frame slot is zero and the forward/backward front LSTMs receive zero
//! inputs: the forward LSTM keeps running over the padding while the
//! backward LSTM, which starts reading at the last frame, contributes zeros.
//! Losses are taken on decode-stage steps only.

use crate::encoder::{bi_backward, bi_forward, BiPass, EncoderMode};
use crate::error::{Error, Result};
use crate::lstm::{lstm_backward_seq, lstm_forward_seq, step_unchecked, LstmOptions, LstmParams, LstmState, StepCache};
use crate::decoder::{check_token, greedy_loop, project, project_backward, Sentence};
use crate::numkit::{init_uniform, log_softmax_at, Matrix, Rng};
use crate::params::{join, Parameters};

use super::{Stage, StepLoss};

/// Forward/backward front LSTMs and their merge matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct BiFront {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
    pub merge_w: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct S2vtParams {
    pub mode: EncoderMode,
    pub front: Option<BiFront>,
    /// The single LSTM used for both stages.
    pub shared: LstmParams,
    pub w_emb: Matrix,
    pub w_out: Matrix,
    pub b_out: Matrix,
}

pub(crate) struct S2vtDims {
    pub feature_dim: usize,
    pub hidden: usize,
    pub merge_dim: usize,
    pub embed_dim: usize,
    pub vocab_size: usize,
}

impl S2vtParams {
    pub(crate) fn zeros(mode: EncoderMode, d: &S2vtDims, opts: LstmOptions) -> Self {
        let front = mode.is_bidirectional().then(|| BiFront {
            fwd: LstmParams::zeros(d.feature_dim, d.hidden, opts),
            bwd: LstmParams::zeros(d.feature_dim, d.hidden, opts),
            merge_w: Matrix::zeros(d.merge_dim, 2 * d.hidden),
        });
        let merge = if front.is_some() { d.merge_dim } else { 0 };
        let frame = if mode == EncoderMode::Bidirectional { 0 } else { d.feature_dim };
        S2vtParams {
            mode,
            front,
            shared: LstmParams::zeros(merge + frame + d.embed_dim, d.hidden, opts),
            w_emb: Matrix::zeros(d.embed_dim, d.vocab_size),
            w_out: Matrix::zeros(d.vocab_size, d.hidden),
            b_out: Matrix::zeros(d.vocab_size, 1),
        }
    }

    pub(crate) fn init(mode: EncoderMode, d: &S2vtDims, opts: LstmOptions, scale: f64, rng: &mut Rng) -> Self {
        let mut p = S2vtParams::zeros(mode, d, opts);
        p.visit_mut("", &mut |name, m| {
            if !name.contains("b_") {
                *m = init_uniform(m.rows(), m.cols(), scale, rng);
            }
        });
        p
    }

    fn merge_width(&self) -> usize {
        self.front.as_ref().map_or(0, |f| f.merge_w.rows())
    }

    fn frame_width(&self) -> usize {
        match self.mode {
            EncoderMode::Bidirectional => 0,
            _ => self.feature_dim(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        match (&self.front, self.mode) {
            (Some(f), _) => f.fwd.input_dim(),
            (None, _) => self.shared.input_dim() - self.w_emb.rows(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.w_emb.cols()
    }

    fn input(&self, merged: Option<&[f64]>, frame: Option<&[f64]>, token: Option<usize>) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.shared.input_dim());
        match merged {
            Some(m) => x.extend_from_slice(m),
            None => x.resize(self.merge_width(), 0.0),
        }
        match frame {
            Some(f) if self.frame_width() > 0 => x.extend_from_slice(f),
            _ => x.resize(x.len() + self.frame_width(), 0.0),
        }
        match token {
            Some(t) => x.extend(self.w_emb.column(t)),
            None => x.resize(x.len() + self.w_emb.rows(), 0.0),
        }
        x
    }
}

impl Parameters for S2vtParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        if let Some(front) = &self.front {
            front.fwd.visit(&join(prefix, "fu"), f);
            front.bwd.visit(&join(prefix, "bu"), f);
            f(join(prefix, "merge_w"), &front.merge_w);
        }
        self.shared.visit(&join(prefix, "shared"), f);
        f(join(prefix, "w_emb"), &self.w_emb);
        f(join(prefix, "w_out"), &self.w_out);
        f(join(prefix, "b_out"), &self.b_out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Matrix)) {
        if let Some(front) = &mut self.front {
            front.fwd.visit_mut(&join(prefix, "fu"), f);
            front.bwd.visit_mut(&join(prefix, "bu"), f);
            f(join(prefix, "merge_w"), &mut front.merge_w);
        }
        self.shared.visit_mut(&join(prefix, "shared"), f);
        f(join(prefix, "w_emb"), &mut self.w_emb);
        f(join(prefix, "w_out"), &mut self.w_out);
        f(join(prefix, "b_out"), &mut self.b_out);
    }
}

pub(crate) struct S2vtRun {
    frames: usize,
    tokens: Vec<usize>,
    front: Option<BiPass>,
    caches: Vec<StepCache>,
    logits: Vec<Vec<f64>>,
}

impl S2vtRun {
    pub(crate) fn logits(&self) -> &[Vec<f64>] {
        &self.logits
    }
}

/// `feats` may have zero rows (text-only scoring).
pub(crate) fn forward(p: &S2vtParams, feats: &Matrix, tokens: &[usize]) -> Result<(Vec<StepLoss>, S2vtRun)> {
    let frames = feats.rows();
    if frames > 0 && feats.cols() != p.feature_dim() {
        return Err(Error::shape("s2vt features", (frames, p.feature_dim()), feats.shape()));
    }
    for &t in tokens {
        check_token(t, p.vocab_size())?;
    }
    let decode_steps = tokens.len() - 1;
    let total = frames + decode_steps;

    let front = match (&p.front, frames) {
        (Some(front), n) if n > 0 => {
            let mut xs = feats.row_vecs();
            xs.resize(total, vec![0.0; feats.cols()]);
            Some(bi_forward(&front.fwd, &front.bwd, &front.merge_w, &xs, frames)?)
        }
        _ => None,
    };

    let inputs: Vec<Vec<f64>> = (0..total)
        .map(|t| {
            let merged = front.as_ref().map(|pass| pass.merged[t].as_slice());
            if t < frames {
                p.input(merged, Some(feats.row(t)), None)
            } else {
                p.input(merged, None, Some(tokens[t - frames]))
            }
        })
        .collect();
    let hidden = p.shared.hidden_dim();
    let (states, caches) = lstm_forward_seq(&p.shared, &inputs, &LstmState::zeros(hidden))?;

    let mut losses = Vec::with_capacity(total);
    let mut logits_all = Vec::with_capacity(decode_steps);
    for (t, state) in states.iter().enumerate() {
        if t < frames {
            losses.push(StepLoss {
                stage: Stage::Encode,
                loss: 0.0,
            });
            continue;
        }
        let logits = project(&p.w_out, &p.b_out, &state.h);
        let target = tokens[t - frames + 1];
        losses.push(StepLoss {
            stage: Stage::Decode,
            loss: -log_softmax_at(&logits, target),
        });
        logits_all.push(logits);
    }
    Ok((
        losses,
        S2vtRun {
            frames,
            tokens: tokens.to_vec(),
            front,
            caches,
            logits: logits_all,
        },
    ))
}

pub(crate) fn backward(p: &S2vtParams, run: &S2vtRun) -> Result<S2vtParams> {
    let mut grads = p.clone();
    grads.visit_mut("", &mut |_, m| m.data_mut().fill(0.0));
    let hidden = p.shared.hidden_dim();
    let frames = run.frames;

    let mut d_h = vec![vec![0.0; hidden]; run.caches.len()];
    for (t, cache) in run.caches.iter().enumerate().skip(frames) {
        let k = t - frames;
        let (_, dh) = project_backward(
            &p.w_out,
            &run.logits[k],
            run.tokens[k + 1],
            &cache.h,
            &mut grads.w_out,
            &mut grads.b_out,
        );
        d_h[t] = dh;
    }
    let shared = lstm_backward_seq(&p.shared, &run.caches, &d_h, &LstmState::zeros(hidden))?;
    grads.shared = shared.params;

    let merge = p.merge_width();
    let word_at = merge + p.frame_width();
    for (t, dx) in shared.inputs.iter().enumerate().skip(frames) {
        let token = run.tokens[t - frames];
        for (r, d) in dx[word_at..].iter().enumerate() {
            let v = grads.w_emb.get(r, token) + d;
            grads.w_emb.set(r, token, v);
        }
    }

    if let (Some(front), Some(pass)) = (&p.front, &run.front) {
        let d_merged: Vec<Vec<f64>> = shared.inputs.iter().map(|dx| dx[..merge].to_vec()).collect();
        let g = bi_backward(&front.fwd, &front.bwd, &front.merge_w, pass, &d_merged)?;
        let gf = grads.front.as_mut().expect("same layout as params");
        gf.fwd = g.fwd;
        gf.bwd = g.bwd;
        gf.merge_w = g.merge_w;
    }
    Ok(grads)
}

pub(crate) fn caption(p: &S2vtParams, feats: &Matrix, max_len: usize) -> Result<Sentence> {
    let frames = feats.rows();
    if frames == 0 {
        return Err(Error::Argument("video has no frames".into()));
    }
    if feats.cols() != p.feature_dim() {
        return Err(Error::shape("s2vt features", (frames, p.feature_dim()), feats.shape()));
    }
    let rows = feats.row_vecs();

    // Encode stage. The backward front states are only defined over frames.
    let mut fwd_state = None;
    let mut merged_rows: Vec<Option<Vec<f64>>> = vec![None; frames];
    if let Some(front) = &p.front {
        let pass = bi_forward(&front.fwd, &front.bwd, &front.merge_w, &rows, frames)?;
        let last = pass.fwd_caches.last().expect("frames > 0");
        fwd_state = Some(LstmState {
            c: last.c.clone(),
            h: last.h.clone(),
        });
        for (slot, m) in merged_rows.iter_mut().zip(pass.merged) {
            *slot = Some(m);
        }
    }
    let mut state = LstmState::zeros(p.shared.hidden_dim());
    for (t, row) in rows.iter().enumerate() {
        let x = p.input(merged_rows[t].as_deref(), Some(row), None);
        state = step_unchecked(&p.shared, &x, &state).0;
    }

    let zero_frame = vec![0.0; feats.cols()];
    greedy_loop(max_len, |token| {
        let merged = match (&p.front, fwd_state.as_mut()) {
            (Some(front), Some(fs)) => {
                let (next, _) = step_unchecked(&front.fwd, &zero_frame, fs);
                let mut concat = next.h.clone();
                concat.resize(front.merge_w.cols(), 0.0);
                *fs = next;
                Some(front.merge_w.matvec(&concat)?)
            }
            _ => None,
        };
        let x = p.input(merged.as_deref(), None, Some(token));
        state = step_unchecked(&p.shared, &x, &state).0;
        Ok(project(&p.w_out, &p.b_out, &state.h))
    })
}
