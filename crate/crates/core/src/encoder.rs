//! Video encoder: first-stage LSTM pass(es) over frame features, an
//! optional learned merge of forward and backward hidden states, an optional
//! concatenation with the raw features, and a second-stage LSTM whose final
//! `(c, h)` represents the clip.
//!
//! The backward pass reads frames `T..1`; its hidden sequence is re-reversed
//! so that position `t` of both directions refers to frame `t`. Merged rows
//! are `merge_w · [h_fwd_t ; h_bwd_t]` (no bias, no nonlinearity). The
//! reinforced sequence is `[merged_t ; feat_t]`, merged block first.

use crate::error::{Error, Result};
use crate::lstm::{lstm_backward_seq, lstm_forward_seq, LstmOptions, LstmParams, LstmState, StepCache};
use crate::numkit::{init_uniform, Matrix, Rng};
use crate::params::{join, Parameters};

/// Final memory cell and hidden output of the second-stage encoder.
pub type VideoRepresentation = LstmState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EncoderMode {
    Unidirectional,
    Bidirectional,
    Reinforced,
}

impl EncoderMode {
    pub fn is_bidirectional(self) -> bool {
        !matches!(self, EncoderMode::Unidirectional)
    }
}

/// Shapes needed to allocate an encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderDims {
    pub feature_dim: usize,
    /// Hidden size of FU/BU in bidirectional modes and of MU in all modes.
    pub hidden: usize,
    /// Hidden size of the single first-stage LSTM in unidirectional mode.
    pub uni_first_hidden: usize,
    pub merge_dim: usize,
}

impl EncoderDims {
    /// Input width of the second-stage LSTM.
    pub fn second_input(&self, mode: EncoderMode) -> usize {
        match mode {
            EncoderMode::Unidirectional => self.uni_first_hidden,
            EncoderMode::Bidirectional => self.merge_dim,
            EncoderMode::Reinforced => self.merge_dim + self.feature_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub mode: EncoderMode,
    /// FU; the only first-stage LSTM in unidirectional mode.
    pub fwd: LstmParams,
    /// BU, present iff the mode is bidirectional or reinforced.
    pub bwd: Option<LstmParams>,
    /// `merge_dim × (hidden_fwd + hidden_bwd)`, present iff `bwd` is.
    pub merge_w: Option<Matrix>,
    /// MU.
    pub second: LstmParams,
}

impl EncoderParams {
    pub fn zeros(mode: EncoderMode, dims: EncoderDims, opts: LstmOptions) -> Self {
        let first_hidden = if mode.is_bidirectional() {
            dims.hidden
        } else {
            dims.uni_first_hidden
        };
        EncoderParams {
            mode,
            fwd: LstmParams::zeros(dims.feature_dim, first_hidden, opts),
            bwd: mode
                .is_bidirectional()
                .then(|| LstmParams::zeros(dims.feature_dim, dims.hidden, opts)),
            merge_w: mode
                .is_bidirectional()
                .then(|| Matrix::zeros(dims.merge_dim, 2 * dims.hidden)),
            second: LstmParams::zeros(dims.second_input(mode), dims.hidden, opts),
        }
    }

    /// Uniform init of every weight, in visiting order (FU, BU, merge, MU).
    pub fn init(mode: EncoderMode, dims: EncoderDims, opts: LstmOptions, scale: f64, rng: &mut Rng) -> Self {
        let mut p = EncoderParams::zeros(mode, dims, opts);
        p.visit_mut("", &mut |name, m| {
            if !name.contains(".b_") {
                *m = init_uniform(m.rows(), m.cols(), scale, rng);
            }
        });
        p
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, m| m.data_mut().fill(0.0));
        z
    }

    pub fn feature_dim(&self) -> usize {
        self.fwd.input_dim()
    }

    pub fn hidden(&self) -> usize {
        self.second.hidden_dim()
    }
}

impl Parameters for EncoderParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        self.fwd.visit(&join(prefix, "fu"), f);
        if let Some(b) = &self.bwd {
            b.visit(&join(prefix, "bu"), f);
        }
        if let Some(m) = &self.merge_w {
            f(join(prefix, "merge_w"), m);
        }
        self.second.visit(&join(prefix, "mu"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Matrix)) {
        self.fwd.visit_mut(&join(prefix, "fu"), f);
        if let Some(b) = &mut self.bwd {
            b.visit_mut(&join(prefix, "bu"), f);
        }
        if let Some(m) = &mut self.merge_w {
            f(join(prefix, "merge_w"), m);
        }
        self.second.visit_mut(&join(prefix, "mu"), f);
    }
}

/// Cached forward/backward first-stage run and its merge.
#[derive(Clone, Debug)]
pub(crate) struct BiPass {
    pub fwd_caches: Vec<StepCache>,
    /// In processing order: step `s` read position `n_bwd - 1 - s`.
    pub bwd_caches: Vec<StepCache>,
    /// `[h_fwd_t ; h_bwd_t]` per aligned position.
    pub concat: Vec<Vec<f64>>,
    pub merged: Vec<Vec<f64>>,
}

/// Forward LSTM over all of `xs`, backward LSTM over the first `n_bwd`
/// rows of `xs` (read in reverse). Aligned backward states past `n_bwd` are
/// zero.
pub(crate) fn bi_forward(
    fwd: &LstmParams,
    bwd: &LstmParams,
    merge_w: &Matrix,
    xs: &[Vec<f64>],
    n_bwd: usize,
) -> Result<BiPass> {
    let (hf, hb) = (fwd.hidden_dim(), bwd.hidden_dim());
    if merge_w.cols() != hf + hb {
        return Err(Error::shape("merge", merge_w.shape(), (hf + hb, 1)));
    }
    if n_bwd == 0 || n_bwd > xs.len() {
        return Err(Error::Argument(format!(
            "backward pass length {n_bwd} outside 1..={}",
            xs.len()
        )));
    }
    let reversed: Vec<&[f64]> = xs[..n_bwd].iter().rev().map(Vec::as_slice).collect();
    let (fwd_run, bwd_run) = rayon::join(
        || lstm_forward_seq(fwd, xs, &LstmState::zeros(hf)),
        || lstm_forward_seq(bwd, &reversed, &LstmState::zeros(hb)),
    );
    let (fwd_states, fwd_caches) = fwd_run?;
    let (bwd_states, bwd_caches) = bwd_run?;

    let mut concat = Vec::with_capacity(xs.len());
    let mut merged = Vec::with_capacity(xs.len());
    for (t, fs) in fwd_states.iter().enumerate() {
        let mut row = Vec::with_capacity(hf + hb);
        row.extend_from_slice(&fs.h);
        if t < n_bwd {
            row.extend_from_slice(&bwd_states[n_bwd - 1 - t].h);
        } else {
            row.resize(hf + hb, 0.0);
        }
        merged.push(merge_w.matvec(&row)?);
        concat.push(row);
    }
    Ok(BiPass {
        fwd_caches,
        bwd_caches,
        concat,
        merged,
    })
}

pub(crate) struct BiGradients {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
    pub merge_w: Matrix,
    /// Gradient on each row of `xs`.
    pub inputs: Vec<Vec<f64>>,
}

pub(crate) fn bi_backward(
    fwd: &LstmParams,
    bwd: &LstmParams,
    merge_w: &Matrix,
    pass: &BiPass,
    d_merged: &[Vec<f64>],
) -> Result<BiGradients> {
    let n = pass.concat.len();
    let n_bwd = pass.bwd_caches.len();
    if d_merged.len() != n {
        return Err(Error::shape("merge backward", (n, merge_w.rows()), (d_merged.len(), 0)));
    }
    let (hf, hb) = (fwd.hidden_dim(), bwd.hidden_dim());
    let mut d_merge_w = Matrix::zeros(merge_w.rows(), merge_w.cols());
    let mut dh_fwd = Vec::with_capacity(n);
    let mut dh_bwd = vec![Vec::new(); n_bwd];
    for t in 0..n {
        d_merge_w.add_outer(&d_merged[t], &pass.concat[t]);
        let d_concat = merge_w.matvec_t(&d_merged[t])?;
        dh_fwd.push(d_concat[..hf].to_vec());
        if t < n_bwd {
            dh_bwd[n_bwd - 1 - t] = d_concat[hf..].to_vec();
        }
    }
    let (fwd_res, bwd_res) = rayon::join(
        || lstm_backward_seq(fwd, &pass.fwd_caches, &dh_fwd, &LstmState::zeros(hf)),
        || lstm_backward_seq(bwd, &pass.bwd_caches, &dh_bwd, &LstmState::zeros(hb)),
    );
    let (fwd_g, bwd_g) = (fwd_res?, bwd_res?);
    let mut inputs = fwd_g.inputs;
    for (s, dx) in bwd_g.inputs.iter().enumerate() {
        let t = n_bwd - 1 - s;
        for (a, b) in inputs[t].iter_mut().zip(dx) {
            *a += b;
        }
    }
    Ok(BiGradients {
        fwd: fwd_g.params,
        bwd: bwd_g.params,
        merge_w: d_merge_w,
        inputs,
    })
}

/// Forward and backward passes over `feats` (T×D), merged per timestep.
pub fn encode_bidirectional(
    fwd: &LstmParams,
    bwd: &LstmParams,
    merge_w: &Matrix,
    feats: &Matrix,
) -> Result<Matrix> {
    check_features(fwd, feats)?;
    check_features(bwd, feats)?;
    let pass = bi_forward(fwd, bwd, merge_w, &feats.row_vecs(), feats.rows())?;
    merged_matrix(&pass, merge_w.rows())
}

fn merged_matrix(pass: &BiPass, width: usize) -> Result<Matrix> {
    if pass.merged.is_empty() {
        return Ok(Matrix::zeros(0, width));
    }
    Matrix::from_rows(&pass.merged)
}

/// Row-wise `[merged | feats]`.
pub fn reinforce_concat(merged: &Matrix, feats: &Matrix) -> Result<Matrix> {
    if merged.rows() != feats.rows() {
        return Err(Error::shape("reinforce_concat", merged.shape(), feats.shape()));
    }
    merged.hcat(feats)
}

fn check_features(lstm: &LstmParams, feats: &Matrix) -> Result<()> {
    if feats.rows() == 0 {
        return Err(Error::Argument("video has no frames".into()));
    }
    if feats.cols() != lstm.input_dim() {
        return Err(Error::shape(
            "encoder features",
            (feats.rows(), lstm.input_dim()),
            feats.shape(),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug)]
enum FirstStage {
    Uni(Vec<StepCache>),
    Bi(BiPass),
}

/// Everything [`encoder_backward`] needs from a forward run.
#[derive(Clone, Debug)]
pub struct EncoderCache {
    mode: EncoderMode,
    frames: usize,
    first: FirstStage,
    second: Vec<StepCache>,
}

impl EncoderCache {
    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Second-stage input sequence (the merged or reinforced rows).
    pub fn second_inputs(&self) -> Vec<Vec<f64>> {
        self.second.iter().map(|c| c.x.clone()).collect()
    }
}

pub fn encode_video(params: &EncoderParams, feats: &Matrix) -> Result<VideoRepresentation> {
    encode_video_cached(params, feats).map(|(rep, _)| rep)
}

pub fn encode_video_cached(
    params: &EncoderParams,
    feats: &Matrix,
) -> Result<(VideoRepresentation, EncoderCache)> {
    check_features(&params.fwd, feats)?;
    let rows = feats.row_vecs();
    let (first, second_inputs) = match params.mode {
        EncoderMode::Unidirectional => {
            let h = params.fwd.hidden_dim();
            let (states, caches) = lstm_forward_seq(&params.fwd, &rows, &LstmState::zeros(h))?;
            let hs: Vec<Vec<f64>> = states.into_iter().map(|s| s.h).collect();
            (FirstStage::Uni(caches), hs)
        }
        EncoderMode::Bidirectional | EncoderMode::Reinforced => {
            let (bwd, merge_w) = bi_parts(params)?;
            let pass = bi_forward(&params.fwd, bwd, merge_w, &rows, rows.len())?;
            let inputs = if params.mode == EncoderMode::Reinforced {
                pass.merged
                    .iter()
                    .zip(&rows)
                    .map(|(m, f)| m.iter().chain(f).copied().collect())
                    .collect()
            } else {
                pass.merged.clone()
            };
            (FirstStage::Bi(pass), inputs)
        }
    };
    let hidden = params.second.hidden_dim();
    let (states, second) = lstm_forward_seq(&params.second, &second_inputs, &LstmState::zeros(hidden))?;
    let rep = states.last().cloned().expect("non-empty sequence");
    Ok((
        rep,
        EncoderCache {
            mode: params.mode,
            frames: feats.rows(),
            first,
            second,
        },
    ))
}

fn bi_parts(params: &EncoderParams) -> Result<(&LstmParams, &Matrix)> {
    match (&params.bwd, &params.merge_w) {
        (Some(b), Some(m)) => Ok((b, m)),
        _ => Err(Error::Schema(format!(
            "{:?} encoder requires a backward LSTM and a merge matrix",
            params.mode
        ))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderGradients {
    pub params: EncoderParams,
    /// Gradient on the input features (T×D).
    pub features: Matrix,
}

/// Gradients of a loss through the encoder, given its gradient on the
/// video representation.
pub fn encoder_backward(
    params: &EncoderParams,
    cache: &EncoderCache,
    grad_rep: &VideoRepresentation,
) -> Result<EncoderGradients> {
    if cache.mode != params.mode {
        return Err(Error::Schema(format!(
            "cache from a {:?} encoder used with a {:?} encoder",
            cache.mode, params.mode
        )));
    }
    let zero_up = vec![vec![0.0; params.second.hidden_dim()]; cache.second.len()];
    let second = lstm_backward_seq(&params.second, &cache.second, &zero_up, grad_rep)?;
    let mut grads = params.zeros_like();
    grads.second = second.params;
    let d_inputs = second.inputs;
    let dim = params.feature_dim();

    let feature_rows = match &cache.first {
        FirstStage::Uni(caches) => {
            let h = params.fwd.hidden_dim();
            let g = lstm_backward_seq(&params.fwd, caches, &d_inputs, &LstmState::zeros(h))?;
            grads.fwd = g.params;
            g.inputs
        }
        FirstStage::Bi(pass) => {
            let (bwd, merge_w) = bi_parts(params)?;
            let merge_dim = merge_w.rows();
            let d_merged: Vec<Vec<f64>> = d_inputs.iter().map(|d| d[..merge_dim].to_vec()).collect();
            let g = bi_backward(&params.fwd, bwd, merge_w, pass, &d_merged)?;
            grads.fwd = g.fwd;
            grads.bwd = Some(g.bwd);
            grads.merge_w = Some(g.merge_w);
            let mut rows = g.inputs;
            if params.mode == EncoderMode::Reinforced {
                for (row, d) in rows.iter_mut().zip(&d_inputs) {
                    for (a, b) in row.iter_mut().zip(&d[merge_dim..]) {
                        *a += b;
                    }
                }
            }
            rows
        }
    };
    let features = if feature_rows.is_empty() {
        Matrix::zeros(0, dim)
    } else {
        Matrix::from_rows(&feature_rows)?
    };
    Ok(EncoderGradients {
        params: grads,
        features,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> EncoderDims {
        EncoderDims {
            feature_dim: 3,
            hidden: 2,
            uni_first_hidden: 4,
            merge_dim: 2,
        }
    }

    #[test]
    fn zero_params_merge_to_zero() {
        let p = EncoderParams::zeros(EncoderMode::Bidirectional, dims(), LstmOptions::default());
        let feats = Rng::new(1).uniform_matrix(4, 3, 1.0);
        let merged = encode_bidirectional(&p.fwd, p.bwd.as_ref().unwrap(), p.merge_w.as_ref().unwrap(), &feats).unwrap();
        assert_eq!(merged, Matrix::zeros(4, 2));
        let rep = encode_video(&p, &feats).unwrap();
        assert!(rep.is_zero());
    }

    #[test]
    fn reinforce_concat_shapes_and_order() {
        let merged = Matrix::zeros(4, 512);
        let feats = Matrix::zeros(4, 4096);
        assert_eq!(reinforce_concat(&merged, &feats).unwrap().shape(), (4, 4608));

        let feats = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let out = reinforce_concat(&Matrix::zeros(2, 1), &feats).unwrap();
        assert_eq!(out.row(1), &[0.0, 3.0, 4.0]);
        assert_eq!(reinforce_concat(&Matrix::zeros(2, 0), &feats).unwrap(), feats);
        assert!(matches!(
            reinforce_concat(&Matrix::zeros(3, 1), &feats),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn parameter_inventory_per_mode() {
        let uni = EncoderParams::zeros(EncoderMode::Unidirectional, dims(), LstmOptions::default());
        assert!(uni.bwd.is_none() && uni.merge_w.is_none());
        assert_eq!(uni.fwd.hidden_dim(), 4);
        assert_eq!(uni.second.input_dim(), 4);
        let re = EncoderParams::zeros(EncoderMode::Reinforced, dims(), LstmOptions::default());
        assert_eq!(re.second.input_dim(), 2 + 3);
        assert_eq!(re.merge_w.as_ref().unwrap().shape(), (2, 4));
    }

    #[test]
    fn zero_grad_rep_gives_zero_gradients() {
        let mut rng = Rng::new(3);
        let p = EncoderParams::init(EncoderMode::Reinforced, dims(), LstmOptions::default(), 0.5, &mut rng);
        let feats = rng.uniform_matrix(3, 3, 1.0);
        let (_, cache) = encode_video_cached(&p, &feats).unwrap();
        let g = encoder_backward(&p, &cache, &LstmState::zeros(2)).unwrap();
        assert_eq!(g.params, p.zeros_like());
        assert_eq!(g.features, Matrix::zeros(3, 3));
    }

    #[test]
    fn rejects_wrong_feature_width() {
        let p = EncoderParams::zeros(EncoderMode::Bidirectional, dims(), LstmOptions::default());
        assert!(matches!(
            encode_video(&p, &Matrix::zeros(2, 5)),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            encode_video(&p, &Matrix::zeros(0, 3)),
            Err(Error::Argument(_))
        ));
    }
}
