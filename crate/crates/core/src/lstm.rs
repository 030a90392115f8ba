//! The LSTM cell and its hand-derived backward pass.
//!
//! One step, with `σ` the logistic function and `φ = tanh`:
//!
//! ```text
//! i = σ(W_ix x + W_ih h)
//! f = σ(W_fx x + W_fh h)
//! o = σ(W_ox x + W_oh h)
//! g = φ(W_cx x + W_ch h)
//! c' = f ⊙ c + i ⊙ g
//! h' = o ⊙ φ(c')
//! ```
//!
//! There are no bias terms unless [`LstmOptions::bias`] is set. With
//! [`LstmOptions::tied_forget`] the forget gate reuses `W_ih` in place of a
//! separate `W_fh`.

use crate::error::{Error, Result};
use crate::numkit::{init_uniform, sigmoid_scalar, Matrix, Rng};
use crate::params::{join, Parameters};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LstmOptions {
    /// Adds per-gate bias vectors `b_i, b_f, b_o, b_c`.
    pub bias: bool,
    /// Forget gate uses `W_ih` for its recurrent term (no `W_fh`).
    pub tied_forget: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmBias {
    pub b_i: Matrix,
    pub b_f: Matrix,
    pub b_o: Matrix,
    pub b_c: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub w_ix: Matrix,
    pub w_ih: Matrix,
    pub w_fx: Matrix,
    /// `None` when the forget gate is tied to `w_ih`.
    pub w_fh: Option<Matrix>,
    pub w_ox: Matrix,
    pub w_oh: Matrix,
    pub w_cx: Matrix,
    pub w_ch: Matrix,
    pub bias: Option<LstmBias>,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize, opts: LstmOptions) -> Self {
        let x = || Matrix::zeros(hidden, input);
        let h = || Matrix::zeros(hidden, hidden);
        let b = || Matrix::zeros(hidden, 1);
        LstmParams {
            w_ix: x(),
            w_ih: h(),
            w_fx: x(),
            w_fh: (!opts.tied_forget).then(h),
            w_ox: x(),
            w_oh: h(),
            w_cx: x(),
            w_ch: h(),
            bias: opts.bias.then(|| LstmBias {
                b_i: b(),
                b_f: b(),
                b_o: b(),
                b_c: b(),
            }),
        }
    }

    /// Weights uniform in `[-scale, scale]`, drawn in name order; biases start at zero.
    pub fn init(input: usize, hidden: usize, opts: LstmOptions, scale: f64, rng: &mut Rng) -> Self {
        let mut p = LstmParams::zeros(input, hidden, opts);
        p.visit_mut("", &mut |name, m| {
            if name.starts_with("w_") {
                *m = init_uniform(m.rows(), m.cols(), scale, rng);
            }
        });
        p
    }

    pub fn zeros_like(&self) -> Self {
        LstmParams::zeros(self.input_dim(), self.hidden_dim(), self.options())
    }

    pub fn input_dim(&self) -> usize {
        self.w_ix.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_ix.rows()
    }

    pub fn options(&self) -> LstmOptions {
        LstmOptions {
            bias: self.bias.is_some(),
            tied_forget: self.w_fh.is_none(),
        }
    }

    fn forget_recurrent(&self) -> &Matrix {
        self.w_fh.as_ref().unwrap_or(&self.w_ih)
    }
}

impl Parameters for LstmParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        f(join(prefix, "w_ix"), &self.w_ix);
        f(join(prefix, "w_ih"), &self.w_ih);
        f(join(prefix, "w_fx"), &self.w_fx);
        if let Some(w) = &self.w_fh {
            f(join(prefix, "w_fh"), w);
        }
        f(join(prefix, "w_ox"), &self.w_ox);
        f(join(prefix, "w_oh"), &self.w_oh);
        f(join(prefix, "w_cx"), &self.w_cx);
        f(join(prefix, "w_ch"), &self.w_ch);
        if let Some(b) = &self.bias {
            f(join(prefix, "b_i"), &b.b_i);
            f(join(prefix, "b_f"), &b.b_f);
            f(join(prefix, "b_o"), &b.b_o);
            f(join(prefix, "b_c"), &b.b_c);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Matrix)) {
        f(join(prefix, "w_ix"), &mut self.w_ix);
        f(join(prefix, "w_ih"), &mut self.w_ih);
        f(join(prefix, "w_fx"), &mut self.w_fx);
        if let Some(w) = &mut self.w_fh {
            f(join(prefix, "w_fh"), w);
        }
        f(join(prefix, "w_ox"), &mut self.w_ox);
        f(join(prefix, "w_oh"), &mut self.w_oh);
        f(join(prefix, "w_cx"), &mut self.w_cx);
        f(join(prefix, "w_ch"), &mut self.w_ch);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "b_i"), &mut b.b_i);
            f(join(prefix, "b_f"), &mut b.b_f);
            f(join(prefix, "b_o"), &mut b.b_o);
            f(join(prefix, "b_c"), &mut b.b_c);
        }
    }
}

/// Memory cell and hidden output.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub c: Vec<f64>,
    pub h: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            c: vec![0.0; hidden],
            h: vec![0.0; hidden],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.c.iter().chain(&self.h).all(|&v| v == 0.0)
    }
}

/// Activations of one step, kept for the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct StepCache {
    pub x: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub o: Vec<f64>,
    /// Candidate `φ(W_cx x + W_ch h)`.
    pub g: Vec<f64>,
    pub c: Vec<f64>,
    pub h: Vec<f64>,
}

fn check_step_shapes(p: &LstmParams, x: &[f64], prev: &LstmState) -> Result<()> {
    let (hidden, input) = (p.hidden_dim(), p.input_dim());
    if x.len() != input {
        return Err(Error::shape("lstm_step input", (hidden, input), (x.len(), 1)));
    }
    if prev.c.len() != hidden || prev.h.len() != hidden {
        return Err(Error::shape(
            "lstm_step state",
            (hidden, hidden),
            (prev.c.len(), prev.h.len()),
        ));
    }
    Ok(())
}

fn pre_activation(wx: &Matrix, wh: &Matrix, b: Option<&Matrix>, x: &[f64], h: &[f64]) -> Vec<f64> {
    let mut a = match b {
        Some(b) => b.data().to_vec(),
        None => vec![0.0; wx.rows()],
    };
    wx.matvec_acc(x, &mut a);
    wh.matvec_acc(h, &mut a);
    a
}

pub(crate) fn step_unchecked(p: &LstmParams, x: &[f64], prev: &LstmState) -> (LstmState, StepCache) {
    let bias = p.bias.as_ref();
    let h_prev = &prev.h;
    let mut i = pre_activation(&p.w_ix, &p.w_ih, bias.map(|b| &b.b_i), x, h_prev);
    let mut f = pre_activation(&p.w_fx, p.forget_recurrent(), bias.map(|b| &b.b_f), x, h_prev);
    let mut o = pre_activation(&p.w_ox, &p.w_oh, bias.map(|b| &b.b_o), x, h_prev);
    let mut g = pre_activation(&p.w_cx, &p.w_ch, bias.map(|b| &b.b_c), x, h_prev);
    i.iter_mut().for_each(|v| *v = sigmoid_scalar(*v));
    f.iter_mut().for_each(|v| *v = sigmoid_scalar(*v));
    o.iter_mut().for_each(|v| *v = sigmoid_scalar(*v));
    g.iter_mut().for_each(|v| *v = v.tanh());
    let c: Vec<f64> = (0..i.len())
        .map(|k| f[k] * prev.c[k] + i[k] * g[k])
        .collect();
    let h: Vec<f64> = c.iter().zip(&o).map(|(c, o)| o * c.tanh()).collect();
    let state = LstmState {
        c: c.clone(),
        h: h.clone(),
    };
    let cache = StepCache {
        x: x.to_vec(),
        c_prev: prev.c.clone(),
        h_prev: prev.h.clone(),
        i,
        f,
        o,
        g,
        c,
        h,
    };
    (state, cache)
}

pub fn lstm_step(p: &LstmParams, x: &[f64], prev: &LstmState) -> Result<(LstmState, StepCache)> {
    check_step_shapes(p, x, prev)?;
    Ok(step_unchecked(p, x, prev))
}

/// Runs the cell over `xs`, returning the state after every step.
pub fn lstm_forward_seq<X: AsRef<[f64]>>(
    p: &LstmParams,
    xs: &[X],
    init: &LstmState,
) -> Result<(Vec<LstmState>, Vec<StepCache>)> {
    if xs.is_empty() {
        return Err(Error::Argument("lstm_forward_seq on an empty sequence".into()));
    }
    let mut states = Vec::with_capacity(xs.len());
    let mut caches = Vec::with_capacity(xs.len());
    let mut state = init.clone();
    for x in xs {
        let (next, cache) = lstm_step(p, x.as_ref(), &state)?;
        states.push(next.clone());
        caches.push(cache);
        state = next;
    }
    Ok((states, caches))
}

/// Gradients produced by [`lstm_backward_seq`].
#[derive(Clone, Debug, PartialEq)]
pub struct LstmGradients {
    pub params: LstmParams,
    /// Gradient with respect to each step input `x_t`.
    pub inputs: Vec<Vec<f64>>,
    /// Gradient with respect to the initial `(c, h)`.
    pub init: LstmState,
}

/// Reverse-mode pass over a cached forward run.
///
/// `grad_h[t]` is the upstream gradient on `h_t` from outside the recurrence;
/// `grad_final` is the gradient on the final `(c, h)`, added on top.
pub fn lstm_backward_seq(
    p: &LstmParams,
    caches: &[StepCache],
    grad_h: &[Vec<f64>],
    grad_final: &LstmState,
) -> Result<LstmGradients> {
    let hidden = p.hidden_dim();
    if caches.len() != grad_h.len() {
        return Err(Error::shape(
            "lstm_backward_seq",
            (caches.len(), hidden),
            (grad_h.len(), hidden),
        ));
    }
    if grad_final.c.len() != hidden || grad_final.h.len() != hidden {
        return Err(Error::shape(
            "lstm_backward_seq final state",
            (hidden, hidden),
            (grad_final.c.len(), grad_final.h.len()),
        ));
    }
    for (t, (cache, gh)) in caches.iter().zip(grad_h).enumerate() {
        if gh.len() != hidden || cache.x.len() != p.input_dim() || cache.c.len() != hidden {
            return Err(Error::Shape {
                op: "lstm_backward_seq step",
                left_rows: t,
                left_cols: hidden,
                right_rows: gh.len(),
                right_cols: cache.x.len(),
            });
        }
    }

    let mut grads = p.zeros_like();
    let mut inputs = vec![Vec::new(); caches.len()];
    let mut dh_next = grad_final.h.clone();
    let mut dc_next = grad_final.c.clone();
    let tied = p.w_fh.is_none();

    let mut da_i = vec![0.0; hidden];
    let mut da_f = vec![0.0; hidden];
    let mut da_o = vec![0.0; hidden];
    let mut da_g = vec![0.0; hidden];

    for t in (0..caches.len()).rev() {
        let s = &caches[t];
        let mut dc_prev = vec![0.0; hidden];
        for k in 0..hidden {
            let dh = dh_next[k] + grad_h[t][k];
            let tc = s.c[k].tanh();
            let dc = dc_next[k] + dh * s.o[k] * (1.0 - tc * tc);
            let d_o = dh * tc;
            let d_i = dc * s.g[k];
            let d_g = dc * s.i[k];
            let d_f = dc * s.c_prev[k];
            dc_prev[k] = dc * s.f[k];
            da_i[k] = d_i * s.i[k] * (1.0 - s.i[k]);
            da_f[k] = d_f * s.f[k] * (1.0 - s.f[k]);
            da_o[k] = d_o * s.o[k] * (1.0 - s.o[k]);
            da_g[k] = d_g * (1.0 - s.g[k] * s.g[k]);
        }

        grads.w_ix.add_outer(&da_i, &s.x);
        grads.w_fx.add_outer(&da_f, &s.x);
        grads.w_ox.add_outer(&da_o, &s.x);
        grads.w_cx.add_outer(&da_g, &s.x);
        grads.w_ih.add_outer(&da_i, &s.h_prev);
        match grads.w_fh.as_mut() {
            Some(w) => w.add_outer(&da_f, &s.h_prev),
            None => grads.w_ih.add_outer(&da_f, &s.h_prev),
        }
        grads.w_oh.add_outer(&da_o, &s.h_prev);
        grads.w_ch.add_outer(&da_g, &s.h_prev);
        if let Some(b) = grads.bias.as_mut() {
            for k in 0..hidden {
                b.b_i.data_mut()[k] += da_i[k];
                b.b_f.data_mut()[k] += da_f[k];
                b.b_o.data_mut()[k] += da_o[k];
                b.b_c.data_mut()[k] += da_g[k];
            }
        }

        let mut dx = vec![0.0; p.input_dim()];
        p.w_ix.matvec_t_acc(&da_i, &mut dx);
        p.w_fx.matvec_t_acc(&da_f, &mut dx);
        p.w_ox.matvec_t_acc(&da_o, &mut dx);
        p.w_cx.matvec_t_acc(&da_g, &mut dx);
        inputs[t] = dx;

        let mut dh_prev = vec![0.0; hidden];
        p.w_ih.matvec_t_acc(&da_i, &mut dh_prev);
        if tied {
            p.w_ih.matvec_t_acc(&da_f, &mut dh_prev);
        } else {
            p.forget_recurrent().matvec_t_acc(&da_f, &mut dh_prev);
        }
        p.w_oh.matvec_t_acc(&da_o, &mut dh_prev);
        p.w_ch.matvec_t_acc(&da_g, &mut dh_prev);

        dh_next = dh_prev;
        dc_next = dc_prev;
    }

    Ok(LstmGradients {
        params: grads,
        inputs,
        init: LstmState {
            c: dc_next,
            h: dh_next,
        },
    })
}
