//! LSTM cell: finite-difference and hand-derived gradient oracles plus
//! structural properties of the recurrence.

mod common;

use common::*;
use proptest::prelude::*;
use vidcap::lstm::{lstm_backward_seq, lstm_forward_seq, lstm_step, LstmOptions, LstmParams, LstmState};
use vidcap::numkit::{grad_check, Matrix, Rng};
use vidcap::params::Parameters;

fn random_params(rng: &mut Rng, input: usize, hidden: usize, opts: LstmOptions, scale: f64) -> LstmParams {
    let mut p = LstmParams::zeros(input, hidden, opts);
    p.visit_mut("", &mut |_, m| *m = rng.uniform_matrix(m.rows(), m.cols(), scale));
    p
}

/// Objective: fixed random linear read-out of every h_t plus the final (c, h).
struct Probe {
    per_step: Vec<Vec<f64>>,
    final_c: Vec<f64>,
    final_h: Vec<f64>,
}

impl Probe {
    fn new(rng: &mut Rng, t: usize, hidden: usize) -> Self {
        Probe {
            per_step: random_rows(rng, t, hidden, 1.0),
            final_c: random_rows(rng, 1, hidden, 1.0).remove(0),
            final_h: random_rows(rng, 1, hidden, 1.0).remove(0),
        }
    }

    fn value(&self, p: &LstmParams, xs: &[Vec<f64>], init: &LstmState) -> f64 {
        let (states, _) = lstm_forward_seq(p, xs, init).unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let last = states.last().unwrap();
        states.iter().zip(&self.per_step).map(|(s, w)| dot(&s.h, w)).sum::<f64>()
            + dot(&last.c, &self.final_c)
            + dot(&last.h, &self.final_h)
    }
}

/// Checks parameter, input and initial-state gradients; returns the worst error.
fn check_config(seed: u64, input: usize, hidden: usize, t: usize, opts: LstmOptions) -> f64 {
    let mut rng = Rng::new(seed);
    let p = random_params(&mut rng, input, hidden, opts, 1.0);
    let xs = random_rows(&mut rng, t, input, 1.0);
    let init = LstmState {
        c: random_rows(&mut rng, 1, hidden, 1.0).remove(0),
        h: random_rows(&mut rng, 1, hidden, 0.9).remove(0),
    };
    let probe = Probe::new(&mut rng, t, hidden);

    let (_, caches) = lstm_forward_seq(&p, &xs, &init).unwrap();
    let grads = lstm_backward_seq(
        &p,
        &caches,
        &probe.per_step,
        &LstmState {
            c: probe.final_c.clone(),
            h: probe.final_h.clone(),
        },
    )
    .unwrap();

    let report = grad_check(
        |set| {
            let mut q = LstmParams::zeros(input, hidden, opts);
            q.load_param_set(set).unwrap();
            probe.value(&q, &xs, &init)
        },
        &p.to_param_set(),
        &grads.params.to_param_set(),
        EPS,
    )
    .unwrap();
    let mut worst = report.max_rel_error();

    let flat: Vec<f64> = xs.concat();
    let num_x = numeric_grad(
        |v| {
            let rows: Vec<Vec<f64>> = v.chunks(input).map(<[f64]>::to_vec).collect();
            probe.value(&p, &rows, &init)
        },
        &flat,
        EPS,
    );
    worst = worst.max(rel_err(&grads.inputs.concat(), &num_x));

    let state_flat: Vec<f64> = init.c.iter().chain(&init.h).copied().collect();
    let num_init = numeric_grad(
        |v| {
            let s = LstmState {
                c: v[..hidden].to_vec(),
                h: v[hidden..].to_vec(),
            };
            probe.value(&p, &xs, &s)
        },
        &state_flat,
        EPS,
    );
    let ana_init: Vec<f64> = grads.init.c.iter().chain(&grads.init.h).copied().collect();
    worst.max(rel_err(&ana_init, &num_init))
}

#[test]
fn bptt_matches_finite_differences_on_100_random_configs() {
    let mut rng = Rng::new(2024);
    let mut worst = 0.0f64;
    for k in 0..100 {
        let hidden = 1 + rng.below(5);
        let input = 1 + rng.below(5);
        let t = 1 + rng.below(6);
        let err = check_config(1000 + k, input, hidden, t, LstmOptions::default());
        assert!(err <= TOL, "config {k} (in={input}, h={hidden}, T={t}): {err:e}");
        worst = worst.max(err);
    }
    println!("worst relative error over 100 configs: {worst:.3e}");
}

#[test]
fn three_step_hidden4_input3() {
    assert!(check_config(7, 3, 4, 3, LstmOptions::default()) <= TOL);
}

#[test]
fn optional_bias_and_tied_forget_gradients() {
    for (seed, bias, tied_forget) in [(1, true, false), (2, false, true), (3, true, true)] {
        let err = check_config(seed, 3, 4, 4, LstmOptions { bias, tied_forget });
        assert!(err <= TOL, "bias={bias} tied={tied_forget}: {err:e}");
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[test]
fn scalar_single_step_matches_hand_derivation() {
    // hidden = input = 1, objective L = h_1.
    let (a_i, b_i, a_f, b_f, a_o, b_o, a_c, b_c) = (0.3, -0.7, 0.9, 0.2, -0.4, 0.6, 1.1, -0.5);
    let (x, h0, c0) = (0.8, -0.35, 0.45);
    let s = |v: f64| Matrix::from_rows(&[[v]]).unwrap();
    let p = LstmParams {
        w_ix: s(a_i),
        w_ih: s(b_i),
        w_fx: s(a_f),
        w_fh: Some(s(b_f)),
        w_ox: s(a_o),
        w_oh: s(b_o),
        w_cx: s(a_c),
        w_ch: s(b_c),
        bias: None,
    };

    let i = sigmoid(a_i * x + b_i * h0);
    let f = sigmoid(a_f * x + b_f * h0);
    let o = sigmoid(a_o * x + b_o * h0);
    let g = (a_c * x + b_c * h0).tanh();
    let c = f * c0 + i * g;
    let h = o * c.tanh();

    let init = LstmState { c: vec![c0], h: vec![h0] };
    let (state, cache) = lstm_step(&p, &[x], &init).unwrap();
    assert!((state.h[0] - h).abs() < 1e-15 && (state.c[0] - c).abs() < 1e-15);

    let dc = o * (1.0 - c.tanh().powi(2));
    let d_o = c.tanh() * o * (1.0 - o);
    let d_i = dc * g * i * (1.0 - i);
    let d_f = dc * c0 * f * (1.0 - f);
    let d_g = dc * i * (1.0 - g * g);
    let expected = [
        ("w_ix", d_i * x),
        ("w_ih", d_i * h0),
        ("w_fx", d_f * x),
        ("w_fh", d_f * h0),
        ("w_ox", d_o * x),
        ("w_oh", d_o * h0),
        ("w_cx", d_g * x),
        ("w_ch", d_g * h0),
    ];
    let grads = lstm_backward_seq(&p, &[cache], &[vec![1.0]], &LstmState::zeros(1)).unwrap();
    let set = grads.params.to_param_set();
    for (name, v) in expected {
        assert!((set[name].get(0, 0) - v).abs() < 1e-14, "{name}: {} vs {v}", set[name].get(0, 0));
    }
    let dx = d_i * a_i + d_f * a_f + d_o * a_o + d_g * a_c;
    let dh0 = d_i * b_i + d_f * b_f + d_o * b_o + d_g * b_c;
    assert!((grads.inputs[0][0] - dx).abs() < 1e-14);
    assert!((grads.init.h[0] - dh0).abs() < 1e-14);
    assert!((grads.init.c[0] - dc * f).abs() < 1e-14);
}

#[test]
fn split_run_equals_full_run() {
    let mut rng = Rng::new(5);
    let p = random_params(&mut rng, 3, 4, LstmOptions::default(), 0.5);
    let xs = random_rows(&mut rng, 5, 3, 1.0);
    let init = LstmState::zeros(4);
    let (full, _) = lstm_forward_seq(&p, &xs, &init).unwrap();
    let (head, _) = lstm_forward_seq(&p, &xs[..3], &init).unwrap();
    let (tail, _) = lstm_forward_seq(&p, &xs[3..], head.last().unwrap()).unwrap();
    let joined: Vec<LstmState> = head.into_iter().chain(tail).collect();
    assert_eq!(joined, full);

    let (one, _) = lstm_forward_seq(&p, &xs[..1], &init).unwrap();
    assert_eq!(one[0], lstm_step(&p, &xs[0], &init).unwrap().0);
}

#[test]
fn identical_inputs_are_bitwise_deterministic() {
    let mut rng = Rng::new(6);
    let p = random_params(&mut rng, 2, 3, LstmOptions::default(), 1.0);
    let xs = random_rows(&mut rng, 6, 2, 1.0);
    let a = lstm_forward_seq(&p, &xs, &LstmState::zeros(3)).unwrap();
    let b = lstm_forward_seq(&p, &xs, &LstmState::zeros(3)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn saturated_gates_make_the_cell_additive() {
    // Constant first input channel drives f and o to 1 in f64.
    let mut rng = Rng::new(8);
    let hidden = 3;
    let mut p = random_params(&mut rng, 2, hidden, LstmOptions::default(), 0.8);
    p.w_fx = Matrix::from_rows(&vec![[60.0, 0.0]; hidden]).unwrap();
    p.w_ox = p.w_fx.clone();
    p.w_fh = Some(Matrix::zeros(hidden, hidden));
    p.w_oh = Matrix::zeros(hidden, hidden);
    let xs: Vec<Vec<f64>> = (0..7).map(|_| vec![1.0, rng.uniform(1.0)]).collect();
    let init = LstmState {
        c: vec![0.3, -0.2, 0.1],
        h: vec![0.1, 0.2, -0.3],
    };
    let (states, caches) = lstm_forward_seq(&p, &xs, &init).unwrap();
    for k in 0..hidden {
        let added: f64 = caches.iter().map(|c| c.i[k] * c.g[k]).sum();
        assert!((states.last().unwrap().c[k] - (init.c[k] + added)).abs() < 1e-6);
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let mut rng = Rng::new(9);
    let p = random_params(&mut rng, 2, 3, LstmOptions::default(), 1.0);
    let xs = random_rows(&mut rng, 4, 2, 1.0);
    let (_, caches) = lstm_forward_seq(&p, &xs, &LstmState::zeros(3)).unwrap();
    let g = lstm_backward_seq(&p, &caches, &vec![vec![0.0; 3]; 4], &LstmState::zeros(3)).unwrap();
    g.params.visit("", &mut |name, m| assert_eq!(m.max_abs(), 0.0, "{name}"));
    assert!(g.inputs.iter().flatten().all(|&v| v == 0.0));
}

proptest! {
    #[test]
    fn gates_and_outputs_stay_in_range(
        seed in any::<u64>(),
        hidden in 1usize..6,
        input in 1usize..6,
        t in 1usize..7,
    ) {
        let mut rng = Rng::new(seed);
        let p = random_params(&mut rng, input, hidden, LstmOptions::default(), 1.0);
        let xs = random_rows(&mut rng, t, input, 1.0);
        let (states, caches) = lstm_forward_seq(&p, &xs, &LstmState::zeros(hidden)).unwrap();
        for c in &caches {
            for v in c.i.iter().chain(&c.f).chain(&c.o) {
                prop_assert!(*v > 0.0 && *v < 1.0);
            }
            prop_assert!(c.g.iter().all(|v| v.abs() < 1.0));
        }
        for s in &states {
            prop_assert!(s.c.iter().all(|v| v.is_finite()));
            prop_assert!(s.h.iter().all(|v| v.abs() < 1.0));
        }
    }
}
