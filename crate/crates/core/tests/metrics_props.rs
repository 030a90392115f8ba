//! Caption metrics against hand evaluations and an independent CIDEr-D.

use proptest::prelude::*;
use vidcap::metrics::{
    align, bleu, cider, cider_per_sample, evaluate, meteor_lite, meteor_lite_sample, rouge_l, rouge_l_sample,
    EvalSample, EvalSet, CIDER_SIGMA,
};
use vidcap::numkit::Rng;
use vidcap::Error;

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn set(pairs: &[(&str, &[&str])]) -> EvalSet {
    EvalSet::from_strings(pairs).unwrap()
}

#[test]
fn bleu_hand_cases() {
    let e = set(&[("a b", &["a b c d"])]);
    assert!((bleu(&e, 2).unwrap() - (-1f64).exp()).abs() < 1e-12);
    assert_eq!(bleu(&set(&[("the cat sat down", &["the cat sat down"])]), 4).unwrap(), 1.0);
    assert_eq!(bleu(&set(&[("x y z w", &["a b c d"])]), 4).unwrap(), 0.0);
}

#[test]
fn rouge_hand_cases() {
    // LCS 3, P = 1, R = 0.6: (1 + β²)PR / (R + β²P).
    let b2 = 1.2f64 * 1.2;
    let want = (1.0 + b2) * 0.6 / (0.6 + b2);
    let got = rouge_l_sample(&toks("a c e"), &[toks("a b c d e")]);
    assert!((got - want).abs() < 1e-12, "{got}");
    assert_eq!(rouge_l_sample(&toks("a b"), &[toks("a b")]), 1.0);
    assert_eq!(rouge_l_sample(&toks("a b"), &[toks("c d")]), 0.0);
}

#[test]
fn meteor_hand_cases() {
    assert!((meteor_lite_sample(&toks("a b c d e"), &[toks("a b c d e")]) - 0.996).abs() < 1e-12);
    assert_eq!(meteor_lite_sample(&toks("b a"), &[toks("a b")]), 0.5);
    assert_eq!(meteor_lite_sample(&toks("a b"), &[toks("c d")]), 0.0);
    let al = align(&toks("a b x a b"), &toks("a b a b"));
    assert_eq!((al.matches, al.chunks), (4, 2));
}

#[test]
fn cider_hand_computed_corpus() {
    // Vocabulary {a, b, c}, two documents, n ≤ 2.
    // df: a 1, b 2, c 2, "a b" 1, "b c" 1, "c c" 1, "c b" 1, so with L = ln 2
    // idf(a) = L, idf(b) = idf(c) = 0 and every bigram has idf L.
    // Sample 1: cand "a b" → {a: L} {ab: L};  ref "a b c" → {a: L} {ab: L, bc: L}
    //   n=1: L²/(L·L) = 1;  n=2: L²/(L·√2L) = 1/√2
    // Sample 2: cand "c c" → {c: 0} {cc: L};  ref "c c b" → {c: 0, b: 0} {cc: L, cb: L}
    //   n=1: zero norm → 0;  n=2: 1/√2
    // Both have length gap 1: damping exp(−1/72).
    let e = set(&[("a b", &["a b c"]), ("c c", &["c c b"])]);
    let damp = (-1.0f64 / 72.0).exp();
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let want = [10.0 * (1.0 + s) / 2.0 * damp, 10.0 * s / 2.0 * damp];
    let got = cider_per_sample(&e, 2, 6.0).unwrap();
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() < 1e-10, "{g} vs {w}");
    }
    assert!((cider(&e, 2, 6.0).unwrap() - (want[0] + want[1]) / 2.0).abs() < 1e-10);
}

/// Straight-line CIDEr-D over vectors of (ngram, weight) pairs.
fn cider_oracle(samples: &[(Vec<String>, Vec<Vec<String>>)], max_n: usize, sigma: f64) -> Vec<f64> {
    let grams = |t: &[String], n: usize| -> Vec<(Vec<String>, f64)> {
        let mut out: Vec<(Vec<String>, f64)> = Vec::new();
        if t.len() >= n {
            for w in t.windows(n) {
                match out.iter_mut().find(|(g, _)| g.as_slice() == w) {
                    Some((_, c)) => *c += 1.0,
                    None => out.push((w.to_vec(), 1.0)),
                }
            }
        }
        out
    };
    let docs = samples.len() as f64;
    let df = |g: &[String]| {
        samples
            .iter()
            .filter(|(_, refs)| refs.iter().any(|r| r.windows(g.len()).any(|w| w == g)))
            .count()
            .max(1) as f64
    };
    let vec_of = |t: &[String], n: usize| -> Vec<(Vec<String>, f64)> {
        grams(t, n).into_iter().map(|(g, c)| {
            let w = c * (docs.ln() - df(&g).ln());
            (g, w)
        }).collect()
    };
    let norm = |v: &[(Vec<String>, f64)]| v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    samples
        .iter()
        .map(|(cand, refs)| {
            let mut total = 0.0;
            for r in refs {
                let delta = cand.len() as f64 - r.len() as f64;
                let damp = (-delta * delta / (2.0 * sigma * sigma)).exp();
                for n in 1..=max_n {
                    let (cv, rv) = (vec_of(cand, n), vec_of(r, n));
                    let mut dot = 0.0;
                    for (g, c) in &cv {
                        if let Some((_, rw)) = rv.iter().find(|(h, _)| h == g) {
                            dot += c.min(*rw) * rw;
                        }
                    }
                    let (nc, nr) = (norm(&cv), norm(&rv));
                    if nc != 0.0 && nr != 0.0 {
                        dot /= nc * nr;
                    }
                    total += damp * dot / max_n as f64;
                }
            }
            10.0 * total / refs.len() as f64
        })
        .collect()
}

fn random_sentence(rng: &mut Rng, alphabet: usize, max_len: usize) -> Vec<String> {
    let len = rng.below(max_len + 1);
    (0..len).map(|_| format!("w{}", rng.below(alphabet))).collect()
}

fn random_set(seed: u64, n: usize) -> Vec<(Vec<String>, Vec<Vec<String>>)> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| {
            let cand = random_sentence(&mut rng, 5, 7);
            let refs = (0..1 + rng.below(3)).map(|_| random_sentence(&mut rng, 5, 8)).collect();
            (cand, refs)
        })
        .collect()
}

fn to_eval(samples: &[(Vec<String>, Vec<Vec<String>>)]) -> EvalSet {
    EvalSet::new(
        samples
            .iter()
            .enumerate()
            .map(|(i, (c, r))| EvalSample {
                id: format!("s{i}"),
                candidate: c.clone(),
                references: r.clone(),
            })
            .collect(),
    )
    .unwrap()
}

#[test]
fn cider_matches_independent_implementation() {
    for seed in 0..30 {
        let samples = random_set(seed, 2 + seed as usize % 5);
        let got = cider_per_sample(&to_eval(&samples), 4, CIDER_SIGMA).unwrap();
        let want = cider_oracle(&samples, 4, CIDER_SIGMA);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-10, "seed {seed}: {g} vs {w}");
        }
    }
}

#[test]
fn cider_guards_and_symmetry() {
    let e = set(&[("a b", &["a b"])]);
    assert!(matches!(cider(&e, 4, 6.0), Err(Error::Protocol(_))));
    let e = set(&[("x y", &["a b c"]), ("z", &["d e"])]);
    assert_eq!(cider(&e, 4, 6.0).unwrap(), 0.0);
    let e = set(&[("a b c", &["a b c"]), ("d e f", &["d e f"])]);
    let s = cider_per_sample(&e, 4, 6.0).unwrap();
    assert_eq!(s[0], s[1]);
}

#[test]
fn empty_reference_list_is_rejected() {
    let s = EvalSample {
        id: "x".into(),
        candidate: toks("a"),
        references: vec![],
    };
    assert!(EvalSet::new(vec![s]).is_err());
}

#[test]
fn metrics_ignore_sample_order() {
    for seed in 0..10 {
        let samples = random_set(100 + seed, 6);
        let mut shuffled = samples.clone();
        Rng::new(seed).shuffle(&mut shuffled);
        let (a, b) = (to_eval(&samples), to_eval(&shuffled));
        assert_eq!(bleu(&a, 4).unwrap(), bleu(&b, 4).unwrap());
        assert!((rouge_l(&a).unwrap() - rouge_l(&b).unwrap()).abs() < 1e-12);
        assert!((meteor_lite(&a).unwrap() - meteor_lite(&b).unwrap()).abs() < 1e-12);
        assert!((cider(&a, 4, 6.0).unwrap() - cider(&b, 4, 6.0).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn duplicate_references_change_nothing_max_based() {
    for seed in 0..10 {
        let samples = random_set(200 + seed, 5);
        let mut doubled = samples.clone();
        for (_, refs) in &mut doubled {
            let first = refs[0].clone();
            refs.push(first);
        }
        let (a, b) = (to_eval(&samples), to_eval(&doubled));
        assert_eq!(bleu(&a, 4).unwrap(), bleu(&b, 4).unwrap());
        assert_eq!(rouge_l(&a).unwrap(), rouge_l(&b).unwrap());
        assert_eq!(meteor_lite(&a).unwrap(), meteor_lite(&b).unwrap());
    }
}

fn words() -> impl Strategy<Value = Vec<String>> {
    proptest::collection::vec(prop_oneof!["a", "b", "c", "d", "e", "f"], 0..9)
}

proptest! {
    #[test]
    fn scores_are_bounded(cand in words(), r1 in words(), r2 in words(), other in words()) {
        let e = EvalSet::new(vec![
            EvalSample { id: "0".into(), candidate: cand.clone(), references: vec![r1.clone(), r2.clone()] },
            EvalSample { id: "1".into(), candidate: other.clone(), references: vec![other.clone()] },
        ]).unwrap();
        let report = evaluate(&e).unwrap();
        for v in [report.bleu4, report.meteor, report.rouge_l] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(report.cider >= 0.0);

        let m = meteor_lite_sample(&cand, &[r1.clone(), r2.clone()]);
        let overlap = cand.iter().any(|w| r1.contains(w) || r2.contains(w));
        prop_assert_eq!(m > 0.0, overlap);
    }

    #[test]
    fn self_reference_is_perfect(cand in proptest::collection::vec(prop_oneof!["a", "b", "c"], 4..10)) {
        let e = EvalSet::new(vec![EvalSample { id: "0".into(), candidate: cand.clone(), references: vec![cand.clone()] }]).unwrap();
        prop_assert_eq!(bleu(&e, 4).unwrap(), 1.0);
        prop_assert_eq!(rouge_l(&e).unwrap(), 1.0);
    }
}
