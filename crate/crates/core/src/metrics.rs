//! Caption-quality metrics over tokenized candidates and references:
//! corpus BLEU, ROUGE-L, CIDEr-D and an exact-match-only METEOR.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSample {
    pub id: String,
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

/// Candidate/reference sets. Tokens are content words only.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    samples: Vec<EvalSample>,
}

impl EvalSet {
    pub fn new(samples: Vec<EvalSample>) -> Result<Self> {
        if let Some(s) = samples.iter().find(|s| s.references.is_empty()) {
            return Err(Error::Argument(format!("sample `{}` has no references", s.id)));
        }
        Ok(EvalSet { samples })
    }

    /// Builds a set from whitespace-separated strings, ids numbered from 0.
    pub fn from_strings(pairs: &[(&str, &[&str])]) -> Result<Self> {
        let split = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
        EvalSet::new(
            pairs
                .iter()
                .enumerate()
                .map(|(i, (cand, refs))| EvalSample {
                    id: i.to_string(),
                    candidate: split(cand),
                    references: refs.iter().map(|r| split(r)).collect(),
                })
                .collect(),
        )
    }

    pub fn samples(&self) -> &[EvalSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn require_nonempty(&self, metric: &str) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::Argument(format!("{metric} of an empty evaluation set")));
        }
        Ok(())
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_default() += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and candidate n-gram total for one sample.
fn clipped(candidate: &[String], references: &[Vec<String>], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let mut max_ref: HashMap<&[String], usize> = HashMap::new();
    for r in references {
        for (g, c) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_default();
            *e = (*e).max(c);
        }
    }
    let matched = cand.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

/// Reference length closest to the candidate's; ties go to the shorter one.
fn closest_ref_len(cand_len: usize, references: &[Vec<String>]) -> usize {
    references
        .iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(cand_len), r))
        .unwrap_or(0)
}

fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

/// Corpus BLEU: n-gram counts are pooled over the corpus before the
/// geometric mean of precisions 1..=max_n; brevity penalty from pooled
/// candidate and closest-reference lengths. Unsmoothed.
pub fn bleu(eval: &EvalSet, max_n: usize) -> Result<f64> {
    eval.require_nonempty("BLEU")?;
    if max_n == 0 {
        return Err(Error::Argument("BLEU order must be at least 1".into()));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for s in eval.samples() {
        for n in 1..=max_n {
            let (m, t) = clipped(&s.candidate, &s.references, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
        c += s.candidate.len();
        r += closest_ref_len(s.candidate.len(), &s.references);
    }
    if matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / max_n as f64;
    Ok(brevity_penalty(c, r) * log_p.exp())
}

/// Single-sample BLEU with add-one smoothing on the n ≥ 2 counts, used for
/// per-sample reporting only.
pub fn sentence_bleu(candidate: &[String], references: &[Vec<String>], max_n: usize) -> f64 {
    if candidate.is_empty() || max_n == 0 {
        return 0.0;
    }
    let mut log_p = 0.0;
    for n in 1..=max_n {
        let (m, t) = clipped(candidate, references, n);
        let p = if n == 1 {
            m as f64 / t as f64
        } else {
            (m as f64 + 1.0) / (t as f64 + 1.0)
        };
        if p == 0.0 {
            return 0.0;
        }
        log_p += p.ln();
    }
    let r = closest_ref_len(candidate.len(), references);
    brevity_penalty(candidate.len(), r) * (log_p / max_n as f64).exp()
}

pub const ROUGE_BETA: f64 = 1.2;

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// `F = (1 + β²)·P·R / (R + β²·P)` over the LCS, best reference.
pub fn rouge_l_sample(candidate: &[String], references: &[Vec<String>]) -> f64 {
    let b2 = ROUGE_BETA * ROUGE_BETA;
    references
        .iter()
        .map(|r| {
            let l = lcs_len(candidate, r);
            if l == 0 {
                return 0.0;
            }
            let p = l as f64 / candidate.len() as f64;
            let rec = l as f64 / r.len() as f64;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max)
}

pub fn rouge_l(eval: &EvalSet) -> Result<f64> {
    eval.require_nonempty("ROUGE-L")?;
    let sum: f64 = eval.samples().iter().map(|s| rouge_l_sample(&s.candidate, &s.references)).sum();
    Ok(sum / eval.len() as f64)
}

pub const CIDER_SIGMA: f64 = 6.0;

struct TfIdf<'a> {
    vecs: Vec<HashMap<&'a [String], f64>>,
    norms: Vec<f64>,
    len: usize,
}

fn tfidf<'a>(tokens: &'a [String], max_n: usize, df: &HashMap<&[String], usize>, log_docs: f64) -> TfIdf<'a> {
    let mut vecs = Vec::with_capacity(max_n);
    let mut norms = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let mut v = HashMap::new();
        let mut sq = 0.0;
        for (g, tf) in ngram_counts(tokens, n) {
            let idf = log_docs - (df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
            let w = tf as f64 * idf;
            sq += w * w;
            v.insert(g, w);
        }
        vecs.push(v);
        norms.push(sq.sqrt());
    }
    TfIdf { vecs, norms, len: tokens.len() }
}

/// Per-sample CIDEr-D scores.
///
/// Document frequency counts, for each n-gram, the samples whose reference
/// set contains it; `idf = ln(N) − ln(max(1, df))`. For each order n the
/// candidate and reference tf-idf vectors are compared with a clipped dot
/// product `Σ min(c, r)·r / (‖c‖‖r‖)` and damped by
/// `exp(−(len_c − len_r)² / 2σ²)`. Orders are averaged, references averaged,
/// and the result scaled by 10.
pub fn cider_per_sample(eval: &EvalSet, max_n: usize, sigma: f64) -> Result<Vec<f64>> {
    if eval.len() < 2 {
        return Err(Error::Protocol(format!(
            "CIDEr needs at least 2 samples for document frequencies, got {}",
            eval.len()
        )));
    }
    let mut df: HashMap<&[String], usize> = HashMap::new();
    for s in eval.samples() {
        let mut seen: HashSet<&[String]> = HashSet::new();
        for r in &s.references {
            for n in 1..=max_n {
                seen.extend(ngram_counts(r, n).into_keys());
            }
        }
        for g in seen {
            *df.entry(g).or_default() += 1;
        }
    }
    let log_docs = (eval.len() as f64).ln();
    let mut scores = Vec::with_capacity(eval.len());
    for s in eval.samples() {
        let cand = tfidf(&s.candidate, max_n, &df, log_docs);
        let mut total = 0.0;
        for r in &s.references {
            let refv = tfidf(r, max_n, &df, log_docs);
            let delta = cand.len as f64 - refv.len as f64;
            let damp = (-(delta * delta) / (2.0 * sigma * sigma)).exp();
            let mut per_n = 0.0;
            for n in 0..max_n {
                let mut val: f64 = cand.vecs[n]
                    .iter()
                    .map(|(g, &c)| refv.vecs[n].get(g).map_or(0.0, |&r| c.min(r) * r))
                    .sum();
                if cand.norms[n] != 0.0 && refv.norms[n] != 0.0 {
                    val /= cand.norms[n] * refv.norms[n];
                }
                per_n += val * damp;
            }
            total += per_n / max_n as f64;
        }
        scores.push(10.0 * total / s.references.len() as f64);
    }
    Ok(scores)
}

pub fn cider(eval: &EvalSet, max_n: usize, sigma: f64) -> Result<f64> {
    let scores = cider_per_sample(eval, max_n, sigma)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Matches and chunks of the best exact-match alignment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Alignment {
    pub matches: usize,
    pub chunks: usize,
}

const ALIGN_NODE_BUDGET: usize = 200_000;

/// Aligns identical unigrams one-to-one, first maximizing the number of
/// matches and then minimizing the number of chunks (runs that are
/// contiguous and in order on both sides). Search is exhaustive
/// branch-and-bound, capped at a fixed node budget, after which the best
/// alignment found so far is kept.
pub fn align(candidate: &[String], reference: &[String]) -> Alignment {
    let mut ref_pos: HashMap<&str, Vec<usize>> = HashMap::new();
    for (j, w) in reference.iter().enumerate() {
        ref_pos.entry(w).or_default().push(j);
    }
    let mut cand_count: HashMap<&str, usize> = HashMap::new();
    for w in candidate {
        *cand_count.entry(w).or_default() += 1;
    }
    let mut need: HashMap<&str, usize> = cand_count
        .iter()
        .map(|(w, &c)| (*w, c.min(ref_pos.get(w).map_or(0, Vec::len))))
        .collect();
    let matches: usize = need.values().sum();
    if matches == 0 {
        return Alignment { matches: 0, chunks: 0 };
    }
    // Occurrences of each word at or after position i.
    let mut remaining: Vec<usize> = vec![0; candidate.len()];
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for i in (0..candidate.len()).rev() {
        let c = seen.entry(&candidate[i]).or_default();
        *c += 1;
        remaining[i] = *c;
    }

    struct Search<'a> {
        cand: &'a [String],
        ref_pos: &'a HashMap<&'a str, Vec<usize>>,
        remaining: Vec<usize>,
        used: Vec<bool>,
        best: usize,
        nodes: usize,
    }

    impl<'a> Search<'a> {
        fn go(&mut self, i: usize, prev: Option<usize>, chunks: usize, need: &mut HashMap<&'a str, usize>) {
            self.nodes += 1;
            if chunks >= self.best || self.nodes > ALIGN_NODE_BUDGET {
                return;
            }
            if i == self.cand.len() {
                self.best = chunks;
                return;
            }
            let w: &'a str = &self.cand[i];
            let left = need.get(w).copied().unwrap_or(0);
            if left > 0 {
                let positions = self.ref_pos[w].clone();
                // Extending the current chunk first finds good bounds early.
                let mut order: Vec<usize> = positions.into_iter().filter(|&j| !self.used[j]).collect();
                order.sort_by_key(|&j| (prev.is_none_or(|p| p + 1 != j), j));
                for j in order {
                    let extends = prev.is_some_and(|p| p + 1 == j);
                    self.used[j] = true;
                    *need.get_mut(w).unwrap() -= 1;
                    self.go(i + 1, Some(j), chunks + usize::from(!extends), need);
                    *need.get_mut(w).unwrap() += 1;
                    self.used[j] = false;
                }
            }
            // Skipping is allowed while later occurrences can still fill the quota.
            if self.remaining[i] > left {
                self.go(i + 1, None, chunks, need);
            }
        }
    }

    let mut search = Search {
        cand: candidate,
        ref_pos: &ref_pos,
        remaining,
        used: vec![false; reference.len()],
        best: usize::MAX,
        nodes: 0,
    };
    search.go(0, None, 0, &mut need);
    Alignment { matches, chunks: search.best }
}

/// `F_mean·(1 − 0.5·(chunks/matches)³)` with `F_mean = 10PR / (R + 9P)`,
/// best reference.
pub fn meteor_lite_sample(candidate: &[String], references: &[Vec<String>]) -> f64 {
    references
        .iter()
        .map(|r| {
            let a = align(candidate, r);
            if a.matches == 0 {
                return 0.0;
            }
            let m = a.matches as f64;
            let p = m / candidate.len() as f64;
            let rec = m / r.len() as f64;
            let f_mean = 10.0 * p * rec / (rec + 9.0 * p);
            let frag = a.chunks as f64 / m;
            f_mean * (1.0 - 0.5 * frag.powi(3))
        })
        .fold(0.0, f64::max)
}

pub fn meteor_lite(eval: &EvalSet) -> Result<f64> {
    eval.require_nonempty("METEOR")?;
    let sum: f64 = eval.samples().iter().map(|s| meteor_lite_sample(&s.candidate, &s.references)).sum();
    Ok(sum / eval.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleScores {
    pub id: String,
    pub candidate: String,
    pub bleu4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub bleu4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub samples: Vec<SampleScores>,
}

pub fn evaluate(eval: &EvalSet) -> Result<MetricReport> {
    let cider_scores = cider_per_sample(eval, 4, CIDER_SIGMA)?;
    let samples = eval
        .samples()
        .iter()
        .zip(&cider_scores)
        .map(|(s, &c)| SampleScores {
            id: s.id.clone(),
            candidate: s.candidate.join(" "),
            bleu4: sentence_bleu(&s.candidate, &s.references, 4),
            meteor: meteor_lite_sample(&s.candidate, &s.references),
            rouge_l: rouge_l_sample(&s.candidate, &s.references),
            cider: c,
        })
        .collect();
    Ok(MetricReport {
        bleu4: bleu(eval, 4)?,
        meteor: meteor_lite(eval)?,
        rouge_l: rouge_l(eval)?,
        cider: cider_scores.iter().sum::<f64>() / cider_scores.len() as f64,
        samples,
    })
}

impl MetricReport {
    /// Plain-text report: four `metric<TAB>value` lines, a blank line, then
    /// a tab-separated per-sample table.
    pub fn render(&self) -> String {
        let mut out = String::new();
        writeln!(out, "BLEU-4\t{:.6}", self.bleu4).unwrap();
        writeln!(out, "METEOR-lite\t{:.6}", self.meteor).unwrap();
        writeln!(out, "ROUGE-L\t{:.6}", self.rouge_l).unwrap();
        writeln!(out, "CIDEr-D\t{:.6}", self.cider).unwrap();
        out.push('\n');
        out.push_str("# id\tbleu4\tmeteor\trouge_l\tcider\tcandidate\n");
        for s in &self.samples {
            writeln!(
                out,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
                s.id, s.bleu4, s.meteor, s.rouge_l, s.cider, s.candidate
            )
            .unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn one(c: &str, r: &str) -> EvalSet {
        EvalSet::from_strings(&[(c, &[r])]).unwrap()
    }

    #[test]
    fn bleu_cases() {
        assert_eq!(bleu(&one("a b c d", "a b c d"), 4).unwrap(), 1.0);
        assert_eq!(bleu(&one("x y", "a b"), 4).unwrap(), 0.0);
        let v = bleu(&one("a b", "a b c d"), 2).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-12);
        assert_eq!(bleu(&one("", "a b"), 4).unwrap(), 0.0);
    }

    #[test]
    fn sentence_bleu_smoothing() {
        // p1 = 2/3, p2 = (1+1)/(2+1), c = r = 3.
        let v = sentence_bleu(&toks("a b x"), &[toks("a b c")], 2);
        assert!((v - (2.0f64 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn rouge_closed_form() {
        assert_eq!(rouge_l(&one("a b", "a b")).unwrap(), 1.0);
        assert_eq!(rouge_l(&one("a b", "c d")).unwrap(), 0.0);
        let v = rouge_l(&one("a c e", "a b c d e")).unwrap();
        let expected = (1.0 + 1.44) * 1.0 * 0.6 / (0.6 + 1.44 * 1.0);
        assert!((v - expected).abs() < 1e-12, "{v}");
    }

    #[test]
    fn lcs_basic() {
        assert_eq!(lcs_len(&toks("a b c b d a b"), &toks("b d c a b a")), 4);
        assert_eq!(lcs_len(&[], &toks("a")), 0);
    }

    #[test]
    fn meteor_cases() {
        let v = meteor_lite(&one("a b c d e", "a b c d e")).unwrap();
        assert!((v - 0.996).abs() < 1e-12);
        assert_eq!(meteor_lite(&one("b a", "a b")).unwrap(), 0.5);
        assert_eq!(meteor_lite(&one("x", "a b")).unwrap(), 0.0);
    }

    #[test]
    fn alignment_prefers_fewer_chunks() {
        // Greedy left-to-right would pair the first `a` with ref 0 and split.
        let a = align(&toks("a b a c"), &toks("x a c"));
        assert_eq!(a, Alignment { matches: 2, chunks: 1 });
        let a = align(&toks("the cat the dog"), &toks("the dog the cat"));
        assert_eq!(a, Alignment { matches: 4, chunks: 2 });
    }

    #[test]
    fn cider_guards() {
        assert!(matches!(cider(&one("a", "a"), 4, CIDER_SIGMA), Err(Error::Protocol(_))));
        let set = EvalSet::from_strings(&[("x y", &["a b"]), ("z", &["c d"])]).unwrap();
        assert_eq!(cider(&set, 4, CIDER_SIGMA).unwrap(), 0.0);
        let set = EvalSet::from_strings(&[("a b c", &["a b c"]), ("d e f", &["d e f"])]).unwrap();
        let s = cider_per_sample(&set, 4, CIDER_SIGMA).unwrap();
        assert_eq!(s[0], s[1]);
    }

    #[test]
    fn report_schema() {
        let set = EvalSet::from_strings(&[("a b", &["a b"]), ("c", &["c d"])]).unwrap();
        let text = evaluate(&set).unwrap().render();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4 + 1 + 1 + 2);
        assert!(lines[0].starts_with("BLEU-4\t"));
        assert!(lines[3].starts_with("CIDEr-D\t"));
    }
}
