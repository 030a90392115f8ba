//! Preprocessing, vocabulary, feature files, manifests and the synthetic task.

use proptest::prelude::*;
use vidcap::data::{
    build_vocab, detokenize, dominant_event, gen_synthetic, load_corpus, load_features, read_features,
    sample_frames, save_corpus, save_features, synthetic_words, tokenize_caption, truncate_pair, write_features,
    Corpus, Split, Vocabulary,
};
use vidcap::decoder::UNK;
use vidcap::numkit::{Matrix, Rng};
use vidcap::Error;

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

#[test]
fn tokenizer_examples() {
    assert_eq!(tokenize_caption("A man is Playing."), toks("<BOS> a man is playing <EOS>"));
    assert_eq!(tokenize_caption(""), toks("<BOS> <EOS>"));
    assert_eq!(tokenize_caption("it's  OK!!"), toks("<BOS> it's ok <EOS>"));
}

#[test]
fn vocabulary_examples() {
    let v = build_vocab(&[vec![toks("a b")], vec![toks("b c")]]);
    assert_eq!(v.len(), 7);
    let content: Vec<&str> = v.tokens()[4..].iter().map(String::as_str).collect();
    assert_eq!(content, ["b", "a", "c"]);
    assert_eq!(build_vocab(&[vec![]]).len(), 4);
    assert_eq!(build_vocab(&[vec![toks("x y z")]]), build_vocab(&[vec![toks("x y z")]]));
}

#[test]
fn vocabulary_bijection_and_unknowns() {
    let v = build_vocab(&[vec![toks("the dog runs"), toks("the cat sits down")]]);
    for i in 0..v.len() {
        assert_eq!(v.encode(v.decode(i).unwrap()), i);
    }
    assert_eq!(v.encode("zebra"), UNK);
    assert_eq!(v.decode(v.encode("zebra")), Some("<UNK>"));
    assert_eq!(v.decode(v.len()), None);
    let rebuilt = Vocabulary::from_tokens(v.tokens().to_vec()).unwrap();
    assert_eq!(rebuilt, v);
    let mut dup = v.tokens().to_vec();
    dup.push("dog".into());
    assert!(matches!(Vocabulary::from_tokens(dup), Err(Error::Schema(_))));
}

#[test]
fn frame_sampling() {
    assert_eq!(sample_frames(100, 10).unwrap().len(), 10);
    assert_eq!(sample_frames(285, 10).unwrap().len(), 29);
    assert_eq!(sample_frames(5, 10).unwrap(), [0]);
    assert_eq!(sample_frames(21, 10).unwrap(), [0, 10, 20]);
    assert!(matches!(sample_frames(0, 10), Err(Error::Argument(_))));
}

#[test]
fn truncation_examples() {
    assert_eq!(truncate_pair(50, 35, 80, 40).unwrap(), (45, 35));
    assert_eq!(truncate_pair(30, 20, 80, 40).unwrap(), (30, 20));
    assert_eq!(truncate_pair(60, 50, 80, 40).unwrap(), (40, 40));
    assert!(matches!(truncate_pair(0, 3, 80, 40), Err(Error::Argument(_))));
    assert!(matches!(truncate_pair(3, 0, 80, 40), Err(Error::Argument(_))));
}

proptest! {
    #[test]
    fn truncation_respects_budget(frames in 1usize..500, words in 1usize..500) {
        let (f, w) = truncate_pair(frames, words, 80, 40).unwrap();
        prop_assert!(f + w <= 80 && w <= 40 && f <= frames && w <= words);
        if words <= 40 {
            prop_assert_eq!(w, words);
            prop_assert_eq!(f, frames.min(80 - words));
        } else {
            prop_assert_eq!((f, w), (frames.min(40), 40));
        }
    }

    #[test]
    fn vfm_round_trip_is_bit_exact(t in 1usize..8, d in 1usize..8, seed in any::<u64>()) {
        let m = Rng::new(seed).uniform_matrix(t, d, 100.0).map(|v| v as f32 as f64);
        prop_assert_eq!(read_features(&write_features(&m)).unwrap(), m);
    }
}

#[test]
fn vfm_short_body_is_a_format_error() {
    let m = Matrix::zeros(3, 5);
    let bytes = write_features(&m);
    let two_rows = &bytes[..bytes.len() - 5 * 4];
    assert!(matches!(read_features(two_rows), Err(Error::Format { .. })));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("clip.vfm");
    let wide = Rng::new(3).uniform_matrix(2, 8, 1.0).map(|v| v as f32 as f64);
    save_features(&path, &wide).unwrap();
    assert_eq!(load_features(&path).unwrap(), wide);
}

#[test]
fn corpus_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut corpus = gen_synthetic(1, 9, 5, 6, 4).unwrap();
    corpus.samples[0].captions.push("a second caption?".into());
    corpus.assign_holdout(2, 3).unwrap();
    let manifest = save_corpus(&corpus, dir.path()).unwrap();
    assert_eq!(load_corpus(&manifest).unwrap(), corpus);

    let counts: Vec<usize> = Split::ALL.iter().map(|&s| corpus.split(s).count()).collect();
    assert_eq!(counts, [4, 2, 3]);
}

#[test]
fn duplicate_ids_are_rejected() {
    let mut c = gen_synthetic(2, 2, 4, 4, 2).unwrap();
    c.samples[1].id = c.samples[0].id.clone();
    assert!(Corpus::new(c.samples).is_err());
}

#[test]
fn synthetic_corpus_is_reproducible_and_short() {
    let a = gen_synthetic(4, 20, 8, 8, 8).unwrap();
    assert_eq!(a, gen_synthetic(4, 20, 8, 8, 8).unwrap());
    for s in &a.samples {
        assert!(tokenize_caption(&s.captions[0]).len() - 2 <= 6);
    }
    assert!(gen_synthetic(1, 4, 3, 8, 4).is_err());
    assert!(gen_synthetic(1, 4, 8, 3, 3).is_err());
}

/// Caption implied by a clip's first and last frames.
fn implied_caption(features: &Matrix, k: usize) -> String {
    let (subjects, actions) = synthetic_words(k);
    let first = dominant_event(features.row(0));
    let last = dominant_event(features.row(features.rows() - 1));
    format!("{} {}", subjects[first], actions[last])
}

#[test]
fn second_word_follows_the_last_frame() {
    let k = 8;
    let c = gen_synthetic(5, 40, 8, 8, k).unwrap();
    for s in &c.samples {
        assert_eq!(implied_caption(&s.features, k), s.captions[0]);
    }

    // Rotate the final frames one sample along.
    let n = c.samples.len();
    let mut permuted = c.clone();
    for i in 0..n {
        let src = c.samples[(i + 1) % n].features.row(7).to_vec();
        permuted.samples[i].features.row_mut(7).copy_from_slice(&src);
    }
    let mut changed = 0;
    for (orig, p) in c.samples.iter().zip(&permuted.samples) {
        let relabel = implied_caption(&p.features, k);
        let (w1, w2) = relabel.split_once(' ').unwrap();
        let (o1, o2) = orig.captions[0].split_once(' ').unwrap();
        assert_eq!(w1, o1);
        changed += usize::from(w2 != o2);
    }
    assert!(changed > n / 2, "only {changed} of {n} labels moved");
}

#[test]
fn detokenize_drops_framing() {
    let t = tokenize_caption("Two dogs play-fight!");
    assert_eq!(detokenize(&t), "two dogs play-fight");
    assert_eq!(tokenize_caption(&detokenize(&t)), t);
}
