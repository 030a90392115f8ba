//! Caption preprocessing, vocabulary, frame sampling and the step budget,
//! plus on-disk features, corpus manifests and a synthetic task generator.

mod corpus;
mod synthetic;
mod vfm;

use std::collections::{BTreeMap, HashMap};

pub use corpus::{load_corpus, read_manifest, save_corpus, write_manifest, Corpus, ManifestEntry, Pair, Split, VideoSample};
pub use synthetic::{
    dominant_event, gen_synthetic, synthetic_caption, synthetic_clip, synthetic_words, SyntheticClip,
};
pub use vfm::{load_features, read_features, save_features, write_features, VFM_MAGIC};

use crate::decoder::{Sentence, RESERVED_TOKENS, UNK};
use crate::error::{Error, Result};

pub const BOS_TOKEN: &str = "<BOS>";
pub const EOS_TOKEN: &str = "<EOS>";
pub const UNK_TOKEN: &str = "<UNK>";

pub const FRAME_STRIDE: usize = 10;
pub const MAX_TOTAL_STEPS: usize = 80;
pub const MAX_EACH: usize = 40;

/// Lowercases, keeps letters, digits and apostrophes or hyphens that sit
/// between two alphanumerics, splits on whitespace and wraps the result in
/// `<BOS>`/`<EOS>`.
pub fn tokenize_caption(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut cleaned = String::with_capacity(text.len());
    for (i, &c) in chars.iter().enumerate() {
        if c.is_alphanumeric() {
            cleaned.extend(c.to_lowercase());
        } else if c == '\'' || c == '-' {
            let inner = i > 0
                && chars[i - 1].is_alphanumeric()
                && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
            if inner {
                cleaned.push(c);
            }
        } else if c.is_whitespace() {
            cleaned.push(' ');
        }
    }
    let mut out = vec![BOS_TOKEN.to_string()];
    out.extend(cleaned.split_whitespace().map(str::to_string));
    out.push(EOS_TOKEN.to_string());
    out
}

/// Joins the content tokens with single spaces.
pub fn detokenize(tokens: &[String]) -> String {
    tokens
        .iter()
        .filter(|t| !RESERVED_TOKENS.contains(&t.as_str()) || t.as_str() == UNK_TOKEN)
        .cloned()
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Rebuilds a vocabulary from its ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED_TOKENS.len() || tokens[..RESERVED_TOKENS.len()] != RESERVED_TOKENS {
            return Err(Error::Schema(format!(
                "vocabulary must start with the reserved tokens {RESERVED_TOKENS:?}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Schema(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Unknown tokens map to `<UNK>`.
    pub fn encode(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn decode(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    /// Encodes a tokenized caption. `<BOS>`/`<EOS>` markers are dropped and
    /// re-added, so framed and bare token lists give the same sentence.
    pub fn encode_sentence(&self, tokens: &[String]) -> Sentence {
        let content: Vec<usize> = tokens
            .iter()
            .filter(|t| t.as_str() != BOS_TOKEN && t.as_str() != EOS_TOKEN)
            .map(|t| self.encode(t))
            .collect();
        Sentence::from_content(&content).expect("encode never yields reserved framing tokens")
    }

    /// Content words of a sentence, unknown indices rendered as `<UNK>`.
    pub fn decode_content(&self, sentence: &Sentence) -> Vec<String> {
        sentence
            .content()
            .iter()
            .map(|&i| self.decode(i).unwrap_or(UNK_TOKEN).to_string())
            .collect()
    }
}

/// Vocabulary over the union of all corpora, ordered by descending count with
/// ties broken lexicographically, after the four reserved tokens.
pub fn build_vocab(corpora: &[Vec<Vec<String>>]) -> Vocabulary {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for sentence in corpora.iter().flatten() {
        for tok in sentence {
            if !RESERVED_TOKENS.contains(&tok.as_str()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(ranked.into_iter().map(|(t, _)| t.to_string()));
    Vocabulary::from_tokens(tokens).expect("reserved prefix and unique tokens by construction")
}

/// Frame indices `0, stride, 2·stride, ... < total_frames`.
pub fn sample_frames(total_frames: usize, stride: usize) -> Result<Vec<usize>> {
    if total_frames == 0 {
        return Err(Error::Argument("cannot sample from a clip with no frames".into()));
    }
    if stride == 0 {
        return Err(Error::Argument("frame stride must be positive".into()));
    }
    Ok((0..total_frames).step_by(stride).collect())
}

/// Adaptive budget: with at most `max_each` words the frames are cut to fit
/// `max_total`; otherwise both sides are capped at `max_each`. Frames are
/// always cut from the tail.
pub fn truncate_pair(frames: usize, words: usize, max_total: usize, max_each: usize) -> Result<(usize, usize)> {
    if frames == 0 || words == 0 {
        return Err(Error::Argument(format!(
            "truncate_pair needs positive counts, got frames={frames} words={words}"
        )));
    }
    if words <= max_each {
        Ok((frames.min(max_total.saturating_sub(words)), words))
    } else {
        Ok((frames.min(max_each), max_each))
    }
}
