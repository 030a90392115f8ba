//! In-memory corpora and the line-oriented manifest.
//!
//! Manifest layout (UTF-8, one sample per line, fields separated by tabs):
//!
//! ```text
//! #manifest v1
//! <id> \t <split> \t <feature path> \t <caption> [\t <caption> ...]
//! ```
//!
//! `split` is one of `train`, `val`, `test`. Feature paths are resolved
//! relative to the manifest's directory. Blank lines and other `#` lines are
//! ignored. Ids must be unique and contain no tabs.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{load_features, save_features, tokenize_caption, truncate_pair, Vocabulary, MAX_EACH};
use crate::decoder::Sentence;
use crate::error::{Error, Result};
use crate::numkit::Matrix;

pub const MANIFEST_HEADER: &str = "#manifest v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}` (expected train, val or test)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub split: Split,
    /// T×D frame features, T ≥ 1.
    pub features: Matrix,
    /// Raw caption strings.
    pub captions: Vec<String>,
}

/// One video-caption training pair after the step budget has been applied.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub id: String,
    pub features: Matrix,
    pub sentence: Sentence,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub samples: Vec<VideoSample>,
}

impl Corpus {
    pub fn new(samples: Vec<VideoSample>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &samples {
            if s.id.is_empty() || s.id.contains(['\t', '\n', '/', '\\']) {
                return Err(Error::Schema(format!("invalid sample id `{}`", s.id)));
            }
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Schema(format!("duplicate sample id `{}`", s.id)));
            }
            if s.features.rows() == 0 || s.features.cols() == 0 {
                return Err(Error::Schema(format!("sample `{}` has empty features", s.id)));
            }
        }
        Ok(Corpus { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &VideoSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// Reassigns the last `n_test` samples to test and the `n_val` before
    /// them to val; the rest become train.
    pub fn assign_holdout(&mut self, n_val: usize, n_test: usize) -> Result<()> {
        let n = self.samples.len();
        if n_val + n_test > n {
            return Err(Error::Argument(format!(
                "cannot hold out {n_val}+{n_test} samples from a corpus of {n}"
            )));
        }
        for (i, s) in self.samples.iter_mut().enumerate() {
            s.split = if i >= n - n_test {
                Split::Test
            } else if i >= n - n_test - n_val {
                Split::Val
            } else {
                Split::Train
            };
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.features.cols())
    }

    /// Tokenized captions of one split, for vocabulary construction.
    pub fn tokenized(&self, split: Split) -> Vec<Vec<String>> {
        self.split(split)
            .flat_map(|s| s.captions.iter().map(|c| tokenize_caption(c)))
            .collect()
    }

    /// Every (clip, caption) pair of a split, encoded with `vocab` and cut to
    /// the step budget.
    pub fn pairs(&self, split: Split, vocab: &Vocabulary, max_total: usize) -> Result<Vec<Pair>> {
        let mut out = Vec::new();
        for s in self.split(split) {
            for c in &s.captions {
                let sentence = vocab.encode_sentence(&tokenize_caption(c));
                let words = sentence.content_len().max(1);
                let (frames, words) = truncate_pair(s.features.rows(), words, max_total, MAX_EACH)?;
                if frames == 0 {
                    return Err(Error::Protocol(format!(
                        "sample `{}`: no frames left under a budget of {max_total} steps",
                        s.id
                    )));
                }
                out.push(Pair {
                    id: s.id.clone(),
                    features: s.features.head_rows(frames),
                    sentence: sentence.truncated(words),
                });
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub path: PathBuf,
    pub captions: Vec<String>,
}

pub fn write_manifest(entries: &[ManifestEntry]) -> Result<String> {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for e in entries {
        let path = e.path.to_str().ok_or_else(|| Error::Schema(format!("non-UTF-8 path for `{}`", e.id)))?;
        let fields = std::iter::once(e.id.as_str())
            .chain([e.split.name(), path])
            .chain(e.captions.iter().map(String::as_str));
        let mut line = Vec::new();
        for f in fields {
            if f.contains(['\t', '\n', '\r']) {
                return Err(Error::Schema(format!("field `{f}` of `{}` contains a tab or newline", e.id)));
            }
            line.push(f);
        }
        out.push_str(&line.join("\t"));
        out.push('\n');
    }
    Ok(out)
}

/// Parses manifest text. Errors carry the byte offset of the offending line.
pub fn read_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    let mut offset = 0u64;
    let mut header_seen = false;
    for line in text.split_inclusive('\n') {
        let at = offset;
        offset += line.len() as u64;
        let line = line.trim_end_matches(['\n', '\r']);
        if !header_seen {
            if line != MANIFEST_HEADER {
                return Err(Error::format(at, format!("expected `{MANIFEST_HEADER}` header")));
            }
            header_seen = true;
            continue;
        }
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(Error::format(at, "expected id, split and feature path"));
        }
        let split = fields[1].parse::<Split>().map_err(|e| Error::format(at, e.to_string()))?;
        entries.push(ManifestEntry {
            id: fields[0].to_string(),
            split,
            path: PathBuf::from(fields[2]),
            captions: fields[3..].iter().map(|s| s.to_string()).collect(),
        });
    }
    if !header_seen {
        return Err(Error::format(0, "empty manifest"));
    }
    Ok(entries)
}

/// Reads a manifest and every feature file it names.
pub fn load_corpus(manifest: impl AsRef<Path>) -> Result<Corpus> {
    let manifest = manifest.as_ref();
    let base = manifest.parent().unwrap_or(Path::new("."));
    let entries = read_manifest(&fs::read_to_string(manifest)?)?;
    let mut samples = Vec::with_capacity(entries.len());
    for e in entries {
        let path = base.join(&e.path);
        let features = load_features(&path).map_err(|err| match err {
            Error::Format { offset, message } => {
                Error::Format { offset, message: format!("{}: {message}", path.display()) }
            }
            Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
            other => other,
        })?;
        samples.push(VideoSample {
            id: e.id,
            split: e.split,
            features,
            captions: e.captions,
        });
    }
    Corpus::new(samples)
}

/// Writes `features/<id>.vfm` for every sample and `manifest.tsv` under
/// `dir`, returning the manifest path.
pub fn save_corpus(corpus: &Corpus, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("features"))?;
    let mut entries = Vec::with_capacity(corpus.len());
    for s in &corpus.samples {
        let rel = PathBuf::from("features").join(format!("{}.vfm", s.id));
        save_features(dir.join(&rel), &s.features)?;
        entries.push(ManifestEntry {
            id: s.id.clone(),
            split: s.split,
            path: rel,
            captions: s.captions.clone(),
        });
    }
    let path = dir.join("manifest.tsv");
    fs::write(&path, write_manifest(&entries)?)?;
    Ok(path)
}
