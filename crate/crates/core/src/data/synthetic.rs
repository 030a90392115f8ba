//! Desk-scale synthetic captioning task.
//!
//! Every clip is a sequence of T latent events drawn uniformly from K
//! classes. Frame t carries a 1.0 on channel `e_t` plus uniform noise in
//! [-0.1, 0.1] on every channel, stored at `f32` precision. The caption has
//! two content words: a subject named by the first event and an action named
//! by the last one, e.g. `dog jumping`. The second word is therefore fixed by
//! the final frame alone.

use super::corpus::{Corpus, Split, VideoSample};
use crate::error::{Error, Result};
use crate::numkit::{argmax, Matrix, Rng};

const SUBJECTS: [&str; 8] = ["man", "woman", "dog", "cat", "boy", "girl", "bird", "horse"];
const ACTIONS: [&str; 8] = ["running", "jumping", "cooking", "swimming", "singing", "dancing", "eating", "riding"];
const NOISE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    pub events: Vec<usize>,
    pub features: Matrix,
    pub caption: String,
}

/// Subject and action word lists for `k` event classes.
pub fn synthetic_words(k: usize) -> (Vec<String>, Vec<String>) {
    let name = |list: &[&str], stem: &str, i: usize| list.get(i).map_or_else(|| format!("{stem}{i}"), |w| w.to_string());
    (
        (0..k).map(|i| name(&SUBJECTS, "subject", i)).collect(),
        (0..k).map(|i| name(&ACTIONS, "action", i)).collect(),
    )
}

pub fn synthetic_caption(first: usize, last: usize, k: usize) -> String {
    let (subjects, actions) = synthetic_words(k);
    format!("{} {}", subjects[first], actions[last])
}

/// Event class of a frame: its dominant channel.
pub fn dominant_event(frame: &[f64]) -> usize {
    argmax(frame)
}

pub fn synthetic_clip(rng: &mut Rng, frames: usize, dim: usize, k: usize) -> SyntheticClip {
    let events: Vec<usize> = (0..frames).map(|_| rng.below(k)).collect();
    let mut features = Matrix::zeros(frames, dim);
    for (t, &e) in events.iter().enumerate() {
        for (c, v) in features.row_mut(t).iter_mut().enumerate() {
            let signal = if c == e { 1.0 } else { 0.0 };
            *v = (signal + rng.uniform(NOISE)) as f32 as f64;
        }
    }
    let caption = synthetic_caption(events[0], events[frames - 1], k);
    SyntheticClip { events, features, caption }
}

/// `n_samples` clips of `frames`×`dim` features over `vocab` event classes,
/// all assigned to the train split.
pub fn gen_synthetic(seed: u64, n_samples: usize, frames: usize, dim: usize, vocab: usize) -> Result<Corpus> {
    if frames < 4 || dim < 4 {
        return Err(Error::Argument(format!("synthetic clips need T >= 4 and D >= 4, got T={frames} D={dim}")));
    }
    if n_samples == 0 {
        return Err(Error::Argument("synthetic corpus needs at least one sample".into()));
    }
    if vocab < 2 || vocab > dim {
        return Err(Error::Argument(format!("event classes must lie in 2..={dim}, got {vocab}")));
    }
    let mut rng = Rng::new(seed);
    let samples = (0..n_samples)
        .map(|i| {
            let clip = synthetic_clip(&mut rng, frames, dim, vocab);
            VideoSample {
                id: format!("syn{i:05}"),
                split: Split::Train,
                features: clip.features,
                captions: vec![clip.caption],
            }
        })
        .collect();
    Corpus::new(samples)
}
