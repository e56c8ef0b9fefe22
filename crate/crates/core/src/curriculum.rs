//! Sequence-length warmup, timestamp-based chunking and fixed-duration batch
//! packing.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which reading of the warmup rule to evaluate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmupFormula {
    /// `min(s0 + s0 * 2^floor(r/n), s_max)`; starts at `2 * s0`.
    #[default]
    Literal,
    /// `min(s0 * 2^floor(r/n), s_max)`; starts at `s0`.
    PureDoubling,
}

/// Sequence-length warmup parameters. `r` (recordings consumed) is owned by
/// the training loop and passed to [`seq_len_at`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumSchedule {
    pub s0: f64,
    pub n: usize,
    pub s_max: f64,
    pub formula: WarmupFormula,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        Self {
            s0: 5.0,
            n: 5000,
            s_max: 655.0,
            formula: WarmupFormula::Literal,
        }
    }
}

impl CurriculumSchedule {
    /// A schedule that always returns `seconds`.
    pub fn constant(seconds: f64) -> Self {
        Self {
            s0: seconds,
            n: 1,
            s_max: seconds,
            formula: WarmupFormula::PureDoubling,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s0 > 0.0) || self.n == 0 || !(self.s_max >= self.s0) {
            return Err(Error::Config(format!(
                "curriculum needs s0 > 0, n >= 1 and s_max >= s0 (got s0={}, n={}, s_max={})",
                self.s0, self.n, self.s_max
            )));
        }
        Ok(())
    }
}

/// Sequence length in seconds after `r` recordings.
pub fn seq_len_at(sched: &CurriculumSchedule, r: usize) -> f64 {
    let k = r / sched.n;
    if k >= 1023 {
        return sched.s_max;
    }
    let grown = sched.s0 * 2f64.powi(k as i32);
    let s = match sched.formula {
        WarmupFormula::Literal => sched.s0 + grown,
        WarmupFormula::PureDoubling => grown,
    };
    s.min(sched.s_max)
}

/// One word with start and end times in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimedWord {
    pub w: String,
    pub s: f64,
    pub e: f64,
}

impl TimedWord {
    pub fn new(w: impl Into<String>, s: f64, e: f64) -> Self {
        Self { w: w.into(), s, e }
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.s + self.e)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimedTranscript {
    pub words: Vec<TimedWord>,
}

impl TimedTranscript {
    pub fn new(words: Vec<TimedWord>) -> Self {
        Self { words }
    }

    /// Checks `end >= start` per word and non-decreasing starts.
    pub fn validate(&self) -> Result<()> {
        let mut prev = f64::NEG_INFINITY;
        for (i, w) in self.words.iter().enumerate() {
            if !(w.s.is_finite() && w.e.is_finite()) || w.e < w.s {
                return Err(Error::Data(format!("word {i} ({:?}) ends before it starts", w.w)));
            }
            if w.s < prev {
                return Err(Error::Data(format!(
                    "word {i} ({:?}) starts before the previous word",
                    w.w
                )));
            }
            prev = w.s;
        }
        Ok(())
    }

    pub fn text(&self) -> String {
        self.words.iter().map(|w| w.w.as_str()).collect::<Vec<_>>().join(" ")
    }
}

/// A span of a recording and the words whose midpoints fall inside it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub start_s: f64,
    pub end_s: f64,
    pub words: Vec<String>,
}

impl Chunk {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn text(&self) -> String {
        self.words.join(" ")
    }
}

/// Shortest final chunk kept on its own; shorter tails merge into the previous chunk.
pub const MIN_TAIL_S: f64 = 1.0;

/// Splits `[0, audio_len_s)` into spans of `target_len_s` and assigns each
/// word to the span containing its midpoint.
pub fn chunk_recording(t: &TimedTranscript, audio_len_s: f64, target_len_s: f64) -> Result<Vec<Chunk>> {
    if !(target_len_s > 0.0) {
        return Err(Error::Config(format!(
            "chunk length must be positive, got {target_len_s}"
        )));
    }
    if t.words.is_empty() {
        return Ok(Vec::new());
    }
    let n = ((audio_len_s / target_len_s) - 1e-9).ceil().max(1.0) as usize;
    let mut spans: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            (
                k as f64 * target_len_s,
                ((k + 1) as f64 * target_len_s).min(audio_len_s),
            )
        })
        .collect();
    if spans.len() > 1 {
        let (s, e) = spans[spans.len() - 1];
        if e - s < MIN_TAIL_S {
            spans.pop();
            spans.last_mut().expect("at least one span").1 = e;
        }
    }
    let mut chunks: Vec<Chunk> = spans
        .iter()
        .map(|&(start_s, end_s)| Chunk {
            start_s,
            end_s,
            words: Vec::new(),
        })
        .collect();
    let last = chunks.len() - 1;
    for w in &t.words {
        let k = ((w.midpoint() / target_len_s).floor().max(0.0) as usize).min(last);
        chunks[k].words.push(w.w.clone());
    }
    Ok(chunks)
}

/// Greedy packing in order: a batch closes when the next chunk would push
/// it past `batch_duration_s`.
pub fn pack_batches<T>(items: Vec<T>, duration_s: impl Fn(&T) -> f64, batch_duration_s: f64) -> Result<Vec<Vec<T>>> {
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut filled = 0.0;
    for item in items {
        let d = duration_s(&item);
        if d > batch_duration_s + 1e-9 {
            return Err(Error::Data(format!(
                "chunk of {d} s exceeds the {batch_duration_s} s batch"
            )));
        }
        if !current.is_empty() && filled + d > batch_duration_s + 1e-9 {
            batches.push(std::mem::take(&mut current));
            filled = 0.0;
        }
        filled += d;
        current.push(item);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    Ok(batches)
}

/// Seeded permutation of `0..n`.
pub fn shuffled_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}
