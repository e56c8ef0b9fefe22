//! Synthetic corpora for end-to-end checks.
//!
//! * Tone corpus: each letter is a pure tone, so a small model can overfit it.
//! * Cue corpus: a cue tone (`x` or `y`) opens the recording; 30–60 s later a
//!   neutral tone appears whose label (`p` after `x`, `q` after `y`) can only be
//!   resolved by a model that sees the cue.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::curriculum::{TimedTranscript, TimedWord};
use crate::dsp::{AudioBuffer, SAMPLE_RATE};
use crate::error::Result;

pub const LETTER_S: f64 = 0.24;
pub const LETTER_GAP_S: f64 = 0.08;
pub const WORD_GAP_S: f64 = 0.32;
pub const EDGE_S: f64 = 0.16;
const AMPLITUDE: f64 = 0.3;
const NOISE: f64 = 0.003;
const FADE_S: f64 = 0.01;

/// A labelled in-memory recording.
pub type Sample = (String, AudioBuffer, TimedTranscript);

fn samples(seconds: f64) -> usize {
    (seconds * SAMPLE_RATE as f64).round() as usize
}

/// Low-level background noise, so silent stretches are not at the log floor.
fn noise_bed(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-NOISE..NOISE)).collect()
}

/// Adds a faded sine of `dur` seconds starting at `start` seconds.
fn add_tone(buf: &mut [f64], start: f64, dur: f64, freq: f64) {
    let (s0, n) = (samples(start), samples(dur));
    let fade = samples(FADE_S).max(1);
    for i in 0..n.min(buf.len().saturating_sub(s0)) {
        let env = (i.min(n - 1 - i) as f64 / fade as f64).min(1.0);
        let t = i as f64 / SAMPLE_RATE as f64;
        buf[s0 + i] += AMPLITUDE * env * (2.0 * PI * freq * t).sin();
    }
}

/// Tone frequency of the `i`-th letter of the alphabet in use.
pub fn letter_freq(i: usize) -> f64 {
    250.0 * 1.2f64.powi(i as i32)
}

#[derive(Clone, Debug)]
pub struct ToneCorpusOptions {
    pub n_utterances: usize,
    pub letters: String,
    pub words_per_utterance: (usize, usize),
    pub letters_per_word: (usize, usize),
    pub seed: u64,
}

impl Default for ToneCorpusOptions {
    fn default() -> Self {
        Self {
            n_utterances: 50,
            letters: "abcdefghij".into(),
            words_per_utterance: (1, 2),
            letters_per_word: (2, 3),
            seed: 7,
        }
    }
}

/// Renders `words` (letters from `alphabet`) with fixed letter and gap timing.
pub fn render_words(words: &[String], alphabet: &str, rng: &mut ChaCha8Rng) -> (AudioBuffer, TimedTranscript) {
    let letters: Vec<char> = alphabet.chars().collect();
    let mut timed = Vec::new();
    let mut t = EDGE_S;
    let mut tones = Vec::new();
    for (wi, word) in words.iter().enumerate() {
        if wi > 0 {
            t += WORD_GAP_S - LETTER_GAP_S;
        }
        let start = t;
        for c in word.chars() {
            let idx = letters.iter().position(|&l| l == c).expect("letter in alphabet");
            tones.push((t, letter_freq(idx)));
            t += LETTER_S + LETTER_GAP_S;
        }
        timed.push(TimedWord::new(word.clone(), start, t - LETTER_GAP_S));
    }
    let total = t - LETTER_GAP_S + EDGE_S;
    let mut buf = noise_bed(samples(total), rng);
    for (start, f) in tones {
        add_tone(&mut buf, start, LETTER_S, f);
    }
    (
        AudioBuffer::new(buf, SAMPLE_RATE).expect("non-empty audio"),
        TimedTranscript::new(timed),
    )
}

fn random_word(letters: &[char], len: usize, rng: &mut ChaCha8Rng) -> String {
    let mut w = String::new();
    let mut prev = None;
    while w.chars().count() < len {
        let c = letters[rng.random_range(0..letters.len())];
        if Some(c) != prev {
            w.push(c);
            prev = Some(c);
        }
    }
    w
}

/// Utterances of random letter words; adjacent letters never repeat.
pub fn tone_corpus(opts: &ToneCorpusOptions) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let letters: Vec<char> = opts.letters.chars().collect();
    (0..opts.n_utterances)
        .map(|i| {
            let n_words = rng.random_range(opts.words_per_utterance.0..=opts.words_per_utterance.1);
            let words: Vec<String> = (0..n_words)
                .map(|_| {
                    let len = rng.random_range(opts.letters_per_word.0..=opts.letters_per_word.1);
                    random_word(&letters, len, &mut rng)
                })
                .collect();
            let (audio, t) = render_words(&words, &opts.letters, &mut rng);
            (format!("tone-{i:03}"), audio, t)
        })
        .collect()
}

/// Joins recordings back to back, shifting word times.
pub fn concatenate(parts: &[Sample], id: &str) -> Result<Sample> {
    let mut audio = Vec::new();
    let mut words = Vec::new();
    for (_, a, t) in parts {
        let offset = audio.len() as f64 / SAMPLE_RATE as f64;
        words.extend(
            t.words
                .iter()
                .map(|w| TimedWord::new(w.w.clone(), w.s + offset, w.e + offset)),
        );
        audio.extend_from_slice(a.samples());
    }
    Ok((
        id.to_string(),
        AudioBuffer::new(audio, SAMPLE_RATE)?,
        TimedTranscript::new(words),
    ))
}

pub const CUE_X_HZ: f64 = 1800.0;
pub const CUE_Y_HZ: f64 = 2600.0;
pub const NEUTRAL_HZ: f64 = 700.0;

#[derive(Clone, Debug)]
pub struct CueCorpusOptions {
    pub n_recordings: usize,
    /// Range of the cue-to-target delay in seconds.
    pub delay_s: (f64, f64),
    pub tone_s: f64,
    /// Range of the silence before the cue and after the target, so neither
    /// tone sits at a fixed distance from the recording edges.
    pub margin_s: (f64, f64),
    pub seed: u64,
}

impl Default for CueCorpusOptions {
    fn default() -> Self {
        Self {
            n_recordings: 24,
            delay_s: (30.0, 60.0),
            tone_s: 0.4,
            margin_s: (0.5, 8.0),
            seed: 11,
        }
    }
}

/// Recordings whose second word depends on a cue far in the past. Cue
/// labels alternate so the corpus is balanced.
pub fn cue_corpus(opts: &CueCorpusOptions) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    (0..opts.n_recordings)
        .map(|i| {
            let x = i % 2 == 0;
            let cue_start = rng.random_range(opts.margin_s.0..=opts.margin_s.1);
            let delay = rng.random_range(opts.delay_s.0..=opts.delay_s.1);
            let target_start = cue_start + delay;
            let total = target_start + opts.tone_s + rng.random_range(opts.margin_s.0..=opts.margin_s.1);
            let mut buf = noise_bed(samples(total), &mut rng);
            add_tone(&mut buf, cue_start, opts.tone_s, if x { CUE_X_HZ } else { CUE_Y_HZ });
            add_tone(&mut buf, target_start, opts.tone_s, NEUTRAL_HZ);
            let words = vec![
                TimedWord::new(if x { "x" } else { "y" }, cue_start, cue_start + opts.tone_s),
                TimedWord::new(if x { "p" } else { "q" }, target_start, target_start + opts.tone_s),
            ];
            (
                format!("cue-{i:03}"),
                AudioBuffer::new(buf, SAMPLE_RATE).expect("non-empty audio"),
                TimedTranscript::new(words),
            )
        })
        .collect()
}
