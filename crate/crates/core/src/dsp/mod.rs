//! Audio front end: log-mel features, per-recording normalization, segment
//! masking and calibrated noise mixing.
//!
//! All functions are pure over their inputs.

mod melfile;
mod wav;

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use melfile::{read_mel, write_mel};
pub use wav::{read_wav, write_wav};

pub const SAMPLE_RATE: u32 = 16_000;
pub const WIN_LENGTH: usize = 400;
pub const HOP_LENGTH: usize = 160;
pub const N_MELS: usize = 80;
pub const N_FFT: usize = 512;
pub const LOG_FLOOR: f64 = 1e-10;
pub const STD_FLOOR: f64 = 1e-8;
/// Mel frames per second of audio.
pub const FRAMES_PER_SECOND: f64 = SAMPLE_RATE as f64 / HOP_LENGTH as f64;
/// Upper cap on SNR; larger requests are clamped.
pub const MAX_SNR_DB: f64 = 120.0;

/// Mono audio samples at a fixed rate.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InputTooShort { samples: 0, needed: 1 });
        }
        if sample_rate == 0 {
            return Err(Error::UnsupportedSampleRate(0));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }
}

/// `T × 80` log-mel matrix plus frame geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    frames: Tensor,
    pub hop: usize,
    pub win: usize,
    pub sample_rate: u32,
}

impl MelSpectrogram {
    /// Wraps a `[T, 80]` matrix with the standard 400/160 geometry.
    pub fn from_frames(frames: Tensor) -> Result<Self> {
        if frames.shape().len() != 2 || frames.shape()[1] != N_MELS {
            return Err(Error::shape("MelSpectrogram", frames.shape(), &[0, N_MELS]));
        }
        if !frames.is_finite() {
            return Err(Error::NonFinite("MelSpectrogram"));
        }
        Ok(Self {
            frames,
            hop: HOP_LENGTH,
            win: WIN_LENGTH,
            sample_rate: SAMPLE_RATE,
        })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn into_frames(self) -> Tensor {
        self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    /// Frames `[start, end)` as a new spectrogram.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        Ok(Self {
            frames: self.frames.slice_rows(start, end)?,
            ..self.clone()
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.num_frames() as f64 * self.hop as f64 / self.sample_rate as f64
    }
}

/// Sorted, non-overlapping half-open frame spans.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SegmentMask {
    spans: Vec<(usize, usize)>,
}

impl SegmentMask {
    pub fn new(spans: Vec<(usize, usize)>) -> Result<Self> {
        let mut prev_end = 0;
        for (i, &(s, e)) in spans.iter().enumerate() {
            if s >= e || (i > 0 && s < prev_end) {
                return Err(Error::Data(format!(
                    "mask spans must be sorted, non-empty and disjoint: {spans:?}"
                )));
            }
            prev_end = e;
        }
        Ok(Self { spans })
    }

    pub fn spans(&self) -> &[(usize, usize)] {
        &self.spans
    }
}

/// `1 + floor((n - 400) / 160)` for `n >= 400`, else 0.
pub fn num_frames(num_samples: usize) -> usize {
    if num_samples < WIN_LENGTH {
        0
    } else {
        1 + (num_samples - WIN_LENGTH) / HOP_LENGTH
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// 80 triangular filters equally spaced on the mel scale over 0–8000 Hz.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `[N_MELS][N_FFT/2 + 1]` weights, peak 1.
    weights: Vec<Vec<f64>>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new() -> Self {
        let n_bins = N_FFT / 2 + 1;
        let top = hz_to_mel(SAMPLE_RATE as f64 / 2.0);
        let edges: Vec<f64> = (0..N_MELS + 2)
            .map(|i| mel_to_hz(top * i as f64 / (N_MELS + 1) as f64))
            .collect();
        let bin_hz = |k: usize| k as f64 * SAMPLE_RATE as f64 / N_FFT as f64;
        let weights = (0..N_MELS)
            .map(|m| {
                let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..n_bins)
                    .map(|k| {
                        let f = bin_hz(k);
                        if f <= lo || f >= hi {
                            0.0
                        } else if f <= c {
                            (f - lo) / (c - lo)
                        } else {
                            (hi - f) / (hi - c)
                        }
                    })
                    .collect()
            })
            .collect();
        Self {
            weights,
            centers_hz: edges[1..=N_MELS].to_vec(),
        }
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }
}

impl Default for MelFilterbank {
    fn default() -> Self {
        Self::new()
    }
}

/// Periodic Hann window of length `n`.
fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Log-mel spectrogram: Hann-windowed 400-sample frames every 160 samples,
/// no padding (the partial tail is dropped), `ln(mel_power + 1e-10)`.
pub fn compute_log_mel(audio: &AudioBuffer) -> Result<MelSpectrogram> {
    if audio.sample_rate() != SAMPLE_RATE {
        return Err(Error::UnsupportedSampleRate(audio.sample_rate()));
    }
    if audio.len() < WIN_LENGTH {
        return Err(Error::InputTooShort {
            samples: audio.len(),
            needed: WIN_LENGTH,
        });
    }
    let t = num_frames(audio.len());
    let bank = MelFilterbank::new();
    let window = hann(WIN_LENGTH);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(N_FFT);
    let n_bins = N_FFT / 2 + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut power = vec![0.0; n_bins];
    let mut out = vec![0.0; t * N_MELS];
    let samples = audio.samples();
    for i in 0..t {
        let start = i * HOP_LENGTH;
        for (j, c) in buf.iter_mut().enumerate() {
            *c = if j < WIN_LENGTH {
                Complex::new(samples[start + j] * window[j], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for (m, w) in bank.weights().iter().enumerate() {
            let e: f64 = w.iter().zip(&power).map(|(a, b)| a * b).sum();
            out[i * N_MELS + m] = (e + LOG_FLOOR).ln();
        }
    }
    MelSpectrogram::from_frames(Tensor::new(vec![t, N_MELS], out)?)
}

/// Scope of the per-recording statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    /// One mean and standard deviation over all `T × 80` entries.
    #[default]
    Global,
    /// Separate statistics per mel band, across time.
    PerBand,
}

/// Standardizes a whole recording with a single global mean and std.
pub fn normalize_per_recording(spec: &MelSpectrogram) -> MelSpectrogram {
    normalize_with_scope(spec, NormScope::Global)
}

pub fn normalize_with_scope(spec: &MelSpectrogram, scope: NormScope) -> MelSpectrogram {
    let mut frames = spec.frames().clone();
    let data = frames.data_mut();
    match scope {
        NormScope::Global => {
            let (mean, std) = mean_std(data.iter().copied());
            data.iter_mut().for_each(|v| *v = (*v - mean) / std);
        }
        NormScope::PerBand => {
            for band in 0..N_MELS {
                let (mean, std) = mean_std(data.iter().skip(band).step_by(N_MELS).copied());
                data.iter_mut()
                    .skip(band)
                    .step_by(N_MELS)
                    .for_each(|v| *v = (*v - mean) / std);
            }
        }
    }
    MelSpectrogram { frames, ..spec.clone() }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    (mean, var.sqrt().max(STD_FLOOR))
}

/// Sets every frame inside a mask span to exactly zero.
pub fn zero_mask_segments(spec: &MelSpectrogram, mask: &SegmentMask) -> Result<MelSpectrogram> {
    let t = spec.num_frames();
    if let Some(&(start, end)) = mask.spans().iter().find(|&&(_, e)| e > t) {
        return Err(Error::MaskOutOfRange { start, end, frames: t });
    }
    let mut frames = spec.frames().clone();
    for &(s, e) in mask.spans() {
        frames.data_mut()[s * N_MELS..e * N_MELS].fill(0.0);
    }
    Ok(MelSpectrogram { frames, ..spec.clone() })
}

/// Gain applied to the noise so that `10 log10(P_signal / P_scaled_noise) = snr_db`.
pub fn noise_gain(signal_power: f64, noise_power: f64, snr_db: f64) -> f64 {
    let snr_db = snr_db.min(MAX_SNR_DB);
    (signal_power / (noise_power * 10f64.powf(snr_db / 10.0))).sqrt()
}

/// Noise tiled by wrap-around (or truncated) to the signal length.
pub fn fit_noise(noise: &AudioBuffer, len: usize) -> Vec<f64> {
    noise.samples().iter().copied().cycle().take(len).collect()
}

/// `signal + g * noise` with `g` chosen to hit `snr_db` exactly.
pub fn mix_noise_at_snr(signal: &AudioBuffer, noise: &AudioBuffer, snr_db: f64) -> Result<AudioBuffer> {
    if signal.sample_rate() != noise.sample_rate() {
        return Err(Error::UnsupportedSampleRate(noise.sample_rate()));
    }
    let fitted = fit_noise(noise, signal.len());
    let p_signal = signal.power();
    let p_noise = fitted.iter().map(|s| s * s).sum::<f64>() / fitted.len() as f64;
    if p_signal == 0.0 {
        return Err(Error::DegeneratePower("signal"));
    }
    if p_noise == 0.0 {
        return Err(Error::DegeneratePower("noise"));
    }
    let g = noise_gain(p_signal, p_noise, snr_db);
    let mixed = signal.samples().iter().zip(&fitted).map(|(s, n)| s + g * n).collect();
    AudioBuffer::new(mixed, signal.sample_rate())
}
