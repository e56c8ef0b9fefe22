//! Long-form decoding with overlapping windows whose per-frame posteriors are
//! averaged before a single greedy decode.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::ctc::{greedy_decode, PosteriorLattice, TokenSequence, FRAME_DURATION_S};
use crate::dsp::MelSpectrogram;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Mel frames per encoder frame.
pub const FRAME_ALIGN: usize = 8;

/// Anything that maps `[T, 80]` mel frames to a `[ceil(T/8), V]` lattice.
pub trait FrameModel: Sync {
    fn posteriors(&self, mel: &Tensor) -> Result<PosteriorLattice>;
}

impl FrameModel for Encoder {
    fn posteriors(&self, mel: &Tensor) -> Result<PosteriorLattice> {
        Ok(self.infer(mel)?.posteriors)
    }
}

/// Ordered `(start, len)` windows in mel frames.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub window_len: usize,
    pub stride: usize,
    pub total_len: usize,
    pub windows: Vec<(usize, usize)>,
}

impl WindowPlan {
    pub fn starts(&self) -> Vec<usize> {
        self.windows.iter().map(|w| w.0).collect()
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Encoder frames in the whole recording.
    pub fn total_frames(&self) -> usize {
        self.total_len.div_ceil(FRAME_ALIGN)
    }

    /// Number of windows covering each encoder frame.
    pub fn coverage(&self) -> Vec<usize> {
        let mut cov = vec![0; self.total_frames()];
        for &(start, len) in &self.windows {
            let first = start / FRAME_ALIGN;
            for c in &mut cov[first..first + len.div_ceil(FRAME_ALIGN)] {
                *c += 1;
            }
        }
        cov
    }
}

/// Windows at `0, s, 2s, …` while they fit, then a back-shifted tail window
/// so the last frame is covered. The tail start is rounded down to a
/// multiple of 8, so the tail may run up to 7 frames longer than
/// `window_len`.
pub fn plan_windows(total_len: usize, window_len: usize, stride: usize) -> Result<WindowPlan> {
    if total_len == 0 {
        return Err(Error::Config("cannot plan windows over an empty recording".into()));
    }
    if window_len == 0 || !window_len.is_multiple_of(FRAME_ALIGN) {
        return Err(Error::Config(format!(
            "window length {window_len} is not a positive multiple of 8 frames"
        )));
    }
    if stride == 0 || !stride.is_multiple_of(FRAME_ALIGN) {
        return Err(Error::Config(format!(
            "stride {stride} is not a positive multiple of 8 frames"
        )));
    }
    if stride > window_len {
        return Err(Error::Config(format!(
            "stride {stride} exceeds window length {window_len}"
        )));
    }
    let mut windows = Vec::new();
    if total_len <= window_len {
        windows.push((0, total_len));
    } else {
        let mut start = 0;
        while start + window_len <= total_len {
            windows.push((start, window_len));
            start += stride;
        }
        let &(last_start, _) = windows.last().expect("at least one window fits");
        if last_start + window_len < total_len {
            let tail = (total_len - window_len) / FRAME_ALIGN * FRAME_ALIGN;
            if tail == last_start {
                windows.pop();
            }
            windows.push((tail, total_len - tail));
        }
    }
    Ok(WindowPlan {
        window_len,
        stride,
        total_len,
        windows,
    })
}

/// How overlapping predictions are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    /// Mean of probability rows, renormalized.
    #[default]
    Probability,
    /// Mean of log-probability rows, renormalized (geometric mean).
    LogDomain,
}

/// Recording-level lattice plus per-frame window counts.
#[derive(Clone, Debug, PartialEq)]
pub struct MergedLattice {
    pub lattice: PosteriorLattice,
    pub coverage: Vec<usize>,
}

/// Averages window lattices frame by frame. Window `i`'s frame `j` lands on
/// global encoder frame `start_i / 8 + j`.
pub fn merge_windows(lattices: &[PosteriorLattice], plan: &WindowPlan, mode: MergeMode) -> Result<MergedLattice> {
    if lattices.len() != plan.windows.len() {
        return Err(Error::Data(format!(
            "{} lattices for a plan of {} windows",
            lattices.len(),
            plan.windows.len()
        )));
    }
    let v = lattices.first().map(PosteriorLattice::vocab_size).unwrap_or(0);
    let total = plan.total_frames();
    let mut acc = vec![0.0; total * v];
    let mut coverage = vec![0usize; total];
    // First contribution per frame and whether every later one matched it
    // bit for bit; such frames are copied through unchanged.
    let mut first_rows = vec![0.0; total * v];
    let mut uniform = vec![true; total];
    for (lat, &(start, len)) in lattices.iter().zip(&plan.windows) {
        let frames = len.div_ceil(FRAME_ALIGN);
        if lat.num_frames() != frames || lat.vocab_size() != v {
            return Err(Error::shape("merge_windows", lat.log_probs().shape(), &[frames, v]));
        }
        let first = start / FRAME_ALIGN;
        for j in 0..frames {
            let row = lat.log_probs().row(j);
            let f = first + j;
            let kept = &mut first_rows[f * v..(f + 1) * v];
            if coverage[f] == 0 {
                kept.copy_from_slice(row);
            } else if kept != row {
                uniform[f] = false;
            }
            let dst = &mut acc[f * v..(f + 1) * v];
            match mode {
                MergeMode::Probability => dst.iter_mut().zip(row).for_each(|(a, lp)| *a += lp.exp()),
                MergeMode::LogDomain => dst.iter_mut().zip(row).for_each(|(a, lp)| *a += lp),
            }
            coverage[first + j] += 1;
        }
    }
    if let Some(gap) = coverage.iter().position(|&c| c == 0) {
        return Err(Error::CoverageGap(gap));
    }
    for (f, (row, &c)) in acc.chunks_mut(v).zip(&coverage).enumerate() {
        if uniform[f] {
            row.copy_from_slice(&first_rows[f * v..(f + 1) * v]);
            continue;
        }
        match mode {
            MergeMode::Probability => {
                let z: f64 = row.iter().sum();
                row.iter_mut().for_each(|p| *p = (*p / z).ln());
            }
            MergeMode::LogDomain => {
                row.iter_mut().for_each(|lp| *lp /= c as f64);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z = m + row.iter().map(|lp| (lp - m).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|lp| *lp -= z);
            }
        }
    }
    let mut lattice = PosteriorLattice::new(Tensor::new(vec![total, v], acc)?)?;
    lattice.frame_duration = FRAME_DURATION_S;
    Ok(MergedLattice { lattice, coverage })
}

/// Worker count: available cores, capped by `LCASR_THREADS` when set.
pub fn worker_count() -> usize {
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match std::env::var("LCASR_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
    {
        Some(cap) if cap > 0 => cores.min(cap),
        _ => cores,
    }
}

/// Encodes every window of `plan`, in parallel over `workers` threads.
/// Results are placed by window index, so the output is independent of
/// completion order.
pub fn encode_windows<M: FrameModel>(
    model: &M,
    spec: &MelSpectrogram,
    plan: &WindowPlan,
    workers: usize,
) -> Result<Vec<PosteriorLattice>> {
    let frames = spec.frames();
    let encode_one = |i: usize| {
        let (start, len) = plan.windows[i];
        model.posteriors(&frames.slice_rows(start, start + len)?)
    };
    let workers = workers.clamp(1, plan.windows.len().max(1));
    if workers == 1 {
        return (0..plan.windows.len()).map(encode_one).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<PosteriorLattice>>>> =
        Mutex::new((0..plan.windows.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= plan.windows.len() {
                    break;
                }
                let r = encode_one(i);
                slots.lock().expect("window slot lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("window slot lock")
        .into_iter()
        .map(|r| r.expect("every window encoded"))
        .collect()
}

/// Options for [`transcribe_long`].
#[derive(Clone, Copy, Debug)]
pub struct WindowOptions {
    pub mode: MergeMode,
    pub workers: usize,
}

impl Default for WindowOptions {
    fn default() -> Self {
        Self {
            mode: MergeMode::Probability,
            workers: worker_count(),
        }
    }
}

/// Plan, encode each window, merge, then decode once over the merged lattice.
/// `spec` should already be normalized over the whole recording.
pub fn transcribe_long<M: FrameModel>(
    model: &M,
    spec: &MelSpectrogram,
    window_len: usize,
    stride: usize,
    opts: WindowOptions,
) -> Result<(TokenSequence, MergedLattice)> {
    let plan = plan_windows(spec.num_frames(), window_len, stride)?;
    let lattices = encode_windows(model, spec, &plan, opts.workers)?;
    let merged = merge_windows(&lattices, &plan, opts.mode)?;
    Ok((greedy_decode(&merged.lattice), merged))
}

/// Converts seconds to mel frames on the 80 ms encoder grid, rounding down.
/// Returns the frame count and whether snapping changed the value.
pub fn seconds_to_frames(seconds: f64) -> Result<(usize, bool)> {
    let units = seconds / FRAME_DURATION_S;
    if !units.is_finite() || units < 1.0 - 1e-9 {
        return Err(Error::Config(format!(
            "{seconds} s is shorter than one 0.08 s encoder frame"
        )));
    }
    let whole = (units + 1e-9).floor();
    Ok((whole as usize * FRAME_ALIGN, (units - whole).abs() > 1e-9))
}
