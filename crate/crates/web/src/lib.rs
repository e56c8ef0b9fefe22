//! Browser bindings for three small, model-free views of the library: the
//! sequence-length warmup curve, rotary attention decay and window coverage.
//!
//! The plain functions are what the bindings wrap; they are also what the
//! native tests exercise, since `JsError` only exists inside a JS host.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use lcasr::curriculum::{seq_len_at, CurriculumSchedule};
use lcasr::encoder::rotate;
use lcasr::numerics::Tensor;
use lcasr::window::plan_windows;
use wasm_bindgen::prelude::*;

/// Sequence length after `0, step, 2 step, ...` recordings, `points` values.
pub fn warmup_points(s0: f64, n: usize, s_max: f64, step: usize, points: usize) -> Result<Vec<f64>, String> {
    let sched = CurriculumSchedule {
        s0,
        n,
        s_max,
        ..CurriculumSchedule::default()
    };
    sched.validate().map_err(|e| e.to_string())?;
    Ok((0..points).map(|i| seq_len_at(&sched, i * step)).collect())
}

/// Normalized score between an all-ones query and key placed `delta` apart,
/// for `delta = 0..max_delta`, with head width `d_head`.
pub fn rotary_scores(theta: f64, d_head: usize, max_delta: usize) -> Result<Vec<f64>, String> {
    if d_head == 0 || !d_head.is_multiple_of(2) {
        return Err(format!("head width must be even and positive, got {d_head}"));
    }
    if !(theta > 1.0) {
        return Err(format!("theta must exceed 1, got {theta}"));
    }
    let ones = Tensor::full(&[1, d_head], 1.0);
    let key = rotate(&ones, &[0], theta).map_err(|e| e.to_string())?;
    (0..max_delta)
        .map(|delta| {
            let q = rotate(&ones, &[delta], theta).map_err(|e| e.to_string())?;
            Ok(q.data().iter().zip(key.data()).map(|(a, b)| a * b).sum::<f64>() / d_head as f64)
        })
        .collect()
}

/// Windows covering each encoder frame of a `total`-frame recording.
pub fn coverage(total: usize, window: usize, stride: usize) -> Result<Vec<u32>, String> {
    let plan = plan_windows(total, window, stride).map_err(|e| e.to_string())?;
    Ok(plan.coverage().into_iter().map(|c| c as u32).collect())
}

#[wasm_bindgen]
pub fn warmup_curve(s0: f64, n: usize, s_max: f64, step: usize, points: usize) -> Result<Vec<f64>, JsError> {
    warmup_points(s0, n, s_max, step, points).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn rotary_similarity(theta: f64, d_head: usize, max_delta: usize) -> Result<Vec<f64>, JsError> {
    rotary_scores(theta, d_head, max_delta).map_err(|e| JsError::new(&e))
}

/// Coverage in mel frames: window and stride must be multiples of 8.
#[wasm_bindgen]
pub fn window_coverage(total: usize, window: usize, stride: usize) -> Result<Vec<u32>, JsError> {
    coverage(total, window, stride).map_err(|e| JsError::new(&e))
}
