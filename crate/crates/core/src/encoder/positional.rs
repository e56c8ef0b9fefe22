use crate::error::{Error, Result};
use crate::numerics::{rotate_rows, Tensor};

/// `PE[p, 2i] = sin(p / 10000^(2i/d))`, `PE[p, 2i+1] = cos(p / 10000^(2i/d))`.
pub fn sinusoidal_table(t: usize, d: usize) -> Result<Tensor> {
    if !d.is_multiple_of(2) {
        return Err(Error::Config(format!("sinusoidal table needs an even width, got {d}")));
    }
    let mut data = vec![0.0; t * d];
    for p in 0..t {
        for i in 0..d / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[p * d + 2 * i] = angle.sin();
            data[p * d + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![t, d], data)
}

/// Rotates row `r` of `x [T, d_head]` by position `positions[r]`.
pub fn rotate(x: &Tensor, positions: &[usize], theta: f64) -> Result<Tensor> {
    let d = x.cols();
    if x.shape().len() != 2 || !d.is_multiple_of(2) || positions.len() != x.rows() {
        return Err(Error::shape("apply_rotary", x.shape(), &[positions.len(), d]));
    }
    let mut out = x.clone();
    for (row, &m) in out.data_mut().chunks_mut(d).zip(positions) {
        rotate_rows(row, d, 1, theta, m, 1.0);
    }
    Ok(out)
}

/// Applies the same position-dependent rotation to queries and keys.
pub fn apply_rotary(q: &Tensor, k: &Tensor, positions: &[usize], theta: f64) -> Result<(Tensor, Tensor)> {
    Ok((rotate(q, positions, theta)?, rotate(k, positions, theta)?))
}
