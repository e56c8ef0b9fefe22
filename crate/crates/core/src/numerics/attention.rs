//! Multi-head scaled dot-product attention.
//!
//! [`attention_dense`] materializes the full `T×T` weight matrix per head and
//! serves as the reference. [`attention_chunked`] walks the keys in blocks with
//! a running row maximum and running normalizer (online softmax), so the only
//! score buffer is `T×chunk`. Both are bidirectional.
//!
//! The backward pass used by the autodiff tape recomputes each score block
//! from the saved per-row log-normalizer instead of keeping the weights.

use super::linalg::{gemm, View, ViewMut};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<(usize, usize)> {
    if q.shape().len() != 2 {
        return Err(Error::shape("attention", q.shape(), &[0, 0]));
    }
    if k.shape() != q.shape() {
        return Err(Error::shape("attention", q.shape(), k.shape()));
    }
    if v.shape() != q.shape() {
        return Err(Error::shape("attention", q.shape(), v.shape()));
    }
    let (t, d) = (q.shape()[0], q.shape()[1]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("model width {d} not divisible by {heads} heads")));
    }
    Ok((t, d))
}

/// Reference attention: softmax over the full score matrix of each head.
pub fn attention_dense(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, scale: f64) -> Result<Tensor> {
    let (t, d) = check_qkv(q, k, v, heads)?;
    let dh = d / heads;
    let mut out = vec![0.0; t * d];
    let mut scores = vec![0.0; t * t];
    for h in 0..heads {
        let off = h * dh;
        gemm(
            scale,
            View::rm(q.data(), off, t, dh, d),
            View::rm(k.data(), off, t, dh, d).t(),
            0.0,
            ViewMut::rm(&mut scores, 0, t, t, t),
        );
        for row in scores.chunks_mut(t) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            for s in row.iter_mut() {
                *s /= sum;
            }
        }
        gemm(
            1.0,
            View::rm(&scores, 0, t, t, t),
            View::rm(v.data(), off, t, dh, d),
            0.0,
            ViewMut::rm(&mut out, off, t, dh, d),
        );
    }
    Tensor::new(vec![t, d], out)
}

/// Exact attention computed over key blocks of size `chunk`.
pub fn attention_chunked(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, scale: f64, chunk: usize) -> Result<Tensor> {
    Ok(chunked_forward(q, k, v, heads, scale, chunk)?.0)
}

/// Chunked forward pass; also returns the per-(head,row) log-normalizer, laid out `[heads, T]`.
pub(crate) fn chunked_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    scale: f64,
    chunk: usize,
) -> Result<(Tensor, Vec<f64>)> {
    let (t, d) = check_qkv(q, k, v, heads)?;
    if chunk == 0 {
        return Err(Error::Config("attention chunk must be at least 1".into()));
    }
    let chunk = chunk.min(t);
    let dh = d / heads;
    let mut out = vec![0.0; t * d];
    let mut lse = vec![0.0; heads * t];
    let mut scores = vec![0.0; t * chunk];
    let mut row_max = vec![0.0; t];
    let mut row_sum = vec![0.0; t];
    for h in 0..heads {
        let off = h * dh;
        row_max.fill(f64::NEG_INFINITY);
        row_sum.fill(0.0);
        // `out` doubles as the unnormalized accumulator for this head's columns.
        for j0 in (0..t).step_by(chunk) {
            let c = chunk.min(t - j0);
            gemm(
                scale,
                View::rm(q.data(), off, t, dh, d),
                View::rm(k.data(), j0 * d + off, c, dh, d).t(),
                0.0,
                ViewMut::rm(&mut scores, 0, t, c, c),
            );
            for i in 0..t {
                let row = &mut scores[i * c..(i + 1) * c];
                let block_max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let new_max = row_max[i].max(block_max);
                let correction = if row_max[i] == f64::NEG_INFINITY {
                    0.0
                } else {
                    (row_max[i] - new_max).exp()
                };
                let mut sum = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - new_max).exp();
                    sum += *s;
                }
                row_sum[i] = row_sum[i] * correction + sum;
                row_max[i] = new_max;
                if correction != 1.0 {
                    for o in &mut out[i * d + off..i * d + off + dh] {
                        *o *= correction;
                    }
                }
            }
            gemm(
                1.0,
                View::rm(&scores, 0, t, c, c),
                View::rm(v.data(), j0 * d + off, c, dh, d),
                1.0,
                ViewMut::rm(&mut out, off, t, dh, d),
            );
        }
        for i in 0..t {
            let inv = 1.0 / row_sum[i];
            for o in &mut out[i * d + off..i * d + off + dh] {
                *o *= inv;
            }
            lse[h * t + i] = row_max[i] + row_sum[i].ln();
        }
    }
    Ok((Tensor::new(vec![t, d], out)?, lse))
}

/// Gradients of chunked attention with respect to `q`, `k` and `v`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn chunked_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    out: &Tensor,
    lse: &[f64],
    grad_out: &Tensor,
    heads: usize,
    scale: f64,
    chunk: usize,
) -> (Tensor, Tensor, Tensor) {
    let (t, d) = (q.shape()[0], q.shape()[1]);
    let dh = d / heads;
    let chunk = chunk.min(t);
    let mut dq = vec![0.0; t * d];
    let mut dk = vec![0.0; t * d];
    let mut dv = vec![0.0; t * d];
    let mut probs = vec![0.0; t * chunk];
    let mut dscores = vec![0.0; t * chunk];
    let mut delta = vec![0.0; t];
    let go = grad_out.data();
    for h in 0..heads {
        let off = h * dh;
        for (i, dl) in delta.iter_mut().enumerate() {
            let base = i * d + off;
            *dl = (0..dh).map(|p| go[base + p] * out.data()[base + p]).sum();
        }
        for j0 in (0..t).step_by(chunk) {
            let c = chunk.min(t - j0);
            gemm(
                scale,
                View::rm(q.data(), off, t, dh, d),
                View::rm(k.data(), j0 * d + off, c, dh, d).t(),
                0.0,
                ViewMut::rm(&mut probs, 0, t, c, c),
            );
            for i in 0..t {
                let l = lse[h * t + i];
                for p in &mut probs[i * c..(i + 1) * c] {
                    *p = (*p - l).exp();
                }
            }
            // dV_block += P^T dO
            gemm(
                1.0,
                View::rm(&probs, 0, t, c, c).t(),
                View::rm(go, off, t, dh, d),
                1.0,
                ViewMut::rm(&mut dv, j0 * d + off, c, dh, d),
            );
            // dP = dO V_block^T
            gemm(
                1.0,
                View::rm(go, off, t, dh, d),
                View::rm(v.data(), j0 * d + off, c, dh, d).t(),
                0.0,
                ViewMut::rm(&mut dscores, 0, t, c, c),
            );
            for i in 0..t {
                for j in 0..c {
                    let idx = i * c + j;
                    dscores[idx] = probs[idx] * (dscores[idx] - delta[i]);
                }
            }
            gemm(
                scale,
                View::rm(&dscores, 0, t, c, c),
                View::rm(k.data(), j0 * d + off, c, dh, d),
                1.0,
                ViewMut::rm(&mut dq, off, t, dh, d),
            );
            gemm(
                scale,
                View::rm(&dscores, 0, t, c, c).t(),
                View::rm(q.data(), off, t, dh, d),
                1.0,
                ViewMut::rm(&mut dk, j0 * d + off, c, dh, d),
            );
        }
    }
    let shape = vec![t, d];
    (
        Tensor::new(shape.clone(), dq).expect("dq shape"),
        Tensor::new(shape.clone(), dk).expect("dk shape"),
        Tensor::new(shape, dv).expect("dv shape"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Straightforward per-element loops, independent of the GEMM path.
    fn loop_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, scale: f64) -> Tensor {
        let (t, d) = (q.shape()[0], q.shape()[1]);
        let dh = d / heads;
        let mut out = Tensor::zeros(&[t, d]);
        for h in 0..heads {
            for i in 0..t {
                let logits: Vec<f64> = (0..t)
                    .map(|j| {
                        (0..dh)
                            .map(|p| q.row(i)[h * dh + p] * k.row(j)[h * dh + p])
                            .sum::<f64>()
                            * scale
                    })
                    .collect();
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for p in 0..dh {
                    let mut acc = 0.0;
                    for j in 0..t {
                        acc += (logits[j] - m).exp() / z * v.row(j)[h * dh + p];
                    }
                    out.row_mut(i)[h * dh + p] = acc;
                }
            }
        }
        out
    }

    fn rand_qkv(t: usize, d: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            Tensor::randn(&[t, d], &mut rng),
            Tensor::randn(&[t, d], &mut rng),
            Tensor::randn(&[t, d], &mut rng),
        )
    }

    #[test]
    fn dense_matches_double_loop() {
        let (q, k, v) = rand_qkv(7, 8, 3);
        let got = attention_dense(&q, &k, &v, 2, 0.5).unwrap();
        let want = loop_attention(&q, &k, &v, 2, 0.5);
        assert!(got.max_abs_diff(&want) <= 1e-10);
    }

    #[test]
    fn single_frame_returns_value_row() {
        let (q, k, v) = rand_qkv(1, 4, 5);
        let out = attention_chunked(&q, &k, &v, 2, 1.0, 3).unwrap();
        assert!(out.max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn identical_queries_give_identical_rows() {
        let (mut q, k, v) = rand_qkv(5, 6, 9);
        let first = q.row(0).to_vec();
        for i in 1..5 {
            q.row_mut(i).copy_from_slice(&first);
        }
        let out = attention_chunked(&q, &k, &v, 3, 0.7, 2).unwrap();
        for i in 1..5 {
            for (a, b) in out.row(0).iter().zip(out.row(i)) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn chunk_one_matches_dense() {
        let (q, k, v) = rand_qkv(64, 16, 11);
        let dense = attention_dense(&q, &k, &v, 4, 0.5).unwrap();
        let chunked = attention_chunked(&q, &k, &v, 4, 0.5, 1).unwrap();
        assert!(dense.max_abs_diff(&chunked) <= 1e-10);
    }

    #[test]
    fn outlier_logit_stays_finite() {
        let (mut q, mut k, v) = rand_qkv(6, 4, 2);
        q.row_mut(2)[0] = 100.0;
        k.row_mut(4)[0] = 100.0;
        let out = attention_chunked(&q, &k, &v, 1, 1.0, 2).unwrap();
        assert!(out.is_finite());
        // the 1e4 logit dominates: row 2 copies value row 4
        for (a, b) in out.row(2).iter().zip(v.row(4)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let (q, k, v) = rand_qkv(3, 6, 1);
        assert!(matches!(attention_dense(&q, &k, &v, 4, 1.0), Err(Error::Config(_))));
        assert!(attention_chunked(&q, &k, &v, 4, 1.0, 2).is_err());
    }
}
