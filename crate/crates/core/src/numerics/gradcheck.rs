//! Finite-difference validation of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Check only this many randomly chosen coordinates (all when `None`).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.constant(x.clone())?;
    let y = f(&mut g, xv)?;
    if g.value(y).numel() != 1 {
        return Err(Error::shape("grad_check", g.shape(y), &[1]));
    }
    Ok(g.value(y).item())
}

/// Max over checked coordinates of `|g_fd - g_ad| / max(1, |g_fd|, |g_ad|)`.
pub fn grad_check<F>(f: F, x: &Tensor, opts: GradCheckOptions) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone())?;
    let y = f(&mut g, xv)?;
    if g.value(y).numel() != 1 {
        return Err(Error::shape("grad_check", g.shape(y), &[1]));
    }
    g.backward(y)?;
    let analytic = g.take_grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));
    drop(g);

    let n = x.numel();
    let coords: Vec<usize> = match opts.max_coords {
        Some(m) if m < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut idx = sample(&mut rng, n, m).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    };
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + opts.h;
        let up = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - opts.h;
        let down = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * opts.h);
        let ad = analytic.data()[i];
        let rel = (fd - ad).abs() / 1f64.max(fd.abs()).max(ad.abs());
        worst = worst.max(rel);
    }
    Ok(worst)
}
