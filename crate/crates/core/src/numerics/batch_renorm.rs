//! Batch renormalization over the leading (time) axis of a `[T, C]` tensor.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Variance floor: every standard deviation is `sqrt(var + VAR_EPS)`.
pub const VAR_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    Training,
    Inference,
}

/// Clamp limits and momentum for one batch-renorm call.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenormLimits {
    pub r_max: f64,
    pub d_max: f64,
    pub momentum: f64,
}

impl Default for RenormLimits {
    fn default() -> Self {
        Self {
            r_max: 3.0,
            d_max: 5.0,
            momentum: 0.99,
        }
    }
}

/// Ramp from plain batch norm (`r_max = 1, d_max = 0`) to the final limits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenormSchedule {
    pub r_max: f64,
    pub d_max: f64,
    pub ramp_steps: usize,
    pub momentum: f64,
}

impl Default for RenormSchedule {
    fn default() -> Self {
        Self {
            r_max: 3.0,
            d_max: 5.0,
            ramp_steps: 1000,
            momentum: 0.99,
        }
    }
}

impl RenormSchedule {
    pub fn limits_at(&self, step: usize) -> RenormLimits {
        let frac = if self.ramp_steps == 0 {
            1.0
        } else {
            (step as f64 / self.ramp_steps as f64).min(1.0)
        };
        RenormLimits {
            r_max: 1.0 + (self.r_max - 1.0) * frac,
            d_max: self.d_max * frac,
            momentum: self.momentum,
        }
    }
}

/// Result of a forward pass, with everything the backward pass needs.
#[derive(Clone, Debug)]
pub struct RenormForward {
    pub output: Tensor,
    /// `(x - mean_b) / sigma_b` in training mode, `(x - mean_run) / sigma_run` in inference.
    pub normed: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub r: Vec<f64>,
    pub d: Vec<f64>,
    /// Updated running statistics (training mode only).
    pub new_mean: Option<Vec<f64>>,
    pub new_var: Option<Vec<f64>>,
}

/// Training: `y = ((x - mu_b)/sigma_b * r + d) * gamma + beta` with
/// `r = clamp(sigma_b/sigma_run, 1/r_max, r_max)` and
/// `d = clamp((mu_b - mu_run)/sigma_run, -d_max, d_max)`.
/// Inference: `y = (x - mu_run)/sigma_run * gamma + beta`.
#[allow(clippy::too_many_arguments)]
pub fn batch_renorm(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    limits: RenormLimits,
    mode: NormMode,
) -> Result<RenormForward> {
    if x.shape().len() != 2 {
        return Err(Error::shape("batch_renorm", x.shape(), &[0, 0]));
    }
    let (t, c) = (x.shape()[0], x.shape()[1]);
    for stat in [gamma, beta, running_mean, running_var] {
        if stat.len() != c {
            return Err(Error::shape("batch_renorm", x.shape(), &[stat.len()]));
        }
    }
    let run_std: Vec<f64> = running_var.iter().map(|v| (v + VAR_EPS).sqrt()).collect();
    let xs = x.data();
    let mut normed = vec![0.0; t * c];
    let mut out = vec![0.0; t * c];
    match mode {
        NormMode::Inference => {
            for i in 0..t {
                for ch in 0..c {
                    let n = (xs[i * c + ch] - running_mean[ch]) / run_std[ch];
                    normed[i * c + ch] = n;
                    out[i * c + ch] = n * gamma[ch] + beta[ch];
                }
            }
            Ok(RenormForward {
                output: Tensor::new(vec![t, c], out)?,
                normed,
                inv_std: run_std.iter().map(|s| 1.0 / s).collect(),
                r: vec![1.0; c],
                d: vec![0.0; c],
                new_mean: None,
                new_var: None,
            })
        }
        NormMode::Training => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for row in xs.chunks(c) {
                for (m, x) in mean.iter_mut().zip(row) {
                    *m += x;
                }
            }
            mean.iter_mut().for_each(|m| *m /= t as f64);
            for row in xs.chunks(c) {
                for ch in 0..c {
                    let dx = row[ch] - mean[ch];
                    var[ch] += dx * dx;
                }
            }
            var.iter_mut().for_each(|v| *v /= t as f64);
            let std: Vec<f64> = var.iter().map(|v| (v + VAR_EPS).sqrt()).collect();
            let r: Vec<f64> = (0..c)
                .map(|ch| (std[ch] / run_std[ch]).clamp(1.0 / limits.r_max, limits.r_max))
                .collect();
            let d: Vec<f64> = (0..c)
                .map(|ch| ((mean[ch] - running_mean[ch]) / run_std[ch]).clamp(-limits.d_max, limits.d_max))
                .collect();
            for i in 0..t {
                for ch in 0..c {
                    let n = (xs[i * c + ch] - mean[ch]) / std[ch];
                    normed[i * c + ch] = n;
                    out[i * c + ch] = (n * r[ch] + d[ch]) * gamma[ch] + beta[ch];
                }
            }
            let m = limits.momentum;
            let new_mean = (0..c).map(|ch| m * running_mean[ch] + (1.0 - m) * mean[ch]).collect();
            let new_var = (0..c).map(|ch| m * running_var[ch] + (1.0 - m) * var[ch]).collect();
            Ok(RenormForward {
                output: Tensor::new(vec![t, c], out)?,
                normed,
                inv_std: std.iter().map(|s| 1.0 / s).collect(),
                r,
                d,
                new_mean: Some(new_mean),
                new_var: Some(new_var),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let (t, c) = (x.shape()[0], x.shape()[1]);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for i in 0..t {
            for ch in 0..c {
                mean[ch] += x.row(i)[ch] / t as f64;
            }
        }
        for i in 0..t {
            for ch in 0..c {
                var[ch] += (x.row(i)[ch] - mean[ch]).powi(2) / t as f64;
            }
        }
        (mean, var)
    }

    #[test]
    fn degenerate_clamps_give_plain_batch_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[10, 3], &mut rng);
        let limits = RenormLimits {
            r_max: 1.0,
            d_max: 0.0,
            momentum: 0.99,
        };
        let out = batch_renorm(
            &x,
            &[1.0; 3],
            &[0.0; 3],
            &[0.3; 3],
            &[2.0; 3],
            limits,
            NormMode::Training,
        )
        .unwrap();
        let (mean, var) = moments(&x);
        for i in 0..10 {
            for ch in 0..3 {
                let bn = (x.row(i)[ch] - mean[ch]) / (var[ch] + VAR_EPS).sqrt();
                assert!((out.output.row(i)[ch] - bn).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn inference_with_unit_stats_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[5, 4], &mut rng);
        let out = batch_renorm(
            &x,
            &[1.0; 4],
            &[0.0; 4],
            &[0.0; 4],
            &[1.0 - VAR_EPS; 4],
            RenormLimits::default(),
            NormMode::Inference,
        )
        .unwrap();
        assert!(out.output.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn matching_running_stats_agree_with_inference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[16, 2], &mut rng);
        let (mean, var) = moments(&x);
        let gamma = [1.5, -0.5];
        let beta = [0.1, 0.2];
        let train = batch_renorm(
            &x,
            &gamma,
            &beta,
            &mean,
            &var,
            RenormLimits::default(),
            NormMode::Training,
        )
        .unwrap();
        let infer = batch_renorm(
            &x,
            &gamma,
            &beta,
            &mean,
            &var,
            RenormLimits::default(),
            NormMode::Inference,
        )
        .unwrap();
        assert!(train.r.iter().all(|r| (r - 1.0).abs() < 1e-12));
        assert!(train.d.iter().all(|d| d.abs() < 1e-12));
        assert!(train.output.max_abs_diff(&infer.output) <= 1e-10);
    }

    #[test]
    fn ramp_starts_at_plain_batch_norm() {
        let sched = RenormSchedule::default();
        let start = sched.limits_at(0);
        assert_eq!((start.r_max, start.d_max), (1.0, 0.0));
        let end = sched.limits_at(5000);
        assert_eq!((end.r_max, end.d_max), (3.0, 5.0));
    }
}
