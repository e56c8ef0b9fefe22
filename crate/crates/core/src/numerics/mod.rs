//! Dense tensors, a reverse-mode tape, and the attention kernels.

mod attention;
pub mod batch_renorm;
mod checkpoint;
mod gradcheck;
mod graph;
mod linalg;
pub mod memtrack;
mod tensor;

pub use attention::{attention_chunked, attention_dense};
pub use batch_renorm::{batch_renorm, NormMode, RenormLimits, RenormSchedule};
pub use checkpoint::{DType, TensorStore};
pub use gradcheck::{grad_check, GradCheckOptions};
pub use graph::{conv_out_len, Graph, Var};
pub use tensor::Tensor;

pub(crate) use graph::rotate_rows;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 5], 3.3)).unwrap();
        let y = g.softmax(x).unwrap();
        assert!(g.value(y).data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let x = g
            .constant(Tensor::randn(&[3, 16], &mut rng).map(|v| 4.0 * v + 2.0))
            .unwrap();
        let gamma = g.constant(Tensor::full(&[16], 1.0)).unwrap();
        let beta = g.constant(Tensor::zeros(&[16])).unwrap();
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        for r in 0..3 {
            let row = g.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn silu_gradient_at_zero_is_half() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[4])).unwrap();
        let y = g.silu(x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&d| (d - 0.5).abs() < 1e-15));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[4, 5])).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2], -1.0)).unwrap();
        assert!(matches!(g.log(x), Err(crate::Error::NonFinite("log"))));
        assert!(g.constant(Tensor::full(&[1], f64::NAN)).is_err());
    }

    #[test]
    fn conv_output_length_is_ceil() {
        assert_eq!(conv_out_len(998, 2), 499);
        assert_eq!(conv_out_len(7, 2), 4);
        assert_eq!(conv_out_len(8, 8), 1);
    }

    #[test]
    fn squared_sum_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::randn(&[3, 4], &mut rng);
        let err = grad_check(
            |g, x| {
                let y = g.mul(x, x)?;
                g.sum(y)
            },
            &x,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(err <= 1e-7, "{err}");
    }

    #[test]
    fn grad_check_rejects_non_scalar() {
        let x = Tensor::zeros(&[3]);
        assert!(grad_check(|g, x| g.silu(x), &x, GradCheckOptions::default()).is_err());
    }
}
