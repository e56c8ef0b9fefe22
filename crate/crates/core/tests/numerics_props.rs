use lcasr::numerics::{
    attention_chunked, attention_dense, batch_renorm, grad_check, GradCheckOptions, Graph, NormMode, RenormLimits,
    Tensor, TensorStore, Var,
};
use lcasr::Result;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Grad-checks `sum(op(x) * probe)` at ten random points.
fn check_op(shape: &[usize], op: impl Fn(&mut Graph, Var) -> Result<Var>, positive: bool) {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Tensor::randn(shape, &mut rng);
        if positive {
            x = x.map(|v| v.abs() + 0.5);
        }
        let out_shape = {
            let mut g = Graph::new();
            let xv = g.constant(x.clone()).unwrap();
            let y = op(&mut g, xv).unwrap();
            g.shape(y).to_vec()
        };
        let probe = Tensor::randn(&out_shape, &mut rng);
        let err = grad_check(
            |g, xv| {
                let y = op(g, xv)?;
                let p = g.constant(probe.clone())?;
                let y = g.mul(y, p)?;
                g.sum(y)
            },
            &x,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(err <= 1e-6, "seed {seed}: relative error {err}");
    }
}

fn fixed(g: &mut Graph, shape: &[usize], seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    g.constant(Tensor::randn(shape, &mut rng)).unwrap()
}

#[test]
fn elementwise_primitives() {
    check_op(&[3, 5], |g, x| g.silu(x), false);
    check_op(&[3, 5], |g, x| g.sigmoid(x), false);
    check_op(&[3, 5], |g, x| g.exp(x), false);
    check_op(&[3, 5], |g, x| g.log(x), true);
    check_op(&[3, 5], |g, x| g.relu(x), false);
    check_op(&[3, 5], |g, x| g.scale(x, -1.7), false);
    check_op(&[3, 5], |g, x| g.mul(x, x), false);
    check_op(&[3, 5], |g, x| g.add(x, x), false);
}

#[test]
fn row_primitives() {
    check_op(&[4, 6], |g, x| g.softmax(x), false);
    check_op(&[4, 6], |g, x| g.log_softmax(x), false);
    check_op(&[4, 6], |g, x| g.glu(x), false);
    check_op(
        &[4, 6],
        |g, x| {
            let gamma = fixed(g, &[6], 1);
            let beta = fixed(g, &[6], 2);
            g.layer_norm(x, gamma, beta, 1e-5)
        },
        false,
    );
}

#[test]
fn linear_primitives() {
    check_op(
        &[4, 3],
        |g, x| {
            let w = fixed(g, &[3, 5], 3);
            g.matmul(x, w)
        },
        false,
    );
    check_op(
        &[3, 5],
        |g, w| {
            let x = fixed(g, &[4, 3], 4);
            g.matmul(x, w)
        },
        false,
    );
    check_op(
        &[5],
        |g, b| {
            let x = fixed(g, &[4, 5], 5);
            g.add_bias(x, b)
        },
        false,
    );
    check_op(
        &[4, 3],
        |g, x| {
            let w = fixed(g, &[3, 2], 6);
            let b = fixed(g, &[2], 7);
            g.linear(x, w, b)
        },
        false,
    );
}

#[test]
fn shape_primitives() {
    check_op(&[4, 6], |g, x| g.reshape(x, &[6, 4]), false);
    check_op(&[5, 3], |g, x| g.slice(x, 0, 1, 4), false);
    check_op(&[5, 3], |g, x| g.slice(x, 1, 1, 3), false);
    check_op(
        &[2, 3],
        |g, x| {
            let y = fixed(g, &[2, 4], 8);
            g.concat(&[x, y, x], 1)
        },
        false,
    );
    check_op(&[3, 4], |g, x| g.sum(x), false);
}

#[test]
fn convolution_primitives() {
    check_op(
        &[7, 3],
        |g, x| {
            let w = fixed(g, &[3, 3], 9);
            let b = fixed(g, &[3], 10);
            g.conv1d_depthwise(x, w, b, 1)
        },
        false,
    );
    check_op(
        &[3, 3],
        |g, w| {
            let x = fixed(g, &[7, 3], 11);
            let b = fixed(g, &[3], 12);
            g.conv1d_depthwise(x, w, b, 1)
        },
        false,
    );
    check_op(
        &[5, 6, 2],
        |g, x| {
            let w = fixed(g, &[2, 3, 3], 13);
            let b = fixed(g, &[2], 14);
            g.conv2d_depthwise(x, w, b, [2, 2], [1, 1])
        },
        false,
    );
    check_op(
        &[2, 3, 3],
        |g, w| {
            let x = fixed(g, &[5, 6, 2], 15);
            let b = fixed(g, &[2], 16);
            g.conv2d_depthwise(x, w, b, [2, 2], [1, 1])
        },
        false,
    );
}

#[test]
fn sequence_primitives() {
    check_op(&[6, 8], |g, x| g.rotary(x, 2, 1e4, 3), false);
    for chunk in [1, 4, 6] {
        check_op(
            &[6, 8],
            |g, x| {
                let k = fixed(g, &[6, 8], 17);
                let v = fixed(g, &[6, 8], 18);
                g.attention(x, k, v, 2, 0.5, chunk)
            },
            false,
        );
        check_op(
            &[6, 8],
            |g, k| {
                let q = fixed(g, &[6, 8], 19);
                g.attention(q, k, k, 2, 0.5, chunk)
            },
            false,
        );
    }
    // With r_max = 1 and d_max = 0 the correction factors are constants.
    let plain = RenormLimits {
        r_max: 1.0,
        d_max: 0.0,
        momentum: 0.99,
    };
    check_op(
        &[6, 3],
        |g, x| {
            let gamma = fixed(g, &[3], 20);
            let beta = fixed(g, &[3], 21);
            let (y, _) = g.batch_renorm(
                x,
                gamma,
                beta,
                &[0.1, -0.2, 0.0],
                &[1.0, 2.0, 0.5],
                plain,
                NormMode::Training,
            )?;
            Ok(y)
        },
        false,
    );
    check_op(
        &[6, 3],
        |g, x| {
            let gamma = fixed(g, &[3], 22);
            let beta = fixed(g, &[3], 23);
            let (y, _) = g.batch_renorm(
                x,
                gamma,
                beta,
                &[0.1, -0.2, 0.0],
                &[1.0, 2.0, 0.5],
                RenormLimits::default(),
                NormMode::Inference,
            )?;
            Ok(y)
        },
        false,
    );
}

#[test]
fn batch_renorm_with_unit_limits_is_batch_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let x = Tensor::randn(&[10, 4], &mut rng).map(|v| 3.0 * v + 1.0);
    let limits = RenormLimits {
        r_max: 1.0,
        d_max: 0.0,
        momentum: 0.9,
    };
    let out = batch_renorm(
        &x,
        &[1.0; 4],
        &[0.0; 4],
        &[5.0; 4],
        &[9.0; 4],
        limits,
        NormMode::Training,
    )
    .unwrap();
    for c in 0..4 {
        let col: Vec<f64> = (0..10).map(|t| x.row(t)[c]).collect();
        let mean = col.iter().sum::<f64>() / 10.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 10.0;
        for t in 0..10 {
            let expected = (col[t] - mean) / (var + 1e-5).sqrt();
            assert!((out.output.row(t)[c] - expected).abs() < 1e-12);
        }
        let new_mean = out.new_mean.as_ref().unwrap()[c];
        assert!((new_mean - (0.9 * 5.0 + 0.1 * mean)).abs() < 1e-12);
    }
}

#[test]
fn checkpoint_bytes_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut store = TensorStore::new();
    store.insert("a.w", Tensor::randn(&[3, 4], &mut rng));
    store.insert("b", Tensor::scalar(2.5));
    let bytes = store.to_bytes(lcasr::numerics::DType::F64);
    let back = TensorStore::from_bytes(&bytes).unwrap();
    assert_eq!(back.get("a.w"), store.get("a.w"));
    assert_eq!(back.get("b"), store.get("b"));
    assert!(TensorStore::from_bytes(&bytes[..bytes.len() - 1]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn chunked_attention_matches_dense(t in 1usize..40, heads in 1usize..4, dh in 1usize..5, chunk in 1usize..50, seed in any::<u64>()) {
        let d = heads * dh;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = Tensor::randn(&[t, d], &mut rng).map(|v| 3.0 * v);
        let k = Tensor::randn(&[t, d], &mut rng);
        let v = Tensor::randn(&[t, d], &mut rng);
        let dense = attention_dense(&q, &k, &v, heads, 1.0).unwrap();
        let chunked = attention_chunked(&q, &k, &v, heads, 1.0, chunk).unwrap();
        prop_assert!(chunked.max_abs_diff(&dense) <= 1e-10);
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>(), scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[rows, cols], &mut rng).map(|v| v * scale)).unwrap();
        let p = g.softmax(x).unwrap();
        let lp = g.log_softmax(x).unwrap();
        for r in 0..rows {
            let s: f64 = g.value(p).row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            let z: f64 = g.value(lp).row(r).iter().map(|v| v.exp()).sum();
            prop_assert!((z - 1.0).abs() < 1e-12);
        }
    }
}
