use lcasr::ctc::{greedy_decode, PosteriorLattice};
use lcasr::dsp::MelSpectrogram;
use lcasr::encoder::{Encoder, EncoderConfig, PosScheme};
use lcasr::numerics::Tensor;
use lcasr::window::{
    encode_windows, merge_windows, plan_windows, transcribe_long, FrameModel, MergeMode, WindowOptions, FRAME_ALIGN,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spec(t: usize, seed: u64) -> MelSpectrogram {
    MelSpectrogram::from_frames(Tensor::randn(&[t, 80], &mut ChaCha8Rng::seed_from_u64(seed))).unwrap()
}

/// Each encoder frame depends only on its own 8 mel frames.
struct BlockModel;

impl FrameModel for BlockModel {
    fn posteriors(&self, mel: &Tensor) -> lcasr::Result<PosteriorLattice> {
        let frames = mel.rows().div_ceil(FRAME_ALIGN);
        let rows: Vec<Vec<f64>> = (0..frames)
            .map(|f| {
                let block = &mel.data()[f * FRAME_ALIGN * 80..(mel.rows().min((f + 1) * FRAME_ALIGN)) * 80];
                let a = block.iter().map(|v| v.tanh()).sum::<f64>().abs() + 0.1;
                let b = block.iter().map(|v| (v * 3.0).sin()).sum::<f64>().abs() + 0.1;
                let z = a + b + 1.0;
                vec![a / z, b / z, 1.0 / z]
            })
            .collect();
        PosteriorLattice::from_probs(&Tensor::from_rows(&rows)?)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn plans_cover_every_frame(total in 1usize..5000, w8 in 1usize..80, s8 in 1usize..80) {
        let (window, stride) = (w8 * 8, s8.min(w8) * 8);
        let plan = plan_windows(total, window, stride).unwrap();
        prop_assert!(plan.windows.iter().all(|&(s, _)| s % 8 == 0));
        prop_assert!(plan.windows.iter().all(|&(s, l)| s + l <= total && l <= window + 7));
        prop_assert!(plan.windows.windows(2).all(|p| p[0].0 < p[1].0));
        prop_assert_eq!(plan.windows.last().map(|&(s, l)| s + l), Some(total));
        prop_assert!(plan.coverage().iter().all(|&c| c >= 1));
    }

    #[test]
    fn context_free_model_is_window_invariant(total in 8usize..700, w8 in 1usize..20, s8 in 1usize..20, seed in any::<u64>()) {
        let (window, stride) = (w8 * 8, s8.min(w8) * 8);
        let spec = spec(total, seed);
        let whole = BlockModel.posteriors(spec.frames()).unwrap();
        let plan = plan_windows(total, window, stride).unwrap();
        let lats = encode_windows(&BlockModel, &spec, &plan, 1).unwrap();
        for mode in [MergeMode::Probability, MergeMode::LogDomain] {
            let merged = merge_windows(&lats, &plan, mode).unwrap();
            prop_assert_eq!(merged.lattice.log_probs(), whole.log_probs());
        }
    }

    #[test]
    fn merge_is_independent_of_window_order(seed in any::<u64>(), total in 64usize..400) {
        let plan = plan_windows(total, 64, 24).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lats: Vec<PosteriorLattice> = plan
            .windows
            .iter()
            .map(|&(_, len)| {
                let t = Tensor::randn(&[len.div_ceil(8), 4], &mut rng);
                let rows: Vec<Vec<f64>> = (0..t.rows())
                    .map(|r| {
                        let m = t.row(r).iter().copied().fold(f64::MIN, f64::max);
                        let z = m + t.row(r).iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                        t.row(r).iter().map(|v| v - z).collect()
                    })
                    .collect();
                PosteriorLattice::new(Tensor::from_rows(&rows).unwrap()).unwrap()
            })
            .collect();
        let forward = merge_windows(&lats, &plan, MergeMode::Probability).unwrap();
        let mut rev_plan = plan.clone();
        rev_plan.windows.reverse();
        let rev: Vec<PosteriorLattice> = lats.iter().rev().cloned().collect();
        let backward = merge_windows(&rev, &rev_plan, MergeMode::Probability).unwrap();
        prop_assert!(forward.lattice.log_probs().max_abs_diff(backward.lattice.log_probs()) < 1e-12);
        prop_assert_eq!(greedy_decode(&forward.lattice), greedy_decode(&backward.lattice));
    }
}

fn toy_encoder() -> Encoder {
    Encoder::new(
        EncoderConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            subsample_hidden: 4,
            vocab_size: 6,
            pos_scheme: PosScheme::Rotary,
            ..EncoderConfig::default()
        },
        3,
    )
    .unwrap()
}

#[test]
fn worker_count_does_not_change_results() {
    let enc = toy_encoder();
    let spec = spec(900, 1);
    let run = |workers| {
        transcribe_long(
            &enc,
            &spec,
            128,
            32,
            WindowOptions {
                mode: MergeMode::Probability,
                workers,
            },
        )
        .unwrap()
    };
    let (tok1, lat1) = run(1);
    for workers in [2, 3, 8] {
        let (tok, lat) = run(workers);
        assert_eq!(tok, tok1);
        assert_eq!(lat, lat1);
    }
}

#[test]
fn stride_equal_to_window_is_segmentation() {
    let enc = toy_encoder();
    let spec = spec(384, 2);
    let (_, merged) = transcribe_long(&enc, &spec, 128, 128, WindowOptions::default()).unwrap();
    for (i, s) in (0..384).step_by(128).enumerate() {
        let lat = enc.posteriors(&spec.frames().slice_rows(s, s + 128).unwrap()).unwrap();
        for j in 0..16 {
            assert_eq!(merged.lattice.log_probs().row(i * 16 + j), lat.log_probs().row(j));
        }
    }
    assert!(merged.coverage.iter().all(|&c| c == 1));
}

#[test]
fn short_recording_uses_one_window() {
    let enc = toy_encoder();
    let spec = spec(77, 3);
    let (_, merged) = transcribe_long(&enc, &spec, 128, 16, WindowOptions::default()).unwrap();
    assert_eq!(
        merged.lattice.log_probs(),
        enc.posteriors(spec.frames()).unwrap().log_probs()
    );
}
