mod common;

use std::sync::OnceLock;

use common::{small_data, tiny_config};
use flowfm_core::data::{split, NormStats};
use flowfm_core::diffusion::{ddim_steps, NoiseSchedule};
use flowfm_core::eval::{fid, knn_precision_recall, macro_f1, ProbeResult};
use flowfm_core::flow::{interpolate, PathSample};
use flowfm_core::model::timestep_embed;
use flowfm_core::persist::{normalize_prompt, Checkpoint, ModelKind, RunConfig};
use flowfm_core::sampler::{integrate, OdeConfig, OdeMethod};
use flowfm_core::train::Trainer;
use flowfm_tensor::Tensor;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |v| Tensor::new([rows, cols], v).unwrap())
}

fn checkpoint_bytes() -> &'static [u8] {
    static BYTES: OnceLock<Vec<u8>> = OnceLock::new();
    BYTES.get_or_init(|| {
        let mut t = Trainer::new(ModelKind::Flow, tiny_config(), NormStats::IDENTITY).unwrap();
        t.run_until(&small_data(0), 1, |_| {}).unwrap();
        t.to_checkpoint().to_bytes()
    })
}

proptest! {
    #[test]
    fn path_is_affine_in_time(
        x0 in matrix(3, 5),
        x1 in matrix(3, 5),
        t in prop::collection::vec(0.0f64..=1.0, 3),
    ) {
        let p = PathSample::new(x0.clone(), x1.clone(), t.clone()).unwrap();
        for i in 0..15 {
            let ti = t[i / 5];
            let expected = x0.data()[i] + ti * (x1.data()[i] - x0.data()[i]);
            prop_assert!((p.x_t.data()[i] - expected).abs() < 1e-12);
            prop_assert_eq!(p.u_target.data()[i], x1.data()[i] - x0.data()[i]);
        }
        prop_assert_eq!(interpolate(&x0, &x1, &[0.0; 3]), x0);
    }

    #[test]
    fn timestep_embedding_is_bounded_with_fixed_norm(t in 0.0f64..=1.0, half in 1usize..40) {
        let dim = 2 * half;
        let e = timestep_embed(t, dim).unwrap();
        prop_assert!(e.data().iter().all(|v| v.abs() <= 1.0));
        let norm2: f64 = e.data().iter().map(|v| v * v).sum();
        prop_assert!((norm2 - half as f64).abs() < 1e-9);
    }

    #[test]
    fn euler_on_linear_field_is_a_power(a in -2.0f64..2.0, x in -3.0f64..3.0, n in 1usize..50) {
        let traj = integrate(
            |s, _| Ok(s.map(|v| a * v)),
            &Tensor::from_vec(vec![x]),
            &OdeConfig::new(OdeMethod::Euler, n),
            false,
        ).unwrap();
        let expected = x * (1.0 + a / n as f64).powi(n as i32);
        prop_assert!((traj.final_state.data()[0] - expected).abs() < 1e-10 * (1.0 + expected.abs()));
        prop_assert_eq!(traj.net_evals, n);
    }

    #[test]
    fn scores_stay_in_range(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60)) {
        let (labels, preds): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let r = ProbeResult::from_predictions(&labels, &preds, 4);
        prop_assert!((0.0..=1.0).contains(&r.accuracy));
        prop_assert!((0.0..=1.0).contains(&r.macro_f1));
        prop_assert_eq!(r.confusion.iter().flatten().sum::<usize>(), labels.len());
        if labels == preds {
            prop_assert_eq!(r.accuracy, 1.0);
        }
        prop_assert_eq!(r.macro_f1, macro_f1(&r.confusion));
    }

    #[test]
    fn fid_is_nonnegative_symmetric_and_shift_invariant(
        a in matrix(12, 3),
        b in matrix(10, 3),
        shift in prop::collection::vec(-10.0f64..10.0, 3),
    ) {
        let ab = fid(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - fid(&b, &a).unwrap()).abs() < 1e-6 * (1.0 + ab));
        let move_rows = |x: &Tensor| {
            let mut y = x.clone();
            for row in y.data_mut().chunks_mut(3) {
                for (v, s) in row.iter_mut().zip(&shift) {
                    *v += s;
                }
            }
            y
        };
        let shifted = fid(&move_rows(&a), &move_rows(&b)).unwrap();
        prop_assert!((ab - shifted).abs() < 1e-6 * (1.0 + ab));
    }

    #[test]
    fn knn_scores_are_fractions(a in matrix(8, 2), b in matrix(9, 2), k in 1usize..5) {
        let (p, r) = knn_precision_recall(&a, &b, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!((0.0..=1.0).contains(&r));
        let (p, r) = knn_precision_recall(&a, &a, k).unwrap();
        prop_assert_eq!((p, r), (1.0, 1.0));
    }

    #[test]
    fn ddim_subsequence_is_increasing(total in 1usize..2000, frac in 0.0f64..1.0) {
        let n = ((total as f64 * frac) as usize).max(1);
        let seq = ddim_steps(total, n);
        prop_assert_eq!(seq.len(), n);
        prop_assert_eq!(seq[0], 0);
        prop_assert!(seq.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(*seq.last().unwrap() < total);
    }

    #[test]
    fn schedules_decay_monotonically(steps in 1usize..500, lo in 1e-5f64..0.01, span in 0.0f64..0.1) {
        let s = NoiseSchedule::linear(steps, lo, lo + span).unwrap();
        prop_assert!(s.alpha_bars().iter().all(|&a| a > 0.0 && a < 1.0));
        prop_assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        for k in 0..steps {
            prop_assert!(s.posterior_variance(k) <= s.betas()[k] + 1e-15);
        }
    }

    #[test]
    fn config_round_trips(
        seed in any::<u64>(),
        lr in 1e-6f64..1.0,
        mask in 0.0f64..=1.0,
        steps in 1usize..100_000,
        dim in prop::sample::select(vec![16usize, 32, 64, 128]),
        patch in prop::sample::select(vec![10usize, 15, 20, 30, 60]),
    ) {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.lr = lr;
        cfg.mask_prob = mask;
        cfg.train_steps = steps;
        cfg.velocity.embed_dim = dim;
        cfg.encoder.patch_size = patch;
        prop_assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn prompt_normalization_is_idempotent(s in "[ a-zA-Z\t]{0,30}") {
        let once = normalize_prompt(&s);
        prop_assert_eq!(normalize_prompt(&once), once.clone());
        prop_assert!(!once.starts_with(' ') && !once.ends_with(' '));
    }

    #[test]
    fn split_partitions_the_data(seed in any::<u64>(), frac in 0.1f64..0.9) {
        let data = small_data(1);
        let (train, eval) = split(&data, frac, seed).unwrap();
        prop_assert_eq!(train.len() + eval.len(), data.len());
        prop_assert!(!train.is_empty() && !eval.is_empty());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn any_single_byte_flip_breaks_a_checkpoint(pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let mut bytes = checkpoint_bytes().to_vec();
        let i = pos.index(bytes.len());
        bytes[i] ^= 1 << bit;
        prop_assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
