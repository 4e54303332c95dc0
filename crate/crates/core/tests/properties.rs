use proptest::prelude::*;
use seqcomp_core::datakit::{mae, mse, smape, Dataset, Split, SplitSpec, WindowSampler};
use seqcomp_core::diffmath::rng::{normal_tensor, seeded};
use seqcomp_core::diffmath::{singular_values, svd, Graph, Tensor};
use seqcomp_core::encoder::{
    multi_head_attention, AttentionParams, EncodeOptions, Model, ModelConfig, QueryRows, TokenizeMode,
};
use seqcomp_core::richness::{gaussian_entropy, pearson, ratio_above, similarity_map, ENTROPY_RIDGE};
use seqcomp_core::seqcomp::{normalize_rows, SeriesWindow};
use seqcomp_core::trainer::{batch_objective, TrainConfig};

fn tensor(seed: u64, rows: usize, cols: usize) -> Tensor {
    normal_tensor(&mut seeded(seed), rows, cols, 1.0)
}

fn random_orthogonal(seed: u64, n: usize) -> Tensor {
    svd(&tensor(seed, n, n)).unwrap().u
}

fn model_config(k: usize) -> ModelConfig {
    ModelConfig {
        t_in: 24,
        t_out: 6,
        patch_len: 8,
        stride: 4,
        k_complementors: k,
        d_model: 8,
        heads: 2,
        blocks: 2,
        d_ff: 16,
        n_channels: 2,
        tokenize_mode: TokenizeMode::Patch,
        share_complementors: false,
        restrict_final_queries: false,
        dropout: 0.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unit_row_banks_have_frobenius_energy_k(seed in any::<u64>(), k in 1usize..6, extra in 0usize..12) {
        let s = normalize_rows(&tensor(seed, k, k + extra)).unwrap();
        let energy: f64 = singular_values(&s).unwrap().iter().map(|v| v * v).sum();
        prop_assert!((energy - k as f64).abs() < 1e-9);
    }

    #[test]
    fn entropy_invariant_under_orthogonal_maps(seed in any::<u64>(), n in 2usize..20, d in 1usize..6) {
        let z = tensor(seed, n, d);
        let q = random_orthogonal(seed ^ 0x5eed, d);
        let h = gaussian_entropy(&z, ENTROPY_RIDGE).unwrap();
        let hq = gaussian_entropy(&z.matmul(&q).unwrap(), ENTROPY_RIDGE).unwrap();
        prop_assert!((h - hq).abs() < 1e-8 * h.abs().max(1.0));
    }

    #[test]
    fn dominant_ratio_falls_as_threshold_rises(
        sigma in prop::collection::vec(0.0f64..10.0, 1..12),
        lo in 0.0f64..5.0,
        gap in 0.0f64..5.0,
    ) {
        let (a, b) = (ratio_above(&sigma, lo), ratio_above(&sigma, lo + gap));
        prop_assert!(a >= b);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn similarity_is_bounded_and_symmetric(seed in any::<u64>(), n in 1usize..10, d in 1usize..6) {
        let m = similarity_map(&tensor(seed, n, d)).0;
        for i in 0..n {
            prop_assert!((m[(i, i)] - 1.0).abs() < 1e-12);
            for j in 0..n {
                prop_assert!(m[(i, j)].abs() <= 1.0);
                prop_assert_eq!(m[(i, j)], m[(j, i)]);
            }
        }
    }

    #[test]
    fn pearson_of_affine_map_is_its_sign(
        xs in prop::collection::vec(-100.0f64..100.0, 3..30),
        a in prop::sample::select(vec![-3.0, -0.5, 0.25, 2.0]),
        b in -10.0f64..10.0,
    ) {
        prop_assume!(xs.iter().any(|&x| (x - xs[0]).abs() > 1e-3));
        let ys: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
        let r = pearson(&xs, &ys).unwrap().statistic;
        prop_assert!((r - a.signum()).abs() < 1e-9);
    }

    #[test]
    fn point_metrics_are_nonnegative(pairs in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..40)) {
        let (y, f): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        prop_assert!(mse(&y, &f).unwrap() >= 0.0);
        prop_assert!(mae(&y, &f).unwrap() >= 0.0);
        let s = smape(&y, &f).unwrap();
        prop_assert!((0.0..=200.0).contains(&s));
    }

    #[test]
    fn windows_stay_inside_their_split(
        rows in 120usize..400,
        t_in in 4usize..24,
        t_out in 1usize..12,
        stride in 1usize..5,
    ) {
        let values = Tensor::from_fn(rows, 1, |i, _| i as f64);
        let ds = Dataset::new("ramp", values, vec!["v".into()], &SplitSpec::default()).unwrap();
        for split in [Split::Train, Split::Val, Split::Test] {
            let range = ds.split_range(split);
            let Ok(idx) = WindowSampler::new(t_in, t_out, stride, split).index(&ds) else { continue };
            prop_assert!(idx.count > 0);
            for i in 0..idx.count {
                let w = idx.window(&ds, i);
                let first_target = w.y[(0, 0)] as usize;
                let last_target = w.y[(t_out - 1, 0)] as usize;
                prop_assert!(range.contains(&first_target) && range.contains(&last_target));
                prop_assert_eq!(w.x[(t_in - 1, 0)] as usize + 1, first_target);
                if i > 0 {
                    prop_assert_eq!(idx.start_row(i) - idx.start_row(i - 1), stride);
                }
            }
            // one more step would run past the split
            let next_end = idx.start_row(idx.count - 1) + stride + t_in + t_out;
            prop_assert!(next_end > range.end);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn restricted_queries_match_sliced_full_attention(
        seed in any::<u64>(),
        n_orig in 1usize..8,
        k in 0usize..4,
    ) {
        let mut rng = seeded(seed);
        let p = AttentionParams::random(&mut rng, 8, 2).unwrap();
        let z = normal_tensor(&mut rng, n_orig + k, 8, 1.0);
        let full = multi_head_attention(&z, n_orig, &p, QueryRows::All).unwrap();
        let restricted = multi_head_attention(&z, n_orig, &p, QueryRows::Original).unwrap();
        prop_assert!(restricted.max_abs_diff(&full.slice_rows(0, n_orig)) < 1e-12);
    }

    #[test]
    fn masked_complementors_reduce_to_the_plain_model(seed in any::<u64>(), k in 1usize..5) {
        let with = Model::new(model_config(k), &mut seeded(seed)).unwrap();
        let without = Model::new(model_config(0), &mut seeded(seed)).unwrap();
        let x = tensor(seed ^ 1, 24, 2);
        let masked = with
            .forward_with(&x, EncodeOptions { restrict_final_queries: false, mask_complementor_keys: true })
            .unwrap();
        prop_assert!(masked.max_abs_diff(&without.forward(&x).unwrap()) < 1e-12);
    }
}

#[test]
fn forecast_gradients_reach_every_bank() {
    let config = TrainConfig {
        diversification: false,
        ..TrainConfig::default()
    };
    for seed in 0..20 {
        let model = Model::new(model_config(3), &mut seeded(seed)).unwrap();
        let window = SeriesWindow::new(tensor(seed + 100, 24, 2), tensor(seed + 200, 6, 2), vec!["a".into(), "b".into()])
            .unwrap();
        let mut g = Graph::new();
        let bound = model.bind(&mut g).unwrap();
        let obj = batch_objective(&mut g, &bound, &[window], &config, &mut None).unwrap();
        assert!(obj.l_dcs.is_none());
        let grads = g.backward(obj.l_obj).unwrap();
        for (i, &b) in bound.params.banks.iter().enumerate() {
            let grad = grads.get(b).expect("bank receives a gradient");
            assert!(grad.max_abs() > 0.0, "seed {seed}, bank {i}: zero gradient");
        }
    }
}

#[test]
fn complementors_add_k_times_p_parameters_per_channel() {
    for (k, shared) in [(1, false), (3, false), (5, true)] {
        let mut with = model_config(k);
        with.share_complementors = shared;
        let mut without = model_config(0);
        without.share_complementors = shared;
        let (a, b) = (
            Model::new(with, &mut seeded(0)).unwrap(),
            Model::new(without, &mut seeded(0)).unwrap(),
        );
        let banks = if shared { 1 } else { 2 };
        assert_eq!(a.params.count() - b.params.count(), banks * k * 8);
        assert!(a.params.banks.iter().all(|s| s.shape() == [k, 8]));
    }
}
