use ctxseg_core::data::{load_dataset_at, preprocess, save_dataset, synth_domain_with, ShiftSpec, Split, SynthOptions};
use ctxseg_core::features::{haar, query_features};
use ctxseg_core::memory::{Aggregation, DomainMemory, MemoryDims, MemoryRecord, MemoryVariant};
use ctxseg_core::nn::Tensor;
use ctxseg_core::segnet::{EmbeddingOperator, SegModel, SegNetConfig};
use ctxseg_core::Grid;
use proptest::prelude::*;

fn shift_strategy() -> impl Strategy<Value = ShiftSpec> {
    (0.3f32..3.0, any::<bool>(), 0.0f32..0.2, 0.0f32..0.4, 0.0f32..3.0).prop_map(|(gamma, invert, noise, bias, deform)| {
        ShiftSpec {
            gamma,
            invert,
            noise_sigma: noise,
            bias_amplitude: bias,
            deform_magnitude: deform,
        }
    })
}

fn opts(resolution: usize) -> SynthOptions {
    SynthOptions {
        domain_id: "p".into(),
        resolution,
        ..Default::default()
    }
}

fn grid_strategy(side: usize) -> impl Strategy<Value = Grid> {
    proptest::collection::vec(0.0f32..1.0, side * side).prop_map(move |d| Grid::new(side, side, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn synthetic_masks_have_both_classes(seed in any::<u64>(), shift in shift_strategy(), res in prop::sample::select(vec![32usize, 64])) {
        let ds = synth_domain_with(4, &shift, seed, &opts(res)).unwrap();
        for s in ds.samples() {
            let m = s.mask.as_ref().unwrap();
            prop_assert!(m.count() > 0 && m.count() < res * res);
            prop_assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn haar_round_trip(levels in 1usize..4, img in grid_strategy(32)) {
        let back = haar::inverse(&haar::forward(&img, levels).unwrap());
        for (a, b) in back.data.iter().zip(img.data()) {
            prop_assert!((a - f64::from(*b)).abs() <= 1e-6);
        }
    }

    #[test]
    fn query_features_have_unit_norm(img in grid_strategy(16)) {
        let (lo, hi) = img.min_max();
        prop_assume!(hi > lo);
        let q = query_features(&img, 2).unwrap();
        let norm = q.0.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-5);
        prop_assert_eq!(q, query_features(&img, 2).unwrap());
    }

    #[test]
    fn retrieval_matches_sort_oracle_and_is_read_only(
        keys in proptest::collection::vec(proptest::collection::vec(-2i8..3, 3), 1..40),
        query in proptest::collection::vec(-2i8..3, 3),
        t in 1usize..6,
        exclude in proptest::option::of(0usize..40),
    ) {
        let dims = MemoryDims { query: 3, texture: 2, shape: None };
        let mut mem = DomainMemory::new("p", MemoryVariant::TextureOnly, dims, "x").unwrap();
        for (i, k) in keys.iter().enumerate() {
            let q: Vec<f32> = k.iter().map(|&v| f32::from(v)).collect();
            mem.insert(MemoryRecord::new(format!("k{i:02}"), q, vec![i as f32, 1.0], None)).unwrap();
        }
        let before = mem.clone();
        let q: Vec<f32> = query.iter().map(|&v| f32::from(v)).collect();
        let ex = exclude.map(|i| format!("k{i:02}"));
        let got = mem.retrieve_context(&q, t, ex.as_deref(), Aggregation::Sum).unwrap();
        prop_assert_eq!(&mem, &before);

        let mut order: Vec<(i32, usize)> = keys
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != exclude)
            .map(|(i, k)| (k.iter().zip(&query).map(|(&a, &b)| (i32::from(a) - i32::from(b)).pow(2)).sum(), i))
            .collect();
        order.sort();
        order.truncate(t);
        let ids: Vec<String> = order.iter().map(|&(_, i)| format!("k{i:02}")).collect();
        prop_assert_eq!(&got.support_ids, &ids);
        let sum_idx: f64 = order.iter().map(|&(_, i)| i as f64).sum();
        if !order.is_empty() {
            prop_assert_eq!(got.aggregated.clone(), vec![sum_idx, order.len() as f64]);
        }
        if order.len() == 1 {
            let avg = mem.retrieve_context(&q, 1, ex.as_deref(), Aggregation::Average).unwrap();
            prop_assert_eq!(avg.aggregated, got.context_matrix[0].clone());
        }
    }

    #[test]
    fn insert_leaves_existing_records(n in 1usize..20, extra in 1usize..5) {
        let dims = MemoryDims { query: 2, texture: 1, shape: Some(1) };
        let mut mem = DomainMemory::new("p", MemoryVariant::TextureShape, dims, "x").unwrap();
        let rec = |i: usize| MemoryRecord::new(format!("r{i}"), vec![i as f32, 0.5], vec![1.0], Some(vec![-(i as f32)]));
        for i in 0..n {
            mem.insert(rec(i)).unwrap();
        }
        let before = mem.records().to_vec();
        for i in n..n + extra {
            mem.insert(rec(i)).unwrap();
        }
        prop_assert_eq!(&mem.records()[..n], &before[..]);
    }

    #[test]
    fn forward_is_batch_permutation_equivariant(seed in 0u64..1000, perm in Just(vec![0usize, 1, 2]).prop_shuffle()) {
        let mut cfg = SegNetConfig::new((16, 16), 4, EmbeddingOperator::Average);
        cfg.widths = [4, 4, 8, 8];
        let m = SegModel::new(cfg, seed).unwrap();
        let data: Vec<f64> = (0..3 * 256).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 1000.0).collect();
        let x = Tensor::from_vec(3, 1, 16, 16, data).unwrap();
        let ctx: Vec<f64> = (0..12).map(|i| (i as f64 - 6.0) / 6.0).collect();
        let out = m.forward(&x, &ctx).unwrap();
        let pctx: Vec<f64> = perm.iter().flat_map(|&i| ctx[i * 4..(i + 1) * 4].to_vec()).collect();
        let pout = m.forward(&x.select(&perm), &pctx).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            prop_assert_eq!(pout.item(k), out.item(i));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn preprocess_nearly_idempotent_at_full_resolution(seed in any::<u64>(), shift in shift_strategy()) {
        let ds = synth_domain_with(1, &shift, seed, &opts(256)).unwrap();
        let once = preprocess(&ds.samples()[0].image);
        let twice = preprocess(&once);
        let worst = once.data().iter().zip(twice.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        prop_assert!(worst <= 0.02, "max change {worst}");
    }

    #[test]
    fn dataset_files_round_trip(seed in any::<u64>(), shift in shift_strategy()) {
        let ds = synth_domain_with(3, &shift, seed, &opts(32)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset_at(dir.path(), "p", Split::Train, 32).unwrap();
        prop_assert_eq!(&back, &ds);
        save_dataset(&back, dir.path()).unwrap();
        prop_assert_eq!(load_dataset_at(dir.path(), "p", Split::Train, 32).unwrap(), ds);
    }
}

fn mean_distance(a: &[Vec<f32>], b: &[Vec<f32>], same: bool) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            if same && j <= i {
                continue;
            }
            total += x.iter().zip(y).map(|(p, q)| f64::from(p - q).powi(2)).sum::<f64>().sqrt();
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn query_features_separate_shifted_domains() {
    let shift = ShiftSpec {
        gamma: 2.2,
        invert: true,
        noise_sigma: 0.05,
        ..ShiftSpec::identity()
    };
    let keys = |ds: &ctxseg_core::data::DatasetHandle| -> Vec<Vec<f32>> {
        ds.samples().iter().map(|s| query_features(&s.image, 2).unwrap().0).collect()
    };
    let src = keys(&synth_domain_with(20, &ShiftSpec::identity(), 1, &opts(256)).unwrap());
    let tgt = keys(&synth_domain_with(20, &shift, 2, &opts(256)).unwrap());
    let within = 0.5 * (mean_distance(&src, &src, true) + mean_distance(&tgt, &tgt, true));
    let cross = mean_distance(&src, &tgt, false);
    assert!(within < cross, "within {within} cross {cross}");
}
