use ctxseg_core::config::TrainConfig;
use ctxseg_core::data::{synth_domain_with, DatasetHandle, ShiftSpec, SynthOptions};
use ctxseg_core::eval::{run_benchmark, BenchmarkReport};
use ctxseg_core::nn::Module;
use ctxseg_core::pipeline::{
    preprocess_dataset, train_noda, train_variant, DeploymentState, InsertionPolicy, ModelBundle, Variant,
};
use ctxseg_core::sae::{train_sae, SaeConfig, SaeModel};
use ctxseg_core::Mask;

fn domain(n: usize, shift: ShiftSpec, seed: u64, id: &str) -> DatasetHandle {
    let opts = SynthOptions {
        domain_id: id.into(),
        resolution: 32,
        ..Default::default()
    };
    synth_domain_with(n, &shift, seed, &opts).unwrap()
}

fn tiny() -> TrainConfig {
    TrainConfig {
        resolution: 32,
        epochs: 2,
        finetune_epochs: 1,
        texture_epochs: 1,
        texture_dim: 16,
        sae_epochs: 1,
        source_test: 4,
        target_memory: 4,
        ..Default::default()
    }
}

fn dice_of(r: &BenchmarkReport, method: Variant, target: &str, seed: u64) -> Vec<(String, f64)> {
    r.cases
        .iter()
        .filter(|c| c.method == method && c.target == target && c.seed == seed)
        .map(|c| (c.sample.clone(), c.dice))
        .collect()
}

#[test]
fn per_sample_dice_independent_of_target_and_seed_order() {
    let src = domain(10, ShiftSpec::identity(), 1, "src");
    let a = domain(8, ShiftSpec { gamma: 2.0, ..ShiftSpec::identity() }, 2, "a");
    let b = domain(8, ShiftSpec { noise_sigma: 0.1, ..ShiftSpec::identity() }, 3, "b");
    let cfg = tiny();
    let ab = run_benchmark(&src, &[a.clone(), b.clone()], &cfg, &[5, 6]).unwrap();
    let ba = run_benchmark(&src, &[b, a], &cfg, &[6, 5]).unwrap();
    for m in Variant::ALL {
        for t in ["src", "a", "b"] {
            for s in [5, 6] {
                let x = dice_of(&ab, m, t, s);
                assert_eq!(x, dice_of(&ba, m, t, s), "{m} {t} seed {s}");
                assert!(!x.is_empty() || (m == Variant::TransferLearnt && t == "src"));
            }
        }
    }
    let back = BenchmarkReport::from_jsonl(&ab.to_jsonl()).unwrap();
    assert_eq!(back, ab);
}

#[test]
fn noda_and_contextnet_share_initial_backbone() {
    let src = preprocess_dataset(&domain(6, ShiftSpec::identity(), 1, "src")).unwrap();
    let cfg = TrainConfig { epochs: 0, ..tiny() };
    let noda = train_noda(&src, &cfg).unwrap().bundle;
    for v in [Variant::ContextNet1, Variant::ContextNet2] {
        let (cn, memory) = train_variant(&src, v, &cfg).unwrap();
        assert_eq!(noda.seg.params(), cn.bundle.seg.backbone_params(), "{v}");
        assert_eq!(memory.unwrap().len(), src.len());
    }
}

#[test]
fn deployment_leaves_parameters_untouched() {
    let src = preprocess_dataset(&domain(6, ShiftSpec::identity(), 1, "src")).unwrap();
    let tgt = preprocess_dataset(&domain(8, ShiftSpec { gamma: 2.0, ..ShiftSpec::identity() }, 2, "tgt")).unwrap();
    let cfg = tiny();
    let (cn2, _) = train_variant(&src, Variant::ContextNet2, &cfg).unwrap();
    let bytes = cn2.bundle.to_bytes();
    let mut state = DeploymentState::new(
        cn2.bundle.clone(),
        DeploymentState::empty_memory(&cn2.bundle, "tgt").unwrap(),
        InsertionPolicy::OnlyAnnotated,
    )
    .unwrap();
    for (k, s) in tgt.samples().iter().enumerate() {
        let annotation: Option<&Mask> = if k % 2 == 0 { s.mask.as_ref() } else { None };
        state.deploy_step(&s.id, &s.image, annotation).unwrap();
    }
    assert_eq!(state.memory().unwrap().len(), 4);
    assert_eq!(state.flagged().len(), 4);
    assert_eq!(state.bundle().to_bytes(), bytes);
    assert_eq!(ModelBundle::from_bytes(&bytes).unwrap(), cn2.bundle);
}

#[test]
fn sae_parameter_count_fixed_by_training() {
    let ds = domain(8, ShiftSpec::identity(), 4, "m");
    let masks: Vec<&Mask> = ds.samples().iter().map(|s| s.mask.as_ref().unwrap()).collect();
    let cfg = SaeConfig {
        epochs: 2,
        ..Default::default()
    };
    let before = SaeModel::untrained(cfg.latent_dim, (32, 32), cfg.seed).unwrap().parameter_count();
    let trained = train_sae(&masks, &cfg).unwrap();
    assert_eq!(trained.parameter_count(), before);
    assert!(trained.is_trained());
}
