//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). By default it always exits 0
//! so that `cargo test` reports the lines without aborting the workspace run;
//! set `ACCEPTANCE_STRICT=1` to exit 1 when any gating criterion fails.
//! `ACCEPTANCE_ONLY=1,4,9` restricts the run to the listed criteria.
//!
//! Criterion 10 needs real chest X-ray cohorts and is skipped unless
//! `CTXSEG_REAL_ROOT` points at a directory holding `montgomery/` and `jsrt/`
//! domain folders (`images/` plus `masks/`). `CTXSEG_REAL_CONFIG` may name a
//! config file for that run.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ctxseg_core::config::TrainConfig;
use ctxseg_core::data::{load_dataset_at, synth_domain_with, DatasetHandle, ShiftSpec, Split, SynthOptions};
use ctxseg_core::eval::{
    ablate, ablate_memory_size, dice, emit_report, run_benchmark_with, AblationAxis, BenchmarkOptions, BenchmarkRun,
};
use ctxseg_core::features::{detail_energies, haar};
use ctxseg_core::memory::{Aggregation, DomainMemory, MemoryDims, MemoryRecord, MemoryVariant};
use ctxseg_core::nn::{bce_with_logits, Mode, Module, Tensor};
use ctxseg_core::pipeline::{DeploymentState, InsertionPolicy, ModelBundle, Variant};
use ctxseg_core::sae::{train_sae, SaeConfig};
use ctxseg_core::segnet::{EmbeddingOperator, SegModel, SegNetConfig};
use ctxseg_core::{Grid, Mask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
    Info(String),
}

struct Line {
    id: u32,
    name: &'static str,
    outcome: Outcome,
    elapsed: Duration,
    limit: Option<Duration>,
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn minutes(m: u64) -> Option<Duration> {
    Some(Duration::from_secs(60 * m))
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> Mask {
    let density: f64 = rng.gen_range(0.0..1.0);
    Mask::from_fn(n, n, |_, _| rng.gen_bool(density))
}

fn c1_metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let a = random_mask(&mut rng, 64);
        let b = random_mask(&mut rng, 64);
        let (mut inter, mut na, mut nb) = (0u64, 0u64, 0u64);
        for y in 0..64 {
            for x in 0..64 {
                let (pa, pb) = (a.get(y, x), b.get(y, x));
                na += u64::from(pa);
                nb += u64::from(pb);
                inter += u64::from(pa && pb);
            }
        }
        let oracle = if na + nb == 0 { 1.0 } else { 2.0 * inter as f64 / (na + nb) as f64 };
        worst = worst.max((dice(&a, &b).unwrap() - oracle).abs());
    }
    let blob = Mask::from_fn(8, 8, |y, x| y < 4 && x < 4);
    let same = dice(&blob, &blob).unwrap();
    let disjoint = dice(&blob, &Mask::from_fn(8, 8, |y, x| y >= 4 && x >= 4)).unwrap();
    let a = Mask::from_fn(4, 4, |y, _| y == 0);
    let b = Mask::from_fn(4, 4, |y, x| y == 0 && x < 2);
    let partial = dice(&a, &b).unwrap();
    let ok = worst <= 1e-12 && same == 1.0 && disjoint == 0.0 && (partial - 2.0 / 3.0).abs() < 1e-12;
    check(
        ok,
        format!("max |dice - oracle| = {worst:.1e} over 100 pairs; examples {same} / {disjoint} / {partial:.4}"),
    )
}

fn euclid(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn c2_retrieval_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (qd, td) = (12, 6);
    let dims = MemoryDims { query: qd, texture: td, shape: None };
    let mut checked = 0usize;
    let mut mismatches = Vec::new();
    for &size in &[1usize, 5, 50, 1000] {
        // a small pool of keys so exact distance ties occur
        let pool: Vec<Vec<f32>> = (0..(size / 2).max(1))
            .map(|_| (0..qd).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect();
        let mut mem = DomainMemory::new("oracle", MemoryVariant::TextureOnly, dims, "x").unwrap();
        let mut rows = Vec::new();
        for i in 0..size {
            let q = pool[rng.gen_range(0..pool.len())].clone();
            let t: Vec<f32> = (0..td).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let seq = mem.insert(MemoryRecord::new(format!("r{i:04}"), q.clone(), t.clone(), None)).unwrap();
            rows.push((format!("r{i:04}"), q, t, seq));
        }
        for _ in 0..1000 {
            let q: Vec<f32> = if rng.gen_bool(0.3) {
                pool[rng.gen_range(0..pool.len())].clone()
            } else {
                (0..qd).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
            };
            let excluded = rows[rng.gen_range(0..rows.len())].0.clone();
            for &t in &[1usize, 3, 5] {
                for exclude in [None, Some(excluded.as_str())] {
                    let mut all: Vec<(f64, u64, &str, &[f32])> = rows
                        .iter()
                        .filter(|r| Some(r.0.as_str()) != exclude)
                        .map(|r| (euclid(&q, &r.1), r.3, r.0.as_str(), r.2.as_slice()))
                        .collect();
                    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                    all.truncate(t);
                    let got = mem.retrieve_context(&q, t, exclude, Aggregation::Average).unwrap();
                    let ids: Vec<&str> = all.iter().map(|a| a.2).collect();
                    let dist_ok = got.distances.len() == all.len()
                        && got.distances.iter().zip(&all).all(|(d, a)| (d - a.0).abs() <= 1e-12);
                    let expect_avg: Vec<f64> = if all.is_empty() {
                        vec![0.0; td]
                    } else {
                        (0..td)
                            .map(|j| all.iter().map(|a| f64::from(a.3[j])).sum::<f64>() / all.len() as f64)
                            .collect()
                    };
                    let agg_ok = got.aggregated.len() == td
                        && got.aggregated.iter().zip(&expect_avg).all(|(a, b)| (a - b).abs() <= 1e-12);
                    if got.support_ids != ids || !dist_ok || !agg_ok {
                        mismatches.push(format!("size {size} T {t} exclude {exclude:?}"));
                    }
                    checked += 1;
                }
            }
        }
    }
    check(
        mismatches.is_empty(),
        format!(
            "{checked} retrievals over memory sizes 1/5/50/1000, T 1/3/5, with and without exclusion; {} mismatches{}",
            mismatches.len(),
            mismatches.first().map(|m| format!(" (first: {m})")).unwrap_or_default()
        ),
    )
}

fn c3_wavelet() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for k in 0..50 {
        let g = Grid::from_fn(256, 256, |_, _| rng.gen::<f32>());
        let levels = 1 + k % 8;
        let back = haar::inverse(&haar::forward(&g, levels).unwrap());
        let err = back
            .data
            .iter()
            .zip(g.data())
            .map(|(&a, &b)| (a - f64::from(b)).abs())
            .fold(0.0, f64::max);
        worst = worst.max(err);
    }
    let flat = Grid::filled(256, 256, 0.3712);
    let energies: Vec<f64> = [2, 8]
        .iter()
        .flat_map(|&l| detail_energies(&haar::forward(&flat, l).unwrap()))
        .collect();
    let zero = energies.iter().all(|&e| e == 0.0);
    check(
        worst <= 1e-6 && zero,
        format!("max reconstruction error {worst:.2e} on 50 images (1-8 levels); constant image detail energies all zero: {zero}"),
    )
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm(a).max(norm(b)).max(1e-300)
}

/// Relative errors of the context-vector and projection-weight gradients.
fn gradient_errors(op: EmbeddingOperator) -> (f64, f64) {
    let mut cfg = SegNetConfig::new((16, 16), 8, op);
    cfg.widths = [4, 8, 16, 32];
    cfg.concat_width = 16;
    let mut model = SegModel::new(cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 2;
    let x = Tensor::from_vec(n, 1, 16, 16, (0..n * 256).map(|_| rng.gen()).collect()).unwrap();
    let ctx: Vec<f64> = (0..n * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y: Vec<f64> = (0..n * 256).map(|_| f64::from(rng.gen::<bool>())).collect();
    model.zero_grad();
    let (_, dctx, _) = model.loss_and_gradients(&x, &ctx, &y, Mode::Train).unwrap();
    let dw = model.projection().unwrap().weight.grad.clone();
    let loss = |m: &SegModel, c: &[f64]| bce_with_logits(&m.forward_tape(&x, c, Mode::Train).unwrap().logits().data, &y).0;
    let h = 1e-4;
    let fd_ctx: Vec<f64> = (0..ctx.len())
        .map(|i| {
            let (mut p, mut q) = (ctx.clone(), ctx.clone());
            p[i] += h;
            q[i] -= h;
            (loss(&model, &p) - loss(&model, &q)) / (2.0 * h)
        })
        .collect();
    let fd_w: Vec<f64> = (0..dw.len())
        .map(|i| {
            let (mut p, mut q) = (model.clone(), model.clone());
            p.projection_mut().unwrap().weight.value[i] += h;
            q.projection_mut().unwrap().weight.value[i] -= h;
            (loss(&p, &ctx) - loss(&q, &ctx)) / (2.0 * h)
        })
        .collect();
    (rel_err(&dctx, &fd_ctx), rel_err(&dw, &fd_w))
}

fn c4_gradient_check() -> Outcome {
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for op in [EmbeddingOperator::Average, EmbeddingOperator::Sum, EmbeddingOperator::Concat] {
        let (ec, ew) = gradient_errors(op);
        worst = worst.max(ec).max(ew);
        parts.push(format!("{op}: context {ec:.2e}, projection {ew:.2e}"));
    }
    check(worst <= 1e-4, format!("relative error vs central differences (step 1e-4): {}", parts.join("; ")))
}

fn c5_baseline_equivalence() -> Outcome {
    let cfg = SegNetConfig::new((64, 64), 32, EmbeddingOperator::Sum);
    let cn = SegModel::new(cfg.clone(), 5).unwrap();
    let plain = SegModel::new(SegNetConfig { context_dim: 0, ..cfg }, 5).unwrap();
    let shared = plain.params() == cn.backbone_params();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut identical = 0;
    for _ in 0..10 {
        let x = Tensor::from_vec(1, 1, 64, 64, (0..4096).map(|_| rng.gen()).collect()).unwrap();
        let a = plain.forward(&x, &[]).unwrap();
        let b = cn.forward(&x, &[0.0; 32]).unwrap();
        if a.data.iter().zip(&b.data).all(|(p, q)| p.to_bits() == q.to_bits()) {
            identical += 1;
        }
    }
    check(
        shared && identical == 10,
        format!("shared backbone weights: {shared}; bit-identical outputs on {identical}/10 images"),
    )
}

fn synth(n: usize, shift: &ShiftSpec, seed: u64, domain: &str, resolution: usize) -> DatasetHandle {
    let opts = SynthOptions {
        domain_id: domain.into(),
        resolution,
        ..Default::default()
    };
    synth_domain_with(n, shift, seed, &opts).unwrap()
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn c6_sae() -> Outcome {
    let data = synth(130, &ShiftSpec::identity(), 6, "sae", 256);
    let masks: Vec<&Mask> = data.samples().iter().map(|s| s.mask.as_ref().unwrap()).collect();
    let (train, test) = masks.split_at(100);
    let sae = train_sae(train, &SaeConfig::default()).unwrap();
    let mut scores: Vec<f64> = test
        .iter()
        .map(|m| {
            let rec = sae.decode(&sae.encode(m).unwrap()).unwrap().threshold(0.5);
            dice(&rec, m).unwrap()
        })
        .collect();
    let med = median(&mut scores);
    let params = sae.parameter_count();
    check(
        med >= 0.90 && (5_000..=20_000).contains(&params),
        format!(
            "median held-out reconstruction Dice {med:.4} (min {:.4}) on 30 masks; {params} parameters, latent {}",
            scores[0],
            sae.latent_dim()
        ),
    )
}

const BENCH_RES: usize = 64;

/// Desk-scale synthetic benchmark: 64x64 images, so the 4 px deformation
/// nominal at 256x256 becomes 1 px.
fn benchmark_data() -> (DatasetHandle, DatasetHandle) {
    let source = synth(80, &ShiftSpec::identity(), 100, "source", BENCH_RES);
    let shift = ShiftSpec {
        gamma: 2.2,
        invert: true,
        noise_sigma: 0.05,
        bias_amplitude: 0.0,
        deform_magnitude: 4.0 * BENCH_RES as f32 / 256.0,
    };
    let target = synth(60, &shift, 200, "target", BENCH_RES);
    (source, target)
}

fn benchmark_config() -> TrainConfig {
    TrainConfig {
        resolution: BENCH_RES,
        epochs: 50,
        finetune_epochs: 50,
        source_test: 20,
        target_memory: 40,
        ..Default::default()
    }
}

const SEEDS: [u64; 3] = [0, 1, 2];

fn out_dir() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn c7_adaptation(run: &BenchmarkRun) -> Outcome {
    let r = &run.report;
    let med = |m: Variant, d: &str| r.summary(m, d).map_or(f64::NAN, |s| s.median_of_seeds);
    let in_domain = med(Variant::NoDA, "source");
    let noda = med(Variant::NoDA, "target");
    let cn1 = med(Variant::ContextNet1, "target");
    let cn2 = med(Variant::ContextNet2, "target");
    let tl = med(Variant::TransferLearnt, "target");
    let recovery = (cn2 - noda) / (tl - noda);
    let a = in_domain >= 0.90;
    let b = in_domain - noda >= 0.05;
    let c = cn2 >= cn1 - 0.01 && cn1 >= noda - 0.01;
    let d = tl > noda && recovery >= 0.5;
    let mark = |ok: bool| if ok { "ok" } else { "FAIL" };
    check(
        a && b && c && d,
        format!(
            "median of 3 seeds: in-domain NoDA {in_domain:.4}; target NoDA {noda:.4} CN1 {cn1:.4} CN2 {cn2:.4} TL {tl:.4} | \
             (a) {} (b) drop {:.4} {} (c) {} (d) gap recovery {:.1}% {}",
            mark(a),
            in_domain - noda,
            mark(b),
            mark(c),
            100.0 * recovery,
            mark(d)
        ),
    )
}

fn c8_ablations(run: &BenchmarkRun, source: &DatasetHandle, target: &DatasetHandle) -> Outcome {
    let targets = std::slice::from_ref(target);
    let grid: Vec<String> = ["10", "20", "50", "full"].iter().map(|s| s.to_string()).collect();
    let mem = ablate_memory_size(run, source, targets, &grid, &[Variant::ContextNet2]).unwrap();
    let at = |v: &str| mem.row(v, Variant::ContextNet2, "target").map_or(f64::NAN, |s| s.median_of_seeds);
    let (m50, full) = (at("50"), at("full"));

    let cfg = &run.report.config;
    let t3 = ablate(
        source,
        targets,
        cfg,
        &SEEDS,
        AblationAxis::ContextSize,
        &["3".to_string()],
        &[Variant::ContextNet2],
    )
    .unwrap();
    let c3 = t3.row("3", Variant::ContextNet2, "target").map_or(f64::NAN, |s| s.median_of_seeds);
    // the benchmark run already trained ContextNet2 with T=5 on the same seeds
    let c5 = run
        .report
        .summary(Variant::ContextNet2, "target")
        .map_or(f64::NAN, |s| s.median_of_seeds);
    let ok = (m50 - full).abs() <= 0.02 && (c3 - c5).abs() <= 0.02;
    check(
        ok,
        format!(
            "ContextNet2 target Dice: memory 50 {m50:.4} vs full {full:.4} (|d| {:.4}; 10 -> {:.4}, 20 -> {:.4}); \
             T=3 {c3:.4} vs T=5 {c5:.4} (|d| {:.4})",
            (m50 - full).abs(),
            at("10"),
            at("20"),
            (c3 - c5).abs()
        ),
    )
}

fn c9_determinism() -> Outcome {
    let source = synth(14, &ShiftSpec::identity(), 9, "src", 32);
    let target = synth(12, &ShiftSpec { gamma: 2.0, ..ShiftSpec::identity() }, 19, "tgt", 32);
    let cfg = TrainConfig {
        resolution: 32,
        epochs: 2,
        finetune_epochs: 2,
        texture_epochs: 2,
        texture_dim: 16,
        sae_epochs: 2,
        source_test: 4,
        target_memory: 6,
        ..Default::default()
    };
    let opts = BenchmarkOptions {
        keep_models: true,
        ..Default::default()
    };
    let targets = std::slice::from_ref(&target);
    let r1 = run_benchmark_with(&source, targets, &cfg, &[3, 4], &opts).unwrap();
    let r2 = run_benchmark_with(&source, targets, &cfg, &[3, 4], &opts).unwrap();
    let same_report = r1.report == r2.report && r1.report.to_jsonl() == r2.report.to_jsonl();

    let mut bundles = Vec::new();
    let mut memories = Vec::new();
    for (a, b) in r1.models.iter().zip(&r2.models) {
        bundles.extend(a.noda.iter().zip(&b.noda));
        for ((ba, ma), (bb, mb)) in a.contextnets.iter().zip(&b.contextnets) {
            bundles.push((ba, bb));
            memories.push((ma, mb));
        }
    }
    let same_bundles = !bundles.is_empty() && bundles.iter().all(|(a, b)| a.to_bytes() == b.to_bytes());
    let same_memories = !memories.is_empty() && memories.iter().all(|(a, b)| a.to_bytes() == b.to_bytes());

    let dir = tempfile::tempdir().unwrap();
    let mut round_trips = true;
    for (k, (b, _)) in bundles.iter().enumerate() {
        let path = dir.path().join(format!("{k}.ctxb"));
        b.save(&path).unwrap();
        let back = ModelBundle::load(&path).unwrap();
        round_trips &= &back == *b && back.to_bytes() == b.to_bytes();
    }
    // grow a target memory through deployment, then persist it
    let (bundle, source_memory) = r1.models[0].contextnets.last().unwrap();
    let mut state = DeploymentState::new(
        bundle.clone(),
        DeploymentState::empty_memory(bundle, "tgt").unwrap(),
        InsertionPolicy::Always,
    )
    .unwrap();
    for s in target.samples().iter().take(5) {
        state.deploy_step(&s.id, &s.image, s.mask.as_ref()).unwrap();
    }
    for (k, m) in [source_memory, state.memory().unwrap()].into_iter().enumerate() {
        let path = dir.path().join(format!("{k}.mem"));
        m.save(&path).unwrap();
        let back = DomainMemory::load(&path).unwrap();
        round_trips &= &back == m && back.to_bytes() == m.to_bytes();
    }
    check(
        same_report && same_bundles && same_memories && round_trips,
        format!(
            "repeat run: identical reports {same_report}, {} byte-identical bundles {same_bundles}, memories {same_memories}; \
             bit-exact file round trips {round_trips}",
            bundles.len()
        ),
    )
}

fn c10_real_data() -> Outcome {
    let Some(root) = std::env::var_os("CTXSEG_REAL_ROOT").map(PathBuf::from) else {
        return Outcome::Skip("CTXSEG_REAL_ROOT not set".into());
    };
    if !root.join("montgomery").is_dir() || !root.join("jsrt").is_dir() {
        return Outcome::Skip(format!("{} lacks montgomery/ and jsrt/", root.display()));
    }
    let cfg = match std::env::var_os("CTXSEG_REAL_CONFIG") {
        Some(p) => TrainConfig::load(Path::new(&p)).unwrap(),
        None => TrainConfig::default(),
    };
    let source = load_dataset_at(&root, "montgomery", Split::Train, cfg.resolution).unwrap();
    let target = load_dataset_at(&root, "jsrt", Split::Train, cfg.resolution).unwrap();
    let run = run_benchmark_with(&source, &[target], &cfg, &SEEDS, &BenchmarkOptions::default()).unwrap();
    emit_report(&run.report, &[], &out_dir().join("real")).unwrap();
    let med = |m: Variant| run.report.summary(m, "jsrt").map_or(f64::NAN, |s| s.median_of_seeds);
    let (noda, cn1, cn2) = (med(Variant::NoDA), med(Variant::ContextNet1), med(Variant::ContextNet2));
    Outcome::Info(format!(
        "JSRT Dice NoDA {noda:.4}; ContextNet1 {:+.1} pts, ContextNet2 {:+.1} pts over NoDA (reference about +6 / +7); \
         ContextNet2 {cn2:.4} (reference at least 0.90)",
        100.0 * (cn1 - noda),
        100.0 * (cn2 - noda)
    ))
}

fn main() {
    let only: Option<HashSet<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let wanted = |id: u32| only.as_ref().is_none_or(|s| s.contains(&id));
    let mut lines = Vec::new();
    let mut run_with = |id: u32, name: &'static str, limit: Option<Duration>, setup: Duration, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(id) {
            return;
        }
        let t = Instant::now();
        let outcome = f();
        let line = Line {
            id,
            name,
            outcome,
            elapsed: setup + t.elapsed(),
            limit,
        };
        print_line(&line);
        lines.push(line);
    };

    run_with(1, "metric oracle", Some(Duration::from_secs(5)), Duration::ZERO, &mut c1_metric_oracle);
    run_with(2, "retrieval oracle", Some(Duration::from_secs(30)), Duration::ZERO, &mut c2_retrieval_oracle);
    run_with(3, "wavelet correctness", Some(Duration::from_secs(10)), Duration::ZERO, &mut c3_wavelet);
    run_with(4, "gradient check", minutes(1), Duration::ZERO, &mut c4_gradient_check);
    run_with(5, "baseline equivalence", None, Duration::ZERO, &mut c5_baseline_equivalence);
    run_with(6, "shape auto-encoder quality", minutes(10), Duration::ZERO, &mut c6_sae);

    if wanted(7) || wanted(8) {
        let (source, target) = benchmark_data();
        let opts = BenchmarkOptions {
            keep_models: true,
            keep_visuals: true,
            ..Default::default()
        };
        let started = Instant::now();
        let run = run_benchmark_with(&source, std::slice::from_ref(&target), &benchmark_config(), &SEEDS, &opts).unwrap();
        let bench_time = started.elapsed();
        emit_report(&run.report, &run.visuals, &out_dir().join("synthetic")).unwrap();
        run_with(7, "adaptation trend", minutes(30), bench_time, &mut || c7_adaptation(&run));
        run_with(8, "robustness ablations", minutes(10), Duration::ZERO, &mut || c8_ablations(&run, &source, &target));
    }

    run_with(9, "persistence and determinism", None, Duration::ZERO, &mut c9_determinism);
    run_with(10, "real-data echo (informational)", None, Duration::ZERO, &mut c10_real_data);

    let failed: Vec<u32> = lines
        .iter()
        .filter(|l| matches!(l.outcome, Outcome::Fail(_)) || l.limit.is_some_and(|m| l.elapsed > m))
        .map(|l| l.id)
        .collect();
    println!(
        "acceptance: {} run, {} failed{}",
        lines.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" {failed:?}") }
    );
    if !failed.is_empty() && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}

fn print_line(l: &Line) {
    let over = l.limit.is_some_and(|m| l.elapsed > m);
    let (tag, detail) = match &l.outcome {
        Outcome::Pass(d) if over => ("FAIL", d),
        Outcome::Pass(d) => ("PASS", d),
        Outcome::Fail(d) => ("FAIL", d),
        Outcome::Skip(d) => ("SKIP", d),
        Outcome::Info(d) => ("INFO", d),
    };
    let limit = l.limit.map(|m| format!(" / limit {:.0}s", m.as_secs_f64())).unwrap_or_default();
    println!(
        "[{tag}] {:>2}. {}: {detail} ({:.1}s{limit})",
        l.id,
        l.name,
        l.elapsed.as_secs_f64()
    );
}
