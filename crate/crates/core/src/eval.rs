//! Dice scoring, the four-method benchmark, ablations and report files.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::DatasetHandle;
use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::io::write_png_rgb;
use crate::memory::DomainMemory;
use crate::pipeline::{
    build_source_memory, fit_feature_kit, preprocess_dataset, train_contextnet, train_noda, transfer_learn,
    DeploymentState, InsertionPolicy, ModelBundle, Variant,
};
use crate::segnet::EmbeddingOperator;

/// `2|A∩B| / (|A|+|B|)`, with two empty masks scoring 1.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::Dimension(format!(
            "prediction is {}x{}, ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let (mut inter, mut total) = (0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        inter += (a & b) as usize;
        total += (a + b) as usize;
    }
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    })
}

/// Dice of one test image under one method and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub method: Variant,
    pub target: String,
    pub seed: u64,
    pub sample: String,
    pub dice: f64,
}

/// Aggregate over every (seed, sample) case of one method on one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub method: Variant,
    pub target: String,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
    /// Mean Dice of each seed, in seed-list order.
    pub seed_means: Vec<f64>,
    pub median_of_seeds: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    match s.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => s[n / 2],
        n => 0.5 * (s[n / 2 - 1] + s[n / 2]),
    }
}

/// Per-image Dice averaged per method and domain.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub source: String,
    pub targets: Vec<String>,
    pub seeds: Vec<u64>,
    pub config: TrainConfig,
    /// Ordered by seed, then domain (source first), method and sample id.
    pub cases: Vec<CaseResult>,
}

impl BenchmarkReport {
    pub fn methods(&self) -> Vec<Variant> {
        let mut m: Vec<Variant> = self.cases.iter().map(|c| c.method).collect();
        m.sort();
        m.dedup();
        m
    }

    pub fn summary(&self, method: Variant, target: &str) -> Option<Summary> {
        let cases: Vec<&CaseResult> = self
            .cases
            .iter()
            .filter(|c| c.method == method && c.target == target)
            .collect();
        if cases.is_empty() {
            return None;
        }
        let all: Vec<f64> = cases.iter().map(|c| c.dice).collect();
        let m = mean(&all);
        let std = (all.iter().map(|d| (d - m).powi(2)).sum::<f64>() / all.len() as f64).sqrt();
        let seed_means: Vec<f64> = self
            .seeds
            .iter()
            .map(|&s| {
                let v: Vec<f64> = cases.iter().filter(|c| c.seed == s).map(|c| c.dice).collect();
                mean(&v)
            })
            .collect();
        Some(Summary {
            method,
            target: target.to_string(),
            mean: m,
            std,
            count: all.len(),
            median_of_seeds: median(&seed_means),
            seed_means,
        })
    }

    /// Method x target rows, targets outermost.
    pub fn rows(&self) -> Vec<Summary> {
        self.targets
            .iter()
            .flat_map(|t| self.methods().into_iter().filter_map(move |m| self.summary(m, t)))
            .collect()
    }

    /// Rows for the held-out source split.
    pub fn in_domain(&self) -> Vec<Summary> {
        self.methods()
            .into_iter()
            .filter_map(|m| self.summary(m, &self.source))
            .collect()
    }

    /// Line-delimited JSON: a header record, then one record per case, then
    /// derived summaries (ignored when parsing).
    pub fn to_jsonl(&self) -> String {
        let mut lines = vec![serde_json::to_string(&Record::Meta {
            source: self.source.clone(),
            targets: self.targets.clone(),
            seeds: self.seeds.clone(),
            dice: "per-image mean".into(),
            config: self.config.to_text(),
        })
        .expect("serializable")];
        lines.extend(
            self.cases
                .iter()
                .map(|c| serde_json::to_string(&Record::Case(c.clone())).expect("serializable")),
        );
        for s in self.in_domain().into_iter().chain(self.rows()) {
            lines.push(serde_json::to_string(&Record::from(&s)).expect("serializable"));
        }
        lines.join("\n") + "\n"
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut header = None;
        let mut cases = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: Record =
                serde_json::from_str(line).map_err(|e| Error::Format(format!("results line {}: {e}", i + 1)))?;
            match rec {
                Record::Meta {
                    source,
                    targets,
                    seeds,
                    config,
                    ..
                } => header = Some((source, targets, seeds, TrainConfig::parse(&config)?)),
                Record::Case(c) => cases.push(c),
                Record::Summary { .. } => {}
            }
        }
        let (source, targets, seeds, config) =
            header.ok_or_else(|| Error::Format("results file lacks a meta record".into()))?;
        Ok(Self {
            source,
            targets,
            seeds,
            config,
            cases,
        })
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "source {}  seeds {:?}  dice: per-image mean\n",
            self.source, self.seeds
        );
        out += &summary_table(&self.in_domain().into_iter().chain(self.rows()).collect::<Vec<_>>(), None);
        out
    }
}

fn summary_table(rows: &[Summary], value: Option<&[String]>) -> String {
    let mut out = String::new();
    let label = if value.is_some() { "value" } else { "" };
    out += &format!(
        "{label:<8}{:<16}{:<16}{:>8}{:>8}{:>6}{:>14}\n",
        "method", "domain", "mean", "std", "n", "seed-median"
    );
    for (i, s) in rows.iter().enumerate() {
        let v = value.map_or("", |v| v[i].as_str());
        out += &format!(
            "{v:<8}{:<16}{:<16}{:>8.4}{:>8.4}{:>6}{:>14.4}\n",
            s.method.to_string(),
            s.target,
            s.mean,
            s.std,
            s.count,
            s.median_of_seeds
        );
    }
    out
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Record {
    Meta {
        source: String,
        targets: Vec<String>,
        seeds: Vec<u64>,
        dice: String,
        config: String,
    },
    Case(CaseResult),
    Summary {
        method: Variant,
        target: String,
        mean: f64,
        std: f64,
        count: usize,
        seed_means: Vec<f64>,
        median_of_seeds: f64,
    },
}

impl From<&Summary> for Record {
    fn from(s: &Summary) -> Self {
        Record::Summary {
            method: s.method,
            target: s.target.clone(),
            mean: s.mean,
            std: s.std,
            count: s.count,
            seed_means: s.seed_means.clone(),
            median_of_seeds: s.median_of_seeds,
        }
    }
}

/// Input, ground truth and prediction of one scored case.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseVisual {
    pub method: Variant,
    pub target: String,
    pub sample: String,
    pub image: Grid,
    pub truth: Mask,
    pub prediction: Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkOptions {
    pub methods: Vec<Variant>,
    /// Keep per-case images of the first seed for overlays.
    pub keep_visuals: bool,
    /// Histogram-equalize all images first.
    pub preprocess: bool,
    /// Return the source-trained models of every seed.
    pub keep_models: bool,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        Self {
            methods: Variant::ALL.to_vec(),
            keep_visuals: false,
            preprocess: true,
            keep_models: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRun {
    pub report: BenchmarkReport,
    pub visuals: Vec<CaseVisual>,
    pub models: Vec<SourceModels>,
}

/// Models trained on the source split for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceModels {
    pub seed: u64,
    pub noda: Option<ModelBundle>,
    /// Context networks with the source memories they were trained on.
    pub contextnets: Vec<(ModelBundle, DomainMemory)>,
}

fn train_source_models(train: &DatasetHandle, cfg: &TrainConfig, methods: &[Variant]) -> Result<SourceModels> {
    let wants = |v: Variant| methods.contains(&v);
    let noda = if wants(Variant::NoDA) || wants(Variant::TransferLearnt) {
        log::info!("seed {}: training NoDA", cfg.seed);
        Some(train_noda(train, cfg).map_err(|e| e.in_stage("NoDA training"))?.bundle)
    } else {
        None
    };
    let mut contextnets = Vec::new();
    let cn: Vec<Variant> = methods.iter().copied().filter(|v| v.is_contextnet()).collect();
    if !cn.is_empty() {
        log::info!("seed {}: training feature extractors", cfg.seed);
        let kit = fit_feature_kit(train, cn.contains(&Variant::ContextNet2), cfg)
            .map_err(|e| e.in_stage("feature extractor training"))?;
        for v in cn {
            log::info!("seed {}: training {v}", cfg.seed);
            let kit_v = if v == Variant::ContextNet2 { kit.clone() } else { kit.texture_only() };
            let memory = build_source_memory(train, v, &kit_v.extractor, kit_v.sae.as_ref(), cfg)
                .map_err(|e| e.in_stage(format!("{v} source memory")))?;
            let trained =
                train_contextnet(train, &memory, v, &kit_v, cfg).map_err(|e| e.in_stage(format!("{v} training")))?;
            contextnets.push((trained.bundle, memory));
        }
    }
    Ok(SourceModels {
        seed: cfg.seed,
        noda,
        contextnets,
    })
}

fn score(
    state: &DeploymentState,
    test: &DatasetHandle,
    seed: u64,
    keep: bool,
    cases: &mut Vec<CaseResult>,
    visuals: &mut Vec<CaseVisual>,
) -> Result<()> {
    let method = state.bundle().variant;
    for s in test.samples() {
        let truth = s
            .mask
            .as_ref()
            .ok_or_else(|| Error::Data(format!("test sample {} has no mask", s.id)))?;
        let prediction = state.infer(&s.image)?.threshold(0.5);
        cases.push(CaseResult {
            method,
            target: test.domain_id().to_string(),
            seed,
            sample: s.id.clone(),
            dice: dice(&prediction, truth)?,
        });
        if keep {
            visuals.push(CaseVisual {
                method,
                target: test.domain_id().to_string(),
                sample: s.id.clone(),
                image: s.image.clone(),
                truth: truth.clone(),
                prediction,
            });
        }
    }
    Ok(())
}

/// Context network deployed on a target: memory filled from `memory_split`
/// (annotations used only by the shape-carrying variant), then frozen.
fn target_state(bundle: &ModelBundle, memory_split: &DatasetHandle, capacity: Option<usize>) -> Result<DeploymentState> {
    let mut b = bundle.clone();
    b.config.memory_capacity = capacity;
    let memory = DeploymentState::empty_memory(&b, memory_split.domain_id())?;
    let mut state = DeploymentState::new(bundle.clone(), memory, InsertionPolicy::Never)?;
    let seeds = if bundle.variant == Variant::ContextNet2 {
        memory_split.clone()
    } else {
        memory_split.without_masks()
    };
    state.warm_start(seeds.samples())?;
    Ok(state)
}

struct Splits {
    src_train: DatasetHandle,
    src_test: DatasetHandle,
    targets: Vec<(DatasetHandle, DatasetHandle)>,
}

fn make_splits(source: &DatasetHandle, targets: &[DatasetHandle], cfg: &TrainConfig, preprocess: bool) -> Result<Splits> {
    let prep = |d: &DatasetHandle| if preprocess { preprocess_dataset(d) } else { Ok(d.clone()) };
    if source.len() <= cfg.source_test {
        return Err(Error::Data(format!(
            "source has {} samples, needs more than source_test={}",
            source.len(),
            cfg.source_test
        )));
    }
    let mut seen = vec![source.domain_id()];
    for t in targets {
        if seen.contains(&t.domain_id()) {
            return Err(Error::Data(format!("domain id {} appears twice", t.domain_id())));
        }
        seen.push(t.domain_id());
        if t.len() <= cfg.target_memory {
            return Err(Error::Data(format!(
                "target {} has {} samples, needs more than target_memory={}",
                t.domain_id(),
                t.len(),
                cfg.target_memory
            )));
        }
    }
    let source = prep(source)?;
    let (src_train, src_test) = source.split_at(
        source.len() - cfg.source_test,
        crate::data::Split::Train,
        crate::data::Split::Test,
    );
    let targets = targets
        .iter()
        .map(|t| {
            let t = prep(t)?;
            Ok(t.split_at(cfg.target_memory, crate::data::Split::Train, crate::data::Split::Test))
        })
        .collect::<Result<_>>()?;
    Ok(Splits {
        src_train,
        src_test,
        targets,
    })
}

#[allow(clippy::too_many_arguments)]
fn evaluate_seed(
    models: &SourceModels,
    splits: &Splits,
    cfg: &TrainConfig,
    methods: &[Variant],
    capacity: Option<usize>,
    keep: bool,
    cases: &mut Vec<CaseResult>,
    visuals: &mut Vec<CaseVisual>,
) -> Result<()> {
    let seed = cfg.seed;
    let wants = |v: Variant| methods.contains(&v);
    if let Some(noda) = models.noda.as_ref().filter(|_| wants(Variant::NoDA)) {
        let state = DeploymentState::new(noda.clone(), None, InsertionPolicy::Never)?;
        score(&state, &splits.src_test, seed, keep, cases, visuals)?;
    }
    for (bundle, memory) in &models.contextnets {
        let state = DeploymentState::new(bundle.clone(), Some(memory.clone()), InsertionPolicy::Never)?;
        score(&state, &splits.src_test, seed, keep, cases, visuals)?;
    }
    for (t_mem, t_test) in &splits.targets {
        let stage = |what: &str| format!("{what} on target {}", t_test.domain_id());
        if let Some(noda) = models.noda.as_ref() {
            if wants(Variant::NoDA) {
                let state = DeploymentState::new(noda.clone(), None, InsertionPolicy::Never)?;
                score(&state, t_test, seed, keep, cases, visuals).map_err(|e| e.in_stage(stage("NoDA scoring")))?;
            }
        }
        for (bundle, _) in &models.contextnets {
            let state = target_state(bundle, t_mem, capacity)
                .map_err(|e| e.in_stage(stage(&format!("{} memory", bundle.variant))))?;
            score(&state, t_test, seed, keep, cases, visuals)
                .map_err(|e| e.in_stage(stage(&format!("{} scoring", bundle.variant))))?;
        }
        if let (Some(noda), true) = (models.noda.as_ref(), wants(Variant::TransferLearnt)) {
            log::info!("seed {seed}: fine-tuning on {}", t_mem.domain_id());
            let tl = transfer_learn(noda, t_mem, cfg).map_err(|e| e.in_stage(stage("transfer learning")))?;
            let state = DeploymentState::new(tl.bundle, None, InsertionPolicy::Never)?;
            score(&state, t_test, seed, keep, cases, visuals)
                .map_err(|e| e.in_stage(stage("TransferLearnt scoring")))?;
        }
    }
    Ok(())
}

fn sort_cases(cases: &mut [CaseResult], order: &[String], seeds: &[u64]) {
    let pos = |t: &str| order.iter().position(|o| o == t).unwrap_or(usize::MAX);
    let spos = |s: u64| seeds.iter().position(|&o| o == s).unwrap_or(usize::MAX);
    cases.sort_by(|a, b| {
        (spos(a.seed), pos(&a.target), a.method, &a.sample).cmp(&(spos(b.seed), pos(&b.target), b.method, &b.sample))
    });
}

/// Trains NoDA, ContextNet1 and ContextNet2 on the source training split,
/// fine-tunes TransferLearnt per target, and scores every method on the
/// held-out source split and every target test split.
pub fn run_benchmark(
    source: &DatasetHandle,
    targets: &[DatasetHandle],
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<BenchmarkReport> {
    run_benchmark_with(source, targets, cfg, seeds, &BenchmarkOptions::default()).map(|r| r.report)
}

pub fn run_benchmark_with(
    source: &DatasetHandle,
    targets: &[DatasetHandle],
    cfg: &TrainConfig,
    seeds: &[u64],
    opts: &BenchmarkOptions,
) -> Result<BenchmarkRun> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("at least one seed is required".into()));
    }
    cfg.validate()?;
    let splits = make_splits(source, targets, cfg, opts.preprocess).map_err(|e| e.in_stage("data preparation"))?;
    let mut cases = Vec::new();
    let mut visuals = Vec::new();
    let mut kept = Vec::new();
    for (k, &seed) in seeds.iter().enumerate() {
        let cfg = TrainConfig { seed, ..cfg.clone() };
        let models = train_source_models(&splits.src_train, &cfg, &opts.methods)?;
        evaluate_seed(
            &models,
            &splits,
            &cfg,
            &opts.methods,
            cfg.memory_capacity,
            opts.keep_visuals && k == 0,
            &mut cases,
            &mut visuals,
        )?;
        if opts.keep_models {
            kept.push(models);
        }
    }
    let order: Vec<String> = std::iter::once(source.domain_id().to_string())
        .chain(targets.iter().map(|t| t.domain_id().to_string()))
        .collect();
    sort_cases(&mut cases, &order, seeds);
    Ok(BenchmarkRun {
        report: BenchmarkReport {
            source: source.domain_id().to_string(),
            targets: order[1..].to_vec(),
            seeds: seeds.to_vec(),
            config: cfg.clone(),
            cases,
        },
        visuals,
        models: kept,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AblationAxis {
    ContextSize,
    MemorySize,
    Operator,
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ContextSize => "context_size",
            Self::MemorySize => "memory_size",
            Self::Operator => "operator",
        })
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "context_size" => Ok(Self::ContextSize),
            "memory_size" => Ok(Self::MemorySize),
            "operator" => Ok(Self::Operator),
            other => Err(Error::InvalidArgument(format!("unknown ablation axis {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub value: String,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub grid: Vec<String>,
    pub seeds: Vec<u64>,
    /// Grid-value-major; targets, then methods, within each value.
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, value: &str, method: Variant, target: &str) -> Option<&Summary> {
        self.rows
            .iter()
            .find(|r| r.value == value && r.summary.method == method && r.summary.target == target)
            .map(|r| &r.summary)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let s = &r.summary;
            let v = serde_json::json!({
                "axis": self.axis.to_string(),
                "value": r.value,
                "method": s.method,
                "target": s.target,
                "mean": s.mean,
                "std": s.std,
                "count": s.count,
                "seed_means": s.seed_means,
                "median_of_seeds": s.median_of_seeds,
            });
            out += &v.to_string();
            out.push('\n');
        }
        out
    }

    pub fn to_table(&self) -> String {
        let values: Vec<String> = self.rows.iter().map(|r| r.value.clone()).collect();
        let rows: Vec<Summary> = self.rows.iter().map(|r| r.summary.clone()).collect();
        format!("axis {}  seeds {:?}\n", self.axis, self.seeds) + &summary_table(&rows, Some(&values))
    }
}

fn config_for(axis: AblationAxis, value: &str, base: &TrainConfig) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    match axis {
        AblationAxis::ContextSize => cfg.set("context_size", value)?,
        AblationAxis::Operator => cfg.operator = value.parse::<EmbeddingOperator>()?,
        AblationAxis::MemorySize => cfg.set("memory_capacity", value)?,
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Re-evaluates the context networks along one axis. The memory axis is
/// inference-only and reuses one set of trained models per seed; the other
/// axes retrain.
pub fn ablate(
    source: &DatasetHandle,
    targets: &[DatasetHandle],
    cfg: &TrainConfig,
    seeds: &[u64],
    axis: AblationAxis,
    grid: &[String],
    methods: &[Variant],
) -> Result<AblationReport> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("ablation grid is empty".into()));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("at least one seed is required".into()));
    }
    let methods: Vec<Variant> = methods.iter().copied().filter(|m| m.is_contextnet()).collect();
    if methods.is_empty() {
        return Err(Error::InvalidArgument("ablations need ContextNet1 or ContextNet2".into()));
    }
    let configs: Vec<TrainConfig> = grid
        .iter()
        .map(|v| config_for(axis, v, cfg))
        .collect::<Result<_>>()?;
    let opts = BenchmarkOptions {
        methods: methods.clone(),
        ..Default::default()
    };
    let reports: Vec<BenchmarkReport> = match axis {
        AblationAxis::ContextSize | AblationAxis::Operator => configs
            .iter()
            .map(|c| run_benchmark_with(source, targets, c, seeds, &opts).map(|r| r.report))
            .collect::<Result<_>>()?,
        AblationAxis::MemorySize => {
            let splits = make_splits(source, targets, cfg, true).map_err(|e| e.in_stage("data preparation"))?;
            let models = seeds
                .iter()
                .map(|&seed| train_source_models(&splits.src_train, &TrainConfig { seed, ..cfg.clone() }, &methods))
                .collect::<Result<Vec<_>>>()?;
            return memory_ablation(&models, &splits, cfg, grid, &configs, &methods);
        }
    };
    Ok(ablation_rows(axis, grid, seeds, &reports))
}

fn ablation_rows(axis: AblationAxis, grid: &[String], seeds: &[u64], reports: &[BenchmarkReport]) -> AblationReport {
    let rows = grid
        .iter()
        .zip(reports)
        .flat_map(|(v, r)| {
            r.rows().into_iter().map(move |summary| AblationRow {
                value: v.clone(),
                summary,
            })
        })
        .collect();
    AblationReport {
        axis,
        grid: grid.to_vec(),
        seeds: seeds.to_vec(),
        rows,
    }
}

fn memory_ablation(
    models: &[SourceModels],
    splits: &Splits,
    cfg: &TrainConfig,
    grid: &[String],
    configs: &[TrainConfig],
    methods: &[Variant],
) -> Result<AblationReport> {
    let mut per_value: Vec<Vec<CaseResult>> = vec![Vec::new(); grid.len()];
    for m in models {
        let seed_cfg = TrainConfig { seed: m.seed, ..cfg.clone() };
        for (c, cases) in configs.iter().zip(&mut per_value) {
            evaluate_seed(m, splits, &seed_cfg, methods, c.memory_capacity, false, cases, &mut Vec::new())?;
        }
    }
    let seeds: Vec<u64> = models.iter().map(|m| m.seed).collect();
    let order: Vec<String> = splits.targets.iter().map(|(t, _)| t.domain_id().to_string()).collect();
    let reports: Vec<BenchmarkReport> = configs
        .iter()
        .zip(per_value)
        .map(|(c, cases)| BenchmarkReport {
            source: splits.src_train.domain_id().to_string(),
            targets: order.clone(),
            seeds: seeds.clone(),
            config: c.clone(),
            cases,
        })
        .collect();
    Ok(ablation_rows(AblationAxis::MemorySize, grid, &seeds, &reports))
}

/// Memory-size ablation on models already trained by
/// [`run_benchmark_with`] (`keep_models`); inference only.
pub fn ablate_memory_size(
    run: &BenchmarkRun,
    source: &DatasetHandle,
    targets: &[DatasetHandle],
    grid: &[String],
    methods: &[Variant],
) -> Result<AblationReport> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("ablation grid is empty".into()));
    }
    if run.models.is_empty() {
        return Err(Error::InvalidArgument("benchmark run kept no models".into()));
    }
    let cfg = &run.report.config;
    let configs: Vec<TrainConfig> = grid
        .iter()
        .map(|v| config_for(AblationAxis::MemorySize, v, cfg))
        .collect::<Result<_>>()?;
    let splits = make_splits(source, targets, cfg, true).map_err(|e| e.in_stage("data preparation"))?;
    let methods: Vec<Variant> = methods.iter().copied().filter(|m| m.is_contextnet()).collect();
    memory_ablation(&run.models, &splits, cfg, grid, &configs, &methods)
}

const METHOD_COLORS: [[u8; 3]; 4] = [[150, 150, 150], [66, 133, 244], [52, 168, 83], [234, 67, 53]];

fn method_color(m: Variant) -> [u8; 3] {
    METHOD_COLORS[Variant::ALL.iter().position(|&v| v == m).unwrap_or(0)]
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Input | ground truth | prediction, masks tinted over the image.
fn overlay_png(path: &Path, v: &CaseVisual) -> Result<()> {
    let (h, w) = v.image.dims();
    let width = 3 * w;
    let mut rgb = vec![0u8; width * h * 3];
    for y in 0..h {
        for x in 0..w {
            let g = (v.image.get(y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
            let panels = [
                [g, g, g],
                if v.truth.get(y, x) { [g / 2, 255, g / 2] } else { [g, g, g] },
                if v.prediction.get(y, x) { [255, g / 2, g / 2] } else { [g, g, g] },
            ];
            for (p, px) in panels.iter().enumerate() {
                let i = (y * width + p * w + x) * 3;
                rgb[i..i + 3].copy_from_slice(px);
            }
        }
    }
    write_png_rgb(path, width, h, rgb)
}

/// Bars of mean Dice per method on a [0, 1] axis with a one-std whisker.
fn bar_plot_png(path: &Path, rows: &[Summary]) -> Result<()> {
    let (w, h, pad, bar_w) = (60 + 70 * rows.len().max(1), 240usize, 20usize, 40usize);
    let plot_h = h - 2 * pad;
    let mut rgb = vec![255u8; w * h * 3];
    let mut put = |x: usize, y: usize, c: [u8; 3]| {
        if x < w && y < h {
            let i = (y * w + x) * 3;
            rgb[i..i + 3].copy_from_slice(&c);
        }
    };
    let y_of = |v: f64| pad + plot_h - (v.clamp(0.0, 1.0) * plot_h as f64).round() as usize;
    for k in 0..=4 {
        let y = y_of(k as f64 / 4.0);
        for x in pad..w - pad {
            put(x, y, if k == 0 { [0, 0, 0] } else { [220, 220, 220] });
        }
    }
    for (i, s) in rows.iter().enumerate() {
        let x0 = pad + 30 + i * 70;
        for y in y_of(s.mean)..y_of(0.0) {
            for x in x0..x0 + bar_w {
                put(x, y, method_color(s.method));
            }
        }
        let cx = x0 + bar_w / 2;
        for y in y_of(s.mean + s.std)..=y_of(s.mean - s.std) {
            put(cx, y, [0, 0, 0]);
        }
    }
    write_png_rgb(path, w, h, rgb)
}

fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes `results.jsonl`, `table.txt`, one bar plot per domain under
/// `plots/`, and one overlay per visual under `overlays/<method>/<domain>/`.
pub fn emit_report(report: &BenchmarkReport, visuals: &[CaseVisual], out_dir: &Path) -> Result<()> {
    mkdir(out_dir)?;
    write_file(&out_dir.join("results.jsonl"), &report.to_jsonl())?;
    write_file(&out_dir.join("table.txt"), &report.to_table())?;
    let plots = out_dir.join("plots");
    mkdir(&plots)?;
    let in_domain = report.in_domain();
    if !in_domain.is_empty() {
        bar_plot_png(&plots.join(format!("{}.png", file_safe(&report.source))), &in_domain)?;
    }
    for t in &report.targets {
        let rows: Vec<Summary> = report.rows().into_iter().filter(|r| &r.target == t).collect();
        bar_plot_png(&plots.join(format!("{}.png", file_safe(t))), &rows)?;
    }
    for v in visuals {
        let dir = out_dir
            .join("overlays")
            .join(v.method.short_name())
            .join(file_safe(&v.target));
        mkdir(&dir)?;
        overlay_png(&dir.join(format!("{}.png", file_safe(&v.sample))), v)?;
    }
    Ok(())
}

/// Writes `ablation.jsonl` and `ablation.txt`.
pub fn emit_ablation(report: &AblationReport, out_dir: &Path) -> Result<()> {
    mkdir(out_dir)?;
    write_file(&out_dir.join("ablation.jsonl"), &report.to_jsonl())?;
    write_file(&out_dir.join("ablation.txt"), &report.to_table())
}
