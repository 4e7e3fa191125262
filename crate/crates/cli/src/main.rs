use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ctxseg_core::config::TrainConfig;
use ctxseg_core::data::{load_dataset_at, load_image_dirs, save_dataset, synth_domain_with, ShiftSpec, Split, SynthOptions};
use ctxseg_core::eval::{ablate, dice, emit_ablation, emit_report, run_benchmark_with, AblationAxis, BenchmarkOptions};
use ctxseg_core::io::write_png_mask;
use ctxseg_core::memory::DomainMemory;
use ctxseg_core::pipeline::{
    build_source_memory, preprocess_dataset, train_variant, DeploymentState, InsertionPolicy, ModelBundle, Variant,
};
use ctxseg_core::{Error, Result};

#[derive(Parser)]
#[command(name = "ctxseg", version, about = "Memory-conditioned segmentation with retraining-free domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-lobe domain.
    Synth(SynthArgs),
    /// Train a model on a source domain.
    Train(TrainArgs),
    /// Build a memory file from a domain directory.
    BuildMemory(BuildMemoryArgs),
    /// Run a trained model over a stream of images, growing its memory.
    Deploy(DeployArgs),
    /// Run the four-method benchmark.
    Eval(EvalArgs),
    /// Re-run the benchmark along one ablation axis.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Domain directory to create; its name is the domain id.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    resolution: usize,
    #[arg(long, default_value_t = 1.0)]
    gamma: f32,
    #[arg(long)]
    invert: bool,
    #[arg(long, default_value_t = 0.0)]
    noise: f32,
    #[arg(long, default_value_t = 0.0)]
    bias: f32,
    #[arg(long, default_value_t = 0.0)]
    deform: f32,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainVariant {
    Noda,
    Cn1,
    Cn2,
}

#[derive(Clone, Copy, ValueEnum)]
enum MemoryVariantArg {
    Cn1,
    Cn2,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    variant: TrainVariant,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the source memory of a context network.
    #[arg(long)]
    memory_out: Option<PathBuf>,
}

#[derive(Args)]
struct BuildMemoryArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    variant: MemoryVariantArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DeployArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Target memory; created empty when the file does not exist. Ignored
    /// by models without memory.
    #[arg(long)]
    memory: Option<PathBuf>,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    masks: Option<PathBuf>,
    #[arg(long, default_value = "never")]
    policy: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    targets: Vec<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    bench: BenchArgs,
    /// Write input | truth | prediction overlays for the first seed.
    #[arg(long)]
    overlays: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    axis: String,
    #[arg(long, value_delimiter = ',', required = true)]
    grid: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "cn1,cn2")]
    methods: Vec<String>,
    #[command(flatten)]
    bench: BenchArgs,
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    path.map_or_else(|| Ok(TrainConfig::default()), TrainConfig::load)
}

fn domain_of(dir: &Path) -> Result<(PathBuf, String)> {
    let name = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::InvalidArgument(format!("{} does not name a domain directory", dir.display())))?;
    let root = dir.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    Ok((root, name.to_string()))
}

fn load_domain(dir: &Path, cfg: &TrainConfig) -> Result<ctxseg_core::data::DatasetHandle> {
    let (root, name) = domain_of(dir)?;
    load_dataset_at(&root, &name, Split::Train, cfg.resolution)
}

fn synth(a: SynthArgs) -> Result<()> {
    let (root, name) = domain_of(&a.out)?;
    let shift = ShiftSpec {
        gamma: a.gamma,
        invert: a.invert,
        noise_sigma: a.noise,
        bias_amplitude: a.bias,
        deform_magnitude: a.deform,
    };
    let opts = SynthOptions {
        domain_id: name,
        resolution: a.resolution,
        ..Default::default()
    };
    let ds = synth_domain_with(a.n, &shift, a.seed, &opts)?;
    save_dataset(&ds, &root)?;
    log::info!("wrote {} samples to {}", ds.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let source = preprocess_dataset(&load_domain(&a.source, &cfg)?)?;
    let variant = match a.variant {
        TrainVariant::Noda => Variant::NoDA,
        TrainVariant::Cn1 => Variant::ContextNet1,
        TrainVariant::Cn2 => Variant::ContextNet2,
    };
    let (trained, memory) = train_variant(&source, variant, &cfg)?;
    if let Some(first) = trained.epoch_losses.first() {
        log::info!(
            "{variant}: loss {first:.4} -> {:.4} over {} epochs",
            trained.epoch_losses.last().unwrap_or(first),
            trained.epoch_losses.len()
        );
    }
    trained.bundle.save(&a.out)?;
    if let (Some(path), Some(m)) = (&a.memory_out, &memory) {
        m.save(path)?;
    }
    Ok(())
}

fn build_memory(a: BuildMemoryArgs) -> Result<()> {
    let bundle = ModelBundle::load(&a.bundle)?;
    let variant = match a.variant {
        MemoryVariantArg::Cn1 => Variant::ContextNet1,
        MemoryVariantArg::Cn2 => Variant::ContextNet2,
    };
    if bundle.variant != variant {
        return Err(Error::Variant(format!(
            "bundle holds a {} model, not {variant}",
            bundle.variant
        )));
    }
    let data = preprocess_dataset(&load_domain(&a.data, &bundle.config)?)?;
    let extractor = bundle
        .extractor
        .as_ref()
        .ok_or_else(|| Error::Variant("bundle lacks a texture extractor".into()))?;
    let memory = build_source_memory(&data, variant, extractor, bundle.sae.as_ref(), &bundle.config)?;
    memory.save(&a.out)?;
    log::info!("memory of {} records written to {}", memory.len(), a.out.display());
    Ok(())
}

fn deploy(a: DeployArgs) -> Result<()> {
    let policy: InsertionPolicy = a.policy.parse()?;
    let bundle = ModelBundle::load(&a.bundle)?;
    // `<domain>/images` names the domain by its parent
    let (parent, mut domain) = domain_of(&a.images)?;
    if domain == "images" {
        if let Some(name) = parent.file_name().and_then(|n| n.to_str()) {
            domain = name.to_string();
        }
    }
    let stream = load_image_dirs(
        &a.images,
        a.masks.as_deref(),
        &domain,
        Split::Test,
        bundle.config.resolution,
    )?;
    let stream = preprocess_dataset(&stream)?;
    let memory = match (bundle.variant.memory_variant(), &a.memory) {
        (None, _) => None,
        (Some(_), None) => {
            return Err(Error::InvalidArgument(format!("{} needs --memory", bundle.variant)));
        }
        (Some(mv), Some(path)) if path.exists() => Some(DomainMemory::load_expecting(path, mv)?),
        (Some(_), Some(_)) => DeploymentState::empty_memory(&bundle, &domain)?,
    };
    let mut state = DeploymentState::new(bundle, memory, policy)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut log_lines = Vec::new();
    for s in stream.samples() {
        let out = state.deploy_step(&s.id, &s.image, s.mask.as_ref())?;
        write_png_mask(&a.out.join(format!("{}.png", s.id)), &out.mask)?;
        let score = match &s.mask {
            Some(m) => format!("{:.6}", dice(&out.mask, m)?),
            None => "-".into(),
        };
        log_lines.push(format!(
            "{}\tinserted={}\tmissing_annotation={}\tdice={score}",
            s.id, out.inserted, out.missing_annotation
        ));
    }
    log_lines.push(String::new());
    let log_path = a.out.join("steps.tsv");
    fs::write(&log_path, log_lines.join("\n")).map_err(|e| Error::io(&log_path, e))?;
    if let (Some(m), Some(path)) = (state.memory(), &a.memory) {
        m.save(path)?;
        log::info!("memory now holds {} records", m.len());
    }
    if !state.flagged().is_empty() {
        log::warn!("{} images skipped for lack of annotation", state.flagged().len());
    }
    Ok(())
}

fn load_bench(b: &BenchArgs) -> Result<(TrainConfig, ctxseg_core::data::DatasetHandle, Vec<ctxseg_core::data::DatasetHandle>)> {
    let cfg = load_config(b.config.as_deref())?;
    let source = load_domain(&b.source, &cfg)?;
    let targets = b
        .targets
        .iter()
        .map(|t| load_domain(t, &cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok((cfg, source, targets))
}

fn eval(a: EvalArgs) -> Result<()> {
    let (cfg, source, targets) = load_bench(&a.bench)?;
    let opts = BenchmarkOptions {
        keep_visuals: a.overlays,
        ..Default::default()
    };
    let run = run_benchmark_with(&source, &targets, &cfg, &a.bench.seeds, &opts)?;
    emit_report(&run.report, &run.visuals, &a.bench.out)?;
    print!("{}", run.report.to_table());
    Ok(())
}

fn ablation(a: AblateArgs) -> Result<()> {
    let axis: AblationAxis = a.axis.parse()?;
    let methods = a
        .methods
        .iter()
        .map(|m| m.parse::<Variant>())
        .collect::<Result<Vec<_>>>()?;
    let (cfg, source, targets) = load_bench(&a.bench)?;
    let report = ablate(&source, &targets, &cfg, &a.bench.seeds, axis, &a.grid, &methods)?;
    emit_ablation(&report, &a.bench.out)?;
    print!("{}", report.to_table());
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_usage_error() {
        1
    } else if e.is_data_error() {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::BuildMemory(a) => build_memory(a),
        Command::Deploy(a) => deploy(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablation(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
