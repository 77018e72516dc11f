//! `penh`: synthesize training pairs, train, enhance, evaluate and benchmark.

mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use penh_core::checkpoint::{load_checkpoint, load_generator};
use penh_core::dataset::MANIFEST_FILE;
use penh_core::degrade::{list_images, CorpusSummary, DEGRADED_DIR, REFERENCE_DIR};
use penh_core::metrics::{Identity, BENCH_CSV, BENCH_RESOLUTIONS, MIN_BENCH_RUNS};
use penh_core::trainer::{latest_checkpoint, read_log, FINAL_CHECKPOINT, TRAIN_LOG_FILE};
use penh_core::{
    bench_inference, build_manifest, degrade_corpus, evaluate, fit, load_image, save_image, split_manifest, DegradeConfig,
    DegradeMode, DeltaEFormula, Error, ExtractorSpec, Generator, GeneratorConfig, NetVariant, PairManifest, Scalar,
    Split, SplitStrategy, TrainConfig,
};

const EXIT_INPUT: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const DEVICE_ENV: &str = "PENH_DEVICE";
pub const LOSS_PLOT: &str = "loss_curve.svg";

#[derive(Parser)]
#[command(name = "penh", version, about = "Medical image enhancement toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Layered {
    /// TOML file with configuration keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override, dotted keys for nested fields; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Degrade a directory of clean images into paired training data and a manifest.
    Synth(SynthArgs),
    /// Train a generator on a manifest.
    Train(TrainArgs),
    /// Enhance an image or a directory of images.
    Enhance(EnhanceArgs),
    /// Score enhanced images against references.
    Evaluate(EvaluateArgs),
    /// Time full-image inference at several resolutions.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    #[value(name = "noise_only", alias = "noise-only")]
    NoiseOnly,
}

#[derive(Args)]
struct SynthArgs {
    src: PathBuf,
    out: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Noise std ceiling in 8-bit units for the chosen mode.
    #[arg(long)]
    sigma_max: Option<f64>,
    #[arg(long)]
    brightness_threshold: Option<f64>,
    #[arg(long)]
    r_max: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON object mapping image keys to categories.
    #[arg(long)]
    categories: Option<PathBuf>,
    #[arg(long, default_value_t = 0.8)]
    train_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    val_frac: f64,
    /// Hash-threshold split that stays stable when images are added.
    #[arg(long)]
    stable_split: bool,
    #[command(flatten)]
    layered: Layered,
}

#[derive(Clone, Copy, ValueEnum)]
enum DTypeArg {
    F32,
    F64,
}

#[derive(Args)]
struct TrainArgs {
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// base, res, res-gate, res-gate-rfl or full.
    #[arg(long)]
    variant: Option<NetVariant>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    crop_side: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    max_steps: Option<u64>,
    /// VGG-19 weight archive for the feature loss; a seeded random extractor otherwise.
    #[arg(long)]
    vgg19: Option<PathBuf>,
    #[arg(long)]
    deterministic: bool,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "f32")]
    dtype: DTypeArg,
    #[command(flatten)]
    layered: Layered,
}

#[derive(Args)]
struct EnhanceArgs {
    checkpoint: PathBuf,
    input: PathBuf,
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormulaArg {
    Ciede2000,
    Cie76,
}

#[derive(Args)]
#[group(id = "source", required = true, multiple = false)]
struct EnhancerSource {
    #[arg(long, group = "source")]
    checkpoint: Option<PathBuf>,
    /// Score the degraded images unchanged.
    #[arg(long, group = "source")]
    identity: bool,
    /// Score the references against themselves.
    #[arg(long, group = "source")]
    perfect: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    manifest: PathBuf,
    #[command(flatten)]
    source: EnhancerSource,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, value_enum, default_value = "ciede2000")]
    formula: FormulaArg,
    /// Directory for report.json and report.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Randomly initialized default network when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = BENCH_RESOLUTIONS)]
    resolutions: Vec<usize>,
    #[arg(long, default_value_t = MIN_BENCH_RUNS)]
    runs: usize,
    /// Directory for bench.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure with its exit status.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Divergence { .. } => EXIT_DIVERGED,
            Error::Io { .. } => 1,
            _ => EXIT_INPUT,
        };
        Failure { code, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: EXIT_INPUT, message: message.into() }
}

type CliResult = Result<(), Failure>;

fn synth(args: SynthArgs) -> CliResult {
    let mut cfg: DegradeConfig = config::resolve(args.layered.config.as_deref(), &args.layered.overrides).map_err(usage)?;
    if let Some(mode) = args.mode {
        cfg.mode = match mode {
            ModeArg::Full => DegradeMode::Full,
            ModeArg::NoiseOnly => DegradeMode::NoiseOnly,
        };
    }
    if let Some(s) = args.sigma_max {
        match cfg.mode {
            DegradeMode::Full => cfg.sigma_max = s,
            DegradeMode::NoiseOnly => cfg.noise_only_sigma_max = s,
        }
    }
    if let Some(v) = args.brightness_threshold {
        cfg.brightness_threshold = v;
    }
    if let Some(v) = args.r_max {
        cfg.r_max = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }

    let CorpusSummary { total, accepted, skipped } = degrade_corpus(&args.src, &args.out, &cfg)?;
    println!("images: {total}  accepted: {accepted}  skipped: {skipped}");
    if accepted == 0 {
        return Err(usage("empty corpus: every image failed the luminance gate"));
    }
    let manifest = build_manifest(&args.out.join(DEGRADED_DIR), &args.out.join(REFERENCE_DIR), args.categories.as_deref())?;
    let strategy = if args.stable_split { SplitStrategy::Hashed } else { SplitStrategy::Ranked };
    let manifest = split_manifest(&manifest, args.train_frac, args.val_frac, cfg.seed, strategy)?;
    let path = args.out.join(MANIFEST_FILE);
    manifest.save(&path)?;
    println!(
        "manifest: {}  (train {}, val {}, test {})",
        path.display(),
        manifest.count(Split::Train),
        manifest.count(Split::Val),
        manifest.count(Split::Test)
    );
    Ok(())
}

fn train_config(args: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut cfg: TrainConfig = config::resolve(args.layered.config.as_deref(), &args.layered.overrides).map_err(usage)?;
    if let Some(v) = args.variant {
        cfg.variant = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.crop_side {
        cfg.crop_side = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    if args.max_steps.is_some() {
        cfg.max_steps = args.max_steps;
    }
    if let Some(path) = &args.vgg19 {
        cfg.extractor = ExtractorSpec::vgg19(path);
    }
    cfg.deterministic |= args.deterministic;
    cfg.validate()?;
    Ok(cfg)
}

fn train_typed<T: Scalar>(args: &TrainArgs, cfg: &TrainConfig, manifest: &PairManifest) -> CliResult {
    let resume = match &args.resume {
        Some(path) => {
            let mut state = load_checkpoint::<T>(path)?;
            state.config.epochs = cfg.epochs;
            state.config.max_steps = cfg.max_steps;
            state.config.checkpoint_every = cfg.checkpoint_every;
            Some(state)
        }
        None => None,
    };
    let run_cfg = resume.as_ref().map_or_else(|| cfg.clone(), |s| s.config.clone());
    let outcome = match fit::<T>(&run_cfg, manifest, Some(&args.out), resume) {
        Ok(o) => o,
        Err(e @ Error::Divergence { .. }) => {
            let last = latest_checkpoint(&args.out)
                .map_or_else(|| "none".to_string(), |p| p.display().to_string());
            return Err(Failure { code: EXIT_DIVERGED, message: format!("{e}\nlast good checkpoint: {last}") });
        }
        Err(e) => return Err(e.into()),
    };
    let log = read_log(&args.out.join(TRAIN_LOG_FILE))?;
    plot::loss_curve(&log, &args.out.join(LOSS_PLOT)).map_err(|m| Failure { code: 1, message: m })?;
    if let Some(last) = outcome.log.last() {
        println!("step {}: l_r {:.5}  l_rfl {:.5}  l_g {:.5}  l_p {:.5}", last.step, last.l_r, last.l_rfl, last.l_g, last.l_p);
    }
    println!("checkpoint: {}", args.out.join(FINAL_CHECKPOINT).display());
    Ok(())
}

fn train(args: TrainArgs) -> CliResult {
    let cfg = train_config(&args)?;
    let manifest = PairManifest::load(&args.manifest)?;
    println!(
        "variant {}  generator parameters {}",
        cfg.variant,
        penh_core::generator::param_count(&cfg.generator_config())?
    );
    match args.dtype {
        DTypeArg::F32 => train_typed::<f32>(&args, &cfg, &manifest),
        DTypeArg::F64 => train_typed::<f64>(&args, &cfg, &manifest),
    }
}

fn enhance(args: EnhanceArgs) -> CliResult {
    if !args.checkpoint.is_file() {
        return Err(usage(format!("checkpoint not found: {}", args.checkpoint.display())));
    }
    let generator = load_generator::<f32>(&args.checkpoint)?;
    let jobs: Vec<(PathBuf, PathBuf)> = if args.input.is_dir() {
        list_images(&args.input)?
            .into_iter()
            .map(|key| (args.input.join(&key), args.out.join(&key)))
            .collect()
    } else if args.input.is_file() {
        let name = args.input.file_name().ok_or_else(|| usage("input has no file name"))?;
        vec![(args.input.clone(), args.out.join(name))]
    } else {
        return Err(usage(format!("input not found: {}", args.input.display())));
    };
    if jobs.is_empty() {
        return Err(usage(format!("empty corpus: no images in {}", args.input.display())));
    }
    for (src, dst) in &jobs {
        let img = load_image::<f32>(src)?;
        let out = generator.enhance(&img)?;
        if let Some(parent) = dst.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Failure { code: 1, message: format!("{}: {e}", parent.display()) })?;
        }
        save_image(&out, dst)?;
    }
    println!("enhanced {} image(s) into {}", jobs.len(), args.out.display());
    Ok(())
}

fn evaluate_cmd(args: EvaluateArgs) -> CliResult {
    let manifest = PairManifest::load(&args.manifest)?;
    let split = match args.split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    };
    let formula = match args.formula {
        FormulaArg::Ciede2000 => DeltaEFormula::Ciede2000,
        FormulaArg::Cie76 => DeltaEFormula::Cie76,
    };
    let report = if let Some(path) = &args.source.checkpoint {
        if !path.is_file() {
            return Err(usage(format!("checkpoint not found: {}", path.display())));
        }
        evaluate(&manifest, split, &load_generator::<f32>(path)?, formula)?
    } else if args.source.perfect {
        let perfect = |e: &penh_core::dataset::PairEntry, _: &penh_core::Image32| load_image::<f32>(&e.reference_path);
        evaluate(&manifest, split, &perfect, formula)?
    } else {
        evaluate::<f32, _>(&manifest, split, &Identity, formula)?
    };
    print!("{}", report.table());
    if let Some(dir) = &args.out {
        report.write(dir)?;
        println!("report written to {}", dir.display());
    }
    Ok(())
}

fn bench(args: BenchArgs) -> CliResult {
    let device = std::env::var(DEVICE_ENV).unwrap_or_else(|_| "cpu".to_string());
    if device != "cpu" {
        eprintln!("note: only the CPU backend is built; timing on CPU under label `{device}`");
    }
    let generator = match &args.checkpoint {
        Some(path) if !path.is_file() => return Err(usage(format!("checkpoint not found: {}", path.display()))),
        Some(path) => load_generator::<f32>(path)?,
        None => Generator::<f32>::new(GeneratorConfig::default(), 0)?,
    };
    let report = bench_inference(&generator, &args.resolutions, args.runs, &device)?;
    print!("{}", report.table());
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir).map_err(|e| Failure { code: 1, message: format!("{}: {e}", dir.display()) })?;
        let path = dir.join(BENCH_CSV);
        report.write_csv(&path)?;
        println!("timings written to {}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Enhance(a) => enhance(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Bench(a) => bench(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_INPUT } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

