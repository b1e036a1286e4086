use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use blockprune::backbone::{train_baseline, write_epoch_log};
use blockprune::config::TeacherPolicy;
use blockprune::metrics::{
    acceleration_ratio, count_flops, evaluate_accuracy, flops_reduction_ratio, measure_latency, LatencySettings,
    MetricsSummary,
};
use blockprune::probes::probe_report;
use blockprune::recovery::{run_pipeline_with, PipelineOutcome};
use blockprune::report::{curve_csv, curve_svg, probe_curve, results_csv, results_markdown, results_table, write_run_report};
use blockprune::{build_graph, Checkpoint, DatasetSource, Error, ExperimentManifest, Network, PipelineMode, RunConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

const OUT_ENV: &str = "BLOCKPRUNE_OUT";

#[derive(Parser)]
#[command(name = "blockprune", version, about = "Degraded-block pruning for residual and dense networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the un-pruned model and save it as a checkpoint.
    TrainBaseline(TrainArgs),
    /// Train linear probes on every block of a checkpoint.
    Probe(ProbeArgs),
    /// Prune a baseline with one pipeline mode.
    Run(RunArgs),
    /// Measure accuracy, FLOPs and latency of a checkpoint.
    Bench(BenchArgs),
    /// Write census, probe curves and result tables for manifests.
    Report(ReportArgs),
    /// Run every pipeline mode on one baseline with shared seeds.
    Ablate(AblateArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory of the CIFAR-10 binary batches.
    #[arg(long)]
    cifar_dir: Option<PathBuf>,
    /// Seeded data order and single-threaded kernels.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    epochs: Option<usize>,
    /// Checkpoint directory.
    #[arg(long, env = OUT_ENV)]
    out: PathBuf,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, env = OUT_ENV)]
    out: PathBuf,
    #[arg(long)]
    svg: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Teacher {
    PreviousRound,
    Original,
}

#[derive(Args, Clone)]
struct PruneArgs {
    #[command(flatten)]
    common: Common,
    /// Baseline checkpoint; trained into `<out>/baseline` when absent.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long = "G")]
    global_ratio: Option<f64>,
    #[arg(long = "R")]
    rounds: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum)]
    teacher: Option<Teacher>,
    #[arg(long)]
    finetune_epochs: Option<usize>,
    /// Time batch-size-1 inference of every model.
    #[arg(long)]
    latency: bool,
    #[arg(long)]
    svg: bool,
    #[arg(long, env = OUT_ENV)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    prune: PruneArgs,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<PipelineMode>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    prune: PruneArgs,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Un-pruned reference for FRR and AR.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    /// CSV file that receives one row per call.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Manifest files or run directories.
    #[arg(required = true)]
    manifests: Vec<PathBuf>,
    #[arg(long, env = OUT_ENV)]
    out: PathBuf,
    #[arg(long)]
    svg: bool,
}

fn parse_mode(s: &str) -> Result<PipelineMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Json(_)
            | Error::InvalidArgument(_)
            | Error::InvalidSchedule(_)
            | Error::RatioOutOfRange(_)
            | Error::InfeasibleTarget { .. }
            | Error::UnsupportedFamily(_)
            | Error::DepthNotRealizable(_)
            | Error::InvalidArch(_)
            | Error::IncompatibleManifests(_) => 2,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
            RunConfig::from_json(&text).map_err(|e| Failure::usage(format!("bad config {}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &common.cifar_dir {
        cfg.dataset = DatasetSource::Cifar10 { path: dir.clone() };
    }
    if common.deterministic {
        cfg.deterministic = true;
    }
    Ok(cfg)
}

fn load_dataset(cfg: &RunConfig) -> CliResult<blockprune::data::Dataset> {
    if let DatasetSource::Cifar10 { path } = &cfg.dataset {
        if !path.is_dir() {
            return Err(Failure::usage(format!(
                "dataset directory {} does not exist (set --cifar-dir or the config's dataset)",
                path.display()
            )));
        }
    }
    Ok(cfg.dataset.load()?)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Failure {
        code: 1,
        message: format!("cannot create {}: {e}", dir.display()),
    })
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| Failure {
        code: 1,
        message: format!("cannot write {}: {e}", path.display()),
    })
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn train_into(cfg: &RunConfig, dataset: &blockprune::data::Dataset, out: &Path) -> CliResult<Checkpoint> {
    let (graph, init) = build_graph(&cfg.arch, cfg.dataset.meta(), cfg.seed)?;
    let trained = train_baseline(&graph, &init, dataset, &cfg.baseline, cfg.seed)?;
    let ckpt = Checkpoint::new(graph, trained.weights);
    ckpt.save(out)?;
    write_epoch_log(&out.join("train_log.csv"), &trained.log)?;
    write_file(&out.join("config.json"), &cfg.to_json()?)?;
    eprintln!("baseline accuracy {:.4}, saved to {}", trained.accuracy, out.display());
    Ok(ckpt)
}

fn cmd_train_baseline(args: TrainArgs) -> CliResult<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(e) = args.epochs {
        cfg.baseline.epochs = e;
    }
    cfg.baseline.validate()?;
    let dataset = load_dataset(&cfg)?;
    train_into(&cfg, &dataset, &args.out)?;
    Ok(())
}

fn cmd_probe(args: ProbeArgs) -> CliResult<()> {
    let cfg = load_config(&args.common)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let dataset = load_dataset(&cfg)?;
    let report = probe_report(&ckpt.graph, &ckpt.weights, &dataset, &cfg.probe, cfg.seed)?;
    let rows = probe_curve(&report);
    create_dir(&args.out)?;
    write_file(&args.out.join("probe_report.json"), &to_json(&report))?;
    let csv = curve_csv(&rows);
    write_file(&args.out.join("curve.csv"), &csv)?;
    if args.svg {
        write_file(&args.out.join("curve.svg"), &curve_svg(&rows, "probe accuracy"))?;
    }
    print!("{csv}");
    Ok(())
}

fn prune_config(args: &PruneArgs) -> CliResult<RunConfig> {
    let mut cfg = load_config(&args.common)?;
    if let Some(g) = args.global_ratio {
        cfg.schedule.global_ratio = g;
    }
    if let Some(r) = args.rounds {
        cfg.schedule.rounds = r;
    }
    if let Some(a) = args.alpha {
        cfg.recovery.alpha = a;
    }
    if let Some(t) = args.teacher {
        cfg.recovery.teacher = match t {
            Teacher::PreviousRound => TeacherPolicy::PreviousRound,
            Teacher::Original => TeacherPolicy::Original,
        };
    }
    if let Some(e) = args.finetune_epochs {
        cfg.recovery.finetune_epochs_per_round = Some(e);
    }
    if args.latency && cfg.latency.is_none() {
        cfg.latency = Some(LatencySettings::default());
    }
    if let Some(b) = &args.baseline {
        cfg.baseline_checkpoint = Some(b.clone());
    }
    Ok(cfg)
}

fn baseline_for(cfg: &mut RunConfig, dataset: &blockprune::data::Dataset, out: &Path) -> CliResult<Checkpoint> {
    match &cfg.baseline_checkpoint {
        Some(path) => Ok(Checkpoint::load(path)?),
        None => {
            let dir = out.join("baseline");
            let ckpt = train_into(cfg, dataset, &dir)?;
            cfg.baseline_checkpoint = Some(dir);
            Ok(ckpt)
        }
    }
}

fn run_mode(
    cfg: &RunConfig,
    mode: PipelineMode,
    baseline: &Checkpoint,
    dataset: &blockprune::data::Dataset,
    out: &Path,
    svg: bool,
) -> CliResult<PipelineOutcome> {
    let mut cfg = cfg.clone();
    cfg.mode = mode;
    cfg.output_dir = Some(out.to_path_buf());
    create_dir(out)?;
    let outcome = run_pipeline_with(baseline, dataset, &cfg)?;
    write_run_report(&outcome.manifest, &out.join("report"), svg)?;
    Ok(outcome)
}

fn cmd_run(args: RunArgs) -> CliResult<()> {
    let mut cfg = prune_config(&args.prune)?;
    if let Some(m) = args.mode {
        cfg.mode = m;
    }
    let dataset = load_dataset(&cfg)?;
    let out = &args.prune.out;
    let baseline = baseline_for(&mut cfg, &dataset, out)?;
    let outcome = run_mode(&cfg, cfg.mode, &baseline, &dataset, out, args.prune.svg)?;
    println!("{}", to_json(&outcome.manifest.summary));
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> CliResult<()> {
    let mut cfg = prune_config(&args.prune)?;
    let dataset = load_dataset(&cfg)?;
    let out = &args.prune.out;
    let baseline = baseline_for(&mut cfg, &dataset, out)?;
    let mut manifests = Vec::new();
    for mode in PipelineMode::ALL {
        eprintln!("mode {mode}");
        let outcome = run_mode(&cfg, mode, &baseline, &dataset, &out.join(mode.as_str()), args.prune.svg)?;
        manifests.push((mode.to_string(), outcome.manifest));
    }
    let rows = results_table(&manifests)?;
    write_file(&out.join("results.csv"), &results_csv(&rows))?;
    let md = results_markdown(&rows);
    write_file(&out.join("results.md"), &md)?;
    print!("{md}");
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> CliResult<()> {
    let cfg = load_config(&args.common)?;
    let settings = LatencySettings {
        n: args.n,
        batch: 1,
        warmup: args.warmup,
    };
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let dataset = load_dataset(&cfg)?;
    let net = Network::new(&ckpt.graph, &ckpt.weights)?;
    let accuracy = evaluate_accuracy(&net, &dataset.test)?;
    let flops = count_flops(&ckpt.graph);
    let latency = measure_latency(&net, settings)?;
    let (frr, ar) = match &args.reference {
        Some(path) => {
            let reference = Checkpoint::load(path)?;
            let ref_net = Network::new(&reference.graph, &reference.weights)?;
            let ref_latency = measure_latency(&ref_net, settings)?;
            (
                flops_reduction_ratio(count_flops(&reference.graph) as f64, flops as f64)?,
                Some(acceleration_ratio(ref_latency.mean_ms, latency.mean_ms)?),
            )
        }
        None => (0.0, None),
    };
    let summary = MetricsSummary {
        accuracy,
        flops,
        frr,
        ar,
        mean_ms: Some(latency.mean_ms),
    };
    println!("{}", to_json(&summary));
    if let Some(csv) = &args.csv {
        append_bench_row(csv, &args.checkpoint, &summary)?;
    }
    Ok(())
}

fn append_bench_row(csv: &Path, model: &Path, s: &MetricsSummary) -> CliResult<()> {
    let fail = |e: std::io::Error| Failure {
        code: 1,
        message: format!("cannot append to {}: {e}", csv.display()),
    };
    let fresh = !csv.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(csv).map_err(fail)?;
    if fresh {
        writeln!(f, "model,accuracy,flops,frr,mean_ms,ar").map_err(fail)?;
    }
    writeln!(
        f,
        "{},{:.6},{},{:.6},{:.6},{}",
        model.display(),
        s.accuracy,
        s.flops,
        s.frr,
        s.mean_ms.unwrap_or(f64::NAN),
        s.ar.map(|a| format!("{a:.6}")).unwrap_or_default()
    )
    .map_err(fail)
}

fn cmd_report(args: ReportArgs) -> CliResult<()> {
    let mut loaded = Vec::with_capacity(args.manifests.len());
    for path in &args.manifests {
        loaded.push(ExperimentManifest::load(path)?);
    }
    // Labels are the modes, made unique with a position suffix when repeated.
    let labelled: Vec<(String, ExperimentManifest)> = loaded
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let repeated = loaded.iter().filter(|o| o.mode == m.mode).count() > 1;
            let label = if repeated { format!("{}#{i}", m.mode) } else { m.mode.to_string() };
            (label, m.clone())
        })
        .collect();
    let rows = results_table(&labelled)?;
    create_dir(&args.out)?;
    if labelled.len() == 1 {
        write_run_report(&labelled[0].1, &args.out, args.svg)?;
    } else {
        for (label, m) in &labelled {
            write_run_report(m, &args.out.join(label.replace('#', "_")), args.svg)?;
        }
        write_file(&args.out.join("results.csv"), &results_csv(&rows))?;
        write_file(&args.out.join("results.md"), &results_markdown(&rows))?;
    }
    print!("{}", results_markdown(&rows));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TrainBaseline(a) => cmd_train_baseline(a),
        Command::Probe(a) => cmd_probe(a),
        Command::Run(a) => cmd_run(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Report(a) => cmd_report(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
