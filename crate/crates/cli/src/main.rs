use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use margl::checkpoint::load_model;
use margl::data::{generate_synthetic, load_dataset, make_folds, Dataset, SynthConfig};
use margl::gradcheck::run_suites;
use margl::harness::{ablate, graph_stats, train, visualize, AblateConfig, TrainConfig};
use margl::kv::KeyValues;
use margl::network::ModelConfig;
use margl::{Error, Result};

/// Adaptive-ROI relation-graph AU recognition: data, training and diagnostics.
#[derive(Parser)]
#[command(name = "margl", version)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset with oracle regions.
    SynthGen(SynthGenArgs),
    /// Train one or more folds and write checkpoints plus run.json.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset and print the F1 report as JSON.
    Eval(EvalArgs),
    /// Train every preset with every seed and print a preset → mean F1 table.
    Ablate(TrainArgs),
    /// Draw initial (blue) and refined (red) boxes over samples.
    Visualize(VisualizeArgs),
    /// Dump label co-occurrence, the intra-level graph and the full adjacency.
    GraphStats(GraphStatsArgs),
    /// Compare analytic derivatives against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct Overrides {
    /// Flat key=value config file.
    #[arg(short, long)]
    config: Option<PathBuf>,

    /// Extra key=value settings, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn load(&self) -> Result<KeyValues> {
        let mut kv = match &self.config {
            Some(p) => KeyValues::from_file(p)?,
            None => KeyValues::new(),
        };
        for item in &self.set {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got {item:?}")))?;
            kv.set(k.trim(), v.trim());
        }
        Ok(kv)
    }
}

#[derive(Args)]
struct SynthGenArgs {
    #[command(flatten)]
    overrides: Overrides,

    /// Output directory.
    #[arg(short, long)]
    out: PathBuf,

    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: Overrides,

    /// Dataset directory; overrides `dataset=` in the config.
    #[arg(short, long)]
    data: Option<PathBuf>,

    /// Output directory; overrides `output=` in the config.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,

    #[arg(short, long)]
    data: PathBuf,

    /// Test fold to score (1-based). Defaults to the fold stored in the checkpoint.
    #[arg(long, conflicts_with = "all")]
    fold: Option<usize>,

    /// Score every sample instead of one fold's test subjects.
    #[arg(long)]
    all: bool,

    /// Also write the report here.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VisualizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,

    #[arg(short, long)]
    data: PathBuf,

    #[arg(short, long)]
    out: PathBuf,

    /// Number of samples to draw, taken from the checkpoint's test fold.
    #[arg(long, default_value_t = 4)]
    samples: usize,

    /// Restrict to one subject instead.
    #[arg(long)]
    subject: Option<String>,
}

#[derive(Args)]
struct GraphStatsArgs {
    #[command(flatten)]
    overrides: Overrides,

    #[arg(short, long)]
    data: PathBuf,

    /// Count only the training subjects of this fold (1-based).
    #[arg(long)]
    fold: Option<usize>,

    /// Also write the statistics as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Suites to run (sampler, aroi, gcn, bce, model, oracle); all by default.
    #[arg(long = "suite")]
    suites: Vec<String>,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(io_error(Path::new("<stdout>"), e)),
        _ => Ok(()),
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    emit(&(serde_json::to_string_pretty(value)? + "\n"))
}

fn synth_gen(args: SynthGenArgs) -> Result<()> {
    let mut kv = args.overrides.load()?;
    if let Some(seed) = args.seed {
        kv.set("seed", seed);
    }
    let cfg = SynthConfig::from_kv(&kv)?;
    let summary = generate_synthetic(&cfg, &args.out)?;
    print_json(&summary)
}

fn train_config(args: &TrainArgs) -> Result<(KeyValues, Dataset)> {
    let mut kv = args.overrides.load()?;
    if let Some(d) = &args.data {
        kv.set("dataset", d.display());
    }
    if let Some(o) = &args.out {
        kv.set("output", o.display());
    }
    let dir = kv
        .get("dataset")
        .map(PathBuf::from)
        .ok_or_else(|| Error::Usage("no dataset: pass --data or set dataset= in the config".into()))?;
    let data = load_dataset(&dir)?;
    if kv.get("num_aus").is_none() {
        kv.set("num_aus", data.num_aus());
    }
    Ok((kv, data))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let (kv, data) = train_config(&args)?;
    let cfg = TrainConfig::from_kv(&kv)?;
    let record = train(&cfg, &data)?;
    for f in &record.folds {
        eprintln!(
            "fold {}: F1 {:.4} (best epoch {}){}",
            f.fold,
            f.report.mean_f1,
            f.best_epoch,
            f.iou
                .as_ref()
                .map_or(String::new(), |i| format!(", IoU {:.3} -> {:.3}", i.initial_mean, i.refined_mean))
        );
    }
    eprintln!("mean F1 {:.4} in {:.1}s", record.mean_f1, record.wall_clock_secs);
    if cfg.output.is_none() {
        print_json(&record)?;
    }
    Ok(())
}

fn cmd_ablate(args: TrainArgs) -> Result<()> {
    let (kv, data) = train_config(&args)?;
    let cfg = AblateConfig::from_kv(&kv)?;
    let report = ablate(&cfg, &data, |preset, seed, run| {
        eprintln!("{preset} seed {seed}: mean F1 {:.4} ({:.1}s)", run.mean_f1, run.wall_clock_secs);
    })?;
    emit(&report.to_table())?;
    if let Some(dir) = &cfg.train.output {
        write_json(&dir.join("ablation.json"), &report)?;
    }
    Ok(())
}

/// Test indices for `fold` (0-based) under the checkpoint's split.
fn fold_indices(data: &Dataset, meta: &KeyValues, fold: usize) -> Result<Vec<usize>> {
    let folds: usize = meta.parse_or("folds", 0)?;
    if folds == 0 {
        return Err(Error::Usage("the checkpoint records no fold split; pass --all".into()));
    }
    if fold >= folds {
        return Err(Error::Usage(format!("fold {} out of range 1..={folds}", fold + 1)));
    }
    let split_seed: u64 = meta.parse_or("split_seed", 0)?;
    Ok(make_folds(&data.subjects(), folds, split_seed)?.indices(data, fold).1)
}

fn warn_on_renamed_aus(data: &Dataset, meta: &KeyValues) {
    if let Some(names) = meta.get("au_names") {
        let names: Vec<&str> = names.split(',').collect();
        if names.len() == data.num_aus() && names != data.au_names {
            log::warn!("AU names differ from the checkpoint's ({})", names.join(","));
        }
    }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (model, meta) = load_model(&args.checkpoint)?;
    let data = load_dataset(&args.data)?;
    let (report, _) = if args.all {
        margl::harness::evaluate(&model, &data, &(0..data.len()).collect::<Vec<_>>())?
    } else {
        let fold = match args.fold {
            Some(0) => return Err(Error::Usage("folds are numbered from 1".into())),
            Some(f) => f - 1,
            None => meta.parse_or::<usize>("fold", 1)?.saturating_sub(1),
        };
        let idx = fold_indices(&data, &meta, fold)?;
        warn_on_renamed_aus(&data, &meta);
        margl::harness::evaluate(&model, &data, &idx)?
    };
    if let Some(path) = &args.out {
        write_json(path, &report)?;
    }
    print_json(&report)
}

fn cmd_visualize(args: VisualizeArgs) -> Result<()> {
    let (model, meta) = load_model(&args.checkpoint)?;
    let data = load_dataset(&args.data)?;
    let idx: Vec<usize> = match &args.subject {
        Some(s) => {
            let idx: Vec<usize> = (0..data.len()).filter(|&i| &data.samples[i].subject == s).collect();
            if idx.is_empty() {
                return Err(Error::Usage(format!("no samples for subject {s:?}")));
            }
            idx.into_iter().take(args.samples).collect()
        }
        None => {
            let pool = match meta.get("fold") {
                Some(_) => fold_indices(&data, &meta, meta.parse_or::<usize>("fold", 1)?.saturating_sub(1))?,
                None => (0..data.len()).collect(),
            };
            pool.into_iter().take(args.samples).collect()
        }
    };
    let report = visualize(&model, &data, &idx, &args.out)?;
    let files: usize = report.overlays.iter().map(|o| o.files.len()).sum();
    eprintln!("wrote {files} overlays to {}", args.out.display());
    if let Some(iou) = &report.iou {
        for a in &iou.per_au {
            eprintln!("{:<8} IoU initial {:.3} refined {:.3}", a.au, a.initial, a.refined);
        }
    }
    Ok(())
}

fn cmd_graph_stats(args: GraphStatsArgs) -> Result<()> {
    let kv = args.overrides.load()?;
    let data = load_dataset(&args.data)?;
    let mut model = ModelConfig::from_kv(&kv, ModelConfig::default())?;
    model.num_aus = data.num_aus();
    let fold = match args.fold {
        None => None,
        Some(0) => return Err(Error::Usage("folds are numbered from 1".into())),
        Some(f) => Some((f - 1, kv.parse_or("folds", 3)?, kv.parse_or("split_seed", 0)?)),
    };
    let stats = graph_stats(&data, &model, fold)?;
    emit(&stats.to_text())?;
    if let Some(path) = &args.json {
        write_json(path, &stats)?;
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let report = run_suites(&args.suites, args.seed)?;
    emit(&(report.lines().join("\n") + "\n"))?;
    if let Some(path) = &args.json {
        write_json(path, &report)?;
    }
    let failed = report.checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Error::Numerical(format!("{failed} of {} gradient checks failed", report.checks.len())));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthGen(a) => synth_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Visualize(a) => cmd_visualize(a),
        Command::GraphStats(a) => cmd_graph_stats(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {}", one_line(first));
            return ExitCode::from(2);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.reason(), one_line(&e.to_string()));
            ExitCode::from(if matches!(e, Error::Usage(_)) { 2 } else { 1 })
        }
    }
}
