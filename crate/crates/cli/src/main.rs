use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use neuroevo::datapipe::{downsample, load_csv, synth_generate, write_csv, SynthSpec};
use neuroevo::ensemble::evaluate_metrics;
use neuroevo::io::{write_atomic, write_json_atomic};
use neuroevo::pipeline::{
    read_detection_flags, render_report, write_summary, Pipeline, PipelineConfig, PipelineError,
};
use serde_json::json;

#[derive(Parser)]
#[command(name = "neuroevo", version, about = "Neuroevolved Conv1D autoencoder ensembles for time-series anomaly detection")]
struct Cli {
    /// Worker threads for fitness and fine-tune evaluation (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic benchmark (train.csv, test.csv, truth.json).
    Synth(SynthArgs),
    /// Average every N consecutive rows of a CSV file.
    Downsample(DownsampleArgs),
    /// Search feature subgroups.
    EvolveGroups(StageArgs),
    /// Search one autoencoder architecture per subgroup.
    EvolveModels(StageArgs),
    /// Train the final ensemble members and calibrate thresholds.
    Train(StageArgs),
    /// Weight-mutation fine-tuning of the trained ensemble.
    Finetune(StageArgs),
    /// Flag the test rows with the fine-tuned ensemble.
    Detect(DetectArgs),
    /// Score a detection CSV against a labelled test CSV.
    Evaluate(EvaluateArgs),
    /// Rebuild report.txt and run_summary.json from an output directory.
    Report(ReportArgs),
    /// Every stage in order.
    Run(StageArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 12)]
    sensors: usize,
    /// Rows in each of train and test.
    #[arg(long, default_value_t = 4000)]
    rows: usize,
    #[arg(long, default_value_t = 3)]
    groups: usize,
    #[arg(long, default_value_t = 0.12)]
    anomaly_rate: f64,
}

#[derive(Args)]
struct DownsampleArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    red_ratio: usize,
    #[arg(long)]
    label_column: Option<String>,
}

/// Config file plus the overrides most often changed between runs.
#[derive(Args)]
struct ConfigArgs {
    /// PipelineConfig JSON; relative paths inside it resolve against its directory.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    label_column: Option<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    red_ratio: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct StageArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    seed: u64,
    /// Reuse finished artifacts and continue from the latest checkpoint.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct DetectArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Only used to match the stored run config; detection draws no random numbers.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    detection: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value = "label")]
    label_column: String,
    #[arg(long)]
    point_adjust: bool,
    /// Write the metrics JSON here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    run_dir: PathBuf,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.as_os_str().is_empty() || p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_config(args: &ConfigArgs) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
            let mut cfg: PipelineConfig =
                serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
            let base = path.parent().unwrap_or(Path::new(""));
            cfg.train_path = resolve(base, &cfg.train_path);
            cfg.test_path = resolve(base, &cfg.test_path);
            cfg.output_dir = resolve(base, &cfg.output_dir);
            cfg
        }
        None => PipelineConfig::default(),
    };
    if let Some(p) = &args.train {
        cfg.train_path = p.clone();
    }
    if let Some(p) = &args.test {
        cfg.test_path = p.clone();
    }
    if let Some(l) = &args.label_column {
        cfg.label_column = Some(l.clone());
    }
    if let Some(d) = &args.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(r) = args.red_ratio {
        cfg.red_ratio = r;
    }
    if let Some(k) = args.k {
        cfg.k = k;
    }
    for (what, p) in [("train", &cfg.train_path), ("test", &cfg.test_path)] {
        if !p.is_file() {
            return Err(PipelineError::Config(format!("{what} file {} does not exist", p.display())));
        }
    }
    Ok(cfg)
}

fn open(args: &StageArgs) -> Result<Pipeline, PipelineError> {
    let mut cfg = load_config(&args.config)?;
    cfg.seed = Some(args.seed);
    Pipeline::load(cfg, args.seed)
}

fn data_err(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Data(e.to_string())
}

fn synth(a: &SynthArgs) -> Result<(), PipelineError> {
    let b = synth_generate(&SynthSpec {
        sensors: a.sensors,
        rows: a.rows,
        groups: a.groups,
        anomaly_rate: a.anomaly_rate,
        seed: a.seed,
    })
    .map_err(|e| PipelineError::Config(e.to_string()))?;
    fs::create_dir_all(&a.out).map_err(data_err)?;
    write_csv(&b.train, &a.out.join("train.csv"), "label").map_err(data_err)?;
    write_csv(&b.test, &a.out.join("test.csv"), "label").map_err(data_err)?;
    let truth = json!({ "clusters": b.clusters(), "cluster_of": b.cluster_of, "events": b.events });
    write_json_atomic(&a.out.join("truth.json"), &truth).map_err(data_err)?;
    println!("wrote {} and {} rows of {} sensors to {}", b.train.rows(), b.test.rows(), a.sensors, a.out.display());
    Ok(())
}

fn downsample_cmd(a: &DownsampleArgs) -> Result<(), PipelineError> {
    let ds = load_csv(&a.input, a.label_column.as_deref()).map_err(data_err)?.dataset;
    let out = downsample(&ds, a.red_ratio).map_err(|e| match e {
        neuroevo::datapipe::DataError::Config(m) => PipelineError::Config(m),
        e => data_err(e),
    })?;
    write_csv(&out, &a.output, a.label_column.as_deref().unwrap_or("label")).map_err(data_err)?;
    println!("{} rows -> {} rows", ds.rows(), out.rows());
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<(), PipelineError> {
    let flags = read_detection_flags(&a.detection).map_err(PipelineError::Data)?;
    let test = load_csv(&a.test, Some(&a.label_column)).map_err(data_err)?.dataset;
    let labels = test
        .labels()
        .ok_or_else(|| PipelineError::Data(format!("{} has no '{}' column", a.test.display(), a.label_column)))?;
    let m = evaluate_metrics(&flags, labels, a.point_adjust).map_err(data_err)?;
    let text = serde_json::to_string_pretty(&m).map_err(data_err)?;
    match &a.output {
        Some(p) => write_atomic(p, text.as_bytes()).map_err(data_err)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), PipelineError> {
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Downsample(a) => downsample_cmd(a),
        Command::EvolveGroups(a) => {
            let p = open(a)?;
            p.open_output(!a.resume)?;
            let g = p.evolve_groups_stage(a.resume)?;
            println!("best subgroup fitness {:.6}: {:?}", g.best().fitness, g.best().solution.groups);
            Ok(())
        }
        Command::EvolveModels(a) => {
            let p = open(a)?;
            p.open_output(false)?;
            let m = p.evolve_models_stage(a.resume)?;
            for (g, genome) in m.ensemble.genomes.iter().enumerate() {
                println!("group {g}: window {}, channels {:?}", genome.window_size, genome.channel_chain());
            }
            Ok(())
        }
        Command::Train(a) => {
            let p = open(a)?;
            p.open_output(false)?;
            let m = p.train_stage(a.resume)?;
            println!("trained {} members", m.members.len());
            Ok(())
        }
        Command::Finetune(a) => {
            let p = open(a)?;
            p.open_output(false)?;
            let (_, f) = p.finetune_stage(a.resume)?;
            println!("fine-tune fitness {:.6} -> {:.6}", f.initial_fitness, f.final_fitness);
            Ok(())
        }
        Command::Detect(a) => {
            let cfg = load_config(&a.config)?;
            let seed = a.seed.or(cfg.seed).unwrap_or(0);
            let p = Pipeline::load(PipelineConfig { seed: Some(seed), ..cfg }, seed)?;
            match p.detect_stage()? {
                Some(m) => println!("f1 {:.4} precision {:.4} recall {:.4}", m.ensemble.f1, m.ensemble.precision, m.ensemble.recall),
                None => println!("test data unlabelled; wrote detections only"),
            }
            Ok(())
        }
        Command::Evaluate(a) => evaluate(a),
        Command::Report(a) => {
            let s = write_summary(&a.run_dir)?;
            print!("{}", render_report(&s));
            Ok(())
        }
        Command::Run(a) => {
            let p = open(a)?;
            let s = p.run_all(a.resume)?;
            print!("{}", render_report(&s));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.jobs {
        if n == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
