use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use mimrefine::cluster::KmeansConfig;
use mimrefine::gradcheck::run_suite;
use mimrefine::harness::experiment::cluster_metrics;
use mimrefine::harness::io::import_embeddings;
use mimrefine::harness::{Experiment, ExperimentConfig, HarnessError, Stage};
use mimrefine::numerics::l2_normalize_rows_clamped;
use mimrefine::probe::{knn_probe, linear_probe, ProbeDataset};

#[derive(Parser)]
#[command(name = "mimrefine", version, about = "Refine masked-image-modeling encoders with nearest-neighbor alignment heads")]
struct Cli {
    /// TOML experiment config; defaults apply to everything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Without a command: run the configured pipeline through this stage.
    #[arg(long, global = true)]
    stage: Option<String>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Masked-reconstruction pre-training of a fresh encoder.
    Pretrain,
    /// Per-block k-NN and reconstruction probes of the pre-trained encoder.
    AnalyzeBlocks,
    /// Train the heads on the frozen encoder and warm the queues.
    InitHeads,
    /// Refinement epochs; resumes an interrupted run.
    Refine,
    /// k-NN, linear and low-shot probes, or probe external embedding files.
    Probe {
        #[arg(long, requires = "test_embeddings")]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        test_embeddings: Option<PathBuf>,
    },
    /// Cluster metrics, or cluster an external embedding file.
    Cluster {
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Finite-difference check of every backward pass.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        instances: usize,
    },
    /// Run any configured stages that are not complete and write report.json.
    Report,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).map_err(HarnessError::Config)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn parse_stage(name: &str) -> Result<Stage, HarnessError> {
    Stage::parse(name).ok_or_else(|| {
        let known: Vec<&str> = Stage::ALL.iter().map(|s| s.name()).collect();
        HarnessError::Config(format!("unknown stage {name:?}; expected one of {}", known.join(", ")))
    })
}

fn labelled(path: &Path) -> Result<(mimrefine::numerics::Matrix, Vec<u32>), HarnessError> {
    let fmt = |source| HarnessError::Format { stage: path.display().to_string(), source };
    let (x, labels) = import_embeddings(path).map_err(fmt)?;
    let labels = labels.ok_or_else(|| HarnessError::Config(format!("{} carries no labels", path.display())))?;
    let labels = labels
        .into_iter()
        .map(|l| u32::try_from(l).map_err(|_| HarnessError::Config(format!("negative label {l} in {}", path.display()))))
        .collect::<Result<_, _>>()?;
    Ok((x, labels))
}

fn external_error(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Config(e.to_string())
}

fn print(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("JSON values serialize"));
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    if let Some(Command::Gradcheck { instances }) = cli.command {
        let results = run_suite(cli.seed.unwrap_or(0), instances);
        let failed = results.iter().filter(|r| !r.passed()).count();
        for r in &results {
            println!("{} {:<50} worst {:.3e}", if r.passed() { "ok  " } else { "FAIL" }, r.name, r.worst);
        }
        println!("{} checks, {failed} failed", results.len());
        return if failed == 0 { Ok(()) } else { Err(HarnessError::GradcheckFailed { failed, total: results.len() }) };
    }
    let cfg = load_config(&cli)?;
    match &cli.command {
        Some(Command::Probe { embeddings: Some(train), test_embeddings: Some(test) }) => {
            let (tx, ty) = labelled(train)?;
            let (vx, vy) = labelled(test)?;
            let ds = ProbeDataset::new(tx, ty, vx, vy).map_err(external_error)?;
            let knn = knn_probe(&ds, &cfg.probe.knn).map_err(external_error)?;
            let linear = linear_probe(&ds, &cfg.probe.linear).map_err(external_error)?;
            print(&json!({ "knn": knn, "linear": linear }));
            return Ok(());
        }
        Some(Command::Cluster { embeddings: Some(path) }) => {
            let (x, y) = labelled(path)?;
            let truth: Vec<usize> = y.iter().map(|&l| l as usize).collect();
            let kmeans = KmeansConfig { seed: cfg.seed, ..cfg.cluster.kmeans.clone() };
            let metrics = cluster_metrics(&l2_normalize_rows_clamped(&x).0, &truth, &kmeans).map_err(external_error)?;
            print(&metrics);
            return Ok(());
        }
        _ => {}
    }
    let exp = Experiment::new(cfg.clone(), cfg.out_dir.clone())?;
    let stage = match &cli.command {
        None => {
            let through = cli.stage.as_deref().map(parse_stage).transpose()?;
            exp.run(through)?;
            println!("{}", exp.path(mimrefine::harness::experiment::REPORT).display());
            return Ok(());
        }
        Some(Command::Report) => {
            let through = cli.stage.as_deref().map(parse_stage).transpose()?;
            exp.run(through)?;
            println!("{}", exp.path(mimrefine::harness::experiment::REPORT).display());
            return Ok(());
        }
        Some(Command::Pretrain) => Stage::Pretrain,
        Some(Command::AnalyzeBlocks) => Stage::AnalyzeBlocks,
        Some(Command::InitHeads) => Stage::InitHeads,
        Some(Command::Refine) => Stage::Refine,
        Some(Command::Probe { .. }) => Stage::Probe,
        Some(Command::Cluster { .. }) => Stage::Cluster,
        Some(Command::Gradcheck { .. }) => unreachable!("handled above"),
    };
    if let Some(s) = cli.stage.as_deref() {
        if parse_stage(s)? != stage {
            return Err(HarnessError::Config(format!("--stage {s} conflicts with the {} command", stage.name())));
        }
    }
    print(&exp.run_stage(stage)?);
    Ok(())
}

fn main() -> ExitCode {
    if let Ok(n) = std::env::var("MRF_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            }
            _ => {
                eprintln!("error: MRF_THREADS must be a positive integer, got {n:?}");
                return ExitCode::from(2);
            }
        }
    }
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
