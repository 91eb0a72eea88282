//! Thin command-line front end over the library. Exit codes: 0 success,
//! 2 config error, 3 data error, 4 runtime error.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use fedprompt::checkpoint;
use fedprompt::config::ExperimentConfig;
use fedprompt::encoders::{EmbeddingDataset, EmbeddingRecord};
use fedprompt::etf::BoundReport;
use fedprompt::eval;
use fedprompt::Error;

/// Stdout writes ignore broken pipes: a consumer like `head` closing the
/// stream must not abort a training run or lose its artifacts.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

macro_rules! sayraw {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = write!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Parser)]
#[command(
    name = "fedprompt",
    about = "Deterministic simulator for multi-domain federated dual-prompt tuning",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-domain dataset container.
    GenerateData {
        /// Experiment config supplying the generator settings.
        #[arg(long)]
        spec: PathBuf,
        /// Output container path.
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print a container's header and per-domain / per-class counts.
    InspectData {
        path: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Run a federated training experiment.
    Train {
        /// Experiment config (TOML). Required unless resuming.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Resume from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the config seed (fresh runs only).
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for metrics.jsonl, periodic checkpoints, final.fdck.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Emit only the machine-readable metric stream on stdout.
        #[arg(long)]
        json: bool,
    },
    /// Evaluate a checkpointed model on its test shards.
    Evaluate {
        #[arg(long)]
        resume: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Cross-domain accuracy matrix from a checkpointed model.
    Heatmap {
        #[arg(long)]
        resume: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Run the five component-toggle configurations and print the table.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        json: bool,
        /// Also write the report as JSON to this path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the ETF geometry and entropy bounds for a class count.
    Bounds {
        #[arg(long)]
        k: usize,
        #[arg(long)]
        json: bool,
    },
    /// Dump text and image features for offline projection/plotting.
    ExportFeatures {
        #[arg(long)]
        resume: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig, Error> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::desk_scale(),
    };
    if let Some(seed) = seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenerateData { spec, out, seed } => {
            let cfg = load_config(Some(&spec), seed)?;
            let per_domain = fedprompt::data::generate_synthetic(&cfg.synthetic_spec())?;
            let mut records: Vec<EmbeddingRecord> = Vec::new();
            for ds in &per_domain {
                records.extend(ds.records().iter().cloned());
            }
            let merged =
                EmbeddingDataset::new(cfg.raw_dim, cfg.classes, cfg.domains, true, records)
                    .map_err(Error::DatasetFile)?;
            merged.save(&out).map_err(Error::DatasetFile)?;
            say!(
                "wrote {} records ({} domains x {} classes, dim {}) to {}",
                merged.len(),
                cfg.domains,
                cfg.classes,
                cfg.raw_dim,
                out.display()
            );
            Ok(())
        }
        Command::InspectData { path, json } => {
            let ds = EmbeddingDataset::load(&path).map_err(Error::DatasetFile)?;
            if json {
                let summary = serde_json::json!({
                    "records": ds.len(),
                    "dim": ds.dim(),
                    "num_classes": ds.num_classes(),
                    "num_domains": ds.num_domains(),
                    "raw": ds.is_raw(),
                    "per_domain": ds.domain_counts(),
                    "per_class": ds.class_counts(),
                });
                say!("{summary}");
            } else {
                say!(
                    "records: {}  dim: {}  classes: {}  domains: {}  raw: {}",
                    ds.len(),
                    ds.dim(),
                    ds.num_classes(),
                    ds.num_domains(),
                    ds.is_raw()
                );
                say!("per-domain counts: {:?}", ds.domain_counts());
                say!("per-class counts:  {:?}", ds.class_counts());
            }
            Ok(())
        }
        Command::Train {
            config,
            resume,
            seed,
            out,
            json,
        } => {
            if let Some(dir) = &out {
                std::fs::create_dir_all(dir).map_err(|e| Error::Runtime(e.to_string()))?;
            }
            let mut metrics_file = match &out {
                Some(dir) => Some(
                    std::fs::File::create(dir.join("metrics.jsonl"))
                        .map_err(|e| Error::Runtime(e.to_string()))?,
                ),
                None => None,
            };
            let mut history = Vec::new();
            let mut sink = |record: &eval::MetricsRecord| {
                let line = serde_json::to_string(record).expect("serializable record");
                say!("{line}");
                if let Some(file) = &mut metrics_file {
                    use std::io::Write;
                    let _ = writeln!(file, "{line}");
                }
                history.push(record.clone());
            };

            let simulation = match resume {
                Some(ckpt) => {
                    let mut sim = checkpoint::load(&ckpt)?;
                    let target = sim.config.rounds;
                    eval::run_rounds(&mut sim, target, out.as_deref(), &mut sink)?;
                    sim
                }
                None => {
                    let cfg = load_config(config.as_deref(), seed)?;
                    let outcome = eval::run_experiment(&cfg, out.as_deref(), &mut sink)?;
                    outcome.simulation
                }
            };

            if let Some(dir) = &out {
                checkpoint::save(&simulation, &dir.join("final.fdck"))?;
            }
            if !json {
                sayraw!("{}", eval::format_accuracy_table(&history));
                let report = eval::cross_domain_heatmap(&simulation)?;
                say!(
                    "heatmap diagonal advantage: {:.4} (diag {:.4}, offdiag {:.4})",
                    report.diagonal_advantage, report.mean_diagonal, report.mean_off_diagonal
                );
            }
            Ok(())
        }
        Command::Evaluate { resume, json } => {
            let sim = checkpoint::load(&resume)?;
            let record = eval::evaluate(&sim)?;
            if json {
                say!("{}", serde_json::to_string(&record).expect("serializable"));
            } else {
                sayraw!(
                    "{}",
                    eval::format_accuracy_table(std::slice::from_ref(&record))
                );
            }
            Ok(())
        }
        Command::Heatmap { resume, json } => {
            let sim = checkpoint::load(&resume)?;
            let report = eval::cross_domain_heatmap(&sim)?;
            if json {
                say!("{}", serde_json::to_string(&report).expect("serializable"));
            } else {
                say!("prompt-domain rows x data-domain columns (accuracy %):");
                for (i, row) in report.matrix.iter().enumerate() {
                    let cells: Vec<String> =
                        row.iter().map(|v| format!("{:5.1}", 100.0 * v)).collect();
                    say!("  dom{i}: {}", cells.join(" "));
                }
                say!(
                    "diagonal advantage: {:.4} (diag {:.4}, offdiag {:.4})",
                    report.diagonal_advantage, report.mean_diagonal, report.mean_off_diagonal
                );
            }
            Ok(())
        }
        Command::Ablate {
            config,
            seed,
            json,
            out,
        } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let report = eval::run_ablation(&cfg)?;
            let serialized = serde_json::to_string_pretty(&report).expect("serializable");
            if let Some(path) = out {
                std::fs::write(&path, &serialized).map_err(|e| Error::Runtime(e.to_string()))?;
            }
            if json {
                say!("{serialized}");
            } else {
                say!("{:<28} {:>9}", "configuration", "avg acc %");
                for row in &report.rows {
                    say!("{:<28} {:>9.2}", row.name, 100.0 * row.average_accuracy);
                }
            }
            Ok(())
        }
        Command::Bounds { k, json } => {
            if k < 2 {
                return Err(Error::Runtime("bounds need at least 2 classes".to_string()));
            }
            let report = BoundReport::for_classes(k, 10_000, 0)?;
            if json {
                say!("{}", serde_json::to_string(&report).expect("serializable"));
            } else {
                say!("classes (K):                {}", report.k_classes);
                say!("max intra-class distance:   {:.6}", report.delta);
                say!("entropy floor (nats):       {:.6}", report.entropy_floor);
                say!(
                    "MI lower bound (+const):    {:.6}",
                    report.mi_lower_bound_up_to_const
                );
                say!("gamma: {}", report.gamma_note);
            }
            Ok(())
        }
        Command::ExportFeatures { resume, out } => {
            let sim = checkpoint::load(&resume)?;
            let dump = eval::export_features(&sim)?;
            std::fs::write(&out, dump).map_err(|e| Error::Runtime(e.to_string()))?;
            say!("wrote feature dump to {}", out.display());
            Ok(())
        }
    }
}
