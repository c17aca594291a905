use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use milseg_cli::commands::{self, InferOptions, ProposalSource};
use milseg_cli::{report, CliError, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "milseg", version, about = "Weakly supervised segmentation from image-level labels")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic train/val dataset under the output directory.
    GenData,
    /// Train from image-level labels and write a checkpoint and loss log.
    Train {
        /// Training split directory (default: `<dataset>/train`).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Segment images with a trained checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Image file or directory of `.ppm` files; repeatable.
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
        /// none, ilp, ilp+sppxl, ilp+bb or ilp+seg.
        #[arg(long)]
        prior: Option<String>,
        /// Proposal file for every image, or a directory of `<stem>.txt` files.
        #[arg(long, conflicts_with = "naive_proposals")]
        proposals: Option<PathBuf>,
        /// Generate N box proposals per image from edge contrast.
        #[arg(long)]
        naive_proposals: Option<usize>,
        /// Per-class thresholds JSON written by `gridsearch`.
        #[arg(long)]
        thresholds: Option<PathBuf>,
        /// Also write the per-class probability maps.
        #[arg(long)]
        dump_probs: bool,
    },
    /// Score predicted masks against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth split directory (or a directory of `.pgm` masks).
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        thresholds: Option<PathBuf>,
    },
    /// Pick per-class proposal thresholds on a validation split.
    Gridsearch {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Validation split directory (default: `<dataset>/val`).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        proposals: Option<PathBuf>,
    },
    /// Finite-difference gradient verification of every layer and the network.
    Gradcheck {
        #[arg(long)]
        instances: Option<usize>,
    },
}

fn resolve(out: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        out.join(p)
    }
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let mut cfg = load_config(&cli.common)?;
    let out = cli.common.out.as_path();
    match cli.command {
        Command::GenData => {
            commands::gen_data(&cfg, out)?;
            println!("wrote {} and {}", out.join("train").display(), out.join("val").display());
        }
        Command::Train { data } => {
            let data = data.unwrap_or_else(|| cfg.dataset.join("train"));
            let s = commands::train(&cfg, &data, out)?;
            println!(
                "{} steps, {} examples, final loss {}; checkpoint {}",
                s.steps,
                s.examples_seen,
                s.final_loss.map_or("n/a".into(), |l| format!("{l:.4}")),
                s.checkpoint.display()
            );
        }
        Command::Infer { checkpoint, input, prior, proposals, naive_proposals, thresholds, dump_probs } => {
            if let Some(p) = prior {
                cfg.prior = p.parse().map_err(|e: milseg::Error| CliError::Usage(e.to_string()))?;
            }
            let checkpoint = checkpoint.unwrap_or_else(|| resolve(out, &cfg.checkpoint));
            let thresholds = match thresholds {
                Some(p) => report::read_thresholds(&p, cfg.foreground_classes)?,
                None => cfg.threshold_set()?,
            };
            let proposals = match (proposals, naive_proposals) {
                (Some(p), _) => ProposalSource::Path(p),
                (None, Some(n)) => ProposalSource::Naive(n),
                (None, None) => ProposalSource::None,
            };
            let opts = InferOptions { checkpoint: &checkpoint, inputs: &input, proposals, thresholds, dump_probs };
            let written = commands::infer(&cfg, &opts, out)?;
            println!("wrote {} masks to {}", written.len(), out.display());
        }
        Command::Eval { pred, gt, thresholds } => {
            let thresholds = thresholds.map(|p| report::read_thresholds(&p, cfg.foreground_classes)).transpose()?;
            let metrics = resolve(out, &cfg.metrics);
            if let Some(dir) = metrics.parent() {
                fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
            }
            let value = commands::eval(&cfg, &pred, &gt, thresholds.as_ref(), &metrics)?;
            println!("{}", serde_json::to_string_pretty(&value).expect("json"));
        }
        Command::Gridsearch { checkpoint, data, proposals } => {
            let checkpoint = checkpoint.unwrap_or_else(|| resolve(out, &cfg.checkpoint));
            let data = data.unwrap_or_else(|| cfg.dataset.join("val"));
            let source = proposals.map_or(ProposalSource::None, ProposalSource::Path);
            let t = commands::gridsearch(&cfg, &checkpoint, &data, &source, out)?;
            println!("{}", report::thresholds_json(&t));
        }
        Command::Gradcheck { instances } => {
            if let Some(n) = instances {
                cfg.gradcheck_instances = n;
            }
            let results = commands::gradcheck(&cfg)?;
            for r in &results {
                println!(
                    "{:<16} instances {:>4}  max rel err {:.3e}  skipped {}",
                    r.name, r.instances, r.report.max_relative_error, r.report.skipped
                );
            }
            let failed = commands::gradcheck_failures(&results);
            if !failed.is_empty() {
                let names: Vec<&str> = failed.iter().map(|r| r.name.as_str()).collect();
                return Err(CliError::Verification(format!("gradient check failed: {}", names.join(", "))));
            }
            println!("all suites passed");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
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
