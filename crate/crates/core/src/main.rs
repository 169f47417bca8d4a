use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use foal::cli::{
    cmd_eval, cmd_gradcheck, cmd_meta_train, cmd_synth, cmd_train, AdaptMode, RunConfig, BASELINE_CHECKPOINT,
    MANIFEST_FILE, META_CHECKPOINT, META_PROGRESS_CSV, TRAIN_LOSS_CSV,
};
use foal::data::Manifest;
use foal::Error;

/// Published GPU timing at 192×192, printed for scale only.
const REFERENCE_ADAPT_MS: &str = "413±8 ms/video (GPU, 192x192 frames; reference only)";

#[derive(Parser)]
#[command(name = "foal", version, about = "Unsupervised cardiac motion tracking with online adaptation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; falls back to FOAL_THREADS, then all cores.
    #[arg(long, global = true, env = "FOAL_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom dataset and its manifest.
    Synth {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the baseline tracker on baseline_train.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Meta-train from a baseline checkpoint on meta_train.
    MetaTrain {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Defaults to the baseline checkpoint in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate ED→ES mask propagation on the test splits.
    Eval {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "none", value_parser = ["none", "foal"])]
        adapt: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck,
    /// Print the effective configuration as JSON.
    Config,
}

enum Failure {
    Validation(Error),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Validation(e)
    }
}

fn load_manifest(cfg: &RunConfig, flag: Option<PathBuf>) -> foal::Result<Manifest> {
    Manifest::load(&flag.unwrap_or_else(|| cfg.paths.data_dir.join(MANIFEST_FILE)))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = match &cli.common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.common.seed {
        cfg.seed = seed;
    }
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("--threads {n}: {e}")))?;
    }
    let out_or_default = |out: Option<PathBuf>| out.unwrap_or_else(|| cfg.paths.out_dir.clone());
    match cli.command {
        Command::Synth { out } => {
            let out = out.unwrap_or_else(|| cfg.paths.data_dir.clone());
            let m = cmd_synth(&cfg, &out)?;
            println!("wrote {} videos and {}", m.entries.len(), out.join(MANIFEST_FILE).display());
        }
        Command::Train { manifest, out } => {
            let m = load_manifest(&cfg, manifest)?;
            let out = out_or_default(out);
            cmd_train(&cfg, &m, &out)?;
            report_files(&out, &[BASELINE_CHECKPOINT, TRAIN_LOSS_CSV]);
        }
        Command::MetaTrain { manifest, checkpoint, out } => {
            let m = load_manifest(&cfg, manifest)?;
            let out = out_or_default(out);
            let ckpt = checkpoint.unwrap_or_else(|| out.join(BASELINE_CHECKPOINT));
            cmd_meta_train(&cfg, &m, &ckpt, &out)?;
            report_files(&out, &[META_CHECKPOINT, META_PROGRESS_CSV]);
        }
        Command::Eval {
            manifest,
            checkpoint,
            adapt,
            out,
        } => {
            let mode: AdaptMode = adapt.parse()?;
            let m = load_manifest(&cfg, manifest)?;
            let out = out_or_default(out);
            let outcome = cmd_eval(&cfg, &m, &checkpoint, mode, &out)?;
            for s in &outcome.summary {
                println!(
                    "{:<13} {:<4} dice {:.4} ({:.4})",
                    s.split.as_str(),
                    s.label.map_or("MEAN", foal::metrics::label_name),
                    s.dice.mean,
                    s.dice.std
                );
            }
            if mode == AdaptMode::Foal {
                for r in &outcome.rows {
                    println!("adapt {:<20} {:8.1} ms", r.id, r.adapt_seconds * 1e3);
                }
                let t = outcome.adapt_time();
                println!("adaptation wall time: {:.1}±{:.1} ms/video over {} videos", t.mean * 1e3, t.std * 1e3, t.n);
                println!("reference: {REFERENCE_ADAPT_MS}");
            }
            let mut files = vec![outcome.metrics_file(), outcome.summary_file()];
            if mode == AdaptMode::Foal {
                files.push(outcome.heldout_file());
            }
            report_files(&out, &files);
        }
        Command::Gradcheck => {
            let checks = cmd_gradcheck(&cfg)?;
            let mut failed = Vec::new();
            for c in &checks {
                let status = if c.passed() { "ok  " } else { "FAIL" };
                println!(
                    "{status} {:<24} max_rel_err {:.3e} (tol {:.0e}, {} probes, {} at kinks)",
                    c.name, c.max_rel_error, c.tolerance, c.probes, c.kinks
                );
                if !c.passed() {
                    failed.push(format!("{} ({:.3e})", c.name, c.max_rel_error));
                }
            }
            if !failed.is_empty() {
                return Err(Failure::Numerical(format!("gradient check failed: {}", failed.join(", "))));
            }
            println!("{} checks passed", checks.len());
        }
        Command::Config => print!("{}", cfg.to_json()),
    }
    Ok(())
}

fn report_files<S: AsRef<str>>(dir: &Path, names: &[S]) {
    for n in names {
        println!("wrote {}", dir.join(n.as_ref()).display());
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
