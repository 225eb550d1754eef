//! Command-line front end: corpus preparation, training, evaluation and
//! gradient checking, driven by a [`RunConfig`] plus flag overrides.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use dproto::dataset::SynthConfig;
use dproto::eval::ScoreRule;
use dproto::numerics::Fault;
use dproto::{Error, ErrorKind};

pub use config::{keys_help, KeySpec, RunConfig, KEYS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub fn exit_code(e: &Error) -> i32 {
    match e.kind() {
        ErrorKind::Usage => EXIT_USAGE,
        ErrorKind::Data => EXIT_DATA,
        ErrorKind::Numerical => EXIT_NUMERICAL,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "dproto",
    version,
    about = "Few-shot open-set keyword spotting with dummy prototypical networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Run configuration file
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a configuration key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Root seed (same as --set seed=N)
    #[arg(long)]
    seed: Option<u64>,
    /// Manifest TSV (same as --set data.manifest=PATH)
    #[arg(long)]
    manifest: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> dproto::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for pair in &self.set {
            cfg.set_pair(pair)?;
        }
        if let Some(s) = self.seed {
            cfg.set("seed", &s.to_string())?;
        }
        if let Some(m) = &self.manifest {
            cfg.set("data.manifest", &m.to_string_lossy())?;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FaultArg {
    ReluBackward,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a manifest from a Speech Commands v2 directory
    Manifest {
        /// Dataset root containing one directory per keyword
        #[arg(long)]
        root: PathBuf,
        /// Output manifest TSV
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render a synthetic keyword corpus and its manifest
    Synth {
        /// Output directory (manifest at OUT/manifest.tsv)
        #[arg(long)]
        out: PathBuf,
        /// Keyword classes, split 3:2:2 across train/val/test (default 15/10/10)
        #[arg(long)]
        classes: Option<usize>,
        /// Utterances per class
        #[arg(long, default_value_t = 40)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Episodic training; writes checkpoint.txt, history.jsonl and config.ini
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Plain prototypical network (no dummies, lambda = 0)
        #[arg(long)]
        baseline: bool,
        /// Shots per class (same as --set episode.n_shot=K)
        #[arg(long)]
        shots: Option<usize>,
        /// Epochs (same as --set train.epochs=N)
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint over sampled episodes; writes a JSON report and a CSV
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Shots per class (same as --set episode.n_shot=K)
        #[arg(long)]
        shots: Option<usize>,
        /// Episodes (same as --set eval.episodes=N)
        #[arg(long)]
        episodes: Option<usize>,
        /// Open-set score rule (same as --set eval.score=RULE)
        #[arg(long)]
        score: Option<ScoreRule>,
    },
    /// Compare episode-loss gradients against central finite differences
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, hide = true, value_enum)]
        inject_fault: Option<FaultArg>,
    },
}

fn execute(
    command: Command,
    out: &mut dyn std::io::Write,
    err: &mut dyn std::io::Write,
) -> dproto::Result<()> {
    let say = |w: &mut dyn std::io::Write, s: &str| {
        let _ = writeln!(w, "{s}");
    };
    match command {
        Command::Manifest {
            root,
            out: path,
            seed,
        } => {
            let m = commands::cmd_manifest(&root, &path, seed)?;
            say(
                out,
                &format!("utterances: {}", commands::counts_line(&m.keyword_counts())),
            );
            say(
                out,
                &format!("with silence: {}", commands::counts_line(&m.counts())),
            );
        }
        Command::Synth {
            out: dir,
            classes,
            samples,
            seed,
        } => {
            let cfg = match classes {
                Some(n) => SynthConfig::with_classes(n, samples)?,
                None => SynthConfig {
                    samples_per_class: samples,
                    ..SynthConfig::default()
                },
            };
            let m = commands::cmd_synth(&dir, &cfg, seed)?;
            say(
                out,
                &format!("manifest: {}", dir.join("manifest.tsv").display()),
            );
            say(
                out,
                &format!("utterances: {}", commands::counts_line(&m.keyword_counts())),
            );
            say(
                out,
                &format!("with silence: {}", commands::counts_line(&m.counts())),
            );
        }
        Command::Train {
            config,
            out: dir,
            baseline,
            shots,
            epochs,
        } => {
            let mut cfg = config.resolve()?;
            if let Some(k) = shots {
                cfg.set("episode.n_shot", &k.to_string())?;
            }
            if let Some(n) = epochs {
                cfg.set("train.epochs", &n.to_string())?;
            }
            if baseline {
                cfg.make_baseline();
            }
            let (outcome, files) = commands::cmd_train(&cfg, &dir, |line| say(err, line))?;
            say(
                out,
                &format!(
                    "best epoch {} (val acc {:.4})",
                    outcome.best_epoch, outcome.history[outcome.best_epoch].val_acc
                ),
            );
            say(out, &format!("checkpoint: {}", files.checkpoint.display()));
            say(out, &format!("history: {}", files.history.display()));
        }
        Command::Eval {
            config,
            checkpoint,
            out: dir,
            shots,
            episodes,
            score,
        } => {
            let mut cfg = config.resolve()?;
            if let Some(k) = shots {
                cfg.set("episode.n_shot", &k.to_string())?;
            }
            if let Some(n) = episodes {
                cfg.set("eval.episodes", &n.to_string())?;
            }
            if let Some(r) = score {
                cfg.set("eval.score", r.as_str())?;
            }
            let (report, json, csv) = commands::cmd_eval(&cfg, &checkpoint, &dir)?;
            say(out, &commands::eval_summary(&report));
            say(out, &format!("report: {}", json.display()));
            say(out, &format!("episodes: {}", csv.display()));
        }
        Command::Gradcheck {
            config,
            inject_fault,
        } => {
            let cfg = config.resolve()?;
            let fault = inject_fault.map(|FaultArg::ReluBackward| Fault::ReluBackward);
            let report = commands::cmd_gradcheck(&cfg, fault)?;
            say(
                out,
                &format!(
                    "probes checked {} skipped {}",
                    report.checked(),
                    report.skipped()
                ),
            );
            say(
                out,
                &format!("max relative error {:.3e}", report.max_rel_error),
            );
            let tol = cfg.gradcheck_tolerance();
            if !(report.max_rel_error < tol) {
                return Err(Error::GradCheck(format!(
                    "max relative error {:.3e} exceeds {tol:e}",
                    report.max_rel_error
                )));
            }
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to `err`.
pub fn run<I, T>(args: I, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let mut command = Cli::command().after_help(keys_help());
    for name in ["train", "eval", "gradcheck"] {
        command = command.mut_subcommand(name, |c| c.after_help(keys_help()));
    }
    let matches = match command.try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(err, "{text}")
            } else {
                write!(out, "{text}")
            };
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{e}");
            return EXIT_USAGE;
        }
    };
    match execute(cli.command, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}
