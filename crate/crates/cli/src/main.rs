use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use biaslab::tasks::Token;
use biaslab::theory::{
    global_label_law, label_distribution, theoretical_embedding, EmbeddingConstants, EmbeddingForm,
    Role,
};
use biaslab_cli::config::ExperimentConfig;
use biaslab_cli::manifest::Manifest;
use biaslab_cli::pipeline::{self, timestamped_dir};
use biaslab_cli::sweep::{sweep, SweepParam};
use biaslab_cli::verify::{self, Suite};
use biaslab_cli::{CliError, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(
    name = "biaslab",
    version,
    about = "Reasoning-bias experiments on synthetic composition tasks"
)]
struct Cli {
    /// Overrides the task, model and shuffle seeds of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Concurrent runs in a sweep.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// One math thread everywhere.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Root under which run directories are created; defaults to the
    /// config's `output_dir`.
    #[arg(long, global = true, env = "BIASLAB_OUTPUT_ROOT")]
    output_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset and memory table into a new run directory.
    GenData(ConfigArg),
    /// Generate data and train, saving metrics and checkpoints.
    Train(ConfigArg),
    /// Generate, train and run every configured analysis.
    Run(ConfigArg),
    /// Re-run the configured analyses on an existing run directory.
    Analyze {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        run: PathBuf,
    },
    /// Print a closed-form oracle vector as `index,value` CSV.
    Oracle {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(value_enum)]
        kind: OracleKind,
        #[arg(long)]
        token: Option<Token>,
        #[arg(long, value_enum)]
        role: Option<RoleArg>,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One run per value of a parameter plus a comparison table.
    Sweep {
        #[command(flatten)]
        config: ConfigArg,
        /// gamma, lr or use_layer_norm.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<String>,
    },
    /// Run a self-check suite and print its JSON report.
    Verify {
        /// oracles, gradients, attention, cliff or flow.
        suite: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a run directory against its MANIFEST.
    CheckManifest { run: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleKind {
    /// Label law `P^s` of a token.
    Label,
    /// Label law of the whole dataset.
    Global,
    /// Derived Gaussian-bump embedding of a token.
    Embedding,
    /// Fitted Gaussian-bump embedding of a token.
    FittedEmbedding,
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    MemAnchor,
    RsnAnchor,
    Key,
    KeyWithNoise,
}

impl From<RoleArg> for Role {
    fn from(r: RoleArg) -> Self {
        match r {
            RoleArg::MemAnchor => Role::MemAnchor,
            RoleArg::RsnAnchor => Role::RsnAnchor,
            RoleArg::Key => Role::Key,
            RoleArg::KeyWithNoise => Role::KeyWithNoise,
        }
    }
}

fn load(arg: &ConfigArg, seed: Option<u64>) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(&arg.config)?;
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn new_run_dir(cli: &Cli, cfg: &ExperimentConfig, suffix: &str) -> PathBuf {
    let root = cli
        .output_root
        .clone()
        .unwrap_or_else(|| cfg.output_dir.clone());
    timestamped_dir(&root, &format!("{}{suffix}", cfg.name))
}

fn staged(dir: &Path, cfg: &ExperimentConfig, train: bool) -> Result<()> {
    pipeline::fresh_dir(dir)?;
    pipeline::with_manifest(dir, || {
        pipeline::write_config(cfg, dir)?;
        let data = pipeline::gen_data_stage(cfg, dir)?;
        if train {
            let t = pipeline::train_stage(cfg, dir, &data)?;
            let s = pipeline::summarize(cfg, &t, 0.0);
            biaslab::analysis::output::write_json(&dir.join("summary.json"), &s)?;
        }
        Ok(())
    })
}

fn write_vector(out: Option<&Path>, v: &[f64]) -> Result<()> {
    let mut text = String::from("index,value\n");
    for (i, x) in v.iter().enumerate() {
        text.push_str(&format!("{i},{x}\n"));
    }
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn oracle(
    cfg: &ExperimentConfig,
    kind: OracleKind,
    token: Option<Token>,
    role: Option<RoleArg>,
) -> Result<Vec<f64>> {
    let need = || -> Result<(Token, Role)> {
        match (token, role) {
            (Some(t), Some(r)) => Ok((t, r.into())),
            _ => Err(CliError::Config(
                "oracle: --token and --role are required for this kind".into(),
            )),
        }
    };
    Ok(match kind {
        OracleKind::Global => global_label_law(&cfg.task)?,
        OracleKind::Label => {
            let (s, r) = need()?;
            label_distribution(&cfg.task, s, r)?.probs
        }
        OracleKind::Embedding | OracleKind::FittedEmbedding => {
            let (s, r) = need()?;
            let form = if matches!(kind, OracleKind::Embedding) {
                EmbeddingForm::Derived(EmbeddingConstants::from_task(
                    &cfg.task,
                    s,
                    r,
                    cfg.train.lr,
                    cfg.model.d_m,
                )?)
            } else {
                EmbeddingForm::Fitted { d_m: cfg.model.d_m }
            };
            theoretical_embedding(
                &cfg.task,
                s,
                r,
                &form,
                None::<(f64, &mut biaslab::rng::StreamRng)>,
            )?
            .vector
        }
    })
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(c) | Command::Train(c) | Command::Run(c) => {
            let cfg = load(c, cli.seed)?;
            let dir = new_run_dir(cli, &cfg, "");
            match &cli.command {
                Command::GenData(_) => staged(&dir, &cfg, false)?,
                Command::Train(_) => staged(&dir, &cfg, true)?,
                _ => {
                    pipeline::run_experiment(&cfg, &dir)?;
                }
            }
            println!("{}", dir.display());
        }
        Command::Analyze { config, run } => {
            let cfg = load(config, cli.seed)?;
            pipeline::reanalyze(&cfg, run)?;
            println!("{}", run.join(pipeline::ANALYSIS_DIR).display());
        }
        Command::Oracle {
            config,
            kind,
            token,
            role,
            out,
        } => {
            let cfg = load(config, cli.seed)?;
            write_vector(out.as_deref(), &oracle(&cfg, *kind, *token, *role)?)?;
        }
        Command::Sweep {
            config,
            param,
            values,
        } => {
            let cfg = load(config, cli.seed)?;
            let param: SweepParam = param.parse()?;
            let dir = new_run_dir(cli, &cfg, &format!("-sweep-{}", param.name()));
            let report = sweep(&cfg, param, values, &dir, cli.jobs)?;
            println!(
                "{} (comparison epoch {})",
                dir.display(),
                report.comparison_epoch
            );
        }
        Command::Verify { suite, out } => {
            let suite: Suite = suite.parse()?;
            let report = verify::run(suite)?;
            let text = serde_json::to_string_pretty(&report)? + "\n";
            match out {
                Some(p) => std::fs::write(p, &text)?,
                None => print!("{text}"),
            }
            if !report.passed {
                let names: Vec<&str> = report.failures().iter().map(|c| c.name.as_str()).collect();
                return Err(CliError::Verify(names.join("; ")));
            }
        }
        Command::CheckManifest { run } => {
            let bad = Manifest::read(run)?.mismatches(run)?;
            if !bad.is_empty() {
                return Err(CliError::Verify(format!(
                    "hash mismatch: {}",
                    bad.join(", ")
                )));
            }
            println!("ok");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.deterministic {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
