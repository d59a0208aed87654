use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

mod commands;
mod manifest;

#[derive(Parser, Debug)]
#[command(name = "fewview", version, about = "Sparse-view radiance field training on analytic scenes")]
struct Cli {
    /// TOML config: a dataset spec for make-scene, a training config otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write an analytic scene and a rendered dataset in Blender layout.
    MakeScene(MakeScene),
    /// Train a field on a dataset directory.
    Train(Train),
    /// Render views of a dataset, or explicit spherical poses, from a checkpoint.
    Render(Render),
    /// Score renders against the test views.
    Eval(Eval),
    /// Record per-sample weight profiles on random test pixels.
    Diagnose(Diagnose),
}

#[derive(Args, Debug)]
struct MakeScene {
    /// Preset name (empty, one-sphere, two-primitive) or a scene TOML file.
    #[arg(long, default_value = "two-primitive")]
    scene: String,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    resolution: Option<usize>,
}

#[derive(Args, Debug)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    /// Config preset used when no --config is given (desk, quick, full-scale).
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Ablation variant applied on top of the config (baseline, ds-only, ssn-only, full).
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Continue from a saved training state.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Render {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset whose views are rendered (and whose intrinsics are reused).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Extra spherical pose `radius,phi,gamma` (radians); repeatable.
    #[arg(long = "pose", value_name = "R,PHI,GAMMA")]
    poses: Vec<String>,
}

#[derive(Args, Debug)]
struct Eval {
    #[arg(long)]
    data: PathBuf,
    /// Render the test views from this checkpoint.
    #[arg(long, conflicts_with = "renders")]
    checkpoint: Option<PathBuf>,
    /// Directory of existing renders laid out like the dataset (`test/r_<i>.png`).
    #[arg(long)]
    renders: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Diagnose {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Use the analytic scene of the dataset instead of a checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    oracle: bool,
    #[arg(long, default_value_t = 64)]
    rays: usize,
}

/// Failures caused by the invocation itself: bad flags, missing inputs.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn require_file(p: &Path) -> Result<()> {
    if !p.exists() {
        bail!(UsageError(format!("no such file or directory: {}", p.display())));
    }
    Ok(())
}

fn is_usage(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<UsageError>()
            || c.downcast_ref::<std::io::Error>()
                .is_some_and(|io| io.kind() == std::io::ErrorKind::NotFound)
    })
}

fn run(cli: Cli) -> Result<()> {
    std::fs::create_dir_all(&cli.out_dir)
        .with_context(|| format!("creating {}", cli.out_dir.display()))?;
    let ctx = commands::Context {
        config: cli.config.clone(),
        seed: cli.seed,
        out_dir: cli.out_dir.clone(),
    };
    if let Some(c) = &ctx.config {
        require_file(c)?;
    }
    match cli.command {
        Command::MakeScene(a) => commands::make_scene(&ctx, &a.scene, a.n_train, a.n_test, a.resolution),
        Command::Train(a) => commands::train(
            &ctx,
            &a.data,
            &a.preset,
            a.variant.as_deref(),
            a.iterations,
            a.resume.as_deref(),
        ),
        Command::Render(a) => commands::render(&ctx, &a.checkpoint, &a.data, &a.split, &a.poses),
        Command::Eval(a) => commands::eval(&ctx, &a.data, a.checkpoint.as_deref(), a.renders.as_deref()),
        Command::Diagnose(a) => commands::diagnose(&ctx, a.checkpoint.as_deref(), &a.data, a.oracle, a.rays),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            if code == 0 {
                let _ = e.print();
            } else {
                let text = e.render().to_string();
                let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
                eprintln!("error kind=usage msg={}", serde_json::Value::String(first.into()));
            }
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = if is_usage(&e) { ("usage", 2) } else { ("failure", 1) };
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error kind={kind} msg={}", serde_json::Value::String(msg));
            ExitCode::from(code)
        }
    }
}
