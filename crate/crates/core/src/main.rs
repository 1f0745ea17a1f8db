// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use kedit::cli::{self, Experiment, RunConfig};
use kedit::editor::ObjectiveKind;
use kedit::weightupdate::SolverKind;
use kedit::Result;

#[derive(Parser)]
#[command(name = "kedit", version, about = "Windowed knowledge editing on small transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set editor.optimizer.steps=10`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
    /// Run directory; beats the configuration and the output-root variable.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EditArgs {
    /// Shift objective; overrides `editor.objective`.
    #[arg(long, value_enum)]
    objective: Option<ObjectiveArg>,
    /// Weight-update solver; overrides `solver.kind`.
    #[arg(long, value_enum)]
    solver: Option<SolverArg>,
    /// Records whose shifts are combined into one weight solve.
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    OneForAll,
    Window,
    Parallel,
    Matryoshka,
    MatryoshkaAffinity,
}

impl From<ObjectiveArg> for ObjectiveKind {
    fn from(a: ObjectiveArg) -> Self {
        match a {
            ObjectiveArg::OneForAll => ObjectiveKind::OneForAll,
            ObjectiveArg::Window => ObjectiveKind::WindowByWindow,
            ObjectiveArg::Parallel => ObjectiveKind::ParallelNll,
            ObjectiveArg::Matryoshka => ObjectiveKind::MatryoshkaVanilla,
            ObjectiveArg::MatryoshkaAffinity => ObjectiveKind::MatryoshkaAffinity,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    Memit,
    Alphaedit,
    Unke,
}

impl From<SolverArg> for SolverKind {
    fn from(a: SolverArg) -> Self {
        match a {
            SolverArg::Memit => SolverKind::MemitClosedForm,
            SolverArg::Alphaedit => SolverKind::AlphaEditNullSpace,
            SolverArg::Unke => SolverKind::UnkeLayerGd,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ExperimentArg {
    LengthBuckets,
    Stability,
    WindowAblation,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a model on the synthetic corpus.
    Pretrain(ConfigArgs),
    /// Generate the edit benchmark.
    Genbench(ConfigArgs),
    /// Optimize shifts, solve for weight edits and score them.
    Edit {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        edit: EditArgs,
    },
    /// Re-score the exported edits of a run against the unedited model.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        edit: EditArgs,
    },
    /// Run the analysis experiments.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum, default_value = "all")]
        experiment: ExperimentArg,
    },
    /// Summarize every edit run in a directory.
    Report {
        /// Run directory.
        dir: PathBuf,
    },
}

fn load(args: &ConfigArgs, edit: Option<&EditArgs>) -> Result<RunConfig> {
    let mut overrides = args.overrides.clone();
    if let Some(e) = edit {
        if let Some(o) = e.objective {
            overrides.push(format!("editor.objective=\"{}\"", ObjectiveKind::from(o).name()));
        }
        if let Some(s) = e.solver {
            overrides.push(format!("solver.kind=\"{}\"", SolverKind::from(s).name()));
        }
        if let Some(b) = e.batch_size {
            overrides.push(format!("eval.batch_size={b}"));
        }
    }
    let mut cfg = RunConfig::load(args.config.as_deref(), &overrides)?;
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<cli::CommandOutput> {
    match cli.command {
        Command::Pretrain(a) => cli::cmd_pretrain(&load(&a, None)?),
        Command::Genbench(a) => cli::cmd_genbench(&load(&a, None)?),
        Command::Edit { config, edit } => cli::cmd_edit(&load(&config, Some(&edit))?),
        Command::Eval { config, edit } => cli::cmd_eval(&load(&config, Some(&edit))?),
        Command::Sweep { config, experiment } => {
            let experiments = match experiment {
                ExperimentArg::LengthBuckets => vec![Experiment::LengthBuckets],
                ExperimentArg::Stability => vec![Experiment::Stability],
                ExperimentArg::WindowAblation => vec![Experiment::WindowAblation],
                ExperimentArg::All => Experiment::ALL.to_vec(),
            };
            cli::cmd_sweep(&load(&config, None)?, &experiments)
        }
        Command::Report { dir } => cli::cmd_report(&dir),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(out) => {
            println!("{}", out.summary);
            println!("manifest: {}", out.manifest_path.display());
            ExitCode::from(cli::EXIT_OK as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
