use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use owr_cli::commands::{
    ablation_text, cmd_ablate, cmd_compare, cmd_eval, cmd_run, metrics_table, AblationAxis,
};
use owr_cli::{CliError, ExperimentConfig};
use owr_core::protocol::RejectionRule;

#[derive(Parser)]
#[command(name = "owr", version, about = "Open world recognition experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunFlags {
    /// Experiment config (TOML).
    config: PathBuf,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Root for relative output directories.
    #[arg(long, env = "OWR_OUTPUT_ROOT", default_value = ".")]
    output_root: PathBuf,
    /// Experiments run in parallel.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Replace `schedule.order_seeds`.
    #[arg(long, value_delimiter = ',')]
    order_seeds: Option<Vec<u64>>,
    /// Replace `schedule.runs`.
    #[arg(long)]
    runs: Option<usize>,
    /// Replace `training.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Configuration helpers.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
    /// Train and evaluate every (order, run) pair.
    Run(RunFlags),
    /// Evaluate a checkpoint without training.
    Eval {
        checkpoint: PathBuf,
        /// Schedule JSON replacing the one stored in the checkpoint.
        #[arg(long)]
        schedule: Option<PathBuf>,
        #[arg(long, value_enum)]
        rule: Vec<RuleArg>,
        /// Use this distance for every class (`inf` disables rejection).
        #[arg(long)]
        delta_override: Option<f64>,
        /// Also write the records here as JSON lines.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ablation over loss terms or rejection strategies.
    Ablate {
        #[arg(long, value_enum)]
        axis: AxisArg,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Ours, NNO and DeepNNO on the same experiment.
    Compare(RunFlags),
}

#[derive(Subcommand)]
enum ConfigAction {
    /// Print a complete config with every default spelled out.
    Init,
    /// Parse and validate a config.
    Check { config: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Losses,
    Rejection,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    ClassSpecific,
    SingleStage,
    Global,
    Deepnno,
    Nno,
}

impl From<RuleArg> for RejectionRule {
    fn from(r: RuleArg) -> Self {
        match r {
            RuleArg::ClassSpecific => RejectionRule::ClassSpecific,
            RuleArg::SingleStage => RejectionRule::SingleStage,
            RuleArg::Global => RejectionRule::GlobalThreshold,
            RuleArg::Deepnno => RejectionRule::DeepnnoHeuristic,
            RuleArg::Nno => RejectionRule::Nno,
        }
    }
}

fn prepare(flags: &RunFlags) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let mut config = ExperimentConfig::load(&flags.config)?;
    if let Some(seeds) = &flags.order_seeds {
        config.schedule.order_seeds = seeds.clone();
    }
    if let Some(runs) = flags.runs {
        config.schedule.runs = runs;
    }
    if let Some(seed) = flags.seed {
        config.training.seed = seed;
    }
    config.validate()?;
    let out = flags.out.clone().unwrap_or_else(|| {
        if config.output.dir.is_absolute() {
            config.output.dir.clone()
        } else {
            flags.output_root.join(&config.output.dir)
        }
    });
    Ok((config, out))
}

fn main_inner(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Config { action } => match action {
            ConfigAction::Init => {
                print!("{}", ExperimentConfig::example().to_toml());
            }
            ConfigAction::Check { config } => {
                ExperimentConfig::load(&config)?;
                println!("{}: ok", config.display());
            }
        },
        Command::Run(flags) => {
            let (config, out) = prepare(&flags)?;
            let artifacts = cmd_run(&config, &out, flags.workers)?;
            print!(
                "{}",
                std::fs::read_to_string(out.join("summary.txt")).unwrap_or_default()
            );
            println!(
                "wrote {} experiment directories under {}",
                artifacts.experiment_dirs.len(),
                artifacts.out_dir.display()
            );
        }
        Command::Eval {
            checkpoint,
            schedule,
            rule,
            delta_override,
            out,
        } => {
            let rules: Vec<RejectionRule> = rule.into_iter().map(Into::into).collect();
            let reports = cmd_eval(&checkpoint, schedule.as_deref(), &rules, delta_override)?;
            let mut table = std::collections::BTreeMap::new();
            let mut lines = String::new();
            for (rule, report) in &reports {
                table.insert(rule.name().to_string(), vec![*report]);
                let mut value = serde_json::to_value(report).expect("serializable");
                value["rule"] = rule.name().into();
                lines.push_str(&value.to_string());
                lines.push('\n');
            }
            print!("{}", metrics_table(&table));
            if let Some(path) = out {
                write_file(&path, &lines)?;
            }
        }
        Command::Ablate { axis, flags } => {
            let (config, out) = prepare(&flags)?;
            let axis = match axis {
                AxisArg::Losses => AblationAxis::Losses,
                AxisArg::Rejection => AblationAxis::Rejection,
            };
            let table = cmd_ablate(&config, axis, &out, flags.workers)?;
            print!("{}", ablation_text(&table));
        }
        Command::Compare(flags) => {
            let (config, out) = prepare(&flags)?;
            cmd_compare(&config, &out, flags.workers)?;
            print!(
                "{}",
                std::fs::read_to_string(out.join("compare.txt")).unwrap_or_default()
            );
        }
    }
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::io(format!("creating {}", parent.display()), e))?;
    }
    owr_cli::commands::write_atomic(path, contents)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match main_inner(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
