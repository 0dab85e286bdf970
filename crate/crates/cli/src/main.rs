//! `rollback`: dataset generation, pre-training, strategy runs, evaluation
//! and ablation sweeps.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{ArgAction, Args, Parser, Subcommand};

use rollback_cli::commands::{self, Ctx};
use rollback_cli::config::Config;
use rollback_core::rollback::Strategy;

#[derive(Parser)]
#[command(name = "rollback", version, about = "Block-wise rollback refine-tuning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// baseline | rollback | base_cy | fc_warmup | remain_block=I
    #[arg(long, value_name = "NAME")]
    strategy: Option<Strategy>,
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, value_name = "INT")]
    periods: Option<usize>,
    #[arg(long, value_name = "INT")]
    epochs_per_period: Option<usize>,
    #[arg(long, value_name = "BOOL", action = ArgAction::Set)]
    flip_fusion: Option<bool>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the source, train, query and gallery datasets.
    Gen(Common),
    /// Train on the source task and write the pre-trained checkpoint.
    Pretrain(Common),
    /// Fine-tune with a strategy; writes logs, checkpoints and a report.
    Run(Common),
    /// Evaluate a checkpoint on the query/gallery split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Directory with `query.rbds` and `gallery.rbds`.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Multi-seed comparison of strategies with per-period rows.
    Ablation(Common),
    /// Print header metadata of a dataset or checkpoint file.
    Describe {
        #[arg(value_name = "PATH")]
        path: PathBuf,
    },
}

fn context(common: &Common, default_out: &str) -> Result<Ctx> {
    let (mut config, config_source) = match &common.config {
        Some(p) => Config::load(p)?,
        None => (Config::default(), String::new()),
    };
    if let Some(s) = common.strategy {
        config.schedule.strategy = s;
    }
    if let Some(s) = common.seed {
        config.train.seed = s;
    }
    if let Some(p) = common.periods {
        config.schedule.periods = p;
    }
    if let Some(e) = common.epochs_per_period {
        config.schedule.epochs_per_period = e;
    }
    if let Some(f) = common.flip_fusion {
        config.flip_fusion = f;
    }
    Ok(Ctx {
        config,
        config_source,
        out: common.out.clone().unwrap_or_else(|| PathBuf::from(default_out)),
    })
}

fn dispatch(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Gen(c) => commands::cmd_gen(&context(&c, "data")?),
        Command::Pretrain(c) => commands::cmd_pretrain(&context(&c, "runs/pretrain")?),
        Command::Run(c) => commands::cmd_run(&context(&c, "runs/run")?),
        Command::Eval {
            common,
            checkpoint,
            data,
        } => {
            let write_out = common.out.is_some();
            let mut ctx = context(&common, "runs/eval")?;
            if data.is_some() {
                ctx.config.data_dir = data;
            }
            commands::cmd_eval(&ctx, &checkpoint, write_out)
        }
        Command::Ablation(c) => commands::cmd_ablation(&context(&c, "runs/ablation")?),
        Command::Describe { path } => commands::cmd_describe(&path),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", first.trim_end());
            return ExitCode::from(2);
        }
    };
    match dispatch(cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
