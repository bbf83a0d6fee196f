use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kgt_cli::{
    cmd_dump_sequence, cmd_eval, cmd_pretrain, cmd_stats, cmd_tune, exit_code, ConfigSource, DumpRequest, ENV_CONFIG,
};
use kgt_core::sampler::Strategy;
use kgt_core::sequence::MaskKind;

#[derive(Parser)]
#[command(name = "kgt", version, about = "Knowledge-graph transformer: pretraining, prompt tuning and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain on `paths.graph` with the enabled objectives.
    Pretrain(RunArgs),
    /// Continual training and task tuning from a pretrained checkpoint.
    Tune(RunArgs),
    /// Evaluate a tuned checkpoint on `paths.test`.
    Eval(RunArgs),
    /// Print statistics of one or more triple files.
    Stats {
        #[arg(required = true)]
        graphs: Vec<PathBuf>,
    },
    /// Print the tokens and attention matrix of one sampled sequence.
    DumpSequence(DumpArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Config file; defaults to the file named by KGT_CONFIG.
    #[arg(long, env = ENV_CONFIG)]
    config: Option<PathBuf>,
    /// Base settings the config file is applied on top of (paper|smoke).
    #[arg(long)]
    preset: Option<String>,
    /// `section.key=value`, applied after the config file. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// `false` replaces the neighbourhood matrix with all ones.
    #[arg(long, value_name = "BOOL", num_args = 0..=1, default_missing_value = "true")]
    use_matrix: Option<bool>,
    /// Output directory (paths.out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn source(&self) -> ConfigSource {
        ConfigSource {
            preset: self.preset.clone(),
            file: self.config.clone(),
            overrides: self.overrides.clone(),
            seed: self.seed,
            use_matrix: self.use_matrix,
            out_dir: self.out.clone(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    RandomWalk,
    EntityCentered,
}

#[derive(Clone, Copy, ValueEnum)]
enum MaskArg {
    Entity,
    Relation,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long = "graph", required = true)]
    graphs: Vec<PathBuf>,
    /// Label of the center entity.
    #[arg(long)]
    center: String,
    #[arg(long, default_value_t = 8)]
    k: usize,
    #[arg(long, value_enum, default_value = "entity-centered")]
    strategy: StrategyArg,
    #[arg(long, value_enum)]
    mask: Option<MaskArg>,
    #[arg(long, default_value_t = 0.15)]
    mask_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn run(cli: Cli) -> kgt_core::Result<String> {
    let out = match cli.command {
        Command::Pretrain(a) => cmd_pretrain(&a.source().resolve()?)?.summary,
        Command::Tune(a) => cmd_tune(&a.source().resolve()?)?.summary,
        Command::Eval(a) => cmd_eval(&a.source().resolve()?)?.summary,
        Command::Stats { graphs } => cmd_stats(&graphs)?,
        Command::DumpSequence(d) => cmd_dump_sequence(&DumpRequest {
            graphs: d.graphs,
            center: d.center,
            k: d.k,
            strategy: match d.strategy {
                StrategyArg::RandomWalk => Strategy::RandomWalk,
                StrategyArg::EntityCentered => Strategy::EntityCentered,
            },
            mask: d.mask.map(|m| match m {
                MaskArg::Entity => MaskKind::Entity,
                MaskArg::Relation => MaskKind::Relation,
            }),
            mask_rate: d.mask_rate,
            seed: d.seed,
        })?,
    };
    Ok(out)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
