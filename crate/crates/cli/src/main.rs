use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lsra_cli::commands::{self, Outcome};
use lsra_cli::Result;

#[derive(Parser)]
#[command(name = "lsra", version, about = "Profile, train, decode and compress LSRA transformer models")]
struct Cli {
    /// Directory every output file is written to.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mult-Adds and parameter breakdown, optionally checked against the mobile gate.
    Profile {
        config: PathBuf,
        #[arg(long, default_value_t = 30)]
        n_src: usize,
        #[arg(long, default_value_t = 30)]
        n_tgt: usize,
        /// Exit with code 2 unless under 500M Mult-Adds and 10M parameters.
        #[arg(long)]
        gate: bool,
    },
    /// Train on the synthetic task in the `[train]` table.
    Train { config: PathBuf },
    /// Teacher-forced loss and accuracy on the held-out examples.
    Eval {
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Decode the held-out sources.
    Decode {
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 4, conflicts_with = "greedy")]
        beam: usize,
        #[arg(long, default_value_t = 0.6)]
        lenpen: f64,
        #[arg(long)]
        greedy: bool,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Head-averaged attention maps of one layer with diagonal mass.
    AttnExport {
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Prune and k-means quantize a checkpoint.
    Compress {
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8)]
        bits: u32,
        /// JSON object mapping layer names to sparsities.
        #[arg(long)]
        sparsity_file: Option<PathBuf>,
        /// Overall sparsity allocated from a per-layer sensitivity scan.
        #[arg(long)]
        target_sparsity: Option<f64>,
        #[arg(long, default_value_t = 100)]
        iters: usize,
    },
    /// Side-by-side cost table of two configs.
    Compare {
        config_a: PathBuf,
        config_b: PathBuf,
        #[arg(long)]
        checkpoint_a: Option<PathBuf>,
        #[arg(long)]
        checkpoint_b: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<Outcome> {
    let out_dir = cli.out_dir;
    match cli.command {
        Command::Profile { config, n_src, n_tgt, gate } => commands::cmd_profile(&commands::ProfileArgs {
            config,
            n_src,
            n_tgt,
            gate,
            out_dir,
        }),
        Command::Train { config } => commands::cmd_train(&commands::TrainArgs { config, out_dir }),
        Command::Eval { config, checkpoint } => commands::cmd_eval(&commands::EvalArgs {
            config,
            checkpoint,
            out_dir,
        }),
        Command::Decode {
            config,
            checkpoint,
            beam,
            lenpen,
            greedy,
            count,
            max_len,
        } => commands::cmd_decode(&commands::DecodeArgs {
            config,
            checkpoint,
            beam: (!greedy).then_some(beam),
            lenpen,
            count,
            max_len,
            out_dir,
        }),
        Command::AttnExport {
            config,
            checkpoint,
            layer,
            index,
        } => commands::cmd_attn_export(&commands::AttnExportArgs {
            config,
            checkpoint,
            layer,
            index,
            out_dir,
        }),
        Command::Compress {
            config,
            checkpoint,
            bits,
            sparsity_file,
            target_sparsity,
            iters,
        } => commands::cmd_compress(&commands::CompressArgs {
            config,
            checkpoint,
            bits,
            sparsity_file,
            target_sparsity,
            iters,
            out_dir,
        }),
        Command::Compare {
            config_a,
            config_b,
            checkpoint_a,
            checkpoint_b,
        } => commands::cmd_compare(&commands::CompareArgs {
            config_a,
            config_b,
            checkpoint_a,
            checkpoint_b,
            out_dir,
        }),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
