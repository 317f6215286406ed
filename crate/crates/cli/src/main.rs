use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use swcalib::corpus::CorpusKind;
use swcalib_cli::commands::{self, EvalOptions, SweepAxis};
use swcalib_cli::{exit, CliError, CliResult};

#[derive(Parser)]
#[command(name = "swcalib", version, about = "Block-wise quantizer calibration with a sliced-Wasserstein objective")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic SWC1 token corpus.
    GenCorpus {
        #[arg(long)]
        vocab: u64,
        #[arg(long)]
        tokens: usize,
        #[arg(long)]
        kind: CorpusKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrate a model from a run config and write its artifacts.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Perplexity (and final-block distance) of a saved model on a corpus.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Also evaluate the quantized path.
        #[arg(long)]
        quantized: bool,
        #[arg(long)]
        seq_len: Option<usize>,
        #[arg(long, default_value_t = 64)]
        windows: usize,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 256)]
        sw_n_proj: usize,
        #[arg(long, default_value_t = 0)]
        sw_seed: u64,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sliced-Wasserstein distance between two tensor files.
    SwDistance {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 128)]
        n_proj: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Tensor to read when a file holds several.
        #[arg(long)]
        name: Option<String>,
        /// Write the estimate and its standard error as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// A single registered op; all of them when omitted.
        #[arg(long)]
        op: Option<String>,
        #[arg(long, default_value_t = 3)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// One calibration and evaluation per value of a loss setting.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
}

fn print_json<T: serde::Serialize>(value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)?;
    writeln!(std::io::stdout(), "{text}")?;
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    swcalib_cli::init_threads()?;
    match cli.command {
        Command::GenCorpus { vocab, tokens, kind, seed, out } => {
            let c = commands::cmd_gen_corpus(vocab, tokens, kind, seed, &out)?;
            eprintln!("wrote {} tokens to {}", c.len(), out.display());
        }
        Command::Calibrate { config } => {
            let out = commands::cmd_calibrate(&config)?;
            print_json(&out.metrics)?;
        }
        Command::Eval { model, corpus, quantized, seq_len, windows, batch_size, sw_n_proj, sw_seed, out } => {
            let opts = EvalOptions { quantized, seq_len, windows, batch_size, sw_n_proj, sw_seed };
            let report = commands::cmd_eval(&model, &corpus, &opts)?;
            if let Some(path) = out {
                std::fs::write(path, serde_json::to_string_pretty(&report)? + "\n")?;
            }
            print_json(&report)?;
        }
        Command::SwDistance { a, b, n_proj, seed, name, json } => {
            let probe = commands::cmd_sw_distance(&a, &b, name.as_deref(), n_proj, seed)?;
            writeln!(std::io::stdout(), "{}", probe.sw)?;
            eprintln!("sw = {} ± {} ({} projections)", probe.sw, probe.stderr, probe.n_proj);
            if let Some(path) = json {
                std::fs::write(path, serde_json::to_string_pretty(&probe)? + "\n")?;
            }
        }
        Command::Gradcheck { op, trials, seed } => {
            let rows = commands::cmd_gradcheck(op.as_deref(), trials, seed)?;
            commands::write_gradcheck_table(std::io::stdout(), &rows)?;
            let failed: Vec<String> = rows.iter().filter(|r| !r.passed).map(|r| r.op.clone()).collect();
            if !failed.is_empty() {
                return Err(CliError::GradcheckFailed(failed));
            }
        }
        Command::Sweep { config, axis, values } => {
            let (path, rows) = commands::cmd_sweep(&config, axis, &values)?;
            let mut w = csv::Writer::from_writer(std::io::stdout());
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush()?;
            eprintln!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
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
