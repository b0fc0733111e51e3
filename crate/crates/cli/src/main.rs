use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use crl::{LossKind, LossSpec};
use crl_cli::diagnostics::{cmd_curves, cmd_gradcheck, cmd_heatmap};
use crl_cli::runs::{cmd_compare, cmd_sweep, cmd_train};
use crl_cli::{CliError, RunConfig};

#[derive(Parser)]
#[command(name = "crl", version, about = "Competing ratio loss experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per seed and report test metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed list.
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        seed: Vec<u64>,
        /// Overrides the loss, e.g. `cel` or `crl:1.5:1`.
        #[arg(long)]
        loss: Option<String>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Grid over CRL alpha and beta.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        alpha: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        beta: Vec<f64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Finite-difference check of every loss and layer gradient.
    Gradcheck {
        /// Restrict the loss suite, e.g. `crl,nllr`.
        #[arg(long, value_delimiter = ',')]
        loss: Vec<LossKind>,
        #[arg(long, default_value_t = 1000)]
        cases: usize,
        #[arg(long, default_value_t = 20)]
        layer_cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        printed_crl: bool,
    },
    /// Export dL/dx_j against p_c for CEL, NLLR and CRL.
    Curves {
        #[arg(long, default_value_t = 1.5)]
        alpha: f64,
        #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75,1")]
        beta: Vec<f64>,
        #[arg(long = "pj", default_value_t = 0.5)]
        p_j: f64,
        #[arg(long, default_value_t = 99)]
        grid: usize,
        #[arg(long, default_value = "curves.csv")]
        out: PathBuf,
    },
    /// Paired comparison of two losses over consecutive seeds.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "cel")]
        loss_a: String,
        #[arg(long, default_value = "crl")]
        loss_b: String,
        #[arg(long, default_value_t = 10)]
        runs: usize,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Softmax outputs of a checkpoint for chosen test samples.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Config describing the dataset the checkpoint was trained on.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        ids: Vec<usize>,
        #[arg(long, default_value = "heatmap.csv")]
        out: PathBuf,
    },
}

fn parse_loss(name: &str) -> Result<LossSpec, CliError> {
    let spec = LossSpec::parse(name).map_err(|e| CliError::Usage(e.to_string()))?;
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(spec)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            config,
            seed,
            loss,
            output_dir,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if !seed.is_empty() {
                cfg.seeds = seed;
            }
            if let Some(name) = loss {
                cfg.loss = parse_loss(&name)?;
            }
            let out = cfg.output_dir(output_dir.as_deref());
            let report = cmd_train(&cfg, &out)?;
            let s = &report.summary;
            println!(
                "{}: top-1 error {:.2} ± {:.2}%, macro-F1 {:.2}% over {} seed(s); results in {}",
                cfg.loss,
                s.top1_error_pct.mean,
                s.top1_error_pct.std,
                s.macro_f1_pct.mean,
                s.top1_error_pct.n,
                out.display()
            );
        }
        Command::Sweep {
            config,
            alpha,
            beta,
            output_dir,
        } => {
            let cfg = RunConfig::load(&config)?;
            let out = cfg.output_dir(output_dir.as_deref());
            let res = cmd_sweep(&cfg, &alpha, &beta, &out)?;
            print!("{:>8}", "beta");
            res.alphas.iter().for_each(|a| print!(" {:>9}", format!("a={a}")));
            println!();
            for (b, row) in res.betas.iter().zip(&res.pivot) {
                print!("{b:>8}");
                row.iter().for_each(|e| print!(" {e:>9.2}"));
                println!();
            }
        }
        Command::Gradcheck {
            loss,
            cases,
            layer_cases,
            seed,
            printed_crl,
        } => {
            cmd_gradcheck(&loss, cases, layer_cases, seed, printed_crl)?;
        }
        Command::Curves {
            alpha,
            beta,
            p_j,
            grid,
            out,
        } => {
            let samples = cmd_curves(alpha, &beta, p_j, grid, &out)?;
            println!("wrote {} points to {}", samples.len(), out.display());
        }
        Command::Compare {
            config,
            loss_a,
            loss_b,
            runs,
            output_dir,
        } => {
            let cfg = RunConfig::load(&config)?;
            let (a, b) = (parse_loss(&loss_a)?, parse_loss(&loss_b)?);
            let out = cfg.output_dir(output_dir.as_deref());
            let c = cmd_compare(&cfg, &a, &b, runs, &out)?;
            println!(
                "{a}: {:.2} ± {:.2}%  {b}: {:.2} ± {:.2}%  t = {:.4}, dof {}, p = {:.4}",
                c.aggregate_a.mean, c.aggregate_a.std, c.aggregate_b.mean, c.aggregate_b.std, c.ttest.t_stat, c.ttest.dof, c.ttest.p_value
            );
        }
        Command::Heatmap {
            checkpoint,
            config,
            ids,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            cmd_heatmap(&checkpoint, &cfg, &ids, &out)?;
            println!("wrote {} rows to {}", ids.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
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
