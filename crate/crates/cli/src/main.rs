//! `fedml`: batch runner for federated meta-learning experiments.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::{AdaptArgs, AttackArgs};
use crate::config::{Algorithm, DatasetSpec, ExperimentConfig};
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "fedml", version, about = "Federated meta-learning experiments on softmax regression")]
struct Cli {
    /// Worker threads for per-node computation (results do not depend on it).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a federation (synthetic or MNIST) and write it as JSON.
    Generate(ExperimentArgs),
    /// Train with fedml, fedavg or robust-fedml.
    Train {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Record real wall-clock times in the rounds CSV (breaks byte-identical reruns).
        #[arg(long)]
        timing: bool,
    },
    /// Evaluate fast adaptation of trained parameters at the target nodes.
    Adapt {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        /// Adaptation samples per target; re-splits targets if it differs from the dataset's K.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Evaluate adapted models under FGSM perturbations.
    Attack {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3")]
        xi: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        steps: usize,
        /// Clip perturbed features to `lo,hi`, e.g. `0,1` for pixels.
        #[arg(long, value_delimiter = ',', num_args = 2)]
        clip: Option<Vec<f64>>,
    },
    /// Estimate constants and compare the convergence bound with a real run.
    Analyze(ExperimentArgs),
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use a federation file written by `generate` as the dataset.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    algorithm: Option<Algorithm>,
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    beta: Option<f64>,
    /// Total local iterations T.
    #[arg(long)]
    iterations: Option<usize>,
    /// Local iterations per round T0.
    #[arg(long)]
    local_steps: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    reg: Option<f64>,
    /// Robust penalty; only with `--algorithm robust-fedml`.
    #[arg(long, allow_negative_numbers = true)]
    lambda: Option<f64>,
}

impl ExperimentArgs {
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match (&self.config, &self.dataset) {
            (Some(path), _) => ExperimentConfig::from_file(path)?,
            (None, Some(path)) => serde_json::from_value(serde_json::json!({
                "dataset": {"file": {"path": path}}
            }))
            .map_err(|e| CliError::Config(e.to_string()))?,
            (None, None) => return Err(CliError::Config("pass --config or --dataset".into())),
        };
        if let Some(path) = &self.dataset {
            cfg.dataset = DatasetSpec::File { path: path.clone() };
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(a) = self.algorithm {
            cfg.algorithm = a;
        }
        if let Some(v) = self.alpha {
            cfg.fed.alpha = v;
        }
        if let Some(v) = self.beta {
            cfg.fed.beta = v;
        }
        if let Some(v) = self.iterations {
            cfg.fed.iterations = v;
        }
        if let Some(v) = self.local_steps {
            cfg.fed.local_steps = v;
        }
        if let Some(v) = self.k {
            cfg.fed.k = v;
        }
        if let Some(v) = self.reg {
            cfg.loss.reg_coeff = v;
        }
        if let Some(v) = self.lambda {
            cfg.robust.get_or_insert_with(Default::default).lambda = v;
        }
        cfg.resolve(&config::data_dir())
    }
}

#[derive(Args)]
struct ModelArgs {
    /// Parameters written by `train`.
    #[arg(long)]
    params: PathBuf,
    /// Federation written by `generate`.
    #[arg(long)]
    dataset: PathBuf,
    /// Adaptation step size (defaults to the training alpha).
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(exp) => {
            let cfg = exp.resolve()?;
            let s = commands::cmd_generate(&cfg, &exp.out)?;
            println!("nodes\tsamples\tmean\tstdev\tlabels/node");
            println!(
                "{}\t{}\t{:.2}\t{:.2}\t{}-{}",
                s.nodes, s.samples, s.mean, s.stdev, s.labels_per_node.0, s.labels_per_node.1
            );
            println!("wrote {}", exp.out.join(commands::FEDERATION_FILE).display());
        }
        Command::Train { exp, timing } => {
            let cfg = exp.resolve()?;
            let s = commands::cmd_train(&cfg, &exp.out, timing)?;
            println!(
                "{} log rows, final loss {:.6}, {} ms; wrote {}",
                s.rounds,
                s.final_loss,
                s.elapsed_ms,
                exp.out.display()
            );
        }
        Command::Adapt { model, steps, k } => {
            let args = AdaptArgs {
                params: model.params,
                dataset: model.dataset,
                steps,
                k,
                rate: model.rate,
            };
            let acc = commands::cmd_adapt(&args, &model.out)?;
            for (s, a) in acc.iter().enumerate() {
                println!("step {s}: mean test accuracy {a:.4}");
            }
        }
        Command::Attack { model, xi, steps, clip } => {
            let args = AttackArgs {
                params: model.params,
                dataset: model.dataset,
                xi,
                steps,
                rate: model.rate,
                clip: clip.map(|c| (c[0], c[1])),
            };
            let rows = commands::cmd_attack(&args, &model.out)?;
            for (xi, (clean, adv)) in args.xi.iter().zip(&rows) {
                println!("xi {xi}: clean accuracy {clean:.4}, adversarial accuracy {adv:.4}");
            }
        }
        Command::Analyze(exp) => {
            let cfg = exp.resolve()?;
            let outcome = commands::cmd_analyze(&cfg, &exp.out)?;
            let r = &outcome.report.report;
            println!("mu {:.4e} H {:.4e} rho {:.4e} B {:.4e}", r.constants.mu, r.constants.h, r.constants.rho, r.constants.b);
            let held = outcome.rows.iter().filter(|(_, g, b)| b >= g).count();
            println!("xi {:.6} h(T0) {:.4e}", r.xi, r.h_t0);
            println!("bound >= empirical gap at {held}/{} steps; wrote {}", outcome.rows.len(), exp.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = match cli.workers {
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build(),
        None => rayon::ThreadPoolBuilder::new().build(),
    };
    let pool = match pool {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match pool.install(|| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(&e, CliError::Core(fedml_core::Error::LearningRateCap(_))) {
                eprintln!("hint: lower --alpha/--beta or raise --reg; the report in the output directory lists the estimated constants");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
