use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use harpbd::bodygraph::SensorSetName;
use harpbd::cli::{cmd_eval, cmd_reduce, cmd_report, cmd_search, cmd_synth, cmd_train, CliError, Overrides, RunConfig};
use harpbd::network::Strategy;

#[derive(Parser)]
#[command(name = "harpbd", version, about = "Hierarchical activity recognition and protective behavior detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// One of the seven strategy names, e.g. PretrainedFrozen.
    #[arg(long)]
    strategy: Option<String>,
    /// full22, one_side14, one_side7, symmetric7 or custom.
    #[arg(long)]
    sensor_set: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    parallel_folds: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Synth(Common),
    /// Leave-one-subject-out training.
    Train(Common),
    /// Recompute metrics and traces of a finished run.
    Eval {
        run: PathBuf,
    },
    /// Train on a reduced sensor set.
    Reduce(Common),
    /// Grid search over the loss and learning-rate settings.
    Search(Common),
    /// Summarize the metrics of one or more runs as CSV.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn config(c: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let strategy = c.strategy.as_deref().map(str::parse::<Strategy>).transpose()?;
    let sensor_set = c.sensor_set.as_deref().map(str::parse::<SensorSetName>).transpose()?;
    cfg.apply(&Overrides { seed: c.seed, strategy, sensor_set, out: c.out.clone(), parallel_folds: c.parallel_folds });
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(c) => {
            let manifest = cmd_synth(&config(&c)?)?;
            println!("{}", manifest.display());
        }
        Command::Train(c) => print_pooled(&cmd_train(&config(&c)?)?.report),
        Command::Reduce(c) => {
            if c.sensor_set.is_none() && c.config.is_none() {
                return Err(CliError::Config("reduce needs --sensor-set or a config with sensor_set".into()));
            }
            print_pooled(&cmd_reduce(&config(&c)?)?.report)
        }
        Command::Eval { run } => print_pooled(&cmd_eval(&run)?),
        Command::Search(c) => {
            let s = cmd_search(&config(&c)?)?;
            println!("holdout {}", s.holdout.join(","));
            println!("har best {:?}", s.har.best);
            println!("pbd best {:?}", s.pbd.best);
        }
        Command::Report { runs } => print!("{}", cmd_report(&runs)?),
    }
    Ok(())
}

fn print_pooled(r: &harpbd::eval::MetricsReport) {
    let p = &r.pooled;
    if let Some(h) = &p.har {
        println!("har accuracy {:.4} macro_f1 {:.4}", h.accuracy, h.macro_f1);
    }
    println!("pbd macro_f1 {:.4} pr_auc {:.4}", p.pbd.macro_f1, p.pr_auc);
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::from(if e.kind() == "config" { 2 } else { 1 })
        }
    }
}
