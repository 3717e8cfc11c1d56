//! `splitfed` command line: experiment runner, communication model and
//! leakage reports. Exit status 2 means bad flags or configuration, 1 a
//! failure while running.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use splitfed::analytics::{analytical_comm, crossover_sweep, CommMethod, CommModelParams, BYTES_PER_VALUE};
use splitfed::config::{ExperimentConfig, Prepared};
use splitfed::experiment::{run_experiment, run_role, write_outputs, write_role_outputs, LeakageArtifact, Role};
use splitfed::privacy::smashed_leakage_report;
use splitfed::Error;

#[derive(Parser)]
#[command(name = "splitfed", version, about = "Split learning and federated learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every role of an experiment in this process.
    Train(ConfigArgs),
    /// Analytical communication volume of one method, or an SL/FL sweep.
    Comm(CommArgs),
    /// Distance correlation and KL leakage of saved probe batches.
    Leakage(LeakageArgs),
    /// Run the server (main server under splitfed learning) over TCP.
    ServeMain(ConfigArgs),
    /// Run the splitfed fed server over TCP.
    ServeFed(ConfigArgs),
    /// Run one client over TCP.
    Client {
        #[command(flatten)]
        config: ConfigArgs,
        /// Client index, from 0.
        #[arg(long)]
        id: usize,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CommArgs {
    /// sl-sharing, sl-nosharing or fl.
    #[arg(long, default_value = "fl")]
    method: String,
    /// Number of clients.
    #[arg(long = "K", default_value_t = 1.0)]
    clients: f64,
    /// Model parameters.
    #[arg(long = "N")]
    params: f64,
    /// Dataset size; required by the split methods.
    #[arg(long)]
    p: Option<f64>,
    /// Smashed values per sample; required by the split methods.
    #[arg(long)]
    q: Option<f64>,
    /// Fraction of parameters on the client; required by the split methods.
    #[arg(long)]
    fraction: Option<f64>,
    /// Compare weight-sharing SL with FL for K = 1..=100.
    #[arg(long)]
    sweep: bool,
}

#[derive(Args)]
struct LeakageArgs {
    /// Leakage artifacts written by `train` with `report.leakage_batches`.
    #[arg(required = true)]
    artifacts: Vec<PathBuf>,
    #[arg(long, default_value_t = splitfed::privacy::DEFAULT_BINS)]
    bins: usize,
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

/// Errors raised while reading and preparing a configuration count as
/// configuration errors unless they come from the environment.
fn classify(e: Error) -> Failure {
    match e {
        Error::Io(_) | Error::Disconnected { .. } => Failure::Runtime(e.into()),
        other => Failure::Usage(other.into()),
    }
}

fn load(args: &ConfigArgs) -> Result<(ExperimentConfig, Prepared), Failure> {
    let mut cfg = ExperimentConfig::load(&args.config).map_err(classify)?;
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    let prepared = cfg.prepare().map_err(classify)?;
    Ok((cfg, prepared))
}

fn train(args: &ConfigArgs) -> Result<(), Failure> {
    let (cfg, p) = load(args)?;
    let metrics = run_experiment(&cfg, &p).context("training failed")?;
    for r in &metrics.rounds {
        log::info!(
            "epoch {} train loss {:.4} acc {:.4} | test loss {:.4} acc {:.4} | up {} down {}",
            r.epoch, r.train_loss, r.train_accuracy, r.test_loss, r.test_accuracy, r.bytes_up, r.bytes_down
        );
    }
    let written = write_outputs(&cfg, &p, &metrics).context("writing outputs")?;
    println!("{}: final test accuracy {:.4}", metrics.protocol, metrics.final_test_accuracy());
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn role(args: &ConfigArgs, role: Role) -> Result<(), Failure> {
    let (cfg, p) = load(args)?;
    if cfg.network.is_none() {
        return Err(usage(anyhow!("roles started separately need a network block in the config")));
    }
    let run = run_role(&cfg, &p, role).map_err(|e| match e {
        Error::Config(_) => usage(e),
        other => Failure::Runtime(anyhow::Error::from(other).context("role failed")),
    })?;
    let total = run.ledger.total();
    println!("{}: {} messages, {} payload bytes", run.entity, total.messages, total.payload_bytes);
    for path in write_role_outputs(&cfg, &run).context("writing outputs")? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn comm(args: &CommArgs) -> Result<(), Failure> {
    let method: CommMethod = args.method.parse().map_err(usage)?;
    let needs_split_terms = args.sweep || method != CommMethod::Fl;
    let split_terms = match (args.p, args.q, args.fraction) {
        (Some(p), Some(q), Some(f)) => Some((p, q, f)),
        _ if needs_split_terms => return Err(usage(anyhow!("--p, --q and --fraction are required for this method"))),
        _ => None,
    };
    // FedAvg traffic does not depend on the split terms
    let (p, q, fraction) = split_terms.unwrap_or((1.0, 1.0, 0.5));
    let mut out = csv::Writer::from_writer(std::io::stdout().lock());
    if args.sweep {
        let ks: Vec<f64> = (1..=100).map(f64::from).collect();
        let rows = crossover_sweep(&ks, &[args.params], p, q, fraction).map_err(usage)?;
        out.write_record(["K", "N", "sl_total", "fl_total", "winner"]).context("writing CSV")?;
        for r in rows {
            let rec = [r.clients.to_string(), r.model_params.to_string(), r.sl_total.to_string(), r.fl_total.to_string()];
            out.write_record(rec.iter().map(String::as_str).chain([r.winner])).context("writing CSV")?;
        }
    } else {
        let m = CommModelParams {
            clients: args.clients,
            model_params: args.params,
            dataset_size: p,
            smashed_size: q,
            client_fraction: fraction,
        };
        let cost = analytical_comm(method, &m).map_err(usage)?;
        out.write_record(["method", "K", "N", "per_client", "total", "per_client_bytes", "total_bytes"])
            .context("writing CSV")?;
        let values = [args.clients, args.params, cost.per_client, cost.total];
        let bytes = [cost.per_client * BYTES_PER_VALUE, cost.total * BYTES_PER_VALUE];
        let rec: Vec<String> =
            std::iter::once(method.name().to_string()).chain(values.iter().chain(&bytes).map(f64::to_string)).collect();
        out.write_record(&rec).context("writing CSV")?;
    }
    out.flush().context("writing CSV")?;
    Ok(())
}

fn read_artifact(path: &Path) -> anyhow::Result<LeakageArtifact> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// `yes` when mean DCOR does not decrease as the Laplace budget grows,
/// `no` otherwise, and empty with fewer than two budgets.
fn monotone_flag(points: &[(f64, f64)]) -> &'static str {
    let mut by_eps: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for &(eps, dcor) in points {
        by_eps.entry(eps.to_bits()).or_default().push(dcor);
    }
    let mut means: Vec<(f64, f64)> =
        by_eps.into_iter().map(|(e, d)| (f64::from_bits(e), d.iter().sum::<f64>() / d.len() as f64)).collect();
    if means.len() < 2 {
        return "";
    }
    means.sort_by(|a, b| a.0.total_cmp(&b.0));
    if means.windows(2).all(|w| w[0].1 <= w[1].1) {
        "yes"
    } else {
        "no"
    }
}

fn leakage(args: &LeakageArgs) -> Result<(), Failure> {
    if args.bins < 2 {
        return Err(usage(anyhow!("--bins must be at least 2")));
    }
    let mut rows = Vec::new();
    let mut points = Vec::new();
    for path in &args.artifacts {
        let art = read_artifact(path)?;
        for (i, b) in art.batches.iter().enumerate() {
            let raw = b.raw.to_tensor().context("raw batch")?;
            let smashed = b.smashed.to_tensor().context("smashed batch")?;
            let report = smashed_leakage_report(&raw, &smashed, args.bins).context("leakage report")?;
            if let Some(eps) = art.laplace_epsilon {
                points.push((eps, report.dcor));
            }
            rows.push((path.display().to_string(), i, art.laplace_epsilon, raw.batch(), report.dcor, report.kl_nats));
        }
    }
    let flag = monotone_flag(&points);
    let mut out = csv::Writer::from_writer(std::io::stdout().lock());
    out.write_record(["artifact", "batch", "laplace_epsilon", "rows", "dcor", "kl_nats", "dcor_monotone_in_epsilon"])
        .context("writing CSV")?;
    for (artifact, batch, eps, n, dcor, kl) in rows {
        let eps = eps.map(|e| e.to_string()).unwrap_or_default();
        out.write_record([artifact, batch.to_string(), eps, n.to_string(), dcor.to_string(), kl.to_string(), flag.into()])
            .context("writing CSV")?;
    }
    out.flush().context("writing CSV")?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => train(a),
        Command::Comm(a) => comm(a),
        Command::Leakage(a) => leakage(a),
        Command::ServeMain(a) => role(a, Role::Main),
        Command::ServeFed(a) => role(a, Role::Fed),
        Command::Client { config, id } => role(config, Role::Client(*id)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
