//! Runs configured experiments, either all roles in one process or one
//! role per process over TCP, and writes their artifacts.

use std::fs::{self, File};
use std::io::BufWriter;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::autodiff::{LayerStack, Tensor};
use crate::config::{ExperimentConfig, NetworkConfig, Prepared};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{split, split_ushaped, ModelSpec};
use crate::protocols::{
    fl_client, fl_server, probe_batch, probe_smashed, receive_hellos, run_centralized, run_fl, run_sfl, run_sl,
    run_sl_no_sync, run_sl_ushaped, run_sl_vertical, sfl_client, sfl_fed_server, sfl_main_server, sl_client,
    sl_server, ushaped_client, ushaped_server, vertical_client, vertical_models, vertical_server, write_metrics_csv,
    NamedPortion, Protocol, Relay, RoleOutput, Ring, RunMetrics, Workload,
};
use crate::transport::{
    client_entity, connect_with_retry, CommLedger, Counters, Endpoint, LedgerKey, LedgerReport, LedgerSnapshot,
    FED_SERVER, MAIN_SERVER, SERVER,
};

/// Runs every role of the configured protocol inside this process.
pub fn run_experiment(cfg: &ExperimentConfig, p: &Prepared) -> Result<RunMetrics> {
    let tc = cfg.train_config();
    let work = Workload { train: &p.train, test: &p.test, plan: &p.plan };
    match cfg.protocol {
        Protocol::Centralized => run_centralized(&p.model, &p.train, &p.test, &tc),
        Protocol::Fl => run_fl(&p.model, work, &tc),
        Protocol::Sl => run_sl(&p.model, cfg.cut, work, &tc),
        Protocol::SlNosync => run_sl_no_sync(&p.model, cfg.cut, work, &tc),
        Protocol::SlUshaped => run_sl_ushaped(&p.model, cfg.cut, back_cut(cfg)?, work, &tc),
        Protocol::SlVertical => run_sl_vertical(&p.model, cfg.cut, cfg.merge, work, &tc),
        Protocol::Sfl => run_sfl(&p.model, cfg.cut, cfg.variant, work, &tc),
    }
}

fn back_cut(cfg: &ExperimentConfig) -> Result<usize> {
    cfg.back_cut.ok_or_else(|| Error::Config("sl_ushaped needs back_cut".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorData {
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.data.clone())
    }
}

impl From<&Tensor> for TensorData {
    fn from(t: &Tensor) -> Self {
        Self { shape: t.shape().to_vec(), data: t.data().to_vec() }
    }
}

/// Raw inputs and the matching smashed outputs, for offline leakage
/// measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageBatch {
    pub name: String,
    pub raw: TensorData,
    pub smashed: TensorData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageArtifact {
    pub protocol: String,
    /// Laplace budget applied to the smashed batches; absent without noise.
    pub laplace_epsilon: Option<f64>,
    pub batches: Vec<LeakageBatch>,
}

/// The probe batch of client 0 and what its final client portion sends.
pub fn leakage_artifact(cfg: &ExperimentConfig, p: &Prepared, metrics: &RunMetrics) -> Result<LeakageArtifact> {
    let tc = cfg.train_config();
    let first = metrics.final_model.first().ok_or_else(|| Error::Config("run produced no model".into()))?;
    let (mut portion, data) = match cfg.protocol {
        Protocol::Centralized | Protocol::Fl => {
            return Err(Error::Config("leakage batches need a protocol with a cut layer".into()))
        }
        Protocol::SlVertical => {
            let range = p.plan.feature_range(0).ok_or_else(|| Error::Config("vertical run without feature ranges".into()))?;
            let widths: Vec<usize> = (0..p.plan.clients()).filter_map(|k| p.plan.feature_range(k)).map(|r| r.len()).collect();
            let fronts = vertical_models(&p.model, cfg.cut, &widths, cfg.merge, cfg.seed)?.0;
            (fronts.into_iter().next().expect("at least one client"), p.train.slice_features(range)?)
        }
        Protocol::SlUshaped => {
            let u = split_ushaped(p.model.init(cfg.seed)?, cfg.cut, back_cut(cfg)?)?;
            (u.front, shard(p, 0)?)
        }
        Protocol::Sl | Protocol::SlNosync | Protocol::Sfl => (split(p.model.init(cfg.seed)?, cfg.cut)?.client, shard(p, 0)?),
    };
    let n = portion.param_count();
    if first.params.len() < n {
        return Err(Error::ArchitectureMismatch("final model is smaller than the client portion".into()));
    }
    portion.set_flat_params(&first.params[..n])?;
    let raw = probe_batch(&data);
    let smashed = probe_smashed(&tc, &portion, &raw, cfg.rounds)?;
    Ok(LeakageArtifact {
        protocol: metrics.protocol.clone(),
        laplace_epsilon: cfg.privacy.laplace.then_some(cfg.privacy.laplace_epsilon),
        batches: vec![LeakageBatch { name: first.name.clone(), raw: (&raw).into(), smashed: (&smashed).into() }],
    })
}

fn shard(p: &Prepared, k: usize) -> Result<Dataset> {
    Workload { train: &p.train, test: &p.test, plan: &p.plan }.shard(k)
}

#[derive(Serialize)]
struct LedgerEntry<'a> {
    #[serde(flatten)]
    key: &'a LedgerKey,
    #[serde(flatten)]
    counters: &'a Counters,
}

#[derive(Serialize)]
struct LedgerFile<'a> {
    report: LedgerReport,
    entries: Vec<LedgerEntry<'a>>,
}

pub fn write_ledger_json(ledger: &LedgerSnapshot, path: &Path) -> Result<()> {
    let file = LedgerFile {
        report: ledger.report(),
        entries: ledger.entries.iter().map(|(key, counters)| LedgerEntry { key, counters }).collect(),
    };
    write_json(&file, path)
}

#[derive(Serialize)]
struct ModelFile<'a> {
    protocol: &'a str,
    model: &'a ModelSpec,
    cut: usize,
    initial_test_accuracy: f64,
    final_test_accuracy: f64,
    portions: &'a [NamedPortion],
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(w, value).map_err(|e| Error::Io(std::io::Error::other(e)))
}

/// Writes the metrics CSV and the enabled reports into the output
/// directory; returns the files written.
pub fn write_outputs(cfg: &ExperimentConfig, p: &Prepared, metrics: &RunMetrics) -> Result<Vec<PathBuf>> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let csv = dir.join("metrics.csv");
    write_metrics_csv(metrics, cfg.report.leakage, BufWriter::new(File::create(&csv)?))?;
    written.push(csv);
    if cfg.report.snapshot {
        let path = dir.join("model.json");
        let file = ModelFile {
            protocol: &metrics.protocol,
            model: &p.model,
            cut: cfg.cut,
            initial_test_accuracy: metrics.initial_test_accuracy,
            final_test_accuracy: metrics.final_test_accuracy(),
            portions: &metrics.final_model,
        };
        write_json(&file, &path)?;
        written.push(path);
    }
    if cfg.report.ledger {
        let path = dir.join("ledger.json");
        write_ledger_json(&metrics.ledger, &path)?;
        written.push(path);
    }
    if cfg.report.leakage_batches {
        let path = dir.join("leakage.json");
        write_json(&leakage_artifact(cfg, p, metrics)?, &path)?;
        written.push(path);
    }
    Ok(written)
}

/// A single role of a multi-process run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// The server of split learning and FedAvg, or the main server of
    /// splitfed learning.
    Main,
    Fed,
    Client(usize),
}

/// Outcome of one role process.
#[derive(Debug, Clone)]
pub struct RoleRun {
    pub entity: String,
    pub output: RoleOutput,
    pub ledger: LedgerSnapshot,
}

fn server_name(protocol: Protocol) -> &'static str {
    if protocol == Protocol::Sfl {
        MAIN_SERVER
    } else {
        SERVER
    }
}

fn network(cfg: &ExperimentConfig) -> Result<&NetworkConfig> {
    cfg.network.as_ref().ok_or_else(|| Error::Config("multi-process roles need a network block".into()))
}

/// Binds `addr` and accepts one connection per client.
fn accept_clients(addr: &str, entity: &str, k: usize, ledger: &Arc<CommLedger>) -> Result<Vec<Endpoint>> {
    let listener = TcpListener::bind(addr)?;
    log::info!("{entity} listening on {}", listener.local_addr()?);
    (0..k)
        .map(|_| {
            let (stream, _) = listener.accept()?;
            Endpoint::from_tcp(stream, entity, "pending", ledger.clone())
        })
        .collect()
}

/// Runs one role of the configured protocol, talking TCP to the other
/// roles at the addresses of the network block.
pub fn run_role(cfg: &ExperimentConfig, p: &Prepared, role: Role) -> Result<RoleRun> {
    let net = network(cfg)?;
    let mut tc = cfg.train_config();
    tc.leakage_bins = None;
    if cfg.protocol == Protocol::SlNosync {
        tc.relay = Relay::None;
    }
    let k = p.plan.clients();
    let ledger = Arc::new(CommLedger::new());
    let timeout = Duration::from_secs(net.connect_timeout_secs);
    let init = p.model.init(cfg.seed)?;
    let (entity, output) = match role {
        Role::Main => {
            let name = server_name(cfg.protocol);
            let clients = receive_hellos(accept_clients(&net.main, name, k, &ledger)?)?;
            let out = match cfg.protocol {
                Protocol::Centralized => return Err(Error::Config("centralized training has no server role".into())),
                Protocol::Fl => fl_server(&tc, clients, init)?,
                Protocol::Sl | Protocol::SlNosync => sl_server(&tc, clients, split(init, cfg.cut)?.server)?,
                Protocol::SlUshaped => ushaped_server(&tc, clients, split_ushaped(init, cfg.cut, back_cut(cfg)?)?.middle)?,
                Protocol::SlVertical => vertical_server(&tc, clients, vertical_parts(cfg, p)?.1, cfg.merge)?,
                Protocol::Sfl => sfl_main_server(&tc, cfg.variant, clients, split(init, cfg.cut)?.server)?,
            };
            (name.to_string(), out)
        }
        Role::Fed => {
            if cfg.protocol != Protocol::Sfl {
                return Err(Error::Config("only splitfed learning has a fed server".into()));
            }
            let addr = net.fed.as_deref().ok_or_else(|| Error::Config("network.fed is not set".into()))?;
            let clients = receive_hellos(accept_clients(addr, FED_SERVER, k, &ledger)?)?;
            (FED_SERVER.to_string(), sfl_fed_server(&tc, clients, split(init, cfg.cut)?.client)?)
        }
        Role::Client(c) => {
            if c >= k {
                return Err(Error::Config(format!("client {c} does not exist; the run has {k} clients")));
            }
            let name = client_entity(c);
            let connect = |addr: &str, peer: &str| -> Result<Endpoint> {
                Endpoint::from_tcp(connect_with_retry(addr, timeout)?, name.as_str(), peer, ledger.clone())
            };
            let main = connect(&net.main, server_name(cfg.protocol))?;
            let ring = || -> Result<Ring> {
                if tc.relay != Relay::P2p || k < 2 || !matches!(cfg.protocol, Protocol::Sl | Protocol::SlUshaped) {
                    return Ok(Ring::default());
                }
                let listener = TcpListener::bind(&net.peers[c])?;
                let next = connect(&net.peers[(c + 1) % k], &client_entity((c + 1) % k))?;
                let (prev, _) = listener.accept()?;
                let prev = Endpoint::from_tcp(prev, name.as_str(), client_entity((c + k - 1) % k), ledger.clone())?;
                Ok(Ring { prev: Some(prev), next: Some(next) })
            };
            let out = match cfg.protocol {
                Protocol::Centralized => return Err(Error::Config("centralized training has no client role".into())),
                Protocol::Fl => fl_client(&tc, c, main, init, &shard(p, c)?)?,
                Protocol::Sl | Protocol::SlNosync => {
                    sl_client(&tc, c, k, main, ring()?, split(init, cfg.cut)?.client, &shard(p, c)?)?
                }
                Protocol::SlUshaped => {
                    let u = split_ushaped(init, cfg.cut, back_cut(cfg)?)?;
                    ushaped_client(&tc, c, k, main, ring()?, u.front, u.tail, &shard(p, c)?)?
                }
                Protocol::SlVertical => {
                    let range = p.plan.feature_range(c).ok_or_else(|| Error::Config("vertical run without feature ranges".into()))?;
                    let front = vertical_parts(cfg, p)?.0.swap_remove(c);
                    vertical_client(&tc, c, main, front, &p.train.slice_features(range)?)?
                }
                Protocol::Sfl => {
                    let addr = net.fed.as_deref().ok_or_else(|| Error::Config("network.fed is not set".into()))?;
                    let fed = connect(addr, FED_SERVER)?;
                    sfl_client(&tc, c, main, fed, split(init, cfg.cut)?.client, &shard(p, c)?)?
                }
            };
            (name, out)
        }
    };
    Ok(RoleRun { entity, output, ledger: ledger.snapshot() })
}

fn vertical_parts(cfg: &ExperimentConfig, p: &Prepared) -> Result<(Vec<LayerStack>, LayerStack)> {
    let widths: Vec<usize> = (0..p.plan.clients()).filter_map(|k| p.plan.feature_range(k)).map(|r| r.len()).collect();
    vertical_models(&p.model, cfg.cut, &widths, cfg.merge, cfg.seed)
}

#[derive(Serialize)]
struct RoleFile<'a> {
    entity: &'a str,
    protocol: Protocol,
    output: &'a RoleOutput,
}

/// Writes `<entity>.json` with the role's statistics and snapshots and
/// `<entity>.ledger.json` with the traffic this process saw.
pub fn write_role_outputs(cfg: &ExperimentConfig, run: &RoleRun) -> Result<Vec<PathBuf>> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    let role = dir.join(format!("{}.json", run.entity));
    write_json(&RoleFile { entity: &run.entity, protocol: cfg.protocol, output: &run.output }, &role)?;
    let ledger = dir.join(format!("{}.ledger.json", run.entity));
    write_ledger_json(&run.ledger, &ledger)?;
    Ok(vec![role, ledger])
}
