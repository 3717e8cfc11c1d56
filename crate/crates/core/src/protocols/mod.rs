//! Training protocols: centralized baseline, FedAvg, split learning and its
//! variants, and splitfed learning.
//!
//! Every distributed protocol is a set of roles that talk only through
//! [`Endpoint`]s, so the same role code runs over in-process queues,
//! loopback TCP, or as separate processes. A role returns the batch
//! statistics it observed and snapshots of the parameters it holds; the
//! orchestrating `run_*` function turns those into [`RunMetrics`].

mod centralized;
mod client;
mod control;
mod fl;
mod links;
mod metrics;
mod sfl;
mod sl;
mod ushaped;
mod vertical;

use serde::{Deserialize, Serialize};

use crate::autodiff::{cross_entropy_loss, count_correct, LayerStack, Tensor};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::privacy::PrivacyConfig;

pub(crate) use client::{probe_batch, probe_smashed};
pub use centralized::run_centralized;
pub use control::{receive_hellos, send_hello, Control};
pub use fl::{fedavg_aggregate, fl_client, fl_server, run_fl};
pub use links::{LinkFactory, TransportMode};
pub use metrics::{write_metrics_csv, BatchStat, NamedPortion, RoleOutput, RoundMetrics, RunMetrics, Snapshot, SnapshotPhase};
pub use sfl::{run_sfl, sfl_client, sfl_fed_server, sfl_main_server, SflVariant};
pub use sl::{run_sl, run_sl_no_sync, sl_client, sl_server, Relay, Ring};
pub use ushaped::{run_sl_ushaped, ushaped_client, ushaped_server};
pub use vertical::{merge_backward, merge_forward, run_sl_vertical, vertical_client, vertical_models, vertical_server, Merge};

/// Hyper-parameters shared by every protocol. One round is `local_epochs`
/// passes of every participating client over its shard.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
    /// Fixes the order in which concurrent sessions touch shared state.
    pub deterministic: bool,
    pub privacy: PrivacyConfig,
    pub relay: Relay,
    /// Splitfed rounds between client-side synchronisations.
    pub sync_interval: usize,
    pub transport: TransportMode,
    /// Histogram bins for per-round leakage columns; `None` disables them.
    pub leakage_bins: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rounds: 1,
            local_epochs: 1,
            batch_size: 32,
            lr: 0.05,
            seed: 0,
            deterministic: true,
            privacy: PrivacyConfig::default(),
            relay: Relay::Centralized,
            sync_interval: 1,
            transport: TransportMode::Inproc,
            leakage_bins: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_epochs == 0 {
            return Err(Error::Config("local_epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.sync_interval == 0 {
            return Err(Error::Config("sync_interval must be at least 1".into()));
        }
        if self.privacy.nopeek && self.batch_size > crate::privacy::MAX_NOPEEK_BATCH {
            return Err(Error::Config(format!("NoPeek batches are capped at {}", crate::privacy::MAX_NOPEEK_BATCH)));
        }
        if let Some(b) = self.leakage_bins {
            if b < 2 {
                return Err(Error::Config("leakage bins must be at least 2".into()));
            }
        }
        self.privacy.validate()
    }

    /// Global epoch index of local epoch `e` in round `r`.
    pub(crate) fn epoch_index(&self, round: usize, epoch: usize) -> u64 {
        (round * self.local_epochs + epoch) as u64
    }
}

/// Train and test data with the split of training rows (or feature
/// columns) across clients.
#[derive(Debug, Clone, Copy)]
pub struct Workload<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub plan: &'a crate::data::PartitionPlan,
}

impl Workload<'_> {
    /// Training rows of horizontal client `k`.
    pub fn shard(&self, k: usize) -> Result<Dataset> {
        let idx = self
            .plan
            .indices(k)
            .ok_or_else(|| Error::Config(format!("partition has no horizontal shard for client {k}")))?;
        self.train.subset(idx)
    }

    pub fn shards(&self) -> Result<Vec<Dataset>> {
        (0..self.plan.clients()).map(|k| self.shard(k)).collect()
    }
}

/// Protocol selector used by experiment configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    #[default]
    Centralized,
    Fl,
    Sl,
    SlNosync,
    SlUshaped,
    SlVertical,
    Sfl,
}

/// Mean loss and accuracy of `model` on `data`, without touching its
/// parameters.
pub fn evaluate(model: &LayerStack, data: &Dataset) -> Result<(f64, f64)> {
    evaluate_with(data, |x| Ok(model.forward(x, false)?.0))
}

/// Evaluation of a split model: client portion then server portion.
pub fn evaluate_split(client: &LayerStack, server: &LayerStack, data: &Dataset) -> Result<(f64, f64)> {
    evaluate_with(data, |x| {
        let a = client.forward(x, false)?.0;
        Ok(server.forward(&a, false)?.0)
    })
}

const EVAL_CHUNK: usize = 512;

pub(crate) fn evaluate_with(data: &Dataset, mut logits: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let (mut loss, mut correct) = (0f64, 0usize);
    let rows: Vec<usize> = (0..data.len()).collect();
    for chunk in rows.chunks(EVAL_CHUNK) {
        let (x, y) = data.batch(chunk);
        let out = logits(&x)?;
        loss += cross_entropy_loss(&out, &y)?.0 * chunk.len() as f64;
        correct += count_correct(&out, &y);
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

/// Shuffled minibatches of `0..n` for one epoch of client `k`.
pub(crate) fn epoch_batches(n: usize, batch: usize, seed: u64, client: usize, epoch: u64) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut crate::rng::stream(seed, &[crate::rng::STREAM_BATCH, client as u64, epoch]));
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

pub(crate) fn batches_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

pub(crate) fn check_finite_loss(loss: f64, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(format!("{what} produced a non-finite loss")))
    }
}

/// Cut index for protocols whose server computes the loss: the server must
/// keep at least the classification head.
pub(crate) fn check_cut(model_len: usize, cut: usize) -> Result<()> {
    if cut == 0 || cut + 1 >= model_len {
        return Err(Error::InvalidSplit(format!(
            "cut {cut} must satisfy 1 <= cut <= {} so the server keeps the head",
            model_len.saturating_sub(2)
        )));
    }
    Ok(())
}
