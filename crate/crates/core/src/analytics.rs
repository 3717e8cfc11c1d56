//! Analytical communication model and cut-layer compression. The model can
//! be reconciled against measured ledger traffic.
//!
//! Analytical quantities count transferred values; one value is four bytes
//! on the wire.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::autodiff::LayerSpec;
use crate::error::{Error, Result};
use crate::transport::{is_client_entity, Counters, Direction, LedgerKey, LedgerSnapshot, MsgType};

pub const BYTES_PER_VALUE: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CommMethod {
    /// Split learning where each client relays its portion to the next.
    SlWeightSharing,
    SlNoSharing,
    Fl,
}

impl CommMethod {
    pub const ALL: [CommMethod; 3] = [CommMethod::SlWeightSharing, CommMethod::SlNoSharing, CommMethod::Fl];

    pub fn name(self) -> &'static str {
        match self {
            CommMethod::SlWeightSharing => "sl-sharing",
            CommMethod::SlNoSharing => "sl-nosharing",
            CommMethod::Fl => "fl",
        }
    }
}

impl fmt::Display for CommMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CommMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sl-sharing" | "sl" => Ok(CommMethod::SlWeightSharing),
            "sl-nosharing" | "sl-nosync" => Ok(CommMethod::SlNoSharing),
            "fl" => Ok(CommMethod::Fl),
            other => Err(Error::InvalidArgument(format!(
                "unknown method {other:?}; expected sl-sharing, sl-nosharing or fl"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CommModelParams {
    pub clients: f64,
    pub model_params: f64,
    pub dataset_size: f64,
    pub smashed_size: f64,
    /// Fraction of model parameters held by a client (eta).
    pub client_fraction: f64,
}

impl CommModelParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.clients, self.model_params, self.dataset_size, self.smashed_size];
        if all.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument("K, N, p and q must be positive".into()));
        }
        if !(self.client_fraction > 0.0 && self.client_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "client fraction must lie in (0, 1), got {}",
                self.client_fraction
            )));
        }
        Ok(())
    }
}

/// Values transferred per epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CommCost {
    pub per_client: f64,
    pub total: f64,
}

pub fn analytical_comm(method: CommMethod, m: &CommModelParams) -> Result<CommCost> {
    m.validate()?;
    let (k, n, p, q, eta) = (m.clients, m.model_params, m.dataset_size, m.smashed_size, m.client_fraction);
    Ok(match method {
        CommMethod::SlWeightSharing => CommCost { per_client: 2.0 * (p / k) * q + eta * n, total: 2.0 * p * q + eta * n * k },
        CommMethod::SlNoSharing => CommCost { per_client: 2.0 * (p / k) * q, total: 2.0 * p * q },
        CommMethod::Fl => CommCost { per_client: 2.0 * n, total: 2.0 * k * n },
    })
}

/// Model size at which weight-sharing SL and FL move the same total volume;
/// SL moves less above it.
pub fn crossover_frontier(clients: f64, dataset_size: f64, smashed_size: f64, client_fraction: f64) -> f64 {
    2.0 * dataset_size * smashed_size / (clients * (2.0 - client_fraction))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub clients: f64,
    pub model_params: f64,
    pub sl_total: f64,
    pub fl_total: f64,
    pub winner: &'static str,
}

/// Compares weight-sharing SL against FL over a `clients x model_params`
/// grid. Ties go to FL.
pub fn crossover_sweep(
    clients: &[f64],
    model_params: &[f64],
    dataset_size: f64,
    smashed_size: f64,
    client_fraction: f64,
) -> Result<Vec<SweepRow>> {
    if clients.is_empty() || model_params.is_empty() {
        return Err(Error::InvalidArgument("sweep ranges must be non-empty".into()));
    }
    let mut rows = Vec::with_capacity(clients.len() * model_params.len());
    for &k in clients {
        for &n in model_params {
            let m = CommModelParams { clients: k, model_params: n, dataset_size, smashed_size, client_fraction };
            let sl = analytical_comm(CommMethod::SlWeightSharing, &m)?.total;
            let fl = analytical_comm(CommMethod::Fl, &m)?.total;
            rows.push(SweepRow {
                clients: k,
                model_params: n,
                sl_total: sl,
                fl_total: fl,
                winner: if sl < fl { "sl" } else { "fl" },
            });
        }
    }
    Ok(rows)
}

/// Height and width shrink factors of a pooling cut layer:
/// `n / floor((n - f) / s + 1)` per axis.
pub fn maxpool_compression(n_h: usize, n_w: usize, f: usize, s: usize) -> Result<(f64, f64)> {
    if f == 0 || s == 0 {
        return Err(Error::InvalidArgument("window and stride must be at least 1".into()));
    }
    if f > n_h || f > n_w {
        return Err(Error::InvalidArgument(format!("window {f} exceeds input {n_h}x{n_w}")));
    }
    let axis = |n: usize| n as f64 / ((n - f) / s + 1) as f64;
    Ok((axis(n_h), axis(n_w)))
}

/// Compression contributed by the layer at the cut. Only pooling layers
/// compress; every other kind reports `(1, 1)`.
pub fn cut_compression(layer: &LayerSpec, input_shape: &[usize]) -> Result<(f64, f64)> {
    match layer {
        LayerSpec::MaxPool2d { size, stride } => {
            if input_shape.len() != 3 {
                return Err(Error::Shape(format!("pooling input {input_shape:?} is not [c, h, w]")));
            }
            maxpool_compression(input_shape[1], input_shape[2], *size, *stride)
        }
        _ => Ok((1.0, 1.0)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReconcileItem {
    pub item: &'static str,
    /// `None` for traffic the analytical model ignores.
    pub analytical_bytes: Option<f64>,
    pub messages: u64,
    pub value_bytes: u64,
    pub header_bytes: u64,
    pub payload_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReconcileReport {
    pub method: CommMethod,
    pub epochs: usize,
    pub analytical_bytes: f64,
    pub measured_value_bytes: u64,
    pub measured_payload_bytes: u64,
    /// `(measured values - analytical) / analytical`.
    pub relative_deviation: f64,
    /// Tensor headers of modelled traffic relative to the analytical volume.
    pub header_share: f64,
    pub framing_bytes: u64,
    pub items: Vec<ReconcileItem>,
}

/// A transfer is counted once: when a client sends it, or when a client
/// receives it from a non-client.
fn counted_once(k: &LedgerKey) -> bool {
    is_client_entity(&k.entity) && (k.direction == Direction::Sent || !is_client_entity(&k.peer))
}

/// Matches ledger traffic of a finished run against the analytical model
/// over `epochs` passes. The weight-sharing term is compared with PARAMS
/// uploads by clients; forwarded relays are itemised separately.
pub fn reconcile(ledger: &LedgerSnapshot, m: &CommModelParams, method: CommMethod, epochs: usize) -> Result<ReconcileReport> {
    let cost = analytical_comm(method, m)?;
    if epochs == 0 {
        return Err(Error::InvalidArgument("epochs must be positive".into()));
    }
    let e = epochs as f64;
    let of = |t: MsgType| ledger.sum_where(|k| k.msg_type == t && counted_once(k));
    let smash = of(MsgType::Smash);
    let grad = of(MsgType::SmashGrad);
    let uploads = ledger.sum_where(|k| {
        k.msg_type == MsgType::Params && is_client_entity(&k.entity) && k.direction == Direction::Sent
    });
    let downloads = ledger.sum_where(|k| {
        k.msg_type == MsgType::Params
            && is_client_entity(&k.entity)
            && k.direction == Direction::Received
            && !is_client_entity(&k.peer)
    });
    let smashed_total = {
        let mut c = smash;
        c.add(&grad);
        c
    };
    let is_sl = smashed_total.messages > 0;
    match (method, is_sl) {
        (CommMethod::Fl, true) => return Err(Error::InvalidArgument("ledger holds smashed traffic, not an FL run".into())),
        (CommMethod::SlNoSharing | CommMethod::SlWeightSharing, false) => {
            return Err(Error::InvalidArgument("ledger holds no smashed traffic, not an SL run".into()))
        }
        (CommMethod::SlNoSharing, _) if uploads.messages > 0 => {
            return Err(Error::InvalidArgument("ledger holds parameter relays, not a no-sharing run".into()))
        }
        _ => {}
    }
    let item = |name: &'static str, analytical: Option<f64>, c: Counters| ReconcileItem {
        item: name,
        analytical_bytes: analytical,
        messages: c.messages,
        value_bytes: c.value_bytes(),
        header_bytes: c.header_bytes,
        payload_bytes: c.payload_bytes,
    };
    let k = m.clients;
    let smashed_bytes = 2.0 * m.dataset_size * m.smashed_size * e * BYTES_PER_VALUE;
    let mut items = Vec::new();
    let mut modelled = Counters::default();
    match method {
        CommMethod::Fl => {
            let mut params = uploads;
            params.add(&downloads);
            items.push(item("params", Some(cost.total * e * BYTES_PER_VALUE), params));
            modelled.add(&params);
        }
        CommMethod::SlNoSharing | CommMethod::SlWeightSharing => {
            items.push(item("smashed", Some(smashed_bytes), smashed_total));
            modelled.add(&smashed_total);
            if method == CommMethod::SlWeightSharing {
                let relay = m.client_fraction * m.model_params * k * e * BYTES_PER_VALUE;
                items.push(item("params_relay", Some(relay), uploads));
                items.push(item("params_forwarded", None, downloads));
                modelled.add(&uploads);
            }
        }
    }
    items.push(item("labels", None, of(MsgType::Labels)));
    items.push(item("control", None, of(MsgType::Control)));
    let mut server_side = of(MsgType::ServerAct);
    server_side.add(&of(MsgType::ServerActGrad));
    if server_side.messages > 0 {
        items.push(item("server_activations", None, server_side));
    }
    let analytical = cost.total * e * BYTES_PER_VALUE;
    let framing = ledger.sum_where(counted_once).framing_bytes;
    Ok(ReconcileReport {
        method,
        epochs,
        analytical_bytes: analytical,
        measured_value_bytes: modelled.value_bytes(),
        measured_payload_bytes: modelled.payload_bytes,
        relative_deviation: (modelled.value_bytes() as f64 - analytical) / analytical,
        header_share: modelled.header_bytes as f64 / analytical,
        framing_bytes: framing,
        items,
    })
}
