//! Sequential split learning: the server hands the turn to one client at a
//! time; the client portion optionally travels to the next client.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::client::{loss_grad_scale, probe_batch, probe_leakage, PrivateCut};
use super::metrics::{assemble, RoundEval, RunParts};
use super::{
    check_cut, check_finite_loss, epoch_batches, evaluate_split, receive_hellos, send_hello, BatchStat, Control,
    LinkFactory, NamedPortion, RoleOutput, RunMetrics, SnapshotPhase, TrainConfig, Workload,
};
use crate::autodiff::{count_correct, cross_entropy_loss, LayerStack, Tensor};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{split, ModelSpec};
use crate::transport::codec::decode_labels;
use crate::transport::{client_entity, Endpoint, MsgType, WireMessage, SERVER};

/// How the client portion moves between consecutive clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relay {
    /// Through the server.
    #[default]
    Centralized,
    /// Directly to the next client.
    P2p,
    /// Never; each client keeps its own portion.
    None,
}

/// Direct links to the previous and next client for peer-to-peer relay.
#[derive(Debug, Default)]
pub struct Ring {
    pub prev: Option<Endpoint>,
    pub next: Option<Endpoint>,
}

impl Ring {
    fn set_round(&mut self, round: usize) {
        for ep in self.prev.iter_mut().chain(self.next.iter_mut()) {
            ep.set_round(round);
        }
    }
}

pub(crate) fn params_message(flat: Vec<f32>) -> WireMessage {
    WireMessage::tensor(MsgType::Params, &Tensor::from_vec(flat))
}

pub(crate) fn params_from(msg: &WireMessage, expected: usize) -> Result<Vec<f32>> {
    let t = msg.to_tensor()?;
    if t.rank() != 1 || t.len() != expected {
        return Err(Error::ArchitectureMismatch(format!(
            "received {:?} parameters, portion has {expected}",
            t.shape()
        )));
    }
    Ok(t.into_data())
}

/// Client state driven turn by turn.
pub(crate) trait TurnClient {
    fn params(&self) -> Vec<f32>;
    fn load(&mut self, flat: &[f32]) -> Result<()>;
    fn run_turn(&mut self, ep: &mut Endpoint, round: usize, out: &mut RoleOutput) -> Result<()>;
}

/// Server state that reacts to one client message at a time.
pub(crate) trait TurnServer {
    fn on_message(&mut self, ep: &mut Endpoint, client: usize, round: usize, seq: usize, msg: WireMessage, out: &mut RoleOutput) -> Result<()>;
    fn params(&self) -> Vec<f32>;
}

pub(crate) fn drive_client_turns(
    cfg: &TrainConfig,
    k: usize,
    clients: usize,
    samples: usize,
    ep: &mut Endpoint,
    ring: &mut Ring,
    state: &mut impl TurnClient,
) -> Result<RoleOutput> {
    let mut out = RoleOutput::default();
    send_hello(ep, k, samples)?;
    let relaying = cfg.relay != Relay::None && clients > 1;
    loop {
        let msg = ep.recv()?;
        match msg.msg_type {
            MsgType::Params if relaying && cfg.relay == Relay::Centralized => {
                let flat = params_from(&msg, state.params().len())?;
                state.load(&flat)?;
            }
            MsgType::Control => match Control::decode(&msg)? {
                Control::TurnStart { round } => {
                    let round = round as usize;
                    ep.set_round(round);
                    ring.set_round(round);
                    if relaying && cfg.relay == Relay::P2p && !(round == 0 && k == 0) {
                        let prev = ring.prev.as_mut().ok_or_else(|| Error::Config("p2p relay needs a predecessor link".into()))?;
                        let flat = params_from(&prev.recv_type(MsgType::Params)?, state.params().len())?;
                        state.load(&flat)?;
                    }
                    out.snapshot(round, SnapshotPhase::Start, state.params());
                    state.run_turn(ep, round, &mut out)?;
                    Control::TurnEnd.send(ep)?;
                    out.snapshot(round, SnapshotPhase::End, state.params());
                    let final_turn = round + 1 == cfg.rounds && k + 1 == clients;
                    if relaying && !final_turn {
                        match cfg.relay {
                            Relay::Centralized => ep.send(&params_message(state.params()))?,
                            Relay::P2p => {
                                let next = ring.next.as_mut().ok_or_else(|| Error::Config("p2p relay needs a successor link".into()))?;
                                next.send(&params_message(state.params()))?
                            }
                            Relay::None => {}
                        }
                    }
                }
                Control::Done => return Ok(out),
                other => return Err(Error::Protocol(format!("client {k} got unexpected {other:?}"))),
            },
            other => return Err(Error::Protocol(format!("client {k} got unexpected {}", other.name()))),
        }
    }
}

pub(crate) fn drive_server_turns(cfg: &TrainConfig, mut eps: Vec<Endpoint>, state: &mut impl TurnServer) -> Result<RoleOutput> {
    let mut out = RoleOutput::default();
    let k = eps.len();
    let relaying = cfg.relay == Relay::Centralized && k > 1;
    for round in 0..cfg.rounds {
        eps.iter_mut().for_each(|ep| ep.set_round(round));
        for c in 0..k {
            Control::TurnStart { round: round as u32 }.send(&mut eps[c])?;
            let mut seq = 0;
            loop {
                let msg = eps[c].recv()?;
                if msg.msg_type == MsgType::Control {
                    match Control::decode(&msg)? {
                        Control::TurnEnd => break,
                        other => return Err(Error::Protocol(format!("server got unexpected {other:?}"))),
                    }
                }
                state.on_message(&mut eps[c], c, round, seq, msg, &mut out)?;
                seq += 1;
            }
            let final_turn = round + 1 == cfg.rounds && c + 1 == k;
            if relaying && !final_turn {
                let p = eps[c].recv_type(MsgType::Params)?;
                eps[(c + 1) % k].send(&p)?;
            }
        }
        out.snapshot(round, SnapshotPhase::End, state.params());
    }
    for ep in &mut eps {
        Control::Done.send(ep)?;
    }
    Ok(out)
}

struct SlServer {
    net: LayerStack,
    grad_scale: f32,
    lr: f32,
}

impl TurnServer for SlServer {
    fn on_message(&mut self, ep: &mut Endpoint, client: usize, round: usize, seq: usize, msg: WireMessage, out: &mut RoleOutput) -> Result<()> {
        if msg.msg_type != MsgType::Smash {
            return Err(Error::Protocol(format!("server expected SMASH, got {}", msg.msg_type.name())));
        }
        let a = msg.to_tensor()?;
        let y = decode_labels(&ep.recv_type(MsgType::Labels)?.payload)?;
        let (logits, tape) = self.net.forward(&a, true)?;
        let (loss, mut grad) = cross_entropy_loss(&logits, &y)?;
        check_finite_loss(loss, "server")?;
        out.stats.push(BatchStat { round, client, seq, samples: y.len(), loss, correct: count_correct(&logits, &y) });
        grad.scale(self.grad_scale);
        let (grads, da) = self.net.backward(&tape, &grad)?;
        self.net.sgd_step(&grads, self.lr)?;
        ep.send(&WireMessage::tensor(MsgType::SmashGrad, &da))
    }

    fn params(&self) -> Vec<f32> {
        self.net.flat_params()
    }
}

struct SlClient<'a> {
    cfg: &'a TrainConfig,
    k: usize,
    net: LayerStack,
    shard: &'a Dataset,
}

impl TurnClient for SlClient<'_> {
    fn params(&self) -> Vec<f32> {
        self.net.flat_params()
    }

    fn load(&mut self, flat: &[f32]) -> Result<()> {
        self.net.set_flat_params(flat)
    }

    fn run_turn(&mut self, ep: &mut Endpoint, round: usize, _out: &mut RoleOutput) -> Result<()> {
        let cfg = self.cfg;
        let mut cut = PrivateCut::new(cfg, self.k, round, &self.net, self.shard)?;
        for e in 0..cfg.local_epochs {
            for rows in epoch_batches(self.shard.len(), cfg.batch_size, cfg.seed, self.k, cfg.epoch_index(round, e)) {
                let (x, y) = self.shard.batch(&rows);
                let fwd = cut.forward(cfg, &self.net, x)?;
                ep.send(&WireMessage::tensor(MsgType::Smash, &fwd.sent))?;
                ep.send(&WireMessage::labels(&y))?;
                let grad = ep.recv_type(MsgType::SmashGrad)?.to_tensor()?;
                cut.backward(cfg, &mut self.net, fwd, grad)?;
            }
        }
        Ok(())
    }
}

/// Server role of split learning. `clients` come from [`receive_hellos`].
pub fn sl_server(cfg: &TrainConfig, clients: Vec<(Endpoint, usize)>, server: LayerStack) -> Result<RoleOutput> {
    let eps = clients.into_iter().map(|(ep, _)| ep).collect();
    let mut state = SlServer { net: server, grad_scale: loss_grad_scale(cfg), lr: cfg.lr };
    drive_server_turns(cfg, eps, &mut state)
}

/// Client role of split learning; runs until the server says it is done.
pub fn sl_client(
    cfg: &TrainConfig,
    k: usize,
    clients: usize,
    mut ep: Endpoint,
    mut ring: Ring,
    portion: LayerStack,
    shard: &Dataset,
) -> Result<RoleOutput> {
    let mut state = SlClient { cfg, k, net: portion, shard };
    drive_client_turns(cfg, k, clients, shard.len(), &mut ep, &mut ring, &mut state)
}

/// Endpoints on both sides of `k` clients talking to one server entity,
/// plus the peer-to-peer rings.
pub(crate) fn star_links(links: &LinkFactory, server: &str, k: usize, relay: Relay) -> Result<(Vec<Endpoint>, Vec<Endpoint>, Vec<Ring>)> {
    let mut server_eps = Vec::with_capacity(k);
    let mut client_eps = Vec::with_capacity(k);
    for c in 0..k {
        let (ce, se) = links.pair(&client_entity(c), server)?;
        client_eps.push(ce);
        server_eps.push(se);
    }
    let mut rings: Vec<Ring> = (0..k).map(|_| Ring::default()).collect();
    if relay == Relay::P2p && k > 1 {
        for c in 0..k {
            let n = (c + 1) % k;
            let (a, b) = links.pair(&client_entity(c), &client_entity(n))?;
            rings[c].next = Some(a);
            rings[n].prev = Some(b);
        }
    }
    Ok((server_eps, client_eps, rings))
}

/// Joins role threads, preferring the first error that is not a mere
/// disconnect caused by another role failing.
pub(crate) fn join_roles<T>(results: Vec<std::thread::Result<Result<T>>>) -> Result<Vec<T>> {
    let mut first_err: Option<Error> = None;
    let mut ok = Vec::new();
    for r in results {
        match r {
            Ok(Ok(v)) => ok.push(v),
            Ok(Err(e)) => {
                let replace = match (&first_err, &e) {
                    (None, _) => true,
                    (Some(Error::Disconnected { .. }), e) => !matches!(e, Error::Disconnected { .. }),
                    _ => false,
                };
                if replace {
                    first_err = Some(e);
                }
            }
            Err(panic) => std::panic::resume_unwind(panic),
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(ok),
    }
}

/// Split learning with the relay mode of `cfg`.
pub fn run_sl(model: &ModelSpec, cut: usize, work: Workload<'_>, cfg: &TrainConfig) -> Result<RunMetrics> {
    run_sl_impl(model, cut, work, cfg, if cfg.relay == Relay::None { "sl-nosync" } else { "sl" })
}

/// Split learning where clients never exchange their portions.
pub fn run_sl_no_sync(model: &ModelSpec, cut: usize, work: Workload<'_>, cfg: &TrainConfig) -> Result<RunMetrics> {
    let cfg = TrainConfig { relay: Relay::None, ..cfg.clone() };
    run_sl_impl(model, cut, work, &cfg, "sl-nosync")
}

fn run_sl_impl(model: &ModelSpec, cut: usize, work: Workload<'_>, cfg: &TrainConfig, name: &str) -> Result<RunMetrics> {
    cfg.validate()?;
    check_cut(model.layers.len(), cut)?;
    let start = Instant::now();
    let shards = work.shards()?;
    let k = shards.len();
    let sm = split(model.init(cfg.seed)?, cut)?;
    let initial = evaluate_split(&sm.client, &sm.server, work.test)?;
    let links = LinkFactory::new(cfg.transport.clone());
    let (server_eps, client_eps, rings) = star_links(&links, SERVER, k, cfg.relay)?;
    let (server_out, client_outs) = std::thread::scope(|s| -> Result<(RoleOutput, Vec<RoleOutput>)> {
        let server_net = sm.server.clone();
        let server = s.spawn(move || sl_server(cfg, receive_hellos(server_eps)?, server_net));
        let handles: Vec<_> = client_eps
            .into_iter()
            .zip(rings)
            .zip(&shards)
            .enumerate()
            .map(|(c, ((ep, ring), shard))| {
                let portion = sm.client.clone();
                s.spawn(move || sl_client(cfg, c, k, ep, ring, portion, shard))
            })
            .collect();
        let mut results = vec![server.join()];
        results.extend(handles.into_iter().map(|h| h.join()));
        let mut outs = join_roles(results)?;
        let server_out = outs.remove(0);
        Ok((server_out, outs))
    })?;

    let mut client_net = sm.client.clone();
    let mut server_net = sm.server.clone();
    let probe = probe_batch(&shards[0]);
    let mut evals = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        server_net.set_flat_params(server_out.end_of(round)?)?;
        // with a relay the freshest portion is the last client's; without
        // one every client's portion is scored and the results averaged
        let scored: Vec<usize> = if cfg.relay == Relay::None { (0..k).collect() } else { vec![k - 1] };
        let (mut loss, mut acc) = (0.0, 0.0);
        for &c in &scored {
            client_net.set_flat_params(client_outs[c].end_of(round)?)?;
            let (l, a) = evaluate_split(&client_net, &server_net, work.test)?;
            loss += l;
            acc += a;
        }
        let leakage = match cfg.leakage_bins {
            Some(bins) => {
                client_net.set_flat_params(client_outs[scored[0]].end_of(round)?)?;
                Some(probe_leakage(cfg, &client_net, &probe, round, bins)?)
            }
            None => None,
        };
        evals.push(RoundEval { test_loss: loss / scored.len() as f64, test_accuracy: acc / scored.len() as f64, leakage });
    }
    let mut final_model = Vec::new();
    if cfg.rounds > 0 {
        for (c, out) in client_outs.iter().enumerate() {
            if cfg.relay == Relay::None || c + 1 == k {
                final_model.push(NamedPortion { name: client_entity(c), params: out.end_of(cfg.rounds - 1)?.to_vec() });
            }
        }
        final_model.push(NamedPortion { name: SERVER.into(), params: server_out.end_of(cfg.rounds - 1)?.to_vec() });
    }
    let stats = server_out.stats.clone();
    let mut roles: BTreeMap<String, RoleOutput> =
        client_outs.into_iter().enumerate().map(|(c, o)| (client_entity(c), o)).collect();
    roles.insert(SERVER.into(), server_out);
    let ledger = links.ledger().snapshot();
    Ok(assemble(name, RunParts { stats, initial, evals, ledger, wall_time: start.elapsed(), final_model, roles }))
}
