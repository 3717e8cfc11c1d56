//! Splitfed learning: clients train their portions in parallel against a
//! main server, and a federation server periodically averages the client
//! portions.
//!
//! In the per-client variant the main server keeps one copy of its portion
//! per client and averages the copies whenever the clients synchronise. In
//! the shared variant every session updates a single portion; with
//! `deterministic` set the sessions take turns in a fixed round-robin order
//! of minibatches.

use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::client::{loss_grad_scale, probe_batch, probe_leakage, PrivateCut};
use super::fl::fedavg_flat;
use super::metrics::{assemble, RoundEval, RunParts};
use super::sl::{join_roles, params_from, params_message, star_links};
use super::{
    batches_per_epoch, check_cut, check_finite_loss, epoch_batches, evaluate_split, receive_hellos, send_hello,
    BatchStat, Control, LinkFactory, NamedPortion, Relay, RoleOutput, RunMetrics, SnapshotPhase, TrainConfig,
    Workload,
};
use crate::autodiff::{count_correct, cross_entropy_loss, LayerStack};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{split, ModelSpec};
use crate::privacy::dp_fl_server_update;
use crate::rng;
use crate::transport::codec::decode_labels;
use crate::transport::{client_entity, Endpoint, MsgType, WireMessage, FED_SERVER, MAIN_SERVER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SflVariant {
    /// One main-server portion per client.
    #[default]
    V1,
    /// A single main-server portion shared by all sessions.
    V2,
}

/// Rounds after which the clients synchronise. The last round always does.
pub(crate) fn is_sync(cfg: &TrainConfig, round: usize) -> bool {
    (round + 1).is_multiple_of(cfg.sync_interval) || round + 1 == cfg.rounds
}

/// Round-robin order in which shared-variant sessions may update the
/// server portion.
struct TurnGate {
    schedule: Vec<usize>,
    state: Mutex<GateState>,
    cv: Condvar,
}

#[derive(Default)]
struct GateState {
    pos: usize,
    aborted: bool,
}

impl TurnGate {
    fn new(batches: &[usize]) -> Self {
        let most = batches.iter().copied().max().unwrap_or(0);
        let schedule = (0..most).flat_map(|slot| (0..batches.len()).filter(move |&k| slot < batches[k])).collect();
        Self { schedule, state: Mutex::new(GateState::default()), cv: Condvar::new() }
    }

    fn wait(&self, k: usize) -> Result<()> {
        let mut st = self.state.lock().expect("gate poisoned");
        loop {
            if st.aborted {
                return Err(Error::Protocol("another session failed".into()));
            }
            match self.schedule.get(st.pos) {
                Some(&next) if next == k => return Ok(()),
                Some(_) => st = self.cv.wait(st).expect("gate poisoned"),
                None => return Err(Error::Protocol(format!("client {k} sent more batches than scheduled"))),
            }
        }
    }

    fn advance(&self) {
        self.state.lock().expect("gate poisoned").pos += 1;
        self.cv.notify_all();
    }

    fn abort(&self) {
        self.state.lock().expect("gate poisoned").aborted = true;
        self.cv.notify_all();
    }
}

enum ServerPortion<'a> {
    Own(&'a mut LayerStack),
    Shared { net: &'a Mutex<LayerStack>, gate: Option<&'a TurnGate> },
}

/// One client's session with the main server for one round; ends at the
/// client's ROUND_END.
fn session(cfg: &TrainConfig, k: usize, round: usize, ep: &mut Endpoint, mut portion: ServerPortion<'_>) -> Result<Vec<BatchStat>> {
    let scale = loss_grad_scale(cfg);
    let mut stats = Vec::new();
    loop {
        let msg = ep.recv()?;
        if msg.msg_type == MsgType::Control {
            return match Control::decode(&msg)? {
                Control::RoundEnd { round: r } if r as usize == round => Ok(stats),
                other => Err(Error::Protocol(format!("main server got unexpected {other:?} from client {k}"))),
            };
        }
        if msg.msg_type != MsgType::Smash {
            return Err(Error::Protocol(format!("main server expected SMASH, got {}", msg.msg_type.name())));
        }
        let a = msg.to_tensor()?;
        let y = decode_labels(&ep.recv_type(MsgType::Labels)?.payload)?;
        let step = |net: &mut LayerStack| -> Result<_> {
            let (logits, tape) = net.forward(&a, true)?;
            let (loss, mut grad) = cross_entropy_loss(&logits, &y)?;
            check_finite_loss(loss, "main server")?;
            let correct = count_correct(&logits, &y);
            grad.scale(scale);
            let (grads, da) = net.backward(&tape, &grad)?;
            net.sgd_step(&grads, cfg.lr)?;
            Ok((loss, correct, da))
        };
        let (loss, correct, da) = match &mut portion {
            ServerPortion::Own(net) => step(net)?,
            ServerPortion::Shared { net, gate } => {
                if let Some(g) = gate {
                    g.wait(k)?;
                }
                let r = step(&mut net.lock().expect("server portion poisoned"));
                if let Some(g) = gate {
                    g.advance();
                }
                r?
            }
        };
        stats.push(BatchStat { round, client: k, seq: stats.len(), samples: y.len(), loss, correct });
        ep.send(&WireMessage::tensor(MsgType::SmashGrad, &da))?;
    }
}

/// Main server role. Each round runs one session per client concurrently.
pub fn sfl_main_server(cfg: &TrainConfig, variant: SflVariant, clients: Vec<(Endpoint, usize)>, net: LayerStack) -> Result<RoleOutput> {
    let mut out = RoleOutput::default();
    let sizes: Vec<usize> = clients.iter().map(|(_, n)| *n).collect();
    let mut eps: Vec<Endpoint> = clients.into_iter().map(|(ep, _)| ep).collect();
    let mut copies = vec![net.clone(); if variant == SflVariant::V1 { eps.len() } else { 0 }];
    let shared = Mutex::new(net);
    for round in 0..cfg.rounds {
        eps.iter_mut().for_each(|ep| ep.set_round(round));
        let batches: Vec<usize> = sizes.iter().map(|&n| cfg.local_epochs * batches_per_epoch(n, cfg.batch_size)).collect();
        let gate = (variant == SflVariant::V2 && cfg.deterministic).then(|| TurnGate::new(&batches));
        let results = std::thread::scope(|s| {
            let gate = gate.as_ref();
            let shared = &shared;
            let handles: Vec<_> = match variant {
                SflVariant::V1 => eps
                    .iter_mut()
                    .zip(copies.iter_mut())
                    .enumerate()
                    .map(|(k, (ep, net))| s.spawn(move || session(cfg, k, round, ep, ServerPortion::Own(net))))
                    .collect(),
                SflVariant::V2 => eps
                    .iter_mut()
                    .enumerate()
                    .map(|(k, ep)| {
                        s.spawn(move || {
                            let r = session(cfg, k, round, ep, ServerPortion::Shared { net: shared, gate });
                            if r.is_err() {
                                if let Some(g) = gate {
                                    g.abort();
                                }
                            }
                            r
                        })
                    })
                    .collect(),
            };
            join_roles(handles.into_iter().map(|h| h.join()).collect())
        })?;
        out.stats.extend(results.into_iter().flatten());
        let params = match variant {
            SflVariant::V1 => {
                let flats: Vec<Vec<f32>> = copies.iter().map(LayerStack::flat_params).collect();
                let avg = fedavg_flat(&flats, &sizes)?;
                if is_sync(cfg, round) {
                    for c in &mut copies {
                        c.set_flat_params(&avg)?;
                    }
                }
                avg
            }
            SflVariant::V2 => shared.lock().expect("server portion poisoned").flat_params(),
        };
        out.snapshot(round, SnapshotPhase::End, params);
    }
    for ep in &mut eps {
        Control::Done.send(ep)?;
    }
    Ok(out)
}

/// Federation server role: averages the client portions at every sync
/// round and sends the result back.
pub fn sfl_fed_server(cfg: &TrainConfig, clients: Vec<(Endpoint, usize)>, portion: LayerStack) -> Result<RoleOutput> {
    let mut out = RoleOutput::default();
    let sizes: Vec<usize> = clients.iter().map(|(_, n)| *n).collect();
    let mut eps: Vec<Endpoint> = clients.into_iter().map(|(ep, _)| ep).collect();
    let n_params = portion.param_count();
    let mut global = portion.flat_params();
    for round in (0..cfg.rounds).filter(|&r| is_sync(cfg, r)) {
        let mut received = Vec::with_capacity(eps.len());
        for ep in &mut eps {
            ep.set_round(round);
            received.push(params_from(&ep.recv_type(MsgType::Params)?, n_params)?);
        }
        global = if cfg.privacy.dp_fl {
            let deltas: Vec<Vec<f32>> = received.iter().map(|w| w.iter().zip(&global).map(|(a, b)| a - b).collect()).collect();
            let mut r = rng::stream(cfg.seed, &[rng::STREAM_DP_FL, round as u64]);
            dp_fl_server_update(&global, &deltas, cfg.privacy.clip, cfg.privacy.noise_multiplier, &mut r)?
        } else {
            fedavg_flat(&received, &sizes)?
        };
        for ep in &mut eps {
            ep.send(&params_message(global.clone()))?;
        }
        out.snapshot(round, SnapshotPhase::End, global.clone());
    }
    Ok(out)
}

/// Client role of splitfed learning.
pub fn sfl_client(cfg: &TrainConfig, k: usize, mut main: Endpoint, mut fed: Endpoint, mut portion: LayerStack, shard: &Dataset) -> Result<RoleOutput> {
    let mut out = RoleOutput::default();
    send_hello(&mut main, k, shard.len())?;
    send_hello(&mut fed, k, shard.len())?;
    let n_params = portion.param_count();
    for round in 0..cfg.rounds {
        main.set_round(round);
        fed.set_round(round);
        out.snapshot(round, SnapshotPhase::Start, portion.flat_params());
        let mut cut = PrivateCut::new(cfg, k, round, &portion, shard)?;
        for e in 0..cfg.local_epochs {
            for rows in epoch_batches(shard.len(), cfg.batch_size, cfg.seed, k, cfg.epoch_index(round, e)) {
                let (x, y) = shard.batch(&rows);
                let fwd = cut.forward(cfg, &portion, x)?;
                main.send(&WireMessage::tensor(MsgType::Smash, &fwd.sent))?;
                main.send(&WireMessage::labels(&y))?;
                let grad = main.recv_type(MsgType::SmashGrad)?.to_tensor()?;
                cut.backward(cfg, &mut portion, fwd, grad)?;
            }
        }
        Control::RoundEnd { round: round as u32 }.send(&mut main)?;
        if is_sync(cfg, round) {
            fed.send(&params_message(portion.flat_params()))?;
            portion.set_flat_params(&params_from(&fed.recv_type(MsgType::Params)?, n_params)?)?;
        }
        out.snapshot(round, SnapshotPhase::End, portion.flat_params());
    }
    Control::expect(&mut main, Control::Done)?;
    Ok(out)
}

pub fn run_sfl(model: &ModelSpec, cut: usize, variant: SflVariant, work: Workload<'_>, cfg: &TrainConfig) -> Result<RunMetrics> {
    cfg.validate()?;
    check_cut(model.layers.len(), cut)?;
    let start = Instant::now();
    let shards = work.shards()?;
    let k = shards.len();
    let sizes: Vec<usize> = shards.iter().map(Dataset::len).collect();
    let sm = split(model.init(cfg.seed)?, cut)?;
    let initial = evaluate_split(&sm.client, &sm.server, work.test)?;
    let links = LinkFactory::new(cfg.transport.clone());
    let (main_eps, client_main, _) = star_links(&links, MAIN_SERVER, k, Relay::None)?;
    let (fed_eps, client_fed, _) = star_links(&links, FED_SERVER, k, Relay::None)?;
    let mut outs = std::thread::scope(|s| {
        let net = sm.server.clone();
        let main = s.spawn(move || sfl_main_server(cfg, variant, receive_hellos(main_eps)?, net));
        let portion = sm.client.clone();
        let fed = s.spawn(move || sfl_fed_server(cfg, receive_hellos(fed_eps)?, portion));
        let handles: Vec<_> = client_main
            .into_iter()
            .zip(client_fed)
            .zip(&shards)
            .enumerate()
            .map(|(c, ((m, f), shard))| {
                let portion = sm.client.clone();
                s.spawn(move || sfl_client(cfg, c, m, f, portion, shard))
            })
            .collect();
        let mut results = vec![main.join(), fed.join()];
        results.extend(handles.into_iter().map(|h| h.join()));
        join_roles(results)
    })?;
    let main_out = outs.remove(0);
    let fed_out = outs.remove(0);

    let (mut client_net, mut server_net) = (sm.client.clone(), sm.server.clone());
    let probe = probe_batch(&shards[0]);
    let mut evals = Vec::with_capacity(cfg.rounds);
    let mut client_params = Vec::new();
    for round in 0..cfg.rounds {
        // between synchronisations the scored client portion is the
        // average the next sync would produce without DP noise
        client_params = if is_sync(cfg, round) {
            fed_out.end_of(round)?.to_vec()
        } else {
            let ends: Vec<Vec<f32>> = outs.iter().map(|o| o.end_of(round).map(<[f32]>::to_vec)).collect::<Result<_>>()?;
            fedavg_flat(&ends, &sizes)?
        };
        client_net.set_flat_params(&client_params)?;
        server_net.set_flat_params(main_out.end_of(round)?)?;
        let (test_loss, test_accuracy) = evaluate_split(&client_net, &server_net, work.test)?;
        let leakage = match cfg.leakage_bins {
            Some(bins) => Some(probe_leakage(cfg, &client_net, &probe, round, bins)?),
            None => None,
        };
        evals.push(RoundEval { test_loss, test_accuracy, leakage });
    }
    let mut final_model = Vec::new();
    if cfg.rounds > 0 {
        final_model.push(NamedPortion { name: "client".into(), params: client_params });
        final_model.push(NamedPortion { name: MAIN_SERVER.into(), params: server_net.flat_params() });
    }
    let stats = main_out.stats.clone();
    let mut roles: BTreeMap<String, RoleOutput> = outs.into_iter().enumerate().map(|(c, o)| (client_entity(c), o)).collect();
    roles.insert(MAIN_SERVER.into(), main_out);
    roles.insert(FED_SERVER.into(), fed_out);
    let ledger = links.ledger().snapshot();
    let name = match variant {
        SflVariant::V1 => "sfl-v1",
        SflVariant::V2 => "sfl-v2",
    };
    Ok(assemble(name, RunParts { stats, initial, evals, ledger, wall_time: start.elapsed(), final_model, roles }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gate_schedule_is_round_robin() {
        let g = TurnGate::new(&[2, 3, 1]);
        assert_eq!(g.schedule, vec![0, 1, 2, 0, 1, 1]);
    }

    #[test]
    fn sync_rounds() {
        let cfg = TrainConfig { rounds: 5, sync_interval: 2, ..TrainConfig::default() };
        let s: Vec<bool> = (0..5).map(|r| is_sync(&cfg, r)).collect();
        assert_eq!(s, vec![false, true, false, true, true]);
    }
}
