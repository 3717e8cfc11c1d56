//! Split learning without label sharing: the client keeps the first layers
//! and the last layers, so labels and the loss never leave it.

use std::collections::BTreeMap;
use std::time::Instant;

use super::client::{loss_grad_scale, probe_batch, probe_leakage, PrivateCut};
use super::metrics::{assemble, RoundEval, RunParts};
use super::sl::{drive_client_turns, drive_server_turns, join_roles, star_links, TurnClient, TurnServer};
use super::{
    check_finite_loss, epoch_batches, evaluate_with, receive_hellos, BatchStat, LinkFactory, NamedPortion, Relay,
    RoleOutput, Ring, RunMetrics, TrainConfig, Workload,
};
use crate::autodiff::{count_correct, cross_entropy_loss, LayerStack};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{split_ushaped, ModelSpec};
use crate::transport::{client_entity, Endpoint, MsgType, WireMessage, SERVER};

struct MiddleServer {
    net: LayerStack,
    lr: f32,
}

impl TurnServer for MiddleServer {
    fn on_message(&mut self, ep: &mut Endpoint, _client: usize, _round: usize, _seq: usize, msg: WireMessage, _out: &mut RoleOutput) -> Result<()> {
        if msg.msg_type != MsgType::Smash {
            return Err(Error::Protocol(format!("server expected SMASH, got {}", msg.msg_type.name())));
        }
        let (act, tape) = self.net.forward(&msg.to_tensor()?, true)?;
        ep.send(&WireMessage::tensor(MsgType::ServerAct, &act))?;
        let grad = ep.recv_type(MsgType::ServerActGrad)?.to_tensor()?;
        let (grads, da) = self.net.backward(&tape, &grad)?;
        self.net.sgd_step(&grads, self.lr)?;
        ep.send(&WireMessage::tensor(MsgType::SmashGrad, &da))
    }

    fn params(&self) -> Vec<f32> {
        self.net.flat_params()
    }
}

struct UClient<'a> {
    cfg: &'a TrainConfig,
    k: usize,
    front: LayerStack,
    tail: LayerStack,
    shard: &'a Dataset,
}

impl TurnClient for UClient<'_> {
    /// Front parameters followed by tail parameters.
    fn params(&self) -> Vec<f32> {
        let mut p = self.front.flat_params();
        p.extend(self.tail.flat_params());
        p
    }

    fn load(&mut self, flat: &[f32]) -> Result<()> {
        let n = self.front.param_count();
        if flat.len() != n + self.tail.param_count() {
            return Err(Error::ArchitectureMismatch("relayed parameters do not fit front and tail".into()));
        }
        self.front.set_flat_params(&flat[..n])?;
        self.tail.set_flat_params(&flat[n..])
    }

    fn run_turn(&mut self, ep: &mut Endpoint, round: usize, out: &mut RoleOutput) -> Result<()> {
        let cfg = self.cfg;
        let scale = loss_grad_scale(cfg);
        let mut cut = PrivateCut::new(cfg, self.k, round, &self.front, self.shard)?;
        let mut seq = 0;
        for e in 0..cfg.local_epochs {
            for rows in epoch_batches(self.shard.len(), cfg.batch_size, cfg.seed, self.k, cfg.epoch_index(round, e)) {
                let (x, y) = self.shard.batch(&rows);
                let fwd = cut.forward(cfg, &self.front, x)?;
                ep.send(&WireMessage::tensor(MsgType::Smash, &fwd.sent))?;
                let act = ep.recv_type(MsgType::ServerAct)?.to_tensor()?;
                let (logits, tape) = self.tail.forward(&act, true)?;
                let (loss, mut grad) = cross_entropy_loss(&logits, &y)?;
                check_finite_loss(loss, "client tail")?;
                out.stats.push(BatchStat { round, client: self.k, seq, samples: y.len(), loss, correct: count_correct(&logits, &y) });
                seq += 1;
                grad.scale(scale);
                let (tail_grads, d_act) = self.tail.backward(&tape, &grad)?;
                self.tail.sgd_step(&tail_grads, cfg.lr)?;
                ep.send(&WireMessage::tensor(MsgType::ServerActGrad, &d_act))?;
                let g = ep.recv_type(MsgType::SmashGrad)?.to_tensor()?;
                cut.backward(cfg, &mut self.front, fwd, g)?;
            }
        }
        Ok(())
    }
}

pub fn ushaped_server(cfg: &TrainConfig, clients: Vec<(Endpoint, usize)>, middle: LayerStack) -> Result<RoleOutput> {
    let eps = clients.into_iter().map(|(ep, _)| ep).collect();
    drive_server_turns(cfg, eps, &mut MiddleServer { net: middle, lr: cfg.lr })
}

#[allow(clippy::too_many_arguments)]
pub fn ushaped_client(
    cfg: &TrainConfig,
    k: usize,
    clients: usize,
    mut ep: Endpoint,
    mut ring: Ring,
    front: LayerStack,
    tail: LayerStack,
    shard: &Dataset,
) -> Result<RoleOutput> {
    let mut state = UClient { cfg, k, front, tail, shard };
    drive_client_turns(cfg, k, clients, shard.len(), &mut ep, &mut ring, &mut state)
}

/// U-shaped split learning with the client holding `[0, front_cut]` and
/// `(back_cut, end]`.
pub fn run_sl_ushaped(model: &ModelSpec, front_cut: usize, back_cut: usize, work: Workload<'_>, cfg: &TrainConfig) -> Result<RunMetrics> {
    cfg.validate()?;
    let start = Instant::now();
    let shards = work.shards()?;
    let k = shards.len();
    let u = split_ushaped(model.init(cfg.seed)?, front_cut, back_cut)?;
    let eval = |front: &LayerStack, middle: &LayerStack, tail: &LayerStack| {
        evaluate_with(work.test, |x| {
            let a = front.forward(x, false)?.0;
            let b = middle.forward(&a, false)?.0;
            Ok(tail.forward(&b, false)?.0)
        })
    };
    let initial = eval(&u.front, &u.middle, &u.tail)?;
    let links = LinkFactory::new(cfg.transport.clone());
    let (server_eps, client_eps, rings) = star_links(&links, SERVER, k, cfg.relay)?;
    let mut outs = std::thread::scope(|s| {
        let middle = u.middle.clone();
        let server = s.spawn(move || ushaped_server(cfg, receive_hellos(server_eps)?, middle));
        let handles: Vec<_> = client_eps
            .into_iter()
            .zip(rings)
            .zip(&shards)
            .enumerate()
            .map(|(c, ((ep, ring), shard))| {
                let (front, tail) = (u.front.clone(), u.tail.clone());
                s.spawn(move || ushaped_client(cfg, c, k, ep, ring, front, tail, shard))
            })
            .collect();
        let mut results = vec![server.join()];
        results.extend(handles.into_iter().map(|h| h.join()));
        join_roles(results)
    })?;
    let server_out = outs.remove(0);

    let (mut front, mut middle, mut tail) = (u.front.clone(), u.middle.clone(), u.tail.clone());
    let split_at = front.param_count();
    let probe = probe_batch(&shards[0]);
    let scored: Vec<usize> = if cfg.relay == Relay::None { (0..k).collect() } else { vec![k - 1] };
    let mut evals = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        middle.set_flat_params(server_out.end_of(round)?)?;
        let (mut loss, mut acc) = (0.0, 0.0);
        for &c in &scored {
            let p = outs[c].end_of(round)?;
            front.set_flat_params(&p[..split_at])?;
            tail.set_flat_params(&p[split_at..])?;
            let (l, a) = eval(&front, &middle, &tail)?;
            loss += l;
            acc += a;
        }
        let leakage = match cfg.leakage_bins {
            Some(bins) => {
                front.set_flat_params(&outs[scored[0]].end_of(round)?[..split_at])?;
                Some(probe_leakage(cfg, &front, &probe, round, bins)?)
            }
            None => None,
        };
        evals.push(RoundEval { test_loss: loss / scored.len() as f64, test_accuracy: acc / scored.len() as f64, leakage });
    }
    let mut final_model = Vec::new();
    if cfg.rounds > 0 {
        for &c in &scored {
            final_model.push(NamedPortion { name: client_entity(c), params: outs[c].end_of(cfg.rounds - 1)?.to_vec() });
        }
        final_model.push(NamedPortion { name: SERVER.into(), params: server_out.end_of(cfg.rounds - 1)?.to_vec() });
    }
    let stats = outs.iter().flat_map(|o| o.stats.iter().copied()).collect();
    let mut roles: BTreeMap<String, RoleOutput> = outs.into_iter().enumerate().map(|(c, o)| (client_entity(c), o)).collect();
    roles.insert(SERVER.into(), server_out);
    let ledger = links.ledger().snapshot();
    Ok(assemble("sl-ushaped", RunParts { stats, initial, evals, ledger, wall_time: start.elapsed(), final_model, roles }))
}
