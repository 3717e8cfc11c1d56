//! Split learning over vertically partitioned features: each client runs
//! its own front network on its feature slice and the server merges the
//! smashed outputs before the shared remainder of the model.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::client::{loss_grad_scale, probe_batch, probe_leakage, PrivateCut};
use super::metrics::{assemble, RoundEval, RunParts};
use super::sl::{join_roles, star_links};
use super::{
    batches_per_epoch, check_cut, check_finite_loss, epoch_batches, receive_hellos, send_hello, BatchStat, Control,
    LinkFactory, NamedPortion, Relay, RoleOutput, RunMetrics, SnapshotPhase, TrainConfig, Workload, EVAL_CHUNK,
};
use crate::autodiff::{count_correct, cross_entropy_loss, LayerSpec, LayerStack, Tensor};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::rng;
use crate::transport::codec::decode_labels;
use crate::transport::{client_entity, Endpoint, MsgType, WireMessage, SERVER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Merge {
    #[default]
    Concat,
    Avg,
    Max,
    Sum,
    Mult,
}

fn check_parts(parts: &[Tensor], merge: Merge) -> Result<(usize, usize)> {
    let first = parts.first().ok_or_else(|| Error::InvalidArgument("nothing to merge".into()))?;
    let b = first.batch();
    for p in parts {
        if p.rank() != 2 || p.batch() != b {
            return Err(Error::Shape(format!("merge inputs must be [batch, width], got {:?}", p.shape())));
        }
        if merge != Merge::Concat && p.row_len() != first.row_len() {
            return Err(Error::Shape(format!(
                "{merge:?} merge needs equal widths, got {} and {}",
                first.row_len(),
                p.row_len()
            )));
        }
    }
    Ok((b, first.row_len()))
}

/// Combines per-client smashed batches `[batch, width_k]`.
pub fn merge_forward(parts: &[Tensor], merge: Merge) -> Result<Tensor> {
    let (b, w) = check_parts(parts, merge)?;
    if merge == Merge::Concat {
        let total: usize = parts.iter().map(Tensor::row_len).sum();
        let mut data = Vec::with_capacity(b * total);
        for r in 0..b {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        return Tensor::new(vec![b, total], data);
    }
    let k = parts.len() as f32;
    let data = (0..b * w)
        .map(|i| {
            let vals = parts.iter().map(|p| p.data()[i]);
            match merge {
                Merge::Avg => vals.sum::<f32>() / k,
                Merge::Sum => vals.sum(),
                Merge::Max => vals.fold(f32::NEG_INFINITY, f32::max),
                Merge::Mult => vals.product(),
                Merge::Concat => unreachable!(),
            }
        })
        .collect();
    Tensor::new(vec![b, w], data)
}

/// Gradient with respect to every merge input given the merged gradient.
/// Max routes to the first part holding the maximum.
pub fn merge_backward(parts: &[Tensor], grad: &Tensor, merge: Merge) -> Result<Vec<Tensor>> {
    let (b, w) = check_parts(parts, merge)?;
    if merge == Merge::Concat {
        let mut outs: Vec<Vec<f32>> = parts.iter().map(|p| Vec::with_capacity(p.len())).collect();
        for r in 0..b {
            let row = grad.row(r);
            let mut off = 0;
            for (o, p) in outs.iter_mut().zip(parts) {
                o.extend_from_slice(&row[off..off + p.row_len()]);
                off += p.row_len();
            }
        }
        return outs.into_iter().zip(parts).map(|(d, p)| Tensor::new(p.shape().to_vec(), d)).collect();
    }
    if grad.shape() != [b, w] {
        return Err(Error::Shape(format!("merged gradient {:?} for inputs [{b}, {w}]", grad.shape())));
    }
    let k = parts.len();
    let mut outs = vec![vec![0f32; b * w]; k];
    for i in 0..b * w {
        let g = grad.data()[i];
        match merge {
            Merge::Sum => outs.iter_mut().for_each(|o| o[i] = g),
            Merge::Avg => outs.iter_mut().for_each(|o| o[i] = g / k as f32),
            Merge::Max => {
                let mut best = 0;
                for j in 1..k {
                    if parts[j].data()[i] > parts[best].data()[i] {
                        best = j;
                    }
                }
                outs[best][i] = g;
            }
            Merge::Mult => {
                for (j, o) in outs.iter_mut().enumerate() {
                    let others: f32 = parts.iter().enumerate().filter(|(m, _)| *m != j).map(|(_, p)| p.data()[i]).product();
                    o[i] = g * others;
                }
            }
            Merge::Concat => unreachable!(),
        }
    }
    outs.into_iter().map(|d| Tensor::new(vec![b, w], d)).collect()
}

/// Seed of client `k`'s front network. Client 0 shares the whole-model
/// initialisation so that a lone client reproduces plain split learning.
fn front_seed(seed: u64, k: usize) -> u64 {
    if k == 0 {
        seed
    } else {
        rng::derive_seed(seed, &[rng::STREAM_INIT, u64::MAX, k as u64])
    }
}

/// Front networks for feature slices of the given widths and the server
/// network after the merge. The model must start with a dense layer; under
/// concatenation the server's first dense layer takes the merged width.
pub fn vertical_models(model: &ModelSpec, cut: usize, widths: &[usize], merge: Merge, seed: u64) -> Result<(Vec<LayerStack>, LayerStack)> {
    check_cut(model.layers.len(), cut)?;
    let LayerSpec::Dense { units, .. } = model.layers[0] else {
        return Err(Error::ArchitectureMismatch("vertical fronts need a dense first layer".into()));
    };
    let mut fronts = Vec::with_capacity(widths.len());
    for (k, &w) in widths.iter().enumerate() {
        let mut specs = model.layers[..=cut].to_vec();
        specs[0] = LayerSpec::Dense { inputs: w, units };
        fronts.push(LayerStack::from_specs(vec![w], &specs, front_seed(seed, k), 0)?);
    }
    let smashed = fronts.first().ok_or_else(|| Error::InvalidArgument("no clients".into()))?.output_shape();
    let [width] = smashed[..] else {
        return Err(Error::ArchitectureMismatch(format!("front output {smashed:?} is not a flat vector")));
    };
    let merged = if merge == Merge::Concat { width * widths.len() } else { width };
    let mut specs = model.layers[cut + 1..].to_vec();
    if merged != width {
        match specs.iter().position(|l| !matches!(l, LayerSpec::Relu)) {
            Some(i) if matches!(specs[i], LayerSpec::Dense { .. }) => {
                let LayerSpec::Dense { units, .. } = specs[i] else { unreachable!() };
                specs[i] = LayerSpec::Dense { inputs: merged, units };
            }
            _ => return Err(Error::ArchitectureMismatch("concatenation needs a dense layer after the cut".into())),
        }
    }
    let server = LayerStack::from_specs(vec![merged], &specs, seed, cut + 1)?;
    Ok((fronts, server))
}

pub fn vertical_server(cfg: &TrainConfig, clients: Vec<(Endpoint, usize)>, mut net: LayerStack, merge: Merge) -> Result<RoleOutput> {
    let mut out = RoleOutput::default();
    let n = clients.first().map(|(_, n)| *n).ok_or_else(|| Error::InvalidArgument("no clients".into()))?;
    if clients.iter().any(|(_, m)| *m != n) {
        return Err(Error::Protocol("vertical clients must hold the same samples".into()));
    }
    let mut eps: Vec<Endpoint> = clients.into_iter().map(|(ep, _)| ep).collect();
    let scale = loss_grad_scale(cfg);
    for round in 0..cfg.rounds {
        for ep in &mut eps {
            ep.set_round(round);
            Control::TurnStart { round: round as u32 }.send(ep)?;
        }
        for seq in 0..cfg.local_epochs * batches_per_epoch(n, cfg.batch_size) {
            let mut parts = Vec::with_capacity(eps.len());
            for ep in &mut eps {
                parts.push(ep.recv_type(MsgType::Smash)?.to_tensor()?);
            }
            let y = decode_labels(&eps[0].recv_type(MsgType::Labels)?.payload)?;
            let merged = merge_forward(&parts, merge)?;
            let (logits, tape) = net.forward(&merged, true)?;
            let (loss, mut grad) = cross_entropy_loss(&logits, &y)?;
            check_finite_loss(loss, "server")?;
            out.stats.push(BatchStat { round, client: 0, seq, samples: y.len(), loss, correct: count_correct(&logits, &y) });
            grad.scale(scale);
            let (grads, dm) = net.backward(&tape, &grad)?;
            net.sgd_step(&grads, cfg.lr)?;
            for (ep, g) in eps.iter_mut().zip(merge_backward(&parts, &dm, merge)?) {
                ep.send(&WireMessage::tensor(MsgType::SmashGrad, &g))?;
            }
        }
        out.snapshot(round, SnapshotPhase::End, net.flat_params());
    }
    for ep in &mut eps {
        Control::Done.send(ep)?;
    }
    Ok(out)
}

/// Vertical client `k` holding the feature slice `data`. All clients walk
/// the samples in the same order; client 0 also supplies the labels.
pub fn vertical_client(cfg: &TrainConfig, k: usize, mut ep: Endpoint, mut front: LayerStack, data: &Dataset) -> Result<RoleOutput> {
    let mut out = RoleOutput::default();
    send_hello(&mut ep, k, data.len())?;
    loop {
        match Control::recv(&mut ep)? {
            Control::TurnStart { round } => {
                let round = round as usize;
                ep.set_round(round);
                out.snapshot(round, SnapshotPhase::Start, front.flat_params());
                let mut cut = PrivateCut::new(cfg, k, round, &front, data)?;
                for e in 0..cfg.local_epochs {
                    for rows in epoch_batches(data.len(), cfg.batch_size, cfg.seed, 0, cfg.epoch_index(round, e)) {
                        let (x, y) = data.batch(&rows);
                        let fwd = cut.forward(cfg, &front, x)?;
                        ep.send(&WireMessage::tensor(MsgType::Smash, &fwd.sent))?;
                        if k == 0 {
                            ep.send(&WireMessage::labels(&y))?;
                        }
                        let grad = ep.recv_type(MsgType::SmashGrad)?.to_tensor()?;
                        cut.backward(cfg, &mut front, fwd, grad)?;
                    }
                }
                out.snapshot(round, SnapshotPhase::End, front.flat_params());
            }
            Control::Done => return Ok(out),
            other => return Err(Error::Protocol(format!("client {k} got unexpected {other:?}"))),
        }
    }
}

fn evaluate_vertical(fronts: &[LayerStack], server: &LayerStack, merge: Merge, slices: &[Dataset]) -> Result<(f64, f64)> {
    let n = slices[0].len();
    let (mut loss, mut correct) = (0f64, 0usize);
    let rows: Vec<usize> = (0..n).collect();
    for chunk in rows.chunks(EVAL_CHUNK) {
        let mut parts = Vec::with_capacity(fronts.len());
        for (f, d) in fronts.iter().zip(slices) {
            parts.push(f.forward(&d.batch(chunk).0, false)?.0);
        }
        let logits = server.forward(&merge_forward(&parts, merge)?, false)?.0;
        let y: Vec<usize> = chunk.iter().map(|&i| slices[0].labels()[i]).collect();
        loss += cross_entropy_loss(&logits, &y)?.0 * chunk.len() as f64;
        correct += count_correct(&logits, &y);
    }
    Ok((loss / n as f64, correct as f64 / n as f64))
}

/// Vertical split learning; `work.plan` must assign feature ranges.
pub fn run_sl_vertical(model: &ModelSpec, cut: usize, merge: Merge, work: Workload<'_>, cfg: &TrainConfig) -> Result<RunMetrics> {
    cfg.validate()?;
    let start = Instant::now();
    let k = work.plan.clients();
    let ranges: Vec<_> = (0..k)
        .map(|c| work.plan.feature_range(c).ok_or_else(|| Error::Config("vertical protocol needs a vertical partition".into())))
        .collect::<Result<_>>()?;
    let train: Vec<Dataset> = ranges.iter().map(|r| work.train.slice_features(r.clone())).collect::<Result<_>>()?;
    let test: Vec<Dataset> = ranges.iter().map(|r| work.test.slice_features(r.clone())).collect::<Result<_>>()?;
    let widths: Vec<usize> = ranges.iter().map(|r| r.len()).collect();
    let (fronts, server) = vertical_models(model, cut, &widths, merge, cfg.seed)?;
    let initial = evaluate_vertical(&fronts, &server, merge, &test)?;
    let links = LinkFactory::new(cfg.transport.clone());
    let (server_eps, client_eps, _) = star_links(&links, SERVER, k, Relay::None)?;
    let mut outs = std::thread::scope(|s| {
        let net = server.clone();
        let server_handle = s.spawn(move || vertical_server(cfg, receive_hellos(server_eps)?, net, merge));
        let handles: Vec<_> = client_eps
            .into_iter()
            .zip(fronts.iter().cloned())
            .zip(&train)
            .enumerate()
            .map(|(c, ((ep, front), data))| s.spawn(move || vertical_client(cfg, c, ep, front, data)))
            .collect();
        let mut results = vec![server_handle.join()];
        results.extend(handles.into_iter().map(|h| h.join()));
        join_roles(results)
    })?;
    let server_out = outs.remove(0);
    let (mut fronts_eval, mut server_eval) = (fronts.clone(), server.clone());
    let probe = probe_batch(&train[0]);
    let mut evals = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        server_eval.set_flat_params(server_out.end_of(round)?)?;
        for (f, o) in fronts_eval.iter_mut().zip(&outs) {
            f.set_flat_params(o.end_of(round)?)?;
        }
        let (test_loss, test_accuracy) = evaluate_vertical(&fronts_eval, &server_eval, merge, &test)?;
        let leakage = match cfg.leakage_bins {
            Some(bins) => Some(probe_leakage(cfg, &fronts_eval[0], &probe, round, bins)?),
            None => None,
        };
        evals.push(RoundEval { test_loss, test_accuracy, leakage });
    }
    let mut final_model: Vec<NamedPortion> = fronts_eval
        .iter()
        .enumerate()
        .map(|(c, f)| NamedPortion { name: client_entity(c), params: f.flat_params() })
        .collect();
    final_model.push(NamedPortion { name: SERVER.into(), params: server_eval.flat_params() });
    let stats = server_out.stats.clone();
    let mut roles: BTreeMap<String, RoleOutput> = outs.into_iter().enumerate().map(|(c, o)| (client_entity(c), o)).collect();
    roles.insert(SERVER.into(), server_out);
    let ledger = links.ledger().snapshot();
    Ok(assemble("sl-vertical", RunParts { stats, initial, evals, ledger, wall_time: start.elapsed(), final_model, roles }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, data: Vec<f32>) -> Tensor {
        let w = data.len() / rows;
        Tensor::new(vec![rows, w], data).unwrap()
    }

    #[test]
    fn merges_forward() {
        let a = t(1, vec![1.0, 5.0]);
        let b = t(1, vec![3.0, 2.0]);
        let p = [a.clone(), b.clone()];
        assert_eq!(merge_forward(&p, Merge::Concat).unwrap().data(), &[1.0, 5.0, 3.0, 2.0]);
        assert_eq!(merge_forward(&p, Merge::Avg).unwrap().data(), &[2.0, 3.5]);
        assert_eq!(merge_forward(&p, Merge::Max).unwrap().data(), &[3.0, 5.0]);
        assert_eq!(merge_forward(&p, Merge::Sum).unwrap().data(), &[4.0, 7.0]);
        assert_eq!(merge_forward(&p, Merge::Mult).unwrap().data(), &[3.0, 10.0]);
        assert!(merge_forward(&[a, t(1, vec![1.0])], Merge::Sum).is_err());
    }

    #[test]
    fn merges_backward() {
        let p = [t(1, vec![1.0, 5.0]), t(1, vec![3.0, 2.0])];
        let g = t(1, vec![2.0, 4.0]);
        let back = |m| merge_backward(&p, &g, m).unwrap().into_iter().map(|x| x.into_data()).collect::<Vec<_>>();
        assert_eq!(back(Merge::Avg), vec![vec![1.0, 2.0], vec![1.0, 2.0]]);
        assert_eq!(back(Merge::Sum), vec![vec![2.0, 4.0], vec![2.0, 4.0]]);
        assert_eq!(back(Merge::Max), vec![vec![0.0, 4.0], vec![2.0, 0.0]]);
        assert_eq!(back(Merge::Mult), vec![vec![6.0, 8.0], vec![2.0, 20.0]]);
        let cat = merge_backward(&p, &t(1, vec![1.0, 2.0, 3.0, 4.0]), Merge::Concat).unwrap();
        assert_eq!(cat[1].data(), &[3.0, 4.0]);
        let tie = [t(1, vec![1.0]), t(1, vec![1.0])];
        let routed = merge_backward(&tie, &t(1, vec![1.0]), Merge::Max).unwrap();
        assert_eq!((routed[0].data()[0], routed[1].data()[0]), (1.0, 0.0));
    }

    #[test]
    fn concat_widens_server_input() {
        let spec = ModelSpec::mlp_small(10, 3).unwrap();
        let (fronts, server) = vertical_models(&spec, 1, &[6, 4], Merge::Concat, 1).unwrap();
        assert_eq!(fronts[0].input_shape(), &[6]);
        assert_eq!(fronts[1].input_shape(), &[4]);
        assert_eq!(server.input_shape(), &[128]);
        let (_, server) = vertical_models(&spec, 1, &[6, 4], Merge::Sum, 1).unwrap();
        assert_eq!(server.input_shape(), &[64]);
        let (solo, _) = vertical_models(&spec, 1, &[10], Merge::Concat, 1).unwrap();
        let whole = crate::model::split(spec.init(1).unwrap(), 1).unwrap();
        assert_eq!(solo[0], whole.client);
    }
}
