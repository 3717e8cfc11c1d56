//! Federated averaging: every client trains the whole model locally and the
//! server averages the results weighted by shard size.

use std::collections::BTreeMap;
use std::time::Instant;

use super::client::local_step;
use super::metrics::{assemble, RoundEval, RunParts};
use super::sl::{join_roles, params_from, params_message, star_links};
use super::{
    epoch_batches, evaluate, receive_hellos, send_hello, BatchStat, LinkFactory, NamedPortion, Relay, RoleOutput,
    RunMetrics, SnapshotPhase, TrainConfig, Workload,
};
use crate::autodiff::LayerStack;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::privacy::dp_fl_server_update;
use crate::rng;
use crate::transport::{client_entity, Endpoint, MsgType, SERVER};

/// `sum_k (n_k / n) * w_k`, accumulated in f64 in ascending `k`.
pub(crate) fn fedavg_flat(portions: &[Vec<f32>], sizes: &[usize]) -> Result<Vec<f32>> {
    if portions.is_empty() || portions.len() != sizes.len() {
        return Err(Error::InvalidArgument(format!("{} portions with {} shard sizes", portions.len(), sizes.len())));
    }
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return Err(Error::InvalidArgument("total shard size is zero".into()));
    }
    let len = portions[0].len();
    if let Some(bad) = portions.iter().position(|p| p.len() != len) {
        return Err(Error::ArchitectureMismatch(format!("portion {bad} has {} parameters, expected {len}", portions[bad].len())));
    }
    let mut acc = vec![0f64; len];
    for (p, &nk) in portions.iter().zip(sizes) {
        let w = nk as f64 / n as f64;
        for (a, &v) in acc.iter_mut().zip(p) {
            *a += w * f64::from(v);
        }
    }
    Ok(acc.into_iter().map(|v| v as f32).collect())
}

/// Weighted average of identically shaped portions.
pub fn fedavg_aggregate(portions: &[LayerStack], sizes: &[usize]) -> Result<LayerStack> {
    let first = portions.first().ok_or_else(|| Error::InvalidArgument("no portions to aggregate".into()))?;
    let specs = first.specs();
    if let Some(bad) = portions.iter().position(|p| p.specs() != specs || p.input_shape() != first.input_shape()) {
        return Err(Error::ArchitectureMismatch(format!("portion {bad} differs from portion 0")));
    }
    let flats: Vec<Vec<f32>> = portions.iter().map(LayerStack::flat_params).collect();
    let mut out = first.clone();
    out.set_flat_params(&fedavg_flat(&flats, sizes)?)?;
    Ok(out)
}

/// FedAvg server: broadcast, collect, aggregate, once per round. With DP
/// enabled the update is clipped and noised instead.
pub fn fl_server(cfg: &TrainConfig, clients: Vec<(Endpoint, usize)>, mut global: LayerStack) -> Result<RoleOutput> {
    let mut out = RoleOutput::default();
    let sizes: Vec<usize> = clients.iter().map(|(_, n)| *n).collect();
    let mut eps: Vec<Endpoint> = clients.into_iter().map(|(ep, _)| ep).collect();
    let n_params = global.param_count();
    for round in 0..cfg.rounds {
        let current = global.flat_params();
        for ep in &mut eps {
            ep.set_round(round);
            ep.send(&params_message(current.clone()))?;
        }
        let mut received = Vec::with_capacity(eps.len());
        for ep in &mut eps {
            received.push(params_from(&ep.recv_type(MsgType::Params)?, n_params)?);
        }
        let next = if cfg.privacy.dp_fl {
            let deltas: Vec<Vec<f32>> =
                received.iter().map(|w| w.iter().zip(&current).map(|(a, b)| a - b).collect()).collect();
            let mut r = rng::stream(cfg.seed, &[rng::STREAM_DP_FL, round as u64]);
            dp_fl_server_update(&current, &deltas, cfg.privacy.clip, cfg.privacy.noise_multiplier, &mut r)?
        } else {
            fedavg_flat(&received, &sizes)?
        };
        global.set_flat_params(&next)?;
        out.snapshot(round, SnapshotPhase::End, next);
    }
    Ok(out)
}

/// FedAvg client: per round, load the global model, train `local_epochs`
/// over the shard and upload the result.
pub fn fl_client(cfg: &TrainConfig, k: usize, mut ep: Endpoint, mut model: LayerStack, shard: &Dataset) -> Result<RoleOutput> {
    let mut out = RoleOutput::default();
    send_hello(&mut ep, k, shard.len())?;
    let n_params = model.param_count();
    for round in 0..cfg.rounds {
        ep.set_round(round);
        model.set_flat_params(&params_from(&ep.recv_type(MsgType::Params)?, n_params)?)?;
        out.snapshot(round, SnapshotPhase::Start, model.flat_params());
        let mut dp_rng = rng::stream(cfg.seed, &[rng::STREAM_DP_SGD, k as u64, round as u64]);
        let mut seq = 0;
        for e in 0..cfg.local_epochs {
            for rows in epoch_batches(shard.len(), cfg.batch_size, cfg.seed, k, cfg.epoch_index(round, e)) {
                let (x, y) = shard.batch(&rows);
                let (loss, correct) = local_step(cfg, &mut model, &x, &y, &mut dp_rng)?;
                out.stats.push(BatchStat { round, client: k, seq, samples: rows.len(), loss, correct });
                seq += 1;
            }
        }
        let trained = model.flat_params();
        out.snapshot(round, SnapshotPhase::End, trained.clone());
        ep.send(&params_message(trained))?;
    }
    Ok(out)
}

pub fn run_fl(model: &ModelSpec, work: Workload<'_>, cfg: &TrainConfig) -> Result<RunMetrics> {
    cfg.validate()?;
    let start = Instant::now();
    let shards = work.shards()?;
    let k = shards.len();
    let net = model.init(cfg.seed)?;
    let initial = evaluate(&net, work.test)?;
    let links = LinkFactory::new(cfg.transport.clone());
    let (server_eps, client_eps, _) = star_links(&links, SERVER, k, Relay::None)?;
    let mut outs = std::thread::scope(|s| {
        let global = net.clone();
        let server = s.spawn(move || fl_server(cfg, receive_hellos(server_eps)?, global));
        let handles: Vec<_> = client_eps
            .into_iter()
            .zip(&shards)
            .enumerate()
            .map(|(c, (ep, shard))| {
                let local = net.clone();
                s.spawn(move || fl_client(cfg, c, ep, local, shard))
            })
            .collect();
        let mut results = vec![server.join()];
        results.extend(handles.into_iter().map(|h| h.join()));
        join_roles(results)
    })?;
    let server_out = outs.remove(0);
    let mut eval_net = net.clone();
    let mut evals = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        eval_net.set_flat_params(server_out.end_of(round)?)?;
        let (test_loss, test_accuracy) = evaluate(&eval_net, work.test)?;
        evals.push(RoundEval { test_loss, test_accuracy, leakage: None });
    }
    let final_model = vec![NamedPortion { name: "model".into(), params: eval_net.flat_params() }];
    let stats = outs.iter().flat_map(|o| o.stats.iter().copied()).collect();
    let mut roles: BTreeMap<String, RoleOutput> = outs.into_iter().enumerate().map(|(c, o)| (client_entity(c), o)).collect();
    roles.insert(SERVER.into(), server_out);
    let ledger = links.ledger().snapshot();
    Ok(assemble("fl", RunParts { stats, initial, evals, ledger, wall_time: start.elapsed(), final_model, roles }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_average_examples() {
        assert_eq!(fedavg_flat(&[vec![2.0], vec![4.0]], &[1, 1]).unwrap(), vec![3.0]);
        assert_eq!(fedavg_flat(&[vec![0.0], vec![8.0]], &[1, 3]).unwrap(), vec![6.0]);
        assert_eq!(fedavg_flat(&[vec![2.0], vec![4.0]], &[1, 2]).unwrap(), vec![(10.0f64 / 3.0) as f32]);
        let w = vec![0.1f32, -3.7, 1e-8];
        assert_eq!(fedavg_flat(std::slice::from_ref(&w), &[7]).unwrap(), w);
        assert_eq!(fedavg_flat(&[w.clone(), w.clone()], &[5, 5]).unwrap(), w);
        assert!(fedavg_flat(&[vec![1.0], vec![1.0, 2.0]], &[1, 1]).is_err());
        assert!(fedavg_flat(&[vec![1.0]], &[0]).is_err());
    }

    #[test]
    fn aggregate_rejects_different_architectures() {
        let a = ModelSpec::mlp(4, &[3], 2).unwrap().init(0).unwrap();
        let b = ModelSpec::mlp(4, &[5], 2).unwrap().init(0).unwrap();
        assert!(matches!(fedavg_aggregate(&[a.clone(), b], &[1, 1]), Err(Error::ArchitectureMismatch(_))));
        let same = fedavg_aggregate(&[a.clone(), a.clone()], &[1, 2]).unwrap();
        assert_eq!(same, a);
    }
}
