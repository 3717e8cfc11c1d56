use std::time::Instant;

use super::client::local_step;
use super::metrics::{assemble, RoundEval, RunParts};
use super::{epoch_batches, evaluate, BatchStat, NamedPortion, RunMetrics, TrainConfig};
use crate::data::Dataset;
use crate::error::Result;
use crate::model::ModelSpec;
use crate::rng;
use crate::transport::LedgerSnapshot;

/// Plain minibatch SGD on the unsplit model over the whole training set.
/// Batches are drawn exactly as a lone client 0 would draw them, which
/// makes this the reference for single-client equivalence.
pub fn run_centralized(model: &ModelSpec, train: &Dataset, test: &Dataset, cfg: &TrainConfig) -> Result<RunMetrics> {
    cfg.validate()?;
    let start = Instant::now();
    let mut net = model.init(cfg.seed)?;
    let initial = evaluate(&net, test)?;
    let mut stats = Vec::new();
    let mut evals = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let mut dp_rng = rng::stream(cfg.seed, &[rng::STREAM_DP_SGD, 0, round as u64]);
        let mut seq = 0;
        for e in 0..cfg.local_epochs {
            for rows in epoch_batches(train.len(), cfg.batch_size, cfg.seed, 0, cfg.epoch_index(round, e)) {
                let (x, y) = train.batch(&rows);
                let (loss, correct) = local_step(cfg, &mut net, &x, &y, &mut dp_rng)?;
                stats.push(BatchStat { round, client: 0, seq, samples: rows.len(), loss, correct });
                seq += 1;
            }
        }
        let (test_loss, test_accuracy) = evaluate(&net, test)?;
        evals.push(RoundEval { test_loss, test_accuracy, leakage: None });
    }
    let final_model = vec![NamedPortion { name: "model".into(), params: net.flat_params() }];
    Ok(assemble(
        "centralized",
        RunParts {
            stats,
            initial,
            evals,
            ledger: LedgerSnapshot::default(),
            wall_time: start.elapsed(),
            final_model,
            roles: Default::default(),
        },
    ))
}
