use std::collections::BTreeMap;
use std::io::Write;
use std::time::Duration;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::privacy::LeakageReport;
use crate::transport::{is_client_entity, Direction, LedgerSnapshot};

/// Loss of one minibatch as observed by whichever role computes it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BatchStat {
    pub round: usize,
    pub client: usize,
    /// Position of the batch within the client's round.
    pub seq: usize,
    pub samples: usize,
    pub loss: f64,
    pub correct: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SnapshotPhase {
    Start,
    End,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Snapshot {
    pub round: usize,
    pub phase: SnapshotPhase,
    pub params: Vec<f32>,
}

/// What a role hands back when it finishes.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RoleOutput {
    pub stats: Vec<BatchStat>,
    pub snapshots: Vec<Snapshot>,
}

impl RoleOutput {
    pub fn snapshot(&mut self, round: usize, phase: SnapshotPhase, params: Vec<f32>) {
        self.snapshots.push(Snapshot { round, phase, params });
    }

    /// Parameters held at the end of `round`.
    pub fn end_of(&self, round: usize) -> Result<&[f32]> {
        self.snapshots
            .iter()
            .rev()
            .find(|s| s.round == round && s.phase == SnapshotPhase::End)
            .map(|s| s.params.as_slice())
            .ok_or_else(|| Error::Protocol(format!("no end-of-round snapshot for round {round}")))
    }

    /// Parameters held when `round` started.
    pub fn start_of(&self, round: usize) -> Option<&[f32]> {
        self.snapshots
            .iter()
            .find(|s| s.round == round && s.phase == SnapshotPhase::Start)
            .map(|s| s.params.as_slice())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NamedPortion {
    pub name: String,
    pub params: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    /// One-based round number.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub leakage: Option<LeakageReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub protocol: String,
    pub initial_test_loss: f64,
    pub initial_test_accuracy: f64,
    pub rounds: Vec<RoundMetrics>,
    pub ledger: LedgerSnapshot,
    pub wall_time: Duration,
    pub final_model: Vec<NamedPortion>,
    /// Raw output of every role, keyed by entity name.
    pub roles: BTreeMap<String, RoleOutput>,
}

impl RunMetrics {
    pub fn final_test_accuracy(&self) -> f64 {
        self.rounds.last().map_or(self.initial_test_accuracy, |r| r.test_accuracy)
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.train_loss).collect()
    }

    /// Same losses, accuracies, byte counts, ledger and parameters; wall
    /// time is ignored.
    pub fn same_outcome(&self, other: &RunMetrics) -> bool {
        self.rounds == other.rounds
            && self.ledger == other.ledger
            && self.final_model == other.final_model
            && self.initial_test_loss.to_bits() == other.initial_test_loss.to_bits()
    }
}

/// Per-round training loss and accuracy from batch statistics, summed in
/// `(round, client, seq)` order so results do not depend on arrival order.
pub(crate) fn train_curves(stats: &[BatchStat], rounds: usize) -> Vec<(f64, f64)> {
    let mut sorted: Vec<&BatchStat> = stats.iter().collect();
    sorted.sort_by_key(|s| (s.round, s.client, s.seq));
    let mut acc = vec![(0f64, 0usize, 0usize); rounds];
    for s in sorted {
        if let Some(slot) = acc.get_mut(s.round) {
            slot.0 += s.loss * s.samples as f64;
            slot.1 += s.correct;
            slot.2 += s.samples;
        }
    }
    acc.into_iter()
        .map(|(l, c, n)| if n == 0 { (f64::NAN, f64::NAN) } else { (l / n as f64, c as f64 / n as f64) })
        .collect()
}

/// Payload bytes sent by clients and payload bytes sent to clients by
/// servers during `round`.
pub(crate) fn round_bytes(ledger: &LedgerSnapshot, round: usize) -> (u64, u64) {
    let r = round as u32;
    let up = ledger.sum_where(|k| k.round == r && k.direction == Direction::Sent && is_client_entity(&k.entity));
    let down = ledger.sum_where(|k| {
        k.round == r && k.direction == Direction::Sent && !is_client_entity(&k.entity) && is_client_entity(&k.peer)
    });
    (up.payload_bytes, down.payload_bytes)
}

/// Evaluation results of one round, produced by the orchestrator.
pub(crate) struct RoundEval {
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub leakage: Option<LeakageReport>,
}

pub(crate) struct RunParts {
    pub stats: Vec<BatchStat>,
    pub initial: (f64, f64),
    pub evals: Vec<RoundEval>,
    pub ledger: LedgerSnapshot,
    pub wall_time: Duration,
    pub final_model: Vec<NamedPortion>,
    pub roles: BTreeMap<String, RoleOutput>,
}

pub(crate) fn assemble(protocol: &str, parts: RunParts) -> RunMetrics {
    let curves = train_curves(&parts.stats, parts.evals.len());
    let ledger = parts.ledger;
    let rounds = parts
        .evals
        .into_iter()
        .zip(curves)
        .enumerate()
        .map(|(r, (ev, (train_loss, train_accuracy)))| {
            let (bytes_up, bytes_down) = round_bytes(&ledger, r);
            RoundMetrics {
                epoch: r + 1,
                train_loss,
                train_accuracy,
                test_loss: ev.test_loss,
                test_accuracy: ev.test_accuracy,
                bytes_up,
                bytes_down,
                leakage: ev.leakage,
            }
        })
        .collect();
    RunMetrics {
        protocol: protocol.to_string(),
        initial_test_loss: parts.initial.0,
        initial_test_accuracy: parts.initial.1,
        rounds,
        ledger,
        wall_time: parts.wall_time,
        final_model: parts.final_model,
        roles: parts.roles,
    }
}

/// Writes `epoch,phase,loss,accuracy,bytes_up,bytes_down` rows, one
/// `train` and one `test` row per round, plus `dcor,kl_nats` when
/// `leakage` is set. Round traffic is reported on the train row.
pub fn write_metrics_csv<W: Write>(metrics: &RunMetrics, leakage: bool, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut header = vec!["epoch", "phase", "loss", "accuracy", "bytes_up", "bytes_down"];
    if leakage {
        header.extend(["dcor", "kl_nats"]);
    }
    w.write_record(&header).map_err(csv_err)?;
    for r in &metrics.rounds {
        let mut train = vec![
            r.epoch.to_string(),
            "train".into(),
            r.train_loss.to_string(),
            r.train_accuracy.to_string(),
            r.bytes_up.to_string(),
            r.bytes_down.to_string(),
        ];
        let mut test = vec![
            r.epoch.to_string(),
            "test".into(),
            r.test_loss.to_string(),
            r.test_accuracy.to_string(),
            "0".into(),
            "0".into(),
        ];
        if leakage {
            match r.leakage {
                Some(l) => train.extend([l.dcor.to_string(), l.kl_nats.to_string()]),
                None => train.extend([String::new(), String::new()]),
            }
            test.extend([String::new(), String::new()]);
        }
        w.write_record(&train).map_err(csv_err)?;
        w.write_record(&test).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stat(round: usize, client: usize, seq: usize, samples: usize, loss: f64, correct: usize) -> BatchStat {
        BatchStat { round, client, seq, samples, loss, correct }
    }

    #[test]
    fn curves_weight_by_samples_and_ignore_order() {
        let a = vec![stat(0, 0, 0, 2, 1.0, 1), stat(0, 1, 0, 6, 3.0, 6), stat(1, 0, 0, 4, 0.5, 4)];
        let mut b = a.clone();
        b.reverse();
        let c = train_curves(&a, 2);
        assert_eq!(c, train_curves(&b, 2));
        assert_eq!(c[0], (2.5, 7.0 / 8.0));
        assert_eq!(c[1], (0.5, 1.0));
    }

    #[test]
    fn csv_layout() {
        let m = assemble(
            "x",
            RunParts {
                stats: vec![stat(0, 0, 0, 1, 0.25, 1)],
                initial: (1.0, 0.0),
                evals: vec![RoundEval { test_loss: 0.5, test_accuracy: 0.75, leakage: None }],
                ledger: LedgerSnapshot::default(),
                wall_time: Duration::ZERO,
                final_model: Vec::new(),
                roles: BTreeMap::new(),
            },
        );
        let mut buf = Vec::new();
        write_metrics_csv(&m, false, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "epoch,phase,loss,accuracy,bytes_up,bytes_down\n1,train,0.25,1,0,0\n1,test,0.5,0.75,0,0\n");
        let mut buf = Vec::new();
        write_metrics_csv(&m, true, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("epoch,phase,loss,accuracy,bytes_up,bytes_down,dcor,kl_nats\n"));
    }
}
