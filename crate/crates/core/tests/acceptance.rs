//! Acceptance suite. Runs as a plain binary so every criterion prints its
//! verdict whether it passes or not; exits non-zero if any criterion fails.

mod common;

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use splitfed::autodiff::Tensor;
use splitfed::data::{iid_partition, label_skew_partition, synth_blobs, Dataset, PartitionPlan};
use splitfed::model::ModelSpec;
use splitfed::privacy::{clip_by_norm, distance_correlation, kl_leakage, laplace_smash, PrivacyConfig};
use splitfed::protocols::{
    run_centralized, run_fl, run_sfl, run_sl, run_sl_no_sync, run_sl_ushaped, write_metrics_csv, RunMetrics,
    SflVariant, TrainConfig, TransportMode, Workload,
};
use splitfed::transport::{client_entity, Direction, LedgerSnapshot, MsgType, SERVER};

struct Verdict {
    pass: bool,
    detail: String,
}

type Criterion = (&'static str, fn() -> Verdict);

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn blobs(n: usize, test: usize, classes: usize, dim: usize, sep: f64, seed: u64) -> (Dataset, Dataset) {
    synth_blobs(n + test, classes, dim, sep, seed).unwrap().split_at(n).unwrap()
}

fn max_gap(a: &RunMetrics, b: &RunMetrics) -> f64 {
    let mut gap = (a.final_test_accuracy() - b.final_test_accuracy()).abs();
    for (x, y) in a.rounds.iter().zip(&b.rounds) {
        gap = gap.max((x.train_loss - y.train_loss).abs()).max((x.test_loss - y.test_loss).abs());
    }
    gap
}

fn centralized_equivalence() -> Verdict {
    let start = Instant::now();
    let (train, test) = blobs(800, 200, 4, 8, 3.0, 1);
    let spec = ModelSpec::mlp_small(8, 4).unwrap();
    let plan = iid_partition(train.len(), 1, 0).unwrap();
    let work = Workload { train: &train, test: &test, plan: &plan };
    let cfg = TrainConfig { rounds: 5, batch_size: 32, lr: 0.05, seed: 9, ..TrainConfig::default() };
    let central = run_centralized(&spec, &train, &test, &cfg).unwrap();
    let gaps = [
        ("sl", max_gap(&central, &run_sl(&spec, 1, work, &cfg).unwrap())),
        ("sfl-v1", max_gap(&central, &run_sfl(&spec, 1, SflVariant::V1, work, &cfg).unwrap())),
        ("sfl-v2", max_gap(&central, &run_sfl(&spec, 1, SflVariant::V2, work, &cfg).unwrap())),
    ];
    let elapsed = start.elapsed();
    let worst = gaps.iter().map(|g| g.1).fold(0.0, f64::max);
    let pass = central.rounds.len() == 5 && worst <= 1e-6 && elapsed < Duration::from_secs(30);
    verdict(pass, format!("max per-epoch gap {worst:.2e} over {gaps:?}, {:.1}s", elapsed.as_secs_f64()))
}

/// Smashed traffic one client accounts for: what it sends plus gradients
/// it receives from the server.
fn smashed_values(ledger: &LedgerSnapshot, k: usize) -> (u64, u64) {
    let me = client_entity(k);
    let c = ledger.sum_where(|key| {
        key.entity == me
            && ((key.msg_type == MsgType::Smash && key.direction == Direction::Sent)
                || (key.msg_type == MsgType::SmashGrad && key.direction == Direction::Received && key.peer == SERVER))
    });
    (c.value_bytes(), c.header_bytes)
}

fn table_exactness() -> Verdict {
    let start = Instant::now();
    let p = 1000usize;
    let mut notes = Vec::new();
    let mut pass = true;
    for k in [2usize, 5] {
        for q in [32usize, 128] {
            let (train, test) = blobs(p, 100, 4, 8, 3.0, 2);
            let spec = ModelSpec::mlp(8, &[q], 4).unwrap();
            let plan = iid_partition(p, k, 0).unwrap();
            let work = Workload { train: &train, test: &test, plan: &plan };
            let cfg = TrainConfig { rounds: 2, batch_size: 32, ..TrainConfig::default() };
            let run = run_sl_no_sync(&spec, 1, work, &cfg).unwrap();
            let want = 4 * 2 * (p / k) * q * cfg.rounds;
            for c in 0..k {
                let (values, headers) = smashed_values(&run.ledger, c);
                let share = headers as f64 / values as f64;
                pass &= values as usize == want && share < 0.005;
                if c == 0 {
                    notes.push(format!("K={k} q={q}: {values}/{want} B, headers {:.2}%", 100.0 * share));
                }
            }
        }
    }
    for k in [2usize, 5] {
        let (train, test) = blobs(400, 100, 4, 8, 3.0, 3);
        let spec = ModelSpec::mlp_small(8, 4).unwrap();
        let n = spec.init(0).unwrap().param_count();
        let plan = iid_partition(train.len(), k, 0).unwrap();
        let work = Workload { train: &train, test: &test, plan: &plan };
        let cfg = TrainConfig { rounds: 3, ..TrainConfig::default() };
        let run = run_fl(&spec, work, &cfg).unwrap();
        for c in 0..k {
            let me = client_entity(c);
            let params = run.ledger.sum_where(|key| key.entity == me && key.msg_type == MsgType::Params);
            pass &= params.value_bytes() as usize == 4 * 2 * n * cfg.rounds;
        }
        notes.push(format!("FL K={k}: 8N per round per client with N={n}"));
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(60);
    verdict(pass, format!("{}, {:.1}s", notes.join("; "), elapsed.as_secs_f64()))
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let reports = common::gradient_suite(100, 7);
    let elapsed = start.elapsed();
    let pass = reports.iter().all(|r| r.instances >= 100 && r.max_rel_err < 1e-3) && elapsed < Duration::from_secs(60);
    let worst: Vec<String> = reports.iter().map(|r| format!("{} {:.1e}", r.kind, r.max_rel_err)).collect();
    verdict(pass, format!("max relative error: {}, {:.1}s", worst.join(", "), elapsed.as_secs_f64()))
}

fn random_distribution(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| r.random_range(1e-3..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn privacy_suite() -> Verdict {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let mut notes = Vec::new();

    let mut clip_ok = true;
    for _ in 0..10_000 {
        let d = r.random_range(1..64);
        let scale = r.random_range(0.01..100.0f32);
        let v: Vec<f32> = (0..d).map(|_| r.random_range(-1.0..1.0) * scale).collect();
        let s = r.random_range(0.01..10.0);
        let out = clip_by_norm(&Tensor::from_vec(v), s).unwrap();
        clip_ok &= out.l2_norm() <= s;
    }
    notes.push(format!("clip {}", if clip_ok { "ok" } else { "violated" }));

    let (rows, units, eps) = (1000, 1000, 0.5);
    let delta = 2.0f32;
    let mut data = vec![0.0f32; rows * units];
    data[units..2 * units].fill(delta);
    for v in data[2 * units..].iter_mut() {
        *v = r.random_range(0.0..delta);
    }
    let a = Tensor::new(vec![rows, units], data).unwrap();
    let noisy = laplace_smash(&a, eps, None, &mut r).unwrap();
    let mad = noisy.data().iter().zip(a.data()).map(|(x, y)| (f64::from(*x) - f64::from(*y)).abs()).sum::<f64>()
        / (rows * units) as f64;
    let expected = f64::from(delta) / eps;
    let mad_err = (mad - expected).abs() / expected;
    notes.push(format!("Laplace MAD {mad:.4} vs {expected} ({:.2}%)", 100.0 * mad_err));

    let mut kl_ok = true;
    let mut identity_err = 0f64;
    for _ in 0..1000 {
        let n = r.random_range(2..40);
        let (p, q) = (random_distribution(&mut r, n), random_distribution(&mut r, n));
        let kl = kl_leakage(&p, &q).unwrap();
        let cross: f64 = p.iter().zip(&q).map(|(a, b)| -a * b.ln()).sum();
        let entropy: f64 = p.iter().map(|a| -a * a.ln()).sum();
        kl_ok &= kl >= 0.0;
        identity_err = identity_err.max((kl - (cross - entropy)).abs());
    }
    notes.push(format!("KL identity error {identity_err:.1e}"));

    let n = 1000;
    let normal = |r: &mut ChaCha8Rng| -> Vec<f32> { (0..n).map(|_| r.sample(StandardNormal)).collect() };
    let xt = Tensor::new(vec![n, 1], normal(&mut r)).unwrap();
    let zt = Tensor::new(vec![n, 1], normal(&mut r)).unwrap();
    let self_dcor = distance_correlation(&xt, &xt).unwrap();
    let indep = distance_correlation(&xt, &zt).unwrap();
    notes.push(format!("DCOR(X,X) {self_dcor:.12}, independent {indep:.4}"));

    let pass = clip_ok && mad_err < 0.03 && kl_ok && identity_err <= 1e-12 && (self_dcor - 1.0).abs() <= 1e-10 && indep < 0.1;
    verdict(pass, notes.join("; "))
}

fn iid_parity() -> Verdict {
    let start = Instant::now();
    let (train, test) = blobs(1200, 400, 4, 8, 4.0, 5);
    let spec = ModelSpec::mlp_small(8, 4).unwrap();
    let plan = iid_partition(train.len(), 4, 0).unwrap();
    let work = Workload { train: &train, test: &test, plan: &plan };
    let cfg = TrainConfig { rounds: 20, batch_size: 32, lr: 0.05, seed: 1, ..TrainConfig::default() };
    let runs = [
        run_centralized(&spec, &train, &test, &cfg).unwrap(),
        run_fl(&spec, work, &cfg).unwrap(),
        run_sl(&spec, 1, work, &cfg).unwrap(),
        run_sfl(&spec, 1, SflVariant::V1, work, &cfg).unwrap(),
        run_sfl(&spec, 1, SflVariant::V2, work, &cfg).unwrap(),
    ];
    let accs: Vec<f64> = runs.iter().map(RunMetrics::final_test_accuracy).collect();
    let lo = accs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let elapsed = start.elapsed();
    let pass = lo >= 0.95 && hi - lo <= 0.02 && elapsed < Duration::from_secs(180);
    let named: Vec<String> = runs.iter().zip(&accs).map(|(r, a)| format!("{} {a:.4}", r.protocol)).collect();
    verdict(pass, format!("{}; max gap {:.4}, {:.1}s", named.join(", "), hi - lo, elapsed.as_secs_f64()))
}

fn non_iid_degradation() -> Verdict {
    let mut sl_drops = Vec::new();
    let mut fl_drops = Vec::new();
    for seed in [1u64, 2, 3] {
        let (train, test) = blobs(800, 200, 4, 8, 2.0, seed);
        let spec = ModelSpec::mlp_small(8, 4).unwrap();
        let cfg = TrainConfig { rounds: 5, local_epochs: 3, batch_size: 32, lr: 0.05, seed, ..TrainConfig::default() };
        let iid = iid_partition(train.len(), 4, seed).unwrap();
        let skew = label_skew_partition(train.labels(), 4, 4, 1, seed).unwrap();
        let acc = |plan: &PartitionPlan, fl: bool| {
            let work = Workload { train: &train, test: &test, plan };
            let run = if fl { run_fl(&spec, work, &cfg) } else { run_sl(&spec, 1, work, &cfg) };
            run.unwrap().final_test_accuracy()
        };
        sl_drops.push(acc(&iid, false) - acc(&skew, false));
        fl_drops.push(acc(&iid, true) - acc(&skew, true));
    }
    let (sl, fl) = (median(sl_drops.clone()), median(fl_drops.clone()));
    let pass = sl >= 0.15 && fl < sl;
    verdict(pass, format!("median drop SL {sl:.4} {sl_drops:.3?}, FL {fl:.4} {fl_drops:.3?}"))
}

fn nopeek_effect() -> Verdict {
    let mut dcor_gaps = Vec::new();
    let mut acc_drops = Vec::new();
    for seed in [1u64, 2, 3] {
        let (train, test) = blobs(4000, 1000, 4, 32, 3.0, seed);
        let spec = ModelSpec::mlp_small(32, 4).unwrap();
        let plan = iid_partition(train.len(), 1, seed).unwrap();
        let work = Workload { train: &train, test: &test, plan: &plan };
        let run = |alpha1: f64| {
            let privacy = PrivacyConfig { nopeek: true, alpha1, alpha2: 1.0, ..PrivacyConfig::default() };
            let cfg = TrainConfig {
                rounds: 60,
                batch_size: 32,
                lr: 0.2,
                seed,
                privacy,
                leakage_bins: Some(32),
                ..TrainConfig::default()
            };
            let m = run_sl(&spec, 1, work, &cfg).unwrap();
            let dcor = m.rounds.last().and_then(|r| r.leakage).map(|l| l.dcor).expect("leakage recorded");
            (dcor, m.final_test_accuracy())
        };
        let (d0, a0) = run(0.0);
        let (d1, a1) = run(0.1);
        dcor_gaps.push(d0 - d1);
        acc_drops.push(a0 - a1);
    }
    let (gap, drop) = (median(dcor_gaps.clone()), median(acc_drops.clone()));
    let pass = gap >= 0.05 && drop <= 0.03;
    verdict(pass, format!("median DCOR gap {gap:.4} {dcor_gaps:.3?}, accuracy drop {drop:.4} {acc_drops:.3?}"))
}

fn ushaped_confidentiality() -> Verdict {
    let (train, test) = blobs(1200, 400, 4, 8, 3.0, 6);
    let spec = ModelSpec::mlp_small(8, 4).unwrap();
    let plan = iid_partition(train.len(), 4, 0).unwrap();
    let work = Workload { train: &train, test: &test, plan: &plan };
    let cfg = TrainConfig { rounds: 10, seed: 2, ..TrainConfig::default() };
    let u = run_sl_ushaped(&spec, 1, 3, work, &cfg).unwrap();
    let sl = run_sl(&spec, 1, work, &cfg).unwrap();
    let labels = u.ledger.count_type(MsgType::Labels);
    let gap = (u.final_test_accuracy() - sl.final_test_accuracy()).abs();
    let pass = labels.payload_bytes == 0 && labels.messages == 0 && gap <= 0.02;
    verdict(
        pass,
        format!(
            "LABELS {} B; accuracy U-shaped {:.4} vs SL {:.4}",
            labels.payload_bytes,
            u.final_test_accuracy(),
            sl.final_test_accuracy()
        ),
    )
}

fn transport_differential() -> Verdict {
    let (train, test) = blobs(600, 200, 4, 8, 3.0, 8);
    let spec = ModelSpec::mlp_small(8, 4).unwrap();
    let plan = iid_partition(train.len(), 3, 0).unwrap();
    let work = Workload { train: &train, test: &test, plan: &plan };
    let cfg = TrainConfig { rounds: 3, seed: 4, ..TrainConfig::default() };
    let tcp = TrainConfig { transport: TransportMode::Tcp { host: "127.0.0.1".into() }, ..cfg.clone() };
    let a = run_sl(&spec, 1, work, &cfg).unwrap();
    let b = run_sl(&spec, 1, work, &tcp).unwrap();
    let csv = |m: &RunMetrics| {
        let mut out = Vec::new();
        write_metrics_csv(m, false, &mut out).unwrap();
        out
    };
    let same_csv = csv(&a) == csv(&b);
    let same_ledger = a.ledger == b.ledger;
    let total = a.ledger.total();
    verdict(
        same_csv && same_ledger,
        format!(
            "CSV identical: {same_csv}, ledger identical: {same_ledger} ({} messages, {} payload bytes)",
            total.messages, total.payload_bytes
        ),
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("centralized equivalence", centralized_equivalence),
        ("communication volume exactness", table_exactness),
        ("gradient suite", gradient_suite),
        ("privacy mechanisms", privacy_suite),
        ("IID convergence parity", iid_parity),
        ("non-IID degradation", non_iid_degradation),
        ("NoPeek effect", nopeek_effect),
        ("U-shaped label confidentiality", ushaped_confidentiality),
        ("transport differential", transport_differential),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let v = check();
        if !v.pass {
            failed += 1;
        }
        println!("{} criterion {}: {name}: {}", if v.pass { "PASS" } else { "FAIL" }, i + 1, v.detail);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
