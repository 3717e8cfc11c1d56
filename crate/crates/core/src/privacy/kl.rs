use serde::Serialize;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

use super::distance_correlation;

pub const DEFAULT_BINS: usize = 32;

/// Pseudo-count added to every histogram bin so the smashed distribution
/// has full support.
const PSEUDO_COUNT: f64 = 0.5;

/// `D_KL(p || q)` in nats. Both inputs must be distributions over the same
/// support and `q` must be positive wherever `p` is.
pub fn kl_leakage(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::InvalidArgument(format!("distributions of length {} and {}", p.len(), q.len())));
    }
    for (name, d) in [("X", p), ("Z", q)] {
        let total: f64 = d.iter().sum();
        if d.iter().any(|&v| !(v >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("{name} is not a probability distribution")));
        }
    }
    let (mut direct, mut cross, mut entropy) = (0f64, 0f64, 0f64);
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::SupportViolation(i));
        }
        direct += pi * (pi / qi).ln();
        cross -= pi * qi.ln();
        entropy -= pi * pi.ln();
    }
    let identity_gap = (direct - (cross - entropy)).abs();
    debug_assert!(identity_gap <= 1e-12 * (1.0 + cross.abs()), "cross-entropy identity off by {identity_gap}");
    Ok(direct.max(0.0))
}

fn histogram(values: impl Iterator<Item = f64>, lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let mut counts = vec![PSEUDO_COUNT; bins];
    let width = hi - lo;
    for v in values {
        let idx = if width > 0.0 { (((v - lo) / width) * bins as f64) as usize } else { 0 };
        counts[idx.min(bins - 1)] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    counts.into_iter().map(|c| c / total).collect()
}

/// KL between equal-width histograms of two samples, built over the range
/// spanned by both.
pub fn histogram_kl(x: &[f64], z: &[f64], bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 bins, got {bins}")));
    }
    if x.is_empty() || z.is_empty() {
        return Err(Error::InvalidArgument("empty sample".into()));
    }
    let lo = x.iter().chain(z).copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().chain(z).copied().fold(f64::NEG_INFINITY, f64::max);
    let p = histogram(x.iter().copied(), lo, hi, bins);
    let q = histogram(z.iter().copied(), lo, hi, bins);
    kl_leakage(&p, &q)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LeakageReport {
    pub dcor: f64,
    pub kl_nats: f64,
}

/// DCOR between raw and smashed rows plus histogram KL. With equal widths
/// the KL is averaged over per-dimension histograms; otherwise all values
/// of each side are pooled into one histogram.
pub fn smashed_leakage_report(raw: &Tensor, smashed: &Tensor, bins: usize) -> Result<LeakageReport> {
    if raw.batch() == 0 || smashed.batch() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let dcor = distance_correlation(raw, smashed)?;
    let to64 = |t: &Tensor| t.data().iter().map(|&v| f64::from(v)).collect::<Vec<_>>();
    let (xs, zs) = (to64(raw), to64(smashed));
    let kl_nats = if raw.row_len() == smashed.row_len() {
        let w = raw.row_len();
        let mut total = 0.0;
        for j in 0..w {
            let col = |v: &[f64]| v.iter().skip(j).step_by(w).copied().collect::<Vec<_>>();
            total += histogram_kl(&col(&xs), &col(&zs), bins)?;
        }
        total / w as f64
    } else {
        histogram_kl(&xs, &zs, bins)?
    };
    Ok(LeakageReport { dcor, kl_nats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::privacy::laplace_smash;
    use crate::rng;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn kl_examples() {
        assert_eq!(kl_leakage(&[0.25, 0.75], &[0.25, 0.75]).unwrap(), 0.0);
        let d = kl_leakage(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((d - expected).abs() < 1e-15);
        assert!((d - 0.5108).abs() < 1e-4);
        assert!((kl_leakage(&[0.9, 0.1], &[0.5, 0.5]).unwrap() - d).abs() > 1e-3);
    }

    #[test]
    fn support_violation_is_an_error() {
        assert!(matches!(kl_leakage(&[0.5, 0.5], &[1.0, 0.0]), Err(Error::SupportViolation(1))));
        assert!(kl_leakage(&[0.0, 1.0], &[0.5, 0.5]).is_ok());
        assert!(kl_leakage(&[0.5, 0.6], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn report_on_identical_and_noised_batches() {
        let mut r = rng::stream(9, &[]);
        let raw = Tensor::new(vec![200, 4], (0..800).map(|_| StandardNormal.sample(&mut r)).collect()).unwrap();
        let same = smashed_leakage_report(&raw, &raw, DEFAULT_BINS).unwrap();
        assert!((same.dcor - 1.0).abs() < 1e-12);
        assert_eq!(same.kl_nats, 0.0);
        assert_eq!(same, smashed_leakage_report(&raw, &raw, DEFAULT_BINS).unwrap());

        let strong = laplace_smash(&raw, 0.1, None, &mut rng::stream(1, &[])).unwrap();
        let weak = laplace_smash(&raw, 100.0, None, &mut rng::stream(1, &[])).unwrap();
        let strong = smashed_leakage_report(&raw, &strong, DEFAULT_BINS).unwrap();
        let weak = smashed_leakage_report(&raw, &weak, DEFAULT_BINS).unwrap();
        assert!(strong.dcor < weak.dcor, "{strong:?} vs {weak:?}");
        assert!(smashed_leakage_report(&raw, &raw, 1).is_err());
    }

    fn distribution(len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(1e-3f64..1.0, len).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn kl_is_non_negative_and_matches_identity((p, q) in (2usize..20).prop_flat_map(|n| (distribution(n), distribution(n)))) {
            let d = kl_leakage(&p, &q).unwrap();
            prop_assert!(d >= 0.0);
            let cross: f64 = -p.iter().zip(&q).map(|(a, b)| a * b.ln()).sum::<f64>();
            let entropy: f64 = -p.iter().map(|a| a * a.ln()).sum::<f64>();
            prop_assert!((d - (cross - entropy)).abs() < 1e-12);
        }
    }
}
