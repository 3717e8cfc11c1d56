use crate::autodiff::{cross_entropy_loss, Tensor};
use crate::error::{Error, Result};

/// NoPeek batches above this size are rejected; the estimator is O(n^2).
pub const MAX_NOPEEK_BATCH: usize = 256;

fn rows_f64(t: &Tensor) -> (usize, usize, Vec<f64>) {
    (t.batch(), t.row_len(), t.data().iter().map(|&v| f64::from(v)).collect())
}

fn pairwise(n: usize, w: usize, x: &[f64]) -> Vec<f64> {
    let mut d = vec![0f64; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = x[i * w..(i + 1) * w].iter().zip(&x[j * w..(j + 1) * w]).map(|(a, b)| (a - b) * (a - b)).sum();
            let v = s.sqrt();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

fn double_center(n: usize, d: &[f64]) -> Vec<f64> {
    let row: Vec<f64> = (0..n).map(|i| d[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64).collect();
    let grand = row.iter().sum::<f64>() / n as f64;
    let mut c = vec![0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            // distance matrices are symmetric, so column means equal row means
            c[i * n + j] = d[i * n + j] - row[i] - row[j] + grand;
        }
    }
    c
}

struct Parts {
    n: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    dist_z: Vec<f64>,
    v_xz: f64,
    v_xx: f64,
    v_zz: f64,
}

impl Parts {
    fn new(x: &Tensor, z: &Tensor) -> Result<(Self, Vec<f64>, usize)> {
        let (n, p, xs) = rows_f64(x);
        let (nz, q, zs) = rows_f64(z);
        if n != nz {
            return Err(Error::Shape(format!("{n} raw rows against {nz} smashed rows")));
        }
        if n < 2 {
            return Err(Error::InvalidArgument(format!("distance correlation needs n >= 2, got {n}")));
        }
        let a = double_center(n, &pairwise(n, p, &xs));
        let dist_z = pairwise(n, q, &zs);
        let b = double_center(n, &dist_z);
        let nn = (n * n) as f64;
        let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / nn;
        let parts = Parts { n, v_xz: dot(&a, &b), v_xx: dot(&a, &a), v_zz: dot(&b, &b), a, b, dist_z };
        Ok((parts, zs, q))
    }

    /// Squared distance correlation; zero when either side is constant.
    fn dcor2(&self) -> f64 {
        let denom = (self.v_xx * self.v_zz).sqrt();
        if denom <= f64::MIN_POSITIVE {
            0.0
        } else {
            (self.v_xz / denom).max(0.0)
        }
    }
}

/// Sample distance correlation between the rows of `x` and `z`.
pub fn distance_correlation(x: &Tensor, z: &Tensor) -> Result<f64> {
    let (parts, _, _) = Parts::new(x, z)?;
    Ok(parts.dcor2().sqrt().min(1.0))
}

/// Distance correlation and its gradient with respect to `z`.
pub fn distance_correlation_grad(x: &Tensor, z: &Tensor) -> Result<(f64, Tensor)> {
    let (parts, zs, q) = Parts::new(x, z)?;
    let n = parts.n;
    let r = parts.dcor2();
    let mut grad = vec![0f64; n * q];
    if r > 1e-15 {
        let nn = (n * n) as f64;
        let denom = (parts.v_xx * parts.v_zz).sqrt();
        let outer = 1.0 / (2.0 * r.sqrt());
        // d dcor / d b_ij for the symmetric distance entries
        let g: Vec<f64> = parts
            .a
            .iter()
            .zip(&parts.b)
            .map(|(&a, &b)| outer * (a / (nn * denom) - r * b / (nn * parts.v_zz)))
            .collect();
        for i in 0..n {
            for j in 0..n {
                let dist = parts.dist_z[i * n + j];
                if i == j || dist == 0.0 {
                    continue;
                }
                let coeff = 2.0 * g[i * n + j] / dist;
                for k in 0..q {
                    grad[i * q + k] += coeff * (zs[i * q + k] - zs[j * q + k]);
                }
            }
        }
    }
    let grad = Tensor::new(z.shape().to_vec(), grad.into_iter().map(|v| v as f32).collect())?;
    Ok((r.sqrt().min(1.0), grad))
}

#[derive(Debug, Clone)]
pub struct NoPeekLoss {
    pub loss: f64,
    pub dcor: f64,
    pub cross_entropy: f64,
    /// `alpha1 * d DCOR / d smashed`.
    pub smashed_grad: Tensor,
    /// `alpha2 * d CCE / d logits`.
    pub logits_grad: Tensor,
}

/// `alpha1 * DCOR(raw, smashed) + alpha2 * CCE(labels, logits)`.
pub fn nopeek_loss(
    raw: &Tensor,
    smashed: &Tensor,
    labels: &[usize],
    logits: &Tensor,
    alpha1: f64,
    alpha2: f64,
) -> Result<NoPeekLoss> {
    if raw.batch() != smashed.batch() || raw.batch() != logits.batch() {
        return Err(Error::Shape("raw, smashed and logits batches differ".into()));
    }
    if raw.batch() > MAX_NOPEEK_BATCH {
        return Err(Error::InvalidArgument(format!("NoPeek batch capped at {MAX_NOPEEK_BATCH}")));
    }
    let (cce, mut logits_grad) = cross_entropy_loss(logits, labels)?;
    logits_grad.scale(alpha2 as f32);
    if alpha1 == 0.0 {
        return Ok(NoPeekLoss {
            loss: alpha2 * cce,
            dcor: 0.0,
            cross_entropy: cce,
            smashed_grad: Tensor::zeros(smashed.shape().to_vec()),
            logits_grad,
        });
    }
    let (dcor, mut smashed_grad) = distance_correlation_grad(raw, smashed)?;
    smashed_grad.scale(alpha1 as f32);
    Ok(NoPeekLoss { loss: alpha1 * dcor + alpha2 * cce, dcor, cross_entropy: cce, smashed_grad, logits_grad })
}
