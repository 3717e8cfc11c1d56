use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

/// Scales `v` in place by `1 / max(1, |v| / s)` and returns the factor
/// applied. Vectors already inside the ball are left untouched.
pub fn clip_slice(v: &mut [f32], s: f64) -> f64 {
    let n = norm(v);
    if n <= s {
        return 1.0;
    }
    let factor = s / n;
    for x in v.iter_mut() {
        *x = (f64::from(*x) * factor) as f32;
    }
    // f32 rounding may leave the norm a hair above s
    while norm(v) > s {
        for x in v.iter_mut() {
            *x = f32::from_bits(x.to_bits().saturating_sub(u32::from(*x != 0.0)));
        }
    }
    factor
}

pub fn clip_by_norm(update: &Tensor, s: f64) -> Result<Tensor> {
    if !(s > 0.0) {
        return Err(Error::InvalidArgument(format!("clipping bound must be positive, got {s}")));
    }
    let mut out = update.clone();
    clip_slice(out.data_mut(), s);
    Ok(out)
}

fn gaussian(sigma: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(format!("noise scale {sigma}: {e}")))
}

/// Clips every per-example gradient to `s`, sums in f64, adds one Gaussian
/// draw of std `sigma * s` per coordinate and divides by the example count.
pub fn dp_local_gradient(per_example: &[Vec<f32>], s: f64, sigma: f64, rng: &mut impl Rng) -> Result<Vec<f32>> {
    let n_k = per_example.len();
    if n_k == 0 {
        return Err(Error::InvalidArgument("no per-example gradients".into()));
    }
    let dim = per_example[0].len();
    let noise = gaussian(sigma * s)?;
    let mut sum = vec![0f64; dim];
    let mut scratch = Vec::with_capacity(dim);
    for g in per_example {
        if g.len() != dim {
            return Err(Error::Shape(format!("per-example gradient of {} values, expected {dim}", g.len())));
        }
        scratch.clear();
        scratch.extend_from_slice(g);
        clip_slice(&mut scratch, s);
        for (acc, &v) in sum.iter_mut().zip(&scratch) {
            *acc += f64::from(v);
        }
    }
    Ok(sum
        .into_iter()
        .map(|v| {
            let z = if sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            ((v + z) / n_k as f64) as f32
        })
        .collect())
}

/// `w + (1/K) * (sum_k clip(dw_k) + N(0, (sigma*s)^2))`.
pub fn dp_fl_server_update(
    w: &[f32],
    updates: &[Vec<f32>],
    s: f64,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f32>> {
    let k = updates.len();
    if k == 0 {
        return Err(Error::InvalidArgument("no client updates".into()));
    }
    let noise = gaussian(sigma * s)?;
    let mut sum = vec![0f64; w.len()];
    for u in updates {
        if u.len() != w.len() {
            return Err(Error::Shape(format!("update of {} values for {} parameters", u.len(), w.len())));
        }
        let mut c = u.clone();
        clip_slice(&mut c, s);
        for (acc, &v) in sum.iter_mut().zip(&c) {
            *acc += f64::from(v);
        }
    }
    Ok(w.iter()
        .zip(sum)
        .map(|(&wi, si)| {
            let z = if sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            (f64::from(wi) + (si + z) / k as f64) as f32
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    #[test]
    fn clip_examples() {
        let t = Tensor::from_vec(vec![3.0, 4.0]);
        assert!(clip_by_norm(&t, 5.0).unwrap().bits_eq(&t));
        let c = clip_by_norm(&Tensor::from_vec(vec![6.0, 8.0]), 5.0).unwrap();
        assert_eq!(c.data(), &[3.0, 4.0]);
        let big = Tensor::from_vec(vec![6.0, 0.0, 8.0]);
        let c = clip_by_norm(&big, 1.0).unwrap();
        assert!((c.l2_norm() - 1.0).abs() < 1e-6);
        assert!((c.data()[0] / c.data()[2] - 0.75).abs() < 1e-6);
        let small = Tensor::from_vec(vec![0.3, -0.4]);
        assert!(clip_by_norm(&small, 1.0).unwrap().bits_eq(&small));
        assert!(clip_by_norm(&small, 0.0).is_err());
    }

    #[test]
    fn local_gradient_without_noise() {
        let mut r = rng::stream(0, &[]);
        let g = dp_local_gradient(&[vec![0.3, 0.4]], 1.0, 0.0, &mut r).unwrap();
        assert_eq!(g, vec![0.3, 0.4]);
        let g = dp_local_gradient(&[vec![6.0, 8.0], vec![0.0, 1.0]], 5.0, 0.0, &mut r).unwrap();
        assert_eq!(g, vec![1.5, 2.5]);
    }

    #[test]
    fn local_gradient_noise_scale() {
        let mut r = rng::stream(11, &[]);
        let grads = vec![vec![0.0f32; 4]; 4];
        let (mut sum, mut sq, mut count) = (0f64, 0f64, 0usize);
        for _ in 0..25_000 {
            for v in dp_local_gradient(&grads, 1.0, 1.0, &mut r).unwrap() {
                let v = f64::from(v);
                sum += v;
                sq += v * v;
                count += 1;
            }
        }
        let mean = sum / count as f64;
        let std = (sq / count as f64 - mean * mean).sqrt();
        assert!((std - 0.25).abs() / 0.25 < 0.02, "std {std}");
    }

    #[test]
    fn server_update_examples() {
        let mut r = rng::stream(0, &[]);
        let w = vec![1.0f32, -1.0];
        assert_eq!(dp_fl_server_update(&w, &[vec![0.5, 0.25]], 1.0, 0.0, &mut r).unwrap(), vec![1.5, -0.75]);
        assert_eq!(dp_fl_server_update(&w, &[vec![0.5, 0.5], vec![-0.5, -0.5]], 1.0, 0.0, &mut r).unwrap(), w);
        let out = dp_fl_server_update(&[0.0, 0.0], &[vec![2.0, 0.0], vec![0.0, 2.0]], 1.0, 0.0, &mut r).unwrap();
        assert_eq!(out, vec![0.5, 0.5]);
    }

    proptest! {
        #[test]
        fn clipped_norm_is_bounded_and_idempotent(v in prop::collection::vec(-1e3f32..1e3, 1..64), s in 1e-3f64..50.0) {
            let t = Tensor::from_vec(v);
            let once = clip_by_norm(&t, s).unwrap();
            prop_assert!(once.l2_norm() <= s);
            let twice = clip_by_norm(&once, s).unwrap();
            prop_assert!(twice.bits_eq(&once));
        }

        #[test]
        fn noiseless_server_update_is_uniform_fedavg(
            w in prop::collection::vec(-1f32..1.0, 3),
            ups in prop::collection::vec(prop::collection::vec(-0.5f32..0.5, 3), 1..6),
        ) {
            let mut r = rng::stream(0, &[]);
            let out = dp_fl_server_update(&w, &ups, 1.0, 0.0, &mut r).unwrap();
            for i in 0..3 {
                let mean: f64 = ups.iter().map(|u| f64::from(u[i])).sum::<f64>() / ups.len() as f64;
                prop_assert!((f64::from(out[i]) - (f64::from(w[i]) + mean)).abs() < 1e-6);
            }
        }
    }
}
