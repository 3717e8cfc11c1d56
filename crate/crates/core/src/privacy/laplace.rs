use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Per-unit activation range over a batch or a calibration pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SmashBounds {
    pub max: Vec<f32>,
    pub min: Vec<f32>,
}

impl SmashBounds {
    pub fn from_batch(a: &Tensor) -> Result<Self> {
        let mut b = Self { max: vec![f32::NEG_INFINITY; a.row_len()], min: vec![f32::INFINITY; a.row_len()] };
        b.absorb(a)?;
        Ok(b)
    }

    /// Widens the bounds to cover `a`.
    pub fn absorb(&mut self, a: &Tensor) -> Result<()> {
        if a.row_len() != self.max.len() || a.batch() == 0 {
            return Err(Error::Shape(format!("batch of {} units, bounds cover {}", a.row_len(), self.max.len())));
        }
        for r in 0..a.batch() {
            for (i, &v) in a.row(r).iter().enumerate() {
                self.max[i] = self.max[i].max(v);
                self.min[i] = self.min[i].min(v);
            }
        }
        Ok(())
    }

    /// `max - min` per unit, never negative.
    pub fn intervals(&self) -> Vec<f64> {
        self.max.iter().zip(&self.min).map(|(&hi, &lo)| (f64::from(hi) - f64::from(lo)).max(0.0)).collect()
    }
}

/// Adds `Laplace(0, dI_i / eps)` to every unit `i` of every row. Units with
/// a zero interval pass through unchanged. Bounds default to the batch.
pub fn laplace_smash(a: &Tensor, eps: f64, bounds: Option<&SmashBounds>, rng: &mut impl Rng) -> Result<Tensor> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("Laplace budget must be positive, got {eps}")));
    }
    let owned;
    let bounds = match bounds {
        Some(b) => b,
        None => {
            owned = SmashBounds::from_batch(a)?;
            &owned
        }
    };
    let scales: Vec<f64> = bounds.intervals().into_iter().map(|d| d / eps).collect();
    if scales.len() != a.row_len() {
        return Err(Error::Shape(format!("batch of {} units, bounds cover {}", a.row_len(), scales.len())));
    }
    let mut out = a.clone();
    let w = scales.len();
    for (j, v) in out.data_mut().iter_mut().enumerate() {
        let b = scales[j % w];
        if b > 0.0 {
            let e: f64 = Exp1.sample(rng);
            let signed = if rng.random::<bool>() { e } else { -e };
            *v = (f64::from(*v) + b * signed) as f32;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn constant_unit_is_untouched() {
        let a = Tensor::new(vec![3, 2], vec![1.0, 0.0, 1.0, 5.0, 1.0, -2.0]).unwrap();
        let mut r = rng::stream(1, &[]);
        let out = laplace_smash(&a, 0.5, None, &mut r).unwrap();
        for row in 0..3 {
            assert_eq!(out.row(row)[0], 1.0);
        }
        assert_ne!(out.row(0)[1], 0.0);
    }

    #[test]
    fn huge_budget_barely_perturbs() {
        let mut r = rng::stream(2, &[]);
        let a = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        let mut worst = 0f32;
        for _ in 0..1000 {
            let out = laplace_smash(&a, 1e6, None, &mut r).unwrap();
            worst = worst.max((out.data()[0]).abs()).max((out.data()[1] - 1.0).abs());
        }
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn mean_absolute_deviation_matches_scale() {
        let mut r = rng::stream(3, &[]);
        let a = Tensor::new(vec![2, 1], vec![0.0, 2.0]).unwrap();
        let bounds = SmashBounds::from_batch(&a).unwrap();
        let zero = Tensor::new(vec![1000, 1], vec![0.0; 1000]).unwrap();
        let mut total = 0f64;
        for _ in 0..1000 {
            let out = laplace_smash(&zero, 4.0, Some(&bounds), &mut r).unwrap();
            total += out.data().iter().map(|&v| f64::from(v).abs()).sum::<f64>();
        }
        let mad = total / 1e6;
        assert!((mad - 0.5).abs() / 0.5 < 0.03, "{mad}");
    }

    #[test]
    fn calibration_bounds_absorb() {
        let mut b = SmashBounds::from_batch(&Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap()).unwrap();
        b.absorb(&Tensor::new(vec![1, 2], vec![-1.0, 3.0]).unwrap()).unwrap();
        assert_eq!(b.intervals(), vec![1.0, 2.0]);
        assert!(b.absorb(&Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap()).is_err());
    }
}
