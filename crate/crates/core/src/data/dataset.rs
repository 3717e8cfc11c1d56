use std::ops::Range;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng;

/// Labelled samples. Images are stored per sample as `[channels, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f32>,
    sample_shape: Vec<usize>,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f32>, sample_shape: Vec<usize>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let width: usize = sample_shape.iter().product();
        if labels.is_empty() {
            return Err(Error::InvalidArgument("a dataset needs at least one sample".into()));
        }
        if features.len() != width * labels.len() {
            return Err(Error::Shape(format!(
                "{} feature values for {} samples of shape {sample_shape:?}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        Ok(Self { features, sample_shape, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let w = self.sample_len();
        &self.features[i * w..(i + 1) * w]
    }

    /// Feature tensor `[batch, sample_shape...]` and labels for the given rows.
    pub fn batch(&self, rows: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(rows.len() * self.sample_len());
        for &r in rows {
            data.extend_from_slice(self.sample(r));
        }
        let mut shape = vec![rows.len()];
        shape.extend_from_slice(&self.sample_shape);
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        (Tensor::new(shape, data).expect("batch shape"), labels)
    }

    pub fn subset(&self, rows: &[usize]) -> Result<Dataset> {
        let (x, y) = self.batch(rows);
        Dataset::new(x.into_data(), self.sample_shape.clone(), y, self.classes)
    }

    /// Columns `range` of a tabular dataset.
    pub fn slice_features(&self, range: Range<usize>) -> Result<Dataset> {
        let d = match self.sample_shape[..] {
            [d] => d,
            _ => return Err(Error::Shape("feature slicing needs rank-1 samples".into())),
        };
        if range.start >= range.end || range.end > d {
            return Err(Error::InvalidArgument(format!("feature range {range:?} outside [0, {d})")));
        }
        let mut data = Vec::with_capacity(self.len() * range.len());
        for i in 0..self.len() {
            data.extend_from_slice(&self.sample(i)[range.clone()]);
        }
        Dataset::new(data, vec![range.len()], self.labels.clone(), self.classes)
    }

    /// First `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> Result<(Dataset, Dataset)> {
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        Ok((self.subset(&head)?, self.subset(&tail)?))
    }

    pub fn reshape_samples(self, shape: Vec<usize>) -> Result<Dataset> {
        if shape.iter().product::<usize>() != self.sample_len() {
            return Err(Error::Shape(format!("cannot view {:?} samples as {shape:?}", self.sample_shape)));
        }
        Dataset::new(self.features, shape, self.labels, self.classes)
    }
}

/// Gaussian class clusters with unit variance. Class centres sit at
/// `separation` along distinct axes when `dim >= classes`, otherwise along
/// seeded random unit directions. Labels are balanced and shuffled.
pub fn synth_blobs(n: usize, classes: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidArgument("blobs need at least two classes".into()));
    }
    if n == 0 || dim == 0 {
        return Err(Error::InvalidArgument("blobs need n >= 1 and dim >= 1".into()));
    }
    let mut r = rng::stream(seed, &[rng::STREAM_DATA]);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            if dim >= classes {
                (0..dim).map(|j| if j == c { separation } else { 0.0 }).collect()
            } else {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| separation * x / norm).collect()
            }
        })
        .collect();
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut r);
    let mut features = Vec::with_capacity(n * dim);
    for &y in &labels {
        for c in &centers[y] {
            let z: f64 = StandardNormal.sample(&mut r);
            features.push((c + z) as f32);
        }
    }
    Dataset::new(features, vec![dim], labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_labels_and_shapes() {
        assert!(matches!(Dataset::new(vec![0.0; 4], vec![2], vec![0, 2], 2), Err(Error::LabelOutOfRange { .. })));
        assert!(Dataset::new(vec![0.0; 3], vec![2], vec![0, 1], 2).is_err());
        assert!(Dataset::new(vec![], vec![2], vec![], 2).is_err());
    }

    #[test]
    fn blobs_are_deterministic_and_balanced() {
        let a = synth_blobs(100, 4, 8, 3.0, 5).unwrap();
        let b = synth_blobs(100, 4, 8, 3.0, 5).unwrap();
        assert!(a.features().iter().zip(b.features()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.labels(), b.labels());
        for c in 0..4 {
            assert_eq!(a.labels().iter().filter(|&&y| y == c).count(), 25);
        }
        assert_ne!(synth_blobs(100, 4, 8, 3.0, 6).unwrap(), a);
        assert!(synth_blobs(10, 1, 3, 1.0, 0).is_err());
    }

    #[test]
    fn feature_slices_reconstruct_samples() {
        let d = synth_blobs(10, 2, 7, 1.0, 1).unwrap();
        let left = d.slice_features(0..4).unwrap();
        let right = d.slice_features(4..7).unwrap();
        for i in 0..d.len() {
            let mut joined = left.sample(i).to_vec();
            joined.extend_from_slice(right.sample(i));
            assert_eq!(joined, d.sample(i));
        }
        assert!(d.slice_features(3..9).is_err());
    }
}
