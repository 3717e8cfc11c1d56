use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Mean softmax cross-entropy over the batch and its gradient at the logits.
///
/// Softmax and the loss are evaluated in binary64; the gradient
/// `(softmax - onehot) / batch` is returned in binary32.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.rank() != 2 || logits.batch() != labels.len() {
        return Err(Error::Shape(format!(
            "logits {:?} do not match {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let b = labels.len();
    let c = logits.row_len();
    let mut grad = Vec::with_capacity(b * c);
    let mut total = 0.0f64;
    let mut probs = vec![0.0f64; c];
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::LabelOutOfRange { label: y, classes: c });
        }
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let mut z = 0.0f64;
        for (p, &v) in probs.iter_mut().zip(row) {
            *p = (v as f64 - max).exp();
            z += *p;
        }
        total += z.ln() - (row[y] as f64 - max);
        for (j, p) in probs.iter().enumerate() {
            let onehot = if j == y { 1.0 } else { 0.0 };
            grad.push(((p / z - onehot) / b as f64) as f32);
        }
    }
    let loss = total / b as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy loss".into()));
    }
    Ok((loss, Tensor::new(vec![b, c], grad)?))
}

/// Index of the largest logit per row, first index on ties.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.batch())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    argmax_rows(logits).iter().zip(labels).filter(|(p, y)| p == y).count()
}
