//! Binary64 reference implementations and central-difference checks shared
//! by the gradient tests and the acceptance suite.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splitfed::autodiff::{cross_entropy_loss, LayerSpec, LayerStack, Tensor};
use splitfed::privacy::distance_correlation_grad;

const STEP: f64 = 1e-6;

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` at every coordinate of `x`.
pub fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + STEP;
            let up = f(&p);
            p[i] = orig - STEP;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

fn uniform(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0f32) as f64).collect()
}

/// Forward pass of one layer in binary64 on a flat batch.
pub fn reference_forward(spec: &LayerSpec, shape: &[usize], x: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
    let b = shape[0];
    match *spec {
        LayerSpec::Dense { inputs, units } => {
            let mut y = vec![0.0; b * units];
            for i in 0..b {
                for o in 0..units {
                    y[i * units + o] = bias[o] + (0..inputs).map(|j| w[o * inputs + j] * x[i * inputs + j]).sum::<f64>();
                }
            }
            y
        }
        LayerSpec::Conv2d { in_channels: cin, out_channels: cout, kernel: k } => {
            let (h, wd) = (shape[2], shape[3]);
            let (oh, ow) = (h - k + 1, wd - k + 1);
            let mut y = vec![0.0; b * cout * oh * ow];
            for n in 0..b {
                for co in 0..cout {
                    for r in 0..oh {
                        for c in 0..ow {
                            let mut acc = bias[co];
                            for ci in 0..cin {
                                for kr in 0..k {
                                    for kc in 0..k {
                                        acc += w[((co * cin + ci) * k + kr) * k + kc]
                                            * x[((n * cin + ci) * h + r + kr) * wd + c + kc];
                                    }
                                }
                            }
                            y[((n * cout + co) * oh + r) * ow + c] = acc;
                        }
                    }
                }
            }
            y
        }
        LayerSpec::MaxPool2d { size, stride } => {
            let (ch, h, wd) = (shape[1], shape[2], shape[3]);
            let (oh, ow) = ((h - size) / stride + 1, (wd - size) / stride + 1);
            let mut y = Vec::with_capacity(b * ch * oh * ow);
            for n in 0..b {
                for c in 0..ch {
                    for r in 0..oh {
                        for s in 0..ow {
                            let mut m = f64::NEG_INFINITY;
                            for dr in 0..size {
                                for ds in 0..size {
                                    m = m.max(x[((n * ch + c) * h + r * stride + dr) * wd + s * stride + ds]);
                                }
                            }
                            y.push(m);
                        }
                    }
                }
            }
            y
        }
        LayerSpec::Relu => x.iter().map(|v| v.max(0.0)).collect(),
        LayerSpec::Flatten | LayerSpec::SoftmaxXentHead => x.to_vec(),
    }
}

/// Mean softmax cross-entropy in binary64.
pub fn reference_xent(logits: &[f64], labels: &[usize], classes: usize) -> f64 {
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row = &logits[i * classes..(i + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            z.ln() + max - row[y]
        })
        .sum();
    total / labels.len() as f64
}

/// Distance correlation by explicit double centering, binary64 throughout.
pub fn reference_dcor(x: &[f64], z: &[f64], n: usize) -> f64 {
    let centred = |v: &[f64]| {
        let d = v.len() / n;
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                m[i * n + j] = (0..d).map(|k| (v[i * d + k] - v[j * d + k]).powi(2)).sum::<f64>().sqrt();
            }
        }
        let row: Vec<f64> = (0..n).map(|i| (0..n).map(|j| m[i * n + j]).sum::<f64>() / n as f64).collect();
        let all = row.iter().sum::<f64>() / n as f64;
        for i in 0..n {
            for j in 0..n {
                m[i * n + j] += all - row[i] - row[j];
            }
        }
        m
    };
    let (a, b) = (centred(x), centred(z));
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).sum::<f64>();
    let denom = (dot(&a, &a) * dot(&b, &b)).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        (dot(&a, &b) / denom).max(0.0).sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct KindReport {
    pub kind: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

impl KindReport {
    fn new(kind: &'static str) -> Self {
        Self { kind, instances: 0, max_rel_err: 0.0 }
    }

    fn record(&mut self, err: f64) {
        self.instances += 1;
        self.max_rel_err = self.max_rel_err.max(err);
    }
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Checks input and parameter gradients of a single-layer stack against
/// central differences of the binary64 reference, with the objective
/// `sum(r * layer(x))` for a random `r`. Returns the worse relative error.
fn check_layer(spec: LayerSpec, sample: Vec<usize>, batch: usize, r: &mut ChaCha8Rng) -> f64 {
    let mut stack = LayerStack::from_specs(sample.clone(), std::slice::from_ref(&spec), r.random(), 0).unwrap();
    let flat: Vec<f32> = (0..stack.param_count()).map(|_| r.random_range(-1.0..1.0f32)).collect();
    stack.set_flat_params(&flat).unwrap();
    let shape: Vec<usize> = std::iter::once(batch).chain(sample.iter().copied()).collect();
    let x = uniform(r, shape.iter().product());
    let xt = Tensor::new(shape.clone(), x.iter().map(|&v| v as f32).collect()).unwrap();
    let (y, tape) = stack.forward(&xt, true).unwrap();
    let weights = uniform(r, y.len());
    let gt = Tensor::new(y.shape().to_vec(), weights.iter().map(|&v| v as f32).collect()).unwrap();
    let (pg, dx) = stack.backward(&tape, &gt).unwrap();

    let theta = to_f64(&flat);
    let wlen = spec.param_shapes().map(|(w, _)| w.iter().product::<usize>()).unwrap_or(0);
    let objective = |x: &[f64], theta: &[f64]| {
        let (w, b) = theta.split_at(wlen);
        reference_forward(&spec, &shape, x, w, b).iter().zip(&weights).map(|(a, c)| a * c).sum::<f64>()
    };
    let fd_x = numeric_grad(&x, |x| objective(x, &theta));
    let mut err = rel_err(&to_f64(dx.data()), &fd_x);
    if !theta.is_empty() {
        let fd_theta = numeric_grad(&theta, |t| objective(&x, t));
        err = err.max(rel_err(&to_f64(&pg.flatten()), &fd_theta));
    }
    err
}

fn check_xent(r: &mut ChaCha8Rng) -> f64 {
    let b = r.random_range(1..6);
    let c = r.random_range(2..8);
    let logits = uniform(r, b * c).into_iter().map(|v| 3.0 * v).collect::<Vec<_>>();
    let logits: Vec<f64> = logits.iter().map(|&v| v as f32 as f64).collect();
    let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..c)).collect();
    let t = Tensor::new(vec![b, c], logits.iter().map(|&v| v as f32).collect()).unwrap();
    let (loss, grad) = cross_entropy_loss(&t, &labels).unwrap();
    let fd = numeric_grad(&logits, |l| reference_xent(l, &labels, c));
    let value_err = (loss - reference_xent(&logits, &labels, c)).abs() / loss.abs().max(1e-12);
    rel_err(&to_f64(grad.data()), &fd).max(value_err)
}

fn check_dcor(r: &mut ChaCha8Rng) -> f64 {
    let n = r.random_range(4..12);
    let (p, q) = (r.random_range(1..5), r.random_range(1..5));
    let x: Vec<f64> = uniform(r, n * p);
    let z: Vec<f64> = uniform(r, n * q);
    let xt = Tensor::new(vec![n, p], x.iter().map(|&v| v as f32).collect()).unwrap();
    let zt = Tensor::new(vec![n, q], z.iter().map(|&v| v as f32).collect()).unwrap();
    let (value, grad) = distance_correlation_grad(&xt, &zt).unwrap();
    let fd = numeric_grad(&z, |z| reference_dcor(&x, z, n));
    let value_err = (value - reference_dcor(&x, &z, n)).abs();
    rel_err(&to_f64(grad.data()), &fd).max(value_err)
}

/// Runs `instances` random checks for every layer kind, the loss head and
/// the distance correlation penalty.
pub fn gradient_suite(instances: usize, seed: u64) -> Vec<KindReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();

    let mut rep = KindReport::new("dense");
    for _ in 0..instances {
        let (i, u) = (r.random_range(1..8), r.random_range(1..8));
        let b = r.random_range(1..5);
        rep.record(check_layer(LayerSpec::Dense { inputs: i, units: u }, vec![i], b, &mut r));
    }
    reports.push(rep);

    let mut rep = KindReport::new("conv2d");
    for _ in 0..instances {
        let (cin, cout, k) = (r.random_range(1..4), r.random_range(1..4), r.random_range(1..4));
        let (h, w) = (k + r.random_range(0..4), k + r.random_range(0..4));
        let b = r.random_range(1..3);
        let spec = LayerSpec::Conv2d { in_channels: cin, out_channels: cout, kernel: k };
        rep.record(check_layer(spec, vec![cin, h, w], b, &mut r));
    }
    reports.push(rep);

    let mut rep = KindReport::new("relu");
    for _ in 0..instances {
        let d = r.random_range(1..20);
        rep.record(check_layer(LayerSpec::Relu, vec![d], r.random_range(1..4), &mut r));
    }
    reports.push(rep);

    let mut rep = KindReport::new("maxpool2d");
    for _ in 0..instances {
        let (size, stride) = (r.random_range(1..4), r.random_range(1..4));
        let c = r.random_range(1..3);
        let (h, w) = (size + r.random_range(0..5), size + r.random_range(0..5));
        rep.record(check_layer(LayerSpec::MaxPool2d { size, stride }, vec![c, h, w], r.random_range(1..3), &mut r));
    }
    reports.push(rep);

    let mut rep = KindReport::new("flatten");
    for _ in 0..instances {
        let shape = vec![r.random_range(1..3), r.random_range(1..5), r.random_range(1..5)];
        rep.record(check_layer(LayerSpec::Flatten, shape, r.random_range(1..3), &mut r));
    }
    reports.push(rep);

    let mut rep = KindReport::new("softmax_xent");
    for _ in 0..instances {
        rep.record(check_xent(&mut r));
    }
    reports.push(rep);

    let mut rep = KindReport::new("dcor");
    for _ in 0..instances {
        rep.record(check_dcor(&mut r));
    }
    reports.push(rep);
    reports
}
