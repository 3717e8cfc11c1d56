//! Client-side training steps shared by the protocols, including the
//! privacy mechanisms applied at the cut.

use rand_chacha::ChaCha8Rng;

use super::{check_finite_loss, TrainConfig};
use crate::autodiff::{count_correct, cross_entropy_loss, LayerStack, ParamGrads, Tape, Tensor};
use crate::data::Dataset;
use crate::error::Result;
use crate::privacy::{
    distance_correlation_grad, dp_local_gradient, laplace_smash, smashed_leakage_report, BoundsMode, LeakageReport,
    SmashBounds,
};
use crate::rng;

/// Factor applied to the cross-entropy gradient wherever the loss is
/// computed, so that NoPeek's `alpha2` weights every cross-entropy term.
pub(crate) fn loss_grad_scale(cfg: &TrainConfig) -> f32 {
    if cfg.privacy.nopeek {
        cfg.privacy.alpha2 as f32
    } else {
        1.0
    }
}

/// Forward pass with the activations a client transmits, kept until the
/// matching gradient comes back.
pub(crate) struct CutForward {
    pub x: Tensor,
    pub activation: Tensor,
    pub sent: Tensor,
    pub tape: Tape,
}

/// Per-turn privacy state of one client portion. Random streams are keyed
/// by (run seed, client, round).
pub(crate) struct PrivateCut {
    laplace_rng: ChaCha8Rng,
    dp_rng: ChaCha8Rng,
    bounds: Option<SmashBounds>,
}

impl PrivateCut {
    pub fn new(cfg: &TrainConfig, client: usize, round: usize, portion: &LayerStack, shard: &Dataset) -> Result<Self> {
        let (c, r) = (client as u64, round as u64);
        let mut bounds = None;
        if cfg.privacy.laplace && cfg.privacy.bounds == BoundsMode::Calibration {
            let rows: Vec<usize> = (0..shard.len()).collect();
            for chunk in rows.chunks(512) {
                let a = portion.forward(&shard.batch(chunk).0, false)?.0;
                match bounds.as_mut() {
                    None => bounds = Some(SmashBounds::from_batch(&a)?),
                    Some(b) => b.absorb(&a)?,
                }
            }
        }
        Ok(Self {
            laplace_rng: rng::stream(cfg.seed, &[rng::STREAM_LAPLACE, c, r]),
            dp_rng: rng::stream(cfg.seed, &[rng::STREAM_DP_SGD, c, r]),
            bounds,
        })
    }

    pub fn forward(&mut self, cfg: &TrainConfig, portion: &LayerStack, x: Tensor) -> Result<CutForward> {
        let (activation, tape) = portion.forward(&x, true)?;
        let sent = if cfg.privacy.laplace {
            laplace_smash(&activation, cfg.privacy.laplace_epsilon, self.bounds.as_ref(), &mut self.laplace_rng)?
        } else {
            activation.clone()
        };
        Ok(CutForward { x, activation, sent, tape })
    }

    /// Applies the returned cut gradient. Additive Laplace noise has an
    /// identity Jacobian, so the gradient flows to the clean activation.
    pub fn backward(&mut self, cfg: &TrainConfig, portion: &mut LayerStack, fwd: CutForward, grad: Tensor) -> Result<()> {
        let mut grad = grad;
        if cfg.privacy.nopeek && cfg.privacy.alpha1 > 0.0 {
            let (_, dcor_grad) = distance_correlation_grad(&fwd.x, &fwd.activation)?;
            let a1 = cfg.privacy.alpha1 as f32;
            for (g, d) in grad.data_mut().iter_mut().zip(dcor_grad.data()) {
                *g += a1 * d;
            }
        }
        if cfg.privacy.dp_sgd {
            let b = fwd.x.batch();
            let mut per_example = Vec::with_capacity(b);
            for i in 0..b {
                let (_, tape) = portion.forward(&fwd.x.select_rows(&[i]), true)?;
                let mut gi = grad.select_rows(&[i]);
                gi.scale(b as f32);
                per_example.push(portion.backward(&tape, &gi)?.0.flatten());
            }
            self.apply_private(cfg, portion, &per_example)
        } else {
            let (grads, _) = portion.backward(&fwd.tape, &grad)?;
            portion.sgd_step(&grads, cfg.lr)
        }
    }

    fn apply_private(&mut self, cfg: &TrainConfig, portion: &mut LayerStack, per_example: &[Vec<f32>]) -> Result<()> {
        let p = &cfg.privacy;
        let g = dp_local_gradient(per_example, p.clip, p.noise_multiplier, &mut self.dp_rng)?;
        portion.sgd_step(&ParamGrads::from_flat(portion, &g)?, cfg.lr)
    }
}

/// One minibatch of plain (or DP-SGD) training on a whole model. Returns
/// the mean batch loss and the number of correct predictions.
pub(crate) fn local_step(
    cfg: &TrainConfig,
    model: &mut LayerStack,
    x: &Tensor,
    y: &[usize],
    dp_rng: &mut ChaCha8Rng,
) -> Result<(f64, usize)> {
    let (logits, tape) = model.forward(x, true)?;
    let (loss, grad) = cross_entropy_loss(&logits, y)?;
    check_finite_loss(loss, "training")?;
    let correct = count_correct(&logits, y);
    if cfg.privacy.dp_sgd {
        let mut per_example = Vec::with_capacity(y.len());
        for (i, &label) in y.iter().enumerate() {
            let (li, ti) = model.forward(&x.select_rows(&[i]), true)?;
            let (_, gi) = cross_entropy_loss(&li, &[label])?;
            per_example.push(model.backward(&ti, &gi)?.0.flatten());
        }
        let p = &cfg.privacy;
        let g = dp_local_gradient(&per_example, p.clip, p.noise_multiplier, dp_rng)?;
        model.sgd_step(&ParamGrads::from_flat(model, &g)?, cfg.lr)?;
    } else {
        let (grads, _) = model.backward(&tape, &grad)?;
        model.sgd_step(&grads, cfg.lr)?;
    }
    Ok((loss, correct))
}

/// Leakage of a client portion on a fixed probe batch, with the same
/// Laplace layer the client applies during training.
pub(crate) fn probe_leakage(cfg: &TrainConfig, portion: &LayerStack, probe: &Tensor, round: usize, bins: usize) -> Result<LeakageReport> {
    smashed_leakage_report(probe, &probe_smashed(cfg, portion, probe, round)?, bins)
}

/// What the server would see for `probe` after `round`. The noise stream is
/// disjoint from every client's training streams.
pub(crate) fn probe_smashed(cfg: &TrainConfig, portion: &LayerStack, probe: &Tensor, round: usize) -> Result<Tensor> {
    let a = portion.forward(probe, false)?.0;
    if cfg.privacy.laplace {
        let mut r = rng::stream(cfg.seed, &[rng::STREAM_LAPLACE, u64::MAX, round as u64]);
        laplace_smash(&a, cfg.privacy.laplace_epsilon, None, &mut r)
    } else {
        Ok(a)
    }
}

/// Rows of client 0's shard used as the leakage probe.
pub(crate) const PROBE_ROWS: usize = 256;

pub(crate) fn probe_batch(shard: &Dataset) -> Tensor {
    let rows: Vec<usize> = (0..shard.len().min(PROBE_ROWS)).collect();
    shard.batch(&rows).0
}
