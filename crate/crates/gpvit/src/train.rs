//! Desk-scale training: Adam, cross-entropy, seeded minibatch shuffling, and
//! per-epoch accuracy logging. Demonstrates trainability only; no
//! augmentation, schedules, or regularization.

use crate::data::SyntheticDataset;
use crate::error::{Error, Result};
use crate::model::{image_token_map, Model};
use crate::nn::{ParamSet, Pass};
use crate::rng::Prng;
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop once train accuracy reaches this level.
    pub stop_at_accuracy: Option<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct EpochStat {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

pub fn stats_csv(stats: &[EpochStat]) -> String {
    let mut out = String::from("epoch,loss,accuracy\n");
    for s in stats {
        out.push_str(&format!("{},{:.6},{:.6}\n", s.epoch, s.loss, s.accuracy));
    }
    out
}

/// Negative log-likelihood of `label` under row-softmax of `[1, K]` logits.
pub fn cross_entropy<E: Scalar>(logits: &Tensor<E>, label: usize) -> Tensor<E> {
    let k = logits.cols();
    assert!(label < k, "label {label} vs {k} classes");
    let mut onehot = vec![0.0; k];
    onehot[label] = 1.0;
    let onehot = Tensor::from_f64(&onehot, vec![1, k]);
    logits.log_softmax_rows().mul(&onehot).sum_all().scale(-1.0)
}

pub struct Adam<E: Scalar> {
    lr: f64,
    t: u64,
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
}

impl<E: Scalar> Adam<E> {
    pub fn new(params: &ParamSet<E>, lr: f64) -> Self {
        let m = params.iter().map(|p| vec![E::zero(); p.numel()]).collect();
        let v = params.iter().map(|p| vec![E::zero(); p.numel()]).collect();
        Adam { lr, t: 0, m, v }
    }

    /// One update from per-parameter gradients (same order as the set).
    pub fn step(&mut self, params: &ParamSet<E>, grads: &[Vec<E>]) {
        assert_eq!(grads.len(), params.len());
        self.t += 1;
        let bias1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bias2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let step = s::<E>(self.lr / bias1);
        let (b1, b2) = (s::<E>(ADAM_BETA1), s::<E>(ADAM_BETA2));
        let (one_m_b1, one_m_b2) = (s::<E>(1.0 - ADAM_BETA1), s::<E>(1.0 - ADAM_BETA2));
        let (inv_bias2, eps) = (s::<E>(1.0 / bias2), s::<E>(ADAM_EPS));
        for ((p, g), (m, v)) in params
            .iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let mut i = 0;
            p.update(|w| {
                let grad = g[i];
                m[i] = b1 * m[i] + one_m_b1 * grad;
                v[i] = b2 * v[i] + one_m_b2 * grad * grad;
                *w = *w - step * m[i] / ((v[i] * inv_bias2).sqrt() + eps);
                i += 1;
            });
        }
    }
}

/// Overfit `model` on `data`; returns one stat row per completed epoch.
pub fn train<E: Scalar>(
    model: &Model<E>,
    data: &SyntheticDataset,
    tc: &TrainConfig,
) -> Result<Vec<EpochStat>> {
    if data.is_empty() {
        return Err(Error::Usage("empty dataset".into()));
    }
    let mut shuffle_rng = Prng::seed_from(tc.seed);
    let mut drop_rng = Prng::seed_from(tc.seed ^ 0x5eed_d60f);
    let mut adam = Adam::new(&model.params, tc.lr);
    let mut stats = Vec::new();
    let n = data.len();
    for epoch in 0..tc.epochs {
        let order = shuffle_rng.permutation(n);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(tc.batch_size.max(1)) {
            let pass = Pass::new(true);
            let mut batch_loss: Option<Tensor<E>> = None;
            for &idx in batch {
                let sample = &data.samples[idx];
                let img = image_token_map(&sample.pixels, data.size, data.size);
                let logits = model.forward_train(&pass, &img, &mut drop_rng)?;
                if argmax(logits.data()) == sample.label {
                    correct += 1;
                }
                let loss = cross_entropy(&logits, sample.label);
                batch_loss = Some(match batch_loss {
                    Some(acc) => acc.add(&loss),
                    None => loss,
                });
            }
            let loss = batch_loss.expect("non-empty batch").scale(1.0 / batch.len() as f64);
            let loss_val = loss.item().to_f64().unwrap();
            if !loss_val.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    last_good: epoch as isize - 1,
                });
            }
            loss_sum += loss_val * batch.len() as f64;
            let store = loss.backward();
            let grads: Vec<Vec<E>> =
                model.params.iter().map(|p| pass.grad_of(p, &store)).collect();
            adam.step(&model.params, &grads);
        }
        let stat = EpochStat { epoch, loss: loss_sum / n as f64, accuracy: correct as f64 / n as f64 };
        stats.push(stat);
        if let Some(target) = tc.stop_at_accuracy {
            if stat.accuracy >= target {
                break;
            }
        }
    }
    Ok(stats)
}

pub fn argmax<E: Scalar>(row: &[E]) -> usize {
    let mut best = 0;
    for i in 1..row.len() {
        if row[i] > row[best] {
            best = i;
        }
    }
    best
}
