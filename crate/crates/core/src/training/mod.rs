//! Losses, negative sampling, Adam and the two-stage multi-task trainer.

mod evaluate;
mod trainer;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::error::{KredError, Result};
use crate::numerics::{softmax, ParamStore, Tensor};

pub use evaluate::{evaluate, validate, validation_metric_name, EvalSplit};
pub use trainer::{build_model, instances, train_multitask, Instance, LogRecord, TrainOutcome};

/// −log of the positive's probability under softmax(γ · scores).
pub fn ranking_loss(scores: &[f64], positive: usize, gamma: f64) -> Result<f64> {
    if positive >= scores.len() {
        return Err(KredError::Data(format!(
            "positive index {positive} outside {} candidates",
            scores.len()
        )));
    }
    let scaled: Vec<f64> = scores.iter().map(|s| s * gamma).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - scaled[positive])
}

/// Candidate probabilities under softmax(γ · scores).
pub fn ranking_probs(scores: &[f64], gamma: f64) -> Vec<f64> {
    softmax(&scores.iter().map(|s| s * gamma).collect::<Vec<_>>())
}

/// Cross entropy of a probability vector against `label`.
pub fn ce_loss(probs: &[f64], label: usize) -> Result<f64> {
    let p = probs
        .get(label)
        .ok_or_else(|| KredError::Data(format!("label {label} outside {} classes", probs.len())))?;
    Ok(-p.ln())
}

/// `n` distinct items drawn uniformly from `pool`, in pool order.
pub fn sample_negatives(pool: &[usize], n: usize, seed: u64) -> Result<Vec<usize>> {
    if pool.len() < n {
        return Err(KredError::Data(format!(
            "negative pool holds {} items, {n} requested",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, pool.len(), n).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| pool[i]).collect())
}

/// Adam with bias correction over the trainable parameters of a store.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn from_config(store: &ParamStore, cfg: &TrainConfig) -> Self {
        Self::new(store, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Applies the accumulated gradients, then zeroes them.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for id in store.trainable_ids() {
            let i = id.index();
            let grad = store.grad(id).data().to_vec();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let value = store.value_mut(id).data_mut();
            for k in 0..grad.len() {
                let g = grad[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                value[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        store.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    #[test]
    fn ranking_loss_examples() {
        assert!((ranking_loss(&[0.3; 6], 0, 10.0).unwrap() - 6f64.ln()).abs() < 1e-12);
        let scores = [1.0, 0.5, 0.5, 0.5, 0.5, 0.5];
        let p = 10f64.exp() / (10f64.exp() + 5.0 * 5f64.exp());
        assert!((ranking_loss(&scores, 0, 10.0).unwrap() + p.ln()).abs() < 1e-12);
        assert!(ranking_loss(&[100.0, 0.0, 0.0], 0, 10.0).unwrap() < 1e-12);
        assert!(ranking_loss(&scores, 6, 10.0).is_err());
    }

    #[test]
    fn ranking_loss_is_shift_invariant_and_probs_normalise() {
        let s = [0.1, -0.4, 0.9, 0.3, 0.2, -0.7];
        let shifted: Vec<f64> = s.iter().map(|x| x + 3.25).collect();
        let a = ranking_loss(&s, 2, 10.0).unwrap();
        assert!((a - ranking_loss(&shifted, 2, 10.0).unwrap()).abs() < 1e-12);
        assert!((ranking_probs(&s, 10.0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tape_loss_matches_plain_formula() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let s = [0.1, -0.4, 0.9, 0.3, 0.2, -0.7];
        let v = tape.constant(Tensor::vector(s.to_vec()));
        let l = tape.nll_softmax(v, 3, 10.0).unwrap();
        assert!((tape.scalar(l) - ranking_loss(&s, 3, 10.0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ce_loss_examples() {
        assert_eq!(ce_loss(&[0.0, 1.0], 1).unwrap(), 0.0);
        assert!((ce_loss(&[0.25; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!((ce_loss(&[0.7, 0.2, 0.1], 0).unwrap() - 0.356_674_943_938_732_4).abs() < 1e-12);
        assert!(ce_loss(&[0.5, 0.5], 2).is_err());
    }

    #[test]
    fn negative_sampling_rules() {
        let pool: Vec<usize> = (10..15).collect();
        assert_eq!(sample_negatives(&pool, 5, 1).unwrap(), pool);
        assert!(sample_negatives(&pool, 6, 1).is_err());
        let a = sample_negatives(&(0..50).collect::<Vec<_>>(), 5, 9).unwrap();
        assert_eq!(a, sample_negatives(&(0..50).collect::<Vec<_>>(), 5, 9).unwrap());
        let mut distinct = a.clone();
        distinct.dedup();
        assert_eq!(distinct.len(), 5);
    }

    #[test]
    fn negative_sampling_is_uniform() {
        let pool: Vec<usize> = (0..20).collect();
        let draws = 100_000u64;
        let mut counts = [0f64; 20];
        for s in 0..draws {
            for d in sample_negatives(&pool, 5, s).unwrap() {
                counts[d] += 1.0;
            }
        }
        let expect = draws as f64 * 5.0 / 20.0;
        let chi2: f64 = counts.iter().map(|c| (c - expect).powi(2) / expect).sum();
        // 19 degrees of freedom: mean 19, sd ≈ 6.2
        assert!(chi2 < 19.0 + 3.0 * 38f64.sqrt(), "chi2 = {chi2}");
        let p = 0.25;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        assert!(counts.iter().all(|c| (c - expect).abs() < 4.0 * sd));
    }

    fn quad_store(x: f64) -> (ParamStore, crate::numerics::ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(vec![x]), true).unwrap();
        (store, id)
    }

    fn quad_grad(store: &mut ParamStore, id: crate::numerics::ParamId, target: f64) {
        let g = 2.0 * (store.value(id).data()[0] - target);
        store.grad_mut(id).data_mut()[0] = g;
    }

    #[test]
    fn zero_gradient_leaves_parameters_alone() {
        let (mut store, id) = quad_store(0.7);
        let mut adam = Adam::new(&store, 0.1, 0.9, 0.999, 1e-8);
        adam.step(&mut store);
        assert_eq!(store.value(id).data(), &[0.7]);
    }

    #[test]
    fn adam_descends_and_converges() {
        let (mut store, id) = quad_store(1.0);
        let mut adam = Adam::new(&store, 0.001, 0.9, 0.999, 1e-8);
        quad_grad(&mut store, id, 0.0);
        adam.step(&mut store);
        assert!(store.value(id).data()[0] < 1.0);
        assert_eq!(store.grad(id).data(), &[0.0]);

        let (mut store, id) = quad_store(4.0);
        let mut adam = Adam::new(&store, 0.05, 0.9, 0.999, 1e-8);
        for _ in 0..1000 {
            quad_grad(&mut store, id, -1.5);
            adam.step(&mut store);
        }
        assert!((store.value(id).data()[0] + 1.5).abs() < 1e-3);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = ParamStore::new();
        let id = store.add("frozen", Tensor::vector(vec![1.0]), false).unwrap();
        store.grad_mut(id).data_mut()[0] = 5.0;
        let mut adam = Adam::new(&store, 0.1, 0.9, 0.999, 1e-8);
        adam.step(&mut store);
        assert_eq!(store.value(id).data(), &[1.0]);
    }
}
