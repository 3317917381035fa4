//! Loss, weight decay, weight initialization, and the SGD-with-momentum
//! optimizer, plus the deterministic random generator everything draws from.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

/// Identifier of the generator algorithm, recorded in checkpoints so a run
/// can be replayed by any implementation of the same mixer.
pub const RNG_ALGORITHM: &str = "splitmix64";

const GAMMA: u64 = 0x9e3779b97f4a7c15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Counter-based deterministic generator (splitmix64). The n-th output is a
/// pure function of (seed, n), so the stream position alone makes a run
/// replayable from a checkpoint.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    position: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, position: 0 }
    }

    /// Resume a stream at a recorded position.
    pub fn at_position(seed: u64, position: u64) -> Self {
        Rng { seed, position }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn position(&self) -> u64 {
        self.position
    }

    pub fn next_u64(&mut self) -> u64 {
        self.position += 1;
        mix64(self.seed.wrapping_add(self.position.wrapping_mul(GAMMA)))
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Independent child stream tagged by two integers (e.g. epoch and sample
    /// index). Same parent seed and tags always yield the same child.
    pub fn fork(&self, a: u64, b: u64) -> Rng {
        let seed = mix64(self.seed ^ mix64(a.wrapping_mul(0xd1b54a32d192ed03)) ^ mix64(b.wrapping_add(GAMMA)));
        Rng::new(seed)
    }
}

/// He uniform initialization: i.i.d. uniform on +/- sqrt(6 / fan_in).
pub fn he_uniform<T: Elem>(shape: crate::tensor::Shape, fan_in: usize, rng: &mut Rng) -> Result<Tensor<T>> {
    if fan_in == 0 {
        return Err(Error::config("he_uniform: fan_in must be at least 1"));
    }
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = T::from_f64(rng.uniform(-bound, bound));
    }
    Ok(t)
}

/// Mean cross-entropy over a batch of softmax rows and one-hot labels,
/// together with the fused gradient of the loss with respect to the logits
/// that produced the rows: (p - y) / N.
///
/// Probabilities are clipped to [1e-7, 1 - 1e-7] inside the log only; the
/// gradient uses the raw probabilities.
pub fn cross_entropy<T: Elem>(probs: &Tensor<T>, labels: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    if probs.rank() != 2 || labels.rank() != 2 {
        return Err(Error::shape("cross_entropy expects rank-2 probs and labels".to_string()));
    }
    if probs.shape() != labels.shape() {
        return Err(Error::shape(format!(
            "cross_entropy: probs {} vs labels {}",
            probs.shape(),
            labels.shape()
        )));
    }
    let n = probs.dims()[0];
    let k = probs.dims()[1];
    for row in 0..n {
        let r = &labels.data()[row * k..(row + 1) * k];
        let ones = r.iter().filter(|&&v| v == T::ONE).count();
        let zeros = r.iter().filter(|&&v| v == T::ZERO).count();
        if ones != 1 || zeros != k - 1 {
            return Err(Error::Input(format!("label row {row} is not one-hot: {r:?}")));
        }
    }

    let clip_lo = T::from_f64(1e-7);
    let clip_hi = T::from_f64(1.0 - 1e-7);
    let inv_n = T::from_f64(1.0 / n as f64);
    let mut loss = T::ZERO;
    let mut grad = Tensor::zeros(probs.shape().clone());
    for i in 0..n * k {
        let p = probs.data()[i];
        let y = labels.data()[i];
        if y == T::ONE {
            let clipped = if p < clip_lo {
                clip_lo
            } else if p > clip_hi {
                clip_hi
            } else {
                p
            };
            loss = loss - clipped.ln();
        }
        grad.data_mut()[i] = (p - y) * inv_n;
    }
    Ok((loss * inv_n, grad))
}

/// L2 penalty over a set of weight tensors: lambda * sum(w^2), with gradient
/// contribution 2*lambda*w added onto each matching grad tensor. Biases and
/// batch-norm parameters are excluded by the caller.
pub fn l2_penalty<T: Elem>(weights: &mut [(&Tensor<T>, &mut Tensor<T>)], lambda: f64) -> Result<T> {
    let lam = T::from_f64(lambda);
    let two_lam = T::from_f64(2.0 * lambda);
    let mut penalty = T::ZERO;
    for (w, grad) in weights.iter_mut() {
        if w.shape() != grad.shape() {
            return Err(Error::shape("l2_penalty: weight and grad shapes differ".to_string()));
        }
        let mut sq = T::ZERO;
        for &v in w.data() {
            sq = sq + v * v;
        }
        penalty = penalty + sq;
        if lambda != 0.0 {
            for (g, &v) in grad.data_mut().iter_mut().zip(w.data()) {
                *g = *g + two_lam * v;
            }
        }
    }
    Ok(penalty * lam)
}

/// Classical (non-Nesterov) SGD with momentum. Velocities are kept per
/// parameter, keyed by a stable name, and created lazily as zeros.
pub struct SgdMomentum<T: Elem> {
    lr: f64,
    momentum: f64,
    velocity: HashMap<String, Tensor<T>>,
}

impl<T: Elem> SgdMomentum<T> {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if lr <= 0.0 {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!("momentum must be in [0, 1), got {momentum}")));
        }
        Ok(SgdMomentum { lr, momentum, velocity: HashMap::new() })
    }

    /// v <- mu * v - lr * grad; w <- w + v, in place.
    pub fn step(&mut self, key: &str, param: &mut Tensor<T>, grad: &Tensor<T>) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::shape(format!(
                "sgd step {key}: param {} vs grad {}",
                param.shape(),
                grad.shape()
            )));
        }
        let v = self
            .velocity
            .entry(key.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape().clone()));
        let mu = T::from_f64(self.momentum);
        let lr = T::from_f64(self.lr);
        for ((vel, p), &g) in v.data_mut().iter_mut().zip(param.data_mut()).zip(grad.data()) {
            *vel = mu * *vel - lr * g;
            *p = *p + *vel;
        }
        Ok(())
    }

    /// Drop all velocity state (used when a fresh run reuses the struct).
    pub fn reset(&mut self) {
        self.velocity.clear();
    }
}
