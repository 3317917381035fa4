//! Central finite-difference verification of every layer's backward pass,
//! plus an end-to-end check of a small dense-relu-dense-softmax model.
//!
//! All checks run in f64. A check passes when each gradient entry agrees
//! with the numeric estimate within an absolute floor of 1e-6 or a relative
//! error of 1e-4, whichever is looser.

use crate::error::Result;
use crate::layers::{BatchNorm, Conv2d, ConvSpec, Dense, Dropout, Flatten, Layer, MaxPool2d, Mode, Relu};
use crate::optim::{cross_entropy, Rng};
use crate::tensor::{Shape, Tensor};

pub const FD_STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-6;

/// Result of checking one layer type over several randomized trials.
#[derive(Clone, Debug)]
pub struct LayerCheck {
    pub layer: &'static str,
    pub trials: usize,
    pub max_rel_error: f64,
}

impl LayerCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= REL_TOL
    }
}

/// Run every layer-type check plus the end-to-end model check.
pub fn check_layers(trials: usize, seed: u64) -> Result<Vec<LayerCheck>> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    let checks: [(&'static str, fn(&mut Rng) -> Result<f64>); 8] = [
        ("conv2d", conv_trial),
        ("maxpool2d", maxpool_trial),
        ("dense", dense_trial),
        ("relu", relu_trial),
        ("batchnorm", batchnorm_trial),
        ("dropout", dropout_trial),
        ("flatten", flatten_trial),
        ("model", model_trial),
    ];
    for (layer, trial) in checks {
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let rel = trial(&mut rng)?;
            if rel > worst {
                worst = rel;
            }
        }
        out.push(LayerCheck { layer, trials, max_rel_error: worst });
    }
    Ok(out)
}

/// Worst relative disagreement between `analytic` and central differences of
/// `eval` around `base`. Entries within the absolute floor count as exact.
fn max_rel_error(
    eval: &mut dyn FnMut(&[f64]) -> Result<f64>,
    base: &mut [f64],
    analytic: &[f64],
) -> Result<f64> {
    assert_eq!(base.len(), analytic.len());
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let orig = base[i];
        base[i] = orig + FD_STEP;
        let plus = eval(base)?;
        base[i] = orig - FD_STEP;
        let minus = eval(base)?;
        base[i] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let a = analytic[i];
        let diff = (a - numeric).abs();
        if diff > ABS_FLOOR {
            let rel = diff / a.abs().max(numeric.abs());
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

fn random_tensor(dims: &[usize], rng: &mut Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let mut t = Tensor::zeros(Shape::new(dims).expect("positive dims"));
    for v in t.data_mut() {
        *v = rng.uniform(lo, hi);
    }
    t
}

/// Values with pairwise gaps of at least half a slot width, shuffled. Keeps
/// max-pool argmaxes stable under +/- FD_STEP perturbations.
fn separated_tensor(dims: &[usize], rng: &mut Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let mut t = Tensor::zeros(Shape::new(dims).expect("positive dims"));
    let n = t.numel();
    let step = (hi - lo) / n as f64;
    debug_assert!(step / 2.0 > 2.0 * FD_STEP, "slots too narrow for stable argmax");
    let mut vals: Vec<f64> =
        (0..n).map(|i| lo + (i as f64 + 0.25 + 0.5 * rng.next_f64()) * step).collect();
    rng.shuffle(&mut vals);
    t.data_mut().copy_from_slice(&vals);
    t
}

/// Values bounded away from zero, so ReLU's kink is never within FD_STEP.
fn kink_free_tensor(dims: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let mut t = Tensor::zeros(Shape::new(dims).expect("positive dims"));
    for v in t.data_mut() {
        let mut x = rng.uniform(-1.0, 1.0);
        while x.abs() < 1e-3 {
            x = rng.uniform(-1.0, 1.0);
        }
        *v = x;
    }
    t
}

/// Shared scaffolding: given a layer, an input, and a fixed random linear
/// functional over the output (loss = sum(proj * y)), compare the layer's
/// analytic input and parameter gradients against finite differences.
///
/// `reseed` is invoked before every forward so stochastic layers replay the
/// identical mask.
fn check_layer<L: Layer<f64>>(
    layer: &mut L,
    x: &Tensor<f64>,
    mode: Mode,
    rng: &mut Rng,
    reseed: impl Fn(&mut L),
) -> Result<f64> {
    reseed(layer);
    let y = layer.forward(x, mode)?;
    let proj = random_tensor(y.dims(), rng, -1.0, 1.0);

    let grad_in = layer.backward(&proj)?;
    let mut analytic = grad_in.data().to_vec();
    for p in layer.trainable() {
        analytic.extend_from_slice(p.grad.data());
    }

    let mut base = x.data().to_vec();
    for p in layer.trainable() {
        base.extend_from_slice(p.value.data());
    }

    let x_len = x.numel();
    let mut xt = x.clone();
    let mut eval = |vals: &[f64]| -> Result<f64> {
        xt.data_mut().copy_from_slice(&vals[..x_len]);
        let mut off = x_len;
        for p in layer.trainable() {
            let n = p.value.numel();
            p.value.data_mut().copy_from_slice(&vals[off..off + n]);
            off += n;
        }
        reseed(layer);
        let y = layer.forward(&xt, mode)?;
        Ok(y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum())
    };
    max_rel_error(&mut eval, &mut base, &analytic)
}

fn conv_trial(rng: &mut Rng) -> Result<f64> {
    let n = 1 + rng.below(2);
    let h = 4 + rng.below(3);
    let w = 4 + rng.below(3);
    let cin = 1 + rng.below(2);
    let filters = 1 + rng.below(3);
    let k = 1 + rng.below(3);
    let stride = 1 + rng.below(2);
    let pad = rng.below(2);
    let spec = ConvSpec::new(filters, (k, k), (stride, stride), (pad, pad))?;
    let mut layer: Conv2d<f64> = Conv2d::new(cin, spec, rng)?;
    let x = random_tensor(&[n, h, w, cin], rng, -1.0, 1.0);
    check_layer(&mut layer, &x, Mode::Train, rng, |_| {})
}

fn maxpool_trial(rng: &mut Rng) -> Result<f64> {
    let h = 4 + rng.below(3);
    let w = 4 + rng.below(3);
    let c = 1 + rng.below(2);
    let win = 2 + rng.below(2);
    let stride = 1 + rng.below(2);
    let mut layer: MaxPool2d<f64> = MaxPool2d::new((win, win), (stride, stride))?;
    let x = separated_tensor(&[2, h, w, c], rng, -1.0, 1.0);
    check_layer(&mut layer, &x, Mode::Train, rng, |_| {})
}

fn dense_trial(rng: &mut Rng) -> Result<f64> {
    let n = 1 + rng.below(4);
    let din = 2 + rng.below(6);
    let dout = 1 + rng.below(5);
    let mut layer: Dense<f64> = Dense::new(din, dout, rng)?;
    let x = random_tensor(&[n, din], rng, -1.0, 1.0);
    check_layer(&mut layer, &x, Mode::Train, rng, |_| {})
}

fn relu_trial(rng: &mut Rng) -> Result<f64> {
    let mut layer: Relu<f64> = Relu::new();
    let x = kink_free_tensor(&[3, 2 + rng.below(8)], rng);
    check_layer(&mut layer, &x, Mode::Train, rng, |_| {})
}

fn batchnorm_trial(rng: &mut Rng) -> Result<f64> {
    let c = 1 + rng.below(3);
    let mut layer: BatchNorm<f64> = BatchNorm::new(c)?;
    // Exercise learned scale/shift away from the (1, 0) initialization.
    for p in layer.trainable() {
        for v in p.value.data_mut() {
            *v = rng.uniform(0.5, 1.5);
        }
    }
    let x = if rng.below(2) == 0 {
        random_tensor(&[4 + rng.below(4), c], rng, -2.0, 2.0)
    } else {
        random_tensor(&[2, 3, 3, c], rng, -2.0, 2.0)
    };
    check_layer(&mut layer, &x, Mode::Train, rng, |_| {})
}

fn dropout_trial(rng: &mut Rng) -> Result<f64> {
    let mask_seed = rng.next_u64();
    let mut layer: Dropout<f64> = Dropout::new(0.5, Rng::new(mask_seed))?;
    let x = random_tensor(&[4, 6], rng, -1.0, 1.0);
    check_layer(&mut layer, &x, Mode::Train, rng, move |l| l.set_rng(Rng::new(mask_seed)))
}

fn flatten_trial(rng: &mut Rng) -> Result<f64> {
    let mut layer: Flatten<f64> = Flatten::new();
    let x = random_tensor(&[2, 2 + rng.below(3), 2 + rng.below(3), 1 + rng.below(3)], rng, -1.0, 1.0);
    check_layer(&mut layer, &x, Mode::Train, rng, |_| {})
}

/// End-to-end: dense -> relu -> dense -> softmax -> cross-entropy. Checks the
/// fused loss gradient propagated through the whole stack, including both
/// dense layers' parameters.
fn model_trial(rng: &mut Rng) -> Result<f64> {
    let n = 4;
    let din = 6;
    let hidden = 5;
    let classes = 3;

    let mut l1: Dense<f64> = Dense::new(din, hidden, rng)?;
    let mut relu: Relu<f64> = Relu::new();
    let mut l2: Dense<f64> = Dense::new(hidden, classes, rng)?;

    let mut labels = Tensor::zeros(Shape::new(&[n, classes])?);
    for r in 0..n {
        let c = rng.below(classes);
        labels.data_mut()[r * classes + c] = 1.0;
    }

    // Keep hidden pre-activations away from the ReLU kink so the central
    // difference never straddles it (FD_STEP perturbations shift them by at
    // most ~1e-4, the margin is 1e-3).
    let x = loop {
        let cand = random_tensor(&[n, din], rng, -1.0, 1.0);
        let pre = l1.forward(&cand, Mode::Train)?;
        if pre.data().iter().all(|v| v.abs() > 1e-3) {
            break cand;
        }
    };

    let run = |l1: &mut Dense<f64>, relu: &mut Relu<f64>, l2: &mut Dense<f64>, x: &Tensor<f64>| -> Result<(f64, Tensor<f64>)> {
        let h1 = l1.forward(x, Mode::Train)?;
        let a1 = relu.forward(&h1, Mode::Train)?;
        let logits = l2.forward(&a1, Mode::Train)?;
        let probs = crate::layers::softmax(&logits)?;
        let (loss, grad_logits) = cross_entropy(&probs, &labels)?;
        Ok((loss, grad_logits))
    };

    let (_, grad_logits) = run(&mut l1, &mut relu, &mut l2, &x)?;
    let g_a1 = l2.backward(&grad_logits)?;
    let g_h1 = relu.backward(&g_a1)?;
    let g_x = l1.backward(&g_h1)?;

    let mut analytic = g_x.data().to_vec();
    for p in l1.trainable() {
        analytic.extend_from_slice(p.grad.data());
    }
    for p in l2.trainable() {
        analytic.extend_from_slice(p.grad.data());
    }

    let mut base = x.data().to_vec();
    for p in l1.trainable() {
        base.extend_from_slice(p.value.data());
    }
    for p in l2.trainable() {
        base.extend_from_slice(p.value.data());
    }

    let x_len = x.numel();
    let mut xt = x.clone();
    let mut eval = |vals: &[f64]| -> Result<f64> {
        xt.data_mut().copy_from_slice(&vals[..x_len]);
        let mut off = x_len;
        for p in l1.trainable() {
            let n = p.value.numel();
            p.value.data_mut().copy_from_slice(&vals[off..off + n]);
            off += n;
        }
        for p in l2.trainable() {
            let n = p.value.numel();
            p.value.data_mut().copy_from_slice(&vals[off..off + n]);
            off += n;
        }
        Ok(run(&mut l1, &mut relu, &mut l2, &xt)?.0)
    };
    max_rel_error(&mut eval, &mut base, &analytic)
}
