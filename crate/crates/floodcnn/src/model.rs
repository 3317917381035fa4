//! Sequential model assembly: the three catalog architectures, plan-level
//! shape and parameter accounting, forward/backward over the layer stack,
//! and the damage-class prediction rule.
//!
//! A model is described by a `NetPlan` (an ordered list of `LayerSpec`s).
//! Catalog plans come from `catalog_plan`; tests and tools may build custom
//! plans directly. Plans serialize to a line-per-layer text form that
//! checkpoints embed, so any saved model can be rebuilt without consulting
//! the catalog.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::{
    BatchNorm, Conv2d, ConvSpec, Dense, Dropout, Flatten, Layer, MaxPool2d, Mode, Relu,
};
use crate::optim::Rng;
use crate::tensor::{Elem, Tensor};

/// Stable architecture identifiers used by the CLI and checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchId {
    Alexnet,
    Vgg16,
    Vgg3Block,
}

impl ArchId {
    pub fn as_str(&self) -> &'static str {
        match self {
            ArchId::Alexnet => "alexnet",
            ArchId::Vgg16 => "vgg16",
            ArchId::Vgg3Block => "vgg3block",
        }
    }

    pub const ALL: [ArchId; 3] = [ArchId::Alexnet, ArchId::Vgg16, ArchId::Vgg3Block];
}

impl fmt::Display for ArchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alexnet" => Ok(ArchId::Alexnet),
            "vgg16" => Ok(ArchId::Vgg16),
            "vgg3block" => Ok(ArchId::Vgg3Block),
            other => Err(Error::config(format!(
                "unknown architecture '{other}' (expected alexnet, vgg16, or vgg3block)"
            ))),
        }
    }
}

/// Structural modifiers that compose onto a catalog architecture.
/// `batchnorm` inserts batch normalization after every convolution (before
/// its ReLU); `dropout` inserts dropout after each hidden dense layer of the
/// VGG variants (AlexNet carries those two dropouts already, so the flag
/// changes nothing there).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BuildFlags {
    pub batchnorm: bool,
    pub dropout: bool,
    pub dropout_rate: f64,
}

impl Default for BuildFlags {
    fn default() -> Self {
        BuildFlags { batchnorm: false, dropout: false, dropout_rate: 0.5 }
    }
}

/// One layer of a network plan.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv(ConvSpec),
    Pool { window: (usize, usize), stride: (usize, usize) },
    BatchNorm,
    Relu,
    Dropout { rate: f64 },
    Flatten,
    Dense { width: usize },
}

/// Ordered layer stack plus nothing else; all geometry is derived on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct NetPlan {
    pub specs: Vec<LayerSpec>,
}

impl NetPlan {
    pub fn new(specs: Vec<LayerSpec>) -> Self {
        NetPlan { specs }
    }

    /// The class count is the width of the final dense layer.
    pub fn num_classes(&self) -> Result<usize> {
        match self.specs.last() {
            Some(LayerSpec::Dense { width }) => Ok(*width),
            other => Err(Error::config(format!(
                "plan must end with a dense output layer, found {other:?}"
            ))),
        }
    }

    /// One line per layer; `parse` inverts it.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for spec in &self.specs {
            let line = match spec {
                LayerSpec::Conv(c) => format!(
                    "conv {} {}x{} s{}x{} p{}x{}",
                    c.filters, c.kernel.0, c.kernel.1, c.stride.0, c.stride.1, c.padding.0, c.padding.1
                ),
                LayerSpec::Pool { window, stride } => {
                    format!("pool {}x{} s{}x{}", window.0, window.1, stride.0, stride.1)
                }
                LayerSpec::BatchNorm => "batchnorm".to_string(),
                LayerSpec::Relu => "relu".to_string(),
                LayerSpec::Dropout { rate } => format!("dropout {rate}"),
                LayerSpec::Flatten => "flatten".to_string(),
                LayerSpec::Dense { width } => format!("dense {width}"),
            };
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<NetPlan> {
        fn pair(tok: &str, what: &str) -> Result<(usize, usize)> {
            let (a, b) = tok
                .split_once('x')
                .ok_or_else(|| Error::config(format!("bad {what} '{tok}' in plan")))?;
            let parse = |s: &str| {
                s.parse::<usize>().map_err(|_| Error::config(format!("bad {what} '{tok}' in plan")))
            };
            Ok((parse(a)?, parse(b)?))
        }

        let mut specs = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            let spec = match toks[0] {
                "conv" if toks.len() == 5 => {
                    let filters = toks[1]
                        .parse()
                        .map_err(|_| Error::config(format!("bad filter count in '{line}'")))?;
                    let kernel = pair(toks[2], "kernel")?;
                    let stride = pair(toks[3].trim_start_matches('s'), "stride")?;
                    let padding = pair(toks[4].trim_start_matches('p'), "padding")?;
                    LayerSpec::Conv(ConvSpec::new(filters, kernel, stride, padding)?)
                }
                "pool" if toks.len() == 3 => LayerSpec::Pool {
                    window: pair(toks[1], "window")?,
                    stride: pair(toks[2].trim_start_matches('s'), "stride")?,
                },
                "batchnorm" if toks.len() == 1 => LayerSpec::BatchNorm,
                "relu" if toks.len() == 1 => LayerSpec::Relu,
                "dropout" if toks.len() == 2 => LayerSpec::Dropout {
                    rate: toks[1]
                        .parse()
                        .map_err(|_| Error::config(format!("bad dropout rate in '{line}'")))?,
                },
                "flatten" if toks.len() == 1 => LayerSpec::Flatten,
                "dense" if toks.len() == 2 => LayerSpec::Dense {
                    width: toks[1]
                        .parse()
                        .map_err(|_| Error::config(format!("bad dense width in '{line}'")))?,
                },
                _ => return Err(Error::config(format!("unrecognized plan line '{line}'"))),
            };
            specs.push(spec);
        }
        if specs.is_empty() {
            return Err(Error::config("plan text contains no layers"));
        }
        Ok(NetPlan { specs })
    }
}

fn conv3(filters: usize) -> LayerSpec {
    LayerSpec::Conv(ConvSpec { filters, kernel: (3, 3), stride: (1, 1), padding: (1, 1) })
}

fn pool2() -> LayerSpec {
    LayerSpec::Pool { window: (2, 2), stride: (2, 2) }
}

/// The three catalog architectures with optional modifiers applied.
pub fn catalog_plan(arch: ArchId, flags: &BuildFlags, num_classes: usize) -> NetPlan {
    let mut specs = Vec::new();
    let push_conv = |specs: &mut Vec<LayerSpec>, spec: LayerSpec| {
        specs.push(spec);
        if flags.batchnorm {
            specs.push(LayerSpec::BatchNorm);
        }
        specs.push(LayerSpec::Relu);
    };
    let push_hidden_dense = |specs: &mut Vec<LayerSpec>, width: usize, dropout: bool| {
        specs.push(LayerSpec::Dense { width });
        specs.push(LayerSpec::Relu);
        if dropout {
            specs.push(LayerSpec::Dropout { rate: flags.dropout_rate });
        }
    };

    match arch {
        ArchId::Vgg3Block => {
            for width in [32, 64, 128] {
                push_conv(&mut specs, conv3(width));
                push_conv(&mut specs, conv3(width));
                specs.push(pool2());
            }
            specs.push(LayerSpec::Flatten);
            push_hidden_dense(&mut specs, 4096, flags.dropout);
            push_hidden_dense(&mut specs, 4096, flags.dropout);
            specs.push(LayerSpec::Dense { width: num_classes });
        }
        ArchId::Vgg16 => {
            for (width, repeats) in [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)] {
                for _ in 0..repeats {
                    push_conv(&mut specs, conv3(width));
                }
                specs.push(pool2());
            }
            specs.push(LayerSpec::Flatten);
            push_hidden_dense(&mut specs, 4096, flags.dropout);
            push_hidden_dense(&mut specs, 4096, flags.dropout);
            specs.push(LayerSpec::Dense { width: num_classes });
        }
        ArchId::Alexnet => {
            let convs = [
                ConvSpec { filters: 96, kernel: (11, 11), stride: (4, 4), padding: (0, 0) },
                ConvSpec { filters: 256, kernel: (5, 5), stride: (1, 1), padding: (2, 2) },
                ConvSpec { filters: 384, kernel: (3, 3), stride: (1, 1), padding: (1, 1) },
                ConvSpec { filters: 384, kernel: (3, 3), stride: (1, 1), padding: (1, 1) },
                ConvSpec { filters: 256, kernel: (3, 3), stride: (1, 1), padding: (1, 1) },
            ];
            let pool3 = LayerSpec::Pool { window: (3, 3), stride: (2, 2) };
            push_conv(&mut specs, LayerSpec::Conv(convs[0]));
            specs.push(pool3.clone());
            push_conv(&mut specs, LayerSpec::Conv(convs[1]));
            specs.push(pool3.clone());
            push_conv(&mut specs, LayerSpec::Conv(convs[2]));
            push_conv(&mut specs, LayerSpec::Conv(convs[3]));
            push_conv(&mut specs, LayerSpec::Conv(convs[4]));
            specs.push(pool3);
            specs.push(LayerSpec::Flatten);
            // The two dropouts are part of the base architecture here.
            push_hidden_dense(&mut specs, 4096, true);
            push_hidden_dense(&mut specs, 4096, true);
            specs.push(LayerSpec::Dense { width: num_classes });
        }
    }
    NetPlan::new(specs)
}

/// One row of a plan trace: layer label, per-sample output shape, trainable
/// parameter count, and non-trainable state count (batch-norm running stats).
/// ReLU rows are folded away; every other layer appears.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerDesc {
    pub label: String,
    pub output_shape: Vec<usize>,
    pub params: usize,
    pub non_trainable: usize,
}

/// Shape and parameter trace of a plan, computed without allocating any
/// parameter tensors.
pub fn describe(plan: &NetPlan, input_shape: [usize; 3]) -> Result<Vec<LayerDesc>> {
    let mut rows = Vec::new();
    let [mut h, mut w, mut c] = input_shape;
    let mut flat: Option<usize> = None;

    for spec in &plan.specs {
        match spec {
            LayerSpec::Conv(cs) => {
                if flat.is_some() {
                    return Err(Error::config("conv after flatten in plan"));
                }
                let (oh, ow) = cs.out_hw(h, w)?;
                let params = cs.kernel.0 * cs.kernel.1 * c * cs.filters + cs.filters;
                rows.push(LayerDesc {
                    label: format!("conv2d {}@({}x{})", cs.filters, cs.kernel.0, cs.kernel.1),
                    output_shape: vec![oh, ow, cs.filters],
                    params,
                    non_trainable: 0,
                });
                h = oh;
                w = ow;
                c = cs.filters;
            }
            LayerSpec::Pool { window, stride } => {
                if flat.is_some() {
                    return Err(Error::config("pool after flatten in plan"));
                }
                let oh = crate::layers::out_extent(h, 0, window.0, stride.0)?;
                let ow = crate::layers::out_extent(w, 0, window.1, stride.1)?;
                rows.push(LayerDesc {
                    label: format!("maxpool2d ({}x{})", window.0, window.1),
                    output_shape: vec![oh, ow, c],
                    params: 0,
                    non_trainable: 0,
                });
                h = oh;
                w = ow;
            }
            LayerSpec::BatchNorm => {
                let channels = if let Some(width) = flat { width } else { c };
                rows.push(LayerDesc {
                    label: "batchnorm".to_string(),
                    output_shape: if let Some(width) = flat { vec![width] } else { vec![h, w, c] },
                    params: 2 * channels,
                    non_trainable: 2 * channels,
                });
            }
            LayerSpec::Relu => {}
            LayerSpec::Dropout { rate } => {
                rows.push(LayerDesc {
                    label: format!("dropout ({rate})"),
                    output_shape: if let Some(width) = flat { vec![width] } else { vec![h, w, c] },
                    params: 0,
                    non_trainable: 0,
                });
            }
            LayerSpec::Flatten => {
                if flat.is_some() {
                    return Err(Error::config("flatten applied twice in plan"));
                }
                let width = h * w * c;
                flat = Some(width);
                rows.push(LayerDesc {
                    label: "flatten".to_string(),
                    output_shape: vec![width],
                    params: 0,
                    non_trainable: 0,
                });
            }
            LayerSpec::Dense { width } => {
                let din = flat.ok_or_else(|| Error::config("dense before flatten in plan"))?;
                rows.push(LayerDesc {
                    label: format!("dense {width}"),
                    output_shape: vec![*width],
                    params: din * width + width,
                    non_trainable: 0,
                });
                flat = Some(*width);
            }
        }
    }
    Ok(rows)
}

/// Total trainable parameters of a plan at the given input size.
pub fn count_parameters(plan: &NetPlan, input_shape: [usize; 3]) -> Result<usize> {
    Ok(describe(plan, input_shape)?.iter().map(|r| r.params).sum())
}

/// A built network: instantiated layers plus the metadata checkpoints need.
pub struct Model<T: Elem> {
    layers: Vec<Box<dyn Layer<T>>>,
    plan: NetPlan,
    arch: String,
    flags: BuildFlags,
    input_shape: [usize; 3],
    num_classes: usize,
    seed: u64,
    rng_position: u64,
    history_summary: Option<String>,
}

impl<T: Elem> fmt::Debug for Model<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("arch", &self.arch)
            .field("input_shape", &self.input_shape)
            .field("num_classes", &self.num_classes)
            .field("layers", &self.layers.len())
            .field("params", &self.param_count())
            .finish()
    }
}

impl<T: Elem> Model<T> {
    /// Build a catalog architecture. Parameters are He-initialized from
    /// `rng`; dropout layers get independent child streams of the same seed.
    pub fn build(
        arch: ArchId,
        flags: BuildFlags,
        input_shape: [usize; 3],
        num_classes: usize,
        rng: &mut Rng,
    ) -> Result<Model<T>> {
        let plan = catalog_plan(arch, &flags, num_classes);
        Self::from_plan_labeled(plan, arch.as_str(), flags, input_shape, rng)
    }

    /// Build from an explicit plan (used for reduced test networks and for
    /// checkpoint loading). The arch label is recorded as "custom".
    pub fn from_plan(plan: NetPlan, input_shape: [usize; 3], rng: &mut Rng) -> Result<Model<T>> {
        Self::from_plan_labeled(plan, "custom", BuildFlags::default(), input_shape, rng)
    }

    pub(crate) fn from_plan_labeled(
        plan: NetPlan,
        arch: &str,
        flags: BuildFlags,
        input_shape: [usize; 3],
        rng: &mut Rng,
    ) -> Result<Model<T>> {
        let num_classes = plan.num_classes()?;
        // Validates all shapes before any tensor is allocated.
        describe(&plan, input_shape)?;

        let mut layers: Vec<Box<dyn Layer<T>>> = Vec::with_capacity(plan.specs.len());
        let [mut h, mut w, mut c] = input_shape;
        let mut flat: Option<usize> = None;
        for (i, spec) in plan.specs.iter().enumerate() {
            match spec {
                LayerSpec::Conv(cs) => {
                    layers.push(Box::new(Conv2d::new(c, *cs, rng)?));
                    let (oh, ow) = cs.out_hw(h, w)?;
                    h = oh;
                    w = ow;
                    c = cs.filters;
                }
                LayerSpec::Pool { window, stride } => {
                    layers.push(Box::new(MaxPool2d::<T>::new(*window, *stride)?));
                    h = crate::layers::out_extent(h, 0, window.0, stride.0)?;
                    w = crate::layers::out_extent(w, 0, window.1, stride.1)?;
                }
                LayerSpec::BatchNorm => {
                    let channels = if let Some(width) = flat { width } else { c };
                    layers.push(Box::new(BatchNorm::<T>::new(channels)?));
                }
                LayerSpec::Relu => layers.push(Box::new(Relu::<T>::new())),
                LayerSpec::Dropout { rate } => {
                    layers.push(Box::new(Dropout::<T>::new(*rate, rng.fork(i as u64, 0x64726f70))?));
                }
                LayerSpec::Flatten => {
                    layers.push(Box::new(Flatten::<T>::new()));
                    flat = Some(h * w * c);
                }
                LayerSpec::Dense { width } => {
                    let din = flat.expect("describe validated dense placement");
                    layers.push(Box::new(Dense::<T>::new(din, *width, rng)?));
                    flat = Some(*width);
                }
            }
        }

        Ok(Model {
            layers,
            plan,
            arch: arch.to_string(),
            flags,
            input_shape,
            num_classes,
            seed: rng.seed(),
            rng_position: rng.position(),
            history_summary: None,
        })
    }

    pub fn arch(&self) -> &str {
        &self.arch
    }

    pub fn plan(&self) -> &NetPlan {
        &self.plan
    }

    pub fn flags(&self) -> &BuildFlags {
        &self.flags
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rng_position(&self) -> u64 {
        self.rng_position
    }

    pub fn history_summary(&self) -> Option<&str> {
        self.history_summary.as_deref()
    }

    pub fn set_history_summary(&mut self, summary: Option<String>) {
        self.history_summary = summary;
    }

    pub(crate) fn set_rng_record(&mut self, seed: u64, position: u64) {
        self.seed = seed;
        self.rng_position = position;
    }

    /// Shape and parameter trace of this model's plan.
    pub fn describe(&self) -> Result<Vec<LayerDesc>> {
        describe(&self.plan, self.input_shape)
    }

    /// Total trainable parameter count.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<()> {
        let d = batch.dims();
        if d.len() != 4 || d[1] != self.input_shape[0] || d[2] != self.input_shape[1] || d[3] != self.input_shape[2] {
            return Err(Error::shape(format!(
                "batch shape {} does not match model input [N, {}, {}, {}]",
                batch.shape(),
                self.input_shape[0],
                self.input_shape[1],
                self.input_shape[2]
            )));
        }
        Ok(())
    }

    /// Apply all layers then softmax; rows are class distributions.
    pub fn forward(&mut self, batch: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        for layer in &mut self.layers {
            x = layer.forward(&x, mode)?;
        }
        crate::layers::softmax(&x)
    }

    /// Forward pass recording each layer's (kind, output shape). The final
    /// softmax is omitted; it preserves the last layer's shape.
    pub fn forward_trace(
        &mut self,
        batch: &Tensor<T>,
        mode: Mode,
    ) -> Result<Vec<(&'static str, Vec<usize>)>> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        let mut trace = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            x = layer.forward(&x, mode)?;
            trace.push((layer.kind(), x.dims().to_vec()));
        }
        Ok(trace)
    }

    /// Backpropagate the fused softmax+loss gradient (with respect to the
    /// logits) through every layer, filling all parameter gradient slots.
    /// Returns the gradient with respect to the input batch.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = grad_logits.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    /// Class indices for a batch using the damage decision rule.
    pub fn predict(&mut self, batch: &Tensor<T>) -> Result<Vec<usize>> {
        let probs = self.forward(batch, Mode::Infer)?;
        Ok(predict_labels(&probs))
    }

    /// All trainable parameters, keyed "layer{i}.{name}".
    pub fn trainable(&mut self) -> Vec<(String, crate::layers::TrainableParam<'_, T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for p in layer.trainable() {
                out.push((format!("layer{i}.{}", p.name), p));
            }
        }
        out
    }

    /// All persistent tensors (parameters and buffers), keyed "layer{i}.{name}".
    pub fn state(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.state() {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        out
    }

    pub fn state_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in layer.state_mut() {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        out
    }

    /// Owned copy of the full state, for best-weights restoration.
    pub fn snapshot(&self) -> Vec<(String, Tensor<T>)> {
        self.state().into_iter().map(|(k, t)| (k, t.clone())).collect()
    }

    /// Write a snapshot back. Every key must exist with a matching shape.
    pub fn restore(&mut self, snapshot: &[(String, Tensor<T>)]) -> Result<()> {
        let mut state = self.state_mut();
        if state.len() != snapshot.len() {
            return Err(Error::State(format!(
                "snapshot has {} tensors, model has {}",
                snapshot.len(),
                state.len()
            )));
        }
        for ((key, tensor), (skey, stensor)) in state.iter_mut().zip(snapshot) {
            if key != skey {
                return Err(Error::State(format!("snapshot key '{skey}' does not match model key '{key}'")));
            }
            if tensor.shape() != stensor.shape() {
                return Err(Error::State(format!(
                    "snapshot tensor '{skey}' shape {} does not match model shape {}",
                    stensor.shape(),
                    tensor.shape()
                )));
            }
            tensor.data_mut().copy_from_slice(stensor.data());
        }
        Ok(())
    }
}

/// Decision rule over softmax rows. Two classes: damage (index 0) wins only
/// when its probability exceeds 0.5, so an exact tie goes to no-damage.
/// More classes: plain argmax, earliest index on ties.
pub fn predict_labels<T: Elem>(probs: &Tensor<T>) -> Vec<usize> {
    let k = *probs.dims().last().expect("rank-2 probs");
    let half = T::from_f64(0.5);
    probs
        .data()
        .chunks_exact(k)
        .map(|row| {
            if k == 2 {
                usize::from(!(row[0] > half))
            } else {
                let mut best = 0;
                for (i, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = i;
                    }
                }
                best
            }
        })
        .collect()
}
