//! Minimal feed-forward network: 3x3 convolutions, ReLU, 2x2 max pooling,
//! fully connected layers and a softmax or sigmoid head, trained with
//! minibatch SGD with momentum.
//!
//! Activations are stored channel-major: a rank-3 tensor has shape
//! `[channels, height, width]`, a rank-1 tensor `[n]`.

use std::borrow::Cow;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::camsim::{derive_seed, rng};
use crate::{Error, Result};

const MAGIC: &[u8; 5] = b"NNET1";
/// Samples per gradient work unit; fixed so the reduction order never
/// depends on the thread count.
const GRAD_CHUNK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Argument(format!("tensor value {i} is not finite")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    /// Zero-padded 3x3 convolution; output side is `ceil(side / stride)`.
    Conv3x3 {
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    },
    Relu,
    MaxPool2,
    /// Dense layer; a rank-3 input is flattened in channel-major order.
    Fc {
        inputs: usize,
        outputs: usize,
    },
    Softmax,
    /// Elementwise logistic head for a single-output binary classifier.
    Sigmoid,
}

impl LayerSpec {
    fn code(&self) -> (u8, [u32; 3]) {
        match *self {
            LayerSpec::Conv3x3 {
                in_channels,
                out_channels,
                stride,
            } => (1, [in_channels as u32, out_channels as u32, stride as u32]),
            LayerSpec::Relu => (2, [0; 3]),
            LayerSpec::MaxPool2 => (3, [0; 3]),
            LayerSpec::Fc { inputs, outputs } => (4, [inputs as u32, outputs as u32, 0]),
            LayerSpec::Softmax => (5, [0; 3]),
            LayerSpec::Sigmoid => (6, [0; 3]),
        }
    }

    fn from_code(kind: u8, a: [u32; 3]) -> Result<Self> {
        let [x, y, z] = a.map(|v| v as usize);
        Ok(match kind {
            1 => LayerSpec::Conv3x3 {
                in_channels: x,
                out_channels: y,
                stride: z,
            },
            2 => LayerSpec::Relu,
            3 => LayerSpec::MaxPool2,
            4 => LayerSpec::Fc {
                inputs: x,
                outputs: y,
            },
            5 => LayerSpec::Softmax,
            6 => LayerSpec::Sigmoid,
            k => return Err(Error::Format(format!("unknown layer kind {k}"))),
        })
    }

    /// `(weights, biases)` parameter counts.
    pub fn param_counts(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Conv3x3 {
                in_channels,
                out_channels,
                ..
            } => (out_channels * in_channels * 9, out_channels),
            LayerSpec::Fc { inputs, outputs } => (inputs * outputs, outputs),
            _ => (0, 0),
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv3x3 { in_channels, .. } => in_channels * 9,
            LayerSpec::Fc { inputs, .. } => inputs,
            _ => 0,
        }
    }

    fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        match *self {
            LayerSpec::Conv3x3 {
                in_channels,
                out_channels,
                stride,
            } => {
                if stride == 0 || in_channels == 0 || out_channels == 0 {
                    return Err("conv channels and stride must be nonzero".into());
                }
                match input {
                    [c, h, w] if *c == in_channels => {
                        Ok(vec![out_channels, h.div_ceil(stride), w.div_ceil(stride)])
                    }
                    _ => Err(format!("conv expects [{in_channels}, h, w], got {input:?}")),
                }
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool2 => match input {
                [c, h, w] if *h >= 2 && *w >= 2 => Ok(vec![*c, h / 2, w / 2]),
                _ => Err(format!("maxpool2 expects [c, h>=2, w>=2], got {input:?}")),
            },
            LayerSpec::Fc { inputs, outputs } => {
                let n: usize = input.iter().product();
                if n != inputs || outputs == 0 {
                    Err(format!("fc expects {inputs} inputs, got {input:?}"))
                } else {
                    Ok(vec![outputs])
                }
            }
            LayerSpec::Softmax => match input {
                [n] if *n >= 2 => Ok(vec![*n]),
                _ => Err(format!(
                    "softmax expects a vector of >= 2 scores, got {input:?}"
                )),
            },
            LayerSpec::Sigmoid => match input {
                [1] => Ok(vec![1]),
                _ => Err(format!(
                    "sigmoid head expects a single score, got {input:?}"
                )),
            },
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv3x3 {
                in_channels,
                out_channels,
                stride,
            } => write!(f, "conv3x3({in_channels}->{out_channels},s{stride})"),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::MaxPool2 => f.write_str("maxpool2"),
            LayerSpec::Fc { inputs, outputs } => write!(f, "fc({inputs}->{outputs})"),
            LayerSpec::Softmax => f.write_str("softmax"),
            LayerSpec::Sigmoid => f.write_str("sigmoid"),
        }
    }
}

/// Weights and biases of one layer (both empty for parameter-free layers).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl LayerParams {
    fn zeros_for(spec: &LayerSpec) -> Self {
        let (w, b) = spec.param_counts();
        LayerParams {
            weights: vec![0.0; w],
            biases: vec![0.0; b],
        }
    }

    fn add_assign(&mut self, other: &LayerParams) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    fn sum_sq(&self) -> f64 {
        self.weights.iter().chain(&self.biases).map(|v| v * v).sum()
    }

    fn scale(&mut self, k: f64) {
        self.weights.iter_mut().for_each(|v| *v *= k);
        self.biases.iter_mut().for_each(|v| *v *= k);
    }
}

/// Per-layer gradients, laid out exactly like the model parameters.
pub type Gradients = Vec<LayerParams>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Head {
    Softmax,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetModel {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    params: Vec<LayerParams>,
    shapes: Vec<Vec<usize>>,
    pub rng_seed: u64,
    pub epochs: u32,
    pub learning_rate: f64,
}

impl NetModel {
    /// Builds a model with He-normal weights and zero biases.
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let mut model = NetModel::zeroed(input_shape, layers)?;
        model.rng_seed = seed;
        for (i, (spec, p)) in model.layers.iter().zip(&mut model.params).enumerate() {
            if p.weights.is_empty() {
                continue;
            }
            let std = (2.0 / spec.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let mut r = rng(derive_seed(seed, "init", i as u64));
            for w in p.weights.iter_mut() {
                *w = normal.sample(&mut r);
            }
        }
        Ok(model)
    }

    /// Builds a model with every parameter set to zero.
    pub fn zeroed(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Shape {
                layer: 0,
                detail: format!("invalid input shape {input_shape:?}"),
            });
        }
        let mut shapes = vec![input_shape.clone()];
        for (i, spec) in layers.iter().enumerate() {
            let is_head = matches!(spec, LayerSpec::Softmax | LayerSpec::Sigmoid);
            if is_head && i + 1 != layers.len() {
                return Err(Error::Shape {
                    layer: i,
                    detail: format!("{spec} must be the last layer"),
                });
            }
            let out = spec
                .output_shape(shapes.last().expect("non-empty"))
                .map_err(|detail| Error::Shape { layer: i, detail })?;
            shapes.push(out);
        }
        match layers.last() {
            Some(LayerSpec::Softmax | LayerSpec::Sigmoid) => {}
            _ => {
                return Err(Error::Shape {
                    layer: layers.len().saturating_sub(1),
                    detail: "network must end in a softmax or sigmoid head".into(),
                })
            }
        }
        let params = layers.iter().map(LayerParams::zeros_for).collect();
        Ok(NetModel {
            input_shape,
            layers,
            params,
            shapes,
            rng_seed: 0,
            epochs: 0,
            learning_rate: 0.0,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("non-empty")
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[LayerParams] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [LayerParams] {
        &mut self.params
    }

    fn param_mut(&mut self, layer: usize, weight: bool, k: usize) -> &mut f64 {
        let p = &mut self.params[layer];
        if weight {
            &mut p.weights[k]
        } else {
            &mut p.biases[k]
        }
    }

    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .map(|p| p.weights.len() + p.biases.len())
            .sum()
    }

    /// Compact architecture descriptor, e.g. `conv3x3(3->8,s1)|relu|...`.
    pub fn arch_string(&self) -> String {
        self.layers
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join("|")
    }

    fn head(&self) -> Head {
        match self.layers.last() {
            Some(LayerSpec::Sigmoid) => Head::Sigmoid,
            _ => Head::Softmax,
        }
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let n: usize = self.input_shape.iter().product();
        let flat_ok = self.input_shape.len() == 1 && input.data.len() == n;
        if input.shape != self.input_shape && !flat_ok {
            return Err(Error::Shape {
                layer: 0,
                detail: format!(
                    "input shape {:?} does not match model input {:?}",
                    input.shape, self.input_shape
                ),
            });
        }
        Ok(())
    }

    /// Output probabilities for one input.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let mut x = input.data.clone();
        for (i, spec) in self.layers.iter().enumerate() {
            x = self.layer_forward(i, spec, &x, None);
        }
        Ok(Tensor {
            shape: self.output_shape().to_vec(),
            data: x,
        })
    }

    /// Runs every layer, keeping the input of each layer and pooling argmax
    /// indices for the backward pass.
    fn trace(&self, input: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<usize>>) {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut switches = vec![Vec::new(); self.layers.len()];
        acts.push(input.to_vec());
        for (i, spec) in self.layers.iter().enumerate() {
            let out = self.layer_forward(
                i,
                spec,
                acts.last().expect("non-empty"),
                Some(&mut switches[i]),
            );
            acts.push(out);
        }
        (acts, switches)
    }

    fn layer_forward(
        &self,
        i: usize,
        spec: &LayerSpec,
        x: &[f64],
        switches: Option<&mut Vec<usize>>,
    ) -> Vec<f64> {
        let shape = &self.shapes[i];
        let p = &self.params[i];
        match *spec {
            LayerSpec::Conv3x3 {
                in_channels,
                out_channels,
                stride,
            } => conv_forward(x, shape[1], shape[2], in_channels, out_channels, stride, p),
            LayerSpec::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
            LayerSpec::MaxPool2 => maxpool_forward(x, shape[0], shape[1], shape[2], switches),
            LayerSpec::Fc { inputs, outputs } => {
                let mut out = p.biases.clone();
                for (o, acc) in out.iter_mut().enumerate() {
                    *acc += dot(&p.weights[o * inputs..(o + 1) * inputs], x);
                }
                debug_assert_eq!(out.len(), outputs);
                out
            }
            LayerSpec::Softmax => softmax(x),
            LayerSpec::Sigmoid => x.iter().map(|&z| sigmoid(z)).collect(),
        }
    }

    /// Loss and parameter gradients for one labeled input.
    ///
    /// With a softmax head the loss is categorical cross-entropy against class
    /// `target`; with a sigmoid head it is binary cross-entropy against
    /// `target` in {0, 1}.
    pub fn backward(&self, input: &Tensor, target: usize) -> Result<(f64, Gradients)> {
        self.check_input(input)?;
        self.check_target(target)?;
        Ok(self.backward_unchecked(&input.data, target))
    }

    fn check_target(&self, target: usize) -> Result<()> {
        let classes = match self.head() {
            Head::Softmax => self.output_shape()[0],
            Head::Sigmoid => 2,
        };
        if target >= classes {
            return Err(Error::Argument(format!(
                "label {target} out of range for {classes} classes"
            )));
        }
        Ok(())
    }

    fn backward_unchecked(&self, input: &[f64], target: usize) -> (f64, Gradients) {
        let mut grads: Gradients = self.layers.iter().map(LayerParams::zeros_for).collect();
        let loss = self.accumulate_gradients(input, target, &mut grads);
        (loss, grads)
    }

    fn accumulate_gradients(&self, input: &[f64], target: usize, grads: &mut Gradients) -> f64 {
        let (acts, switches) = self.trace(input);
        let n = self.layers.len();
        let logits = &acts[n - 1];
        let probs = &acts[n];
        let (loss, mut delta) = match self.head() {
            Head::Softmax => {
                let loss = log_sum_exp(logits) - logits[target];
                let mut d = probs.clone();
                d[target] -= 1.0;
                (loss, d)
            }
            Head::Sigmoid => {
                let z = logits[0];
                let y = target as f64;
                // log(1 + e^z) - y z, evaluated without overflow
                let loss = z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z;
                (loss, vec![probs[0] - y])
            }
        };
        for i in (0..n - 1).rev() {
            let shape = &self.shapes[i];
            let x = &acts[i];
            let p = &self.params[i];
            let g = &mut grads[i];
            delta = match self.layers[i] {
                LayerSpec::Conv3x3 {
                    in_channels,
                    out_channels,
                    stride,
                } => conv_backward(
                    x,
                    &delta,
                    shape[1],
                    shape[2],
                    in_channels,
                    out_channels,
                    stride,
                    p,
                    g,
                    i > 0,
                ),
                LayerSpec::Relu => delta
                    .iter()
                    .zip(x)
                    .map(|(&d, &v)| if v > 0.0 { d } else { 0.0 })
                    .collect(),
                LayerSpec::MaxPool2 => {
                    let mut dx = vec![0.0; x.len()];
                    for (&s, &d) in switches[i].iter().zip(&delta) {
                        dx[s] += d;
                    }
                    dx
                }
                LayerSpec::Fc { inputs, .. } => {
                    let mut dx = vec![0.0; inputs];
                    for (o, &d) in delta.iter().enumerate() {
                        g.biases[o] += d;
                        if d == 0.0 {
                            continue;
                        }
                        let w = &p.weights[o * inputs..(o + 1) * inputs];
                        let gw = &mut g.weights[o * inputs..(o + 1) * inputs];
                        for ((gwi, &xi), (&wi, dxi)) in
                            gw.iter_mut().zip(x).zip(w.iter().zip(dx.iter_mut()))
                        {
                            *gwi += d * xi;
                            *dxi += d * wi;
                        }
                    }
                    dx
                }
                LayerSpec::Softmax | LayerSpec::Sigmoid => unreachable!("head is last"),
            };
        }
        loss
    }

    /// Mean loss and summed gradients over a set of samples, reduced in a
    /// fixed order.
    fn batch_gradients<D: TrainingSet + ?Sized>(
        &self,
        data: &D,
        indices: &[usize],
    ) -> Result<(f64, Gradients)> {
        let partials: Vec<Result<(f64, Gradients)>> = indices
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut g: Gradients = self.layers.iter().map(LayerParams::zeros_for).collect();
                let mut loss = 0.0;
                for &k in chunk {
                    let (x, t) = data.sample(k)?;
                    self.check_input(&x)?;
                    self.check_target(t)?;
                    loss += self.accumulate_gradients(x.data(), t, &mut g);
                }
                Ok((loss, g))
            })
            .collect();
        let mut it = partials.into_iter();
        let (mut loss, mut total) = it.next().expect("non-empty batch")?;
        for part in it {
            let (l, g) = part?;
            loss += l;
            for (a, b) in total.iter_mut().zip(&g) {
                a.add_assign(b);
            }
        }
        Ok((loss, total))
    }

    /// Mean loss over a labeled set.
    pub fn mean_loss(&self, data: &[(Tensor, usize)]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Argument("empty dataset".into()));
        }
        let mut total = 0.0;
        for (x, t) in data {
            self.check_input(x)?;
            self.check_target(*t)?;
            total += self.loss_unchecked(&x.data, *t);
        }
        Ok(total / data.len() as f64)
    }

    fn loss_unchecked(&self, input: &[f64], target: usize) -> f64 {
        let mut x = input.to_vec();
        let n = self.layers.len();
        for (i, spec) in self.layers[..n - 1].iter().enumerate() {
            x = self.layer_forward(i, spec, &x, None);
        }
        match self.head() {
            Head::Softmax => log_sum_exp(&x) - x[target],
            Head::Sigmoid => {
                let z = x[0];
                z.max(0.0) + (-z.abs()).exp().ln_1p() - target as f64 * z
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.param_count() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.input_shape.len() as u32).to_le_bytes());
        for &d in &self.input_shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.rng_seed.to_le_bytes());
        out.extend_from_slice(&self.epochs.to_le_bytes());
        out.extend_from_slice(&self.learning_rate.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            let (kind, args) = l.code();
            out.push(kind);
            for a in args {
                out.extend_from_slice(&a.to_le_bytes());
            }
        }
        for p in &self.params {
            for v in p.weights.iter().chain(&p.biases) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Format("missing NNET1 magic".into()));
        }
        let rank = r.u32()? as usize;
        if rank == 0 || rank > 3 {
            return Err(Error::Format(format!("unsupported input rank {rank}")));
        }
        let input_shape = (0..rank)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let rng_seed = r.u64()?;
        let epochs = r.u32()?;
        let learning_rate = r.f64()?;
        let count = r.u32()? as usize;
        let mut layers = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let kind = r.take(1)?[0];
            let args = [r.u32()?, r.u32()?, r.u32()?];
            layers.push(LayerSpec::from_code(kind, args)?);
        }
        let mut model = NetModel::zeroed(input_shape, layers)
            .map_err(|e| Error::Format(format!("invalid architecture: {e}")))?;
        for p in &mut model.params {
            for v in p.weights.iter_mut().chain(p.biases.iter_mut()) {
                *v = r.f64()?;
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after weights",
                bytes.len() - r.pos
            )));
        }
        model.rng_seed = rng_seed;
        model.epochs = epochs;
        model.learning_rate = learning_rate;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::imaging::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        NetModel::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                offset: self.bytes.len(),
                expected: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators let the compiler vectorize without reassociating
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Copies a `[c, h, w]` activation into a zero border of width one.
fn pad1(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2, w + 2);
    let mut out = vec![0.0; c * ph * pw];
    for ch in 0..c {
        for r in 0..h {
            let src = &x[(ch * h + r) * w..][..w];
            out[(ch * ph + r + 1) * pw + 1..][..w].copy_from_slice(src);
        }
    }
    out
}

fn conv_forward(
    x: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    stride: usize,
    p: &LayerParams,
) -> Vec<f64> {
    let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
    let (ph, pw) = (h + 2, w + 2);
    let xp = pad1(x, cin, h, w);
    let mut out = vec![0.0; cout * ho * wo];
    for (o, plane) in out.chunks_exact_mut(ho * wo).enumerate() {
        plane.fill(p.biases[o]);
        for i in 0..cin {
            let src = &xp[i * ph * pw..][..ph * pw];
            let k = &p.weights[(o * cin + i) * 9..][..9];
            for (y, row) in plane.chunks_exact_mut(wo).enumerate() {
                for ky in 0..3 {
                    let line = &src[(y * stride + ky) * pw..][..pw];
                    for kx in 0..3 {
                        let wv = k[ky * 3 + kx];
                        if stride == 1 {
                            for (acc, &v) in row.iter_mut().zip(&line[kx..kx + wo]) {
                                *acc += wv * v;
                            }
                        } else {
                            for (xo, acc) in row.iter_mut().enumerate() {
                                *acc += wv * line[xo * stride + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    delta: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    stride: usize,
    p: &LayerParams,
    g: &mut LayerParams,
    need_input_grad: bool,
) -> Vec<f64> {
    let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
    let (ph, pw) = (h + 2, w + 2);
    let xp = pad1(x, cin, h, w);
    let mut dxp = vec![0.0; if need_input_grad { cin * ph * pw } else { 0 }];
    for o in 0..cout {
        let d = &delta[o * ho * wo..][..ho * wo];
        g.biases[o] += d.iter().sum::<f64>();
        for i in 0..cin {
            let src = &xp[i * ph * pw..][..ph * pw];
            let kbase = (o * cin + i) * 9;
            for ky in 0..3 {
                for kx in 0..3 {
                    let mut acc = 0.0;
                    for (y, drow) in d.chunks_exact(wo).enumerate() {
                        let line = &src[(y * stride + ky) * pw..][..pw];
                        if stride == 1 {
                            acc += dot(drow, &line[kx..kx + wo]);
                        } else {
                            for (xo, &dv) in drow.iter().enumerate() {
                                acc += dv * line[xo * stride + kx];
                            }
                        }
                    }
                    g.weights[kbase + ky * 3 + kx] += acc;
                }
            }
            if !need_input_grad {
                continue;
            }
            let dst = &mut dxp[i * ph * pw..][..ph * pw];
            for (y, drow) in d.chunks_exact(wo).enumerate() {
                for ky in 0..3 {
                    let line = &mut dst[(y * stride + ky) * pw..][..pw];
                    for kx in 0..3 {
                        let wv = p.weights[kbase + ky * 3 + kx];
                        if stride == 1 {
                            for (acc, &dv) in line[kx..kx + wo].iter_mut().zip(drow) {
                                *acc += wv * dv;
                            }
                        } else {
                            for (xo, &dv) in drow.iter().enumerate() {
                                line[xo * stride + kx] += wv * dv;
                            }
                        }
                    }
                }
            }
        }
    }
    if !need_input_grad {
        return vec![0.0; cin * h * w];
    }
    let mut dx = Vec::with_capacity(cin * h * w);
    for ch in 0..cin {
        for r in 0..h {
            dx.extend_from_slice(&dxp[(ch * ph + r + 1) * pw + 1..][..w]);
        }
    }
    dx
}

fn maxpool_forward(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    switches: Option<&mut Vec<usize>>,
) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut idx = Vec::new();
    let record = switches.is_some();
    for ch in 0..c {
        for y in 0..ho {
            for xo in 0..wo {
                let base = (ch * h + 2 * y) * w + 2 * xo;
                let mut best = base;
                for cand in [base + 1, base + w, base + w + 1] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(x[best]);
                if record {
                    idx.push(best);
                }
            }
        }
    }
    if let Some(s) = switches {
        *s = idx;
    }
    out
}

/// Indexed source of labeled training samples, fetched lazily so large
/// block sets need not be materialized.
pub trait TrainingSet: Sync {
    fn len(&self) -> usize;

    fn sample(&self, index: usize) -> Result<(Cow<'_, Tensor>, usize)>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl TrainingSet for [(Tensor, usize)] {
    fn len(&self) -> usize {
        <[_]>::len(self)
    }

    fn sample(&self, index: usize) -> Result<(Cow<'_, Tensor>, usize)> {
        let (x, t) = &self[index];
        Ok((Cow::Borrowed(x), *t))
    }
}

impl TrainingSet for Vec<(Tensor, usize)> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn sample(&self, index: usize) -> Result<(Cow<'_, Tensor>, usize)> {
        self.as_slice().sample(index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: u32,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Rescales a batch gradient whose global L2 norm exceeds this; 0 disables.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 32,
            clip_norm: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean training loss of each epoch, measured during the epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains in place with minibatch SGD and momentum; a batch size of zero
/// means full-batch. Deterministic under `config.seed`.
pub fn sgd_train<D: TrainingSet + ?Sized>(
    model: &mut NetModel,
    data: &D,
    config: &TrainConfig,
) -> Result<TrainReport> {
    sgd_train_with(model, data, config, |_, _| {})
}

/// Like [`sgd_train`], calling `on_epoch(epoch, mean_loss)` after each epoch.
pub fn sgd_train_with<D: TrainingSet + ?Sized>(
    model: &mut NetModel,
    data: &D,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(u32, f64),
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    if !(config.learning_rate >= 0.0 && config.learning_rate.is_finite()) {
        return Err(Error::Argument(format!(
            "learning rate must be >= 0, got {}",
            config.learning_rate
        )));
    }
    if !(config.clip_norm >= 0.0 && config.clip_norm.is_finite()) {
        return Err(Error::Argument(format!(
            "clip norm must be >= 0, got {}",
            config.clip_norm
        )));
    }
    if !(0.0..1.0).contains(&config.momentum) {
        return Err(Error::Argument(format!(
            "momentum must be in [0, 1), got {}",
            config.momentum
        )));
    }
    let batch = if config.batch_size == 0 {
        data.len()
    } else {
        config.batch_size
    };
    let mut velocity: Gradients = model.layers.iter().map(LayerParams::zeros_for).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport::default();
    for epoch in 0..config.epochs {
        let mut r = rng(derive_seed(config.seed, "epoch", epoch as u64));
        order.shuffle(&mut r);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(batch) {
            let (loss, mut grads) = model.batch_gradients(data, idx)?;
            epoch_loss += loss;
            let mut inv = 1.0 / idx.len() as f64;
            if config.clip_norm > 0.0 {
                let norm = inv * grads.iter().map(LayerParams::sum_sq).sum::<f64>().sqrt();
                if norm > config.clip_norm {
                    inv *= config.clip_norm / norm;
                }
            }
            for ((v, g), p) in velocity.iter_mut().zip(&mut grads).zip(&mut model.params) {
                g.scale(inv);
                v.scale(config.momentum);
                v.add_assign(g);
                for (w, dv) in p.weights.iter_mut().zip(&v.weights) {
                    *w -= config.learning_rate * dv;
                }
                for (b, dv) in p.biases.iter_mut().zip(&v.biases) {
                    *b -= config.learning_rate * dv;
                }
            }
        }
        let mean = epoch_loss / data.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Invariant(format!(
                "training diverged at epoch {epoch}"
            )));
        }
        report.epoch_losses.push(mean);
        on_epoch(epoch, mean);
    }
    model.rng_seed = config.seed;
    model.epochs += config.epochs;
    model.learning_rate = config.learning_rate;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
}

/// Compares analytic gradients against central finite differences on
/// `samples` randomly chosen parameters.
pub fn gradient_check(
    model: &NetModel,
    input: &Tensor,
    target: usize,
    samples: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, grads) = model.backward(input, target)?;
    let slots: Vec<(usize, bool, usize)> = model
        .params
        .iter()
        .enumerate()
        .flat_map(|(l, p)| {
            (0..p.weights.len())
                .map(move |k| (l, true, k))
                .chain((0..p.biases.len()).map(move |k| (l, false, k)))
        })
        .collect();
    if slots.is_empty() {
        return Err(Error::Argument("model has no parameters".into()));
    }
    let mut r = rng(seed);
    let picks: Vec<&(usize, bool, usize)> = if samples >= slots.len() {
        slots.iter().collect()
    } else {
        slots.choose_multiple(&mut r, samples).collect()
    };
    let mut probe = model.clone();
    let mut max_rel: f64 = 0.0;
    for &&(l, is_w, k) in &picks {
        let orig = *probe.param_mut(l, is_w, k);
        *probe.param_mut(l, is_w, k) = orig + h;
        let up = probe.loss_unchecked(&input.data, target);
        *probe.param_mut(l, is_w, k) = orig - h;
        let down = probe.loss_unchecked(&input.data, target);
        *probe.param_mut(l, is_w, k) = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = if is_w {
            grads[l].weights[k]
        } else {
            grads[l].biases[k]
        };
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        max_rel = max_rel.max((analytic - numeric).abs() / denom);
    }
    Ok(GradCheckReport {
        checked: picks.len(),
        max_rel_error: max_rel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_conv_net(seed: u64) -> NetModel {
        NetModel::new(
            vec![2, 8, 8],
            vec![
                LayerSpec::Conv3x3 {
                    in_channels: 2,
                    out_channels: 3,
                    stride: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool2,
                LayerSpec::Conv3x3 {
                    in_channels: 3,
                    out_channels: 4,
                    stride: 2,
                },
                LayerSpec::Relu,
                LayerSpec::Fc {
                    inputs: 16,
                    outputs: 2,
                },
                LayerSpec::Softmax,
            ],
            seed,
        )
        .unwrap()
    }

    fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
        use rand::Rng;
        let n = shape.iter().product();
        let mut r = rng(seed);
        Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn brute_conv(
        x: &[f64],
        h: usize,
        w: usize,
        cin: usize,
        cout: usize,
        s: usize,
        p: &LayerParams,
    ) -> Vec<f64> {
        let (ho, wo) = (h.div_ceil(s), w.div_ceil(s));
        let mut out = vec![0.0; cout * ho * wo];
        for o in 0..cout {
            for y in 0..ho {
                for xo in 0..wo {
                    let mut acc = p.biases[o];
                    for i in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (iy, ix) =
                                    ((y * s + ky) as isize - 1, (xo * s + kx) as isize - 1);
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += p.weights[(o * cin + i) * 9 + ky * 3 + kx]
                                        * x[(i * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(o * ho + y) * wo + xo] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_sum() {
        for (stride, h, w) in [(1, 5, 7), (2, 5, 7), (2, 6, 6), (3, 7, 4)] {
            let x = random_tensor(vec![2, h, w], 1);
            let mut p = LayerParams {
                weights: random_tensor(vec![3 * 2 * 9], 2).into_data(),
                biases: vec![0.1, -0.2, 0.3],
            };
            p.weights[0] = 0.5;
            let got = conv_forward(x.data(), h, w, 2, 3, stride, &p);
            let want = brute_conv(x.data(), h, w, 2, 3, stride, &p);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let m = NetModel::zeroed(
            vec![3],
            vec![
                LayerSpec::Fc {
                    inputs: 3,
                    outputs: 2,
                },
                LayerSpec::Softmax,
            ],
        )
        .unwrap();
        let out = m
            .forward(&Tensor::vector(vec![1.0, -2.0, 3.0]).unwrap())
            .unwrap();
        assert_eq!(out.data(), &[0.5, 0.5]);
    }

    #[test]
    fn relu_and_pool_definitions() {
        let relu = NetModel::zeroed(
            vec![3],
            vec![
                LayerSpec::Relu,
                LayerSpec::Fc {
                    inputs: 3,
                    outputs: 2,
                },
                LayerSpec::Softmax,
            ],
        )
        .unwrap();
        assert_eq!(
            relu.layer_forward(0, &LayerSpec::Relu, &[-1.0, 0.0, 3.0], None),
            vec![0.0, 0.0, 3.0]
        );
        assert_eq!(
            maxpool_forward(&[1.0, 5.0, 2.0, 3.0], 1, 2, 2, None),
            vec![5.0]
        );
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = softmax(&[0.3, -1.2, 2.5]);
        let b = softmax(&[1000.3, 998.8, 1002.5]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_gradient_is_probs_minus_onehot() {
        let mut m = NetModel::new(
            vec![3],
            vec![
                LayerSpec::Fc {
                    inputs: 3,
                    outputs: 2,
                },
                LayerSpec::Softmax,
            ],
            4,
        )
        .unwrap();
        m.params[0].biases = vec![0.2, -0.1];
        let x = Tensor::vector(vec![0.5, -1.0, 2.0]).unwrap();
        let p = m.forward(&x).unwrap();
        let (_, g) = m.backward(&x, 1).unwrap();
        assert!((g[0].biases[0] - p.data()[0]).abs() < 1e-15);
        assert!((g[0].biases[1] - (p.data()[1] - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn zero_input_gives_zero_kernel_gradients() {
        let m = toy_conv_net(3);
        let (_, g) = m.backward(&Tensor::zeros(vec![2, 8, 8]), 0).unwrap();
        assert!(g[0].weights.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn finite_differences_agree_with_backprop() {
        let m = toy_conv_net(11);
        let x = random_tensor(vec![2, 8, 8], 5);
        let rep = gradient_check(&m, &x, 1, 100, 1e-5, 9).unwrap();
        assert_eq!(rep.checked, 100);
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");

        let fus = NetModel::new(
            vec![2],
            vec![
                LayerSpec::Fc {
                    inputs: 2,
                    outputs: 10,
                },
                LayerSpec::Relu,
                LayerSpec::Fc {
                    inputs: 10,
                    outputs: 10,
                },
                LayerSpec::Relu,
                LayerSpec::Fc {
                    inputs: 10,
                    outputs: 1,
                },
                LayerSpec::Sigmoid,
            ],
            2,
        )
        .unwrap();
        let rep = gradient_check(
            &fus,
            &Tensor::vector(vec![0.3, 0.8]).unwrap(),
            1,
            1000,
            1e-5,
            1,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    fn blobs(n: usize, seed: u64) -> Vec<(Tensor, usize)> {
        use rand::Rng;
        let mut r = rng(seed);
        (0..n)
            .map(|i| {
                let label = i % 2;
                let c = if label == 1 { 1.5 } else { -1.5 };
                let x = vec![c + r.gen_range(-1.0..1.0), c + r.gen_range(-1.0..1.0)];
                (Tensor::vector(x).unwrap(), label)
            })
            .collect()
    }

    fn fc_net(seed: u64) -> NetModel {
        NetModel::new(
            vec![2],
            vec![
                LayerSpec::Fc {
                    inputs: 2,
                    outputs: 8,
                },
                LayerSpec::Relu,
                LayerSpec::Fc {
                    inputs: 8,
                    outputs: 2,
                },
                LayerSpec::Softmax,
            ],
            seed,
        )
        .unwrap()
    }

    #[test]
    fn separable_blobs_are_learned() {
        let data = blobs(200, 1);
        let mut m = fc_net(3);
        let cfg = TrainConfig {
            seed: 5,
            ..TrainConfig::default()
        };
        let rep = sgd_train(&mut m, &data, &cfg).unwrap();
        assert!(rep.epoch_losses[49] < 0.5 * rep.epoch_losses[0]);
        let correct = data
            .iter()
            .filter(|(x, t)| {
                let p = m.forward(x).unwrap();
                (p.data()[1] > 0.5) == (*t == 1)
            })
            .count();
        assert!(correct as f64 / data.len() as f64 >= 0.99);
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let data = blobs(20, 2);
        let mut m = fc_net(4);
        let before = m.clone();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 3,
            ..TrainConfig::default()
        };
        sgd_train(&mut m, &data, &cfg).unwrap();
        assert_eq!(m.params, before.params);
    }

    #[test]
    fn clipped_step_is_bounded() {
        let data = blobs(16, 4);
        let mut m = fc_net(2);
        let before = m.clone();
        let cfg = TrainConfig {
            epochs: 1,
            learning_rate: 0.5,
            momentum: 0.0,
            batch_size: 0,
            clip_norm: 1e-3,
            seed: 1,
        };
        sgd_train(&mut m, &data, &cfg).unwrap();
        let moved: f64 = m
            .params
            .iter()
            .zip(&before.params)
            .flat_map(|(a, b)| {
                a.weights
                    .iter()
                    .zip(&b.weights)
                    .chain(a.biases.iter().zip(&b.biases))
            })
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(moved > 0.0 && moved <= 0.5 * 1e-3 * (1.0 + 1e-9));
    }

    #[test]
    fn training_is_deterministic() {
        let data = blobs(64, 3);
        let cfg = TrainConfig {
            epochs: 5,
            seed: 8,
            ..TrainConfig::default()
        };
        let (mut a, mut b) = (fc_net(1), fc_net(1));
        sgd_train(&mut a, &data, &cfg).unwrap();
        sgd_train(&mut b, &data, &cfg).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn empty_dataset_and_bad_labels_are_rejected() {
        let mut m = fc_net(1);
        assert!(matches!(
            sgd_train(&mut m, &Vec::new(), &TrainConfig::default()),
            Err(Error::Argument(_))
        ));
        let bad = vec![(Tensor::vector(vec![0.0, 0.0]).unwrap(), 2)];
        assert!(sgd_train(&mut m, &bad, &TrainConfig::default()).is_err());
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let err = NetModel::zeroed(
            vec![3, 8, 8],
            vec![
                LayerSpec::Conv3x3 {
                    in_channels: 3,
                    out_channels: 4,
                    stride: 1,
                },
                LayerSpec::Fc {
                    inputs: 100,
                    outputs: 2,
                },
                LayerSpec::Softmax,
            ],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Shape { layer: 1, .. }), "{err}");
        let m = toy_conv_net(1);
        let err = m.forward(&Tensor::zeros(vec![2, 8, 9])).unwrap_err();
        assert!(matches!(err, Error::Shape { layer: 0, .. }));
    }

    #[test]
    fn serialization_roundtrip_is_exact() {
        let m = toy_conv_net(21);
        let bytes = m.to_bytes();
        let back = NetModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        let x = random_tensor(vec![2, 8, 8], 2);
        assert_eq!(m.forward(&x).unwrap(), back.forward(&x).unwrap());
        assert!(matches!(
            NetModel::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated { .. })
        ));
        assert!(NetModel::from_bytes(b"NNET2").is_err());
    }
}
