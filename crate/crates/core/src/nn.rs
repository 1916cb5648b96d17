//! Small feed-forward networks with hand-written backpropagation.
//!
//! Supported layers: dense, direct 2-D convolution (stride 1, same or valid
//! padding), ReLU and flatten, trained with softmax cross-entropy and plain
//! SGD. Batches carry a leading batch axis; a dense layer sees `[B, in]` and
//! a convolution sees `[B, C, H, W]`.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{matmul, DenseArray, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        bias: bool,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        padding: Padding,
        bias: bool,
    },
    Relu,
    Flatten,
}

impl LayerSpec {
    pub fn is_parameterized(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Dense {
                inputs, outputs, ..
            } => Some(vec![inputs, outputs]),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some(vec![out_channels, in_channels, kernel[0], kernel[1]]),
            _ => None,
        }
    }

    pub fn bias_len(&self) -> Option<usize> {
        match *self {
            LayerSpec::Dense {
                outputs,
                bias: true,
                ..
            } => Some(outputs),
            LayerSpec::Conv2d {
                out_channels,
                bias: true,
                ..
            } => Some(out_channels),
            _ => None,
        }
    }

    fn fans(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Dense {
                inputs, outputs, ..
            } => (inputs, outputs),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let area = kernel[0] * kernel[1];
                (in_channels * area, out_channels * area)
            }
            _ => (0, 0),
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Dense {
                inputs, outputs, ..
            } => {
                if input != [inputs] {
                    return Err(Error::Dimension(format!(
                        "dense layer expects [{inputs}], got {input:?}"
                    )));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                padding,
                ..
            } => {
                if input.len() != 3 || input[0] != in_channels {
                    return Err(Error::Dimension(format!(
                        "conv layer expects [{in_channels}, H, W], got {input:?}"
                    )));
                }
                match padding {
                    Padding::Same => {
                        if kernel[0] % 2 == 0 || kernel[1] % 2 == 0 {
                            return Err(Error::Dimension(
                                "same padding needs odd kernel sizes".into(),
                            ));
                        }
                        Ok(vec![out_channels, input[1], input[2]])
                    }
                    Padding::Valid => {
                        if input[1] < kernel[0] || input[2] < kernel[1] {
                            return Err(Error::Dimension(format!(
                                "kernel {kernel:?} larger than input {input:?}"
                            )));
                        }
                        Ok(vec![
                            out_channels,
                            input[1] - kernel[0] + 1,
                            input[2] - kernel[1] + 1,
                        ])
                    }
                }
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

/// Input shape plus ordered layer list; fully determines parameter shapes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// Dense layers with ReLU between them, e.g. `[2, 32, 32, 4]`.
    pub fn mlp(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config("an MLP needs at least two sizes".into()));
        }
        let mut layers = Vec::new();
        for (i, pair) in dims.windows(2).enumerate() {
            if i > 0 {
                layers.push(LayerSpec::Relu);
            }
            layers.push(LayerSpec::Dense {
                inputs: pair[0],
                outputs: pair[1],
                bias: true,
            });
        }
        let arch = Architecture {
            input_shape: vec![dims[0]],
            layers,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// conv3x3(same) -> relu -> conv3x3(valid) -> relu -> flatten -> dense -> relu -> dense.
    pub fn toy_cnn(
        channels: usize,
        side: usize,
        filters: [usize; 2],
        hidden: usize,
        classes: usize,
    ) -> Result<Self> {
        let inner = side.checked_sub(2).filter(|&s| s > 0).ok_or_else(|| {
            Error::Config(format!("toy CNN needs images wider than 2 pixels, got {side}"))
        })?;
        let arch = Architecture {
            input_shape: vec![channels, side, side],
            layers: vec![
                LayerSpec::Conv2d {
                    in_channels: channels,
                    out_channels: filters[0],
                    kernel: [3, 3],
                    padding: Padding::Same,
                    bias: true,
                },
                LayerSpec::Relu,
                LayerSpec::Conv2d {
                    in_channels: filters[0],
                    out_channels: filters[1],
                    kernel: [3, 3],
                    padding: Padding::Valid,
                    bias: true,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    inputs: filters[1] * inner * inner,
                    outputs: hidden,
                    bias: true,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    inputs: hidden,
                    outputs: classes,
                    bias: true,
                },
            ],
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Per-sample shapes entering each layer, plus the final output shape.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        for layer in &self.layers {
            let next = layer.output_shape(shapes.last().expect("non-empty"))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "bad input shape {:?}",
                self.input_shape
            )));
        }
        let shapes = self.shapes()?;
        let out = shapes.last().expect("non-empty");
        if out.len() != 1 || out[0] < 2 {
            return Err(Error::Dimension(format!(
                "network must end in a vector of at least two class scores, got {out:?}"
            )));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.shapes().map(|s| s.last().unwrap()[0]).unwrap_or(0)
    }

    /// Indices (into `layers`) of layers that own weights.
    pub fn parameterized(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_parameterized())
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    weight: Option<DenseArray>,
    bias: Option<DenseArray>,
}

impl Layer {
    pub fn weight(&self) -> Option<&DenseArray> {
        self.weight.as_ref()
    }

    pub fn bias(&self) -> Option<&DenseArray> {
        self.bias.as_ref()
    }
}

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// Layer stack with full-precision parameters.
///
/// Parameterized layers are addressed by ordinal (0 = first layer with
/// weights). Biases are kept apart from the weight vectors and never
/// regularized or quantized.
#[derive(Debug, Clone)]
pub struct Network {
    arch: Architecture,
    layers: Vec<Layer>,
    params: Vec<usize>,
    generation: u64,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.layers == other.layers
    }
}

impl Network {
    /// Glorot-uniform weights from `rng`, zero biases.
    pub fn init(arch: Architecture, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let layers = arch
            .layers
            .iter()
            .map(|spec| {
                let weight = spec.weight_shape().map(|shape| {
                    let (fan_in, fan_out) = spec.fans();
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| rng.uniform(-limit, limit)).collect();
                    DenseArray::from_parts(shape, data)
                });
                let bias = spec.bias_len().map(|n| DenseArray::zeros(&[n]));
                Layer {
                    spec: spec.clone(),
                    weight,
                    bias,
                }
            })
            .collect();
        Ok(Self::assemble(arch, layers))
    }

    /// Builds a network from explicit per-ordinal weights and biases.
    pub fn from_parameters(
        arch: Architecture,
        weights: Vec<Vec<f64>>,
        biases: Vec<Option<Vec<f64>>>,
    ) -> Result<Self> {
        arch.validate()?;
        let params = arch.parameterized();
        if weights.len() != params.len() || biases.len() != params.len() {
            return Err(Error::Dimension(format!(
                "architecture has {} parameterized layers, got {} weight and {} bias entries",
                params.len(),
                weights.len(),
                biases.len()
            )));
        }
        let mut w_iter = weights.into_iter();
        let mut b_iter = biases.into_iter();
        let mut layers = Vec::with_capacity(arch.layers.len());
        for spec in &arch.layers {
            let (weight, bias) = match spec.weight_shape() {
                Some(shape) => {
                    let w = DenseArray::new(shape, w_iter.next().unwrap())?;
                    let b = match (spec.bias_len(), b_iter.next().unwrap()) {
                        (Some(n), Some(b)) => Some(DenseArray::new(vec![n], b)?),
                        (None, None) => None,
                        (Some(_), None) | (None, Some(_)) => {
                            return Err(Error::Dimension(
                                "bias presence disagrees with architecture".into(),
                            ))
                        }
                    };
                    (Some(w), b)
                }
                None => (None, None),
            };
            layers.push(Layer {
                spec: spec.clone(),
                weight,
                bias,
            });
        }
        Ok(Self::assemble(arch, layers))
    }

    fn assemble(arch: Architecture, layers: Vec<Layer>) -> Self {
        let params = arch.parameterized();
        Network {
            arch,
            layers,
            params,
            generation: next_generation(),
        }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_param_layers(&self) -> usize {
        self.params.len()
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes()
    }

    /// Changes whenever any parameter is mutated.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    fn param_layer(&self, ordinal: usize) -> &Layer {
        &self.layers[self.params[ordinal]]
    }

    /// Flattened weights of a parameterized layer (length `N = c*h*z`).
    pub fn weights(&self, ordinal: usize) -> &[f64] {
        self.param_layer(ordinal)
            .weight
            .as_ref()
            .expect("parameterized")
            .data()
    }

    pub fn weight_shape(&self, ordinal: usize) -> &[usize] {
        self.param_layer(ordinal)
            .weight
            .as_ref()
            .expect("parameterized")
            .shape()
    }

    pub fn bias(&self, ordinal: usize) -> Option<&[f64]> {
        self.param_layer(ordinal).bias.as_ref().map(|b| b.data())
    }

    pub fn weights_mut(&mut self, ordinal: usize) -> &mut [f64] {
        self.generation = next_generation();
        let idx = self.params[ordinal];
        self.layers[idx]
            .weight
            .as_mut()
            .expect("parameterized")
            .data_mut()
    }

    pub fn bias_mut(&mut self, ordinal: usize) -> Option<&mut [f64]> {
        self.generation = next_generation();
        let idx = self.params[ordinal];
        self.layers[idx].bias.as_mut().map(|b| b.data_mut())
    }

    pub fn set_weights(&mut self, ordinal: usize, values: &[f64]) -> Result<()> {
        let target = self.weights_mut(ordinal);
        if target.len() != values.len() {
            return Err(Error::Dimension(format!(
                "layer {ordinal} has {} weights, got {}",
                target.len(),
                values.len()
            )));
        }
        target.copy_from_slice(values);
        Ok(())
    }

    pub fn total_weights(&self) -> usize {
        (0..self.num_param_layers())
            .map(|o| self.weights(o).len())
            .sum()
    }
}

/// Inputs with a leading batch axis and one class label per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: DenseArray,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: DenseArray, labels: Vec<usize>) -> Result<Self> {
        if inputs.shape().first() != Some(&labels.len()) {
            return Err(Error::Dimension(format!(
                "{} labels for inputs of shape {:?}",
                labels.len(),
                inputs.shape()
            )));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Activations recorded by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    /// Input to every layer, in order.
    inputs: Vec<DenseArray>,
    probs: DenseArray,
    labels: Vec<usize>,
}

impl ForwardCache {
    pub fn layer_inputs(&self) -> &[DenseArray] {
        &self.inputs
    }

    pub fn probabilities(&self) -> &DenseArray {
        &self.probs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: DenseArray,
    pub bias: Option<DenseArray>,
}

/// Gradients per parameterized layer, by ordinal.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            layers: (0..net.num_param_layers())
                .map(|o| LayerGrad {
                    weight: DenseArray::zeros(net.weight_shape(o)),
                    bias: net.bias(o).map(|b| DenseArray::zeros(&[b.len()])),
                })
                .collect(),
        }
    }
}

fn check_input(net: &Network, inputs: &DenseArray) -> Result<usize> {
    let shape = inputs.shape();
    if shape.len() != net.arch.input_shape.len() + 1 || shape[1..] != net.arch.input_shape[..] {
        return Err(Error::Dimension(format!(
            "network expects [B, {:?}], got {shape:?}",
            net.arch.input_shape
        )));
    }
    Ok(shape[0])
}

fn layer_forward(layer: &Layer, x: &DenseArray, batch: usize) -> Result<DenseArray> {
    match layer.spec {
        LayerSpec::Dense { .. } => {
            let mut y = matmul(x, layer.weight.as_ref().expect("dense weight"))?;
            if let Some(b) = &layer.bias {
                let n = b.len();
                for row in y.data_mut().chunks_mut(n) {
                    for (v, &bv) in row.iter_mut().zip(b.data()) {
                        *v += bv;
                    }
                }
            }
            Ok(y)
        }
        LayerSpec::Conv2d { padding, .. } => Ok(conv_forward(
            x,
            layer.weight.as_ref().expect("conv weight"),
            layer.bias.as_ref(),
            padding,
        )),
        LayerSpec::Relu => Ok(x.map(|v| v.max(0.0))),
        LayerSpec::Flatten => {
            let per = x.len() / batch;
            x.clone().reshape(vec![batch, per])
        }
    }
}

fn conv_geometry(x: &[usize], k: &[usize], padding: Padding) -> (usize, usize, isize, isize) {
    match padding {
        Padding::Same => (x[2], x[3], (k[2] / 2) as isize, (k[3] / 2) as isize),
        Padding::Valid => (x[2] - k[2] + 1, x[3] - k[3] + 1, 0, 0),
    }
}

/// Direct convolution (cross-correlation) with stride 1.
fn conv_forward(x: &DenseArray, k: &DenseArray, b: Option<&DenseArray>, padding: Padding) -> DenseArray {
    let (xs, ks) = (x.shape(), k.shape());
    let (batch, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
    let (oh, ow, ph, pw) = conv_geometry(xs, ks, padding);
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![0.0; batch * cout * oh * ow];
    for n in 0..batch {
        for o in 0..cout {
            let base = ((n * cout) + o) * oh * ow;
            let bias = b.map(|b| b.data()[o]).unwrap_or(0.0);
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias;
                    for c in 0..cin {
                        for p in 0..kh {
                            let r = i as isize + p as isize - ph;
                            if r < 0 || r >= h as isize {
                                continue;
                            }
                            for q in 0..kw {
                                let s = j as isize + q as isize - pw;
                                if s < 0 || s >= w as isize {
                                    continue;
                                }
                                let xv = xd[((n * cin + c) * h + r as usize) * w + s as usize];
                                acc += xv * kd[((o * cin + c) * kh + p) * kw + q];
                            }
                        }
                    }
                    out[base + i * ow + j] = acc;
                }
            }
        }
    }
    DenseArray::from_parts(vec![batch, cout, oh, ow], out)
}

/// Returns (dx, dk, db).
fn conv_backward(
    x: &DenseArray,
    k: &DenseArray,
    dy: &DenseArray,
    padding: Padding,
    with_bias: bool,
) -> (DenseArray, DenseArray, Option<DenseArray>) {
    let (xs, ks) = (x.shape(), k.shape());
    let (batch, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
    let (oh, ow, ph, pw) = conv_geometry(xs, ks, padding);
    let (xd, kd, gd) = (x.data(), k.data(), dy.data());
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; k.len()];
    let mut db = vec![0.0; cout];
    for n in 0..batch {
        for o in 0..cout {
            let base = ((n * cout) + o) * oh * ow;
            for i in 0..oh {
                for j in 0..ow {
                    let g = gd[base + i * ow + j];
                    db[o] += g;
                    if g == 0.0 {
                        continue;
                    }
                    for c in 0..cin {
                        for p in 0..kh {
                            let r = i as isize + p as isize - ph;
                            if r < 0 || r >= h as isize {
                                continue;
                            }
                            for q in 0..kw {
                                let s = j as isize + q as isize - pw;
                                if s < 0 || s >= w as isize {
                                    continue;
                                }
                                let xi = ((n * cin + c) * h + r as usize) * w + s as usize;
                                let ki = ((o * cin + c) * kh + p) * kw + q;
                                dk[ki] += g * xd[xi];
                                dx[xi] += g * kd[ki];
                            }
                        }
                    }
                }
            }
        }
    }
    (
        DenseArray::from_parts(xs.to_vec(), dx),
        DenseArray::from_parts(ks.to_vec(), dk),
        with_bias.then(|| DenseArray::from_parts(vec![cout], db)),
    )
}

fn softmax_rows(logits: &DenseArray) -> DenseArray {
    let c = logits.cols();
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    DenseArray::from_parts(logits.shape().to_vec(), out)
}

/// Mean softmax cross-entropy of `logits` (shape `[B, C]`) against labels.
pub fn cross_entropy(logits: &DenseArray, labels: &[usize]) -> Result<f64> {
    let c = logits.cols();
    if logits.rows() != labels.len() {
        return Err(Error::Dimension("one label per logit row".into()));
    }
    let mut total = 0.0;
    for (row, &y) in logits.data().chunks(c).zip(labels) {
        if y >= c {
            return Err(Error::Validation(format!("label {y} out of range for {c} classes")));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok(total / labels.len() as f64)
}

/// Response of a parameterized layer to `x` with the given weights and no
/// bias: `x W` for dense layers, the convolution for conv layers.
pub fn weight_response(spec: &LayerSpec, weights: &[f64], x: &DenseArray) -> Result<DenseArray> {
    let shape = spec
        .weight_shape()
        .ok_or_else(|| Error::Usage("layer has no weights".into()))?;
    let w = DenseArray::new(shape, weights.to_vec())?;
    match *spec {
        LayerSpec::Dense { .. } => matmul(x, &w),
        LayerSpec::Conv2d { padding, .. } => {
            spec.output_shape(&x.shape()[1..])?;
            Ok(conv_forward(x, &w, None, padding))
        }
        _ => unreachable!("weight_shape is Some only for parameterized layers"),
    }
}

/// Class scores for a batch of inputs.
pub fn predict(net: &Network, inputs: &DenseArray) -> Result<DenseArray> {
    let batch = check_input(net, inputs)?;
    let mut x = inputs.clone();
    for layer in &net.layers {
        x = layer_forward(layer, &x, batch)?;
    }
    Ok(x)
}

/// Mean cross-entropy loss plus the activations needed by [`backward`].
pub fn forward(net: &Network, batch: &Batch) -> Result<(f64, ForwardCache)> {
    let n = check_input(net, &batch.inputs)?;
    if n == 0 || n != batch.labels.len() {
        return Err(Error::Dimension(format!(
            "batch of {n} inputs with {} labels",
            batch.labels.len()
        )));
    }
    let mut inputs = Vec::with_capacity(net.layers.len());
    let mut x = batch.inputs.clone();
    for layer in &net.layers {
        let y = layer_forward(layer, &x, n)?;
        inputs.push(x);
        x = y;
    }
    let loss = cross_entropy(&x, &batch.labels)?;
    let probs = softmax_rows(&x);
    Ok((
        loss,
        ForwardCache {
            generation: net.generation,
            inputs,
            probs,
            labels: batch.labels.clone(),
        },
    ))
}

pub fn backward(net: &Network, cache: &ForwardCache) -> Result<Gradients> {
    backward_scaled(net, cache, 1.0)
}

/// Gradients of `scale * loss`.
pub fn backward_scaled(net: &Network, cache: &ForwardCache, scale: f64) -> Result<Gradients> {
    if cache.generation != net.generation {
        return Err(Error::Usage(
            "forward cache is stale: the network changed since forward ran".into(),
        ));
    }
    let batch = cache.labels.len();
    let classes = cache.probs.cols();
    let mut grad = cache.probs.data().to_vec();
    for (row, &y) in grad.chunks_mut(classes).zip(&cache.labels) {
        row[y] -= 1.0;
    }
    let factor = scale / batch as f64;
    grad.iter_mut().for_each(|g| *g *= factor);
    let mut dy = DenseArray::from_parts(vec![batch, classes], grad);

    let mut out: Vec<Option<LayerGrad>> = vec![None; net.layers.len()];
    for (idx, layer) in net.layers.iter().enumerate().rev() {
        let x = &cache.inputs[idx];
        dy = match layer.spec {
            LayerSpec::Dense { .. } => {
                let w = layer.weight.as_ref().expect("dense weight");
                let dw = matmul(&x.transpose()?, &dy)?;
                let db = layer.bias.as_ref().map(|b| {
                    let n = b.len();
                    let mut acc = vec![0.0; n];
                    for row in dy.data().chunks(n) {
                        for (a, &g) in acc.iter_mut().zip(row) {
                            *a += g;
                        }
                    }
                    DenseArray::from_parts(vec![n], acc)
                });
                out[idx] = Some(LayerGrad { weight: dw, bias: db });
                matmul(&dy, &w.transpose()?)?
            }
            LayerSpec::Conv2d { padding, .. } => {
                let k = layer.weight.as_ref().expect("conv weight");
                let (dx, dk, db) = conv_backward(x, k, &dy, padding, layer.bias.is_some());
                out[idx] = Some(LayerGrad { weight: dk, bias: db });
                dx
            }
            LayerSpec::Relu => {
                let data = dy
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                DenseArray::from_parts(x.shape().to_vec(), data)
            }
            LayerSpec::Flatten => dy.reshape(x.shape().to_vec())?,
        };
    }
    Ok(Gradients {
        layers: out.into_iter().flatten().collect(),
    })
}

/// `W <- W - eta * grad` for every weight and bias.
pub fn sgd_step(net: &mut Network, grads: &Gradients, eta: f64) -> Result<()> {
    if !(eta > 0.0) {
        return Err(Error::Precondition(format!("learning rate must be positive, got {eta}")));
    }
    check_grads(net, grads)?;
    for (ordinal, g) in grads.layers.iter().enumerate() {
        for (w, &d) in net.weights_mut(ordinal).iter_mut().zip(g.weight.data()) {
            *w -= eta * d;
        }
        if let (Some(b), Some(gb)) = (net.bias_mut(ordinal), g.bias.as_ref()) {
            for (w, &d) in b.iter_mut().zip(gb.data()) {
                *w -= eta * d;
            }
        }
    }
    Ok(())
}

pub(crate) fn check_grads(net: &Network, grads: &Gradients) -> Result<()> {
    if grads.layers.len() != net.num_param_layers() {
        return Err(Error::Dimension(format!(
            "{} gradient entries for {} parameterized layers",
            grads.layers.len(),
            net.num_param_layers()
        )));
    }
    for (o, g) in grads.layers.iter().enumerate() {
        if g.weight.shape() != net.weight_shape(o)
            || g.bias.as_ref().map(|b| b.len()) != net.bias(o).map(<[f64]>::len)
        {
            return Err(Error::Dimension(format!("gradient shape mismatch at layer {o}")));
        }
    }
    Ok(())
}
