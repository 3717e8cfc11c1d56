//! Layer kinds with their parameters, plus the layer-wise reverse-mode tape.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng;

/// One layer of a sequential network. Image tensors are laid out as
/// `[batch, channels, height, width]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { inputs: usize, units: usize },
    /// Stride-1 valid convolution with a square kernel.
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize },
    Relu,
    #[serde(rename = "maxpool2d")]
    MaxPool2d { size: usize, stride: usize },
    Flatten,
    /// Marks the logits that feed softmax cross-entropy; identity in the forward pass.
    SoftmaxXentHead,
}

impl LayerSpec {
    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |want: &str| Err(Error::Shape(format!("{self:?} expects {want}, got input {input:?}")));
        match *self {
            LayerSpec::Dense { inputs, units } => {
                if input != [inputs] {
                    return mismatch(&format!("[{inputs}]"));
                }
                if units == 0 {
                    return Err(Error::InvalidArgument("dense layer needs at least one unit".into()));
                }
                Ok(vec![units])
            }
            LayerSpec::Conv2d { in_channels, out_channels, kernel } => {
                if kernel == 0 || out_channels == 0 {
                    return Err(Error::InvalidArgument("conv2d kernel and channels must be >= 1".into()));
                }
                match input {
                    [c, h, w] if *c == in_channels && *h >= kernel && *w >= kernel => {
                        Ok(vec![out_channels, h - kernel + 1, w - kernel + 1])
                    }
                    _ => mismatch(&format!("[{in_channels}, h>={kernel}, w>={kernel}]")),
                }
            }
            LayerSpec::MaxPool2d { size, stride } => {
                if size == 0 || stride == 0 {
                    return Err(Error::InvalidArgument("pool size and stride must be >= 1".into()));
                }
                match input {
                    [c, h, w] if *h >= size && *w >= size => {
                        Ok(vec![*c, (h - size) / stride + 1, (w - size) / stride + 1])
                    }
                    _ => mismatch(&format!("[c, h>={size}, w>={size}]")),
                }
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::SoftmaxXentHead => {
                if input.len() != 1 {
                    return mismatch("rank-1 logits");
                }
                Ok(input.to_vec())
            }
        }
    }

    /// Weight and bias shapes for parameterised layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Dense { inputs, units } => Some((vec![units, inputs], vec![units])),
            LayerSpec::Conv2d { in_channels, out_channels, kernel } => {
                Some((vec![out_channels, in_channels, kernel, kernel], vec![out_channels]))
            }
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .map(|(w, b)| w.iter().product::<usize>() + b.iter().product::<usize>())
            .unwrap_or(0)
    }

    /// Forward FLOPs for one sample: 2 per multiply-accumulate plus one add
    /// per bias element for dense/conv; one op per output element for
    /// relu and max-pool; zero for flatten and the head.
    pub fn flops(&self, input: &[usize]) -> Result<u64> {
        let out = self.output_shape(input)?;
        let out_elems: u64 = out.iter().product::<usize>() as u64;
        Ok(match *self {
            LayerSpec::Dense { inputs, units } => 2 * (inputs * units) as u64 + units as u64,
            LayerSpec::Conv2d { in_channels, kernel, .. } => {
                let macs_per_out = (in_channels * kernel * kernel) as u64;
                2 * macs_per_out * out_elems + out_elems
            }
            LayerSpec::Relu | LayerSpec::MaxPool2d { .. } => out_elems,
            LayerSpec::Flatten | LayerSpec::SoftmaxXentHead => 0,
        })
    }

    fn fans(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Dense { inputs, units } => (inputs, units),
            LayerSpec::Conv2d { in_channels, out_channels, kernel } => {
                (in_channels * kernel * kernel, out_channels * kernel * kernel)
            }
            _ => (0, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: Option<LayerParams>,
}

impl Layer {
    /// Xavier-uniform weights and zero bias from a stream keyed by
    /// `(seed, layer_index)`.
    pub fn init(spec: LayerSpec, seed: u64, layer_index: usize) -> Self {
        let params = spec.param_shapes().map(|(ws, bs)| {
            let (fan_in, fan_out) = spec.fans();
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
            let mut r = rng::stream(seed, &[rng::STREAM_INIT, layer_index as u64]);
            let n: usize = ws.iter().product();
            let w: Vec<f32> = (0..n).map(|_| r.random_range(-limit..=limit)).collect();
            LayerParams {
                weight: Tensor::new(ws, w).expect("weight shape"),
                bias: Tensor::zeros(bs),
            }
        });
        Layer { spec, params }
    }
}

/// Gradients aligned with a stack's layers; `None` for parameter-free layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads(pub Vec<Option<LayerParams>>);

impl ParamGrads {
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for p in self.0.iter().flatten() {
            out.extend_from_slice(p.weight.data());
            out.extend_from_slice(p.bias.data());
        }
        out
    }

    /// Rebuilds gradients with the layout of `stack` from a flat vector.
    pub fn from_flat(stack: &LayerStack, flat: &[f32]) -> Result<Self> {
        if flat.len() != stack.param_count() {
            return Err(Error::Shape(format!(
                "flat gradient has {} values, stack has {} parameters",
                flat.len(),
                stack.param_count()
            )));
        }
        let mut off = 0;
        let mut out = Vec::with_capacity(stack.layers.len());
        for layer in &stack.layers {
            out.push(layer.params.as_ref().map(|p| {
                let take = |t: &Tensor, off: &mut usize| {
                    let v = flat[*off..*off + t.len()].to_vec();
                    *off += t.len();
                    Tensor::new(t.shape().to_vec(), v).expect("layout")
                };
                let weight = take(&p.weight, &mut off);
                let bias = take(&p.bias, &mut off);
                LayerParams { weight, bias }
            }));
        }
        Ok(ParamGrads(out))
    }
}

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// Per-layer cached state recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    generation: u64,
    recorded: bool,
    inputs: Vec<Tensor>,
    pool_argmax: Vec<Option<Vec<usize>>>,
}

impl Tape {
    pub fn is_recorded(&self) -> bool {
        self.recorded
    }
}

/// A sequential stack of layers with an explicit per-sample input shape.
#[derive(Debug, Clone)]
pub struct LayerStack {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    generation: u64,
}

impl PartialEq for LayerStack {
    fn eq(&self, other: &Self) -> bool {
        self.input_shape == other.input_shape && self.layers == other.layers
    }
}

impl LayerStack {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let mut shape = input_shape.clone();
        for layer in &layers {
            shape = layer.spec.output_shape(&shape)?;
            match (layer.spec.param_shapes(), &layer.params) {
                (None, None) => {}
                (Some((ws, bs)), Some(p)) if p.weight.shape() == ws && p.bias.shape() == bs => {}
                _ => {
                    return Err(Error::Shape(format!("parameters do not fit layer {:?}", layer.spec)));
                }
            }
        }
        Ok(Self { input_shape, layers, generation: next_generation() })
    }

    /// Initialises every layer; `first_index` is the global position of the
    /// first layer so that portions of a model initialise like the whole.
    pub fn from_specs(input_shape: Vec<usize>, specs: &[LayerSpec], seed: u64, first_index: usize) -> Result<Self> {
        let layers = specs
            .iter()
            .enumerate()
            .map(|(i, s)| Layer::init(s.clone(), seed, first_index + i))
            .collect();
        Self::new(input_shape, layers)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Per-sample shape after each layer; the last entry is the output shape.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            shape = l.spec.output_shape(&shape).expect("validated at construction");
            out.push(shape.clone());
        }
        out
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.shapes().pop().unwrap_or_else(|| self.input_shape.clone())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.spec.param_count()).sum()
    }

    pub fn flops_per_sample(&self) -> u64 {
        let mut shape = self.input_shape.clone();
        let mut total = 0;
        for l in &self.layers {
            total += l.spec.flops(&shape).expect("validated at construction");
            shape = l.spec.output_shape(&shape).expect("validated at construction");
        }
        total
    }

    pub fn flat_params(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in self.layers.iter().filter_map(|l| l.params.as_ref()) {
            out.extend_from_slice(p.weight.data());
            out.extend_from_slice(p.bias.data());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f32]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::ArchitectureMismatch(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut off = 0;
        for p in self.layers.iter_mut().filter_map(|l| l.params.as_mut()) {
            for t in [&mut p.weight, &mut p.bias] {
                let n = t.len();
                t.data_mut().copy_from_slice(&flat[off..off + n]);
                off += n;
            }
        }
        self.generation = next_generation();
        Ok(())
    }

    /// Splits off layers `[at, len)` into a new stack whose input shape is
    /// this stack's shape after layer `at - 1`.
    pub fn split_off(&mut self, at: usize) -> Result<LayerStack> {
        if at > self.layers.len() {
            return Err(Error::InvalidSplit(format!("cannot split {} layers at {at}", self.layers.len())));
        }
        let boundary = if at == 0 { self.input_shape.clone() } else { self.shapes()[at - 1].clone() };
        let tail = self.layers.split_off(at);
        self.generation = next_generation();
        LayerStack::new(boundary, tail)
    }

    /// Appends `other`, whose input shape must match this stack's output.
    pub fn append(&mut self, other: LayerStack) -> Result<()> {
        if other.input_shape != self.output_shape() {
            return Err(Error::Shape(format!(
                "cannot append stack with input {:?} after output {:?}",
                other.input_shape,
                self.output_shape()
            )));
        }
        self.layers.extend(other.layers);
        self.generation = next_generation();
        Ok(())
    }

    pub fn forward(&self, input: &Tensor, record: bool) -> Result<(Tensor, Tape)> {
        if input.rank() != self.input_shape.len() + 1 || input.shape()[1..] != self.input_shape[..] {
            return Err(Error::Shape(format!(
                "stack expects [batch, {:?}], got {:?}",
                self.input_shape,
                input.shape()
            )));
        }
        let mut tape = Tape {
            generation: self.generation,
            recorded: record,
            inputs: Vec::new(),
            pool_argmax: Vec::new(),
        };
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, argmax) = layer_forward(layer, &x)?;
            y.check_finite(&format!("layer {i} ({:?})", layer.spec))?;
            if record {
                tape.inputs.push(x);
                tape.pool_argmax.push(argmax);
            }
            x = y;
        }
        Ok((x, tape))
    }

    /// Reverse pass over a recorded tape. Returns parameter gradients and the
    /// gradient with respect to the stack input.
    pub fn backward(&self, tape: &Tape, grad_out: &Tensor) -> Result<(ParamGrads, Tensor)> {
        if !tape.recorded {
            return Err(Error::MissingTape);
        }
        if tape.generation != self.generation || tape.inputs.len() != self.layers.len() {
            return Err(Error::StaleTape);
        }
        let mut grads = vec![None; self.layers.len()];
        let mut g = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            let (pg, gx) = layer_backward(&self.layers[i], &tape.inputs[i], tape.pool_argmax[i].as_deref(), &g)?;
            grads[i] = pg;
            g = gx;
        }
        Ok((ParamGrads(grads), g))
    }

    /// `p <- p - lr * g` for every parameter.
    pub fn sgd_step(&mut self, grads: &ParamGrads, lr: f32) -> Result<()> {
        if grads.0.len() != self.layers.len() {
            return Err(Error::Shape("gradient list does not match layers".into()));
        }
        for (layer, g) in self.layers.iter_mut().zip(&grads.0) {
            match (&mut layer.params, g) {
                (None, None) => {}
                (Some(p), Some(g)) => {
                    sgd_step(p.weight.data_mut(), g.weight.data(), lr)?;
                    sgd_step(p.bias.data_mut(), g.bias.data(), lr)?;
                }
                _ => return Err(Error::Shape("gradient does not match layer parameters".into())),
            }
        }
        self.generation = next_generation();
        Ok(())
    }
}

/// Plain SGD update in place.
pub fn sgd_step(params: &mut [f32], grads: &[f32], lr: f32) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!("{} params vs {} grads", params.len(), grads.len())));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    Ok(())
}

fn layer_forward(layer: &Layer, x: &Tensor) -> Result<(Tensor, Option<Vec<usize>>)> {
    let b = x.batch();
    match (&layer.spec, &layer.params) {
        (LayerSpec::Dense { inputs, units }, Some(p)) => Ok((dense_forward(x, p, b, *inputs, *units), None)),
        (LayerSpec::Conv2d { .. }, Some(p)) => Ok((conv_forward(x, p), None)),
        (LayerSpec::Relu, _) => {
            let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
            Ok((Tensor::new(x.shape().to_vec(), data)?, None))
        }
        (LayerSpec::MaxPool2d { size, stride }, _) => {
            let (y, arg) = pool_forward(x, *size, *stride);
            Ok((y, Some(arg)))
        }
        (LayerSpec::Flatten, _) => {
            let w = x.row_len();
            Ok((x.clone().reshape(vec![b, w])?, None))
        }
        (LayerSpec::SoftmaxXentHead, _) => Ok((x.clone(), None)),
        (spec, None) => Err(Error::Shape(format!("layer {spec:?} has no parameters"))),
    }
}

fn layer_backward(
    layer: &Layer,
    x: &Tensor,
    argmax: Option<&[usize]>,
    g: &Tensor,
) -> Result<(Option<LayerParams>, Tensor)> {
    let b = x.batch();
    match (&layer.spec, &layer.params) {
        (LayerSpec::Dense { inputs, units }, Some(p)) => {
            let (pg, gx) = dense_backward(x, p, g, b, *inputs, *units);
            Ok((Some(pg), gx))
        }
        (LayerSpec::Conv2d { .. }, Some(p)) => {
            let (pg, gx) = conv_backward(x, p, g);
            Ok((Some(pg), gx))
        }
        (LayerSpec::Relu, _) => {
            let data = x.data().iter().zip(g.data()).map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 }).collect();
            Ok((None, Tensor::new(x.shape().to_vec(), data)?))
        }
        (LayerSpec::MaxPool2d { .. }, _) => {
            let arg = argmax.ok_or(Error::StaleTape)?;
            let mut gx = Tensor::zeros(x.shape().to_vec());
            let gxd = gx.data_mut();
            for (&src, &gv) in arg.iter().zip(g.data()) {
                gxd[src] += gv;
            }
            Ok((None, gx))
        }
        (LayerSpec::Flatten, _) => Ok((None, g.clone().reshape(x.shape().to_vec())?)),
        (LayerSpec::SoftmaxXentHead, _) => Ok((None, g.clone())),
        (spec, None) => Err(Error::Shape(format!("layer {spec:?} has no parameters"))),
    }
}

fn dense_forward(x: &Tensor, p: &LayerParams, b: usize, inputs: usize, units: usize) -> Tensor {
    let w = p.weight.data();
    let bias = p.bias.data();
    let xd = x.data();
    let mut y = vec![0.0f32; b * units];
    for i in 0..b {
        let xi = &xd[i * inputs..(i + 1) * inputs];
        for o in 0..units {
            let wo = &w[o * inputs..(o + 1) * inputs];
            let mut acc = 0.0f32;
            for j in 0..inputs {
                acc += wo[j] * xi[j];
            }
            y[i * units + o] = acc + bias[o];
        }
    }
    Tensor::new(vec![b, units], y).expect("dense output")
}

fn dense_backward(x: &Tensor, p: &LayerParams, g: &Tensor, b: usize, inputs: usize, units: usize) -> (LayerParams, Tensor) {
    let w = p.weight.data();
    let xd = x.data();
    let gd = g.data();
    let mut dw = vec![0.0f32; units * inputs];
    let mut db = vec![0.0f32; units];
    let mut dx = vec![0.0f32; b * inputs];
    for i in 0..b {
        let xi = &xd[i * inputs..(i + 1) * inputs];
        for o in 0..units {
            let go = gd[i * units + o];
            db[o] += go;
            let row = &mut dw[o * inputs..(o + 1) * inputs];
            for j in 0..inputs {
                row[j] += go * xi[j];
            }
        }
    }
    for i in 0..b {
        let dxi = &mut dx[i * inputs..(i + 1) * inputs];
        for o in 0..units {
            let go = gd[i * units + o];
            let wo = &w[o * inputs..(o + 1) * inputs];
            for j in 0..inputs {
                dxi[j] += wo[j] * go;
            }
        }
    }
    (
        LayerParams {
            weight: Tensor::new(vec![units, inputs], dw).expect("dw"),
            bias: Tensor::new(vec![units], db).expect("db"),
        },
        Tensor::new(x.shape().to_vec(), dx).expect("dx"),
    )
}

fn conv_dims(x: &Tensor, p: &LayerParams) -> (usize, usize, usize, usize, usize, usize, usize, usize) {
    let s = x.shape();
    let ws = p.weight.shape();
    let (b, cin, h, w) = (s[0], s[1], s[2], s[3]);
    let (cout, k) = (ws[0], ws[2]);
    (b, cin, h, w, cout, k, h - k + 1, w - k + 1)
}

fn conv_forward(x: &Tensor, p: &LayerParams) -> Tensor {
    let (b, cin, h, w, cout, k, oh, ow) = conv_dims(x, p);
    let xd = x.data();
    let wd = p.weight.data();
    let bias = p.bias.data();
    let mut y = vec![0.0f32; b * cout * oh * ow];
    for n in 0..b {
        for co in 0..cout {
            for r in 0..oh {
                for c in 0..ow {
                    let mut acc = 0.0f32;
                    for ci in 0..cin {
                        for kr in 0..k {
                            let xrow = ((n * cin + ci) * h + r + kr) * w + c;
                            let wrow = ((co * cin + ci) * k + kr) * k;
                            for kc in 0..k {
                                acc += wd[wrow + kc] * xd[xrow + kc];
                            }
                        }
                    }
                    y[((n * cout + co) * oh + r) * ow + c] = acc + bias[co];
                }
            }
        }
    }
    Tensor::new(vec![b, cout, oh, ow], y).expect("conv output")
}

fn conv_backward(x: &Tensor, p: &LayerParams, g: &Tensor) -> (LayerParams, Tensor) {
    let (b, cin, h, w, cout, k, oh, ow) = conv_dims(x, p);
    let xd = x.data();
    let wd = p.weight.data();
    let gd = g.data();
    let mut dw = vec![0.0f32; wd.len()];
    let mut db = vec![0.0f32; cout];
    let mut dx = vec![0.0f32; xd.len()];
    for n in 0..b {
        for co in 0..cout {
            for r in 0..oh {
                for c in 0..ow {
                    let go = gd[((n * cout + co) * oh + r) * ow + c];
                    db[co] += go;
                    for ci in 0..cin {
                        for kr in 0..k {
                            let xrow = ((n * cin + ci) * h + r + kr) * w + c;
                            let wrow = ((co * cin + ci) * k + kr) * k;
                            for kc in 0..k {
                                dw[wrow + kc] += go * xd[xrow + kc];
                                dx[xrow + kc] += go * wd[wrow + kc];
                            }
                        }
                    }
                }
            }
        }
    }
    (
        LayerParams {
            weight: Tensor::new(p.weight.shape().to_vec(), dw).expect("dw"),
            bias: Tensor::new(vec![cout], db).expect("db"),
        },
        Tensor::new(x.shape().to_vec(), dx).expect("dx"),
    )
}

/// Max over each window; ties resolve to the first index in row-major order.
fn pool_forward(x: &Tensor, size: usize, stride: usize) -> (Tensor, Vec<usize>) {
    let s = x.shape();
    let (b, ch, h, w) = (s[0], s[1], s[2], s[3]);
    let oh = (h - size) / stride + 1;
    let ow = (w - size) / stride + 1;
    let xd = x.data();
    let mut y = Vec::with_capacity(b * ch * oh * ow);
    let mut arg = Vec::with_capacity(b * ch * oh * ow);
    for plane in 0..b * ch {
        let base = plane * h * w;
        for r in 0..oh {
            for c in 0..ow {
                let mut best = base + r * stride * w + c * stride;
                for kr in 0..size {
                    for kc in 0..size {
                        let idx = base + (r * stride + kr) * w + c * stride + kc;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                y.push(xd[best]);
                arg.push(best);
            }
        }
    }
    (Tensor::new(vec![b, ch, oh, ow], y).expect("pool output"), arg)
}
