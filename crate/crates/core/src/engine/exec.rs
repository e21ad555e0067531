use std::fmt::Debug;
use std::ops::AddAssign;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::model::{LayerKind, LayerOp, ModelGraph, ScaleParams, Window};

/// Scalar type the executor computes in: `f32` normally, `f64` for
/// numerical checks.
pub trait Real: Float + AddAssign + Default + Debug + Send + Sync + 'static {
    fn of_f32(v: f32) -> Self;
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn as_f32(self) -> f32;
}

impl Real for f32 {
    fn of_f32(v: f32) -> Self {
        v
    }
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn as_f32(self) -> f32 {
        self
    }
}

impl Real for f64 {
    fn of_f32(v: f32) -> Self {
        v as f64
    }
    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
}

/// `[channels, height, width]`; flat tensors are `[units, 1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn of(shape: &[usize]) -> Self {
        match shape {
            [c] => Dims { c: *c, h: 1, w: 1 },
            [c, h, w] => Dims { c: *c, h: *h, w: *w },
            _ => panic!("unsupported tensor rank {}", shape.len()),
        }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ExecLayer<T> {
    pub op: LayerOp,
    pub inputs: Vec<usize>,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

/// A model compiled for execution in scalar type `T`.
#[derive(Debug, Clone)]
pub struct Executor<T> {
    pub(crate) layers: Vec<ExecLayer<T>>,
    pub(crate) dims: Vec<Dims>,
    pub(crate) input_shape: Vec<usize>,
    pub(crate) class_count: usize,
}

/// Every layer's output for one sample, plus routing recorded on the way.
#[derive(Debug, Clone)]
pub struct Activations<T> {
    pub outputs: Vec<Vec<T>>,
    /// Max-pool: input plane position chosen per output element.
    /// Maximum: input slot chosen per output element.
    pub routes: Vec<Option<Vec<u32>>>,
}

impl<T> Activations<T> {
    pub fn logits(&self) -> &[T] {
        self.outputs.last().expect("model has layers")
    }
}

/// Per-layer parameter gradients (empty vectors for weightless layers).
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub weights: Vec<Vec<T>>,
    pub bias: Vec<Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(exec: &Executor<T>) -> Self {
        Self {
            weights: exec.layers.iter().map(|l| vec![T::zero(); l.weights.len()]).collect(),
            bias: exec.layers.iter().map(|l| vec![T::zero(); l.bias.len()]).collect(),
        }
    }

    pub fn scale(&mut self, k: T) {
        for v in self.weights.iter_mut().chain(self.bias.iter_mut()) {
            for g in v.iter_mut() {
                *g = *g * k;
            }
        }
    }
}

impl<T: Real> Executor<T> {
    pub fn new(model: &ModelGraph) -> Result<Self> {
        let layout = model.layout()?;
        let layers = model
            .layers
            .iter()
            .map(|l| ExecLayer {
                op: l.op.clone(),
                inputs: l.inputs.clone(),
                weights: l
                    .weights
                    .as_ref()
                    .map(|w| w.data().iter().map(|&v| T::of_f32(v)).collect())
                    .unwrap_or_default(),
                bias: match (&l.bias, &l.op) {
                    (Some(b), _) => b.data().iter().map(|&v| T::of_f32(v)).collect(),
                    (None, LayerOp::Conv2D { out_channels, .. }) => vec![T::zero(); *out_channels],
                    (None, LayerOp::FullyConnected { out_features, .. }) => {
                        vec![T::zero(); *out_features]
                    }
                    (None, _) => Vec::new(),
                },
            })
            .collect();
        Ok(Self {
            layers,
            dims: layout.shapes.iter().map(|s| Dims::of(s)).collect(),
            input_shape: model.input_shape.clone(),
            class_count: model.class_count,
        })
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn dims(&self, layer: usize) -> Dims {
        self.dims[layer]
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn weights(&self, layer: usize) -> &[T] {
        &self.layers[layer].weights
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut Vec<T> {
        &mut self.layers[layer].weights
    }

    pub fn bias(&self, layer: usize) -> &[T] {
        &self.layers[layer].bias
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut Vec<T> {
        &mut self.layers[layer].bias
    }

    /// Writes the executor's parameters back into a copy of `template`.
    pub fn to_model(&self, template: &ModelGraph) -> ModelGraph {
        let mut out = template.clone();
        for (spec, layer) in out.layers.iter_mut().zip(&self.layers) {
            if let Some(w) = spec.weights.as_mut() {
                for (d, s) in w.data_mut().iter_mut().zip(&layer.weights) {
                    *d = s.as_f32();
                }
            }
            if let Some(b) = spec.bias.as_mut() {
                for (d, s) in b.data_mut().iter_mut().zip(&layer.bias) {
                    *d = s.as_f32();
                }
            }
        }
        out
    }

    pub fn forward(&self, input: &[T]) -> Result<Activations<T>> {
        let expected: usize = self.input_shape.iter().product();
        if input.len() != expected {
            return Err(Error::Shape {
                expected: self.input_shape.clone(),
                actual: vec![input.len()],
            });
        }
        let n = self.layers.len();
        let mut outputs: Vec<Vec<T>> = Vec::with_capacity(n);
        let mut routes = Vec::with_capacity(n);
        for (index, layer) in self.layers.iter().enumerate() {
            let od = self.dims[index];
            let mut out = vec![T::zero(); od.len()];
            let mut route = None;
            match &layer.op {
                LayerOp::Input => out.copy_from_slice(input),
                LayerOp::Conv2D {
                    in_channels,
                    window,
                    ..
                } => {
                    let x = &outputs[layer.inputs[0]];
                    let xd = self.dims[layer.inputs[0]];
                    debug_assert_eq!(xd.c, *in_channels);
                    conv_forward(x, xd, &layer.weights, &layer.bias, window, &mut out, od);
                }
                LayerOp::FullyConnected { in_features, .. } => {
                    let x = &outputs[layer.inputs[0]];
                    for (o, y) in out.iter_mut().enumerate() {
                        let row = &layer.weights[o * in_features..(o + 1) * in_features];
                        let mut acc = layer.bias[o];
                        for (w, v) in row.iter().zip(x) {
                            acc += *w * *v;
                        }
                        *y = acc;
                    }
                }
                LayerOp::AvgPool2D { window } => {
                    let xd = self.dims[layer.inputs[0]];
                    avg_pool_forward(&outputs[layer.inputs[0]], xd, window, &mut out, od);
                }
                LayerOp::MaxPool2D { window } => {
                    let xd = self.dims[layer.inputs[0]];
                    let mut arg = vec![0u32; od.len()];
                    max_pool_forward(&outputs[layer.inputs[0]], xd, window, &mut out, &mut arg, od);
                    route = Some(arg);
                }
                LayerOp::ReLU => {
                    for (y, &v) in out.iter_mut().zip(&outputs[layer.inputs[0]]) {
                        *y = if v > T::zero() { v } else { T::zero() };
                    }
                }
                LayerOp::Scale(p) => {
                    scale_forward(&outputs[layer.inputs[0]], p, &mut out, od);
                }
                LayerOp::Add => {
                    for &src in &layer.inputs {
                        for (y, &v) in out.iter_mut().zip(&outputs[src]) {
                            *y += v;
                        }
                    }
                }
                LayerOp::Maximum => {
                    let mut arg = vec![0u32; od.len()];
                    out.copy_from_slice(&outputs[layer.inputs[0]]);
                    for (slot, &src) in layer.inputs.iter().enumerate().skip(1) {
                        for ((y, a), &v) in out.iter_mut().zip(arg.iter_mut()).zip(&outputs[src]) {
                            if v > *y {
                                *y = v;
                                *a = slot as u32;
                            }
                        }
                    }
                    route = Some(arg);
                }
                LayerOp::Flatten | LayerOp::Output => {
                    out.copy_from_slice(&outputs[layer.inputs[0]]);
                }
            }
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { layer: index });
            }
            outputs.push(out);
            routes.push(route);
        }
        Ok(Activations { outputs, routes })
    }

    /// Backpropagates `grad_logits` (d loss / d logits), accumulating
    /// parameter gradients into `grads`. Returns d loss / d input.
    pub fn backward(&self, acts: &Activations<T>, grad_logits: &[T], grads: &mut Gradients<T>) -> Vec<T> {
        let n = self.layers.len();
        let mut g: Vec<Vec<T>> = self.dims.iter().map(|d| vec![T::zero(); d.len()]).collect();
        g[n - 1].copy_from_slice(grad_logits);
        for index in (1..n).rev() {
            let layer = &self.layers[index];
            let od = self.dims[index];
            let gy = std::mem::take(&mut g[index]);
            match &layer.op {
                LayerOp::Input => unreachable!("input is layer 0"),
                LayerOp::Conv2D { window, .. } => {
                    let src = layer.inputs[0];
                    let xd = self.dims[src];
                    conv_backward(
                        &acts.outputs[src],
                        xd,
                        &layer.weights,
                        window,
                        &gy,
                        od,
                        &mut grads.weights[index],
                        &mut grads.bias[index],
                        &mut g[src],
                    );
                }
                LayerOp::FullyConnected { in_features, .. } => {
                    let src = layer.inputs[0];
                    let x = &acts.outputs[src];
                    for (o, &go) in gy.iter().enumerate() {
                        grads.bias[index][o] += go;
                        let base = o * in_features;
                        for i in 0..*in_features {
                            grads.weights[index][base + i] += go * x[i];
                            g[src][i] += go * layer.weights[base + i];
                        }
                    }
                }
                LayerOp::AvgPool2D { window } => {
                    let src = layer.inputs[0];
                    avg_pool_backward(self.dims[src], window, &gy, od, &mut g[src]);
                }
                LayerOp::MaxPool2D { .. } => {
                    let src = layer.inputs[0];
                    let arg = acts.routes[index].as_ref().expect("max-pool route");
                    let (ip, op) = (self.dims[src].plane(), od.plane());
                    for (k, &gv) in gy.iter().enumerate() {
                        let c = k / op;
                        g[src][c * ip + arg[k] as usize] += gv;
                    }
                }
                LayerOp::ReLU => {
                    let src = layer.inputs[0];
                    for ((gx, &gv), &x) in g[src].iter_mut().zip(&gy).zip(&acts.outputs[src]) {
                        if x > T::zero() {
                            *gx += gv;
                        }
                    }
                }
                LayerOp::Scale(p) => {
                    let src = layer.inputs[0];
                    let plane = od.plane();
                    for (k, &gv) in gy.iter().enumerate() {
                        let c = k / plane;
                        g[src][k] += gv * T::of_f32(p.gamma[c]) / T::of_f32(p.std[c]);
                    }
                }
                LayerOp::Add => {
                    for &src in &layer.inputs {
                        for (gx, &gv) in g[src].iter_mut().zip(&gy) {
                            *gx += gv;
                        }
                    }
                }
                LayerOp::Maximum => {
                    let arg = acts.routes[index].as_ref().expect("maximum route");
                    for (k, &gv) in gy.iter().enumerate() {
                        let src = layer.inputs[arg[k] as usize];
                        g[src][k] += gv;
                    }
                }
                LayerOp::Flatten | LayerOp::Output => {
                    let src = layer.inputs[0];
                    for (gx, &gv) in g[src].iter_mut().zip(&gy) {
                        *gx += gv;
                    }
                }
            }
        }
        std::mem::take(&mut g[0])
    }

    pub fn kind(&self, layer: usize) -> LayerKind {
        self.layers[layer].op.kind()
    }
}

/// Output positions `ow` whose input column `ow * stride + k - pad` lies in `[0, len)`.
fn valid_range(out_len: usize, in_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if in_len + pad > k {
        (in_len + pad - k).div_ceil(stride).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn conv_forward<T: Real>(x: &[T], xd: Dims, w: &[T], b: &[T], win: &Window, out: &mut [T], od: Dims) {
    let [kh, kw] = win.kernel;
    let (s, p) = (win.stride, win.padding);
    let (ip, op) = (xd.plane(), od.plane());
    for o in 0..od.c {
        let plane = &mut out[o * op..(o + 1) * op];
        plane.fill(b[o]);
        for i in 0..xd.c {
            let xp = &x[i * ip..(i + 1) * ip];
            for kr in 0..kh {
                let (oh_lo, oh_hi) = valid_range(od.h, xd.h, kr, s, p);
                for kc in 0..kw {
                    let wv = w[((o * xd.c + i) * kh + kr) * kw + kc];
                    let (ow_lo, ow_hi) = valid_range(od.w, xd.w, kc, s, p);
                    for oh in oh_lo..oh_hi {
                        let ih = oh * s + kr - p;
                        let row = &xp[ih * xd.w..(ih + 1) * xd.w];
                        let orow = &mut plane[oh * od.w..(oh + 1) * od.w];
                        if s == 1 {
                            let off = kc as isize - p as isize;
                            for ow in ow_lo..ow_hi {
                                orow[ow] += wv * row[(ow as isize + off) as usize];
                            }
                        } else {
                            for ow in ow_lo..ow_hi {
                                orow[ow] += wv * row[ow * s + kc - p];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Real>(
    x: &[T],
    xd: Dims,
    w: &[T],
    win: &Window,
    gy: &[T],
    od: Dims,
    gw: &mut [T],
    gb: &mut [T],
    gx: &mut [T],
) {
    let [kh, kw] = win.kernel;
    let (s, p) = (win.stride, win.padding);
    let (ip, op) = (xd.plane(), od.plane());
    for o in 0..od.c {
        let gplane = &gy[o * op..(o + 1) * op];
        let mut acc = T::zero();
        for &v in gplane {
            acc += v;
        }
        gb[o] += acc;
        for i in 0..xd.c {
            let xp = &x[i * ip..(i + 1) * ip];
            for kr in 0..kh {
                let (oh_lo, oh_hi) = valid_range(od.h, xd.h, kr, s, p);
                for kc in 0..kw {
                    let widx = ((o * xd.c + i) * kh + kr) * kw + kc;
                    let wv = w[widx];
                    let (ow_lo, ow_hi) = valid_range(od.w, xd.w, kc, s, p);
                    let mut gacc = T::zero();
                    for oh in oh_lo..oh_hi {
                        let ih = oh * s + kr - p;
                        let grow = &gplane[oh * od.w..(oh + 1) * od.w];
                        let base = i * ip + ih * xd.w;
                        for ow in ow_lo..ow_hi {
                            let iw = ow * s + kc - p;
                            gacc += grow[ow] * xp[ih * xd.w + iw];
                            gx[base + iw] += wv * grow[ow];
                        }
                    }
                    gw[widx] += gacc;
                }
            }
        }
    }
}

fn avg_pool_forward<T: Real>(x: &[T], xd: Dims, win: &Window, out: &mut [T], od: Dims) {
    for_each_window(xd, win, od, |k, cells| {
        let c = k / od.plane();
        let base = c * xd.plane();
        let mut acc = T::zero();
        let mut n = 0usize;
        for pos in cells {
            acc += x[base + pos];
            n += 1;
        }
        out[k] = acc / T::of_f64(n as f64);
    });
}

fn avg_pool_backward<T: Real>(xd: Dims, win: &Window, gy: &[T], od: Dims, gx: &mut [T]) {
    for_each_window(xd, win, od, |k, cells| {
        let c = k / od.plane();
        let base = c * xd.plane();
        let cells: Vec<usize> = cells.collect();
        let share = gy[k] / T::of_f64(cells.len() as f64);
        for pos in cells {
            gx[base + pos] += share;
        }
    });
}

fn max_pool_forward<T: Real>(x: &[T], xd: Dims, win: &Window, out: &mut [T], arg: &mut [u32], od: Dims) {
    for_each_window(xd, win, od, |k, cells| {
        let c = k / od.plane();
        let base = c * xd.plane();
        let mut best: Option<(usize, T)> = None;
        for pos in cells {
            let v = x[base + pos];
            // Strict comparison keeps the lowest spatial index on ties.
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((pos, v));
            }
        }
        let (pos, v) = best.expect("pool window covers at least one cell");
        out[k] = v;
        arg[k] = pos as u32;
    });
}

/// Calls `f(output_index, valid input plane positions)` for every pooled output.
fn for_each_window<F>(xd: Dims, win: &Window, od: Dims, mut f: F)
where
    F: FnMut(usize, &mut dyn Iterator<Item = usize>),
{
    let [kh, kw] = win.kernel;
    let (s, p) = (win.stride as isize, win.padding as isize);
    for c in 0..od.c {
        for oh in 0..od.h {
            for ow in 0..od.w {
                let k = (c * od.h + oh) * od.w + ow;
                let r0 = oh as isize * s - p;
                let c0 = ow as isize * s - p;
                let mut cells = (0..kh as isize).flat_map(move |dr| {
                    (0..kw as isize).filter_map(move |dc| {
                        let (r, cc) = (r0 + dr, c0 + dc);
                        (r >= 0 && cc >= 0 && (r as usize) < xd.h && (cc as usize) < xd.w)
                            .then(|| r as usize * xd.w + cc as usize)
                    })
                });
                f(k, &mut cells);
            }
        }
    }
}

fn scale_forward<T: Real>(x: &[T], p: &ScaleParams, out: &mut [T], od: Dims) {
    let plane = od.plane();
    for (k, (y, &v)) in out.iter_mut().zip(x).enumerate() {
        let c = k / plane;
        *y = (v - T::of_f32(p.mean[c])) / T::of_f32(p.std[c]) * T::of_f32(p.gamma[c])
            + T::of_f32(p.beta[c]);
    }
}

/// Softmax cross-entropy of one sample; returns the loss and d loss / d logits.
pub fn softmax_cross_entropy<T: Real>(logits: &[T], label: usize) -> (T, Vec<T>) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let mut sum = T::zero();
    for &e in &exps {
        sum += e;
    }
    let loss = sum.ln() - (logits[label] - max);
    let mut grad: Vec<T> = exps.iter().map(|&e| e / sum).collect();
    grad[label] = grad[label] - T::one();
    (loss, grad)
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
