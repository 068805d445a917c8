//! Declarative layer stacks with reverse-mode gradients and an Adam updater.
//!
//! Networks are plain data: a [`NetSpec`] lists the layers and a
//! [`ParamStore`] holds the named parameter tensors, so the encoder, decoder
//! and partial encoder all share one kernel. `forward` keeps every
//! intermediate activation; `backward` replays the chain in reverse. Shapes
//! are always explicit — the only implicit broadcast anywhere is the bias
//! add.
//!
//! Transposed convolution is implemented as the adjoint of convolution: the
//! scatter/gather helpers at the bottom are shared between the forward pass
//! of one and the input gradient of the other, so the pair stays consistent
//! by construction.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;
use crate::{Error, Result};

// ── Layer specs ──────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense {
        input: usize,
        output: usize,
    },
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Learnable per-channel (3-axis input) or per-feature (1-axis input)
    /// affine: `y = scale * x + shift`.
    ScaleShift {
        features: usize,
    },
    Relu,
    Sigmoid,
    Flatten,
    Reshape {
        shape: Vec<usize>,
    },
}

impl Layer {
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |expected: Vec<usize>| Error::Shape {
            context: format!("{self:?}"),
            expected,
            got: input.to_vec(),
        };
        match self {
            Layer::Dense { input: i, output } => {
                if input != [*i] {
                    return Err(bad(vec![*i]));
                }
                Ok(vec![*output])
            }
            Layer::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => {
                let [c, h, w] = three(input).ok_or_else(|| bad(vec![*in_ch, 0, 0]))?;
                if c != *in_ch || h + 2 * padding < *kernel || w + 2 * padding < *kernel {
                    return Err(bad(vec![*in_ch, *kernel, *kernel]));
                }
                Ok(vec![
                    *out_ch,
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                ])
            }
            Layer::ConvTranspose2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => {
                let [c, h, w] = three(input).ok_or_else(|| bad(vec![*in_ch, 0, 0]))?;
                let oh = (h - 1) * stride + kernel;
                let ow = (w - 1) * stride + kernel;
                if c != *in_ch || oh < 2 * padding || ow < 2 * padding {
                    return Err(bad(vec![*in_ch, *kernel, *kernel]));
                }
                Ok(vec![*out_ch, oh - 2 * padding, ow - 2 * padding])
            }
            Layer::ScaleShift { features } => {
                let leading = input[0];
                if leading != *features || (input.len() != 1 && input.len() != 3) {
                    return Err(bad(vec![*features]));
                }
                Ok(input.to_vec())
            }
            Layer::Relu | Layer::Sigmoid => Ok(input.to_vec()),
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Reshape { shape } => {
                if shape.iter().product::<usize>() != input.iter().product::<usize>() {
                    return Err(bad(shape.clone()));
                }
                Ok(shape.clone())
            }
        }
    }

    /// Parameter names and shapes contributed by this layer at position
    /// `idx` in its net.
    pub fn param_specs(&self, idx: usize) -> Vec<(String, Vec<usize>)> {
        match self {
            Layer::Dense { input, output } => vec![
                (format!("l{idx}.weight"), vec![*output, *input]),
                (format!("l{idx}.bias"), vec![*output]),
            ],
            Layer::Conv2d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => vec![
                (
                    format!("l{idx}.weight"),
                    vec![*out_ch, *in_ch, *kernel, *kernel],
                ),
                (format!("l{idx}.bias"), vec![*out_ch]),
            ],
            Layer::ConvTranspose2d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => vec![
                (
                    format!("l{idx}.weight"),
                    vec![*in_ch, *out_ch, *kernel, *kernel],
                ),
                (format!("l{idx}.bias"), vec![*out_ch]),
            ],
            Layer::ScaleShift { features } => vec![
                (format!("l{idx}.scale"), vec![*features]),
                (format!("l{idx}.shift"), vec![*features]),
            ],
            _ => Vec::new(),
        }
    }

    /// Compact token for checkpoint headers, e.g. `Conv2d(1,8,3,2,1)`.
    pub fn token(&self) -> String {
        match self {
            Layer::Dense { input, output } => format!("Dense({input},{output})"),
            Layer::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => format!("Conv2d({in_ch},{out_ch},{kernel},{stride},{padding})"),
            Layer::ConvTranspose2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => format!("ConvTranspose2d({in_ch},{out_ch},{kernel},{stride},{padding})"),
            Layer::ScaleShift { features } => format!("ScaleShift({features})"),
            Layer::Relu => "Relu".into(),
            Layer::Sigmoid => "Sigmoid".into(),
            Layer::Flatten => "Flatten".into(),
            Layer::Reshape { shape } => {
                let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
                format!("Reshape({})", dims.join(","))
            }
        }
    }

    pub fn parse_token(token: &str) -> Result<Layer> {
        let err = || Error::Checkpoint(format!("unparseable layer token {token:?}"));
        let (name, args) = match token.find('(') {
            Some(p) => {
                let inner = token[p + 1..].strip_suffix(')').ok_or_else(err)?;
                let nums: Vec<usize> = inner
                    .split(',')
                    .map(|s| s.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| err())?;
                (&token[..p], nums)
            }
            None => (token, Vec::new()),
        };
        match (name, args.as_slice()) {
            ("Dense", [i, o]) => Ok(Layer::Dense {
                input: *i,
                output: *o,
            }),
            ("Conv2d", [i, o, k, s, p]) => Ok(Layer::Conv2d {
                in_ch: *i,
                out_ch: *o,
                kernel: *k,
                stride: *s,
                padding: *p,
            }),
            ("ConvTranspose2d", [i, o, k, s, p]) => Ok(Layer::ConvTranspose2d {
                in_ch: *i,
                out_ch: *o,
                kernel: *k,
                stride: *s,
                padding: *p,
            }),
            ("ScaleShift", [f]) => Ok(Layer::ScaleShift { features: *f }),
            ("Relu", []) => Ok(Layer::Relu),
            ("Sigmoid", []) => Ok(Layer::Sigmoid),
            ("Flatten", []) => Ok(Layer::Flatten),
            ("Reshape", dims) if !dims.is_empty() => Ok(Layer::Reshape {
                shape: dims.to_vec(),
            }),
            _ => Err(err()),
        }
    }
}

fn three(shape: &[usize]) -> Option<[usize; 3]> {
    match shape {
        [a, b, c] => Some([*a, *b, *c]),
        _ => None,
    }
}

/// An ordered layer sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct NetSpec {
    pub layers: Vec<Layer>,
}

impl NetSpec {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut shape = input.to_vec();
        for layer in &self.layers {
            shape = layer.output_shape(&shape)?;
        }
        Ok(shape)
    }

    /// All parameter names and shapes, in layer order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.param_specs(i))
            .collect()
    }

    pub fn tokens(&self) -> String {
        let v: Vec<String> = self.layers.iter().map(|l| l.token()).collect();
        v.join(";")
    }

    pub fn parse_tokens(text: &str) -> Result<NetSpec> {
        let layers = text
            .split(';')
            .filter(|t| !t.is_empty())
            .map(Layer::parse_token)
            .collect::<Result<Vec<_>>>()?;
        Ok(NetSpec::new(layers))
    }
}

// ── Parameter storage ────────────────────────────────────────────────

/// Named tensors with stable insertion order. Used both for parameters and
/// for the matching gradients of a backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(&mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    /// Total number of scalar values across all tensors.
    pub fn value_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// A store with the same names and shapes, all zeros.
    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Accumulate `other` into `self`, scaled. Shapes must match.
    pub fn add_scaled(&mut self, other: &ParamStore, factor: f64) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Config("parameter store layout mismatch".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d += factor * s;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// He-style initialization: weights ~ N(0, 2/fan_in), biases and shifts
/// zero, scales one.
pub fn init_params<R: Rng>(spec: &NetSpec, rng: &mut R) -> ParamStore {
    let mut store = ParamStore::new();
    for (idx, layer) in spec.layers.iter().enumerate() {
        for (name, shape) in layer.param_specs(idx) {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".weight") {
                let fan_in = match layer {
                    Layer::Dense { input, .. } => *input,
                    Layer::Conv2d { in_ch, kernel, .. }
                    | Layer::ConvTranspose2d { in_ch, kernel, .. } => in_ch * kernel * kernel,
                    _ => 1,
                };
                let std = (2.0 / fan_in as f64).sqrt();
                (0..n)
                    .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            } else if name.ends_with(".scale") {
                vec![1.0; n]
            } else {
                vec![0.0; n]
            };
            store
                .insert(&name, Tensor::from_raw(shape, data))
                .expect("generated names are unique");
        }
    }
    store
}

// ── Forward / backward ───────────────────────────────────────────────

/// Run the net, returning the input followed by every layer output. Pure in
/// its arguments; identical inputs give bit-identical outputs.
pub fn forward(spec: &NetSpec, params: &ParamStore, input: &Tensor) -> Result<Vec<Tensor>> {
    let mut acts = Vec::with_capacity(spec.layers.len() + 1);
    acts.push(input.clone());
    for (idx, layer) in spec.layers.iter().enumerate() {
        let out = apply_layer(layer, idx, params, acts.last().unwrap())
            .map_err(|e| layer_err(idx, layer, e))?;
        acts.push(out);
    }
    Ok(acts)
}

fn layer_err(idx: usize, layer: &Layer, e: Error) -> Error {
    match e {
        Error::Shape { expected, got, .. } => Error::Shape {
            context: format!("layer {idx} ({})", layer.token()),
            expected,
            got,
        },
        other => other,
    }
}

fn param<'a>(params: &'a ParamStore, idx: usize, kind: &str) -> Result<&'a Tensor> {
    params
        .get(&format!("l{idx}.{kind}"))
        .ok_or_else(|| Error::Config(format!("missing parameter l{idx}.{kind}")))
}

fn apply_layer(layer: &Layer, idx: usize, params: &ParamStore, x: &Tensor) -> Result<Tensor> {
    let out_shape = layer.output_shape(x.shape())?;
    let out = match layer {
        Layer::Dense { input, output } => {
            let w = param(params, idx, "weight")?.data();
            let b = param(params, idx, "bias")?.data();
            let xv = x.data();
            let mut y = vec![0.0; *output];
            for (o, yo) in y.iter_mut().enumerate() {
                let row = &w[o * input..(o + 1) * input];
                let mut acc = b[o];
                for (wv, xvv) in row.iter().zip(xv) {
                    acc += wv * xvv;
                }
                *yo = acc;
            }
            y
        }
        Layer::Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
        } => {
            let [_, h, w] = three(x.shape()).unwrap();
            let w_t = param(params, idx, "weight")?.data();
            let b = param(params, idx, "bias")?.data();
            conv2d_forward(
                x.data(),
                (*in_ch, h, w),
                w_t,
                Some(b),
                (*out_ch, *kernel, *stride, *padding),
            )
        }
        Layer::ConvTranspose2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
        } => {
            let [_, h, w] = three(x.shape()).unwrap();
            let v_t = param(params, idx, "weight")?.data();
            let b = param(params, idx, "bias")?.data();
            let [oc, oh, ow] = three(&out_shape).unwrap();
            // Transposed convolution is the adjoint of convolution with the
            // same taps, so its forward pass is the conv input-scatter.
            let mut y = conv_scatter_to_input(
                x.data(),
                (*in_ch, h, w),
                v_t,
                (*in_ch, *out_ch, *kernel, *stride, *padding),
                (oc, oh, ow),
            );
            for c in 0..oc {
                let bias = b[c];
                for v in &mut y[c * oh * ow..(c + 1) * oh * ow] {
                    *v += bias;
                }
            }
            y
        }
        Layer::ScaleShift { features } => {
            let scale = param(params, idx, "scale")?.data();
            let shift = param(params, idx, "shift")?.data();
            let span = x.len() / features;
            let mut y = vec![0.0; x.len()];
            for c in 0..*features {
                let (s, t) = (scale[c], shift[c]);
                for (yo, xi) in y[c * span..(c + 1) * span]
                    .iter_mut()
                    .zip(&x.data()[c * span..(c + 1) * span])
                {
                    *yo = s * xi + t;
                }
            }
            y
        }
        Layer::Relu => x.data().iter().map(|v| v.max(0.0)).collect(),
        Layer::Sigmoid => x.data().iter().map(|v| sigmoid(*v)).collect(),
        Layer::Flatten | Layer::Reshape { .. } => x.data().to_vec(),
    };
    Ok(Tensor::from_raw(out_shape, out))
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Gradients of a scalar loss with respect to every parameter and the input,
/// given the activations of a matching [`forward`] call and the loss
/// gradient at the output.
pub fn backward(
    spec: &NetSpec,
    params: &ParamStore,
    acts: &[Tensor],
    output_grad: &Tensor,
) -> Result<(ParamStore, Tensor)> {
    backward_impl(spec, params, acts, output_grad, true)
}

/// Input gradient only; parameter gradients are skipped (frozen nets).
pub fn backward_input(
    spec: &NetSpec,
    params: &ParamStore,
    acts: &[Tensor],
    output_grad: &Tensor,
) -> Result<Tensor> {
    Ok(backward_impl(spec, params, acts, output_grad, false)?.1)
}

fn backward_impl(
    spec: &NetSpec,
    params: &ParamStore,
    acts: &[Tensor],
    output_grad: &Tensor,
    want_params: bool,
) -> Result<(ParamStore, Tensor)> {
    if acts.len() != spec.layers.len() + 1 {
        return Err(Error::Config(format!(
            "activation count {} does not match spec with {} layers",
            acts.len(),
            spec.layers.len()
        )));
    }
    if output_grad.shape() != acts[acts.len() - 1].shape() {
        return Err(Error::Shape {
            context: "output gradient".into(),
            expected: acts[acts.len() - 1].shape().to_vec(),
            got: output_grad.shape().to_vec(),
        });
    }
    let mut grads = params.zeros_like();
    let mut g = output_grad.clone();
    for (idx, layer) in spec.layers.iter().enumerate().rev() {
        g = layer_backward(
            layer,
            idx,
            params,
            &acts[idx],
            &acts[idx + 1],
            &g,
            &mut grads,
            want_params,
        )
        .map_err(|e| layer_err(idx, layer, e))?;
    }
    Ok((grads, g))
}

#[allow(clippy::too_many_arguments)]
fn layer_backward(
    layer: &Layer,
    idx: usize,
    params: &ParamStore,
    x: &Tensor,
    y: &Tensor,
    g: &Tensor,
    grads: &mut ParamStore,
    want_params: bool,
) -> Result<Tensor> {
    if g.shape() != y.shape() {
        return Err(Error::Shape {
            context: "upstream gradient".into(),
            expected: y.shape().to_vec(),
            got: g.shape().to_vec(),
        });
    }
    let gx = match layer {
        Layer::Dense { input, output } => {
            let w = param(params, idx, "weight")?.data();
            let gv = g.data();
            let xv = x.data();
            if want_params {
                let dw = grads.get_mut(&format!("l{idx}.weight")).unwrap().data_mut();
                for o in 0..*output {
                    let go = gv[o];
                    let row = &mut dw[o * input..(o + 1) * input];
                    for (d, xi) in row.iter_mut().zip(xv) {
                        *d += go * xi;
                    }
                }
                let db = grads.get_mut(&format!("l{idx}.bias")).unwrap().data_mut();
                for (d, go) in db.iter_mut().zip(gv) {
                    *d += go;
                }
            }
            let mut gx = vec![0.0; *input];
            for o in 0..*output {
                let go = gv[o];
                let row = &w[o * input..(o + 1) * input];
                for (d, wv) in gx.iter_mut().zip(row) {
                    *d += go * wv;
                }
            }
            Tensor::from_raw(x.shape().to_vec(), gx)
        }
        Layer::Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
        } => {
            let [_, h, w] = three(x.shape()).unwrap();
            let [_, oh, ow] = three(y.shape()).unwrap();
            let w_t = param(params, idx, "weight")?.data();
            if want_params {
                conv2d_weight_grad(
                    x.data(),
                    (*in_ch, h, w),
                    g.data(),
                    (*out_ch, oh, ow),
                    (*kernel, *stride, *padding),
                    grads.get_mut(&format!("l{idx}.weight")).unwrap().data_mut(),
                );
                let db = grads.get_mut(&format!("l{idx}.bias")).unwrap().data_mut();
                for o in 0..*out_ch {
                    db[o] += g.data()[o * oh * ow..(o + 1) * oh * ow].iter().sum::<f64>();
                }
            }
            // Input gradient of conv == transposed-conv forward, same taps.
            let gx = conv_scatter_to_input(
                g.data(),
                (*out_ch, oh, ow),
                w_t,
                (*out_ch, *in_ch, *kernel, *stride, *padding),
                (*in_ch, h, w),
            );
            Tensor::from_raw(x.shape().to_vec(), gx)
        }
        Layer::ConvTranspose2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
        } => {
            let [_, h, w] = three(x.shape()).unwrap();
            let [_, oh, ow] = three(y.shape()).unwrap();
            let v_t = param(params, idx, "weight")?.data();
            if want_params {
                // dV[c,m,u,v] = sum_{i,j} x[c,i,j] * g[m, i*s-p+u, j*s-p+v]
                conv2d_weight_grad(
                    g.data(),
                    (*out_ch, oh, ow),
                    x.data(),
                    (*in_ch, h, w),
                    (*kernel, *stride, *padding),
                    grads.get_mut(&format!("l{idx}.weight")).unwrap().data_mut(),
                );
                let db = grads.get_mut(&format!("l{idx}.bias")).unwrap().data_mut();
                for o in 0..*out_ch {
                    db[o] += g.data()[o * oh * ow..(o + 1) * oh * ow].iter().sum::<f64>();
                }
            }
            // Input gradient of tconv == conv forward with the same taps.
            let gx = conv2d_forward(
                g.data(),
                (*out_ch, oh, ow),
                v_t,
                None,
                (*in_ch, *kernel, *stride, *padding),
            );
            Tensor::from_raw(x.shape().to_vec(), gx)
        }
        Layer::ScaleShift { features } => {
            let scale = param(params, idx, "scale")?.data();
            let span = x.len() / features;
            if want_params {
                let ds = grads.get_mut(&format!("l{idx}.scale")).unwrap().data_mut();
                for c in 0..*features {
                    ds[c] += g.data()[c * span..(c + 1) * span]
                        .iter()
                        .zip(&x.data()[c * span..(c + 1) * span])
                        .map(|(gv, xv)| gv * xv)
                        .sum::<f64>();
                }
                let dt = grads.get_mut(&format!("l{idx}.shift")).unwrap().data_mut();
                for c in 0..*features {
                    dt[c] += g.data()[c * span..(c + 1) * span].iter().sum::<f64>();
                }
            }
            let mut gx = vec![0.0; x.len()];
            for c in 0..*features {
                let s = scale[c];
                for (d, gv) in gx[c * span..(c + 1) * span]
                    .iter_mut()
                    .zip(&g.data()[c * span..(c + 1) * span])
                {
                    *d = s * gv;
                }
            }
            Tensor::from_raw(x.shape().to_vec(), gx)
        }
        Layer::Relu => {
            let gx: Vec<f64> = x
                .data()
                .iter()
                .zip(g.data())
                .map(|(xv, gv)| if *xv > 0.0 { *gv } else { 0.0 })
                .collect();
            Tensor::from_raw(x.shape().to_vec(), gx)
        }
        Layer::Sigmoid => {
            let gx: Vec<f64> = y
                .data()
                .iter()
                .zip(g.data())
                .map(|(yv, gv)| yv * (1.0 - yv) * gv)
                .collect();
            Tensor::from_raw(x.shape().to_vec(), gx)
        }
        Layer::Flatten | Layer::Reshape { .. } => Tensor::from_raw(x.shape().to_vec(), g.data().to_vec()),
    };
    Ok(gx)
}

// ── Adam ─────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment accumulators matching one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One Adam update with bias correction. The caller serializes access; this
/// mutates `params` and `state` in place.
pub fn adam_step(params: &mut ParamStore, grads: &ParamStore, state: &mut AdamState) -> Result<()> {
    if params.names() != grads.names() {
        return Err(Error::Config("gradient store layout mismatch".into()));
    }
    for (name, g) in grads.iter() {
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient for parameter {name:?}")));
        }
        let p = params.get(name).unwrap();
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                context: format!("gradient for {name:?}"),
                expected: p.shape().to_vec(),
                got: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (slot, name) in params.names().to_vec().iter().enumerate() {
        let g = grads.get(name).unwrap().data().to_vec();
        let m = state.m[slot].data_mut();
        let v = state.v[slot].data_mut();
        let p = params.get_mut(name).unwrap().data_mut();
        for i in 0..g.len() {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
        }
    }
    Ok(())
}

// ── Convolution cores ────────────────────────────────────────────────
//
// Shared by Conv2d and ConvTranspose2d so that "tconv forward" and "conv
// input gradient" are literally the same code path (and vice versa).

/// out[o,oy,ox] = bias[o] + sum_{c,u,v} w[o,c,u,v] * x[c, oy*s-p+u, ox*s-p+v]
fn conv2d_forward(
    x: &[f64],
    (cin, h, w): (usize, usize, usize),
    weights: &[f64],
    bias: Option<&[f64]>,
    (cout, k, s, p): (usize, usize, usize, usize),
) -> Vec<f64> {
    let oh = (h + 2 * p - k) / s + 1;
    let ow = (w + 2 * p - k) / s + 1;
    let mut out = vec![0.0; cout * oh * ow];
    for o in 0..cout {
        let b = bias.map_or(0.0, |b| b[o]);
        for oy in 0..oh {
            let iy0 = (oy * s) as isize - p as isize;
            for ox in 0..ow {
                let ix0 = (ox * s) as isize - p as isize;
                let mut acc = b;
                for c in 0..cin {
                    let xc = &x[c * h * w..(c + 1) * h * w];
                    let wbase = ((o * cin + c) * k) * k;
                    for u in 0..k {
                        let iy = iy0 + u as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &xc[iy as usize * w..(iy as usize + 1) * w];
                        let wrow = &weights[wbase + u * k..wbase + (u + 1) * k];
                        for v in 0..k {
                            let ix = ix0 + v as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += wrow[v] * row[ix as usize];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

/// Scatter form, the adjoint of [`conv2d_forward`]:
/// out[c,iy,ix] += sum over (o,oy,ox,u,v) with iy=oy*s-p+u, ix=ox*s-p+v of
/// w[o,c,u,v] * g[o,oy,ox]. Weight layout is `[dim0, dim1, k, k]` where
/// `dim0` indexes `g`'s channels and `dim1` the output's.
fn conv_scatter_to_input(
    g: &[f64],
    (cg, gh, gw): (usize, usize, usize),
    weights: &[f64],
    (dim0, dim1, k, s, p): (usize, usize, usize, usize, usize),
    (cout, oh, ow): (usize, usize, usize),
) -> Vec<f64> {
    debug_assert_eq!(cg, dim0);
    debug_assert_eq!(cout, dim1);
    let mut out = vec![0.0; cout * oh * ow];
    for o in 0..cg {
        let gc = &g[o * gh * gw..(o + 1) * gh * gw];
        for c in 0..cout {
            let wbase = ((o * dim1 + c) * k) * k;
            let oc = &mut out[c * oh * ow..(c + 1) * oh * ow];
            for gy in 0..gh {
                let iy0 = (gy * s) as isize - p as isize;
                for gx in 0..gw {
                    let gv = gc[gy * gw + gx];
                    if gv == 0.0 {
                        continue;
                    }
                    let ix0 = (gx * s) as isize - p as isize;
                    for u in 0..k {
                        let iy = iy0 + u as isize;
                        if iy < 0 || iy >= oh as isize {
                            continue;
                        }
                        for v in 0..k {
                            let ix = ix0 + v as isize;
                            if ix < 0 || ix >= ow as isize {
                                continue;
                            }
                            oc[iy as usize * ow + ix as usize] += weights[wbase + u * k + v] * gv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// dW[o,c,u,v] += sum_{oy,ox} g[o,oy,ox] * x[c, oy*s-p+u, ox*s-p+v].
fn conv2d_weight_grad(
    x: &[f64],
    (cin, h, w): (usize, usize, usize),
    g: &[f64],
    (cout, oh, ow): (usize, usize, usize),
    (k, s, p): (usize, usize, usize),
    dw: &mut [f64],
) {
    debug_assert_eq!(dw.len(), cout * cin * k * k);
    for o in 0..cout {
        let gc = &g[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..cin {
            let xc = &x[c * h * w..(c + 1) * h * w];
            let wbase = ((o * cin + c) * k) * k;
            for oy in 0..oh {
                let iy0 = (oy * s) as isize - p as isize;
                for ox in 0..ow {
                    let gv = gc[oy * ow + ox];
                    if gv == 0.0 {
                        continue;
                    }
                    let ix0 = (ox * s) as isize - p as isize;
                    for u in 0..k {
                        let iy = iy0 + u as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for v in 0..k {
                            let ix = ix0 + v as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dw[wbase + u * k + v] += gv * xc[iy as usize * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
}
