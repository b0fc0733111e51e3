use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Linear {
        input: usize,
        output: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    Relu,
    Dropout {
        rate: f64,
    },
    Flatten,
}

impl LayerSpec {
    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let geometry = |msg: String| Err(Error::Shape(msg));
        match *self {
            LayerSpec::Linear { input: i, output } => {
                if input != [i] {
                    return geometry(format!("linear({i}->{output}) got input {input:?}"));
                }
                if output == 0 {
                    return geometry("linear layer with zero outputs".into());
                }
                Ok(vec![output])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let [c, h, w] = *input else {
                    return geometry(format!("conv2d needs [C,H,W] input, got {input:?}"));
                };
                if c != in_channels || out_channels == 0 || kernel == 0 || stride == 0 {
                    return geometry(format!(
                        "conv2d({in_channels}->{out_channels}, k{kernel}, s{stride}) got input {input:?}"
                    ));
                }
                let (ho, wo) = (
                    window_count(h + 2 * padding, kernel, stride),
                    window_count(w + 2 * padding, kernel, stride),
                );
                match (ho, wo) {
                    (Some(ho), Some(wo)) => Ok(vec![out_channels, ho, wo]),
                    _ => geometry(format!("conv2d kernel {kernel} does not fit input {input:?}")),
                }
            }
            LayerSpec::MaxPool2d { kernel, stride } => {
                let [c, h, w] = *input else {
                    return geometry(format!("maxpool2d needs [C,H,W] input, got {input:?}"));
                };
                if kernel == 0 || stride == 0 {
                    return geometry("maxpool2d with zero kernel or stride".into());
                }
                match (window_count(h, kernel, stride), window_count(w, kernel, stride)) {
                    (Some(ho), Some(wo)) => Ok(vec![c, ho, wo]),
                    _ => geometry(format!("maxpool2d kernel {kernel} does not fit input {input:?}")),
                }
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(Error::Config(format!("dropout rate {rate} outside [0,1)")));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    pub(crate) fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Linear { .. } | LayerSpec::Conv2d { .. })
    }
}

fn window_count(len: usize, kernel: usize, stride: usize) -> Option<usize> {
    (len >= kernel).then(|| (len - kernel) / stride + 1)
}

#[derive(Clone, Debug)]
enum Cache {
    Empty,
    Input(Tensor),
    Pool { argmax: Vec<usize>, input_len: usize },
    Mask(Vec<f64>),
}

#[derive(Clone, Debug)]
pub(crate) struct Layer {
    pub spec: LayerSpec,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
    pub grad_weight: Option<Tensor>,
    pub grad_bias: Option<Tensor>,
    cache: Cache,
}

pub(crate) enum Init {
    He,
    Xavier,
}

impl Layer {
    pub fn new(spec: LayerSpec, in_shape: Vec<usize>) -> Result<Self> {
        let out_shape = spec.output_shape(&in_shape)?;
        let (weight, bias) = match spec {
            LayerSpec::Linear { input, output } => (
                Some(Tensor::zeros(vec![output, input])),
                Some(Tensor::zeros(vec![output])),
            ),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => (
                Some(Tensor::zeros(vec![out_channels, in_channels, kernel, kernel])),
                Some(Tensor::zeros(vec![out_channels])),
            ),
            _ => (None, None),
        };
        Ok(Layer {
            spec,
            in_shape,
            out_shape,
            grad_weight: weight.as_ref().map(|w| Tensor::zeros(w.shape().to_vec())),
            grad_bias: bias.as_ref().map(|b| Tensor::zeros(b.shape().to_vec())),
            weight,
            bias,
            cache: Cache::Empty,
        })
    }

    pub fn init(&mut self, scheme: Init, rng: &mut ChaCha8Rng) {
        let Some(w) = self.weight.as_mut() else {
            return;
        };
        let fan_out = w.shape()[0];
        let fan_in = w.len() / fan_out;
        let receptive = match self.spec {
            LayerSpec::Conv2d { kernel, .. } => kernel * kernel,
            _ => 1,
        };
        let std = match scheme {
            Init::He => (2.0 / fan_in as f64).sqrt(),
            Init::Xavier => (2.0 / (fan_in + fan_out * receptive) as f64).sqrt(),
        };
        let normal = Normal::new(0.0, std).expect("finite std");
        for v in w.data_mut() {
            *v = normal.sample(rng);
        }
        if let Some(b) = self.bias.as_mut() {
            b.data_mut().fill(0.0);
        }
    }

    pub fn clear_cache(&mut self) {
        self.cache = Cache::Empty;
    }

    pub fn has_cache(&self) -> bool {
        !matches!(self.cache, Cache::Empty)
    }

    /// Forward pass for a batch. `rng` is `Some` in train mode, which also
    /// records what backward needs.
    pub fn forward(&mut self, x: Tensor, rng: Option<&mut ChaCha8Rng>) -> Tensor {
        let train = rng.is_some();
        match self.spec {
            LayerSpec::Dropout { rate } => match rng {
                Some(rng) if rate > 0.0 => {
                    let keep = 1.0 / (1.0 - rate);
                    let mask: Vec<f64> = (0..x.len())
                        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                        .collect();
                    let mut y = x;
                    for (v, m) in y.data_mut().iter_mut().zip(&mask) {
                        *v *= m;
                    }
                    self.cache = Cache::Mask(mask);
                    y
                }
                Some(_) => {
                    self.cache = Cache::Mask(Vec::new());
                    x
                }
                None => x,
            },
            LayerSpec::Relu => {
                let mut y = x;
                let mut mask = Vec::new();
                if train {
                    mask = y.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
                }
                for v in y.data_mut() {
                    *v = v.max(0.0);
                }
                if train {
                    self.cache = Cache::Mask(mask);
                }
                y
            }
            _ => {
                let y = self.infer(&x);
                if train {
                    self.cache = match self.spec {
                        LayerSpec::MaxPool2d { .. } => Cache::Pool {
                            argmax: self.pool_argmax(&x),
                            input_len: x.len(),
                        },
                        _ => Cache::Input(x),
                    };
                }
                y
            }
        }
    }

    /// Eval-mode forward that leaves the layer untouched.
    pub fn infer(&self, x: &Tensor) -> Tensor {
        let n = x.rows();
        let mut out_shape = vec![n];
        out_shape.extend_from_slice(&self.out_shape);
        match self.spec {
            LayerSpec::Linear { input, output } => {
                let w = self.weight.as_ref().expect("linear weight");
                let b = self.bias.as_ref().expect("linear bias");
                let mut y = vec![0.0; n * output];
                for row in y.chunks_mut(output) {
                    row.copy_from_slice(b.data());
                }
                gemm(n, input, output, x.data(), false, w.data(), true, &mut y, true);
                Tensor::new(out_shape, y).expect("linear output shape")
            }
            LayerSpec::Conv2d { .. } => self.conv_forward(x, out_shape),
            LayerSpec::MaxPool2d { .. } => {
                let argmax = self.pool_argmax(x);
                let y = argmax.iter().map(|&i| x.data()[i]).collect();
                Tensor::new(out_shape, y).expect("pool output shape")
            }
            LayerSpec::Relu => {
                let y = x.data().iter().map(|v| v.max(0.0)).collect();
                Tensor::new(out_shape, y).expect("relu output shape")
            }
            LayerSpec::Dropout { .. } => x.clone(),
            LayerSpec::Flatten => x.clone().reshape(out_shape).expect("flatten shape"),
        }
    }

    /// Accumulates parameter gradients and, if asked, returns dL/dinput.
    pub fn backward(&mut self, dy: Tensor, need_input_grad: bool) -> Result<Option<Tensor>> {
        let n = dy.rows();
        let mut in_shape = vec![n];
        in_shape.extend_from_slice(&self.in_shape);
        let cache = std::mem::replace(&mut self.cache, Cache::Empty);
        match (self.spec, cache) {
            (LayerSpec::Linear { input, output }, Cache::Input(x)) => {
                check_batch(&x, n)?;
                let gw = self.grad_weight.as_mut().expect("linear grad");
                gemm(output, n, input, dy.data(), true, x.data(), false, gw.data_mut(), true);
                let gb = self.grad_bias.as_mut().expect("linear grad");
                for row in dy.data().chunks(output) {
                    for (g, d) in gb.data_mut().iter_mut().zip(row) {
                        *g += d;
                    }
                }
                if !need_input_grad {
                    return Ok(None);
                }
                let w = self.weight.as_ref().expect("linear weight");
                let mut dx = vec![0.0; n * input];
                gemm(n, output, input, dy.data(), false, w.data(), false, &mut dx, false);
                Ok(Some(Tensor::new(in_shape, dx)?))
            }
            (LayerSpec::Conv2d { .. }, Cache::Input(x)) => {
                check_batch(&x, n)?;
                Ok(self.conv_backward(&x, &dy, need_input_grad, in_shape))
            }
            (LayerSpec::MaxPool2d { .. }, Cache::Pool { argmax, input_len }) => {
                if argmax.len() != dy.len() {
                    return Err(Error::State("maxpool backward batch differs from forward".into()));
                }
                let mut dx = vec![0.0; input_len];
                for (&i, &g) in argmax.iter().zip(dy.data()) {
                    dx[i] += g;
                }
                Ok(Some(Tensor::new(in_shape, dx)?))
            }
            (LayerSpec::Relu | LayerSpec::Dropout { .. }, Cache::Mask(mask)) => {
                let mut dx = dy.reshape(in_shape)?;
                if !mask.is_empty() {
                    if mask.len() != dx.len() {
                        return Err(Error::State("mask size differs from forward".into()));
                    }
                    for (g, m) in dx.data_mut().iter_mut().zip(&mask) {
                        *g *= m;
                    }
                }
                Ok(Some(dx))
            }
            (LayerSpec::Flatten, Cache::Input(x)) => {
                check_batch(&x, n)?;
                Ok(Some(dy.reshape(in_shape)?))
            }
            _ => Err(Error::State(
                "backward called without a matching train-mode forward".into(),
            )),
        }
    }

    fn pool_argmax(&self, x: &Tensor) -> Vec<usize> {
        let LayerSpec::MaxPool2d { kernel, stride } = self.spec else {
            unreachable!("pool_argmax on non-pool layer")
        };
        let (c, h, w) = (self.in_shape[0], self.in_shape[1], self.in_shape[2]);
        let (ho, wo) = (self.out_shape[1], self.out_shape[2]);
        let data = x.data();
        let mut out = Vec::with_capacity(x.rows() * c * ho * wo);
        for plane in 0..x.rows() * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let i = base + (oy * stride + ky) * w + ox * stride + kx;
                            if data[i] > data[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(best);
                }
            }
        }
        out
    }

    fn conv_geometry(&self) -> ConvGeometry {
        let LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } = self.spec
        else {
            unreachable!("conv geometry on non-conv layer")
        };
        ConvGeometry {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            h: self.in_shape[1],
            w: self.in_shape[2],
            ho: self.out_shape[1],
            wo: self.out_shape[2],
        }
    }

    fn conv_forward(&self, x: &Tensor, out_shape: Vec<usize>) -> Tensor {
        let g = self.conv_geometry();
        let w = self.weight.as_ref().expect("conv weight");
        let b = self.bias.as_ref().expect("conv bias");
        let (patch, spatial) = (g.patch_len(), g.ho * g.wo);
        let mut cols = vec![0.0; patch * spatial];
        let mut y = vec![0.0; x.rows() * g.out_channels * spatial];
        for (sample, out) in x.data().chunks(x.row_len()).zip(y.chunks_mut(g.out_channels * spatial)) {
            g.im2col(sample, &mut cols);
            for (oc, plane) in out.chunks_mut(spatial).enumerate() {
                plane.fill(b.data()[oc]);
            }
            gemm(g.out_channels, patch, spatial, w.data(), false, &cols, false, out, true);
        }
        Tensor::new(out_shape, y).expect("conv output shape")
    }

    fn conv_backward(
        &mut self,
        x: &Tensor,
        dy: &Tensor,
        need_input_grad: bool,
        in_shape: Vec<usize>,
    ) -> Option<Tensor> {
        let g = self.conv_geometry();
        let (patch, spatial) = (g.patch_len(), g.ho * g.wo);
        let mut cols = vec![0.0; patch * spatial];
        let mut dcols = vec![0.0; patch * spatial];
        let mut dx = need_input_grad.then(|| vec![0.0; x.len()]);
        let sample_len = x.row_len();
        for i in 0..x.rows() {
            let sample = &x.data()[i * sample_len..(i + 1) * sample_len];
            let dout = &dy.data()[i * g.out_channels * spatial..(i + 1) * g.out_channels * spatial];
            g.im2col(sample, &mut cols);
            let gw = self.grad_weight.as_mut().expect("conv grad");
            gemm(g.out_channels, spatial, patch, dout, false, &cols, true, gw.data_mut(), true);
            let gb = self.grad_bias.as_mut().expect("conv grad");
            for (oc, plane) in dout.chunks(spatial).enumerate() {
                gb.data_mut()[oc] += plane.iter().sum::<f64>();
            }
            if let Some(dx) = dx.as_mut() {
                let w = self.weight.as_ref().expect("conv weight");
                gemm(patch, g.out_channels, spatial, w.data(), true, dout, false, &mut dcols, false);
                g.col2im(&dcols, &mut dx[i * sample_len..(i + 1) * sample_len]);
            }
        }
        dx.map(|d| Tensor::new(in_shape, d).expect("conv input grad shape"))
    }
}

fn check_batch(cached: &Tensor, n: usize) -> Result<()> {
    if cached.rows() != n {
        return Err(Error::State(format!(
            "backward batch of {n} does not match forward batch of {}",
            cached.rows()
        )));
    }
    Ok(())
}

struct ConvGeometry {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Source pixel for output position (oy, ox) and kernel offset (ky, kx),
    /// or `None` when it falls in the zero padding.
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.padding)?;
        let x = (ox * self.stride + kx).checked_sub(self.padding)?;
        (y < self.h && x < self.w).then_some((y, x))
    }

    /// Rows are (channel, ky, kx), columns are output positions.
    fn im2col(&self, sample: &[f64], cols: &mut [f64]) {
        let spatial = self.ho * self.wo;
        let mut row = 0;
        for c in 0..self.in_channels {
            let plane = &sample[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let dst = &mut cols[row * spatial..(row + 1) * spatial];
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            dst[oy * self.wo + ox] = match self.source(oy, ox, ky, kx) {
                                Some((y, x)) => plane[y * self.w + x],
                                None => 0.0,
                            };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let spatial = self.ho * self.wo;
        let mut row = 0;
        for c in 0..self.in_channels {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let src = &cols[row * spatial..(row + 1) * spatial];
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            if let Some((y, x)) = self.source(oy, ox, ky, kx) {
                                plane[y * self.w + x] += src[oy * self.wo + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}
