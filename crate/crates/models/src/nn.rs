//! Layers and a declarative layer stack.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::params::{Init, ParamSource};

/// `log(1 + exp(x))`, stable for large `|x|`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Affine map with weight stored as `(in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    pub fn new(src: &mut dyn ParamSource, name: &str, inp: usize, out: usize, init: Init) -> Result<Self> {
        Ok(Self {
            w: src.param(&format!("{name}.weight"), &[inp, out], init)?,
            b: src.param(&format!("{name}.bias"), &[out], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.w)?.broadcast_add(&self.b)?)
    }
}

/// LSTM cell with gates ordered input, forget, cell, output and a single
/// weight over the concatenation `[x, h]`.
#[derive(Debug, Clone)]
pub struct LstmCell {
    w: Tensor,
    b: Tensor,
    hidden: usize,
}

#[derive(Debug, Clone)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    /// Zeroes the rows whose `keep` entry is 0; `keep` has shape `(n, 1)`.
    pub fn masked(&self, keep: &Tensor) -> Result<Self> {
        Ok(Self {
            h: self.h.broadcast_mul(keep)?,
            c: self.c.broadcast_mul(keep)?,
        })
    }

    pub fn detach(&self) -> Self {
        Self {
            h: self.h.detach(),
            c: self.c.detach(),
        }
    }
}

impl LstmCell {
    pub fn new(src: &mut dyn ParamSource, name: &str, inp: usize, hidden: usize, init: Init) -> Result<Self> {
        Ok(Self {
            w: src.param(&format!("{name}.weight"), &[inp + hidden, 4 * hidden], init)?,
            b: src.param(&format!("{name}.bias"), &[4 * hidden], Init::Zeros)?,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn zero_state(&self, n: usize) -> Result<LstmState> {
        let h = Tensor::zeros((n, self.hidden), self.w.dtype(), self.w.device())?;
        Ok(LstmState { c: h.clone(), h })
    }

    pub fn step(&self, x: &Tensor, state: &LstmState) -> Result<LstmState> {
        let xh = Tensor::cat(&[x, &state.h], 1)?;
        let gates = xh.matmul(&self.w)?.broadcast_add(&self.b)?;
        let hs = self.hidden;
        let i = sigmoid(&gates.narrow(1, 0, hs)?)?;
        let f = sigmoid(&gates.narrow(1, hs, hs)?)?;
        let g = gates.narrow(1, 2 * hs, hs)?.tanh()?;
        let o = sigmoid(&gates.narrow(1, 3 * hs, hs)?)?;
        let c = ((f * &state.c)? + (i * g)?)?;
        let h = (o * c.tanh()?)?;
        Ok(LstmState { h, c })
    }
}

/// One entry of a layer stack. Shapes exclude the batch axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        out: usize,
        #[serde(default)]
        relu: bool,
    },
    Conv {
        out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        #[serde(default)]
        relu: bool,
    },
    Deconv {
        out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        #[serde(default)]
        relu: bool,
    },
    Reshape {
        shape: Vec<usize>,
    },
    Flatten,
}

impl LayerSpec {
    pub fn dense(out: usize, relu: bool) -> Self {
        Self::Dense { out, relu }
    }

    pub fn conv(out: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self::Conv {
            out,
            kernel,
            stride,
            padding,
            relu: true,
        }
    }

    pub fn deconv(out: usize, kernel: usize, stride: usize, padding: usize, relu: bool) -> Self {
        Self::Deconv {
            out,
            kernel,
            stride,
            padding,
            relu,
        }
    }
}

#[derive(Debug, Clone)]
enum Layer {
    Dense(Linear, bool),
    Conv {
        w: Tensor,
        b: Tensor,
        stride: usize,
        padding: usize,
        relu: bool,
    },
    Deconv {
        w: Tensor,
        b: Tensor,
        stride: usize,
        padding: usize,
        relu: bool,
    },
    Reshape(Vec<usize>),
}

/// A feed-forward stack built from [`LayerSpec`]s.
#[derive(Debug, Clone)]
pub struct Stack {
    layers: Vec<Layer>,
    out_shape: Vec<usize>,
}

fn shape_err(name: &str, msg: String) -> ModelError {
    ModelError::Shape(format!("{name}: {msg}"))
}

impl Stack {
    /// `dense_init` applies to dense weights; convolutions always use
    /// fan-in uniform initialisation.
    pub fn new(
        src: &mut dyn ParamSource,
        name: &str,
        specs: &[LayerSpec],
        in_shape: &[usize],
        dense_init: Init,
    ) -> Result<Self> {
        let mut shape = in_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for (k, spec) in specs.iter().enumerate() {
            let lname = format!("{name}.{k}");
            match spec {
                LayerSpec::Dense { out, relu } => {
                    if shape.len() != 1 {
                        return Err(shape_err(&lname, format!("dense layer needs a flat input, got {shape:?}")));
                    }
                    layers.push(Layer::Dense(Linear::new(src, &lname, shape[0], *out, dense_init)?, *relu));
                    shape = vec![*out];
                }
                LayerSpec::Conv {
                    out,
                    kernel,
                    stride,
                    padding,
                    relu,
                } => {
                    let [c, h, w] = shape[..] else {
                        return Err(shape_err(&lname, format!("conv needs (c, h, w), got {shape:?}")));
                    };
                    let oh = (h + 2 * padding).checked_sub(*kernel).map(|v| v / stride + 1);
                    let ow = (w + 2 * padding).checked_sub(*kernel).map(|v| v / stride + 1);
                    let (Some(oh), Some(ow)) = (oh, ow) else {
                        return Err(shape_err(&lname, "kernel larger than padded input".into()));
                    };
                    layers.push(Layer::Conv {
                        w: src.param(&format!("{lname}.weight"), &[*out, c, *kernel, *kernel], Init::FanInUniform)?,
                        b: src.param(&format!("{lname}.bias"), &[*out], Init::Zeros)?,
                        stride: *stride,
                        padding: *padding,
                        relu: *relu,
                    });
                    shape = vec![*out, oh, ow];
                }
                LayerSpec::Deconv {
                    out,
                    kernel,
                    stride,
                    padding,
                    relu,
                } => {
                    let [c, h, w] = shape[..] else {
                        return Err(shape_err(&lname, format!("deconv needs (c, h, w), got {shape:?}")));
                    };
                    let oh = ((h - 1) * stride + kernel).checked_sub(2 * padding);
                    let ow = ((w - 1) * stride + kernel).checked_sub(2 * padding);
                    let (Some(oh), Some(ow)) = (oh, ow) else {
                        return Err(shape_err(&lname, "padding exceeds output".into()));
                    };
                    layers.push(Layer::Deconv {
                        w: src.param(&format!("{lname}.weight"), &[c, *out, *kernel, *kernel], Init::FanInUniform)?,
                        b: src.param(&format!("{lname}.bias"), &[*out], Init::Zeros)?,
                        stride: *stride,
                        padding: *padding,
                        relu: *relu,
                    });
                    shape = vec![*out, oh, ow];
                }
                LayerSpec::Reshape { shape: to } => {
                    let (a, b): (usize, usize) = (shape.iter().product(), to.iter().product());
                    if a != b {
                        return Err(shape_err(&lname, format!("cannot reshape {shape:?} to {to:?}")));
                    }
                    layers.push(Layer::Reshape(to.clone()));
                    shape = to.clone();
                }
                LayerSpec::Flatten => {
                    let n = shape.iter().product();
                    layers.push(Layer::Reshape(vec![n]));
                    shape = vec![n];
                }
            }
        }
        Ok(Self {
            layers,
            out_shape: shape,
        })
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn out_len(&self) -> usize {
        self.out_shape.iter().product()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for layer in &self.layers {
            x = match layer {
                Layer::Dense(l, relu) => {
                    let y = l.forward(&x)?;
                    if *relu {
                        y.relu()?
                    } else {
                        y
                    }
                }
                Layer::Conv {
                    w,
                    b,
                    stride,
                    padding,
                    relu,
                } => {
                    let y = x.conv2d(w, *padding, *stride, 1, 1)?;
                    let y = y.broadcast_add(&b.reshape((1, (), 1, 1))?)?;
                    if *relu {
                        y.relu()?
                    } else {
                        y
                    }
                }
                Layer::Deconv {
                    w,
                    b,
                    stride,
                    padding,
                    relu,
                } => {
                    let y = x.conv_transpose2d(w, *padding, 0, *stride, 1)?;
                    let y = y.broadcast_add(&b.reshape((1, (), 1, 1))?)?;
                    if *relu {
                        y.relu()?
                    } else {
                        y
                    }
                }
                Layer::Reshape(to) => {
                    let n = x.dim(0)?;
                    let mut dims = vec![n];
                    dims.extend_from_slice(to);
                    x.contiguous()?.reshape(dims)?
                }
            };
        }
        Ok(x)
    }
}
