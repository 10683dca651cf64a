//! Adam with optional global-norm gradient clipping.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};

use crate::error::Result;
use crate::params::ParamStore;

pub struct Adam {
    inner: AdamW,
    vars: Vec<Var>,
    max_grad_norm: Option<f64>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64, max_grad_norm: Option<f64>) -> Result<Self> {
        let vars = params.vars();
        let cfg = ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        };
        Ok(Self {
            inner: AdamW::new(vars.clone(), cfg)?,
            vars,
            max_grad_norm,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.inner.learning_rate()
    }

    /// Back-propagates `loss` and applies one update. Returns the global
    /// gradient norm before clipping.
    pub fn backward_step(&mut self, loss: &Tensor) -> Result<f64> {
        let mut grads = loss.backward()?;
        let norm = grad_norm(&grads, &self.vars)?;
        if let Some(max) = self.max_grad_norm {
            if norm > max && norm.is_finite() {
                let scale = max / norm;
                for v in &self.vars {
                    if let Some(g) = grads.remove(v.as_tensor()) {
                        grads.insert(v.as_tensor(), (g * scale)?);
                    }
                }
            }
        }
        self.inner.step(&grads)?;
        Ok(norm)
    }
}

pub fn grad_norm(grads: &GradStore, vars: &[Var]) -> Result<f64> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        }
    }
    Ok(sq.sqrt())
}
