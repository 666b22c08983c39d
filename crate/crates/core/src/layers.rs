//! Parameterized layers over the graph ops.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::{Init, ParamId, ParamStore};
use crate::tensor::Real;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// `k×k` convolution with "same" padding `(k−1)/2`.
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        let fan_in = cin * k * k;
        let weight = store.add(&format!("{name}.weight"), &[cout, cin, k, k], Init::FanInUniform { fan_in })?;
        let bias = store.add(&format!("{name}.bias"), &[cout], Init::FanInUniform { fan_in })?;
        Ok(Conv2d { weight, bias, stride, pad: (k - 1) / 2 })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    /// Upsampling by 2 with a 5×5 kernel (pad 2, implied output padding 1).
    pub fn up2<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let k = 5;
        let fan_in = cin * k * k / 4;
        let weight = store.add(&format!("{name}.weight"), &[cin, cout, k, k], Init::FanInUniform { fan_in })?;
        let bias = store.add(&format!("{name}.bias"), &[cout], Init::FanInUniform { fan_in })?;
        Ok(ConvTranspose2d { weight, bias, stride: 2, pad: 2 })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv_transpose2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Bias-free projection `x · W`.
#[derive(Clone, Debug)]
pub struct Projection {
    pub weight: ParamId,
}

impl Projection {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, din: usize, dout: usize) -> Result<Self> {
        let weight = store.add(name, &[din, dout], Init::KaimingUniform { fan_in: din })?;
        Ok(Projection { weight })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        g.linear(x, w, None)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        let gain = store.add(&format!("{name}.gain"), &[dim], Init::Const(1.0))?;
        let shift = store.add(&format!("{name}.shift"), &[dim], Init::Zeros)?;
        Ok(LayerNorm { gain, shift, eps: 1e-5 })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let shift = g.param(self.shift);
        g.layernorm(x, gain, shift, self.eps)
    }
}
