//! Context-aware parameter estimation.
//!
//! A 1×1 projection feeds three parallel 3/5/7 convolution branches whose
//! outputs are fused by another 1×1 convolution. Small 3×3 heads map the fused
//! context to the Gaussian mean, the scale, and the latent residual.
//! The shallow 1×1 estimators used by the ablation baselines live here as well.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::Conv2d;
use crate::param::ParamStore;
use crate::tensor::Real;

pub const SIGMA_MIN: f64 = 0.04;
pub const SIGMA_MAX: f64 = 64.0;

/// `σ = min(σ_min + softplus(raw), σ_max)`.
pub fn map_sigma<T: Real>(g: &mut Graph<'_, T>, raw: Var, sigma_min: f64, sigma_max: f64) -> Result<Var> {
    let s = g.softplus(raw)?;
    let s = g.add_const(s, sigma_min)?;
    g.min_const(s, sigma_max)
}

/// `r = 0.5·tanh(raw)`.
pub fn bound_residual<T: Real>(g: &mut Graph<'_, T>, raw: Var) -> Result<Var> {
    let t = g.tanh(raw)?;
    g.scale(t, 0.5)
}

#[derive(Clone, Debug)]
pub struct ContextExtractor {
    pub proj: Conv2d,
    pub branches: [Conv2d; 3],
    pub fuse: Conv2d,
    pub cin: usize,
}

impl ContextExtractor {
    pub const KERNELS: [usize; 3] = [3, 5, 7];

    /// Output width is `cin / 2` (at least 1).
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, cin: usize) -> Result<Self> {
        let mid = Self::mid_channels(cin);
        let proj = Conv2d::new(store, &format!("{prefix}.proj"), cin, mid, 1, 1)?;
        let mut branch = |k: usize| Conv2d::new(store, &format!("{prefix}.branch{k}"), mid, mid, k, 1);
        let branches = [branch(3)?, branch(5)?, branch(7)?];
        let fuse = Conv2d::new(store, &format!("{prefix}.fuse"), 3 * mid, mid, 1, 1)?;
        Ok(ContextExtractor { proj, branches, fuse, cin })
    }

    pub fn mid_channels(cin: usize) -> usize {
        (cin / 2).max(1)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, s: Var) -> Result<Var> {
        let cin = g.value(s).dims4("context extractor")?.1;
        if cin != self.cin {
            return Err(Error::shape("context extractor", format!("input has {cin} channels, projection expects {}", self.cin)));
        }
        let p = self.proj.forward(g, s)?;
        let mut outs = Vec::with_capacity(3);
        for b in &self.branches {
            let f = b.forward(g, p)?;
            outs.push(g.gelu(f)?);
        }
        let joined = g.concat_channels(&outs)?;
        self.fuse.forward(g, joined)
    }
}

/// Two stacked 3×3 convolutions with GELU between.
#[derive(Clone, Debug)]
pub struct Head {
    pub first: Conv2d,
    pub second: Conv2d,
}

impl Head {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Head {
            first: Conv2d::new(store, &format!("{prefix}.conv1"), cin, cin, 3, 1)?,
            second: Conv2d::new(store, &format!("{prefix}.conv2"), cin, cout, 3, 1)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.first.forward(g, x)?;
        let h = g.gelu(h)?;
        self.second.forward(g, h)
    }
}

/// Two stacked 1×1 convolutions with GELU between.
#[derive(Clone, Debug)]
pub struct Shallow {
    pub first: Conv2d,
    pub second: Conv2d,
}

impl Shallow {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, cin: usize, cout: usize) -> Result<Self> {
        let mid = ContextExtractor::mid_channels(cin);
        Ok(Shallow {
            first: Conv2d::new(store, &format!("{prefix}.conv1"), cin, mid, 1, 1)?,
            second: Conv2d::new(store, &format!("{prefix}.conv2"), mid, cout, 1, 1)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.first.forward(g, x)?;
        let h = g.gelu(h)?;
        self.second.forward(g, h)
    }
}

/// Predicted Gaussian parameters for one slice, `[B, C_slice, H, W]` each.
#[derive(Clone, Copy, Debug)]
pub struct EntropyParams {
    pub mu: Var,
    pub sigma: Var,
}

#[derive(Clone, Debug)]
pub enum ParamEstimator {
    Shallow(Shallow),
    Cape { extractor: ContextExtractor, head_mu: Head, head_sigma: Head },
}

impl ParamEstimator {
    pub fn shallow<T: Real>(store: &mut ParamStore<T>, prefix: &str, cin: usize, c_slice: usize) -> Result<Self> {
        Ok(ParamEstimator::Shallow(Shallow::new(store, prefix, cin, 2 * c_slice)?))
    }

    pub fn cape<T: Real>(store: &mut ParamStore<T>, prefix: &str, cin: usize, c_slice: usize) -> Result<Self> {
        let extractor = ContextExtractor::new(store, &format!("{prefix}.extractor"), cin)?;
        let mid = ContextExtractor::mid_channels(cin);
        Ok(ParamEstimator::Cape {
            extractor,
            head_mu: Head::new(store, &format!("{prefix}.head_mu"), mid, c_slice)?,
            head_sigma: Head::new(store, &format!("{prefix}.head_sigma"), mid, c_slice)?,
        })
    }

    /// Returns `μ` and the unmapped scale output.
    pub fn raw<T: Real>(&self, g: &mut Graph<'_, T>, s: Var) -> Result<(Var, Var)> {
        match self {
            ParamEstimator::Shallow(net) => {
                let out = net.forward(g, s)?;
                let c = g.value(out).dims4("estimator")?.1 / 2;
                Ok((g.slice_channels(out, 0, c)?, g.slice_channels(out, c, c)?))
            }
            ParamEstimator::Cape { extractor, head_mu, head_sigma } => {
                let f = extractor.forward(g, s)?;
                Ok((head_mu.forward(g, f)?, head_sigma.forward(g, f)?))
            }
        }
    }

    pub fn predict<T: Real>(&self, g: &mut Graph<'_, T>, s: Var, sigma_min: f64, sigma_max: f64) -> Result<EntropyParams> {
        let (mu, raw) = self.raw(g, s)?;
        let sigma = map_sigma(g, raw, sigma_min, sigma_max)?;
        Ok(EntropyParams { mu, sigma })
    }
}

#[derive(Clone, Debug)]
pub enum ResidualPredictor {
    Shallow(Shallow),
    Cape { extractor: ContextExtractor, head: Head },
}

impl ResidualPredictor {
    pub fn shallow<T: Real>(store: &mut ParamStore<T>, prefix: &str, cin: usize, c_slice: usize) -> Result<Self> {
        Ok(ResidualPredictor::Shallow(Shallow::new(store, prefix, cin, c_slice)?))
    }

    pub fn cape<T: Real>(store: &mut ParamStore<T>, prefix: &str, cin: usize, c_slice: usize) -> Result<Self> {
        let extractor = ContextExtractor::new(store, &format!("{prefix}.extractor"), cin)?;
        let mid = ContextExtractor::mid_channels(cin);
        Ok(ResidualPredictor::Cape { extractor, head: Head::new(store, &format!("{prefix}.head_lrp"), mid, c_slice)? })
    }

    /// Bounded residual `r` with `|r| ≤ 0.5`.
    pub fn predict<T: Real>(&self, g: &mut Graph<'_, T>, s: Var) -> Result<Var> {
        let raw = match self {
            ResidualPredictor::Shallow(net) => net.forward(g, s)?,
            ResidualPredictor::Cape { extractor, head } => {
                let f = extractor.forward(g, s)?;
                head.forward(g, f)?
            }
        };
        bound_residual(g, raw)
    }
}
