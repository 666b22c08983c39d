//! Small convolutional transforms standing in for a full-size backbone.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::layers::{Conv2d, ConvTranspose2d};
use crate::param::ParamStore;
use crate::tensor::Real;

/// `x + conv3(GELU(conv3(x)))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub first: Conv2d,
    pub second: Conv2d,
}

impl ResBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, c: usize) -> Result<Self> {
        Ok(ResBlock {
            first: Conv2d::new(store, &format!("{prefix}.conv1"), c, c, 3, 1)?,
            second: Conv2d::new(store, &format!("{prefix}.conv2"), c, c, 3, 1)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.first.forward(g, x)?;
        let h = g.gelu(h)?;
        let h = self.second.forward(g, h)?;
        g.add(x, h)
    }
}

/// `g_a` sees `x − 0.5` and multiplies its output by this factor. Without it,
/// freshly initialised latents sit far inside the rounding step and short
/// training runs never leave the all-zero-symbol regime.
pub const LATENT_SCALE: f64 = 16.0;

/// `g_s` output is `OUTPUT_GAIN · h + 0.5`.
pub const OUTPUT_GAIN: f64 = 4.0;

/// `g_a`: four stages of (5×5 stride-2 conv, GELU, residual block).
#[derive(Clone, Debug)]
pub struct Analysis {
    pub stages: Vec<(Conv2d, ResBlock)>,
}

impl Analysis {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, cin: usize, n: usize, m: usize) -> Result<Self> {
        let widths = [cin, n, n, n, m];
        let stages = (0..4)
            .map(|i| {
                let p = format!("{prefix}.stage{i}");
                Ok((
                    Conv2d::new(store, &format!("{p}.down"), widths[i], widths[i + 1], 5, 2)?,
                    ResBlock::new(store, &format!("{p}.res"), widths[i + 1])?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Analysis { stages })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut h = g.add_const(x, -0.5)?;
        for (down, res) in &self.stages {
            h = down.forward(g, h)?;
            h = g.gelu(h)?;
            h = res.forward(g, h)?;
        }
        g.scale(h, LATENT_SCALE)
    }
}

/// `g_s`: four stages of (residual block, 2× transposed conv, GELU), with no
/// activation after the last stage, then the fixed output affine.
#[derive(Clone, Debug)]
pub struct Synthesis {
    pub stages: Vec<(ResBlock, ConvTranspose2d)>,
}

impl Synthesis {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, m: usize, n: usize, cout: usize) -> Result<Self> {
        let widths = [m, n, n, n, cout];
        let stages = (0..4)
            .map(|i| {
                let p = format!("{prefix}.stage{i}");
                Ok((
                    ResBlock::new(store, &format!("{p}.res"), widths[i])?,
                    ConvTranspose2d::up2(store, &format!("{p}.up"), widths[i], widths[i + 1])?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Synthesis { stages })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, y: Var) -> Result<Var> {
        let mut h = y;
        let last = self.stages.len() - 1;
        for (i, (res, up)) in self.stages.iter().enumerate() {
            h = res.forward(g, h)?;
            h = up.forward(g, h)?;
            if i != last {
                h = g.gelu(h)?;
            }
        }
        let h = g.scale(h, OUTPUT_GAIN)?;
        g.add_const(h, 0.5)
    }
}

/// `h_a`: two stride-2 convolutions with GELU between.
#[derive(Clone, Debug)]
pub struct HyperAnalysis {
    pub first: Conv2d,
    pub second: Conv2d,
}

impl HyperAnalysis {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, m: usize, hyper: usize) -> Result<Self> {
        Ok(HyperAnalysis {
            first: Conv2d::new(store, &format!("{prefix}.down0"), m, hyper, 5, 2)?,
            second: Conv2d::new(store, &format!("{prefix}.down1"), hyper, hyper, 5, 2)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, y: Var) -> Result<Var> {
        let h = self.first.forward(g, y)?;
        let h = g.gelu(h)?;
        self.second.forward(g, h)
    }
}

/// `h_s`: two 2× transposed convolutions with GELU between.
#[derive(Clone, Debug)]
pub struct HyperSynthesis {
    pub first: ConvTranspose2d,
    pub second: ConvTranspose2d,
}

impl HyperSynthesis {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, hyper: usize, cout: usize) -> Result<Self> {
        Ok(HyperSynthesis {
            first: ConvTranspose2d::up2(store, &format!("{prefix}.up0"), hyper, hyper)?,
            second: ConvTranspose2d::up2(store, &format!("{prefix}.up1"), hyper, cout)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, z: Var) -> Result<Var> {
        let h = self.first.forward(g, z)?;
        let h = g.gelu(h)?;
        self.second.forward(g, h)
    }
}
