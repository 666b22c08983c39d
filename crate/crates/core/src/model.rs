//! The full codec network: transforms, hyperprior and entropy model.

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::backbone::{Analysis, HyperAnalysis, HyperSynthesis, Synthesis};
use crate::config::ModelConfig;
use crate::entropy::{EntropyModel, FactorizedPrior, LatentBundle, PriorOutput};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::param::ParamStore;
use crate::tensor::{Real, Tensor};

/// Spatial downsampling of the analysis transform.
pub const STRIDE: usize = 16;
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Debug)]
pub struct Network {
    pub g_a: Analysis,
    pub g_s: Synthesis,
    pub h_a: HyperAnalysis,
    pub h_s: HyperSynthesis,
    pub entropy: EntropyModel,
    pub prior: FactorizedPrior,
}

#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub net: Network,
}

/// Everything a training or evaluation pass produces.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub y: Var,
    pub z: Var,
    pub f_z: Var,
    pub prior: PriorOutput,
    pub latents: LatentBundle,
    pub x_hat: Var,
    pub rate_y: Var,
    pub rate_z: Var,
    /// Mean squared error in 8-bit units.
    pub mse: Var,
    pub bpp: Var,
    pub loss: Var,
    pub pixels: usize,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        if config.precision != T::DTYPE {
            return Err(Error::Config(format!(
                "model built as {} but the configuration asks for {}",
                T::DTYPE.name(),
                config.precision.name()
            )));
        }
        let mut store = ParamStore::new(config.seed);
        let n = config.backbone_channels;
        let net = Network {
            g_a: Analysis::new(&mut store, "g_a", IMAGE_CHANNELS, n, config.m)?,
            g_s: Synthesis::new(&mut store, "g_s", config.m, n, IMAGE_CHANNELS)?,
            h_a: HyperAnalysis::new(&mut store, "h_a", config.m, config.hyper_channels)?,
            h_s: HyperSynthesis::new(&mut store, "h_s", config.hyper_channels, 2 * config.c_ctx)?,
            entropy: EntropyModel::new(&mut store, "entropy", &config)?,
            prior: FactorizedPrior::new(&mut store, "prior", config.hyper_channels, config.sigma_min, config.sigma_max)?,
        };
        Ok(Model { config, store, net })
    }

    /// First 8 bytes of SHA-256 over the canonical configuration text and
    /// every parameter (sorted by name, little-endian values).
    pub fn hash(&self) -> [u8; 8] {
        let mut h = Sha256::new();
        h.update(self.config.to_text().as_bytes());
        let mut buf = Vec::new();
        for (name, id) in self.store.sorted() {
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            buf.clear();
            for &v in self.store.value(id).data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        let digest = h.finalize();
        let mut out = [0u8; 8];
        out.copy_from_slice(&digest[..8]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.store.iter().map(|(_, p)| p.value.numel()).sum()
    }

    /// Parameters of the estimators (`μ/σ` and residual) of every slice.
    pub fn estimator_param_count(&self) -> usize {
        self.store
            .iter()
            .filter(|(_, p)| p.name.contains(".estimator.") || p.name.contains(".lrp."))
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    /// Hyperprior features cropped to the latent's spatial size.
    pub fn hyper_features(&self, g: &mut Graph<'_, T>, z_hat: Var, h: usize, w: usize) -> Result<Var> {
        let f = self.net.h_s.forward(g, z_hat)?;
        g.crop(f, h, w)
    }

    /// Full pass on `[B, 3, H, W]` with `H`, `W` multiples of 16. With `rng`,
    /// the rate terms use additive uniform noise (training); without, hard
    /// rounding throughout.
    pub fn forward(&self, g: &mut Graph<'_, T>, x: Var, rng: Option<&mut dyn rand::RngCore>) -> Result<ForwardOutput> {
        let (b, c, h, w) = g.value(x).dims4("model")?;
        if c != IMAGE_CHANNELS {
            return Err(Error::shape("model", format!("input has {c} channels, expected {IMAGE_CHANNELS}")));
        }
        if h == 0 || w == 0 || h % STRIDE != 0 || w % STRIDE != 0 {
            return Err(Error::shape("model", format!("input {h}×{w} is not a nonzero multiple of {STRIDE}")));
        }
        let y = self.net.g_a.forward(g, x)?;
        let z = self.net.h_a.forward(g, y)?;
        let (_, _, yh, yw) = g.value(y).dims4("model")?;
        let mut rng = rng;
        let mut noise = |g: &mut Graph<'_, T>, shape: &[usize]| -> Option<Var> {
            rng.as_mut().map(|r| {
                let t = Tensor::from_fn(shape.to_vec(), |_| T::of(r.gen_range(-0.5..0.5)));
                g.input(t)
            })
        };
        let z_shape = g.shape(z).to_vec();
        let z_noise = noise(g, &z_shape);
        let prior = self.net.prior.forward(g, z, z_noise)?;
        let f_z = self.hyper_features(g, prior.z_hat, yh, yw)?;
        let slice_noise: Option<Vec<Var>> = {
            let shapes: Vec<Vec<usize>> = self.net.entropy.split.iter().map(|&ci| vec![b, ci, yh, yw]).collect();
            let n: Vec<Option<Var>> = shapes.iter().map(|s| noise(g, s)).collect();
            n.into_iter().collect()
        };
        let latents = self.net.entropy.forward(g, y, f_z, slice_noise.as_deref())?;
        let x_hat = self.net.g_s.forward(g, latents.y_bar)?;
        self.finish(g, x, y, z, f_z, prior, latents, x_hat)
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        y: Var,
        z: Var,
        f_z: Var,
        prior: PriorOutput,
        latents: LatentBundle,
        x_hat: Var,
    ) -> Result<ForwardOutput> {
        let (b, _, h, w) = g.value(x).dims4("model")?;
        let pixels = b * h * w;
        let rate_y = latents.bits;
        let rate_z = prior.bits;
        let total = g.add(rate_y, rate_z)?;
        let bpp = g.scale(total, 1.0 / pixels as f64)?;
        let diff = g.sub(x_hat, x)?;
        let sq = g.mul(diff, diff)?;
        let mse = g.mean(sq)?;
        let mse = g.scale(mse, 255.0 * 255.0)?;
        let loss = rd_loss(g, bpp, mse, self.config.lambda)?;
        Ok(ForwardOutput { y, z, f_z, prior, latents, x_hat, rate_y, rate_z, mse, bpp, loss, pixels })
    }
}

/// `bpp + λ·D`.
pub fn rd_loss<T: Real>(g: &mut Graph<'_, T>, bpp: Var, distortion: Var, lambda: f64) -> Result<Var> {
    let weighted = g.scale(distortion, lambda)?;
    g.add(bpp, weighted)
}
