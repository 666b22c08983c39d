//! Slice-wise conditional Gaussian entropy model.
//!
//! The latent is split into channel slices coded in order. Slice `i` sees the
//! hyperprior features and the refined slices `ȳ_<i`, never anything later.
//! The same [`EntropyModel::slice`] runs on the encoder (from `y`) and on the
//! decoder (from decoded symbols), which keeps both sides bit-identical.

use crate::cape::{map_sigma, EntropyParams, ParamEstimator, ResidualPredictor};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::hdca::{DictContext, Dictionary, DictionaryKind, SingleAttention, SliceAttention};
use crate::layers::Conv2d;
use crate::param::{Init, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Probability floor applied before taking logs in the rate term.
pub const P_MIN: f64 = 1e-9;

#[derive(Clone, Debug)]
pub enum DictionaryAttention {
    Hierarchical(SliceAttention),
    Single(SingleAttention),
}

/// Modules owned by one slice.
#[derive(Clone, Debug)]
pub struct SliceModules {
    pub agg_in: Conv2d,
    pub agg_out: Conv2d,
    pub attention: DictionaryAttention,
    pub estimator: ParamEstimator,
    pub lrp: ResidualPredictor,
    pub channels: usize,
}

/// How the slice latent enters [`EntropyModel::slice`].
#[derive(Clone, Copy, Debug)]
pub enum SliceInput {
    /// Encoder side. With `noise`, the rate is evaluated at `y + u`.
    Latent { y: Var, noise: Option<Var> },
    /// Decoder side: integer symbols `m`.
    Symbols(Var),
}

#[derive(Clone, Debug)]
pub struct SlicePrediction {
    pub context: Var,
    pub dict: DictContext,
    /// `concat(F_z, ȳ_<i, F_dict)`, the estimator input.
    pub features: Var,
    pub params: EntropyParams,
}

#[derive(Clone, Debug)]
pub struct SliceOutput {
    pub context: Var,
    pub dict: DictContext,
    pub params: EntropyParams,
    /// Rounded, clamped `y − μ`.
    pub symbols: Var,
    pub y_hat: Var,
    pub residual: Var,
    pub y_bar: Var,
    /// Per-element probabilities after the `P_MIN` floor.
    pub probs: Var,
    pub bits: Var,
}

#[derive(Clone, Debug)]
pub struct LatentBundle {
    pub slices: Vec<SliceOutput>,
    pub y_hat: Var,
    pub y_bar: Var,
    /// Total estimated bits of all slices.
    pub bits: Var,
}

#[derive(Clone, Debug)]
pub struct EntropyModel {
    /// The global dictionary, or the single dictionary of the baseline variants.
    pub global: Dictionary,
    pub detail: Option<Dictionary>,
    pub slices: Vec<SliceModules>,
    pub split: Vec<usize>,
    pub hyper_features: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl EntropyModel {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let hcfg = cfg.hdca();
        let (global, detail) = if cfg.variant.hierarchical() {
            (
                Dictionary::new(store, &format!("{prefix}.dict_g"), DictionaryKind::Global, cfg.n_g, cfg.c_d)?,
                Some(Dictionary::new(store, &format!("{prefix}.dict_d"), DictionaryKind::Detail, cfg.n_d, cfg.c_d)?),
            )
        } else {
            (Dictionary::new(store, &format!("{prefix}.dict"), DictionaryKind::Global, cfg.n_g + cfg.n_d, cfg.c_d)?, None)
        };
        let hyper_features = 2 * cfg.c_ctx;
        let split = cfg.split();
        let mut slices = Vec::with_capacity(cfg.s);
        let mut decoded = 0;
        for (i, &c) in split.iter().enumerate() {
            let p = format!("{prefix}.slice{i}");
            let agg_cin = hyper_features + decoded;
            let est_cin = agg_cin + cfg.c_ctx;
            let attention = if cfg.variant.hierarchical() {
                DictionaryAttention::Hierarchical(SliceAttention::new(store, &format!("{p}.hdca"), &hcfg)?)
            } else {
                DictionaryAttention::Single(SingleAttention::new(store, &format!("{p}.dca"), &hcfg)?)
            };
            let (estimator, lrp) = if cfg.variant.context_aware() {
                (
                    ParamEstimator::cape(store, &format!("{p}.estimator"), est_cin, c)?,
                    ResidualPredictor::cape(store, &format!("{p}.lrp"), est_cin + c, c)?,
                )
            } else {
                (
                    ParamEstimator::shallow(store, &format!("{p}.estimator"), est_cin, c)?,
                    ResidualPredictor::shallow(store, &format!("{p}.lrp"), est_cin + c, c)?,
                )
            };
            slices.push(SliceModules {
                agg_in: Conv2d::new(store, &format!("{p}.agg_in"), agg_cin, cfg.c_ctx, 1, 1)?,
                agg_out: Conv2d::new(store, &format!("{p}.agg_out"), cfg.c_ctx, cfg.c_ctx, 3, 1)?,
                attention,
                estimator,
                lrp,
                channels: c,
            });
            decoded += c;
        }
        Ok(EntropyModel { global, detail, slices, split, hyper_features, sigma_min: cfg.sigma_min, sigma_max: cfg.sigma_max })
    }

    fn check_index(&self, i: usize, prev: &[Var]) -> Result<()> {
        if i >= self.slices.len() {
            return Err(Error::InvalidArgument(format!("slice {i} of {}", self.slices.len())));
        }
        if prev.len() != i {
            return Err(Error::InvalidArgument(format!("slice {i} needs {i} decoded slices, got {}", prev.len())));
        }
        Ok(())
    }

    /// `X_i = conv3(GELU(conv1(concat(F_z, ȳ_<i))))`.
    pub fn aggregate<T: Real>(&self, g: &mut Graph<'_, T>, i: usize, f_z: Var, prev: &[Var]) -> Result<Var> {
        self.check_index(i, prev)?;
        let mut parts = vec![f_z];
        parts.extend_from_slice(prev);
        let joined = if parts.len() == 1 { f_z } else { g.concat_channels(&parts)? };
        let s = &self.slices[i];
        let h = s.agg_in.forward(g, joined)?;
        let h = g.gelu(h)?;
        s.agg_out.forward(g, h)
    }

    pub fn dictionary_context<T: Real>(&self, g: &mut Graph<'_, T>, i: usize, x: Var) -> Result<DictContext> {
        match (&self.slices[i].attention, &self.detail) {
            (DictionaryAttention::Hierarchical(a), Some(detail)) => a.forward(g, x, &self.global, detail),
            (DictionaryAttention::Single(a), _) => a.forward(g, x, &self.global),
            (DictionaryAttention::Hierarchical(_), None) => Err(Error::InvalidArgument("hierarchical slice without a detail dictionary".into())),
        }
    }

    /// Entropy parameters of slice `i`; depends only on `F_z` and `ȳ_<i`.
    pub fn predict<T: Real>(&self, g: &mut Graph<'_, T>, i: usize, f_z: Var, prev: &[Var]) -> Result<SlicePrediction> {
        let context = self.aggregate(g, i, f_z, prev)?;
        let dict = self.dictionary_context(g, i, context)?;
        let mut parts = vec![f_z];
        parts.extend_from_slice(prev);
        parts.push(dict.f_dict);
        let features = g.concat_channels(&parts)?;
        let params = self.slices[i].estimator.predict(g, features, self.sigma_min, self.sigma_max)?;
        Ok(SlicePrediction { context, dict, features, params })
    }

    /// Quantization, rate and residual refinement of slice `i`.
    pub fn complete<T: Real>(&self, g: &mut Graph<'_, T>, i: usize, pred: SlicePrediction, input: SliceInput) -> Result<SliceOutput> {
        let SlicePrediction { context, dict, features, params } = pred;
        let (symbols, y_hat, d) = match input {
            SliceInput::Latent { y, noise } => {
                let centered = g.sub(y, params.mu)?;
                let symbols = g.round_ste(centered)?;
                let y_hat = g.add(symbols, params.mu)?;
                let d = match noise {
                    Some(u) => {
                        let noisy = g.add(y, u)?;
                        g.sub(noisy, params.mu)?
                    }
                    None => symbols,
                };
                (symbols, y_hat, d)
            }
            SliceInput::Symbols(symbols) => (symbols, g.add(symbols, params.mu)?, symbols),
        };
        let p = g.likelihood(d, params.sigma)?;
        let probs = g.max_const(p, P_MIN)?;
        let bits = g.bits(probs)?;
        let lrp_in = g.concat_channels(&[features, y_hat])?;
        let residual = self.slices[i].lrp.predict(g, lrp_in)?;
        let y_bar = g.add(y_hat, residual)?;
        Ok(SliceOutput { context, dict, params, symbols, y_hat, residual, y_bar, probs, bits })
    }

    /// Runs slice `i` given the hyperprior features and the refined earlier slices.
    pub fn slice<T: Real>(&self, g: &mut Graph<'_, T>, i: usize, f_z: Var, prev: &[Var], input: SliceInput) -> Result<SliceOutput> {
        let pred = self.predict(g, i, f_z, prev)?;
        self.complete(g, i, pred, input)
    }

    /// Encoder-side pass over all slices. `noise`, when given, holds one
    /// uniform-noise tensor per slice for the rate term.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, y: Var, f_z: Var, noise: Option<&[Var]>) -> Result<LatentBundle> {
        let (_, c, _, _) = g.value(y).dims4("entropy model")?;
        if c != self.split.iter().sum::<usize>() {
            return Err(Error::shape("entropy model", format!("latent has {c} channels, slices cover {}", self.split.iter().sum::<usize>())));
        }
        let mut slices = Vec::with_capacity(self.split.len());
        let mut prev = Vec::with_capacity(self.split.len());
        let mut start = 0;
        for (i, &ci) in self.split.iter().enumerate() {
            let yi = g.slice_channels(y, start, ci)?;
            let u = noise.map(|n| n[i]);
            let out = self.slice(g, i, f_z, &prev, SliceInput::Latent { y: yi, noise: u })?;
            prev.push(out.y_bar);
            slices.push(out);
            start += ci;
        }
        self.bundle(g, slices)
    }

    /// Joins per-slice outputs into full-latent tensors.
    pub fn bundle<T: Real>(&self, g: &mut Graph<'_, T>, slices: Vec<SliceOutput>) -> Result<LatentBundle> {
        let hats: Vec<Var> = slices.iter().map(|s| s.y_hat).collect();
        let bars: Vec<Var> = slices.iter().map(|s| s.y_bar).collect();
        let y_hat = g.concat_channels(&hats)?;
        let y_bar = g.concat_channels(&bars)?;
        let mut bits = slices[0].bits;
        for s in &slices[1..] {
            bits = g.add(bits, s.bits)?;
        }
        Ok(LatentBundle { slices, y_hat, y_bar, bits })
    }
}

/// Per-channel discretized Gaussian for the hyper-latent `ẑ`.
#[derive(Clone, Debug)]
pub struct FactorizedPrior {
    pub mu: ParamId,
    pub sigma_raw: ParamId,
    pub channels: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

#[derive(Clone, Debug)]
pub struct PriorOutput {
    pub z_hat: Var,
    /// `round(z) − floor(μ_c)`, clamped to the symbol alphabet.
    pub symbols: Var,
    pub probs: Var,
    pub bits: Var,
}

/// Coding parameters of one hyper-latent channel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelModel {
    pub mu_floor: f64,
    pub mu_frac: f64,
    pub sigma: f64,
}

impl FactorizedPrior {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, channels: usize, sigma_min: f64, sigma_max: f64) -> Result<Self> {
        Ok(FactorizedPrior {
            mu: store.add(&format!("{prefix}.mu"), &[channels], Init::Zeros)?,
            sigma_raw: store.add(&format!("{prefix}.sigma_raw"), &[channels], Init::Zeros)?,
            channels,
            sigma_min,
            sigma_max,
        })
    }

    fn mu_floor<T: Real>(&self, store: &ParamStore<T>) -> Tensor<T> {
        store.value(self.mu).map(|v| v.floor())
    }

    /// Per-channel `(⌊μ⌋, μ − ⌊μ⌋, σ)` as used by the range coder.
    pub fn channel_models<T: Real>(&self, store: &ParamStore<T>) -> Result<Vec<ChannelModel>> {
        let mut g = Graph::inference(store);
        let raw = g.param(self.sigma_raw);
        let sigma = map_sigma(&mut g, raw, self.sigma_min, self.sigma_max)?;
        let mu = store.value(self.mu).data();
        Ok(mu
            .iter()
            .zip(g.value(sigma).data())
            .map(|(&m, &s)| {
                let fl = m.floor();
                ChannelModel { mu_floor: fl.f64(), mu_frac: (m - fl).f64(), sigma: s.f64() }
            })
            .collect())
    }

    fn broadcast<T: Real>(&self, g: &mut Graph<'_, T>, b: usize, h: usize, w: usize) -> Result<(Var, Var, Var)> {
        let mu = g.param(self.mu);
        let raw = g.param(self.sigma_raw);
        let sigma = map_sigma(g, raw, self.sigma_min, self.sigma_max)?;
        let fl = g.input(self.mu_floor(g.store()));
        Ok((g.broadcast_channels(mu, b, h, w)?, g.broadcast_channels(sigma, b, h, w)?, g.broadcast_channels(fl, b, h, w)?))
    }

    /// Encoder side; with `noise`, the rate is evaluated at `z + u`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, z: Var, noise: Option<Var>) -> Result<PriorOutput> {
        let (b, c, h, w) = g.value(z).dims4("hyper prior")?;
        if c != self.channels {
            return Err(Error::shape("hyper prior", format!("{c} channels, prior has {}", self.channels)));
        }
        let (mu, sigma, fl) = self.broadcast(g, b, h, w)?;
        let shifted = g.sub(z, fl)?;
        let symbols = g.round_ste(shifted)?;
        let z_hat = g.add(symbols, fl)?;
        let d = match noise {
            Some(u) => {
                let noisy = g.add(z, u)?;
                g.sub(noisy, mu)?
            }
            None => g.sub(z_hat, mu)?,
        };
        self.finish(g, z_hat, symbols, d, sigma)
    }

    /// Decoder side: rebuilds `ẑ` from symbols.
    pub fn from_symbols<T: Real>(&self, g: &mut Graph<'_, T>, symbols: Var) -> Result<PriorOutput> {
        let (b, _, h, w) = g.value(symbols).dims4("hyper prior")?;
        let (mu, sigma, fl) = self.broadcast(g, b, h, w)?;
        let z_hat = g.add(symbols, fl)?;
        let d = g.sub(z_hat, mu)?;
        self.finish(g, z_hat, symbols, d, sigma)
    }

    fn finish<T: Real>(&self, g: &mut Graph<'_, T>, z_hat: Var, symbols: Var, d: Var, sigma: Var) -> Result<PriorOutput> {
        let p = g.likelihood(d, sigma)?;
        let probs = g.max_const(p, P_MIN)?;
        let bits = g.bits(probs)?;
        Ok(PriorOutput { z_hat, symbols, probs, bits })
    }
}
