//! Hierarchical dictionary cross-attention.
//!
//! Each spatial position of the slice context is a token. Tokens first attend
//! to the global dictionary; the retrieved global context is fused back into
//! the query, which then attends to the detail dictionary. Both retrievals are
//! combined by a small MLP and added to the input context.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{LayerNorm, Projection};
use crate::param::{Init, ParamId, ParamStore};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct HdcaConfig {
    /// Channels of the aggregated slice context `X_i`.
    pub c_ctx: usize,
    /// Dictionary entry width.
    pub c_d: usize,
    pub heads: usize,
    pub n_g: usize,
    pub n_d: usize,
    /// Use one temperature for both retrieval stages.
    pub tie_temperatures: bool,
}

impl HdcaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.c_d % self.heads != 0 {
            return Err(Error::Config(format!("C_d = {} is not divisible by heads = {}", self.c_d, self.heads)));
        }
        if self.n_g == 0 || self.n_d == 0 || self.c_ctx == 0 {
            return Err(Error::Config("dictionary sizes and C_ctx must be at least 1".into()));
        }
        Ok(())
    }

    fn initial_log_tau(&self) -> f64 {
        ((self.c_d / self.heads) as f64).sqrt().ln()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DictionaryKind {
    Global,
    Detail,
}

/// A learnable `[N, C_d]` entry matrix, shared by every slice.
#[derive(Clone, Debug)]
pub struct Dictionary {
    pub entries: ParamId,
    pub kind: DictionaryKind,
}

impl Dictionary {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, kind: DictionaryKind, n: usize, c_d: usize) -> Result<Self> {
        let entries = store.add(name, &[n, c_d], Init::Normal { std: 1.0 / (c_d as f64).sqrt() })?;
        Ok(Dictionary { entries, kind })
    }
}

/// Multi-head attention of `q` against keys `k` and values `v`, all in token
/// layout. Heads split the columns of all three evenly. Returns the
/// concatenated output and one `[tokens, N]` attention matrix per head.
pub fn attention<T: Real>(g: &mut Graph<'_, T>, q: Var, k: Var, v: Var, log_tau: Var, heads: usize) -> Result<(Var, Vec<Var>)> {
    let dq = *g.shape(q).last().unwrap_or(&0);
    let dk = *g.shape(k).last().unwrap_or(&0);
    let dv = *g.shape(v).last().unwrap_or(&0);
    if heads == 0 || dq != dk || dq % heads != 0 || dv % heads != 0 {
        return Err(Error::shape(
            "attention",
            format!("query width {dq}, key width {dk}, value width {dv} with {heads} heads"),
        ));
    }
    let neg = g.scale(log_tau, -1.0)?;
    let inv_tau = g.exp(neg)?;
    let (hq, hv) = (dq / heads, dv / heads);
    let mut outs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * hq, hq)?;
        let kh = g.slice_cols(k, h * hq, hq)?;
        let vh = g.slice_cols(v, h * hv, hv)?;
        let logits = g.matmul_bt(qh, kh)?;
        let logits = g.mul_scalar(logits, inv_tau)?;
        let a = g.softmax(logits)?;
        outs.push(g.matmul(a, vh)?);
        maps.push(a);
    }
    let out = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    Ok((out, maps))
}

/// Per-slice weights of the two-stage retrieval.
#[derive(Clone, Debug)]
pub struct SliceAttention {
    pub w_q_g: Projection,
    pub w_k_g: Projection,
    pub w_proj: Projection,
    pub norm: LayerNorm,
    pub w_q_d: Projection,
    pub w_k_d: Projection,
    pub w_1: Projection,
    pub w_2: Projection,
    pub log_tau_g: ParamId,
    /// Equal to `log_tau_g` when temperatures are tied.
    pub log_tau_d: ParamId,
    pub heads: usize,
}

/// Output of one retrieval pass. Context tensors are in token layout
/// `[B·H·W, C]`; `f_dict` has the layout of the input `[B, C_ctx, H, W]`.
#[derive(Clone, Debug)]
pub struct DictContext {
    pub c_g: Var,
    pub c_d: Option<Var>,
    pub f_dict: Var,
    /// Per-head attention over the global (or single) dictionary.
    pub a_g: Vec<Var>,
    /// Per-head attention over the detail dictionary; empty for the single-level variant.
    pub a_d: Vec<Var>,
}

impl SliceAttention {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: &HdcaConfig) -> Result<Self> {
        cfg.validate()?;
        let (c, d) = (cfg.c_ctx, cfg.c_d);
        let log_tau_g = store.add(&format!("{prefix}.log_tau_g"), &[1], Init::Const(cfg.initial_log_tau()))?;
        let log_tau_d = if cfg.tie_temperatures {
            log_tau_g
        } else {
            store.add(&format!("{prefix}.log_tau_d"), &[1], Init::Const(cfg.initial_log_tau()))?
        };
        Ok(SliceAttention {
            w_q_g: Projection::new(store, &format!("{prefix}.W_Q_G"), c, d)?,
            w_k_g: Projection::new(store, &format!("{prefix}.W_K_G"), d, d)?,
            w_proj: Projection::new(store, &format!("{prefix}.W_proj"), c + d, d)?,
            norm: LayerNorm::new(store, &format!("{prefix}.norm"), d)?,
            w_q_d: Projection::new(store, &format!("{prefix}.W_Q_D"), d, d)?,
            w_k_d: Projection::new(store, &format!("{prefix}.W_K_D"), d, d)?,
            w_1: Projection::new(store, &format!("{prefix}.W_1"), 2 * d, d)?,
            w_2: Projection::new(store, &format!("{prefix}.W_2"), d, c)?,
            log_tau_g,
            log_tau_d,
            heads: cfg.heads,
        })
    }

    /// Global stage: tokens `[T, C_ctx]` → `(C_G [T, C_d], per-head attention)`.
    pub fn global_retrieve<T: Real>(&self, g: &mut Graph<'_, T>, tokens: Var, dict: &Dictionary) -> Result<(Var, Vec<Var>)> {
        let delta = g.param(dict.entries);
        let q = self.w_q_g.forward(g, tokens)?;
        let k = self.w_k_g.forward(g, delta)?;
        let tau = g.param(self.log_tau_g);
        attention(g, q, k, delta, tau, self.heads)
    }

    /// `LayerNorm(concat(X, C_G) · W_proj)`.
    pub fn enhance_query<T: Real>(&self, g: &mut Graph<'_, T>, tokens: Var, c_g: Var) -> Result<Var> {
        let joined = g.concat_cols(&[tokens, c_g])?;
        let p = self.w_proj.forward(g, joined)?;
        self.norm.forward(g, p)
    }

    /// Detail stage over the enhanced query `[T, C_d]`.
    pub fn detail_retrieve<T: Real>(&self, g: &mut Graph<'_, T>, x_e: Var, dict: &Dictionary) -> Result<(Var, Vec<Var>)> {
        let delta = g.param(dict.entries);
        let q = self.w_q_d.forward(g, x_e)?;
        let k = self.w_k_d.forward(g, delta)?;
        let tau = g.param(self.log_tau_d);
        attention(g, q, k, delta, tau, self.heads)
    }

    /// `GELU(concat(C_G, C_D) · W_1) · W_2 + X`, all in token layout.
    pub fn fuse<T: Real>(&self, g: &mut Graph<'_, T>, tokens: Var, c_g: Var, c_d: Var) -> Result<Var> {
        let joined = g.concat_cols(&[c_g, c_d])?;
        let h = self.w_1.forward(g, joined)?;
        let h = g.gelu(h)?;
        let out = self.w_2.forward(g, h)?;
        if g.shape(out) != g.shape(tokens) {
            return Err(Error::shape("fuse", format!("W_2 output {:?} vs context {:?}", g.shape(out), g.shape(tokens))));
        }
        g.add(out, tokens)
    }

    /// Full two-stage pass on a `[B, C_ctx, H, W]` context map.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, global: &Dictionary, detail: &Dictionary) -> Result<DictContext> {
        let (b, _, h, w) = g.value(x).dims4("hdca")?;
        let tokens = g.to_tokens(x)?;
        let (c_g, a_g) = self.global_retrieve(g, tokens, global)?;
        let x_e = self.enhance_query(g, tokens, c_g)?;
        let (c_d, a_d) = self.detail_retrieve(g, x_e, detail)?;
        let fused = self.fuse(g, tokens, c_g, c_d)?;
        let f_dict = g.from_tokens(fused, b, h, w)?;
        Ok(DictContext { c_g, c_d: Some(c_d), f_dict, a_g, a_d })
    }
}

/// Single-level dictionary attention used by the ablation baseline: one
/// retrieval with no query enhancement.
#[derive(Clone, Debug)]
pub struct SingleAttention {
    pub w_q: Projection,
    pub w_k: Projection,
    pub w_1: Projection,
    pub w_2: Projection,
    pub log_tau: ParamId,
    pub heads: usize,
}

impl SingleAttention {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: &HdcaConfig) -> Result<Self> {
        cfg.validate()?;
        let (c, d) = (cfg.c_ctx, cfg.c_d);
        Ok(SingleAttention {
            w_q: Projection::new(store, &format!("{prefix}.W_Q"), c, d)?,
            w_k: Projection::new(store, &format!("{prefix}.W_K"), d, d)?,
            w_1: Projection::new(store, &format!("{prefix}.W_1"), d, d)?,
            w_2: Projection::new(store, &format!("{prefix}.W_2"), d, c)?,
            log_tau: store.add(&format!("{prefix}.log_tau"), &[1], Init::Const(cfg.initial_log_tau()))?,
            heads: cfg.heads,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, dict: &Dictionary) -> Result<DictContext> {
        let (b, _, h, w) = g.value(x).dims4("dictionary attention")?;
        let tokens = g.to_tokens(x)?;
        let delta = g.param(dict.entries);
        let q = self.w_q.forward(g, tokens)?;
        let k = self.w_k.forward(g, delta)?;
        let tau = g.param(self.log_tau);
        let (c, a) = attention(g, q, k, delta, tau, self.heads)?;
        let hidden = self.w_1.forward(g, c)?;
        let hidden = g.gelu(hidden)?;
        let out = self.w_2.forward(g, hidden)?;
        let fused = g.add(out, tokens)?;
        let f_dict = g.from_tokens(fused, b, h, w)?;
        Ok(DictContext { c_g: c, c_d: None, f_dict, a_g: a, a_d: Vec::new() })
    }
}
