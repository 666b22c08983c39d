//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every op executed through it. [`Graph::backward`]
//! walks the tape once in reverse, accumulates gradients for every tracked
//! leaf, and then clears the tape.

use std::collections::HashMap;
use std::f64::consts::{FRAC_1_SQRT_2, LN_2};

use crate::error::{Error, Result};
use crate::kernels::{self, gemm_nn, gemm_nt, gemm_tn, ConvGeom};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Lowest coded symbol; the bin absorbs the whole lower tail.
pub const SYMBOL_MIN: i32 = -64;
/// Highest coded symbol; the bin absorbs the whole upper tail.
pub const SYMBOL_MAX: i32 = 63;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ConvT2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    LayerNorm { x: Var, gain: Var, shift: Var, eps: f64 },
    Gelu(Var),
    Softmax(Var),
    Exp(Var),
    Ln(Var),
    Tanh(Var),
    Softplus(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulScalar(Var, Var),
    MaxConst(Var, f64),
    MinConst(Var, f64),
    RoundSte(Var),
    Sum(Var),
    Mean(Var),
    ConcatChannels(Vec<Var>),
    SliceChannels { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ToTokens(Var),
    FromTokens(Var),
    BroadcastChannels(Var),
    Crop(Var),
    Likelihood { d: Var, sigma: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvT2d { .. } => "conv_transpose2d",
            Op::Linear { .. } => "linear",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::LayerNorm { .. } => "layernorm",
            Op::Gelu(_) => "gelu",
            Op::Softmax(_) => "softmax",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::Tanh(_) => "tanh",
            Op::Softplus(_) => "softplus",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddConst(_) => "add_const",
            Op::MulScalar(..) => "mul_scalar",
            Op::MaxConst(..) => "max_const",
            Op::MinConst(..) => "min_const",
            Op::RoundSte(_) => "round_ste",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::ConcatChannels(_) => "concat_channels",
            Op::SliceChannels { .. } => "slice_channels",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::ToTokens(_) => "to_tokens",
            Op::FromTokens(_) => "from_tokens",
            Op::BroadcastChannels(_) => "broadcast_channels",
            Op::Crop(_) => "crop",
            Op::Likelihood { .. } => "likelihood",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    tracked: bool,
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    nodes: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss w.r.t. a tracked value, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.iter().find(|(p, _)| *p == id).and_then(|&(_, n)| self.nodes[n].as_deref())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.params.iter().filter_map(|&(p, n)| self.nodes[n].as_deref().map(|g| (p, g)))
    }

    /// Moves parameter gradients into the store, replacing any previous ones.
    pub fn store_into(self, store: &mut ParamStore<T>) {
        let Gradients { mut nodes, params } = self;
        for (id, n) in params {
            if let Some(g) = nodes[n].take() {
                let shape = store.value(id).shape().to_vec();
                store.get_mut(id).grad = Some(Tensor::new(shape, g).expect("gradient shape"));
            }
        }
    }
}

/// Operation tape bound to a parameter store.
pub struct Graph<'s, T: Real> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    record: bool,
    consumed: bool,
}

fn normal_pdf<T: Real>(x: T) -> T {
    T::of(0.398_942_280_401_432_7) * (T::of(-0.5) * x * x).exp()
}

fn normal_cdf<T: Real>(x: T) -> T {
    T::of(0.5) * (-x * T::of(FRAC_1_SQRT_2)).erfc()
}

/// Discretized-Gaussian bin mass for a centered value `d = v − μ`, with the
/// edge bins folding in the full tails.
pub fn bin_probability<T: Real>(d: T, sigma: T) -> T {
    let half = T::of(0.5);
    let bin = d.round();
    let fold_low = bin <= T::of(SYMBOL_MIN as f64);
    let fold_high = bin >= T::of(SYMBOL_MAX as f64);
    if fold_low {
        normal_cdf((d + half) / sigma)
    } else if fold_high {
        normal_cdf((half - d) / sigma)
    } else {
        interval_probability(d, sigma)
    }
}

/// Mass of the unit interval centered at `d` under a zero-mean Gaussian,
/// without tail folding.
pub fn interval_probability<T: Real>(d: T, sigma: T) -> T {
    // Evaluate on the side of the mean where both CDF terms are small.
    let half = T::of(0.5);
    let a = d.abs();
    normal_cdf((half - a) / sigma) - normal_cdf((-half - a) / sigma)
}

impl<'s, T: Real> Graph<'s, T> {
    /// A recording graph: parameters and `input_grad` leaves are tracked.
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Graph { store, nodes: Vec::new(), params: HashMap::new(), record: true, consumed: false }
    }

    /// A graph that tracks nothing; `backward` on it is an error.
    pub fn inference(store: &'s ParamStore<T>) -> Self {
        Graph { store, nodes: Vec::new(), params: HashMap::new(), record: false, consumed: false }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn live(&self) -> Result<()> {
        if self.consumed {
            Err(Error::Tape("graph already differentiated; run a new forward pass".into()))
        } else {
            Ok(())
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: &[Var]) -> Var {
        let tracked = self.record && inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Constant leaf.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Input, tracked: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is reported by `backward`.
    pub fn input_grad(&mut self, t: Tensor<T>) -> Var {
        let tracked = self.record;
        self.nodes.push(Node { value: t, op: Op::Input, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter; repeated calls return the same handle.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let value = self.store.value(id).clone();
        let tracked = self.record;
        self.nodes.push(Node { value, op: Op::Param(id), tracked });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// Name of the first op whose output holds a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find(|(_, n)| !n.value.all_finite()).map(|(i, n)| match n.op {
            Op::Param(id) => format!("parameter {}", self.store.get(id).name),
            ref op => format!("{} (node {i})", op.name()),
        })
    }

    fn finite(&self, op: &'static str, t: &Tensor<T>) -> Result<()> {
        if t.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("{op} output (node {})", self.nodes.len())))
        }
    }

    // ----- convolutions -------------------------------------------------

    /// 2-D convolution. `x: [B,Cin,H,W]`, `w: [Cout,Cin,k,k]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.live()?;
        let (bn, ci, h, wd) = self.value(x).dims4("conv2d")?;
        let (co, wci, k, k2) = self.value(w).dims4("conv2d")?;
        if wci != ci {
            return Err(Error::shape("conv2d", format!("input channels {ci} vs kernel in-channels {wci}")));
        }
        if k != k2 {
            return Err(Error::shape("conv2d", format!("kernel height {k} vs width {k2}")));
        }
        if let Some(bv) = b {
            if self.value(bv).numel() != co {
                return Err(Error::shape("conv2d", format!("bias length {} vs out-channels {co}", self.value(bv).numel())));
            }
        }
        let g = ConvGeom::new(ci, h, wd, k, stride, pad)
            .ok_or_else(|| Error::shape("conv2d", format!("height/width {h}x{wd} too small for kernel {k} pad {pad}")))?;
        let (ckk, ncol) = (g.col_rows(), g.col_cols());
        let n_all = bn * ncol;
        let cols = kernels::im2col_batch(&g, self.val(x), bn);
        let mut acc = vec![T::ZERO; co * n_all];
        if let Some(bv) = b {
            for (o, &bias) in self.val(bv).iter().enumerate() {
                acc[o * n_all..(o + 1) * n_all].fill(bias);
            }
        }
        gemm_nn(co, ckk, n_all, self.val(w), &cols, &mut acc);
        let out = kernels::channel_major_to_batch(&acc, bn, co, ncol);
        let out = Tensor::new(vec![bn, co, g.out_h, g.out_w], out)?;
        self.finite("conv2d", &out)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, &ins))
    }

    /// Transposed convolution producing `stride·H × stride·W` outputs.
    ///
    /// `w: [Cin,Cout,k,k]`. The output-padding is implied: `stride − k + 2·pad`
    /// must lie in `[0, stride)`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.live()?;
        if !(1..=2).contains(&stride) {
            return Err(Error::InvalidArgument(format!("conv_transpose2d: stride {stride} not in {{1,2}}")));
        }
        let (bn, ci, h, wd) = self.value(x).dims4("conv_transpose2d")?;
        let (wci, co, k, k2) = self.value(w).dims4("conv_transpose2d")?;
        if wci != ci {
            return Err(Error::shape("conv_transpose2d", format!("input channels {ci} vs kernel in-channels {wci}")));
        }
        if k != k2 {
            return Err(Error::shape("conv_transpose2d", format!("kernel height {k} vs width {k2}")));
        }
        let out_pad = stride as isize - k as isize + 2 * pad as isize;
        if out_pad < 0 || out_pad >= stride as isize {
            return Err(Error::InvalidArgument(format!(
                "conv_transpose2d: kernel {k} with pad {pad} cannot produce a stride-{stride} upsampling"
            )));
        }
        let (oh, ow) = (stride * h, stride * wd);
        let g = ConvGeom::new(co, oh, ow, k, stride, pad).ok_or_else(|| Error::shape("conv_transpose2d", "degenerate geometry"))?;
        debug_assert_eq!((g.out_h, g.out_w), (h, wd));
        if let Some(bv) = b {
            if self.value(bv).numel() != co {
                return Err(Error::shape("conv_transpose2d", format!("bias length {} vs out-channels {co}", self.value(bv).numel())));
            }
        }
        let (ckk, hw) = (g.col_rows(), h * wd);
        let xt = kernels::batch_to_channel_major(self.val(x), bn, ci, hw);
        let mut cols = vec![T::ZERO; ckk * bn * hw];
        gemm_tn(ckk, ci, bn * hw, self.val(w), &xt, &mut cols);
        let mut out = vec![T::ZERO; bn * co * oh * ow];
        kernels::col2im_batch(&g, &cols, bn, &mut out);
        if let Some(bv) = b {
            let plane = oh * ow;
            for bi in 0..bn {
                for (o, &bias) in self.val(bv).iter().enumerate() {
                    for v in &mut out[(bi * co + o) * plane..(bi * co + o + 1) * plane] {
                        *v += bias;
                    }
                }
            }
        }
        let out = Tensor::new(vec![bn, co, oh, ow], out)?;
        self.finite("conv_transpose2d", &out)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(out, Op::ConvT2d { x, w, b, stride, pad }, &ins))
    }

    // ----- dense algebra ------------------------------------------------

    /// `x[..., Din] · w[Din, Dout] (+ b[Dout])`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.live()?;
        let ws = self.shape(w).to_vec();
        let xs = self.shape(x).to_vec();
        let [din, dout] = ws[..] else {
            return Err(Error::shape("linear", format!("weight must be 2-D, got {ws:?}")));
        };
        if xs.last() != Some(&din) {
            return Err(Error::shape("linear", format!("input trailing dim {:?} vs weight rows {din}", xs.last())));
        }
        if let Some(bv) = b {
            if self.value(bv).numel() != dout {
                return Err(Error::shape("linear", format!("bias length {} vs {dout}", self.value(bv).numel())));
            }
        }
        let rows = self.value(x).numel() / din.max(1);
        let mut out = vec![T::ZERO; rows * dout];
        if let Some(bv) = b {
            let bias = self.val(bv);
            for r in 0..rows {
                out[r * dout..(r + 1) * dout].copy_from_slice(bias);
            }
        }
        gemm_nn(rows, din, dout, self.val(x), self.val(w), &mut out);
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let out = Tensor::new(shape, out)?;
        self.finite("linear", &out)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(out, Op::Linear { x, w, b }, &ins))
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v)[..] {
            [m, n] => Ok((m, n)),
            ref s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.live()?;
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dims {k} vs {k2}")));
        }
        let mut out = vec![T::ZERO; m * n];
        gemm_nn(m, k, n, self.val(a), self.val(b), &mut out);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a[m,k] · b[n,k]ᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.live()?;
        let (m, k) = self.dims2("matmul_bt", a)?;
        let (n, k2) = self.dims2("matmul_bt", b)?;
        if k != k2 {
            return Err(Error::shape("matmul_bt", format!("inner dims {k} vs {k2}")));
        }
        let mut out = vec![T::ZERO; m * n];
        gemm_nt(m, k, n, self.val(a), self.val(b), &mut out);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::MatMulBt(a, b), &[a, b]))
    }

    /// Normalizes over the last dimension, then applies `gain`/`shift`.
    pub fn layernorm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        self.live()?;
        let c = *self.shape(x).last().ok_or_else(|| Error::shape("layernorm", "rank-0 input"))?;
        if c == 0 || self.value(gain).numel() != c || self.value(shift).numel() != c {
            return Err(Error::shape("layernorm", format!("gain/shift must have length {c}")));
        }
        let xs = self.val(x);
        let (gs, ss) = (self.val(gain), self.val(shift));
        let inv_c = T::of(1.0 / c as f64);
        let mut out = vec![T::ZERO; xs.len()];
        for (row, orow) in xs.chunks(c).zip(out.chunks_mut(c)) {
            let mean = kernels::sum(row) * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rstd = T::ONE / (var + T::of(eps)).sqrt();
            for i in 0..c {
                orow[i] = (row[i] - mean) * rstd * gs[i] + ss[i];
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(out, Op::LayerNorm { x, gain, shift, eps }, &[x, gain, shift]))
    }

    /// Softmax over the last dimension, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.live()?;
        let n = *self.shape(x).last().ok_or_else(|| Error::shape("softmax", "rank-0 input"))?;
        if n == 0 {
            return Err(Error::shape("softmax", "empty last dimension"));
        }
        let xs = self.val(x);
        let mut out = vec![T::ZERO; xs.len()];
        for (row, orow) in xs.chunks(n).zip(out.chunks_mut(n)) {
            let max = row.iter().copied().fold(row[0], T::max);
            let mut total = T::ZERO;
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - max).exp();
                total += *o;
            }
            for o in orow.iter_mut() {
                *o /= total;
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    // ----- elementwise ---------------------------------------------------

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(T) -> T) -> Result<Var> {
        self.live()?;
        let out = self.value(x).map(f);
        Ok(self.push(out, op, &[x]))
    }

    /// Exact-erf GELU: `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Gelu(x), |v| v * normal_cdf(v))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Ln(x), |v| v.ln())
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Softplus(x), |v| v.max(T::ZERO) + (-v.abs()).exp().ln_1p())
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let cv = T::of(c);
        self.unary(x, Op::Scale(x, c), move |v| v * cv)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Result<Var> {
        let cv = T::of(c);
        self.unary(x, Op::AddConst(x), move |v| v + cv)
    }

    /// `max(x, c)`; the gradient is zero where the floor is active.
    pub fn max_const(&mut self, x: Var, c: f64) -> Result<Var> {
        let cv = T::of(c);
        self.unary(x, Op::MaxConst(x, c), move |v| v.max(cv))
    }

    /// `min(x, c)`; the gradient is zero where the ceiling is active.
    pub fn min_const(&mut self, x: Var, c: f64) -> Result<Var> {
        let cv = T::of(c);
        self.unary(x, Op::MinConst(x, c), move |v| v.min(cv))
    }

    /// Rounds to the nearest integer and clamps to the symbol alphabet;
    /// the backward pass is the identity (straight-through).
    pub fn round_ste(&mut self, x: Var) -> Result<Var> {
        let (lo, hi) = (T::of(SYMBOL_MIN as f64), T::of(SYMBOL_MAX as f64));
        self.unary(x, Op::RoundSte(x), move |v| v.round().max(lo).min(hi))
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.live()?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op_name, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.val(a).iter().zip(self.val(b)).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Multiplies every element of `x` by the single value held in `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        self.live()?;
        if self.value(s).numel() != 1 {
            return Err(Error::shape("mul_scalar", format!("scalar operand has shape {:?}", self.shape(s))));
        }
        let sv = self.val(s)[0];
        let out = self.value(x).map(|v| v * sv);
        Ok(self.push(out, Op::MulScalar(x, s), &[x, s]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.live()?;
        let out = Tensor::scalar(kernels::sum(self.val(x)));
        Ok(self.push(out, Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.live()?;
        let n = self.value(x).numel().max(1);
        let out = Tensor::scalar(kernels::sum(self.val(x)) / T::of(n as f64));
        Ok(self.push(out, Op::Mean(x), &[x]))
    }

    // ----- layout ----------------------------------------------------------

    /// Concatenates `[B,Ci,H,W]` tensors along channels.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        self.live()?;
        let first = *xs.first().ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
        let (b, _, h, w) = self.value(first).dims4("concat_channels")?;
        let mut total = 0;
        for &v in xs {
            let (bi, ci, hi, wi) = self.value(v).dims4("concat_channels")?;
            if (bi, hi, wi) != (b, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("spatial/batch extents {:?} vs {:?}", (bi, hi, wi), (b, h, w)),
                ));
            }
            total += ci;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(b * total * plane);
        for bi in 0..b {
            for &v in xs {
                let c = self.shape(v)[1];
                out.extend_from_slice(&self.val(v)[bi * c * plane..(bi + 1) * c * plane]);
            }
        }
        let out = Tensor::new(vec![b, total, h, w], out)?;
        Ok(self.push(out, Op::ConcatChannels(xs.to_vec()), xs))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.live()?;
        let out = self.value(x).channels(start, len)?;
        Ok(self.push(out, Op::SliceChannels { x, start }, &[x]))
    }

    /// Concatenates `[R, Ci]` matrices along columns.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        self.live()?;
        let first = *xs.first().ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let (rows, _) = self.dims2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let (r, c) = self.dims2("concat_cols", v)?;
            if r != rows {
                return Err(Error::shape("concat_cols", format!("row count {r} vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &c) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.val(v)[r * c..(r + 1) * c]);
            }
        }
        let out = Tensor::new(vec![rows, total], out)?;
        Ok(self.push(out, Op::ConcatCols(xs.to_vec()), xs))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.live()?;
        let (rows, c) = self.dims2("slice_cols", x)?;
        if start + len > c {
            return Err(Error::shape("slice_cols", format!("range {start}+{len} exceeds {c}")));
        }
        let xs = self.val(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xs[r * c + start..r * c + start + len]);
        }
        let out = Tensor::new(vec![rows, len], out)?;
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    /// `[B,C,H,W]` to `[B·H·W, C]`; token `(b·H + y)·W + x`.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        self.live()?;
        let (b, c, h, w) = self.value(x).dims4("to_tokens")?;
        let xs = self.val(x);
        let plane = h * w;
        let mut out = vec![T::ZERO; xs.len()];
        for bi in 0..b {
            for ci in 0..c {
                let src = &xs[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                for (p, &v) in src.iter().enumerate() {
                    out[(bi * plane + p) * c + ci] = v;
                }
            }
        }
        let out = Tensor::new(vec![b * plane, c], out)?;
        Ok(self.push(out, Op::ToTokens(x), &[x]))
    }

    /// Inverse of [`Graph::to_tokens`].
    pub fn from_tokens(&mut self, x: Var, b: usize, h: usize, w: usize) -> Result<Var> {
        self.live()?;
        let (t, c) = self.dims2("from_tokens", x)?;
        if t != b * h * w {
            return Err(Error::shape("from_tokens", format!("{t} tokens vs {b}x{h}x{w}")));
        }
        let xs = self.val(x);
        let plane = h * w;
        let mut out = vec![T::ZERO; xs.len()];
        for bi in 0..b {
            for p in 0..plane {
                for ci in 0..c {
                    out[(bi * c + ci) * plane + p] = xs[(bi * plane + p) * c + ci];
                }
            }
        }
        let out = Tensor::new(vec![b, c, h, w], out)?;
        Ok(self.push(out, Op::FromTokens(x), &[x]))
    }

    /// Repeats a per-channel vector `[C]` over a `[B,C,H,W]` grid.
    pub fn broadcast_channels(&mut self, x: Var, b: usize, h: usize, w: usize) -> Result<Var> {
        self.live()?;
        let c = self.value(x).numel();
        let xs = self.val(x);
        let mut out = Vec::with_capacity(b * c * h * w);
        for _ in 0..b {
            for &v in xs {
                out.extend(std::iter::repeat(v).take(h * w));
            }
        }
        let out = Tensor::new(vec![b, c, h, w], out)?;
        Ok(self.push(out, Op::BroadcastChannels(x), &[x]))
    }

    /// Keeps the top-left `h × w` window of a `[B,C,H,W]` tensor.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        self.live()?;
        let (b, c, hh, ww) = self.value(x).dims4("crop")?;
        if h > hh || w > ww {
            return Err(Error::shape("crop", format!("{h}x{w} exceeds {hh}x{ww}")));
        }
        let xs = self.val(x);
        let mut out = Vec::with_capacity(b * c * h * w);
        for bc in 0..b * c {
            for y in 0..h {
                out.extend_from_slice(&xs[bc * hh * ww + y * ww..bc * hh * ww + y * ww + w]);
            }
        }
        let out = Tensor::new(vec![b, c, h, w], out)?;
        Ok(self.push(out, Op::Crop(x), &[x]))
    }

    // ----- probability ---------------------------------------------------

    /// Discretized-Gaussian likelihood of centered values `d = v − μ` under
    /// scale `sigma`: `Φ((d+½)/σ) − Φ((d−½)/σ)`, edge bins folded.
    pub fn likelihood(&mut self, d: Var, sigma: Var) -> Result<Var> {
        self.live()?;
        if self.shape(d) != self.shape(sigma) {
            return Err(Error::shape("likelihood", format!("{:?} vs {:?}", self.shape(d), self.shape(sigma))));
        }
        let data = self.val(d).iter().zip(self.val(sigma)).map(|(&dv, &s)| bin_probability(dv, s)).collect();
        let out = Tensor::new(self.shape(d).to_vec(), data)?;
        Ok(self.push(out, Op::Likelihood { d, sigma }, &[d, sigma]))
    }

    /// `Σ −log₂ p`, differentiable through `p`.
    pub fn bits(&mut self, p: Var) -> Result<Var> {
        let l = self.ln(p)?;
        let s = self.sum(l)?;
        self.scale(s, -1.0 / LN_2)
    }

    // ----- backward ------------------------------------------------------

    /// Back-propagates from a scalar `loss` and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Tape("backward called twice on one forward pass".into()));
        }
        if self.nodes.is_empty() || !self.record {
            return Err(Error::Tape("nothing recorded to differentiate".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Tape(format!("loss must be scalar, got shape {:?}", self.shape(loss))));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..n).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(go) = grads[i].take() else { continue };
            self.backward_node(i, &go, &mut grads)?;
            grads[i] = Some(go);
        }
        let params = self.params.iter().map(|(&p, &v)| (p, v.0)).collect::<Vec<_>>();
        // keep only leaf gradients
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Input | Op::Param(_)) {
                grads[i] = None;
            }
        }
        self.nodes.clear();
        self.params.clear();
        self.consumed = true;
        let mut params = params;
        params.sort();
        Ok(Gradients { nodes: grads, params })
    }

    fn backward_node(&self, i: usize, go: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        let tracked = |v: Var| nodes[v.0].tracked;
        let numel = |v: Var| nodes[v.0].value.numel();
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                grads[v.0].get_or_insert_with(|| vec![T::ZERO; numel(v)])
            }};
        }
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Input | Op::Param(_) => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (x, w) = (*x, *w);
                let (bn, ci, h, wd) = nodes[x.0].value.dims4("conv2d")?;
                let co = nodes[w.0].value.shape()[0];
                let k = nodes[w.0].value.shape()[2];
                let g = ConvGeom::new(ci, h, wd, k, *stride, *pad).expect("validated in forward");
                let (ckk, ncol) = (g.col_rows(), g.col_cols());
                let xs = nodes[x.0].value.data();
                let ws = nodes[w.0].value.data();
                let n_all = bn * ncol;
                let got = kernels::batch_to_channel_major(go, bn, co, ncol);
                if tracked(w) {
                    let cols = kernels::im2col_batch(&g, xs, bn);
                    gemm_nt(co, n_all, ckk, &got, &cols, acc!(w));
                }
                if tracked(x) {
                    let mut gcols = vec![T::ZERO; ckk * n_all];
                    gemm_tn(ckk, co, n_all, ws, &got, &mut gcols);
                    kernels::col2im_batch(&g, &gcols, bn, acc!(x));
                }
                if let Some(b) = b.filter(|&b| tracked(b)) {
                    let gb = acc!(b);
                    for bi in 0..bn {
                        for o in 0..co {
                            gb[o] += kernels::sum(&go[(bi * co + o) * ncol..(bi * co + o + 1) * ncol]);
                        }
                    }
                }
            }
            Op::ConvT2d { x, w, b, stride, pad } => {
                let (x, w) = (*x, *w);
                let (bn, ci, h, wd) = nodes[x.0].value.dims4("conv_transpose2d")?;
                let co = nodes[w.0].value.shape()[1];
                let k = nodes[w.0].value.shape()[2];
                let (oh, ow) = (stride * h, stride * wd);
                let g = ConvGeom::new(co, oh, ow, k, *stride, *pad).expect("validated in forward");
                let (ckk, hw) = (g.col_rows(), h * wd);
                let xs = nodes[x.0].value.data();
                let ws = nodes[w.0].value.data();
                let n_all = bn * hw;
                let gcols = kernels::im2col_batch(&g, go, bn);
                if tracked(x) {
                    let mut gxt = vec![T::ZERO; ci * n_all];
                    gemm_nn(ci, ckk, n_all, ws, &gcols, &mut gxt);
                    let gx = acc!(x);
                    for (a, v) in gx.iter_mut().zip(kernels::channel_major_to_batch(&gxt, bn, ci, hw)) {
                        *a += v;
                    }
                }
                if tracked(w) {
                    let xt = kernels::batch_to_channel_major(xs, bn, ci, hw);
                    gemm_nt(ci, n_all, ckk, &xt, &gcols, acc!(w));
                }
                if let Some(b) = b.filter(|&b| tracked(b)) {
                    let gb = acc!(b);
                    let plane = oh * ow;
                    for bi in 0..bn {
                        for o in 0..co {
                            gb[o] += kernels::sum(&go[(bi * co + o) * plane..(bi * co + o + 1) * plane]);
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (x, w) = (*x, *w);
                let ws = nodes[w.0].value.shape();
                let (din, dout) = (ws[0], ws[1]);
                let rows = numel(x) / din.max(1);
                if tracked(x) {
                    gemm_nt(rows, dout, din, go, nodes[w.0].value.data(), acc!(x));
                }
                if tracked(w) {
                    gemm_tn(din, rows, dout, nodes[x.0].value.data(), go, acc!(w));
                }
                if let Some(b) = b.filter(|&b| tracked(b)) {
                    let gb = acc!(b);
                    for r in 0..rows {
                        for (g, &v) in gb.iter_mut().zip(&go[r * dout..(r + 1) * dout]) {
                            *g += v;
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                if tracked(a) {
                    gemm_nt(m, n, k, go, nodes[b.0].value.data(), acc!(a));
                }
                if tracked(b) {
                    gemm_tn(k, m, n, nodes[a.0].value.data(), go, acc!(b));
                }
            }
            Op::MatMulBt(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[0];
                if tracked(a) {
                    gemm_nn(m, n, k, go, nodes[b.0].value.data(), acc!(a));
                }
                if tracked(b) {
                    gemm_tn(n, m, k, go, nodes[a.0].value.data(), acc!(b));
                }
            }
            Op::LayerNorm { x, gain, shift, eps } => {
                let (x, gain, shift) = (*x, *gain, *shift);
                let c = *nodes[x.0].value.shape().last().unwrap();
                let xs = nodes[x.0].value.data();
                let gs = nodes[gain.0].value.data();
                let inv_c = T::of(1.0 / c as f64);
                let mut gx_all = tracked(x).then(|| vec![T::ZERO; xs.len()]);
                let mut gg = vec![T::ZERO; c];
                let mut gsh = vec![T::ZERO; c];
                let mut xhat = vec![T::ZERO; c];
                let mut gxhat = vec![T::ZERO; c];
                for (r, (row, gorow)) in xs.chunks(c).zip(go.chunks(c)).enumerate() {
                    let mean = kernels::sum(row) * inv_c;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
                    let rstd = T::ONE / (var + T::of(*eps)).sqrt();
                    for j in 0..c {
                        xhat[j] = (row[j] - mean) * rstd;
                        gxhat[j] = gorow[j] * gs[j];
                        gg[j] += gorow[j] * xhat[j];
                        gsh[j] += gorow[j];
                    }
                    if let Some(gx) = gx_all.as_mut() {
                        let m1 = kernels::sum(&gxhat) * inv_c;
                        let m2 = kernels::dot(&gxhat, &xhat) * inv_c;
                        for j in 0..c {
                            gx[r * c + j] = rstd * (gxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                }
                if let Some(gx) = gx_all {
                    for (a, v) in acc!(x).iter_mut().zip(gx) {
                        *a += v;
                    }
                }
                if tracked(gain) {
                    for (a, v) in acc!(gain).iter_mut().zip(gg) {
                        *a += v;
                    }
                }
                if tracked(shift) {
                    for (a, v) in acc!(shift).iter_mut().zip(gsh) {
                        *a += v;
                    }
                }
            }
            Op::Softmax(x) => {
                let x = *x;
                let n = *nodes[x.0].value.shape().last().unwrap();
                let gx = acc!(x);
                for ((yrow, grow), gxrow) in out.chunks(n).zip(go.chunks(n)).zip(gx.chunks_mut(n)) {
                    let s = kernels::dot(yrow, grow);
                    for j in 0..n {
                        gxrow[j] += yrow[j] * (grow[j] - s);
                    }
                }
            }
            Op::Gelu(x) => {
                let x = *x;
                let xs = nodes[x.0].value.data();
                for ((g, &v), &gv) in acc!(x).iter_mut().zip(xs).zip(go) {
                    *g += gv * (normal_cdf(v) + v * normal_pdf(v));
                }
            }
            Op::Exp(x) => {
                for ((g, &y), &gv) in acc!(*x).iter_mut().zip(out).zip(go) {
                    *g += gv * y;
                }
            }
            Op::Ln(x) => {
                let xs = nodes[x.0].value.data();
                for ((g, &v), &gv) in acc!(*x).iter_mut().zip(xs).zip(go) {
                    *g += gv / v;
                }
            }
            Op::Tanh(x) => {
                for ((g, &y), &gv) in acc!(*x).iter_mut().zip(out).zip(go) {
                    *g += gv * (T::ONE - y * y);
                }
            }
            Op::Softplus(x) => {
                let xs = nodes[x.0].value.data();
                for ((g, &v), &gv) in acc!(*x).iter_mut().zip(xs).zip(go) {
                    *g += gv / (T::ONE + (-v).exp());
                }
            }
            Op::Add(a, b) => {
                for &v in [*a, *b].iter().filter(|&&v| tracked(v)) {
                    for (g, &gv) in acc!(v).iter_mut().zip(go) {
                        *g += gv;
                    }
                }
            }
            Op::Sub(a, b) => {
                if tracked(*a) {
                    for (g, &gv) in acc!(*a).iter_mut().zip(go) {
                        *g += gv;
                    }
                }
                if tracked(*b) {
                    for (g, &gv) in acc!(*b).iter_mut().zip(go) {
                        *g -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if tracked(a) {
                    let bs = nodes[b.0].value.data();
                    for ((g, &gv), &bv) in acc!(a).iter_mut().zip(go).zip(bs) {
                        *g += gv * bv;
                    }
                }
                if tracked(b) {
                    let as_ = nodes[a.0].value.data();
                    for ((g, &gv), &av) in acc!(b).iter_mut().zip(go).zip(as_) {
                        *g += gv * av;
                    }
                }
            }
            Op::Scale(x, c) => {
                let c = T::of(*c);
                for (g, &gv) in acc!(*x).iter_mut().zip(go) {
                    *g += gv * c;
                }
            }
            Op::AddConst(x) | Op::RoundSte(x) => {
                for (g, &gv) in acc!(*x).iter_mut().zip(go) {
                    *g += gv;
                }
            }
            Op::MulScalar(x, s) => {
                let (x, s) = (*x, *s);
                if tracked(x) {
                    let sv = nodes[s.0].value.data()[0];
                    for (g, &gv) in acc!(x).iter_mut().zip(go) {
                        *g += gv * sv;
                    }
                }
                if tracked(s) {
                    let d = kernels::dot(go, nodes[x.0].value.data());
                    acc!(s)[0] += d;
                }
            }
            Op::MaxConst(x, c) => {
                let c = T::of(*c);
                let xs = nodes[x.0].value.data();
                for ((g, &v), &gv) in acc!(*x).iter_mut().zip(xs).zip(go) {
                    if v > c {
                        *g += gv;
                    }
                }
            }
            Op::MinConst(x, c) => {
                let c = T::of(*c);
                let xs = nodes[x.0].value.data();
                for ((g, &v), &gv) in acc!(*x).iter_mut().zip(xs).zip(go) {
                    if v < c {
                        *g += gv;
                    }
                }
            }
            Op::Sum(x) => {
                let gv = go[0];
                for g in acc!(*x).iter_mut() {
                    *g += gv;
                }
            }
            Op::Mean(x) => {
                let gv = go[0] / T::of(numel(*x).max(1) as f64);
                for g in acc!(*x).iter_mut() {
                    *g += gv;
                }
            }
            Op::ConcatChannels(xs) => {
                let (b, total, h, w) = nodes[i].value.dims4("concat_channels")?;
                let plane = h * w;
                let mut offset = 0;
                for &v in xs {
                    let c = nodes[v.0].value.shape()[1];
                    if tracked(v) {
                        let gv = acc!(v);
                        for bi in 0..b {
                            let src = &go[(bi * total + offset) * plane..(bi * total + offset + c) * plane];
                            for (g, &s) in gv[bi * c * plane..(bi + 1) * c * plane].iter_mut().zip(src) {
                                *g += s;
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::SliceChannels { x, start } => {
                let (b, c, h, w) = nodes[x.0].value.dims4("slice_channels")?;
                let len = nodes[i].value.shape()[1];
                let plane = h * w;
                let gx = acc!(*x);
                for bi in 0..b {
                    let dst = &mut gx[(bi * c + start) * plane..(bi * c + start + len) * plane];
                    for (g, &s) in dst.iter_mut().zip(&go[bi * len * plane..(bi + 1) * len * plane]) {
                        *g += s;
                    }
                }
            }
            Op::ConcatCols(xs) => {
                let total = nodes[i].value.shape()[1];
                let rows = nodes[i].value.shape()[0];
                let mut offset = 0;
                for &v in xs {
                    let c = nodes[v.0].value.shape()[1];
                    if tracked(v) {
                        let gv = acc!(v);
                        for r in 0..rows {
                            for j in 0..c {
                                gv[r * c + j] += go[r * total + offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::SliceCols { x, start } => {
                let c = nodes[x.0].value.shape()[1];
                let (rows, len) = (nodes[i].value.shape()[0], nodes[i].value.shape()[1]);
                let gx = acc!(*x);
                for r in 0..rows {
                    for j in 0..len {
                        gx[r * c + start + j] += go[r * len + j];
                    }
                }
            }
            Op::ToTokens(x) => {
                let (b, c, h, w) = nodes[x.0].value.dims4("to_tokens")?;
                let plane = h * w;
                let gx = acc!(*x);
                for bi in 0..b {
                    for ci in 0..c {
                        for p in 0..plane {
                            gx[(bi * c + ci) * plane + p] += go[(bi * plane + p) * c + ci];
                        }
                    }
                }
            }
            Op::FromTokens(x) => {
                let (b, c, h, w) = nodes[i].value.dims4("from_tokens")?;
                let plane = h * w;
                let gx = acc!(*x);
                for bi in 0..b {
                    for ci in 0..c {
                        for p in 0..plane {
                            gx[(bi * plane + p) * c + ci] += go[(bi * c + ci) * plane + p];
                        }
                    }
                }
            }
            Op::BroadcastChannels(x) => {
                let (b, c, h, w) = nodes[i].value.dims4("broadcast_channels")?;
                let plane = h * w;
                let gx = acc!(*x);
                for bi in 0..b {
                    for ci in 0..c {
                        gx[ci] += kernels::sum(&go[(bi * c + ci) * plane..(bi * c + ci + 1) * plane]);
                    }
                }
            }
            Op::Crop(x) => {
                let (b, c, hh, ww) = nodes[x.0].value.dims4("crop")?;
                let (h, w) = (nodes[i].value.shape()[2], nodes[i].value.shape()[3]);
                let gx = acc!(*x);
                for bc in 0..b * c {
                    for y in 0..h {
                        for xx in 0..w {
                            gx[bc * hh * ww + y * ww + xx] += go[bc * h * w + y * w + xx];
                        }
                    }
                }
            }
            Op::Likelihood { d, sigma } => {
                let (d, sigma) = (*d, *sigma);
                let ds = nodes[d.0].value.data();
                let ss = nodes[sigma.0].value.data();
                let half = T::of(0.5);
                let (lo, hi) = (T::of(SYMBOL_MIN as f64), T::of(SYMBOL_MAX as f64));
                let mut gd = tracked(d).then(|| vec![T::ZERO; ds.len()]);
                let mut gs = tracked(sigma).then(|| vec![T::ZERO; ds.len()]);
                for j in 0..ds.len() {
                    let (dv, s) = (ds[j], ss[j]);
                    let bin = dv.round();
                    let u = (dv + half) / s;
                    let l = (dv - half) / s;
                    let (pu, ul) = if bin >= hi { (T::ZERO, T::ZERO) } else { (normal_pdf(u), u * normal_pdf(u)) };
                    let (pl, ll) = if bin <= lo { (T::ZERO, T::ZERO) } else { (normal_pdf(l), l * normal_pdf(l)) };
                    if let Some(gd) = gd.as_mut() {
                        gd[j] = go[j] * (pu - pl) / s;
                    }
                    if let Some(gs) = gs.as_mut() {
                        gs[j] = -go[j] * (ul - ll) / s;
                    }
                }
                if let Some(gd) = gd {
                    for (a, v) in acc!(d).iter_mut().zip(gd) {
                        *a += v;
                    }
                }
                if let Some(gs) = gs {
                    for (a, v) in acc!(sigma).iter_mut().zip(gs) {
                        *a += v;
                    }
                }
            }
        }
        Ok(())
    }
}
