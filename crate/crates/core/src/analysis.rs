//! Dictionary utilization and latent rate diagnostics.

use std::io::Write;
use std::path::Path;

use crate::codec::image_input;
use crate::entropy::LatentBundle;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::hdca::DictContext;
use crate::image::Image;
use crate::model::Model;
use crate::tensor::{Real, Tensor};

/// Shannon entropy in bits; zero-probability entries contribute nothing.
pub fn entropy_bits(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * libm::log2(v)).sum::<f64>()
}

/// Mean attention per dictionary entry, averaged uniformly over heads and
/// accumulated over every token of every slice and image.
#[derive(Clone, Debug)]
pub struct UsageAccumulator {
    sums: Vec<f64>,
    rows: usize,
}

impl UsageAccumulator {
    pub fn new(entries: usize) -> Self {
        UsageAccumulator { sums: vec![0.0; entries], rows: 0 }
    }

    /// Adds one attention pass: one `[tokens, N]` matrix per head.
    pub fn add<T: Real>(&mut self, heads: &[&Tensor<T>]) -> Result<()> {
        let n = self.sums.len();
        let Some(first) = heads.first() else {
            return Err(Error::InvalidArgument("attention pass with no heads".into()));
        };
        let tokens = first.shape()[0];
        for a in heads {
            if a.shape() != [tokens, n] {
                return Err(Error::shape("utilization", format!("attention {:?}, expected [{tokens}, {n}]", a.shape())));
            }
        }
        let inv = 1.0 / heads.len() as f64;
        for a in heads {
            for row in a.data().chunks_exact(n) {
                for (s, &v) in self.sums.iter_mut().zip(row) {
                    *s += v.f64() * inv;
                }
            }
        }
        self.rows += tokens;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Usage normalized to sum to one over the whole evaluation set.
    pub fn finish(&self, name: &str) -> DictionaryUsage {
        let mean: Vec<f64> = self.sums.iter().map(|s| s / self.rows.max(1) as f64).collect();
        let total: f64 = mean.iter().sum();
        let usage: Vec<f64> = if total > 0.0 { mean.iter().map(|m| m / total).collect() } else { mean };
        DictionaryUsage { name: name.to_string(), entropy_bits: entropy_bits(&usage), usage }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DictionaryUsage {
    pub name: String,
    pub usage: Vec<f64>,
    pub entropy_bits: f64,
}

impl DictionaryUsage {
    pub fn max_entropy_bits(&self) -> f64 {
        libm::log2(self.usage.len() as f64)
    }

    /// Entry indices sorted by decreasing usage (ties by index).
    pub fn ranked(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.usage.len()).collect();
        idx.sort_by(|&a, &b| self.usage[b].total_cmp(&self.usage[a]).then(a.cmp(&b)));
        idx
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtilizationReport {
    pub dictionaries: Vec<DictionaryUsage>,
    pub images: usize,
}

impl UtilizationReport {
    /// One summary line per dictionary followed by `name,entry,usage` rows.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for d in &self.dictionaries {
            s.push_str(&format!(
                "# {}: {} entries, entropy {:.6} bits (max {:.6}) over {} images\n",
                d.name,
                d.usage.len(),
                d.entropy_bits,
                d.max_entropy_bits(),
                self.images
            ));
        }
        s.push_str("dictionary,entry,usage\n");
        for d in &self.dictionaries {
            for (j, u) in d.usage.iter().enumerate() {
                s.push_str(&format!("{},{j},{u:.12e}\n", d.name));
            }
        }
        s
    }
}

/// Attention of one image on one dictionary entry, averaged over heads and
/// slices, at latent resolution.
#[derive(Clone, Debug)]
pub struct Heatmap {
    pub image: usize,
    pub dictionary: String,
    pub entry: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn to_image(&self) -> Result<Image> {
        Image::new(self.width, self.height, 1, scale_to_u8(&self.values))
    }
}

/// Min-max scaling to `0..=255`; a constant map becomes all zeros.
pub fn scale_to_u8(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values.iter().map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 }).collect()
}

/// Names of the dictionaries a model retrieves from, in report order.
pub fn dictionary_names<T: Real>(model: &Model<T>) -> Vec<&'static str> {
    if model.net.entropy.detail.is_some() {
        vec!["global", "detail"]
    } else {
        vec!["dictionary"]
    }
}

fn attention_maps(dict: &DictContext) -> [&[crate::graph::Var]; 2] {
    [&dict.a_g, &dict.a_d]
}

/// Round-mode pass on one image; returns the latent bundle and graph.
fn evaluate<'s, T: Real>(model: &'s Model<T>, img: &Image) -> Result<(Graph<'s, T>, LatentBundle)> {
    let mut g = Graph::inference(&model.store);
    let x = g.input(image_input::<T>(img)?);
    let out = model.forward(&mut g, x, None)?;
    Ok((g, out.latents))
}

/// Usage distributions of every dictionary over `images`, plus heatmaps of
/// the `top_k` most used entries of each dictionary for every image.
pub fn utilization_report<T: Real>(model: &Model<T>, images: &[Image], top_k: usize) -> Result<(UtilizationReport, Vec<Heatmap>)> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("utilization needs at least one image".into()));
    }
    let names = dictionary_names(model);
    let sizes: Vec<usize> = {
        let global = model.store.value(model.net.entropy.global.entries).shape()[0];
        match &model.net.entropy.detail {
            Some(d) => vec![global, model.store.value(d.entries).shape()[0]],
            None => vec![global],
        }
    };
    let mut acc: Vec<UsageAccumulator> = sizes.iter().map(|&n| UsageAccumulator::new(n)).collect();
    // Per image, per dictionary: head- and slice-averaged [tokens, N].
    let mut per_image: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    for img in images {
        let (g, bundle) = evaluate(model, img)?;
        let (_, _, h, w) = g.value(bundle.y_hat).dims4("utilization")?;
        let mut maps: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; h * w * n]).collect();
        for s in &bundle.slices {
            for (k, heads) in attention_maps(&s.dict).iter().enumerate().take(sizes.len()) {
                let tensors: Vec<&Tensor<T>> = heads.iter().map(|&v| g.value(v)).collect();
                acc[k].add(&tensors)?;
                let scale = 1.0 / (tensors.len() * bundle.slices.len()) as f64;
                for t in &tensors {
                    for (m, &v) in maps[k].iter_mut().zip(t.data()) {
                        *m += v.f64() * scale;
                    }
                }
            }
        }
        per_image.push((h, w, maps.into_iter().flatten().collect()));
    }
    let dictionaries: Vec<DictionaryUsage> = acc.iter().zip(&names).map(|(a, n)| a.finish(n)).collect();
    let mut heatmaps = Vec::new();
    for (i, (h, w, flat)) in per_image.iter().enumerate() {
        let mut offset = 0;
        for (k, d) in dictionaries.iter().enumerate() {
            let n = sizes[k];
            for &entry in d.ranked().iter().take(top_k) {
                let values = (0..h * w).map(|t| flat[offset + t * n + entry]).collect();
                heatmaps.push(Heatmap { image: i, dictionary: d.name.clone(), entry, height: *h, width: *w, values });
            }
            offset += h * w * n;
        }
    }
    Ok((UtilizationReport { dictionaries, images: images.len() }, heatmaps))
}

/// How [`force_attention`] rewires a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForcedAttention {
    /// Every query attends equally to every entry.
    Uniform,
    /// Every query attends only to entry 0.
    OneHotFirst,
}

/// Overwrites a model's weights so that every dictionary attention is
/// input-independent. The aggregated context becomes constant (zero
/// `agg_out` weights, unit bias) and the detail query comes from the
/// LayerNorm shift alone. Used to check the utilization statistics.
pub fn force_attention<T: Real>(model: &mut Model<T>, mode: ForcedAttention) -> Result<()> {
    use crate::entropy::DictionaryAttention;
    let store = &mut model.store;
    let fill = |store: &mut crate::param::ParamStore<T>, id, v: f64| store.value_mut(id).data_mut().iter_mut().for_each(|x| *x = T::of(v));
    let query = match mode {
        ForcedAttention::Uniform => 0.0,
        ForcedAttention::OneHotFirst => 1.0,
    };
    let one_hot_dict = |store: &mut crate::param::ParamStore<T>, id| {
        let t = store.value_mut(id);
        let c = t.shape()[1];
        for (i, x) in t.data_mut().iter_mut().enumerate() {
            *x = T::of(if i < c { 1.0 } else { 0.0 });
        }
    };
    for s in &model.net.entropy.slices {
        fill(store, s.agg_out.weight, 0.0);
        fill(store, s.agg_out.bias, 1.0);
        match &s.attention {
            DictionaryAttention::Single(a) => {
                fill(store, a.w_q.weight, query);
                fill(store, a.w_k.weight, 1.0);
                fill(store, a.log_tau, 0.0);
            }
            DictionaryAttention::Hierarchical(a) => {
                fill(store, a.w_q_g.weight, query);
                fill(store, a.w_k_g.weight, 1.0);
                fill(store, a.norm.gain, 0.0);
                fill(store, a.norm.shift, 1.0);
                fill(store, a.w_q_d.weight, query);
                fill(store, a.w_k_d.weight, 1.0);
                fill(store, a.log_tau_g, 0.0);
                fill(store, a.log_tau_d, 0.0);
            }
        }
    }
    // Entry 0 is all ones, the rest zero: logit 0 is large and positive,
    // every other logit is exactly zero.
    one_hot_dict(store, model.net.entropy.global.entries);
    if let Some(d) = &model.net.entropy.detail {
        one_hot_dict(store, d.entries);
    }
    Ok(())
}

/// Per-position rate and per-slice parameter maps of one image.
#[derive(Clone, Debug)]
pub struct EntropyMap {
    pub height: usize,
    pub width: usize,
    /// `−log2 p(m)` summed over channels, `[H, W]` at latent resolution.
    pub bits: Tensor<f64>,
    pub slices: Vec<SliceMaps>,
    /// Estimated bits of all `y` streams.
    pub total_bits: f64,
}

/// Tensors `[C_i, H, W]` for one slice.
#[derive(Clone, Debug)]
pub struct SliceMaps {
    pub mu: Tensor<f64>,
    pub sigma: Tensor<f64>,
    pub residual: Tensor<f64>,
    pub normalized: Tensor<f64>,
}

pub fn entropy_map<T: Real>(model: &Model<T>, img: &Image) -> Result<EntropyMap> {
    let mut g = Graph::inference(&model.store);
    let x = g.input(image_input::<T>(img)?);
    let out = model.forward(&mut g, x, None)?;
    let y = g.value(out.y).clone();
    let (_, _, h, w) = y.dims4("entropy map")?;
    let plane = h * w;
    let mut bits = vec![0.0; plane];
    let mut slices = Vec::new();
    let mut start = 0;
    let to64 = |t: &Tensor<T>, c: usize| Tensor::new(vec![c, h, w], t.data().iter().map(|v| v.f64()).collect());
    for s in &out.latents.slices {
        let probs = g.value(s.probs);
        let c = probs.numel() / plane;
        for (k, p) in probs.data().iter().enumerate() {
            bits[k % plane] -= libm::log2(p.f64());
        }
        let mu = to64(g.value(s.params.mu), c)?;
        let sigma = to64(g.value(s.params.sigma), c)?;
        let ys = &y.data()[start * plane..(start + c) * plane];
        let residual: Vec<f64> = ys.iter().zip(mu.data()).map(|(y, m)| y.f64() - m).collect();
        let normalized = residual.iter().zip(sigma.data()).map(|(r, s)| r / s).collect();
        slices.push(SliceMaps {
            residual: Tensor::new(vec![c, h, w], residual)?,
            normalized: Tensor::new(vec![c, h, w], normalized)?,
            mu,
            sigma,
        });
        start += c;
    }
    let total_bits = g.value(out.rate_y).data()[0].f64();
    Ok(EntropyMap { height: h, width: w, bits: Tensor::new(vec![h, w], bits)?, slices, total_bits })
}

/// Matrix dump: the text line `HIDM <rank> <dims…>\n` followed by the
/// values as little-endian `f32`.
pub fn write_matrix(out: &mut impl Write, t: &Tensor<f64>) -> Result<()> {
    let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
    writeln!(out, "HIDM {} {}", t.rank(), dims.join(" "))?;
    let mut buf = Vec::with_capacity(4 * t.numel());
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn save_matrix(path: impl AsRef<Path>, t: &Tensor<f64>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_matrix(&mut f, t)?;
    f.flush()?;
    Ok(())
}

pub fn read_matrix(bytes: &[u8]) -> Result<Tensor<f32>> {
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Format("matrix header has no newline".into()))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Format("matrix header is not UTF-8".into()))?;
    let mut parts = header.split_ascii_whitespace();
    if parts.next() != Some("HIDM") {
        return Err(Error::Format("not a matrix dump (bad magic)".into()));
    }
    let nums = parts.map(|p| p.parse::<usize>().map_err(|_| Error::Format(format!("bad matrix header field {p:?}")))).collect::<Result<Vec<_>>>()?;
    let (&rank, dims) = nums.split_first().ok_or_else(|| Error::Format("matrix header has no rank".into()))?;
    if dims.len() != rank {
        return Err(Error::Format(format!("matrix rank {rank} with {} dims", dims.len())));
    }
    let body = &bytes[nl + 1..];
    let n: usize = dims.iter().product();
    if body.len() != 4 * n {
        return Err(Error::Format(format!("matrix body has {} bytes, expected {}", body.len(), 4 * n)));
    }
    Tensor::new(dims.to_vec(), body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}
