//! Image encoding and decoding to the `HIDB` bitstream.
//!
//! Byte layout is specified in `docs/bitstream.md`. Encoder and decoder run
//! the same single-threaded graph code on batch-of-one inputs, so every
//! entropy parameter is reproduced bit for bit on the decoder side.

use std::path::Path;

use crate::entropy::SliceInput;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::image::{crop, pad_replicate, Image};
use crate::model::{Model, IMAGE_CHANNELS, STRIDE};
use crate::rangecoder::{latent_index, latent_symbol, Decoder, Encoder, QuantizedCdf};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"HIDB";
pub const VERSION: u16 = 1;
/// Written in the λ field when the model's λ is not one of the standard set.
pub const LAMBDA_UNLISTED: u8 = 255;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompressedImage {
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub model_hash: [u8; 8],
    pub lambda_index: u8,
    pub z_stream: Vec<u8>,
    pub slice_streams: Vec<Vec<u8>>,
}

impl CompressedImage {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.push(self.channels);
        out.extend_from_slice(&self.model_hash);
        out.push(self.lambda_index);
        out.push(self.slice_streams.len() as u8);
        out.extend_from_slice(&(self.z_stream.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.z_stream);
        for s in &self.slice_streams {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            if bytes.len() - pos < n {
                return Err(Error::Decode(format!("file truncated while reading {what}")));
            }
            pos += n;
            Ok(&bytes[pos - n..pos])
        };
        if take(4, "magic")? != MAGIC {
            return Err(Error::Decode("not a compressed image (bad magic)".into()));
        }
        let version = u16::from_le_bytes(take(2, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Decode(format!("unsupported bitstream version {version}")));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
        let width = u32_at(take(4, "width")?);
        let height = u32_at(take(4, "height")?);
        let channels = take(1, "channels")?[0];
        if width == 0 || height == 0 || (channels != 1 && channels != 3) {
            return Err(Error::Decode(format!("invalid image header {width}×{height}×{channels}")));
        }
        let model_hash: [u8; 8] = take(8, "model hash")?.try_into().unwrap();
        let lambda_index = take(1, "lambda index")?[0];
        let slices = take(1, "slice count")?[0] as usize;
        let zlen = u32_at(take(4, "z stream length")?) as usize;
        let z_stream = take(zlen, "z stream")?.to_vec();
        let mut slice_streams = Vec::with_capacity(slices);
        for i in 0..slices {
            let len = u32_at(take(4, &format!("slice {i} length"))?) as usize;
            slice_streams.push(take(len, &format!("slice {i} stream"))?.to_vec());
        }
        if pos != bytes.len() {
            return Err(Error::Decode(format!("{} trailing bytes after the last stream", bytes.len() - pos)));
        }
        Ok(CompressedImage { width, height, channels, model_hash, lambda_index, z_stream, slice_streams })
    }

    /// Bits of all entropy-coded streams, excluding the header.
    pub fn stream_bits(&self) -> usize {
        8 * (self.z_stream.len() + self.slice_streams.iter().map(Vec::len).sum::<usize>())
    }

    pub fn file_bits(&self) -> usize {
        8 * self.to_bytes().len()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Values computed while coding, identical on both sides for a valid stream.
#[derive(Clone, Debug, PartialEq)]
pub struct CodingTrace<T> {
    pub z_symbols: Vec<i32>,
    pub mu: Vec<Tensor<T>>,
    pub sigma: Vec<Tensor<T>>,
    pub symbols: Vec<Vec<i32>>,
    pub y_hat: Tensor<T>,
    pub y_bar: Tensor<T>,
    /// Reconstruction, cropped to the original size, before 8-bit rounding.
    pub x_hat: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Encoded<T> {
    pub compressed: CompressedImage,
    pub trace: CodingTrace<T>,
    pub reconstruction: Image,
    /// Model rate estimate for the `z` stream and each slice, in bits.
    pub estimated_z_bits: f64,
    pub estimated_slice_bits: Vec<f64>,
}

impl<T> Encoded<T> {
    pub fn estimated_bits(&self) -> f64 {
        self.estimated_z_bits + self.estimated_slice_bits.iter().sum::<f64>()
    }
}

/// Latent and hyper-latent spatial sizes for an image.
pub fn latent_dims(height: usize, width: usize) -> ((usize, usize), (usize, usize)) {
    let (ph, pw) = (height.div_ceil(STRIDE) * STRIDE, width.div_ceil(STRIDE) * STRIDE);
    let (yh, yw) = (ph / STRIDE, pw / STRIDE);
    ((yh, yw), (yh.div_ceil(2).div_ceil(2), yw.div_ceil(2).div_ceil(2)))
}

/// RGB tensor `[1, 3, H, W]` of an image, replicate-padded to a multiple of the stride.
pub fn image_input<T: Real>(img: &Image) -> Result<Tensor<T>> {
    let t = img.to_tensor::<T>();
    let t = if img.channels == 1 {
        let plane = t.data().to_vec();
        let mut data = Vec::with_capacity(3 * plane.len());
        for _ in 0..IMAGE_CHANNELS {
            data.extend_from_slice(&plane);
        }
        Tensor::new(vec![1, IMAGE_CHANNELS, img.height, img.width], data)?
    } else {
        t
    };
    pad_replicate(&t, STRIDE)
}

fn output_image<T: Real>(x_hat: &Tensor<T>, channels: usize) -> Result<Image> {
    if channels == 3 {
        return Image::from_tensor(x_hat);
    }
    let (_, _, h, w) = x_hat.dims4("output")?;
    let plane = h * w;
    let d = x_hat.data();
    let gray = Tensor::from_fn(vec![1, 1, h, w], |i| (d[i] + d[plane + i] + d[2 * plane + i]) / T::of(3.0));
    Image::from_tensor(&gray)
}

fn gaussian_cdf<T: Real>(sigma: T) -> Result<QuantizedCdf> {
    QuantizedCdf::gaussian(0.0, sigma.f64())
}

fn symbols_of<T: Real>(t: &Tensor<T>) -> Vec<i32> {
    t.data().iter().map(|v| v.f64() as i32).collect()
}

pub fn encode<T: Real>(model: &Model<T>, img: &Image) -> Result<Encoded<T>> {
    let x = image_input::<T>(img)?;
    let mut g = Graph::inference(&model.store);
    let xv = g.input(x);
    let y = model.net.g_a.forward(&mut g, xv)?;
    let z = model.net.h_a.forward(&mut g, y)?;
    let (_, _, yh, yw) = g.value(y).dims4("encode")?;

    let prior = model.net.prior.forward(&mut g, z, None)?;
    let z_symbols = symbols_of(g.value(prior.symbols));
    let channel_models = model.net.prior.channel_models(&model.store)?;
    let z_plane = z_symbols.len() / channel_models.len();
    let z_cdfs = channel_models.iter().map(|c| QuantizedCdf::gaussian(c.mu_frac, c.sigma)).collect::<Result<Vec<_>>>()?;
    let mut enc = Encoder::new();
    for (i, &m) in z_symbols.iter().enumerate() {
        enc.encode(latent_index(m)?, &z_cdfs[i / z_plane])?;
    }
    let z_stream = enc.finish();
    let estimated_z_bits = g.value(prior.bits).data()[0].f64();

    let f_z = model.hyper_features(&mut g, prior.z_hat, yh, yw)?;
    let mut prev = Vec::new();
    let mut outs = Vec::new();
    let mut streams = Vec::new();
    let mut trace_mu = Vec::new();
    let mut trace_sigma = Vec::new();
    let mut trace_symbols = Vec::new();
    let mut estimated_slice_bits = Vec::new();
    let mut start = 0;
    for (i, &ci) in model.net.entropy.split.iter().enumerate() {
        let yi = g.slice_channels(y, start, ci)?;
        let out = model.net.entropy.slice(&mut g, i, f_z, &prev, SliceInput::Latent { y: yi, noise: None })?;
        let symbols = symbols_of(g.value(out.symbols));
        let sigma = g.value(out.params.sigma).clone();
        let mut enc = Encoder::new();
        for (&m, &s) in symbols.iter().zip(sigma.data()) {
            enc.encode(latent_index(m)?, &gaussian_cdf(s)?)?;
        }
        streams.push(enc.finish());
        trace_mu.push(g.value(out.params.mu).clone());
        trace_sigma.push(sigma);
        trace_symbols.push(symbols);
        estimated_slice_bits.push(g.value(out.bits).data()[0].f64());
        prev.push(out.y_bar);
        outs.push(out);
        start += ci;
    }
    let bundle = model.net.entropy.bundle(&mut g, outs)?;
    let x_full = model.net.g_s.forward(&mut g, bundle.y_bar)?;
    let x_hat = crop(g.value(x_full), img.height, img.width)?;
    let reconstruction = output_image(&x_hat, img.channels)?;
    let compressed = CompressedImage {
        width: img.width as u32,
        height: img.height as u32,
        channels: img.channels as u8,
        model_hash: model.hash(),
        lambda_index: model.config.lambda_index().map_or(LAMBDA_UNLISTED, |i| i as u8),
        z_stream,
        slice_streams: streams,
    };
    let trace = CodingTrace {
        z_symbols,
        mu: trace_mu,
        sigma: trace_sigma,
        symbols: trace_symbols,
        y_hat: g.value(bundle.y_hat).clone(),
        y_bar: g.value(bundle.y_bar).clone(),
        x_hat,
    };
    Ok(Encoded { compressed, trace, reconstruction, estimated_z_bits, estimated_slice_bits })
}

pub fn decode<T: Real>(model: &Model<T>, c: &CompressedImage) -> Result<(Image, CodingTrace<T>)> {
    if c.model_hash != model.hash() {
        return Err(Error::ModelMismatch(format!(
            "stream was encoded with model {}, this checkpoint is {}",
            hex(&c.model_hash),
            hex(&model.hash())
        )));
    }
    let split = &model.net.entropy.split;
    if c.slice_streams.len() != split.len() {
        return Err(Error::Decode(format!("stream has {} slices, the model codes {}", c.slice_streams.len(), split.len())));
    }
    let (height, width) = (c.height as usize, c.width as usize);
    let ((yh, yw), (zh, zw)) = latent_dims(height, width);
    let mut g = Graph::inference(&model.store);

    let channel_models = model.net.prior.channel_models(&model.store)?;
    let z_cdfs = channel_models.iter().map(|m| QuantizedCdf::gaussian(m.mu_frac, m.sigma)).collect::<Result<Vec<_>>>()?;
    let mut dec = Decoder::new(&c.z_stream)?;
    let mut z_symbols = Vec::with_capacity(z_cdfs.len() * zh * zw);
    for cdf in &z_cdfs {
        for _ in 0..zh * zw {
            z_symbols.push(latent_symbol(dec.decode(cdf)?));
        }
    }
    dec.finish()?;
    let zs = g.input(Tensor::from_fn(vec![1, z_cdfs.len(), zh, zw], |i| T::of(z_symbols[i] as f64)));
    let prior = model.net.prior.from_symbols(&mut g, zs)?;
    let f_z = model.hyper_features(&mut g, prior.z_hat, yh, yw)?;

    let mut prev = Vec::new();
    let mut outs = Vec::new();
    let mut trace_mu = Vec::new();
    let mut trace_sigma = Vec::new();
    let mut trace_symbols = Vec::new();
    for (i, &ci) in split.iter().enumerate() {
        let pred = model.net.entropy.predict(&mut g, i, f_z, &prev)?;
        let sigma = g.value(pred.params.sigma).clone();
        let mut dec = Decoder::new(&c.slice_streams[i])?;
        let symbols = sigma.data().iter().map(|&s| Ok(latent_symbol(dec.decode(&gaussian_cdf(s)?)?))).collect::<Result<Vec<i32>>>()?;
        dec.finish()?;
        let m = g.input(Tensor::from_fn(vec![1, ci, yh, yw], |k| T::of(symbols[k] as f64)));
        trace_mu.push(g.value(pred.params.mu).clone());
        let out = model.net.entropy.complete(&mut g, i, pred, SliceInput::Symbols(m))?;
        trace_sigma.push(sigma);
        trace_symbols.push(symbols);
        prev.push(out.y_bar);
        outs.push(out);
    }
    let bundle = model.net.entropy.bundle(&mut g, outs)?;
    let x_full = model.net.g_s.forward(&mut g, bundle.y_bar)?;
    let x_hat = crop(g.value(x_full), height, width)?;
    let image = output_image(&x_hat, c.channels as usize)?;
    let trace = CodingTrace {
        z_symbols,
        mu: trace_mu,
        sigma: trace_sigma,
        symbols: trace_symbols,
        y_hat: g.value(bundle.y_hat).clone(),
        y_bar: g.value(bundle.y_bar).clone(),
        x_hat,
    };
    Ok((image, trace))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
