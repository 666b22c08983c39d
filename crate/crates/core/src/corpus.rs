//! Procedural training and evaluation images.
//!
//! Each image mixes a few generators (smooth gradients, oriented sinusoids,
//! checkerboards, Gaussian blobs, blurred noise) with random colors. The
//! output depends only on the seed and the index.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{Real, Tensor};

pub const PATCH_SIZE: usize = 64;
/// Seed of the bundled training corpus.
pub const TRAIN_SEED: u64 = 0x5eed_0001;
/// Seed of the held-out evaluation set.
pub const EVAL_SEED: u64 = 0x5eed_0002;

#[derive(Clone, Copy, Debug)]
enum Layer {
    Gradient { angle: f64 },
    Sine { angle: f64, freq: f64, phase: f64 },
    Checker { cell: f64, angle: f64 },
    Blobs { count: usize },
    Noise { blur: usize },
}

fn random_layer(rng: &mut ChaCha8Rng) -> Layer {
    let angle = rng.gen_range(0.0..std::f64::consts::PI);
    match rng.gen_range(0..5) {
        0 => Layer::Gradient { angle },
        1 => Layer::Sine { angle, freq: rng.gen_range(0.02..0.25), phase: rng.gen_range(0.0..std::f64::consts::TAU) },
        2 => Layer::Checker { cell: rng.gen_range(3.0..16.0), angle },
        3 => Layer::Blobs { count: rng.gen_range(1..6) },
        _ => Layer::Noise { blur: rng.gen_range(1..4) },
    }
}

/// One scalar field in `[0, 1]`, row-major `h × w`.
fn field(layer: Layer, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (hf, wf) = (h as f64, w as f64);
    let mut out = vec![0.0; h * w];
    match layer {
        Layer::Gradient { angle } => {
            let (c, s) = (angle.cos(), angle.sin());
            let span = c.abs() * wf + s.abs() * hf;
            for (i, v) in out.iter_mut().enumerate() {
                let (y, x) = ((i / w) as f64 - hf / 2.0, (i % w) as f64 - wf / 2.0);
                *v = 0.5 + (x * c + y * s) / span;
            }
        }
        Layer::Sine { angle, freq, phase } => {
            let (c, s) = (angle.cos(), angle.sin());
            for (i, v) in out.iter_mut().enumerate() {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                *v = 0.5 + 0.5 * (std::f64::consts::TAU * freq * (x * c + y * s) + phase).sin();
            }
        }
        Layer::Checker { cell, angle } => {
            let (c, s) = (angle.cos(), angle.sin());
            for (i, v) in out.iter_mut().enumerate() {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                let (u, t) = ((x * c + y * s) / cell, (y * c - x * s) / cell);
                *v = if (u.floor() + t.floor()).rem_euclid(2.0) < 1.0 { 0.0 } else { 1.0 };
            }
        }
        Layer::Blobs { count } => {
            for _ in 0..count {
                let (cy, cx) = (rng.gen_range(0.0..hf), rng.gen_range(0.0..wf));
                let r = rng.gen_range(3.0..hf / 2.0);
                for (i, v) in out.iter_mut().enumerate() {
                    let (dy, dx) = ((i / w) as f64 - cy, (i % w) as f64 - cx);
                    *v += (-(dx * dx + dy * dy) / (2.0 * r * r)).exp();
                }
            }
            out.iter_mut().for_each(|v| *v = v.min(1.0));
        }
        Layer::Noise { blur } => {
            let raw: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
            for (i, v) in out.iter_mut().enumerate() {
                let (y, x) = (i / w, i % w);
                let (mut sum, mut n) = (0.0, 0.0);
                for yy in y.saturating_sub(blur)..(y + blur + 1).min(h) {
                    for xx in x.saturating_sub(blur)..(x + blur + 1).min(w) {
                        sum += raw[yy * w + xx];
                        n += 1.0;
                    }
                }
                *v = sum / n;
            }
        }
    }
    out
}

/// Image `index` of the stream defined by `seed`.
pub fn procedural_image(seed: u64, index: usize, height: usize, width: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let mut acc = vec![[0.0f64; 3]; height * width];
    let base: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    acc.iter_mut().for_each(|p| *p = base);
    for _ in 0..rng.gen_range(1..4) {
        let layer = random_layer(&mut rng);
        let f = field(layer, height, width, &mut rng);
        let color: [f64; 3] = [rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6)];
        for (p, v) in acc.iter_mut().zip(&f) {
            for c in 0..3 {
                p[c] += color[c] * (v - 0.5);
            }
        }
    }
    let data = acc.iter().flat_map(|p| p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)).collect();
    Image::new(width, height, 3, data).expect("generated image has consistent dimensions")
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub images: Vec<Image>,
}

impl Corpus {
    /// `count` square patches of side `size`.
    pub fn procedural(seed: u64, count: usize, size: usize) -> Self {
        Corpus { images: (0..count).map(|i| procedural_image(seed, i, size, size)).collect() }
    }

    /// The bundled desk-scale training set.
    pub fn training(count: usize, size: usize) -> Self {
        Self::procedural(TRAIN_SEED, count, size)
    }

    pub fn evaluation(count: usize, size: usize) -> Self {
        Self::procedural(EVAL_SEED, count, size)
    }

    /// Loads every `.ppm`/`.pgm` file in a directory, sorted by name.
    pub fn from_dir(dir: impl AsRef<std::path::Path>) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir.as_ref())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm")))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::InvalidArgument(format!("no .ppm or .pgm files in {}", dir.as_ref().display())));
        }
        let images = paths.iter().map(Image::read).collect::<Result<Vec<_>>>()?;
        Ok(Corpus { images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Stacks the given RGB images (all the same size) into `[B, 3, H, W]`.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let first = &self.images[indices[0]];
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(indices.len() * 3 * h * w);
        for &i in indices {
            let img = &self.images[i];
            if img.height != h || img.width != w || img.channels != 3 {
                return Err(Error::InvalidArgument(format!(
                    "batch needs {w}×{h} RGB images, image {i} is {}×{}×{}",
                    img.width, img.height, img.channels
                )));
            }
            data.extend_from_slice(img.to_tensor::<T>().data());
        }
        Tensor::new(vec![indices.len(), 3, h, w], data)
    }
}
