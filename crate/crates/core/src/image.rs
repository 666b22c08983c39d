//! 8-bit binary PGM (P5) and PPM (P6) images and tensor conversion.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 (gray) or 3 (RGB).
    pub channels: usize,
    /// Interleaved samples, row-major.
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!("zero-sized image {width}×{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!("{channels} channels; only gray or RGB images are supported")));
        }
        if data.len() != width * height * channels {
            return Err(Error::InvalidArgument(format!("{} samples for a {width}×{height}×{channels} image", data.len())));
        }
        Ok(Image { width, height, channels, data })
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut token = || -> Result<String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PNM header".into()));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let channels = match token()?.as_str() {
            "P5" => 1,
            "P6" => 3,
            other => return Err(Error::Format(format!("unsupported PNM magic {other:?}; expected P5 or P6"))),
        };
        let mut num = |what: &str| -> Result<usize> {
            token()?.parse().map_err(|_| Error::Format(format!("invalid PNM {what}")))
        };
        let width = num("width")?;
        let height = num("height")?;
        let maxval = num("maxval")?;
        if maxval != 255 {
            return Err(Error::Format(format!("maxval {maxval}; only 8-bit images are supported")));
        }
        // exactly one whitespace byte separates the header from the samples
        let body = pos + 1;
        let need = width * height * channels;
        if bytes.len() < body + need {
            return Err(Error::Format(format!("PNM data truncated: {} of {need} samples", bytes.len().saturating_sub(body))));
        }
        Image::new(width, height, channels, bytes[body..body + need].to_vec())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read(path)?)
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    /// `[1, C, H, W]` tensor with samples scaled to `[0, 1]`.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let (w, h, c) = (self.width, self.height, self.channels);
        Tensor::from_fn(vec![1, c, h, w], |i| {
            let (ch, rest) = (i / (h * w), i % (h * w));
            T::of(self.data[rest * c + ch] as f64 / 255.0)
        })
    }

    /// Inverse of [`Image::to_tensor`]: clamps to `[0, 1]` and rounds.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let (b, c, h, w) = t.dims4("image")?;
        if b != 1 {
            return Err(Error::InvalidArgument(format!("expected one image, got a batch of {b}")));
        }
        let mut data = vec![0u8; c * h * w];
        for ch in 0..c {
            for p in 0..h * w {
                let v = t.data()[ch * h * w + p].f64().clamp(0.0, 1.0);
                data[p * c + ch] = libm::round(v * 255.0) as u8;
            }
        }
        Image::new(w, h, c, data)
    }
}

/// Replicate-pads the spatial dimensions of `[B, C, H, W]` up to multiples of `m`.
pub fn pad_replicate<T: Real>(t: &Tensor<T>, m: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = t.dims4("pad")?;
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument("cannot pad an empty image".into()));
    }
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let src = t.data();
    Ok(Tensor::from_fn(vec![b, c, ph, pw], |i| {
        let x = (i % pw).min(w - 1);
        let y = (i / pw % ph).min(h - 1);
        let plane = i / (pw * ph);
        src[(plane * h + y) * w + x]
    }))
}

/// Keeps the top-left `h × w` window of `[B, C, H, W]`.
pub fn crop<T: Real>(t: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (b, c, th, tw) = t.dims4("crop")?;
    if h > th || w > tw {
        return Err(Error::shape("crop", format!("{h}×{w} window of a {th}×{tw} map")));
    }
    let src = t.data();
    Ok(Tensor::from_fn(vec![b, c, h, w], |i| {
        let x = i % w;
        let y = i / w % h;
        let plane = i / (w * h);
        src[(plane * th + y) * tw + x]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pnm_roundtrip() {
        let img = Image::new(3, 2, 3, (0..18).map(|v| v as u8 * 13).collect()).unwrap();
        let back = Image::parse(&img.encode()).unwrap();
        assert_eq!(back, img);
        let t = img.to_tensor::<f32>();
        assert_eq!(Image::from_tensor(&t).unwrap(), img);
    }

    #[test]
    fn header_comments_and_truncation() {
        let bytes = b"P5\n# comment\n2 2\n255\n\x01\x02\x03\x04";
        let img = Image::parse(bytes).unwrap();
        assert_eq!(img.data, vec![1, 2, 3, 4]);
        assert!(Image::parse(&bytes[..bytes.len() - 1]).is_err());
        assert!(Image::parse(b"P3\n1 1\n255\n0").is_err());
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let t = Tensor::from_fn(vec![1, 2, 5, 3], |i| i as f64);
        let p = pad_replicate(&t, 4).unwrap();
        assert_eq!(p.shape(), &[1, 2, 8, 4]);
        // replicated border
        assert_eq!(p.data()[7 * 4 + 3], t.data()[4 * 3 + 2]);
        assert_eq!(crop(&p, 5, 3).unwrap(), t);
    }
}
