//! PSNR, rate–distortion records and the Bjøntegaard delta rate.

use std::fmt;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

/// Peak signal-to-noise ratio in dB for 8-bit samples. Identical inputs give
/// `f64::INFINITY`, printed as `inf`.
pub fn psnr(a: &[u8], b: &[u8]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidArgument(format!("psnr of {} vs {} samples", a.len(), b.len())));
    }
    let sse: u64 = a.iter().zip(b).map(|(&x, &y)| ((x as i64 - y as i64) * (x as i64 - y as i64)) as u64).sum();
    Ok(psnr_from_mse(sse as f64 / a.len() as f64))
}

/// `10·log10(255² / mse)` with `mse` in 8-bit units.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0 * 255.0 / mse).log10()
    }
}

pub fn format_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RdRecord {
    pub image: String,
    pub lambda: f64,
    pub bpp: f64,
    pub psnr: f64,
}

impl fmt::Display for RdRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{:.6},{}", self.image, self.lambda, self.bpp, format_db(self.psnr))
    }
}

pub const CSV_HEADER: &str = "image,lambda,bpp,psnr";

pub fn write_csv(mut w: impl Write, records: &[RdRecord]) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in records {
        writeln!(w, "{r}")?;
    }
    Ok(())
}

pub fn read_csv(r: impl BufRead) -> Result<Vec<RdRecord>> {
    let mut lines = r.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim() != CSV_HEADER {
        return Err(Error::Format(format!("expected CSV header `{CSV_HEADER}`, found `{}`", header.trim())));
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::Format(format!("line {}: expected image,lambda,bpp,psnr in `{line}`", n + 2));
        if fields.len() != 4 {
            return Err(bad());
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
        out.push(RdRecord { image: fields[0].to_string(), lambda: num(fields[1])?, bpp: num(fields[2])?, psnr: num(fields[3])? });
    }
    Ok(out)
}

/// Monotone piecewise-cubic Hermite interpolant.
#[derive(Clone, Debug)]
pub struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl Pchip {
    /// `x` must be strictly increasing with at least two points.
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let n = x.len();
        if n < 2 || y.len() != n {
            return Err(Error::BdRate(format!("interpolation needs at least 2 points, got {n}")));
        }
        if x.windows(2).any(|w| w[1] <= w[0]) || x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::BdRate("PSNR values must be finite and distinct".into()));
        }
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let m: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
        let mut d = vec![0.0; n];
        if n == 2 {
            d[0] = m[0];
            d[1] = m[0];
        } else {
            for k in 1..n - 1 {
                if m[k - 1] * m[k] > 0.0 {
                    let w1 = 2.0 * h[k] + h[k - 1];
                    let w2 = h[k] + 2.0 * h[k - 1];
                    d[k] = (w1 + w2) / (w1 / m[k - 1] + w2 / m[k]);
                }
            }
            d[0] = Self::edge(h[0], h[1], m[0], m[1]);
            d[n - 1] = Self::edge(h[n - 2], h[n - 3], m[n - 2], m[n - 3]);
        }
        Ok(Pchip { x, y, d })
    }

    fn edge(h0: f64, h1: f64, m0: f64, m1: f64) -> f64 {
        let d = ((2.0 * h0 + h1) * m0 - h0 * m1) / (h0 + h1);
        if d.signum() != m0.signum() || m0 == 0.0 {
            0.0
        } else if m0.signum() != m1.signum() && d.abs() > 3.0 * m0.abs() {
            3.0 * m0
        } else {
            d
        }
    }

    pub fn range(&self) -> (f64, f64) {
        (self.x[0], *self.x.last().unwrap())
    }

    fn segment(&self, v: f64) -> usize {
        self.x.partition_point(|&xi| xi <= v).clamp(1, self.x.len() - 1) - 1
    }

    pub fn eval(&self, v: f64) -> f64 {
        let k = self.segment(v);
        let h = self.x[k + 1] - self.x[k];
        let t = (v - self.x[k]) / h;
        let (t2, t3) = (t * t, t * t * t);
        self.y[k] * (2.0 * t3 - 3.0 * t2 + 1.0)
            + h * self.d[k] * (t3 - 2.0 * t2 + t)
            + self.y[k + 1] * (-2.0 * t3 + 3.0 * t2)
            + h * self.d[k + 1] * (t3 - t2)
    }

    /// Exact integral of the interpolant over `[a, b]` inside its range.
    pub fn integrate(&self, a: f64, b: f64) -> f64 {
        let mut total = 0.0;
        for k in 0..self.x.len() - 1 {
            let (x0, x1) = (self.x[k], self.x[k + 1]);
            let (lo, hi) = (a.max(x0), b.min(x1));
            if hi <= lo {
                continue;
            }
            let h = x1 - x0;
            let anti = |t: f64| {
                let (t2, t3, t4) = (t * t, t * t * t, t * t * t * t);
                self.y[k] * (t4 / 2.0 - t3 + t)
                    + h * self.d[k] * (t4 / 4.0 - 2.0 * t3 / 3.0 + t2 / 2.0)
                    + self.y[k + 1] * (-t4 / 2.0 + t3)
                    + h * self.d[k + 1] * (t4 / 4.0 - t3 / 3.0)
            };
            total += h * (anti((hi - x0) / h) - anti((lo - x0) / h));
        }
        total
    }
}

fn curve(points: &[(f64, f64)], name: &str) -> Result<Pchip> {
    if points.len() < 4 {
        return Err(Error::BdRate(format!("{name} curve has {} points, at least 4 are required", points.len())));
    }
    if points.iter().any(|&(r, p)| !(r > 0.0) || !p.is_finite()) {
        return Err(Error::BdRate(format!("{name} curve needs positive rates and finite PSNR")));
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1));
    Pchip::new(sorted.iter().map(|p| p.1).collect(), sorted.iter().map(|p| p.0.log10()).collect())
}

/// Average rate difference of `test` relative to `anchor` in percent, over
/// their common PSNR interval. Points are `(rate, psnr)`.
pub fn bd_rate(anchor: &[(f64, f64)], test: &[(f64, f64)]) -> Result<f64> {
    let a = curve(anchor, "anchor")?;
    let t = curve(test, "test")?;
    let (a_lo, a_hi) = a.range();
    let (t_lo, t_hi) = t.range();
    let (lo, hi) = (a_lo.max(t_lo), a_hi.min(t_hi));
    if hi <= lo {
        return Err(Error::BdRate(format!(
            "no PSNR overlap: anchor spans [{a_lo:.4}, {a_hi:.4}] dB, test spans [{t_lo:.4}, {t_hi:.4}] dB"
        )));
    }
    let diff = (t.integrate(lo, hi) - a.integrate(lo, hi)) / (hi - lo);
    Ok((10f64.powf(diff) - 1.0) * 100.0)
}

/// Mean `(bpp, psnr)` per λ, in order of first appearance.
pub fn rd_curve(records: &[RdRecord]) -> Vec<(f64, f64)> {
    let mut groups: Vec<(f64, f64, f64, usize)> = Vec::new();
    for r in records {
        match groups.iter_mut().find(|g| g.0.to_bits() == r.lambda.to_bits()) {
            Some(g) => {
                g.1 += r.bpp;
                g.2 += r.psnr;
                g.3 += 1;
            }
            None => groups.push((r.lambda, r.bpp, r.psnr, 1)),
        }
    }
    groups.into_iter().map(|(_, b, p, n)| (b / n as f64, p / n as f64)).collect()
}

/// [`bd_rate`] over records, averaging the images at each λ into one point.
pub fn bd_rate_records(anchor: &[RdRecord], test: &[RdRecord]) -> Result<f64> {
    bd_rate(&rd_curve(anchor), &rd_curve(test))
}
