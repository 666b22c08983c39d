//! Range coder with 32-bit state and 16-bit probability precision.
//!
//! The encoder follows the carry-propagating scheme of the LZMA coder: `low`
//! is kept in 33+ bits, the top byte is buffered in `cache` together with a
//! count of pending `0xFF` bytes so a late carry can ripple into them.
//! The stream layout is described byte by byte in `docs/bitstream.md`.

use crate::error::{Error, Result};
use crate::graph::{interval_probability, SYMBOL_MAX, SYMBOL_MIN};

pub const PRECISION_BITS: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION_BITS;
/// Number of symbols of the latent alphabet `[−64, 63]`.
pub const LATENT_SYMBOLS: usize = (SYMBOL_MAX - SYMBOL_MIN + 1) as usize;

const TOP: u32 = 1 << 24;

/// Cumulative 16-bit frequency table. Entry `i` is the start of symbol `i`;
/// the last entry is [`TOTAL`]. Every symbol has a count of at least 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedCdf {
    cum: Vec<u32>,
}

impl QuantizedCdf {
    /// Validates a cumulative table.
    pub fn from_cumulative(cum: Vec<u32>) -> Result<Self> {
        if cum.len() < 2 {
            return Err(Error::InvalidArgument("a cdf needs at least one symbol".into()));
        }
        if cum[0] != 0 || *cum.last().unwrap() != TOTAL {
            return Err(Error::InvalidArgument(format!("cdf must span [0, {TOTAL}]")));
        }
        if let Some(i) = cum.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(format!("cdf is not strictly increasing at symbol {i}")));
        }
        Ok(QuantizedCdf { cum })
    }

    /// Quantizes a probability vector. Symbols whose share would fall below
    /// one count get exactly one; the rest of the total is split among the
    /// others in proportion to their mass, rounding by largest remainder
    /// (ties to the lower index).
    pub fn from_probabilities(p: &[f64]) -> Result<Self> {
        let n = p.len();
        if n == 0 || n > TOTAL as usize {
            return Err(Error::InvalidArgument(format!("cannot quantize an alphabet of {n} symbols")));
        }
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument("probabilities must be finite and non-negative".into()));
        }
        if p.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidArgument("probabilities sum to zero".into()));
        }
        let mut floor = vec![false; n];
        let (free, mass) = loop {
            let free = (TOTAL as usize - floor.iter().filter(|&&f| f).count()) as f64;
            let mass: f64 = p.iter().zip(&floor).filter(|(_, &f)| !f).map(|(v, _)| v).sum();
            let mut changed = false;
            for (i, &v) in p.iter().enumerate() {
                if !floor[i] && v / mass * free < 1.0 {
                    floor[i] = true;
                    changed = true;
                }
            }
            if !changed {
                break (free, mass);
            }
        };
        let mut counts = vec![1u32; n];
        let mut frac = Vec::with_capacity(n);
        let mut used = 0u64;
        for i in (0..n).filter(|&i| !floor[i]) {
            let share = p[i] / mass * free;
            let whole = share.floor();
            counts[i] = whole as u32;
            frac.push((share - whole, i));
            used += whole as u64;
        }
        let deficit = (free as u64).saturating_sub(used) as usize;
        frac.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, i) in frac.iter().take(deficit) {
            counts[i] += 1;
        }
        let mut cum = Vec::with_capacity(n + 1);
        cum.push(0);
        let mut acc = 0;
        for c in counts {
            acc += c;
            cum.push(acc);
        }
        Self::from_cumulative(cum)
    }

    /// Discretized Gaussian over the latent alphabet, centered at `mu_frac`.
    /// The first and last symbols absorb the tails.
    pub fn gaussian(mu_frac: f64, sigma: f64) -> Result<Self> {
        // f32 models round the bounds, so allow a relative slack of 1e-6.
        if !(crate::cape::SIGMA_MIN * (1.0 - 1e-6)..=crate::cape::SIGMA_MAX * (1.0 + 1e-6)).contains(&sigma) {
            return Err(Error::InvalidArgument(format!("sigma {sigma} outside the coder's range")));
        }
        if !(0.0..1.0).contains(&mu_frac) {
            return Err(Error::InvalidArgument(format!("mean offset {mu_frac} outside [0, 1)")));
        }
        let p: Vec<f64> = (SYMBOL_MIN..=SYMBOL_MAX)
            .map(|m| {
                let d = m as f64 - mu_frac;
                if m == SYMBOL_MIN {
                    crate::kernels::normal_cdf((d + 0.5) / sigma)
                } else if m == SYMBOL_MAX {
                    crate::kernels::normal_cdf((0.5 - d) / sigma)
                } else {
                    interval_probability(d, sigma)
                }
            })
            .collect();
        Self::from_probabilities(&p)
    }

    pub fn symbols(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn cumulative(&self) -> &[u32] {
        &self.cum
    }

    pub fn start(&self, s: usize) -> u32 {
        self.cum[s]
    }

    pub fn count(&self, s: usize) -> u32 {
        self.cum[s + 1] - self.cum[s]
    }

    pub fn probability(&self, s: usize) -> f64 {
        self.count(s) as f64 / TOTAL as f64
    }

    /// Ideal code length of `s` under this table.
    pub fn bits(&self, s: usize) -> f64 {
        -self.probability(s).log2()
    }

    fn find(&self, target: u32) -> usize {
        self.cum.partition_point(|&c| c <= target) - 1
    }
}

/// Maps a latent symbol in `[−64, 63]` to its table index.
pub fn latent_index(m: i32) -> Result<usize> {
    if (SYMBOL_MIN..=SYMBOL_MAX).contains(&m) {
        Ok((m - SYMBOL_MIN) as usize)
    } else {
        Err(Error::InvalidArgument(format!("symbol {m} outside [{SYMBOL_MIN}, {SYMBOL_MAX}]")))
    }
}

pub fn latent_symbol(index: usize) -> i32 {
    index as i32 + SYMBOL_MIN
}

#[derive(Debug)]
pub struct Encoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    out: Vec<u8>,
    started: bool,
}

impl Default for Encoder {
    fn default() -> Self {
        Self::new()
    }
}

impl Encoder {
    pub fn new() -> Self {
        Encoder { low: 0, range: u32::MAX, cache: 0, pending: 1, out: Vec::new(), started: false }
    }

    pub fn encode(&mut self, symbol: usize, cdf: &QuantizedCdf) -> Result<()> {
        if symbol >= cdf.symbols() {
            return Err(Error::InvalidArgument(format!("symbol {symbol} outside an alphabet of {}", cdf.symbols())));
        }
        let r = self.range >> PRECISION_BITS;
        self.low += r as u64 * cdf.start(symbol) as u64;
        self.range = r * cdf.count(symbol);
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
        Ok(())
    }

    fn emit(&mut self, byte: u8) {
        // The very first byte produced is always zero; it is not stored.
        if self.started {
            self.out.push(byte);
        }
        self.started = true;
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low > 0xFFFF_FFFF {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.emit(byte.wrapping_add(carry));
                byte = 0xFF;
                self.pending -= 1;
                if self.pending == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    /// Flushes the state and returns the stream.
    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

#[derive(Debug)]
pub struct Decoder<'a> {
    data: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
}

impl<'a> Decoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        let mut d = Decoder { data, pos: 0, code: 0, range: u32::MAX };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next()? as u32;
        }
        Ok(d)
    }

    fn next(&mut self) -> Result<u8> {
        let b = *self
            .data
            .get(self.pos)
            .ok_or_else(|| Error::Decode(format!("stream truncated after {} bytes", self.data.len())))?;
        self.pos += 1;
        Ok(b)
    }

    pub fn decode(&mut self, cdf: &QuantizedCdf) -> Result<usize> {
        let r = self.range >> PRECISION_BITS;
        let target = self.code / r;
        if target >= TOTAL {
            return Err(Error::Decode("corrupt stream: code value outside the range".into()));
        }
        let s = cdf.find(target);
        self.code -= r * cdf.start(s);
        self.range = r * cdf.count(s);
        while self.range < TOP {
            self.code = (self.code << 8) | self.next()? as u32;
            self.range <<= 8;
        }
        Ok(s)
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Errors unless the whole stream was consumed.
    pub fn finish(self) -> Result<()> {
        if self.pos == self.data.len() {
            Ok(())
        } else {
            Err(Error::Decode(format!("{} trailing bytes after the last symbol", self.data.len() - self.pos)))
        }
    }
}

/// Encodes a symbol sequence, one table per symbol.
pub fn encode_all(symbols: &[usize], cdfs: &[QuantizedCdf]) -> Result<Vec<u8>> {
    if symbols.len() != cdfs.len() {
        return Err(Error::InvalidArgument(format!("{} symbols but {} tables", symbols.len(), cdfs.len())));
    }
    let mut enc = Encoder::new();
    for (&s, cdf) in symbols.iter().zip(cdfs) {
        enc.encode(s, cdf)?;
    }
    Ok(enc.finish())
}

pub fn decode_all(stream: &[u8], cdfs: &[QuantizedCdf]) -> Result<Vec<usize>> {
    let mut dec = Decoder::new(stream)?;
    let out = cdfs.iter().map(|c| dec.decode(c)).collect::<Result<Vec<_>>>()?;
    dec.finish()?;
    Ok(out)
}
