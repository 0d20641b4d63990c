//! Quantized symbol tables over a bounded support with escape coding.
//!
//! Symbols outside `[-SUPPORT, SUPPORT]` are folded into the extreme
//! buckets; every extreme-bucket symbol is followed by an Elias-gamma code
//! of its overshoot, sent as equiprobable bits.

use super::range::{RangeDecoder, RangeEncoder, TOTAL};
use crate::config::SIGMA_MIN;
use crate::error::{Error, Result};
use crate::tensor::{gaussian_mass, logistic_mass, logistic_sf, normal_sf};

pub const SUPPORT: i64 = 64;
pub const BUCKETS: usize = (2 * SUPPORT + 1) as usize;

/// Longest gamma prefix a decoder accepts.
const MAX_GAMMA_ZEROS: u32 = 62;

#[derive(Clone, Copy, Debug)]
enum Shape {
    Gaussian { sigma: f64 },
    Logistic { offset: f64, scale: f64 },
}

impl Shape {
    /// Probability of the unit bin centred at integer `v`.
    fn bin(self, v: i64) -> f64 {
        match self {
            Shape::Gaussian { sigma } => gaussian_mass(v as f64, sigma),
            Shape::Logistic { offset, scale } => logistic_mass(v as f64 - offset, scale),
        }
    }

    /// Mass below `-SUPPORT + 0.5` and at or above `SUPPORT - 0.5`.
    fn tails(self) -> (f64, f64) {
        let edge = SUPPORT as f64 - 0.5;
        match self {
            Shape::Gaussian { sigma } => {
                let t = normal_sf(edge / sigma);
                (t, t)
            }
            Shape::Logistic { offset, scale } => {
                (logistic_sf((edge + offset) / scale), logistic_sf((edge - offset) / scale))
            }
        }
    }
}

/// Probability of `v` under the bin model with tails folded into the
/// extreme buckets (no quantization).
fn folded(shape: Shape, v: i64) -> f64 {
    let (lo, hi) = shape.tails();
    if v <= -SUPPORT {
        lo
    } else if v >= SUPPORT {
        hi
    } else {
        shape.bin(v)
    }
}

/// Cumulative 16-bit frequencies of the [`BUCKETS`] support symbols.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymbolTable {
    cum: [u32; BUCKETS + 1],
}

impl SymbolTable {
    /// Zero-centred discretized Gaussian; values are coded as offsets from
    /// the predicted mean.
    pub fn gaussian(sigma: f64) -> Result<Self> {
        if !(sigma >= SIGMA_MIN) || !sigma.is_finite() {
            return Err(Error::Contract(format!("scale {sigma} below {SIGMA_MIN}")));
        }
        Ok(Self::from_shape(Shape::Gaussian { sigma }))
    }

    /// Discretized logistic located at `offset` (in `[-0.5, 0.5]` when the
    /// integer part of the location has been removed).
    pub fn logistic(offset: f64, scale: f64) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() || !offset.is_finite() {
            return Err(Error::Contract(format!("bad logistic parameters ({offset}, {scale})")));
        }
        Ok(Self::from_shape(Shape::Logistic { offset, scale }))
    }

    fn from_shape(shape: Shape) -> Self {
        let (lo, hi) = shape.tails();
        let mut p = [0.0; BUCKETS];
        p[0] = lo;
        p[BUCKETS - 1] = hi;
        for (i, slot) in p.iter_mut().enumerate().take(BUCKETS - 1).skip(1) {
            *slot = shape.bin(i as i64 - SUPPORT);
        }
        Self::from_pmf(&p)
    }

    /// Every bucket gets one count plus its share of the rest; the rounding
    /// deficit goes to the first most probable bucket.
    fn from_pmf(p: &[f64; BUCKETS]) -> Self {
        let spare = (TOTAL - BUCKETS as u32) as f64;
        let mut freq = [0u32; BUCKETS];
        for (f, &pi) in freq.iter_mut().zip(p) {
            *f = 1 + (pi.clamp(0.0, 1.0) * spare).floor() as u32;
        }
        let sum: u32 = freq.iter().sum();
        let top = (0..BUCKETS).fold(0, |best, i| if p[i] > p[best] { i } else { best });
        // Floors of a sub-unit total can only fall short.
        freq[top] += TOTAL - sum;
        let mut cum = [0u32; BUCKETS + 1];
        for i in 0..BUCKETS {
            cum[i + 1] = cum[i] + freq[i];
        }
        SymbolTable { cum }
    }

    fn bucket(v: i64) -> usize {
        (v.clamp(-SUPPORT, SUPPORT) + SUPPORT) as usize
    }

    pub fn freq(&self, v: i64) -> u32 {
        let b = Self::bucket(v);
        self.cum[b + 1] - self.cum[b]
    }

    /// Bits the coder spends on `v`, escape included.
    pub fn bits(&self, v: i64) -> f64 {
        let f = self.freq(v) as f64 / TOTAL as f64;
        -f.log2() + escape_bits(v).unwrap_or(0) as f64
    }

    pub fn encode(&self, enc: &mut RangeEncoder, v: i64) {
        let b = Self::bucket(v);
        enc.encode(self.cum[b], self.cum[b + 1] - self.cum[b]);
        if let Some(over) = overshoot(v) {
            encode_gamma(enc, over + 1);
        }
    }

    pub fn decode(&self, dec: &mut RangeDecoder<'_>) -> Result<i64> {
        let b = dec.decode(&self.cum)? as i64 - SUPPORT;
        if b.abs() < SUPPORT {
            return Ok(b);
        }
        let over = decode_gamma(dec)? - 1;
        let mag = i64::try_from(over)
            .ok()
            .and_then(|o| o.checked_add(SUPPORT))
            .ok_or_else(|| dec.corrupt("escape value overflows"))?;
        Ok(b.signum() * mag)
    }
}

/// Distance beyond the support edge for symbols in an extreme bucket.
fn overshoot(v: i64) -> Option<u64> {
    (v.unsigned_abs() >= SUPPORT as u64).then(|| v.unsigned_abs() - SUPPORT as u64)
}

fn escape_bits(v: i64) -> Option<u32> {
    overshoot(v).map(|o| 2 * (o + 1).ilog2() + 1)
}

fn encode_gamma(enc: &mut RangeEncoder, n: u64) {
    let len = n.ilog2();
    for _ in 0..len {
        enc.encode_bit(false);
    }
    for i in (0..=len).rev() {
        enc.encode_bit((n >> i) & 1 == 1);
    }
}

fn decode_gamma(dec: &mut RangeDecoder<'_>) -> Result<u64> {
    let mut zeros = 0;
    while !dec.decode_bit()? {
        zeros += 1;
        if zeros > MAX_GAMMA_ZEROS {
            return Err(dec.corrupt("escape prefix too long"));
        }
    }
    let mut n = 1u64;
    for _ in 0..zeros {
        n = (n << 1) | dec.decode_bit()? as u64;
    }
    Ok(n)
}

/// Tail-folded probability of integer offset `v` under a zero-mean
/// discretized Gaussian, before quantization to table counts.
pub fn gaussian_probability(v: i64, sigma: f64) -> f64 {
    folded(Shape::Gaussian { sigma }, v)
}

pub fn logistic_probability(v: i64, offset: f64, scale: f64) -> f64 {
    folded(Shape::Logistic { offset, scale }, v)
}
