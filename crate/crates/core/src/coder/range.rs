//! Byte-oriented range coder over 16-bit frequency tables.
//!
//! State is a 32-bit `low` window (kept in a `u64` so the carry is visible)
//! and a 32-bit `range` renormalized to at least 2^24. Carries ripple back
//! into bytes already emitted.

use crate::error::{Error, Result};

pub const PRECISION: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION;

const TOP: u64 = 1 << 32;
const BOTTOM: u32 = 1 << 24;

#[inline]
fn split(range: u32, cum: u32) -> u64 {
    (range as u64 * cum as u64) >> PRECISION
}

#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder { low: 0, range: u32::MAX, out: Vec::new() }
    }

    fn propagate_carry(&mut self) {
        for b in self.out.iter_mut().rev() {
            let (v, overflow) = b.overflowing_add(1);
            *b = v;
            if !overflow {
                return;
            }
        }
        unreachable!("carry past the first byte");
    }

    /// Narrows the interval to `[cum, cum + freq)` out of [`TOTAL`].
    pub fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= TOTAL);
        let lo = split(self.range, cum);
        let hi = split(self.range, cum + freq);
        self.low += lo;
        self.range = (hi - lo) as u32;
        if self.low >= TOP {
            self.low -= TOP;
            self.propagate_carry();
        }
        while self.range < BOTTOM {
            self.out.push((self.low >> 24) as u8);
            self.low = (self.low << 8) & (TOP - 1);
            self.range <<= 8;
        }
    }

    /// Encodes one bit at probability one half.
    pub fn encode_bit(&mut self, bit: bool) {
        let half = TOTAL / 2;
        self.encode(if bit { half } else { 0 }, half);
    }

    /// Bytes emitted so far, excluding the final flush.
    pub fn len(&self) -> usize {
        self.out.len()
    }

    pub fn is_empty(&self) -> bool {
        self.out.is_empty()
    }

    /// Emits the fewest bytes that pin a value inside the final interval,
    /// assuming the decoder pads with zero bytes.
    pub fn finish(mut self) -> Vec<u8> {
        let end = self.low + self.range as u64;
        for k in 0..=4u32 {
            let unit = 1u64 << (32 - 8 * k);
            let mut v = self.low.div_ceil(unit) * unit;
            if v >= end {
                continue;
            }
            if v >= TOP {
                v -= TOP;
                self.propagate_carry();
            }
            for i in 0..k {
                self.out.push((v >> (24 - 8 * i)) as u8);
            }
            break;
        }
        self.out
    }
}

/// Number of zero bytes a decoder may read past the end of a segment.
const MAX_IMPLICIT: usize = 4;

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    bytes: &'a [u8],
    pos: usize,
    code: u64,
    range: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Result<Self> {
        let mut d = RangeDecoder { bytes, pos: 0, code: 0, range: u32::MAX };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte()? as u64;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = match self.bytes.get(self.pos) {
            Some(&b) => b,
            None if self.pos < self.bytes.len() + MAX_IMPLICIT => 0,
            None => {
                return Err(Error::Corrupt { offset: self.bytes.len(), reason: "range coder segment exhausted".into() })
            }
        };
        self.pos += 1;
        Ok(b)
    }

    /// Finds the symbol whose interval holds the current code. `cum` holds
    /// the cumulative frequencies, `cum[0] = 0` and `cum[n] = TOTAL`.
    pub fn decode(&mut self, cum: &[u32]) -> Result<usize> {
        let n = cum.len() - 1;
        if self.code >= self.range as u64 {
            return Err(self.corrupt("code outside interval"));
        }
        // Largest s with split(range, cum[s]) <= code.
        let (mut lo, mut hi) = (0usize, n);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if split(self.range, cum[mid]) <= self.code {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let s = lo;
        let a = split(self.range, cum[s]);
        let b = split(self.range, cum[s + 1]);
        if b <= self.code || a == b {
            return Err(self.corrupt("no symbol interval holds the code"));
        }
        self.code -= a;
        self.range = (b - a) as u32;
        while self.range < BOTTOM {
            self.code = (self.code << 8) | self.next_byte()? as u64;
            self.range <<= 8;
        }
        Ok(s)
    }

    pub fn decode_bit(&mut self) -> Result<bool> {
        Ok(self.decode(&[0, TOTAL / 2, TOTAL])? == 1)
    }

    pub(crate) fn corrupt(&self, reason: &str) -> Error {
        Error::Corrupt { offset: self.pos.min(self.bytes.len()), reason: reason.into() }
    }

    /// Checks that every byte of the segment was needed.
    pub fn finish(self) -> Result<()> {
        if self.pos < self.bytes.len() {
            return Err(Error::Corrupt {
                offset: self.pos,
                reason: format!("{} unread bytes at end of segment", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_stream_is_tiny() {
        let bytes = RangeEncoder::new().finish();
        assert!(bytes.len() <= 8);
        RangeDecoder::new(&bytes).unwrap().finish().unwrap();
    }

    #[test]
    fn bits_roundtrip() {
        let pattern: Vec<bool> = (0..1000).map(|i| (i * 7919) % 3 == 0).collect();
        let mut e = RangeEncoder::new();
        pattern.iter().for_each(|&b| e.encode_bit(b));
        let bytes = e.finish();
        assert!(bytes.len() <= 126, "{}", bytes.len());
        let mut d = RangeDecoder::new(&bytes).unwrap();
        for &b in &pattern {
            assert_eq!(d.decode_bit().unwrap(), b);
        }
        d.finish().unwrap();
    }

    #[test]
    fn truncated_stream_reports_offset() {
        let mut e = RangeEncoder::new();
        for i in 0..400 {
            e.encode_bit(i % 5 == 0);
        }
        let bytes = e.finish();
        let cut = &bytes[..bytes.len() / 2];
        let mut d = RangeDecoder::new(cut).unwrap();
        let mut err = None;
        for _ in 0..400 {
            if let Err(x) = d.decode_bit() {
                err = Some(x);
                break;
            }
        }
        match err {
            Some(Error::Corrupt { offset, .. }) => assert_eq!(offset, cut.len()),
            other => panic!("expected corruption error, got {other:?}"),
        }
    }
}
