//! Range coding of quantized latents and the container format.

mod bitstream;
mod range;
mod tables;

pub use bitstream::{Bitstream, ViewSegments, MAGIC, VERSION};
pub use range::{RangeDecoder, RangeEncoder, PRECISION, TOTAL};
pub use tables::{gaussian_probability, logistic_probability, SymbolTable, BUCKETS, SUPPORT};

use crate::error::{Error, Result};

/// Codes `values[i]` with a zero-centred Gaussian table of scale `sigma[i]`.
pub fn encode_gaussian(values: &[i64], sigma: &[f64]) -> Result<Vec<u8>> {
    if values.len() != sigma.len() {
        return Err(Error::Contract(format!("{} values for {} scales", values.len(), sigma.len())));
    }
    let mut enc = RangeEncoder::new();
    for (&v, &s) in values.iter().zip(sigma) {
        SymbolTable::gaussian(s)?.encode(&mut enc, v);
    }
    Ok(enc.finish())
}

/// Inverse of [`encode_gaussian`]; the segment must be consumed exactly.
pub fn decode_gaussian(bytes: &[u8], sigma: &[f64]) -> Result<Vec<i64>> {
    let mut dec = RangeDecoder::new(bytes)?;
    let out = sigma.iter().map(|&s| SymbolTable::gaussian(s)?.decode(&mut dec)).collect::<Result<Vec<_>>>()?;
    dec.finish()?;
    Ok(out)
}

/// Estimated bits of a Gaussian-coded segment, from the coder's own tables.
pub fn gaussian_bits(values: &[i64], sigma: &[f64]) -> Result<f64> {
    values.iter().zip(sigma).map(|(&v, &s)| Ok(SymbolTable::gaussian(s)?.bits(v))).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn standard_normal_cost_near_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let values: Vec<i64> = (0..1000).map(|_| rng.sample::<f64, _>(StandardNormal).round() as i64).collect();
        let sigma = vec![1.0; values.len()];
        let bytes = encode_gaussian(&values, &sigma).unwrap();
        assert_eq!(decode_gaussian(&bytes, &sigma).unwrap(), values);
        let ideal: f64 = values.iter().map(|&v| -gaussian_probability(v, 1.0).log2()).sum();
        let actual = 8.0 * bytes.len() as f64;
        assert!((actual - ideal).abs() <= 0.01 * ideal, "{actual} vs {ideal}");
    }

    #[test]
    fn decoding_with_wrong_count_fails() {
        let sigma = vec![0.5; 300];
        let values: Vec<i64> = (0..300).map(|i| (i % 7) - 3).collect();
        let bytes = encode_gaussian(&values, &sigma).unwrap();
        assert!(decode_gaussian(&bytes, &sigma[..100]).is_err());
    }
}
