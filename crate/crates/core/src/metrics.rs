//! Distortion and rate-distortion comparison metrics.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Value reported for (near-)identical images.
pub const PSNR_CAP: f64 = 100.0;

/// One point of a rate-distortion curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdPoint {
    pub bpp: f64,
    pub psnr_db: f64,
}

/// PSNR in dB of images with peak value 1.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("psnr", a.shape(), b.shape()));
    }
    if a.numel() == 0 {
        return Err(Error::Input("psnr of empty images".into()));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.numel() as f64;
    Ok(if mse < 1e-10 { PSNR_CAP } else { -10.0 * mse.log10() })
}

/// Coefficients (lowest order first) of the least-squares cubic through
/// `(x, y)`.
fn cubic_fit(x: &[f64], y: &[f64]) -> Result<[f64; 4]> {
    let a = DMatrix::from_fn(x.len(), 4, |r, c| x[r].powi(c as i32));
    let b = DVector::from_column_slice(y);
    let sol = a.svd(true, true).solve(&b, 1e-12).map_err(|e| Error::Domain(format!("cubic fit failed: {e}")))?;
    Ok([sol[0], sol[1], sol[2], sol[3]])
}

fn integral(p: &[f64; 4], lo: f64, hi: f64) -> f64 {
    let prim = |x: f64| p[0] * x + p[1] * x * x / 2.0 + p[2] * x.powi(3) / 3.0 + p[3] * x.powi(4) / 4.0;
    prim(hi) - prim(lo)
}

/// Average bitrate change (percent) of `b` relative to `a` at equal
/// quality: cubic fits of log-rate against PSNR, integrated over the shared
/// PSNR interval.
pub fn bdbr(a: &[RdPoint], b: &[RdPoint]) -> Result<f64> {
    for (name, c) in [("first", a), ("second", b)] {
        if c.len() < 4 {
            return Err(Error::Input(format!("{name} curve has {} points, need 4", c.len())));
        }
        if c.iter().any(|p| !(p.bpp > 0.0) || !p.psnr_db.is_finite() || !p.bpp.is_finite()) {
            return Err(Error::Input(format!("{name} curve has a non-positive rate or non-finite value")));
        }
    }
    let range = |c: &[RdPoint]| {
        c.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.psnr_db), hi.max(p.psnr_db)))
    };
    let (a_lo, a_hi) = range(a);
    let (b_lo, b_hi) = range(b);
    let (lo, hi) = (a_lo.max(b_lo), a_hi.min(b_hi));
    if !(hi > lo) {
        return Err(Error::Domain(format!("no shared quality range ({a_lo}..{a_hi} vs {b_lo}..{b_hi})")));
    }
    let fit = |c: &[RdPoint]| {
        let x: Vec<f64> = c.iter().map(|p| p.psnr_db).collect();
        let y: Vec<f64> = c.iter().map(|p| p.bpp.ln()).collect();
        cubic_fit(&x, &y)
    };
    let (pa, pb) = (fit(a)?, fit(b)?);
    let avg = (integral(&pb, lo, hi) - integral(&pa, lo, hi)) / (hi - lo);
    Ok(avg.exp_m1() * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve() -> Vec<RdPoint> {
        [(0.1, 28.0), (0.2, 31.0), (0.4, 34.5), (0.8, 37.0)]
            .iter()
            .map(|&(bpp, psnr_db)| RdPoint { bpp, psnr_db })
            .collect()
    }

    #[test]
    fn psnr_fixtures() {
        let a = Tensor::full(&[1, 3, 4, 4], 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        let b = Tensor::full(&[1, 3, 4, 4], 0.6);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &Tensor::full(&[1, 3, 4, 5], 0.5)).is_err());
    }

    #[test]
    fn bdbr_identity_and_shift() {
        let a = curve();
        assert_eq!(bdbr(&a, &a).unwrap(), 0.0);
        let b: Vec<RdPoint> = a.iter().map(|p| RdPoint { bpp: p.bpp * 0.9, ..*p }).collect();
        assert!((bdbr(&a, &b).unwrap() + 10.0).abs() < 1e-9);
    }

    #[test]
    fn bdbr_needs_overlap() {
        let a = curve();
        let b: Vec<RdPoint> = a.iter().map(|p| RdPoint { psnr_db: p.psnr_db + 20.0, ..*p }).collect();
        assert!(matches!(bdbr(&a, &b), Err(Error::Domain(_))));
        assert!(matches!(bdbr(&a[..3], &a), Err(Error::Input(_))));
    }
}
