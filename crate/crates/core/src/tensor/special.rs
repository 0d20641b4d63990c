//! Likelihood and attention kernels with hand-written gradients.

use std::f64::consts::{LN_2, SQRT_2};

use super::ops::sigmoid;
use super::Tensor;
use crate::error::{Error, Result};

/// Smallest interval probability used when converting to bits.
pub const LIKELIHOOD_FLOOR: f64 = 1e-9;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Upper tail of the standard normal, `1 - Phi(x)`.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x / SQRT_2)
}

pub fn normal_cdf(x: f64) -> f64 {
    normal_sf(-x)
}

fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Upper tail of the standard logistic.
pub fn logistic_sf(x: f64) -> f64 {
    sigmoid(-x)
}

fn logistic_pdf(x: f64) -> f64 {
    sigmoid(x) * sigmoid(-x)
}

/// Probability that a unit-width bin at offset `d` from the location holds
/// the sample, for a normal with standard deviation `sigma`.
///
/// Evaluated on `|d|` through the upper tail so that bins far from the
/// location keep full relative precision.
pub fn gaussian_mass(d: f64, sigma: f64) -> f64 {
    let ad = d.abs();
    normal_sf((ad - 0.5) / sigma) - normal_sf((ad + 0.5) / sigma)
}

/// As [`gaussian_mass`] for a logistic with scale `s`.
pub fn logistic_mass(d: f64, s: f64) -> f64 {
    let ad = d.abs();
    logistic_sf((ad - 0.5) / s) - logistic_sf((ad + 0.5) / s)
}

#[derive(Clone, Copy)]
enum Family {
    Gaussian,
    Logistic,
}

impl Family {
    fn sf(self, x: f64) -> f64 {
        match self {
            Family::Gaussian => normal_sf(x),
            Family::Logistic => logistic_sf(x),
        }
    }

    fn pdf(self, x: f64) -> f64 {
        match self {
            Family::Gaussian => normal_pdf(x),
            Family::Logistic => logistic_pdf(x),
        }
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn interval_bits(v: &Tensor, loc: &Tensor, scale: &Tensor, family: Family, op: &'static str) -> Result<Tensor> {
    if v.shape() != loc.shape() {
        return Err(Error::shape(op, v.shape(), loc.shape()));
    }
    if v.shape() != scale.shape() {
        return Err(Error::shape(op, v.shape(), scale.shape()));
    }
    if let Some(s) = scale.data().iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::Contract(format!("{op}: scale must be positive, got {s}")));
    }
    let floor_bits = -LIKELIHOOD_FLOOR.log2();
    let data: Vec<f64> = v
        .data()
        .iter()
        .zip(loc.data())
        .zip(scale.data())
        .map(|((&x, &m), &s)| {
            let d = (x - m).abs();
            let l = family.sf((d - 0.5) / s) - family.sf((d + 0.5) / s);
            if l > LIKELIHOOD_FLOOR {
                -l.log2()
            } else {
                floor_bits
            }
        })
        .collect();

    let (vt, mt, st) = (v.clone(), loc.clone(), scale.clone());
    Ok(Tensor::from_op(data, v.shape().to_vec(), vec![v.clone(), loc.clone(), scale.clone()], move |_, g| {
        let n = g.len();
        let mut gv = vec![0.0; n];
        let mut gs = vec![0.0; n];
        for i in 0..n {
            let (x, m, s) = (vt.data()[i], mt.data()[i], st.data()[i]);
            let d = x - m;
            let ad = d.abs();
            let (a, b) = ((ad - 0.5) / s, (ad + 0.5) / s);
            let l = family.sf(a) - family.sf(b);
            if l <= LIKELIHOOD_FLOOR {
                continue;
            }
            let (pa, pb) = (family.pdf(a), family.pdf(b));
            let dl_dad = (pb - pa) / s;
            let dl_ds = (pa * a - pb * b) / s;
            let dbits_dl = -1.0 / (l * LN_2);
            gv[i] = g[i] * dbits_dl * dl_dad * sign0(d);
            gs[i] = g[i] * dbits_dl * dl_ds;
        }
        let gm = mt.requires_grad().then(|| gv.iter().map(|x| -x).collect());
        vec![Some(gv), gm, Some(gs)]
    }))
}

impl Tensor {
    /// Elementwise `-log2 P(bin)` of the unit bin around `self` under a
    /// normal with mean `mu` and standard deviation `sigma` (all same shape).
    /// Probabilities are floored at [`LIKELIHOOD_FLOOR`], where the gradient
    /// is zero.
    pub fn discretized_gaussian_bits(&self, mu: &Tensor, sigma: &Tensor) -> Result<Tensor> {
        interval_bits(self, mu, sigma, Family::Gaussian, "discretized_gaussian_bits")
    }

    /// As [`Tensor::discretized_gaussian_bits`] for a logistic with location
    /// `loc` and scale `scale`.
    pub fn discretized_logistic_bits(&self, loc: &Tensor, scale: &Tensor) -> Result<Tensor> {
        interval_bits(self, loc, scale, Family::Logistic, "discretized_logistic_bits")
    }
}

/// Key offsets `(dy, dx)` inside a `window x window` neighbourhood that land
/// on the opposite checkerboard colour from the centre.
pub(crate) fn opposite_parity_offsets(window: usize) -> Vec<(isize, isize)> {
    let r = (window / 2) as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if (dy + dx).rem_euclid(2) == 1 {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// Windowed attention from non-anchor queries to anchor keys.
///
/// `q: [B, D, H, W]`; `k: [B, D, H+2r, W+2r]` and `v: [B, E, H+2r, W+2r]`
/// are already padded by `r = window / 2`. A cell `(i, j)` is an anchor when
/// `i + j` is even (padding cells included, in unpadded coordinates). Every
/// non-anchor position attends to the anchor cells of its window with logits
/// `q . k / sqrt(D)`; anchor positions of the output are zero and their
/// queries are never read.
pub fn local_window_attention(q: &Tensor, k: &Tensor, v: &Tensor, window: usize) -> Result<Tensor> {
    if window < 3 || window.is_multiple_of(2) {
        return Err(Error::Config(format!("attention window must be odd and >= 3, got {window}")));
    }
    let r = window / 2;
    let (b, d, h, w) = match q.shape() {
        &[b, d, h, w] => (b, d, h, w),
        s => return Err(Error::shape("local_window_attention", s, k.shape())),
    };
    let (hp, wp) = (h + 2 * r, w + 2 * r);
    if k.shape() != [b, d, hp, wp] {
        return Err(Error::shape("local_window_attention", q.shape(), k.shape()));
    }
    let e = match v.shape() {
        &[vb, e, vh, vw] if vb == b && vh == hp && vw == wp => e,
        s => return Err(Error::shape("local_window_attention", k.shape(), s)),
    };
    let offsets = opposite_parity_offsets(window);
    let nk = offsets.len();
    let scale = 1.0 / (d as f64).sqrt();
    let (qp, kp) = (h * w, hp * wp);

    // Flat key index in the padded plane for query (i, j) and offset n.
    let key_at = move |i: usize, j: usize, n: usize| -> usize {
        let (dy, dx) = offsets[n];
        let y = (i + r) as isize + dy;
        let x = (j + r) as isize + dx;
        y as usize * wp + x as usize
    };
    let queries: Vec<(usize, usize)> =
        (0..h).flat_map(|i| (0..w).map(move |j| (i, j))).filter(|(i, j)| (i + j) % 2 == 1).collect();

    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0; b * e * qp];
    let mut attn = vec![0.0; b * queries.len() * nk];
    for bi in 0..b {
        for (qi, &(i, j)) in queries.iter().enumerate() {
            let a = &mut attn[(bi * queries.len() + qi) * nk..(bi * queries.len() + qi + 1) * nk];
            for (n, an) in a.iter_mut().enumerate() {
                let kk = key_at(i, j, n);
                let mut s = 0.0;
                for c in 0..d {
                    s += qd[(bi * d + c) * qp + i * w + j] * kd[(bi * d + c) * kp + kk];
                }
                *an = s * scale;
            }
            let m = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for an in a.iter_mut() {
                *an = (*an - m).exp();
                z += *an;
            }
            a.iter_mut().for_each(|an| *an /= z);
            for c in 0..e {
                let mut s = 0.0;
                for (n, &an) in a.iter().enumerate() {
                    s += an * vd[(bi * e + c) * kp + key_at(i, j, n)];
                }
                out[(bi * e + c) * qp + i * w + j] = s;
            }
        }
    }
    if out.iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite("local_window_attention"));
    }

    let (qt, kt, vt) = (q.clone(), k.clone(), v.clone());
    Ok(Tensor::from_op(out, vec![b, e, h, w], vec![q.clone(), k.clone(), v.clone()], move |_, g| {
        let (qd, kd, vd) = (qt.data(), kt.data(), vt.data());
        let mut gq = vec![0.0; b * d * qp];
        let mut gk = vec![0.0; b * d * kp];
        let mut gv = vec![0.0; b * e * kp];
        let mut ga = vec![0.0; nk];
        for bi in 0..b {
            for (qi, &(i, j)) in queries.iter().enumerate() {
                let a = &attn[(bi * queries.len() + qi) * nk..(bi * queries.len() + qi + 1) * nk];
                let pos = i * w + j;
                for (n, gan) in ga.iter_mut().enumerate() {
                    let kk = key_at(i, j, n);
                    let mut s = 0.0;
                    for c in 0..e {
                        let go = g[(bi * e + c) * qp + pos];
                        s += go * vd[(bi * e + c) * kp + kk];
                        gv[(bi * e + c) * kp + kk] += a[n] * go;
                    }
                    *gan = s;
                }
                let dot: f64 = a.iter().zip(&ga).map(|(x, y)| x * y).sum();
                for n in 0..nk {
                    let gl = a[n] * (ga[n] - dot) * scale;
                    let kk = key_at(i, j, n);
                    for c in 0..d {
                        gq[(bi * d + c) * qp + pos] += gl * kd[(bi * d + c) * kp + kk];
                        gk[(bi * d + c) * kp + kk] += gl * qd[(bi * d + c) * qp + pos];
                    }
                }
            }
        }
        vec![Some(gq), Some(gk), Some(gv)]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scans the full window and keeps cells of the opposite colour.
    #[test]
    fn window_attention_matches_loops() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (d, e, h, w, win) = (2, 3, 4, 5, 5);
        let r = win / 2;
        let (hp, wp) = (h + 2 * r, w + 2 * r);
        let q = Tensor::randn(&[1, d, h, w], 1.0, &mut rng);
        let k = Tensor::randn(&[1, d, hp, wp], 1.0, &mut rng);
        let v = Tensor::randn(&[1, e, hp, wp], 1.0, &mut rng);
        let out = local_window_attention(&q, &k, &v, win).unwrap();
        for i in 0..h {
            for j in 0..w {
                if (i + j) % 2 == 0 {
                    assert!((0..e).all(|c| out.data()[(c * h + i) * w + j] == 0.0));
                    continue;
                }
                let mut cells = Vec::new();
                for y in i..i + win {
                    for x in j..j + win {
                        // Padding shifts both coordinates by r, so parity is unchanged.
                        if (y + x) % 2 == 0 {
                            let dot: f64 =
                                (0..d).map(|c| q.data()[(c * h + i) * w + j] * k.data()[(c * hp + y) * wp + x]).sum();
                            cells.push((dot / (d as f64).sqrt(), y * wp + x));
                        }
                    }
                }
                assert_eq!(cells.len(), 12);
                let z: f64 = cells.iter().map(|c| c.0.exp()).sum();
                for c in 0..e {
                    let want: f64 = cells.iter().map(|&(l, p)| l.exp() / z * v.data()[c * hp * wp + p]).sum();
                    assert!((out.data()[(c * h + i) * w + j] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn standard_normal_central_bin() {
        let p = gaussian_mass(0.0, 1.0);
        assert!((p - 0.382_924_922_548_026).abs() < 1e-12, "{p}");
        let bits = Tensor::scalar(0.0).discretized_gaussian_bits(&Tensor::scalar(0.0), &Tensor::scalar(1.0)).unwrap();
        assert!((bits.item().unwrap() - 1.384_866_534_290_99).abs() < 1e-12);
    }

    #[test]
    fn centre_bin_is_most_likely() {
        for s in [0.11, 0.5, 3.0, 40.0] {
            assert!(gaussian_mass(0.0, s) >= gaussian_mass(1.0, s));
            assert!(logistic_mass(0.0, s) >= logistic_mass(-1.0, s));
        }
    }

    #[test]
    fn far_tail_hits_floor() {
        let bits =
            Tensor::scalar(100.0).discretized_gaussian_bits(&Tensor::scalar(0.0), &Tensor::scalar(0.11)).unwrap();
        assert_eq!(bits.item().unwrap(), -LIKELIHOOD_FLOOR.log2());
    }

    #[test]
    fn offsets_for_window_five() {
        let o = opposite_parity_offsets(5);
        assert_eq!(o.len(), 12);
        assert!(o.contains(&(0, 1)) && o.contains(&(-2, 1)) && !o.contains(&(1, 1)));
    }

    #[test]
    fn even_window_rejected() {
        let q = Tensor::zeros(&[1, 1, 2, 2]);
        let kv = Tensor::zeros(&[1, 1, 6, 6]);
        assert!(matches!(local_window_attention(&q, &kv, &kv, 4), Err(Error::Config(_))));
    }
}
