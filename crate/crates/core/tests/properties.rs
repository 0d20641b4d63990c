use parahydra::coder::{Bitstream, RangeDecoder, RangeEncoder, SymbolTable, ViewSegments, TOTAL};
use parahydra::entropy::{anchor_mask, is_anchor, non_anchor_mask, quantize};
use parahydra::metrics::{bdbr, psnr, RdPoint, PSNR_CAP};
use parahydra::synthetic::{gen_synthetic_views, SceneSpec};
use parahydra::Tensor;
use proptest::prelude::*;

/// Frequencies summing to `TOTAL`, every one at least 1.
fn freq_table() -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(1u32..1000, 2..40).prop_map(|w| {
        let sum: u32 = w.iter().sum();
        let room = TOTAL - w.len() as u32;
        let mut f: Vec<u32> = w.iter().map(|&x| 1 + (x as u64 * room as u64 / sum as u64) as u32).collect();
        let short = TOTAL - f.iter().sum::<u32>();
        f[0] += short;
        f
    })
}

fn cumulative(f: &[u32]) -> Vec<u32> {
    let mut c = vec![0];
    for &x in f {
        c.push(c.last().unwrap() + x);
    }
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn range_coder_roundtrips(f in freq_table(), raw in prop::collection::vec((any::<u32>(), any::<bool>()), 0..400)) {
        let cum = cumulative(&f);
        let symbols: Vec<(usize, bool)> = raw.iter().map(|&(s, b)| (s as usize % f.len(), b)).collect();
        let mut enc = RangeEncoder::new();
        for &(s, b) in &symbols {
            enc.encode(cum[s], f[s]);
            enc.encode_bit(b);
        }
        let bytes = enc.finish();
        let ideal: f64 = symbols.iter().map(|&(s, _)| -(f[s] as f64 / TOTAL as f64).log2() + 1.0).sum();
        prop_assert!(8.0 * bytes.len() as f64 <= ideal + 64.0);
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        for &(s, b) in &symbols {
            prop_assert_eq!(dec.decode(&cum).unwrap(), s);
            prop_assert_eq!(dec.decode_bit().unwrap(), b);
        }
        prop_assert!(dec.finish().is_ok());
    }

    #[test]
    fn gaussian_tables_roundtrip_with_escapes(
        items in prop::collection::vec((0.11f64..40.0, prop_oneof![-8i64..8, -100_000i64..100_000]), 1..200)
    ) {
        let mut enc = RangeEncoder::new();
        let tables: Vec<SymbolTable> = items.iter().map(|&(s, _)| SymbolTable::gaussian(s).unwrap()).collect();
        for (t, &(_, v)) in tables.iter().zip(&items) {
            t.encode(&mut enc, v);
        }
        let bytes = enc.finish();
        let est: f64 = tables.iter().zip(&items).map(|(t, &(_, v))| t.bits(v)).sum();
        prop_assert!((8.0 * bytes.len() as f64 - est).abs() <= 0.01 * est + 64.0);
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        for (t, &(_, v)) in tables.iter().zip(&items) {
            prop_assert_eq!(t.decode(&mut dec).unwrap(), v);
        }
        prop_assert!(dec.finish().is_ok());
    }

    #[test]
    fn logistic_tables_roundtrip(offset in -0.5f64..0.5, scale in 0.11f64..20.0, vals in prop::collection::vec(-300i64..300, 1..100)) {
        let t = SymbolTable::logistic(offset, scale).unwrap();
        let mut enc = RangeEncoder::new();
        vals.iter().for_each(|&v| t.encode(&mut enc, v));
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        for &v in &vals {
            prop_assert_eq!(t.decode(&mut dec).unwrap(), v);
        }
    }

    #[test]
    fn quantization_stays_within_half_step(y in prop::collection::vec(-1e4f64..1e4, 1..50), mu in -100f64..100.0) {
        let n = y.len();
        let t = Tensor::new(y.clone(), &[n]).unwrap();
        let m = Tensor::full(&[n], mu);
        let q = quantize(&t, Some(&m)).unwrap();
        for (&a, &b) in y.iter().zip(q.data()) {
            prop_assert!((a - b).abs() <= 0.5 + 1e-9);
            let k = b - mu;
            prop_assert!((k - k.round()).abs() < 1e-6);
        }
    }

    #[test]
    fn checkerboard_partitions_and_alternates(h in 1usize..12, w in 1usize..12) {
        let a = anchor_mask(h, w);
        let n = non_anchor_mask(h, w);
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                prop_assert!(a[p] != n[p]);
                prop_assert_eq!(a[p], is_anchor(i, j));
                if j + 1 < w {
                    prop_assert!(a[p] != a[p + 1]);
                }
                if i + 1 < h {
                    prop_assert!(a[p] != a[p + w]);
                }
            }
        }
        prop_assert!(a[0]);
    }

    #[test]
    fn bitstream_roundtrips_and_rejects_damage(
        height in 1u32..5000,
        width in 1u32..5000,
        lambda_index in any::<u8>(),
        views in prop::collection::vec(
            (prop::collection::vec(any::<u8>(), 0..20),
             prop::collection::vec((prop::collection::vec(any::<u8>(), 0..20), prop::collection::vec(any::<u8>(), 0..20)), 3)),
            1..5),
        cut in any::<prop::sample::Index>(),
    ) {
        let pad = |n: u32| n.div_ceil(64) * 64;
        let bs = Bitstream {
            height,
            width,
            padded_height: pad(height),
            padded_width: pad(width),
            lambda_index,
            num_slices: 3,
            latent_channels: 12,
            views: views.into_iter().map(|(z, slices)| ViewSegments { z, slices }).collect(),
        };
        let bytes = bs.to_bytes().unwrap();
        prop_assert_eq!(Bitstream::from_bytes(&bytes).unwrap(), bs.clone());
        let at = cut.index(bytes.len());
        prop_assert!(Bitstream::from_bytes(&bytes[..at]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        prop_assert!(Bitstream::from_bytes(&longer).is_err());
    }

    #[test]
    fn psnr_matches_definition(a in prop::collection::vec(0.0f64..1.0, 12), b in prop::collection::vec(0.0f64..1.0, 12)) {
        let ta = Tensor::new(a.clone(), &[1, 3, 2, 2]).unwrap();
        let tb = Tensor::new(b.clone(), &[1, 3, 2, 2]).unwrap();
        let mse = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 12.0;
        let want = if mse < 1e-10 { PSNR_CAP } else { 10.0 * (1.0 / mse).log10() };
        prop_assert!((psnr(&ta, &tb).unwrap() - want).abs() < 1e-9);
    }

    /// Curves whose log-rate is exactly a cubic in PSNR: the fit is exact, so
    /// the result must equal a numerically integrated average log-ratio.
    #[test]
    fn bdbr_matches_numeric_integration(
        ca in prop::array::uniform4(-0.02f64..0.02),
        shift in -0.5f64..0.5,
        tilt in -0.02f64..0.02,
        lo_a in 26.0f64..30.0,
        lo_b in 26.0f64..30.0,
    ) {
        let cubic = |c: [f64; 4], p: f64| {
            let x = p - 32.0;
            -1.0 + (0.25 + c[0]) * x + c[1] * x * x * 0.1 + c[2] * x.powi(3) * 0.01 + c[3]
        };
        let cb = [ca[0], ca[1] + tilt, ca[2], ca[3] + shift];
        let pts = |c: [f64; 4], lo: f64| -> Vec<RdPoint> {
            (0..6).map(|i| {
                let p = lo + 2.0 * i as f64;
                RdPoint { bpp: cubic(c, p).exp(), psnr_db: p }
            }).collect()
        };
        let (a, b) = (pts(ca, lo_a), pts(cb, lo_b));
        let (lo, hi) = (lo_a.max(lo_b), (lo_a + 10.0).min(lo_b + 10.0));
        let steps = 20_000;
        let dx = (hi - lo) / steps as f64;
        let mut acc = 0.0;
        for i in 0..=steps {
            let p = lo + i as f64 * dx;
            let wgt = if i == 0 || i == steps { 0.5 } else { 1.0 };
            acc += wgt * (cubic(cb, p) - cubic(ca, p)) * dx;
        }
        let want = ((acc / (hi - lo)).exp() - 1.0) * 100.0;
        let got = bdbr(&a, &b).unwrap();
        prop_assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0), "{} vs {}", got, want);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Normalized cross-correlation between consecutive views peaks exactly
    /// at the configured disparity.
    #[test]
    fn synthetic_views_correlate_at_disparity(seed in any::<u64>(), d in 1usize..6) {
        let (h, w) = (16, 48);
        let v = gen_synthetic_views(seed, &SceneSpec::new(2, h, w, d)).unwrap();
        let (a, b) = (v[0].data(), v[1].data());
        let ncc = |s: usize| {
            let n = w - s;
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..n {
                        xs.push(a[(c * h + y) * w + x + s]);
                        ys.push(b[(c * h + y) * w + x]);
                    }
                }
            }
            let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let (mx, my) = (m(&xs), m(&ys));
            let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
            let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
            let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
            cov / (vx * vy).sqrt()
        };
        let best = (0..=2 * d).max_by(|&i, &j| ncc(i).total_cmp(&ncc(j))).unwrap();
        prop_assert_eq!(best, d);
    }
}
