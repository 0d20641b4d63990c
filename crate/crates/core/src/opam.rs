//! Parallax attention along one spatial axis and its two-pass horizontal
//! then vertical composition.
//!
//! Features are `[B, C, H, W]`. A pass folds the rows (horizontal) or
//! columns (vertical) into the batch, correlates every query position with
//! every key position on the same line, and returns the aligned feature,
//! the cycle consistency map `[B, H, W]` and both attention maps.

use crate::error::{Error, Result};
use crate::nn::{ParamBuilder, ParamStore, Skm};
use crate::tensor::Tensor;

/// Lower clamp applied to consistency products.
pub const CONSISTENCY_FLOOR: f64 = 1e-12;

/// Largest spatial side accepted by [`full_2d_attention`].
pub const FULL_ATTENTION_LIMIT: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Horizontal,
    Vertical,
}

impl Axis {
    /// Permutation from `[B, C, H, W]` to `[B, lines, positions, C]`.
    fn fold_perm(self) -> [usize; 4] {
        match self {
            Axis::Horizontal => [0, 2, 3, 1],
            Axis::Vertical => [0, 3, 2, 1],
        }
    }

    fn unfold_perm(self) -> [usize; 4] {
        match self {
            Axis::Horizontal => [0, 3, 1, 2],
            Axis::Vertical => [0, 3, 2, 1],
        }
    }

    fn lines_and_len(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            Axis::Horizontal => (h, w),
            Axis::Vertical => (w, h),
        }
    }
}

fn fold(x: &Tensor, axis: Axis) -> Result<Tensor> {
    let [b, c, h, w] = dims4("parallax_attention", x)?;
    let (lines, len) = axis.lines_and_len(h, w);
    x.permute(&axis.fold_perm())?.reshape(&[b * lines, len, c])
}

fn unfold(x: &Tensor, axis: Axis, b: usize, h: usize, w: usize) -> Result<Tensor> {
    let c = x.dim(2);
    let (lines, len) = axis.lines_and_len(h, w);
    x.reshape(&[b, lines, len, c])?.permute(&axis.unfold_perm())
}

fn dims4(op: &'static str, x: &Tensor) -> Result<[usize; 4]> {
    match x.shape() {
        &[b, c, h, w] => Ok([b, c, h, w]),
        s => Err(Error::shape(op, s, &[0, 0, 0, 0])),
    }
}

/// Result of one parallax attention pass.
#[derive(Clone, Debug)]
pub struct ParallaxOutput {
    /// Reference for the query source built from the value source, `[B, C, H, W]`.
    pub aligned: Tensor,
    /// Cycle consistency `[B, H, W]`.
    pub consistency: Tensor,
    /// Softmax of the correlation over key positions, `[B*lines, L, L]`.
    pub attn_v_to_u: Tensor,
    /// Softmax of the transposed correlation, `[B*lines, L, L]`.
    pub attn_u_to_v: Tensor,
}

/// One parallax attention pass on precomputed queries `q`, keys `k` and
/// values `f_v`, all `[B, C, H, W]` with equal shapes. The correlation is
/// the plain inner product with no temperature.
pub fn parallax_attention(q: &Tensor, k: &Tensor, f_v: &Tensor, axis: Axis) -> Result<ParallaxOutput> {
    if q.shape() != k.shape() {
        return Err(Error::shape("parallax_attention", q.shape(), k.shape()));
    }
    if q.shape() != f_v.shape() {
        return Err(Error::shape("parallax_attention", q.shape(), f_v.shape()));
    }
    let [b, _, h, w] = dims4("parallax_attention", q)?;
    let (lines, len) = axis.lines_and_len(h, w);
    let qb = fold(q, axis)?;
    let kb = fold(k, axis)?;
    let m = qb.batched_matmul(&kb.transpose_last2()?)?;
    let attn_v_to_u = m.softmax_lastdim()?;
    let attn_u_to_v = m.transpose_last2()?.softmax_lastdim()?;
    let consistency =
        attn_v_to_u.mul(&attn_u_to_v.transpose_last2()?)?.sum_axis(2, false)?.reshape(&[b, lines, len])?;
    let consistency = match axis {
        Axis::Horizontal => consistency,
        Axis::Vertical => consistency.permute(&[0, 2, 1])?,
    };
    let aligned = unfold(&attn_v_to_u.batched_matmul(&fold(f_v, axis)?)?, axis, b, h, w)?;
    Ok(ParallaxOutput { aligned, consistency, attn_v_to_u, attn_u_to_v })
}

/// Query projections of a main source, reusable across side sources.
#[derive(Clone, Debug)]
pub struct OpamQueries {
    main: Tensor,
    horizontal: Tensor,
    vertical: Tensor,
}

/// Output of the two-pass mechanism.
#[derive(Clone, Debug)]
pub struct OpamOutput {
    /// Vertically aligned feature, `[B, C, H, W]`.
    pub aligned: Tensor,
    /// `C_hor * C_ver` clamped to `[CONSISTENCY_FLOOR, 1]`, `[B, H, W]`.
    pub consistency: Tensor,
    pub horizontal: ParallaxOutput,
    pub vertical: ParallaxOutput,
}

/// Horizontal then vertical parallax attention with separate selective
/// kernel modules for each pass's queries and keys.
#[derive(Clone, Debug)]
pub struct Opam {
    hor_q: Skm,
    hor_k: Skm,
    ver_q: Skm,
    ver_k: Skm,
}

impl Opam {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Self {
        Opam {
            hor_q: Skm::new(pb, &format!("{name}.hor_q"), channels),
            hor_k: Skm::new(pb, &format!("{name}.hor_k"), channels),
            ver_q: Skm::new(pb, &format!("{name}.ver_q"), channels),
            ver_k: Skm::new(pb, &format!("{name}.ver_k"), channels),
        }
    }

    /// Queries and keys are the raw features.
    pub fn identity() -> Self {
        Opam { hor_q: Skm::Identity, hor_k: Skm::Identity, ver_q: Skm::Identity, ver_k: Skm::Identity }
    }

    pub fn queries(&self, ps: &ParamStore, main: &Tensor) -> Result<OpamQueries> {
        Ok(OpamQueries {
            main: main.clone(),
            horizontal: self.hor_q.forward(ps, main)?,
            vertical: self.ver_q.forward(ps, main)?,
        })
    }

    /// Aligns `side` to the main source whose queries are `q`.
    pub fn forward_with(&self, ps: &ParamStore, q: &OpamQueries, side: &Tensor) -> Result<OpamOutput> {
        if side.shape() != q.main.shape() {
            return Err(Error::shape("opam", q.main.shape(), side.shape()));
        }
        let horizontal = parallax_attention(&q.horizontal, &self.hor_k.forward(ps, side)?, side, Axis::Horizontal)?;
        let key_ver = self.ver_k.forward(ps, &horizontal.aligned)?;
        let vertical = parallax_attention(&q.vertical, &key_ver, &horizontal.aligned, Axis::Vertical)?;
        let consistency = horizontal.consistency.mul(&vertical.consistency)?.clamp(CONSISTENCY_FLOOR, 1.0);
        Ok(OpamOutput { aligned: vertical.aligned.clone(), consistency, horizontal, vertical })
    }

    pub fn forward(&self, ps: &ParamStore, main: &Tensor, side: &Tensor) -> Result<OpamOutput> {
        let q = self.queries(ps, main)?;
        self.forward_with(ps, &q, side)
    }
}

/// Single softmax over all `H*W` positions of `v`, used as a reference for
/// the two-pass mechanism. Refuses inputs with a side above
/// [`FULL_ATTENTION_LIMIT`].
pub fn full_2d_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = dims4("full_2d_attention", q)?;
    if h.max(w) > FULL_ATTENTION_LIMIT {
        return Err(Error::Input(format!(
            "full 2-D attention limited to sides <= {FULL_ATTENTION_LIMIT}, got {h}x{w}"
        )));
    }
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::shape("full_2d_attention", q.shape(), k.shape()));
    }
    let flat = |x: &Tensor| -> Result<Tensor> { x.reshape(&[b, c, h * w])?.transpose_last2() };
    let a = flat(q)?.batched_matmul(&flat(k)?.transpose_last2()?)?.softmax_lastdim()?;
    a.batched_matmul(&flat(v)?)?.transpose_last2()?.reshape(&[b, c, h, w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rnd(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn single_column_is_exact_copy() {
        let u = rnd(&[2, 3, 4, 1], 1);
        let v = rnd(&[2, 3, 4, 1], 2);
        let out = parallax_attention(&u, &v, &v, Axis::Horizontal).unwrap();
        assert_eq!(out.aligned.data(), v.data());
        assert!(out.consistency.data().iter().all(|&c| c == 1.0));
        assert!(out.attn_v_to_u.data().iter().all(|&c| c == 1.0));
    }

    #[test]
    fn constant_values_give_constant_output() {
        let u = rnd(&[1, 2, 3, 5], 3);
        let k = rnd(&[1, 2, 3, 5], 4);
        let v = Tensor::full(&[1, 2, 3, 5], 0.625);
        for axis in [Axis::Horizontal, Axis::Vertical] {
            let out = parallax_attention(&u, &k, &v, axis).unwrap();
            assert!(out.aligned.data().iter().all(|&x| (x - 0.625).abs() < 1e-15));
        }
    }

    /// Direct loops over the per-row correlation, both softmaxes, the cycle
    /// product and the weighted sum.
    #[test]
    fn horizontal_pass_matches_loops() {
        let (h, w, c) = (2, 3, 2);
        let u = rnd(&[1, c, h, w], 5);
        let v = rnd(&[1, c, h, w], 6);
        let out = parallax_attention(&u, &v, &v, Axis::Horizontal).unwrap();
        let at = |t: &Tensor, ch: usize, y: usize, x: usize| t.data()[(ch * h + y) * w + x];
        for y in 0..h {
            let m: Vec<Vec<f64>> = (0..w)
                .map(|i| (0..w).map(|j| (0..c).map(|ch| at(&u, ch, y, i) * at(&v, ch, y, j)).sum()).collect())
                .collect();
            let soft = |row: Vec<f64>| {
                let mx = row.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = row.iter().map(|x| (x - mx).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|x| x / s).collect::<Vec<_>>()
            };
            let a: Vec<Vec<f64>> = (0..w).map(|i| soft(m[i].clone())).collect();
            let bt: Vec<Vec<f64>> = (0..w).map(|j| soft((0..w).map(|i| m[i][j]).collect())).collect();
            for i in 0..w {
                let cons: f64 = (0..w).map(|j| a[i][j] * bt[j][i]).sum();
                let got = out.consistency.data()[y * w + i];
                assert!((got - cons).abs() <= 1e-10 * cons.abs(), "{got} vs {cons}");
                for ch in 0..c {
                    let al: f64 = (0..w).map(|j| a[i][j] * at(&v, ch, y, j)).sum();
                    let got = at(&out.aligned, ch, y, i);
                    assert!((got - al).abs() <= 1e-10 * al.abs().max(1e-300));
                }
            }
        }
    }

    #[test]
    fn unit_grid_returns_side_and_unit_consistency() {
        let opam = Opam::identity();
        let ps = ParamStore::default();
        let l = rnd(&[3, 4, 1, 1], 7);
        let r = rnd(&[3, 4, 1, 1], 8);
        let out = opam.forward(&ps, &l, &r).unwrap();
        assert_eq!(out.aligned.data(), r.data());
        assert!(out.consistency.data().iter().all(|&c| c == 1.0));
    }

    #[test]
    fn oracle_refuses_large_inputs() {
        let x = Tensor::zeros(&[1, 1, 33, 2]);
        assert!(matches!(full_2d_attention(&x, &x, &x), Err(Error::Input(_))));
        let y = rnd(&[1, 2, 1, 1], 9);
        assert_eq!(full_2d_attention(&y, &y, &y).unwrap().data(), y.data());
    }

    #[test]
    fn permuting_rows_permutes_horizontal_output() {
        let u = rnd(&[1, 2, 3, 4], 10);
        let v = rnd(&[1, 2, 3, 4], 11);
        let swap = |t: &Tensor| {
            let parts: Vec<Tensor> = [2, 0, 1].iter().map(|&r| t.narrow(2, r, 1).unwrap()).collect();
            Tensor::concat(&parts.iter().collect::<Vec<_>>(), 2).unwrap()
        };
        let a = parallax_attention(&u, &v, &v, Axis::Horizontal).unwrap();
        let b = parallax_attention(&swap(&u), &swap(&v), &swap(&v), Axis::Horizontal).unwrap();
        assert!(swap(&a.aligned).max_abs_diff(&b.aligned).unwrap() < 1e-12);
    }
}
