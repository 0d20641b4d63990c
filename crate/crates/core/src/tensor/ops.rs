use super::gemm::{gemm, MatRef};
use super::{numel_of, strides_of, FlopCounter, Tensor};
use crate::error::{Error, Result};
use crate::par;

// ---------------------------------------------------------------------------
// Broadcasting machinery
// ---------------------------------------------------------------------------

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(op, a, b));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(op, a, b)),
        })
        .collect()
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut s = strides_of(shape);
    for d in 0..shape.len() {
        if shape[d] == 1 && out[d] != 1 {
            s[d] = 0;
        }
    }
    s
}

/// Visits every output index of a broadcast pair together with the source
/// offsets into each operand.
fn for_each_bcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let nd = out.len();
    if numel_of(out) == 0 {
        return;
    }
    if nd == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[nd - 1];
    let (ia, ib) = (sa[nd - 1], sb[nd - 1]);
    let mut idx = vec![0usize; nd - 1];
    let (mut o, mut oa, mut ob) = (0usize, 0usize, 0usize);
    loop {
        for t in 0..inner {
            f(o + t, oa + t * ia, ob + t * ib);
        }
        o += inner;
        let mut d = nd - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Sums `grad` (shaped `out`) down to `target`, which broadcasts to `out`.
fn reduce_to(grad: &[f64], out: &[usize], target: &[usize]) -> Vec<f64> {
    if out == target {
        return grad.to_vec();
    }
    let st = broadcast_strides(target, out);
    let mut acc = vec![0.0; numel_of(target)];
    for_each_bcast(out, &st, &st, |o, t, _| acc[t] += grad[o]);
    acc
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl Tensor {
    fn binary(&self, other: &Tensor, op: BinOp) -> Result<Tensor> {
        let name = match op {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        };
        let out_shape = broadcast_shape(name, self.shape(), other.shape())?;
        let sa = broadcast_strides(self.shape(), &out_shape);
        let sb = broadcast_strides(other.shape(), &out_shape);
        let (ad, bd) = (self.data(), other.data());
        let mut data = vec![0.0; numel_of(&out_shape)];
        if self.shape() == other.shape() {
            for ((o, &x), &y) in data.iter_mut().zip(ad).zip(bd) {
                *o = apply(op, x, y);
            }
        } else {
            for_each_bcast(&out_shape, &sa, &sb, |o, i, j| data[o] = apply(op, ad[i], bd[j]));
        }

        let (a, b) = (self.clone(), other.clone());
        let shape_for_bw = out_shape.clone();
        Ok(Tensor::from_op(data, out_shape, vec![self.clone(), other.clone()], move |_, g| {
            let out = &shape_for_bw;
            let (ad, bd) = (a.data(), b.data());
            let mut ga = vec![0.0; numel_of(out)];
            let mut gb = vec![0.0; numel_of(out)];
            for_each_bcast(out, &sa, &sb, |o, i, j| {
                let (x, y) = (ad[i], bd[j]);
                let (da, db) = match op {
                    BinOp::Add => (1.0, 1.0),
                    BinOp::Sub => (1.0, -1.0),
                    BinOp::Mul => (y, x),
                    BinOp::Div => (1.0 / y, -x / (y * y)),
                };
                ga[o] = g[o] * da;
                gb[o] = g[o] * db;
            });
            vec![
                a.requires_grad().then(|| reduce_to(&ga, out, a.shape())),
                b.requires_grad().then(|| reduce_to(&gb, out, b.shape())),
            ]
        }))
    }

    /// Elementwise sum with same-rank broadcasting (size-1 dims stretch).
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinOp::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinOp::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinOp::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinOp::Div)
    }
}

fn apply(op: BinOp, x: f64, y: f64) -> f64 {
    match op {
        BinOp::Add => x + y,
        BinOp::Sub => x - y,
        BinOp::Mul => x * y,
        BinOp::Div => x / y,
    }
}

// ---------------------------------------------------------------------------
// Unary elementwise ops
// ---------------------------------------------------------------------------

impl Tensor {
    /// Applies `f` elementwise; `df(x, y)` is the derivative at input `x`
    /// with output `y`.
    fn unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        let input = self.clone();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], move |out, g| {
            let gx = input.data().iter().zip(out).zip(g).map(|((&x, &y), &gi)| gi * df(x, y)).collect();
            vec![Some(gx)]
        })
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(|x| c * x, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(|x| x + c, |_, _| 1.0)
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        self.unary(|x| if x > 0.0 { x } else { slope * x }, move |x, _| if x > 0.0 { 1.0 } else { slope })
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Tensor {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn square(&self) -> Tensor {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input was inside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(move |x| x.clamp(lo, hi), move |x, _| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 })
    }

    /// Rounds half away from zero in the forward pass; the backward pass is
    /// the identity (straight-through estimator).
    pub fn round_ste(&self) -> Tensor {
        self.unary(f64::round, |_, _| 1.0)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

impl Tensor {
    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(vec![s], vec![], vec![self.clone()], move |_, g| vec![Some(vec![g[0]; n])])
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sums over `axis`. With `keepdim` the axis stays with size 1.
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        if axis >= self.ndim() {
            return Err(Error::Contract(format!("sum_axis: axis {axis} out of range for {:?}", self.shape())));
        }
        let shape = self.shape();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * inner];
        let src = self.data();
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                let dst = &mut data[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(&src[base..base + inner]) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape.to_vec();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        Ok(Tensor::from_op(data, out_shape, vec![self.clone()], move |_, g| {
            let mut gx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner;
                    gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        }))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        let n = self.shape().get(axis).copied().unwrap_or(1).max(1) as f64;
        Ok(self.sum_axis(axis, keepdim)?.scale(1.0 / n))
    }
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

fn permute_data(src: &[f64], shape: &[usize], dims: &[usize]) -> Vec<f64> {
    let out_shape: Vec<usize> = dims.iter().map(|&d| shape[d]).collect();
    let src_strides = strides_of(shape);
    let gathered: Vec<usize> = dims.iter().map(|&d| src_strides[d]).collect();
    let mut out = vec![0.0; src.len()];
    for_each_bcast(&out_shape, &gathered, &gathered, |o, s, _| out[o] = src[s]);
    out
}

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(self.to_vec(), shape.to_vec(), vec![self.clone()], |_, g| vec![Some(g.to_vec())]))
    }

    /// Reorders axes: output axis `i` is input axis `dims[i]`.
    pub fn permute(&self, dims: &[usize]) -> Result<Tensor> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if dims.len() != nd || dims.iter().any(|&d| d >= nd || std::mem::replace(&mut seen[d], true)) {
            return Err(Error::Contract(format!("permute: {dims:?} is not a permutation of {nd} axes")));
        }
        let out_shape: Vec<usize> = dims.iter().map(|&d| self.shape()[d]).collect();
        let data = permute_data(self.data(), self.shape(), dims);
        let mut inverse = vec![0; nd];
        for (i, &d) in dims.iter().enumerate() {
            inverse[d] = i;
        }
        let out_shape_bw = out_shape.clone();
        Ok(Tensor::from_op(data, out_shape, vec![self.clone()], move |_, g| {
            vec![Some(permute_data(g, &out_shape_bw, &inverse))]
        }))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor> {
        let nd = self.ndim();
        if nd < 2 {
            return Err(Error::Contract("transpose_last2 needs rank >= 2".into()));
        }
        let mut dims: Vec<usize> = (0..nd).collect();
        dims.swap(nd - 2, nd - 1);
        self.permute(&dims)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Contract(format!(
                "narrow: axis {axis} range {start}..{} out of {:?}",
                start + len,
                shape
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let full = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        let src = self.data();
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        Ok(Tensor::from_op(data, out_shape, vec![self.clone()], move |_, g| {
            let mut gx = vec![0.0; outer * full * inner];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let nd = first.ndim();
        if axis >= nd {
            return Err(Error::Contract(format!("concat: axis {axis} out of range")));
        }
        for p in parts {
            let ok = p.ndim() == nd && (0..nd).all(|d| d == axis || p.shape()[d] == first.shape()[d]);
            if !ok {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = total;
        let lens_bw = lens.clone();
        Ok(Tensor::from_op(data, out_shape, parts.iter().map(|&p| p.clone()).collect(), move |_, g| {
            let mut grads: Vec<Vec<f64>> = lens_bw.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gp, &l) in grads.iter_mut().zip(&lens_bw) {
                    gp.extend_from_slice(&g[off..off + l * inner]);
                    off += l * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        }))
    }

    /// Expands size-1 axes to `shape` (same rank).
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        let out = broadcast_shape("broadcast_to", self.shape(), shape)?;
        if out != shape {
            return Err(Error::shape("broadcast_to", self.shape(), shape));
        }
        Tensor::zeros(shape).add(self)
    }
}

// ---------------------------------------------------------------------------
// Softmax and matrix products
// ---------------------------------------------------------------------------

impl Tensor {
    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax_lastdim(&self) -> Result<Tensor> {
        let n = *self.shape().last().ok_or_else(|| Error::Contract("softmax of a scalar".into()))?;
        if n == 0 {
            return Err(Error::Contract("softmax over an empty axis".into()));
        }
        if self.has_nan() {
            return Err(Error::NonFinite("softmax_lastdim"));
        }
        let mut data = self.to_vec();
        for row in data.chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        Ok(Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], move |y, g| {
            let mut gx = vec![0.0; y.len()];
            for ((gxr, yr), gr) in gx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((o, &yi), &gi) in gxr.iter_mut().zip(yr).zip(gr) {
                    *o = yi * (gi - dot);
                }
            }
            vec![Some(gx)]
        }))
    }

    /// `[B, M, K] x [B, K, N] -> [B, M, N]`.
    pub fn batched_matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("batched_matmul", sa, sb));
        }
        let (b, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        FlopCounter::add((b * m * n * k) as u64);
        let mut data = vec![0.0; b * m * n];
        let (ad, bd) = (self.data(), other.data());
        par::for_each_chunk_mut(&mut data, m * n, |i, out| {
            let a = &ad[i * m * k..(i + 1) * m * k];
            let bb = &bd[i * k * n..(i + 1) * k * n];
            gemm(m, k, n, MatRef::row_major(a, k), MatRef::row_major(bb, n), out, false);
        });
        let (lhs, rhs) = (self.clone(), other.clone());
        Ok(Tensor::from_op(data, vec![b, m, n], vec![self.clone(), other.clone()], move |_, g| {
            let (ad, bd) = (lhs.data(), rhs.data());
            let ga = lhs.requires_grad().then(|| {
                let mut ga = vec![0.0; b * m * k];
                par::for_each_chunk_mut(&mut ga, m * k, |i, out| {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let bb = &bd[i * k * n..(i + 1) * k * n];
                    gemm(m, n, k, MatRef::row_major(gi, n), MatRef::transposed(bb, n), out, false);
                });
                ga
            });
            let gb = rhs.requires_grad().then(|| {
                let mut gb = vec![0.0; b * k * n];
                par::for_each_chunk_mut(&mut gb, k * n, |i, out| {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let a = &ad[i * m * k..(i + 1) * m * k];
                    gemm(k, m, n, MatRef::transposed(a, k), MatRef::row_major(gi, n), out, false);
                });
                gb
            });
            vec![ga, gb]
        }))
    }

    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k) = (sa[0], sa[1]);
        self.reshape(&[1, m, k])?.batched_matmul(&other.reshape(&[1, k, sb[1]])?)?.reshape(&[m, sb[1]])
    }
}

// ---------------------------------------------------------------------------
// Spatial selection on [B, C, H, W]
// ---------------------------------------------------------------------------

fn expect_4d(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match t.shape() {
        &[b, c, h, w] => Ok([b, c, h, w]),
        s => Err(Error::shape(op, s, &[0, 0, 0, 0])),
    }
}

impl Tensor {
    /// Keeps values where `mask` (over the trailing `H x W` grid) is set and
    /// writes exact zeros elsewhere. Unselected inputs are never read, so
    /// non-finite values there cannot leak into the output.
    pub fn mask_select(&self, mask: &[bool]) -> Result<Tensor> {
        let nd = self.ndim();
        if nd < 2 {
            return Err(Error::Contract("mask_select needs rank >= 2".into()));
        }
        let plane = self.shape()[nd - 2] * self.shape()[nd - 1];
        if mask.len() != plane {
            return Err(Error::shape("mask_select", self.shape(), &[mask.len()]));
        }
        let select = |src: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; src.len()];
            for (o, s) in out.chunks_mut(plane).zip(src.chunks(plane)) {
                for ((ov, &sv), &keep) in o.iter_mut().zip(s).zip(mask) {
                    if keep {
                        *ov = sv;
                    }
                }
            }
            out
        };
        let data = select(self.data());
        let mask = mask.to_vec();
        Ok(Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], move |_, g| {
            let mut out = vec![0.0; g.len()];
            for (o, s) in out.chunks_mut(plane).zip(g.chunks(plane)) {
                for ((ov, &sv), &keep) in o.iter_mut().zip(s).zip(&mask) {
                    if keep {
                        *ov = sv;
                    }
                }
            }
            vec![Some(out)]
        }))
    }

    /// `[B, C, H, W] -> [B, N, C]` reading only the listed flat positions.
    pub fn gather_positions(&self, positions: &[usize]) -> Result<Tensor> {
        let [b, c, h, w] = expect_4d("gather_positions", self)?;
        let plane = h * w;
        if positions.iter().any(|&p| p >= plane) {
            return Err(Error::Contract("gather_positions: position out of range".into()));
        }
        let n = positions.len();
        let src = self.data();
        let mut data = vec![0.0; b * n * c];
        for bi in 0..b {
            for (k, &p) in positions.iter().enumerate() {
                for ci in 0..c {
                    data[(bi * n + k) * c + ci] = src[(bi * c + ci) * plane + p];
                }
            }
        }
        let pos = positions.to_vec();
        Ok(Tensor::from_op(data, vec![b, n, c], vec![self.clone()], move |_, g| {
            let mut gx = vec![0.0; b * c * plane];
            for bi in 0..b {
                for (k, &p) in pos.iter().enumerate() {
                    for ci in 0..c {
                        gx[(bi * c + ci) * plane + p] += g[(bi * n + k) * c + ci];
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// `[B, N, C] -> [B, C, H, W]`, placing row `k` at `positions[k]` and
    /// zeros elsewhere. Positions must be distinct.
    pub fn scatter_positions(&self, positions: &[usize], h: usize, w: usize) -> Result<Tensor> {
        let (b, n, c) = match self.shape() {
            &[b, n, c] => (b, n, c),
            s => return Err(Error::shape("scatter_positions", s, &[0, positions.len(), 0])),
        };
        let plane = h * w;
        if n != positions.len() || positions.iter().any(|&p| p >= plane) {
            return Err(Error::Contract("scatter_positions: bad position list".into()));
        }
        let src = self.data();
        let mut data = vec![0.0; b * c * plane];
        for bi in 0..b {
            for (k, &p) in positions.iter().enumerate() {
                for ci in 0..c {
                    data[(bi * c + ci) * plane + p] = src[(bi * n + k) * c + ci];
                }
            }
        }
        let pos = positions.to_vec();
        Ok(Tensor::from_op(data, vec![b, c, h, w], vec![self.clone()], move |_, g| {
            let mut gx = vec![0.0; b * n * c];
            for bi in 0..b {
                for (k, &p) in pos.iter().enumerate() {
                    for ci in 0..c {
                        gx[(bi * n + k) * c + ci] = g[(bi * c + ci) * plane + p];
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Zero-pads the two spatial axes of `[B, C, H, W]` by `pad` on each side.
    pub fn pad2d(&self, pad: usize) -> Result<Tensor> {
        let [b, c, h, w] = expect_4d("pad2d", self)?;
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let src = self.data();
        let mut data = vec![0.0; b * c * hp * wp];
        for bc in 0..b * c {
            for y in 0..h {
                let s = (bc * h + y) * w;
                let d = (bc * hp + y + pad) * wp + pad;
                data[d..d + w].copy_from_slice(&src[s..s + w]);
            }
        }
        Ok(Tensor::from_op(data, vec![b, c, hp, wp], vec![self.clone()], move |_, g| {
            let mut gx = vec![0.0; b * c * h * w];
            for bc in 0..b * c {
                for y in 0..h {
                    let s = (bc * hp + y + pad) * wp + pad;
                    let d = (bc * h + y) * w;
                    gx[d..d + w].copy_from_slice(&g[s..s + w]);
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Crops `[B, C, H, W]` to the `h x w` window at the top-left corner.
    pub fn crop2d(&self, h: usize, w: usize) -> Result<Tensor> {
        let [b, c, hi, wi] = expect_4d("crop2d", self)?;
        if h > hi || w > wi {
            return Err(Error::shape("crop2d", self.shape(), &[b, c, h, w]));
        }
        let src = self.data();
        let mut data = Vec::with_capacity(b * c * h * w);
        for bc in 0..b * c {
            for y in 0..h {
                let s = (bc * hi + y) * wi;
                data.extend_from_slice(&src[s..s + w]);
            }
        }
        Ok(Tensor::from_op(data, vec![b, c, h, w], vec![self.clone()], move |_, g| {
            let mut gx = vec![0.0; b * c * hi * wi];
            for bc in 0..b * c {
                for y in 0..h {
                    let d = (bc * hi + y) * wi;
                    gx[d..d + w].copy_from_slice(&g[(bc * h + y) * w..(bc * h + y) * w + w]);
                }
            }
            vec![Some(gx)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::new(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let a = t(&[1.0, 0.0, 0.0, 1.0], &[1, 2, 2]);
        let b = t(&[3.0, 4.0, 5.0, 6.0], &[1, 2, 2]);
        assert_eq!(a.batched_matmul(&b).unwrap().data(), &[3.0, 4.0, 5.0, 6.0]);
        let c = t(&[2.0], &[1, 1, 1]).batched_matmul(&t(&[3.0], &[1, 1, 1])).unwrap();
        assert_eq!(c.data(), &[6.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = Tensor::zeros(&[2, 3, 4]).batched_matmul(&Tensor::zeros(&[2, 5, 4])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3, 4]") && msg.contains("[2, 5, 4]"), "{msg}");
    }

    #[test]
    fn matmul_counts_macs() {
        let a = Tensor::ones(&[2, 3, 4]);
        let b = Tensor::ones(&[2, 4, 5]);
        let (_, macs) = FlopCounter::measure(|| a.batched_matmul(&b).unwrap());
        assert_eq!(macs, 2 * 3 * 5 * 4);
    }

    #[test]
    fn softmax_fixtures() {
        assert_eq!(t(&[7.3], &[1]).softmax_lastdim().unwrap().data(), &[1.0]);
        assert_eq!(t(&[0.0, 0.0], &[2]).softmax_lastdim().unwrap().data(), &[0.5, 0.5]);
        let s = t(&[1f64.ln(), 2f64.ln(), 3f64.ln()], &[3]).softmax_lastdim().unwrap();
        for (got, want) in s.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        assert!(matches!(t(&[0.0, f64::NAN], &[2]).softmax_lastdim(), Err(Error::NonFinite(_))));
    }

    #[test]
    fn softmax_large_logits_stay_finite() {
        let s = t(&[1000.0, 999.0, -1000.0], &[3]).softmax_lastdim().unwrap();
        assert!(s.is_finite());
        assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn broadcast_add_and_reduce() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).to_param();
        let bias = t(&[10.0, 20.0, 30.0], &[1, 3]).to_param();
        let y = x.add(&bias).unwrap();
        assert_eq!(y.data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let g = y.sum_all().backward().unwrap();
        assert_eq!(g.get_slice(&bias).unwrap(), &[2.0, 2.0, 2.0]);
        assert!(x.add(&t(&[1.0, 2.0], &[1, 2])).is_err());
    }

    #[test]
    fn permute_roundtrip() {
        let x = Tensor::new((0..24).map(f64::from).collect(), &[2, 3, 4]).unwrap();
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        // p[k, i, j] == x[i, j, k]
        assert_eq!(p.data()[(3 * 2 + 1) * 3 + 2], x.data()[(3 + 2) * 4 + 3]);
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn narrow_concat_inverse() {
        let x = Tensor::new((0..24).map(f64::from).collect(), &[2, 6, 2]).unwrap();
        let parts: Vec<Tensor> = (0..3).map(|i| x.narrow(1, 2 * i, 2).unwrap()).collect();
        let refs: Vec<&Tensor> = parts.iter().collect();
        assert_eq!(Tensor::concat(&refs, 1).unwrap().data(), x.data());
    }

    #[test]
    fn mask_select_ignores_nan_in_masked_out_positions() {
        let x = t(&[1.0, f64::NAN, f64::NAN, 4.0], &[1, 1, 2, 2]);
        let y = x.mask_select(&[true, false, false, true]).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn gather_scatter_roundtrip() {
        let x = Tensor::new((0..8).map(f64::from).collect(), &[1, 2, 2, 2]).unwrap();
        let g = x.gather_positions(&[0, 3]).unwrap();
        assert_eq!(g.shape(), &[1, 2, 2]);
        assert_eq!(g.data(), &[0.0, 4.0, 3.0, 7.0]);
        let s = g.scatter_positions(&[0, 3], 2, 2).unwrap();
        assert_eq!(s.data(), &[0.0, 0.0, 0.0, 3.0, 4.0, 0.0, 0.0, 7.0]);
    }

    #[test]
    fn round_half_away_from_zero() {
        let r = t(&[1.5, -1.5, 0.49, -0.5], &[4]).round_ste();
        assert_eq!(r.data(), &[2.0, -2.0, 0.0, -1.0]);
    }
}
