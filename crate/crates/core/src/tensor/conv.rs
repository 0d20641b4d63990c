use super::gemm::{gemm, MatRef};
use super::Tensor;
use crate::error::{Error, Result};
use crate::par;

/// Output length of a convolution along one axis.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Config("convolution stride must be positive".into()));
    }
    if input + 2 * pad < kernel {
        return Err(Error::Config(format!("kernel {kernel} does not fit input {input} with padding {pad}")));
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

/// Output length of a transposed convolution along one axis.
pub fn deconv_output_size(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    output_padding: usize,
) -> Result<usize> {
    if stride == 0 || output_padding >= stride {
        return Err(Error::Config(format!(
            "transposed convolution needs output_padding < stride (got {output_padding}, {stride})"
        )));
    }
    if input == 0 {
        return Err(Error::Config("transposed convolution of an empty input".into()));
    }
    let full = (input - 1) * stride + kernel + output_padding;
    if full <= 2 * pad {
        return Err(Error::Config(format!(
            "transposed convolution output would be empty (input {input}, kernel {kernel}, pad {pad})"
        )));
    }
    Ok(full - 2 * pad)
}

#[derive(Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Source coordinate for output index `o` and kernel offset `k`, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let p = (o * self.stride + k).checked_sub(self.pad)?;
        (p < limit).then_some(p)
    }
}

/// Unfolds `img` (`[c, h, w]`) into `[c*kh*kw, ho*wo]` patch columns.
fn im2col(img: &[f64], g: &Geom, cols: &mut [f64]) {
    let n = g.cols();
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let Some(iy) = g.src(oy, ky, g.h) else {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    };
                    let base = (c * g.h + iy) * g.w;
                    for (ox, v) in line.iter_mut().enumerate() {
                        *v = g.src(ox, kx, g.w).map_or(0.0, |ix| img[base + ix]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch columns back into `img`.
fn col2im(cols: &[f64], g: &Geom, img: &mut [f64]) {
    let n = g.cols();
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    let base = (c * g.h + iy) * g.w;
                    for ox in 0..g.wo {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            img[base + ix] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn add_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias.iter().cycle()) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad(g: &[f64], batch: usize, channels: usize, plane: usize) -> Vec<f64> {
    let mut gb = vec![0.0; channels];
    for b in 0..batch {
        for (c, acc) in gb.iter_mut().enumerate() {
            let s = (b * channels + c) * plane;
            *acc += g[s..s + plane].iter().sum::<f64>();
        }
    }
    gb
}

/// Sums per-batch partial results in batch order.
fn ordered_sum(parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut acc = vec![0.0; len];
    for p in parts {
        acc.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
    }
    acc
}

fn check_bias(op: &'static str, bias: Option<&Tensor>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [channels] => Err(Error::shape(op, b.shape(), &[channels])),
        _ => Ok(()),
    }
}

impl Tensor {
    /// Grouped 2-D cross-correlation.
    ///
    /// `self: [B, C, H, W]`, `weight: [O, C/groups, kh, kw]`, `bias: [O]`.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Tensor> {
        let (b, c, h, w) = match self.shape() {
            &[b, c, h, w] => (b, c, h, w),
            s => return Err(Error::shape("conv2d", s, weight.shape())),
        };
        let (o, cg, kh, kw) = match weight.shape() {
            &[o, cg, kh, kw] => (o, cg, kh, kw),
            s => return Err(Error::shape("conv2d", self.shape(), s)),
        };
        if groups == 0 || c % groups != 0 || o % groups != 0 || cg * groups != c {
            return Err(Error::Config(format!(
                "conv2d: {c} input channels, weight {:?}, groups {groups}",
                weight.shape()
            )));
        }
        check_bias("conv2d", bias, o)?;
        let ho = conv_output_size(h, kh, stride, pad)?;
        let wo = conv_output_size(w, kw, stride, pad)?;
        let og = o / groups;
        let geom = Geom { c: cg, h, w, kh, kw, stride, pad, ho, wo };
        let (rows, n) = (geom.rows(), geom.cols());

        let xd = self.data();
        let wd = weight.data();
        let mut out = vec![0.0; b * o * n];
        par::for_each_chunk_mut(&mut out, o * n, |bi, dst| {
            let mut cols = vec![0.0; rows * n];
            for gi in 0..groups {
                let img = &xd[(bi * c + gi * cg) * h * w..(bi * c + (gi + 1) * cg) * h * w];
                im2col(img, &geom, &mut cols);
                let wg = &wd[gi * og * rows..(gi + 1) * og * rows];
                gemm(
                    og,
                    rows,
                    n,
                    MatRef::row_major(wg, rows),
                    MatRef::row_major(&cols, n),
                    &mut dst[gi * og * n..(gi + 1) * og * n],
                    false,
                );
            }
        });
        if let Some(bias) = bias {
            add_bias(&mut out, bias.data(), n);
        }

        let mut parents = vec![self.clone(), weight.clone()];
        parents.extend(bias.cloned());
        let has_bias = bias.is_some();
        let (x, wt) = (self.clone(), weight.clone());
        Ok(Tensor::from_op(out, vec![b, o, ho, wo], parents, move |_, g| {
            let (xd, wd) = (x.data(), wt.data());
            let gx = x.requires_grad().then(|| {
                let mut gx = vec![0.0; b * c * h * w];
                par::for_each_chunk_mut(&mut gx, c * h * w, |bi, dst| {
                    let mut dcols = vec![0.0; rows * n];
                    for gi in 0..groups {
                        let wg = &wd[gi * og * rows..(gi + 1) * og * rows];
                        let gout = &g[(bi * o + gi * og) * n..(bi * o + (gi + 1) * og) * n];
                        gemm(rows, og, n, MatRef::transposed(wg, rows), MatRef::row_major(gout, n), &mut dcols, false);
                        col2im(&dcols, &geom, &mut dst[gi * cg * h * w..(gi + 1) * cg * h * w]);
                    }
                });
                gx
            });
            let gw = wt.requires_grad().then(|| {
                let parts = par::map_range(b, |bi| {
                    let mut gw = vec![0.0; o * rows];
                    let mut cols = vec![0.0; rows * n];
                    for gi in 0..groups {
                        let img = &xd[(bi * c + gi * cg) * h * w..(bi * c + (gi + 1) * cg) * h * w];
                        im2col(img, &geom, &mut cols);
                        let gout = &g[(bi * o + gi * og) * n..(bi * o + (gi + 1) * og) * n];
                        gemm(
                            og,
                            n,
                            rows,
                            MatRef::row_major(gout, n),
                            MatRef::transposed(&cols, n),
                            &mut gw[gi * og * rows..(gi + 1) * og * rows],
                            false,
                        );
                    }
                    gw
                });
                ordered_sum(parts, o * rows)
            });
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(Some(bias_grad(g, b, o, n)));
            }
            grads
        }))
    }

    /// 2-D transposed convolution, the adjoint of [`Tensor::conv2d`] with the
    /// same kernel, stride and padding.
    ///
    /// `self: [B, Ci, H, W]`, `weight: [Ci, Co, kh, kw]`, `bias: [Co]`.
    /// Output size per axis is `(H - 1) * stride - 2 * pad + k + output_padding`.
    pub fn deconv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        pad: usize,
        output_padding: usize,
    ) -> Result<Tensor> {
        let (b, ci, h, w) = match self.shape() {
            &[b, c, h, w] => (b, c, h, w),
            s => return Err(Error::shape("deconv2d", s, weight.shape())),
        };
        let (co, kh, kw) = match weight.shape() {
            &[wi, co, kh, kw] if wi == ci => (co, kh, kw),
            s => return Err(Error::shape("deconv2d", self.shape(), s)),
        };
        check_bias("deconv2d", bias, co)?;
        let ho = deconv_output_size(h, kh, stride, pad, output_padding)?;
        let wo = deconv_output_size(w, kw, stride, pad, output_padding)?;
        // The output plays the role of the convolution input, `x` that of its output.
        let geom = Geom { c: co, h: ho, w: wo, kh, kw, stride, pad, ho: h, wo: w };
        let (rows, n) = (geom.rows(), geom.cols());
        let plane_out = ho * wo;

        let xd = self.data();
        let wd = weight.data();
        let mut out = vec![0.0; b * co * plane_out];
        par::for_each_chunk_mut(&mut out, co * plane_out, |bi, dst| {
            let mut cols = vec![0.0; rows * n];
            let xb = &xd[bi * ci * n..(bi + 1) * ci * n];
            gemm(rows, ci, n, MatRef::transposed(wd, rows), MatRef::row_major(xb, n), &mut cols, false);
            col2im(&cols, &geom, dst);
        });
        if let Some(bias) = bias {
            add_bias(&mut out, bias.data(), plane_out);
        }

        let mut parents = vec![self.clone(), weight.clone()];
        parents.extend(bias.cloned());
        let has_bias = bias.is_some();
        let (x, wt) = (self.clone(), weight.clone());
        Ok(Tensor::from_op(out, vec![b, co, ho, wo], parents, move |_, g| {
            let (xd, wd) = (x.data(), wt.data());
            let unfolded = par::map_range(b, |bi| {
                let mut cols = vec![0.0; rows * n];
                im2col(&g[bi * co * plane_out..(bi + 1) * co * plane_out], &geom, &mut cols);
                cols
            });
            let gx = x.requires_grad().then(|| {
                let mut gx = vec![0.0; b * ci * n];
                par::for_each_chunk_mut(&mut gx, ci * n, |bi, dst| {
                    gemm(ci, rows, n, MatRef::row_major(wd, rows), MatRef::row_major(&unfolded[bi], n), dst, false);
                });
                gx
            });
            let gw = wt.requires_grad().then(|| {
                let parts = par::map_range(b, |bi| {
                    let mut gw = vec![0.0; ci * rows];
                    let xb = &xd[bi * ci * n..(bi + 1) * ci * n];
                    gemm(ci, n, rows, MatRef::row_major(xb, n), MatRef::transposed(&unfolded[bi], n), &mut gw, false);
                    gw
                });
                ordered_sum(parts, ci * rows)
            });
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(Some(bias_grad(g, b, co, plane_out)));
            }
            grads
        }))
    }
}
