//! Per-view analysis transforms, hyper transforms and the joint decoder.

use crate::config::{ModelConfig, PAD_MULTIPLE};
use crate::error::{Error, Result};
use crate::nn::{leaky, Conv, Deconv, ParamBuilder, ParamStore};
use crate::par;
use crate::pmifm::Pmifm;
use crate::tensor::Tensor;

const KERNEL: usize = 3;

/// Image to latent: four stride-2 convolutions, `[B,3,H,W] -> [B,N,H/16,W/16]`.
#[derive(Clone, Debug)]
pub struct Analysis {
    layers: Vec<Conv>,
}

impl Analysis {
    pub fn new(pb: &mut ParamBuilder, name: &str, n: usize) -> Self {
        let chans = [3, n, n, n, n];
        let layers =
            (0..4).map(|i| Conv::new(pb, &format!("{name}.{i}"), chans[i], chans[i + 1], KERNEL, 2, 1)).collect();
        Analysis { layers }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        chain(ps, &self.layers, x)
    }
}

fn chain(ps: &ParamStore, layers: &[Conv], x: &Tensor) -> Result<Tensor> {
    let mut h = x.clone();
    for (i, l) in layers.iter().enumerate() {
        h = l.forward(ps, &h)?;
        if i + 1 < layers.len() {
            h = leaky(&h);
        }
    }
    Ok(h)
}

/// Latent to hyper-latent, `[B,N,h,w] -> [B,N,h/4,w/4]`.
#[derive(Clone, Debug)]
pub struct HyperAnalysis {
    layers: Vec<Conv>,
}

impl HyperAnalysis {
    pub fn new(pb: &mut ParamBuilder, name: &str, n: usize) -> Self {
        let layers = [1, 2, 2]
            .iter()
            .enumerate()
            .map(|(i, &s)| Conv::new(pb, &format!("{name}.{i}"), n, n, KERNEL, s, 1))
            .collect();
        HyperAnalysis { layers }
    }

    pub fn forward(&self, ps: &ParamStore, y: &Tensor) -> Result<Tensor> {
        chain(ps, &self.layers, y)
    }
}

/// Hyper-latent to the hyperprior feature, `[B,N,h/4,w/4] -> [B,2N,h,w]`.
#[derive(Clone, Debug)]
pub struct HyperSynthesis {
    up: [Deconv; 2],
    out: Conv,
}

impl HyperSynthesis {
    pub fn new(pb: &mut ParamBuilder, name: &str, n: usize) -> Self {
        HyperSynthesis {
            up: [
                Deconv::new(pb, &format!("{name}.0"), n, n, KERNEL, 2),
                Deconv::new(pb, &format!("{name}.1"), n, n, KERNEL, 2),
            ],
            out: Conv::new(pb, &format!("{name}.2"), n, 2 * n, KERNEL, 1, 1),
        }
    }

    pub fn forward(&self, ps: &ParamStore, z_hat: &Tensor) -> Result<Tensor> {
        let h = leaky(&self.up[0].forward(ps, z_hat)?);
        let h = leaky(&self.up[1].forward(ps, &h)?);
        self.out.forward(ps, &h)
    }
}

/// Joint decoder: fusion with the other views, then upsampling, twice.
#[derive(Clone, Debug)]
pub struct ParaJd {
    fuse1: Pmifm,
    up1: [Deconv; 2],
    fuse2: Pmifm,
    up2: [Deconv; 2],
    out: Conv,
}

impl ParaJd {
    pub fn new(pb: &mut ParamBuilder, n: usize) -> Self {
        let half = (n / 2).max(1);
        let out = Conv::new(pb, "jd2.out", half, 3, KERNEL, 1, 1);
        // Start reconstructions near flat mid-grey; a full-gain random output
        // layer swamps the first updates and training collapses the latent.
        pb.set_constant(out.bias(), 0.5);
        pb.rescale(out.weight(), 0.01);
        ParaJd {
            fuse1: Pmifm::new(pb, "jd1.pmifm", n),
            up1: [Deconv::new(pb, "jd1.up0", n, n, KERNEL, 2), Deconv::new(pb, "jd1.up1", n, n, KERNEL, 2)],
            fuse2: Pmifm::new(pb, "jd2.pmifm", n),
            up2: [Deconv::new(pb, "jd2.up0", n, half, KERNEL, 2), Deconv::new(pb, "jd2.up1", half, half, KERNEL, 2)],
            out,
        }
    }

    pub fn stage1_pmifm(&self) -> &Pmifm {
        &self.fuse1
    }

    /// Per-view features after the first fusion and upsampling.
    pub fn stage1(&self, ps: &ParamStore, latents: &[Tensor]) -> Result<Vec<Tensor>> {
        fuse_all(ps, &self.fuse1, latents, |f| {
            let h = leaky(&self.up1[0].forward(ps, f)?);
            Ok(leaky(&self.up1[1].forward(ps, &h)?))
        })
    }

    /// Reconstructions at padded size, before cropping and clamping.
    pub fn forward(&self, ps: &ParamStore, latents: &[Tensor]) -> Result<Vec<Tensor>> {
        let f = self.stage1(ps, latents)?;
        fuse_all(ps, &self.fuse2, &f, |g| {
            let h = leaky(&self.up2[0].forward(ps, g)?);
            let h = leaky(&self.up2[1].forward(ps, &h)?);
            self.out.forward(ps, &h)
        })
    }
}

/// `tail(PMIFM(x_k, x_{others}))` for every view; sides keep index order.
fn fuse_all<F>(ps: &ParamStore, pmifm: &Pmifm, views: &[Tensor], tail: F) -> Result<Vec<Tensor>>
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync,
{
    if views.is_empty() {
        return Err(Error::Input("joint decoding needs at least one view".into()));
    }
    if let Some(bad) = views.iter().find(|v| v.shape() != views[0].shape()) {
        return Err(Error::shape("para_jd", views[0].shape(), bad.shape()));
    }
    par::map_range(views.len(), |k| {
        let sides: Vec<Tensor> = (0..views.len()).filter(|&j| j != k).map(|j| views[j].clone()).collect();
        tail(&pmifm.forward(ps, &views[k], &sides)?)
    })
    .into_iter()
    .collect()
}

/// Smallest multiple of [`PAD_MULTIPLE`] holding `n`.
pub fn padded_size(n: usize) -> usize {
    n.div_ceil(PAD_MULTIPLE).max(1) * PAD_MULTIPLE
}

/// Mirror index into `0..n` without repeating the edge sample, periodic
/// beyond one reflection.
fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Extends `[B,C,H,W]` at the bottom and right by reflection to `h x w`.
pub fn reflect_pad(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    if x.ndim() != 4 || h < x.dim(2) || w < x.dim(3) {
        return Err(Error::shape("reflect_pad", x.shape(), &[h, w]));
    }
    let (bc, hi, wi) = (x.dim(0) * x.dim(1), x.dim(2), x.dim(3));
    let src = x.data();
    let mut out = Vec::with_capacity(bc * h * w);
    for p in 0..bc {
        for r in 0..h {
            let row = &src[(p * hi + reflect_index(r, hi)) * wi..][..wi];
            out.extend((0..w).map(|c| row[reflect_index(c, wi)]));
        }
    }
    Tensor::new(out, &[x.dim(0), x.dim(1), h, w])
}

/// Checks that every pixel lies in `[0, 1]`.
pub fn check_pixels(x: &Tensor) -> Result<()> {
    match x.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(v) => Err(Error::Input(format!("pixel value {v} outside [0, 1]"))),
        None => Ok(()),
    }
}

/// `lambda * sum_k MSE_k + sum_k (rate_y_k + rate_z_k)`, rates in bits per pixel.
pub fn rd_loss(x: &[Tensor], x_hat: &[Tensor], rate_y: &[Tensor], rate_z: &[Tensor], lambda: f64) -> Result<Tensor> {
    if !(lambda > 0.0) {
        return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
    }
    let k = x.len();
    if x_hat.len() != k || rate_y.len() != k || rate_z.len() != k || k == 0 {
        return Err(Error::Contract("rd_loss needs one entry per view".into()));
    }
    let mut total = Tensor::scalar(0.0);
    for i in 0..k {
        let mse = x[i].sub(&x_hat[i])?.square().mean_all();
        total = total.add(&mse.scale(lambda))?.add(&rate_y[i])?.add(&rate_z[i])?;
    }
    Ok(total)
}

/// Shared weights of one view's analysis path.
#[derive(Clone, Debug)]
pub struct ViewTransforms {
    pub analysis: Analysis,
    pub hyper_analysis: HyperAnalysis,
    pub hyper_synthesis: HyperSynthesis,
}

impl ViewTransforms {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Self {
        let n = cfg.latent_channels;
        ViewTransforms {
            analysis: Analysis::new(pb, "enc", n),
            hyper_analysis: HyperAnalysis::new(pb, "henc", n),
            hyper_synthesis: HyperSynthesis::new(pb, "hdec", n),
        }
    }

    /// `(y, z)` of one padded view.
    pub fn encode_view(&self, ps: &ParamStore, x: &Tensor) -> Result<(Tensor, Tensor)> {
        check_pixels(x)?;
        let y = self.analysis.forward(ps, x)?;
        let z = self.hyper_analysis.forward(ps, &y)?;
        Ok((y, z))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stride_arithmetic() {
        let cfg = ModelConfig { latent_channels: 4, num_slices: 2, window: 3, sigma_min: 0.11 };
        let mut pb = ParamBuilder::new(0);
        let t = ViewTransforms::new(&mut pb, &cfg);
        let ps = pb.finish();
        let x = Tensor::full(&[1, 3, 64, 64], 0.5);
        let (y, z) = t.encode_view(&ps, &x).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4, 4]);
        assert_eq!(z.shape(), &[1, 4, 1, 1]);
        let phi = t.hyper_synthesis.forward(&ps, &z).unwrap();
        assert_eq!(phi.shape(), &[1, 8, 4, 4]);
        assert!(matches!(t.encode_view(&ps, &Tensor::full(&[1, 3, 64, 64], 1.5)), Err(Error::Input(_))));
    }

    #[test]
    fn reflection() {
        let x = Tensor::new(vec![1.0, 2.0, 3.0], &[1, 1, 1, 3]).unwrap();
        let p = reflect_pad(&x, 2, 8).unwrap();
        assert_eq!(&p.data()[..8], &[1.0, 2.0, 3.0, 2.0, 1.0, 2.0, 3.0, 2.0]);
        assert_eq!(&p.data()[8..], &p.data()[..8]);
        assert_eq!(padded_size(1), 64);
        assert_eq!(padded_size(64), 64);
        assert_eq!(padded_size(65), 128);
    }

    #[test]
    fn rd_loss_terms() {
        let x = Tensor::full(&[1, 3, 2, 2], 0.5);
        let zero = Tensor::scalar(0.0);
        let l = rd_loss(&[x.clone()], &[x.clone()], &[zero.clone()], &[zero.clone()], 1024.0).unwrap();
        assert_eq!(l.item().unwrap(), 0.0);
        let xh = Tensor::full(&[1, 3, 2, 2], 0.25);
        let r = Tensor::scalar(0.75);
        let a = rd_loss(&[x.clone()], &[xh.clone()], &[r.clone()], &[zero.clone()], 1.0).unwrap();
        let b = rd_loss(&[x.clone()], &[xh.clone()], &[r.clone()], &[zero.clone()], 2.0).unwrap();
        assert!((a.item().unwrap() - (0.0625 + 0.75)).abs() < 1e-15);
        assert!((b.item().unwrap() - (0.125 + 0.75)).abs() < 1e-15);
        assert!(matches!(rd_loss(&[x.clone()], &[x], &[zero.clone()], &[zero], 0.0), Err(Error::Config(_))));
    }
}
