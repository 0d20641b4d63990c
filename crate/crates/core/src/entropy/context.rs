use super::checkerboard::{anchor_positions, non_anchor_mask, non_anchor_positions};
use crate::error::{Error, Result};
use crate::nn::{leaky, Conv, DepthRb, ParamBuilder, ParamStore};
use crate::pmifm::Pmifm;
use crate::tensor::Tensor;

/// Channel context: slice `i` (1-based) is conditioned on the fusion of the
/// previous slice with all earlier ones.
#[derive(Clone, Debug)]
pub struct Pccm {
    pmifm: Pmifm,
}

impl Pccm {
    pub fn new(pb: &mut ParamBuilder, name: &str, slice_channels: usize) -> Self {
        Pccm { pmifm: Pmifm::new(pb, &format!("{name}.pmifm"), slice_channels) }
    }

    pub fn pmifm(&self) -> &Pmifm {
        &self.pmifm
    }

    /// `decoded` holds slices `1..i` in order; `shape` is the slice shape.
    pub fn forward(&self, ps: &ParamStore, decoded: &[Tensor], i: usize, shape: &[usize]) -> Result<Tensor> {
        if i == 0 {
            return Err(Error::Contract("slice indices start at 1".into()));
        }
        if decoded.len() < i - 1 {
            return Err(Error::Sequencing(format!("slice {i} needs {} decoded slices, have {}", i - 1, decoded.len())));
        }
        if i == 1 {
            return Ok(Tensor::zeros(shape));
        }
        self.pmifm.forward(ps, &decoded[i - 2], &decoded[..i - 2])
    }
}

/// Global context over the anchors of the current slice, queried from the
/// channel context at non-anchor positions.
#[derive(Clone, Debug)]
pub struct Pgcm {
    channels: usize,
    query: Conv,
    key: Conv,
    value: Conv,
    conv: Conv,
    refine: DepthRb,
}

impl Pgcm {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Self {
        Pgcm {
            channels,
            query: Conv::pointwise(pb, &format!("{name}.query"), channels, channels),
            key: Conv::pointwise(pb, &format!("{name}.key"), channels, channels),
            value: Conv::pointwise(pb, &format!("{name}.value"), channels, channels),
            conv: Conv::new(pb, &format!("{name}.conv"), channels, channels, 3, 1, 1),
            refine: DepthRb::new(pb, &format!("{name}.refine"), channels),
        }
    }

    pub fn value_projection(&self) -> &Conv {
        &self.value
    }

    /// Attention output scattered to non-anchor positions (zero elsewhere),
    /// before the convolutional refinement.
    pub fn attend(&self, ps: &ParamStore, phi_ch: &Tensor, slice: &Tensor) -> Result<Tensor> {
        if phi_ch.shape() != slice.shape() {
            return Err(Error::shape("pgcm", phi_ch.shape(), slice.shape()));
        }
        if slice.ndim() != 4 || slice.dim(1) != self.channels {
            return Err(Error::Config(format!("PGCM built for {} channels, got {:?}", self.channels, slice.shape())));
        }
        let (h, w) = (slice.dim(2), slice.dim(3));
        let anchors = anchor_positions(h, w);
        let queries = non_anchor_positions(h, w);
        if queries.is_empty() {
            return Ok(Tensor::zeros(slice.shape()));
        }
        let q = self.query.forward(ps, phi_ch)?.gather_positions(&queries)?;
        let k = self.key.forward(ps, phi_ch)?.gather_positions(&anchors)?;
        let v = self.value.forward(ps, slice)?.gather_positions(&anchors)?;
        let scale = 1.0 / (self.channels as f64).sqrt();
        let attn = q.batched_matmul(&k.transpose_last2()?)?.scale(scale).softmax_lastdim()?;
        attn.batched_matmul(&v)?.scatter_positions(&queries, h, w)
    }

    pub fn forward(&self, ps: &ParamStore, phi_ch: &Tensor, slice: &Tensor) -> Result<Tensor> {
        let (h, w) = (slice.dim(2), slice.dim(3));
        let a = self.attend(ps, phi_ch, slice)?;
        let r = self.refine.forward(ps, &self.conv.forward(ps, &a)?)?;
        r.mask_select(&non_anchor_mask(h, w))
    }
}

/// Which checkerboard half a parameter prediction is for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Anchor,
    NonAnchor,
}

/// Context maps available when predicting one phase of a slice.
#[derive(Clone, Debug)]
pub struct ContextBundle {
    pub phi_ch: Tensor,
    pub phi_h: Tensor,
    pub phi_lc: Option<Tensor>,
    pub phi_gc: Option<Tensor>,
}

/// Per-element Gaussian mean and scale.
#[derive(Clone, Debug)]
pub struct GaussianParams {
    pub mu: Tensor,
    pub sigma: Tensor,
}

/// Two 1x1 layers mapping the concatenated contexts to `(mu, sigma)`.
#[derive(Clone, Debug)]
pub struct EntropyParameters {
    slice_channels: usize,
    sigma_min: f64,
    anchor: (Conv, Conv),
    non_anchor: (Conv, Conv),
}

impl EntropyParameters {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        slice_channels: usize,
        hyper_channels: usize,
        sigma_min: f64,
    ) -> Self {
        let hidden = 4 * slice_channels;
        let mk = |pb: &mut ParamBuilder, part: &str, cin: usize| {
            (
                Conv::pointwise(pb, &format!("{name}.{part}.hidden"), cin, hidden),
                Conv::pointwise(pb, &format!("{name}.{part}.out"), hidden, 2 * slice_channels),
            )
        };
        EntropyParameters {
            slice_channels,
            sigma_min,
            anchor: mk(pb, "anchor", slice_channels + hyper_channels),
            non_anchor: mk(pb, "non_anchor", 3 * slice_channels + hyper_channels),
        }
    }

    pub fn output_layer(&self, phase: Phase) -> &Conv {
        match phase {
            Phase::Anchor => &self.anchor.1,
            Phase::NonAnchor => &self.non_anchor.1,
        }
    }

    pub fn forward(&self, ps: &ParamStore, ctx: &ContextBundle, phase: Phase) -> Result<GaussianParams> {
        let (layers, input) = match (phase, &ctx.phi_lc, &ctx.phi_gc) {
            (Phase::Anchor, None, None) => (&self.anchor, Tensor::concat(&[&ctx.phi_ch, &ctx.phi_h], 1)?),
            (Phase::NonAnchor, Some(lc), Some(gc)) => {
                (&self.non_anchor, Tensor::concat(&[&ctx.phi_ch, &ctx.phi_h, lc, gc], 1)?)
            }
            (Phase::Anchor, _, _) => {
                return Err(Error::Contract("anchor parameters take only channel and hyper context".into()))
            }
            (Phase::NonAnchor, _, _) => {
                return Err(Error::Contract("non-anchor parameters need local and global context".into()))
            }
        };
        let out = layers.1.forward(ps, &leaky(&layers.0.forward(ps, &input)?))?;
        let s = self.slice_channels;
        Ok(GaussianParams {
            mu: out.narrow(1, 0, s)?,
            sigma: out.narrow(1, s, s)?.softplus().add_scalar(self.sigma_min),
        })
    }
}
