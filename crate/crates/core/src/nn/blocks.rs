use super::layers::{leaky, Conv};
use super::{ParamBuilder, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{local_window_attention, Tensor};

/// Depthwise residual bottleneck: 1x1 expand to `2C`, depthwise 3x3,
/// 1x1 reduce, plus the input.
#[derive(Clone, Debug)]
pub struct DepthRb {
    channels: usize,
    expand: Conv,
    depthwise: Conv,
    reduce: Conv,
}

impl DepthRb {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Self {
        let wide = 2 * channels;
        DepthRb {
            channels,
            expand: Conv::pointwise(pb, &format!("{name}.expand"), channels, wide),
            depthwise: Conv::new(pb, &format!("{name}.depthwise"), wide, wide, 3, 1, wide),
            reduce: Conv::pointwise(pb, &format!("{name}.reduce"), wide, channels),
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        check_channels("DepthRB", self.channels, x)?;
        let h = leaky(&self.expand.forward(ps, x)?);
        let h = leaky(&self.depthwise.forward(ps, &h)?);
        self.reduce.forward(ps, &h)?.add(x)
    }
}

/// Fusion network: concatenates the aligned reference with the base
/// feature, two 3x3 convolutions, and adds the base back.
#[derive(Clone, Debug)]
pub struct Fusion {
    channels: usize,
    conv1: Conv,
    conv2: Conv,
}

impl Fusion {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Self {
        Fusion {
            channels,
            conv1: Conv::new(pb, &format!("{name}.conv1"), 2 * channels, channels, 3, 1, 1),
            conv2: Conv::new(pb, &format!("{name}.conv2"), channels, channels, 3, 1, 1),
        }
    }

    pub fn forward(&self, ps: &ParamStore, aligned: &Tensor, base: &Tensor) -> Result<Tensor> {
        if aligned.shape() != base.shape() {
            return Err(Error::shape("fusion", aligned.shape(), base.shape()));
        }
        check_channels("fusion", self.channels, base)?;
        let h = leaky(&self.conv1.forward(ps, &Tensor::concat(&[aligned, base], 1)?)?);
        self.conv2.forward(ps, &h)?.add(base)
    }
}

/// Local context from the already-coded anchors of a slice.
///
/// Queries come from a context map available to the decoder at every
/// position; keys and values are 1x1 projections of the anchor half of the
/// slice (zero-padded before projection). Only anchor values are read and the
/// result is zero on anchors.
#[derive(Clone, Debug)]
pub struct LocalContext {
    channels: usize,
    window: usize,
    query: Conv,
    key: Conv,
    value: Conv,
}

impl LocalContext {
    pub fn new(pb: &mut ParamBuilder, name: &str, query_channels: usize, channels: usize, window: usize) -> Self {
        LocalContext {
            channels,
            window,
            query: Conv::pointwise(pb, &format!("{name}.query"), query_channels, channels),
            key: Conv::pointwise(pb, &format!("{name}.key"), channels, channels),
            value: Conv::pointwise(pb, &format!("{name}.value"), channels, channels),
        }
    }

    pub fn value_projection(&self) -> &Conv {
        &self.value
    }

    pub fn forward(&self, ps: &ParamStore, query_ctx: &Tensor, slice: &Tensor, anchor_mask: &[bool]) -> Result<Tensor> {
        if self.window.is_multiple_of(2) {
            return Err(Error::Config(format!("attention window must be odd, got {}", self.window)));
        }
        check_channels("local context", self.channels, slice)?;
        let anchors = slice.mask_select(anchor_mask)?.pad2d(self.window / 2)?;
        let q = self.query.forward(ps, query_ctx)?;
        let k = self.key.forward(ps, &anchors)?;
        let v = self.value.forward(ps, &anchors)?;
        local_window_attention(&q, &k, &v, self.window)
    }
}

fn check_channels(block: &str, expected: usize, x: &Tensor) -> Result<()> {
    if x.ndim() != 4 || x.dim(1) != expected {
        return Err(Error::Config(format!("{block} built for {expected} channels, got input {:?}", x.shape())));
    }
    Ok(())
}
