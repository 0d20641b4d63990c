use super::{ParamBuilder, ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::Tensor;

/// Negative slope of every leaky rectifier in the model.
pub const LEAKY_SLOPE: f64 = 0.01;

pub fn leaky(x: &Tensor) -> Tensor {
    x.leaky_relu(LEAKY_SLOPE)
}

/// Convolution with "same"-style padding `k / 2` and a bias.
#[derive(Clone, Debug)]
pub struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    groups: usize,
    kernel: usize,
    in_channels: usize,
}

impl Conv {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
    ) -> Self {
        let cg = cin / groups;
        let w = pb.he(format!("{name}.weight"), &[cout, cg, kernel, kernel], cg * kernel * kernel);
        let b = pb.zeros(format!("{name}.bias"), &[cout]);
        Conv { w, b, stride, groups, kernel, in_channels: cin }
    }

    pub fn pointwise(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize) -> Self {
        Self::new(pb, name, cin, cout, 1, 1, 1)
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        x.conv2d(ps.get(self.w), Some(ps.get(self.b)), self.stride, self.kernel / 2, self.groups)
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> ParamId {
        self.b
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }
}

/// Transposed convolution that multiplies spatial size by `stride` exactly.
#[derive(Clone, Debug)]
pub struct Deconv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    kernel: usize,
}

impl Deconv {
    pub fn new(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        let fan_in = (cin * kernel * kernel / (stride * stride)).max(1);
        let w = pb.he(format!("{name}.weight"), &[cin, cout, kernel, kernel], fan_in);
        let b = pb.zeros(format!("{name}.bias"), &[cout]);
        Deconv { w, b, stride, kernel }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        x.deconv2d(ps.get(self.w), Some(ps.get(self.b)), self.stride, self.kernel / 2, self.stride - 1)
    }

    pub fn bias(&self) -> ParamId {
        self.b
    }
}
