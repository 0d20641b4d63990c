use super::layers::{leaky, Conv};
use super::{ParamBuilder, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Selective kernel module: depthwise 3x3 and 5x5 branches mixed by a
/// per-channel softmax gate computed from their pooled sum, followed by a
/// 1x1 projection.
#[derive(Clone, Debug)]
pub enum Skm {
    /// Passes features through unchanged; isolates attention arithmetic in tests.
    Identity,
    Learned(SkmLayers),
}

#[derive(Clone, Debug)]
pub struct SkmLayers {
    channels: usize,
    branch3: Conv,
    branch5: Conv,
    squeeze: Conv,
    excite: Conv,
    proj: Conv,
}

impl Skm {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Self {
        let hidden = (channels / 4).max(4);
        Skm::Learned(SkmLayers {
            channels,
            branch3: Conv::new(pb, &format!("{name}.branch3"), channels, channels, 3, 1, channels),
            branch5: Conv::new(pb, &format!("{name}.branch5"), channels, channels, 5, 1, channels),
            squeeze: Conv::pointwise(pb, &format!("{name}.squeeze"), channels, hidden),
            excite: Conv::pointwise(pb, &format!("{name}.excite"), hidden, 2 * channels),
            proj: Conv::pointwise(pb, &format!("{name}.proj"), channels, channels),
        })
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        match self {
            Skm::Identity => Ok(x.clone()),
            Skm::Learned(l) => l.forward(ps, x),
        }
    }

    /// Branch gates `[B, C, 2]` (3x3 weight, 5x5 weight) for input `x`.
    pub fn gates(&self, ps: &ParamStore, x: &Tensor) -> Result<Option<Tensor>> {
        match self {
            Skm::Identity => Ok(None),
            Skm::Learned(l) => {
                let (b3, b5) = l.branches(ps, x)?;
                l.gate(ps, &b3, &b5).map(Some)
            }
        }
    }

    pub fn projection(&self) -> Option<&Conv> {
        match self {
            Skm::Identity => None,
            Skm::Learned(l) => Some(&l.proj),
        }
    }
}

impl SkmLayers {
    fn branches(&self, ps: &ParamStore, x: &Tensor) -> Result<(Tensor, Tensor)> {
        if x.ndim() != 4 || x.dim(1) != self.channels {
            return Err(Error::Config(format!("SKM built for {} channels, got input {:?}", self.channels, x.shape())));
        }
        Ok((leaky(&self.branch3.forward(ps, x)?), leaky(&self.branch5.forward(ps, x)?)))
    }

    fn gate(&self, ps: &ParamStore, b3: &Tensor, b5: &Tensor) -> Result<Tensor> {
        let (b, c) = (b3.dim(0), self.channels);
        let pooled = b3.add(b5)?.mean_axis(3, true)?.mean_axis(2, true)?;
        let hidden = leaky(&self.squeeze.forward(ps, &pooled)?);
        let logits = self.excite.forward(ps, &hidden)?;
        logits.reshape(&[b, 2, c])?.permute(&[0, 2, 1])?.softmax_lastdim()
    }

    fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let (b3, b5) = self.branches(ps, x)?;
        let gates = self.gate(ps, &b3, &b5)?;
        let (b, c) = (x.dim(0), self.channels);
        let g3 = gates.narrow(2, 0, 1)?.reshape(&[b, c, 1, 1])?;
        let g5 = gates.narrow(2, 1, 1)?.reshape(&[b, c, 1, 1])?;
        let mixed = b3.mul(&g3)?.add(&b5.mul(&g5)?)?;
        self.proj.forward(ps, &mixed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_input_gives_projection_bias() {
        let mut pb = ParamBuilder::new(3);
        let skm = Skm::new(&mut pb, "skm", 6);
        let mut ps = pb.finish();
        let bias = skm.projection().unwrap().bias();
        let vals: Vec<f64> = (0..6).map(|i| i as f64 * 0.25 - 0.5).collect();
        ps.set(bias, vals.clone()).unwrap();
        let y = skm.forward(&ps, &Tensor::zeros(&[2, 6, 3, 5])).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            assert_eq!(*v, vals[(i / 15) % 6]);
        }
    }

    #[test]
    fn preserves_shape_and_gates_sum_to_one() {
        let mut pb = ParamBuilder::new(4);
        let skm = Skm::new(&mut pb, "skm", 5);
        let ps = pb.finish();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &(b, h, w) in &[(1, 1, 1), (2, 4, 7), (3, 6, 2)] {
            let x = Tensor::randn(&[b, 5, h, w], 1.0, &mut rng);
            assert_eq!(skm.forward(&ps, &x).unwrap().shape(), x.shape());
            let g = skm.gates(&ps, &x).unwrap().unwrap();
            for pair in g.data().chunks(2) {
                assert!((pair[0] + pair[1] - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let mut pb = ParamBuilder::new(5);
        let skm = Skm::new(&mut pb, "skm", 4);
        let ps = pb.finish();
        assert!(matches!(skm.forward(&ps, &Tensor::zeros(&[1, 3, 2, 2])), Err(Error::Config(_))));
    }
}
