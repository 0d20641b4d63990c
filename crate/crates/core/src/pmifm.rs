//! Consistency-weighted fusion of any number of side sources into a main
//! source.

use crate::error::{Error, Result};
use crate::nn::{Fusion, ParamBuilder, ParamStore};
use crate::opam::{Opam, OpamOutput};
use crate::tensor::Tensor;

/// Intermediate values of one fusion, kept for inspection.
#[derive(Clone, Debug)]
pub struct PmifmTrace {
    /// Per-side consistency maps `[B, H, W]`, in side order.
    pub consistencies: Vec<Tensor>,
    /// Per-side fusion weights `[B, H, W]`; they sum to one at every position.
    pub weights: Vec<Tensor>,
    /// Relevance-weighted aligned feature fed to the fusion network.
    pub fused_reference: Tensor,
    pub output: Tensor,
}

#[derive(Clone, Debug)]
pub struct Pmifm {
    opam: Opam,
    fusion: Fusion,
}

impl Pmifm {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Self {
        Pmifm {
            opam: Opam::new(pb, &format!("{name}.opam"), channels),
            fusion: Fusion::new(pb, &format!("{name}.fusion"), channels),
        }
    }

    /// Variant whose attention uses raw features as queries and keys.
    pub fn with_identity_attention(pb: &mut ParamBuilder, name: &str, channels: usize) -> Self {
        Pmifm { opam: Opam::identity(), fusion: Fusion::new(pb, &format!("{name}.fusion"), channels) }
    }

    pub fn opam(&self) -> &Opam {
        &self.opam
    }

    pub fn fusion(&self) -> &Fusion {
        &self.fusion
    }

    pub fn forward(&self, ps: &ParamStore, main: &Tensor, sides: &[Tensor]) -> Result<Tensor> {
        Ok(self.trace(ps, main, sides)?.output)
    }

    /// Raw consistency maps, one per side source.
    pub fn consistency_probe(&self, ps: &ParamStore, main: &Tensor, sides: &[Tensor]) -> Result<Vec<Tensor>> {
        Ok(self.align(ps, main, sides)?.into_iter().map(|o| o.consistency).collect())
    }

    fn align(&self, ps: &ParamStore, main: &Tensor, sides: &[Tensor]) -> Result<Vec<OpamOutput>> {
        if let Some(bad) = sides.iter().find(|s| s.shape() != main.shape()) {
            return Err(Error::shape("pmifm", main.shape(), bad.shape()));
        }
        if sides.is_empty() {
            return Ok(Vec::new());
        }
        let q = self.opam.queries(ps, main)?;
        sides.iter().map(|s| self.opam.forward_with(ps, &q, s)).collect()
    }

    pub fn trace(&self, ps: &ParamStore, main: &Tensor, sides: &[Tensor]) -> Result<PmifmTrace> {
        let aligned = self.align(ps, main, sides)?;
        let (consistencies, weights, fused_reference) = if aligned.is_empty() {
            (Vec::new(), Vec::new(), Tensor::zeros(main.shape()))
        } else {
            let (b, h, w) = (main.dim(0), main.dim(2), main.dim(3));
            let stacked: Vec<Tensor> =
                aligned.iter().map(|o| o.consistency.reshape(&[b, h, w, 1])).collect::<Result<_>>()?;
            let soft = Tensor::concat(&stacked.iter().collect::<Vec<_>>(), 3)?.softmax_lastdim()?;
            let mut weights = Vec::with_capacity(aligned.len());
            let mut acc: Option<Tensor> = None;
            for (k, o) in aligned.iter().enumerate() {
                let wk = soft.narrow(3, k, 1)?.reshape(&[b, h, w])?;
                let term = o.aligned.mul(&wk.reshape(&[b, 1, h, w])?)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => a.add(&term)?,
                });
                weights.push(wk);
            }
            let consistencies = aligned.into_iter().map(|o| o.consistency).collect();
            (consistencies, weights, acc.expect("at least one side"))
        };
        let output = self.fusion.forward(ps, &fused_reference, main)?;
        Ok(PmifmTrace { consistencies, weights, fused_reference, output })
    }
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
    fn single_side_weights_are_one_and_reference_is_aligned() {
        let mut pb = ParamBuilder::new(1);
        let p = Pmifm::new(&mut pb, "p", 3);
        let ps = pb.finish();
        let main = rnd(&[1, 3, 4, 4], 2);
        let side = rnd(&[1, 3, 4, 4], 3);
        let t = p.trace(&ps, &main, std::slice::from_ref(&side)).unwrap();
        assert!(t.weights[0].data().iter().all(|&w| w == 1.0));
        let direct = p.opam().forward(&ps, &main, &side).unwrap();
        assert_eq!(t.fused_reference.data(), direct.aligned.data());
        let composed = p.fusion().forward(&ps, &direct.aligned, &main).unwrap();
        assert_eq!(t.output.data(), composed.data());
    }

    #[test]
    fn empty_side_set_fuses_zero_reference() {
        let mut pb = ParamBuilder::new(4);
        let p = Pmifm::new(&mut pb, "p", 2);
        let ps = pb.finish();
        let main = rnd(&[2, 2, 3, 3], 5);
        let out = p.forward(&ps, &main, &[]).unwrap();
        let want = p.fusion().forward(&ps, &Tensor::zeros(main.shape()), &main).unwrap();
        assert_eq!(out.data(), want.data());
        assert!(p.consistency_probe(&ps, &main, &[]).unwrap().is_empty());
    }

    #[test]
    fn weights_sum_to_one_and_probe_count_matches() {
        let mut pb = ParamBuilder::new(6);
        let p = Pmifm::new(&mut pb, "p", 2);
        let ps = pb.finish();
        let main = rnd(&[1, 2, 3, 4], 7);
        let sides: Vec<Tensor> = (0..3).map(|i| rnd(&[1, 2, 3, 4], 8 + i)).collect();
        let t = p.trace(&ps, &main, &sides).unwrap();
        assert_eq!(t.consistencies.len(), 3);
        for pos in 0..12 {
            let s: f64 = t.weights.iter().map(|w| w.data()[pos]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn mismatched_side_is_rejected() {
        let mut pb = ParamBuilder::new(9);
        let p = Pmifm::new(&mut pb, "p", 2);
        let ps = pb.finish();
        let err = p.forward(&ps, &rnd(&[1, 2, 3, 3], 1), &[rnd(&[1, 2, 3, 4], 2)]);
        assert!(matches!(err, Err(Error::Shape { .. })));
    }
}
