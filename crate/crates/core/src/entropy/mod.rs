//! Sliced checkerboard entropy model for the main latent.
//!
//! The latent is split into channel slices coded in order; each slice is
//! coded in two phases (anchors, then non-anchors). Both the encoder and
//! the decoder drive the same [`ParaEm::run`] loop, so the parameters they
//! compute are bit-identical.

mod checkerboard;
mod context;

pub use checkerboard::{anchor_mask, anchor_positions, is_anchor, non_anchor_mask, non_anchor_positions};
pub use context::{ContextBundle, EntropyParameters, GaussianParams, Pccm, Pgcm, Phase};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{LocalContext, ParamBuilder, ParamStore};
use crate::tensor::Tensor;

/// Supplies the quantized values of one phase of one slice.
pub trait PhaseCoder {
    /// `mu` and `sigma` cover the whole `[1, C, H, W]` slice grid; the
    /// returned values are ordered channel-major over `positions` and must be
    /// `q + mu` for integer `q`.
    fn code(
        &mut self,
        slice: usize,
        phase: Phase,
        mu: &[f64],
        sigma: &[f64],
        positions: &[usize],
        plane: usize,
    ) -> Result<Vec<f64>>;
}

/// Result of the differentiable training pass.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    /// Straight-through quantized latent.
    pub y_hat: Tensor,
    /// Total estimated bits over the batch (scalar).
    pub bits: Tensor,
}

#[derive(Clone, Debug)]
pub struct ParaEm {
    cfg: ModelConfig,
    pccm: Pccm,
    local: LocalContext,
    pgcm: Pgcm,
    ep: Vec<EntropyParameters>,
}

impl ParaEm {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: &ModelConfig) -> Self {
        let s = cfg.slice_channels();
        ParaEm {
            cfg: *cfg,
            pccm: Pccm::new(pb, &format!("{name}.pccm"), s),
            local: LocalContext::new(pb, &format!("{name}.local"), s, s, cfg.window),
            pgcm: Pgcm::new(pb, &format!("{name}.pgcm"), s),
            ep: (0..cfg.num_slices)
                .map(|i| EntropyParameters::new(pb, &format!("{name}.ep{i}"), s, cfg.hyper_channels(), cfg.sigma_min))
                .collect(),
        }
    }

    pub fn pccm(&self) -> &Pccm {
        &self.pccm
    }

    pub fn pgcm(&self) -> &Pgcm {
        &self.pgcm
    }

    pub fn local(&self) -> &LocalContext {
        &self.local
    }

    pub fn slice_shape(&self, phi_h: &Tensor) -> [usize; 4] {
        [phi_h.dim(0), self.cfg.slice_channels(), phi_h.dim(2), phi_h.dim(3)]
    }

    /// Channel context and anchor parameters of slice `i` (0-based) from
    /// the fully decoded slices `decoded[..i]`.
    pub fn anchor_params(
        &self,
        ps: &ParamStore,
        i: usize,
        decoded: &[Tensor],
        phi_h: &Tensor,
    ) -> Result<(Tensor, GaussianParams)> {
        if i >= self.cfg.num_slices {
            return Err(Error::Contract(format!("slice {i} out of {}", self.cfg.num_slices)));
        }
        let shape = self.slice_shape(phi_h);
        let phi_ch = self.pccm.forward(ps, decoded, i + 1, &shape)?;
        let ctx = ContextBundle { phi_ch: phi_ch.clone(), phi_h: phi_h.clone(), phi_lc: None, phi_gc: None };
        let params = self.ep[i].forward(ps, &ctx, Phase::Anchor)?;
        Ok((phi_ch, params))
    }

    /// Non-anchor parameters of slice `i`; only anchor cells of `slice` are read.
    pub fn non_anchor_params(
        &self,
        ps: &ParamStore,
        i: usize,
        phi_ch: &Tensor,
        phi_h: &Tensor,
        slice: &Tensor,
    ) -> Result<GaussianParams> {
        let (h, w) = (slice.dim(2), slice.dim(3));
        let anchors_only = slice.mask_select(&anchor_mask(h, w))?;
        let phi_lc = self.local.forward(ps, phi_ch, &anchors_only, &anchor_mask(h, w))?;
        let phi_gc = self.pgcm.forward(ps, phi_ch, &anchors_only)?;
        let ctx =
            ContextBundle { phi_ch: phi_ch.clone(), phi_h: phi_h.clone(), phi_lc: Some(phi_lc), phi_gc: Some(phi_gc) };
        self.ep[i].forward(ps, &ctx, Phase::NonAnchor)
    }

    /// Sequential two-phase pass over all slices of a single latent
    /// (batch size 1), with values supplied by `coder`.
    pub fn run(&self, ps: &ParamStore, phi_h: &Tensor, coder: &mut dyn PhaseCoder) -> Result<Tensor> {
        if phi_h.dim(0) != 1 {
            return Err(Error::Contract("entropy coding runs on one latent at a time".into()));
        }
        let shape = self.slice_shape(phi_h);
        let (s, h, w) = (shape[1], shape[2], shape[3]);
        let plane = h * w;
        let anchors = anchor_positions(h, w);
        let others = non_anchor_positions(h, w);
        let mut decoded: Vec<Tensor> = Vec::with_capacity(self.cfg.num_slices);
        for i in 0..self.cfg.num_slices {
            let (phi_ch, pa) = self.anchor_params(ps, i, &decoded, phi_h)?;
            let mut values = vec![0.0; s * plane];
            let va = coder.code(i, Phase::Anchor, pa.mu.data(), pa.sigma.data(), &anchors, plane)?;
            scatter_into(&mut values, &va, &anchors, s, plane)?;
            let slice_a = Tensor::new(values.clone(), &shape)?;
            let pn = self.non_anchor_params(ps, i, &phi_ch, phi_h, &slice_a)?;
            let vn = coder.code(i, Phase::NonAnchor, pn.mu.data(), pn.sigma.data(), &others, plane)?;
            scatter_into(&mut values, &vn, &others, s, plane)?;
            decoded.push(Tensor::new(values, &shape)?);
        }
        Tensor::concat(&decoded.iter().collect::<Vec<_>>(), 1)
    }

    /// Differentiable pass used for training: `noise` (same shape as `y`)
    /// perturbs the rate path, the context path uses straight-through rounding.
    pub fn train_forward(&self, ps: &ParamStore, y: &Tensor, noise: &Tensor, phi_h: &Tensor) -> Result<TrainOutput> {
        if y.shape() != noise.shape() {
            return Err(Error::shape("train_forward", y.shape(), noise.shape()));
        }
        let s = self.cfg.slice_channels();
        let (h, w) = (y.dim(2), y.dim(3));
        let am = anchor_mask(h, w);
        let nm = non_anchor_mask(h, w);
        let noisy = y.add(noise)?;
        let mut decoded: Vec<Tensor> = Vec::with_capacity(self.cfg.num_slices);
        let mut bits: Option<Tensor> = None;
        for i in 0..self.cfg.num_slices {
            let yi = y.narrow(1, i * s, s)?;
            let (phi_ch, pa) = self.anchor_params(ps, i, &decoded, phi_h)?;
            let slice_a = quantize_ste(&yi, &pa.mu)?.mask_select(&am)?;
            let pn = self.non_anchor_params(ps, i, &phi_ch, phi_h, &slice_a)?;
            let slice = slice_a.add(&quantize_ste(&yi, &pn.mu)?.mask_select(&nm)?)?;
            let mu = pa.mu.mask_select(&am)?.add(&pn.mu.mask_select(&nm)?)?;
            let sigma = pa.sigma.mask_select(&am)?.add(&pn.sigma.mask_select(&nm)?)?;
            let b = noisy.narrow(1, i * s, s)?.discretized_gaussian_bits(&mu, &sigma)?.sum_all();
            bits = Some(match bits {
                None => b,
                Some(acc) => acc.add(&b)?,
            });
            decoded.push(slice);
        }
        Ok(TrainOutput {
            y_hat: Tensor::concat(&decoded.iter().collect::<Vec<_>>(), 1)?,
            bits: bits.expect("at least one slice"),
        })
    }
}

fn scatter_into(values: &mut [f64], src: &[f64], positions: &[usize], channels: usize, plane: usize) -> Result<()> {
    if src.len() != channels * positions.len() {
        return Err(Error::Contract(format!(
            "phase coder returned {} values, expected {}",
            src.len(),
            channels * positions.len()
        )));
    }
    for c in 0..channels {
        for (k, &p) in positions.iter().enumerate() {
            values[c * plane + p] = src[c * positions.len() + k];
        }
    }
    Ok(())
}

/// `round(t - mean) + mean` with rounding half away from zero.
pub fn quantize(t: &Tensor, mean: Option<&Tensor>) -> Result<Tensor> {
    match mean {
        None => Ok(t.detach().round_ste()),
        Some(m) => t.detach().sub(&m.detach())?.round_ste().add(&m.detach()),
    }
}

/// As [`quantize`] with an identity gradient through the rounding.
pub fn quantize_ste(t: &Tensor, mean: &Tensor) -> Result<Tensor> {
    t.sub(mean)?.round_ste().add(mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_examples() {
        let t = Tensor::new(vec![1.5, -1.5, 0.4], &[3]).unwrap();
        assert_eq!(quantize(&t, None).unwrap().data(), &[2.0, -2.0, 0.0]);
        let m = Tensor::full(&[3], 0.3);
        let q = quantize(&t, Some(&m)).unwrap();
        assert!((q.data()[2] - 0.3).abs() < 1e-15);
    }
}
