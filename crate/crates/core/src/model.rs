//! The complete multi-view codec: shared per-view transforms, the
//! factorized hyper-latent prior, the sliced entropy model and the joint
//! decoder.

use std::io::{Read, Write};

use crate::coder::{Bitstream, RangeDecoder, RangeEncoder, SymbolTable, ViewSegments};
use crate::config::ModelConfig;
use crate::entropy::{ParaEm, Phase, PhaseCoder};
use crate::error::{Error, Result};
use crate::nn::{ParamBuilder, ParamId, ParamStore};
use crate::par;
use crate::tensor::{read_records, write_records, Record, Tensor};
use crate::transforms::{check_pixels, padded_size, rd_loss, reflect_pad, ParaJd, ViewTransforms};

const CONFIG_RECORD: &str = "model.config";

/// Per-channel logistic density of the hyper-latent.
#[derive(Clone, Debug)]
pub struct FactorizedPrior {
    loc: ParamId,
    scale: ParamId,
    channels: usize,
    scale_min: f64,
}

impl FactorizedPrior {
    pub fn new(pb: &mut ParamBuilder, channels: usize, scale_min: f64) -> Self {
        FactorizedPrior {
            loc: pb.zeros("prior.loc", &[channels]),
            scale: pb.constant("prior.scale", &[channels], 0.5),
            channels,
            scale_min,
        }
    }

    fn broadcast(&self, ps: &ParamStore, shape: &[usize]) -> Result<(Tensor, Tensor)> {
        let c = [1, self.channels, 1, 1];
        let loc = ps.get(self.loc).reshape(&c)?.broadcast_to(shape)?;
        let scale = ps.get(self.scale).reshape(&c)?.softplus().add_scalar(self.scale_min).broadcast_to(shape)?;
        Ok((loc, scale))
    }

    /// Total bits of `z` (noisy or quantized) under the prior.
    pub fn bits(&self, ps: &ParamStore, z: &Tensor) -> Result<Tensor> {
        let (loc, scale) = self.broadcast(ps, z.shape())?;
        Ok(z.discretized_logistic_bits(&loc, &scale)?.sum_all())
    }

    /// Per-channel symbol tables and the integer shift removed from each
    /// channel before coding.
    pub fn tables(&self, ps: &ParamStore) -> Result<Vec<(SymbolTable, f64)>> {
        let loc = ps.get(self.loc).data();
        let scale = ps.get(self.scale).softplus().add_scalar(self.scale_min);
        loc.iter().zip(scale.data()).map(|(&l, &s)| Ok((SymbolTable::logistic(l - l.round(), s)?, l.round()))).collect()
    }
}

/// Architecture without parameter values.
#[derive(Clone, Debug)]
pub struct ParaHydra {
    cfg: ModelConfig,
    views: ViewTransforms,
    prior: FactorizedPrior,
    em: ParaEm,
    jd: ParaJd,
}

/// Differentiable quantities of one training step.
#[derive(Clone, Debug)]
pub struct TrainForward {
    pub loss: Tensor,
    /// Sum over views of the per-view mean squared error.
    pub distortion: Tensor,
    /// Sum over views of `y` and `z` rates, bits per pixel.
    pub rate_bpp: Tensor,
    pub reconstructions: Vec<Tensor>,
}

/// Additive uniform noise for the rate path of one view.
#[derive(Clone, Debug)]
pub struct Dither {
    pub y: Tensor,
    pub z: Tensor,
}

impl ParaHydra {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut pb = ParamBuilder::new(seed);
        let n = cfg.latent_channels;
        let model = ParaHydra {
            cfg: *cfg,
            views: ViewTransforms::new(&mut pb, cfg),
            prior: FactorizedPrior::new(&mut pb, n, cfg.sigma_min),
            em: ParaEm::new(&mut pb, "em", cfg),
            jd: ParaJd::new(&mut pb, n),
        };
        Ok((model, pb.finish()))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn transforms(&self) -> &ViewTransforms {
        &self.views
    }

    pub fn prior(&self) -> &FactorizedPrior {
        &self.prior
    }

    pub fn entropy_model(&self) -> &ParaEm {
        &self.em
    }

    pub fn joint_decoder(&self) -> &ParaJd {
        &self.jd
    }

    /// Latent shapes `(y, z)` for one padded view.
    pub fn latent_shapes(&self, padded_h: usize, padded_w: usize) -> ([usize; 4], [usize; 4]) {
        let n = self.cfg.latent_channels;
        ([1, n, padded_h / 16, padded_w / 16], [1, n, padded_h / 64, padded_w / 64])
    }

    /// Noisy-rate, straight-through-reconstruction pass over `views` (each
    /// `[B,3,H,W]` with `H` and `W` multiples of 64).
    pub fn forward_train(
        &self,
        ps: &ParamStore,
        views: &[Tensor],
        dither: &[Dither],
        lambda: f64,
    ) -> Result<TrainForward> {
        if views.is_empty() || dither.len() != views.len() {
            return Err(Error::Contract("one dither per view required".into()));
        }
        let shape = views[0].shape();
        if views.iter().any(|v| v.shape() != shape) {
            return Err(Error::Input("all views must share one shape".into()));
        }
        let pixels = (shape[0] * shape[2] * shape[3]) as f64;
        let per_view = par::map_range(views.len(), |k| -> Result<(Tensor, Tensor, Tensor)> {
            let (y, z) = self.views.encode_view(ps, &views[k])?;
            let rate_z = self.prior.bits(ps, &z.add(&dither[k].z)?)?.scale(1.0 / pixels);
            let phi_h = self.views.hyper_synthesis.forward(ps, &z.round_ste())?;
            let out = self.em.train_forward(ps, &y, &dither[k].y, &phi_h)?;
            Ok((out.y_hat, out.bits.scale(1.0 / pixels), rate_z))
        });
        let mut y_hat = Vec::with_capacity(views.len());
        let (mut rate_y, mut rate_z) = (Vec::new(), Vec::new());
        for r in per_view {
            let (a, b, c) = r?;
            y_hat.push(a);
            rate_y.push(b);
            rate_z.push(c);
        }
        let x_hat = self.jd.forward(ps, &y_hat)?;
        let loss = rd_loss(views, &x_hat, &rate_y, &rate_z, lambda)?;
        let mut distortion = Tensor::scalar(0.0);
        let mut rate = Tensor::scalar(0.0);
        for k in 0..views.len() {
            distortion = distortion.add(&views[k].sub(&x_hat[k])?.square().mean_all())?;
            rate = rate.add(&rate_y[k])?.add(&rate_z[k])?;
        }
        Ok(TrainForward { loss, distortion, rate_bpp: rate, reconstructions: x_hat })
    }
}

/// Estimated and actual size of one range-coded segment.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentStat {
    pub view: usize,
    /// `None` for the hyper-latent segment.
    pub slice: Option<usize>,
    pub phase: Option<Phase>,
    pub estimated_bits: f64,
    pub actual_bits: usize,
}

#[derive(Clone, Debug)]
pub struct Encoded {
    pub bitstream: Bitstream,
    /// Quantized latents exactly as the decoder will rebuild them.
    pub latents: Vec<Tensor>,
    pub segments: Vec<SegmentStat>,
}

/// A model together with its parameter values.
#[derive(Clone, Debug)]
pub struct Codec {
    pub model: ParaHydra,
    pub params: ParamStore,
}

impl Codec {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let (model, params) = ParaHydra::new(cfg, seed)?;
        Ok(Codec { model, params })
    }

    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        let mut records = vec![Record { name: CONFIG_RECORD.into(), shape: vec![4], data: self.config().to_values() }];
        records.extend(self.params.to_records());
        write_records(w, &records)
    }

    pub fn load<R: Read>(r: R) -> Result<Self> {
        let mut records = read_records(r)?;
        let at = records
            .iter()
            .position(|r| r.name == CONFIG_RECORD)
            .ok_or_else(|| Error::Format("weights carry no model configuration".into()))?;
        let cfg = ModelConfig::from_values(&records.remove(at).data)?;
        let mut codec = Codec::new(&cfg, 0)?;
        codec.params.load_records(&records)?;
        Ok(codec)
    }

    /// Compresses `views` (each `[1,3,H,W]` in `[0,1]`, all the same size).
    /// Each view is analysed and entropy coded on its own.
    pub fn encode(&self, views: &[Tensor], lambda_index: u8) -> Result<Encoded> {
        let (h, w) = check_views(views)?;
        let (ph, pw) = (padded_size(h), padded_size(w));
        let coded = par::map_slice(views, |x| self.encode_view(x, ph, pw));
        let mut segs = Vec::new();
        let mut out_views = Vec::new();
        let mut latents = Vec::new();
        for (k, c) in coded.into_iter().enumerate() {
            let (seg, y_hat, mut stats) = c?;
            stats.iter_mut().for_each(|s| s.view = k);
            segs.extend(stats);
            out_views.push(seg);
            latents.push(y_hat);
        }
        let cfg = self.config();
        let bitstream = Bitstream {
            height: dim_u32(h)?,
            width: dim_u32(w)?,
            padded_height: dim_u32(ph)?,
            padded_width: dim_u32(pw)?,
            lambda_index,
            num_slices: u8::try_from(cfg.num_slices).map_err(|_| Error::Config("too many slices".into()))?,
            latent_channels: u16::try_from(cfg.latent_channels)
                .map_err(|_| Error::Config("too many latent channels".into()))?,
            views: out_views,
        };
        Ok(Encoded { bitstream, latents, segments: segs })
    }

    fn encode_view(&self, x: &Tensor, ph: usize, pw: usize) -> Result<(ViewSegments, Tensor, Vec<SegmentStat>)> {
        let x = reflect_pad(x, ph, pw)?;
        let (y, z) = self.model.views.encode_view(&self.params, &x)?;
        let z_hat = z.detach().round_ste();
        let tables = self.model.prior.tables(&self.params)?;
        let plane = z.dim(2) * z.dim(3);
        let mut enc = RangeEncoder::new();
        let mut est = 0.0;
        for (i, &v) in z_hat.data().iter().enumerate() {
            let (table, shift) = &tables[i / plane];
            let s = symbol(v - shift)?;
            est += table.bits(s);
            table.encode(&mut enc, s);
        }
        let z_bytes = enc.finish();
        let mut stats = vec![SegmentStat {
            view: 0,
            slice: None,
            phase: None,
            estimated_bits: est,
            actual_bits: 8 * z_bytes.len(),
        }];
        let phi_h = self.model.views.hyper_synthesis.forward(&self.params, &z_hat)?;
        let mut coder = LatentEncoder {
            y: y.data(),
            slice_channels: self.config().slice_channels(),
            out: Vec::new(),
            stats: Vec::new(),
        };
        let y_hat = self.model.em.run(&self.params, &phi_h, &mut coder)?;
        stats.extend(coder.stats);
        let slices = coder.out.chunks(2).map(|p| (p[0].clone(), p[1].clone())).collect();
        Ok((ViewSegments { z: z_bytes, slices }, y_hat, stats))
    }

    /// Rebuilds the quantized latents of every view.
    pub fn decode_latents(&self, bs: &Bitstream) -> Result<Vec<Tensor>> {
        let cfg = self.config();
        if bs.latent_channels as usize != cfg.latent_channels || bs.num_slices as usize != cfg.num_slices {
            return Err(Error::Config(format!(
                "bitstream expects {} channels in {} slices, model has {} in {}",
                bs.latent_channels, bs.num_slices, cfg.latent_channels, cfg.num_slices
            )));
        }
        let (ph, pw) = (bs.padded_height as usize, bs.padded_width as usize);
        if ph != padded_size(bs.height as usize)
            || pw != padded_size(bs.width as usize)
            || bs.height == 0
            || bs.width == 0
        {
            return Err(Error::Corrupt { offset: 7, reason: "inconsistent image dimensions".into() });
        }
        let (_, z_shape) = self.model.latent_shapes(ph, pw);
        par::map_slice(&bs.views, |v| self.decode_view(v, &z_shape)).into_iter().collect()
    }

    fn decode_view(&self, seg: &ViewSegments, z_shape: &[usize]) -> Result<Tensor> {
        let tables = self.model.prior.tables(&self.params)?;
        let plane = z_shape[2] * z_shape[3];
        let mut dec = RangeDecoder::new(&seg.z)?;
        let mut z = Vec::with_capacity(z_shape.iter().product());
        for i in 0..z_shape.iter().product::<usize>() {
            let (table, shift) = &tables[i / plane];
            z.push(table.decode(&mut dec)? as f64 + shift);
        }
        dec.finish()?;
        let z_hat = Tensor::new(z, z_shape)?;
        let phi_h = self.model.views.hyper_synthesis.forward(&self.params, &z_hat)?;
        let mut coder = LatentDecoder { segments: &seg.slices };
        self.model.em.run(&self.params, &phi_h, &mut coder)
    }

    /// Full decode: images cropped to the original size and clamped to `[0,1]`.
    pub fn decode(&self, bs: &Bitstream) -> Result<Vec<Tensor>> {
        let latents = self.decode_latents(bs)?;
        self.reconstruct(&latents, bs.height as usize, bs.width as usize)
    }

    pub fn reconstruct(&self, latents: &[Tensor], h: usize, w: usize) -> Result<Vec<Tensor>> {
        self.model
            .jd
            .forward(&self.params, latents)?
            .iter()
            .map(|x| Ok(x.crop2d(h, w)?.clamp(0.0, 1.0).detach()))
            .collect()
    }
}

fn dim_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Input(format!("dimension {n} too large")))
}

fn check_views(views: &[Tensor]) -> Result<(usize, usize)> {
    let first = views.first().ok_or_else(|| Error::Input("no views to encode".into()))?;
    if first.ndim() != 4 || first.dim(0) != 1 || first.dim(1) != 3 {
        return Err(Error::Input(format!("views must be [1,3,H,W], got {:?}", first.shape())));
    }
    if let Some(v) = views.iter().find(|v| v.shape() != first.shape()) {
        return Err(Error::Input(format!("view shapes differ: {:?} vs {:?}", first.shape(), v.shape())));
    }
    for v in views {
        check_pixels(v)?;
    }
    Ok((first.dim(2), first.dim(3)))
}

fn symbol(v: f64) -> Result<i64> {
    if !v.is_finite() || v.abs() > 1e15 {
        return Err(Error::NonFinite("latent symbol"));
    }
    Ok(v as i64)
}

struct LatentEncoder<'a> {
    y: &'a [f64],
    slice_channels: usize,
    out: Vec<Vec<u8>>,
    stats: Vec<SegmentStat>,
}

impl PhaseCoder for LatentEncoder<'_> {
    fn code(
        &mut self,
        slice: usize,
        phase: Phase,
        mu: &[f64],
        sigma: &[f64],
        positions: &[usize],
        plane: usize,
    ) -> Result<Vec<f64>> {
        let base = slice * self.slice_channels * plane;
        let mut enc = RangeEncoder::new();
        let mut est = 0.0;
        let mut values = Vec::with_capacity(self.slice_channels * positions.len());
        for c in 0..self.slice_channels {
            for &p in positions {
                let i = c * plane + p;
                let q = symbol((self.y[base + i] - mu[i]).round())?;
                let table = SymbolTable::gaussian(sigma[i])?;
                est += table.bits(q);
                table.encode(&mut enc, q);
                values.push(q as f64 + mu[i]);
            }
        }
        let bytes = enc.finish();
        self.stats.push(SegmentStat {
            view: 0,
            slice: Some(slice),
            phase: Some(phase),
            estimated_bits: est,
            actual_bits: 8 * bytes.len(),
        });
        self.out.push(bytes);
        Ok(values)
    }
}

struct LatentDecoder<'a> {
    segments: &'a [(Vec<u8>, Vec<u8>)],
}

impl PhaseCoder for LatentDecoder<'_> {
    fn code(
        &mut self,
        slice: usize,
        phase: Phase,
        mu: &[f64],
        sigma: &[f64],
        positions: &[usize],
        plane: usize,
    ) -> Result<Vec<f64>> {
        let (a, n) = &self.segments[slice];
        let bytes = match phase {
            Phase::Anchor => a,
            Phase::NonAnchor => n,
        };
        let channels = mu.len() / plane;
        let mut dec = RangeDecoder::new(bytes)?;
        let mut values = Vec::with_capacity(channels * positions.len());
        for c in 0..channels {
            for &p in positions {
                let i = c * plane + p;
                let q = SymbolTable::gaussian(sigma[i])?.decode(&mut dec)?;
                values.push(q as f64 + mu[i]);
            }
        }
        dec.finish()?;
        Ok(values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig { latent_channels: 4, num_slices: 2, window: 3, sigma_min: 0.11 }
    }

    fn views(k: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..k).map(|_| Tensor::uniform(&[1, 3, 40, 70], 0.0, 1.0, &mut rng)).collect()
    }

    #[test]
    fn roundtrip_matches_encoder_latents() {
        let codec = Codec::new(&tiny(), 3).unwrap();
        let x = views(2, 4);
        let enc = codec.encode(&x, 0).unwrap();
        let bytes = enc.bitstream.to_bytes().unwrap();
        let bs = Bitstream::from_bytes(&bytes).unwrap();
        let lat = codec.decode_latents(&bs).unwrap();
        for (a, b) in lat.iter().zip(&enc.latents) {
            assert_eq!(a.data(), b.data());
        }
        let imgs = codec.decode(&bs).unwrap();
        assert_eq!(imgs[0].shape(), &[1, 3, 40, 70]);
        assert!(imgs.iter().all(|t| t.data().iter().all(|v| (0.0..=1.0).contains(v))));
        assert_eq!(enc.segments.len(), 2 * (1 + 2 * 2));
    }

    #[test]
    fn save_load_preserves_output() {
        let codec = Codec::new(&tiny(), 5).unwrap();
        let mut buf = Vec::new();
        codec.save(&mut buf).unwrap();
        let back = Codec::load(buf.as_slice()).unwrap();
        assert_eq!(back.config(), codec.config());
        let x = views(1, 6);
        let a = codec.encode(&x, 1).unwrap().bitstream;
        let b = back.encode(&x, 1).unwrap().bitstream;
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_mismatched_model() {
        let codec = Codec::new(&tiny(), 1).unwrap();
        let enc = codec.encode(&views(1, 2), 0).unwrap();
        let other = Codec::new(&ModelConfig { latent_channels: 6, ..tiny() }, 1).unwrap();
        assert!(matches!(other.decode(&enc.bitstream), Err(Error::Config(_))));
    }

    #[test]
    fn train_forward_is_finite() {
        let (m, ps) = ParaHydra::new(&tiny(), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<Tensor> = (0..2).map(|_| Tensor::uniform(&[2, 3, 64, 64], 0.0, 1.0, &mut rng)).collect();
        let d: Vec<Dither> = (0..2)
            .map(|_| Dither {
                y: Tensor::uniform(&[2, 4, 4, 4], -0.5, 0.5, &mut rng),
                z: Tensor::uniform(&[2, 4, 1, 1], -0.5, 0.5, &mut rng),
            })
            .collect();
        let tps = ps.tracked();
        let out = m.forward_train(&tps, &x, &d, 1024.0).unwrap();
        assert!(out.loss.item().unwrap().is_finite());
        let g = out.loss.backward().unwrap();
        assert!(!g.is_empty());
    }
}
