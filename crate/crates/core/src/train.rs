//! Full-batch Adam training of the rate-distortion objective.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Codec, Dither};
use crate::nn::ParamId;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lambda: 1024.0, steps: 500, learning_rate: 1e-3, seed: 0 }
    }
}

/// One line of the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogEntry {
    pub step: usize,
    pub distortion: f64,
    pub rate_bpp: f64,
    pub loss: f64,
}

impl LogEntry {
    pub const CSV_HEADER: &'static str = "step,distortion,rate_bpp,loss";

    pub fn csv(&self) -> String {
        format!("{},{},{},{}", self.step, self.distortion, self.rate_bpp, self.loss)
    }
}

/// Adam with the usual defaults (beta1 0.9, beta2 0.999, eps 1e-8).
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    t: i32,
    state: Vec<(ParamId, Vec<f64>, Vec<f64>)>,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(lr: f64, params: impl IntoIterator<Item = (ParamId, usize)>) -> Self {
        let state = params.into_iter().map(|(id, n)| (id, vec![0.0; n], vec![0.0; n])).collect();
        Adam { lr, t: 0, state }
    }

    /// Applies one update given the gradient of every tracked parameter.
    pub fn step(&mut self, values: &mut [Vec<f64>], grads: &[Option<&[f64]>]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for ((_, m, v), (x, g)) in self.state.iter_mut().zip(values.iter_mut().zip(grads)) {
            let Some(g) = g else { continue };
            for i in 0..x.len() {
                m[i] = Self::B1 * m[i] + (1.0 - Self::B1) * g[i];
                v[i] = Self::B2 * v[i] + (1.0 - Self::B2) * g[i] * g[i];
                x[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Stacks scene `s`, view `k` into one `[S,3,H,W]` tensor per view.
fn stack_views(scenes: &[Vec<Tensor>]) -> Result<Vec<Tensor>> {
    let k = scenes.first().map(Vec::len).ok_or_else(|| Error::Input("empty training set".into()))?;
    if k == 0 || scenes.iter().any(|s| s.len() != k) {
        return Err(Error::Input("every scene needs the same number of views".into()));
    }
    (0..k).map(|v| Tensor::concat(&scenes.iter().map(|s| &s[v]).collect::<Vec<_>>(), 0)).collect()
}

/// Fixed noise per (seed, scene, view); the same sample always sees the
/// same perturbation, so a zero learning rate gives a constant loss.
fn dither(seed: u64, scenes: usize, views: usize, y: &[usize], z: &[usize]) -> Vec<Dither> {
    (0..views)
        .map(|k| {
            let per_scene: Vec<(Tensor, Tensor)> = (0..scenes)
                .map(|s| {
                    let mut rng = ChaCha8Rng::seed_from_u64(
                        seed ^ ((s as u64) << 32 | k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                    );
                    (Tensor::uniform(&y[1..], -0.5, 0.5, &mut rng), Tensor::uniform(&z[1..], -0.5, 0.5, &mut rng))
                })
                .collect();
            let cat = |f: fn(&(Tensor, Tensor)) -> &Tensor| {
                let parts: Vec<Tensor> = per_scene
                    .iter()
                    .map(|p| {
                        let t = f(p);
                        let mut shape = vec![1];
                        shape.extend_from_slice(t.shape());
                        t.reshape(&shape).expect("same size")
                    })
                    .collect();
                Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0).expect("same shapes")
            };
            Dither { y: cat(|p| &p.0), z: cat(|p| &p.1) }
        })
        .collect()
}

/// Trains `codec` in place on `scenes` (each a list of `[1,3,H,W]` views,
/// `H` and `W` multiples of 64). `on_step` sees every log entry as it is
/// produced; the loss of step `s` is measured before its update.
pub fn train(
    codec: &mut Codec,
    scenes: &[Vec<Tensor>],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LogEntry) -> Result<()>,
) -> Result<Vec<LogEntry>> {
    if !(cfg.learning_rate >= 0.0) {
        return Err(Error::Config(format!("learning rate {} is negative", cfg.learning_rate)));
    }
    let views = stack_views(scenes)?;
    let (b, h, w) = (views[0].dim(0), views[0].dim(2), views[0].dim(3));
    if h % 64 != 0 || w % 64 != 0 {
        return Err(Error::Input(format!("training views must be multiples of 64, got {h}x{w}")));
    }
    let (ys, zs) = codec.model.latent_shapes(h, w);
    let noise = dither(cfg.seed, b, views.len(), &ys, &zs);
    let ids: Vec<ParamId> = codec.params.ids().filter(|&id| codec.params.is_trainable(id)).collect();
    let mut adam = Adam::new(cfg.learning_rate, ids.iter().map(|&id| (id, codec.params.get(id).numel())));
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let tracked = codec.params.tracked();
        let out = codec.model.forward_train(&tracked, &views, &noise, cfg.lambda)?;
        let entry = LogEntry {
            step,
            distortion: out.distortion.item()?,
            rate_bpp: out.rate_bpp.item()?,
            loss: out.loss.item()?,
        };
        if !entry.loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss {} (distortion {}, rate {})", entry.loss, entry.distortion, entry.rate_bpp),
            });
        }
        on_step(&entry)?;
        log.push(entry);
        if cfg.learning_rate == 0.0 {
            continue;
        }
        let grads = out.loss.backward()?;
        let params: Vec<Tensor> = ids.iter().map(|&id| tracked.get(id).clone()).collect();
        let g: Vec<Option<&[f64]>> = params.iter().map(|p| grads.get_slice(p)).collect();
        let mut values: Vec<Vec<f64>> = ids.iter().map(|&id| codec.params.get(id).to_vec()).collect();
        adam.step(&mut values, &g);
        for (&id, v) in ids.iter().zip(values) {
            codec.params.set(id, v)?;
        }
    }
    Ok(log)
}

/// Writes a loss log as CSV with a header line.
pub fn write_log<W: Write>(mut w: W, log: &[LogEntry]) -> Result<()> {
    writeln!(w, "{}", LogEntry::CSV_HEADER)?;
    for e in log {
        writeln!(w, "{}", e.csv())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::synthetic::{gen_dataset, SceneSpec};

    fn tiny() -> ModelConfig {
        ModelConfig { latent_channels: 4, num_slices: 2, window: 3, sigma_min: 0.11 }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut a = Adam::new(0.1, [(crate::nn::ParamBuilder::new(0).zeros("x", &[2]), 2)]);
        let mut v = vec![vec![1.0, -1.0]];
        a.step(&mut v, &[Some(&[3.0, -0.5])]);
        assert!((v[0][0] - 0.9).abs() < 1e-7);
        assert!((v[0][1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn zero_learning_rate_keeps_loss() {
        let data = gen_dataset(1, 2, &SceneSpec::new(2, 64, 64, 2)).unwrap();
        let mut codec = Codec::new(&tiny(), 1).unwrap();
        let cfg = TrainConfig { steps: 3, learning_rate: 0.0, ..Default::default() };
        let log = train(&mut codec, &data, &cfg, |_| Ok(())).unwrap();
        assert!(log.iter().all(|e| e.loss == log[0].loss));
    }

    #[test]
    fn same_seed_same_log() {
        let data = gen_dataset(2, 2, &SceneSpec::new(2, 64, 64, 2)).unwrap();
        let cfg = TrainConfig { steps: 3, ..Default::default() };
        let run = || {
            let mut codec = Codec::new(&tiny(), 4).unwrap();
            train(&mut codec, &data, &cfg, |_| Ok(())).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert!(a[2].loss < a[0].loss);
        let mut csv = Vec::new();
        write_log(&mut csv, &a).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("step,distortion,rate_bpp,loss\n1,"));
    }
}
