//! Synthetic multi-view scenes: horizontally shifted crops of one textured
//! image, optionally with noise-filled occluders.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rectangle of view `view` replaced by uniform noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Occlusion {
    pub view: usize,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub views: usize,
    pub height: usize,
    pub width: usize,
    /// Column shift between consecutive views.
    pub disparity: usize,
    pub occlusions: Vec<Occlusion>,
}

impl SceneSpec {
    pub fn new(views: usize, height: usize, width: usize, disparity: usize) -> Self {
        SceneSpec { views, height, width, disparity, occlusions: Vec::new() }
    }

    fn validate(&self) -> Result<()> {
        if self.views == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Input("scene needs at least one non-empty view".into()));
        }
        if 4 * self.disparity >= self.width {
            return Err(Error::Input(format!(
                "disparity {} must be below a quarter of the width {}",
                self.disparity, self.width
            )));
        }
        for o in &self.occlusions {
            if o.view >= self.views || o.top + o.height > self.height || o.left + o.width > self.width {
                return Err(Error::Input(format!("occlusion {o:?} lies outside the views")));
            }
        }
        Ok(())
    }
}

/// Smooth colour texture of `h x w` built from random plane waves and
/// flat-coloured rectangles, values in `[0,1]`.
fn texture(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    struct Wave {
        fx: f64,
        fy: f64,
        phase: f64,
        amp: [f64; 3],
    }
    let waves: Vec<Wave> = (0..6)
        .map(|_| Wave {
            fx: rng.random_range(0.02..0.35),
            fy: rng.random_range(-0.2..0.2),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            amp: [rng.random_range(0.0..0.12), rng.random_range(0.0..0.12), rng.random_range(0.0..0.12)],
        })
        .collect();
    let rects: Vec<(usize, usize, usize, usize, [f64; 3])> = (0..8)
        .map(|_| {
            let rh = rng.random_range(2..=h.max(3) / 2 + 1);
            let rw = rng.random_range(2..=w.max(3) / 4 + 1);
            let top = rng.random_range(0..h);
            let left = rng.random_range(0..w);
            (
                top,
                left,
                rh,
                rw,
                [rng.random_range(-0.25..0.25), rng.random_range(-0.25..0.25), rng.random_range(-0.25..0.25)],
            )
        })
        .collect();
    let n = h * w;
    let mut img = vec![0.5; 3 * n];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut v = 0.5;
                for wv in &waves {
                    v += wv.amp[c] * (wv.fx * x as f64 + wv.fy * y as f64 + wv.phase).sin();
                }
                for &(t, l, rh, rw, col) in &rects {
                    if (t..t + rh).contains(&y) && (l..l + rw).contains(&x) {
                        v += col[c];
                    }
                }
                img[c * n + y * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Views of one scene, each `[1,3,H,W]`; view `k` is the base texture
/// shifted left by `k * disparity` columns. Deterministic per seed.
pub fn gen_synthetic_views(seed: u64, spec: &SceneSpec) -> Result<Vec<Tensor>> {
    spec.validate()?;
    let (h, w, d) = (spec.height, spec.width, spec.disparity);
    let base_w = w + (spec.views - 1) * d;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = texture(&mut rng, h, base_w);
    let mut views = Vec::with_capacity(spec.views);
    for k in 0..spec.views {
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in 0..h {
                let row = (c * h + y) * base_w + k * d;
                data.extend_from_slice(&base[row..row + w]);
            }
        }
        for o in spec.occlusions.iter().filter(|o| o.view == k) {
            for c in 0..3 {
                for y in o.top..o.top + o.height {
                    for x in o.left..o.left + o.width {
                        data[(c * h + y) * w + x] = rng.random_range(0.0..1.0);
                    }
                }
            }
        }
        views.push(Tensor::new(data, &[1, 3, h, w])?);
    }
    Ok(views)
}

/// `count` scenes with per-scene seeds derived from `seed`.
pub fn gen_dataset(seed: u64, count: usize, spec: &SceneSpec) -> Result<Vec<Vec<Tensor>>> {
    (0..count as u64).map(|i| gen_synthetic_views(seed.wrapping_mul(1_000_003).wrapping_add(i), spec)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_disparity_gives_identical_views() {
        let v = gen_synthetic_views(1, &SceneSpec::new(3, 16, 20, 0)).unwrap();
        assert_eq!(v[0].data(), v[1].data());
        assert_eq!(v[0].data(), v[2].data());
        assert!(v[0].data().iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn deterministic_and_shifted() {
        let spec = SceneSpec::new(2, 8, 32, 3);
        let a = gen_synthetic_views(9, &spec).unwrap();
        let b = gen_synthetic_views(9, &spec).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.data() == y.data()));
        // Column x + 3 of view 0 is column x of view 1.
        let (v0, v1) = (a[0].data(), a[1].data());
        for y in 0..8 {
            for x in 0..29 {
                assert_eq!(v0[y * 32 + x + 3], v1[y * 32 + x]);
            }
        }
    }

    #[test]
    fn geometry_errors() {
        assert!(gen_synthetic_views(0, &SceneSpec::new(2, 8, 32, 8)).is_err());
        let mut s = SceneSpec::new(2, 8, 32, 1);
        s.occlusions.push(Occlusion { view: 2, top: 0, left: 0, height: 1, width: 1 });
        assert!(gen_synthetic_views(0, &s).is_err());
    }
}
