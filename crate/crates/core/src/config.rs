use crate::error::{Error, Result};

/// Lower bound added to every predicted scale.
pub const SIGMA_MIN: f64 = 0.11;

/// Rate-distortion multipliers of the four standard operating points.
pub const LAMBDAS: [f64; 4] = [1024.0, 2048.0, 4096.0, 8192.0];

/// Spatial alignment required of codec inputs (total downsampling of the
/// hyper path).
pub const PAD_MULTIPLE: usize = 64;

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    /// Channels of the latent `y`, the hyper-latent `z` and the decoder trunk.
    pub latent_channels: usize,
    /// Number of channel slices of `y`.
    pub num_slices: usize,
    /// Side of the local-context attention window.
    pub window: usize,
    pub sigma_min: f64,
}

impl ModelConfig {
    /// 192 channels in 8 slices of 24 with a 5x5 window.
    pub fn full() -> Self {
        ModelConfig { latent_channels: 192, num_slices: 8, window: 5, sigma_min: SIGMA_MIN }
    }

    /// Reduced widths for single-core training runs.
    pub fn desk() -> Self {
        ModelConfig { latent_channels: 16, num_slices: 4, window: 5, sigma_min: SIGMA_MIN }
    }

    pub fn slice_channels(&self) -> usize {
        self.latent_channels / self.num_slices
    }

    /// Channels of the hyper-decoder output.
    pub fn hyper_channels(&self) -> usize {
        2 * self.latent_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_slices == 0 || !self.latent_channels.is_multiple_of(self.num_slices) {
            return Err(Error::Config(format!(
                "{} latent channels do not split into {} slices",
                self.latent_channels, self.num_slices
            )));
        }
        if self.latent_channels < 2 {
            return Err(Error::Config("need at least 2 latent channels".into()));
        }
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(Error::Config(format!("window must be odd and >= 3, got {}", self.window)));
        }
        if !(self.sigma_min > 0.0) {
            return Err(Error::Config("sigma_min must be positive".into()));
        }
        Ok(())
    }

    pub(crate) fn to_values(self) -> Vec<f64> {
        vec![self.latent_channels as f64, self.num_slices as f64, self.window as f64, self.sigma_min]
    }

    pub(crate) fn from_values(v: &[f64]) -> Result<Self> {
        let as_count = |x: f64| -> Result<usize> {
            if x >= 1.0 && x.fract() == 0.0 && x < 1e6 {
                Ok(x as usize)
            } else {
                Err(Error::Format(format!("bad configuration value {x}")))
            }
        };
        match v {
            &[n, l, w, s] => {
                let cfg = ModelConfig {
                    latent_channels: as_count(n)?,
                    num_slices: as_count(l)?,
                    window: as_count(w)?,
                    sigma_min: s,
                };
                cfg.validate()?;
                Ok(cfg)
            }
            _ => Err(Error::Format(format!("configuration record has {} values", v.len()))),
        }
    }
}

/// Index of `lambda` among [`LAMBDAS`], or 255 for a custom value.
pub fn lambda_index(lambda: f64) -> u8 {
    LAMBDAS.iter().position(|&l| l == lambda).map_or(255, |i| i as u8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        let f = ModelConfig::full();
        f.validate().unwrap();
        assert_eq!(f.slice_channels(), 24);
        ModelConfig::desk().validate().unwrap();
        assert_eq!(ModelConfig::from_values(&f.to_values()).unwrap(), f);
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut c = ModelConfig::full();
        c.num_slices = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::full();
        c.window = 4;
        assert!(c.validate().is_err());
    }

    #[test]
    fn lambda_indices() {
        assert_eq!(lambda_index(1024.0), 0);
        assert_eq!(lambda_index(8192.0), 3);
        assert_eq!(lambda_index(100.0), 255);
    }
}
