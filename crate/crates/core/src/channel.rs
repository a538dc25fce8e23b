//! Block-fading uplink: Rayleigh gains, imperfect channel estimates and the
//! analog superposition received by the server.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

pub type ComplexGain = Complex64;

/// Estimates with modulus below this are treated as a deep fade.
pub const DEFAULT_DEEP_FADE_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FadingMode {
    Fading,
    NoFading,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsiMode {
    Perfect,
    Imperfect,
    /// The estimate is replaced by the mean modulus of the fading law.
    MeanCsi,
}

impl FromStr for FadingMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fading" => Ok(Self::Fading),
            "no_fading" => Ok(Self::NoFading),
            other => Err(format!(
                "unknown channel mode `{other}` (fading | no_fading)"
            )),
        }
    }
}

impl fmt::Display for FadingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fading => "fading",
            Self::NoFading => "no_fading",
        })
    }
}

impl FromStr for CsiMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "perfect" => Ok(Self::Perfect),
            "imperfect" => Ok(Self::Imperfect),
            "mean_csi" => Ok(Self::MeanCsi),
            other => Err(format!(
                "unknown csi mode `{other}` (perfect | imperfect | mean_csi)"
            )),
        }
    }
}

impl fmt::Display for CsiMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Perfect => "perfect",
            Self::Imperfect => "imperfect",
            Self::MeanCsi => "mean_csi",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelConfig {
    /// Fading variance: `h ~ CN(0, sigma_h2)`.
    pub sigma_h2: f64,
    /// Estimation-error variance: `delta ~ CN(0, sigma_est2)`.
    pub sigma_est2: f64,
    /// Complex AWGN variance per received symbol.
    pub sigma_c2: f64,
    pub mode: FadingMode,
    pub csi: CsiMode,
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma_h2", self.sigma_h2),
            ("sigma_est2", self.sigma_est2),
            ("sigma_c2", self.sigma_c2),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::arg(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// One client's channel in one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelDraw {
    pub h: ComplexGain,
    pub delta: ComplexGain,
    pub h_hat: ComplexGain,
}

impl ChannelDraw {
    pub fn perfect(h: ComplexGain) -> Self {
        Self {
            h,
            delta: ComplexGain::new(0.0, 0.0),
            h_hat: h,
        }
    }

    /// Gain seen by the server relative to what the client inverted, `h / h_hat`.
    pub fn ratio(&self) -> ComplexGain {
        self.h / self.h_hat
    }
}

/// Rayleigh gain `h ~ CN(0, sigma_h2)` from one Box–Muller pair.
pub fn sample_fading<R: Rng + ?Sized>(cfg: &ChannelConfig, rng: &mut R) -> ComplexGain {
    rng::complex_normal(rng, cfg.sigma_h2)
}

/// Mean modulus of a `CN(0, sigma_h2)` gain: `sigma_h * sqrt(pi) / 2`.
pub fn rayleigh_mean_modulus(sigma_h2: f64) -> f64 {
    sigma_h2.sqrt() * std::f64::consts::PI.sqrt() / 2.0
}

pub fn estimate_csi<R: Rng + ?Sized>(
    h: ComplexGain,
    cfg: &ChannelConfig,
    rng: &mut R,
) -> ChannelDraw {
    match cfg.csi {
        CsiMode::Perfect => ChannelDraw::perfect(h),
        CsiMode::Imperfect => {
            let delta = rng::complex_normal(rng, cfg.sigma_est2);
            ChannelDraw {
                h,
                delta,
                h_hat: h + delta,
            }
        }
        CsiMode::MeanCsi => {
            let h_hat = ComplexGain::new(rayleigh_mean_modulus(cfg.sigma_h2), 0.0);
            ChannelDraw {
                h,
                delta: h_hat - h,
                h_hat,
            }
        }
    }
}

/// Draws the channel of one client for one round. In `NoFading` mode the
/// gain and its estimate are both exactly one.
pub fn draw_channel<R: Rng + ?Sized>(
    cfg: &ChannelConfig,
    fading_rng: &mut R,
    estimation_rng: &mut R,
) -> ChannelDraw {
    match cfg.mode {
        FadingMode::NoFading => ChannelDraw::perfect(ComplexGain::new(1.0, 0.0)),
        FadingMode::Fading => {
            let h = sample_fading(cfg, fading_rng);
            estimate_csi(h, cfg, estimation_rng)
        }
    }
}

/// `y = sum_i h_i z_i + w` with `w ~ CN(0, sigma_c2 I_d)`.
pub fn mac_superpose<R: Rng + ?Sized>(
    signals: &[(ComplexGain, &[Complex64])],
    sigma_c2: f64,
    d: usize,
    rng: &mut R,
) -> Result<Vec<Complex64>> {
    let mut y = vec![Complex64::new(0.0, 0.0); d];
    for (i, (h, z)) in signals.iter().enumerate() {
        if z.len() != d {
            return Err(Error::arg(format!(
                "signal {i} has length {}, expected {d}",
                z.len()
            )));
        }
        for (yj, zj) in y.iter_mut().zip(z.iter()) {
            *yj += h * zj;
        }
    }
    if sigma_c2 > 0.0 {
        for yj in &mut y {
            *yj += rng::complex_normal(rng, sigma_c2);
        }
    }
    Ok(y)
}

/// Noise variance giving `snr_db` between per-symbol power `P / d` and the
/// per-symbol noise variance.
pub fn calibrate_noise(power: f64, snr_db: f64, d: usize) -> Result<f64> {
    if d == 0 {
        return Err(Error::arg("model dimension must be at least 1"));
    }
    if !(power > 0.0) {
        return Err(Error::arg(format!(
            "power budget must be positive, got {power}"
        )));
    }
    Ok((power / d as f64) / 10f64.powf(snr_db / 10.0))
}
