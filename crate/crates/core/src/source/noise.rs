use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Corruptions the synthetic source applies to clean ray-cast geometry.
///
/// Fields marked per call are redrawn on every `infer`; per-frame fields
/// are fixed for a frame id across calls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    /// Per-pixel depth noise std (m), per call.
    pub depth_sigma: f64,
    /// Additional depth noise std per meter of depth, per call.
    pub depth_sigma_rel: f64,
    /// Log-std of the per-frame depth scale factor, fixed across calls.
    pub scale_sigma: f64,
    /// Fixed multiplicative scale applied on top of the drawn one.
    pub scale_bias: f64,
    /// Amplitude of the smooth per-frame warp field (m).
    pub warp_amplitude: f64,
    /// Wavelength of the warp and jitter fields (m).
    pub field_wavelength: f64,
    /// Amplitude of the smooth re-inference jitter field (m), per call.
    pub jitter_sigma: f64,
    /// Rigid perturbation of each non-anchor frame, per call (degrees).
    pub pose_sigma_rot_deg: f64,
    /// Rigid perturbation of each non-anchor frame, per call (m).
    pub pose_sigma_t: f64,
    /// Random tilt of each predicted normal (degrees), per call.
    pub normal_sigma_deg: f64,
    /// Std of the Gaussian noise added to each feature entry before
    /// renormalization, per call.
    pub feature_sigma: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self::zero()
    }
}

impl NoiseModel {
    pub fn zero() -> Self {
        Self {
            depth_sigma: 0.0,
            depth_sigma_rel: 0.0,
            scale_sigma: 0.0,
            scale_bias: 1.0,
            warp_amplitude: 0.0,
            field_wavelength: 1.5,
            jitter_sigma: 0.0,
            pose_sigma_rot_deg: 0.0,
            pose_sigma_t: 0.0,
            normal_sigma_deg: 0.0,
            feature_sigma: 0.0,
        }
    }

    /// The moderate setting used by the end-to-end checks.
    pub fn moderate() -> Self {
        Self {
            depth_sigma: 0.02,
            scale_sigma: 0.02,
            warp_amplitude: 0.005,
            jitter_sigma: 0.005,
            pose_sigma_rot_deg: 0.5,
            pose_sigma_t: 0.02,
            normal_sigma_deg: 5.0,
            ..Self::zero()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sigmas = [
            ("depth_sigma", self.depth_sigma),
            ("depth_sigma_rel", self.depth_sigma_rel),
            ("scale_sigma", self.scale_sigma),
            ("warp_amplitude", self.warp_amplitude),
            ("jitter_sigma", self.jitter_sigma),
            ("pose_sigma_rot_deg", self.pose_sigma_rot_deg),
            ("pose_sigma_t", self.pose_sigma_t),
            ("normal_sigma_deg", self.normal_sigma_deg),
            ("feature_sigma", self.feature_sigma),
        ];
        for (name, v) in sigmas {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!("noise `{name}` must be finite and >= 0, got {v}")));
            }
        }
        if !(self.scale_bias > 0.0 && self.scale_bias.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "noise `scale_bias` must be positive, got {}",
                self.scale_bias
            )));
        }
        if !(self.field_wavelength > 0.0 && self.field_wavelength.is_finite()) {
            return Err(Error::InvalidInput("noise `field_wavelength` must be positive".into()));
        }
        Ok(())
    }

    /// Scale factor of one frame: `scale_bias · exp(N(0, scale_sigma²))`.
    pub fn draw_scale<R: Rng>(&self, rng: &mut R) -> f64 {
        let z = gauss(rng);
        self.scale_bias * (self.scale_sigma * z).exp()
    }
}

/// Smooth random vector field: a sum of random plane waves whose
/// components each have standard deviation `amplitude` over space.
#[derive(Debug, Clone)]
pub struct SmoothField {
    waves: Vec<(Vector3<f64>, f64, Vector3<f64>)>,
}

pub const FIELD_WAVES: usize = 8;

impl SmoothField {
    pub fn random<R: Rng>(rng: &mut R, amplitude: f64, wavelength: f64) -> Self {
        if amplitude == 0.0 {
            return Self { waves: Vec::new() };
        }
        let k = std::f64::consts::TAU / wavelength;
        let a = amplitude * (2.0 / FIELD_WAVES as f64).sqrt();
        let waves = (0..FIELD_WAVES)
            .map(|_| {
                let dir = random_unit(rng);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let amp = Vector3::from_fn(|_, _| a * gauss(rng));
                (dir * k, phase, amp)
            })
            .collect();
        Self { waves }
    }

    pub fn at(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.waves
            .iter()
            .map(|(k, phase, amp)| amp * (k.dot(p) + phase).sin())
            .sum()
    }
}

pub(crate) fn gauss<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn random_unit<R: Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::from_fn(|_, _| gauss(rng));
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}
