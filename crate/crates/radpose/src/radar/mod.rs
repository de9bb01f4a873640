//! Synthetic FMCW radar scene model.
//!
//! Sensor frame convention: radar at the origin, boresight along +y, up
//! along +z, x completing a right-handed frame. Ranges in meters, angles in
//! radians, velocities in m/s.

mod geometry;
mod motion;
mod render;

pub use geometry::{
    angles_from_phase, cartesian_to_spherical, range_from_beat, spherical_to_cartesian,
    velocity_from_phase, SPEED_OF_LIGHT,
};
pub use motion::{synth_skeleton_sequence, MotionPreset, SubjectShape};
pub use render::{render_pointcloud, render_pointcloud_traced, PointOrigin, FRUSTUM_MAX_ANGLE, FRUSTUM_MIN_RANGE};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RadarError {
    #[error("beat frequency must be non-negative and finite, got {0}")]
    BadBeatFrequency(f64),
    #[error("angle argument {value} outside the resolvable range of asin")]
    UnresolvableAngle { value: f64 },
    #[error("elevation at +-pi/2 makes azimuth unresolvable")]
    SingularElevation,
    #[error("spherical input outside domain: {0}")]
    SphericalDomain(String),
    #[error("point is not in front of the sensor (y must be positive)")]
    BehindSensor,
    #[error("zero range is degenerate")]
    DegenerateRange,
    #[error("wavelength {wavelength} inconsistent with carrier {carrier} (>1% off c/f)")]
    WavelengthMismatch { wavelength: f64, carrier: f64 },
    #[error("invalid radar/noise parameter: {0}")]
    InvalidParameter(String),
}

/// FMCW radar operating parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadarConfig {
    /// Carrier frequency f in Hz.
    pub carrier_hz: f64,
    /// Sweep bandwidth B in Hz.
    pub bandwidth_hz: f64,
    /// Chirp duration T_c in seconds.
    pub chirp_secs: f64,
    /// Carrier wavelength in meters; must agree with c / carrier within 1%.
    pub wavelength_m: f64,
    /// Maximum usable range in meters.
    pub max_range_m: f64,
}

impl RadarConfig {
    pub fn new(
        carrier_hz: f64,
        bandwidth_hz: f64,
        chirp_secs: f64,
        wavelength_m: f64,
        max_range_m: f64,
    ) -> Result<Self, RadarError> {
        let cfg = Self { carrier_hz, bandwidth_hz, chirp_secs, wavelength_m, max_range_m };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), RadarError> {
        for (name, v) in [
            ("carrier_hz", self.carrier_hz),
            ("bandwidth_hz", self.bandwidth_hz),
            ("chirp_secs", self.chirp_secs),
            ("wavelength_m", self.wavelength_m),
            ("max_range_m", self.max_range_m),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(RadarError::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        let nominal = SPEED_OF_LIGHT / self.carrier_hz;
        if (self.wavelength_m - nominal).abs() > 0.01 * nominal {
            return Err(RadarError::WavelengthMismatch {
                wavelength: self.wavelength_m,
                carrier: self.carrier_hz,
            });
        }
        Ok(())
    }
}

impl Default for RadarConfig {
    /// 77 GHz automotive-style defaults: 4 GHz sweep, 100 us chirp, 8 m range.
    fn default() -> Self {
        let carrier = 77.0e9;
        Self {
            carrier_hz: carrier,
            bandwidth_hz: 4.0e9,
            chirp_secs: 1.0e-4,
            wavelength_m: SPEED_OF_LIGHT / carrier,
            max_range_m: 8.0,
        }
    }
}

/// Measurement corruption model applied by the renderer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Isotropic Gaussian dispersion of reflection points, meters.
    pub dispersion_sigma: f64,
    /// Probability that a limb segment returns no points in a frame.
    pub segment_dropout_prob: f64,
    /// Poisson rate of spurious (ghost) points per frame.
    pub ghost_rate: f64,
    /// Reflection points sampled per visible limb.
    pub points_per_limb: usize,
}

impl NoiseModel {
    pub fn validate(&self) -> Result<(), RadarError> {
        if !(self.dispersion_sigma.is_finite() && self.dispersion_sigma >= 0.0) {
            return Err(RadarError::InvalidParameter(format!(
                "dispersion_sigma must be >= 0, got {}",
                self.dispersion_sigma
            )));
        }
        if !(0.0..=1.0).contains(&self.segment_dropout_prob) {
            return Err(RadarError::InvalidParameter(format!(
                "segment_dropout_prob must be in [0,1], got {}",
                self.segment_dropout_prob
            )));
        }
        if !(self.ghost_rate.is_finite() && self.ghost_rate >= 0.0) {
            return Err(RadarError::InvalidParameter(format!(
                "ghost_rate must be >= 0, got {}",
                self.ghost_rate
            )));
        }
        Ok(())
    }

    /// Noise-free configuration: exact on-skeleton points, nothing spurious.
    pub fn none() -> Self {
        Self { dispersion_sigma: 0.0, segment_dropout_prob: 0.0, ghost_rate: 0.0, points_per_limb: 8 }
    }
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self { dispersion_sigma: 0.05, segment_dropout_prob: 0.1, ghost_rate: 5.0, points_per_limb: 8 }
    }
}

/// One detected reflection: position plus radial velocity and return strength.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadarPoint {
    pub position: [f64; 3],
    pub radial_velocity: f64,
    pub energy: f64,
    pub amplitude: f64,
}

impl RadarPoint {
    /// Six-channel feature layout used across the pipeline: x, y, z, v, E, A.
    pub fn features(&self) -> [f64; 6] {
        [
            self.position[0],
            self.position[1],
            self.position[2],
            self.radial_velocity,
            self.energy,
            self.amplitude,
        ]
    }
}

/// A rendered radar frame. `subject_visible` is false when the subject left
/// the sensing frustum, in which case the frame carries no points at all.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudFrame {
    pub points: Vec<RadarPoint>,
    pub timestamp: f64,
    pub subject_visible: bool,
}
