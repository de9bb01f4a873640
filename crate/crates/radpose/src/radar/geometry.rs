//! FMCW observable-to-coordinate conversions.
//!
//! Range from beat frequency:      R = c * f * T_c / (2 * B)
//! Velocity from phase rate:       v = lambda * omega / (4 * pi * T_c)
//! Angles from antenna phase:      phi = asin(omega_z / pi),
//!                                 theta = asin(omega_x / (cos(phi) * pi))
//! Cartesian from spherical:       x = R cos(phi) sin(theta), z = R sin(phi),
//!                                 y = +sqrt(R^2 - x^2 - z^2)
//!
//! Elevation phi is resolved before azimuth theta; theta is measured in the
//! elevation-corrected plane, which is why its asin argument carries the
//! 1/cos(phi) factor. y takes the positive square root: the sensor only sees
//! the half space in front of it.

use super::{RadarConfig, RadarError};
use std::f64::consts::{FRAC_PI_2, PI};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Target range for a measured beat frequency in Hz.
pub fn range_from_beat(beat_hz: f64, cfg: &RadarConfig) -> Result<f64, RadarError> {
    if !(beat_hz.is_finite() && beat_hz >= 0.0) {
        return Err(RadarError::BadBeatFrequency(beat_hz));
    }
    Ok(SPEED_OF_LIGHT * beat_hz * cfg.chirp_secs / (2.0 * cfg.bandwidth_hz))
}

/// Radial velocity for a chirp-to-chirp phase rate omega in rad/s.
pub fn velocity_from_phase(omega: f64, cfg: &RadarConfig) -> Result<f64, RadarError> {
    if !omega.is_finite() {
        return Err(RadarError::InvalidParameter(format!("phase rate must be finite, got {omega}")));
    }
    Ok(cfg.wavelength_m * omega / (4.0 * PI * cfg.chirp_secs))
}

/// (azimuth theta, elevation phi) from per-axis antenna phase differences.
pub fn angles_from_phase(omega_x: f64, omega_z: f64) -> Result<(f64, f64), RadarError> {
    let zs = omega_z / PI;
    if !zs.is_finite() || zs.abs() > 1.0 {
        return Err(RadarError::UnresolvableAngle { value: zs });
    }
    let phi = zs.asin();
    let cos_phi = phi.cos();
    // asin(1) gives exactly pi/2; cos collapses to ~0 and azimuth is lost.
    if cos_phi.abs() < 1e-12 {
        return Err(RadarError::SingularElevation);
    }
    let xs = omega_x / (cos_phi * PI);
    if !xs.is_finite() || xs.abs() > 1.0 {
        return Err(RadarError::UnresolvableAngle { value: xs });
    }
    Ok((xs.asin(), phi))
}

/// Sensor-frame cartesian point for (range, azimuth, elevation).
pub fn spherical_to_cartesian(range: f64, theta: f64, phi: f64) -> Result<[f64; 3], RadarError> {
    if !(range.is_finite() && range >= 0.0) {
        return Err(RadarError::SphericalDomain(format!("range must be >= 0, got {range}")));
    }
    if !(theta.is_finite() && theta.abs() < FRAC_PI_2) || !(phi.is_finite() && phi.abs() < FRAC_PI_2) {
        return Err(RadarError::SphericalDomain(format!(
            "angles must lie strictly inside (-pi/2, pi/2), got theta={theta}, phi={phi}"
        )));
    }
    let x = range * phi.cos() * theta.sin();
    let z = range * phi.sin();
    let y_sq = range * range - x * x - z * z;
    // In-domain y_sq is mathematically >= 0; tolerate rounding at the edge.
    let tol = 1e-9 * (range * range).max(1.0);
    if y_sq < -tol {
        return Err(RadarError::SphericalDomain(format!("negative depth term {y_sq}")));
    }
    Ok([x, y_sq.max(0.0).sqrt(), z])
}

/// (range, azimuth, elevation) of a cartesian point in front of the sensor.
pub fn cartesian_to_spherical(p: [f64; 3]) -> Result<(f64, f64, f64), RadarError> {
    let [x, y, z] = p;
    if !(x.is_finite() && y.is_finite() && z.is_finite()) {
        return Err(RadarError::SphericalDomain("non-finite coordinate".into()));
    }
    if y <= 0.0 {
        return Err(RadarError::BehindSensor);
    }
    let range = (x * x + y * y + z * z).sqrt();
    if range == 0.0 {
        return Err(RadarError::DegenerateRange);
    }
    let phi = (z / range).clamp(-1.0, 1.0).asin();
    let cos_phi = phi.cos();
    if cos_phi.abs() < 1e-12 {
        return Err(RadarError::SingularElevation);
    }
    let theta = (x / (range * cos_phi)).clamp(-1.0, 1.0).asin();
    Ok((range, theta, phi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_4, FRAC_PI_6};

    fn test_cfg() -> RadarConfig {
        RadarConfig::default()
    }

    #[test]
    fn range_fixture_hand_evaluated() {
        // c * 1e6 * 1e-4 / (2 * 4e9) with c = 299792458 exactly: 3.747405725 m.
        let cfg = RadarConfig::new(77.0e9, 4.0e9, 1.0e-4, SPEED_OF_LIGHT / 77.0e9, 8.0).unwrap();
        let r = range_from_beat(1.0e6, &cfg).unwrap();
        assert!((r - 3.747405725).abs() < 1e-9);
    }

    #[test]
    fn range_inverts_synthetic_beat() {
        let cfg = test_cfg();
        let r0 = 3.2;
        let beat = 2.0 * cfg.bandwidth_hz * r0 / (SPEED_OF_LIGHT * cfg.chirp_secs);
        assert!((range_from_beat(beat, &cfg).unwrap() - r0).abs() < 1e-12);
    }

    #[test]
    fn range_rejects_negative_beat() {
        assert!(range_from_beat(-1.0, &test_cfg()).is_err());
    }

    #[test]
    fn velocity_fixture_hand_evaluated() {
        // lambda=0.004, T_c=1e-4, omega=pi: v = 0.004*pi / (4*pi*1e-4) = 10 m/s.
        let carrier = SPEED_OF_LIGHT / 0.004;
        let cfg = RadarConfig::new(carrier, 4.0e9, 1.0e-4, 0.004, 8.0).unwrap();
        let v = velocity_from_phase(std::f64::consts::PI, &cfg).unwrap();
        assert!((v - 10.0).abs() < 1e-12);
    }

    #[test]
    fn angles_fixture_hand_evaluated() {
        // omega_z = pi/2 -> phi = asin(1/2) = pi/6; omega_x chosen so theta = pi/6 too.
        let omega_x = std::f64::consts::PI * FRAC_PI_6.cos() * 0.5;
        let (theta, phi) = angles_from_phase(omega_x, std::f64::consts::PI / 2.0).unwrap();
        assert!((phi - FRAC_PI_6).abs() < 1e-12);
        assert!((theta - FRAC_PI_6).abs() < 1e-12);
    }

    #[test]
    fn elevation_at_edge_is_singular() {
        let err = angles_from_phase(0.0, std::f64::consts::PI).unwrap_err();
        assert!(matches!(err, RadarError::SingularElevation));
        assert!(matches!(
            angles_from_phase(0.0, 4.0).unwrap_err(),
            RadarError::UnresolvableAngle { .. }
        ));
    }

    #[test]
    fn spherical_fixture_hand_evaluated() {
        // (R, theta, phi) = (2, pi/6, pi/4): x = sqrt(2)/2, z = sqrt(2), y = sqrt(1.5).
        let [x, y, z] = spherical_to_cartesian(2.0, FRAC_PI_6, FRAC_PI_4).unwrap();
        assert!((x - 0.5f64.sqrt()).abs() < 1e-9);
        assert!((y - 1.5f64.sqrt()).abs() < 1e-9);
        assert!((z - 2.0f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn spherical_preserves_norm_and_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..2000 {
            let r = rng.random_range(0.05..8.0);
            let theta = rng.random_range(-1.4..1.4);
            let phi = rng.random_range(-1.4..1.4);
            let p = spherical_to_cartesian(r, theta, phi).unwrap();
            let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((norm - r).abs() <= 1e-9 * r.max(1.0));
            let (r2, t2, p2) = cartesian_to_spherical(p).unwrap();
            assert!((r2 - r).abs() <= 1e-9);
            assert!((t2 - theta).abs() <= 1e-9);
            assert!((p2 - phi).abs() <= 1e-9);
        }
    }

    #[test]
    fn cartesian_rejects_rear_halfspace() {
        assert!(matches!(
            cartesian_to_spherical([0.3, -2.0, 0.1]).unwrap_err(),
            RadarError::BehindSensor
        ));
        assert!(matches!(
            cartesian_to_spherical([0.3, 0.0, 0.1]).unwrap_err(),
            RadarError::BehindSensor
        ));
    }

    #[test]
    fn config_checks_wavelength_consistency() {
        assert!(matches!(
            RadarConfig::new(77.0e9, 4.0e9, 1.0e-4, 0.005, 8.0).unwrap_err(),
            RadarError::WavelengthMismatch { .. }
        ));
    }
}
