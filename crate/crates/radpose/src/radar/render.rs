//! Point-cloud rendering of a posed skeleton.
//!
//! Per frame: every limb independently survives dropout, surviving limbs
//! scatter `points_per_limb` reflections at uniform positions along the
//! segment with isotropic Gaussian dispersion, ghost returns arrive at a
//! Poisson rate uniformly inside the sensing frustum. Radial velocity is the
//! projection of the interpolated joint displacement between consecutive
//! poses onto the line of sight, divided by the frame period. Return
//! amplitude follows an inverse-square law with multiplicative log-normal
//! jitter; energy is the squared amplitude.

use super::geometry::{cartesian_to_spherical, spherical_to_cartesian};
use super::{NoiseModel, PointCloudFrame, RadarConfig, RadarError, RadarPoint};
use crate::skeleton::{Pose, SkeletonTopology};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

/// Angular half-extent of the sensing frustum, azimuth and elevation alike.
pub const FRUSTUM_MAX_ANGLE: f64 = std::f64::consts::FRAC_PI_3;
/// Closest resolvable range in meters.
pub const FRUSTUM_MIN_RANGE: f64 = 0.5;

/// Reference amplitude at 1 m range.
const AMPLITUDE_A0: f64 = 1.0;
/// Sigma of the log-normal amplitude jitter.
const AMPLITUDE_JITTER_SIGMA: f64 = 0.2;
/// Ghost radial velocity spread, m/s.
const GHOST_VELOCITY_SIGMA: f64 = 0.5;

/// Where a rendered point came from; index into the topology edge list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointOrigin {
    Limb(usize),
    Ghost,
}

fn in_frustum(p: [f64; 3], cfg: &RadarConfig) -> bool {
    match cartesian_to_spherical(p) {
        Ok((r, theta, phi)) => {
            r >= FRUSTUM_MIN_RANGE
                && r <= cfg.max_range_m
                && theta.abs() <= FRUSTUM_MAX_ANGLE
                && phi.abs() <= FRUSTUM_MAX_ANGLE
        }
        Err(_) => false,
    }
}

/// Renders one frame and reports each point's origin alongside.
#[allow(clippy::too_many_arguments)]
pub fn render_pointcloud_traced(
    pose: &Pose,
    prev_pose: Option<&Pose>,
    frame_period: f64,
    timestamp: f64,
    cfg: &RadarConfig,
    noise: &NoiseModel,
    topology: &SkeletonTopology,
    seed: u64,
) -> Result<(PointCloudFrame, Vec<PointOrigin>), RadarError> {
    cfg.validate()?;
    noise.validate()?;
    if !(frame_period.is_finite() && frame_period > 0.0) {
        return Err(RadarError::InvalidParameter(format!(
            "frame_period must be positive, got {frame_period}"
        )));
    }

    // Subject visibility is judged at the pelvis; an out-of-view subject
    // yields an empty, flagged frame rather than an error.
    if !in_frustum(pose.joint(0), cfg) {
        return Ok((
            PointCloudFrame { points: Vec::new(), timestamp, subject_visible: false },
            Vec::new(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prev = prev_pose.unwrap_or(pose);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut points = Vec::new();
    let mut origins = Vec::new();

    let dropped: Vec<bool> = (0..topology.edges().len())
        .map(|_| rng.random::<f64>() < noise.segment_dropout_prob)
        .collect();

    for (limb, &(parent, child)) in topology.edges().iter().enumerate() {
        if dropped[limb] {
            continue;
        }
        let a = pose.joint(parent);
        let b = pose.joint(child);
        let ap = prev.joint(parent);
        let bp = prev.joint(child);
        for _ in 0..noise.points_per_limb {
            let u: f64 = rng.random::<f64>();
            let on_limb = [
                a[0] + u * (b[0] - a[0]),
                a[1] + u * (b[1] - a[1]),
                a[2] + u * (b[2] - a[2]),
            ];
            let jitter = [
                noise.dispersion_sigma * normal.sample(&mut rng),
                noise.dispersion_sigma * normal.sample(&mut rng),
                noise.dispersion_sigma * normal.sample(&mut rng),
            ];
            let position = [on_limb[0] + jitter[0], on_limb[1] + jitter[1], on_limb[2] + jitter[2]];

            // Displacement of the same material point between frames.
            let disp = [
                (1.0 - u) * (a[0] - ap[0]) + u * (b[0] - bp[0]),
                (1.0 - u) * (a[1] - ap[1]) + u * (b[1] - bp[1]),
                (1.0 - u) * (a[2] - ap[2]) + u * (b[2] - bp[2]),
            ];
            let range = (position[0] * position[0]
                + position[1] * position[1]
                + position[2] * position[2])
                .sqrt();
            let radial_velocity = if range > 0.0 {
                (disp[0] * position[0] + disp[1] * position[1] + disp[2] * position[2])
                    / (range * frame_period)
            } else {
                0.0
            };
            let amplitude = AMPLITUDE_A0 / (range * range)
                * (AMPLITUDE_JITTER_SIGMA * normal.sample(&mut rng)).exp();
            points.push(RadarPoint {
                position,
                radial_velocity,
                energy: amplitude * amplitude,
                amplitude,
            });
            origins.push(PointOrigin::Limb(limb));
        }
    }

    if noise.ghost_rate > 0.0 {
        let n_ghosts = Poisson::new(noise.ghost_rate)
            .map_err(|_| RadarError::InvalidParameter("ghost_rate".into()))?
            .sample(&mut rng) as usize;
        for _ in 0..n_ghosts {
            let r = rng.random_range(FRUSTUM_MIN_RANGE..cfg.max_range_m);
            let theta = rng.random_range(-FRUSTUM_MAX_ANGLE..FRUSTUM_MAX_ANGLE);
            let phi = rng.random_range(-FRUSTUM_MAX_ANGLE..FRUSTUM_MAX_ANGLE);
            let position = spherical_to_cartesian(r, theta, phi)?;
            let radial_velocity = GHOST_VELOCITY_SIGMA * normal.sample(&mut rng);
            let amplitude =
                AMPLITUDE_A0 / (r * r) * (AMPLITUDE_JITTER_SIGMA * normal.sample(&mut rng)).exp();
            points.push(RadarPoint {
                position,
                radial_velocity,
                energy: amplitude * amplitude,
                amplitude,
            });
            origins.push(PointOrigin::Ghost);
        }
    }

    Ok((PointCloudFrame { points, timestamp, subject_visible: true }, origins))
}

/// Renders one frame of radar returns for `pose`.
#[allow(clippy::too_many_arguments)]
pub fn render_pointcloud(
    pose: &Pose,
    prev_pose: Option<&Pose>,
    frame_period: f64,
    timestamp: f64,
    cfg: &RadarConfig,
    noise: &NoiseModel,
    topology: &SkeletonTopology,
    seed: u64,
) -> Result<PointCloudFrame, RadarError> {
    render_pointcloud_traced(pose, prev_pose, frame_period, timestamp, cfg, noise, topology, seed)
        .map(|(frame, _)| frame)
}
