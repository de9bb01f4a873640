//! Pose error metrics.
//!
//! `mpjpe` is the mean per-joint Euclidean error in millimeters after both
//! poses are pelvis-aligned. `pa_mpjpe` first fits the similarity transform
//! (scale, proper rotation, translation) minimizing the summed squared joint
//! error, then reports the mean per-joint error of the aligned prediction.
//! `akv` is the mean squared per-joint displacement between consecutive
//! frames, in m^2 per frame step.

use crate::skeleton::{Pose, PoseError, PoseSequence, JOINT_COUNT};

/// Mean per-joint position error (mm), both poses pelvis-aligned first.
pub fn mpjpe(pred: &Pose, gt: &Pose) -> f64 {
    let a = pred.pelvis_aligned();
    let b = gt.pelvis_aligned();
    let mut sum = 0.0;
    for j in 0..JOINT_COUNT {
        let pa = a.joint(j);
        let pb = b.joint(j);
        sum += ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2) + (pa[2] - pb[2]).powi(2)).sqrt();
    }
    sum / JOINT_COUNT as f64 * 1000.0
}

/// Procrustes-aligned MPJPE (mm). Errors if `gt` has no spatial extent.
pub fn pa_mpjpe(pred: &Pose, gt: &Pose) -> Result<f64, PoseError> {
    let x = pred.joints();
    let y = gt.joints();
    let xm = centroid(x);
    let ym = centroid(y);

    let mut spread_y = 0.0;
    let mut spread_x = 0.0;
    let mut cross = [[0.0; 3]; 3]; // sum of (x - xm)(y - ym)^T
    for j in 0..JOINT_COUNT {
        let dx = sub3(x[j], xm);
        let dy = sub3(y[j], ym);
        spread_y += dot3(dy, dy);
        spread_x += dot3(dx, dx);
        for r in 0..3 {
            for c in 0..3 {
                cross[r][c] += dx[r] * dy[c];
            }
        }
    }
    if spread_y <= 1e-18 * (1.0 + dot3(ym, ym)) {
        return Err(PoseError::DegenerateTarget);
    }

    let (u, s, v) = svd3(cross);
    let d = if det3(&u) * det3(&v) < 0.0 { -1.0 } else { 1.0 };
    // R = V diag(1,1,d) U^T maps centered pred onto centered gt.
    let mut rot = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            rot[r][c] = v[r][0] * u[c][0] + v[r][1] * u[c][1] + d * v[r][2] * u[c][2];
        }
    }
    let scale = if spread_x > 0.0 { (s[0] + s[1] + d * s[2]) / spread_x } else { 0.0 };

    let mut sum = 0.0;
    for j in 0..JOINT_COUNT {
        let dx = sub3(x[j], xm);
        let aligned = [
            scale * dot3(rot[0], dx) + ym[0],
            scale * dot3(rot[1], dx) + ym[1],
            scale * dot3(rot[2], dx) + ym[2],
        ];
        let e = sub3(aligned, y[j]);
        sum += dot3(e, e).sqrt();
    }
    Ok(sum / JOINT_COUNT as f64 * 1000.0)
}

/// Average keypoint jitter over a sequence: mean over frame transitions and
/// joints of the squared displacement (m^2 per frame step).
pub fn akv(seq: &PoseSequence) -> Result<f64, PoseError> {
    let frames = seq.frames();
    if frames.len() < 2 {
        return Err(PoseError::InsufficientFrames { needed: 2, got: frames.len() });
    }
    let mut sum = 0.0;
    for t in 1..frames.len() {
        for j in 0..JOINT_COUNT {
            let d = sub3(frames[t].joint(j), frames[t - 1].joint(j));
            sum += dot3(d, d);
        }
    }
    Ok(sum / ((frames.len() - 1) * JOINT_COUNT) as f64)
}

fn centroid(p: &[[f64; 3]; JOINT_COUNT]) -> [f64; 3] {
    let mut m = [0.0; 3];
    for j in p {
        for c in 0..3 {
            m[c] += j[c];
        }
    }
    for c in m.iter_mut() {
        *c /= JOINT_COUNT as f64;
    }
    m
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// One-sided Jacobi SVD of a 3x3 matrix: M = U diag(s) V^T with s sorted
/// descending and U, V orthonormal (not necessarily proper rotations).
fn svd3(m: [[f64; 3]; 3]) -> ([[f64; 3]; 3], [f64; 3], [[f64; 3]; 3]) {
    // Work on columns of A, accumulating the right rotations into V.
    let mut a = m;
    let mut v = [[0.0; 3], [0.0; 3], [0.0; 3]];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..60 {
        let mut off = 0.0f64;
        for p in 0..2 {
            for q in (p + 1)..3 {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for r in 0..3 {
                    app += a[r][p] * a[r][p];
                    aqq += a[r][q] * a[r][q];
                    apq += a[r][p] * a[r][q];
                }
                off = off.max(apq.abs() / (app * aqq).sqrt().max(f64::MIN_POSITIVE));
                if apq.abs() <= 1e-30 * (app * aqq).sqrt().max(f64::MIN_POSITIVE) {
                    continue;
                }
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for r in 0..3 {
                    let (ap, aq) = (a[r][p], a[r][q]);
                    a[r][p] = cs * ap - sn * aq;
                    a[r][q] = sn * ap + cs * aq;
                    let (vp, vq) = (v[r][p], v[r][q]);
                    v[r][p] = cs * vp - sn * vq;
                    v[r][q] = sn * vp + cs * vq;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }

    let mut s = [0.0; 3];
    for k in 0..3 {
        s[k] = (a[0][k] * a[0][k] + a[1][k] * a[1][k] + a[2][k] * a[2][k]).sqrt();
    }
    // Sort singular values descending, permuting columns of A and V along.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| s[j].partial_cmp(&s[i]).unwrap());
    let (mut u, mut ss, mut vv) = ([[0.0; 3]; 3], [0.0; 3], [[0.0; 3]; 3]);
    for (k, &src) in order.iter().enumerate() {
        ss[k] = s[src];
        for r in 0..3 {
            u[r][k] = a[r][src];
            vv[r][k] = v[r][src];
        }
    }
    // Normalize U columns; rebuild near-null columns orthonormally.
    let tol = ss[0].max(f64::MIN_POSITIVE) * 1e-12;
    for k in 0..3 {
        if ss[k] > tol {
            for r in 0..3 {
                u[r][k] /= ss[k];
            }
        } else {
            let fresh = orthonormal_complement(&u, k);
            for r in 0..3 {
                u[r][k] = fresh[r];
            }
        }
    }
    (u, ss, vv)
}

/// A unit vector orthogonal to the first `k` columns of `u`.
fn orthonormal_complement(u: &[[f64; 3]; 3], k: usize) -> [f64; 3] {
    let basis = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let mut best = [1.0, 0.0, 0.0];
    let mut best_norm = -1.0;
    for cand in basis {
        let mut w = cand;
        for col in 0..k {
            let proj = w[0] * u[0][col] + w[1] * u[1][col] + w[2] * u[2][col];
            for r in 0..3 {
                w[r] -= proj * u[r][col];
            }
        }
        let n = dot3(w, w);
        if n > best_norm {
            best_norm = n;
            best = w;
        }
    }
    let n = dot3(best, best).sqrt().max(f64::MIN_POSITIVE);
    [best[0] / n, best[1] / n, best[2] / n]
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::skeleton::Pose;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    /// Uniformly random proper rotation from a normalized quaternion.
    pub fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
        use rand_distr::StandardNormal;
        let q: [f64; 4] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }

    pub fn transform_pose(pose: &Pose, scale: f64, rot: &[[f64; 3]; 3], t: [f64; 3]) -> Pose {
        let mut joints = *pose.joints();
        for j in joints.iter_mut() {
            let p = *j;
            for r in 0..3 {
                j[r] = scale * (rot[r][0] * p[0] + rot[r][1] * p[1] + rot[r][2] * p[2]) + t[r];
            }
        }
        Pose::new(joints).unwrap()
    }

    /// Alignment oracle: coordinate-descent grid search over axis rotations
    /// at 0.1 degree resolution with closed-form scale and translation.
    /// Returns the mean aligned joint error in mm.
    pub fn grid_procrustes_error_mm(pred: &Pose, gt: &Pose) -> f64 {
        let x = pred.joints();
        let y = gt.joints();
        let xm = super::centroid(x);
        let ym = super::centroid(y);
        let mut dx = Vec::with_capacity(JOINT_COUNT);
        let mut dy = Vec::with_capacity(JOINT_COUNT);
        for j in 0..JOINT_COUNT {
            dx.push(super::sub3(x[j], xm));
            dy.push(super::sub3(y[j], ym));
        }
        let spread_x: f64 = dx.iter().map(|d| super::dot3(*d, *d)).sum();

        let axis_rot = |axis: usize, ang: f64| -> [[f64; 3]; 3] {
            let (s, c) = ang.sin_cos();
            match axis {
                0 => [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]],
                1 => [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
                _ => [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            }
        };
        let compose = |angles: [f64; 3]| -> [[f64; 3]; 3] {
            let rx = axis_rot(0, angles[0]);
            let ry = axis_rot(1, angles[1]);
            let rz = axis_rot(2, angles[2]);
            let mut rzy = [[0.0; 3]; 3];
            for r in 0..3 {
                for c in 0..3 {
                    for k in 0..3 {
                        rzy[r][c] += rz[r][k] * ry[k][c];
                    }
                }
            }
            let mut m = [[0.0; 3]; 3];
            for r in 0..3 {
                for c in 0..3 {
                    for k in 0..3 {
                        m[r][c] += rzy[r][k] * rx[k][c];
                    }
                }
            }
            m
        };
        // Summed squared error after the best scale for a fixed rotation.
        let cost = |angles: [f64; 3]| -> f64 {
            let m = compose(angles);
            let mut num = 0.0;
            for j in 0..JOINT_COUNT {
                let rx = [
                    super::dot3(m[0], dx[j]),
                    super::dot3(m[1], dx[j]),
                    super::dot3(m[2], dx[j]),
                ];
                num += super::dot3(rx, dy[j]);
            }
            let s = if spread_x > 0.0 { (num / spread_x).max(0.0) } else { 0.0 };
            let mut ss = 0.0;
            for j in 0..JOINT_COUNT {
                let rx = [
                    super::dot3(m[0], dx[j]),
                    super::dot3(m[1], dx[j]),
                    super::dot3(m[2], dx[j]),
                ];
                let e = [s * rx[0] - dy[j][0], s * rx[1] - dy[j][1], s * rx[2] - dy[j][2]];
                ss += super::dot3(e, e);
            }
            ss
        };

        let step = 0.1f64.to_radians();
        let mut angles = [0.0f64; 3];
        let mut best = cost(angles);
        for _round in 0..6 {
            for axis in 0..3 {
                let saved = angles[axis];
                let mut local_best = best;
                let mut local_ang = saved;
                let mut k = -1800i32;
                while k < 1800 {
                    let cand = k as f64 * step;
                    angles[axis] = cand;
                    let c = cost(angles);
                    if c < local_best {
                        local_best = c;
                        local_ang = cand;
                    }
                    k += 1;
                }
                angles[axis] = local_ang;
                best = local_best;
            }
        }

        // Mean aligned error at the best grid transform.
        let m = compose(angles);
        let mut num = 0.0;
        for j in 0..JOINT_COUNT {
            let rx = [
                super::dot3(m[0], dx[j]),
                super::dot3(m[1], dx[j]),
                super::dot3(m[2], dx[j]),
            ];
            num += super::dot3(rx, dy[j]);
        }
        let s = if spread_x > 0.0 { (num / spread_x).max(0.0) } else { 0.0 };
        let mut sum = 0.0;
        for j in 0..JOINT_COUNT {
            let rx = [
                super::dot3(m[0], dx[j]),
                super::dot3(m[1], dx[j]),
                super::dot3(m[2], dx[j]),
            ];
            let e = [s * rx[0] - dy[j][0], s * rx[1] - dy[j][1], s * rx[2] - dy[j][2]];
            sum += super::dot3(e, e).sqrt();
        }
        sum / JOINT_COUNT as f64 * 1000.0
    }
}
