//! Noise schedules and the closed-form forward / reverse diffusion steps.
//!
//! Steps are indexed `1..=K`; `gamma(0) == 1` by convention so the final
//! reverse update lands on the clean pose. The per-step forward update
//! uses a `√β_k` noise coefficient — the variance-preserving reading of
//! the per-step Gaussian — so that chaining all `K` steps matches the
//! direct closed form in distribution.

use super::{pose_rows, rows_to_joints, DiffusionError};
use crate::skeleton::Pose;
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// How β varies across the `K` steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// Every step uses β = `lo`.
    Constant,
    /// β interpolates `lo → hi` across steps `1..=K`.
    Linear,
}

/// Reverse-update rule used by the sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplerMode {
    /// Deterministic clean-pose-prediction update: reconstruct Ĥ₀ from
    /// the predicted noise, then re-noise to step k−1. Default.
    #[serde(rename = "x0")]
    XZero,
    /// Verbatim `(1−β_k)⁻¹(H_k − β_k·ε̂)` update kept for fidelity
    /// experiments; it does not algebraically invert the forward process.
    #[serde(rename = "paper_eq3")]
    PaperEq3,
}

impl Default for SamplerMode {
    fn default() -> Self {
        Self::XZero
    }
}

/// Per-step noise levels: β_k, α_k = 1−β_k, and the running product γ_k.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    gamma: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// β_k for `k` in `1..=K`.
    pub fn beta(&self, k: usize) -> f64 {
        self.beta[k - 1]
    }

    /// α_k = 1−β_k for `k` in `1..=K`.
    pub fn alpha(&self, k: usize) -> f64 {
        self.alpha[k - 1]
    }

    /// γ_k = Π_{i≤k} α_i for `k` in `0..=K`; γ_0 = 1 so that stepping
    /// down to k=0 denoises completely.
    pub fn gamma(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.gamma[k - 1]
        }
    }

    pub fn check_step(&self, k: usize) -> Result<(), DiffusionError> {
        if k == 0 || k > self.steps() {
            return Err(DiffusionError::StepOutOfRange { k, steps: self.steps() });
        }
        Ok(())
    }
}

/// Build a schedule of `steps` noise levels.
pub fn make_schedule(
    steps: usize,
    mode: ScheduleMode,
    lo: f64,
    hi: f64,
) -> Result<DiffusionSchedule, DiffusionError> {
    if steps == 0 {
        return Err(DiffusionError::BadSchedule("need at least one step".into()));
    }
    if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo <= hi && hi < 1.0) {
        return Err(DiffusionError::BadSchedule(format!(
            "β range must satisfy 0 < lo ≤ hi < 1, got [{lo}, {hi}]"
        )));
    }
    let beta: Vec<f64> = match mode {
        ScheduleMode::Constant => vec![lo; steps],
        ScheduleMode::Linear => (0..steps)
            .map(|i| {
                if steps == 1 {
                    lo
                } else {
                    lo + (hi - lo) * i as f64 / (steps - 1) as f64
                }
            })
            .collect(),
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let gamma: Vec<f64> = alpha
        .iter()
        .scan(1.0f64, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(DiffusionSchedule { beta, alpha, gamma })
}

/// One `(17, 3)` matrix of independent standard normals, drawn row-major
/// (joint 0 x,y,z, then joint 1, …). The draw order is part of the
/// contract: samplers derive per-hypothesis noise from seeded generators
/// and tests replay it.
pub fn draw_noise(rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut eps = Array2::<f64>::zeros((crate::skeleton::JOINT_COUNT, 3));
    for v in eps.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
    eps
}

/// Direct corruption to step `k`: `√γ_k·x + √(1−γ_k)·ε`, elementwise over
/// any matrix of coordinates (one pose or a stacked batch).
pub fn forward_sample_rows(
    rows: &Array2<f64>,
    k: usize,
    noise: &Array2<f64>,
    sched: &DiffusionSchedule,
) -> Result<Array2<f64>, DiffusionError> {
    sched.check_step(k)?;
    if rows.raw_dim() != noise.raw_dim() {
        return Err(DiffusionError::Shape {
            op: "forward_sample",
            detail: format!("pose {:?} vs noise {:?}", rows.shape(), noise.shape()),
        });
    }
    let g = sched.gamma(k);
    Ok(rows * g.sqrt() + noise * (1.0 - g).sqrt())
}

/// Direct corruption of a pose to step `k` with the given `(17, 3)` noise.
pub fn forward_sample(
    pose: &Pose,
    k: usize,
    noise: &Array2<f64>,
    sched: &DiffusionSchedule,
) -> Result<Pose, DiffusionError> {
    let rows = forward_sample_rows(&pose_rows(pose), k, noise, sched)?;
    Ok(Pose::new(rows_to_joints(&rows))?)
}

/// One forward chain step `√α_k·x + √β_k·ε`; chaining `1..=K` matches the
/// direct form in distribution.
pub fn forward_step(
    rows: &Array2<f64>,
    k: usize,
    noise: &Array2<f64>,
    sched: &DiffusionSchedule,
) -> Result<Array2<f64>, DiffusionError> {
    sched.check_step(k)?;
    if rows.raw_dim() != noise.raw_dim() {
        return Err(DiffusionError::Shape {
            op: "forward_step",
            detail: format!("pose {:?} vs noise {:?}", rows.shape(), noise.shape()),
        });
    }
    Ok(rows * sched.alpha(k).sqrt() + noise * sched.beta(k).sqrt())
}

/// Clean-pose reconstruction from a noisy pose and the noise estimate:
/// `(H_k − √(1−γ_k)·ε̂)/√γ_k` — the algebraic inverse of the direct
/// corruption when `ε̂` is exact.
pub fn predict_clean(
    hk: &Array2<f64>,
    eps_hat: &Array2<f64>,
    sched: &DiffusionSchedule,
    k: usize,
) -> Result<Array2<f64>, DiffusionError> {
    sched.check_step(k)?;
    if hk.raw_dim() != eps_hat.raw_dim() {
        return Err(DiffusionError::Shape {
            op: "predict_clean",
            detail: format!("pose {:?} vs noise estimate {:?}", hk.shape(), eps_hat.shape()),
        });
    }
    let g = sched.gamma(k);
    Ok((hk - &(eps_hat * (1.0 - g).sqrt())) / g.sqrt())
}

/// One reverse update `H_k → H_{k−1}` under the chosen rule. Both rules
/// are deterministic; sampling randomness enters only through the
/// initialization noise.
pub fn reverse_step_rows(
    hk: &Array2<f64>,
    eps_hat: &Array2<f64>,
    sched: &DiffusionSchedule,
    k: usize,
    mode: SamplerMode,
) -> Result<Array2<f64>, DiffusionError> {
    sched.check_step(k)?;
    match mode {
        SamplerMode::XZero => {
            let clean = predict_clean(hk, eps_hat, sched, k)?;
            let g_prev = sched.gamma(k - 1);
            Ok(&clean * g_prev.sqrt() + eps_hat * (1.0 - g_prev).sqrt())
        }
        SamplerMode::PaperEq3 => {
            if hk.raw_dim() != eps_hat.raw_dim() {
                return Err(DiffusionError::Shape {
                    op: "reverse_step",
                    detail: format!(
                        "pose {:?} vs noise estimate {:?}",
                        hk.shape(),
                        eps_hat.shape()
                    ),
                });
            }
            let b = sched.beta(k);
            Ok((hk - &(eps_hat * b)) / (1.0 - b))
        }
    }
}

/// Pose-typed wrapper over [`reverse_step_rows`].
pub fn reverse_step(
    hk: &Pose,
    eps_hat: &Array2<f64>,
    sched: &DiffusionSchedule,
    k: usize,
    mode: SamplerMode,
) -> Result<Pose, DiffusionError> {
    let rows = reverse_step_rows(&pose_rows(hk), eps_hat, sched, k, mode)?;
    Ok(Pose::new(rows_to_joints(&rows))?)
}
