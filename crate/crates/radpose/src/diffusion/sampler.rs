//! Reverse-process sampling from a coarse initialization, and the
//! training objective.
//!
//! Refinement never starts from pure noise: the coarse pose is corrupted
//! to the final diffusion step and walked back. Each hypothesis `m` uses
//! the seed `seed + m` and draws its initialization noise in one gulp
//! ([`draw_noise`]'s row-major order), so hypotheses are reproducible
//! individually and could run in parallel.

use super::denoiser::NoisePredictor;
use super::schedule::{
    draw_noise, forward_sample_rows, reverse_step_rows, DiffusionSchedule, SamplerMode,
};
use super::{pose_rows, rows_to_joints, DiffusionError};
use crate::cond::{CondError, ConditionSet};
use crate::nn::params::TapeSession;
use crate::nn::tape::TensorId;
use crate::skeleton::{Pose, JOINT_COUNT};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Callback that re-evaluates the local-context condition on the current
/// pose estimate (dynamic anchors): given the evolving joint positions it
/// returns fresh `(17, width)` local rows, or `None` to drop the member.
pub type LocalRefresh<'a> = dyn FnMut(
        &mut TapeSession,
        &[[f64; 3]; JOINT_COUNT],
    ) -> Result<Option<TensorId>, CondError>
    + 'a;

/// The M sampled refinements of one frame plus their per-joint mean.
#[derive(Debug, Clone)]
pub struct HypothesisSet {
    members: Vec<Pose>,
    mean: Pose,
}

impl HypothesisSet {
    pub fn new(members: Vec<Pose>) -> Result<Self, DiffusionError> {
        if members.is_empty() {
            return Err(DiffusionError::BadConfig("need at least one hypothesis".into()));
        }
        let mut joints = [[0.0f64; 3]; JOINT_COUNT];
        for pose in &members {
            for (avg, joint) in joints.iter_mut().zip(pose.joints().iter()) {
                for (a, &v) in avg.iter_mut().zip(joint.iter()) {
                    *a += v;
                }
            }
        }
        let n = members.len() as f64;
        for joint in joints.iter_mut() {
            for v in joint.iter_mut() {
                *v /= n;
            }
        }
        Ok(Self { members, mean: Pose::new(joints)? })
    }

    pub fn members(&self) -> &[Pose] {
        &self.members
    }

    /// Arithmetic per-joint average of the members — the recorded
    /// refined pose.
    pub fn mean(&self) -> &Pose {
        &self.mean
    }
}

/// Refine one coarse pose: corrupt it to the final step with fresh noise
/// per hypothesis, then walk the reverse process down to the clean pose,
/// re-evaluating the local condition on every step's estimate when a
/// refresher is supplied (otherwise the set's static member is used).
#[allow(clippy::too_many_arguments)]
pub fn sample_pose(
    sess: &mut TapeSession,
    predictor: &dyn NoisePredictor,
    coarse: &Pose,
    conds: &ConditionSet,
    mut refresh_local: Option<&mut LocalRefresh>,
    sched: &DiffusionSchedule,
    mode: SamplerMode,
    hypotheses: usize,
    seed: u64,
) -> Result<HypothesisSet, DiffusionError> {
    if hypotheses == 0 {
        return Err(DiffusionError::BadConfig("need at least one hypothesis".into()));
    }
    let coarse_rows = pose_rows(coarse);
    let last = sched.steps();
    let mut members = Vec::with_capacity(hypotheses);
    for m in 0..hypotheses {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(m as u64));
        let eps = draw_noise(&mut rng);
        let mut h = forward_sample_rows(&coarse_rows, last, &eps, sched)?;
        for k in (1..=last).rev() {
            let mut step_conds = *conds;
            if let Some(refresh) = refresh_local.as_deref_mut() {
                step_conds.c_loc = refresh(sess, &rows_to_joints(&h))?;
            }
            let estimate = predictor.predict(sess, &h, &[k], &step_conds)?;
            let estimate = sess.tape.value(estimate).clone();
            h = reverse_step_rows(&h, &estimate, sched, k, mode)?;
        }
        members.push(Pose::new(rows_to_joints(&h))?);
    }
    HypothesisSet::new(members)
}

/// Per-item corruption targets for one training batch: for each item, a
/// uniform step in `1..=K` followed by its 17×3 noise, drawn in that
/// order item by item (row-major within the item).
pub fn draw_training_noise(
    rng: &mut ChaCha8Rng,
    batch: usize,
    steps: usize,
) -> (Vec<usize>, Array2<f64>) {
    let mut ks = Vec::with_capacity(batch);
    let mut eps = Array2::<f64>::zeros((batch * JOINT_COUNT, 3));
    for b in 0..batch {
        ks.push(rng.random_range(1..=steps));
        for j in 0..JOINT_COUNT {
            for axis in 0..3 {
                eps[(b * JOINT_COUNT + j, axis)] = StandardNormal.sample(rng);
            }
        }
    }
    (ks, eps)
}

/// Training objective: corrupt each clean pose to a uniformly drawn step,
/// score the predictor's noise estimate by mean squared error, and add
/// `lambda ×` the mean absolute limb-length error when the length head's
/// estimates and targets are supplied.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_loss(
    sess: &mut TapeSession,
    predictor: &dyn NoisePredictor,
    sched: &DiffusionSchedule,
    h0_rows: &Array2<f64>,
    conds: &ConditionSet,
    predicted_lengths: Option<TensorId>,
    target_lengths: Option<&Array2<f64>>,
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TensorId, DiffusionError> {
    let rows = h0_rows.nrows();
    if rows == 0 || rows % JOINT_COUNT != 0 || h0_rows.ncols() != 3 {
        return Err(DiffusionError::Shape {
            op: "diffusion_loss",
            detail: format!("clean batch is {:?}", h0_rows.shape()),
        });
    }
    let batch = rows / JOINT_COUNT;
    let (ks, eps) = draw_training_noise(rng, batch, sched.steps());

    let mut hk = Array2::<f64>::zeros((rows, 3));
    for b in 0..batch {
        let g = sched.gamma(ks[b]);
        let (signal, noise) = (g.sqrt(), (1.0 - g).sqrt());
        for j in 0..JOINT_COUNT {
            let r = b * JOINT_COUNT + j;
            for axis in 0..3 {
                hk[(r, axis)] = signal * h0_rows[(r, axis)] + noise * eps[(r, axis)];
            }
        }
    }

    let estimate = predictor.predict(sess, &hk, &ks, conds)?;
    let target = sess.tape.constant(eps);
    let residual = sess.tape.sub(estimate, target);
    let squared = sess.tape.mul_elem(residual, residual);
    let noise_term = sess.tape.mean_all(squared);

    match (predicted_lengths, target_lengths) {
        (Some(predicted), Some(target)) => {
            let got = sess.tape.value(predicted).raw_dim();
            if got != target.raw_dim() {
                return Err(DiffusionError::Shape {
                    op: "diffusion_loss",
                    detail: format!(
                        "length estimates {:?} vs targets {:?}",
                        got,
                        target.shape()
                    ),
                });
            }
            let target = sess.tape.constant(target.clone());
            let gap = sess.tape.sub(predicted, target);
            let gap = sess.tape.abs(gap);
            let limb_term = sess.tape.mean_all(gap);
            let weighted = sess.tape.scale(limb_term, lambda);
            Ok(sess.tape.add(noise_term, weighted))
        }
        (None, None) => Ok(noise_term),
        _ => Err(DiffusionError::BadConfig(
            "length estimates and targets must be supplied together".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::denoiser::DenoiserSpec;
    use crate::diffusion::schedule::{make_schedule, ScheduleMode};
    use crate::nn::params::ParameterStore;
    use crate::nn::NnError;
    use crate::skeleton::LIMB_COUNT;
    use approx::assert_abs_diff_eq;

    fn default_schedule() -> DiffusionSchedule {
        make_schedule(25, ScheduleMode::Constant, 0.001, 0.001).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let mut joints = [[0.0f64; 3]; JOINT_COUNT];
        for joint in joints.iter_mut().skip(1) {
            for v in joint.iter_mut() {
                *v = rng.random_range(-0.9..0.9);
            }
        }
        Pose::new(joints).unwrap()
    }

    fn tiny_denoiser(seed: u64) -> (DenoiserSpec, ParameterStore) {
        let spec = DenoiserSpec::new("den", 4, 4, 4, 2, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        spec.init(&mut store, &mut rng).unwrap();
        (spec, store)
    }

    /// Predictor that always answers with a fixed matrix, tiled to the
    /// requested batch.
    struct FixedNoise(Array2<f64>);

    impl NoisePredictor for FixedNoise {
        fn predict(
            &self,
            sess: &mut TapeSession,
            _hk: &Array2<f64>,
            steps: &[usize],
            _conds: &ConditionSet,
        ) -> Result<TensorId, DiffusionError> {
            let mut tiled = Array2::<f64>::zeros((steps.len() * JOINT_COUNT, 3));
            for b in 0..steps.len() {
                for j in 0..JOINT_COUNT {
                    for axis in 0..3 {
                        tiled[(b * JOINT_COUNT + j, axis)] = self.0[(j, axis)];
                    }
                }
            }
            Ok(sess.tape.constant(tiled))
        }
    }

    #[test]
    fn hypothesis_mean_is_the_arithmetic_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let members: Vec<Pose> = (0..5).map(|_| random_pose(&mut rng)).collect();
        let set = HypothesisSet::new(members.clone()).unwrap();
        for j in 0..JOINT_COUNT {
            for axis in 0..3 {
                let avg =
                    members.iter().map(|p| p.joints()[j][axis]).sum::<f64>() / members.len() as f64;
                assert_abs_diff_eq!(set.mean().joints()[j][axis], avg, epsilon = 1e-12);
            }
        }
        assert!(matches!(HypothesisSet::new(vec![]), Err(DiffusionError::BadConfig(_))));
    }

    #[test]
    fn fixed_seed_sampling_is_deterministic() {
        let (spec, store) = tiny_denoiser(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let coarse = random_pose(&mut rng);
        let sched = default_schedule();

        let run = || {
            let mut sess = TapeSession::new(&store, false, 0);
            sample_pose(
                &mut sess,
                &spec,
                &coarse,
                &ConditionSet::default(),
                None,
                &sched,
                SamplerMode::XZero,
                1,
                42,
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.mean().joints(), b.mean().joints());

        let mut sess = TapeSession::new(&store, false, 0);
        let other = sample_pose(
            &mut sess,
            &spec,
            &coarse,
            &ConditionSet::default(),
            None,
            &sched,
            SamplerMode::XZero,
            1,
            43,
        )
        .unwrap();
        assert_ne!(a.mean().joints(), other.mean().joints(), "seed must steer the noise");
    }

    #[test]
    fn mean_of_five_hypotheses_matches_member_average() {
        let (spec, store) = tiny_denoiser(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let coarse = random_pose(&mut rng);
        let sched = default_schedule();
        let mut sess = TapeSession::new(&store, false, 0);
        let set = sample_pose(
            &mut sess,
            &spec,
            &coarse,
            &ConditionSet::default(),
            None,
            &sched,
            SamplerMode::XZero,
            5,
            7,
        )
        .unwrap();
        assert_eq!(set.members().len(), 5);
        for j in 0..JOINT_COUNT {
            for axis in 0..3 {
                let avg = set.members().iter().map(|p| p.joints()[j][axis]).sum::<f64>() / 5.0;
                assert_abs_diff_eq!(set.mean().joints()[j][axis], avg, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn oracle_predictor_recovers_the_coarse_pose() {
        // The stub returns exactly the initialization noise of hypothesis
        // m=0 (seed 11): every reverse step then cancels its own noise
        // and the chain must land back on the coarse pose.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let coarse = random_pose(&mut rng);
        let sched = default_schedule();
        let eps = draw_noise(&mut ChaCha8Rng::seed_from_u64(11));

        let store = ParameterStore::new();
        let mut sess = TapeSession::new(&store, false, 0);
        let set = sample_pose(
            &mut sess,
            &FixedNoise(eps),
            &coarse,
            &ConditionSet::default(),
            None,
            &sched,
            SamplerMode::XZero,
            1,
            11,
        )
        .unwrap();
        for (got, want) in set.mean().joints().iter().zip(coarse.joints().iter()) {
            for (g, w) in got.iter().zip(want.iter()) {
                assert_abs_diff_eq!(g, w, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn local_refresher_runs_every_step_on_the_evolving_estimate() {
        let (spec, store) = tiny_denoiser(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let coarse = random_pose(&mut rng);
        let sched = default_schedule();

        let mut seen: Vec<[f64; 3]> = Vec::new();
        let mut refresh = |_sess: &mut TapeSession,
                           joints: &[[f64; 3]; JOINT_COUNT]|
         -> Result<Option<TensorId>, CondError> {
            seen.push(joints[10]);
            Ok(None)
        };
        let mut sess = TapeSession::new(&store, false, 0);
        sample_pose(
            &mut sess,
            &spec,
            &coarse,
            &ConditionSet::default(),
            Some(&mut refresh),
            &sched,
            SamplerMode::XZero,
            2,
            9,
        )
        .unwrap();
        assert_eq!(seen.len(), 2 * sched.steps(), "one refresh per step per hypothesis");
        assert_ne!(seen[0], seen[1], "the anchor pose must evolve between steps");
    }

    #[test]
    fn zero_hypotheses_is_rejected() {
        let (spec, store) = tiny_denoiser(10);
        let coarse = random_pose(&mut ChaCha8Rng::seed_from_u64(11));
        let sched = default_schedule();
        let mut sess = TapeSession::new(&store, false, 0);
        assert!(matches!(
            sample_pose(
                &mut sess,
                &spec,
                &coarse,
                &ConditionSet::default(),
                None,
                &sched,
                SamplerMode::XZero,
                0,
                1,
            ),
            Err(DiffusionError::BadConfig(_))
        ));
    }

    #[test]
    fn training_noise_draw_order_is_stable() {
        let (ks1, eps1) = draw_training_noise(&mut ChaCha8Rng::seed_from_u64(12), 3, 25);
        let (ks2, eps2) = draw_training_noise(&mut ChaCha8Rng::seed_from_u64(12), 3, 25);
        assert_eq!(ks1, ks2);
        assert_eq!(eps1, eps2);
        assert!(ks1.iter().all(|&k| (1..=25).contains(&k)));
    }

    /// Predictor replaying pre-drawn noise; asserts it receives the
    /// pre-drawn steps.
    struct ReplayNoise {
        steps: Vec<usize>,
        eps: Array2<f64>,
    }

    impl NoisePredictor for ReplayNoise {
        fn predict(
            &self,
            sess: &mut TapeSession,
            _hk: &Array2<f64>,
            steps: &[usize],
            _conds: &ConditionSet,
        ) -> Result<TensorId, DiffusionError> {
            assert_eq!(steps, self.steps, "loss must forward the drawn steps");
            Ok(sess.tape.constant(self.eps.clone()))
        }
    }

    #[test]
    fn perfect_estimates_drive_the_loss_to_zero() {
        let sched = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let batch = 3;
        let mut h0 = Array2::<f64>::zeros((batch * JOINT_COUNT, 3));
        for v in h0.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        // Replay the exact internal draws (documented order).
        let (ks, eps) = draw_training_noise(&mut ChaCha8Rng::seed_from_u64(14), batch, 25);
        let oracle = ReplayNoise { steps: ks, eps };

        let lengths = Array2::<f64>::from_elem((batch, LIMB_COUNT), 0.4);
        let store = ParameterStore::new();
        let mut sess = TapeSession::new(&store, false, 0);
        let predicted = sess.tape.constant(lengths.clone());
        let loss = diffusion_loss(
            &mut sess,
            &oracle,
            &sched,
            &h0,
            &ConditionSet::default(),
            Some(predicted),
            Some(&lengths),
            5.0,
            &mut ChaCha8Rng::seed_from_u64(14),
        )
        .unwrap();
        assert_eq!(sess.tape.value(loss)[(0, 0)], 0.0);
    }

    #[test]
    fn zero_weight_reduces_to_the_plain_noise_objective() {
        let (spec, store) = tiny_denoiser(15);
        let sched = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut h0 = Array2::<f64>::zeros((JOINT_COUNT, 3));
        for v in h0.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let lengths = Array2::<f64>::from_elem((1, LIMB_COUNT), 0.4);
        let skewed = Array2::<f64>::from_elem((1, LIMB_COUNT), 0.9);

        let mut sess = TapeSession::new(&store, false, 0);
        let predicted = sess.tape.constant(skewed);
        let with_limbs = diffusion_loss(
            &mut sess,
            &spec,
            &sched,
            &h0,
            &ConditionSet::default(),
            Some(predicted),
            Some(&lengths),
            0.0,
            &mut ChaCha8Rng::seed_from_u64(17),
        )
        .unwrap();
        let without = diffusion_loss(
            &mut sess,
            &spec,
            &sched,
            &h0,
            &ConditionSet::default(),
            None,
            None,
            5.0,
            &mut ChaCha8Rng::seed_from_u64(17),
        )
        .unwrap();
        assert_eq!(sess.tape.value(with_limbs)[(0, 0)], sess.tape.value(without)[(0, 0)]);
    }

    #[test]
    fn loss_is_deterministic_per_seed_and_rejects_half_supplied_lengths() {
        let (spec, store) = tiny_denoiser(18);
        let sched = default_schedule();
        let h0 = Array2::<f64>::from_elem((JOINT_COUNT, 3), 0.2);

        let eval = |seed: u64| {
            let mut sess = TapeSession::new(&store, false, 0);
            let loss = diffusion_loss(
                &mut sess,
                &spec,
                &sched,
                &h0,
                &ConditionSet::default(),
                None,
                None,
                5.0,
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
            .unwrap();
            sess.tape.value(loss)[(0, 0)]
        };
        assert_eq!(eval(19), eval(19));
        assert_ne!(eval(19), eval(20));

        let mut sess = TapeSession::new(&store, false, 0);
        assert!(matches!(
            diffusion_loss(
                &mut sess,
                &spec,
                &sched,
                &h0,
                &ConditionSet::default(),
                None,
                Some(&Array2::<f64>::zeros((1, LIMB_COUNT))),
                5.0,
                &mut ChaCha8Rng::seed_from_u64(21),
            ),
            Err(DiffusionError::BadConfig(_))
        ));
    }

    #[test]
    fn loss_gradients_flow_into_the_predictor_parameters() {
        use crate::nn::gradcheck::{parameter_gradient_errors, FD_REL_TOL, FD_STEP};
        let (spec, mut store) = tiny_denoiser(22);
        // Keep the five-block composition in the smooth softmax regime
        // (see the denoiser gradient test for why).
        let names: Vec<String> = store.names().map(String::from).collect();
        for name in names {
            let halved = store.get(&name).unwrap() * 0.5;
            store.set(&name, halved).unwrap();
        }
        let sched = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut h0 = Array2::<f64>::zeros((JOINT_COUNT, 3));
        for v in h0.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }

        let mut build = |sess: &mut TapeSession| {
            // Fixed corruption draws so only parameters vary.
            diffusion_loss(
                sess,
                &spec,
                &sched,
                &h0,
                &ConditionSet::default(),
                None,
                None,
                5.0,
                &mut ChaCha8Rng::seed_from_u64(24),
            )
            .map_err(|e| match e {
                DiffusionError::Nn(inner) => inner,
                other => NnError::BadConfig(other.to_string()),
            })
        };
        let errors = parameter_gradient_errors(&store, &mut build, FD_STEP).unwrap();
        for (name, err) in errors {
            // Attention key biases are inert under softmax (see the
            // denoiser gradient test); finite differences only see noise.
            if name.ends_with(".attn.bk") {
                continue;
            }
            assert!(err <= FD_REL_TOL, "{name}: relative error {err}");
        }
    }
}
