//! Inverse kinematics by damped (Levenberg-style) weighted least squares.
//!
//! Two entry points share one iteration: [`solve_weighted`] fits keypoint
//! targets with per-keypoint confidence weights, [`solve_constrained`] fits
//! uniformly weighted targets while projecting every iterate onto the
//! range-of-motion box.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{DofKind, JointAngles, JointPositions, SkeletonModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IkTarget {
    pub position: Vector3<f64>,
    pub weight: f64,
    pub active: bool,
}

impl IkTarget {
    pub fn new(position: Vector3<f64>, weight: f64) -> Self {
        Self {
            position,
            weight,
            active: true,
        }
    }

    pub fn inactive() -> Self {
        Self {
            position: Vector3::zeros(),
            weight: 0.0,
            active: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IkConfig {
    pub damping: f64,
    pub max_iterations: usize,
    /// Iteration stops once the undamped Gauss-Newton step, clipped to the
    /// range of motion, changes no DoF by more than this (rad or m).
    pub step_tolerance: f64,
    /// Unweighted RMS target distance (m) below which iteration stops.
    pub residual_tolerance: f64,
    pub rom_enforced: bool,
    pub min_active_targets: usize,
    /// Targets lighter than this are ignored.
    pub weight_floor: f64,
    /// Strength of the pull of keypoint-less joints toward the prior pose,
    /// relative to the mean target weight.
    pub regularization: f64,
    /// Eigen-directions of the normal matrix weaker than this fraction of the
    /// strongest one are left untouched (e.g. twist about a straight limb).
    pub singular_cutoff: f64,
    /// DoFs held at their initial value.
    pub frozen_dofs: Vec<usize>,
}

impl Default for IkConfig {
    fn default() -> Self {
        Self {
            damping: 1e-4,
            max_iterations: 50,
            step_tolerance: 1e-10,
            residual_tolerance: 1e-7,
            rom_enforced: false,
            min_active_targets: 4,
            weight_floor: 1e-6,
            regularization: 1e-3,
            singular_cutoff: 1e-6,
            frozen_dofs: Vec::new(),
        }
    }
}

impl IkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping >= 0.0) {
            return Err(Error::config("ik.damping", "must be non-negative"));
        }
        if !(self.step_tolerance > 0.0) || !(self.residual_tolerance > 0.0) {
            return Err(Error::config("ik.tolerance", "tolerances must be positive"));
        }
        if !(self.regularization >= 0.0) || !(self.weight_floor >= 0.0) {
            return Err(Error::config("ik.regularization", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IkReport {
    pub iterations: usize,
    pub rejected_steps: usize,
    /// Weighted cost `1/2 sum w |target - p|^2` plus the prior term, initial
    /// value then one entry per accepted step.
    pub cost_history: Vec<f64>,
    /// Unweighted RMS distance over active targets at the solution, meters.
    pub rms_residual: f64,
    pub converged: bool,
    pub active_targets: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkSolution {
    pub angles: JointAngles,
    pub positions: JointPositions,
    pub report: IkReport,
}

/// Confidence-weighted fit of keypoint targets; range of motion is not enforced.
/// Keypoint-less joints are pulled toward `q_init`.
pub fn solve_weighted(
    model: &SkeletonModel,
    q_init: &JointAngles,
    targets: &[IkTarget],
    cfg: &IkConfig,
) -> Result<IkSolution> {
    solve_weighted_with_prior(model, q_init, q_init, targets, cfg)
}

/// [`solve_weighted`] with keypoint-less joints pulled toward `prior` instead.
pub fn solve_weighted_with_prior(
    model: &SkeletonModel,
    q_init: &JointAngles,
    prior: &JointAngles,
    targets: &[IkTarget],
    cfg: &IkConfig,
) -> Result<IkSolution> {
    let cfg = IkConfig {
        rom_enforced: false,
        ..cfg.clone()
    };
    solve(model, q_init, prior, targets, &cfg)
}

/// Uniformly weighted fit with every iterate clamped into the range of motion.
/// Target weights are ignored; only the `active` flag is honored.
pub fn solve_constrained(
    model: &SkeletonModel,
    q_init: &JointAngles,
    targets: &[IkTarget],
    cfg: &IkConfig,
) -> Result<IkSolution> {
    solve_constrained_with_prior(model, q_init, q_init, targets, cfg)
}

pub fn solve_constrained_with_prior(
    model: &SkeletonModel,
    q_init: &JointAngles,
    prior: &JointAngles,
    targets: &[IkTarget],
    cfg: &IkConfig,
) -> Result<IkSolution> {
    let cfg = IkConfig {
        rom_enforced: true,
        ..cfg.clone()
    };
    let uniform: Vec<IkTarget> = targets
        .iter()
        .map(|t| IkTarget {
            weight: if t.active { 1.0 } else { 0.0 },
            ..*t
        })
        .collect();
    solve(model, q_init, prior, &uniform, &cfg)
}

/// Convenience for [`solve_constrained`] with every keypoint active.
pub fn uniform_targets(positions: &[Vector3<f64>]) -> Vec<IkTarget> {
    positions.iter().map(|p| IkTarget::new(*p, 1.0)).collect()
}

struct Problem<'a> {
    model: &'a SkeletonModel,
    /// `(joint, weight, target)` for every active target.
    active: Vec<(usize, f64, Vector3<f64>)>,
    prior: &'a JointAngles,
    /// Per-DoF stiffness of the prior term.
    stiffness: Vec<f64>,
}

impl Problem<'_> {
    fn cost(&self, q: &JointAngles, p: &JointPositions) -> f64 {
        let fit: f64 = self
            .active
            .iter()
            .map(|(j, w, t)| w * (t - p.0[*j]).norm_squared())
            .sum();
        let prior: f64 = self
            .stiffness
            .iter()
            .zip(q.0.iter().zip(self.prior.0.iter()))
            .map(|(k, (a, b))| k * (a - b) * (a - b))
            .sum();
        0.5 * (fit + prior)
    }

    /// `cost(q1, p1) - cost(q0, p0)` evaluated from the differences, which
    /// stays accurate when the two costs agree to many digits.
    fn cost_change(&self, q0: &JointAngles, p0: &JointPositions, q1: &JointAngles, p1: &JointPositions) -> f64 {
        let fit: f64 = self
            .active
            .iter()
            .map(|(j, w, t)| w * (p0.0[*j] - p1.0[*j]).dot(&(2.0 * t - p0.0[*j] - p1.0[*j])))
            .sum();
        let prior: f64 = self
            .stiffness
            .iter()
            .enumerate()
            .map(|(d, k)| k * (q1.0[d] - q0.0[d]) * (q1.0[d] + q0.0[d] - 2.0 * self.prior.0[d]))
            .sum();
        0.5 * (fit + prior)
    }

    fn rms(&self, p: &JointPositions) -> f64 {
        let ss: f64 = self.active.iter().map(|(j, _, t)| (t - p.0[*j]).norm_squared()).sum();
        (ss / self.active.len() as f64).sqrt()
    }

    /// Gauss-Newton normal matrix `J^T W J` and gradient `J^T W r`.
    fn normal_equations(&self, q: &JointAngles, p: &JointPositions) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.model.num_dofs();
        let jac = self.model.jacobian(q);
        let mut jtwj = DMatrix::zeros(n, n);
        let mut jtwr = DVector::zeros(n);
        for (j, w, t) in &self.active {
            let rows = jac.rows(3 * j, 3);
            let r = t - p.0[*j];
            jtwj.gemm_tr(*w, &rows, &rows, 1.0);
            jtwr.gemv_tr(*w, &rows, &r, 1.0);
        }
        for (d, &k) in self.stiffness.iter().enumerate() {
            jtwj[(d, d)] += k;
            jtwr[d] += k * (self.prior.0[d] - q.0[d]);
        }
        (jtwj, jtwr)
    }
}

fn solve(
    model: &SkeletonModel,
    q_init: &JointAngles,
    prior: &JointAngles,
    targets: &[IkTarget],
    cfg: &IkConfig,
) -> Result<IkSolution> {
    cfg.validate()?;
    let n = model.num_dofs();
    if targets.len() != model.num_keypoints() {
        return Err(Error::config("targets", format!("expected {} targets", model.num_keypoints())));
    }
    if q_init.len() != n {
        return Err(Error::config("q_init", format!("expected {n} joint angles")));
    }
    if prior.len() != n {
        return Err(Error::config("prior", format!("expected {n} joint angles")));
    }
    if !q_init.is_finite() || !prior.is_finite() {
        return Err(Error::NumericalFailure("non-finite initial joint angles".into()));
    }
    let mut active = Vec::new();
    for (k, t) in targets.iter().enumerate() {
        if !(t.weight.is_finite() && t.weight >= 0.0) || t.position.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure(format!("target {k} is not finite")));
        }
        if t.active && t.weight >= cfg.weight_floor {
            active.push((model.keypoint_joints()[k], t.weight, t.position));
        }
    }
    let required = cfg.min_active_targets.min(model.num_keypoints());
    if active.len() < required {
        return Err(Error::IllPosed {
            active: active.len(),
            required,
        });
    }

    let bounds = model.rom_bounds();
    let mut frozen = vec![false; n];
    for &d in &cfg.frozen_dofs {
        if d >= n {
            return Err(Error::config("ik.frozen_dofs", format!("dof {d} out of range")));
        }
        frozen[d] = true;
    }
    let mean_weight = active.iter().map(|a| a.1).sum::<f64>() / active.len().max(1) as f64;
    let stiffness = regularized_dofs(model)
        .into_iter()
        .map(|r| if r { cfg.regularization * mean_weight } else { 0.0 })
        .collect();
    let problem = Problem {
        model,
        active,
        prior,
        stiffness,
    };

    let mut q = if cfg.rom_enforced {
        model.clamp_to_rom(q_init)
    } else {
        q_init.clone()
    };
    let mut p = model.forward_kinematics(&q);
    let mut cost = problem.cost(&q, &p);
    let mut report = IkReport {
        iterations: 0,
        rejected_steps: 0,
        cost_history: vec![cost],
        rms_residual: problem.rms(&p),
        converged: false,
        active_targets: problem.active.len(),
    };
    let mut mu = cfg.damping;

    while report.iterations < cfg.max_iterations {
        if problem.rms(&p) < cfg.residual_tolerance {
            report.converged = true;
            break;
        }
        let (jtwj, grad) = problem.normal_equations(&q, &p);

        // projected Newton: drop DoFs pinned at a bound with the descent direction pointing out
        let free: Vec<usize> = (0..n)
            .filter(|&d| {
                if frozen[d] {
                    return false;
                }
                if cfg.rom_enforced {
                    let (lo, hi) = bounds[d];
                    if (q.0[d] <= lo && grad[d] < 0.0) || (q.0[d] >= hi && grad[d] > 0.0) {
                        return false;
                    }
                }
                true
            })
            .collect();
        if free.is_empty() {
            report.converged = true;
            break;
        }
        let sub = jtwj.select_rows(&free).select_columns(&free);
        let sub_grad = grad.select_rows(&free);

        let eigen = sub.symmetric_eigen();
        if eigen.eigenvalues.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure("non-finite normal equations".into()));
        }
        let cutoff = cfg.singular_cutoff * eigen.eigenvalues.amax();
        let projected = eigen.eigenvectors.tr_mul(&sub_grad);

        // stationary once the undamped step, clipped to the bounds, is negligible
        let mut newton = q.clone();
        for (i, &lambda) in eigen.eigenvalues.iter().enumerate() {
            if lambda > cutoff {
                for (r, &d) in free.iter().enumerate() {
                    newton.0[d] += projected[i] / lambda * eigen.eigenvectors[(r, i)];
                }
            }
        }
        if cfg.rom_enforced {
            newton = model.clamp_to_rom(&newton);
        }
        if (&newton.0 - &q.0).amax() < cfg.step_tolerance {
            report.converged = true;
            break;
        }
        report.iterations += 1;

        let start_mu = mu;
        let mut accepted = None;
        loop {
            let mut step = DVector::zeros(free.len());
            for (i, &lambda) in eigen.eigenvalues.iter().enumerate() {
                if lambda > cutoff {
                    step.axpy(projected[i] / (lambda + mu), &eigen.eigenvectors.column(i), 1.0);
                }
            }
            if step.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericalFailure("non-finite IK step".into()));
            }
            let mut candidate = q.clone();
            for (i, &d) in free.iter().enumerate() {
                candidate.0[d] += step[i];
            }
            if cfg.rom_enforced {
                candidate = model.clamp_to_rom(&candidate);
            }
            let cand_p = model.forward_kinematics(&candidate);
            let change = problem.cost_change(&q, &p, &candidate, &cand_p);
            if !change.is_finite() {
                return Err(Error::NumericalFailure("non-finite IK residual".into()));
            }
            if change < 0.0 {
                mu = (mu / 10.0).max(1e-12);
                accepted = Some((candidate, cand_p, (cost + change).min(cost)));
                break;
            }
            report.rejected_steps += 1;
            mu = (mu * 10.0).max(1e-12);
            if mu > 1e12 {
                break;
            }
        }
        let Some((candidate, cand_p, cand_cost)) = accepted else {
            if start_mu > cfg.damping {
                // only heavier damping than the base was tried
                mu = cfg.damping;
                continue;
            }
            // no descent direction left: stationary to working precision
            report.converged = true;
            break;
        };
        q = candidate;
        p = cand_p;
        cost = cand_cost;
        report.cost_history.push(cost);
    }
    report.rms_residual = problem.rms(&p);
    Ok(IkSolution {
        angles: q,
        positions: p,
        report,
    })
}

/// Rotational DoFs of non-root joints that carry no keypoint.
fn regularized_dofs(model: &SkeletonModel) -> Vec<bool> {
    let keyed = model.keypoint_joints();
    model
        .joints()
        .iter()
        .enumerate()
        .flat_map(|(j, joint)| {
            let on = joint.parent.is_some() && !keyed.contains(&j) && !matches!(joint.kind, DofKind::Fixed);
            std::iter::repeat_n(on, joint.kind.count())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::tests::{moderate_pose, random_pose};
    use crate::skeleton::{JointConfig, KeypointConfig, SkeletonConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn keypoint_targets(model: &SkeletonModel, q: &JointAngles) -> Vec<IkTarget> {
        let p = model.forward_kinematics(q);
        model.keypoint_joints().iter().map(|&j| IkTarget::new(p.0[j], 1.0)).collect()
    }

    fn one_link() -> SkeletonModel {
        SkeletonModel::from_config(&SkeletonConfig {
            version: 1,
            name: "one-link".into(),
            neck: None,
            torso: None,
            joints: vec![
                JointConfig {
                    name: "base".into(),
                    parent: None,
                    dof: "hinge".into(),
                    axis: Some([0.0, 0.0, 1.0]),
                    axis_order: None,
                    offset: [0.0; 3],
                    rom: vec![[None, None]],
                },
                JointConfig {
                    name: "tip".into(),
                    parent: Some("base".into()),
                    dof: "fixed".into(),
                    axis: None,
                    axis_order: None,
                    offset: [1.0, 0.0, 0.0],
                    rom: vec![],
                },
            ],
            keypoints: vec![KeypointConfig {
                name: "tip".into(),
                joint: "tip".into(),
            }],
            upper_body_keypoints: vec![],
            mirror_pairs: vec![],
            measured_links: vec![],
            trunk: None,
            rom_reference: None,
        })
        .unwrap()
    }

    #[test]
    fn zero_residual_start_is_unchanged() {
        let m = SkeletonModel::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_pose(&m, &mut rng);
        let mut targets = keypoint_targets(&m, &q);
        for (k, t) in targets.iter_mut().enumerate() {
            t.weight = 0.5 + k as f64;
        }
        let sol = solve_weighted(&m, &q, &targets, &IkConfig::default()).unwrap();
        assert!((&sol.angles.0 - &q.0).amax() < 1e-9);
        assert_eq!(sol.report.iterations, 0);
    }

    #[test]
    fn one_link_quarter_turn() {
        let m = one_link();
        let targets = [IkTarget::new(Vector3::new(0.0, 1.0, 0.0), 1.0)];
        let sol = solve_weighted(&m, &JointAngles::zeros(1), &targets, &IkConfig::default()).unwrap();
        assert!((sol.angles.0[0] - std::f64::consts::FRAC_PI_2).abs() < 1e-6);
    }

    #[test]
    fn zero_weight_targets_are_inert() {
        let m = SkeletonModel::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let truth = moderate_pose(&m, &mut rng);
        let mut init = truth.clone();
        for v in init.0.iter_mut().skip(3) {
            *v += 0.05;
        }
        let mut a = keypoint_targets(&m, &truth);
        for t in &mut a {
            t.weight = 5.0;
        }
        let mut b = a.clone();
        b[0].weight = 0.0;
        let cfg = IkConfig {
            max_iterations: 200,
            regularization: 0.0,
            ..IkConfig::default()
        };
        let sa = solve_weighted(&m, &init, &a, &cfg).unwrap();
        let sb = solve_weighted(&m, &init, &b, &cfg).unwrap();
        assert!(sa.report.rms_residual < 1e-6 && sb.report.rms_residual < 1e-6);
        let pa = &sa.positions;
        let pb = &sb.positions;
        for &j in m.keypoint_joints() {
            assert!((pa.0[j] - pb.0[j]).norm() < 1e-6);
        }
    }

    #[test]
    fn too_few_targets_is_ill_posed() {
        let m = SkeletonModel::standard();
        let mut targets = keypoint_targets(&m, &JointAngles::zeros(40));
        for t in targets.iter_mut().skip(3) {
            t.weight = 1e-9;
        }
        assert!(matches!(
            solve_weighted(&m, &JointAngles::zeros(40), &targets, &IkConfig::default()),
            Err(Error::IllPosed { active: 3, required: 4 })
        ));
    }

    #[test]
    fn non_finite_start_is_rejected() {
        let m = SkeletonModel::standard();
        let targets = keypoint_targets(&m, &JointAngles::zeros(40));
        let mut q = JointAngles::zeros(40);
        q.0[7] = f64::NAN;
        assert!(matches!(
            solve_weighted(&m, &q, &targets, &IkConfig::default()),
            Err(Error::NumericalFailure(_))
        ));
    }

    #[test]
    fn knee_target_beyond_bound_stops_at_bound() {
        let m = SkeletonModel::standard();
        let knee = m.dof_start(m.joint_index("l_knee").unwrap());
        let mut demand = JointAngles::zeros(40);
        demand.0[2] = 0.95;
        demand.0[knee] = -0.3;
        let targets = keypoint_targets(&m, &demand);
        let mut init = demand.clone();
        init.0[knee] = 0.2;
        let sol = solve_constrained(&m, &init, &targets, &IkConfig::default()).unwrap();
        assert_eq!(sol.angles.0[knee], 0.0);
        assert!(m.within_rom(&sol.angles));
        assert!(sol.report.rms_residual > 0.0);
    }

    #[test]
    fn inactive_bounds_match_weighted_solve() {
        let m = SkeletonModel::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let truth = m.clamp_to_rom(&random_pose(&m, &mut rng));
        let mut init = truth.clone();
        init.0[0] += 0.02;
        for v in init.0.iter_mut().skip(6) {
            *v *= 0.97;
        }
        let init = m.clamp_to_rom(&init);
        let targets = keypoint_targets(&m, &truth);
        let cfg = IkConfig {
            max_iterations: 200,
            ..IkConfig::default()
        };
        let c = solve_constrained(&m, &init, &targets, &cfg).unwrap();
        let w = solve_weighted(&m, &init, &targets, &cfg).unwrap();
        for &j in m.keypoint_joints() {
            assert!((c.positions.0[j] - w.positions.0[j]).norm() < 1e-6);
        }
    }

    #[test]
    fn cost_is_monotone_and_solution_is_a_fixed_point() {
        let m = SkeletonModel::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let truth = moderate_pose(&m, &mut rng);
            let mut targets = keypoint_targets(&m, &truth);
            for t in &mut targets {
                t.position += Vector3::new(0.01, -0.02, 0.015) * (rand::Rng::random::<f64>(&mut rng) - 0.5);
            }
            let start = m.clamp_to_rom(&moderate_pose(&m, &mut rng));
            let cfg = IkConfig {
                max_iterations: 500,
                ..IkConfig::default()
            };
            let first = solve_constrained(&m, &start, &targets, &cfg).unwrap();
            assert!(first.report.cost_history.windows(2).all(|w| w[1] <= w[0]));
            let again = solve_constrained_with_prior(&m, &first.angles, &start, &targets, &IkConfig::default()).unwrap();
            assert!((&again.angles.0 - &first.angles.0).amax() < 1e-8);
        }
    }

    #[test]
    fn prior_at_truth_recovers_the_pose() {
        let m = SkeletonModel::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let truth = moderate_pose(&m, &mut rng);
        let mut init = truth.clone();
        for v in init.0.iter_mut().skip(3) {
            *v -= 0.04;
        }
        let targets = keypoint_targets(&m, &truth);
        let cfg = IkConfig {
            max_iterations: 200,
            ..IkConfig::default()
        };
        let sol = solve_weighted_with_prior(&m, &init, &truth, &targets, &cfg).unwrap();
        assert!(sol.report.rms_residual < 1e-6);
        let chest = m.dof_start(m.joint_index("chest").unwrap());
        assert!((sol.angles.0[chest] - truth.0[chest]).abs() < 1e-5);
    }

    #[test]
    fn deterministic() {
        let m = SkeletonModel::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let truth = random_pose(&m, &mut rng);
        let targets = keypoint_targets(&m, &truth);
        let a = solve_weighted(&m, &JointAngles::zeros(40), &targets, &IkConfig::default()).unwrap();
        let b = solve_weighted(&m, &JointAngles::zeros(40), &targets, &IkConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn weight_scaling_keeps_the_argmin() {
        let m = SkeletonModel::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let truth = random_pose(&m, &mut rng);
        let mut targets = keypoint_targets(&m, &truth);
        for (k, t) in targets.iter_mut().enumerate() {
            t.weight = 1.0 + (k % 4) as f64;
            t.position.x += 0.004 * ((k % 3) as f64 - 1.0);
        }
        let scaled: Vec<_> = targets.iter().map(|t| IkTarget { weight: t.weight * 7.5, ..*t }).collect();
        let cfg = IkConfig {
            max_iterations: 300,
            ..IkConfig::default()
        };
        let a = solve_weighted(&m, &truth, &targets, &cfg).unwrap();
        let b = solve_weighted(&m, &truth, &scaled, &cfg).unwrap();
        for &j in m.keypoint_joints() {
            assert!((a.positions.0[j] - b.positions.0[j]).norm() < 1e-6);
        }
    }
}
