//! Resolved-rate reaching: fixed-length posture steps along the
//! pseudoinverse direction, either in the learned internal space (F-based)
//! or in true tip coordinates (G-based).

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arm::{
    analytic_jacobian, forward_kinematics, in_workspace, ArmGeometry, EndEffectorConfig, ProprioState,
    WorkspaceLimits,
};
use crate::error::{Error, Result};
use crate::exploration::{euclidean, format_f64, ExplorationConfig};
use crate::jacobian::{pseudoinverse, to_dmatrix, LearnedMap};

/// `|dp|` below this is a stall rather than a direction.
pub const STALL_THRESHOLD: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReachTarget {
    Internal(Vec<f64>),
    Config(EndEffectorConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReachTask {
    pub start: ProprioState,
    pub target: ReachTarget,
    /// Posture step length (radians).
    pub step: f64,
    /// Stop once the controlled quantity is this close to the target.
    pub tolerance: f64,
    /// `None` means ten times the straight-line path length over `step`.
    pub max_iters: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlSpace {
    Internal,
    Config,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub t: usize,
    pub p: ProprioState,
    /// Learned representation at `p`, when a map is available.
    pub xi: Option<Vec<f64>>,
    pub end_effector: EndEffectorConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub space: ControlSpace,
    pub steps: Vec<TrajectoryStep>,
    pub converged: bool,
    pub stalled: bool,
    pub iterations: usize,
}

impl Trajectory {
    pub fn last(&self) -> &TrajectoryStep {
        self.steps.last().expect("trajectory has a start")
    }

    pub fn final_end_effector(&self) -> EndEffectorConfig {
        self.last().end_effector
    }

    /// Values of the controlled quantity along the path.
    pub fn controlled(&self) -> Vec<Vec<f64>> {
        self.steps
            .iter()
            .map(|s| match self.space {
                ControlSpace::Internal => s.xi.clone().expect("internal trajectory records xi"),
                ControlSpace::Config => s.end_effector.0.to_vec(),
            })
            .collect()
    }

    /// Fills in `xi` for every step.
    pub fn annotate_internal(&mut self, map: &LearnedMap) {
        for s in &mut self.steps {
            s.xi = Some(map.internal(&s.p));
        }
    }

    /// `t, m1, m2, m3, xi_1..xi_n, ee_x, ee_y`; `xi` columns are blank when
    /// not recorded.
    pub fn to_csv(&self) -> String {
        let n_xi = self
            .steps
            .iter()
            .find_map(|s| s.xi.as_ref().map(Vec::len))
            .unwrap_or(0);
        let mut out = String::from("t,m1,m2,m3");
        for k in 1..=n_xi {
            let _ = write!(out, ",xi_{k}");
        }
        out.push_str(",ee_x,ee_y\n");
        for s in &self.steps {
            let _ = write!(out, "{}", s.t);
            for v in s.p.0 {
                let _ = write!(out, ",{}", format_f64(v));
            }
            match &s.xi {
                Some(xi) => xi.iter().for_each(|v| {
                    let _ = write!(out, ",{}", format_f64(*v));
                }),
                None => (0..n_xi).for_each(|_| out.push(',')),
            }
            let _ = writeln!(
                out,
                ",{},{}",
                format_f64(s.end_effector.x()),
                format_f64(s.end_effector.y())
            );
        }
        out
    }
}

fn default_budget(path_length: f64, step: f64) -> usize {
    ((10.0 * path_length / step).ceil() as usize).max(100)
}

/// The shared update loop. `measure` gives the controlled quantity and
/// `jacobian` its derivative w.r.t. raw joint angles.
fn reach_loop<M, J>(
    task: &ReachTask,
    target: &[f64],
    space: ControlSpace,
    geom: &ArmGeometry,
    measure: M,
    jacobian: J,
    record_xi: bool,
) -> Result<Trajectory>
where
    M: Fn(&ProprioState) -> Vec<f64>,
    J: Fn(&ProprioState) -> DMatrix<f64>,
{
    if !(task.step > 0.0) || !(task.tolerance > 0.0) {
        return Err(Error::InvalidArgument("step and tolerance must be positive".into()));
    }
    let mut p = task.start;
    let mut current = measure(&p);
    if current.len() != target.len() {
        return Err(Error::InvalidArgument("target dimension mismatch".into()));
    }
    let max_iters = task
        .max_iters
        .unwrap_or_else(|| default_budget(euclidean(&current, target), task.step));
    let record = |t: usize, p: &ProprioState, current: &[f64]| TrajectoryStep {
        t,
        p: *p,
        xi: record_xi.then(|| current.to_vec()),
        end_effector: forward_kinematics(p, geom),
    };
    let mut steps = vec![record(0, &p, &current)];
    let mut converged = false;
    let mut stalled = false;
    let mut t = 0;
    loop {
        if euclidean(&current, target) <= task.tolerance {
            converged = true;
            break;
        }
        if t >= max_iters {
            break;
        }
        let err: Vec<f64> = target.iter().zip(&current).map(|(a, b)| a - b).collect();
        let dp: DVector<f64> = pseudoinverse(&jacobian(&p)) * DVector::from_vec(err);
        let norm = dp.norm();
        if !(norm >= STALL_THRESHOLD) {
            stalled = true;
            break;
        }
        for (k, a) in p.0.iter_mut().enumerate() {
            *a += task.step * dp[k] / norm;
        }
        t += 1;
        current = measure(&p);
        steps.push(record(t, &p, &current));
    }
    Ok(Trajectory {
        space,
        steps,
        converged,
        stalled,
        iterations: t,
    })
}

/// F-based reaching toward an internal target. Tip positions are recorded
/// for evaluation only.
pub fn reach_f(map: &LearnedMap, task: &ReachTask, geom: &ArmGeometry, jac_eps: f64) -> Result<Trajectory> {
    let ReachTarget::Internal(target) = &task.target else {
        return Err(Error::InvalidArgument("F-based reaching needs an internal target".into()));
    };
    reach_loop(
        task,
        target,
        ControlSpace::Internal,
        geom,
        |p| map.internal(p),
        |p| map.jacobian_raw(p, jac_eps),
        true,
    )
}

/// G-based reaching toward a tip position using the analytic Jacobian.
pub fn reach_g(task: &ReachTask, geom: &ArmGeometry) -> Result<Trajectory> {
    let ReachTarget::Config(target) = &task.target else {
        return Err(Error::InvalidArgument("G-based reaching needs a tip target".into()));
    };
    reach_loop(
        task,
        &target.0,
        ControlSpace::Config,
        geom,
        |p| forward_kinematics(p, geom).0.to_vec(),
        |p| to_dmatrix(&analytic_jacobian(p, geom)),
        false,
    )
}

/// Posture with `G(p) = target`, by damped Newton steps on the analytic
/// pseudoinverse starting from `start`. Fails if `tol` is not met.
pub fn solve_configuration(
    target: &EndEffectorConfig,
    start: &ProprioState,
    geom: &ArmGeometry,
    tol: f64,
    max_iters: usize,
) -> Result<ProprioState> {
    if (target.as_vector() - geom.base()).norm() > geom.reach() {
        return Err(Error::Unreachable(format!(
            "({:.4}, {:.4}) lies beyond the arm's reach",
            target.x(),
            target.y()
        )));
    }
    let mut p = *start;
    for _ in 0..max_iters {
        let c = forward_kinematics(&p, geom);
        let err = target.as_vector() - c.as_vector();
        if err.norm() <= tol {
            return Ok(p);
        }
        let j = analytic_jacobian(&p, geom);
        let dp = pseudoinverse(&to_dmatrix(&j)) * DVector::from_column_slice(err.as_slice());
        // Cap the step to stay in the linear regime.
        let scale = (0.25 / dp.norm()).min(1.0);
        for (k, a) in p.0.iter_mut().enumerate() {
            *a += scale * dp[k];
        }
    }
    Err(Error::Unreachable(format!(
        "descent to ({:.4}, {:.4}) did not converge",
        target.x(),
        target.y()
    )))
}

/// Tolerance on `|G(p*) - c*|` for consistent targets.
pub const TARGET_TOLERANCE: f64 = 1e-6;

/// Starting points tried by [`posture_in_region`].
pub const REGION_TRIES: usize = 200;

/// A posture inside the explored box reaching `target`. Descent starts from
/// `first` if given, then from random postures in the box.
pub fn posture_in_region(
    target: &EndEffectorConfig,
    first: Option<&ProprioState>,
    geom: &ArmGeometry,
    region: &ExplorationConfig,
    limits: &WorkspaceLimits,
    seed: u64,
) -> Result<ProprioState> {
    if (target.as_vector() - geom.base()).norm() > geom.reach() {
        return Err(Error::Unreachable(format!(
            "({:.4}, {:.4}) lies beyond the arm's reach",
            target.x(),
            target.y()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let random = std::iter::repeat_with(|| {
        let mut start = region.reference;
        for (a, r) in start.0.iter_mut().zip(region.reference.0) {
            *a = r + rng.gen_range(-region.amplitude..=region.amplitude);
        }
        start
    });
    for start in first.copied().into_iter().chain(random).take(REGION_TRIES) {
        if !in_workspace(&start, limits, geom) {
            continue;
        }
        let Ok(p) = solve_configuration(target, &start, geom, TARGET_TOLERANCE * 1e-3, 200) else {
            continue;
        };
        if region.contains(&p) && in_workspace(&p, limits, geom) {
            return Ok(p);
        }
    }
    Err(Error::Unreachable(format!(
        "no posture inside the explored region reaches ({:.4}, {:.4})",
        target.x(),
        target.y()
    )))
}

/// Picks a random posture `p*` reaching `c*` (random start in the explored
/// box, so the redundant joint is randomized) and returns `(F(p*), p*)`.
pub fn make_consistent_targets(
    map: &LearnedMap,
    target: &EndEffectorConfig,
    geom: &ArmGeometry,
    region: &ExplorationConfig,
    limits: &WorkspaceLimits,
    seed: u64,
) -> Result<(Vec<f64>, ProprioState)> {
    let p = posture_in_region(target, None, geom, region, limits, seed)?;
    Ok((map.internal(&p), p))
}

/// Largest distance from any point to the segment `[a, b]`.
pub fn max_deviation_from_segment(points: &[Vec<f64>], a: &[f64], b: &[f64]) -> f64 {
    let ab: Vec<f64> = b.iter().zip(a).map(|(x, y)| x - y).collect();
    let len_sq: f64 = ab.iter().map(|v| v * v).sum();
    points
        .iter()
        .map(|pt| {
            let ap: Vec<f64> = pt.iter().zip(a).map(|(x, y)| x - y).collect();
            let t = if len_sq > 0.0 {
                (ap.iter().zip(&ab).map(|(x, y)| x * y).sum::<f64>() / len_sq).clamp(0.0, 1.0)
            } else {
                0.0
            };
            ap.iter()
                .zip(&ab)
                .map(|(x, y)| (x - t * y).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max)
}

/// Fraction of steps where the distance to `target` did not increase.
pub fn monotone_fraction(values: &[Vec<f64>], target: &[f64]) -> f64 {
    if values.len() < 2 {
        return 1.0;
    }
    let d: Vec<f64> = values.iter().map(|v| euclidean(v, target)).collect();
    let ok = d.windows(2).filter(|w| w[1] <= w[0]).count();
    ok as f64 / (d.len() - 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exploration::ProprioNormalization;
    use crate::mlp::NetworkParams;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn reference() -> ProprioState {
        ProprioState::new(PI / 5.0, -3.0 * PI / 5.0, 3.0 * PI / 5.0)
    }

    fn some_map() -> LearnedMap {
        LearnedMap {
            params: NetworkParams::init_weights(3, 30, 2, 21),
            proprio: ProprioNormalization {
                mean: reference().0,
                scale: PI / 2.0,
            },
        }
    }

    #[test]
    fn already_at_target_takes_no_steps() {
        let geom = ArmGeometry::default();
        let map = some_map();
        let task = ReachTask {
            start: reference(),
            target: ReachTarget::Internal(map.internal(&reference())),
            step: 1e-3,
            tolerance: 1e-3,
            max_iters: None,
        };
        let tr = reach_f(&map, &task, &geom, 1e-3).unwrap();
        assert!(tr.converged);
        assert_eq!(tr.iterations, 0);
        assert_eq!(tr.steps.len(), 1);

        let task = ReachTask {
            target: ReachTarget::Config(forward_kinematics(&reference(), &geom)),
            ..task
        };
        let tr = reach_g(&task, &geom).unwrap();
        assert!(tr.converged);
        assert_eq!(tr.iterations, 0);
    }

    #[test]
    fn g_based_reach_is_straight_with_fixed_steps() {
        let geom = ArmGeometry::default();
        let start = reference();
        let c0 = forward_kinematics(&start, &geom);
        let target = EndEffectorConfig([c0.x() - 0.3, c0.y() + 0.4]);
        let task = ReachTask {
            start,
            target: ReachTarget::Config(target),
            step: 1e-3,
            tolerance: 1e-3,
            max_iters: None,
        };
        let tr = reach_g(&task, &geom).unwrap();
        assert!(tr.converged, "iterations {}", tr.iterations);
        assert!(tr.final_end_effector().distance(&target) <= 1e-3);
        for w in tr.steps.windows(2) {
            let d = euclidean(&w[0].p.0, &w[1].p.0);
            assert_abs_diff_eq!(d, 1e-3, epsilon = 1e-12);
        }
        let path = tr.controlled();
        assert!(max_deviation_from_segment(&path, &c0.0, &target.0) <= 3e-3);
        assert!(monotone_fraction(&path, &target.0) >= 0.95);
    }

    #[test]
    fn f_based_reach_moves_straight_in_internal_space() {
        let geom = ArmGeometry::default();
        let map = some_map();
        let start = reference();
        let goal = ProprioState::new(start.0[0] + 0.2, start.0[1] - 0.1, start.0[2] + 0.1);
        let xi_star = map.internal(&goal);
        let task = ReachTask {
            start,
            target: ReachTarget::Internal(xi_star.clone()),
            step: 1e-3,
            tolerance: 1e-3,
            max_iters: None,
        };
        let tr = reach_f(&map, &task, &geom, 1e-3).unwrap();
        assert!(tr.converged);
        let path = tr.controlled();
        assert!(max_deviation_from_segment(&path, &path[0], &xi_star) <= 3e-3);
        assert!(euclidean(&path[path.len() - 1], &xi_star) <= 1e-3);
    }

    #[test]
    fn wrong_target_kind_rejected() {
        let geom = ArmGeometry::default();
        let task = ReachTask {
            start: reference(),
            target: ReachTarget::Internal(vec![0.0, 0.0]),
            step: 1e-3,
            tolerance: 1e-3,
            max_iters: None,
        };
        assert!(reach_g(&task, &geom).is_err());
    }

    #[test]
    fn zero_jacobian_stalls() {
        let geom = ArmGeometry::default();
        let map = LearnedMap {
            params: NetworkParams::zeros(3, 4, 2),
            proprio: ProprioNormalization { mean: [0.0; 3], scale: 1.0 },
        };
        let task = ReachTask {
            start: reference(),
            target: ReachTarget::Internal(vec![0.5, 0.5]),
            step: 1e-3,
            tolerance: 1e-3,
            max_iters: None,
        };
        let tr = reach_f(&map, &task, &geom, 1e-3).unwrap();
        assert!(tr.stalled);
        assert!(!tr.converged);
    }

    #[test]
    fn solver_and_consistent_targets() {
        let geom = ArmGeometry::default();
        let map = some_map();
        let region = ExplorationConfig::default();
        let limits = WorkspaceLimits::default();
        let c = forward_kinematics(&reference(), &geom);
        let (xa, pa) = make_consistent_targets(&map, &c, &geom, &region, &limits, 1).unwrap();
        let (xb, pb) = make_consistent_targets(&map, &c, &geom, &region, &limits, 2).unwrap();
        assert!(forward_kinematics(&pa, &geom).distance(&c) <= TARGET_TOLERANCE);
        assert!(forward_kinematics(&pb, &geom).distance(&c) <= TARGET_TOLERANCE);
        assert!(euclidean(&pa.0, &pb.0) > 1e-3);
        assert_eq!(xa, map.internal(&pa));
        assert_eq!(xb, map.internal(&pb));

        let far = EndEffectorConfig([3.5, 0.0]);
        assert!(matches!(
            make_consistent_targets(&map, &far, &geom, &region, &limits, 1),
            Err(Error::Unreachable(_))
        ));
        assert!(solve_configuration(&far, &reference(), &geom, 1e-9, 100).is_err());
    }

    #[test]
    fn segment_deviation() {
        let pts = vec![vec![0.5, 0.1], vec![1.5, 0.0], vec![-0.2, 0.0]];
        let d = max_deviation_from_segment(&pts, &[0.0, 0.0], &[1.0, 0.0]);
        assert_abs_diff_eq!(d, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn trajectory_csv_columns() {
        let geom = ArmGeometry::default();
        let mut tr = Trajectory {
            space: ControlSpace::Config,
            steps: vec![TrajectoryStep {
                t: 0,
                p: ProprioState::new(0.0, 0.0, 0.0),
                xi: None,
                end_effector: forward_kinematics(&ProprioState::new(0.0, 0.0, 0.0), &geom),
            }],
            converged: true,
            stalled: false,
            iterations: 0,
        };
        assert!(tr.to_csv().starts_with("t,m1,m2,m3,ee_x,ee_y\n0,"));
        tr.annotate_internal(&some_map());
        let csv = tr.to_csv();
        assert!(csv.starts_with("t,m1,m2,m3,xi_1,xi_2,ee_x,ee_y\n"));
        assert_eq!(csv.lines().nth(1).unwrap().split(',').count(), 8);
    }
}
