//! Planar three-link arm with equal segment lengths.
//!
//! Joint angles are relative: segment `k` points along the cumulative angle
//! `theta_k = m_1 + ... + m_k`, measured from the positive x-axis.

use std::f64::consts::PI;

use nalgebra::{Matrix2x3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

/// Number of joints (proprioceptive dimension).
pub const N_JOINTS: usize = 3;

/// Joint angles `[m_1, m_2, m_3]` in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProprioState(pub [f64; N_JOINTS]);

impl ProprioState {
    pub fn new(m1: f64, m2: f64, m3: f64) -> Self {
        Self([m1, m2, m3])
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::from(self.0)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self([v[0], v[1], v[2]])
    }

    /// Each angle mapped into `(-pi, pi]`.
    pub fn wrapped(&self) -> Self {
        Self(self.0.map(wrap_angle))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|a| a.is_finite())
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Cartesian position of the arm tip, in units of the segment length.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndEffectorConfig(pub [f64; 2]);

impl EndEffectorConfig {
    pub fn x(&self) -> f64 {
        self.0[0]
    }

    pub fn y(&self) -> f64 {
        self.0[1]
    }

    pub fn as_vector(&self) -> Vector2<f64> {
        Vector2::from(self.0)
    }

    pub fn distance(&self, other: &Self) -> f64 {
        (self.as_vector() - other.as_vector()).norm()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmGeometry {
    pub segment_length: f64,
    pub base_position: [f64; 2],
}

impl Default for ArmGeometry {
    fn default() -> Self {
        Self {
            segment_length: 1.0,
            base_position: [0.0, 0.0],
        }
    }
}

impl ArmGeometry {
    /// Radius of the disk reachable by the tip around the base.
    pub fn reach(&self) -> f64 {
        N_JOINTS as f64 * self.segment_length
    }

    pub fn base(&self) -> Vector2<f64> {
        Vector2::from(self.base_position)
    }
}

/// Admissible region of the proprioceptive space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkspaceLimits {
    pub joint_min: f64,
    pub joint_max: f64,
    /// Minimum tip height; the arm stays above its mounting plane.
    pub min_tip_y: f64,
}

impl Default for WorkspaceLimits {
    fn default() -> Self {
        Self {
            joint_min: -PI,
            joint_max: PI,
            min_tip_y: 0.0,
        }
    }
}

fn cumulative_angles(p: &ProprioState) -> [f64; N_JOINTS] {
    let mut theta = [0.0; N_JOINTS];
    let mut acc = 0.0;
    for (t, m) in theta.iter_mut().zip(p.0) {
        acc += m;
        *t = acc;
    }
    theta
}

/// Tip position `G(p)`.
pub fn forward_kinematics(p: &ProprioState, geom: &ArmGeometry) -> EndEffectorConfig {
    let l = geom.segment_length;
    let mut pos = geom.base_position;
    for theta in cumulative_angles(p) {
        pos[0] += l * theta.cos();
        pos[1] += l * theta.sin();
    }
    EndEffectorConfig(pos)
}

/// Analytic Jacobian `dG/dp`; column `k` sums the contributions of every
/// segment at or after joint `k`.
pub fn analytic_jacobian(p: &ProprioState, geom: &ArmGeometry) -> Matrix2x3<f64> {
    let l = geom.segment_length;
    let theta = cumulative_angles(p);
    let mut jac = Matrix2x3::zeros();
    for k in 0..N_JOINTS {
        for &t in &theta[k..] {
            jac[(0, k)] -= l * t.sin();
            jac[(1, k)] += l * t.cos();
        }
    }
    jac
}

pub fn in_workspace(p: &ProprioState, limits: &WorkspaceLimits, geom: &ArmGeometry) -> bool {
    p.is_finite()
        && p.0
            .iter()
            .all(|&a| a >= limits.joint_min && a <= limits.joint_max)
        && forward_kinematics(p, geom).y() >= limits.min_tip_y
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn unit() -> ArmGeometry {
        ArmGeometry::default()
    }

    fn fd_jacobian(p: &ProprioState, geom: &ArmGeometry, h: f64) -> Matrix2x3<f64> {
        let mut jac = Matrix2x3::zeros();
        for k in 0..N_JOINTS {
            let mut plus = *p;
            let mut minus = *p;
            plus.0[k] += h;
            minus.0[k] -= h;
            let cp = forward_kinematics(&plus, geom);
            let cm = forward_kinematics(&minus, geom);
            for r in 0..2 {
                jac[(r, k)] = (cp.0[r] - cm.0[r]) / (2.0 * h);
            }
        }
        jac
    }

    #[test]
    fn straight_arm_positions() {
        let c = forward_kinematics(&ProprioState::new(0.0, 0.0, 0.0), &unit());
        assert_abs_diff_eq!(c.x(), 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c.y(), 0.0, epsilon = 1e-15);

        let c = forward_kinematics(&ProprioState::new(PI / 2.0, 0.0, 0.0), &unit());
        assert_abs_diff_eq!(c.x(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c.y(), 3.0, epsilon = 1e-15);
    }

    #[test]
    fn reference_configuration_regression() {
        // 2cos(pi/5) + cos(2pi/5), 2sin(pi/5) - sin(2pi/5), evaluated offline.
        let p = ProprioState::new(PI / 5.0, -3.0 * PI / 5.0, 3.0 * PI / 5.0);
        let c = forward_kinematics(&p, &unit());
        assert_abs_diff_eq!(c.x(), 1.9270509831248424, epsilon = 1e-13);
        assert_abs_diff_eq!(c.y(), 0.22451398828979274, epsilon = 1e-13);
    }

    #[test]
    fn base_offset_and_length_scale() {
        let geom = ArmGeometry {
            segment_length: 2.0,
            base_position: [1.0, -1.0],
        };
        let c = forward_kinematics(&ProprioState::new(0.0, 0.0, 0.0), &geom);
        assert_eq!(c.0, [7.0, -1.0]);
    }

    #[test]
    fn straight_arm_jacobian() {
        let j = analytic_jacobian(&ProprioState::new(0.0, 0.0, 0.0), &unit());
        for k in 0..3 {
            assert_abs_diff_eq!(j[(0, k)], 0.0, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(j[(1, 0)], 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(j[(1, 1)], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(j[(1, 2)], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn reference_jacobian_regression() {
        // Frozen from central differences (h = 1e-5) of forward_kinematics.
        let p = ProprioState::new(PI / 5.0, -3.0 * PI / 5.0, 3.0 * PI / 5.0);
        let expected = Matrix2x3::new(
            -0.22451398828979274,
            0.3632712640026804,
            -0.5877852522924731,
            1.9270509831248424,
            1.118033988749895,
            0.8090169943749475,
        );
        let j = analytic_jacobian(&p, &unit());
        let fd = fd_jacobian(&p, &unit(), 1e-5);
        assert!((j - expected).amax() < 1e-12);
        assert!((fd - expected).amax() < 1e-9);
    }

    #[test]
    fn workspace_predicate() {
        let limits = WorkspaceLimits::default();
        assert!(in_workspace(&ProprioState::new(0.0, 0.0, 0.0), &limits, &unit()));
        assert!(!in_workspace(&ProprioState::new(4.0, 0.0, 0.0), &limits, &unit()));
        assert!(!in_workspace(&ProprioState::new(-PI / 2.0, 0.0, 0.0), &limits, &unit()));
        assert!(!in_workspace(&ProprioState::new(f64::NAN, 0.0, 0.0), &limits, &unit()));
    }

    #[test]
    fn straight_arm_has_rank_one_jacobian() {
        let j = analytic_jacobian(&ProprioState::new(0.0, 0.0, 0.0), &unit());
        let sv = j.singular_values();
        assert!(sv.min() < 1e-12);
    }

    proptest! {
        #[test]
        fn jacobian_matches_central_differences(
            a in -PI..PI, b in -PI..PI, c in -PI..PI,
        ) {
            let p = ProprioState::new(a, b, c);
            let j = analytic_jacobian(&p, &unit());
            let fd = fd_jacobian(&p, &unit(), 1e-5);
            let scale = j.amax().max(1.0);
            prop_assert!((j - fd).amax() / scale <= 1e-6);
        }

        #[test]
        fn tip_stays_within_reach(a in -10.0..10.0f64, b in -10.0..10.0f64, c in -10.0..10.0f64) {
            let geom = unit();
            let tip = forward_kinematics(&ProprioState::new(a, b, c), &geom);
            prop_assert!((tip.as_vector() - geom.base()).norm() <= geom.reach() + 1e-12);
        }

        #[test]
        fn full_turns_do_not_move_the_tip(
            a in -PI..PI, b in -PI..PI, c in -PI..PI, k in 0usize..3, turns in -3i32..3,
        ) {
            let p = ProprioState::new(a, b, c);
            let mut q = p;
            q.0[k] += 2.0 * PI * turns as f64;
            let cp = forward_kinematics(&p, &unit());
            let cq = forward_kinematics(&q.wrapped(), &unit());
            prop_assert!(cp.distance(&cq) < 1e-12);
        }

        #[test]
        fn generic_jacobian_has_one_dimensional_null_space(
            a in -PI..PI, b in 0.2..(PI - 0.2), c in 0.2..(PI - 0.2),
        ) {
            let j = analytic_jacobian(&ProprioState::new(a, b, c), &unit());
            let sv = j.singular_values();
            prop_assert!(sv.min() > 1e-6);
        }
    }
}
