//! Jacobian of the learned map by forward differences, Moore-Penrose
//! pseudoinverse, and null-space comparison against the arm's analytic
//! Jacobian.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arm::{analytic_jacobian, forward_kinematics, ArmGeometry, EndEffectorConfig, ProprioState};
use crate::error::{Error, Result};
use crate::exploration::ProprioNormalization;
use crate::mlp::NetworkParams;
use crate::reaching::solve_configuration;

/// Singular values below this fraction of the largest are treated as zero.
pub const RANK_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct JacobianEstimate {
    /// `n_out x n_in`.
    pub matrix: DMatrix<f64>,
    pub at_point: Vec<f64>,
    pub step: f64,
}

/// Column `k` is `(F(p + eps e_k) - F(p)) / eps`.
pub fn estimate_jacobian(params: &NetworkParams, p_norm: &[f64], eps: f64) -> JacobianEstimate {
    assert!(eps > 0.0, "finite-difference step must be positive");
    let base = params.evaluate(p_norm);
    let mut matrix = DMatrix::zeros(params.n_out(), params.n_in());
    let mut probe = p_norm.to_vec();
    for k in 0..params.n_in() {
        probe[k] = p_norm[k] + eps;
        let moved = params.evaluate(&probe);
        probe[k] = p_norm[k];
        for (r, (a, b)) in moved.iter().zip(&base).enumerate() {
            matrix[(r, k)] = (a - b) / eps;
        }
    }
    JacobianEstimate {
        matrix,
        at_point: p_norm.to_vec(),
        step: eps,
    }
}

/// `M^+` through the SVD, truncating relatively small singular values.
pub fn pseudoinverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return DMatrix::zeros(cols, rows);
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let s_max = svd.singular_values.max();
    let cutoff = s_max * RANK_TOLERANCE;
    let mut out = DMatrix::zeros(cols, rows);
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            out += v_t.row(i).transpose() * u.column(i).transpose() / s;
        }
    }
    out
}

/// Unit vector spanning the null space of a rank-2 `2 x 3` matrix, with its
/// first nonzero component positive.
pub fn nullspace_line(m: &Matrix2x3<f64>) -> Result<Vector3<f64>> {
    let mut padded = Matrix3::zeros();
    padded.fixed_view_mut::<2, 3>(0, 0).copy_from(m);
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let sv = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let s_max = sv[order[0]];
    let rank = sv.iter().filter(|&&s| s > s_max * RANK_TOLERANCE && s > 0.0).count();
    if rank < 2 {
        return Err(Error::RankDeficient { rank, required: 2 });
    }
    let v: Vector3<f64> = v_t.row(order[2]).transpose().normalize();
    let flip = v
        .iter()
        .find(|c| c.abs() > 1e-12)
        .is_some_and(|&c| c < 0.0);
    Ok(if flip { -v } else { v })
}

/// Angle in degrees between two null-space lines, in `[0, 90]`.
pub fn nullspace_angle(m1: &Matrix2x3<f64>, m2: &Matrix2x3<f64>) -> Result<f64> {
    let v1 = nullspace_line(m1)?;
    let v2 = nullspace_line(m2)?;
    Ok(line_angle_deg(&v1, &v2))
}

pub fn line_angle_deg(v1: &Vector3<f64>, v2: &Vector3<f64>) -> f64 {
    let c = (v1.dot(v2).abs() / (v1.norm() * v2.norm())).min(1.0);
    c.acos().to_degrees()
}

pub fn to_dmatrix(m: &Matrix2x3<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(2, 3, |r, c| m[(r, c)])
}

pub fn to_matrix2x3(m: &DMatrix<f64>) -> Result<Matrix2x3<f64>> {
    if m.shape() != (2, 3) {
        return Err(Error::InvalidArgument(format!("expected a 2x3 matrix, got {:?}", m.shape())));
    }
    Ok(Matrix2x3::from_fn(|r, c| m[(r, c)]))
}

/// Trained network together with the input normalization it was trained in.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnedMap {
    pub params: NetworkParams,
    pub proprio: ProprioNormalization,
}

impl LearnedMap {
    pub fn internal(&self, p: &ProprioState) -> Vec<f64> {
        self.params.evaluate(&self.proprio.normalize(p))
    }

    /// Forward-difference Jacobian w.r.t. normalized proprioception.
    pub fn jacobian_normalized(&self, p: &ProprioState, eps: f64) -> DMatrix<f64> {
        estimate_jacobian(&self.params, &self.proprio.normalize(p), eps).matrix
    }

    /// The same Jacobian expressed per radian of raw joint angle.
    pub fn jacobian_raw(&self, p: &ProprioState, eps: f64) -> DMatrix<f64> {
        self.jacobian_normalized(p, eps) * self.proprio.gain()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub c: EndEffectorConfig,
    pub p: ProprioState,
}

/// `n x n` regular grid of tip positions over the bounding box of
/// `positions` shrunk by `shrink` on each side, each mapped to a posture by
/// pseudoinverse descent from `reference`.
pub fn target_grid(
    positions: &[EndEffectorConfig],
    n: usize,
    shrink: f64,
    reference: &ProprioState,
    geom: &ArmGeometry,
) -> Result<Vec<GridPoint>> {
    grid_positions(positions, n, shrink)?
        .into_iter()
        .map(|c| Ok(GridPoint { c, p: solve_configuration(&c, reference, geom, 1e-12, 500)? }))
        .collect()
}

/// Row-major `n x n` lattice over the bounding box of `positions`, each side
/// trimmed by `shrink` of its width.
pub fn grid_positions(positions: &[EndEffectorConfig], n: usize, shrink: f64) -> Result<Vec<EndEffectorConfig>> {
    if positions.is_empty() || n < 2 {
        return Err(Error::InvalidArgument("grid needs positions and n >= 2".into()));
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for c in positions {
        for a in 0..2 {
            lo[a] = lo[a].min(c.0[a]);
            hi[a] = hi[a].max(c.0[a]);
        }
    }
    for a in 0..2 {
        let margin = shrink * (hi[a] - lo[a]);
        lo[a] += margin;
        hi[a] -= margin;
    }
    let mut grid = Vec::with_capacity(n * n);
    for row in 0..n {
        for col in 0..n {
            let fx = col as f64 / (n - 1) as f64;
            let fy = row as f64 / (n - 1) as f64;
            grid.push(EndEffectorConfig([lo[0] + fx * (hi[0] - lo[0]), lo[1] + fy * (hi[1] - lo[1])]));
        }
    }
    Ok(grid)
}

/// Shrink increment tried by [`fit_target_grid`].
pub const SHRINK_STEP: f64 = 0.05;

/// Regular grid like [`target_grid`], but with postures from `solve`
/// (called with the row-major index). The shrink starts at `min_shrink` and
/// grows by [`SHRINK_STEP`] until every grid point is solvable; the shrink
/// used is returned.
pub fn fit_target_grid<S>(
    positions: &[EndEffectorConfig],
    n: usize,
    min_shrink: f64,
    solve: S,
) -> Result<(f64, Vec<GridPoint>)>
where
    S: Fn(usize, &EndEffectorConfig) -> Result<ProprioState> + Sync,
{
    if !(0.0..0.5).contains(&min_shrink) {
        return Err(Error::InvalidArgument(format!("grid shrink {min_shrink} must be in [0, 0.5)")));
    }
    let mut last_err = None;
    for k in 0.. {
        let shrink = min_shrink + k as f64 * SHRINK_STEP;
        if shrink >= 0.5 {
            break;
        }
        let cells = grid_positions(positions, n, shrink)?;
        let solved: Result<Vec<GridPoint>> = cells
            .par_iter()
            .enumerate()
            .map(|(i, c)| Ok(GridPoint { c: *c, p: solve(i, c)? }))
            .collect();
        match solved {
            Ok(grid) => return Ok((shrink, grid)),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::InvalidArgument("empty grid".into())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointDivergence {
    pub p: ProprioState,
    pub angle_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub mean_deg: f64,
    pub std_deg: f64,
    pub points: Vec<PointDivergence>,
    /// Grid postures where either Jacobian was rank deficient.
    #[serde(default)]
    pub skipped: Vec<ProprioState>,
}

impl DivergenceReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Null-space angle between `J_F` and `J_G` at every grid posture.
/// `J_G` is rescaled into normalized input coordinates before comparing.
pub fn evaluate_divergence(
    map: &LearnedMap,
    grid: &[ProprioState],
    geom: &ArmGeometry,
    eps: f64,
) -> DivergenceReport {
    let results: Vec<Result<f64>> = grid
        .par_iter()
        .map(|p| {
            let jf = to_matrix2x3(&map.jacobian_normalized(p, eps))?;
            let jg = analytic_jacobian(p, geom) / map.proprio.gain();
            nullspace_angle(&jf, &jg)
        })
        .collect();
    let mut points = Vec::new();
    let mut skipped = Vec::new();
    for (p, r) in grid.iter().zip(results) {
        match r {
            Ok(angle_deg) => points.push(PointDivergence { p: *p, angle_deg }),
            Err(_) => skipped.push(*p),
        }
    }
    let (mean_deg, std_deg) = mean_std(points.iter().map(|pt| pt.angle_deg));
    DivergenceReport {
        mean_deg,
        std_deg,
        points,
        skipped,
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Least-squares posture update `J^+ (target - current)`.
pub fn pseudoinverse_step(jac: &DMatrix<f64>, error: &[f64]) -> DVector<f64> {
    pseudoinverse(jac) * DVector::from_column_slice(error)
}

/// Tip positions of a set of postures.
pub fn end_effectors(ps: &[ProprioState], geom: &ArmGeometry) -> Vec<EndEffectorConfig> {
    ps.iter().map(|p| forward_kinematics(p, geom)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    #[test]
    fn zero_network_has_zero_jacobian() {
        let p = NetworkParams::zeros(3, 30, 2);
        let j = estimate_jacobian(&p, &[0.1, 0.2, 0.3], 1e-3);
        assert!(j.matrix.iter().all(|&v| v == 0.0));
        assert_eq!(j.matrix.shape(), (2, 3));
    }

    #[test]
    fn small_weight_network_is_linear() {
        // Tiny weights, no biases: J ~ W_out^T W_hid^T (sigma'(0) = 1).
        let mut p = NetworkParams::init_weights(3, 4, 2, 17);
        let n_in = p.n_in();
        let n_h = p.n_hidden();
        for l in 0..=n_in {
            for k in 0..n_h {
                let i = p.hidden_index(l, k);
                p.weights_mut()[i] *= if l == n_in { 0.0 } else { 0.01 };
            }
        }
        for l in 0..=n_h {
            for k in 0..2 {
                let i = p.output_index(l, k);
                p.weights_mut()[i] *= if l == n_h { 0.0 } else { 0.01 };
            }
        }
        let mut want = DMatrix::zeros(2, 3);
        for r in 0..2 {
            for c in 0..3 {
                want[(r, c)] = (0..n_h).map(|m| p.output_weight(m, r) * p.hidden_weight(c, m)).sum();
            }
        }
        let j = estimate_jacobian(&p, &[0.0, 0.0, 0.0], 1e-3).matrix;
        assert!((&j - &want).norm() / want.norm() <= 1e-3);
    }

    #[test]
    fn pseudoinverse_simple_cases() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        assert!((pseudoinverse(&i2) - &i2).amax() < 1e-15);
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]);
        let want = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.0]);
        assert!((pseudoinverse(&m) - want).amax() < 1e-15);
        let z = DMatrix::<f64>::zeros(2, 3);
        assert_eq!(pseudoinverse(&z), DMatrix::<f64>::zeros(3, 2));
    }

    #[test]
    fn wide_full_rank_right_inverse() {
        let m = DMatrix::from_row_slice(2, 3, &[0.3, -1.2, 0.7, 2.0, 0.1, -0.4]);
        let prod = &m * pseudoinverse(&m);
        assert!((prod - DMatrix::<f64>::identity(2, 2)).amax() < 1e-10);
    }

    #[test]
    fn nullspace_simple_cases() {
        let m = Matrix2x3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0);
        let v = nullspace_line(&m).unwrap();
        assert_abs_diff_eq!(v, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-15);
        // Straight arm: the x row vanishes.
        let j = analytic_jacobian(&ProprioState::new(0.0, 0.0, 0.0), &ArmGeometry::default());
        assert!(matches!(nullspace_line(&j), Err(Error::RankDeficient { rank: 1, .. })));
    }

    #[test]
    fn known_angles() {
        // Null vectors [1,0,0] and [1,1,0]/sqrt(2).
        let a = Matrix2x3::new(0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        let b = Matrix2x3::new(1.0, -1.0, 0.0, 0.0, 0.0, 1.0);
        assert_abs_diff_eq!(nullspace_angle(&a, &b).unwrap(), 45.0, epsilon = 1e-10);
        assert_abs_diff_eq!(nullspace_angle(&a, &a).unwrap(), 0.0, epsilon = 1e-6);
        let c = Matrix2x3::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_abs_diff_eq!(nullspace_angle(&a, &c).unwrap(), 90.0, epsilon = 1e-10);
    }

    #[test]
    fn normalization_does_not_rotate_null_space() {
        let geom = ArmGeometry::default();
        let p = ProprioState::new(PI / 5.0, -3.0 * PI / 5.0, 3.0 * PI / 5.0);
        let jg = analytic_jacobian(&p, &geom);
        let norm = ProprioNormalization {
            mean: [0.6, -1.9, 1.9],
            scale: 1.57,
        };
        let jg_norm = jg / norm.gain();
        assert!(nullspace_angle(&jg, &jg_norm).unwrap() < 1e-6);
    }

    #[test]
    fn grid_spans_shrunk_box() {
        let geom = ArmGeometry::default();
        let reference = ProprioState::new(PI / 5.0, -3.0 * PI / 5.0, 3.0 * PI / 5.0);
        let positions = vec![EndEffectorConfig([1.0, 0.5]), EndEffectorConfig([2.0, 1.5])];
        let grid = target_grid(&positions, 7, 0.1, &reference, &geom).unwrap();
        assert_eq!(grid.len(), 49);
        assert_abs_diff_eq!(grid[0].c.0[0], 1.1, epsilon = 1e-12);
        assert_abs_diff_eq!(grid[48].c.0[1], 1.4, epsilon = 1e-12);
        for g in &grid {
            assert!(forward_kinematics(&g.p, &geom).distance(&g.c) < 1e-9);
        }
    }

    #[test]
    fn fitted_grid_grows_shrink_until_solvable() {
        let geom = ArmGeometry::default();
        let reference = ProprioState::new(PI / 5.0, -3.0 * PI / 5.0, 3.0 * PI / 5.0);
        // Box corners at radius ~3.9, out of reach until trimmed.
        let positions = vec![EndEffectorConfig([-2.8, 0.0]), EndEffectorConfig([2.8, 2.8])];
        let solve = |_: usize, c: &EndEffectorConfig| solve_configuration(c, &reference, &geom, 1e-12, 500);
        let (shrink, grid) = fit_target_grid(&positions, 7, 0.1, solve).unwrap();
        assert!(shrink > 0.1);
        assert_eq!(grid.len(), 49);
        assert_eq!(grid, target_grid(&positions, 7, shrink, &reference, &geom).unwrap());
        assert!(target_grid(&positions, 7, shrink - SHRINK_STEP, &reference, &geom).is_err());
        let never = |_: usize, c: &EndEffectorConfig| -> Result<ProprioState> { Err(Error::Unreachable(format!("{c:?}"))) };
        assert!(matches!(fit_target_grid(&positions, 7, 0.1, never), Err(Error::Unreachable(_))));
    }

    fn random_matrix(rows: usize, cols: usize, rank: usize, seed: u64) -> DMatrix<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(rows, rank, |_, _| rng.gen_range(-1.0..1.0));
        let b = DMatrix::from_fn(rank, cols, |_, _| rng.gen_range(-1.0..1.0));
        a * b
    }

    proptest! {
        #[test]
        fn nullspace_annihilates_and_matches_cross_product(seed in 0u64..10_000) {
            let m = random_matrix(2, 3, 2, seed);
            let m = to_matrix2x3(&m).unwrap();
            let v = nullspace_line(&m).unwrap();
            prop_assert!((m * v).amax() <= 1e-10);
            prop_assert!((v.norm() - 1.0).abs() < 1e-12);
            let cross = Vector3::new(m[(0, 0)], m[(0, 1)], m[(0, 2)])
                .cross(&Vector3::new(m[(1, 0)], m[(1, 1)], m[(1, 2)]));
            // sin of the angle; acos loses precision near 0.
            let sin = v.cross(&cross.normalize()).norm();
            prop_assert!(sin < 1e-9, "sin {sin}");
        }

        #[test]
        fn angle_symmetric_and_scale_invariant(s1 in 0u64..5000, s2 in 5000u64..10_000, k in 0.1..10.0f64) {
            let a = to_matrix2x3(&random_matrix(2, 3, 2, s1)).unwrap();
            let b = to_matrix2x3(&random_matrix(2, 3, 2, s2)).unwrap();
            let ab = nullspace_angle(&a, &b).unwrap();
            prop_assert!((ab - nullspace_angle(&b, &a).unwrap()).abs() < 1e-9);
            prop_assert!((ab - nullspace_angle(&(a * k), &(b * -k)).unwrap()).abs() < 1e-6);
            prop_assert!((0.0..=90.0).contains(&ab));
        }
    }
}
