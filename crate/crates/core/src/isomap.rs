//! Isomap initialization: a kNN graph over the normalized exteroceptive
//! samples, geodesic distances by Dijkstra, classical MDS, then a supervised
//! fit of the network onto the resulting coordinates.
//!
//! The embedding's sign and rotation are arbitrary; nothing downstream
//! depends on them.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::exploration::{euclidean, format_f64, Dataset, EXTERO_RANGE};
use crate::mlp::NetworkParams;
use crate::rprop::{RpropConfig, RpropState};

pub const DEFAULT_NEIGHBORS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct GeodesicGraph {
    pub n_nodes: usize,
    /// Symmetric adjacency lists `(neighbor, euclidean distance)`, sorted by neighbor.
    pub edges: Vec<Vec<(usize, f64)>>,
    /// Neighbor count that produced a connected graph.
    pub k: usize,
}

impl GeodesicGraph {
    pub fn is_connected(&self) -> bool {
        if self.n_nodes == 0 {
            return true;
        }
        let mut seen = vec![false; self.n_nodes];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for &(v, _) in &self.edges[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    queue.push_back(v);
                }
            }
        }
        count == self.n_nodes
    }
}

/// kNN graph over the normalized exteroception of `dataset`.
pub fn build_graph(dataset: &Dataset, k: usize) -> Result<GeodesicGraph> {
    let points: Vec<&[f64]> = dataset.samples.iter().map(|s| s.s_norm.as_slice()).collect();
    build_graph_from_points(&points, k)
}

/// Symmetrized kNN graph; `k` doubles (up to `n - 1`) until it is connected.
pub fn build_graph_from_points(points: &[&[f64]], k: usize) -> Result<GeodesicGraph> {
    let n = points.len();
    if k == 0 || n < k + 1 {
        return Err(Error::InvalidArgument(format!(
            "need k >= 1 and at least k + 1 points (k = {k}, n = {n})"
        )));
    }
    if points.iter().all(|p| *p == points[0]) {
        return Err(Error::IdenticalPoints);
    }
    // Neighbors sorted by (distance, index) once; each k reuses the prefix.
    let ranked: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut row: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (j, euclidean(points[i], points[j])))
                .collect();
            row.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            row
        })
        .collect();
    let mut k = k;
    loop {
        let graph = knn_graph(&ranked, k);
        if graph.is_connected() {
            return Ok(graph);
        }
        if k >= n - 1 {
            return Err(Error::DisconnectedGraph);
        }
        k = (2 * k).min(n - 1);
    }
}

fn knn_graph(ranked: &[Vec<(usize, f64)>], k: usize) -> GeodesicGraph {
    let n = ranked.len();
    let mut edges: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (i, row) in ranked.iter().enumerate() {
        for &(j, d) in &row[..k] {
            edges[i].push((j, d));
            edges[j].push((i, d));
        }
    }
    for adj in &mut edges {
        adj.sort_by(|a, b| a.0.cmp(&b.0));
        adj.dedup_by_key(|e| e.0);
    }
    GeodesicGraph {
        n_nodes: n,
        edges,
        k,
    }
}

#[derive(Copy, Clone, PartialEq)]
struct Frontier {
    dist: f64,
    node: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Single-source shortest paths (Dijkstra with a binary heap).
pub fn shortest_paths_from(g: &GeodesicGraph, source: usize) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; g.n_nodes];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(Frontier {
        dist: 0.0,
        node: source,
    });
    while let Some(Frontier { dist: d, node: u }) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &(v, w) in &g.edges[u] {
            let cand = d + w;
            if cand < dist[v] {
                dist[v] = cand;
                heap.push(Frontier { dist: cand, node: v });
            }
        }
    }
    dist
}

/// All-pairs geodesic distances, one Dijkstra run per source.
pub fn geodesic_distances(g: &GeodesicGraph) -> Result<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> = (0..g.n_nodes)
        .into_par_iter()
        .map(|s| shortest_paths_from(g, s))
        .collect();
    let mut d = DMatrix::zeros(g.n_nodes, g.n_nodes);
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::DisconnectedGraph);
            }
            d[(i, j)] = v;
        }
    }
    // Dijkstra from either end can differ in the last ulp.
    let sym = (&d + d.transpose()) * 0.5;
    Ok(sym)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTargets {
    /// One row per sample, `dim` columns.
    pub targets: Vec<Vec<f64>>,
    /// Factor applied to the raw MDS coordinates.
    pub scale_applied: f64,
    /// Top `dim` eigenvalues of the double-centered matrix, clamped at 0.
    pub eigenvalues: Vec<f64>,
}

impl EmbeddingTargets {
    pub fn to_csv(&self) -> String {
        let dim = self.targets.first().map_or(0, |r| r.len());
        let mut out = (1..=dim)
            .map(|k| format!("xi_{k}"))
            .collect::<Vec<_>>()
            .join(",");
        out.push('\n');
        for row in &self.targets {
            let line = row.iter().map(|v| format_f64(*v)).collect::<Vec<_>>().join(",");
            let _ = writeln!(out, "{line}");
        }
        out
    }
}

/// Raw classical MDS coordinates (`n x dim`) and the clamped eigenvalues.
pub fn classical_mds_coordinates(d: &DMatrix<f64>, dim: usize) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let n = d.nrows();
    if d.ncols() != n || dim == 0 || dim > n {
        return Err(Error::InvalidArgument(format!(
            "classical MDS needs a square matrix and 1 <= dim <= n ({n}x{}, dim {dim})",
            d.ncols()
        )));
    }
    // B = -1/2 J D^2 J via row, column and grand means.
    let sq = d.map(|v| v * v);
    let row_mean: Vec<f64> = (0..n).map(|i| sq.row(i).mean()).collect();
    let col_mean: Vec<f64> = (0..n).map(|j| sq.column(j).mean()).collect();
    let grand = sq.mean();
    let b = DMatrix::from_fn(n, n, |i, j| -0.5 * (sq[(i, j)] - row_mean[i] - col_mean[j] + grand));
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &c| eig.eigenvalues[c].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&c)));
    let top = eig.eigenvalues[order[0]];
    if !(top > 0.0) {
        return Err(Error::DegenerateEmbedding);
    }
    let cutoff = top * 1e-10;
    let mut coords = DMatrix::zeros(n, dim);
    let mut values = Vec::with_capacity(dim);
    for (c, &idx) in order.iter().take(dim).enumerate() {
        let lambda = eig.eigenvalues[idx];
        let lambda = if lambda > cutoff { lambda } else { 0.0 };
        values.push(lambda);
        let root = lambda.sqrt();
        for i in 0..n {
            coords[(i, c)] = eig.eigenvectors[(i, idx)] * root;
        }
    }
    Ok((coords, values))
}

/// Classical MDS rescaled so the largest absolute coordinate is 0.4.
pub fn classical_mds(d: &DMatrix<f64>, dim: usize) -> Result<EmbeddingTargets> {
    let (coords, eigenvalues) = classical_mds_coordinates(d, dim)?;
    let max_abs = coords.amax();
    let scale = EXTERO_RANGE / max_abs;
    let targets = coords
        .row_iter()
        .map(|r| r.iter().map(|v| v * scale).collect())
        .collect();
    Ok(EmbeddingTargets {
        targets,
        scale_applied: scale,
        eigenvalues,
    })
}

/// `1 - r^2` between geodesic and embedded distances over all pairs.
pub fn residual_variance(geodesic: &DMatrix<f64>, coords: &DMatrix<f64>) -> f64 {
    let n = geodesic.nrows();
    let mut xs = Vec::with_capacity(n * (n - 1) / 2);
    let mut ys = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            xs.push(geodesic[(i, j)]);
            ys.push((coords.row(i) - coords.row(j)).norm());
        }
    }
    let r = pearson(&xs, &ys);
    1.0 - r * r
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Full Isomap: graph, geodesics, MDS targets.
pub fn isomap_targets(dataset: &Dataset, k: usize, dim: usize) -> Result<EmbeddingTargets> {
    let graph = build_graph(dataset, k)?;
    let geo = geodesic_distances(&graph)?;
    classical_mds(&geo, dim)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub params: NetworkParams,
    pub initial_mse: f64,
    pub final_mse: f64,
    /// MSE before each iteration.
    pub history: Vec<f64>,
}

/// Mean over samples of `||F(p_norm) - target||^2`, and its weight gradient.
pub fn supervised_error(
    params: &NetworkParams,
    inputs: &[&[f64]],
    targets: &[Vec<f64>],
    with_grad: bool,
) -> (f64, Vec<f64>) {
    let n = inputs.len() as f64;
    let mut grad = if with_grad { vec![0.0; params.n_weights()] } else { Vec::new() };
    let mut err = 0.0;
    for (x, t) in inputs.iter().zip(targets) {
        let trace = params.forward(x);
        let diff: Vec<f64> = trace.output_act.iter().zip(t).map(|(a, b)| a - b).collect();
        err += diff.iter().map(|v| v * v).sum::<f64>();
        if with_grad {
            let d_out: Vec<f64> = diff.iter().map(|v| 2.0 * v / n).collect();
            params.backprop_into(&trace, &d_out, &mut grad);
        }
    }
    (err / n, grad)
}

/// Fits the network to `targets` with RPROP for `iterations` full-batch
/// steps and returns the best parameters seen, so the final error never
/// exceeds the initial one.
pub fn pretrain(
    params: &NetworkParams,
    dataset: &Dataset,
    targets: &EmbeddingTargets,
    iterations: usize,
    rprop: &RpropConfig,
) -> Result<PretrainReport> {
    if targets.targets.len() != dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "{} targets for {} samples",
            targets.targets.len(),
            dataset.len()
        )));
    }
    if targets.targets.iter().any(|t| t.len() != params.n_out()) {
        return Err(Error::InvalidArgument("target dimension differs from network output".into()));
    }
    rprop.validate()?;
    let inputs: Vec<&[f64]> = dataset.inputs().collect();
    let mut current = params.clone();
    let mut state = RpropState::new(current.n_weights(), *rprop);
    let mut best = current.clone();
    let mut history = Vec::with_capacity(iterations + 1);
    let (initial_mse, mut grad) = supervised_error(&current, &inputs, &targets.targets, true);
    let mut best_mse = initial_mse;
    history.push(initial_mse);
    for _ in 0..iterations {
        state.apply(current.weights_mut(), &grad);
        let (mse, g) = supervised_error(&current, &inputs, &targets.targets, true);
        grad = g;
        history.push(mse);
        if mse < best_mse {
            best_mse = mse;
            best.clone_from(&current);
        }
    }
    Ok(PretrainReport {
        params: best,
        initial_mse,
        final_mse: best_mse,
        history,
    })
}
