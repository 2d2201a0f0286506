//! Pairwise distance-preserving training of the network.
//!
//! For a pair of samples the cost is
//! `h(|s_i - s_j|) (|xi_i - xi_j| - |s_i - s_j|)^2 + gamma (|xi_i|^2 + |xi_j|^2)`
//! with `h` the step neighborhood. The total cost sums it over all unordered
//! pairs, so the centering term collapses to `gamma (N - 1) sum_i |xi_i|^2`
//! and only pairs inside the neighborhood need to be visited.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exploration::{euclidean, neighborhood_weight, Dataset};
use crate::mlp::{ForwardTrace, NetworkParams};
use crate::rprop::{RpropConfig, RpropState};

/// Samples per accumulation chunk. Fixed so that the reduction order, and
/// therefore the result, does not depend on the worker count.
const CHUNK: usize = 64;

/// How the per-pair output derivative is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientForm {
    /// Exact derivative of the pair cost. The centering term then acts on
    /// every pair, not only on neighbors.
    #[default]
    Exact,
    /// Neighborhood gate over both terms and a symmetrized centering term
    /// `gamma (xi_i + xi_j)`, as the update rule is usually printed. This is
    /// the exact gradient of `h (stress + gamma |xi_i + xi_j|^2)`.
    Printed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mu: f64,
    pub gamma: f64,
    pub iterations: usize,
    pub q_min: f64,
    pub n_environments: usize,
    pub rprop: RpropConfig,
    #[serde(default)]
    pub gradient_form: GradientForm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mu: 0.1,
            gamma: 1e-3,
            iterations: 1500,
            q_min: 1e-10,
            n_environments: 1,
            rprop: RpropConfig::default(),
            gradient_form: GradientForm::Exact,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0) || !(self.gamma >= 0.0) || self.iterations == 0 || !(self.q_min >= 0.0) {
            return Err(Error::InvalidArgument(
                "training needs mu > 0, gamma >= 0, T >= 1 and Q_min >= 0".into(),
            ));
        }
        if self.n_environments == 0 {
            return Err(Error::InvalidArgument("n_environments must be >= 1".into()));
        }
        self.rprop.validate()
    }

    /// Iteration budget of each environment phase; the remainder goes to
    /// the earliest phases.
    pub fn phase_lengths(&self) -> Vec<usize> {
        let n = self.n_environments;
        let base = self.iterations / n;
        let extra = self.iterations % n;
        (0..n).map(|i| base + usize::from(i < extra)).collect()
    }
}

/// Cost of one pair.
pub fn pair_cost(xi_i: &[f64], xi_j: &[f64], s_i: &[f64], s_j: &[f64], mu: f64, gamma: f64) -> f64 {
    let ds = euclidean(s_i, s_j);
    let dx = euclidean(xi_i, xi_j);
    let sq = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
    neighborhood_weight(ds, mu) * (dx - ds).powi(2) + gamma * (sq(xi_i) + sq(xi_j))
}

/// Derivative of the stress term w.r.t. `xi_i` (negate for `xi_j`):
/// `2 (xi_i - xi_j)(1 - d_s / d_xi)`. Zero when the outputs coincide.
fn stress_derivative(xi_i: &[f64], xi_j: &[f64], s_dist: f64, out: &mut [f64]) -> f64 {
    let dx = euclidean(xi_i, xi_j);
    if dx == 0.0 {
        out.iter_mut().for_each(|o| *o = 0.0);
        return s_dist * s_dist;
    }
    let factor = 2.0 * (1.0 - s_dist / dx);
    for ((o, a), b) in out.iter_mut().zip(xi_i).zip(xi_j) {
        *o = factor * (a - b);
    }
    (dx - s_dist).powi(2)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairGradient {
    /// `dQ/dw` for every weight, in the network's flat layout.
    pub grad: Vec<f64>,
    pub q: f64,
    pub active_pair_count: usize,
}

/// Gradient of one pair's cost w.r.t. every weight.
pub fn pair_gradient(
    trace_i: &ForwardTrace,
    trace_j: &ForwardTrace,
    s_dist: f64,
    params: &NetworkParams,
    mu: f64,
    gamma: f64,
    form: GradientForm,
) -> PairGradient {
    let xi_i = &trace_i.output_act;
    let xi_j = &trace_j.output_act;
    let n_out = xi_i.len();
    let h = neighborhood_weight(s_dist, mu);
    let mut d_i = vec![0.0; n_out];
    let mut d_j = vec![0.0; n_out];
    let sq = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
    let mut q = gamma * (sq(xi_i) + sq(xi_j));
    if h > 0.0 {
        q += stress_derivative(xi_i, xi_j, s_dist, &mut d_i);
        for (dj, di) in d_j.iter_mut().zip(&d_i) {
            *dj = -di;
        }
    }
    match form {
        GradientForm::Exact => {
            for k in 0..n_out {
                d_i[k] += 2.0 * gamma * xi_i[k];
                d_j[k] += 2.0 * gamma * xi_j[k];
            }
        }
        GradientForm::Printed => {
            for k in 0..n_out {
                let c = 2.0 * gamma * h * (xi_i[k] + xi_j[k]);
                d_i[k] += c;
                d_j[k] += c;
            }
        }
    }
    let mut grad = vec![0.0; params.n_weights()];
    params.backprop_into(trace_i, &d_i, &mut grad);
    params.backprop_into(trace_j, &d_j, &mut grad);
    PairGradient {
        grad,
        q,
        active_pair_count: usize::from(h > 0.0),
    }
}

/// Neighborhood lists of a dataset: for each sample, the other samples
/// within `mu` in normalized exteroceptive distance. Constant during
/// training, so computed once per dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct PairCache {
    pub neighbors: Vec<Vec<(usize, f64)>>,
    pub active_pairs: usize,
    pub total_pairs: usize,
}

impl PairCache {
    pub fn new(dataset: &Dataset, mu: f64) -> Self {
        let n = dataset.len();
        let neighbors: Vec<Vec<(usize, f64)>> = (0..n)
            .into_par_iter()
            .map(|i| {
                (0..n)
                    .filter(|&j| j != i)
                    .filter_map(|j| {
                        let d = dataset.extero_distance(i, j);
                        (neighborhood_weight(d, mu) > 0.0).then_some((j, d))
                    })
                    .collect()
            })
            .collect();
        let directed: usize = neighbors.iter().map(Vec::len).sum();
        Self {
            neighbors,
            active_pairs: directed / 2,
            total_pairs: n * n.saturating_sub(1) / 2,
        }
    }

    pub fn active_fraction(&self) -> f64 {
        if self.total_pairs == 0 {
            0.0
        } else {
            self.active_pairs as f64 / self.total_pairs as f64
        }
    }
}

/// Total cost and its full-batch gradient over all `N (N - 1) / 2` pairs.
///
/// One forward pass per sample; output-space derivatives are gathered per
/// sample from its neighborhood list, then back-propagated once per sample.
pub fn full_batch_gradient(
    params: &NetworkParams,
    dataset: &Dataset,
    cache: &PairCache,
    cfg: &TrainConfig,
) -> PairGradient {
    let n = dataset.len();
    let traces: Vec<ForwardTrace> = dataset
        .samples
        .par_iter()
        .map(|s| params.forward(&s.p_norm))
        .collect();
    let n_out = params.n_out();
    let gamma = cfg.gamma;
    let centering = gamma * n.saturating_sub(1) as f64;

    // Per sample: output derivative and the stress of pairs (i, j > i).
    let per_sample: Vec<(Vec<f64>, f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi_i = &traces[i].output_act;
            let mut d = vec![0.0; n_out];
            let mut tmp = vec![0.0; n_out];
            let mut stress = 0.0;
            for &(j, s_dist) in &cache.neighbors[i] {
                let xi_j = &traces[j].output_act;
                let q = stress_derivative(xi_i, xi_j, s_dist, &mut tmp);
                if j > i {
                    stress += q;
                }
                match cfg.gradient_form {
                    GradientForm::Exact => {
                        d.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
                    }
                    GradientForm::Printed => {
                        for k in 0..n_out {
                            d[k] += tmp[k] + 2.0 * gamma * (xi_i[k] + xi_j[k]);
                        }
                    }
                }
            }
            let norm_sq: f64 = xi_i.iter().map(|v| v * v).sum();
            if cfg.gradient_form == GradientForm::Exact {
                for k in 0..n_out {
                    d[k] += 2.0 * centering * xi_i[k];
                }
            }
            (d, stress, norm_sq)
        })
        .collect();

    let q = per_sample
        .iter()
        .map(|(_, stress, norm_sq)| stress + centering * norm_sq)
        .sum();

    let partials: Vec<Vec<f64>> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(CHUNK)
        .map(|idx| {
            let mut g = vec![0.0; params.n_weights()];
            for &i in idx {
                params.backprop_into(&traces[i], &per_sample[i].0, &mut g);
            }
            g
        })
        .collect();
    let mut grad = vec![0.0; params.n_weights()];
    for part in &partials {
        grad.iter_mut().zip(part).for_each(|(a, b)| *a += b);
    }
    PairGradient {
        grad,
        q,
        active_pair_count: cache.active_pairs,
    }
}

/// Total cost only.
pub fn total_cost(params: &NetworkParams, dataset: &Dataset, cache: &PairCache, gamma: f64) -> f64 {
    let outputs = params.evaluate_batch(dataset.inputs());
    let n = outputs.len();
    let mut q = 0.0;
    for (i, nbrs) in cache.neighbors.iter().enumerate() {
        for &(j, s_dist) in nbrs.iter().filter(|(j, _)| *j > i) {
            q += (euclidean(&outputs[i], &outputs[j]) - s_dist).powi(2);
        }
    }
    let norm_sq: f64 = outputs.iter().flatten().map(|v| v * v).sum();
    q + gamma * n.saturating_sub(1) as f64 * norm_sq
}

/// One full-batch RPROP step. Returns the cost at the parameters before the
/// update.
pub fn train_epoch(
    params: &mut NetworkParams,
    dataset: &Dataset,
    cache: &PairCache,
    cfg: &TrainConfig,
    state: &mut RpropState,
) -> f64 {
    let g = full_batch_gradient(params, dataset, cache, cfg);
    state.apply(params.weights_mut(), &g.grad);
    g.q
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub phase: usize,
    pub q: f64,
    pub active_pair_fraction: f64,
}

impl LogRow {
    pub const HEADER: &'static str = "iteration,phase,q,active_pair_fraction";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:.16e},{:.16e}",
            self.iteration, self.phase, self.q, self.active_pair_fraction
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub phase: usize,
    pub environment_id: Option<u64>,
    pub iterations: usize,
    pub q_start: f64,
    pub q_end: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub params: NetworkParams,
    pub phases: Vec<PhaseSummary>,
    /// Cost of the starting parameters on the first dataset.
    pub q_initial: f64,
    /// Cost of the returned parameters on the last dataset.
    pub q_final: f64,
    /// Cost of the starting parameters on the last dataset.
    pub q_initial_on_final_dataset: f64,
    pub iterations_run: usize,
    pub stopped_early: bool,
}

/// Runs the phased schedule. `datasets(phase)` supplies the learning base of
/// each phase; exteroceptive distances never mix datasets. Log rows are
/// streamed to `log` when given.
pub fn train<F>(
    initial: &NetworkParams,
    mut datasets: F,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport>
where
    F: FnMut(usize) -> Result<Dataset>,
{
    cfg.validate()?;
    let mut params = initial.clone();
    let mut state = RpropState::new(params.n_weights(), cfg.rprop);
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{}", LogRow::HEADER)?;
    }
    let mut phases = Vec::new();
    let mut q_initial = f64::NAN;
    let mut iteration = 0;
    let mut stopped_early = false;
    let mut last: Option<(Dataset, PairCache)> = None;
    for (phase, &budget) in cfg.phase_lengths().iter().enumerate() {
        let dataset = datasets(phase)?;
        if dataset.samples.first().map(|s| s.p_norm.len()) != Some(params.n_in()) {
            return Err(Error::InvalidArgument("dataset input dimension differs from network".into()));
        }
        let cache = PairCache::new(&dataset, cfg.mu);
        let q_start = total_cost(&params, &dataset, &cache, cfg.gamma);
        if phase == 0 {
            q_initial = q_start;
        }
        let mut ran = 0;
        for _ in 0..budget {
            let g = full_batch_gradient(&params, &dataset, &cache, cfg);
            if g.q <= cfg.q_min {
                stopped_early = true;
                break;
            }
            if let Some(w) = log.as_deref_mut() {
                let row = LogRow {
                    iteration,
                    phase,
                    q: g.q,
                    active_pair_fraction: cache.active_fraction(),
                };
                writeln!(w, "{}", row.to_csv())?;
            }
            state.apply(params.weights_mut(), &g.grad);
            iteration += 1;
            ran += 1;
        }
        let q_end = total_cost(&params, &dataset, &cache, cfg.gamma);
        phases.push(PhaseSummary {
            phase,
            environment_id: dataset.environment_id,
            iterations: ran,
            q_start,
            q_end,
        });
        last = Some((dataset, cache));
        if stopped_early {
            break;
        }
    }
    let (dataset, cache) = last.expect("at least one phase");
    Ok(TrainReport {
        q_final: total_cost(&params, &dataset, &cache, cfg.gamma),
        q_initial_on_final_dataset: total_cost(initial, &dataset, &cache, cfg.gamma),
        q_initial,
        params,
        phases,
        iterations_run: iteration,
        stopped_early,
    })
}

/// Median of `| |xi_i - xi_j| - |s_i - s_j| | / |s_i - s_j|` over pairs
/// inside the neighborhood.
pub fn local_distance_distortion(params: &NetworkParams, dataset: &Dataset, mu: f64) -> f64 {
    let outputs = params.evaluate_batch(dataset.inputs());
    let cache = PairCache::new(dataset, mu);
    let mut rel: Vec<f64> = Vec::with_capacity(cache.active_pairs);
    for (i, nbrs) in cache.neighbors.iter().enumerate() {
        for &(j, s_dist) in nbrs.iter().filter(|(j, d)| *j > i && *d > 0.0) {
            rel.push((euclidean(&outputs[i], &outputs[j]) - s_dist).abs() / s_dist);
        }
    }
    if rel.is_empty() {
        return f64::NAN;
    }
    rel.sort_by(f64::total_cmp);
    rel[rel.len() / 2]
}
