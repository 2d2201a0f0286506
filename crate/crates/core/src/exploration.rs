//! Random motor babbling around a reference posture and the normalized
//! learning base built from it.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arm::{forward_kinematics, in_workspace, ArmGeometry, ProprioState, WorkspaceLimits, N_JOINTS};
use crate::error::{Error, Result};
use crate::sensors::{ExteroState, Exteroceptor};

/// Max-abs of normalized proprioception.
pub const PROPRIO_RANGE: f64 = 0.8;
/// Max-abs of normalized exteroception.
pub const EXTERO_RANGE: f64 = 0.4;
/// Rejection-sampling budget per requested sample.
pub const ATTEMPTS_PER_SAMPLE: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplorationConfig {
    pub n_samples: usize,
    pub reference: ProprioState,
    pub amplitude: f64,
    pub seed: u64,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            reference: ProprioState::new(PI / 5.0, -3.0 * PI / 5.0, 3.0 * PI / 5.0),
            amplitude: PI / 2.0,
            seed: 0,
        }
    }
}

impl ExplorationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(Error::InvalidArgument("exploration needs at least 2 samples".into()));
        }
        if !(self.amplitude > 0.0) {
            return Err(Error::InvalidArgument("exploration amplitude must be positive".into()));
        }
        Ok(())
    }

    /// True when `p` lies in the sampled box around the reference.
    pub fn contains(&self, p: &ProprioState) -> bool {
        p.0.iter()
            .zip(self.reference.0)
            .all(|(a, r)| (a - r).abs() <= self.amplitude)
    }
}

/// `p_norm = 0.8 (p - mean) / scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProprioNormalization {
    pub mean: [f64; N_JOINTS],
    pub scale: f64,
}

impl ProprioNormalization {
    pub fn fit(ps: &[ProprioState]) -> Result<Self> {
        let rows: Vec<&[f64]> = ps.iter().map(|p| p.0.as_slice()).collect();
        let (mean, scale) = center_and_scale(&rows, "proprioceptive")?;
        Ok(Self {
            mean: [mean[0], mean[1], mean[2]],
            scale,
        })
    }

    pub fn normalize(&self, p: &ProprioState) -> Vec<f64> {
        p.0.iter()
            .zip(self.mean)
            .map(|(a, m)| PROPRIO_RANGE * (a - m) / self.scale)
            .collect()
    }

    pub fn denormalize(&self, p_norm: &[f64]) -> ProprioState {
        let mut out = [0.0; N_JOINTS];
        for ((o, x), m) in out.iter_mut().zip(p_norm).zip(self.mean) {
            *o = m + x * self.scale / PROPRIO_RANGE;
        }
        ProprioState(out)
    }

    /// `d p_norm / d p`, the same for every joint.
    pub fn gain(&self) -> f64 {
        PROPRIO_RANGE / self.scale
    }
}

/// `s_norm = 0.4 (s - mean) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExteroNormalization {
    pub mean: Vec<f64>,
    pub scale: f64,
}

impl ExteroNormalization {
    pub fn fit(ss: &[ExteroState]) -> Result<Self> {
        let rows: Vec<&[f64]> = ss.iter().map(|s| s.0.as_slice()).collect();
        let (mean, scale) = center_and_scale(&rows, "exteroceptive")?;
        Ok(Self { mean, scale })
    }

    pub fn normalize(&self, s: &ExteroState) -> Vec<f64> {
        s.0.iter()
            .zip(&self.mean)
            .map(|(a, m)| EXTERO_RANGE * (a - m) / self.scale)
            .collect()
    }
}

fn center_and_scale(rows: &[&[f64]], what: &'static str) -> Result<(Vec<f64>, f64)> {
    let n = rows.len() as f64;
    let dim = rows.first().map_or(0, |r| r.len());
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let scale = rows
        .iter()
        .flat_map(|r| r.iter().zip(&mean).map(|(v, m)| (v - m).abs()))
        .fold(0.0, f64::max);
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::DegenerateNormalization(what));
    }
    Ok((mean, scale))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub proprio: ProprioNormalization,
    pub extero: ExteroNormalization,
}

impl NormalizationStats {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub p: ProprioState,
    pub p_norm: Vec<f64>,
    pub s: ExteroState,
    pub s_norm: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub stats: NormalizationStats,
    /// Seed of the environment the exteroception was recorded in, if any.
    pub environment_id: Option<u64>,
}

impl Dataset {
    /// Normalizes raw samples. Proprioception uses `proprio` when given,
    /// otherwise statistics fitted on `ps`; exteroception is always fitted.
    pub fn build(
        ps: Vec<ProprioState>,
        ss: Vec<ExteroState>,
        proprio: Option<ProprioNormalization>,
        environment_id: Option<u64>,
    ) -> Result<Self> {
        if ps.len() != ss.len() || ps.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "dataset needs >= 2 matched samples, got {} / {}",
                ps.len(),
                ss.len()
            )));
        }
        let proprio = match proprio {
            Some(p) => p,
            None => ProprioNormalization::fit(&ps)?,
        };
        let extero = ExteroNormalization::fit(&ss)?;
        let samples = ps
            .into_iter()
            .zip(ss)
            .map(|(p, s)| Sample {
                p_norm: proprio.normalize(&p),
                s_norm: extero.normalize(&s),
                p,
                s,
            })
            .collect();
        Ok(Self {
            samples,
            stats: NormalizationStats { proprio, extero },
            environment_id,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn extero_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.s.dim())
    }

    pub fn inputs(&self) -> impl Iterator<Item = &[f64]> {
        self.samples.iter().map(|s| s.p_norm.as_slice())
    }

    /// Normalized exteroceptive distance between samples `i` and `j`.
    pub fn extero_distance(&self, i: usize, j: usize) -> f64 {
        euclidean(&self.samples[i].s_norm, &self.samples[j].s_norm)
    }

    pub fn to_csv(&self) -> String {
        let dim = self.extero_dim();
        let mut out = String::from("m1,m2,m3");
        for k in 1..=dim {
            let _ = write!(out, ",s_{k}");
        }
        for k in 1..=N_JOINTS {
            let _ = write!(out, ",pn_{k}");
        }
        for k in 1..=dim {
            let _ = write!(out, ",sn_{k}");
        }
        out.push('\n');
        for s in &self.samples {
            let row = s
                .p
                .0
                .iter()
                .chain(&s.s.0)
                .chain(&s.p_norm)
                .chain(&s.s_norm)
                .map(|v| format_f64(*v))
                .collect::<Vec<_>>()
                .join(",");
            out.push_str(&row);
            out.push('\n');
        }
        out
    }

    /// Inverse of [`Dataset::to_csv`]; normalized columns are read back
    /// verbatim.
    pub fn from_csv(
        text: &str,
        stats: NormalizationStats,
        environment_id: Option<u64>,
    ) -> std::result::Result<Self, String> {
        let mut lines = text.lines();
        let header = lines.next().ok_or("empty file")?;
        let cols = header.split(',').count();
        if cols < 3 + 3 || (cols - 6) % 2 != 0 {
            return Err(format!("unexpected column count {cols}"));
        }
        let dim = (cols - 6) / 2;
        let mut samples = Vec::new();
        for (n, line) in lines.enumerate() {
            let vals: Vec<f64> = line
                .split(',')
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| format!("row {}: {e}", n + 1))?;
            if vals.len() != cols {
                return Err(format!("row {} has {} columns", n + 1, vals.len()));
            }
            samples.push(Sample {
                p: ProprioState([vals[0], vals[1], vals[2]]),
                s: ExteroState(vals[3..3 + dim].to_vec()),
                p_norm: vals[3 + dim..6 + dim].to_vec(),
                s_norm: vals[6 + dim..].to_vec(),
            });
        }
        Ok(Self {
            samples,
            stats,
            environment_id,
        })
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Uniform draws in the box of half-width `amplitude` around the reference,
/// keeping only workspace-valid postures.
pub fn sample_configurations(
    cfg: &ExplorationConfig,
    limits: &WorkspaceLimits,
    geom: &ArmGeometry,
) -> Result<Vec<ProprioState>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let budget = ATTEMPTS_PER_SAMPLE * cfg.n_samples;
    let mut accepted = Vec::with_capacity(cfg.n_samples);
    let mut attempts = 0;
    while accepted.len() < cfg.n_samples {
        if attempts == budget {
            return Err(Error::ExplorationFailed {
                accepted: accepted.len(),
                required: cfg.n_samples,
                attempts,
            });
        }
        attempts += 1;
        let mut p = [0.0; N_JOINTS];
        for (v, r) in p.iter_mut().zip(cfg.reference.0) {
            *v = r + rng.gen_range(-cfg.amplitude..=cfg.amplitude);
        }
        let p = ProprioState(p);
        if in_workspace(&p, limits, geom) {
            accepted.push(p);
        }
    }
    Ok(accepted)
}

pub fn explore(
    cfg: &ExplorationConfig,
    sensor: &dyn Exteroceptor,
    limits: &WorkspaceLimits,
    geom: &ArmGeometry,
    environment_id: Option<u64>,
) -> Result<Dataset> {
    explore_with_proprio(cfg, sensor, limits, geom, None, environment_id)
}

/// Like [`explore`], but with the proprioceptive normalization optionally
/// pinned so successive explorations share the network's input frame.
pub fn explore_with_proprio(
    cfg: &ExplorationConfig,
    sensor: &dyn Exteroceptor,
    limits: &WorkspaceLimits,
    geom: &ArmGeometry,
    proprio: Option<ProprioNormalization>,
    environment_id: Option<u64>,
) -> Result<Dataset> {
    let ps = sample_configurations(cfg, limits, geom)?;
    let ss = ps
        .iter()
        .map(|p| sensor.sense(&forward_kinematics(p, geom)))
        .collect();
    Dataset::build(ps, ss, proprio, environment_id)
}

pub fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Unordered pairs `(i, j)` with `i < j`.
pub fn pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (i + 1..n).map(move |j| (i, j)))
}

/// Step neighborhood: 1 when `d <= mu`.
pub fn neighborhood_weight(d: f64, mu: f64) -> f64 {
    if d <= mu {
        1.0
    } else {
        0.0
    }
}
