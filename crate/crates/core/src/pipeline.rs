//! End-to-end experiment: configuration, per-stage seeds, the stage
//! functions and the files they exchange.
//!
//! Every stage reads its inputs from the output directory and writes its
//! results there, so `run` and a sequence of single-stage invocations
//! produce the same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arm::{forward_kinematics, ArmGeometry, EndEffectorConfig, ProprioState, WorkspaceLimits};
use crate::error::{Error, Result};
use crate::exploration::{explore_with_proprio, Dataset, ExplorationConfig, NormalizationStats};
use crate::isomap::{build_graph, classical_mds, geodesic_distances};
use crate::jacobian::{evaluate_divergence, fit_target_grid, DivergenceReport, GridPoint, LearnedMap};
use crate::mlp::{NetworkParams, DEFAULT_HIDDEN};
use crate::reaching::{
    make_consistent_targets, max_deviation_from_segment, posture_in_region, monotone_fraction, reach_f, reach_g, ReachTarget,
    ReachTask, Trajectory,
};
use crate::rprop::RpropConfig;
use crate::sensors::{generate_environment, Environment, Exteroceptor, PositionSensor, Retina, RetinaGeometry, SpatialBounds};
use crate::trainer::{train, GradientForm, TrainConfig};

/// Exteroceptor used by the experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Scenario {
    /// Absolute tip-position sensor.
    Position = 1,
    /// Six-photoreceptor retina in a field of colored lights.
    Retina = 2,
}

impl TryFrom<u8> for Scenario {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Scenario::Position),
            2 => Ok(Scenario::Retina),
            other => Err(format!("scenario must be 1 or 2, got {other}")),
        }
    }
}

impl From<Scenario> for u8 {
    fn from(s: Scenario) -> u8 {
        s as u8
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplorationSettings {
    pub n_samples: usize,
    pub reference: ProprioState,
    pub amplitude: f64,
}

impl Default for ExplorationSettings {
    fn default() -> Self {
        let d = ExplorationConfig::default();
        Self {
            n_samples: d.n_samples,
            reference: d.reference,
            amplitude: d.amplitude,
        }
    }
}

impl ExplorationSettings {
    pub fn with_seed(&self, seed: u64) -> ExplorationConfig {
        ExplorationConfig {
            n_samples: self.n_samples,
            reference: self.reference,
            amplitude: self.amplitude,
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSettings {
    pub n_red: usize,
    pub n_blue: usize,
    pub bounds: SpatialBounds,
}

impl Default for EnvironmentSettings {
    fn default() -> Self {
        Self {
            n_red: 10,
            n_blue: 10,
            bounds: SpatialBounds::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSettings {
    pub hidden: usize,
    pub output_dim: usize,
}

impl Default for NetworkSettings {
    fn default() -> Self {
        Self {
            hidden: DEFAULT_HIDDEN,
            output_dim: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsomapSettings {
    pub neighbors: usize,
    pub iterations: usize,
}

impl Default for IsomapSettings {
    fn default() -> Self {
        Self {
            neighbors: crate::isomap::DEFAULT_NEIGHBORS,
            iterations: 1500,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub mu: f64,
    pub gamma: f64,
    pub iterations: usize,
    pub q_min: f64,
    /// Defaults to 1 for the position sensor and 3 for the retina.
    pub n_environments: Option<usize>,
    pub gradient_form: GradientForm,
    pub rprop: RpropConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            mu: d.mu,
            gamma: d.gamma,
            iterations: d.iterations,
            q_min: d.q_min,
            n_environments: None,
            gradient_form: d.gradient_form,
            rprop: d.rprop,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSettings {
    pub grid_size: usize,
    /// Fraction of the explored tip bounding box trimmed from each side.
    pub grid_shrink: f64,
    pub jacobian_eps: f64,
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        Self {
            grid_size: 7,
            grid_shrink: 0.1,
            jacobian_eps: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReachSettings {
    pub step: f64,
    pub tolerance: f64,
    /// Tip distance under which F- and G-based endpoints count as agreeing.
    pub endpoint_tolerance: f64,
}

impl Default for ReachSettings {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-3,
            endpoint_tolerance: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub threads: usize,
    #[serde(default)]
    pub arm: ArmGeometry,
    #[serde(default)]
    pub limits: WorkspaceLimits,
    #[serde(default)]
    pub exploration: ExplorationSettings,
    #[serde(default)]
    pub retina: RetinaGeometry,
    #[serde(default)]
    pub environment: EnvironmentSettings,
    #[serde(default)]
    pub network: NetworkSettings,
    #[serde(default)]
    pub isomap: IsomapSettings,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub evaluation: EvaluationSettings,
    #[serde(default)]
    pub reaching: ReachSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Position,
            seed: 0,
            output_dir: PathBuf::from("output"),
            threads: 1,
            arm: ArmGeometry::default(),
            limits: WorkspaceLimits::default(),
            exploration: ExplorationSettings::default(),
            retina: RetinaGeometry::default(),
            environment: EnvironmentSettings::default(),
            network: NetworkSettings::default(),
            isomap: IsomapSettings::default(),
            train: TrainSettings::default(),
            evaluation: EvaluationSettings::default(),
            reaching: ReachSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn for_scenario(scenario: Scenario, seed: u64) -> Self {
        Self {
            scenario,
            seed,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    /// Applies a `dotted.key=value` override. The value is read as a TOML
    /// literal, falling back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not KEY=VALUE")))?;
        let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
        let mut root = toml::Value::try_from(self.clone()).map_err(|e| Error::Config(e.to_string()))?;
        let mut node = &mut root;
        let parts: Vec<&str> = key.trim().split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{key}`: `{part}` is not inside a table")))?;
            if i + 1 == parts.len() {
                table.insert((*part).to_string(), value.clone());
                break;
            }
            node = table
                .entry((*part).to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        *self = root.try_into().map_err(|e: toml::de::Error| Error::Config(format!("`{key}`: {e}")))?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            mu: t.mu,
            gamma: t.gamma,
            iterations: t.iterations,
            q_min: t.q_min,
            n_environments: t.n_environments.unwrap_or(match self.scenario {
                Scenario::Position => 1,
                Scenario::Retina => 3,
            }),
            rprop: t.rprop,
            gradient_form: t.gradient_form,
        }
    }

    fn lens_exclusion_radius(&self) -> f64 {
        self.arm.base_position[0].abs() + self.arm.reach() + self.retina.lens_offset
    }
}

/// Stage seed derived from the master seed and a stage key, so any stage can
/// be re-run alone.
pub fn derive_seed(master: u64, key: &str) -> u64 {
    // FNV-1a of the key, mixed with the master seed by splitmix64.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = master ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Explore,
    Pretrain,
    Train,
    EvalNullspace,
    Reach,
    Export,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Explore,
        Stage::Pretrain,
        Stage::Train,
        Stage::EvalNullspace,
        Stage::Reach,
        Stage::Export,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Explore => "explore",
            Stage::Pretrain => "pretrain",
            Stage::Train => "train",
            Stage::EvalNullspace => "eval-nullspace",
            Stage::Reach => "reach",
            Stage::Export => "export",
        }
    }

    pub fn from_name(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }
}

pub mod files {
    pub const DATASET: &str = "dataset.csv";
    pub const STATS: &str = "stats.json";
    pub const ENVIRONMENT: &str = "environment.json";
    pub const EMBEDDING: &str = "embedding.csv";
    pub const PRETRAINED: &str = "pretrained.json";
    pub const PRETRAIN_REPORT: &str = "pretrain.json";
    pub const MODEL: &str = "model.json";
    pub const TRAINING_LOG: &str = "training_log.csv";
    pub const TRAINING_REPORT: &str = "training.json";
    pub const DIVERGENCE: &str = "divergence.json";
    pub const REACHING: &str = "reaching.json";
    pub const TRAJECTORIES: &str = "trajectories";
    pub const MANIFEST: &str = "manifest.json";
    /// Wall-clock seconds per stage; the only file that differs between
    /// identical runs.
    pub const TIMINGS: &str = "timings.json";
}

struct Workspace<'a> {
    dir: &'a Path,
    stage: Stage,
}

impl Workspace<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Reads a prerequisite file, naming the stage that produces it when missing.
    fn require(&self, name: &str, producer: Stage) -> Result<String> {
        let path = self.path(name);
        if !path.is_file() {
            return Err(Error::MissingArtifact {
                stage: self.stage.name().to_string(),
                requires: producer.name().to_string(),
                missing: path,
            });
        }
        Ok(fs::read_to_string(path)?)
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, contents)?;
        Ok(path)
    }

    fn malformed(&self, name: &str, reason: impl ToString) -> Error {
        Error::Malformed {
            path: self.path(name),
            reason: reason.to_string(),
        }
    }

    fn stats(&self) -> Result<NormalizationStats> {
        let text = self.require(files::STATS, Stage::Explore)?;
        NormalizationStats::from_json(&text).map_err(|e| self.malformed(files::STATS, e))
    }

    fn dataset(&self, environment_id: Option<u64>) -> Result<Dataset> {
        let stats = self.stats()?;
        let text = self.require(files::DATASET, Stage::Explore)?;
        Dataset::from_csv(&text, stats, environment_id).map_err(|e| self.malformed(files::DATASET, e))
    }

    fn network(&self, name: &str, producer: Stage) -> Result<NetworkParams> {
        let text = self.require(name, producer)?;
        NetworkParams::from_json(&text).map_err(|e| self.malformed(name, e))
    }

    fn learned_map(&self) -> Result<LearnedMap> {
        Ok(LearnedMap {
            params: self.network(files::MODEL, Stage::Train)?,
            proprio: self.stats()?.proprio,
        })
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn environment_for(cfg: &RunConfig, index: usize) -> Result<(u64, Environment)> {
    let seed = derive_seed(cfg.seed, &format!("environment/{index}"));
    let env = generate_environment(
        seed,
        cfg.environment.n_red,
        cfg.environment.n_blue,
        &cfg.environment.bounds,
        cfg.lens_exclusion_radius(),
    )?;
    Ok((seed, env))
}

fn exploration_seed(cfg: &RunConfig, index: usize) -> u64 {
    derive_seed(cfg.seed, &format!("explore/{index}"))
}

/// Exploration number `index`: environment `index` for the retina, the
/// single sensor otherwise.
fn explore_phase(
    cfg: &RunConfig,
    index: usize,
    proprio: Option<crate::exploration::ProprioNormalization>,
) -> Result<(Dataset, Option<Environment>)> {
    let ecfg = cfg.exploration.with_seed(exploration_seed(cfg, index));
    match cfg.scenario {
        Scenario::Position => {
            let ds = explore_with_proprio(&ecfg, &PositionSensor, &cfg.limits, &cfg.arm, proprio, None)?;
            Ok((ds, None))
        }
        Scenario::Retina => {
            cfg.retina.validate()?;
            let (env_seed, environment) = environment_for(cfg, index)?;
            let sensor = Retina {
                geometry: cfg.retina,
                environment,
            };
            let ds = explore_with_proprio(
                &ecfg,
                &sensor as &dyn Exteroceptor,
                &cfg.limits,
                &cfg.arm,
                proprio,
                Some(env_seed),
            )?;
            Ok((ds, Some(sensor.environment)))
        }
    }
}

fn environment_id(cfg: &RunConfig, index: usize) -> Option<u64> {
    match cfg.scenario {
        Scenario::Position => None,
        Scenario::Retina => Some(derive_seed(cfg.seed, &format!("environment/{index}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub neighbors_used: usize,
    pub eigenvalues: Vec<f64>,
    pub iterations: usize,
    pub initial_mse: f64,
    pub final_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub q_initial: f64,
    pub q_final: f64,
    pub q_initial_on_final_dataset: f64,
    pub iterations_run: usize,
    pub stopped_early: bool,
    pub phases: Vec<crate::trainer::PhaseSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetOutcome {
    pub index: usize,
    pub target_config: EndEffectorConfig,
    pub target_posture: ProprioState,
    pub target_internal: Vec<f64>,
    pub f_converged: bool,
    pub g_converged: bool,
    pub f_iterations: usize,
    pub g_iterations: usize,
    pub f_final_end_effector: EndEffectorConfig,
    pub g_final_end_effector: EndEffectorConfig,
    pub endpoint_distance: f64,
    /// Deviation of the F-based path from the straight segment in internal space.
    pub f_deviation: f64,
    /// Deviation of the G-based path from the straight segment in tip space.
    pub g_deviation: f64,
    pub f_monotone_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReachingSummary {
    pub start: ProprioState,
    pub targets: Vec<TargetOutcome>,
    /// Targets that could not be given a consistent posture.
    pub skipped: Vec<usize>,
    pub endpoint_agreement_rate: f64,
    pub f_converged_rate: f64,
    pub g_converged_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub pretrain_initial_mse: Option<f64>,
    pub pretrain_final_mse: Option<f64>,
    pub q_initial: Option<f64>,
    pub q_final: Option<f64>,
    pub divergence_mean_deg: Option<f64>,
    pub divergence_std_deg: Option<f64>,
    pub endpoint_agreement_rate: Option<f64>,
    pub f_converged_rate: Option<f64>,
    pub g_converged_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    /// Files written by each stage, relative to the output directory.
    pub outputs: BTreeMap<String, Vec<String>>,
    pub metrics: RunMetrics,
}

fn stage_explore(cfg: &RunConfig, ws: &Workspace) -> Result<Vec<PathBuf>> {
    let (dataset, environment) = explore_phase(cfg, 0, None)?;
    let mut written = Vec::new();
    if let Some(env) = environment {
        written.push(ws.write(files::ENVIRONMENT, &(env.to_json()? + "\n"))?);
    }
    written.push(ws.write(files::DATASET, &dataset.to_csv())?);
    written.push(ws.write(files::STATS, &to_json(&dataset.stats)?)?);
    Ok(written)
}

fn stage_pretrain(cfg: &RunConfig, ws: &Workspace) -> Result<Vec<PathBuf>> {
    let dataset = ws.dataset(environment_id(cfg, 0))?;
    let graph = build_graph(&dataset, cfg.isomap.neighbors)?;
    let geodesic = geodesic_distances(&graph)?;
    let targets = classical_mds(&geodesic, cfg.network.output_dim)?;
    let init = NetworkParams::init_weights(
        dataset.samples[0].p_norm.len(),
        cfg.network.hidden,
        cfg.network.output_dim,
        derive_seed(cfg.seed, "network"),
    );
    let report = crate::isomap::pretrain(&init, &dataset, &targets, cfg.isomap.iterations, &cfg.train.rprop)?;
    let summary = PretrainSummary {
        neighbors_used: graph.k,
        eigenvalues: targets.eigenvalues.clone(),
        iterations: cfg.isomap.iterations,
        initial_mse: report.initial_mse,
        final_mse: report.final_mse,
    };
    Ok(vec![
        ws.write(files::EMBEDDING, &targets.to_csv())?,
        ws.write(files::PRETRAINED, &(report.params.to_json()? + "\n"))?,
        ws.write(files::PRETRAIN_REPORT, &to_json(&summary)?)?,
    ])
}

fn stage_train(cfg: &RunConfig, ws: &Workspace) -> Result<Vec<PathBuf>> {
    let initial = ws.network(files::PRETRAINED, Stage::Pretrain)?;
    let first = ws.dataset(environment_id(cfg, 0))?;
    let proprio = first.stats.proprio;
    let tcfg = cfg.train_config();
    let log_path = ws.path(files::TRAINING_LOG);
    let mut log = BufWriter::new(fs::File::create(&log_path)?);
    let mut first = Some(first);
    let report = train(
        &initial,
        |phase| match (phase, first.take()) {
            (0, Some(ds)) => Ok(ds),
            _ => explore_phase(cfg, phase, Some(proprio)).map(|(ds, _)| ds),
        },
        &tcfg,
        Some(&mut log),
    )?;
    drop(log);
    let summary = TrainingSummary {
        q_initial: report.q_initial,
        q_final: report.q_final,
        q_initial_on_final_dataset: report.q_initial_on_final_dataset,
        iterations_run: report.iterations_run,
        stopped_early: report.stopped_early,
        phases: report.phases.clone(),
    };
    Ok(vec![
        ws.write(files::MODEL, &(report.params.to_json()? + "\n"))?,
        log_path,
        ws.write(files::TRAINING_REPORT, &to_json(&summary)?)?,
    ])
}

/// The 49-point (by default) evaluation grid over explored tip positions,
/// with the shrink actually used. Every grid posture lies in the explored box.
pub fn evaluation_grid(cfg: &RunConfig, dataset: &Dataset) -> Result<(f64, Vec<GridPoint>)> {
    let positions: Vec<EndEffectorConfig> =
        dataset.samples.iter().map(|s| forward_kinematics(&s.p, &cfg.arm)).collect();
    let region = cfg.exploration.with_seed(0);
    fit_target_grid(&positions, cfg.evaluation.grid_size, cfg.evaluation.grid_shrink, |i, c| {
        let seed = derive_seed(cfg.seed, &format!("grid/{i}"));
        posture_in_region(c, Some(&region.reference), &cfg.arm, &region, &cfg.limits, seed)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub grid_shrink: f64,
    pub grid: Vec<GridPoint>,
    #[serde(flatten)]
    pub report: DivergenceReport,
}

fn stage_eval(cfg: &RunConfig, ws: &Workspace) -> Result<Vec<PathBuf>> {
    let map = ws.learned_map()?;
    let dataset = ws.dataset(environment_id(cfg, 0))?;
    let (grid_shrink, grid) = evaluation_grid(cfg, &dataset)?;
    let postures: Vec<ProprioState> = grid.iter().map(|g| g.p).collect();
    let report = evaluate_divergence(&map, &postures, &cfg.arm, cfg.evaluation.jacobian_eps);
    let summary = EvaluationSummary {
        grid_shrink,
        grid,
        report,
    };
    Ok(vec![ws.write(files::DIVERGENCE, &to_json(&summary)?)?])
}

/// F- and G-based reaching from the reference posture to one grid target.
pub fn reach_target(
    cfg: &RunConfig,
    map: &LearnedMap,
    index: usize,
    target: &EndEffectorConfig,
) -> Result<(TargetOutcome, Trajectory, Trajectory)> {
    let region = cfg.exploration.with_seed(0);
    let (xi_star, p_star) = make_consistent_targets(
        map,
        target,
        &cfg.arm,
        &region,
        &cfg.limits,
        derive_seed(cfg.seed, &format!("target/{index}")),
    )?;
    let start = cfg.exploration.reference;
    let task = |target| ReachTask {
        start,
        target,
        step: cfg.reaching.step,
        tolerance: cfg.reaching.tolerance,
        max_iters: None,
    };
    let f = reach_f(map, &task(ReachTarget::Internal(xi_star.clone())), &cfg.arm, cfg.evaluation.jacobian_eps)?;
    let mut g = reach_g(&task(ReachTarget::Config(*target)), &cfg.arm)?;
    g.annotate_internal(map);
    let f_path = f.controlled();
    let g_path = g.controlled();
    let outcome = TargetOutcome {
        index,
        target_config: *target,
        target_posture: p_star,
        target_internal: xi_star.clone(),
        f_converged: f.converged,
        g_converged: g.converged,
        f_iterations: f.iterations,
        g_iterations: g.iterations,
        f_final_end_effector: f.final_end_effector(),
        g_final_end_effector: g.final_end_effector(),
        endpoint_distance: f.final_end_effector().distance(&g.final_end_effector()),
        f_deviation: max_deviation_from_segment(&f_path, &f_path[0], &xi_star),
        g_deviation: max_deviation_from_segment(&g_path, &g_path[0], &target.0),
        f_monotone_fraction: monotone_fraction(&f_path, &xi_star),
    };
    Ok((outcome, f, g))
}

fn rate(values: impl Iterator<Item = bool>) -> f64 {
    let (hits, n) = values.fold((0usize, 0usize), |(h, n), v| (h + usize::from(v), n + 1));
    if n == 0 {
        f64::NAN
    } else {
        hits as f64 / n as f64
    }
}

fn stage_reach(cfg: &RunConfig, ws: &Workspace) -> Result<Vec<PathBuf>> {
    let map = ws.learned_map()?;
    let dataset = ws.dataset(environment_id(cfg, 0))?;
    let (_, grid) = evaluation_grid(cfg, &dataset)?;
    let runs: Vec<Result<(TargetOutcome, Trajectory, Trajectory)>> = grid
        .par_iter()
        .enumerate()
        .map(|(i, g)| reach_target(cfg, &map, i, &g.c))
        .collect();
    let mut written = Vec::new();
    let mut targets = Vec::new();
    let mut skipped = Vec::new();
    for (i, run) in runs.into_iter().enumerate() {
        match run {
            Ok((outcome, f, g)) => {
                written.push(ws.write(&format!("{}/f_{i:02}.csv", files::TRAJECTORIES), &f.to_csv())?);
                written.push(ws.write(&format!("{}/g_{i:02}.csv", files::TRAJECTORIES), &g.to_csv())?);
                targets.push(outcome);
            }
            Err(Error::Unreachable(_)) => skipped.push(i),
            Err(e) => return Err(e),
        }
    }
    // Corner-to-corner task, the longest move on the grid.
    if let (Some(first), Some(last)) = (grid.first(), grid.last()) {
        let corner_cfg = RunConfig {
            exploration: ExplorationSettings {
                reference: first.p,
                ..cfg.exploration
            },
            ..cfg.clone()
        };
        if let Ok((_, f, g)) = reach_target(&corner_cfg, &map, grid.len() - 1, &last.c) {
            written.push(ws.write(&format!("{}/f_corner.csv", files::TRAJECTORIES), &f.to_csv())?);
            written.push(ws.write(&format!("{}/g_corner.csv", files::TRAJECTORIES), &g.to_csv())?);
        }
    }
    let tol = cfg.reaching.endpoint_tolerance;
    let summary = ReachingSummary {
        start: cfg.exploration.reference,
        endpoint_agreement_rate: rate(
            targets
                .iter()
                .map(|t| t.f_converged && t.endpoint_distance <= tol)
                .chain(skipped.iter().map(|_| false)),
        ),
        f_converged_rate: rate(targets.iter().map(|t| t.f_converged)),
        g_converged_rate: rate(targets.iter().map(|t| t.g_converged)),
        targets,
        skipped,
    };
    written.push(ws.write(files::REACHING, &to_json(&summary)?)?);
    Ok(written)
}

fn read_json<T: for<'de> Deserialize<'de>>(ws: &Workspace, name: &str, producer: Stage) -> Result<T> {
    let text = ws.require(name, producer)?;
    serde_json::from_str(&text).map_err(|e| ws.malformed(name, e))
}

fn collect_metrics(ws: &Workspace) -> Result<RunMetrics> {
    let pre: PretrainSummary = read_json(ws, files::PRETRAIN_REPORT, Stage::Pretrain)?;
    let tr: TrainingSummary = read_json(ws, files::TRAINING_REPORT, Stage::Train)?;
    let div: EvaluationSummary = read_json(ws, files::DIVERGENCE, Stage::EvalNullspace)?;
    let reach: ReachingSummary = read_json(ws, files::REACHING, Stage::Reach)?;
    Ok(RunMetrics {
        pretrain_initial_mse: Some(pre.initial_mse),
        pretrain_final_mse: Some(pre.final_mse),
        q_initial: Some(tr.q_initial),
        q_final: Some(tr.q_final),
        divergence_mean_deg: Some(div.report.mean_deg),
        divergence_std_deg: Some(div.report.std_deg),
        endpoint_agreement_rate: Some(reach.endpoint_agreement_rate),
        f_converged_rate: Some(reach.f_converged_rate),
        g_converged_rate: Some(reach.g_converged_rate),
    })
}

/// Files each stage is expected to have produced, for `export`.
fn existing_outputs(dir: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let mut out = BTreeMap::new();
    let fixed: [(Stage, &[&str]); 4] = [
        (Stage::Explore, &[files::ENVIRONMENT, files::DATASET, files::STATS]),
        (Stage::Pretrain, &[files::EMBEDDING, files::PRETRAINED, files::PRETRAIN_REPORT]),
        (Stage::Train, &[files::MODEL, files::TRAINING_LOG, files::TRAINING_REPORT]),
        (Stage::EvalNullspace, &[files::DIVERGENCE]),
    ];
    for (stage, names) in fixed {
        let present: Vec<String> = names
            .iter()
            .filter(|n| dir.join(n).is_file())
            .map(|n| n.to_string())
            .collect();
        out.insert(stage.name().to_string(), present);
    }
    let mut reach = Vec::new();
    let traj = dir.join(files::TRAJECTORIES);
    if traj.is_dir() {
        let mut names: Vec<String> = fs::read_dir(&traj)?
            .filter_map(|e| e.ok())
            .map(|e| format!("{}/{}", files::TRAJECTORIES, e.file_name().to_string_lossy()))
            .collect();
        names.sort();
        reach.extend(names);
    }
    if dir.join(files::REACHING).is_file() {
        reach.push(files::REACHING.to_string());
    }
    out.insert(Stage::Reach.name().to_string(), reach);
    Ok(out)
}

fn write_manifest(cfg: &RunConfig, ws: &Workspace) -> Result<RunManifest> {
    let mut outputs = existing_outputs(ws.dir)?;
    outputs.insert(Stage::Export.name().to_string(), vec![files::MANIFEST.to_string()]);
    let manifest = RunManifest {
        config: cfg.clone(),
        outputs,
        metrics: collect_metrics(ws)?,
    };
    ws.write(files::MANIFEST, &to_json(&manifest)?)?;
    Ok(manifest)
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Runs exactly one stage against the output directory.
pub fn run_stage(cfg: &RunConfig, stage: Stage) -> Result<Vec<PathBuf>> {
    let dir = cfg.output_dir.as_path();
    fs::create_dir_all(dir)?;
    let ws = Workspace { dir, stage };
    let result = with_pool(cfg.threads, || match stage {
        Stage::Explore => stage_explore(cfg, &ws),
        Stage::Pretrain => stage_pretrain(cfg, &ws),
        Stage::Train => stage_train(cfg, &ws),
        Stage::EvalNullspace => stage_eval(cfg, &ws),
        Stage::Reach => stage_reach(cfg, &ws),
        Stage::Export => write_manifest(cfg, &ws).map(|_| vec![ws.path(files::MANIFEST)]),
    })?;
    result.map_err(|e| match e {
        e @ Error::MissingArtifact { .. } => e,
        e => Error::Stage {
            stage: stage.name().to_string(),
            source: Box::new(e),
        },
    })
}

/// Every stage in order, then the manifest.
pub fn run(cfg: &RunConfig) -> Result<RunManifest> {
    let mut timings = BTreeMap::new();
    for stage in &Stage::ALL[..5] {
        let start = Instant::now();
        run_stage(cfg, *stage)?;
        timings.insert(stage.name().to_string(), start.elapsed().as_secs_f64());
    }
    let ws = Workspace {
        dir: cfg.output_dir.as_path(),
        stage: Stage::Export,
    };
    let manifest = write_manifest(cfg, &ws)?;
    ws.write(files::TIMINGS, &to_json(&timings)?)?;
    Ok(manifest)
}
