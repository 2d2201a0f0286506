//! Exteroceptors: an absolute position sensor and a six-cell retina that
//! watches colored point lights through a pinhole lens.

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arm::EndEffectorConfig;
use crate::error::{Error, Result};

/// Raw exteroceptor output `s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExteroState(pub Vec<f64>);

impl ExteroState {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

pub trait Exteroceptor: Sync {
    fn dim(&self) -> usize;
    fn sense(&self, c: &EndEffectorConfig) -> ExteroState;
}

/// Reports the tip coordinates directly.
#[derive(Clone, Copy, Debug, Default)]
pub struct PositionSensor;

pub fn sense_position(c: &EndEffectorConfig) -> ExteroState {
    ExteroState(c.0.to_vec())
}

impl Exteroceptor for PositionSensor {
    fn dim(&self) -> usize {
        2
    }

    fn sense(&self, c: &EndEffectorConfig) -> ExteroState {
        sense_position(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Blue,
}

impl Color {
    pub const ALL: [Color; 2] = [Color::Red, Color::Blue];
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightSource {
    pub x: f64,
    pub y: f64,
    pub color: Color,
}

impl LightSource {
    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub sources: Vec<LightSource>,
}

impl Environment {
    pub fn new(sources: Vec<LightSource>) -> Result<Self> {
        let env = Self { sources };
        env.validate()?;
        Ok(env)
    }

    pub fn validate(&self) -> Result<()> {
        for color in Color::ALL {
            if !self.sources.iter().any(|s| s.color == color) {
                return Err(Error::InvalidArgument(format!(
                    "environment has no {color:?} source"
                )));
            }
        }
        if self.sources.iter().any(|s| !s.x.is_finite() || !s.y.is_finite()) {
            return Err(Error::InvalidArgument("non-finite source position".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let env: Self = serde_json::from_str(text)?;
        env.validate()?;
        Ok(env)
    }
}

/// Axis-aligned rectangle where sources are scattered.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialBounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Default for SpatialBounds {
    fn default() -> Self {
        Self {
            x_min: 4.0,
            x_max: 8.0,
            y_min: -4.0,
            y_max: 4.0,
        }
    }
}

/// Draws `n_red` red then `n_blue` blue sources uniformly in `bounds`.
///
/// `exclusion_radius` is the farthest the lens can get from the origin; the
/// whole rectangle must lie beyond it so every source stays in front of the
/// retina.
pub fn generate_environment(
    seed: u64,
    n_red: usize,
    n_blue: usize,
    bounds: &SpatialBounds,
    exclusion_radius: f64,
) -> Result<Environment> {
    if n_red == 0 || n_blue == 0 {
        return Err(Error::InvalidArgument(
            "environment needs at least one source of each color".into(),
        ));
    }
    if !(bounds.x_min < bounds.x_max && bounds.y_min < bounds.y_max) {
        return Err(Error::InvalidArgument("empty spatial bounds".into()));
    }
    if bounds.x_min <= exclusion_radius {
        return Err(Error::InvalidArgument(format!(
            "source bounds start at x = {} inside the reachable band (radius {exclusion_radius})",
            bounds.x_min
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sources = std::iter::repeat_n(Color::Red, n_red)
        .chain(std::iter::repeat_n(Color::Blue, n_blue))
        .map(|color| LightSource {
            x: rng.gen_range(bounds.x_min..=bounds.x_max),
            y: rng.gen_range(bounds.y_min..=bounds.y_max),
            color,
        })
        .collect();
    Environment::new(sources)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetinaGeometry {
    /// Photoreceptor positions along the retina line, per color.
    pub photoreceptor_offsets: [f64; 3],
    /// Distance from the retina line to the pinhole.
    pub lens_offset: f64,
    /// Absolute angle of the optical axis (0 faces +x).
    pub orientation: f64,
}

impl Default for RetinaGeometry {
    fn default() -> Self {
        Self {
            photoreceptor_offsets: [-0.2, 0.0, 0.2],
            lens_offset: 0.2,
            orientation: 0.0,
        }
    }
}

impl RetinaGeometry {
    pub const N_PHOTORECEPTORS: usize = 6;

    pub fn validate(&self) -> Result<()> {
        if !(self.lens_offset > 0.0) {
            return Err(Error::InvalidArgument("lens_offset must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetinaPose {
    pub position: Vector2<f64>,
    pub orientation: f64,
}

impl RetinaPose {
    fn axis(&self) -> Vector2<f64> {
        Vector2::new(self.orientation.cos(), self.orientation.sin())
    }

    /// Direction of the retina line.
    fn lateral(&self) -> Vector2<f64> {
        Vector2::new(-self.orientation.sin(), self.orientation.cos())
    }

    pub fn lens_center(&self, geom: &RetinaGeometry) -> Vector2<f64> {
        self.position + geom.lens_offset * self.axis()
    }
}

/// Retina-line coordinate where the ray from `src` through the pinhole lands,
/// or `None` when the source is not strictly in front of the lens plane.
pub fn project_source(
    src: &Vector2<f64>,
    pose: &RetinaPose,
    geom: &RetinaGeometry,
) -> Option<f64> {
    let rel = src - pose.lens_center(geom);
    let depth = rel.dot(&pose.axis());
    if depth <= 0.0 {
        return None;
    }
    let lateral = rel.dot(&pose.lateral());
    Some(-geom.lens_offset * lateral / depth)
}

/// Photoreceptor excitations ordered `[red_0, red_1, red_2, blue_0, blue_1, blue_2]`.
///
/// Each visible source contributes `exp(-(y_proj - y_ph)^2) / D` to every
/// photoreceptor of its color, `D` being the lens-to-source distance.
pub fn sense_retina(
    c: &EndEffectorConfig,
    env: &Environment,
    geom: &RetinaGeometry,
) -> ExteroState {
    let pose = RetinaPose {
        position: c.as_vector(),
        orientation: geom.orientation,
    };
    let lens = pose.lens_center(geom);
    let mut s = vec![0.0; RetinaGeometry::N_PHOTORECEPTORS];
    for src in &env.sources {
        let pos = src.position();
        let Some(y_proj) = project_source(&pos, &pose, geom) else {
            continue;
        };
        let dist = (pos - lens).norm();
        let base = match src.color {
            Color::Red => 0,
            Color::Blue => 3,
        };
        for (k, y_ph) in geom.photoreceptor_offsets.iter().enumerate() {
            s[base + k] += (-(y_proj - y_ph).powi(2)).exp() / dist;
        }
    }
    ExteroState(s)
}

/// Retina sensor bound to one environment.
#[derive(Clone, Debug)]
pub struct Retina {
    pub geometry: RetinaGeometry,
    pub environment: Environment,
}

impl Exteroceptor for Retina {
    fn dim(&self) -> usize {
        RetinaGeometry::N_PHOTORECEPTORS
    }

    fn sense(&self, c: &EndEffectorConfig) -> ExteroState {
        sense_retina(c, &self.environment, &self.geometry)
    }
}
