//! Scenario files: TOML with one table per concern. See `presets/SCHEMA.md`.

use std::path::{Path, PathBuf};

use nsbohm::dynamics::{DynamicsConfig, Integrator};
use nsbohm::evolve::{PhysicsParams, Potential};
use nsbohm::hyperreal::Exponent;
use nsbohm::perturb::{PerturbationSpec, EXACT_ZERO_TOL};
use nsbohm::wavefield::{box_fn, bump, gaussian, truncated_gaussian, Grid, WaveFunction};
use serde::{Deserialize, Serialize};

use crate::LabError;

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Trajectories of one state from one start point.
    Trajectory,
    /// Baseline against perturbed trajectories over an ε sweep.
    Closeness,
    /// Reverse space invader over an ε sweep.
    Invader,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegratorChoice {
    Guidance,
    Cdf,
    Both,
}

impl IntegratorChoice {
    pub fn integrators(self) -> Vec<Integrator> {
        match self {
            IntegratorChoice::Guidance => vec![Integrator::Guidance],
            IntegratorChoice::Cdf => vec![Integrator::Cdf],
            IntegratorChoice::Both => vec![Integrator::Guidance, Integrator::Cdf],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialState {
    Gaussian {
        center: f64,
        sigma: f64,
        #[serde(default)]
        k0: f64,
    },
    /// Gaussian cut to zero farther than `cutoff` from the center.
    TruncatedGaussian { center: f64, sigma: f64, cutoff: f64 },
    Box { a: f64, b: f64 },
    /// Smooth bump supported on `[a, b]`.
    Bump { a: f64, b: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationConfig {
    /// `"1/2"`, `"1"`, `2`, ...
    #[serde(with = "grade")]
    pub grade: Exponent,
    pub envelope_center: f64,
    pub envelope_width: f64,
    /// Samples with `|ψ|` at or below this count as zeros.
    #[serde(default)]
    pub zero_tol: f64,
}

impl PerturbationConfig {
    pub fn spec(&self) -> PerturbationSpec {
        PerturbationSpec {
            grade: self.grade,
            envelope_center: self.envelope_center,
            envelope_width: self.envelope_width,
        }
    }
}

mod grade {
    use nsbohm::hyperreal::Exponent;
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(q: &Exponent, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&q.to_string())
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Int(i64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Exponent, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Int(n) => Ok(Exponent::from_integer(n)),
            Raw::Text(s) => s
                .trim()
                .parse::<Exponent>()
                .map_err(|_| de::Error::custom(format!("`{s}` is not a rational like \"3/2\""))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSpec {
    pub t_end: f64,
    /// Output times, `t = 0` and `t_end` included.
    pub samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct InvaderSpec {
    /// ε of the time-reversed run.
    pub reverse_eps: Option<f64>,
    /// The smallest ε must carry the particle beyond this position.
    pub exceed_bound: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub equivariance: f64,
    pub agreement: f64,
    pub closed_form: f64,
    pub closeness: f64,
    pub conservation: f64,
    pub return_distance: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            equivariance: 1e-3,
            agreement: 1e-3,
            closed_form: 1e-3,
            closeness: 1e-3,
            conservation: 1e-6,
            return_distance: 1e-2,
        }
    }
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub kind: ScenarioKind,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub x0: f64,
    #[serde(default)]
    pub eps_list: Vec<f64>,
    /// Defaults to `both` for trajectories and `cdf` otherwise.
    #[serde(default)]
    pub integrator: Option<IntegratorChoice>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub grid: GridSpec,
    #[serde(default)]
    pub physics: PhysicsParams,
    #[serde(default = "free")]
    pub potential: Potential,
    pub initial: InitialState,
    #[serde(default)]
    pub perturbation: Option<PerturbationConfig>,
    pub time: TimeSpec,
    #[serde(default)]
    pub invader: InvaderSpec,
    #[serde(default)]
    pub dynamics: DynamicsConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
}

fn free() -> Potential {
    Potential::Free
}

fn bad(key: &str, message: impl Into<String>) -> LabError {
    LabError::Config {
        key: key.to_string(),
        message: message.into(),
    }
}

fn positive(key: &str, v: f64) -> Result<(), LabError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(bad(key, format!("must be positive and finite, got {v}")))
    }
}

fn finite(key: &str, v: f64) -> Result<(), LabError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(bad(key, format!("must be finite, got {v}")))
    }
}

impl Scenario {
    /// Parses and validates.
    pub fn from_toml_str(text: &str) -> Result<Self, LabError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| LabError::Parse {
            message: e.message().to_string(),
        })?;
        let scenario: Scenario = serde_path_to_error::deserialize(table.clone()).map_err(|e| {
            let key = e.path().to_string();
            let message = e.into_inner().to_string();
            LabError::Config {
                key: if key == "." { "(top level)".into() } else { tagged_field(&table, key, &message) },
                message,
            }
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn from_path(path: &Path) -> Result<Self, LabError> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenarios serialize")
    }

    pub fn integrator_choice(&self) -> IntegratorChoice {
        self.integrator.unwrap_or(match self.kind {
            ScenarioKind::Trajectory => IntegratorChoice::Both,
            _ => IntegratorChoice::Cdf,
        })
    }

    pub fn validate(&self) -> Result<(), LabError> {
        if self.name.trim().is_empty() {
            return Err(bad("name", "must not be empty"));
        }
        let g = self.grid;
        finite("grid.x_min", g.x_min)?;
        finite("grid.x_max", g.x_max)?;
        if g.x_min >= g.x_max {
            return Err(bad("grid.x_min", format!("x_min ({}) must be below x_max ({})", g.x_min, g.x_max)));
        }
        if g.n < Grid::MIN_POINTS {
            return Err(bad("grid.n", format!("must be at least {}, got {}", Grid::MIN_POINTS, g.n)));
        }
        positive("physics.mass", self.physics.mass)?;
        positive("physics.hbar", self.physics.hbar)?;
        match &self.potential {
            Potential::Free => {}
            Potential::Harmonic { omega } => positive("potential.omega", *omega)?,
            Potential::Sampled { values } => {
                if values.len() != g.n {
                    return Err(bad("potential.values", format!("{} values for {} grid points", values.len(), g.n)));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(bad("potential.values", "must all be finite"));
                }
            }
        }
        match self.initial {
            InitialState::Gaussian { center, sigma, k0 } => {
                finite("initial.center", center)?;
                positive("initial.sigma", sigma)?;
                finite("initial.k0", k0)?;
            }
            InitialState::TruncatedGaussian { center, sigma, cutoff } => {
                finite("initial.center", center)?;
                positive("initial.sigma", sigma)?;
                positive("initial.cutoff", cutoff)?;
            }
            InitialState::Box { a, b } | InitialState::Bump { a, b } => {
                finite("initial.a", a)?;
                finite("initial.b", b)?;
                if a >= b {
                    return Err(bad("initial.a", format!("a ({a}) must be below b ({b})")));
                }
                if a < g.x_min || b > g.x_max {
                    return Err(bad("initial.b", "support must lie inside the grid"));
                }
            }
        }
        if !(g.x_min..=g.x_max).contains(&self.x0) {
            return Err(bad("x0", format!("{} is outside the grid [{}, {}]", self.x0, g.x_min, g.x_max)));
        }
        positive("time.t_end", self.time.t_end)?;
        if self.time.samples < 2 {
            return Err(bad("time.samples", "need at least 2 output times"));
        }
        if let Some(p) = &self.perturbation {
            if p.grade <= Exponent::from_integer(0) {
                return Err(bad("perturbation.grade", format!("must be positive, got {}", p.grade)));
            }
            if p.grade * 2 > nsbohm::hyperreal::default_cap() {
                return Err(bad(
                    "perturbation.grade",
                    format!("2·grade must not exceed the order cap {}", nsbohm::hyperreal::default_cap()),
                ));
            }
            finite("perturbation.envelope_center", p.envelope_center)?;
            positive("perturbation.envelope_width", p.envelope_width)?;
            if !(p.zero_tol >= 0.0 && p.zero_tol.is_finite()) {
                return Err(bad("perturbation.zero_tol", "must be nonnegative"));
            }
        }
        for (i, e) in self.eps_list.iter().enumerate() {
            if !(*e > 0.0 && *e < 1.0) {
                return Err(bad(&format!("eps_list[{i}]"), format!("{e} is not in (0, 1)")));
            }
            if i > 0 && *e >= self.eps_list[i - 1] {
                return Err(bad(&format!("eps_list[{i}]"), "eps_list must be strictly decreasing"));
            }
        }
        if let Some(e) = self.invader.reverse_eps {
            if !(e > 0.0 && e < 1.0) {
                return Err(bad("invader.reverse_eps", format!("{e} is not in (0, 1)")));
            }
        }
        let d = &self.dynamics;
        positive("dynamics.h_max", d.h_max)?;
        positive("dynamics.dt_max", d.dt_max)?;
        if !(d.guard_fraction >= 0.0 && d.guard_fraction < 0.5) {
            return Err(bad("dynamics.guard_fraction", "must lie in [0, 0.5)"));
        }
        finite("dynamics.velocity_scale", d.velocity_scale)?;
        match self.kind {
            ScenarioKind::Trajectory => {}
            ScenarioKind::Closeness | ScenarioKind::Invader => {
                if self.perturbation.is_none() {
                    return Err(bad("perturbation", "required for this kind of scenario"));
                }
                if self.eps_list.is_empty() {
                    return Err(bad("eps_list", "must not be empty"));
                }
                if self.integrator_choice() == IntegratorChoice::Both {
                    return Err(bad("integrator", "choose one of guidance or cdf"));
                }
            }
        }
        if self.kind == ScenarioKind::Invader {
            if !self.potential.is_free() {
                return Err(bad("potential.kind", "invader runs need the free potential"));
            }
            if self.integrator_choice() != IntegratorChoice::Cdf {
                return Err(bad("integrator", "invader runs track the cdf level"));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid, LabError> {
        Ok(Grid::new(self.grid.x_min, self.grid.x_max, self.grid.n)?)
    }

    pub fn initial_wavefunction(&self) -> Result<WaveFunction, LabError> {
        let g = self.grid()?;
        let wf = match self.initial {
            InitialState::Gaussian { center, sigma, k0 } => gaussian(g, center, sigma, k0),
            InitialState::TruncatedGaussian { center, sigma, cutoff } => truncated_gaussian(g, center, sigma, cutoff),
            InitialState::Box { a, b } => box_fn(g, a, b),
            InitialState::Bump { a, b } => bump(g, a, b),
        };
        wf.map_err(|e| bad("initial", e.to_string()))
    }

    pub fn zero_tol(&self) -> f64 {
        self.perturbation.as_ref().map_or(EXACT_ZERO_TOL, |p| p.zero_tol)
    }

    pub fn times(&self) -> Vec<f64> {
        nsbohm::dynamics::linspace(0.0, self.time.t_end, self.time.samples)
    }

    /// Where outputs go when no directory is given on the command line.
    pub fn default_output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(&self.name))
    }
}

/// Serde loses the path inside internally tagged tables such as `[initial]`;
/// recover the field from the message or from the first non-numeric value.
fn tagged_field(table: &toml::Table, key: String, message: &str) -> String {
    let Some(toml::Value::Table(sub)) = table.get(&key) else {
        return key;
    };
    if message.starts_with("missing field") || message.starts_with("unknown field") {
        if let Some(name) = message.split('`').nth(1) {
            return format!("{key}.{name}");
        }
    }
    let numeric = |v: &toml::Value| matches!(v, toml::Value::Float(_) | toml::Value::Integer(_));
    let bad = sub.iter().find(|(k, v)| {
        k.as_str() != "kind"
            && !numeric(v)
            && !matches!(v, toml::Value::Array(xs) if xs.iter().all(numeric))
    });
    match bad {
        Some((k, _)) => format!("{key}.{k}"),
        None => key,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "t"
kind = "trajectory"
x0 = 0.5

[grid]
x_min = -10.0
x_max = 10.0
n = 256

[initial]
kind = "gaussian"
center = 0.0
sigma = 1.0

[time]
t_end = 1.0
samples = 11
"#;

    fn key_of(text: &str) -> String {
        match Scenario::from_toml_str(text) {
            Err(LabError::Config { key, .. }) => key,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let s = Scenario::from_toml_str(MINIMAL).unwrap();
        assert_eq!(s.seed, 42);
        assert_eq!(s.physics, PhysicsParams::default());
        assert_eq!(s.potential, Potential::Free);
        assert_eq!(s.integrator_choice(), IntegratorChoice::Both);
        assert_eq!(s.times().len(), 11);
    }

    #[test]
    fn round_trips_through_toml() {
        let s = Scenario::from_toml_str(MINIMAL).unwrap();
        assert_eq!(Scenario::from_toml_str(&s.to_toml()).unwrap(), s);
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(key_of(&MINIMAL.replace("x_min = -10.0", "x_min = 10.0")), "grid.x_min");
        assert_eq!(key_of(&MINIMAL.replace("n = 256", "n = 4")), "grid.n");
        assert_eq!(key_of(&MINIMAL.replace("sigma = 1.0", "sigma = -1.0")), "initial.sigma");
        assert_eq!(key_of(&MINIMAL.replace("sigma = 1.0", "sigma = \"wide\"")), "initial.sigma");
        assert_eq!(key_of(&MINIMAL.replace("x0 = 0.5", "x0 = 50.0")), "x0");
        assert_eq!(key_of(&MINIMAL.replace("samples = 11", "samples = 11\nstep = 2")), "time.step");
        assert_eq!(
            key_of(&MINIMAL.replace("x0 = 0.5", "x0 = 0.5\neps_list = [1e-3, 1e-2]")),
            "eps_list[1]"
        );
    }

    #[test]
    fn grade_accepts_integers_and_fractions() {
        let base = MINIMAL.to_string()
            + "\n[perturbation]\nenvelope_center = 0.0\nenvelope_width = 8.0\n";
        let s = Scenario::from_toml_str(&(base.clone() + "grade = \"3/2\"\n")).unwrap();
        assert_eq!(s.perturbation.unwrap().grade, Exponent::new(3, 2));
        let s = Scenario::from_toml_str(&(base.clone() + "grade = 1\n")).unwrap();
        assert_eq!(s.perturbation.unwrap().grade, Exponent::from_integer(1));
        assert_eq!(key_of(&(base.clone() + "grade = \"half\"\n")), "perturbation.grade");
        assert_eq!(key_of(&(base + "grade = \"5/2\"\n")), "perturbation.grade");
    }

    #[test]
    fn sweeps_need_a_perturbation() {
        let text = MINIMAL.replace("kind = \"trajectory\"", "kind = \"closeness\"\neps_list = [1e-2]");
        assert_eq!(key_of(&text), "perturbation");
    }
}
