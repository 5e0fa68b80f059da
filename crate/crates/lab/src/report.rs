use std::fmt;
use std::path::PathBuf;

use nsbohm::dynamics::Trajectory;
use nsbohm::wavefield::WaveFunction;
use serde::{Deserialize, Serialize};

use crate::config::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "<=")]
    AtMost,
    #[serde(rename = "<")]
    Below,
    #[serde(rename = ">")]
    Above,
    #[serde(rename = "==")]
    Equals,
}

impl Relation {
    pub fn holds(self, value: f64, tolerance: f64) -> bool {
        match self {
            Relation::AtMost => value <= tolerance,
            Relation::Below => value < tolerance,
            Relation::Above => value > tolerance,
            Relation::Equals => value == tolerance,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Relation::AtMost => "<=",
            Relation::Below => "<",
            Relation::Above => ">",
            Relation::Equals => "==",
        }
    }
}

/// One measured quantity against its threshold. NaN values never pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    /// Acceptance criterion this check belongs to, if any.
    pub criterion: Option<u8>,
    pub value: f64,
    pub relation: Relation,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    pub fn new(name: impl Into<String>, criterion: Option<u8>, value: f64, relation: Relation, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            criterion,
            value,
            relation,
            tolerance,
            passed: relation.holds(value, tolerance),
        }
    }

    /// A yes/no condition, recorded as 1 or 0 against 1.
    pub fn flag(name: impl Into<String>, criterion: Option<u8>, ok: bool) -> Self {
        Self::new(name, criterion, if ok { 1.0 } else { 0.0 }, Relation::Equals, 1.0)
    }

    /// A count that must be zero.
    pub fn none(name: impl Into<String>, criterion: Option<u8>, count: usize) -> Self {
        Self::new(name, criterion, count as f64, Relation::Equals, 0.0)
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {:e} {} {:e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.relation.symbol(),
            self.tolerance
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTrajectory {
    pub name: String,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosenessRow {
    pub eps: f64,
    pub distance: Option<f64>,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvaderRow {
    pub eps: f64,
    pub x_final: Option<f64>,
    pub level: Option<f64>,
    pub conservation_error: Option<f64>,
    pub relative_conservation_error: Option<f64>,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "rows", rename_all = "snake_case")]
pub enum SweepTable {
    Closeness(Vec<ClosenessRow>),
    Invader(Vec<InvaderRow>),
}

impl SweepTable {
    pub fn len(&self) -> usize {
        match self {
            SweepTable::Closeness(r) => r.len(),
            SweepTable::Invader(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Everything a run computes. Deterministic: no timings or paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResults {
    pub scenario: Scenario,
    pub checks: Vec<Check>,
    pub trajectories: Vec<NamedTrajectory>,
    pub sweep: Option<SweepTable>,
    pub wavefunction: WaveFunction,
}

impl RunResults {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub results: RunResults,
    pub artifacts: Vec<PathBuf>,
    /// `(stage, seconds)`.
    pub timings: Vec<(String, f64)>,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.results.passed()
    }
}
