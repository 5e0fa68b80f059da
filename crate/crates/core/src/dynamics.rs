//! Bohmian trajectories.
//!
//! Two independent integrators are provided: RK4 on the guidance equation
//! `v = (ħ/m)·Im(ψ*∂ₓψ)/|ψ|²`, and quantile tracking, which uses the fact
//! that one-dimensional Bohmian motion preserves the cdf level of the
//! particle. Both work on graded states (standard part of the velocity,
//! hyperreal quantiles) and on concrete instantiations at a fixed `ε`.

use std::collections::HashMap;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::evolve::{
    free_propagator_eval, free_propagator_eval_with_derivative, spectral_derivative,
    FreeEvolution, PhysicsParams, Potential, SplitStepper,
};
use crate::hyperreal::{Exponent, HyperReal};
use crate::perturb::{perturb, PerturbationSpec, EXACT_ZERO_TOL};
use crate::wavefield::{
    combine, quad_form, re_dot, CdfTable, GradedWaveFunction, Grid, RealCdf, WaveFunction,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsConfig {
    /// Largest RK4 step.
    pub h_max: f64,
    /// Largest split-step size for non-free potentials.
    pub dt_max: f64,
    /// Densities below this at every order count as a node.
    pub node_threshold: f64,
    pub max_halvings: u32,
    /// Width of the band at each grid edge, as a fraction of the grid
    /// length, where periodic wraparound makes on-grid values untrustworthy.
    pub guard_fraction: f64,
    /// Edge-band mass allowed, relative to the tracked level, before the
    /// free-propagator tail search takes over.
    pub edge_tolerance: f64,
    /// Multiplies every guidance velocity. Anything but 1 is a deliberate
    /// fault, used to check that the diagnostics notice.
    pub velocity_scale: f64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            h_max: 0.01,
            dt_max: 1e-3,
            node_threshold: 1e-30,
            max_halvings: 40,
            guard_fraction: 0.05,
            edge_tolerance: 1e-6,
            velocity_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    Guidance,
    Cdf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Position {
    Real(f64),
    Graded(HyperReal),
}

impl Position {
    /// The real position, or the standard part of a finite hyperreal one
    /// (NaN for an infinite one).
    pub fn standard(&self) -> f64 {
        match self {
            Position::Real(x) => *x,
            Position::Graded(h) => h.standard_part().unwrap_or(f64::NAN),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TrajectoryMode {
    Standard,
    Graded,
    Concrete { eps: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrajectoryStatus {
    Complete,
    /// Left the grid under a non-free potential.
    LeftGrid { t: f64, x: f64 },
    /// The quantile is not on the grid; the particle is beyond `bound`.
    Escaped { t: f64, bound: f64 },
    Node { t: f64, x: f64 },
    /// The quantile search failed; the position lies in `[lo, hi]`.
    SearchFailed { t: f64, lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub positions: Vec<Position>,
    pub mode: TrajectoryMode,
    pub status: TrajectoryStatus,
}

impl Trajectory {
    pub fn standard_positions(&self) -> Vec<f64> {
        self.positions.iter().map(Position::standard).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.status == TrajectoryStatus::Complete
    }

    pub fn last(&self) -> Option<f64> {
        self.positions.last().map(Position::standard)
    }
}

/// `n` equally spaced times from `t0` to `t1` inclusive.
pub fn linspace(t0: f64, t1: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![t0],
        _ => (0..n)
            .map(|i| {
                if i == n - 1 {
                    t1
                } else {
                    t0 + (t1 - t0) * i as f64 / (n - 1) as f64
                }
            })
            .collect(),
    }
}

fn check_times(t_grid: &[f64]) -> Result<()> {
    if t_grid.is_empty() {
        return Err(Error::InvalidArgument("time grid is empty".into()));
    }
    if !(t_grid[0] >= 0.0) || t_grid.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidArgument("times must be finite and nonnegative".into()));
    }
    if t_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("times must be strictly increasing".into()));
    }
    Ok(())
}

/// Weights and parts in the form a run works with: concrete runs fold the
/// weights into a single part.
fn prepare(state0: &GradedWaveFunction, eps: Option<f64>) -> Result<(Vec<HyperReal>, Vec<WaveFunction>, TrajectoryMode)> {
    match eps {
        Some(e) => {
            if !(e > 0.0 && e < 1.0) {
                return Err(Error::InvalidArgument(format!("eps = {e} must lie in (0, 1)")));
            }
            Ok((vec![HyperReal::one()], vec![state0.instantiate(e)], TrajectoryMode::Concrete { eps: e }))
        }
        None => {
            let single = state0.components().len() == 1
                && state0.weights()[0] == HyperReal::one();
            let mode = if single { TrajectoryMode::Standard } else { TrajectoryMode::Graded };
            Ok((state0.weights(), state0.parts().into_iter().cloned().collect(), mode))
        }
    }
}

struct Fields {
    psi: Vec<WaveFunction>,
    dpsi: Vec<WaveFunction>,
}

enum Source {
    Free(Vec<FreeEvolution>),
    Stepped {
        t: f64,
        parts: Vec<WaveFunction>,
        steppers: HashMap<u64, SplitStepper>,
    },
}

/// Evolved parts at requested times. Free evolution jumps straight to any
/// time; other potentials step forward from the last requested time.
struct StateSource<'a> {
    grid: Grid,
    potential: &'a Potential,
    params: PhysicsParams,
    dt_max: f64,
    initial: Vec<WaveFunction>,
    source: Source,
}

impl<'a> StateSource<'a> {
    fn new(parts: Vec<WaveFunction>, v: &'a Potential, p: PhysicsParams, dt_max: f64) -> Result<Self> {
        p.validate()?;
        if !(dt_max > 0.0) {
            return Err(Error::InvalidArgument("dt_max must be positive".into()));
        }
        let grid = *parts[0].grid();
        v.values(&grid, &p)?;
        let source = if v.is_free() {
            Source::Free(
                parts
                    .iter()
                    .map(|w| FreeEvolution::new(w, p))
                    .collect::<Result<_>>()?,
            )
        } else {
            Source::Stepped {
                t: 0.0,
                parts: parts.clone(),
                steppers: HashMap::new(),
            }
        };
        Ok(Self {
            grid,
            potential: v,
            params: p,
            dt_max,
            initial: parts,
            source,
        })
    }

    fn parts_at(&mut self, t: f64) -> Result<Vec<WaveFunction>> {
        match &mut self.source {
            Source::Free(evs) => Ok(evs.par_iter().map(|e| e.at(t)).collect()),
            Source::Stepped { t: tc, parts, steppers } => {
                if t < *tc {
                    return Err(Error::InvalidArgument(format!(
                        "cannot step back from t = {tc} to t = {t}"
                    )));
                }
                if t > *tc {
                    let span = t - *tc;
                    let n = ((span / self.dt_max) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
                    let dt = span / n as f64;
                    let stepper = match steppers.entry(dt.to_bits()) {
                        std::collections::hash_map::Entry::Occupied(o) => o.into_mut(),
                        std::collections::hash_map::Entry::Vacant(v) => v.insert(SplitStepper::new(
                            self.grid,
                            self.potential,
                            &self.params,
                            dt,
                        )?),
                    };
                    *parts = parts
                        .par_iter()
                        .map(|w| stepper.step(w, n))
                        .collect::<Result<_>>()?;
                    *tc = t;
                }
                Ok(parts.clone())
            }
        }
    }

    fn fields_at(&mut self, t: f64) -> Result<Fields> {
        match &self.source {
            Source::Free(evs) => {
                let (psi, dpsi) = evs.par_iter().map(|e| e.with_derivative(t)).unzip();
                Ok(Fields { psi, dpsi })
            }
            Source::Stepped { .. } => {
                let psi = self.parts_at(t)?;
                let dpsi = psi.par_iter().map(spectral_derivative).collect();
                Ok(Fields { psi, dpsi })
            }
        }
    }

    fn snapshot(&self) -> Option<(f64, Vec<WaveFunction>)> {
        match &self.source {
            Source::Free(_) => None,
            Source::Stepped { t, parts, .. } => Some((*t, parts.clone())),
        }
    }

    fn restore(&mut self, snap: Option<(f64, Vec<WaveFunction>)>) {
        if let (Some((ts, ps)), Source::Stepped { t, parts, .. }) = (snap, &mut self.source) {
            *t = ts;
            *parts = ps;
        }
    }
}

/// Graded `v = (ħ/m)·J/ρ` from component values and derivatives at a point.
fn graded_velocity(
    weights: &[HyperReal],
    vals: &[Complex64],
    ders: &[Complex64],
    p: &PhysicsParams,
    node_threshold: f64,
) -> Option<HyperReal> {
    let rho = quad_form(weights, |i, j| re_dot(vals[i], vals[j]));
    if rho.terms().iter().all(|(_, c)| c.abs() < node_threshold) {
        return None;
    }
    let mut current = HyperReal::zero_with_cap(rho.cap());
    for i in 0..weights.len() {
        for j in 0..weights.len() {
            let c = (vals[i].conj() * ders[j]).im;
            if c != 0.0 {
                current += &(&weights[i] * &weights[j]).scale(c);
            }
        }
    }
    Some((&current / &rho).scale(p.hbar / p.mass))
}

enum PointError {
    Node,
    LeftGrid,
}

fn values_at(
    src: &StateSource,
    fields: &Fields,
    x: f64,
    t: f64,
) -> std::result::Result<(Vec<Complex64>, Vec<Complex64>), PointError> {
    if src.grid.contains(x) {
        Ok((
            fields.psi.iter().map(|w| w.value_at(x)).collect(),
            fields.dpsi.iter().map(|w| w.value_at(x)).collect(),
        ))
    } else if src.potential.is_free() && t != 0.0 {
        let mut vals = Vec::with_capacity(src.initial.len());
        let mut ders = Vec::with_capacity(src.initial.len());
        for w in &src.initial {
            let (v, d) = free_propagator_eval_with_derivative(w, x, t, &src.params)
                .map_err(|_| PointError::Node)?;
            vals.push(v);
            ders.push(d);
        }
        Ok((vals, ders))
    } else if src.potential.is_free() {
        Err(PointError::Node)
    } else {
        Err(PointError::LeftGrid)
    }
}

/// Graded velocity field at `x`; the spatial derivative is spectral.
pub fn velocity(state: &GradedWaveFunction, x: f64, p: &PhysicsParams) -> Result<HyperReal> {
    p.validate()?;
    if !state.grid().contains(x) {
        return Err(Error::InvalidArgument(format!("x = {x} is off the grid")));
    }
    let vals: Vec<Complex64> = state.parts().iter().map(|w| w.value_at(x)).collect();
    let ders: Vec<Complex64> = state
        .parts()
        .iter()
        .map(|w| spectral_derivative(w).value_at(x))
        .collect();
    graded_velocity(&state.weights(), &vals, &ders, p, DynamicsConfig::default().node_threshold)
        .ok_or(Error::Node { t: 0.0, x })
}

/// RK4 integration of the guidance equation from `x0`. With `eps` the state
/// is instantiated first and the run is fully concrete; otherwise the
/// standard part of the graded velocity is integrated.
pub fn integrate_guidance(
    state0: &GradedWaveFunction,
    v: &Potential,
    p: &PhysicsParams,
    x0: f64,
    t_grid: &[f64],
    eps: Option<f64>,
    cfg: &DynamicsConfig,
) -> Result<Trajectory> {
    Ok(integrate_guidance_many(state0, v, p, &[x0], t_grid, eps, cfg)?.remove(0))
}

/// [`integrate_guidance`] for many start points sharing one evolution. All
/// particles advance with the same step, halved until every particle moves
/// at most one cell per step.
pub fn integrate_guidance_many(
    state0: &GradedWaveFunction,
    v: &Potential,
    p: &PhysicsParams,
    x0s: &[f64],
    t_grid: &[f64],
    eps: Option<f64>,
    cfg: &DynamicsConfig,
) -> Result<Vec<Trajectory>> {
    check_times(t_grid)?;
    let grid = *state0.grid();
    if let Some(x) = x0s.iter().find(|x| !grid.contains(**x)) {
        return Err(Error::InvalidArgument(format!("x0 = {x} is off the grid")));
    }
    if !(cfg.h_max > 0.0) {
        return Err(Error::InvalidArgument("h_max must be positive".into()));
    }
    let (weights, parts, mode) = prepare(state0, eps)?;
    let mut src = StateSource::new(parts, v, *p, cfg.dt_max)?;
    let np = x0s.len();
    let mut xs = x0s.to_vec();
    let mut active = vec![true; np];
    let mut status = vec![TrajectoryStatus::Complete; np];
    let mut times: Vec<Vec<f64>> = vec![Vec::new(); np];
    let mut positions: Vec<Vec<Position>> = vec![Vec::new(); np];

    let stage = |src: &StateSource, f: &Fields, x: f64, t: f64| -> std::result::Result<f64, PointError> {
        let (vals, ders) = values_at(src, f, x, t)?;
        let vel = graded_velocity(&weights, &vals, &ders, p, cfg.node_threshold).ok_or(PointError::Node)?;
        Ok(vel.standard_part().map_err(|_| PointError::Node)? * cfg.velocity_scale)
    };

    let mut t = 0.0;
    let mut fields = src.fields_at(0.0)?;
    for &target in t_grid {
        while t < target && active.iter().any(|a| *a) {
            let snap = src.snapshot();
            let mut h = cfg.h_max.min(target - t);
            let mut halvings = 0;
            loop {
                let mut failed: Vec<Option<PointError>> = (0..np).map(|_| None).collect();
                let mut ks = vec![[0.0f64; 4]; np];
                let mut eval = |src: &StateSource, f: &Fields, k: usize, coef: f64, ts: f64, ks: &mut Vec<[f64; 4]>| {
                    for i in 0..np {
                        if !active[i] || failed[i].is_some() {
                            continue;
                        }
                        let xi = if k == 0 { xs[i] } else { xs[i] + coef * ks[i][k - 1] };
                        match stage(src, f, xi, ts) {
                            Ok(vel) => ks[i][k] = vel,
                            Err(e) => failed[i] = Some(e),
                        }
                    }
                };
                eval(&src, &fields, 0, 0.0, t, &mut ks);
                let f_mid = src.fields_at(t + 0.5 * h)?;
                eval(&src, &f_mid, 1, 0.5 * h, t + 0.5 * h, &mut ks);
                eval(&src, &f_mid, 2, 0.5 * h, t + 0.5 * h, &mut ks);
                let t_end = if h == target - t { target } else { t + h };
                let f_end = src.fields_at(t_end)?;
                eval(&src, &f_end, 3, h, t_end, &mut ks);

                let too_fast = (0..np).any(|i| {
                    active[i] && failed[i].is_none() && ks[i].iter().any(|k| k.abs() * h > grid.dx())
                });
                if too_fast && halvings < cfg.max_halvings {
                    src.restore(snap.clone());
                    h *= 0.5;
                    halvings += 1;
                    continue;
                }
                for i in 0..np {
                    if !active[i] {
                        continue;
                    }
                    let fail = failed[i].take().or_else(|| {
                        (too_fast && ks[i].iter().any(|k| k.abs() * h > grid.dx())).then_some(PointError::Node)
                    });
                    match fail {
                        Some(PointError::Node) => {
                            active[i] = false;
                            status[i] = TrajectoryStatus::Node { t, x: xs[i] };
                        }
                        Some(PointError::LeftGrid) => {
                            active[i] = false;
                            status[i] = TrajectoryStatus::LeftGrid { t, x: xs[i] };
                        }
                        None => {
                            let k = ks[i];
                            xs[i] += h / 6.0 * (k[0] + 2.0 * k[1] + 2.0 * k[2] + k[3]);
                        }
                    }
                }
                t = t_end;
                fields = f_end;
                break;
            }
        }
        for i in 0..np {
            if active[i] {
                times[i].push(target);
                positions[i].push(Position::Real(xs[i]));
            }
        }
    }
    Ok((0..np)
        .map(|i| Trajectory {
            times: std::mem::take(&mut times[i]),
            positions: std::mem::take(&mut positions[i]),
            mode,
            status: status[i].clone(),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Left,
    Right,
}

/// Quantile tracking: the particle sits where the evolved cdf takes the
/// level it had at `x0`. The smaller of the left and right levels is
/// tracked, and right tails are integrated directly, so small levels keep
/// their precision.
pub fn cdf_trajectory(
    state0: &GradedWaveFunction,
    v: &Potential,
    p: &PhysicsParams,
    x0: f64,
    t_grid: &[f64],
    eps: Option<f64>,
    cfg: &DynamicsConfig,
) -> Result<Trajectory> {
    check_times(t_grid)?;
    let grid = *state0.grid();
    if !grid.contains(x0) {
        return Err(Error::InvalidArgument(format!("x0 = {x0} is off the grid")));
    }
    let (weights, parts, mode) = prepare(state0, eps)?;
    let mut src = StateSource::new(parts.clone(), v, *p, cfg.dt_max)?;
    let guard = cfg.guard_fraction * grid.length();
    let mut times = Vec::new();
    let mut positions = Vec::new();
    let mut status = TrajectoryStatus::Complete;

    if mode == TrajectoryMode::Graded {
        let table0 = state0.cdf_table();
        let (left, right) = (table0.cdf(x0), table0.right_tail(x0));
        let side = if right.standard_part()? < left.standard_part()? { Side::Right } else { Side::Left };
        for &t in t_grid {
            if t == 0.0 {
                times.push(t);
                positions.push(Position::Graded(HyperReal::from_real(x0)));
                continue;
            }
            let gt = state0.with_parts(src.parts_at(t)?)?;
            let table = CdfTable::new(&gt);
            let q = match side {
                Side::Left => table.quantile_left(&left),
                Side::Right => table.quantile_right(&right),
            };
            let escaped = match &q {
                None => true,
                Some(x) => {
                    let s = x.standard_part().unwrap_or(f64::INFINITY);
                    s > grid.x_max() - guard || s < grid.x_min() + guard
                }
            };
            if escaped {
                let bound = match side {
                    Side::Right => grid.x_max(),
                    Side::Left => grid.x_min(),
                };
                status = TrajectoryStatus::Escaped { t, bound };
                break;
            }
            times.push(t);
            positions.push(Position::Graded(q.expect("checked above")));
        }
        let _ = weights;
        return Ok(Trajectory { times, positions, mode, status });
    }

    let c0 = RealCdf::new(&parts[0]);
    let (left, right) = (c0.cdf(x0), c0.right_tail(x0));
    let (side, level) = if right < left { (Side::Right, right) } else { (Side::Left, left) };
    for &t in t_grid {
        if t == 0.0 {
            times.push(t);
            positions.push(Position::Real(x0));
            continue;
        }
        let wf = src.parts_at(t)?.remove(0);
        let cdf = RealCdf::new(&wf);
        let q = match side {
            Side::Left => cdf.quantile_left(level),
            Side::Right => cdf.quantile_right(level),
        };
        let in_guard = |x: f64| x > grid.x_max() - guard || x < grid.x_min() + guard;
        let contaminated = cdf.edge_mass(guard) > cfg.edge_tolerance * level;
        let trusted = match q {
            Some(x) => !in_guard(x) && !contaminated,
            None => false,
        };
        if trusted {
            times.push(t);
            positions.push(Position::Real(q.expect("checked above")));
            continue;
        }
        if !v.is_free() {
            let bound = if side == Side::Right { grid.x_max() } else { grid.x_min() };
            status = TrajectoryStatus::Escaped { t, bound };
            break;
        }
        match tail_search(&parts[0], t, p, level, side, guard) {
            Ok(x) => {
                times.push(t);
                positions.push(Position::Real(x));
            }
            Err(s) => {
                status = s.with_time(t);
                break;
            }
        }
    }
    Ok(Trajectory { times, positions, mode, status })
}

struct SearchFailure {
    lo: f64,
    hi: f64,
}

impl SearchFailure {
    fn with_time(self, t: f64) -> TrajectoryStatus {
        TrajectoryStatus::SearchFailed { t, lo: self.lo, hi: self.hi }
    }
}

/// Locates the level on the real line using free-propagator densities,
/// marching outward from the inner edge of the guard band.
fn tail_search(
    wf0: &WaveFunction,
    t: f64,
    p: &PhysicsParams,
    level: f64,
    side: Side,
    guard: f64,
) -> std::result::Result<f64, SearchFailure> {
    let grid = wf0.grid();
    let dir = if side == Side::Right { 1.0 } else { -1.0 };
    let h = grid.dx();
    let max_points = 64 * grid.n();
    let mut start = if side == Side::Right { grid.x_max() - guard } else { grid.x_min() + guard };
    let density = |x: f64| free_propagator_eval(wf0, x, t, p).map(|v| v.norm_sqr()).unwrap_or(0.0);
    for _ in 0..32 {
        let mut dens = Vec::new();
        let mut quiet = 0;
        while quiet < 64 {
            if dens.len() > max_points {
                return Err(SearchFailure { lo: start.min(start + dir * h * dens.len() as f64), hi: f64::INFINITY });
            }
            let rho = density(start + dir * h * dens.len() as f64);
            quiet = if rho * h < 1e-9 * level && !dens.is_empty() { quiet + 1 } else { 0 };
            dens.push(rho);
        }
        let m = dens.len();
        let mut tail = vec![0.0; m];
        for i in (0..m - 1).rev() {
            tail[i] = tail[i + 1] + 0.5 * (dens[i] + dens[i + 1]) * h;
        }
        if tail[0] < level {
            start -= dir * guard;
            if (dir > 0.0 && start < grid.x_min()) || (dir < 0.0 && start > grid.x_max()) {
                break;
            }
            continue;
        }
        let i = tail.partition_point(|v| *v >= level) - 1;
        let seg = tail[i] - tail[i + 1];
        let frac = if seg > 0.0 { (tail[i] - level) / seg } else { 0.0 };
        return Ok(start + dir * h * (i as f64 + frac));
    }
    Err(SearchFailure { lo: grid.x_min(), hi: grid.x_max() })
}

/// `max_t |st(cdf(state_t, x(t)) − cdf(state0, x0))|` over the recorded
/// points of `traj`. Concrete trajectories are checked against the state at
/// their own `ε`; points off the grid are skipped.
pub fn equivariance_residual(
    state0: &GradedWaveFunction,
    v: &Potential,
    p: &PhysicsParams,
    traj: &Trajectory,
    cfg: &DynamicsConfig,
) -> Result<f64> {
    let Some(first) = traj.positions.first() else {
        return Ok(0.0);
    };
    let eps = match traj.mode {
        TrajectoryMode::Concrete { eps } => Some(eps),
        _ => None,
    };
    let (weights, parts, _) = prepare(state0, eps)?;
    let with_weights = |parts: Vec<WaveFunction>| -> Result<GradedWaveFunction> {
        match eps {
            Some(_) => Ok(GradedWaveFunction::standard(parts.into_iter().next().expect("one part"))),
            None => state0.with_parts(parts),
        }
    };
    let _ = weights;
    let mut src = StateSource::new(parts, v, *p, cfg.dt_max)?;
    let s0 = with_weights(src.parts_at(0.0)?)?;
    let grid = *state0.grid();
    let r0 = s0.cdf(first.standard());
    let mut worst: f64 = 0.0;
    for (t, x) in traj.times.iter().zip(&traj.positions) {
        let x = x.standard();
        if !grid.contains(x) {
            continue;
        }
        let st = with_weights(src.parts_at(*t)?)?;
        let d = (&st.cdf(x) - &r0).standard_part()?;
        worst = worst.max(d.abs());
    }
    Ok(worst)
}

/// Smallest standard density met along a trajectory, and the times at which
/// it fell to `tol` or below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportReport {
    pub min_density: f64,
    pub violations: Vec<f64>,
}

/// Runtime check that a trajectory stays inside the support of the standard
/// part of the wavefunction.
pub fn support_monitor(
    state0: &GradedWaveFunction,
    v: &Potential,
    p: &PhysicsParams,
    traj: &Trajectory,
    tol: f64,
    cfg: &DynamicsConfig,
) -> Result<SupportReport> {
    let (_, parts, _) = prepare(state0, None)?;
    let mut src = StateSource::new(parts, v, *p, cfg.dt_max)?;
    let mut min_density = f64::INFINITY;
    let mut violations = Vec::new();
    for (t, x) in traj.times.iter().zip(&traj.positions) {
        let x = x.standard();
        if !state0.grid().contains(x) {
            continue;
        }
        let st = state0.with_parts(src.parts_at(*t)?)?;
        let rho = st.density_at(x).coefficient(Exponent::from_integer(0));
        min_density = min_density.min(rho);
        if rho <= tol {
            violations.push(*t);
        }
    }
    Ok(SupportReport { min_density, violations })
}

fn run_integrator(
    integrator: Integrator,
    state0: &GradedWaveFunction,
    v: &Potential,
    p: &PhysicsParams,
    x0: f64,
    t_grid: &[f64],
    eps: Option<f64>,
    cfg: &DynamicsConfig,
) -> Result<Trajectory> {
    match integrator {
        Integrator::Guidance => integrate_guidance(state0, v, p, x0, t_grid, eps, cfg),
        Integrator::Cdf => cdf_trajectory(state0, v, p, x0, t_grid, eps, cfg),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsDistance {
    pub eps: f64,
    /// `max_t |x(t) − x̃(t; ε)|`, or `None` if the perturbed run failed.
    pub distance: Option<f64>,
    pub status: TrajectoryStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosenessReport {
    pub baseline: Trajectory,
    pub rows: Vec<EpsDistance>,
    pub perturbed: Vec<Trajectory>,
}

impl ClosenessReport {
    /// `d` never grows as `ε` shrinks (rows are in the order of the sweep).
    pub fn monotone_nonincreasing(&self) -> bool {
        let mut rows: Vec<&EpsDistance> = self.rows.iter().collect();
        rows.sort_by(|a, b| b.eps.total_cmp(&a.eps));
        rows.windows(2).all(|w| match (w[0].distance, w[1].distance) {
            (Some(a), Some(b)) => b <= a,
            _ => false,
        })
    }

    /// `d` at the smallest `ε`.
    pub fn smallest_eps_distance(&self) -> Option<f64> {
        self.rows
            .iter()
            .min_by(|a, b| a.eps.total_cmp(&b.eps))
            .and_then(|r| r.distance)
    }
}

/// Compares the trajectory of `ψ` from `x0` with the trajectories of the
/// perturbed state instantiated at each `ε`.
#[allow(clippy::too_many_arguments)]
pub fn closeness_check(
    psi: &WaveFunction,
    spec: &PerturbationSpec,
    v: &Potential,
    p: &PhysicsParams,
    x0: f64,
    t_grid: &[f64],
    eps_list: &[f64],
    integrator: Integrator,
    cfg: &DynamicsConfig,
) -> Result<ClosenessReport> {
    if psi.value_at(x0).norm() == 0.0 {
        return Err(Error::OutsideSupport { x0 });
    }
    let pert = perturb(psi, spec, EXACT_ZERO_TOL)?;
    let base_state = GradedWaveFunction::standard(psi.clone());
    let baseline = run_integrator(integrator, &base_state, v, p, x0, t_grid, None, cfg)?;
    let base_x = baseline.standard_positions();
    let perturbed = eps_list
        .par_iter()
        .map(|e| run_integrator(integrator, &pert.state, v, p, x0, t_grid, Some(*e), cfg))
        .collect::<Result<Vec<_>>>()?;
    let rows = eps_list
        .iter()
        .zip(&perturbed)
        .map(|(e, tr)| {
            let xs = tr.standard_positions();
            let distance = (tr.is_complete() && baseline.is_complete()).then(|| {
                base_x
                    .iter()
                    .zip(&xs)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            });
            EpsDistance { eps: *e, distance, status: tr.status.clone() }
        })
        .collect();
    Ok(ClosenessReport { baseline, rows, perturbed })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvaderEpsRun {
    pub eps: f64,
    /// Right-tail level tracked at this `ε`.
    pub level: f64,
    pub trajectory: Trajectory,
    /// Position at the final time, when the run completed.
    pub x_final: Option<f64>,
    /// Largest `|right_tail(x(t)) − level|` over the run.
    pub conservation_error: f64,
    pub relative_conservation_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReverseRun {
    pub eps: f64,
    pub start: f64,
    pub level: f64,
    pub trajectory: Trajectory,
    pub x_return: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvaderReport {
    pub grade: Exponent,
    /// Graded mass to the right of `x0`.
    pub level: HyperReal,
    pub times: Vec<f64>,
    pub runs: Vec<InvaderEpsRun>,
    pub reverse: Option<ReverseRun>,
}

impl InvaderReport {
    pub fn level_exponent(&self) -> Option<Exponent> {
        self.level.leading_exponent()
    }

    /// `x(t1; ε)` strictly increases as `ε` decreases.
    pub fn strictly_increasing(&self) -> bool {
        let mut runs: Vec<&InvaderEpsRun> = self.runs.iter().collect();
        runs.sort_by(|a, b| b.eps.total_cmp(&a.eps));
        runs.windows(2).all(|w| match (w[0].x_final, w[1].x_final) {
            (Some(a), Some(b)) => b > a,
            _ => false,
        })
    }

    pub fn max_conservation_error(&self) -> f64 {
        self.runs.iter().map(|r| r.conservation_error).fold(0.0, f64::max)
    }
}

/// Reverse space invader: a state supported away from `x0` is perturbed so
/// that a particle can start at `x0`, then tracked under free evolution at
/// each concrete `ε` by its right-tail level. With `reverse_eps`, the state
/// at the final time is conjugated and evolved back for the same duration.
#[allow(clippy::too_many_arguments)]
pub fn invader_run(
    psi: &WaveFunction,
    spec: &PerturbationSpec,
    p: &PhysicsParams,
    x0: f64,
    t1: f64,
    n_times: usize,
    eps_list: &[f64],
    reverse_eps: Option<f64>,
    cfg: &DynamicsConfig,
) -> Result<InvaderReport> {
    let grid = *psi.grid();
    if !grid.contains(x0) {
        return Err(Error::InvalidArgument(format!("x0 = {x0} is off the grid")));
    }
    if psi.value_at(x0).norm() != 0.0 {
        return Err(Error::InvalidArgument(format!("x0 = {x0} lies in the support of psi")));
    }
    if !(t1 > 0.0) || n_times < 2 {
        return Err(Error::InvalidArgument("need t1 > 0 and at least two output times".into()));
    }
    if let Some(e) = eps_list.iter().chain(reverse_eps.iter()).find(|e| !(**e > 0.0 && **e < 1.0)) {
        return Err(Error::InvalidArgument(format!("eps = {e} must lie in (0, 1)")));
    }
    let pert = perturb(psi, spec, EXACT_ZERO_TOL)?;
    let theta = pert.theta.clone().ok_or(Error::FullSupport)?;
    if theta.value_at(x0).norm() == 0.0 {
        return Err(Error::InvalidArgument(format!("theta vanishes at x0 = {x0}")));
    }
    let level = pert.state.right_tail(x0);
    let times = linspace(0.0, t1, n_times);
    let parts0: Vec<WaveFunction> = pert.state.parts().into_iter().cloned().collect();
    let evs = parts0
        .iter()
        .map(|w| FreeEvolution::new(w, *p))
        .collect::<Result<Vec<_>>>()?;
    let guard = cfg.guard_fraction * grid.length();

    let mut all_eps: Vec<f64> = eps_list.to_vec();
    if let Some(e) = reverse_eps {
        if !all_eps.contains(&e) {
            all_eps.push(e);
        }
    }
    struct Track {
        eps: f64,
        weights: Vec<f64>,
        level: f64,
        times: Vec<f64>,
        xs: Vec<f64>,
        worst: f64,
        status: TrajectoryStatus,
    }
    let mut tracks: Vec<Track> = all_eps
        .iter()
        .map(|&e| Track {
            eps: e,
            weights: pert.state.concrete_weights(e),
            level: level.instantiate(e),
            times: Vec::new(),
            xs: Vec::new(),
            worst: 0.0,
            status: TrajectoryStatus::Complete,
        })
        .collect();

    let mut last_parts = parts0.clone();
    for &t in &times {
        let parts: Vec<WaveFunction> = if t == 0.0 {
            parts0.clone()
        } else {
            evs.par_iter().map(|e| e.at(t)).collect()
        };
        let refs: Vec<&WaveFunction> = parts.iter().collect();
        tracks.par_iter_mut().for_each(|tr| {
            if tr.status != TrajectoryStatus::Complete {
                return;
            }
            if t == 0.0 {
                tr.times.push(t);
                tr.xs.push(x0);
                return;
            }
            let wf = combine(&tr.weights, &refs);
            let cdf = RealCdf::new(&wf);
            match cdf.quantile_right(tr.level) {
                Some(x) if x <= grid.x_max() - guard && cdf.edge_mass(guard) <= cfg.edge_tolerance * tr.level => {
                    tr.worst = tr.worst.max((cdf.right_tail(x) - tr.level).abs());
                    tr.times.push(t);
                    tr.xs.push(x);
                }
                _ => {
                    tr.status = TrajectoryStatus::Escaped { t, bound: grid.x_max() - guard };
                }
            }
        });
        last_parts = parts;
    }

    let to_traj = |tr: &Track| Trajectory {
        times: tr.times.clone(),
        positions: tr.xs.iter().map(|x| Position::Real(*x)).collect(),
        mode: TrajectoryMode::Concrete { eps: tr.eps },
        status: tr.status.clone(),
    };
    let final_x = |tr: &Track| (tr.status == TrajectoryStatus::Complete).then(|| *tr.xs.last().expect("t = 0 recorded"));

    let reverse = match reverse_eps {
        None => None,
        Some(e) => {
            let tr = tracks.iter().find(|tr| tr.eps == e).expect("reverse eps tracked");
            match final_x(tr) {
                None => None,
                Some(start) => {
                    let refs: Vec<&WaveFunction> = last_parts.iter().collect();
                    let back = combine(&tr.weights, &refs).conj();
                    let lvl = RealCdf::new(&back).right_tail(start);
                    let ev = FreeEvolution::new(&back, *p)?;
                    let mut rt = Vec::new();
                    let mut rx = Vec::new();
                    let mut status = TrajectoryStatus::Complete;
                    for &t in &times {
                        let x = if t == 0.0 {
                            Some(start)
                        } else {
                            RealCdf::new(&ev.at(t)).quantile_right(lvl)
                        };
                        match x {
                            Some(x) => {
                                rt.push(t);
                                rx.push(Position::Real(x));
                            }
                            None => {
                                status = TrajectoryStatus::Escaped { t, bound: grid.x_max() };
                                break;
                            }
                        }
                    }
                    let x_return = (status == TrajectoryStatus::Complete)
                        .then(|| rx.last().map(Position::standard))
                        .flatten();
                    Some(ReverseRun {
                        eps: e,
                        start,
                        level: lvl,
                        trajectory: Trajectory {
                            times: rt,
                            positions: rx,
                            mode: TrajectoryMode::Concrete { eps: e },
                            status,
                        },
                        x_return,
                    })
                }
            }
        }
    };

    let runs = eps_list
        .iter()
        .map(|e| {
            let tr = tracks.iter().find(|tr| tr.eps == *e).expect("tracked");
            InvaderEpsRun {
                eps: *e,
                level: tr.level,
                trajectory: to_traj(tr),
                x_final: final_x(tr),
                conservation_error: tr.worst,
                relative_conservation_error: if tr.level > 0.0 { tr.worst / tr.level } else { 0.0 },
            }
        })
        .collect();

    Ok(InvaderReport {
        grade: spec.grade,
        level,
        times,
        runs,
        reverse,
    })
}
