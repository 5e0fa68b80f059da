//! The acceptance criteria as one batch of checks. A criterion that errors
//! is recorded as failed; the batch carries on.

use std::time::Instant;

use nsbohm::dynamics::{
    cdf_trajectory, equivariance_residual, integrate_guidance_many, DynamicsConfig, Trajectory,
};
use nsbohm::evolve::{split_step, PhysicsParams, Potential};
use nsbohm::hyperreal::{default_cap, Exponent, HyperReal};
use nsbohm::perturb::{probability_gap, perturb, PerturbationSpec};
use nsbohm::wavefield::{box_fn, bump, gaussian, l2_distance, GradedWaveFunction, Grid, IntervalUnion, WaveFunction};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Scenario, DEFAULT_SEED};
use crate::output::checks_csv;
use crate::presets;
use crate::report::{Check, Relation};
use crate::run::{execute, CDF_RESIDUAL_TOL};
use crate::{with_workers, LabError};

pub const CRITERIA: [(u8, &str); 10] = [
    (1, "field laws"),
    (2, "unitarity"),
    (3, "analytic oracle"),
    (4, "perturbation postconditions"),
    (5, "probability bound"),
    (6, "equivariance"),
    (7, "trajectory closeness"),
    (8, "reverse space invader"),
    (9, "time-reversed invader"),
    (10, "determinism"),
];

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub workers: usize,
    /// Criteria to run; `None` runs all of them.
    pub only: Option<Vec<u8>>,
    pub seed: u64,
    /// Dynamics settings for the trajectory criteria. Changing
    /// `velocity_scale` injects a fault the suite should catch.
    pub dynamics: DynamicsConfig,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            workers: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            only: None,
            seed: DEFAULT_SEED,
            dynamics: DynamicsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriterionResult {
    pub id: u8,
    pub title: String,
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl CriterionResult {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    /// One line: verdict, title and the first failing (or last) check.
    pub fn summary(&self) -> String {
        let shown = self.checks.iter().find(|c| !c.passed).or(self.checks.last());
        format!(
            "criterion {:>2} {}: {} [{}] ({:.1}s)",
            self.id,
            if self.passed() { "PASS" } else { "FAIL" },
            self.title,
            shown.map(|c| format!("{} = {:e} {} {:e}", c.name, c.value, c.relation.symbol(), c.tolerance)).unwrap_or_default(),
            self.seconds
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub criteria: Vec<CriterionResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.criteria.iter().all(CriterionResult::passed)
    }

    /// All checks as CSV. Contains no timings, so repeated runs compare
    /// byte for byte.
    pub fn table_csv(&self) -> Result<String, LabError> {
        let checks: Vec<Check> = self.criteria.iter().flat_map(|c| c.checks.clone()).collect();
        checks_csv(&checks)
    }
}

pub fn verify_all(opts: &VerifyOptions) -> Result<VerifyReport, LabError> {
    let selected: Vec<u8> = match &opts.only {
        None => CRITERIA.iter().map(|c| c.0).collect(),
        Some(list) => {
            if let Some(bad) = list.iter().find(|id| !(1..=10).contains(*id)) {
                return Err(LabError::Config {
                    key: "only".into(),
                    message: format!("no criterion {bad}; criteria are numbered 1 to 10"),
                });
            }
            let mut l = list.clone();
            l.sort_unstable();
            l.dedup();
            l
        }
    };
    if selected.is_empty() {
        return Err(LabError::NothingToVerify);
    }
    let base: Vec<u8> = selected.iter().copied().filter(|id| *id != 10).collect();
    let mut criteria = with_workers(opts.workers, || run_criteria(&base, opts))?;
    if selected.contains(&10) {
        let started = Instant::now();
        let check = determinism(&criteria, &base, opts);
        criteria.push(CriterionResult {
            id: 10,
            title: title(10).into(),
            checks: vec![check],
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(VerifyReport { criteria })
}

fn title(id: u8) -> &'static str {
    CRITERIA.iter().find(|c| c.0 == id).map(|c| c.1).unwrap_or("")
}

fn run_criteria(ids: &[u8], opts: &VerifyOptions) -> Vec<CriterionResult> {
    let mut invader_cache: Option<Result<Vec<Check>, String>> = None;
    ids.iter()
        .map(|&id| {
            let started = Instant::now();
            let outcome: Result<Vec<Check>, String> = match id {
                1 => Ok(field_laws(opts.seed)),
                2 => unitarity(opts.seed).map_err(|e| e.to_string()),
                3 => analytic_oracle(opts).map_err(|e| e.to_string()),
                4 => perturbation_postconditions(opts.seed).map_err(|e| e.to_string()),
                5 => probability_bound(opts.seed).map_err(|e| e.to_string()),
                6 => equivariance(opts).map_err(|e| e.to_string()),
                7 => closeness(opts).map_err(|e| e.to_string()),
                8 | 9 => {
                    let all = invader_cache
                        .get_or_insert_with(|| invader_checks(opts).map_err(|e| e.to_string()))
                        .clone();
                    all.map(|cs| cs.into_iter().filter(|c| c.criterion == Some(id)).collect())
                }
                _ => Err(format!("no criterion {id}")),
            };
            let checks = match outcome {
                Ok(c) => c,
                Err(message) => {
                    let mut c = Check::flag(format!("c{id}_ran"), Some(id), false);
                    c.name = format!("c{id}_error: {message}");
                    vec![c]
                }
            };
            CriterionResult { id, title: title(id).into(), checks, seconds: started.elapsed().as_secs_f64() }
        })
        .collect()
}

/// Reruns the other criteria on a pool of a different size and compares the
/// result tables byte for byte.
fn determinism(first: &[CriterionResult], base: &[u8], opts: &VerifyOptions) -> Check {
    let other = if opts.workers == 1 { 4 } else { 1 };
    let (ids, reference): (Vec<u8>, Option<Vec<CriterionResult>>) = if base.is_empty() {
        (CRITERIA.iter().map(|c| c.0).filter(|id| *id != 10).collect(), None)
    } else {
        (base.to_vec(), Some(first.to_vec()))
    };
    let table = |rs: &[CriterionResult]| VerifyReport { criteria: rs.to_vec() }.table_csv().ok();
    let a = match reference {
        Some(r) => table(&r),
        None => with_workers(opts.workers, || run_criteria(&ids, opts)).ok().and_then(|r| table(&r)),
    };
    let b = with_workers(other, || run_criteria(&ids, opts)).ok().and_then(|r| table(&r));
    Check::flag(format!("tables_identical_{}_vs_{}_workers", opts.workers.max(1), other), Some(10), a.is_some() && a == b)
}

// Criterion 1.

fn dyadic(rng: &mut ChaCha8Rng) -> HyperReal {
    let n = rng.gen_range(0..5);
    HyperReal::from_terms(
        (0..n).map(|_| {
            let e = Exponent::new(rng.gen_range(-4..=8), 2);
            let k = rng.gen_range(1..=64) as f64 / 8.0;
            (e, if rng.gen_bool(0.5) { -k } else { k })
        }),
        default_cap(),
    )
}

fn trusted_order(xs: &[&HyperReal]) -> Exponent {
    let zero = Exponent::from_integer(0);
    xs.iter().fold(default_cap(), |acc, x| acc + x.leading_exponent().map_or(zero, |e| e.min(zero)))
}

fn coef_scale(x: &HyperReal) -> f64 {
    x.terms().iter().map(|t| t.1.abs()).fold(1.0, f64::max)
}

fn finite_part(x: &HyperReal) -> HyperReal {
    HyperReal::from_terms(x.terms().iter().copied().filter(|t| t.0 >= Exponent::from_integer(0)), x.cap())
}

/// Violations of the ordered-field laws over 10⁴ random triples. Ring laws
/// are exact on dyadic coefficients; inverses hold up to rounding scaled by
/// the size of the series coefficients.
pub fn field_laws(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let one = HyperReal::one();
    let zero = HyperReal::zero();
    let (mut ring, mut order, mut inverse, mut st) = (0usize, 0usize, 0usize, 0usize);
    for _ in 0..10_000 {
        let (a, b, c) = (dyadic(&mut rng), dyadic(&mut rng), dyadic(&mut rng));
        let k = trusted_order(&[&a, &b, &c]);
        let ring_ok = &a + &b == &b + &a
            && &(&a + &b) + &c == &a + &(&b + &c)
            && &a + &zero == a
            && (&a + &(-&a)).is_zero()
            && &a * &b == &b * &a
            && &a * &one == a
            && (&(&a * &b) * &c).agrees_to(&(&a * &(&b * &c)), k)
            && (&a * &(&b + &c)).agrees_to(&(&(&a * &b) + &(&a * &c)), k);
        ring += usize::from(!ring_ok);
        if !a.is_zero() {
            let inv = a.recip().expect("nonzero");
            let tol = 1e-12 * coef_scale(&a) * coef_scale(&inv);
            inverse += usize::from(!(&a * &inv).approx_agrees_to(&one, trusted_order(&[&a, &a]), tol));
        }
        let ab = a.compare(&b);
        let mut order_ok = ab == b.compare(&a).reverse() && (ab == std::cmp::Ordering::Equal) == (a == b);
        if a < b {
            order_ok &= &a + &c < &b + &c;
            if c > zero {
                order_ok &= !(&a * &c > &b * &c);
            }
            if b < c {
                order_ok &= a < c;
            }
        }
        order += usize::from(!order_ok);
        let (fa, fb) = (finite_part(&a), finite_part(&b));
        let (sa, sb) = (fa.standard_part().expect("finite"), fb.standard_part().expect("finite"));
        let st_ok = (&fa + &fb).standard_part().ok() == Some(sa + sb) && (&fa * &fb).standard_part().ok() == Some(sa * sb);
        st += usize::from(!st_ok);
    }
    vec![
        Check::none("ring_law_violations", Some(1), ring),
        Check::none("order_law_violations", Some(1), order),
        Check::none("inverse_violations", Some(1), inverse),
        Check::none("standard_part_violations", Some(1), st),
    ]
}

// Criterion 2.

fn random_state(rng: &mut ChaCha8Rng, g: Grid) -> Result<WaveFunction, LabError> {
    let mut wf = WaveFunction::zeros(g);
    for _ in 0..2 {
        let part = gaussian(g, rng.gen_range(-5.0..5.0), rng.gen_range(0.5..2.0), rng.gen_range(-2.0..2.0))?;
        let c = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        wf = wf.add(&part.scale(c))?;
    }
    Ok(wf)
}

pub fn unitarity(seed: u64) -> Result<Vec<Check>, LabError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Grid::new(-20.0, 20.0, 1024)?;
    let p = PhysicsParams::default();
    let sampled = Potential::Sampled { values: (0..g.n()).map(|_| rng.gen_range(-2.0..2.0)).collect() };
    let mut checks = Vec::new();
    for (name, v) in [("free", Potential::Free), ("harmonic", Potential::Harmonic { omega: 1.0 }), ("sampled", sampled)] {
        let wf = random_state(&mut rng, g)?;
        let out = split_step(&wf, &v, &p, 1e-3, 1000)?;
        checks.push(Check::new(format!("norm_drift_{name}"), Some(2), (out.norm2() - wf.norm2()).abs(), Relation::AtMost, 1e-10));
    }
    Ok(checks)
}

// Criterion 3.

fn spread(wf: &WaveFunction) -> f64 {
    let g = wf.grid();
    let rho: Vec<f64> = wf.samples().iter().map(|s| s.norm_sqr()).collect();
    let m: f64 = rho.iter().sum();
    let mean = (0..g.n()).map(|j| g.x(j) * rho[j]).sum::<f64>() / m;
    ((0..g.n()).map(|j| (g.x(j) - mean).powi(2) * rho[j]).sum::<f64>() / m).sqrt()
}

pub fn analytic_oracle(opts: &VerifyOptions) -> Result<Vec<Check>, LabError> {
    let p = PhysicsParams::default();
    let g = Grid::new(-40.0, 40.0, 4096)?;
    let mut worst: f64 = 0.0;
    for s0 in [0.7, 1.0, 1.5] {
        let wf = gaussian(g, 0.0, s0, 0.0)?;
        let w0 = spread(&wf);
        for (steps, t) in [(500, 0.5), (1000, 1.0), (1500, 1.5), (2000, 2.0)] {
            let out = split_step(&wf, &Potential::Free, &p, t / steps as f64, steps)?;
            let exact = w0 * (1.0 + (p.hbar * t / (2.0 * p.mass * s0 * s0)).powi(2)).sqrt();
            worst = worst.max((spread(&out) / exact - 1.0).abs());
        }
    }
    let mut checks = vec![Check::new("gaussian_width_relative_error", Some(3), worst, Relation::AtMost, 1e-4)];
    let mut s = presets::load("free_gaussian")?;
    s.dynamics = opts.dynamics;
    let r = execute(&s)?;
    checks.extend(r.checks.into_iter().filter(|c| c.criterion == Some(3)));
    Ok(checks)
}

// Criteria 4 and 5.

fn grades() -> [Exponent; 4] {
    [Exponent::new(1, 2), Exponent::from_integer(1), Exponent::new(3, 2), Exponent::from_integer(2)]
}

fn compact_state(rng: &mut ChaCha8Rng, g: Grid) -> Result<WaveFunction, LabError> {
    let a = rng.gen_range(-8.0..4.0);
    let b = a + rng.gen_range(0.5..6.0);
    let k = rng.gen_range(-3.0..3.0);
    let base = if rng.gen_bool(0.5) { bump(g, a, b)? } else { box_fn(g, a, b)? };
    let samples = base.samples().iter().zip(g.points()).map(|(s, x)| s * Complex64::from_polar(1.0, k * x)).collect();
    Ok(WaveFunction::new(g, samples)?)
}

fn random_spec(rng: &mut ChaCha8Rng, q: Exponent) -> PerturbationSpec {
    PerturbationSpec {
        grade: q,
        envelope_center: rng.gen_range(-5.0..5.0),
        envelope_width: rng.gen_range(6.0..12.0),
    }
}

pub fn perturbation_postconditions(seed: u64) -> Result<Vec<Check>, LabError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Grid::new(-20.0, 20.0, 1024)?;
    let (mut norm_dev, mut no_support, mut wrong_order): (f64, usize, usize) = (0.0, 0, 0);
    for i in 0..20 {
        let psi = compact_state(&mut rng, g)?;
        let q = grades()[i % 4];
        let p = perturb(&psi, &random_spec(&mut rng, q), 0.0)?;
        let norm = p.state.norm();
        for (e, c) in norm.terms() {
            let target = if *e == Exponent::from_integer(0) { 1.0 } else { 0.0 };
            norm_dev = norm_dev.max((c - target).abs());
        }
        if norm.coefficient(Exponent::from_integer(0)) == 0.0 {
            norm_dev = f64::INFINITY;
        }
        no_support += usize::from(!p.has_full_support());
        let d = l2_distance(&GradedWaveFunction::standard(psi), &p.state)?;
        wrong_order += usize::from(d.leading_exponent() != Some(q));
    }
    Ok(vec![
        Check::new("graded_norm_deviation", Some(4), norm_dev, Relation::AtMost, 1e-12),
        Check::none("states_without_full_support", Some(4), no_support),
        Check::none("distance_order_mismatches", Some(4), wrong_order),
    ])
}

fn random_union(rng: &mut ChaCha8Rng, g: &Grid) -> Result<IntervalUnion, LabError> {
    let k = rng.gen_range(1..6);
    let mut pts: Vec<f64> = (0..2 * k).map(|_| rng.gen_range(g.x_min()..g.x_max())).collect();
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    if pts.len() % 2 == 1 {
        pts.pop();
    }
    Ok(IntervalUnion::new(pts.chunks(2).map(|c| (c[0], c[1])).collect())?)
}

pub fn probability_bound(seed: u64) -> Result<Vec<Check>, LabError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let g = Grid::new(-20.0, 20.0, 1024)?;
    let mut violations = 0;
    for i in 0..20 {
        let psi = compact_state(&mut rng, g)?;
        let p = perturb(&psi, &random_spec(&mut rng, grades()[i % 4]), 0.0)?;
        let base = GradedWaveFunction::standard(psi);
        for _ in 0..100 {
            let (gap, bound) = probability_gap(&base, &p.state, &random_union(&mut rng, &g)?)?;
            violations += usize::from(gap > bound);
        }
    }
    Ok(vec![Check::none("bound_violations", Some(5), violations)])
}

// Criterion 6.

fn crossings(lo: &Trajectory, hi: &Trajectory) -> bool {
    lo.times != hi.times || lo.standard_positions().iter().zip(hi.standard_positions()).any(|(a, b)| *a >= b)
}

pub fn equivariance(opts: &VerifyOptions) -> Result<Vec<Check>, LabError> {
    let cfg = opts.dynamics;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(6));
    let mut checks = Vec::new();
    let mut crossed = 0;
    for name in ["free_gaussian", "harmonic"] {
        let s: Scenario = presets::load(name)?;
        let state = GradedWaveFunction::standard(s.initial_wavefunction()?);
        let (v, p) = (&s.potential, &s.physics);
        let times = s.times();
        let mut x0s = vec![s.x0];
        for _ in 0..4 {
            x0s.push(state.parts()[0].sample_initial_position(rng.gen_range(0.05..0.95))?);
        }
        let ode = integrate_guidance_many(&state, v, p, &x0s, &times, None, &cfg)?;
        let cdf = x0s
            .par_iter()
            .map(|x| cdf_trajectory(&state, v, p, *x, &times, None, &cfg))
            .collect::<nsbohm::Result<Vec<_>>>()?;
        let residual = ode
            .par_iter()
            .map(|tr| equivariance_residual(&state, v, p, tr, &cfg))
            .collect::<nsbohm::Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        let cdf_residual = cdf
            .par_iter()
            .map(|tr| equivariance_residual(&state, v, p, tr, &cfg))
            .collect::<nsbohm::Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        let gap = ode
            .iter()
            .zip(&cdf)
            .map(|(a, b)| {
                if a.times != b.times {
                    return f64::NAN;
                }
                a.standard_positions().iter().zip(b.standard_positions()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
            })
            .fold(0.0, |m: f64, g| if g.is_nan() { g } else { m.max(g) });
        checks.push(Check::new(format!("{name}_guidance_equivariance"), Some(6), residual, Relation::AtMost, 1e-3));
        checks.push(Check::new(format!("{name}_cdf_equivariance"), Some(6), cdf_residual, Relation::AtMost, CDF_RESIDUAL_TOL));
        checks.push(Check::new(format!("{name}_integrator_agreement"), Some(6), gap, Relation::AtMost, 1e-3));

        let pairs: Vec<(f64, f64)> = (0..25)
            .map(|_| {
                let a = state.parts()[0].sample_initial_position(rng.gen_range(0.02..0.98))?;
                let b = state.parts()[0].sample_initial_position(rng.gen_range(0.02..0.98))?;
                Ok((a.min(b), a.max(b) + 1e-3))
            })
            .collect::<Result<_, LabError>>()?;
        let starts: Vec<f64> = pairs.iter().flat_map(|(a, b)| [*a, *b]).collect();
        let ode = integrate_guidance_many(&state, v, p, &starts, &times, None, &cfg)?;
        let cdf = starts
            .par_iter()
            .map(|x| cdf_trajectory(&state, v, p, *x, &times, None, &cfg))
            .collect::<nsbohm::Result<Vec<_>>>()?;
        for trs in [&ode, &cdf] {
            crossed += trs.chunks(2).filter(|pair| crossings(&pair[0], &pair[1])).count();
        }
    }
    checks.push(Check::none("trajectory_crossings_in_50_pairs", Some(6), crossed));
    Ok(checks)
}

// Criterion 7.

pub fn closeness(opts: &VerifyOptions) -> Result<Vec<Check>, LabError> {
    let mut checks = Vec::new();
    for name in ["closeness", "closeness_harmonic"] {
        let mut s = presets::load(name)?;
        s.dynamics = opts.dynamics;
        for mut c in execute(&s)?.checks {
            c.name = format!("{name}_{}", c.name.trim_start_matches("closeness_"));
            checks.push(c);
        }
    }
    Ok(checks)
}

// Criteria 8 and 9.

pub fn invader_checks(opts: &VerifyOptions) -> Result<Vec<Check>, LabError> {
    let mut s = presets::load("reverse_invader")?;
    s.dynamics = opts.dynamics;
    Ok(execute(&s)?.checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_selection_is_an_error() {
        let opts = VerifyOptions { only: Some(vec![]), ..Default::default() };
        assert!(matches!(verify_all(&opts), Err(LabError::NothingToVerify)));
        let opts = VerifyOptions { only: Some(vec![11]), ..Default::default() };
        assert!(matches!(verify_all(&opts), Err(LabError::Config { .. })));
    }

    #[test]
    fn cheap_criteria_pass() {
        let opts = VerifyOptions { only: Some(vec![1, 2, 4, 5]), workers: 2, ..Default::default() };
        let r = verify_all(&opts).unwrap();
        assert_eq!(r.criteria.len(), 4);
        for c in &r.criteria {
            assert!(c.passed(), "{}", c.summary());
        }
    }
}
