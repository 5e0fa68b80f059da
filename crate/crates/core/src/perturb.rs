//! Full-support infinitesimal perturbation `ψ̃ = √(1−δ)·ψ + ε^q·θ₀` of a
//! wavefunction, with `θ₀` a unit-norm masked Gaussian living exactly on the
//! zero set of `ψ` and `δ = ε^{2q}`.

use std::cmp::Ordering;

use num_complex::Complex64;
use num_traits::{Signed, Zero};
use serde::{Deserialize, Serialize};

use crate::hyperreal::{Exponent, HyperReal};
use crate::wavefield::{
    l2_distance, Component, GradedWaveFunction, Grid, IntervalUnion, WaveFunction, ZeroSetMask,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    /// `θ = ε^q · θ₀`.
    pub grade: Exponent,
    pub envelope_center: f64,
    pub envelope_width: f64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            grade: Exponent::from_integer(1),
            envelope_center: 0.0,
            envelope_width: 1.0,
        }
    }
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.grade.is_positive() {
            return Err(Error::InvalidArgument(format!("grade must be positive, got {}", self.grade)));
        }
        if !(self.envelope_width > 0.0 && self.envelope_width.is_finite()) {
            return Err(Error::InvalidArgument("envelope width must be positive".into()));
        }
        if !self.envelope_center.is_finite() {
            return Err(Error::InvalidArgument("envelope center must be finite".into()));
        }
        Ok(())
    }
}

/// Default zero-set tolerance for states built with exact zeros.
pub const EXACT_ZERO_TOL: f64 = 0.0;
/// Default zero-set tolerance for evolved states.
pub const EVOLVED_ZERO_TOL: f64 = 1e-14;

/// Cells where `|ψ| <= tol` or `|ψ|²` underflows.
pub fn zero_set(wf: &WaveFunction, tol: f64) -> ZeroSetMask {
    // A sample whose density underflows carries no probability, so it is
    // treated as a zero even when `tol` is 0.
    ZeroSetMask::new(
        wf.samples()
            .iter()
            .map(|s| s.norm() <= tol || s.norm_sqr() < f64::MIN_POSITIVE)
            .collect(),
    )
}

/// Unit-norm `θ₀`: a Gaussian envelope on the masked cells, exactly zero
/// elsewhere.
pub fn build_theta(grid: &Grid, mask: &ZeroSetMask, spec: &PerturbationSpec) -> Result<WaveFunction> {
    spec.validate()?;
    if mask.len() != grid.n() {
        return Err(Error::InvalidArgument("mask length differs from grid size".into()));
    }
    if mask.count() == 0 {
        return Err(Error::FullSupport);
    }
    let two_w2 = 2.0 * spec.envelope_width * spec.envelope_width;
    let mut samples = Vec::with_capacity(grid.n());
    let mut underflow: Option<f64> = None;
    for (j, x) in grid.points().into_iter().enumerate() {
        if !mask.contains(j) {
            samples.push(Complex64::zero());
            continue;
        }
        let d = x - spec.envelope_center;
        let v = (-d * d / two_w2).exp();
        if v == 0.0 {
            let closer = underflow.map_or(true, |u| (u - spec.envelope_center).abs() > d.abs());
            if closer {
                underflow = Some(x);
            }
        }
        samples.push(Complex64::new(v, 0.0));
    }
    if let Some(x) = underflow {
        return Err(Error::EnvelopeUnderflow { x });
    }
    WaveFunction::new(*grid, samples)?.normalized()
}

#[derive(Debug, Clone)]
pub struct Perturbation {
    pub state: GradedWaveFunction,
    /// `None` when `ψ` had no zeros, in which case `state` is just `ψ`.
    pub theta: Option<WaveFunction>,
    pub mask: ZeroSetMask,
    pub grade: Exponent,
}

impl Perturbation {
    pub fn full_support_already(&self) -> bool {
        self.theta.is_none()
    }

    /// Whether the graded density is positive at every grid node.
    pub fn has_full_support(&self) -> bool {
        (0..self.state.grid().n())
            .all(|j| self.state.density_at_node(j).signum() == Ordering::Greater)
    }
}

/// Builds `ψ̃ = √(1−ε^{2q})·ψ + ε^q·θ₀` with the zero set taken at `tol`.
///
/// Every node keeps a positive graded density as long as `2q` does not
/// exceed the hyperreal order cap.
pub fn perturb(psi: &WaveFunction, spec: &PerturbationSpec, tol: f64) -> Result<Perturbation> {
    spec.validate()?;
    let mask = zero_set(psi, tol);
    let grid = *psi.grid();
    let theta = match build_theta(&grid, &mask, spec) {
        Ok(t) => t,
        Err(Error::FullSupport) => {
            return Ok(Perturbation {
                state: GradedWaveFunction::standard(psi.clone()),
                theta: None,
                mask,
                grade: spec.grade,
            })
        }
        Err(e) => return Err(e),
    };
    let delta = HyperReal::eps_pow(spec.grade * 2);
    let w0 = (HyperReal::one() - delta).sqrt()?;
    let state = GradedWaveFunction::new(vec![
        Component {
            exponent: Exponent::zero(),
            scalar: w0,
            part: psi.clone(),
        },
        Component {
            exponent: spec.grade,
            scalar: HyperReal::one(),
            part: theta.clone(),
        },
    ])?;
    Ok(Perturbation {
        state,
        theta: Some(theta),
        mask,
        grade: spec.grade,
    })
}

/// `(|∫_F|ψ|² − ∫_F|ψ̃|²|, 2‖ψ − ψ̃‖₂)`; the first never exceeds the second.
pub fn probability_gap(
    psi: &GradedWaveFunction,
    psitilde: &GradedWaveFunction,
    f: &IntervalUnion,
) -> Result<(HyperReal, HyperReal)> {
    let gap = (psi.integral_over(f) - psitilde.integral_over(f)).abs();
    let bound = l2_distance(psi, psitilde)?.scale(2.0);
    Ok((gap, bound))
}
