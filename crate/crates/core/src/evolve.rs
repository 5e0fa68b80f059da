//! Schrödinger evolution on the periodic grid, free-propagator quadrature off
//! the grid, and time reversal.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use num_complex::Complex64;
use num_traits::Zero;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::wavefield::{Grid, GradedWaveFunction, WaveFunction};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicsParams {
    pub mass: f64,
    pub hbar: f64,
}

impl Default for PhysicsParams {
    fn default() -> Self {
        Self { mass: 1.0, hbar: 1.0 }
    }
}

impl PhysicsParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return Err(Error::InvalidArgument(format!("mass must be positive, got {}", self.mass)));
        }
        if !(self.hbar > 0.0 && self.hbar.is_finite()) {
            return Err(Error::InvalidArgument(format!("hbar must be positive, got {}", self.hbar)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Potential {
    Free,
    /// `V(x) = ½·m·ω²·x²`.
    Harmonic { omega: f64 },
    /// Values at the grid nodes.
    Sampled { values: Vec<f64> },
}

impl Potential {
    pub fn is_free(&self) -> bool {
        matches!(self, Potential::Free)
    }

    pub fn values(&self, grid: &Grid, p: &PhysicsParams) -> Result<Vec<f64>> {
        match self {
            Potential::Free => Ok(vec![0.0; grid.n()]),
            Potential::Harmonic { omega } => {
                if !omega.is_finite() {
                    return Err(Error::InvalidArgument("omega must be finite".into()));
                }
                Ok(grid
                    .points()
                    .iter()
                    .map(|x| 0.5 * p.mass * omega * omega * x * x)
                    .collect())
            }
            Potential::Sampled { values } => {
                if values.len() != grid.n() {
                    return Err(Error::InvalidArgument(format!(
                        "sampled potential has {} values for {} grid points",
                        values.len(),
                        grid.n()
                    )));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidArgument("sampled potential must be finite".into()));
                }
                Ok(values.clone())
            }
        }
    }
}

/// Angular wavenumbers in FFT order. The Nyquist entry is `-π/dx`.
pub fn wavenumbers(grid: &Grid) -> Vec<f64> {
    let n = grid.n() as i64;
    let dk = 2.0 * PI / grid.length();
    (0..n)
        .map(|m| if m < n / 2 { m } else { m - n })
        .map(|m| m as f64 * dk)
        .collect()
}

fn plans(n: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    let mut planner = FftPlanner::new();
    (planner.plan_fft_forward(n), planner.plan_fft_inverse(n))
}

/// Precomputed Strang step `e^{-iVdt/2ħ} e^{-iTdt/ħ} e^{-iVdt/2ħ}` for one
/// grid, potential and time step.
pub struct SplitStepper {
    grid: Grid,
    kinetic: Vec<Complex64>,
    half_potential: Option<Vec<Complex64>>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl SplitStepper {
    pub fn new(grid: Grid, v: &Potential, p: &PhysicsParams, dt: f64) -> Result<Self> {
        p.validate()?;
        if !dt.is_finite() {
            return Err(Error::InvalidArgument("dt must be finite".into()));
        }
        let inv_n = 1.0 / grid.n() as f64;
        let kinetic = wavenumbers(&grid)
            .iter()
            .map(|k| Complex64::from_polar(inv_n, -p.hbar * k * k * dt / (2.0 * p.mass)))
            .collect();
        let half_potential = if v.is_free() {
            None
        } else {
            Some(
                v.values(&grid, p)?
                    .iter()
                    .map(|vx| Complex64::from_polar(1.0, -vx * dt / (2.0 * p.hbar)))
                    .collect(),
            )
        };
        let (fft, ifft) = plans(grid.n());
        Ok(Self {
            grid,
            kinetic,
            half_potential,
            fft,
            ifft,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn step_in_place(&self, samples: &mut [Complex64], steps: usize) {
        let mut scratch = vec![Complex64::zero(); self.fft.get_inplace_scratch_len()];
        for _ in 0..steps {
            if let Some(h) = &self.half_potential {
                samples.iter_mut().zip(h).for_each(|(s, f)| *s *= f);
            }
            self.fft.process_with_scratch(samples, &mut scratch);
            samples.iter_mut().zip(&self.kinetic).for_each(|(s, f)| *s *= f);
            self.ifft.process_with_scratch(samples, &mut scratch);
            if let Some(h) = &self.half_potential {
                samples.iter_mut().zip(h).for_each(|(s, f)| *s *= f);
            }
        }
    }

    pub fn step(&self, wf: &WaveFunction, steps: usize) -> Result<WaveFunction> {
        if wf.grid() != &self.grid {
            return Err(Error::GridMismatch);
        }
        let mut s = wf.samples().to_vec();
        self.step_in_place(&mut s, steps);
        WaveFunction::new(self.grid, s)
    }
}

/// `steps` Strang split-step updates of size `dt` (negative `dt` evolves
/// backward).
pub fn split_step(
    wf: &WaveFunction,
    v: &Potential,
    p: &PhysicsParams,
    dt: f64,
    steps: usize,
) -> Result<WaveFunction> {
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    SplitStepper::new(*wf.grid(), v, p, dt)?.step(wf, steps)
}

/// Evolves every component independently; scalars and exponents are kept.
pub fn evolve_graded(
    gwf: &GradedWaveFunction,
    v: &Potential,
    p: &PhysicsParams,
    dt: f64,
    steps: usize,
) -> Result<GradedWaveFunction> {
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    let stepper = SplitStepper::new(*gwf.grid(), v, p, dt)?;
    let parts = gwf
        .parts()
        .par_iter()
        .map(|part| stepper.step(part, steps))
        .collect::<Result<Vec<_>>>()?;
    gwf.with_parts(parts)
}

/// Complex conjugation of all samples.
pub fn time_reverse(wf: &WaveFunction) -> WaveFunction {
    wf.conj()
}

pub fn time_reverse_graded(gwf: &GradedWaveFunction) -> GradedWaveFunction {
    gwf.with_parts(gwf.parts().iter().map(|p| p.conj()).collect())
        .expect("conjugation keeps the grid")
}

/// Spectral derivative `∂ₓψ` (Nyquist mode dropped).
pub fn spectral_derivative(wf: &WaveFunction) -> WaveFunction {
    let grid = *wf.grid();
    let (fft, ifft) = plans(grid.n());
    let mut s = wf.samples().to_vec();
    fft.process(&mut s);
    apply_derivative(&grid, &mut s);
    ifft.process(&mut s);
    let inv_n = 1.0 / grid.n() as f64;
    s.iter_mut().for_each(|v| *v = v.scale(inv_n));
    WaveFunction::new(grid, s).expect("finite input gives finite derivative")
}

fn apply_derivative(grid: &Grid, spectrum: &mut [Complex64]) {
    let n = grid.n();
    for (m, (s, k)) in spectrum.iter_mut().zip(wavenumbers(grid)).enumerate() {
        *s = if n % 2 == 0 && m == n / 2 {
            Complex64::zero()
        } else {
            *s * Complex64::new(0.0, k)
        };
    }
}

/// Free evolution to arbitrary times from one stored spectrum. Each call is a
/// single exact kinetic phase, so `at(t)` does not depend on earlier calls.
pub struct FreeEvolution {
    grid: Grid,
    params: PhysicsParams,
    spectrum: Vec<Complex64>,
    k: Vec<f64>,
    ifft: Arc<dyn Fft<f64>>,
}

impl FreeEvolution {
    pub fn new(wf: &WaveFunction, params: PhysicsParams) -> Result<Self> {
        params.validate()?;
        let grid = *wf.grid();
        let (fft, ifft) = plans(grid.n());
        let mut spectrum = wf.samples().to_vec();
        fft.process(&mut spectrum);
        Ok(Self {
            grid,
            params,
            spectrum,
            k: wavenumbers(&grid),
            ifft,
        })
    }

    fn phased(&self, t: f64) -> Vec<Complex64> {
        let inv_n = 1.0 / self.grid.n() as f64;
        let c = -self.params.hbar * t / (2.0 * self.params.mass);
        self.spectrum
            .iter()
            .zip(&self.k)
            .map(|(s, k)| s * Complex64::from_polar(inv_n, c * k * k))
            .collect()
    }

    pub fn at(&self, t: f64) -> WaveFunction {
        let mut s = self.phased(t);
        self.ifft.process(&mut s);
        WaveFunction::new(self.grid, s).expect("unitary phase keeps samples finite")
    }

    /// `(ψ(t), ∂ₓψ(t))`.
    pub fn with_derivative(&self, t: f64) -> (WaveFunction, WaveFunction) {
        let mut s = self.phased(t);
        let mut d = s.clone();
        apply_derivative(&self.grid, &mut d);
        self.ifft.process(&mut s);
        self.ifft.process(&mut d);
        (
            WaveFunction::new(self.grid, s).expect("finite"),
            WaveFunction::new(self.grid, d).expect("finite"),
        )
    }
}

/// An initial state that can be sampled anywhere, for the free propagator.
pub trait Profile: Sync {
    /// Interval outside of which the profile vanishes; `None` if it is zero.
    fn support(&self) -> Option<(f64, f64)>;
    fn value(&self, x: f64) -> Complex64;
    /// Largest panel length that resolves the profile itself.
    fn resolution(&self) -> f64;
}

impl Profile for WaveFunction {
    /// Cells with `|ψ| > 1e-14·max|ψ|`, widened by one node for the
    /// interpolation stencil.
    fn support(&self) -> Option<(f64, f64)> {
        let tol = self.max_abs() * 1e-14;
        let (a, b) = self.support_cells(tol)?;
        let g = self.grid();
        Some(((g.x(a) - g.dx()).max(g.x_min()), (g.x(b) + g.dx()).min(g.x_max())))
    }

    /// Four-point Lagrange interpolation of the samples, zero off the grid.
    fn value(&self, x: f64) -> Complex64 {
        let g = self.grid();
        let n = g.n() as i64;
        let s = (x - g.x_min()) / g.dx() - 0.5;
        let j = s.floor() as i64;
        let f = s - j as f64;
        let at = |i: i64| {
            if (0..n).contains(&i) {
                self.samples()[i as usize]
            } else {
                Complex64::zero()
            }
        };
        let w = [
            -f * (f - 1.0) * (f - 2.0) / 6.0,
            (f + 1.0) * (f - 1.0) * (f - 2.0) / 2.0,
            -(f + 1.0) * f * (f - 2.0) / 2.0,
            (f + 1.0) * f * (f - 1.0) / 6.0,
        ];
        (0..4).map(|i| at(j - 1 + i).scale(w[i as usize])).sum()
    }

    fn resolution(&self) -> f64 {
        self.grid().dx()
    }
}

const GL_ORDER: usize = 16;

/// Gauss–Legendre nodes and weights on `[-1, 1]` by Newton iteration.
fn gauss_legendre() -> &'static ([f64; GL_ORDER], [f64; GL_ORDER]) {
    static RULE: OnceLock<([f64; GL_ORDER], [f64; GL_ORDER])> = OnceLock::new();
    RULE.get_or_init(|| {
        let n = GL_ORDER;
        let mut nodes = [0.0; GL_ORDER];
        let mut weights = [0.0; GL_ORDER];
        for i in 0..n {
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            nodes[i] = x;
            weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
        }
        (nodes, weights)
    })
}

/// `ψ(x, t) = ∫ K(x, x', t) ψ₀(x') dx'` with the free kernel
/// `K = √(m/(2πiħt)) · exp(i·m·(x−x')²/(2ħt))`.
pub fn free_propagator_eval<P: Profile + ?Sized>(
    wf0: &P,
    x: f64,
    t: f64,
    p: &PhysicsParams,
) -> Result<Complex64> {
    Ok(propagate(wf0, x, t, p, false)?.0)
}

/// `(ψ(x, t), ∂ₓψ(x, t))` from the same quadrature.
pub fn free_propagator_eval_with_derivative<P: Profile + ?Sized>(
    wf0: &P,
    x: f64,
    t: f64,
    p: &PhysicsParams,
) -> Result<(Complex64, Complex64)> {
    propagate(wf0, x, t, p, true)
}

fn propagate<P: Profile + ?Sized>(
    wf0: &P,
    x: f64,
    t: f64,
    p: &PhysicsParams,
    derivative: bool,
) -> Result<(Complex64, Complex64)> {
    p.validate()?;
    if t == 0.0 || !t.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "free propagator needs finite nonzero t, got {t}"
        )));
    }
    let Some((a, b)) = wf0.support() else {
        return Ok((Complex64::zero(), Complex64::zero()));
    };
    let (nodes, weights) = gauss_legendre();
    let alpha = p.mass / (2.0 * p.hbar * t);
    let prefactor = Complex64::new(0.0, -p.mass / (2.0 * PI * p.hbar * t)).sqrt();
    // Local phase frequency is m|x−x'|/(ħ|t|); keep each 16-point panel to at
    // most two oscillations.
    let freq = |y: f64| p.mass * (x - y).abs() / (p.hbar * t.abs());
    let max_len = wf0.resolution();
    let mut sum = Complex64::zero();
    let mut dsum = Complex64::zero();
    let mut u = a;
    while u < b {
        let mut len = max_len.min(b - u);
        while freq(u).max(freq(u + len)) * len > 4.0 * PI {
            len *= 0.5;
        }
        let (mid, half) = (u + 0.5 * len, 0.5 * len);
        for (xi, wi) in nodes.iter().zip(weights) {
            let y = mid + half * xi;
            let d = x - y;
            let k = Complex64::from_polar(wi * half, alpha * d * d) * wf0.value(y);
            sum += k;
            if derivative {
                dsum += k * Complex64::new(0.0, 2.0 * alpha * d);
            }
        }
        u += len;
    }
    Ok((prefactor * sum, prefactor * dsum))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wavefield::gaussian;

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre();
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
        let m30: f64 = x.iter().zip(w).map(|(x, w)| w * x.powi(30)).sum();
        assert!((m30 - 2.0 / 31.0).abs() < 1e-14);
    }

    #[test]
    fn wavenumbers_fft_order() {
        let g = Grid::new(0.0, 2.0 * PI, 16).unwrap();
        let k = wavenumbers(&g);
        assert_eq!(k[1], 1.0);
        assert_eq!(k[7], 7.0);
        assert_eq!(k[8], -8.0);
        assert_eq!(k[15], -1.0);
    }

    #[test]
    fn spectral_derivative_of_plane_wave() {
        let g = Grid::new(0.0, 10.0, 64).unwrap();
        let k0 = 2.0 * PI * 3.0 / 10.0;
        let wf = WaveFunction::from_fn(g, |x| Complex64::from_polar(1.0, k0 * x)).unwrap();
        let d = spectral_derivative(&wf);
        for (dv, v) in d.samples().iter().zip(wf.samples()) {
            assert!((dv - v * Complex64::new(0.0, k0)).norm() < 1e-12);
        }
    }

    #[test]
    fn zero_steps_rejected() {
        let g = Grid::new(-5.0, 5.0, 64).unwrap();
        let wf = gaussian(g, 0.0, 1.0, 0.0).unwrap();
        assert!(split_step(&wf, &Potential::Free, &PhysicsParams::default(), 0.1, 0).is_err());
    }

    #[test]
    fn bad_params_rejected() {
        let p = PhysicsParams { mass: 0.0, hbar: 1.0 };
        assert!(p.validate().is_err());
        let g = Grid::new(-5.0, 5.0, 64).unwrap();
        let v = Potential::Sampled { values: vec![0.0; 3] };
        assert!(v.values(&g, &PhysicsParams::default()).is_err());
    }

    #[test]
    fn free_evolution_matches_split_step() {
        let g = Grid::new(-20.0, 20.0, 256).unwrap();
        let p = PhysicsParams::default();
        let wf = gaussian(g, 1.0, 1.0, 0.5).unwrap();
        let a = split_step(&wf, &Potential::Free, &p, 0.01, 100).unwrap();
        let b = FreeEvolution::new(&wf, p).unwrap().at(1.0);
        assert!(a.max_diff(&b) < 1e-12);
    }

    #[test]
    fn propagator_rejects_zero_time() {
        let g = Grid::new(-5.0, 5.0, 64).unwrap();
        let wf = gaussian(g, 0.0, 1.0, 0.0).unwrap();
        assert!(free_propagator_eval(&wf, 0.0, 0.0, &PhysicsParams::default()).is_err());
        let zero = WaveFunction::zeros(g);
        let v = free_propagator_eval(&zero, 1.0, 1.0, &PhysicsParams::default()).unwrap();
        assert_eq!(v, Complex64::zero());
    }

    #[test]
    fn time_reverse_examples() {
        let g = Grid::new(-5.0, 5.0, 64).unwrap();
        let wf = gaussian(g, 0.0, 1.0, 1.3).unwrap();
        assert_eq!(time_reverse(&time_reverse(&wf)), wf);
        let real = gaussian(g, 0.0, 1.0, 0.0).unwrap();
        assert_eq!(time_reverse(&real), real);
    }
}
