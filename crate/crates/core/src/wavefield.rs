//! Spatial grid, wavefunctions, densities and cumulative distributions.
//!
//! The grid is cell-centered: node `j` sits at the middle of the cell
//! `[x_min + j·dx, x_min + (j+1)·dx]`. Integrals treat the density as constant
//! on each cell (midpoint rule), so the cdf is piecewise linear, vanishes at
//! `x_min` and equals [`WaveFunction::norm2`] at `x_max`.

use num_complex::Complex64;
use num_traits::Zero;
use serde::{Deserialize, Serialize};

use crate::hyperreal::{Exponent, HyperReal};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridParams", into = "GridParams")]
pub struct Grid {
    x_min: f64,
    x_max: f64,
    n: usize,
    dx: f64,
}

#[derive(Serialize, Deserialize)]
struct GridParams {
    x_min: f64,
    x_max: f64,
    n: usize,
}

impl TryFrom<GridParams> for Grid {
    type Error = Error;
    fn try_from(p: GridParams) -> Result<Self> {
        Grid::new(p.x_min, p.x_max, p.n)
    }
}

impl From<Grid> for GridParams {
    fn from(g: Grid) -> Self {
        GridParams {
            x_min: g.x_min,
            x_max: g.x_max,
            n: g.n,
        }
    }
}

impl Grid {
    pub const MIN_POINTS: usize = 16;

    pub fn new(x_min: f64, x_max: f64, n: usize) -> Result<Self> {
        if !(x_min.is_finite() && x_max.is_finite()) {
            return Err(Error::InvalidGrid("bounds must be finite".into()));
        }
        if x_min >= x_max {
            return Err(Error::InvalidGrid(format!(
                "x_min ({x_min}) must be below x_max ({x_max})"
            )));
        }
        if n < Self::MIN_POINTS {
            return Err(Error::InvalidGrid(format!(
                "n = {n} is below the minimum of {}",
                Self::MIN_POINTS
            )));
        }
        Ok(Self {
            x_min,
            x_max,
            n,
            dx: (x_max - x_min) / n as f64,
        })
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn length(&self) -> f64 {
        self.x_max - self.x_min
    }

    /// Node position of cell `j`.
    pub fn x(&self, j: usize) -> f64 {
        self.x_min + (j as f64 + 0.5) * self.dx
    }

    /// Left edge of cell `j`; `cell_edge(n)` is exactly `x_max`.
    pub fn cell_edge(&self, j: usize) -> f64 {
        if j >= self.n {
            self.x_max
        } else {
            self.x_min + j as f64 * self.dx
        }
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.x(j)).collect()
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.x_min && x <= self.x_max
    }

    /// Cell containing `x`, clamped to the grid.
    pub fn cell_of(&self, x: f64) -> usize {
        let s = ((x - self.x_min) / self.dx).floor();
        if s < 0.0 || s.is_nan() {
            0
        } else {
            (s as usize).min(self.n - 1)
        }
    }

    /// `(cell, covered fraction)` for every cell meeting `[a, b]`, in order.
    /// Fully covered cells get a fraction of exactly 1.
    pub fn cell_weights(&self, a: f64, b: f64) -> Vec<(usize, f64)> {
        let a = a.max(self.x_min);
        let b = b.min(self.x_max);
        if !(a < b) {
            return Vec::new();
        }
        let (ja, jb) = (self.cell_of(a), self.cell_of(b));
        let mut out = Vec::with_capacity(jb - ja + 1);
        for j in ja..=jb {
            let (lo, hi) = (self.cell_edge(j), self.cell_edge(j + 1));
            let frac = if a <= lo && b >= hi {
                1.0
            } else {
                ((b.min(hi) - a.max(lo)) / self.dx).clamp(0.0, 1.0)
            };
            if frac > 0.0 {
                out.push((j, frac));
            }
        }
        out
    }

    fn check_same(&self, other: &Grid) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveFunction {
    grid: Grid,
    samples: Vec<Complex64>,
}

impl WaveFunction {
    pub fn new(grid: Grid, samples: Vec<Complex64>) -> Result<Self> {
        if samples.len() != grid.n() {
            return Err(Error::InvalidArgument(format!(
                "{} samples for a grid of {} points",
                samples.len(),
                grid.n()
            )));
        }
        if let Some(j) = samples.iter().position(|s| !(s.re.is_finite() && s.im.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "non-finite sample at x = {}",
                grid.x(j)
            )));
        }
        Ok(Self { grid, samples })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            samples: vec![Complex64::zero(); grid.n()],
        }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(f64) -> Complex64) -> Result<Self> {
        Self::new(grid, grid.points().into_iter().map(f).collect())
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn samples(&self) -> &[Complex64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Complex64> {
        self.samples
    }

    /// `Σ |ψ_j|² · dx`.
    pub fn norm2(&self) -> f64 {
        self.samples.iter().map(|s| s.norm_sqr()).sum::<f64>() * self.grid.dx
    }

    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm2();
        if n <= 0.0 {
            return Err(Error::InvalidArgument("cannot normalize the zero function".into()));
        }
        Ok(self.scale_real(1.0 / n.sqrt()))
    }

    pub fn scale(&self, c: Complex64) -> Self {
        Self {
            grid: self.grid,
            samples: self.samples.iter().map(|s| s * c).collect(),
        }
    }

    pub fn scale_real(&self, c: f64) -> Self {
        Self {
            grid: self.grid,
            samples: self.samples.iter().map(|s| s.scale(c)).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.grid.check_same(&other.grid)?;
        Ok(Self {
            grid: self.grid,
            samples: self
                .samples
                .iter()
                .zip(&other.samples)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn conj(&self) -> Self {
        Self {
            grid: self.grid,
            samples: self.samples.iter().map(|s| s.conj()).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.samples.iter().map(|s| s.norm()).fold(0.0, f64::max)
    }

    /// Largest pointwise difference.
    pub fn max_diff(&self, other: &Self) -> f64 {
        self.samples
            .iter()
            .zip(&other.samples)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    /// Linear interpolation of the complex samples, periodic between the last
    /// and first node. Exact at nodes.
    pub fn value_at(&self, x: f64) -> Complex64 {
        interpolate(&self.grid, &self.samples, x)
    }

    /// Inverse-cdf transform of `u ∈ [0, 1]` through `|ψ|²/norm2`.
    pub fn sample_initial_position(&self, u: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&u) {
            return Err(Error::InvalidArgument(format!("u = {u} is outside [0, 1]")));
        }
        let cdf = RealCdf::new(self);
        let total = cdf.total();
        if total <= 0.0 {
            return Err(Error::InvalidArgument("zero wavefunction".into()));
        }
        Ok(cdf.quantile_left(u * total).unwrap_or(self.grid.x_max))
    }

    /// First and last cell whose sample magnitude exceeds `tol`.
    pub fn support_cells(&self, tol: f64) -> Option<(usize, usize)> {
        let first = self.samples.iter().position(|s| s.norm() > tol)?;
        let last = self.samples.iter().rposition(|s| s.norm() > tol)?;
        Some((first, last))
    }
}

pub(crate) fn interpolate(grid: &Grid, samples: &[Complex64], x: f64) -> Complex64 {
    let n = grid.n();
    let s = (x - grid.x_min()) / grid.dx() - 0.5;
    let fl = s.floor();
    let frac = s - fl;
    let j0 = (fl as i64).rem_euclid(n as i64) as usize;
    let a = samples[j0];
    if frac == 0.0 {
        return a;
    }
    let b = samples[(j0 + 1) % n];
    a.scale(1.0 - frac) + b.scale(frac)
}

/// Normalized Gaussian `(2πσ²)^{-1/4} exp(-(x-c)²/(4σ²) + i·k0·x)`, so that
/// `|ψ|²` is the normal density with standard deviation `σ`.
pub fn gaussian(grid: Grid, center: f64, sigma: f64, k0: f64) -> Result<WaveFunction> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument("gaussian sigma must be positive".into()));
    }
    let amp = (2.0 * std::f64::consts::PI * sigma * sigma).powf(-0.25);
    WaveFunction::from_fn(grid, |x| {
        let d = x - center;
        Complex64::from_polar(amp * (-d * d / (4.0 * sigma * sigma)).exp(), k0 * x)
    })
}

/// Gaussian set to exactly zero where `|x - center| > cutoff`, renormalized.
pub fn truncated_gaussian(grid: Grid, center: f64, sigma: f64, cutoff: f64) -> Result<WaveFunction> {
    let g = gaussian(grid, center, sigma, 0.0)?;
    let samples = g
        .samples
        .iter()
        .zip(grid.points())
        .map(|(s, x)| if (x - center).abs() <= cutoff { *s } else { Complex64::zero() })
        .collect();
    WaveFunction::new(grid, samples)?.normalized()
}

/// Normalized indicator of `[a, b]`.
pub fn box_fn(grid: Grid, a: f64, b: f64) -> Result<WaveFunction> {
    WaveFunction::from_fn(grid, |x| {
        Complex64::new(if (a..=b).contains(&x) { 1.0 } else { 0.0 }, 0.0)
    })?
    .normalized()
}

/// Normalized smooth bump `exp(-1/(1-s²))` supported on the open interval
/// `(a, b)`, with `s` the position rescaled to `(-1, 1)`.
pub fn bump(grid: Grid, a: f64, b: f64) -> Result<WaveFunction> {
    if !(a < b) {
        return Err(Error::InvalidArgument("bump needs a < b".into()));
    }
    WaveFunction::from_fn(grid, |x| {
        let s = (2.0 * x - (a + b)) / (b - a);
        if s.abs() < 1.0 {
            Complex64::new((-1.0 / (1.0 - s * s)).exp(), 0.0)
        } else {
            Complex64::zero()
        }
    })?
    .normalized()
}

/// Disjoint, sorted closed intervals. Parts outside the grid are ignored when
/// integrating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalUnion {
    intervals: Vec<(f64, f64)>,
}

impl IntervalUnion {
    pub fn new(intervals: Vec<(f64, f64)>) -> Result<Self> {
        for (i, &(a, b)) in intervals.iter().enumerate() {
            if !(a.is_finite() && b.is_finite() && a <= b) {
                return Err(Error::InvalidArgument(format!("bad interval [{a}, {b}]")));
            }
            if i > 0 && intervals[i - 1].1 >= a {
                return Err(Error::InvalidArgument(
                    "intervals must be sorted and pairwise disjoint".into(),
                ));
            }
        }
        Ok(Self { intervals })
    }

    pub fn empty() -> Self {
        Self { intervals: Vec::new() }
    }

    pub fn whole(grid: &Grid) -> Self {
        Self {
            intervals: vec![(grid.x_min(), grid.x_max())],
        }
    }

    pub fn intervals(&self) -> &[(f64, f64)] {
        &self.intervals
    }

    fn cell_weights(&self, grid: &Grid) -> Vec<(usize, f64)> {
        self.intervals
            .iter()
            .flat_map(|&(a, b)| grid.cell_weights(a, b))
            .collect()
    }
}

/// Grid cells belonging to the zero set of a wavefunction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZeroSetMask {
    mask: Vec<bool>,
}

impl ZeroSetMask {
    pub fn new(mask: Vec<bool>) -> Self {
        Self { mask }
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.mask.get(j).copied().unwrap_or(false)
    }
}

/// One term `scalar · ε^exponent · part` of a graded wavefunction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub exponent: Exponent,
    pub scalar: HyperReal,
    pub part: WaveFunction,
}

/// `Σ scalar · ε^exponent · part` with strictly increasing exponents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradedWaveFunction {
    components: Vec<Component>,
}

impl GradedWaveFunction {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let Some(first) = components.first() else {
            return Err(Error::InvalidArgument("graded wavefunction needs a component".into()));
        };
        let grid = *first.part.grid();
        for (i, c) in components.iter().enumerate() {
            if c.exponent < Exponent::zero() {
                return Err(Error::InvalidArgument("negative component exponent".into()));
            }
            if i > 0 && components[i - 1].exponent >= c.exponent {
                return Err(Error::InvalidArgument(
                    "component exponents must be strictly increasing".into(),
                ));
            }
            grid.check_same(c.part.grid())?;
        }
        Ok(Self { components })
    }

    /// A standard wavefunction as a single order-0 component.
    pub fn standard(wf: WaveFunction) -> Self {
        Self {
            components: vec![Component {
                exponent: Exponent::zero(),
                scalar: HyperReal::one(),
                part: wf,
            }],
        }
    }

    pub fn grid(&self) -> &Grid {
        self.components[0].part.grid()
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn parts(&self) -> Vec<&WaveFunction> {
        self.components.iter().map(|c| &c.part).collect()
    }

    /// Effective hyperreal weight `scalar · ε^exponent` of each component.
    pub fn weights(&self) -> Vec<HyperReal> {
        self.components
            .iter()
            .map(|c| c.scalar.shift(c.exponent))
            .collect()
    }

    /// Concrete weights at `ε = eps`.
    pub fn concrete_weights(&self, eps: f64) -> Vec<f64> {
        self.weights().iter().map(|w| w.instantiate(eps)).collect()
    }

    /// Replaces every part, keeping exponents and scalars.
    pub fn with_parts(&self, parts: Vec<WaveFunction>) -> Result<Self> {
        if parts.len() != self.components.len() {
            return Err(Error::InvalidArgument("part count mismatch".into()));
        }
        Self::new(
            self.components
                .iter()
                .zip(parts)
                .map(|(c, part)| Component {
                    exponent: c.exponent,
                    scalar: c.scalar.clone(),
                    part,
                })
                .collect(),
        )
    }

    /// The ordinary wavefunction obtained by substituting `eps` for `ε`.
    pub fn instantiate(&self, eps: f64) -> WaveFunction {
        combine(&self.concrete_weights(eps), &self.parts())
    }

    /// `|ψ̃(x)|²` expanded in powers of `ε` (interpolated off-node).
    pub fn density_at(&self, x: f64) -> HyperReal {
        let vals: Vec<Complex64> = self.parts().iter().map(|p| p.value_at(x)).collect();
        quad_form(&self.weights(), |i, j| re_dot(vals[i], vals[j]))
    }

    pub fn density_at_node(&self, j: usize) -> HyperReal {
        let parts = self.parts();
        quad_form(&self.weights(), |a, b| {
            re_dot(parts[a].samples[j], parts[b].samples[j])
        })
    }

    pub fn integral_over(&self, f: &IntervalUnion) -> HyperReal {
        let cells = f.cell_weights(self.grid());
        gram_integral(&self.weights(), &self.parts(), &cells, self.grid().dx())
    }

    pub fn norm(&self) -> HyperReal {
        self.integral_over(&IntervalUnion::whole(self.grid()))
    }

    /// Mass on `[x_min, x]`.
    pub fn cdf(&self, x: f64) -> HyperReal {
        let g = self.grid();
        gram_integral(
            &self.weights(),
            &self.parts(),
            &g.cell_weights(g.x_min(), x),
            g.dx(),
        )
    }

    /// Mass on `[x, x_max]`, computed directly rather than as `norm - cdf` so
    /// that infinitesimal tails keep their exact leading order.
    pub fn right_tail(&self, x: f64) -> HyperReal {
        let g = self.grid();
        gram_integral(
            &self.weights(),
            &self.parts(),
            &g.cell_weights(x, g.x_max()),
            g.dx(),
        )
    }

    pub fn cdf_table(&self) -> CdfTable {
        CdfTable::new(self)
    }
}

/// `‖g1 − g2‖₂` as a hyperreal.
pub fn l2_distance(g1: &GradedWaveFunction, g2: &GradedWaveFunction) -> Result<HyperReal> {
    g1.grid().check_same(g2.grid())?;
    let mut weights = g1.weights();
    weights.extend(g2.weights().iter().map(|w| -w));
    let mut parts = g1.parts();
    parts.extend(g2.parts());
    let grid = g1.grid();
    let cells = grid.cell_weights(grid.x_min(), grid.x_max());
    let sq = gram_integral(&weights, &parts, &cells, grid.dx());
    if sq.is_zero() {
        return Ok(sq);
    }
    sq.sqrt()
}

pub(crate) fn combine(weights: &[f64], parts: &[&WaveFunction]) -> WaveFunction {
    let grid = *parts[0].grid();
    let mut samples = vec![Complex64::zero(); grid.n()];
    for (w, p) in weights.iter().zip(parts) {
        if *w == 0.0 {
            continue;
        }
        for (s, v) in samples.iter_mut().zip(&p.samples) {
            *s += v.scale(*w);
        }
    }
    WaveFunction { grid, samples }
}

#[inline]
pub(crate) fn re_dot(a: Complex64, b: Complex64) -> f64 {
    a.re * b.re + a.im * b.im
}

/// Cross terms whose diagonal partner underflowed are dropped: a component
/// whose square is zero in binary64 contributes nothing, which keeps the
/// Gram matrix consistent with Cauchy–Schwarz.
#[inline]
fn underflowed(d: f64) -> bool {
    d < f64::MIN_POSITIVE
}

/// `Σ_{i,j} w_i w_j g(i,j)` for a symmetric `g`, summed in a fixed order.
pub(crate) fn quad_form(weights: &[HyperReal], g: impl Fn(usize, usize) -> f64) -> HyperReal {
    let cap = weights
        .iter()
        .map(|w| w.cap())
        .min()
        .unwrap_or_else(crate::hyperreal::default_cap);
    let diag: Vec<f64> = (0..weights.len()).map(|i| g(i, i)).collect();
    let mut acc = HyperReal::zero_with_cap(cap);
    for i in 0..weights.len() {
        for j in i..weights.len() {
            if i != j && (underflowed(diag[i]) || underflowed(diag[j])) {
                continue;
            }
            let v = if i == j { diag[i] } else { g(i, j) };
            if v == 0.0 {
                continue;
            }
            let mult = if i == j { v } else { 2.0 * v };
            acc += &(&weights[i] * &weights[j]).scale(mult);
        }
    }
    acc
}

fn gram_integral(
    weights: &[HyperReal],
    parts: &[&WaveFunction],
    cells: &[(usize, f64)],
    dx: f64,
) -> HyperReal {
    quad_form(weights, |a, b| {
        let (pa, pb) = (&parts[a].samples, &parts[b].samples);
        let s: f64 = cells
            .iter()
            .map(|&(j, frac)| frac * re_dot(pa[j], pb[j]))
            .sum();
        s * dx
    })
}

/// Prefix and suffix sums of a real, piecewise-constant density.
#[derive(Debug, Clone)]
pub struct RealCdf {
    grid: Grid,
    density: Vec<f64>,
    prefix: Vec<f64>,
    suffix: Vec<f64>,
}

impl RealCdf {
    pub fn new(wf: &WaveFunction) -> Self {
        Self::from_density(*wf.grid(), wf.samples.iter().map(|s| s.norm_sqr()).collect())
    }

    pub fn from_density(grid: Grid, density: Vec<f64>) -> Self {
        let n = density.len();
        let mut prefix = vec![0.0; n + 1];
        for j in 0..n {
            prefix[j + 1] = prefix[j] + density[j];
        }
        let mut suffix = vec![0.0; n + 1];
        for j in (0..n).rev() {
            suffix[j] = suffix[j + 1] + density[j];
        }
        Self {
            grid,
            density,
            prefix,
            suffix,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn total(&self) -> f64 {
        self.prefix[self.density.len()] * self.grid.dx()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let g = &self.grid;
        if x <= g.x_min() {
            return 0.0;
        }
        if x >= g.x_max() {
            return self.total();
        }
        let k = g.cell_of(x);
        self.prefix[k] * g.dx() + self.density[k] * (x - g.cell_edge(k))
    }

    pub fn right_tail(&self, x: f64) -> f64 {
        let g = &self.grid;
        if x <= g.x_min() {
            return self.suffix[0] * g.dx();
        }
        if x >= g.x_max() {
            return 0.0;
        }
        let k = g.cell_of(x);
        self.suffix[k + 1] * g.dx() + self.density[k] * (g.cell_edge(k + 1) - x)
    }

    /// Mass on the first / last `width` of the grid.
    pub fn edge_mass(&self, width: f64) -> f64 {
        let g = &self.grid;
        self.cdf(g.x_min() + width) + self.right_tail(g.x_max() - width)
    }

    /// Position with `cdf(x) = level`; `None` if the level is negative or
    /// exceeds the total mass.
    pub fn quantile_left(&self, level: f64) -> Option<f64> {
        let g = &self.grid;
        let dx = g.dx();
        let n = self.density.len();
        if level < 0.0 || level > self.prefix[n] * dx {
            return None;
        }
        // Largest k with prefix[k]·dx <= level.
        let k = self.prefix.partition_point(|p| p * dx <= level) - 1;
        if k == n {
            return Some(g.x_max());
        }
        let rem = level - self.prefix[k] * dx;
        if self.density[k] <= 0.0 {
            return Some(g.cell_edge(k));
        }
        Some((g.cell_edge(k) + rem / self.density[k]).min(g.cell_edge(k + 1)))
    }

    /// Position with `right_tail(x) = level`.
    pub fn quantile_right(&self, level: f64) -> Option<f64> {
        let g = &self.grid;
        let dx = g.dx();
        if level < 0.0 || level > self.suffix[0] * dx {
            return None;
        }
        // Smallest k with suffix[k]·dx <= level; suffix is nonincreasing.
        let k = self.suffix.partition_point(|s| s * dx > level);
        if k == 0 {
            return Some(g.x_min());
        }
        let j = k - 1;
        let rem = level - self.suffix[k] * dx;
        Some((g.cell_edge(k) - rem / self.density[j]).max(g.cell_edge(j)))
    }
}

/// Per-pair cumulative Gram sums of a graded state, for repeated hyperreal
/// cdf evaluation and inversion.
#[derive(Debug, Clone)]
pub struct CdfTable {
    grid: Grid,
    /// `w_i·w_j` for each pair `i <= j`.
    pair_weights: Vec<HyperReal>,
    /// Cell density per pair, off-diagonal pairs doubled.
    density: Vec<Vec<f64>>,
    prefix: Vec<Vec<f64>>,
    suffix: Vec<Vec<f64>>,
}

impl CdfTable {
    pub fn new(g: &GradedWaveFunction) -> Self {
        let weights = g.weights();
        let parts = g.parts();
        let n = g.grid().n();
        let mut pair_weights = Vec::new();
        let mut density = Vec::new();
        for i in 0..parts.len() {
            for j in i..parts.len() {
                let (pi, pj) = (&parts[i].samples, &parts[j].samples);
                let d: Vec<f64> = (0..n)
                    .map(|k| {
                        if i == j {
                            pi[k].norm_sqr()
                        } else if underflowed(pi[k].norm_sqr()) || underflowed(pj[k].norm_sqr()) {
                            0.0
                        } else {
                            2.0 * re_dot(pi[k], pj[k])
                        }
                    })
                    .collect();
                if d.iter().all(|v| *v == 0.0) {
                    continue;
                }
                pair_weights.push(&weights[i] * &weights[j]);
                density.push(d);
            }
        }
        let prefix = density
            .iter()
            .map(|d| {
                let mut p = vec![0.0; n + 1];
                for k in 0..n {
                    p[k + 1] = p[k] + d[k];
                }
                p
            })
            .collect();
        let suffix = density
            .iter()
            .map(|d| {
                let mut s = vec![0.0; n + 1];
                for k in (0..n).rev() {
                    s[k] = s[k + 1] + d[k];
                }
                s
            })
            .collect();
        Self {
            grid: *g.grid(),
            pair_weights,
            density,
            prefix,
            suffix,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    fn combine(&self, f: impl Fn(usize) -> f64) -> HyperReal {
        let mut acc = HyperReal::zero();
        for (p, w) in self.pair_weights.iter().enumerate() {
            let v = f(p);
            if v != 0.0 {
                acc += &w.scale(v);
            }
        }
        acc
    }

    fn left_edge_mass(&self, k: usize) -> HyperReal {
        let dx = self.grid.dx();
        self.combine(|p| self.prefix[p][k] * dx)
    }

    fn right_edge_mass(&self, k: usize) -> HyperReal {
        let dx = self.grid.dx();
        self.combine(|p| self.suffix[p][k] * dx)
    }

    pub fn cell_density(&self, k: usize) -> HyperReal {
        self.combine(|p| self.density[p][k])
    }

    pub fn total(&self) -> HyperReal {
        self.left_edge_mass(self.grid.n())
    }

    pub fn cdf(&self, x: f64) -> HyperReal {
        let g = &self.grid;
        if x <= g.x_min() {
            return HyperReal::zero();
        }
        if x >= g.x_max() {
            return self.total();
        }
        let k = g.cell_of(x);
        let off = x - g.cell_edge(k);
        let dx = g.dx();
        self.combine(|p| self.prefix[p][k] * dx + self.density[p][k] * off)
    }

    pub fn right_tail(&self, x: f64) -> HyperReal {
        let g = &self.grid;
        if x <= g.x_min() {
            return self.right_edge_mass(0);
        }
        if x >= g.x_max() {
            return HyperReal::zero();
        }
        let k = g.cell_of(x);
        let off = g.cell_edge(k + 1) - x;
        let dx = g.dx();
        self.combine(|p| self.suffix[p][k + 1] * dx + self.density[p][k] * off)
    }

    /// Hyperreal position `x̃` with `cdf(x̃) = level`, where the cdf inside a
    /// cell is extended linearly to hyperreal arguments.
    pub fn quantile_left(&self, level: &HyperReal) -> Option<HyperReal> {
        let n = self.grid.n();
        if *level < HyperReal::zero() || *level > self.total() {
            return None;
        }
        // Largest k in [0, n] with left_edge_mass(k) <= level.
        let (mut lo, mut hi) = (0usize, n);
        while lo < hi {
            let mid = (lo + hi + 1) / 2;
            if self.left_edge_mass(mid) <= *level {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        let k = lo;
        let edge = HyperReal::from_real(self.grid.cell_edge(k));
        if k == n {
            return Some(edge);
        }
        let rho = self.cell_density(k);
        if rho.is_zero() {
            return Some(edge);
        }
        let rem = level - &self.left_edge_mass(k);
        Some(&edge + &(&rem / &rho))
    }

    /// Hyperreal position `x̃` with `right_tail(x̃) = level`.
    pub fn quantile_right(&self, level: &HyperReal) -> Option<HyperReal> {
        let n = self.grid.n();
        if *level < HyperReal::zero() || *level > self.right_edge_mass(0) {
            return None;
        }
        // Smallest k in [0, n] with right_edge_mass(k) <= level.
        let (mut lo, mut hi) = (0usize, n);
        while lo < hi {
            let mid = (lo + hi) / 2;
            if self.right_edge_mass(mid) <= *level {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        let k = lo;
        let edge = HyperReal::from_real(self.grid.cell_edge(k));
        if k == 0 {
            return Some(edge);
        }
        let rho = self.cell_density(k - 1);
        if rho.is_zero() {
            return Some(edge);
        }
        let rem = level - &self.right_edge_mass(k);
        Some(&edge - &(&rem / &rho))
    }
}
