//! A computable ordered field with infinitesimal and infinite elements.
//!
//! Elements are finite series `Σ c_k ε^{e_k}` in a single positive
//! infinitesimal `ε`, with exact rational exponents and `f64` coefficients
//! (a truncated Levi-Civita field). Every value carries an order cap; terms
//! above the cap are dropped after each operation. Comparison is exact and
//! decided by the sign of the lowest-order coefficient of the difference.
//!
//! Coefficients that cancel to exactly `0.0` are removed. Near-cancellation
//! (coefficients at rounding level) is left alone; see [`HyperReal::chop`].

use std::cmp::Ordering;
use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

use num_rational::Rational64;
use num_traits::{Signed, ToPrimitive, Zero};
use serde::de::Deserializer;
use serde::ser::{SerializeSeq, Serializer};
use serde::{Deserialize, Serialize};

use crate::Error;

/// Exact rational exponent of `ε`.
pub type Exponent = Rational64;

/// Default truncation order.
pub const DEFAULT_ORDER_CAP: i64 = 4;

pub fn default_cap() -> Exponent {
    Exponent::from_integer(DEFAULT_ORDER_CAP)
}

/// Size class of a hyperreal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Magnitude {
    Zero,
    Infinitesimal,
    AppreciableFinite,
    Infinite,
}

#[derive(Clone, Debug)]
pub struct HyperReal {
    /// Strictly increasing exponents, nonzero coefficients, all `<= cap`.
    terms: Vec<(Exponent, f64)>,
    cap: Exponent,
}

impl HyperReal {
    pub fn zero() -> Self {
        Self::zero_with_cap(default_cap())
    }

    pub fn zero_with_cap(cap: Exponent) -> Self {
        Self { terms: Vec::new(), cap }
    }

    pub fn one() -> Self {
        Self::from_real(1.0)
    }

    pub fn from_real(c: f64) -> Self {
        Self::monomial(c, Exponent::zero())
    }

    /// The infinitesimal `ε` itself.
    pub fn eps() -> Self {
        Self::monomial(1.0, Exponent::from_integer(1))
    }

    /// `ε^q`; negative `q` gives an infinite element.
    pub fn eps_pow(q: Exponent) -> Self {
        Self::monomial(1.0, q)
    }

    /// `c·ε^q` at the default cap.
    pub fn monomial(c: f64, q: Exponent) -> Self {
        Self::from_terms([(q, c)], default_cap())
    }

    /// Builds a value from arbitrary `(exponent, coefficient)` pairs, merging
    /// repeated exponents and truncating at `cap`.
    pub fn from_terms<I>(terms: I, cap: Exponent) -> Self
    where
        I: IntoIterator<Item = (Exponent, f64)>,
    {
        let mut raw: Vec<(Exponent, f64)> = terms.into_iter().collect();
        debug_assert!(raw.iter().all(|(_, c)| !c.is_nan()), "NaN coefficient");
        raw.retain(|(e, c)| *e <= cap && *c != 0.0);
        raw.sort_by(|a, b| a.0.cmp(&b.0));
        let mut terms: Vec<(Exponent, f64)> = Vec::with_capacity(raw.len());
        let mut i = 0;
        while i < raw.len() {
            let e = raw[i].0;
            let mut j = i;
            while j < raw.len() && raw[j].0 == e {
                j += 1;
            }
            let c = canonical_sum(raw[i..j].iter().map(|t| t.1));
            if c != 0.0 {
                terms.push((e, c));
            }
            i = j;
        }
        Self { terms, cap }
    }

    pub fn terms(&self) -> &[(Exponent, f64)] {
        &self.terms
    }

    pub fn cap(&self) -> Exponent {
        self.cap
    }

    /// Re-truncates at a new cap. Raising the cap does not recover lost terms.
    pub fn with_cap(&self, cap: Exponent) -> Self {
        Self::from_terms(self.terms.iter().copied(), cap)
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Lowest-order term, `None` for zero.
    pub fn leading(&self) -> Option<(Exponent, f64)> {
        self.terms.first().copied()
    }

    pub fn leading_exponent(&self) -> Option<Exponent> {
        self.terms.first().map(|t| t.0)
    }

    /// Coefficient of `ε^q` (0 if absent).
    pub fn coefficient(&self, q: Exponent) -> f64 {
        self.terms
            .iter()
            .find(|t| t.0 == q)
            .map(|t| t.1)
            .unwrap_or(0.0)
    }

    pub fn classify(&self) -> Magnitude {
        match self.leading_exponent() {
            None => Magnitude::Zero,
            Some(q) if q.is_positive() => Magnitude::Infinitesimal,
            Some(q) if q.is_zero() => Magnitude::AppreciableFinite,
            Some(_) => Magnitude::Infinite,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.classify() != Magnitude::Infinite
    }

    pub fn standard_part(&self) -> Result<f64, Error> {
        if !self.is_finite() {
            return Err(Error::NoStandardPart);
        }
        Ok(self.coefficient(Exponent::zero()))
    }

    /// `a ≈ b`: the difference is zero or infinitesimal.
    pub fn infinitely_close(&self, other: &Self) -> bool {
        matches!(
            (self - other).classify(),
            Magnitude::Zero | Magnitude::Infinitesimal
        )
    }

    /// Sign of the leading coefficient.
    pub fn signum(&self) -> Ordering {
        match self.leading() {
            None => Ordering::Equal,
            Some((_, c)) if c > 0.0 => Ordering::Greater,
            Some(_) => Ordering::Less,
        }
    }

    pub fn compare(&self, other: &Self) -> Ordering {
        (self - other).signum()
    }

    pub fn abs(&self) -> Self {
        if self.signum() == Ordering::Less {
            -self
        } else {
            self.clone()
        }
    }

    /// Substitutes a concrete real for `ε`.
    pub fn instantiate(&self, eps_value: f64) -> f64 {
        self.terms
            .iter()
            .map(|(e, c)| c * real_pow(eps_value, *e))
            .sum()
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::from_terms(self.terms.iter().map(|(e, c)| (*e, c * s)), self.cap)
    }

    /// Multiplies by `ε^q`, keeping the cap.
    pub fn shift(&self, q: Exponent) -> Self {
        Self::from_terms(self.terms.iter().map(|(e, c)| (e + q, *c)), self.cap)
    }

    /// Drops every term whose coefficient magnitude is at most `tol`.
    pub fn chop(&self, tol: f64) -> Self {
        Self::from_terms(
            self.terms.iter().copied().filter(|(_, c)| c.abs() > tol),
            self.cap,
        )
    }

    /// Terms with exponent `<= order`.
    pub fn truncated(&self, order: Exponent) -> Self {
        Self::from_terms(
            self.terms.iter().copied().filter(|t| t.0 <= order),
            self.cap,
        )
    }

    /// True when both values have bit-identical terms up to and including
    /// exponent `order`.
    pub fn agrees_to(&self, other: &Self, order: Exponent) -> bool {
        let a: Vec<_> = self.terms.iter().filter(|t| t.0 <= order).collect();
        let b: Vec<_> = other.terms.iter().filter(|t| t.0 <= order).collect();
        a == b
    }

    /// Coefficient-wise closeness up to exponent `order`, with absolute
    /// tolerance `tol`.
    pub fn approx_agrees_to(&self, other: &Self, order: Exponent, tol: f64) -> bool {
        (self - other)
            .terms
            .iter()
            .filter(|t| t.0 <= order)
            .all(|t| t.1.abs() <= tol)
    }

    pub fn try_div(&self, rhs: &Self) -> Result<Self, Error> {
        let (q, c) = rhs.leading().ok_or(Error::DivisionByZero)?;
        let cap = self.cap.min(rhs.cap);
        let Some(lead_a) = self.leading_exponent() else {
            return Ok(Self::zero_with_cap(cap));
        };
        // Result exponents start at lead_a - q; the series for 1/(1+u) is
        // needed up to order cap - (lead_a - q).
        let work = cap - (lead_a - q);
        if work.is_negative() {
            return Ok(Self::zero_with_cap(cap));
        }
        let u = unit_remainder(rhs, q, c);
        let mut series = Self::from_real(1.0).with_cap(work);
        let mut term = series.clone();
        let minus_u = -&u;
        loop {
            term = mul_capped(&term, &minus_u, work);
            if term.is_zero() {
                break;
            }
            series = &series + &term;
        }
        let scaled = Self::from_terms(self.terms.iter().map(|(e, x)| (e - q, x / c)), cap);
        Ok(mul_capped(&scaled, &series, cap))
    }

    pub fn recip(&self) -> Result<Self, Error> {
        Self::from_real(1.0).with_cap(self.cap).try_div(self)
    }

    /// Square root of a strictly positive element.
    pub fn sqrt(&self) -> Result<Self, Error> {
        let (q, c) = self.leading().ok_or(Error::NonPositiveSqrt)?;
        if c <= 0.0 {
            return Err(Error::NonPositiveSqrt);
        }
        let half_q = q / 2;
        let work = self.cap - half_q;
        if work.is_negative() {
            return Ok(Self::zero_with_cap(self.cap));
        }
        let u = unit_remainder(self, q, c);
        // Binomial series of (1+u)^{1/2}.
        let mut series = Self::from_real(1.0).with_cap(work);
        let mut power = series.clone();
        let mut binom = 1.0;
        let mut k = 0.0;
        loop {
            power = mul_capped(&power, &u, work);
            if power.is_zero() {
                break;
            }
            binom *= (0.5 - k) / (k + 1.0);
            k += 1.0;
            series = &series + &power.scale(binom);
        }
        let root = c.sqrt();
        Ok(Self::from_terms(
            series.terms.iter().map(|(e, x)| (e + half_q, x * root)),
            self.cap,
        ))
    }
}

/// `u` with `a = c·ε^q·(1 + u)`; `u` is zero or infinitesimal.
fn unit_remainder(a: &HyperReal, q: Exponent, c: f64) -> HyperReal {
    HyperReal::from_terms(
        a.terms.iter().skip(1).map(|(e, x)| (e - q, x / c)),
        a.cap - q,
    )
}

fn real_pow(x: f64, e: Exponent) -> f64 {
    if e.is_integer() {
        x.powi(e.to_integer() as i32)
    } else {
        x.powf(e.to_f64().unwrap_or(f64::NAN))
    }
}

/// Sum in a canonical order so that the result does not depend on how the
/// summands were enumerated (keeps `a*b == b*a` bit-exact).
fn canonical_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    if v.len() > 1 {
        v.sort_by(|a, b| a.total_cmp(b));
    }
    v.into_iter().sum()
}

fn mul_capped(a: &HyperReal, b: &HyperReal, cap: Exponent) -> HyperReal {
    let mut prods = Vec::with_capacity(a.terms.len() * b.terms.len());
    for (ea, ca) in &a.terms {
        for (eb, cb) in &b.terms {
            let e = ea + eb;
            if e <= cap {
                prods.push((e, ca * cb));
            }
        }
    }
    HyperReal::from_terms(prods, cap)
}

fn add_terms(a: &HyperReal, b: &HyperReal, sign: f64) -> HyperReal {
    let cap = a.cap.min(b.cap);
    HyperReal::from_terms(
        a.terms
            .iter()
            .copied()
            .chain(b.terms.iter().map(|(e, c)| (*e, sign * c))),
        cap,
    )
}

impl Default for HyperReal {
    fn default() -> Self {
        Self::zero()
    }
}

impl From<f64> for HyperReal {
    fn from(c: f64) -> Self {
        Self::from_real(c)
    }
}

impl PartialEq for HyperReal {
    fn eq(&self, other: &Self) -> bool {
        self.terms == other.terms
    }
}

impl Eq for HyperReal {}

impl PartialOrd for HyperReal {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HyperReal {
    fn cmp(&self, other: &Self) -> Ordering {
        self.compare(other)
    }
}

impl Neg for &HyperReal {
    type Output = HyperReal;
    fn neg(self) -> HyperReal {
        HyperReal {
            terms: self.terms.iter().map(|(e, c)| (*e, -c)).collect(),
            cap: self.cap,
        }
    }
}

impl Neg for HyperReal {
    type Output = HyperReal;
    fn neg(self) -> HyperReal {
        -&self
    }
}

impl Add for &HyperReal {
    type Output = HyperReal;
    fn add(self, rhs: &HyperReal) -> HyperReal {
        add_terms(self, rhs, 1.0)
    }
}

impl Sub for &HyperReal {
    type Output = HyperReal;
    fn sub(self, rhs: &HyperReal) -> HyperReal {
        add_terms(self, rhs, -1.0)
    }
}

impl Mul for &HyperReal {
    type Output = HyperReal;
    fn mul(self, rhs: &HyperReal) -> HyperReal {
        mul_capped(self, rhs, self.cap.min(rhs.cap))
    }
}

/// Panics on division by zero, like integer division; use
/// [`HyperReal::try_div`] to handle it.
impl Div for &HyperReal {
    type Output = HyperReal;
    fn div(self, rhs: &HyperReal) -> HyperReal {
        self.try_div(rhs).expect("hyperreal division by zero")
    }
}

macro_rules! forward_owned {
    ($($tr:ident $m:ident),*) => {$(
        impl $tr for HyperReal {
            type Output = HyperReal;
            fn $m(self, rhs: HyperReal) -> HyperReal { (&self).$m(&rhs) }
        }
        impl $tr<&HyperReal> for HyperReal {
            type Output = HyperReal;
            fn $m(self, rhs: &HyperReal) -> HyperReal { (&self).$m(rhs) }
        }
        impl $tr<HyperReal> for &HyperReal {
            type Output = HyperReal;
            fn $m(self, rhs: HyperReal) -> HyperReal { self.$m(&rhs) }
        }
    )*};
}

forward_owned!(Add add, Sub sub, Mul mul, Div div);

impl AddAssign<&HyperReal> for HyperReal {
    fn add_assign(&mut self, rhs: &HyperReal) {
        *self = &*self + rhs;
    }
}

impl SubAssign<&HyperReal> for HyperReal {
    fn sub_assign(&mut self, rhs: &HyperReal) {
        *self = &*self - rhs;
    }
}

impl fmt::Display for HyperReal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (i, (e, c)) in self.terms.iter().enumerate() {
            let mag = if i == 0 {
                write!(f, "{}", if *c < 0.0 { "-" } else { "" })?;
                c.abs()
            } else {
                write!(f, " {} ", if *c < 0.0 { "-" } else { "+" })?;
                c.abs()
            };
            if e.is_zero() {
                write!(f, "{mag}")?;
            } else {
                if mag != 1.0 {
                    write!(f, "{mag}")?;
                }
                if *e == Exponent::from_integer(1) {
                    write!(f, "ε")?;
                } else {
                    write!(f, "ε^{e}")?;
                }
            }
        }
        Ok(())
    }
}

/// Serialized as `[[exponent_numerator, exponent_denominator, coefficient], ...]`.
impl Serialize for HyperReal {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut seq = serializer.serialize_seq(Some(self.terms.len()))?;
        for (e, c) in &self.terms {
            seq.serialize_element(&(*e.numer(), *e.denom(), *c))?;
        }
        seq.end()
    }
}

impl<'de> Deserialize<'de> for HyperReal {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw: Vec<(i64, i64, f64)> = Vec::deserialize(deserializer)?;
        let mut terms = Vec::with_capacity(raw.len());
        for (n, d, c) in raw {
            if d == 0 {
                return Err(serde::de::Error::custom("zero exponent denominator"));
            }
            if !c.is_finite() {
                return Err(serde::de::Error::custom("non-finite coefficient"));
            }
            terms.push((Exponent::new(n, d), c));
        }
        let cap = terms
            .iter()
            .map(|t| t.0)
            .fold(default_cap(), |a, b| a.max(b));
        Ok(Self::from_terms(terms, cap))
    }
}
