//! Discrete convex analysis on the real line.
//!
//! A [`Potential`] is a convex function of one state variable, either backed
//! by an analytic [`Preset`] evaluated at a fixed microscopic coordinate `y`,
//! or given by samples on a strictly increasing grid. Sampled potentials are
//! read as the piecewise-linear interpolant of their samples, extended
//! linearly past the hull; their conjugates are therefore finite exactly on
//! the slope range, and anything outside it is reported through [`Clip`].

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::scalar::{first_non_increasing, Real};

/// Side on which an evaluation left the effective domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clip {
    None,
    Below,
    Above,
}

/// Value of a convex function together with its domain flag.
///
/// When `clip` is not [`Clip::None`] the true value is `+inf`; `value` then
/// holds the value at the nearest domain endpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eval<T> {
    pub value: T,
    pub clip: Clip,
}

impl<T: Real> Eval<T> {
    pub fn finite(value: T) -> Self {
        Self {
            value,
            clip: Clip::None,
        }
    }

    pub fn is_clipped(&self) -> bool {
        self.clip != Clip::None
    }

    /// The value, or [`Error::Clipped`] if it is infinite.
    pub fn get(self) -> Result<T> {
        if self.is_clipped() {
            Err(Error::Clipped)
        } else {
            Ok(self.value)
        }
    }
}

/// Closed interval `[lo, hi]` of slopes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval<T> {
    pub lo: T,
    pub hi: T,
}

impl<T: Real> Interval<T> {
    pub fn point(x: T) -> Self {
        Self { lo: x, hi: x }
    }

    pub fn contains(&self, x: T) -> bool {
        self.lo <= x && x <= self.hi
    }

    /// Nearest element of the interval.
    pub fn project(&self, x: T) -> T {
        x.max(self.lo).min(self.hi)
    }

    /// Distance from `x` to the interval.
    pub fn distance(&self, x: T) -> T {
        (x - self.project(x)).abs()
    }
}

/// Analytic potential families `phi(v, y)`, periodic in `y`.
///
/// All families except [`Preset::Abs`] have the form `a(y) |v|^p / p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Preset<T> {
    /// `a v^2 / 2`.
    Quadratic { a: T },
    /// `a |v|^p / p`.
    Power { a: T, p: T },
    /// `|v|`.
    Abs,
    /// Layered medium: `a1 |v|^p / p` for `frac(y) < theta`, `a2 |v|^p / p` otherwise.
    TwoPhase { a1: T, a2: T, theta: T, p: T },
}

/// Moreau envelope value with first and second derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Smoothed<T> {
    pub value: T,
    pub slope: T,
    pub curvature: T,
}

fn abs_pow<T: Real>(v: T, p: T) -> T {
    let a = v.abs();
    if p == T::two() {
        a * a
    } else if p.fract() == T::zero() && p < T::lit(32.0) {
        a.powi(p.to_i32().unwrap_or(2))
    } else if a == T::zero() {
        T::zero()
    } else {
        a.powf(p)
    }
}

impl<T: Real> Preset<T> {
    /// Parses `quadratic(a)`, `power(a,p)`, `abs`, `two-phase(a1,a2,theta)` or
    /// `two-phase(a1,a2,theta,p)`.
    pub fn parse(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        let (name, args) = match spec.find('(') {
            Some(open) => {
                let close = spec
                    .rfind(')')
                    .ok_or_else(|| Error::InvalidParameter(format!("unbalanced preset `{spec}`")))?;
                let args = spec[open + 1..close]
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| {
                        s.trim().parse::<f64>().map(T::lit).map_err(|_| {
                            Error::InvalidParameter(format!("bad number `{}` in `{spec}`", s.trim()))
                        })
                    })
                    .collect::<Result<Vec<T>>>()?;
                (spec[..open].trim(), args)
            }
            None => (spec, Vec::new()),
        };
        let preset = match (name, args.as_slice()) {
            ("quadratic", [a]) => Preset::Quadratic { a: *a },
            ("power", [a, p]) => Preset::Power { a: *a, p: *p },
            ("abs", []) => Preset::Abs,
            ("two-phase", [a1, a2, theta]) => Preset::TwoPhase {
                a1: *a1,
                a2: *a2,
                theta: *theta,
                p: T::two(),
            },
            ("two-phase", [a1, a2, theta, p]) => Preset::TwoPhase {
                a1: *a1,
                a2: *a2,
                theta: *theta,
                p: *p,
            },
            _ => {
                return Err(Error::InvalidParameter(format!(
                    "unknown preset `{spec}`"
                )))
            }
        };
        preset.validate()?;
        Ok(preset)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        match *self {
            Preset::Quadratic { a } if !(a > T::zero()) => bad("quadratic coefficient must be positive"),
            Preset::Power { a, p } if !(a > T::zero() && p > T::one()) => {
                bad("power preset needs a > 0 and p > 1")
            }
            Preset::TwoPhase { a1, a2, theta, p }
                if !(a1 > T::zero()
                    && a2 > T::zero()
                    && theta > T::zero()
                    && theta < T::one()
                    && p > T::one()) =>
            {
                bad("two-phase preset needs a1, a2 > 0, theta in (0,1), p > 1")
            }
            _ => Ok(()),
        }
    }

    /// Canonical text form, accepted by [`Preset::parse`].
    pub fn name(&self) -> String {
        match *self {
            Preset::Quadratic { a } => format!("quadratic({a})"),
            Preset::Power { a, p } => format!("power({a},{p})"),
            Preset::Abs => "abs".to_string(),
            Preset::TwoPhase { a1, a2, theta, p } => {
                if p == T::two() {
                    format!("two-phase({a1},{a2},{theta})")
                } else {
                    format!("two-phase({a1},{a2},{theta},{p})")
                }
            }
        }
    }

    /// Coefficient `a(y)`; `1` for `Abs`.
    pub fn coefficient(&self, y: T) -> T {
        match *self {
            Preset::Quadratic { a } | Preset::Power { a, .. } => a,
            Preset::Abs => T::one(),
            Preset::TwoPhase { a1, a2, theta, .. } => {
                if y.frac01() < theta {
                    a1
                } else {
                    a2
                }
            }
        }
    }

    /// Growth exponent `p`.
    pub fn exponent(&self) -> T {
        match *self {
            Preset::Quadratic { .. } => T::two(),
            Preset::Power { p, .. } | Preset::TwoPhase { p, .. } => p,
            Preset::Abs => T::one(),
        }
    }

    pub fn depends_on_y(&self) -> bool {
        matches!(self, Preset::TwoPhase { a1, a2, .. } if a1 != a2)
    }

    /// Differentiable everywhere (no kink).
    pub fn is_smooth(&self) -> bool {
        !matches!(self, Preset::Abs)
    }

    /// Linear flux law `z = a(y) zeta`.
    pub fn is_quadratic(&self) -> bool {
        self.exponent() == T::two()
    }

    pub fn value(&self, v: T, y: T) -> T {
        match self {
            Preset::Abs => v.abs(),
            _ => {
                let p = self.exponent();
                self.coefficient(y) * abs_pow(v, p) / p
            }
        }
    }

    /// Subdifferential `[phi'_-(v), phi'_+(v)]`.
    pub fn subdifferential(&self, v: T, y: T) -> Interval<T> {
        match self {
            Preset::Abs => {
                if v > T::zero() {
                    Interval::point(T::one())
                } else if v < T::zero() {
                    Interval::point(-T::one())
                } else {
                    Interval {
                        lo: -T::one(),
                        hi: T::one(),
                    }
                }
            }
            _ => Interval::point(self.slope(v, y)),
        }
    }

    /// A selection of the subdifferential (the midpoint at a kink).
    pub fn slope(&self, v: T, y: T) -> T {
        match self {
            Preset::Abs => {
                if v > T::zero() {
                    T::one()
                } else if v < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            }
            _ => {
                let p = self.exponent();
                let a = self.coefficient(y);
                if p == T::two() {
                    a * v
                } else {
                    a * abs_pow(v, p - T::one()) * v.signum()
                }
            }
        }
    }

    /// Second derivative where it exists; zero at the kink of `Abs`.
    pub fn curvature(&self, v: T, y: T) -> T {
        match self {
            Preset::Abs => T::zero(),
            _ => {
                let p = self.exponent();
                let a = self.coefficient(y);
                if p == T::two() {
                    a
                } else if v == T::zero() && p < T::two() {
                    T::infinity()
                } else {
                    a * (p - T::one()) * abs_pow(v, p - T::two())
                }
            }
        }
    }

    /// Convex conjugate `phi*(w, y)`.
    pub fn conjugate(&self, w: T, y: T) -> Eval<T> {
        match self {
            Preset::Abs => {
                if w > T::one() {
                    Eval {
                        value: T::zero(),
                        clip: Clip::Above,
                    }
                } else if w < -T::one() {
                    Eval {
                        value: T::zero(),
                        clip: Clip::Below,
                    }
                } else {
                    Eval::finite(T::zero())
                }
            }
            _ => {
                let p = self.exponent();
                let a = self.coefficient(y);
                if p == T::two() {
                    Eval::finite(w * w / (T::two() * a))
                } else {
                    let q = p / (p - T::one());
                    let scale = a.powf(-T::one() / (p - T::one()));
                    Eval::finite(scale * abs_pow(w, q) / q)
                }
            }
        }
    }

    /// Derivative of the conjugate: the state `v` with `phi'(v) = w`.
    pub fn conjugate_slope(&self, w: T, y: T) -> Eval<T> {
        match self {
            Preset::Abs => {
                let e = self.conjugate(w, y);
                Eval {
                    value: T::zero(),
                    clip: e.clip,
                }
            }
            _ => {
                let p = self.exponent();
                let a = self.coefficient(y);
                if p == T::two() {
                    Eval::finite(w / a)
                } else {
                    let r = (w.abs() / a).powf(T::one() / (p - T::one()));
                    Eval::finite(r * w.signum())
                }
            }
        }
    }

    /// Proximal point `argmin_x phi(x, y) + (v - x)^2 / (2 lambda)`.
    pub fn prox(&self, v: T, y: T, lambda: T) -> T {
        if lambda == T::zero() {
            return v;
        }
        match self {
            Preset::Abs => {
                if v > lambda {
                    v - lambda
                } else if v < -lambda {
                    v + lambda
                } else {
                    T::zero()
                }
            }
            _ => {
                let p = self.exponent();
                let a = self.coefficient(y);
                if p == T::two() {
                    return v / (T::one() + lambda * a);
                }
                // x + lambda a |x|^{p-1} sgn x = v; the root has the sign of v and |x| <= |v|.
                let target = v.abs();
                let g = |x: T| x + lambda * a * abs_pow(x, p - T::one()) - target;
                let (mut lo, mut hi) = (T::zero(), target);
                let mut x = target / (T::one() + lambda * a * abs_pow(target, p - T::two()).max(T::zero()));
                if !(x > lo && x < hi) {
                    x = T::half() * target;
                }
                for _ in 0..200 {
                    let gx = g(x);
                    if gx > T::zero() {
                        hi = x;
                    } else {
                        lo = x;
                    }
                    let dg = T::one() + lambda * a * (p - T::one()) * abs_pow(x, p - T::two());
                    let mut next = x - gx / dg;
                    if !(next > lo && next < hi) || !next.is_finite() {
                        next = T::half() * (lo + hi);
                    }
                    if (next - x).abs() <= T::epsilon() * (T::one() + target) {
                        x = next;
                        break;
                    }
                    x = next;
                }
                x * v.signum()
            }
        }
    }

    /// Moreau envelope with parameter `lambda >= 0`; `lambda = 0` returns `phi` itself.
    pub fn moreau(&self, v: T, y: T, lambda: T) -> Smoothed<T> {
        if lambda == T::zero() {
            return Smoothed {
                value: self.value(v, y),
                slope: self.slope(v, y),
                curvature: self.curvature(v, y),
            };
        }
        let x = self.prox(v, y, lambda);
        let d = v - x;
        let value = self.value(x, y) + d * d / (T::two() * lambda);
        let slope = match self {
            // stay inside [-1, 1] despite roundoff in v - prox(v)
            Preset::Abs => (v / lambda).max(-T::one()).min(T::one()),
            _ => d / lambda,
        };
        let curvature = match self {
            Preset::Abs => {
                if v.abs() <= lambda {
                    T::one() / lambda
                } else {
                    T::zero()
                }
            }
            _ => {
                let c = self.curvature(x, y);
                if c.is_infinite() {
                    T::one() / lambda
                } else {
                    c / (T::one() + lambda * c)
                }
            }
        };
        Smoothed {
            value,
            slope,
            curvature,
        }
    }

    /// Constants `(c1, c2)` with `|phi(v, y)| <= c1 v^2 + c2`, for presets of
    /// at most quadratic growth.
    pub fn growth_bound(&self) -> Option<(T, T)> {
        match *self {
            Preset::Abs => Some((T::one(), T::lit(0.25))),
            _ if self.exponent() == T::two() => {
                Some((T::half() * self.max_coefficient(), T::zero()))
            }
            _ if self.exponent() < T::two() => {
                // |v|^p <= v^2 + 1 for 1 < p < 2
                let c = self.max_coefficient() / self.exponent();
                Some((c, c))
            }
            _ => None,
        }
    }

    /// Constants `(L, M)` with `phi*(w, y) >= L w^2 - M`.
    pub fn dual_coercivity(&self) -> Option<(T, T)> {
        match *self {
            Preset::Abs => Some((T::one(), T::one())),
            _ if self.exponent() == T::two() => {
                Some((T::one() / (T::two() * self.max_coefficient()), T::zero()))
            }
            _ => None,
        }
    }

    fn max_coefficient(&self) -> T {
        match *self {
            Preset::TwoPhase { a1, a2, .. } => a1.max(a2),
            _ => self.coefficient(T::zero()),
        }
    }

    /// Cell average `y -> phi(v, y)` as a preset of the same family.
    pub fn cell_average(&self) -> Preset<T> {
        match *self {
            Preset::TwoPhase { a1, a2, theta, p } => {
                let a = theta * a1 + (T::one() - theta) * a2;
                if p == T::two() {
                    Preset::Quadratic { a }
                } else {
                    Preset::Power { a, p }
                }
            }
            other => other,
        }
    }

    /// Finite curvature everywhere, so Newton needs no smoothing.
    pub fn newton_ready(&self) -> bool {
        self.is_smooth() && self.exponent() >= T::two()
    }

    /// Samples the preset at fixed `y` on `grid`.
    pub fn at(&self, y: T, grid: Vec<T>) -> Result<Potential<T>> {
        Potential::from_preset(*self, y, grid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Backing<T> {
    Sampled,
    Primal(Preset<T>, T),
    Dual(Preset<T>, T),
}

/// A convex potential of one scalar state.
#[derive(Debug, Clone, PartialEq)]
pub struct Potential<T> {
    grid: Vec<T>,
    values: Vec<T>,
    /// Effective domain; outside it the function is `+inf`.
    domain: Option<(T, T)>,
    backing: Backing<T>,
    growth: Option<(T, T)>,
}

impl<T: Real> Potential<T> {
    /// Builds a sampled potential, checking grid order and finiteness.
    pub fn sampled(grid: Vec<T>, values: Vec<T>) -> Result<Self> {
        validate_grid(&grid)?;
        if grid.len() != values.len() {
            return Err(Error::LengthMismatch {
                grid: grid.len(),
                values: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            grid,
            values,
            domain: None,
            backing: Backing::Sampled,
            growth: None,
        })
    }

    /// Samples an analytic preset at fixed `y`.
    pub fn from_preset(preset: Preset<T>, y: T, grid: Vec<T>) -> Result<Self> {
        preset.validate()?;
        validate_grid(&grid)?;
        let values = grid.iter().map(|&v| preset.value(v, y)).collect();
        Ok(Self {
            grid,
            values,
            domain: None,
            backing: Backing::Primal(preset, y),
            growth: preset.growth_bound(),
        })
    }

    /// Samples the analytic conjugate of a preset on `grid`.
    pub fn conjugate_of_preset(preset: Preset<T>, y: T, grid: Vec<T>) -> Result<Self> {
        preset.validate()?;
        validate_grid(&grid)?;
        let values = grid.iter().map(|&w| preset.conjugate(w, y).value).collect();
        let domain = match preset {
            Preset::Abs => Some((-T::one(), T::one())),
            _ => None,
        };
        Ok(Self {
            grid,
            values,
            domain,
            backing: Backing::Dual(preset, y),
            growth: None,
        })
    }

    pub fn grid(&self) -> &[T] {
        &self.grid
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn is_analytic(&self) -> bool {
        self.backing != Backing::Sampled
    }

    /// Analytic preset and `y` this potential was sampled from, if any.
    pub fn preset(&self) -> Option<(Preset<T>, T)> {
        match self.backing {
            Backing::Primal(p, y) => Some((p, y)),
            _ => None,
        }
    }

    /// `(c1, c2)` quadratic growth constants, when known.
    pub fn growth(&self) -> Option<(T, T)> {
        self.growth
    }

    pub fn domain(&self) -> Option<(T, T)> {
        self.domain
    }

    pub fn hull(&self) -> (T, T) {
        (self.grid[0], *self.grid.last().unwrap())
    }

    /// Slopes of consecutive samples.
    pub fn slopes(&self) -> Vec<T> {
        self.grid
            .windows(2)
            .zip(self.values.windows(2))
            .map(|(g, v)| (v[1] - v[0]) / (g[1] - g[0]))
            .collect()
    }

    /// Rejects samples whose slopes decrease, naming the offending node triple.
    pub fn check_convex(&self) -> Result<()> {
        let s = self.slopes();
        for i in 1..s.len() {
            let tol = T::lit(1e-10) * (T::one() + s[i].abs().max(s[i - 1].abs()));
            if s[i] < s[i - 1] - tol {
                return Err(Error::NonConvex(
                    i - 1,
                    i,
                    i + 1,
                    s[i - 1].as_f64(),
                    s[i].as_f64(),
                ));
            }
        }
        Ok(())
    }

    fn domain_clip(&self, v: T) -> Clip {
        match self.domain {
            Some((lo, _)) if v < lo => Clip::Below,
            Some((_, hi)) if v > hi => Clip::Above,
            _ => Clip::None,
        }
    }

    /// Evaluates the potential. Analytic potentials are evaluated exactly
    /// everywhere; sampled ones are interpolated and reject points outside
    /// the grid hull.
    pub fn eval(&self, v: T) -> Result<Eval<T>> {
        match self.backing {
            Backing::Primal(p, y) => Ok(Eval::finite(p.value(v, y))),
            Backing::Dual(p, y) => Ok(p.conjugate(v, y)),
            Backing::Sampled => {
                let value = self.interpolate(v)?;
                Ok(Eval {
                    value,
                    clip: self.domain_clip(v),
                })
            }
        }
    }

    fn out_of_hull(&self, v: T) -> Error {
        let (lo, hi) = self.hull();
        Error::OutOfDomain {
            what: "state",
            value: v.as_f64(),
            lo: lo.as_f64(),
            hi: hi.as_f64(),
        }
    }

    fn interpolate(&self, v: T) -> Result<T> {
        let (lo, hi) = self.hull();
        if !(v >= lo && v <= hi) {
            return Err(self.out_of_hull(v));
        }
        Ok(match locate(&self.grid, v) {
            Located::Node(i) => self.values[i],
            Located::Between(i) => {
                let t = (v - self.grid[i]) / (self.grid[i + 1] - self.grid[i]);
                self.values[i] + t * (self.values[i + 1] - self.values[i])
            }
        })
    }

    /// Writes `v,phi` CSV with shortest round-trip number formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("v,phi\n");
        for (v, f) in self.grid.iter().zip(&self.values) {
            let _ = writeln!(out, "{},{}", v, f);
        }
        out
    }

    /// Reads `v,phi` CSV (header optional, `#` comments skipped).
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut grid = Vec::new();
        let mut values = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with('v') {
                continue;
            }
            let mut cols = line.split(',');
            let parse = |s: Option<&str>| -> Result<T> {
                s.and_then(|s| s.trim().parse::<f64>().ok())
                    .map(T::lit)
                    .ok_or_else(|| Error::InvalidParameter(format!("bad CSV row `{line}`")))
            };
            grid.push(parse(cols.next())?);
            values.push(parse(cols.next())?);
        }
        Self::sampled(grid, values)
    }
}

fn validate_grid<T: Real>(grid: &[T]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if let Some(i) = grid.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    if let Some(i) = first_non_increasing(grid) {
        return Err(Error::UnsortedGrid(i));
    }
    Ok(())
}

enum Located {
    Node(usize),
    Between(usize),
}

/// Position of `v` in a sorted grid known to contain it.
fn locate<T: Real>(grid: &[T], v: T) -> Located {
    match grid.binary_search_by(|g| g.partial_cmp(&v).unwrap()) {
        Ok(i) => Located::Node(i),
        Err(i) => Located::Between(i - 1),
    }
}

/// Discrete Legendre transform `w -> max_i { w v_i - phi(v_i) }`, evaluated
/// on a strictly increasing `dual_grid` in linear time by sweeping the sorted
/// slopes. Ties go to the smallest maximizing index. Dual nodes outside the
/// slope range carry a clip flag: there the conjugate of the linearly
/// extended input is infinite.
pub fn conjugate<T: Real>(pot: &Potential<T>, dual_grid: &[T]) -> Result<Potential<T>> {
    Ok(conjugate_with_argmax(pot, dual_grid)?.0)
}

/// [`conjugate`] that also returns the maximizing sample index per dual node.
pub fn conjugate_with_argmax<T: Real>(
    pot: &Potential<T>,
    dual_grid: &[T],
) -> Result<(Potential<T>, Vec<usize>)> {
    validate_grid(dual_grid)?;
    pot.check_convex()?;
    let grid = pot.grid();
    let vals = pot.values();
    let slopes = pot.slopes();
    let last = grid.len() - 1;
    let mut out = Vec::with_capacity(dual_grid.len());
    let mut arg = Vec::with_capacity(dual_grid.len());
    let mut i = 0usize;
    for &w in dual_grid {
        while i < slopes.len() && slopes[i] < w {
            i += 1;
        }
        let k = i.min(last);
        out.push(w * grid[k] - vals[k]);
        arg.push(k);
    }
    let domain = if slopes.is_empty() {
        Some((T::infinity(), T::neg_infinity()))
    } else {
        Some((slopes[0], *slopes.last().unwrap()))
    };
    let mut dual = Potential::sampled(dual_grid.to_vec(), out)?;
    dual.domain = match domain {
        // a single sample: conjugate is affine and finite everywhere
        Some((lo, hi)) if lo > hi => None,
        d => d,
    };
    Ok((dual, arg))
}

/// Subdifferential of `pot` at `v`: exact for analytic potentials, one-sided
/// sample slopes otherwise.
pub fn subdifferential_interval<T: Real>(pot: &Potential<T>, v: T) -> Result<Interval<T>> {
    if let Some((preset, y)) = pot.preset() {
        return Ok(preset.subdifferential(v, y));
    }
    let (lo, hi) = pot.hull();
    if !(v >= lo && v <= hi) {
        return Err(pot.out_of_hull(v));
    }
    let s = pot.slopes();
    if s.is_empty() {
        return Ok(Interval::point(T::zero()));
    }
    Ok(match locate(pot.grid(), v) {
        Located::Node(i) => {
            let left = if i == 0 { s[0] } else { s[i - 1] };
            let right = if i == s.len() { s[i - 1] } else { s[i] };
            Interval {
                lo: left.min(right),
                hi: right.max(left),
            }
        }
        Located::Between(i) => Interval::point(s[i]),
    })
}

/// Exact proximal point of a piecewise-linear convex function (linearly
/// extended), i.e. the `x` with `(v - x) / lambda` in its subdifferential.
fn pl_prox<T: Real>(grid: &[T], slopes: &[T], v: T, lambda: T) -> T {
    let n = grid.len();
    if slopes.is_empty() {
        return grid[0];
    }
    // the interpolant is +inf outside the grid, so the end nodes absorb the tails
    if v <= grid[0] + lambda * slopes[0] {
        return grid[0];
    }
    if v >= grid[n - 1] + lambda * slopes[n - 2] {
        return grid[n - 1];
    }
    // breakpoints lo_i = grid_i + lambda s_{i-1} <= hi_i = grid_i + lambda s_i
    let lo_i = |i: usize| grid[i] + lambda * slopes[i - 1];
    let hi_i = |i: usize| grid[i] + lambda * slopes[i.min(n - 2)];
    let (mut a, mut b) = (0usize, n - 1);
    while a < b {
        let mid = (a + b).div_ceil(2);
        if lo_i(mid) <= v {
            a = mid;
        } else {
            b = mid - 1;
        }
    }
    if v <= hi_i(a) {
        grid[a]
    } else {
        v - lambda * slopes[a]
    }
}

fn pl_value<T: Real>(grid: &[T], values: &[T], slopes: &[T], x: T) -> T {
    let n = grid.len();
    if slopes.is_empty() {
        return values[0];
    }
    if x <= grid[0] {
        return values[0] + slopes[0] * (x - grid[0]);
    }
    if x >= grid[n - 1] {
        return values[n - 1] + slopes[slopes.len() - 1] * (x - grid[n - 1]);
    }
    match locate(grid, x) {
        Located::Node(i) => values[i],
        Located::Between(i) => values[i] + slopes[i] * (x - grid[i]),
    }
}

/// Infimal convolution with `|.|^2 / (2 lambda)`, sampled on the input grid.
///
/// Analytic potentials use the closed-form envelope of their preset; sampled
/// ones use the exact envelope of the piecewise-linear interpolant.
pub fn moreau_smooth<T: Real>(pot: &Potential<T>, lambda: T) -> Result<Potential<T>> {
    if !(lambda > T::zero()) {
        return Err(Error::InvalidParameter(format!(
            "smoothing parameter must be positive, got {lambda}"
        )));
    }
    let values: Vec<T> = match pot.preset() {
        Some((preset, y)) => pot
            .grid()
            .iter()
            .map(|&v| preset.moreau(v, y, lambda).value)
            .collect(),
        None => {
            pot.check_convex()?;
            let s = pot.slopes();
            pot.grid()
                .iter()
                .map(|&v| {
                    let x = pl_prox(pot.grid(), &s, v, lambda);
                    let d = v - x;
                    pl_value(pot.grid(), pot.values(), &s, x) + d * d / (T::two() * lambda)
                })
                .collect()
        }
    };
    Potential::sampled(pot.grid().to_vec(), values)
}

/// Greatest convex minorant of a point cloud, as a sampled potential on the
/// lower-hull vertices whose effective domain is the abscissa range.
pub fn convex_minorant<T: Real>(points: &[(T, T)]) -> Result<Potential<T>> {
    if points.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let mut pts: Vec<(T, T)> = points.to_vec();
    pts.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then(a.1.partial_cmp(&b.1).unwrap())
    });
    pts.dedup_by(|b, a| a.0 == b.0);
    let mut hull: Vec<(T, T)> = Vec::with_capacity(pts.len());
    for p in pts {
        while hull.len() >= 2 {
            let (o, a) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            let cross = (a.0 - o.0) * (p.1 - o.1) - (a.1 - o.1) * (p.0 - o.0);
            if cross <= T::zero() {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    let lo = hull[0].0;
    let hi = hull[hull.len() - 1].0;
    let mut pot = Potential::sampled(
        hull.iter().map(|p| p.0).collect(),
        hull.iter().map(|p| p.1).collect(),
    )?;
    pot.domain = Some((lo, hi));
    Ok(pot)
}

/// A potential with its conjugate.
#[derive(Debug, Clone, PartialEq)]
pub struct ConjugatePair<T> {
    pub primal: Potential<T>,
    pub dual: Potential<T>,
    /// `(L, M)` with `dual(w) >= L w^2 - M`, when known.
    pub coercivity: Option<(T, T)>,
}

impl<T: Real> ConjugatePair<T> {
    /// Pairs a potential with its discrete conjugate on `dual_grid`.
    pub fn new(primal: Potential<T>, dual_grid: &[T]) -> Result<Self> {
        let dual = conjugate(&primal, dual_grid)?;
        let coercivity = primal
            .preset()
            .and_then(|(p, _)| p.dual_coercivity());
        Ok(Self {
            primal,
            dual,
            coercivity,
        })
    }

    /// Pairs an analytic preset with its analytic conjugate.
    pub fn from_preset(preset: Preset<T>, y: T, grid: Vec<T>, dual_grid: Vec<T>) -> Result<Self> {
        Ok(Self {
            primal: Potential::from_preset(preset, y, grid)?,
            dual: Potential::conjugate_of_preset(preset, y, dual_grid)?,
            coercivity: preset.dual_coercivity(),
        })
    }

    /// Minimum of `primal(v) + dual(w) - v w` over all grid pairs (Fenchel–Young slack).
    pub fn min_fenchel_slack(&self) -> T {
        let mut best = T::infinity();
        for (&v, &f) in self.primal.grid().iter().zip(self.primal.values()) {
            for (&w, &g) in self.dual.grid().iter().zip(self.dual.values()) {
                best = best.min(f + g - v * w);
            }
        }
        best
    }

    /// Largest violation of `dual(w) >= L w^2 - M` on the dual grid.
    pub fn coercivity_violation(&self) -> Option<T> {
        let (l, m) = self.coercivity?;
        Some(
            self.dual
                .grid()
                .iter()
                .zip(self.dual.values())
                .filter(|(&w, _)| self.dual.domain_clip(w) == Clip::None)
                .map(|(&w, &g)| l * w * w - m - g)
                .fold(T::neg_infinity(), T::max),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::symmetric_grid;

    fn sampled_fn(grid: Vec<f64>, f: impl Fn(f64) -> f64) -> Potential<f64> {
        let vals = grid.iter().map(|&v| f(v)).collect();
        Potential::sampled(grid, vals).unwrap()
    }

    #[test]
    fn quadratic_is_self_conjugate() {
        let pot = sampled_fn(symmetric_grid(4.0, 800), |v| 0.5 * v * v);
        let dual = conjugate(&pot, &[1.0]).unwrap();
        assert!((dual.values()[0] - 0.5).abs() < 1e-12);
        assert!(!dual.eval(1.0).unwrap().is_clipped());
    }

    #[test]
    fn quartic_conjugate_matches_brute_force() {
        let grid = symmetric_grid(2.0, 20_000);
        let pot = sampled_fn(grid.clone(), |v| v.powi(4) / 4.0);
        let brute = grid
            .iter()
            .map(|&v| v - v.powi(4) / 4.0)
            .fold(f64::NEG_INFINITY, f64::max);
        let dual = conjugate(&pot, &[1.0]).unwrap();
        assert_eq!(dual.values()[0], brute);
        assert!((dual.values()[0] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn abs_conjugate_is_indicator_with_clip() {
        let pot = sampled_fn(symmetric_grid(3.0, 60), f64::abs);
        let dual = conjugate(&pot, &[-1.5, 0.5, 1.0, 1.5]).unwrap();
        assert_eq!(dual.values()[1], 0.0);
        assert_eq!(dual.values()[2], 0.0);
        assert_eq!(dual.eval(1.5).unwrap().clip, Clip::Above);
        assert_eq!(dual.eval(-1.5).unwrap().clip, Clip::Below);
        assert_eq!(dual.eval(0.5).unwrap().clip, Clip::None);
    }

    #[test]
    fn nonconvex_input_names_the_slope_triple() {
        let pot = Potential::sampled(vec![0.0, 1.0, 2.0, 3.0], vec![0.0, 1.0, 1.5, 3.0]).unwrap();
        let dual = Potential::sampled(vec![0.0, 1.0, 2.0, 3.0], vec![0.0, 2.0, 1.0, 3.0]).unwrap();
        assert!(conjugate(&pot, &[0.0]).is_err());
        match conjugate(&dual, &[0.0]) {
            Err(Error::NonConvex(0, 1, 2, a, b)) => assert!(a > b),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(Potential::<f64>::sampled(vec![], vec![]), Err(Error::EmptyGrid));
    }

    #[test]
    fn argmax_ties_pick_the_smallest_index() {
        let pot = sampled_fn(vec![-1.0, 0.0, 1.0], f64::abs);
        let (_, arg) = conjugate_with_argmax(&pot, &[-1.0, 1.0]).unwrap();
        assert_eq!(arg, vec![0, 1]);
    }

    #[test]
    fn subdifferential_examples() {
        let abs = Potential::from_preset(Preset::Abs, 0.0, symmetric_grid(2.0, 4)).unwrap();
        assert_eq!(
            subdifferential_interval(&abs, 0.0).unwrap(),
            Interval { lo: -1.0, hi: 1.0 }
        );
        let q = Potential::from_preset(Preset::Quadratic { a: 1.0 }, 0.0, symmetric_grid(4.0, 8))
            .unwrap();
        assert_eq!(subdifferential_interval(&q, 2.0).unwrap(), Interval::point(2.0));
        let sampled = sampled_fn(symmetric_grid(2.0, 4), f64::abs);
        assert_eq!(
            subdifferential_interval(&sampled, 0.0).unwrap(),
            Interval { lo: -1.0, hi: 1.0 }
        );
        assert!(matches!(
            subdifferential_interval(&sampled, 2.5),
            Err(Error::OutOfDomain { .. })
        ));
    }

    #[test]
    fn kinked_piecewise_quadratic_has_one_sided_slopes() {
        // a1 v^2/2 for v <= 0, a2 v^2/2 + latent v for v > 0
        let phase = |v: f64| if v <= 0.0 { 0.5 * v * v } else { 2.0 * v * v + 0.75 * v };
        let pot = sampled_fn(symmetric_grid(1.0, 2000), phase);
        let iv = subdifferential_interval(&pot, 0.0).unwrap();
        // one-sided difference quotients on a refined step
        let h = 1e-7;
        let left = (phase(0.0) - phase(-h)) / h;
        let right = (phase(h) - phase(0.0)) / h;
        assert!((iv.lo - left).abs() < 2e-3 && (iv.hi - right).abs() < 2e-3);
        assert!(iv.hi - iv.lo > 0.7);
    }

    #[test]
    fn moreau_examples() {
        let abs = sampled_fn(symmetric_grid(2.0, 40), f64::abs);
        let env = moreau_smooth(&abs, 1.0).unwrap();
        assert!((env.eval(0.5).unwrap().value - 0.125).abs() < 1e-15);
        // direct inf-convolution on a fine grid
        let fine = symmetric_grid(2.0f64, 4000);
        let direct = fine
            .iter()
            .map(|&x| x.abs() + (0.5 - x) * (0.5 - x) / 2.0)
            .fold(f64::INFINITY, f64::min);
        assert!((direct - 0.125).abs() < 1e-6);

        let quad = sampled_fn(symmetric_grid(4.0, 4000), |v| 0.5 * v * v);
        for &lambda in &[0.1, 0.5, 2.0] {
            let env = moreau_smooth(&quad, lambda).unwrap();
            let exact = 1.0 / (2.0 * (1.0 + lambda));
            assert!((env.eval(1.0).unwrap().value - exact).abs() < 1e-5);
        }
        assert!(moreau_smooth(&quad, 0.0).is_err());
        assert!(moreau_smooth(&quad, -1.0).is_err());
    }

    #[test]
    fn preset_moreau_matches_sampled_envelope() {
        let preset: Preset<f64> = Preset::Power { a: 2.0, p: 4.0 };
        let pot = Potential::from_preset(preset, 0.0, symmetric_grid(2.0, 8000)).unwrap();
        let sampled = Potential::sampled(pot.grid().to_vec(), pot.values().to_vec()).unwrap();
        let a = moreau_smooth(&pot, 0.05).unwrap();
        let b = moreau_smooth(&sampled, 0.05).unwrap();
        for i in (0..8000).step_by(397) {
            assert!((a.values()[i] - b.values()[i]).abs() < 1e-5, "node {i}");
        }
    }

    #[test]
    fn preset_parsing_round_trips() {
        for s in ["quadratic(2)", "power(1,4)", "abs", "two-phase(1,4,0.5)", "two-phase(1,16,0.5,4)"] {
            let p = Preset::<f64>::parse(s).unwrap();
            assert_eq!(Preset::parse(&p.name()).unwrap(), p);
        }
        assert!(Preset::<f64>::parse("cubic(1)").is_err());
        assert!(Preset::<f64>::parse("two-phase(1,4,1.5)").is_err());
    }

    #[test]
    fn conjugate_pair_bounds() {
        let preset: Preset<f64> = Preset::TwoPhase { a1: 1.0, a2: 4.0, theta: 0.5, p: 2.0 };
        let pair = ConjugatePair::new(
            Potential::from_preset(preset, 0.7, symmetric_grid(3.0, 300)).unwrap(),
            &symmetric_grid(6.0, 300),
        )
        .unwrap();
        assert!(pair.min_fenchel_slack() >= -1e-12);
        // the conjugate of the interpolant sits below the exact one by at most a h^2 / 8
        let h = 6.0 / 300.0;
        assert!(pair.coercivity_violation().unwrap() <= 4.0 * h * h / 8.0 + 1e-12);
        let exact =
            ConjugatePair::from_preset(preset, 0.7, symmetric_grid(3.0, 300), symmetric_grid(6.0, 300))
                .unwrap();
        assert!(exact.coercivity_violation().unwrap() <= 1e-12);
        let (c1, c2) = pair.primal.growth().unwrap();
        for (&v, &f) in pair.primal.grid().iter().zip(pair.primal.values()) {
            assert!(f.abs() <= c1 * v * v + c2 + 1e-12);
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let pot = sampled_fn(symmetric_grid(1.0, 7), |v| (v * 3.1).exp());
        let back = Potential::from_csv(&pot.to_csv()).unwrap();
        assert_eq!(back, pot);
    }

    #[test]
    fn minorant_of_max_affine_cloud() {
        let m = convex_minorant(&[(0.0, 1.0), (1.0, 0.0), (2.0, 5.0), (1.0, 3.0), (3.0, 1.0)]).unwrap();
        assert_eq!(m.grid(), &[0.0, 1.0, 3.0]);
        assert_eq!(m.eval(2.0).unwrap().value, 0.5);
        assert_eq!(m.eval(3.0).unwrap().clip, Clip::None);
    }

    #[test]
    fn generic_over_f32() {
        let pot = Potential::<f32>::from_preset(Preset::Quadratic { a: 1.0 }, 0.0, symmetric_grid(2.0, 200))
            .unwrap();
        let dual = conjugate(&pot, &[1.0f32]).unwrap();
        assert!((dual.values()[0] - 0.5).abs() < 1e-4);
    }
}
