//! Implicit Euler for `D_t w - (z + h)_x = 0`, `w in d phi(u, x/eps)`,
//! `z in d j(u_x, x/eps)` on `(0, 1)` with `u = 0` at both ends.
//!
//! Continuous piecewise-linear `u` on a uniform mesh. The state term uses
//! lumped (nodal) quadrature, so `w` lives on nodes; the flux term uses
//! element midpoints. Each step minimizes
//!
//! `sum_j h phi(u_j) + k sum_e h j(u_x) - sum_j h w_j^{n-1} u_j + k sum_e h h_e u_x`
//!
//! by damped Newton (tridiagonal Hessian), after which `w^n` is recovered
//! from the discrete equation and projected onto `d phi(u^n_j)`.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::fmt;
use std::fmt::Write as _;
use std::sync::Arc;

use crate::cellsolve::EffectiveLaw;
use crate::convexcore::{Clip, Eval, Interval, Preset, Smoothed};
use crate::error::{Error, Result};
use crate::fitz::{nullmin_residual, RepresentativeFn, RepresentativeKind};
use crate::scalar::{gauss_legendre_unit, solve_tridiagonal, Real};

type FieldFn<T> = Arc<dyn Fn(T, T, T) -> T + Send + Sync>;

/// Source `h(x, t, y)` or initial datum `w0(x, y)` (with `t = 0`).
#[derive(Clone)]
pub enum Field<T> {
    Zero,
    Constant(T),
    /// `a sin(pi x)`.
    SinPi(T),
    /// `a sin(pi x) (1 + b sin(2 pi y))`.
    SinPiOsc { amp: T, modulation: T },
    /// Source making `u = sin(pi x) e^{-t}` exact for `phi = u^2/2`, `j = zeta^2/2`;
    /// as an initial datum it is `sin(pi x)`.
    ManufacturedHeat,
    /// Arbitrary `(x, t, y) -> value`.
    Custom { name: String, f: FieldFn<T> },
}

impl<T: Real> fmt::Debug for Field<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl<T: Real> PartialEq for Field<T> {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Field::Custom { name: a, f: fa }, Field::Custom { name: b, f: fb }) => {
                a == b && Arc::ptr_eq(fa, fb)
            }
            (Field::Custom { .. }, _) | (_, Field::Custom { .. }) => false,
            _ => self.name() == other.name(),
        }
    }
}

/// Exact solution matching [`Field::ManufacturedHeat`].
pub fn manufactured_exact<T: Real>(x: T, t: T) -> T {
    (T::lit(PI) * x).sin() * (-t).exp()
}

impl<T: Real> Field<T> {
    pub fn custom(name: &str, f: impl Fn(T, T, T) -> T + Send + Sync + 'static) -> Self {
        Field::Custom {
            name: name.to_string(),
            f: Arc::new(f),
        }
    }

    /// Parses `zero`, `constant(c)`, `sin-pi(a)`, `sin-pi-osc(a,b)`, `manufactured-heat`.
    pub fn parse(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        let (name, args) = match spec.find('(') {
            Some(open) if spec.ends_with(')') => {
                let args = spec[open + 1..spec.len() - 1]
                    .split(',')
                    .map(|s| s.trim().parse::<f64>().map(T::lit))
                    .collect::<std::result::Result<Vec<T>, _>>()
                    .map_err(|_| Error::InvalidParameter(format!("bad field `{spec}`")))?;
                (spec[..open].trim(), args)
            }
            Some(_) => return Err(Error::InvalidParameter(format!("bad field `{spec}`"))),
            None => (spec, Vec::new()),
        };
        match (name, args.as_slice()) {
            ("zero", []) => Ok(Field::Zero),
            ("constant", [c]) => Ok(Field::Constant(*c)),
            ("sin-pi", [a]) => Ok(Field::SinPi(*a)),
            ("sin-pi-osc", [a, b]) => Ok(Field::SinPiOsc {
                amp: *a,
                modulation: *b,
            }),
            ("manufactured-heat", []) => Ok(Field::ManufacturedHeat),
            _ => Err(Error::InvalidParameter(format!("unknown field `{spec}`"))),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Field::Zero => "zero".into(),
            Field::Constant(c) => format!("constant({c})"),
            Field::SinPi(a) => format!("sin-pi({a})"),
            Field::SinPiOsc { amp, modulation } => format!("sin-pi-osc({amp},{modulation})"),
            Field::ManufacturedHeat => "manufactured-heat".into(),
            Field::Custom { name, .. } => format!("custom:{name}"),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Field::Zero)
    }

    /// Value as a source `h(x, t, y)`.
    pub fn source(&self, x: T, t: T, y: T) -> T {
        let pi = T::lit(PI);
        match self {
            Field::Zero => T::zero(),
            Field::Constant(c) => *c,
            Field::SinPi(a) => *a * (pi * x).sin(),
            Field::SinPiOsc { amp, modulation } => {
                *amp * (pi * x).sin() * (T::one() + *modulation * (T::two() * pi * y).sin())
            }
            Field::ManufacturedHeat => -(pi * pi - T::one()) * (pi * x).cos() * (-t).exp() / pi,
            Field::Custom { f, .. } => f(x, t, y),
        }
    }

    /// Value as an initial datum `w0(x, y)`.
    pub fn initial(&self, x: T, y: T) -> T {
        match self {
            Field::ManufacturedHeat => manufactured_exact(x, T::zero()),
            other => other.source(x, T::zero(), y),
        }
    }
}

/// Inner Newton controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions<T> {
    /// Relative gradient-norm tolerance.
    pub tol: T,
    pub max_iter: usize,
    /// Smoothing continuation for kinked presets.
    pub lambda_start: T,
    pub lambda_min: T,
    /// Largest accepted projection distance of the recovered `w`, relative
    /// to `1 + max |w|`.
    pub inclusion_tol: T,
}

impl<T: Real> Default for SolverOptions<T> {
    fn default() -> Self {
        Self {
            tol: T::lit(1e-10),
            max_iter: 400,
            lambda_start: T::lit(1e-2),
            lambda_min: T::lit(1e-6),
            inclusion_tol: T::lit(1e-6),
        }
    }
}

/// Monotone cubic (Fritsch–Butland) interpolant of the tabulated effective
/// flux, with its exact antiderivative as the flux potential.
#[derive(Debug, Clone, PartialEq)]
pub struct HomogenizedFlux<T> {
    xi: Vec<T>,
    gamma: Vec<T>,
    d: Vec<T>,
    cum: Vec<T>,
    offset: T,
}

impl<T: Real> HomogenizedFlux<T> {
    pub fn new(law: &EffectiveLaw<T>) -> Result<Self> {
        Self::from_table(&law.xi, &law.gamma0)
    }

    pub fn from_table(xi: &[T], gamma: &[T]) -> Result<Self> {
        if xi.len() < 2 || xi.len() != gamma.len() {
            return Err(Error::InvalidParameter("flux table needs two or more rows".into()));
        }
        if let Some(i) = crate::scalar::first_non_increasing(xi) {
            return Err(Error::UnsortedGrid(i));
        }
        if let Some(i) = gamma.windows(2).position(|g| g[1] < g[0]) {
            return Err(Error::NonMonotone(i, i + 1, (gamma[i + 1] - gamma[i]).as_f64()));
        }
        let n = xi.len();
        let h: Vec<T> = xi.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<T> = (0..n - 1).map(|i| (gamma[i + 1] - gamma[i]) / h[i]).collect();
        let mut d = vec![T::zero(); n];
        d[0] = delta[0];
        d[n - 1] = delta[n - 2];
        for k in 1..n - 1 {
            let (a, b) = (delta[k - 1], delta[k]);
            d[k] = if a * b <= T::zero() {
                T::zero()
            } else if a == b {
                a
            } else {
                let three = T::lit(3.0);
                three * (h[k - 1] + h[k])
                    / ((T::two() * h[k] + h[k - 1]) / a + (h[k] + T::two() * h[k - 1]) / b)
            };
        }
        let mut flux = Self {
            xi: xi.to_vec(),
            gamma: gamma.to_vec(),
            d,
            cum: vec![T::zero(); n],
            offset: T::zero(),
        };
        for i in 0..n - 1 {
            flux.cum[i + 1] = flux.cum[i] + flux.partial_integral(i, T::one());
        }
        if xi[0] <= T::zero() && xi[n - 1] >= T::zero() {
            flux.offset = flux.raw_integral(T::zero());
        }
        Ok(flux)
    }

    pub fn range(&self) -> (T, T) {
        (self.xi[0], self.xi[self.xi.len() - 1])
    }

    fn interval(&self, x: T) -> Result<(usize, T)> {
        let (lo, hi) = self.range();
        if !(x >= lo && x <= hi) {
            return Err(Error::OutOfDomain {
                what: "effective flux argument",
                value: x.as_f64(),
                lo: lo.as_f64(),
                hi: hi.as_f64(),
            });
        }
        let i = match self.xi.binary_search_by(|g| g.partial_cmp(&x).unwrap()) {
            Ok(i) => i.min(self.xi.len() - 2),
            Err(i) => i - 1,
        };
        Ok((i, (x - self.xi[i]) / (self.xi[i + 1] - self.xi[i])))
    }

    fn partial_integral(&self, i: usize, t: T) -> T {
        let h = self.xi[i + 1] - self.xi[i];
        let (t2, t3, t4) = (t * t, t * t * t, t * t * t * t);
        let three = T::lit(3.0);
        let four = T::lit(4.0);
        let i00 = t4 / T::two() - t3 + t;
        let i10 = t4 / four - T::two() * t3 / three + t2 / T::two();
        let i01 = -t4 / T::two() + t3;
        let i11 = t4 / four - t3 / three;
        h * (i00 * self.gamma[i] + i10 * h * self.d[i] + i01 * self.gamma[i + 1] + i11 * h * self.d[i + 1])
    }

    fn raw_integral(&self, x: T) -> T {
        let (i, t) = self.interval(x).expect("inside table");
        self.cum[i] + self.partial_integral(i, t)
    }

    /// `(j0, gamma0, gamma0')` at `x`.
    pub fn eval(&self, x: T) -> Result<Smoothed<T>> {
        let (i, t) = self.interval(x)?;
        let h = self.xi[i + 1] - self.xi[i];
        let (y0, y1, d0, d1) = (self.gamma[i], self.gamma[i + 1], self.d[i], self.d[i + 1]);
        let three = T::lit(3.0);
        let six = T::lit(6.0);
        let t2 = t * t;
        let t3 = t2 * t;
        let slope = (T::two() * t3 - three * t2 + T::one()) * y0
            + (t3 - T::two() * t2 + t) * h * d0
            + (-T::two() * t3 + three * t2) * y1
            + (t3 - t2) * h * d1;
        let curvature = ((six * t2 - six * t) * y0
            + (three * t2 - T::lit(4.0) * t + T::one()) * h * d0
            + (six * t - six * t2) * y1
            + (three * t2 - T::two() * t) * h * d1)
            / h;
        Ok(Smoothed {
            value: self.cum[i] + self.partial_integral(i, t) - self.offset,
            slope,
            curvature,
        })
    }

    /// Conjugate of the flux potential via inversion of `gamma0`.
    pub fn conjugate(&self, z: T) -> Result<Eval<T>> {
        let n = self.xi.len();
        let (glo, ghi) = (self.gamma[0], self.gamma[n - 1]);
        if z < glo || z > ghi {
            let clip = if z < glo { Clip::Below } else { Clip::Above };
            return Ok(Eval {
                value: T::zero(),
                clip,
            });
        }
        let (mut lo, mut hi) = self.range();
        for _ in 0..200 {
            let mid = T::half() * (lo + hi);
            if self.eval(mid)?.slope < z {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= T::epsilon() * (T::one() + hi.abs()) {
                break;
            }
        }
        let x = T::half() * (lo + hi);
        Ok(Eval::finite(z * x - self.eval(x)?.value))
    }
}

/// Period mode of a problem.
#[derive(Debug, Clone, PartialEq)]
pub enum Mode<T> {
    /// Oscillating coefficients with period `eps`.
    Eps(T),
    /// Single-scale problem with the cell-averaged state potential and a
    /// tabulated effective flux.
    Homogenized(Arc<HomogenizedFlux<T>>),
}

/// Data of one evolution problem on `(0, 1) x (0, T)`.
#[derive(Clone)]
pub struct ProblemData<T> {
    pub mode: Mode<T>,
    pub t_final: T,
    /// Number of time steps `m`.
    pub steps: usize,
    /// Number of mesh elements `1/h`.
    pub elements: usize,
    /// State potential `phi(u, y)`.
    pub phi: Preset<T>,
    /// Flux potential `j(zeta, y)`, `gamma = d j`.
    pub flux: Preset<T>,
    pub source: Field<T>,
    pub initial: Field<T>,
    pub solver: SolverOptions<T>,
}

impl<T: Real> fmt::Debug for ProblemData<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemData")
            .field("mode", &self.mode)
            .field("t_final", &self.t_final)
            .field("steps", &self.steps)
            .field("elements", &self.elements)
            .field("phi", &self.phi)
            .field("flux", &self.flux)
            .field("source", &self.source)
            .field("initial", &self.initial)
            .finish()
    }
}

impl<T: Real> PartialEq for ProblemData<T> {
    fn eq(&self, o: &Self) -> bool {
        self.mode == o.mode
            && self.t_final == o.t_final
            && self.steps == o.steps
            && self.elements == o.elements
            && self.phi == o.phi
            && self.flux == o.flux
            && self.source == o.source
            && self.initial == o.initial
            && self.solver == o.solver
    }
}

impl<T: Real> ProblemData<T> {
    pub fn new(
        eps: T,
        t_final: T,
        steps: usize,
        elements: usize,
        phi: Preset<T>,
        flux: Preset<T>,
    ) -> Self {
        Self {
            mode: Mode::Eps(eps),
            t_final,
            steps,
            elements,
            phi,
            flux,
            source: Field::Zero,
            initial: Field::Zero,
            solver: SolverOptions::default(),
        }
    }

    /// Problem on a mesh with `elements_per_period` elements in each period.
    pub fn with_period(
        eps: T,
        elements_per_period: usize,
        t_final: T,
        steps: usize,
        phi: Preset<T>,
        flux: Preset<T>,
    ) -> Result<Self> {
        let n = (T::of(elements_per_period) / eps).round();
        let elements = n
            .to_usize()
            .ok_or_else(|| Error::Mesh(format!("eps = {eps} gives no mesh")))?;
        let data = Self::new(eps, t_final, steps, elements, phi, flux);
        data.validate()?;
        Ok(data)
    }

    pub fn with_source(mut self, source: Field<T>) -> Self {
        self.source = source;
        self
    }

    pub fn with_initial(mut self, initial: Field<T>) -> Self {
        self.initial = initial;
        self
    }

    /// Same data as a single-scale problem driven by `law`.
    pub fn homogenized(&self, law: &EffectiveLaw<T>) -> Result<Self> {
        let mut out = self.clone();
        out.mode = Mode::Homogenized(Arc::new(HomogenizedFlux::new(law)?));
        Ok(out)
    }

    /// Same data on a different mesh (used for the homogenized reference).
    pub fn with_elements(&self, elements: usize) -> Self {
        let mut out = self.clone();
        out.elements = elements;
        out
    }

    pub fn h(&self) -> T {
        T::one() / T::of(self.elements)
    }

    pub fn k(&self) -> T {
        self.t_final / T::of(self.steps)
    }

    pub fn eps(&self) -> Option<T> {
        match self.mode {
            Mode::Eps(e) => Some(e),
            Mode::Homogenized(_) => None,
        }
    }

    /// Elements per period in eps mode.
    pub fn period_elements(&self) -> Option<usize> {
        self.eps()
            .map(|e| (e * T::of(self.elements)).round().to_usize().unwrap_or(0))
    }

    pub fn validate(&self) -> Result<()> {
        self.phi.validate()?;
        self.flux.validate()?;
        if self.elements < 2 {
            return Err(Error::Mesh(format!("{} elements (need at least 2)", self.elements)));
        }
        if self.steps == 0 || !(self.t_final > T::zero()) {
            return Err(Error::InvalidParameter("need T > 0 and at least one step".into()));
        }
        if let Mode::Eps(eps) = self.mode {
            if !(eps > T::zero() && eps <= T::one()) {
                return Err(Error::Mesh(format!("period {eps} outside (0, 1]")));
            }
            let ratio = eps * T::of(self.elements);
            let q = ratio.round();
            if (ratio - q).abs() > T::lit(1e-9) * q.max(T::one()) {
                return Err(Error::Mesh(format!(
                    "eps/h = {ratio} is not an integer"
                )));
            }
            if q < T::lit(16.0) {
                return Err(Error::Mesh(format!(
                    "eps/h = {q} resolves a period with fewer than 16 elements"
                )));
            }
        }
        Ok(())
    }

    /// Microscopic coordinate of node `j` (eps mode) or 0.
    pub fn node_y(&self, j: usize) -> T {
        match self.period_elements() {
            Some(q) => T::of(j % q) / T::of(q),
            None => T::zero(),
        }
    }

    /// Microscopic coordinate of the midpoint of element `e` (eps mode) or 0.
    pub fn mid_y(&self, e: usize) -> T {
        match self.period_elements() {
            Some(q) => (T::of(e % q) + T::half()) / T::of(q),
            None => T::zero(),
        }
    }

    /// State potential actually used: `phi` or its cell average.
    pub fn state_preset(&self) -> Preset<T> {
        match self.mode {
            Mode::Eps(_) => self.phi,
            Mode::Homogenized(_) => self.phi.cell_average(),
        }
    }

    /// Source averaged over step `n` (`t in (t_{n-1}, t_n)`) at element `e`.
    pub fn step_source(&self, n: usize, e: usize) -> T {
        if self.source.is_zero() {
            return T::zero();
        }
        let x = (T::of(e) + T::half()) * self.h();
        let y = self.mid_y(e);
        let k = self.k();
        let t0 = T::of(n - 1) * k;
        gauss_legendre_unit::<T>(3)
            .into_iter()
            .map(|(s, w)| w * self.source.source(x, t0 + s * k, y))
            .sum()
    }

    fn flux_eval(&self, zeta: T, e: usize, lambda: T) -> Result<Smoothed<T>> {
        match &self.mode {
            Mode::Eps(_) => Ok(self.flux.moreau(zeta, self.mid_y(e), lambda)),
            Mode::Homogenized(f) => f.eval(zeta),
        }
    }

    fn flux_conjugate(&self, z: T, e: usize) -> Result<Eval<T>> {
        match &self.mode {
            Mode::Eps(_) => Ok(self.flux.conjugate(z, self.mid_y(e))),
            Mode::Homogenized(f) => f.conjugate(z),
        }
    }

    fn flux_smooth(&self) -> bool {
        match self.mode {
            Mode::Eps(_) => self.flux.newton_ready(),
            Mode::Homogenized(_) => true,
        }
    }
}

/// Fields at one time level: nodal `u`, `w`; element `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct State<T> {
    pub u: Vec<T>,
    pub w: Vec<T>,
    pub z: Vec<T>,
}

/// Inner-solver record of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics<T> {
    pub iterations: usize,
    pub lambda: T,
    pub gradient_norm: T,
    /// Largest distance the recovered `w` moved when projected onto `d phi(u)`.
    pub inclusion_residual: T,
}

/// Initial state: `w0` at the nodes, `u0 = d phi*(w0)` inside, `z0 = gamma(u0_x)`.
pub fn initial_state<T: Real>(data: &ProblemData<T>) -> Result<State<T>> {
    data.validate()?;
    let n = data.elements;
    let h = data.h();
    let phi = data.state_preset();
    let mut u = vec![T::zero(); n + 1];
    let mut w = vec![T::zero(); n + 1];
    for j in 0..=n {
        let y = data.node_y(j);
        w[j] = data.initial.initial(T::of(j) * h, y);
        if j > 0 && j < n {
            let e = phi.conjugate_slope(w[j], y);
            u[j] = e.value;
        } else {
            w[j] = phi.subdifferential(T::zero(), y).project(T::zero());
        }
    }
    let lambda = if data.flux_smooth() {
        T::zero()
    } else {
        data.solver.lambda_min
    };
    let z = (0..n)
        .map(|e| Ok(data.flux_eval((u[e + 1] - u[e]) / h, e, lambda)?.slope))
        .collect::<Result<_>>()?;
    Ok(State { u, w, z })
}

struct StepProblem<'a, T> {
    data: &'a ProblemData<T>,
    phi: Preset<T>,
    wprev: &'a [T],
    src: Vec<T>,
    ys: Vec<T>,
    h: T,
    k: T,
}

impl<T: Real> StepProblem<'_, T> {
    fn energy(&self, u: &[T], la: T, lg: T) -> Option<T> {
        let n = self.data.elements;
        let mut acc = T::zero();
        for j in 1..n {
            acc += self.h * (self.phi.moreau(u[j], self.ys[j], la).value - self.wprev[j] * u[j]);
        }
        for e in 0..n {
            let zeta = (u[e + 1] - u[e]) / self.h;
            let f = self.data.flux_eval(zeta, e, lg).ok()?;
            acc += self.k * self.h * (f.value + self.src[e] * zeta);
        }
        acc.is_finite().then_some(acc)
    }

    /// Gradient and tridiagonal Hessian on interior nodes, plus element fluxes.
    fn derivatives(&self, u: &[T], la: T, lg: T) -> Result<(Vec<T>, [Vec<T>; 3], Vec<T>, T)> {
        let n = self.data.elements;
        let mut flux = Vec::with_capacity(n);
        let mut curv = Vec::with_capacity(n);
        for e in 0..n {
            let f = self.data.flux_eval((u[e + 1] - u[e]) / self.h, e, lg)?;
            flux.push(f.slope);
            curv.push(f.curvature);
        }
        let mut g = vec![T::zero(); n - 1];
        let mut lower = vec![T::zero(); n - 1];
        let mut diag = vec![T::zero(); n - 1];
        let mut upper = vec![T::zero(); n - 1];
        let mut scale = T::zero();
        for j in 1..n {
            let s = self.phi.moreau(u[j], self.ys[j], la);
            let left = flux[j - 1] + self.src[j - 1];
            let right = flux[j] + self.src[j];
            g[j - 1] = self.h * (s.slope - self.wprev[j]) + self.k * (left - right);
            scale = scale.max(
                self.h * (s.slope.abs() + self.wprev[j].abs()) + self.k * (left.abs() + right.abs()),
            );
            diag[j - 1] = self.h * s.curvature + self.k * (curv[j - 1] + curv[j]) / self.h;
            if j > 1 {
                lower[j - 1] = -self.k * curv[j - 1] / self.h;
            }
            if j < n - 1 {
                upper[j - 1] = -self.k * curv[j] / self.h;
            }
        }
        Ok((g, [lower, diag, upper], flux, scale))
    }
}

fn newton_stage<T: Real>(
    p: &StepProblem<'_, T>,
    u: &mut [T],
    la: T,
    lg: T,
    opts: &SolverOptions<T>,
) -> Result<(usize, T)> {
    let n = p.data.elements;
    let mut history = Vec::new();
    let mut f = p.energy(u, la, lg).ok_or(Error::NoConvergence {
        solver: "step newton (initial energy)",
        iterations: 0,
        residual: f64::NAN,
        history: Vec::new(),
    })?;
    // last iterate taken below the energy resolution, with its gradient norm
    let mut fallback: Option<(Vec<T>, T)> = None;
    for it in 0..opts.max_iter {
        let (g, [lower, mut diag, upper], _, scale) = p.derivatives(u, la, lg)?;
        let gnorm = g.iter().map(|x| x.abs()).fold(T::zero(), T::max);
        history.push(gnorm.as_f64());
        if gnorm <= opts.tol * scale || gnorm == T::zero() {
            return Ok((it, gnorm));
        }
        if let Some((prev, pnorm)) = fallback.take() {
            if gnorm >= pnorm {
                u.copy_from_slice(&prev);
                return Ok((it, pnorm));
            }
        }
        let dmax = diag.iter().copied().fold(T::zero(), T::max);
        let floor = T::lit(1e-14) * (T::one() + dmax);
        diag.iter_mut().for_each(|d| *d = d.max(floor));
        let rhs: Vec<T> = g.iter().map(|&x| -x).collect();
        let d = solve_tridiagonal(&lower, &diag, &upper, &rhs).ok_or(Error::NoConvergence {
            solver: "step newton (singular hessian)",
            iterations: it,
            residual: gnorm.as_f64(),
            history: history.clone(),
        })?;
        let slope: T = g.iter().zip(&d).map(|(&a, &b)| a * b).sum();
        // Newton decrement below the resolution of the energy: full steps
        // while the gradient keeps falling
        if -slope <= T::lit(16.0) * T::epsilon() * f.abs() {
            let prev = u.to_vec();
            for j in 1..n {
                u[j] += d[j - 1];
            }
            match p.energy(u, la, lg) {
                Some(ft) => {
                    f = ft;
                    fallback = Some((prev, gnorm));
                    continue;
                }
                None => {
                    u.copy_from_slice(&prev);
                    return Ok((it, gnorm));
                }
            }
        }
        let mut t = T::one();
        let mut trial = u.to_vec();
        let mut accepted = false;
        for _ in 0..60 {
            for j in 1..n {
                trial[j] = u[j] + t * d[j - 1];
            }
            if let Some(ft) = p.energy(&trial, la, lg) {
                if ft <= f + T::lit(1e-4) * t * slope
                    || (ft - f).abs() <= T::lit(4.0) * T::epsilon() * f.abs().max(T::one())
                {
                    f = ft;
                    accepted = true;
                    break;
                }
            }
            t *= T::half();
        }
        if !accepted {
            return Err(Error::NoConvergence {
                solver: "step newton (line search)",
                iterations: it,
                residual: gnorm.as_f64(),
                history,
            });
        }
        u.copy_from_slice(&trial);
    }
    Err(Error::NoConvergence {
        solver: "step newton",
        iterations: opts.max_iter,
        residual: history.last().copied().unwrap_or(f64::NAN),
        history,
    })
}

/// One implicit Euler step from `prev` to time level `n >= 1`.
pub fn step<T: Real>(
    data: &ProblemData<T>,
    prev: &State<T>,
    n: usize,
) -> Result<(State<T>, StepDiagnostics<T>)> {
    let ne = data.elements;
    if prev.u.len() != ne + 1 || prev.w.len() != ne + 1 {
        return Err(Error::Mesh("previous state does not match the mesh".into()));
    }
    if n == 0 {
        return Err(Error::InvalidParameter("steps are numbered from 1".into()));
    }
    let phi = data.state_preset();
    let p = StepProblem {
        data,
        phi,
        wprev: &prev.w,
        src: (0..ne).map(|e| data.step_source(n, e)).collect(),
        ys: (0..=ne).map(|j| data.node_y(j)).collect(),
        h: data.h(),
        k: data.k(),
    };
    let opts = &data.solver;
    let needs_smoothing = !phi.newton_ready() || !data.flux_smooth();
    let schedule: Vec<T> = if needs_smoothing {
        let mut s = Vec::new();
        let mut l = opts.lambda_start;
        while l >= opts.lambda_min * T::lit(0.999) {
            s.push(l);
            l *= T::lit(0.1);
        }
        s
    } else {
        vec![T::zero()]
    };
    let mut u = prev.u.clone();
    u[0] = T::zero();
    u[ne] = T::zero();
    let mut iterations = 0;
    let mut gnorm = T::zero();
    let mut lambda = T::zero();
    for &l in &schedule {
        let la = if phi.newton_ready() { T::zero() } else { l };
        let lg = if data.flux_smooth() { T::zero() } else { l };
        let (it, g) = newton_stage(&p, &mut u, la, lg, opts)?;
        iterations += it;
        gnorm = g;
        lambda = l;
    }
    let la = if phi.newton_ready() { T::zero() } else { lambda };
    let lg = if data.flux_smooth() { T::zero() } else { lambda };
    let (_, _, z, _) = p.derivatives(&u, la, lg)?;

    // w from the discrete equation, then projected onto d phi(u)
    let mut w = vec![T::zero(); ne + 1];
    let mut worst = T::zero();
    let mut worst_node = 0;
    if la > T::zero() {
        for j in 1..ne {
            u[j] = phi.prox(u[j], p.ys[j], la);
        }
    }
    for j in 1..ne {
        let raw = prev.w[j] + p.k / p.h * ((z[j] + p.src[j]) - (z[j - 1] + p.src[j - 1]));
        let iv: Interval<T> = phi.subdifferential(u[j], p.ys[j]);
        let dist = iv.distance(raw);
        if dist > worst {
            worst = dist;
            worst_node = j;
        }
        w[j] = iv.project(raw);
    }
    for j in [0, ne] {
        w[j] = phi.subdifferential(T::zero(), p.ys[j]).project(T::zero());
    }
    let wmax = w.iter().map(|x| x.abs()).fold(T::zero(), T::max);
    if worst > opts.inclusion_tol * (T::one() + wmax) {
        return Err(Error::InclusionRejected {
            node: worst_node,
            residual: worst.as_f64(),
        });
    }
    Ok((
        State { u, w, z },
        StepDiagnostics {
            iterations,
            lambda,
            gradient_norm: gnorm,
            inclusion_residual: worst,
        },
    ))
}

/// Discrete trajectory with time levels `0..=m`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub t_final: T,
    pub elements: usize,
    /// `states[n]` at `t_n = n k`.
    pub states: Vec<State<T>>,
    /// Diagnostics of steps `1..=m`.
    pub diagnostics: Vec<StepDiagnostics<T>>,
    pub meta: BTreeMap<String, String>,
}

impl<T: Real> Trajectory<T> {
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn k(&self) -> T {
        self.t_final / T::of(self.steps())
    }

    pub fn h(&self) -> T {
        T::one() / T::of(self.elements)
    }

    pub fn time(&self, n: usize) -> T {
        T::of(n) * self.k()
    }

    pub fn final_state(&self) -> &State<T> {
        self.states.last().expect("trajectory has the initial state")
    }

    fn level_of(&self, t: T) -> usize {
        let m = self.steps();
        let n = (t / self.k()).ceil().to_usize().unwrap_or(0);
        n.clamp(1, m)
    }

    /// Piecewise-constant interpolate: level `n` on `(t_{n-1}, t_n]`.
    pub fn constant_at(&self, t: T) -> &State<T> {
        &self.states[self.level_of(t)]
    }

    /// Piecewise-linear interpolate of `w` at time `t`.
    pub fn w_linear_at(&self, t: T) -> Vec<T> {
        let n = self.level_of(t);
        let s = ((t - self.time(n - 1)) / self.k()).max(T::zero()).min(T::one());
        self.states[n - 1]
            .w
            .iter()
            .zip(&self.states[n].w)
            .map(|(&a, &b)| a + s * (b - a))
            .collect()
    }

    /// Long-format CSV `t,x,u,w,z`: node rows carry `u`, `w`; element
    /// midpoint rows carry `z`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# t_final = {}", self.t_final);
        let _ = writeln!(out, "# elements = {}", self.elements);
        let _ = writeln!(out, "# steps = {}", self.steps());
        for (k, v) in &self.meta {
            let _ = writeln!(out, "# {k} = {v}");
        }
        let _ = writeln!(out, "t,x,u,w,z");
        let h = self.h();
        for (n, s) in self.states.iter().enumerate() {
            let t = self.time(n);
            for j in 0..=self.elements {
                let _ = writeln!(out, "{t},{},{},{},", T::of(j) * h, s.u[j], s.w[j]);
            }
            for (e, z) in s.z.iter().enumerate() {
                let _ = writeln!(out, "{t},{},,,{z}", (T::of(e) + T::half()) * h);
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut meta = BTreeMap::new();
        let mut rows: Vec<[Option<f64>; 5]> = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with("t,") {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some((k, v)) = rest.split_once('=') {
                    meta.insert(k.trim().to_string(), v.trim().to_string());
                }
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 5 {
                return Err(Error::InvalidParameter(format!("trajectory row `{line}`")));
            }
            let mut row = [None; 5];
            for (slot, c) in row.iter_mut().zip(&cols) {
                let c = c.trim();
                if !c.is_empty() {
                    *slot = Some(c.parse::<f64>().map_err(|_| {
                        Error::InvalidParameter(format!("trajectory value `{c}`"))
                    })?);
                }
            }
            rows.push(row);
        }
        let take = |k: &str, meta: &mut BTreeMap<String, String>| -> Result<String> {
            meta.remove(k)
                .ok_or_else(|| Error::InvalidParameter(format!("missing `{k}` metadata")))
        };
        let t_final: f64 = take("t_final", &mut meta)?
            .parse()
            .map_err(|_| Error::InvalidParameter("bad t_final".into()))?;
        let elements: usize = take("elements", &mut meta)?
            .parse()
            .map_err(|_| Error::InvalidParameter("bad elements".into()))?;
        let steps: usize = take("steps", &mut meta)?
            .parse()
            .map_err(|_| Error::InvalidParameter("bad steps".into()))?;
        let per_level = 2 * elements + 1;
        if rows.len() != per_level * (steps + 1) {
            return Err(Error::Mesh(format!(
                "{} rows for {} levels of {per_level}",
                rows.len(),
                steps + 1
            )));
        }
        let mut states = Vec::with_capacity(steps + 1);
        for level in rows.chunks(per_level) {
            let mut s = State {
                u: Vec::with_capacity(elements + 1),
                w: Vec::with_capacity(elements + 1),
                z: Vec::with_capacity(elements),
            };
            for r in level {
                match (r[2], r[3], r[4]) {
                    (Some(u), Some(w), None) => {
                        s.u.push(T::lit(u));
                        s.w.push(T::lit(w));
                    }
                    (None, None, Some(z)) => s.z.push(T::lit(z)),
                    _ => return Err(Error::InvalidParameter("mixed trajectory row".into())),
                }
            }
            if s.u.len() != elements + 1 || s.z.len() != elements {
                return Err(Error::Mesh("trajectory level has the wrong size".into()));
            }
            states.push(s);
        }
        Ok(Self {
            t_final: T::lit(t_final),
            elements,
            states,
            diagnostics: Vec::new(),
            meta,
        })
    }
}

/// Runs all steps from the initial datum.
pub fn solve_parabolic<T: Real>(data: &ProblemData<T>) -> Result<Trajectory<T>> {
    let mut states = vec![initial_state(data)?];
    let mut diagnostics = Vec::with_capacity(data.steps);
    for n in 1..=data.steps {
        let (s, d) = step(data, states.last().unwrap(), n)?;
        states.push(s);
        diagnostics.push(d);
    }
    Ok(Trajectory {
        t_final: data.t_final,
        elements: data.elements,
        states,
        diagnostics,
        meta: BTreeMap::new(),
    })
}

type RepFactory<T> = Arc<dyn Fn(T) -> Result<RepresentativeFn<T>> + Send + Sync>;

/// Representative used for the flux part of the certificate.
#[derive(Clone, Default)]
pub enum FluxRepresentative<T> {
    /// `j(zeta) + j*(z)`, exact for cyclic fluxes.
    #[default]
    Fenchel,
    /// Caller-supplied representative per microscopic coordinate `y`
    /// (typically a Fitzpatrick function over a sampled graph).
    PerCell(RepFactory<T>),
}

impl<T> fmt::Debug for FluxRepresentative<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FluxRepresentative::Fenchel => f.write_str("Fenchel"),
            FluxRepresentative::PerCell(_) => f.write_str("PerCell(..)"),
        }
    }
}

/// Space-time certificate split into state and flux parts.
#[derive(Debug, Clone, PartialEq)]
pub struct CertificateReport<T> {
    pub alpha: T,
    pub gamma: T,
    pub total: T,
    /// Magnitude of the integrands, for relative tolerances.
    pub scale: T,
    /// `(alpha, gamma)` per step `1..=m`.
    pub per_step: Vec<(T, T)>,
    pub flux_representative: RepresentativeKind,
    /// Largest pointwise state gap over all nodes and steps.
    pub max_pointwise_alpha: T,
}

/// Evaluates the certificate of a trajectory:
///
/// `sum_n k sum_j h [phi(u) + phi*(w) - w u] + sum_n k sum_e h [f(u_x, z) - u_x z]`.
pub fn phi_certificate<T: Real>(
    traj: &Trajectory<T>,
    data: &ProblemData<T>,
    rep: &FluxRepresentative<T>,
) -> Result<CertificateReport<T>> {
    let ne = data.elements;
    if traj.elements != ne || traj.steps() != data.steps {
        return Err(Error::Mesh("trajectory and data disagree on the mesh".into()));
    }
    let h = data.h();
    let k = data.k();
    let phi = data.state_preset();
    let mut cache: HashMap<u64, RepresentativeFn<T>> = HashMap::new();
    let mut per_step = Vec::with_capacity(data.steps);
    let (mut alpha, mut gamma, mut scale) = (T::zero(), T::zero(), T::zero());
    let mut max_point = T::zero();
    let mut kind = RepresentativeKind::Fenchel;
    // pointwise slack a sampled representative is allowed, integrated over the mesh
    let mut rep_slack = T::zero();
    for s in &traj.states[1..] {
        let (mut a_n, mut g_n) = (T::zero(), T::zero());
        for j in 1..ne {
            let y = data.node_y(j);
            let f = phi.value(s.u[j], y);
            let c = phi.conjugate(s.w[j], y);
            let wu = s.w[j] * s.u[j];
            let gap = if c.is_clipped() { T::infinity() } else { f + c.value - wu };
            max_point = max_point.max(gap);
            a_n += h * gap;
            scale += k * h * (f.abs() + c.value.abs() + wu.abs());
        }
        for e in 0..ne {
            let zeta = (s.u[e + 1] - s.u[e]) / h;
            let z = s.z[e];
            let gap = match rep {
                FluxRepresentative::Fenchel => {
                    let f = data.flux_eval(zeta, e, T::zero())?.value;
                    let c = data.flux_conjugate(z, e)?;
                    scale += k * h * (f.abs() + c.value.abs() + (zeta * z).abs());
                    if c.is_clipped() {
                        T::infinity()
                    } else {
                        f + c.value - zeta * z
                    }
                }
                FluxRepresentative::PerCell(factory) => {
                    let y = data.mid_y(e);
                    let key = y.as_f64().to_bits();
                    if let std::collections::hash_map::Entry::Vacant(e) = cache.entry(key) {
                        e.insert(factory(y)?);
                    }
                    let r = &cache[&key];
                    kind = r.kind();
                    scale += k * h * (zeta * z).abs();
                    rep_slack += k * h * r.tol;
                    match nullmin_residual(r, zeta, z) {
                        Ok(v) => v,
                        Err(Error::Clipped) => T::infinity(),
                        Err(e) => return Err(e),
                    }
                }
            };
            g_n += h * gap;
        }
        per_step.push((k * a_n, k * g_n));
        alpha += k * a_n;
        gamma += k * g_n;
    }
    let tol = T::lit(1e-8) * scale.max(T::min_positive_value());
    for (part, v, tol) in [("alpha", alpha, tol), ("gamma", gamma, tol + rep_slack)] {
        if v < -tol {
            return Err(Error::NegativeCertificate {
                part,
                value: v.as_f64(),
                tol: tol.as_f64(),
            });
        }
    }
    Ok(CertificateReport {
        alpha,
        gamma,
        total: alpha + gamma,
        scale,
        per_step,
        flux_representative: kind,
        max_pointwise_alpha: max_point,
    })
}

/// Discrete norms bounded uniformly in `eps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormRecord<T> {
    /// `||u||_{L^2(0,T; H^1_0)}` (gradient seminorm).
    pub u_l2_h1: T,
    pub z_l2: T,
    pub w_linf_l2: T,
    /// `||D_t w||_{L^2(0,T; H^{-1})}` of the difference quotients.
    pub dtw_l2_hm1: T,
}

impl<T: Real> NormRecord<T> {
    pub fn as_array(&self) -> [T; 4] {
        [self.u_l2_h1, self.z_l2, self.w_linf_l2, self.dtw_l2_hm1]
    }
}

/// `||f||_{-1}^2 = f^T K^{-1} f` for nodal functionals `f` (lumped mass).
fn hm1_norm_sq<T: Real>(d: &[T], h: T) -> T {
    let n = d.len() - 1;
    if n < 2 {
        return T::zero();
    }
    let f: Vec<T> = (1..n).map(|j| h * d[j]).collect();
    let m = f.len();
    let off = -T::one() / h;
    let lower = vec![off; m];
    let upper = vec![off; m];
    let diag = vec![T::two() / h; m];
    let s = solve_tridiagonal(&lower, &diag, &upper, &f).unwrap_or_else(|| vec![T::zero(); m]);
    f.iter().zip(&s).map(|(&a, &b)| a * b).sum()
}

pub fn apriori_monitor<T: Real>(traj: &Trajectory<T>) -> NormRecord<T> {
    let h = traj.h();
    let k = traj.k();
    let ne = traj.elements;
    let (mut u2, mut z2, mut wmax, mut dt2) = (T::zero(), T::zero(), T::zero(), T::zero());
    for (n, s) in traj.states.iter().enumerate() {
        let wn: T = s.w[1..ne].iter().map(|&w| h * w * w).sum();
        wmax = wmax.max(wn);
        if n == 0 {
            continue;
        }
        for e in 0..ne {
            let zeta = (s.u[e + 1] - s.u[e]) / h;
            u2 += k * h * zeta * zeta;
            z2 += k * h * s.z[e] * s.z[e];
        }
        let d: Vec<T> = s
            .w
            .iter()
            .zip(&traj.states[n - 1].w)
            .map(|(&a, &b)| (a - b) / k)
            .collect();
        dt2 += k * hm1_norm_sq(&d, h);
    }
    NormRecord {
        u_l2_h1: u2.sqrt(),
        z_l2: z2.sqrt(),
        w_linf_l2: wmax.sqrt(),
        dtw_l2_hm1: dt2.sqrt(),
    }
}

/// Tensor-product test family: nodal hats at `nodes` times time hats
/// centred at `t_n` for `n` in `levels` (each `< m`, so tests vanish at `T`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestFamily {
    pub nodes: Vec<usize>,
    pub levels: Vec<usize>,
}

impl TestFamily {
    /// Every interior node against every admissible time hat.
    pub fn full(elements: usize, steps: usize) -> Self {
        Self {
            nodes: (1..elements).collect(),
            levels: (0..steps).collect(),
        }
    }
}

/// Weak residual `-int <w, D_t v> + int (z + h) v_x - <w0, v(0)>` for each
/// test; `w` piecewise linear, `z` and the source piecewise constant in time.
/// Returns the largest absolute value.
pub fn weak_residual<T: Real>(
    traj: &Trajectory<T>,
    data: &ProblemData<T>,
    tests: &TestFamily,
) -> Result<T> {
    let ne = data.elements;
    let m = data.steps;
    if traj.elements != ne || traj.steps() != m {
        return Err(Error::Mesh("trajectory and data disagree on the mesh".into()));
    }
    let h = data.h();
    let k = data.k();
    let w0: Vec<T> = (0..=ne)
        .map(|j| data.initial.initial(T::of(j) * h, data.node_y(j)))
        .collect();
    let src: Vec<Vec<T>> = (1..=m)
        .map(|n| (0..ne).map(|e| data.step_source(n, e)).collect())
        .collect();
    let mut worst = T::zero();
    for &j in &tests.nodes {
        if j == 0 || j >= ne {
            return Err(Error::InvalidParameter(format!("test node {j} is not interior")));
        }
        for &c in &tests.levels {
            if c >= m {
                return Err(Error::InvalidParameter(format!("time hat {c} does not vanish at T")));
            }
            let theta = |n: usize| if n == c { T::one() } else { T::zero() };
            let mut r = -h * w0[j] * theta(0);
            // intervals touching the hat: (t_{c-1}, t_c) and (t_c, t_{c+1})
            for n in [c, c + 1] {
                if n == 0 || n > m {
                    continue;
                }
                let (a, b) = (&traj.states[n - 1], &traj.states[n]);
                let dtheta = (theta(n) - theta(n - 1)) / k;
                let avg_theta = T::half() * (theta(n - 1) + theta(n));
                r -= k * h * T::half() * (a.w[j] + b.w[j]) * dtheta;
                let left = b.z[j - 1] + src[n - 1][j - 1];
                let right = b.z[j] + src[n - 1][j];
                r += k * avg_theta * (left - right);
            }
            worst = worst.max(r.abs());
        }
    }
    Ok(worst)
}

/// Space-time `L^2` distance between the piecewise-constant interpolates of
/// two trajectories; `fine` must live on a refinement of `coarse`'s mesh.
pub fn l2_distance<T: Real>(coarse: &Trajectory<T>, fine: &Trajectory<T>) -> Result<T> {
    if coarse.steps() != fine.steps() || !fine.elements.is_multiple_of(coarse.elements) {
        return Err(Error::Mesh("trajectories are not nested".into()));
    }
    let r = fine.elements / coarse.elements;
    let h = fine.h();
    let k = coarse.k();
    let mut acc = T::zero();
    for (a, b) in coarse.states[1..].iter().zip(&fine.states[1..]) {
        // exact L2 of the difference of two piecewise-linear functions on the fine mesh
        let val = |j: usize| -> T {
            let (e, s) = (j / r, T::of(j % r) / T::of(r));
            let left = a.u[e];
            let right = if e < coarse.elements { a.u[e + 1] } else { left };
            left + s * (right - left) - b.u[j]
        };
        for j in 0..fine.elements {
            let (d0, d1) = (val(j), val(j + 1));
            acc += k * h * (d0 * d0 + d0 * d1 + d1 * d1) / T::lit(3.0);
        }
    }
    Ok(acc.sqrt())
}

/// Space-time `L^2` norm of `u` (piecewise constant in time).
pub fn l2_norm<T: Real>(traj: &Trajectory<T>) -> T {
    let h = traj.h();
    let k = traj.k();
    let mut acc = T::zero();
    for s in &traj.states[1..] {
        for e in 0..traj.elements {
            let (a, b) = (s.u[e], s.u[e + 1]);
            acc += k * h * (a * a + a * b + b * b) / T::lit(3.0);
        }
    }
    acc.sqrt()
}
