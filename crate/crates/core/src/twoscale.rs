//! Two-scale diagnostics: oscillating test pairings, gap tables, periodic
//! unfolding and corrector errors.
//!
//! Fields are nodal on a uniform mesh of `(0, 1)` whose element count makes
//! `eps/h` an integer. Pairings use the nodal trapezoid rule, which is exact
//! for the periodic factor whenever a period holds at least three nodes.

use std::f64::consts::PI;

use crate::cellsolve::EffectiveLaw;
use crate::error::{Error, Result};
use crate::evolver::{ProblemData, Trajectory};
use crate::scalar::{gauss_legendre_unit, Real};

/// Periodic microscopic factor `rho(y)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Micro {
    One,
    /// `sin(2 pi k y)`.
    Sin(u32),
    /// `cos(2 pi k y)`.
    Cos(u32),
}

impl Micro {
    pub fn eval<T: Real>(&self, y: T) -> T {
        let arg = |k: u32| T::two() * T::lit(PI) * T::of(k as usize) * y;
        match *self {
            Micro::One => T::one(),
            Micro::Sin(k) => arg(k).sin(),
            Micro::Cos(k) => arg(k).cos(),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Micro::One => "1".into(),
            Micro::Sin(k) => format!("sin({k})"),
            Micro::Cos(k) => format!("cos({k})"),
        }
    }
}

/// Test function `psi(x) rho(y) tau(t)` with cubic `psi` and `tau`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoScaleTest<T> {
    /// Coefficients of `psi`, lowest degree first.
    pub psi: [T; 4],
    pub rho: Micro,
    /// Optional time factor, lowest degree first.
    pub time: Option<[T; 4]>,
}

fn horner<T: Real>(c: &[T; 4], x: T) -> T {
    c.iter().rev().fold(T::zero(), |acc, &a| acc * x + a)
}

impl<T: Real> TwoScaleTest<T> {
    pub fn new(psi: [T; 4], rho: Micro) -> Result<Self> {
        if let Micro::Sin(k) | Micro::Cos(k) = rho {
            if !(1..=4).contains(&k) {
                return Err(Error::InvalidParameter(format!("frequency {k} outside 1..=4")));
            }
        }
        Ok(Self {
            psi,
            rho,
            time: None,
        })
    }

    /// `x^degree * rho(y)`.
    pub fn monomial(degree: usize, rho: Micro) -> Result<Self> {
        if degree > 3 {
            return Err(Error::InvalidParameter(format!("degree {degree} above 3")));
        }
        let mut psi = [T::zero(); 4];
        psi[degree] = T::one();
        Self::new(psi, rho)
    }

    /// The fixed family: monomials of degree 0..=3 against `1`, `sin(2 pi k y)`
    /// and `cos(2 pi k y)` for `k = 1..=4`.
    pub fn standard_family() -> Vec<Self> {
        let mut micro = vec![Micro::One];
        for k in 1..=4 {
            micro.push(Micro::Sin(k));
            micro.push(Micro::Cos(k));
        }
        (0..=3)
            .flat_map(|d| micro.iter().map(move |&r| Self::monomial(d, r).unwrap()))
            .collect()
    }

    pub fn psi_at(&self, x: T) -> T {
        horner(&self.psi, x)
    }

    /// `int_a^b tau(t) dt` (the length when there is no time factor).
    pub fn time_integral(&self, a: T, b: T) -> T {
        match &self.time {
            None => b - a,
            Some(c) => {
                let prim = |t: T| {
                    (0..4).fold(T::zero(), |acc, i| {
                        acc + c[i] * t.powi(i as i32 + 1) / T::of(i + 1)
                    })
                };
                prim(b) - prim(a)
            }
        }
    }

    /// Stable identifier used as a table key.
    pub fn id(&self) -> String {
        let psi: Vec<String> = self.psi.iter().map(|c| c.to_string()).collect();
        let mut s = format!("psi=[{}];rho={}", psi.join(" "), self.rho.name());
        if let Some(t) = &self.time {
            let t: Vec<String> = t.iter().map(|c| c.to_string()).collect();
            s.push_str(&format!(";tau=[{}]", t.join(" ")));
        }
        s
    }
}

/// Elements per period, or an error when the mesh does not resolve whole periods.
pub fn period_elements<T: Real>(elements: usize, eps: T) -> Result<usize> {
    if !(eps > T::zero()) {
        return Err(Error::Mesh(format!("period {eps} must be positive")));
    }
    let ratio = eps * T::of(elements);
    let q = ratio.round();
    if q < T::one() || (ratio - q).abs() > T::lit(1e-9) * q {
        return Err(Error::Mesh(format!("eps/h = {ratio} is not an integer")));
    }
    Ok(q.to_usize().unwrap_or(1))
}

fn trapezoid_weight<T: Real>(j: usize, n: usize) -> T {
    let h = T::one() / T::of(n);
    if j == 0 || j == n {
        T::half() * h
    } else {
        h
    }
}

/// `int u_eps(x) psi(x) rho(x/eps) dx` by the nodal trapezoid rule.
pub fn pairing<T: Real>(field: &[T], test: &TwoScaleTest<T>, eps: T) -> Result<T> {
    if field.len() < 2 {
        return Err(Error::Mesh("field needs two or more nodes".into()));
    }
    let n = field.len() - 1;
    let q = period_elements(n, eps)?;
    let h = T::one() / T::of(n);
    Ok((0..=n)
        .map(|j| {
            let x = T::of(j) * h;
            let y = T::of(j % q) / T::of(q);
            trapezoid_weight::<T>(j, n) * field[j] * test.psi_at(x) * test.rho.eval(y)
        })
        .sum())
}

/// Which trajectory component a space-time pairing reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    /// `u`, piecewise constant in time.
    U,
    /// `w`, piecewise linear in time.
    W,
    /// `z` on element midpoints, piecewise constant in time.
    Z,
}

/// Space-time pairing `int_0^T int u psi(x) rho(x/eps) tau(t)`.
pub fn pairing_trajectory<T: Real>(
    traj: &Trajectory<T>,
    component: Component,
    test: &TwoScaleTest<T>,
    eps: T,
) -> Result<T> {
    let n = traj.elements;
    let q = period_elements(n, eps)?;
    let h = traj.h();
    let mut acc = T::zero();
    for step in 1..=traj.steps() {
        let (t0, t1) = (traj.time(step - 1), traj.time(step));
        let s = &traj.states[step];
        match component {
            Component::U => acc += test.time_integral(t0, t1) * pairing(&s.u, test, eps)?,
            Component::W => {
                // linear in time: weights of the two end levels
                // tau times a linear hat is at most quartic
                let k = t1 - t0;
                let (mut a, mut b) = (T::zero(), T::zero());
                for (s, wg) in gauss_legendre_unit::<T>(3) {
                    let t = t0 + s * k;
                    let tau = test.time.as_ref().map_or(T::one(), |c| horner(c, t));
                    a += k * wg * tau * (T::one() - s);
                    b += k * wg * tau * s;
                }
                let prev = &traj.states[step - 1];
                acc += a * pairing(&prev.w, test, eps)? + b * pairing(&s.w, test, eps)?;
            }
            Component::Z => {
                let mut sp = T::zero();
                for (e, &z) in s.z.iter().enumerate() {
                    let x = (T::of(e) + T::half()) * h;
                    let y = (T::of(e % q) + T::half()) / T::of(q);
                    sp += h * z * test.psi_at(x) * test.rho.eval(y);
                }
                acc += test.time_integral(t0, t1) * sp;
            }
        }
    }
    Ok(acc)
}

/// Two-variable field sampled at macroscopic points `x_i` (weights `wx_i`)
/// and cell points `y_j = j/M` (weight `1/M`).
#[derive(Debug, Clone, PartialEq)]
pub struct TwoScaleField<T> {
    pub xs: Vec<T>,
    pub wx: Vec<T>,
    pub m: usize,
    /// `values[i][j] = u(x_i, y_j)`.
    pub values: Vec<Vec<T>>,
    /// Samples belonging to whole periods (all true for analytic limits).
    pub mask: Vec<bool>,
}

impl<T: Real> TwoScaleField<T> {
    /// Samples `f(x, y)` on `elements + 1` trapezoid nodes times `m` cell points.
    pub fn from_fn(elements: usize, m: usize, f: impl Fn(T, T) -> T) -> Self {
        let h = T::one() / T::of(elements);
        let xs: Vec<T> = (0..=elements).map(|i| T::of(i) * h).collect();
        let wx = (0..=elements).map(|i| trapezoid_weight(i, elements)).collect();
        let values = xs
            .iter()
            .map(|&x| (0..m).map(|j| f(x, T::of(j) / T::of(m))).collect())
            .collect();
        Self {
            mask: vec![true; xs.len()],
            xs,
            wx,
            m,
            values,
        }
    }

    /// Cell average `u_hat(x_i)`.
    pub fn average(&self) -> Vec<T> {
        self.values
            .iter()
            .map(|row| row.iter().copied().sum::<T>() / T::of(self.m))
            .collect()
    }

    /// Fluctuation `u - u_hat`.
    pub fn fluctuation(&self) -> Vec<Vec<T>> {
        self.values
            .iter()
            .zip(self.average())
            .map(|(row, a)| row.iter().map(|&v| v - a).collect())
            .collect()
    }

    /// `int int u psi rho` over the unmasked samples.
    pub fn pair_with(&self, test: &TwoScaleTest<T>) -> T {
        let rho: Vec<T> = (0..self.m)
            .map(|j| test.rho.eval(T::of(j) / T::of(self.m)))
            .collect();
        let mut acc = T::zero();
        for (i, row) in self.values.iter().enumerate() {
            if !self.mask[i] {
                continue;
            }
            let inner: T = row.iter().zip(&rho).map(|(&u, &r)| u * r).sum();
            acc += self.wx[i] * test.psi_at(self.xs[i]) * inner / T::of(self.m);
        }
        acc
    }

    /// `L^2(Omega x Y)` norm over the unmasked samples.
    pub fn l2_norm(&self) -> T {
        let mut acc = T::zero();
        for (i, row) in self.values.iter().enumerate() {
            if self.mask[i] {
                acc += self.wx[i] * row.iter().map(|&u| u * u).sum::<T>() / T::of(self.m);
            }
        }
        acc.sqrt()
    }

    /// `L^2(Omega x Y)` distance to `f(x, y)` over the unmasked samples.
    pub fn l2_distance_to(&self, f: impl Fn(T, T) -> T) -> T {
        let mut acc = T::zero();
        for (i, row) in self.values.iter().enumerate() {
            if !self.mask[i] {
                continue;
            }
            let s: T = row
                .iter()
                .enumerate()
                .map(|(j, &u)| {
                    let d = u - f(self.xs[i], T::of(j) / T::of(self.m));
                    d * d
                })
                .sum();
            acc += self.wx[i] * s / T::of(self.m);
        }
        acc.sqrt()
    }

    /// Measure of the unmasked part of `Omega`.
    pub fn covered(&self) -> T {
        self.xs
            .iter()
            .zip(&self.wx)
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|((_, &w), _)| w)
            .sum()
    }
}

/// One row of a gap table.
#[derive(Debug, Clone, PartialEq)]
pub struct GapRow<T> {
    pub eps: T,
    pub test: String,
    pub pairing: T,
    pub limit: T,
    pub gap: T,
}

/// `|pairing(u_eps, test) - <<limit, test>>|` for every field and test.
pub fn twoscale_gap<T: Real>(
    sequence: &[(T, Vec<T>)],
    limit: &TwoScaleField<T>,
    tests: &[TwoScaleTest<T>],
) -> Result<Vec<GapRow<T>>> {
    let mut rows = Vec::with_capacity(sequence.len() * tests.len());
    for (eps, field) in sequence {
        for t in tests {
            let p = pairing(field, t, *eps)?;
            let l = limit.pair_with(t);
            rows.push(GapRow {
                eps: *eps,
                test: t.id(),
                pairing: p,
                limit: l,
                gap: (p - l).abs(),
            });
        }
    }
    Ok(rows)
}

/// Space-time gap table of `u_eps` against a limit that does not depend on
/// `y`; its two-scale pairing is the plain pairing times the cell mean of `rho`.
pub fn trajectory_gap<T: Real>(
    sequence: &[(T, &Trajectory<T>)],
    limit: &Trajectory<T>,
    tests: &[TwoScaleTest<T>],
) -> Result<Vec<GapRow<T>>> {
    let mut rows = Vec::with_capacity(sequence.len() * tests.len());
    for t in tests {
        let l = match t.rho {
            Micro::One => pairing_trajectory(limit, Component::U, t, T::one())?,
            _ => T::zero(),
        };
        for (eps, traj) in sequence {
            let p = pairing_trajectory(traj, Component::U, t, *eps)?;
            rows.push(GapRow {
                eps: *eps,
                test: t.id(),
                pairing: p,
                limit: l,
                gap: (p - l).abs(),
            });
        }
    }
    rows.sort_by(|a, b| b.eps.partial_cmp(&a.eps).unwrap_or(std::cmp::Ordering::Equal));
    Ok(rows)
}

fn eval_pl<T: Real>(field: &[T], x: T) -> T {
    let n = field.len() - 1;
    let s = x * T::of(n);
    let e = s.floor().to_usize().unwrap_or(0).min(n - 1);
    let t = s - T::of(e);
    field[e] + t * (field[e + 1] - field[e])
}

/// Periodic unfolding `U(x, y) = u(eps floor(x/eps) + eps y)` sampled at
/// element midpoints and `y_j = j/m`. Midpoints in a period that sticks out
/// of `(0, 1)` are masked.
pub fn unfold<T: Real>(field: &[T], eps: T, m: usize) -> Result<TwoScaleField<T>> {
    if field.len() < 2 {
        return Err(Error::Mesh("field needs two or more nodes".into()));
    }
    if m == 0 {
        return Err(Error::InvalidParameter("cell resolution must be positive".into()));
    }
    let n = field.len() - 1;
    let q = period_elements(n, eps)?;
    let h = T::one() / T::of(n);
    let mut xs = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    for e in 0..n {
        let x = (T::of(e) + T::half()) * h;
        let cell = e / q;
        let start = T::of(cell * q) * h;
        let whole = (cell + 1) * q <= n;
        xs.push(x);
        mask.push(whole);
        values.push(
            (0..m)
                .map(|j| {
                    let p = start + eps * T::of(j) / T::of(m);
                    if whole {
                        eval_pl(field, p.min(T::one()))
                    } else {
                        T::zero()
                    }
                })
                .collect(),
        );
    }
    Ok(TwoScaleField {
        xs,
        wx: vec![h; n],
        m,
        values,
        mask,
    })
}

/// Exact `L^2(0, 1)` norm of a nodal piecewise-linear field.
pub fn l2_norm_nodal<T: Real>(field: &[T]) -> T {
    let h = T::one() / T::of(field.len() - 1);
    field
        .windows(2)
        .map(|w| h * (w[0] * w[0] + w[0] * w[1] + w[1] * w[1]) / T::lit(3.0))
        .sum::<T>()
        .sqrt()
}

/// `|| u_x^eps - (u_hom_x + v*(u_hom_x, x/eps)) ||_{L^2(Omega_T)}` with the
/// corrector `v*` read from the law. `u_hom` may live on any mesh; its
/// gradient is taken over each element of the `eps` mesh.
pub fn corrector_error<T: Real>(
    traj_eps: &Trajectory<T>,
    data_eps: &ProblemData<T>,
    u_hom: &Trajectory<T>,
    law: &EffectiveLaw<T>,
) -> Result<T> {
    let ne = traj_eps.elements;
    if data_eps.elements != ne || data_eps.eps().is_none() {
        return Err(Error::Mesh("corrector error needs the eps-problem data".into()));
    }
    if u_hom.steps() != traj_eps.steps() {
        return Err(Error::Mesh("trajectories use different time steps".into()));
    }
    let h = traj_eps.h();
    let k = traj_eps.k();
    let mut acc = T::zero();
    for (a, b) in traj_eps.states[1..].iter().zip(&u_hom.states[1..]) {
        for e in 0..ne {
            let x0 = T::of(e) * h;
            let x1 = T::of(e + 1) * h;
            let xi = (eval_pl(&b.u, x1) - eval_pl(&b.u, x0)) / h;
            let target = xi + law.corrector_at(xi, data_eps.mid_y(e))?;
            let d = (a.u[e + 1] - a.u[e]) / h - target;
            acc += k * h * d * d;
        }
    }
    Ok(acc.sqrt())
}

/// `min_eps ||u_eps|| - ||limit||`: nonnegative up to the gap tolerance
/// when the computed family respects norm lower semicontinuity.
pub fn lsc_witness<T: Real>(norms: &[T], limit_norm: T) -> T {
    norms.iter().copied().fold(T::infinity(), T::min) - limit_norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nodal(n: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
        (0..=n).map(|j| f(j as f64 / n as f64)).collect()
    }

    #[test]
    fn oscillating_pairing_tends_to_quarter() {
        let test = TwoScaleTest::monomial(0, Micro::Sin(1)).unwrap();
        for q in [16usize, 32, 64] {
            let eps = 1.0 / q as f64;
            let n = 16 * q;
            let u = nodal(n, |x| x * (2.0 * PI * x / eps).sin());
            let gap = (pairing(&u, &test, eps).unwrap() - 0.25).abs();
            assert!(gap <= 1e-3, "{gap}");
        }
    }

    #[test]
    fn constant_field_pairs_exactly() {
        let test = TwoScaleTest::new([1.0f64, 2.0, 0.0, 0.0], Micro::One).unwrap();
        let u = vec![3.0; 65];
        let p = pairing(&u, &test, 1.0 / 4.0).unwrap();
        assert!((p - 3.0 * 2.0).abs() < 1e-14);
    }

    #[test]
    fn pure_oscillation_pairs_to_zero() {
        let test = TwoScaleTest::monomial(0, Micro::One).unwrap();
        let u = nodal(256, |x| (2.0 * PI * x * 16.0).sin());
        assert!(pairing(&u, &test, 1.0 / 16.0).unwrap().abs() < 1e-14);
    }

    #[test]
    fn incompatible_mesh_rejected() {
        let test = TwoScaleTest::monomial(0, Micro::One).unwrap();
        assert!(matches!(
            pairing(&vec![0.0; 101], &test, 1.0 / 16.0),
            Err(Error::Mesh(_))
        ));
        assert!(TwoScaleTest::<f64>::monomial(4, Micro::One).is_err());
        assert!(TwoScaleTest::<f64>::monomial(1, Micro::Cos(5)).is_err());
    }

    #[test]
    fn time_weights_integrate_linear_interpolant() {
        let mut t = TwoScaleTest::<f64>::monomial(0, Micro::One).unwrap();
        t.time = Some([0.0, 0.0, 0.0, 1.0]);
        let mut half = 0.0f64;
        let h = 0.5f64;
        for (s, wg) in gauss_legendre_unit::<f64>(3) {
            half += h * wg * (s * h).powi(3) * s;
        }
        // int_0^h t^3 (t/h) dt = h^4/5
        assert!((half - h.powi(4) / 5.0).abs() < 1e-15, "{half}");
        assert!((t.time_integral(0.0, 1.0) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn standard_family_size() {
        assert_eq!(TwoScaleTest::<f64>::standard_family().len(), 36);
    }

    #[test]
    fn decomposition_is_exact() {
        let f = TwoScaleField::from_fn(32, 16, |x: f64, y| x * x + (2.0 * PI * y).cos() * x);
        let avg = f.average();
        let fl = f.fluctuation();
        for i in 0..f.xs.len() {
            let mean: f64 = fl[i].iter().sum::<f64>() / 16.0;
            assert!(mean.abs() <= 1e-12);
            for j in 0..16 {
                assert!((avg[i] + fl[i][j] - f.values[i][j]).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn unfolding_examples() {
        let eps = 1.0 / 8.0;
        let n = 128;
        let rho = nodal(n, |x| (2.0 * PI * x / eps).cos());
        let uf = unfold(&rho, eps, 16).unwrap();
        for row in &uf.values {
            for (j, &v) in row.iter().enumerate() {
                assert!((v - (2.0 * PI * j as f64 / 16.0).cos()).abs() < 1e-12);
            }
        }
        let id = nodal(n, |x| x);
        let uf = unfold(&id, eps, 16).unwrap();
        assert!(uf.l2_distance_to(|x, _| x) <= eps);
        let norm_gap = (uf.l2_norm() - l2_norm_nodal(&id)).abs();
        assert!(norm_gap <= eps * 1.0, "{norm_gap}");
    }

    #[test]
    fn unfolding_masks_partial_periods() {
        // 1/eps = 2.5: the last half period is discarded
        let n = 40;
        let eps = 0.4;
        let u = nodal(n, |x| x);
        let uf = unfold(&u, eps, 16).unwrap();
        assert!((uf.covered() - 0.8).abs() < 1e-12);
        let bound = (1.0 - uf.covered() + eps) * 1.0;
        assert!((uf.l2_norm() - l2_norm_nodal(&u)).abs() <= bound);
    }

    #[test]
    fn weak_limit_consistency() {
        let limit = TwoScaleField::from_fn(256, 32, |x: f64, y| x * (2.0 * PI * y).sin() + x * x);
        let test = TwoScaleTest::monomial(1, Micro::One).unwrap();
        let avg = limit.average();
        let direct: f64 = avg
            .iter()
            .enumerate()
            .map(|(i, a)| limit.wx[i] * a * limit.xs[i])
            .sum();
        assert!((limit.pair_with(&test) - direct).abs() < 1e-14);
    }
}
