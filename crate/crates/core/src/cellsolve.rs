//! Periodic cell problems on `Y = (0,1)^N` and tabulated effective laws.
//!
//! In 1D the cell is sampled at centres `y_j = (j + 1/2)/M` with weight
//! `1/M`. The primal problem minimizes the cell average of
//! `phi(xi + v_j, y_j)` over zero-mean `v`; the dual problem is a plain
//! average because the divergence-free zero-mean space is trivial.
//!
//! In 2D (quadratic media only) a staggered periodic grid is used: scalar
//! potentials live on nodes `(i, j)/M`, gradients on faces. Divergence-free
//! fields are curls of a vertex stream function, so the gradient and curl
//! spaces are orthogonal exactly, not just up to truncation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::convexcore::{conjugate, Clip, Eval, Potential, Preset};
use crate::error::{Error, Result};
use crate::fitz::{RepresentativeFn, StateConjugate};
use crate::scalar::Real;

/// Uniform periodic sampling of the unit cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellGrid<T> {
    dim: usize,
    m: usize,
    _scalar: std::marker::PhantomData<T>,
}

impl<T: Real> CellGrid<T> {
    pub fn new(dim: usize, m: usize) -> Result<Self> {
        if !(dim == 1 || dim == 2) {
            return Err(Error::InvalidParameter(format!("cell dimension {dim} (1 or 2)")));
        }
        if m < 2 {
            return Err(Error::InvalidParameter(format!("cell resolution {m} < 2")));
        }
        Ok(Self {
            dim,
            m,
            _scalar: std::marker::PhantomData,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Nodes per side.
    pub fn m(&self) -> usize {
        self.m
    }

    /// Number of sample points (`M^N`).
    pub fn len(&self) -> usize {
        self.m.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Quadrature weight of each sample (uniform, summing to 1).
    pub fn weight(&self) -> T {
        T::one() / T::of(self.len())
    }

    /// 1D cell centres `(j + 1/2)/M`.
    pub fn centres(&self) -> Vec<T> {
        (0..self.m)
            .map(|j| (T::of(j) + T::half()) / T::of(self.m))
            .collect()
    }

    /// Index of the 1D cell containing `y` (taken modulo 1).
    pub fn cell_of(&self, y: T) -> usize {
        let j = (y.frac01() * T::of(self.m)).floor().to_usize().unwrap_or(0);
        j.min(self.m - 1)
    }
}

/// Sparse vector as sorted `(index, value)` pairs.
pub type SparseVec<T> = Vec<(usize, T)>;

/// Bases of the discrete gradient space `W` and the discrete divergence-free
/// space `Z`, both with zero cell average.
///
/// In 1D the vectors are nodal fields of length `M`; in 2D they live on the
/// `2 M^2` faces (x-faces first).
#[derive(Debug, Clone, PartialEq)]
pub struct WZBases<T> {
    pub w: Vec<SparseVec<T>>,
    pub z: Vec<SparseVec<T>>,
    /// Length of the dense vectors.
    pub len: usize,
    dim: usize,
    m: usize,
}

fn sparse<T: Real>(mut entries: Vec<(usize, T)>) -> SparseVec<T> {
    entries.sort_by_key(|e| e.0);
    let mut out: SparseVec<T> = Vec::with_capacity(entries.len());
    for (i, v) in entries {
        match out.last_mut() {
            Some(last) if last.0 == i => last.1 += v,
            _ => out.push((i, v)),
        }
    }
    out.retain(|e| e.1 != T::zero());
    out
}

fn sparse_dot<T: Real>(a: &SparseVec<T>, b: &SparseVec<T>) -> T {
    let (mut i, mut j, mut acc) = (0, 0, T::zero());
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                acc += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    acc
}

/// Builds the `W` and `Z` bases: in 1D, `e_j - e_{M-1}` and nothing; in 2D,
/// gradients of node deltas and curls of vertex deltas (one of each dropped
/// to remove the constant kernel).
pub fn build_wz_bases<T: Real>(grid: &CellGrid<T>) -> WZBases<T> {
    let m = grid.m();
    if grid.dim() == 1 {
        let w = (0..m - 1)
            .map(|j| sparse(vec![(j, T::one()), (m - 1, -T::one())]))
            .collect();
        return WZBases {
            w,
            z: Vec::new(),
            len: m,
            dim: 1,
            m,
        };
    }
    let mt = T::of(m);
    let xf = |i: usize, j: usize| (i % m) * m + (j % m);
    let yf = |i: usize, j: usize| m * m + (i % m) * m + (j % m);
    let mut w = Vec::with_capacity(m * m - 1);
    let mut z = Vec::with_capacity(m * m - 1);
    for i in 0..m {
        for j in 0..m {
            if i == m - 1 && j == m - 1 {
                continue;
            }
            // gradient of the delta at node (i, j)
            w.push(sparse(vec![
                (xf(i + m - 1, j), mt),
                (xf(i, j), -mt),
                (yf(i, j + m - 1), mt),
                (yf(i, j), -mt),
            ]));
            // curl of the delta at vertex (i + 1/2, j + 1/2)
            z.push(sparse(vec![
                (xf(i, j), mt),
                (xf(i, j + 1), -mt),
                (yf(i, j), -mt),
                (yf(i + 1, j), mt),
            ]));
        }
    }
    WZBases {
        w,
        z,
        len: 2 * m * m,
        dim: 2,
        m,
    }
}

impl<T: Real> WZBases<T> {
    /// Quadrature inner product (uniform weight per node or face pair).
    pub fn inner(&self, a: &SparseVec<T>, b: &SparseVec<T>) -> T {
        let w = T::one() / T::of(self.m.pow(self.dim as u32));
        sparse_dot(a, b) * w
    }

    /// Cell average of a field: one component in 1D, `(x, y)` in 2D.
    pub fn mean(&self, a: &SparseVec<T>) -> [T; 2] {
        let cells = T::of(self.m.pow(self.dim as u32));
        let mut out = [T::zero(); 2];
        for &(i, v) in a {
            let comp = if self.dim == 2 && i >= self.m * self.m { 1 } else { 0 };
            out[comp] += v;
        }
        [out[0] / cells, out[1] / cells]
    }

    /// Discrete divergence at every node (2D) or the periodic difference (1D).
    pub fn divergence(&self, a: &SparseVec<T>) -> Vec<T> {
        let m = self.m;
        let mt = T::of(m);
        let mut dense = vec![T::zero(); self.len];
        for &(i, v) in a {
            dense[i] = v;
        }
        if self.dim == 1 {
            return (0..m)
                .map(|j| mt * (dense[(j + 1) % m] - dense[j]))
                .collect();
        }
        let mut div = vec![T::zero(); m * m];
        for i in 0..m {
            for j in 0..m {
                let ip = (i + m - 1) % m;
                let jp = (j + m - 1) % m;
                div[i * m + j] = mt
                    * (dense[i * m + j] - dense[ip * m + j] + dense[m * m + i * m + j]
                        - dense[m * m + i * m + jp]);
            }
        }
        div
    }

    /// `max |<w_i, z_j>|` over all pairs. Only pairs sharing a face can be
    /// nonzero, so the scan goes through a face adjacency map.
    pub fn max_cross_inner_product(&self) -> T {
        let mut z_on_face: Vec<Vec<usize>> = vec![Vec::new(); self.len];
        for (k, zv) in self.z.iter().enumerate() {
            for &(f, _) in zv {
                z_on_face[f].push(k);
            }
        }
        let mut best = T::zero();
        for wv in &self.w {
            let mut partners: Vec<usize> = wv
                .iter()
                .flat_map(|&(f, _)| z_on_face[f].iter().copied())
                .collect();
            partners.sort_unstable();
            partners.dedup();
            for k in partners {
                best = best.max(self.inner(wv, &self.z[k]).abs());
            }
        }
        best
    }
}

/// Iteration controls for cell solves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellOptions<T> {
    /// Relative stopping tolerance on the projected gradient.
    pub tol: T,
    pub max_iter: usize,
    /// Smoothing schedule for kinked or singular integrands.
    pub lambda_start: T,
    pub lambda_min: T,
}

impl<T: Real> Default for CellOptions<T> {
    fn default() -> Self {
        Self {
            tol: T::lit(1e-12),
            max_iter: 200,
            lambda_start: T::lit(1e-2),
            lambda_min: T::lit(1e-9),
        }
    }
}

/// Result of a primal cell solve.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSolution<T> {
    /// `phi_0(xi)`.
    pub phi0: T,
    /// Corrector `v*` at the cell centres (zero mean).
    pub corrector: Vec<T>,
    /// Cell-averaged flux of the minimizer, `gamma_0(xi)`.
    pub flux: T,
    /// Lagrange multiplier of the zero-mean constraint.
    pub multiplier: T,
    pub iterations: usize,
}

/// Minimizes `mean_j phi(xi + v_j, y_j)` over zero-mean `v` (1D).
pub fn solve_cell_primal<T: Real>(
    preset: &Preset<T>,
    xi: T,
    grid: &CellGrid<T>,
    opts: &CellOptions<T>,
) -> Result<CellSolution<T>> {
    preset.validate()?;
    if grid.dim() != 1 {
        return Err(Error::Unsupported(
            "nonlinear cell problems are one-dimensional; use effective_tensor_2d".into(),
        ));
    }
    let ys = grid.centres();
    let n = ys.len();
    let w = grid.weight();

    if preset.is_quadratic() && preset.is_smooth() {
        // flux is constant: mu = xi / mean(1/a)
        let inv: Vec<T> = ys.iter().map(|&y| T::one() / preset.coefficient(y)).collect();
        let mean_inv = inv.iter().copied().sum::<T>() * w;
        let mu = xi / mean_inv;
        let zeta: Vec<T> = inv.iter().map(|&c| mu * c).collect();
        return Ok(finish(preset, xi, &ys, zeta, mu, w, 1));
    }

    let mut zeta = vec![xi; n];
    let schedule: Vec<T> = if preset.newton_ready() {
        vec![T::zero()]
    } else {
        let mut s = Vec::new();
        let mut l = opts.lambda_start;
        while l >= opts.lambda_min {
            s.push(l);
            l *= T::lit(0.1);
        }
        s
    };
    let mut total = 0;
    let mut mu = T::zero();
    for &lambda in &schedule {
        let (m, it) = newton_zero_mean(preset, &ys, &mut zeta, lambda, opts)?;
        mu = m;
        total += it;
    }
    Ok(finish(preset, xi, &ys, zeta, mu, w, total))
}

fn finish<T: Real>(
    preset: &Preset<T>,
    xi: T,
    ys: &[T],
    zeta: Vec<T>,
    mu: T,
    w: T,
    iterations: usize,
) -> CellSolution<T> {
    let phi0 = ys
        .iter()
        .zip(&zeta)
        .map(|(&y, &z)| preset.value(z, y))
        .sum::<T>()
        * w;
    let flux = ys
        .iter()
        .zip(&zeta)
        .map(|(&y, &z)| preset.subdifferential(z, y).project(mu))
        .sum::<T>()
        * w;
    CellSolution {
        phi0,
        corrector: zeta.iter().map(|&z| z - xi).collect(),
        flux,
        multiplier: mu,
        iterations,
    }
}

/// Damped Newton for `min sum_j f_j(zeta_j)` subject to a fixed `sum zeta_j`,
/// with `f_j` the Moreau envelope of `phi(., y_j)`. The diagonal Hessian makes
/// the constrained step explicit.
fn newton_zero_mean<T: Real>(
    preset: &Preset<T>,
    ys: &[T],
    zeta: &mut [T],
    lambda: T,
    opts: &CellOptions<T>,
) -> Result<(T, usize)> {
    let n = T::of(ys.len());
    let energy = |z: &[T]| -> T {
        ys.iter()
            .zip(z)
            .map(|(&y, &v)| preset.moreau(v, y, lambda).value)
            .sum()
    };
    let mut history = Vec::new();
    let mut f = energy(zeta);
    for it in 0..opts.max_iter {
        let s: Vec<_> = ys
            .iter()
            .zip(zeta.iter())
            .map(|(&y, &v)| preset.moreau(v, y, lambda))
            .collect();
        let gmean = s.iter().map(|e| e.slope).sum::<T>() / n;
        let gscale = s.iter().map(|e| e.slope.abs()).fold(T::zero(), T::max);
        let res = s
            .iter()
            .map(|e| (e.slope - gmean).abs())
            .fold(T::zero(), T::max);
        history.push(res.as_f64());
        if res <= opts.tol * (T::one() + gscale) {
            return Ok((gmean, it));
        }
        let hmax = s.iter().map(|e| e.curvature).fold(T::zero(), T::max);
        let floor = T::lit(1e-14) * (T::one() + hmax);
        let h: Vec<T> = s.iter().map(|e| e.curvature.max(floor)).collect();
        let mu = s.iter().zip(&h).map(|(e, &c)| e.slope / c).sum::<T>()
            / h.iter().map(|&c| T::one() / c).sum::<T>();
        let d: Vec<T> = s.iter().zip(&h).map(|(e, &c)| -(e.slope - mu) / c).collect();
        let slope0: T = s.iter().zip(&d).map(|(e, &di)| e.slope * di).sum();
        if -slope0 <= T::lit(16.0) * T::epsilon() * f.abs() {
            return Ok((gmean, it));
        }
        let mut t = T::one();
        let mut trial = zeta.to_vec();
        let mut accepted = false;
        for _ in 0..60 {
            for ((tr, &z), &di) in trial.iter_mut().zip(zeta.iter()).zip(&d) {
                *tr = z + t * di;
            }
            let ft = energy(&trial);
            if ft <= f + T::lit(1e-4) * t * slope0 || (ft - f).abs() <= T::epsilon() * f.abs() {
                f = ft;
                accepted = true;
                break;
            }
            t *= T::half();
        }
        if !accepted {
            return Err(Error::NoConvergence {
                solver: "cell newton (line search)",
                iterations: it,
                residual: res.as_f64(),
                history,
            });
        }
        zeta.copy_from_slice(&trial);
    }
    Err(Error::NoConvergence {
        solver: "cell newton",
        iterations: opts.max_iter,
        residual: history.last().copied().unwrap_or(f64::NAN),
        history,
    })
}

/// `psi_0(eta) = mean_j phi*(eta, y_j)` (1D, where `Z = {0}`).
pub fn solve_cell_dual<T: Real>(preset: &Preset<T>, eta: T, grid: &CellGrid<T>) -> Result<Eval<T>> {
    preset.validate()?;
    if grid.dim() != 1 {
        return Err(Error::Unsupported(
            "dual cell problems are one-dimensional; use effective_tensor_2d".into(),
        ));
    }
    let w = grid.weight();
    let mut acc = T::zero();
    for y in grid.centres() {
        let e = preset.conjugate(eta, y);
        if e.is_clipped() {
            return Ok(e);
        }
        acc += e.value;
    }
    Ok(Eval::finite(acc * w))
}

/// `F_0(xi, eta) = inf_{v in W} mean_j f(xi + v_j, eta, y_j)` (1D).
///
/// Computed through duality in the first argument: `F_0` is the conjugate at
/// `xi` of the cell average of the partial conjugates `mu -> f_j^*(mu; eta)`.
/// For Fenchel representatives this is `phi_0(xi) + psi_0(eta)` evaluated
/// through the partial conjugates; for Fitzpatrick representatives the
/// partial conjugates are piecewise linear and the supremum is attained at a
/// breakpoint.
pub fn f0_eval<T: Real, F>(rep_at: F, xi: T, eta: T, grid: &CellGrid<T>) -> Result<T>
where
    F: Fn(T) -> Result<RepresentativeFn<T>>,
{
    if grid.dim() != 1 {
        return Err(Error::Unsupported("F0 is tabulated in 1D only".into()));
    }
    // group consecutive identical representatives with their weights
    let mut groups: Vec<(RepresentativeFn<T>, T)> = Vec::new();
    for y in grid.centres() {
        let rep = rep_at(y)?;
        match groups.last_mut() {
            Some((r, wgt)) if *r == rep => *wgt += grid.weight(),
            _ => groups.push((rep, grid.weight())),
        }
    }
    let tol = groups
        .iter()
        .map(|(r, _)| r.tol)
        .fold(T::zero(), T::max);
    let conj: Vec<(StateConjugate<'_, T>, T)> = groups
        .iter()
        .map(|(r, w)| Ok((r.state_conjugate(eta)?, *w)))
        .collect::<Result<_>>()?;

    let value = if conj.iter().all(|(c, _)| matches!(c, StateConjugate::Hull(_))) {
        let mut breaks: Vec<T> = Vec::new();
        let (mut lo, mut hi) = (T::neg_infinity(), T::infinity());
        for (c, _) in &conj {
            if let StateConjugate::Hull(p) = c {
                breaks.extend_from_slice(p.grid());
                let (a, b) = p.hull();
                lo = lo.max(a);
                hi = hi.min(b);
            }
        }
        if lo > hi {
            return Err(Error::InvalidParameter(
                "graphs have disjoint flux ranges".into(),
            ));
        }
        breaks.retain(|&b| b >= lo && b <= hi);
        breaks.push(lo);
        breaks.push(hi);
        let mut best = T::neg_infinity();
        for mu in breaks {
            let g = mean_eval(&conj, mu)?;
            best = best.max(mu * xi - g);
        }
        best
    } else {
        dual_sup_smooth(&conj, xi)?
    };
    if value < xi * eta - tol {
        return Err(Error::Representation {
            violation: (xi * eta - value).as_f64(),
            tol: tol.as_f64(),
        });
    }
    Ok(value)
}

fn mean_eval<T: Real>(conj: &[(StateConjugate<'_, T>, T)], mu: T) -> Result<T> {
    let mut acc = T::zero();
    for (c, w) in conj {
        let e = c.eval(mu)?;
        if e.is_clipped() {
            return Err(Error::Clipped);
        }
        acc += *w * e.value;
    }
    Ok(acc)
}

/// `sup_mu mu xi - G(mu)` for a convex `G` given by analytic conjugates:
/// bracket the stationary point of the concave objective, then golden-section.
fn dual_sup_smooth<T: Real>(conj: &[(StateConjugate<'_, T>, T)], xi: T) -> Result<T> {
    let obj = |mu: T| -> Option<T> { mean_eval(conj, mu).ok().map(|g| mu * xi - g) };
    // expand a bracket around 0 while the objective keeps increasing
    let mut step = T::one();
    let mut a = T::zero();
    let fa = obj(a).ok_or(Error::Clipped)?;
    let dir = match (obj(step), obj(-step)) {
        (Some(p), _) if p > fa => T::one(),
        (_, Some(m)) if m > fa => -T::one(),
        _ => {
            return golden(&obj, -step, step);
        }
    };
    let mut b = a + dir * step;
    let mut fb = obj(b).ok_or(Error::Clipped)?;
    for _ in 0..200 {
        step *= T::two();
        let c = b + dir * step;
        match obj(c) {
            Some(fc) if fc > fb => {
                a = b;
                b = c;
                fb = fc;
            }
            Some(_) => return golden(&obj, a.min(c), a.max(c)),
            // edge of the dual domain: the sup is inside [a, last finite]
            None => {
                let mut lo = b;
                let mut hi = c;
                for _ in 0..200 {
                    let mid = T::half() * (lo + hi);
                    if obj(mid).is_some() {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                return golden(&obj, a.min(lo), a.max(lo));
            }
        }
    }
    Err(Error::NoConvergence {
        solver: "F0 bracket",
        iterations: 200,
        residual: f64::NAN,
        history: Vec::new(),
    })
}

fn golden<T: Real>(obj: &dyn Fn(T) -> Option<T>, mut a: T, mut b: T) -> Result<T> {
    let r = T::lit(0.618_033_988_749_894_8);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let mut fc = obj(c).ok_or(Error::Clipped)?;
    let mut fd = obj(d).ok_or(Error::Clipped)?;
    for _ in 0..300 {
        if (b - a).abs() <= T::epsilon() * (T::one() + a.abs() + b.abs()) {
            break;
        }
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = obj(c).ok_or(Error::Clipped)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = obj(d).ok_or(Error::Clipped)?;
        }
    }
    let ends = [obj(a), obj(b)];
    Ok(ends
        .iter()
        .flatten()
        .copied()
        .fold(fc.max(fd), T::max))
}

/// Closed-form coefficients of a two-phase layered medium.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaminateCoefficients<T> {
    /// Across the layers: `(theta a1^{-1/(p-1)} + (1-theta) a2^{-1/(p-1)})^{-(p-1)}`.
    pub across: T,
    /// Along the layers: `theta a1 + (1-theta) a2`.
    pub along: T,
}

pub fn laminate_oracle<T: Real>(a1: T, a2: T, theta: T, p: T) -> Result<LaminateCoefficients<T>> {
    if !(a1 > T::zero() && a2 > T::zero()) {
        return Err(Error::InvalidParameter("laminate coefficients must be positive".into()));
    }
    if !(theta > T::zero() && theta < T::one()) {
        return Err(Error::InvalidParameter(format!("layer fraction {theta} outside (0,1)")));
    }
    if !(p > T::one()) {
        return Err(Error::InvalidParameter(format!("exponent {p} must exceed 1")));
    }
    let e = -T::one() / (p - T::one());
    let mean = theta * a1.powf(e) + (T::one() - theta) * a2.powf(e);
    Ok(LaminateCoefficients {
        across: mean.powf(-(p - T::one())),
        along: theta * a1 + (T::one() - theta) * a2,
    })
}

/// Effective tensor of the 2D cell problem for a quadratic preset with
/// coefficient `a(y_1)`. Solves `D^T A (xi + D p) = 0` for `xi = e_1, e_2`
/// by conjugate gradients and averages the flux.
pub fn effective_tensor_2d<T: Real>(
    preset: &Preset<T>,
    grid: &CellGrid<T>,
    opts: &CellOptions<T>,
) -> Result<[[T; 2]; 2]> {
    preset.validate()?;
    if grid.dim() != 2 {
        return Err(Error::InvalidParameter("effective_tensor_2d needs a 2D cell".into()));
    }
    if !(preset.is_quadratic() && preset.is_smooth()) {
        return Err(Error::Unsupported("2D cell problems need a quadratic preset".into()));
    }
    let m = grid.m();
    let mt = T::of(m);
    // x-faces sit at y1 = (i + 1/2)/M, y-faces at y1 = i/M
    let ax: Vec<T> = (0..m)
        .map(|i| preset.coefficient((T::of(i) + T::half()) / mt))
        .collect();
    let ay: Vec<T> = (0..m).map(|i| preset.coefficient(T::of(i) / mt)).collect();
    let idx = |i: usize, j: usize| (i % m) * m + (j % m);

    // flux of the gradient field of p plus the constant xi
    let flux = |p: &[T], xi: [T; 2]| -> (Vec<T>, Vec<T>) {
        let mut fx = vec![T::zero(); m * m];
        let mut fy = vec![T::zero(); m * m];
        for i in 0..m {
            for j in 0..m {
                let gx = mt * (p[idx(i + 1, j)] - p[idx(i, j)]) + xi[0];
                let gy = mt * (p[idx(i, j + 1)] - p[idx(i, j)]) + xi[1];
                fx[idx(i, j)] = ax[i] * gx;
                fy[idx(i, j)] = ay[i] * gy;
            }
        }
        (fx, fy)
    };
    // -div of a face field, as node values
    let neg_div = |fx: &[T], fy: &[T]| -> Vec<T> {
        let mut out = vec![T::zero(); m * m];
        for i in 0..m {
            for j in 0..m {
                out[idx(i, j)] = mt
                    * (fx[idx(i + m - 1, j)] - fx[idx(i, j)] + fy[idx(i, j + m - 1)]
                        - fy[idx(i, j)]);
            }
        }
        out
    };
    let project = |v: &mut Vec<T>| {
        let mean = v.iter().copied().sum::<T>() / T::of(v.len());
        v.iter_mut().for_each(|x| *x -= mean);
    };
    let dot = |a: &[T], b: &[T]| a.iter().zip(b).map(|(&x, &y)| x * y).sum::<T>();

    let mut tensor = [[T::zero(); 2]; 2];
    for (col, xi) in [[T::one(), T::zero()], [T::zero(), T::one()]].into_iter().enumerate() {
        let zero = vec![T::zero(); m * m];
        let (fx, fy) = flux(&zero, xi);
        // K p = b with K p = -div(A D p), b = div(A xi)
        let mut b = neg_div(&fx, &fy);
        b.iter_mut().for_each(|x| *x = -*x);
        project(&mut b);
        let apply = |p: &[T]| {
            let (fx, fy) = flux(p, [T::zero(), T::zero()]);
            let mut out = neg_div(&fx, &fy);
            project(&mut out);
            out
        };
        let mut p = vec![T::zero(); m * m];
        let mut r = b.clone();
        let mut d = r.clone();
        let mut rr = dot(&r, &r);
        let bnorm = rr.sqrt();
        let mut history = Vec::new();
        let mut converged = bnorm == T::zero();
        for _ in 0..opts.max_iter.max(20 * m * m) {
            if converged {
                break;
            }
            let kd = apply(&d);
            let alpha = rr / dot(&d, &kd);
            p.iter_mut().zip(&d).for_each(|(x, &y)| *x += alpha * y);
            r.iter_mut().zip(&kd).for_each(|(x, &y)| *x -= alpha * y);
            let rr_new = dot(&r, &r);
            history.push(rr_new.sqrt().as_f64());
            if rr_new.sqrt() <= opts.tol * bnorm {
                converged = true;
                break;
            }
            let beta = rr_new / rr;
            rr = rr_new;
            d.iter_mut().zip(&r).for_each(|(x, &y)| *x = y + beta * *x);
        }
        if !converged {
            return Err(Error::NoConvergence {
                solver: "cell conjugate gradients",
                iterations: history.len(),
                residual: history.last().copied().unwrap_or(f64::NAN),
                history,
            });
        }
        let (fx, fy) = flux(&p, xi);
        let cells = T::of(m * m);
        tensor[0][col] = fx.iter().copied().sum::<T>() / cells;
        tensor[1][col] = fy.iter().copied().sum::<T>() / cells;
    }
    Ok(tensor)
}

/// Options for [`tabulate_effective_law`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TabulateOptions<T> {
    pub cell: CellOptions<T>,
    /// Tabulate `F_0` on the `xi x eta` product (Fenchel representative).
    pub with_f0: bool,
    /// Keep the cell corrector of every `xi`.
    pub with_correctors: bool,
}

impl<T: Real> Default for TabulateOptions<T> {
    fn default() -> Self {
        Self {
            cell: CellOptions::default(),
            with_f0: false,
            with_correctors: true,
        }
    }
}

/// Tabulated effective law `(phi_0, gamma_0, psi_0)` and optional `F_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveLaw<T> {
    pub preset: Preset<T>,
    pub xi: Vec<T>,
    pub phi0: Vec<T>,
    pub gamma0: Vec<T>,
    /// Flux grid restricted to the dual domain (finite `psi_0`).
    pub eta: Vec<T>,
    pub psi0: Vec<T>,
    /// `f0[i][j] = F_0(xi_i, eta_j)`.
    pub f0: Option<Vec<Vec<T>>>,
    /// `correctors[i][j]`: corrector at `xi_i` on cell centre `j`.
    pub correctors: Option<Vec<Vec<T>>>,
    /// Cell resolution.
    pub m: usize,
    /// `max |psi_0 - conjugate(phi_0)|` over the flux grid.
    pub conjugacy_gap: T,
    /// Extra metadata carried through persistence.
    pub meta: BTreeMap<String, String>,
}

/// Fills an [`EffectiveLaw`] by repeated 1D cell solves.
pub fn tabulate_effective_law<T: Real>(
    preset: &Preset<T>,
    xi_grid: &[T],
    eta_grid: &[T],
    grid: &CellGrid<T>,
    opts: &TabulateOptions<T>,
) -> Result<EffectiveLaw<T>> {
    for g in [xi_grid, eta_grid] {
        if crate::scalar::first_non_increasing(g).is_some() || g.is_empty() {
            return Err(Error::InvalidParameter("table grids must be strictly increasing".into()));
        }
        let (lo, hi) = (g[0], g[g.len() - 1]);
        if (lo + hi).abs() > T::lit(1e-12) * (T::one() + hi.abs()) {
            return Err(Error::InvalidParameter("table grids must be symmetric about 0".into()));
        }
    }
    let mut phi0 = Vec::with_capacity(xi_grid.len());
    let mut gamma0 = Vec::with_capacity(xi_grid.len());
    let mut correctors = Vec::new();
    for &xi in xi_grid {
        let sol = solve_cell_primal(preset, xi, grid, &opts.cell).map_err(|e| match e {
            Error::NoConvergence {
                solver,
                iterations,
                residual,
                history,
            } => Error::NoConvergence {
                solver,
                iterations,
                residual,
                history,
            },
            other => Error::InvalidParameter(format!("cell solve at xi = {xi}: {other}")),
        })?;
        phi0.push(sol.phi0);
        gamma0.push(sol.flux);
        if opts.with_correctors {
            correctors.push(sol.corrector);
        }
    }
    let mut eta = Vec::new();
    let mut psi0 = Vec::new();
    for &e in eta_grid {
        let v = solve_cell_dual(preset, e, grid)?;
        if v.clip == Clip::None {
            eta.push(e);
            psi0.push(v.value);
        }
    }
    let table = Potential::sampled(xi_grid.to_vec(), phi0.clone())?;
    let conjugacy_gap = if eta.is_empty() {
        T::zero()
    } else {
        let conj = conjugate(&table, &eta)?;
        conj.values()
            .iter()
            .zip(&psi0)
            .map(|(&c, &p)| (c - p).abs())
            .fold(T::zero(), T::max)
    };
    let f0 = opts.with_f0.then(|| {
        phi0.iter()
            .map(|&f| psi0.iter().map(|&g| f + g).collect())
            .collect()
    });
    Ok(EffectiveLaw {
        preset: *preset,
        xi: xi_grid.to_vec(),
        phi0,
        gamma0,
        eta,
        psi0,
        f0,
        correctors: opts.with_correctors.then_some(correctors),
        m: grid.m(),
        conjugacy_gap,
        meta: BTreeMap::new(),
    })
}

fn parse_row<T: Real>(line: &str, cols: usize) -> Result<Vec<T>> {
    let nums: Vec<T> = line
        .split(',')
        .map(|s| s.trim().parse::<f64>().map(T::lit))
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidParameter(format!("bad table row `{line}`")))?;
    if nums.len() != cols {
        return Err(Error::InvalidParameter(format!(
            "table row `{line}` needs {cols} columns"
        )));
    }
    Ok(nums)
}

impl<T: Real> EffectiveLaw<T> {
    /// Slope of a least-squares line through `(xi, gamma_0)`.
    pub fn flux_slope(&self) -> T {
        let num: T = self.xi.iter().zip(&self.gamma0).map(|(&x, &g)| x * g).sum();
        let den: T = self.xi.iter().map(|&x| x * x).sum();
        num / den
    }

    /// Tabulated `xi` range.
    pub fn xi_range(&self) -> (T, T) {
        (self.xi[0], self.xi[self.xi.len() - 1])
    }

    /// Corrector at `(xi, y)`: linear in `xi` between table rows, piecewise
    /// constant in `y` on the cell centres.
    pub fn corrector_at(&self, xi: T, y: T) -> Result<T> {
        let cors = self
            .correctors
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("law carries no correctors".into()))?;
        let (lo, hi) = self.xi_range();
        if xi < lo || xi > hi {
            return Err(Error::OutOfDomain {
                what: "corrector xi",
                value: xi.as_f64(),
                lo: lo.as_f64(),
                hi: hi.as_f64(),
            });
        }
        let m = cors[0].len();
        let j = ((y.frac01() * T::of(m)).floor().to_usize().unwrap_or(0)).min(m - 1);
        let i = match self.xi.binary_search_by(|g| g.partial_cmp(&xi).unwrap()) {
            Ok(i) => return Ok(cors[i][j]),
            Err(i) => i - 1,
        };
        let t = (xi - self.xi[i]) / (self.xi[i + 1] - self.xi[i]);
        Ok(cors[i][j] + t * (cors[i + 1][j] - cors[i][j]))
    }

    /// Commented-table text form: `#` metadata, `xi,phi0,gamma0` block,
    /// `eta,psi0` block, then optional `F_0` and corrector blocks.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# preset = {}", self.preset.name());
        let _ = writeln!(out, "# p = {}", self.preset.exponent());
        let _ = writeln!(out, "# n = 1");
        let _ = writeln!(out, "# m = {}", self.m);
        let _ = writeln!(out, "# conjugacy_gap = {}", self.conjugacy_gap);
        for (k, v) in &self.meta {
            let _ = writeln!(out, "# {k} = {v}");
        }
        let _ = writeln!(out, "xi,phi0,gamma0");
        for i in 0..self.xi.len() {
            let _ = writeln!(out, "{},{},{}", self.xi[i], self.phi0[i], self.gamma0[i]);
        }
        let _ = writeln!(out, "eta,psi0");
        for (e, p) in self.eta.iter().zip(&self.psi0) {
            let _ = writeln!(out, "{e},{p}");
        }
        if let Some(f0) = &self.f0 {
            let _ = writeln!(out, "xi_index,eta_index,f0");
            for (i, row) in f0.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    let _ = writeln!(out, "{i},{j},{v}");
                }
            }
        }
        if let Some(cors) = &self.correctors {
            let _ = writeln!(out, "xi_index,cell,corrector");
            for (i, row) in cors.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    let _ = writeln!(out, "{i},{j},{v}");
                }
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut meta = BTreeMap::new();
        let mut block = "";
        let (mut xi, mut phi0, mut gamma0, mut eta, mut psi0) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut f0_rows: Vec<(usize, usize, T)> = Vec::new();
        let mut cor_rows: Vec<(usize, usize, T)> = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some((k, v)) = rest.split_once('=') {
                    meta.insert(k.trim().to_string(), v.trim().to_string());
                }
                continue;
            }
            if line.starts_with(|c: char| c.is_ascii_alphabetic()) {
                block = match line {
                    "xi,phi0,gamma0" => "law",
                    "eta,psi0" => "dual",
                    "xi_index,eta_index,f0" => "f0",
                    "xi_index,cell,corrector" => "cor",
                    other => {
                        return Err(Error::InvalidParameter(format!("unknown block `{other}`")))
                    }
                };
                continue;
            }
            match block {
                "law" => {
                    let r = parse_row::<T>(line, 3)?;
                    xi.push(r[0]);
                    phi0.push(r[1]);
                    gamma0.push(r[2]);
                }
                "dual" => {
                    let r = parse_row::<T>(line, 2)?;
                    eta.push(r[0]);
                    psi0.push(r[1]);
                }
                "f0" | "cor" => {
                    let r = parse_row::<T>(line, 3)?;
                    let entry = (
                        r[0].to_usize().unwrap_or(0),
                        r[1].to_usize().unwrap_or(0),
                        r[2],
                    );
                    if block == "f0" {
                        f0_rows.push(entry);
                    } else {
                        cor_rows.push(entry);
                    }
                }
                _ => return Err(Error::InvalidParameter("data before block header".into())),
            }
        }
        let take = |k: &str, meta: &mut BTreeMap<String, String>| {
            meta.remove(k)
                .ok_or_else(|| Error::InvalidParameter(format!("missing `{k}` metadata")))
        };
        let preset = Preset::parse(&take("preset", &mut meta)?)?;
        meta.remove("p");
        meta.remove("n");
        let m = take("m", &mut meta)?
            .parse()
            .map_err(|_| Error::InvalidParameter("bad `m` metadata".into()))?;
        let conjugacy_gap = T::lit(
            take("conjugacy_gap", &mut meta)?
                .parse()
                .map_err(|_| Error::InvalidParameter("bad `conjugacy_gap` metadata".into()))?,
        );
        let grid_rows = |rows: &[(usize, usize, T)], ni: usize| -> Option<Vec<Vec<T>>> {
            if rows.is_empty() {
                return None;
            }
            let nj = rows.iter().map(|r| r.1).max().unwrap_or(0) + 1;
            let mut out = vec![vec![T::zero(); nj]; ni];
            for &(i, j, v) in rows {
                if i < ni {
                    out[i][j] = v;
                }
            }
            Some(out)
        };
        Ok(Self {
            preset,
            f0: grid_rows(&f0_rows, xi.len()),
            correctors: grid_rows(&cor_rows, xi.len()),
            xi,
            phi0,
            gamma0,
            eta,
            psi0,
            m,
            conjugacy_gap,
            meta,
        })
    }
}
