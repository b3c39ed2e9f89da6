//! Representative functions of monotone operators.
//!
//! An operator `alpha` is represented by a convex `f` when
//! `f(v, v') >= <v', v>` everywhere, with equality exactly on the graph of
//! `alpha`. The gap `f(v, v') - <v', v>` is the null-minimization residual
//! used as a certificate for the inclusion `v' in alpha(v)`.
//!
//! The Fitzpatrick function of a sampled graph is evaluated as a finite max
//! over the samples, which is a lower bound of the continuum function and
//! agrees with it on the samples.

use std::fmt::Write as _;

use crate::convexcore::{convex_minorant, Clip, ConjugatePair, Eval, Potential, Preset};
use crate::error::{Error, Result};
use crate::scalar::Real;

fn dot<T: Real, const D: usize>(a: &[T; D], b: &[T; D]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn sub<T: Real, const D: usize>(a: &[T; D], b: &[T; D]) -> [T; D] {
    let mut out = *a;
    for (o, &x) in out.iter_mut().zip(b) {
        *o -= x;
    }
    out
}

/// Sampled graph `{(v_i, w_i)}` of a monotone map `R^D -> R^D`.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneGraph<T, const D: usize> {
    samples: Vec<([T; D], [T; D])>,
    generator: Option<(Preset<T>, T)>,
    /// Microscopic coordinate the operator was sampled at.
    pub y: T,
}

impl<T: Real, const D: usize> MonotoneGraph<T, D> {
    /// Builds a graph, rejecting empty input and any non-monotone pair.
    pub fn new(samples: Vec<([T; D], [T; D])>) -> Result<Self> {
        let g = Self::new_unchecked(samples)?;
        g.check_monotone()?;
        Ok(g)
    }

    /// Builds a graph without the monotonicity check (for diagnostics on
    /// suspect data).
    pub fn new_unchecked(samples: Vec<([T; D], [T; D])>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyGraph);
        }
        Ok(Self {
            samples,
            generator: None,
            y: T::zero(),
        })
    }

    pub fn samples(&self) -> &[([T; D], [T; D])] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Preset and `y` the graph was generated from, when it is `d phi`.
    pub fn generator(&self) -> Option<(Preset<T>, T)> {
        self.generator
    }

    /// First pair `(i, j)` with `<w_i - w_j, v_i - v_j> < 0`.
    pub fn check_monotone(&self) -> Result<()> {
        for (i, (vi, wi)) in self.samples.iter().enumerate() {
            for (j, (vj, wj)) in self.samples.iter().enumerate().skip(i + 1) {
                let pairing = dot(&sub(wi, wj), &sub(vi, vj));
                if pairing < T::zero() {
                    return Err(Error::NonMonotone(i, j, pairing.as_f64()));
                }
            }
        }
        Ok(())
    }

    /// Smallest `k` with `|w_i| <= k (1 + |v_i|)` on all samples.
    pub fn growth_constant(&self) -> T {
        self.samples
            .iter()
            .map(|(v, w)| dot(w, w).sqrt() / (T::one() + dot(v, v).sqrt()))
            .fold(T::zero(), T::max)
    }

    /// Largest `(a, b)`-coercivity defect: `max_i a(|w|^2 + |v|^2) - b - <w, v>`.
    pub fn coercivity_defect(&self, a: T, b: T) -> T {
        self.samples
            .iter()
            .map(|(v, w)| a * (dot(w, w) + dot(v, v)) - b - dot(w, v))
            .fold(T::neg_infinity(), T::max)
    }

    /// `max_i <v' - w_i, v_i - v>`: the Fitzpatrick gap over the samples.
    pub fn fitzpatrick_gap(&self, v: &[T; D], v_dual: &[T; D]) -> T {
        self.samples
            .iter()
            .map(|(v0, w0)| dot(&sub(v_dual, w0), &sub(v0, v)))
            .fold(T::neg_infinity(), T::max)
    }

    /// Writes `v,w` (D = 1) or `v1,v2,w1,w2` (D = 2) CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let names = |p: &str| -> Vec<String> {
            if D == 1 {
                vec![p.to_string()]
            } else {
                (1..=D).map(|i| format!("{p}{i}")).collect()
            }
        };
        let mut header = names("v");
        header.extend(names("w"));
        let _ = writeln!(out, "{}", header.join(","));
        for (v, w) in &self.samples {
            let cols: Vec<String> = v.iter().chain(w).map(|x| x.to_string()).collect();
            let _ = writeln!(out, "{}", cols.join(","));
        }
        out
    }

    /// Reads the CSV written by [`MonotoneGraph::to_csv`] and checks monotonicity.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut samples = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with('v') {
                continue;
            }
            let nums: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::InvalidParameter(format!("bad graph row `{line}`")))?;
            if nums.len() != 2 * D {
                return Err(Error::InvalidParameter(format!(
                    "graph row `{line}` needs {} columns",
                    2 * D
                )));
            }
            let mut v = [T::zero(); D];
            let mut w = [T::zero(); D];
            for k in 0..D {
                v[k] = T::lit(nums[k]);
                w[k] = T::lit(nums[D + k]);
            }
            samples.push((v, w));
        }
        Self::new(samples)
    }
}

impl<T: Real> MonotoneGraph<T, 1> {
    /// Samples `d phi(., y)` on `grid`; at kinks the whole subdifferential
    /// segment is sampled with `kink_samples` points.
    pub fn from_preset(preset: Preset<T>, y: T, grid: &[T], kink_samples: usize) -> Result<Self> {
        preset.validate()?;
        let mut samples = Vec::with_capacity(grid.len());
        for &v in grid {
            let iv = preset.subdifferential(v, y);
            if iv.lo == iv.hi || kink_samples < 2 {
                samples.push(([v], [preset.slope(v, y)]));
            } else {
                for k in 0..kink_samples {
                    let t = T::of(k) / T::of(kink_samples - 1);
                    samples.push(([v], [iv.lo + t * (iv.hi - iv.lo)]));
                }
            }
        }
        let mut g = Self::new_unchecked(samples)?;
        g.generator = Some((preset, y));
        g.y = y;
        Ok(g)
    }

    /// Sorted-order monotonicity check, `O(n log n)`.
    pub fn check_monotone_sorted(&self) -> Result<()> {
        let mut idx: Vec<usize> = (0..self.samples.len()).collect();
        idx.sort_by(|&a, &b| {
            let (sa, sb) = (&self.samples[a], &self.samples[b]);
            sa.0[0]
                .partial_cmp(&sb.0[0])
                .unwrap()
                .then(sa.1[0].partial_cmp(&sb.1[0]).unwrap())
        });
        // running max of w over strictly smaller v
        let mut best: Option<usize> = None;
        let mut start = 0;
        while start < idx.len() {
            let v = self.samples[idx[start]].0[0];
            let mut end = start;
            while end < idx.len() && self.samples[idx[end]].0[0] == v {
                end += 1;
            }
            if let Some(b) = best {
                let wmin = self.samples[idx[start]].1[0];
                if wmin < self.samples[b].1[0] {
                    let (i, j) = (b.min(idx[start]), b.max(idx[start]));
                    let p = (self.samples[i].1[0] - self.samples[j].1[0])
                        * (self.samples[i].0[0] - self.samples[j].0[0]);
                    return Err(Error::NonMonotone(i, j, p.as_f64()));
                }
            }
            let top = idx[end - 1];
            if best.is_none_or(|b| self.samples[top].1[0] > self.samples[b].1[0]) {
                best = Some(top);
            }
            start = end;
        }
        Ok(())
    }
}

impl<T: Real> MonotoneGraph<T, 2> {
    /// Samples an isotropic preset `z = a(y) |zeta|^{p-2} zeta` over a polar
    /// product grid of `directions` angles and the given magnitudes.
    pub fn from_isotropic_preset(
        preset: Preset<T>,
        y: T,
        directions: usize,
        magnitudes: &[T],
    ) -> Result<Self> {
        if !preset.is_smooth() {
            return Err(Error::Unsupported(
                "planar graphs are sampled from smooth presets only".into(),
            ));
        }
        let mut samples = vec![([T::zero(); 2], [T::zero(); 2])];
        let tau = T::lit(std::f64::consts::TAU);
        for k in 0..directions {
            let angle = tau * T::of(k) / T::of(directions);
            let (s, c) = angle.sin_cos();
            for &r in magnitudes.iter().filter(|r| **r > T::zero()) {
                let flux = preset.slope(r, y);
                samples.push(([r * c, r * s], [flux * c, flux * s]));
            }
        }
        let mut g = Self::new_unchecked(samples)?;
        g.generator = Some((preset, y));
        g.y = y;
        Ok(g)
    }
}

/// Fitzpatrick value `max_i { <v', v_i> - <w_i, v_i - v> }` over the samples.
pub fn fitzpatrick_eval<T: Real, const D: usize>(
    graph: &MonotoneGraph<T, D>,
    v: &[T; D],
    v_dual: &[T; D],
) -> T {
    dot(v_dual, v) + graph.fitzpatrick_gap(v, v_dual)
}

/// Which representative a certificate was computed with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RepresentativeKind {
    Fitzpatrick,
    Fenchel,
}

impl RepresentativeKind {
    pub fn name(&self) -> &'static str {
        match self {
            RepresentativeKind::Fitzpatrick => "fitzpatrick",
            RepresentativeKind::Fenchel => "fenchel",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Repr<T> {
    Fitzpatrick(MonotoneGraph<T, 1>),
    Fenchel(ConjugatePair<T>),
}

/// Representative function of a scalar monotone operator.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentativeFn<T> {
    repr: Repr<T>,
    /// Negative residuals down to `-tol` are accepted as roundoff.
    pub tol: T,
}

impl<T: Real> RepresentativeFn<T> {
    pub fn fitzpatrick(graph: MonotoneGraph<T, 1>, tol: T) -> Self {
        Self {
            repr: Repr::Fitzpatrick(graph),
            tol,
        }
    }

    pub fn fenchel(pair: ConjugatePair<T>, tol: T) -> Self {
        Self {
            repr: Repr::Fenchel(pair),
            tol,
        }
    }

    pub fn kind(&self) -> RepresentativeKind {
        match self.repr {
            Repr::Fitzpatrick(_) => RepresentativeKind::Fitzpatrick,
            Repr::Fenchel(_) => RepresentativeKind::Fenchel,
        }
    }

    pub fn graph(&self) -> Option<&MonotoneGraph<T, 1>> {
        match &self.repr {
            Repr::Fitzpatrick(g) => Some(g),
            Repr::Fenchel(_) => None,
        }
    }

    pub fn pair(&self) -> Option<&ConjugatePair<T>> {
        match &self.repr {
            Repr::Fenchel(p) => Some(p),
            Repr::Fitzpatrick(_) => None,
        }
    }

    /// `f(v, v')`.
    pub fn value(&self, v: T, v_dual: T) -> Result<Eval<T>> {
        match &self.repr {
            Repr::Fitzpatrick(g) => Ok(Eval::finite(fitzpatrick_eval(g, &[v], &[v_dual]))),
            Repr::Fenchel(pair) => fenchel_rep_eval(pair, v, v_dual),
        }
    }

    /// `f(v, v') - v v'` without cancellation where the representative allows it.
    fn gap(&self, v: T, v_dual: T) -> Result<Eval<T>> {
        match &self.repr {
            Repr::Fitzpatrick(g) => Ok(Eval::finite(g.fitzpatrick_gap(&[v], &[v_dual]))),
            Repr::Fenchel(pair) => {
                let e = fenchel_rep_eval(pair, v, v_dual)?;
                Ok(Eval {
                    value: e.value - v * v_dual,
                    clip: e.clip,
                })
            }
        }
    }

    /// Conjugate of `s -> f(s, eta)` at `mu`, as a reusable object.
    pub fn state_conjugate(&self, eta: T) -> Result<StateConjugate<'_, T>> {
        match &self.repr {
            Repr::Fitzpatrick(g) => {
                // f(s, eta) = max_j (eta - w_j) v_j + w_j s; its conjugate is the
                // lower hull of the points (w_j, (w_j - eta) v_j).
                let pts: Vec<(T, T)> = g
                    .samples()
                    .iter()
                    .map(|(v, w)| (w[0], (w[0] - eta) * v[0]))
                    .collect();
                Ok(StateConjugate::Hull(convex_minorant(&pts)?))
            }
            Repr::Fenchel(pair) => {
                let offset = pair.dual.eval(eta)?;
                if offset.is_clipped() {
                    return Err(Error::Clipped);
                }
                Ok(StateConjugate::Fenchel {
                    pair,
                    offset: offset.value,
                })
            }
        }
    }
}

/// Partial conjugate `mu -> sup_s { mu s - f(s, eta) }` of a representative.
#[derive(Debug, Clone)]
pub enum StateConjugate<'a, T> {
    Hull(Potential<T>),
    Fenchel { pair: &'a ConjugatePair<T>, offset: T },
}

impl<T: Real> StateConjugate<'_, T> {
    pub fn eval(&self, mu: T) -> Result<Eval<T>> {
        match self {
            StateConjugate::Hull(p) => {
                let (lo, hi) = p.hull();
                if mu < lo {
                    Ok(Eval {
                        value: p.values()[0],
                        clip: Clip::Below,
                    })
                } else if mu > hi {
                    Ok(Eval {
                        value: *p.values().last().unwrap(),
                        clip: Clip::Above,
                    })
                } else {
                    p.eval(mu)
                }
            }
            StateConjugate::Fenchel { pair, offset } => {
                let e = pair.dual.eval(mu)?;
                Ok(Eval {
                    value: e.value - *offset,
                    clip: e.clip,
                })
            }
        }
    }
}

/// `phi(v) + phi*(v')`, propagating the clip flag of the conjugate.
pub fn fenchel_rep_eval<T: Real>(pair: &ConjugatePair<T>, v: T, v_dual: T) -> Result<Eval<T>> {
    let a = pair.primal.eval(v)?;
    let b = pair.dual.eval(v_dual)?;
    let clip = if a.is_clipped() { a.clip } else { b.clip };
    Ok(Eval {
        value: a.value + b.value,
        clip,
    })
}

/// `f(v, v') - <v', v>`; zero (within `tol`) certifies `v' in alpha(v)`.
///
/// A value below `-tol` means the representative inequality failed, which
/// for sampled graphs signals sampling too coarse around `(v, v')`.
pub fn nullmin_residual<T: Real>(rep: &RepresentativeFn<T>, v: T, v_dual: T) -> Result<T> {
    let gap = rep.gap(v, v_dual)?.get()?;
    if gap < -rep.tol {
        return Err(Error::Representation {
            violation: (-gap).as_f64(),
            tol: rep.tol.as_f64(),
        });
    }
    Ok(gap)
}

/// `max <v', v> - f(v, v')` over the given pairs; clipped (infinite) values
/// never violate and are skipped.
pub fn representativeness_scan<T: Real>(rep: &RepresentativeFn<T>, pairs: &[(T, T)]) -> T {
    pairs
        .iter()
        .filter_map(|&(v, w)| rep.gap(v, w).ok())
        .filter(|e| !e.is_clipped())
        .map(|e| -e.value)
        .fold(T::neg_infinity(), T::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::symmetric_grid;

    fn identity_graph(n: usize) -> MonotoneGraph<f64, 1> {
        let grid = symmetric_grid(3.0, n);
        MonotoneGraph::new(grid.iter().map(|&v| ([v], [v])).collect()).unwrap()
    }

    #[test]
    fn identity_graph_examples() {
        let g = identity_graph(600);
        assert_eq!(fitzpatrick_eval(&g, &[1.0], &[1.0]), 1.0);
        // closed form (v + v')^2 / 4 = 0 at (1, -1), attained at v0 = 0
        assert_eq!(fitzpatrick_eval(&g, &[1.0], &[-1.0]), 0.0);
        let rep = RepresentativeFn::fitzpatrick(g, 1e-12);
        assert_eq!(nullmin_residual(&rep, 1.0, -1.0).unwrap(), 1.0);
    }

    #[test]
    fn zero_operator() {
        let g = MonotoneGraph::new(symmetric_grid(2.0, 10).iter().map(|&v| ([v], [0.0])).collect())
            .unwrap();
        assert_eq!(fitzpatrick_eval(&g, &[1.5], &[0.0]), 0.0);
    }

    #[test]
    fn fenchel_examples() {
        let q = Preset::Quadratic { a: 1.0 };
        let pair = ConjugatePair::from_preset(q, 0.0, symmetric_grid(4.0, 8), symmetric_grid(4.0, 8))
            .unwrap();
        assert_eq!(fenchel_rep_eval(&pair, 1.0, 1.0).unwrap().value, 1.0);
        assert_eq!(fenchel_rep_eval(&pair, 1.0, 0.0).unwrap().value, 0.5);
        assert_eq!(fenchel_rep_eval(&pair, 2.0, 1.0).unwrap().value, 2.5);
        let rep = RepresentativeFn::fenchel(pair, 1e-12);
        assert_eq!(nullmin_residual(&rep, 1.0, 0.0).unwrap(), 0.5);
        assert_eq!(rep.kind(), RepresentativeKind::Fenchel);
    }

    #[test]
    fn abs_fenchel_clip_propagates() {
        let pair = ConjugatePair::from_preset(Preset::Abs, 0.0, symmetric_grid(2.0, 4), symmetric_grid(2.0, 4))
            .unwrap();
        assert!(fenchel_rep_eval(&pair, 0.0, 1.5).unwrap().is_clipped());
        let rep = RepresentativeFn::fenchel(pair, 0.0);
        assert_eq!(nullmin_residual(&rep, 0.0, 1.5), Err(Error::Clipped));
        assert_eq!(nullmin_residual(&rep, 0.0, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn monotonicity_violation_reports_pair() {
        let bad = vec![([0.0], [0.0]), ([1.0], [2.0]), ([2.0], [1.0])];
        assert_eq!(
            MonotoneGraph::new(bad.clone()).unwrap_err(),
            Error::NonMonotone(1, 2, -1.0)
        );
        let g = MonotoneGraph::new_unchecked(bad).unwrap();
        assert!(matches!(g.check_monotone_sorted(), Err(Error::NonMonotone(1, 2, _))));
        assert_eq!(
            MonotoneGraph::<f64, 1>::new(vec![]).unwrap_err(),
            Error::EmptyGraph
        );
    }

    #[test]
    fn corrupted_graph_fails_representativeness() {
        // two-point counterexample: f = max(v, v'), so v v' - f = 6 at (-2, -2)
        let g = MonotoneGraph::new_unchecked(vec![([0.0], [1.0]), ([1.0], [0.0])]).unwrap();
        let rep = RepresentativeFn::fitzpatrick(g, 1e-12);
        let grid = symmetric_grid(2.0, 8);
        let pairs: Vec<(f64, f64)> = grid
            .iter()
            .flat_map(|&a| grid.iter().map(move |&b| (a, b)))
            .collect();
        assert_eq!(representativeness_scan(&rep, &pairs), 6.0);
    }

    #[test]
    fn scan_at_own_samples_is_nonpositive() {
        let g = MonotoneGraph::from_preset(Preset::Abs, 0.0, &symmetric_grid(2.0, 20), 5).unwrap();
        g.check_monotone().unwrap();
        let pairs: Vec<(f64, f64)> = g.samples().iter().map(|(v, w)| (v[0], w[0])).collect();
        let rep = RepresentativeFn::fitzpatrick(g, 0.0);
        assert!(representativeness_scan(&rep, &pairs) <= 0.0);
        for &(v, w) in &pairs {
            assert_eq!(nullmin_residual(&rep, v, w).unwrap(), 0.0);
        }
    }

    #[test]
    fn fitzpatrick_below_fenchel() {
        let preset = Preset::Power { a: 1.0, p: 3.0 };
        let grid = symmetric_grid(2.0, 200);
        let g = MonotoneGraph::from_preset(preset, 0.0, &grid, 1).unwrap();
        let pair = ConjugatePair::from_preset(preset, 0.0, grid.clone(), symmetric_grid(5.0, 10)).unwrap();
        for &v in grid.iter().step_by(7) {
            for &w in &[-3.0, -0.5, 0.0, 1.0, 2.5] {
                let fz = fitzpatrick_eval(&g, &[v], &[w]);
                let fe = fenchel_rep_eval(&pair, v, w).unwrap().value;
                assert!(fz <= fe + 1e-12, "({v},{w}): {fz} > {fe}");
            }
        }
    }

    #[test]
    fn too_coarse_graph_is_flagged() {
        let g = MonotoneGraph::new(vec![([0.0], [0.0])]).unwrap();
        let rep = RepresentativeFn::fitzpatrick(g, 1e-12);
        assert!(matches!(
            nullmin_residual(&rep, 1.0, 1.0),
            Err(Error::Representation { .. })
        ));
    }

    #[test]
    fn planar_graph_point_certificate() {
        let preset: Preset<f64> = Preset::Quadratic { a: 2.0 };
        let mags = [0.5, 1.0, 1.5];
        let g = MonotoneGraph::from_isotropic_preset(preset, 0.0, 12, &mags).unwrap();
        g.check_monotone().unwrap();
        for (v, w) in g.samples() {
            assert!(g.fitzpatrick_gap(v, w).abs() <= 1e-12);
        }
        assert!((g.growth_constant() - 2.0 * 1.5 / 2.5).abs() < 1e-12);
        let back = MonotoneGraph::<f64, 2>::from_csv(&g.to_csv()).unwrap();
        assert_eq!(back.samples(), g.samples());
    }

    #[test]
    fn state_conjugate_of_fitzpatrick_rep() {
        // identity graph: f(s, eta) ~ (s + eta)^2 / 4, conjugate in s at mu:
        // sup_s mu s - (s + eta)^2/4 = mu^2 - mu eta
        let rep = RepresentativeFn::fitzpatrick(identity_graph(3000), 1e-12);
        let sc = rep.state_conjugate(0.5).unwrap();
        for &mu in &[-1.0, 0.0, 0.7, 1.2] {
            let v = sc.eval(mu).unwrap();
            assert!((v.value - (mu * mu - mu * 0.5)).abs() < 1e-5, "mu={mu}");
        }
        assert!(sc.eval(4.0).unwrap().is_clipped());
    }
}
