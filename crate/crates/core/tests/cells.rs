use homoglab::cellsolve::{
    effective_tensor_2d, f0_eval, laminate_oracle, solve_cell_dual, solve_cell_primal,
    tabulate_effective_law, CellGrid, CellOptions, EffectiveLaw, TabulateOptions,
};
use homoglab::convexcore::{ConjugatePair, Preset};
use homoglab::fitz::{MonotoneGraph, RepresentativeFn};
use homoglab::scalar::{linspace, symmetric_grid};

// sampled graphs undershoot the pairing by up to dv*dw/4 between samples
const SAMPLING_TOL: f64 = 1e-3;

fn fitz_rep(preset: Preset<f64>) -> impl Fn(f64) -> homoglab::Result<RepresentativeFn<f64>> + Copy {
    move |y| {
        let states = linspace(-6.0, 6.0, 480);
        Ok(RepresentativeFn::fitzpatrick(
            MonotoneGraph::from_preset(preset, y, &states, 1)?,
            SAMPLING_TOL,
        ))
    }
}

#[test]
fn f0_matches_brute_force_on_two_cells() {
    let preset: Preset<f64> = Preset::parse("two-phase(1,4,0.5,3)").unwrap();
    let grid = CellGrid::new(1, 2).unwrap();
    let rep = fitz_rep(preset);
    let (r1, r2) = (rep(0.25).unwrap(), rep(0.75).unwrap());
    let shifts = linspace(-3.0, 3.0, 60_000);
    for &(xi, eta) in &[(0.5, 1.0), (1.0, -0.5), (-0.7, 0.3), (0.0, 0.0), (1.2, 2.0)] {
        let brute = shifts
            .iter()
            .filter_map(|&t| {
                let a = r1.value(xi + t, eta).ok()?;
                let b = r2.value(xi - t, eta).ok()?;
                (!a.is_clipped() && !b.is_clipped()).then_some(0.5 * (a.value + b.value))
            })
            .fold(f64::INFINITY, f64::min);
        let dual = f0_eval(rep, xi, eta, &grid).unwrap();
        assert!(dual <= brute + 1e-9, "({xi}, {eta}): {dual} above {brute}");
        assert!(brute - dual <= 1e-3, "({xi}, {eta}): {dual} vs {brute}");
        assert!(dual >= xi * eta - 1e-9);
    }
}

#[test]
fn fitzpatrick_f0_is_below_fenchel_f0() {
    let preset: Preset<f64> = Preset::parse("two-phase(1,4,0.5)").unwrap();
    let grid = CellGrid::new(1, 16).unwrap();
    let fenchel = |y: f64| {
        Ok(RepresentativeFn::fenchel(
            ConjugatePair::from_preset(preset, y, symmetric_grid(6.0, 4), symmetric_grid(24.0, 4))?,
            1e-12,
        ))
    };
    let fitz = fitz_rep(preset);
    for &xi in &[-1.0, 0.25, 1.5] {
        for &eta in &[-2.0, 0.0, 0.48, 2.4] {
            let a = f0_eval(fitz, xi, eta, &grid).unwrap();
            let b = f0_eval(fenchel, xi, eta, &grid).unwrap();
            assert!(a <= b + 1e-9, "({xi}, {eta}): {a} > {b}");
            assert!(a >= xi * eta - SAMPLING_TOL);
        }
        // on the effective graph both equal the pairing; the cell states eta/a are graph samples
        let eta = 1.6 * xi;
        let a = f0_eval(fitz, xi, eta, &grid).unwrap();
        let b = f0_eval(fenchel, xi, eta, &grid).unwrap();
        assert!((a - xi * eta).abs() < 1e-8 && (b - xi * eta).abs() < 1e-9, "{xi}: {a} {b}");
    }
}

#[test]
fn primal_and_dual_cells_are_conjugate() {
    let grid = CellGrid::new(1, 128).unwrap();
    for spec in ["two-phase(1,4,0.5)", "two-phase(2,5,0.3,3)", "power(1,4)"] {
        let preset: Preset<f64> = Preset::parse(spec).unwrap();
        for &xi in &[-1.0, 0.25, 0.9] {
            let sol = solve_cell_primal(&preset, xi, &grid, &CellOptions::default()).unwrap();
            let psi = solve_cell_dual(&preset, sol.flux, &grid).unwrap().value;
            // Fenchel-Young with equality at the effective pair
            let slack = sol.phi0 + psi - xi * sol.flux;
            assert!(slack.abs() <= 1e-8 * (1.0 + sol.phi0.abs()), "{spec} at {xi}: {slack}");
            let mean: f64 = sol.corrector.iter().sum::<f64>() / 128.0;
            assert!(mean.abs() < 1e-12);
        }
    }
}

#[test]
fn laminate_oracle_bounds_and_tensor() {
    for &(a1, a2, theta) in &[(1.0, 4.0, 0.5), (1.0, 10.0, 0.25), (3.0, 2.0, 0.75)] {
        let lam = laminate_oracle(a1, a2, theta, 2.0f64).unwrap();
        assert!(lam.across <= lam.along);
        let preset = Preset::TwoPhase { a1, a2, theta, p: 2.0 };
        let t = effective_tensor_2d(&preset, &CellGrid::new(2, 32).unwrap(), &CellOptions::default()).unwrap();
        assert!((t[0][0] - lam.across).abs() <= 1e-2 * lam.across, "{t:?} vs {lam:?}");
        assert!((t[1][1] - lam.along).abs() <= 1e-2 * lam.along);
        assert!((t[0][1] - t[1][0]).abs() < 1e-12);
    }
    let kinked: Preset<f64> = Preset::Abs;
    assert!(effective_tensor_2d(&kinked, &CellGrid::new(2, 8).unwrap(), &CellOptions::default()).is_err());
}

#[test]
fn law_text_round_trip_is_exact() {
    let preset: Preset<f64> = Preset::parse("two-phase(1,4,0.5,3)").unwrap();
    let opts = TabulateOptions {
        with_f0: true,
        ..TabulateOptions::default()
    };
    let law = tabulate_effective_law(
        &preset,
        &symmetric_grid(2.0, 10),
        &symmetric_grid(3.0, 10),
        &CellGrid::new(1, 16).unwrap(),
        &opts,
    )
    .unwrap();
    let back = EffectiveLaw::from_text(&law.to_text()).unwrap();
    assert_eq!(back, law);
    assert!(EffectiveLaw::<f64>::from_text("# preset = nonsense\n").is_err());
}
