use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::Instant;

use homoglab::cellsolve::{
    build_wz_bases, effective_tensor_2d, laminate_oracle, solve_cell_primal, tabulate_effective_law,
    CellGrid, CellOptions, TabulateOptions,
};
use homoglab::convexcore::{conjugate, Potential, Preset};
use homoglab::evolver::{
    apriori_monitor, l2_distance, l2_norm, manufactured_exact, phi_certificate, solve_parabolic,
    Field, FluxRepresentative, ProblemData, Trajectory,
};
use homoglab::fitz::{representativeness_scan, MonotoneGraph, RepresentativeFn};
use homoglab::scalar::{linspace, symmetric_grid};
use homoglab::twoscale::{corrector_error, pairing, twoscale_gap, Micro, TwoScaleField, TwoScaleTest};
use homoglab::EffectiveLaw64;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn sci(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn two_phase_linear() -> Preset<f64> {
    Preset::parse("two-phase(1,4,0.5)").unwrap()
}

fn harmonic_mean_cell() -> Outcome {
    let grid = CellGrid::new(1, 1024).unwrap();
    let xi = symmetric_grid(2.0, 8);
    let law = tabulate_effective_law(
        &two_phase_linear(),
        &xi,
        &symmetric_grid(2.0, 8),
        &grid,
        &TabulateOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    let oracle = laminate_oracle(1.0f64, 4.0, 0.5, 2.0).unwrap().across;
    let slope = law.flux_slope();
    check(
        (slope - 1.6).abs() <= 1e-3 && (oracle - 1.6).abs() <= 1e-12,
        format!("gamma0 slope {slope:.12}, laminate {oracle}"),
    )
}

fn p_growth_cell() -> Outcome {
    let grid = CellGrid::new(1, 1024).unwrap();
    let preset = Preset::parse("two-phase(1,16,0.5,4)").unwrap();
    let sol = solve_cell_primal(&preset, 1.0, &grid, &CellOptions::default())
        .map_err(|e| e.to_string())?;
    let closed = (0.5 * (1.0f64 + 16f64.powf(-1.0 / 3.0))).powi(-3);
    let coef = 4.0 * sol.phi0;
    let rel = (coef - closed).abs() / closed;
    check(rel <= 1e-3, format!("coefficient {coef:.9} vs {closed:.9}, rel {rel:.2e}"))
}

fn laminate_2d() -> Outcome {
    let grid = CellGrid::new(2, 64).unwrap();
    let a = effective_tensor_2d(&two_phase_linear(), &grid, &CellOptions::default())
        .map_err(|e| e.to_string())?;
    let rel = ((a[0][0] - 1.6).abs() / 1.6)
        .max((a[1][1] - 2.5).abs() / 2.5)
        .max(a[0][1].abs().max(a[1][0].abs()) / 1.6);
    let cross = build_wz_bases(&grid).max_cross_inner_product();
    check(
        rel <= 1e-2 && cross <= 1e-12,
        format!(
            "tensor [[{:.6}, {:.1e}], [{:.1e}, {:.6}]], rel {rel:.2e}, max <W,Z> {cross:.1e}",
            a[0][0], a[0][1], a[1][0], a[1][1]
        ),
    )
}

fn conjugacy() -> Outcome {
    let grid = CellGrid::new(1, 256).unwrap();
    let xi = symmetric_grid(4.0, 400);
    let eta = symmetric_grid(2.0, 40);
    let law = tabulate_effective_law(&two_phase_linear(), &xi, &eta, &grid, &TabulateOptions::default())
        .map_err(|e| e.to_string())?;
    let phi0 = Potential::sampled(law.xi.clone(), law.phi0.clone()).map_err(|e| e.to_string())?;
    let conj = conjugate(&phi0, &law.eta).map_err(|e| e.to_string())?;
    let gap = law
        .psi0
        .iter()
        .zip(conj.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    check(
        gap <= 1e-3 && law.eta.len() == eta.len(),
        format!("max |psi0 - phi0*| = {gap:.2e} on {} flux points", law.eta.len()),
    )
}

fn representative_inequalities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..10 {
        let n = rng.gen_range(20..80);
        let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut w: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        v.sort_by(f64::total_cmp);
        w.sort_by(f64::total_cmp);
        let samples: Vec<_> = v.iter().zip(&w).map(|(&a, &b)| ([a], [b])).collect();
        let graph = MonotoneGraph::new(samples).map_err(|e| e.to_string())?;
        let rep = RepresentativeFn::fitzpatrick(graph, 1e-12);
        let pairs: Vec<_> = v.iter().copied().zip(w.iter().copied()).collect();
        worst = worst.max(representativeness_scan(&rep, &pairs));
    }
    let grid = CellGrid::new(1, 128).unwrap();
    let axis = symmetric_grid(2.0, 20);
    let opts = TabulateOptions {
        with_f0: true,
        ..TabulateOptions::default()
    };
    let law = tabulate_effective_law(&two_phase_linear(), &axis, &axis, &grid, &opts)
        .map_err(|e| e.to_string())?;
    let f0 = law.f0.as_ref().ok_or("no F0 table")?;
    let mut slack = f64::INFINITY;
    for (i, row) in f0.iter().enumerate() {
        for (j, &f) in row.iter().enumerate() {
            slack = slack.min(f - law.xi[i] * law.eta[j]);
        }
    }
    let cells = f0.len() * f0[0].len();
    check(
        worst <= 0.0 && slack >= -1e-8 && cells == 441,
        format!("scan max {worst:e} over 10 graphs, min F0 - xi eta {slack:.2e} on {cells} entries"),
    )
}

fn certificate_suite() -> Outcome {
    let cases = [
        ("quadratic(1)", "quadratic(1)"),
        ("quadratic(1)", "two-phase(1,4,0.5)"),
        ("quadratic(2)", "two-phase(1,16,0.5,4)"),
        ("power(1,3)", "two-phase(1,4,0.5)"),
        ("quadratic(1)", "abs"),
        ("abs", "quadratic(1)"),
    ];
    let mut lines = Vec::new();
    let mut ok = true;
    for (phi, flux) in cases {
        let data = ProblemData::with_period(
            0.25,
            16,
            0.1,
            20,
            Preset::parse(phi).unwrap(),
            Preset::parse(flux).unwrap(),
        )
        .unwrap()
        .with_source(Field::SinPi(5.0))
        .with_initial(Field::SinPi(0.5));
        let traj = match solve_parabolic(&data) {
            Ok(t) => t,
            Err(e) => {
                ok = false;
                lines.push(format!("{phi}/{flux}: not converged ({e})"));
                continue;
            }
        };
        let rep = FluxRepresentative::default();
        let c = phi_certificate(&traj, &data, &rep).map_err(|e| e.to_string())?;
        let in_band = |x: f64| x >= -1e-8 * c.scale && x <= 1e-6 * c.scale;
        let mut bumped = traj.clone();
        let mid = data.steps / 2;
        bumped.states[mid].u[data.elements / 3] += 0.1;
        let cb = phi_certificate(&bumped, &data, &rep).map_err(|e| e.to_string())?;
        let case_ok = in_band(c.alpha) && in_band(c.gamma) && cb.total > c.total;
        ok &= case_ok;
        lines.push(format!(
            "{phi}/{flux}: alpha {:.1e} gamma {:.1e} (scale {:.1e}), perturbed {:.2e}",
            c.alpha, c.gamma, c.scale, cb.total
        ));
    }
    check(ok, lines.join("; "))
}

fn linear_oracle() -> Outcome {
    let (a, b) = (2.0f64, 3.0f64);
    let n = 64;
    let m = 64;
    let t_final = 0.5;
    let data = ProblemData::new(
        1.0,
        t_final,
        m,
        n,
        Preset::Quadratic { a },
        Preset::Quadratic { a: b },
    )
    .with_source(Field::SinPi(2.0))
    .with_initial(Field::SinPi(1.0));
    let traj = solve_parabolic(&data).map_err(|e| e.to_string())?;

    let h = 1.0 / n as f64;
    let k = t_final / m as f64;
    let dim = n - 1;
    let mut mat = DMatrix::<f64>::zeros(dim, dim);
    for i in 0..dim {
        mat[(i, i)] = h * a + 2.0 * k * b / h;
        if i > 0 {
            mat[(i, i - 1)] = -k * b / h;
        }
        if i + 1 < dim {
            mat[(i, i + 1)] = -k * b / h;
        }
    }
    let lu = mat.lu();
    let src: Vec<f64> = (0..n)
        .map(|e| 2.0 * (PI * (e as f64 + 0.5) * h).sin())
        .collect();
    let mut w: Vec<f64> = (1..n).map(|j| (PI * j as f64 * h).sin()).collect();
    let mut worst = 0.0f64;
    let mut umax = 0.0f64;
    for step in 1..=m {
        let rhs = DVector::from_iterator(
            dim,
            (0..dim).map(|i| h * w[i] - k * (src[i] - src[i + 1])),
        );
        let u = lu.solve(&rhs).ok_or("singular oracle")?;
        for i in 0..dim {
            worst = worst.max((u[i] - traj.states[step].u[i + 1]).abs());
            umax = umax.max(u[i].abs());
            w[i] = a * u[i];
        }
    }
    let rel = worst / umax;
    check(rel <= 1e-8, format!("max nodal deviation {worst:.2e}, relative {rel:.2e}"))
}

fn final_l2_error(traj: &Trajectory<f64>) -> f64 {
    let gauss = [
        (-0.774_596_669_241_483_4, 5.0 / 9.0),
        (0.0, 8.0 / 9.0),
        (0.774_596_669_241_483_4, 5.0 / 9.0),
    ];
    let u = &traj.final_state().u;
    let h = traj.h();
    let mut acc = 0.0;
    for e in 0..traj.elements {
        for (g, wg) in gauss {
            let s = 0.5 * (g + 1.0);
            let x = (e as f64 + s) * h;
            let d = u[e] + s * (u[e + 1] - u[e]) - manufactured_exact(x, traj.t_final);
            acc += 0.5 * h * wg * d * d;
        }
    }
    acc.sqrt()
}

fn manufactured() -> Outcome {
    let mut errs = Vec::new();
    for n in [16, 32, 64] {
        let data = ProblemData::new(
            1.0,
            0.01,
            1000,
            n,
            Preset::Quadratic { a: 1.0 },
            Preset::Quadratic { a: 1.0 },
        )
        .with_source(Field::ManufacturedHeat)
        .with_initial(Field::ManufacturedHeat);
        let traj = solve_parabolic(&data).map_err(|e| e.to_string())?;
        errs.push(final_l2_error(&traj));
    }
    let orders: Vec<f64> = errs.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    check(
        orders.iter().all(|&o| o >= 1.8),
        format!("errors {}, observed orders {orders:.3?}", sci(&errs)),
    )
}

struct Family {
    eps: Vec<f64>,
    runs: Vec<(ProblemData<f64>, Trajectory<f64>)>,
    law: EffectiveLaw64,
    hom: Trajectory<f64>,
}

fn homogenization_family() -> Result<Family, String> {
    let eps = vec![1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0];
    let flux = two_phase_linear();
    let grid = CellGrid::new(1, 64).unwrap();
    let law = tabulate_effective_law(
        &flux,
        &symmetric_grid(8.0, 64),
        &symmetric_grid(12.0, 64),
        &grid,
        &TabulateOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for &e in &eps {
        let data = ProblemData::with_period(e, 16, 0.2, 64, Preset::Quadratic { a: 1.0 }, flux)
            .map_err(|e| e.to_string())?
            .with_source(Field::SinPi(1.0))
            .with_initial(Field::SinPi(1.0));
        let traj = solve_parabolic(&data).map_err(|e| e.to_string())?;
        runs.push((data, traj));
    }
    let finest = runs.last().unwrap().0.elements;
    let hom_data = runs[0].0.with_elements(finest).homogenized(&law).map_err(|e| e.to_string())?;
    let hom = solve_parabolic(&hom_data).map_err(|e| e.to_string())?;
    Ok(Family { eps, runs, law, hom })
}

fn homogenization_convergence(f: &Family) -> Outcome {
    let errs = f
        .runs
        .iter()
        .map(|(_, t)| l2_distance(t, &f.hom))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let norm = l2_norm(&f.hom);
    let decreasing = errs.windows(2).all(|w| w[1] < w[0]);
    let last = errs[errs.len() - 1] / norm;
    check(
        decreasing && last <= 0.05,
        format!("errors {} at eps {:?}, final relative {last:.3e}", sci(&errs), f.eps),
    )
}

fn twoscale_pairing() -> Outcome {
    let eps = [1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0];
    let test = TwoScaleTest::monomial(0, Micro::Sin(1)).unwrap();
    let mut seq = Vec::new();
    let mut gaps = Vec::new();
    for &e in &eps {
        let n = (16.0 / e) as usize;
        let u: Vec<f64> = linspace(0.0, 1.0, n)
            .into_iter()
            .map(|x| x * (2.0 * PI * x / e).sin())
            .collect();
        gaps.push((pairing(&u, &test, e).map_err(|e| e.to_string())? - 0.25).abs());
        seq.push((e, u));
    }
    let limit = TwoScaleField::from_fn(1 << 14, 64, |x: f64, y| x * (2.0 * PI * y).sin());
    let family = TwoScaleTest::standard_family();
    let rows = twoscale_gap(&seq, &limit, &family).map_err(|e| e.to_string())?;
    let family_gap: Vec<f64> = eps
        .iter()
        .map(|&e| {
            rows.iter()
                .filter(|r| r.eps == e)
                .map(|r| r.gap)
                .fold(0.0, f64::max)
        })
        .collect();
    let non_increasing = gaps.windows(2).all(|w| w[1] <= w[0] + 1e-14);
    let decreasing = family_gap.windows(2).all(|w| w[1] < w[0]);
    check(
        gaps[2] <= 0.02 && non_increasing && decreasing,
        format!("gap at 1/64 {:.1e}, gaps {}, family max gaps {}", gaps[2], sci(&gaps), sci(&family_gap)),
    )
}

fn corrector_convergence(f: &Family) -> Outcome {
    let errs = f
        .runs
        .iter()
        .map(|(d, t)| corrector_error(t, d, &f.hom, &f.law))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let ratios: Vec<f64> = errs.windows(2).map(|w| w[1] / w[0]).collect();
    check(
        ratios.iter().all(|&r| r <= 0.8),
        format!("corrector errors {}, ratios {ratios:.3?}", sci(&errs)),
    )
}

fn apriori_uniformity(f: &Family) -> Outcome {
    let norms: Vec<[f64; 4]> = f.runs.iter().map(|(_, t)| apriori_monitor(t).as_array()).collect();
    let base = norms[0];
    let ok = norms.iter().all(|n| {
        n.iter()
            .zip(&base)
            .all(|(&v, &b)| v.is_finite() && v <= 10.0 * b && v >= b / 10.0)
    });
    check(ok, format!("norms by eps {norms:.4?}"))
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 harmonic-mean cell", harmonic_mean_cell()),
        ("2 p-growth cell", p_growth_cell()),
        ("3 2D laminate", laminate_2d()),
        ("4 conjugacy", conjugacy()),
        ("5 representative inequalities", representative_inequalities()),
        ("6 certificate suite", certificate_suite()),
        ("7 linear oracle", linear_oracle()),
        ("8 manufactured solution", manufactured()),
    ];
    match homogenization_family() {
        Ok(f) => {
            results.push(("9 homogenization convergence", homogenization_convergence(&f)));
            results.push(("10 two-scale pairing", twoscale_pairing()));
            results.push(("11 corrector convergence", corrector_convergence(&f)));
            results.push(("12 a-priori uniformity", apriori_uniformity(&f)));
        }
        Err(e) => {
            results.push(("9 homogenization convergence", Err(e.clone())));
            results.push(("10 two-scale pairing", twoscale_pairing()));
            results.push(("11 corrector convergence", Err(e.clone())));
            results.push(("12 a-priori uniformity", Err(e)));
        }
    }
    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(d) => println!("PASS criterion {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {name}: {d}")
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.1?}",
        results.len() - failed,
        start.elapsed()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
