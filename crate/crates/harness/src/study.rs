//! End-to-end convergence study: one homogenized reference, one row per `eps`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use homoglab::cellsolve::{tabulate_effective_law, EffectiveLaw};
use homoglab::evolver::{
    apriori_monitor, l2_distance, l2_norm, phi_certificate, solve_parabolic, FluxRepresentative,
    ProblemData, Trajectory,
};
use homoglab::fitz::{MonotoneGraph, RepresentativeFn};
use homoglab::scalar::symmetric_grid;
use homoglab::twoscale::{corrector_error, trajectory_gap, TwoScaleTest};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{CertificateRep, StudyConfig};
use crate::error::HarnessError;
use crate::persist::{self, SCHEMA_VERSION};

/// Diagnostics of one successful `eps` run.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMetrics {
    /// `||u_eps - u_hom||_{L^2(Omega_T)}`.
    pub error_l2: f64,
    pub relative_error: f64,
    pub cert_alpha: f64,
    pub cert_gamma: f64,
    pub cert_total: f64,
    pub cert_scale: f64,
    /// A +0.1 bump at a seeded node strictly raised the certificate.
    pub perturbation_increases: bool,
    pub norms: [f64; 4],
    pub twoscale_gap: f64,
    pub corrector_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub eps: f64,
    pub elements: usize,
    /// `Err` carries the failure message of a sub-solve.
    pub outcome: Result<RowMetrics, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyReport {
    pub run_id: String,
    pub config_hash: String,
    pub partial: bool,
    pub rows: Vec<StudyRow>,
    pub meta: BTreeMap<String, String>,
}

const COLUMNS: &str = "run_id,config_hash,eps,elements,status,error_l2,relative_error,cert_alpha,cert_gamma,cert_total,cert_scale,perturbation_increases,u_l2_h1,z_l2,w_linf_l2,dtw_l2_hm1,twoscale_gap,corrector_error,message";

impl StudyReport {
    /// Rows by decreasing `eps`.
    pub fn errors(&self) -> Vec<Option<f64>> {
        self.rows
            .iter()
            .map(|r| r.outcome.as_ref().ok().map(|m| m.error_l2))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# schema = {SCHEMA_VERSION}");
        let _ = writeln!(out, "# run_id = {}", self.run_id);
        let _ = writeln!(out, "# config_hash = {}", self.config_hash);
        let _ = writeln!(out, "# partial = {}", self.partial);
        for (k, v) in &self.meta {
            let _ = writeln!(out, "# {k} = {v}");
        }
        let _ = writeln!(out, "{COLUMNS}");
        for r in &self.rows {
            let _ = write!(out, "{},{},{},{},", self.run_id, self.config_hash, r.eps, r.elements);
            match &r.outcome {
                Ok(m) => {
                    let _ = writeln!(
                        out,
                        "ok,{},{},{},{},{},{},{},{},{},{},{},{},{},",
                        m.error_l2,
                        m.relative_error,
                        m.cert_alpha,
                        m.cert_gamma,
                        m.cert_total,
                        m.cert_scale,
                        m.perturbation_increases,
                        m.norms[0],
                        m.norms[1],
                        m.norms[2],
                        m.norms[3],
                        m.twoscale_gap,
                        m.corrector_error
                    );
                }
                Err(msg) => {
                    let clean = msg.replace([',', '\n', '\r'], ";");
                    let _ = writeln!(out, "failed,,,,,,,,,,,,,,{clean}");
                }
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, HarnessError> {
        let bad = |m: String| HarnessError::Artifact(format!("report: {m}"));
        let mut meta = BTreeMap::new();
        let mut rows = Vec::new();
        let mut header = false;
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some((k, v)) = rest.split_once('=') {
                    meta.insert(k.trim().to_string(), v.trim().to_string());
                }
                continue;
            }
            if !header {
                if line != COLUMNS {
                    return Err(bad("unexpected columns".into()));
                }
                header = true;
                continue;
            }
            let cols: Vec<&str> = line.splitn(19, ',').collect();
            if cols.len() != 19 {
                return Err(bad(format!("short row `{line}`")));
            }
            let num = |i: usize| -> Result<f64, HarnessError> {
                cols[i].parse().map_err(|_| bad(format!("bad number `{}`", cols[i])))
            };
            let eps = num(2)?;
            let elements = cols[3].parse().map_err(|_| bad("bad elements".into()))?;
            let outcome = match cols[4] {
                "ok" => Ok(RowMetrics {
                    error_l2: num(5)?,
                    relative_error: num(6)?,
                    cert_alpha: num(7)?,
                    cert_gamma: num(8)?,
                    cert_total: num(9)?,
                    cert_scale: num(10)?,
                    perturbation_increases: cols[11] == "true",
                    norms: [num(12)?, num(13)?, num(14)?, num(15)?],
                    twoscale_gap: num(16)?,
                    corrector_error: num(17)?,
                }),
                "failed" => Err(cols[18].to_string()),
                s => return Err(bad(format!("unknown status `{s}`"))),
            };
            rows.push(StudyRow {
                eps,
                elements,
                outcome,
            });
        }
        match meta.remove("schema").as_deref() {
            Some(SCHEMA_VERSION) => {}
            other => return Err(bad(format!("schema {other:?}, expected {SCHEMA_VERSION}"))),
        }
        let mut take = |k: &str| meta.remove(k).ok_or_else(|| bad(format!("missing `{k}`")));
        let run_id = take("run_id")?;
        let config_hash = take("config_hash")?;
        let partial = take("partial")? == "true";
        Ok(Self {
            run_id,
            config_hash,
            partial,
            rows,
            meta,
        })
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Mesh refined enough to nest every `eps` mesh.
pub fn reference_elements(meshes: &[usize]) -> usize {
    meshes.iter().fold(1, |l, &n| l / gcd(l, n) * n)
}

/// Fitzpatrick representative sampled from the flux preset, with the
/// sampling tolerance `max dv dw / 4`.
fn sampled_fitzpatrick(cfg: &StudyConfig) -> FluxRepresentative<f64> {
    let flux = cfg.flux;
    let states = symmetric_grid(cfg.law.xi_range, 8 * cfg.law.xi_points);
    FluxRepresentative::PerCell(Arc::new(move |y: f64| {
        let g = MonotoneGraph::from_preset(flux, y, &states, 1)?;
        let tol = g
            .samples()
            .windows(2)
            .map(|w| 0.25 * (w[1].0[0] - w[0].0[0]).abs() * (w[1].1[0] - w[0].1[0]).abs())
            .fold(1e-12, f64::max);
        Ok(RepresentativeFn::fitzpatrick(g, tol))
    }))
}

fn graph_fitzpatrick(cfg: &StudyConfig, text: &str) -> Result<FluxRepresentative<f64>, HarnessError> {
    let g = MonotoneGraph::<f64, 1>::from_csv(text).map_err(HarnessError::config)?;
    let tol = g
        .samples()
        .windows(2)
        .map(|w| 0.25 * (w[1].0[0] - w[0].0[0]).abs() * (w[1].1[0] - w[0].1[0]).abs())
        .fold(cfg.solver.tol, f64::max);
    let rep = RepresentativeFn::fitzpatrick(g, tol);
    Ok(FluxRepresentative::PerCell(Arc::new(move |_| Ok(rep.clone()))))
}

pub fn representative(cfg: &StudyConfig) -> Result<FluxRepresentative<f64>, HarnessError> {
    match &cfg.certificate {
        CertificateRep::Fenchel => Ok(FluxRepresentative::Fenchel),
        CertificateRep::Fitzpatrick { graph: None } => Ok(sampled_fitzpatrick(cfg)),
        CertificateRep::Fitzpatrick { graph: Some(p) } => graph_fitzpatrick(cfg, &persist::read_text(p)?),
    }
}

/// Total after a `+0.1` bump of `u` at a seeded (step, node).
fn bumped_total(
    traj: &Trajectory<f64>,
    data: &ProblemData<f64>,
    rep: &FluxRepresentative<f64>,
    seed: u64,
) -> Result<f64, homoglab::Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=traj.steps());
    let j = rng.gen_range(1..traj.elements);
    let mut bumped = traj.clone();
    bumped.states[n].u[j] += 0.1;
    Ok(phi_certificate(&bumped, data, rep)?.total)
}

fn run_row(
    cfg: &StudyConfig,
    eps: f64,
    index: usize,
    law: &EffectiveLaw<f64>,
    hom: &Result<Trajectory<f64>, String>,
    rep: &FluxRepresentative<f64>,
    tests: &[TwoScaleTest<f64>],
) -> StudyRow {
    let data = cfg.problem(eps);
    let elements = data.as_ref().map(|d| d.elements).unwrap_or(0);
    let outcome = (|| -> Result<RowMetrics, String> {
        let data = data.map_err(|e| e.to_string())?;
        let hom = hom.as_ref().map_err(|e| format!("homogenized reference: {e}"))?;
        let traj = solve_parabolic(&data).map_err(|e| e.to_string())?;
        let error_l2 = l2_distance(&traj, hom).map_err(|e| e.to_string())?;
        let cert = phi_certificate(&traj, &data, rep).map_err(|e| e.to_string())?;
        let bumped = bumped_total(&traj, &data, rep, cfg.seed.wrapping_add(index as u64))
            .map_err(|e| e.to_string())?;
        let gaps = trajectory_gap(&[(eps, &traj)], hom, tests).map_err(|e| e.to_string())?;
        let corrector = corrector_error(&traj, &data, hom, law).map_err(|e| e.to_string())?;
        Ok(RowMetrics {
            error_l2,
            relative_error: error_l2 / l2_norm(hom).max(f64::MIN_POSITIVE),
            cert_alpha: cert.alpha,
            cert_gamma: cert.gamma,
            cert_total: cert.total,
            cert_scale: cert.scale,
            perturbation_increases: bumped > cert.total,
            norms: apriori_monitor(&traj).as_array(),
            twoscale_gap: gaps.iter().map(|g| g.gap).fold(0.0, f64::max),
            corrector_error: corrector,
        })
    })();
    StudyRow {
        eps,
        elements,
        outcome,
    }
}

/// Uses `law` when given, otherwise tabulates it.
pub fn run_convergence_study(
    cfg: &StudyConfig,
    law: Option<EffectiveLaw<f64>>,
) -> Result<(StudyReport, EffectiveLaw<f64>), HarnessError> {
    let law_hash = cfg.law.hash();
    let law = match law {
        Some(l) => {
            persist::check_law_hash(&l, &law_hash)?;
            l
        }
        None => tabulate_effective_law(
            &cfg.law.flux,
            &cfg.law.xi(),
            &cfg.law.eta(),
            &cfg.law.grid()?,
            &cfg.law.options(),
        )?,
    };
    let rep = representative(cfg)?;
    let meshes = cfg
        .eps
        .iter()
        .map(|&e| cfg.problem(e).map(|d| d.elements))
        .collect::<Result<Vec<_>, _>>()?;
    let reference = reference_elements(&meshes);
    let hom = cfg
        .problem(cfg.eps[0])?
        .with_elements(reference)
        .homogenized(&law)
        .and_then(|d| solve_parabolic(&d))
        .map_err(|e| e.to_string());
    let tests = TwoScaleTest::standard_family();

    let mut order: Vec<(usize, f64)> = cfg.eps.iter().copied().enumerate().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1));
    let rows: Vec<StudyRow> = order
        .par_iter()
        .map(|&(i, e)| run_row(cfg, e, i, &law, &hom, &rep, &tests))
        .collect();

    let mut meta = BTreeMap::new();
    meta.insert("law_hash".into(), law_hash);
    meta.insert("law_conjugacy_gap".into(), law.conjugacy_gap.to_string());
    meta.insert("reference_elements".into(), reference.to_string());
    meta.insert("seed".into(), cfg.seed.to_string());
    meta.insert("tests".into(), tests.iter().map(|t| t.id()).collect::<Vec<_>>().join(" | "));
    for (i, line) in cfg.canonical().lines().enumerate() {
        meta.insert(format!("config.{i:02}"), line.to_string());
    }
    if let Err(e) = &hom {
        meta.insert("reference_error".into(), e.replace(['\n', '\r'], " "));
    }
    let report = StudyReport {
        run_id: cfg.run_id(),
        config_hash: cfg.hash(),
        partial: rows.iter().any(|r| r.outcome.is_err()),
        rows,
        meta,
    };
    Ok((report, law))
}
