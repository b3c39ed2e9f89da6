//! Line-oriented study configuration.
//!
//! ```text
//! [problem]
//! phi = quadratic(1)
//! flux = two-phase(1,4,0.5)
//! source = sin-pi(1)
//! initial = sin-pi(1)
//! t_final = 0.2
//! steps = 64
//!
//! [study]
//! eps = 1/8, 1/16, 1/32
//! mesh_factor = 16
//! seed = 7
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use homoglab::cellsolve::{CellGrid, TabulateOptions};
use homoglab::convexcore::Preset;
use homoglab::evolver::{Field, ProblemData, SolverOptions};
use homoglab::scalar::symmetric_grid;
use sha2::{Digest, Sha256};

use crate::error::HarnessError;

/// Flux representative used for certificates.
#[derive(Debug, Clone, PartialEq)]
pub enum CertificateRep {
    Fenchel,
    /// Fitzpatrick function of the flux graph, sampled from the preset or
    /// read from a graph file.
    Fitzpatrick { graph: Option<PathBuf> },
}

/// Settings of a law tabulation; their hash keys law artifacts.
#[derive(Debug, Clone, PartialEq)]
pub struct LawSpec {
    pub flux: Preset<f64>,
    pub m: usize,
    pub xi_range: f64,
    pub xi_points: usize,
    pub eta_range: f64,
    pub eta_points: usize,
    pub with_f0: bool,
}

impl LawSpec {
    pub fn canonical(&self) -> String {
        format!(
            "flux={};m={};xi_range={};xi_points={};eta_range={};eta_points={};f0={}",
            self.flux.name(),
            self.m,
            self.xi_range,
            self.xi_points,
            self.eta_range,
            self.eta_points,
            self.with_f0
        )
    }

    pub fn hash(&self) -> String {
        sha256_hex(&self.canonical())
    }

    pub fn grid(&self) -> Result<CellGrid<f64>, HarnessError> {
        CellGrid::new(1, self.m).map_err(HarnessError::config)
    }

    pub fn xi(&self) -> Vec<f64> {
        symmetric_grid(self.xi_range, self.xi_points)
    }

    pub fn eta(&self) -> Vec<f64> {
        symmetric_grid(self.eta_range, self.eta_points)
    }

    pub fn options(&self) -> TabulateOptions<f64> {
        TabulateOptions {
            with_f0: self.with_f0,
            ..TabulateOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub phi: Preset<f64>,
    pub flux: Preset<f64>,
    pub source: Field<f64>,
    pub initial: Field<f64>,
    pub t_final: f64,
    pub steps: usize,
    pub eps: Vec<f64>,
    pub mesh_factor: usize,
    pub law: LawSpec,
    /// Existing law file to use instead of tabulating.
    pub law_file: Option<PathBuf>,
    pub solver: SolverOptions<f64>,
    pub certificate: CertificateRep,
    pub output: PathBuf,
    pub seed: u64,
    canonical: String,
}

fn sha256_hex(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

/// Accepts decimals and fractions such as `1/16`.
pub fn parse_number(text: &str) -> Result<f64, String> {
    let text = text.trim();
    let v = match text.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| format!("bad number `{text}`"))?;
            let b: f64 = b.trim().parse().map_err(|_| format!("bad number `{text}`"))?;
            a / b
        }
        None => text.parse().map_err(|_| format!("bad number `{text}`"))?,
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("bad number `{text}`"))
    }
}

/// Raw `section.key -> value` table.
pub fn parse_sections(text: &str) -> Result<BTreeMap<String, String>, HarnessError> {
    let mut out = BTreeMap::new();
    let mut section = String::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| HarnessError::Config(format!("line {}: unclosed section", no + 1)))?;
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("line {}: expected `key = value`", no + 1)))?;
        let key = if section.is_empty() {
            k.trim().to_string()
        } else {
            format!("{section}.{}", k.trim())
        };
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(HarnessError::Config(format!("line {}: duplicate key `{key}`", no + 1)));
        }
    }
    Ok(out)
}

struct Table(BTreeMap<String, String>);

impl Table {
    fn take(&mut self, key: &str) -> Option<String> {
        self.0.remove(key)
    }

    fn text(&mut self, key: &str, default: &str) -> String {
        self.take(key).unwrap_or_else(|| default.to_string())
    }

    fn number(&mut self, key: &str, default: f64) -> Result<f64, HarnessError> {
        match self.take(key) {
            Some(v) => parse_number(&v).map_err(|e| HarnessError::Config(format!("{key}: {e}"))),
            None => Ok(default),
        }
    }

    fn count(&mut self, key: &str, default: usize) -> Result<usize, HarnessError> {
        match self.take(key) {
            Some(v) => v
                .parse()
                .map_err(|_| HarnessError::Config(format!("{key}: expected a count, got `{v}`"))),
            None => Ok(default),
        }
    }
}

impl StudyConfig {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut t = Table(parse_sections(text)?);
        let preset = |key: &str, v: String| {
            Preset::parse(&v).map_err(|e| HarnessError::Config(format!("{key}: {e}")))
        };
        let field = |key: &str, v: String| {
            Field::parse(&v).map_err(|e| HarnessError::Config(format!("{key}: {e}")))
        };
        let phi = preset("problem.phi", t.text("problem.phi", "quadratic(1)"))?;
        let flux_text = t
            .take("problem.flux")
            .ok_or_else(|| HarnessError::Config("problem.flux is required".into()))?;
        let flux = preset("problem.flux", flux_text)?;
        let source = field("problem.source", t.text("problem.source", "zero"))?;
        let initial = field("problem.initial", t.text("problem.initial", "zero"))?;
        let t_final = t.number("problem.t_final", 0.2)?;
        let steps = t.count("problem.steps", 64)?;

        let eps_text = t
            .take("study.eps")
            .ok_or_else(|| HarnessError::Config("study.eps is required".into()))?;
        let eps = eps_text
            .split(',')
            .map(|s| parse_number(s).map_err(|e| HarnessError::Config(format!("study.eps: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let mesh_factor = t.count("study.mesh_factor", 16)?;
        let seed = t.count("study.seed", 0)? as u64;
        let output = PathBuf::from(t.text("study.output", "homoglab-out"));

        let law = LawSpec {
            flux,
            m: t.count("cell.m", 64)?,
            xi_range: t.number("cell.xi_range", 8.0)?,
            xi_points: t.count("cell.xi_points", 513)?,
            eta_range: t.number("cell.eta_range", 12.0)?,
            eta_points: t.count("cell.eta_points", 64)?,
            with_f0: t.text("cell.f0", "false") == "true",
        };
        let law_file = t.take("cell.law").map(PathBuf::from);

        let mut solver = SolverOptions::default();
        solver.tol = t.number("solver.tol", solver.tol)?;
        solver.max_iter = t.count("solver.max_iter", solver.max_iter)?;
        solver.inclusion_tol = t.number("solver.inclusion_tol", solver.inclusion_tol)?;
        solver.lambda_min = t.number("solver.lambda_min", solver.lambda_min)?;

        let certificate = match t.text("certificate.representative", "fenchel").as_str() {
            "fenchel" => CertificateRep::Fenchel,
            "fitzpatrick" => CertificateRep::Fitzpatrick {
                graph: t.take("certificate.graph").map(PathBuf::from),
            },
            other => {
                return Err(HarnessError::Config(format!(
                    "certificate.representative: unknown `{other}`"
                )))
            }
        };
        if let Some(k) = t.0.keys().next() {
            return Err(HarnessError::Config(format!("unknown key `{k}`")));
        }

        let mut cfg = StudyConfig {
            phi,
            flux,
            source,
            initial,
            t_final,
            steps,
            eps,
            mesh_factor,
            law,
            law_file,
            solver,
            certificate,
            output,
            seed,
            canonical: String::new(),
        };
        cfg.validate()?;
        cfg.canonical = cfg.render();
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.eps.is_empty() {
            return bad("study.eps is empty".into());
        }
        for (i, &e) in self.eps.iter().enumerate() {
            if !(e > 0.0 && e <= 1.0) {
                return bad(format!("eps {e} outside (0, 1]"));
            }
            if self.eps[..i].contains(&e) {
                return bad(format!("eps {e} listed twice"));
            }
            self.problem(e)?;
        }
        for (name, v) in [
            ("solver.tol", self.solver.tol),
            ("solver.inclusion_tol", self.solver.inclusion_tol),
            ("solver.lambda_min", self.solver.lambda_min),
            ("problem.t_final", self.t_final),
            ("cell.xi_range", self.law.xi_range),
            ("cell.eta_range", self.law.eta_range),
        ] {
            if !(v > 0.0) {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.steps == 0 || self.law.m == 0 || self.law.xi_points < 2 || self.law.eta_points < 2 {
            return bad("counts must be positive".into());
        }
        Ok(())
    }

    /// Canonical text: every setting in a fixed order, one per line.
    fn render(&self) -> String {
        let cert = match &self.certificate {
            CertificateRep::Fenchel => "fenchel".to_string(),
            CertificateRep::Fitzpatrick { graph: None } => "fitzpatrick".to_string(),
            CertificateRep::Fitzpatrick { graph: Some(p) } => format!("fitzpatrick:{}", p.display()),
        };
        let eps: Vec<String> = self.eps.iter().map(|e| e.to_string()).collect();
        let mut s = String::new();
        let _ = writeln!(s, "phi={}", self.phi.name());
        let _ = writeln!(s, "source={}", self.source.name());
        let _ = writeln!(s, "initial={}", self.initial.name());
        let _ = writeln!(s, "t_final={}", self.t_final);
        let _ = writeln!(s, "steps={}", self.steps);
        let _ = writeln!(s, "eps={}", eps.join(","));
        let _ = writeln!(s, "mesh_factor={}", self.mesh_factor);
        let _ = writeln!(s, "law={}", self.law.canonical());
        if let Some(p) = &self.law_file {
            let _ = writeln!(s, "law_file={}", p.display());
        }
        let _ = writeln!(
            s,
            "solver={},{},{},{}",
            self.solver.tol, self.solver.max_iter, self.solver.inclusion_tol, self.solver.lambda_min
        );
        let _ = writeln!(s, "certificate={cert}");
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }

    /// Same configuration over another `eps` sequence.
    pub fn with_eps(mut self, eps: Vec<f64>) -> Result<Self, HarnessError> {
        self.eps = eps;
        self.validate()?;
        self.canonical = self.render();
        Ok(self)
    }

    pub fn canonical(&self) -> &str {
        &self.canonical
    }

    /// SHA-256 of the canonical text. The output directory is not part of it.
    pub fn hash(&self) -> String {
        sha256_hex(&self.canonical)
    }

    /// Deterministic run id derived from the hash.
    pub fn run_id(&self) -> String {
        self.hash()[..12].to_string()
    }

    pub fn problem(&self, eps: f64) -> Result<ProblemData<f64>, HarnessError> {
        let mut data = ProblemData::with_period(eps, self.mesh_factor, self.t_final, self.steps, self.phi, self.flux)
            .map_err(HarnessError::config)?
            .with_source(self.source.clone())
            .with_initial(self.initial.clone());
        data.solver = self.solver;
        Ok(data)
    }

    /// Output directory, overridden by `HOMOGLAB_OUT`.
    pub fn output_dir(&self) -> PathBuf {
        std::env::var_os("HOMOGLAB_OUT")
            .map(PathBuf::from)
            .unwrap_or_else(|| self.output.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "[problem]\nflux = two-phase(1,4,0.5)\n[study]\neps = 1/8, 1/16\n";

    #[test]
    fn parses_fractions_and_defaults() {
        let cfg = StudyConfig::parse(BASE).unwrap();
        assert_eq!(cfg.eps, vec![0.125, 0.0625]);
        assert_eq!(cfg.mesh_factor, 16);
        assert_eq!(cfg.problem(0.0625).unwrap().elements, 256);
    }

    #[test]
    fn hash_ignores_layout_but_not_values() {
        let a = StudyConfig::parse(BASE).unwrap();
        let b = StudyConfig::parse(&format!("# comment\n\n{}", BASE.replace(" = ", "="))).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = StudyConfig::parse(&BASE.replace("1/16", "1/32")).unwrap();
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn rejects_bad_configs() {
        for text in [
            "[problem]\nflux = two-phase(1,4,0.5)\n",
            "[problem]\nflux = nope\n[study]\neps = 1/8\n",
            "[problem]\nflux = abs\n[study]\neps = 1/8, 0.125\n",
            "[problem]\nflux = abs\n[study]\neps = 1.5\n",
            "[problem]\nflux = abs\n[study]\neps = 0.3\n",
            "[problem]\nflux = abs\ncolour = blue\n[study]\neps = 1/8\n",
            "[problem\nflux = abs\n",
            "[problem]\nflux abs\n",
            "[problem]\nflux = abs\n[study]\neps = 1/8\n[solver]\ntol = -1\n",
        ] {
            assert!(matches!(StudyConfig::parse(text), Err(HarnessError::Config(_))), "{text}");
        }
    }
}
