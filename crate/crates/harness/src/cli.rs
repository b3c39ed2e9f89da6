use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use homoglab::cellsolve::{tabulate_effective_law, EffectiveLaw};
use homoglab::convexcore::Preset;
use homoglab::evolver::{phi_certificate, solve_parabolic, Field, ProblemData, Trajectory};
use homoglab::twoscale::{trajectory_gap, TwoScaleTest};

use crate::config::{LawSpec, StudyConfig};
use crate::error::HarnessError;
use crate::persist;
use crate::study::{reference_elements, representative, run_convergence_study};

#[derive(Debug, Parser)]
#[command(name = "homoglab", version, about = "Periodic homogenization experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tabulate an effective law from a flux preset.
    CellTabulate(TabulateArgs),
    /// Solve one eps-problem and certify it.
    Solve(SolveArgs),
    /// Solve the homogenized problem from a law file.
    Homogenize(HomogenizeArgs),
    /// Evaluate the certificate of a stored trajectory.
    Certify(CertifyArgs),
    /// Two-scale pairing gaps of the eps sequence of a configuration.
    TwoscaleCheck(TwoscaleArgs),
    /// Full convergence study.
    Study(StudyArgs),
}

#[derive(Debug, Args)]
pub struct TabulateArgs {
    /// Preset name (`two-phase`, `quadratic`, `power`, `abs`) or a full
    /// spec such as `two-phase(1,4,0.5)`.
    #[arg(long, default_value = "two-phase")]
    pub preset: String,
    #[arg(long, default_value_t = 2.0)]
    pub p: f64,
    #[arg(long, default_value_t = 1.0)]
    pub a1: f64,
    #[arg(long, default_value_t = 4.0)]
    pub a2: f64,
    #[arg(long, default_value_t = 0.5)]
    pub theta: f64,
    #[arg(long, default_value_t = 256)]
    pub m: usize,
    #[arg(long, default_value_t = 8.0)]
    pub xi_range: f64,
    #[arg(long, default_value_t = 513)]
    pub xi_points: usize,
    #[arg(long, default_value_t = 12.0)]
    pub eta_range: f64,
    #[arg(long, default_value_t = 64)]
    pub eta_points: usize,
    /// Also tabulate `F_0`.
    #[arg(long)]
    pub f0: bool,
    #[arg(long, default_value = "law.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Defaults to the smallest eps of the configuration.
    #[arg(long)]
    pub eps: Option<String>,
    #[arg(long, default_value = "trajectory.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct HomogenizeArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Tabulated when omitted.
    #[arg(long)]
    pub law: Option<PathBuf>,
    /// Defaults to a mesh nesting every eps mesh of the configuration.
    #[arg(long)]
    pub elements: Option<usize>,
    #[arg(long, default_value = "homogenized.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CertifyArgs {
    #[arg(long)]
    pub traj: PathBuf,
    /// `zero` (quadratic potentials, no source), a configuration file, or
    /// `meta` to rebuild the data from the trajectory header.
    #[arg(long, default_value = "meta")]
    pub data: String,
    /// Period used with a configuration file.
    #[arg(long)]
    pub eps: Option<String>,
    /// Certify against this law instead of an eps-problem.
    #[arg(long)]
    pub law: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TwoscaleArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated list replacing the configured sequence.
    #[arg(long)]
    pub eps: Option<String>,
    #[arg(long, default_value = "twoscale.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, overriding the configuration.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Relative outputs land under `HOMOGLAB_OUT` when it is set.
fn output_path(out: &Path) -> PathBuf {
    match std::env::var_os("HOMOGLAB_OUT") {
        Some(dir) if out.is_relative() => PathBuf::from(dir).join(out),
        _ => out.to_path_buf(),
    }
}

fn tabulate_preset(a: &TabulateArgs) -> Result<Preset<f64>, HarnessError> {
    let spec = if a.preset.contains('(') || a.preset == "abs" {
        a.preset.clone()
    } else {
        match a.preset.as_str() {
            "quadratic" => format!("quadratic({})", a.a1),
            "power" => format!("power({},{})", a.a1, a.p),
            "two-phase" if a.p == 2.0 => format!("two-phase({},{},{})", a.a1, a.a2, a.theta),
            "two-phase" => format!("two-phase({},{},{},{})", a.a1, a.a2, a.theta, a.p),
            other => return Err(HarnessError::Usage(format!("unknown preset `{other}`"))),
        }
    };
    Preset::parse(&spec).map_err(HarnessError::config)
}

fn load_config(path: &Path) -> Result<StudyConfig, HarnessError> {
    StudyConfig::parse(&persist::read_text(path)?)
}

fn parse_eps(text: &str) -> Result<f64, HarnessError> {
    crate::config::parse_number(text).map_err(HarnessError::Config)
}

/// Law of the configuration: loaded and hash-checked, or tabulated.
fn config_law(cfg: &StudyConfig, path: Option<&Path>) -> Result<EffectiveLaw<f64>, HarnessError> {
    match path.or(cfg.law_file.as_deref()) {
        Some(p) => {
            let law = persist::load_law(p)?;
            persist::check_law_hash(&law, &cfg.law.hash())?;
            Ok(law)
        }
        None => tabulate(&cfg.law),
    }
}

fn tabulate(spec: &LawSpec) -> Result<EffectiveLaw<f64>, HarnessError> {
    Ok(tabulate_effective_law(
        &spec.flux,
        &spec.xi(),
        &spec.eta(),
        &spec.grid()?,
        &spec.options(),
    )?)
}

fn certificate_lines(
    traj: &Trajectory<f64>,
    data: &ProblemData<f64>,
    cfg: Option<&StudyConfig>,
) -> Result<String, HarnessError> {
    let rep = match cfg {
        Some(c) => representative(c)?,
        None => Default::default(),
    };
    let c = phi_certificate(traj, data, &rep)?;
    let mut s = String::new();
    let _ = writeln!(s, "alpha = {}", c.alpha);
    let _ = writeln!(s, "gamma = {}", c.gamma);
    let _ = writeln!(s, "total = {}", c.total);
    let _ = writeln!(s, "scale = {}", c.scale);
    let _ = writeln!(s, "representative = {}", c.flux_representative.name());
    Ok(s)
}

fn describe(data: &ProblemData<f64>, traj: &mut Trajectory<f64>) {
    traj.meta.insert("phi".into(), data.phi.name());
    traj.meta.insert("flux".into(), data.flux.name());
    traj.meta.insert("source".into(), data.source.name());
    traj.meta.insert("initial".into(), data.initial.name());
    if let Some(e) = data.eps() {
        traj.meta.insert("eps".into(), e.to_string());
    }
}

fn cell_tabulate(a: &TabulateArgs) -> Result<String, HarnessError> {
    let spec = LawSpec {
        flux: tabulate_preset(a)?,
        m: a.m,
        xi_range: a.xi_range,
        xi_points: a.xi_points,
        eta_range: a.eta_range,
        eta_points: a.eta_points,
        with_f0: a.f0,
    };
    let law = tabulate(&spec)?;
    let out = output_path(&a.out);
    persist::save_law(&out, &law, &spec.hash())?;
    Ok(format!(
        "law = {}\nconjugacy_gap = {}\nlaw_hash = {}\n",
        out.display(),
        law.conjugacy_gap,
        spec.hash()
    ))
}

fn solve(a: &SolveArgs) -> Result<String, HarnessError> {
    let cfg = load_config(&a.config)?;
    let eps = match &a.eps {
        Some(e) => parse_eps(e)?,
        None => cfg.eps.iter().copied().fold(f64::INFINITY, f64::min),
    };
    let data = cfg.problem(eps)?;
    let mut traj = solve_parabolic(&data)?;
    describe(&data, &mut traj);
    traj.meta.insert("config_hash".into(), cfg.hash());
    let out = output_path(&a.out);
    persist::save_trajectory(&out, &traj)?;
    let mut s = format!("trajectory = {}\n", out.display());
    s.push_str(&certificate_lines(&traj, &data, Some(&cfg))?);
    Ok(s)
}

fn homogenize(a: &HomogenizeArgs) -> Result<String, HarnessError> {
    let cfg = load_config(&a.config)?;
    let law = config_law(&cfg, a.law.as_deref())?;
    let elements = match a.elements {
        Some(n) => n,
        None => {
            let meshes = cfg
                .eps
                .iter()
                .map(|&e| cfg.problem(e).map(|d| d.elements))
                .collect::<Result<Vec<_>, _>>()?;
            reference_elements(&meshes)
        }
    };
    let data = cfg.problem(cfg.eps[0])?.with_elements(elements).homogenized(&law)?;
    let mut traj = solve_parabolic(&data)?;
    describe(&data, &mut traj);
    traj.meta.insert("config_hash".into(), cfg.hash());
    traj.meta.insert("law_hash".into(), cfg.law.hash());
    let out = output_path(&a.out);
    persist::save_trajectory(&out, &traj)?;
    Ok(format!("trajectory = {}\nelements = {elements}\n", out.display()))
}

fn meta_field(traj: &Trajectory<f64>, key: &str) -> Result<String, HarnessError> {
    traj.meta
        .get(key)
        .cloned()
        .ok_or_else(|| HarnessError::Artifact(format!("trajectory has no `{key}` metadata")))
}

fn certify(a: &CertifyArgs) -> Result<String, HarnessError> {
    let traj = persist::load_trajectory(&a.traj)?;
    let steps = traj.steps();
    let (mut data, cfg) = match a.data.as_str() {
        "zero" => {
            let q = Preset::Quadratic { a: 1.0 };
            (ProblemData::new(1.0, traj.t_final, steps, traj.elements, q, q), None)
        }
        "meta" => {
            let preset = |k: &str| -> Result<Preset<f64>, HarnessError> {
                Preset::parse(&meta_field(&traj, k)?).map_err(|e| HarnessError::Artifact(e.to_string()))
            };
            let field = |k: &str| -> Result<Field<f64>, HarnessError> {
                Field::parse(&meta_field(&traj, k)?).map_err(|e| HarnessError::Artifact(e.to_string()))
            };
            let eps = match traj.meta.get("eps") {
                Some(e) => parse_eps(e)?,
                None => 1.0,
            };
            let data = ProblemData::new(eps, traj.t_final, steps, traj.elements, preset("phi")?, preset("flux")?)
                .with_source(field("source")?)
                .with_initial(field("initial")?);
            (data, None)
        }
        path => {
            let cfg = load_config(Path::new(path))?;
            if let Some(h) = traj.meta.get("config_hash") {
                if *h != cfg.hash() {
                    return Err(HarnessError::Artifact(format!(
                        "trajectory was produced under config hash {h}, not {}",
                        cfg.hash()
                    )));
                }
            }
            let eps = match (&a.eps, traj.meta.get("eps")) {
                (Some(e), _) => parse_eps(e)?,
                (None, Some(e)) => parse_eps(e)?,
                (None, None) => cfg.eps[0],
            };
            let mut data = cfg.problem(eps)?.with_elements(traj.elements);
            data.steps = steps;
            (data, Some(cfg))
        }
    };
    if let Some(p) = &a.law {
        let law = persist::load_law(p)?;
        if let Some(c) = &cfg {
            persist::check_law_hash(&law, &c.law.hash())?;
        }
        data = data.homogenized(&law)?;
    }
    data.validate()?;
    certificate_lines(&traj, &data, cfg.as_ref())
}

fn twoscale_check(a: &TwoscaleArgs) -> Result<String, HarnessError> {
    let mut cfg = load_config(&a.config)?;
    if let Some(list) = &a.eps {
        let eps = list.split(',').map(parse_eps).collect::<Result<Vec<_>, _>>()?;
        cfg = cfg.with_eps(eps)?;
    }
    let law = config_law(&cfg, None)?;
    let meshes = cfg
        .eps
        .iter()
        .map(|&e| cfg.problem(e).map(|d| d.elements))
        .collect::<Result<Vec<_>, _>>()?;
    let limit_data = cfg
        .problem(cfg.eps[0])?
        .with_elements(reference_elements(&meshes))
        .homogenized(&law)?;
    let limit = solve_parabolic(&limit_data)?;
    let trajs = cfg
        .eps
        .iter()
        .map(|&e| Ok((e, solve_parabolic(&cfg.problem(e)?)?)))
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let seq: Vec<(f64, &Trajectory<f64>)> = trajs.iter().map(|(e, t)| (*e, t)).collect();
    let tests = TwoScaleTest::standard_family();
    let rows = trajectory_gap(&seq, &limit, &tests)?;
    let mut csv = format!("# config_hash = {}\n", cfg.hash());
    csv.push_str("eps,test,pairing,limit,gap\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{},{},{}", r.eps, r.test, r.pairing, r.limit, r.gap);
    }
    let out = output_path(&a.out);
    persist::write_text(&out, &csv)?;
    let mut s = format!("table = {}\n", out.display());
    for &e in &cfg.eps {
        let max = rows.iter().filter(|r| r.eps == e).map(|r| r.gap).fold(0.0, f64::max);
        let _ = writeln!(s, "eps = {e} max_gap = {max}");
    }
    Ok(s)
}

fn study(a: &StudyArgs) -> Result<String, HarnessError> {
    let cfg = load_config(&a.config)?;
    let law = match &cfg.law_file {
        Some(_) => Some(config_law(&cfg, None)?),
        None => None,
    };
    let (report, law) = run_convergence_study(&cfg, law)?;
    let dir = match &a.out {
        Some(d) => output_path(d),
        None => cfg.output_dir(),
    };
    persist::write_text(&dir.join("report.csv"), &report.to_csv())?;
    persist::save_law(&dir.join("law.csv"), &law, &cfg.law.hash())?;
    let mut s = format!("report = {}\nrun_id = {}\n", dir.join("report.csv").display(), report.run_id);
    for r in &report.rows {
        match &r.outcome {
            Ok(m) => {
                let _ = writeln!(s, "eps = {} error_l2 = {} certificate = {}", r.eps, m.error_l2, m.cert_total);
            }
            Err(e) => {
                let _ = writeln!(s, "eps = {} failed: {e}", r.eps);
            }
        }
    }
    if report.partial {
        let failed = report.rows.iter().filter(|r| r.outcome.is_err()).count();
        return Err(HarnessError::Partial(format!(
            "{failed} of {} rows failed, report written to {}",
            report.rows.len(),
            dir.display()
        )));
    }
    Ok(s)
}

pub fn execute(cli: &Cli) -> Result<String, HarnessError> {
    match &cli.command {
        Command::CellTabulate(a) => cell_tabulate(a),
        Command::Solve(a) => solve(a),
        Command::Homogenize(a) => homogenize(a),
        Command::Certify(a) => certify(a),
        Command::TwoscaleCheck(a) => twoscale_check(a),
        Command::Study(a) => study(a),
    }
}

/// Runs the command line and returns the exit status. Failures print one
/// machine-readable `error ...` line on stderr.
pub fn run<I, S>(args: I) -> u8
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let err = HarnessError::Usage(e.kind().to_string());
            eprint!("{e}");
            eprintln!("{}", err.machine_line());
            return err.exit_code();
        }
    };
    match execute(&cli) {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(e) => {
            eprintln!("{}", e.machine_line());
            e.exit_code()
        }
    }
}
