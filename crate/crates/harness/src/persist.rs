//! Artifact files. Every artifact carries `schema` and a hash of the settings
//! that produced it; loaders reject other schema versions.

use std::fs;
use std::path::Path;

use homoglab::cellsolve::EffectiveLaw;
use homoglab::evolver::Trajectory;

use crate::error::HarnessError;

pub const SCHEMA_VERSION: &str = "1";

pub fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String, HarnessError> {
    fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))
}

fn check_schema(found: Option<&String>, what: &str) -> Result<(), HarnessError> {
    match found.map(String::as_str) {
        Some(SCHEMA_VERSION) => Ok(()),
        Some(v) => Err(HarnessError::Artifact(format!(
            "{what} has schema {v}, expected {SCHEMA_VERSION}"
        ))),
        None => Err(HarnessError::Artifact(format!("{what} has no schema version"))),
    }
}

pub fn save_law(path: &Path, law: &EffectiveLaw<f64>, law_hash: &str) -> Result<(), HarnessError> {
    let mut law = law.clone();
    law.meta.insert("schema".into(), SCHEMA_VERSION.into());
    law.meta.insert("law_hash".into(), law_hash.into());
    write_text(path, &law.to_text())
}

pub fn load_law(path: &Path) -> Result<EffectiveLaw<f64>, HarnessError> {
    let law = EffectiveLaw::from_text(&read_text(path)?)
        .map_err(|e| HarnessError::Artifact(format!("{}: {e}", path.display())))?;
    check_schema(law.meta.get("schema"), "law file")?;
    Ok(law)
}

/// Refuses a law tabulated under different settings.
pub fn check_law_hash(law: &EffectiveLaw<f64>, expected: &str) -> Result<(), HarnessError> {
    match law.meta.get("law_hash") {
        Some(h) if h == expected => Ok(()),
        Some(h) => Err(HarnessError::Artifact(format!(
            "law was tabulated under hash {h}, configuration expects {expected}"
        ))),
        None => Err(HarnessError::Artifact("law file carries no law_hash".into())),
    }
}

pub fn save_trajectory(path: &Path, traj: &Trajectory<f64>) -> Result<(), HarnessError> {
    let mut traj = traj.clone();
    traj.meta.insert("schema".into(), SCHEMA_VERSION.into());
    write_text(path, &traj.to_csv())
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory<f64>, HarnessError> {
    let traj = Trajectory::from_csv(&read_text(path)?)
        .map_err(|e| HarnessError::Artifact(format!("{}: {e}", path.display())))?;
    check_schema(traj.meta.get("schema"), "trajectory file")?;
    Ok(traj)
}
