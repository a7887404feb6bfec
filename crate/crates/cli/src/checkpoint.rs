//! Checkpoints: `<stem>.params` (parameter-set binary) plus `<stem>.json`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use chunkstream::model::{Dit, ModelConfig};
use chunkstream::numerics::serialize::{read_params, write_params};
use chunkstream::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub role: String,
    pub model: ModelConfig,
    pub steps: usize,
    /// Content checksum of the parameters, checked on load.
    pub checksum: String,
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn params_path(stem: &Path) -> PathBuf {
    with_ext(stem, "params")
}

pub fn sidecar_path(stem: &Path) -> PathBuf {
    with_ext(stem, "json")
}

pub fn save(stem: &Path, model: &Dit, role: &str, steps: usize) -> Result<()> {
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(params_path(stem))?);
    write_params(&mut w, &model.params)?;
    w.flush()?;
    let side = Sidecar {
        role: role.to_string(),
        model: model.config.clone(),
        steps,
        checksum: format!("{:016x}", model.params.checksum()),
    };
    fs::write(sidecar_path(stem), serde_json::to_string_pretty(&side)? + "\n")?;
    Ok(())
}

pub fn load(stem: &Path) -> Result<(Dit, Sidecar)> {
    let side: Sidecar = serde_json::from_reader(BufReader::new(
        File::open(sidecar_path(stem)).map_err(|e| missing(stem, e))?,
    ))?;
    let params = read_params(&mut BufReader::new(
        File::open(params_path(stem)).map_err(|e| missing(stem, e))?,
    ))?;
    let got = format!("{:016x}", params.checksum());
    if got != side.checksum {
        return Err(Error::Format(format!(
            "{}: parameter checksum {got} does not match sidecar {}",
            stem.display(),
            side.checksum
        )));
    }
    let dit = Dit::from_params(side.model.clone(), params)?;
    Ok((dit, side))
}

fn missing(stem: &Path, e: std::io::Error) -> Error {
    Error::Configuration(format!("checkpoint {}: {e}", stem.display()))
}
