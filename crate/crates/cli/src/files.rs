//! On-disk formats. Every JSON file carries `format_version`, the config hash
//! and the seed; CSV files start with a `#` comment line holding the same.

use std::fs;
use std::io::Write;
use std::path::Path;

use histodyn_core::lbn::{FoldLog, LbnEnsemble};
use histodyn_core::npsde::{FitLog, NpsdeModel};
use histodyn_core::statespace::{LatentPanel, PcaModel};
use histodyn_core::{Error, Matrix, PsdMatrix, SdeModel, StateVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Provenance stamped on every output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub config_hash: String,
    pub seed: u64,
}

impl Stamp {
    /// SHA-256 over the command name, its canonical JSON parameters and the
    /// contents of every input file. Paths themselves are not hashed.
    pub fn new(command: &str, params: &impl Serialize, inputs: &[&Path], seed: u64) -> Result<Self> {
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update([0u8]);
        h.update(serde_json::to_vec(params)?);
        for p in inputs {
            h.update([0u8]);
            h.update(read_bytes(p)?);
        }
        Ok(Self { config_hash: hex::encode(h.finalize()), seed })
    }

    pub fn csv_comment(&self) -> String {
        format!("# config_hash={} seed={}\n", self.config_hash, self.seed)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PanelFile {
    pub format_version: u32,
    #[serde(flatten)]
    pub stamp: Stamp,
    pub panel: LatentPanel,
    pub pca: Option<PcaModel>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "estimator", rename_all = "snake_case")]
pub enum FittedModel {
    Lbn { ensemble: LbnEnsemble, log: Vec<FoldLog> },
    Npsde { model: NpsdeModel, log: FitLog },
}

impl FittedModel {
    pub fn sde(&self) -> &dyn SdeModel {
        match self {
            FittedModel::Lbn { ensemble, .. } => ensemble,
            FittedModel::Npsde { model, .. } => model,
        }
    }
}

impl SdeModel for FittedModel {
    fn dim(&self) -> usize {
        self.sde().dim()
    }
    fn drift(&self, x: &[f64]) -> StateVector {
        self.sde().drift(x)
    }
    fn diffusion(&self, x: &[f64]) -> PsdMatrix {
        self.sde().diffusion(x)
    }
    fn drift_jacobian(&self, x: &[f64]) -> Matrix {
        self.sde().drift_jacobian(x)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    #[serde(flatten)]
    pub stamp: Stamp,
    pub fitted: FittedModel,
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| CliError::Read { path: path.to_path_buf(), source })
}

fn check_version(path: &Path, text: &[u8]) -> Result<()> {
    #[derive(Deserialize)]
    struct Probe {
        format_version: Option<u32>,
    }
    let probe: Probe = serde_json::from_slice(text)?;
    match probe.format_version {
        Some(FORMAT_VERSION) => Ok(()),
        Some(v) => Err(Error::Format(format!("{}: format_version {v}, expected {FORMAT_VERSION}", path.display())).into()),
        None => Err(Error::Format(format!("{}: missing format_version", path.display())).into()),
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    check_version(path, &bytes)?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let wrap = |source| CliError::Write { path: path.to_path_buf(), source };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(wrap)?;
    }
    let mut f = fs::File::create(path).map_err(wrap)?;
    f.write_all(bytes).map_err(wrap)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

/// Writes the stamp comment followed by whatever `body` produces.
pub fn write_csv(path: &Path, stamp: &Stamp, body: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut bytes = stamp.csv_comment().into_bytes();
    body(&mut bytes)?;
    write_file(path, &bytes)
}
