use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, sym_eigendecompose, Matrix};
use crate::types::{StateVector, TimeRescaling};

use super::{build_unit, LatentPanel, Panel};

/// Column roles for [`pca_fit`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PcaConfig {
    /// Number of principal components to keep.
    pub components: usize,
    /// Columns log10-transformed before standardization.
    pub log_columns: Vec<usize>,
    /// Columns appended to the state as standardized values, outside the PCA.
    pub passthrough: Vec<usize>,
    /// Per-component raw column whose loading is made nonnegative. Missing
    /// entries default to the column with the largest absolute loading.
    pub anchors: Vec<usize>,
}

/// Fitted log → standardize → project map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub columns: Vec<String>,
    pub log_columns: Vec<usize>,
    /// Columns entering the PCA, in loading order.
    pub pca_columns: Vec<usize>,
    pub passthrough_columns: Vec<usize>,
    /// Per raw column; only entries of used columns are meaningful.
    pub column_means: Vec<f64>,
    pub column_stds: Vec<f64>,
    /// k × |pca_columns|, orthonormal rows.
    pub components: Matrix,
    pub explained_variance_ratio: Vec<f64>,
    pub sign_anchor: Vec<usize>,
    pub fitted_rows: usize,
}

impl PcaModel {
    pub fn num_components(&self) -> usize {
        self.components.rows()
    }

    /// Latent dimension: components plus pass-through columns.
    pub fn latent_dim(&self) -> usize {
        self.num_components() + self.passthrough_columns.len()
    }

    pub fn axis_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (1..=self.num_components()).map(|k| format!("PC{k}")).collect();
        names.extend(self.passthrough_columns.iter().map(|&c| self.columns[c].clone()));
        names
    }

    fn used_columns(&self) -> Vec<usize> {
        self.pca_columns.iter().chain(&self.passthrough_columns).copied().collect()
    }

    fn transformed(&self, column: usize, raw: f64) -> Result<f64> {
        let v = if self.log_columns.contains(&column) { log10_checked(&self.columns[column], raw)? } else { raw };
        Ok((v - self.column_means[column]) / self.column_stds[column])
    }

    /// Standardized (post-log) values of the PCA columns for a complete row.
    pub fn standardize(&self, row: &[Option<f64>]) -> Result<Option<Vec<f64>>> {
        self.standardize_columns(row, &self.pca_columns)
    }

    fn standardize_columns(&self, row: &[Option<f64>], cols: &[usize]) -> Result<Option<Vec<f64>>> {
        let mut out = Vec::with_capacity(cols.len());
        for &c in cols {
            match row[c] {
                Some(v) => out.push(self.transformed(c, v)?),
                None => return Ok(None),
            }
        }
        Ok(Some(out))
    }

    /// Latent state of a raw row, or `None` when any used column is missing.
    pub fn project_row(&self, row: &[Option<f64>]) -> Result<Option<StateVector>> {
        if row.len() != self.columns.len() {
            return Err(Error::Schema(format!("row has {} values, model expects {}", row.len(), self.columns.len())));
        }
        let Some(z) = self.standardize(row)? else { return Ok(None) };
        let Some(pass) = self.standardize_columns(row, &self.passthrough_columns)? else { return Ok(None) };
        let mut state: Vec<f64> = (0..self.num_components()).map(|k| dot(self.components.row(k), &z)).collect();
        state.extend(pass);
        Ok(Some(StateVector::new(state)))
    }

    /// Standardized PCA columns reconstructed from component scores.
    pub fn reconstruct_standardized(&self, scores: &[f64]) -> Vec<f64> {
        let q = self.pca_columns.len();
        let mut z = vec![0.0; q];
        for (k, s) in scores.iter().enumerate().take(self.num_components()) {
            for (j, zj) in z.iter_mut().enumerate() {
                *zj += s * self.components[(k, j)];
            }
        }
        z
    }
}

fn log10_checked(name: &str, v: f64) -> Result<f64> {
    if v <= 0.0 {
        return Err(Error::InvalidArgument(format!("column `{name}` is log-transformed but has value {v} <= 0")));
    }
    Ok(v.log10())
}

/// Fits standardization and PCA on the complete-case rows of the panel.
///
/// Components are the leading eigenvectors of the correlation matrix of the
/// (log-then-standardized) PCA columns; every column not listed as
/// pass-through enters the PCA.
pub fn pca_fit(panel: &Panel, config: &PcaConfig) -> Result<PcaModel> {
    let p = panel.num_columns();
    for &c in config.log_columns.iter().chain(&config.passthrough).chain(&config.anchors) {
        if c >= p {
            return Err(Error::Schema(format!("column index {c} out of range for {p} columns")));
        }
    }
    let pca_columns: Vec<usize> = (0..p).filter(|c| !config.passthrough.contains(c)).collect();
    let q = pca_columns.len();
    let k = config.components;
    if k > q {
        return Err(Error::InvalidArgument(format!("{k} components requested from {q} PCA columns")));
    }
    let used: Vec<usize> = pca_columns.iter().chain(&config.passthrough).copied().collect();

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for unit in &panel.units {
        for obs in &unit.observations {
            if !obs.is_complete_on(&used) {
                continue;
            }
            let mut row = vec![0.0; p];
            for &c in &used {
                let v = obs.values[c].expect("complete");
                row[c] = if config.log_columns.contains(&c) { log10_checked(&panel.columns[c], v)? } else { v };
            }
            rows.push(row);
        }
    }
    let n = rows.len();
    if n < used.len() + 1 {
        return Err(Error::InsufficientData(format!("{n} complete rows for {} columns", used.len())));
    }

    let mut means = vec![0.0; p];
    let mut stds = vec![1.0; p];
    for &c in &used {
        let m = rows.iter().map(|r| r[c]).sum::<f64>() / n as f64;
        let var = rows.iter().map(|r| (r[c] - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sd = var.sqrt();
        if !(sd > 1e-12 * m.abs().max(1.0)) {
            return Err(Error::DegenerateColumn(panel.columns[c].clone()));
        }
        means[c] = m;
        stds[c] = sd;
    }

    let mut corr = Matrix::zeros(q, q);
    for r in &rows {
        let z: Vec<f64> = pca_columns.iter().map(|&c| (r[c] - means[c]) / stds[c]).collect();
        for i in 0..q {
            for j in i..q {
                corr[(i, j)] += z[i] * z[j];
            }
        }
    }
    for i in 0..q {
        for j in i..q {
            let v = corr[(i, j)] / (n - 1) as f64;
            corr[(i, j)] = v;
            corr[(j, i)] = v;
        }
    }
    let eig = sym_eigendecompose(&corr)?;
    let total: f64 = eig.values.iter().map(|v| v.max(0.0)).sum();

    let mut components = Matrix::zeros(k, q);
    let mut ratios = Vec::with_capacity(k);
    let mut anchors = Vec::with_capacity(k);
    for comp in 0..k {
        let mut v = eig.vector(comp);
        let anchor_col = match config.anchors.get(comp) {
            Some(&c) => c,
            None => {
                let j = (0..q)
                    .max_by(|&a, &b| v[a].abs().partial_cmp(&v[b].abs()).unwrap_or(std::cmp::Ordering::Equal))
                    .unwrap_or(0);
                pca_columns[j]
            }
        };
        let pos = pca_columns.iter().position(|&c| c == anchor_col).ok_or_else(|| {
            Error::Schema(format!("anchor column `{}` is not a PCA column", panel.columns[anchor_col]))
        })?;
        if v[pos] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for (j, x) in v.into_iter().enumerate() {
            components[(comp, j)] = x;
        }
        ratios.push(eig.values[comp].max(0.0) / total);
        anchors.push(anchor_col);
    }

    let mut log_columns = config.log_columns.clone();
    log_columns.sort_unstable();
    log_columns.dedup();
    Ok(PcaModel {
        columns: panel.columns.clone(),
        log_columns,
        pca_columns,
        passthrough_columns: config.passthrough.clone(),
        column_means: means,
        column_stds: stds,
        components,
        explained_variance_ratio: ratios,
        sign_anchor: anchors,
        fitted_rows: n,
    })
}

/// Projects every complete observation; incomplete rows and spacing wider
/// than the panel's nominal interval are recorded as gaps.
pub fn pca_project(model: &PcaModel, panel: &Panel, rescaling: &TimeRescaling) -> Result<LatentPanel> {
    if panel.columns != model.columns {
        return Err(Error::Schema(format!(
            "panel columns {:?} do not match model columns {:?}",
            panel.columns, model.columns
        )));
    }
    let nominal = panel.nominal_interval().unwrap_or(1.0);
    let used = model.used_columns();
    let mut units = Vec::with_capacity(panel.units.len());
    let mut gaps = Vec::new();
    for unit in &panel.units {
        let mut t_obs = Vec::new();
        let mut states = Vec::new();
        let mut dropped_between = Vec::new();
        let mut dropped = 0usize;
        for obs in &unit.observations {
            if !obs.is_complete_on(&used) {
                dropped += 1;
                continue;
            }
            let state = model.project_row(&obs.values)?.expect("complete row projects");
            if !t_obs.is_empty() {
                dropped_between.push(dropped);
            }
            dropped = 0;
            t_obs.push(obs.t_obs);
            states.push(state);
        }
        if states.is_empty() {
            continue;
        }
        units.push(build_unit(unit.unit_id.clone(), t_obs, states, &dropped_between, nominal, rescaling, &mut gaps)?);
    }
    Ok(LatentPanel {
        dim: model.latent_dim(),
        axis_names: model.axis_names(),
        rescaling: *rescaling,
        nominal_interval_obs: nominal,
        units,
        gaps,
    })
}
