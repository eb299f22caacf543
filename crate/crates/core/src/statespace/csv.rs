use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

use super::{Observation, Panel, UnitRecord};

/// Which CSV columns carry the unit id, the time, and the values.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvSchema {
    pub unit_column: String,
    pub time_column: String,
    /// `None` takes every other column, in header order.
    pub value_columns: Option<Vec<String>>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self { unit_column: "unit".into(), time_column: "time".into(), value_columns: None }
    }
}

pub fn ingest_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Panel> {
    let file = std::fs::File::open(path.as_ref())?;
    ingest_reader(file, schema)
}

/// Reads a panel from CSV. Rows are grouped by unit and sorted by time; empty
/// cells become missing values and rows with no values at all are dropped.
pub fn ingest_reader<R: Read>(reader: R, schema: &CsvSchema) -> Result<Panel> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}` in header")))
    };
    let unit_idx = find(&schema.unit_column)?;
    let time_idx = find(&schema.time_column)?;
    let value_names: Vec<String> = match &schema.value_columns {
        Some(cols) => cols.clone(),
        None => header
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != unit_idx && *i != time_idx)
            .map(|(_, h)| h.clone())
            .collect(),
    };
    if value_names.is_empty() {
        return Err(Error::Schema("no value columns".into()));
    }
    let value_idx = value_names.iter().map(|n| find(n)).collect::<Result<Vec<_>>>()?;

    let mut by_unit: BTreeMap<String, Vec<Observation>> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        // header is line 1
        let row = i + 2;
        let record = record.map_err(|e| Error::Parse { row, message: e.to_string() })?;
        let unit = record.get(unit_idx).unwrap_or("").to_string();
        if unit.is_empty() {
            return Err(Error::Parse { row, message: "empty unit id".into() });
        }
        let time_str = record.get(time_idx).unwrap_or("");
        let t_obs: f64 = time_str
            .parse()
            .map_err(|_| Error::Parse { row, message: format!("time `{time_str}` is not a number") })?;
        if !t_obs.is_finite() {
            return Err(Error::Parse { row, message: "time is not finite".into() });
        }
        let mut values = Vec::with_capacity(value_idx.len());
        for (&idx, name) in value_idx.iter().zip(&value_names) {
            let cell = record.get(idx).unwrap_or("");
            if cell.is_empty() {
                values.push(None);
            } else {
                let v: f64 = cell.parse().map_err(|_| Error::Parse {
                    row,
                    message: format!("column `{name}`: `{cell}` is not a number"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse { row, message: format!("column `{name}` is not finite") });
                }
                values.push(Some(v));
            }
        }
        if !by_unit.contains_key(&unit) {
            order.push(unit.clone());
        }
        by_unit.entry(unit).or_default().push(Observation { t_obs, values });
    }

    let mut units = Vec::with_capacity(order.len());
    for unit_id in order {
        let mut obs = by_unit.remove(&unit_id).unwrap_or_default();
        obs.sort_by(|a, b| a.t_obs.partial_cmp(&b.t_obs).unwrap_or(std::cmp::Ordering::Equal));
        if let Some(w) = obs.windows(2).find(|w| w[0].t_obs == w[1].t_obs) {
            return Err(Error::DuplicateKey { unit: unit_id, time: w[0].t_obs });
        }
        obs.retain(|o| o.values.iter().any(Option::is_some));
        units.push(UnitRecord { unit_id, observations: obs });
    }
    Ok(Panel { columns: value_names, units })
}
