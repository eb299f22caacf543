use std::path::Path;

use histodyn_core::diagnostics::{diagnose_panel, pooled_acf, residual_acf, AcfSeries, DiagnosticsConfig, ResidualAcf};
use histodyn_core::impute::{impute_panel, write_imputation_csv, ImputeConfig};
use histodyn_core::lbn::{fit_lbn, LbnConfig};
use histodyn_core::likelihood::TransitionDensityMethod;
use histodyn_core::npsde::{fit_npsde, NpsdeConfig};
use histodyn_core::simulate::{simulate_ensemble, simulate_on_times};
use histodyn_core::statespace::{ingest_reader, pca_fit, pca_project, CsvSchema, GapSpan, LatentPanel, PcaConfig};
use histodyn_core::{Error, SdeModel, StateVector, StreamKey, TimeRescaling};
use rayon::prelude::*;
use serde::Serialize;

use crate::args::*;
use crate::error::{CliError, Result};
use crate::files::*;

/// Sub-steps per source time unit when neither the panel nor `--nsub` sets one.
pub const DEFAULT_NSUB: usize = 10;

/// Runs one command and returns a one-line summary for stdout.
pub fn run(command: &Command) -> Result<String> {
    match command {
        Command::Ingest(a) => ingest(a),
        Command::Fit(a) => fit(a),
        Command::Simulate(a) => simulate(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Impute(a) => impute(a),
        Command::Validate(a) => validate(a),
    }
}

fn rescaling_from(shared: &Shared, base: Option<TimeRescaling>) -> Result<TimeRescaling> {
    let base = base.unwrap_or(TimeRescaling { alpha: 1.0, n_sub: DEFAULT_NSUB });
    Ok(TimeRescaling::new(shared.alpha.unwrap_or(base.alpha), shared.nsub.unwrap_or(base.n_sub))?)
}

fn load_panel(path: &Path, shared: &Shared) -> Result<LatentPanel> {
    let file: PanelFile = read_json(path)?;
    let rescaling = rescaling_from(shared, Some(file.panel.rescaling))?;
    Ok(if rescaling == file.panel.rescaling { file.panel } else { file.panel.rescaled(rescaling) })
}

fn load_model(path: &Path, dim: Option<usize>) -> Result<FittedModel> {
    let file: ModelFile = read_json(path)?;
    if let Some(d) = dim {
        if file.fitted.dim() != d {
            return Err(Error::Shape(format!("model dimension {} vs panel dimension {d}", file.fitted.dim())).into());
        }
    }
    Ok(file.fitted)
}

fn column_indices(panel_columns: &[String], names: &[String]) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|n| {
            panel_columns
                .iter()
                .position(|c| c == n)
                .ok_or_else(|| CliError::Usage(format!("unknown column `{n}`")))
        })
        .collect()
}

#[derive(Serialize)]
struct PcaReport<'a> {
    format_version: u32,
    #[serde(flatten)]
    stamp: &'a Stamp,
    pca_columns: Vec<&'a str>,
    log_columns: Vec<&'a str>,
    passthrough_columns: Vec<&'a str>,
    explained_variance_ratio: &'a [f64],
    /// One row per component, aligned with `pca_columns`.
    loadings: Vec<&'a [f64]>,
    fitted_rows: usize,
    units: usize,
    transitions: usize,
    gaps: &'a [GapSpan],
}

fn ingest(a: &IngestArgs) -> Result<String> {
    let stamp = Stamp::new("ingest", a, &[&a.input], a.shared.seed)?;
    let bytes = read_bytes(&a.input)?;
    let schema = CsvSchema {
        unit_column: a.unit_col.clone(),
        time_column: a.time_col.clone(),
        value_columns: a.columns.clone(),
    };
    let raw = ingest_reader(&bytes[..], &schema)?;
    let passthrough = column_indices(&raw.columns, &a.passthrough)?;
    let config = PcaConfig {
        components: a.components.unwrap_or(raw.num_columns() - passthrough.len()),
        log_columns: column_indices(&raw.columns, &a.log_columns)?,
        passthrough,
        anchors: Vec::new(),
    };
    let pca = pca_fit(&raw, &config)?;
    let rescaling = rescaling_from(&a.shared, None)?;
    let panel = pca_project(&pca, &raw, &rescaling)?;

    let name = |i: &usize| pca.columns[*i].as_str();
    let report = PcaReport {
        format_version: FORMAT_VERSION,
        stamp: &stamp,
        pca_columns: pca.pca_columns.iter().map(name).collect(),
        log_columns: pca.log_columns.iter().map(name).collect(),
        passthrough_columns: pca.passthrough_columns.iter().map(name).collect(),
        explained_variance_ratio: &pca.explained_variance_ratio,
        loadings: (0..pca.num_components()).map(|k| pca.components.row(k)).collect(),
        fitted_rows: pca.fitted_rows,
        units: panel.units.len(),
        transitions: panel.transition_count(),
        gaps: &panel.gaps,
    };
    write_json(&a.shared.out.join("pca_report.json"), &report)?;
    let summary = format!(
        "ingested {} units, {} transitions, {} gaps into {} latent dimensions",
        panel.units.len(),
        panel.transition_count(),
        panel.gaps.len(),
        panel.dim
    );
    let file = PanelFile { format_version: FORMAT_VERSION, stamp, panel, pca: Some(pca) };
    write_json(&a.shared.out.join("panel.json"), &file)?;
    Ok(summary)
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => Ok(serde_json::from_slice(&read_bytes(p)?)?),
        None => Ok(T::default()),
    }
}

#[derive(Serialize)]
struct FitLogFile<'a> {
    format_version: u32,
    #[serde(flatten)]
    stamp: &'a Stamp,
    #[serde(flatten)]
    fitted: FitLogBody<'a>,
}

#[derive(Serialize)]
#[serde(tag = "estimator", rename_all = "snake_case")]
enum FitLogBody<'a> {
    Lbn { folds: &'a [histodyn_core::lbn::FoldLog] },
    Npsde { log: &'a histodyn_core::npsde::FitLog },
}

fn fit(a: &FitArgs) -> Result<String> {
    let mut inputs: Vec<&Path> = vec![&a.panel];
    if let Some(c) = &a.config {
        inputs.push(c);
    }
    let stamp = Stamp::new("fit", a, &inputs, a.shared.seed)?;
    let panel = load_panel(&a.panel, &a.shared)?;
    let seed = a.shared.seed;
    let (fitted, summary) = match a.estimator {
        Estimator::Lbn => {
            let mut cfg: LbnConfig = read_config(a.config.as_deref())?;
            if let Some(h) = &a.hidden {
                cfg.hidden = h.clone();
            }
            cfg.max_epochs = a.epochs.unwrap_or(cfg.max_epochs);
            cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
            cfg.folds = a.folds.unwrap_or(cfg.folds);
            cfg.ensemble_size = a.ensemble.unwrap_or(cfg.ensemble_size);
            cfg.learning_rate = a.learning_rate.unwrap_or(cfg.learning_rate);
            let (ensemble, log) = fit_lbn(&panel, &cfg, seed)?;
            let summary = format!("fitted LBN ensemble of {} members on {} folds", ensemble.len(), cfg.folds);
            (FittedModel::Lbn { ensemble, log }, summary)
        }
        Estimator::Npsde => {
            let mut cfg: NpsdeConfig = read_config(a.config.as_deref())?;
            cfg.iterations = a.iterations.unwrap_or(cfg.iterations);
            cfg.samples = a.samples.unwrap_or(cfg.samples);
            cfg.learning_rate = a.learning_rate.unwrap_or(cfg.learning_rate);
            if a.inducing_per_dim.is_some() {
                cfg.inducing_per_dim = a.inducing_per_dim;
            }
            if a.fix_noise {
                cfg.fit_noise = false;
            }
            if a.noise_variance.is_some() {
                cfg.initial_noise_variance = a.noise_variance;
            }
            let (model, log) = fit_npsde(&panel, &cfg, seed)?;
            let last = log.objective.last().copied().unwrap_or(f64::NAN);
            let summary = format!(
                "fitted npSDE with {} parameters, final objective {last:.4}, gradient norm {:.3e}",
                log.parameter_count, log.final_gradient_norm
            );
            for w in &log.warnings {
                eprintln!("warning: {w}");
            }
            (FittedModel::Npsde { model, log }, summary)
        }
    };
    let body = match &fitted {
        FittedModel::Lbn { log, .. } => FitLogBody::Lbn { folds: log },
        FittedModel::Npsde { log, .. } => FitLogBody::Npsde { log },
    };
    write_json(
        &a.shared.out.join("fit_log.json"),
        &FitLogFile { format_version: FORMAT_VERSION, stamp: &stamp, fitted: body },
    )?;
    write_json(&a.shared.out.join("model.json"), &ModelFile { format_version: FORMAT_VERSION, stamp, fitted })?;
    Ok(summary)
}

fn state_header(names: &[String]) -> Vec<String> {
    names.to_vec()
}

fn simulate(a: &SimulateArgs) -> Result<String> {
    if a.paths == 0 {
        return Err(CliError::Usage("--paths must be at least 1".into()));
    }
    let mut inputs: Vec<&Path> = vec![&a.model];
    if let Some(p) = &a.panel {
        inputs.push(p);
    }
    let stamp = Stamp::new("simulate", a, &inputs, a.shared.seed)?;
    let root = StreamKey::new(a.shared.seed, 0).child_named("simulate");
    let mut rows: Vec<(String, usize, f64, StateVector)> = Vec::new();
    let axis_names;
    match (&a.panel, &a.x0) {
        (Some(path), None) => {
            let panel = load_panel(path, &a.shared)?;
            let model = load_model(&a.model, Some(panel.dim))?;
            axis_names = panel.axis_names.clone();
            let per_unit = panel
                .units
                .par_iter()
                .map(|u| {
                    let key = root.child_named(&u.unit_id);
                    (0..a.paths)
                        .map(|s| {
                            let mut rng = key.child(s as u64).stream();
                            simulate_on_times(&model, &u.states[0], &u.times, &panel.rescaling, &mut rng)
                        })
                        .collect::<histodyn_core::Result<Vec<_>>>()
                })
                .collect::<histodyn_core::Result<Vec<_>>>()?;
            for (u, paths) in panel.units.iter().zip(per_unit) {
                for (s, p) in paths.into_iter().enumerate() {
                    rows.extend(p.times.into_iter().zip(p.states).map(|(t, x)| (u.unit_id.clone(), s, t, x)));
                }
            }
        }
        (None, Some(x0)) => {
            let model = load_model(&a.model, Some(x0.len()))?;
            let rescaling = rescaling_from(&a.shared, None)?;
            let horizon = a.horizon.ok_or_else(|| CliError::Usage("--x0 needs --horizon".into()))?;
            if !(horizon > 0.0) {
                return Err(CliError::Usage("--horizon must be positive".into()));
            }
            let unit = rescaling.unit_interval();
            let n = (horizon / unit + 1e-9).floor() as usize;
            let mut times: Vec<f64> = (0..=n).map(|k| k as f64 * unit).collect();
            if horizon - times[n] > 1e-9 * unit {
                times.push(horizon);
            }
            let ens = simulate_ensemble(&model, x0, &times, a.paths, &rescaling, root)?;
            axis_names = (0..x0.len()).map(|i| format!("x{i}")).collect();
            for (s, p) in ens.paths.into_iter().enumerate() {
                rows.extend(ens.times.iter().copied().zip(p).map(|(t, x)| (String::new(), s, t, x)));
            }
        }
        _ => return Err(CliError::Usage("give exactly one of --panel or --x0".into())),
    }
    let count = rows.len();
    write_csv(&a.shared.out.join("simulation.csv"), &stamp, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        let mut header = vec!["unit".to_string(), "path".into(), "t".into()];
        header.extend(state_header(&axis_names));
        w.write_record(&header)?;
        for (unit, s, t, x) in rows {
            let mut rec = vec![unit, s.to_string(), t.to_string()];
            rec.extend(x.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush().map_err(Error::from)?;
        Ok(())
    })?;
    Ok(format!("wrote {count} simulated states"))
}

#[derive(Serialize)]
struct DiagnosticsSummary<'a> {
    format_version: u32,
    #[serde(flatten)]
    stamp: &'a Stamp,
    metadata: &'a histodyn_core::diagnostics::DiagnosticsMetadata,
    transitions: usize,
    mean_sigma: f64,
    mean_normalized_surprisal: f64,
    min_tail_prob: Option<f64>,
    units: &'a [histodyn_core::diagnostics::UnitSummary],
}

fn diagnose(a: &DiagnoseArgs) -> Result<String> {
    let stamp = Stamp::new("diagnose", a, &[&a.model, &a.panel], a.shared.seed)?;
    let panel = load_panel(&a.panel, &a.shared)?;
    if panel.transition_count() == 0 {
        return Err(Error::InsufficientData("panel has no transitions".into()).into());
    }
    let model = load_model(&a.model, Some(panel.dim))?;
    let n_sub = a.method_nsub.unwrap_or(panel.rescaling.n_sub);
    let method = match a.method {
        Method::OneStep => TransitionDensityMethod::OneStepGaussian,
        Method::Composed => TransitionDensityMethod::ComposedGaussian { n_sub },
        Method::Kde => TransitionDensityMethod::SimulatedKde { samples: a.samples, n_sub, seed: a.shared.seed },
    };
    let config = DiagnosticsConfig { method, samples: a.samples, seed: a.shared.seed, skip_tail: a.skip_tail };
    let report = diagnose_panel(&model, &panel, &config)?;
    write_csv(&a.shared.out.join("diagnostics.csv"), &stamp, |buf| Ok(report.write_csv(buf)?))?;
    let n = report.records.len();
    let summary = DiagnosticsSummary {
        format_version: FORMAT_VERSION,
        stamp: &stamp,
        metadata: &report.metadata,
        transitions: n,
        mean_sigma: report.records.iter().map(|r| r.sigma).sum::<f64>() / n as f64,
        mean_normalized_surprisal: report.records.iter().map(|r| r.normalized_surprisal).sum::<f64>() / n as f64,
        min_tail_prob: report.records.iter().filter_map(|r| r.tail_prob).reduce(f64::min),
        units: &report.units,
    };
    write_json(&a.shared.out.join("diagnostics_summary.json"), &summary)?;
    Ok(format!("diagnosed {n} transitions, mean sigma {:.4}", summary.mean_sigma))
}

fn impute(a: &ImputeArgs) -> Result<String> {
    let stamp = Stamp::new("impute", a, &[&a.model, &a.panel], a.shared.seed)?;
    let panel = load_panel(&a.panel, &a.shared)?;
    let model = load_model(&a.model, Some(panel.dim))?;
    let config = ImputeConfig { samples: a.samples, rescaling: panel.rescaling, ..Default::default() };
    let gaps = impute_panel(&model, &panel, &config, a.shared.seed)?;
    for w in gaps.iter().flat_map(|g| g.samples.iter().filter_map(|s| s.warning.as_ref())) {
        eprintln!("warning: {w}");
    }
    write_csv(&a.shared.out.join("imputation.csv"), &stamp, |buf| {
        Ok(write_imputation_csv(&gaps, &panel.axis_names, buf)?)
    })?;
    let queries: usize = gaps.iter().map(|g| g.samples.len()).sum();
    Ok(format!("imputed {queries} states in {} gaps", gaps.len()))
}

#[derive(Serialize)]
struct ValidationReport<'a> {
    format_version: u32,
    #[serde(flatten)]
    stamp: &'a Stamp,
    max_lag: usize,
    axis_names: &'a [String],
    data_acf: Vec<AcfSeries>,
    simulated_acf: Vec<AcfSeries>,
    residual_acf: ResidualAcf,
    verdict: &'static str,
}

/// Per-dimension segments of the states of every gap-free run.
fn run_segments(panel: &LatentPanel, states: &[Vec<StateVector>], dim: usize) -> Vec<Vec<f64>> {
    panel
        .units
        .iter()
        .zip(states)
        .flat_map(|(u, xs)| u.contiguous_runs().into_iter().map(move |r| xs[r].iter().map(|x| x[dim]).collect()))
        .collect()
}

fn validate(a: &ValidateArgs) -> Result<String> {
    let stamp = Stamp::new("validate", a, &[&a.model, &a.panel], a.shared.seed)?;
    let panel = load_panel(&a.panel, &a.shared)?;
    let model = load_model(&a.model, Some(panel.dim))?;
    let residual = residual_acf(&model, &panel, a.max_lag)?;

    let root = StreamKey::new(a.shared.seed, 0).child_named("validate");
    let simulated = panel
        .units
        .par_iter()
        .map(|u| {
            let mut rng = root.child_named(&u.unit_id).stream();
            simulate_on_times(&model, &u.states[0], &u.times, &panel.rescaling, &mut rng).map(|p| p.states)
        })
        .collect::<histodyn_core::Result<Vec<_>>>()?;
    let observed: Vec<Vec<StateVector>> = panel.units.iter().map(|u| u.states.clone()).collect();
    let acf = |states: &[Vec<StateVector>]| {
        (0..panel.dim)
            .map(|j| pooled_acf(&run_segments(&panel, states, j), a.max_lag))
            .collect::<histodyn_core::Result<Vec<_>>>()
    };
    let report = ValidationReport {
        format_version: FORMAT_VERSION,
        stamp: &stamp,
        max_lag: a.max_lag,
        axis_names: &panel.axis_names,
        data_acf: acf(&observed)?,
        simulated_acf: acf(&simulated)?,
        verdict: if residual.markovian { "pass" } else { "fail" },
        residual_acf: residual,
    };
    write_json(&a.shared.out.join("validation.json"), &report)?;
    Ok(format!(
        "residual ACF: {:.1}% of lags inside the 95% band, Markovianity {}",
        100.0 * report.residual_acf.fraction_inside,
        report.verdict
    ))
}
