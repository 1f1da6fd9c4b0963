//! CSV ingestion and the versioned JSON / text reports written by the CLI.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, EffectTable, FittedModel, MediatorFamily, ModelConfig, ObservedRecord};
use crate::select::SelectionRow;
use crate::simulate::SimulationReport;

/// Value of the top-level `schema` field of every JSON report.
pub const SCHEMA: &str = "zimix/1";

/// Which CSV columns hold the outcome, mediator, exposure and confounders.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ColumnMap {
    pub y: String,
    pub m: String,
    pub x: String,
    pub z: Vec<String>,
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::InvalidData(format!("column '{name}' not found in header")))
}

/// Reads a header-row CSV into a dataset. Row numbers in errors count the
/// header as line 1.
pub fn read_csv(path: impl AsRef<Path>, columns: &ColumnMap) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.is_empty() {
        return Err(Error::InvalidData(format!("{}: empty file", path.display())));
    }
    let iy = column_index(&headers, &columns.y)?;
    let im = column_index(&headers, &columns.m)?;
    let ix = column_index(&headers, &columns.x)?;
    let iz = columns
        .z
        .iter()
        .map(|c| column_index(&headers, c))
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::new();
    for (row, result) in reader.records().enumerate() {
        let line = row + 2;
        let rec = result?;
        let cell = |i: usize, name: &str| -> Result<f64> {
            let raw = rec.get(i).unwrap_or("");
            if raw.is_empty() {
                return Err(Error::InvalidData(format!("row {line}: missing value in column '{name}'")));
            }
            let v: f64 = raw
                .parse()
                .map_err(|_| Error::InvalidData(format!("row {line}: non-numeric value '{raw}' in column '{name}'")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::InvalidData(format!("row {line}: non-finite value in column '{name}'")))
            }
        };
        let y = cell(iy, &columns.y)?;
        let m = cell(im, &columns.m)?;
        if m < 0.0 {
            return Err(Error::InvalidData(format!(
                "row {line}: mediator '{}' must be >= 0, got {m}",
                columns.m
            )));
        }
        let x = cell(ix, &columns.x)?;
        let z = iz
            .iter()
            .zip(&columns.z)
            .map(|(&i, name)| cell(i, name))
            .collect::<Result<Vec<_>>>()?;
        records.push(ObservedRecord::new(y, m, x).with_confounders(z));
    }
    if records.is_empty() {
        return Err(Error::InvalidData(format!("{}: no data rows", path.display())));
    }
    Dataset::new(records, columns.z.clone())
}

/// A report body tagged with the schema version.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Versioned<T> {
    pub schema: String,
    #[serde(flatten)]
    pub body: T,
}

impl<T> Versioned<T> {
    pub fn new(body: T) -> Self {
        Self {
            schema: SCHEMA.to_string(),
            body,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub n: usize,
    pub n_zeros: usize,
    pub integer_valued: bool,
    pub confounders: Vec<String>,
}

impl DataSummary {
    pub fn of(data: &Dataset) -> Self {
        Self {
            n: data.len(),
            n_zeros: data.n_zeros(),
            integer_valued: data.is_integer_valued(),
            confounders: data.confounder_names().to_vec(),
        }
    }
}

/// One model parameter on its natural scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterRow {
    pub name: String,
    pub estimate: f64,
    pub se: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectedModel {
    pub family: MediatorFamily,
    pub k: usize,
    pub loglik: f64,
    pub n_params: usize,
    pub bic: f64,
    pub aic: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub n_iter: usize,
    pub converged: bool,
    pub degenerate_flags: Vec<String>,
    pub warnings: Vec<String>,
    pub start_logliks: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub data: DataSummary,
    pub config: ModelConfig,
    pub selection: Vec<SelectionRow>,
    pub selected: SelectedModel,
    pub parameters: Vec<ParameterRow>,
    pub effects: EffectTable,
    pub diagnostics: Diagnostics,
}

/// Natural-scale parameters of a fit with delta-method SEs from the
/// free-coordinate covariance.
pub fn parameter_rows(fitted: &FittedModel) -> Vec<ParameterRow> {
    let layout = &fitted.layout;
    let names = layout.names();
    let theta = &fitted.theta_hat;
    let free = layout.to_free(theta).unwrap_or_default();
    let se_free = fitted.free_se();
    let se_at = |j: usize| se_free.as_ref().map(|s| s[j]);
    let mut rows = Vec::with_capacity(names.len() + 1);
    let k = fitted.k;
    let mut alr_start = None;
    for (j, name) in names.iter().enumerate() {
        if let Some(stripped) = name.strip_prefix("log_") {
            let value = free[j].exp();
            rows.push(ParameterRow {
                name: stripped.to_string(),
                estimate: value,
                se: se_at(j).map(|s| value * s),
            });
        } else if name.starts_with("alr_psi") {
            alr_start.get_or_insert(j);
        } else {
            rows.push(ParameterRow {
                name: name.clone(),
                estimate: free[j],
                se: se_at(j),
            });
        }
    }
    // Mixing weights: psi_j = softmax over (alr, 0); Jacobian psi_j (1{j=l} - psi_l).
    let psi_se = |j: usize| -> Option<f64> {
        let start = alr_start?;
        let v = fitted.vcov.as_ref()?;
        let grad: Vec<f64> = (0..k - 1)
            .map(|l| theta.psi[j] * (f64::from(u8::from(j == l)) - theta.psi[l]))
            .collect();
        let mut var = 0.0;
        for (a, ga) in grad.iter().enumerate() {
            for (b, gb) in grad.iter().enumerate() {
                var += ga * gb * v[(start + a, start + b)];
            }
        }
        Some(var.max(0.0).sqrt())
    };
    for j in 0..k {
        rows.push(ParameterRow {
            name: format!("psi[{}]", j + 1),
            estimate: theta.psi[j],
            se: if k == 1 { None } else { psi_se(j) },
        });
    }
    rows
}

impl FitReport {
    pub fn new(data: &Dataset, config: &ModelConfig, selection: Vec<SelectionRow>, best: &FittedModel, effects: EffectTable) -> Self {
        Self {
            data: DataSummary::of(data),
            config: config.clone(),
            selection,
            selected: SelectedModel {
                family: best.family,
                k: best.k,
                loglik: best.loglik,
                n_params: best.n_params,
                bic: best.bic,
                aic: best.aic,
            },
            parameters: parameter_rows(best),
            effects,
            diagnostics: Diagnostics {
                n_iter: best.n_iter,
                converged: best.converged,
                degenerate_flags: best.degenerate_flags.clone(),
                warnings: best.warnings.clone(),
                start_logliks: best.trace.start_logliks.clone(),
            },
        }
    }
}

/// Pretty-printed JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn from_json<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    Ok(serde_json::from_str(text)?)
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

/// Text rendering of a fit report; every number comes from the report itself.
pub fn render_fit_table(report: &Versioned<FitReport>) -> String {
    let r = &report.body;
    let mut out = String::new();
    let _ = writeln!(out, "zimix fit report ({})", report.schema);
    let _ = writeln!(
        out,
        "data: n={} zeros={} integer-valued={}",
        r.data.n, r.data.n_zeros, r.data.integer_valued
    );
    let _ = writeln!(out, "\nModel selection");
    let _ = writeln!(
        out,
        "{:<8} {:>2} {:>14} {:>4} {:>14} {:>14} {:>9} {:>10}",
        "family", "K", "loglik", "p", "BIC", "AIC", "converged", "degenerate"
    );
    for row in &r.selection {
        let _ = write!(
            out,
            "{:<8} {:>2} {:>14} {:>4} {:>14} {:>14} {:>9} {:>10}",
            row.family.name(),
            row.k,
            opt(row.loglik, 3),
            row.n_params.map_or("-".into(), |p| p.to_string()),
            opt(row.bic, 3),
            opt(row.aic, 3),
            row.converged,
            row.degenerate
        );
        if let Some(e) = &row.error {
            let _ = write!(out, "  error: {e}");
        }
        out.push('\n');
    }
    let s = &r.selected;
    let _ = writeln!(
        out,
        "selected: {} K={} (loglik {:.3}, BIC {:.3})",
        s.family.name(),
        s.k,
        s.loglik,
        s.bic
    );
    let _ = writeln!(out, "\nParameters");
    let _ = writeln!(out, "{:<12} {:>12} {:>12}", "name", "estimate", "SE");
    for p in &r.parameters {
        let _ = writeln!(out, "{:<12} {:>12.6} {:>12}", p.name, p.estimate, opt(p.se, 6));
    }
    let e = &r.effects;
    let _ = writeln!(out, "\nEffects (x1={}, x2={})", e.x1, e.x2);
    let _ = writeln!(
        out,
        "{:<6} {:>12} {:>12} {:>12} {:>12} {:>10}",
        "effect", "estimate", "SE", "95% low", "95% high", "p-value"
    );
    for est in &e.effects {
        let _ = writeln!(
            out,
            "{:<6} {:>12.6} {:>12} {:>12} {:>12} {:>10}",
            est.effect.name(),
            est.estimate,
            opt(est.se, 6),
            opt(est.ci_low, 6),
            opt(est.ci_high, 6),
            est.p_value.map_or("-".into(), |p| format!("{p:.4}"))
        );
    }
    let d = &r.diagnostics;
    let _ = writeln!(out, "\nDiagnostics: iterations={} converged={}", d.n_iter, d.converged);
    for f in &d.degenerate_flags {
        let _ = writeln!(out, "  degenerate: {f}");
    }
    for w in &d.warnings {
        let _ = writeln!(out, "  warning: {w}");
    }
    out
}

/// Text rendering of a simulation report in the True / Mean Estimate /
/// Mean SE / Bias / Percent of Bias / CP layout.
pub fn render_simulation_table(report: &Versioned<SimulationReport>) -> String {
    let r = &report.body;
    let mut out = String::new();
    let _ = writeln!(out, "zimix simulation report ({})", report.schema);
    let _ = writeln!(
        out,
        "design {}: {} K={} n={} reps={} failed={} mean zero fraction={:.4}",
        r.design.name,
        r.design.family.name(),
        r.design.k,
        r.design.n,
        r.n_reps,
        r.n_failed,
        r.mean_zero_fraction
    );
    let _ = writeln!(out, "selected generating model in {:.1}% of reps", 100.0 * r.selection_rate);
    let _ = writeln!(
        out,
        "{:<6} {:>10} {:>14} {:>10} {:>10} {:>10} {:>16} {:>6}",
        "effect", "True", "Mean Estimate", "Mean SE", "SD", "Bias", "Percent of Bias", "CP"
    );
    for e in &r.effects {
        let _ = writeln!(
            out,
            "{:<6} {:>10.4} {:>14.4} {:>10} {:>10} {:>10.4} {:>16} {:>6}",
            e.effect.name(),
            e.true_value,
            e.mean_estimate,
            opt(e.mean_se, 4),
            opt(e.empirical_sd, 4),
            e.bias,
            opt(e.percent_bias, 2),
            opt(e.cp, 2)
        );
    }
    if r.reps.len() == 1 {
        let rep = &r.reps[0];
        let _ = writeln!(out, "\nreplication {} (zeros={})", rep.rep, rep.n_zeros);
        if let Some(err) = &rep.error {
            let _ = writeln!(out, "  error: {err}");
        }
        if let Some(t) = &rep.effects {
            let _ = writeln!(out, "{:<6} {:>12} {:>12} {:>12} {:>12}", "effect", "estimate", "SE", "95% low", "95% high");
            for est in &t.effects {
                let _ = writeln!(
                    out,
                    "{:<6} {:>12.6} {:>12} {:>12} {:>12}",
                    est.effect.name(),
                    est.estimate,
                    opt(est.se, 6),
                    opt(est.ci_low, 6),
                    opt(est.ci_high, 6)
                );
            }
        }
    }
    out
}
