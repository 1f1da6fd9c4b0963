//! Data generation from a known parameter set and a replication harness
//! reporting bias, coverage and model-selection rates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::effects::{effect_table, effect_values};
use crate::error::{Error, Result};
use crate::exec::map_range;
use crate::mediator::{observe, sample_true};
use crate::model::{Dataset, EffectKind, EffectTable, MediatorFamily, ModelConfig, ObservedRecord, ParameterSet};
use crate::select::select;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum XLaw {
    StandardNormal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimDesign {
    pub name: String,
    pub family: MediatorFamily,
    pub k: usize,
    pub true_theta: ParameterSet,
    pub n: usize,
    pub n_reps: usize,
    pub x_law: XLaw,
    pub x1: f64,
    pub x2: f64,
    pub bound_l: f64,
    pub seed: u64,
}

impl SimDesign {
    pub fn validate(&self) -> Result<()> {
        self.true_theta.validate(self.family)?;
        if self.true_theta.k() != self.k {
            return Err(Error::InvalidConfig(format!(
                "design K={} but true_theta has {} components",
                self.k,
                self.true_theta.k()
            )));
        }
        if self.true_theta.n_z() != 0 {
            return Err(Error::InvalidConfig("designs do not generate confounders".into()));
        }
        if self.n < 50 || self.n_reps < 1 {
            return Err(Error::InvalidConfig(format!(
                "designs need n >= 50 and n_reps >= 1 (got n={}, n_reps={})",
                self.n, self.n_reps
            )));
        }
        if !(self.bound_l > 0.0) || (self.family.is_count() && self.bound_l.fract() != 0.0) {
            return Err(Error::InvalidConfig(format!("invalid bound L={}", self.bound_l)));
        }
        Ok(())
    }

    /// Effects implied by `true_theta` at `(x1, x2)`.
    pub fn true_effects(&self) -> crate::effects::EffectValues {
        effect_values(&self.true_theta, self.family, self.x1, self.x2, &[])
    }
}

/// Independent random stream for replication `rep`.
pub fn rep_rng(seed: u64, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64);
    rng
}

/// One record: exposure, true mediator, masking, outcome (in that draw order).
pub fn draw_record<R: rand::Rng + ?Sized>(
    family: MediatorFamily,
    theta: &ParameterSet,
    bound_l: f64,
    rng: &mut R,
) -> (ObservedRecord, f64) {
    let x: f64 = StandardNormal.sample(rng);
    let m = sample_true(family, theta, x, &[], rng);
    let m_star = observe(m, theta.eta, bound_l, rng);
    let b = if m > 0.0 { 1.0 } else { 0.0 };
    let bt = &theta.beta;
    let mean = bt[0] + bt[1] * m + bt[2] * b + bt[3] * x + bt[4] * x * b + bt[5] * x * m;
    let eps: f64 = StandardNormal.sample(rng);
    (ObservedRecord::new(mean + theta.delta * eps, m_star, x), m)
}

pub fn generate_dataset(design: &SimDesign, rep_index: usize) -> Result<Dataset> {
    design.validate()?;
    let mut rng = rep_rng(design.seed, rep_index);
    let records = (0..design.n)
        .map(|_| draw_record(design.family, &design.true_theta, design.bound_l, &mut rng).0)
        .collect();
    Dataset::new(records, Vec::new())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepResult {
    pub rep: usize,
    pub n_zeros: usize,
    pub family: Option<MediatorFamily>,
    pub k: Option<usize>,
    pub selected_true_model: bool,
    pub effects: Option<EffectTable>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectSummary {
    pub effect: EffectKind,
    pub true_value: f64,
    pub mean_estimate: f64,
    pub mean_se: Option<f64>,
    /// Standard deviation of the estimates across successful replications.
    pub empirical_sd: Option<f64>,
    pub bias: f64,
    pub percent_bias: Option<f64>,
    pub cp: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub design: SimDesign,
    pub n_reps: usize,
    pub n_failed: usize,
    /// Fraction of successful replications selecting the generating (family, K).
    pub selection_rate: f64,
    pub mean_zero_fraction: f64,
    pub effects: Vec<EffectSummary>,
    pub reps: Vec<RepResult>,
}

fn run_rep(design: &SimDesign, fit_config: &ModelConfig, rep: usize) -> RepResult {
    let failed = |n_zeros, e: Error| RepResult {
        rep,
        n_zeros,
        family: None,
        k: None,
        selected_true_model: false,
        effects: None,
        error: Some(e.to_string()),
    };
    let data = match generate_dataset(design, rep) {
        Ok(d) => d,
        Err(e) => return failed(0, e),
    };
    let n_zeros = data.n_zeros();
    let cfg = ModelConfig {
        seed: fit_config.seed.wrapping_add(rep as u64),
        bound_l: design.bound_l,
        ..fit_config.clone()
    };
    let fitted = match select(&data, &cfg) {
        Ok(s) => s.best,
        Err(e) => return failed(n_zeros, e),
    };
    match effect_table(&fitted, design.x1, design.x2, None) {
        Ok(table) => RepResult {
            rep,
            n_zeros,
            family: Some(fitted.family),
            k: Some(fitted.k),
            selected_true_model: fitted.family == design.family && fitted.k == design.k,
            effects: Some(table),
            error: None,
        },
        Err(e) => failed(n_zeros, e),
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn summarize(kind: EffectKind, true_value: f64, tables: &[&EffectTable]) -> EffectSummary {
    let est: Vec<f64> = tables.iter().map(|t| t.get(kind).estimate).collect();
    let ses: Vec<f64> = tables.iter().filter_map(|t| t.get(kind).se).collect();
    let covers: Vec<f64> = tables
        .iter()
        .filter_map(|t| t.get(kind).covers(true_value))
        .map(|c| if c { 1.0 } else { 0.0 })
        .collect();
    let mean_estimate = mean(&est).unwrap_or(f64::NAN);
    let empirical_sd = (est.len() > 1).then(|| {
        let ss: f64 = est.iter().map(|e| (e - mean_estimate).powi(2)).sum();
        (ss / (est.len() - 1) as f64).sqrt()
    });
    let bias = mean_estimate - true_value;
    EffectSummary {
        effect: kind,
        true_value,
        mean_estimate,
        mean_se: mean(&ses),
        empirical_sd,
        bias,
        percent_bias: (true_value != 0.0).then(|| 100.0 * bias / true_value),
        cp: mean(&covers),
    }
}

/// Generates `design.n_reps` datasets, selects/fits each under `fit_config`
/// and aggregates effect recovery against the design's true effects.
pub fn replicate_study(design: &SimDesign, fit_config: &ModelConfig) -> Result<SimulationReport> {
    design.validate()?;
    fit_config.validate()?;
    let reps = map_range(fit_config.execution, design.n_reps, |rep| run_rep(design, fit_config, rep));
    let ok: Vec<&RepResult> = reps.iter().filter(|r| r.effects.is_some()).collect();
    let tables: Vec<&EffectTable> = ok.iter().filter_map(|r| r.effects.as_ref()).collect();
    let truth = design.true_effects();
    let effects = EffectKind::ALL
        .iter()
        .map(|&kind| summarize(kind, truth.get(kind), &tables))
        .collect();
    let selection_rate = if ok.is_empty() {
        0.0
    } else {
        ok.iter().filter(|r| r.selected_true_model).count() as f64 / ok.len() as f64
    };
    let zero_fracs: Vec<f64> = reps.iter().map(|r| r.n_zeros as f64 / design.n as f64).collect();
    Ok(SimulationReport {
        design: design.clone(),
        n_reps: design.n_reps,
        n_failed: reps.len() - ok.len(),
        selection_rate,
        mean_zero_fraction: mean(&zero_fracs).unwrap_or(0.0),
        effects,
        reps,
    })
}

/// Names of the built-in designs.
pub const BUILTIN_DESIGNS: [&str; 12] = [
    "zilonm30", "zilonm50", "zilonm60", "zilonm70", "zipm30", "zipm50", "zipm60", "zipm70", "zinbm30", "zinbm50",
    "zinbm60", "zinbm70",
];

/// Outcome coefficients shared by every built-in design.
const DESIGN_BETA: [f64; 6] = [0.0, 0.5, 1.5, 0.5, 0.5, 0.05];

/// Zero-model intercepts and false-zero rates per (family, zero percentage),
/// calibrated so that about half of the observed zeros are false zeros.
fn zero_block(family: MediatorFamily, pct: u32) -> Option<(f64, f64)> {
    use MediatorFamily::*;
    Some(match (family, pct) {
        (Zilonm, 30) => (-1.819, 1.029),
        (Zilonm, 50) => (-1.159, 0.663),
        (Zilonm, 60) => (-0.895, 0.531),
        (Zilonm, 70) => (-0.655, 0.418),
        (Zipm, 30) => (-2.989, 0.730),
        (Zipm, 50) => (-1.683, 0.506),
        (Zipm, 60) => (-1.306, 0.423),
        (Zipm, 70) => (-0.991, 0.346),
        (Zinbm, 30) => (-3.777, 0.753),
        (Zinbm, 50) => (-1.876, 0.523),
        (Zinbm, 60) => (-1.447, 0.434),
        (Zinbm, 70) => (-1.103, 0.352),
        _ => return None,
    })
}

/// A built-in two-component design by name (`zilonm30`, `zipm50`, ...).
pub fn builtin_design(name: &str) -> Result<SimDesign> {
    let lower = name.to_ascii_lowercase();
    let split = lower.find(|c: char| c.is_ascii_digit()).ok_or_else(|| Error::UnknownDesign(name.into()))?;
    let family = MediatorFamily::parse(&lower[..split]).ok_or_else(|| Error::UnknownDesign(name.into()))?;
    let pct: u32 = lower[split..].parse().map_err(|_| Error::UnknownDesign(name.into()))?;
    let (gamma0, eta) = zero_block(family, pct).ok_or_else(|| Error::UnknownDesign(name.into()))?;
    let mut theta = ParameterSet::neutral(family, 2, 0);
    theta.beta = DESIGN_BETA;
    theta.delta = 1.0;
    theta.gamma0 = gamma0;
    theta.gamma1 = -0.5;
    theta.psi = vec![0.5, 0.5];
    theta.eta = eta;
    match family {
        MediatorFamily::Zilonm => {
            theta.alpha0 = vec![0.0, 2.0];
            theta.alpha1 = vec![0.5, 0.2];
            theta.sigma = Some(0.5);
        }
        MediatorFamily::Zipm => {
            theta.alpha0 = vec![0.5, 2.2];
            theta.alpha1 = vec![0.4, 0.15];
        }
        MediatorFamily::Zinbm => {
            theta.alpha0 = vec![0.5, 2.2];
            theta.alpha1 = vec![0.4, 0.15];
            theta.r = Some(5.0);
        }
    }
    Ok(SimDesign {
        name: lower,
        family,
        k: 2,
        true_theta: theta,
        n: 1000,
        n_reps: 100,
        x_law: XLaw::StandardNormal,
        x1: 0.0,
        x2: 1.0,
        bound_l: 20.0,
        seed: 20_240_601,
    })
}
