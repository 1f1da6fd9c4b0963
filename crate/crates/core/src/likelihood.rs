//! Per-record log-likelihood contributions for observed-positive and
//! observed-zero records, the false-zero integral/sum, the observed-data
//! log-likelihood and the EM Q function.

use std::sync::OnceLock;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::em::PosteriorWeights;
use crate::error::{Error, Result};
use crate::exec::map_range;
use crate::mediator::{class_weights, linear_predictors, log_component_mass_with, MassConstants};
use crate::model::{Dataset, MediatorFamily, ModelConfig, ObservedRecord, ParameterSet};
use crate::numeric::{dot, log1m_exp, log_sum_exp, pairwise_sum, HALF_LN_2PI, LN_2PI};
use crate::quadrature::{integrate_log, panel_nodes, panel_weights, LogQuadrature, NODES_PER_PANEL};

/// Lower integration limit of the false-zero integral, in SDs below `mu_k`.
const TAIL_SDS: f64 = 10.0;
const MAX_PANELS: usize = 400;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    Positive,
    ZeroObserved,
}

/// Class log-likelihoods and log prior weights of one record. For positive
/// records both vectors have length K (components 1..K); for observed zeros
/// they have length K+1 with index 0 the true-zero class.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordLogLiks {
    pub group: Group,
    pub ell: Vec<f64>,
    pub log_psi: Vec<f64>,
}

impl RecordLogLiks {
    pub fn psi_weights(&self) -> Vec<f64> {
        self.log_psi.iter().map(|l| l.exp()).collect()
    }

    fn joint(&self) -> Vec<f64> {
        self.log_psi.iter().zip(&self.ell).map(|(a, b)| a + b).collect()
    }

    /// `log sum_k Psi_k exp(ell_k)`.
    pub fn loglik(&self) -> f64 {
        log_sum_exp(&self.joint())
    }

    /// Posterior class probabilities; `None` when every class is impossible.
    pub fn posterior(&self) -> Option<Vec<f64>> {
        let joint = self.joint();
        let total = log_sum_exp(&joint);
        if total == f64::NEG_INFINITY || !total.is_finite() {
            return None;
        }
        Some(joint.iter().map(|j| (j - total).exp()).collect())
    }

    /// `sum_k tau_k (log Psi_k + ell_k)`, with zero-weight terms dropped.
    pub fn q_contribution(&self, tau: impl IntoIterator<Item = f64>) -> f64 {
        tau.into_iter()
            .zip(self.log_psi.iter().zip(&self.ell))
            .filter(|(t, _)| *t > 0.0)
            .map(|(t, (a, b))| t * (a + b))
            .sum()
    }
}

/// Record-level pieces of the outcome mean `E(Y | m, b, x, z)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct OutcomeMean {
    /// Mean at `m = 0, b = 0`.
    pub(crate) base: f64,
    /// Shift applied when `b = 1`.
    pub(crate) b_shift: f64,
    /// Slope in `m`.
    pub(crate) slope: f64,
}

impl OutcomeMean {
    pub(crate) fn new(theta: &ParameterSet, x: f64, z: &[f64]) -> Self {
        let b = &theta.beta;
        Self {
            base: b[0] + b[3] * x + dot(&theta.beta_z, z),
            b_shift: b[2] + b[4] * x,
            slope: b[1] + b[5] * x,
        }
    }

    pub(crate) fn positive(&self, m: f64) -> f64 {
        self.base + self.b_shift + self.slope * m
    }
}

fn normal_logpdf(y: f64, mean: f64, delta: f64) -> f64 {
    let r = (y - mean) / delta;
    -delta.ln() - HALF_LN_2PI - 0.5 * r * r
}

/// `log(1 - P(M* = 0 | M = m))` for an observed positive `m`.
fn log_not_masked(m: f64, eta: f64, bound_l: f64) -> f64 {
    if m <= bound_l {
        log1m_exp(eta * eta * m)
    } else {
        0.0
    }
}

fn check_positive(record: &ObservedRecord) -> Result<()> {
    if record.m_star > 0.0 {
        Ok(())
    } else {
        Err(Error::Support {
            value: record.m_star,
            reason: "positive-group likelihood needs m* > 0",
        })
    }
}

fn check_zero(record: &ObservedRecord) -> Result<()> {
    if record.m_star == 0.0 {
        Ok(())
    } else {
        Err(Error::Support {
            value: record.m_star,
            reason: "zero-group likelihood needs m* = 0",
        })
    }
}

fn check_component(theta: &ParameterSet, k: usize) -> Result<()> {
    if (1..=theta.k()).contains(&k) {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            family: theta.family().name().into(),
            k: theta.k(),
            reason: format!("component index {k} outside 1..=K"),
        })
    }
}

/// Group-1 log-likelihood of component `k` (1-based) for a positive record.
pub fn loglik_pos(record: &ObservedRecord, k: usize, theta: &ParameterSet, config: &ModelConfig) -> Result<f64> {
    check_positive(record)?;
    check_component(theta, k)?;
    let family = theta.family();
    let lp = linear_predictors(theta, record.x, &record.z);
    let mean = OutcomeMean::new(theta, record.x, &record.z);
    let consts = MassConstants::new(family, theta, record.m_star);
    Ok(normal_logpdf(record.y, mean.positive(record.m_star), theta.delta)
        + log_not_masked(record.m_star, theta.eta, config.bound_l)
        + log_component_mass_with(family, theta, lp.mu_or_loglambda[k - 1], record.m_star, &consts))
}

/// Group-2 log-likelihood of the true-zero class.
pub fn loglik_true_zero(record: &ObservedRecord, theta: &ParameterSet) -> Result<f64> {
    check_zero(record)?;
    let mean = OutcomeMean::new(theta, record.x, &record.z);
    Ok(normal_logpdf(record.y, mean.base, theta.delta))
}

/// Log of the ZILoNM false-zero integrand on the `u = log m` scale.
pub(crate) fn h_log_integrand(y: f64, mean: OutcomeMean, delta: f64, eta2: f64, mu: f64, sigma: f64, u: f64, exp_u: f64) -> f64 {
    let r = y - mean.positive(exp_u);
    let d = (u - mu) / sigma;
    -0.5 * (r * r) / (delta * delta) - eta2 * exp_u - 0.5 * d * d
}

fn zilonm_parts(record: &ObservedRecord, k: usize, theta: &ParameterSet) -> Result<(OutcomeMean, f64, f64)> {
    check_zero(record)?;
    check_component(theta, k)?;
    let sigma = theta.sigma.ok_or_else(|| Error::DimensionMismatch {
        family: theta.family().name().into(),
        k: theta.k(),
        reason: "false-zero integral is defined for ZILoNM only".into(),
    })?;
    let mu = linear_predictors(theta, record.x, &record.z).mu_or_loglambda[k - 1];
    Ok((OutcomeMean::new(theta, record.x, &record.z), mu, sigma))
}

fn adaptive_h(
    record: &ObservedRecord,
    mean: OutcomeMean,
    mu: f64,
    sigma: f64,
    theta: &ParameterSet,
    config: &ModelConfig,
) -> Result<LogQuadrature> {
    let a = mu - TAIL_SDS * sigma;
    let b = config.bound_l.ln();
    let panels = (((b - a) / (2.0 * sigma)).ceil() as usize).clamp(2, 16);
    let eta2 = theta.eta * theta.eta;
    let (y, delta) = (record.y, theta.delta);
    integrate_log(
        |u| h_log_integrand(y, mean, delta, eta2, mu, sigma, u, u.exp()),
        a,
        b,
        config.quadrature_abs_tol,
        panels,
        MAX_PANELS,
    )
}

/// `log h_ik` with its quadrature diagnostics (ZILoNM, observed zero).
pub fn log_h_integral(
    record: &ObservedRecord,
    k: usize,
    theta: &ParameterSet,
    config: &ModelConfig,
) -> Result<LogQuadrature> {
    let (mean, mu, sigma) = zilonm_parts(record, k, theta)?;
    adaptive_h(record, mean, mu, sigma, theta, config)
}

/// `h_ik` on its original scale (may underflow to zero).
pub fn h_integral(record: &ObservedRecord, k: usize, theta: &ParameterSet, config: &ModelConfig) -> Result<f64> {
    Ok(log_h_integral(record, k, theta, config)?.log_value.exp())
}

/// Log of `sum_{m=1}^{L} f(y | m) exp(-eta^2 m) f_k(m)` for a count component.
fn count_false_zero(
    family: MediatorFamily,
    record: &ObservedRecord,
    mean: OutcomeMean,
    eta_k: f64,
    theta: &ParameterSet,
    bound_l: f64,
) -> f64 {
    let eta2 = theta.eta * theta.eta;
    let top = bound_l.floor() as u64;
    let mut consts = MassConstants::at_zero();
    let terms: Vec<f64> = (1..=top)
        .map(|m| {
            let m = m as f64;
            consts = consts.step(theta, m);
            normal_logpdf(record.y, mean.positive(m), theta.delta) - eta2 * m
                + log_component_mass_with(family, theta, eta_k, m, &consts)
        })
        .collect();
    log_sum_exp(&terms)
}

/// Group-2 log-likelihood of false-zero component `k` (1-based).
pub fn loglik_false_zero(record: &ObservedRecord, k: usize, theta: &ParameterSet, config: &ModelConfig) -> Result<f64> {
    check_zero(record)?;
    check_component(theta, k)?;
    let family = theta.family();
    match family {
        MediatorFamily::Zilonm => {
            let lh = log_h_integral(record, k, theta, config)?.log_value;
            Ok(zilonm_false_zero(theta, lh))
        }
        _ => {
            let eta_k = linear_predictors(theta, record.x, &record.z).mu_or_loglambda[k - 1];
            let mean = OutcomeMean::new(theta, record.x, &record.z);
            Ok(count_false_zero(family, record, mean, eta_k, theta, config.bound_l))
        }
    }
}

fn zilonm_false_zero(theta: &ParameterSet, log_h: f64) -> f64 {
    -theta.delta.ln() - theta.sigma.expect("ZILoNM carries sigma").ln() + log_h - LN_2PI
}

/// Frozen quadrature nodes for one false-zero integral: abscissae on the
/// `u = log m` scale, their exponentials and log weights.
#[derive(Clone, Debug, Default)]
pub struct FixedNodes {
    pub(crate) u: Vec<f64>,
    pub(crate) exp_u: Vec<f64>,
    pub(crate) log_w: Vec<f64>,
}

/// Log-integrand values below the peak by more than this are dropped when
/// compacting a rule.
const COMPACT_DEPTH: f64 = 30.0;
/// Largest log-scale discrepancy accepted between a compact rule and the
/// adaptive value it replaces.
const COMPACT_TOL: f64 = 1e-9;

impl FixedNodes {
    fn from_panels(panels: &[(f64, f64)]) -> Self {
        let n = panels.len() * NODES_PER_PANEL;
        let mut out = FixedNodes {
            u: Vec::with_capacity(n),
            exp_u: Vec::with_capacity(n),
            log_w: Vec::with_capacity(n),
        };
        for &(a, b) in panels {
            for (u, w) in panel_nodes(a, b).into_iter().zip(panel_weights(a, b)) {
                out.u.push(u);
                out.exp_u.push(u.exp());
                out.log_w.push(w.ln());
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    fn log_integral(&self, y: f64, mean: OutcomeMean, delta: f64, eta2: f64, mu: f64, sigma: f64) -> f64 {
        let mut buf = [0.0f64; 64];
        let mut max = f64::NEG_INFINITY;
        let mut acc = 0.0;
        // Streaming log-sum-exp in chunks keeps the working set on the stack.
        for start in (0..self.u.len()).step_by(buf.len()) {
            let end = (start + buf.len()).min(self.u.len());
            let chunk = &mut buf[..end - start];
            for (j, slot) in (start..end).zip(chunk.iter_mut()) {
                *slot = self.log_w[j] + h_log_integrand(y, mean, delta, eta2, mu, sigma, self.u[j], self.exp_u[j]);
            }
            let cmax = chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if cmax == f64::NEG_INFINITY {
                continue;
            }
            if cmax > max {
                acc *= (max - cmax).exp();
                max = cmax;
            }
            acc += chunk.iter().map(|v| (v - max).exp()).sum::<f64>();
        }
        if max == f64::NEG_INFINITY {
            max
        } else {
            max + acc.ln()
        }
    }

    /// An `n`-point Gauss-Legendre rule on `[a, b]`.
    fn legendre(a: f64, b: f64, n: usize) -> Self {
        let (half, mid) = (0.5 * (b - a), 0.5 * (b + a));
        let mut out = FixedNodes {
            u: Vec::with_capacity(n),
            exp_u: Vec::with_capacity(n),
            log_w: Vec::with_capacity(n),
        };
        for &(t, w) in gauss_legendre(n) {
            let u = mid + half * t;
            out.u.push(u);
            out.exp_u.push(u.exp());
            out.log_w.push((half * w).ln());
        }
        out
    }

    /// A small fixed rule reproducing the adaptive value `quad` at the current
    /// parameters: Gauss-Legendre over the region where the integrand is
    /// within `COMPACT_DEPTH` of its peak, with the node count raised until it
    /// agrees with the adaptive value to `COMPACT_TOL` on the log scale.
    fn compact(quad: &LogQuadrature, log_f: impl Fn(f64) -> f64) -> Self {
        if quad.panels.is_empty() || !quad.log_value.is_finite() {
            return Self::default();
        }
        // Panels holding a sample within `COMPACT_DEPTH` of the peak; the
        // rule spans from the first such panel's left edge to the last one's right edge.
        let peak = quad.panel_peaks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let near = |i: &usize| quad.panel_peaks[*i] >= peak - COMPACT_DEPTH;
        let n_panels = quad.panels.len();
        let first = (0..n_panels).find(near).unwrap_or(0);
        let last = (0..n_panels).rev().find(near).unwrap_or(n_panels - 1);
        let (lo, hi) = (quad.panels[first].0, quad.panels[last].1);
        let mut terms = [0.0f64; MAX_LEGENDRE];
        for &n in LEGENDRE_SIZES.iter() {
            let rule = Self::legendre(lo, hi, n);
            for ((t, &u), w) in terms.iter_mut().zip(&rule.u).zip(&rule.log_w) {
                *t = w + log_f(u);
            }
            if (log_sum_exp(&terms[..n]) - quad.log_value).abs() <= COMPACT_TOL {
                return rule;
            }
        }
        Self::from_panels(&quad.panels)
    }
}

const LEGENDRE_SIZES: [usize; 4] = [12, 20, 32, 48];
const MAX_LEGENDRE: usize = 48;

/// Nodes and weights of the `n`-point Gauss-Legendre rule on `[-1, 1]`
/// (Golub-Welsch), cached for the sizes in `LEGENDRE_SIZES`.
fn gauss_legendre(n: usize) -> &'static [(f64, f64)] {
    static RULES: OnceLock<Vec<Vec<(f64, f64)>>> = OnceLock::new();
    let rules = RULES.get_or_init(|| LEGENDRE_SIZES.iter().map(|&n| golub_welsch(n)).collect());
    let i = LEGENDRE_SIZES.iter().position(|&s| s == n).expect("cached Legendre size");
    &rules[i]
}

fn golub_welsch(n: usize) -> Vec<(f64, f64)> {
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for i in 1..n {
        let k = i as f64;
        let off = k / (4.0 * k * k - 1.0).sqrt();
        jacobi[(i, i - 1)] = off;
        jacobi[(i - 1, i)] = off;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut rule: Vec<(f64, f64)> = (0..n)
        .map(|j| (eig.eigenvalues[j], 2.0 * eig.eigenvectors[(0, j)].powi(2)))
        .collect();
    rule.sort_by(|a, b| a.0.total_cmp(&b.0));
    rule
}

/// How false-zero integrals are evaluated.
#[derive(Clone, Copy, Debug)]
pub(crate) enum HRule<'a> {
    /// Adaptive quadrature to `config.quadrature_abs_tol`.
    Adaptive,
    /// Fixed nodes per observed zero (one set per component), indexed by record.
    Frozen(&'a [Vec<FixedNodes>]),
}

/// Record terms under `rule`; with `capture`, adaptive evaluations also
/// return compact fixed rules for later frozen evaluation.
fn record_terms(
    index: usize,
    record: &ObservedRecord,
    theta: &ParameterSet,
    config: &ModelConfig,
    rule: HRule<'_>,
    capture: bool,
) -> Result<(RecordLogLiks, Vec<FixedNodes>)> {
    let family = theta.family();
    let lp = linear_predictors(theta, record.x, &record.z);
    let w = class_weights(family, theta, &lp);
    let mean = OutcomeMean::new(theta, record.x, &record.z);
    if record.m_star > 0.0 {
        let consts = MassConstants::new(family, theta, record.m_star);
        let common = normal_logpdf(record.y, mean.positive(record.m_star), theta.delta)
            + log_not_masked(record.m_star, theta.eta, config.bound_l);
        let ell = lp
            .mu_or_loglambda
            .iter()
            .map(|&eta_k| common + log_component_mass_with(family, theta, eta_k, record.m_star, &consts))
            .collect();
        let row = RecordLogLiks {
            group: Group::Positive,
            ell,
            log_psi: w.log_psi,
        };
        return Ok((row, Vec::new()));
    }
    let mut nodes = Vec::with_capacity(if capture { theta.k() } else { 0 });
    let mut ell = Vec::with_capacity(theta.k() + 1);
    ell.push(normal_logpdf(record.y, mean.base, theta.delta));
    let eta2 = theta.eta * theta.eta;
    for (k, &eta_k) in lp.mu_or_loglambda.iter().enumerate() {
        let v = match family {
            MediatorFamily::Zilonm => {
                let sigma = theta.sigma.expect("ZILoNM carries sigma");
                let log_h = match rule {
                    HRule::Adaptive => {
                        let quad = adaptive_h(record, mean, eta_k, sigma, theta, config)?;
                        if capture {
                            let f = |u: f64| h_log_integrand(record.y, mean, theta.delta, eta2, eta_k, sigma, u, u.exp());
                            nodes.push(FixedNodes::compact(&quad, f));
                        }
                        quad.log_value
                    }
                    HRule::Frozen(all) => all[index][k].log_integral(record.y, mean, theta.delta, eta2, eta_k, sigma),
                };
                zilonm_false_zero(theta, log_h)
            }
            _ => count_false_zero(family, record, mean, eta_k, theta, config.bound_l),
        };
        ell.push(v);
    }
    let mut log_psi = Vec::with_capacity(theta.k() + 1);
    log_psi.push(w.log_delta);
    log_psi.extend(w.log_psi);
    let row = RecordLogLiks {
        group: Group::ZeroObserved,
        ell,
        log_psi,
    };
    Ok((row, nodes))
}

/// Class log-likelihoods and weights for one record.
pub fn record_logliks(record: &ObservedRecord, theta: &ParameterSet, config: &ModelConfig) -> Result<RecordLogLiks> {
    Ok(record_terms(0, record, theta, config, HRule::Adaptive, false)?.0)
}

pub(crate) fn all_record_logliks_with(
    dataset: &Dataset,
    theta: &ParameterSet,
    config: &ModelConfig,
    rule: HRule<'_>,
) -> Result<Vec<RecordLogLiks>> {
    let recs = dataset.records();
    map_range(config.execution, recs.len(), |i| {
        record_terms(i, &recs[i], theta, config, rule, false).map(|r| r.0)
    })
    .into_iter()
    .collect()
}

/// Adaptive record terms together with compact frozen rules at `theta`
/// (empty for positive records and count families).
pub(crate) fn logliks_and_nodes(
    dataset: &Dataset,
    theta: &ParameterSet,
    config: &ModelConfig,
) -> Result<(Vec<RecordLogLiks>, Vec<Vec<FixedNodes>>)> {
    let recs = dataset.records();
    let pairs: Vec<(RecordLogLiks, Vec<FixedNodes>)> = map_range(config.execution, recs.len(), |i| {
        record_terms(i, &recs[i], theta, config, HRule::Adaptive, true)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    Ok(pairs.into_iter().unzip())
}

/// Class log-likelihoods and weights for every record, in dataset order.
pub fn all_record_logliks(dataset: &Dataset, theta: &ParameterSet, config: &ModelConfig) -> Result<Vec<RecordLogLiks>> {
    all_record_logliks_with(dataset, theta, config, HRule::Adaptive)
}

pub(crate) fn sum_logliks(rows: &[RecordLogLiks]) -> Result<f64> {
    let per: Vec<f64> = rows.iter().map(RecordLogLiks::loglik).collect();
    if let Some(index) = per.iter().position(|v| *v == f64::NEG_INFINITY || v.is_nan()) {
        return Err(Error::ZeroLikelihood { index });
    }
    Ok(pairwise_sum(&per))
}

/// Observed-data log-likelihood.
pub fn observed_loglik(dataset: &Dataset, theta: &ParameterSet, config: &ModelConfig) -> Result<f64> {
    sum_logliks(&all_record_logliks(dataset, theta, config)?)
}

pub(crate) fn q_from_rows(rows: &[RecordLogLiks], tau: &PosteriorWeights) -> Result<f64> {
    if rows.len() != tau.n_records() {
        return Err(Error::DimensionMismatch {
            family: String::new(),
            k: tau.k(),
            reason: format!("{} records but {} posterior rows", rows.len(), tau.n_records()),
        });
    }
    let per: Vec<f64> = rows
        .iter()
        .enumerate()
        .map(|(i, row)| row.q_contribution(tau.weights(i)))
        .collect();
    Ok(pairwise_sum(&per))
}

/// Expected complete-data log-likelihood under the posterior weights `tau`.
pub fn q_function(dataset: &Dataset, theta: &ParameterSet, tau: &PosteriorWeights, config: &ModelConfig) -> Result<f64> {
    if tau.k() != theta.k() {
        return Err(Error::DimensionMismatch {
            family: theta.family().name().into(),
            k: theta.k(),
            reason: format!("posterior weights have K={}", tau.k()),
        });
    }
    q_from_rows(&all_record_logliks(dataset, theta, config)?, tau)
}
