//! Shared data model: observed records, configuration, parameter sets and
//! their unconstrained coordinates, fitted models and effect tables.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::em::EmTrace;
use crate::error::{Error, Result};
use crate::exec::Execution;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservedRecord {
    pub y: f64,
    /// Observed mediator; zero may be a true or a masked (false) zero.
    pub m_star: f64,
    pub x: f64,
    #[serde(default)]
    pub z: Vec<f64>,
}

impl ObservedRecord {
    pub fn new(y: f64, m_star: f64, x: f64) -> Self {
        Self {
            y,
            m_star,
            x,
            z: Vec::new(),
        }
    }

    pub fn with_confounders(mut self, z: Vec<f64>) -> Self {
        self.z = z;
        self
    }

    pub fn is_zero(&self) -> bool {
        self.m_star == 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    records: Vec<ObservedRecord>,
    confounder_names: Vec<String>,
}

impl Dataset {
    pub fn new(records: Vec<ObservedRecord>, confounder_names: Vec<String>) -> Result<Self> {
        if records.len() < 2 {
            return Err(Error::InvalidData(format!(
                "need at least 2 records, got {}",
                records.len()
            )));
        }
        let n_z = confounder_names.len();
        for (i, r) in records.iter().enumerate() {
            if r.z.len() != n_z {
                return Err(Error::InvalidData(format!(
                    "record {i} has {} confounders, expected {n_z}",
                    r.z.len()
                )));
            }
            if !(r.y.is_finite() && r.x.is_finite() && r.z.iter().all(|v| v.is_finite())) {
                return Err(Error::InvalidData(format!("record {i} has a non-finite value")));
            }
            if !(r.m_star.is_finite() && r.m_star >= 0.0) {
                return Err(Error::InvalidData(format!(
                    "record {i}: mediator must be finite and >= 0, got {}",
                    r.m_star
                )));
            }
        }
        if !records.iter().any(|r| r.m_star > 0.0) {
            return Err(Error::InvalidData(
                "at least one record needs a positive mediator value".into(),
            ));
        }
        Ok(Self {
            records,
            confounder_names,
        })
    }

    pub fn records(&self) -> &[ObservedRecord] {
        &self.records
    }

    pub fn confounder_names(&self) -> &[String] {
        &self.confounder_names
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_confounders(&self) -> usize {
        self.confounder_names.len()
    }

    pub fn n_zeros(&self) -> usize {
        self.records.iter().filter(|r| r.is_zero()).count()
    }

    /// True when every observed mediator is a whole number.
    pub fn is_integer_valued(&self) -> bool {
        self.records.iter().all(|r| r.m_star.fract() == 0.0)
    }

    pub fn confounder_means(&self) -> Vec<f64> {
        let n = self.records.len() as f64;
        let mut means = vec![0.0; self.n_confounders()];
        for r in &self.records {
            for (m, v) in means.iter_mut().zip(&r.z) {
                *m += v;
            }
        }
        means.iter_mut().for_each(|m| *m /= n);
        means
    }

    /// Checks the mediator support for a family (counts must be integers).
    pub fn check_family(&self, family: MediatorFamily) -> Result<()> {
        if family.is_count() {
            if let Some(i) = self.records.iter().position(|r| r.m_star.fract() != 0.0) {
                return Err(Error::InvalidData(format!(
                    "{family} needs integer mediator values; record {i} has {}",
                    self.records[i].m_star
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MediatorFamily {
    #[serde(rename = "ZILoNM")]
    Zilonm,
    #[serde(rename = "ZIPM")]
    Zipm,
    #[serde(rename = "ZINBM")]
    Zinbm,
}

impl MediatorFamily {
    pub const ALL: [MediatorFamily; 3] = [Self::Zilonm, Self::Zipm, Self::Zinbm];

    pub fn name(self) -> &'static str {
        match self {
            Self::Zilonm => "ZILoNM",
            Self::Zipm => "ZIPM",
            Self::Zinbm => "ZINBM",
        }
    }

    pub fn is_count(self) -> bool {
        !matches!(self, Self::Zilonm)
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "zilonm" => Some(Self::Zilonm),
            "zipm" => Some(Self::Zipm),
            "zinbm" => Some(Self::Zinbm),
            _ => None,
        }
    }
}

impl fmt::Display for MediatorFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FamilyChoice {
    Auto,
    Fixed(MediatorFamily),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KRange {
    pub min: usize,
    pub max: usize,
}

impl KRange {
    pub fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }

    pub fn single(k: usize) -> Self {
        Self { min: k, max: k }
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        self.min..=self.max
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub family: FamilyChoice,
    pub k_range: KRange,
    /// Upper bound `L` of the false-zero mechanism.
    pub bound_l: f64,
    pub include_xb_interaction: bool,
    pub include_xm_interaction: bool,
    pub max_em_iter: usize,
    pub loglik_rel_tol: f64,
    pub n_starts: usize,
    pub quadrature_abs_tol: f64,
    pub seed: u64,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            family: FamilyChoice::Auto,
            k_range: KRange::new(1, 3),
            bound_l: 20.0,
            include_xb_interaction: true,
            include_xm_interaction: true,
            max_em_iter: 500,
            loglik_rel_tol: 1e-8,
            n_starts: 5,
            quadrature_abs_tol: 1e-10,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let KRange { min, max } = self.k_range;
        if min < 1 || max > 10 || min > max {
            return Err(Error::InvalidConfig(format!(
                "k range {min}:{max} must satisfy 1 <= min <= max <= 10"
            )));
        }
        if !(self.bound_l > 0.0 && self.bound_l.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "bound L must be positive, got {}",
                self.bound_l
            )));
        }
        if !(self.loglik_rel_tol > 0.0 && self.quadrature_abs_tol > 0.0) {
            return Err(Error::InvalidConfig("tolerances must be positive".into()));
        }
        if self.n_starts == 0 || self.max_em_iter == 0 {
            return Err(Error::InvalidConfig(
                "n_starts and max_em_iter must be at least 1".into(),
            ));
        }
        if let FamilyChoice::Fixed(f) = self.family {
            self.validate_for(f)?;
        }
        Ok(())
    }

    /// Count families sum the false-zero mass over `m = 1..L`, so `L` must be whole.
    pub fn validate_for(&self, family: MediatorFamily) -> Result<()> {
        if family.is_count() && self.bound_l.fract() != 0.0 {
            return Err(Error::InvalidConfig(format!(
                "{family} needs an integer bound L, got {}",
                self.bound_l
            )));
        }
        Ok(())
    }
}

/// Full parameter vector of the outcome model, the mediator mixture, the
/// zero model and the false-zero mechanism.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    /// Outcome coefficients, indexed by subscript: intercept, M, B, X, X*B, X*M.
    pub beta: [f64; 6],
    pub beta_z: Vec<f64>,
    pub delta: f64,
    pub alpha0: Vec<f64>,
    pub alpha1: Vec<f64>,
    pub alpha_z: Vec<f64>,
    pub gamma0: f64,
    pub gamma1: f64,
    pub gamma_z: Vec<f64>,
    pub psi: Vec<f64>,
    /// Shared log-scale SD (ZILoNM only).
    pub sigma: Option<f64>,
    /// Shared NB dispersion (ZINBM only).
    pub r: Option<f64>,
    pub eta: f64,
}

impl ParameterSet {
    /// A valid neutral starting point: zero coefficients, unit scales, uniform weights.
    pub fn neutral(family: MediatorFamily, k: usize, n_z: usize) -> Self {
        Self {
            beta: [0.0; 6],
            beta_z: vec![0.0; n_z],
            delta: 1.0,
            alpha0: (0..k).map(|j| j as f64).collect(),
            alpha1: vec![0.0; k],
            alpha_z: vec![0.0; n_z],
            gamma0: 0.0,
            gamma1: 0.0,
            gamma_z: vec![0.0; n_z],
            psi: vec![1.0 / k as f64; k],
            sigma: (family == MediatorFamily::Zilonm).then_some(1.0),
            r: (family == MediatorFamily::Zinbm).then_some(1.0),
            eta: 1.0,
        }
    }

    /// Family implied by the shape parameters: `sigma` for ZILoNM, `r` for
    /// ZINBM, neither for ZIPM.
    pub fn family(&self) -> MediatorFamily {
        match (self.sigma, self.r) {
            (Some(_), _) => MediatorFamily::Zilonm,
            (None, Some(_)) => MediatorFamily::Zinbm,
            (None, None) => MediatorFamily::Zipm,
        }
    }

    pub fn k(&self) -> usize {
        self.alpha0.len()
    }

    pub fn n_z(&self) -> usize {
        self.beta_z.len()
    }

    fn mismatch(&self, family: MediatorFamily, k: usize, reason: impl Into<String>) -> Error {
        Error::DimensionMismatch {
            family: family.name().into(),
            k,
            reason: reason.into(),
        }
    }

    /// Structural check against a family and mixture order.
    pub fn check_shape(&self, family: MediatorFamily, k: usize, n_z: usize) -> Result<()> {
        if self.alpha0.len() != k || self.alpha1.len() != k || self.psi.len() != k {
            return Err(self.mismatch(family, k, "alpha0, alpha1 and psi need length K"));
        }
        if self.beta_z.len() != n_z || self.alpha_z.len() != n_z || self.gamma_z.len() != n_z {
            return Err(self.mismatch(family, k, format!("confounder slopes need length {n_z}")));
        }
        let want_sigma = family == MediatorFamily::Zilonm;
        let want_r = family == MediatorFamily::Zinbm;
        if self.sigma.is_some() != want_sigma || self.r.is_some() != want_r {
            return Err(self.mismatch(family, k, "sigma/r presence does not match the family"));
        }
        Ok(())
    }

    pub fn validate(&self, family: MediatorFamily) -> Result<()> {
        let k = self.k();
        self.check_shape(family, k, self.n_z())?;
        if k == 0 {
            return Err(self.mismatch(family, k, "K must be at least 1"));
        }
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidParameters(format!("{name} must be positive, got {v}")))
            }
        };
        positive("delta", self.delta)?;
        positive("eta", self.eta)?;
        if let Some(s) = self.sigma {
            positive("sigma", s)?;
        }
        if let Some(r) = self.r {
            positive("r", r)?;
        }
        let sum: f64 = self.psi.iter().sum();
        if (sum - 1.0).abs() > 1e-12 || self.psi.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
            return Err(Error::InvalidParameters(format!(
                "psi must be a strictly positive simplex vector, got {:?}",
                self.psi
            )));
        }
        let finite = self
            .beta
            .iter()
            .chain(&self.beta_z)
            .chain(&self.alpha0)
            .chain(&self.alpha1)
            .chain(&self.alpha_z)
            .chain(&self.gamma_z)
            .chain([&self.gamma0, &self.gamma1])
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidParameters("non-finite coefficient".into()));
        }
        Ok(())
    }

    /// Sorts mixture components by ascending `alpha0` (ties by `alpha1`).
    /// Returns true when the order changed.
    pub fn canonicalize(&mut self) -> bool {
        let k = self.k();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| {
            self.alpha0[a]
                .total_cmp(&self.alpha0[b])
                .then(self.alpha1[a].total_cmp(&self.alpha1[b]))
                .then(self.psi[a].total_cmp(&self.psi[b]))
        });
        if order.iter().enumerate().all(|(i, &j)| i == j) {
            return false;
        }
        let permute = |v: &Vec<f64>| order.iter().map(|&j| v[j]).collect::<Vec<_>>();
        self.alpha0 = permute(&self.alpha0);
        self.alpha1 = permute(&self.alpha1);
        self.psi = permute(&self.psi);
        true
    }
}

/// Mapping between a `ParameterSet` and its unconstrained coordinates:
/// logs for the positive scalars, additive log-ratios for the mixing weights
/// (last component is the reference), identity elsewhere. Interaction
/// coefficients switched off in the configuration are fixed at zero and
/// carry no coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub family: MediatorFamily,
    pub k: usize,
    pub n_z: usize,
    pub xb_interaction: bool,
    pub xm_interaction: bool,
}

impl Layout {
    pub fn new(family: MediatorFamily, k: usize, n_z: usize, config: &ModelConfig) -> Self {
        Self {
            family,
            k,
            n_z,
            xb_interaction: config.include_xb_interaction,
            xm_interaction: config.include_xm_interaction,
        }
    }

    /// Layout with every interaction switched on.
    pub fn full(family: MediatorFamily, k: usize, n_z: usize) -> Self {
        Self {
            family,
            k,
            n_z,
            xb_interaction: true,
            xm_interaction: true,
        }
    }

    pub(crate) fn beta_free(&self) -> Vec<usize> {
        let mut idx = vec![0, 1, 2, 3];
        if self.xb_interaction {
            idx.push(4);
        }
        if self.xm_interaction {
            idx.push(5);
        }
        idx
    }

    fn has_shape_param(&self) -> bool {
        self.family != MediatorFamily::Zipm
    }

    pub fn dim(&self) -> usize {
        self.beta_free().len()
            + 3 * self.n_z
            + 1
            + 2 * self.k
            + 2
            + (self.k - 1)
            + usize::from(self.has_shape_param())
            + 1
    }

    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.beta_free().iter().map(|i| format!("beta{i}")).collect();
        names.extend((1..=self.n_z).map(|j| format!("beta_z[{j}]")));
        names.push("log_delta".into());
        names.extend((1..=self.k).map(|j| format!("alpha0[{j}]")));
        names.extend((1..=self.k).map(|j| format!("alpha1[{j}]")));
        names.extend((1..=self.n_z).map(|j| format!("alpha_z[{j}]")));
        names.push("gamma0".into());
        names.push("gamma1".into());
        names.extend((1..=self.n_z).map(|j| format!("gamma_z[{j}]")));
        names.extend((1..self.k).map(|j| format!("alr_psi[{j}]")));
        match self.family {
            MediatorFamily::Zilonm => names.push("log_sigma".into()),
            MediatorFamily::Zinbm => names.push("log_r".into()),
            MediatorFamily::Zipm => {}
        }
        names.push("log_eta".into());
        names
    }

    pub fn to_free(&self, theta: &ParameterSet) -> Result<Vec<f64>> {
        theta.check_shape(self.family, self.k, self.n_z)?;
        let mut v = Vec::with_capacity(self.dim());
        for i in self.beta_free() {
            v.push(theta.beta[i]);
        }
        v.extend(&theta.beta_z);
        v.push(theta.delta.ln());
        v.extend(&theta.alpha0);
        v.extend(&theta.alpha1);
        v.extend(&theta.alpha_z);
        v.push(theta.gamma0);
        v.push(theta.gamma1);
        v.extend(&theta.gamma_z);
        let last = theta.psi[self.k - 1].ln();
        v.extend(theta.psi[..self.k - 1].iter().map(|p| p.ln() - last));
        match self.family {
            MediatorFamily::Zilonm => v.push(theta.sigma.unwrap_or(f64::NAN).ln()),
            MediatorFamily::Zinbm => v.push(theta.r.unwrap_or(f64::NAN).ln()),
            MediatorFamily::Zipm => {}
        }
        v.push(theta.eta.ln());
        Ok(v)
    }

    pub fn from_free(&self, v: &[f64]) -> Result<ParameterSet> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                family: self.family.name().into(),
                k: self.k,
                reason: format!("free vector has length {}, expected {}", v.len(), self.dim()),
            });
        }
        let mut it = v.iter().copied();
        let mut take = |n: usize| -> Vec<f64> { (&mut it).take(n).collect() };
        let mut beta = [0.0; 6];
        for (i, b) in self.beta_free().into_iter().zip(take(self.beta_free().len())) {
            beta[i] = b;
        }
        let beta_z = take(self.n_z);
        let delta = take(1)[0].exp();
        let alpha0 = take(self.k);
        let alpha1 = take(self.k);
        let alpha_z = take(self.n_z);
        let g = take(2);
        let gamma_z = take(self.n_z);
        let alr = take(self.k - 1);
        let psi = softmax_with_reference(&alr);
        let (sigma, r) = match self.family {
            MediatorFamily::Zilonm => (Some(take(1)[0].exp()), None),
            MediatorFamily::Zinbm => (None, Some(take(1)[0].exp())),
            MediatorFamily::Zipm => (None, None),
        };
        let eta = take(1)[0].exp();
        Ok(ParameterSet {
            beta,
            beta_z,
            delta,
            alpha0,
            alpha1,
            alpha_z,
            gamma0: g[0],
            gamma1: g[1],
            gamma_z,
            psi,
            sigma,
            r,
            eta,
        })
    }
}

/// Unconstrained coordinates of `theta` under `layout`.
pub fn free_vector(theta: &ParameterSet, layout: &Layout) -> Result<Vec<f64>> {
    layout.to_free(theta)
}

/// Inverse of the additive log-ratio map with an implicit trailing zero.
fn softmax_with_reference(alr: &[f64]) -> Vec<f64> {
    let max = alr.iter().copied().fold(0.0_f64, f64::max);
    let mut w: Vec<f64> = alr.iter().map(|a| (a - max).exp()).collect();
    w.push((-max).exp());
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    w
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FittedModel {
    /// Configuration the fit ran under; `family` and `k_range` are resolved.
    pub config: ModelConfig,
    pub family: MediatorFamily,
    pub k: usize,
    pub layout: Layout,
    pub theta_hat: ParameterSet,
    pub loglik: f64,
    pub n_obs: usize,
    /// Confounder means of the fitted data (default effect reference point).
    pub confounder_means: Vec<f64>,
    pub n_iter: usize,
    pub converged: bool,
    pub info_matrix: DMatrix<f64>,
    pub vcov: Option<DMatrix<f64>>,
    pub n_params: usize,
    pub bic: f64,
    pub aic: f64,
    pub degenerate_flags: Vec<String>,
    pub warnings: Vec<String>,
    pub trace: EmTrace,
}

impl FittedModel {
    pub fn is_degenerate(&self) -> bool {
        !self.degenerate_flags.is_empty()
    }

    /// Standard errors of the free coordinates, when the covariance is available.
    pub fn free_se(&self) -> Option<Vec<f64>> {
        let v = self.vcov.as_ref()?;
        Some((0..v.nrows()).map(|i| v[(i, i)].max(0.0).sqrt()).collect())
    }
}

pub fn bic(loglik: f64, n_params: usize, n_obs: usize) -> f64 {
    -2.0 * loglik + n_params as f64 * (n_obs as f64).ln()
}

pub fn aic(loglik: f64, n_params: usize) -> f64 {
    -2.0 * loglik + 2.0 * n_params as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EffectKind {
    #[serde(rename = "NIE1")]
    Nie1,
    #[serde(rename = "NIE2")]
    Nie2,
    #[serde(rename = "NIE")]
    Nie,
    #[serde(rename = "NDE")]
    Nde,
    #[serde(rename = "TE")]
    Te,
}

impl EffectKind {
    pub const ALL: [EffectKind; 5] = [Self::Nie1, Self::Nie2, Self::Nie, Self::Nde, Self::Te];

    pub fn name(self) -> &'static str {
        match self {
            Self::Nie1 => "NIE1",
            Self::Nie2 => "NIE2",
            Self::Nie => "NIE",
            Self::Nde => "NDE",
            Self::Te => "TE",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub effect: EffectKind,
    pub estimate: f64,
    pub se: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub p_value: Option<f64>,
}

impl EffectEstimate {
    pub fn covers(&self, truth: f64) -> Option<bool> {
        Some(self.ci_low? <= truth && truth <= self.ci_high?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectTable {
    pub x1: f64,
    pub x2: f64,
    pub z_ref: Vec<f64>,
    pub effects: Vec<EffectEstimate>,
}

impl EffectTable {
    pub fn get(&self, kind: EffectKind) -> &EffectEstimate {
        self.effects
            .iter()
            .find(|e| e.effect == kind)
            .expect("effect tables hold every effect kind")
    }
}
