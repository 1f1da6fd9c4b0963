//! EM estimation: posterior weights, numerically maximised M-step,
//! multi-start driver and observed-information covariance.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::map_range;
use crate::likelihood::{all_record_logliks_with, logliks_and_nodes, q_from_rows, sum_logliks, FixedNodes, Group, HRule, RecordLogLiks};
use crate::model::{aic, bic, Dataset, FittedModel, Layout, MediatorFamily, ModelConfig, ParameterSet};
use crate::numeric::logistic;
use crate::gradient::{q_gradient, score};
use crate::optim::{minimize_with_gradient, BfgsOptions};

/// Posterior class probabilities. `tau1` holds positive records (K columns),
/// `tau2` observed zeros (K+1 columns, column 0 the true-zero class).
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorWeights {
    pub tau1: DMatrix<f64>,
    pub tau2: DMatrix<f64>,
    rows: Vec<(Group, usize)>,
}

impl PosteriorWeights {
    pub fn from_logliks(rows: &[RecordLogLiks]) -> Result<Self> {
        let k = rows
            .iter()
            .map(|r| match r.group {
                Group::Positive => r.ell.len(),
                Group::ZeroObserved => r.ell.len() - 1,
            })
            .next()
            .unwrap_or(0);
        let n_pos = rows.iter().filter(|r| r.group == Group::Positive).count();
        let mut tau1 = DMatrix::zeros(n_pos, k);
        let mut tau2 = DMatrix::zeros(rows.len() - n_pos, k + 1);
        let mut index = Vec::with_capacity(rows.len());
        let (mut i1, mut i2) = (0, 0);
        for (i, row) in rows.iter().enumerate() {
            let post = row.posterior().ok_or(Error::ZeroLikelihood { index: i })?;
            match row.group {
                Group::Positive => {
                    tau1.row_mut(i1).copy_from_slice(&post);
                    index.push((Group::Positive, i1));
                    i1 += 1;
                }
                Group::ZeroObserved => {
                    tau2.row_mut(i2).copy_from_slice(&post);
                    index.push((Group::ZeroObserved, i2));
                    i2 += 1;
                }
            }
        }
        Ok(Self { tau1, tau2, rows: index })
    }

    pub fn n_records(&self) -> usize {
        self.rows.len()
    }

    pub fn k(&self) -> usize {
        self.tau1.ncols().max(self.tau2.ncols().saturating_sub(1))
    }

    /// Weights of record `i` in class order.
    pub fn weights(&self, i: usize) -> impl Iterator<Item = f64> + '_ {
        let (group, r) = self.rows[i];
        let m = match group {
            Group::Positive => &self.tau1,
            Group::ZeroObserved => &self.tau2,
        };
        (0..m.ncols()).map(move |c| m[(r, c)])
    }

    /// Summed weight of each mixture component over both groups (index 0..K).
    pub fn component_totals(&self) -> Vec<f64> {
        let k = self.k();
        (0..k)
            .map(|j| self.tau1.column(j).sum() + self.tau2.column(j + 1).sum())
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EmTrace {
    pub loglik_path: Vec<f64>,
    /// Euclidean norm of the free vector after each iteration.
    pub theta_path_summary: Vec<f64>,
    pub start_index: usize,
    /// Final log-likelihood of every start (`None` for failed starts).
    pub start_logliks: Vec<Option<f64>>,
}

pub fn e_step(dataset: &Dataset, theta: &ParameterSet, config: &ModelConfig) -> Result<PosteriorWeights> {
    let rows = all_record_logliks_with(dataset, theta, config, HRule::Adaptive)?;
    PosteriorWeights::from_logliks(&rows)
}

/// Official per-record terms at `theta` plus frozen quadrature nodes for the
/// next M-step.
struct Evaluation {
    rows: Vec<RecordLogLiks>,
    nodes: Vec<Vec<FixedNodes>>,
    loglik: f64,
}

fn evaluate(dataset: &Dataset, theta: &ParameterSet, config: &ModelConfig) -> Result<Evaluation> {
    let (rows, nodes) = logliks_and_nodes(dataset, theta, config)?;
    let loglik = sum_logliks(&rows)?;
    Ok(Evaluation { rows, nodes, loglik })
}

/// Result of one M-step.
struct MStep {
    theta: ParameterSet,
    /// Adaptive record terms and frozen rules at the new `theta`.
    rows: Vec<RecordLogLiks>,
    nodes: Vec<Vec<FixedNodes>>,
    inv_hessian: Option<DMatrix<f64>>,
}

const GEM_SLACK: f64 = 1e-10;

fn m_step_inner(
    dataset: &Dataset,
    tau: &PosteriorWeights,
    theta0: &ParameterSet,
    q0: f64,
    layout: &Layout,
    nodes: &[Vec<FixedNodes>],
    config: &ModelConfig,
    warm: Option<&DMatrix<f64>>,
) -> Result<MStep> {
    let v0 = layout.to_free(theta0)?;
    let gradient = |v: &[f64]| -> Vec<f64> {
        match layout.from_free(v) {
            Ok(theta) => q_gradient(dataset, &theta, tau, nodes, layout, config).into_iter().map(|g| -g).collect(),
            Err(_) => vec![f64::NAN; v.len()],
        }
    };
    let surrogate = |v: &[f64]| -> f64 {
        let Ok(theta) = layout.from_free(v) else {
            return f64::INFINITY;
        };
        match all_record_logliks_with(dataset, &theta, config, HRule::Frozen(nodes)).and_then(|rows| q_from_rows(&rows, tau)) {
            Ok(q) if q.is_finite() => -q,
            _ => f64::INFINITY,
        }
    };
    let opts = BfgsOptions {
        execution: config.execution,
        f_tol: 1e-10,
        ..BfgsOptions::default()
    };
    let f0 = surrogate(&v0);
    let out = minimize_with_gradient(&surrogate, &gradient, &v0, f0, &opts, warm);

    // Accept only an ascent of the exact Q; pull back towards theta0 otherwise.
    let mut t = 1.0;
    for _ in 0..30 {
        let v: Vec<f64> = v0.iter().zip(&out.x).map(|(a, b)| a + t * (b - a)).collect();
        let theta = layout.from_free(&v)?;
        if let Ok((rows, nodes)) = logliks_and_nodes(dataset, &theta, config) {
            if let Ok(q) = q_from_rows(&rows, tau) {
                if q >= q0 - GEM_SLACK && sum_logliks(&rows).is_ok() {
                    return Ok(MStep {
                        theta,
                        rows,
                        nodes,
                        inv_hessian: Some(out.inv_hessian),
                    });
                }
            }
        }
        t *= 0.5;
    }
    if out.grad_max_norm > 1e-3 {
        return Err(Error::NoAscent {
            grad_norm: out.grad_max_norm,
        });
    }
    let (rows, nodes) = logliks_and_nodes(dataset, theta0, config)?;
    Ok(MStep {
        theta: theta0.clone(),
        rows,
        nodes,
        inv_hessian: None,
    })
}

/// One generalized-EM M-step: a quasi-Newton ascent of `Q(. | theta_init)`
/// over the free coordinates, guaranteed not to decrease `Q`.
pub fn m_step(dataset: &Dataset, tau: &PosteriorWeights, theta_init: &ParameterSet, config: &ModelConfig) -> Result<ParameterSet> {
    let family = theta_init.family();
    let layout = Layout::new(family, theta_init.k(), theta_init.n_z(), config);
    let ev = evaluate(dataset, theta_init, config)?;
    let q0 = q_from_rows(&ev.rows, tau)?;
    let step = m_step_inner(dataset, tau, theta_init, q0, &layout, &ev.nodes, config, None)?;
    Ok(step.theta)
}

struct RunResult {
    theta: ParameterSet,
    loglik: f64,
    n_iter: usize,
    converged: bool,
    trace: EmTrace,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn run_em(dataset: &Dataset, init: ParameterSet, layout: &Layout, config: &ModelConfig, start: usize) -> Result<RunResult> {
    let mut theta = init;
    theta.canonicalize();
    let mut ev = evaluate(dataset, &theta, config)?;
    let mut trace = EmTrace {
        start_index: start,
        ..EmTrace::default()
    };
    trace.loglik_path.push(ev.loglik);
    trace.theta_path_summary.push(norm(&layout.to_free(&theta)?));
    let mut warm: Option<DMatrix<f64>> = None;
    let mut converged = false;
    let mut n_iter = 0;
    while n_iter < config.max_em_iter {
        n_iter += 1;
        let tau = PosteriorWeights::from_logliks(&ev.rows)?;
        let q0 = q_from_rows(&ev.rows, &tau)?;
        let step = m_step_inner(dataset, &tau, &theta, q0, layout, &ev.nodes, config, warm.as_ref())?;
        let mut next = step.theta;
        warm = step.inv_hessian;
        let loglik = sum_logliks(&step.rows)?;
        let rel = (loglik - ev.loglik).abs() / ev.loglik.abs().max(f64::MIN_POSITIVE);
        ev = if next.canonicalize() {
            warm = None;
            evaluate(dataset, &next, config)?
        } else {
            Evaluation {
                rows: step.rows,
                nodes: step.nodes,
                loglik,
            }
        };
        theta = next;
        trace.loglik_path.push(loglik);
        trace.theta_path_summary.push(norm(&layout.to_free(&theta)?));
        if rel < config.loglik_rel_tol {
            converged = true;
            break;
        }
    }
    Ok(RunResult {
        theta,
        loglik: ev.loglik,
        n_iter,
        converged,
        trace,
    })
}

/// Least-squares solve via SVD (tolerates rank deficiency).
fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let svd = x.clone().svd(true, true);
    svd.solve(y, 1e-10).unwrap_or_else(|_| DVector::zeros(x.ncols()))
}

/// Logistic regression by iteratively reweighted least squares.
fn logistic_regression(x: &DMatrix<f64>, y: &[f64]) -> DVector<f64> {
    let p = x.ncols();
    let mut b = DVector::zeros(p);
    for _ in 0..25 {
        let eta = x * &b;
        let mut xtwx = DMatrix::<f64>::identity(p, p) * 1e-6;
        let mut xtz = DVector::zeros(p);
        for i in 0..x.nrows() {
            let mu = logistic(eta[i]);
            let w = (mu * (1.0 - mu)).max(1e-10);
            let z = eta[i] + (y[i] - mu) / w;
            let row = x.row(i).transpose();
            xtwx += &row * row.transpose() * w;
            xtz += row * (w * z);
        }
        let Some(next) = xtwx.cholesky().map(|c| c.solve(&xtz)) else {
            break;
        };
        let next = next.map(|v| v.clamp(-10.0, 10.0));
        let done = (&next - &b).amax() < 1e-10;
        b = next;
        if done {
            break;
        }
    }
    b
}

/// Deterministic starting values (see crate docs for the recipe).
pub fn initial_parameters(dataset: &Dataset, family: MediatorFamily, k: usize, config: &ModelConfig) -> ParameterSet {
    let recs = dataset.records();
    let n = recs.len();
    let n_z = dataset.n_confounders();
    let mut theta = ParameterSet::neutral(family, k, n_z);

    let mut cols: Vec<usize> = vec![0, 1, 2, 3];
    if config.include_xb_interaction {
        cols.push(4);
    }
    if config.include_xm_interaction {
        cols.push(5);
    }
    let p = cols.len() + n_z;
    let design = DMatrix::from_fn(n, p, |i, j| {
        let r = &recs[i];
        let b = if r.m_star > 0.0 { 1.0 } else { 0.0 };
        if j < cols.len() {
            match cols[j] {
                0 => 1.0,
                1 => r.m_star,
                2 => b,
                3 => r.x,
                4 => r.x * b,
                _ => r.x * r.m_star,
            }
        } else {
            r.z[j - cols.len()]
        }
    });
    let y = DVector::from_iterator(n, recs.iter().map(|r| r.y));
    let coef = least_squares(&design, &y);
    for (j, &c) in cols.iter().enumerate() {
        theta.beta[c] = coef[j];
    }
    for j in 0..n_z {
        theta.beta_z[j] = coef[cols.len() + j];
    }
    let resid = &y - &design * &coef;
    theta.delta = (resid.norm_squared() / n as f64).sqrt().max(1e-3);

    let zx = DMatrix::from_fn(n, 2 + n_z, |i, j| match j {
        0 => 1.0,
        1 => recs[i].x,
        _ => recs[i].z[j - 2],
    });
    let zeros: Vec<f64> = recs.iter().map(|r| if r.m_star == 0.0 { 1.0 } else { 0.0 }).collect();
    let g = logistic_regression(&zx, &zeros);
    theta.gamma0 = g[0];
    theta.gamma1 = g[1];
    for j in 0..n_z {
        theta.gamma_z[j] = g[2 + j];
    }

    let mut pos: Vec<f64> = recs.iter().filter(|r| r.m_star > 0.0).map(|r| r.m_star).collect();
    pos.sort_by(f64::total_cmp);
    let groups: Vec<&[f64]> = (0..k)
        .map(|j| {
            let lo = j * pos.len() / k;
            let hi = ((j + 1) * pos.len() / k).max(lo + 1).min(pos.len());
            &pos[lo.min(hi - 1)..hi]
        })
        .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    match family {
        MediatorFamily::Zilonm => {
            let mut ss = 0.0;
            for (j, grp) in groups.iter().enumerate() {
                let logs: Vec<f64> = grp.iter().map(|m| m.ln()).collect();
                let c = mean(&logs);
                theta.alpha0[j] = c;
                ss += logs.iter().map(|l| (l - c).powi(2)).sum::<f64>();
            }
            theta.sigma = Some((ss / pos.len() as f64).sqrt().max(0.05));
        }
        _ => {
            for (j, grp) in groups.iter().enumerate() {
                theta.alpha0[j] = mean(grp).max(1e-3).ln();
            }
        }
    }
    for j in 1..k {
        if theta.alpha0[j] <= theta.alpha0[j - 1] {
            theta.alpha0[j] = theta.alpha0[j - 1] + 1e-3;
        }
    }
    theta
}

/// Observed information (negative Hessian of the observed log-likelihood)
/// over the free coordinates, by central differences with step
/// `1e-4 * max(1, |coord|)`.
pub fn observed_information(dataset: &Dataset, theta_hat: &ParameterSet, config: &ModelConfig) -> Result<DMatrix<f64>> {
    let layout = Layout::new(theta_hat.family(), theta_hat.k(), theta_hat.n_z(), config);
    information_for(dataset, theta_hat, &layout, config)
}

fn information_for(dataset: &Dataset, theta_hat: &ParameterSet, layout: &Layout, config: &ModelConfig) -> Result<DMatrix<f64>> {
    let v = layout.to_free(theta_hat)?;
    let d = v.len();
    let h: Vec<f64> = v.iter().map(|x| 1e-4 * x.abs().max(1.0)).collect();
    // Central differences of the analytic score, one column per free coordinate.
    let cols = map_range(config.execution, 2 * d, |e| {
        let j = e / 2;
        let mut w = v.clone();
        w[j] += if e % 2 == 0 { h[j] } else { -h[j] };
        layout.from_free(&w).and_then(|t| score(dataset, &t, layout, config))
    });
    let mut info = DMatrix::zeros(d, d);
    for j in 0..d {
        let plus = cols[2 * j].as_ref().map_err(|_| Error::NonFiniteHessian(j, j))?;
        let minus = cols[2 * j + 1].as_ref().map_err(|_| Error::NonFiniteHessian(j, j))?;
        for i in 0..d {
            info[(i, j)] = -(plus[i] - minus[i]) / (2.0 * h[j]);
        }
    }
    let info = (&info + info.transpose()) * 0.5;
    if let Some(pos) = info.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFiniteHessian(pos % d, pos / d));
    }
    Ok(info)
}

/// Inverse of the information matrix when it is positive definite, plus
/// whether it is near-singular (condition number above 1e10 or not PD).
pub fn covariance_from_information(info: &DMatrix<f64>) -> (Option<DMatrix<f64>>, bool) {
    let sym = (info + info.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    let min = eig.eigenvalues.min();
    let max = eig.eigenvalues.max();
    let near_singular = !(min > 0.0) || max / min > 1e10;
    let vcov = sym.cholesky().map(|c| c.inverse());
    (vcov, near_singular)
}

fn flags(theta: &ParameterSet) -> (Vec<String>, Vec<String>) {
    let mut degenerate = Vec::new();
    let mut warnings = Vec::new();
    for (j, p) in theta.psi.iter().enumerate() {
        if *p < 1e-4 {
            degenerate.push(format!("psi[{}] below 1e-4", j + 1));
        } else if *p < 0.05 {
            warnings.push(format!("psi[{}] below 0.05", j + 1));
        }
    }
    for a in 0..theta.k() {
        for b in a + 1..theta.k() {
            let gap = (theta.alpha0[a] - theta.alpha0[b]).abs();
            if gap < 1e-6 {
                degenerate.push(format!("alpha0[{}] and alpha0[{}] coincide", a + 1, b + 1));
            } else if gap < 0.05 {
                warnings.push(format!("alpha0[{}] and alpha0[{}] within 0.05", a + 1, b + 1));
            }
        }
    }
    let at_bound = |v: f64| !(1e-6..=1e6).contains(&v);
    if at_bound(theta.delta) {
        degenerate.push("delta at bound".into());
    }
    if theta.sigma.is_some_and(at_bound) {
        degenerate.push("sigma at bound".into());
    }
    (degenerate, warnings)
}

/// Multi-start EM fit of one (family, K) model.
pub fn fit(dataset: &Dataset, family: MediatorFamily, k: usize, config: &ModelConfig) -> Result<FittedModel> {
    config.validate()?;
    config.validate_for(family)?;
    dataset.check_family(family)?;
    if k == 0 {
        return Err(Error::InvalidConfig("K must be at least 1".into()));
    }
    let layout = Layout::new(family, k, dataset.n_confounders(), config);
    let base = initial_parameters(dataset, family, k, config);
    let base_free = layout.to_free(&base)?;
    let jitter = Normal::new(0.0, 0.25).expect("valid normal");
    let inits: Vec<ParameterSet> = (0..config.n_starts)
        .map(|s| {
            if s == 0 {
                return Ok(base.clone());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(s as u64);
            let v: Vec<f64> = base_free.iter().map(|x| x + jitter.sample(&mut rng)).collect();
            layout.from_free(&v)
        })
        .collect::<Result<_>>()?;
    let runs = map_range(config.execution, inits.len(), |s| run_em(dataset, inits[s].clone(), &layout, config, s));
    let start_logliks: Vec<Option<f64>> = runs.iter().map(|r| r.as_ref().ok().map(|r| r.loglik)).collect();
    let best = runs
        .into_iter()
        .filter_map(|r| r.ok())
        .filter(|r| r.loglik.is_finite())
        .reduce(|a, b| if b.loglik > a.loglik { b } else { a })
        .ok_or(Error::AllStartsFailed(config.n_starts))?;

    let info = information_for(dataset, &best.theta, &layout, config)?;
    let (vcov, near_singular) = covariance_from_information(&info);
    let (degenerate_flags, mut warnings) = flags(&best.theta);
    if near_singular {
        warnings.push("near_singular_information".into());
    }
    if !best.converged {
        warnings.push(format!("EM stopped at max_em_iter={} before converging", config.max_em_iter));
    }
    let n_params = layout.dim();
    let mut trace = best.trace;
    trace.start_logliks = start_logliks;
    let mut resolved = config.clone();
    resolved.family = crate::model::FamilyChoice::Fixed(family);
    resolved.k_range = crate::model::KRange::single(k);
    Ok(FittedModel {
        config: resolved,
        family,
        k,
        layout,
        theta_hat: best.theta,
        loglik: best.loglik,
        n_obs: dataset.len(),
        confounder_means: dataset.confounder_means(),
        n_iter: best.n_iter,
        converged: best.converged,
        info_matrix: info,
        vcov,
        n_params,
        bic: bic(best.loglik, n_params, dataset.len()),
        aic: aic(best.loglik, n_params),
        degenerate_flags,
        warnings,
        trace,
    })
}
