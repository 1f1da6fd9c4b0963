//! Model selection over mixture order and mediator family by BIC.

use serde::{Deserialize, Serialize};

use crate::em::fit;
use crate::error::{Error, Result};
use crate::exec::map_range;
use crate::model::{Dataset, FamilyChoice, FittedModel, MediatorFamily, ModelConfig};

/// Candidate (family, K) pairs for `dataset`. Under `Auto`, count families
/// are dropped when any observed mediator is fractional.
pub fn candidate_grid(config: &ModelConfig, dataset: &Dataset) -> Result<Vec<(MediatorFamily, usize)>> {
    config.validate()?;
    let integer = dataset.is_integer_valued();
    let families: Vec<MediatorFamily> = match config.family {
        FamilyChoice::Auto => MediatorFamily::ALL
            .into_iter()
            .filter(|f| integer || !f.is_count())
            .filter(|f| config.validate_for(*f).is_ok())
            .collect(),
        FamilyChoice::Fixed(f) => {
            dataset.check_family(f)?;
            vec![f]
        }
    };
    let grid: Vec<_> = families
        .into_iter()
        .flat_map(|f| config.k_range.iter().map(move |k| (f, k)))
        .collect();
    if grid.is_empty() {
        return Err(Error::InvalidConfig("empty candidate grid".into()));
    }
    Ok(grid)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub family: MediatorFamily,
    pub k: usize,
    pub loglik: Option<f64>,
    pub n_params: Option<usize>,
    pub bic: Option<f64>,
    pub aic: Option<f64>,
    pub converged: bool,
    pub degenerate: bool,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Selection {
    pub best: FittedModel,
    pub table: Vec<SelectionRow>,
}

impl Selection {
    pub fn best_row(&self) -> &SelectionRow {
        self.table
            .iter()
            .find(|r| r.family == self.best.family && r.k == self.best.k)
            .expect("best model appears in the table")
    }
}

fn family_rank(f: MediatorFamily) -> usize {
    MediatorFamily::ALL.iter().position(|g| *g == f).unwrap_or(usize::MAX)
}

/// Fits every candidate and keeps the lowest-BIC converged, non-degenerate
/// fit (ties: smaller K, then ZILoNM < ZIPM < ZINBM).
pub fn select(dataset: &Dataset, config: &ModelConfig) -> Result<Selection> {
    let grid = candidate_grid(config, dataset)?;
    let fits: Vec<Result<FittedModel>> = map_range(config.execution, grid.len(), |i| {
        let (family, k) = grid[i];
        let cfg = ModelConfig {
            seed: config.seed ^ i as u64,
            ..config.clone()
        };
        fit(dataset, family, k, &cfg)
    });
    let table: Vec<SelectionRow> = grid
        .iter()
        .zip(&fits)
        .map(|(&(family, k), r)| match r {
            Ok(m) => SelectionRow {
                family,
                k,
                loglik: Some(m.loglik),
                n_params: Some(m.n_params),
                bic: Some(m.bic),
                aic: Some(m.aic),
                converged: m.converged,
                degenerate: m.is_degenerate(),
                error: None,
            },
            Err(e) => SelectionRow {
                family,
                k,
                loglik: None,
                n_params: None,
                bic: None,
                aic: None,
                converged: false,
                degenerate: false,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let best = fits
        .into_iter()
        .filter_map(|r| r.ok())
        .filter(|m| m.converged && !m.is_degenerate() && m.bic.is_finite())
        .min_by(|a, b| {
            a.bic
                .total_cmp(&b.bic)
                .then(a.k.cmp(&b.k))
                .then(family_rank(a.family).cmp(&family_rank(b.family)))
        })
        .ok_or(Error::NoCandidate)?;
    Ok(Selection { best, table })
}
