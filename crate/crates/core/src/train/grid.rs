use std::fmt::Write as _;

use numcore::Real;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::CopyLossConfig;
use crate::error::{Error, Result};

/// Candidate values for the hinge weight and threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub lambdas: Vec<Real>,
    pub thresholds: Vec<Real>,
}

/// `lo, lo + 0.05, ..., hi` computed in hundredths to avoid drift.
fn steps(lo_hundredths: u32, hi_hundredths: u32) -> Vec<Real> {
    (lo_hundredths..=hi_hundredths).step_by(5).map(|h| h as Real / 100.0).collect()
}

impl Default for GridSpec {
    /// λ over [0.1, 1] and T over [0.5, 1], both in steps of 0.05.
    fn default() -> Self {
        GridSpec { lambdas: steps(10, 100), thresholds: steps(50, 100) }
    }
}

impl GridSpec {
    pub fn cells(&self) -> Vec<CopyLossConfig> {
        self.lambdas
            .iter()
            .flat_map(|&lambda| {
                self.thresholds.iter().map(move |&threshold| CopyLossConfig {
                    lambda,
                    threshold,
                    hinge_on_alpha_only: false,
                })
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub lambda: Real,
    pub threshold: Real,
    pub valid_em: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridReport {
    pub cells: Vec<GridCell>,
    pub best: GridCell,
}

impl GridReport {
    /// `lambda,T,valid_em` with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lambda,T,valid_em\n");
        for c in &self.cells {
            let _ = writeln!(s, "{},{},{}", c.lambda, c.threshold, c.valid_em);
        }
        s
    }
}

/// Scores every cell with `eval` (typically: train at that setting, return
/// validation EM). Cells run in parallel; the best cell has the highest EM,
/// ties going to the smaller λ, then the smaller T.
pub fn grid_search<F>(spec: &GridSpec, eval: F) -> Result<GridReport>
where
    F: Fn(&CopyLossConfig) -> Result<f64> + Sync,
{
    let mut configs = spec.cells();
    if configs.is_empty() {
        return Err(Error::Empty("grid"));
    }
    configs.sort_by(|a, b| a.lambda.total_cmp(&b.lambda).then(a.threshold.total_cmp(&b.threshold)));
    let scores: Vec<Result<f64>> = configs.par_iter().map(&eval).collect();
    let mut cells = Vec::with_capacity(configs.len());
    for (c, s) in configs.iter().zip(scores) {
        cells.push(GridCell { lambda: c.lambda, threshold: c.threshold, valid_em: s? });
    }
    let mut best = cells[0];
    for c in &cells[1..] {
        if c.valid_em > best.valid_em {
            best = *c;
        }
    }
    Ok(GridReport { cells, best })
}
