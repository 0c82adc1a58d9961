use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::model::NetworkModel;
use super::FactorError;

pub const DEFAULT_THRESHOLD: f64 = 0.55;

/// Condition-number ceiling for ΛᵀΛ in projection.
pub const MAX_CONDITION: f64 = 1e12;

/// One surviving loading. `dimension` is the 0-based column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub indicator: usize,
    pub dimension: usize,
    pub loading: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ThresholdResult {
    /// Row-major order: by indicator, then dimension.
    pub assignments: Vec<Assignment>,
    /// Indicators without any |loading| ≥ threshold.
    pub unassigned: Vec<usize>,
}

fn check_threshold(threshold: f64) -> Result<(), FactorError> {
    if threshold > 0.0 && threshold.is_finite() {
        Ok(())
    } else {
        Err(FactorError::InvalidThreshold(threshold))
    }
}

/// Keeps exactly the entries with |loading| ≥ threshold, sign preserved.
pub fn threshold_loadings(loadings: &DMatrix<f64>, threshold: f64) -> Result<ThresholdResult, FactorError> {
    check_threshold(threshold)?;
    let mut out = ThresholdResult::default();
    for i in 0..loadings.nrows() {
        let before = out.assignments.len();
        for j in 0..loadings.ncols() {
            let loading = loadings[(i, j)];
            if loading.abs() >= threshold {
                out.assignments.push(Assignment { indicator: i, dimension: j, loading });
            }
        }
        if out.assignments.len() == before {
            out.unassigned.push(i);
        }
    }
    Ok(out)
}

/// For each row, the column with the largest |loading| among those at or above
/// the threshold (lowest column on ties), with that loading.
pub fn primary_assignments(loadings: &DMatrix<f64>, threshold: f64) -> Vec<Option<(usize, f64)>> {
    loadings
        .row_iter()
        .map(|row| {
            let mut best: Option<(usize, f64)> = None;
            for (j, &x) in row.iter().enumerate() {
                if x.abs() >= threshold && best.is_none_or(|(_, b)| x.abs() > b.abs()) {
                    best = Some((j, x));
                }
            }
            best
        })
        .collect()
}

/// Precomputed projection operator Λ(ΛᵀΛ)⁻¹Φ⁻¹ (p×k).
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    operator: DMatrix<f64>,
}

impl Projector {
    pub fn new(model: &NetworkModel) -> Result<Self, FactorError> {
        let lambda = &model.lambda;
        let gram = lambda.transpose() * lambda;
        let eig = gram.clone().symmetric_eigenvalues();
        let (min, max) = (eig.min(), eig.max());
        if min.is_nan() || min <= 0.0 || max / min > MAX_CONDITION {
            let cond = if min > 0.0 { max / min } else { f64::INFINITY };
            return Err(FactorError::IllConditioned(cond));
        }
        let gram_inv = gram.cholesky().ok_or(FactorError::IllConditioned(f64::INFINITY))?.inverse();
        let phi_inv = model.phi.clone().cholesky().ok_or(FactorError::PhiNotPositiveDefinite)?.inverse();
        Ok(Self { operator: lambda * gram_inv * phi_inv })
    }

    pub fn operator(&self) -> &DMatrix<f64> {
        &self.operator
    }

    /// Projects similarity rows (n×p) to loadings (n×k).
    pub fn apply(&self, similarities: &DMatrix<f64>) -> Result<DMatrix<f64>, FactorError> {
        if similarities.ncols() != self.operator.nrows() {
            return Err(FactorError::LengthMismatch { expected: self.operator.nrows(), found: similarities.ncols() });
        }
        Ok(similarities * &self.operator)
    }
}

/// λ_new = C_new Λ(ΛᵀΛ)⁻¹Φ⁻¹ for each row of `similarities`, reading the
/// inverse of Λᵀ as its Moore–Penrose right pseudoinverse.
pub fn project(similarities: &DMatrix<f64>, model: &NetworkModel) -> Result<DMatrix<f64>, FactorError> {
    Projector::new(model)?.apply(similarities)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainedVariance {
    /// Percent of total variance per dimension.
    pub per_dimension: Vec<f64>,
    pub cumulative: Vec<f64>,
}

/// eigenvalue_j / p, in percent, with running totals.
pub fn explained_variance(model: &NetworkModel) -> ExplainedVariance {
    let p = model.p() as f64;
    let per_dimension: Vec<f64> = model.eigenvalues.iter().map(|e| 100.0 * e / p).collect();
    let cumulative = per_dimension
        .iter()
        .scan(0.0, |acc, x| {
            *acc += x;
            Some(*acc)
        })
        .collect();
    ExplainedVariance { per_dimension, cumulative }
}
