use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::extract::{check_symmetric, extract_paf, extract_pca, ComponentRule, PafOptions};
use super::project::{primary_assignments, DEFAULT_THRESHOLD};
use super::rotate::{promax, DEFAULT_KAPPA};
use super::FactorError;
use crate::simmat::SimilarityMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Extraction {
    Pca,
    Paf,
}

impl std::str::FromStr for Extraction {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "pca" => Ok(Extraction::Pca),
            "paf" => Ok(Extraction::Paf),
            _ => Err(format!("unknown extraction `{s}` (expected pca or paf)")),
        }
    }
}

/// Name, definition and examples for one dimension. `index` is 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimensionMeta {
    pub index: usize,
    pub name: String,
    pub definition: String,
    pub example_indicators: Vec<String>,
    pub indicator_count: usize,
}

impl DimensionMeta {
    pub fn placeholder(index: usize) -> Self {
        Self { index, name: format!("Dim {index}"), definition: String::new(), example_indicators: Vec::new(), indicator_count: 0 }
    }
}

/// Diagnostics carried along with a fitted model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelFlags {
    #[serde(default)]
    pub heywood: bool,
    #[serde(default)]
    pub non_converged: bool,
    #[serde(default)]
    pub degenerate: bool,
    #[serde(default)]
    pub singular_rotation: bool,
}

/// A fitted network: pattern loadings Λ (p×k), component correlations Φ
/// (k×k) and per-dimension metadata. Column j is "Dim j+1".
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    pub lambda: DMatrix<f64>,
    pub phi: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    pub threshold: f64,
    pub indicator_ids: Vec<String>,
    pub dimensions: Vec<DimensionMeta>,
    pub extraction: Extraction,
    pub flags: ModelFlags,
}

impl NetworkModel {
    pub fn p(&self) -> usize {
        self.lambda.nrows()
    }

    pub fn k(&self) -> usize {
        self.lambda.ncols()
    }

    /// Checks shapes, Φ (symmetric, unit diagonal, positive definite),
    /// eigenvalue order and dimension metadata.
    pub fn validate(&self) -> Result<(), FactorError> {
        let bad = |m: &str| Err(FactorError::InvalidModel(m.to_string()));
        let (p, k) = self.lambda.shape();
        if k == 0 || p == 0 {
            return bad("empty loading matrix");
        }
        if self.phi.shape() != (k, k) {
            return bad("phi shape does not match lambda");
        }
        if self.indicator_ids.len() != p {
            return bad("indicator id count does not match lambda rows");
        }
        if self.eigenvalues.len() != k || self.dimensions.len() != k {
            return bad("eigenvalue or dimension count does not match lambda columns");
        }
        if self.eigenvalues.windows(2).any(|w| w[0] < w[1]) {
            return bad("eigenvalues are not in descending order");
        }
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(FactorError::InvalidThreshold(self.threshold));
        }
        for i in 0..k {
            if (self.phi[(i, i)] - 1.0).abs() > 1e-12 {
                return bad("phi diagonal is not 1");
            }
            for j in 0..k {
                if (self.phi[(i, j)] - self.phi[(j, i)]).abs() > 1e-12 {
                    return bad("phi is not symmetric");
                }
            }
        }
        let min_eig = self.phi.clone().symmetric_eigenvalues().min();
        if min_eig <= 1e-10 {
            return Err(FactorError::PhiNotPositiveDefinite);
        }
        for (j, d) in self.dimensions.iter().enumerate() {
            if d.index != j + 1 {
                return bad("dimension indices must run 1..k");
            }
        }
        let mut names: Vec<&str> = self.dimensions.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("dimension names are not unique");
        }
        Ok(())
    }

    /// Refreshes `indicator_count` from the primary assignments.
    pub fn refresh_counts(&mut self) {
        let primary = primary_assignments(&self.lambda, self.threshold);
        for d in self.dimensions.iter_mut() {
            d.indicator_count = primary.iter().filter(|a| a.map(|(j, _)| j + 1) == Some(d.index)).count();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub extraction: Extraction,
    pub components: ComponentRule,
    pub kappa: f64,
    pub threshold: f64,
    pub paf: PafOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            extraction: Extraction::Pca,
            components: ComponentRule::Kaiser,
            kappa: DEFAULT_KAPPA,
            threshold: DEFAULT_THRESHOLD,
            paf: PafOptions::default(),
        }
    }
}

/// Extracts, Promax-rotates and canonicalizes a network from a similarity
/// matrix. Rotated columns are ordered by descending sum of squared pattern
/// loadings (ties keep extraction order) and each column's largest-magnitude
/// loading is made positive; Φ is permuted and sign-flipped to match.
pub fn fit_network(s: &SimilarityMatrix, options: FitOptions) -> Result<NetworkModel, FactorError> {
    if !(options.threshold > 0.0 && options.threshold.is_finite()) {
        return Err(FactorError::InvalidThreshold(options.threshold));
    }
    check_symmetric(s.values())?;
    let mut flags = ModelFlags::default();
    let extracted = match options.extraction {
        Extraction::Pca => extract_pca(s.values(), options.components)?,
        Extraction::Paf => {
            let r = extract_paf(s.values(), options.components, options.paf)?;
            flags.heywood = r.heywood;
            flags.non_converged = !r.converged;
            flags.degenerate = r.degenerate;
            r.extracted
        }
    };
    let rotated = promax(&extracted.loadings, options.kappa);
    flags.singular_rotation = rotated.singular_fallback;
    let (lambda, phi) = canonicalize(&rotated.pattern, &rotated.phi);
    let k = lambda.ncols();
    let mut model = NetworkModel {
        lambda,
        phi,
        eigenvalues: extracted.eigenvalues,
        threshold: options.threshold,
        indicator_ids: s.indicator_ids().to_vec(),
        dimensions: (1..=k).map(DimensionMeta::placeholder).collect(),
        extraction: options.extraction,
        flags,
    };
    model.refresh_counts();
    Ok(model)
}

pub(crate) fn canonicalize(pattern: &DMatrix<f64>, phi: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let k = pattern.ncols();
    let ss: Vec<f64> = pattern.column_iter().map(|c| c.norm_squared()).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| ss[b].total_cmp(&ss[a]));
    let signs: Vec<f64> = order
        .iter()
        .map(|&j| {
            let col = pattern.column(j);
            let top = col.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if top < 0.0 {
                -1.0
            } else {
                1.0
            }
        })
        .collect();
    let lambda = DMatrix::from_fn(pattern.nrows(), k, |i, j| pattern[(i, order[j])] * signs[j]);
    let phi = DMatrix::from_fn(k, k, |a, b| phi[(order[a], order[b])] * signs[a] * signs[b]);
    (lambda, phi)
}
