use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::FactorError;

/// How many components to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComponentRule {
    /// Eigenvalues strictly greater than 1.
    Kaiser,
    Fixed(usize),
}

impl FromStr for ComponentRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("kaiser") {
            return Ok(ComponentRule::Kaiser);
        }
        match s.parse::<usize>() {
            Ok(0) => Err("component count must be at least 1".into()),
            Ok(k) => Ok(ComponentRule::Fixed(k)),
            Err(_) => Err(format!("expected `kaiser` or a positive integer, got `{s}`")),
        }
    }
}

/// Unrotated loadings (p×k) and the matching eigenvalues, descending.
#[derive(Debug, Clone, PartialEq)]
pub struct Extracted {
    pub loadings: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    /// Every eigenvalue of the decomposed matrix, descending.
    pub all_eigenvalues: Vec<f64>,
}

const SYMMETRY_TOL: f64 = 1e-10;

pub(crate) fn check_symmetric(s: &DMatrix<f64>) -> Result<(), FactorError> {
    if !s.is_square() || s.nrows() == 0 {
        return Err(FactorError::NotSymmetric);
    }
    let scale = s.amax().max(1.0);
    for i in 0..s.nrows() {
        for j in (i + 1)..s.ncols() {
            if (s[(i, j)] - s[(j, i)]).abs() > SYMMETRY_TOL * scale || !s[(i, j)].is_finite() {
                return Err(FactorError::NotSymmetric);
            }
        }
    }
    Ok(())
}

/// Eigen-decomposition with eigenvalues sorted descending (stable, so ties
/// keep solver order) and each eigenvector's largest-magnitude entry positive.
pub fn sorted_eigen(s: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let sym = (s + s.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(s.nrows(), order.len());
    for (col, &i) in order.iter().enumerate() {
        let mut v: DVector<f64> = eig.eigenvectors.column(i).into_owned();
        orient(&mut v);
        vectors.set_column(col, &v);
    }
    (values, vectors)
}

/// Flips `v` so that its first entry of largest magnitude is positive.
pub(crate) fn orient(v: &mut DVector<f64>) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if !v.is_empty() && v[best] < 0.0 {
        v.neg_mut();
    }
}

fn positive_count(values: &[f64]) -> usize {
    let tol = 1e-10 * values.first().copied().unwrap_or(0.0).abs().max(1.0);
    values.iter().filter(|&&v| v > tol).count()
}

fn resolve_k(rule: ComponentRule, values: &[f64]) -> Result<usize, FactorError> {
    match rule {
        ComponentRule::Kaiser => match values.iter().filter(|&&v| v > 1.0).count() {
            0 => Err(FactorError::EmptyExtraction),
            k => Ok(k),
        },
        ComponentRule::Fixed(0) => Err(FactorError::ZeroComponents),
        ComponentRule::Fixed(k) => Ok(k),
    }
}

fn scaled_loadings(vectors: &DMatrix<f64>, values: &[f64], k: usize) -> DMatrix<f64> {
    let mut loadings = vectors.columns(0, k).into_owned();
    for (j, mut col) in loadings.column_iter_mut().enumerate() {
        col *= values[j].max(0.0).sqrt();
    }
    loadings
}

/// PCA of a similarity matrix: column j of the loadings is the j-th
/// eigenvector scaled by the square root of its eigenvalue.
pub fn extract_pca(s: &DMatrix<f64>, rule: ComponentRule) -> Result<Extracted, FactorError> {
    check_symmetric(s)?;
    let (values, vectors) = sorted_eigen(s);
    let k = resolve_k(rule, &values)?;
    let available = positive_count(&values);
    if k > available {
        return Err(FactorError::InsufficientRank { requested: k, available });
    }
    Ok(Extracted { loadings: scaled_loadings(&vectors, &values, k), eigenvalues: values[..k].to_vec(), all_eigenvalues: values })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PafOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for PafOptions {
    fn default() -> Self {
        Self { max_iter: 100, tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PafResult {
    pub extracted: Extracted,
    pub communalities: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Some communality exceeded 1 and was clamped.
    pub heywood: bool,
    /// Every loading is zero.
    pub degenerate: bool,
}

/// Starting communalities: largest absolute off-diagonal entry of each row.
pub(crate) fn initial_communalities(s: &DMatrix<f64>) -> Vec<f64> {
    (0..s.nrows()).map(|i| (0..s.ncols()).filter(|&j| j != i).map(|j| s[(i, j)].abs()).fold(0.0, f64::max)).collect()
}

fn reduced(s: &DMatrix<f64>, communalities: &[f64]) -> DMatrix<f64> {
    let mut r = s.clone();
    for (i, h) in communalities.iter().enumerate() {
        r[(i, i)] = *h;
    }
    r
}

/// Principal axis factoring with iterated communalities.
///
/// Each iteration decomposes the reduced matrix (diagonal replaced by the
/// current communalities), keeps k factors and sets the new communalities to
/// the row sums of squared loadings. Communalities above 1 are clamped and
/// flagged. With `max_iter = 0` the loadings come straight from the initial
/// reduced matrix. The Kaiser rule is evaluated on the unreduced matrix.
pub fn extract_paf(s: &DMatrix<f64>, rule: ComponentRule, options: PafOptions) -> Result<PafResult, FactorError> {
    check_symmetric(s)?;
    let k = match rule {
        ComponentRule::Kaiser => resolve_k(rule, &sorted_eigen(s).0)?,
        _ => resolve_k(rule, &[])?,
    };
    if k > s.nrows() {
        return Err(FactorError::InsufficientRank { requested: k, available: s.nrows() });
    }

    let mut communalities = initial_communalities(s);
    let mut heywood = false;
    let mut converged = false;
    let mut iterations = 0;
    let (mut values, vectors) = sorted_eigen(&reduced(s, &communalities));
    let mut loadings = scaled_loadings(&vectors, &values, k);

    while iterations < options.max_iter {
        let mut updated: Vec<f64> = loadings.row_iter().map(|r| r.norm_squared()).collect();
        for h in updated.iter_mut() {
            if *h > 1.0 {
                *h = 1.0;
                heywood = true;
            }
        }
        let change = updated.iter().zip(&communalities).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        communalities = updated;
        iterations += 1;
        let (v, vecs) = sorted_eigen(&reduced(s, &communalities));
        values = v;
        loadings = scaled_loadings(&vecs, &values, k);
        if change < options.tol {
            converged = true;
            break;
        }
    }

    let degenerate = loadings.iter().all(|&x| x == 0.0);
    Ok(PafResult {
        extracted: Extracted { loadings, eigenvalues: values[..k].to_vec(), all_eigenvalues: values },
        communalities,
        iterations,
        converged,
        heywood,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn two_by_two() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 1.0])
    }

    #[test]
    fn pca_two_by_two_closed_form() {
        let e = extract_pca(&two_by_two(), ComponentRule::Fixed(1)).unwrap();
        assert_abs_diff_eq!(e.eigenvalues[0], 1.6, epsilon = 1e-12);
        // eigenvector (1,1)/√2 scaled by √1.6
        let expected = (1.6f64).sqrt() / 2f64.sqrt();
        assert_abs_diff_eq!(e.loadings[(0, 0)], expected, epsilon = 1e-12);
        assert_abs_diff_eq!(e.loadings[(1, 0)], 0.894427, epsilon = 1e-6);
    }

    #[test]
    fn identity_kaiser_is_empty() {
        assert_eq!(extract_pca(&DMatrix::identity(4, 4), ComponentRule::Kaiser), Err(FactorError::EmptyExtraction));
    }

    #[test]
    fn too_many_components() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(extract_pca(&s, ComponentRule::Fixed(2)), Err(FactorError::InsufficientRank { requested: 2, available: 1 }));
    }

    #[test]
    fn full_rank_reconstructs() {
        let s = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.2, 0.5, 1.0, 0.3, 0.2, 0.3, 1.0]);
        let e = extract_pca(&s, ComponentRule::Fixed(3)).unwrap();
        let rebuilt = &e.loadings * e.loadings.transpose();
        assert!((rebuilt - &s).amax() < 1e-8);
        let gram = e.loadings.transpose() * &e.loadings;
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { e.eigenvalues[i] } else { 0.0 };
                assert_abs_diff_eq!(gram[(i, j)], want, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn sign_convention() {
        let s = DMatrix::from_row_slice(3, 3, &[1.0, -0.7, 0.1, -0.7, 1.0, -0.2, 0.1, -0.2, 1.0]);
        let e = extract_pca(&s, ComponentRule::Fixed(2)).unwrap();
        for col in e.loadings.column_iter() {
            let max = col.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(max > 0.0);
        }
    }

    #[test]
    fn rule_parsing() {
        assert_eq!("kaiser".parse::<ComponentRule>(), Ok(ComponentRule::Kaiser));
        assert_eq!("3".parse::<ComponentRule>(), Ok(ComponentRule::Fixed(3)));
        assert!("0".parse::<ComponentRule>().is_err());
        assert!("x".parse::<ComponentRule>().is_err());
    }

    #[test]
    fn paf_two_by_two_fixed_point() {
        let r = extract_paf(&two_by_two(), ComponentRule::Fixed(1), PafOptions::default()).unwrap();
        assert!(r.converged);
        assert!(!r.heywood);
        for i in 0..2 {
            assert_abs_diff_eq!(r.extracted.loadings[(i, 0)], 0.6f64.sqrt(), epsilon = 1e-9);
        }
        assert_abs_diff_eq!(r.extracted.loadings[(0, 0)], 0.7746, epsilon = 1e-4);
    }

    #[test]
    fn paf_identity_is_degenerate() {
        let r = extract_paf(&DMatrix::identity(3, 3), ComponentRule::Fixed(1), PafOptions::default()).unwrap();
        assert!(r.degenerate);
        assert!(r.communalities.iter().all(|&h| h == 0.0));
        assert!(r.extracted.loadings.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn paf_zero_iterations_is_pca_of_reduced() {
        let s = DMatrix::from_row_slice(4, 4, &[1.0, 0.7, 0.6, 0.2, 0.7, 1.0, 0.5, 0.1, 0.6, 0.5, 1.0, 0.3, 0.2, 0.1, 0.3, 1.0]);
        let r = extract_paf(&s, ComponentRule::Fixed(2), PafOptions { max_iter: 0, tol: 1e-6 }).unwrap();
        assert_eq!(r.iterations, 0);
        let reduced = reduced(&s, &initial_communalities(&s));
        let pca = extract_pca(&reduced, ComponentRule::Fixed(2)).unwrap();
        assert_eq!(r.extracted.loadings, pca.loadings);
        assert_eq!(r.extracted.eigenvalues, pca.eigenvalues);
    }

    #[test]
    fn paf_heywood_clamped() {
        // Two nearly collinear items pull communalities above 1 during iteration.
        let s = DMatrix::from_row_slice(3, 3, &[1.0, 0.99, 0.9, 0.99, 1.0, 0.95, 0.9, 0.95, 1.0]);
        let r = extract_paf(&s, ComponentRule::Fixed(2), PafOptions::default()).unwrap();
        assert!(r.communalities.iter().all(|&h| h <= 1.0));
        if r.heywood {
            assert!(r.communalities.contains(&1.0));
        }
    }

    #[test]
    fn paf_non_convergence_flagged() {
        let s = DMatrix::from_row_slice(3, 3, &[1.0, 0.4, 0.3, 0.4, 1.0, 0.5, 0.3, 0.5, 1.0]);
        let r = extract_paf(&s, ComponentRule::Fixed(1), PafOptions { max_iter: 1, tol: 1e-15 }).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 1);
    }
}
