use nalgebra::DMatrix;

use super::FactorError;

pub const DEFAULT_KAPPA: f64 = 4.0;

const VARIMAX_TOL: f64 = 1e-8;
const VARIMAX_MAX_SWEEPS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct VarimaxResult {
    pub loadings: DMatrix<f64>,
    /// Orthogonal k×k rotation with `loadings = input · rotation`.
    pub rotation: DMatrix<f64>,
    /// Criterion before the first sweep and after each sweep.
    pub criterion_history: Vec<f64>,
}

fn row_norms(l: &DMatrix<f64>) -> Vec<f64> {
    l.row_iter().map(|r| r.norm()).collect()
}

fn kaiser_normalize(l: &DMatrix<f64>) -> DMatrix<f64> {
    let norms = row_norms(l);
    let mut out = l.clone();
    for (i, h) in norms.iter().enumerate() {
        if *h > 0.0 {
            out.row_mut(i).scale_mut(1.0 / h);
        }
    }
    out
}

fn raw_criterion(l: &DMatrix<f64>) -> f64 {
    let p = l.nrows() as f64;
    l.column_iter()
        .map(|col| {
            let sq: f64 = col.iter().map(|x| x * x).sum();
            let quad: f64 = col.iter().map(|x| x.powi(4)).sum();
            quad / p - (sq / p).powi(2)
        })
        .sum()
}

/// Varimax criterion of the row-normalized loadings: the sum over columns of
/// the variance of squared loadings.
pub fn varimax_criterion(loadings: &DMatrix<f64>) -> f64 {
    raw_criterion(&kaiser_normalize(loadings))
}

/// Optimal planar rotation angle for columns `a` and `b`.
fn pair_angle(l: &DMatrix<f64>, a: usize, b: usize) -> f64 {
    let p = l.nrows() as f64;
    let (mut sa, mut sb, mut sc, mut sd) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..l.nrows() {
        let x = l[(i, a)];
        let y = l[(i, b)];
        let u = x * x - y * y;
        let v = 2.0 * x * y;
        sa += u;
        sb += v;
        sc += u * u - v * v;
        sd += 2.0 * u * v;
    }
    let num = sd - 2.0 * sa * sb / p;
    let den = sc - (sa * sa - sb * sb) / p;
    num.atan2(den) / 4.0
}

fn rotate_pair(m: &mut DMatrix<f64>, a: usize, b: usize, angle: f64) {
    let (s, c) = angle.sin_cos();
    for i in 0..m.nrows() {
        let x = m[(i, a)];
        let y = m[(i, b)];
        m[(i, a)] = c * x + s * y;
        m[(i, b)] = -s * x + c * y;
    }
}

/// Kaiser-normalized varimax by successive planar rotations.
///
/// Every pair of columns is rotated by its criterion-maximizing angle; a
/// rotation is only applied when it does not lower the criterion, so the
/// criterion is non-decreasing. Sweeps stop once a sweep improves the
/// criterion by less than 1e-8.
pub fn varimax(loadings: &DMatrix<f64>) -> VarimaxResult {
    let k = loadings.ncols();
    let mut rotation = DMatrix::identity(k, k);
    let mut normalized = kaiser_normalize(loadings);
    let mut criterion = raw_criterion(&normalized);
    let mut history = vec![criterion];
    if k < 2 {
        return VarimaxResult { loadings: loadings.clone(), rotation, criterion_history: history };
    }
    for _ in 0..VARIMAX_MAX_SWEEPS {
        let before = criterion;
        for a in 0..k - 1 {
            for b in (a + 1)..k {
                let angle = pair_angle(&normalized, a, b);
                if angle.abs() < 1e-15 {
                    continue;
                }
                let mut trial = normalized.clone();
                rotate_pair(&mut trial, a, b, angle);
                let value = raw_criterion(&trial);
                if value >= criterion {
                    normalized = trial;
                    criterion = value;
                    rotate_pair(&mut rotation, a, b, angle);
                }
            }
        }
        history.push(criterion);
        if criterion - before < VARIMAX_TOL {
            break;
        }
    }
    VarimaxResult { loadings: loadings * &rotation, rotation, criterion_history: history }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromaxResult {
    /// Pattern loadings Λ_p (p×k).
    pub pattern: DMatrix<f64>,
    /// Component correlations Φ (k×k), unit diagonal.
    pub phi: DMatrix<f64>,
    /// Total transformation T with `pattern = input · T`.
    pub transform: DMatrix<f64>,
    /// The oblique step failed and the varimax solution was returned instead.
    pub singular_fallback: bool,
}

const SINGULAR_COND: f64 = 1e12;

fn checked_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>, FactorError> {
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min.is_nan() || min <= 0.0 || max / min > SINGULAR_COND || !max.is_finite() {
        return Err(FactorError::SingularRotation);
    }
    m.clone().try_inverse().ok_or(FactorError::SingularRotation)
}

fn oblique_step(varimax_loadings: &DMatrix<f64>, kappa: f64) -> Result<DMatrix<f64>, FactorError> {
    let target = kaiser_normalize(varimax_loadings).map(|x| x.signum() * x.abs().powf(kappa));
    let cross = varimax_loadings.transpose() * varimax_loadings;
    // least-squares fit of varimax_loadings · U ≈ target
    let mut u = checked_inverse(&cross)? * varimax_loadings.transpose() * target;
    let d = checked_inverse(&(u.transpose() * &u))?.diagonal();
    for (j, mut col) in u.column_iter_mut().enumerate() {
        col *= d[j].sqrt();
    }
    checked_inverse(&u)?;
    Ok(u)
}

/// Promax rotation: varimax, then a least-squares fit to the sign-preserving
/// `kappa` power of the row-normalized varimax loadings.
///
/// The fitted transformation U is rescaled so that Φ = (UᵀU)⁻¹ has a unit
/// diagonal, and Λ_p = Λ_v U, which keeps Λ_p Φ Λ_pᵀ = Λ₀Λ₀ᵀ. When the fit is
/// singular the varimax solution is returned with Φ = I and the fallback flag
/// set. Column order and sign are left as produced; see [`super::fit_network`]
/// for the canonical ordering.
pub fn promax(loadings: &DMatrix<f64>, kappa: f64) -> PromaxResult {
    let k = loadings.ncols();
    if k < 2 {
        return PromaxResult {
            pattern: loadings.clone(),
            phi: DMatrix::identity(k, k),
            transform: DMatrix::identity(k, k),
            singular_fallback: false,
        };
    }
    let vm = varimax(loadings);
    match oblique_step(&vm.loadings, kappa) {
        Ok(u) => {
            let u_inv = u.clone().try_inverse().expect("checked in oblique_step");
            let mut phi = &u_inv * u_inv.transpose();
            // exact symmetry and unit diagonal
            phi = (&phi + phi.transpose()) * 0.5;
            for j in 0..k {
                phi[(j, j)] = 1.0;
            }
            PromaxResult { pattern: &vm.loadings * &u, phi, transform: &vm.rotation * &u, singular_fallback: false }
        }
        Err(_) => PromaxResult { pattern: vm.loadings, phi: DMatrix::identity(k, k), transform: vm.rotation, singular_fallback: true },
    }
}
