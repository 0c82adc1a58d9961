//! Cosine similarity and dense similarity matrices.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::embed::EmbeddingVector;

/// Dense storage ceiling. Larger corpora need an out-of-core path this crate
/// does not provide.
pub const MAX_DENSE_SIZE: usize = 50_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimilarityError {
    #[error("zero vector at index {0}")]
    ZeroVector(usize),
    #[error("dimension mismatch at index {index}: expected {expected}, found {found}")]
    DimensionMismatch { index: usize, expected: usize, found: usize },
    #[error("need at least {needed} vectors, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("{0} indicators exceeds the dense ceiling of {MAX_DENSE_SIZE}")]
    TooLarge(usize),
    #[error("block size must be positive")]
    ZeroBlock,
    #[error("{ids} ids for a {size}x{size} matrix")]
    IdMismatch { ids: usize, size: usize },
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).fold(0.0, |acc, (a, b)| acc + a * b)
}

/// ⟨u,v⟩ / (‖u‖‖v‖).
pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, SimilarityError> {
    if u.dim() != v.dim() {
        return Err(SimilarityError::DimensionMismatch { index: 1, expected: u.dim(), found: v.dim() });
    }
    if u.norm() == 0.0 {
        return Err(SimilarityError::ZeroVector(0));
    }
    if v.norm() == 0.0 {
        return Err(SimilarityError::ZeroVector(1));
    }
    Ok(cosine_unchecked(u, v))
}

#[inline]
fn cosine_unchecked(u: &EmbeddingVector, v: &EmbeddingVector) -> f64 {
    dot(u.values(), v.values()) / (u.norm() * v.norm())
}

/// Symmetric p×p cosine matrix with row labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    values: DMatrix<f64>,
    indicator_ids: Vec<String>,
}

impl SimilarityMatrix {
    pub fn from_parts(values: DMatrix<f64>, indicator_ids: Vec<String>) -> Result<Self, SimilarityError> {
        if values.nrows() != values.ncols() || indicator_ids.len() != values.nrows() {
            return Err(SimilarityError::IdMismatch { ids: indicator_ids.len(), size: values.nrows() });
        }
        Ok(Self { values, indicator_ids })
    }

    /// Unlabeled matrix; rows get ids `"0"`, `"1"`, ...
    pub fn from_matrix(values: DMatrix<f64>) -> Self {
        let ids = (0..values.nrows()).map(|i| i.to_string()).collect();
        Self { values, indicator_ids: ids }
    }

    pub fn size(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn indicator_ids(&self) -> &[String] {
        &self.indicator_ids
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.values.row(i).iter().copied().collect()
    }

    /// CSV with indicator ids as the header and row labels, 6 decimals.
    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["id".to_string()];
        header.extend(self.indicator_ids.iter().cloned());
        wtr.write_record(&header)?;
        for (i, id) in self.indicator_ids.iter().enumerate() {
            let mut rec = vec![id.clone()];
            rec.extend(self.values.row(i).iter().map(|v| format!("{v:.6}")));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Cosine similarities between `rows` and `columns`, one output row per entry
/// of `rows`. Summation order within a row is fixed, so results do not depend
/// on scheduling.
pub fn cross_similarity(rows: &[EmbeddingVector], columns: &[EmbeddingVector]) -> Result<DMatrix<f64>, SimilarityError> {
    let all = rows.iter().chain(columns);
    let dim = rows.first().or(columns.first()).map_or(0, EmbeddingVector::dim);
    for (index, v) in all.enumerate() {
        if v.dim() != dim {
            return Err(SimilarityError::DimensionMismatch { index, expected: dim, found: v.dim() });
        }
        if v.norm() == 0.0 {
            return Err(SimilarityError::ZeroVector(index));
        }
    }
    let data: Vec<f64> = rows.par_iter().flat_map_iter(|r| columns.iter().map(move |c| cosine_unchecked(r, c))).collect();
    Ok(DMatrix::from_row_slice(rows.len(), columns.len(), &data))
}

/// Full similarity matrix, computed in parallel row blocks of `block` rows.
pub fn similarity_matrix(vectors: &[EmbeddingVector], ids: Option<Vec<String>>, block: usize) -> Result<SimilarityMatrix, SimilarityError> {
    let p = vectors.len();
    if p < 2 {
        return Err(SimilarityError::TooFew { needed: 2, got: p });
    }
    if p > MAX_DENSE_SIZE {
        return Err(SimilarityError::TooLarge(p));
    }
    if block == 0 {
        return Err(SimilarityError::ZeroBlock);
    }
    let dim = vectors[0].dim();
    for (index, v) in vectors.iter().enumerate() {
        if v.dim() != dim {
            return Err(SimilarityError::DimensionMismatch { index, expected: dim, found: v.dim() });
        }
        if v.norm() == 0.0 {
            return Err(SimilarityError::ZeroVector(index));
        }
    }
    let mut data = vec![0.0; p * p];
    data.par_chunks_mut(block * p).enumerate().for_each(|(b, out)| {
        for (offset, row) in out.chunks_mut(p).enumerate() {
            let u = &vectors[b * block + offset];
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = cosine_unchecked(u, &vectors[j]);
            }
        }
    });
    let ids = ids.unwrap_or_else(|| (0..p).map(|i| i.to_string()).collect());
    SimilarityMatrix::from_parts(DMatrix::from_row_slice(p, p, &data), ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ev(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&ev(&[1.0, 0.0]), &ev(&[1.0, 0.0])).unwrap(), 1.0);
        assert_eq!(cosine(&ev(&[1.0, 0.0]), &ev(&[0.0, 1.0])).unwrap(), 0.0);
        let c = cosine(&ev(&[1.0, 1.0]), &ev(&[1.0, 0.0])).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(cosine(&ev(&[0.0, 0.0]), &ev(&[1.0, 0.0])), Err(SimilarityError::ZeroVector(0)));
    }

    #[test]
    fn orthogonal_gives_identity() {
        let vs = vec![ev(&[1.0, 0.0, 0.0]), ev(&[0.0, 1.0, 0.0]), ev(&[0.0, 0.0, 1.0])];
        let s = similarity_matrix(&vs, None, 2).unwrap();
        assert_eq!(s.values(), &DMatrix::identity(3, 3));
    }

    #[test]
    fn two_vector_example() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let s = similarity_matrix(&[ev(&[1.0, 0.0]), ev(&[h, h])], None, 1).unwrap();
        assert!((s.values()[(0, 1)] - h).abs() < 1e-12);
        assert_eq!(s.values()[(0, 1)], s.values()[(1, 0)]);
    }

    fn random_vectors(seed: u64, n: usize, d: usize) -> Vec<EmbeddingVector> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| EmbeddingVector::normalized((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()).collect()
    }

    #[test]
    fn block_size_does_not_change_bits() {
        let vs = random_vectors(7, 10, 16);
        let a = similarity_matrix(&vs, None, 1).unwrap();
        let b = similarity_matrix(&vs, None, 64).unwrap();
        let c = similarity_matrix(&vs, None, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn invariants_hold() {
        let vs = random_vectors(11, 25, 8);
        let s = similarity_matrix(&vs, None, 4).unwrap();
        let m = s.values();
        for i in 0..25 {
            assert!((m[(i, i)] - 1.0).abs() < 1e-12);
            for j in 0..25 {
                assert_eq!(m[(i, j)], m[(j, i)]);
                assert!(m[(i, j)].abs() <= 1.0 + 1e-12);
            }
        }
        let min_eig = m.clone().symmetric_eigenvalues().min();
        assert!(min_eig >= -1e-8 * 25.0);
    }

    #[test]
    fn permutation_conjugates() {
        let vs = random_vectors(3, 8, 5);
        let perm = [3usize, 0, 7, 1, 6, 2, 5, 4];
        let permuted: Vec<_> = perm.iter().map(|&i| vs[i].clone()).collect();
        let s = similarity_matrix(&vs, None, 2).unwrap();
        let t = similarity_matrix(&permuted, None, 5).unwrap();
        for a in 0..8 {
            for b in 0..8 {
                assert_eq!(t.values()[(a, b)], s.values()[(perm[a], perm[b])]);
            }
        }
    }

    #[test]
    fn errors() {
        assert!(matches!(similarity_matrix(&[ev(&[1.0])], None, 1), Err(SimilarityError::TooFew { .. })));
        let bad = [ev(&[1.0, 0.0]), ev(&[1.0])];
        assert!(matches!(similarity_matrix(&bad, None, 1), Err(SimilarityError::DimensionMismatch { index: 1, .. })));
        let zero = [ev(&[1.0, 0.0]), ev(&[0.0, 0.0])];
        assert_eq!(similarity_matrix(&zero, None, 1), Err(SimilarityError::ZeroVector(1)));
    }

    #[test]
    fn csv_export() {
        let s = similarity_matrix(&[ev(&[1.0, 0.0]), ev(&[1.0, 1.0])], Some(vec!["a".into(), "b".into()]), 1).unwrap();
        let mut out = Vec::new();
        s.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "id,a,b\na,1.000000,0.707107\nb,0.707107,1.000000\n");
    }
}
