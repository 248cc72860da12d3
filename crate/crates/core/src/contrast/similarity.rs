use crate::error::{BelxError, Result};
use crate::matrix::Matrix;
use crate::scalar::{dot_f64, norm_f64, Scalar};

use super::UNIT_TOLERANCE;

/// Symmetric N×N cosine similarities of unit rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix<T> {
    values: Matrix<T>,
}

impl<T: Scalar> SimilarityMatrix<T> {
    pub fn n(&self) -> usize {
        self.values.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.values.get(i, j)
    }

    pub fn as_matrix(&self) -> &Matrix<T> {
        &self.values
    }
}

pub(crate) fn check_unit_rows<T: Scalar>(e: &Matrix<T>) -> Result<()> {
    for (i, row) in e.iter_rows().enumerate() {
        let n = norm_f64(row);
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(BelxError::InvalidInput(format!(
                "row {i} has norm {n}, expected a unit vector"
            )));
        }
    }
    Ok(())
}

/// `S = E·Eᵀ` for unit-normalized rows; the upper triangle is mirrored so the
/// result is exactly symmetric.
pub fn pairwise_cosine<T: Scalar>(embeddings: &Matrix<T>) -> Result<SimilarityMatrix<T>> {
    check_unit_rows(embeddings)?;
    let n = embeddings.rows();
    let mut s = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = T::of(dot_f64(embeddings.row(i), embeddings.row(j)));
            s.set(i, j, v);
            s.set(j, i, v);
        }
    }
    Ok(SimilarityMatrix { values: s })
}
