use crate::error::{BelxError, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

use super::similarity::check_unit_rows;

/// Per-anchor in-batch positive and negative index sets, ascending.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IndexSets {
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
}

impl IndexSets {
    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    /// Both sets empty for every anchor.
    pub fn empty(n: usize) -> Self {
        Self {
            positives: vec![Vec::new(); n],
            negatives: vec![Vec::new(); n],
        }
    }

    pub fn pair_count(&self) -> usize {
        self.positives.iter().chain(&self.negatives).map(Vec::len).sum()
    }
}

/// `P_i = {j ≠ i : y_j = y_i}`, `N_i = {j ≠ i : y_j ≠ y_i}`.
pub fn build_index_sets<L: PartialEq>(labels: &[L]) -> Result<IndexSets> {
    let n = labels.len();
    if n < 2 {
        return Err(BelxError::InvalidInput(format!(
            "batch of {n} items; at least 2 required"
        )));
    }
    let mut sets = IndexSets::empty(n);
    for i in 0..n {
        for j in 0..n {
            if j == i {
                continue;
            }
            if labels[j] == labels[i] {
                sets.positives[i].push(j);
            } else {
                sets.negatives[i].push(j);
            }
        }
    }
    Ok(sets)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiningOutcome {
    /// Unfiltered sets.
    pub full: IndexSets,
    /// Positives and negatives that take part in at least one surviving
    /// triplet with the given anchor.
    pub mined: IndexSets,
    pub triplets: Vec<Triplet>,
}

pub fn euclidean<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.to_f64_lossy() - y.to_f64_lossy();
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Keeps the triplets `(i, p, n)` with `‖u_i − u_p‖ + margin ≥ ‖u_i − u_n‖`.
pub fn mine_hard_triplets<T: Scalar, L: PartialEq>(
    embeddings: &Matrix<T>,
    labels: &[L],
    margin: f64,
) -> Result<MiningOutcome> {
    if embeddings.rows() != labels.len() {
        return Err(BelxError::DimensionMismatch {
            expected: labels.len(),
            got: embeddings.rows(),
        });
    }
    check_unit_rows(embeddings)?;
    let full = build_index_sets(labels)?;
    let n = labels.len();
    let mut dist = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = euclidean(embeddings.row(i), embeddings.row(j));
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut mined = IndexSets::empty(n);
    let mut triplets = Vec::new();
    for i in 0..n {
        let mut neg_used = vec![false; full.negatives[i].len()];
        for &p in &full.positives[i] {
            let reach = dist[i * n + p] + margin;
            let mut any = false;
            for (k, &q) in full.negatives[i].iter().enumerate() {
                if reach >= dist[i * n + q] {
                    triplets.push(Triplet {
                        anchor: i,
                        positive: p,
                        negative: q,
                    });
                    neg_used[k] = true;
                    any = true;
                }
            }
            if any {
                mined.positives[i].push(p);
            }
        }
        mined.negatives[i] = full.negatives[i]
            .iter()
            .zip(&neg_used)
            .filter_map(|(&q, &u)| u.then_some(q))
            .collect();
    }
    Ok(MiningOutcome {
        full,
        mined,
        triplets,
    })
}
