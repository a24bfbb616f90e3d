//! Differentiable graph revision: node embeddings from a revision GCN,
//! dot-product similarity, per-row top-K sparsification, symmetrisation and
//! residual combination with the input adjacency.

use std::cmp::Ordering;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::{dot, symmetrize_values, DenseMatrix, SparseMatrix, SparsePattern, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{gcn_layers, LayerOptions};

/// Default number of similarity rows scored per block.
pub const DEFAULT_BLOCK_ROWS: usize = 1024;

/// Symmetric sparse similarity `Ŝ` registered on a tape.
#[derive(Clone, Debug)]
pub struct SparsifiedSimilarity {
    pub matrix: Var,
    pub support: Arc<SparsePattern>,
}

impl SparsifiedSimilarity {
    /// Similarity with no retained entries.
    pub fn empty(tape: &mut Tape, n: usize) -> Self {
        let m = SparseMatrix::empty(n, n);
        let support = m.pattern().clone();
        Self {
            matrix: tape.sparse_constant(m),
            support,
        }
    }
}

/// Support frozen after the first full similarity pass; later passes only
/// recompute values at these pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexCache {
    n: usize,
    pattern: Arc<SparsePattern>,
    pairs: Arc<[(usize, usize)]>,
}

impl IndexCache {
    pub fn from_similarity(s: &SparsifiedSimilarity) -> Self {
        Self::from_pattern(s.support.clone())
    }

    fn from_pattern(pattern: Arc<SparsePattern>) -> Self {
        let pairs: Arc<[(usize, usize)]> = Arc::from(pattern.coords());
        Self {
            n: pattern.rows(),
            pattern,
            pairs,
        }
    }

    /// Rebuilds a cache from stored pairs; the pair set must be symmetric.
    pub fn from_pairs(n: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let (pattern, _) = SparsePattern::from_coords(n, n, pairs)?;
        if !pattern.is_structurally_symmetric() {
            return Err(Error::invalid("index cache pairs are not symmetric"));
        }
        Ok(Self::from_pattern(Arc::new(pattern)))
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }
}

/// Revision embedding `Z = A · relu(A · X · W0) · W1`; the last layer is linear.
pub fn embed<R: Rng + ?Sized>(
    tape: &mut Tape,
    a_norm: Var,
    x: Var,
    weights: &[Var],
    dropout: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let opts = LayerOptions {
        hidden_relu: true,
        dropout,
    };
    gcn_layers(tape, a_norm, x, weights, opts, training, rng)
}

#[derive(Clone, Copy, Debug)]
pub struct SimilarityOptions {
    pub block_rows: usize,
    /// Apply the sign-aware symmetrisation; disabled only by the propagation oracle.
    pub symmetrize: bool,
}

impl Default for SimilarityOptions {
    fn default() -> Self {
        Self {
            block_rows: DEFAULT_BLOCK_ROWS,
            symmetrize: true,
        }
    }
}

/// Orders candidates by value (largest first), then by smaller column.
fn rank(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Columns of the `k` best entries of one score row, ascending by column.
pub(crate) fn select_topk(scores: &[f64], k: usize) -> Vec<usize> {
    let mut cand: Vec<(f64, usize)> = scores.iter().copied().zip(0..).collect();
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, rank);
        cand.truncate(k);
    }
    let mut cols: Vec<usize> = cand.into_iter().map(|(_, c)| c).collect();
    cols.sort_unstable();
    cols
}

/// Directional top-K support of an `n × n` score matrix whose rows are
/// produced on demand, `block_rows` rows at a time. Pairs come out row-major.
pub(crate) fn topk_pairs(
    n: usize,
    k: usize,
    block_rows: usize,
    score_row: &(dyn Fn(usize, &mut [f64]) + Sync),
) -> Result<Vec<(usize, usize)>> {
    if k == 0 || k > n {
        return Err(Error::invalid(format!("top-K value {k} outside [1, {n}]")));
    }
    let block_rows = block_rows.max(1);
    let mut pairs = Vec::with_capacity(n * k);
    for start in (0..n).step_by(block_rows) {
        let end = (start + block_rows).min(n);
        let block: Vec<Vec<usize>> = (start..end)
            .into_par_iter()
            .map(|i| {
                let mut buf = vec![0.0; n];
                score_row(i, &mut buf);
                select_topk(&buf, k)
            })
            .collect();
        for (offset, cols) in block.into_iter().enumerate() {
            pairs.extend(cols.into_iter().map(|c| (start + offset, c)));
        }
    }
    Ok(pairs)
}

/// `Ŝ` from the embeddings: per-row top-K of `Z Zᵀ`, then symmetrised.
/// Gradients reach `Z` only through the retained entries.
pub fn similarity_topk(tape: &mut Tape, z: Var, k: usize, opts: SimilarityOptions) -> Result<SparsifiedSimilarity> {
    let zm = tape.dense(z)?;
    let n = zm.rows();
    let score = |i: usize, out: &mut [f64]| {
        let zi = zm.row(i);
        for (j, o) in out.iter_mut().enumerate() {
            *o = dot(zi, zm.row(j));
        }
    };
    let pairs = topk_pairs(n, k, opts.block_rows, &score)?;
    let (pattern, _) = SparsePattern::from_coords(n, n, &pairs)?;
    similarity_on_pattern(tape, z, Arc::new(pattern), Arc::from(pairs), opts.symmetrize)
}

fn similarity_on_pattern(
    tape: &mut Tape,
    z: Var,
    pattern: Arc<SparsePattern>,
    pairs: Arc<[(usize, usize)]>,
    symmetrize: bool,
) -> Result<SparsifiedSimilarity> {
    let values = tape.gather_pair_products(z, pairs)?;
    let directional = tape.sparse_from_values(pattern, values)?;
    let matrix = if symmetrize {
        tape.symmetrize(directional)?
    } else {
        directional
    };
    let support = tape.sparse(matrix)?.pattern().clone();
    Ok(SparsifiedSimilarity { matrix, support })
}

/// Recomputes `Ŝ` on a frozen support.
pub fn fast_similarity(tape: &mut Tape, z: Var, cache: &IndexCache) -> Result<SparsifiedSimilarity> {
    let n = tape.dense(z)?.rows();
    if n != cache.n {
        return Err(Error::invalid(format!(
            "index cache built for {} nodes, embeddings have {n}",
            cache.n
        )));
    }
    similarity_on_pattern(tape, z, cache.pattern.clone(), cache.pairs.clone(), true)
}

/// Revised adjacency `A + Ŝ` (before renormalisation).
pub fn revise(tape: &mut Tape, a: Var, s_hat: &SparsifiedSimilarity) -> Result<Var> {
    tape.sparse_add(a, s_hat.matrix)
}

/// Rows of a fixed (non-learned) feature-like matrix for kernel graphs.
pub enum KernelInput<'a> {
    Dense(&'a DenseMatrix),
    Sparse(&'a SparseMatrix),
}

/// Top-K, symmetrised dot-product graph of constant rows, built with the same
/// selection and symmetrisation as the learned path.
pub fn kernel_topk(input: KernelInput<'_>, k: usize, block_rows: usize) -> Result<SparseMatrix> {
    let (n, directional) = match input {
        KernelInput::Dense(d) => {
            let score = |i: usize, out: &mut [f64]| {
                for (j, o) in out.iter_mut().enumerate() {
                    *o = dot(d.row(i), d.row(j));
                }
            };
            let pairs = topk_pairs(d.rows(), k, block_rows, &score)?;
            let trip: Vec<_> = pairs.iter().map(|&(i, j)| (i, j, dot(d.row(i), d.row(j)))).collect();
            (d.rows(), trip)
        }
        KernelInput::Sparse(s) => {
            let cols = s.pattern().col_indices();
            let vals = s.values();
            let row_dot = |buf: &[f64], j: usize| -> f64 {
                s.pattern().row_range(j).map(|t| vals[t] * buf[cols[t]]).sum()
            };
            let score = |i: usize, out: &mut [f64]| {
                let mut buf = vec![0.0; s.cols()];
                for t in s.pattern().row_range(i) {
                    buf[cols[t]] = vals[t];
                }
                for (j, o) in out.iter_mut().enumerate() {
                    *o = row_dot(&buf, j);
                }
            };
            let pairs = topk_pairs(s.rows(), k, block_rows, &score)?;
            let mut trip = Vec::with_capacity(pairs.len());
            let mut buf = vec![0.0; s.cols()];
            let mut loaded = usize::MAX;
            for &(i, j) in &pairs {
                if loaded != i {
                    buf.iter_mut().for_each(|b| *b = 0.0);
                    for t in s.pattern().row_range(i) {
                        buf[cols[t]] = vals[t];
                    }
                    loaded = i;
                }
                trip.push((i, j, row_dot(&buf, j)));
            }
            (s.rows(), trip)
        }
    };
    let directional = SparseMatrix::from_triplets(n, n, &directional)?;
    Ok(symmetrize_values(&directional)?.0)
}
