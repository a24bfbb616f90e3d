//! Non-differentiable graph transforms: adjacency construction, the
//! renormalisation trick, edge subsampling, low-rank reconstruction and the
//! closed-form linear propagation rules used as test oracles.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{dot, symmetric_scale, DenseMatrix, SparseMatrix};
use crate::error::{Error, Result};

/// Undirected, unweighted graph stored as canonical `(min, max)` pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
}

impl Graph {
    /// Canonicalises the edge list: orientation is dropped, duplicates merged
    /// and self-loops discarded.
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut out = Vec::new();
        for (a, b) in edges {
            let hi = a.max(b);
            if hi >= n {
                return Err(Error::Index {
                    op: "graph edge",
                    index: hi,
                    limit: n,
                });
            }
            if a != b {
                out.push((a.min(b), hi));
            }
        }
        out.sort_unstable();
        out.dedup();
        Ok(Self { n, edges: out })
    }

    pub fn edgeless(n: usize) -> Self {
        Self { n, edges: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Symmetric binary adjacency with an empty diagonal.
    pub fn adjacency(&self) -> SparseMatrix {
        let mut trip = Vec::with_capacity(2 * self.edges.len());
        for &(a, b) in &self.edges {
            trip.push((a, b, 1.0));
            trip.push((b, a, 1.0));
        }
        SparseMatrix::from_triplets(self.n, self.n, &trip).expect("canonical edges are unique")
    }
}

/// `D^{-1/2} (A + I) D^{-1/2}` with `D_ii = Σ_j |(A + I)_ij|`. Rows whose degree
/// is below [`crate::autodiff::DEGREE_EPS`] become a bare unit self-loop.
/// Without `add_self_loops` the diagonal gets zero-valued slots instead of ones.
pub fn renormalize(a: &SparseMatrix, add_self_loops: bool) -> Result<SparseMatrix> {
    if a.rows() != a.cols() {
        return Err(Error::shape("renormalize", a.shape(), (a.cols(), a.rows())));
    }
    let mut eye = SparseMatrix::identity(a.rows());
    if !add_self_loops {
        eye.values_mut().fill(0.0);
    }
    let (with_loops, _, _) = a.union_add(&eye)?;
    let (values, _, _) = symmetric_scale(&with_loops);
    with_loops.with_values(values)
}

/// Keeps `floor(ratio · M)` of the `M` undirected edges, sampled uniformly
/// without replacement.
pub fn sample_retained_edges(g: &Graph, ratio: f64, seed: u64) -> Result<Graph> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid(format!("edge retention ratio {ratio} outside [0, 1]")));
    }
    let m = g.edge_count();
    // The epsilon keeps products such as 0.29 · 100 from flooring to 28.
    let keep = ((ratio * m as f64) + 1e-9).floor() as usize;
    let keep = keep.min(m);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, m, keep).into_vec();
    picked.sort_unstable();
    Ok(Graph {
        n: g.n,
        edges: picked.into_iter().map(|i| g.edges[i]).collect(),
    })
}

const SVD_POWER_ITERATIONS: usize = 10;
const SVD_OVERSAMPLING: usize = 8;
const SVD_SEED: u64 = 0x5eed_5bd0;

/// Rank-`k` reconstruction `U_k Σ_k V_kᵀ` by randomised subspace iteration,
/// symmetrised as `(R + Rᵀ) / 2`.
pub fn truncated_svd_reconstruct(a: &SparseMatrix, k: usize) -> Result<DenseMatrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::shape("truncated_svd_reconstruct", a.shape(), (n, n)));
    }
    if k == 0 || k > n {
        return Err(Error::invalid(format!("SVD rank {k} outside [1, {n}]")));
    }
    let width = (k + SVD_OVERSAMPLING).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(SVD_SEED);
    let mut omega = DenseMatrix::zeros(n, width);
    for v in omega.data_mut() {
        *v = standard_normal(&mut rng);
    }
    let mut q = orthonormalize(a.matmul_dense(&omega)?, &mut rng);
    for _ in 0..SVD_POWER_ITERATIONS {
        let back = orthonormalize(a.t_matmul_dense(&q)?, &mut rng);
        q = orthonormalize(a.matmul_dense(&back)?, &mut rng);
    }
    // B = Qᵀ A, held transposed (n × width) for the one-sided Jacobi sweep.
    let bt = a.t_matmul_dense(&q)?;
    let (rotated, rotation) = one_sided_jacobi(bt);
    let mut order: Vec<usize> = (0..width).collect();
    let norms: Vec<f64> = (0..width).map(|c| column_norm(&rotated, c)).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]).then(x.cmp(&y)));
    let keep = &order[..k];

    // R = (Q J_k) W_kᵀ where B = J Wᵀ and W = Bᵀ J.
    let mut left = DenseMatrix::zeros(n, k);
    let mut right = DenseMatrix::zeros(n, k);
    for (t, &c) in keep.iter().enumerate() {
        for i in 0..n {
            let mut acc = 0.0;
            for s in 0..width {
                acc += q.get(i, s) * rotation.get(s, c);
            }
            left.set(i, t, acc);
            right.set(i, t, rotated.get(i, c));
        }
    }
    let r = left.matmul_t(&right)?;
    let mut sym = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            sym.set(i, j, 0.5 * (r.get(i, j) + r.get(j, i)));
        }
    }
    Ok(sym)
}

fn column_norm(m: &DenseMatrix, c: usize) -> f64 {
    (0..m.rows()).map(|i| m.get(i, c).powi(2)).sum::<f64>().sqrt()
}

/// Modified Gram-Schmidt with one re-orthogonalisation pass; columns that
/// collapse numerically are replaced by fresh random directions.
fn orthonormalize(m: DenseMatrix, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let (n, w) = m.shape();
    let mut cols: Vec<Vec<f64>> = (0..w).map(|c| (0..n).map(|i| m.get(i, c)).collect()).collect();
    let scale = cols.iter().map(|c| dot(c, c).sqrt()).fold(0.0, f64::max).max(1.0);
    for c in 0..w {
        for attempt in 0..3 {
            for _ in 0..2 {
                for p in 0..c {
                    let proj = dot(&cols[c], &cols[p]);
                    let (done, rest) = cols.split_at_mut(c);
                    for (x, y) in rest[0].iter_mut().zip(&done[p]) {
                        *x -= proj * y;
                    }
                }
            }
            let norm = dot(&cols[c], &cols[c]).sqrt();
            if norm > 1e-10 * scale || attempt == 2 {
                let norm = norm.max(f64::MIN_POSITIVE);
                cols[c].iter_mut().for_each(|x| *x /= norm);
                break;
            }
            cols[c] = (0..n).map(|_| standard_normal(rng)).collect();
        }
    }
    let mut out = DenseMatrix::zeros(n, w);
    for (c, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            out.set(i, c, v);
        }
    }
    out
}

/// Hestenes one-sided Jacobi: returns `(M J, J)` with orthogonal `J` such that
/// the columns of `M J` are mutually orthogonal.
fn one_sided_jacobi(mut m: DenseMatrix) -> (DenseMatrix, DenseMatrix) {
    let (n, w) = m.shape();
    let mut j = DenseMatrix::identity(w);
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..w {
            for q in p + 1..w {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..n {
                    let (x, y) = (m.get(i, p), m.get(i, q));
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..n {
                    let (x, y) = (m.get(i, p), m.get(i, q));
                    m.set(i, p, c * x - s * y);
                    m.set(i, q, s * x + c * y);
                }
                for i in 0..w {
                    let (x, y) = (j.get(i, p), j.get(i, q));
                    j.set(i, p, c * x - s * y);
                    j.set(i, q, s * x + c * y);
                }
            }
        }
        if !rotated {
            break;
        }
    }
    (m, j)
}

/// `a^k · x`; `k = 0` returns `x`.
pub fn simplified_propagate(a: &SparseMatrix, x: &DenseMatrix, k: usize) -> Result<DenseMatrix> {
    if a.cols() != x.rows() || a.rows() != a.cols() {
        return Err(Error::shape("simplified_propagate", a.shape(), x.shape()));
    }
    let mut h = x.clone();
    for _ in 0..k {
        h = a.matmul_dense(&h)?;
    }
    Ok(h)
}

/// `(a + a^m x xᵀ a^m)^k · x`, applied as repeated matrix-vector products so
/// the `n × n` multigraph operator is never formed.
pub fn multigraph_propagate(a: &SparseMatrix, x: &DenseMatrix, m: usize, k: usize) -> Result<DenseMatrix> {
    if a.cols() != x.rows() || a.rows() != a.cols() {
        return Err(Error::shape("multigraph_propagate", a.shape(), x.shape()));
    }
    // a is symmetric in every caller, but (a^m x)ᵀ is written out for general a:
    // a^m x xᵀ a^m v = P (Qᵀ v) with P = a^m x and Q = (a^m)ᵀ x.
    let p = simplified_propagate(a, x, m)?;
    let mut q = x.clone();
    for _ in 0..m {
        q = a.t_matmul_dense(&q)?;
    }
    let mut h = x.clone();
    for _ in 0..k {
        let graph_part = a.matmul_dense(&h)?;
        let feature_part = p.matmul(&q.t_matmul(&h)?)?;
        h = graph_part.add(&feature_part)?;
    }
    Ok(h)
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}
