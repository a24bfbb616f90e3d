//! Reverse-mode differentiation over dense and sparse real matrices.
//!
//! A [`Tape`] is built fresh for every forward pass. Leaves are either
//! constants or trainable parameters; every operation appends a node holding
//! its forward value, and [`Tape::backward`] walks the nodes in reverse to
//! accumulate gradients. Sparse nodes keep their structure fixed and only
//! their stored values receive gradients.

mod dense;
mod sparse;
mod tape;

pub use dense::DenseMatrix;
pub use sparse::{SparseMatrix, SparsePattern};
pub use tape::{Gradients, Tape, Value, Var, DEGREE_EPS};

pub(crate) use dense::dot;
pub(crate) use tape::{symmetric_scale, symmetrize_values};

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    const STEP: f64 = 1e-5;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    /// Central differences of a scalar function of one dense input.
    fn numeric_grad(x: &DenseMatrix, f: &dyn Fn(&DenseMatrix) -> f64) -> DenseMatrix {
        let mut g = DenseMatrix::zeros(x.rows(), x.cols());
        for k in 0..x.data().len() {
            let mut plus = x.clone();
            plus.data_mut()[k] += STEP;
            let mut minus = x.clone();
            minus.data_mut()[k] -= STEP;
            g.data_mut()[k] = (f(&plus) - f(&minus)) / (2.0 * STEP);
        }
        g
    }

    fn assert_close(analytic: &DenseMatrix, numeric: &DenseMatrix, tol: f64) {
        assert_eq!(analytic.shape(), numeric.shape());
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            assert!(rel_err(*a, *n) < tol, "analytic {a} vs numeric {n}");
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = rng();
        let a = DenseMatrix::random_uniform(3, 4, -1.0, 1.0, &mut rng);
        let b = DenseMatrix::random_uniform(4, 2, -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let av = tape.param(a.clone());
        let bv = tape.param(b.clone());
        let prod = tape.matmul(av, bv).unwrap();
        let loss = tape.sum(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        let fa = |x: &DenseMatrix| x.matmul(&b).unwrap().sum();
        let fb = |x: &DenseMatrix| a.matmul(x).unwrap().sum();
        assert_close(&grads.wrt(av), &numeric_grad(&a, &fa), 1e-5);
        assert_close(&grads.wrt(bv), &numeric_grad(&b, &fb), 1e-5);
    }

    #[test]
    fn spmm_matches_densified_and_value_gradients() {
        let mut rng = rng();
        let mut coords = Vec::new();
        while coords.len() < 8 {
            let c = (rng.gen_range(0..5), rng.gen_range(0..5));
            if !coords.contains(&c) {
                coords.push(c);
            }
        }
        let trip: Vec<_> = coords.iter().map(|&(r, c)| (r, c, rng.gen_range(-1.0..1.0))).collect();
        let s = SparseMatrix::from_triplets(5, 5, &trip).unwrap();
        let d = DenseMatrix::random_uniform(5, 3, -1.0, 1.0, &mut rng);
        let w = DenseMatrix::random_uniform(3, 1, -1.0, 1.0, &mut rng);

        let dense_prod = s.to_dense().matmul(&d).unwrap();
        let sparse_prod = s.matmul_dense(&d).unwrap();
        for (x, y) in dense_prod.data().iter().zip(sparse_prod.data()) {
            assert!(rel_err(*x, *y) < 1e-10);
        }

        let u = DenseMatrix::random_uniform(1, 5, -1.0, 1.0, &mut rng);
        let objective = |s: &SparseMatrix, d: &DenseMatrix| {
            u.matmul(&s.matmul_dense(d).unwrap()).unwrap().matmul(&w).unwrap().sum()
        };
        let mut tape = Tape::new();
        let sv = tape.sparse_param(s.clone());
        let dv = tape.param(d.clone());
        let uv = tape.constant(u.clone());
        let wv = tape.constant(w.clone());
        let prod = tape.spmm(sv, dv).unwrap();
        let left = tape.matmul(uv, prod).unwrap();
        let loss = tape.matmul(left, wv).unwrap();
        assert!(rel_err(tape.scalar(loss).unwrap(), objective(&s, &d)) < 1e-12);
        let grads = tape.backward(loss).unwrap();

        let num_d = numeric_grad(&d, &|x| objective(&s, x));
        assert_close(&grads.wrt(dv), &num_d, 1e-5);

        let vals = DenseMatrix::from_vec(s.nnz(), 1, s.values().to_vec()).unwrap();
        let num_s = numeric_grad(&vals, &|x| objective(&s.with_values(x.data().to_vec()).unwrap(), &d));
        let analytic = DenseMatrix::from_vec(s.nnz(), 1, grads.wrt_values(sv)).unwrap();
        assert_close(&analytic, &num_s, 1e-5);
    }

    #[test]
    fn relu_forward_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(DenseMatrix::from_rows(&[vec![-1.0, 2.0]]).unwrap());
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.dense(y).unwrap().data(), &[0.0, 2.0]);
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.param(DenseMatrix::filled(2, 2, -0.5));
        let y = tape.relu(x).unwrap();
        let loss = tape.sum(y).unwrap();
        assert_eq!(tape.dense(y).unwrap(), &DenseMatrix::zeros(2, 2));
        assert_eq!(tape.backward(loss).unwrap().wrt(x), DenseMatrix::zeros(2, 2));
    }

    #[test]
    fn relu_gradient_away_from_kink() {
        let x0 = DenseMatrix::from_rows(&[vec![-0.7, 0.3, 1.2], vec![0.9, -0.2, -1.5]]).unwrap();
        let w = DenseMatrix::from_rows(&[vec![1.0], vec![-2.0], vec![0.5]]).unwrap();
        let f = |x: &DenseMatrix| {
            let r = DenseMatrix::from_vec(2, 3, x.data().iter().map(|v| v.max(0.0)).collect()).unwrap();
            r.matmul(&w).unwrap().sum()
        };
        let mut tape = Tape::new();
        let xv = tape.param(x0.clone());
        let wv = tape.constant(w.clone());
        let r = tape.relu(xv).unwrap();
        let p = tape.matmul(r, wv).unwrap();
        let loss = tape.sum(p).unwrap();
        assert_close(&tape.backward(loss).unwrap().wrt(xv), &numeric_grad(&x0, &f), 1e-5);
    }

    #[test]
    fn cross_entropy_values() {
        let mut tape = Tape::new();
        let l = tape.constant(DenseMatrix::from_rows(&[vec![0.0, 0.0]]).unwrap());
        let loss = tape.softmax_cross_entropy(l, &[0], &[0]).unwrap();
        assert!((tape.scalar(loss).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);

        let l = tape.constant(DenseMatrix::from_rows(&[vec![1000.0, 0.0]]).unwrap());
        let loss = tape.softmax_cross_entropy(l, &[0], &[0]).unwrap();
        let v = tape.scalar(loss).unwrap();
        assert!(v.is_finite() && v.abs() < 1e-12, "{v}");
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut rng = rng();
        let logits = DenseMatrix::random_uniform(4, 3, -2.0, 2.0, &mut rng);
        let labels = [2, 0, 1, 1];
        let mask = [0, 1, 3];
        let f = |x: &DenseMatrix| {
            let mut tape = Tape::new();
            let v = tape.constant(x.clone());
            let l = tape.softmax_cross_entropy(v, &labels, &mask).unwrap();
            tape.scalar(l).unwrap()
        };
        let mut tape = Tape::new();
        let v = tape.param(logits.clone());
        let l = tape.softmax_cross_entropy(v, &labels, &mask).unwrap();
        let g = tape.backward(l).unwrap().wrt(v);
        assert_close(&g, &numeric_grad(&logits, &f), 1e-5);
        // Unmasked row receives nothing.
        assert!(g.row(2).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn cross_entropy_errors() {
        let mut tape = Tape::new();
        let l = tape.constant(DenseMatrix::zeros(2, 3));
        assert!(tape.softmax_cross_entropy(l, &[0, 1], &[]).is_err());
        assert!(tape.softmax_cross_entropy(l, &[0, 3], &[1]).is_err());
    }

    #[test]
    fn elementwise_ops() {
        let mut rng = rng();
        let a0 = DenseMatrix::random_uniform(2, 3, -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let a = tape.param(a0.clone());
        let b = tape.param(DenseMatrix::random_uniform(2, 3, -1.0, 1.0, &mut rng));
        let zero = tape.constant(DenseMatrix::zeros(2, 3));
        let same = tape.add(a, zero).unwrap();
        assert_eq!(tape.dense(same).unwrap(), &a0);
        let t = tape.transpose(a).unwrap();
        let tt = tape.transpose(t).unwrap();
        assert_eq!(tape.dense(tt).unwrap(), &a0);
        let b2 = tape.scale(b, 2.0).unwrap();
        let s = tape.add(a, b2).unwrap();
        let loss = tape.sum(s).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(b), DenseMatrix::filled(2, 3, 2.0));
        assert_eq!(g.wrt(a), DenseMatrix::filled(2, 3, 1.0));

        let c = tape.constant(DenseMatrix::zeros(3, 2));
        assert!(matches!(tape.add(a, c), Err(crate::Error::Shape { .. })));
    }

    #[test]
    fn gather_pair_products_cases() {
        let mut tape = Tape::new();
        let z = tape.param(DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap());
        let out = tape.gather_pair_products(z, Arc::from(vec![(0, 1), (0, 0)])).unwrap();
        assert_eq!(tape.dense(out).unwrap().data(), &[0.0, 1.0]);
        assert!(tape.gather_pair_products(z, Arc::from(vec![(0, 2)])).is_err());

        let mut rng = rng();
        let z0 = DenseMatrix::random_uniform(5, 3, -1.0, 1.0, &mut rng);
        let full = z0.matmul_t(&z0).unwrap();
        let pairs: Vec<_> = (0..5).flat_map(|i| (0..5).map(move |j| (i, j))).collect();
        let mut tape = Tape::new();
        let z = tape.param(z0.clone());
        let out = tape.gather_pair_products(z, Arc::from(pairs.clone())).unwrap();
        for (t, &(i, j)) in pairs.iter().enumerate() {
            assert!(rel_err(tape.dense(out).unwrap().data()[t], full.get(i, j)) < 1e-12);
        }
        let w = DenseMatrix::random_uniform(1, 25, -1.0, 1.0, &mut rng);
        let wv = tape.constant(w.clone());
        let p = tape.matmul(wv, out).unwrap();
        let g = tape.backward(p).unwrap().wrt(z);
        let f = |x: &DenseMatrix| {
            let s = x.matmul_t(x).unwrap();
            pairs.iter().enumerate().map(|(t, &(i, j))| w.data()[t] * s.get(i, j)).sum()
        };
        assert_close(&g, &numeric_grad(&z0, &f), 1e-5);
    }

    #[test]
    fn dropout_modes() {
        let mut rng = rng();
        let x0 = DenseMatrix::filled(3, 3, 2.0);
        let mut tape = Tape::new();
        let x = tape.param(x0.clone());
        assert_eq!(tape.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.9, false, &mut rng).unwrap(), x);
        assert!(tape.dropout(x, 1.0, true, &mut rng).is_err());
        assert!(tape.dropout(x, -0.1, false, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = rng();
        let mut tape = Tape::new();
        let x = tape.constant(DenseMatrix::filled(1, 10_000, 3.0));
        let y = tape.dropout(x, 0.5, true, &mut rng).unwrap();
        let mean = tape.dense(y).unwrap().sum() / 10_000.0;
        assert!((mean - 3.0).abs() / 3.0 < 0.02, "{mean}");
    }

    #[test]
    fn backward_edge_cases() {
        let mut tape = Tape::new();
        let p = tape.param(DenseMatrix::filled(2, 2, 0.3));
        let unused = tape.param(DenseMatrix::filled(3, 1, 1.0));
        let loss = tape.sum(p).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(p), DenseMatrix::filled(2, 2, 1.0));
        assert_eq!(g.wrt(unused), DenseMatrix::zeros(3, 1));
        assert!(tape.backward(p).is_err());
    }

    #[test]
    fn symmetrize_branches() {
        let s = SparseMatrix::from_triplets(2, 2, &[(0, 1, 3.0)]).unwrap();
        let (out, _) = symmetrize_values(&s).unwrap();
        assert_eq!((out.get(0, 1), out.get(1, 0)), (3.0, 3.0));

        let s = SparseMatrix::from_triplets(2, 2, &[(0, 1, -3.0), (1, 0, -1.0)]).unwrap();
        let (out, _) = symmetrize_values(&s).unwrap();
        assert_eq!((out.get(0, 1), out.get(1, 0)), (-3.0, -3.0));

        let s = SparseMatrix::from_triplets(2, 2, &[(0, 1, 2.0), (1, 0, -5.0)]).unwrap();
        let (out, _) = symmetrize_values(&s).unwrap();
        assert_eq!((out.get(0, 1), out.get(1, 0)), (-5.0, -5.0));

        let s = SparseMatrix::from_triplets(2, 2, &[(0, 1, -3.0), (1, 0, 3.0)]).unwrap();
        let (out, _) = symmetrize_values(&s).unwrap();
        assert_eq!((out.get(0, 1), out.get(1, 0)), (-3.0, -3.0));
    }

    #[test]
    fn renormalize_gradient_with_signed_values() {
        let mut rng = rng();
        let mut trip = Vec::new();
        for i in 0..4 {
            for j in 0..4 {
                if (i + j) % 2 == 1 || i == j {
                    trip.push((i, j, rng.gen_range(0.2..1.0) * if (i * j) % 3 == 1 { -1.0 } else { 1.0 }));
                }
            }
        }
        let s = SparseMatrix::from_triplets(4, 4, &trip).unwrap();
        let h = DenseMatrix::random_uniform(4, 2, -1.0, 1.0, &mut rng);
        let f = |vals: &DenseMatrix| {
            let mut tape = Tape::new();
            let sv = tape.sparse_constant(s.with_values(vals.data().to_vec()).unwrap());
            let hv = tape.constant(h.clone());
            let n = tape.renormalize(sv, true).unwrap();
            let p = tape.spmm(n, hv).unwrap();
            let l = tape.sum(p).unwrap();
            tape.scalar(l).unwrap()
        };
        let mut tape = Tape::new();
        let sv = tape.sparse_param(s.clone());
        let hv = tape.constant(h.clone());
        let n = tape.renormalize(sv, true).unwrap();
        let p = tape.spmm(n, hv).unwrap();
        let l = tape.sum(p).unwrap();
        let g = tape.backward(l).unwrap().wrt_values(sv);
        let vals = DenseMatrix::from_vec(s.nnz(), 1, s.values().to_vec()).unwrap();
        assert_close(&DenseMatrix::from_vec(s.nnz(), 1, g).unwrap(), &numeric_grad(&vals, &f), 1e-5);
    }

    #[test]
    fn tape_replay_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut tape = Tape::new();
            let x = tape.param(DenseMatrix::random_uniform(6, 4, -1.0, 1.0, &mut rng));
            let d = tape.dropout(x, 0.5, true, &mut rng).unwrap();
            let r = tape.relu(d).unwrap();
            let l = tape.softmax_cross_entropy(r, &[0, 1, 2, 3, 0, 1], &[0, 2, 4]).unwrap();
            tape.scalar(l).unwrap().to_bits()
        };
        assert_eq!(run(), run());
    }
}
