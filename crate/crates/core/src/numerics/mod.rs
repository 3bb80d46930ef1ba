//! Dense `f64` tensors and a define-by-run reverse-mode tape.
//!
//! The tape ([`Graph`]) is rebuilt for every forward pass. Parameters live in
//! a [`ParamStore`] and are bound into a graph as shared leaves; binding the
//! same store more than once gives independent leaves, which is how
//! per-call gradients of a shared parameter are observed.

mod graph;
mod params;
mod tensor;

pub mod gradcheck;

pub use graph::{gelu, Axis, Graph, Var};
pub use params::{ParamId, ParamStore, ParamVars};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("graph error: {0}")]
    Graph(String),
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{check_var_gradient, GradcheckReport};
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(rows, cols, data).unwrap()
    }

    /// Central-difference check of `f` with respect to a leaf initialized to `x0`.
    fn gradcheck_unary(
        x0: Tensor,
        f: impl Fn(&mut Graph, Var) -> Result<Var, NumericsError>,
    ) -> GradcheckReport {
        check_var_gradient(&x0, 1e-5, usize::MAX, 0, |x| {
            let mut g = Graph::new();
            let v = g.leaf(x.clone(), true);
            let y = f(&mut g, v)?;
            let loss = g.sum(y)?;
            Ok((g, v, loss))
        })
        .unwrap()
    }

    #[test]
    fn identity_matmul_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(2, 3, &mut rng);
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(2));
        let xv = g.constant(x.clone());
        let y = g.matmul(i, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn matmul_hand_example() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.constant(Tensor::from_rows(&[&[1.0], &[1.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &Tensor::from_rows(&[&[3.0], &[7.0]]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(2, 3));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] x [2, 3]"), "{err}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = random(4, 3, &mut rng);
        let report = gradcheck_unary(random(2, 4, &mut rng), |g, a| {
            let bv = g.constant(b.clone());
            g.matmul(a, bv)
        });
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[&[0.3, 0.3, 0.3, 0.3]]));
        let y = g.softmax(x, Axis::Cols).unwrap();
        for v in g.value(y).data() {
            assert_abs_diff_eq!(*v, 0.25, epsilon = 1e-15);
        }

        let x = g.constant(Tensor::from_rows(&[&[0.0, 3f64.ln()]]));
        let y = g.softmax(x, Axis::Cols).unwrap();
        assert_abs_diff_eq!(g.value(y).data()[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(g.value(y).data()[1], 0.75, epsilon = 1e-12);

        let base = Tensor::from_rows(&[&[0.1, -2.0, 3.5]]);
        let shifted = Tensor::from_rows(&[&[100.1, 98.0, 103.5]]);
        let a = g.constant(base);
        let b = g.constant(shifted);
        let pa = g.softmax(a, Axis::Cols).unwrap();
        let pb = g.softmax(b, Axis::Cols).unwrap();
        assert!(g.value(pa).max_abs_diff(g.value(pb)) < 1e-12);
    }

    #[test]
    fn softmax_empty_axis_is_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(3, 0));
        assert!(g.softmax(x, Axis::Cols).is_err());
    }

    #[test]
    fn softmax_and_log_softmax_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random(3, 5, &mut rng);
        for axis in [Axis::Rows, Axis::Cols] {
            let w1 = w.clone();
            let r = gradcheck_unary(random(3, 5, &mut rng), move |g, x| {
                let s = g.softmax(x, axis)?;
                let wv = g.constant(w1.clone());
                g.mul(s, wv)
            });
            assert!(r.max_rel_err < 1e-6, "{axis:?} {r:?}");
            let w2 = w.clone();
            let r = gradcheck_unary(random(3, 5, &mut rng), move |g, x| {
                let s = g.log_softmax(x, axis)?;
                let wv = g.constant(w2.clone());
                g.mul(s, wv)
            });
            assert!(r.max_rel_err < 1e-6, "{axis:?} {r:?}");
        }
    }

    #[test]
    fn pointwise_values() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(z).unwrap();
        let t = g.tanh(z).unwrap();
        assert_eq!(g.value(s).item().unwrap(), 0.5);
        assert_eq!(g.value(t).item().unwrap(), 0.0);
        // tanh-approximation value at 1.0
        assert_abs_diff_eq!(gelu(1.0), 0.841_191_990_608_276_8, epsilon = 1e-12);
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[&[1.0, 0.0]]));
        assert!(matches!(g.log(x), Err(NumericsError::Domain(_))));
    }

    #[test]
    fn pointwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ops: Vec<(&str, fn(&mut Graph, Var) -> Result<Var, NumericsError>)> = vec![
            ("tanh", |g, x| g.tanh(x)),
            ("sigmoid", |g, x| g.sigmoid(x)),
            ("gelu", |g, x| g.gelu(x)),
            ("affine", |g, x| g.affine(x, -1.5, 0.25)),
            ("layer_norm", |g, x| {
                let y = g.layer_norm_cols(x, 1e-12)?;
                let w = g.constant(Tensor::from_rows(&[&[0.3, -0.7], &[1.1, 0.2], &[-0.4, 0.9]]));
                g.mul(y, w)
            }),
        ];
        for (name, op) in ops {
            let r = gradcheck_unary(random(3, 2, &mut rng), op);
            assert!(r.max_rel_err < 1e-6, "{name}: {r:?}");
        }
        let positive = Tensor::from_rows(&[&[0.5, 1.5], &[2.0, 0.1]]);
        let r = gradcheck_unary(positive, |g, x| g.log(x));
        assert!(r.max_rel_err < 1e-6, "log: {r:?}");
    }

    #[test]
    fn broadcast_add_mul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let big = random(3, 4, &mut rng);
        for (rows, cols) in [(3, 4), (3, 1), (1, 4), (1, 1)] {
            let b1 = big.clone();
            let r = gradcheck_unary(random(rows, cols, &mut rng), move |g, x| {
                let a = g.constant(b1.clone());
                let s = g.add(a, x)?;
                g.mul(s, a)
            });
            assert!(r.max_rel_err < 1e-6, "add ({rows},{cols}) {r:?}");
            let b2 = big.clone();
            let r = gradcheck_unary(random(rows, cols, &mut rng), move |g, x| {
                let a = g.constant(b2.clone());
                let p = g.mul(a, x)?;
                g.tanh(p)
            });
            assert!(r.max_rel_err < 1e-6, "mul ({rows},{cols}) {r:?}");
        }
    }

    #[test]
    fn concat_rows_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (a, b) = (random(4, 3, &mut rng), random(8, 3, &mut rng));
        let mut g = Graph::new();
        let va = g.constant(a.clone());
        let vb = g.constant(b.clone());
        let single = g.concat_rows(&[va]).unwrap();
        assert_eq!(g.value(single), &a);
        let c = g.concat_rows(&[va, vb]).unwrap();
        assert_eq!(g.value(c).shape(), [12, 3]);
        assert_eq!(g.value(c).slice_rows(0, 4), a);
        assert_eq!(g.value(c).slice_rows(4, 12), b);
        let odd = g.constant(Tensor::zeros(2, 2));
        assert!(matches!(g.concat_rows(&[va, odd]), Err(NumericsError::Shape(_))));
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let other = random(2, 3, &mut rng);
        let weights = random(5, 3, &mut rng);
        let r = gradcheck_unary(random(3, 3, &mut rng), move |g, x| {
            let o = g.constant(other.clone());
            let c = g.concat_rows(&[x, o, x])?;
            let s = g.slice_rows(c, 1, 6)?;
            let w = g.constant(weights.clone());
            g.mul(s, w)
        });
        assert!(r.max_rel_err < 1e-6, "{r:?}");

        let r = gradcheck_unary(random(3, 4, &mut rng), |g, x| {
            let s = g.select_cols(x, &[2, 0, 2])?;
            let t = g.transpose(s)?;
            let c = g.concat_cols(&[x, s])?;
            let sq = g.mul(c, c)?;
            let tt = g.tanh(t)?;
            let a = g.sum(sq)?;
            let b = g.sum(tt)?;
            g.add(a, b)
        });
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn gather_rows_examples() {
        let table = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let mut g = Graph::new();
        let t = g.leaf(table.clone(), true);
        let first = g.gather_rows(t, &[0]).unwrap();
        assert_eq!(g.value(first).data(), &[1.0, 2.0]);
        let empty = g.gather_rows(t, &[]).unwrap();
        assert_eq!(g.value(empty).shape(), [0, 2]);
        assert!(matches!(g.gather_rows(t, &[3]), Err(NumericsError::Index(_))));

        let rep = g.gather_rows(t, &[1, 1, 1, 2]).unwrap();
        let loss = g.sum(rep).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(t).unwrap();
        assert_eq!(grad.data(), &[0.0, 0.0, 3.0, 3.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_simple_losses() {
        let x0 = Tensor::from_rows(&[&[1.0, -2.0, 0.5]]);
        let mut g = Graph::new();
        let x = g.leaf(x0.clone(), true);
        let loss = g.sum(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.leaf(x0.transposed(), true);
        let xt = g.transpose(x).unwrap();
        let loss = g.matmul(xt, x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_contract_errors() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(2, 2), true);
        assert!(matches!(g.backward(x), Err(NumericsError::Shape(_))));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(NumericsError::Graph(_))));
        g.reset_grads();
        g.backward(s).unwrap();
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(1e300));
        assert!(matches!(g.mul(x, x), Err(NumericsError::NonFinite("mul"))));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item().unwrap(), 3.0);
    }

    #[test]
    fn random_composite_graph_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for trial in 0..5 {
            let w = random(4, 3, &mut rng);
            let table = random(6, 3, &mut rng);
            let ids: Vec<usize> = (0..5).map(|_| rng.gen_range(0..6)).collect();
            let x0 = random(3, 5, &mut rng);
            let report = check_var_gradient(&x0, 1e-5, 10, trial, |x| {
                let mut g = Graph::new();
                let xv = g.leaf(x.clone(), true);
                let wv = g.constant(w.clone());
                let tv = g.constant(table.clone());
                let h = g.matmul(wv, xv)?;
                let h = g.gelu(h)?;
                let e = g.gather_rows(tv, &ids)?;
                let e = g.transpose(e)?;
                let both = g.concat_rows(&[h, e])?;
                let n = g.layer_norm_cols(both, 1e-12)?;
                let p = g.softmax(n, Axis::Cols)?;
                let s = g.sigmoid(p)?;
                let l = g.log(s)?;
                let loss = g.mean(l)?;
                Ok((g, xv, loss))
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn dropout_is_identity_at_zero_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(2, 2, 1.0));
        assert_eq!(g.dropout(x, 0.0, &mut rng).unwrap(), x);
        let y = g.dropout(x, 0.5, &mut rng).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0 || *v == 2.0));
    }
}
