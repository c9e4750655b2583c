//! Dense-matrix arithmetic with reverse-mode differentiation and Adam.
//!
//! Everything the model computes is expressed through the primitives in
//! [`tape::Tape`], in 64-bit precision throughout: a 1e-4 finite-difference
//! tolerance is not reliably attainable in 32-bit.

pub mod adam;
pub mod gradcheck;
pub mod math;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::Adam;
pub use params::ParamSet;
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum NumericsError {
    #[error("shape mismatch in {op} at node {index}: left {lhs:?} vs right {rhs:?}")]
    ShapeMismatch { op: &'static str, index: usize, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("invalid argument to {op} at node {index}: {msg}")]
    InvalidArg { op: &'static str, index: usize, msg: String },
    #[error("non-finite value produced by {op} at node {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("backward requested on a stale record; replay the forward pass first")]
    BackwardBeforeForward,
    #[error("seed shape {seed:?} does not match terminal shape {terminal:?}")]
    SeedShape { seed: (usize, usize), terminal: (usize, usize) },
    #[error("record is empty")]
    EmptyRecord,
    #[error("node {0} is not a leaf")]
    NotALeaf(usize),
    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),
    #[error("gradient for unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("buffer of length {len} cannot back a {rows}x{cols} tensor")]
    BadBuffer { rows: usize, cols: usize, len: usize },
}

#[cfg(test)]
mod tests {
    use std::rc::Rc;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::gradcheck::{check, GradCheckSettings};
    use super::*;

    #[test]
    fn matmul_hand_example() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let b = t.leaf(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[11.0]);
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0));
        let y = t.sigmoid(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.5]);
    }

    #[test]
    fn softmax_of_constant_row_is_uniform() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_rows(&[vec![2.7, 2.7, 2.7]]).unwrap());
        let y = t.softmax_row(x).unwrap();
        for &v in t.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_reports_both_shapes_and_index() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(2, 3));
        let b = t.leaf(Tensor::zeros(2, 3));
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn square_gradient_at_three_is_six() {
        let mut t = Tape::new();
        let x = t.param("x", Tensor::scalar(3.0)).unwrap();
        let y = t.hadamard(x, x).unwrap();
        let _ = t.reduce_sum(y).unwrap();
        let g = t.backward(None).unwrap();
        assert!((g.get("x").unwrap().data()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_sum_gradient_at_zero_is_quarter() {
        let mut t = Tape::new();
        let w = t.param("w", Tensor::scalar(0.0)).unwrap();
        let s = t.sigmoid(w).unwrap();
        let _ = t.reduce_sum(s).unwrap();
        let g = t.backward(None).unwrap();
        assert!((g.get("w").unwrap().data()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn unreachable_params_get_zero_gradients() {
        let mut t = Tape::new();
        let x = t.param("x", Tensor::scalar(2.0)).unwrap();
        let _orphan = t.param("orphan", Tensor::zeros(2, 2)).unwrap();
        let y = t.hadamard(x, x).unwrap();
        let _ = t.reduce_sum(y).unwrap();
        let g = t.backward(None).unwrap();
        assert_eq!(g.get("orphan").unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn backward_after_set_leaf_requires_replay() {
        let mut t = Tape::new();
        let x = t.param("x", Tensor::scalar(1.0)).unwrap();
        let y = t.hadamard(x, x).unwrap();
        let _ = t.reduce_sum(y).unwrap();
        t.set_leaf(x, Tensor::scalar(2.0)).unwrap();
        assert!(matches!(t.backward(None), Err(NumericsError::BackwardBeforeForward)));
        t.replay().unwrap();
        let g = t.backward(None).unwrap();
        assert!((g.get("x").unwrap().data()[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn forward_is_deterministic_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let run = |data: &[f64]| -> Vec<f64> {
            let mut t = Tape::new();
            let a = t.leaf(Tensor::from_vec(3, 4, data.to_vec()).unwrap());
            let s = t.sigmoid(a).unwrap();
            let m = t.softmax_row(s).unwrap();
            let r = t.reduce_sum(m).unwrap();
            t.value(m).data().iter().chain(t.value(r).data()).cloned().collect()
        };
        let first = run(&data);
        let second = run(&data);
        assert!(first.iter().zip(&second).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn non_finite_output_is_a_hard_error() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::scalar(1e308));
        let b = t.leaf(Tensor::scalar(1e308));
        // 1e308 + 1e308 overflows to +inf.
        assert!(matches!(t.add(a, b), Err(NumericsError::NonFinite { .. })));
    }

    #[test]
    fn gather_scatter_roundtrip_is_adjoint() {
        // scatter_add(gather(x)) sums duplicate rows; its gradient must gather
        // the scattered gradient back. A finite-difference check covers both.
        let mut t = Tape::new();
        let x = t.param("x", Tensor::from_rows(&[vec![0.3, -0.1], vec![0.7, 0.2], vec![-0.4, 0.9]]).unwrap()).unwrap();
        let idx = Rc::new(vec![0usize, 2, 2, 1]);
        let g = t.row_gather(x, idx.clone()).unwrap();
        let dst = Rc::new(vec![1usize, 0, 1, 1]);
        let s = t.row_scatter_add(g, dst, 2).unwrap();
        let sq = t.hadamard(s, s).unwrap();
        let _ = t.reduce_sum(sq).unwrap();
        let report = check(&mut t, GradCheckSettings::default()).unwrap();
        assert!(report.passed(), "{:?}", report.failures);
    }

    fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    /// Kink-free tensor for ReLU-style checks: keeps |x| away from the
    /// finite-difference step.
    fn random_tensor_away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| {
                let sign = if rng.random_range(0.0..1.0) < 0.5 { -1.0 } else { 1.0 };
                sign * rng.random_range(0.01..1.5)
            })
            .collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    /// Weighted sum of all entries, so every output entry feeds the scalar
    /// terminal with a distinct coefficient.
    fn weighted_terminal(t: &mut Tape, node: NodeId, rng: &mut ChaCha8Rng) -> NodeId {
        let (r, c) = t.value(node).shape();
        let w = t.leaf(random_tensor(rng, r, c));
        let prod = t.hadamard(node, w).unwrap();
        t.reduce_sum(prod).unwrap()
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let settings = GradCheckSettings::default();
        let mut total_checks = 0usize;

        for trial in 0..100 {
            let m = rng.random_range(1..=8);
            let k = rng.random_range(1..=8);
            let n = rng.random_range(1..=8);

            // matmul + add (broadcast) + hadamard + scale
            {
                let mut t = Tape::new();
                let a = t.param("a", random_tensor(&mut rng, m, k)).unwrap();
                let b = t.param("b", random_tensor(&mut rng, k, n)).unwrap();
                let bias = t.param("bias", random_tensor(&mut rng, 1, n)).unwrap();
                let mm = t.matmul(a, b).unwrap();
                let ab = t.add(mm, bias).unwrap();
                let h = t.param("h", random_tensor(&mut rng, m, n)).unwrap();
                let had = t.hadamard(ab, h).unwrap();
                let sc = t.scale(had, -0.73).unwrap();
                let _ = weighted_terminal(&mut t, sc, &mut rng);
                let rep = check(&mut t, settings).unwrap();
                assert!(rep.passed(), "trial {trial} linear ops: {:?}", rep.failures);
                total_checks += rep.checks;
            }

            // activations (relu input kept away from its kink)
            {
                let mut t = Tape::new();
                let x = t.param("x", random_tensor_away_from_zero(&mut rng, m, n)).unwrap();
                let r = t.relu(x).unwrap();
                let s = t.sigmoid(r).unwrap();
                let th = t.tanh(s).unwrap();
                let sp = t.softplus(th).unwrap();
                let _ = weighted_terminal(&mut t, sp, &mut rng);
                let rep = check(&mut t, settings).unwrap();
                assert!(rep.passed(), "trial {trial} activations: {:?}", rep.failures);
                total_checks += rep.checks;
            }

            // softmax-row, concat-cols, reduce-sum
            {
                let mut t = Tape::new();
                let x = t.param("x", random_tensor(&mut rng, m, n)).unwrap();
                let y = t.param("y", random_tensor(&mut rng, m, k)).unwrap();
                let sm = t.softmax_row(x).unwrap();
                let cc = t.concat_cols(sm, y).unwrap();
                let _ = weighted_terminal(&mut t, cc, &mut rng);
                let rep = check(&mut t, settings).unwrap();
                assert!(rep.passed(), "trial {trial} softmax/concat: {:?}", rep.failures);
                total_checks += rep.checks;
            }

            // gather, scatter-add, segment-softmax
            {
                let rows = rng.random_range(2..=8);
                let mut t = Tape::new();
                let x = t.param("x", random_tensor(&mut rng, rows, n)).unwrap();
                let count = rng.random_range(1..=8);
                let idx: Vec<usize> = (0..count).map(|_| rng.random_range(0..rows)).collect();
                let g = t.row_gather(x, Rc::new(idx.clone())).unwrap();
                let dst: Vec<usize> = (0..count).map(|_| rng.random_range(0..rows)).collect();
                let s = t.row_scatter_add(g, Rc::new(dst), rows).unwrap();
                let _ = weighted_terminal(&mut t, s, &mut rng);
                let rep = check(&mut t, settings).unwrap();
                assert!(rep.passed(), "trial {trial} gather/scatter: {:?}", rep.failures);
                total_checks += rep.checks;

                let mut t2 = Tape::new();
                let col = t2.param("col", random_tensor(&mut rng, count, 1)).unwrap();
                let mut offsets = vec![0usize];
                let mut at = 0;
                while at < count {
                    at = (at + rng.random_range(1..=count)).min(count);
                    offsets.push(at);
                }
                let seg = t2.segment_softmax(col, Rc::new(offsets)).unwrap();
                let _ = weighted_terminal(&mut t2, seg, &mut rng);
                let rep2 = check(&mut t2, settings).unwrap();
                assert!(rep2.passed(), "trial {trial} segment-softmax: {:?}", rep2.failures);
                total_checks += rep2.checks;
            }
        }
        assert!(total_checks > 10_000, "expected substantive coverage, got {total_checks}");
    }

    #[test]
    fn softmax_rows_sum_to_one_on_random_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let rows = rng.random_range(1..=8);
            let cols = rng.random_range(1..=8);
            let mut t = Tape::new();
            let x = t.leaf(random_tensor(&mut rng, rows, cols));
            let y = t.softmax_row(x).unwrap();
            let v = t.value(y);
            for r in 0..rows {
                let sum: f64 = v.row(r).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
                assert!(v.row(r).iter().all(|&p| p > 0.0 && p <= 1.0));
            }
        }
    }
}
