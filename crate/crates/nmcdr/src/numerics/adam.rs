//! Adam optimizer with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tape::Gradients;
use super::tensor::Tensor;
use super::NumericsError;

/// Adam state: first/second moment buffers per parameter plus a step counter
/// shared by every parameter. Parameters absent from a gradient map are left
/// untouched, moments included.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. Gradients may cover any subset of `params`; shapes must
    /// match their parameters exactly.
    pub fn apply(&mut self, params: &mut ParamSet, grads: &Gradients) -> Result<(), NumericsError> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads.iter() {
            let p = params.get_mut(name).ok_or_else(|| NumericsError::UnknownParam(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "adam-step",
                    index: 0,
                    lhs: p.shape(),
                    rhs: g.shape(),
                });
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(p.rows(), p.cols()), Tensor::zeros(p.rows(), p.cols())));
            if m.shape() != p.shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "adam-moment",
                    index: 0,
                    lhs: m.shape(),
                    rhs: p.shape(),
                });
            }
            let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.epsilon, self.learning_rate);
            for ((pv, mv), (vv, gv)) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut().iter_mut().zip(g.data()))
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::Tape;

    fn grads_for(pairs: &[(&str, Tensor)]) -> Gradients {
        // Route through a real tape so the gradient type stays opaque.
        let mut tape = Tape::new();
        let mut ids = Vec::new();
        for (name, t) in pairs {
            ids.push((tape.param(name, Tensor::zeros(t.rows(), t.cols())).unwrap(), t.clone()));
        }
        // loss = sum of g ⊙ p so d loss/d p = g exactly.
        let mut total = None;
        for (id, g) in &ids {
            let gleaf = tape.leaf(g.clone());
            let prod = tape.hadamard(*id, gleaf).unwrap();
            let s = tape.reduce_sum(prod).unwrap();
            total = Some(match total {
                None => s,
                Some(acc) => tape.add(acc, s).unwrap(),
            });
        }
        let _ = total;
        tape.backward(None).unwrap()
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut params = ParamSet::new();
        params.insert("p", Tensor::filled(2, 2, 3.5)).unwrap();
        let mut adam = Adam::new(0.1);
        for _ in 0..10 {
            let g = grads_for(&[("p", Tensor::zeros(2, 2))]);
            adam.apply(&mut params, &g).unwrap();
        }
        assert_eq!(params.get("p").unwrap().data(), &[3.5; 4]);
        assert_eq!(adam.step_count(), 10);
    }

    #[test]
    fn single_step_matches_hand_evaluation() {
        // p=1, g=1, lr=0.1: m_hat = v_hat = 1, so p' = 1 - 0.1/(1 + 1e-8).
        let mut params = ParamSet::new();
        params.insert("p", Tensor::scalar(1.0)).unwrap();
        let mut adam = Adam::new(0.1);
        let g = grads_for(&[("p", Tensor::scalar(1.0))]);
        adam.apply(&mut params, &g).unwrap();
        let got = params.get("p").unwrap().data()[0];
        assert!((got - 0.9).abs() < 1e-7, "got {got}");
    }

    #[test]
    fn identical_grads_and_state_give_identical_updates() {
        let mut params = ParamSet::new();
        params.insert("a", Tensor::scalar(2.0)).unwrap();
        params.insert("b", Tensor::scalar(2.0)).unwrap();
        let mut adam = Adam::new(0.05);
        for _ in 0..7 {
            let g = grads_for(&[("a", Tensor::scalar(0.3)), ("b", Tensor::scalar(0.3))]);
            adam.apply(&mut params, &g).unwrap();
        }
        assert_eq!(params.get("a").unwrap().data()[0], params.get("b").unwrap().data()[0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut params = ParamSet::new();
        params.insert("p", Tensor::zeros(2, 3)).unwrap();
        let mut adam = Adam::new(0.1);
        let g = grads_for(&[("p", Tensor::zeros(2, 3))]);
        // Corrupt the parameter shape after building gradients.
        *params.get_mut("p").unwrap() = Tensor::zeros(3, 2);
        assert!(adam.apply(&mut params, &g).is_err());
    }

    #[test]
    fn untracked_parameters_stay_put() {
        let mut params = ParamSet::new();
        params.insert("seen", Tensor::scalar(1.0)).unwrap();
        params.insert("unseen", Tensor::scalar(1.0)).unwrap();
        let mut adam = Adam::new(0.1);
        let g = grads_for(&[("seen", Tensor::scalar(1.0))]);
        adam.apply(&mut params, &g).unwrap();
        assert_eq!(params.get("unseen").unwrap().data()[0], 1.0);
        assert!(params.get("seen").unwrap().data()[0] < 1.0);
    }
}
