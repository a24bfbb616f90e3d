//! Adam with coupled L2 weight decay and per-group learning rates.

use crate::autodiff::DenseMatrix;
use crate::error::{Error, Result};
use crate::models::{ParamGroup, ParamSet};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: DenseMatrix,
    v: DenseMatrix,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            m: DenseMatrix::zeros(rows, cols),
            v: DenseMatrix::zeros(rows, cols),
        }
    }
}

/// One bias-corrected Adam update at step `t` (1-based). The decay term
/// `weight_decay * w` is added to the gradient before the moments.
pub fn adam_step(
    param: &mut DenseMatrix,
    grad: &DenseMatrix,
    state: &mut AdamState,
    t: u64,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::shape("adam_step", param.shape(), grad.shape()));
    }
    if state.m.shape() != param.shape() {
        return Err(Error::shape("adam_step state", state.m.shape(), param.shape()));
    }
    if t == 0 {
        return Err(Error::invalid("Adam steps are counted from 1"));
    }
    let c1 = 1.0 - BETA1.powi(t as i32);
    let c2 = 1.0 - BETA2.powi(t as i32);
    let w = param.data_mut();
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (i, &g) in grad.data().iter().enumerate() {
        let g = g + weight_decay * w[i];
        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        w[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
    }
    Ok(())
}

/// Adam over a [`ParamSet`], with separate learning rates for the revision
/// and classification groups.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr_revision: f64,
    pub lr_classification: f64,
    pub weight_decay: f64,
    t: u64,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr_revision: f64, lr_classification: f64, weight_decay: f64) -> Self {
        Self {
            lr_revision,
            lr_classification,
            weight_decay,
            t: 0,
            states: params.iter().map(|p| AdamState::new(p.value.rows(), p.value.cols())).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// `grads` follow the parameter order of `params`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[DenseMatrix]) -> Result<()> {
        if grads.len() != params.len() || self.states.len() != params.len() {
            return Err(Error::invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.t += 1;
        for ((p, g), state) in params.iter_mut().zip(grads).zip(&mut self.states) {
            let lr = match p.group {
                ParamGroup::Revision => self.lr_revision,
                ParamGroup::Classification => self.lr_classification,
            };
            adam_step(&mut p.value, g, state, self.t, lr, self.weight_decay)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut w = DenseMatrix::from_vec(1, 3, vec![1.0, -2.0, 0.5]).unwrap();
        let g = DenseMatrix::from_vec(1, 3, vec![0.3, -7.0, 1e-3]).unwrap();
        let mut s = AdamState::new(1, 3);
        adam_step(&mut w, &g, &mut s, 1, 0.01, 0.0).unwrap();
        let want = [1.0 - 0.01, -2.0 + 0.01, 0.5 - 0.01];
        for (a, b) in w.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let w0 = DenseMatrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut w = w0.clone();
        let mut s = AdamState::new(2, 2);
        for t in 1..=5 {
            adam_step(&mut w, &DenseMatrix::zeros(2, 2), &mut s, t, 0.1, 0.0).unwrap();
        }
        assert_eq!(w, w0);
    }

    #[test]
    fn converges_on_quadratic_bowl() {
        let mut w = DenseMatrix::from_vec(1, 4, vec![0.8, -0.5, 0.3, 1.0]).unwrap();
        let mut s = AdamState::new(1, 4);
        for t in 1..=500 {
            let g = w.scale(2.0);
            adam_step(&mut w, &g, &mut s, t, 1e-2, 0.0).unwrap();
        }
        assert!(w.frobenius_norm() < 1e-3, "{}", w.frobenius_norm());
    }

    #[test]
    fn weight_decay_is_coupled() {
        // Zero loss gradient: the decay term alone drives the first step.
        let mut w = DenseMatrix::from_vec(1, 1, vec![2.0]).unwrap();
        let mut s = AdamState::new(1, 1);
        adam_step(&mut w, &DenseMatrix::zeros(1, 1), &mut s, 1, 0.1, 0.5).unwrap();
        assert!((w.get(0, 0) - 1.9).abs() < 1e-7);
    }

    #[test]
    fn groups_use_their_own_rates() {
        let mut params = ParamSet::new();
        params.push("revision.w0", ParamGroup::Revision, DenseMatrix::filled(1, 1, 1.0));
        params.push("classification.w0", ParamGroup::Classification, DenseMatrix::filled(1, 1, 1.0));
        let mut adam = Adam::new(&params, 0.0, 0.1, 0.0);
        let g = vec![DenseMatrix::filled(1, 1, 1.0); 2];
        adam.step(&mut params, &g).unwrap();
        assert_eq!(params.get("revision.w0").unwrap().get(0, 0), 1.0);
        assert!((params.get("classification.w0").unwrap().get(0, 0) - 0.9).abs() < 1e-7);
        assert!(adam.step(&mut params, &g[..1]).is_err());
        let mut w = DenseMatrix::zeros(1, 2);
        assert!(adam_step(&mut w, &DenseMatrix::zeros(2, 1), &mut AdamState::new(1, 2), 1, 0.1, 0.0).is_err());
    }
}
