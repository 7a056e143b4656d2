use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First/second moment estimates and a step counter per parameter.
///
/// Counters advance only when a parameter actually receives a gradient, so a
/// branch that sat frozen resumes with its own bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    m: Vec<Option<Matrix<T>>>,
    v: Vec<Option<Matrix<T>>>,
    steps: Vec<u64>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self {
            m: vec![None; store.len()],
            v: vec![None; store.len()],
            steps: vec![0; store.len()],
        }
    }

    pub fn steps(&self) -> &[u64] {
        &self.steps
    }
}

/// One Adam update of every parameter that has a gradient.
///
/// All gradients are checked for finiteness before anything is modified.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for &id in &ids {
        if let Some(g) = grads.param(id) {
            if g.shape() != store.value(id).shape() {
                return Err(Error::Shape(format!(
                    "gradient of `{}` is {:?}, parameter is {:?}",
                    store.get(id).name,
                    g.shape(),
                    store.value(id).shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient {
                    name: store.get(id).name.clone(),
                });
            }
        }
    }
    let (b1, b2, eps, lr) = (T::lit(BETA1), T::lit(BETA2), T::lit(EPSILON), T::lit(lr));
    for id in ids {
        let Some(g) = grads.param(id) else { continue };
        let i = id.index();
        state.steps[i] += 1;
        let t = state.steps[i] as i32;
        let (rows, cols) = g.shape();
        let m = state.m[i].get_or_insert_with(|| Matrix::zeros(rows, cols));
        let v = state.v[i].get_or_insert_with(|| Matrix::zeros(rows, cols));
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let p = store.value_mut(id).as_mut_slice();
        for (((p, &g), m), v) in p
            .iter_mut()
            .zip(g.as_slice())
            .zip(m.as_mut_slice())
            .zip(v.as_mut_slice())
        {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;

    fn one_param(v: f64) -> (ParamStore<f64>, crate::params::ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("x", ParamGroup::Probe, Matrix::filled(1, 1, v));
        (s, id)
    }

    #[test]
    fn zero_gradient_is_identity() {
        let (mut s, id) = one_param(0.7);
        let mut st = AdamState::new(&s);
        let mut g = Gradients::zeros_like(&s);
        g.set_param(id, Matrix::zeros(1, 1));
        adam_step(&mut s, &g, &mut st, 1e-3).unwrap();
        assert_eq!(s.value(id)[(0, 0)], 0.7);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        // m = 0.1, v = 0.001; bias-corrected both are 1, so the step is lr / (1 + eps)
        let (mut s, id) = one_param(0.5);
        let mut st = AdamState::new(&s);
        let mut g = Gradients::zeros_like(&s);
        g.set_param(id, Matrix::filled(1, 1, 1.0));
        adam_step(&mut s, &g, &mut st, 1e-4).unwrap();
        let expected = 0.5 - 1e-4 / (1.0 + 1e-8);
        assert!((s.value(id)[(0, 0)] - expected).abs() < 1e-15);
        assert_eq!(st.steps(), &[1]);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let (mut s, id) = one_param(0.5);
        let mut st = AdamState::new(&s);
        let mut g = Gradients::zeros_like(&s);
        g.set_param(id, Matrix::filled(1, 1, f64::NAN));
        match adam_step(&mut s, &g, &mut st, 1e-4) {
            Err(Error::NonFiniteGradient { name }) => assert_eq!(name, "x"),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.value(id)[(0, 0)], 0.5);
    }

    #[test]
    fn parameters_without_gradient_are_untouched() {
        let mut s = ParamStore::new();
        let a = s.insert("a", ParamGroup::Text, Matrix::filled(1, 2, 1.0));
        let b = s.insert("b", ParamGroup::Image, Matrix::filled(1, 2, 2.0));
        let mut st = AdamState::new(&s);
        let mut g = Gradients::zeros_like(&s);
        g.set_param(a, Matrix::filled(1, 2, 0.3));
        adam_step(&mut s, &g, &mut st, 1e-2).unwrap();
        assert_eq!(s.value(b).as_slice(), &[2.0, 2.0]);
        assert_eq!(st.steps(), &[1, 0]);
    }
}
