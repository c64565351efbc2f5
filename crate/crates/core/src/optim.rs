//! Adam with bias correction.

use alloc::string::ToString;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor<f64>>,
    pub v: Vec<Tensor<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new<T: Real>(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<f64>> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamState { m: zeros.clone(), v: zeros, step: 0 }
    }

    /// One update of every parameter in `params` from `grads` (store order).
    /// Non-finite gradients abort before anything is modified.
    pub fn step<T: Real>(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::invalid("gradient count does not match parameters"));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape("adam_step", alloc::format!("`{name}`: {:?} vs {:?}", p.shape(), g.shape())));
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient { name: name.to_string() });
            }
        }
        self.step += 1;
        let bc1 = 1.0 - libm::pow(BETA1, self.step as f64);
        let bc2 = 1.0 - libm::pow(BETA2, self.step as f64);
        for (k, (_, p)) in params.iter_mut().enumerate() {
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (i, (pv, gv)) in p.data_mut().iter_mut().zip(grads[k].data()).enumerate() {
                let g = gv.to_f64();
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
                if lr != 0.0 {
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    *pv = T::from_f64(pv.to_f64() - lr * m_hat / (libm::sqrt(v_hat) + EPS));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(v)).unwrap();
        s
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut s = store(0.731);
        let before = s.clone();
        let mut st = AdamState::new(&s);
        st.step(&mut s, &[Tensor::scalar(0.4)], 0.0).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn first_step_matches_bias_corrected_arithmetic() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::scalar(0.0)).unwrap();
        let mut st = AdamState::new(&s);
        st.step(&mut s, &[Tensor::scalar(1.0)], 1e-3).unwrap();
        let delta = s.get("w").unwrap().data()[0];
        assert!((delta - (-1e-3 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((delta + 9.99999e-4).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let mut s = store(1.5);
        let mut st = AdamState::new(&s);
        st.step(&mut s, &[Tensor::scalar(2.0)], 1e-3).unwrap();
        let after_first = s.clone();
        let (m1, v1) = (st.m[0].data()[0], st.v[0].data()[0]);
        let mut zero = ParamStore::<f32>::new();
        zero.insert("w", Tensor::scalar(1.5)).unwrap();
        let mut zst = AdamState::new(&zero);
        zst.step(&mut zero, &[Tensor::scalar(0.0)], 1e-3).unwrap();
        assert_eq!(zero.get("w").unwrap().data(), &[1.5]);
        st.step(&mut s, &[Tensor::scalar(0.0)], 0.0).unwrap();
        assert_eq!(s, after_first);
        assert!((st.m[0].data()[0] - BETA1 * m1).abs() < 1e-15);
        assert!((st.v[0].data()[0] - BETA2 * v1).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut s = store(1.0);
        let mut st = AdamState::new(&s);
        let err = st.step(&mut s, &[Tensor::scalar(f32::NAN)], 1e-3).unwrap_err();
        assert_eq!(err, Error::NonFiniteGradient { name: "w".into() });
        assert_eq!(s.get("w").unwrap().data(), &[1.0]);
        assert_eq!(st.step, 0);
    }
}
