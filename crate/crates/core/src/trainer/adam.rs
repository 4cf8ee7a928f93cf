use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numkernel::{ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter plus the shared step counter.
/// Moments are created lazily, shaped like their parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<ParamId, Tensor>,
    pub v: BTreeMap<ParamId, Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// One bias-corrected update of every parameter that has a gradient.
    /// Any non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<ParamId, Tensor>, hp: &AdamParams) -> Result<()> {
        for (&id, g) in grads {
            if g.shape() != store.get(id).shape() {
                return Err(Error::dim("adam_step", store.get(id).shape(), g.shape()));
            }
            if let Some(j) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient for parameter {} at index {j}",
                    store.name(id)
                )));
            }
        }
        self.t += 1;
        let t = self.t as f64;
        let c1 = 1.0 - hp.beta1.powf(t);
        let c2 = 1.0 - hp.beta2.powf(t);
        for (&id, g) in grads {
            let shape = g.shape().to_vec();
            let m = self.m.entry(id).or_insert_with(|| Tensor::zeros(&shape));
            let v = self.v.entry(id).or_insert_with(|| Tensor::zeros(&shape));
            let theta = store.get_mut(id).data_mut();
            for (((th, mi), vi), &gi) in theta
                .iter_mut()
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
                .zip(g.data())
            {
                *mi = hp.beta1 * *mi + (1.0 - hp.beta1) * gi;
                *vi = hp.beta2 * *vi + (1.0 - hp.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *th -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.register("theta", Tensor::new(vec![1], vec![v]).unwrap()).unwrap();
        (s, id)
    }

    fn grad(id: ParamId, g: f64) -> BTreeMap<ParamId, Tensor> {
        BTreeMap::from([(id, Tensor::new(vec![1], vec![g]).unwrap())])
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = g and v_hat = g^2, so the step is lr * g / (|g| + eps)
        let (mut s, id) = one_param(0.0);
        let mut st = AdamState::new();
        let hp = AdamParams { lr: 0.1, ..Default::default() };
        st.step(&mut s, &grad(id, 2.0), &hp).unwrap();
        let expected = -0.1 * 2.0 / (2.0 + 1e-8);
        assert!((s.get(id).data()[0] - expected).abs() < 1e-15);
        assert!((s.get(id).data()[0] + 0.1).abs() < 1e-8);
        assert_eq!(st.t, 1);
        assert_eq!(st.m[&id].shape(), &[1]);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let (mut s, id) = one_param(1.5);
        let mut st = AdamState::new();
        st.step(&mut s, &grad(id, 0.0), &AdamParams::default()).unwrap();
        assert_eq!(s.get(id).data()[0], 1.5);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let (mut s, id) = one_param(1.0);
        let mut st = AdamState::new();
        let e = st.step(&mut s, &grad(id, f64::NAN), &AdamParams::default()).unwrap_err();
        assert!(e.to_string().contains("theta"));
        assert_eq!(st.t, 0);
        assert_eq!(s.get(id).data()[0], 1.0);
    }

    #[test]
    fn identical_histories_identical_trajectories() {
        let mut s = ParamStore::new();
        let a = s.register("a", Tensor::new(vec![1], vec![0.3]).unwrap()).unwrap();
        let b = s.register("b", Tensor::new(vec![1], vec![0.3]).unwrap()).unwrap();
        let mut st = AdamState::new();
        for k in 0..20 {
            let g = (k as f64 * 0.7).sin();
            let grads = BTreeMap::from([
                (a, Tensor::new(vec![1], vec![g]).unwrap()),
                (b, Tensor::new(vec![1], vec![g]).unwrap()),
            ]);
            st.step(&mut s, &grads, &AdamParams::default()).unwrap();
        }
        assert_eq!(s.get(a).data(), s.get(b).data());
    }
}
