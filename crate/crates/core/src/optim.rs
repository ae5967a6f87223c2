//! Toy-training optimizers: plain gradient descent and an
//! adaptive-moment variant (β1 = 0.9, β2 = 0.999).

use crate::params::ParamSet;
use crate::tensor::Tensor;

pub enum Optimizer {
    Sgd { lr: f64 },
    Adam(AdamState),
}

pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Optimizer::Sgd { lr }
    }

    pub fn adam(lr: f64, n_params: usize) -> Self {
        Optimizer::Adam(AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![Tensor::scalar(0.0); n_params],
            v: vec![Tensor::scalar(0.0); n_params],
        })
    }

    /// Apply one step. `grads` aligns with the param entry order;
    /// `None` entries are untouched parameters.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>]) {
        match self {
            Optimizer::Sgd { lr } => {
                let lr = *lr;
                for (i, (_, t)) in params.entries_mut().iter_mut().enumerate() {
                    if let Some(g) = &grads[i] {
                        for (p, gv) in t.data_mut().iter_mut().zip(g.data()) {
                            *p -= lr * gv;
                        }
                    }
                }
            }
            Optimizer::Adam(st) => {
                st.t += 1;
                let bc1 = 1.0 - st.beta1.powi(st.t as i32);
                let bc2 = 1.0 - st.beta2.powi(st.t as i32);
                for (i, (_, t)) in params.entries_mut().iter_mut().enumerate() {
                    let g = match &grads[i] {
                        Some(g) => g,
                        None => continue,
                    };
                    if st.m[i].shape() != t.shape() {
                        st.m[i] = Tensor::zeros(t.shape());
                        st.v[i] = Tensor::zeros(t.shape());
                    }
                    let (m, v) = (st.m[i].data_mut(), st.v[i].data_mut());
                    for (j, p) in t.data_mut().iter_mut().enumerate() {
                        let gv = g.data()[j];
                        m[j] = st.beta1 * m[j] + (1.0 - st.beta1) * gv;
                        v[j] = st.beta2 * v[j] + (1.0 - st.beta2) * gv * gv;
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        *p -= st.lr * mhat / (vhat.sqrt() + st.eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_descends_a_quadratic() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::from_vec(&[2], vec![3.0, -4.0]).unwrap());
        let mut opt = Optimizer::sgd(0.1);
        for _ in 0..100 {
            let g = {
                let x = p.get("x").unwrap();
                Tensor::from_vec(&[2], x.data().iter().map(|v| 2.0 * v).collect()).unwrap()
            };
            opt.step(&mut p, &[Some(g)]);
        }
        for &v in p.get("x").unwrap().data() {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::from_vec(&[2], vec![3.0, -4.0]).unwrap());
        let mut opt = Optimizer::adam(0.2, 1);
        for _ in 0..300 {
            let g = {
                let x = p.get("x").unwrap();
                Tensor::from_vec(&[2], x.data().iter().map(|v| 2.0 * v).collect()).unwrap()
            };
            opt.step(&mut p, &[Some(g)]);
        }
        for &v in p.get("x").unwrap().data() {
            assert!(v.abs() < 1e-2);
        }
    }
}
