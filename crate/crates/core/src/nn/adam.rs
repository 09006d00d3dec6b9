use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moments are kept in `f64`.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<T: Real>(config: AdamConfig, params: &[&Tensor<T>]) -> Self {
        Self {
            config,
            step: 0,
            first: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    /// One update. Fails, leaving parameters untouched, if any gradient is non-finite.
    pub fn step<T: Real>(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], names: &[String]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::Shape("parameter/gradient list length mismatch".into()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.len() != self.first[i].len() {
                return Err(Error::Shape(format!("gradient shape mismatch for parameter {i}")));
            }
            if !g.is_finite() {
                let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
                return Err(Error::NonFiniteGradient(name));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, (pv, gv)) in p.data.iter_mut().zip(&g.data).enumerate() {
                let gv = gv.to_f64_lossy();
                m[j] = beta1 * m[j] + (1.0 - beta1) * gv;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gv * gv;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let upd = lr * mhat / (vhat.sqrt() + eps);
                *pv = T::lit(pv.to_f64_lossy() - upd);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names() -> Vec<String> {
        vec!["w".into()]
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::new(vec![3], vec![1.0f64, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(AdamConfig::with_lr(0.01), &[&p]);
        st.step(&mut [&mut p], &[Tensor::zeros(&[3])], &names()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        let mut p = Tensor::new(vec![3], vec![0.0f64; 3]).unwrap();
        let mut st = AdamState::new(AdamConfig::with_lr(0.005), &[&p]);
        let g = Tensor::new(vec![3], vec![2.0, -0.3, 1e-3]).unwrap();
        st.step(&mut [&mut p], &[g], &names()).unwrap();
        assert!((p.data[0] + 0.005).abs() < 1e-8);
        assert!((p.data[1] - 0.005).abs() < 1e-8);
        assert!((p.data[2] + 0.005).abs() < 1e-7);
    }

    #[test]
    fn two_steps_match_hand_evaluated_recurrence() {
        // Hand evaluation with g = 0.5, lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8:
        // step 1: m = 0.05, v = 0.00025, mhat = 0.5, vhat = 0.25 → Δ = 0.1·0.5/(0.5+1e-8)
        // step 2: m = 0.095, v = 0.00049975, mhat = 0.095/0.19 = 0.5,
        //         vhat = 0.00049975/0.001999 = 0.25 → same Δ again.
        let d = 0.1 * 0.5 / (0.5 + 1e-8);
        let mut p = Tensor::new(vec![1], vec![1.0f64]).unwrap();
        let mut st = AdamState::new(AdamConfig::with_lr(0.1), &[&p]);
        let g = Tensor::new(vec![1], vec![0.5]).unwrap();
        st.step(&mut [&mut p], std::slice::from_ref(&g), &names()).unwrap();
        assert!((p.data[0] - (1.0 - d)).abs() < 1e-12);
        st.step(&mut [&mut p], &[g], &names()).unwrap();
        assert!((p.data[0] - (1.0 - 2.0 * d)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = Tensor::new(vec![1], vec![1.0f32]).unwrap();
        let mut st = AdamState::new(AdamConfig::with_lr(0.1), &[&p]);
        let err = st.step(&mut [&mut p], &[Tensor::new(vec![1], vec![f32::NAN]).unwrap()], &names());
        match err {
            Err(Error::NonFiniteGradient(n)) => assert_eq!(n, "w"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(p.data[0], 1.0);
    }
}
