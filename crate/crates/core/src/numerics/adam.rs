use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Optimizer hyperparameters shared by every parameter group of a client.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config_key("lr", "learning rate must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config_key("beta1", "betas must lie in [0,1)"));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::config_key("eps", "eps must be > 0, weight_decay >= 0"));
        }
        Ok(())
    }
}

/// Moment buffers for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step: u64,
    pub cfg: AdamConfig,
}

impl<T: Real> AdamState<T> {
    pub fn new(like: &Tensor<T>, cfg: AdamConfig) -> Self {
        Self {
            m: Tensor::zeros_like(like),
            v: Tensor::zeros_like(like),
            step: 0,
            cfg,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut Tensor<T>, grads: &Tensor<T>) -> Result<()> {
        params.same_dims(grads)?;
        params.same_dims(&self.m)?;
        if !grads.all_finite() {
            return Err(Error::numeric("non-finite gradient passed to Adam"));
        }
        self.step += 1;
        let c = &self.cfg;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let wd = T::lit(c.weight_decay);
        let lr = T::lit(c.lr);
        let eps = T::lit(c.eps);
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let one = T::one();
        let p = params.data_mut();
        let m = self.m.data_mut();
        let v = self.v.data_mut();
        for (i, &g) in grads.data().iter().enumerate() {
            let g = g + wd * p[i];
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let m_hat = if bc1 > T::zero() { m[i] / bc1 } else { m[i] };
            let v_hat = v[i] / bc2;
            p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(wd: f64) -> AdamConfig {
        AdamConfig {
            weight_decay: wd,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn zero_grad_without_decay_is_noop() {
        let mut p = Tensor::new(&[3], vec![1.0f64, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut s = AdamState::new(&p, cfg(0.0));
        s.step(&mut p, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_is_sign_scaled_lr() {
        let mut p = Tensor::new(&[2], vec![0.0f64, 0.0]).unwrap();
        let g = Tensor::new(&[2], vec![0.3, -2.0]).unwrap();
        let mut s = AdamState::new(&p, cfg(0.0));
        s.step(&mut p, &g).unwrap();
        // m̂ = g, v̂ = g² after bias correction.
        for (pv, gv) in p.data().iter().zip(g.data()) {
            let expect = -1e-3 * gv / (gv.abs() + 1e-8);
            assert!((pv - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn two_steps_constant_grad_match_unrolled_recurrence() {
        let g = 0.7f64;
        let c = cfg(0.0);
        let mut p = Tensor::new(&[1], vec![1.0]).unwrap();
        let mut s = AdamState::new(&p, c);
        let grads = Tensor::new(&[1], vec![g]).unwrap();
        s.step(&mut p, &grads).unwrap();
        s.step(&mut p, &grads).unwrap();

        let (b1, b2) = (c.beta1, c.beta2);
        let mut theta = 1.0;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            theta -= c.lr * mh / (vh.sqrt() + c.eps);
        }
        assert!((p.data()[0] - theta).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_couples_into_gradient() {
        let mut p = Tensor::new(&[1], vec![2.0f64]).unwrap();
        let mut s = AdamState::new(&p, cfg(0.5));
        s.step(&mut p, &Tensor::zeros(&[1])).unwrap();
        // effective gradient 0.5·2 = 1 → first step moves by −lr.
        assert!((p.data()[0] - (2.0 - 1e-3 * 1.0 / (1.0 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut p = Tensor::new(&[1], vec![0.0f32]).unwrap();
        let mut s = AdamState::new(&p, cfg(0.0));
        let g = Tensor::new(&[1], vec![f32::NAN]).unwrap();
        assert!(matches!(s.step(&mut p, &g), Err(Error::Numeric(_))));
        assert_eq!(s.step, 0);
    }
}
