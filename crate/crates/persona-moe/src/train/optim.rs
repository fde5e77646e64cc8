//! Adaptive moment estimation with bias correction, no weight decay.
//! Moment buffers live in f64 regardless of parameter precision and are
//! keyed by parameter name, so any subset of parameters may be updated in
//! any stage without slot collisions.

use std::collections::HashMap;

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        AdamParams { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

pub struct Adam {
    hp: AdamParams,
    t: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(hp: AdamParams) -> Self {
        Adam { hp, t: 0, m: HashMap::new(), v: HashMap::new() }
    }

    /// Advance the shared timestep; call once per optimizer step, before
    /// the per-parameter updates of that step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn update<F: Real>(&mut self, name: &str, param: &mut Tensor<F>, grad: &[F]) -> Result<()> {
        assert!(self.t > 0, "update before begin_step");
        let n = param.numel();
        if grad.len() != n {
            return Err(Error::ParamShape {
                name: name.to_string(),
                expected: param.shape().to_vec(),
                found: vec![grad.len()],
            });
        }
        if grad.iter().any(|g| !g.as_f64().is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let (b1, b2) = (self.hp.beta1, self.hp.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let data = param.data_mut();
        for i in 0..n {
            let g = grad[i].as_f64();
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let update = self.hp.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.hp.eps);
            data[i] = F::real(data[i].as_f64() - update);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_in_grad_direction() {
        // With bias correction, step 1 is p -= lr * g/(|g| + eps') ~= lr * sign(g).
        let mut adam = Adam::new(AdamParams::with_lr(0.1));
        let mut p = Tensor::vector(vec![1.0f64, -2.0]);
        adam.begin_step();
        adam.update("p", &mut p, &[0.5, -0.25]).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-6, "{}", p.data()[0]);
        assert!((p.data()[1] + 1.9).abs() < 1e-6, "{}", p.data()[1]);
    }

    #[test]
    fn slots_are_independent_per_name() {
        let mut adam = Adam::new(AdamParams::with_lr(0.1));
        let mut a = Tensor::vector(vec![0.0f64]);
        let mut b = Tensor::vector(vec![0.0f64]);
        for _ in 0..3 {
            adam.begin_step();
            adam.update("a", &mut a, &[1.0]).unwrap();
        }
        adam.begin_step();
        adam.update("b", &mut b, &[1.0]).unwrap();
        // b's fresh moments make its first move the standard step-1 size
        // even though the shared timestep is 4.
        assert!(b.data()[0] < 0.0);
        assert!(a.data()[0] < b.data()[0]);
    }

    #[test]
    fn shape_and_nan_guards() {
        let mut adam = Adam::new(AdamParams::with_lr(0.1));
        let mut p = Tensor::vector(vec![0.0f64, 0.0]);
        adam.begin_step();
        assert!(matches!(
            adam.update("p", &mut p, &[1.0]),
            Err(Error::ParamShape { .. })
        ));
        assert!(matches!(
            adam.update("p", &mut p, &[f64::NAN, 0.0]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn quadratic_bowl_converges() {
        // Minimize f(x) = sum x^2 from x = (3, -4).
        let mut adam = Adam::new(AdamParams::with_lr(0.05));
        let mut x = Tensor::vector(vec![3.0f64, -4.0]);
        for _ in 0..2000 {
            let g: Vec<f64> = x.data().iter().map(|&v| 2.0 * v).collect();
            adam.begin_step();
            adam.update("x", &mut x, &g).unwrap();
        }
        assert!(x.data().iter().all(|v| v.abs() < 1e-3), "{:?}", x.data());
    }
}
