use super::{ModelParams, Scalar};
use crate::error::{Error, Result};

/// AMSGrad: Adam with bias correction whose denominator uses the running
/// entrywise maximum of the second-moment estimate.
#[derive(Clone, Debug)]
pub struct AmsGrad {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
    v_max: Vec<f64>,
}

impl AmsGrad {
    pub fn new(n_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            v_max: vec![0.0; n_params],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    pub fn max_second_moment(&self) -> &[f64] {
        &self.v_max
    }

    pub fn step<T: Scalar>(&mut self, params: &mut ModelParams<T>, grads: &[T], lr: f64) -> Result<()> {
        let theta = params.as_mut_slice();
        if theta.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch(format!(
                "optimizer tracks {} parameters, got {} params and {} grads",
                self.m.len(),
                theta.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2_sqrt = (1.0 - b2.powi(self.step as i32)).sqrt();
        let step_size = lr / bc1;
        for i in 0..theta.len() {
            let g = grads[i].f64();
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            self.v_max[i] = self.v_max[i].max(self.v[i]);
            let denom = self.v_max[i].sqrt() / bc2_sqrt + self.eps;
            theta[i] = T::of(theta[i].f64() - step_size * self.m[i] / denom);
        }
        Ok(())
    }
}
