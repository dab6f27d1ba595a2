//! Adam optimizer with bias correction, plus the stepped learning-rate decay
//! used by all training procedures.

use crate::autodiff::{GradMap, Real, Tensor};
use crate::params::{Bound, ParamSet};
use crate::{Error, Result};

/// Per-parameter Adam state (first/second moments) for one [`ParamSet`].
#[derive(Debug, Clone)]
pub struct AdamState<E: Real> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Tensor<E>>,
    v: Vec<Tensor<E>>,
}

impl<E: Real> AdamState<E> {
    /// Default settings: β1 = 0.9, β2 = 0.999, ε = 1e−8.
    pub fn new(params: &ParamSet<E>, lr: f64) -> Self {
        let m = params.iter().map(|(_, t)| Tensor::zeros(t.shape()).expect("parameter shapes are valid")).collect();
        let v = params.iter().map(|(_, t)| Tensor::zeros(t.shape()).expect("parameter shapes are valid")).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m, v }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Moment tensors in canonical parameter order (for checkpointing).
    pub fn moments(&self) -> (&[Tensor<E>], &[Tensor<E>]) {
        (&self.m, &self.v)
    }

    /// Rebuild optimizer state saved by [`Self::moments`]/[`Self::step_count`].
    pub fn restore(
        params: &ParamSet<E>,
        lr: f64,
        step: u64,
        m: Vec<Tensor<E>>,
        v: Vec<Tensor<E>>,
    ) -> Result<Self> {
        if m.len() != params.len() || v.len() != params.len() {
            return Err(Error::Contract(format!(
                "adam restore: {}/{} moment tensors for {} parameters",
                m.len(),
                v.len(),
                params.len()
            )));
        }
        for (i, (name, t)) in params.iter().enumerate() {
            if m[i].shape() != t.shape() || v[i].shape() != t.shape() {
                return Err(Error::Contract(format!(
                    "adam restore: moment shape mismatch for parameter {name}"
                )));
            }
        }
        Ok(Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step, m, v })
    }

    /// One update over explicit gradient tensors (parallel to the set's
    /// canonical order; `None` means the parameter did not participate and
    /// receives a zero gradient).
    pub fn step(
        &mut self,
        params: &mut ParamSet<E>,
        grads: &[Option<Tensor<E>>],
    ) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "adam: {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (E::from_f64(self.beta1), E::from_f64(self.beta2));
        let (nb1, nb2) = (E::from_f64(1.0 - self.beta1), E::from_f64(1.0 - self.beta2));
        for i in 0..params.len() {
            let g = match &grads[i] {
                Some(g) => g,
                None => continue, // zero gradient: moments decay but with m=v=0 nothing moves
            };
            if g.shape() != params.tensor_at(i).shape() {
                return Err(Error::Contract(format!(
                    "adam: gradient shape {:?} does not match parameter shape {:?}",
                    g.shape(),
                    params.tensor_at(i).shape()
                )));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.tensor_at_mut(i).data_mut();
            let gd = g.data();
            for j in 0..p.len() {
                m[j] = b1 * m[j] + nb1 * gd[j];
                v[j] = b2 * v[j] + nb2 * gd[j] * gd[j];
                let mh = m[j].as_f64() / bc1;
                let vh = v[j].as_f64() / bc2;
                p[j] -= E::from_f64(self.lr * mh / (vh.sqrt() + self.eps));
            }
        }
        Ok(())
    }

    /// Convenience: pull this set's gradients out of a backward pass and step.
    pub fn step_from(
        &mut self,
        params: &mut ParamSet<E>,
        bound: &Bound,
        grads: &mut GradMap<E>,
    ) -> Result<()> {
        let pulled: Vec<Option<Tensor<E>>> =
            bound.ids().iter().map(|id| grads.take(*id)).collect();
        self.step(params, &pulled)
    }
}

/// Stepped decay: `initial · 0.85^floor(epoch / period)`.
pub fn lr_schedule(initial: f64, epoch: usize, period: usize) -> f64 {
    let period = period.max(1);
    initial * 0.85_f64.powi((epoch / period) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(x: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::scalar(x)).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = scalar_set(0.7);
        let mut opt = AdamState::new(&p, 0.1);
        for _ in 0..5 {
            opt.step(&mut p, &[Some(Tensor::scalar(0.0))]).unwrap();
        }
        assert_eq!(p.get("x").unwrap().data()[0], 0.7);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // With a constant gradient, bias-corrected m̂/√v̂ = sign(g) on step 1.
        let mut p = scalar_set(0.0);
        let mut opt = AdamState::new(&p, 0.01);
        opt.step(&mut p, &[Some(Tensor::scalar(3.7))]).unwrap();
        let moved = p.get("x").unwrap().data()[0];
        assert!((moved + 0.01).abs() < 1e-9, "step was {moved}");
    }

    #[test]
    fn quadratic_descent_shrinks_x() {
        // f(x) = x², gradient 2x, from x = 1 with lr 0.1.
        let mut p = scalar_set(1.0);
        let mut opt = AdamState::new(&p, 0.1);
        let mut last = 1.0_f64;
        for _ in 0..10 {
            let x = p.get("x").unwrap().data()[0];
            opt.step(&mut p, &[Some(Tensor::scalar(2.0 * x))]).unwrap();
            let now = p.get("x").unwrap().data()[0].abs();
            assert!(now < last, "|x| should strictly decrease: {now} vs {last}");
            last = now;
        }
    }

    #[test]
    fn gradient_count_and_shape_are_checked() {
        let mut p = scalar_set(1.0);
        let mut opt = AdamState::new(&p, 0.1);
        assert!(opt.step(&mut p, &[]).is_err());
        assert!(opt
            .step(&mut p, &[Some(Tensor::zeros(&[2]).unwrap())])
            .is_err());
    }

    #[test]
    fn schedule_buckets() {
        assert_eq!(lr_schedule(1e-4, 0, 50), 1e-4);
        assert_eq!(lr_schedule(1e-4, 49, 50), 1e-4);
        let e100 = lr_schedule(1e-4, 100, 50);
        assert!((e100 - 1e-4 * 0.7225).abs() < 1e-18);
        // The alternative published period remains expressible.
        assert_eq!(lr_schedule(1e-4, 99, 100), 1e-4);
    }
}
