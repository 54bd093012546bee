use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::ParamStore;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.m.len() || grads.len() != store.len() {
            return Err(Error::Contract(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((param, g), m), v) in store.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if g.len() != m.len() {
                return Err(Error::Contract(format!("gradient shape mismatch for {}", param.name)));
            }
            for (((p, &g), m), v) in param.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{InteractionMoe, ModelConfig};

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut model = InteractionMoe::new(ModelConfig::new(vec![2, 3], 2), 0).unwrap();
        let before = model.params().flatten();
        let grads: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        let mut adam = Adam::new(model.params(), 1e-3);
        adam.step(model.params_mut(), &grads).unwrap();
        assert_eq!(model.params().flatten(), before);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut model = InteractionMoe::new(ModelConfig::new(vec![2, 2], 2), 0).unwrap();
        let before = model.params().flatten();
        let grads: Vec<Tensor> = model.params().iter().map(|p| p.value.map(|_| 0.5)).collect();
        let mut adam = Adam::new(model.params(), 0.01);
        adam.step(model.params_mut(), &grads).unwrap();
        for (a, b) in model.params().flatten().iter().zip(before) {
            assert!((b - a - 0.01).abs() < 1e-9);
        }
        assert!(adam.step(model.params_mut(), &grads[1..]).is_err());
    }
}
