use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{invalid, mismatch, Error, Result};
use crate::selector::ParamStore;
use crate::tensor::Tensor;

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Completed updates.
    pub steps: u64,
    /// First moments, aligned with the parameter store.
    pub m: Vec<Tensor>,
    /// Second moments, aligned with the parameter store.
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || -> Vec<Tensor> {
            params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect()
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update. Gradients are aligned with `params`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f32>], lr: f32) -> Result<()> {
        let rates = alloc::vec![lr; params.len()];
        self.step_with_rates(params, grads, &rates)
    }

    /// [`Adam::step`] with one learning rate per tensor.
    pub fn step_with_rates(
        &mut self,
        params: &mut ParamStore,
        grads: &[Vec<f32>],
        rates: &[f32],
    ) -> Result<()> {
        if grads.len() != params.len()
            || self.m.len() != params.len()
            || rates.len() != params.len()
        {
            return Err(invalid(
                "Adam::step",
                "gradient count does not match the parameters",
            ));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.len() != params.tensors()[i].numel() {
                return Err(mismatch(
                    "Adam::step",
                    &[g.len()],
                    params.tensors()[i].shape(),
                ));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(params.names()[i].clone()));
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - libm::powf(self.beta1, t as f32);
        let c2 = 1.0 - libm::powf(self.beta2, t as f32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((((w, g), m), v), &lr) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
            .zip(rates)
        {
            for (((w, &g), m), v) in w
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (Float::sqrt(v_hat) + eps);
            }
        }
        Ok(())
    }
}

/// `teacher ← decay·teacher + (1 − decay)·student`, per element.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, decay: f32) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(invalid("ema_update", "decay must be in [0, 1)"));
    }
    if !teacher.same_layout(student) {
        return Err(invalid("ema_update", "teacher and student layouts differ"));
    }
    for (t, s) in teacher.tensors_mut().iter_mut().zip(student.tensors()) {
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
    Ok(())
}
