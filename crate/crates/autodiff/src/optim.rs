use serde::{Deserialize, Serialize};

use crate::error::{invalid, AutodiffError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Bias-corrected Adam over every tensor of one [`ParamStore`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step_count: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update. Gradients are left in place.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(invalid("adam", format!("learning rate {} is negative or not finite", self.learning_rate)));
        }
        let ids: Vec<_> = store.ids().collect();
        for &id in &ids {
            if store.grad(id).is_none() {
                return Err(AutodiffError::MissingGrad(store.name(id).to_owned()));
            }
        }
        if self.first_moment.len() != ids.len() {
            self.first_moment = ids.iter().map(|&id| Tensor::zeros(store.value(id).shape())).collect();
            self.second_moment = self.first_moment.clone();
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, &id) in ids.iter().enumerate() {
            let grad = store.grad(id).expect("checked above").clone();
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            let value = store.value_mut(id).data_mut();
            for (((p, g), m), v) in value.iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let ids: Vec<_> = store.ids().collect();
    let norm = ids
        .iter()
        .filter_map(|&id| store.grad(id))
        .map(Tensor::l2_norm_sq)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for id in ids {
            if let Some(g) = store.grad_mut(id) {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
        }
    }
    norm
}
