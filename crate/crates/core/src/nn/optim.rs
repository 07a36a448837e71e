use ndarray::Array2;

use super::params::ParamStore;
use super::Mat;
use crate::error::{Error, Result};

/// AdamW state bound to the tensor layout of one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamW {
    pub step: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Round parameters to `f32` after every update.
    pub f32_params: bool,
    moments: Vec<(Mat, Mat)>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        Self {
            step: 0,
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            f32_params: false,
            moments: store
                .tensors()
                .iter()
                .map(|t| (Array2::zeros(t.value.dim()), Array2::zeros(t.value.dim())))
                .collect(),
        }
    }

    /// One decoupled-weight-decay Adam update from the gradients currently
    /// stored in `store`. Gradients are left untouched.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.moments.len() {
            return Err(Error::invalid("optimizer bound to a different parameter layout"));
        }
        if let Some(t) = store.tensors().iter().find(|t| t.grad.iter().any(|g| !g.is_finite())) {
            return Err(Error::TrainingDivergence(format!("non-finite gradient in {}", t.name)));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps, lr, wd) = (self.beta1, self.beta2, self.eps, self.lr, self.weight_decay);
        for (t, (m, v)) in store.tensors_mut().iter_mut().zip(self.moments.iter_mut()) {
            ndarray::Zip::from(&mut t.value)
                .and(&t.grad)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * wd * *p;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
        if self.f32_params {
            store.round_to_f32();
        }
        Ok(())
    }
}

/// Linear warm-up from 0 to `base_lr` over `warmup_steps`, then half-cosine
/// decay to 0 at `total_steps`.
pub fn cosine_warmup_lr(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if step >= total_steps {
        return 0.0;
    }
    let span = (total_steps - warmup_steps).max(1) as f64;
    let progress = (step - warmup_steps) as f64 / span;
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}
