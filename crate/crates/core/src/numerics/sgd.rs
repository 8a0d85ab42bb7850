use serde::{Deserialize, Serialize};

use super::{ParamStore, Real};
use crate::error::{Error, Result};

/// Plain SGD: no momentum, no weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
    /// Anneal to zero over this many steps with a cosine, when set.
    pub cosine_steps: Option<usize>,
    pub step: usize,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Self { lr, cosine_steps: None, step: 0 }
    }

    pub fn with_cosine(lr: f64, total_steps: usize) -> Self {
        Self { lr, cosine_steps: Some(total_steps.max(1)), step: 0 }
    }

    pub fn current_lr(&self) -> f64 {
        match self.cosine_steps {
            None => self.lr,
            Some(n) => {
                let t = (self.step.min(n)) as f64 / n as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    /// Applies and clears accumulated gradients. Frozen parameters are not
    /// touched. A non-finite gradient aborts the step before any update.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        for (_, p) in store.iter() {
            if p.trainable && p.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(p.name.clone()));
            }
        }
        let lr = T::c(self.current_lr());
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if p.trainable {
                for (w, g) in p.value.data.iter_mut().zip(&p.grad) {
                    *w = *w - lr * *g;
                }
            }
        }
        store.zero_grads();
        self.step += 1;
        Ok(())
    }
}
