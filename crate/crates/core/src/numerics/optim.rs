use crate::error::{Error, Result};
use crate::numerics::{Float, ParamStore};

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamW {
    pub fn with_weight_decay(weight_decay: f64) -> Self {
        Self {
            weight_decay,
            ..Self::default()
        }
    }

    /// One update of every parameter from its accumulated `grad`. The decay
    /// `p -= lr * wd * p` is applied before the moment-based step.
    pub fn step<T: Float>(&self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        self.apply(store, lr);
        Ok(())
    }

    /// Same as [`AdamW::step`] but accepts `lr == 0` (the first and last
    /// steps of a warmup/decay schedule), which still advances the moments.
    pub fn scheduled_step<T: Float>(&self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate must be non-negative, got {lr}")));
        }
        self.apply(store, lr);
        Ok(())
    }

    fn apply<T: Float>(&self, store: &mut ParamStore<T>, lr: f64) {
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let decay = T::from_f64(1.0 - lr * self.weight_decay);
        let eps = T::from_f64(self.eps);
        for p in store.iter_mut() {
            p.step += 1;
            let t = p.step as i32;
            let c1 = T::from_f64(1.0 - self.beta1.powi(t));
            let c2 = T::from_f64(1.0 - self.beta2.powi(t));
            let lr_t = T::from_f64(lr);
            let value = p.value.data_mut();
            let grad = p.grad.data();
            let m = p.first_moment.data_mut();
            let v = p.second_moment.data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                value[i] = value[i] * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
