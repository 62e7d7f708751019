use crate::error::{Error, Result};
use crate::nn::{ParamEntry, ParamStore};

/// Moment estimates of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamSlot {
    pub fn new(len: usize) -> Self {
        AdamSlot { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64, beta1: f64, beta2: f64, eps: f64) {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}

/// Adam over every parameter of one store, with a step counter per parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub slots: Vec<AdamSlot>,
}

impl Adam {
    pub fn new(store: &ParamStore<f64>, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam { beta1, beta2, eps, slots: store.entries().iter().map(|e| AdamSlot::new(e.tensor.len())).collect() }
    }

    /// Applies the accumulated gradients of the parameters selected by `active`,
    /// then clears all gradients. Parameters without a gradient are left alone.
    pub fn step(&mut self, store: &mut ParamStore<f64>, lr: f64, active: impl Fn(&ParamEntry<f64>) -> bool) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for &id in &ids {
            let e = store.entry(id);
            if !active(e) {
                continue;
            }
            let Some(g) = e.tensor.grad() else { continue };
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{}` contains {bad}", e.path)));
            }
            let g = g.to_vec();
            self.slots[id.index()].update(store.get_mut(id).values_mut(), &g, lr, self.beta1, self.beta2, self.eps);
        }
        store.zero_grad();
        Ok(())
    }
}
