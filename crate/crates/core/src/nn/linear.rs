use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::nn::{Bind, Mode, ParamGroup, ParamId, ParamStore, SpectralState, TRAIN_POWER_ITERS};
use crate::scalar::Scalar;

/// Fully connected layer over flattened inputs; output is `(n, out, 1, 1)`.
#[derive(Clone, Debug)]
pub struct LinearLayer<T> {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spectral: Option<SpectralState<T>>,
}

impl<T: Scalar> LinearLayer<T> {
    pub fn new(store: &mut ParamStore<T>, path: &str, features: usize, out: usize, spectral: bool, group: ParamGroup) -> Result<Self> {
        let bound = 1.0 / (features as f64).sqrt();
        let weight = store.add_uniform(&format!("{path}.weight"), &[out, features], bound, group)?;
        let bias = store.add_const(&format!("{path}.bias"), &[out], 0.0, group)?;
        let spectral = if spectral {
            let u0 = store.normal_state(&format!("{path}.weight.u"), out);
            Some(SpectralState::new(store.get(weight), u0, TRAIN_POWER_ITERS)?)
        } else {
            None
        };
        Ok(LinearLayer { weight, bias, spectral })
    }

    pub fn forward(&mut self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, bind: Bind) -> Result<Var> {
        let mut w = store.bind(g, self.weight, bind.trainable);
        if let Some(sn) = &mut self.spectral {
            w = sn.bind(g, w, bind.mode == Mode::Train)?;
        }
        let b = store.bind(g, self.bias, bind.trainable);
        let y = g.linear(x, w, Some(b))?;
        let out = g.shape(y)?.to_vec();
        g.reshape(y, &[out[0], out[1], 1, 1])
    }
}
