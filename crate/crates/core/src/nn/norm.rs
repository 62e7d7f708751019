use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Bind, Mode, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Weight of the previous running estimate in each batch-norm update.
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormKind {
    Batch,
    Instance,
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormKind::Batch => "batch",
            NormKind::Instance => "instance",
        })
    }
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" | "bn" => Ok(NormKind::Batch),
            "instance" | "in" => Ok(NormKind::Instance),
            _ => Err(Error::invalid(format!("unknown norm kind `{s}`"))),
        }
    }
}

/// Affine batch or instance normalization.
///
/// Batch kind keeps running statistics, refreshed only in [`Mode::Train`] and
/// used in [`Mode::Eval`]. Instance kind always uses the sample's own statistics.
#[derive(Clone, Debug)]
pub struct NormLayer<T> {
    pub kind: NormKind,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Scalar> NormLayer<T> {
    pub fn new(store: &mut ParamStore<T>, path: &str, kind: NormKind, channels: usize, group: ParamGroup) -> Result<Self> {
        let gamma = store.add_const(&format!("{path}.gamma"), &[channels], 1.0, group)?;
        let beta = store.add_const(&format!("{path}.beta"), &[channels], 0.0, group)?;
        Ok(NormLayer {
            kind,
            gamma,
            beta,
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::of(BN_MOMENTUM),
            eps: T::of(BN_EPSILON),
        })
    }

    pub fn forward(&mut self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, bind: Bind) -> Result<Var> {
        let gamma = store.bind(g, self.gamma, bind.trainable);
        let beta = store.bind(g, self.beta, bind.trainable);
        if self.kind == NormKind::Batch && bind.mode == Mode::Eval {
            return g.channel_affine(x, gamma, beta, &self.running_mean, &self.running_var, self.eps);
        }
        let (y, stats) = g.normalize(x, gamma, beta, self.kind, self.eps)?;
        if let (Some(s), Mode::Train) = (stats, bind.mode) {
            let m = self.momentum;
            let unbias = T::of(s.count as f64 / (s.count - 1) as f64);
            for c in 0..self.running_mean.len() {
                self.running_mean[c] = m * self.running_mean[c] + (T::one() - m) * s.mean[c];
                self.running_var[c] = m * self.running_var[c] + (T::one() - m) * s.var[c] * unbias;
            }
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::tensor::Tensor;

    fn run(layer: &mut NormLayer<f64>, store: &ParamStore<f64>, x: &Tensor<f64>, mode: Mode) -> Tensor<f64> {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = layer.forward(&mut g, store, xv, Bind::frozen(mode)).unwrap();
        g.tensor(y).unwrap()
    }

    fn layer(kind: NormKind, c: usize) -> (ParamStore<f64>, NormLayer<f64>) {
        let mut store = ParamStore::new(1);
        let l = NormLayer::new(&mut store, "n", kind, c, ParamGroup::Base).unwrap();
        (store, l)
    }

    #[test]
    fn constant_input_maps_to_zero() {
        for kind in [NormKind::Batch, NormKind::Instance] {
            let (store, mut l) = layer(kind, 2);
            let y = run(&mut l, &store, &Tensor::full(&[2, 2, 3, 3], 4.2).unwrap(), Mode::Sample);
            assert!(y.values().iter().all(|&v| v.abs() < 1e-9));
        }
    }

    #[test]
    fn batch_output_is_standardized() {
        let (store, mut l) = layer(NormKind::Batch, 3);
        let x = Tensor::from_fn(&[4, 3, 5, 5], |i| ((i * 7919) % 101) as f64 * 0.3 + 5.0).unwrap();
        let y = run(&mut l, &store, &x, Mode::Sample);
        for c in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|n| y.values()[(n * 3 + c) * 25..][..25].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn identical_batch_matches_instance() {
        let img = Tensor::from_fn(&[1, 2, 4, 4], |i| (i as f64 * 0.37).sin()).unwrap();
        let x = Tensor::cat_batch(&[&img, &img, &img]).unwrap();
        let (sb, mut b) = layer(NormKind::Batch, 2);
        let (si, mut i) = layer(NormKind::Instance, 2);
        let yb = run(&mut b, &sb, &x, Mode::Sample);
        let yi = run(&mut i, &si, &x, Mode::Sample);
        assert!(yb.max_abs_diff(&yi).unwrap() < 1e-12);
    }

    #[test]
    fn running_stats_follow_modes() {
        let (store, mut l) = layer(NormKind::Batch, 1);
        let x = Tensor::new(&[1, 1, 1, 4], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        run(&mut l, &store, &x, Mode::Sample);
        assert_eq!(l.running_mean, vec![0.0]);
        run(&mut l, &store, &x, Mode::Train);
        // batch mean 3, unbiased variance 14/3
        assert!((l.running_mean[0] - 0.3).abs() < 1e-12);
        assert!((l.running_var[0] - (0.9 + 0.1 * 14.0 / 3.0)).abs() < 1e-12);
        let a = run(&mut l, &store, &x, Mode::Eval);
        let b = run(&mut l, &store, &x, Mode::Eval);
        assert_eq!(a, b);
        let expect = (1.0 - 0.3) / (l.running_var[0] + 1e-5).sqrt();
        assert!((a.values()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn too_few_elements_is_an_error() {
        let (store, mut l) = layer(NormKind::Instance, 1);
        let mut g = Graph::new();
        let xv = g.constant(&Tensor::ones(&[4, 1, 1, 1]).unwrap());
        assert!(l.forward(&mut g, &store, xv, Bind::frozen(Mode::Train)).is_err());
    }

    #[test]
    fn gradients_pass_finite_differences() {
        let gamma = Tensor::new(&[2], vec![1.3, -0.7]).unwrap();
        let beta = Tensor::new(&[2], vec![0.2, 0.5]).unwrap();
        let w = Tensor::from_fn(&[2, 2, 3, 3], |i| (i as f64 * 1.1).cos()).unwrap();
        let x = Tensor::from_fn(&[2, 2, 3, 3], |i| (i as f64 * 0.53).sin() + 0.1 * i as f64).unwrap();
        for kind in [NormKind::Batch, NormKind::Instance] {
            let f = |g: &mut Graph<f64>, xv: Var| {
                let (gv, bv, wv) = (g.constant(&gamma), g.constant(&beta), g.constant(&w));
                let (y, _) = g.normalize(xv, gv, bv, kind, 1e-5)?;
                let p = g.mul(y, wv)?;
                g.sum(p)
            };
            assert!(grad_check(f, &x, 1e-5).unwrap() < 1e-4, "{kind}");
            let fg = |g: &mut Graph<f64>, gv: Var| {
                let (xv, bv, wv) = (g.constant(&x), g.constant(&beta), g.constant(&w));
                let (y, _) = g.normalize(xv, gv, bv, kind, 1e-5)?;
                let p = g.mul(y, wv)?;
                g.sum(p)
            };
            assert!(grad_check(fg, &gamma, 1e-5).unwrap() < 1e-4);
            let fb = |g: &mut Graph<f64>, bv: Var| {
                let (xv, gv, wv) = (g.constant(&x), g.constant(&gamma), g.constant(&w));
                let (y, _) = g.normalize(xv, gv, bv, kind, 1e-5)?;
                let p = g.mul(y, wv)?;
                g.sum(p)
            };
            assert!(grad_check(fb, &beta, 1e-5).unwrap() < 1e-4);
        }
        let mean = [0.3, -0.1];
        let var = [1.5, 0.4];
        let fa = |g: &mut Graph<f64>, xv: Var| {
            let (gv, bv, wv) = (g.constant(&gamma), g.constant(&beta), g.constant(&w));
            let y = g.channel_affine(xv, gv, bv, &mean, &var, 1e-5)?;
            let p = g.mul(y, wv)?;
            g.sum(p)
        };
        assert!(grad_check(fa, &x, 1e-5).unwrap() < 1e-4);
    }
}
