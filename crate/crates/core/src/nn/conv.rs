use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Bind, Mode, ParamGroup, ParamId, ParamStore, SpectralState, TRAIN_POWER_ITERS};
use crate::scalar::Scalar;

/// Stride, zero padding and dilation (atrous rate) of a square kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, pad: usize, dilation: usize) -> Self {
        ConvGeom { stride, pad, dilation }
    }

    /// Stride-1 padding that keeps the spatial size for an odd kernel.
    pub fn same(k: usize, dilation: usize) -> Self {
        ConvGeom { stride: 1, pad: dilation * (k - 1) / 2, dilation }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.dilation == 0 {
            return Err(Error::invalid(format!("stride and dilation must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Graph handles of a bound convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Option<Var>,
    pub geom: ConvGeom,
    pub transposed: bool,
}

impl ConvVars {
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        if self.transposed {
            g.conv_transpose2d(x, self.weight, self.bias, self.geom)
        } else {
            g.conv2d(x, self.weight, self.bias, self.geom)
        }
    }
}

/// Convolution (or transposed convolution) with optional spectral normalization.
///
/// Weight layout is `(c_out, c_in, k, k)` for convolution and
/// `(c_in, c_out, k, k)` for the transpose.
#[derive(Clone, Debug)]
pub struct ConvLayer<T> {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeom,
    pub transposed: bool,
    pub spectral: Option<SpectralState<T>>,
}

impl<T: Scalar> ConvLayer<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore<T>,
        path: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        geom: ConvGeom,
        transposed: bool,
        spectral: bool,
        group: ParamGroup,
    ) -> Result<Self> {
        geom.validate()?;
        if k == 0 || c_in == 0 || c_out == 0 {
            return Err(Error::invalid(format!("{path}: kernel and channel counts must be positive")));
        }
        let shape = if transposed { [c_in, c_out, k, k] } else { [c_out, c_in, k, k] };
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        let weight = store.add_uniform(&format!("{path}.weight"), &shape, bound, group)?;
        let bias = store.add_const(&format!("{path}.bias"), &[c_out], 0.0, group)?;
        let spectral = if spectral {
            let u0 = store.normal_state(&format!("{path}.weight.u"), shape[0]);
            Some(SpectralState::new(store.get(weight), u0, TRAIN_POWER_ITERS)?)
        } else {
            None
        };
        Ok(ConvLayer { weight, bias, geom, transposed, spectral })
    }

    pub fn kernel(&self, store: &ParamStore<T>) -> usize {
        store.get(self.weight).shape()[2]
    }

    pub fn bind(&mut self, g: &mut Graph<T>, store: &ParamStore<T>, bind: Bind) -> Result<ConvVars> {
        let mut weight = store.bind(g, self.weight, bind.trainable);
        if let Some(sn) = &mut self.spectral {
            weight = sn.bind(g, weight, bind.mode == Mode::Train)?;
        }
        let bias = Some(store.bind(g, self.bias, bind.trainable));
        Ok(ConvVars { weight, bias, geom: self.geom, transposed: self.transposed })
    }

    pub fn forward(&mut self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, bind: Bind) -> Result<Var> {
        self.bind(g, store, bind)?.apply(g, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::kernels::conv_out_size;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    /// Direct nested-loop cross-correlation.
    fn reference_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], geom: ConvGeom) -> Tensor<f64> {
        let (n, ci, h, wd) = x.dims4().unwrap();
        let (co, _, k, _) = w.dims4().unwrap();
        let ho = conv_out_size(h, k, geom.stride, geom.pad, geom.dilation).unwrap();
        let wo = conv_out_size(wd, k, geom.stride, geom.pad, geom.dilation).unwrap();
        let xv = x.values();
        let wv = w.values();
        let mut out = vec![0.0; n * co * ho * wo];
        for s in 0..n {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[o];
                        for c in 0..ci {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * geom.stride + ki * geom.dilation) as isize - geom.pad as isize;
                                    let ix = (ox * geom.stride + kj * geom.dilation) as isize - geom.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += wv[((o * ci + c) * k + ki) * k + kj] * xv[((s * ci + c) * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                        out[((s * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        Tensor::new(&[n, co, ho, wo], out).unwrap()
    }

    fn pseudo(shape: &[usize], salt: usize) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| (((i + salt) * 2654435761) % 1000) as f64 / 500.0 - 1.0).unwrap()
    }

    fn conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, geom: ConvGeom) -> Result<Tensor<f64>> {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let wv = g.constant(w);
        let bv = b.map(|b| g.constant(b));
        let y = g.conv2d(xv, wv, bv, geom)?;
        g.tensor(y)
    }

    fn conv_t(x: &Tensor<f64>, w: &Tensor<f64>, geom: ConvGeom) -> Tensor<f64> {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let wv = g.constant(w);
        let y = g.conv_transpose2d(xv, wv, None, geom).unwrap();
        g.tensor(y).unwrap()
    }

    #[test]
    fn one_by_one_identity_kernel() {
        let x = pseudo(&[2, 1, 5, 4], 3);
        let w = Tensor::ones(&[1, 1, 1, 1]).unwrap();
        assert_eq!(conv(&x, &w, None, ConvGeom::new(1, 0, 1)).unwrap(), x);
    }

    #[test]
    fn all_ones_kernel_sums_patch() {
        let x = Tensor::ones(&[1, 1, 3, 3]).unwrap();
        let w = Tensor::ones(&[1, 1, 3, 3]).unwrap();
        let b = Tensor::new(&[1], vec![0.5]).unwrap();
        let y = conv(&x, &w, Some(&b), ConvGeom::new(1, 0, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.values(), &[9.5]);
    }

    #[test]
    fn dilated_taps_on_ramp() {
        let x = Tensor::from_fn(&[1, 1, 5, 5], |i| i as f64).unwrap();
        let w = Tensor::ones(&[1, 1, 3, 3]).unwrap();
        let y = conv(&x, &w, None, ConvGeom::new(1, 0, 2)).unwrap();
        // taps at rows/cols {0, 2, 4}
        let expect: f64 = [0, 2, 4].iter().flat_map(|r| [0, 2, 4].iter().map(move |c| (r * 5 + c) as f64)).sum();
        assert_eq!(y.values(), &[expect]);
        assert_eq!(y.values(), reference_conv(&x, &w, &[0.0], ConvGeom::new(1, 0, 2)).values());
    }

    #[test]
    fn errors_on_channel_mismatch_and_empty_output() {
        let x = pseudo(&[1, 2, 4, 4], 0);
        assert!(conv(&x, &pseudo(&[1, 3, 3, 3], 0), None, ConvGeom::new(1, 1, 1)).is_err());
        assert!(conv(&x, &pseudo(&[1, 2, 3, 3], 0), None, ConvGeom::new(1, 0, 3)).is_err());
    }

    #[test]
    fn transpose_shape_and_identity() {
        let x = pseudo(&[1, 2, 16, 16], 1);
        let w = pseudo(&[2, 3, 4, 4], 2);
        assert_eq!(conv_t(&x, &w, ConvGeom::new(2, 1, 1)).shape(), &[1, 3, 32, 32]);
        let one = Tensor::ones(&[1, 1, 1, 1]).unwrap();
        let x1 = pseudo(&[1, 1, 3, 3], 4);
        assert_eq!(conv_t(&x1, &one, ConvGeom::new(1, 0, 1)), x1);
    }

    #[test]
    fn transpose_is_adjoint() {
        let geom = ConvGeom::new(2, 1, 1);
        let x = pseudo(&[2, 3, 16, 16], 5);
        let w = pseudo(&[4, 3, 4, 4], 6);
        let cx = conv(&x, &w, None, geom).unwrap();
        let y = pseudo(cx.shape(), 7);
        let ty = conv_t(&y, &w, geom);
        assert_eq!(ty.shape(), x.shape());
        let lhs: f64 = cx.values().iter().zip(y.values()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.values().iter().zip(ty.values()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn gradients_pass_finite_differences() {
        for (geom, transposed) in [(ConvGeom::new(1, 2, 2), false), (ConvGeom::new(2, 1, 1), false), (ConvGeom::new(2, 1, 1), true)] {
            let w = pseudo(&[2, 2, 3, 3], 9);
            let b = pseudo(&[2], 3);
            let f = |g: &mut Graph<f64>, x: Var| {
                let wv = g.constant(&w);
                let bv = g.constant(&b);
                let y = ConvVars { weight: wv, bias: Some(bv), geom, transposed }.apply(g, x)?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            };
            let err = grad_check(f, &pseudo(&[2, 2, 8, 8], 1), 1e-5).unwrap();
            assert!(err < 1e-4, "input grad {geom:?} {transposed}: {err}");
            let x = pseudo(&[2, 2, 8, 8], 1);
            let fw = |g: &mut Graph<f64>, wv: Var| {
                let xv = g.constant(&x);
                let bv = g.constant(&b);
                let y = ConvVars { weight: wv, bias: Some(bv), geom, transposed }.apply(g, xv)?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            };
            let err = grad_check(fw, &w, 1e-5).unwrap();
            assert!(err < 1e-4, "weight grad {geom:?} {transposed}: {err}");
            let fb = |g: &mut Graph<f64>, bv: Var| {
                let xv = g.constant(&x);
                let wv = g.constant(&w);
                let y = ConvVars { weight: wv, bias: Some(bv), geom, transposed }.apply(g, xv)?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            };
            assert!(grad_check(fb, &b, 1e-5).unwrap() < 1e-4);
        }
    }

    #[test]
    fn spectral_layer_normalizes_weight() {
        let mut store = ParamStore::<f64>::new(4);
        let mut layer = ConvLayer::new(&mut store, "c", 3, 5, 3, ConvGeom::same(3, 1), false, true, ParamGroup::Base).unwrap();
        for _ in 0..100 {
            let mut g = Graph::new();
            layer.bind(&mut g, &store, Bind::frozen(Mode::Train)).unwrap();
        }
        let mut g = Graph::new();
        let vars = layer.bind(&mut g, &store, Bind::frozen(Mode::Eval)).unwrap();
        let w = g.tensor(vars.weight).unwrap();
        let m = nalgebra::DMatrix::from_row_slice(5, 27, w.values());
        let top = m.singular_values().max();
        assert!((0.999..=1.001).contains(&top), "{top}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn matches_reference(k in 1usize..4, stride in 1usize..3, pad in 0usize..3, dil in 1usize..3, h in 5usize..9, salt in 0usize..100) {
            let geom = ConvGeom::new(stride, pad, dil);
            let x = pseudo(&[2, 2, h, h + 1], salt);
            let w = pseudo(&[3, 2, k, k], salt + 1);
            let b = pseudo(&[3], salt + 2);
            if conv_out_size(h, k, stride, pad, dil).is_some() {
                let y = conv(&x, &w, Some(&b), geom).unwrap();
                let r = reference_conv(&x, &w, b.values(), geom);
                prop_assert!(y.max_abs_diff(&r).unwrap() < 1e-12);
            }
        }
    }
}
