use super::{ArchSpec, LayerOp, Post};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Activation, Bind, ConvGeom, ConvLayer, LinearLayer, Mode, NormLayer, ParamGroup, ParamStore, SpectralState};
use crate::scalar::Scalar;
use crate::spap::{AtrousDisc, FusionRecord, SpapBlock};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
struct Tail<T> {
    norm: Option<NormLayer<T>>,
    act: Option<Activation>,
}

impl<T: Scalar> Tail<T> {
    fn new(store: &mut ParamStore<T>, path: &str, post: &Post, channels: usize) -> Result<Self> {
        let norm = post.norm.map(|k| NormLayer::new(store, &format!("{path}.norm"), k, channels, ParamGroup::Base)).transpose()?;
        Ok(Tail { norm, act: post.act })
    }

    fn apply(&mut self, g: &mut Graph<T>, store: &ParamStore<T>, mut x: Var, bind: Bind) -> Result<Var> {
        if let Some(n) = &mut self.norm {
            x = n.forward(g, store, x, bind)?;
        }
        if let Some(a) = self.act {
            x = g.activation(x, a)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
struct Residual<T> {
    conv1: ConvLayer<T>,
    norm1: Option<NormLayer<T>>,
    conv2: ConvLayer<T>,
    norm2: Option<NormLayer<T>>,
    act: Activation,
}

#[derive(Clone, Debug)]
enum Layer<T> {
    Conv(ConvLayer<T>, Tail<T>),
    Linear(LinearLayer<T>, Tail<T>),
    Norm(NormLayer<T>),
    Act(Activation),
    Spap(SpapBlock<T>),
    Atrous(AtrousDisc<T>, Tail<T>),
    Reshape([usize; 3]),
    Res(Residual<T>),
}

/// A built [`ArchSpec`]: parameters, layer state, and the forward map.
#[derive(Clone, Debug)]
pub struct Network<T> {
    pub spec: ArchSpec,
    pub store: ParamStore<T>,
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> Network<T> {
    /// Initializes every parameter from streams keyed by `seed` and the parameter path.
    pub fn new(spec: &ArchSpec, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(seed);
        let mut shape = spec.input;
        let mut layers = Vec::new();
        for l in &spec.layers {
            let path = l.label.as_str();
            let c = shape[0];
            let layer = match &l.op {
                LayerOp::Conv(s) | LayerOp::Deconv(s) => {
                    let transposed = matches!(l.op, LayerOp::Deconv(_));
                    let geom = ConvGeom::new(s.stride, s.pad, s.dilation);
                    let conv = ConvLayer::new(&mut store, path, c, s.out, s.k, geom, transposed, s.sn, ParamGroup::Base)?;
                    Layer::Conv(conv, Tail::new(&mut store, path, &s.post, s.out)?)
                }
                LayerOp::Linear { out, sn, post } => {
                    let lin = LinearLayer::new(&mut store, path, shape.iter().product(), *out, *sn, ParamGroup::Base)?;
                    Layer::Linear(lin, Tail::new(&mut store, path, post, *out)?)
                }
                LayerOp::Norm(kind) => Layer::Norm(NormLayer::new(&mut store, path, *kind, c, ParamGroup::Base)?),
                LayerOp::Activation(a) => Layer::Act(*a),
                LayerOp::Spap(cfg) => Layer::Spap(SpapBlock::new(&mut store, path, cfg.clone())?),
                LayerOp::AtrousDisc { atrous, out, sn, post } => {
                    let d = AtrousDisc::new(&mut store, path, atrous, c, *out, shape[1], *sn)?;
                    Layer::Atrous(d, Tail::new(&mut store, path, post, *out)?)
                }
                LayerOp::Reshape { c, h, w } => Layer::Reshape([*c, *h, *w]),
                LayerOp::ResBlock { k, norm, act } => {
                    let geom = ConvGeom::same(*k, 1);
                    let mut half = |i: usize| -> Result<(ConvLayer<T>, Option<NormLayer<T>>)> {
                        let conv = ConvLayer::new(&mut store, &format!("{path}.conv{i}"), c, c, *k, geom, false, false, ParamGroup::Base)?;
                        let n = norm.map(|kind| NormLayer::new(&mut store, &format!("{path}.norm{i}"), kind, c, ParamGroup::Base)).transpose()?;
                        Ok((conv, n))
                    };
                    let (conv1, norm1) = half(1)?;
                    let (conv2, norm2) = half(2)?;
                    Layer::Res(Residual { conv1, norm1, conv2, norm2, act: *act })
                }
            };
            layers.push(layer);
            shape = super::analysis::output_shape(&l.op, shape)?;
        }
        Ok(Network { spec: spec.clone(), store, layers })
    }

    /// Runs all layers; attention maps of SPAP blocks are appended to `record` when given.
    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, bind: Bind, mut record: Option<&mut Vec<FusionRecord<T>>>) -> Result<Var> {
        let shape = g.shape(x)?.to_vec();
        if shape.len() != 4 || shape[1..] != self.spec.input {
            return Err(Error::ShapeMismatch { op: "network input", left: self.spec.input.to_vec(), right: shape });
        }
        let n = shape[0];
        let store = &self.store;
        let mut h = x;
        for layer in &mut self.layers {
            h = match layer {
                Layer::Conv(conv, tail) => {
                    let y = conv.forward(g, store, h, bind)?;
                    tail.apply(g, store, y, bind)?
                }
                Layer::Linear(lin, tail) => {
                    let y = lin.forward(g, store, h, bind)?;
                    tail.apply(g, store, y, bind)?
                }
                Layer::Norm(norm) => norm.forward(g, store, h, bind)?,
                Layer::Act(a) => g.activation(h, *a)?,
                Layer::Spap(block) => block.forward(g, store, h, bind, record.as_deref_mut())?,
                Layer::Atrous(d, tail) => {
                    let y = d.forward(g, store, h, bind)?;
                    tail.apply(g, store, y, bind)?
                }
                Layer::Reshape([c, hh, w]) => g.reshape(h, &[n, *c, *hh, *w])?,
                Layer::Res(r) => {
                    let mut y = r.conv1.forward(g, store, h, bind)?;
                    if let Some(nl) = &mut r.norm1 {
                        y = nl.forward(g, store, y, bind)?;
                    }
                    y = g.activation(y, r.act)?;
                    y = r.conv2.forward(g, store, y, bind)?;
                    if let Some(nl) = &mut r.norm2 {
                        y = nl.forward(g, store, y, bind)?;
                    }
                    g.add(h, y)?
                }
            };
        }
        Ok(h)
    }

    /// Forward pass on a fresh graph without gradients.
    pub fn run(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = self.forward(&mut g, xv, Bind::frozen(mode), None)?;
        g.tensor(y)
    }

    /// Forward pass that also returns every attention map.
    pub fn run_recording(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Vec<FusionRecord<T>>)> {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let mut rec = Vec::new();
        let y = self.forward(&mut g, xv, Bind::frozen(mode), Some(&mut rec))?;
        Ok((g.tensor(y)?, rec))
    }

    pub fn num_params(&self) -> usize {
        self.store.num_elements()
    }

    pub fn spap_blocks(&self) -> impl Iterator<Item = &SpapBlock<T>> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Spap(b) => Some(b),
            _ => None,
        })
    }

    /// Current γ of every SPAP block, in layer order.
    pub fn gammas(&self) -> Vec<T> {
        self.spap_blocks().map(|b| self.store.get(b.gamma).values()[0]).collect()
    }

    fn convs(&self) -> Vec<&ConvLayer<T>> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Conv(c, _) => out.push(c),
                Layer::Spap(b) => {
                    out.extend(b.branches.iter());
                    out.extend(b.gates.iter().flat_map(|g| [&g.hidden, &g.out]));
                }
                Layer::Atrous(d, _) => {
                    out.push(&d.base);
                    out.extend(d.branches.iter());
                }
                Layer::Res(r) => out.extend([&r.conv1, &r.conv2]),
                _ => {}
            }
        }
        out
    }

    /// Every spectral estimate with the path of the weight it normalizes.
    fn spectral_states(&mut self) -> Vec<(String, &mut SpectralState<T>)> {
        fn push<'a, T: Scalar>(store: &ParamStore<T>, c: &'a mut ConvLayer<T>, out: &mut Vec<(String, &'a mut SpectralState<T>)>) {
            let path = store.entry(c.weight).path.clone();
            if let Some(s) = c.spectral.as_mut() {
                out.push((path, s));
            }
        }
        let store = &self.store;
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Conv(c, _) => push(store, c, &mut out),
                Layer::Linear(lin, _) => {
                    let path = store.entry(lin.weight).path.clone();
                    if let Some(s) = lin.spectral.as_mut() {
                        out.push((path, s));
                    }
                }
                Layer::Spap(b) => b.branches.iter_mut().for_each(|c| push(store, c, &mut out)),
                Layer::Atrous(d, _) => {
                    push(store, &mut d.base, &mut out);
                    d.branches.iter_mut().for_each(|c| push(store, c, &mut out));
                }
                _ => {}
            }
        }
        out
    }

    fn norms(&mut self) -> Vec<&mut NormLayer<T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Conv(_, t) | Layer::Linear(_, t) | Layer::Atrous(_, t) => out.extend(t.norm.as_mut()),
                Layer::Norm(n) => out.push(n),
                Layer::Res(r) => {
                    out.extend(r.norm1.as_mut());
                    out.extend(r.norm2.as_mut());
                }
                _ => {}
            }
        }
        out
    }

    /// Each spectrally normalized weight as `(path, W / σ̂)`, with σ̂ from the stored
    /// estimates refined by `extra_iters` power iterations on a copy of the state.
    pub fn normalized_weights(&mut self, extra_iters: usize) -> Result<Vec<(String, Tensor<T>)>> {
        let store = self.store.clone();
        self.spectral_states()
            .into_iter()
            .map(|(path, s)| {
                let w = store.get(store.find(&path).expect("weight path"));
                let mut s = s.clone();
                for _ in 0..extra_iters {
                    s.iterate(w.values())?;
                }
                let sigma = s.sigma(w.values());
                Ok((path, w.map(|v| v / sigma)))
            })
            .collect()
    }

    /// Non-parameter state: running statistics and spectral vectors, keyed by path.
    pub fn state(&mut self) -> Vec<(String, Vec<T>)> {
        let mut out = Vec::new();
        for (path, s) in self.spectral_states() {
            out.push((format!("{path}.u"), s.u.clone()));
            out.push((format!("{path}.v"), s.v.clone()));
        }
        let store = self.store.clone();
        for n in self.norms() {
            let base = store.entry(n.gamma).path.trim_end_matches(".gamma").to_string();
            out.push((format!("{base}.running_mean"), n.running_mean.clone()));
            out.push((format!("{base}.running_var"), n.running_var.clone()));
        }
        out
    }

    /// Restores state written by [`state`](Self::state); every key must be present with the right length.
    pub fn set_state(&mut self, lookup: &dyn Fn(&str) -> Option<Vec<T>>) -> Result<()> {
        let fetch = |key: String, len: usize| -> Result<Vec<T>> {
            let v = lookup(&key).ok_or_else(|| Error::Checkpoint(format!("missing state `{key}`")))?;
            if v.len() != len {
                return Err(Error::Checkpoint(format!("state `{key}` has {} values, expected {len}", v.len())));
            }
            Ok(v)
        };
        for (path, s) in self.spectral_states() {
            s.u = fetch(format!("{path}.u"), s.u.len())?;
            s.v = fetch(format!("{path}.v"), s.v.len())?;
        }
        let store = self.store.clone();
        for n in self.norms() {
            let base = store.entry(n.gamma).path.trim_end_matches(".gamma").to_string();
            n.running_mean = fetch(format!("{base}.running_mean"), n.running_mean.len())?;
            n.running_var = fetch(format!("{base}.running_var"), n.running_var.len())?;
        }
        Ok(())
    }

    /// Number of convolution-like layers (including those inside blocks).
    pub fn conv_count(&self) -> usize {
        self.convs().len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::presets;
    use crate::rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = rng::stream(seed, "x");
        Tensor::from_fn(shape, |_| StandardNormal.sample(&mut r)).unwrap()
    }

    #[test]
    fn param_iterator_matches_count() {
        for (name, text) in presets::ALL {
            let spec = ArchSpec::parse(text).unwrap();
            if spec.param_count().unwrap().total > 3_000_000 {
                continue;
            }
            let net = Network::<f32>::new(&spec, 1).unwrap();
            assert_eq!(net.num_params(), spec.param_count().unwrap().total, "{name}");
        }
    }

    #[test]
    fn desk_generator_output_in_tanh_range() {
        let spec = ArchSpec::parse(presets::DESK_GEN).unwrap();
        let mut net = Network::<f64>::new(&spec, 3).unwrap();
        let y = net.run(&normal(&[4, spec.input[0], 1, 1], 1), Mode::Sample).unwrap();
        assert_eq!(y.shape(), &[4, 3, 32, 32]);
        assert!(y.values().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn scaled_sndcgan_generator_shape() {
        let text = presets::SNDCGAN_GEN.replace("c=131072", "c=8192").replace("reshape c=512 h=16 w=16", "reshape c=512 h=4 w=4");
        let spec = ArchSpec::parse(&text).unwrap();
        assert_eq!(spec.output_shape().unwrap(), [3, 32, 32]);
        let mut net = Network::<f32>::new(&spec, 3).unwrap();
        let z = Tensor::from_fn(&[2, 128, 1, 1], |i| ((i * 37 % 11) as f32 - 5.0) / 5.0).unwrap();
        let y = net.run(&z, Mode::Sample).unwrap();
        assert_eq!(y.shape(), &[2, 3, 32, 32]);
        assert!(y.values().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn cyclegan_generator_preserves_shape() {
        let spec = ArchSpec::parse(presets::CYCLEGAN_GEN).unwrap();
        let mut small = spec.clone();
        small.input = [3, 64, 64];
        let small = ArchSpec::parse(&small.to_text()).unwrap();
        assert_eq!(small.output_shape().unwrap(), [3, 64, 64]);
        let desk = ArchSpec::parse(presets::DESK_CYC_GEN).unwrap();
        let mut net = Network::<f64>::new(&desk, 2).unwrap();
        let x = normal(&[1, 3, 16, 16], 2);
        assert_eq!(net.run(&x, Mode::Sample).unwrap().shape(), x.shape());
    }

    #[test]
    fn refined_normalized_weights_reach_unit_norm() {
        let spec = ArchSpec::parse("input c=3 h=8 w=8\nconv k=3 p=1 c=4 sn=1\nlinear c=5 sn=1\n").unwrap();
        let mut net = Network::<f64>::new(&spec, 9).unwrap();
        let before = net.state();
        let coarse = net.normalized_weights(0).unwrap();
        assert_eq!(net.state(), before);
        for (path, w) in net.normalized_weights(2000).unwrap() {
            let rows = w.shape()[0];
            let top = nalgebra::DMatrix::from_row_slice(rows, w.len() / rows, w.values()).singular_values().max();
            assert!((top - 1.0).abs() < 1e-9, "{path}: {top}");
        }
        assert_eq!(coarse.len(), 2);
    }

    #[test]
    fn identity_reshape_is_identity() {
        let spec = ArchSpec::parse("input c=2 h=3 w=3\nreshape c=2 h=3 w=3\n").unwrap();
        let mut net = Network::<f64>::new(&spec, 0).unwrap();
        let x = normal(&[2, 2, 3, 3], 4);
        assert_eq!(net.run(&x, Mode::Eval).unwrap(), x);
    }

    #[test]
    fn wrong_input_shape_is_an_error() {
        let spec = ArchSpec::parse(presets::DESK_DISC).unwrap();
        let mut net = Network::<f64>::new(&spec, 0).unwrap();
        assert!(net.run(&normal(&[1, 3, 16, 16], 0), Mode::Eval).is_err());
    }

    #[test]
    fn spap_and_vanilla_share_base_init() {
        let spap = Network::<f64>::new(&ArchSpec::parse(presets::DESK_GEN).unwrap(), 9).unwrap();
        let vanilla = Network::<f64>::new(&ArchSpec::parse(presets::DESK_GEN_VANILLA).unwrap(), 9).unwrap();
        assert_eq!(spap.store.fingerprint(Some(ParamGroup::Base)), vanilla.store.fingerprint(Some(ParamGroup::Base)));
        assert!(spap.num_params() > vanilla.num_params());
    }

    #[test]
    fn state_round_trips() {
        let spec = ArchSpec::parse(presets::DESK_GEN).unwrap();
        let mut a = Network::<f64>::new(&spec, 1).unwrap();
        a.run(&normal(&[4, 128, 1, 1], 5), Mode::Train).unwrap();
        let state = a.state();
        let mut b = Network::<f64>::new(&spec, 1).unwrap();
        b.set_state(&|k| state.iter().find(|(p, _)| p == k).map(|(_, v)| v.clone())).unwrap();
        assert_eq!(b.state(), state);
        assert!(b.set_state(&|_| None).is_err());
    }
}
