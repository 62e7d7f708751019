//! Spatial pyramid attentive pooling.
//!
//! Parallel atrous branches are folded pairwise by learned per-pixel
//! attention maps and blended into the input through a scalar residual gate:
//!
//! ```text
//! acc ← f_0;  acc ← α ⊙ acc + (1 − α) ⊙ f_i,  α = σ(gate([acc, f_i]))
//! y = γ · acc + (1 − γ) · x
//! ```
//!
//! The discriminator-side variant averages parallel atrous branches with a
//! plain strided convolution.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{conv_out_size, effective_kernel};
use crate::nn::{Activation, Bind, ConvGeom, ConvLayer, ConvVars, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Branch folding order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum CascadeOrder {
    /// Largest rate first, then the rate-1 3×3, then the 1×1.
    #[default]
    CoarseToFine,
    FineToCoarse,
}

impl fmt::Display for CascadeOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CascadeOrder::CoarseToFine => "c2f",
            CascadeOrder::FineToCoarse => "f2c",
        })
    }
}

impl FromStr for CascadeOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "c2f" | "coarse_to_fine" => Ok(CascadeOrder::CoarseToFine),
            "f2c" | "fine_to_coarse" => Ok(CascadeOrder::FineToCoarse),
            _ => Err(Error::invalid(format!("unknown cascade order `{s}`"))),
        }
    }
}

/// Attention gate stack: `1×1 conv (2C → hidden) → lrelu → k×k conv (hidden → 1) → sigmoid`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateSpec {
    /// Hidden width is `max(1, channels / hidden_divisor)`.
    pub hidden_divisor: usize,
    pub kernel: usize,
    pub slope: f64,
}

impl Default for GateSpec {
    fn default() -> Self {
        GateSpec { hidden_divisor: 2, kernel: 3, slope: 0.1 }
    }
}

impl GateSpec {
    pub fn hidden(&self, channels: usize) -> usize {
        (channels / self.hidden_divisor).max(1)
    }

    /// Parameters of one gate at `channels` input width.
    pub fn param_count(&self, channels: usize) -> usize {
        let h = self.hidden(channels);
        2 * channels * h + h + self.kernel * self.kernel * h + 1
    }
}

/// One pyramid branch: a stride-1, same-resolution convolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BranchSpec {
    pub kernel: usize,
    pub dilation: usize,
}

impl BranchSpec {
    /// Figure-style label, e.g. `C3D7` or `C1D1`.
    pub fn label(&self) -> String {
        format!("C{}D{}", self.kernel, self.dilation)
    }

    pub fn geom(&self) -> ConvGeom {
        ConvGeom::same(self.kernel, self.dilation)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpapConfig {
    /// Atrous rates of the 3×3 branches, strictly increasing, all ≥ 2.
    pub rates: Vec<usize>,
    pub include_rate1_3x3: bool,
    pub include_1x1: bool,
    pub order: CascadeOrder,
    pub channels: usize,
    pub gate: GateSpec,
    pub gamma_init: f64,
    /// Spectral normalization on the branch convolutions.
    pub spectral: bool,
}

impl SpapConfig {
    pub fn new(channels: usize, rates: Vec<usize>, order: CascadeOrder) -> Self {
        SpapConfig {
            rates,
            include_rate1_3x3: true,
            include_1x1: true,
            order,
            channels,
            gate: GateSpec::default(),
            gamma_init: 0.0,
            spectral: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("spap channels must be positive".into()));
        }
        if self.rates.iter().any(|&r| r < 2) || self.rates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("spap rates must be strictly increasing and ≥ 2, got {:?}", self.rates)));
        }
        if self.gate.hidden_divisor == 0 || self.gate.kernel % 2 == 0 || !(self.gate.slope > 0.0 && self.gate.slope < 1.0) {
            return Err(Error::Config(format!("invalid attention gate {:?}", self.gate)));
        }
        if self.branches().len() < 2 {
            return Err(Error::Config("spap needs at least two branches to fuse".into()));
        }
        Ok(())
    }

    /// Branches in cascade order.
    pub fn branches(&self) -> Vec<BranchSpec> {
        let mut out: Vec<BranchSpec> = self.rates.iter().rev().map(|&d| BranchSpec { kernel: 3, dilation: d }).collect();
        if self.include_rate1_3x3 {
            out.push(BranchSpec { kernel: 3, dilation: 1 });
        }
        if self.include_1x1 {
            out.push(BranchSpec { kernel: 1, dilation: 1 });
        }
        if self.order == CascadeOrder::FineToCoarse {
            out.reverse();
        }
        out
    }

    pub fn fusions(&self) -> usize {
        self.branches().len().saturating_sub(1)
    }

    /// Branch convolutions, attention gates and γ.
    pub fn param_count(&self) -> usize {
        let c = self.channels;
        let branches: usize = self.branches().iter().map(|b| b.kernel * b.kernel * c * c + c).sum();
        branches + self.fusions() * self.gate.param_count(c) + 1
    }
}

/// Attention map produced by one fusion step.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionRecord<T> {
    /// Label of the branch folded into the accumulator at this step.
    pub label: String,
    /// `(n, 1, h, w)` values in `(0, 1)`.
    pub alpha: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Gate<T> {
    pub hidden: ConvLayer<T>,
    pub out: ConvLayer<T>,
    pub slope: f64,
}

impl<T: Scalar> Gate<T> {
    fn new(store: &mut ParamStore<T>, path: &str, channels: usize, spec: &GateSpec) -> Result<Self> {
        let h = spec.hidden(channels);
        let hidden = ConvLayer::new(store, &format!("{path}.hidden"), 2 * channels, h, 1, ConvGeom::same(1, 1), false, false, ParamGroup::Delayed)?;
        let out = ConvLayer::new(store, &format!("{path}.out"), h, 1, spec.kernel, ConvGeom::same(spec.kernel, 1), false, false, ParamGroup::Delayed)?;
        Ok(Gate { hidden, out, slope: spec.slope })
    }

    /// `σ(gate([f_a, f_b]))`, shape `(n, 1, h, w)`.
    pub fn attention_map(&mut self, g: &mut Graph<T>, store: &ParamStore<T>, f_a: Var, f_b: Var, bind: Bind) -> Result<Var> {
        if g.shape(f_a)? != g.shape(f_b)? {
            return Err(Error::ShapeMismatch { op: "attention_map", left: g.shape(f_a)?.to_vec(), right: g.shape(f_b)?.to_vec() });
        }
        let cat = g.concat_channels(f_a, f_b)?;
        let h = self.hidden.forward(g, store, cat, bind)?;
        let h = g.activation(h, Activation::LeakyRelu(self.slope))?;
        let logits = self.out.forward(g, store, h, bind)?;
        g.activation(logits, Activation::Sigmoid)
    }
}

/// Pyramid branches, one attention gate per fusion, and the residual scale γ.
///
/// All parameters belong to [`ParamGroup::Delayed`].
#[derive(Clone, Debug)]
pub struct SpapBlock<T> {
    pub cfg: SpapConfig,
    pub branches: Vec<ConvLayer<T>>,
    pub labels: Vec<String>,
    pub gates: Vec<Gate<T>>,
    pub gamma: ParamId,
}

impl<T: Scalar> SpapBlock<T> {
    pub fn new(store: &mut ParamStore<T>, path: &str, cfg: SpapConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let mut branches = Vec::new();
        let mut labels = Vec::new();
        for b in cfg.branches() {
            let label = b.label();
            branches.push(ConvLayer::new(store, &format!("{path}.{label}"), c, c, b.kernel, b.geom(), false, cfg.spectral, ParamGroup::Delayed)?);
            labels.push(label);
        }
        let gates = (0..cfg.fusions()).map(|i| Gate::new(store, &format!("{path}.gate{i}"), c, &cfg.gate)).collect::<Result<_>>()?;
        let gamma = store.add_const(&format!("{path}.gamma"), &[1], cfg.gamma_init, ParamGroup::Delayed)?;
        Ok(SpapBlock { cfg, branches, labels, gates, gamma })
    }

    /// Runs the block; when `record` is given, each fusion's attention map is appended to it.
    pub fn forward(&mut self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, bind: Bind, mut record: Option<&mut Vec<FusionRecord<T>>>) -> Result<Var> {
        let c = g.shape(x)?.get(1).copied();
        if c != Some(self.cfg.channels) {
            return Err(Error::ShapeMismatch { op: "spap input", left: vec![self.cfg.channels], right: g.shape(x)?.to_vec() });
        }
        let feats = self.branches.iter_mut().map(|b| b.forward(g, store, x, bind)).collect::<Result<Vec<_>>>()?;
        let mut acc = feats[0];
        for (i, &next) in feats.iter().enumerate().skip(1) {
            let alpha = self.gates[i - 1].attention_map(g, store, acc, next, bind)?;
            if let Some(r) = record.as_deref_mut() {
                r.push(FusionRecord { label: self.labels[i].clone(), alpha: g.tensor(alpha)? });
            }
            acc = g.atten_fuse(acc, next, alpha)?;
        }
        let gamma = store.bind(g, self.gamma, bind.trainable);
        residual_gate(g, acc, x, gamma)
    }
}

/// `γ · o + (1 − γ) · x` for a one-element `gamma`.
pub fn residual_gate<T: Scalar>(g: &mut Graph<T>, o: Var, x: Var, gamma: Var) -> Result<Var> {
    let keep = g.one_minus(gamma)?;
    let a = g.mul_scalar(o, gamma)?;
    let b = g.mul_scalar(x, keep)?;
    g.add(a, b)
}

/// Smallest padding that makes a dilated kernel produce `target` outputs.
pub fn matching_pad(size: usize, k: usize, stride: usize, dilation: usize, target: usize) -> Option<usize> {
    (0..=effective_kernel(k, dilation)).find(|&p| conv_out_size(size, k, stride, p, dilation) == Some(target))
}

/// Geometry of a discriminator atrous layer: a base convolution plus parallel
/// dilated branches sharing its stride.
#[derive(Clone, Debug, PartialEq)]
pub struct AtrousSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub rates: Vec<usize>,
    pub branch_kernel: usize,
}

impl AtrousSpec {
    /// Branch geometries that reproduce the base output size on a `size`-wide input.
    pub fn branch_geoms(&self, size: usize) -> Result<Vec<ConvGeom>> {
        let target = conv_out_size(size, self.kernel, self.stride, self.pad, 1)
            .ok_or_else(|| Error::invalid(format!("atrous base conv has empty output on size {size}")))?;
        self.rates
            .iter()
            .map(|&d| {
                matching_pad(size, self.branch_kernel, self.stride, d, target)
                    .map(|p| ConvGeom::new(self.stride, p, d))
                    .ok_or_else(|| Error::invalid(format!("no padding aligns rate {d} with the base output {target}")))
            })
            .collect()
    }
}

/// `0.5 · base(x) + 0.5 · mean_i branch_i(x)`.
pub fn atrous_disc_forward<T: Scalar>(g: &mut Graph<T>, x: Var, base: &ConvVars, branches: &[ConvVars]) -> Result<Var> {
    if branches.is_empty() {
        return Err(Error::invalid("atrous aggregate needs at least one branch"));
    }
    let b = base.apply(g, x)?;
    let mut sum: Option<Var> = None;
    for br in branches {
        let y = br.apply(g, x)?;
        if g.shape(y)? != g.shape(b)? {
            return Err(Error::ShapeMismatch { op: "atrous branch", left: g.shape(b)?.to_vec(), right: g.shape(y)?.to_vec() });
        }
        sum = Some(match sum {
            Some(s) => g.add(s, y)?,
            None => y,
        });
    }
    let half = g.scale(b, T::of(0.5))?;
    let rest = g.scale(sum.expect("non-empty"), T::of(0.5 / branches.len() as f64))?;
    g.add(half, rest)
}

/// Base convolution with parallel atrous branches.
///
/// The base belongs to [`ParamGroup::Base`], the branches to [`ParamGroup::Delayed`].
#[derive(Clone, Debug)]
pub struct AtrousDisc<T> {
    pub base: ConvLayer<T>,
    pub branches: Vec<ConvLayer<T>>,
    pub labels: Vec<String>,
}

impl<T: Scalar> AtrousDisc<T> {
    pub fn new(store: &mut ParamStore<T>, path: &str, spec: &AtrousSpec, c_in: usize, c_out: usize, size: usize, spectral: bool) -> Result<Self> {
        let base = ConvLayer::new(store, &format!("{path}.base"), c_in, c_out, spec.kernel, ConvGeom::new(spec.stride, spec.pad, 1), false, spectral, ParamGroup::Base)?;
        let mut branches = Vec::new();
        let mut labels = Vec::new();
        for geom in spec.branch_geoms(size)? {
            let label = format!("C{}D{}", spec.branch_kernel, geom.dilation);
            branches.push(ConvLayer::new(store, &format!("{path}.{label}"), c_in, c_out, spec.branch_kernel, geom, false, spectral, ParamGroup::Delayed)?);
            labels.push(label);
        }
        Ok(AtrousDisc { base, branches, labels })
    }

    pub fn forward(&mut self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, bind: Bind) -> Result<Var> {
        let base = self.base.bind(g, store, bind)?;
        let branches = self.branches.iter_mut().map(|b| b.bind(g, store, bind)).collect::<Result<Vec<_>>>()?;
        atrous_disc_forward(g, x, &base, &branches)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, grad_check};
    use crate::nn::Mode;
    use proptest::prelude::*;

    fn pseudo(shape: &[usize], salt: u64) -> Tensor<f64> {
        let mut r = crate::rng::stream(salt, "pseudo");
        use rand::Rng as _;
        Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0)).unwrap()
    }

    fn block(c: usize, rates: Vec<usize>, order: CascadeOrder, gamma: f64) -> (ParamStore<f64>, SpapBlock<f64>) {
        let mut store = ParamStore::new(21);
        let mut cfg = SpapConfig::new(c, rates, order);
        cfg.gamma_init = gamma;
        let b = SpapBlock::new(&mut store, "spap", cfg).unwrap();
        (store, b)
    }

    fn run(store: &ParamStore<f64>, b: &mut SpapBlock<f64>, x: &Tensor<f64>, rec: Option<&mut Vec<FusionRecord<f64>>>) -> Tensor<f64> {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = b.forward(&mut g, store, xv, Bind::frozen(Mode::Sample), rec).unwrap();
        g.tensor(y).unwrap()
    }

    #[test]
    fn branch_roster_and_order() {
        let cfg = SpapConfig::new(4, vec![3, 5, 7], CascadeOrder::CoarseToFine);
        let labels: Vec<String> = cfg.branches().iter().map(BranchSpec::label).collect();
        assert_eq!(labels, ["C3D7", "C3D5", "C3D3", "C3D1", "C1D1"]);
        let mut rev = cfg.clone();
        rev.order = CascadeOrder::FineToCoarse;
        let back: Vec<String> = rev.branches().iter().rev().map(BranchSpec::label).collect();
        assert_eq!(back, labels);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(SpapConfig::new(4, vec![5, 3], CascadeOrder::CoarseToFine).validate().is_err());
        assert!(SpapConfig::new(4, vec![1, 3], CascadeOrder::CoarseToFine).validate().is_err());
        let mut lone = SpapConfig::new(4, vec![], CascadeOrder::CoarseToFine);
        lone.include_1x1 = false;
        assert!(lone.validate().is_err());
        lone.include_1x1 = true;
        assert!(lone.validate().is_ok());
    }

    #[test]
    fn zero_gamma_is_identity() {
        let (store, mut b) = block(4, vec![3, 5, 7], CascadeOrder::CoarseToFine, 0.0);
        let x = pseudo(&[2, 4, 16, 16], 1);
        let y = run(&store, &mut b, &x, None);
        assert!(y.values().iter().zip(x.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn unit_gamma_returns_fused_map() {
        let (store, mut b) = block(2, vec![2], CascadeOrder::CoarseToFine, 1.0);
        let x = pseudo(&[1, 2, 8, 8], 2);
        let y = run(&store, &mut b, &x, None);
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let bind = Bind::frozen(Mode::Sample);
        let feats: Vec<Var> = b.branches.iter_mut().map(|c| c.forward(&mut g, &store, xv, bind).unwrap()).collect();
        let mut acc = feats[0];
        for i in 1..feats.len() {
            let a = b.gates[i - 1].attention_map(&mut g, &store, acc, feats[i], bind).unwrap();
            acc = g.atten_fuse(acc, feats[i], a).unwrap();
        }
        assert!(y.max_abs_diff(&g.tensor(acc).unwrap()).unwrap() < 1e-15);
    }

    #[test]
    fn full_scale_shape_is_preserved() {
        let (store, mut b) = block(128, vec![3, 5, 7], CascadeOrder::CoarseToFine, 0.5);
        let x = pseudo(&[1, 128, 64, 64], 3);
        assert_eq!(run(&store, &mut b, &x, None).shape(), x.shape());
    }

    #[test]
    fn records_one_map_per_fusion_in_range() {
        let (store, mut b) = block(3, vec![3, 5, 7], CascadeOrder::FineToCoarse, 0.0);
        let mut rec = Vec::new();
        run(&store, &mut b, &pseudo(&[2, 3, 12, 12], 4), Some(&mut rec));
        let labels: Vec<&str> = rec.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, ["C3D1", "C3D3", "C3D5", "C3D7"]);
        for r in &rec {
            assert_eq!(r.alpha.shape(), &[2, 1, 12, 12]);
            assert!(r.alpha.values().iter().all(|&a| a > 0.0 && a < 1.0));
        }
    }

    #[test]
    fn zero_final_gate_gives_half() {
        let (mut store, mut b) = block(2, vec![3], CascadeOrder::CoarseToFine, 0.0);
        let gate = &b.gates[0];
        for id in [gate.out.weight, gate.out.bias] {
            store.get_mut(id).values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let x = g.constant(&pseudo(&[1, 2, 6, 6], 5));
        let a = b.gates[0].attention_map(&mut g, &store, x, x, Bind::frozen(Mode::Sample)).unwrap();
        assert!(g.value(a).unwrap().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn gate_bias_saturates() {
        let (mut store, mut b) = block(2, vec![3], CascadeOrder::CoarseToFine, 0.0);
        let out_bias = b.gates[0].out.bias;
        let x = pseudo(&[1, 2, 6, 6], 6);
        for (bias, check) in [(60.0, 1.0), (-60.0, 0.0)] {
            store.get_mut(out_bias).values_mut()[0] = bias;
            let mut g = Graph::new();
            let xv = g.constant(&x);
            let a = b.gates[0].attention_map(&mut g, &store, xv, xv, Bind::frozen(Mode::Sample)).unwrap();
            assert!(g.value(a).unwrap().iter().all(|&v| (v - check).abs() < 1e-12));
        }
    }

    #[test]
    fn fuse_endpoints() {
        let fa = pseudo(&[2, 3, 4, 4], 7);
        let fb = pseudo(&[2, 3, 4, 4], 8);
        let mut g = Graph::new();
        let (a, b) = (g.constant(&fa), g.constant(&fb));
        let one = g.constant(&Tensor::ones(&[2, 1, 4, 4]).unwrap());
        let zero = g.constant(&Tensor::zeros(&[2, 1, 4, 4]).unwrap());
        let half = g.constant(&Tensor::full(&[2, 1, 4, 4], 0.3).unwrap());
        let y1 = g.atten_fuse(a, b, one).unwrap();
        let y0 = g.atten_fuse(a, b, zero).unwrap();
        let ys = g.atten_fuse(a, a, half).unwrap();
        assert_eq!(g.tensor(y1).unwrap().values(), fa.values());
        assert_eq!(g.tensor(y0).unwrap().values(), fb.values());
        assert_eq!(g.tensor(ys).unwrap().values(), fa.values());
        assert!(g.atten_fuse(a, b, a).is_err());
    }

    fn spap_objective(store: &ParamStore<f64>, b: &mut SpapBlock<f64>, x: &Tensor<f64>, trainable: bool) -> Result<(Graph<f64>, Var, Var)> {
        let mut g = Graph::new();
        let xv = if trainable { g.constant(x) } else { g.variable(x) };
        let y = b.forward(&mut g, store, xv, Bind::new(Mode::Sample, trainable), None)?;
        let w = g.constant(&pseudo(x.shape(), 99));
        let p = g.mul(y, w)?;
        let sq = g.mul(p, p)?;
        let s = g.sum(sq)?;
        Ok((g, s, xv))
    }

    fn param_grad_error(store: &mut ParamStore<f64>, b: &mut SpapBlock<f64>, x: &Tensor<f64>, ids: &[ParamId]) -> f64 {
        store.zero_grad();
        let (g, s, _) = spap_objective(store, b, x, true).unwrap();
        let grads = g.backward(s).unwrap();
        store.accumulate(&g, &grads).unwrap();
        let analytic = store.flat_grads(ids);
        let x0 = store.flat_values(ids);
        let mut probe = store.clone();
        check_gradient(
            |v| {
                probe.set_flat_values(ids, v);
                let (g, s, _) = spap_objective(&probe, &mut b.clone(), x, true)?;
                g.scalar(s)
            },
            &analytic,
            &x0,
            1e-5,
        )
        .unwrap()
    }

    #[test]
    fn gradients_pass_finite_differences_both_orders() {
        for order in [CascadeOrder::CoarseToFine, CascadeOrder::FineToCoarse] {
            let (mut store, mut b) = block(2, vec![2, 3], order, 0.6);
            let x = pseudo(&[2, 2, 8, 8], 10);
            let (g, s, xv) = spap_objective(&store, &mut b, &x, false).unwrap();
            let analytic = g.backward(s).unwrap().wrt(xv).unwrap().to_vec();
            let err = check_gradient(
                |v| {
                    let t = Tensor::new(x.shape(), v.to_vec())?;
                    let (g, s, _) = spap_objective(&store, &mut b.clone(), &t, false)?;
                    g.scalar(s)
                },
                &analytic,
                x.values(),
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "input {order}: {err}");
            let mut ids: Vec<ParamId> = b.branches.iter().flat_map(|c| [c.weight, c.bias]).collect();
            ids.extend(b.gates.iter().flat_map(|gt| [gt.hidden.weight, gt.hidden.bias, gt.out.weight, gt.out.bias]));
            ids.push(b.gamma);
            let err = param_grad_error(&mut store, &mut b, &x, &ids);
            assert!(err < 1e-4, "params {order}: {err}");
        }
    }

    #[test]
    fn zero_gamma_blocks_branch_gradients() {
        let (mut store, mut b) = block(2, vec![2], CascadeOrder::CoarseToFine, 0.0);
        let x = pseudo(&[1, 2, 6, 6], 11);
        let (g, s, _) = spap_objective(&store, &mut b, &x, true).unwrap();
        let grads = g.backward(s).unwrap();
        store.accumulate(&g, &grads).unwrap();
        for c in &b.branches {
            assert!(store.flat_grads(&[c.weight, c.bias]).iter().all(|&v| v == 0.0));
        }
        assert!(store.flat_grads(&[b.gamma])[0] != 0.0);
        let gamma = b.gamma;
        assert!(param_grad_error(&mut store, &mut b, &x, &[gamma]) < 1e-4);
    }

    fn disc(spec: &AtrousSpec, c_in: usize, c_out: usize, size: usize) -> (ParamStore<f64>, AtrousDisc<f64>) {
        let mut store = ParamStore::new(5);
        let d = AtrousDisc::new(&mut store, "d", spec, c_in, c_out, size, false).unwrap();
        (store, d)
    }

    fn run_disc(store: &ParamStore<f64>, d: &mut AtrousDisc<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = d.forward(&mut g, store, xv, Bind::frozen(Mode::Sample)).unwrap();
        g.tensor(y).unwrap()
    }

    fn base_only(store: &ParamStore<f64>, d: &mut AtrousDisc<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = d.base.forward(&mut g, store, xv, Bind::frozen(Mode::Sample)).unwrap();
        g.tensor(y).unwrap()
    }

    fn stride2() -> AtrousSpec {
        AtrousSpec { kernel: 4, stride: 2, pad: 1, rates: vec![3, 5, 7], branch_kernel: 3 }
    }

    #[test]
    fn atrous_shapes_align() {
        let (store, mut d) = disc(&stride2(), 2, 3, 64);
        let x = pseudo(&[1, 2, 64, 64], 12);
        assert_eq!(run_disc(&store, &mut d, &x).shape(), &[1, 3, 32, 32]);
        let mut g = Graph::new();
        let xv = g.constant(&x);
        for b in &mut d.branches {
            let y = b.forward(&mut g, &store, xv, Bind::frozen(Mode::Sample)).unwrap();
            assert_eq!(g.shape(y).unwrap(), &[1, 3, 32, 32]);
        }
    }

    #[test]
    fn zero_branches_halve_base() {
        let (mut store, mut d) = disc(&stride2(), 2, 2, 16);
        for b in &d.branches {
            for id in [b.weight, b.bias] {
                store.get_mut(id).values_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let x = pseudo(&[2, 2, 16, 16], 13);
        let y = run_disc(&store, &mut d, &x);
        let base = base_only(&store, &mut d, &x).map(|v| 0.5 * v);
        assert!(y.max_abs_diff(&base).unwrap() == 0.0);
    }

    #[test]
    fn single_branch_equal_to_base() {
        let spec = AtrousSpec { kernel: 3, stride: 1, pad: 1, rates: vec![1], branch_kernel: 3 };
        let mut store = ParamStore::<f64>::new(5);
        let mut d = AtrousDisc::new(&mut store, "d", &spec, 2, 2, 8, false).unwrap();
        let vals = store.flat_values(&[d.base.weight, d.base.bias]);
        store.set_flat_values(&[d.branches[0].weight, d.branches[0].bias], &vals);
        let x = pseudo(&[1, 2, 8, 8], 14);
        let y = run_disc(&store, &mut d, &x);
        assert!(y.max_abs_diff(&base_only(&store, &mut d, &x)).unwrap() < 1e-15);
    }

    #[test]
    fn branch_contribution_is_linear() {
        let (mut store, mut d) = disc(&stride2(), 2, 2, 16);
        let x = pseudo(&[1, 2, 16, 16], 15);
        let y0 = run_disc(&store, &mut d, &x);
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let b1 = d.branches[1].forward(&mut g, &store, xv, Bind::frozen(Mode::Sample)).unwrap();
        let f1 = g.tensor(b1).unwrap();
        let c = 2.5;
        let ids = [d.branches[1].weight, d.branches[1].bias];
        let scaled: Vec<f64> = store.flat_values(&ids).iter().map(|v| v * c).collect();
        store.set_flat_values(&ids, &scaled);
        let y1 = run_disc(&store, &mut d, &x);
        let n = d.branches.len() as f64;
        for ((a, b), f) in y1.values().iter().zip(y0.values()).zip(f1.values()) {
            assert!((a - b - (c - 1.0) * f / (2.0 * n)).abs() < 1e-12);
        }
    }

    #[test]
    fn atrous_gradients() {
        let spec = AtrousSpec { kernel: 4, stride: 2, pad: 1, rates: vec![2, 3], branch_kernel: 3 };
        let (store, d) = disc(&spec, 2, 2, 8);
        let f = |g: &mut Graph<f64>, xv: Var| {
            let y = d.clone().forward(g, &store, xv, Bind::frozen(Mode::Sample))?;
            let sq = g.mul(y, y)?;
            g.sum(sq)
        };
        assert!(grad_check(f, &pseudo(&[2, 2, 8, 8], 16), 1e-5).unwrap() < 1e-4);
    }

    #[test]
    fn empty_branch_list_is_an_error() {
        let mut g = Graph::<f64>::new();
        let w = g.constant(&Tensor::ones(&[1, 1, 1, 1]).unwrap());
        let x = g.constant(&Tensor::ones(&[1, 1, 2, 2]).unwrap());
        let base = ConvVars { weight: w, bias: None, geom: ConvGeom::new(1, 0, 1), transposed: false };
        assert!(atrous_disc_forward(&mut g, x, &base, &[]).is_err());
    }

    #[test]
    fn full_scale_param_delta() {
        let cfg = SpapConfig::new(128, vec![3, 5, 7], CascadeOrder::CoarseToFine);
        let mut store = ParamStore::<f32>::new(0);
        SpapBlock::new(&mut store, "s", cfg.clone()).unwrap();
        assert_eq!(store.num_elements(), cfg.param_count());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn fusion_stays_in_hull(salt in 0u64..1000, al in 0.0f64..=1.0) {
            let fa = pseudo(&[1, 3, 4, 4], salt);
            let fb = pseudo(&[1, 3, 4, 4], salt + 1);
            let alpha = pseudo(&[1, 1, 4, 4], salt + 2).map(|v| (v * al).abs());
            let mut g = Graph::new();
            let (a, b, l) = (g.constant(&fa), g.constant(&fb), g.constant(&alpha));
            let y = g.atten_fuse(a, b, l).unwrap();
            for ((&y, &p), &q) in g.value(y).unwrap().iter().zip(fa.values()).zip(fb.values()) {
                prop_assert!(p.min(q) <= y && y <= p.max(q));
            }
        }

        #[test]
        fn spap_fused_output_in_branch_hull(salt in 0u64..200) {
            let (store, mut b) = block(2, vec![2, 3], CascadeOrder::CoarseToFine, 1.0);
            let x = pseudo(&[1, 2, 6, 6], salt);
            let y = run(&store, &mut b, &x, None);
            let mut g = Graph::new();
            let xv = g.constant(&x);
            let feats: Vec<Tensor<f64>> = b.branches.iter_mut().map(|c| {
                let v = c.forward(&mut g, &store, xv, Bind::frozen(Mode::Sample)).unwrap();
                g.tensor(v).unwrap()
            }).collect();
            for (e, &v) in y.values().iter().enumerate() {
                let lo = feats.iter().map(|f| f.values()[e]).fold(f64::INFINITY, f64::min);
                let hi = feats.iter().map(|f| f.values()[e]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(lo <= v && v <= hi);
            }
        }
    }
}
