//! Declarative layer stacks: a line-oriented text format, static analysis
//! (shapes, receptive field, parameter counts) and network construction.
//!
//! ```text
//! # comment
//! name patchgan
//! input c=3 h=256 w=256
//! conv k=4 s=2 p=1 c=64 act=lrelu:0.2
//! conv k=4 s=2 p=1 c=128 norm=instance act=lrelu:0.2
//! ```
//!
//! Every layer gets a label, by default `{kind}{n}` counted per kind; it is
//! the prefix of the layer's parameter paths.

mod analysis;
mod network;
pub mod presets;

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

pub use analysis::{LayerParams, ParamReport, RfReport, RfRow};
pub use network::Network;

use crate::error::{Error, Result};
use crate::nn::{Activation, NormKind};
use crate::spap::{AtrousSpec, CascadeOrder, GateSpec, SpapConfig};

/// Optional normalization and activation applied after a layer's main op.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Post {
    pub norm: Option<NormKind>,
    pub act: Option<Activation>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvSpec {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub out: usize,
    pub sn: bool,
    pub post: Post,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerOp {
    Conv(ConvSpec),
    Deconv(ConvSpec),
    Linear { out: usize, sn: bool, post: Post },
    Norm(NormKind),
    Activation(Activation),
    Spap(SpapConfig),
    AtrousDisc { atrous: AtrousSpec, out: usize, sn: bool, post: Post },
    Reshape { c: usize, h: usize, w: usize },
    /// `x + norm(conv(act(norm(conv(x)))))` with same-size 3×3-style convolutions.
    ResBlock { k: usize, norm: Option<NormKind>, act: Activation },
}

impl LayerOp {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerOp::Conv(_) => "conv",
            LayerOp::Deconv(_) => "deconv",
            LayerOp::Linear { .. } => "linear",
            LayerOp::Norm(_) => "norm",
            LayerOp::Activation(_) => "activation",
            LayerOp::Spap(_) => "spap",
            LayerOp::AtrousDisc { .. } => "atrous_disc",
            LayerOp::Reshape { .. } => "reshape",
            LayerOp::ResBlock { .. } => "resblock",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub label: String,
    pub op: LayerOp,
}

/// A named, shape-checked layer stack over a `(c, h, w)` input.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchSpec {
    pub name: String,
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

const KINDS: [&str; 9] = ["conv", "deconv", "linear", "norm", "activation", "spap", "atrous_disc", "reshape", "resblock"];

struct Fields {
    line: usize,
    map: BTreeMap<String, String>,
}

impl Fields {
    fn parse(line: usize, tokens: &[&str]) -> Result<Self> {
        let mut map = BTreeMap::new();
        for t in tokens {
            let (k, v) = t.split_once('=').ok_or_else(|| Error::Parse { line, msg: format!("expected key=value, got `{t}`") })?;
            if map.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Parse { line, msg: format!("duplicate key `{k}`") });
            }
        }
        Ok(Fields { line, map })
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse { line: self.line, msg: msg.into() }
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn uint(&mut self, key: &str, default: Option<usize>, min: usize) -> Result<usize> {
        let v = match self.take(key) {
            Some(s) => s.parse::<usize>().map_err(|_| self.err(format!("`{key}` must be a non-negative integer, got `{s}`")))?,
            None => default.ok_or_else(|| self.err(format!("missing `{key}`")))?,
        };
        if v < min {
            return Err(self.err(format!("`{key}` must be at least {min}, got {v}")));
        }
        Ok(v)
    }

    fn flag(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.take(key).as_deref() {
            None => Ok(default),
            Some("1" | "true") => Ok(true),
            Some("0" | "false") => Ok(false),
            Some(s) => Err(self.err(format!("`{key}` must be 0/1, got `{s}`"))),
        }
    }

    fn real(&mut self, key: &str, default: f64) -> Result<f64> {
        match self.take(key) {
            None => Ok(default),
            Some(s) => s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| self.err(format!("`{key}` must be a finite number, got `{s}`"))),
        }
    }

    fn parsed<V: std::str::FromStr<Err = Error>>(&mut self, key: &str) -> Result<Option<V>> {
        self.take(key).map(|s| s.parse::<V>().map_err(|e| self.err(e.to_string()))).transpose()
    }

    fn rates(&mut self, default: &[usize]) -> Result<Vec<usize>> {
        match self.take("rates") {
            None => Ok(default.to_vec()),
            Some(s) => s
                .split(',')
                .map(|r| r.trim().parse::<usize>().ok().filter(|&r| r >= 1))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| self.err(format!("bad rate list `{s}`"))),
        }
    }

    fn post(&mut self) -> Result<Post> {
        Ok(Post { norm: self.parsed("norm")?, act: self.parsed("act")? })
    }

    fn finish(self) -> Result<()> {
        match self.map.keys().next() {
            Some(k) => Err(self.err(format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }
}

fn parse_op(kind: &str, f: &mut Fields, channels: usize) -> Result<LayerOp> {
    Ok(match kind {
        "conv" | "deconv" => {
            let spec = ConvSpec {
                k: f.uint("k", None, 1)?,
                stride: f.uint("s", Some(1), 1)?,
                pad: f.uint("p", Some(0), 0)?,
                dilation: if kind == "conv" { f.uint("d", Some(1), 1)? } else { 1 },
                out: f.uint("c", None, 1)?,
                sn: f.flag("sn", false)?,
                post: f.post()?,
            };
            if kind == "conv" {
                LayerOp::Conv(spec)
            } else {
                LayerOp::Deconv(spec)
            }
        }
        "linear" => LayerOp::Linear { out: f.uint("c", None, 1)?, sn: f.flag("sn", false)?, post: f.post()? },
        "norm" => LayerOp::Norm(f.parsed("type")?.ok_or_else(|| f.err("missing `type`"))?),
        "activation" => LayerOp::Activation(f.parsed("act")?.ok_or_else(|| f.err("missing `act`"))?),
        "spap" => {
            let order: CascadeOrder = f.parsed("order")?.unwrap_or_default();
            let mut cfg = SpapConfig::new(channels, f.rates(&[3, 5, 7])?, order);
            cfg.include_rate1_3x3 = f.flag("r1", true)?;
            cfg.include_1x1 = f.flag("c1", true)?;
            cfg.gamma_init = f.real("gamma", 0.0)?;
            cfg.spectral = f.flag("sn", false)?;
            let defaults = GateSpec::default();
            cfg.gate = GateSpec {
                hidden_divisor: f.uint("gate_div", Some(defaults.hidden_divisor), 1)?,
                kernel: f.uint("gate_k", Some(defaults.kernel), 1)?,
                slope: f.real("gate_slope", defaults.slope)?,
            };
            cfg.validate().map_err(|e| f.err(e.to_string()))?;
            LayerOp::Spap(cfg)
        }
        "atrous_disc" => {
            let atrous = AtrousSpec {
                kernel: f.uint("k", None, 1)?,
                stride: f.uint("s", Some(1), 1)?,
                pad: f.uint("p", Some(0), 0)?,
                rates: f.rates(&[3, 5, 7])?,
                branch_kernel: f.uint("bk", Some(3), 1)?,
            };
            if atrous.rates.is_empty() {
                return Err(f.err("atrous_disc needs at least one rate"));
            }
            LayerOp::AtrousDisc { atrous, out: f.uint("c", None, 1)?, sn: f.flag("sn", false)?, post: f.post()? }
        }
        "reshape" => LayerOp::Reshape { c: f.uint("c", None, 1)?, h: f.uint("h", None, 1)?, w: f.uint("w", None, 1)? },
        "resblock" => {
            let k = f.uint("k", Some(3), 1)?;
            if k % 2 == 0 {
                return Err(f.err("resblock kernel must be odd"));
            }
            LayerOp::ResBlock { k, norm: f.parsed("norm")?, act: f.parsed("act")?.unwrap_or(Activation::Relu) }
        }
        other => return Err(f.err(format!("unknown layer kind `{other}` (expected one of {})", KINDS.join(", ")))),
    })
}

impl ArchSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let mut name = String::from("unnamed");
        let mut input: Option<[usize; 3]> = None;
        let mut layers = Vec::new();
        let mut counts: BTreeMap<&'static str, usize> = BTreeMap::new();
        let mut labels = HashSet::new();
        let mut shape = [0; 3];
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            let tokens: Vec<&str> = content.split_whitespace().collect();
            let Some((&head, rest)) = tokens.split_first() else { continue };
            match head {
                "name" => {
                    name = rest.first().ok_or(Error::Parse { line, msg: "missing name".into() })?.to_string();
                }
                "input" => {
                    if input.is_some() {
                        return Err(Error::Parse { line, msg: "duplicate input line".into() });
                    }
                    let mut f = Fields::parse(line, rest)?;
                    let dims = [f.uint("c", None, 1)?, f.uint("h", Some(1), 1)?, f.uint("w", Some(1), 1)?];
                    f.finish()?;
                    input = Some(dims);
                    shape = dims;
                }
                kind => {
                    if input.is_none() {
                        return Err(Error::Parse { line, msg: "layers must follow the `input` line".into() });
                    }
                    let mut f = Fields::parse(line, rest)?;
                    let explicit = f.take("label");
                    let op = parse_op(kind, &mut f, shape[0])?;
                    f.finish()?;
                    let n = counts.entry(op.kind()).or_default();
                    let label = explicit.unwrap_or_else(|| format!("{}{}", op.kind(), n));
                    *n += 1;
                    if !labels.insert(label.clone()) {
                        return Err(Error::Parse { line, msg: format!("duplicate label `{label}`") });
                    }
                    let layer = LayerSpec { label, op };
                    shape = analysis::output_shape(&layer.op, shape).map_err(|e| Error::Parse { line, msg: e.to_string() })?;
                    layers.push(layer);
                }
            }
        }
        let input = input.ok_or(Error::Parse { line: text.lines().count().max(1), msg: "missing `input` line".into() })?;
        Ok(ArchSpec { name, input, layers })
    }

    /// Canonical text form; parsing it yields an equal spec.
    pub fn to_text(&self) -> String {
        let mut out = format!("name {}\ninput c={} h={} w={}\n", self.name, self.input[0], self.input[1], self.input[2]);
        let mut counts: BTreeMap<&'static str, usize> = BTreeMap::new();
        for layer in &self.layers {
            let kind = layer.op.kind();
            let n = counts.entry(kind).or_default();
            let default_label = format!("{kind}{n}");
            *n += 1;
            let mut line = kind.to_string();
            let mut kv = |k: &str, v: String| {
                let _ = write!(line, " {k}={v}");
            };
            let post = |kv: &mut dyn FnMut(&str, String), p: &Post| {
                if let Some(n) = p.norm {
                    kv("norm", n.to_string());
                }
                if let Some(a) = p.act {
                    kv("act", a.to_string());
                }
            };
            let rates = |r: &[usize]| r.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
            match &layer.op {
                LayerOp::Conv(c) | LayerOp::Deconv(c) => {
                    kv("k", c.k.to_string());
                    kv("s", c.stride.to_string());
                    kv("p", c.pad.to_string());
                    if c.dilation != 1 {
                        kv("d", c.dilation.to_string());
                    }
                    kv("c", c.out.to_string());
                    if c.sn {
                        kv("sn", "1".into());
                    }
                    post(&mut kv, &c.post);
                }
                LayerOp::Linear { out, sn, post: p } => {
                    kv("c", out.to_string());
                    if *sn {
                        kv("sn", "1".into());
                    }
                    post(&mut kv, p);
                }
                LayerOp::Norm(n) => kv("type", n.to_string()),
                LayerOp::Activation(a) => kv("act", a.to_string()),
                LayerOp::Spap(cfg) => {
                    kv("rates", rates(&cfg.rates));
                    kv("order", cfg.order.to_string());
                    if !cfg.include_rate1_3x3 {
                        kv("r1", "0".into());
                    }
                    if !cfg.include_1x1 {
                        kv("c1", "0".into());
                    }
                    if cfg.gamma_init != 0.0 {
                        kv("gamma", cfg.gamma_init.to_string());
                    }
                    if cfg.spectral {
                        kv("sn", "1".into());
                    }
                    let d = GateSpec::default();
                    if cfg.gate != d {
                        kv("gate_div", cfg.gate.hidden_divisor.to_string());
                        kv("gate_k", cfg.gate.kernel.to_string());
                        kv("gate_slope", cfg.gate.slope.to_string());
                    }
                }
                LayerOp::AtrousDisc { atrous, out, sn, post: p } => {
                    kv("k", atrous.kernel.to_string());
                    kv("s", atrous.stride.to_string());
                    kv("p", atrous.pad.to_string());
                    kv("c", out.to_string());
                    kv("rates", rates(&atrous.rates));
                    kv("bk", atrous.branch_kernel.to_string());
                    if *sn {
                        kv("sn", "1".into());
                    }
                    post(&mut kv, p);
                }
                LayerOp::Reshape { c, h, w } => {
                    kv("c", c.to_string());
                    kv("h", h.to_string());
                    kv("w", w.to_string());
                }
                LayerOp::ResBlock { k, norm, act } => {
                    kv("k", k.to_string());
                    if let Some(n) = norm {
                        kv("norm", n.to_string());
                    }
                    kv("act", act.to_string());
                }
            }
            if layer.label != default_label {
                kv("label", layer.label.clone());
            }
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    /// `(c, h, w)` after each layer.
    pub fn shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut shape = self.input;
        self.layers
            .iter()
            .map(|l| {
                shape = analysis::output_shape(&l.op, shape)?;
                Ok(shape)
            })
            .collect()
    }

    pub fn output_shape(&self) -> Result<[usize; 3]> {
        Ok(self.shapes()?.last().copied().unwrap_or(self.input))
    }

    pub fn layer(&self, label: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.label == label)
    }
}
