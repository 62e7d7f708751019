//! Text container for network parameters and state.
//!
//! ```text
//! spap-checkpoint 1
//! meta step 500
//! param gen/deconv0.weight 64,32,4,4 0.0123 -0.5 ...
//! state gen/deconv0.weight.u 64 0.1 ...
//! ```
//!
//! One record per line. Keys contain no whitespace, shapes are comma separated,
//! and values use the shortest decimal form that parses back to the same `f64`,
//! so a save/load cycle is bit exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::arch::Network;
use crate::error::{Error, Result};
use crate::Tensor;

const MAGIC: &str = "spap-checkpoint 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub params: BTreeMap<String, Tensor>,
    pub state: BTreeMap<String, Vec<f64>>,
}

fn check_key(key: &str) -> Result<()> {
    if key.is_empty() || key.contains(char::is_whitespace) {
        return Err(Error::Checkpoint(format!("invalid key {key:?}")));
    }
    Ok(())
}

fn push_values(out: &mut String, values: &[f64]) {
    for v in values {
        write!(out, " {v}").expect("writing to a String");
    }
    out.push('\n');
}

fn parse_values<'a>(line: usize, it: impl Iterator<Item = &'a str>) -> Result<Vec<f64>> {
    it.map(|s| s.parse::<f64>().map_err(|_| Error::Parse { line, msg: format!("bad number `{s}`") }))
        .collect()
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    /// Adds every parameter and state vector of `net` under `prefix/`.
    pub fn insert_network(&mut self, prefix: &str, net: &mut Network<f64>) {
        for e in net.store.entries() {
            let t = Tensor::new(e.tensor.shape(), e.tensor.values().to_vec()).expect("shape of a live tensor");
            self.params.insert(format!("{prefix}/{}", e.path), t);
        }
        for (k, v) in net.state() {
            self.state.insert(format!("{prefix}/{k}"), v);
        }
    }

    /// Loads `prefix/` entries into `net`; fails unless every parameter is
    /// present with the same shape and no foreign parameter is left over.
    pub fn restore_network(&self, prefix: &str, net: &mut Network<f64>) -> Result<()> {
        let head = format!("{prefix}/");
        let ids: Vec<_> = net.store.ids().collect();
        for &id in &ids {
            let path = net.store.entry(id).path.clone();
            let src = self
                .params
                .get(&format!("{head}{path}"))
                .ok_or_else(|| Error::Checkpoint(format!("parameter `{head}{path}` missing")))?;
            let dst = net.store.get_mut(id);
            if src.shape() != dst.shape() {
                return Err(Error::Checkpoint(format!("`{head}{path}` has shape {:?}, network expects {:?}", src.shape(), dst.shape())));
            }
            dst.values_mut().copy_from_slice(src.values());
        }
        let expected = self.params.keys().filter(|k| k.starts_with(&head)).count();
        if expected != ids.len() {
            return Err(Error::Checkpoint(format!("checkpoint has {expected} `{prefix}` parameters, network has {}", ids.len())));
        }
        net.set_state(&|k| self.state.get(&format!("{head}{k}")).cloned())
    }

    pub fn to_text(&self) -> Result<String> {
        let mut out = format!("{MAGIC}\n");
        for (k, v) in &self.meta {
            check_key(k)?;
            if v.contains('\n') {
                return Err(Error::Checkpoint(format!("meta `{k}` spans lines")));
            }
            writeln!(out, "meta {k} {v}").expect("writing to a String");
        }
        for (k, t) in &self.params {
            check_key(k)?;
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            write!(out, "param {k} {}", shape.join(",")).expect("writing to a String");
            push_values(&mut out, t.values());
        }
        for (k, v) in &self.state {
            check_key(k)?;
            write!(out, "state {k} {}", v.len()).expect("writing to a String");
            push_values(&mut out, v);
        }
        Ok(out)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l.trim_end() == MAGIC => {}
            _ => return Err(Error::Checkpoint(format!("missing `{MAGIC}` header"))),
        }
        let mut ck = Checkpoint::new();
        for (line, l) in lines {
            if l.trim().is_empty() {
                continue;
            }
            let mut words = l.split_ascii_whitespace();
            let kind = words.next().unwrap_or_default();
            let key = words.next().ok_or(Error::Parse { line, msg: "missing key".into() })?.to_string();
            let dup = |present: bool| if present { Err(Error::Parse { line, msg: format!("duplicate key `{key}`") }) } else { Ok(()) };
            match kind {
                "meta" => {
                    let rest = l.splitn(3, ' ').nth(2).unwrap_or("").to_string();
                    dup(ck.meta.insert(key.clone(), rest).is_some())?;
                }
                "param" => {
                    let shape = words
                        .next()
                        .ok_or(Error::Parse { line, msg: "missing shape".into() })?
                        .split(',')
                        .map(|d| d.parse::<usize>().map_err(|_| Error::Parse { line, msg: format!("bad shape `{d}`") }))
                        .collect::<Result<Vec<_>>>()?;
                    let t = Tensor::new(&shape, parse_values(line, words)?).map_err(|e| Error::Parse { line, msg: e.to_string() })?;
                    dup(ck.params.insert(key.clone(), t).is_some())?;
                }
                "state" => {
                    let n: usize = words
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or(Error::Parse { line, msg: "missing length".into() })?;
                    let v = parse_values(line, words)?;
                    if v.len() != n {
                        return Err(Error::Parse { line, msg: format!("expected {n} values, got {}", v.len()) });
                    }
                    dup(ck.state.insert(key.clone(), v).is_some())?;
                }
                other => return Err(Error::Parse { line, msg: format!("unknown record `{other}`") }),
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_text()?)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_text(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}
