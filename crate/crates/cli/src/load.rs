use std::path::Path;

use spap_core::arch::{presets, ArchSpec};
use spap_core::rng::derive_seed;
use spap_core::train::{ToySpec, TrainConfig};

use crate::error::{read_input, CliError};

/// An architecture file, or a built-in preset when no such file exists.
pub fn arch(source: &str) -> Result<ArchSpec, CliError> {
    let path = Path::new(source);
    let text = if path.exists() {
        read_input(path, "architecture")?
    } else if let Some(text) = presets::get(source) {
        text.to_string()
    } else {
        let names: Vec<_> = presets::ALL.iter().map(|(n, _)| *n).collect();
        return Err(CliError::usage(format!("`{source}` is neither a file nor a preset ({})", names.join(", "))));
    };
    ArchSpec::parse(&text).map_err(|e| CliError::usage(format!("{source}: {e}")))
}

/// Desk-scale defaults overridden by the config file, then by flags.
pub fn config(path: Option<&Path>, seed: Option<u64>, steps: Option<usize>) -> Result<TrainConfig, CliError> {
    let mut cfg = TrainConfig::desk();
    if let Some(p) = path {
        let text = read_input(p, "config")?;
        cfg = cfg.apply_text(&text).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = steps {
        cfg.total_steps = n;
    }
    cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
    Ok(cfg)
}

/// Toy images matching a `(c, h, w)` image shape, drawn from the run seed.
pub fn toy(shape: [usize; 3], seed: u64) -> Result<ToySpec, CliError> {
    let [c, h, w] = shape;
    if h != w {
        return Err(CliError::usage(format!("toy images are square, the network works on {h}x{w}")));
    }
    let mut spec = ToySpec::new(h, derive_seed(seed, "data"));
    spec.channels = c;
    spec.validate().map_err(|e| CliError::usage(e.to_string()))?;
    Ok(spec)
}
