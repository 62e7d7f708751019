use std::path::Path;

use spap_core::arch::Network;
use spap_core::checkpoint::Checkpoint;
use spap_core::nn::Mode;
use spap_core::rng::{self, derive_seed};
use spap_core::train::sample_latent;
use spap_core::{pnm, Tensor};

use crate::args::AttentionArgs;
use crate::error::CliError;
use crate::load;

fn image_name(sample: usize, channels: usize) -> String {
    let ext = if channels == 1 { "pgm" } else { "ppm" };
    format!("s{sample}_output.{ext}")
}

/// Runs the generator in eval mode and writes, for every sample, one map per
/// fusion step as `s{sample}_{step}_{label}.pgm` plus the synthesized image.
pub fn run(a: AttentionArgs) -> Result<(), CliError> {
    let spec = load::arch(&a.arch)?;
    eprintln!("# dump-attention arch={} prefix={} seed={}", a.arch, a.prefix, a.seed);
    let mut net = Network::<f64>::new(&spec, derive_seed(a.seed, &format!("init/{}", a.prefix)))?;
    if let Some(path) = &a.checkpoint {
        eprintln!("# checkpoint: {}", path.display());
        if !path.is_file() {
            return Err(CliError::usage(format!("checkpoint `{}` not found", path.display())));
        }
        Checkpoint::load(path)?.restore_network(&a.prefix, &mut net)?;
    }
    if net.spap_blocks().next().is_none() {
        return Err(CliError::usage(format!("`{}` has no SPAP block", a.arch)));
    }

    let input = match &a.input {
        Some(dir) => {
            eprintln!("# input: {}", dir.display());
            load_inputs(dir, spec.input)?
        }
        None => {
            let [dz, h, w] = spec.input;
            if h != 1 || w != 1 {
                return Err(CliError::usage(format!("`{}` takes {dz}x{h}x{w} images; pass --input", a.arch)));
            }
            sample_latent(&mut rng::stream(a.seed, "dump/z"), a.samples, dz)?
        }
    };

    let (out, records) = net.run_recording(&input, Mode::Eval)?;
    std::fs::create_dir_all(&a.out)?;
    let n = input.shape()[0];
    for s in 0..n {
        for (k, rec) in records.iter().enumerate() {
            let alpha = rec.alpha.slice_batch(s, 1)?;
            let (_, _, h, w) = alpha.dims4()?;
            let img = alpha.reshape(&[1, h, w])?;
            pnm::write(&a.out.join(format!("s{s}_{k}_{}.pgm", rec.label)), &img)?;
        }
        let (_, c, h, w) = out.dims4()?;
        let img = out.slice_batch(s, 1)?.reshape(&[c, h, w])?.map(|v| (v + 1.0) / 2.0);
        pnm::write(&a.out.join(image_name(s, c)), &img)?;
    }
    println!("{n} samples, {} maps each, written to {}", records.len(), a.out.display());
    Ok(())
}

fn load_inputs(dir: &Path, expect: [usize; 3]) -> Result<Tensor, CliError> {
    if !dir.is_dir() {
        return Err(CliError::usage(format!("`{}` is not a directory", dir.display())));
    }
    let x = pnm::read_dir(dir)?;
    if x.shape()[1..] != expect {
        return Err(CliError::usage(format!("images are {:?}, the network takes {expect:?}", &x.shape()[1..])));
    }
    Ok(x.map(|v| 2.0 * v - 1.0))
}
