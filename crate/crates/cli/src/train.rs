use spap_core::train::{self, CycleSpecs};

use crate::args::{CycleArgs, TrainArgs};
use crate::error::CliError;
use crate::load;

fn announce(kind: &str, nets: &[(&str, &str)], cfg: &train::TrainConfig) {
    eprintln!("# {kind}");
    for (role, name) in nets {
        eprintln!("# {role}: {name}");
    }
    eprintln!("# seed: {}", cfg.seed);
    eprint!("{cfg}");
}

fn summary(log: &[train::LogRow]) {
    if let Some(last) = log.last() {
        let show = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
        println!("step {} fid {} psnr {} ssim {}", last.step, show(last.fid), show(last.psnr), show(last.ssim));
    }
}

pub fn gan(a: TrainArgs) -> Result<(), CliError> {
    let cfg = load::config(a.config.as_deref(), a.seed, a.steps)?;
    let gen = load::arch(&a.gen)?;
    let disc = load::arch(&a.disc)?;
    announce("train", &[("gen", &a.gen), ("disc", &a.disc)], &cfg);
    let data = load::toy(gen.output_shape()?, cfg.seed)?;
    std::fs::create_dir_all(&a.out)?;
    let out = train::train_gan(&gen, &disc, &cfg, &data, Some(&a.out))?;
    summary(&out.log);
    Ok(())
}

pub fn cyclegan(a: CycleArgs) -> Result<(), CliError> {
    let cfg = load::config(a.config.as_deref(), a.seed, a.steps)?;
    let gen = load::arch(&a.gen)?;
    let disc = load::arch(&a.disc)?;
    announce("train-cyclegan", &[("g, f", &a.gen), ("dx, dy", &a.disc)], &cfg);
    let data = load::toy(gen.input, cfg.seed)?;
    std::fs::create_dir_all(&a.out)?;
    let specs = CycleSpecs { g: &gen, f: &gen, dx: &disc, dy: &disc };
    let out = train::train_cyclegan(specs, &cfg, &data, Some(&a.out))?;
    summary(&out.log);
    Ok(())
}
