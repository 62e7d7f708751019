use std::collections::BTreeSet;
use std::path::Path;

use serde::Serialize;
use spap_core::metrics::{fid, psnr, ssim, Embedding};
use spap_core::{pnm, Tensor};

use crate::args::{FidArgs, Metric, MetricsArgs, PairArgs};
use crate::error::CliError;

fn images(dir: &Path) -> Result<Tensor, CliError> {
    if !dir.is_dir() {
        return Err(CliError::usage(format!("`{}` is not a directory", dir.display())));
    }
    // the embedding sees images on the generator's [-1, 1] scale
    Ok(pnm::read_dir(dir)?.map(|v| 2.0 * v - 1.0))
}

#[derive(Serialize)]
struct FidReport {
    fid: f64,
    n_a: usize,
    n_b: usize,
    seed: u64,
}

fn run_fid(a: FidArgs) -> Result<(), CliError> {
    eprintln!("# metrics fid a={} b={} seed={}", a.a.display(), a.b.display(), a.seed);
    let (xa, xb) = (images(&a.a)?, images(&a.b)?);
    let shape = |t: &Tensor| [t.shape()[1], t.shape()[2], t.shape()[3]];
    if shape(&xa) != shape(&xb) {
        return Err(CliError::usage(format!("image shapes differ: {:?} vs {:?}", shape(&xa), shape(&xb))));
    }
    let emb = Embedding::new(shape(&xa), a.seed)?;
    let report = FidReport { fid: fid(&emb.stats(&xa)?, &emb.stats(&xb)?)?, n_a: xa.shape()[0], n_b: xb.shape()[0], seed: a.seed };
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!("fid,n_a,n_b,seed");
        println!("{},{},{},{}", report.fid, report.n_a, report.n_b, report.seed);
    }
    Ok(())
}

#[derive(Serialize)]
struct PairRow {
    file: String,
    psnr: f64,
    ssim: f64,
}

#[derive(Serialize)]
struct PairReport {
    pairs: Vec<PairRow>,
    mean_psnr: f64,
    mean_ssim: f64,
}

fn names(dir: &Path) -> Result<BTreeSet<String>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::usage(format!("`{}` is not a directory", dir.display())));
    }
    Ok(pnm::list_dir(dir)?.iter().filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned())).collect())
}

fn run_pairs(a: PairArgs) -> Result<(), CliError> {
    eprintln!("# metrics psnr-ssim a={} b={}", a.a.display(), a.b.display());
    let (na, nb) = (names(&a.a)?, names(&a.b)?);
    let common: Vec<_> = na.intersection(&nb).cloned().collect();
    if common.is_empty() {
        return Err(CliError::usage("the directories share no image file names"));
    }
    let mut pairs = Vec::new();
    for file in common {
        let x = pnm::read(&a.a.join(&file))?;
        let y = pnm::read(&a.b.join(&file))?;
        pairs.push(PairRow { psnr: psnr(&x, &y, 1.0)?, ssim: ssim(&x, &y, 1.0)?, file });
    }
    let n = pairs.len() as f64;
    let report = PairReport {
        mean_psnr: pairs.iter().map(|p| p.psnr).sum::<f64>() / n,
        mean_ssim: pairs.iter().map(|p| p.ssim).sum::<f64>() / n,
        pairs,
    };
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!("file,psnr,ssim");
        for p in &report.pairs {
            println!("{},{},{}", p.file, p.psnr, p.ssim);
        }
        println!("mean,{},{}", report.mean_psnr, report.mean_ssim);
    }
    Ok(())
}

pub fn run(a: MetricsArgs) -> Result<(), CliError> {
    match a.metric {
        Metric::Fid(f) => run_fid(f),
        Metric::PsnrSsim(p) => run_pairs(p),
    }
}
