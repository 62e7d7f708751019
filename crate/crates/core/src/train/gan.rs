use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use super::loss::{disc_loss_stacked, gen_loss, GenLoss};
use super::toy::{gen_toy_dataset, ToySpec};
use super::{check_finite, checkpoint_path, is_active, Adam, LogRow, MetricsLog, TrainConfig, DIVERGED_CHECKPOINT, METRICS_FILE};
use crate::arch::{ArchSpec, Network};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::metrics::{fid, Embedding, GaussianStats};
use crate::nn::{Bind, Mode};
use crate::rng::{self, derive_seed};
use crate::{Graph, Tensor};

/// Index of the first held-out image; training batches never reach it.
const EVAL_OFFSET: u64 = 1 << 40;

pub struct GanOutcome {
    pub gen: Network<f64>,
    pub disc: Network<f64>,
    pub log: Vec<LogRow>,
}

/// `n` standard-normal latent vectors shaped `(n, dz, 1, 1)`.
pub fn sample_latent(r: &mut rng::Rng, n: usize, dz: usize) -> Result<Tensor> {
    Tensor::from_fn(&[n, dz, 1, 1], |_| StandardNormal.sample(&mut *r))
}

struct FidProbe {
    embed: Embedding,
    real: GaussianStats,
    z: Tensor,
}

impl FidProbe {
    fn new(cfg: &TrainConfig, data: &ToySpec) -> Result<Self> {
        let embed = Embedding::new([data.channels, data.size, data.size], derive_seed(cfg.seed, "embed"))?;
        let real = embed.stats(&gen_toy_dataset(data, EVAL_OFFSET, cfg.fid_samples)?)?;
        let z = sample_latent(&mut rng::stream(cfg.seed, "eval/z"), cfg.fid_samples, cfg.dz)?;
        Ok(FidProbe { embed, real, z })
    }

    fn measure(&self, gen: &mut Network<f64>) -> Result<f64> {
        let fake = gen.run(&self.z, Mode::Eval)?;
        fid(&self.embed.stats(&fake)?, &self.real)
    }
}

fn check_shapes(gen: &ArchSpec, disc: &ArchSpec, cfg: &TrainConfig, data: &ToySpec) -> Result<()> {
    if gen.input != [cfg.dz, 1, 1] {
        return Err(Error::Config(format!("generator input {:?} does not take a latent of size dz = {}", gen.input, cfg.dz)));
    }
    let image = [data.channels, data.size, data.size];
    if gen.output_shape()? != image || disc.input != image {
        return Err(Error::Config(format!(
            "generator output {:?} and discriminator input {:?} must both be the data shape {image:?}",
            gen.output_shape()?,
            disc.input
        )));
    }
    Ok(())
}

/// Networks and optimizer state of an alternating GAN run.
pub struct GanTrainer {
    pub gen: Network<f64>,
    pub disc: Network<f64>,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub cfg: TrainConfig,
    kind: GenLoss,
}

impl GanTrainer {
    pub fn new(gen_spec: &ArchSpec, disc_spec: &ArchSpec, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let gen = Network::<f64>::new(gen_spec, derive_seed(cfg.seed, "init/gen"))?;
        let disc = Network::<f64>::new(disc_spec, derive_seed(cfg.seed, "init/disc"))?;
        let opt_g = Adam::new(&gen.store, cfg.beta1, cfg.beta2, cfg.adam_eps);
        let opt_d = Adam::new(&disc.store, cfg.beta1, cfg.beta2, cfg.adam_eps);
        let kind = if cfg.minimax { GenLoss::Minimax } else { GenLoss::NonSaturating };
        Ok(GanTrainer { gen, disc, opt_g, opt_d, cfg: cfg.clone(), kind })
    }

    /// Differentiable generator pass; the graph is reused by [`generator_step`](Self::generator_step).
    pub fn generate(&mut self, z: &Tensor) -> Result<(Graph, Var)> {
        let mut g = Graph::new();
        let zv = g.constant(z);
        let fake = self.gen.forward(&mut g, zv, Bind::new(Mode::Train, true), None)?;
        Ok((g, fake))
    }

    /// One discriminator update on a real and a generated batch; returns its loss.
    pub fn discriminator_step(&mut self, step: usize, real: &Tensor, fake: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let both = g.constant(&Tensor::cat_batch(&[real, fake])?);
        let logits = self.disc.forward(&mut g, both, Bind::new(Mode::Train, true), None)?;
        let loss = disc_loss_stacked(&mut g, logits, real.shape()[0])?;
        let v = g.scalar(loss)?;
        check_finite(step, "discriminator loss", v)?;
        let grads = g.backward(loss)?;
        self.disc.store.accumulate(&g, &grads)?;
        let start = self.cfg.spap_update_start;
        self.opt_d.step(&mut self.disc.store, self.cfg.lr_at(self.cfg.lr_d, step), |e| is_active(e, step, start))?;
        Ok(v)
    }

    /// One generator update through the (frozen) discriminator; returns its loss.
    pub fn generator_step(&mut self, step: usize, g: &mut Graph, fake: Var) -> Result<f64> {
        let d_fake = self.disc.forward(g, fake, Bind::frozen(Mode::Sample), None)?;
        let loss = gen_loss(g, d_fake, self.kind)?;
        let v = g.scalar(loss)?;
        check_finite(step, "generator loss", v)?;
        let grads = g.backward(loss)?;
        self.gen.store.accumulate(g, &grads)?;
        let start = self.cfg.spap_update_start;
        self.opt_g.step(&mut self.gen.store, self.cfg.lr_at(self.cfg.lr_g, step), |e| is_active(e, step, start))?;
        Ok(v)
    }

    /// Discriminator then generator update; returns `(loss_d, loss_g)`.
    pub fn step(&mut self, step: usize, real: &Tensor, z: &Tensor) -> Result<(f64, f64)> {
        let (mut g, fake) = self.generate(z)?;
        let ld = self.discriminator_step(step, real, &g.tensor(fake)?)?;
        let lg = self.generator_step(step, &mut g, fake)?;
        Ok((ld, lg))
    }

    pub fn checkpoint(&mut self, file: &Path, step: usize) -> Result<()> {
        let mut ck = Checkpoint::new();
        ck.set_meta("step", step);
        ck.set_meta("seed", self.cfg.seed);
        ck.set_meta("gen", &self.gen.spec.name);
        ck.set_meta("disc", &self.disc.spec.name);
        ck.insert_network("gen", &mut self.gen);
        ck.insert_network("disc", &mut self.disc);
        ck.save(file)
    }
}

pub fn train_gan(gen_spec: &ArchSpec, disc_spec: &ArchSpec, cfg: &TrainConfig, data: &ToySpec, out_dir: Option<&Path>) -> Result<GanOutcome> {
    train_gan_observed(gen_spec, disc_spec, cfg, data, out_dir, &mut |_, _, _| Ok(()))
}

/// Alternating discriminator/generator training on toy data, with FID probes
/// every `metrics_every` steps, a CSV log and checkpoints under `out_dir`.
///
/// `observe(step, gen, disc)` sees the networks after `step` updates, for every
/// step from 0 to `total_steps`.
pub fn train_gan_observed(
    gen_spec: &ArchSpec,
    disc_spec: &ArchSpec,
    cfg: &TrainConfig,
    data: &ToySpec,
    out_dir: Option<&Path>,
    observe: &mut dyn FnMut(usize, &mut Network<f64>, &mut Network<f64>) -> Result<()>,
) -> Result<GanOutcome> {
    check_shapes(gen_spec, disc_spec, cfg, data)?;
    let mut t = GanTrainer::new(gen_spec, disc_spec, cfg)?;
    let probe = FidProbe::new(cfg, data)?;
    let mut log = MetricsLog::new(out_dir.map(|d| d.join(METRICS_FILE)).as_deref())?;
    let mut zs = rng::stream(cfg.seed, "z");
    let b = cfg.batch_size;

    for step in 0..=cfg.total_steps {
        observe(step, &mut t.gen, &mut t.disc)?;
        let mut row = LogRow { step, gamma: t.gen.gammas().first().copied(), ..LogRow::default() };
        if step % cfg.metrics_every == 0 || step == cfg.total_steps {
            row.fid = Some(probe.measure(&mut t.gen)?);
        }
        if step == cfg.total_steps {
            log.push(row)?;
            break;
        }
        let real = gen_toy_dataset(data, (step * b) as u64, b)?;
        let z = sample_latent(&mut zs, b, cfg.dz)?;
        let (ld, lg) = match t.step(step, &real, &z) {
            Ok(v) => v,
            Err(e) => {
                if let Some(dir) = out_dir {
                    t.checkpoint(&dir.join(DIVERGED_CHECKPOINT), step)?;
                }
                return Err(e);
            }
        };
        row.loss_d = Some(ld);
        row.loss_g = Some(lg);
        log.push(row)?;
        let done = step + 1;
        if let Some(dir) = out_dir {
            if done == cfg.total_steps || (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
                t.checkpoint(&checkpoint_path(dir, done), done)?;
            }
        }
    }
    Ok(GanOutcome { gen: t.gen, disc: t.disc, log: log.rows })
}
