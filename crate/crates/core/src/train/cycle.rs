use std::path::Path;

use super::loss::{cycle_loss, disc_loss_stacked, gen_loss, GenLoss};
use super::toy::{gen_paired_domains, ToySpec};
use super::{check_finite, checkpoint_path, is_active, Adam, LogRow, MetricsLog, TrainConfig, DIVERGED_CHECKPOINT, METRICS_FILE};
use crate::arch::{ArchSpec, Network};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::metrics::{psnr, ssim};
use crate::nn::{Bind, Mode};
use crate::rng::derive_seed;
use crate::{Graph, Tensor};

const EVAL_OFFSET: u64 = 1 << 40;
/// Offset separating the `y` training stream from the `x` one, so batches are unpaired.
const Y_OFFSET: u64 = 1 << 32;
const EVAL_PAIRS: usize = 16;

#[derive(Clone, Copy, Debug)]
pub struct CycleSpecs<'a> {
    /// Translator X → Y.
    pub g: &'a ArchSpec,
    /// Translator Y → X.
    pub f: &'a ArchSpec,
    pub dx: &'a ArchSpec,
    pub dy: &'a ArchSpec,
}

pub struct CycleNets {
    pub g: Network<f64>,
    pub f: Network<f64>,
    pub dx: Network<f64>,
    pub dy: Network<f64>,
}

impl CycleNets {
    pub fn new(specs: CycleSpecs<'_>, seed: u64) -> Result<Self> {
        let shape = specs.g.input;
        for (name, s, out) in [("g", specs.g, true), ("f", specs.f, true), ("dx", specs.dx, false), ("dy", specs.dy, false)] {
            if s.input != shape || (out && s.output_shape()? != shape) {
                return Err(Error::Config(format!("network {name} ({}) does not map images of shape {shape:?}", s.name)));
            }
        }
        Ok(CycleNets {
            g: Network::new(specs.g, derive_seed(seed, "init/g"))?,
            f: Network::new(specs.f, derive_seed(seed, "init/f"))?,
            dx: Network::new(specs.dx, derive_seed(seed, "init/dx"))?,
            dy: Network::new(specs.dy, derive_seed(seed, "init/dy"))?,
        })
    }

    pub fn checkpoint(&mut self, file: &Path, step: usize, seed: u64) -> Result<()> {
        let mut ck = Checkpoint::new();
        ck.set_meta("step", step);
        ck.set_meta("seed", seed);
        for (prefix, net) in [("g", &mut self.g), ("f", &mut self.f), ("dx", &mut self.dx), ("dy", &mut self.dy)] {
            ck.set_meta(prefix, &net.spec.name);
            ck.insert_network(prefix, net);
        }
        ck.save(file)
    }
}

/// Generator-side quantities of one CycleGAN pass.
pub struct CycleTerms {
    pub fake_y: Var,
    pub rec_x: Var,
    pub fake_x: Var,
    pub rec_y: Var,
    /// Sum of both adversarial generator losses.
    pub adversarial: Var,
    /// Unweighted cycle-consistency loss.
    pub cycle: Var,
    /// `adversarial + lambda · cycle`.
    pub total: Var,
}

/// Translates both batches, reconstructs them, and scores the translations with
/// the frozen discriminators.
pub fn cyclegan_generator_terms(g: &mut Graph, nets: &mut CycleNets, x: Var, y: Var, lambda: f64, kind: GenLoss, bind: Bind) -> Result<CycleTerms> {
    if g.shape(x)? != g.shape(y)? {
        return Err(Error::ShapeMismatch { op: "cyclegan domains", left: g.shape(x)?.to_vec(), right: g.shape(y)?.to_vec() });
    }
    let fake_y = nets.g.forward(g, x, bind, None)?;
    let rec_x = nets.f.forward(g, fake_y, bind, None)?;
    let fake_x = nets.f.forward(g, y, bind, None)?;
    let rec_y = nets.g.forward(g, fake_x, bind, None)?;
    let judge = Bind::frozen(Mode::Sample);
    let dy = nets.dy.forward(g, fake_y, judge, None)?;
    let dx = nets.dx.forward(g, fake_x, judge, None)?;
    let adv_g = gen_loss(g, dy, kind)?;
    let adv_f = gen_loss(g, dx, kind)?;
    let adversarial = g.add(adv_g, adv_f)?;
    let cycle = cycle_loss(g, x, rec_x, y, rec_y)?;
    let weighted = g.scale(cycle, lambda)?;
    let total = g.add(adversarial, weighted)?;
    Ok(CycleTerms { fake_y, rec_x, fake_x, rec_y, adversarial, cycle, total })
}

pub struct CycleOutcome {
    pub nets: CycleNets,
    pub log: Vec<LogRow>,
}

fn unit_range(t: &Tensor) -> Tensor {
    t.map(|v| (v + 1.0) / 2.0)
}

struct PairProbe {
    x: Tensor,
    y: Tensor,
}

impl PairProbe {
    fn measure(&self, nets: &mut CycleNets) -> Result<(f64, f64)> {
        let out = unit_range(&nets.g.run(&self.x, Mode::Eval)?);
        let truth = unit_range(&self.y);
        Ok((psnr(&out, &truth, 1.0)?, ssim(&out, &truth, 1.0)?))
    }
}

/// Networks and optimizer state of an alternating CycleGAN run.
pub struct CycleTrainer {
    pub nets: CycleNets,
    pub opt_g: Adam,
    pub opt_f: Adam,
    pub opt_dx: Adam,
    pub opt_dy: Adam,
    pub cfg: TrainConfig,
    kind: GenLoss,
}

/// Scalars and translations from one translator update.
pub struct TranslatorStep {
    pub adversarial: f64,
    pub cycle: f64,
    pub fake_x: Tensor,
    pub fake_y: Tensor,
}

impl CycleTrainer {
    pub fn new(specs: CycleSpecs<'_>, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let nets = CycleNets::new(specs, cfg.seed)?;
        let adam = |n: &Network<f64>| Adam::new(&n.store, cfg.beta1, cfg.beta2, cfg.adam_eps);
        let kind = if cfg.minimax { GenLoss::Minimax } else { GenLoss::NonSaturating };
        Ok(CycleTrainer { opt_g: adam(&nets.g), opt_f: adam(&nets.f), opt_dx: adam(&nets.dx), opt_dy: adam(&nets.dy), nets, cfg: cfg.clone(), kind })
    }

    /// Updates both translators against the current discriminators.
    pub fn translator_step(&mut self, step: usize, x: &Tensor, y: &Tensor) -> Result<TranslatorStep> {
        let mut g = Graph::new();
        let (xv, yv) = (g.constant(x), g.constant(y));
        let t = cyclegan_generator_terms(&mut g, &mut self.nets, xv, yv, self.cfg.lambda_cyc, self.kind, Bind::new(Mode::Train, true))?;
        check_finite(step, "translator loss", g.scalar(t.total)?)?;
        let grads = g.backward(t.total)?;
        self.nets.g.store.accumulate(&g, &grads)?;
        self.nets.f.store.accumulate(&g, &grads)?;
        let lr = self.cfg.lr_at(self.cfg.lr_g, step);
        let start = self.cfg.spap_update_start;
        self.opt_g.step(&mut self.nets.g.store, lr, |e| is_active(e, step, start))?;
        self.opt_f.step(&mut self.nets.f.store, lr, |e| is_active(e, step, start))?;
        Ok(TranslatorStep { adversarial: g.scalar(t.adversarial)?, cycle: g.scalar(t.cycle)?, fake_x: g.tensor(t.fake_x)?, fake_y: g.tensor(t.fake_y)? })
    }

    /// Updates both discriminators on real batches and earlier translations.
    pub fn discriminator_step(&mut self, step: usize, x: &Tensor, y: &Tensor, fake_x: &Tensor, fake_y: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let ry = g.constant(&Tensor::cat_batch(&[y, fake_y])?);
        let rx = g.constant(&Tensor::cat_batch(&[x, fake_x])?);
        let ly = self.nets.dy.forward(&mut g, ry, Bind::new(Mode::Train, true), None)?;
        let lx = self.nets.dx.forward(&mut g, rx, Bind::new(Mode::Train, true), None)?;
        let dy_loss = disc_loss_stacked(&mut g, ly, y.shape()[0])?;
        let dx_loss = disc_loss_stacked(&mut g, lx, x.shape()[0])?;
        let loss = g.add(dy_loss, dx_loss)?;
        let v = g.scalar(loss)?;
        check_finite(step, "discriminator loss", v)?;
        let grads = g.backward(loss)?;
        self.nets.dx.store.accumulate(&g, &grads)?;
        self.nets.dy.store.accumulate(&g, &grads)?;
        let lr = self.cfg.lr_at(self.cfg.lr_d, step);
        let start = self.cfg.spap_update_start;
        self.opt_dx.step(&mut self.nets.dx.store, lr, |e| is_active(e, step, start))?;
        self.opt_dy.step(&mut self.nets.dy.store, lr, |e| is_active(e, step, start))?;
        Ok(v)
    }

    /// Translator then discriminator update; returns `(loss_d, adversarial, cycle)`.
    pub fn step(&mut self, step: usize, x: &Tensor, y: &Tensor) -> Result<(f64, f64, f64)> {
        let t = self.translator_step(step, x, y)?;
        let ld = self.discriminator_step(step, x, y, &t.fake_x, &t.fake_y)?;
        Ok((ld, t.adversarial, t.cycle))
    }
}

pub fn train_cyclegan(specs: CycleSpecs<'_>, cfg: &TrainConfig, data: &ToySpec, out_dir: Option<&Path>) -> Result<CycleOutcome> {
    train_cyclegan_observed(specs, cfg, data, out_dir, &mut |_, _| Ok(()))
}

/// Alternating translator/discriminator training on unpaired batches of the two
/// toy domains. The pairing is used only by the PSNR/SSIM probe, which compares
/// `G(x)` with the true `y` of held-out pairs.
pub fn train_cyclegan_observed(
    specs: CycleSpecs<'_>,
    cfg: &TrainConfig,
    data: &ToySpec,
    out_dir: Option<&Path>,
    observe: &mut dyn FnMut(usize, &mut CycleNets) -> Result<()>,
) -> Result<CycleOutcome> {
    if specs.g.input != [data.channels, data.size, data.size] {
        return Err(Error::Config(format!("translators take {:?}, data is {}x{}x{}", specs.g.input, data.channels, data.size, data.size)));
    }
    let mut t = CycleTrainer::new(specs, cfg)?;
    let (ex, ey) = gen_paired_domains(data, EVAL_OFFSET, EVAL_PAIRS)?;
    let probe = PairProbe { x: ex, y: ey };
    let mut log = MetricsLog::new(out_dir.map(|d| d.join(METRICS_FILE)).as_deref())?;
    let b = cfg.batch_size;

    for step in 0..=cfg.total_steps {
        observe(step, &mut t.nets)?;
        let mut row = LogRow { step, gamma: t.nets.g.gammas().first().copied(), ..LogRow::default() };
        if step % cfg.metrics_every == 0 || step == cfg.total_steps {
            let (p, s) = probe.measure(&mut t.nets)?;
            row.psnr = Some(p);
            row.ssim = Some(s);
        }
        if step == cfg.total_steps {
            log.push(row)?;
            break;
        }
        let (x, _) = gen_paired_domains(data, (step * b) as u64, b)?;
        let (_, y) = gen_paired_domains(data, Y_OFFSET + (step * b) as u64, b)?;
        let (ld, adv, cyc) = match t.step(step, &x, &y) {
            Ok(v) => v,
            Err(e) => {
                if let Some(dir) = out_dir {
                    t.nets.checkpoint(&dir.join(DIVERGED_CHECKPOINT), step, cfg.seed)?;
                }
                return Err(e);
            }
        };
        row.loss_d = Some(ld);
        row.loss_g = Some(adv);
        row.loss_cyc = Some(cyc);
        log.push(row)?;
        let done = step + 1;
        if let Some(dir) = out_dir {
            if done == cfg.total_steps || (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
                t.nets.checkpoint(&checkpoint_path(dir, done), done, cfg.seed)?;
            }
        }
    }
    Ok(CycleOutcome { nets: t.nets, log: log.rows })
}
