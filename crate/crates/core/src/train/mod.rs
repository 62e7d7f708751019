//! GAN and CycleGAN training at desk scale: objectives, Adam, the delayed
//! update schedule for pyramid parameters, and procedural toy data.

mod adam;
mod config;
mod cycle;
mod gan;
mod loss;
mod toy;

use std::fs::File;
use std::path::{Path, PathBuf};

use serde::Serialize;

pub use adam::{Adam, AdamSlot};
pub use config::TrainConfig;
pub use cycle::{cyclegan_generator_terms, train_cyclegan, train_cyclegan_observed, CycleNets, CycleOutcome, CycleSpecs, CycleTerms, CycleTrainer, TranslatorStep};
pub use gan::{train_gan, train_gan_observed, sample_latent, GanOutcome, GanTrainer};
pub use loss::{cycle_loss, disc_loss_stacked, gan_losses, gen_loss, l1_mean, neg_log_one_minus_sigmoid_mean, neg_log_sigmoid_mean, GenLoss};
pub use toy::{gen_paired_domains, gen_toy_dataset, ToySpec};

use crate::error::{Error, Result};
use crate::nn::{ParamEntry, ParamGroup};

/// One line of the metrics log; absent values are written as empty fields.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub loss_d: Option<f64>,
    pub loss_g: Option<f64>,
    pub loss_cyc: Option<f64>,
    pub fid: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub gamma: Option<f64>,
}

/// Append-only CSV writer, flushed after every row.
pub struct MetricsLog {
    writer: Option<csv::Writer<File>>,
    pub rows: Vec<LogRow>,
}

impl MetricsLog {
    pub fn new(path: Option<&Path>) -> Result<Self> {
        let writer = path.map(csv::Writer::from_path).transpose().map_err(csv_error)?;
        Ok(MetricsLog { writer, rows: Vec::new() })
    }

    pub fn push(&mut self, row: LogRow) -> Result<()> {
        if let Some(w) = &mut self.writer {
            w.serialize(&row).map_err(csv_error)?;
            w.flush()?;
        }
        self.rows.push(row);
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::invalid(format!("metrics log: {other:?}")),
    }
}

/// Whether a parameter may move at `step` under the delayed schedule.
pub fn is_active(entry: &ParamEntry<f64>, step: usize, spap_update_start: usize) -> bool {
    entry.group == ParamGroup::Base || step >= spap_update_start
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const DIVERGED_CHECKPOINT: &str = "checkpoint_diverged.ckpt";

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("checkpoint_{step:06}.ckpt"))
}

fn check_finite(step: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} is {v} at step {step}")))
    }
}
