use crate::error::{Error, Result};
use crate::graph::Var;
use crate::Graph;

/// Generator objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GenLoss {
    /// `−log D(G(z))`.
    #[default]
    NonSaturating,
    /// `log(1 − D(G(z)))`.
    Minimax,
}

/// `−mean log σ(x)`, computed as `mean softplus(−x)`.
pub fn neg_log_sigmoid_mean(g: &mut Graph, logits: Var) -> Result<Var> {
    let neg = g.scale(logits, -1.0)?;
    let sp = g.softplus(neg)?;
    g.mean(sp)
}

/// `−mean log(1 − σ(x))`, computed as `mean softplus(x)`.
pub fn neg_log_one_minus_sigmoid_mean(g: &mut Graph, logits: Var) -> Result<Var> {
    let sp = g.softplus(logits)?;
    g.mean(sp)
}

pub fn gen_loss(g: &mut Graph, d_fake: Var, kind: GenLoss) -> Result<Var> {
    match kind {
        GenLoss::NonSaturating => neg_log_sigmoid_mean(g, d_fake),
        GenLoss::Minimax => {
            let l = neg_log_one_minus_sigmoid_mean(g, d_fake)?;
            g.scale(l, -1.0)
        }
    }
}

/// `(loss_d, loss_g)` from discriminator logits on real and generated samples.
pub fn gan_losses(g: &mut Graph, d_real: Var, d_fake: Var, kind: GenLoss) -> Result<(Var, Var)> {
    let real = neg_log_sigmoid_mean(g, d_real)?;
    let fake = neg_log_one_minus_sigmoid_mean(g, d_fake)?;
    let loss_d = g.add(real, fake)?;
    Ok((loss_d, gen_loss(g, d_fake, kind)?))
}

/// Discriminator loss for one batch of logits whose first `n_real` samples are
/// real and the rest generated.
pub fn disc_loss_stacked(g: &mut Graph, logits: Var, n_real: usize) -> Result<Var> {
    let shape = g.shape(logits)?.to_vec();
    let n = shape[0];
    if n_real == 0 || n_real >= n {
        return Err(Error::invalid(format!("{n_real} real samples in a batch of {n}")));
    }
    let per = shape.iter().skip(1).product::<usize>();
    let split = n_real * per;
    let total = n * per;
    let real_w = 1.0 / split as f64;
    let fake_w = 1.0 / (total - split) as f64;
    let neg = g.scale(logits, -1.0)?;
    let sp_neg = g.softplus(neg)?;
    let sp_pos = g.softplus(logits)?;
    let real = g.dot_const(sp_neg, (0..total).map(|i| if i < split { real_w } else { 0.0 }).collect())?;
    let fake = g.dot_const(sp_pos, (0..total).map(|i| if i < split { 0.0 } else { fake_w }).collect())?;
    g.add(real, fake)
}

/// `mean |a − b|`.
pub fn l1_mean(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    if g.shape(a)? != g.shape(b)? {
        return Err(Error::ShapeMismatch { op: "l1_mean", left: g.shape(a)?.to_vec(), right: g.shape(b)?.to_vec() });
    }
    let d = g.sub(a, b)?;
    let d = g.abs(d)?;
    g.mean(d)
}

/// Cycle-consistency term `mean|F(G(x)) − x| + mean|G(F(y)) − y|`.
pub fn cycle_loss(g: &mut Graph, x: Var, rec_x: Var, y: Var, rec_y: Var) -> Result<Var> {
    let a = l1_mean(g, rec_x, x)?;
    let b = l1_mean(g, rec_y, y)?;
    g.add(a, b)
}
