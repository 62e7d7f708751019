//! Parameterized layers: dilated and transposed convolution, linear maps,
//! batch/instance normalization, pointwise activations and spectral
//! normalization.

mod activation;
mod conv;
mod linear;
mod norm;
mod params;
mod spectral;

pub use activation::Activation;
pub use conv::{ConvGeom, ConvLayer, ConvVars};
pub use linear::LinearLayer;
pub use norm::{NormKind, NormLayer, BN_EPSILON, BN_MOMENTUM};
pub use params::{ParamEntry, ParamGroup, ParamId, ParamStore};
pub use spectral::{spectral_normalize, SpectralState, TRAIN_POWER_ITERS};

/// How a forward pass treats layer state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running estimates and spectral vectors are updated.
    Train,
    /// Batch statistics; no state is touched.
    Sample,
    /// Running statistics and stored spectral vectors; no state is touched.
    Eval,
}

/// Per-pass binding options for parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bind {
    pub mode: Mode,
    /// Whether parameter leaves take part in differentiation.
    pub trainable: bool,
}

impl Bind {
    pub fn new(mode: Mode, trainable: bool) -> Self {
        Bind { mode, trainable }
    }

    pub fn frozen(mode: Mode) -> Self {
        Bind { mode, trainable: false }
    }
}
