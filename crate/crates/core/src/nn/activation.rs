use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// Pointwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    /// Leaky ReLU with the given negative-side slope in (0, 1).
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Relu => write!(f, "relu"),
            Activation::LeakyRelu(s) => write!(f, "lrelu:{s}"),
            Activation::Sigmoid => write!(f, "sigmoid"),
            Activation::Tanh => write!(f, "tanh"),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            _ => {
                let slope = s
                    .strip_prefix("lrelu:")
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| Error::invalid(format!("unknown activation `{s}`")))?;
                if !(slope > 0.0 && slope < 1.0) {
                    return Err(Error::invalid(format!("leaky relu slope must be in (0,1), got {slope}")));
                }
                Ok(Activation::LeakyRelu(slope))
            }
        }
    }
}
