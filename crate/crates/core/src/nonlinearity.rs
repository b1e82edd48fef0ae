use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Pointwise nonlinearity applied after every hidden affine layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Relu,
    Tanh,
}

impl Nonlinearity {
    #[inline]
    pub fn apply(self, u: f64) -> f64 {
        match self {
            Nonlinearity::Relu => u.max(0.0),
            Nonlinearity::Tanh => u.tanh(),
        }
    }

    /// True when `phi(-u) == -phi(u)`.
    pub fn is_odd(self) -> bool {
        matches!(self, Nonlinearity::Tanh)
    }

    /// `phi(0)^2`, the second moment of a zero-variance Gaussian input.
    pub fn zero_moment(self) -> f64 {
        let v = self.apply(0.0);
        v * v
    }

    /// Stable one-byte identifier used in the table cache header.
    pub fn tag(self) -> u8 {
        match self {
            Nonlinearity::Relu => 1,
            Nonlinearity::Tanh => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Nonlinearity::Relu),
            2 => Some(Nonlinearity::Tanh),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Nonlinearity::Relu => "relu",
            Nonlinearity::Tanh => "tanh",
        }
    }
}

impl fmt::Display for Nonlinearity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Nonlinearity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Nonlinearity::Relu),
            "tanh" => Ok(Nonlinearity::Tanh),
            other => Err(Error::Parameter(format!(
                "unknown nonlinearity '{other}' (expected relu or tanh)"
            ))),
        }
    }
}
