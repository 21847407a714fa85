//! Built-in models, addressable by string id from configuration files.

pub mod lorenz;
pub mod lti;

use std::fmt;
use std::str::FromStr;

use crate::error::Error;

pub use lorenz::{lorenz_drift, LorenzDrift, LorenzModel, LorenzParams};
pub use lti::{LtiEntry, LtiMatrix, LtiModel};

/// Identifier of a zoo model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelId {
    Lorenz,
    CoupledLorenz,
    Lti,
}

impl ModelId {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelId::Lorenz => "lorenz",
            ModelId::CoupledLorenz => "coupled_lorenz",
            ModelId::Lti => "lti",
        }
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "lorenz" => Ok(ModelId::Lorenz),
            "coupled_lorenz" => Ok(ModelId::CoupledLorenz),
            "lti" => Ok(ModelId::Lti),
            other => Err(Error::Config(format!(
                "unknown model id {other:?} (expected lorenz, coupled_lorenz or lti)"
            ))),
        }
    }
}
