//! Fairness-constrained representation learning with maximal correlation.
//!
//! Discrete data goes through divergence transfer matrices and a regularized
//! eigenproblem ([`discrete_fair`]); continuous data is handled by minimax
//! training of small networks against Soft-HGR critics ([`soft_hgr`]).

pub mod datasets;
pub mod discrete_fair;
pub mod encoding;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod probability;
pub mod soft_hgr;

use serde::{Deserialize, Serialize};

pub use error::{Error, Result};

/// Which fairness criterion a model is regularized towards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    /// Prediction independent of the sensitive attribute.
    Independence,
    /// Prediction independent of the sensitive attribute given the label.
    Separation,
}

impl Criterion {
    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::Independence => "independence",
            Criterion::Separation => "separation",
        }
    }
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "independence" => Ok(Criterion::Independence),
            "separation" => Ok(Criterion::Separation),
            other => Err(Error::Input(format!("unknown criterion {other:?}"))),
        }
    }
}
