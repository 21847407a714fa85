use thiserror::Error;

/// Errors raised by the identification toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite {what} at time index {t}")]
    NonFinite { what: &'static str, t: usize },

    #[error("integration produced a non-finite drift at t = {t} s")]
    Integration { t: f64 },

    #[error("trajectory diverged at time index {t}")]
    Divergence { t: usize },

    #[error("particle filter degenerated at time index {t}: all weights vanished")]
    Degeneracy { t: usize },

    #[error("linear algebra failure: {0}")]
    Numerical(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("epoch {epoch}: {source}")]
    Epoch {
        epoch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn at_epoch(self, epoch: usize) -> Self {
        Error::Epoch {
            epoch,
            source: Box::new(self),
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            got,
        })
    }
}
