use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("ion {ion} at ({x:.2}, {y:.2}) um lies outside the field of view by more than the PSF support")]
    IonOutsideField { ion: usize, x: f64, y: f64 },

    #[error("ion {0} has no pixel above background")]
    NoSignal(usize),

    #[error("calibration cell ion={ion} state={state} nu={nu} has {samples} samples (minimum {minimum})")]
    StarvedCell {
        ion: usize,
        state: String,
        nu: String,
        samples: u64,
        minimum: u64,
    },

    #[error("spatio-temporal model invalid: M*t_s = {total_s} s is not below lifetime {lifetime_s} s")]
    DecayWindowTooLong { total_s: f64, lifetime_s: f64 },

    #[error("count {0} does not fit in 16 bits")]
    CountOverflow(u32),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
