use thiserror::Error;

/// Errors raised by the certification engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid probability vector: {0}")]
    InvalidDistribution(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("key (s={s}, y={y}) outside a {s_count}x{c_count} table")]
    KeyOutOfRange {
        s: usize,
        y: usize,
        s_count: usize,
        c_count: usize,
    },
    #[error("subpopulation (s={s}, y={y}) has {n} samples; at least 2 are required")]
    SparseCell { s: usize, y: usize, n: usize },
    #[error("sensitive group {0} has no samples")]
    EmptyGroup(usize),
    #[error("invalid statistics table: {0}")]
    InvalidTable(String),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("{name} = {value} is outside its valid range {range}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("rho^2 = {rho_sq} exceeds the applicability radius gamma_bar^2 = {gamma_bar_sq}")]
    OutsideApplicabilityRadius { rho_sq: f64, gamma_bar_sq: f64 },
    #[error("loss is unbounded; supply an explicit upper bound M")]
    UnboundedLoss,
    #[error("unsupported configuration: {0}")]
    Unsupported(String),
    #[error("malformed problem: {0}")]
    MalformedProblem(String),
    #[error("could not draw valid mixing parameters after {0} attempts")]
    SamplingExhausted(usize),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_unit_open(name: &'static str, value: f64) -> Result<()> {
    if value > 0.0 && value < 1.0 {
        Ok(())
    } else {
        Err(Error::OutOfRange {
            name,
            value,
            range: "(0, 1)",
        })
    }
}

pub(crate) fn check_rho(rho: f64) -> Result<()> {
    if rho > 0.0 && rho <= 1.0 {
        Ok(())
    } else {
        Err(Error::OutOfRange {
            name: "rho",
            value: rho,
            range: "(0, 1]",
        })
    }
}
