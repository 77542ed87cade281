use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {what}: expected {expected}, found {found}")]
    ShapeMismatch {
        what: &'static str,
        expected: String,
        found: String,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite value {value} at pixel {index}")]
    NonFinite { value: f64, index: usize },
    #[error("mask value {value} at pixel {index} is not 0 or 1")]
    NonBinary { value: f64, index: usize },
    #[error("missing band {0}")]
    MissingBand(String),
    #[error("non-finite loss {value} for batch [{batch}]")]
    NonFiniteLoss { value: f64, batch: String },
    #[error("record {record} is missing {band} band required for NDVI")]
    MissingNdviBand { record: String, band: &'static str },
    #[error("record {record} does not belong to query {query}")]
    ForeignRecord { record: String, query: String },
    #[error("no usable records for query {0}")]
    NoData(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
}

impl Error {
    pub(crate) fn shape(what: &'static str, expected: impl Into<String>, found: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            what,
            expected: expected.into(),
            found: found.into(),
        }
    }
}
