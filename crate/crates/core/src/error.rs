// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;

use thiserror::Error;

use crate::model::CraftModel;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, CraftError>;

/// Errors produced by the forecasting pipeline.
#[derive(Error, Debug)]
pub enum CraftError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("empty file: {0}")]
    EmptyFile(PathBuf),

    #[error("expected a 'date' column followed by at least one value column, got {0} column(s)")]
    TooFewColumns(usize),

    #[error("first column must be named 'date', found '{0}'")]
    MissingDateColumn(String),

    /// Row and column are zero-based data coordinates (header excluded, date column excluded).
    #[error("non-numeric cell at ({row}, {col}): '{value}'")]
    NonNumericCell {
        row: usize,
        col: usize,
        value: String,
    },

    #[error("ragged row {row}: expected {expected} fields, found {found}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("{segment} segment has {len} rows, need at least {required}")]
    SegmentTooShort {
        segment: &'static str,
        len: usize,
        required: usize,
    },

    #[error("series has {len} rows, need at least lookback + horizon = {required}")]
    SeriesTooShort { len: usize, required: usize },

    #[error("invalid parameter '{name}': {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("channel {channel} out of range for {channels} channel(s)")]
    ChannelOutOfRange { channel: usize, channels: usize },

    #[error("memory is empty")]
    EmptyMemory,

    #[error("bad magic bytes: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checksum failure: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("truncated file: {0}")]
    Truncated(&'static str),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// Training produced a non-finite loss; carries the last checkpoint whose
    /// validation loss was finite.
    #[error("training diverged at epoch {epoch}")]
    Diverged {
        epoch: usize,
        last_finite: Box<CraftModel>,
    },

    #[error("config parse error at line {line}: {reason}")]
    ConfigParse { line: usize, reason: String },
}

impl CraftError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CraftError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        CraftError::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(
        context: &'static str,
        expected: impl std::fmt::Debug,
        found: impl std::fmt::Debug,
    ) -> Self {
        CraftError::ShapeMismatch {
            context,
            expected: format!("{expected:?}"),
            found: format!("{found:?}"),
        }
    }

    /// Stable short identifier, used by the CLI for machine-parseable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            CraftError::Io { .. } => "io",
            CraftError::Csv(_) => "csv",
            CraftError::EmptyFile(_) => "empty_file",
            CraftError::TooFewColumns(_) => "too_few_columns",
            CraftError::MissingDateColumn(_) => "missing_date_column",
            CraftError::NonNumericCell { .. } => "non_numeric_cell",
            CraftError::RaggedRow { .. } => "ragged_row",
            CraftError::SegmentTooShort { .. } => "segment_too_short",
            CraftError::SeriesTooShort { .. } => "series_too_short",
            CraftError::InvalidParameter { .. } => "invalid_parameter",
            CraftError::ShapeMismatch { .. } => "shape_mismatch",
            CraftError::ChannelOutOfRange { .. } => "channel_out_of_range",
            CraftError::EmptyMemory => "empty_memory",
            CraftError::BadMagic { .. } => "bad_magic",
            CraftError::VersionMismatch { .. } => "version_mismatch",
            CraftError::ChecksumMismatch { .. } => "checksum_mismatch",
            CraftError::Truncated(_) => "truncated",
            CraftError::ConfigMismatch(_) => "config_mismatch",
            CraftError::NonFinite(_) => "non_finite",
            CraftError::Diverged { .. } => "diverged",
            CraftError::ConfigParse { .. } => "config_parse",
        }
    }
}
