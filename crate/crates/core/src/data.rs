// SPDX-License-Identifier: Apache-2.0

//! Dataset ingestion, chronological splitting, z-score standardization and
//! sliding-window supervision pairs.
//!
//! Every series carries a global `start_index` so that windows cut from
//! different splits can still be compared on a single time axis. Window
//! `t_end` values are always global.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use crate::error::{CraftError, Result};

/// Below this standard deviation a channel is treated as constant.
pub const STD_CLAMP_THRESHOLD: f64 = 1e-8;

/// Aligned real-valued observations, `T` timesteps by `C` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct MultivariateSeries {
    /// `T x C`, row-major in time.
    pub values: Array2<f64>,
    pub channel_names: Vec<String>,
    /// Global time index of row 0.
    pub start_index: usize,
}

impl MultivariateSeries {
    pub fn new(values: Array2<f64>, channel_names: Vec<String>, start_index: usize) -> Result<Self> {
        if channel_names.len() != values.ncols() {
            return Err(CraftError::shape(
                "channel names",
                values.ncols(),
                channel_names.len(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CraftError::NonFinite("series values"));
        }
        Ok(Self {
            values,
            channel_names,
            start_index,
        })
    }

    /// Builds a series with generated channel names `ch0..chC`.
    pub fn from_values(values: Array2<f64>, start_index: usize) -> Result<Self> {
        let names = (0..values.ncols()).map(|c| format!("ch{c}")).collect();
        Self::new(values, names, start_index)
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }

    /// Global index one past the last row.
    pub fn end_index(&self) -> usize {
        self.start_index + self.len()
    }

    /// Contiguous sub-range of rows `[from, to)` (local indices).
    pub fn slice_rows(&self, from: usize, to: usize) -> MultivariateSeries {
        MultivariateSeries {
            values: self.values.slice(s![from..to, ..]).to_owned(),
            channel_names: self.channel_names.clone(),
            start_index: self.start_index + from,
        }
    }
}

/// Reads a benchmark CSV: header row, first column `date`, the rest numeric.
pub fn load_csv(path: impl AsRef<Path>) -> Result<MultivariateSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| CraftError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(std::io::BufReader::new(file));

    let headers = reader.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].trim().is_empty()) {
        return Err(CraftError::EmptyFile(path.to_path_buf()));
    }
    if headers.len() < 2 {
        return Err(CraftError::TooFewColumns(headers.len()));
    }
    let first = headers[0].trim().trim_start_matches('\u{feff}');
    if first != "date" {
        return Err(CraftError::MissingDateColumn(first.to_string()));
    }
    let channels = headers.len() - 1;
    let channel_names: Vec<String> = headers.iter().skip(1).map(|h| h.trim().to_string()).collect();

    let mut flat = Vec::new();
    let mut rows = 0usize;
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != headers.len() {
            return Err(CraftError::RaggedRow {
                row,
                expected: headers.len(),
                found: record.len(),
            });
        }
        for (col, cell) in record.iter().skip(1).enumerate() {
            let trimmed = cell.trim();
            match trimmed.parse::<f64>() {
                Ok(v) if v.is_finite() => flat.push(v),
                _ => {
                    return Err(CraftError::NonNumericCell {
                        row,
                        col,
                        value: trimmed.to_string(),
                    })
                }
            }
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(CraftError::EmptyFile(path.to_path_buf()));
    }
    let values = Array2::from_shape_vec((rows, channels), flat)
        .expect("row-major buffer sized rows * channels");
    MultivariateSeries::new(values, channel_names, 0)
}

/// Writes a series in the same layout [`load_csv`] reads. The `date` column
/// holds the global row index.
pub fn save_csv(series: &MultivariateSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["date".to_string()];
    header.extend(series.channel_names.iter().cloned());
    writer.write_record(&header)?;
    for (i, row) in series.values.rows().into_iter().enumerate() {
        let mut record = vec![format!("{}", series.start_index + i)];
        record.extend(row.iter().map(|v| v.to_string()));
        writer.write_record(&record)?;
    }
    writer.flush().map_err(|e| CraftError::io(path, e))
}

/// How a series is cut into train / validation / test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitScheme {
    /// Fractions of the full length; validation takes the remainder.
    Ratios { train: f64, val: f64, test: f64 },
    /// 12 / 4 / 4 months of 30 days, trailing rows unused.
    EttMonths { steps_per_hour: usize },
}

impl SplitScheme {
    pub const DEFAULT_RATIOS: SplitScheme = SplitScheme::Ratios {
        train: 0.7,
        val: 0.1,
        test: 0.2,
    };

    /// ETT hourly files use the month convention at 1 step/hour, ETT minute files at 4.
    /// Everything else falls back to 0.7 / 0.1 / 0.2.
    pub fn for_dataset(name: &str) -> SplitScheme {
        let lower = name.to_ascii_lowercase();
        if lower.starts_with("etth") {
            SplitScheme::EttMonths { steps_per_hour: 1 }
        } else if lower.starts_with("ettm") {
            SplitScheme::EttMonths { steps_per_hour: 4 }
        } else {
            SplitScheme::DEFAULT_RATIOS
        }
    }

    pub fn split(
        &self,
        series: &MultivariateSeries,
        min_len: usize,
    ) -> Result<(MultivariateSeries, MultivariateSeries, MultivariateSeries)> {
        match *self {
            SplitScheme::Ratios { train, val, test } => {
                split_chronological(series, (train, val, test), min_len)
            }
            SplitScheme::EttMonths { steps_per_hour } => split_ett(series, steps_per_hour, min_len),
        }
    }
}

fn check_segments(lens: [usize; 3], min_len: usize) -> Result<()> {
    for (segment, len) in ["train", "val", "test"].into_iter().zip(lens) {
        if len < min_len {
            return Err(CraftError::SegmentTooShort {
                segment,
                len,
                required: min_len,
            });
        }
    }
    Ok(())
}

/// Splits into contiguous train / val / test segments by ratio.
///
/// Train and test lengths are `floor(T * ratio)`; validation takes whatever
/// remains so the three segments always cover the whole series. Each segment
/// must hold at least `min_len` rows (normally `L + H`).
pub fn split_chronological(
    series: &MultivariateSeries,
    ratios: (f64, f64, f64),
    min_len: usize,
) -> Result<(MultivariateSeries, MultivariateSeries, MultivariateSeries)> {
    let (train, val, test) = ratios;
    if !(train > 0.0 && val > 0.0 && test > 0.0) {
        return Err(CraftError::invalid("ratios", "all ratios must be positive"));
    }
    if ((train + val + test) - 1.0).abs() > 1e-9 {
        return Err(CraftError::invalid(
            "ratios",
            format!("must sum to 1, got {}", train + val + test),
        ));
    }
    let total = series.len();
    // the small bias keeps 100 * 0.7 from flooring to 69
    let n_train = (total as f64 * train + 1e-9).floor() as usize;
    let n_test = (total as f64 * test + 1e-9).floor() as usize;
    let n_val = total.saturating_sub(n_train + n_test);
    check_segments([n_train, n_val, n_test], min_len)?;
    Ok((
        series.slice_rows(0, n_train),
        series.slice_rows(n_train, n_train + n_val),
        series.slice_rows(n_train + n_val, total),
    ))
}

/// The ETT convention: 12 months train, 4 validation, 4 test (30-day months).
pub fn split_ett(
    series: &MultivariateSeries,
    steps_per_hour: usize,
    min_len: usize,
) -> Result<(MultivariateSeries, MultivariateSeries, MultivariateSeries)> {
    if steps_per_hour == 0 {
        return Err(CraftError::invalid("steps_per_hour", "must be at least 1"));
    }
    let month = 30 * 24 * steps_per_hour;
    let (n_train, n_val, n_test) = (12 * month, 4 * month, 4 * month);
    let need = n_train + n_val + n_test;
    if series.len() < need {
        return Err(CraftError::SeriesTooShort {
            len: series.len(),
            required: need,
        });
    }
    check_segments([n_train, n_val, n_test], min_len)?;
    Ok((
        series.slice_rows(0, n_train),
        series.slice_rows(n_train, n_train + n_val),
        series.slice_rows(n_train + n_val, need),
    ))
}

/// Per-channel z-score parameters, fitted on the training split only.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Array1<f64>,
    /// Always strictly positive; constant channels are clamped to 1.
    pub std: Array1<f64>,
}

impl ChannelStats {
    /// Population mean and standard deviation of every channel.
    pub fn fit(train: &MultivariateSeries) -> ChannelStats {
        let n = train.len().max(1) as f64;
        let mean = train.values.sum_axis(Axis(0)) / n;
        let mut std = Array1::zeros(train.channels());
        for (c, col) in train.values.axis_iter(Axis(1)).enumerate() {
            let var = col.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            std[c] = if sd < STD_CLAMP_THRESHOLD { 1.0 } else { sd };
        }
        ChannelStats { mean, std }
    }

    pub fn apply(&self, series: &MultivariateSeries) -> Result<MultivariateSeries> {
        self.check(series.channels())?;
        let values = (&series.values - &self.mean) / &self.std;
        Ok(MultivariateSeries {
            values,
            channel_names: series.channel_names.clone(),
            start_index: series.start_index,
        })
    }

    /// Maps standardized values back to dataset units.
    pub fn invert(&self, values: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(values.ncols())?;
        Ok(values * &self.std + &self.mean)
    }

    fn check(&self, channels: usize) -> Result<()> {
        if channels != self.mean.len() {
            return Err(CraftError::shape("channel stats", self.mean.len(), channels));
        }
        Ok(())
    }
}

/// One supervision pair: `x` is the lookback, `y` the horizon right after it.
///
/// Borrowed views into the source series; memory entries are the same
/// structure with `x` as key and `y` as value.
#[derive(Debug, Clone, Copy)]
pub struct WindowPair<'a> {
    /// `L x C`
    pub x: ArrayView2<'a, f64>,
    /// `H x C`
    pub y: ArrayView2<'a, f64>,
    /// Global index of the last lookback step.
    pub t_end: usize,
}

/// A stored (key, value) pair of the retrieval memory.
pub type MemoryEntry<'a> = WindowPair<'a>;

impl<'a> WindowPair<'a> {
    pub fn lookback(&self) -> usize {
        self.x.nrows()
    }

    pub fn horizon(&self) -> usize {
        self.y.nrows()
    }

    pub fn key(&self) -> ArrayView2<'a, f64> {
        self.x
    }

    pub fn value(&self) -> ArrayView2<'a, f64> {
        self.y
    }

    /// Global index of the first lookback step.
    pub fn t_start(&self) -> usize {
        self.t_end + 1 - self.x.nrows()
    }

    /// Closed interval `[t_end - L + 1, t_end + H]` spanned by key and value.
    pub fn span(&self) -> Interval {
        Interval::new(self.t_start(), self.t_end + self.y.nrows())
    }
}

/// Closed interval of global time indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interval {
    pub start: usize,
    pub end: usize,
}

impl Interval {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Interval { start, end }
    }

    pub fn intersects(&self, other: &Interval) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

/// Enumerates every `(L, H)` window with the given stride, ordered by `t_end`.
///
/// Produces `floor((T - L - H) / stride) + 1` pairs.
pub fn sliding_windows(
    series: &MultivariateSeries,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<WindowPair<'_>>> {
    if lookback == 0 {
        return Err(CraftError::invalid("lookback", "must be at least 1"));
    }
    if horizon == 0 {
        return Err(CraftError::invalid("horizon", "must be at least 1"));
    }
    if stride == 0 {
        return Err(CraftError::invalid("stride", "must be at least 1"));
    }
    let total = series.len();
    if total < lookback + horizon {
        return Err(CraftError::SeriesTooShort {
            len: total,
            required: lookback + horizon,
        });
    }
    let count = (total - lookback - horizon) / stride + 1;
    Ok((0..count)
        .map(|i| {
            let start = i * stride;
            WindowPair {
                x: series.values.slice(s![start..start + lookback, ..]),
                y: series
                    .values
                    .slice(s![start + lookback..start + lookback + horizon, ..]),
                t_end: series.start_index + start + lookback - 1,
            }
        })
        .collect())
}
