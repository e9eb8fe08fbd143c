// SPDX-License-Identifier: Apache-2.0

//! Fixtures shared by the criterion benches.

use craft_core::synthetic::periodic_series;
use craft_core::{sliding_windows, KnowledgeBase, MultivariateSeries, RelationGraph, Result};

/// Periodic series with `channels` channels and `len` rows.
pub fn fixture_series(channels: usize, len: usize) -> Result<MultivariateSeries> {
    let periods: Vec<f64> = (0..channels).map(|c| 12.0 + 6.0 * (c % 5) as f64).collect();
    periodic_series(&periods, len, 0.1, 7)
}

pub fn fixture_kb(
    series: &MultivariateSeries,
    lookback: usize,
    horizon: usize,
    m: usize,
    f: usize,
) -> Result<KnowledgeBase> {
    let memory = sliding_windows(series, lookback, horizon, 1)?;
    let graph = RelationGraph::build(&memory, m)?;
    KnowledgeBase::build(&memory, graph, f)
}
