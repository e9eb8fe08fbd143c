// SPDX-License-Identifier: Apache-2.0

//! Sparse inter-channel relation graph.
//!
//! Each channel's key columns are concatenated across all memory entries into
//! one long trajectory; channels are then linked to their top-`m` most
//! cosine-similar peers. The graph never contains self-loops; retrieval adds
//! the query channel to its own pool separately.

use std::fmt;

use rayon::prelude::*;

use crate::data::MemoryEntry;
use crate::error::{CraftError, Result};

/// Norms below this are treated as zero vectors (similarity 0).
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub channel: usize,
    pub score: f64,
}

/// Per-channel top-`m` neighbor lists sorted by similarity descending.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationGraph {
    neighbors: Vec<Vec<Neighbor>>,
    m: usize,
}

/// One channel's key columns laid end to end, length `N * L`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelTrajectory {
    pub channel_id: usize,
    pub z: Vec<f64>,
}

pub fn concat_trajectory(memory: &[MemoryEntry<'_>], channel: usize) -> Result<ChannelTrajectory> {
    let first = memory.first().ok_or(CraftError::EmptyMemory)?;
    let (lookback, channels) = first.x.dim();
    if channel >= channels {
        return Err(CraftError::ChannelOutOfRange { channel, channels });
    }
    let mut z = Vec::with_capacity(memory.len() * lookback);
    for entry in memory {
        if entry.x.dim() != (lookback, channels) {
            return Err(CraftError::shape("memory key", (lookback, channels), entry.x.dim()));
        }
        z.extend(entry.x.column(channel).iter());
    }
    Ok(ChannelTrajectory {
        channel_id: channel,
        z,
    })
}

/// `a.b / (|a| |b|)`, clamped to `[-1, 1]`. Zero vectors score 0.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(CraftError::shape("cosine similarity", a.len(), b.len()));
    }
    let mut dot = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        aa += x * x;
        bb += y * y;
    }
    Ok(cosine_from_moments(dot, aa, bb))
}

fn cosine_from_moments(dot: f64, aa: f64, bb: f64) -> f64 {
    let (na, nb) = (aa.sqrt(), bb.sqrt());
    if na < ZERO_NORM || nb < ZERO_NORM {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Orders neighbor candidates: higher score first, lower channel id on ties.
pub(crate) fn rank_order(a: &Neighbor, b: &Neighbor) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.channel.cmp(&b.channel))
}

impl RelationGraph {
    /// Builds the graph from memory keys.
    ///
    /// Pairwise similarities are accumulated entry by entry without
    /// materializing the trajectories, in the same order as
    /// [`concat_trajectory`] so the scores match it bit for bit. Each
    /// unordered pair is computed once. `m >= C` is clamped to `C - 1`.
    pub fn build(memory: &[MemoryEntry<'_>], m: usize) -> Result<RelationGraph> {
        let first = memory.first().ok_or(CraftError::EmptyMemory)?;
        let (lookback, channels) = first.x.dim();
        if m == 0 {
            return Err(CraftError::invalid("neighbors", "must be at least 1"));
        }
        if channels < 2 {
            return Err(CraftError::invalid(
                "channels",
                "relation graph needs at least 2 channels",
            ));
        }
        if let Some(bad) = memory.iter().find(|e| e.x.dim() != (lookback, channels)) {
            return Err(CraftError::shape("memory key", (lookback, channels), bad.x.dim()));
        }
        let m = if m >= channels {
            log::warn!("neighbors {m} >= channels {channels}, clamping to {}", channels - 1);
            channels - 1
        } else {
            m
        };

        // row i holds <z_i, z_j> for j >= i
        let gram: Vec<Vec<f64>> = (0..channels)
            .into_par_iter()
            .map(|i| {
                let mut acc = vec![0.0; channels - i];
                for entry in memory {
                    for row in entry.x.rows() {
                        let xi = row[i];
                        for (slot, xj) in acc.iter_mut().zip(row.iter().skip(i)) {
                            *slot += xi * xj;
                        }
                    }
                }
                acc
            })
            .collect();
        let dot = |i: usize, j: usize| {
            let (a, b) = if i <= j { (i, j) } else { (j, i) };
            gram[a][b - a]
        };

        // products commute, so sim(i, j) and sim(j, i) are bit-equal
        let sim = |i: usize, j: usize| cosine_from_moments(dot(i, j), dot(i, i), dot(j, j));

        let neighbors = (0..channels)
            .map(|i| {
                let mut row: Vec<Neighbor> = (0..channels)
                    .filter(|&j| j != i)
                    .map(|j| Neighbor {
                        channel: j,
                        score: sim(i, j),
                    })
                    .collect();
                row.sort_by(rank_order);
                row.truncate(m);
                row
            })
            .collect();
        Ok(RelationGraph { neighbors, m })
    }

    /// Assembles a graph from explicit neighbor lists (used by the file loader).
    pub fn from_lists(neighbors: Vec<Vec<Neighbor>>, m: usize) -> Result<RelationGraph> {
        let channels = neighbors.len();
        for (i, list) in neighbors.iter().enumerate() {
            if list.len() > m {
                return Err(CraftError::shape("neighbor list", m, list.len()));
            }
            for (k, n) in list.iter().enumerate() {
                if n.channel >= channels || n.channel == i {
                    return Err(CraftError::ChannelOutOfRange {
                        channel: n.channel,
                        channels,
                    });
                }
                if list[..k].iter().any(|p| p.channel == n.channel) {
                    return Err(CraftError::invalid("graph", "duplicate neighbor"));
                }
                if !(-1.0..=1.0).contains(&n.score) {
                    return Err(CraftError::invalid("graph", "score outside [-1, 1]"));
                }
            }
        }
        Ok(RelationGraph { neighbors, m })
    }

    pub fn channel_count(&self) -> usize {
        self.neighbors.len()
    }

    /// Effective neighbor count after clamping.
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn neighbors(&self, channel: usize) -> &[Neighbor] {
        &self.neighbors[channel]
    }

    pub fn lists(&self) -> &[Vec<Neighbor>] {
        &self.neighbors
    }

    /// Keeps only the first `m` neighbors of every channel.
    pub fn truncated(&self, m: usize) -> RelationGraph {
        let m = m.min(self.m);
        RelationGraph {
            neighbors: self
                .neighbors
                .iter()
                .map(|l| l[..m.min(l.len())].to_vec())
                .collect(),
            m,
        }
    }
}

/// Human-readable adjacency listing, one channel per line.
impl fmt::Display for RelationGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, list) in self.neighbors.iter().enumerate() {
            write!(f, "{i}:")?;
            for n in list {
                write!(f, " {}({:.6})", n.channel, n.score)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}
