// SPDX-License-Identifier: Apache-2.0

//! Two-stage channel-wise retrieval.
//!
//! For a query channel `c` the candidate pool is `c` itself followed by its
//! graph neighbors. Every stored key of every pooled channel is scored with
//! the normalized complex inner product of truncated spectra and the top-`r`
//! keys hand back their paired value horizons. A reference matched on a
//! neighbor channel carries that neighbor's own value.

use ndarray::{ArrayView1, ArrayView2};
use num_complex::Complex64;

use crate::data::Interval;
use crate::error::{CraftError, Result};
use crate::graph::RelationGraph;
use crate::spectral::{spectrum_norm, KnowledgeBase, SpectralKey, SpectralTransform};

/// Stabilizer added to the score denominator.
pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySpectrum {
    pub spectrum: Vec<Complex64>,
    pub norm: f64,
}

impl QuerySpectrum {
    pub fn new(spectrum: Vec<Complex64>) -> Self {
        let norm = spectrum_norm(&spectrum);
        QuerySpectrum { spectrum, norm }
    }
}

/// One retrieved value horizon and where it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievedReference<'kb> {
    pub value: &'kb [f64],
    pub score: f64,
    pub source_channel: usize,
    pub source_entry: usize,
}

/// Similarity evaluations performed, per query channel.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub similarity_evals: usize,
    pub pool_sizes: Vec<usize>,
}

impl OpCounter {
    pub fn new(channels: usize) -> Self {
        OpCounter {
            similarity_evals: 0,
            pool_sizes: vec![0; channels],
        }
    }

    fn record(&mut self, channel: usize, scored: usize) {
        if self.pool_sizes.len() <= channel {
            self.pool_sizes.resize(channel + 1, 0);
        }
        self.pool_sizes[channel] += scored;
        self.similarity_evals += scored;
    }

    pub fn merge(&mut self, other: &OpCounter) {
        if self.pool_sizes.len() < other.pool_sizes.len() {
            self.pool_sizes.resize(other.pool_sizes.len(), 0);
        }
        for (a, b) in self.pool_sizes.iter_mut().zip(&other.pool_sizes) {
            *a += b;
        }
        self.similarity_evals += other.similarity_evals;
    }
}

/// `Re{sum q * conj(k)} / (|q| |k| + eps)`.
pub fn spectral_similarity(q: &QuerySpectrum, k: &SpectralKey<'_>, eps: f64) -> Result<f64> {
    if q.spectrum.len() != k.spectrum.len() {
        return Err(CraftError::shape(
            "spectral similarity",
            q.spectrum.len(),
            k.spectrum.len(),
        ));
    }
    if eps <= 0.0 {
        return Err(CraftError::invalid("eps", "must be positive"));
    }
    Ok(score(q, k, eps))
}

#[inline]
fn score(q: &QuerySpectrum, k: &SpectralKey<'_>, eps: f64) -> f64 {
    // Re{a * conj(b)} = a.re*b.re + a.im*b.im
    let mut real = 0.0;
    for (a, b) in q.spectrum.iter().zip(k.spectrum) {
        real += a.re * b.re + a.im * b.im;
    }
    real / (q.norm * k.norm + eps)
}

/// `[c, neighbors(c)...]`, deduplicated.
pub fn candidate_pool(graph: &RelationGraph, channel: usize) -> Vec<usize> {
    let mut pool = Vec::with_capacity(graph.m() + 1);
    pool.push(channel);
    for n in graph.neighbors(channel) {
        if !pool.contains(&n.channel) {
            pool.push(n.channel);
        }
    }
    pool
}

/// Higher score first, then lower source channel, then lower entry.
fn better(a: &RetrievedReference<'_>, b: &RetrievedReference<'_>) -> bool {
    match b.score.total_cmp(&a.score) {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Equal => {
            (a.source_channel, a.source_entry) < (b.source_channel, b.source_entry)
        }
    }
}

/// Bounded, sorted best-`r` list.
struct TopR<'kb> {
    r: usize,
    items: Vec<RetrievedReference<'kb>>,
}

impl<'kb> TopR<'kb> {
    fn new(r: usize) -> Self {
        TopR {
            r,
            items: Vec::with_capacity(r + 1),
        }
    }

    fn offer(&mut self, cand: RetrievedReference<'kb>) {
        if self.items.len() == self.r {
            match self.items.last() {
                Some(worst) if better(&cand, worst) => {}
                _ => return,
            }
        }
        let pos = self.items.iter().position(|it| better(&cand, it)).unwrap_or(self.items.len());
        self.items.insert(pos, cand);
        self.items.truncate(self.r);
    }
}

/// Read-only retrieval view over a knowledge base.
#[derive(Debug, Clone)]
pub struct Retriever<'kb> {
    kb: &'kb KnowledgeBase,
    transform: SpectralTransform,
    eps: f64,
}

impl<'kb> Retriever<'kb> {
    pub fn new(kb: &'kb KnowledgeBase) -> Self {
        Self::with_eps(kb, DEFAULT_EPS)
    }

    pub fn with_eps(kb: &'kb KnowledgeBase, eps: f64) -> Self {
        Retriever {
            kb,
            transform: SpectralTransform::new(kb.config().lookback),
            eps,
        }
    }

    pub fn kb(&self) -> &'kb KnowledgeBase {
        self.kb
    }

    pub fn query_spectrum(&self, x_c: ArrayView1<'_, f64>) -> QuerySpectrum {
        QuerySpectrum::new(self.transform.truncated(x_c.iter(), self.kb.config().freq_cutoff))
    }

    fn check_query(&self, len: usize, r: usize) -> Result<()> {
        if r == 0 {
            return Err(CraftError::invalid("top", "must retrieve at least 1 reference"));
        }
        let l = self.kb.config().lookback;
        if len != l {
            return Err(CraftError::shape("query window", l, len));
        }
        Ok(())
    }

    /// Scores every non-excluded key of the given channels.
    fn scan(
        &self,
        q: &QuerySpectrum,
        channels: &[usize],
        r: usize,
        exclude: Option<Interval>,
    ) -> (Vec<RetrievedReference<'kb>>, usize) {
        let cfg = self.kb.config();
        let mut top = TopR::new(r);
        let mut scored = 0;
        for &src in channels {
            for entry in 0..cfg.entries {
                if let Some(ex) = exclude {
                    let t = self.kb.t_end(entry);
                    let span = Interval::new(t + 1 - cfg.lookback, t + cfg.horizon);
                    if span.intersects(&ex) {
                        continue;
                    }
                }
                let key = self.kb.key(src, entry);
                scored += 1;
                top.offer(RetrievedReference {
                    value: self.kb.value(src, entry),
                    score: score(q, &key, self.eps),
                    source_channel: src,
                    source_entry: entry,
                });
            }
        }
        (top.items, scored)
    }

    /// Top-`r` references for one query channel.
    ///
    /// Memory entries whose key-plus-value span intersects `exclude` are
    /// skipped. An empty result is not an error.
    pub fn retrieve_channel(
        &self,
        x_c: ArrayView1<'_, f64>,
        channel: usize,
        r: usize,
        exclude: Option<Interval>,
        counter: &mut OpCounter,
    ) -> Result<Vec<RetrievedReference<'kb>>> {
        self.check_query(x_c.len(), r)?;
        let channels = self.kb.config().channels;
        if channel >= channels {
            return Err(CraftError::ChannelOutOfRange { channel, channels });
        }
        let q = self.query_spectrum(x_c);
        let pool = candidate_pool(self.kb.graph(), channel);
        let (refs, scored) = self.scan(&q, &pool, r, exclude);
        counter.record(channel, scored);
        Ok(refs)
    }

    /// Independent per-channel retrieval for a whole `L x C` window.
    pub fn retrieve_all(
        &self,
        x: ArrayView2<'_, f64>,
        r: usize,
        exclude: Option<Interval>,
        counter: &mut OpCounter,
    ) -> Result<Vec<Vec<RetrievedReference<'kb>>>> {
        let channels = self.kb.config().channels;
        if x.ncols() != channels {
            return Err(CraftError::shape("query channels", channels, x.ncols()));
        }
        (0..channels)
            .map(|c| self.retrieve_channel(x.column(c), c, r, exclude, counter))
            .collect()
    }

    /// Channel-agnostic baseline: one reference list shared by every channel.
    ///
    /// Each stored key (any channel, any entry) is scored by its mean
    /// similarity to all query channels; the best `r` are returned and would
    /// be used for every channel alike.
    pub fn retrieve_shared(
        &self,
        x: ArrayView2<'_, f64>,
        r: usize,
        exclude: Option<Interval>,
    ) -> Result<Vec<RetrievedReference<'kb>>> {
        self.check_query(x.nrows(), r)?;
        let cfg = self.kb.config();
        if x.ncols() != cfg.channels {
            return Err(CraftError::shape("query channels", cfg.channels, x.ncols()));
        }
        let queries: Vec<QuerySpectrum> = x.columns().into_iter().map(|c| self.query_spectrum(c)).collect();
        let mut top = TopR::new(r);
        for src in 0..cfg.channels {
            for entry in 0..cfg.entries {
                if let Some(ex) = exclude {
                    let t = self.kb.t_end(entry);
                    if Interval::new(t + 1 - cfg.lookback, t + cfg.horizon).intersects(&ex) {
                        continue;
                    }
                }
                let key = self.kb.key(src, entry);
                let mean = queries.iter().map(|q| score(q, &key, self.eps)).sum::<f64>()
                    / queries.len() as f64;
                top.offer(RetrievedReference {
                    value: self.kb.value(src, entry),
                    score: mean,
                    source_channel: src,
                    source_entry: entry,
                });
            }
        }
        Ok(top.items)
    }
}
