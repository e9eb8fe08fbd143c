// SPDX-License-Identifier: Apache-2.0

//! Channel-wise knowledge base of truncated key spectra.
//!
//! Every memory key column is transformed with an unnormalized forward
//! real-input DFT and only the lowest `F` bins (DC included) are kept. The
//! raw truncated spectrum is stored together with its L2 norm; scoring
//! divides by the norms, so nothing is pre-normalized here.

use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::codec::{read_file, Decoder, Encoder};
use crate::data::MemoryEntry;
use crate::error::{CraftError, Result};
use crate::graph::{Neighbor, RelationGraph};

const KB_MAGIC: &[u8; 4] = b"CRKB";
const KB_VERSION: u32 = 1;

/// Number of bins produced by a real-input DFT of length `len`.
pub fn rfft_len(len: usize) -> usize {
    len / 2 + 1
}

/// Default frequency cutoff: 5% of the lookback length, rounded, kept within
/// the available bins. Gives 36 for a 720-step lookback.
pub fn default_freq_cutoff(lookback: usize) -> usize {
    let f = (0.05 * lookback as f64).round() as usize;
    f.clamp(1, rfft_len(lookback).max(1))
}

/// Multiplicity of bin `k` when summing energy over a one-sided spectrum.
pub fn parseval_weight(k: usize, len: usize) -> f64 {
    if k == 0 || (len.is_multiple_of(2) && k == len / 2) {
        1.0
    } else {
        2.0
    }
}

/// A planned forward transform for one window length.
#[derive(Clone)]
pub struct SpectralTransform {
    fft: Arc<dyn Fft<f64>>,
    len: usize,
}

impl std::fmt::Debug for SpectralTransform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpectralTransform").field("len", &self.len).finish()
    }
}

impl SpectralTransform {
    pub fn new(len: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(len.max(1));
        SpectralTransform { fft, len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// All `floor(len/2)+1` bins of the forward transform.
    pub fn full<'a>(&self, x: impl IntoIterator<Item = &'a f64>) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = x.into_iter().map(|&v| Complex64::new(v, 0.0)).collect();
        assert_eq!(buf.len(), self.len, "window length does not match the planned transform");
        self.fft.process(&mut buf);
        buf.truncate(rfft_len(self.len));
        buf
    }

    /// The lowest `f` bins.
    pub fn truncated<'a>(&self, x: impl IntoIterator<Item = &'a f64>, f: usize) -> Vec<Complex64> {
        let mut bins = self.full(x);
        bins.truncate(f);
        bins
    }
}

fn check_cutoff(len: usize, f: usize) -> Result<()> {
    if f == 0 || f > rfft_len(len) {
        return Err(CraftError::invalid(
            "freq_cutoff",
            format!("{f} outside 1..={} for window length {len}", rfft_len(len)),
        ));
    }
    Ok(())
}

/// First `f` bins of the unnormalized forward DFT of a real vector,
/// `X[k] = sum_n x[n] exp(-2 pi i k n / L)`.
pub fn truncated_rfft(x: &[f64], f: usize) -> Result<Vec<Complex64>> {
    check_cutoff(x.len(), f)?;
    Ok(SpectralTransform::new(x.len()).truncated(x, f))
}

pub fn spectrum_norm(spectrum: &[Complex64]) -> f64 {
    spectrum.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Share of the window's total energy captured by the lowest `f` bins.
/// Returns 1 for an all-zero window.
pub fn retained_energy_fraction(transform: &SpectralTransform, x: &[f64], f: usize) -> f64 {
    let bins = transform.full(x);
    let weighted = |k: usize, z: &Complex64| parseval_weight(k, x.len()) * z.norm_sqr();
    let total: f64 = bins.iter().enumerate().map(|(k, z)| weighted(k, z)).sum();
    if total == 0.0 {
        return 1.0;
    }
    let kept: f64 = bins.iter().take(f).enumerate().map(|(k, z)| weighted(k, z)).sum();
    kept / total
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KbConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub freq_cutoff: usize,
    pub channels: usize,
    pub entries: usize,
}

/// Borrowed view of one stored key spectrum.
#[derive(Debug, Clone, Copy)]
pub struct SpectralKey<'a> {
    pub spectrum: &'a [Complex64],
    pub norm: f64,
    pub entry_id: usize,
    pub channel_id: usize,
}

/// Per-channel spectra, norms and value horizons of every memory entry,
/// plus the relation graph used to prune retrieval.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    config: KbConfig,
    graph: RelationGraph,
    /// Global `t_end` of each memory entry.
    t_ends: Vec<usize>,
    /// `[c][m * F + k]`
    spectra: Vec<Vec<Complex64>>,
    /// `[c][m]`
    norms: Vec<Vec<f64>>,
    /// `[c][m * H + h]`
    values: Vec<Vec<f64>>,
}

impl KnowledgeBase {
    pub fn build(memory: &[MemoryEntry<'_>], graph: RelationGraph, f: usize) -> Result<Self> {
        let first = memory.first().ok_or(CraftError::EmptyMemory)?;
        let (lookback, channels) = first.x.dim();
        let horizon = first.y.nrows();
        check_cutoff(lookback, f)?;
        for e in memory {
            if e.x.dim() != (lookback, channels) || e.y.dim() != (horizon, channels) {
                return Err(CraftError::shape(
                    "memory entry",
                    ((lookback, channels), (horizon, channels)),
                    (e.x.dim(), e.y.dim()),
                ));
            }
        }
        if graph.channel_count() != channels {
            return Err(CraftError::shape("relation graph", channels, graph.channel_count()));
        }
        let transform = SpectralTransform::new(lookback);

        let per_channel: Vec<(Vec<Complex64>, Vec<f64>, Vec<f64>)> = (0..channels)
            .into_par_iter()
            .map(|c| {
                let mut spectra = Vec::with_capacity(memory.len() * f);
                let mut norms = Vec::with_capacity(memory.len());
                let mut values = Vec::with_capacity(memory.len() * horizon);
                for e in memory {
                    let coeffs = transform.truncated(e.x.column(c), f);
                    norms.push(spectrum_norm(&coeffs));
                    spectra.extend(coeffs);
                    values.extend(e.y.column(c).iter());
                }
                (spectra, norms, values)
            })
            .collect();

        let (mut spectra, mut norms, mut values) = (vec![], vec![], vec![]);
        for (s, n, v) in per_channel {
            spectra.push(s);
            norms.push(n);
            values.push(v);
        }
        Ok(KnowledgeBase {
            config: KbConfig {
                lookback,
                horizon,
                freq_cutoff: f,
                channels,
                entries: memory.len(),
            },
            graph,
            t_ends: memory.iter().map(|e| e.t_end).collect(),
            spectra,
            norms,
            values,
        })
    }

    pub fn config(&self) -> KbConfig {
        self.config
    }

    pub fn graph(&self) -> &RelationGraph {
        &self.graph
    }

    /// Same stored spectra and values, different graph. Used by the
    /// candidate-count sweep.
    pub fn with_graph(&self, graph: RelationGraph) -> Result<KnowledgeBase> {
        if graph.channel_count() != self.config.channels {
            return Err(CraftError::shape(
                "relation graph",
                self.config.channels,
                graph.channel_count(),
            ));
        }
        Ok(KnowledgeBase {
            graph,
            ..self.clone()
        })
    }

    pub fn t_end(&self, entry: usize) -> usize {
        self.t_ends[entry]
    }

    pub fn key(&self, channel: usize, entry: usize) -> SpectralKey<'_> {
        let f = self.config.freq_cutoff;
        SpectralKey {
            spectrum: &self.spectra[channel][entry * f..(entry + 1) * f],
            norm: self.norms[channel][entry],
            entry_id: entry,
            channel_id: channel,
        }
    }

    pub fn value(&self, channel: usize, entry: usize) -> &[f64] {
        let h = self.config.horizon;
        &self.values[channel][entry * h..(entry + 1) * h]
    }

    /// Errors unless the stored config agrees with the run's `(L, H, F)`.
    pub fn check_config(&self, lookback: usize, horizon: usize, freq_cutoff: usize) -> Result<()> {
        let c = self.config;
        if (c.lookback, c.horizon, c.freq_cutoff) != (lookback, horizon, freq_cutoff) {
            return Err(CraftError::ConfigMismatch(format!(
                "knowledge base has L={}, H={}, F={}; run expects L={lookback}, H={horizon}, F={freq_cutoff}",
                c.lookback, c.horizon, c.freq_cutoff
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.encode()?.write_to(path.as_ref())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(self.encode()?.finish())
    }

    fn encode(&self) -> Result<Encoder> {
        let c = self.config;
        let mut enc = Encoder::new(KB_MAGIC, KB_VERSION);
        for v in [c.lookback, c.horizon, c.freq_cutoff, c.channels, c.entries] {
            enc.count(v)?;
        }
        enc.count(self.graph.m())?;
        for list in self.graph.lists() {
            enc.count(list.len())?;
            for n in list {
                enc.count(n.channel)?;
                enc.f64(n.score);
            }
        }
        for &t in &self.t_ends {
            enc.u64(t as u64);
        }
        for ch in 0..c.channels {
            for z in &self.spectra[ch] {
                enc.f64(z.re);
                enc.f64(z.im);
            }
            enc.f64s(&self.norms[ch]);
            enc.f64s(&self.values[ch]);
        }
        Ok(enc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<KnowledgeBase> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }

    /// Loads and checks the file against the run's `(L, H, F)`.
    pub fn load_expecting(
        path: impl AsRef<Path>,
        lookback: usize,
        horizon: usize,
        freq_cutoff: usize,
    ) -> Result<KnowledgeBase> {
        let kb = Self::load(path)?;
        kb.check_config(lookback, horizon, freq_cutoff)?;
        Ok(kb)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<KnowledgeBase> {
        let mut dec = Decoder::new(bytes, KB_MAGIC, KB_VERSION)?;
        let config = KbConfig {
            lookback: dec.count("config")?,
            horizon: dec.count("config")?,
            freq_cutoff: dec.count("config")?,
            channels: dec.count("config")?,
            entries: dec.count("config")?,
        };
        let (f, h, n) = (config.freq_cutoff, config.horizon, config.entries);

        let m = dec.count("graph")?;
        let mut lists = Vec::with_capacity(config.channels.min(1 << 16));
        for _ in 0..config.channels {
            let len = dec.count("graph")?;
            let mut list = Vec::with_capacity(len.min(1 << 16));
            for _ in 0..len {
                let channel = dec.count("graph")?;
                let score = dec.f64("graph")?;
                list.push(Neighbor { channel, score });
            }
            lists.push(list);
        }

        let mut t_ends = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            t_ends.push(dec.u64("entry index")? as usize);
        }

        let (mut spectra, mut norms, mut values) = (vec![], vec![], vec![]);
        for _ in 0..config.channels {
            let raw = dec.f64s(2 * n * f, "spectra")?;
            spectra.push(raw.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect());
            norms.push(dec.f64s(n, "norms")?);
            values.push(dec.f64s(n * h, "values")?);
        }
        dec.finish()?;
        let graph = RelationGraph::from_lists(lists, m)?;

        Ok(KnowledgeBase {
            config,
            graph,
            t_ends,
            spectra,
            norms,
            values,
        })
    }
}

/// Mean retained-energy fraction over every key column in memory.
pub fn mean_retained_energy(memory: &[MemoryEntry<'_>], f: usize) -> f64 {
    let Some(first) = memory.first() else {
        return 1.0;
    };
    let (lookback, channels) = first.x.dim();
    let transform = SpectralTransform::new(lookback);
    let total: f64 = memory
        .par_iter()
        .map(|e| {
            (0..channels)
                .map(|c| {
                    let col: Vec<f64> = e.x.column(c).to_vec();
                    retained_energy_fraction(&transform, &col, f)
                })
                .sum::<f64>()
        })
        .sum();
    total / (memory.len() * channels) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sliding_windows, MultivariateSeries};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    /// Direct O(L^2) summation with exact index reduction for the twiddles.
    fn naive_dft(x: &[f64], f: usize) -> Vec<Complex64> {
        let n = x.len();
        (0..f)
            .map(|k| {
                let mut acc = Complex64::new(0.0, 0.0);
                for (j, &v) in x.iter().enumerate() {
                    let angle = -2.0 * PI * ((k * j) % n) as f64 / n as f64;
                    acc += Complex64::new(v * angle.cos(), v * angle.sin());
                }
                acc
            })
            .collect()
    }

    fn random_series(t: usize, c: usize, seed: u64) -> MultivariateSeries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = Array2::from_shape_fn((t, c), |_| rng.random_range(-1.0..1.0));
        MultivariateSeries::from_values(values, 0).unwrap()
    }

    #[test]
    fn constant_signal_is_dc_only() {
        let x = vec![2.5; 20];
        let bins = truncated_rfft(&x, 11).unwrap();
        assert!((bins[0].re - 50.0).abs() < 1e-9 && bins[0].im.abs() < 1e-9);
        for b in &bins[1..] {
            assert!(b.norm() < 1e-9);
        }
    }

    #[test]
    fn pure_tone_lands_in_its_bin() {
        let l = 48;
        let x: Vec<f64> = (0..l).map(|n| (2.0 * PI * n as f64 * 3.0 / l as f64).cos()).collect();
        let bins = truncated_rfft(&x, 6).unwrap();
        assert!((bins[3].norm() - l as f64 / 2.0).abs() < 1e-6);
        for (k, b) in bins.iter().enumerate().filter(|(k, _)| *k != 3) {
            assert!(b.norm() < 1e-9, "bin {k} = {b}");
        }
    }

    #[test]
    fn matches_naive_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..32).map(|_| rng.random_range(-3.0..3.0)).collect();
        let fast = truncated_rfft(&x, 9).unwrap();
        let slow = naive_dft(&x, 9);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).norm() <= 1e-9 * b.norm().max(1.0));
        }
    }

    #[test]
    fn cutoff_bounds() {
        let x = vec![1.0; 8];
        assert!(truncated_rfft(&x, 0).is_err());
        assert!(truncated_rfft(&x, 5).is_ok());
        assert!(truncated_rfft(&x, 6).is_err());
    }

    #[test]
    fn default_cutoff() {
        assert_eq!(default_freq_cutoff(720), 36);
        assert_eq!(default_freq_cutoff(96), 5);
        assert_eq!(default_freq_cutoff(4), 1);
        assert_eq!(default_freq_cutoff(1), 1);
    }

    #[test]
    fn singleton_kb() {
        let s = random_series(10, 1, 2);
        let mem = sliding_windows(&s, 8, 2, 1).unwrap();
        let graph = RelationGraph::from_lists(vec![vec![]], 0).unwrap();
        let kb = KnowledgeBase::build(&mem, graph, 3).unwrap();
        assert_eq!(kb.config().entries, 1);
        let key = kb.key(0, 0);
        let col: Vec<f64> = mem[0].x.column(0).to_vec();
        assert_eq!(key.spectrum, truncated_rfft(&col, 3).unwrap().as_slice());
        assert_eq!(kb.value(0, 0), mem[0].y.column(0).to_vec().as_slice());
    }

    #[test]
    fn kb_shape_contract() {
        let s = random_series(720 + 96 + 99, 7, 4);
        let mem = sliding_windows(&s, 720, 96, 1).unwrap();
        assert_eq!(mem.len(), 100);
        let graph = RelationGraph::build(&mem, 3).unwrap();
        let kb = KnowledgeBase::build(&mem, graph, 36).unwrap();
        let cfg = kb.config();
        assert_eq!((cfg.channels, cfg.entries, cfg.freq_cutoff), (7, 100, 36));
        for c in 0..7 {
            for m in 0..100 {
                let key = kb.key(c, m);
                assert_eq!(key.spectrum.len(), 36);
                assert!(key.norm >= 0.0);
                assert!((key.norm - spectrum_norm(key.spectrum)).abs() <= 1e-9 * key.norm);
                assert_eq!(kb.t_end(m), 719 + m);
            }
        }
    }

    #[test]
    fn sinusoid_energy_concentrates_in_period_bin() {
        let l = 64;
        let values = Array2::from_shape_fn((200, 1), |(t, _)| (2.0 * PI * t as f64 / 16.0).sin());
        let s = MultivariateSeries::from_values(values, 0).unwrap();
        let mem = sliding_windows(&s, l, 8, 1).unwrap();
        let graph = RelationGraph::from_lists(vec![vec![]], 0).unwrap();
        let kb = KnowledgeBase::build(&mem, graph, 8).unwrap();
        for m in (0..mem.len()).step_by(17) {
            let col: Vec<f64> = mem[m].x.column(0).to_vec();
            let oracle = naive_dft(&col, 8);
            let total: f64 = oracle.iter().map(|z| z.norm_sqr()).sum();
            let period_bin = oracle[l / 16].norm_sqr();
            assert!(period_bin / total > 0.99);
            let key = kb.key(0, m);
            let stored_bin = key.spectrum[4].norm_sqr();
            assert!(stored_bin / key.norm.powi(2) > 0.99);
        }
    }

    #[test]
    fn kb_file_round_trip_is_bit_exact() {
        let s = random_series(12, 2, 9);
        let mem = sliding_windows(&s, 6, 3, 2).unwrap();
        assert_eq!(mem.len(), 2);
        let graph = RelationGraph::build(&mem, 1).unwrap();
        let kb = KnowledgeBase::build(&mem, graph, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.crkb");
        kb.save(&path).unwrap();
        let back = KnowledgeBase::load(&path).unwrap();
        assert_eq!(back, kb);
        assert_eq!(back.to_bytes().unwrap(), kb.to_bytes().unwrap());
        assert_eq!(&std::fs::read(&path).unwrap()[..4], b"CRKB");
    }

    #[test]
    fn kb_file_rejections() {
        let s = random_series(60, 2, 10);
        let mem = sliding_windows(&s, 36, 4, 1).unwrap();
        let graph = RelationGraph::build(&mem, 1).unwrap();
        let kb = KnowledgeBase::build(&mem, graph, 2).unwrap();
        let bytes = kb.to_bytes().unwrap();

        let mut corrupt = bytes.clone();
        let last = corrupt.len() - 1;
        corrupt[last] ^= 0xff;
        assert!(matches!(
            KnowledgeBase::from_bytes(&corrupt),
            Err(CraftError::ChecksumMismatch { .. })
        ));

        let mut payload_flip = bytes.clone();
        payload_flip[200] ^= 0x01;
        assert!(matches!(
            KnowledgeBase::from_bytes(&payload_flip),
            Err(CraftError::ChecksumMismatch { .. })
        ));

        assert!(matches!(
            KnowledgeBase::from_bytes(&bytes[..bytes.len() / 2]),
            Err(CraftError::Truncated(_))
        ));

        let mut version = bytes.clone();
        version[4] = 9;
        assert!(matches!(
            KnowledgeBase::from_bytes(&version),
            Err(CraftError::VersionMismatch { found: 9, .. })
        ));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.crkb");
        kb.save(&path).unwrap();
        let err = KnowledgeBase::load_expecting(&path, 36, 4, 3).unwrap_err();
        assert!(err.to_string().starts_with("config mismatch"));
        assert!(KnowledgeBase::load_expecting(&path, 36, 4, 2).is_ok());
    }

    #[test]
    fn build_is_deterministic() {
        let s = random_series(80, 3, 12);
        let mem = sliding_windows(&s, 16, 4, 1).unwrap();
        let a = KnowledgeBase::build(&mem, RelationGraph::build(&mem, 2).unwrap(), 5).unwrap();
        let b = KnowledgeBase::build(&mem, RelationGraph::build(&mem, 2).unwrap(), 5).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn parseval_holds(x in proptest::collection::vec(-10.0f64..10.0, 2..96)) {
                let t = SpectralTransform::new(x.len());
                let bins = t.full(&x);
                let weighted: f64 = bins
                    .iter()
                    .enumerate()
                    .map(|(k, z)| parseval_weight(k, x.len()) * z.norm_sqr())
                    .sum();
                let energy = x.len() as f64 * x.iter().map(|v| v * v).sum::<f64>();
                prop_assert!((weighted - energy).abs() <= 1e-6 * energy.max(1e-12));
            }

            #[test]
            fn linearity(
                pair in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 4..64),
                a in -3.0f64..3.0,
                b in -3.0f64..3.0,
            ) {
                let x: Vec<f64> = pair.iter().map(|p| p.0).collect();
                let y: Vec<f64> = pair.iter().map(|p| p.1).collect();
                let f = rfft_len(x.len());
                let mix: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
                let lhs = truncated_rfft(&mix, f).unwrap();
                let fx = truncated_rfft(&x, f).unwrap();
                let fy = truncated_rfft(&y, f).unwrap();
                for k in 0..f {
                    let rhs = fx[k] * a + fy[k] * b;
                    prop_assert!((lhs[k] - rhs).norm() < 1e-9);
                }
            }
        }
    }
}
