// SPDX-License-Identifier: Apache-2.0

//! Fused forecaster: a last-value-normalized two-layer MLP applied to each
//! channel, plus an `alpha`-weighted linear head over retrieved horizons.
//!
//! Both branches share their weights across channels. Work is laid out in
//! "rows", one row per (sample, channel), so a batch becomes a handful of
//! dense matrix products.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::codec::{read_file, Decoder, Encoder};
use crate::error::{CraftError, Result};
use crate::retrieval::{OpCounter, RetrievedReference, Retriever};

const MODEL_MAGIC: &[u8; 4] = b"CRMD";
const MODEL_VERSION: u32 = 1;

pub const DEFAULT_HIDDEN: usize = 512;
pub const DEFAULT_ALPHA: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CraftModel {
    /// `L x D`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `D x H`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    /// `H x H`
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
    pub alpha: f64,
    pub config: ModelConfig,
}

/// Fused, direct and retrieval forecasts, each `H x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastOutput {
    pub fused: Array2<f64>,
    pub direct: Array2<f64>,
    pub retrieval: Array2<f64>,
    pub refs_used: Vec<usize>,
}

/// `direct + alpha * retrieval`. With `alpha == 0` the direct forecast is
/// returned untouched.
pub fn fuse(direct: &Array2<f64>, retrieval: &Array2<f64>, alpha: f64) -> Result<Array2<f64>> {
    if direct.dim() != retrieval.dim() {
        return Err(CraftError::shape("fuse", direct.dim(), retrieval.dim()));
    }
    if alpha == 0.0 {
        return Ok(direct.clone());
    }
    let mut out = direct.clone();
    out.zip_mut_with(retrieval, |d, r| *d += alpha * r);
    Ok(out)
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Forward activations of the direct branch, kept for backprop.
#[derive(Debug, Clone)]
pub(crate) struct DirectCache {
    /// `rows x L`, last-value-normalized inputs
    pub u: Array2<f64>,
    /// `rows x D`, pre-activation
    pub z: Array2<f64>,
    /// `rows x D`
    pub a: Array2<f64>,
    /// `rows x H`, denormalized output
    pub out: Array2<f64>,
}

/// Forward activations of the retrieval head.
#[derive(Debug, Clone)]
pub(crate) struct RetrievalCache {
    /// `refs x H`, offset-normalized references
    pub v: Array2<f64>,
    /// owning row of each reference
    pub owner: Vec<usize>,
    /// references per row
    pub counts: Vec<usize>,
    /// `rows x H`
    pub out: Array2<f64>,
}

impl CraftModel {
    /// Uniform `+-1/sqrt(fan_in)` initialization for every tensor.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, alpha: f64, rng: &mut R) -> Result<Self> {
        Self::validate(config, alpha)?;
        let ModelConfig {
            lookback: l,
            horizon: h,
            hidden: d,
        } = config;
        let mut uniform = |fan_in: usize, shape: (usize, usize)| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            Array2::from_shape_simple_fn(shape, || dist.sample(rng))
        };
        let w1 = uniform(l, (l, d));
        let b1 = uniform(l, (1, d)).remove_axis(Axis(0));
        let w2 = uniform(d, (d, h));
        let b2 = uniform(d, (1, h)).remove_axis(Axis(0));
        let head_w = uniform(h, (h, h));
        let head_b = uniform(h, (1, h)).remove_axis(Axis(0));
        Ok(CraftModel {
            w1,
            b1,
            w2,
            b2,
            head_w,
            head_b,
            alpha,
            config,
        })
    }

    pub fn zeros(config: ModelConfig, alpha: f64) -> Result<Self> {
        Self::validate(config, alpha)?;
        let ModelConfig {
            lookback: l,
            horizon: h,
            hidden: d,
        } = config;
        Ok(CraftModel {
            w1: Array2::zeros((l, d)),
            b1: Array1::zeros(d),
            w2: Array2::zeros((d, h)),
            b2: Array1::zeros(h),
            head_w: Array2::zeros((h, h)),
            head_b: Array1::zeros(h),
            alpha,
            config,
        })
    }

    fn validate(config: ModelConfig, alpha: f64) -> Result<()> {
        if config.lookback == 0 || config.horizon == 0 || config.hidden == 0 {
            return Err(CraftError::invalid("model config", "dimensions must be positive"));
        }
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(CraftError::invalid("alpha", "must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite())) && self.alpha.is_finite()
    }

    /// Parameter tensors in declaration order, flattened.
    pub(crate) fn tensors(&self) -> [&[f64]; 6] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
            self.head_w.as_slice().expect("standard layout"),
            self.head_b.as_slice().expect("standard layout"),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
            self.head_w.as_slice_mut().expect("standard layout"),
            self.head_b.as_slice_mut().expect("standard layout"),
        ]
    }

    fn check_window(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.nrows() != self.config.lookback {
            return Err(CraftError::shape("input window rows", self.config.lookback, x.nrows()));
        }
        Ok(())
    }

    /// Direct branch over many windows; row `i * C + c` is channel `c` of window `i`.
    pub(crate) fn direct_rows(&self, windows: &[ArrayView2<'_, f64>]) -> Result<DirectCache> {
        let l = self.config.lookback;
        let channels = windows.first().map_or(0, |w| w.ncols());
        let rows = windows.len() * channels;
        let mut u = Array2::zeros((rows, l));
        let mut last = Array1::zeros(rows);
        for (i, w) in windows.iter().enumerate() {
            self.check_window(*w)?;
            if w.ncols() != channels {
                return Err(CraftError::shape("input window channels", channels, w.ncols()));
            }
            for c in 0..channels {
                let row = i * channels + c;
                let col = w.column(c);
                let anchor = col[l - 1];
                last[row] = anchor;
                u.row_mut(row).zip_mut_with(&col, |dst, &v| *dst = v - anchor);
            }
        }
        let z = u.dot(&self.w1) + &self.b1;
        let a = z.mapv(relu);
        let mut out = a.dot(&self.w2) + &self.b2;
        for (mut row, anchor) in out.rows_mut().into_iter().zip(last.iter()) {
            row += *anchor;
        }
        Ok(DirectCache { u, z, a, out })
    }

    /// Retrieval head over per-row reference lists. Rows without references
    /// produce zeros.
    pub(crate) fn retrieval_rows(&self, refs: &[&[RetrievedReference<'_>]]) -> Result<RetrievalCache> {
        let h = self.config.horizon;
        let total: usize = refs.iter().map(|r| r.len()).sum();
        let mut v = Array2::zeros((total, h));
        let mut owner = Vec::with_capacity(total);
        let mut offsets = Vec::with_capacity(total);
        let mut k = 0;
        for (row, list) in refs.iter().enumerate() {
            for r in list.iter() {
                if r.value.len() != h {
                    return Err(CraftError::shape("reference length", h, r.value.len()));
                }
                let anchor = r.value[h - 1];
                v.row_mut(k)
                    .iter_mut()
                    .zip(r.value)
                    .for_each(|(dst, &val)| *dst = val - anchor);
                owner.push(row);
                offsets.push(anchor);
                k += 1;
            }
        }
        let projected = v.dot(&self.head_w) + &self.head_b;
        let mut out = Array2::zeros((refs.len(), h));
        let counts: Vec<usize> = refs.iter().map(|r| r.len()).collect();
        for (i, p) in projected.rows().into_iter().enumerate() {
            let row = owner[i];
            let scale = 1.0 / counts[row] as f64;
            let anchor = offsets[i];
            out.row_mut(row)
                .zip_mut_with(&p, |dst, &pv| *dst += (pv + anchor) * scale);
        }
        Ok(RetrievalCache {
            v,
            owner,
            counts,
            out,
        })
    }

    /// NLinear-normalized MLP forecast of one `L x C` window, `H x C` out.
    pub fn direct_forecast(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let cache = self.direct_rows(&[x])?;
        Ok(cache.out.reversed_axes())
    }

    /// Mean of the projected references per channel, `H x C` out.
    pub fn retrieval_forecast(&self, refs: &[Vec<RetrievedReference<'_>>]) -> Result<Array2<f64>> {
        let lists: Vec<&[RetrievedReference<'_>]> = refs.iter().map(|r| r.as_slice()).collect();
        Ok(self.retrieval_rows(&lists)?.out.reversed_axes())
    }

    /// Retrieval, both branches and fusion for one window.
    pub fn forecast(
        &self,
        retriever: &Retriever<'_>,
        x: ArrayView2<'_, f64>,
        r: usize,
        counter: &mut OpCounter,
    ) -> Result<ForecastOutput> {
        self.check_kb(retriever)?;
        let refs = retriever.retrieve_all(x, r, None, counter)?;
        self.forecast_with_refs(x, &refs)
    }

    /// Same as [`CraftModel::forecast`] with references already retrieved.
    pub fn forecast_with_refs(
        &self,
        x: ArrayView2<'_, f64>,
        refs: &[Vec<RetrievedReference<'_>>],
    ) -> Result<ForecastOutput> {
        if refs.len() != x.ncols() {
            return Err(CraftError::shape("reference lists", x.ncols(), refs.len()));
        }
        let direct = self.direct_forecast(x)?;
        let retrieval = self.retrieval_forecast(refs)?;
        let fused = fuse(&direct, &retrieval, self.alpha)?;
        Ok(ForecastOutput {
            fused,
            direct,
            retrieval,
            refs_used: refs.iter().map(|r| r.len()).collect(),
        })
    }

    /// Fused forecasts for many windows at once, each `H x C`.
    pub fn forecast_batch(
        &self,
        windows: &[ArrayView2<'_, f64>],
        refs: &[Vec<Vec<RetrievedReference<'_>>>],
    ) -> Result<Vec<Array2<f64>>> {
        Ok(self
            .forecast_batch_parts(windows, refs)?
            .into_iter()
            .map(|(fused, _)| fused)
            .collect())
    }

    /// `(fused, direct)` for many windows at once.
    pub fn forecast_batch_parts(
        &self,
        windows: &[ArrayView2<'_, f64>],
        refs: &[Vec<Vec<RetrievedReference<'_>>>],
    ) -> Result<Vec<(Array2<f64>, Array2<f64>)>> {
        if windows.len() != refs.len() {
            return Err(CraftError::shape("batch references", windows.len(), refs.len()));
        }
        let channels = windows.first().map_or(0, |w| w.ncols());
        let direct = self.direct_rows(windows)?;
        let lists: Vec<&[RetrievedReference<'_>]> = refs
            .iter()
            .flat_map(|per_channel| per_channel.iter().map(|r| r.as_slice()))
            .collect();
        if lists.len() != direct.out.nrows() {
            return Err(CraftError::shape("batch references", direct.out.nrows(), lists.len()));
        }
        let retrieval = self.retrieval_rows(&lists)?;
        let h = self.config.horizon;
        (0..windows.len())
            .map(|i| {
                let rows = i * channels..(i + 1) * channels;
                let d = direct.out.slice(ndarray::s![rows.clone(), ..]).t().to_owned();
                let r = retrieval.out.slice(ndarray::s![rows, ..]).t().to_owned();
                debug_assert_eq!(d.dim(), (h, channels));
                Ok((fuse(&d, &r, self.alpha)?, d))
            })
            .collect()
    }

    pub(crate) fn check_kb(&self, retriever: &Retriever<'_>) -> Result<()> {
        let cfg = retriever.kb().config();
        if (cfg.lookback, cfg.horizon) != (self.config.lookback, self.config.horizon) {
            return Err(CraftError::ConfigMismatch(format!(
                "model has L={}, H={}; knowledge base has L={}, H={}",
                self.config.lookback, self.config.horizon, cfg.lookback, cfg.horizon
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(self.encode()?.finish())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.encode()?.write_to(path.as_ref())
    }

    fn encode(&self) -> Result<Encoder> {
        let mut enc = Encoder::new(MODEL_MAGIC, MODEL_VERSION);
        enc.count(self.config.lookback)?;
        enc.count(self.config.horizon)?;
        enc.count(self.config.hidden)?;
        enc.f64(self.alpha);
        for t in self.tensors() {
            enc.f64s(t);
        }
        Ok(enc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<CraftModel> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<CraftModel> {
        let mut dec = Decoder::new(bytes, MODEL_MAGIC, MODEL_VERSION)?;
        let config = ModelConfig {
            lookback: dec.count("config")?,
            horizon: dec.count("config")?,
            hidden: dec.count("config")?,
        };
        let alpha = dec.f64("config")?;
        let (l, h, d) = (config.lookback, config.horizon, config.hidden);
        let matrix = |dec: &mut Decoder<'_>, shape: (usize, usize)| -> Result<Array2<f64>> {
            let data = dec.f64s(shape.0 * shape.1, "parameters")?;
            Ok(Array2::from_shape_vec(shape, data).expect("sized buffer"))
        };
        let w1 = matrix(&mut dec, (l, d))?;
        let b1 = Array1::from(dec.f64s(d, "parameters")?);
        let w2 = matrix(&mut dec, (d, h))?;
        let b2 = Array1::from(dec.f64s(h, "parameters")?);
        let head_w = matrix(&mut dec, (h, h))?;
        let head_b = Array1::from(dec.f64s(h, "parameters")?);
        dec.finish()?;
        Self::validate(config, alpha)?;
        let model = CraftModel {
            w1,
            b1,
            w2,
            b2,
            head_w,
            head_b,
            alpha,
            config,
        };
        if !model.is_finite() {
            return Err(CraftError::NonFinite("checkpoint parameters"));
        }
        Ok(model)
    }
}
