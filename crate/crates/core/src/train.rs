// SPDX-License-Identifier: Apache-2.0

//! Joint training of the direct MLP and the retrieval head on fused-output
//! MSE, with Adam and validation-based early stopping.
//!
//! Retrieval selection is treated as a constant: gradients flow through the
//! head applied to whatever references were selected, never through the
//! selection itself. Training queries never see memory entries overlapping
//! their own input-plus-label span.

use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{sliding_windows, Interval, MultivariateSeries, WindowPair};
use crate::error::{CraftError, Result};
use crate::model::{CraftModel, ModelConfig, DEFAULT_ALPHA, DEFAULT_HIDDEN};
use crate::retrieval::{OpCounter, RetrievedReference, Retriever};
use crate::spectral::KnowledgeBase;

pub fn mse_loss(pred: &Array2<f64>, target: ArrayView2<'_, f64>) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(CraftError::shape("mse", pred.dim(), target.dim()));
    }
    let n = pred.len().max(1) as f64;
    Ok(pred.iter().zip(target.iter()).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub alpha: f64,
    /// references retrieved per channel
    pub r: usize,
    pub hidden: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// keep the retrieval head at its initialization
    pub freeze_head: bool,
    /// retrieve once per training window and reuse across epochs
    pub cache_retrieval: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            epochs: 10,
            patience: 3,
            seed: 2025,
            alpha: DEFAULT_ALPHA,
            r: 1,
            hidden: DEFAULT_HIDDEN,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            freeze_head: false,
            cache_retrieval: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CraftError::invalid("lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(CraftError::invalid("batch_size", "must be at least 1"));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(CraftError::invalid(name, "must lie in (0, 1)"));
            }
        }
        if self.adam_eps <= 0.0 {
            return Err(CraftError::invalid("adam_eps", "must be positive"));
        }
        if self.r == 0 {
            return Err(CraftError::invalid("r", "must be at least 1"));
        }
        if self.hidden == 0 {
            return Err(CraftError::invalid("hidden", "must be at least 1"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(CraftError::invalid("alpha", "must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Same layout as the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
}

impl Gradients {
    pub fn tensors(&self) -> [&[f64]; 6] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
            self.head_w.as_slice().expect("standard layout"),
            self.head_b.as_slice().expect("standard layout"),
        ]
    }

    pub const NAMES: [&'static str; 6] = ["w1", "b1", "w2", "b2", "head_w", "head_b"];
}

/// One minibatch: input windows, targets and per-channel references.
#[derive(Debug, Clone)]
pub struct Batch<'a, 'kb> {
    pub inputs: Vec<ArrayView2<'a, f64>>,
    pub targets: Vec<ArrayView2<'a, f64>>,
    pub refs: Vec<Vec<Vec<RetrievedReference<'kb>>>>,
}

/// Forward pass plus exact gradients of the batch-mean fused MSE.
pub fn backward(model: &CraftModel, batch: &Batch<'_, '_>) -> Result<(f64, Gradients)> {
    let n = batch.inputs.len();
    if n == 0 || batch.targets.len() != n || batch.refs.len() != n {
        return Err(CraftError::shape(
            "batch",
            n,
            (batch.targets.len(), batch.refs.len()),
        ));
    }
    let channels = batch.inputs[0].ncols();
    let h = model.config.horizon;
    let direct = model.direct_rows(&batch.inputs)?;
    let lists: Vec<&[RetrievedReference<'_>]> = batch
        .refs
        .iter()
        .flat_map(|per| per.iter().map(|r| r.as_slice()))
        .collect();
    if lists.len() != n * channels {
        return Err(CraftError::shape("batch references", n * channels, lists.len()));
    }
    let retrieval = model.retrieval_rows(&lists)?;

    let rows = n * channels;
    let mut fused = direct.out.clone();
    if model.alpha != 0.0 {
        fused.zip_mut_with(&retrieval.out, |d, r| *d += model.alpha * r);
    }
    let scale = 2.0 / (rows * h) as f64;
    let mut grad_out = Array2::zeros((rows, h));
    let mut loss = 0.0;
    for (i, target) in batch.targets.iter().enumerate() {
        if target.dim() != (h, channels) {
            return Err(CraftError::shape("target", (h, channels), target.dim()));
        }
        for c in 0..channels {
            let row = i * channels + c;
            for k in 0..h {
                let err = fused[[row, k]] - target[[k, c]];
                loss += err * err;
                grad_out[[row, k]] = scale * err;
            }
        }
    }
    let loss = loss / (rows * h) as f64;
    if !loss.is_finite() {
        return Err(CraftError::NonFinite("loss"));
    }

    let w2 = direct.a.t().dot(&grad_out);
    let b2 = grad_out.sum_axis(Axis(0));
    let mut grad_z = grad_out.dot(&model.w2.t());
    grad_z.zip_mut_with(&direct.z, |g, &z| {
        if z <= 0.0 {
            *g = 0.0
        }
    });
    let w1 = direct.u.t().dot(&grad_z);
    let b1 = grad_z.sum_axis(Axis(0));

    let refs_total = retrieval.owner.len();
    let mut grad_p = Array2::zeros((refs_total, h));
    for (k, &row) in retrieval.owner.iter().enumerate() {
        let s = model.alpha / retrieval.counts[row] as f64;
        grad_p
            .row_mut(k)
            .zip_mut_with(&grad_out.row(row), |g, &o| *g = s * o);
    }
    let head_w = retrieval.v.t().dot(&grad_p);
    let head_b = grad_p.sum_axis(Axis(0));

    Ok((
        loss,
        Gradients {
            w1,
            b1,
            w2,
            b2,
            head_w,
            head_b,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        AdamConfig {
            lr: c.lr,
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
        }
    }
}

/// First/second moment accumulators, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn for_model(model: &CraftModel) -> Self {
        let sizes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
        Self::new(&sizes)
    }
}

/// Bias-corrected Adam update. `active[i] == false` leaves tensor `i` and
/// its moments untouched.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    active: &[bool],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || active.len() != params.len() {
        return Err(CraftError::shape("adam tensors", state.m.len(), (params.len(), grads.len())));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(CraftError::shape("adam tensor", p.len(), g.len()));
        }
        if active[i] && g.iter().any(|v| !v.is_finite()) {
            return Err(CraftError::NonFinite("gradient"));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if !active[i] {
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Applies one Adam step to all six model tensors.
pub fn adam_step_model(
    model: &mut CraftModel,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &AdamConfig,
    freeze_head: bool,
) -> Result<()> {
    let active = [true, true, true, true, !freeze_head, !freeze_head];
    let g = grads.tensors();
    let mut p = model.tensors_mut();
    adam_step(&mut p, &g, &active, state, cfg)
}

/// Tracks the best validation loss and when to stop.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    stale: usize,
}

impl EarlyStopping {
    /// `patience == 0` disables stopping.
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            stale: 0,
        }
    }

    /// Records an epoch's validation loss; returns true if it is a new best.
    pub fn observe(&mut self, epoch: usize, val: f64) -> bool {
        if val < self.best {
            self.best = val;
            self.best_epoch = Some(epoch);
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.patience > 0 && self.stale >= self.patience
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    /// Fused MSE of the initialized model over the training windows.
    pub initial_train_mse: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl TrainingLog {
    /// Plain-text log: one `epoch train_mse val_mse seconds` line per epoch.
    pub fn render(&self) -> String {
        let mut out = String::from("epoch\ttrain_mse\tval_mse\tseconds\n");
        if let Some(init) = self.initial_train_mse {
            out.push_str(&format!("0\t{init}\t-\t0\n"));
        }
        for e in &self.epochs {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.3}\n",
                e.epoch, e.train_mse, e.val_mse, e.seconds
            ));
        }
        if let Some(b) = self.best_epoch {
            out.push_str(&format!("best_epoch\t{b}\n"));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: CraftModel,
    pub log: TrainingLog,
}

type WindowRefs<'kb> = Vec<Vec<RetrievedReference<'kb>>>;

/// Retrieves references for each window in parallel, collected in order.
/// With `exclude_self`, each window's own span is barred from memory.
pub fn retrieve_windows<'kb>(
    retriever: &Retriever<'kb>,
    windows: &[WindowPair<'_>],
    r: usize,
    exclude_self: bool,
) -> Result<(Vec<WindowRefs<'kb>>, OpCounter)> {
    let channels = retriever.kb().config().channels;
    let results: Vec<Result<(WindowRefs<'kb>, OpCounter)>> = windows
        .par_iter()
        .map(|w| {
            let mut counter = OpCounter::new(channels);
            let exclude = exclude_self.then(|| w.span());
            let refs = retriever.retrieve_all(w.x, r, exclude, &mut counter)?;
            debug_assert!(!exclude_self || no_leakage(retriever.kb(), w, &refs));
            Ok((refs, counter))
        })
        .collect();
    let mut all = Vec::with_capacity(windows.len());
    let mut total = OpCounter::new(channels);
    for res in results {
        let (refs, counter) = res?;
        total.merge(&counter);
        all.push(refs);
    }
    Ok((all, total))
}

fn no_leakage(kb: &KnowledgeBase, w: &WindowPair<'_>, refs: &[Vec<RetrievedReference<'_>>]) -> bool {
    let cfg = kb.config();
    let query = w.span();
    refs.iter().flatten().all(|r| {
        let t = kb.t_end(r.source_entry);
        !Interval::new(t + 1 - cfg.lookback, t + cfg.horizon).intersects(&query)
    })
}

/// Aggregate error of a model over a set of windows.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub mse: f64,
    pub mae: f64,
    pub direct_mse: f64,
    pub direct_mae: f64,
    pub windows: usize,
    pub counter: OpCounter,
}

/// Fused and direct-only MSE/MAE over `windows`, in batches.
pub fn evaluate(
    model: &CraftModel,
    retriever: &Retriever<'_>,
    windows: &[WindowPair<'_>],
    r: usize,
    batch_size: usize,
) -> Result<EvalResult> {
    model.check_kb(retriever)?;
    let channels = retriever.kb().config().channels;
    let mut counter = OpCounter::new(channels);
    let (mut se, mut ae, mut dse, mut dae, mut count) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for chunk in windows.chunks(batch_size.max(1)) {
        let (refs, c) = retrieve_windows(retriever, chunk, r, false)?;
        counter.merge(&c);
        let inputs: Vec<_> = chunk.iter().map(|w| w.x).collect();
        let outs = model.forecast_batch_parts(&inputs, &refs)?;
        for ((fused, direct), w) in outs.iter().zip(chunk) {
            for ((f, d), y) in fused.iter().zip(direct.iter()).zip(w.y.iter()) {
                se += (f - y).powi(2);
                ae += (f - y).abs();
                dse += (d - y).powi(2);
                dae += (d - y).abs();
            }
            count += w.y.len();
        }
    }
    let n = count.max(1) as f64;
    Ok(EvalResult {
        mse: se / n,
        mae: ae / n,
        direct_mse: dse / n,
        direct_mae: dae / n,
        windows: windows.len(),
        counter,
    })
}

/// Mean fused loss over windows with pre-retrieved references.
fn mean_loss(
    model: &CraftModel,
    windows: &[WindowPair<'_>],
    refs: &[WindowRefs<'_>],
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for (ws, rs) in windows.chunks(batch_size).zip(refs.chunks(batch_size)) {
        let inputs: Vec<_> = ws.iter().map(|w| w.x).collect();
        let outs = model.forecast_batch(&inputs, rs)?;
        for (o, w) in outs.iter().zip(ws) {
            total += mse_loss(o, w.y)?;
        }
    }
    Ok(total / windows.len().max(1) as f64)
}

/// Trains a fresh model against a knowledge base built from `train`.
///
/// Returns the checkpoint with the best validation MSE. `epochs == 0`
/// returns the initialized model untouched.
pub fn train(
    train: &MultivariateSeries,
    val: &MultivariateSeries,
    kb: &KnowledgeBase,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let kb_cfg = kb.config();
    let (l, h) = (kb_cfg.lookback, kb_cfg.horizon);
    if train.channels() != kb_cfg.channels || val.channels() != kb_cfg.channels {
        return Err(CraftError::shape(
            "training channels",
            kb_cfg.channels,
            (train.channels(), val.channels()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model_cfg = ModelConfig {
        lookback: l,
        horizon: h,
        hidden: config.hidden,
    };
    let mut model = CraftModel::init(model_cfg, config.alpha, &mut rng)?;
    let mut log = TrainingLog::default();
    if config.epochs == 0 {
        return Ok(TrainOutcome { model, log });
    }

    let retriever = Retriever::new(kb);
    let train_windows = sliding_windows(train, l, h, 1)?;
    let val_windows = sliding_windows(val, l, h, 1)?;
    let adam_cfg = AdamConfig::from(config);
    let mut adam = AdamState::for_model(&model);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = model.clone();

    let cached = if config.cache_retrieval {
        Some(retrieve_windows(&retriever, &train_windows, config.r, true)?.0)
    } else {
        None
    };
    let initial = match &cached {
        Some(refs) => mean_loss(&model, &train_windows, refs, config.batch_size)?,
        None => {
            let (refs, _) = retrieve_windows(&retriever, &train_windows, config.r, true)?;
            mean_loss(&model, &train_windows, &refs, config.batch_size)?
        }
    };
    log.initial_train_mse = Some(initial);

    let mut order: Vec<usize> = (0..train_windows.len()).collect();
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(config.batch_size) {
            let picked: Vec<WindowPair<'_>> = idx.iter().map(|&i| train_windows[i]).collect();
            let refs = match &cached {
                Some(all) => idx.iter().map(|&i| all[i].clone()).collect(),
                None => retrieve_windows(&retriever, &picked, config.r, true)?.0,
            };
            let batch = Batch {
                inputs: picked.iter().map(|w| w.x).collect(),
                targets: picked.iter().map(|w| w.y).collect(),
                refs,
            };
            let (loss, grads) = match backward(&model, &batch) {
                Ok(v) => v,
                Err(CraftError::NonFinite(_)) => {
                    return Err(CraftError::Diverged {
                        epoch,
                        last_finite: Box::new(best),
                    })
                }
                Err(e) => return Err(e),
            };
            if let Err(CraftError::NonFinite(_)) =
                adam_step_model(&mut model, &grads, &mut adam, &adam_cfg, config.freeze_head)
            {
                return Err(CraftError::Diverged {
                    epoch,
                    last_finite: Box::new(best),
                });
            }
            loss_sum += loss;
            batches += 1;
        }
        let val_mse = evaluate(&model, &retriever, &val_windows, config.r, config.batch_size)?.mse;
        if !val_mse.is_finite() || !model.is_finite() {
            return Err(CraftError::Diverged {
                epoch,
                last_finite: Box::new(best),
            });
        }
        let train_mse = loss_sum / batches.max(1) as f64;
        log.epochs.push(EpochRecord {
            epoch,
            train_mse,
            val_mse,
            seconds: started.elapsed().as_secs_f64(),
        });
        log::info!("epoch {epoch}: train {train_mse:.6} val {val_mse:.6}");
        if stopper.observe(epoch, val_mse) {
            best = model.clone();
        }
        if stopper.should_stop() {
            break;
        }
    }
    log.best_epoch = stopper.best_epoch();
    Ok(TrainOutcome { model: best, log })
}
