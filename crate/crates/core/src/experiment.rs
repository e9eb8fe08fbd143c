// SPDX-License-Identifier: Apache-2.0

//! Experiment orchestration: configuration files, per-horizon benchmark
//! runs, the candidate-count sweep and retrieval example dumps.
//!
//! Everything here writes plain text: `key=value` for configs and reports,
//! CSV for plot data. Wall-clock timings are kept out of the report file so
//! that two runs with the same seed produce byte-identical reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;

use crate::data::{load_csv, sliding_windows, ChannelStats, MemoryEntry, MultivariateSeries, SplitScheme, WindowPair};
use crate::error::{CraftError, Result};
use crate::graph::RelationGraph;
use crate::model::CraftModel;
use crate::retrieval::Retriever;
use crate::spectral::{default_freq_cutoff, KnowledgeBase};
use crate::train::{evaluate, retrieve_windows, train, TrainConfig};

pub const DEFAULT_LOOKBACK: usize = 720;
pub const DEFAULT_HORIZONS: [usize; 4] = [96, 192, 336, 720];
pub const DEFAULT_NEIGHBORS: usize = 3;
pub const DEFAULT_TOP_R: usize = 1;
pub const DEFAULT_FREQ_CUTOFF: usize = 36;

/// How per-batch inference time is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimingConfig {
    pub warmup: usize,
    /// Timed batches; 0 disables timing.
    pub batches: usize,
    pub threads: usize,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig {
            warmup: 5,
            batches: 50,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: PathBuf,
    pub name: String,
    pub lookback: usize,
    pub horizons: Vec<usize>,
    pub neighbors: usize,
    pub top_r: usize,
    /// `None` picks 36 for a 720-step lookback, 5% of `L` otherwise.
    pub freq_cutoff: Option<usize>,
    /// `None` picks by dataset name.
    pub split: Option<SplitScheme>,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
    pub timing: TimingConfig,
    pub save_kb: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: PathBuf::new(),
            name: String::new(),
            lookback: DEFAULT_LOOKBACK,
            horizons: DEFAULT_HORIZONS.to_vec(),
            neighbors: DEFAULT_NEIGHBORS,
            top_r: DEFAULT_TOP_R,
            freq_cutoff: None,
            split: None,
            train: TrainConfig::default(),
            out_dir: PathBuf::from("out"),
            timing: TimingConfig::default(),
            save_kb: false,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .trim()
        .parse()
        .map_err(|_| format!("bad value for {key}: '{value}'"))
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value.trim() {
        "1" | "true" | "yes" => Ok(true),
        "0" | "false" | "no" => Ok(false),
        other => Err(format!("bad value for {key}: '{other}'")),
    }
}

fn parse_split(value: &str) -> std::result::Result<SplitScheme, String> {
    let v = value.trim();
    match v {
        "ett-hourly" => Ok(SplitScheme::EttMonths { steps_per_hour: 1 }),
        "ett-minute" => Ok(SplitScheme::EttMonths { steps_per_hour: 4 }),
        _ => {
            let parts: Vec<&str> = v.strip_prefix("ratios:").unwrap_or(v).split(',').collect();
            if parts.len() != 3 {
                return Err(format!("bad split '{v}'"));
            }
            let r: Vec<f64> = parts
                .iter()
                .map(|p| parse_num::<f64>("split", p))
                .collect::<std::result::Result<_, _>>()?;
            Ok(SplitScheme::Ratios {
                train: r[0],
                val: r[1],
                test: r[2],
            })
        }
    }
}

fn split_to_string(s: &SplitScheme) -> String {
    match s {
        SplitScheme::EttMonths { steps_per_hour: 1 } => "ett-hourly".into(),
        SplitScheme::EttMonths { steps_per_hour: 4 } => "ett-minute".into(),
        SplitScheme::EttMonths { steps_per_hour } => format!("ett:{steps_per_hour}"),
        SplitScheme::Ratios { train, val, test } => format!("ratios:{train},{val},{test}"),
    }
}

impl ExperimentConfig {
    pub fn freq_cutoff(&self) -> usize {
        self.freq_cutoff.unwrap_or(if self.lookback == DEFAULT_LOOKBACK {
            DEFAULT_FREQ_CUTOFF
        } else {
            default_freq_cutoff(self.lookback)
        })
    }

    pub fn split_scheme(&self) -> SplitScheme {
        self.split.unwrap_or_else(|| SplitScheme::for_dataset(&self.name))
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    /// Sets one option by its config-file key.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let t = &mut self.train;
        match key.trim() {
            "data" => self.data = PathBuf::from(value.trim()),
            "name" => self.name = value.trim().to_string(),
            "lookback" => self.lookback = parse_num(key, value)?,
            "horizons" => {
                self.horizons = value
                    .split(',')
                    .map(|h| parse_num(key, h))
                    .collect::<std::result::Result<_, _>>()?
            }
            "neighbors" => self.neighbors = parse_num(key, value)?,
            "top" => self.top_r = parse_num(key, value)?,
            "freq_cutoff" => self.freq_cutoff = Some(parse_num(key, value)?),
            "split" => self.split = Some(parse_split(value)?),
            "out_dir" => self.out_dir = PathBuf::from(value.trim()),
            "save_kb" => self.save_kb = parse_bool(key, value)?,
            "timing_batches" => self.timing.batches = parse_num(key, value)?,
            "timing_warmup" => self.timing.warmup = parse_num(key, value)?,
            "threads" => self.timing.threads = parse_num(key, value)?,
            "alpha" => t.alpha = parse_num(key, value)?,
            "lr" => t.lr = parse_num(key, value)?,
            "batch_size" => t.batch_size = parse_num(key, value)?,
            "epochs" => t.epochs = parse_num(key, value)?,
            "patience" => t.patience = parse_num(key, value)?,
            "seed" => t.seed = parse_num(key, value)?,
            "hidden" => t.hidden = parse_num(key, value)?,
            "adam_beta1" => t.adam_beta1 = parse_num(key, value)?,
            "adam_beta2" => t.adam_beta2 = parse_num(key, value)?,
            "adam_eps" => t.adam_eps = parse_num(key, value)?,
            "freeze_head" => t.freeze_head = parse_bool(key, value)?,
            "cache_retrieval" => t.cache_retrieval = parse_bool(key, value)?,
            other => return Err(format!("unknown key '{other}'")),
        }
        self.train.r = self.top_r;
        Ok(())
    }

    /// Parses flat `key=value` lines on top of the defaults. `#` starts a comment.
    pub fn parse_kv(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_kv(text)?;
        Ok(cfg)
    }

    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| CraftError::ConfigParse {
                line: i + 1,
                reason: "expected key=value".into(),
            })?;
            self.set(k, v).map_err(|reason| CraftError::ConfigParse { line: i + 1, reason })?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CraftError::io(path, e))?;
        Self::parse_kv(&text)
    }

    pub fn to_kv(&self) -> String {
        let t = &self.train;
        let horizons: Vec<String> = self.horizons.iter().map(|h| h.to_string()).collect();
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        line("data", self.data.display().to_string());
        line("name", self.name.clone());
        line("lookback", self.lookback.to_string());
        line("horizons", horizons.join(","));
        line("neighbors", self.neighbors.to_string());
        line("top", self.top_r.to_string());
        line("freq_cutoff", self.freq_cutoff().to_string());
        line("split", split_to_string(&self.split_scheme()));
        line("out_dir", self.out_dir.display().to_string());
        line("save_kb", self.save_kb.to_string());
        line("timing_batches", self.timing.batches.to_string());
        line("timing_warmup", self.timing.warmup.to_string());
        line("threads", self.timing.threads.to_string());
        line("alpha", t.alpha.to_string());
        line("lr", t.lr.to_string());
        line("batch_size", t.batch_size.to_string());
        line("epochs", t.epochs.to_string());
        line("patience", t.patience.to_string());
        line("seed", t.seed.to_string());
        line("hidden", t.hidden.to_string());
        line("adam_beta1", t.adam_beta1.to_string());
        line("adam_beta2", t.adam_beta2.to_string());
        line("adam_eps", t.adam_eps.to_string());
        line("freeze_head", t.freeze_head.to_string());
        line("cache_retrieval", t.cache_retrieval.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizons.is_empty() {
            return Err(CraftError::invalid("horizons", "at least one horizon is required"));
        }
        if self.neighbors == 0 {
            return Err(CraftError::invalid("neighbors", "must be at least 1"));
        }
        if self.top_r == 0 {
            return Err(CraftError::invalid("top", "must be at least 1"));
        }
        self.train.validate()
    }
}

/// Standardized splits for one `(L, H)` setting.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: MultivariateSeries,
    pub val: MultivariateSeries,
    pub test: MultivariateSeries,
    pub stats: ChannelStats,
    pub lookback: usize,
    pub horizon: usize,
}

/// Split, fit z-score stats on train, standardize every split.
pub fn prepare(
    series: &MultivariateSeries,
    scheme: SplitScheme,
    lookback: usize,
    horizon: usize,
) -> Result<PreparedData> {
    let (train, val, test) = scheme.split(series, lookback + horizon)?;
    let stats = ChannelStats::fit(&train);
    Ok(PreparedData {
        train: stats.apply(&train)?,
        val: stats.apply(&val)?,
        test: stats.apply(&test)?,
        stats,
        lookback,
        horizon,
    })
}

impl PreparedData {
    /// Dense (stride 1) memory over the training split.
    pub fn memory(&self) -> Result<Vec<MemoryEntry<'_>>> {
        sliding_windows(&self.train, self.lookback, self.horizon, 1)
    }

    pub fn test_windows(&self) -> Result<Vec<WindowPair<'_>>> {
        sliding_windows(&self.test, self.lookback, self.horizon, 1)
    }

    pub fn build_kb(&self, neighbors: usize, freq_cutoff: usize) -> Result<KnowledgeBase> {
        let memory = self.memory()?;
        let graph = RelationGraph::build(&memory, neighbors)?;
        KnowledgeBase::build(&memory, graph, freq_cutoff)
    }
}

/// Median per-batch wall-clock, in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchTiming {
    /// Retrieval (spectra + scoring + selection) only.
    pub retrieval_seconds: f64,
    /// Retrieval plus both forecast branches and fusion.
    pub total_seconds: f64,
    pub batches: usize,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Times inference over `windows`, cycling through them in batches.
pub fn measure_batch_timing(
    model: &CraftModel,
    retriever: &Retriever<'_>,
    windows: &[WindowPair<'_>],
    r: usize,
    batch_size: usize,
    timing: &TimingConfig,
) -> Result<Option<BatchTiming>> {
    if timing.batches == 0 || windows.is_empty() {
        return Ok(None);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(timing.threads.max(1))
        .build()
        .map_err(|e| CraftError::invalid("threads", e.to_string()))?;
    let batches: Vec<&[WindowPair<'_>]> = windows.chunks(batch_size.max(1)).collect();
    pool.install(|| {
        let mut retrieval = Vec::with_capacity(timing.batches);
        let mut total = Vec::with_capacity(timing.batches);
        for i in 0..timing.warmup + timing.batches {
            let chunk = batches[i % batches.len()];
            let start = Instant::now();
            let (refs, _) = retrieve_windows(retriever, chunk, r, false)?;
            let t_ret = start.elapsed().as_secs_f64();
            let inputs: Vec<_> = chunk.iter().map(|w| w.x).collect();
            let out = model.forecast_batch(&inputs, &refs)?;
            let t_all = start.elapsed().as_secs_f64();
            std::hint::black_box(out);
            if i >= timing.warmup {
                retrieval.push(t_ret);
                total.push(t_all);
            }
        }
        Ok(Some(BatchTiming {
            retrieval_seconds: median(retrieval),
            total_seconds: median(total),
            batches: timing.batches,
        }))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HorizonMetrics {
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
    pub direct_mse: f64,
    pub direct_mae: f64,
    pub test_windows: usize,
    pub sim_evals_per_query: f64,
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub dataset: String,
    pub rows: Vec<HorizonMetrics>,
    /// Per-horizon timings; not part of the `key=value` report.
    pub timing: Vec<(usize, BatchTiming)>,
}

impl MetricsReport {
    pub fn avg_mse(&self) -> f64 {
        self.rows.iter().map(|r| r.mse).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn avg_mae(&self) -> f64 {
        self.rows.iter().map(|r| r.mae).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dataset={}", self.dataset);
        let hs: Vec<String> = self.rows.iter().map(|r| r.horizon.to_string()).collect();
        let _ = writeln!(s, "horizons={}", hs.join(","));
        for r in &self.rows {
            let h = r.horizon;
            let _ = writeln!(s, "h{h}.mse={}", r.mse);
            let _ = writeln!(s, "h{h}.mae={}", r.mae);
            let _ = writeln!(s, "h{h}.direct_mse={}", r.direct_mse);
            let _ = writeln!(s, "h{h}.direct_mae={}", r.direct_mae);
            let _ = writeln!(s, "h{h}.test_windows={}", r.test_windows);
            let _ = writeln!(s, "h{h}.sim_evals_per_query={}", r.sim_evals_per_query);
            let best = r.best_epoch.map_or("none".to_string(), |b| b.to_string());
            let _ = writeln!(s, "h{h}.best_epoch={best}");
        }
        let _ = writeln!(s, "avg.mse={}", self.avg_mse());
        let _ = writeln!(s, "avg.mae={}", self.avg_mae());
        s
    }

    /// Inverse of [`MetricsReport::to_kv`]; checks the stored averages.
    pub fn parse_kv(text: &str) -> Result<MetricsReport> {
        let mut map = std::collections::BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| CraftError::ConfigParse {
                line: i + 1,
                reason: "expected key=value".into(),
            })?;
            map.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| {
            map.get(k).cloned().ok_or_else(|| CraftError::ConfigParse {
                line: 0,
                reason: format!("missing key {k}"),
            })
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|_| CraftError::ConfigParse {
                line: 0,
                reason: format!("bad number for {k}"),
            })
        };
        let mut report = MetricsReport {
            dataset: get("dataset")?,
            ..Default::default()
        };
        let hs = get("horizons")?;
        for h in hs.split(',').filter(|h| !h.is_empty()) {
            let horizon: usize = h.parse().map_err(|_| CraftError::ConfigParse {
                line: 0,
                reason: format!("bad horizon {h}"),
            })?;
            let best = get(&format!("h{h}.best_epoch"))?;
            report.rows.push(HorizonMetrics {
                horizon,
                mse: num(&format!("h{h}.mse"))?,
                mae: num(&format!("h{h}.mae"))?,
                direct_mse: num(&format!("h{h}.direct_mse"))?,
                direct_mae: num(&format!("h{h}.direct_mae"))?,
                test_windows: num(&format!("h{h}.test_windows"))? as usize,
                sim_evals_per_query: num(&format!("h{h}.sim_evals_per_query"))?,
                best_epoch: best.parse().ok(),
            });
        }
        for (key, recomputed) in [("avg.mse", report.avg_mse()), ("avg.mae", report.avg_mae())] {
            let stored = num(key)?;
            if stored.to_bits() != recomputed.to_bits() {
                return Err(CraftError::ConfigParse {
                    line: 0,
                    reason: format!("{key}={stored} does not match rows ({recomputed})"),
                });
            }
        }
        Ok(report)
    }

    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dataset: {}", self.dataset);
        let _ = writeln!(s, "{:>8} {:>10} {:>10} {:>12} {:>12}", "horizon", "mse", "mae", "direct_mse", "direct_mae");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>8} {:>10.4} {:>10.4} {:>12.4} {:>12.4}",
                r.horizon, r.mse, r.mae, r.direct_mse, r.direct_mae
            );
        }
        let _ = writeln!(s, "{:>8} {:>10.4} {:>10.4}", "avg", self.avg_mse(), self.avg_mae());
        s
    }

    /// Timing lines, kept apart from the deterministic table.
    pub fn render_timing(&self) -> String {
        let mut s = String::new();
        for (h, t) in &self.timing {
            let _ = writeln!(
                s,
                "h{h}: retrieval {:.6} s/batch, total {:.6} s/batch (median of {})",
                t.retrieval_seconds, t.total_seconds, t.batches
            );
        }
        s
    }

    /// Writes `report.txt`, `report.kv` and `timing.kv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let put = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| CraftError::io(p, e))
        };
        put("report.txt", self.render_table())?;
        put("report.kv", self.to_kv())?;
        let mut timing = String::new();
        for (h, t) in &self.timing {
            let _ = writeln!(timing, "h{h}.retrieval_seconds_per_batch={}", t.retrieval_seconds);
            let _ = writeln!(timing, "h{h}.total_seconds_per_batch={}", t.total_seconds);
            let _ = writeln!(timing, "h{h}.timed_batches={}", t.batches);
        }
        put("timing.kv", timing)
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CraftError::io(dir, e))
}

/// Full protocol over every configured horizon.
///
/// Per horizon: split, standardize, build memory and knowledge base from
/// train, train, evaluate on test. The report is rewritten after each
/// horizon so partial results survive a failure.
pub fn run_experiment(config: &ExperimentConfig) -> Result<MetricsReport> {
    config.validate()?;
    let series = load_csv(&config.data)?;
    run_experiment_on(config, &series)
}

/// [`run_experiment`] on an already loaded series.
pub fn run_experiment_on(config: &ExperimentConfig, series: &MultivariateSeries) -> Result<MetricsReport> {
    config.validate()?;
    ensure_dir(&config.out_dir)?;
    let config_path = config.out_dir.join("config.kv");
    std::fs::write(&config_path, config.to_kv()).map_err(|e| CraftError::io(config_path, e))?;

    let mut report = MetricsReport {
        dataset: config.name.clone(),
        ..Default::default()
    };
    let scheme = config.split_scheme();
    let f = config.freq_cutoff();
    for &h in &config.horizons {
        log::info!("horizon {h}: preparing data");
        let prepared = prepare(series, scheme, config.lookback, h)?;
        let kb = prepared.build_kb(config.neighbors, f)?;
        if config.save_kb {
            kb.save(config.out_dir.join(format!("kb_h{h}.crkb")))?;
        }
        let mut train_cfg = config.train.clone();
        train_cfg.r = config.top_r;
        let outcome = train(&prepared.train, &prepared.val, &kb, &train_cfg)?;
        outcome.model.save(config.out_dir.join(format!("model_h{h}.crmd")))?;
        let log_path = config.out_dir.join(format!("train_log_h{h}.txt"));
        std::fs::write(&log_path, outcome.log.render()).map_err(|e| CraftError::io(log_path, e))?;

        let retriever = Retriever::new(&kb);
        let windows = prepared.test_windows()?;
        let eval = evaluate(&outcome.model, &retriever, &windows, config.top_r, train_cfg.batch_size)?;
        if let Some(t) = measure_batch_timing(
            &outcome.model,
            &retriever,
            &windows,
            config.top_r,
            train_cfg.batch_size,
            &config.timing,
        )? {
            report.timing.push((h, t));
        }
        report.rows.push(HorizonMetrics {
            horizon: h,
            mse: eval.mse,
            mae: eval.mae,
            direct_mse: eval.direct_mse,
            direct_mae: eval.direct_mae,
            test_windows: eval.windows,
            sim_evals_per_query: eval.counter.similarity_evals as f64 / eval.windows.max(1) as f64,
            best_epoch: outcome.log.best_epoch,
        });
        report.write(&config.out_dir)?;
        log::info!("horizon {h}: mse {:.4} mae {:.4}", eval.mse, eval.mae);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub m: usize,
    pub mse: f64,
    pub mae: f64,
    pub sim_evals_per_query: f64,
    pub timing: Option<BatchTiming>,
}

/// Re-evaluates a trained model with the relation graph cut to each `m`.
///
/// `base` must carry a graph with at least `max(m_values)` neighbors per
/// channel (build it with `C - 1` for a full ranking); values above `C - 1`
/// are clamped.
pub fn sweep_candidates(
    base: &KnowledgeBase,
    model: &CraftModel,
    windows: &[WindowPair<'_>],
    m_values: &[usize],
    r: usize,
    batch_size: usize,
    timing: &TimingConfig,
) -> Result<Vec<SweepRow>> {
    if m_values.is_empty() {
        return Err(CraftError::invalid("m_values", "at least one value is required"));
    }
    let channels = base.config().channels;
    let mut rows = Vec::with_capacity(m_values.len());
    for &m in m_values {
        if m == 0 {
            return Err(CraftError::invalid("m", "must be at least 1"));
        }
        let m_eff = m.min(channels.saturating_sub(1));
        if m_eff > base.graph().m() {
            return Err(CraftError::invalid(
                "m",
                format!("{m} exceeds the {} neighbors stored in the base graph", base.graph().m()),
            ));
        }
        let kb = base.with_graph(base.graph().truncated(m_eff))?;
        let retriever = Retriever::new(&kb);
        let eval = evaluate(model, &retriever, windows, r, batch_size)?;
        let t = measure_batch_timing(model, &retriever, windows, r, batch_size, timing)?;
        rows.push(SweepRow {
            m,
            mse: eval.mse,
            mae: eval.mae,
            sim_evals_per_query: eval.counter.similarity_evals as f64 / eval.windows.max(1) as f64,
            timing: t,
        });
    }
    Ok(rows)
}

/// Plot data: `m,mse,mae,retrieval_seconds_per_batch,total_seconds_per_batch,sim_evals_per_query`.
pub fn write_sweep_csv(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::from("m,mse,mae,retrieval_seconds_per_batch,total_seconds_per_batch,sim_evals_per_query\n");
    for r in rows {
        let (ret, tot) = r
            .timing
            .map_or((String::new(), String::new()), |t| {
                (t.retrieval_seconds.to_string(), t.total_seconds.to_string())
            });
        let _ = writeln!(s, "{},{},{},{},{},{}", r.m, r.mse, r.mae, ret, tot, r.sim_evals_per_query);
    }
    let path = path.as_ref();
    std::fs::write(path, s).map_err(|e| CraftError::io(path, e))
}

/// One query's horizon next to its top retrieved reference and the forecast.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleDump {
    pub t: Vec<usize>,
    pub ground_truth: Vec<f64>,
    /// Absent when nothing could be retrieved.
    pub retrieved: Option<Vec<f64>>,
    pub fused: Vec<f64>,
}

/// Writes `t,ground_truth,retrieved,fused` for one channel of one window.
pub fn dump_retrieval_example(
    kb: &KnowledgeBase,
    model: &CraftModel,
    window: &WindowPair<'_>,
    channel: usize,
    r: usize,
    out: impl AsRef<Path>,
) -> Result<ExampleDump> {
    let channels = kb.config().channels;
    if channel >= channels {
        return Err(CraftError::ChannelOutOfRange { channel, channels });
    }
    let retriever = Retriever::new(kb);
    let mut counter = crate::retrieval::OpCounter::new(channels);
    let forecast = model.forecast(&retriever, window.x, r, &mut counter)?;
    let refs = retriever.retrieve_all(window.x, r, None, &mut counter)?;
    let h = window.horizon();
    let dump = ExampleDump {
        t: (0..h).map(|k| window.t_end + 1 + k).collect(),
        ground_truth: window.y.column(channel).to_vec(),
        retrieved: refs[channel].first().map(|top| top.value.to_vec()),
        fused: forecast.fused.column(channel).to_vec(),
    };
    write_example_csv(&dump, out)?;
    Ok(dump)
}

pub fn write_example_csv(dump: &ExampleDump, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    if dump.retrieved.is_some() {
        w.write_record(["t", "ground_truth", "retrieved", "fused"])?;
    } else {
        w.write_record(["t", "ground_truth", "fused"])?;
    }
    for k in 0..dump.t.len() {
        let mut rec = vec![dump.t[k].to_string(), dump.ground_truth[k].to_string()];
        if let Some(r) = &dump.retrieved {
            rec.push(r[k].to_string());
        }
        rec.push(dump.fused[k].to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| CraftError::io(path, e))
}

pub fn read_example_csv(path: impl AsRef<Path>) -> Result<ExampleDump> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let has_retrieved = headers.iter().any(|h| h == "retrieved");
    let mut dump = ExampleDump {
        t: vec![],
        ground_truth: vec![],
        retrieved: has_retrieved.then(Vec::new),
        fused: vec![],
    };
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let cell = |col: usize| -> Result<f64> {
            rec.get(col)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| CraftError::NonNumericCell {
                    row,
                    col,
                    value: rec.get(col).unwrap_or("").to_string(),
                })
        };
        dump.t.push(cell(0)? as usize);
        dump.ground_truth.push(cell(1)?);
        if let Some(r) = dump.retrieved.as_mut() {
            r.push(cell(2)?);
            dump.fused.push(cell(3)?);
        } else {
            dump.fused.push(cell(2)?);
        }
    }
    Ok(dump)
}

/// Where one channel's reference came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ProvenanceRow {
    pub channel: usize,
    /// 1-based
    pub rank: usize,
    pub source_channel: usize,
    pub source_entry: usize,
    pub source_t_end: usize,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct QueryForecast {
    /// `H x C` in dataset units; `start_index` is the first forecast step.
    pub predictions: MultivariateSeries,
    pub provenance: Vec<ProvenanceRow>,
}

/// Forecasts the `H` steps after the last `L` rows of a raw-unit query.
///
/// The query is standardized with `stats`, forecast, and mapped back.
pub fn forecast_query(
    model: &CraftModel,
    kb: &KnowledgeBase,
    stats: &ChannelStats,
    query: &MultivariateSeries,
    r: usize,
) -> Result<QueryForecast> {
    let l = model.config.lookback;
    if query.len() < l {
        return Err(CraftError::SeriesTooShort {
            len: query.len(),
            required: l,
        });
    }
    let window = stats.apply(&query.slice_rows(query.len() - l, query.len()))?;
    let retriever = Retriever::new(kb);
    let mut counter = crate::retrieval::OpCounter::new(kb.config().channels);
    model.check_kb(&retriever)?;
    let refs = retriever.retrieve_all(window.values.view(), r, None, &mut counter)?;
    let out = model.forecast_with_refs(window.values.view(), &refs)?;
    let provenance = refs
        .iter()
        .enumerate()
        .flat_map(|(c, list)| {
            list.iter().enumerate().map(move |(i, rf)| ProvenanceRow {
                channel: c,
                rank: i + 1,
                source_channel: rf.source_channel,
                source_entry: rf.source_entry,
                source_t_end: kb.t_end(rf.source_entry),
                score: rf.score,
            })
        })
        .collect();
    let predictions = MultivariateSeries::new(
        stats.invert(&out.fused)?,
        query.channel_names.clone(),
        query.end_index(),
    )?;
    Ok(QueryForecast {
        predictions,
        provenance,
    })
}

/// `channel,rank,source_channel,source_entry,source_t_end,score`
pub fn write_provenance_csv(rows: &[ProvenanceRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["channel", "rank", "source_channel", "source_entry", "source_t_end", "score"])?;
    for r in rows {
        w.write_record([
            r.channel.to_string(),
            r.rank.to_string(),
            r.source_channel.to_string(),
            r.source_entry.to_string(),
            r.source_t_end.to_string(),
            r.score.to_string(),
        ])?;
    }
    w.flush().map_err(|e| CraftError::io(path, e))
}

/// Stacks a list of `H x C` matrices' column `c` for quick inspection.
pub fn column_of(outputs: &[Array2<f64>], channel: usize) -> Vec<Vec<f64>> {
    outputs.iter().map(|o| o.column(channel).to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_match_reference_setup() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.lookback, 720);
        assert_eq!(cfg.horizons, vec![96, 192, 336, 720]);
        assert_eq!(cfg.neighbors, 3);
        assert_eq!(cfg.top_r, 1);
        assert_eq!(cfg.freq_cutoff(), 36);
        assert_eq!(cfg.train.alpha, 0.001);
        assert_eq!(cfg.train.lr, 0.001);
        assert_eq!(cfg.train.batch_size, 32);
    }

    #[test]
    fn config_kv_round_trip() {
        let text = "# example\n\
                    data = /tmp/x.csv\n\
                    name=ETTm1\n\
                    lookback=96\n\
                    horizons=24,48 # two\n\
                    neighbors=2\n\
                    top=3\n\
                    epochs=4\n\
                    freeze_head=true\n";
        let cfg = ExperimentConfig::parse_kv(text).unwrap();
        assert_eq!(cfg.horizons, vec![24, 48]);
        assert_eq!(cfg.train.r, 3);
        assert_eq!(cfg.freq_cutoff(), 5);
        assert_eq!(cfg.split_scheme(), SplitScheme::EttMonths { steps_per_hour: 4 });
        assert!(cfg.train.freeze_head);
        let again = ExperimentConfig::parse_kv(&cfg.to_kv()).unwrap();
        assert_eq!(again.to_kv(), cfg.to_kv());

        assert!(matches!(
            ExperimentConfig::parse_kv("bogus=1"),
            Err(CraftError::ConfigParse { line: 1, .. })
        ));
        assert!(ExperimentConfig::parse_kv("lookback\n").is_err());
        assert!(ExperimentConfig::parse_kv("epochs=abc").is_err());
        let ratios = ExperimentConfig::parse_kv("split=ratios:0.6,0.2,0.2").unwrap();
        assert_eq!(
            ratios.split_scheme(),
            SplitScheme::Ratios {
                train: 0.6,
                val: 0.2,
                test: 0.2
            }
        );
    }

    #[test]
    fn report_kv_round_trip_and_average_check() {
        let report = MetricsReport {
            dataset: "syn".into(),
            rows: vec![
                HorizonMetrics {
                    horizon: 24,
                    mse: 0.1234567890123,
                    mae: 0.2,
                    direct_mse: 0.13,
                    direct_mae: 0.21,
                    test_windows: 10,
                    sim_evals_per_query: 1200.0,
                    best_epoch: Some(2),
                },
                HorizonMetrics {
                    horizon: 48,
                    mse: 0.3,
                    mae: 0.4,
                    direct_mse: 0.31,
                    direct_mae: 0.41,
                    test_windows: 5,
                    sim_evals_per_query: 800.0,
                    best_epoch: None,
                },
            ],
            timing: vec![],
        };
        let parsed = MetricsReport::parse_kv(&report.to_kv()).unwrap();
        assert_eq!(parsed, report);
        let tampered = report.to_kv().replace("avg.mse=", "avg.mse=9");
        assert!(MetricsReport::parse_kv(&tampered).is_err());
    }

    #[test]
    fn median_of_batches() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
