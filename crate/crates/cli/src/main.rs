// SPDX-License-Identifier: Apache-2.0

//! `craft`: command-line runner for channel-wise retrieval-augmented forecasting.
//!
//! Every option can come from a flat `key=value` file passed with `--config`;
//! flags given on the command line win. Failures print a single line
//! `error kind=<id> msg=<text>` on stderr and exit with status 2.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use craft_core::experiment::{
    dump_retrieval_example, forecast_query, prepare, run_experiment, sweep_candidates, write_provenance_csv, write_sweep_csv, PreparedData,
};
use craft_core::synthetic::periodic_series;
use craft_core::{
    evaluate, load_csv, save_csv, train, CraftError, CraftModel, ExperimentConfig, KnowledgeBase, MultivariateSeries,
    OpCounter, Retriever,
};

#[derive(Parser, Debug)]
#[command(name = "craft", version, about = "Channel-wise retrieval-augmented forecasting")]
struct Cli {
    /// Flat key=value config file; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads for retrieval and timing (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct DataArgs {
    /// CSV with a leading `date` column and one column per channel.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Dataset name; picks the split convention (defaults to the file stem).
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    lookback: Option<usize>,
    /// `ett-hourly`, `ett-minute` or `ratios:TRAIN,VAL,TEST`.
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args, Debug, Default)]
struct KbArgs {
    /// Graph neighbors per channel.
    #[arg(long)]
    neighbors: Option<usize>,
    /// Retained low-frequency bins.
    #[arg(long)]
    freq_cutoff: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct TrainArgs {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Keep the retrieval head at its initialization.
    #[arg(long)]
    freeze_head: bool,
    /// Retrieve once before the first epoch and reuse the references.
    #[arg(long)]
    cache_retrieval: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Full protocol over every horizon; writes report.txt, report.kv and checkpoints.
    Run {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        kb: KbArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Comma-separated horizons.
        #[arg(long)]
        horizons: Option<String>,
        #[arg(long)]
        top: Option<usize>,
        #[arg(long)]
        save_kb: bool,
    },
    /// Builds the knowledge base from the training split.
    BuildKb {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        kb: KbArgs,
        #[arg(long)]
        horizon: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains one horizon; writes model_h<H>.crmd and train_log_h<H>.txt.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        kb: KbArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        horizon: usize,
        #[arg(long)]
        top: Option<usize>,
        /// Prebuilt knowledge base; built from the data when absent.
        #[arg(long = "kb")]
        kb_file: Option<PathBuf>,
    },
    /// Test-split MSE / MAE of a checkpoint.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        kb: KbArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        top: Option<usize>,
        #[arg(long = "kb")]
        kb_file: Option<PathBuf>,
    },
    /// Re-evaluates a checkpoint for several neighbor counts; writes sweep.csv.
    Sweep {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        freq_cutoff: Option<usize>,
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated neighbor counts.
        #[arg(long, default_value = "1,2,3,5")]
        m_values: String,
        #[arg(long)]
        top: Option<usize>,
    },
    /// Top references for one channel of a query window.
    Retrieve {
        #[arg(long = "kb")]
        kb_file: PathBuf,
        /// CSV like the data file; its last L rows form the query.
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        channel: usize,
        #[arg(long, default_value_t = 1)]
        top: usize,
        /// Standardize the query with stats fitted on this dataset's training split.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        name: Option<String>,
    },
    /// Writes ground truth, top reference and forecast of one test window to CSV.
    DumpExample {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        kb: KbArgs,
        #[arg(long)]
        model: PathBuf,
        /// Index into the test windows.
        #[arg(long, default_value_t = 0)]
        window: usize,
        #[arg(long)]
        channel: usize,
        #[arg(long)]
        top: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Forecasts past the end of a query CSV; writes predictions plus a provenance sidecar.
    Forecast {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        kb: KbArgs,
        #[arg(long)]
        model: PathBuf,
        /// CSV like the data file; its last L rows form the query.
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        top: Option<usize>,
        #[arg(long = "kb")]
        kb_file: Option<PathBuf>,
        /// Predictions CSV; provenance goes next to it as `<stem>.provenance.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Prints a knowledge base's relation graph.
    Graph {
        #[arg(long = "kb")]
        kb_file: PathBuf,
    },
    /// Writes a seeded periodic synthetic dataset.
    Synth {
        /// Comma-separated periods, one channel each.
        #[arg(long, default_value = "24,12,7,168")]
        periods: String,
        #[arg(long, default_value_t = 4000)]
        len: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
struct CliError {
    kind: &'static str,
    msg: String,
}

impl From<CraftError> for CliError {
    fn from(e: CraftError) -> Self {
        CliError {
            kind: e.kind(),
            msg: e.to_string(),
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError {
        kind: "usage",
        msg: msg.into(),
    }
}

type CliResult<T> = Result<T, CliError>;

/// Ordered `(key, value)` overrides applied on top of the config file.
#[derive(Default)]
struct Overrides(Vec<(&'static str, String)>);

impl Overrides {
    fn opt<T: ToString>(&mut self, key: &'static str, v: &Option<T>) -> &mut Self {
        if let Some(v) = v {
            self.0.push((key, v.to_string()));
        }
        self
    }

    fn flag(&mut self, key: &'static str, on: bool) -> &mut Self {
        if on {
            self.0.push((key, "true".into()));
        }
        self
    }

    fn data(&mut self, d: &DataArgs) -> &mut Self {
        self.opt("data", &d.data.as_ref().map(|p| p.display().to_string()))
            .opt("name", &d.name)
            .opt("lookback", &d.lookback)
            .opt("split", &d.split)
    }

    fn kb(&mut self, k: &KbArgs) -> &mut Self {
        self.opt("neighbors", &k.neighbors).opt("freq_cutoff", &k.freq_cutoff)
    }

    fn train(&mut self, t: &TrainArgs) -> &mut Self {
        self.opt("lr", &t.lr)
            .opt("batch_size", &t.batch_size)
            .opt("epochs", &t.epochs)
            .opt("patience", &t.patience)
            .opt("alpha", &t.alpha)
            .opt("hidden", &t.hidden)
            .flag("freeze_head", t.freeze_head)
            .flag("cache_retrieval", t.cache_retrieval)
    }
}

fn resolve(cli: &Cli, overrides: &Overrides) -> CliResult<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut all = Overrides::default();
    all.opt("seed", &cli.seed)
        .opt("out_dir", &cli.out_dir.as_ref().map(|p| p.display().to_string()))
        .opt("threads", &cli.threads);
    all.0.extend(overrides.0.iter().cloned());
    for (k, v) in &all.0 {
        cfg.set(k, v).map_err(usage)?;
    }
    if cfg.name.is_empty() {
        cfg.name = cfg
            .data
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_data(cfg: &ExperimentConfig) -> CliResult<MultivariateSeries> {
    if cfg.data.as_os_str().is_empty() {
        return Err(usage("no dataset given (use --data or data= in the config file)"));
    }
    Ok(load_csv(&cfg.data)?)
}

fn out_dir(cfg: &ExperimentConfig) -> CliResult<&Path> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| CliError {
        kind: "io",
        msg: format!("cannot create {}: {e}", cfg.out_dir.display()),
    })?;
    Ok(&cfg.out_dir)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError {
        kind: "io",
        msg: format!("cannot write {}: {e}", path.display()),
    })
}

/// Knowledge base for `(L, H)`: loaded and checked if a file is given, else built.
fn kb_for(cfg: &ExperimentConfig, data: &PreparedData, file: Option<&PathBuf>) -> CliResult<KnowledgeBase> {
    let f = cfg.freq_cutoff();
    Ok(match file {
        Some(p) => {
            let kb = KnowledgeBase::load_expecting(p, data.lookback, data.horizon, f)?;
            if kb.config().channels != data.train.channels() {
                return Err(CraftError::ConfigMismatch(format!(
                    "knowledge base has {} channels, data has {}",
                    kb.config().channels,
                    data.train.channels()
                ))
                .into());
            }
            kb
        }
        None => data.build_kb(cfg.neighbors, f)?,
    })
}

/// The checkpoint fixes `L` and `H`; the run config follows it.
fn load_model_and_data(cfg: &mut ExperimentConfig, model: &Path) -> CliResult<(CraftModel, PreparedData)> {
    let model = CraftModel::load(model)?;
    if cfg.lookback != model.config.lookback {
        log::info!("using the checkpoint's lookback {}", model.config.lookback);
        cfg.lookback = model.config.lookback;
    }
    let series = require_data(cfg)?;
    let data = prepare(&series, cfg.split_scheme(), model.config.lookback, model.config.horizon)?;
    Ok((model, data))
}

fn parse_list(s: &str, what: &str) -> CliResult<Vec<usize>> {
    s.split(',')
        .map(|v| v.trim().parse().map_err(|_| usage(format!("bad {what} value '{v}'"))))
        .collect()
}

fn run(cli: &Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        // Ignore a second initialization; the pool is process-wide.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match &cli.command {
        Command::Run {
            data,
            kb,
            train,
            horizons,
            top,
            save_kb,
        } => {
            let mut o = Overrides::default();
            o.data(data)
                .kb(kb)
                .train(train)
                .opt("horizons", horizons)
                .opt("top", top)
                .flag("save_kb", *save_kb);
            let cfg = resolve(cli, &o)?;
            require_data(&cfg)?;
            let report = run_experiment(&cfg)?;
            print!("{}", report.render_table());
            print!("{}", report.render_timing());
        }
        Command::BuildKb { data, kb, horizon, out } => {
            let mut o = Overrides::default();
            o.data(data).kb(kb);
            let cfg = resolve(cli, &o)?;
            let series = require_data(&cfg)?;
            let prepared = prepare(&series, cfg.split_scheme(), cfg.lookback, *horizon)?;
            let kb = prepared.build_kb(cfg.neighbors, cfg.freq_cutoff())?;
            kb.save(out)?;
            let c = kb.config();
            println!(
                "wrote {} (L={} H={} F={} C={} entries={} neighbors={})",
                out.display(),
                c.lookback,
                c.horizon,
                c.freq_cutoff,
                c.channels,
                c.entries,
                kb.graph().m()
            );
        }
        Command::Train {
            data,
            kb,
            train: targs,
            horizon,
            top,
            kb_file,
        } => {
            let mut o = Overrides::default();
            o.data(data).kb(kb).train(targs).opt("top", top);
            let cfg = resolve(cli, &o)?;
            let series = require_data(&cfg)?;
            let prepared = prepare(&series, cfg.split_scheme(), cfg.lookback, *horizon)?;
            let kb = kb_for(&cfg, &prepared, kb_file.as_ref())?;
            let outcome = train(&prepared.train, &prepared.val, &kb, &cfg.train)?;
            let dir = out_dir(&cfg)?;
            let model_path = dir.join(format!("model_h{horizon}.crmd"));
            outcome.model.save(&model_path)?;
            write_text(&dir.join(format!("train_log_h{horizon}.txt")), &outcome.log.render())?;
            print!("{}", outcome.log.render());
            println!("wrote {}", model_path.display());
        }
        Command::Eval {
            data,
            kb,
            model,
            top,
            kb_file,
        } => {
            let mut o = Overrides::default();
            o.data(data).kb(kb).opt("top", top);
            let mut cfg = resolve(cli, &o)?;
            let (model, prepared) = load_model_and_data(&mut cfg, model)?;
            let kb = kb_for(&cfg, &prepared, kb_file.as_ref())?;
            let windows = prepared.test_windows()?;
            let eval = evaluate(&model, &Retriever::new(&kb), &windows, cfg.top_r, cfg.train.batch_size)?;
            let mut s = String::new();
            let _ = writeln!(s, "horizon={}", prepared.horizon);
            let _ = writeln!(s, "mse={}", eval.mse);
            let _ = writeln!(s, "mae={}", eval.mae);
            let _ = writeln!(s, "direct_mse={}", eval.direct_mse);
            let _ = writeln!(s, "direct_mae={}", eval.direct_mae);
            let _ = writeln!(s, "test_windows={}", eval.windows);
            let per_query = eval.counter.similarity_evals as f64 / eval.windows.max(1) as f64;
            let _ = writeln!(s, "sim_evals_per_query={per_query}");
            write_text(&out_dir(&cfg)?.join(format!("eval_h{}.kv", prepared.horizon)), &s)?;
            print!("{s}");
        }
        Command::Sweep {
            data,
            freq_cutoff,
            model,
            m_values,
            top,
        } => {
            let mut o = Overrides::default();
            o.data(data).opt("freq_cutoff", freq_cutoff).opt("top", top);
            let mut cfg = resolve(cli, &o)?;
            let ms = parse_list(m_values, "m")?;
            let (model, prepared) = load_model_and_data(&mut cfg, model)?;
            let channels = prepared.train.channels();
            let base = prepared.build_kb(channels.saturating_sub(1).max(1), cfg.freq_cutoff())?;
            let windows = prepared.test_windows()?;
            let rows = sweep_candidates(&base, &model, &windows, &ms, cfg.top_r, cfg.train.batch_size, &cfg.timing)?;
            let path = out_dir(&cfg)?.join("sweep.csv");
            write_sweep_csv(&rows, &path)?;
            println!("m\tmse\tmae\tsim_evals_per_query\tseconds_per_batch");
            for r in &rows {
                let secs = r.timing.map_or("-".to_string(), |t| format!("{:.6}", t.total_seconds));
                println!("{}\t{:.6}\t{:.6}\t{}\t{secs}", r.m, r.mse, r.mae, r.sim_evals_per_query);
            }
            println!("wrote {}", path.display());
        }
        Command::Retrieve {
            kb_file,
            query,
            channel,
            top,
            data,
            name,
        } => {
            let kb = KnowledgeBase::load(kb_file)?;
            let l = kb.config().lookback;
            let mut q = load_csv(query)?;
            if q.len() < l {
                return Err(CraftError::SeriesTooShort { len: q.len(), required: l }.into());
            }
            q = q.slice_rows(q.len() - l, q.len());
            if let Some(path) = data {
                let mut o = Overrides::default();
                o.opt("data", &Some(path.display().to_string())).opt("name", name);
                let cfg = resolve(cli, &o)?;
                let series = require_data(&cfg)?;
                let prepared = prepare(&series, cfg.split_scheme(), l, kb.config().horizon)?;
                q = prepared.stats.apply(&q)?;
            }
            let retriever = Retriever::new(&kb);
            let mut counter = OpCounter::new(kb.config().channels);
            let x = q.values.view();
            if x.ncols() != kb.config().channels {
                return Err(CraftError::ConfigMismatch(format!(
                    "query has {} channels, knowledge base has {}",
                    x.ncols(),
                    kb.config().channels
                ))
                .into());
            }
            let refs = retriever.retrieve_channel(x.column(*channel), *channel, *top, None, &mut counter)?;
            println!("rank\tscore\tsource_channel\tsource_entry\tt_end");
            for (i, r) in refs.iter().enumerate() {
                println!(
                    "{}\t{:.9}\t{}\t{}\t{}",
                    i + 1,
                    r.score,
                    r.source_channel,
                    r.source_entry,
                    kb.t_end(r.source_entry)
                );
            }
            println!("similarity_evals={}", counter.similarity_evals);
        }
        Command::DumpExample {
            data,
            kb,
            model,
            window,
            channel,
            top,
            out,
        } => {
            let mut o = Overrides::default();
            o.data(data).kb(kb).opt("top", top);
            let mut cfg = resolve(cli, &o)?;
            let (model, prepared) = load_model_and_data(&mut cfg, model)?;
            let kb = prepared.build_kb(cfg.neighbors, cfg.freq_cutoff())?;
            let windows = prepared.test_windows()?;
            let w = windows.get(*window).ok_or_else(|| {
                usage(format!("window {window} out of range for {} test windows", windows.len()))
            })?;
            let dump = dump_retrieval_example(&kb, &model, w, *channel, cfg.top_r, out)?;
            println!(
                "wrote {} ({} rows{})",
                out.display(),
                dump.t.len(),
                if dump.retrieved.is_some() { "" } else { ", no reference retrieved" }
            );
        }
        Command::Forecast {
            data,
            kb,
            model,
            query,
            top,
            kb_file,
            out,
        } => {
            let mut o = Overrides::default();
            o.data(data).kb(kb).opt("top", top);
            let mut cfg = resolve(cli, &o)?;
            let (model, prepared) = load_model_and_data(&mut cfg, model)?;
            let kb = kb_for(&cfg, &prepared, kb_file.as_ref())?;
            let q = load_csv(query)?;
            let result = forecast_query(&model, &kb, &prepared.stats, &q, cfg.top_r)?;
            save_csv(&result.predictions, out)?;
            let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let sidecar = out.with_file_name(format!("{stem}.provenance.csv"));
            write_provenance_csv(&result.provenance, &sidecar)?;
            println!("wrote {} and {}", out.display(), sidecar.display());
        }
        Command::Graph { kb_file } => {
            let kb = KnowledgeBase::load(kb_file)?;
            print!("{}", kb.graph());
        }
        Command::Synth {
            periods,
            len,
            noise,
            out,
        } => {
            let ps: Vec<f64> = periods
                .split(',')
                .map(|p| p.trim().parse().map_err(|_| usage(format!("bad period '{p}'"))))
                .collect::<CliResult<_>>()?;
            let series = periodic_series(&ps, *len, *noise, cli.seed.unwrap_or(0))?;
            save_csv(&series, out)?;
            println!("wrote {} ({} rows, {} channels)", out.display(), series.len(), series.channels());
        }
    }
    Ok(())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error kind=usage msg={}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error kind={} msg={}", e.kind, one_line(&e.msg));
            ExitCode::from(2)
        }
    }
}
