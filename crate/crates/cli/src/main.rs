use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::{info, warn};
use serde::de::DeserializeOwned;

use tsmoe_core::data::{
    clean_series, load_csv, write_csv, write_csv_to, CleanConfig, CleanSeries, CsvSchema, MultiSeries, RawSeries, SequenceStore,
    SplitSpec, Standardizer, DEFAULT_SHARD_POINTS,
};
use tsmoe_core::eval::{bench_sparse_vs_dense, eval_model, BenchPair, EvalSpec};
use tsmoe_core::heads::{forecast_multivariate, ForecastOptions};
use tsmoe_core::model::flops_per_token;
use tsmoe_core::train::{load_checkpoint, train_loop, RunConfig, Trainer};
use tsmoe_core::{count_params, Model, ModelConfig, Tensor};

/// Store name written by `clean`.
const CLEAN_STORE: &str = "clean";

#[derive(Parser)]
#[command(name = "tsmoe", version, about = "Sparse mixture-of-experts time series forecasting")]
struct Cli {
    /// Seed for initialization, batch sampling and fine-tuning; overrides config files.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clean raw CSV series (a file or a directory of files) into a sequence store.
    Clean {
        input: PathBuf,
        out: PathBuf,
        #[arg(long, default_value_t = 128)]
        window: usize,
        #[arg(long, default_value_t = 0.2)]
        threshold: f64,
        #[arg(long, default_value_t = 256)]
        min_len: usize,
        /// Domain tag for every series; the file stem when absent.
        #[arg(long)]
        domain: Option<String>,
    },
    /// Merge every cleaned store in a directory into one sharded training store.
    Pack {
        cleandir: PathBuf,
        store: PathBuf,
        #[arg(long, default_value = "corpus")]
        name: String,
        #[arg(long, default_value_t = DEFAULT_SHARD_POINTS)]
        shard_points: u64,
    },
    /// Train a model from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "corpus")]
        name: String,
        /// Write one JSON line of metrics per update here.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Continue from this checkpoint instead of a fresh model.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Forecast every channel of a CSV file and print the forecasts as CSV.
    Forecast {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        horizon: usize,
        /// Average overlapping heads.
        #[arg(long)]
        ensemble: bool,
        /// Feed values as they are instead of z-scoring by the input's statistics.
        #[arg(long)]
        raw: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the rolling benchmark protocol described by an evaluation spec.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print total and activated parameter counts of a model config.
    Params {
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        config: Option<PathBuf>,
        /// One of base, large, ultra, tiny.
        #[arg(long)]
        preset: Option<String>,
        /// Context length for the FLOPs estimate.
        #[arg(long, default_value_t = 512)]
        context: usize,
    },
    /// Train a mixture model and its dense twin on the three-regime task.
    Bench {
        #[arg(long)]
        pair: PathBuf,
        /// Where the synthetic stores go; a temporary directory when absent.
        #[arg(long)]
        workdir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

/// Whole file, no splits.
fn whole_file() -> CsvSchema {
    CsvSchema {
        split: SplitSpec::Counts { train: 0, val: 0, test: 0 },
        ..Default::default()
    }
}

fn csv_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if !input.is_dir() {
        if !input.exists() {
            bail!("{} does not exist", input.display());
        }
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")))
        .collect();
    files.sort();
    Ok(files)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn clean(input: &Path, out: &Path, cfg: CleanConfig, domain: Option<&str>) -> Result<()> {
    let files = csv_inputs(input)?;
    if files.is_empty() {
        bail!("no CSV files in {}", input.display());
    }
    let mut series = Vec::new();
    let mut raw_points = 0usize;
    for f in &files {
        let data = load_csv(f, &whole_file()).with_context(|| format!("loading {}", f.display()))?;
        let tag = domain.map_or_else(|| stem(f), str::to_string);
        for (c, name) in data.series.names.iter().enumerate() {
            let mut raw = RawSeries::new(data.series.channel(c), tag.clone());
            raw.source = format!("{}:{name}", stem(f));
            raw_points += raw.values.len();
            series.extend(clean_series(&raw, &cfg));
        }
    }
    std::fs::create_dir_all(out)?;
    let store = SequenceStore::write(out, CLEAN_STORE, &series)?;
    let kept = store.total_points();
    if store.is_empty() {
        warn!("no usable segments in {} ({raw_points} raw points); wrote an empty store", input.display());
    } else {
        info!("{} segments, {kept} of {raw_points} points kept", store.len());
    }
    Ok(())
}

fn pack(cleandir: &Path, dest: &Path, name: &str, shard_points: u64) -> Result<()> {
    let mut metas: Vec<PathBuf> = std::fs::read_dir(cleandir)
        .with_context(|| format!("reading {}", cleandir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".meta.json"))
        .collect();
    metas.sort();
    if metas.is_empty() {
        bail!("no sequence stores in {}", cleandir.display());
    }
    let mut all: Vec<CleanSeries> = Vec::new();
    for m in &metas {
        let s = SequenceStore::open_meta(m)?;
        for i in 0..s.len() {
            all.push(s.read(i)?);
        }
    }
    std::fs::create_dir_all(dest)?;
    let store = SequenceStore::write_sharded(dest, name, &all, shard_points)?;
    info!(
        "packed {} sequences ({} points) into {} data file(s)",
        store.len(),
        store.total_points(),
        store.data_files().len()
    );
    Ok(())
}

fn train(cli_seed: Option<u64>, config: &Path, store: &Path, name: &str, out: &Path, metrics: Option<&Path>, resume: Option<&Path>) -> Result<()> {
    let mut run: RunConfig = read_json(config)?;
    if let Some(s) = cli_seed {
        run.train.seed = s;
    }
    let store = SequenceStore::open(store, name)?;
    if run.train.domain_weights.is_empty() {
        run.train.domain_weights = store.domains().into_keys().map(|d| (d, 1.0)).collect();
    }
    let mut sink = match metrics {
        Some(p) => Some(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => None,
    };
    let params = count_params(&run.model);
    info!("model: {} parameters, {} activated", params.total, params.activated);
    if let Some(r) = resume {
        let ckpt = load_checkpoint(r)?;
        let until = run.train.steps;
        let mut t = Trainer::resume(ckpt, run.train)?;
        info!("resuming at update {}", t.step());
        t.run(&store, until, |rec, _| {
            if let Some(w) = sink.as_mut() {
                serde_json::to_writer(&mut *w, rec)?;
                w.write_all(b"\n")?;
            }
            Ok(())
        })?;
        t.save(out)?;
    } else {
        let model = Model::<f32>::new(run.model, run.train.seed)?;
        let (_, log) = train_loop(
            model,
            &store,
            run.train,
            sink.as_mut().map(|w| w as &mut dyn Write),
            Some(out),
        )?;
        if let Some(last) = log.last() {
            info!("finished at update {} with loss {:.5}", last.step, last.loss);
        }
    }
    if let Some(mut w) = sink {
        w.flush()?;
    }
    Ok(())
}

fn forecast(ckpt: &Path, input: &Path, horizon: usize, ensemble: bool, raw: bool, out: Option<&Path>) -> Result<()> {
    if horizon == 0 {
        bail!("--horizon must be positive");
    }
    let model = load_checkpoint(ckpt)?.model;
    let data = load_csv(input, &whole_file())?.series;
    if data.rows == 0 {
        bail!("{} has no rows", input.display());
    }
    let scaler = if raw { None } else { Some(Standardizer::fit(&data, 0..data.rows)?) };
    let ctx = match &scaler {
        Some(s) => s.apply(&data),
        None => data.clone(),
    };
    let context: Tensor<f32> = ctx.slice(0..ctx.rows)?;
    let pred = forecast_multivariate(&model, &context, horizon, ForecastOptions { ensemble })?;
    let mut result = MultiSeries {
        names: data.names.clone(),
        rows: horizon,
        values: pred.data().iter().map(|&v| f64::from(v)).collect(),
    };
    if let Some(s) = &scaler {
        result = s.invert(&result);
    }
    match out {
        Some(p) => write_csv(p, &result)?,
        None => write_csv_to(std::io::stdout().lock(), &result)?,
    }
    Ok(())
}

fn eval(cli_seed: Option<u64>, ckpt: &Path, spec_path: &Path, out: Option<&Path>) -> Result<()> {
    let mut spec: EvalSpec = read_json(spec_path)?;
    if let Some(s) = cli_seed {
        spec.seed = s;
    }
    // a relative dataset path is taken from the spec file's directory
    if spec.dataset.is_relative() {
        if let Some(dir) = spec_path.parent() {
            spec.dataset = dir.join(&spec.dataset);
        }
    }
    let model = load_checkpoint(ckpt)?.model;
    let report = eval_model(&model, &spec)?;
    write_json(&report, out)
}

fn params(config: Option<&Path>, preset: Option<&str>, context: usize) -> Result<()> {
    let cfg = match (config, preset) {
        (Some(p), _) => {
            let v: serde_json::Value = read_json(p)?;
            let doc = v.get("model").cloned().unwrap_or(v);
            serde_json::from_value::<ModelConfig>(doc).with_context(|| format!("parsing {}", p.display()))?
        }
        (None, Some(name)) => match name.to_ascii_lowercase().as_str() {
            "base" => ModelConfig::base(),
            "large" => ModelConfig::large(),
            "ultra" => ModelConfig::ultra(),
            "tiny" => ModelConfig::tiny(),
            other => bail!("unknown preset {other:?}"),
        },
        (None, None) => bail!("give --config or --preset"),
    };
    cfg.validate()?;
    let c = count_params(&cfg);
    println!("total: {}", c.total);
    println!("activated: {}", c.activated);
    println!("flops_per_token: {}", flops_per_token(&cfg, context));
    Ok(())
}

fn bench(cli_seed: Option<u64>, pair: &Path, workdir: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let mut pair: BenchPair = read_json(pair)?;
    if let Some(s) = cli_seed {
        pair.seeds = (s..s + pair.seeds.len().max(1) as u64).collect();
    }
    let tmp;
    let dir = match workdir {
        Some(d) => d,
        None => {
            tmp = std::env::temp_dir().join(format!("tsmoe-bench-{}", std::process::id()));
            &tmp
        }
    };
    let report = bench_sparse_vs_dense(&pair, dir);
    if workdir.is_none() {
        let _ = std::fs::remove_dir_all(dir);
    }
    let report = report?;
    if !report.parity_ok {
        warn!("activated parameters differ by {:.2}%", 100.0 * report.parity_gap);
    }
    info!("mixture at or below dense loss in {} of {} seeds", report.moe_wins, report.runs.len());
    write_json(&report, out)
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Clean { input, out, window, threshold, min_len, domain } => {
            let cfg = CleanConfig { window_size: window, zero_threshold: threshold, min_len };
            if window == 0 || !(0.0..=1.0).contains(&threshold) {
                bail!("--window must be positive and --threshold within [0, 1]");
            }
            clean(&input, &out, cfg, domain.as_deref())
        }
        Command::Pack { cleandir, store, name, shard_points } => pack(&cleandir, &store, &name, shard_points),
        Command::Train { config, store, out, name, metrics, resume } => {
            train(seed, &config, &store, &name, &out, metrics.as_deref(), resume.as_deref())
        }
        Command::Forecast { ckpt, input, horizon, ensemble, raw, out } => {
            forecast(&ckpt, &input, horizon, ensemble, raw, out.as_deref())
        }
        Command::Eval { ckpt, spec, out } => eval(seed, &ckpt, &spec, out.as_deref()),
        Command::Params { config, preset, context } => params(config.as_deref(), preset.as_deref(), context),
        Command::Bench { pair, workdir, out } => bench(seed, &pair, workdir.as_deref(), out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
