//! Command-line pipeline: ingest CSVs into a binary cache, fit relational
//! event additive models, recover the baseline hazard, cross-validate
//! hyperparameters, generate synthetic networks, and re-emit plot-ready
//! tables from fit artifacts.
//!
//! Exit codes: 0 success, 1 data error, 2 usage error, 3 numeric failure.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use remfit::baseline::{baseline_to_csv, cumulative_baseline};
use remfit::covariates::{assemble_stream, case_values, EffectKind};
use remfit::data_model::{assemble, load_event_log, validate, DataError, EventLog};
use remfit::optimizer::{
    fit_config_hash, percentile_bands, resample_fits, AdamConfig, EffectSpec, FitError, ModelFit,
};
use remfit::sampler::sample_controls;
use remfit::selection::{
    compare_effect_groups, criteria_to_csv, cv_results_to_csv, run_cv, select, CvPlan, SelectError,
};
use remfit::synthgen::{generate, truth_curves_to_csv, CitesDistribution, CurveSpec, SynthConfig};
use remfit::util::{fnv1a_hex, log_fingerprint};
use remfit::Transform;

#[derive(Parser)]
#[command(
    name = "remfit",
    version,
    about = "Relational event additive models on large citation-style networks"
)]
struct Cli {
    /// Base RNG seed for sampling, shuffling and generation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker-thread cap for data-parallel sections (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// JSON config file; explicit command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate events.csv + attributes.csv and write a binary cache.
    Ingest(IngestArgs),
    /// Fit the model on a cache; writes fit.json, trace.csv and curve tables.
    Fit(FitArgs),
    /// Recover the baseline hazard from a cache and a fit artifact.
    Baseline(BaselineArgs),
    /// Cross-validate batch size and spline degrees of freedom.
    Cv(CvArgs),
    /// Generate a synthetic citation network with known effect curves.
    Simulate(SimulateArgs),
    /// Re-emit curve tables from a fit artifact; optionally compare nested
    /// effect groups.
    Report(ReportArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// events.csv (header: sender,receiver,time)
    events: PathBuf,
    /// attributes.csv (header: node,pub_date,ipc_classes,embedding,outdegree)
    attributes: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Drop violating events (with a report) instead of failing.
    #[arg(long)]
    allow_warnings: bool,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Comma list of effects or groups: nodal, similarity, timevarying, all,
    /// or individual statistic names such as time_lag.
    #[arg(long, default_value = "all")]
    effects: String,
    #[arg(long, default_value_t = 12)]
    df: usize,
    #[arg(long, default_value_t = 3)]
    degree: usize,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Refit this many times with resampled controls and emit uncertainty
    /// bands; the curve column then reports the replicate mean.
    #[arg(long, default_value_t = 0)]
    replicates: usize,
    #[arg(long, default_value_t = 200)]
    grid_points: usize,
    /// Reuse (or create) a covariate cache to skip recomputation between
    /// fits on the same cache/seed/effect set.
    #[arg(long)]
    covariates_cache: Option<PathBuf>,
    /// Also write controls.csv (the sampled control per event).
    #[arg(long)]
    dump_controls: bool,
    /// Also write candidates.csv with this many candidates per event.
    #[arg(long)]
    candidates: Option<usize>,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    fit: PathBuf,
    /// Gaussian filter width in samples (~days on dense data).
    #[arg(long, default_value_t = 30.0)]
    sigma: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CvArgs {
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value = "all")]
    effects: String,
    #[arg(long, default_value_t = 3)]
    degree: usize,
    #[arg(long, default_value_t = 6)]
    folds: usize,
    /// Comma list, e.g. 1024,16384,262144.
    #[arg(long, default_value = "1024,16384,262144")]
    batch_sizes: String,
    /// Inclusive range lo:hi or comma list.
    #[arg(long, default_value = "4:20")]
    df_grid: String,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n_patents: usize,
    /// Poisson rate of new patents per day.
    #[arg(long, default_value_t = 5.0)]
    arrivals: f64,
    /// fixed:<k> or poisson:<mu>.
    #[arg(long, default_value = "poisson:3.0")]
    cites: String,
    /// Repeatable: <effect>=zero | <effect>=linear:<slope> |
    /// <effect>=sine:<amplitude>:<period> | <effect>=table:x0:y0:x1:y1:...
    #[arg(long = "effect")]
    effects: Vec<String>,
    /// Per-patent citation hazard per day (baseline-recovery mode).
    #[arg(long)]
    daily_rate: Option<f64>,
    #[arg(long, default_value_t = 4)]
    embedding_dim: usize,
    #[arg(long, default_value_t = 8)]
    ipc_alphabet: usize,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    fit: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 200)]
    grid_points: usize,
    /// Semicolon-separated effect groups (each a comma list) to fit as
    /// nested models for criteria.csv; needs --cache.
    #[arg(long)]
    groups: Option<String>,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long, default_value_t = 12)]
    df: usize,
    #[arg(long, default_value_t = 3)]
    degree: usize,
    #[arg(long)]
    max_epochs: Option<usize>,
}

/// Optional JSON config file: any section may be omitted.
#[derive(Debug, Default, Deserialize)]
struct FileConfig {
    adam: Option<AdamConfig>,
    effects: Option<Vec<EffectSpec>>,
    cv: Option<CvPlan>,
    synth: Option<SynthConfig>,
}

enum CliError {
    Data(String),
    Usage(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Data(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Data(m) | CliError::Usage(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<FitError> for CliError {
    fn from(e: FitError) -> Self {
        match e {
            FitError::NoData => CliError::Data(e.to_string()),
            FitError::Covariate(_) => CliError::Data(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<SelectError> for CliError {
    fn from(e: SelectError) -> Self {
        match e {
            SelectError::TooFewEvents { .. } => CliError::Data(e.to_string()),
            SelectError::AllCellsFailed => CliError::Numeric(e.to_string()),
            SelectError::Fit(f) => f.into(),
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            std::process::exit(2);
        }
        // Ignore "already initialized": only possible in-process during tests.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.code());
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file_config = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Usage(format!("cannot read config {}: {e}", path.display()))
            })?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };
    let seed = cli.seed;
    match cli.command {
        Command::Ingest(args) => cmd_ingest(args),
        Command::Fit(args) => cmd_fit(args, seed, &file_config),
        Command::Baseline(args) => cmd_baseline(args),
        Command::Cv(args) => cmd_cv(args, seed, &file_config),
        Command::Simulate(args) => cmd_simulate(args, seed, &file_config),
        Command::Report(args) => cmd_report(args, seed, &file_config),
    }
}

// ---------------------------------------------------------------- cache io

const CACHE_MAGIC: &[u8; 8] = b"REMCACH1";
const CACHE_VERSION: u32 = 1;

fn write_cache(path: &Path, log: &EventLog) -> Result<(), CliError> {
    let payload = bincode::serialize(log)
        .map_err(|e| CliError::Data(format!("cache serialization failed: {e}")))?;
    let mut bytes = Vec::with_capacity(payload.len() + 12);
    bytes.extend_from_slice(CACHE_MAGIC);
    bytes.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&payload);
    std::fs::write(path, bytes)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn read_cache(path: &Path) -> Result<EventLog, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    if bytes.len() < 12 || &bytes[..8] != CACHE_MAGIC {
        return Err(CliError::Data(format!(
            "{} is not an event-log cache (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(CliError::Data(format!(
            "cache schema version {version} unsupported (expected {CACHE_VERSION})"
        )));
    }
    bincode::deserialize(&bytes[12..])
        .map_err(|e| CliError::Data(format!("corrupt cache {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::Data(format!("cannot create {}: {e}", parent.display())))?;
    }
    std::fs::write(path, text)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

/// CSV artifacts carry the producing run's config hash as a leading comment.
fn csv_with_hash(hash: &str, body: &str) -> String {
    format!("# config_hash={hash}\n{body}")
}

// ------------------------------------------------------------------ ingest

fn cmd_ingest(args: IngestArgs) -> Result<(), CliError> {
    if !args.allow_warnings {
        let log = load_event_log(&args.events, &args.attributes)?;
        write_cache(&args.out, &log)?;
        println!(
            "ingested {} events over {} nodes -> {}",
            log.n_events(),
            log.n_nodes(),
            args.out.display()
        );
        return Ok(());
    }

    // Lenient path: drop events that reference unknown nodes, then drop
    // events failing validation, and report both counts.
    let nodes = remfit::data_model::read_attributes_csv(&args.attributes)?;
    let raw = remfit::data_model::read_events_csv(&args.events)?;
    let known: std::collections::HashSet<&str> = nodes.iter().map(|n| n.name.as_str()).collect();
    let (resolvable, orphans): (Vec<_>, Vec<_>) = raw
        .into_iter()
        .partition(|r| known.contains(r.sender.as_str()) && known.contains(r.receiver.as_str()));
    let log = assemble(nodes, resolvable)?;
    let report = validate(&log);
    for v in &report {
        eprintln!("warning: {v}");
    }
    let drop: Vec<usize> = report.iter().map(|v| v.event_index).collect();
    let cleaned = log.without_events(&drop);
    write_cache(&args.out, &cleaned)?;
    println!(
        "ingested {} events over {} nodes ({} unknown-node events dropped, {} invalid events dropped) -> {}",
        cleaned.n_events(),
        cleaned.n_nodes(),
        orphans.len(),
        drop.len(),
        args.out.display()
    );
    Ok(())
}

// ------------------------------------------------------------------ effects

const NODAL: [EffectKind; 3] = [
    EffectKind::ReceiverPubYear,
    EffectKind::TimeLag,
    EffectKind::ReceiverOutdegree,
];
const SIMILARITY: [EffectKind; 2] = [EffectKind::TextualSimilarity, EffectKind::IpcJaccard];
const TIME_VARYING: [EffectKind; 2] = [
    EffectKind::CumulativeCitations,
    EffectKind::TimeFromLastEvent,
];

fn parse_effect_set(spec: &str) -> Result<Vec<EffectKind>, CliError> {
    let mut out: Vec<EffectKind> = Vec::new();
    let mut push = |k: EffectKind| {
        if !out.contains(&k) {
            out.push(k);
        }
    };
    for token in spec.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        match token {
            "nodal" => NODAL.iter().copied().for_each(&mut push),
            "similarity" => SIMILARITY.iter().copied().for_each(&mut push),
            "timevarying" => TIME_VARYING.iter().copied().for_each(&mut push),
            "all" => EffectKind::ALL.iter().copied().for_each(&mut push),
            name => match EffectKind::from_str(name) {
                Ok(k) => push(k),
                Err(e) => return Err(CliError::Usage(e)),
            },
        }
    }
    if out.is_empty() {
        return Err(CliError::Usage(format!("no effects in {spec:?}")));
    }
    Ok(out)
}

fn effect_specs(
    set: &str,
    degree: usize,
    df: usize,
    file_config: &FileConfig,
) -> Result<Vec<EffectSpec>, CliError> {
    if let Some(effects) = &file_config.effects {
        return Ok(effects.clone());
    }
    Ok(parse_effect_set(set)?
        .into_iter()
        .map(|k| EffectSpec::spline(k, degree, df))
        .collect())
}

fn adam_config(
    seed: Option<u64>,
    file_config: &FileConfig,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    max_epochs: Option<usize>,
    patience: Option<usize>,
    val_fraction: Option<f64>,
) -> AdamConfig {
    let mut cfg = file_config.adam.clone().unwrap_or_default();
    if let Some(b) = batch_size {
        cfg.batch_size = b;
    }
    if let Some(p) = learning_rate {
        cfg.psi = p;
    }
    if let Some(e) = max_epochs {
        cfg.max_epochs = e;
    }
    if let Some(p) = patience {
        cfg.patience = p;
    }
    if let Some(v) = val_fraction {
        cfg.val_fraction = v;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let ascending = lo < hi;
    if !ascending || n < 2 {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Covariate cache: a `covariates.csv` plus a sibling `.meta.json` binding
/// it to (data, seed, effect set). A stale or foreign cache is recomputed
/// and overwritten, never trusted.
fn load_or_assemble_stream(
    log: &EventLog,
    controls: &remfit::sampler::ControlSample,
    kinds: &[EffectKind],
    stream_hash: &str,
    cache_path: Option<&Path>,
) -> Result<remfit::covariates::CovariateStream, CliError> {
    use remfit::covariates::{covariates_from_csv, covariates_to_csv};
    if let Some(path) = cache_path {
        let meta_path = path.with_extension("meta.json");
        if path.exists() && meta_path.exists() {
            let meta: serde_json::Value = serde_json::from_str(&read_text(&meta_path)?)
                .map_err(|e| CliError::Data(format!("bad cache meta: {e}")))?;
            if meta["stream_hash"].as_str() == Some(stream_hash) {
                return covariates_from_csv(&read_text(path)?)
                    .map_err(|e| CliError::Data(format!("corrupt covariate cache: {e}")));
            }
            eprintln!("warning: covariate cache is stale, recomputing");
        }
    }
    let stream = assemble_stream(log, &controls.pairs(), kinds)
        .map_err(|e| CliError::Data(e.to_string()))?;
    if let Some(path) = cache_path {
        write_text(path, &covariates_to_csv(&stream))?;
        let meta = serde_json::json!({ "stream_hash": stream_hash });
        write_text(
            &path.with_extension("meta.json"),
            &serde_json::to_string_pretty(&meta).expect("json"),
        )?;
    }
    Ok(stream)
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))
}

// --------------------------------------------------------------------- fit

fn cmd_fit(args: FitArgs, seed: Option<u64>, file_config: &FileConfig) -> Result<(), CliError> {
    let specs = effect_specs(&args.effects, args.degree, args.df, file_config)?;
    let log = read_cache(&args.cache)?;
    let cfg = adam_config(
        seed,
        file_config,
        args.batch_size,
        args.learning_rate,
        args.max_epochs,
        args.patience,
        args.val_fraction,
    );

    let controls = sample_controls(&log, cfg.seed);
    if controls.assignments.is_empty() {
        return Err(CliError::Data("no events with eligible controls".into()));
    }
    if !controls.skipped.is_empty() {
        eprintln!(
            "warning: {} event(s) skipped (empty eligible risk set)",
            controls.skipped.len()
        );
    }
    let kinds: Vec<EffectKind> = specs.iter().map(|s| s.kind).collect();
    let fingerprint = log_fingerprint(&log);
    let stream_hash = {
        let kinds_csv: Vec<String> = kinds.iter().map(|k| k.to_string()).collect();
        fnv1a_hex(&[
            fingerprint.as_bytes(),
            &cfg.seed.to_le_bytes(),
            kinds_csv.join(",").as_bytes(),
        ])
    };
    let stream = load_or_assemble_stream(
        &log,
        &controls,
        &kinds,
        &stream_hash,
        args.covariates_cache.as_deref(),
    )?;

    let mut m = remfit::optimizer::fit(&stream, &specs, &cfg).map_err(CliError::from)?;
    m.n_skipped_events = controls.skipped.len();
    m.config_hash = fit_config_hash(&specs, &cfg, Some(&fingerprint));
    m.data_fingerprint = fingerprint;

    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", args.out_dir.display())))?;
    if args.dump_controls {
        write_text(
            &args.out_dir.join("controls.csv"),
            &csv_with_hash(
                &m.config_hash,
                &remfit::sampler::controls_to_csv(&log, &controls),
            ),
        )?;
    }
    if let Some(c) = args.candidates {
        if c == 0 {
            return Err(CliError::Usage("--candidates must be at least 1".into()));
        }
        let sets = remfit::sampler::sample_candidates(&log, c, cfg.seed);
        write_text(
            &args.out_dir.join("candidates.csv"),
            &csv_with_hash(
                &m.config_hash,
                &remfit::sampler::candidates_to_csv(&log, &sets),
            ),
        )?;
    }
    let fit_json = serde_json::to_string_pretty(&m)
        .map_err(|e| CliError::Numeric(format!("fit serialization failed: {e}")))?;
    write_text(&args.out_dir.join("fit.json"), &fit_json)?;

    let mut trace = String::from("epoch,train_nll,val_nll,wall_seconds\n");
    for t in &m.trace {
        trace.push_str(&format!(
            "{},{},{},{}\n",
            t.epoch, t.train_nll, t.val_nll, t.wall_seconds
        ));
    }
    write_text(
        &args.out_dir.join("trace.csv"),
        &csv_with_hash(&m.config_hash, &trace),
    )?;

    // Replicate fits for uncertainty bands.
    let replicate_fits: Vec<ModelFit> = if args.replicates > 0 {
        let results = resample_fits(&log, &specs, &cfg, args.replicates);
        let mut ok = Vec::new();
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Ok(f) => ok.push(f),
                Err(e) => eprintln!("warning: replicate {} failed: {e}", i + 1),
            }
        }
        if ok.is_empty() {
            return Err(CliError::Numeric("all replicate fits failed".into()));
        }
        ok
    } else {
        Vec::new()
    };

    for effect in &m.effects {
        let kind = effect.config.kind;
        let (lo, hi) = effect.curve_domain;
        let grid = linspace(lo, hi, args.grid_points);
        let mut body = String::new();
        if replicate_fits.is_empty() {
            body.push_str("x,f_centered\n");
            let curve = m
                .effect_curve(kind, &grid)
                .map_err(|e| CliError::Numeric(e.to_string()))?;
            for (x, f) in grid.iter().zip(&curve) {
                body.push_str(&format!("{x},{f}\n"));
            }
        } else {
            body.push_str("x,f_centered,band_lo,band_hi\n");
            let refs: Vec<&ModelFit> = replicate_fits.iter().collect();
            let band = percentile_bands(&refs, kind, &grid, 0.95)
                .map_err(|e| CliError::Numeric(e.to_string()))?;
            for (((x, m), lo), hi) in grid.iter().zip(&band.mean).zip(&band.lo).zip(&band.hi) {
                body.push_str(&format!("{x},{m},{lo},{hi}\n"));
            }
        }
        write_text(
            &args.out_dir.join(format!("curve_{kind}.csv")),
            &csv_with_hash(&m.config_hash, &body),
        )?;
    }

    println!(
        "fit: {} events, P = {}, NLL = {:.6}, AIC = {:.6}, BIC = {:.6} -> {}",
        m.n_events,
        m.n_coefficients(),
        m.final_nll,
        m.aic,
        m.bic,
        args.out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- baseline

fn cmd_baseline(args: BaselineArgs) -> Result<(), CliError> {
    if args.sigma <= 0.0 {
        return Err(CliError::Usage("--sigma must be positive".into()));
    }
    let log = read_cache(&args.cache)?;
    let text = std::fs::read_to_string(&args.fit)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", args.fit.display())))?;
    let m: ModelFit = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("bad fit artifact {}: {e}", args.fit.display())))?;

    let fingerprint = log_fingerprint(&log);
    if m.data_fingerprint != fingerprint {
        return Err(CliError::Data(format!(
            "fit artifact was produced from different data (fingerprint {} vs cache {})",
            m.data_fingerprint, fingerprint
        )));
    }

    let controls = sample_controls(&log, m.seed);
    let kinds: Vec<EffectKind> = m.effects.iter().map(|e| e.config.kind).collect();
    let stream = assemble_stream(&log, &controls.pairs(), &kinds)
        .map_err(|e| CliError::Data(e.to_string()))?;
    let est = cumulative_baseline(&m, &stream, &log, args.sigma);
    write_text(
        &args.out,
        &csv_with_hash(&m.config_hash, &baseline_to_csv(&est)),
    )?;
    println!(
        "baseline over {} event days -> {}",
        est.times.len(),
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------- cv

fn parse_usize_list(text: &str) -> Result<Vec<usize>, CliError> {
    if let Some((lo, hi)) = text.split_once(':') {
        let lo: usize = lo
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("bad range {text:?}")))?;
        let hi: usize = hi
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("bad range {text:?}")))?;
        if hi < lo {
            return Err(CliError::Usage(format!("empty range {text:?}")));
        }
        return Ok((lo..=hi).collect());
    }
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Usage(format!("bad integer {t:?} in {text:?}")))
        })
        .collect()
}

fn cmd_cv(args: CvArgs, seed: Option<u64>, file_config: &FileConfig) -> Result<(), CliError> {
    let specs = effect_specs(&args.effects, args.degree, 12, file_config)?;
    let log = read_cache(&args.cache)?;
    let adam = adam_config(
        seed,
        file_config,
        None,
        args.learning_rate,
        args.max_epochs,
        args.patience,
        None,
    );
    let plan = match &file_config.cv {
        Some(plan) => plan.clone(),
        None => CvPlan {
            folds: args.folds,
            batch_sizes: parse_usize_list(&args.batch_sizes)?,
            df_grid: parse_usize_list(&args.df_grid)?,
            seed: seed.unwrap_or(0),
        },
    };

    let controls = sample_controls(&log, adam.seed);
    if controls.assignments.is_empty() {
        return Err(CliError::Data("no events with eligible controls".into()));
    }
    let kinds: Vec<EffectKind> = specs.iter().map(|s| s.kind).collect();
    let stream = assemble_stream(&log, &controls.pairs(), &kinds)
        .map_err(|e| CliError::Data(e.to_string()))?;

    let result = run_cv(&stream, &specs, &plan, &adam)?;
    let (batch_size, df) = select(&result)?;

    let hash = {
        let plan_json = serde_json::to_string(&plan).expect("plan serializes");
        let adam_json = serde_json::to_string(&adam).expect("adam serializes");
        fnv1a_hex(&[
            plan_json.as_bytes(),
            adam_json.as_bytes(),
            log_fingerprint(&log).as_bytes(),
        ])
    };
    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", args.out_dir.display())))?;
    write_text(
        &args.out_dir.join("cv_results.csv"),
        &csv_with_hash(&hash, &cv_results_to_csv(&result)),
    )?;
    let selected = serde_json::json!({
        "batch_size": batch_size,
        "df": df,
        "config_hash": hash,
    });
    write_text(
        &args.out_dir.join("selected.json"),
        &serde_json::to_string_pretty(&selected).expect("json"),
    )?;
    println!(
        "selected batch_size = {batch_size}, df = {df} -> {}",
        args.out_dir.display()
    );
    Ok(())
}

// ----------------------------------------------------------------- simulate

fn parse_cites(text: &str) -> Result<CitesDistribution, CliError> {
    let bad = || {
        CliError::Usage(format!(
            "bad --cites {text:?}: use fixed:<k> or poisson:<mu>"
        ))
    };
    let (kind, value) = text.split_once(':').ok_or_else(bad)?;
    match kind {
        "fixed" => Ok(CitesDistribution::Fixed(value.parse().map_err(|_| bad())?)),
        "poisson" => Ok(CitesDistribution::Poisson(
            value.parse().map_err(|_| bad())?,
        )),
        _ => Err(bad()),
    }
}

fn parse_truth_effect(text: &str) -> Result<(EffectKind, CurveSpec), CliError> {
    let bad = |msg: &str| CliError::Usage(format!("bad --effect {text:?}: {msg}"));
    let (kind, curve) = text
        .split_once('=')
        .ok_or_else(|| bad("expected <effect>=<curve>"))?;
    let kind = EffectKind::from_str(kind.trim()).map_err(|e| bad(&e))?;
    let parts: Vec<&str> = curve.split(':').collect();
    let curve = match parts[0] {
        "zero" => CurveSpec::Zero,
        "linear" => {
            let slope = parts
                .get(1)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("linear needs a slope"))?;
            CurveSpec::Linear { slope }
        }
        "sine" => {
            let amplitude = parts
                .get(1)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("sine needs amplitude and period"))?;
            let period = parts
                .get(2)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("sine needs amplitude and period"))?;
            CurveSpec::Sine { amplitude, period }
        }
        "table" => {
            let nums: Result<Vec<f64>, _> = parts[1..].iter().map(|s| s.parse::<f64>()).collect();
            let nums = nums.map_err(|_| bad("table needs numeric x:y pairs"))?;
            if nums.len() < 4 || nums.len() % 2 != 0 {
                return Err(bad("table needs at least two x:y pairs"));
            }
            let points: Vec<(f64, f64)> = nums.chunks_exact(2).map(|c| (c[0], c[1])).collect();
            if !points.windows(2).all(|w| w[0].0 < w[1].0) {
                return Err(bad("table x values must be strictly increasing"));
            }
            CurveSpec::PiecewiseTable(points)
        }
        other => return Err(bad(&format!("unknown curve {other:?}"))),
    };
    Ok((kind, curve))
}

fn cmd_simulate(
    args: SimulateArgs,
    seed: Option<u64>,
    file_config: &FileConfig,
) -> Result<(), CliError> {
    let config = match &file_config.synth {
        Some(c) => {
            let mut c = c.clone();
            if let Some(s) = seed {
                c.seed = s;
            }
            c
        }
        None => {
            let mut true_effects = Vec::new();
            for e in &args.effects {
                true_effects.push(parse_truth_effect(e)?);
            }
            SynthConfig {
                n_patents: args.n_patents,
                arrivals_per_day: args.arrivals,
                cites_per_patent: parse_cites(&args.cites)?,
                true_effects,
                daily_citation_rate: args.daily_rate,
                embedding_dim: args.embedding_dim,
                ipc_alphabet: args.ipc_alphabet,
                seed: seed.unwrap_or(0),
            }
        }
    };

    let out = generate(&config).map_err(|e| CliError::Usage(e.to_string()))?;
    if out.truncated_citations > 0 {
        eprintln!(
            "warning: {} citation(s) truncated by small early risk sets",
            out.truncated_citations
        );
    }
    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", args.out_dir.display())))?;
    remfit::data_model::write_events_csv(&out.log, &args.out_dir.join("events.csv"))?;
    remfit::data_model::write_attributes_csv(&out.log, &args.out_dir.join("attributes.csv"))?;

    // Truth curves on the observed (transformed) covariate range per effect.
    let mut grids = Vec::new();
    for (kind, _) in &out.truth.effects {
        let raw = case_values(&out.log, *kind).map_err(|e| CliError::Data(e.to_string()))?;
        let tr = Transform::default_for(*kind);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in &raw {
            let t = tr.apply(*v);
            lo = lo.min(t);
            hi = hi.max(t);
        }
        grids.push((*kind, linspace(lo, hi, 101)));
    }
    write_text(
        &args.out_dir.join("truth_curves.csv"),
        &truth_curves_to_csv(&out.truth, &grids),
    )?;

    let config_json = serde_json::to_string_pretty(&config).expect("config serializes");
    let manifest = serde_json::json!({
        "config": config,
        "config_hash": fnv1a_hex(&[config_json.as_bytes()]),
        "n_events": out.log.n_events(),
        "n_nodes": out.log.n_nodes(),
        "truncated_citations": out.truncated_citations,
        "data_fingerprint": log_fingerprint(&out.log),
    });
    write_text(
        &args.out_dir.join("manifest.json"),
        &serde_json::to_string_pretty(&manifest).expect("json"),
    )?;
    println!(
        "simulated {} events over {} nodes -> {}",
        out.log.n_events(),
        out.log.n_nodes(),
        args.out_dir.display()
    );
    Ok(())
}

// ------------------------------------------------------------------- report

fn cmd_report(
    args: ReportArgs,
    seed: Option<u64>,
    file_config: &FileConfig,
) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.fit)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", args.fit.display())))?;
    let m: ModelFit = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("bad fit artifact {}: {e}", args.fit.display())))?;

    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", args.out_dir.display())))?;
    for effect in &m.effects {
        let kind = effect.config.kind;
        let (lo, hi) = effect.curve_domain;
        let grid = linspace(lo, hi, args.grid_points);
        let curve = m
            .effect_curve(kind, &grid)
            .map_err(|e| CliError::Numeric(e.to_string()))?;
        let mut body = String::from("x,f_centered\n");
        for (x, f) in grid.iter().zip(&curve) {
            body.push_str(&format!("{x},{f}\n"));
        }
        write_text(
            &args.out_dir.join(format!("curve_{kind}.csv")),
            &csv_with_hash(&m.config_hash, &body),
        )?;
    }

    if let Some(groups_arg) = &args.groups {
        let cache = args.cache.as_ref().ok_or_else(|| {
            CliError::Usage("--groups needs --cache to refit nested models".into())
        })?;
        let log = read_cache(cache)?;
        if m.data_fingerprint != log_fingerprint(&log) {
            return Err(CliError::Data(
                "fit artifact was produced from different data than the cache".into(),
            ));
        }
        let mut groups = Vec::new();
        for part in groups_arg.split(';').filter(|p| !p.trim().is_empty()) {
            let kinds = parse_effect_set(part)?;
            let specs: Vec<EffectSpec> = kinds
                .into_iter()
                .map(|k| EffectSpec::spline(k, args.degree, args.df))
                .collect();
            groups.push((part.trim().to_string(), specs));
        }
        let mut adam = adam_config(seed, file_config, None, None, args.max_epochs, None, None);
        if seed.is_none() {
            adam.seed = m.seed;
        }
        let rows = compare_effect_groups(&log, &groups, &adam)?;
        let hash = fit_config_hash(&[], &adam, Some(&m.data_fingerprint));
        write_text(
            &args.out_dir.join("criteria.csv"),
            &csv_with_hash(&hash, &criteria_to_csv(&rows)),
        )?;
        let mut stdout = std::io::stdout().lock();
        for r in &rows {
            let _ = writeln!(
                stdout,
                "{}: P = {}, NLL = {:.4}, AIC = {:.4}, BIC = {:.4}",
                r.group, r.n_coefficients, r.nll, r.aic, r.bic
            );
        }
    }
    println!("report -> {}", args.out_dir.display());
    Ok(())
}
