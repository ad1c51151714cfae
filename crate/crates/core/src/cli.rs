//! Command-line pipeline: `gen-data`, `prepare`, `train`, `nas`, `evaluate`,
//! `predict` and `grad-check`.
//!
//! Settings resolve in this order, first match wins:
//! command-line flag, `--config` JSON file, built-in default.
//! The data directory additionally falls back to `FLOODCAST_DATA_DIR`, and
//! the seed to the `manifest.json` written by `gen-data`.
//!
//! Every command prints one JSON summary line on stdout. Failures print
//! `{"error": <kind>, "message": <text>}` on stderr and exit nonzero.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data_store::{
    attach_depths, format_timestamp, fmt_num, read_depths, save_relational, write_depths, write_weather, Dataset, Split, Timestamp,
    DEPTHS_FILE, WEATHER_FILE,
};
use crate::error::{Error, Result};
use crate::eval::{correlation_matrix, evaluate_protocol, Averaging, ProtocolOptions, CORRELATIONS_FILE};
use crate::features::{attach_static_and_tide, derive_rainfall_features, fit_scaler, EventFeatureTable, Feature, DEFAULT_IDW_POWER};
use crate::model::{ArchConfig, TrainConfig, TrainedModel};
use crate::nas::{
    config_stream, enumerate_grid, export_runs, read_log, run_id, run_search, select_champion, GridSpec, SearchOptions,
    RUN_LOG_FILE,
};
use crate::protocol::{prepare_fold, score_fold, train_fold, ProtocolData};
use crate::synth_hydro::{generate_dataset, select_flood_prone, OracleParams, SynthConfig};
use crate::verify::GradientSuite;
use crate::windowing::build_scaled_samples;

pub const DATA_DIR_ENV: &str = "FLOODCAST_DATA_DIR";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCALER_FILE: &str = "scaler.json";
pub const PREDICTIONS_HEADER: &[&str] = &["segment_id", "timestamp", "depth_m"];

#[derive(Debug, Parser)]
#[command(name = "floodcast", version, about = "Street-level flood depth surrogate: data, training, search and evaluation")]
pub struct Cli {
    /// Directory holding the relational tables [default: $FLOODCAST_DATA_DIR]
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    /// Pipeline configuration JSON; flags override its values
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed [default: from --config, else from the data manifest]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic study area, storms and oracle depths
    GenData(GenDataArgs),
    /// Derive hourly features (weather.csv) and a feature scaler
    Prepare,
    /// Train the configured architecture on one fold of the rotation
    Train(TrainArgs),
    /// Architecture grid search over the full rotation
    Nas(NasArgs),
    /// Variant and baseline comparison tables plus feature correlations
    Evaluate(EvaluateArgs),
    /// Per-segment hourly depth predictions for one event
    Predict(PredictArgs),
    /// Finite-difference gradient verification
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub segments: Option<usize>,
    #[arg(long)]
    pub gauges: Option<usize>,
    #[arg(long)]
    pub events: Option<usize>,
    /// Comma-separated event durations in hours, cycled over the events
    #[arg(long, value_delimiter = ',')]
    pub durations: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training event used for validation; the rest of the training split trains
    #[arg(long)]
    pub holdout_event: String,
    /// Model file to write
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct NasArgs {
    /// Preset name (full, table-v, mini, tiny) or a grid JSON file
    #[arg(long)]
    pub grid: Option<String>,
    /// Output directory for runs.jsonl and the CSV exports
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Stop after this many new runs; a later invocation resumes
    #[arg(long)]
    pub max_runs: Option<usize>,
    /// Number of flood-prone segments searched over (0 = all)
    #[arg(long)]
    pub segments: Option<usize>,
    /// Runs kept in top_runs.csv
    #[arg(long, default_value_t = 120)]
    pub top_k: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Fold model directory; missing models are trained and written here
    #[arg(long)]
    pub models: PathBuf,
    /// Output directory for report.csv, report_detail.csv and correlations.csv
    #[arg(long)]
    pub report: PathBuf,
    /// Pool every test sample instead of averaging events then folds
    #[arg(long)]
    pub pooled: bool,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub event: String,
    /// CSV file to write
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// Number of random seeds
    #[arg(long)]
    pub seeds: Option<u64>,
    /// Check at most this many entries of each network tensor
    #[arg(long)]
    pub max_per_tensor: Option<usize>,
}

/// Contents of a `--config` file. Every field but `seed` may be omitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub data_dir: Option<PathBuf>,
    pub n_segments: usize,
    pub n_gauges: usize,
    pub bounds_m: (f64, f64),
    pub n_events: usize,
    /// Event durations in hours; the reference roster's when absent.
    pub durations_hrs: Option<Vec<usize>>,
    pub peak_intensity_mm: (f64, f64),
    pub oracle_params: OracleParams,
    pub idw_power: f64,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub grid: String,
    /// Flood-prone segments used by `nas` (0 = all).
    pub nas_segments: usize,
    /// Flood-prone segments used by `train` and `evaluate` (0 = all).
    pub eval_segments: usize,
    pub workers: usize,
    pub averaging: Averaging,
    pub grad_check: GradientSuite,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        PipelineConfig {
            seed: None,
            data_dir: None,
            n_segments: synth.n_segments,
            n_gauges: synth.n_gauges,
            bounds_m: synth.bounds_m,
            n_events: synth.n_events,
            durations_hrs: None,
            peak_intensity_mm: synth.peak_intensity_mm,
            oracle_params: synth.oracle_params,
            idw_power: DEFAULT_IDW_POWER,
            arch: ArchConfig::champion(),
            train: TrainConfig::default(),
            grid: "mini".into(),
            nas_segments: 6,
            eval_segments: 0,
            workers: 1,
            averaging: Averaging::EventsThenFolds,
            grad_check: GradientSuite::default(),
        }
    }
}

impl PipelineConfig {
    /// Parse a configuration file; the seed is mandatory.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: PipelineConfig =
            serde_json::from_str(&raw).map_err(|e| Error::ConfigInvalid(format!("{}: {e}", path.display())))?;
        if cfg.seed.is_none() {
            return Err(Error::ConfigInvalid(format!("{}: seed is mandatory", path.display())));
        }
        cfg.arch.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn synth_config(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            seed,
            n_segments: self.n_segments,
            n_gauges: self.n_gauges,
            bounds_m: self.bounds_m,
            n_events: self.n_events,
            durations_hrs: self.durations_hrs.clone(),
            peak_intensity_mm: self.peak_intensity_mm,
            idw_power: self.idw_power,
            oracle_params: self.oracle_params,
        }
    }
}

/// Written by `gen-data` next to the tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub n_segments: usize,
    pub n_gauges: usize,
    pub n_events: usize,
    pub durations_hrs: Vec<usize>,
    pub bounds_m: (f64, f64),
    pub idw_power: f64,
    pub oracle_params: OracleParams,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Option<Manifest>> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let raw = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Some(serde_json::from_str(&raw)?))
    }
}

struct Context {
    cfg: PipelineConfig,
    data_dir: Option<PathBuf>,
    seed_flag: Option<u64>,
}

impl Context {
    fn new(cli: &Cli) -> Result<Self> {
        let cfg = match &cli.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        let data_dir = cli
            .data_dir
            .clone()
            .or_else(|| cfg.data_dir.clone())
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from));
        Ok(Context {
            cfg,
            data_dir,
            seed_flag: cli.seed,
        })
    }

    fn data_dir(&self) -> Result<&Path> {
        self.data_dir
            .as_deref()
            .ok_or_else(|| Error::ConfigInvalid(format!("no data directory: pass --data-dir or set {DATA_DIR_ENV}")))
    }

    /// Flag, then config file, then the manifest of the data directory.
    fn seed(&self) -> Result<u64> {
        if let Some(s) = self.seed_flag.or(self.cfg.seed) {
            return Ok(s);
        }
        if let Some(dir) = &self.data_dir {
            if let Some(m) = Manifest::load(dir)? {
                return Ok(m.seed);
            }
        }
        Err(Error::ConfigInvalid("seed is mandatory: pass --seed or set it in --config".into()))
    }

    fn prepared(&self) -> Result<Dataset> {
        let dir = self.data_dir()?;
        let ds = Dataset::load(dir)?;
        if ds.features.is_empty() {
            return Err(Error::IncompleteFeatures(format!("no {WEATHER_FILE} in {}; run prepare first", dir.display())));
        }
        Ok(ds)
    }
}

/// Protocol data over the `k` most flood-prone segments of the training
/// events, or every segment when `k` is 0.
pub fn protocol_data(ds: &Dataset, k: usize) -> Result<ProtocolData> {
    if k == 0 {
        return ProtocolData::from_dataset(ds, None);
    }
    let train_ids = ds.event_ids(Split::Train);
    let train: Vec<&EventFeatureTable> = ds.features.iter().filter(|t| train_ids.contains(&t.event_id)).collect();
    let prone = select_flood_prone(&train, k)?;
    ProtocolData::from_dataset(ds, Some(&prone))
}

/// Parse `argv` (program name first), run the command and return the exit
/// code: 0 on success, 1 for a failed command, 2 for a usage error.
pub fn run_command<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{}", e.render());
                return 0;
            }
            let error = match e.kind() {
                ErrorKind::InvalidSubcommand | ErrorKind::MissingSubcommand | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    Error::UnknownCommand(first_line(&e.render().to_string()))
                }
                _ => Error::ConfigInvalid(first_line(&e.render().to_string())),
            };
            report_error(err, &error);
            return 2;
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            report_error(err, &e);
            1
        }
    }
}

fn first_line(s: &str) -> String {
    s.lines().next().unwrap_or_default().trim_start_matches("error: ").to_string()
}

fn report_error(err: &mut dyn Write, e: &Error) {
    let _ = writeln!(err, "{}", json!({"error": e.kind(), "message": e.to_string()}));
}

fn emit(out: &mut dyn Write, value: serde_json::Value) -> Result<()> {
    writeln!(out, "{value}").map_err(|e| Error::io("<stdout>", e))
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let ctx = Context::new(cli)?;
    match &cli.command {
        Command::GenData(a) => gen_data(&ctx, a, out),
        Command::Prepare => prepare(&ctx, out),
        Command::Train(a) => train_one(&ctx, a, out),
        Command::Nas(a) => nas(&ctx, a, out),
        Command::Evaluate(a) => evaluate(&ctx, a, out),
        Command::Predict(a) => predict(&ctx, a, out),
        Command::GradCheck(a) => grad_check(&ctx, a, out),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn gen_data(ctx: &Context, a: &GenDataArgs, out: &mut dyn Write) -> Result<()> {
    let dir = ctx.data_dir()?;
    let seed = ctx
        .seed_flag
        .or(ctx.cfg.seed)
        .ok_or_else(|| Error::ConfigInvalid("gen-data needs --seed or a config file with a seed".into()))?;
    let mut synth = ctx.cfg.synth_config(seed);
    if let Some(n) = a.segments {
        synth.n_segments = n;
    }
    if let Some(n) = a.gauges {
        synth.n_gauges = n;
    }
    if let Some(n) = a.events {
        synth.n_events = n;
    }
    if let Some(d) = &a.durations {
        synth.durations_hrs = Some(d.clone());
    }
    let ds = generate_dataset(&synth)?;
    let mut written = save_relational(&ds.area, &ds.events, &[], dir)?;
    write_depths(&dir.join(DEPTHS_FILE), &ds.features)?;
    written.push(dir.join(DEPTHS_FILE));
    // Derived files from an earlier dataset would no longer match.
    for stale in [WEATHER_FILE, SCALER_FILE] {
        let path = dir.join(stale);
        if path.exists() {
            fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
    }
    let manifest = Manifest {
        seed,
        n_segments: synth.n_segments,
        n_gauges: synth.n_gauges,
        n_events: synth.n_events,
        durations_hrs: ds.events.iter().map(|e| e.event.duration_hrs()).collect(),
        bounds_m: synth.bounds_m,
        idw_power: synth.idw_power,
        oracle_params: synth.oracle_params,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    written.push(dir.join(MANIFEST_FILE));
    emit(
        out,
        json!({
            "command": "gen-data",
            "seed": seed,
            "segments": ds.area.segments.len(),
            "gauges": ds.area.gauges.len(),
            "events": ds.events.len(),
            "files": written.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        }),
    )
}

/// Feature tables for every event of a raw dataset, with depth targets
/// attached where `depths` covers every cell.
pub fn derive_features(ds: &Dataset, depths: &HashMap<(i64, Timestamp), f64>, idw_power: f64) -> Result<Vec<EventFeatureTable>> {
    ds.events
        .iter()
        .map(|series| {
            let rainfall = derive_rainfall_features(&series.rain, &ds.area.segments, &ds.area.gauges, &series.event, idw_power)?;
            let mut table = attach_static_and_tide(rainfall, &ds.area.segments, &series.tide)?;
            attach_depths(&mut table, depths);
            Ok(table)
        })
        .collect()
}

fn prepare(ctx: &Context, out: &mut dyn Write) -> Result<()> {
    let dir = ctx.data_dir()?;
    let ds = Dataset::load_raw(dir)?;
    let depths_path = dir.join(DEPTHS_FILE);
    let depths = if depths_path.exists() {
        read_depths(&depths_path)?
    } else {
        HashMap::new()
    };
    let tables = derive_features(&ds, &depths, ctx.cfg.idw_power)?;
    let weather = write_weather(&dir.join(WEATHER_FILE), &tables)?;

    let train_ids: Vec<String> = ds
        .events
        .iter()
        .filter(|e| e.event.split == Split::Train && e.usable())
        .map(|e| e.event.event_id.clone())
        .collect();
    let train: Vec<&EventFeatureTable> = tables.iter().filter(|t| train_ids.contains(&t.event_id)).collect();
    let scaler = fit_scaler(&train, &Feature::model_inputs(true))?;
    let scaler_path = dir.join(SCALER_FILE);
    write_json(&scaler_path, &scaler)?;
    emit(
        out,
        json!({
            "command": "prepare",
            "events": tables.len(),
            "with_depths": tables.iter().filter(|t| t.depth.is_some()).count(),
            "rows": tables.iter().map(EventFeatureTable::n_rows).sum::<usize>(),
            "files": [weather.display().to_string(), scaler_path.display().to_string()],
        }),
    )
}

fn train_one(ctx: &Context, a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let seed = ctx.seed()?;
    let ds = ctx.prepared()?;
    let data = protocol_data(&ds, ctx.cfg.eval_segments)?;
    let fold = data.plan.folds.iter().position(|f| f.validation == a.holdout_event).ok_or_else(|| {
        if data.plan.test.contains(&a.holdout_event) {
            Error::ConfigInvalid(format!("{} is a test event; the holdout must be a training event", a.holdout_event))
        } else {
            Error::UnknownEvent(a.holdout_event.clone())
        }
    })?;
    let arch = &ctx.cfg.arch;
    arch.validate()?;
    let fold_data = prepare_fold(&data, fold, arch.look_back, arch.include_max15)?;
    let model = train_fold(arch, &ctx.cfg.train, &fold_data, seed, config_stream(arch))?;
    let score = score_fold(&model, &fold_data)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    model.save(&a.out)?;
    emit(
        out,
        json!({
            "command": "train",
            "architecture": arch.label(),
            "holdout_event": a.holdout_event,
            "fold": fold,
            "epochs": model.history.len(),
            "best_epoch": model.best_epoch,
            "val_mae_m": model.best_val_mae(),
            "test_mae_m": score.mean_mae(),
            "test_rmse_m": score.mean_rmse(),
            "model": a.out.display().to_string(),
        }),
    )
}

fn nas(ctx: &Context, a: &NasArgs, out: &mut dyn Write) -> Result<()> {
    let seed = ctx.seed()?;
    let grid = GridSpec::resolve(a.grid.as_deref().unwrap_or(&ctx.cfg.grid))?;
    let configs = enumerate_grid(&grid)?;
    let ds = ctx.prepared()?;
    let data = protocol_data(&ds, a.segments.unwrap_or(ctx.cfg.nas_segments))?;
    let log_path = a.out.join(RUN_LOG_FILE);
    let opts = SearchOptions {
        workers: a.workers.unwrap_or(ctx.cfg.workers),
        seed,
        log_path: log_path.clone(),
        max_new_runs: a.max_runs,
    };
    run_search(&configs, &data, &ctx.cfg.train, &opts)?;
    let ids: std::collections::HashSet<String> = configs.iter().enumerate().map(|(i, c)| run_id(i, c)).collect();
    let records: Vec<_> = read_log(&log_path)?.into_iter().filter(|r| ids.contains(&r.run_id)).collect();
    let exports = export_runs(&records, a.top_k, &a.out)?;
    let champion = select_champion(&records)?;
    emit(
        out,
        json!({
            "command": "nas",
            "configs": configs.len(),
            "folds": data.n_folds(),
            "logged": records.len(),
            "failed": records.iter().filter(|r| !r.is_ok()).count(),
            "champion": {
                "run_id": champion.run_id,
                "architecture": champion.config.label(),
                "mae_m": champion.mae_m,
                "rmse_m": champion.rmse_m,
            },
            "files": std::iter::once(log_path).chain(exports).map(|p| p.display().to_string()).collect::<Vec<_>>(),
        }),
    )
}

fn evaluate(ctx: &Context, a: &EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    let seed = ctx.seed()?;
    let ds = ctx.prepared()?;
    let data = protocol_data(&ds, ctx.cfg.eval_segments)?;
    let mut opts = ProtocolOptions::new(ctx.cfg.arch.clone(), ctx.cfg.train.clone(), seed);
    opts.workers = a.workers.unwrap_or(ctx.cfg.workers);
    opts.averaging = if a.pooled { Averaging::Pooled } else { ctx.cfg.averaging };
    opts.models_dir = Some(a.models.clone());
    let report = evaluate_protocol(&data, &opts)?;
    report.write(&a.report)?;

    let train: Vec<&EventFeatureTable> = data.plan.folds.iter().map(|f| data.table(&f.validation)).collect::<Result<_>>()?;
    let corr = correlation_matrix(&train)?;
    corr.write_csv(&a.report.join(CORRELATIONS_FILE))?;
    emit(
        out,
        json!({
            "command": "evaluate",
            "averaging": opts.averaging,
            "folds": data.n_folds(),
            "rows": report.rows.iter().map(|r| json!({"variant": r.variant, "mae_m": r.mae_m, "rmse_m": r.rmse_m})).collect::<Vec<_>>(),
            "report": a.report.display().to_string(),
        }),
    )
}

fn predict(ctx: &Context, a: &PredictArgs, out: &mut dyn Write) -> Result<()> {
    let ds = ctx.prepared()?;
    let model = TrainedModel::load(&a.model)?;
    let table = ds.table(&a.event).ok_or_else(|| Error::UnknownEvent(a.event.clone()))?;
    let scaler = model
        .scaler
        .as_ref()
        .ok_or_else(|| Error::ScalerMismatch(format!("{} has no embedded scaler", a.model.display())))?;
    let arch = model.arch();
    let batch = build_scaled_samples(table, scaler, arch.look_back, arch.include_max15)?;
    let pred = model.predict_clamped(&batch)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let csv_err = |e: csv::Error| Error::Parse {
        file: a.out.display().to_string(),
        detail: e.to_string(),
    };
    let mut w = csv::Writer::from_path(&a.out).map_err(csv_err)?;
    w.write_record(PREDICTIONS_HEADER).map_err(csv_err)?;
    for (key, depth) in batch.index.iter().zip(pred.iter()) {
        w.write_record([key.segment_id.to_string(), format_timestamp(&table.timestamp(key.hour)), fmt_num(*depth)])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&a.out, e))?;
    emit(
        out,
        json!({
            "command": "predict",
            "event": a.event,
            "architecture": arch.label(),
            "rows": batch.len(),
            "out": a.out.display().to_string(),
        }),
    )
}

fn grad_check(ctx: &Context, a: &GradCheckArgs, out: &mut dyn Write) -> Result<()> {
    let mut suite = ctx.cfg.grad_check.clone();
    suite.arch = ctx.cfg.arch.clone();
    suite.first_seed = ctx.seed()?;
    if let Some(n) = a.seeds {
        suite.seeds = n;
    }
    if a.max_per_tensor.is_some() {
        suite.max_per_tensor = a.max_per_tensor;
    }
    let report = suite.run()?;
    emit(out, json!({"command": "grad-check", "architecture": suite.arch.label(), "report": report}))?;
    if report.passed {
        Ok(())
    } else {
        Err(Error::GradientCheckFailed(format!(
            "worst relative errors dense {:e}, lstm {:e}, gru {:e}, model {:e}",
            report.dense, report.lstm, report.gru, report.model
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run_command(std::iter::once("floodcast").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    fn error_kind(stderr: &str) -> String {
        let v: serde_json::Value = serde_json::from_str(stderr.trim()).unwrap();
        v["error"].as_str().unwrap().to_string()
    }

    #[test]
    fn unknown_subcommand_is_reported_as_json() {
        let (code, _, err) = run(&["frobnicate"]);
        assert_eq!(code, 2);
        assert_eq!(error_kind(&err), "UnknownCommand");
        let (code, _, err) = run(&[]);
        assert_eq!(code, 2);
        assert_eq!(error_kind(&err), "UnknownCommand");
    }

    #[test]
    fn bad_flag_is_config_invalid() {
        let (code, _, err) = run(&["train", "--out", "x.json"]);
        assert_eq!(code, 2);
        assert_eq!(error_kind(&err), "ConfigInvalid");
    }

    #[test]
    fn config_requires_a_seed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, r#"{"n_segments": 10}"#).unwrap();
        let err = PipelineConfig::load(&path).unwrap_err();
        assert_eq!(err.kind(), "ConfigInvalid");
        fs::write(&path, r#"{"seed": 3, "n_segmentz": 10}"#).unwrap();
        assert_eq!(PipelineConfig::load(&path).unwrap_err().kind(), "ConfigInvalid");
        fs::write(&path, r#"{"seed": 3, "n_segments": 10, "train": {"batch_size": 64}}"#).unwrap();
        let cfg = PipelineConfig::load(&path).unwrap();
        assert_eq!(cfg.seed, Some(3));
        assert_eq!(cfg.n_segments, 10);
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.train.max_epochs, TrainConfig::default().max_epochs);
        assert_eq!(cfg.arch, ArchConfig::champion());
    }

    #[test]
    fn flags_override_config_values() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("cfg.json");
        let data = dir.path().join("data");
        fs::write(&cfg_path, r#"{"seed": 3, "n_segments": 4, "n_gauges": 2, "n_events": 2, "durations_hrs": [8]}"#).unwrap();
        let (code, out, err) = run(&[
            "gen-data",
            "--config",
            cfg_path.to_str().unwrap(),
            "--data-dir",
            data.to_str().unwrap(),
            "--seed",
            "9",
            "--segments",
            "6",
        ]);
        assert_eq!(code, 0, "{err}");
        let summary: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
        assert_eq!(summary["seed"], 9);
        assert_eq!(summary["segments"], 6);
        assert_eq!(summary["gauges"], 2);
        let m = Manifest::load(&data).unwrap().unwrap();
        assert_eq!((m.seed, m.n_segments, m.durations_hrs), (9, 6, vec![8, 8]));
    }

    #[test]
    fn missing_data_dir_and_missing_features() {
        let (code, _, err) = run(&["prepare"]);
        assert_eq!(code, 1);
        assert_eq!(error_kind(&err), "ConfigInvalid");
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().to_str().unwrap();
        let (code, _, err) = run(&["prepare", "--data-dir", d]);
        assert_eq!(code, 1);
        assert_eq!(error_kind(&err), "MissingFile");
        assert_eq!(run(&["gen-data", "--data-dir", d, "--seed", "1", "--segments", "3", "--events", "2"]).0, 0);
        let (code, _, err) = run(&["predict", "--data-dir", d, "--model", "m.json", "--event", "E01", "--out", "p.csv"]);
        assert_eq!(code, 1);
        assert_eq!(error_kind(&err), "IncompleteFeatures");
    }

    #[test]
    fn seed_falls_back_to_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().to_str().unwrap();
        assert_eq!(run(&["gen-data", "--data-dir", d, "--seed", "17", "--segments", "3", "--events", "2"]).0, 0);
        let cli = Cli::try_parse_from(["floodcast", "prepare", "--data-dir", d]).unwrap();
        assert_eq!(Context::new(&cli).unwrap().seed().unwrap(), 17);
        let cli = Cli::try_parse_from(["floodcast", "prepare", "--data-dir", d, "--seed", "5"]).unwrap();
        assert_eq!(Context::new(&cli).unwrap().seed().unwrap(), 5);
    }

    #[test]
    fn grad_check_command_reports() {
        let (code, out, err) = run(&["grad-check", "--seed", "0", "--seeds", "2", "--max-per-tensor", "10"]);
        assert_eq!(code, 0, "{err}");
        let v: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
        assert_eq!(v["report"]["passed"], true);
    }
}
