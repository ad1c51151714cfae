//! Error metrics, the fold/event averaging protocol, baseline predictors and
//! feature correlations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_store::fmt_num;
use crate::error::{Error, Result};
use crate::features::{EventFeatureTable, Feature};
use crate::model::{ArchConfig, TrainConfig, TrainedModel};
use crate::nas::config_stream;
use crate::nn::CellType;
use crate::protocol::{baseline_folds, prepare_fold, score_model, train_fold, ProtocolData};
use crate::windowing::SampleBatch;

pub const REPORT_FILE: &str = "report.csv";
pub const REPORT_DETAIL_FILE: &str = "report_detail.csv";
pub const CORRELATIONS_FILE: &str = "correlations.csv";

pub const REPORT_HEADER: &[&str] = &["variant", "rnn_type", "max15", "look_back", "mae_m", "rmse_m"];
pub const DETAIL_HEADER: &[&str] = &["variant", "fold", "validation_event", "event_id", "n_samples", "mae_m", "rmse_m"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae_m: f64,
    pub rmse_m: f64,
    pub n_samples: usize,
}

/// MAE and RMSE of `pred` against `target`.
pub fn compute_metrics(pred: ArrayView1<f64>, target: ArrayView1<f64>) -> Result<Metrics> {
    if pred.len() != target.len() {
        return Err(Error::LengthMismatch(pred.len(), target.len()));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = pred.len() as f64;
    let (abs, sq) = pred.iter().zip(target).fold((0.0, 0.0), |(a, s), (p, t)| {
        let e = p - t;
        (a + e.abs(), s + e * e)
    });
    Ok(Metrics {
        mae_m: abs / n,
        rmse_m: (sq / n).sqrt(),
        n_samples: pred.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventScore {
    pub event_id: String,
    pub mae_m: f64,
    pub rmse_m: f64,
    pub n_samples: usize,
}

impl EventScore {
    pub fn new(event_id: impl Into<String>, m: Metrics) -> Self {
        EventScore {
            event_id: event_id.into(),
            mae_m: m.mae_m,
            rmse_m: m.rmse_m,
            n_samples: m.n_samples,
        }
    }
}

/// Test-event scores of one model of the rotation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldScore {
    pub fold: usize,
    pub validation_event: String,
    /// Best validation MAE reached during training; absent for baselines.
    #[serde(default)]
    pub val_mae_m: Option<f64>,
    pub events: Vec<EventScore>,
}

impl FoldScore {
    pub fn mean_mae(&self) -> f64 {
        mean(self.events.iter().map(|e| e.mae_m))
    }

    pub fn mean_rmse(&self) -> f64 {
        mean(self.events.iter().map(|e| e.rmse_m))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Mean over test events within each fold, then over folds.
    #[default]
    EventsThenFolds,
    /// One MAE/RMSE over every test sample of every fold.
    Pooled,
}

/// Aggregate (MAE, RMSE) over folds under `averaging`.
pub fn aggregate(folds: &[FoldScore], averaging: Averaging) -> Result<(f64, f64)> {
    if folds.is_empty() || folds.iter().any(|f| f.events.is_empty()) {
        return Err(Error::EmptyInput);
    }
    Ok(match averaging {
        Averaging::EventsThenFolds => (mean(folds.iter().map(FoldScore::mean_mae)), mean(folds.iter().map(FoldScore::mean_rmse))),
        Averaging::Pooled => {
            let events = folds.iter().flat_map(|f| &f.events);
            let (abs, sq, n) = events.fold((0.0, 0.0, 0usize), |(a, s, n), e| {
                let k = e.n_samples as f64;
                (a + e.mae_m * k, s + e.rmse_m * e.rmse_m * k, n + e.n_samples)
            });
            (abs / n as f64, (sq / n as f64).sqrt())
        }
    })
}

/// One row of the comparison table: an RNN variant or a baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: String,
    pub rnn_type: Option<CellType>,
    pub max15: Option<bool>,
    pub look_back: usize,
    pub folds: Vec<FoldScore>,
    pub mae_m: f64,
    pub rmse_m: f64,
}

impl VariantReport {
    pub fn new(variant: impl Into<String>, rnn_type: Option<CellType>, max15: Option<bool>, look_back: usize, folds: Vec<FoldScore>, averaging: Averaging) -> Result<Self> {
        let (mae_m, rmse_m) = aggregate(&folds, averaging)?;
        Ok(VariantReport {
            variant: variant.into(),
            rnn_type,
            max15,
            look_back,
            folds,
            mae_m,
            rmse_m,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub averaging: Averaging,
    pub rows: Vec<VariantReport>,
}

impl MetricsReport {
    pub fn row(&self, variant: &str) -> Option<&VariantReport> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// `report.csv` and `report_detail.csv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(REPORT_FILE);
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_write_err(&path, e))?;
        w.write_record(REPORT_HEADER).map_err(|e| csv_write_err(&path, e))?;
        for r in &self.rows {
            let rnn = r.rnn_type.map_or("none", CellType::name);
            let max15 = r.max15.map_or("NA".to_string(), |m| m.to_string());
            w.write_record([r.variant.as_str(), rnn, &max15, &r.look_back.to_string(), &fmt_num(r.mae_m), &fmt_num(r.rmse_m)])
                .map_err(|e| csv_write_err(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join(REPORT_DETAIL_FILE);
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_write_err(&path, e))?;
        w.write_record(DETAIL_HEADER).map_err(|e| csv_write_err(&path, e))?;
        for r in &self.rows {
            for f in &r.folds {
                for e in &f.events {
                    w.write_record([
                        r.variant.as_str(),
                        &f.fold.to_string(),
                        &f.validation_event,
                        &e.event_id,
                        &e.n_samples.to_string(),
                        &fmt_num(e.mae_m),
                        &fmt_num(e.rmse_m),
                    ])
                    .map_err(|e| csv_write_err(&path, e))?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }
}

fn csv_write_err(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        file: path.display().to_string(),
        detail: e.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct ReportLine {
    pub variant: String,
    pub rnn_type: String,
    pub max15: String,
    pub look_back: usize,
    pub mae_m: f64,
    pub rmse_m: f64,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct DetailLine {
    pub variant: String,
    pub fold: usize,
    pub validation_event: String,
    pub event_id: String,
    pub n_samples: usize,
    pub mae_m: f64,
    pub rmse_m: f64,
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path, header: &[&str]) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_write_err(path, e))?;
    let got: Vec<String> = rdr.headers().map_err(|e| csv_write_err(path, e))?.iter().map(str::to_string).collect();
    if got != header {
        return Err(Error::SchemaMismatch {
            file: path.display().to_string(),
            detail: format!("expected {:?}, found {:?}", header, got),
        });
    }
    rdr.deserialize().map(|r| r.map_err(|e| csv_write_err(path, e))).collect()
}

pub fn read_report(path: &Path) -> Result<Vec<ReportLine>> {
    read_csv(path, REPORT_HEADER)
}

pub fn read_detail(path: &Path) -> Result<Vec<DetailLine>> {
    read_csv(path, DETAIL_HEADER)
}

/// Recompute each variant's aggregate from persisted per-fold-per-event rows.
pub fn recompute_from_detail(lines: &[DetailLine], averaging: Averaging) -> Result<BTreeMap<String, (f64, f64)>> {
    let mut grouped: BTreeMap<&str, BTreeMap<usize, FoldScore>> = BTreeMap::new();
    for l in lines {
        let fold = grouped.entry(&l.variant).or_default().entry(l.fold).or_insert_with(|| FoldScore {
            fold: l.fold,
            validation_event: l.validation_event.clone(),
            val_mae_m: None,
            events: Vec::new(),
        });
        fold.events.push(EventScore {
            event_id: l.event_id.clone(),
            mae_m: l.mae_m,
            rmse_m: l.rmse_m,
            n_samples: l.n_samples,
        });
    }
    grouped
        .into_iter()
        .map(|(variant, folds)| {
            let folds: Vec<FoldScore> = folds.into_values().collect();
            Ok((variant.to_string(), aggregate(&folds, averaging)?))
        })
        .collect()
}

/// Label used for the RNN rows, e.g. `GRU-max15-lb4`.
pub fn variant_label(rnn_type: CellType, max15: bool, look_back: usize) -> String {
    format!("{}-{}-lb{look_back}", rnn_type, if max15 { "max15" } else { "nomax15" })
}

/// Cell type x MAX15 x look-back, in table order.
pub fn protocol_variants() -> Vec<(CellType, bool, usize)> {
    let mut out = Vec::new();
    for cell in [CellType::Lstm, CellType::Gru] {
        for max15 in [true, false] {
            for lb in [1, 4] {
                out.push((cell, max15, lb));
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Zero,
    TrainMean,
    Persistence,
}

impl Baseline {
    pub const ALL: [Baseline; 3] = [Baseline::Zero, Baseline::TrainMean, Baseline::Persistence];

    pub fn label(self) -> &'static str {
        match self {
            Baseline::Zero => "baseline-zero",
            Baseline::TrainMean => "baseline-train-mean",
            Baseline::Persistence => "baseline-persistence",
        }
    }

    /// Predictions for `batch`. `train_mean` is the fold's mean training
    /// target; `table` supplies the depth at t-1 for persistence.
    pub fn predict(self, batch: &SampleBatch, train_mean: f64, table: &EventFeatureTable) -> Result<Array1<f64>> {
        if batch.is_empty() {
            return Err(Error::EmptyInput);
        }
        Ok(match self {
            Baseline::Zero => Array1::zeros(batch.len()),
            Baseline::TrainMean => Array1::from_elem(batch.len(), train_mean),
            Baseline::Persistence => {
                let depth = table.depth.as_ref().ok_or_else(|| Error::MissingTargets(table.event_id.clone()))?;
                let row: BTreeMap<i64, usize> = table.segment_ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
                batch
                    .index
                    .iter()
                    .map(|k| {
                        let i = *row.get(&k.segment_id).ok_or(Error::UnknownSegment(k.segment_id))?;
                        Ok(depth[[i, k.hour - 1]])
                    })
                    .collect::<Result<Array1<f64>>>()?
            }
        })
    }
}

/// Pearson correlations between depth and the eight inputs over every row
/// of `tables`. Entries involving a zero-variance column are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    pub labels: Vec<String>,
    pub values: Array2<Option<f64>>,
}

pub fn correlation_labels() -> Vec<String> {
    std::iter::once("depth".to_string()).chain(Feature::ALL.iter().map(|f| f.name().to_string())).collect()
}

pub fn correlation_matrix(tables: &[&EventFeatureTable]) -> Result<CorrelationMatrix> {
    let rows: usize = tables.iter().map(|t| t.n_rows()).sum();
    if rows < 2 {
        return Err(Error::InsufficientRows(rows));
    }
    let mut columns: Vec<Vec<f64>> = vec![Vec::with_capacity(rows); 1 + Feature::ALL.len()];
    for t in tables {
        let depth = t.depth.as_ref().ok_or_else(|| Error::MissingTargets(t.event_id.clone()))?;
        for s in 0..t.n_segments() {
            for h in 0..t.n_hours() {
                columns[0].push(depth[[s, h]]);
                for (k, f) in Feature::ALL.iter().enumerate() {
                    columns[k + 1].push(t.value(*f, s, h));
                }
            }
        }
    }
    Ok(CorrelationMatrix {
        labels: correlation_labels(),
        values: pearson_matrix(&columns),
    })
}

/// Pairwise Pearson r of equally long columns.
pub fn pearson_matrix(columns: &[Vec<f64>]) -> Array2<Option<f64>> {
    let k = columns.len();
    let centered: Vec<(Vec<f64>, f64)> = columns
        .iter()
        .map(|c| {
            let m = c.iter().sum::<f64>() / c.len() as f64;
            let d: Vec<f64> = c.iter().map(|v| v - m).collect();
            let ss = d.iter().map(|v| v * v).sum::<f64>();
            (d, ss)
        })
        .collect();
    let mut out = Array2::from_elem((k, k), None);
    for i in 0..k {
        for j in i..k {
            let (di, si) = &centered[i];
            let (dj, sj) = &centered[j];
            let r = if *si > 0.0 && *sj > 0.0 {
                if i == j {
                    Some(1.0)
                } else {
                    let cov: f64 = di.iter().zip(dj).map(|(a, b)| a * b).sum();
                    Some((cov / (si * sj).sqrt()).clamp(-1.0, 1.0))
                }
            } else {
                None
            };
            out[[i, j]] = r;
            out[[j, i]] = r;
        }
    }
    out
}

impl CorrelationMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.labels.iter().position(|l| l == a)?;
        let j = self.labels.iter().position(|l| l == b)?;
        self.values[[i, j]]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_write_err(path, e))?;
        let mut header = vec![String::new()];
        header.extend(self.labels.iter().cloned());
        w.write_record(&header).map_err(|e| csv_write_err(path, e))?;
        for (i, label) in self.labels.iter().enumerate() {
            let mut rec = vec![label.clone()];
            rec.extend(self.values.row(i).iter().map(|v| v.map_or("NA".to_string(), fmt_num)));
            w.write_record(&rec).map_err(|e| csv_write_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// How the eight-variant protocol trains and stores fold models.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolOptions {
    /// Base architecture; each variant overrides cell type, MAX15 and look-back.
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub workers: usize,
    pub averaging: Averaging,
    /// Fold models are loaded from `<dir>/<variant>/fold_NN.json` when present
    /// and written there after training otherwise.
    pub models_dir: Option<PathBuf>,
    /// Look-back defining the baselines' sample set.
    pub baseline_look_back: usize,
}

impl ProtocolOptions {
    pub fn new(arch: ArchConfig, train: TrainConfig, seed: u64) -> Self {
        ProtocolOptions {
            arch,
            train,
            seed,
            workers: 1,
            averaging: Averaging::EventsThenFolds,
            models_dir: None,
            baseline_look_back: 4,
        }
    }
}

pub fn fold_model_path(models_dir: &Path, variant: &str, fold: usize) -> PathBuf {
    models_dir.join(variant).join(format!("fold_{fold:02}.json"))
}

/// Score one variant's fold models; every fold of the rotation needs a
/// model and all models must share one architecture.
pub fn evaluate_variant(variant: &str, models: &[Option<TrainedModel>], data: &ProtocolData, averaging: Averaging) -> Result<VariantReport> {
    if models.len() != data.n_folds() {
        return Err(Error::MissingFoldModel(format!("{variant}: {} models for {} folds", models.len(), data.n_folds())));
    }
    let mut arch: Option<&ArchConfig> = None;
    let mut folds = Vec::with_capacity(models.len());
    for (k, m) in models.iter().enumerate() {
        let m = m.as_ref().ok_or_else(|| Error::MissingFoldModel(format!("{variant} fold {k}")))?;
        match arch {
            Some(a) if a != m.arch() => {
                return Err(Error::InvalidConfig(format!("{variant}: fold {k} model has a different architecture")));
            }
            _ => arch = Some(m.arch()),
        }
        folds.push(score_model(m, data, k)?);
    }
    let a = arch.ok_or_else(|| Error::MissingFoldModel(variant.to_string()))?;
    VariantReport::new(variant, Some(a.rnn_type), Some(a.include_max15), a.look_back, folds, averaging)
}

fn load_or_train(opts: &ProtocolOptions, data: &ProtocolData, variant: &str, arch: &ArchConfig, fold: usize) -> Result<TrainedModel> {
    if let Some(dir) = &opts.models_dir {
        let path = fold_model_path(dir, variant, fold);
        if path.exists() {
            let model = TrainedModel::load(&path)?;
            if model.arch() != arch {
                return Err(Error::InvalidConfig(format!("{} does not hold a {variant} model", path.display())));
            }
            return Ok(model);
        }
    }
    let fold_data = prepare_fold(data, fold, arch.look_back, arch.include_max15)?;
    let model = train_fold(arch, &opts.train, &fold_data, opts.seed, config_stream(arch))?;
    if let Some(dir) = &opts.models_dir {
        let path = fold_model_path(dir, variant, fold);
        fs::create_dir_all(path.parent().expect("has parent")).map_err(|e| Error::io(dir, e))?;
        model.save(&path)?;
    }
    Ok(model)
}

/// Eight RNN variant rows (cell type x MAX15 x look-back) plus the three
/// baselines, each averaged over test events and then folds.
pub fn evaluate_protocol(data: &ProtocolData, opts: &ProtocolOptions) -> Result<MetricsReport> {
    opts.train.validate()?;
    let variants: Vec<(String, ArchConfig)> = protocol_variants()
        .into_iter()
        .map(|(cell, max15, lb)| {
            let arch = ArchConfig {
                rnn_type: cell,
                include_max15: max15,
                look_back: lb,
                ..opts.arch.clone()
            };
            (variant_label(cell, max15, lb), arch)
        })
        .collect();
    for (_, arch) in &variants {
        arch.validate()?;
    }
    let jobs: Vec<(usize, usize)> = (0..variants.len()).flat_map(|v| (0..data.n_folds()).map(move |k| (v, k))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| Error::ConfigInvalid(format!("worker pool: {e}")))?;
    let models: Vec<Result<TrainedModel>> = pool.install(|| {
        jobs.par_iter()
            .with_max_len(1)
            .map(|&(v, k)| load_or_train(opts, data, &variants[v].0, &variants[v].1, k))
            .collect()
    });
    let mut models = models.into_iter();
    let mut rows = Vec::new();
    for (label, _) in &variants {
        let fold_models = (0..data.n_folds()).map(|_| models.next().expect("one per job").map(Some)).collect::<Result<Vec<_>>>()?;
        rows.push(evaluate_variant(label, &fold_models, data, opts.averaging)?);
    }
    for b in Baseline::ALL {
        let folds = baseline_folds(data, b, opts.baseline_look_back)?;
        rows.push(VariantReport::new(b.label(), None, None, opts.baseline_look_back, folds, opts.averaging)?);
    }
    Ok(MetricsReport {
        averaging: opts.averaging,
        rows,
    })
}
