//! Grid search over architectures: enumeration, a resumable JSON-lines run
//! log, champion selection and CSV exports for plotting.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data_store::fmt_num;
use crate::error::{Error, Result};
use crate::eval::{aggregate, Averaging, FoldScore};
use crate::model::{
    ArchConfig, HeadActivation, TrainConfig, DENSE_ACTIVATIONS, HEAD_UNIT_OPTIONS, LOOK_BACK_OPTIONS, RNN_LAYER_OPTIONS,
    RNN_UNIT_OPTIONS, SPATIAL_LAYER_OPTIONS, SPATIAL_UNIT_OPTIONS,
};
use crate::nn::{Activation, CellType};
use crate::protocol::{prepare_fold, score_fold, train_fold, FoldData, ProtocolData};

pub const RUN_LOG_FILE: &str = "runs.jsonl";
pub const TOP_RUNS_FILE: &str = "top_runs.csv";
pub const MAE_BY_RNN_SPATIAL_FILE: &str = "mae_by_rnn_spatial_layers.csv";
pub const MAE_BY_RNN_HEAD_FILE: &str = "mae_by_rnn_head_layers.csv";

pub const TOP_RUNS_HEADER: &[&str] = &[
    "run_id",
    "rnn_type",
    "rnn_layers",
    "rnn_units",
    "spatial_layers",
    "spatial_units",
    "spatial_act",
    "head_units",
    "head_act",
    "look_back",
    "max15",
    "mae_m",
    "rmse_m",
];

/// Option sets for every architecture axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rnn_types: Vec<CellType>,
    pub look_backs: Vec<usize>,
    pub max15: Vec<bool>,
    pub rnn_layers: Vec<usize>,
    pub rnn_units: Vec<usize>,
    pub spatial_layers: Vec<usize>,
    pub spatial_units: Vec<usize>,
    pub spatial_acts: Vec<Activation>,
    pub head_units: Vec<Vec<usize>>,
    /// Uniform activations apply to any head; per-layer lists only pair
    /// with heads of the same depth.
    pub head_acts: Vec<HeadActivation>,
}

fn champion_head_act() -> HeadActivation {
    HeadActivation::PerLayer(vec![Activation::Linear, Activation::Selu, Activation::Selu, Activation::Selu])
}

impl GridSpec {
    /// Every searchable option for one (cell type, look-back, MAX15) setting.
    pub fn table_v(rnn_type: CellType, look_back: usize, include_max15: bool) -> Self {
        GridSpec {
            rnn_types: vec![rnn_type],
            look_backs: vec![look_back],
            max15: vec![include_max15],
            rnn_layers: RNN_LAYER_OPTIONS.to_vec(),
            rnn_units: RNN_UNIT_OPTIONS.to_vec(),
            spatial_layers: SPATIAL_LAYER_OPTIONS.to_vec(),
            spatial_units: SPATIAL_UNIT_OPTIONS.to_vec(),
            spatial_acts: DENSE_ACTIVATIONS.to_vec(),
            head_units: HEAD_UNIT_OPTIONS.iter().map(|h| h.to_vec()).collect(),
            head_acts: DENSE_ACTIVATIONS.iter().map(|a| HeadActivation::Uniform(*a)).collect(),
        }
    }

    /// Every option for both cell types, both look-backs and both MAX15 settings.
    pub fn full() -> Self {
        GridSpec {
            rnn_types: vec![CellType::Lstm, CellType::Gru],
            look_backs: LOOK_BACK_OPTIONS.to_vec(),
            max15: vec![true, false],
            ..Self::table_v(CellType::Gru, 4, true)
        }
    }

    /// 24 configurations around the champion.
    pub fn mini() -> Self {
        GridSpec {
            rnn_layers: vec![1, 2],
            rnn_units: vec![12, 20],
            spatial_layers: vec![2],
            spatial_units: vec![4],
            spatial_acts: vec![Activation::Selu, Activation::Relu],
            head_units: vec![vec![64, 64, 16, 1], vec![32, 16, 1]],
            head_acts: vec![champion_head_act(), HeadActivation::Uniform(Activation::Selu)],
            ..Self::table_v(CellType::Gru, 4, true)
        }
    }

    /// Two configurations differing only in recurrent width.
    pub fn tiny() -> Self {
        GridSpec {
            rnn_layers: vec![1],
            rnn_units: vec![12, 20],
            spatial_layers: vec![2],
            spatial_units: vec![4],
            spatial_acts: vec![Activation::Selu],
            head_units: vec![vec![64, 64, 16, 1]],
            head_acts: vec![champion_head_act()],
            ..Self::table_v(CellType::Gru, 4, true)
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "table-v" => Ok(Self::table_v(CellType::Gru, 4, true)),
            "mini" => Ok(Self::mini()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::ConfigInvalid(format!("unknown grid preset {other:?} (full, table-v, mini, tiny)"))),
        }
    }

    /// A preset name, or a path to a grid JSON file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        let path = Path::new(name_or_path);
        if path.extension().is_some_and(|e| e == "json") {
            let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let spec: GridSpec = serde_json::from_str(&raw)?;
            spec.validate()?;
            Ok(spec)
        } else {
            Self::preset(name_or_path)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("rnn_types", self.rnn_types.len()),
            ("look_backs", self.look_backs.len()),
            ("max15", self.max15.len()),
            ("rnn_layers", self.rnn_layers.len()),
            ("rnn_units", self.rnn_units.len()),
            ("spatial_layers", self.spatial_layers.len()),
            ("spatial_units", self.spatial_units.len()),
            ("spatial_acts", self.spatial_acts.len()),
            ("head_units", self.head_units.len()),
            ("head_acts", self.head_acts.len()),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, n)| *n == 0) {
            return Err(Error::ConfigInvalid(format!("grid option set {name} is empty")));
        }
        Ok(())
    }
}

/// Cartesian product in lexicographic order of option indices, outermost
/// axis first. Per-layer head activations are paired only with heads of
/// matching depth.
pub fn enumerate_grid(spec: &GridSpec) -> Result<Vec<ArchConfig>> {
    spec.validate()?;
    let mut out = Vec::new();
    for &rnn_type in &spec.rnn_types {
        for &look_back in &spec.look_backs {
            for &include_max15 in &spec.max15 {
                for &rnn_layers in &spec.rnn_layers {
                    for &rnn_units in &spec.rnn_units {
                        for &spatial_layers in &spec.spatial_layers {
                            for &spatial_units in &spec.spatial_units {
                                for &spatial_act in &spec.spatial_acts {
                                    for head_units in &spec.head_units {
                                        for head_act in &spec.head_acts {
                                            if let HeadActivation::PerLayer(v) = head_act {
                                                if v.len() != head_units.len() {
                                                    continue;
                                                }
                                            }
                                            let arch = ArchConfig {
                                                rnn_type,
                                                rnn_layers,
                                                rnn_units,
                                                spatial_layers,
                                                spatial_units,
                                                spatial_act,
                                                head_units: head_units.clone(),
                                                head_act: head_act.clone(),
                                                look_back,
                                                include_max15,
                                            };
                                            arch.validate()?;
                                            out.push(arch);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Content hash of a configuration; also seeds its folds.
pub fn config_hash(arch: &ArchConfig) -> [u8; 32] {
    let json = serde_json::to_vec(arch).expect("architecture serializes");
    Sha256::digest(json).into()
}

pub fn run_id(index: usize, arch: &ArchConfig) -> String {
    let h = config_hash(arch);
    let hex: String = h[..6].iter().map(|b| format!("{b:02x}")).collect();
    format!("r{index:05}-{hex}")
}

/// Seed stream of a configuration's fold models.
pub fn config_stream(arch: &ArchConfig) -> u64 {
    let h = config_hash(arch);
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub index: usize,
    pub config: ArchConfig,
    pub param_count: usize,
    pub seed: u64,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub folds: Vec<FoldScore>,
    pub mae_m: Option<f64>,
    pub rmse_m: Option<f64>,
    pub wall_time_s: f64,
}

impl RunRecord {
    pub fn is_ok(&self) -> bool {
        self.status == RunStatus::Ok && self.mae_m.is_some()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOptions {
    pub workers: usize,
    pub seed: u64,
    pub log_path: PathBuf,
    /// Stop after this many new records (the rest resume later).
    pub max_new_runs: Option<usize>,
}

/// Parse a run log, ignoring a torn final line left by an interrupted write.
pub fn read_log(path: &Path) -> Result<Vec<RunRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<String> = BufReader::new(file).lines().collect::<std::io::Result<_>>().map_err(|e| Error::io(path, e))?;
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RunRecord>(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() => break,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

/// Rewrite the log without a torn final line so appends start cleanly.
fn repair_log(path: &Path, records: &[RunRecord]) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if raw.is_empty() || (raw.ends_with('\n') && raw.lines().filter(|l| !l.trim().is_empty()).count() == records.len()) {
        return Ok(());
    }
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn append_record(path: &Path, record: &RunRecord) -> Result<()> {
    let mut line = serde_json::to_string(record)?;
    line.push('\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

struct FoldOutcome {
    config: usize,
    fold: usize,
    result: Result<FoldScore>,
    seconds: f64,
}

fn finish_record(index: usize, arch: &ArchConfig, seed: u64, outcomes: Vec<FoldOutcome>) -> RunRecord {
    let wall_time_s = outcomes.iter().map(|o| o.seconds).sum();
    let mut folds = Vec::with_capacity(outcomes.len());
    let mut error = None;
    for o in outcomes {
        match o.result {
            Ok(f) => folds.push(f),
            Err(e) => {
                error.get_or_insert_with(|| format!("fold {}: {e}", o.fold));
            }
        }
    }
    let (mae_m, rmse_m) = match (&error, aggregate(&folds, Averaging::EventsThenFolds)) {
        (None, Ok((m, r))) => (Some(m), Some(r)),
        _ => (None, None),
    };
    RunRecord {
        run_id: run_id(index, arch),
        index,
        param_count: arch.param_count(),
        config: arch.clone(),
        seed,
        status: if error.is_none() { RunStatus::Ok } else { RunStatus::Failed },
        error,
        folds,
        mae_m,
        rmse_m,
        wall_time_s,
    }
}

/// Train every configuration on every fold and append one record per
/// configuration to the run log, in enumeration order regardless of the
/// number of workers. Configurations already in the log are skipped.
pub fn run_search(configs: &[ArchConfig], data: &ProtocolData, tc: &TrainConfig, opts: &SearchOptions) -> Result<Vec<RunRecord>> {
    tc.validate()?;
    if let Some(parent) = opts.log_path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let existing = read_log(&opts.log_path)?;
    repair_log(&opts.log_path, &existing)?;
    let done: HashSet<String> = existing.iter().map(|r| r.run_id.clone()).collect();

    let mut pending: Vec<usize> = (0..configs.len()).filter(|&i| !done.contains(&run_id(i, &configs[i]))).collect();
    if let Some(limit) = opts.max_new_runs {
        pending.truncate(limit);
    }

    let n_folds = data.n_folds();
    let mut fold_data: HashMap<(usize, bool), Vec<FoldData>> = HashMap::new();
    for &i in &pending {
        let key = (configs[i].look_back, configs[i].include_max15);
        if !fold_data.contains_key(&key) {
            let folds = (0..n_folds).map(|k| prepare_fold(data, k, key.0, key.1)).collect::<Result<Vec<_>>>()?;
            fold_data.insert(key, folds);
        }
    }

    let jobs: Vec<(usize, usize)> = pending.iter().flat_map(|&i| (0..n_folds).map(move |k| (i, k))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| Error::ConfigInvalid(format!("worker pool: {e}")))?;

    let (tx, rx) = mpsc::channel::<FoldOutcome>();
    let mut written = Vec::with_capacity(pending.len());
    std::thread::scope(|scope| -> Result<()> {
        let fold_data = &fold_data;
        let jobs = &jobs;
        scope.spawn(move || {
            pool.install(|| {
                jobs.par_iter().with_max_len(1).for_each_with(tx, |tx, &(i, k)| {
                    let arch = &configs[i];
                    let fold = &fold_data[&(arch.look_back, arch.include_max15)][k];
                    let start = Instant::now();
                    let result = train_fold(arch, tc, fold, opts.seed, config_stream(arch)).and_then(|m| {
                        if m.net.param_count() != arch.param_count() {
                            return Err(Error::ShapeMismatch("parameter count differs from closed form".into()));
                        }
                        score_fold(&m, fold)
                    });
                    let _ = tx.send(FoldOutcome {
                        config: i,
                        fold: k,
                        result,
                        seconds: start.elapsed().as_secs_f64(),
                    });
                });
            });
        });

        // Reorder buffer: emit records strictly in enumeration order.
        let mut buffer: BTreeMap<usize, Vec<FoldOutcome>> = BTreeMap::new();
        let mut next = 0;
        for outcome in rx {
            buffer.entry(outcome.config).or_default().push(outcome);
            while next < pending.len() && buffer.get(&pending[next]).is_some_and(|v| v.len() == n_folds) {
                let i = pending[next];
                let mut outcomes = buffer.remove(&i).expect("checked");
                outcomes.sort_by_key(|o| o.fold);
                let record = finish_record(i, &configs[i], opts.seed, outcomes);
                append_record(&opts.log_path, &record)?;
                written.push(record);
                next += 1;
            }
        }
        Ok(())
    })?;
    Ok(written)
}

/// Lowest aggregate MAE; ties go to lower RMSE, then fewer parameters, then run_id.
pub fn select_champion(records: &[RunRecord]) -> Result<&RunRecord> {
    records
        .iter()
        .filter(|r| r.is_ok())
        .min_by(|a, b| {
            let key = |r: &RunRecord| (r.mae_m.unwrap_or(f64::INFINITY), r.rmse_m.unwrap_or(f64::INFINITY));
            let (ma, ra) = key(a);
            let (mb, rb) = key(b);
            ma.total_cmp(&mb)
                .then(ra.total_cmp(&rb))
                .then(a.param_count.cmp(&b.param_count))
                .then(a.run_id.cmp(&b.run_id))
        })
        .ok_or(Error::EmptyLog)
}

/// Successful records sorted by the champion ordering.
pub fn ranked(records: &[RunRecord]) -> Vec<&RunRecord> {
    let mut ok: Vec<&RunRecord> = records.iter().filter(|r| r.is_ok()).collect();
    ok.sort_by(|a, b| {
        a.mae_m
            .unwrap()
            .total_cmp(&b.mae_m.unwrap())
            .then(a.rmse_m.unwrap().total_cmp(&b.rmse_m.unwrap()))
            .then(a.param_count.cmp(&b.param_count))
            .then(a.run_id.cmp(&b.run_id))
    });
    ok
}

fn head_units_label(units: &[usize]) -> String {
    units.iter().map(usize::to_string).collect::<Vec<_>>().join("-")
}

/// Linear-interpolated quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn write_distribution(path: &Path, key_names: [&str; 2], groups: &BTreeMap<(usize, usize), Vec<f64>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = key_names.to_vec();
    header.extend(["runs", "min_mae_m", "q1_mae_m", "median_mae_m", "q3_mae_m", "max_mae_m", "mean_mae_m"]);
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for ((a, b), values) in groups {
        let mut v = values.clone();
        v.sort_by(f64::total_cmp);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let stats = [v[0], quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75), v[v.len() - 1], mean];
        let mut rec = vec![a.to_string(), b.to_string(), v.len().to_string()];
        rec.extend(stats.iter().map(|x| fmt_num(*x)));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        file: path.display().to_string(),
        detail: e.to_string(),
    }
}

/// Write the top-`k` runs and the two MAE distribution tables under `out_dir`.
pub fn export_runs(records: &[RunRecord], k: usize, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let ranked = ranked(records);
    if ranked.is_empty() {
        return Err(Error::EmptyLog);
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let top_path = out_dir.join(TOP_RUNS_FILE);
    let mut w = csv::Writer::from_path(&top_path).map_err(|e| csv_err(&top_path, e))?;
    w.write_record(TOP_RUNS_HEADER).map_err(|e| csv_err(&top_path, e))?;
    for r in ranked.iter().take(k) {
        let c = &r.config;
        w.write_record([
            r.run_id.clone(),
            c.rnn_type.to_string(),
            c.rnn_layers.to_string(),
            c.rnn_units.to_string(),
            c.spatial_layers.to_string(),
            c.spatial_units.to_string(),
            c.spatial_act.to_string(),
            head_units_label(&c.head_units),
            c.head_act.to_string(),
            c.look_back.to_string(),
            c.include_max15.to_string(),
            fmt_num(r.mae_m.unwrap()),
            fmt_num(r.rmse_m.unwrap()),
        ])
        .map_err(|e| csv_err(&top_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&top_path, e))?;

    let mut by_spatial: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    let mut by_head: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for r in &ranked {
        let mae = r.mae_m.unwrap();
        by_spatial.entry((r.config.rnn_layers, r.config.spatial_layers)).or_default().push(mae);
        by_head.entry((r.config.rnn_layers, r.config.head_units.len())).or_default().push(mae);
    }
    let spatial_path = out_dir.join(MAE_BY_RNN_SPATIAL_FILE);
    write_distribution(&spatial_path, ["rnn_layers", "spatial_layers"], &by_spatial)?;
    let head_path = out_dir.join(MAE_BY_RNN_HEAD_FILE);
    write_distribution(&head_path, ["rnn_layers", "head_layers"], &by_head)?;
    Ok(vec![top_path, spatial_path, head_path])
}

/// Log lines with wall-time fields removed, for comparing runs.
pub fn normalized_log(path: &Path) -> Result<Vec<serde_json::Value>> {
    read_log(path)?
        .into_iter()
        .map(|r| {
            let mut v = serde_json::to_value(&r)?;
            if let Some(obj) = v.as_object_mut() {
                obj.remove("wall_time_s");
            }
            Ok(v)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::EventScore;
    use crate::protocol::tests::small_data;

    #[test]
    fn table_v_has_1080_configs_per_setting() {
        for cell in [CellType::Lstm, CellType::Gru] {
            for lb in [1, 4] {
                for m in [true, false] {
                    assert_eq!(enumerate_grid(&GridSpec::table_v(cell, lb, m)).unwrap().len(), 1080);
                }
            }
        }
        assert_eq!(enumerate_grid(&GridSpec::full()).unwrap().len(), 8 * 1080);
    }

    #[test]
    fn presets() {
        let mini = enumerate_grid(&GridSpec::mini()).unwrap();
        assert!(mini.len() <= 24 && mini.len() >= 20, "{}", mini.len());
        assert!(mini.contains(&ArchConfig::champion()));
        assert_eq!(enumerate_grid(&GridSpec::tiny()).unwrap().len(), 2);
        assert!(GridSpec::preset("huge").is_err());
    }

    #[test]
    fn singleton_grid_and_stable_order() {
        let mut g = GridSpec::tiny();
        g.rnn_units = vec![20];
        let one = enumerate_grid(&g).unwrap();
        assert_eq!(one, vec![ArchConfig::champion()]);
        let spec = GridSpec::full();
        assert_eq!(enumerate_grid(&spec).unwrap(), enumerate_grid(&spec).unwrap());
        let mut empty = GridSpec::tiny();
        empty.spatial_acts.clear();
        assert!(enumerate_grid(&empty).is_err());
    }

    #[test]
    fn lexicographic_order() {
        let all = enumerate_grid(&GridSpec::table_v(CellType::Gru, 4, true)).unwrap();
        assert_eq!(all[0].rnn_layers, 1);
        assert_eq!(all[0].head_act, HeadActivation::Uniform(Activation::Relu));
        assert_eq!(all[1].head_act, HeadActivation::Uniform(Activation::Selu));
        assert_eq!(all[3].head_units, vec![32, 32, 1]);
        assert_eq!(all.last().unwrap().rnn_layers, 3);
    }

    fn record(id: &str, mae: Option<f64>, rmse: f64, params: usize) -> RunRecord {
        RunRecord {
            run_id: id.into(),
            index: 0,
            config: ArchConfig::champion(),
            param_count: params,
            seed: 0,
            status: if mae.is_some() { RunStatus::Ok } else { RunStatus::Failed },
            error: None,
            folds: vec![],
            mae_m: mae,
            rmse_m: mae.map(|_| rmse),
            wall_time_s: 0.0,
        }
    }

    #[test]
    fn champion_selection_rules() {
        let log = vec![record("a", Some(0.05), 0.1, 10), record("b", Some(0.03), 0.1, 10), record("c", Some(0.04), 0.1, 10)];
        assert_eq!(select_champion(&log).unwrap().run_id, "b");
        let tie = vec![record("a", Some(0.03), 0.2, 10), record("b", Some(0.03), 0.1, 99)];
        assert_eq!(select_champion(&tie).unwrap().run_id, "b");
        let params = vec![record("a", Some(0.03), 0.1, 50), record("b", Some(0.03), 0.1, 10)];
        assert_eq!(select_champion(&params).unwrap().run_id, "b");
        let failed = vec![record("a", None, 0.0, 1)];
        assert!(matches!(select_champion(&failed), Err(Error::EmptyLog)));
    }

    #[test]
    fn export_top_k_and_groups() {
        let mut log: Vec<RunRecord> = (0..10).map(|i| record(&format!("r{i}"), Some(0.1 - 0.005 * i as f64), 0.2, 10)).collect();
        log[3].config.rnn_layers = 2;
        log[4].config.head_units = vec![32, 16, 1];
        log[4].config.head_act = HeadActivation::Uniform(Activation::Relu);
        let dir = tempfile::tempdir().unwrap();
        export_runs(&log, 4, dir.path()).unwrap();
        let top = fs::read_to_string(dir.path().join(TOP_RUNS_FILE)).unwrap();
        let lines: Vec<&str> = top.lines().collect();
        assert_eq!(lines[0], TOP_RUNS_HEADER.join(","));
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("r9,"));
        export_runs(&log, 500, dir.path()).unwrap();
        let top = fs::read_to_string(dir.path().join(TOP_RUNS_FILE)).unwrap();
        assert_eq!(top.lines().count(), 11);
        let spatial = fs::read_to_string(dir.path().join(MAE_BY_RNN_SPATIAL_FILE)).unwrap();
        assert_eq!(spatial.lines().count(), 1 + 2);
        let head = fs::read_to_string(dir.path().join(MAE_BY_RNN_HEAD_FILE)).unwrap();
        assert_eq!(head.lines().count(), 1 + 3);
    }

    #[test]
    fn torn_final_line_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(RUN_LOG_FILE);
        let mut r = record("a", Some(0.1), 0.2, 3);
        r.folds = vec![FoldScore {
            fold: 0,
            validation_event: "E01".into(),
            val_mae_m: Some(0.1),
            events: vec![EventScore { event_id: "E11".into(), mae_m: 0.1, rmse_m: 0.2, n_samples: 4 }],
        }];
        append_record(&path, &r).unwrap();
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"run_id\": \"b\", \"ind").unwrap();
        let back = read_log(&path).unwrap();
        assert_eq!(back, vec![r.clone()]);
        repair_log(&path, &back).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 1);
    }

    #[test]
    fn search_counts_resume_and_recompute() {
        let ds = small_data(4, &[9, 10, 11]);
        let data = ProtocolData::from_dataset(&ds, None).unwrap();
        // Three-event toy rotation.
        let train: Vec<String> = data.plan.folds.iter().take(3).map(|f| f.validation.clone()).collect();
        let tables = train.iter().chain(&data.plan.test).map(|id| data.table(id).unwrap().clone()).collect();
        let toy = ProtocolData::new(tables, &train, &data.plan.test).unwrap();
        let configs = enumerate_grid(&GridSpec::tiny()).unwrap();
        let tc = TrainConfig { batch_size: 64, max_epochs: 3, early_stop_patience: 2, ..TrainConfig::default() };
        let dir = tempfile::tempdir().unwrap();
        let opts = SearchOptions { workers: 2, seed: 5, log_path: dir.path().join(RUN_LOG_FILE), max_new_runs: Some(1) };

        let first = run_search(&configs, &toy, &tc, &opts).unwrap();
        assert_eq!(first.len(), 1);
        let resumed = run_search(&configs, &toy, &tc, &SearchOptions { max_new_runs: None, ..opts.clone() }).unwrap();
        assert_eq!(resumed.len(), 1);
        assert_eq!(resumed[0].index, 1);
        let log = read_log(&opts.log_path).unwrap();
        assert_eq!(log.len(), 2);
        assert_eq!(log[0], first[0]);
        let trainings: usize = log.iter().map(|r| r.folds.len()).sum();
        assert_eq!(trainings, 6);
        for r in &log {
            assert!(r.is_ok(), "{:?}", r.error);
            let maes: Vec<f64> = r.folds.iter().map(|f| f.events.iter().map(|e| e.mae_m).sum::<f64>() / f.events.len() as f64).collect();
            let expected = maes.iter().sum::<f64>() / maes.len() as f64;
            assert!((r.mae_m.unwrap() - expected).abs() < 1e-12);
        }
        let again = run_search(&configs, &toy, &tc, &SearchOptions { max_new_runs: None, ..opts.clone() }).unwrap();
        assert!(again.is_empty());
    }

    #[test]
    fn worker_count_does_not_change_log() {
        let ds = small_data(4, &[9, 10, 11]);
        let data = ProtocolData::from_dataset(&ds, None).unwrap();
        let train: Vec<String> = data.plan.folds.iter().take(3).map(|f| f.validation.clone()).collect();
        let tables = train.iter().chain(&data.plan.test).map(|id| data.table(id).unwrap().clone()).collect();
        let toy = ProtocolData::new(tables, &train, &data.plan.test).unwrap();
        let configs = enumerate_grid(&GridSpec::tiny()).unwrap();
        let tc = TrainConfig { batch_size: 64, max_epochs: 3, early_stop_patience: 2, ..TrainConfig::default() };
        let dir = tempfile::tempdir().unwrap();
        let mut logs = Vec::new();
        for workers in [1, 3] {
            let path = dir.path().join(format!("w{workers}.jsonl"));
            run_search(&configs, &toy, &tc, &SearchOptions { workers, seed: 5, log_path: path.clone(), max_new_runs: None }).unwrap();
            logs.push(normalized_log(&path).unwrap());
        }
        assert_eq!(logs[0], logs[1]);
    }
}
