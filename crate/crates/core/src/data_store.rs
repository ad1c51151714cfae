//! Relational CSV storage for study areas, gauges, tide, rainfall events and
//! derived features.
//!
//! Static segment attributes live once in `segments.csv`, hourly tide once per
//! timestamp in `tide.csv`, and only the spatially and temporally varying
//! rainfall features are keyed by `(segment_id, timestamp)` in `weather.csv`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDateTime};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{self, EventFeatureTable, RainfallFeatures};

pub type Timestamp = NaiveDateTime;

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// Events no longer than this many hours are kept but never used for training.
pub const MIN_USABLE_DURATION_HRS: usize = 5;

pub const SEGMENTS_FILE: &str = "segments.csv";
pub const GAUGES_FILE: &str = "gauges.csv";
pub const RAW_RAIN_FILE: &str = "raw_rain.csv";
pub const TIDE_FILE: &str = "tide.csv";
pub const EVENTS_FILE: &str = "events.csv";
pub const WEATHER_FILE: &str = "weather.csv";
pub const DEPTHS_FILE: &str = "depths.csv";

const SEGMENTS_HEADER: &[&str] = &["segment_id", "x_m", "y_m", "street_name", "elv_m", "twi", "dtw_cm"];
const GAUGES_HEADER: &[&str] = &["gauge_id", "x_m", "y_m"];
const RAW_RAIN_HEADER: &[&str] = &["gauge_id", "timestamp", "rain_mm"];
const TIDE_HEADER: &[&str] = &["timestamp", "td_hr_m"];
const EVENTS_HEADER: &[&str] = &["event_id", "start", "end", "split"];
const WEATHER_HEADER: &[&str] = &["segment_id", "timestamp", "rh_mm", "max15_mm", "hr2_mm", "hr72_mm"];
const DEPTHS_HEADER: &[&str] = &["segment_id", "timestamp", "depth_m"];

pub fn format_timestamp(ts: &Timestamp) -> String {
    ts.format(TIMESTAMP_FORMAT).to_string()
}

pub fn parse_timestamp(s: &str) -> std::result::Result<Timestamp, chrono::ParseError> {
    NaiveDateTime::parse_from_str(s.trim(), TIMESTAMP_FORMAT)
}

/// Shortest round-tripping decimal representation; never scientific notation.
pub fn fmt_num(x: f64) -> String {
    format!("{x}")
}

mod ts_format {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ts: &Timestamp, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&format_timestamp(ts))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Timestamp, D::Error> {
        let raw = String::deserialize(d)?;
        parse_timestamp(&raw).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreetSegment {
    pub segment_id: i64,
    pub x_m: f64,
    pub y_m: f64,
    pub street_name: String,
    pub elv_m: f64,
    pub twi: f64,
    pub dtw_cm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RainGauge {
    pub gauge_id: i64,
    pub x_m: f64,
    pub y_m: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RainfallEvent {
    pub event_id: String,
    #[serde(with = "ts_format")]
    pub start: Timestamp,
    #[serde(with = "ts_format")]
    pub end: Timestamp,
    pub split: Split,
}

impl RainfallEvent {
    pub fn new(event_id: impl Into<String>, start: Timestamp, duration_hrs: usize, split: Split) -> Self {
        let end = start + Duration::hours(duration_hrs as i64 - 1);
        RainfallEvent {
            event_id: event_id.into(),
            start,
            end,
            split,
        }
    }

    /// Hours from start to end, both inclusive.
    pub fn duration_hrs(&self) -> usize {
        ((self.end - self.start).num_hours() + 1).max(0) as usize
    }

    pub fn hour(&self, index: usize) -> Timestamp {
        self.start + Duration::hours(index as i64)
    }

    pub fn hours(&self) -> impl Iterator<Item = Timestamp> + '_ {
        (0..self.duration_hrs()).map(move |h| self.hour(h))
    }

    pub fn is_usable(&self, look_back: usize) -> bool {
        self.duration_hrs() > MIN_USABLE_DURATION_HRS.max(look_back)
    }
}

/// Hourly tide levels, contiguous from `start`.
#[derive(Clone, Debug, PartialEq)]
pub struct TideSeries {
    pub start: Timestamp,
    pub td_hr_m: Vec<f64>,
}

impl TideSeries {
    pub fn timestamp(&self, hour: usize) -> Timestamp {
        self.start + Duration::hours(hour as i64)
    }

    pub fn len(&self) -> usize {
        self.td_hr_m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.td_hr_m.is_empty()
    }
}

/// Fifteen-minute rainfall for one gauge, contiguous from `start`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuarterHourRainSeries {
    pub gauge_id: i64,
    pub start: Timestamp,
    pub rain_mm: Vec<f64>,
}

impl QuarterHourRainSeries {
    pub fn timestamp(&self, quarter: usize) -> Timestamp {
        self.start + Duration::minutes(15 * quarter as i64)
    }

    pub fn len(&self) -> usize {
        self.rain_mm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rain_mm.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct StudyArea {
    pub segments: Vec<StreetSegment>,
    pub gauges: Vec<RainGauge>,
}

impl StudyArea {
    pub fn segment(&self, id: i64) -> Option<&StreetSegment> {
        self.segments.iter().find(|s| s.segment_id == id)
    }

    /// Copy restricted to the given segment ids, keeping file order.
    pub fn subset(&self, ids: &[i64]) -> StudyArea {
        let keep: HashSet<i64> = ids.iter().copied().collect();
        StudyArea {
            segments: self.segments.iter().filter(|s| keep.contains(&s.segment_id)).cloned().collect(),
            gauges: self.gauges.clone(),
        }
    }
}

/// Raw per-event inputs: one rain series per gauge plus the hourly tide.
#[derive(Clone, Debug, PartialEq)]
pub struct EventSeries {
    pub event: RainfallEvent,
    pub rain: Vec<QuarterHourRainSeries>,
    pub tide: TideSeries,
}

impl EventSeries {
    pub fn usable(&self) -> bool {
        self.event.is_usable(0)
    }
}

/// Everything the pipeline persists, in memory.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub area: StudyArea,
    pub events: Vec<EventSeries>,
    pub features: Vec<EventFeatureTable>,
}

impl Dataset {
    pub fn event(&self, event_id: &str) -> Option<&EventSeries> {
        self.events.iter().find(|e| e.event.event_id == event_id)
    }

    pub fn table(&self, event_id: &str) -> Option<&EventFeatureTable> {
        self.features.iter().find(|t| t.event_id == event_id)
    }

    pub fn event_ids(&self, split: Split) -> Vec<String> {
        self.events
            .iter()
            .filter(|e| e.event.split == split)
            .map(|e| e.event.event_id.clone())
            .collect()
    }

    /// Load every table under `dir`. `weather.csv` and `depths.csv` are optional.
    pub fn load(dir: &Path) -> Result<Dataset> {
        let mut ds = Self::load_raw(dir)?;
        let weather_path = dir.join(WEATHER_FILE);
        if weather_path.exists() {
            let depths_path = dir.join(DEPTHS_FILE);
            let depths = depths_path.exists().then_some(depths_path);
            ds.features = load_features(&weather_path, depths.as_deref(), &ds.area, &ds.events)?;
        }
        Ok(ds)
    }

    /// Segments, gauges, events, rain and tide only; no feature tables.
    pub fn load_raw(dir: &Path) -> Result<Dataset> {
        let area = load_study_area(&dir.join(SEGMENTS_FILE), &dir.join(GAUGES_FILE))?;
        let series = load_event_series(&dir.join(RAW_RAIN_FILE), &dir.join(TIDE_FILE), &dir.join(EVENTS_FILE))?;
        let order = read_events(&dir.join(EVENTS_FILE))?;
        let mut events = Vec::with_capacity(order.len());
        let mut by_id = series;
        for e in &order {
            events.push(by_id.remove(&e.event_id).expect("loaded above"));
        }
        Ok(Dataset {
            area,
            events,
            features: Vec::new(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        save_relational(&self.area, &self.events, &self.features, dir)
    }
}

fn open_reader(path: &Path, expected: &[&str]) -> Result<csv::Reader<fs::File>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    if got != expected {
        return Err(Error::SchemaMismatch {
            file: file_name(path),
            detail: format!("expected header {:?}, found {:?}", expected.join(","), got.join(",")),
        });
    }
    Ok(rdr)
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::Io(_) => match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        },
        csv::ErrorKind::UnequalLengths { .. } => Error::SchemaMismatch {
            file: file_name(path),
            detail: e.to_string(),
        },
        _ => Error::Parse {
            file: file_name(path),
            detail: e.to_string(),
        },
    }
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path, header: &[&str]) -> Result<Vec<T>> {
    let mut rdr = open_reader(path, header)?;
    rdr.deserialize().map(|r| r.map_err(|e| csv_err(path, e))).collect()
}

fn check_finite(table: &'static str, field: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteValue {
            table,
            field: field.to_string(),
        })
    }
}

pub fn load_study_area(segments_path: &Path, gauges_path: &Path) -> Result<StudyArea> {
    let segments: Vec<StreetSegment> = read_rows(segments_path, SEGMENTS_HEADER)?;
    let mut seen = HashSet::new();
    for s in &segments {
        if !seen.insert(s.segment_id) {
            return Err(Error::DuplicateId {
                table: "segments",
                id: s.segment_id.to_string(),
            });
        }
        for (field, v) in [("x_m", s.x_m), ("y_m", s.y_m), ("elv_m", s.elv_m), ("twi", s.twi), ("dtw_cm", s.dtw_cm)] {
            check_finite("segments", field, v)?;
        }
        if s.dtw_cm < 0.0 {
            return Err(Error::Parse {
                file: file_name(segments_path),
                detail: format!("segment {} has negative dtw_cm", s.segment_id),
            });
        }
    }
    let gauges: Vec<RainGauge> = read_rows(gauges_path, GAUGES_HEADER)?;
    let mut seen = HashSet::new();
    for g in &gauges {
        if !seen.insert(g.gauge_id) {
            return Err(Error::DuplicateId {
                table: "gauges",
                id: g.gauge_id.to_string(),
            });
        }
        check_finite("gauges", "x_m", g.x_m)?;
        check_finite("gauges", "y_m", g.y_m)?;
    }
    Ok(StudyArea { segments, gauges })
}

#[derive(Deserialize)]
struct RainRow {
    gauge_id: i64,
    #[serde(with = "ts_format")]
    timestamp: Timestamp,
    rain_mm: f64,
}

#[derive(Deserialize)]
struct TideRow {
    #[serde(with = "ts_format")]
    timestamp: Timestamp,
    td_hr_m: f64,
}

fn read_events(path: &Path) -> Result<Vec<RainfallEvent>> {
    let events: Vec<RainfallEvent> = read_rows(path, EVENTS_HEADER)?;
    let mut seen = HashSet::new();
    for e in &events {
        if !seen.insert(e.event_id.clone()) {
            return Err(Error::DuplicateId {
                table: "events",
                id: e.event_id.clone(),
            });
        }
        if e.end < e.start {
            return Err(Error::Parse {
                file: file_name(path),
                detail: format!("event {} ends before it starts", e.event_id),
            });
        }
    }
    Ok(events)
}

/// Load raw rain and tide and cut them to each manifest event's window.
pub fn load_event_series(
    raw_rain_path: &Path,
    tide_path: &Path,
    events_manifest_path: &Path,
) -> Result<BTreeMap<String, EventSeries>> {
    let events = read_events(events_manifest_path)?;

    let mut rain: BTreeMap<i64, HashMap<Timestamp, f64>> = BTreeMap::new();
    for row in read_rows::<RainRow>(raw_rain_path, RAW_RAIN_HEADER)? {
        check_finite("raw_rain", "rain_mm", row.rain_mm)?;
        if row.rain_mm < 0.0 {
            return Err(Error::Parse {
                file: RAW_RAIN_FILE.into(),
                detail: format!("negative rain at gauge {}", row.gauge_id),
            });
        }
        if row.timestamp.and_utc().timestamp() % 900 != 0 {
            return Err(Error::Parse {
                file: RAW_RAIN_FILE.into(),
                detail: format!("{} is off the 15-minute grid", format_timestamp(&row.timestamp)),
            });
        }
        if rain.entry(row.gauge_id).or_default().insert(row.timestamp, row.rain_mm).is_some() {
            return Err(Error::DuplicateId {
                table: "raw_rain",
                id: format!("{}@{}", row.gauge_id, format_timestamp(&row.timestamp)),
            });
        }
    }

    let mut tide: HashMap<Timestamp, f64> = HashMap::new();
    for row in read_rows::<TideRow>(tide_path, TIDE_HEADER)? {
        check_finite("tide", "td_hr_m", row.td_hr_m)?;
        if tide.insert(row.timestamp, row.td_hr_m).is_some() {
            return Err(Error::DuplicateId {
                table: "tide",
                id: format_timestamp(&row.timestamp),
            });
        }
    }

    let mut out = BTreeMap::new();
    for event in events {
        let gap = |ts: Timestamp| Error::CoverageGap {
            event_id: event.event_id.clone(),
            timestamp: format_timestamp(&ts),
        };
        let hours = event.duration_hrs();
        let mut td_hr_m = Vec::with_capacity(hours);
        for ts in event.hours() {
            td_hr_m.push(*tide.get(&ts).ok_or_else(|| gap(ts))?);
        }
        let mut series = Vec::with_capacity(rain.len());
        for (&gauge_id, readings) in &rain {
            let mut values = Vec::with_capacity(hours * 4);
            for q in 0..hours * 4 {
                let ts = event.start + Duration::minutes(15 * q as i64);
                values.push(*readings.get(&ts).ok_or_else(|| gap(ts))?);
            }
            series.push(QuarterHourRainSeries {
                gauge_id,
                start: event.start,
                rain_mm: values,
            });
        }
        let tide = TideSeries {
            start: event.start,
            td_hr_m,
        };
        out.insert(
            event.event_id.clone(),
            EventSeries {
                event,
                rain: series,
                tide,
            },
        );
    }
    Ok(out)
}

#[derive(Deserialize)]
struct WeatherRow {
    segment_id: i64,
    #[serde(with = "ts_format")]
    timestamp: Timestamp,
    rh_mm: f64,
    max15_mm: f64,
    hr2_mm: f64,
    hr72_mm: f64,
}

#[derive(Deserialize)]
struct DepthRow {
    segment_id: i64,
    #[serde(with = "ts_format")]
    timestamp: Timestamp,
    depth_m: f64,
}

/// Rebuild complete feature tables from `weather.csv` (and optionally
/// `depths.csv`), joining tide and static fields from the other tables.
pub fn load_features(
    weather_path: &Path,
    depths_path: Option<&Path>,
    area: &StudyArea,
    events: &[EventSeries],
) -> Result<Vec<EventFeatureTable>> {
    let mut weather: HashMap<(i64, Timestamp), [f64; 4]> = HashMap::new();
    for row in read_rows::<WeatherRow>(weather_path, WEATHER_HEADER)? {
        for (f, v) in [("rh_mm", row.rh_mm), ("max15_mm", row.max15_mm), ("hr2_mm", row.hr2_mm), ("hr72_mm", row.hr72_mm)] {
            check_finite("weather", f, v)?;
        }
        if area.segment(row.segment_id).is_none() {
            return Err(Error::ForeignKey(format!("weather row references unknown segment {}", row.segment_id)));
        }
        let key = (row.segment_id, row.timestamp);
        if weather.insert(key, [row.rh_mm, row.max15_mm, row.hr2_mm, row.hr72_mm]).is_some() {
            return Err(Error::DuplicateId {
                table: "weather",
                id: format!("{}@{}", row.segment_id, format_timestamp(&row.timestamp)),
            });
        }
    }
    let depths = match depths_path {
        Some(path) => read_depths(path)?,
        None => HashMap::new(),
    };

    let mut tables = Vec::new();
    for series in events {
        let event = &series.event;
        let hours = event.duration_hrs();
        let segment_ids: Vec<i64> = area
            .segments
            .iter()
            .map(|s| s.segment_id)
            .filter(|id| weather.contains_key(&(*id, event.start)))
            .collect();
        if segment_ids.is_empty() {
            continue;
        }
        let n = segment_ids.len();
        let mut cols = [
            Array2::zeros((n, hours)),
            Array2::zeros((n, hours)),
            Array2::zeros((n, hours)),
            Array2::zeros((n, hours)),
        ];
        let mut depth = Array2::zeros((n, hours));
        let mut has_depth = true;
        for (i, id) in segment_ids.iter().enumerate() {
            for (h, ts) in event.hours().enumerate() {
                let values = weather.get(&(*id, ts)).ok_or_else(|| Error::CoverageGap {
                    event_id: event.event_id.clone(),
                    timestamp: format_timestamp(&ts),
                })?;
                for (c, v) in cols.iter_mut().zip(values) {
                    c[[i, h]] = *v;
                }
                match depths.get(&(*id, ts)) {
                    Some(d) => depth[[i, h]] = *d,
                    None => has_depth = false,
                }
            }
        }
        let [rh, max15, hr2, hr72] = cols;
        let rainfall = RainfallFeatures {
            event_id: event.event_id.clone(),
            start: event.start,
            segment_ids,
            rh,
            max15,
            hr2,
            hr72,
        };
        let mut table = features::attach_static_and_tide(rainfall, &area.segments, &series.tide)?;
        if has_depth {
            table.depth = Some(depth);
        }
        tables.push(table);
    }
    Ok(tables)
}

/// Depth targets keyed by (segment, timestamp).
pub fn read_depths(path: &Path) -> Result<HashMap<(i64, Timestamp), f64>> {
    let mut depths = HashMap::new();
    for row in read_rows::<DepthRow>(path, DEPTHS_HEADER)? {
        check_finite("depths", "depth_m", row.depth_m)?;
        if depths.insert((row.segment_id, row.timestamp), row.depth_m).is_some() {
            return Err(Error::DuplicateId {
                table: "depths",
                id: format!("{}@{}", row.segment_id, format_timestamp(&row.timestamp)),
            });
        }
    }
    Ok(depths)
}

/// Fill `table.depth` when every (segment, hour) has a target; otherwise
/// leave it empty.
pub fn attach_depths(table: &mut EventFeatureTable, depths: &HashMap<(i64, Timestamp), f64>) {
    let mut depth = Array2::zeros((table.n_segments(), table.n_hours()));
    for (i, id) in table.segment_ids.iter().enumerate() {
        for h in 0..table.n_hours() {
            match depths.get(&(*id, table.timestamp(h))) {
                Some(d) => depth[[i, h]] = *d,
                None => return,
            }
        }
    }
    table.depth = Some(depth);
}

fn writer(path: &Path, header: &[&str]) -> Result<csv::Writer<fs::File>> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    Ok(w)
}

fn finish(path: &Path, mut w: csv::Writer<fs::File>) -> Result<PathBuf> {
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

/// Reject tables whose keys do not resolve before anything is written.
fn check_foreign_keys(area: &StudyArea, events: &[EventSeries], features: &[EventFeatureTable]) -> Result<()> {
    let segment_ids: HashSet<i64> = area.segments.iter().map(|s| s.segment_id).collect();
    if segment_ids.len() != area.segments.len() {
        return Err(Error::DuplicateId {
            table: "segments",
            id: "<multiple>".into(),
        });
    }
    let gauge_ids: HashSet<i64> = area.gauges.iter().map(|g| g.gauge_id).collect();
    for series in events {
        for r in &series.rain {
            if !gauge_ids.contains(&r.gauge_id) {
                return Err(Error::ForeignKey(format!(
                    "rain for event {} references unknown gauge {}",
                    series.event.event_id, r.gauge_id
                )));
            }
        }
    }
    for table in features {
        let Some(series) = events.iter().find(|e| e.event.event_id == table.event_id) else {
            return Err(Error::ForeignKey(format!("features reference unknown event {}", table.event_id)));
        };
        if table.n_hours() != series.event.duration_hrs() || table.start != series.event.start {
            return Err(Error::ForeignKey(format!(
                "features for event {} do not match its window",
                table.event_id
            )));
        }
        for id in &table.segment_ids {
            if !segment_ids.contains(id) {
                return Err(Error::ForeignKey(format!(
                    "features for event {} reference segment {} absent from segments",
                    table.event_id, id
                )));
            }
        }
    }
    Ok(())
}

/// Write every table under `out_dir`. Output is a deterministic function of
/// the inputs, so saving a loaded dataset reproduces the same bytes.
pub fn save_relational(
    area: &StudyArea,
    events: &[EventSeries],
    features: &[EventFeatureTable],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    check_foreign_keys(area, events, features)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();

    let path = out_dir.join(SEGMENTS_FILE);
    let mut w = writer(&path, SEGMENTS_HEADER)?;
    for s in &area.segments {
        w.write_record([
            s.segment_id.to_string(),
            fmt_num(s.x_m),
            fmt_num(s.y_m),
            s.street_name.clone(),
            fmt_num(s.elv_m),
            fmt_num(s.twi),
            fmt_num(s.dtw_cm),
        ])
        .map_err(|e| csv_err(&path, e))?;
    }
    written.push(finish(&path, w)?);

    let path = out_dir.join(GAUGES_FILE);
    let mut w = writer(&path, GAUGES_HEADER)?;
    for g in &area.gauges {
        w.write_record([g.gauge_id.to_string(), fmt_num(g.x_m), fmt_num(g.y_m)])
            .map_err(|e| csv_err(&path, e))?;
    }
    written.push(finish(&path, w)?);

    let mut rain: BTreeMap<(i64, Timestamp), f64> = BTreeMap::new();
    let mut tide: BTreeMap<Timestamp, f64> = BTreeMap::new();
    for series in events {
        for r in &series.rain {
            for (q, v) in r.rain_mm.iter().enumerate() {
                insert_consistent(&mut rain, (r.gauge_id, r.timestamp(q)), *v, "raw_rain")?;
            }
        }
        for (h, v) in series.tide.td_hr_m.iter().enumerate() {
            insert_consistent(&mut tide, series.tide.timestamp(h), *v, "tide")?;
        }
    }

    let path = out_dir.join(RAW_RAIN_FILE);
    let mut w = writer(&path, RAW_RAIN_HEADER)?;
    for ((gauge, ts), v) in &rain {
        w.write_record([gauge.to_string(), format_timestamp(ts), fmt_num(*v)])
            .map_err(|e| csv_err(&path, e))?;
    }
    written.push(finish(&path, w)?);

    let path = out_dir.join(TIDE_FILE);
    let mut w = writer(&path, TIDE_HEADER)?;
    for (ts, v) in &tide {
        w.write_record([format_timestamp(ts), fmt_num(*v)]).map_err(|e| csv_err(&path, e))?;
    }
    written.push(finish(&path, w)?);

    let path = out_dir.join(EVENTS_FILE);
    let mut w = writer(&path, EVENTS_HEADER)?;
    for series in events {
        let e = &series.event;
        w.write_record([
            e.event_id.clone(),
            format_timestamp(&e.start),
            format_timestamp(&e.end),
            e.split.as_str().to_string(),
        ])
        .map_err(|e| csv_err(&path, e))?;
    }
    written.push(finish(&path, w)?);

    if !features.is_empty() {
        written.push(write_weather(&out_dir.join(WEATHER_FILE), features)?);
    }

    if features.iter().any(|t| t.depth.is_some()) {
        write_depths(&out_dir.join(DEPTHS_FILE), features)?;
        written.push(out_dir.join(DEPTHS_FILE));
    }
    Ok(written)
}

pub fn write_weather(path: &Path, features: &[EventFeatureTable]) -> Result<PathBuf> {
    let mut w = writer(path, WEATHER_HEADER)?;
    for table in features {
        for (i, id) in table.segment_ids.iter().enumerate() {
            for h in 0..table.n_hours() {
                w.write_record([
                    id.to_string(),
                    format_timestamp(&table.timestamp(h)),
                    fmt_num(table.rh[[i, h]]),
                    fmt_num(table.max15[[i, h]]),
                    fmt_num(table.hr2[[i, h]]),
                    fmt_num(table.hr72[[i, h]]),
                ])
                .map_err(|e| csv_err(path, e))?;
            }
        }
    }
    finish(path, w)
}

pub fn write_depths(path: &Path, features: &[EventFeatureTable]) -> Result<()> {
    let mut w = writer(path, DEPTHS_HEADER)?;
    for table in features {
        let Some(depth) = &table.depth else { continue };
        for (i, id) in table.segment_ids.iter().enumerate() {
            for h in 0..table.n_hours() {
                w.write_record([id.to_string(), format_timestamp(&table.timestamp(h)), fmt_num(depth[[i, h]])])
                    .map_err(|e| csv_err(path, e))?;
            }
        }
    }
    finish(path, w).map(|_| ())
}

fn insert_consistent<K: Ord + Clone>(map: &mut BTreeMap<K, f64>, key: K, value: f64, table: &'static str) -> Result<()> {
    match map.get(&key) {
        Some(existing) if existing.to_bits() != value.to_bits() => Err(Error::ForeignKey(format!(
            "conflicting {table} values for a shared timestamp"
        ))),
        Some(_) => Ok(()),
        None => {
            map.insert(key, value);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        let mut f = fs::File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    fn ts(s: &str) -> Timestamp {
        parse_timestamp(s).unwrap()
    }

    #[test]
    fn loads_six_segments_preserving_ids() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::from("segment_id,x_m,y_m,street_name,elv_m,twi,dtw_cm\n");
        for id in [4, 8, 15, 16, 23, 42] {
            body.push_str(&format!("{id},1.5,2.5,Main St,1.25,6.0,30\n"));
        }
        let seg = write(dir.path(), "segments.csv", &body);
        let gau = write(dir.path(), "gauges.csv", "gauge_id,x_m,y_m\n1,0,0\n");
        let area = load_study_area(&seg, &gau).unwrap();
        let ids: Vec<i64> = area.segments.iter().map(|s| s.segment_id).collect();
        assert_eq!(ids, vec![4, 8, 15, 16, 23, 42]);
        assert_eq!(area.gauges.len(), 1);
    }

    #[test]
    fn duplicate_segment_id_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let seg = write(
            dir.path(),
            "segments.csv",
            "segment_id,x_m,y_m,street_name,elv_m,twi,dtw_cm\n3,0,0,A,1,1,1\n3,1,1,B,1,1,1\n",
        );
        let gau = write(dir.path(), "gauges.csv", "gauge_id,x_m,y_m\n1,0,0\n");
        assert!(matches!(load_study_area(&seg, &gau), Err(Error::DuplicateId { .. })));
    }

    #[test]
    fn schema_and_missing_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let seg = write(dir.path(), "segments.csv", "segment_id,x,y\n1,0,0\n");
        let gau = write(dir.path(), "gauges.csv", "gauge_id,x_m,y_m\n1,0,0\n");
        assert!(matches!(load_study_area(&seg, &gau), Err(Error::SchemaMismatch { .. })));
        let missing = dir.path().join("nope.csv");
        assert!(matches!(load_study_area(&missing, &gau), Err(Error::MissingFile(_))));
        let seg = write(
            dir.path(),
            "segments.csv",
            "segment_id,x_m,y_m,street_name,elv_m,twi,dtw_cm\n1,0,0,A,NaN,1,1\n",
        );
        assert!(matches!(load_study_area(&seg, &gau), Err(Error::NonFiniteValue { .. })));
    }

    fn write_event_files(dir: &Path, hours: usize, skip_tide_hour: Option<usize>, duration_in_manifest: usize) {
        let start = ts("2016-06-05T00:00:00");
        let mut rain = String::from("gauge_id,timestamp,rain_mm\n");
        for g in [1, 2] {
            for q in 0..hours * 4 {
                let t = start + Duration::minutes(15 * q as i64);
                rain.push_str(&format!("{g},{},0.5\n", format_timestamp(&t)));
            }
        }
        let mut tide = String::from("timestamp,td_hr_m\n");
        for h in 0..hours {
            if Some(h) == skip_tide_hour {
                continue;
            }
            tide.push_str(&format!("{},0.1\n", format_timestamp(&(start + Duration::hours(h as i64)))));
        }
        let end = start + Duration::hours(duration_in_manifest as i64 - 1);
        let events = format!(
            "event_id,start,end,split\nE1,{},{},train\n",
            format_timestamp(&start),
            format_timestamp(&end)
        );
        write(dir, "raw_rain.csv", &rain);
        write(dir, "tide.csv", &tide);
        write(dir, "events.csv", &events);
    }

    #[test]
    fn event_series_trimmed_to_window() {
        let dir = tempfile::tempdir().unwrap();
        write_event_files(dir.path(), 30, None, 28);
        let p = dir.path();
        let ev = load_event_series(&p.join("raw_rain.csv"), &p.join("tide.csv"), &p.join("events.csv")).unwrap();
        let e = &ev["E1"];
        assert_eq!(e.event.duration_hrs(), 28);
        assert_eq!(e.tide.len(), 28);
        assert_eq!(e.rain.len(), 2);
        assert!(e.rain.iter().all(|r| r.len() == 112));
    }

    #[test]
    fn missing_tide_hour_is_coverage_gap() {
        let dir = tempfile::tempdir().unwrap();
        write_event_files(dir.path(), 28, Some(7), 28);
        let p = dir.path();
        let r = load_event_series(&p.join("raw_rain.csv"), &p.join("tide.csv"), &p.join("events.csv"));
        assert!(matches!(r, Err(Error::CoverageGap { .. })));
    }

    #[test]
    fn five_hour_event_loads_but_is_unusable() {
        let dir = tempfile::tempdir().unwrap();
        write_event_files(dir.path(), 5, None, 5);
        let p = dir.path();
        let ev = load_event_series(&p.join("raw_rain.csv"), &p.join("tide.csv"), &p.join("events.csv")).unwrap();
        let e = &ev["E1"].event;
        assert_eq!(e.duration_hrs(), 5);
        assert!(!e.is_usable(4));
        assert!(!ev["E1"].usable());
        let longer = RainfallEvent::new("E2", e.start, 28, Split::Train);
        assert!(longer.is_usable(4));
    }
}
