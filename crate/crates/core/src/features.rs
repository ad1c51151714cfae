//! Model inputs derived from gauge, tide and terrain data: hourly rainfall
//! aggregates, inverse-distance interpolation onto segments, and standard
//! scaling fitted on training events.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use chrono::Duration;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data_store::{format_timestamp, QuarterHourRainSeries, RainGauge, RainfallEvent, StreetSegment, TideSeries, Timestamp};
use crate::error::{Error, Result};

pub const DEFAULT_IDW_POWER: f64 = 2.0;

/// Distances below this snap to the gauge value.
const COINCIDENT_M: f64 = 1e-9;

/// Hours summed by the long cumulative rainfall window.
const LONG_WINDOW_HRS: usize = 72;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Feature {
    #[serde(rename = "RH")]
    Rh,
    #[serde(rename = "MAX15")]
    Max15,
    #[serde(rename = "HR_2")]
    Hr2,
    #[serde(rename = "HR_72")]
    Hr72,
    #[serde(rename = "TD_HR")]
    TdHr,
    #[serde(rename = "ELV")]
    Elv,
    #[serde(rename = "TWI")]
    Twi,
    #[serde(rename = "DTW")]
    Dtw,
}

impl Feature {
    pub const ALL: [Feature; 8] = [
        Feature::Rh,
        Feature::Max15,
        Feature::Hr2,
        Feature::Hr72,
        Feature::TdHr,
        Feature::Elv,
        Feature::Twi,
        Feature::Dtw,
    ];

    pub const SPATIAL: [Feature; 3] = [Feature::Elv, Feature::Twi, Feature::Dtw];

    /// Temporal inputs of the recurrent branch, in column order.
    pub fn temporal(include_max15: bool) -> Vec<Feature> {
        let mut f = vec![Feature::Rh, Feature::Hr2, Feature::Hr72, Feature::TdHr];
        if include_max15 {
            f.push(Feature::Max15);
        }
        f
    }

    /// Everything a model with this temporal set consumes.
    pub fn model_inputs(include_max15: bool) -> Vec<Feature> {
        let mut f = Self::temporal(include_max15);
        f.extend(Self::SPATIAL);
        f
    }

    pub fn name(&self) -> &'static str {
        match self {
            Feature::Rh => "RH",
            Feature::Max15 => "MAX15",
            Feature::Hr2 => "HR_2",
            Feature::Hr72 => "HR_72",
            Feature::TdHr => "TD_HR",
            Feature::Elv => "ELV",
            Feature::Twi => "TWI",
            Feature::Dtw => "DTW",
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Feature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Feature::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown feature {s}")))
    }
}

/// Interpolated rainfall columns for one event, `[segment, hour]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RainfallFeatures {
    pub event_id: String,
    pub start: Timestamp,
    pub segment_ids: Vec<i64>,
    pub rh: Array2<f64>,
    pub max15: Array2<f64>,
    pub hr2: Array2<f64>,
    pub hr72: Array2<f64>,
}

/// All eight inputs for every (segment, hour) of one event, plus the optional
/// target depth. Per-hour columns are `[segment, hour]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EventFeatureTable {
    pub event_id: String,
    pub start: Timestamp,
    pub segment_ids: Vec<i64>,
    pub rh: Array2<f64>,
    pub max15: Array2<f64>,
    pub hr2: Array2<f64>,
    pub hr72: Array2<f64>,
    pub td_hr: Vec<f64>,
    pub elv: Vec<f64>,
    pub twi: Vec<f64>,
    pub dtw: Vec<f64>,
    pub depth: Option<Array2<f64>>,
}

impl EventFeatureTable {
    pub fn n_segments(&self) -> usize {
        self.segment_ids.len()
    }

    pub fn n_hours(&self) -> usize {
        self.td_hr.len()
    }

    pub fn n_rows(&self) -> usize {
        self.n_segments() * self.n_hours()
    }

    pub fn timestamp(&self, hour: usize) -> Timestamp {
        self.start + Duration::hours(hour as i64)
    }

    /// Value of `feature` for segment row `seg` at hour `hour`.
    #[inline]
    pub fn value(&self, feature: Feature, seg: usize, hour: usize) -> f64 {
        match feature {
            Feature::Rh => self.rh[[seg, hour]],
            Feature::Max15 => self.max15[[seg, hour]],
            Feature::Hr2 => self.hr2[[seg, hour]],
            Feature::Hr72 => self.hr72[[seg, hour]],
            Feature::TdHr => self.td_hr[hour],
            Feature::Elv => self.elv[seg],
            Feature::Twi => self.twi[seg],
            Feature::Dtw => self.dtw[seg],
        }
    }

    /// Restrict to the given segments (in this table's order).
    pub fn select_segments(&self, ids: &[i64]) -> EventFeatureTable {
        let rows: Vec<usize> = self
            .segment_ids
            .iter()
            .enumerate()
            .filter(|(_, id)| ids.contains(id))
            .map(|(i, _)| i)
            .collect();
        let pick2 = |a: &Array2<f64>| a.select(ndarray::Axis(0), &rows);
        let pick1 = |v: &[f64]| rows.iter().map(|&i| v[i]).collect::<Vec<_>>();
        EventFeatureTable {
            event_id: self.event_id.clone(),
            start: self.start,
            segment_ids: rows.iter().map(|&i| self.segment_ids[i]).collect(),
            rh: pick2(&self.rh),
            max15: pick2(&self.max15),
            hr2: pick2(&self.hr2),
            hr72: pick2(&self.hr72),
            td_hr: self.td_hr.clone(),
            elv: pick1(&self.elv),
            twi: pick1(&self.twi),
            dtw: pick1(&self.dtw),
            depth: self.depth.as_ref().map(pick2),
        }
    }

    fn map_feature(&mut self, feature: Feature, f: impl Fn(f64) -> f64) {
        match feature {
            Feature::Rh => self.rh.mapv_inplace(f),
            Feature::Max15 => self.max15.mapv_inplace(f),
            Feature::Hr2 => self.hr2.mapv_inplace(f),
            Feature::Hr72 => self.hr72.mapv_inplace(f),
            Feature::TdHr => self.td_hr.iter_mut().for_each(|v| *v = f(*v)),
            Feature::Elv => self.elv.iter_mut().for_each(|v| *v = f(*v)),
            Feature::Twi => self.twi.iter_mut().for_each(|v| *v = f(*v)),
            Feature::Dtw => self.dtw.iter_mut().for_each(|v| *v = f(*v)),
        }
    }
}

enum IdwWeights {
    Exact(usize),
    Normalized(Vec<f64>),
}

fn idw_weights(sources: &[(f64, f64)], target: (f64, f64), power: f64) -> Result<IdwWeights> {
    if sources.is_empty() {
        return Err(Error::NoGauges);
    }
    let mut w = Vec::with_capacity(sources.len());
    for (i, (x, y)) in sources.iter().enumerate() {
        let d = (x - target.0).hypot(y - target.1);
        if d < COINCIDENT_M {
            return Ok(IdwWeights::Exact(i));
        }
        w.push(d.powf(-power));
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    Ok(IdwWeights::Normalized(w))
}

impl IdwWeights {
    fn apply(&self, values: impl Fn(usize) -> f64) -> f64 {
        match self {
            IdwWeights::Exact(i) => values(*i),
            IdwWeights::Normalized(w) => w.iter().enumerate().map(|(i, wi)| wi * values(i)).sum(),
        }
    }
}

/// Inverse-distance-weighted estimate at `target` from `(x_m, y_m, value)`
/// samples. A target within 1e-9 m of a sample returns that sample's value.
pub fn idw_interpolate(gauge_values: &[(f64, f64, f64)], target: (f64, f64), power: f64) -> Result<f64> {
    if !(power > 0.0) {
        return Err(Error::ConfigInvalid(format!("idw power must be positive, got {power}")));
    }
    let xy: Vec<(f64, f64)> = gauge_values.iter().map(|g| (g.0, g.1)).collect();
    let weights = idw_weights(&xy, target, power)?;
    Ok(weights.apply(|i| gauge_values[i].2))
}

/// Hourly aggregates for one gauge: `[RH, MAX15, HR_2, HR_72]` per hour.
/// Cumulative windows include the current hour; hours before the event start
/// count as dry.
pub fn gauge_hourly_features(quarters: &[f64], hours: usize) -> Vec<[f64; 4]> {
    let rh: Vec<f64> = (0..hours).map(|h| quarters[4 * h..4 * h + 4].iter().sum()).collect();
    let mut out = Vec::with_capacity(hours);
    for h in 0..hours {
        let max15 = quarters[4 * h..4 * h + 4].iter().copied().fold(0.0, f64::max);
        let hr2 = rh[h] + if h >= 1 { rh[h - 1] } else { 0.0 };
        let lo = (h + 1).saturating_sub(LONG_WINDOW_HRS);
        let hr72: f64 = rh[lo..=h].iter().sum();
        out.push([rh[h], max15, hr2, hr72]);
    }
    out
}

/// Per-gauge hourly aggregates interpolated onto every segment.
pub fn derive_rainfall_features(
    rain: &[QuarterHourRainSeries],
    segments: &[StreetSegment],
    gauges: &[RainGauge],
    event: &RainfallEvent,
    idw_power: f64,
) -> Result<RainfallFeatures> {
    if rain.is_empty() {
        return Err(Error::NoGauges);
    }
    if !(idw_power > 0.0) {
        return Err(Error::ConfigInvalid(format!("idw power must be positive, got {idw_power}")));
    }
    let hours = event.duration_hrs();
    let mut xy = Vec::with_capacity(rain.len());
    let mut per_gauge = Vec::with_capacity(rain.len());
    for series in rain {
        let gauge = gauges
            .iter()
            .find(|g| g.gauge_id == series.gauge_id)
            .ok_or_else(|| Error::ForeignKey(format!("rain series for unknown gauge {}", series.gauge_id)))?;
        if series.start > event.start {
            return Err(Error::CoverageGap {
                event_id: event.event_id.clone(),
                timestamp: format_timestamp(&event.start),
            });
        }
        let offset_min = (event.start - series.start).num_minutes();
        if offset_min % 15 != 0 {
            return Err(Error::CoverageGap {
                event_id: event.event_id.clone(),
                timestamp: format_timestamp(&event.start),
            });
        }
        let offset = (offset_min / 15) as usize;
        if series.len() < offset + 4 * hours {
            return Err(Error::CoverageGap {
                event_id: event.event_id.clone(),
                timestamp: format_timestamp(&series.timestamp(series.len())),
            });
        }
        xy.push((gauge.x_m, gauge.y_m));
        per_gauge.push(gauge_hourly_features(&series.rain_mm[offset..offset + 4 * hours], hours));
    }

    let n = segments.len();
    let mut cols = [
        Array2::zeros((n, hours)),
        Array2::zeros((n, hours)),
        Array2::zeros((n, hours)),
        Array2::zeros((n, hours)),
    ];
    for (i, seg) in segments.iter().enumerate() {
        let weights = idw_weights(&xy, (seg.x_m, seg.y_m), idw_power)?;
        for h in 0..hours {
            for (k, col) in cols.iter_mut().enumerate() {
                col[[i, h]] = weights.apply(|g| per_gauge[g][h][k]);
            }
        }
    }
    let [rh, max15, hr2, hr72] = cols;
    Ok(RainfallFeatures {
        event_id: event.event_id.clone(),
        start: event.start,
        segment_ids: segments.iter().map(|s| s.segment_id).collect(),
        rh,
        max15,
        hr2,
        hr72,
    })
}

/// Join tide (by hour) and static terrain fields (by segment) onto the
/// rainfall columns.
pub fn attach_static_and_tide(
    rainfall: RainfallFeatures,
    segments: &[StreetSegment],
    tide: &TideSeries,
) -> Result<EventFeatureTable> {
    let hours = rainfall.rh.ncols();
    let offset = (rainfall.start - tide.start).num_hours();
    if rainfall.start < tide.start || tide.start + Duration::hours(offset) != rainfall.start {
        return Err(Error::MissingTide(format_timestamp(&rainfall.start)));
    }
    let offset = offset as usize;
    let mut td_hr = Vec::with_capacity(hours);
    for h in 0..hours {
        let v = tide
            .td_hr_m
            .get(offset + h)
            .ok_or_else(|| Error::MissingTide(format_timestamp(&(rainfall.start + Duration::hours(h as i64)))))?;
        td_hr.push(*v);
    }
    let by_id: BTreeMap<i64, &StreetSegment> = segments.iter().map(|s| (s.segment_id, s)).collect();
    let mut elv = Vec::with_capacity(rainfall.segment_ids.len());
    let mut twi = Vec::with_capacity(rainfall.segment_ids.len());
    let mut dtw = Vec::with_capacity(rainfall.segment_ids.len());
    for id in &rainfall.segment_ids {
        let s = by_id.get(id).ok_or(Error::UnknownSegment(*id))?;
        elv.push(s.elv_m);
        twi.push(s.twi);
        dtw.push(s.dtw_cm);
    }
    Ok(EventFeatureTable {
        event_id: rainfall.event_id,
        start: rainfall.start,
        segment_ids: rainfall.segment_ids,
        rh: rainfall.rh,
        max15: rainfall.max15,
        hr2: rainfall.hr2,
        hr72: rainfall.hr72,
        td_hr,
        elv,
        twi,
        dtw,
        depth: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: f64,
    pub std: f64,
}

/// Per-feature standardization fitted on training rows. Serializes as
/// `{feature: {mean, std}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Scaler {
    pub stats: BTreeMap<Feature, FeatureStats>,
}

impl Scaler {
    /// Stable hash of the fitted statistics, used to match batches to models.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (f, s) in &self.stats {
            f.hash(&mut h);
            s.mean.to_bits().hash(&mut h);
            s.std.to_bits().hash(&mut h);
        }
        h.finish()
    }

    pub fn features(&self) -> Vec<Feature> {
        self.stats.keys().copied().collect()
    }

    pub fn transform_value(&self, feature: Feature, x: f64) -> f64 {
        match self.stats.get(&feature) {
            Some(s) => (x - s.mean) / s.std,
            None => x,
        }
    }

    pub fn inverse_value(&self, feature: Feature, z: f64) -> f64 {
        match self.stats.get(&feature) {
            Some(s) => z * s.std + s.mean,
            None => z,
        }
    }

    /// Undo [`apply_scaler`].
    pub fn inverse(&self, table: &EventFeatureTable) -> EventFeatureTable {
        let mut out = table.clone();
        for (f, s) in &self.stats {
            let s = *s;
            out.map_feature(*f, move |z| z * s.std + s.mean);
        }
        out
    }
}

/// Fit means and population standard deviations over every (segment, hour)
/// row of the given training tables.
pub fn fit_scaler(training: &[&EventFeatureTable], feature_set: &[Feature]) -> Result<Scaler> {
    let rows: usize = training.iter().map(|t| t.n_rows()).sum();
    if rows == 0 {
        return Err(Error::EmptyInput);
    }
    let mut stats = BTreeMap::new();
    for &feature in feature_set {
        let mut sum = 0.0;
        for t in training {
            for i in 0..t.n_segments() {
                for h in 0..t.n_hours() {
                    sum += t.value(feature, i, h);
                }
            }
        }
        let mean = sum / rows as f64;
        let mut ss = 0.0;
        for t in training {
            for i in 0..t.n_segments() {
                for h in 0..t.n_hours() {
                    let d = t.value(feature, i, h) - mean;
                    ss += d * d;
                }
            }
        }
        let std = (ss / rows as f64).sqrt();
        if !(std > 1e-12 * mean.abs().max(1.0)) || !std.is_finite() {
            return Err(Error::DegenerateFeature(feature.to_string()));
        }
        stats.insert(feature, FeatureStats { mean, std });
    }
    Ok(Scaler { stats })
}

/// Standardize every scaler feature; the target depth is left in meters.
pub fn apply_scaler(scaler: &Scaler, table: &EventFeatureTable) -> EventFeatureTable {
    let mut out = table.clone();
    for (f, s) in &scaler.stats {
        let s = *s;
        out.map_feature(*f, move |x| (x - s.mean) / s.std);
    }
    out
}
