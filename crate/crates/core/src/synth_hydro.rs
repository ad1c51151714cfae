//! Deterministic synthetic study areas, storms, and ground-truth depths.
//!
//! The depth oracle is a per-segment leaky rainfall accumulator plus a tide
//! overtopping term and terrain offsets:
//!
//! ```text
//! S(t)     = retention * S(t-1) + RH(t),  S(-1) = 0
//! depth(t) = max(0, rain_gain*S(t) + twi_gain*TWI' + tide_gain*max(0, TD_HR(t) - ELV) - dtw_gain*DTW')
//! ```
//!
//! where `TWI'` and `DTW'` are min-max normalized over the whole area. It is
//! a learnable stand-in for a hydraulic model, not a physical one.

use std::f64::consts::PI;

use chrono::{Duration, NaiveDate};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data_store::{
    Dataset, EventSeries, QuarterHourRainSeries, RainGauge, RainfallEvent, Split, StreetSegment, StudyArea, TideSeries,
};
use crate::error::{Error, Result};
use crate::features::{self, EventFeatureTable};
use crate::seed;

pub const MAX_ELEVATION_M: f64 = 12.5;
pub const TIDAL_PERIOD_HRS: f64 = 12.42;
pub const MIN_EVENT_HRS: u32 = 6;
/// Hours of forced dry weather at each end of a generated event.
pub const DRY_MARGIN_HRS: usize = 2;

const STREETS: [&str; 12] = [
    "Granby St", "Colley Ave", "Hampton Blvd", "Brambleton Ave", "Tidewater Dr", "Monticello Ave",
    "Olney Rd", "Boush St", "Princess Anne Rd", "Church St", "Llewellyn Ave", "Willoughby Ave",
];

/// Durations and splits of the reference storm roster (16 usable events).
pub const REFERENCE_ROSTER: [(usize, Split); 16] = [
    (28, Split::Train),
    (34, Split::Train),
    (16, Split::Train),
    (28, Split::Train),
    (60, Split::Train),
    (37, Split::Train),
    (23, Split::Train),
    (22, Split::Train),
    (34, Split::Train),
    (25, Split::Train),
    (29, Split::Test),
    (24, Split::Test),
    (26, Split::Test),
    (37, Split::Train),
    (11, Split::Train),
    (24, Split::Test),
];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticArea {
    pub area: StudyArea,
    pub seed: u64,
    pub bounds_m: (f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleParams {
    pub retention: f64,
    pub rain_gain: f64,
    pub twi_gain: f64,
    pub tide_gain: f64,
    pub dtw_gain: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        OracleParams {
            retention: 0.6,
            rain_gain: 0.004,
            twi_gain: 0.02,
            tide_gain: 0.5,
            dtw_gain: 0.03,
        }
    }
}

impl OracleParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.retention, self.rain_gain, self.twi_gain, self.tide_gain, self.dtw_gain];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("non-finite oracle parameter".into()));
        }
        if !(self.retention > 0.0 && self.retention < 1.0) {
            return Err(Error::InvalidParams(format!("retention {} outside (0, 1)", self.retention)));
        }
        if all[1..].iter().any(|v| *v < 0.0) {
            return Err(Error::InvalidParams("gains must be non-negative".into()));
        }
        Ok(())
    }
}

/// Sum of cosine waves with positive weights summing to one, so values lie in [-1, 1].
struct SmoothField {
    waves: Vec<(f64, f64, f64, f64)>, // weight, kx, ky (rad/m), phase
}

impl SmoothField {
    fn random(rng: &mut impl Rng, bounds: (f64, f64), n_waves: usize, max_cycles: f64) -> Self {
        let mut waves: Vec<_> = (0..n_waves)
            .map(|_| {
                let w: f64 = rng.gen_range(0.2..1.0);
                let cx: f64 = rng.gen_range(-max_cycles..max_cycles);
                let cy: f64 = rng.gen_range(-max_cycles..max_cycles);
                let phase = rng.gen_range(0.0..2.0 * PI);
                (w, 2.0 * PI * cx / bounds.0, 2.0 * PI * cy / bounds.1, phase)
            })
            .collect();
        let total: f64 = waves.iter().map(|w| w.0).sum();
        waves.iter_mut().for_each(|w| w.0 /= total);
        SmoothField { waves }
    }

    fn value(&self, x: f64, y: f64) -> f64 {
        self.waves.iter().map(|(w, kx, ky, p)| w * (kx * x + ky * y + p).cos()).sum::<f64>().clamp(-1.0, 1.0)
    }

    fn gradient(&self, x: f64, y: f64) -> (f64, f64) {
        self.waves.iter().fold((0.0, 0.0), |(gx, gy), (w, kx, ky, p)| {
            let s = -w * (kx * x + ky * y + p).sin();
            (gx + s * kx, gy + s * ky)
        })
    }
}

pub fn gen_study_area(n_segments: usize, n_gauges: usize, bounds_m: (f64, f64), seed: u64) -> Result<SyntheticArea> {
    if n_segments < 1 {
        return Err(Error::InvalidCount("n_segments must be at least 1".into()));
    }
    if n_gauges < 1 {
        return Err(Error::InvalidCount("n_gauges must be at least 1".into()));
    }
    if !(bounds_m.0 > 0.0 && bounds_m.1 > 0.0) || !bounds_m.0.is_finite() || !bounds_m.1.is_finite() {
        return Err(Error::InvalidCount(format!("bounds must be positive, got {bounds_m:?}")));
    }
    let mut rng = seed::rng(seed::derive(seed, 1, 0));
    let terrain = SmoothField::random(&mut rng, bounds_m, 6, 2.0);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");

    let mut segments = Vec::with_capacity(n_segments);
    for i in 0..n_segments {
        let x = rng.gen_range(0.0..bounds_m.0);
        let y = rng.gen_range(0.0..bounds_m.1);
        // u in [0, 1]; squaring skews the area toward low ground.
        let u = 0.5 * (terrain.value(x, y) + 1.0);
        let elv = MAX_ELEVATION_M * u * u;
        let (gx, gy) = terrain.gradient(x, y);
        let slope = MAX_ELEVATION_M * u * gx.hypot(gy);
        let twi = (30.0 / (slope + 0.002)).ln() - 0.08 * elv + 0.3 * noise.sample(&mut rng);
        let dtw = (45.0 * elv + 25.0 * noise.sample(&mut rng)).max(0.0);
        let street = STREETS[rng.gen_range(0..STREETS.len())];
        segments.push(StreetSegment {
            segment_id: i as i64 + 1,
            x_m: x,
            y_m: y,
            street_name: street.to_string(),
            elv_m: elv,
            twi,
            dtw_cm: dtw,
        });
    }
    let gauges = (0..n_gauges)
        .map(|j| RainGauge {
            gauge_id: j as i64 + 1,
            x_m: rng.gen_range(0.0..bounds_m.0),
            y_m: rng.gen_range(0.0..bounds_m.1),
        })
        .collect();
    Ok(SyntheticArea {
        area: StudyArea { segments, gauges },
        seed,
        bounds_m,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TideParams {
    pub amplitude_m: f64,
    pub offset_m: f64,
    pub phase_hr: f64,
}

impl TideParams {
    /// Tide level `hours` after the event start.
    pub fn level(&self, hours: f64) -> f64 {
        self.offset_m + self.amplitude_m * (2.0 * PI * (hours + self.phase_hr) / TIDAL_PERIOD_HRS).sin()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedEvent {
    pub series: EventSeries,
    pub tide_params: TideParams,
}

#[derive(Clone, Copy, Debug)]
struct Pulse {
    amplitude: f64,
    center_hr: f64,
    width_hr: f64,
}

/// Storm rainfall at every gauge plus tide over `event`'s window.
pub fn gen_event(area: &SyntheticArea, event: &RainfallEvent, peak_intensity_mm: f64, seed: u64) -> Result<GeneratedEvent> {
    let hours = event.duration_hrs();
    if hours < MIN_EVENT_HRS as usize {
        return Err(Error::InvalidDuration(hours as u32));
    }
    if !(peak_intensity_mm >= 0.0) || !peak_intensity_mm.is_finite() {
        return Err(Error::InvalidParams(format!("peak intensity {peak_intensity_mm}")));
    }
    let mut rng = seed::rng(seed::derive(seed, 2, 0));

    let wet_start = DRY_MARGIN_HRS as f64;
    let wet_end = (hours - DRY_MARGIN_HRS) as f64;
    let n_pulses = rng.gen_range(1..=3usize);
    let pulses: Vec<Pulse> = (0..n_pulses)
        .map(|p| {
            let width_hr = rng.gen_range(1.2..3.0);
            let lo = (wet_start + width_hr).min(0.5 * (wet_start + wet_end));
            let hi = (wet_end - width_hr).max(lo + 1e-6);
            Pulse {
                amplitude: if p == 0 { peak_intensity_mm } else { peak_intensity_mm * rng.gen_range(0.3..1.0) },
                center_hr: rng.gen_range(lo..hi),
                width_hr,
            }
        })
        .collect();

    // Spatial structure: amplitude multiplier in [0.6, 1.4] and a small
    // arrival delay along the storm track.
    let amp_field = SmoothField::random(&mut rng, area.bounds_m, 3, 1.0);
    let heading = rng.gen_range(0.0..2.0 * PI);
    let speed_m_per_hr = rng.gen_range(15_000.0..30_000.0);

    let n_quarters = 4 * hours;
    let rain = area
        .area
        .gauges
        .iter()
        .map(|g| {
            let gain = 1.0 + 0.4 * amp_field.value(g.x_m, g.y_m);
            let delay = (g.x_m * heading.cos() + g.y_m * heading.sin()) / speed_m_per_hr;
            let rain_mm = (0..n_quarters)
                .map(|q| {
                    if q < 4 * DRY_MARGIN_HRS || q >= n_quarters - 4 * DRY_MARGIN_HRS {
                        return 0.0;
                    }
                    let t = (q as f64 + 0.5) / 4.0 - delay;
                    let rate: f64 = pulses
                        .iter()
                        .map(|p| p.amplitude * (-0.5 * ((t - p.center_hr) / p.width_hr).powi(2)).exp())
                        .sum();
                    // mm per quarter hour, rounded to gauge resolution
                    (gain * rate / 4.0 * 100.0).round() / 100.0
                })
                .collect();
            QuarterHourRainSeries {
                gauge_id: g.gauge_id,
                start: event.start,
                rain_mm,
            }
        })
        .collect();

    let tide_params = TideParams {
        amplitude_m: rng.gen_range(0.3..0.6),
        offset_m: rng.gen_range(0.1..0.4),
        phase_hr: rng.gen_range(0.0..TIDAL_PERIOD_HRS),
    };
    let tide = TideSeries {
        start: event.start,
        td_hr_m: (0..hours).map(|h| tide_params.level(h as f64)).collect(),
    };
    Ok(GeneratedEvent {
        series: EventSeries {
            event: event.clone(),
            rain,
            tide,
        },
        tide_params,
    })
}

fn min_max_normalize(values: &[f64]) -> impl Fn(f64) -> f64 {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    move |v| if range > 0.0 { (v - lo) / range } else { 0.0 }
}

/// Ground-truth depth `[segment, hour]` for one event's feature table.
pub fn oracle_depths(area: &StudyArea, table: &EventFeatureTable, params: &OracleParams) -> Result<Array2<f64>> {
    params.validate()?;
    let (n, hours) = (table.n_segments(), table.n_hours());
    if table.rh.dim() != (n, hours) || table.elv.len() != n {
        return Err(Error::IncompleteFeatures(format!("table {} has inconsistent shapes", table.event_id)));
    }
    let twi_all: Vec<f64> = area.segments.iter().map(|s| s.twi).collect();
    let dtw_all: Vec<f64> = area.segments.iter().map(|s| s.dtw_cm).collect();
    let twi_norm = min_max_normalize(&twi_all);
    let dtw_norm = min_max_normalize(&dtw_all);

    let mut depth = Array2::zeros((n, hours));
    for (i, id) in table.segment_ids.iter().enumerate() {
        let seg = area
            .segment(*id)
            .ok_or_else(|| Error::IncompleteFeatures(format!("segment {id} not in study area")))?;
        let offset = params.twi_gain * twi_norm(seg.twi) - params.dtw_gain * dtw_norm(seg.dtw_cm);
        let mut storage = 0.0;
        for h in 0..hours {
            let rh = table.rh[[i, h]];
            let tide = table.td_hr[h];
            if !rh.is_finite() || !tide.is_finite() {
                return Err(Error::IncompleteFeatures(format!("non-finite input for segment {id} hour {h}")));
            }
            storage = params.retention * storage + rh;
            let overtop = (tide - seg.elv_m).max(0.0);
            depth[[i, h]] = (params.rain_gain * storage + offset + params.tide_gain * overtop).max(0.0);
        }
    }
    Ok(depth)
}

/// The `k` segments with the highest mean depth over all rows of the given
/// (training) tables; ties go to the lower id.
pub fn select_flood_prone(tables: &[&EventFeatureTable], k: usize) -> Result<Vec<i64>> {
    let mut sums: Vec<(i64, f64, usize)> = Vec::new();
    for t in tables {
        let Some(depth) = &t.depth else { continue };
        for (i, id) in t.segment_ids.iter().enumerate() {
            let row_sum: f64 = depth.row(i).sum();
            match sums.iter_mut().find(|s| s.0 == *id) {
                Some(s) => {
                    s.1 += row_sum;
                    s.2 += t.n_hours();
                }
                None => sums.push((*id, row_sum, t.n_hours())),
            }
        }
    }
    if sums.is_empty() {
        return Err(Error::EmptyTable);
    }
    if k > sums.len() {
        return Err(Error::InvalidCount(format!("k = {k} exceeds {} segments", sums.len())));
    }
    let mut means: Vec<(i64, f64)> = sums.into_iter().map(|(id, s, c)| (id, s / c as f64)).collect();
    means.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(means.into_iter().take(k).map(|(id, _)| id).collect())
}

/// Everything `gen-data` needs to produce a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_segments: usize,
    pub n_gauges: usize,
    pub bounds_m: (f64, f64),
    pub n_events: usize,
    /// Overrides the reference roster's durations when set; cycled if shorter than `n_events`.
    pub durations_hrs: Option<Vec<usize>>,
    pub peak_intensity_mm: (f64, f64),
    pub idw_power: f64,
    pub oracle_params: OracleParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 42,
            n_segments: 50,
            n_gauges: 5,
            bounds_m: (5000.0, 5000.0),
            n_events: 16,
            durations_hrs: None,
            peak_intensity_mm: (10.0, 35.0),
            idw_power: features::DEFAULT_IDW_POWER,
            oracle_params: OracleParams::default(),
        }
    }
}

/// Event windows for `n` events: reference roster durations and splits
/// (cycled), starting two weeks apart.
pub fn event_roster(n: usize, durations: Option<&[usize]>) -> Vec<RainfallEvent> {
    let base = NaiveDate::from_ymd_opt(2016, 6, 5).expect("valid date").and_hms_opt(0, 0, 0).expect("midnight");
    (0..n)
        .map(|i| {
            let (ref_duration, split) = REFERENCE_ROSTER[i % REFERENCE_ROSTER.len()];
            let duration = match durations {
                Some(d) if !d.is_empty() => d[i % d.len()],
                _ => ref_duration,
            };
            RainfallEvent::new(format!("E{:02}", i + 1), base + Duration::days(14 * i as i64), duration, split)
        })
        .collect()
}

/// Study area, storms, interpolated features, and oracle depths.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.oracle_params.validate()?;
    let area = gen_study_area(cfg.n_segments, cfg.n_gauges, cfg.bounds_m, cfg.seed)?;
    let roster = event_roster(cfg.n_events, cfg.durations_hrs.as_deref());
    let mut rng = seed::rng(seed::derive(cfg.seed, 3, 0));
    let mut events = Vec::with_capacity(roster.len());
    let mut tables = Vec::with_capacity(roster.len());
    for (i, ev) in roster.iter().enumerate() {
        let (lo, hi) = cfg.peak_intensity_mm;
        let peak = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        let generated = gen_event(&area, ev, peak, seed::derive(cfg.seed, 4, i as u64))?;
        let rainfall = features::derive_rainfall_features(
            &generated.series.rain,
            &area.area.segments,
            &area.area.gauges,
            ev,
            cfg.idw_power,
        )?;
        let mut table = features::attach_static_and_tide(rainfall, &area.area.segments, &generated.series.tide)?;
        table.depth = Some(oracle_depths(&area.area, &table, &cfg.oracle_params)?);
        events.push(generated.series);
        tables.push(table);
    }
    Ok(Dataset {
        area: area.area,
        events,
        features: tables,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_store::parse_timestamp;
    use crate::features::RainfallFeatures;

    fn event(hours: usize) -> RainfallEvent {
        RainfallEvent::new("E", parse_timestamp("2016-06-05T00:00:00").unwrap(), hours, Split::Train)
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn area_is_deterministic() {
        let a = gen_study_area(1, 1, (1000.0, 1000.0), 7).unwrap();
        let b = gen_study_area(1, 1, (1000.0, 1000.0), 7).unwrap();
        assert_eq!(a, b);
        assert!(gen_study_area(0, 1, (1.0, 1.0), 7).is_err());
        assert!(gen_study_area(1, 0, (1.0, 1.0), 7).is_err());
    }

    #[test]
    fn elevation_within_bounds() {
        let a = gen_study_area(2000, 10, (5000.0, 5000.0), 1).unwrap();
        assert!(a.area.segments.iter().all(|s| (0.0..=MAX_ELEVATION_M).contains(&s.elv_m)));
        assert!(a.area.segments.iter().all(|s| s.dtw_cm >= 0.0 && s.twi.is_finite()));
        assert!(a.area.segments.iter().all(|s| s.x_m >= 0.0 && s.x_m < 5000.0 && s.y_m >= 0.0 && s.y_m < 5000.0));
    }

    #[test]
    fn elevation_and_dtw_positively_correlated() {
        let a = gen_study_area(500, 10, (5000.0, 5000.0), 3).unwrap();
        let elv: Vec<f64> = a.area.segments.iter().map(|s| s.elv_m).collect();
        let dtw: Vec<f64> = a.area.segments.iter().map(|s| s.dtw_cm).collect();
        assert!(pearson(&elv, &dtw) > 0.0);
    }

    #[test]
    fn event_counts_and_dry_lead_in() {
        let area = gen_study_area(5, 4, (5000.0, 5000.0), 9).unwrap();
        let g = gen_event(&area, &event(28), 20.0, 5).unwrap();
        assert_eq!(g.series.tide.len(), 28);
        assert!(g.series.rain.iter().all(|r| r.len() == 112));
        assert!(g.series.rain.iter().all(|r| r.rain_mm[..8].iter().all(|v| *v == 0.0)));
        assert!(g.series.rain.iter().all(|r| r.rain_mm[104..].iter().all(|v| *v == 0.0)));
        assert!(g.series.rain.iter().any(|r| r.rain_mm.iter().any(|v| *v > 0.0)));
        assert_eq!(g, gen_event(&area, &event(28), 20.0, 5).unwrap());
        assert!(matches!(gen_event(&area, &event(5), 20.0, 5), Err(Error::InvalidDuration(5))));
    }

    #[test]
    fn tide_range_is_twice_amplitude() {
        let area = gen_study_area(5, 4, (5000.0, 5000.0), 9).unwrap();
        let g = gen_event(&area, &event(28), 20.0, 11).unwrap();
        let p = g.tide_params;
        // Extrema of the continuous sinusoid: phase argument at pi/2 + k*pi.
        let omega = 2.0 * PI / TIDAL_PERIOD_HRS;
        let t_max = ((PI / 2.0) / omega - p.phase_hr).rem_euclid(TIDAL_PERIOD_HRS);
        let t_min = t_max + TIDAL_PERIOD_HRS / 2.0;
        assert!(t_min < 27.0);
        let range = p.level(t_max) - p.level(t_min);
        assert!((range - 2.0 * p.amplitude_m).abs() < 1e-9);
        let hourly_range = g.series.tide.td_hr_m.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            - g.series.tide.td_hr_m.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(hourly_range <= 2.0 * p.amplitude_m + 1e-12);
        for (h, v) in g.series.tide.td_hr_m.iter().enumerate() {
            assert_eq!(*v, p.level(h as f64));
        }
    }

    fn single_segment_area(elv: f64) -> StudyArea {
        StudyArea {
            segments: vec![StreetSegment {
                segment_id: 1,
                x_m: 0.0,
                y_m: 0.0,
                street_name: "A".into(),
                elv_m: elv,
                twi: 5.0,
                dtw_cm: 50.0,
            }],
            gauges: vec![],
        }
    }

    fn table_for(area: &StudyArea, rh: Vec<Vec<f64>>, tide: Vec<f64>) -> EventFeatureTable {
        let n = area.segments.len();
        let hours = tide.len();
        let flat: Vec<f64> = rh.into_iter().flatten().collect();
        let rf = RainfallFeatures {
            event_id: "E".into(),
            start: event(hours.max(6)).start,
            segment_ids: area.segments.iter().map(|s| s.segment_id).collect(),
            rh: Array2::from_shape_vec((n, hours), flat).unwrap(),
            max15: Array2::zeros((n, hours)),
            hr2: Array2::zeros((n, hours)),
            hr72: Array2::zeros((n, hours)),
        };
        let ts = TideSeries { start: rf.start, td_hr_m: tide };
        features::attach_static_and_tide(rf, &area.segments, &ts).unwrap()
    }

    #[test]
    fn hand_evaluated_recurrence() {
        let area = single_segment_area(5.0);
        let t = table_for(&area, vec![vec![10.0, 0.0]], vec![0.0, 0.0]);
        let params = OracleParams { retention: 0.6, rain_gain: 0.004, twi_gain: 0.0, tide_gain: 0.0, dtw_gain: 0.0 };
        let d = oracle_depths(&area, &t, &params).unwrap();
        // S = [10, 6]; depth = 0.004 * S
        assert!((d[[0, 0]] - 0.04).abs() < 1e-15);
        assert!((d[[0, 1]] - 0.024).abs() < 1e-15);
    }

    #[test]
    fn dry_weather_below_ground_is_zero_depth() {
        let mut area = gen_study_area(20, 3, (1000.0, 1000.0), 4).unwrap().area;
        area.segments.iter_mut().for_each(|s| s.elv_m = s.elv_m.max(0.5));
        let n = area.segments.len();
        let t = table_for(&area, vec![vec![0.0; 4]; n], vec![0.2; 4]);
        // zero-offset terrain terms
        let params = OracleParams { twi_gain: 0.0, ..OracleParams::default() };
        let d = oracle_depths(&area, &t, &params).unwrap();
        assert!(d.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lower_segment_never_shallower() {
        let mut area = single_segment_area(0.2);
        let mut high = area.segments[0].clone();
        high.segment_id = 2;
        high.elv_m = 0.6;
        area.segments.push(high);
        let rh = vec![0.0, 3.0, 8.0, 2.0, 0.0, 0.0];
        let tide = vec![0.0, 0.3, 0.7, 0.9, 0.5, 0.1];
        let t = table_for(&area, vec![rh.clone(), rh], tide);
        let d = oracle_depths(&area, &t, &OracleParams::default()).unwrap();
        for h in 0..6 {
            assert!(d[[0, h]] >= d[[1, h]]);
        }
    }

    #[test]
    fn depth_monotone_in_rainfall() {
        let area = single_segment_area(1.0);
        let base = vec![1.0, 4.0, 0.0, 2.0, 0.0, 0.0];
        let tide = vec![0.5; 6];
        let d0 = oracle_depths(&area, &table_for(&area, vec![base.clone()], tide.clone()), &OracleParams::default()).unwrap();
        for k in 0..6 {
            let mut bumped = base.clone();
            bumped[k] += 3.0;
            let d1 = oracle_depths(&area, &table_for(&area, vec![bumped], tide.clone()), &OracleParams::default()).unwrap();
            assert!(d1.iter().zip(d0.iter()).all(|(a, b)| a >= b));
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let area = single_segment_area(1.0);
        let t = table_for(&area, vec![vec![0.0; 2]], vec![0.0; 2]);
        let p = OracleParams { retention: 1.0, ..OracleParams::default() };
        assert!(oracle_depths(&area, &t, &p).is_err());
    }

    #[test]
    fn flood_prone_selection() {
        let ds = generate_dataset(&SynthConfig { n_segments: 40, n_events: 4, ..SynthConfig::default() }).unwrap();
        let train: Vec<&EventFeatureTable> = ds
            .features
            .iter()
            .filter(|t| ds.event(&t.event_id).unwrap().event.split == Split::Train)
            .collect();
        let top = select_flood_prone(&train, 6).unwrap();
        assert_eq!(top.len(), 6);
        let mean_elv = |ids: &[i64]| ids.iter().map(|id| ds.area.segment(*id).unwrap().elv_m).sum::<f64>() / ids.len() as f64;
        let all: Vec<i64> = ds.area.segments.iter().map(|s| s.segment_id).collect();
        assert!(mean_elv(&top) < mean_elv(&all));
        let every = select_flood_prone(&train, 40).unwrap();
        assert_eq!(every.len(), 40);
        assert!(select_flood_prone(&[], 1).is_err());
    }

    #[test]
    fn flood_prone_ties_prefer_lower_id() {
        let area = StudyArea {
            segments: vec![
                StreetSegment { segment_id: 7, ..single_segment_area(1.0).segments[0].clone() },
                StreetSegment { segment_id: 3, ..single_segment_area(1.0).segments[0].clone() },
            ],
            gauges: vec![],
        };
        let mut t = table_for(&area, vec![vec![1.0, 1.0], vec![1.0, 1.0]], vec![0.0, 0.0]);
        t.depth = Some(Array2::from_elem((2, 2), 0.05));
        assert_eq!(select_flood_prone(&[&t], 2).unwrap(), vec![3, 7]);
    }
}
