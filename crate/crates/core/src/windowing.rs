//! Event-bounded look-back windows and the leave-one-event-out rotation.

use std::collections::HashSet;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{apply_scaler, EventFeatureTable, Feature, Scaler};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SampleKey {
    pub event_id: Arc<str>,
    pub segment_id: i64,
    /// Hour index of the predicted step within its event.
    pub hour: usize,
}

/// Row-aligned model inputs: `temporal` is `[samples, look_back, features]`,
/// `spatial` is `[samples, 3]` (ELV, TWI, DTW), targets are depths in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub temporal_features: Vec<Feature>,
    pub temporal: Array3<f64>,
    pub spatial: Array2<f64>,
    pub targets: Option<Array1<f64>>,
    pub index: Vec<SampleKey>,
    /// Fingerprint of the scaler applied to the source tables, if any.
    pub scaling: Option<u64>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn look_back(&self) -> usize {
        self.temporal.shape()[1]
    }

    pub fn n_temporal(&self) -> usize {
        self.temporal.shape()[2]
    }

    pub fn targets(&self) -> Result<&Array1<f64>> {
        self.targets.as_ref().ok_or_else(|| {
            Error::MissingTargets(self.index.first().map(|k| k.event_id.to_string()).unwrap_or_default())
        })
    }

    /// Rows at `rows`, in that order.
    pub fn select(&self, rows: &[usize]) -> SampleBatch {
        SampleBatch {
            temporal_features: self.temporal_features.clone(),
            temporal: self.temporal.select(Axis(0), rows),
            spatial: self.spatial.select(Axis(0), rows),
            targets: self.targets.as_ref().map(|t| t.select(Axis(0), rows)),
            index: rows.iter().map(|&r| self.index[r].clone()).collect(),
            scaling: self.scaling,
        }
    }

    pub fn concat(batches: &[SampleBatch]) -> Result<SampleBatch> {
        let first = batches.first().ok_or(Error::EmptyBatch)?;
        let (lb, nf) = (first.look_back(), first.n_temporal());
        for b in batches {
            if b.look_back() != lb || b.temporal_features != first.temporal_features {
                return Err(Error::ShapeMismatch("cannot concatenate batches with different windows".into()));
            }
            if b.scaling != first.scaling {
                return Err(Error::ScalerMismatch("cannot concatenate batches scaled differently".into()));
            }
        }
        let n: usize = batches.iter().map(SampleBatch::len).sum();
        let mut temporal = Array3::zeros((n, lb, nf));
        let mut spatial = Array2::zeros((n, 3));
        let all_targets = batches.iter().all(|b| b.targets.is_some());
        let mut targets = Array1::zeros(if all_targets { n } else { 0 });
        let mut index = Vec::with_capacity(n);
        let mut at = 0;
        for b in batches {
            let m = b.len();
            temporal.slice_mut(s![at..at + m, .., ..]).assign(&b.temporal);
            spatial.slice_mut(s![at..at + m, ..]).assign(&b.spatial);
            if all_targets {
                targets.slice_mut(s![at..at + m]).assign(b.targets.as_ref().expect("checked"));
            }
            index.extend(b.index.iter().cloned());
            at += m;
        }
        Ok(SampleBatch {
            temporal_features: first.temporal_features.clone(),
            temporal,
            spatial,
            targets: all_targets.then_some(targets),
            index,
            scaling: first.scaling,
        })
    }
}

/// One sample per (segment, hour t) with `t >= look_back`; the window covers
/// hours `t - look_back ..= t - 1` of the same event and the target is the
/// depth at `t`.
pub fn build_samples(table: &EventFeatureTable, look_back: usize, include_max15: bool) -> Result<SampleBatch> {
    if look_back == 0 {
        return Err(Error::InvalidConfig("look_back must be at least 1".into()));
    }
    let hours = table.n_hours();
    if hours <= look_back {
        return Err(Error::EventTooShort {
            event_id: table.event_id.clone(),
            duration_hrs: hours,
            look_back,
        });
    }
    let features = Feature::temporal(include_max15);
    let per_segment = hours - look_back;
    let n = per_segment * table.n_segments();
    let mut temporal = Array3::zeros((n, look_back, features.len()));
    let mut spatial = Array2::zeros((n, 3));
    let mut targets = table.depth.as_ref().map(|_| Array1::zeros(n));
    let mut index = Vec::with_capacity(n);
    let event_id: Arc<str> = Arc::from(table.event_id.as_str());

    let mut row = 0;
    for (i, id) in table.segment_ids.iter().enumerate() {
        for t in look_back..hours {
            for k in 0..look_back {
                let h = t - look_back + k;
                for (f, feature) in features.iter().enumerate() {
                    temporal[[row, k, f]] = table.value(*feature, i, h);
                }
            }
            for (f, feature) in Feature::SPATIAL.iter().enumerate() {
                spatial[[row, f]] = table.value(*feature, i, t);
            }
            if let (Some(tg), Some(depth)) = (targets.as_mut(), table.depth.as_ref()) {
                tg[row] = depth[[i, t]];
            }
            index.push(SampleKey {
                event_id: event_id.clone(),
                segment_id: *id,
                hour: t,
            });
            row += 1;
        }
    }
    Ok(SampleBatch {
        temporal_features: features,
        temporal,
        spatial,
        targets,
        index,
        scaling: None,
    })
}

/// Scale a raw table with `scaler` and window it; the batch remembers which
/// scaler produced it.
pub fn build_scaled_samples(table: &EventFeatureTable, scaler: &Scaler, look_back: usize, include_max15: bool) -> Result<SampleBatch> {
    let scaled = apply_scaler(scaler, table);
    let mut batch = build_samples(&scaled, look_back, include_max15)?;
    batch.scaling = Some(scaler.fingerprint());
    Ok(batch)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub validation: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub folds: Vec<Fold>,
    pub test: Vec<String>,
}

/// Each training event is held out once for validation; test events never
/// enter a fold.
pub fn loeo_splits(train_events: &[String], test_events: &[String]) -> Result<SplitPlan> {
    let test: HashSet<&String> = test_events.iter().collect();
    if let Some(e) = train_events.iter().find(|e| test.contains(e)) {
        return Err(Error::OverlappingSplits(e.clone()));
    }
    let mut seen = HashSet::new();
    if let Some(e) = train_events.iter().find(|e| !seen.insert(*e)) {
        return Err(Error::DuplicateId {
            table: "train events",
            id: e.clone(),
        });
    }
    if train_events.len() < 2 {
        return Err(Error::InvalidCount("need at least two training events to rotate".into()));
    }
    let folds = train_events
        .iter()
        .map(|val| Fold {
            train: train_events.iter().filter(|e| *e != val).cloned().collect(),
            validation: val.clone(),
        })
        .collect();
    Ok(SplitPlan {
        folds,
        test: test_events.to_vec(),
    })
}
