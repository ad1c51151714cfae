//! Leave-one-event-out training and scoring shared by the architecture
//! search and the evaluation tables.

use std::collections::BTreeMap;

use crate::data_store::{Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{compute_metrics, Baseline, EventScore, FoldScore};
use crate::features::{fit_scaler, EventFeatureTable, Feature, Scaler};
use crate::model::{build_model, train, ArchConfig, TrainConfig, TrainedModel};
use crate::seed;
use crate::windowing::{build_samples, build_scaled_samples, loeo_splits, SampleBatch, SplitPlan};

/// Feature tables keyed by event id plus the rotation over them.
#[derive(Clone, Debug)]
pub struct ProtocolData {
    pub tables: BTreeMap<String, EventFeatureTable>,
    pub plan: SplitPlan,
}

impl ProtocolData {
    /// Rotation over the dataset's usable train/test events, optionally
    /// restricted to `segments`.
    pub fn from_dataset(dataset: &Dataset, segments: Option<&[i64]>) -> Result<Self> {
        if dataset.features.is_empty() {
            return Err(Error::IncompleteFeatures("dataset has no feature tables; run prepare first".into()));
        }
        let usable = |split: Split| -> Vec<String> {
            dataset
                .events
                .iter()
                .filter(|e| e.event.split == split && e.usable())
                .map(|e| e.event.event_id.clone())
                .collect()
        };
        let (train, test) = (usable(Split::Train), usable(Split::Test));
        let tables = dataset
            .features
            .iter()
            .filter(|t| train.contains(&t.event_id) || test.contains(&t.event_id))
            .map(|t| match segments {
                Some(ids) => t.select_segments(ids),
                None => t.clone(),
            })
            .collect();
        Self::new(tables, &train, &test)
    }

    pub fn new(tables: Vec<EventFeatureTable>, train_events: &[String], test_events: &[String]) -> Result<Self> {
        let plan = loeo_splits(train_events, test_events)?;
        let tables: BTreeMap<String, EventFeatureTable> = tables.into_iter().map(|t| (t.event_id.clone(), t)).collect();
        for id in train_events.iter().chain(test_events) {
            let t = tables.get(id).ok_or_else(|| Error::UnknownEvent(id.clone()))?;
            if t.depth.is_none() {
                return Err(Error::MissingTargets(id.clone()));
            }
            if t.n_segments() == 0 {
                return Err(Error::EmptyTable);
            }
        }
        Ok(ProtocolData { tables, plan })
    }

    pub fn n_folds(&self) -> usize {
        self.plan.folds.len()
    }

    pub fn table(&self, event_id: &str) -> Result<&EventFeatureTable> {
        self.tables.get(event_id).ok_or_else(|| Error::UnknownEvent(event_id.to_string()))
    }

    /// Events of `ids` long enough for `look_back`.
    fn windowable<'a>(&'a self, ids: &'a [String], look_back: usize) -> impl Iterator<Item = &'a EventFeatureTable> + 'a {
        ids.iter().filter_map(move |id| self.tables.get(id)).filter(move |t| t.n_hours() > look_back)
    }
}

/// Scaled batches for one fold. The scaler is fit on the fold's training
/// events only.
#[derive(Clone, Debug)]
pub struct FoldData {
    pub fold: usize,
    pub validation_event: String,
    pub scaler: Scaler,
    pub train: SampleBatch,
    pub val: SampleBatch,
    pub test: Vec<(String, SampleBatch)>,
}

pub fn prepare_fold(data: &ProtocolData, fold: usize, look_back: usize, include_max15: bool) -> Result<FoldData> {
    let spec = data.plan.folds.get(fold).ok_or_else(|| Error::MissingFoldModel(format!("fold {fold} not in the rotation")))?;
    let train_tables: Vec<&EventFeatureTable> = data.windowable(&spec.train, look_back).collect();
    if train_tables.is_empty() {
        return Err(Error::InvalidCount(format!("fold {fold} has no training event longer than {look_back} h")));
    }
    let scaler = fit_scaler(&train_tables, &Feature::model_inputs(include_max15))?;
    let batches = train_tables
        .iter()
        .map(|t| build_scaled_samples(t, &scaler, look_back, include_max15))
        .collect::<Result<Vec<_>>>()?;
    let train = SampleBatch::concat(&batches)?;
    let val = build_scaled_samples(data.table(&spec.validation)?, &scaler, look_back, include_max15)?;
    let test = data
        .plan
        .test
        .iter()
        .map(|id| Ok((id.clone(), build_scaled_samples(data.table(id)?, &scaler, look_back, include_max15)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(FoldData {
        fold,
        validation_event: spec.validation.clone(),
        scaler,
        train,
        val,
        test,
    })
}

/// Seeds for weight initialization and minibatch shuffling of one fold.
pub fn fold_seeds(base: u64, stream: u64, fold: usize) -> (u64, u64) {
    let fold_seed = seed::derive(base, stream, fold as u64);
    (seed::derive(fold_seed, 1, 0), seed::derive(fold_seed, 2, 0))
}

/// Train one fold model; the returned model carries the fold's scaler.
pub fn train_fold(arch: &ArchConfig, tc: &TrainConfig, fold: &FoldData, base_seed: u64, stream: u64) -> Result<TrainedModel> {
    let (init_seed, shuffle_seed) = fold_seeds(base_seed, stream, fold.fold);
    let net = build_model(arch, init_seed)?;
    let tc = TrainConfig { seed: shuffle_seed, ..tc.clone() };
    let mut model = train(net, &fold.train, &fold.val, &tc)?;
    model.scaler = Some(fold.scaler.clone());
    Ok(model)
}

/// Per-test-event metrics of `model` on already-scaled fold batches.
pub fn score_fold(model: &TrainedModel, fold: &FoldData) -> Result<FoldScore> {
    let events = fold
        .test
        .iter()
        .map(|(id, batch)| {
            let pred = model.predict(batch)?;
            Ok(EventScore::new(id.clone(), compute_metrics(pred.view(), batch.targets()?.view())?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FoldScore {
        fold: fold.fold,
        validation_event: fold.validation_event.clone(),
        val_mae_m: Some(model.best_val_mae()),
        events,
    })
}

/// Score a persisted fold model, rebuilding test batches with its own scaler.
pub fn score_model(model: &TrainedModel, data: &ProtocolData, fold: usize) -> Result<FoldScore> {
    let spec = data.plan.folds.get(fold).ok_or_else(|| Error::MissingFoldModel(format!("fold {fold} not in the rotation")))?;
    let scaler = model
        .scaler
        .as_ref()
        .ok_or_else(|| Error::ScalerMismatch(format!("fold {fold} model has no embedded scaler")))?;
    let arch = model.arch();
    let events = data
        .plan
        .test
        .iter()
        .map(|id| {
            let batch = build_scaled_samples(data.table(id)?, scaler, arch.look_back, arch.include_max15)?;
            let pred = model.predict(&batch)?;
            Ok(EventScore::new(id.clone(), compute_metrics(pred.view(), batch.targets()?.view())?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FoldScore {
        fold,
        validation_event: spec.validation.clone(),
        val_mae_m: Some(model.best_val_mae()),
        events,
    })
}

/// Baseline scores for every fold on the sample set of `look_back`.
pub fn baseline_folds(data: &ProtocolData, baseline: Baseline, look_back: usize) -> Result<Vec<FoldScore>> {
    let mut test = Vec::new();
    for id in &data.plan.test {
        let t = data.table(id)?;
        test.push((t, build_samples(t, look_back, false)?));
    }
    data.plan
        .folds
        .iter()
        .enumerate()
        .map(|(k, spec)| {
            let train_mean = if baseline == Baseline::TrainMean {
                let (sum, n) = data.windowable(&spec.train, look_back).try_fold((0.0, 0usize), |(s, n), t| {
                    let b = build_samples(t, look_back, false)?;
                    let y = b.targets()?;
                    Ok::<_, Error>((s + y.sum(), n + y.len()))
                })?;
                if n == 0 {
                    return Err(Error::EmptyInput);
                }
                sum / n as f64
            } else {
                0.0
            };
            let events = test
                .iter()
                .map(|(t, b)| {
                    let pred = baseline.predict(b, train_mean, t)?;
                    Ok(EventScore::new(t.event_id.clone(), compute_metrics(pred.view(), b.targets()?.view())?))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(FoldScore {
                fold: k,
                validation_event: spec.validation.clone(),
                val_mae_m: None,
                events,
            })
        })
        .collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::eval::aggregate;
    use crate::eval::Averaging;
    use crate::synth_hydro::{generate_dataset, select_flood_prone, SynthConfig};

    pub(crate) fn small_data(n_segments: usize, durations: &[usize]) -> Dataset {
        let cfg = SynthConfig {
            n_segments,
            durations_hrs: Some(durations.to_vec()),
            ..SynthConfig::default()
        };
        generate_dataset(&cfg).unwrap()
    }

    #[test]
    fn fold_scaler_sees_only_training_events() {
        let ds = small_data(8, &[10, 14, 9, 12]);
        let data = ProtocolData::from_dataset(&ds, None).unwrap();
        assert_eq!(data.n_folds(), 12);
        let f = prepare_fold(&data, 3, 4, true).unwrap();
        let spec = &data.plan.folds[3];
        let train: Vec<&EventFeatureTable> = spec.train.iter().map(|id| data.table(id).unwrap()).collect();
        let expected = fit_scaler(&train, &Feature::model_inputs(true)).unwrap();
        assert_eq!(f.scaler, expected);
        assert_eq!(f.val.index[0].event_id.as_ref(), spec.validation);
        assert!(f.train.index.iter().all(|k| k.event_id.as_ref() != spec.validation));
        assert_eq!(f.test.len(), 4);
    }

    #[test]
    fn baselines_follow_the_shift_oracle() {
        let ds = small_data(5, &[10, 12]);
        let data = ProtocolData::from_dataset(&ds, None).unwrap();
        let folds = baseline_folds(&data, Baseline::Persistence, 4).unwrap();
        for e in &folds[0].events {
            let t = data.table(&e.event_id).unwrap();
            let d = t.depth.as_ref().unwrap();
            let mut abs = 0.0;
            let mut n = 0;
            for s in 0..t.n_segments() {
                for h in 4..t.n_hours() {
                    abs += (d[[s, h]] - d[[s, h - 1]]).abs();
                    n += 1;
                }
            }
            assert_eq!(e.n_samples, n);
            assert!((e.mae_m - abs / n as f64).abs() < 1e-15);
        }
        let zero = baseline_folds(&data, Baseline::Zero, 4).unwrap();
        let (z1, _) = aggregate(&zero, Averaging::EventsThenFolds).unwrap();
        assert!((z1 - zero[0].mean_mae()).abs() < 1e-15);
    }

    #[test]
    fn mini_area_beats_mean_predictor() {
        let ds = small_data(50, &[12, 14, 16, 13]);
        let tables: Vec<&EventFeatureTable> = ds.features.iter().collect();
        let prone = select_flood_prone(&tables, 6).unwrap();
        let data = ProtocolData::from_dataset(&ds, Some(&prone)).unwrap();
        let fold = prepare_fold(&data, 0, 4, true).unwrap();
        let tc = TrainConfig { batch_size: 64, max_epochs: 60, early_stop_patience: 15, ..TrainConfig::default() };
        let model = train_fold(&ArchConfig::champion(), &tc, &fold, 1, 0).unwrap();
        let mean = fold.train.targets().unwrap().mean().unwrap();
        let y = fold.val.targets().unwrap();
        let baseline = y.mapv(|v| (v - mean).abs()).mean().unwrap();
        assert!(model.best_val_mae() < baseline, "{} vs {baseline}", model.best_val_mae());
        let s1 = score_fold(&model, &fold).unwrap();
        let s2 = score_model(&model, &data, 0).unwrap();
        assert_eq!(s1, s2);
    }
}
