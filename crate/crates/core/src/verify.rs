//! Finite-difference verification over many random seeds: single dense and
//! recurrent layers under random linear probes, and a full network on a
//! random batch.

use std::sync::Arc;

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::features::Feature;
use crate::model::{build_model, grad_check, ArchConfig};
use crate::nn::gradcheck::{self, check, fold_signs, max_relative_error, Objective};
use crate::nn::{flat, Activation, CellType, Dense, Recurrent};
use crate::seed;
use crate::windowing::{SampleBatch, SampleKey};

/// Standard-normal inputs and small non-negative targets shaped for `arch`.
pub fn random_batch(arch: &ArchConfig, n: usize, seed_value: u64) -> SampleBatch {
    let mut rng = seed::rng(seed_value);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let temporal = Array3::from_shape_simple_fn((n, arch.look_back, arch.n_temporal()), &mut normal);
    let spatial = Array2::from_shape_simple_fn((n, 3), &mut normal);
    let targets = Array1::from_shape_simple_fn(n, || 0.1 * normal().abs());
    let event: Arc<str> = Arc::from("random");
    SampleBatch {
        temporal_features: Feature::temporal(arch.include_max15),
        temporal,
        spatial,
        targets: Some(targets),
        index: (0..n)
            .map(|i| SampleKey {
                event_id: event.clone(),
                segment_id: i as i64,
                hour: arch.look_back,
            })
            .collect(),
        scaling: None,
    }
}

fn normal_array2(rng: &mut impl Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}

fn normal_array3(rng: &mut impl Rng, shape: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}

/// `sum(weights * dense(x))` with respect to kernel, bias and input.
pub struct DenseProbe {
    pub layer: Dense,
    pub x: Array2<f64>,
    pub weights: Array2<f64>,
}

impl DenseProbe {
    pub fn random(seed_value: u64, activation: Activation) -> Self {
        let mut rng = seed::rng(seed_value);
        let mut layer = Dense::glorot(&mut rng, 4, 3, activation);
        layer.bias = Array1::from_shape_simple_fn(3, || 0.3 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
        let x = normal_array2(&mut rng, (5, 4));
        let weights = normal_array2(&mut rng, (5, 3));
        DenseProbe { layer, x, weights }
    }
}

impl Objective for DenseProbe {
    fn tensor_names(&self) -> Vec<String> {
        ["kernel", "bias", "input"].map(String::from).to_vec()
    }

    fn tensor_mut(&mut self, i: usize) -> &mut [f64] {
        match i {
            0 => self.layer.kernel.as_slice_mut().expect("contiguous"),
            1 => self.layer.bias.as_slice_mut().expect("contiguous"),
            _ => self.x.as_slice_mut().expect("contiguous"),
        }
    }

    fn evaluate(&self) -> (f64, u64) {
        let (y, cache) = self.layer.forward(self.x.view()).expect("shapes fixed at construction");
        let mut sig = 0;
        if self.layer.activation.has_kink() {
            fold_signs(&mut sig, cache.pre.iter());
        }
        ((&y * &self.weights).sum(), sig)
    }

    fn gradient(&self) -> Vec<Vec<f64>> {
        let (_, cache) = self.layer.forward(self.x.view()).expect("shapes fixed at construction");
        let (dx, g) = self.layer.backward(&cache, self.weights.view()).expect("shapes fixed at construction");
        vec![flat(&g.kernel), flat(&g.bias), flat(&dx)]
    }
}

/// `sum(weights * rnn(x))` over every output step, through time.
pub struct SequenceProbe {
    pub layer: Recurrent,
    pub x: Array3<f64>,
    pub weights: Array3<f64>,
}

impl SequenceProbe {
    pub fn random(seed_value: u64, cell: CellType) -> Self {
        let (batch, steps, inputs, units) = (2, 4, 3, 3);
        let mut rng = seed::rng(seed_value);
        let mut layer = Recurrent::init(&mut rng, cell, inputs, units);
        layer
            .bias
            .mapv_inplace(|b| b + 0.3 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
        let x = normal_array3(&mut rng, (batch, steps, inputs));
        let weights = normal_array3(&mut rng, (batch, steps, units));
        SequenceProbe { layer, x, weights }
    }
}

impl Objective for SequenceProbe {
    fn tensor_names(&self) -> Vec<String> {
        ["kernel", "recurrent_kernel", "bias", "input"].map(String::from).to_vec()
    }

    fn tensor_mut(&mut self, i: usize) -> &mut [f64] {
        match i {
            0 => self.layer.kernel.as_slice_mut().expect("contiguous"),
            1 => self.layer.recurrent_kernel.as_slice_mut().expect("contiguous"),
            2 => self.layer.bias.as_slice_mut().expect("contiguous"),
            _ => self.x.as_slice_mut().expect("contiguous"),
        }
    }

    fn evaluate(&self) -> (f64, u64) {
        let (h, _) = self.layer.forward(self.x.view()).expect("shapes fixed at construction");
        ((&h * &self.weights).sum(), 0)
    }

    fn gradient(&self) -> Vec<Vec<f64>> {
        let (_, tape) = self.layer.forward(self.x.view()).expect("shapes fixed at construction");
        let (dx, g) = self.layer.backward(&tape, self.weights.view()).expect("shapes fixed at construction");
        vec![flat(&g.kernel), flat(&g.recurrent_kernel), flat(&g.bias), flat(&dx)]
    }
}

/// Settings of a multi-seed gradient check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradientSuite {
    pub first_seed: u64,
    pub seeds: u64,
    /// Network checked end to end.
    #[serde(skip)]
    pub arch: ArchConfig,
    pub batch_size: usize,
    pub eps: f64,
    /// Check a seeded random subset of each network tensor instead of every entry.
    pub max_per_tensor: Option<usize>,
    pub layer_tolerance: f64,
    pub model_tolerance: f64,
}

impl Default for GradientSuite {
    fn default() -> Self {
        GradientSuite {
            first_seed: 0,
            seeds: 100,
            arch: ArchConfig::champion(),
            batch_size: 8,
            eps: gradcheck::DEFAULT_EPS,
            max_per_tensor: Some(256),
            layer_tolerance: 1e-5,
            model_tolerance: 1e-4,
        }
    }
}

/// Worst relative error per component across all seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub seeds: u64,
    pub dense: f64,
    pub lstm: f64,
    pub gru: f64,
    pub model: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub passed: bool,
}

const DENSE_PROBE_ACTIVATIONS: [Activation; 5] =
    [Activation::Linear, Activation::Tanh, Activation::Sigmoid, Activation::Selu, Activation::Relu];

impl GradientSuite {
    pub fn run(&self) -> Result<SuiteReport> {
        self.arch.validate()?;
        let mut report = SuiteReport {
            seeds: self.seeds,
            dense: 0.0,
            lstm: 0.0,
            gru: 0.0,
            model: 0.0,
            checked: 0,
            skipped_kinks: 0,
            passed: false,
        };
        let tally = |worst: &mut f64, r: gradcheck::GradCheckReport| {
            *worst = worst.max(max_relative_error(&r));
            report_counts(&r)
        };
        let mut counts = (0, 0);
        for s in self.first_seed..self.first_seed + self.seeds {
            let act = DENSE_PROBE_ACTIVATIONS[(s % DENSE_PROBE_ACTIVATIONS.len() as u64) as usize];
            let mut dense = DenseProbe::random(seed::derive(s, 1, 0), act);
            add(&mut counts, tally(&mut report.dense, check(&mut dense, self.eps, None, s)));
            let mut lstm = SequenceProbe::random(seed::derive(s, 2, 0), CellType::Lstm);
            add(&mut counts, tally(&mut report.lstm, check(&mut lstm, self.eps, None, s)));
            let mut gru = SequenceProbe::random(seed::derive(s, 3, 0), CellType::Gru);
            add(&mut counts, tally(&mut report.gru, check(&mut gru, self.eps, None, s)));
            let net = build_model(&self.arch, seed::derive(s, 4, 0))?;
            let batch = random_batch(&self.arch, self.batch_size, seed::derive(s, 5, 0));
            add(&mut counts, tally(&mut report.model, grad_check(&net, &batch, self.eps, self.max_per_tensor, s)?));
        }
        report.checked = counts.0;
        report.skipped_kinks = counts.1;
        report.passed = [report.dense, report.lstm, report.gru].iter().all(|e| *e < self.layer_tolerance)
            && report.model < self.model_tolerance;
        Ok(report)
    }
}

fn report_counts(r: &gradcheck::GradCheckReport) -> (usize, usize) {
    (r.checked(), r.skipped_kinks)
}

fn add(total: &mut (usize, usize), c: (usize, usize)) {
    total.0 += c.0;
    total.1 += c.1;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probes_pass_on_a_few_seeds() {
        let suite = GradientSuite {
            seeds: 3,
            max_per_tensor: Some(20),
            ..GradientSuite::default()
        };
        let r = suite.run().unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.checked > 0);
    }

    #[test]
    fn a_wrong_gradient_is_detected() {
        struct Broken(DenseProbe);
        impl Objective for Broken {
            fn tensor_names(&self) -> Vec<String> {
                self.0.tensor_names()
            }
            fn tensor_mut(&mut self, i: usize) -> &mut [f64] {
                self.0.tensor_mut(i)
            }
            fn evaluate(&self) -> (f64, u64) {
                self.0.evaluate()
            }
            fn gradient(&self) -> Vec<Vec<f64>> {
                let mut g = self.0.gradient();
                g[0][2] *= 1.001;
                g
            }
        }
        let mut b = Broken(DenseProbe::random(1, Activation::Tanh));
        assert!(max_relative_error(&check(&mut b, 1e-5, None, 0)) > 1e-4);
    }

    #[test]
    fn random_batch_matches_arch() {
        let arch = ArchConfig::champion();
        let b = random_batch(&arch, 5, 1);
        assert_eq!(b.temporal.dim(), (5, arch.look_back, arch.n_temporal()));
        assert_eq!(b, random_batch(&arch, 5, 1));
    }
}
