//! Two-branch surrogate: stacked recurrent layers over the look-back window,
//! dense layers over the static terrain descriptors, and a dense head on the
//! concatenation of the last hidden state and the spatial features.

use std::fmt;
use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Feature, Scaler};
use crate::nn::gradcheck::{self, fold_signs, GradCheckReport, Objective};
use crate::nn::{flat, mae_loss, Activation, CellType, Dense, DenseCache, NadamConfig, NadamState, Recurrent, RecurrentTape, RegSpec};
use crate::seed;
use crate::windowing::SampleBatch;

pub const MODEL_FILE_VERSION: &str = "floodcast-model-v1";

pub const RNN_LAYER_OPTIONS: [usize; 3] = [1, 2, 3];
pub const RNN_UNIT_OPTIONS: [usize; 2] = [12, 20];
pub const SPATIAL_LAYER_OPTIONS: [usize; 2] = [2, 3];
pub const SPATIAL_UNIT_OPTIONS: [usize; 2] = [4, 8];
pub const DENSE_ACTIVATIONS: [Activation; 3] = [Activation::Relu, Activation::Selu, Activation::Linear];
pub const HEAD_UNIT_OPTIONS: [&[usize]; 5] = [&[64, 64, 1], &[32, 32, 1], &[32, 16, 1], &[64, 64, 16, 1], &[64, 32, 32, 1]];
pub const LOOK_BACK_OPTIONS: [usize; 2] = [1, 4];

/// Rows per forward pass when scoring large batches.
const EVAL_CHUNK: usize = 4096;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HeadActivation {
    Uniform(Activation),
    PerLayer(Vec<Activation>),
}

impl fmt::Display for HeadActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeadActivation::Uniform(a) => write!(f, "{a}"),
            HeadActivation::PerLayer(v) => {
                let names: Vec<&str> = v.iter().map(|a| a.name()).collect();
                write!(f, "{}", names.join("|"))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchConfig {
    pub rnn_type: CellType,
    pub rnn_layers: usize,
    pub rnn_units: usize,
    pub spatial_layers: usize,
    pub spatial_units: usize,
    pub spatial_act: Activation,
    pub head_units: Vec<usize>,
    pub head_act: HeadActivation,
    pub look_back: usize,
    pub include_max15: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::champion()
    }
}

impl ArchConfig {
    /// GRU 1x20, spatial 2x4 selu, head [64, 64, 16, 1] with linear, selu,
    /// selu, selu activations, four-hour look-back.
    pub fn champion() -> Self {
        ArchConfig {
            rnn_type: CellType::Gru,
            rnn_layers: 1,
            rnn_units: 20,
            spatial_layers: 2,
            spatial_units: 4,
            spatial_act: Activation::Selu,
            head_units: vec![64, 64, 16, 1],
            head_act: HeadActivation::PerLayer(vec![Activation::Linear, Activation::Selu, Activation::Selu, Activation::Selu]),
            look_back: 4,
            include_max15: true,
        }
    }

    pub fn head_activations(&self) -> Vec<Activation> {
        match &self.head_act {
            HeadActivation::Uniform(a) => vec![*a; self.head_units.len()],
            HeadActivation::PerLayer(v) => v.clone(),
        }
    }

    pub fn n_temporal(&self) -> usize {
        Feature::temporal(self.include_max15).len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::InvalidConfig(what));
        if !RNN_LAYER_OPTIONS.contains(&self.rnn_layers) {
            return bad(format!("rnn_layers {} not in {RNN_LAYER_OPTIONS:?}", self.rnn_layers));
        }
        if !RNN_UNIT_OPTIONS.contains(&self.rnn_units) {
            return bad(format!("rnn_units {} not in {RNN_UNIT_OPTIONS:?}", self.rnn_units));
        }
        if !SPATIAL_LAYER_OPTIONS.contains(&self.spatial_layers) {
            return bad(format!("spatial_layers {} not in {SPATIAL_LAYER_OPTIONS:?}", self.spatial_layers));
        }
        if !SPATIAL_UNIT_OPTIONS.contains(&self.spatial_units) {
            return bad(format!("spatial_units {} not in {SPATIAL_UNIT_OPTIONS:?}", self.spatial_units));
        }
        if !DENSE_ACTIVATIONS.contains(&self.spatial_act) {
            return bad(format!("spatial_act {} not searchable", self.spatial_act));
        }
        if !HEAD_UNIT_OPTIONS.iter().any(|h| *h == self.head_units.as_slice()) {
            return bad(format!("head_units {:?} not a searchable head", self.head_units));
        }
        if self.head_units.last() != Some(&1) {
            return bad("final head width must be 1".into());
        }
        let acts = self.head_activations();
        if acts.len() != self.head_units.len() {
            return bad(format!("{} head activations for {} head layers", acts.len(), self.head_units.len()));
        }
        if acts.iter().any(|a| !DENSE_ACTIVATIONS.contains(a)) {
            return bad(format!("head activations {} not searchable", self.head_act));
        }
        if !LOOK_BACK_OPTIONS.contains(&self.look_back) {
            return bad(format!("look_back {} not in {LOOK_BACK_OPTIONS:?}", self.look_back));
        }
        Ok(())
    }

    /// Parameter count from layer shapes:
    /// LSTM `4(in*u + u^2 + u)`, GRU `3(in*u + u^2 + u)`, dense `in*out + out`.
    pub fn param_count(&self) -> usize {
        let u = self.rnn_units;
        let gates = self.rnn_type.gates();
        let mut total = 0;
        let mut inputs = self.n_temporal();
        for _ in 0..self.rnn_layers {
            total += gates * (inputs * u + u * u + u);
            inputs = u;
        }
        let mut inputs = Feature::SPATIAL.len();
        for _ in 0..self.spatial_layers {
            total += inputs * self.spatial_units + self.spatial_units;
            inputs = self.spatial_units;
        }
        let mut inputs = u + self.spatial_units;
        for &w in &self.head_units {
            total += inputs * w + w;
            inputs = w;
        }
        total
    }

    /// Short, stable label such as `GRU-1x20-s2x4selu-h64.64.16.1-lb4-max15`.
    pub fn label(&self) -> String {
        let head: Vec<String> = self.head_units.iter().map(usize::to_string).collect();
        format!(
            "{}-{}x{}-s{}x{}{}-h{}-{}-lb{}-{}",
            self.rnn_type,
            self.rnn_layers,
            self.rnn_units,
            self.spatial_layers,
            self.spatial_units,
            self.spatial_act,
            head.join("."),
            self.head_act,
            self.look_back,
            if self.include_max15 { "max15" } else { "nomax15" }
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
            batch_size: 512,
            max_epochs: 100,
            early_stop_patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr, self.beta1, self.beta2, self.epsilon].iter().all(|v| *v > 0.0 && v.is_finite());
        if !positive || self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::InvalidConfig("optimizer hyperparameters must be positive (betas below 1)".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.early_stop_patience == 0 {
            return Err(Error::InvalidConfig("batch size, epochs and patience must be positive".into()));
        }
        if self.early_stop_patience >= self.max_epochs {
            return Err(Error::InvalidConfig("early_stop_patience must be below max_epochs".into()));
        }
        Ok(())
    }

    pub fn nadam(&self) -> NadamConfig {
        NadamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

/// Network weights for one [`ArchConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct TwoBranchNet {
    pub arch: ArchConfig,
    pub rnn: Vec<Recurrent>,
    pub spatial: Vec<Dense>,
    pub head: Vec<Dense>,
    pub reg: RegSpec,
}

pub struct ForwardTape {
    rnn: Vec<RecurrentTape>,
    spatial: Vec<DenseCache>,
    head: Vec<DenseCache>,
    look_back: usize,
}

pub fn build_model(config: &ArchConfig, init_seed: u64) -> Result<TwoBranchNet> {
    config.validate()?;
    let mut rng = seed::rng(init_seed);
    let mut rnn = Vec::with_capacity(config.rnn_layers);
    let mut inputs = config.n_temporal();
    for _ in 0..config.rnn_layers {
        rnn.push(Recurrent::init(&mut rng, config.rnn_type, inputs, config.rnn_units));
        inputs = config.rnn_units;
    }
    let mut spatial = Vec::with_capacity(config.spatial_layers);
    let mut inputs = Feature::SPATIAL.len();
    for _ in 0..config.spatial_layers {
        spatial.push(Dense::glorot(&mut rng, inputs, config.spatial_units, config.spatial_act));
        inputs = config.spatial_units;
    }
    let mut head = Vec::with_capacity(config.head_units.len());
    let mut inputs = config.rnn_units + config.spatial_units;
    for (&w, act) in config.head_units.iter().zip(config.head_activations()) {
        head.push(Dense::glorot(&mut rng, inputs, w, act));
        inputs = w;
    }
    Ok(TwoBranchNet {
        arch: config.clone(),
        rnn,
        spatial,
        head,
        reg: RegSpec::default(),
    })
}

impl TwoBranchNet {
    pub fn param_count(&self) -> usize {
        self.rnn.iter().map(Recurrent::param_count).sum::<usize>()
            + self.spatial.iter().map(Dense::param_count).sum::<usize>()
            + self.head.iter().map(Dense::param_count).sum::<usize>()
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.rnn.len() {
            for t in ["kernel", "recurrent_kernel", "bias"] {
                names.push(format!("rnn{i}.{t}"));
            }
        }
        for (prefix, n) in [("spatial", self.spatial.len()), ("head", self.head.len())] {
            for i in 0..n {
                names.push(format!("{prefix}{i}.kernel"));
                names.push(format!("{prefix}{i}.bias"));
            }
        }
        names
    }

    /// Mutable views of every parameter tensor, in `tensor_names` order.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in self.rnn.iter_mut() {
            out.push(l.kernel.as_slice_mut().expect("standard layout"));
            out.push(l.recurrent_kernel.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        for l in self.spatial.iter_mut().chain(self.head.iter_mut()) {
            out.push(l.kernel.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn tensor_sizes(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for l in &self.rnn {
            out.extend([l.kernel.len(), l.recurrent_kernel.len(), l.bias.len()]);
        }
        for l in self.spatial.iter().chain(&self.head) {
            out.extend([l.kernel.len(), l.bias.len()]);
        }
        out
    }

    fn all_finite(&self) -> bool {
        let rnn = self.rnn.iter().all(|l| {
            l.kernel.iter().chain(&l.recurrent_kernel).chain(&l.bias).all(|v| v.is_finite())
        });
        let dense = self.spatial.iter().chain(&self.head).all(|l| l.kernel.iter().chain(&l.bias).all(|v| v.is_finite()));
        rnn && dense
    }

    pub fn forward(&self, temporal: ArrayView3<f64>, spatial: ArrayView2<f64>) -> Result<(Array1<f64>, ForwardTape)> {
        let (n, look_back, width) = temporal.dim();
        if width != self.arch.n_temporal() || look_back != self.arch.look_back {
            return Err(Error::ShapeMismatch(format!(
                "model expects windows of {} steps x {} features, got {look_back} x {width}",
                self.arch.look_back,
                self.arch.n_temporal()
            )));
        }
        if spatial.dim() != (n, Feature::SPATIAL.len()) {
            return Err(Error::ShapeMismatch(format!("spatial input {:?} for {n} samples", spatial.dim())));
        }
        let mut rnn_tapes = Vec::with_capacity(self.rnn.len());
        let mut seq: Array3<f64> = temporal.to_owned();
        for layer in &self.rnn {
            let (out, tape) = layer.forward(seq.view())?;
            rnn_tapes.push(tape);
            seq = out;
        }
        let last = seq.index_axis(Axis(1), look_back - 1).to_owned();

        let mut spatial_caches = Vec::with_capacity(self.spatial.len());
        let mut s_out = spatial.to_owned();
        for layer in &self.spatial {
            let (out, cache) = layer.forward(s_out.view())?;
            spatial_caches.push(cache);
            s_out = out;
        }

        let mut h = concatenate(Axis(1), &[last.view(), s_out.view()]).expect("row counts agree");
        let mut head_caches = Vec::with_capacity(self.head.len());
        for layer in &self.head {
            let (out, cache) = layer.forward(h.view())?;
            head_caches.push(cache);
            h = out;
        }
        let pred = h.column(0).to_owned();
        Ok((
            pred,
            ForwardTape {
                rnn: rnn_tapes,
                spatial: spatial_caches,
                head: head_caches,
                look_back,
            },
        ))
    }

    /// Gradients of a loss with d(loss)/d(pred) = `d_pred`, in tensor order.
    pub fn backward(&self, tape: &ForwardTape, d_pred: &Array1<f64>) -> Result<Vec<Vec<f64>>> {
        let n = d_pred.len();
        let mut head_grads = Vec::with_capacity(self.head.len());
        let mut d: Array2<f64> = d_pred.view().insert_axis(Axis(1)).to_owned();
        for (layer, cache) in self.head.iter().zip(&tape.head).rev() {
            let (dx, g) = layer.backward(cache, d.view())?;
            head_grads.push(g);
            d = dx;
        }
        head_grads.reverse();

        let u = self.arch.rnn_units;
        let d_last = d.slice(s![.., 0..u]).to_owned();
        let mut d_spatial = d.slice(s![.., u..]).to_owned();
        let mut spatial_grads = Vec::with_capacity(self.spatial.len());
        for (layer, cache) in self.spatial.iter().zip(&tape.spatial).rev() {
            let (dx, g) = layer.backward(cache, d_spatial.view())?;
            spatial_grads.push(g);
            d_spatial = dx;
        }
        spatial_grads.reverse();

        let mut d_seq = Array3::zeros((n, tape.look_back, u));
        d_seq.index_axis_mut(Axis(1), tape.look_back - 1).assign(&d_last);
        let mut rnn_grads = Vec::with_capacity(self.rnn.len());
        for (layer, rt) in self.rnn.iter().zip(&tape.rnn).rev() {
            let (dx, g) = layer.backward(rt, d_seq.view())?;
            rnn_grads.push(g);
            d_seq = dx;
        }
        rnn_grads.reverse();

        let mut out = Vec::new();
        for g in rnn_grads {
            out.push(flat(&g.kernel));
            out.push(flat(&g.recurrent_kernel));
            out.push(flat(&g.bias));
        }
        for g in spatial_grads.into_iter().chain(head_grads) {
            out.push(flat(&g.kernel));
            out.push(flat(&g.bias));
        }
        Ok(out)
    }

    /// Regularization penalty over recurrent-layer kernels, recurrent kernels and biases.
    pub fn penalty(&self) -> f64 {
        self.rnn
            .iter()
            .map(|l| {
                self.reg.penalty(l.kernel.as_slice().expect("standard layout"))
                    + self.reg.penalty(l.recurrent_kernel.as_slice().expect("standard layout"))
                    + self.reg.penalty(l.bias.as_slice().expect("standard layout"))
            })
            .sum()
    }

    fn add_penalty_grads(&self, grads: &mut [Vec<f64>]) {
        for (k, l) in self.rnn.iter().enumerate() {
            let tensors = [&l.kernel.as_slice(), &l.recurrent_kernel.as_slice(), &l.bias.as_slice()];
            for (j, values) in tensors.into_iter().enumerate() {
                self.reg.accumulate_grad(values.expect("standard layout"), &mut grads[3 * k + j]);
            }
        }
    }

    /// Training objective on `batch`: (MAE + penalty, MAE, gradients).
    pub fn loss_and_grads(&self, batch: &SampleBatch) -> Result<(f64, f64, Vec<Vec<f64>>)> {
        let targets = batch.targets()?;
        let (pred, tape) = self.forward(batch.temporal.view(), batch.spatial.view())?;
        let (mae, d_pred) = mae_loss(pred.view(), targets.view())?;
        let mut grads = self.backward(&tape, &d_pred)?;
        self.add_penalty_grads(&mut grads);
        Ok((mae + self.penalty(), mae, grads))
    }

    /// Total loss and the kink-side signature used by gradient checking.
    fn loss_signature(&self, batch: &SampleBatch) -> Result<(f64, u64)> {
        let targets = batch.targets()?;
        let (pred, tape) = self.forward(batch.temporal.view(), batch.spatial.view())?;
        let (mae, _) = mae_loss(pred.view(), targets.view())?;
        let mut sig = 0u64;
        for (layer, cache) in self.spatial.iter().zip(&tape.spatial).chain(self.head.iter().zip(&tape.head)) {
            if layer.activation.has_kink() {
                fold_signs(&mut sig, cache.pre.iter());
            }
        }
        let err = &pred - targets;
        fold_signs(&mut sig, err.iter());
        Ok((mae + self.penalty(), sig))
    }

    /// Raw predictions in chunks.
    pub fn predict_raw(&self, batch: &SampleBatch) -> Result<Array1<f64>> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let n = batch.len();
        let mut out = Array1::zeros(n);
        let mut start = 0;
        while start < n {
            let end = (start + EVAL_CHUNK).min(n);
            let (pred, _) = self.forward(
                batch.temporal.slice(s![start..end, .., ..]),
                batch.spatial.slice(s![start..end, ..]),
            )?;
            out.slice_mut(s![start..end]).assign(&pred);
            start = end;
        }
        Ok(out)
    }
}

/// Gradient check of the full training objective on one batch.
pub struct NetObjective<'a> {
    pub net: TwoBranchNet,
    pub batch: &'a SampleBatch,
}

impl Objective for NetObjective<'_> {
    fn tensor_names(&self) -> Vec<String> {
        self.net.tensor_names()
    }

    fn tensor_mut(&mut self, tensor: usize) -> &mut [f64] {
        self.net.tensors_mut().swap_remove(tensor)
    }

    fn evaluate(&self) -> (f64, u64) {
        self.net.loss_signature(self.batch).expect("batch validated before checking")
    }

    fn gradient(&self) -> Vec<Vec<f64>> {
        self.net.loss_and_grads(self.batch).expect("batch validated before checking").2
    }

    fn parameter_kinks(&self) -> Vec<bool> {
        let l1 = self.net.reg.l1 > 0.0;
        let n_rnn = 3 * self.net.rnn.len();
        (0..self.net.tensor_names().len()).map(|t| l1 && t < n_rnn).collect()
    }

    /// Sum over samples of |per-sample MAE gradient|, plus |penalty
    /// gradient|, per entry.
    fn gradient_scale(&self) -> Option<Vec<Vec<f64>>> {
        let mut bare = self.net.clone();
        bare.reg = RegSpec::none();
        let n = self.batch.len() as f64;
        let mut scale: Vec<Vec<f64>> = self.net.tensor_sizes().iter().map(|&k| vec![0.0; k]).collect();
        for i in 0..self.batch.len() {
            let (_, _, g) = bare.loss_and_grads(&self.batch.select(&[i])).ok()?;
            for (s, g) in scale.iter_mut().flatten().zip(g.iter().flatten()) {
                *s += g.abs() / n;
            }
        }
        let mut penalty: Vec<Vec<f64>> = scale.iter().map(|t| vec![0.0; t.len()]).collect();
        self.net.add_penalty_grads(&mut penalty);
        for (s, p) in scale.iter_mut().flatten().zip(penalty.iter().flatten()) {
            *s += p.abs();
        }
        Some(scale)
    }
}

/// Central-difference check of every (or a sampled subset of each) parameter
/// tensor against backpropagation, on MAE plus penalties.
pub fn grad_check(net: &TwoBranchNet, batch: &SampleBatch, eps: f64, max_per_tensor: Option<usize>, sample_seed: u64) -> Result<GradCheckReport> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    net.loss_and_grads(batch)?;
    let mut obj = NetObjective { net: net.clone(), batch };
    Ok(gradcheck::check(&mut obj, eps, max_per_tensor, sample_seed))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mae: f64,
    pub val_mae: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub net: TwoBranchNet,
    pub scaler: Option<Scaler>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

fn mean_abs_error(net: &TwoBranchNet, batch: &SampleBatch) -> Result<f64> {
    let pred = net.predict_raw(batch)?;
    let targets = batch.targets()?;
    Ok((&pred - targets).mapv(f64::abs).mean().expect("non-empty"))
}

fn check_batch(net: &TwoBranchNet, batch: &SampleBatch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if batch.look_back() != net.arch.look_back || batch.temporal_features != Feature::temporal(net.arch.include_max15) {
        return Err(Error::ShapeMismatch(format!(
            "batch windows ({} steps, {:?}) do not match {}",
            batch.look_back(),
            batch.temporal_features,
            net.arch.label()
        )));
    }
    batch.targets()?;
    Ok(())
}

/// Minibatch Nadam on MAE plus penalties with a seeded shuffle; keeps the
/// weights from the epoch with the lowest validation MAE and stops after
/// `early_stop_patience` epochs without improvement.
pub fn train(net: TwoBranchNet, train: &SampleBatch, val: &SampleBatch, tc: &TrainConfig) -> Result<TrainedModel> {
    tc.validate()?;
    check_batch(&net, train)?;
    check_batch(&net, val)?;
    if train.scaling != val.scaling {
        return Err(Error::ScalerMismatch("training and validation batches were scaled differently".into()));
    }
    let mut net = net;
    let mut opt = NadamState::new(tc.nadam(), &net.tensor_sizes());
    let mut rng = seed::rng(seed::derive(tc.seed, 0x5348_5546, 0));
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0usize, net.clone());
    let mut since_best = 0;
    for epoch in 1..=tc.max_epochs {
        order.shuffle(&mut rng);
        for (step, rows) in order.chunks(tc.batch_size).enumerate() {
            let mini = train.select(rows);
            let (total, mae, grads) = net.loss_and_grads(&mini)?;
            if !total.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    detail: format!("loss {total}, mae {mae}, {} samples", rows.len()),
                });
            }
            let mut params = net.tensors_mut();
            opt.step(&mut params, &grads)?;
        }
        if !net.all_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                step: 0,
                detail: "parameters became non-finite".into(),
            });
        }
        let train_mae = mean_abs_error(&net, train)?;
        let val_mae = mean_abs_error(&net, val)?;
        if !val_mae.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                step: 0,
                detail: "validation MAE is not finite".into(),
            });
        }
        history.push(EpochRecord { epoch, train_mae, val_mae });
        if val_mae < best.0 {
            best = (val_mae, epoch, net.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= tc.early_stop_patience {
                break;
            }
        }
    }
    Ok(TrainedModel {
        net: best.2,
        scaler: None,
        history,
        best_epoch: best.1,
    })
}

impl TrainedModel {
    pub fn arch(&self) -> &ArchConfig {
        &self.net.arch
    }

    pub fn best_val_mae(&self) -> f64 {
        self.history.iter().find(|h| h.epoch == self.best_epoch).map_or(f64::NAN, |h| h.val_mae)
    }

    fn check_inputs(&self, batch: &SampleBatch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let expected = self.scaler.as_ref().map(Scaler::fingerprint);
        if batch.scaling != expected {
            return Err(Error::ScalerMismatch(format!(
                "batch scaling {:?} differs from the model's {:?}",
                batch.scaling, expected
            )));
        }
        if batch.look_back() != self.net.arch.look_back || batch.temporal_features != Feature::temporal(self.net.arch.include_max15) {
            return Err(Error::ShapeMismatch(format!(
                "batch windows ({} steps, {} features) do not match {}",
                batch.look_back(),
                batch.n_temporal(),
                self.net.arch.label()
            )));
        }
        Ok(())
    }

    /// Raw depths in meters, unclamped, for scoring.
    pub fn predict(&self, batch: &SampleBatch) -> Result<Array1<f64>> {
        self.check_inputs(batch)?;
        self.net.predict_raw(batch)
    }

    /// Depths clamped at 0 m for reporting.
    pub fn predict_clamped(&self, batch: &SampleBatch) -> Result<Array1<f64>> {
        Ok(self.predict(batch)?.mapv(|d| d.max(0.0)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ModelFile::from_trained(self);
        let json = serde_json::to_string_pretty(&file)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<TrainedModel> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile = serde_json::from_str(&raw)?;
        file.into_trained()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub name: String,
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub activation: Option<Activation>,
    pub tensors: Vec<TensorRecord>,
}

/// On-disk model: versioned layer list with row-major tensors, plus the
/// embedded scaler and training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: String,
    pub arch: ArchConfig,
    pub reg: RegSpec,
    pub layers: Vec<LayerRecord>,
    pub scaler: Option<Scaler>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

fn tensor(name: &str, shape: &[usize], data: Vec<f64>) -> TensorRecord {
    TensorRecord {
        name: name.to_string(),
        shape: shape.to_vec(),
        data,
    }
}

fn matrix(record: &TensorRecord) -> Result<Array2<f64>> {
    match record.shape.as_slice() {
        [r, c] => Array2::from_shape_vec((*r, *c), record.data.clone())
            .map_err(|e| Error::ShapeMismatch(format!("tensor {}: {e}", record.name))),
        other => Err(Error::ShapeMismatch(format!("tensor {} has shape {other:?}, expected 2-D", record.name))),
    }
}

fn vector(record: &TensorRecord) -> Result<Array1<f64>> {
    match record.shape.as_slice() {
        [n] if *n == record.data.len() => Ok(Array1::from(record.data.clone())),
        other => Err(Error::ShapeMismatch(format!("tensor {} has shape {other:?}, expected 1-D", record.name))),
    }
}

impl ModelFile {
    pub fn from_trained(model: &TrainedModel) -> Self {
        let net = &model.net;
        let mut layers = Vec::new();
        for (i, l) in net.rnn.iter().enumerate() {
            layers.push(LayerRecord {
                name: format!("rnn{i}"),
                kind: l.cell.name().to_ascii_lowercase(),
                activation: Some(Activation::Tanh),
                tensors: vec![
                    tensor("kernel", l.kernel.shape(), flat(&l.kernel)),
                    tensor("recurrent_kernel", l.recurrent_kernel.shape(), flat(&l.recurrent_kernel)),
                    tensor("bias", l.bias.shape(), flat(&l.bias)),
                ],
            });
        }
        for (prefix, group) in [("spatial", &net.spatial), ("head", &net.head)] {
            for (i, l) in group.iter().enumerate() {
                layers.push(LayerRecord {
                    name: format!("{prefix}{i}"),
                    kind: "dense".into(),
                    activation: Some(l.activation),
                    tensors: vec![tensor("kernel", l.kernel.shape(), flat(&l.kernel)), tensor("bias", l.bias.shape(), flat(&l.bias))],
                });
            }
        }
        ModelFile {
            version: MODEL_FILE_VERSION.into(),
            arch: net.arch.clone(),
            reg: net.reg,
            layers,
            scaler: model.scaler.clone(),
            history: model.history.clone(),
            best_epoch: model.best_epoch,
        }
    }

    pub fn into_trained(self) -> Result<TrainedModel> {
        if self.version != MODEL_FILE_VERSION {
            return Err(Error::ModelVersion(self.version));
        }
        self.arch.validate()?;
        let mut rnn = Vec::new();
        let mut spatial = Vec::new();
        let mut head = Vec::new();
        for layer in &self.layers {
            let find = |name: &str| {
                layer
                    .tensors
                    .iter()
                    .find(|t| t.name == name)
                    .ok_or_else(|| Error::ShapeMismatch(format!("layer {} lacks tensor {name}", layer.name)))
            };
            match layer.kind.as_str() {
                "lstm" | "gru" => {
                    let cell = layer.kind.parse::<CellType>()?;
                    rnn.push(Recurrent::new(cell, matrix(find("kernel")?)?, matrix(find("recurrent_kernel")?)?, vector(find("bias")?)?)?);
                }
                "dense" => {
                    let act = layer
                        .activation
                        .ok_or_else(|| Error::ShapeMismatch(format!("dense layer {} lacks an activation", layer.name)))?;
                    let dense = Dense::new(matrix(find("kernel")?)?, vector(find("bias")?)?, act)?;
                    if layer.name.starts_with("spatial") {
                        spatial.push(dense);
                    } else {
                        head.push(dense);
                    }
                }
                other => return Err(Error::ShapeMismatch(format!("unknown layer kind {other}"))),
            }
        }
        let net = TwoBranchNet {
            arch: self.arch,
            rnn,
            spatial,
            head,
            reg: self.reg,
        };
        if net.param_count() != net.arch.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "model file holds {} parameters, architecture needs {}",
                net.param_count(),
                net.arch.param_count()
            )));
        }
        Ok(TrainedModel {
            net,
            scaler: self.scaler,
            history: self.history,
            best_epoch: self.best_epoch,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::random_batch;

    fn small() -> ArchConfig {
        ArchConfig {
            rnn_type: CellType::Gru,
            rnn_layers: 1,
            rnn_units: 12,
            spatial_layers: 2,
            spatial_units: 4,
            spatial_act: Activation::Selu,
            head_units: vec![32, 16, 1],
            head_act: HeadActivation::Uniform(Activation::Linear),
            look_back: 1,
            include_max15: false,
        }
    }

    #[test]
    fn champion_param_count_by_hand() {
        let arch = ArchConfig::champion();
        // GRU on 5 inputs with 20 units
        let gru = 3 * (5 * 20 + 20 * 20 + 20);
        let spatial = (3 * 4 + 4) + (4 * 4 + 4);
        let head = (24 * 64 + 64) + (64 * 64 + 64) + (64 * 16 + 16) + (16 + 1);
        assert_eq!(gru, 1560);
        assert_eq!(arch.param_count(), gru + spatial + head);
        let net = build_model(&arch, 1).unwrap();
        assert_eq!(net.param_count(), arch.param_count());
        assert_eq!(net.tensor_sizes().iter().sum::<usize>(), arch.param_count());
    }

    #[test]
    fn output_is_one_column() {
        let arch = small();
        let net = build_model(&arch, 3).unwrap();
        let b = random_batch(&arch, 7, 4);
        let (pred, _) = net.forward(b.temporal.view(), b.spatial.view()).unwrap();
        assert_eq!(pred.len(), 7);
    }

    #[test]
    fn stacked_layers_consume_full_sequences() {
        let arch = ArchConfig { rnn_layers: 3, rnn_type: CellType::Lstm, look_back: 4, ..small() };
        let net = build_model(&arch, 3).unwrap();
        assert_eq!(net.rnn.len(), 3);
        assert_eq!(net.rnn[0].inputs(), 4);
        assert_eq!(net.rnn[1].inputs(), 12);
        assert_eq!(net.rnn[2].inputs(), 12);
        let b = random_batch(&arch, 3, 2);
        assert!(net.forward(b.temporal.view(), b.spatial.view()).is_ok());
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            ArchConfig { rnn_units: 7, ..small() },
            ArchConfig { head_units: vec![32, 16, 2], ..small() },
            ArchConfig { look_back: 3, ..small() },
            ArchConfig { head_act: HeadActivation::PerLayer(vec![Activation::Relu]), ..small() },
            ArchConfig { spatial_act: Activation::Tanh, ..small() },
        ];
        for arch in bad {
            assert!(matches!(build_model(&arch, 0), Err(Error::InvalidConfig(_))), "{arch:?}");
        }
    }

    #[test]
    fn max15_only_widens_temporal_input() {
        let without = build_model(&ArchConfig::champion(), 1).unwrap();
        let with = build_model(&ArchConfig { include_max15: false, ..ArchConfig::champion() }, 1).unwrap();
        assert_eq!(with.spatial.iter().map(|l| l.kernel.dim()).collect::<Vec<_>>(), without.spatial.iter().map(|l| l.kernel.dim()).collect::<Vec<_>>());
        assert_eq!(with.head.iter().map(|l| l.kernel.dim()).collect::<Vec<_>>(), without.head.iter().map(|l| l.kernel.dim()).collect::<Vec<_>>());
        assert_eq!(without.rnn[0].inputs(), 5);
        assert_eq!(with.rnn[0].inputs(), 4);
    }

    #[test]
    fn penalty_only_covers_recurrent_layers() {
        let mut net = build_model(&small(), 2).unwrap();
        for t in net.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        assert_eq!(net.penalty(), 0.0);
        net.head[0].kernel[[0, 0]] = 5.0;
        assert_eq!(net.penalty(), 0.0);
        net.rnn[0].kernel[[0, 0]] = 2.0;
        assert!((net.penalty() - 0.06).abs() < 1e-15);
    }

    #[test]
    fn champion_gradients_match_finite_differences() {
        let arch = ArchConfig::champion();
        let net = build_model(&arch, 11).unwrap();
        let batch = random_batch(&arch, 8, 12);
        let report = grad_check(&net, &batch, gradcheck::DEFAULT_EPS, None, 0).unwrap();
        let worst = report.worst().unwrap();
        assert!(worst.max_rel_error < 1e-4, "{worst:?}, skipped {}", report.skipped_kinks);
        assert_eq!(report.checked() + report.skipped_kinks, arch.param_count());
    }

    #[test]
    fn weights_next_to_the_l1_kink_are_skipped() {
        let arch = ArchConfig::champion();
        let mut net = build_model(&arch, 3).unwrap();
        net.rnn[0].recurrent_kernel[[4, 7]] = 3e-6;
        let batch = random_batch(&arch, 8, 4);
        let report = grad_check(&net, &batch, gradcheck::DEFAULT_EPS, None, 0).unwrap();
        assert!(report.skipped_kinks >= 1);
        assert!(report.worst().unwrap().max_rel_error < 1e-4, "{:?}", report.worst());
        // Zero-initialized recurrent biases sit exactly on the kink, where the
        // central difference and the zero subgradient agree.
        assert!(net.rnn[0].bias.iter().all(|b| *b == 0.0));
        assert!(report.skipped_kinks < 5);
    }

    #[test]
    fn permuting_samples_permutes_predictions() {
        let arch = ArchConfig::champion();
        let net = build_model(&arch, 5).unwrap();
        let b = random_batch(&arch, 9, 6);
        let perm = [3usize, 8, 0, 1, 7, 2, 6, 4, 5];
        let p = net.predict_raw(&b).unwrap();
        let q = net.predict_raw(&b.select(&perm)).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            assert_eq!(q[new], p[old]);
        }
    }

    fn constant_batch(arch: &ArchConfig, n: usize) -> SampleBatch {
        let mut b = random_batch(arch, n, 21);
        b.temporal.fill(0.3);
        b.spatial.fill(-0.2);
        b.targets = Some(Array1::from_elem(n, 0.05));
        b
    }

    #[test]
    fn constant_target_is_learned() {
        let arch = ArchConfig::champion();
        let train_b = constant_batch(&arch, 256);
        let val_b = constant_batch(&arch, 64);
        let tc = TrainConfig { batch_size: 32, max_epochs: 50, early_stop_patience: 49, seed: 3, ..TrainConfig::default() };
        let m = train(build_model(&arch, 9).unwrap(), &train_b, &val_b, &tc).unwrap();
        let first = m.history[0].train_mae;
        let last = m.history.last().unwrap().train_mae;
        assert!(last < first);
        assert!(m.history.iter().any(|h| h.train_mae < 1e-3), "{:?}", m.history.last());
        let pred = m.predict(&train_b).unwrap();
        assert!(pred.iter().all(|p| (p - 0.05).abs() < 1e-2));

        let again = train(build_model(&arch, 9).unwrap(), &train_b, &val_b, &tc).unwrap();
        assert_eq!(m.history, again.history);
        assert_eq!(m.net, again.net);
    }

    #[test]
    fn predict_contract() {
        let arch = small();
        let net = build_model(&arch, 1).unwrap();
        let model = TrainedModel { net, scaler: None, history: vec![], best_epoch: 0 };
        let b = random_batch(&arch, 5, 1);
        assert_eq!(model.predict(&b).unwrap(), model.predict(&b).unwrap());
        assert!(matches!(model.predict(&b.select(&[])), Err(Error::EmptyBatch)));
        let mut scaled = b.clone();
        scaled.scaling = Some(7);
        assert!(matches!(model.predict(&scaled), Err(Error::ScalerMismatch(_))));
        assert!(model.predict_clamped(&b).unwrap().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn model_file_round_trip() {
        let arch = ArchConfig::champion();
        let model = TrainedModel {
            net: build_model(&arch, 4).unwrap(),
            scaler: None,
            history: vec![EpochRecord { epoch: 1, train_mae: 0.5, val_mae: 0.25 }],
            best_epoch: 1,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        model.save(&path).unwrap();
        let back = TrainedModel::load(&path).unwrap();
        assert_eq!(back, model);
        let raw = std::fs::read_to_string(&path).unwrap();
        assert!(raw.contains(MODEL_FILE_VERSION));
    }
}
