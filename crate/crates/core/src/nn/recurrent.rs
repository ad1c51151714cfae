//! LSTM and GRU layers returning the full hidden sequence, with
//! backpropagation through time.
//!
//! Gate blocks are laid out column-wise in every parameter tensor:
//! LSTM `[input, forget, candidate, output]`, GRU `[update, reset, candidate]`.
//! The GRU applies the reset gate before the recurrent product and blends as
//! `h' = z*h + (1-z)*candidate`, so `z = 1` keeps the previous state.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::activation::sigmoid;
use super::init;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CellType {
    #[serde(rename = "LSTM")]
    Lstm,
    #[serde(rename = "GRU")]
    Gru,
}

impl CellType {
    pub fn gates(self) -> usize {
        match self {
            CellType::Lstm => 4,
            CellType::Gru => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CellType::Lstm => "LSTM",
            CellType::Gru => "GRU",
        }
    }
}

impl fmt::Display for CellType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CellType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "LSTM" => Ok(CellType::Lstm),
            "GRU" => Ok(CellType::Gru),
            other => Err(Error::ConfigInvalid(format!("unknown cell type {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Recurrent {
    pub cell: CellType,
    pub units: usize,
    /// `[in, gates*units]`
    pub kernel: Array2<f64>,
    /// `[units, gates*units]`
    pub recurrent_kernel: Array2<f64>,
    /// `[gates*units]`
    pub bias: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentGrads {
    pub kernel: Array2<f64>,
    pub recurrent_kernel: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Carried state; `c` is empty for GRU.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState {
    pub h: Array2<f64>,
    pub c: Array2<f64>,
}

#[derive(Clone, Debug)]
pub enum StepCache {
    Lstm {
        x: Array2<f64>,
        h_prev: Array2<f64>,
        c_prev: Array2<f64>,
        i: Array2<f64>,
        f: Array2<f64>,
        g: Array2<f64>,
        o: Array2<f64>,
        tanh_c: Array2<f64>,
    },
    Gru {
        x: Array2<f64>,
        h_prev: Array2<f64>,
        z: Array2<f64>,
        r: Array2<f64>,
        candidate: Array2<f64>,
        reset_h: Array2<f64>,
    },
}

#[derive(Clone, Debug)]
pub struct RecurrentTape {
    pub steps: Vec<StepCache>,
}

impl Recurrent {
    pub fn new(cell: CellType, kernel: Array2<f64>, recurrent_kernel: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        let units = recurrent_kernel.nrows();
        let width = cell.gates() * units;
        if recurrent_kernel.ncols() != width || kernel.ncols() != width || bias.len() != width {
            return Err(Error::ShapeMismatch(format!(
                "{cell} with {units} units needs {width} gate columns; got kernel {:?}, recurrent {:?}, bias {}",
                kernel.dim(),
                recurrent_kernel.dim(),
                bias.len()
            )));
        }
        Ok(Recurrent {
            cell,
            units,
            kernel,
            recurrent_kernel,
            bias,
        })
    }

    /// Glorot input kernel, orthogonal recurrent kernel, zero bias except a
    /// unit LSTM forget-gate bias.
    pub fn init(rng: &mut impl Rng, cell: CellType, inputs: usize, units: usize) -> Self {
        let width = cell.gates() * units;
        let kernel = init::glorot_uniform(rng, inputs, width);
        let recurrent_kernel = init::orthogonal(rng, units, width);
        let mut bias = Array1::zeros(width);
        if cell == CellType::Lstm {
            bias.slice_mut(s![units..2 * units]).fill(1.0);
        }
        Recurrent {
            cell,
            units,
            kernel,
            recurrent_kernel,
            bias,
        }
    }

    pub fn inputs(&self) -> usize {
        self.kernel.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.kernel.len() + self.recurrent_kernel.len() + self.bias.len()
    }

    pub fn zero_state(&self, n: usize) -> RecurrentState {
        let c_units = if self.cell == CellType::Lstm { self.units } else { 0 };
        RecurrentState {
            h: Array2::zeros((n, self.units)),
            c: Array2::zeros((n, c_units)),
        }
    }

    /// Advance one time step for a batch `x_t` of shape `[n, in]`.
    pub fn step(&self, x_t: ArrayView2<f64>, state: &RecurrentState) -> (RecurrentState, StepCache) {
        let u = self.units;
        let mut pre = x_t.dot(&self.kernel) + &self.bias;
        match self.cell {
            CellType::Lstm => {
                pre += &state.h.dot(&self.recurrent_kernel);
                let i = pre.slice(s![.., 0..u]).mapv(sigmoid);
                let f = pre.slice(s![.., u..2 * u]).mapv(sigmoid);
                let g = pre.slice(s![.., 2 * u..3 * u]).mapv(f64::tanh);
                let o = pre.slice(s![.., 3 * u..4 * u]).mapv(sigmoid);
                let c = &f * &state.c + &i * &g;
                let tanh_c = c.mapv(f64::tanh);
                let h = &o * &tanh_c;
                let cache = StepCache::Lstm {
                    x: x_t.to_owned(),
                    h_prev: state.h.clone(),
                    c_prev: state.c.clone(),
                    i,
                    f,
                    g,
                    o,
                    tanh_c,
                };
                (RecurrentState { h, c }, cache)
            }
            CellType::Gru => {
                let gates = state.h.dot(&self.recurrent_kernel.slice(s![.., 0..2 * u]));
                let mut zr = pre.slice(s![.., 0..2 * u]).to_owned();
                zr += &gates;
                zr.mapv_inplace(sigmoid);
                let z = zr.slice(s![.., 0..u]).to_owned();
                let r = zr.slice(s![.., u..2 * u]).to_owned();
                let reset_h = &r * &state.h;
                let mut cand = pre.slice(s![.., 2 * u..3 * u]).to_owned();
                cand += &reset_h.dot(&self.recurrent_kernel.slice(s![.., 2 * u..3 * u]));
                cand.mapv_inplace(f64::tanh);
                let mut h = Array2::zeros(state.h.raw_dim());
                Zip::from(&mut h)
                    .and(&z)
                    .and(&state.h)
                    .and(&cand)
                    .for_each(|out, &z, &hp, &c| *out = z * hp + (1.0 - z) * c);
                let cache = StepCache::Gru {
                    x: x_t.to_owned(),
                    h_prev: state.h.clone(),
                    z,
                    r,
                    candidate: cand,
                    reset_h,
                };
                (
                    RecurrentState {
                        h,
                        c: Array2::zeros((x_t.nrows(), 0)),
                    },
                    cache,
                )
            }
        }
    }

    /// Run a `[n, L, in]` sequence from the zero state; returns `[n, L, units]`.
    pub fn forward(&self, input: ArrayView3<f64>) -> Result<(Array3<f64>, RecurrentTape)> {
        let (n, steps, width) = input.dim();
        if width != self.inputs() {
            return Err(Error::ShapeMismatch(format!(
                "{} layer expects {} inputs, got {width}",
                self.cell,
                self.inputs()
            )));
        }
        let mut out = Array3::zeros((n, steps, self.units));
        let mut state = self.zero_state(n);
        let mut tape = Vec::with_capacity(steps);
        for t in 0..steps {
            let (next, cache) = self.step(input.index_axis(Axis(1), t), &state);
            out.index_axis_mut(Axis(1), t).assign(&next.h);
            tape.push(cache);
            state = next;
        }
        Ok((out, RecurrentTape { steps: tape }))
    }

    /// BPTT given d(loss)/d(h_t) for every step, `[n, L, units]`.
    pub fn backward(&self, tape: &RecurrentTape, d_output: ArrayView3<f64>) -> Result<(Array3<f64>, RecurrentGrads)> {
        let (n, steps, units) = d_output.dim();
        if units != self.units || steps != tape.steps.len() {
            return Err(Error::ShapeMismatch(format!(
                "output gradient {:?} does not match {} steps of {} units",
                d_output.dim(),
                tape.steps.len(),
                self.units
            )));
        }
        let u = self.units;
        let width = self.cell.gates() * u;
        let mut d_kernel = Array2::zeros(self.kernel.raw_dim());
        let mut d_recurrent = Array2::zeros(self.recurrent_kernel.raw_dim());
        let mut d_bias = Array1::zeros(width);
        let mut d_input = Array3::zeros((n, steps, self.inputs()));
        let mut dh_next = Array2::<f64>::zeros((n, u));
        let mut dc_next = Array2::<f64>::zeros((n, if self.cell == CellType::Lstm { u } else { 0 }));

        for t in (0..steps).rev() {
            let dh = &d_output.index_axis(Axis(1), t) + &dh_next;
            let mut d_pre = Array2::zeros((n, width));
            let (x, h_prev) = match &tape.steps[t] {
                StepCache::Lstm {
                    x,
                    h_prev,
                    c_prev,
                    i,
                    f,
                    g,
                    o,
                    tanh_c,
                } => {
                    let mut dc = dc_next.clone();
                    Zip::from(&mut dc)
                        .and(&dh)
                        .and(o)
                        .and(tanh_c)
                        .for_each(|dc, &dh, &o, &tc| *dc += dh * o * (1.0 - tc * tc));
                    Zip::from(d_pre.slice_mut(s![.., 0..u]))
                        .and(&dc)
                        .and(g)
                        .and(i)
                        .for_each(|d, &dc, &g, &i| *d = dc * g * i * (1.0 - i));
                    Zip::from(d_pre.slice_mut(s![.., u..2 * u]))
                        .and(&dc)
                        .and(c_prev)
                        .and(f)
                        .for_each(|d, &dc, &cp, &f| *d = dc * cp * f * (1.0 - f));
                    Zip::from(d_pre.slice_mut(s![.., 2 * u..3 * u]))
                        .and(&dc)
                        .and(i)
                        .and(g)
                        .for_each(|d, &dc, &i, &g| *d = dc * i * (1.0 - g * g));
                    Zip::from(d_pre.slice_mut(s![.., 3 * u..4 * u]))
                        .and(&dh)
                        .and(tanh_c)
                        .and(o)
                        .for_each(|d, &dh, &tc, &o| *d = dh * tc * o * (1.0 - o));
                    dc_next = dc * f;
                    dh_next = d_pre.dot(&self.recurrent_kernel.t());
                    (x, h_prev)
                }
                StepCache::Gru {
                    x,
                    h_prev,
                    z,
                    r,
                    candidate,
                    reset_h,
                } => {
                    // candidate pre-activation
                    Zip::from(d_pre.slice_mut(s![.., 2 * u..3 * u]))
                        .and(&dh)
                        .and(z)
                        .and(candidate)
                        .for_each(|d, &dh, &z, &c| *d = dh * (1.0 - z) * (1.0 - c * c));
                    let u_cand = self.recurrent_kernel.slice(s![.., 2 * u..3 * u]);
                    let d_reset_h = d_pre.slice(s![.., 2 * u..3 * u]).dot(&u_cand.t());
                    d_recurrent
                        .slice_mut(s![.., 2 * u..3 * u])
                        .scaled_add(1.0, &reset_h.t().dot(&d_pre.slice(s![.., 2 * u..3 * u])));
                    Zip::from(d_pre.slice_mut(s![.., 0..u]))
                        .and(&dh)
                        .and(h_prev)
                        .and(candidate)
                        .and(z)
                        .for_each(|d, &dh, &hp, &c, &z| *d = dh * (hp - c) * z * (1.0 - z));
                    Zip::from(d_pre.slice_mut(s![.., u..2 * u]))
                        .and(&d_reset_h)
                        .and(h_prev)
                        .and(r)
                        .for_each(|d, &drh, &hp, &r| *d = drh * hp * r * (1.0 - r));
                    let d_zr = d_pre.slice(s![.., 0..2 * u]);
                    d_recurrent
                        .slice_mut(s![.., 0..2 * u])
                        .scaled_add(1.0, &h_prev.t().dot(&d_zr));
                    let mut dhp = &dh * z + &d_reset_h * r;
                    dhp += &d_zr.dot(&self.recurrent_kernel.slice(s![.., 0..2 * u]).t());
                    dh_next = dhp;
                    (x, h_prev)
                }
            };
            d_kernel.scaled_add(1.0, &x.t().dot(&d_pre));
            if self.cell == CellType::Lstm {
                d_recurrent.scaled_add(1.0, &h_prev.t().dot(&d_pre));
            }
            d_bias += &d_pre.sum_axis(Axis(0));
            d_input.index_axis_mut(Axis(1), t).assign(&d_pre.dot(&self.kernel.t()));
        }
        Ok((
            d_input,
            RecurrentGrads {
                kernel: d_kernel,
                recurrent_kernel: d_recurrent,
                bias: d_bias,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::flat;
    use crate::nn::gradcheck::{check, max_relative_error, Objective};
    use crate::seed;
    use rand_distr::{Distribution, StandardNormal};

    fn zeros(cell: CellType, inputs: usize, units: usize) -> Recurrent {
        let w = cell.gates() * units;
        Recurrent::new(cell, Array2::zeros((inputs, w)), Array2::zeros((units, w)), Array1::zeros(w)).unwrap()
    }

    fn random_input(rng: &mut impl Rng, shape: (usize, usize, usize)) -> Array3<f64> {
        Array3::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
    }

    #[test]
    fn zero_weights_give_zero_outputs() {
        let mut rng = seed::rng(2);
        let x = random_input(&mut rng, (3, 5, 2));
        for cell in [CellType::Lstm, CellType::Gru] {
            let (h, _) = zeros(cell, 2, 4).forward(x.view()).unwrap();
            assert!(h.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn saturated_update_gate_retains_zero_state() {
        let mut layer = Recurrent::init(&mut seed::rng(5), CellType::Gru, 2, 3);
        layer.bias.slice_mut(s![0..3]).fill(1e3);
        let x = random_input(&mut seed::rng(6), (2, 6, 2));
        let (h, _) = layer.forward(x.view()).unwrap();
        assert!(h.iter().all(|v| v.abs() < 1e-300));
    }

    #[test]
    fn scalar_lstm_by_hand() {
        let layer = Recurrent::new(
            CellType::Lstm,
            Array2::from_elem((1, 4), 0.5),
            Array2::from_elem((1, 4), 0.5),
            Array1::zeros(4),
        )
        .unwrap();
        let x = Array3::from_elem((1, 2, 1), 1.0);
        let (h, _) = layer.forward(x.view()).unwrap();
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let (mut hp, mut cp) = (0.0f64, 0.0f64);
        let mut expected = vec![];
        for _ in 0..2 {
            let a = 0.5 * 1.0 + 0.5 * hp;
            cp = sig(a) * cp + sig(a) * a.tanh();
            hp = sig(a) * cp.tanh();
            expected.push(hp);
        }
        for t in 0..2 {
            assert!((h[[0, t, 0]] - expected[t]).abs() < 1e-12);
        }
    }

    #[test]
    fn stepwise_equals_sequence() {
        for cell in [CellType::Lstm, CellType::Gru] {
            let layer = Recurrent::init(&mut seed::rng(7), cell, 3, 4);
            let x = random_input(&mut seed::rng(8), (2, 5, 3));
            let (full, _) = layer.forward(x.view()).unwrap();
            let mut state = layer.zero_state(2);
            for t in 0..5 {
                let (next, _) = layer.step(x.index_axis(Axis(1), t), &state);
                assert_eq!(next.h, full.index_axis(Axis(1), t));
                state = next;
            }
        }
    }

    pub(crate) struct SeqProbe {
        pub layer: Recurrent,
        pub x: Array3<f64>,
        pub weights: Array3<f64>,
    }

    impl Objective for SeqProbe {
        fn tensor_names(&self) -> Vec<String> {
            ["kernel", "recurrent_kernel", "bias", "input"].map(String::from).to_vec()
        }
        fn tensor_mut(&mut self, i: usize) -> &mut [f64] {
            match i {
                0 => self.layer.kernel.as_slice_mut().unwrap(),
                1 => self.layer.recurrent_kernel.as_slice_mut().unwrap(),
                2 => self.layer.bias.as_slice_mut().unwrap(),
                _ => self.x.as_slice_mut().unwrap(),
            }
        }
        fn evaluate(&self) -> (f64, u64) {
            let (h, _) = self.layer.forward(self.x.view()).unwrap();
            ((&h * &self.weights).sum(), 0)
        }
        fn gradient(&self) -> Vec<Vec<f64>> {
            let (_, tape) = self.layer.forward(self.x.view()).unwrap();
            let (dx, g) = self.layer.backward(&tape, self.weights.view()).unwrap();
            vec![flat(&g.kernel), flat(&g.recurrent_kernel), flat(&g.bias), flat(&dx)]
        }
    }

    pub(crate) fn probe(cell: CellType, seed_value: u64, units: usize, steps: usize) -> SeqProbe {
        let mut rng = seed::rng(seed_value);
        let mut layer = Recurrent::init(&mut rng, cell, 3, units);
        layer.bias.mapv_inplace(|b| b + 0.3 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
        let x = random_input(&mut rng, (2, steps, 3));
        let weights = random_input(&mut rng, (2, steps, units));
        SeqProbe { layer, x, weights }
    }

    #[test]
    fn bptt_matches_finite_differences() {
        for cell in [CellType::Lstm, CellType::Gru] {
            for s in 0..5 {
                let mut p = probe(cell, s, 2, 3);
                let r = check(&mut p, 1e-5, None, 0);
                assert!(max_relative_error(&r) < 1e-5, "{cell} seed {s}: {r:?}");
            }
        }
    }

    #[test]
    fn shape_checks() {
        assert!(Recurrent::new(CellType::Gru, Array2::zeros((2, 12)), Array2::zeros((4, 12)), Array1::zeros(12)).is_ok());
        assert!(Recurrent::new(CellType::Lstm, Array2::zeros((2, 12)), Array2::zeros((4, 12)), Array1::zeros(12)).is_err());
        let layer = zeros(CellType::Gru, 2, 4);
        assert!(layer.forward(Array3::zeros((1, 3, 5)).view()).is_err());
    }
}
