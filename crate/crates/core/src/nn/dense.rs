use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::activation::Activation;
use super::init;
use crate::error::{Error, Result};

/// Fully connected layer: `act(x . kernel + bias)`, kernel `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub kernel: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

#[derive(Clone, Debug)]
pub struct DenseCache {
    pub input: Array2<f64>,
    pub pre: Array2<f64>,
    pub output: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrads {
    pub kernel: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn new(kernel: Array2<f64>, bias: Array1<f64>, activation: Activation) -> Result<Self> {
        if kernel.ncols() != bias.len() {
            return Err(Error::ShapeMismatch(format!(
                "dense kernel has {} outputs but bias has {}",
                kernel.ncols(),
                bias.len()
            )));
        }
        Ok(Dense { kernel, bias, activation })
    }

    pub fn glorot(rng: &mut impl Rng, inputs: usize, outputs: usize, activation: Activation) -> Self {
        Dense {
            kernel: init::glorot_uniform(rng, inputs, outputs),
            bias: Array1::zeros(outputs),
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.kernel.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.kernel.ncols()
    }

    pub fn param_count(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }

    pub fn forward(&self, input: ArrayView2<f64>) -> Result<(Array2<f64>, DenseCache)> {
        if input.ncols() != self.inputs() {
            return Err(Error::ShapeMismatch(format!(
                "dense layer expects {} inputs, got {}",
                self.inputs(),
                input.ncols()
            )));
        }
        let pre = input.dot(&self.kernel) + &self.bias;
        let act = self.activation;
        let output = pre.mapv(|z| act.apply(z));
        Ok((
            output.clone(),
            DenseCache {
                input: input.to_owned(),
                pre,
                output,
            },
        ))
    }

    /// Gradient w.r.t. the layer input and parameters given d(loss)/d(output).
    pub fn backward(&self, cache: &DenseCache, d_output: ArrayView2<f64>) -> Result<(Array2<f64>, DenseGrads)> {
        if d_output.dim() != cache.output.dim() {
            return Err(Error::ShapeMismatch(format!(
                "dense output gradient {:?} vs output {:?}",
                d_output.dim(),
                cache.output.dim()
            )));
        }
        let act = self.activation;
        let mut d_pre = d_output.to_owned();
        ndarray::Zip::from(&mut d_pre)
            .and(&cache.pre)
            .and(&cache.output)
            .for_each(|d, &z, &y| *d *= act.derivative(z, y));
        let grads = DenseGrads {
            kernel: cache.input.t().dot(&d_pre),
            bias: d_pre.sum_axis(Axis(0)),
        };
        Ok((d_pre.dot(&self.kernel.t()), grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::flat;
    use crate::nn::gradcheck::{check, max_relative_error, Objective};
    use crate::seed;
    use ndarray::array;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn identity_layer_passes_input_through() {
        let layer = Dense::new(Array2::eye(3), Array1::zeros(3), Activation::Linear).unwrap();
        let x = array![[1.0, -2.0, 3.5], [0.0, 4.0, -1.0]];
        let (y, _) = layer.forward(x.view()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn shape_errors() {
        let layer = Dense::new(Array2::zeros((3, 2)), Array1::zeros(2), Activation::Relu).unwrap();
        assert!(layer.forward(Array2::zeros((1, 2)).view()).is_err());
        assert!(Dense::new(Array2::zeros((3, 2)), Array1::zeros(3), Activation::Relu).is_err());
    }

    /// Random linear functional of a dense layer's output.
    struct Probe {
        layer: Dense,
        x: Array2<f64>,
        weights: Array2<f64>,
    }

    impl Objective for Probe {
        fn tensor_names(&self) -> Vec<String> {
            vec!["kernel".into(), "bias".into(), "input".into()]
        }
        fn tensor_mut(&mut self, i: usize) -> &mut [f64] {
            match i {
                0 => self.layer.kernel.as_slice_mut().unwrap(),
                1 => self.layer.bias.as_slice_mut().unwrap(),
                _ => self.x.as_slice_mut().unwrap(),
            }
        }
        fn evaluate(&self) -> (f64, u64) {
            let (y, _) = self.layer.forward(self.x.view()).unwrap();
            ((&y * &self.weights).sum(), 0)
        }
        fn gradient(&self) -> Vec<Vec<f64>> {
            let (_, cache) = self.layer.forward(self.x.view()).unwrap();
            let (dx, g) = self.layer.backward(&cache, self.weights.view()).unwrap();
            vec![flat(&g.kernel), flat(&g.bias), flat(&dx)]
        }
    }

    #[test]
    fn random_layer_matches_finite_differences() {
        for s in 0..10 {
            let mut rng = seed::rng(s);
            let mut layer = Dense::glorot(&mut rng, 3, 2, Activation::Tanh);
            layer.bias = Array1::from_shape_simple_fn(2, || StandardNormal.sample(&mut rng));
            let x = Array2::from_shape_simple_fn((4, 3), || StandardNormal.sample(&mut rng));
            let weights = Array2::from_shape_simple_fn((4, 2), || StandardNormal.sample(&mut rng));
            let mut probe = Probe { layer, x, weights };
            let report = check(&mut probe, 1e-5, None, 0);
            assert!(max_relative_error(&report) < 1e-6, "{report:?}");
        }
    }
}
