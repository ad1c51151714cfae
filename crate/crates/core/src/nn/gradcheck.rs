//! Central finite-difference verification of analytic gradients.

use rand::seq::index;

use crate::seed;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Gradient magnitudes below this are compared absolutely; central
/// differences cannot resolve them relative to round-off in the loss.
pub const RELATIVE_FLOOR: f64 = 1e-7;

/// A scalar function of a set of named parameter tensors.
pub trait Objective {
    fn tensor_names(&self) -> Vec<String>;
    fn tensor_mut(&mut self, tensor: usize) -> &mut [f64];
    /// Loss, plus a signature of which side of every derivative kink
    /// (relu/selu at 0, |error| at 0) the evaluation lies on.
    fn evaluate(&self) -> (f64, u64);
    /// Analytic gradient, one vector per tensor, same order as `tensor_names`.
    fn gradient(&self) -> Vec<Vec<f64>>;
    /// For a loss that is a sum of terms, the per-entry sum of the terms'
    /// gradient magnitudes. When terms nearly cancel, errors are measured
    /// against this scale instead of the (tiny) net gradient.
    fn gradient_scale(&self) -> Option<Vec<Vec<f64>>> {
        None
    }
    /// Per tensor, whether the loss has a |θ| kink at zero (an L1 penalty).
    /// Entries with `0 < |θ| < eps` straddle it and are skipped; entries at
    /// exactly zero are compared against the zero subgradient.
    fn parameter_kinks(&self) -> Vec<bool> {
        Vec::new()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorError {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorError>,
    /// Entries whose +/- eps evaluations straddled a kink; not comparable.
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&TensorError> {
        self.tensors.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn checked(&self) -> usize {
        self.tensors.iter().map(|t| t.checked).sum()
    }
}

pub fn max_relative_error(report: &GradCheckReport) -> f64 {
    report.worst().map_or(0.0, |t| t.max_rel_error)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    scaled_relative_error(analytic, numeric, 0.0)
}

/// `|a - n| / max(|a|, |n|, scale, RELATIVE_FLOOR)`.
pub fn scaled_relative_error(analytic: f64, numeric: f64, scale: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(scale).max(RELATIVE_FLOOR)
}

/// Compare `obj.gradient()` against `(f(θ+eps) - f(θ-eps)) / (2 eps)`.
///
/// With `max_per_tensor`, a seeded random subset of each larger tensor is checked.
pub fn check<O: Objective + ?Sized>(obj: &mut O, eps: f64, max_per_tensor: Option<usize>, sample_seed: u64) -> GradCheckReport {
    let analytic = obj.gradient();
    let scale = obj.gradient_scale();
    let (_, base_sig) = obj.evaluate();
    let names = obj.tensor_names();
    let kinked = obj.parameter_kinks();
    let mut rng = seed::rng(sample_seed);
    let mut tensors = Vec::with_capacity(names.len());
    let mut skipped = 0;

    for (t, name) in names.into_iter().enumerate() {
        let len = obj.tensor_mut(t).len();
        let entries: Vec<usize> = match max_per_tensor {
            Some(k) if k < len => {
                let mut v = index::sample(&mut rng, len, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        };
        let mut worst = TensorError {
            name,
            max_rel_error: 0.0,
            worst_index: 0,
            checked: 0,
        };
        for i in entries {
            let original = obj.tensor_mut(t)[i];
            if kinked.get(t).copied().unwrap_or(false) && original != 0.0 && original.abs() < eps {
                skipped += 1;
                continue;
            }
            obj.tensor_mut(t)[i] = original + eps;
            let (plus, sig_plus) = obj.evaluate();
            obj.tensor_mut(t)[i] = original - eps;
            let (minus, sig_minus) = obj.evaluate();
            obj.tensor_mut(t)[i] = original;
            if sig_plus != base_sig || sig_minus != base_sig {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let err = scaled_relative_error(analytic[t][i], numeric, scale.as_ref().map_or(0.0, |s| s[t][i]));
            worst.checked += 1;
            if err > worst.max_rel_error || err.is_nan() {
                worst.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                worst.worst_index = i;
            }
        }
        tensors.push(worst);
    }
    GradCheckReport {
        tensors,
        skipped_kinks: skipped,
    }
}

/// Fold kink-side bits into a running signature.
pub(crate) fn fold_signs<'a>(sig: &mut u64, values: impl IntoIterator<Item = &'a f64>) {
    for v in values {
        let bit = (*v > 0.0) as u64;
        *sig = seed::mix(*sig ^ bit);
    }
}
