use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Glorot-uniform `[fan_in, fan_out]` matrix.
pub fn glorot_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_simple_fn((fan_in, fan_out), || rng.gen_range(-limit..limit))
}

/// `[rows, cols]` matrix whose rows (if `rows <= cols`) or columns are orthonormal.
pub fn orthogonal(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let (long, short) = if rows <= cols { (cols, rows) } else { (rows, cols) };
    // `short` orthonormal vectors of length `long`, by modified Gram-Schmidt.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(short);
    while basis.len() < short {
        let mut v: Vec<f64> = (0..long).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-10 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    if rows <= cols {
        Array2::from_shape_fn((rows, cols), |(i, j)| basis[i][j])
    } else {
        Array2::from_shape_fn((rows, cols), |(i, j)| basis[j][i])
    }
}
