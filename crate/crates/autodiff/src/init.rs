//! Parameter initialisers.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

/// Glorot-uniform weights for a `[fan_in, fan_out]` matrix.
pub fn xavier<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, &[fan_in, fan_out], bound)
}

/// Entries drawn uniformly from `[-bound, bound)`.
pub fn uniform<R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

/// Rows drawn from a standard normal and scaled to unit length.
pub fn unit_rows<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let row: Vec<f64> = (0..cols).map(|_| rng.sample(StandardNormal)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        data.extend(row.iter().map(|v| v / norm));
    }
    Tensor::new(vec![rows, cols], data).expect("shape product")
}
