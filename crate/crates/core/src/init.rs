use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Normal samples redrawn until they fall within two standard deviations.
pub(crate) fn truncated_normal<R: Rng>(rng: &mut R, shape: (usize, usize), std: f64) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn(shape, || loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}
