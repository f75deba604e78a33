//! Central finite-difference gradient verification.

use crate::engine::tensor::Tensor;

/// Maximum relative error between an analytic gradient and a central
/// finite-difference estimate of `f` at `point`.
///
/// The relative error of coordinate `i` uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn fd_check<F>(mut f: F, point: &[Tensor], analytic: &[Tensor], h: f64) -> f64
where
    F: FnMut(&[Tensor]) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    assert_eq!(point.len(), analytic.len(), "one gradient tensor per parameter tensor");
    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = point.to_vec();
    for ti in 0..point.len() {
        assert_eq!(point[ti].shape(), analytic[ti].shape(), "gradient shape mismatch");
        for i in 0..point[ti].numel() {
            let orig = point[ti].data()[i];
            work[ti].data_mut()[i] = orig + h;
            let up = f(&work);
            work[ti].data_mut()[i] = orig - h;
            let down = f(&work);
            work[ti].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let ana = analytic[ti].data()[i];
            let denom = ana.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((numeric - ana).abs() / denom);
        }
    }
    worst
}
