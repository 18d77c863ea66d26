//! Central finite differences: the independent oracle used to verify every
//! analytic backward rule. Deliberately knows nothing about the tape.

use crate::tensor::Tensor;

/// Central-difference gradient of a scalar function at `x`:
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    assert!(h > 0.0, "finite differences need a positive step");
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.data().to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&Tensor::new(x.shape().to_vec(), probe.clone()).expect("same shape"));
        probe[i] = orig - h;
        let fm = f(&Tensor::new(x.shape().to_vec(), probe.clone()).expect("same shape"));
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad).expect("same shape")
}

/// Relative error between two gradient vectors:
/// `||a - b||_2 / max(||b||_2, 1e-8)`, with `b` the reference.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let denom = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-8);
    diff / denom
}
