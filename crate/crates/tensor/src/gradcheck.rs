//! Central finite differences for verifying hand-written backward passes.

use crate::{Real, Tensor};

/// Central-difference gradient of a scalar function at `x` with step `h`.
pub fn numeric_gradient<T: Real>(mut f: impl FnMut(&Tensor<T>) -> f64, x: &Tensor<T>, h: f64) -> Tensor<T> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = T::of(orig.as_f64() + h);
        let fp = f(&probe);
        probe.data_mut()[i] = T::of(orig.as_f64() - h);
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        out.push(T::of((fp - fm) / (2.0 * h)));
    }
    Tensor::from_vec(x.shape(), out)
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm; zero when both vanish.
pub fn relative_error<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let norm = |t: &Tensor<T>| t.data().iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
