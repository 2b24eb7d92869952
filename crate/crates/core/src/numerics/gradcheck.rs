//! Central finite differences, used as the independent oracle for every
//! analytic backward pass.

use super::tensor::Tensor;

/// Result of comparing an analytic gradient against central differences.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// Relative error `|a − n| / max(|a| + |n|, floor)`.
///
/// The floor keeps entries whose true gradient is zero (masked or annihilated
/// paths) from dividing rounding noise by rounding noise.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = (analytic.abs() + numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

pub fn compare(analytic: &Tensor, numeric: &Tensor, floor: f64) -> GradCheck {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        max_rel = max_rel.max(relative_error(a, n, floor));
        max_abs = max_abs.max((a - n).abs());
    }
    GradCheck {
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        checked: analytic.len(),
    }
}
