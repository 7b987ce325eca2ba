//! Central finite-difference checks of analytic gradients.

use alloc::string::String;
use alloc::vec::Vec;

use crate::nn::Module;

pub mod suite;

/// Default perturbation for central differences in 64-bit.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Maximum accepted relative error between backward and finite differences.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Central differences of `f` at `x`, restricted to `coords`.
pub fn numeric_gradient(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    coords: &[usize],
    step: f64,
) -> Vec<f64> {
    let mut work = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = work[i];
            work[i] = orig + step;
            let up = f(&work);
            work[i] = orig - step;
            let down = f(&work);
            work[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞)`, or 0 when both vectors vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        0.0
    } else if scale < 1e-12 {
        // both gradients are numerically zero
        diff
    } else {
        diff / scale
    }
}

/// All parameters of a module flattened in visitation order.
pub fn flat_params(module: &dyn Module) -> Vec<f64> {
    let mut out = Vec::new();
    module.visit_params("", &mut |_, p| out.extend_from_slice(p.value.data()));
    out
}

/// All accumulated parameter gradients flattened in visitation order.
pub fn flat_grads(module: &dyn Module) -> Vec<f64> {
    let mut out = Vec::new();
    module.visit_params("", &mut |_, p| out.extend_from_slice(p.grad.data()));
    out
}

/// Overwrites parameters from a flat buffer produced by [`flat_params`].
pub fn set_flat_params(module: &mut dyn Module, values: &[f64]) {
    let mut offset = 0;
    module.visit_params_mut("", &mut |_, p| {
        let n = p.value.len();
        p.value.data_mut().copy_from_slice(&values[offset..offset + n]);
        offset += n;
    });
}

/// Outcome of a batch of randomized gradient checks for one operation.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub trials: usize,
    /// Trials redrawn because the difference stencil straddled a kink.
    pub discarded: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn new(name: &str, tolerance: f64) -> Self {
        Self {
            name: String::from(name),
            trials: 0,
            discarded: 0,
            max_rel_error: 0.0,
            tolerance,
        }
    }

    pub fn record(&mut self, rel_error: f64) {
        self.trials += 1;
        if rel_error.is_nan() {
            self.max_rel_error = f64::NAN;
        } else if !self.max_rel_error.is_nan() {
            self.max_rel_error = self.max_rel_error.max(rel_error);
        }
    }

    pub fn passed(&self) -> bool {
        self.trials > 0 && self.max_rel_error <= self.tolerance
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_gradient_of_cubic() {
        let mut f = |x: &[f64]| x[0] * x[0] * x[0] + 2.0 * x[1];
        let g = numeric_gradient(&mut f, &[1.5, -2.0], &[0, 1], DEFAULT_STEP);
        assert!((g[0] - 6.75).abs() < 1e-8);
        assert!((g[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_is_scale_free() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        let e = relative_error(&[100.0, 0.0], &[100.0, 0.01]);
        assert!((e - 1e-4).abs() < 1e-12);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }
}
