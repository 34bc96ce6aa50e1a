//! Smooth cutoff functions built from the `exp(-s/u)` bump.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smooth monotone step: 1 for `u <= 0`, 0 for `u >= 1`, strictly
/// decreasing in between.
///
/// Written as `1 / (1 + exp(g))` with `g = s/(1-u) - s/u`, which is the ratio
/// `f(1-u) / (f(1-u) + f(u))` of two `f(v) = exp(-s/v)` bumps.
pub fn smooth_step(u: f64, sharpness: f64) -> f64 {
    if u <= 0.0 {
        return 1.0;
    }
    if u >= 1.0 {
        return 0.0;
    }
    let g = sharpness / (1.0 - u) - sharpness / u;
    logistic(-g)
}

/// Derivative of [`smooth_step`] with respect to `u`.
pub fn smooth_step_derivative(u: f64, sharpness: f64) -> f64 {
    if u <= 0.0 || u >= 1.0 {
        return 0.0;
    }
    let g = sharpness / (1.0 - u) - sharpness / u;
    let dg = sharpness / ((1.0 - u) * (1.0 - u)) + sharpness / (u * u);
    -logistic(g) * logistic(-g) * dg
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// The cutoffs `psi`, `chi` (plateau `|y| <= 1/2`, support `|y| < 1`) and
/// the frequency switch `omega` (0 on `|xi| <= 1`, constant beyond `R`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoffFamily {
    /// Outer edge of the `omega` transition.
    pub radius: f64,
    pub sharpness: f64,
    /// Nominal Gevrey index of the cutoffs. Only used to weight factorials
    /// in symbol estimates.
    pub mu: f64,
}

impl Default for CutoffFamily {
    fn default() -> Self {
        Self { radius: 2.0, sharpness: 1.0, mu: 1.01 }
    }
}

/// Builds the cutoff family. `radius` must exceed 1 and `sharpness` must be
/// positive.
pub fn make_cutoffs(radius: f64, transition_sharpness: f64) -> Result<CutoffFamily> {
    if !(radius.is_finite() && radius > 1.0) {
        return Err(Error::Domain(format!("cutoff radius must exceed 1, got {radius}")));
    }
    if !(transition_sharpness.is_finite() && transition_sharpness > 0.0) {
        return Err(Error::Domain(format!(
            "transition sharpness must be positive, got {transition_sharpness}"
        )));
    }
    Ok(CutoffFamily { radius, sharpness: transition_sharpness, ..CutoffFamily::default() })
}

impl CutoffFamily {
    pub fn psi(&self, y: f64) -> f64 {
        smooth_step(2.0 * y.abs() - 1.0, self.sharpness)
    }

    pub fn psi_derivative(&self, y: f64) -> f64 {
        2.0 * y.signum() * smooth_step_derivative(2.0 * y.abs() - 1.0, self.sharpness)
    }

    /// Same profile as `psi`; strictly monotone on each transition band so
    /// that `y * chi'(y) < 0` there.
    pub fn chi(&self, y: f64) -> f64 {
        self.psi(y)
    }

    pub fn chi_derivative(&self, y: f64) -> f64 {
        self.psi_derivative(y)
    }

    /// `omega(xi)` for a leading coefficient of sign `a3_sign`.
    pub fn omega(&self, xi: f64, a3_sign: f64) -> f64 {
        let u = (xi.abs() - 1.0) / (self.radius - 1.0);
        -a3_sign.signum() * (1.0 - smooth_step(u, self.sharpness))
    }

    pub fn omega_derivative(&self, xi: f64, a3_sign: f64) -> f64 {
        let u = (xi.abs() - 1.0) / (self.radius - 1.0);
        a3_sign.signum() * smooth_step_derivative(u, self.sharpness) * xi.signum()
            / (self.radius - 1.0)
    }

    /// Largest value of `|chi'(s) * s|`, sampled on the transition band.
    pub fn max_chi_log_derivative(&self) -> f64 {
        (1..2000)
            .map(|i| {
                let s = 0.5 + 0.5 * i as f64 / 2000.0;
                (self.chi_derivative(s) * s).abs()
            })
            .fold(0.0, f64::max)
    }
}
