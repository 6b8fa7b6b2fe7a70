//! Accuracy certificates for replacing the log-Gamma law `logGamma(y, 1)` by
//! the normal `N(log y, 1/y)`.
//!
//! This is the approximation behind the Gaussian posterior for the regression
//! coefficients: the Poisson likelihood of a count `y` at log-rate `xi` is
//! `logGamma(xi | y, 1) / y`. The divergence between the two densities has a
//! closed form, decays like `5 / (24 y)`, and bounds the total variation
//! distance through Pinsker's inequality.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};

use crate::error::{Error, Result};
use crate::quadrature::integrate;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DivergenceReport {
    pub y: f64,
    pub kl_exact: f64,
    pub kl_leading: f64,
    pub tv_bound: f64,
    pub tv_leading: f64,
}

fn check_y(y: f64) -> Result<()> {
    if y > 0.0 && y.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "y must be positive and finite, got {y}"
        )))
    }
}

/// `log` of the log-Gamma density `exp(r xi − e^xi / s) / (Γ(r) s^r)`, on all reals.
pub fn ln_log_gamma_density(xi: f64, r: f64, s: f64) -> Result<f64> {
    if !(xi.is_finite() && r.is_finite() && s.is_finite()) {
        return Err(Error::InvalidParameter(
            "non-finite log-Gamma argument".into(),
        ));
    }
    if !(r > 0.0 && s > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "log-Gamma needs r, s > 0, got ({r}, {s})"
        )));
    }
    Ok(r * xi - xi.exp() / s - ln_gamma(r) - r * s.ln())
}

pub fn log_gamma_density(xi: f64, r: f64, s: f64) -> Result<f64> {
    Ok(ln_log_gamma_density(xi, r, s)?.exp())
}

/// `ln Γ(y) − (y − ½) ln y + y − ½ ln 2π`, by its asymptotic series.
/// Accurate to rounding for `y > 30`.
fn stirling_remainder(y: f64) -> f64 {
    let inv = 1.0 / y;
    let inv2 = inv * inv;
    // Bernoulli terms B_{2n} / (2n (2n − 1))
    inv * (1.0 / 12.0
        - inv2
            * (1.0 / 360.0 - inv2 * (1.0 / 1260.0 - inv2 * (1.0 / 1680.0 - inv2 * (1.0 / 1188.0)))))
}

/// `(e^u − 1 − u) / (2u)` without cancellation for small `u`.
fn expm1_minus_linear_over_2u(u: f64) -> f64 {
    if u < 0.05 {
        // u/4 + u²/12 + u³/48 + ...
        let mut term = 0.5 * u; // u²/2 / u
        let mut sum = 0.0f64;
        let mut k = 2.0;
        while term.abs() > 1e-18 * sum.abs().max(1e-300) {
            sum += term;
            k += 1.0;
            term *= u / k;
        }
        0.5 * sum
    } else {
        (u.exp_m1() - u) / (2.0 * u)
    }
}

/// Exact `KL(N(log y, 1/y) ‖ logGamma(y, 1))` in nats.
pub fn kl_exact(y: f64) -> Result<f64> {
    check_y(y)?;
    let kl = if y > 30.0 {
        // ln Γ(y) − ln sqrt(2π/y) − y ln y = S(y) − y, and y e^{1/(2y)} − y − ½
        // is (e^u − 1 − u)/(2u) with u = 1/(2y).
        stirling_remainder(y) + expm1_minus_linear_over_2u(0.5 / y)
    } else {
        ln_gamma(y) - HALF_LN_2PI + 0.5 * y.ln() - y * y.ln() + y * (0.5 / y).exp() - 0.5
    };
    Ok(kl.max(0.0))
}

pub fn kl_leading(y: f64) -> Result<f64> {
    check_y(y)?;
    Ok(5.0 / (24.0 * y))
}

pub fn tv_bounds(y: f64) -> Result<DivergenceReport> {
    let kl = kl_exact(y)?;
    let lead = kl_leading(y)?;
    Ok(DivergenceReport {
        y,
        kl_exact: kl,
        kl_leading: lead,
        tv_bound: kl.sqrt(),
        tv_leading: lead.sqrt(),
    })
}

/// `½ ∫ |f − g|` over `[a, b]` to absolute tolerance `tol`.
pub fn half_l1_distance<F, G>(f: F, g: G, a: f64, b: f64, tol: f64) -> Result<f64>
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    let v = integrate(|x| (f(x) - g(x)).abs(), a, b, 2.0 * tol, 64)?;
    Ok(0.5 * v)
}

/// Total variation between `N(log y, 1/y)` and `logGamma(y, 1)` by quadrature.
pub fn empirical_tv(y: f64) -> Result<f64> {
    if !(y >= 1.0 && y.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "empirical TV needs y >= 1, got {y}"
        )));
    }
    const TAIL: f64 = 1e-12;
    let centre = y.ln();
    let sd = 1.0 / y.sqrt();
    let normal = Normal::new(centre, sd).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let step = 12.0 * sd;
    let mut lo = centre - step;
    let mut hi = centre + step;
    let left_mass = |t: f64| normal.cdf(t).max(gamma_lr(y, t.exp()));
    let right_mass = |t: f64| normal.sf(t).max(gamma_ur(y, t.exp()));
    for _ in 0..200 {
        if left_mass(lo) < TAIL {
            break;
        }
        lo -= sd;
    }
    for _ in 0..200 {
        if right_mass(hi) < TAIL {
            break;
        }
        hi += sd;
    }
    let lgy = ln_gamma(y);
    let log_gamma_pdf = |xi: f64| (y * xi - xi.exp() - lgy).exp();
    let ln_norm = -0.5 * (2.0 * std::f64::consts::PI / y).ln();
    let normal_pdf = |xi: f64| (ln_norm - 0.5 * y * (xi - centre).powi(2)).exp();
    half_l1_distance(normal_pdf, log_gamma_pdf, lo, hi, 1e-8)
}
