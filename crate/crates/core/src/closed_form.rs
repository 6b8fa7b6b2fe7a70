//! The `eps ≡ 1` special case.
//!
//! When the missing-arm predictor is `N(m, v)`, the missing rate `exp(xi)` is
//! treated as `Gamma(shape = 1/v, scale = v e^m)`, so the imputed count is
//! negative binomial and the ATE has closed-form moments.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use statrs::function::gamma::ln_gamma;

use crate::beta_posterior::{fit_beta_posterior, mis_predictor_law, GaussianPosterior};
use crate::error::{Error, Result};
use crate::model::{Dataset, ModelSpec, ParameterState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NbPredictive {
    pub gamma: f64,
    pub h: f64,
}

impl NbPredictive {
    pub fn new(gamma: f64, h: f64) -> Result<Self> {
        if !(gamma > 0.0 && h > 0.0 && gamma.is_finite() && h.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "negative binomial needs gamma, h > 0, got ({gamma}, {h})"
            )));
        }
        Ok(Self { gamma, h })
    }

    /// From the normal law `(mean, variance)` of the log-rate.
    pub fn from_log_rate_law(mean: f64, variance: f64) -> Result<Self> {
        Self::new(1.0 / variance, variance * mean.exp())
    }

    /// Success probability `1 / (1 + h)`.
    pub fn p(&self) -> f64 {
        1.0 / (1.0 + self.h)
    }

    /// `P(Y > k)`, through the regularized incomplete beta function.
    pub fn tail(&self, k: u64) -> f64 {
        beta_reg(k as f64 + 1.0, self.gamma, self.h / (1.0 + self.h))
    }

    /// Truncation point holding all but 1e-12 of the mass. Starts from
    /// `ceil(γh + 12 sqrt(γh(1+h)))`, which is too short for skewed laws with
    /// small `γ`, and widens until the tail is small enough.
    pub fn support_bound(&self) -> u64 {
        let (m, v) = nb_moments(self);
        let sd = v.sqrt();
        let mut k = (m + 12.0 * sd).ceil() as u64;
        let mut step = (12.0 * sd).ceil().max(1.0) as u64;
        while self.tail(k) > 1e-12 {
            k += step;
            step *= 2;
        }
        k
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AteVariant {
    /// Mean term `γ` and variance term `γ(1 − h)/h²`, as printed.
    Printed,
    /// Negative-binomial moments `γh` and `γh(1 + h)`.
    #[default]
    Nb,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosedFormAte {
    pub variant: AteVariant,
    pub mean: f64,
    pub variance: f64,
    pub gamma: Vec<f64>,
    pub h: Vec<f64>,
}

impl ClosedFormAte {
    /// `None` when the variance is negative (possible under the printed variant).
    pub fn sd(&self) -> Option<f64> {
        (self.variance >= 0.0).then(|| self.variance.sqrt())
    }
}

pub fn gamma_h(
    ds: &Dataset,
    state: &ParameterState,
    posterior: &GaussianPosterior,
    i: usize,
) -> Result<(f64, f64)> {
    let (mean, variance) = mis_predictor_law(ds, state, posterior, i)?;
    if !(variance > 0.0) {
        return Err(Error::ZeroVariance { index: i });
    }
    let pred = NbPredictive::from_log_rate_law(mean, variance)?;
    Ok((pred.gamma, pred.h))
}

pub fn nb_ln_pmf(pred: &NbPredictive, y: u64) -> f64 {
    let yf = y as f64;
    let g = pred.gamma;
    let ln_choose = ln_gamma(g + yf) - ln_gamma(g) - ln_gamma(yf + 1.0);
    // ln(1/(1+h)) and ln(h/(1+h)) via ln_1p for small h
    let ln_1ph = pred.h.ln_1p();
    ln_choose - g * ln_1ph
        + if y == 0 {
            0.0
        } else {
            yf * (pred.h.ln() - ln_1ph)
        }
}

/// `C(γ+y−1, y) (1/(1+h))^γ (h/(1+h))^y`.
pub fn nb_pmf(pred: &NbPredictive, y: u64) -> f64 {
    nb_ln_pmf(pred, y).exp()
}

/// Same as [`nb_pmf`] for signed input; negative counts are an error.
pub fn nb_pmf_signed(pred: &NbPredictive, y: i64) -> Result<f64> {
    if y < 0 {
        return Err(Error::InvalidParameter(format!("negative count {y}")));
    }
    Ok(nb_pmf(pred, y as u64))
}

pub fn nb_moments(pred: &NbPredictive) -> (f64, f64) {
    let m = pred.gamma * pred.h;
    (m, m * (1.0 + pred.h))
}

/// Closed-form ATE moments at the Gaussian posterior `posterior`, which must
/// have been fitted with `eps ≡ 1`.
pub fn ate_closed_form(
    ds: &Dataset,
    spec: &ModelSpec,
    posterior: &GaussianPosterior,
    variant: AteVariant,
) -> Result<ClosedFormAte> {
    if !spec.is_poisson() {
        return Err(Error::ModelMismatch(
            "the closed-form ATE exists only for the Poisson model".into(),
        ));
    }
    let n = ds.n();
    let state = ParameterState::poisson(vec![0.0; ds.coef_dim()], n);
    let gh: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| gamma_h(ds, &state, posterior, i))
        .collect::<Result<_>>()?;
    let nf = n as f64;
    let mut mean = 0.0;
    let mut variance = 0.0;
    for (i, &(g, h)) in gh.iter().enumerate() {
        let sign = if ds.treated(i) { 1.0 } else { -1.0 };
        let y = ds.y_obs()[i] as f64;
        match variant {
            AteVariant::Printed => {
                mean += sign * (y - g);
                variance += g * (1.0 - h) / (h * h);
            }
            AteVariant::Nb => {
                mean += sign * (y - g * h);
                variance += g * h * (1.0 + h);
            }
        }
    }
    let (gamma, h) = gh.into_iter().unzip();
    Ok(ClosedFormAte {
        variant,
        mean: mean / nf,
        variance: variance / (nf * nf),
        gamma,
        h,
    })
}

/// Fits the Gaussian posterior at `eps ≡ 1` and evaluates [`ate_closed_form`].
pub fn fit_closed_form(
    ds: &Dataset,
    spec: &ModelSpec,
    variant: AteVariant,
) -> Result<ClosedFormAte> {
    if !spec.is_poisson() {
        return Err(Error::ModelMismatch(
            "the closed-form ATE exists only for the Poisson model".into(),
        ));
    }
    let state = ParameterState::poisson(vec![0.0; ds.coef_dim()], ds.n());
    let posterior = fit_beta_posterior(ds, &state, spec)?;
    ate_closed_form(ds, spec, &posterior, variant)
}
