//! Data, model settings and parameter state for the count potential
//! outcomes model.
//!
//! Coefficients are stacked control block first: `beta = (beta_c, beta_t)`,
//! each block of length `k + 1`. Unit `i` observes the arm selected by `W_i`
//! and misses the other one, so its observed design row is
//! `[(1 - W_i), W_i] ⊗ x_i` and its missing design row is `[W_i, (1 - W_i)] ⊗ x_i`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear predictors beyond this magnitude are rejected rather than clamped.
pub const MAX_LINEAR_PREDICTOR: f64 = 700.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n: usize,
    k: usize,
    x: Vec<f64>,
    w: Vec<u8>,
    y_obs: Vec<u64>,
    y0: Option<Vec<u64>>,
    y1: Option<Vec<u64>>,
}

impl Dataset {
    /// Builds a dataset from rows of covariates (intercept included) and
    /// validates every invariant.
    pub fn new(rows: Vec<Vec<f64>>, w: Vec<u8>, y_obs: Vec<u64>) -> Result<Self> {
        let n = rows.len();
        let p = rows.first().map_or(1, |r| r.len());
        if p == 0 {
            return Err(Error::Dimension(
                "covariate rows must include the intercept".into(),
            ));
        }
        let mut x = Vec::with_capacity(n * p);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != p {
                return Err(Error::Dimension(format!(
                    "row {i} has {} columns, expected {p}",
                    row.len()
                )));
            }
            x.extend_from_slice(row);
        }
        Self::from_flat(x, p, w, y_obs)
    }

    /// Row-major covariate matrix with `p = k + 1` columns.
    pub fn from_flat(x: Vec<f64>, p: usize, w: Vec<u8>, y_obs: Vec<u64>) -> Result<Self> {
        if p == 0 {
            return Err(Error::Dimension(
                "covariate rows must include the intercept".into(),
            ));
        }
        let n = w.len();
        let ds = Self {
            n,
            k: p - 1,
            x,
            w,
            y_obs,
            y0: None,
            y1: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Signed inputs, as read from untyped sources; negative outcomes and
    /// non-binary treatments are reported with their index.
    pub fn from_signed(rows: Vec<Vec<f64>>, w: Vec<i64>, y_obs: Vec<i64>) -> Result<Self> {
        if let Some(index) = w.iter().position(|&v| v != 0 && v != 1) {
            return Err(Error::NonBinaryTreatment { index });
        }
        if let Some(index) = y_obs.iter().position(|&v| v < 0) {
            return Err(Error::NegativeOutcome { index });
        }
        Self::new(
            rows,
            w.into_iter().map(|v| v as u8).collect(),
            y_obs.into_iter().map(|v| v as u64).collect(),
        )
    }

    /// Attaches both potential outcomes (synthetic truth).
    pub fn with_potential_outcomes(mut self, y0: Vec<u64>, y1: Vec<u64>) -> Result<Self> {
        self.y0 = Some(y0);
        self.y1 = Some(y1);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.k + 1;
        if self.x.len() != self.n * p {
            return Err(Error::Dimension(format!(
                "covariate matrix has {} entries, expected {}x{}",
                self.x.len(),
                self.n,
                p
            )));
        }
        if self.y_obs.len() != self.n {
            return Err(Error::Dimension(format!(
                "{} outcomes for {} treatment indicators",
                self.y_obs.len(),
                self.n
            )));
        }
        if let Some(index) = self.w.iter().position(|&v| v > 1) {
            return Err(Error::NonBinaryTreatment { index });
        }
        for i in 0..self.n {
            if self.x[i * p] != 1.0 {
                return Err(Error::MissingIntercept { index: i });
            }
        }
        if let Some(index) = self.x.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parse {
                row: index / p,
                column: format!("x{}", index % p),
                message: "non-finite covariate".into(),
            });
        }
        match (&self.y0, &self.y1) {
            (None, None) => {}
            (Some(y0), Some(y1)) => {
                if y0.len() != self.n || y1.len() != self.n {
                    return Err(Error::Dimension(
                        "potential outcome vectors must have length N".into(),
                    ));
                }
                for i in 0..self.n {
                    let expected = if self.w[i] == 1 { y1[i] } else { y0[i] };
                    if expected != self.y_obs[i] {
                        return Err(Error::InconsistentOutcome { index: i });
                    }
                }
            }
            _ => {
                return Err(Error::Dimension(
                    "Y(0) and Y(1) must be supplied together".into(),
                ))
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Covariate dimension excluding the intercept.
    pub fn k(&self) -> usize {
        self.k
    }

    /// Columns per row, `k + 1`.
    pub fn p(&self) -> usize {
        self.k + 1
    }

    /// Length of the stacked coefficient vector, `2(k + 1)`.
    pub fn coef_dim(&self) -> usize {
        2 * (self.k + 1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.p();
        &self.x[i * p..(i + 1) * p]
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn w(&self) -> &[u8] {
        &self.w
    }

    pub fn y_obs(&self) -> &[u64] {
        &self.y_obs
    }

    pub fn y0(&self) -> Option<&[u64]> {
        self.y0.as_deref()
    }

    pub fn y1(&self) -> Option<&[u64]> {
        self.y1.as_deref()
    }

    pub fn treated(&self, i: usize) -> bool {
        self.w[i] == 1
    }

    pub fn n_treated(&self) -> usize {
        self.w.iter().filter(|&&v| v == 1).count()
    }

    /// Subset of units, in the given order.
    pub fn select(&self, units: &[usize]) -> Result<Dataset> {
        let p = self.p();
        let mut x = Vec::with_capacity(units.len() * p);
        for &i in units {
            if i >= self.n {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: self.n,
                });
            }
            x.extend_from_slice(self.row(i));
        }
        let pick = |v: &[u64]| units.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let mut out = Dataset::from_flat(
            x,
            p,
            units.iter().map(|&i| self.w[i]).collect(),
            pick(&self.y_obs),
        )?;
        if let (Some(y0), Some(y1)) = (&self.y0, &self.y1) {
            out = out.with_potential_outcomes(pick(y0), pick(y1))?;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Overdispersion {
    Poisson,
    LognormalPoisson,
}

/// How units with a zero observed count enter the log-scale approximations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZeroPolicy {
    Error,
    /// The unit contributes no likelihood term to the approximate updates.
    #[default]
    DropRow,
    /// Zero counts are replaced by 0.5 in weights and logs.
    ContinuityCorrection,
}

impl ZeroPolicy {
    /// Effective `(weight, log y)` for the approximate likelihood of a unit,
    /// or `None` when the unit is dropped.
    pub fn effective(self, y: u64, index: usize) -> Result<Option<(f64, f64)>> {
        if y > 0 {
            let yf = y as f64;
            return Ok(Some((yf, yf.ln())));
        }
        match self {
            ZeroPolicy::Error => Err(Error::ZeroCount { index }),
            ZeroPolicy::DropRow => Ok(None),
            ZeroPolicy::ContinuityCorrection => Ok(Some((0.5, 0.5f64.ln()))),
        }
    }
}

/// Inverse-gamma prior `IG(shape, scale)` with density
/// `scale^shape / Γ(shape) x^{-shape-1} exp(-scale / x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvGamma {
    pub shape: f64,
    pub scale: f64,
}

impl InvGamma {
    pub fn new(shape: f64, scale: f64) -> Result<Self> {
        let ig = Self { shape, scale };
        ig.validate()?;
        Ok(ig)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape > 0.0 && self.scale > 0.0 && self.shape.is_finite() && self.scale.is_finite()
        {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "inverse-gamma parameters must be positive, got ({}, {})",
                self.shape, self.scale
            )))
        }
    }

    pub fn mean(&self) -> Option<f64> {
        (self.shape > 1.0).then(|| self.scale / (self.shape - 1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub sigma_beta_sq: f64,
    pub overdispersion: Overdispersion,
    /// Prior on the control-arm log-scale variance; ignored for Poisson.
    pub ig_c: InvGamma,
    /// Prior on the treated-arm log-scale variance; ignored for Poisson.
    pub ig_t: InvGamma,
    #[serde(default)]
    pub zero_policy: ZeroPolicy,
}

impl ModelSpec {
    pub fn poisson(sigma_beta_sq: f64) -> Self {
        Self {
            sigma_beta_sq,
            overdispersion: Overdispersion::Poisson,
            ig_c: InvGamma {
                shape: 2.0,
                scale: 1.0,
            },
            ig_t: InvGamma {
                shape: 2.0,
                scale: 1.0,
            },
            zero_policy: ZeroPolicy::default(),
        }
    }

    pub fn lognormal(sigma_beta_sq: f64, ig_c: InvGamma, ig_t: InvGamma) -> Self {
        Self {
            sigma_beta_sq,
            overdispersion: Overdispersion::LognormalPoisson,
            ig_c,
            ig_t,
            zero_policy: ZeroPolicy::default(),
        }
    }

    pub fn with_zero_policy(mut self, policy: ZeroPolicy) -> Self {
        self.zero_policy = policy;
        self
    }

    pub fn is_poisson(&self) -> bool {
        self.overdispersion == Overdispersion::Poisson
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_beta_sq > 0.0 && self.sigma_beta_sq.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "prior variance of beta must be positive, got {}",
                self.sigma_beta_sq
            )));
        }
        if !self.is_poisson() {
            self.ig_c.validate()?;
            self.ig_t.validate()?;
        }
        Ok(())
    }
}

/// One draw of `(beta, eps, theta)`. The overdispersion vectors are shared
/// behind `Arc` so Poisson chains can reuse a single vector of ones.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterState {
    pub beta: Vec<f64>,
    pub eps_c: Arc<[f64]>,
    pub eps_t: Arc<[f64]>,
    pub sigma_c_sq: Option<f64>,
    pub sigma_t_sq: Option<f64>,
}

impl ParameterState {
    /// `eps ≡ 1`, no hyperparameters.
    pub fn poisson(beta: Vec<f64>, n: usize) -> Self {
        let ones: Arc<[f64]> = vec![1.0; n].into();
        Self {
            beta,
            eps_c: ones.clone(),
            eps_t: ones,
            sigma_c_sq: None,
            sigma_t_sq: None,
        }
    }

    pub fn with_beta(&self, beta: Vec<f64>) -> Self {
        Self {
            beta,
            ..self.clone()
        }
    }

    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        if self.beta.len() != ds.coef_dim() {
            return Err(Error::Dimension(format!(
                "beta has length {}, expected {}",
                self.beta.len(),
                ds.coef_dim()
            )));
        }
        if self.eps_c.len() != ds.n() || self.eps_t.len() != ds.n() {
            return Err(Error::Dimension(
                "overdispersion vectors must have length N".into(),
            ));
        }
        if let Some(i) = self
            .eps_c
            .iter()
            .chain(self.eps_t.iter())
            .position(|&e| !(e > 0.0 && e.is_finite()))
        {
            return Err(Error::InvalidParameter(format!(
                "overdispersion term {i} is not strictly positive"
            )));
        }
        for v in [self.sigma_c_sq, self.sigma_t_sq].into_iter().flatten() {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "variance {v} is not strictly positive"
                )));
            }
        }
        if self.beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidParameter(
                "beta has non-finite entries".into(),
            ));
        }
        Ok(())
    }

    pub fn beta_c<'a>(&'a self, ds: &Dataset) -> &'a [f64] {
        &self.beta[..ds.p()]
    }

    pub fn beta_t<'a>(&'a self, ds: &Dataset) -> &'a [f64] {
        &self.beta[ds.p()..]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignRows {
    pub x_obs: Vec<f64>,
    pub x_mis: Vec<f64>,
    pub m_obs: f64,
    pub m_mis: f64,
}

pub fn validate(ds: &Dataset) -> Result<()> {
    ds.validate()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Offset of the observed-arm block inside the stacked coefficient vector.
#[inline]
pub(crate) fn obs_offset(ds: &Dataset, i: usize) -> usize {
    if ds.treated(i) {
        ds.p()
    } else {
        0
    }
}

#[inline]
pub(crate) fn mis_offset(ds: &Dataset, i: usize) -> usize {
    if ds.treated(i) {
        0
    } else {
        ds.p()
    }
}

/// `(log eps_obs, log eps_mis)` for unit `i`.
#[inline]
pub(crate) fn log_eps_pair(ds: &Dataset, state: &ParameterState, i: usize) -> (f64, f64) {
    let (lc, lt) = (state.eps_c[i].ln(), state.eps_t[i].ln());
    if ds.treated(i) {
        (lt, lc)
    } else {
        (lc, lt)
    }
}

pub fn design_rows(ds: &Dataset, state: &ParameterState, i: usize) -> Result<DesignRows> {
    if i >= ds.n() {
        return Err(Error::IndexOutOfRange {
            index: i,
            len: ds.n(),
        });
    }
    let p = ds.p();
    let w = ds.w()[i] as f64;
    let mut x_obs = vec![0.0; 2 * p];
    let mut x_mis = vec![0.0; 2 * p];
    for (j, &xj) in ds.row(i).iter().enumerate() {
        x_obs[j] = (1.0 - w) * xj;
        x_obs[p + j] = w * xj;
        x_mis[j] = w * xj;
        x_mis[p + j] = (1.0 - w) * xj;
    }
    let (lc, lt) = (state.eps_c[i].ln(), state.eps_t[i].ln());
    Ok(DesignRows {
        x_obs,
        x_mis,
        m_obs: (1.0 - w) * lc + w * lt,
        m_mis: w * lc + (1.0 - w) * lt,
    })
}

/// `x_obs_i · beta` without the overdispersion offset.
#[inline]
pub(crate) fn obs_mean_part(ds: &Dataset, beta: &[f64], i: usize) -> f64 {
    let off = obs_offset(ds, i);
    dot(ds.row(i), &beta[off..off + ds.p()])
}

#[inline]
pub(crate) fn mis_mean_part(ds: &Dataset, beta: &[f64], i: usize) -> f64 {
    let off = mis_offset(ds, i);
    dot(ds.row(i), &beta[off..off + ds.p()])
}

pub(crate) fn check_predictor(value: f64, index: usize) -> Result<f64> {
    if value.is_finite() && value.abs() <= MAX_LINEAR_PREDICTOR {
        Ok(value)
    } else {
        Err(Error::NonFiniteRate { index, value })
    }
}

/// `(xi_obs, xi_mis)` for every unit; `exp` of each is the Poisson rate.
pub fn linear_predictors(ds: &Dataset, state: &ParameterState) -> Result<(Vec<f64>, Vec<f64>)> {
    state.validate(ds)?;
    let mut xi_obs = Vec::with_capacity(ds.n());
    let mut xi_mis = Vec::with_capacity(ds.n());
    for i in 0..ds.n() {
        let (m_obs, m_mis) = log_eps_pair(ds, state, i);
        xi_obs.push(check_predictor(
            obs_mean_part(ds, &state.beta, i) + m_obs,
            i,
        )?);
        xi_mis.push(check_predictor(
            mis_mean_part(ds, &state.beta, i) + m_mis,
            i,
        )?);
    }
    Ok((xi_obs, xi_mis))
}
