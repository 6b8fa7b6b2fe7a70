//! Simulated completely randomized experiments with both potential outcomes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{dot, Dataset};
use crate::rng::RngStream;

pub const SIMPLE_CONTROL: [f64; 2] = [3.2, 0.3];
pub const SIMPLE_TREATED: [f64; 2] = [3.7, 0.8];
pub const COMPLEX_CONTROL: [f64; 6] = [3.2, 0.3, 0.7, 1.0, 0.4, 0.8];
pub const COMPLEX_TREATED: [f64; 6] = [3.7, 0.8, 0.5, 1.2, 0.6, 0.9];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimModel {
    /// One covariate.
    Simple,
    /// Five covariates.
    Complex,
    /// Arbitrary coefficient blocks of equal length, intercept first.
    Custom { beta_c: Vec<f64>, beta_t: Vec<f64> },
}

impl SimModel {
    pub fn coefficients(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            SimModel::Simple => (SIMPLE_CONTROL.to_vec(), SIMPLE_TREATED.to_vec()),
            SimModel::Complex => (COMPLEX_CONTROL.to_vec(), COMPLEX_TREATED.to_vec()),
            SimModel::Custom { beta_c, beta_t } => (beta_c.clone(), beta_t.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub model: SimModel,
    pub n: usize,
    /// Standard deviation of `log eps`; zero gives Poisson outcomes.
    pub overdispersion_sigma: f64,
    pub seed: u64,
}

impl SimSpec {
    pub fn new(model: SimModel, n: usize, overdispersion_sigma: f64, seed: u64) -> Self {
        Self {
            model,
            n,
            overdispersion_sigma,
            seed,
        }
    }

    /// The same design with a seed derived for replication `r`, so every
    /// replication draws fresh covariates, noise, outcomes and assignment.
    pub fn replication(&self, r: u64) -> Self {
        Self {
            seed: RngStream::new(self.seed).split(r).next_raw(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n % 2 != 0 {
            return Err(Error::InvalidParameter(format!(
                "the number of units must be even and positive, got {}",
                self.n
            )));
        }
        if !(self.overdispersion_sigma >= 0.0 && self.overdispersion_sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "overdispersion sigma must be non-negative, got {}",
                self.overdispersion_sigma
            )));
        }
        let (c, t) = self.model.coefficients();
        if c.is_empty() || c.len() != t.len() {
            return Err(Error::Dimension(format!(
                "coefficient blocks of lengths {} and {}",
                c.len(),
                t.len()
            )));
        }
        if c.iter().chain(&t).any(|b| !b.is_finite()) {
            return Err(Error::InvalidParameter(
                "coefficients must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// Exactly `n_treated` of `n` units, every subset equally likely.
pub fn complete_randomization(n: usize, n_treated: usize, rng: &mut RngStream) -> Vec<u8> {
    let mut idx: Vec<usize> = (0..n).collect();
    // partial Fisher–Yates
    for k in 0..n_treated.min(n) {
        let j = k + ((rng.uniform() * (n - k) as f64) as usize).min(n - k - 1);
        idx.swap(k, j);
    }
    let mut w = vec![0u8; n];
    for &i in &idx[..n_treated.min(n)] {
        w[i] = 1;
    }
    w
}

pub fn generate(spec: &SimSpec) -> Result<Dataset> {
    spec.validate()?;
    let (bc, bt) = spec.model.coefficients();
    let p = bc.len();
    let n = spec.n;
    let root = RngStream::new(spec.seed);
    let mut x = Vec::with_capacity(n * p);
    let mut y0 = Vec::with_capacity(n);
    let mut y1 = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = root.split(0).split(i as u64);
        let start = x.len();
        x.push(1.0);
        for _ in 1..p {
            x.push(2.0 * r.uniform() - 1.0);
        }
        let row = &x[start..];
        let (ec, et) = if spec.overdispersion_sigma > 0.0 {
            let mut re = root.split(1).split(i as u64);
            let s = spec.overdispersion_sigma;
            ((s * re.normal()).exp(), (s * re.normal()).exp())
        } else {
            (1.0, 1.0)
        };
        let mut ry = root.split(2).split(i as u64);
        y0.push(ry.poisson(dot(row, &bc).exp() * ec)?);
        y1.push(ry.poisson(dot(row, &bt).exp() * et)?);
    }
    let w = complete_randomization(n, n / 2, &mut root.split(3));
    let y_obs = (0..n)
        .map(|i| if w[i] == 1 { y1[i] } else { y0[i] })
        .collect();
    Dataset::from_flat(x, p, w, y_obs)?.with_potential_outcomes(y0, y1)
}

/// `(1/N) Σ (Y_i(1) − Y_i(0))`.
pub fn true_ate(ds: &Dataset) -> Result<f64> {
    let (Some(y0), Some(y1)) = (ds.y0(), ds.y1()) else {
        return Err(Error::MissingPotentialOutcomes);
    };
    let s: f64 = y0.iter().zip(y1).map(|(&a, &b)| b as f64 - a as f64).sum();
    Ok(s / ds.n() as f64)
}
