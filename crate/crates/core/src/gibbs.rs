//! Blocked Gibbs sampler over `(beta, eps, sigma²)`.
//!
//! Each sweep draws `beta` from the Gaussian approximation, then every unit's
//! two overdispersion terms from their lognormal conditionals, then the two
//! log-scale variances from their inverse-gamma conditionals. Poisson models
//! pin `eps` to one and only update `beta`.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beta_posterior::{fit_beta_posterior, GaussianPosterior};
use crate::error::{Error, Result};
use crate::model::{obs_mean_part, Dataset, InvGamma, ModelSpec, ParameterState, ZeroPolicy};
use crate::rng::RngStream;

/// Split index reserved for initialization streams.
const INIT_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GibbsConfig {
    pub iterations: usize,
    pub burn_in: usize,
    #[serde(default = "one")]
    pub thin: usize,
    pub seed: u64,
    /// Wall-clock cap in seconds; exceeding it aborts the chain.
    #[serde(default)]
    pub max_seconds: Option<f64>,
}

fn one() -> usize {
    1
}

impl GibbsConfig {
    pub fn new(iterations: usize, burn_in: usize, seed: u64) -> Self {
        Self {
            iterations,
            burn_in,
            thin: 1,
            seed,
            max_seconds: None,
        }
    }

    pub fn with_thin(mut self, thin: usize) -> Self {
        self.thin = thin;
        self
    }

    pub fn with_max_seconds(mut self, secs: f64) -> Self {
        self.max_seconds = Some(secs);
        self
    }

    pub fn retained(&self) -> usize {
        if self.thin == 0 || self.burn_in >= self.iterations {
            return 0;
        }
        (self.iterations - self.burn_in).div_ceil(self.thin)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.thin == 0 {
            return Err(Error::InvalidParameter(
                "iterations and thin must be positive".into(),
            ));
        }
        if self.burn_in >= self.iterations {
            return Err(Error::InvalidParameter(format!(
                "burn-in {} leaves no draws out of {} iterations",
                self.burn_in, self.iterations
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub draws: Vec<ParameterState>,
}

impl Chain {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn beta_column(&self, j: usize) -> Vec<f64> {
        self.draws.iter().map(|s| s.beta[j]).collect()
    }

    pub fn beta_mean(&self) -> Vec<f64> {
        let d = self.draws.first().map_or(0, |s| s.beta.len());
        (0..d)
            .map(|j| crate::mcse::mean(&self.beta_column(j)))
            .collect()
    }

    /// Concatenates chains in order.
    pub fn concat(chains: Vec<Chain>) -> Chain {
        Chain {
            draws: chains.into_iter().flat_map(|c| c.draws).collect(),
        }
    }

    /// One row per retained draw: the `beta` entries, then `sigma_c_sq` and
    /// `sigma_t_sq` (empty for Poisson models).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let d = self.draws.first().map_or(0, |s| s.beta.len());
        let mut header: Vec<String> = (0..d).map(|j| format!("beta_{j}")).collect();
        header.push("sigma_c_sq".into());
        header.push("sigma_t_sq".into());
        w.write_record(&header)?;
        for s in &self.draws {
            let mut row: Vec<String> = s.beta.iter().map(|b| format!("{b:?}")).collect();
            for v in [s.sigma_c_sq, s.sigma_t_sq] {
                row.push(v.map(|x| format!("{x:?}")).unwrap_or_default());
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Normal law of `log eps` for one arm of one unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsLaw {
    pub mean: f64,
    pub var: f64,
}

impl EpsLaw {
    pub fn draw(&self, rng: &mut RngStream) -> f64 {
        (self.mean + self.var.sqrt() * rng.normal()).exp()
    }
}

/// Conditional laws of `(log eps_c, log eps_t)` for unit `i` given `beta` and
/// the variances. Only the observed arm carries a likelihood term; the other
/// arm's law is its prior.
pub fn eps_conditional(
    ds: &Dataset,
    beta: &[f64],
    sigma_c_sq: f64,
    sigma_t_sq: f64,
    policy: ZeroPolicy,
    i: usize,
) -> Result<(EpsLaw, EpsLaw)> {
    if i >= ds.n() {
        return Err(Error::IndexOutOfRange {
            index: i,
            len: ds.n(),
        });
    }
    for v in [sigma_c_sq, sigma_t_sq] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "variance {v} is not strictly positive"
            )));
        }
    }
    let w = ds.w()[i] as f64;
    let (y, log_y) = policy.effective(ds.y_obs()[i], i)?.unwrap_or((0.0, 0.0));
    let fit = obs_mean_part(ds, beta, i);
    let arm = |active: f64, sigma_sq: f64| {
        let var = 1.0 / (active * active * y + 1.0 / sigma_sq);
        let mean = -active * y * (fit - log_y) * var;
        // -0.0 from an inactive arm reads oddly in dumps
        EpsLaw {
            mean: mean + 0.0,
            var,
        }
    };
    Ok((arm(1.0 - w, sigma_c_sq), arm(w, sigma_t_sq)))
}

/// `IG(shape + n/2, scale + ½ Σ (log eps)²)`.
pub fn hyper_posterior(eps: &[f64], prior: InvGamma) -> Result<InvGamma> {
    prior.validate()?;
    if let Some(i) = eps.iter().position(|&e| !(e > 0.0 && e.is_finite())) {
        return Err(Error::InvalidParameter(format!(
            "overdispersion term {i} is not strictly positive"
        )));
    }
    let ss: f64 = eps.iter().map(|e| e.ln().powi(2)).sum();
    Ok(InvGamma {
        shape: prior.shape + eps.len() as f64 / 2.0,
        scale: prior.scale + 0.5 * ss,
    })
}

pub fn sample_inv_gamma(ig: InvGamma, rng: &mut RngStream) -> Result<f64> {
    ig.validate()?;
    Ok(1.0 / rng.gamma(ig.shape, 1.0 / ig.scale)?)
}

/// Draws `(sigma_c_sq, sigma_t_sq)` from their conditionals. Shared by the
/// approximate sampler and the exact oracle.
pub fn hyper_conditional(
    eps_c: &[f64],
    eps_t: &[f64],
    spec: &ModelSpec,
    rng: &mut RngStream,
) -> Result<(f64, f64)> {
    let c = sample_inv_gamma(hyper_posterior(eps_c, spec.ig_c)?, &mut rng.split(0))?;
    let t = sample_inv_gamma(hyper_posterior(eps_t, spec.ig_t)?, &mut rng.split(1))?;
    Ok((c, t))
}

/// `beta ~ N(0, sigma_beta² I)`, `eps ≡ 1`, variances from their priors.
pub fn initial_state(ds: &Dataset, spec: &ModelSpec, rng: &RngStream) -> Result<ParameterState> {
    let mut r = rng.split(0);
    let sd = spec.sigma_beta_sq.sqrt();
    let beta: Vec<f64> = r
        .normal_vec(ds.coef_dim())
        .into_iter()
        .map(|z| sd * z)
        .collect();
    let mut state = ParameterState::poisson(beta, ds.n());
    if !spec.is_poisson() {
        state.sigma_c_sq = Some(sample_inv_gamma(spec.ig_c, &mut rng.split(1))?);
        state.sigma_t_sq = Some(sample_inv_gamma(spec.ig_t, &mut rng.split(2))?);
    }
    Ok(state)
}

/// Draws every unit's `(eps_c, eps_t)` given `beta` and the variances.
pub(crate) fn update_eps(
    ds: &Dataset,
    spec: &ModelSpec,
    beta: &[f64],
    sigma_c_sq: f64,
    sigma_t_sq: f64,
    rng: &RngStream,
) -> Result<(Arc<[f64]>, Arc<[f64]>)> {
    let pairs: Vec<(f64, f64)> = (0..ds.n())
        .into_par_iter()
        .map(|i| {
            let (lc, lt) = eps_conditional(ds, beta, sigma_c_sq, sigma_t_sq, spec.zero_policy, i)?;
            let mut r = rng.split(i as u64);
            Ok((lc.draw(&mut r), lt.draw(&mut r)))
        })
        .collect::<Result<_>>()?;
    let (c, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    Ok((c.into(), t.into()))
}

/// Runs chain `index` of the sampler; chains with different indices use
/// independent streams split from the master seed.
pub fn run_chain_indexed(
    ds: &Dataset,
    spec: &ModelSpec,
    config: &GibbsConfig,
    index: u64,
) -> Result<Chain> {
    ds.validate()?;
    spec.validate()?;
    config.validate()?;
    let root = RngStream::new(config.seed).split(index);
    let start = Instant::now();
    let mut state = initial_state(ds, spec, &root.split(INIT_STREAM))?;
    // eps never moves under the Poisson model, so the Gaussian is fitted once
    let fixed: Option<GaussianPosterior> = if spec.is_poisson() {
        Some(fit_beta_posterior(ds, &state, spec)?)
    } else {
        None
    };
    let mut draws = Vec::with_capacity(config.retained().min(1 << 16));
    for t in 0..config.iterations {
        if let Some(cap) = config.max_seconds {
            if start.elapsed().as_secs_f64() > cap {
                return Err(Error::Timeout { iterations: t });
            }
        }
        let sweep = root.split(t as u64);
        let step = || -> Result<ParameterState> {
            let beta = match &fixed {
                Some(post) => post.sample(&mut sweep.split(0))?,
                None => fit_beta_posterior(ds, &state, spec)?.sample(&mut sweep.split(0))?,
            };
            if spec.is_poisson() {
                return Ok(state.with_beta(beta));
            }
            let (sc, st) = (
                state.sigma_c_sq.unwrap_or(1.0),
                state.sigma_t_sq.unwrap_or(1.0),
            );
            let (eps_c, eps_t) = update_eps(ds, spec, &beta, sc, st, &sweep.split(1))?;
            let (sc, st) = hyper_conditional(&eps_c, &eps_t, spec, &mut sweep.split(2))?;
            Ok(ParameterState {
                beta,
                eps_c,
                eps_t,
                sigma_c_sq: Some(sc),
                sigma_t_sq: Some(st),
            })
        };
        state = step().map_err(|e| e.at_iteration(t))?;
        if t >= config.burn_in && (t - config.burn_in) % config.thin == 0 {
            draws.push(state.clone());
        }
    }
    Ok(Chain { draws })
}

pub fn run_chain(ds: &Dataset, spec: &ModelSpec, config: &GibbsConfig) -> Result<Chain> {
    run_chain_indexed(ds, spec, config, 0)
}

/// Independent chains run in parallel, returned in index order.
pub fn run_chains(
    ds: &Dataset,
    spec: &ModelSpec,
    config: &GibbsConfig,
    chains: usize,
) -> Result<Vec<Chain>> {
    (0..chains as u64)
        .into_par_iter()
        .map(|c| run_chain_indexed(ds, spec, config, c))
        .collect()
}
