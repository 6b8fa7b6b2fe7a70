//! Exact-likelihood Metropolis-within-Gibbs sampler.
//!
//! Targets the same posterior as the approximate sampler but with the Poisson
//! likelihood itself: a joint random-walk proposal for `beta`, one random-walk
//! step per unit on the observed arm's `log eps`, exact prior draws for the
//! unobserved arm's `eps`, and the conjugate inverse-gamma draw for the
//! variances. Slow, but free of the normal approximation, which makes it the
//! reference for accuracy and speed comparisons.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::beta_posterior::fit_beta_posterior;
use crate::error::{Error, Result};
use crate::gibbs::{hyper_conditional, Chain};
use crate::linalg::CholeskyFactor;
use crate::model::{obs_mean_part, Dataset, ModelSpec, ParameterState, ZeroPolicy};
use crate::rng::RngStream;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const TARGET_BETA: f64 = 0.25;
const TARGET_EPS: f64 = 0.44;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub iterations: usize,
    pub burn_in: usize,
    #[serde(default = "one")]
    pub thin: usize,
    pub seed: u64,
    /// Scale of the `beta` proposal. With preconditioning it multiplies the
    /// approximate posterior covariance factor.
    pub proposal_sd_beta: f64,
    /// Scale of the per-unit `log eps` proposal, relative to the unit's
    /// conditional standard deviation `1 / sqrt(y + 1/sigma²)`.
    pub proposal_sd_logeps: f64,
    /// Robbins–Monro adaptation of both scales during burn-in.
    pub adapt: bool,
    /// Shape the `beta` proposal by the Gaussian approximation's covariance.
    /// Only the proposal uses it; the target is exact.
    #[serde(default)]
    pub precondition: bool,
    /// When false the likelihood is dropped and the sampler targets the prior.
    #[serde(default = "yes")]
    pub likelihood: bool,
    #[serde(default)]
    pub max_seconds: Option<f64>,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl OracleConfig {
    pub fn new(iterations: usize, burn_in: usize, seed: u64) -> Self {
        Self {
            iterations,
            burn_in,
            thin: 1,
            seed,
            proposal_sd_beta: 1.0,
            proposal_sd_logeps: 2.4,
            adapt: true,
            precondition: false,
            likelihood: true,
            max_seconds: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.thin == 0 || self.burn_in >= self.iterations {
            return Err(Error::InvalidParameter(format!(
                "need 0 <= burn-in < iterations and thin > 0, got ({}, {}, {})",
                self.burn_in, self.iterations, self.thin
            )));
        }
        for s in [self.proposal_sd_beta, self.proposal_sd_logeps] {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "proposal scale must be positive, got {s}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct OracleRun {
    pub chain: Chain,
    /// Post-burn-in acceptance rate of the `beta` proposals.
    pub accept_beta: f64,
    /// Post-burn-in acceptance rate of the `log eps` proposals; `None` for Poisson.
    pub accept_eps: Option<f64>,
    pub sd_beta: f64,
    pub sd_logeps: f64,
}

fn ln_lik_unit(y: f64, xi: f64) -> f64 {
    y * xi - xi.exp()
}

/// Exact Poisson log-likelihood of the observed outcomes.
pub fn log_likelihood(ds: &Dataset, state: &ParameterState) -> Result<f64> {
    state.validate(ds)?;
    let mut s = 0.0;
    for i in 0..ds.n() {
        let y = ds.y_obs()[i] as f64;
        let le = if ds.treated(i) {
            state.eps_t[i]
        } else {
            state.eps_c[i]
        }
        .ln();
        s += ln_lik_unit(y, obs_mean_part(ds, &state.beta, i) + le) - ln_gamma(y + 1.0);
    }
    Ok(s)
}

fn ln_inv_gamma(x: f64, shape: f64, scale: f64) -> f64 {
    shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - scale / x
}

/// Log posterior density with every normalizing constant: Poisson likelihood, Gaussian prior
/// on `beta`, lognormal priors on `eps` and inverse-gamma priors on the
/// variances. Terms absent from the model are dropped.
pub fn log_posterior(ds: &Dataset, spec: &ModelSpec, state: &ParameterState) -> Result<f64> {
    spec.validate()?;
    let mut lp = log_likelihood(ds, state)?;
    let s2 = spec.sigma_beta_sq;
    let d = state.beta.len() as f64;
    lp +=
        -0.5 * d * (LN_2PI + s2.ln()) - state.beta.iter().map(|b| b * b).sum::<f64>() / (2.0 * s2);
    if !spec.is_poisson() {
        let (Some(sc), Some(st)) = (state.sigma_c_sq, state.sigma_t_sq) else {
            return Err(Error::InvalidParameter(
                "overdispersed state lacks its variances".into(),
            ));
        };
        for (eps, v) in [(&state.eps_c, sc), (&state.eps_t, st)] {
            for &e in eps.iter() {
                let le = e.ln();
                lp += -le - 0.5 * (LN_2PI + v.ln()) - le * le / (2.0 * v);
            }
        }
        lp += ln_inv_gamma(sc, spec.ig_c.shape, spec.ig_c.scale);
        lp += ln_inv_gamma(st, spec.ig_t.shape, spec.ig_t.scale);
    }
    if !lp.is_finite() {
        return Err(Error::InvalidParameter(
            "log posterior is not finite".into(),
        ));
    }
    Ok(lp)
}

fn initial_beta(ds: &Dataset, likelihood: bool) -> Vec<f64> {
    let p = ds.p();
    let mut beta = vec![0.0; 2 * p];
    if likelihood {
        for arm in 0..2 {
            let (mut s, mut c) = (0.0f64, 0.0f64);
            for i in 0..ds.n() {
                if ds.treated(i) as usize == arm {
                    s += ds.y_obs()[i] as f64;
                    c += 1.0;
                }
            }
            beta[arm * p] = (s / c.max(1.0) + 0.5).ln();
        }
    }
    beta
}

fn proposal_factor(ds: &Dataset, spec: &ModelSpec) -> Result<CholeskyFactor> {
    let state = ParameterState::poisson(vec![0.0; ds.coef_dim()], ds.n());
    let spec = spec.with_zero_policy(ZeroPolicy::ContinuityCorrection);
    Ok(fit_beta_posterior(ds, &state, &spec)?.chol)
}

pub fn run_oracle(ds: &Dataset, spec: &ModelSpec, config: &OracleConfig) -> Result<OracleRun> {
    ds.validate()?;
    spec.validate()?;
    config.validate()?;
    let n = ds.n();
    let d = ds.coef_dim();
    let lognormal = !spec.is_poisson();
    let use_lik = config.likelihood;
    let factor = if config.precondition && use_lik {
        Some(proposal_factor(ds, spec)?)
    } else {
        None
    };
    let root = RngStream::new(config.seed);
    let start = Instant::now();

    let y: Vec<f64> = ds.y_obs().iter().map(|&v| v as f64).collect();
    let mut beta = initial_beta(ds, use_lik);
    let mut log_eps_c = vec![0.0; n];
    let mut log_eps_t = vec![0.0; n];
    let (mut sc, mut st) = if lognormal {
        (
            spec.ig_c.mean().unwrap_or(spec.ig_c.scale),
            spec.ig_t.mean().unwrap_or(spec.ig_t.scale),
        )
    } else {
        (1.0, 1.0)
    };
    let obs_log_eps = |lc: &[f64], lt: &[f64], i: usize| if ds.treated(i) { lt[i] } else { lc[i] };
    let mut fit: Vec<f64> = (0..n).map(|i| obs_mean_part(ds, &beta, i)).collect();
    let beta_lik = |fit: &[f64], lc: &[f64], lt: &[f64]| -> f64 {
        if !use_lik {
            return 0.0;
        }
        (0..n)
            .map(|i| ln_lik_unit(y[i], fit[i] + obs_log_eps(lc, lt, i)))
            .sum()
    };
    let beta_prior = |b: &[f64]| -b.iter().map(|v| v * v).sum::<f64>() / (2.0 * spec.sigma_beta_sq);
    let mut cur_lik = beta_lik(&fit, &log_eps_c, &log_eps_t);

    let mut ln_sd_beta = config.proposal_sd_beta.ln();
    let mut ln_sd_eps = config.proposal_sd_logeps.ln();
    let (mut acc_b, mut tried_b, mut acc_e, mut tried_e) = (0u64, 0u64, 0u64, 0u64);
    let ones: std::sync::Arc<[f64]> = vec![1.0; n].into();
    let mut draws = Vec::with_capacity(
        (config.iterations - config.burn_in)
            .div_ceil(config.thin)
            .min(1 << 16),
    );

    for t in 0..config.iterations {
        if let Some(cap) = config.max_seconds {
            if start.elapsed().as_secs_f64() > cap {
                return Err(Error::Timeout { iterations: t });
            }
        }
        let sweep = root.split(t as u64);
        let burning = t < config.burn_in;
        let gain = 1.0 / ((t + 1) as f64).powf(0.6);

        // beta: joint random walk
        let mut rb = sweep.split(0);
        let z = rb.normal_vec(d);
        let step = match &factor {
            Some(f) => f.solve_upper(&z)?,
            None => z,
        };
        let sd_b = ln_sd_beta.exp();
        let prop: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + sd_b * s).collect();
        let prop_fit: Vec<f64> = (0..n).map(|i| obs_mean_part(ds, &prop, i)).collect();
        let prop_lik = beta_lik(&prop_fit, &log_eps_c, &log_eps_t);
        let log_ratio = prop_lik + beta_prior(&prop) - cur_lik - beta_prior(&beta);
        let accepted = log_ratio.is_finite() && rb.uniform().ln() < log_ratio;
        if accepted {
            beta = prop;
            fit = prop_fit;
            cur_lik = prop_lik;
        }
        if burning {
            if config.adapt {
                ln_sd_beta += gain * (accepted as u8 as f64 - TARGET_BETA);
            }
        } else {
            tried_b += 1;
            acc_b += accepted as u64;
        }

        if lognormal {
            let sd_e = ln_sd_eps.exp();
            let re = sweep.split(1);
            let mut acc_sweep = 0.0;
            for i in 0..n {
                let mut r = re.split(i as u64);
                let treated = ds.treated(i);
                let (s_obs, s_mis) = if treated { (st, sc) } else { (sc, st) };
                let lik_w = if use_lik { y[i] } else { 0.0 };
                let cur = if treated { log_eps_t[i] } else { log_eps_c[i] };
                let target = |le: f64| {
                    let l = if use_lik {
                        ln_lik_unit(y[i], fit[i] + le)
                    } else {
                        0.0
                    };
                    l - le * le / (2.0 * s_obs)
                };
                let prop = cur + sd_e / (lik_w + 1.0 / s_obs).sqrt() * r.normal();
                let ok = r.uniform().ln() < target(prop) - target(cur);
                let new = if ok { prop } else { cur };
                acc_sweep += ok as u8 as f64;
                let mis = s_mis.sqrt() * r.normal();
                if treated {
                    log_eps_t[i] = new;
                    log_eps_c[i] = mis;
                } else {
                    log_eps_c[i] = new;
                    log_eps_t[i] = mis;
                }
                if !burning {
                    tried_e += 1;
                    acc_e += ok as u64;
                }
            }
            if burning && config.adapt && n > 0 {
                ln_sd_eps += gain * (acc_sweep / n as f64 - TARGET_EPS);
            }
            cur_lik = beta_lik(&fit, &log_eps_c, &log_eps_t);
            let ec: Vec<f64> = log_eps_c.iter().map(|v| v.exp()).collect();
            let et: Vec<f64> = log_eps_t.iter().map(|v| v.exp()).collect();
            let (a, b) = hyper_conditional(&ec, &et, spec, &mut sweep.split(2))
                .map_err(|e| e.at_iteration(t))?;
            sc = a;
            st = b;
        }

        if !burning && (t - config.burn_in) % config.thin == 0 {
            let state = if lognormal {
                ParameterState {
                    beta: beta.clone(),
                    eps_c: log_eps_c.iter().map(|v| v.exp()).collect::<Vec<_>>().into(),
                    eps_t: log_eps_t.iter().map(|v| v.exp()).collect::<Vec<_>>().into(),
                    sigma_c_sq: Some(sc),
                    sigma_t_sq: Some(st),
                }
            } else {
                ParameterState {
                    beta: beta.clone(),
                    eps_c: ones.clone(),
                    eps_t: ones.clone(),
                    sigma_c_sq: None,
                    sigma_t_sq: None,
                }
            };
            draws.push(state);
        }
    }
    let sd_beta = ln_sd_beta.exp();
    let sd_logeps = ln_sd_eps.exp();
    if tried_b >= 50 && acc_b == 0 {
        return Err(Error::NoAcceptance { sd_beta, sd_logeps });
    }
    Ok(OracleRun {
        chain: Chain { draws },
        accept_beta: acc_b as f64 / tried_b.max(1) as f64,
        accept_eps: lognormal.then(|| acc_e as f64 / tried_e.max(1) as f64),
        sd_beta,
        sd_logeps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcse::{mcse, mean};
    use crate::model::InvGamma;
    use crate::quadrature::integrate;

    fn poisson_data(n: usize, seed: u64, b_c: (f64, f64), b_t: (f64, f64)) -> Dataset {
        let mut rng = RngStream::new(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![1.0, 2.0 * rng.uniform() - 1.0])
            .collect();
        let w: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let y = (0..n)
            .map(|i| {
                let (a, b) = if w[i] == 1 { b_t } else { b_c };
                rng.poisson(f64::exp(a + b * rows[i][1])).unwrap()
            })
            .collect();
        Dataset::new(rows, w, y).unwrap()
    }

    #[test]
    fn zero_counts_at_zero_coefficients() {
        let ds = Dataset::new(vec![vec![1.0]; 5], vec![0, 1, 0, 1, 0], vec![0; 5]).unwrap();
        let st = ParameterState::poisson(vec![0.0, 0.0], 5);
        assert!((log_likelihood(&ds, &st).unwrap() + 5.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let ds = poisson_data(30, 2, (1.5, 0.4), (2.0, -0.3));
        let spec = ModelSpec::poisson(3.0);
        let beta = vec![1.2, 0.3, 1.9, -0.1];
        let st = ParameterState::poisson(beta.clone(), 30);
        let mut grad = vec![0.0; 4];
        for i in 0..30 {
            let r = crate::model::design_rows(&ds, &st, i).unwrap();
            let xi = crate::model::dot(&r.x_obs, &beta);
            for j in 0..4 {
                grad[j] += (ds.y_obs()[i] as f64 - xi.exp()) * r.x_obs[j];
            }
        }
        for j in 0..4 {
            grad[j] -= beta[j] / 3.0;
            let h = 1e-5;
            let mut up = beta.clone();
            up[j] += h;
            let mut dn = beta.clone();
            dn[j] -= h;
            let num = (log_posterior(&ds, &spec, &st.with_beta(up)).unwrap()
                - log_posterior(&ds, &spec, &st.with_beta(dn)).unwrap())
                / (2.0 * h);
            assert!(
                (num - grad[j]).abs() < 1e-5 * (1.0 + grad[j].abs()),
                "{j}: {num} vs {}",
                grad[j]
            );
        }
    }

    #[test]
    fn intercept_shift_absorbed_by_eps() {
        let ds = poisson_data(12, 8, (1.0, 0.2), (1.3, 0.1));
        let base = ParameterState {
            beta: vec![0.9, 0.2, 1.4, 0.1],
            eps_c: vec![1.1; 12].into(),
            eps_t: vec![0.8; 12].into(),
            sigma_c_sq: Some(0.2),
            sigma_t_sq: Some(0.3),
        };
        let c = 0.37;
        let shifted = ParameterState {
            beta: vec![0.9 - c, 0.2, 1.4 - c, 0.1],
            eps_c: base
                .eps_c
                .iter()
                .map(|e| e * c.exp())
                .collect::<Vec<_>>()
                .into(),
            eps_t: base
                .eps_t
                .iter()
                .map(|e| e * c.exp())
                .collect::<Vec<_>>()
                .into(),
            ..base.clone()
        };
        let a = log_likelihood(&ds, &base).unwrap();
        let b = log_likelihood(&ds, &shifted).unwrap();
        assert!((a - b).abs() < 1e-9 * a.abs());
    }

    #[test]
    fn prior_only_target() {
        let ds = poisson_data(20, 3, (2.0, 0.0), (2.0, 0.0));
        let spec = ModelSpec::poisson(2.0);
        let mut cfg = OracleConfig::new(60_000, 5_000, 4);
        cfg.likelihood = false;
        let run = run_oracle(&ds, &spec, &cfg).unwrap();
        assert!(
            (0.1..=0.6).contains(&run.accept_beta),
            "{}",
            run.accept_beta
        );
        for j in 0..4 {
            let col = run.chain.beta_column(j);
            let m = mean(&col);
            assert!(m.abs() < 4.0 * mcse(&col), "beta_{j} mean {m}");
            let sq: Vec<f64> = col.iter().map(|b| b * b).collect();
            assert!(
                (mean(&sq) - 2.0).abs() < 4.0 * mcse(&sq),
                "beta_{j} second moment {}",
                mean(&sq)
            );
        }
    }

    #[test]
    fn histogram_matches_exact_marginal() {
        // intercept-only arms make (beta_c, beta_t) a two-parameter target
        // whose beta_c marginal is one-dimensional and normalizable
        let mut rng = RngStream::new(71);
        let n = 16;
        let w: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let y: Vec<u64> = (0..n).map(|_| rng.poisson(3.0).unwrap()).collect();
        let ds = Dataset::new(vec![vec![1.0]; n], w, y).unwrap();
        let s2 = 4.0;
        let spec = ModelSpec::poisson(s2);
        let run = run_oracle(&ds, &spec, &OracleConfig::new(400_000, 20_000, 5)).unwrap();
        let col = run.chain.beta_column(0);
        let (sy, nc) = (0..n)
            .filter(|&i| !ds.treated(i))
            .fold((0.0, 0.0), |(s, c), i| (s + ds.y_obs()[i] as f64, c + 1.0));
        let ln_dens = |b: f64| sy * b - nc * b.exp() - b * b / (2.0 * s2);
        let mode = (sy / nc).ln();
        let peak = ln_dens(mode);
        let (lo, hi) = (mode - 3.0, mode + 3.0);
        let z = integrate(|b| (ln_dens(b) - peak).exp(), lo, hi, 1e-12, 16).unwrap();
        let bins = 40;
        let width = (hi - lo) / bins as f64;
        let mut hist = vec![0.0; bins];
        for &b in &col {
            let k = ((b - lo) / width).floor();
            if k >= 0.0 && (k as usize) < bins {
                hist[k as usize] += 1.0;
            }
        }
        let mut tv = 0.0;
        for k in 0..bins {
            let a = lo + k as f64 * width;
            let p = integrate(|b| (ln_dens(b) - peak).exp(), a, a + width, 1e-12, 1).unwrap() / z;
            tv += (hist[k] / col.len() as f64 - p).abs();
        }
        tv *= 0.5;
        assert!(tv < 0.05, "total variation {tv}");
    }

    #[test]
    fn quadrupling_iterations_halves_mcse() {
        let ds = poisson_data(100, 6, (2.5, 0.3), (3.0, 0.5));
        let spec = ModelSpec::poisson(10.0);
        // batch means needs batches longer than the autocorrelation time, which
        // the isotropic proposal does not reach at this length
        let short = run_oracle(
            &ds,
            &spec,
            &OracleConfig {
                precondition: true,
                ..OracleConfig::new(25_000, 5_000, 8)
            },
        )
        .unwrap();
        let long = run_oracle(
            &ds,
            &spec,
            &OracleConfig {
                precondition: true,
                ..OracleConfig::new(85_000, 5_000, 9)
            },
        )
        .unwrap();
        for j in 0..4 {
            let ratio = mcse(&long.chain.beta_column(j)) / mcse(&short.chain.beta_column(j));
            assert!((0.35..=0.65).contains(&ratio), "beta_{j}: ratio {ratio}");
        }
    }

    #[test]
    fn lognormal_run_adapts_into_range() {
        let ds = poisson_data(60, 10, (2.5, 0.3), (3.0, 0.5));
        let ig = InvGamma {
            shape: 3.0,
            scale: 0.5,
        };
        let spec = ModelSpec::lognormal(10.0, ig, ig);
        let run = run_oracle(&ds, &spec, &OracleConfig::new(6_000, 2_000, 1)).unwrap();
        assert!(
            (0.1..=0.6).contains(&run.accept_beta),
            "{}",
            run.accept_beta
        );
        let ae = run.accept_eps.unwrap();
        assert!((0.1..=0.6).contains(&ae), "{ae}");
        assert_eq!(run.chain.len(), 4_000);
        let st = &run.chain.draws[10];
        assert!(log_posterior(&ds, &spec, st).unwrap().is_finite());
    }

    #[test]
    fn deterministic_and_validated() {
        let ds = poisson_data(20, 1, (2.0, 0.1), (2.2, 0.1));
        let spec = ModelSpec::poisson(5.0);
        let cfg = OracleConfig::new(2_000, 500, 3);
        let a = run_oracle(&ds, &spec, &cfg).unwrap();
        let b = run_oracle(&ds, &spec, &cfg).unwrap();
        assert_eq!(a.chain, b.chain);
        let mut bad = cfg.clone();
        bad.proposal_sd_beta = 0.0;
        assert!(run_oracle(&ds, &spec, &bad).is_err());
    }
}
