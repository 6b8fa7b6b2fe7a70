//! Repeated imputation of the missing potential outcomes and the posterior
//! moments of the finite-population ATE.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beta_posterior::{fit_beta_posterior, mis_predictor_law, GaussianPosterior};
use crate::error::{Error, Result};
use crate::gibbs::Chain;
use crate::model::{
    log_eps_pair, mis_mean_part, Dataset, ModelSpec, ParameterState, MAX_LINEAR_PREDICTOR,
};
use crate::rng::RngStream;

/// Split index of the per-replication stream reserved for a fresh `beta`.
const BETA_STREAM: u64 = u64::MAX;

/// Where the missing-arm log-rates of one replication come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImputationMode {
    /// `beta` of the retained draw, shared by every unit.
    #[default]
    ReuseChainBeta,
    /// A fresh `beta` from the Gaussian posterior at the draw's `eps`, shared
    /// by every unit.
    RedrawBeta,
    /// Each unit draws its own log-rate from its marginal normal law, so the
    /// imputations are independent across units.
    PerUnit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImputationConfig {
    pub mode: ImputationMode,
    pub seed: u64,
    /// Keep every imputed vector (R × N counts) for group-wise summaries.
    #[serde(default)]
    pub keep_imputations: bool,
}

impl ImputationConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            mode: ImputationMode::default(),
            seed,
            keep_imputations: false,
        }
    }

    pub fn with_mode(mut self, mode: ImputationMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn keeping_imputations(mut self) -> Self {
        self.keep_imputations = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AteEstimate {
    pub per_rep: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
    pub r: usize,
    #[serde(skip)]
    pub imputations: Option<Vec<Vec<u64>>>,
}

impl AteEstimate {
    pub fn from_per_rep(per_rep: Vec<f64>) -> Result<Self> {
        let r = per_rep.len();
        if r < 2 {
            return Err(Error::InsufficientDraws {
                required: 2,
                got: r,
            });
        }
        let mean = crate::mcse::mean(&per_rep);
        let variance = crate::mcse::variance(&per_rep).max(0.0);
        Ok(Self {
            per_rep,
            mean,
            variance,
            r,
            imputations: None,
        })
    }

    pub fn sd(&self) -> f64 {
        self.variance.sqrt()
    }

    /// Monte Carlo standard error of `mean` for independent replications.
    pub fn se_of_mean(&self) -> f64 {
        (self.variance / self.r as f64).sqrt()
    }
}

fn check_log_rate(xi: f64, index: usize) -> Result<f64> {
    if xi.is_nan() || xi > MAX_LINEAR_PREDICTOR {
        return Err(Error::NonFiniteRate { index, value: xi });
    }
    Ok(xi)
}

/// `Y_i ~ Poisson(rates[i])`; unit `i` draws from `rng.split(i)`. A zero rate
/// is a point mass at zero.
pub fn impute_from_rates(rates: &[f64], rng: &RngStream) -> Result<Vec<u64>> {
    rates
        .iter()
        .enumerate()
        .map(|(i, &mu)| {
            if !(mu >= 0.0 && mu.is_finite()) {
                return Err(Error::NonFiniteRate {
                    index: i,
                    value: mu,
                });
            }
            rng.split(i as u64).poisson(mu)
        })
        .collect()
}

/// `Y_mis_i ~ Poisson(exp(xi_mis_i))` at the state's `beta` and `eps`.
pub fn impute_ymis(ds: &Dataset, state: &ParameterState, rng: &RngStream) -> Result<Vec<u64>> {
    state.validate(ds)?;
    let rates: Vec<f64> = (0..ds.n())
        .map(|i| {
            let (_, m_mis) = log_eps_pair(ds, state, i);
            Ok(check_log_rate(mis_mean_part(ds, &state.beta, i) + m_mis, i)?.exp())
        })
        .collect::<Result<_>>()?;
    impute_from_rates(&rates, rng)
}

/// `(1/N) Σ (2W_i − 1)(Y_obs_i − Ŷ_mis_i)`.
pub fn ate_of_imputation(ds: &Dataset, y_mis: &[u64]) -> Result<f64> {
    if y_mis.len() != ds.n() {
        return Err(Error::Dimension(format!(
            "{} imputed outcomes for {} units",
            y_mis.len(),
            ds.n()
        )));
    }
    let s: f64 = (0..ds.n())
        .map(|i| {
            let d = ds.y_obs()[i] as f64 - y_mis[i] as f64;
            if ds.treated(i) {
                d
            } else {
                -d
            }
        })
        .sum();
    Ok(s / ds.n() as f64)
}

/// Normal laws `(mean, variance)` of every unit's missing log-rate.
fn unit_laws(
    ds: &Dataset,
    state: &ParameterState,
    post: &GaussianPosterior,
) -> Result<Vec<(f64, f64)>> {
    (0..ds.n())
        .map(|i| mis_predictor_law(ds, state, post, i))
        .collect()
}

/// One replication's imputed missing outcomes. `posterior` is the Gaussian
/// at `draw`'s `eps` and is required unless `mode` reuses the chain's `beta`;
/// `laws` may carry precomputed per-unit laws for [`ImputationMode::PerUnit`].
pub fn impute_replication(
    ds: &Dataset,
    draw: &ParameterState,
    posterior: Option<&GaussianPosterior>,
    laws: Option<&[(f64, f64)]>,
    mode: ImputationMode,
    rng: &RngStream,
) -> Result<Vec<u64>> {
    let need_post = || {
        posterior.ok_or_else(|| {
            Error::InvalidParameter("this imputation mode needs the beta posterior".into())
        })
    };
    match mode {
        ImputationMode::ReuseChainBeta => impute_ymis(ds, draw, rng),
        ImputationMode::RedrawBeta => {
            let beta = need_post()?.sample(&mut rng.split(BETA_STREAM))?;
            impute_ymis(ds, &draw.with_beta(beta), rng)
        }
        ImputationMode::PerUnit => {
            let owned;
            let laws = match laws {
                Some(l) => l,
                None => {
                    owned = unit_laws(ds, draw, need_post()?)?;
                    &owned
                }
            };
            laws.iter()
                .enumerate()
                .map(|(i, &(m, v))| {
                    let mut r = rng.split(i as u64);
                    let xi = check_log_rate(m + v.sqrt() * r.normal(), i)?;
                    r.poisson(xi.exp())
                })
                .collect()
        }
    }
}

/// Imputes the missing outcomes once per retained draw and summarizes the
/// per-replication ATEs by their mean and unbiased variance. Replication `r`
/// draws from `RngStream::new(seed).split(r)`, so the result does not depend
/// on the thread count.
pub fn estimate_ate(
    ds: &Dataset,
    spec: &ModelSpec,
    chain: &Chain,
    config: &ImputationConfig,
) -> Result<AteEstimate> {
    ds.validate()?;
    spec.validate()?;
    let r_total = chain.len();
    if r_total < 2 {
        return Err(Error::InsufficientDraws {
            required: 2,
            got: r_total,
        });
    }
    let needs_post = config.mode != ImputationMode::ReuseChainBeta;
    // under the Poisson model eps is pinned, so one posterior serves every draw
    let shared_post = if needs_post && spec.is_poisson() {
        Some(fit_beta_posterior(ds, &chain.draws[0], spec)?)
    } else {
        None
    };
    let shared_laws = match (&shared_post, config.mode) {
        (Some(p), ImputationMode::PerUnit) => Some(unit_laws(ds, &chain.draws[0], p)?),
        _ => None,
    };
    let root = RngStream::new(config.seed);
    let reps: Vec<(f64, Option<Vec<u64>>)> = (0..r_total)
        .into_par_iter()
        .map(|r| {
            let draw = &chain.draws[r];
            let local;
            let post = match (&shared_post, needs_post) {
                (Some(p), _) => Some(p),
                (None, true) => {
                    local = fit_beta_posterior(ds, draw, spec)?;
                    Some(&local)
                }
                (None, false) => None,
            };
            let y_mis = impute_replication(
                ds,
                draw,
                post,
                shared_laws.as_deref(),
                config.mode,
                &root.split(r as u64),
            )
            .map_err(|e| e.at_iteration(r))?;
            let ate = ate_of_imputation(ds, &y_mis)?;
            Ok((ate, config.keep_imputations.then_some(y_mis)))
        })
        .collect::<Result<_>>()?;
    let (per_rep, kept): (Vec<f64>, Vec<Option<Vec<u64>>>) = reps.into_iter().unzip();
    let mut est = AteEstimate::from_per_rep(per_rep)?;
    if config.keep_imputations {
        est.imputations = Some(kept.into_iter().flatten().collect());
    }
    Ok(est)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closed_form::{nb_pmf, NbPredictive};
    use crate::gibbs::{run_chain, GibbsConfig};
    use proptest::prelude::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn small() -> Dataset {
        Dataset::new(
            vec![vec![1.0, 0.5], vec![1.0, -0.5]],
            vec![1, 0],
            vec![5, 3],
        )
        .unwrap()
    }

    #[test]
    fn zero_rates_impute_zero() {
        let y = impute_from_rates(&[0.0; 50], &RngStream::new(1)).unwrap();
        assert!(y.iter().all(|&v| v == 0));
        assert!(impute_from_rates(&[f64::NAN], &RngStream::new(1)).is_err());
        assert!(impute_from_rates(&[-1.0], &RngStream::new(1)).is_err());
    }

    #[test]
    fn unit_rates_average_one() {
        let n = 100_000;
        let ds = Dataset::from_flat(vec![1.0; n], 1, vec![0; n], vec![1; n]).unwrap();
        let state = ParameterState::poisson(vec![0.0, 0.0], n);
        let y = impute_ymis(&ds, &state, &RngStream::new(17)).unwrap();
        let m = y.iter().sum::<u64>() as f64 / n as f64;
        assert!((m - 1.0).abs() < 3.0 / (n as f64).sqrt(), "{m}");
        assert_eq!(y, impute_ymis(&ds, &state, &RngStream::new(17)).unwrap());
    }

    #[test]
    fn hand_computed_ate() {
        let ds = small();
        assert_eq!(ate_of_imputation(&ds, &[2, 4]).unwrap(), 2.0);
        assert_eq!(ate_of_imputation(&ds, &[5, 3]).unwrap(), 0.0);
        assert!(ate_of_imputation(&ds, &[1]).is_err());
    }

    #[test]
    fn perfect_imputation_gives_true_ate() {
        let y0 = vec![3, 8, 1, 0, 12];
        let y1 = vec![4, 6, 9, 2, 12];
        let w = vec![1, 0, 0, 1, 1];
        let y_obs: Vec<u64> = (0..5)
            .map(|i| if w[i] == 1 { y1[i] } else { y0[i] })
            .collect();
        let y_mis: Vec<u64> = (0..5)
            .map(|i| if w[i] == 1 { y0[i] } else { y1[i] })
            .collect();
        let ds = Dataset::new(vec![vec![1.0]; 5], w, y_obs)
            .unwrap()
            .with_potential_outcomes(y0.clone(), y1.clone())
            .unwrap();
        let truth = (0..5).map(|i| y1[i] as f64 - y0[i] as f64).sum::<f64>() / 5.0;
        assert_eq!(ate_of_imputation(&ds, &y_mis).unwrap(), truth);
    }

    proptest! {
        #[test]
        fn both_printed_forms_agree(
            cells in proptest::collection::vec((0u8..=1, 0u64..1000, 0u64..1000), 1..40),
            seed in 0u64..1000,
        ) {
            let n = cells.len();
            let w: Vec<u8> = cells.iter().map(|c| c.0).collect();
            let y: Vec<u64> = cells.iter().map(|c| c.1).collect();
            let y_mis: Vec<u64> = cells.iter().map(|c| c.2).collect();
            let ds = Dataset::new(vec![vec![1.0]; n], w.clone(), y.clone()).unwrap();
            let a = ate_of_imputation(&ds, &y_mis).unwrap();
            let b = (0..n)
                .map(|i| {
                    let s = 2.0 * w[i] as f64 - 1.0;
                    s * y[i] as f64 - s * y_mis[i] as f64
                })
                .sum::<f64>() / n as f64;
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
            // permuting units leaves the estimate unchanged
            let mut idx: Vec<usize> = (0..n).collect();
            let mut r = RngStream::new(seed);
            for k in (1..n).rev() {
                let j = (r.uniform() * (k + 1) as f64) as usize;
                idx.swap(k, j.min(k));
            }
            let perm = ds.select(&idx).unwrap();
            let y_mis_p: Vec<u64> = idx.iter().map(|&i| y_mis[i]).collect();
            let c = ate_of_imputation(&perm, &y_mis_p).unwrap();
            prop_assert!((a - c).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn degenerate_rates_give_zero_variance() {
        let ds = small();
        let state = ParameterState::poisson(vec![-60.0, 0.0, -60.0, 0.0], 2);
        let chain = Chain {
            draws: vec![state; 50],
        };
        let est = estimate_ate(
            &ds,
            &ModelSpec::poisson(1.0),
            &chain,
            &ImputationConfig::new(3),
        )
        .unwrap();
        assert_eq!(est.variance, 0.0);
        assert_eq!(est.mean, 1.0);
        let one = Chain {
            draws: vec![chain.draws[0].clone()],
        };
        assert!(matches!(
            estimate_ate(
                &ds,
                &ModelSpec::poisson(1.0),
                &one,
                &ImputationConfig::new(3)
            ),
            Err(Error::InsufficientDraws { .. })
        ));
    }

    #[test]
    fn estimate_is_reproducible_and_keeps_imputations() {
        let ds = small();
        let spec = ModelSpec::poisson(4.0);
        let chain = run_chain(&ds, &spec, &GibbsConfig::new(40, 0, 2)).unwrap();
        for mode in [
            ImputationMode::ReuseChainBeta,
            ImputationMode::RedrawBeta,
            ImputationMode::PerUnit,
        ] {
            let cfg = ImputationConfig::new(9)
                .with_mode(mode)
                .keeping_imputations();
            let a = estimate_ate(&ds, &spec, &chain, &cfg).unwrap();
            let b = estimate_ate(&ds, &spec, &chain, &cfg).unwrap();
            assert_eq!(a, b);
            let kept = a.imputations.as_ref().unwrap();
            assert_eq!(kept.len(), 40);
            for (r, y) in kept.iter().enumerate() {
                assert_eq!(ate_of_imputation(&ds, y).unwrap(), a.per_rep[r]);
            }
        }
    }

    #[test]
    fn imputed_counts_follow_the_negative_binomial() {
        // beta posterior fixed at a realistic fit; unit 0's imputations over
        // 1e5 replications against its negative-binomial predictive
        let mut rng = RngStream::new(404);
        let n = 1000;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![1.0, 2.0 * rng.uniform() - 1.0])
            .collect();
        let w: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let y: Vec<u64> = (0..n)
            .map(|i| {
                let (a, b) = if w[i] == 1 { (3.7, 0.8) } else { (3.2, 0.3) };
                rng.poisson(f64::exp(a + b * rows[i][1])).unwrap()
            })
            .collect();
        let ds = Dataset::new(rows, w, y).unwrap();
        let spec = ModelSpec::poisson(100.0);
        let state = ParameterState::poisson(vec![0.0; 4], n);
        let post = fit_beta_posterior(&ds, &state, &spec).unwrap();
        let (m, v) = mis_predictor_law(&ds, &state, &post, 0).unwrap();
        let pred = NbPredictive::from_log_rate_law(m, v).unwrap();
        let unit0 = Dataset::new(
            vec![ds.row(0).to_vec()],
            vec![ds.w()[0]],
            vec![ds.y_obs()[0]],
        )
        .unwrap();
        let root = RngStream::new(55);
        let reps = 100_000;
        let mut counts = std::collections::BTreeMap::<u64, f64>::new();
        let state0 = ParameterState::poisson(vec![0.0; 4], 1);
        for r in 0..reps {
            let stream = root.split(r);
            // same construction as RedrawBeta on the single unit
            let beta = post.sample(&mut stream.split(BETA_STREAM)).unwrap();
            let y = impute_ymis(&unit0, &state0.with_beta(beta), &stream).unwrap()[0];
            *counts.entry(y).or_default() += 1.0;
        }
        // pool cells with expected count below 5 into the two tails
        let top = pred.support_bound();
        let expected: Vec<f64> = (0..=top).map(|k| nb_pmf(&pred, k) * reps as f64).collect();
        let mut cells: Vec<(f64, f64)> = Vec::new();
        let (mut o_acc, mut e_acc) = (0.0, 0.0);
        for k in 0..=top {
            o_acc += counts.get(&k).copied().unwrap_or(0.0);
            e_acc += expected[k as usize];
            if e_acc >= 5.0 {
                cells.push((o_acc, e_acc));
                o_acc = 0.0;
                e_acc = 0.0;
            }
        }
        let beyond: f64 = counts.range(top + 1..).map(|(_, c)| c).sum();
        let last = cells.last_mut().unwrap();
        last.0 += o_acc + beyond;
        last.1 += e_acc + pred.tail(top) * reps as f64;
        let stat: f64 = cells.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
        let df = (cells.len() - 1) as f64;
        let p = ChiSquared::new(df).unwrap().sf(stat);
        assert!(p > 0.001, "chi-square {stat} on {df} df, p = {p}");
    }
}
