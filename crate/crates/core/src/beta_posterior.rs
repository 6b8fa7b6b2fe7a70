//! Approximate Gaussian posterior of the stacked regression coefficients.
//!
//! Each observed count contributes the normal term `N(xi_obs_i | log y_i, 1/y_i)`
//! in place of its Poisson likelihood. With `D = diag(y_i)` and rows `x_obs_i`
//! stacked into `X`, the posterior is Gaussian with
//!
//! ```text
//! precision = Xᵀ D X + I / sigma_beta²
//! mean      = precision⁻¹ Xᵀ D (log y − m_obs)
//! ```
//!
//! Every observed row touches only one coefficient block, so the precision is
//! accumulated block by block in `O(N (k+1)²)`.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{CholeskyFactor, SpdMatrix};
use crate::model::{dot, log_eps_pair, mis_offset, Dataset, ModelSpec, ParameterState};
use crate::rng::RngStream;

/// Rows per accumulation chunk. Chunks are summed in index order so the
/// result does not depend on the number of worker threads.
const CHUNK: usize = 4096;

#[derive(Debug, Clone)]
pub struct GaussianPosterior {
    pub mu: Vec<f64>,
    pub precision: SpdMatrix,
    pub chol: CholeskyFactor,
    pub dim: usize,
    /// Units that contributed a likelihood term.
    pub rows_used: usize,
}

#[derive(Clone)]
struct Accum {
    // control block, treated block, both p×p row-major
    blocks: [Vec<f64>; 2],
    rhs: Vec<f64>,
    used: usize,
}

impl Accum {
    fn new(p: usize) -> Self {
        Self {
            blocks: [vec![0.0; p * p], vec![0.0; p * p]],
            rhs: vec![0.0; 2 * p],
            used: 0,
        }
    }

    fn add(&mut self, other: &Accum) {
        for b in 0..2 {
            for (a, o) in self.blocks[b].iter_mut().zip(&other.blocks[b]) {
                *a += o;
            }
        }
        for (a, o) in self.rhs.iter_mut().zip(&other.rhs) {
            *a += o;
        }
        self.used += other.used;
    }
}

fn accumulate(
    ds: &Dataset,
    state: &ParameterState,
    spec: &ModelSpec,
    range: std::ops::Range<usize>,
) -> Result<Accum> {
    let p = ds.p();
    let mut acc = Accum::new(p);
    for i in range {
        let Some((weight, log_y)) = spec.zero_policy.effective(ds.y_obs()[i], i)? else {
            continue;
        };
        let (m_obs, _) = log_eps_pair(ds, state, i);
        let r = log_y - m_obs;
        let arm = ds.treated(i) as usize;
        let x = ds.row(i);
        let block = &mut acc.blocks[arm];
        for a in 0..p {
            let wa = weight * x[a];
            for b in a..p {
                block[a * p + b] += wa * x[b];
            }
            acc.rhs[arm * p + a] += wa * r;
        }
        acc.used += 1;
    }
    Ok(acc)
}

pub fn fit_beta_posterior(
    ds: &Dataset,
    state: &ParameterState,
    spec: &ModelSpec,
) -> Result<GaussianPosterior> {
    spec.validate()?;
    state.validate(ds)?;
    let p = ds.p();
    let d = 2 * p;
    let n = ds.n();
    let n_chunks = n.div_ceil(CHUNK);
    let parts: Vec<Accum> = (0..n_chunks)
        .into_par_iter()
        .map(|c| accumulate(ds, state, spec, c * CHUNK..((c + 1) * CHUNK).min(n)))
        .collect::<Result<_>>()?;
    let mut total = Accum::new(p);
    for part in &parts {
        total.add(part);
    }

    let prior_precision = 1.0 / spec.sigma_beta_sq;
    let mut precision = DMatrix::<f64>::zeros(d, d);
    for arm in 0..2 {
        let off = arm * p;
        for a in 0..p {
            for b in a..p {
                let v = total.blocks[arm][a * p + b];
                precision[(off + a, off + b)] = v;
                precision[(off + b, off + a)] = v;
            }
        }
    }
    for j in 0..d {
        precision[(j, j)] += prior_precision;
    }
    let precision = SpdMatrix::new(precision)?;
    let chol = precision.factorize()?;
    let mu = chol.solve(&total.rhs)?;
    Ok(GaussianPosterior {
        mu,
        precision,
        chol,
        dim: d,
        rows_used: total.used,
    })
}

impl GaussianPosterior {
    /// `mu + L⁻ᵀ z` with `z` standard normal.
    pub fn sample(&self, rng: &mut RngStream) -> Result<Vec<f64>> {
        let z = rng.normal_vec(self.dim);
        let dev = self.chol.solve_upper(&z)?;
        Ok(self.mu.iter().zip(dev).map(|(m, e)| m + e).collect())
    }

    /// Posterior variance of `v · beta`.
    pub fn variance_of(&self, v: &[f64]) -> Result<f64> {
        self.chol.inverse_quad_form(v)
    }

    pub fn mean_of(&self, v: &[f64]) -> f64 {
        dot(v, &self.mu)
    }
}

pub fn sample_beta(posterior: &GaussianPosterior, rng: &mut RngStream) -> Result<Vec<f64>> {
    posterior.sample(rng)
}

/// Normal law `(mean, variance)` of the missing-arm linear predictor of unit `i`.
pub fn mis_predictor_law(
    ds: &Dataset,
    state: &ParameterState,
    posterior: &GaussianPosterior,
    i: usize,
) -> Result<(f64, f64)> {
    if i >= ds.n() {
        return Err(Error::IndexOutOfRange {
            index: i,
            len: ds.n(),
        });
    }
    if posterior.dim != ds.coef_dim() {
        return Err(Error::Dimension(format!(
            "posterior of dimension {} for a design with {} coefficients",
            posterior.dim,
            ds.coef_dim()
        )));
    }
    let p = ds.p();
    let off = mis_offset(ds, i);
    let mut x_mis = vec![0.0; posterior.dim];
    x_mis[off..off + p].copy_from_slice(ds.row(i));
    let (_, m_mis) = log_eps_pair(ds, state, i);
    let mean = dot(&ds.row(i)[..], &posterior.mu[off..off + p]) + m_mis;
    let variance = posterior.variance_of(&x_mis)?;
    Ok((mean, variance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{InvGamma, ZeroPolicy};

    fn random_dataset(n: usize, k: usize, seed: u64) -> Dataset {
        let mut rng = RngStream::new(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                std::iter::once(1.0)
                    .chain((0..k).map(|_| 2.0 * rng.uniform() - 1.0))
                    .collect()
            })
            .collect();
        let w: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let y: Vec<u64> = (0..n).map(|_| rng.poisson(20.0).unwrap() + 1).collect();
        Dataset::new(rows, w, y).unwrap()
    }

    fn explicit_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
        // Gauss–Jordan with partial pivoting, independent of the Cholesky path
        let d = a.nrows();
        let mut m = a.clone();
        let mut inv = DMatrix::<f64>::identity(d, d);
        for col in 0..d {
            let piv = (col..d)
                .max_by(|&x, &y| m[(x, col)].abs().total_cmp(&m[(y, col)].abs()))
                .unwrap();
            m.swap_rows(col, piv);
            inv.swap_rows(col, piv);
            let s = m[(col, col)];
            for j in 0..d {
                m[(col, j)] /= s;
                inv[(col, j)] /= s;
            }
            for r in 0..d {
                if r != col {
                    let f = m[(r, col)];
                    for j in 0..d {
                        m[(r, j)] -= f * m[(col, j)];
                        inv[(r, j)] -= f * inv[(col, j)];
                    }
                }
            }
        }
        inv
    }

    #[test]
    fn empty_likelihood_returns_prior() {
        let ds = Dataset::new(
            vec![vec![1.0, 0.2], vec![1.0, -0.4]],
            vec![0, 1],
            vec![0, 0],
        )
        .unwrap();
        let st = ParameterState::poisson(vec![0.0; 4], 2);
        let spec = ModelSpec::poisson(2.5);
        let post = fit_beta_posterior(&ds, &st, &spec).unwrap();
        assert_eq!(post.rows_used, 0);
        assert_eq!(post.mu, vec![0.0; 4]);
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 / 2.5 } else { 0.0 };
                assert_eq!(post.precision.get(i, j), expect);
            }
        }
        let e =
            fit_beta_posterior(&ds, &st, &spec.with_zero_policy(ZeroPolicy::Error)).unwrap_err();
        assert!(matches!(e, Error::ZeroCount { index: 0 }));
    }

    #[test]
    fn single_observation_weighted_least_squares() {
        let ds = Dataset::new(vec![vec![1.0]], vec![0], vec![20]).unwrap();
        let st = ParameterState::poisson(vec![0.0; 2], 1);
        let post = fit_beta_posterior(&ds, &st, &ModelSpec::poisson(1e12)).unwrap();
        assert!((post.mu[0] - 20f64.ln()).abs() < 1e-9, "{}", post.mu[0]);
        assert!(post.mu[1].abs() < 1e-12);
        assert!((20f64.ln() - 2.9957).abs() < 1e-4);
    }

    #[test]
    fn continuity_correction_uses_half() {
        let ds = Dataset::new(vec![vec![1.0]], vec![1], vec![0]).unwrap();
        let st = ParameterState::poisson(vec![0.0; 2], 1);
        let spec = ModelSpec::poisson(1e12).with_zero_policy(ZeroPolicy::ContinuityCorrection);
        let post = fit_beta_posterior(&ds, &st, &spec).unwrap();
        assert!((post.mu[1] - 0.5f64.ln()).abs() < 1e-9);
        assert_eq!(post.rows_used, 1);
    }

    #[test]
    fn precision_matches_naive_triple_loop() {
        for seed in 0..5 {
            let ds = random_dataset(50, 3, seed);
            let mut rng = RngStream::new(100 + seed);
            let st = ParameterState {
                beta: vec![0.0; 8],
                eps_c: (0..50)
                    .map(|_| (0.3 * rng.normal()).exp())
                    .collect::<Vec<_>>()
                    .into(),
                eps_t: (0..50)
                    .map(|_| (0.3 * rng.normal()).exp())
                    .collect::<Vec<_>>()
                    .into(),
                sigma_c_sq: Some(0.1),
                sigma_t_sq: Some(0.1),
            };
            let spec = ModelSpec::lognormal(
                1.0,
                InvGamma {
                    shape: 2.0,
                    scale: 1.0,
                },
                InvGamma {
                    shape: 2.0,
                    scale: 1.0,
                },
            );
            let post = fit_beta_posterior(&ds, &st, &spec).unwrap();
            let d = 8;
            let mut naive = vec![vec![0.0; d]; d];
            let mut rhs = vec![0.0; d];
            for i in 0..50 {
                let r = crate::model::design_rows(&ds, &st, i).unwrap();
                let y = ds.y_obs()[i] as f64;
                for a in 0..d {
                    for b in 0..d {
                        naive[a][b] += r.x_obs[a] * y * r.x_obs[b];
                    }
                    rhs[a] += r.x_obs[a] * y * (y.ln() - r.m_obs);
                }
            }
            for a in 0..d {
                naive[a][a] += 1.0;
                for b in 0..d {
                    assert!((post.precision.get(a, b) - naive[a][b]).abs() < 1e-10);
                }
            }
            // mean through an explicit inverse
            let inv = explicit_inverse(post.precision.as_matrix());
            for a in 0..d {
                let m: f64 = (0..d).map(|b| inv[(a, b)] * rhs[b]).sum();
                assert!((post.mu[a] - m).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn duplicating_data_contracts_the_posterior() {
        let ds = random_dataset(30, 2, 4);
        let idx: Vec<usize> = (0..30).chain(0..30).collect();
        let doubled = ds.select(&idx).unwrap();
        let spec = ModelSpec::poisson(10.0);
        let a = fit_beta_posterior(&ds, &ParameterState::poisson(vec![0.0; 6], 30), &spec).unwrap();
        let b = fit_beta_posterior(&doubled, &ParameterState::poisson(vec![0.0; 6], 60), &spec)
            .unwrap();
        for j in 0..6 {
            assert!(b.precision.get(j, j) > a.precision.get(j, j));
        }
    }

    #[test]
    fn sampling_moments_identity_precision() {
        let ds = Dataset::new(vec![vec![1.0]], vec![0], vec![0]).unwrap();
        let post = fit_beta_posterior(
            &ds,
            &ParameterState::poisson(vec![0.0; 2], 1),
            &ModelSpec::poisson(1.0),
        )
        .unwrap();
        let mut rng = RngStream::new(8);
        let n = 100_000;
        let draws: Vec<Vec<f64>> = (0..n)
            .map(|_| sample_beta(&post, &mut rng).unwrap())
            .collect();
        for a in 0..2 {
            let mean = draws.iter().map(|d| d[a]).sum::<f64>() / n as f64;
            assert!(mean.abs() < 4.0 / (n as f64).sqrt());
            for b in 0..2 {
                let c = draws.iter().map(|d| d[a] * d[b]).sum::<f64>() / n as f64;
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((c - expect).abs() < 0.02, "cov[{a}][{b}] = {c}");
            }
        }
    }

    #[test]
    fn sampling_mean_matches_posterior_mean() {
        let ds = random_dataset(80, 2, 12);
        let post = fit_beta_posterior(
            &ds,
            &ParameterState::poisson(vec![0.0; 6], 80),
            &ModelSpec::poisson(10.0),
        )
        .unwrap();
        let mut rng = RngStream::new(21);
        let n = 100_000;
        let mut sums = vec![0.0; 6];
        for _ in 0..n {
            for (s, v) in sums.iter_mut().zip(sample_beta(&post, &mut rng).unwrap()) {
                *s += v;
            }
        }
        for j in 0..6 {
            let mut e = vec![0.0; 6];
            e[j] = 1.0;
            let se = (post.variance_of(&e).unwrap() / n as f64).sqrt();
            assert!((sums[j] / n as f64 - post.mu[j]).abs() < 4.0 * se);
        }
    }

    #[test]
    fn tiny_prior_concentrates_draws() {
        let ds = Dataset::new(vec![vec![1.0]], vec![0], vec![0]).unwrap();
        let post = fit_beta_posterior(
            &ds,
            &ParameterState::poisson(vec![0.0; 2], 1),
            &ModelSpec::poisson(1e-12),
        )
        .unwrap();
        let mut rng = RngStream::new(2);
        let draws: Vec<f64> = (0..10_000)
            .map(|_| sample_beta(&post, &mut rng).unwrap()[0])
            .collect();
        let sd = (draws.iter().map(|x| x * x).sum::<f64>() / draws.len() as f64).sqrt();
        assert!((sd / 1e-6 - 1.0).abs() < 0.05, "sd {sd}");
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let ds = random_dataset(20, 1, 3);
        let post = fit_beta_posterior(
            &ds,
            &ParameterState::poisson(vec![0.0; 4], 20),
            &ModelSpec::poisson(10.0),
        )
        .unwrap();
        let a: Vec<Vec<f64>> = {
            let mut r = RngStream::new(99);
            (0..10)
                .map(|_| sample_beta(&post, &mut r).unwrap())
                .collect()
        };
        let b: Vec<Vec<f64>> = {
            let mut r = RngStream::new(99);
            (0..10)
                .map(|_| sample_beta(&post, &mut r).unwrap())
                .collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn mis_law_special_cases() {
        // no data, unit prior: the variance of a unit selector is one
        let ds = Dataset::new(vec![vec![1.0, 0.0]], vec![1], vec![0]).unwrap();
        let st = ParameterState::poisson(vec![0.0; 4], 1);
        let post = fit_beta_posterior(&ds, &st, &ModelSpec::poisson(1.0)).unwrap();
        let (m, v) = mis_predictor_law(&ds, &st, &post, 0).unwrap();
        assert_eq!(m, 0.0);
        assert!((v - 1.0).abs() < 1e-15);
        assert!(mis_predictor_law(&ds, &st, &post, 1).is_err());
    }

    #[test]
    fn null_design_row_has_zero_variance() {
        // an all-zero covariate row is not a valid dataset (intercept), so the
        // quadratic form is checked directly
        let ds = random_dataset(10, 1, 1);
        let post = fit_beta_posterior(
            &ds,
            &ParameterState::poisson(vec![0.0; 4], 10),
            &ModelSpec::poisson(1.0),
        )
        .unwrap();
        assert!(post.variance_of(&[0.0; 4]).unwrap() < 1e-15);
    }

    #[test]
    fn mis_variance_matches_explicit_inverse() {
        let ds = random_dataset(60, 3, 77);
        let mut rng = RngStream::new(5);
        let st = ParameterState {
            beta: vec![0.0; 8],
            eps_c: (0..60)
                .map(|_| (0.2 * rng.normal()).exp())
                .collect::<Vec<_>>()
                .into(),
            eps_t: (0..60)
                .map(|_| (0.2 * rng.normal()).exp())
                .collect::<Vec<_>>()
                .into(),
            sigma_c_sq: Some(0.04),
            sigma_t_sq: Some(0.04),
        };
        let spec = ModelSpec::lognormal(
            4.0,
            InvGamma {
                shape: 2.0,
                scale: 1.0,
            },
            InvGamma {
                shape: 2.0,
                scale: 1.0,
            },
        );
        let post = fit_beta_posterior(&ds, &st, &spec).unwrap();
        let inv = explicit_inverse(post.precision.as_matrix());
        for i in 0..60 {
            let r = crate::model::design_rows(&ds, &st, i).unwrap();
            let (m, v) = mis_predictor_law(&ds, &st, &post, i).unwrap();
            let mut q = 0.0;
            for a in 0..8 {
                for b in 0..8 {
                    q += r.x_mis[a] * inv[(a, b)] * r.x_mis[b];
                }
            }
            assert!((v - q).abs() < 1e-10);
            assert!((m - (dot(&r.x_mis, &post.mu) + r.m_mis)).abs() < 1e-12);
        }
    }
}
