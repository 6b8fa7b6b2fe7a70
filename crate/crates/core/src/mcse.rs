//! Batch-means Monte Carlo standard errors.

/// Batch-means MCSE of the sample mean, with `ceil(sqrt(n))` batches of equal
/// size. A remainder of `n mod size` leading draws is dropped.
pub fn mcse(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 4 {
        return f64::NAN;
    }
    let batches = (n as f64).sqrt().ceil() as usize;
    let size = n / batches;
    let batches = n / size;
    let used = &xs[n - batches * size..];
    let means: Vec<f64> = used
        .chunks_exact(size)
        .map(|c| c.iter().sum::<f64>() / size as f64)
        .collect();
    let grand = means.iter().sum::<f64>() / batches as f64;
    let var_batch = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (var_batch / batches as f64).sqrt()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance; `NaN` below two values.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Effective sample size `var / mcse²`, capped at `n`.
pub fn ess(xs: &[f64]) -> f64 {
    let se = mcse(xs);
    let v = variance(xs);
    if !(se > 0.0) {
        return if v == 0.0 { xs.len() as f64 } else { f64::NAN };
    }
    (v / (se * se)).min(xs.len() as f64)
}

/// Effective sample size from the initial monotone sequence estimator of the
/// integrated autocorrelation time. Unlike [`ess`] it does not saturate at
/// the batch count when the chain mixes slower than one batch length.
pub fn ess_autocorr(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 4 {
        return f64::NAN;
    }
    let m = mean(xs);
    let c0 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
    if c0 == 0.0 {
        return n as f64;
    }
    let rho = |k: usize| {
        xs[..n - k]
            .iter()
            .zip(&xs[k..])
            .map(|(a, b)| (a - m) * (b - m))
            .sum::<f64>()
            / (n as f64 * c0)
    };
    let mut tau = -1.0;
    let mut prev = f64::INFINITY;
    let mut k = 0;
    while k + 1 < n {
        let pair = rho(k) + rho(k + 1);
        if pair <= 0.0 {
            break;
        }
        prev = pair.min(prev);
        tau += 2.0 * prev;
        k += 2;
    }
    (n as f64 / tau).min(n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn iid_mcse_matches_classical_se() {
        let mut rng = RngStream::new(4);
        let xs: Vec<f64> = (0..40_000).map(|_| rng.normal()).collect();
        let se = mcse(&xs);
        assert!((se / (1.0 / 200.0) - 1.0).abs() < 0.25, "{se}");
        let e = ess_autocorr(&xs);
        assert!((e / 40_000.0 - 1.0).abs() < 0.1, "{e}");
    }

    #[test]
    fn ar1_mcse_reflects_autocorrelation() {
        // AR(1) with rho = 0.9 has asymptotic variance (1+rho)/(1-rho) times iid
        let mut rng = RngStream::new(9);
        let rho = 0.9;
        let n = 200_000;
        let mut x = 0.0;
        let xs: Vec<f64> = (0..n)
            .map(|_| {
                x = rho * x + (1.0f64 - rho * rho).sqrt() * rng.normal();
                x
            })
            .collect();
        let expect = ((1.0 + rho) / (1.0 - rho) / n as f64).sqrt();
        assert!((mcse(&xs) / expect - 1.0).abs() < 0.3);
        let e = ess(&xs);
        assert!((e / (n as f64 / 19.0) - 1.0).abs() < 0.5, "{e}");
        let e = ess_autocorr(&xs);
        assert!((e / (n as f64 / 19.0) - 1.0).abs() < 0.2, "{e}");
    }

    #[test]
    fn short_and_constant_inputs() {
        assert!(mcse(&[1.0, 2.0]).is_nan());
        assert_eq!(mcse(&[3.0; 100]), 0.0);
        assert_eq!(ess(&[3.0; 100]), 100.0);
        assert_eq!(ess_autocorr(&[3.0; 100]), 100.0);
        assert_eq!(variance(&[1.0, 3.0]), 2.0);
    }
}
