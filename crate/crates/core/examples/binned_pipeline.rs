//! Continuous earnings binned into count labels, a thresholded exposure as
//! treatment, then a group-wise ATE table.

use count_ate::gibbs::{run_chain, GibbsConfig};
use count_ate::imputation::{estimate_ate, ImputationConfig};
use count_ate::model::{Dataset, ModelSpec};
use count_ate::pipeline::{bin_outcome, dichotomize, groupwise_ate, BinningRule};
use count_ate::rng::RngStream;

pub fn run_example() -> count_ate::Result<()> {
    let n = 400;
    let mut rng = RngStream::new(21);
    let age: Vec<f64> = (0..n).map(|_| 18.0 + 30.0 * rng.uniform()).collect();
    let exposure: Vec<f64> = (0..n).map(|_| 140.0 * rng.uniform()).collect();
    let w = dichotomize(&exposure, 70.0);
    // earnings in thousands, higher when exposed
    let earnings: Vec<f64> = (0..n)
        .map(|i| {
            (12.0 + 6.0 * w[i] as f64 + 0.2 * (age[i] - 30.0) + 4.0 * rng.normal()).clamp(0.0, 64.9)
        })
        .collect();
    let rule = BinningRule::new((0..=13).map(|j| 5.0 * j as f64).collect(), false, true)?;
    let y = bin_outcome(&earnings, &rule)?;

    let rows = age.iter().map(|a| vec![1.0, (a - 30.0) / 10.0]).collect();
    let ds = Dataset::new(rows, w, y)?;
    let spec = ModelSpec::poisson(100.0);
    let chain = run_chain(&ds, &spec, &GibbsConfig::new(500, 0, 1))?;
    let est = estimate_ate(
        &ds,
        &spec,
        &chain,
        &ImputationConfig::new(2).keeping_imputations(),
    )?;

    let groups: Vec<usize> = age.iter().map(|a| ((a - 18.0) / 10.0) as usize).collect();
    let table = groupwise_ate(
        &ds,
        est.imputations.as_deref().unwrap_or_default(),
        &groups,
        3,
    )?;
    println!("overall ATE {:.3} labels", est.mean);
    for g in &table {
        println!(
            "ages {}-{}: n {:>3}, weight {:.3}, ATE {:?}",
            18 + 10 * g.group,
            28 + 10 * g.group,
            g.n,
            g.weight,
            g.ate
        );
    }
    Ok(())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("{e}");
        std::process::exit(1);
    }
}
