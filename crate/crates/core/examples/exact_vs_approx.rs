//! Coefficient posterior means from the Gaussian approximation and from
//! Metropolis–Hastings on the exact Poisson posterior.

use count_ate::gibbs::{run_chain, GibbsConfig};
use count_ate::mcse::mcse;
use count_ate::model::ModelSpec;
use count_ate::oracle::{run_oracle, OracleConfig};
use count_ate::synthetic::{generate, SimModel, SimSpec};

pub fn run_example() -> count_ate::Result<()> {
    let ds = generate(&SimSpec::new(SimModel::Simple, 200, 0.0, 5))?;
    let spec = ModelSpec::poisson(100.0);
    let approx = run_chain(&ds, &spec, &GibbsConfig::new(4000, 0, 1))?;
    let exact = run_oracle(&ds, &spec, &OracleConfig::new(30_000, 5_000, 2))?;
    println!("acceptance {:.2}", exact.accept_beta);
    println!("{:>4} {:>9} {:>9} {:>8}", "coef", "approx", "exact", "mcse");
    let (a, e) = (approx.beta_mean(), exact.chain.beta_mean());
    for j in 0..a.len() {
        println!(
            "{j:>4} {:>9.4} {:>9.4} {:>8.4}",
            a[j],
            e[j],
            mcse(&exact.chain.beta_column(j))
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
