//! The negative-binomial law of a count whose log-rate is approximately normal.

use count_ate::closed_form::{nb_moments, nb_pmf, NbPredictive};

pub fn run_example() -> count_ate::Result<()> {
    // log-rate ~ N(3, 0.04)
    let pred = NbPredictive::from_log_rate_law(3.0, 0.04)?;
    let (mean, var) = nb_moments(&pred);
    println!(
        "gamma {:.2}, h {:.4}, p {:.4}",
        pred.gamma,
        pred.h,
        pred.p()
    );
    println!("mean {mean:.3}, variance {var:.3}");
    let top = pred.support_bound();
    let mass: f64 = (0..=top).map(|y| nb_pmf(&pred, y)).sum();
    println!("mass on 0..={top}: {mass:.12}");
    for y in [10, 20, 30] {
        println!("P(Y = {y}) = {:.5}", nb_pmf(&pred, y));
    }
    Ok(())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("{e}");
        std::process::exit(1);
    }
}
