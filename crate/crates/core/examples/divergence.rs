//! How close the normal approximation of a log-gamma law is, as a function of the count.

use count_ate::divergence::{empirical_tv, tv_bounds};

pub fn run_example() -> count_ate::Result<()> {
    println!(
        "{:>6} {:>12} {:>12} {:>10} {:>10}",
        "y", "KL", "5/(24y)", "sqrt(KL)", "TV"
    );
    for y in [2.0, 5.0, 10.0, 50.0, 500.0] {
        let r = tv_bounds(y)?;
        let tv = empirical_tv(y)?;
        println!(
            "{:>6} {:>12.3e} {:>12.3e} {:>10.4} {:>10.4}",
            y, r.kl_exact, r.kl_leading, r.tv_bound, tv
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
