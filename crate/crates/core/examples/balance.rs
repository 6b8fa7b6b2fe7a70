//! Covariate balance of a randomized experiment and of a confounded selection.

use count_ate::model::Dataset;
use count_ate::pipeline::balance_table;
use count_ate::synthetic::{generate, SimModel, SimSpec};

pub fn run_example() -> count_ate::Result<()> {
    let randomized = generate(&SimSpec::new(SimModel::Complex, 1000, 0.0, 3))?;
    // treat the units with the largest first covariate instead
    let w: Vec<u8> = (0..randomized.n())
        .map(|i| u8::from(randomized.row(i)[1] > 0.0))
        .collect();
    let rows = (0..randomized.n())
        .map(|i| randomized.row(i).to_vec())
        .collect();
    let selected = Dataset::new(rows, w, randomized.y_obs().to_vec())?;

    for (name, ds) in [("randomized", &randomized), ("selected", &selected)] {
        println!("{name}");
        for row in balance_table(ds, None)? {
            println!(
                "  {} smd {:>7.3}",
                row.covariate,
                row.smd.unwrap_or(f64::NAN)
            );
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("{e}");
        std::process::exit(1);
    }
}
