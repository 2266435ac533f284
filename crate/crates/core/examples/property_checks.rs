//! Run the property suites from the library, optionally with a perturbed α₀
//! in the payoff given to the evolver.
//!
//! `cargo run --release --example property_checks -- [delta_alpha0]`

use std::error::Error;

use nashnet::checks::{run_checks, CheckConfig, Suite};

pub fn run(inject_alpha0: f64) -> Result<bool, Box<dyn Error>> {
    let config = CheckConfig {
        inject_alpha0,
        ..CheckConfig::default()
    };
    let outcomes = run_checks(&Suite::ALL, &config)?;
    for o in &outcomes {
        println!("{o}");
    }
    Ok(outcomes.iter().all(|o| o.passed))
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    let delta = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0.0);
    if !run(delta)? {
        std::process::exit(1);
    }
    Ok(())
}
