//! Recover the payoff from controls and adjoint rates together (the κλ loss),
//! which also pins down the dependence on the individual state.
//!
//! `cargo run --release --example full_payoff -- [alpha0] [steps]`

use std::error::Error;

use nashnet::training::LossKind;

#[path = "learn_from_behaviour.rs"]
mod learn_from_behaviour;

fn arg<T: std::str::FromStr>(k: usize, default: T) -> T {
    std::env::args()
        .nth(k)
        .and_then(|s| s.parse().ok())
        .unwrap_or(default)
}

fn main() -> Result<(), Box<dyn Error>> {
    learn_from_behaviour::run(arg(1, 200.0), arg(2, 3000), LossKind::KappaLambda)
}
