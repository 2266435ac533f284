//! Recover the payoff from observed controls alone (the κ loss).
//!
//! `cargo run --release --example learn_from_behaviour -- [alpha0] [steps]`
//!
//! Defaults to α₀ = 200 and 3000 steps; 30000 steps reproduce the desk-scale
//! run in about 15 s.

use std::error::Error;

use nashnet::eval_report::recovery_report;
use nashnet::n3::InnerSolver;
use nashnet::payoff_net::{init_params, NetworkConfig};
use nashnet::sir_game::{forward_backward_sweep, PayoffParams, SolverConfig};
use nashnet::training::{prepare_dataset, train, DlambdaSource, LossKind, TrainConfig};

pub fn run(alpha0: f64, steps: usize, loss_kind: LossKind) -> Result<(), Box<dyn Error>> {
    let params = PayoffParams::new(alpha0, 1.0, 4.0)?;
    let traj = forward_backward_sweep(&params, &SolverConfig::default())?.trajectory;
    let config = TrainConfig {
        n_steps: steps,
        loss_kind,
        checkpoint_every: (steps / 10).max(1),
        ..TrainConfig::default()
    };
    let data = prepare_dataset(
        &traj,
        50,
        0.2,
        1e-3,
        config.seed,
        DlambdaSource::Analytic(params),
    )?;
    let init = init_params(&NetworkConfig::default())?;
    let solver = InnerSolver::for_kappa_star(params.kappa_star);

    let outcome = train(&init, &data, &config, &solver)?;
    for row in &outcome.history {
        println!(
            "step {:>6}  train {:.3e}  test {:.3e}",
            row.step, row.train_loss, row.test_loss
        );
    }
    let report = recovery_report(&outcome.params, &data, params.kappa_star, &solver)?;
    println!("{report}");
    println!(
        "generating payoff: curvature {}, vertex {}, slope {}",
        -params.beta, params.kappa_star, -params.alpha0
    );
    Ok(())
}

fn arg<T: std::str::FromStr>(k: usize, default: T) -> T {
    std::env::args()
        .nth(k)
        .and_then(|s| s.parse().ok())
        .unwrap_or(default)
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run(arg(1, 200.0), arg(2, 3000), LossKind::Kappa)
}
