//! The N³ state evolver with the analytic payoff plugged in, checked against
//! the closed-form control and adjoint rates along a Nash trajectory.
//!
//! `cargo run --release --example n3_oracle`

use std::error::Error;

use nashnet::n3::{evolve_sequence, hamiltonian_check, AugmentedState, InnerSolver};
use nashnet::sir_game::{
    adjoint_rhs, dynamics, forward_backward_sweep, kappa_opt_closed, PayoffParams, SolverConfig,
};

pub fn run() -> Result<(), Box<dyn Error>> {
    let params = PayoffParams::new(200.0, 1.0, 4.0)?;
    let traj = forward_backward_sweep(&params, &SolverConfig::default())?.trajectory;
    let states: Vec<_> = traj
        .states
        .iter()
        .zip(&traj.adjoints)
        .map(|(&s, &a)| (s, a))
        .collect();
    let solver = InnerSolver::for_kappa_star(params.kappa_star);
    let outputs = evolve_sequence(&params, &states, &solver)?;

    let (mut kappa_err, mut rate_err, mut ham) = (0.0f64, 0.0f64, 0.0f64);
    for (&(theta, lambda), out) in states.iter().zip(&outputs) {
        let psi = theta.into();
        let closed = kappa_opt_closed(theta, psi, lambda, &params);
        let dpsi = dynamics(theta, psi, closed);
        let dlambda = adjoint_rhs(theta, psi, lambda, closed, &params);
        kappa_err = kappa_err.max((out.kappa_opt - closed).abs());
        for (a, b) in out
            .dpsi
            .iter()
            .chain(&out.dlambda)
            .zip(dpsi.iter().chain(&dlambda))
        {
            rate_err = rate_err.max((a - b).abs());
        }
        let q = AugmentedState {
            psi,
            kappa: out.kappa_opt,
            lambda,
        };
        ham = ham.max(hamiltonian_check(&params, &q, theta));
    }
    println!("{} trajectory points", states.len());
    println!("max |kappa_N3 - kappa_closed|   {kappa_err:.2e}");
    println!("max |rates_N3 - rates_closed|   {rate_err:.2e}");
    println!("max |H + L'|                    {ham:.2e}");
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run()
}
