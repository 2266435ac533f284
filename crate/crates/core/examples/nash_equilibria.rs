//! Nash trajectories for weak, moderate and strong infection costs, and a
//! unilateral deviation test on each.
//!
//! `cargo run --release --example nash_equilibria`

use std::error::Error;

use nashnet::sir_game::{forward_backward_sweep, verify_nash, PayoffParams, SolverConfig};

pub fn run() -> Result<(), Box<dyn Error>> {
    let config = SolverConfig::default();
    println!("alpha0   sweeps  min kappa  s(t_f)    best deviation gain");
    for alpha0 in [100.0, 200.0, 400.0] {
        let params = PayoffParams::new(alpha0, 1.0, 4.0)?;
        let sweep = forward_backward_sweep(&params, &config)?;
        let traj = &sweep.trajectory;
        let nash = verify_nash(traj, &params, config.terminal_condition, 20, 0.1, 1)?;
        println!(
            "{alpha0:>6}  {:>7}  {:>9.4}  {:.5}  {:+.3e} (allowed {:.1e})",
            sweep.sweeps,
            traj.min_control(),
            traj.final_state().s,
            nash.max_gain,
            nash.tolerance
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run()
}
