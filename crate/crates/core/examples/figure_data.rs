//! Write every figure table for the analytic payoff, plus a ground-truth
//! checkpoint that `nashnet eval --checkpoint` accepts.
//!
//! `cargo run --release --example figure_data -- [out_dir]`

use std::error::Error;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use nashnet::eval_report::{
    dstate_rows, export_dstate, export_payoff_kappa, export_payoff_state, export_trajectory,
    kappa_grid, scan_kappa, scan_state,
};
use nashnet::n3::InnerSolver;
use nashnet::payoff_net::{Checkpoint, CheckpointPayoff};
use nashnet::sir_game::{forward_backward_sweep, PayoffParams, SolverConfig};

pub fn run(dir: &Path) -> Result<Vec<PathBuf>, Box<dyn Error>> {
    let params = PayoffParams::new(200.0, 1.0, 4.0)?;
    let traj = forward_backward_sweep(&params, &SolverConfig::default())?.trajectory;
    let solver = InnerSolver::for_kappa_star(params.kappa_star);
    let anchors: Vec<_> = traj.states.iter().step_by(500).copied().collect();
    let id = "truth";
    let a0 = params.alpha0;

    let mut written = vec![export_trajectory(dir, id, a0, &traj)?];
    let rows = dstate_rows(&params, &traj, &params, &solver, 50)?;
    written.push(export_dstate(dir, id, a0, &rows)?);
    let scan = scan_kappa(
        &params,
        &anchors,
        &kappa_grid(params.kappa_star, 81),
        params.kappa_star,
    );
    written.push(export_payoff_kappa(dir, id, a0, &scan)?);
    let psi_i: Vec<f64> = (0..=20).map(|k| 0.02 * k as f64).collect();
    let scan = scan_state(&params, &anchors, &psi_i, params.kappa_star);
    written.push(export_payoff_state(dir, id, a0, &scan)?);

    let ckpt = dir.join("ckpt_truth.txt");
    Checkpoint {
        step: 0,
        payoff: CheckpointPayoff::GroundTruth(params),
    }
    .write(BufWriter::new(File::create(&ckpt)?))?;
    written.push(ckpt);

    for p in &written {
        println!("wrote {}", p.display());
    }
    Ok(written)
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("nashnet_figures"));
    run(&dir).map(|_| ())
}
