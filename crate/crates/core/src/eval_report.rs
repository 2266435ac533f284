//! Evaluation of a learned payoff against the generating one.
//!
//! A payoff is only determined up to a function of the population state, so
//! comparisons use shifted differences: V(θ, θ, κ) − V(θ, θ, κ*) for the
//! control dependence and V(θ, ψ, κ) − V(θ, 0, κ) for the state dependence.
//! The module fits those scans, summarizes recovery quality, and writes the
//! CSV tables behind the trajectory, rate and payoff plots.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::n3::{evolve_sequence, InnerSolver, N3Error};
use crate::payoff_net::Payoff;
use crate::sir_game::{
    adjoint_rhs, dynamics, fmt_float, write_trajectory_csv, GameError, NashTrajectory,
    PayoffParams, PopulationState,
};
use crate::training::Dataset;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("least-squares system is rank deficient")]
    RankDeficient,
    #[error("abscissa values are all equal")]
    DegenerateAbscissa,
    #[error("{path}: {message}")]
    Table { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Solver(#[from] N3Error),
}

/// `n` evenly spaced controls over [0, 2κ*].
pub fn kappa_grid(kappa_star: f64, n: usize) -> Vec<f64> {
    linspace(0.0, 2.0 * kappa_star, n)
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![a],
        _ => (0..n)
            .map(|k| {
                if k + 1 == n {
                    b
                } else {
                    a + (b - a) * k as f64 / (n - 1) as f64
                }
            })
            .collect(),
    }
}

/// V(θ, θ, κ) − V(θ, θ, κ*) over `kappas`.
pub fn shifted_payoff_kappa<P: Payoff + ?Sized>(
    payoff: &P,
    theta: PopulationState,
    kappas: &[f64],
    kappa_star: f64,
) -> Vec<f64> {
    let x = theta.as_array();
    let reference = payoff.value(x, x, kappa_star);
    kappas
        .iter()
        .map(|&k| payoff.value(x, x, k) - reference)
        .collect()
}

/// V(θ, ψ, κ) − V(θ, 0, κ) with ψ = θ.
pub fn shifted_payoff_state<P: Payoff + ?Sized>(
    payoff: &P,
    theta: PopulationState,
    kappa: f64,
) -> f64 {
    shifted_payoff_at(payoff, theta, theta.as_array(), kappa)
}

fn shifted_payoff_at<P: Payoff + ?Sized>(
    payoff: &P,
    theta: PopulationState,
    psi: [f64; 2],
    kappa: f64,
) -> f64 {
    let x = theta.as_array();
    payoff.value(x, psi, kappa) - payoff.value(x, [0.0, 0.0], kappa)
}

/// Shifted payoff values, one row per anchor point.
#[derive(Debug, Clone, PartialEq)]
pub struct PayoffScan {
    pub anchor_points: Vec<PopulationState>,
    pub sweep_values: Vec<f64>,
    pub shifted_values: Vec<Vec<f64>>,
}

/// κ dependence at each anchor, shifted at κ*.
pub fn scan_kappa<P: Payoff + ?Sized>(
    payoff: &P,
    anchors: &[PopulationState],
    kappas: &[f64],
    kappa_star: f64,
) -> PayoffScan {
    PayoffScan {
        anchor_points: anchors.to_vec(),
        sweep_values: kappas.to_vec(),
        shifted_values: anchors
            .iter()
            .map(|&a| shifted_payoff_kappa(payoff, a, kappas, kappa_star))
            .collect(),
    }
}

/// ψ_i dependence at each anchor with ψ_s = s_t, shifted at ψ = 0.
pub fn scan_state<P: Payoff + ?Sized>(
    payoff: &P,
    anchors: &[PopulationState],
    psi_i: &[f64],
    kappa: f64,
) -> PayoffScan {
    PayoffScan {
        anchor_points: anchors.to_vec(),
        sweep_values: psi_i.to_vec(),
        shifted_values: anchors
            .iter()
            .map(|&a| {
                psi_i
                    .iter()
                    .map(|&p| shifted_payoff_at(payoff, a, [a.s, p], kappa))
                    .collect()
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticFit {
    /// Leading coefficient a of a·x² + b·x + c.
    pub curvature: f64,
    /// Stationary point −b / 2a.
    pub vertex: f64,
}

/// Least-squares quadratic through (xs, ys).
pub fn fit_quadratic(xs: &[f64], ys: &[f64]) -> Result<QuadraticFit, EvalError> {
    assert_eq!(xs.len(), ys.len());
    if xs.len() < 3 {
        return Err(EvalError::TooFewPoints {
            needed: 3,
            got: xs.len(),
        });
    }
    // centre and scale the abscissa for conditioning
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let scale = xs.iter().map(|x| (x - mean).abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        return Err(EvalError::RankDeficient);
    }
    let mut m = [[0.0f64; 4]; 3];
    for (&x, &y) in xs.iter().zip(ys) {
        let u = (x - mean) / scale;
        let basis = [u * u, u, 1.0];
        for r in 0..3 {
            for c in 0..3 {
                m[r][c] += basis[r] * basis[c];
            }
            m[r][3] += basis[r] * y;
        }
    }
    let [a, b, _] = solve3(m).ok_or(EvalError::RankDeficient)?;
    if a == 0.0 {
        return Err(EvalError::RankDeficient);
    }
    Ok(QuadraticFit {
        curvature: a / (scale * scale),
        vertex: mean - b * scale / (2.0 * a),
    })
}

/// Gaussian elimination with partial pivoting on an augmented 3×4 system.
fn solve3(mut m: [[f64; 4]; 3]) -> Option<[f64; 3]> {
    let norm = m
        .iter()
        .flat_map(|r| r[..3].iter())
        .fold(0.0f64, |a, v| a.max(v.abs()));
    for col in 0..3 {
        let pivot = (col..3).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[pivot][col].abs() <= 1e-12 * norm {
            return None;
        }
        m.swap(col, pivot);
        for r in col + 1..3 {
            let f = m[r][col] / m[col][col];
            for c in col..4 {
                m[r][c] -= f * m[col][c];
            }
        }
    }
    let mut x = [0.0; 3];
    for r in (0..3).rev() {
        let tail: f64 = (r + 1..3).map(|c| m[r][c] * x[c]).sum();
        x[r] = (m[r][3] - tail) / m[r][r];
    }
    Some(x)
}

/// Least-squares slope of ys against xs.
pub fn fit_linear_slope(xs: &[f64], ys: &[f64]) -> Result<f64, EvalError> {
    assert_eq!(xs.len(), ys.len());
    if xs.len() < 2 {
        return Err(EvalError::TooFewPoints {
            needed: 2,
            got: xs.len(),
        });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx <= f64::EPSILON * xs.iter().map(|x| x * x).sum::<f64>() {
        return Err(EvalError::DegenerateAbscissa);
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

/// How well a payoff reproduces the data it was trained on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveryReport {
    /// Mean over anchors of the quadratic fit to the κ scan.
    pub curvature: f64,
    pub vertex: f64,
    /// Mean over anchors θ_t of the slope of V(θ_t, (s_t, ψ_i), κ_opt) −
    /// V(θ_t, 0, κ_opt) against ψ_i, fitted within ±5% of the anchor's i_t.
    pub slope: f64,
    /// The same slope fitted over the whole range of i in the data.
    pub slope_full_range: f64,
    /// Mean of λ̇_i(data) − λ̇_i(predicted) over all data points.
    pub mean_dlambda_i_offset: f64,
    /// Mean over test points and both components of the squared λ̇ error.
    pub dlambda_mse_test: f64,
    /// Observed control range used for the quadratic fits.
    pub kappa_range: (f64, f64),
    pub anchors: usize,
}

/// Points per anchor in the quadratic and slope fits.
pub const FIT_POINTS: usize = 41;

/// Relative half-width of the ψ_i window around each anchor for the slope.
pub const LOCAL_WINDOW: f64 = 0.05;

pub fn recovery_report<P: Payoff + ?Sized>(
    payoff: &P,
    data: &Dataset,
    kappa_star: f64,
    solver: &InnerSolver,
) -> Result<RecoveryReport, EvalError> {
    let pts = &data.points;
    if pts.len() < 3 {
        return Err(EvalError::TooFewPoints {
            needed: 3,
            got: pts.len(),
        });
    }
    let k_lo = pts
        .iter()
        .map(|p| p.kappa_opt)
        .fold(f64::INFINITY, f64::min);
    let k_hi = pts
        .iter()
        .map(|p| p.kappa_opt)
        .fold(f64::NEG_INFINITY, f64::max);
    let grid = linspace(k_lo, k_hi, FIT_POINTS);
    let (mut curvature, mut vertex) = (0.0, 0.0);
    for p in pts {
        let fit = fit_quadratic(
            &grid,
            &shifted_payoff_kappa(payoff, p.theta, &grid, kappa_star),
        )?;
        curvature += fit.curvature;
        vertex += fit.vertex;
    }
    let n = pts.len() as f64;

    let i_lo = pts.iter().map(|p| p.theta.i).fold(f64::INFINITY, f64::min);
    let i_hi = pts
        .iter()
        .map(|p| p.theta.i)
        .fold(f64::NEG_INFINITY, f64::max);
    let psi_i = linspace(i_lo, i_hi, FIT_POINTS);
    let (mut slope, mut slope_full_range) = (0.0, 0.0);
    for p in pts {
        let i = p.theta.i;
        let window = linspace(
            i * (1.0 - LOCAL_WINDOW),
            i * (1.0 + LOCAL_WINDOW),
            FIT_POINTS,
        );
        let scan = scan_state(payoff, &[p.theta], &window, p.kappa_opt);
        slope += fit_linear_slope(&window, &scan.shifted_values[0])?;
        let scan = scan_state(payoff, &[p.theta], &psi_i, p.kappa_opt);
        slope_full_range += fit_linear_slope(&psi_i, &scan.shifted_values[0])?;
    }

    let states: Vec<_> = pts.iter().map(|p| (p.theta, p.lambda)).collect();
    let predicted = evolve_sequence(payoff, &states, solver)?;
    let mean_dlambda_i_offset = pts
        .iter()
        .zip(&predicted)
        .map(|(p, e)| p.dlambda[1] - e.dlambda[1])
        .sum::<f64>()
        / n;
    let test: Vec<f64> = pts
        .iter()
        .zip(&predicted)
        .filter(|(p, _)| p.split == crate::training::Split::Test)
        .map(|(p, e)| {
            0.5 * ((p.dlambda[0] - e.dlambda[0]).powi(2) + (p.dlambda[1] - e.dlambda[1]).powi(2))
        })
        .collect();
    let dlambda_mse_test = if test.is_empty() {
        0.0
    } else {
        test.iter().sum::<f64>() / test.len() as f64
    };

    Ok(RecoveryReport {
        curvature: curvature / n,
        vertex: vertex / n,
        slope: slope / n,
        slope_full_range: slope_full_range / n,
        mean_dlambda_i_offset,
        dlambda_mse_test,
        kappa_range: (k_lo, k_hi),
        anchors: pts.len(),
    })
}

impl fmt::Display for RecoveryReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "kappa fit over [{:.3}, {:.3}] at {} anchors: curvature {:.3}, vertex {:.3}",
            self.kappa_range.0, self.kappa_range.1, self.anchors, self.curvature, self.vertex
        )?;
        writeln!(
            f,
            "state slope near the data: {:.3} (over the full i range: {:.3})",
            self.slope, self.slope_full_range
        )?;
        writeln!(
            f,
            "mean dlambda_i offset (exact - predicted): {:.3}",
            self.mean_dlambda_i_offset
        )?;
        write!(f, "dlambda test MSE: {:.3e}", self.dlambda_mse_test)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FigureKind {
    Trajectory,
    DState,
    PayoffKappa,
    PayoffState,
}

impl FigureKind {
    pub const ALL: [FigureKind; 4] = [
        FigureKind::Trajectory,
        FigureKind::DState,
        FigureKind::PayoffKappa,
        FigureKind::PayoffState,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            FigureKind::Trajectory => "trajectory",
            FigureKind::DState => "dstate",
            FigureKind::PayoffKappa => "payoff_kappa",
            FigureKind::PayoffState => "payoff_state",
        }
    }

    pub fn header(&self) -> &'static str {
        match self {
            FigureKind::Trajectory => crate::sir_game::TRAJECTORY_HEADER,
            FigureKind::DState => DSTATE_HEADER,
            FigureKind::PayoffKappa => "s_t,kappa,v_shifted",
            FigureKind::PayoffState => "s_t,psi_i,v_shifted",
        }
    }
}

impl std::str::FromStr for FigureKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FigureKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.replace('-', "_"))
            .ok_or_else(|| format!("unknown figure kind '{s}'"))
    }
}

pub const DSTATE_HEADER: &str =
    "t,ds,di,dlambda_s,dlambda_i,kappa_opt,ds_nn,di_nn,dlambda_s_nn,dlambda_i_nn,kappa_nn";

/// `{dir}/{run_id}_{kind}_{alpha0}.csv`
pub fn figure_path(dir: &Path, run_id: &str, kind: FigureKind, alpha0: f64) -> PathBuf {
    dir.join(format!("{run_id}_{}_{alpha0}.csv", kind.as_str()))
}

/// Exact and predicted rates at one trajectory point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DStateRow {
    pub t: f64,
    pub exact: [f64; 5],
    pub predicted: [f64; 5],
}

/// Rates (ṡ, i̇, λ̇_s, λ̇_i, κ) along every `stride`-th trajectory point,
/// exact from the generating payoff and predicted from `payoff`.
pub fn dstate_rows<P: Payoff + ?Sized>(
    payoff: &P,
    traj: &NashTrajectory,
    truth: &PayoffParams,
    solver: &InnerSolver,
    stride: usize,
) -> Result<Vec<DStateRow>, EvalError> {
    let idx: Vec<usize> = (0..traj.len()).step_by(stride.max(1)).collect();
    let states: Vec<_> = idx
        .iter()
        .map(|&k| (traj.states[k], traj.adjoints[k]))
        .collect();
    let predicted = evolve_sequence(payoff, &states, solver)?;
    Ok(idx
        .iter()
        .zip(&predicted)
        .map(|(&k, e)| {
            let (th, la, kappa) = (traj.states[k], traj.adjoints[k], traj.controls[k]);
            let dpsi = dynamics(th, th.into(), kappa);
            let dl = adjoint_rhs(th, th.into(), la, kappa, truth);
            DStateRow {
                t: traj.times[k],
                exact: [dpsi[0], dpsi[1], dl[0], dl[1], kappa],
                predicted: [
                    e.dpsi[0],
                    e.dpsi[1],
                    e.dlambda[0],
                    e.dlambda[1],
                    e.kappa_opt,
                ],
            }
        })
        .collect())
}

fn write_rows<I>(path: &Path, header: &str, rows: I) -> Result<PathBuf, EvalError>
where
    I: IntoIterator<Item = Vec<f64>>,
{
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{header}")?;
    for row in rows {
        let cells: Vec<String> = row.into_iter().map(fmt_float).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    out.flush()?;
    Ok(path.to_path_buf())
}

pub fn export_trajectory(
    dir: &Path,
    run_id: &str,
    alpha0: f64,
    traj: &NashTrajectory,
) -> Result<PathBuf, EvalError> {
    let path = figure_path(dir, run_id, FigureKind::Trajectory, alpha0);
    std::fs::create_dir_all(dir)?;
    let mut out = BufWriter::new(File::create(&path)?);
    write_trajectory_csv(traj, &mut out)?;
    out.flush()?;
    Ok(path)
}

pub fn export_dstate(
    dir: &Path,
    run_id: &str,
    alpha0: f64,
    rows: &[DStateRow],
) -> Result<PathBuf, EvalError> {
    let path = figure_path(dir, run_id, FigureKind::DState, alpha0);
    write_rows(
        &path,
        DSTATE_HEADER,
        rows.iter().map(|r| {
            let mut v = vec![r.t];
            v.extend(r.exact);
            v.extend(r.predicted);
            v
        }),
    )
}

fn export_scan(path: PathBuf, header: &str, scan: &PayoffScan) -> Result<PathBuf, EvalError> {
    let rows = scan
        .anchor_points
        .iter()
        .zip(&scan.shifted_values)
        .flat_map(|(a, vals)| {
            scan.sweep_values
                .iter()
                .zip(vals)
                .map(move |(&x, &v)| vec![a.s, x, v])
        });
    write_rows(&path, header, rows)
}

pub fn export_payoff_kappa(
    dir: &Path,
    run_id: &str,
    alpha0: f64,
    scan: &PayoffScan,
) -> Result<PathBuf, EvalError> {
    let kind = FigureKind::PayoffKappa;
    export_scan(figure_path(dir, run_id, kind, alpha0), kind.header(), scan)
}

pub fn export_payoff_state(
    dir: &Path,
    run_id: &str,
    alpha0: f64,
    scan: &PayoffScan,
) -> Result<PathBuf, EvalError> {
    let kind = FigureKind::PayoffState;
    export_scan(figure_path(dir, run_id, kind, alpha0), kind.header(), scan)
}

/// Header and numeric rows of an exported table.
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), EvalError> {
    let bad = |message: String| EvalError::Table {
        path: path.to_path_buf(),
        message,
    };
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))??;
    let columns: Vec<String> = header.split(',').map(str::to_owned).collect();
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        let row = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| bad(format!("line {}: {e}", n + 2)))?;
        if row.len() != columns.len() {
            return Err(bad(format!(
                "line {}: {} cells, expected {}",
                n + 2,
                row.len(),
                columns.len()
            )));
        }
        rows.push(row);
    }
    Ok((columns, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::payoff_net::{init_params, NetworkConfig};
    use crate::sir_game::{forward_backward_sweep, SolverConfig};
    use crate::training::{prepare_dataset, DlambdaSource};

    fn gt(alpha0: f64) -> PayoffParams {
        PayoffParams::new(alpha0, 1.0, 4.0).unwrap()
    }

    #[test]
    fn grid_shape() {
        let g = kappa_grid(4.0, 81);
        assert_eq!(g.len(), 81);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[40], 4.0);
        assert_eq!(g[80], 8.0);
    }

    #[test]
    fn ground_truth_shifted_kappa_is_exact() {
        let p = gt(200.0);
        let th = PopulationState::new(0.6, 0.1);
        let g = kappa_grid(4.0, 81);
        let v = shifted_payoff_kappa(&p, th, &g, 4.0);
        for (k, v) in g.iter().zip(&v) {
            assert!((v + (k - 4.0) * (k - 4.0)).abs() < 1e-12);
        }
        assert_eq!(v[40], 0.0);
    }

    #[test]
    fn network_shift_vanishes_at_reference() {
        let net = init_params(&NetworkConfig::default()).unwrap();
        for th in [
            PopulationState::new(0.9, 0.01),
            PopulationState::new(0.3, 0.2),
        ] {
            assert_eq!(shifted_payoff_kappa(&net, th, &[4.0], 4.0), vec![0.0]);
        }
    }

    #[test]
    fn ground_truth_shifted_state() {
        let p = gt(200.0);
        let th = PopulationState::new(0.6, 0.1);
        assert_eq!(shifted_payoff_state(&p, th, 3.0), -200.0 * 0.1);
        assert_eq!(
            shifted_payoff_state(&p, PopulationState::new(0.6, 0.0), 3.0),
            0.0
        );
        let scan = scan_state(&p, &[th], &[0.05, 0.1], 3.0);
        assert_eq!(scan.shifted_values[0][1], 2.0 * scan.shifted_values[0][0]);
    }

    #[test]
    fn quadratic_fit_exact_and_offset_invariant() {
        let xs = kappa_grid(4.0, 81);
        let ys: Vec<f64> = xs.iter().map(|k| -(k - 4.0) * (k - 4.0)).collect();
        let f = fit_quadratic(&xs, &ys).unwrap();
        assert!((f.curvature + 1.0).abs() < 1e-12);
        assert!((f.vertex - 4.0).abs() < 1e-12);
        let shifted: Vec<f64> = ys.iter().map(|y| y + 37.5).collect();
        let g = fit_quadratic(&xs, &shifted).unwrap();
        assert!((g.curvature - f.curvature).abs() < 1e-12);
        assert!((g.vertex - f.vertex).abs() < 1e-12);
    }

    #[test]
    fn quadratic_fit_errors() {
        assert!(matches!(
            fit_quadratic(&[1.0, 2.0], &[0.0, 0.0]),
            Err(EvalError::TooFewPoints { .. })
        ));
        assert!(matches!(
            fit_quadratic(&[1.0, 1.0, 1.0], &[0.0, 1.0, 2.0]),
            Err(EvalError::RankDeficient)
        ));
        assert!(matches!(
            fit_quadratic(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]),
            Err(EvalError::RankDeficient)
        ));
    }

    #[test]
    fn linear_slope() {
        let xs = [0.01, 0.05, 0.1, 0.2];
        let ys: Vec<f64> = xs.iter().map(|x| -200.0 * x).collect();
        assert!((fit_linear_slope(&xs, &ys).unwrap() + 200.0).abs() < 1e-10);
        assert_eq!(fit_linear_slope(&xs, &[3.0; 4]).unwrap(), 0.0);
        assert!(matches!(
            fit_linear_slope(&[0.1, 0.1], &[0.0, 1.0]),
            Err(EvalError::DegenerateAbscissa)
        ));
    }

    #[test]
    fn ground_truth_recovery_report() {
        let p = gt(200.0);
        let traj = forward_backward_sweep(&p, &SolverConfig::default())
            .unwrap()
            .trajectory;
        let data = prepare_dataset(&traj, 50, 0.2, 1e-3, 7, DlambdaSource::Analytic(p)).unwrap();
        let r = recovery_report(&p, &data, 4.0, &InnerSolver::for_kappa_star(4.0)).unwrap();
        assert!((r.curvature + 1.0).abs() < 1e-9);
        assert!((r.vertex - 4.0).abs() < 1e-9);
        assert!((r.slope + 200.0).abs() < 1e-9);
        assert!((r.slope_full_range + 200.0).abs() < 1e-9);
        assert!(r.mean_dlambda_i_offset.abs() < 1e-9);
        assert!(r.dlambda_mse_test < 1e-16);
        assert_eq!(r.anchors, 50);
    }

    #[test]
    fn exported_tables_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = gt(200.0);
        let anchors = [
            PopulationState::new(0.7, 0.123456789012345),
            PopulationState::new(0.4, 0.2),
        ];
        let scan = scan_kappa(&p, &anchors, &kappa_grid(4.0, 81), 4.0);
        let path = export_payoff_kappa(dir.path(), "run", 200.0, &scan).unwrap();
        assert_eq!(path.file_name().unwrap(), "run_payoff_kappa_200.csv");
        let (cols, rows) = read_table(&path).unwrap();
        assert_eq!(cols.join(","), "s_t,kappa,v_shifted");
        assert_eq!(rows.len(), 162);
        for (row, want) in rows.iter().zip(scan.shifted_values.concat()) {
            assert_eq!(row[2].to_bits(), want.to_bits());
        }

        let state = scan_state(&p, &anchors, &[0.0, 0.1 / 3.0], 2.5);
        let path = export_payoff_state(dir.path(), "run", 200.0, &state).unwrap();
        let (cols, rows) = read_table(&path).unwrap();
        assert_eq!(cols.join(","), "s_t,psi_i,v_shifted");
        assert_eq!(rows[1][1].to_bits(), (0.1f64 / 3.0).to_bits());
    }

    #[test]
    fn trajectory_and_rate_tables() {
        let dir = tempfile::tempdir().unwrap();
        let p = gt(100.0);
        let traj = forward_backward_sweep(&p, &SolverConfig::default())
            .unwrap()
            .trajectory;
        let path = export_trajectory(dir.path(), "r", 100.0, &traj).unwrap();
        let (cols, rows) = read_table(&path).unwrap();
        assert_eq!(cols.join(","), "t,s,i,lambda_s,lambda_i,kappa_opt");
        assert_eq!(rows.len(), traj.len());
        assert_eq!(rows[123][2].to_bits(), traj.states[123].i.to_bits());

        let rates = dstate_rows(&p, &traj, &p, &InnerSolver::for_kappa_star(4.0), 250).unwrap();
        assert_eq!(rates.len(), 21);
        for r in &rates {
            for c in 0..5 {
                assert!((r.exact[c] - r.predicted[c]).abs() < 1e-7, "{r:?}");
            }
        }
        let path = export_dstate(dir.path(), "r", 100.0, &rates).unwrap();
        let (cols, rows) = read_table(&path).unwrap();
        assert_eq!(cols.len(), 11);
        assert_eq!(rows.len(), 21);
    }

    #[test]
    fn kind_names() {
        for k in FigureKind::ALL {
            assert_eq!(k.as_str().parse::<FigureKind>().unwrap(), k);
        }
        assert_eq!(
            "payoff-kappa".parse::<FigureKind>().unwrap(),
            FigureKind::PayoffKappa
        );
        assert!("plot".parse::<FigureKind>().is_err());
    }
}
