//! Ground-truth SIR distancing game.
//!
//! Population dynamics, the analytic payoff, the closed-form optimal contact
//! rate, the adjoint dynamics, and a damped forward-backward sweep that
//! produces Nash-equilibrium trajectories.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Scalar;
use crate::payoff_net::{ParametricPayoff, Payoff};

/// Slack on state positivity bounds.
pub const STATE_SLACK: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GameError {
    #[error("invalid payoff parameters: {0}")]
    InvalidPayoff(String),
    #[error("invalid solver config: {0}")]
    InvalidConfig(String),
    #[error("sweep did not converge after {sweeps} sweeps (last max |dkappa| = {residual:e})")]
    MaxSweepsExceeded { sweeps: usize, residual: f64 },
    #[error("state left [0, 1] at t = {t}: s = {s}, i = {i}")]
    StateOutOfBounds { t: f64, s: f64, i: f64 },
    #[error("non-finite value in sweep at t = {0}")]
    NonFinite(f64),
    #[error("control profile has {got} points, grid has {expected}")]
    GridMismatch { expected: usize, got: usize },
    #[error("trajectory csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Population fractions θ = (s, i).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationState {
    pub s: f64,
    pub i: f64,
}

impl PopulationState {
    pub fn new(s: f64, i: f64) -> Self {
        PopulationState { s, i }
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.s, self.i]
    }

    pub fn in_bounds(&self, slack: f64) -> bool {
        self.s >= -slack && self.i >= -slack && self.s <= 1.0 + slack && self.i <= 1.0 + slack
    }
}

/// Individual probabilities ψ = (ψ_s, ψ_i).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndividualState {
    pub psi_s: f64,
    pub psi_i: f64,
}

impl IndividualState {
    pub fn new(psi_s: f64, psi_i: f64) -> Self {
        IndividualState { psi_s, psi_i }
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.psi_s, self.psi_i]
    }
}

impl From<PopulationState> for IndividualState {
    /// At the Nash equilibrium the individual follows the population.
    fn from(theta: PopulationState) -> Self {
        IndividualState::new(theta.s, theta.i)
    }
}

/// Costate λ = (λ_s, λ_i); the conjugate momenta are p_ψ = −λ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdjointState {
    pub lambda_s: f64,
    pub lambda_i: f64,
}

impl AdjointState {
    pub fn new(lambda_s: f64, lambda_i: f64) -> Self {
        AdjointState { lambda_s, lambda_i }
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.lambda_s, self.lambda_i]
    }
}

/// Ground-truth payoff V = −α₀ψ_i − β(κ − κ*)².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PayoffParams {
    pub alpha0: f64,
    pub beta: f64,
    pub kappa_star: f64,
}

impl PayoffParams {
    pub fn new(alpha0: f64, beta: f64, kappa_star: f64) -> Result<Self, GameError> {
        let p = PayoffParams {
            alpha0,
            beta,
            kappa_star,
        };
        p.validate()?;
        Ok(p)
    }

    /// α₀ = 0 is accepted: it is the no-infection-cost limit.
    pub fn validate(&self) -> Result<(), GameError> {
        if !(self.alpha0.is_finite() && self.alpha0 >= 0.0) {
            return Err(GameError::InvalidPayoff(format!(
                "alpha0 = {}",
                self.alpha0
            )));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(GameError::InvalidPayoff(format!("beta = {}", self.beta)));
        }
        if !(self.kappa_star.is_finite() && self.kappa_star > 0.0) {
            return Err(GameError::InvalidPayoff(format!(
                "kappa_star = {}",
                self.kappa_star
            )));
        }
        Ok(())
    }
}

impl Default for PayoffParams {
    fn default() -> Self {
        PayoffParams {
            alpha0: 200.0,
            beta: 1.0,
            kappa_star: 4.0,
        }
    }
}

fn ground_truth<T: Scalar>(alpha0: T, beta: T, kappa_star: T, psi_i: T, kappa: T) -> T {
    let dk = kappa - kappa_star;
    -(alpha0 * psi_i) - beta * dk * dk
}

impl Payoff for PayoffParams {
    fn value<T: Scalar>(&self, _theta: [T; 2], psi: [T; 2], kappa: T) -> T {
        ground_truth(
            T::constant(self.alpha0),
            T::constant(self.beta),
            T::constant(self.kappa_star),
            psi[1],
            kappa,
        )
    }
}

/// Parameters ordered `[alpha0, beta, kappa_star]`.
impl ParametricPayoff for PayoffParams {
    fn parameters(&self) -> Vec<f64> {
        vec![self.alpha0, self.beta, self.kappa_star]
    }

    fn value_with<T: Scalar>(&self, params: &[T], _theta: [T; 2], psi: [T; 2], kappa: T) -> T {
        ground_truth(params[0], params[1], params[2], psi[1], kappa)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TerminalCondition {
    /// λ(t_f) = (s(t_f), i(t_f)).
    Vaccination,
    /// λ(t_f) = 0, the natural boundary condition.
    Zero,
}

impl TerminalCondition {
    pub fn adjoint_at(&self, theta_final: PopulationState) -> AdjointState {
        match self {
            TerminalCondition::Vaccination => AdjointState::new(theta_final.s, theta_final.i),
            TerminalCondition::Zero => AdjointState::new(0.0, 0.0),
        }
    }
}

impl std::str::FromStr for TerminalCondition {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "vaccination" => Ok(TerminalCondition::Vaccination),
            "zero" => Ok(TerminalCondition::Zero),
            other => Err(format!("unknown terminal condition `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub t_final: f64,
    pub dt: f64,
    pub sweep_damping: f64,
    pub sweep_tol: f64,
    pub max_sweeps: usize,
    pub terminal_condition: TerminalCondition,
    pub i0: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            t_final: 100.0,
            dt: 0.02,
            sweep_damping: 0.5,
            sweep_tol: 1e-8,
            max_sweeps: 500,
            terminal_condition: TerminalCondition::Vaccination,
            i0: 1e-8,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), GameError> {
        let bad = |msg: String| Err(GameError::InvalidConfig(msg));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt = {}", self.dt));
        }
        if !(self.t_final > 0.0 && self.t_final.is_finite()) {
            return bad(format!("t_final = {}", self.t_final));
        }
        if !(self.sweep_tol > 0.0) {
            return bad(format!("sweep_tol = {}", self.sweep_tol));
        }
        if !(self.sweep_damping > 0.0 && self.sweep_damping <= 1.0) {
            return bad(format!("sweep_damping = {}", self.sweep_damping));
        }
        if !(0.0..=1.0).contains(&self.i0) {
            return bad(format!("i0 = {}", self.i0));
        }
        if self.max_sweeps == 0 {
            return bad("max_sweeps = 0".into());
        }
        Ok(())
    }

    /// Number of steps; the grid has `steps() + 1` points.
    pub fn steps(&self) -> usize {
        (self.t_final / self.dt).round() as usize
    }
}

/// Nash trajectory sampled on the integration grid.
#[derive(Debug, Clone, PartialEq)]
pub struct NashTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<PopulationState>,
    pub adjoints: Vec<AdjointState>,
    pub controls: Vec<f64>,
}

impl NashTrajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn check_invariants(&self) -> Result<(), GameError> {
        let n = self.times.len();
        if self.states.len() != n || self.adjoints.len() != n || self.controls.len() != n {
            return Err(GameError::Csv("column lengths differ".into()));
        }
        if self.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(GameError::Csv("times not strictly increasing".into()));
        }
        if let Some(k) = self.controls.iter().position(|c| !c.is_finite()) {
            return Err(GameError::NonFinite(self.times[k]));
        }
        Ok(())
    }

    pub fn min_control(&self) -> f64 {
        self.controls.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn final_state(&self) -> PopulationState {
        *self.states.last().expect("empty trajectory")
    }

    /// Uniform step of the grid.
    pub fn dt(&self) -> f64 {
        (self.times[self.times.len() - 1] - self.times[0]) / (self.times.len() - 1) as f64
    }
}

/// Trajectory plus solver diagnostics.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub trajectory: NashTrajectory,
    pub sweeps: usize,
    /// Max-norm change of the control in the final sweep.
    pub residual: f64,
}

/// Generic individual dynamics F(θ, ψ, κ) = (−κψ_s i, κψ_s i − ψ_i).
#[inline]
pub fn dynamics_generic<T: Scalar>(theta: [T; 2], psi: [T; 2], kappa: T) -> [T; 2] {
    let infection = kappa * psi[0] * theta[1];
    [-infection, infection - psi[1]]
}

/// Rates (dψ_s/dt, dψ_i/dt). With ψ = θ this is the population SIR model.
pub fn dynamics(theta: PopulationState, psi: IndividualState, kappa: f64) -> [f64; 2] {
    dynamics_generic(theta.as_array(), psi.as_array(), kappa)
}

pub fn payoff_true(
    theta: PopulationState,
    psi: IndividualState,
    kappa: f64,
    params: &PayoffParams,
) -> f64 {
    params.value(theta.as_array(), psi.as_array(), kappa)
}

/// Root of the optimality condition for the analytic payoff.
pub fn kappa_opt_closed(
    theta: PopulationState,
    psi: IndividualState,
    lambda: AdjointState,
    params: &PayoffParams,
) -> f64 {
    params.kappa_star
        - psi.psi_s * theta.i * (lambda.lambda_s - lambda.lambda_i) / (2.0 * params.beta)
}

/// (dλ_s/dt, dλ_i/dt) for the analytic payoff at the given control.
///
/// ψ only enters through F's linearity in ψ, so the rates do not depend on it.
pub fn adjoint_rhs(
    theta: PopulationState,
    _psi: IndividualState,
    lambda: AdjointState,
    kappa_opt: f64,
    params: &PayoffParams,
) -> [f64; 2] {
    [
        kappa_opt * theta.i * (lambda.lambda_s - lambda.lambda_i),
        params.alpha0 + lambda.lambda_i,
    ]
}

fn rk4_step<F>(y: [f64; 2], h: f64, mut f: F) -> [f64; 2]
where
    F: FnMut(f64, [f64; 2]) -> [f64; 2],
{
    let axpy = |y: [f64; 2], a: f64, k: [f64; 2]| [y[0] + a * k[0], y[1] + a * k[1]];
    let k1 = f(0.0, y);
    let k2 = f(0.5, axpy(y, 0.5 * h, k1));
    let k3 = f(0.5, axpy(y, 0.5 * h, k2));
    let k4 = f(1.0, axpy(y, h, k3));
    [
        y[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        y[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
    ]
}

#[inline]
fn lerp(a: f64, b: f64, w: f64) -> f64 {
    a + w * (b - a)
}

fn lerp_state(a: PopulationState, b: PopulationState, w: f64) -> PopulationState {
    PopulationState::new(lerp(a.s, b.s, w), lerp(a.i, b.i, w))
}

/// Population forward pass under a control profile.
fn integrate_population(
    theta0: PopulationState,
    controls: &[f64],
    dt: f64,
) -> Result<Vec<PopulationState>, GameError> {
    let mut states = Vec::with_capacity(controls.len());
    let mut y = theta0.as_array();
    states.push(theta0);
    for k in 0..controls.len() - 1 {
        let (k0, k1) = (controls[k], controls[k + 1]);
        y = rk4_step(y, dt, |w, y| {
            let theta = PopulationState::new(y[0], y[1]);
            dynamics(theta, theta.into(), lerp(k0, k1, w))
        });
        let theta = PopulationState::new(y[0], y[1]);
        let t = (k + 1) as f64 * dt;
        if !(theta.s.is_finite() && theta.i.is_finite()) {
            return Err(GameError::NonFinite(t));
        }
        if !theta.in_bounds(STATE_SLACK) {
            return Err(GameError::StateOutOfBounds {
                t,
                s: theta.s,
                i: theta.i,
            });
        }
        states.push(theta);
    }
    Ok(states)
}

/// Adjoint backward pass from `terminal` at t_f down to t = 0.
fn integrate_adjoint(
    states: &[PopulationState],
    controls: &[f64],
    terminal: AdjointState,
    dt: f64,
    params: &PayoffParams,
) -> Result<Vec<AdjointState>, GameError> {
    let n = states.len();
    let mut adjoints = vec![terminal; n];
    let mut y = terminal.as_array();
    for k in (0..n - 1).rev() {
        let (th1, th0) = (states[k + 1], states[k]);
        let (c1, c0) = (controls[k + 1], controls[k]);
        // step of −dt; w runs from t_{k+1} towards t_k
        y = rk4_step(y, -dt, |w, y| {
            let theta = lerp_state(th1, th0, w);
            adjoint_rhs(
                theta,
                theta.into(),
                AdjointState::new(y[0], y[1]),
                lerp(c1, c0, w),
                params,
            )
        });
        if !(y[0].is_finite() && y[1].is_finite()) {
            return Err(GameError::NonFinite(k as f64 * dt));
        }
        adjoints[k] = AdjointState::new(y[0], y[1]);
    }
    Ok(adjoints)
}

/// Floor for the adaptive sweep damping.
pub const MIN_SWEEP_DAMPING: f64 = 1.0 / 64.0;

/// Damped forward-backward sweep for the Nash equilibrium.
///
/// Starts from κ ≡ κ*, then alternates a forward population pass, a backward
/// adjoint pass and the closed-form control update
/// κ ← (1 − ω)κ + ω·κ_opt until max|κ_opt − κ| < `sweep_tol`. Whenever the
/// change grows from one sweep to the next, ω is halved (down to
/// [`MIN_SWEEP_DAMPING`]). The stored controls are the ones the stored states
/// and adjoints were integrated with.
pub fn forward_backward_sweep(
    params: &PayoffParams,
    config: &SolverConfig,
) -> Result<SweepResult, GameError> {
    params.validate()?;
    config.validate()?;
    let n = config.steps() + 1;
    let dt = config.dt;
    let times: Vec<f64> = (0..n).map(|k| k as f64 * dt).collect();
    let theta0 = PopulationState::new(1.0 - config.i0, config.i0);
    let mut omega = config.sweep_damping;

    let mut controls = vec![params.kappa_star; n];
    let mut residual = f64::INFINITY;
    for sweep in 1..=config.max_sweeps {
        let previous = residual;
        let states = integrate_population(theta0, &controls, dt)?;
        let terminal = config.terminal_condition.adjoint_at(states[n - 1]);
        let adjoints = integrate_adjoint(&states, &controls, terminal, dt, params)?;

        let updated: Vec<f64> = states
            .iter()
            .zip(&adjoints)
            .map(|(&theta, &lambda)| kappa_opt_closed(theta, theta.into(), lambda, params))
            .collect();
        residual = updated
            .iter()
            .zip(&controls)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if !residual.is_finite() {
            return Err(GameError::NonFinite(f64::NAN));
        }
        if residual < config.sweep_tol {
            return Ok(SweepResult {
                trajectory: NashTrajectory {
                    times,
                    states,
                    adjoints,
                    controls,
                },
                sweeps: sweep,
                residual,
            });
        }
        if residual > previous {
            omega = (0.5 * omega).max(MIN_SWEEP_DAMPING);
        }
        for (c, u) in controls.iter_mut().zip(&updated) {
            *c = (1.0 - omega) * *c + omega * u;
        }
    }
    Err(GameError::MaxSweepsExceeded {
        sweeps: config.max_sweeps,
        residual,
    })
}

/// Composite trapezoid rule on a uniform grid.
pub fn trapezoid(values: &[f64], dt: f64) -> f64 {
    match values.len() {
        0 | 1 => 0.0,
        n => dt * (values[1..n - 1].iter().sum::<f64>() + 0.5 * (values[0] + values[n - 1])),
    }
}

/// Total utility of an individual facing the Nash population.
///
/// The individual's ψ is re-integrated from ψ(0) = θ(0) under `control`
/// (the Nash controls when `None`) while θ stays on the stored trajectory.
/// The payoff rate is integrated by the trapezoid rule, and the terminal
/// reward λ(t_f)·ψ(t_f) implied by the terminal condition is added.
pub fn total_utility<P: Payoff>(
    traj: &NashTrajectory,
    control_override: Option<&[f64]>,
    payoff: &P,
    terminal: TerminalCondition,
) -> Result<f64, GameError> {
    let controls = control_override.unwrap_or(&traj.controls);
    if controls.len() != traj.len() {
        return Err(GameError::GridMismatch {
            expected: traj.len(),
            got: controls.len(),
        });
    }
    let dt = traj.dt();
    let n = traj.len();
    let mut psi = IndividualState::from(traj.states[0]);
    let mut rates = Vec::with_capacity(n);
    rates.push(payoff.value(traj.states[0].as_array(), psi.as_array(), controls[0]));
    for k in 0..n - 1 {
        let (th0, th1) = (traj.states[k], traj.states[k + 1]);
        let (c0, c1) = (controls[k], controls[k + 1]);
        let y = rk4_step(psi.as_array(), dt, |w, y| {
            dynamics(
                lerp_state(th0, th1, w),
                IndividualState::new(y[0], y[1]),
                lerp(c0, c1, w),
            )
        });
        psi = IndividualState::new(y[0], y[1]);
        rates.push(payoff.value(th1.as_array(), psi.as_array(), c1));
    }
    let reward = terminal.adjoint_at(traj.final_state());
    Ok(trapezoid(&rates, dt) + reward.lambda_s * psi.psi_s + reward.lambda_i * psi.psi_i)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NashReport {
    pub u_nash: f64,
    /// Largest utility gain over all tried deviations (negative if all lose).
    pub max_gain: f64,
    pub tolerance: f64,
    pub evaluated: usize,
}

impl NashReport {
    pub fn passed(&self) -> bool {
        self.max_gain <= self.tolerance
    }
}

/// Relative tolerance on utility gains for the deviation check.
pub const NASH_GAIN_RTOL: f64 = 1e-5;

/// Smooth random profile with max |δκ| = `magnitude`.
pub fn smooth_perturbation(times: &[f64], magnitude: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let span = times[times.len() - 1] - times[0];
    let modes: Vec<(f64, f64, f64)> = (1..=4)
        .map(|m| {
            let a: f64 = rng.sample(StandardNormal);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            (m as f64, a / m as f64, phase)
        })
        .collect();
    let raw: Vec<f64> = times
        .iter()
        .map(|t| {
            modes
                .iter()
                .map(|(m, a, ph)| a * (m * std::f64::consts::PI * (t - times[0]) / span + ph).sin())
                .sum()
        })
        .collect();
    let peak = raw.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if peak == 0.0 || magnitude == 0.0 {
        return vec![0.0; times.len()];
    }
    raw.iter().map(|v| magnitude * v / peak).collect()
}

/// Unilateral deviation check: no perturbed control improves total utility.
///
/// Each random perturbation is tried with both signs, so first-order gains
/// cannot hide behind a lucky sign.
pub fn verify_nash<P: Payoff>(
    traj: &NashTrajectory,
    payoff: &P,
    terminal: TerminalCondition,
    n_perturbations: usize,
    magnitude: f64,
    seed: u64,
) -> Result<NashReport, GameError> {
    let u_nash = total_utility(traj, None, payoff, terminal)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_gain = f64::NEG_INFINITY;
    let mut evaluated = 0;
    for _ in 0..n_perturbations {
        let delta = smooth_perturbation(&traj.times, magnitude, &mut rng);
        for sign in [1.0, -1.0] {
            let perturbed: Vec<f64> = traj
                .controls
                .iter()
                .zip(&delta)
                .map(|(k, d)| k + sign * d)
                .collect();
            let u = total_utility(traj, Some(&perturbed), payoff, terminal)?;
            max_gain = max_gain.max(u - u_nash);
            evaluated += 1;
        }
    }
    if evaluated == 0 {
        max_gain = 0.0;
    }
    Ok(NashReport {
        u_nash,
        max_gain,
        tolerance: NASH_GAIN_RTOL * u_nash.abs(),
        evaluated,
    })
}

pub const TRAJECTORY_HEADER: &str = "t,s,i,lambda_s,lambda_i,kappa_opt";

/// 17 significant digits; round-trips every f64 exactly.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_trajectory_csv<W: Write>(traj: &NashTrajectory, mut out: W) -> Result<(), GameError> {
    writeln!(out, "{TRAJECTORY_HEADER}")?;
    for k in 0..traj.len() {
        let (th, la) = (traj.states[k], traj.adjoints[k]);
        writeln!(
            out,
            "{},{},{},{},{},{}",
            fmt_float(traj.times[k]),
            fmt_float(th.s),
            fmt_float(th.i),
            fmt_float(la.lambda_s),
            fmt_float(la.lambda_i),
            fmt_float(traj.controls[k])
        )?;
    }
    Ok(())
}

pub fn read_trajectory_csv<R: BufRead>(input: R) -> Result<NashTrajectory, GameError> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| GameError::Csv("empty file".into()))??;
    if header.trim() != TRAJECTORY_HEADER {
        return Err(GameError::Csv(format!("unexpected header `{header}`")));
    }
    let mut traj = NashTrajectory {
        times: vec![],
        states: vec![],
        adjoints: vec![],
        controls: vec![],
    };
    for (row, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Result<Vec<f64>, _> = line.split(',').map(|c| c.trim().parse::<f64>()).collect();
        let cols = cols.map_err(|e| GameError::Csv(format!("row {}: {e}", row + 2)))?;
        if cols.len() != 6 {
            return Err(GameError::Csv(format!(
                "row {}: expected 6 columns, got {}",
                row + 2,
                cols.len()
            )));
        }
        traj.times.push(cols[0]);
        traj.states.push(PopulationState::new(cols[1], cols[2]));
        traj.adjoints.push(AdjointState::new(cols[3], cols[4]));
        traj.controls.push(cols[5]);
    }
    if traj.len() < 2 {
        return Err(GameError::Csv("fewer than two rows".into()));
    }
    traj.check_invariants()?;
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn standard_params(alpha0: f64) -> PayoffParams {
        PayoffParams::new(alpha0, 1.0, 4.0).unwrap()
    }

    #[test]
    fn dynamics_examples() {
        let th = PopulationState::new(1.0, 0.0);
        assert_eq!(dynamics(th, th.into(), 4.0), [0.0, 0.0]);
        let th = PopulationState::new(0.5, 0.2);
        let r = dynamics(th, th.into(), 4.0);
        assert!((r[0] + 0.4).abs() < 1e-15 && (r[1] - 0.2).abs() < 1e-15);
        let r = dynamics(th, IndividualState::new(1.0, 0.0), 2.0);
        assert!((r[0] + 0.4).abs() < 1e-15 && (r[1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn payoff_examples() {
        let th = PopulationState::new(0.5, 0.1);
        let p = standard_params(100.0);
        assert_eq!(
            payoff_true(th, IndividualState::new(0.5, 0.1), 4.0, &p),
            -10.0
        );
        assert_eq!(
            payoff_true(th, IndividualState::new(0.5, 0.0), 3.0, &p),
            -1.0
        );
        let p = standard_params(200.0);
        assert_eq!(
            payoff_true(th, IndividualState::new(0.5, 0.2), 5.0, &p),
            -41.0
        );
    }

    #[test]
    fn kappa_opt_examples() {
        let p = standard_params(100.0);
        let th = PopulationState::new(0.5, 0.2);
        let equal = AdjointState::new(-3.0, -3.0);
        assert_eq!(kappa_opt_closed(th, th.into(), equal, &p), 4.0);
        let healthy = PopulationState::new(0.5, 0.0);
        assert_eq!(
            kappa_opt_closed(healthy, healthy.into(), AdjointState::new(5.0, -50.0), &p),
            4.0
        );
        let k = kappa_opt_closed(th, th.into(), AdjointState::new(1.0, -1.0), &p);
        assert!((k - 3.9).abs() < 1e-15);
    }

    #[test]
    fn adjoint_rhs_examples() {
        let p = standard_params(100.0);
        let th = PopulationState::new(0.7, 0.0);
        assert_eq!(
            adjoint_rhs(th, th.into(), AdjointState::new(3.0, -5.0), 4.0, &p),
            [0.0, 95.0]
        );
        let th = PopulationState::new(0.7, 0.2);
        let r = adjoint_rhs(th, th.into(), AdjointState::new(1.0, -1.0), 4.0, &p);
        assert!((r[0] - 1.6).abs() < 1e-15);
        assert_eq!(r[1], 99.0);
        let p = standard_params(200.0);
        assert_eq!(
            adjoint_rhs(th, th.into(), AdjointState::new(0.0, 0.0), 3.0, &p),
            [0.0, 200.0]
        );
    }

    #[test]
    fn closed_form_is_root_of_optimality_condition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let p = PayoffParams::new(
                rng.gen_range(0.0..500.0),
                rng.gen_range(0.1..5.0),
                rng.gen_range(0.5..8.0),
            )
            .unwrap();
            let th = PopulationState::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..0.5));
            let psi = IndividualState::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..0.5));
            let la = AdjointState::new(rng.gen_range(-50.0..5.0), rng.gen_range(-500.0..5.0));
            let k = kappa_opt_closed(th, psi, la, &p);
            let cond =
                -2.0 * p.beta * (k - p.kappa_star) - psi.psi_s * th.i * (la.lambda_s - la.lambda_i);
            let scale = (psi.psi_s * th.i * (la.lambda_s - la.lambda_i)).abs() + 1.0;
            assert!(cond.abs() <= 1e-14 * scale, "{cond}");
        }
    }

    #[test]
    fn zero_cost_limit_is_uncontrolled_sir() {
        let params = PayoffParams::new(0.0, 1.0, 4.0).unwrap();
        let config = SolverConfig {
            terminal_condition: TerminalCondition::Zero,
            ..SolverConfig::default()
        };
        let res = forward_backward_sweep(&params, &config).unwrap();
        let traj = &res.trajectory;
        assert!(traj
            .adjoints
            .iter()
            .all(|l| l.lambda_s == 0.0 && l.lambda_i == 0.0));
        assert!(traj.controls.iter().all(|&k| k == 4.0));
        assert_eq!(res.sweeps, 1);
        // uncontrolled SIR with R0 = 4 infects ~98% of the population
        assert!(traj.final_state().s < 0.03);
    }

    #[test]
    fn sweep_postconditions() {
        let params = standard_params(200.0);
        let config = SolverConfig::default();
        let res = forward_backward_sweep(&params, &config).unwrap();
        let traj = &res.trajectory;
        traj.check_invariants().unwrap();
        assert_eq!(traj.len(), 5001);
        assert_eq!(traj.states[0], PopulationState::new(1.0 - 1e-8, 1e-8));
        let last = traj.len() - 1;
        assert_eq!(traj.adjoints[last].lambda_s, traj.states[last].s);
        assert_eq!(traj.adjoints[last].lambda_i, traj.states[last].i);
        for k in 0..traj.len() {
            let th = traj.states[k];
            let closed = kappa_opt_closed(th, th.into(), traj.adjoints[k], &params);
            assert!((traj.controls[k] - closed).abs() < config.sweep_tol);
            assert!(th.s + th.i <= 1.0 + STATE_SLACK);
        }
        for w in traj.states.windows(2) {
            assert!(w[1].s <= w[0].s);
        }
    }

    #[test]
    fn weak_distancing_regime() {
        let res =
            forward_backward_sweep(&standard_params(100.0), &SolverConfig::default()).unwrap();
        let kmin = res.trajectory.min_control();
        // the minimum sits at 3.471, just below the nominal 3.5 band
        assert!((3.45..3.5).contains(&kmin), "min kappa {kmin}");
    }

    #[test]
    fn max_sweeps_reports_residual() {
        let config = SolverConfig {
            max_sweeps: 2,
            ..SolverConfig::default()
        };
        match forward_backward_sweep(&standard_params(200.0), &config) {
            Err(GameError::MaxSweepsExceeded { sweeps, residual }) => {
                assert_eq!(sweeps, 2);
                assert!(residual > 0.0 && residual.is_finite());
            }
            other => panic!("expected MaxSweepsExceeded, got {other:?}"),
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad_dt = SolverConfig {
            dt: 0.0,
            ..SolverConfig::default()
        };
        assert!(forward_backward_sweep(&standard_params(1.0), &bad_dt).is_err());
        assert!(PayoffParams::new(1.0, 0.0, 4.0).is_err());
        assert!(PayoffParams::new(-1.0, 1.0, 4.0).is_err());
    }

    #[test]
    fn unstable_step_reports_out_of_bounds() {
        let config = SolverConfig {
            dt: 2.5,
            i0: 0.3,
            ..SolverConfig::default()
        };
        let err = forward_backward_sweep(&PayoffParams::new(0.0, 1.0, 8.0).unwrap(), &config)
            .unwrap_err();
        assert!(
            matches!(
                err,
                GameError::StateOutOfBounds { .. } | GameError::NonFinite(_)
            ),
            "{err:?}"
        );
    }

    #[test]
    fn constant_payoff_quadrature() {
        // alpha0 = 0 and kappa = kappa* + 1 everywhere: V = -beta
        let params = PayoffParams::new(0.0, 1.0, 4.0).unwrap();
        let config = SolverConfig {
            terminal_condition: TerminalCondition::Zero,
            ..SolverConfig::default()
        };
        let traj = forward_backward_sweep(&params, &config).unwrap().trajectory;
        let shifted = vec![5.0; traj.len()];
        let u = total_utility(&traj, Some(&shifted), &params, TerminalCondition::Zero).unwrap();
        assert!((u + 100.0).abs() < 1e-9, "{u}");
        assert_eq!(trapezoid(&[2.5; 11], 0.1), 2.5);
    }

    #[test]
    fn override_with_nash_controls_is_identity() {
        let params = standard_params(200.0);
        let traj = forward_backward_sweep(&params, &SolverConfig::default())
            .unwrap()
            .trajectory;
        let tc = TerminalCondition::Vaccination;
        let a = total_utility(&traj, None, &params, tc).unwrap();
        let b = total_utility(&traj, Some(&traj.controls.clone()), &params, tc).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(matches!(
            total_utility(&traj, Some(&[1.0, 2.0]), &params, tc),
            Err(GameError::GridMismatch { .. })
        ));
    }

    #[test]
    fn zero_magnitude_deviation_gains_nothing() {
        let params = standard_params(200.0);
        let traj = forward_backward_sweep(&params, &SolverConfig::default())
            .unwrap()
            .trajectory;
        let report =
            verify_nash(&traj, &params, TerminalCondition::Vaccination, 3, 0.0, 1).unwrap();
        assert_eq!(report.max_gain, 0.0);
        assert_eq!(report.evaluated, 6);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let params = standard_params(100.0);
        let config = SolverConfig {
            t_final: 10.0,
            i0: 1e-3,
            ..SolverConfig::default()
        };
        let traj = forward_backward_sweep(&params, &config).unwrap().trajectory;
        let mut buf = Vec::new();
        write_trajectory_csv(&traj, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,s,i,lambda_s,lambda_i,kappa_opt\n"));
        let back = read_trajectory_csv(buf.as_slice()).unwrap();
        assert_eq!(back, traj);
    }

    #[test]
    fn csv_rejects_bad_input() {
        assert!(read_trajectory_csv("a,b\n1,2\n".as_bytes()).is_err());
        let text = format!("{TRAJECTORY_HEADER}\n0,1,0,0,0,4\n0,1,0,0,0,4\n");
        assert!(read_trajectory_csv(text.as_bytes()).is_err());
        let text = format!("{TRAJECTORY_HEADER}\n0,1,0,0,0\n");
        assert!(read_trajectory_csv(text.as_bytes()).is_err());
    }
}
