//! Property suites run by `nashnet check`.
//!
//! Each suite returns a [`CheckOutcome`] rather than panicking, so the CLI
//! can report every failure in one run. `inject_alpha0` perturbs α₀ in the
//! payoff handed to the N³ machinery while the reference values keep the
//! configured one; any nonzero value should turn the oracle suite red.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::n3::{
    hamiltonian_check, implicit_grad_kappa, solve_kappa_opt, state_evolver, AugmentedState,
    InnerSolver, N3Error,
};
use crate::payoff_net::{
    init_params, GaugeShifted, NetError, NetworkConfig, NetworkParams, Payoff, PayoffQuery,
};
use crate::sir_game::{
    adjoint_rhs, dynamics, forward_backward_sweep, kappa_opt_closed, verify_nash, AdjointState,
    GameError, IndividualState, PayoffParams, PopulationState, SolverConfig,
};
use crate::training::{
    loss_and_gradient, loss_breakdown, prepare_dataset, train, DataPoint, DlambdaSource, LossKind,
    Split, TrainConfig, TrainError,
};

#[derive(Debug, Error)]
pub enum CheckError {
    #[error("unknown suite `{0}`")]
    UnknownSuite(String),
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Solver(#[from] N3Error),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Oracle,
    Gauge,
    Hamiltonian,
    Nash,
    Gradient,
    Determinism,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Oracle,
        Suite::Gauge,
        Suite::Hamiltonian,
        Suite::Nash,
        Suite::Gradient,
        Suite::Determinism,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Suite::Oracle => "oracle",
            Suite::Gauge => "gauge",
            Suite::Hamiltonian => "hamiltonian",
            Suite::Nash => "nash",
            Suite::Gradient => "gradient",
            Suite::Determinism => "determinism",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Suite {
    type Err = CheckError;
    fn from_str(s: &str) -> Result<Self, CheckError> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| CheckError::UnknownSuite(s.to_owned()))
    }
}

#[derive(Debug, Clone)]
pub struct CheckConfig {
    pub payoff: PayoffParams,
    pub solver: SolverConfig,
    pub oracle_states: usize,
    pub nash_perturbations: usize,
    pub nash_magnitude: f64,
    pub inject_alpha0: f64,
    pub seed: u64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            payoff: PayoffParams::default(),
            solver: SolverConfig::default(),
            oracle_states: 10_000,
            nash_perturbations: 50,
            nash_magnitude: 0.1,
            inject_alpha0: 0.0,
            seed: 2024,
        }
    }
}

impl CheckConfig {
    fn injected(&self) -> PayoffParams {
        PayoffParams {
            alpha0: self.payoff.alpha0 + self.inject_alpha0,
            ..self.payoff
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub suite: Suite,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mark = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{mark} {:<12} {}", self.suite.as_str(), self.detail)
    }
}

pub const ORACLE_RATE_TOL: f64 = 1e-8;
pub const ORACLE_KAPPA_TOL: f64 = 1e-10;
pub const HAMILTONIAN_TOL: f64 = 1e-12;
/// Relative deviation allowed under a gauge shift; a few ulps of round-off.
pub const GAUGE_TOL: f64 = 1e-12;
pub const GRADIENT_RTOL: f64 = 1e-4;

pub fn run_checks(suites: &[Suite], config: &CheckConfig) -> Result<Vec<CheckOutcome>, CheckError> {
    suites.iter().map(|&s| run_suite(s, config)).collect()
}

pub fn run_suite(suite: Suite, config: &CheckConfig) -> Result<CheckOutcome, CheckError> {
    let (passed, detail) = match suite {
        Suite::Oracle => oracle(config)?,
        Suite::Gauge => gauge(config)?,
        Suite::Hamiltonian => hamiltonian(config)?,
        Suite::Nash => nash(config)?,
        Suite::Gradient => gradient(config)?,
        Suite::Determinism => determinism(config)?,
    };
    Ok(CheckOutcome {
        suite,
        passed,
        detail,
    })
}

/// Random (θ, λ) whose closed-form control lies well inside [0, 2κ*].
pub fn random_nash_state(
    rng: &mut ChaCha8Rng,
    params: &PayoffParams,
) -> (PopulationState, AdjointState) {
    let s: f64 = rng.gen_range(0.01..1.0);
    let i = rng.gen_range(0.0..(1.0 - s).min(0.5));
    let theta = PopulationState::new(s, i);
    let target = rng.gen_range(0.05..1.95) * params.kappa_star;
    let lambda_i = rng.gen_range(-2.0 * params.alpha0.max(1.0)..1.0);
    let si = s * i;
    let gap = if si > 1e-12 {
        2.0 * params.beta * (params.kappa_star - target) / si
    } else {
        rng.gen_range(-10.0..10.0)
    };
    (theta, AdjointState::new(lambda_i + gap, lambda_i))
}

fn oracle(config: &CheckConfig) -> Result<(bool, String), CheckError> {
    let truth = config.payoff;
    let injected = config.injected();
    let solver = InnerSolver::for_kappa_star(truth.kappa_star);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (mut rate_err, mut kappa_err) = (0.0f64, 0.0f64);
    for _ in 0..config.oracle_states {
        let (theta, lambda) = random_nash_state(&mut rng, &truth);
        let psi = IndividualState::from(theta);
        let out = state_evolver(&injected, theta, lambda, &solver)?;
        let closed = kappa_opt_closed(theta, psi, lambda, &truth);
        let dpsi = dynamics(theta, psi, closed);
        let dlambda = adjoint_rhs(theta, psi, lambda, closed, &truth);
        for (a, b) in out
            .dpsi
            .iter()
            .chain(&out.dlambda)
            .zip(dpsi.iter().chain(&dlambda))
        {
            rate_err = rate_err.max((a - b).abs() / b.abs().max(1.0));
        }
        let sol = solve_kappa_opt(&injected, theta, psi, lambda, &solver)?;
        kappa_err = kappa_err
            .max((sol.kappa - closed).abs())
            .max((out.kappa_opt - closed).abs());
    }
    Ok((
        rate_err < ORACLE_RATE_TOL && kappa_err < ORACLE_KAPPA_TOL,
        format!(
            "{} states: max rate error {rate_err:.2e} (tol {ORACLE_RATE_TOL:.0e}), \
             max kappa error {kappa_err:.2e} (tol {ORACLE_KAPPA_TOL:.0e})",
            config.oracle_states
        ),
    ))
}

fn check_net(seed: u64) -> Result<NetworkParams, CheckError> {
    Ok(init_params(&NetworkConfig {
        hidden_layers: 2,
        hidden_width: 16,
        seed,
        ..NetworkConfig::default()
    })?)
}

fn max_gauge_deviation<P: Payoff>(
    shifted: &GaugeShifted<&P>,
    reference: &GaugeShifted<&P>,
    rng: &mut ChaCha8Rng,
    params: &PayoffParams,
    n: usize,
) -> Result<f64, CheckError> {
    let solver = InnerSolver::for_kappa_star(params.kappa_star);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let (theta, lambda) = random_nash_state(rng, params);
        let a = state_evolver(shifted, theta, lambda, &solver)?;
        let b = state_evolver(reference, theta, lambda, &solver)?;
        let xs = [
            a.kappa_opt,
            a.dpsi[0],
            a.dpsi[1],
            a.dlambda[0],
            a.dlambda[1],
        ];
        let ys = [
            b.kappa_opt,
            b.dpsi[0],
            b.dpsi[1],
            b.dlambda[0],
            b.dlambda[1],
        ];
        for (x, y) in xs.iter().zip(&ys) {
            worst = worst.max((x - y).abs() / y.abs().max(1.0));
        }
    }
    Ok(worst)
}

fn gauge(config: &CheckConfig) -> Result<(bool, String), CheckError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9a);
    let truth = config.injected();
    let net = check_net(config.seed)?;
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let coeffs = [
            rng.gen_range(-100.0..100.0),
            rng.gen_range(-100.0..100.0),
            rng.gen_range(-100.0..100.0),
        ];
        let gt_shift = GaugeShifted {
            inner: &truth,
            coeffs,
        };
        let gt_ref = GaugeShifted {
            inner: &truth,
            coeffs: [0.0; 3],
        };
        worst = worst.max(max_gauge_deviation(
            &gt_shift,
            &gt_ref,
            &mut rng,
            &config.payoff,
            100,
        )?);
        let net_shift = GaugeShifted {
            inner: &net,
            coeffs,
        };
        let net_ref = GaugeShifted {
            inner: &net,
            coeffs: [0.0; 3],
        };
        worst = worst.max(max_gauge_deviation(
            &net_shift,
            &net_ref,
            &mut rng,
            &config.payoff,
            100,
        )?);
    }
    Ok((
        worst <= GAUGE_TOL,
        format!("max relative change of kappa_opt, dpsi, dlambda under g(theta): {worst:.2e}"),
    ))
}

fn hamiltonian(config: &CheckConfig) -> Result<(bool, String), CheckError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x4a);
    let truth = config.injected();
    let net = check_net(config.seed)?;
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (theta, lambda) = random_nash_state(&mut rng, &config.payoff);
        let state = AugmentedState {
            psi: IndividualState::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..0.5)),
            kappa: rng.gen_range(0.0..2.0 * config.payoff.kappa_star),
            lambda,
        };
        worst = worst
            .max(hamiltonian_check(&truth, &state, theta))
            .max(hamiltonian_check(&net, &state, theta));
    }
    Ok((
        worst < HAMILTONIAN_TOL,
        format!("max |H + L'| over 1000 states: {worst:.2e} (tol {HAMILTONIAN_TOL:.0e})"),
    ))
}

fn nash(config: &CheckConfig) -> Result<(bool, String), CheckError> {
    let sweep = forward_backward_sweep(&config.payoff, &config.solver)?;
    let report = verify_nash(
        &sweep.trajectory,
        &config.injected(),
        config.solver.terminal_condition,
        config.nash_perturbations,
        config.nash_magnitude,
        config.seed,
    )?;
    Ok((
        report.passed(),
        format!(
            "{} deviations of size {}: best gain {:.3e} vs allowance {:.3e} (U_nash {:.4})",
            report.evaluated,
            config.nash_magnitude,
            report.max_gain,
            report.tolerance,
            report.u_nash
        ),
    ))
}

/// Nash points at which `net`'s L′ has a regular maximum at a known κ.
fn rooted_points(
    net: &NetworkParams,
    n: usize,
    rng: &mut ChaCha8Rng,
    kappa_star: f64,
) -> Result<Vec<DataPoint>, CheckError> {
    let solver = InnerSolver::for_kappa_star(kappa_star);
    let mut out = Vec::new();
    for _ in 0..100 * n {
        if out.len() == n {
            break;
        }
        let theta = PopulationState::new(rng.gen_range(0.2..0.8), rng.gen_range(0.05..0.2));
        let kappa = rng.gen_range(0.1..1.9) * kappa_star;
        let jet = net.kappa_jets(&[PayoffQuery {
            theta: theta.as_array(),
            psi: theta.as_array(),
            kappa,
        }])[0];
        if jet[2] > -1e-3 {
            continue;
        }
        let lambda_i = rng.gen_range(-5.0..0.0);
        let lambda = AdjointState::new(lambda_i + jet[1] / (theta.s * theta.i), lambda_i);
        let sol = solve_kappa_opt(net, theta, theta.into(), lambda, &solver)?;
        if sol.degenerate || (sol.kappa - kappa).abs() > 1e-6 {
            continue;
        }
        out.push(DataPoint {
            time: 0.0,
            theta,
            lambda,
            kappa_opt: kappa + rng.gen_range(-0.5..0.5),
            dlambda: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
            split: Split::Train,
        });
    }
    Ok(out)
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn gradient(config: &CheckConfig) -> Result<(bool, String), CheckError> {
    let ks = config.payoff.kappa_star;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6d);
    let mut found = None;
    for offset in 0..20 {
        let net = check_net(config.seed + offset)?;
        let points = rooted_points(&net, 8, &mut rng, ks)?;
        if points.len() == 8 {
            found = Some((net, points));
            break;
        }
    }
    let Some((net, points)) = found else {
        return Ok((false, "no network with enough regular maxima".into()));
    };
    let h = 1e-6;
    let fine = InnerSolver {
        tol: 1e-14,
        ..InnerSolver::for_kappa_star(ks)
    };
    let nudged = |c: usize, d: f64| -> Result<NetworkParams, CheckError> {
        let mut v = net.values().to_vec();
        v[c] += d;
        Ok(net.with_values(v)?)
    };

    let mut implicit_worst = 0.0f64;
    for p in points.iter().take(4) {
        let sol = solve_kappa_opt(&net, p.theta, p.theta.into(), p.lambda, &fine)?;
        let grad = implicit_grad_kappa(&net, p.theta, p.theta.into(), p.lambda, sol.kappa)?;
        let warm = fine.with_guess(sol.kappa);
        for _ in 0..10 {
            let c = rng.gen_range(0..net.len());
            let solve = |d: f64| -> Result<f64, CheckError> {
                Ok(
                    solve_kappa_opt(&nudged(c, d)?, p.theta, p.theta.into(), p.lambda, &warm)?
                        .kappa,
                )
            };
            let fd = (solve(h)? - solve(-h)?) / (2.0 * h);
            implicit_worst = implicit_worst.max(rel_err(grad[c], fd, 1e-2));
        }
    }

    let mut loss_worst = 0.0f64;
    let solver = InnerSolver::for_kappa_star(ks);
    for kind in [LossKind::Kappa, LossKind::KappaLambda] {
        let mut guesses = vec![ks; points.len()];
        let (_, grad) = loss_and_gradient(&net, &points, kind, &solver, &mut guesses)?;
        for _ in 0..10 {
            let c = rng.gen_range(0..net.len());
            let loss = |d: f64| -> Result<f64, CheckError> {
                Ok(loss_breakdown(&nudged(c, d)?, &points, kind, &fine)?.total())
            };
            let fd = (loss(h)? - loss(-h)?) / (2.0 * h);
            loss_worst = loss_worst.max(rel_err(grad[c], fd, 1e-2));
        }
    }
    Ok((
        implicit_worst < GRADIENT_RTOL && loss_worst < GRADIENT_RTOL,
        format!(
            "implicit dkappa/dparams vs finite differences: {implicit_worst:.2e}; \
             loss gradients: {loss_worst:.2e} (tol {GRADIENT_RTOL:.0e})"
        ),
    ))
}

fn determinism(config: &CheckConfig) -> Result<(bool, String), CheckError> {
    let solver_cfg = SolverConfig {
        t_final: 60.0,
        i0: 1e-4,
        ..config.solver.clone()
    };
    let a = forward_backward_sweep(&config.payoff, &solver_cfg)?;
    let b = forward_backward_sweep(&config.payoff, &solver_cfg)?;
    let sweep_same = a.trajectory == b.trajectory && a.sweeps == b.sweeps;

    let source = DlambdaSource::Analytic(config.payoff);
    let data = prepare_dataset(&a.trajectory, 20, 0.2, 1e-3, config.seed, source)?;
    let data_same = data == prepare_dataset(&b.trajectory, 20, 0.2, 1e-3, config.seed, source)?;

    let init = check_net(config.seed)?;
    let train_cfg = TrainConfig {
        n_steps: 20,
        checkpoint_every: 5,
        ..TrainConfig::default()
    };
    let inner = InnerSolver::for_kappa_star(config.payoff.kappa_star);
    let run = || train(&init, &data, &train_cfg, &inner);
    let (x, y) = (run()?, run()?);
    let bits = |o: &crate::training::TrainOutcome| -> Vec<u64> {
        o.params
            .values()
            .iter()
            .chain(o.history.iter().flat_map(|r| [&r.train_loss, &r.test_loss]))
            .map(|v| v.to_bits())
            .collect()
    };
    let train_same = bits(&x) == bits(&y);
    Ok((
        sweep_same && data_same && train_same,
        format!("sweep {sweep_same}, dataset {data_same}, 20 training steps {train_same}"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> CheckConfig {
        CheckConfig {
            oracle_states: 300,
            ..CheckConfig::default()
        }
    }

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.as_str().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn cheap_suites_pass() {
        for s in [Suite::Oracle, Suite::Gauge, Suite::Hamiltonian] {
            let out = run_suite(s, &quick()).unwrap();
            assert!(out.passed, "{out}");
        }
    }

    #[test]
    fn gradient_suite_passes() {
        let out = run_suite(Suite::Gradient, &quick()).unwrap();
        assert!(out.passed, "{out}");
    }

    #[test]
    fn injected_alpha0_breaks_the_oracle() {
        let cfg = CheckConfig {
            inject_alpha0: 1e-3,
            ..quick()
        };
        let out = run_suite(Suite::Oracle, &cfg).unwrap();
        assert!(!out.passed, "{out}");
    }
}
