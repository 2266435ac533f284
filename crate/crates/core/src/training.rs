//! Datasets, loss functions, ADAM and the full-batch training loop.
//!
//! Both losses solve the optimality condition for κ_opt at every data point
//! with the network in the loop. The parameter gradient of such a nested
//! solve follows from the implicit function theorem: at a regular root
//! dκ/dp = −∂_p V_κ / V_κκ. [`loss_and_gradient`] evaluates the payoff jets
//! for the whole batch at once and backpropagates the resulting
//! per-point coefficients in a single pass.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::n3::{d_psi_lprime, solve_kappa_opt_batch, GamePoint, InnerSolver, N3Error};
use crate::payoff_net::{channel, JetSpec, NetError, NetworkParams, Payoff, PayoffQuery};
use crate::sir_game::{
    adjoint_rhs, kappa_opt_closed, AdjointState, NashTrajectory, PayoffParams, PopulationState,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("need {requested} points with i >= {i_min}, trajectory has {available}")]
    InsufficientData {
        requested: usize,
        available: usize,
        i_min: f64,
    },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("loss became non-finite at step {step} ({value})")]
    NonFiniteLoss { step: usize, value: f64 },
    #[error(transparent)]
    Solver(#[from] N3Error),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataPoint {
    pub time: f64,
    pub theta: PopulationState,
    pub lambda: AdjointState,
    pub kappa_opt: f64,
    pub dlambda: [f64; 2],
    pub split: Split,
}

impl DataPoint {
    pub fn game_point(&self) -> GamePoint {
        GamePoint::nash(self.theta, self.lambda)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub points: Vec<DataPoint>,
}

impl Dataset {
    pub fn subset(&self, split: Split) -> Vec<DataPoint> {
        self.points
            .iter()
            .filter(|p| p.split == split)
            .copied()
            .collect()
    }

    pub fn train(&self) -> Vec<DataPoint> {
        self.subset(Split::Train)
    }

    pub fn test(&self) -> Vec<DataPoint> {
        self.subset(Split::Test)
    }
}

/// Where the target adjoint rates come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DlambdaSource {
    /// Label with the generating payoff: κ_opt from its closed form and λ̇
    /// from its adjoint equation, both at the stored (θ, λ).
    Analytic(PayoffParams),
    /// Central differences of λ(t) on the trajectory grid.
    FiniteDifference,
}

/// Pick `n_points` evenly spaced (in grid index) from the part of the
/// trajectory with i ≥ `i_min`, then tag a seeded random `test_fraction`
/// of them as test points.
pub fn prepare_dataset(
    traj: &NashTrajectory,
    n_points: usize,
    test_fraction: f64,
    i_min: f64,
    seed: u64,
    source: DlambdaSource,
) -> Result<Dataset, TrainError> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(TrainError::InvalidConfig(format!(
            "test_fraction must lie in [0, 1), got {test_fraction}"
        )));
    }
    let eligible: Vec<usize> = (0..traj.len())
        .filter(|&k| traj.states[k].i >= i_min)
        .collect();
    if n_points == 0 || eligible.len() < n_points {
        return Err(TrainError::InsufficientData {
            requested: n_points,
            available: eligible.len(),
            i_min,
        });
    }
    let m = eligible.len();
    let picks: Vec<usize> = if n_points == 1 {
        vec![eligible[m / 2]]
    } else {
        (0..n_points)
            .map(|k| eligible[((k * (m - 1)) as f64 / (n_points - 1) as f64).round() as usize])
            .collect()
    };

    let n_test = (test_fraction * n_points as f64).round() as usize;
    let mut order: Vec<usize> = (0..n_points).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut split = vec![Split::Train; n_points];
    for &k in &order[..n_test] {
        split[k] = Split::Test;
    }

    let points = picks
        .iter()
        .zip(split)
        .map(|(&k, split)| {
            let theta = traj.states[k];
            let lambda = traj.adjoints[k];
            let (kappa, dlambda) = match source {
                DlambdaSource::Analytic(p) => {
                    let kappa = kappa_opt_closed(theta, theta.into(), lambda, &p);
                    (kappa, adjoint_rhs(theta, theta.into(), lambda, kappa, &p))
                }
                DlambdaSource::FiniteDifference => {
                    (traj.controls[k], finite_difference_dlambda(traj, k))
                }
            };
            DataPoint {
                time: traj.times[k],
                theta,
                lambda,
                kappa_opt: kappa,
                dlambda,
                split,
            }
        })
        .collect();
    Ok(Dataset { points })
}

fn finite_difference_dlambda(traj: &NashTrajectory, k: usize) -> [f64; 2] {
    let n = traj.len();
    let (a, b) = match k {
        0 => (0, 1),
        k if k + 1 == n => (k - 1, k),
        k => (k - 1, k + 1),
    };
    let dt = traj.times[b] - traj.times[a];
    let la = traj.adjoints[a].as_array();
    let lb = traj.adjoints[b].as_array();
    [(lb[0] - la[0]) / dt, (lb[1] - la[1]) / dt]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Optimal control only.
    Kappa,
    /// Optimal control plus adjoint rates.
    KappaLambda,
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "kappa" => Ok(LossKind::Kappa),
            "kappa-lambda" | "kappa_lambda" => Ok(LossKind::KappaLambda),
            other => Err(format!(
                "unknown loss '{other}' (expected kappa or kappa-lambda)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub step_size: f64,
    pub b1: f64,
    pub b2: f64,
    pub eps_adam: f64,
    pub n_steps: usize,
    pub loss_kind: LossKind,
    /// Seed of the train/test split.
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            step_size: 5e-5,
            b1: 0.9,
            b2: 0.999,
            eps_adam: 1e-8,
            n_steps: 30_000,
            loss_kind: LossKind::Kappa,
            seed: 7,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.step_size > 0.0) {
            return bad(format!(
                "step_size must be positive, got {}",
                self.step_size
            ));
        }
        for (name, b) in [("b1", self.b1), ("b2", self.b2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.eps_adam >= 0.0) {
            return bad(format!(
                "eps_adam must be non-negative, got {}",
                self.eps_adam
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

fn adam_update(values: &mut [f64], grad: &[f64], state: &mut AdamState, config: &TrainConfig) {
    assert_eq!(values.len(), grad.len(), "gradient length");
    assert_eq!(state.m.len(), grad.len(), "optimizer state length");
    state.t += 1;
    let c1 = 1.0 - config.b1.powi(state.t as i32);
    let c2 = 1.0 - config.b2.powi(state.t as i32);
    for ((p, &g), (m, v)) in values
        .iter_mut()
        .zip(grad)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = config.b1 * *m + (1.0 - config.b1) * g;
        *v = config.b2 * *v + (1.0 - config.b2) * g * g;
        *p -= config.step_size * (*m / c1) / ((*v / c2).sqrt() + config.eps_adam);
    }
}

/// One bias-corrected ADAM update.
pub fn adam_step(
    params: &[f64],
    grad: &[f64],
    state: &AdamState,
    config: &TrainConfig,
) -> (Vec<f64>, AdamState) {
    let mut values = params.to_vec();
    let mut state = state.clone();
    adam_update(&mut values, grad, &mut state, config);
    (values, state)
}

/// Loss split into its sums of squares.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub kappa: f64,
    pub residual: f64,
    pub dlambda: f64,
    /// Points where no root was found inside the bounds.
    pub degenerate: usize,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.kappa + self.residual + self.dlambda
    }
}

/// Value of the chosen loss for any payoff, solving from `solver.initial_guess`.
pub fn loss_breakdown<P: Payoff + ?Sized>(
    payoff: &P,
    points: &[DataPoint],
    kind: LossKind,
    solver: &InnerSolver,
) -> Result<LossBreakdown, TrainError> {
    let game: Vec<GamePoint> = points.iter().map(DataPoint::game_point).collect();
    let guesses = vec![solver.initial_guess; points.len()];
    let sols = solve_kappa_opt_batch(payoff, &game, solver, &guesses)?;
    let mut out = LossBreakdown::default();
    for (p, sol) in points.iter().zip(&sols) {
        out.kappa += (sol.kappa - p.kappa_opt).powi(2);
        out.residual += sol.residual * sol.residual;
        out.degenerate += sol.degenerate as usize;
        if kind == LossKind::KappaLambda {
            let g = d_psi_lprime(payoff, p.theta, p.theta.into(), sol.kappa, p.lambda)?;
            out.dlambda += (-g[0] - p.dlambda[0]).powi(2) + (-g[1] - p.dlambda[1]).powi(2);
        }
    }
    Ok(out)
}

/// Σ(κ_nn − κ_data)² + Σ(∂_κL′)².
pub fn loss_kappa<P: Payoff + ?Sized>(
    payoff: &P,
    points: &[DataPoint],
    solver: &InnerSolver,
) -> Result<f64, TrainError> {
    Ok(loss_breakdown(payoff, points, LossKind::Kappa, solver)?.total())
}

/// [`loss_kappa`] plus Σ|λ̇_nn − λ̇_data|².
pub fn loss_kappa_lambda<P: Payoff + ?Sized>(
    payoff: &P,
    points: &[DataPoint],
    solver: &InnerSolver,
) -> Result<f64, TrainError> {
    Ok(loss_breakdown(payoff, points, LossKind::KappaLambda, solver)?.total())
}

/// Loss and parameter gradient for a network payoff.
///
/// `guesses` holds one warm start per point and is overwritten with the
/// solved controls.
pub fn loss_and_gradient(
    net: &NetworkParams,
    points: &[DataPoint],
    kind: LossKind,
    solver: &InnerSolver,
    guesses: &mut [f64],
) -> Result<(LossBreakdown, Vec<f64>), TrainError> {
    evaluate(net, points, kind, solver, guesses, true).map(|(l, g)| (l, g.expect("requested")))
}

fn evaluate(
    net: &NetworkParams,
    points: &[DataPoint],
    kind: LossKind,
    solver: &InnerSolver,
    guesses: &mut [f64],
    with_gradient: bool,
) -> Result<(LossBreakdown, Option<Vec<f64>>), TrainError> {
    let game: Vec<GamePoint> = points.iter().map(DataPoint::game_point).collect();
    let sols = solve_kappa_opt_batch(net, &game, solver, guesses)?;
    let queries: Vec<PayoffQuery> = points
        .iter()
        .zip(&sols)
        .map(|(p, sol)| PayoffQuery {
            theta: p.theta.as_array(),
            psi: p.theta.as_array(),
            kappa: sol.kappa,
        })
        .collect();
    let spec = match kind {
        LossKind::Kappa => JetSpec::kappa_only(),
        LossKind::KappaLambda => JetSpec::full(),
    };
    let jets = net.jet_forward(&queries, &spec);
    let kk_channel = match kind {
        LossKind::Kappa => 2,
        LossKind::KappaLambda => channel::KAPPA_KAPPA,
    };

    let mut loss = LossBreakdown::default();
    let mut coeffs = Vec::with_capacity(points.len());
    for (j, (p, sol)) in points.iter().zip(&sols).enumerate() {
        guesses[j] = sol.kappa;
        let gp = game[j];
        let v_k = jets.output(channel::KAPPA, j);
        let v_kk = jets.output(kk_channel, j);
        let r = v_k + gp.constraint_kappa_slope();
        let e_k = sol.kappa - p.kappa_opt;
        loss.kappa += e_k * e_k;
        loss.residual += r * r;
        loss.degenerate += sol.degenerate as usize;
        // dκ/dp = k · ∂_p V_κ
        let k = if sol.degenerate || v_kk.abs() <= crate::n3::FLAT_CURVATURE {
            0.0
        } else {
            -1.0 / v_kk
        };
        let mut dk_coeff = 2.0 * e_k + 2.0 * r * v_kk;
        let mut row = vec![0.0; spec.first.len() + 1];
        if kind == LossKind::KappaLambda {
            let i = p.theta.i;
            let diff = p.lambda.lambda_s - p.lambda.lambda_i;
            let dl_s = -jets.output(channel::PSI_S, j) + sol.kappa * i * diff;
            let dl_i = -jets.output(channel::PSI_I, j) + p.lambda.lambda_i;
            let e_s = dl_s - p.dlambda[0];
            let e_i = dl_i - p.dlambda[1];
            loss.dlambda += e_s * e_s + e_i * e_i;
            dk_coeff += 2.0 * e_s * (i * diff - jets.output(channel::KAPPA_PSI_S, j))
                - 2.0 * e_i * jets.output(channel::KAPPA_PSI_I, j);
            row[channel::PSI_S] = -2.0 * e_s;
            row[channel::PSI_I] = -2.0 * e_i;
        }
        row[channel::KAPPA] = dk_coeff * k + 2.0 * r;
        coeffs.push(row);
    }
    let grad = with_gradient.then(|| jets.backward(&coeffs));
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub train_loss: f64,
    pub test_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub history: Vec<HistoryRow>,
}

/// Full-batch ADAM on the chosen loss.
pub fn train(
    init: &NetworkParams,
    data: &Dataset,
    config: &TrainConfig,
    solver: &InnerSolver,
) -> Result<TrainOutcome, TrainError> {
    train_with_observer(init, data, config, solver, |_, _| {})
}

/// [`train`], calling `observer` with the parameters at every recorded step
/// (step 0, every `checkpoint_every` steps, and the final step).
pub fn train_with_observer<F>(
    init: &NetworkParams,
    data: &Dataset,
    config: &TrainConfig,
    solver: &InnerSolver,
    mut observer: F,
) -> Result<TrainOutcome, TrainError>
where
    F: FnMut(&HistoryRow, &NetworkParams),
{
    config.validate()?;
    let train_pts = data.train();
    let test_pts = data.test();
    let mut train_guess = vec![solver.initial_guess; train_pts.len()];
    let mut test_guess = vec![solver.initial_guess; test_pts.len()];
    let mut params = init.clone();
    let mut adam = AdamState::new(params.len());
    let mut history = Vec::new();

    let finite = |step: usize, value: f64| {
        if value.is_finite() {
            Ok(value)
        } else {
            Err(TrainError::NonFiniteLoss { step, value })
        }
    };
    let mut record = |step: usize,
                      train_loss: f64,
                      params: &NetworkParams,
                      test_guess: &mut Vec<f64>|
     -> Result<(), TrainError> {
        let (test, _) = evaluate(
            params,
            &test_pts,
            config.loss_kind,
            solver,
            test_guess,
            false,
        )?;
        let row = HistoryRow {
            step,
            train_loss,
            test_loss: finite(step, test.total())?,
        };
        observer(&row, params);
        history.push(row);
        Ok(())
    };

    let mut values = params.values().to_vec();
    for step in 0..config.n_steps {
        let (loss, grad) = loss_and_gradient(
            &params,
            &train_pts,
            config.loss_kind,
            solver,
            &mut train_guess,
        )?;
        let total = finite(step, loss.total())?;
        if step == 0 || (config.checkpoint_every > 0 && step % config.checkpoint_every == 0) {
            record(step, total, &params, &mut test_guess)?;
        }
        if let Some(bad) = grad.iter().find(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteLoss { step, value: *bad });
        }
        adam_update(&mut values, &grad, &mut adam, config);
        params = params.with_values(values.clone())?;
    }
    let (loss, _) = evaluate(
        &params,
        &train_pts,
        config.loss_kind,
        solver,
        &mut train_guess,
        false,
    )?;
    let total = finite(config.n_steps, loss.total())?;
    record(config.n_steps, total, &params, &mut test_guess)?;
    Ok(TrainOutcome { params, history })
}
