//! Nash neural network assembly.
//!
//! Combines a payoff V with the known SIR dynamics F into the auxiliary
//! function L′ = V + λ·F, differentiates it for the optimality condition
//! ∂_κL′ = 0 and the adjoint rates λ̇ = −∂_ψL′, solves the optimality
//! condition self-consistently for κ_opt, and differentiates κ_opt with
//! respect to payoff parameters through the implicit function theorem.

use thiserror::Error;

use crate::autodiff::{
    derive1, derive2, param_gradient, AutodiffError, Dual, Scalar, ScalarFn, Var,
};
use crate::payoff_net::{ParametricPayoff, Payoff, PayoffQuery};
use crate::sir_game::{dynamics, dynamics_generic, AdjointState, IndividualState, PopulationState};

/// Curvature below which ∂²_κκL′ is treated as flat.
pub const FLAT_CURVATURE: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum N3Error {
    #[error("inner solver bounds must satisfy lo < hi, got [{lo}, {hi}]")]
    InvalidBounds { lo: f64, hi: f64 },
    #[error("inner solve did not converge in {iterations} evaluations (kappa = {kappa}, residual = {residual:e})")]
    MaxIterExceeded {
        kappa: f64,
        residual: f64,
        iterations: usize,
    },
    #[error("optimality condition is flat at kappa = {kappa} (curvature {curvature:e})")]
    DegenerateCurvature { kappa: f64, curvature: f64 },
    #[error("non-finite payoff derivative at kappa = {0}")]
    NonFinite(f64),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Generalized coordinates q = (ψ, κ, λ).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentedState {
    pub psi: IndividualState,
    pub kappa: f64,
    pub lambda: AdjointState,
}

impl AugmentedState {
    /// Momenta conjugate to ψ: p_ψ = −λ.
    pub fn momenta(&self) -> [f64; 2] {
        [-self.lambda.lambda_s, -self.lambda.lambda_i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvolverOutput {
    pub dpsi: [f64; 2],
    pub dlambda: [f64; 2],
    pub kappa_opt: f64,
    /// ∂_κL′ at the returned κ_opt.
    pub residual: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerSolver {
    pub tol: f64,
    pub max_iter: usize,
    pub bounds: (f64, f64),
    pub initial_guess: f64,
    /// Uniform sub-intervals of the bounds searched for maximizing roots
    /// when Newton from the guess fails.
    pub scan_intervals: usize,
}

impl InnerSolver {
    /// Bounds [0, 2κ*], first guess κ*.
    pub fn for_kappa_star(kappa_star: f64) -> Self {
        InnerSolver {
            tol: 1e-10,
            max_iter: 100,
            bounds: (0.0, 2.0 * kappa_star),
            initial_guess: kappa_star,
            scan_intervals: 32,
        }
    }

    pub fn with_guess(mut self, guess: f64) -> Self {
        self.initial_guess = guess;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KappaSolution {
    pub kappa: f64,
    pub residual: f64,
    /// No maximizing root inside the bounds; `kappa` is the bound with
    /// smaller |∂_κL′|.
    pub degenerate: bool,
    pub evaluations: usize,
}

/// State at which the network is evaluated: population θ, individual ψ,
/// adjoint λ. At the Nash equilibrium ψ = θ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GamePoint {
    pub theta: PopulationState,
    pub psi: IndividualState,
    pub lambda: AdjointState,
}

impl GamePoint {
    pub fn nash(theta: PopulationState, lambda: AdjointState) -> Self {
        GamePoint {
            theta,
            psi: theta.into(),
            lambda,
        }
    }

    fn query(&self, kappa: f64) -> PayoffQuery {
        PayoffQuery {
            theta: self.theta.as_array(),
            psi: self.psi.as_array(),
            kappa,
        }
    }

    /// λ·∂_κF; F is linear in κ so this is also the whole κ-dependence of λ·F.
    pub fn constraint_kappa_slope(&self) -> f64 {
        self.psi.psi_s * self.theta.i * (self.lambda.lambda_i - self.lambda.lambda_s)
    }
}

/// L′ = V + λ·F at any scalar type.
pub fn l_prime_generic<T: Scalar, P: Payoff + ?Sized>(
    payoff: &P,
    theta: [T; 2],
    psi: [T; 2],
    kappa: T,
    lambda: [T; 2],
) -> T {
    let f = dynamics_generic(theta, psi, kappa);
    payoff.value(theta, psi, kappa) + lambda[0] * f[0] + lambda[1] * f[1]
}

pub fn l_prime<P: Payoff + ?Sized>(
    payoff: &P,
    theta: PopulationState,
    psi: IndividualState,
    kappa: f64,
    lambda: AdjointState,
) -> f64 {
    l_prime_generic(
        payoff,
        theta.as_array(),
        psi.as_array(),
        kappa,
        lambda.as_array(),
    )
}

#[derive(Debug, Clone, Copy)]
enum Coord {
    Kappa,
    Psi(usize),
}

/// L′ as a function of a single coordinate, the rest held fixed.
struct LPrimeSlice<'a, P: ?Sized> {
    payoff: &'a P,
    point: GamePoint,
    kappa: f64,
    coord: Coord,
}

impl<P: Payoff + ?Sized> ScalarFn for LPrimeSlice<'_, P> {
    fn eval<T: Scalar>(&self, x: T) -> T {
        let c = T::constant;
        let theta = self.point.theta.as_array().map(c);
        let mut psi = self.point.psi.as_array().map(c);
        let mut kappa = c(self.kappa);
        match self.coord {
            Coord::Kappa => kappa = x,
            Coord::Psi(d) => psi[d] = x,
        }
        l_prime_generic(
            self.payoff,
            theta,
            psi,
            kappa,
            self.point.lambda.as_array().map(c),
        )
    }
}

/// Optimality condition ∂_κL′.
pub fn d_kappa_lprime<P: Payoff + ?Sized>(
    payoff: &P,
    theta: PopulationState,
    psi: IndividualState,
    kappa: f64,
    lambda: AdjointState,
) -> Result<f64, N3Error> {
    let slice = LPrimeSlice {
        payoff,
        point: GamePoint { theta, psi, lambda },
        kappa,
        coord: Coord::Kappa,
    };
    Ok(derive1(&slice, kappa)?)
}

/// ∂²_κκL′.
pub fn d2_kappa_lprime<P: Payoff + ?Sized>(
    payoff: &P,
    theta: PopulationState,
    psi: IndividualState,
    kappa: f64,
    lambda: AdjointState,
) -> Result<f64, N3Error> {
    let slice = LPrimeSlice {
        payoff,
        point: GamePoint { theta, psi, lambda },
        kappa,
        coord: Coord::Kappa,
    };
    Ok(derive2(&slice, kappa)?)
}

/// (∂L′/∂ψ_s, ∂L′/∂ψ_i); the adjoint rates are the negation.
pub fn d_psi_lprime<P: Payoff + ?Sized>(
    payoff: &P,
    theta: PopulationState,
    psi: IndividualState,
    kappa: f64,
    lambda: AdjointState,
) -> Result<[f64; 2], N3Error> {
    let point = GamePoint { theta, psi, lambda };
    let mut out = [0.0; 2];
    for (d, o) in out.iter_mut().enumerate() {
        let slice = LPrimeSlice {
            payoff,
            point,
            kappa,
            coord: Coord::Psi(d),
        };
        *o = derive1(&slice, psi.as_array()[d])?;
    }
    Ok(out)
}

enum Phase {
    Newton { x: f64, steps: usize },
    Scan,
    Bracket { lo: f64, hi: f64, x: f64 },
    Done(KappaSolution),
}

fn scan_grid(solver: &InnerSolver) -> Vec<f64> {
    let (lo, hi) = solver.bounds;
    let m = solver.scan_intervals.max(1);
    (0..=m)
        .map(|k| {
            if k == m {
                hi
            } else {
                lo + (hi - lo) * k as f64 / m as f64
            }
        })
        .collect()
}

/// Solve ∂_κL′ = 0 for many points at once, looking for the κ that
/// maximizes L′ over the bounds.
///
/// Each point runs Newton from its guess and keeps the root if L′ is
/// concave there. Otherwise (an iterate leaves the bounds, the curvature is
/// flat, Newton stalls or lands on a minimum) ∂_κL′ is sampled on a uniform
/// grid over the bounds. Every downward sign change brackets a maximum of
/// L′; the bracket with the largest sampled L′ is refined by Newton
/// safeguarded with bisection. Without any such bracket the bound with the
/// smaller |∂_κL′| is returned flagged `degenerate`. Payoff derivatives for
/// all active points are requested together through [`Payoff::kappa_jets`].
pub fn solve_kappa_opt_batch<P: Payoff + ?Sized>(
    payoff: &P,
    points: &[GamePoint],
    solver: &InnerSolver,
    guesses: &[f64],
) -> Result<Vec<KappaSolution>, N3Error> {
    let (lo, hi) = solver.bounds;
    if !(lo < hi) {
        return Err(N3Error::InvalidBounds { lo, hi });
    }
    assert_eq!(points.len(), guesses.len(), "one guess per point");
    let newton_limit = (solver.max_iter / 4).max(1);
    let grid = scan_grid(solver);
    let mut phases: Vec<Phase> = guesses
        .iter()
        .map(|g| Phase::Newton {
            x: g.clamp(lo, hi),
            steps: 0,
        })
        .collect();
    let mut evals = vec![0usize; points.len()];
    let tol = solver.tol;

    loop {
        let mut queries = Vec::new();
        let mut owners = Vec::new();
        for (j, phase) in phases.iter().enumerate() {
            match phase {
                Phase::Newton { x, .. } | Phase::Bracket { x, .. } => {
                    queries.push(points[j].query(*x));
                    owners.push(j);
                }
                Phase::Scan => {
                    queries.extend(grid.iter().map(|&k| points[j].query(k)));
                    owners.extend(std::iter::repeat_n(j, grid.len()));
                }
                Phase::Done(_) => {}
            }
        }
        if queries.is_empty() {
            break;
        }
        let jets = payoff.kappa_jets(&queries);
        let mut q = 0;
        while q < owners.len() {
            let j = owners[q];
            let slope = points[j].constraint_kappa_slope();
            evals[j] += 1;
            let done = |kappa: f64, residual: f64, degenerate: bool, n: usize| {
                Phase::Done(KappaSolution {
                    kappa,
                    residual,
                    degenerate,
                    evaluations: n,
                })
            };
            let (g, gp) = (jets[q][1] + slope, jets[q][2]);
            let next = match phases[j] {
                Phase::Newton { x, steps } => {
                    if !(g.is_finite() && gp.is_finite()) {
                        return Err(N3Error::NonFinite(x));
                    }
                    if g.abs() <= tol && gp < 0.0 {
                        done(x, g, false, evals[j])
                    } else {
                        let step = x - g / gp;
                        if g.abs() <= tol
                            || gp.abs() < FLAT_CURVATURE
                            || !(lo..=hi).contains(&step)
                            || steps + 1 >= newton_limit
                        {
                            Phase::Scan
                        } else {
                            Phase::Newton {
                                x: step,
                                steps: steps + 1,
                            }
                        }
                    }
                }
                Phase::Scan => {
                    let rows = &jets[q..q + grid.len()];
                    q += grid.len() - 1;
                    let g: Vec<f64> = rows.iter().map(|r| r[1] + slope).collect();
                    if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                        return Err(N3Error::NonFinite(grid[bad]));
                    }
                    // L′ up to a κ-independent term
                    let l = |k: usize| rows[k][0] + grid[k] * slope;
                    let mut best: Option<(f64, usize)> = None;
                    for k in 0..grid.len() - 1 {
                        if g[k] > 0.0 && g[k + 1] <= 0.0 {
                            let value = l(k).max(l(k + 1));
                            if best.is_none_or(|(b, _)| value > b) {
                                best = Some((value, k));
                            }
                        }
                    }
                    match best {
                        Some((_, k)) if g[k + 1].abs() <= tol => {
                            done(grid[k + 1], g[k + 1], false, evals[j])
                        }
                        Some((_, k)) => Phase::Bracket {
                            lo: grid[k],
                            hi: grid[k + 1],
                            x: 0.5 * (grid[k] + grid[k + 1]),
                        },
                        None => {
                            let last = grid.len() - 1;
                            if g[0].abs() <= g[last].abs() {
                                done(lo, g[0], true, evals[j])
                            } else {
                                done(hi, g[last], true, evals[j])
                            }
                        }
                    }
                }
                Phase::Bracket { mut lo, mut hi, x } => {
                    if !(g.is_finite() && gp.is_finite()) {
                        return Err(N3Error::NonFinite(x));
                    }
                    if g.abs() <= tol {
                        done(x, g, false, evals[j])
                    } else if evals[j] >= solver.max_iter {
                        return Err(N3Error::MaxIterExceeded {
                            kappa: x,
                            residual: g,
                            iterations: evals[j],
                        });
                    } else {
                        // ∂_κL′ is positive at lo and negative at hi
                        if g > 0.0 {
                            lo = x;
                        } else {
                            hi = x;
                        }
                        let newton = x - g / gp;
                        let x = if gp != 0.0 && newton > lo && newton < hi {
                            newton
                        } else {
                            0.5 * (lo + hi)
                        };
                        Phase::Bracket { lo, hi, x }
                    }
                }
                Phase::Done(_) => unreachable!("done points are not queried"),
            };
            phases[j] = next;
            q += 1;
        }
    }
    Ok(phases
        .into_iter()
        .map(|p| match p {
            Phase::Done(s) => s,
            _ => unreachable!("loop exits when every point is done"),
        })
        .collect())
}

/// Self-consistent optimal control at one state.
pub fn solve_kappa_opt<P: Payoff + ?Sized>(
    payoff: &P,
    theta: PopulationState,
    psi: IndividualState,
    lambda: AdjointState,
    solver: &InnerSolver,
) -> Result<KappaSolution, N3Error> {
    let point = GamePoint { theta, psi, lambda };
    Ok(solve_kappa_opt_batch(payoff, &[point], solver, &[solver.initial_guess])?[0])
}

fn evolve_from_solution<P: Payoff + ?Sized>(
    payoff: &P,
    point: GamePoint,
    sol: KappaSolution,
) -> Result<EvolverOutput, N3Error> {
    let dpsi = dynamics(point.theta, point.psi, sol.kappa);
    let grad = d_psi_lprime(payoff, point.theta, point.psi, sol.kappa, point.lambda)?;
    Ok(EvolverOutput {
        dpsi,
        dlambda: [-grad[0], -grad[1]],
        kappa_opt: sol.kappa,
        residual: sol.residual,
        degenerate: sol.degenerate,
    })
}

/// Rates (ψ̇, λ̇) and κ_opt at the Nash point ψ = θ.
pub fn state_evolver<P: Payoff + ?Sized>(
    payoff: &P,
    theta: PopulationState,
    lambda: AdjointState,
    solver: &InnerSolver,
) -> Result<EvolverOutput, N3Error> {
    let point = GamePoint::nash(theta, lambda);
    let sol = solve_kappa_opt(payoff, point.theta, point.psi, lambda, solver)?;
    evolve_from_solution(payoff, point, sol)
}

/// Evolver over a sequence of states, each solve warm-started from the
/// previous κ_opt.
pub fn evolve_sequence<P: Payoff + ?Sized>(
    payoff: &P,
    states: &[(PopulationState, AdjointState)],
    solver: &InnerSolver,
) -> Result<Vec<EvolverOutput>, N3Error> {
    let mut guess = solver.initial_guess;
    states
        .iter()
        .map(|&(theta, lambda)| {
            let out = state_evolver(payoff, theta, lambda, &solver.with_guess(guess))?;
            if !out.degenerate {
                guess = out.kappa_opt;
            }
            Ok(out)
        })
        .collect()
}

/// dκ_opt/dparams = −(∂²_κκL′)⁻¹ ∂²_{κ,params}L′ at a solved point.
pub fn implicit_grad_kappa<P: ParametricPayoff>(
    payoff: &P,
    theta: PopulationState,
    psi: IndividualState,
    lambda: AdjointState,
    kappa_opt: f64,
) -> Result<Vec<f64>, N3Error> {
    let curvature = d2_kappa_lprime(payoff, theta, psi, kappa_opt, lambda)?;
    if curvature.abs() <= FLAT_CURVATURE {
        return Err(N3Error::DegenerateCurvature {
            kappa: kappa_opt,
            curvature,
        });
    }
    let mixed = param_gradient(
        |w: &[Var]| {
            let lifted: Vec<Dual<Var>> = w.iter().map(|&v| Dual::constant_of(v)).collect();
            let c = |x: f64| Dual::<Var>::constant(x);
            let theta_d = theta.as_array().map(c);
            let psi_d = psi.as_array().map(c);
            let kappa_d = Dual::variable(Var::constant(kappa_opt));
            let f = dynamics_generic(theta_d, psi_d, kappa_d);
            let l = payoff.value_with(&lifted, theta_d, psi_d, kappa_d)
                + c(lambda.lambda_s) * f[0]
                + c(lambda.lambda_i) * f[1];
            l.eps
        },
        &payoff.parameters(),
    )?;
    Ok(mixed.gradient.iter().map(|m| -m / curvature).collect())
}

/// H(q, p) = −(V − p_ψ·F) with p_ψ = −λ.
pub fn hamiltonian<P: Payoff + ?Sized>(
    payoff: &P,
    state: &AugmentedState,
    theta: PopulationState,
) -> f64 {
    let p = state.momenta();
    let f = dynamics(theta, state.psi, state.kappa);
    let v = payoff.value(theta.as_array(), state.psi.as_array(), state.kappa);
    -(v - (p[0] * f[0] + p[1] * f[1]))
}

/// |H + L′|, zero up to round-off.
pub fn hamiltonian_check<P: Payoff + ?Sized>(
    payoff: &P,
    state: &AugmentedState,
    theta: PopulationState,
) -> f64 {
    let h = hamiltonian(payoff, state, theta);
    let l = l_prime(payoff, theta, state.psi, state.kappa, state.lambda);
    (h + l).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::payoff_net::{init_params, NetworkConfig, NetworkParams};
    use crate::sir_game::{adjoint_rhs, kappa_opt_closed, payoff_true, PayoffParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gt() -> PayoffParams {
        PayoffParams::new(200.0, 1.0, 4.0).unwrap()
    }

    fn random_point(rng: &mut ChaCha8Rng) -> (PopulationState, IndividualState, AdjointState) {
        let s: f64 = rng.gen_range(0.05..1.0);
        let i = rng.gen_range(0.0..(1.0 - s).min(0.4));
        let theta = PopulationState::new(s, i);
        let psi = IndividualState::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..0.4));
        let lambda = AdjointState::new(rng.gen_range(-30.0..2.0), rng.gen_range(-200.0..0.0));
        (theta, psi, lambda)
    }

    fn small_net() -> NetworkParams {
        init_params(&NetworkConfig {
            hidden_layers: 2,
            hidden_width: 8,
            seed: 5,
            ..NetworkConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn l_prime_examples() {
        let zero = NetworkParams::zeros(&NetworkConfig::default()).unwrap();
        let th = PopulationState::new(0.5, 0.2);
        let l = l_prime(&zero, th, th.into(), 4.0, AdjointState::new(1.0, 2.0));
        assert!(l.abs() < 1e-15);
        let p = gt();
        let psi = IndividualState::new(0.4, 0.1);
        assert_eq!(
            l_prime(&p, th, psi, 3.3, AdjointState::new(0.0, 0.0)),
            payoff_true(th, psi, 3.3, &p)
        );
    }

    #[test]
    fn optimality_condition_ground_truth() {
        let p = gt();
        let th = PopulationState::new(0.5, 0.2);
        let eq = AdjointState::new(-7.0, -7.0);
        assert_eq!(d_kappa_lprime(&p, th, th.into(), 4.0, eq).unwrap(), 0.0);
        let psi = IndividualState::new(0.5, 0.2);
        let la = AdjointState::new(1.0, -1.0);
        let g = d_kappa_lprime(&p, th, psi, 3.9, la).unwrap();
        assert!(g.abs() < 1e-14, "{g}");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let (th, psi, la) = random_point(&mut rng);
            let k = rng.gen_range(0.0..8.0);
            assert_eq!(d2_kappa_lprime(&p, th, psi, k, la).unwrap(), -2.0);
            let want = -2.0 * (k - 4.0) - psi.psi_s * th.i * (la.lambda_s - la.lambda_i);
            let got = d_kappa_lprime(&p, th, psi, k, la).unwrap();
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn psi_gradient_reproduces_adjoint_rows() {
        let p = gt();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let (th, psi, la) = random_point(&mut rng);
            let k = rng.gen_range(0.0..8.0);
            let g = d_psi_lprime(&p, th, psi, k, la).unwrap();
            let rows = adjoint_rhs(th, psi, la, k, &p);
            assert!((-g[0] - rows[0]).abs() < 1e-12);
            assert!((-g[1] - rows[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn network_derivatives_match_finite_differences() {
        let net = small_net();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-5;
        for _ in 0..20 {
            let (th, psi, la) = random_point(&mut rng);
            let k = rng.gen_range(0.0..8.0);
            let gk = d_kappa_lprime(&net, th, psi, k, la).unwrap();
            let fd =
                (l_prime(&net, th, psi, k + h, la) - l_prime(&net, th, psi, k - h, la)) / (2.0 * h);
            assert!((gk - fd).abs() <= 1e-6 * gk.abs().max(1.0));
            let gp = d_psi_lprime(&net, th, psi, k, la).unwrap();
            for d in 0..2 {
                let mut up = psi.as_array();
                let mut dn = psi.as_array();
                up[d] += h;
                dn[d] -= h;
                let f = |a: [f64; 2]| l_prime(&net, th, IndividualState::new(a[0], a[1]), k, la);
                let fd = (f(up) - f(dn)) / (2.0 * h);
                assert!((gp[d] - fd).abs() <= 1e-6 * gp[d].abs().max(1.0));
            }
        }
    }

    #[test]
    fn solver_matches_closed_form_and_bisection() {
        let p = gt();
        let solver = InnerSolver::for_kappa_star(4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let (th, psi, _) = random_point(&mut rng);
            // keep the closed-form root inside the default bounds
            let target = rng.gen_range(0.2..7.8);
            let diff = if psi.psi_s * th.i > 1e-9 {
                2.0 * (4.0 - target) / (psi.psi_s * th.i)
            } else {
                0.0
            };
            let la = AdjointState::new(diff - 50.0, -50.0);
            let closed = kappa_opt_closed(th, psi, la, &p);
            let sol = solve_kappa_opt(&p, th, psi, la, &solver).unwrap();
            assert!(!sol.degenerate);
            assert!(
                (sol.kappa - closed).abs() < 1e-10,
                "{} vs {closed}",
                sol.kappa
            );

            // plain bisection oracle on [0, 2κ*]
            let g = |k: f64| -2.0 * (k - 4.0) - psi.psi_s * th.i * (la.lambda_s - la.lambda_i);
            let (mut a, mut b) = (0.0f64, 8.0f64);
            for _ in 0..200 {
                let m = 0.5 * (a + b);
                if (g(a) < 0.0) == (g(m) < 0.0) {
                    a = m
                } else {
                    b = m
                }
            }
            assert!((sol.kappa - 0.5 * (a + b)).abs() < 1e-8);
        }
    }

    #[test]
    fn healthy_population_gives_preferred_activity() {
        let p = gt();
        let th = PopulationState::new(0.9, 0.0);
        let la = AdjointState::new(0.5, -150.0);
        let out = state_evolver(&p, th, la, &InnerSolver::for_kappa_star(4.0)).unwrap();
        assert_eq!(out.kappa_opt, 4.0);
        assert_eq!(out.dpsi, [0.0, -0.0]);
    }

    #[test]
    fn flat_payoff_is_degenerate() {
        let zero = NetworkParams::zeros(&NetworkConfig::default()).unwrap();
        let th = PopulationState::new(0.5, 0.2);
        let la = AdjointState::new(3.0, -5.0);
        let sol =
            solve_kappa_opt(&zero, th, th.into(), la, &InnerSolver::for_kappa_star(4.0)).unwrap();
        assert!(sol.degenerate);
        assert!(sol.kappa == 0.0 || sol.kappa == 8.0);
        assert!(matches!(
            implicit_grad_kappa(&zero, th, th.into(), la, sol.kappa),
            Err(N3Error::DegenerateCurvature { .. })
        ));
    }

    #[test]
    fn invalid_bounds_rejected() {
        let mut s = InnerSolver::for_kappa_star(4.0);
        s.bounds = (3.0, 3.0);
        let th = PopulationState::new(0.5, 0.2);
        assert!(matches!(
            solve_kappa_opt(&gt(), th, th.into(), AdjointState::new(0.0, 0.0), &s),
            Err(N3Error::InvalidBounds { .. })
        ));
    }

    #[test]
    fn implicit_gradient_in_beta() {
        let p = PayoffParams::new(150.0, 1.7, 4.0).unwrap();
        let th = PopulationState::new(0.6, 0.15);
        let psi = IndividualState::new(0.55, 0.12);
        let la = AdjointState::new(-2.0, -60.0);
        let k = kappa_opt_closed(th, psi, la, &p);
        let g = implicit_grad_kappa(&p, th, psi, la, k).unwrap();
        let want_beta = psi.psi_s * th.i * (la.lambda_s - la.lambda_i) / (2.0 * p.beta * p.beta);
        assert!(g[0].abs() < 1e-15);
        assert!((g[1] - want_beta).abs() < 1e-12);
        assert!((g[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hamiltonian_identity() {
        let net = small_net();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let (th, psi, la) = random_point(&mut rng);
            let state = AugmentedState {
                psi,
                kappa: rng.gen_range(0.0..8.0),
                lambda: la,
            };
            assert!(hamiltonian_check(&net, &state, th) < 1e-12);
            assert!(hamiltonian_check(&gt(), &state, th) < 1e-12);
        }
        let state = AugmentedState {
            psi: IndividualState::new(0.3, 0.2),
            kappa: 2.0,
            lambda: AdjointState::new(0.0, 0.0),
        };
        let th = PopulationState::new(0.3, 0.2);
        let v = gt().value(th.as_array(), state.psi.as_array(), 2.0);
        assert_eq!(hamiltonian(&gt(), &state, th), -v);
    }
}
