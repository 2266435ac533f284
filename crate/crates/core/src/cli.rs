//! `nashnet simulate | train | eval | check`.
//!
//! Settings come from an optional TOML file (`--config`) and are then
//! overridden by flags. Exit codes: 0 on success, 1 when a solver fails to
//! converge or a property check fails, 2 for usage and I/O errors.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checks::{run_checks, CheckConfig, CheckError, Suite};
use crate::eval_report::{
    dstate_rows, export_dstate, export_payoff_kappa, export_payoff_state, export_trajectory,
    kappa_grid, recovery_report, scan_kappa, scan_state, EvalError, FigureKind, RecoveryReport,
};
use crate::n3::{InnerSolver, N3Error};
use crate::payoff_net::{init_params, Checkpoint, CheckpointPayoff, NetError, NetworkConfig};
use crate::sir_game::{
    forward_backward_sweep, read_trajectory_csv, GameError, NashTrajectory, PayoffParams,
    SolverConfig, TerminalCondition,
};
use crate::training::{
    prepare_dataset, train_with_observer, Dataset, DlambdaSource, LossKind, TrainConfig, TrainError,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error("{0} check(s) failed")]
    ChecksFailed(usize),
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Solver(#[from] N3Error),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Check(#[from] CheckError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } | CliError::Parse { .. } | CliError::Config(_) => 2,
            CliError::Game(
                GameError::InvalidPayoff(_)
                | GameError::InvalidConfig(_)
                | GameError::Csv(_)
                | GameError::Io(_),
            ) => 2,
            CliError::Train(TrainError::InvalidConfig(_) | TrainError::InsufficientData { .. }) => {
                2
            }
            CliError::Net(
                NetError::InvalidConfig(_) | NetError::Checkpoint(_) | NetError::Io(_),
            ) => 2,
            CliError::Eval(EvalError::Io(_) | EvalError::Table { .. }) => 2,
            CliError::Check(CheckError::UnknownSuite(_)) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Labels {
    /// κ_opt and λ̇ recomputed from the generating payoff.
    Analytic,
    /// Stored controls and central differences of λ(t).
    FiniteDifference,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_points: usize,
    pub test_fraction: f64,
    pub i_min: f64,
    pub labels: Labels,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_points: 50,
            test_fraction: 0.2,
            i_min: 1e-3,
            labels: Labels::Analytic,
        }
    }
}

/// Everything a run needs; the TOML file mirrors this layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub run_id: String,
    pub out: PathBuf,
    /// α₀ values swept by `simulate`; the others use `payoff.alpha0`.
    pub alpha0_sweep: Vec<f64>,
    pub payoff: PayoffParams,
    pub solver: SolverConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub dataset: DatasetConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_id: "run".into(),
            out: PathBuf::from("out"),
            alpha0_sweep: Vec::new(),
            payoff: PayoffParams::default(),
            solver: SolverConfig::default(),
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            dataset: DatasetConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        toml::from_str(&text).map_err(|e| CliError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(CliError::Config(format!("bad run_id `{}`", self.run_id)));
        }
        self.payoff.validate()?;
        for &a in &self.alpha0_sweep {
            PayoffParams {
                alpha0: a,
                ..self.payoff
            }
            .validate()?;
        }
        self.solver.validate()?;
        self.network.validate()?;
        self.train.validate()?;
        if !(0.0..1.0).contains(&self.dataset.test_fraction) {
            return Err(CliError::Config(format!(
                "dataset.test_fraction = {}",
                self.dataset.test_fraction
            )));
        }
        Ok(())
    }

    fn alpha0_values(&self) -> Vec<f64> {
        if self.alpha0_sweep.is_empty() {
            vec![self.payoff.alpha0]
        } else {
            self.alpha0_sweep.clone()
        }
    }

    fn inner_solver(&self) -> InnerSolver {
        InnerSolver::for_kappa_star(self.payoff.kappa_star)
    }

    fn dataset(&self, traj: &NashTrajectory) -> Result<Dataset, CliError> {
        let source = match self.dataset.labels {
            Labels::Analytic => DlambdaSource::Analytic(self.payoff),
            Labels::FiniteDifference => DlambdaSource::FiniteDifference,
        };
        Ok(prepare_dataset(
            traj,
            self.dataset.n_points,
            self.dataset.test_fraction,
            self.dataset.i_min,
            self.train.seed,
            source,
        )?)
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "nashnet",
    version,
    about = "Nash equilibria of an SIR distancing game and payoff recovery"
)]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub run_id: Option<String>,
    #[command(flatten)]
    pub game: GameArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GameArgs {
    /// Infection cost; several values make `simulate` sweep them.
    #[arg(long, global = true, num_args = 1..)]
    pub alpha0: Vec<f64>,
    #[arg(long, global = true)]
    pub beta: Option<f64>,
    #[arg(long, global = true)]
    pub kappa_star: Option<f64>,
    /// `vaccination` or `zero`.
    #[arg(long, global = true)]
    pub terminal: Option<TerminalCondition>,
    #[arg(long, global = true)]
    pub dt: Option<f64>,
    #[arg(long, global = true)]
    pub t_final: Option<f64>,
    #[arg(long, global = true)]
    pub i0: Option<f64>,
    #[arg(long, global = true)]
    pub max_sweeps: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve for the Nash trajectory at each α₀ and write it as CSV.
    Simulate,
    /// Fit a payoff network to a trajectory.
    Train(TrainArgs),
    /// Compare a checkpoint with the trajectory it was trained on.
    Eval(EvalArgs),
    /// Run the property suites.
    Check(CheckArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub trajectory: PathBuf,
    /// `kappa` or `kappa-lambda`.
    #[arg(long)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub hidden_layers: Option<usize>,
    #[arg(long)]
    pub hidden_width: Option<usize>,
    #[arg(long)]
    pub net_seed: Option<u64>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub n_points: Option<usize>,
    #[arg(long, value_enum)]
    pub labels: Option<Labels>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "ground_truth")]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate the configured analytic payoff instead of a checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    pub ground_truth: bool,
    #[arg(long)]
    pub trajectory: PathBuf,
    /// Figure tables to write (default: all).
    #[arg(long = "figure", value_parser = parse_figure)]
    pub figures: Vec<FigureKind>,
    /// Use every n-th trajectory point in the rate table.
    #[arg(long, default_value_t = 10)]
    pub stride: usize,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub n_points: Option<usize>,
    #[arg(long, value_enum)]
    pub labels: Option<Labels>,
}

fn parse_figure(s: &str) -> Result<FigureKind, String> {
    s.parse::<FigureKind>().map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Run only these suites.
    #[arg(long)]
    pub only: Vec<Suite>,
    /// Add δ to α₀ in the payoff given to the N³ evolver (fault injection).
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub inject_alpha0: f64,
    #[arg(long)]
    pub oracle_states: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Parse arguments, run the command, return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    apply_globals(&mut config, &cli);
    match cli.command {
        Command::Simulate => {
            config.validate()?;
            cmd_simulate(&config).map(|_| ())
        }
        Command::Train(args) => {
            apply_train_args(&mut config, &args);
            config.validate()?;
            cmd_train(&config, &args.trajectory).map(|_| ())
        }
        Command::Eval(args) => {
            if let Some(seed) = args.data_seed {
                config.train.seed = seed;
            }
            if let Some(n) = args.n_points {
                config.dataset.n_points = n;
            }
            if let Some(l) = args.labels {
                config.dataset.labels = l;
            }
            config.validate()?;
            let payoff = match &args.checkpoint {
                Some(path) => load_checkpoint(path)?.payoff,
                None => CheckpointPayoff::GroundTruth(config.payoff),
            };
            let figures = if args.figures.is_empty() {
                FigureKind::ALL.to_vec()
            } else {
                args.figures.clone()
            };
            cmd_eval(&config, &payoff, &args.trajectory, &figures, args.stride).map(|_| ())
        }
        Command::Check(args) => {
            config.validate()?;
            let mut check = CheckConfig {
                payoff: config.payoff,
                solver: config.solver.clone(),
                inject_alpha0: args.inject_alpha0,
                ..CheckConfig::default()
            };
            if let Some(n) = args.oracle_states {
                check.oracle_states = n;
            }
            if let Some(seed) = args.seed {
                check.seed = seed;
            }
            let suites = if args.only.is_empty() {
                Suite::ALL.to_vec()
            } else {
                args.only.clone()
            };
            cmd_check(&check, &suites)
        }
    }
}

fn apply_globals(config: &mut RunConfig, cli: &Cli) {
    if let Some(out) = &cli.out {
        config.out = out.clone();
    }
    if let Some(id) = &cli.run_id {
        config.run_id = id.clone();
    }
    let g = &cli.game;
    if let Some(&first) = g.alpha0.first() {
        config.payoff.alpha0 = first;
        config.alpha0_sweep = g.alpha0.clone();
    }
    if let Some(b) = g.beta {
        config.payoff.beta = b;
    }
    if let Some(k) = g.kappa_star {
        config.payoff.kappa_star = k;
    }
    if let Some(t) = g.terminal {
        config.solver.terminal_condition = t;
    }
    if let Some(dt) = g.dt {
        config.solver.dt = dt;
    }
    if let Some(tf) = g.t_final {
        config.solver.t_final = tf;
    }
    if let Some(i0) = g.i0 {
        config.solver.i0 = i0;
    }
    if let Some(m) = g.max_sweeps {
        config.solver.max_sweeps = m;
    }
}

fn apply_train_args(config: &mut RunConfig, a: &TrainArgs) {
    let t = &mut config.train;
    if let Some(l) = a.loss {
        t.loss_kind = l;
    }
    if let Some(n) = a.steps {
        t.n_steps = n;
    }
    if let Some(s) = a.step_size {
        t.step_size = s;
    }
    if let Some(c) = a.checkpoint_every {
        t.checkpoint_every = c;
    }
    if let Some(s) = a.data_seed {
        t.seed = s;
    }
    let n = &mut config.network;
    if let Some(l) = a.hidden_layers {
        n.hidden_layers = l;
    }
    if let Some(w) = a.hidden_width {
        n.hidden_width = w;
    }
    if let Some(s) = a.net_seed {
        n.seed = s;
    }
    if let Some(p) = a.n_points {
        config.dataset.n_points = p;
    }
    if let Some(l) = a.labels {
        config.dataset.labels = l;
    }
}

#[derive(Debug, Clone)]
pub struct SimulateSummary {
    pub alpha0: f64,
    pub path: PathBuf,
    pub min_kappa: f64,
    pub s_final: f64,
    pub sweeps: usize,
}

pub fn cmd_simulate(config: &RunConfig) -> Result<Vec<SimulateSummary>, CliError> {
    let mut out = Vec::new();
    for alpha0 in config.alpha0_values() {
        let params = PayoffParams {
            alpha0,
            ..config.payoff
        };
        let start = Instant::now();
        let sweep = forward_backward_sweep(&params, &config.solver)?;
        let path = export_trajectory(&config.out, &config.run_id, alpha0, &sweep.trajectory)?;
        let summary = SimulateSummary {
            alpha0,
            path,
            min_kappa: sweep.trajectory.min_control(),
            s_final: sweep.trajectory.final_state().s,
            sweeps: sweep.sweeps,
        };
        println!(
            "alpha0 = {alpha0}: min kappa {:.4}, s(t_f) {:.6}, {} sweeps, {:.2} s -> {}",
            summary.min_kappa,
            summary.s_final,
            summary.sweeps,
            start.elapsed().as_secs_f64(),
            summary.path.display()
        );
        out.push(summary);
    }
    Ok(out)
}

pub fn read_trajectory(path: &Path) -> Result<NashTrajectory, CliError> {
    let file = File::open(path).map_err(io_err(path))?;
    read_trajectory_csv(BufReader::new(file)).map_err(|e| match e {
        GameError::Io(source) => CliError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => CliError::Parse {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let file = File::open(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Checkpoint::read(BufReader::new(file)).map_err(|e| CliError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CliError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    ckpt.write(&mut w)?;
    w.flush().map_err(io_err(path))
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("ckpt_{step}.txt"))
}

pub fn history_path(dir: &Path, run_id: &str) -> PathBuf {
    dir.join(format!("{run_id}_loss_history.csv"))
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub final_checkpoint: PathBuf,
    pub history: PathBuf,
    pub final_train_loss: f64,
    pub final_test_loss: f64,
}

pub fn cmd_train(config: &RunConfig, trajectory: &Path) -> Result<TrainSummary, CliError> {
    let traj = read_trajectory(trajectory)?;
    let data = config.dataset(&traj)?;
    let init = init_params(&config.network)?;
    std::fs::create_dir_all(&config.out).map_err(io_err(&config.out))?;

    let mut write_err = None;
    let outcome = train_with_observer(
        &init,
        &data,
        &config.train,
        &config.inner_solver(),
        |row, params| {
            let ckpt = Checkpoint {
                step: row.step as u64,
                payoff: CheckpointPayoff::Network {
                    config: config.network,
                    params: params.clone(),
                },
            };
            if let Err(e) = write_checkpoint(&checkpoint_path(&config.out, row.step), &ckpt) {
                write_err.get_or_insert(e);
            }
            println!(
                "step {:>7}  train {:.4e}  test {:.4e}",
                row.step, row.train_loss, row.test_loss
            );
        },
    )?;
    if let Some(e) = write_err {
        return Err(e);
    }

    let history = history_path(&config.out, &config.run_id);
    let file = File::create(&history).map_err(io_err(&history))?;
    let mut w = BufWriter::new(file);
    let mut lines = vec![
        format!(
            "# net_seed={} data_seed={}",
            config.network.seed, config.train.seed
        ),
        "step,train_loss,test_loss".to_owned(),
    ];
    lines.extend(outcome.history.iter().map(|r| {
        format!(
            "{},{},{}",
            r.step,
            crate::sir_game::fmt_float(r.train_loss),
            crate::sir_game::fmt_float(r.test_loss)
        )
    }));
    for line in lines {
        writeln!(w, "{line}").map_err(io_err(&history))?;
    }
    w.flush().map_err(io_err(&history))?;

    let last = outcome
        .history
        .last()
        .copied()
        .expect("history has the final step");
    let summary = TrainSummary {
        final_checkpoint: checkpoint_path(&config.out, config.train.n_steps),
        history,
        final_train_loss: last.train_loss,
        final_test_loss: last.test_loss,
    };
    println!("final checkpoint {}", summary.final_checkpoint.display());
    println!("loss history {}", summary.history.display());
    Ok(summary)
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub report: RecoveryReport,
    pub figures: Vec<PathBuf>,
    pub report_path: PathBuf,
}

pub fn cmd_eval(
    config: &RunConfig,
    payoff: &CheckpointPayoff,
    trajectory: &Path,
    figures: &[FigureKind],
    stride: usize,
) -> Result<EvalSummary, CliError> {
    let traj = read_trajectory(trajectory)?;
    let data = config.dataset(&traj)?;
    let solver = config.inner_solver();
    let (dir, id, a0, ks) = (
        &config.out,
        config.run_id.as_str(),
        config.payoff.alpha0,
        config.payoff.kappa_star,
    );
    let anchors: Vec<_> = data.points.iter().map(|p| p.theta).collect();

    let mut written = Vec::new();
    for kind in figures {
        let path = match kind {
            FigureKind::Trajectory => export_trajectory(dir, id, a0, &traj)?,
            FigureKind::DState => {
                let rows = dstate_rows(payoff, &traj, &config.payoff, &solver, stride)?;
                export_dstate(dir, id, a0, &rows)?
            }
            FigureKind::PayoffKappa => {
                let scan = scan_kappa(payoff, &anchors, &kappa_grid(ks, 81), ks);
                export_payoff_kappa(dir, id, a0, &scan)?
            }
            FigureKind::PayoffState => {
                let i_max = anchors.iter().map(|a| a.i).fold(0.0, f64::max);
                let psi_i: Vec<f64> = (0..=40).map(|k| i_max * k as f64 / 40.0).collect();
                let scan = scan_state(payoff, &anchors, &psi_i, ks);
                export_payoff_state(dir, id, a0, &scan)?
            }
        };
        println!("wrote {}", path.display());
        written.push(path);
    }

    let report = recovery_report(payoff, &data, ks, &solver)?;
    let truth = &config.payoff;
    let text = format!(
        "{report}\ngenerating payoff: curvature {:.3}, vertex {:.3}, slope {:.3}, alpha0 {:.3}\n",
        -truth.beta, truth.kappa_star, -truth.alpha0, truth.alpha0
    );
    print!("{text}");
    let report_path = dir.join(format!("{id}_report_{a0}.txt"));
    std::fs::write(&report_path, &text).map_err(io_err(&report_path))?;
    Ok(EvalSummary {
        report,
        figures: written,
        report_path,
    })
}

pub fn cmd_check(config: &CheckConfig, suites: &[Suite]) -> Result<(), CliError> {
    let outcomes = run_checks(suites, config)?;
    for o in &outcomes {
        println!("{o}");
    }
    match outcomes.iter().filter(|o| !o.passed).count() {
        0 => Ok(()),
        n => Err(CliError::ChecksFailed(n)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "run_id = \"file\"\n[payoff]\nalpha0 = 100.0\nbeta = 2.0\n[train]\nn_steps = 5\n",
        )
        .unwrap();
        let cli = Cli::try_parse_from([
            "nashnet",
            "--config",
            path.to_str().unwrap(),
            "--beta",
            "3",
            "train",
            "--trajectory",
            "t.csv",
            "--steps",
            "7",
        ])
        .unwrap();
        let mut config = RunConfig::load(&path).unwrap();
        assert_eq!(config.payoff.beta, 2.0);
        assert_eq!(config.payoff.kappa_star, 4.0);
        apply_globals(&mut config, &cli);
        let Command::Train(args) = &cli.command else {
            panic!()
        };
        apply_train_args(&mut config, args);
        assert_eq!(config.run_id, "file");
        assert_eq!(config.payoff.alpha0, 100.0);
        assert_eq!(config.payoff.beta, 3.0);
        assert_eq!(config.train.n_steps, 7);
    }

    #[test]
    fn alpha0_list_feeds_the_sweep() {
        let cli =
            Cli::try_parse_from(["nashnet", "simulate", "--alpha0", "100", "200", "400"]).unwrap();
        let mut config = RunConfig::default();
        apply_globals(&mut config, &cli);
        assert_eq!(config.alpha0_values(), vec![100.0, 200.0, 400.0]);
        assert_eq!(config.payoff.alpha0, 100.0);
    }

    #[test]
    fn exit_codes() {
        let missing = load_checkpoint(Path::new("/nonexistent/ckpt_0.txt")).unwrap_err();
        assert_eq!(missing.exit_code(), 2);
        assert!(missing.to_string().contains("/nonexistent/ckpt_0.txt"));
        let diverged = CliError::Game(GameError::MaxSweepsExceeded {
            sweeps: 3,
            residual: 1.0,
        });
        assert_eq!(diverged.exit_code(), 1);
        assert_eq!(CliError::ChecksFailed(1).exit_code(), 1);
        assert_eq!(run(["nashnet", "bogus"]), 2);
    }
}
