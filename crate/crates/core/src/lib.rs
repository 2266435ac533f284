//! Nash neural networks: learning the payoff of a mean-field game from
//! observed equilibrium behaviour.

pub mod autodiff;
pub mod checks;
pub mod cli;
pub mod eval_report;
pub mod n3;
pub mod payoff_net;
pub mod sir_game;
pub mod training;
