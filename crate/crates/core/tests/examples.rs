//! The quick examples, run in-process through their `run` functions.

#[path = "../examples/autodiff_tour.rs"]
mod autodiff_tour;
#[path = "../examples/figure_data.rs"]
mod figure_data;
#[path = "../examples/learn_from_behaviour.rs"]
mod learn_from_behaviour;
#[path = "../examples/n3_oracle.rs"]
mod n3_oracle;
#[path = "../examples/nash_equilibria.rs"]
mod nash_equilibria;
#[path = "../examples/property_checks.rs"]
mod property_checks;

use nashnet::training::LossKind;

#[test]
fn autodiff_tour_runs() {
    autodiff_tour::run().unwrap();
}

#[test]
fn nash_equilibria_runs() {
    nash_equilibria::run().unwrap();
}

#[test]
fn n3_oracle_runs() {
    n3_oracle::run().unwrap();
}

#[test]
fn figure_data_writes_every_table() {
    let dir = tempfile::tempdir().unwrap();
    let written = figure_data::run(dir.path()).unwrap();
    assert_eq!(written.len(), 5);
    assert!(written.iter().all(|p| p.exists()));
}

#[test]
fn property_checks_pass_and_catch_injection() {
    assert!(property_checks::run(0.0).unwrap());
    assert!(!property_checks::run(0.05).unwrap());
}

#[test]
fn short_training_runs_for_both_losses() {
    learn_from_behaviour::run(200.0, 20, LossKind::Kappa).unwrap();
    learn_from_behaviour::run(200.0, 20, LossKind::KappaLambda).unwrap();
}
