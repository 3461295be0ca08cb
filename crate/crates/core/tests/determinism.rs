mod common;

use dalab::config::ExperimentConfig;
use dalab::harness::{ensemble_csv, kinetic_records_csv, run_kinetic_ensemble, WORKERS_ENV};

use common::shipped_config;

#[test]
fn outputs_do_not_depend_on_worker_count() {
    let mut cfg = ExperimentConfig::load(&shipped_config("five_state")).unwrap();
    cfg.epsilons = vec![0.2];
    cfg.time.t_end = 0.3;
    cfg.observation_times = vec![0.3];
    cfg.validate().unwrap();
    let exp = cfg.build().unwrap();
    let run = |workers: &str| {
        std::env::set_var(WORKERS_ENV, workers);
        let e = run_kinetic_ensemble(&exp, 0, 0.2, 12, false).unwrap();
        (ensemble_csv(&e.stats), kinetic_records_csv(&e.trajectories))
    };
    let one = run("1");
    let four = run("4");
    let again = run("3");
    std::env::remove_var(WORKERS_ENV);
    assert_eq!(one, four);
    assert_eq!(one, again);
}
