mod common;

use dalab::config::ExperimentConfig;
use dalab::coefficients::compute_limit_coefficients;
use dalab::harness::{
    compare_laws, ensemble_csv, run_kinetic_ensemble, run_spde_ensemble, verify_experiment, EnsembleStats, LawCriteria,
    Manifest,
};
use dalab::spde::{solve_deterministic, DeterministicMode};
use dalab::{Error, Hypothesis};

use common::{fixture, shipped_config};

const SHIPPED: [&str; 3] = ["zero_pilot", "two_state", "five_state"];

fn small(name: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::load(&shipped_config(name)).unwrap();
    cfg.epsilons = vec![0.2];
    cfg.time.t_end = 0.5;
    cfg.observation_times = vec![0.25, 0.5];
    cfg.paths.kinetic = 8;
    cfg.paths.law = 8;
    cfg.paths.spde = 8;
    cfg.paths.monte_carlo = 200;
    cfg.validate().unwrap();
    cfg
}

#[test]
fn shipped_configs_are_admissible() {
    for name in SHIPPED {
        let exp = ExperimentConfig::load(&shipped_config(name)).unwrap().build().unwrap();
        let adm = exp.admissibility();
        assert!(adm.margin >= -1e-12, "{name}: margin {}", adm.margin);
        assert!(adm.min_tilted_equilibrium >= 0.0, "{name}");
    }
}

#[test]
fn broken_fixtures_name_the_violated_hypothesis() {
    for (file, hyp) in [
        ("broken_vdv", Hypothesis::Vdv),
        ("broken_hypm", Hypothesis::HypM),
        ("broken_ballr", Hypothesis::BallR),
        ("broken_rsmall", Hypothesis::Rsmall),
        ("broken_mcentred", Hypothesis::Mcentred),
        ("broken_mixcoupled", Hypothesis::MixCoupled),
    ] {
        let err = ExperimentConfig::load(&fixture(file)).unwrap().build().unwrap_err();
        assert_eq!(err.hypothesis(), Some(hyp), "{file}: {err}");
    }
}

#[test]
fn config_round_trip_is_bit_exact() {
    for name in SHIPPED {
        let cfg = ExperimentConfig::load(&shipped_config(name)).unwrap();
        let text = cfg.to_json_string();
        let back = ExperimentConfig::from_json_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(back.to_json_string(), text);
    }
}

#[test]
fn parse_errors_carry_field_and_position() {
    let text = std::fs::read_to_string(shipped_config("two_state")).unwrap();
    let bad = text.replacen("\"t_end\": 1.0", "\"t_end\": \"one\"", 1);
    match ExperimentConfig::from_json_str(&bad).unwrap_err() {
        Error::Config { path, message } => {
            assert_eq!(path, "time.t_end");
            assert!(message.contains("line") && message.contains("column"), "{message}");
        }
        e => panic!("unexpected error {e}"),
    }
    let unknown = text.replacen("\"base_seed\"", "\"seed\"", 1);
    assert!(matches!(ExperimentConfig::from_json_str(&unknown), Err(Error::Config { .. })));
}

#[test]
fn invalid_ladders_and_meshes_are_rejected() {
    let mut cfg = small("two_state");
    cfg.epsilons = vec![0.1, 0.2];
    assert!(matches!(cfg.validate(), Err(Error::Config { ref path, .. }) if path == "epsilons"));
    let mut cfg = small("two_state");
    cfg.observation_times = vec![0.33];
    assert!(cfg.validate().is_err());
    let mut cfg = small("two_state");
    cfg.paths.spde = 1;
    assert!(cfg.validate().is_err());
}

#[test]
fn split_halves_of_one_ensemble_agree() {
    let exp = small("two_state").build().unwrap();
    let co = compute_limit_coefficients(&exp.chain, &exp.model).unwrap();
    let ens = run_spde_ensemble(&exp, &co, 200).unwrap();
    let times = exp.config.observation_times.clone();
    let half = |r: std::ops::Range<usize>| {
        let obs: Vec<&Vec<Vec<f64>>> = ens.trajectories[r].iter().map(|t| &t.observables).collect();
        EnsembleStats::from_observables(&ens.stats.times, &obs).unwrap().at_times(&times).unwrap()
    };
    let v = compare_laws(&half(0..100), &half(100..200), LawCriteria::default()).unwrap();
    assert!(v.passed, "{:?}", v.rows);
}

#[test]
fn spde_against_deterministic_mean_fails_on_variance() {
    let exp = small("two_state").build().unwrap();
    let co = compute_limit_coefficients(&exp.chain, &exp.model).unwrap();
    let ens = run_spde_ensemble(&exp, &co, 100).unwrap();
    let t = &exp.config.time;
    let det = solve_deterministic(&exp.rho_in, DeterministicMode::Mean, &co, t.t_end, t.spde_dt, t.record_dt, &exp.xis)
        .unwrap();
    let copies: Vec<&Vec<Vec<f64>>> = (0..100).map(|_| &det.observables).collect();
    let det_stats = EnsembleStats::from_observables(&det.times, &copies).unwrap();
    let times = exp.config.observation_times.clone();
    let v = compare_laws(&ens.stats.at_times(&times).unwrap(), &det_stats.at_times(&times).unwrap(), LawCriteria::default())
        .unwrap();
    assert!(!v.passed);
    for r in &v.rows {
        assert!(r.z.abs() <= 3.0, "means should agree: {r:?}");
        assert!(r.variance_ratio.is_infinite(), "variance test must discriminate: {r:?}");
    }
}

#[test]
fn kinetic_ensemble_prefix_is_reproducible() {
    let exp = small("two_state").build().unwrap();
    let a = run_kinetic_ensemble(&exp, 0, 0.2, 4, false).unwrap();
    let b = run_kinetic_ensemble(&exp, 0, 0.2, 6, false).unwrap().truncated(4).unwrap();
    assert_eq!(ensemble_csv(&a.stats), ensemble_csv(&b.stats));
    assert!(a.diagnostics.max_mass_drift <= 1e-10);
}

#[test]
fn verification_battery_passes_on_small_config() {
    let exp = small("two_state").build().unwrap();
    let rep = verify_experiment(&exp).unwrap();
    let failed: Vec<_> = rep.checks.iter().filter(|c| !c.passed).collect();
    assert!(rep.passed, "{failed:?}");
}

#[test]
fn manifest_records_provenance() {
    let exp = small("zero_pilot").build().unwrap();
    let m = Manifest::new(&exp, "converge", vec!["a.csv".into()], 1.5, true).unwrap();
    assert_eq!(m.config_hash, exp.config.hash());
    assert_eq!(m.base_seed, exp.config.base_seed);
    let text = serde_json::to_string(&m).unwrap();
    let back: Manifest = serde_json::from_str(&text).unwrap();
    assert_eq!(back, m);
}
