mod common;

use std::f64::consts::PI;

use dalab::coefficients::compute_limit_coefficients;
use dalab::pilot::{random_chain, zero_pilot};
use dalab::spde::{simulate_spde, solve_deterministic, DeterministicMode, SpdeSolver};
use dalab::stats::Summary;
use dalab::velocity::two_speed;
use dalab::{Error, GridField};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{cos1, grid64, sin1, ClosedForm};

fn bump() -> GridField {
    cos1(&grid64()).map(|v| 1.0 + v)
}

#[test]
fn heat_equation_matches_analytic_solution() {
    let g = grid64();
    let z = compute_limit_coefficients(&zero_pilot(&g, 1.0), &two_speed()).unwrap();
    let solver = SpdeSolver::new(z, 1e-4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rho = bump();
    for _ in 0..1000 {
        rho = solver.step(&rho, &mut rng);
    }
    let heat = cos1(&g).scaled((-4.0 * PI * PI * 0.1f64).exp()).map(|v| v + 1.0);
    assert!(rho.sub(&heat).max_abs() < 1e-3);
}

#[test]
fn plain_mode_decays_each_mode_by_the_discrete_symbol() {
    let g = grid64();
    let z = compute_limit_coefficients(&zero_pilot(&g, 1.0), &two_speed()).unwrap();
    let (dt, t_end) = (1e-3, 0.2);
    let rho0 = cos1(&g).add(&GridField::from_fn(&g, |x| 0.5 * (6.0 * PI * x[0]).sin()));
    let xis = [cos1(&g), GridField::from_fn(&g, |x| (6.0 * PI * x[0]).sin())];
    let tr = solve_deterministic(&rho0, DeterministicMode::Plain, &z, t_end, dt, 0.1, &xis).unwrap();
    let h = g.spacing();
    let steps = (t_end / dt).round() as i32;
    for (k, amp, obs) in [(1.0, 0.5, tr.observables.last().unwrap()[0]), (3.0, 0.25, tr.observables.last().unwrap()[1])] {
        let symbol = 4.0 / (h * h) * (PI * k * h).sin().powi(2);
        let discrete = amp * (1.0 + dt * symbol).powi(-steps);
        assert!((obs - discrete).abs() < 1e-6, "mode {k}: {obs} vs {discrete}");
        let analytic = amp * (-4.0 * PI * PI * k * k * t_end).exp();
        assert!((obs - analytic).abs() < 0.05 * amp, "mode {k} far from the heat kernel");
    }
}

#[test]
fn zero_density_stays_zero() {
    let cf = ClosedForm::new(1e-3, 1.0);
    let co = compute_limit_coefficients(&cf.chain, &cf.model).unwrap();
    let solver = SpdeSolver::new(co, 1e-3).unwrap();
    let tr = simulate_spde(&GridField::zeros(&cf.grid), &solver, 0.5, 0.1, &[cos1(&cf.grid)], 3).unwrap();
    assert!(tr.observables.iter().all(|o| o[0] == 0.0));
    assert!(tr.mass.iter().all(|&m| m == 0.0));
}

#[test]
fn mass_is_conserved_over_many_steps() {
    let g = grid64();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let chain = random_chain(&g, 3, 1.0, &mut rng).unwrap();
    let co = compute_limit_coefficients(&chain, &two_speed()).unwrap();
    assert!(co.rank() > 0);
    let solver = SpdeSolver::new(co, 1e-4).unwrap();
    let mut rho = bump();
    let m0 = rho.mean();
    for _ in 0..10_000 {
        rho = solver.step(&rho, &mut rng);
    }
    assert!((rho.mean() - m0).abs() <= 1e-10 * m0);
}

#[test]
fn noiseless_path_equals_mean_solver() {
    let cf = ClosedForm::new(1e-3, 1.0);
    let co = compute_limit_coefficients(&cf.chain, &cf.model).unwrap();
    let solver = SpdeSolver::new(co.without_noise(), 1e-3).unwrap();
    let xis = [cos1(&cf.grid), sin1(&cf.grid)];
    let a = simulate_spde(&bump(), &solver, 1.0, 0.05, &xis, 5).unwrap();
    let b = solve_deterministic(&bump(), DeterministicMode::Mean, &co, 1.0, 1e-3, 0.05, &xis).unwrap();
    for (x, y) in a.observables.iter().flatten().zip(b.observables.iter().flatten()) {
        assert!((x - y).abs() <= 1e-8);
    }
}

#[test]
fn mean_mode_properties() {
    let g = grid64();
    let z = compute_limit_coefficients(&zero_pilot(&g, 1.0), &two_speed()).unwrap();
    let xis = [cos1(&g)];
    let plain = solve_deterministic(&bump(), DeterministicMode::Plain, &z, 0.5, 1e-3, 0.05, &xis).unwrap();
    let mean = solve_deterministic(&bump(), DeterministicMode::Mean, &z, 0.5, 1e-3, 0.05, &xis).unwrap();
    assert_eq!(plain.observables, mean.observables);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let chain = random_chain(&g, 4, 1.0, &mut rng).unwrap();
    let co = compute_limit_coefficients(&chain, &two_speed()).unwrap();
    let tr = solve_deterministic(&bump(), DeterministicMode::Mean, &co, 0.5, 1e-3, 0.05, &xis).unwrap();
    assert!(tr.mass.iter().all(|m| (m - tr.mass[0]).abs() <= 1e-12));
}

#[test]
fn seeds_share_the_initial_record_and_variance_grows() {
    let g = grid64();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let chain = random_chain(&g, 3, 1.0, &mut rng).unwrap();
    let co = compute_limit_coefficients(&chain, &two_speed()).unwrap();
    let solver = SpdeSolver::new(co, 1e-3).unwrap();
    let xis = [cos1(&g)];
    let paths: Vec<_> = (0..200)
        .map(|s| simulate_spde(&bump(), &solver, 0.5, 0.1, &xis, s).unwrap())
        .collect();
    assert_eq!(paths[0].observables[0], paths[1].observables[0]);
    assert_ne!(paths[0].observables[1], paths[1].observables[1]);
    let var_at = |k: usize| Summary::new(&paths.iter().map(|p| p.observables[k][0]).collect::<Vec<_>>()).variance;
    assert_eq!(var_at(0), 0.0);
    let (v1, v3) = (var_at(1), var_at(3));
    assert!(v1 > 0.0 && v3 > v1, "variance {v1:e} -> {v3:e}");
}

#[test]
fn mean_scheme_is_first_order_in_time() {
    let cf = ClosedForm::new(1e-3, 1.0);
    let co = compute_limit_coefficients(&cf.chain, &cf.model).unwrap();
    let xis = [cos1(&cf.grid)];
    let at = |dt: f64| {
        solve_deterministic(&bump(), DeterministicMode::Mean, &co, 0.2, dt, 0.1, &xis)
            .unwrap()
            .observables
            .last()
            .unwrap()[0]
    };
    let (a, b, c) = (at(4e-3), at(2e-3), at(1e-3));
    let ratio = (a - b) / (b - c);
    assert!((ratio - 2.0).abs() <= 0.7, "weak-order ratio {ratio}");
}

#[test]
fn drift_cfl_is_enforced() {
    let g = grid64();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let chain = random_chain(&g, 3, 1.0, &mut rng).unwrap();
    let co = compute_limit_coefficients(&chain, &two_speed()).unwrap();
    assert!(matches!(SpdeSolver::new(co.clone(), 1e6), Err(Error::StepTooLarge { .. })));
    assert!(SpdeSolver::new(co, 0.0).is_err());
}
