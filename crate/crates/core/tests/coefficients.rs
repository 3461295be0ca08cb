mod common;

use dalab::coefficients::{
    chi, compute_limit_coefficients, enhanced_diffusion_check, kernel_dense, CoefficientBundle, StateFields,
};
use dalab::harness::sqrt_reconstruction_error;
use dalab::pilot::{random_chain, random_reversible, three_cycle, zero_pilot};
use dalab::velocity::two_speed;
use dalab::{Grid, GridField, VelocitySpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{grid64, sin1, ClosedForm};

#[test]
fn zero_pilot_gives_plain_diffusion() {
    let g = grid64();
    let c = compute_limit_coefficients(&zero_pilot(&g, 1.0), &two_speed()).unwrap();
    assert_eq!(c.rank(), 0);
    assert!(c.k_star[0][0].sub(&GridField::constant(&g, 1.0)).max_abs() == 0.0);
    assert_eq!(c.psi.component(0).max_abs(), 0.0);
    let rep = enhanced_diffusion_check(&c, &zero_pilot(&g, 1.0));
    assert_eq!(rep.min_eigenvalue, 0.0);
    assert_eq!(rep.passed, Some(true));
}

#[test]
fn two_state_closed_forms() {
    for (delta, q) in [(1e-3, 1.0), (8e-4, 0.4), (5e-4, 3.0)] {
        let cf = ClosedForm::new(delta, q);
        let co = compute_limit_coefficients(&cf.chain, &cf.model).unwrap();
        let c = cf.c();
        let denom = 2.0 * q * (1.0 + 2.0 * q);
        let k_expected = c.mul(&c).scaled(1.0 / denom).map(|v| v + 1.0);
        assert!(co.k_star[0][0].sub(&k_expected).max_abs() < 1e-10);
        let psi_expected = c.mul(&cf.c_prime()).scaled(1.0 / denom);
        assert!(co.psi.component(0).sub(&psi_expected).max_abs() < 1e-10);
        assert_eq!(co.rank(), 1);
        let mu = c.l2_inner(&c) / (2.0 * q);
        assert!((co.eigenvalues[0] - mu).abs() < 1e-10 * mu.max(1.0), "{} vs {mu}", co.eigenvalues[0]);
        let fields = StateFields::new(&cf.chain, &cf.model).unwrap();
        let kernel = kernel_dense(&cf.chain, &fields);
        let cv = c.values();
        let mut err: f64 = 0.0;
        for x in 0..cv.len() {
            for y in 0..cv.len() {
                err = err.max((kernel[(x, y)] - cv[x] * cv[y] / (2.0 * q)).abs());
            }
        }
        assert!(err < 1e-12, "kernel error {err:e}");
        let enh = co.k_star[0][0].sub(&GridField::constant(&cf.grid, 1.0));
        assert!(enh.sub(&c.mul(&c).scaled(1.0 / denom)).max_abs() < 1e-10);
    }
}

#[test]
fn ito_stratonovich_relation() {
    let g = grid64();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let model = two_speed();
    for _ in 0..5 {
        let chain = random_chain(&g, 4, 1.0, &mut rng).unwrap();
        let co = compute_limit_coefficients(&chain, &model).unwrap();
        // independent oracle from the resolvent matrices
        let r0 = chain.resolvent(0.0).unwrap();
        let r1 = chain.resolvent(1.0).unwrap();
        let chis: Vec<GridField> = chain.states().iter().map(|n| chi(n, &model).component(0).clone()).collect();
        let a = r0.apply(&chis).unwrap();
        let b = r1.apply(&chis).unwrap();
        let mut k_oracle = GridField::zeros(&g);
        let mut psi_oracle = GridField::zeros(&g);
        for (i, &l) in chain.stationary().iter().enumerate() {
            let diff = a[i].sub(&b[i].scaled(2.0));
            k_oracle.axpy(l, &diff.mul(&chis[i]));
            psi_oracle.axpy(l, &diff.mul(&chis[i].partial(0)));
        }
        let k_diff = co.k_star[0][0].sub(&co.k_strato[0][0]);
        assert!(k_diff.sub(&k_oracle).max_abs() < 1e-10);
        let psi_diff = co.psi.component(0).sub(co.psi_strato.component(0));
        assert!(psi_diff.sub(&psi_oracle).max_abs() < 1e-10);
    }
}

#[test]
fn covariance_properties_on_random_reversible_chains() {
    let g = grid64();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let model = two_speed();
    for n in 2..=6 {
        let chain = random_reversible(&g, n, 1.0, &mut rng).unwrap();
        let co = compute_limit_coefficients(&chain, &model).unwrap();
        let cov = &co.covariance;
        assert!(cov.asymmetry <= 1e-8);
        assert!(cov.min_eigenvalue >= -1e-10);
        assert!(cov.rank <= n);
        assert!(cov.max_entry <= cov.bound * (1.0 + 1e-12), "{} > {}", cov.max_entry, cov.bound);
        let fields = StateFields::new(&chain, &model).unwrap();
        assert!(sqrt_reconstruction_error(&chain, &co, &fields) < 1e-10);
        assert!(enhanced_diffusion_check(&co, &chain).min_eigenvalue >= -1e-10);
    }
}

#[test]
fn non_reversible_kernel_is_asymmetric_but_form_is_nonnegative() {
    let g = grid64();
    let n = GridField::from_modes(&g, &[("sin:1".to_string(), 1e-4), ("cos:2".to_string(), 2e-5)].into())
        .unwrap();
    let chain = three_cycle(&n, 1.0, 1.0).unwrap();
    let co = compute_limit_coefficients(&chain, &two_speed()).unwrap();
    assert!(!co.covariance.reversible);
    assert!(co.covariance.asymmetry > 1e-8, "asymmetry {}", co.covariance.asymmetry);
    assert!(co.covariance.min_eigenvalue >= -1e-10);
    assert!(enhanced_diffusion_check(&co, &chain).passed.is_none());
}

#[test]
fn two_dimensional_reversible_coefficients() {
    let g = Grid::new(2, 16).unwrap();
    let model = VelocitySpec::Named {
        family: "octagon".into(),
        anisotropy: 0.2,
        alpha: None,
    }
    .build()
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let chain = random_reversible(&g, 3, model.alpha(), &mut rng).unwrap();
    let co = compute_limit_coefficients(&chain, &model).unwrap();
    let asym = co.k_star[0][1].sub(&co.k_star[1][0]).max_abs();
    assert!(asym < 1e-12, "K* asymmetry {asym:e}");
    assert!(co.k_star_margin > 0.0);
    assert!(enhanced_diffusion_check(&co, &chain).min_eigenvalue >= -1e-10);
    for (k, p) in co.eigenvectors.iter().enumerate() {
        assert!((p.l2_inner(p) - 1.0).abs() < 1e-10, "eigenvector {k} not normalised");
    }
}

#[test]
fn bundle_round_trip() {
    let cf = ClosedForm::new(1e-3, 1.0);
    let co = compute_limit_coefficients(&cf.chain, &cf.model).unwrap();
    let text = serde_json::to_string(&co.bundle()).unwrap();
    let back: CoefficientBundle = serde_json::from_str(&text).unwrap();
    let co2 = back.into_coefficients().unwrap();
    assert_eq!(co2.k_star, co.k_star);
    assert_eq!(co2.psi, co.psi);
    assert_eq!(co2.eigenvalues, co.eigenvalues);
}

#[test]
fn chi_of_state_is_gradient_for_two_speed() {
    let g = grid64();
    let n = sin1(&g).scaled(0.3);
    assert!(chi(&n, &two_speed()).component(0).sub(&n.partial(0)).max_abs() == 0.0);
}
