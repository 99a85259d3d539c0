mod support;

use laf_core::model::*;
use laf_core::ngp::{DictionaryPaths, NgpVariances, TimeGrid};
use laf_core::sampler::*;
use laf_core::Dataset;
use nalgebra::{DMatrix, DVector};
use support::oracles::*;
use support::*;

const TOL: f64 = 1e-6;

#[test]
fn xi_variance_conditionals_match_grid_oracle() {
    let gap = step2_gap(&conditional_fixture(21));
    assert!(gap < TOL, "{gap}");
}

#[test]
fn psi_variance_conditionals_match_grid_oracle() {
    let gap = step4_gap(&conditional_fixture(22));
    assert!(gap < TOL, "{gap}");
}

#[test]
fn factor_conditionals_match_dense_conditioning() {
    let gap = step5_gap(&conditional_fixture(23));
    assert!(gap < TOL, "{gap}");
}

#[test]
fn precision_conditionals_match_grid_oracle() {
    let gap = step6_gap(&conditional_fixture(24));
    assert!(gap < TOL, "{gap}");
}

#[test]
fn loading_conditionals_match_dense_conditioning() {
    let gap = step7_gap(&conditional_fixture(25));
    assert!(gap < 1e-10, "{gap}");
}

#[test]
fn local_shrinkage_conditionals_match_grid_oracle() {
    let gap = step8_gap(&conditional_fixture(26));
    assert!(gap < TOL, "{gap}");
}

#[test]
fn global_shrinkage_conditionals_match_grid_oracle() {
    let gap = step9_gap(&conditional_fixture(27));
    assert!(gap < TOL, "{gap}");
}

#[test]
fn constant_paths_leave_the_scale_at_its_prior() {
    let states = vec![DVector::from_vec(vec![1.0, 2.0, 0.0]); 6];
    let (f, a) = ngp_variance_conditionals(&states, 1, &[0.2; 5], (2.0, 7.0), (3.0, 5.0)).unwrap();
    assert_eq!(
        f[0],
        InvGammaParams {
            shape: 4.5,
            scale: 7.0
        }
    );
    assert_eq!(
        a[0],
        InvGammaParams {
            shape: 5.5,
            scale: 5.0
        }
    );
    assert!(ngp_variance_conditionals(
        &states,
        1,
        &[0.2, 0.2, 0.0, 0.2, 0.2],
        (2.0, 7.0),
        (3.0, 5.0)
    )
    .is_err());
}

fn scalar_draw(theta: f64, xi: f64, sigma2: f64, eta: f64) -> PosteriorDraw {
    let dict =
        DictionaryPaths::from_values(&[DMatrix::from_element(1, 1, xi)], &[DVector::zeros(1)])
            .unwrap();
    PosteriorDraw {
        loadings: Loadings {
            theta: DMatrix::from_element(1, 1, theta),
            phi: DMatrix::from_element(1, 1, 1.0),
            vartheta: DVector::from_element(1, 1.0),
        },
        sigma2_idio: DVector::from_element(1, sigma2),
        factors: FactorState::from_nu(DMatrix::from_element(1, 1, eta), &dict),
        dict,
        ngp_vars: NgpVariances::constant(1, 1, 1.0, 1.0, 1.0, 1.0),
    }
}

fn one_cell(y: f64) -> Dataset {
    Dataset::fully_observed(vec![1.0], DMatrix::from_element(1, 1, y)).unwrap()
}

#[test]
fn zero_dictionary_restores_factor_prior() {
    let c = &nu_conditionals(&scalar_draw(1.0, 0.0, 1.0, 0.0), &one_cell(4.0))[0];
    assert_eq!(c.mean().unwrap()[0], 0.0);
    assert_eq!(c.cov().unwrap()[(0, 0)], 1.0);
}

#[test]
fn precision_conditional_examples() {
    let cfg = LafConfig {
        p: 1,
        ..LafConfig::default()
    };
    let perfect = sigma0_conditionals(&scalar_draw(1.0, 1.0, 1.0, 2.0), &one_cell(2.0), &cfg);
    assert_eq!(
        perfect[0],
        GammaParams {
            shape: cfg.a_sigma + 0.5,
            rate: cfg.b_sigma
        }
    );
    let off = sigma0_conditionals(&scalar_draw(1.0, 1.0, 1.0, 0.0), &one_cell(2.0), &cfg);
    assert_eq!(
        off[0],
        GammaParams {
            shape: cfg.a_sigma + 0.5,
            rate: cfg.b_sigma + 2.0
        }
    );
}

#[test]
fn scalar_ridge_loading() {
    let c = &theta_conditionals(&scalar_draw(0.0, 1.0, 1.0, 1.0), &one_cell(3.0))[0];
    assert!((c.mean().unwrap()[0] - 1.5).abs() < 1e-14);
    assert!((c.cov().unwrap()[(0, 0)] - 0.5).abs() < 1e-14);
    let prior = &theta_conditionals(&scalar_draw(0.0, 0.0, 1.0, 1.0), &one_cell(3.0))[0];
    assert_eq!(prior.mean().unwrap()[0], 0.0);
    assert_eq!(prior.cov().unwrap()[(0, 0)], 1.0);
}

#[test]
fn shrinkage_conditionals_with_zero_loadings() {
    let loadings = Loadings {
        theta: DMatrix::zeros(3, 2),
        phi: DMatrix::from_element(3, 2, 0.7),
        vartheta: DVector::from_vec(vec![1.3, 0.4]),
    };
    assert!(phi_conditionals(&loadings).iter().flatten().all(|g| *g
        == GammaParams {
            shape: 2.0,
            rate: 1.5
        }));
    let cfg = LafConfig {
        a1: 2.0,
        a2: 3.0,
        ..LafConfig::default()
    };
    assert_eq!(
        vartheta_conditional(&loadings, 0, &cfg),
        GammaParams {
            shape: 2.0 + 3.0,
            rate: 1.0
        }
    );
    assert_eq!(
        vartheta_conditional(&loadings, 1, &cfg),
        GammaParams {
            shape: 3.0 + 1.5,
            rate: 1.0
        }
    );
}

fn small_data(seed: u64, p: usize, n: usize) -> Dataset {
    let mut r = rng(seed);
    Dataset::fully_observed(
        (1..=n).map(|i| i as f64).collect(),
        normal_matrix(p, n, &mut r),
    )
    .unwrap()
}

fn small_config(p: usize) -> LafConfig {
    LafConfig {
        p,
        n_iter: 10,
        burn_in: 3,
        thin: 2,
        b_xi: 1.0,
        b_a: 1.0,
        ..LafConfig::default()
    }
}

#[test]
fn init_chain_follows_prior_conventions() {
    let data = small_data(1, 3, 20);
    let cfg = small_config(3);
    let a = init_chain(&cfg, &data, &mut rng(9)).unwrap();
    let b = init_chain(&cfg, &data, &mut rng(9)).unwrap();
    assert_eq!(a, b);
    let big = init_chain(
        &LafConfig {
            p: 3,
            ..LafConfig::default()
        },
        &data,
        &mut rng(9),
    )
    .unwrap();
    assert!(big.ngp_vars.sigma2_xi.iter().all(|&v| v == 1e8));
    // shapes below one fall back to unit variances
    assert!(big.ngp_vars.sigma2_psi.iter().all(|&v| v == 1.0));
    let g = compose_gamma(&a);
    for s in &g.sigma {
        assert_eq!(s, &DMatrix::from_diagonal(&a.sigma2_idio));
    }
}

#[test]
fn retained_draw_count() {
    let data = small_data(2, 3, 20);
    let cfg = LafConfig {
        retain_composed: true,
        ..small_config(3)
    };
    let chain = run_gibbs(&cfg, &data, &mut chain_rng(4, 0), None).unwrap();
    assert_eq!(chain.len(), (10 - 3) / 2);
    assert_eq!(chain.len(), cfg.retained());
    assert_eq!(chain.log_likelihood.len(), chain.len());
    assert_eq!(chain.composed.as_ref().map(|c| c.len()), Some(chain.len()));
}

#[test]
fn progress_hook_sees_every_iteration() {
    let data = small_data(2, 3, 20);
    let cfg = small_config(3);
    let mut seen = Vec::new();
    let mut hook = |p: Progress| seen.push(p.iteration);
    run_gibbs(&cfg, &data, &mut chain_rng(4, 0), Some(&mut hook)).unwrap();
    assert_eq!(seen, (0..10).collect::<Vec<_>>());
}

#[test]
fn same_seed_same_chains() {
    let data = small_data(3, 3, 20);
    let cfg = LafConfig {
        seed: 17,
        ..small_config(3)
    };
    let a = run_chains(&cfg, &data, 2, 2, None).unwrap();
    let b = run_chains(&cfg, &data, 2, 1, None).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.draws, y.draws);
    }
    assert_ne!(a[0].draws, a[1].draws);
}

#[test]
fn mismatched_series_count_is_a_config_error() {
    let data = small_data(3, 3, 20);
    let err = run_gibbs(&small_config(4), &data, &mut chain_rng(1, 0), None).unwrap_err();
    assert!(matches!(err, laf_core::Error::Config(_)));
}

#[test]
fn every_draw_is_sign_flip_invariant() {
    let data = small_data(5, 3, 20);
    let cfg = LafConfig {
        n_iter: 30,
        burn_in: 10,
        thin: 5,
        ..small_config(3)
    };
    let chain = run_gibbs(&cfg, &data, &mut chain_rng(5, 0), None).unwrap();
    for d in &chain.draws {
        let mut f = d.clone();
        f.loadings.theta.column_mut(1).neg_mut();
        let xi: Vec<DMatrix<f64>> = f
            .dict
            .xi_path()
            .into_iter()
            .map(|mut x| {
                x.row_mut(1).neg_mut();
                x
            })
            .collect();
        f.dict = DictionaryPaths::from_values(&xi, &f.dict.psi_path()).unwrap();
        let (a, b) = (compose_gamma(d), compose_gamma(&f));
        assert!((&a.mu - &b.mu).amax() < 1e-12);
        assert!(a
            .sigma
            .iter()
            .zip(&b.sigma)
            .all(|(x, y)| (x - y).amax() < 1e-12));
    }
}

/// Batch-means Monte Carlo standard error of the mean.
fn batch_mean_se(xs: &[f64], batches: usize) -> (f64, f64) {
    let size = xs.len() / batches;
    let means: Vec<f64> = xs
        .chunks(size)
        .take(batches)
        .map(|c| c.iter().sum::<f64>() / size as f64)
        .collect();
    let m = means.iter().sum::<f64>() / batches as f64;
    let v = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (
        xs.iter().sum::<f64>() / xs.len() as f64,
        (v / batches as f64).sqrt(),
    )
}

#[test]
fn all_missing_data_samples_the_prior() {
    let n = 8;
    let data = Dataset::missing(2, (1..=n).map(|i| i as f64).collect()).unwrap();
    let cfg = LafConfig {
        p: 2,
        l_star: 1,
        k_star: 1,
        a_xi: 6.0,
        b_xi: 5.0,
        a_a: 5.0,
        b_a: 8.0,
        a_psi: 7.0,
        b_psi: 3.0,
        a_b: 6.0,
        b_b: 2.0,
        a1: 3.0,
        a_sigma: 4.0,
        b_sigma: 2.0,
        n_iter: 5000,
        burn_in: 100,
        thin: 1,
        retain_composed: false,
        ..LafConfig::default()
    };
    let chain = run_gibbs(&cfg, &data, &mut chain_rng(8, 0), None).unwrap();
    let checks: [(&str, Box<dyn Fn(&PosteriorDraw) -> f64>, f64); 6] = [
        (
            "sigma2_xi",
            Box::new(|d| d.ngp_vars.sigma2_xi[0]),
            5.0 / 5.0,
        ),
        ("sigma2_A", Box::new(|d| d.ngp_vars.sigma2_a[0]), 8.0 / 4.0),
        (
            "sigma2_psi",
            Box::new(|d| d.ngp_vars.sigma2_psi[0]),
            3.0 / 6.0,
        ),
        ("sigma2_B", Box::new(|d| d.ngp_vars.sigma2_b[0]), 2.0 / 5.0),
        ("precision", Box::new(|d| 1.0 / d.sigma2_idio[0]), 4.0 / 2.0),
        ("vartheta", Box::new(|d| d.loadings.vartheta[0]), 3.0),
    ];
    for (name, f, prior_mean) in checks {
        let xs: Vec<f64> = chain.draws.iter().map(f).collect();
        let (m, se) = batch_mean_se(&xs, 40);
        assert!(
            (m - prior_mean).abs() < 3.0 * se,
            "{name}: {m} vs {prior_mean} (se {se})"
        );
    }
}

#[test]
fn fitting_on_a_time_grid_rescales_to_unit_interval() {
    let data = small_data(6, 2, 12);
    let chain = run_gibbs(&small_config(2), &data, &mut chain_rng(6, 0), None).unwrap();
    let g: &TimeGrid = &chain.meta.grid;
    assert!((g.scaled[11] - 1.0).abs() < 1e-15);
    assert!(g.scaled[0] > 0.0);
}
