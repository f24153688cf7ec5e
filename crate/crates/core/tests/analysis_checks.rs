use fedml_core::analysis::{
    self, estimate_constants, estimate_constants_for, h_prime, lemma1_check, mu_prime, Constants, NodeObjectives,
    ProbeConfig, Quadratic,
};
use fedml_core::data::{gen_synthetic, split_sources_targets, Federation, SizeSpec, WeightMode};
use fedml_core::federation::{init_params, meta_step, run_fedml, FedConfig};
use fedml_core::model::LossSpec;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn synthetic(a: f64, nodes: usize, seed: u64) -> Federation {
    let set = gen_synthetic(a, a, nodes, seed, &SizeSpec::synthetic_default(), 5).unwrap();
    split_sources_targets(set, 0.8, 5, seed, WeightMode::FullSize).unwrap()
}

/// Every source carries a copy of the first source's data.
fn identical(fed: &Federation) -> Federation {
    let mut out = fed.clone();
    let first = fed.sources[0].clone();
    for node in &mut out.sources {
        node.train = first.train.clone();
        node.test = first.test.clone();
    }
    out
}

/// `Q diag(eigs) Q^T` with a random orthogonal `Q`.
fn spd_matrix(eigs: &[f64], seed: u64) -> DMatrix<f64> {
    let n = eigs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
    let q = g.qr().q();
    &q * DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(eigs)) * q.transpose()
}

fn quadratic(a: &DMatrix<f64>) -> Quadratic {
    let n = a.nrows();
    let sym = (a + a.transpose()) * 0.5;
    let rows: Vec<f64> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| sym[(i, j)]).collect();
    Quadratic::new(n, rows).unwrap()
}

/// Hessian of the meta-objective, assembled column by column from meta-gradients
/// (exact for quadratics since the meta-gradient is linear in theta).
fn meta_hessian(node: &NodeObjectives<Quadratic>, n: usize, alpha: f64) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let col = node.meta_gradient(&e, alpha);
        for i in 0..n {
            h[(i, j)] = col[i];
        }
    }
    (&h + h.transpose()) * 0.5
}

fn quad_constants(mu: f64, h: f64) -> Constants {
    Constants {
        mu,
        h,
        rho: 0.0,
        b: 0.0,
        delta_i: vec![0.0],
        sigma_i: vec![0.0],
        delta: 0.0,
        sigma: 0.0,
        tau: 0.0,
    }
}

#[test]
fn quadratic_meta_hessian_spectrum_matches_prediction() {
    let eigs = [0.5, 0.9, 1.7, 2.4, 3.0, 4.0];
    let a = spd_matrix(&eigs, 11);
    let q = quadratic(&a);
    let node = NodeObjectives { train: q.clone(), test: q };
    let alpha = 0.1;
    let hm = meta_hessian(&node, eigs.len(), alpha);
    let mut got: Vec<f64> = SymmetricEigen::new(hm).eigenvalues.iter().copied().collect();
    got.sort_by(f64::total_cmp);
    let mut want: Vec<f64> = eigs.iter().map(|l| l * (1.0 - alpha * l).powi(2)).collect();
    want.sort_by(f64::total_cmp);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-8, "{g} vs {w}");
    }
    // With rho = 0 the predicted interval contains the spectrum.
    let c = quad_constants(0.5, 4.0);
    assert!(got[0] >= mu_prime(&c, alpha) - 1e-12);
    assert!(*got.last().unwrap() <= h_prime(&c, alpha) + 1e-12);
}

#[test]
fn scalar_identity_quadratic_attains_both_predictions() {
    let n = 5;
    let c_val = 2.5;
    let a = DMatrix::identity(n, n) * c_val;
    let q = quadratic(&a);
    let node = NodeObjectives { train: q.clone(), test: q };
    let alpha = 0.07;
    let eig = SymmetricEigen::new(meta_hessian(&node, n, alpha)).eigenvalues;
    let c = quad_constants(c_val, c_val);
    for l in eig.iter() {
        assert!((l - mu_prime(&c, alpha)).abs() < 1e-8);
        assert!((l - h_prime(&c, alpha)).abs() < 1e-8);
    }
}

#[test]
fn estimated_constants_of_a_quadratic_bracket_the_spectrum() {
    let eigs = [0.3, 1.0, 2.0, 5.0];
    let q = quadratic(&spd_matrix(&eigs, 5));
    let nodes = vec![NodeObjectives { train: q.clone(), test: q }];
    let probe = ProbeConfig { power_iters: 200, ..ProbeConfig::default() };
    let k = estimate_constants_for(&nodes, &[1.0], &[0.0; 4], &probe).unwrap();
    assert!(k.mu >= 0.3 - 1e-9 && k.mu < 0.3 + 1e-6, "mu {}", k.mu);
    assert!(k.h <= 5.0 + 1e-9 && k.h > 5.0 - 1e-6, "H {}", k.h);
    assert_eq!(k.rho, 0.0);
    assert!(k.delta < 1e-12 && k.sigma < 1e-12);
}

#[test]
fn identical_data_has_zero_dissimilarity() {
    let fed = identical(&synthetic(0.5, 10, 3));
    let spec = LossSpec::default();
    let center = init_params(fed.layout, 1);
    let probe = ProbeConfig { hessian_probes: 2, ..ProbeConfig::default() };
    let k = estimate_constants(&fed, &spec, &probe, &center).unwrap();
    assert!(k.delta_i.iter().all(|d| *d < 1e-10), "{:?}", k.delta_i);
    assert!(k.sigma_i.iter().all(|s| *s < 1e-10), "{:?}", k.sigma_i);
    assert!(k.delta < 1e-10 && k.sigma < 1e-10 && k.tau < 1e-20);
}

#[test]
fn identical_data_trajectory_does_not_depend_on_local_steps() {
    let fed = identical(&synthetic(0.5, 10, 3));
    let spec = LossSpec::default();
    let cfg = |t0| FedConfig {
        iterations: 30,
        local_steps: t0,
        ..FedConfig::default()
    };
    let (a, la) = run_fedml(&fed, &cfg(1), &spec).unwrap();
    let (b, lb) = run_fedml(&fed, &cfg(5), &spec).unwrap();
    let (c, _) = run_fedml(&fed, &cfg(15), &spec).unwrap();
    for other in [&b, &c] {
        let diff = a.sub(other).norm();
        assert!(diff < 1e-9, "{diff:e}");
    }
    for r in &lb {
        let ra = la.iter().find(|l| l.t == r.t).unwrap();
        assert!((ra.global_loss - r.global_loss).abs() < 1e-9);
    }
}

#[test]
fn lemma1_holds_on_a_regularized_node_under_the_cap() {
    let fed = synthetic(0.5, 10, 4);
    let spec = LossSpec::new(1.0).unwrap();
    let single = Federation {
        sources: vec![fed.sources[0].clone()],
        weights: vec![1.0],
        targets: vec![],
        ..fed
    };
    let center = init_params(single.layout, 1);
    let radius = 1.0;
    let probe = ProbeConfig { radius, hessian_probes: 10, power_iters: 30, ..ProbeConfig::default() };
    let k = estimate_constants(&single, &spec, &probe, &center).unwrap();
    let alpha = 0.5 * analysis::alpha_cap(&k);
    let out = lemma1_check(&single.sources[0], &spec, alpha, &k, 1000, 99, &center, radius).unwrap();
    assert!(out.mu_prime > 0.0);
    assert!(out.pass, "{out:?}");
}

#[test]
fn lemma1_refuses_alpha_above_cap() {
    let fed = synthetic(0.5, 10, 4);
    let spec = LossSpec::new(0.01).unwrap();
    let center = init_params(fed.layout, 1);
    let k = estimate_constants(&fed, &spec, &ProbeConfig { hessian_probes: 1, ..ProbeConfig::default() }, &center).unwrap();
    let err = lemma1_check(&fed.sources[0], &spec, 10.0 * analysis::alpha_cap(&k), &k, 10, 1, &center, 10.0).unwrap_err();
    assert!(err.to_string().contains("learning-rate cap violated"));
}

#[test]
fn fitted_dissimilarity_constant_validates_on_holdout() {
    let fed = synthetic(0.5, 20, 6);
    let spec = LossSpec::default();
    let center = init_params(fed.layout, 1);
    let probe = ProbeConfig { hessian_probes: 3, ..ProbeConfig::default() };
    let k = estimate_constants(&fed, &spec, &probe, &center).unwrap();
    let fit = analysis::theorem1_gap(&fed, &k, &spec, 0.01, 30, 1, &center, 10.0, None).unwrap();
    assert!(fit.holds());
    let holdout = analysis::theorem1_gap(&fed, &k, &spec, 0.01, 30, 2, &center, 10.0, Some(fit.c)).unwrap();
    assert!(holdout.holds(), "{holdout:?}");
}

#[test]
fn adaptation_loss_ranks_with_distance_to_target_optimum() {
    let fed = synthetic(0.5, 50, 1);
    assert!(fed.targets.len() >= 5);
    let spec = LossSpec::default();
    let cfg = FedConfig { iterations: 200, ..FedConfig::default() };
    let (theta, _) = run_fedml(&fed, &cfg, &spec).unwrap();
    let sim = analysis::target_similarity(&fed, &theta, cfg.alpha, &spec, 300, 0.05).unwrap();
    assert!(sim.rank_correlation > 0.0, "{sim:?}");
}

#[test]
fn reference_optimum_lower_bounds_the_run() {
    let fed = synthetic(0.0, 10, 2);
    let spec = LossSpec::default();
    let cfg = FedConfig { iterations: 40, local_steps: 4, ..FedConfig::default() };
    let gap = analysis::empirical_convergence_gap(&fed, &cfg, &spec).unwrap();
    assert!(gap.gaps.iter().all(|(_, g)| *g >= 0.0));
    assert_eq!(gap.gaps.len(), 11);
}

#[test]
fn meta_step_on_quadratic_matches_closed_form() {
    let a = spd_matrix(&[1.0, 2.0, 3.0], 2);
    let q = quadratic(&a);
    let theta = [0.4, -1.0, 2.0];
    let alpha = 0.2;
    let got = meta_step(&q, &[&q], &theta, alpha, false).grad;
    let m = DMatrix::identity(3, 3) - &a * alpha;
    let want = &m * &a * &m * nalgebra::DVector::from_row_slice(&theta);
    for i in 0..3 {
        assert!((got[i] - want[i]).abs() < 1e-12);
    }
}
