mod common;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use perfpd::distmap::{BaseDistribution, LocationFamilyMap, LossConstants, NoiseSpec};
use perfpd::estimator::{BaseSamplePool, EstimatorState};
use perfpd::experiments::{build_linreg, ExperimentDetails};
use perfpd::problem::{
    grad_performative_risk_linear_regression, performative_optimum_linear_regression,
    Constraints, ConvexInequalities, FeasibleSet, Loss, NoConstraints, PortfolioLoss, Problem,
    RegressionLoss,
};
use perfpd::solver::{
    grad_lagrangian_dual, grad_lagrangian_primal, grad_pr_hat, pr_hat_value, run, select_delta,
    step, SolverConfig, SolverState, Strategy, Workspace,
};

fn nominal_constants() -> LossConstants {
    LossConstants {
        beta: 0.5,
        l_theta: 1.0,
        l_z: 1.0,
        gamma_theta: 1.0,
        gamma_z: 1.0,
    }
}

fn random_pool(k: usize, n: usize, seed: u64) -> BaseSamplePool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    BaseSamplePool::from_columns(DMatrix::from_fn(k, n, |_, _| rng.gen_range(-1.0..1.0)))
}

// ---------------------------------------------------------------------------
// Gradient approximation
// ---------------------------------------------------------------------------

#[test]
fn zero_estimate_and_zero_pool_reduce_to_plain_gradient() {
    let loss = RegressionLoss::new(2, 3, 0.5, nominal_constants());
    let pool = BaseSamplePool::from_columns(DMatrix::zeros(8, 1));
    let a_hat = DMatrix::zeros(8, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let theta = DVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0));
    let grad = grad_pr_hat(Strategy::Adaptive, &pool, &a_hat, &loss, &theta);
    let expected = loss.grad_theta(&theta, &DVector::zeros(8));
    assert!((&grad - &expected).amax() < 1e-14);
}

#[test]
fn chain_gradient_is_total_derivative_of_pool_risk() {
    let loss = RegressionLoss::new(2, 3, 0.5, nominal_constants());
    let pool = random_pool(8, 17, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for strategy in [Strategy::Adaptive, Strategy::KnownA] {
        let a_tilde = DMatrix::from_fn(8, 6, |_, _| rng.gen_range(-0.5..0.5));
        let theta = DVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0));
        let grad = grad_pr_hat(strategy, &pool, &a_tilde, &loss, &theta);
        let fd = common::fd_gradient(
            |t| pr_hat_value(&pool, &a_tilde, &loss, t),
            &theta,
            1e-5,
        );
        let rel = (&grad - &fd).norm() / fd.norm().max(1.0);
        assert!(rel < 1e-8, "{strategy:?}: rel err {rel}");
    }
}

#[test]
fn stable_point_gradient_is_partial_derivative_at_frozen_shift() {
    let loss = RegressionLoss::new(2, 3, 0.5, nominal_constants());
    let pool = random_pool(8, 13, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a_tilde = DMatrix::from_fn(8, 6, |_, _| rng.gen_range(-0.5..0.5));
    let theta0 = DVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0));
    let grad = grad_pr_hat(Strategy::StablePoint, &pool, &a_tilde, &loss, &theta0);
    // freeze the distribution shift at theta0 and differentiate only the
    // decision argument
    let shift = &a_tilde * &theta0;
    let fd = common::fd_gradient(
        |t| {
            let mut total = 0.0;
            for j in 0..pool.n() {
                let zhat = pool.samples().column(j) + &shift;
                total += loss.value(t, &zhat.clone_owned());
            }
            total / pool.n() as f64
        },
        &theta0,
        1e-5,
    );
    let rel = (&grad - &fd).norm() / fd.norm().max(1.0);
    assert!(rel < 1e-8, "rel err {rel}");
}

#[test]
fn adaptive_equals_known_a_when_estimate_is_exact() {
    let loss = RegressionLoss::new(2, 3, 0.5, nominal_constants());
    let pool = random_pool(8, 9, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = DMatrix::from_fn(8, 6, |_, _| rng.gen_range(-0.5..0.5));
    let theta = DVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0));
    let ga = grad_pr_hat(Strategy::Adaptive, &pool, &a, &loss, &theta);
    let gk = grad_pr_hat(Strategy::KnownA, &pool, &a, &loss, &theta);
    assert_eq!(ga, gk);
}

/// With the block-structured estimate (zero feature rows, per-node label row
/// `μ̂ᵢᵀ`), the adaptive gradient collapses to the per-node form
/// `(1/n) Σᵢ r̂ᵢⱼ (μ̂ⱼ − xᵢⱼ)` with `r̂ = ŷ − θⱼᵀx`.
#[test]
fn adaptive_gradient_matches_structured_regression_form() {
    let (nodes, d) = (3, 2);
    let k = nodes * (d + 1);
    let dim = nodes * d;
    let loss = RegressionLoss::new(nodes, d, 0.5, nominal_constants());
    let pool = random_pool(k, 11, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mu_hats: Vec<DVector<f64>> = (0..nodes)
        .map(|_| DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0)))
        .collect();
    let mut a_hat = DMatrix::zeros(k, dim);
    for (j, mu) in mu_hats.iter().enumerate() {
        for c in 0..d {
            a_hat[(j * (d + 1) + d, j * d + c)] = mu[c];
        }
    }
    let theta = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0));
    let grad = grad_pr_hat(Strategy::Adaptive, &pool, &a_hat, &loss, &theta);

    let mut expected = DVector::zeros(dim);
    for i in 0..pool.n() {
        let z = pool.samples().column(i);
        for j in 0..nodes {
            let x = z.rows(j * (d + 1), d);
            let tj = theta.rows(j * d, d);
            let y_hat = z[j * (d + 1) + d] + mu_hats[j].dot(&tj);
            let r = y_hat - tj.dot(&x);
            for c in 0..d {
                expected[j * d + c] += r * (mu_hats[j][c] - x[c]);
            }
        }
    }
    expected /= pool.n() as f64;
    assert!(
        (&grad - &expected).amax() < 1e-12,
        "max dev {}",
        (&grad - &expected).amax()
    );
}

#[test]
fn known_a_sigma_pool_matches_closed_form_gradient() {
    let exp = build_linreg(90, 10, 0.5, 3, 1.0).unwrap();
    let ExperimentDetails::LinReg(details) = &exp.details else {
        panic!("wrong experiment kind");
    };
    let loss = RegressionLoss::new(10, 3, 1.0, nominal_constants());
    let pool = BaseSamplePool::sigma_points(&exp.map.base().mean(), &exp.map.base_cov()).unwrap();
    let oracle = exp.problem.oracle.as_ref().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    for _ in 0..10 {
        let theta = common::random_feasible_theta(&exp.problem, &oracle.theta_po, 1.0, &mut rng);
        let grad = grad_pr_hat(Strategy::KnownA, &pool, exp.map.a(), &loss, &theta);
        let fd = common::fd_gradient(
            |t| performative_risk_linear_regression(t, &details.params).unwrap(),
            &theta,
            1e-5,
        );
        let rel = (&grad - &fd).norm() / fd.norm().max(1.0);
        assert!(rel < 1e-6, "rel err {rel}");
    }
}

use perfpd::problem::performative_risk_linear_regression;

// ---------------------------------------------------------------------------
// Lagrangian gradients
// ---------------------------------------------------------------------------

#[test]
fn primal_lagrangian_gradient_matches_finite_differences() {
    let loss = PortfolioLoss::new(0.5, nominal_constants());
    let pool = random_pool(4, 7, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let psi_half = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-0.5..0.5));
    let cons = ConvexInequalities::new(
        vec![(DVector::from_element(4, 1.0), 1.0)],
        vec![(&psi_half * psi_half.transpose(), 0.2)],
        2.0,
    );
    let a = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-0.3..0.3));
    let theta = DVector::from_fn(4, |_, _| rng.gen_range(-0.5..0.5));
    let lambda = DVector::from_fn(2, |_, _| rng.gen_range(0.0..2.0));

    let gp = grad_pr_hat(Strategy::KnownA, &pool, &a, &loss, &theta);
    let grad = grad_lagrangian_primal(&gp, &cons, &theta, &lambda);
    let fd = common::fd_gradient(
        |t| pr_hat_value(&pool, &a, &loss, t) + lambda.dot(&cons.g(t)),
        &theta,
        1e-6,
    );
    let rel = (&grad - &fd).norm() / fd.norm().max(1.0);
    assert!(rel < 1e-6, "rel err {rel}");
}

#[test]
fn dual_lagrangian_gradient_is_regularized_constraint_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cons = ConvexInequalities::new(
        vec![
            (DVector::from_vec(vec![1.0, -1.0, 0.5]), 0.3),
            (DVector::from_vec(vec![0.0, 2.0, 1.0]), 1.0),
        ],
        vec![],
        2.0,
    );
    let (delta, eta) = (1.7, 0.05);
    for _ in 0..10 {
        let theta = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
        let lambda = DVector::from_fn(2, |_, _| rng.gen_range(0.0..3.0));
        let grad = grad_lagrangian_dual(&cons, &theta, &lambda, delta, eta);
        let expected = cons.g(&theta) - delta * eta * &lambda;
        assert!((&grad - &expected).amax() < 1e-14);
        // lambda = 0 reduces to the raw constraint value
        let at_zero = grad_lagrangian_dual(&cons, &theta, &DVector::zeros(2), delta, eta);
        assert!((&at_zero - cons.g(&theta)).amax() < 1e-14);
    }
}

// ---------------------------------------------------------------------------
// The step map
// ---------------------------------------------------------------------------

/// A KKT point of the constrained problem is a fixed point of the
/// unregularized update (δ = 0). Instance chosen so the optimum and its
/// multiplier are hand-computable: minimize −z̄ᵀθ + ξ∥θ∥² with z̄ = (2,2),
/// ξ = ½ under 1ᵀθ ≤ 2 gives θ* = (1,1), λ* = 1.
#[test]
fn kkt_point_is_fixed_under_unregularized_step() {
    let z_bar = DVector::from_vec(vec![2.0, 2.0]);
    let map = LocationFamilyMap::new(
        BaseDistribution::point(z_bar.clone()),
        DMatrix::zeros(2, 2),
    )
    .unwrap();
    let problem = Problem {
        loss: Box::new(PortfolioLoss::new(0.5, nominal_constants())),
        constraints: Box::new(ConvexInequalities::new(
            vec![(DVector::from_element(2, 1.0), 2.0)],
            vec![],
            10.0,
        )),
        feasible: FeasibleSet::Ball { r: 10.0 },
        oracle: None,
    };
    let mut cfg = SolverConfig::new(5, 0.1, 0.0, 4, NoiseSpec::standard_normal(2));
    cfg.strategy = Strategy::KnownA;
    let pool = BaseSamplePool::from_columns(DMatrix::from_fn(2, 4, |r, _| z_bar[r]));

    let theta_star = DVector::from_vec(vec![1.0, 1.0]);
    let lambda_star = DVector::from_vec(vec![1.0]);
    let mut state = SolverState {
        theta: theta_star.clone(),
        lambda: lambda_star.clone(),
        estimator: EstimatorState::new(2, 2, cfg.zeta),
        t: 1,
    };
    let mut ws = Workspace::new(2, 2, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut queries = 0;
    for _ in 0..5 {
        step(
            &mut state, &cfg, &problem, &map, &pool, &mut rng, &mut ws, &mut queries,
        )
        .unwrap();
        assert!((&state.theta - &theta_star).amax() < 1e-12);
        assert!((&state.lambda - &lambda_star).amax() < 1e-12);
    }
}

#[test]
fn dual_stays_zero_while_strictly_feasible() {
    let exp = build_linreg(92, 10, 0.5, 3, 1.0).unwrap();
    let mut cfg = SolverConfig::new(1, 5e-3, 1.0, 16, exp.noise);
    cfg.strategy = Strategy::Adaptive;
    cfg.seed = 93;
    // theta_1 = 0 keeps every proximity constraint strictly negative, so the
    // first dual update must clip back to zero
    let summary = run(&cfg, &exp.problem, &exp.map, |_| {}).unwrap();
    assert!(summary.lambda.iter().all(|&l| l == 0.0));
}

#[test]
fn unconstrained_known_a_run_converges_to_optimum() {
    let exp = build_linreg(94, 10, 0.5, 3, 1.0).unwrap();
    let ExperimentDetails::LinReg(details) = &exp.details else {
        panic!("wrong experiment kind");
    };
    let (theta_po, _) = performative_optimum_linear_regression(&details.params).unwrap();
    let problem = Problem {
        loss: Box::new(RegressionLoss::new(10, 3, 0.5, nominal_constants())),
        constraints: Box::new(NoConstraints),
        feasible: FeasibleSet::Ball { r: 100.0 },
        oracle: None,
    };
    let mut cfg = SolverConfig::new(10_000, 5e-3, 1.0, 0, exp.noise);
    cfg.strategy = Strategy::KnownA;
    cfg.exact_expectation = true;
    let summary = run(&cfg, &problem, &exp.map, |_| {}).unwrap();
    let dev = (&summary.theta - &theta_po).norm();
    assert!(dev < 1e-4, "final deviation {dev}");
    // the exact-expectation pool consumes no simulator samples
    assert_eq!(summary.queries, 10_000);
}

// ---------------------------------------------------------------------------
// run(): ledger, determinism, edge cases
// ---------------------------------------------------------------------------

#[test]
fn zero_horizon_yields_empty_trajectory_but_draws_pool() {
    let exp = build_linreg(95, 10, 0.5, 3, 1.0).unwrap();
    let mut cfg = SolverConfig::new(0, 5e-3, 1.0, 40, exp.noise);
    cfg.strategy = Strategy::Adaptive;
    let mut rows = 0;
    let summary = run(&cfg, &exp.problem, &exp.map, |_| rows += 1).unwrap();
    assert_eq!(rows, 0);
    assert_eq!(summary.steps, 0);
    assert_eq!(summary.queries, 40);
}

#[test]
fn sample_ledger_counts_by_strategy() {
    let exp = build_linreg(96, 10, 0.5, 3, 1.0).unwrap();
    for (strategy, expected) in [
        (Strategy::Adaptive, 7 + 2 * 13),
        (Strategy::StablePoint, 7 + 13),
        (Strategy::KnownA, 7 + 13),
    ] {
        let mut cfg = SolverConfig::new(13, 5e-3, 1.0, 7, exp.noise);
        cfg.strategy = strategy;
        let summary = run(&cfg, &exp.problem, &exp.map, |_| {}).unwrap();
        assert_eq!(summary.queries, expected, "{strategy:?}");
    }
}

#[test]
fn reruns_are_bit_identical() {
    let exp = build_linreg(97, 10, 0.5, 3, 1.0).unwrap();
    let mut cfg = SolverConfig::new(200, 5e-3, 1.0, 32, exp.noise);
    cfg.strategy = Strategy::Adaptive;
    cfg.seed = 7;
    cfg.stream = 3;
    let mut rows_a = Vec::new();
    let sa = run(&cfg, &exp.problem, &exp.map, |r| rows_a.push(r.clone())).unwrap();
    let mut rows_b = Vec::new();
    let sb = run(&cfg, &exp.problem, &exp.map, |r| rows_b.push(r.clone())).unwrap();
    assert_eq!(rows_a, rows_b);
    assert_eq!(sa.theta, sb.theta);
    assert_eq!(sa.lambda, sb.lambda);
    assert_eq!(sa.queries, sb.queries);
}

#[test]
fn select_delta_midpoint_for_small_step_size() {
    let delta = select_delta(1e-4, 1.0).unwrap();
    assert!((3.99..=2.5e7).contains(&delta));
    assert!(2.0 * delta * delta * 1e-8 - delta + 4.0 <= 1e-9);
}

/// Per-step gradient approximation error against the instance-constant bound
/// `(2σ²/n) + (4/n)(2L_Z² + β²R²(1 + 2σ_max(A)))·∥Â_t − A∥²_F`, allowing the
/// stated 2x slack, with `∇PR` from the closed form.
#[test]
fn gradient_error_tracks_estimation_error_bound() {
    let exp = build_linreg(98, 10, 0.5, 3, 1.0).unwrap();
    let ExperimentDetails::LinReg(details) = &exp.details else {
        panic!("wrong experiment kind");
    };
    let loss = RegressionLoss::new(10, 3, 1.0, exp.problem.loss.constants());
    let lc = loss.constants();
    let n = 320usize;
    let big_r = exp.problem.feasible.radius_bound();
    let sigma2 = exp.map.base_cov().trace();
    let smax = exp.map.sensitivity();
    let coef = (4.0 / n as f64)
        * (2.0 * lc.l_z * lc.l_z + lc.beta * lc.beta * big_r * big_r * (1.0 + 2.0 * smax));
    let base_term = 2.0 * sigma2 / n as f64;

    let replicas = 10u64;
    let t_max = 500usize;
    let mut lhs = vec![0.0f64; t_max];
    let mut rhs_err = vec![0.0f64; t_max];
    for rep in 0..replicas {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        rng.set_stream(rep);
        let pool = BaseSamplePool::draw(&exp.map, n, &mut rng);
        let mut cfg = SolverConfig::new(t_max as u64, 5e-3, 1.0, n, exp.noise);
        cfg.strategy = Strategy::Adaptive;
        let mut state = SolverState {
            theta: DVector::zeros(30),
            lambda: DVector::zeros(exp.problem.constraints.m()),
            estimator: EstimatorState::new(40, 30, cfg.zeta),
            t: 1,
        };
        let mut ws = Workspace::new(40, 30, exp.problem.constraints.m());
        let mut queries = 0;
        for t in 0..t_max {
            let approx = grad_pr_hat(
                Strategy::Adaptive,
                &pool,
                state.estimator.a_hat(),
                &loss,
                &state.theta,
            );
            let exact =
                grad_performative_risk_linear_regression(&state.theta, &details.params).unwrap();
            lhs[t] += (&approx - &exact).norm_squared();
            rhs_err[t] += state.estimator.estimation_error(exp.map.a());
            step(
                &mut state, &cfg, &exp.problem, &exp.map, &pool, &mut rng, &mut ws, &mut queries,
            )
            .unwrap();
        }
    }
    for t in 0..t_max {
        let mean_lhs = lhs[t] / replicas as f64;
        let bound = 2.0 * (base_term + coef * rhs_err[t] / replicas as f64);
        assert!(
            mean_lhs <= bound,
            "t={t}: error {mean_lhs} exceeds bound {bound}"
        );
    }
}
