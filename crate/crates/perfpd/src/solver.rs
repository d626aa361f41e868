//! The adaptive primal-dual loop.
//!
//! Each iteration deploys the current decision, observes samples from the
//! reacting distribution, refreshes the shift-matrix estimate (adaptive
//! strategy), and takes one projected primal step and one clipped dual step
//! on the regularized Lagrangian
//!
//! `L(θ, λ) = PR(θ) + λᵀg(θ) − (δη/2)∥λ∥²`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::distmap::{LocationFamilyMap, NoiseSpec};
use crate::estimator::{BaseSamplePool, EstimatorState, ZetaSchedule};
use crate::problem::{Constraints, Loss, Problem};
use crate::{Error, Result};

/// Gradient approximation strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Full approximate gradient with the online estimate of the shift
    /// matrix; queries a perturbed point every iteration.
    Adaptive,
    /// Ignores the distribution's dependence on the decision (converges to
    /// a performative stable point, not the optimum).
    StablePoint,
    /// Full gradient with the true shift matrix (oracle baseline).
    KnownA,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Adaptive => "adaptive",
            Strategy::StablePoint => "stable-point",
            Strategy::KnownA => "known-a",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(Strategy::Adaptive),
            "stable-point" => Ok(Strategy::StablePoint),
            "known-a" => Ok(Strategy::KnownA),
            other => Err(Error::Usage(format!(
                "unknown strategy '{other}' (expected adaptive, stable-point, or known-a)"
            ))),
        }
    }

    pub const ALL: [Strategy; 3] = [Strategy::Adaptive, Strategy::StablePoint, Strategy::KnownA];
}

/// Primal iterate initialization.
#[derive(Debug, Clone)]
pub enum ThetaInit {
    Zeros,
    /// Uniform draw over the feasible set, shrunk toward the origin until
    /// instance constraints hold as well (the origin must satisfy them).
    RandomFeasible,
    Given(DVector<f64>),
}

/// Configuration of one solver run.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Horizon `T`.
    pub t_horizon: u64,
    /// Primal/dual step size `η`.
    pub eta: f64,
    /// Dual regularization control `δ`.
    pub delta: f64,
    /// Base-pool size `n`.
    pub n_pool: usize,
    pub noise: NoiseSpec,
    pub strategy: Strategy,
    pub seed: u64,
    /// RNG stream, set per replica.
    pub stream: u64,
    pub zeta: ZetaSchedule,
    /// Record every `stride`-th iteration; `0` selects the default rule
    /// (every iteration up to `T = 10⁵`, every 10th beyond).
    pub stride: u64,
    pub theta_init: ThetaInit,
    /// Replace the drawn pool with deterministic sigma points matching the
    /// base mean and covariance exactly (diagnostic mode; consumes no
    /// simulator samples).
    pub exact_expectation: bool,
}

impl SolverConfig {
    pub fn new(t_horizon: u64, eta: f64, delta: f64, n_pool: usize, noise: NoiseSpec) -> Self {
        SolverConfig {
            t_horizon,
            eta,
            delta,
            n_pool,
            noise,
            strategy: Strategy::Adaptive,
            seed: 0,
            stream: 0,
            zeta: ZetaSchedule::RecipOffset { offset: 10.0 },
            stride: 0,
            theta_init: ThetaInit::Zeros,
            exact_expectation: false,
        }
    }

    /// Theory schedule: `η = 1/√T`, `δ` at the midpoint of the admissible
    /// interval, `ζ_t = 2/(κ₁t + 2κ₃)`.
    pub fn theory(t_horizon: u64, l_g: f64, n_pool: usize, noise: NoiseSpec) -> Result<Self> {
        let eta = 1.0 / (t_horizon as f64).sqrt();
        let delta = select_delta(eta, l_g)?;
        let mut cfg = SolverConfig::new(t_horizon, eta, delta, n_pool, noise);
        cfg.zeta = ZetaSchedule::Theory {
            kappa1: noise.kappa1,
            kappa3: noise.kappa3,
        };
        Ok(cfg)
    }

    pub fn effective_stride(&self) -> u64 {
        if self.stride > 0 {
            self.stride
        } else if self.t_horizon <= 100_000 {
            1
        } else {
            10
        }
    }
}

/// Iterates of one run.
#[derive(Debug, Clone)]
pub struct SolverState {
    pub theta: DVector<f64>,
    pub lambda: DVector<f64>,
    pub estimator: EstimatorState,
    /// 1-based iteration counter of the NEXT step.
    pub t: u64,
}

/// Midpoint of the admissible interval for `δ`:
/// `[(1 − √(1 − 32η²L_g²))/(4η²), (1 + √(1 − 32η²L_g²))/(4η²)]`.
///
/// The midpoint `1/(4η²)` satisfies `2δ²η² − δ + 4L_g² ≤ 0` exactly when
/// the interval exists, which requires `1 − 32η²L_g² ≥ 0`; with `η = 1/√T`
/// that is the horizon condition `T ≥ 32L_g²`.
pub fn select_delta(eta: f64, l_g: f64) -> Result<f64> {
    if !(eta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step size must be positive, got {eta}"
        )));
    }
    let disc = 1.0 - 32.0 * eta * eta * l_g * l_g;
    if disc < 0.0 {
        return Err(Error::HorizonTooShort {
            required: (32.0 * l_g * l_g).ceil() as u64,
            got: (1.0 / (eta * eta)).floor() as u64,
        });
    }
    Ok(1.0 / (4.0 * eta * eta))
}

/// Scratch buffers reused across iterations of one run.
pub struct Workspace {
    shift: DVector<f64>,
    zhat: DVector<f64>,
    gz: DVector<f64>,
    grad: DVector<f64>,
    g_vals: DVector<f64>,
    z_t: DVector<f64>,
    z_prime: DVector<f64>,
    u: DVector<f64>,
    theta_next: DVector<f64>,
    theta_pert: DVector<f64>,
}

impl Workspace {
    pub fn new(k: usize, d: usize, m: usize) -> Self {
        Workspace {
            shift: DVector::zeros(k),
            zhat: DVector::zeros(k),
            gz: DVector::zeros(k),
            grad: DVector::zeros(d),
            g_vals: DVector::zeros(m),
            z_t: DVector::zeros(k),
            z_prime: DVector::zeros(k),
            u: DVector::zeros(d),
            theta_next: DVector::zeros(d),
            theta_pert: DVector::zeros(d),
        }
    }
}

/// Pool-approximate performative risk `(1/n) Σᵢ ℓ(θ; Z₀ᵢ + Ãθ)`.
///
/// Its exact total derivative in `θ` is what [`grad_pr_hat`] computes for
/// the adaptive/known-A strategies, which is what the finite-difference
/// oracles in the tests rely on.
pub fn pr_hat_value(
    pool: &BaseSamplePool,
    a_tilde: &DMatrix<f64>,
    loss: &dyn Loss,
    theta: &DVector<f64>,
) -> f64 {
    let shift = a_tilde * theta;
    let mut total = 0.0;
    let mut zhat = DVector::zeros(pool.dim());
    for j in 0..pool.n() {
        zhat.copy_from(&pool.samples().column(j));
        zhat += &shift;
        total += loss.value(theta, &zhat);
    }
    total / pool.n() as f64
}

/// Gradient approximation (allocating form).
///
/// Adaptive/known-A: `(1/n) Σᵢ [∇_θℓ(θ; Ẑᵢ) + Ãᵀ∇_Zℓ(θ; Ẑᵢ)]` with
/// `Ẑᵢ = Z₀ᵢ + Ãθ`, where `Ã` is the current estimate (adaptive) or the
/// true matrix (known-A). Stable-point: first summand only, with the pool
/// shifted by the observed data model `Ã` (the environment's matrix).
pub fn grad_pr_hat(
    strategy: Strategy,
    pool: &BaseSamplePool,
    a_tilde: &DMatrix<f64>,
    loss: &dyn Loss,
    theta: &DVector<f64>,
) -> DVector<f64> {
    let mut ws = Workspace::new(pool.dim(), theta.len(), 0);
    let mut out = DVector::zeros(theta.len());
    grad_pr_hat_into(strategy, pool, a_tilde, loss, theta, &mut ws, &mut out);
    out
}

/// Allocation-free form of [`grad_pr_hat`].
pub fn grad_pr_hat_into(
    strategy: Strategy,
    pool: &BaseSamplePool,
    a_tilde: &DMatrix<f64>,
    loss: &dyn Loss,
    theta: &DVector<f64>,
    ws: &mut Workspace,
    out: &mut DVector<f64>,
) {
    let n = pool.n() as f64;
    let chain = !matches!(strategy, Strategy::StablePoint);
    ws.shift.gemv(1.0, a_tilde, theta, 0.0);
    out.fill(0.0);
    ws.gz.fill(0.0);
    for j in 0..pool.n() {
        ws.zhat.copy_from(&pool.samples().column(j));
        ws.zhat += &ws.shift;
        loss.acc_grad_theta(theta, &ws.zhat, out);
        if chain {
            loss.acc_grad_z(theta, &ws.zhat, &mut ws.gz);
        }
    }
    *out /= n;
    if chain {
        out.gemv_tr(1.0 / n, a_tilde, &ws.gz, 1.0);
    }
}

/// Primal Lagrangian gradient `∇_θL = grad_pr + J(θ)ᵀλ`.
pub fn grad_lagrangian_primal(
    grad_pr: &DVector<f64>,
    constraints: &dyn Constraints,
    theta: &DVector<f64>,
    lambda: &DVector<f64>,
) -> DVector<f64> {
    let mut out = grad_pr.clone();
    constraints.acc_jt_lambda(theta, lambda, &mut out);
    out
}

/// Dual Lagrangian gradient `∇_λL = g(θ) − δηλ`.
pub fn grad_lagrangian_dual(
    constraints: &dyn Constraints,
    theta: &DVector<f64>,
    lambda: &DVector<f64>,
    delta: f64,
    eta: f64,
) -> DVector<f64> {
    let mut out = constraints.g(theta);
    out.axpy(-delta * eta, lambda, 1.0);
    out
}

/// One iteration of the loop, in the algorithm's order: observe `Z_t` at
/// the deployed decision; (adaptive only) draw `u_t`, observe the perturbed
/// point, update the estimate; form the gradient approximation; projected
/// primal step; clipped dual step using the pre-update decision.
///
/// `queries` counts simulator observations (the sample ledger).
#[allow(clippy::too_many_arguments)]
pub fn step<R: Rng + ?Sized>(
    state: &mut SolverState,
    config: &SolverConfig,
    problem: &Problem,
    map: &LocationFamilyMap,
    pool: &BaseSamplePool,
    rng: &mut R,
    ws: &mut Workspace,
    queries: &mut u64,
) -> Result<()> {
    map.sample_into(&state.theta, rng, &mut ws.z_t)?;
    *queries += 1;

    if config.strategy == Strategy::Adaptive {
        config.noise.sample_into(rng, &mut ws.u);
        ws.theta_pert.copy_from(&state.theta);
        ws.theta_pert += &ws.u;
        map.sample_into(&ws.theta_pert, rng, &mut ws.z_prime)?;
        *queries += 1;
        state.estimator.ls_update(&ws.u, &ws.z_t, &ws.z_prime)?;
    }

    let a_tilde = match config.strategy {
        Strategy::Adaptive => state.estimator.a_hat(),
        Strategy::KnownA | Strategy::StablePoint => map.a(),
    };
    // the gradient buffer is taken out of the workspace for the call so the
    // remaining scratch can be borrowed alongside it
    let mut grad = std::mem::replace(&mut ws.grad, DVector::zeros(0));
    grad_pr_hat_into(
        config.strategy,
        pool,
        a_tilde,
        problem.loss.as_ref(),
        &state.theta,
        ws,
        &mut grad,
    );
    problem
        .constraints
        .g_into(&state.theta, &mut ws.g_vals);
    problem
        .constraints
        .acc_jt_lambda(&state.theta, &state.lambda, &mut grad);

    ws.theta_next.copy_from(&state.theta);
    ws.theta_next.axpy(-config.eta, &grad, 1.0);
    problem.feasible.project_in_place(&mut ws.theta_next);
    ws.grad = grad;

    // Dual step uses g evaluated at the pre-update decision.
    let de = config.delta * config.eta;
    for i in 0..state.lambda.len() {
        let v = state.lambda[i] + config.eta * (ws.g_vals[i] - de * state.lambda[i]);
        state.lambda[i] = v.max(0.0);
    }
    state.theta.copy_from(&ws.theta_next);
    state.t += 1;
    Ok(())
}

/// One row of the recorded trajectory.
///
/// `pr` is the closed-form performative risk at the deployed decision.
/// `regret_rel` and `vio_rel` are the running sums `Reg(t)`/`Vio_m(t)`
/// normalized by `t·Reg(1)` and `t·|Vio_m(1)|` (`m` = last constraint).
/// `dec_dev` is `∥θ_t − θ_PO∥²` and `param_err` is `∥Â_t − A∥²_F`.
/// `g` holds the instantaneous constraint values `g(θ_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub t: u64,
    pub pr: f64,
    pub regret_rel: f64,
    pub vio_rel: f64,
    pub dec_dev: f64,
    pub param_err: f64,
    pub g: Vec<f64>,
}

/// Final accounting of one run.
pub struct RunSummary {
    /// Simulator observations consumed (pool + per-step queries).
    pub queries: u64,
    pub steps: u64,
    pub theta: DVector<f64>,
    pub lambda: DVector<f64>,
    pub estimator: EstimatorState,
    /// Final cumulative regret `Reg(T)` (NaN without an oracle).
    pub regret: f64,
    /// Final cumulative violations `Vio_i(T)`, one per constraint.
    pub vio: Vec<f64>,
}

/// Compensated accumulator for the long regret/violation sums.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Kahan {
    sum: f64,
    c: f64,
}

impl Kahan {
    pub(crate) fn add(&mut self, x: f64) {
        let y = x - self.c;
        let t = self.sum + y;
        self.c = (t - self.sum) - y;
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum
    }
}

/// Runs the full loop: draws the base pool at `θ = 0`, initializes
/// `θ₁ ∈ Θ`, `λ₁ = 0`, `Â₁ = 0`, then iterates [`step`] `T` times, passing
/// every `stride`-th record to `recorder`.
pub fn run<F: FnMut(&TrajectoryRecord)>(
    config: &SolverConfig,
    problem: &Problem,
    map: &LocationFamilyMap,
    mut recorder: F,
) -> Result<RunSummary> {
    let k = map.sample_dim();
    let d = map.decision_dim();
    let m = problem.constraints.m();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(config.stream);
    let mut queries: u64 = 0;

    let pool = if config.exact_expectation {
        BaseSamplePool::sigma_points(&map.base().mean(), &map.base_cov())?
    } else {
        let p = BaseSamplePool::draw(map, config.n_pool, &mut rng);
        queries += config.n_pool as u64;
        p
    };

    let theta0 = match &config.theta_init {
        ThetaInit::Zeros => {
            let z = DVector::zeros(d);
            problem.feasible.project(&z)
        }
        ThetaInit::Given(v) => {
            if v.len() != d {
                return Err(Error::DimensionMismatch {
                    context: "theta_init",
                    expected: d,
                    got: v.len(),
                });
            }
            problem.feasible.project(v)
        }
        ThetaInit::RandomFeasible => random_feasible(problem, d, &mut rng),
    };

    let mut state = SolverState {
        theta: theta0,
        lambda: DVector::zeros(m),
        estimator: EstimatorState::new(k, d, config.zeta),
        t: 1,
    };
    let mut ws = Workspace::new(k, d, m);
    let stride = config.effective_stride();

    let oracle = problem.oracle.as_ref();
    let mut reg_acc = Kahan::default();
    let mut vio_acc = vec![Kahan::default(); m];
    let mut reg_denom = f64::NAN;
    let mut vio_denom = f64::NAN;
    let mut g_now = DVector::zeros(m);

    for t in 1..=config.t_horizon {
        // Metrics describe the decision deployed at iteration t, before the
        // update moves it.
        let (pr_t, dec_dev) = match oracle {
            Some(o) => {
                let pr_t = (o.pr)(&state.theta);
                let dd = (&state.theta - &o.theta_po).norm_squared();
                reg_acc.add(pr_t - o.pr_min);
                (pr_t, dd)
            }
            None => (f64::NAN, f64::NAN),
        };
        problem.constraints.g_into(&state.theta, &mut g_now);
        for i in 0..m {
            vio_acc[i].add(g_now[i]);
        }
        if t == 1 {
            reg_denom = match oracle {
                // Reg(1) can be zero when θ₁ is already optimal; fall back
                // to an absolute scale rather than dividing by zero.
                Some(o) => {
                    let r1 = (o.pr)(&state.theta) - o.pr_min;
                    if r1.abs() > 1e-300 {
                        r1
                    } else {
                        1.0
                    }
                }
                None => f64::NAN,
            };
            vio_denom = if m > 0 && g_now[m - 1].abs() > 1e-300 {
                g_now[m - 1].abs()
            } else {
                1.0
            };
        }

        step(
            &mut state, config, problem, map, &pool, &mut rng, &mut ws, &mut queries,
        )?;

        if t % stride == 0 || t == config.t_horizon {
            let tf = t as f64;
            let record = TrajectoryRecord {
                t,
                pr: pr_t,
                regret_rel: reg_acc.value() / (tf * reg_denom),
                vio_rel: if m > 0 {
                    vio_acc[m - 1].value() / (tf * vio_denom)
                } else {
                    f64::NAN
                },
                dec_dev,
                param_err: state.estimator.estimation_error(map.a()),
                g: g_now.iter().cloned().collect(),
            };
            recorder(&record);
        }
    }

    Ok(RunSummary {
        queries,
        steps: config.t_horizon,
        theta: state.theta,
        lambda: state.lambda,
        estimator: state.estimator,
        regret: if oracle.is_some() {
            reg_acc.value()
        } else {
            f64::NAN
        },
        vio: vio_acc.iter().map(|k| k.value()).collect(),
    })
}

/// Uniform draw over `Θ`, shrunk toward the origin until the instance
/// constraints hold as well. Requires `g(0) ⪯ 0` for termination; gives up
/// after a bounded number of shrinks and returns the `Θ`-feasible point.
fn random_feasible<R: Rng + ?Sized>(problem: &Problem, d: usize, rng: &mut R) -> DVector<f64> {
    use crate::problem::FeasibleSet;
    let mut theta = match &problem.feasible {
        FeasibleSet::Box { lo, hi } | FeasibleSet::BallBox { lo, hi, .. } => {
            let mut v = DVector::zeros(d);
            for i in 0..d {
                v[i] = rng.gen_range(lo[i]..=hi[i]);
            }
            problem.feasible.project(&v)
        }
        FeasibleSet::Ball { r } => {
            // uniform in the ball: normal direction, radius ∝ U^(1/d)
            let mut v = DVector::zeros(d);
            for x in v.iter_mut() {
                *x = rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
            let norm = v.norm();
            if norm > 0.0 {
                let u: f64 = rng.gen_range(0.0..1.0);
                v *= r * u.powf(1.0 / d as f64) / norm;
            }
            v
        }
    };
    let m = problem.constraints.m();
    if m == 0 {
        return theta;
    }
    let mut g = DVector::zeros(m);
    for _ in 0..200 {
        problem.constraints.g_into(&theta, &mut g);
        if g.iter().all(|&gi| gi <= 0.0) {
            break;
        }
        theta *= 0.8;
    }
    theta
}
