//! The two shipped experiments with their exact data-generation recipes,
//! plus the replica-averaged strategy-comparison harness.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::distmap::{BaseDistribution, LocationFamilyMap, LossConstants, NoiseSpec};
use crate::estimator::ZetaSchedule;
use crate::problem::{
    grad_performative_risk_linear_regression, grad_performative_risk_portfolio,
    performative_optimum_linear_regression, performative_optimum_portfolio,
    performative_risk_linear_regression, performative_risk_portfolio, ConvexInequalities,
    FeasibleSet, PortfolioLoss, PortfolioParams, Problem, ProximityConstraints, RegressionLoss,
    RegressionNode, RegressionParams, RiskOracle,
};
use crate::solver::{
    run, RunSummary, SolverConfig, Strategy, ThetaInit, TrajectoryRecord,
};
use crate::{Error, Result};

/// RNG stream reserved for instance generation; replica runs use streams
/// `0..replicas`, so the builder must not collide with them.
const BUILDER_STREAM: u64 = u64::MAX;

/// Number of build-time base samples used to estimate the portfolio risk
/// matrix `Ψ`. Drawn once at construction so the constraint set is a fixed
/// part of the problem: every replica must face the same feasible region,
/// while each run still draws its own counted pool.
const PSI_POOL: usize = 320;

/// Structural description of the regression experiment.
#[derive(Debug, Clone)]
pub struct LinRegExperiment {
    pub n_nodes: usize,
    pub d_node: usize,
    pub edge_prob: f64,
    /// Undirected edges, each stored once with `i < j`.
    pub edges: Vec<(usize, usize)>,
    pub params: RegressionParams,
    /// Proximity slack `b′` per edge (drawn once, shared by both endpoints).
    pub b_slack: Vec<f64>,
    pub epsilon: f64,
}

/// Structural description of the portfolio experiment.
#[derive(Debug, Clone)]
pub struct PortfolioExperiment {
    pub l: usize,
    pub params: PortfolioParams,
    pub sigma_z: DMatrix<f64>,
    pub spreads: DVector<f64>,
    pub spread_cap: f64,
    pub rho: f64,
    pub eps_cap: f64,
    pub psi: DMatrix<f64>,
    pub epsilon: f64,
}

#[derive(Debug, Clone)]
pub enum ExperimentDetails {
    LinReg(LinRegExperiment),
    Portfolio(PortfolioExperiment),
}

/// A fully assembled experiment: simulator map, problem (loss, constraints,
/// feasible set, evaluation oracle), default initialization, and the
/// structural parameters it was generated from.
pub struct BuiltExperiment {
    pub name: &'static str,
    pub map: LocationFamilyMap,
    pub problem: Problem,
    pub theta_init: ThetaInit,
    pub noise: NoiseSpec,
    pub details: ExperimentDetails,
}

/// Symmetric PSD matrix with eigenvalues uniform in [0.2, 1] rescaled to the
/// given nuclear norm (for PSD matrices the nuclear norm is the trace).
fn random_spd_nuclear<R: Rng + ?Sized>(dim: usize, nuclear: f64, rng: &mut R) -> DMatrix<f64> {
    let gauss = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = gauss.qr().q();
    let mut eigs = DVector::from_fn(dim, |_, _| rng.gen_range(0.2..1.0));
    let sum: f64 = eigs.iter().sum();
    eigs *= nuclear / sum;
    let lam = DMatrix::from_diagonal(&eigs);
    let m = &q * lam * q.transpose();
    (&m + m.transpose()) * 0.5
}

/// Builds the networked linear-regression experiment.
///
/// Generation order (one ChaCha stream per seed, so instances are
/// reproducible): Erdős–Rényi edges (`i < j`), then per node `Σ_x` (nuclear
/// norm `d`), `β ~ N(0, I)`, raw `μ ~ N(0, I)`, then the concatenated `μ`
/// projected onto the sphere of radius `ε`, label noise `σ² = 1`, and
/// finally the proximity slacks `b′ ~ U[0, 0.02]` per edge.
pub fn build_linreg(
    seed: u64,
    n_nodes: usize,
    edge_prob: f64,
    d_node: usize,
    epsilon: f64,
) -> Result<BuiltExperiment> {
    if epsilon < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "sensitivity must be nonnegative, got {epsilon}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(BUILDER_STREAM);

    let mut edges = Vec::new();
    for i in 0..n_nodes {
        for j in (i + 1)..n_nodes {
            if rng.gen_range(0.0..1.0) < edge_prob {
                edges.push((i, j));
            }
        }
    }

    let mut nodes = Vec::with_capacity(n_nodes);
    let mut mu_raw = Vec::with_capacity(n_nodes);
    for _ in 0..n_nodes {
        let sigma_x = random_spd_nuclear(d_node, d_node as f64, &mut rng);
        let beta = DVector::from_fn(d_node, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mu = DVector::from_fn(d_node, |_, _| rng.sample::<f64, _>(StandardNormal));
        mu_raw.push(mu);
        nodes.push(RegressionNode {
            sigma_x,
            beta,
            mu: DVector::zeros(d_node),
            sigma2: 1.0,
        });
    }
    // project the concatenated mu onto the sphere of radius epsilon
    let total_norm = mu_raw.iter().map(|m| m.norm_squared()).sum::<f64>().sqrt();
    for (node, raw) in nodes.iter_mut().zip(mu_raw.into_iter()) {
        node.mu = if total_norm > 0.0 {
            raw * (epsilon / total_norm)
        } else {
            raw * 0.0
        };
    }
    let b_slack: Vec<f64> = edges.iter().map(|_| rng.gen_range(0.0..0.02)).collect();

    let params = RegressionParams { nodes };
    let dim_d = n_nodes * d_node;
    let dim_k = n_nodes * (d_node + 1);

    // Shift matrix: features do not react to the decision, so the x-rows
    // are zero; the label row of node i carries mu_i on node i's columns.
    let mut a = DMatrix::zeros(dim_k, dim_d);
    for (i, node) in params.nodes.iter().enumerate() {
        let y_row = i * (d_node + 1) + d_node;
        for c in 0..d_node {
            a[(y_row, i * d_node + c)] = node.mu[c];
        }
    }

    // Base covariance per node: cov of (x, y) at theta = 0.
    let mut base_cov = DMatrix::zeros(dim_k, dim_k);
    for (i, node) in params.nodes.iter().enumerate() {
        let off = i * (d_node + 1);
        let sxb = node.c_xy();
        base_cov
            .view_mut((off, off), (d_node, d_node))
            .copy_from(&node.sigma_x);
        for r in 0..d_node {
            base_cov[(off + r, off + d_node)] = sxb[r];
            base_cov[(off + d_node, off + r)] = sxb[r];
        }
        base_cov[(off + d_node, off + d_node)] = node.c_yy();
    }
    let base = BaseDistribution::gaussian(DVector::zeros(dim_k), base_cov)?;
    let map = LocationFamilyMap::new(base, a)?;

    let (theta_po, pr_min) = performative_optimum_linear_regression(&params)?;

    // Feasible set: a generous ball; it exists to satisfy the boundedness
    // assumption, the substantive constraints are the proximity ones.
    let beta_norm = params
        .nodes
        .iter()
        .map(|n| n.beta.norm_squared())
        .sum::<f64>()
        .sqrt();
    let r_theta = 2.0 * (beta_norm + theta_po.norm()) + 1.0;
    let feasible = FeasibleSet::Ball { r: r_theta };

    // Proximity caps keep theta_PO strictly feasible: slack -b'^2/2 < 0.
    let caps: Vec<f64> = edges
        .iter()
        .zip(b_slack.iter())
        .map(|(&(i, j), &b)| {
            let di = theta_po.rows(i * d_node, d_node) - theta_po.rows(j * d_node, d_node);
            0.5 * (di.norm_squared() + b * b)
        })
        .collect();
    let constraints =
        ProximityConstraints::new(edges.clone(), caps, n_nodes, d_node, r_theta)?;

    let constants = linreg_constants(&params, epsilon, r_theta);
    // Scale 1/2 matches the per-sample gradient convention the trajectories
    // follow; evaluation risk is reported in the closed form's scale.
    let loss = RegressionLoss::new(n_nodes, d_node, 0.5, constants);

    let oracle_params = params.clone();
    let grad_params = params.clone();
    let oracle = RiskOracle {
        pr: Box::new(move |theta| {
            performative_risk_linear_regression(theta, &oracle_params).expect("dimension")
        }),
        grad_pr: Box::new(move |theta| {
            grad_performative_risk_linear_regression(theta, &grad_params).expect("dimension")
        }),
        theta_po,
        pr_min,
    };

    Ok(BuiltExperiment {
        name: "linreg",
        map,
        problem: Problem {
            loss: Box::new(loss),
            constraints: Box::new(constraints),
            feasible,
            oracle: Some(oracle),
        },
        theta_init: ThetaInit::Zeros,
        noise: NoiseSpec::standard_normal(dim_d),
        details: ExperimentDetails::LinReg(LinRegExperiment {
            n_nodes,
            d_node,
            edge_prob,
            edges,
            params,
            b_slack,
            epsilon,
        }),
    })
}

/// Diagnostic loss constants for the regression instance, in the closed-form
/// risk's scale. `γ_θ` and `γ_Z` are the curvature floors `2·min λ_min(Σ_x)`
/// and `2`; the Lipschitz entries are moment-scale surrogates over the
/// feasible ball. The squared loss admits no finite joint-smoothness
/// constant over an unbounded data domain, so `β` is set nominally inside
/// the admissible region `β² < γ_θ γ_Z`.
fn linreg_constants(params: &RegressionParams, _epsilon: f64, r_theta: f64) -> LossConstants {
    let gamma_theta = 2.0
        * params
            .nodes
            .iter()
            .map(|n| {
                n.sigma_x
                    .clone()
                    .symmetric_eigen()
                    .eigenvalues
                    .iter()
                    .cloned()
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(f64::INFINITY, f64::min);
    let gamma_z = 2.0;
    let x2 = params
        .nodes
        .iter()
        .map(|n| n.sigma_x.trace())
        .fold(0.0f64, f64::max);
    let y2 = params.nodes.iter().map(|n| n.c_yy()).fold(0.0f64, f64::max);
    let resid2 = 2.0 * y2 + 2.0 * r_theta * r_theta * x2;
    LossConstants {
        beta: 0.5 * (gamma_theta * gamma_z).sqrt(),
        l_theta: 2.0 * (x2 * resid2).sqrt(),
        l_z: 2.0 * ((1.0 + r_theta * r_theta) * resid2).sqrt(),
        gamma_theta,
        gamma_z,
    }
}

/// Builds the portfolio experiment.
///
/// Generation order: mean returns (uniform in `[10ε, 1+10ε]` projected onto
/// the sphere of radius 2), return-noise covariance (nuclear norm `1/l`),
/// spreads `s ~ U[2,4]`, reaction matrix (Gaussian rescaled to
/// `σ_max(A) = ε`), then the build-time sample pool that estimates `Ψ`.
pub fn build_portfolio(seed: u64, l: usize, epsilon: f64) -> Result<BuiltExperiment> {
    if epsilon < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "sensitivity must be nonnegative, got {epsilon}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(BUILDER_STREAM);

    let mut z_bar = DVector::from_fn(l, |_, _| rng.gen_range(10.0 * epsilon..1.0 + 10.0 * epsilon));
    let norm = z_bar.norm();
    if norm > 0.0 {
        z_bar *= 2.0 / norm;
    }
    let sigma_z = random_spd_nuclear(l, 1.0 / l as f64, &mut rng);
    let spreads = DVector::from_fn(l, |_, _| rng.gen_range(2.0..4.0));
    let mut a = DMatrix::from_fn(l, l, |_, _| rng.sample::<f64, _>(StandardNormal));
    let smax = crate::distmap::sigma_max(&a);
    if epsilon > 0.0 && smax > 0.0 {
        a *= epsilon / smax;
    } else {
        a.fill(0.0);
    }

    let xi = epsilon;
    let params = PortfolioParams {
        z_bar: z_bar.clone(),
        a: a.clone(),
        xi,
    };
    let base = BaseDistribution::gaussian(z_bar.clone(), sigma_z.clone())?;
    let map = LocationFamilyMap::new(base, a)?;

    // Psi comes from a build-time pool at theta = 0 (sample covariance with
    // the n-1 divisor), mirroring estimation from initial samples.
    let mut psi_pool = DMatrix::zeros(l, PSI_POOL);
    let mut buf = DVector::zeros(l);
    for j in 0..PSI_POOL {
        map.base().sample_into(&mut rng, &mut buf);
        psi_pool.column_mut(j).copy_from(&buf);
    }
    let mut mean = DVector::zeros(l);
    for j in 0..PSI_POOL {
        mean += psi_pool.column(j);
    }
    mean /= PSI_POOL as f64;
    let mut psi = DMatrix::zeros(l, l);
    for j in 0..PSI_POOL {
        let dev = psi_pool.column(j) - &mean;
        psi += &dev * dev.transpose();
    }
    psi /= (PSI_POOL - 1) as f64;
    psi = (&psi + psi.transpose()) * 0.5;

    const SPREAD_CAP: f64 = 2.0;
    const RHO: f64 = 0.01;
    const EPS_CAP: f64 = 0.3;
    let feasible = FeasibleSet::Box {
        lo: DVector::zeros(l),
        hi: DVector::from_element(l, EPS_CAP),
    };
    let r_theta = feasible.radius_bound();
    let constraints = ConvexInequalities::new(
        vec![
            (DVector::from_element(l, 1.0), 1.0),
            (spreads.clone(), SPREAD_CAP),
        ],
        vec![(psi.clone(), RHO)],
        r_theta,
    );

    // The evaluation oracle needs strong convexity (2ξI - (A + Aᵀ) ≻ 0);
    // at ξ = ε = 0 the objective is linear and no oracle is attached, the
    // trivial case is validated through the risk function itself.
    let oracle = if xi > 0.0 {
        let (theta_po, pr_min) = performative_optimum_portfolio(&params, &feasible, &constraints)?;
        let p1 = params.clone();
        let p2 = params.clone();
        Some(RiskOracle {
            pr: Box::new(move |theta| performative_risk_portfolio(theta, &p1)),
            grad_pr: Box::new(move |theta| grad_performative_risk_portfolio(theta, &p2)),
            theta_po,
            pr_min,
        })
    } else {
        None
    };

    let constants = portfolio_constants(&params, &sigma_z, r_theta, epsilon);
    let loss = PortfolioLoss::new(xi, constants);

    Ok(BuiltExperiment {
        name: "portfolio",
        map,
        problem: Problem {
            loss: Box::new(loss),
            constraints: Box::new(constraints),
            feasible,
            oracle,
        },
        theta_init: ThetaInit::RandomFeasible,
        noise: NoiseSpec::standard_normal(l),
        details: ExperimentDetails::Portfolio(PortfolioExperiment {
            l,
            params,
            sigma_z,
            spreads,
            spread_cap: SPREAD_CAP,
            rho: RHO,
            eps_cap: EPS_CAP,
            psi,
            epsilon,
        }),
    })
}

/// Diagnostic constants for the portfolio loss. `γ_θ = 2ξ` and
/// `L_Z = R` are exact; the loss is linear in the data so `γ_Z` (and with
/// it `β`) is nominal, chosen inside the admissible region.
fn portfolio_constants(
    params: &PortfolioParams,
    sigma_z: &DMatrix<f64>,
    r_theta: f64,
    epsilon: f64,
) -> LossConstants {
    let gamma_theta = 2.0 * params.xi;
    let gamma_z = 1.0;
    let z_reach = params.z_bar.norm() + 3.0 * sigma_z.trace().sqrt() + epsilon * r_theta;
    LossConstants {
        beta: 0.5 * (gamma_theta * gamma_z).sqrt(),
        l_theta: z_reach + 2.0 * params.xi * r_theta,
        l_z: r_theta,
        gamma_theta,
        gamma_z,
    }
}

/// Settings of a replica-averaged comparison.
#[derive(Debug, Clone)]
pub struct ComparisonConfig {
    pub t_horizon: u64,
    pub n_pool: usize,
    pub replicas: u64,
    pub seed: u64,
    pub eta: f64,
    pub delta: f64,
    pub zeta: ZetaSchedule,
    pub stride: u64,
}

impl ComparisonConfig {
    /// Desk-scale defaults: `T = 10⁵`, `n = 320`, 20 replicas, and the
    /// experiment schedule `η = 5e-3`, `δ = 1`, `ζ_t = 1/(t+10)`.
    pub fn desk_scale(seed: u64) -> Self {
        ComparisonConfig {
            t_horizon: 100_000,
            n_pool: 320,
            replicas: 20,
            seed,
            eta: 5e-3,
            delta: 1.0,
            zeta: ZetaSchedule::RecipOffset { offset: 10.0 },
            stride: 0,
        }
    }
}

/// Replica-averaged trajectory of one strategy.
pub struct StrategyTable {
    pub strategy: Strategy,
    /// Pointwise replica means of every record field, on the common stride grid.
    pub rows: Vec<TrajectoryRecord>,
    /// Simulator queries of a single run (identical across replicas).
    pub queries_per_run: u64,
    /// Replica means of the final cumulative violations `Vio_i(T)`.
    pub final_vio: Vec<f64>,
    /// Replica mean of the final cumulative regret `Reg(T)`.
    pub final_regret: f64,
}

/// Runs every requested strategy over `replicas` seeded runs and averages
/// the recorded metrics pointwise.
///
/// Replicas execute in parallel but are merged in replica order in fixed-size
/// batches, so the averaged output is bit-identical regardless of thread
/// count.
pub fn run_comparison(
    exp: &BuiltExperiment,
    strategies: &[Strategy],
    cc: &ComparisonConfig,
) -> Result<Vec<StrategyTable>> {
    strategies
        .iter()
        .map(|&strategy| run_strategy(exp, strategy, cc))
        .collect()
}

fn run_strategy(
    exp: &BuiltExperiment,
    strategy: Strategy,
    cc: &ComparisonConfig,
) -> Result<StrategyTable> {
    let mut acc: Option<TableAccum> = None;
    let mut queries_per_run = None;
    let batch = rayon::current_num_threads().max(1) as u64;
    let mut start = 0u64;
    while start < cc.replicas {
        let end = (start + batch).min(cc.replicas);
        let batch_out: Result<Vec<(Vec<TrajectoryRecord>, RunSummary)>> = (start..end)
            .into_par_iter()
            .map(|replica| {
                let mut cfg = SolverConfig::new(
                    cc.t_horizon,
                    cc.eta,
                    cc.delta,
                    cc.n_pool,
                    exp.noise,
                );
                cfg.strategy = strategy;
                cfg.seed = cc.seed;
                cfg.stream = replica;
                cfg.zeta = cc.zeta;
                cfg.stride = cc.stride;
                cfg.theta_init = exp.theta_init.clone();
                let mut rows = Vec::with_capacity(
                    (cc.t_horizon / cfg.effective_stride().max(1)) as usize + 1,
                );
                let summary = run(&cfg, &exp.problem, &exp.map, |rec| rows.push(rec.clone()))?;
                Ok((rows, summary))
            })
            .collect();
        for (rows, summary) in batch_out? {
            match queries_per_run {
                None => queries_per_run = Some(summary.queries),
                Some(q) => debug_assert_eq!(q, summary.queries),
            }
            match &mut acc {
                None => acc = Some(TableAccum::new(rows, summary)),
                Some(a) => a.add(rows, summary),
            }
        }
        start = end;
    }
    let acc = acc.ok_or_else(|| Error::InvalidArgument("replicas must be ≥ 1".into()))?;
    Ok(acc.finish(strategy, queries_per_run.unwrap_or(0)))
}

struct TableAccum {
    rows: Vec<TrajectoryRecord>,
    final_vio: Vec<f64>,
    final_regret: f64,
    count: u64,
}

impl TableAccum {
    fn new(rows: Vec<TrajectoryRecord>, summary: RunSummary) -> Self {
        TableAccum {
            rows,
            final_vio: summary.vio,
            final_regret: summary.regret,
            count: 1,
        }
    }

    fn add(&mut self, rows: Vec<TrajectoryRecord>, summary: RunSummary) {
        assert_eq!(self.rows.len(), rows.len(), "stride grids must agree");
        for (a, b) in self.rows.iter_mut().zip(rows.into_iter()) {
            debug_assert_eq!(a.t, b.t);
            a.pr += b.pr;
            a.regret_rel += b.regret_rel;
            a.vio_rel += b.vio_rel;
            a.dec_dev += b.dec_dev;
            a.param_err += b.param_err;
            for (ga, gb) in a.g.iter_mut().zip(b.g.iter()) {
                *ga += gb;
            }
        }
        for (va, vb) in self.final_vio.iter_mut().zip(summary.vio.iter()) {
            *va += vb;
        }
        self.final_regret += summary.regret;
        self.count += 1;
    }

    fn finish(mut self, strategy: Strategy, queries_per_run: u64) -> StrategyTable {
        let inv = 1.0 / self.count as f64;
        for r in self.rows.iter_mut() {
            r.pr *= inv;
            r.regret_rel *= inv;
            r.vio_rel *= inv;
            r.dec_dev *= inv;
            r.param_err *= inv;
            for g in r.g.iter_mut() {
                *g *= inv;
            }
        }
        for v in self.final_vio.iter_mut() {
            *v *= inv;
        }
        StrategyTable {
            strategy,
            rows: self.rows,
            queries_per_run,
            final_vio: self.final_vio,
            final_regret: self.final_regret * inv,
        }
    }
}

/// Mean of a record field over the trailing window `((1−frac)·at_t, at_t]`.
///
/// Plateau and decrease checks compare these window means at different
/// checkpoints; the default window is the trailing 10%.
pub fn trailing_window_mean<F: Fn(&TrajectoryRecord) -> f64>(
    rows: &[TrajectoryRecord],
    at_t: u64,
    frac: f64,
    field: F,
) -> f64 {
    let lo = ((1.0 - frac) * at_t as f64).floor() as u64;
    let mut sum = 0.0;
    let mut count = 0usize;
    for r in rows {
        if r.t > lo && r.t <= at_t {
            sum += field(r);
            count += 1;
        }
    }
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}
