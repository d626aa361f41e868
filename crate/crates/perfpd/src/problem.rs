//! Constrained performative problems.
//!
//! A problem bundles a loss with analytic gradients, a convex inequality
//! constraint set `g(θ) ⪯ 0` handled by the dual iterate, a simple feasible
//! set `Θ` handled by projection, and (when available) a ground-truth risk
//! oracle used for evaluation only.

use nalgebra::{DMatrix, DVector};

use crate::distmap::{sigma_max, LossConstants};
use crate::{Error, Result};

/// Loss `ℓ(θ; Z)` with analytic gradients in both arguments.
///
/// The `acc_*` methods accumulate (`+=`) into a caller-owned buffer; the
/// solver's inner loop calls them once per pool sample, so they must not
/// allocate.
pub trait Loss: Send + Sync {
    fn value(&self, theta: &DVector<f64>, z: &DVector<f64>) -> f64;

    /// `acc += ∇_θ ℓ(θ; Z)`
    fn acc_grad_theta(&self, theta: &DVector<f64>, z: &DVector<f64>, acc: &mut DVector<f64>);

    /// `acc += ∇_Z ℓ(θ; Z)`
    fn acc_grad_z(&self, theta: &DVector<f64>, z: &DVector<f64>, acc: &mut DVector<f64>);

    fn constants(&self) -> LossConstants;

    fn grad_theta(&self, theta: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(theta.len());
        self.acc_grad_theta(theta, z, &mut out);
        out
    }

    fn grad_z(&self, theta: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(z.len());
        self.acc_grad_z(theta, z, &mut out);
        out
    }
}

/// Convex inequality constraints `g(θ) ⪯ 0` with gradients.
pub trait Constraints: Send + Sync {
    fn m(&self) -> usize;

    fn g_into(&self, theta: &DVector<f64>, out: &mut DVector<f64>);

    fn jacobian(&self, theta: &DVector<f64>) -> DMatrix<f64>;

    /// `acc += J(θ)ᵀ λ`; the default goes through the dense Jacobian,
    /// structured sets override it.
    fn acc_jt_lambda(&self, theta: &DVector<f64>, lambda: &DVector<f64>, acc: &mut DVector<f64>) {
        let jac = self.jacobian(theta);
        acc.gemv_tr(1.0, &jac, lambda, 1.0);
    }

    /// Lipschitz bound for `g` over the feasible set.
    fn l_g(&self) -> f64;

    /// Bound on `∥g(θ)∥₂` over the feasible set.
    fn c_bound(&self) -> f64;

    fn g(&self, theta: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.m());
        self.g_into(theta, &mut out);
        out
    }
}

/// The empty constraint set (`m = 0`).
#[derive(Debug, Clone, Default)]
pub struct NoConstraints;

impl Constraints for NoConstraints {
    fn m(&self) -> usize {
        0
    }
    fn g_into(&self, _theta: &DVector<f64>, _out: &mut DVector<f64>) {}
    fn jacobian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(0, theta.len())
    }
    fn l_g(&self) -> f64 {
        0.0
    }
    fn c_bound(&self) -> f64 {
        0.0
    }
}

/// Halfspace and centered-ellipsoid inequalities:
/// `aᵢᵀθ ≤ bᵢ` followed by `θᵀΨⱼθ ≤ ρⱼ` (Ψⱼ symmetric PSD).
///
/// The portfolio experiment uses two halfspaces (budget, liquidity) and one
/// quadratic (risk); the type is generic enough for ad-hoc test problems.
#[derive(Debug, Clone)]
pub struct ConvexInequalities {
    halfspaces: Vec<(DVector<f64>, f64)>,
    quadratics: Vec<(DMatrix<f64>, f64)>,
    l_g: f64,
    c_bound: f64,
}

impl ConvexInequalities {
    /// `r_theta` is the radius bound of the feasible set, used only to fix
    /// the diagnostic constants `L_g` and `C`.
    pub fn new(
        halfspaces: Vec<(DVector<f64>, f64)>,
        quadratics: Vec<(DMatrix<f64>, f64)>,
        r_theta: f64,
    ) -> Self {
        // Per-row Lipschitz constants over {∥θ∥ ≤ R}: ∥a∥ for a halfspace,
        // 2 σ_max(Ψ) R for a quadratic; the vector map's constant is the
        // Euclidean norm of the per-row constants.
        let mut row_sq = 0.0;
        let mut c_sq = 0.0f64;
        for (a, b) in &halfspaces {
            let na = a.norm();
            row_sq += na * na;
            let reach = (na * r_theta + b.abs()).max(na * r_theta - b);
            c_sq += reach * reach;
        }
        for (psi, rho) in &quadratics {
            let smax = sigma_max(psi);
            let lp = 2.0 * smax * r_theta;
            row_sq += lp * lp;
            let reach = (smax * r_theta * r_theta).max(*rho);
            c_sq += reach * reach;
        }
        ConvexInequalities {
            halfspaces,
            quadratics,
            l_g: row_sq.sqrt(),
            c_bound: c_sq.sqrt(),
        }
    }

    pub fn halfspaces(&self) -> &[(DVector<f64>, f64)] {
        &self.halfspaces
    }

    pub fn quadratics(&self) -> &[(DMatrix<f64>, f64)] {
        &self.quadratics
    }
}

impl Constraints for ConvexInequalities {
    fn m(&self) -> usize {
        self.halfspaces.len() + self.quadratics.len()
    }

    fn g_into(&self, theta: &DVector<f64>, out: &mut DVector<f64>) {
        let mut i = 0;
        for (a, b) in &self.halfspaces {
            out[i] = a.dot(theta) - b;
            i += 1;
        }
        for (psi, rho) in &self.quadratics {
            out[i] = (psi * theta).dot(theta) - rho;
            i += 1;
        }
    }

    fn jacobian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let d = theta.len();
        let mut jac = DMatrix::zeros(self.m(), d);
        let mut i = 0;
        for (a, _) in &self.halfspaces {
            jac.row_mut(i).copy_from(&a.transpose());
            i += 1;
        }
        for (psi, _) in &self.quadratics {
            let grad = (psi + psi.transpose()) * theta;
            jac.row_mut(i).copy_from(&grad.transpose());
            i += 1;
        }
        jac
    }

    fn acc_jt_lambda(&self, theta: &DVector<f64>, lambda: &DVector<f64>, acc: &mut DVector<f64>) {
        let mut i = 0;
        for (a, _) in &self.halfspaces {
            acc.axpy(lambda[i], a, 1.0);
            i += 1;
        }
        for (psi, _) in &self.quadratics {
            // gradient of θᵀΨθ is (Ψ + Ψᵀ)θ = 2Ψθ for symmetric Ψ
            acc.gemv(lambda[i], psi, theta, 1.0);
            acc.gemv_tr(lambda[i], psi, theta, 1.0);
            i += 1;
        }
    }

    fn l_g(&self) -> f64 {
        self.l_g
    }

    fn c_bound(&self) -> f64 {
        self.c_bound
    }
}

/// Pairwise proximity constraints on a node graph:
/// `g_e(θ) = ½∥θ_i − θ_j∥² − c_e ≤ 0` for each edge `e = (i, j)`.
///
/// Decisions are stacked per node: node `i` owns coordinates
/// `[i·d_node, (i+1)·d_node)`.
#[derive(Debug, Clone)]
pub struct ProximityConstraints {
    edges: Vec<(usize, usize)>,
    caps: Vec<f64>,
    n_nodes: usize,
    d_node: usize,
    l_g: f64,
    c_bound: f64,
}

impl ProximityConstraints {
    pub fn new(
        edges: Vec<(usize, usize)>,
        caps: Vec<f64>,
        n_nodes: usize,
        d_node: usize,
        r_theta: f64,
    ) -> Result<Self> {
        if edges.len() != caps.len() {
            return Err(Error::DimensionMismatch {
                context: "ProximityConstraints caps",
                expected: edges.len(),
                got: caps.len(),
            });
        }
        for &(i, j) in &edges {
            if i >= n_nodes || j >= n_nodes || i == j {
                return Err(Error::InvalidArgument(format!(
                    "edge ({i}, {j}) invalid for {n_nodes} nodes"
                )));
            }
        }
        let m = edges.len() as f64;
        // ∥∇g_e∥ = √2 ∥θ_i − θ_j∥ ≤ 2√2 R on {∥θ∥ ≤ R}.
        let per_row = 2.0 * std::f64::consts::SQRT_2 * r_theta;
        let max_cap = caps.iter().cloned().fold(0.0f64, f64::max);
        let reach = (2.0 * r_theta * r_theta).max(max_cap);
        Ok(ProximityConstraints {
            edges,
            caps,
            n_nodes,
            d_node,
            l_g: per_row * m.sqrt(),
            c_bound: reach * m.sqrt(),
        })
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn caps(&self) -> &[f64] {
        &self.caps
    }

    fn node_diff(&self, theta: &DVector<f64>, i: usize, j: usize) -> DVector<f64> {
        let d = self.d_node;
        let ti = theta.rows(i * d, d);
        let tj = theta.rows(j * d, d);
        ti - tj
    }
}

impl Constraints for ProximityConstraints {
    fn m(&self) -> usize {
        self.edges.len()
    }

    fn g_into(&self, theta: &DVector<f64>, out: &mut DVector<f64>) {
        debug_assert_eq!(theta.len(), self.n_nodes * self.d_node);
        let d = self.d_node;
        let th = theta.as_slice();
        for (e, &(i, j)) in self.edges.iter().enumerate() {
            let mut sq = 0.0;
            for a in 0..d {
                let diff = th[i * d + a] - th[j * d + a];
                sq += diff * diff;
            }
            out[e] = 0.5 * sq - self.caps[e];
        }
    }

    fn jacobian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let d = self.d_node;
        let mut jac = DMatrix::zeros(self.m(), theta.len());
        for (e, &(i, j)) in self.edges.iter().enumerate() {
            let diff = self.node_diff(theta, i, j);
            for a in 0..d {
                jac[(e, i * d + a)] = diff[a];
                jac[(e, j * d + a)] = -diff[a];
            }
        }
        jac
    }

    fn acc_jt_lambda(&self, theta: &DVector<f64>, lambda: &DVector<f64>, acc: &mut DVector<f64>) {
        let d = self.d_node;
        let th = theta.as_slice();
        let out = acc.as_mut_slice();
        for (e, &(i, j)) in self.edges.iter().enumerate() {
            let le = lambda[e];
            if le == 0.0 {
                continue;
            }
            for a in 0..d {
                let diff = th[i * d + a] - th[j * d + a];
                out[i * d + a] += le * diff;
                out[j * d + a] -= le * diff;
            }
        }
    }

    fn l_g(&self) -> f64 {
        self.l_g
    }

    fn c_bound(&self) -> f64 {
        self.c_bound
    }
}

/// Simple feasible set `Θ` handled by Euclidean projection.
#[derive(Debug, Clone)]
pub enum FeasibleSet {
    /// `{∥θ∥₂ ≤ r}`
    Ball { r: f64 },
    /// `{lo ⪯ θ ⪯ hi}`
    Box { lo: DVector<f64>, hi: DVector<f64> },
    /// Intersection of the two.
    BallBox {
        r: f64,
        lo: DVector<f64>,
        hi: DVector<f64>,
    },
}

/// Displacement threshold ending an alternating-projection sweep.
const POCS_TOL: f64 = 1e-12;
const POCS_MAX_SWEEPS: usize = 200;

impl FeasibleSet {
    /// Radius bound `R`: `∥θ∥₂ ≤ R` for every member (Assumption 2).
    pub fn radius_bound(&self) -> f64 {
        match self {
            FeasibleSet::Ball { r } => *r,
            FeasibleSet::Box { lo, hi } => box_radius(lo, hi),
            FeasibleSet::BallBox { r, lo, hi } => r.min(box_radius(lo, hi)),
        }
    }

    pub fn contains(&self, theta: &DVector<f64>, tol: f64) -> bool {
        match self {
            FeasibleSet::Ball { r } => theta.norm() <= r + tol,
            FeasibleSet::Box { lo, hi } => theta
                .iter()
                .zip(lo.iter().zip(hi.iter()))
                .all(|(&t, (&l, &h))| t >= l - tol && t <= h + tol),
            FeasibleSet::BallBox { r, lo, hi } => {
                FeasibleSet::Ball { r: *r }.contains(theta, tol)
                    && FeasibleSet::Box {
                        lo: lo.clone(),
                        hi: hi.clone(),
                    }
                    .contains(theta, tol)
            }
        }
    }

    /// Euclidean projection onto the set.
    ///
    /// Ball and box projections are exact; the intersection is computed by
    /// alternating projections run to displacement ≤ 1e-12 (≤ 200 sweeps).
    /// The limit lies in the intersection and is nonexpansive toward every
    /// feasible point, which is the property the solver analysis needs.
    pub fn project(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut out = y.clone();
        self.project_in_place(&mut out);
        out
    }

    pub fn project_in_place(&self, y: &mut DVector<f64>) {
        match self {
            FeasibleSet::Ball { r } => project_ball(y, *r),
            FeasibleSet::Box { lo, hi } => project_box(y, lo, hi),
            FeasibleSet::BallBox { r, lo, hi } => {
                for _ in 0..POCS_MAX_SWEEPS {
                    let mut disp_sq = 0.0;
                    disp_sq += displacement_sq_box(y, lo, hi);
                    project_box(y, lo, hi);
                    disp_sq += displacement_sq_ball(y, *r);
                    project_ball(y, *r);
                    if disp_sq.sqrt() <= POCS_TOL {
                        break;
                    }
                }
            }
        }
    }
}

fn box_radius(lo: &DVector<f64>, hi: &DVector<f64>) -> f64 {
    lo.iter()
        .zip(hi.iter())
        .map(|(&l, &h)| l.abs().max(h.abs()).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn project_ball(y: &mut DVector<f64>, r: f64) {
    let n = y.norm();
    if n > r {
        y.scale_mut(r / n);
    }
}

fn project_box(y: &mut DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) {
    for ((t, &l), &h) in y.iter_mut().zip(lo.iter()).zip(hi.iter()) {
        *t = t.clamp(l, h);
    }
}

fn displacement_sq_ball(y: &DVector<f64>, r: f64) -> f64 {
    let n = y.norm();
    if n > r {
        (n - r) * (n - r)
    } else {
        0.0
    }
}

fn displacement_sq_box(y: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> f64 {
    y.iter()
        .zip(lo.iter().zip(hi.iter()))
        .map(|(&t, (&l, &h))| {
            let c = t.clamp(l, h);
            (t - c) * (t - c)
        })
        .sum()
}

/// Euclidean projection onto the feasible set (operation form).
pub fn project(set: &FeasibleSet, y: &DVector<f64>) -> DVector<f64> {
    set.project(y)
}

/// Ground-truth evaluation oracle: closed-form performative risk, its
/// minimizer over the feasible region, and the optimal value.
pub struct RiskOracle {
    pub pr: Box<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>,
    pub grad_pr: Box<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>,
    pub theta_po: DVector<f64>,
    pub pr_min: f64,
}

/// A complete constrained performative problem.
pub struct Problem {
    pub loss: Box<dyn Loss>,
    pub constraints: Box<dyn Constraints>,
    pub feasible: FeasibleSet,
    pub oracle: Option<RiskOracle>,
}

// ---------------------------------------------------------------------------
// Linear regression over a network (stacked per-node decisions)
// ---------------------------------------------------------------------------

/// Per-node generation parameters for the regression experiment.
#[derive(Debug, Clone)]
pub struct RegressionNode {
    pub sigma_x: DMatrix<f64>,
    pub beta: DVector<f64>,
    pub mu: DVector<f64>,
    pub sigma2: f64,
}

impl RegressionNode {
    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    /// Quadratic coefficient of the node's risk in `θ`: `Σ_x + μμᵀ`.
    /// The features never shift; the `μμᵀ` part is the squared decision
    /// bias `(μᵀθ)²` the shifted label contributes.
    pub fn c_xx(&self) -> DMatrix<f64> {
        &self.sigma_x + &self.mu * self.mu.transpose()
    }

    /// Feature/label cross moment: `Σ_x β`.
    pub fn c_xy(&self) -> DVector<f64> {
        &self.sigma_x * &self.beta
    }

    /// Label second moment at `θ = 0`: `βᵀΣ_x β + σ²`.
    pub fn c_yy(&self) -> f64 {
        self.beta.dot(&(&self.sigma_x * &self.beta)) + self.sigma2
    }
}

/// Parameters of the full multi-node regression instance.
#[derive(Debug, Clone)]
pub struct RegressionParams {
    pub nodes: Vec<RegressionNode>,
}

impl RegressionParams {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn d_node(&self) -> usize {
        self.nodes.first().map_or(0, |n| n.dim())
    }

    pub fn decision_dim(&self) -> usize {
        self.nodes.iter().map(|n| n.dim()).sum()
    }
}

/// Closed-form performative risk of the regression instance:
/// `Σ_i [C_yy − 2 θᵢᵀ C_xy + θᵢᵀ C_xx θᵢ]` with the moments taken under the
/// deployed decision.
pub fn performative_risk_linear_regression(
    theta: &DVector<f64>,
    params: &RegressionParams,
) -> Result<f64> {
    if theta.len() != params.decision_dim() {
        return Err(Error::DimensionMismatch {
            context: "performative_risk_linear_regression decision",
            expected: params.decision_dim(),
            got: theta.len(),
        });
    }
    let mut total = 0.0;
    let mut off = 0;
    for node in &params.nodes {
        let d = node.dim();
        let ti = theta.rows(off, d).clone_owned();
        let c_xx = node.c_xx();
        total += node.c_yy() - 2.0 * ti.dot(&node.c_xy()) + (&c_xx * &ti).dot(&ti);
        off += d;
    }
    Ok(total)
}

/// Analytic gradient of [`performative_risk_linear_regression`]:
/// per node `2 (C_xx θᵢ − C_xy)`.
pub fn grad_performative_risk_linear_regression(
    theta: &DVector<f64>,
    params: &RegressionParams,
) -> Result<DVector<f64>> {
    if theta.len() != params.decision_dim() {
        return Err(Error::DimensionMismatch {
            context: "grad_performative_risk_linear_regression decision",
            expected: params.decision_dim(),
            got: theta.len(),
        });
    }
    let mut grad = DVector::zeros(theta.len());
    let mut off = 0;
    for node in &params.nodes {
        let d = node.dim();
        let ti = theta.rows(off, d).clone_owned();
        let gi = (node.c_xx() * ti - node.c_xy()) * 2.0;
        grad.rows_mut(off, d).copy_from(&gi);
        off += d;
    }
    Ok(grad)
}

/// Performative optimum of the regression instance: per node
/// `θᵢ = C_xx⁻¹ C_xy`, with the optimal value evaluated through the
/// closed-form risk.
pub fn performative_optimum_linear_regression(
    params: &RegressionParams,
) -> Result<(DVector<f64>, f64)> {
    let mut theta = DVector::zeros(params.decision_dim());
    let mut off = 0;
    for (i, node) in params.nodes.iter().enumerate() {
        let d = node.dim();
        let c_xx = node.c_xx();
        let sol = c_xx.lu().solve(&node.c_xy()).ok_or_else(|| {
            Error::NoConvergence(format!("C_xx of node {i} is singular"))
        })?;
        theta.rows_mut(off, d).copy_from(&sol);
        off += d;
    }
    let pr_min = performative_risk_linear_regression(&theta, params)?;
    Ok((theta, pr_min))
}

/// Squared-error regression loss over stacked nodes:
/// `ℓ(θ; Z) = scale · Σ_i (yᵢ − θᵢᵀxᵢ)²`.
///
/// `Z` stacks `(xᵢ, yᵢ)` per node. The experiment uses `scale = ½` (matching
/// the gradient formulas the trajectories are defined by); `scale = 1` makes
/// the population risk coincide with the closed-form risk above.
#[derive(Debug, Clone)]
pub struct RegressionLoss {
    n_nodes: usize,
    d_node: usize,
    scale: f64,
    constants: LossConstants,
}

impl RegressionLoss {
    pub fn new(n_nodes: usize, d_node: usize, scale: f64, constants: LossConstants) -> Self {
        RegressionLoss {
            n_nodes,
            d_node,
            scale,
            constants,
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    #[inline]
    fn residual(&self, th: &[f64], z: &[f64], i: usize) -> f64 {
        let d = self.d_node;
        let zb = i * (d + 1);
        let mut pred = 0.0;
        for a in 0..d {
            pred += th[i * d + a] * z[zb + a];
        }
        z[zb + d] - pred
    }
}

impl Loss for RegressionLoss {
    fn value(&self, theta: &DVector<f64>, z: &DVector<f64>) -> f64 {
        let th = theta.as_slice();
        let zs = z.as_slice();
        let mut total = 0.0;
        for i in 0..self.n_nodes {
            let r = self.residual(th, zs, i);
            total += r * r;
        }
        self.scale * total
    }

    fn acc_grad_theta(&self, theta: &DVector<f64>, z: &DVector<f64>, acc: &mut DVector<f64>) {
        let d = self.d_node;
        let th = theta.as_slice();
        let zs = z.as_slice();
        let out = acc.as_mut_slice();
        for i in 0..self.n_nodes {
            let r = self.residual(th, zs, i);
            let coef = -2.0 * self.scale * r;
            let zb = i * (d + 1);
            for a in 0..d {
                out[i * d + a] += coef * zs[zb + a];
            }
        }
    }

    fn acc_grad_z(&self, theta: &DVector<f64>, z: &DVector<f64>, acc: &mut DVector<f64>) {
        let d = self.d_node;
        let th = theta.as_slice();
        let zs = z.as_slice();
        let out = acc.as_mut_slice();
        for i in 0..self.n_nodes {
            let r = self.residual(th, zs, i);
            let coef = 2.0 * self.scale * r;
            let zb = i * (d + 1);
            for a in 0..d {
                out[zb + a] += -coef * th[i * d + a];
            }
            out[zb + d] += coef;
        }
    }

    fn constants(&self) -> LossConstants {
        self.constants
    }
}

// ---------------------------------------------------------------------------
// Portfolio selection
// ---------------------------------------------------------------------------

/// Parameters of the portfolio instance: mean returns `z̄`, return-reaction
/// matrix `A`, and the regularizer weight `ξ`.
#[derive(Debug, Clone)]
pub struct PortfolioParams {
    pub z_bar: DVector<f64>,
    pub a: DMatrix<f64>,
    pub xi: f64,
}

impl PortfolioParams {
    pub fn dim(&self) -> usize {
        self.z_bar.len()
    }

    /// Constant Hessian of the closed-form risk: `2ξI − (A + Aᵀ)`.
    pub fn hessian(&self) -> DMatrix<f64> {
        let l = self.dim();
        DMatrix::identity(l, l) * (2.0 * self.xi) - (&self.a + self.a.transpose())
    }
}

/// Closed-form performative risk of the portfolio instance:
/// `−z̄ᵀθ − θᵀAθ + ξ∥θ∥²` (the expected loss under `E[z] = z̄ + Aθ`).
pub fn performative_risk_portfolio(theta: &DVector<f64>, params: &PortfolioParams) -> f64 {
    -params.z_bar.dot(theta) - (&params.a * theta).dot(theta) + params.xi * theta.norm_squared()
}

/// Analytic gradient of [`performative_risk_portfolio`]:
/// `−z̄ − (A + Aᵀ)θ + 2ξθ`.
pub fn grad_performative_risk_portfolio(
    theta: &DVector<f64>,
    params: &PortfolioParams,
) -> DVector<f64> {
    let mut g = -&params.z_bar;
    g.gemv(-1.0, &params.a, theta, 1.0);
    g.gemv_tr(-1.0, &params.a, theta, 1.0);
    g.axpy(2.0 * params.xi, theta, 1.0);
    g
}

/// Negative-return portfolio loss `ℓ(θ; z) = −zᵀθ + ξ∥θ∥²`.
#[derive(Debug, Clone)]
pub struct PortfolioLoss {
    pub xi: f64,
    constants: LossConstants,
}

impl PortfolioLoss {
    pub fn new(xi: f64, constants: LossConstants) -> Self {
        PortfolioLoss { xi, constants }
    }
}

impl Loss for PortfolioLoss {
    fn value(&self, theta: &DVector<f64>, z: &DVector<f64>) -> f64 {
        -z.dot(theta) + self.xi * theta.norm_squared()
    }

    fn acc_grad_theta(&self, theta: &DVector<f64>, z: &DVector<f64>, acc: &mut DVector<f64>) {
        acc.axpy(-1.0, z, 1.0);
        acc.axpy(2.0 * self.xi, theta, 1.0);
    }

    fn acc_grad_z(&self, theta: &DVector<f64>, _z: &DVector<f64>, acc: &mut DVector<f64>) {
        acc.axpy(-1.0, theta, 1.0);
    }

    fn constants(&self) -> LossConstants {
        self.constants
    }
}

/// Constrained performative optimum of the portfolio instance.
///
/// Solves `min −z̄ᵀθ − θᵀAθ + ξ∥θ∥²` over `Θ ∩ {g ⪯ 0}` by projected
/// gradient on the closed-form risk, with the intersection projection
/// computed by Dykstra's algorithm. Runs until the gradient-mapping norm
/// is ≤ 1e-9. Refuses instances whose Hessian `2ξI − (A + Aᵀ)` is not
/// positive definite.
pub fn performative_optimum_portfolio(
    params: &PortfolioParams,
    feasible: &FeasibleSet,
    constraints: &ConvexInequalities,
) -> Result<(DVector<f64>, f64)> {
    let hess = params.hessian();
    let eig = hess.clone().symmetric_eigen();
    let gamma = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let lip = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    if gamma <= 1e-10 {
        return Err(Error::NotStronglyConvex(format!(
            "2ξI − (A + Aᵀ) has smallest eigenvalue {gamma:.3e}; refusing nonconvex instance"
        )));
    }

    let proj = DykstraProjector::new(feasible, constraints);
    let step = 1.0 / lip;
    let mut theta = proj.project(&DVector::zeros(params.dim()));
    const GRAD_MAP_TOL: f64 = 1e-9;
    const MAX_ITERS: usize = 2_000_000;
    for _ in 0..MAX_ITERS {
        let grad = grad_performative_risk_portfolio(&theta, params);
        let next = proj.project(&(&theta - step * &grad));
        let gm = (&theta - &next).norm() / step;
        theta = next;
        if gm <= GRAD_MAP_TOL {
            let pr_min = performative_risk_portfolio(&theta, params);
            return Ok((theta, pr_min));
        }
    }
    Err(Error::NoConvergence(
        "projected gradient did not reach the gradient-mapping tolerance".into(),
    ))
}

/// Dykstra projection onto `Θ ∩ {halfspaces} ∩ {ellipsoids}`.
///
/// Every component set has an exact projector, so the iteration converges to
/// the exact Euclidean projection onto the intersection; used by the
/// portfolio ground-truth solver (evaluation path, not the online solver).
pub struct DykstraProjector<'a> {
    feasible: &'a FeasibleSet,
    constraints: &'a ConvexInequalities,
}

impl<'a> DykstraProjector<'a> {
    pub fn new(feasible: &'a FeasibleSet, constraints: &'a ConvexInequalities) -> Self {
        DykstraProjector {
            feasible,
            constraints,
        }
    }

    pub fn project(&self, y: &DVector<f64>) -> DVector<f64> {
        let n_sets = 1 + self.constraints.halfspaces().len() + self.constraints.quadratics().len();
        let d = y.len();
        let mut x = y.clone();
        let mut increments = vec![DVector::zeros(d); n_sets];
        const TOL: f64 = 1e-13;
        const MAX_SWEEPS: usize = 5_000;
        for _ in 0..MAX_SWEEPS {
            let mut sweep_move = 0.0f64;
            let mut idx = 0;
            let mut apply = |x: &mut DVector<f64>,
                             inc: &mut DVector<f64>,
                             proj: &dyn Fn(&mut DVector<f64>)| {
                let mut w = &*x + &*inc;
                let before = w.clone();
                proj(&mut w);
                *inc = &before - &w;
                sweep_move = sweep_move.max((&w - &*x).norm());
                *x = w;
            };
            {
                let feas = self.feasible;
                apply(&mut x, &mut increments[idx], &|w| feas.project_in_place(w));
                idx += 1;
            }
            for (a, b) in self.constraints.halfspaces() {
                apply(&mut x, &mut increments[idx], &|w| {
                    project_halfspace(w, a, *b)
                });
                idx += 1;
            }
            for (psi, rho) in self.constraints.quadratics() {
                apply(&mut x, &mut increments[idx], &|w| {
                    project_ellipsoid(w, psi, *rho)
                });
                idx += 1;
            }
            if sweep_move <= TOL {
                break;
            }
        }
        x
    }
}

fn project_halfspace(y: &mut DVector<f64>, a: &DVector<f64>, b: f64) {
    let viol = a.dot(y) - b;
    if viol > 0.0 {
        y.axpy(-viol / a.norm_squared(), a, 1.0);
    }
}

/// Projection onto `{x : xᵀΨx ≤ ρ}` (Ψ symmetric PSD, ρ > 0).
///
/// In the eigenbasis of Ψ the projection is `xᵢ = yᵢ/(1 + νψᵢ)` for the
/// unique multiplier ν ≥ 0 activating the constraint, found by bisection
/// plus Newton refinement on the monotone function `φ(ν) = xᵀΨx − ρ`.
fn project_ellipsoid(y: &mut DVector<f64>, psi: &DMatrix<f64>, rho: f64) {
    let quad = (psi * &*y).dot(y);
    if quad <= rho {
        return;
    }
    let eig = psi.clone().symmetric_eigen();
    let w = eig.eigenvectors.transpose() * &*y;
    let phi = |nu: f64| -> f64 {
        eig.eigenvalues
            .iter()
            .zip(w.iter())
            .map(|(&p, &wi)| {
                let den = 1.0 + nu * p;
                p * wi * wi / (den * den)
            })
            .sum::<f64>()
            - rho
    };
    // Bracket: phi(0) > 0 (point is outside), phi(nu) -> -rho < 0.
    let mut lo = 0.0;
    let mut hi = 1.0;
    while phi(hi) > 0.0 {
        hi *= 2.0;
        if hi > 1e18 {
            break;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if phi(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * (1.0 + hi) {
            break;
        }
    }
    let nu = 0.5 * (lo + hi);
    let scaled = DVector::from_iterator(
        w.len(),
        eig.eigenvalues
            .iter()
            .zip(w.iter())
            .map(|(&p, &wi)| wi / (1.0 + nu * p)),
    );
    *y = &eig.eigenvectors * scaled;
}
