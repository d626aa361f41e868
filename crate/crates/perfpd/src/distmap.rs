//! Location-family distribution maps.
//!
//! A map `D(theta)` is simulated as `Z = Z0 + A*theta` where `Z0` is drawn
//! from a fixed base distribution `D0`. The matrix `A` fully determines how
//! strongly the deployed decision bends the data; its largest singular value
//! is the map's sensitivity.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Base distribution `D0` over `R^k`.
///
/// Two families are provided: a multivariate normal with given mean and
/// covariance, and a degenerate point mass used by exactness tests.
#[derive(Debug, Clone)]
pub enum BaseDistribution {
    Gaussian {
        mean: DVector<f64>,
        cov: DMatrix<f64>,
        /// Factor `F` with `F Fᵀ = cov`, from a symmetric eigendecomposition
        /// so that singular (PSD but not PD) covariances are accepted.
        factor: DMatrix<f64>,
    },
    Point { location: DVector<f64> },
}

impl BaseDistribution {
    /// Multivariate normal with the given mean and covariance.
    ///
    /// The covariance must be symmetric PSD; eigenvalues below `-1e-10` times
    /// the largest eigenvalue are rejected, small negative ones are clamped
    /// to zero.
    pub fn gaussian(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let k = mean.len();
        if cov.nrows() != k || cov.ncols() != k {
            return Err(Error::DimensionMismatch {
                context: "BaseDistribution::gaussian covariance",
                expected: k,
                got: cov.nrows(),
            });
        }
        let sym = (&cov + cov.transpose()) * 0.5;
        let eig = sym.clone().symmetric_eigen();
        let max_eig = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
        let tol = 1e-10 * max_eig.max(1.0);
        let mut factor = eig.eigenvectors.clone();
        for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
            if lambda < -tol {
                return Err(Error::NotPsd(lambda));
            }
            let s = lambda.max(0.0).sqrt();
            factor.column_mut(j).scale_mut(s);
        }
        Ok(BaseDistribution::Gaussian {
            mean,
            cov: sym,
            factor,
        })
    }

    /// Degenerate point mass at `location`.
    pub fn point(location: DVector<f64>) -> Self {
        BaseDistribution::Point { location }
    }

    /// Dimension `k` of the samples.
    pub fn dim(&self) -> usize {
        match self {
            BaseDistribution::Gaussian { mean, .. } => mean.len(),
            BaseDistribution::Point { location } => location.len(),
        }
    }

    /// Mean of `D0`.
    pub fn mean(&self) -> DVector<f64> {
        match self {
            BaseDistribution::Gaussian { mean, .. } => mean.clone(),
            BaseDistribution::Point { location } => location.clone(),
        }
    }

    /// Covariance `Σ` of `D0` (zero for a point mass).
    pub fn cov(&self) -> DMatrix<f64> {
        match self {
            BaseDistribution::Gaussian { cov, .. } => cov.clone(),
            BaseDistribution::Point { location } => {
                DMatrix::zeros(location.len(), location.len())
            }
        }
    }

    /// Draws one sample into `out`.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut DVector<f64>) {
        match self {
            BaseDistribution::Gaussian { mean, factor, .. } => {
                let k = mean.len();
                let mut xi = DVector::zeros(k);
                for x in xi.iter_mut() {
                    *x = rng.sample(StandardNormal);
                }
                out.copy_from(mean);
                out.gemv(1.0, factor, &xi, 1.0);
            }
            BaseDistribution::Point { location } => out.copy_from(location),
        }
    }
}

/// Distribution map `D(theta)`: `Z = Z0 + A*theta`, `Z0 ~ D0`.
#[derive(Debug, Clone)]
pub struct LocationFamilyMap {
    base: BaseDistribution,
    a: DMatrix<f64>,
}

impl LocationFamilyMap {
    pub fn new(base: BaseDistribution, a: DMatrix<f64>) -> Result<Self> {
        if a.nrows() != base.dim() {
            return Err(Error::DimensionMismatch {
                context: "LocationFamilyMap shift matrix rows",
                expected: base.dim(),
                got: a.nrows(),
            });
        }
        Ok(LocationFamilyMap { base, a })
    }

    /// Sample dimension `k`.
    pub fn sample_dim(&self) -> usize {
        self.base.dim()
    }

    /// Decision dimension `d`.
    pub fn decision_dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn base(&self) -> &BaseDistribution {
        &self.base
    }

    /// Covariance of the base distribution (simulator-side knowledge; the
    /// solver never reads it).
    pub fn base_cov(&self) -> DMatrix<f64> {
        self.base.cov()
    }

    /// Draws `Z ~ D(theta)` with an independent base draw.
    pub fn sample<R: Rng + ?Sized>(&self, theta: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.sample_dim());
        self.sample_into(theta, rng, &mut out)?;
        Ok(out)
    }

    /// Allocation-free variant of [`sample`](Self::sample).
    pub fn sample_into<R: Rng + ?Sized>(
        &self,
        theta: &DVector<f64>,
        rng: &mut R,
        out: &mut DVector<f64>,
    ) -> Result<()> {
        if theta.len() != self.decision_dim() {
            return Err(Error::DimensionMismatch {
                context: "LocationFamilyMap::sample decision",
                expected: self.decision_dim(),
                got: theta.len(),
            });
        }
        self.base.sample_into(rng, out);
        out.gemv(1.0, &self.a, theta, 1.0);
        Ok(())
    }

    /// Draws one base sample `Z0 ~ D0` (common-random-numbers mode, step 1).
    pub fn draw_base<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let mut out = DVector::zeros(self.sample_dim());
        self.base.sample_into(rng, &mut out);
        out
    }

    /// Deterministic shift of a shared base draw (common-random-numbers
    /// mode, step 2): returns `z0 + A*theta`.
    pub fn shift_base(&self, z0: &DVector<f64>, theta: &DVector<f64>) -> Result<DVector<f64>> {
        if theta.len() != self.decision_dim() {
            return Err(Error::DimensionMismatch {
                context: "LocationFamilyMap::shift_base decision",
                expected: self.decision_dim(),
                got: theta.len(),
            });
        }
        let mut out = z0.clone();
        out.gemv(1.0, &self.a, theta, 1.0);
        Ok(out)
    }

    /// Largest singular value of `A`, the map's sensitivity parameter.
    pub fn sensitivity(&self) -> f64 {
        sigma_max(&self.a)
    }

    /// Lipschitz and strong-convexity bounds for the performative risk
    /// induced by this map and a loss with the given constants.
    ///
    /// `L_bound = L_θ + L_Z σ_max(A)` and
    /// `γ_bound = max{γ_θ − β²/γ_Z, γ_θ − 2εβ + γ_Z σ_min²(A)}` with
    /// `ε = σ_max(A)`. Requires `γ_θ − β²/γ_Z > 0`.
    pub fn risk_constants(&self, lc: &LossConstants) -> Result<RiskConstants> {
        let slack = lc.gamma_theta - lc.beta * lc.beta / lc.gamma_z;
        if !(slack > 0.0) {
            return Err(Error::NotStronglyConvex(format!(
                "need gamma_theta - beta^2/gamma_z > 0, got {slack:.6e}"
            )));
        }
        let eps = self.sensitivity();
        // inf over unit decisions of ||A theta||: zero whenever A has a
        // nontrivial null space, which is guaranteed for d > k.
        let sig_min = if self.decision_dim() > self.sample_dim() {
            0.0
        } else {
            sigma_min(&self.a)
        };
        let branch_shift = lc.gamma_theta - 2.0 * eps * lc.beta + lc.gamma_z * sig_min * sig_min;
        Ok(RiskConstants {
            l_bound: lc.l_theta + lc.l_z * eps,
            gamma_bound: slack.max(branch_shift),
        })
    }
}

/// Smoothness/convexity constants of a loss, supplied by the problem author.
#[derive(Debug, Clone, Copy)]
pub struct LossConstants {
    /// Joint smoothness constant of the loss.
    pub beta: f64,
    /// Lipschitz constant of the loss in the decision argument.
    pub l_theta: f64,
    /// Lipschitz constant of the loss in the data argument.
    pub l_z: f64,
    /// Strong convexity of the loss in the decision argument.
    pub gamma_theta: f64,
    /// Strong convexity modulus of the loss in the data argument (its
    /// curvature there; may enter with either sign in the bounds).
    pub gamma_z: f64,
}

/// Output of [`LocationFamilyMap::risk_constants`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskConstants {
    pub l_bound: f64,
    pub gamma_bound: f64,
}

fn singular_values(a: &DMatrix<f64>) -> DVector<f64> {
    a.clone().svd(false, false).singular_values
}

pub(crate) fn sigma_max(a: &DMatrix<f64>) -> f64 {
    singular_values(a).iter().cloned().fold(0.0, f64::max)
}

pub(crate) fn sigma_min(a: &DMatrix<f64>) -> f64 {
    singular_values(a)
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Exploration-noise specification for the perturbed queries.
///
/// The constants are the moment bounds the estimator analysis relies on:
/// `E[u uᵀ] ⪰ κ₁ I`, `E‖u‖² ≤ κ₂`, `E[‖u‖² u uᵀ] ⪯ κ₃ I`.
#[derive(Debug, Clone, Copy)]
pub struct NoiseSpec {
    pub dim: usize,
    pub kappa1: f64,
    pub kappa2: f64,
    pub kappa3: f64,
}

impl NoiseSpec {
    /// Standard normal noise in `R^dim`: `κ₁ = 1`, `κ₂ = dim`, `κ₃ = 3·dim`.
    ///
    /// For standard normal `u`, `E[‖u‖² u uᵀ] = (dim + 2)·I ⪯ 3·dim·I`.
    pub fn standard_normal(dim: usize) -> Self {
        NoiseSpec {
            dim,
            kappa1: 1.0,
            kappa2: dim as f64,
            kappa3: 3.0 * dim as f64,
        }
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut DVector<f64>) {
        debug_assert_eq!(out.len(), self.dim);
        for x in out.iter_mut() {
            *x = rng.sample(StandardNormal);
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        self.sample_into(rng, &mut out);
        out
    }
}
