//! Online least-squares estimation of the performative matrix, plus the
//! frozen base-sample pool used for offline expectation approximation.
//!
//! Each solver iteration observes the pair `Z_t ~ D(θ_t)`, `Z′_t ~ D(θ_t + u_t)`;
//! in a location family the difference satisfies `E[Z′_t − Z_t | u_t] = A u_t`,
//! so `A` is learned by stochastic gradient on the square residual:
//!
//! `Â_t = Â_{t−1} + ζ_t (Z′_t − Z_t − Â_{t−1} u_t) u_tᵀ`

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::distmap::LocationFamilyMap;
use crate::{Error, Result};

/// Step-size schedule `t ↦ ζ_t`.
#[derive(Debug, Clone, Copy)]
pub enum ZetaSchedule {
    /// `ζ_t = 2/(κ₁ t + 2κ₃)`, the schedule the estimation error bounds
    /// are proved for.
    Theory { kappa1: f64, kappa3: f64 },
    /// `ζ_t = 1/(t + offset)`; the experiments use `offset = 10`.
    RecipOffset { offset: f64 },
    /// Constant step size (unit tests).
    Constant(f64),
}

impl ZetaSchedule {
    pub fn zeta(&self, t: usize) -> f64 {
        match *self {
            ZetaSchedule::Theory { kappa1, kappa3 } => default_zeta(kappa1, kappa3, t),
            ZetaSchedule::RecipOffset { offset } => 1.0 / (t as f64 + offset),
            ZetaSchedule::Constant(c) => c,
        }
    }
}

/// `ζ_t = 2/(κ₁ t + 2κ₃)`; always below the stability threshold `2/κ₃`.
pub fn default_zeta(kappa1: f64, kappa3: f64, t: usize) -> f64 {
    2.0 / (kappa1 * t as f64 + 2.0 * kappa3)
}

/// Online least-squares state.
#[derive(Debug, Clone)]
pub struct EstimatorState {
    a_hat: DMatrix<f64>,
    /// Step index of the NEXT update; starts at 1 (`Â₁ = 0` has received
    /// zero updates).
    t: usize,
    schedule: ZetaSchedule,
}

impl EstimatorState {
    /// Fresh state with `Â₁ = 0` (k×d).
    pub fn new(k: usize, d: usize, schedule: ZetaSchedule) -> Self {
        EstimatorState {
            a_hat: DMatrix::zeros(k, d),
            t: 1,
            schedule,
        }
    }

    /// State warm-started from an existing estimate; the update counter
    /// still begins at 1.
    pub fn with_a_hat(a_hat: DMatrix<f64>, schedule: ZetaSchedule) -> Self {
        EstimatorState {
            a_hat,
            t: 1,
            schedule,
        }
    }

    pub fn a_hat(&self) -> &DMatrix<f64> {
        &self.a_hat
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn schedule(&self) -> ZetaSchedule {
        self.schedule
    }

    /// One recursive least-squares step on the observation pair.
    ///
    /// Applies `Â ← Â + ζ_t (Z′ − Z − Â u) uᵀ` and advances `t`.
    pub fn ls_update(
        &mut self,
        u: &DVector<f64>,
        z_t: &DVector<f64>,
        z_prime: &DVector<f64>,
    ) -> Result<()> {
        let (k, d) = self.a_hat.shape();
        if u.len() != d {
            return Err(Error::DimensionMismatch {
                context: "ls_update noise",
                expected: d,
                got: u.len(),
            });
        }
        if z_t.len() != k || z_prime.len() != k {
            return Err(Error::DimensionMismatch {
                context: "ls_update observation",
                expected: k,
                got: if z_t.len() != k { z_t.len() } else { z_prime.len() },
            });
        }
        let zeta = self.schedule.zeta(self.t);
        let mut resid = z_prime - z_t;
        resid.gemv(-1.0, &self.a_hat, u, 1.0);
        self.a_hat.ger(zeta, &resid, u, 1.0);
        self.t += 1;
        Ok(())
    }

    /// Squared Frobenius error `∥Â_t − A∥²_F`.
    pub fn estimation_error(&self, a_true: &DMatrix<f64>) -> f64 {
        debug_assert_eq!(self.a_hat.shape(), a_true.shape());
        let mut sum = 0.0;
        for (x, y) in self.a_hat.iter().zip(a_true.iter()) {
            let diff = x - y;
            sum += diff * diff;
        }
        sum
    }
}

/// Frozen pool of base samples `{Z_{0,i}}`, stored column-wise.
#[derive(Debug, Clone)]
pub struct BaseSamplePool {
    samples: DMatrix<f64>,
}

impl BaseSamplePool {
    /// Draws `n` independent samples of `D(0) = D₀` through the map.
    pub fn draw<R: Rng + ?Sized>(map: &LocationFamilyMap, n: usize, rng: &mut R) -> Self {
        let k = map.sample_dim();
        let mut samples = DMatrix::zeros(k, n);
        let mut buf = DVector::zeros(k);
        for j in 0..n {
            map.base().sample_into(rng, &mut buf);
            samples.column_mut(j).copy_from(&buf);
        }
        BaseSamplePool { samples }
    }

    /// Deterministic sigma-point pool matching the first two moments of the
    /// base distribution exactly: the `2k` points `m ± √k · fᵢ` where
    /// `F Fᵀ = Σ` columnwise.
    ///
    /// For losses whose gradients are at most quadratic in `Z` (both shipped
    /// experiments), pool averages of the gradients equal their exact
    /// expectations under a Gaussian base up to the matched moments, which
    /// is what the exact-expectation solver mode relies on.
    pub fn sigma_points(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let k = mean.len();
        if cov.nrows() != k || cov.ncols() != k {
            return Err(Error::DimensionMismatch {
                context: "BaseSamplePool::sigma_points covariance",
                expected: k,
                got: cov.nrows(),
            });
        }
        let sym = (cov + cov.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        let max_eig = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        let tol = 1e-10 * max_eig.max(1.0);
        let mut samples = DMatrix::zeros(k, 2 * k);
        let scale = (k as f64).sqrt();
        for i in 0..k {
            let lambda = eig.eigenvalues[i];
            if lambda < -tol {
                return Err(Error::NotPsd(lambda));
            }
            let f = eig.eigenvectors.column(i) * (lambda.max(0.0).sqrt() * scale);
            samples.column_mut(2 * i).copy_from(&(mean + &f));
            samples.column_mut(2 * i + 1).copy_from(&(mean - &f));
        }
        Ok(BaseSamplePool { samples })
    }

    pub fn from_columns(samples: DMatrix<f64>) -> Self {
        BaseSamplePool { samples }
    }

    pub fn n(&self) -> usize {
        self.samples.ncols()
    }

    pub fn dim(&self) -> usize {
        self.samples.nrows()
    }

    pub fn samples(&self) -> &DMatrix<f64> {
        &self.samples
    }

    /// Empirical mean of the pool.
    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim());
        for j in 0..self.n() {
            m += self.samples.column(j);
        }
        m / self.n() as f64
    }
}
