//! Shared oracle implementations for the integration tests.
//!
//! Everything here is an independent route to a quantity the library also
//! computes: eigenvalues via cyclic Jacobi rather than nalgebra's solvers,
//! gradients via central differences, expectations via Monte Carlo, and the
//! constrained portfolio optimum via a log-barrier Newton method rather than
//! projected gradient. Tests compare the two routes; the oracles must not
//! call into the code paths under test.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use perfpd::distmap::LocationFamilyMap;
use perfpd::problem::{Loss, Problem};

fn frob(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    assert_eq!(m.nrows(), m.ncols());
    let n = m.nrows();
    let mut a = m.clone();
    let scale = 1.0 + frob(m);
    for _sweep in 0..200 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() < 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let tau = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    1.0 / (tau - (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[(i, i)]).collect()
}

/// Singular values of a rectangular matrix, descending, via Jacobi on the
/// smaller Gram matrix.
pub fn singular_values_oracle(a: &DMatrix<f64>) -> Vec<f64> {
    let gram = if a.nrows() >= a.ncols() {
        a.transpose() * a
    } else {
        a * a.transpose()
    };
    let sym = (&gram + gram.transpose()) * 0.5;
    let mut svs: Vec<f64> = jacobi_eigenvalues(&sym)
        .into_iter()
        .map(|e| e.max(0.0).sqrt())
        .collect();
    svs.sort_by(|x, y| y.partial_cmp(x).unwrap());
    svs
}

pub fn min_eigenvalue_oracle(m: &DMatrix<f64>) -> f64 {
    jacobi_eigenvalues(m)
        .into_iter()
        .fold(f64::INFINITY, f64::min)
}

/// Central-difference gradient of a scalar function.
pub fn fd_gradient<F: Fn(&DVector<f64>) -> f64>(
    f: F,
    x: &DVector<f64>,
    h: f64,
) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| {
        let mut xp = x.clone();
        xp[i] += h;
        let mut xm = x.clone();
        xm[i] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    })
}

/// Monte Carlo estimate of `E_{Z ~ D(θ)}[loss(θ; Z)]` with its standard
/// error, from `n` fresh draws.
pub fn mc_risk(
    map: &LocationFamilyMap,
    loss: &dyn Loss,
    theta: &DVector<f64>,
    n: usize,
    seed: u64,
) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0xfeed);
    let mut mean = 0.0;
    let mut m2 = 0.0;
    let mut z = DVector::zeros(map.sample_dim());
    for i in 1..=n {
        map.sample_into(theta, &mut rng, &mut z).unwrap();
        let v = loss.value(theta, &z);
        let delta = v - mean;
        mean += delta / i as f64;
        m2 += delta * (v - mean);
    }
    let se = (m2 / (n as f64 * (n as f64 - 1.0))).sqrt();
    (mean, se)
}

/// A strictly convex quadratic program over box, halfspace, and ellipsoid
/// constraints, as the portfolio experiment poses it:
/// minimize `−z̄ᵀθ − θᵀAθ + ξ∥θ∥²`
/// subject to `0 ≤ θ ≤ cap`, `1ᵀθ ≤ 1`, `sᵀθ ≤ s_cap`, `θᵀΨθ ≤ ρ`.
pub struct PortfolioQp {
    pub z_bar: DVector<f64>,
    pub a: DMatrix<f64>,
    pub xi: f64,
    pub cap: f64,
    pub spreads: DVector<f64>,
    pub s_cap: f64,
    pub psi: DMatrix<f64>,
    pub rho: f64,
}

impl PortfolioQp {
    pub fn objective(&self, th: &DVector<f64>) -> f64 {
        -self.z_bar.dot(th) - (&self.a * th).dot(th) + self.xi * th.norm_squared()
    }

    pub fn grad_objective(&self, th: &DVector<f64>) -> DVector<f64> {
        -&self.z_bar - (&self.a + self.a.transpose()) * th + 2.0 * self.xi * th
    }

    fn hess_objective(&self) -> DMatrix<f64> {
        let l = self.z_bar.len();
        DMatrix::identity(l, l) * (2.0 * self.xi) - (&self.a + self.a.transpose())
    }

    /// All inequality constraints as `(g(θ), ∇g(θ))`, boxes included.
    pub fn constraint_rows(&self, th: &DVector<f64>) -> Vec<(f64, DVector<f64>)> {
        let l = th.len();
        let mut rows = Vec::with_capacity(2 * l + 3);
        for i in 0..l {
            let mut g = DVector::zeros(l);
            g[i] = -1.0;
            rows.push((-th[i], g));
        }
        for i in 0..l {
            let mut g = DVector::zeros(l);
            g[i] = 1.0;
            rows.push((th[i] - self.cap, g));
        }
        rows.push((th.sum() - 1.0, DVector::from_element(l, 1.0)));
        rows.push((self.spreads.dot(th) - self.s_cap, self.spreads.clone()));
        rows.push(((&self.psi * th).dot(th) - self.rho, 2.0 * (&self.psi * th)));
        rows
    }

    fn constraint_hessian(&self, idx: usize, l: usize) -> Option<DMatrix<f64>> {
        // only the trailing risk constraint is non-affine
        if idx == 2 * l + 2 {
            Some(2.0 * self.psi.clone())
        } else {
            None
        }
    }

    /// Interior-point solve by a log-barrier Newton method with a geometric
    /// central path. The final duality gap is below 1e-13, far inside the
    /// 1e-8 comparison tolerance the tests use.
    pub fn barrier_solve(&self) -> (DVector<f64>, f64) {
        let l = self.z_bar.len();
        let m = 2 * l + 3;
        // strictly feasible start for the shipped constraint scales
        let mut theta = DVector::from_element(l, (0.005_f64).min(self.cap / 3.0));
        assert!(
            self.constraint_rows(&theta).iter().all(|(g, _)| *g < 0.0),
            "barrier start must be strictly feasible"
        );
        let mut t = 1.0;
        while m as f64 / t > 1e-13 {
            theta = self.center(theta, t);
            t *= 20.0;
        }
        let obj = self.objective(&theta);
        (theta, obj)
    }

    fn barrier_value(&self, th: &DVector<f64>, t: f64) -> f64 {
        let mut v = t * self.objective(th);
        for (g, _) in self.constraint_rows(th) {
            if g >= 0.0 {
                return f64::INFINITY;
            }
            v -= (-g).ln();
        }
        v
    }

    fn center(&self, mut theta: DVector<f64>, t: f64) -> DVector<f64> {
        let l = theta.len();
        let hf = self.hess_objective();
        for _newton in 0..200 {
            let rows = self.constraint_rows(&theta);
            let mut grad = t * self.grad_objective(&theta);
            let mut hess = t * &hf;
            for (idx, (g, gg)) in rows.iter().enumerate() {
                grad += gg / (-g);
                hess += gg * gg.transpose() / (g * g);
                if let Some(h2) = self.constraint_hessian(idx, l) {
                    hess += h2 / (-g);
                }
            }
            let chol = hess.cholesky().expect("barrier Hessian must be SPD");
            let delta = chol.solve(&(-&grad));
            let decrement = -grad.dot(&delta);
            if decrement * 0.5 < 1e-16 {
                break;
            }
            let base = self.barrier_value(&theta, t);
            let mut alpha = 1.0;
            loop {
                let cand = &theta + alpha * &delta;
                if self.barrier_value(&cand, t) <= base - 0.25 * alpha * decrement {
                    theta = cand;
                    break;
                }
                alpha *= 0.5;
                if alpha < 1e-16 {
                    return theta;
                }
            }
        }
        theta
    }
}

/// KKT residual of a candidate solution: the larger of primal infeasibility
/// and the best-fit stationarity residual `min_{λ≥0} ∥∇f + Σ λᵢ∇gᵢ∥` over
/// the near-active constraints (restricting to those enforces
/// complementarity).
pub fn kkt_residual(
    grad_f: &DVector<f64>,
    rows: &[(f64, DVector<f64>)],
    active_tol: f64,
) -> f64 {
    let feas = rows.iter().fold(0.0f64, |acc, (g, _)| acc.max(*g));
    let active: Vec<&DVector<f64>> = rows
        .iter()
        .filter(|(g, _)| *g >= -active_tol)
        .map(|(_, gg)| gg)
        .collect();
    if active.is_empty() {
        return feas.max(grad_f.norm());
    }
    let d = grad_f.len();
    let na = active.len();
    let mut gmat = DMatrix::zeros(d, na);
    for (j, gg) in active.iter().enumerate() {
        gmat.column_mut(j).copy_from(*gg);
    }
    let gtg = gmat.transpose() * &gmat;
    // power iteration for the Lipschitz constant of the dual gradient
    let mut v = DVector::from_element(na, 1.0 / (na as f64).sqrt());
    let mut lam_max = 1.0;
    for _ in 0..200 {
        let w = &gtg * &v;
        lam_max = w.norm().max(1e-12);
        v = w / lam_max;
    }
    let tau = 1.0 / lam_max;
    let mut lambda = DVector::zeros(na);
    for _ in 0..200_000 {
        let resid = grad_f + &gmat * &lambda;
        let g_step = gmat.transpose() * resid;
        let mut next = &lambda - tau * g_step;
        for x in next.iter_mut() {
            *x = x.max(0.0);
        }
        let moved = (&next - &lambda).norm();
        lambda = next;
        if moved < 1e-15 {
            break;
        }
    }
    let stat = (grad_f + &gmat * &lambda).norm();
    feas.max(stat)
}

/// Random point that satisfies both the feasible set and the instance
/// constraints: a raw draw projected onto the feasible set, then shrunk
/// toward a strictly feasible anchor until `g ⪯ 0`.
pub fn random_feasible_theta<R: Rng + ?Sized>(
    problem: &Problem,
    anchor: &DVector<f64>,
    spread: f64,
    rng: &mut R,
) -> DVector<f64> {
    let d = anchor.len();
    let raw = DVector::from_fn(d, |_, _| rng.gen_range(-spread..spread));
    let mut theta = problem.feasible.project(&(anchor + raw));
    for _ in 0..200 {
        let ok = problem
            .constraints
            .g(&theta)
            .iter()
            .all(|&gi| gi <= 0.0);
        if ok {
            return theta;
        }
        theta = anchor + (&theta - anchor) * 0.7;
    }
    anchor.clone()
}
