//! Dense convex quadratic programming with the Goldfarb–Idnani dual
//! active-set method.
//!
//! Problems are posed as
//!
//! ```text
//! minimize   ½ xᵀ H x + cᵀ x
//! subject to A_eq x = b_eq
//!            A_in x ≤ b_in
//! ```
//!
//! with `H` positive definite. The method starts from the unconstrained
//! minimum and adds violated constraints one at a time while staying dual
//! feasible, so every iterate is optimal for the constraints seen so far.
//! The projected quantities are recomputed from scratch at each step; the
//! problems here have a few dozen variables, so the cubic cost is negligible
//! and the code stays short.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::QpError;
use crate::linalg::Lu;

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub c: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
}

impl QpProblem {
    pub fn new(h: DMatrix<f64>, c: DVector<f64>) -> Self {
        let n = c.len();
        QpProblem {
            h,
            c,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, n),
            b_in: DVector::zeros(0),
        }
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.c.dot(x)
    }

    /// Largest violation of any constraint at `x`.
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        let eq = (&self.a_eq * x - &self.b_eq).amax();
        let ineq = (&self.a_in * x - &self.b_in).iter().fold(0.0_f64, |m, v| m.max(*v));
        eq.max(ineq)
    }

    fn check(&self) -> Result<(), QpError> {
        let n = self.dim();
        let ok = self.h.nrows() == n
            && self.h.ncols() == n
            && self.a_eq.ncols() == n
            && self.a_in.ncols() == n
            && self.a_eq.nrows() == self.b_eq.len()
            && self.a_in.nrows() == self.b_in.len();
        if ok {
            Ok(())
        } else {
            Err(QpError::Dimension(alloc::format!(
                "n = {n}, H {}x{}, A_eq {}x{} / {}, A_in {}x{} / {}",
                self.h.nrows(),
                self.h.ncols(),
                self.a_eq.nrows(),
                self.a_eq.ncols(),
                self.b_eq.len(),
                self.a_in.nrows(),
                self.a_in.ncols(),
                self.b_in.len()
            )))
        }
    }
}

/// Residuals of the first-order optimality conditions.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct KktReport {
    /// `‖H x + c + A_eqᵀ λ + A_inᵀ μ‖∞`
    pub stationarity: f64,
    /// Largest constraint violation.
    pub primal: f64,
    /// `max |μ_i (A_in x − b_in)_i|`
    pub complementarity: f64,
    /// Most negative inequality multiplier (0 when dual feasible).
    pub dual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    /// Multipliers of the equality rows.
    pub lambda: DVector<f64>,
    /// Non-negative multipliers of the inequality rows.
    pub mu: DVector<f64>,
    /// Inequality rows active at the solution.
    pub active: Vec<usize>,
    pub iterations: usize,
    pub kkt: KktReport,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpOptions {
    /// Violation (after row normalization) above which a constraint is added.
    pub feasibility_tol: f64,
    pub max_iterations: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions {
            feasibility_tol: 1e-12,
            max_iterations: 10_000,
        }
    }
}

/// A constraint in the solver's internal form `nᵀ x ≥ b` with `‖n‖ = 1`.
struct Row {
    n: DVector<f64>,
    b: f64,
    /// Scale that maps the internal multiplier back to the caller's row.
    scale: f64,
    equality: bool,
}

pub fn solve(problem: &QpProblem) -> Result<QpSolution, QpError> {
    solve_with(problem, &QpOptions::default())
}

pub fn solve_with(problem: &QpProblem, opts: &QpOptions) -> Result<QpSolution, QpError> {
    problem.check()?;
    let n = problem.dim();
    let chol = Cholesky::new(problem.h.clone()).ok_or(QpError::NotPositiveDefinite)?;
    let g_inv = chol.inverse();

    let mut rows = Vec::with_capacity(problem.a_eq.nrows() + problem.a_in.nrows());
    for (a, b, equality, sign) in [
        (&problem.a_eq, &problem.b_eq, true, 1.0),
        (&problem.a_in, &problem.b_in, false, -1.0),
    ] {
        for r in 0..a.nrows() {
            let v: DVector<f64> = a.row(r).transpose() * sign;
            let norm = v.norm();
            if norm == 0.0 {
                // An empty row is either trivially satisfied or infeasible.
                let ok = if equality { b[r] == 0.0 } else { b[r] >= 0.0 };
                if !ok {
                    return Err(QpError::Infeasible { rows: vec![rows.len()] });
                }
                rows.push(Row {
                    n: v,
                    b: 0.0,
                    scale: 1.0,
                    equality,
                });
                continue;
            }
            rows.push(Row {
                n: v / norm,
                b: sign * b[r] / norm,
                scale: norm,
                equality,
            });
        }
    }
    let n_eq = problem.a_eq.nrows();

    let mut x = -(&g_inv * &problem.c);
    let mut active: Vec<usize> = Vec::new();
    // Internal multipliers of `active`, in the same order.
    let mut u: Vec<f64> = Vec::new();
    // Equality rows may be entered with flipped sign.
    let mut flip = vec![1.0; rows.len()];
    let mut pending_eq: Vec<usize> = (0..n_eq).collect();
    let mut iterations = 0;
    let tol = opts.feasibility_tol;

    loop {
        iterations += 1;
        if iterations > opts.max_iterations {
            return Err(QpError::IterationLimit(opts.max_iterations));
        }
        // Pick the next constraint: pending equalities first, then the most
        // violated inequality.
        let p = if let Some(p) = pending_eq.first().copied() {
            pending_eq.remove(0);
            p
        } else {
            let mut best = None;
            let mut worst = -tol;
            for (k, row) in rows.iter().enumerate().skip(n_eq) {
                if row.scale == 1.0 && row.n.norm() == 0.0 {
                    continue;
                }
                let s = row.n.dot(&x) - row.b;
                if s < worst && !active.contains(&k) {
                    worst = s;
                    best = Some(k);
                }
            }
            match best {
                Some(p) => p,
                None => break,
            }
        };
        if rows[p].n.norm() == 0.0 {
            continue;
        }
        if rows[p].equality && rows[p].n.dot(&x) - rows[p].b > 0.0 {
            flip[p] = -1.0;
        }
        let np = &rows[p].n * flip[p];
        let bp = rows[p].b * flip[p];
        let mut u_p = 0.0;

        loop {
            iterations += 1;
            if iterations > opts.max_iterations {
                return Err(QpError::IterationLimit(opts.max_iterations));
            }
            let s = np.dot(&x) - bp;
            let (z, r) = directions(&g_inv, &rows, &flip, &active, &np);
            let z_norm = z.amax();
            let zn = z.dot(&np);
            let t2 = if z_norm <= 1e-13 || zn <= 0.0 { f64::INFINITY } else { -s / zn };

            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for (j, &k) in active.iter().enumerate() {
                if rows[k].equality || r[j] <= 1e-14 {
                    continue;
                }
                let t = u[j] / r[j];
                if t < t1 {
                    t1 = t;
                    drop = Some(j);
                }
            }

            if t2.is_infinite() {
                if rows[p].equality && s.abs() <= tol {
                    // Linearly dependent on active equalities and already satisfied.
                    break;
                }
                let Some(j) = drop else {
                    return Err(infeasible(problem, &x));
                };
                for (uj, rj) in u.iter_mut().zip(r.iter()) {
                    *uj -= t1 * rj;
                }
                u_p += t1;
                active.remove(j);
                u.remove(j);
                continue;
            }

            let t = t1.min(t2);
            x += &z * t;
            for (uj, rj) in u.iter_mut().zip(r.iter()) {
                *uj -= t * rj;
            }
            u_p += t;
            if t2 <= t1 {
                active.push(p);
                u.push(u_p);
                break;
            }
            let j = drop.expect("t1 finite");
            active.remove(j);
            u.remove(j);
        }
    }

    let mut lambda = DVector::zeros(n_eq);
    let mut mu = DVector::zeros(problem.a_in.nrows());
    for (&k, &uk) in active.iter().zip(&u) {
        // Internal form: H x + c = Σ u_k flip_k n_k with n_k = sign a_k / scale.
        if k < n_eq {
            lambda[k] = -uk * flip[k] / rows[k].scale;
        } else {
            mu[k - n_eq] = uk.max(0.0) / rows[k].scale;
        }
    }
    let mut active_in: Vec<usize> = active.iter().filter(|&&k| k >= n_eq).map(|&k| k - n_eq).collect();
    active_in.sort_unstable();
    let kkt = kkt_report(problem, &x, &lambda, &mu);
    let _ = n;
    Ok(QpSolution {
        objective: problem.objective(&x),
        x,
        lambda,
        mu,
        active: active_in,
        iterations,
        kkt,
    })
}

/// Primal step direction `z = H⁺ n_p` and dual direction `r = N* n_p` for the
/// current active set.
fn directions(
    g_inv: &DMatrix<f64>,
    rows: &[Row],
    flip: &[f64],
    active: &[usize],
    np: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let gn = g_inv * np;
    if active.is_empty() {
        return (gn, DVector::zeros(0));
    }
    let n = np.len();
    let mut nmat = DMatrix::zeros(n, active.len());
    for (j, &k) in active.iter().enumerate() {
        nmat.set_column(j, &(&rows[k].n * flip[k]));
    }
    let ginv_n = g_inv * &nmat;
    let m = nmat.transpose() * &ginv_n;
    let rhs = ginv_n.transpose() * np;
    let r = match Lu::factor(&m) {
        Ok(lu) => lu.solve(&rhs),
        Err(_) => DVector::zeros(active.len()),
    };
    let z = gn - &ginv_n * &r;
    (z, r)
}

fn infeasible(problem: &QpProblem, x: &DVector<f64>) -> QpError {
    let n_eq = problem.a_eq.nrows();
    let mut viol: Vec<(f64, usize)> = (&problem.a_eq * x - &problem.b_eq)
        .iter()
        .map(|v| v.abs())
        .chain((&problem.a_in * x - &problem.b_in).iter().copied())
        .enumerate()
        .filter(|(_, v)| *v > 0.0)
        .map(|(k, v)| (v, k))
        .collect();
    viol.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let _ = n_eq;
    QpError::Infeasible {
        rows: viol.iter().take(5).map(|&(_, k)| k).collect(),
    }
}

pub fn kkt_report(problem: &QpProblem, x: &DVector<f64>, lambda: &DVector<f64>, mu: &DVector<f64>) -> KktReport {
    let grad = &problem.h * x + &problem.c + problem.a_eq.transpose() * lambda + problem.a_in.transpose() * mu;
    let slack = &problem.a_in * x - &problem.b_in;
    KktReport {
        stationarity: grad.amax(),
        primal: problem.max_violation(x),
        complementarity: mu.iter().zip(slack.iter()).fold(0.0, |m, (a, s)| m.max((a * s).abs())),
        dual: mu.iter().fold(0.0_f64, |m, v| m.min(*v)),
    }
}
