//! Dense convex QP solver.
//!
//! Solves `min 1/2 x'Hx + g'x  s.t.  lower <= Ax <= upper` with an
//! operator-splitting (ADMM) iteration on a Ruiz-equilibrated copy of the
//! problem, adaptive penalty, an infeasibility certificate on the dual
//! increments, and an active-set polishing step on convergence.
//!
//! Dual convention: stationarity reads `Hx + g + A'y = 0`, with `y_i > 0`
//! on an active upper bound and `y_i < 0` on an active lower bound.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("inconsistent dimensions: {0}")]
    Dimension(String),
    #[error("hessian is not symmetric (max asymmetry {0:e})")]
    Asymmetric(f64),
    #[error("lower bound exceeds upper bound on row {0}")]
    InvertedBounds(usize),
    #[error("hessian is not positive semidefinite (min eigenvalue {0:e})")]
    NotConvex(f64),
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
}

/// `min 1/2 x'Hx + g'x  s.t.  lower <= Ax <= upper`; bounds may be infinite.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a: DMatrix<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl QpProblem {
    pub fn new(
        h: DMatrix<f64>,
        g: DVector<f64>,
        a: DMatrix<f64>,
        lower: DVector<f64>,
        upper: DVector<f64>,
    ) -> Result<Self, QpError> {
        let p = Self {
            h,
            g,
            a,
            lower,
            upper,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn unconstrained(h: DMatrix<f64>, g: DVector<f64>) -> Result<Self, QpError> {
        let n = g.len();
        Self::new(
            h,
            g,
            DMatrix::zeros(0, n),
            DVector::zeros(0),
            DVector::zeros(0),
        )
    }

    pub fn num_vars(&self) -> usize {
        self.g.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.lower.len()
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.g.len();
        let m = self.lower.len();
        if self.h.nrows() != n || self.h.ncols() != n {
            return Err(QpError::Dimension(format!(
                "H is {}x{}, g has {n}",
                self.h.nrows(),
                self.h.ncols()
            )));
        }
        if self.a.nrows() != m || self.a.ncols() != n || self.upper.len() != m {
            return Err(QpError::Dimension(format!(
                "A is {}x{}, lower {m}, upper {}",
                self.a.nrows(),
                self.a.ncols(),
                self.upper.len()
            )));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !(finite(self.h.as_slice()) && finite(self.g.as_slice()) && finite(self.a.as_slice())) {
            return Err(QpError::NonFinite("H, g or A"));
        }
        if self
            .lower
            .iter()
            .chain(self.upper.iter())
            .any(|v| v.is_nan())
        {
            return Err(QpError::NonFinite("bounds"));
        }
        let mut asym = 0.0f64;
        for j in 0..n {
            for i in 0..j {
                asym = asym.max((self.h[(i, j)] - self.h[(j, i)]).abs());
            }
        }
        if asym > 1e-10 {
            return Err(QpError::Asymmetric(asym));
        }
        for i in 0..m {
            if self.lower[i] > self.upper[i] {
                return Err(QpError::InvertedBounds(i));
            }
        }
        Ok(())
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.g.dot(x)
    }

    /// Snapshot of `(H, g, A, l, u)` for offline inspection; infinite bounds
    /// become `null`.
    pub fn debug_json(&self) -> serde_json::Value {
        #[derive(Serialize)]
        struct Dump {
            h: Vec<Vec<f64>>,
            g: Vec<f64>,
            a: Vec<Vec<f64>>,
            lower: Vec<Option<f64>>,
            upper: Vec<Option<f64>>,
        }
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..m.nrows())
                .map(|i| m.row(i).iter().copied().collect())
                .collect()
        };
        let bound = |v: &DVector<f64>| v.iter().map(|b| b.is_finite().then_some(*b)).collect();
        serde_json::to_value(Dump {
            h: rows(&self.h),
            g: self.g.iter().copied().collect(),
            a: rows(&self.a),
            lower: bound(&self.lower),
            upper: bound(&self.upper),
        })
        .expect("finite matrices serialize")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Solved,
    MaxIterations,
    PrimalInfeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub duals: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub objective: f64,
    pub polished: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    /// Absolute tolerance on the primal and dual residuals.
    pub tol: f64,
    /// Relative tolerance, scaled by the magnitude of the residual terms.
    pub tol_rel: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub adaptive_rho: bool,
    pub adaptive_interval: usize,
    pub scaling_iter: usize,
    pub polish: bool,
    pub infeasibility_tol: f64,
    /// Check `H` for positive semidefiniteness (and jitter it if it is only
    /// marginally indefinite). Callers whose Hessian is PSD by construction
    /// can skip the extra factorization.
    pub check_convexity: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            tol_rel: 0.0,
            max_iter: 4000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            adaptive_rho: true,
            adaptive_interval: 25,
            scaling_iter: 10,
            polish: true,
            infeasibility_tol: 1e-7,
            check_convexity: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KktResiduals {
    /// `||Hx + g + A'y||_inf`
    pub stationarity: f64,
    /// Largest distance of `Ax` from `[lower, upper]`.
    pub primal: f64,
    /// Largest product of a dual with the slack of the bound it acts on.
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.complementarity)
    }
}

fn bound_violation(v: f64, lo: f64, hi: f64) -> f64 {
    (lo - v).max(v - hi).max(0.0)
}

pub fn kkt_residuals(p: &QpProblem, x: &DVector<f64>, duals: &DVector<f64>) -> KktResiduals {
    let mut grad = &p.h * x + &p.g;
    if p.num_constraints() > 0 {
        grad += p.a.tr_mul(duals);
    }
    let ax = &p.a * x;
    let mut primal: f64 = 0.0;
    let mut comp: f64 = 0.0;
    for i in 0..p.num_constraints() {
        primal = primal.max(bound_violation(ax[i], p.lower[i], p.upper[i]));
        let y = duals[i];
        let c = if y > 0.0 {
            if p.upper[i].is_finite() {
                y * (p.upper[i] - ax[i]).abs()
            } else {
                f64::INFINITY
            }
        } else if y < 0.0 {
            if p.lower[i].is_finite() {
                -y * (ax[i] - p.lower[i]).abs()
            } else {
                f64::INFINITY
            }
        } else {
            0.0
        };
        comp = comp.max(c);
    }
    KktResiduals {
        stationarity: grad.amax(),
        primal,
        complementarity: comp,
    }
}

/// Smallest eigenvalue check and jitter so the solver always sees a PSD Hessian.
fn convexify(h: &DMatrix<f64>) -> Result<DMatrix<f64>, QpError> {
    let n = h.nrows();
    let shifted = h + DMatrix::identity(n, n) * 1e-10;
    if shifted.cholesky().is_some() {
        return Ok(h.clone());
    }
    let min_eig = h.clone().symmetric_eigenvalues().min();
    let scale = h.amax().max(1.0);
    if min_eig < -1e-6 * scale {
        return Err(QpError::NotConvex(min_eig));
    }
    Ok(h + DMatrix::identity(n, n) * (1e-9 - min_eig.min(0.0)))
}

/// Residual score and the scaled `(x, z, y)` it was reached at.
type ScoredIterate = (f64, DVector<f64>, DVector<f64>, DVector<f64>);

#[derive(Debug, Clone)]
struct WarmStart {
    x: DVector<f64>,
    z: DVector<f64>,
    y: DVector<f64>,
    rho: f64,
}

/// Row-compressed constraint matrix. Bound rows dominate the MPC and WBC
/// problems, so products and `A'RA` skip the zeros.
#[derive(Debug, Clone)]
struct SparseRows {
    n: usize,
    ptr: Vec<usize>,
    idx: Vec<usize>,
    val: Vec<f64>,
}

impl SparseRows {
    fn from_dense(a: &DMatrix<f64>) -> Self {
        let mut ptr = Vec::with_capacity(a.nrows() + 1);
        let mut idx = Vec::new();
        let mut val = Vec::new();
        ptr.push(0);
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                let v = a[(i, j)];
                if v != 0.0 {
                    idx.push(j);
                    val.push(v);
                }
            }
            ptr.push(idx.len());
        }
        Self {
            n: a.ncols(),
            ptr,
            idx,
            val,
        }
    }

    fn nrows(&self) -> usize {
        self.ptr.len() - 1
    }

    fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.ptr[i]..self.ptr[i + 1]
    }

    fn mul(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.nrows(), |i, _| {
            self.range(i).map(|k| self.val[k] * x[self.idx[k]]).sum()
        })
    }

    fn tr_mul(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n);
        for i in 0..self.nrows() {
            let yi = y[i];
            if yi != 0.0 {
                for k in self.range(i) {
                    out[self.idx[k]] += self.val[k] * yi;
                }
            }
        }
        out
    }

    /// `out += A' diag(w) A`
    fn add_gram(&self, w: &DVector<f64>, out: &mut DMatrix<f64>) {
        let n = self.n;
        let buf = out.as_mut_slice();
        for i in 0..self.nrows() {
            let r = self.range(i);
            let (idx, val) = (&self.idx[r.clone()], &self.val[r]);
            for (&q, &b) in idx.iter().zip(val) {
                let wb = w[i] * b;
                let col = &mut buf[q * n..(q + 1) * n];
                for (&p, &a) in idx.iter().zip(val) {
                    col[p] += a * wb;
                }
            }
        }
    }

    fn row_amax(&self, i: usize) -> f64 {
        self.range(i).map(|k| self.val[k].abs()).fold(0.0, f64::max)
    }
}

/// Equilibrated copy of a problem: `Hs = c D H D`, `gs = c D g`,
/// `As = E A D`, bounds scaled by `E`.
struct Scaled {
    h: DMatrix<f64>,
    g: DVector<f64>,
    a: SparseRows,
    lower: DVector<f64>,
    upper: DVector<f64>,
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
}

fn column_amax(h: &DMatrix<f64>) -> Vec<f64> {
    let n = h.nrows();
    if n == 0 {
        return vec![0.0; h.ncols()];
    }
    h.as_slice()
        .chunks_exact(n)
        .map(|col| {
            col.iter().fold(0.0f64, |acc, v| {
                let a = v.abs();
                if a > acc {
                    a
                } else {
                    acc
                }
            })
        })
        .collect()
}

fn clamp_norm(v: f64) -> f64 {
    if v < 1e-4 {
        1.0
    } else {
        v.min(1e4)
    }
}

fn equilibrate(p: &QpProblem, h: &DMatrix<f64>, iters: usize) -> Scaled {
    let n = p.num_vars();
    let m = p.num_constraints();
    let mut hs = h.clone();
    let mut gs = p.g.clone();
    let mut as_ = SparseRows::from_dense(&p.a);
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(m, 1.0);
    let mut c = 1.0;
    for _ in 0..iters {
        let mut col_max = column_amax(&hs);
        for (&j, &v) in as_.idx.iter().zip(&as_.val) {
            col_max[j] = col_max[j].max(v.abs());
        }
        let dd: Vec<f64> = col_max
            .iter()
            .map(|&v| 1.0 / clamp_norm(v).sqrt())
            .collect();
        let de = DVector::from_fn(m, |i, _| 1.0 / clamp_norm(as_.row_amax(i)).sqrt());
        if n > 0 {
            for (col, dj) in hs.as_mut_slice().chunks_exact_mut(n).zip(&dd) {
                for (hij, di) in col.iter_mut().zip(&dd) {
                    *hij *= di * dj;
                }
            }
        }
        for i in 0..m {
            let r = as_.range(i);
            for (v, &j) in as_.val[r.clone()].iter_mut().zip(&as_.idx[r]) {
                *v *= de[i] * dd[j];
            }
        }
        let dd = DVector::from_vec(dd);
        gs.component_mul_assign(&dd);
        d.component_mul_assign(&dd);
        e.component_mul_assign(&de);
    }
    let mean_col = if n > 0 {
        column_amax(&hs).iter().sum::<f64>() / n as f64
    } else {
        1.0
    };
    let gamma = 1.0 / clamp_norm(mean_col.max(gs.amax()));
    hs *= gamma;
    gs *= gamma;
    c *= gamma;
    let lower = p.lower.component_mul(&e);
    let upper = p.upper.component_mul(&e);
    Scaled {
        h: hs,
        g: gs,
        a: as_,
        lower,
        upper,
        d,
        e,
        c,
    }
}

/// Reusable solver holding the warm-start iterate of its last solve.
/// One instance per thread of control.
#[derive(Debug, Clone, Default)]
pub struct QpSolver {
    pub settings: QpSettings,
    warm: Option<WarmStart>,
}

impl QpSolver {
    pub fn new(settings: QpSettings) -> Self {
        Self {
            settings,
            warm: None,
        }
    }

    pub fn reset(&mut self) {
        self.warm = None;
    }

    /// Seeds the next solve with a primal guess (duals start at zero).
    pub fn warm_start_primal(&mut self, x: DVector<f64>, p: &QpProblem) {
        let z = &p.a * &x;
        let m = p.num_constraints();
        self.warm = Some(WarmStart {
            x,
            z,
            y: DVector::zeros(m),
            rho: self.settings.rho,
        });
    }

    pub fn solve(&mut self, p: &QpProblem) -> Result<QpSolution, QpError> {
        p.validate()?;
        let h = if self.settings.check_convexity {
            convexify(&p.h)?
        } else {
            p.h.clone()
        };
        let n = p.num_vars();
        let m = p.num_constraints();

        if m == 0 {
            let x = solve_unconstrained(&h, &p.g);
            let duals = DVector::zeros(0);
            let dual_residual = (&p.h * &x + &p.g).amax();
            let status = if dual_residual <= self.settings.tol {
                QpStatus::Solved
            } else {
                QpStatus::MaxIterations
            };
            self.warm = None;
            return Ok(QpSolution {
                objective: p.objective(&x),
                x,
                duals,
                status,
                iterations: 0,
                primal_residual: 0.0,
                dual_residual,
                polished: false,
            });
        }

        let s = equilibrate(p, &h, self.settings.scaling_iter);
        let set = self.settings;

        // scaled iterates
        let (mut x, mut z, mut y, mut rho) = match self.warm.take() {
            Some(w) if w.x.len() == n && w.z.len() == m => (
                w.x.component_div(&s.d),
                w.z.component_mul(&s.e),
                w.y.component_div(&s.e) * s.c,
                w.rho,
            ),
            _ => (
                DVector::zeros(n),
                DVector::zeros(m),
                DVector::zeros(m),
                set.rho,
            ),
        };

        let row_rho = |rho: f64| -> DVector<f64> {
            DVector::from_fn(m, |i, _| {
                let (lo, hi) = (s.lower[i], s.upper[i]);
                if lo == hi {
                    rho * 1e3
                } else if lo.is_infinite() && hi.is_infinite() {
                    1e-6
                } else {
                    rho
                }
            })
        };
        let factor = |rv: &DVector<f64>| {
            let mut k = s.h.clone();
            for i in 0..n {
                k[(i, i)] += set.sigma;
            }
            s.a.add_gram(rv, &mut k);
            k.cholesky()
                .expect("H + sigma I + A' R A is positive definite")
        };

        let mut rv = row_rho(rho);
        let mut chol = factor(&rv);
        let mut ax = s.a.mul(&x);
        let alpha = set.alpha;

        let mut best: Option<ScoredIterate> = None;
        let mut status = QpStatus::MaxIterations;
        let mut iterations = 0;
        let mut last_res = (f64::INFINITY, f64::INFINITY);

        for k in 1..=set.max_iter {
            iterations = k;
            let y_prev = y.clone();
            let mut v = rv.component_mul(&z) - &y;
            let mut rhs = s.a.tr_mul(&v);
            rhs += &x * set.sigma;
            rhs -= &s.g;
            let x_tilde = chol.solve(&rhs);
            let z_tilde = s.a.mul(&x_tilde);

            x = &x_tilde * alpha + &x * (1.0 - alpha);
            let z_hat = &z_tilde * alpha + &z * (1.0 - alpha);
            ax = &z_tilde * alpha + &ax * (1.0 - alpha);
            v = &z_hat + y.component_div(&rv);
            for i in 0..m {
                z[i] = v[i].clamp(s.lower[i], s.upper[i]);
            }
            y += (&z_hat - &z).component_mul(&rv);

            let check = k <= 10 || k % 5 == 0 || k == set.max_iter;
            if !check {
                continue;
            }

            // unscaled residuals
            let prim_vec = (&ax - &z).component_div(&s.e);
            let prim = prim_vec.amax();
            let hx = &s.h * &x;
            let aty = s.a.tr_mul(&y);
            let dual_vec = (&hx + &s.g + &aty).component_div(&s.d) / s.c;
            let dual = dual_vec.amax();
            last_res = (prim, dual);

            let score = prim.max(dual);
            if best.as_ref().is_none_or(|b| score < b.0) {
                best = Some((score, x.clone(), z.clone(), y.clone()));
            }

            let (tol_p, tol_d) = if set.tol_rel > 0.0 {
                let unscale = |v: &DVector<f64>| v.component_div(&s.d).amax() / s.c;
                let p_mag = ax
                    .component_div(&s.e)
                    .amax()
                    .max(z.component_div(&s.e).amax());
                let d_mag = unscale(&hx).max(unscale(&aty)).max(unscale(&s.g));
                (set.tol + set.tol_rel * p_mag, set.tol + set.tol_rel * d_mag)
            } else {
                (set.tol, set.tol)
            };
            if prim <= tol_p && dual <= tol_d {
                status = QpStatus::Solved;
                break;
            }

            if self.infeasibility_certificate(p, &s, &(&y - &y_prev)) {
                status = QpStatus::PrimalInfeasible;
                break;
            }

            if set.adaptive_rho && k % set.adaptive_interval == 0 {
                let prim_s = (&ax - &z).amax() / ax.amax().max(z.amax()).max(1e-12);
                let dual_s = (&hx + &s.g + &aty).amax()
                    / hx.amax().max(aty.amax()).max(s.g.amax()).max(1e-12);
                let ratio = (prim_s / dual_s.max(1e-12)).sqrt();
                let new_rho = (rho * ratio).clamp(1e-6, 1e6);
                if new_rho > 5.0 * rho || new_rho < 0.2 * rho {
                    rho = new_rho;
                    rv = row_rho(rho);
                    chol = factor(&rv);
                }
            }
        }

        if status == QpStatus::MaxIterations {
            if let Some((_, bx, bz, by)) = best {
                x = bx;
                z = bz;
                y = by;
            }
        }

        // back to the original variables
        let x_u = x.component_mul(&s.d);
        let z_u = z.component_div(&s.e);
        let y_u = y.component_mul(&s.e) / s.c;

        let mut sol = {
            let r = kkt_residuals(p, &x_u, &y_u);
            let prim = (&p.a * &x_u - &z_u).amax().max(r.primal);
            QpSolution {
                objective: p.objective(&x_u),
                x: x_u,
                duals: y_u,
                status,
                iterations,
                primal_residual: if status == QpStatus::MaxIterations {
                    prim
                } else {
                    last_res.0.max(r.primal)
                },
                dual_residual: r.stationarity,
                polished: false,
            }
        };

        if set.polish && status != QpStatus::PrimalInfeasible {
            if let Some(pol) = polish(p, &h, &s, &z, &y, set.tol) {
                if pol.primal_residual <= sol.primal_residual.max(set.tol)
                    && pol.dual_residual <= sol.dual_residual.max(set.tol)
                {
                    sol = QpSolution {
                        status: if pol.primal_residual <= set.tol && pol.dual_residual <= set.tol {
                            QpStatus::Solved
                        } else {
                            status
                        },
                        iterations,
                        ..pol
                    };
                }
            }
        }

        if sol.status != QpStatus::PrimalInfeasible {
            let z_store =
                (&p.a * &sol.x).zip_zip_map(&p.lower, &p.upper, |v, lo, hi| v.clamp(lo, hi));
            self.warm = Some(WarmStart {
                x: sol.x.clone(),
                z: z_store,
                y: sol.duals.clone(),
                rho,
            });
        }
        Ok(sol)
    }

    fn infeasibility_certificate(
        &self,
        p: &QpProblem,
        s: &Scaled,
        dy_scaled: &DVector<f64>,
    ) -> bool {
        let dy = dy_scaled.component_mul(&s.e) / s.c;
        let norm = dy.amax();
        if norm < 1e-12 {
            return false;
        }
        let eps = self.settings.infeasibility_tol * 1e3;
        // A'dy = D^-1 As' dy_s / c
        let aty = s.a.tr_mul(dy_scaled).component_div(&s.d) / s.c;
        if aty.amax() > eps * norm {
            return false;
        }
        let mut support = 0.0;
        for i in 0..p.num_constraints() {
            let v = dy[i];
            if v > 0.0 {
                if p.upper[i].is_finite() {
                    support += p.upper[i] * v;
                } else if v > eps * norm {
                    return false;
                }
            } else if v < 0.0 {
                if p.lower[i].is_finite() {
                    support += p.lower[i] * v;
                } else if -v > eps * norm {
                    return false;
                }
            }
        }
        support < -eps * norm
    }
}

fn solve_unconstrained(h: &DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    let n = g.len();
    let mut k = h.clone();
    for i in 0..n {
        k[(i, i)] += 1e-12;
    }
    match k.clone().cholesky() {
        Some(c) => -c.solve(g),
        None => {
            let svd = k.svd(true, true);
            -svd.solve(g, 1e-12).expect("svd computed with u and v")
        }
    }
}

/// Guess the active set from the scaled ADMM iterate and solve the reduced
/// equality-constrained KKT system with a small regularization followed by
/// iterative refinement.
fn polish(
    p: &QpProblem,
    h: &DMatrix<f64>,
    s: &Scaled,
    z: &DVector<f64>,
    y: &DVector<f64>,
    tol: f64,
) -> Option<QpSolution> {
    let n = p.num_vars();
    let m = p.num_constraints();
    let mut active: Vec<(usize, f64)> = Vec::new();
    for i in 0..m {
        if s.lower[i] == s.upper[i] || (s.lower[i].is_finite() && z[i] - s.lower[i] < -y[i]) {
            active.push((i, p.lower[i]));
        } else if s.upper[i].is_finite() && s.upper[i] - z[i] < y[i] {
            active.push((i, p.upper[i]));
        }
    }
    let k = active.len();
    let dim = n + k;
    const DELTA: f64 = 1e-9;
    let mut kkt = DMatrix::zeros(dim, dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(h);
    for (r, (i, _)) in active.iter().enumerate() {
        for j in 0..n {
            let v = p.a[(*i, j)];
            kkt[(n + r, j)] = v;
            kkt[(j, n + r)] = v;
        }
    }
    let mut rhs = DVector::zeros(dim);
    rhs.rows_mut(0, n).copy_from(&(-&p.g));
    for (r, (_, b)) in active.iter().enumerate() {
        rhs[n + r] = *b;
    }
    let mut reg = kkt.clone();
    for i in 0..n {
        reg[(i, i)] += DELTA;
    }
    for i in n..dim {
        reg[(i, i)] -= DELTA;
    }
    let lu = reg.lu();
    let mut sol = lu.solve(&rhs)?;
    for _ in 0..5 {
        let resid = &rhs - &kkt * &sol;
        if resid.amax() < 1e-14 {
            break;
        }
        sol += lu.solve(&resid)?;
    }
    if !sol.iter().all(|v| v.is_finite()) {
        return None;
    }
    let x = sol.rows(0, n).into_owned();
    let mut duals = DVector::zeros(m);
    for (r, (i, b)) in active.iter().enumerate() {
        let v = sol[n + r];
        let is_lower = *b == p.lower[*i] && p.lower[*i] != p.upper[*i];
        let is_upper = *b == p.upper[*i] && p.lower[*i] != p.upper[*i];
        // wrong-signed multiplier means the guessed set is not optimal
        if (is_lower && v > tol) || (is_upper && v < -tol) {
            return None;
        }
        duals[*i] = if is_lower {
            v.min(0.0)
        } else if is_upper {
            v.max(0.0)
        } else {
            v
        };
    }
    let r = kkt_residuals(p, &x, &duals);
    Some(QpSolution {
        objective: p.objective(&x),
        x,
        duals,
        status: QpStatus::Solved,
        iterations: 0,
        primal_residual: r.primal,
        dual_residual: r.stationarity,
        polished: true,
    })
}

/// One-shot solve with default settings apart from tolerance and iteration cap.
pub fn solve_qp(p: &QpProblem, tol: f64, max_iter: usize) -> Result<QpSolution, QpError> {
    let mut solver = QpSolver::new(QpSettings {
        tol,
        max_iter,
        ..QpSettings::default()
    });
    solver.solve(p)
}
