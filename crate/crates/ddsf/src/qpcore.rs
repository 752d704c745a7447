//! Standard-form convex QP and the built-in operator-splitting (ADMM) solver.
//!
//! The problem is
//! ```text
//!     minimize   1/2 z' P z + q' z
//!     subject to l <= A z <= u        (equality rows encoded as l_i = u_i)
//! ```
//! with `P` symmetric positive semidefinite. The solver follows the usual
//! operator-splitting scheme: a proximal x-update through a cached Cholesky
//! factor of `P + sigma I + A' diag(rho) A`, projection of the constraint
//! image onto `[l, u]`, dual ascent, over-relaxation, residual-balancing
//! penalty adaptation, and a primal-infeasibility certificate on the dual
//! delta. Converged iterates are polished by solving the KKT system of the
//! detected active set, which typically drives residuals near machine
//! precision; the polished point is kept only when it verifiably improves
//! both residuals.
//!
//! The solver is reentrant in the sense that each [`AdmmSolver`] owns its
//! workspace; concurrent solves on separate instances are fine. An instance
//! caches the last factorization and reuses it when the same `P`/`A` pair is
//! solved again (only `q`, `l`, `u` changed), which is the common case in
//! receding-horizon loops.

use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};

/// Absolute symmetry tolerance accepted for the quadratic cost matrix.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Convex QP data. Equality rows are encoded as `l_i = u_i`; one-sided rows
/// use infinite bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem<T: Scalar = f64> {
    p: DMatrix<T>,
    q: DVector<T>,
    a_con: DMatrix<T>,
    l: DVector<T>,
    u: DVector<T>,
}

impl<T: Scalar> QpProblem<T> {
    pub fn new(
        p: DMatrix<T>,
        q: DVector<T>,
        a_con: DMatrix<T>,
        l: DVector<T>,
        u: DVector<T>,
    ) -> Result<Self> {
        let d = q.len();
        if p.nrows() != d || p.ncols() != d {
            return Err(Error::InvalidArgument(format!(
                "P must be {d}x{d}, got {}x{}",
                p.nrows(),
                p.ncols()
            )));
        }
        if a_con.nrows() > 0 && a_con.ncols() != d {
            return Err(Error::DimMismatch {
                context: "constraint matrix columns",
                expected: d,
                got: a_con.ncols(),
            });
        }
        if l.len() != a_con.nrows() || u.len() != a_con.nrows() {
            return Err(Error::DimMismatch {
                context: "constraint bounds",
                expected: a_con.nrows(),
                got: l.len().max(u.len()),
            });
        }
        if p.iter().any(|v| !v.is_finite())
            || q.iter().any(|v| !v.is_finite())
            || a_con.iter().any(|v| !v.is_finite())
        {
            return Err(Error::InvalidArgument(
                "P, q and A must be finite (no NaN/inf entries)".into(),
            ));
        }
        #[allow(clippy::eq_op)]
        let has_nan = l.iter().any(|v| v != v) || u.iter().any(|v| v != v);
        if has_nan {
            return Err(Error::InvalidArgument("bounds must not be NaN".into()));
        }
        let sym_tol: T = cast(SYMMETRY_TOL);
        for i in 0..d {
            for j in (i + 1)..d {
                if (p[(i, j)] - p[(j, i)]).abs() > sym_tol {
                    return Err(Error::InvalidArgument(format!(
                        "P is not symmetric at ({i},{j}): {} vs {}",
                        p[(i, j)],
                        p[(j, i)]
                    )));
                }
            }
        }
        Ok(Self { p, q, a_con, l, u })
    }

    pub fn num_vars(&self) -> usize {
        self.q.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.a_con.nrows()
    }

    pub fn p(&self) -> &DMatrix<T> {
        &self.p
    }

    pub fn q(&self) -> &DVector<T> {
        &self.q
    }

    pub fn a_con(&self) -> &DMatrix<T> {
        &self.a_con
    }

    pub fn l(&self) -> &DVector<T> {
        &self.l
    }

    pub fn u(&self) -> &DVector<T> {
        &self.u
    }

    /// Objective `1/2 z' P z + q' z`.
    pub fn objective(&self, z: &DVector<T>) -> T {
        let half: T = cast(0.5);
        half * (z.transpose() * &self.p * z)[(0, 0)] + self.q.dot(z)
    }

    /// Plain-text dump of the assembled problem in a matrix-market-style
    /// coordinate format (1-based indices, one section per array).
    pub fn dump_matrix_market<W: Write>(&self, mut w: W) -> Result<()> {
        let fmt_bound = |v: T| -> String {
            if v == T::infinity() {
                "inf".into()
            } else if v == -T::infinity() {
                "-inf".into()
            } else {
                format!("{}", v)
            }
        };
        writeln!(w, "%%MatrixMarket-style convex QP dump")?;
        writeln!(
            w,
            "% sections: P (coordinate), q (array), A (coordinate), l, u"
        )?;
        let write_coord = |w: &mut W, name: &str, m: &DMatrix<T>| -> Result<()> {
            let nnz = m.iter().filter(|v| **v != T::zero()).count();
            writeln!(w, "{name} coordinate real general {} {} {nnz}", m.nrows(), m.ncols())?;
            for j in 0..m.ncols() {
                for i in 0..m.nrows() {
                    if m[(i, j)] != T::zero() {
                        writeln!(w, "{} {} {}", i + 1, j + 1, m[(i, j)])?;
                    }
                }
            }
            Ok(())
        };
        write_coord(&mut w, "P", &self.p)?;
        writeln!(w, "q array real {}", self.q.len())?;
        for v in self.q.iter() {
            writeln!(w, "{}", v)?;
        }
        write_coord(&mut w, "A", &self.a_con)?;
        writeln!(w, "l array real {}", self.l.len())?;
        for v in self.l.iter() {
            writeln!(w, "{}", fmt_bound(*v))?;
        }
        writeln!(w, "u array real {}", self.u.len())?;
        for v in self.u.iter() {
            writeln!(w, "{}", fmt_bound(*v))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    /// A primal-infeasibility certificate fired (or the bounds were
    /// contradictory to begin with).
    Infeasible,
    /// Iteration budget exhausted before the tolerances were met. Unbounded
    /// problems also end up here: no dual certificate is attempted.
    MaxIter,
}

impl std::fmt::Display for QpStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            QpStatus::Optimal => write!(f, "optimal"),
            QpStatus::Infeasible => write!(f, "infeasible"),
            QpStatus::MaxIter => write!(f, "max_iter"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution<T: Scalar = f64> {
    pub z: DVector<T>,
    pub dual: DVector<T>,
    pub status: QpStatus,
    pub objective: T,
    pub primal_residual: T,
    pub dual_residual: T,
    pub iterations: usize,
    pub polished: bool,
}

#[derive(Debug, Clone)]
pub struct AdmmSettings<T: Scalar = f64> {
    pub eps_abs: T,
    pub eps_rel: T,
    pub max_iter: usize,
    pub rho: T,
    pub sigma: T,
    /// Over-relaxation parameter in (0, 2).
    pub alpha: T,
    /// Penalty multiplier applied to equality rows (l_i = u_i).
    pub rho_eq_scale: T,
    pub rho_min: T,
    pub rho_max: T,
    /// Residuals are evaluated every this many iterations.
    pub check_interval: usize,
    /// Penalty adaptation is considered every this many iterations.
    pub adaptive_rho_interval: usize,
    /// Refactor only when the penalty moves by more than this factor.
    pub adaptive_rho_threshold: T,
    pub eps_pinf: T,
    pub polish: bool,
    pub polish_delta: T,
    pub polish_refine_iters: usize,
    /// Attempt the active-set polish once residuals are within this factor
    /// of the target tolerances; the polished point is accepted only if it
    /// meets the strict tolerances, so this only ever saves iterations.
    pub polish_early_factor: T,
}

impl<T: Scalar> Default for AdmmSettings<T> {
    fn default() -> Self {
        Self {
            eps_abs: cast(1e-6),
            eps_rel: cast(1e-6),
            max_iter: 20_000,
            rho: cast(0.01),
            sigma: cast(1e-6),
            alpha: cast(1.6),
            rho_eq_scale: cast(1e3),
            rho_min: cast(1e-6),
            rho_max: cast(1e6),
            check_interval: 10,
            adaptive_rho_interval: 100,
            adaptive_rho_threshold: cast(5.0),
            eps_pinf: cast(1e-6),
            polish: true,
            polish_delta: cast(1e-7),
            polish_refine_iters: 5,
            polish_early_factor: cast(100.0),
        }
    }
}

/// KKT residuals of a candidate primal/dual pair:
/// the worst violation of `l <= A z <= u` and `||P z + q + A' dual||_inf`.
pub fn kkt_residuals<T: Scalar>(
    prob: &QpProblem<T>,
    z: &DVector<T>,
    dual: &DVector<T>,
) -> Result<(T, T)> {
    if z.len() != prob.num_vars() {
        return Err(Error::DimMismatch {
            context: "kkt primal vector",
            expected: prob.num_vars(),
            got: z.len(),
        });
    }
    if dual.len() != prob.num_constraints() {
        return Err(Error::DimMismatch {
            context: "kkt dual vector",
            expected: prob.num_constraints(),
            got: dual.len(),
        });
    }
    let az = &prob.a_con * z;
    let mut primal = T::zero();
    for i in 0..az.len() {
        if prob.l[i].is_finite() {
            primal = primal.max(prob.l[i] - az[i]);
        }
        if prob.u[i].is_finite() {
            primal = primal.max(az[i] - prob.u[i]);
        }
    }
    primal = primal.max(T::zero());
    let station = &prob.p * z + &prob.q + prob.a_con.transpose() * dual;
    let dual_res = station.amax();
    Ok((primal, if station.is_empty() { T::zero() } else { dual_res }))
}

/// Worst complementarity violation of a primal/dual pair: a positive dual
/// must sit on its upper bound, a negative one on its lower bound. Needed to
/// reject polish candidates whose active set satisfies stationarity with the
/// wrong multiplier signs.
fn complementarity_violation<T: Scalar>(
    prob: &QpProblem<T>,
    z: &DVector<T>,
    dual: &DVector<T>,
) -> T {
    let az = &prob.a_con * z;
    let mut worst = T::zero();
    for i in 0..az.len() {
        let y = dual[i];
        if y > T::zero() {
            if prob.u[i].is_finite() {
                worst = worst.max(y * (prob.u[i] - az[i]).abs());
            } else {
                worst = worst.max(y);
            }
        } else if y < T::zero() {
            if prob.l[i].is_finite() {
                worst = worst.max(-y * (az[i] - prob.l[i]).abs());
            } else {
                worst = worst.max(-y);
            }
        }
    }
    worst
}

/// Compressed sparse rows; the constraint matrices here are mostly selector
/// rows plus a few dense blocks, so sparse products pay off.
#[derive(Debug, Clone)]
struct Csr<T> {
    nrows: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> Csr<T> {
    fn from_dense(m: &DMatrix<T>) -> Self {
        let mut indptr = Vec::with_capacity(m.nrows() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                let v = m[(i, j)];
                if v != T::zero() {
                    indices.push(j);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Self {
            nrows: m.nrows(),
            indptr,
            indices,
            values,
        }
    }

    fn mul_vec(&self, x: &DVector<T>, out: &mut DVector<T>) {
        for i in 0..self.nrows {
            let mut acc = T::zero();
            for k in self.indptr[i]..self.indptr[i + 1] {
                acc += self.values[k] * x[self.indices[k]];
            }
            out[i] = acc;
        }
    }

    fn tr_mul_vec(&self, y: &DVector<T>, out: &mut DVector<T>) {
        out.fill(T::zero());
        for i in 0..self.nrows {
            let yi = y[i];
            if yi != T::zero() {
                for k in self.indptr[i]..self.indptr[i + 1] {
                    out[self.indices[k]] += self.values[k] * yi;
                }
            }
        }
    }
}

struct FactorCache<T: Scalar> {
    /// Original data, used as the cache key.
    p: DMatrix<T>,
    a: DMatrix<T>,
    sigma: T,
    rho_bar: T,
    rho_vec: DVector<T>,
    /// Ruiz equilibration: the iteration runs on `P_s = c D P D`,
    /// `A_s = E A D`; primal unscales as `x = D x_s`, dual as `y = E y_s / c`.
    d_scale: DVector<T>,
    e_scale: DVector<T>,
    c_scale: T,
    p_s: DMatrix<T>,
    csr_s: Csr<T>,
    chol: Cholesky<T, Dyn>,
}

/// The built-in operator-splitting solver. One instance per control loop;
/// create fresh instances for concurrent solves.
#[derive(Default)]
pub struct AdmmSolver<T: Scalar = f64> {
    pub settings: AdmmSettings<T>,
    cache: Option<FactorCache<T>>,
}

impl<T: Scalar> AdmmSolver<T> {
    pub fn new(settings: AdmmSettings<T>) -> Self {
        Self {
            settings,
            cache: None,
        }
    }

    /// Solve from a cold start.
    pub fn solve(&mut self, prob: &QpProblem<T>) -> Result<QpSolution<T>> {
        self.solve_warm(prob, None, None)
    }

    /// Solve with optional primal/dual warm starts (lengths must match the
    /// problem; pass `None` to start from zero).
    pub fn solve_warm(
        &mut self,
        prob: &QpProblem<T>,
        z0: Option<&DVector<T>>,
        y0: Option<&DVector<T>>,
    ) -> Result<QpSolution<T>> {
        let d = prob.num_vars();
        let n_c = prob.num_constraints();

        // Contradictory bounds make the feasible set trivially empty.
        for i in 0..n_c {
            if prob.l[i] > prob.u[i]
                || prob.l[i] == T::infinity()
                || prob.u[i] == -T::infinity()
            {
                let z = DVector::zeros(d);
                let dual = DVector::zeros(n_c);
                let (pr, dr) = kkt_residuals(prob, &z, &dual)?;
                return Ok(QpSolution {
                    objective: prob.objective(&z),
                    z,
                    dual,
                    status: QpStatus::Infeasible,
                    primal_residual: pr,
                    dual_residual: dr,
                    iterations: 0,
                    polished: false,
                });
            }
        }

        self.ensure_factorization(prob)?;

        // Per-solve data in the equilibrated space.
        let (q_s, l_s, u_s) = {
            let cache = self.cache.as_ref().unwrap();
            let q_s = DVector::from_fn(d, |j, _| {
                cache.c_scale * cache.d_scale[j] * prob.q[j]
            });
            let l_s = DVector::from_fn(n_c, |i, _| cache.e_scale[i] * prob.l[i]);
            let u_s = DVector::from_fn(n_c, |i, _| cache.e_scale[i] * prob.u[i]);
            (q_s, l_s, u_s)
        };

        let mut x = DVector::zeros(d); // scaled primal
        if let Some(v) = z0 {
            if v.len() == d {
                let cache = self.cache.as_ref().unwrap();
                for j in 0..d {
                    x[j] = v[j] / cache.d_scale[j];
                }
            }
        }
        let mut y = DVector::zeros(n_c); // scaled dual
        if let Some(v) = y0 {
            if v.len() == n_c {
                let cache = self.cache.as_ref().unwrap();
                for i in 0..n_c {
                    y[i] = cache.c_scale * v[i] / cache.e_scale[i];
                }
            }
        }

        let mut ax = DVector::zeros(n_c);
        self.cache.as_ref().unwrap().csr_s.mul_vec(&x, &mut ax);
        let mut z = ax.clone();
        clamp_into(&mut z, &l_s, &u_s);

        let mut rhs = DVector::zeros(d);
        let mut w = DVector::zeros(n_c);
        let mut at_w = DVector::zeros(d);
        let mut x_tilde;
        let mut z_tilde = DVector::zeros(n_c);

        let alpha = self.settings.alpha;
        let one_m_alpha = T::one() - alpha;
        let max_iter = self.settings.max_iter.max(1);
        let mut iterations = max_iter;
        let mut status = QpStatus::MaxIter;
        let mut last_check_y = y.clone();
        // The projection writes the bound values bitwise, so the active
        // signature of z is exact and cheap to track across checks.
        let mut last_signature: Vec<i8> = Vec::new();
        let mut last_polish_attempt = 0usize;

        let mut k = 0;
        while k < max_iter {
            let cache = self.cache.as_ref().unwrap();
            // x-update: (P + sigma I + A' R A) x~ = sigma x - q + A'(R z - y)
            for i in 0..n_c {
                w[i] = cache.rho_vec[i] * z[i] - y[i];
            }
            cache.csr_s.tr_mul_vec(&w, &mut at_w);
            for j in 0..d {
                rhs[j] = cache.sigma * x[j] - q_s[j] + at_w[j];
            }
            x_tilde = cache.chol.solve(&rhs);
            cache.csr_s.mul_vec(&x_tilde, &mut z_tilde);

            // relaxation, projection, dual ascent
            for j in 0..d {
                x[j] = alpha * x_tilde[j] + one_m_alpha * x[j];
            }
            for i in 0..n_c {
                let zhat = alpha * z_tilde[i] + one_m_alpha * z[i];
                ax[i] = zhat;
                let v = zhat + y[i] / cache.rho_vec[i];
                let projected = v.max(l_s[i]).min(u_s[i]);
                y[i] += cache.rho_vec[i] * (zhat - projected);
                z[i] = projected;
            }

            k += 1;

            if k % self.settings.check_interval == 0 || k == max_iter {
                let (r_prim, r_dual, eps_prim, eps_dual) =
                    self.residuals_unscaled(prob, &x, &z, &y, &ax);
                if r_prim <= eps_prim && r_dual <= eps_dual {
                    status = QpStatus::Optimal;
                    iterations = k;
                    break;
                }
                // The tail of the iteration is slow on nearly-linear costs;
                // once the active set has settled the polish step finishes
                // the job. Attempt it when residuals are close or when the
                // projection signature has stopped changing, keeping the
                // result only if it verifiably meets the strict tolerances.
                if self.settings.polish {
                    let signature: Vec<i8> = (0..n_c)
                        .map(|i| {
                            if l_s[i] == u_s[i] {
                                2
                            } else if z[i] == l_s[i] {
                                -1
                            } else if z[i] == u_s[i] {
                                1
                            } else {
                                0
                            }
                        })
                        .collect();
                    let near = r_prim <= eps_prim * self.settings.polish_early_factor
                        && r_dual <= eps_dual * self.settings.polish_early_factor;
                    let stable = signature == last_signature
                        && k >= last_polish_attempt + 5 * self.settings.check_interval;
                    if near || stable {
                        last_polish_attempt = k;
                        let y_un = self.unscale_dual(&y);
                        let sig_active: Vec<(usize, T)> = signature
                            .iter()
                            .enumerate()
                            .filter_map(|(i, &s)| match s {
                                2 | -1 => Some((i, prob.l[i])),
                                1 => Some((i, prob.u[i])),
                                _ => None,
                            })
                            .collect();
                        if let Some((px, py, ppr, pdr)) = self.polish_verified(
                            prob,
                            &y_un,
                            Some(&sig_active),
                            self.settings.eps_abs,
                        )? {
                            return Ok(QpSolution {
                                objective: prob.objective(&px),
                                z: px,
                                dual: py,
                                status: QpStatus::Optimal,
                                primal_residual: ppr,
                                dual_residual: pdr,
                                iterations: k,
                                polished: true,
                            });
                        }
                    }
                    last_signature = signature;
                }
                let cache = self.cache.as_ref().unwrap();
                let mut dy = DVector::zeros(n_c);
                for i in 0..n_c {
                    dy[i] = cache.e_scale[i] * (y[i] - last_check_y[i]) / cache.c_scale;
                }
                if self.primal_infeasibility_certificate(prob, &dy) {
                    status = QpStatus::Infeasible;
                    iterations = k;
                    break;
                }
                last_check_y.copy_from(&y);

                if k % self.settings.adaptive_rho_interval == 0 && k < max_iter {
                    self.maybe_adapt_rho(r_prim, r_dual, eps_prim, eps_dual)?;
                }
            }
        }

        // Back to the original coordinates for the final bookkeeping.
        let (mut x, mut y) = {
            let cache = self.cache.as_ref().unwrap();
            let xu = DVector::from_fn(d, |j, _| cache.d_scale[j] * x[j]);
            let yu = self.unscale_dual(&y);
            (xu, yu)
        };
        let (mut pr, mut dr) = kkt_residuals(prob, &x, &y)?;
        let mut polished = false;
        if status == QpStatus::Optimal && self.settings.polish {
            let active = self.active_from_dual(prob, &y, T::zero());
            if let Some((px, py)) = self.polish(prob, &active) {
                let (ppr, pdr) = kkt_residuals(prob, &px, &py)?;
                let comp = complementarity_violation(prob, &px, &py);
                if ppr.max(pdr) < pr.max(dr) && comp <= self.settings.eps_abs {
                    x = px;
                    y = py;
                    pr = ppr;
                    dr = pdr;
                    polished = true;
                }
            }
        }

        Ok(QpSolution {
            objective: prob.objective(&x),
            z: x,
            dual: y,
            status,
            primal_residual: pr,
            dual_residual: dr,
            iterations,
            polished,
        })
    }

    /// Run again with tighter tolerances, warm-started from a solution.
    pub fn resolve_tighter(
        &mut self,
        prob: &QpProblem<T>,
        sol: &QpSolution<T>,
        eps: T,
    ) -> Result<QpSolution<T>> {
        let saved = (self.settings.eps_abs, self.settings.eps_rel);
        self.settings.eps_abs = eps;
        self.settings.eps_rel = eps;
        let out = self.solve_warm(prob, Some(&sol.z), Some(&sol.dual));
        self.settings.eps_abs = saved.0;
        self.settings.eps_rel = saved.1;
        out
    }

    fn ensure_factorization(&mut self, prob: &QpProblem<T>) -> Result<()> {
        let reusable = self.cache.as_ref().is_some_and(|c| {
            c.sigma == self.settings.sigma && c.p == prob.p && c.a == prob.a_con
        });
        if reusable {
            return Ok(());
        }
        let (d_scale, e_scale, c_scale) = ruiz_equilibration(&prob.p, &prob.a_con);
        let d = prob.num_vars();
        let n_c = prob.num_constraints();
        let mut p_s = prob.p.clone();
        for i in 0..d {
            for j in 0..d {
                p_s[(i, j)] *= c_scale * d_scale[i] * d_scale[j];
            }
        }
        let mut a_s = prob.a_con.clone();
        for i in 0..n_c {
            for j in 0..d {
                a_s[(i, j)] *= e_scale[i] * d_scale[j];
            }
        }
        let csr_s = Csr::from_dense(&a_s);
        if std::env::var("QP_DEBUG").is_ok() {
            let dmin = d_scale.iter().fold(f64::INFINITY, |m, &v| m.min(v.to_f64().unwrap()));
            let dmax = d_scale.iter().fold(0.0f64, |m, &v| m.max(v.to_f64().unwrap()));
            let emin = e_scale.iter().fold(f64::INFINITY, |m, &v| m.min(v.to_f64().unwrap()));
            let emax = e_scale.iter().fold(0.0f64, |m, &v| m.max(v.to_f64().unwrap()));
            eprintln!("scaling: d [{dmin:.2e},{dmax:.2e}] e [{emin:.2e},{emax:.2e}] c {:.2e}", c_scale.to_f64().unwrap());
        }
        let rho_bar = self.settings.rho;
        let rho_vec = self.rho_vector(prob, rho_bar);
        let chol = self.factorize(&p_s, &csr_s, &rho_vec)?;
        self.cache = Some(FactorCache {
            p: prob.p.clone(),
            a: prob.a_con.clone(),
            sigma: self.settings.sigma,
            rho_bar,
            rho_vec,
            d_scale,
            e_scale,
            c_scale,
            p_s,
            csr_s,
            chol,
        });
        Ok(())
    }

    fn rho_vector(&self, prob: &QpProblem<T>, rho_bar: T) -> DVector<T> {
        DVector::from_fn(prob.num_constraints(), |i, _| {
            if prob.l[i] == prob.u[i] {
                rho_bar * self.settings.rho_eq_scale
            } else {
                rho_bar
            }
        })
    }

    fn unscale_dual(&self, y_s: &DVector<T>) -> DVector<T> {
        let cache = self.cache.as_ref().unwrap();
        DVector::from_fn(y_s.len(), |i, _| {
            cache.e_scale[i] * y_s[i] / cache.c_scale
        })
    }

    fn factorize(
        &self,
        p_s: &DMatrix<T>,
        csr: &Csr<T>,
        rho_vec: &DVector<T>,
    ) -> Result<Cholesky<T, Dyn>> {
        let d = p_s.nrows();
        let mut sigma = self.settings.sigma;
        for attempt in 0..4 {
            if attempt > 0 {
                sigma *= cast::<T>(100.0);
            }
            let mut m = p_s.clone();
            for j in 0..d {
                m[(j, j)] += sigma;
            }
            for i in 0..csr.nrows {
                let r = rho_vec[i];
                let lo = csr.indptr[i];
                let hi = csr.indptr[i + 1];
                for k1 in lo..hi {
                    let (j1, v1) = (csr.indices[k1], csr.values[k1]);
                    let rv1 = r * v1;
                    for k2 in k1..hi {
                        let (j2, v2) = (csr.indices[k2], csr.values[k2]);
                        m[(j1, j2)] += rv1 * v2;
                        if j1 != j2 {
                            m[(j2, j1)] += rv1 * v2;
                        }
                    }
                }
            }
            if let Some(chol) = Cholesky::new(m) {
                return Ok(chol);
            }
        }
        Err(Error::InvalidArgument(
            "KKT matrix could not be factorized (P not positive semidefinite?)".into(),
        ))
    }

    /// Residuals and tolerance thresholds in the original (unscaled)
    /// coordinates, computed from scaled iterates.
    fn residuals_unscaled(
        &self,
        prob: &QpProblem<T>,
        x_s: &DVector<T>,
        z_s: &DVector<T>,
        y_s: &DVector<T>,
        ax_s: &DVector<T>,
    ) -> (T, T, T, T) {
        let cache = self.cache.as_ref().unwrap();
        let n_c = z_s.len();
        let d = x_s.len();
        let zero = T::zero();

        let mut r_prim = zero;
        let mut scale_prim = zero;
        for i in 0..n_c {
            let inv_e = T::one() / cache.e_scale[i];
            r_prim = r_prim.max((ax_s[i] - z_s[i]).abs() * inv_e);
            scale_prim = scale_prim
                .max(ax_s[i].abs() * inv_e)
                .max(z_s[i].abs() * inv_e);
        }

        // P x + q + A' y, recovered componentwise from scaled products.
        let px_s = &cache.p_s * x_s;
        let mut aty_s = DVector::zeros(d);
        cache.csr_s.tr_mul_vec(y_s, &mut aty_s);
        let mut r_dual = zero;
        let mut scale_dual = prob.q.amax();
        for j in 0..d {
            let un = T::one() / (cache.c_scale * cache.d_scale[j]);
            let px = px_s[j] * un;
            let aty = aty_s[j] * un;
            r_dual = r_dual.max((px + prob.q[j] + aty).abs());
            scale_dual = scale_dual.max(px.abs()).max(aty.abs());
        }

        let eps_prim = self.settings.eps_abs + self.settings.eps_rel * scale_prim;
        let eps_dual = self.settings.eps_abs + self.settings.eps_rel * scale_dual;
        (r_prim, r_dual, eps_prim, eps_dual)
    }

    fn primal_infeasibility_certificate(&self, prob: &QpProblem<T>, dy: &DVector<T>) -> bool {
        if dy.is_empty() {
            return false;
        }
        let norm = dy.amax();
        if norm <= T::zero() {
            return false;
        }
        let e = self.settings.eps_pinf * norm;
        let aty = prob.a_con.transpose() * dy;
        if !aty.is_empty() && aty.amax() > e {
            return false;
        }
        // support function of [l, u] in direction dy must be negative
        let mut support = T::zero();
        for i in 0..dy.len() {
            let pos = dy[i].max(T::zero());
            let neg = dy[i].min(T::zero());
            if pos > T::zero() {
                if prob.u[i].is_finite() {
                    support += prob.u[i] * pos;
                } else if pos > e {
                    return false;
                }
            }
            if neg < T::zero() {
                if prob.l[i].is_finite() {
                    support += prob.l[i] * neg;
                } else if -neg > e {
                    return false;
                }
            }
        }
        support <= -e
    }

    /// Residual balancing: retune the penalty from the ratio of normalized
    /// residuals and refactor when it moved far enough to matter.
    fn maybe_adapt_rho(&mut self, r_prim: T, r_dual: T, eps_prim: T, eps_dual: T) -> Result<()> {
        let cache = self.cache.as_ref().unwrap();
        let tiny: T = cast(1e-30);
        // eps thresholds already carry the relative scales
        let np = (r_prim / eps_prim.max(tiny)).max(tiny);
        let nd = (r_dual / eps_dual.max(tiny)).max(tiny);
        let ratio = (np / nd).sqrt();
        let new_rho = (cache.rho_bar * ratio)
            .max(self.settings.rho_min)
            .min(self.settings.rho_max);
        let thresh = self.settings.adaptive_rho_threshold;
        if new_rho > cache.rho_bar * thresh || new_rho * thresh < cache.rho_bar {
            let rho_vec = DVector::from_fn(cache.rho_vec.len(), |i, _| {
                if cache.rho_vec[i] > cache.rho_bar {
                    new_rho * self.settings.rho_eq_scale
                } else {
                    new_rho
                }
            });
            let chol = self.factorize(&cache.p_s, &cache.csr_s, &rho_vec)?;
            let cache = self.cache.as_mut().unwrap();
            cache.rho_bar = new_rho;
            cache.rho_vec = rho_vec;
            cache.chol = chol;
        }
        Ok(())
    }

    /// Active rows suggested by the dual signs at the given threshold.
    fn active_from_dual(&self, prob: &QpProblem<T>, y: &DVector<T>, thresh: T) -> Vec<(usize, T)> {
        let mut active = Vec::new();
        for i in 0..prob.num_constraints() {
            if prob.l[i] == prob.u[i] {
                active.push((i, prob.l[i]));
            } else if y[i] < -thresh && prob.l[i].is_finite() {
                active.push((i, prob.l[i]));
            } else if y[i] > thresh && prob.u[i].is_finite() {
                active.push((i, prob.u[i]));
            }
        }
        active
    }

    /// Polish over a ladder of candidate active sets (dual signs at a few
    /// thresholds, then the projection signature when supplied). Each
    /// candidate is refined by an active-set iteration: the worst violated
    /// row joins the set pinned at the violated side, rows with wrong-signed
    /// multipliers leave. The first point meeting the absolute residual
    /// target on all of stationarity, feasibility and complementarity wins.
    #[allow(clippy::type_complexity)]
    fn polish_verified(
        &self,
        prob: &QpProblem<T>,
        y: &DVector<T>,
        signature_active: Option<&[(usize, T)]>,
        target: T,
    ) -> Result<Option<(DVector<T>, DVector<T>, T, T)>> {
        let y_scale = if y.is_empty() { T::zero() } else { y.amax() };
        let mut candidates: Vec<Vec<(usize, T)>> = Vec::new();
        candidates.push(self.active_from_dual(prob, y, T::zero()));
        if y_scale > T::zero() {
            candidates.push(self.active_from_dual(prob, y, cast::<T>(1e-6) * y_scale));
        }
        if let Some(sig) = signature_active {
            candidates.push(sig.to_vec());
        }
        let mut tried: Vec<Vec<(usize, T)>> = Vec::new();
        for cand in candidates {
            if tried.contains(&cand) {
                continue;
            }
            tried.push(cand.clone());
            let mut active = cand;
            for round in 0..15 {
                let Some((px, py)) = self.polish(prob, &active) else {
                    if std::env::var("QP_DEBUG_POLISH").is_ok() {
                        eprintln!("  polish round {round}: KKT solve failed (k={})", active.len());
                    }
                    break;
                };
                let (pr, dr) = kkt_residuals(prob, &px, &py)?;
                let comp = complementarity_violation(prob, &px, &py);
                if std::env::var("QP_DEBUG_POLISH").is_ok() {
                    eprintln!(
                        "  polish round {round}: k={} pr {:.1e} dr {:.1e} comp {:.1e}",
                        active.len(),
                        pr.to_f64().unwrap(),
                        dr.to_f64().unwrap(),
                        comp.to_f64().unwrap()
                    );
                }
                if pr <= target && dr <= target && comp <= target {
                    return Ok(Some((px, py, pr, dr)));
                }
                if !self.refine_active_set(prob, &px, &py, &mut active, target) {
                    break; // nothing to change; this candidate is stuck
                }
            }
        }
        Ok(None)
    }

    /// One active-set exchange driven by a trial point: drop inequality rows
    /// whose multipliers have the wrong sign, then add the most violated
    /// rows pinned at their violated side. Returns false when no exchange
    /// applies.
    fn refine_active_set(
        &self,
        prob: &QpProblem<T>,
        z: &DVector<T>,
        dual: &DVector<T>,
        active: &mut Vec<(usize, T)>,
        target: T,
    ) -> bool {
        let az = &prob.a_con * z;
        let mut changed = false;
        // wrong-signed multipliers leave (equality rows always stay)
        active.retain(|&(row, bound)| {
            if prob.l[row] == prob.u[row] {
                return true;
            }
            let keep = if bound == prob.u[row] {
                dual[row] >= -target
            } else {
                dual[row] <= target
            };
            changed |= !keep;
            keep
        });
        // most violated rows join, pinned at the violated side
        let mut worst: Option<(usize, T, T)> = None; // (row, bound, violation)
        for i in 0..prob.num_constraints() {
            if active.iter().any(|&(row, _)| row == i) {
                continue;
            }
            if prob.u[i].is_finite() && az[i] - prob.u[i] > target {
                let v = az[i] - prob.u[i];
                if worst.as_ref().is_none_or(|w| v > w.2) {
                    worst = Some((i, prob.u[i], v));
                }
            }
            if prob.l[i].is_finite() && prob.l[i] - az[i] > target {
                let v = prob.l[i] - az[i];
                if worst.as_ref().is_none_or(|w| v > w.2) {
                    worst = Some((i, prob.l[i], v));
                }
            }
        }
        if let Some((row, bound, _)) = worst {
            active.push((row, bound));
            changed = true;
        }
        changed
    }

    /// KKT polish over an explicit active set. Returns the refined
    /// primal/dual pair, or None when the reduced system cannot be solved.
    fn polish(
        &self,
        prob: &QpProblem<T>,
        active: &[(usize, T)],
    ) -> Option<(DVector<T>, DVector<T>)> {
        let d = prob.num_vars();
        let n_c = prob.num_constraints();
        let k = active.len();
        let nk = d + k;
        let delta = self.settings.polish_delta;

        let mut kkt = DMatrix::<T>::zeros(nk, nk);
        kkt.view_mut((0, 0), (d, d)).copy_from(&prob.p);
        for j in 0..d {
            kkt[(j, j)] += delta;
        }
        for (r, (row, _)) in active.iter().enumerate() {
            for j in 0..d {
                let v = prob.a_con[(*row, j)];
                kkt[(d + r, j)] = v;
                kkt[(j, d + r)] = v;
            }
            kkt[(d + r, d + r)] = -delta;
        }
        let mut rhs = DVector::<T>::zeros(nk);
        for j in 0..d {
            rhs[j] = -prob.q[j];
        }
        for (r, (_, b)) in active.iter().enumerate() {
            rhs[d + r] = *b;
        }

        let lu = kkt.clone().lu();
        let mut sol = lu.solve(&rhs)?;
        // Iterative refinement against the unregularized KKT system.
        for _ in 0..self.settings.polish_refine_iters {
            let mut resid = rhs.clone();
            // resid -= K0 * sol  (K0 is kkt without its delta shifts)
            let mut k0 = kkt.clone();
            for j in 0..d {
                k0[(j, j)] -= delta;
            }
            for r in 0..k {
                k0[(d + r, d + r)] += delta;
            }
            resid -= &k0 * &sol;
            let corr = lu.solve(&resid)?;
            sol += corr;
        }

        let zp = sol.rows(0, d).into_owned();
        let mut yp = DVector::<T>::zeros(n_c);
        for (r, (row, _)) in active.iter().enumerate() {
            yp[*row] = sol[d + r];
        }
        Some((zp, yp))
    }
}

fn clamp_into<T: Scalar>(v: &mut DVector<T>, l: &DVector<T>, u: &DVector<T>) {
    for i in 0..v.len() {
        v[i] = v[i].max(l[i]).min(u[i]);
    }
}

/// Ruiz equilibration of the constraint matrix: alternately normalize column
/// and row sup-norms of `E A D` toward one. The constraint blocks here mix
/// dense data rows with unit selector rows and near-duplicate vertex rows,
/// and balancing them is what keeps the splitting iteration well behaved.
/// The quadratic cost is left unnormalized (it is nearly singular by design,
/// so cost feedback would blow the scaling up); accumulated factors are
/// clamped to a safe range.
fn ruiz_equilibration<T: Scalar>(
    p: &DMatrix<T>,
    a: &DMatrix<T>,
) -> (DVector<T>, DVector<T>, T) {
    let d = p.nrows();
    let n_c = a.nrows();
    let mut d_scale = DVector::from_element(d, T::one());
    let mut e_scale = DVector::from_element(n_c, T::one());
    let min_total: T = cast(1e-3);
    let max_total: T = cast(1e3);

    if n_c == 0 {
        return (d_scale, e_scale, T::one());
    }
    for _ in 0..8 {
        for j in 0..d {
            let mut norm = T::zero();
            for i in 0..n_c {
                norm = norm.max((e_scale[i] * a[(i, j)] * d_scale[j]).abs());
            }
            if norm > T::zero() {
                d_scale[j] = (d_scale[j] / norm.sqrt()).max(min_total).min(max_total);
            }
        }
        for i in 0..n_c {
            let mut norm = T::zero();
            for j in 0..d {
                norm = norm.max((e_scale[i] * a[(i, j)] * d_scale[j]).abs());
            }
            if norm > T::zero() {
                e_scale[i] = (e_scale[i] / norm.sqrt()).max(min_total).min(max_total);
            }
        }
    }
    (d_scale, e_scale, T::one())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solve(prob: &QpProblem<f64>) -> QpSolution<f64> {
        AdmmSolver::new(AdmmSettings::default()).solve(prob).unwrap()
    }

    fn box_problem() -> QpProblem<f64> {
        // min (z-2)^2 s.t. -1 <= z <= 1
        QpProblem::new(
            DMatrix::from_element(1, 1, 2.0),
            DVector::from_element(1, -4.0),
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, -1.0),
            DVector::from_element(1, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn clamped_scalar_minimum() {
        let sol = solve(&box_problem());
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.z[0] - 1.0).abs() < 1e-8, "z = {}", sol.z[0]);
    }

    #[test]
    fn symmetric_equality_split() {
        // min z1^2 + z2^2 s.t. z1 + z2 = 1 -> (0.5, 0.5)
        let prob = QpProblem::new(
            DMatrix::from_diagonal(&DVector::from_element(2, 2.0)),
            DVector::zeros(2),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 1.0),
        )
        .unwrap();
        let sol = solve(&prob);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.z[0] - 0.5).abs() < 1e-8);
        assert!((sol.z[1] - 0.5).abs() < 1e-8);
    }

    #[test]
    fn contradictory_bounds_are_infeasible() {
        let prob = QpProblem::new(
            DMatrix::from_element(1, 1, 2.0),
            DVector::zeros(1),
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 0.0),
        )
        .unwrap();
        let sol = solve(&prob);
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    #[test]
    fn disjoint_rows_raise_certificate() {
        // z >= 1 and z <= 0 encoded as separate one-sided rows
        let prob = QpProblem::new(
            DMatrix::from_element(1, 1, 2.0),
            DVector::zeros(1),
            DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
            DVector::from_column_slice(&[1.0, f64::NEG_INFINITY]),
            DVector::from_column_slice(&[f64::INFINITY, 0.0]),
        )
        .unwrap();
        let sol = solve(&prob);
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    #[test]
    fn kkt_residuals_match_definitions() {
        let prob = box_problem();
        let sol = solve(&prob);
        let (pr, dr) = kkt_residuals(&prob, &sol.z, &sol.dual).unwrap();
        assert!(pr <= 1e-6, "primal residual {pr}");
        assert!(dr <= 1e-6, "dual residual {dr}");

        // violating the bound by 0.3 shows up as primal residual >= 0.3
        let bad = DVector::from_element(1, 1.3);
        let (pr, _) = kkt_residuals(&prob, &bad, &DVector::zeros(1)).unwrap();
        assert!(pr >= 0.3 - 1e-12);

        // the zero problem has zero residuals at the origin
        let zero = QpProblem::new(
            DMatrix::zeros(1, 1),
            DVector::zeros(1),
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
            DVector::zeros(0),
        )
        .unwrap();
        let (pr, dr) = kkt_residuals(&zero, &DVector::zeros(1), &DVector::zeros(0)).unwrap();
        assert_eq!((pr, dr), (0.0, 0.0));
    }

    #[test]
    fn rejects_malformed_problems() {
        // asymmetric P
        assert!(QpProblem::<f64>::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]),
            DVector::zeros(2),
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
            DVector::zeros(0),
        )
        .is_err());
        // NaN in q
        assert!(QpProblem::<f64>::new(
            DMatrix::zeros(1, 1),
            DVector::from_element(1, f64::NAN),
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
            DVector::zeros(0),
        )
        .is_err());
        // wrong bound length
        assert!(QpProblem::<f64>::new(
            DMatrix::zeros(1, 1),
            DVector::zeros(1),
            DMatrix::zeros(1, 1),
            DVector::zeros(0),
            DVector::zeros(1),
        )
        .is_err());
    }

    #[test]
    fn factorization_cache_reused_across_q_changes() {
        let mut solver = AdmmSolver::new(AdmmSettings::default());
        let prob = box_problem();
        let s1 = solver.solve(&prob).unwrap();
        // same P and A, different q: cache should still give the right answer
        let prob2 = QpProblem::new(
            prob.p().clone(),
            DVector::from_element(1, 4.0), // min (z+2)^2 -> z = -1
            prob.a_con().clone(),
            prob.l().clone(),
            prob.u().clone(),
        )
        .unwrap();
        let s2 = solver.solve_warm(&prob2, Some(&s1.z), Some(&s1.dual)).unwrap();
        assert!((s2.z[0] + 1.0).abs() < 1e-8, "z = {}", s2.z[0]);
    }

    #[test]
    fn unconstrained_problem_reaches_newton_point() {
        let prob = QpProblem::new(
            DMatrix::from_diagonal(&DVector::from_column_slice(&[2.0, 4.0])),
            DVector::from_column_slice(&[-2.0, -4.0]),
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
            DVector::zeros(0),
        )
        .unwrap();
        let sol = solve(&prob);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.z[0] - 1.0).abs() < 1e-7);
        assert!((sol.z[1] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn matrix_market_dump_has_all_sections() {
        let mut buf = Vec::new();
        box_problem().dump_matrix_market(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        for section in ["P coordinate", "q array", "A coordinate", "l array", "u array"] {
            assert!(text.contains(section), "missing section {section}");
        }
    }
}
