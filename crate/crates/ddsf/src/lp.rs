//! Small dense linear-programming kernel: a two-phase simplex with Bland's
//! rule on the tableau. Internal plumbing for polytope interior checks and
//! for the convex-hull membership / distance programs of the safe set.
//!
//! Solves  min c'x  s.t.  A_ub x <= b_ub,  A_eq x = b_eq,  x >= 0.
//! Problem sizes here are tiny (tens of rows, up to a few hundred columns),
//! so a dense tableau is the right tool.

use nalgebra::{DMatrix, DVector};

use crate::scalar::{cast, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone)]
pub(crate) struct LpResult<T: Scalar> {
    pub status: LpStatus,
    pub x: DVector<T>,
    pub objective: T,
}

fn pivot_tol<T: Scalar>() -> T {
    let floor: T = cast(1e-10);
    let eps_based = T::default_epsilon() * cast(64.0);
    if eps_based > floor {
        eps_based
    } else {
        floor
    }
}

struct Tableau<T: Scalar> {
    rows: usize,
    cols: usize, // structural + slack + artificial
    a: DMatrix<T>,
    rhs: DVector<T>,
    cost: DVector<T>,
    basis: Vec<usize>,
    first_artificial: usize,
    tol: T,
}

impl<T: Scalar> Tableau<T> {
    fn pivot(&mut self, row: usize, col: usize) {
        let piv = self.a[(row, col)];
        for j in 0..self.cols {
            self.a[(row, j)] /= piv;
        }
        self.rhs[row] /= piv;
        for r in 0..self.rows {
            if r == row {
                continue;
            }
            let f = self.a[(r, col)];
            if f != T::zero() {
                for j in 0..self.cols {
                    let v = self.a[(row, j)];
                    self.a[(r, j)] -= f * v;
                }
                let v = self.rhs[row];
                self.rhs[r] -= f * v;
            }
        }
        let f = self.cost[col];
        if f != T::zero() {
            for j in 0..self.cols {
                let v = self.a[(row, j)];
                self.cost[j] -= f * v;
            }
        }
        self.basis[row] = col;
    }

    /// Reduced costs recomputed exactly from the current tableau:
    /// `cost_j = orig_j - sum_r orig_basis[r] * a[r, j]`. Incremental cost
    /// updates drift under long degenerate pivot sequences; this resets them.
    fn rebuild_cost_row(&mut self, orig: &DVector<T>) {
        for j in 0..self.cols {
            let mut cj = orig[j];
            for r in 0..self.rows {
                let ob = orig[self.basis[r]];
                if ob != T::zero() {
                    cj -= ob * self.a[(r, j)];
                }
            }
            self.cost[j] = cj;
        }
        for r in 0..self.rows {
            self.cost[self.basis[r]] = T::zero();
        }
    }

    /// Bland's rule iteration over the allowed column range.
    fn iterate(&mut self, allowed_cols: usize) -> Result<(), LpStatus> {
        loop {
            let mut entering = None;
            for j in 0..allowed_cols {
                if self.cost[j] < -self.tol {
                    entering = Some(j);
                    break;
                }
            }
            let Some(col) = entering else {
                return Ok(());
            };

            // ratio test; ties go to the largest pivot for stability
            let mut leaving: Option<(usize, T, T)> = None; // (row, ratio, |pivot|)
            for r in 0..self.rows {
                let a = self.a[(r, col)];
                if a > self.tol {
                    let ratio = self.rhs[r] / a;
                    let better = match &leaving {
                        None => true,
                        Some((_, lratio, lpiv)) => {
                            let window = self.tol * (T::one() + lratio.abs());
                            ratio < *lratio - window
                                || (ratio < *lratio + window && a > *lpiv)
                        }
                    };
                    if better {
                        leaving = Some((r, ratio, a));
                    }
                }
            }
            match leaving {
                Some((row, _, _)) => self.pivot(row, col),
                None => return Err(LpStatus::Unbounded),
            }
        }
    }

    /// Iterate to optimality, re-verifying against exactly rebuilt reduced
    /// costs before accepting termination.
    fn iterate_verified(&mut self, orig: &DVector<T>, allowed_cols: usize) -> Result<(), LpStatus> {
        self.rebuild_cost_row(orig);
        for _ in 0..4 {
            self.iterate(allowed_cols)?;
            self.rebuild_cost_row(orig);
            if (0..allowed_cols).all(|j| self.cost[j] >= -self.tol) {
                return Ok(());
            }
        }
        Ok(())
    }
}

/// Two-phase simplex with a degeneracy fallback: when an attempt ends in a
/// numerically inconsistent state (phase-1 unbounded or spurious
/// infeasibility), retry with the inequality right-hand sides relaxed
/// outward by a tiny amount. The perturbation loosens the feasible set, so
/// objective error is bounded by the jitter size (well below every
/// tolerance built on these programs).
pub(crate) fn solve_lp<T: Scalar>(
    c: &DVector<T>,
    a_ub: &DMatrix<T>,
    b_ub: &DVector<T>,
    a_eq: &DMatrix<T>,
    b_eq: &DVector<T>,
) -> LpResult<T> {
    let mut result = solve_lp_attempt(c, a_ub, b_ub, a_eq, b_eq);
    if result.status == LpStatus::Optimal || a_ub.nrows() == 0 {
        return result;
    }
    for jitter in [1e-11, 1e-9] {
        let delta: T = cast(jitter);
        let b_relaxed =
            DVector::from_fn(b_ub.len(), |i, _| b_ub[i] + delta * (T::one() + b_ub[i].abs()));
        result = solve_lp_attempt(c, a_ub, &b_relaxed, a_eq, b_eq);
        if result.status == LpStatus::Optimal {
            return result;
        }
    }
    result
}

fn solve_lp_attempt<T: Scalar>(
    c: &DVector<T>,
    a_ub: &DMatrix<T>,
    b_ub: &DVector<T>,
    a_eq: &DMatrix<T>,
    b_eq: &DVector<T>,
) -> LpResult<T> {
    let n = c.len();
    debug_assert_eq!(a_ub.ncols(), if a_ub.nrows() > 0 { n } else { a_ub.ncols() });
    debug_assert_eq!(a_ub.nrows(), b_ub.len());
    debug_assert_eq!(a_eq.nrows(), b_eq.len());

    let m_ub = a_ub.nrows();
    let m_eq = a_eq.nrows();
    let rows = m_ub + m_eq;
    let tol = pivot_tol::<T>();

    if rows == 0 {
        // Only the sign constraints x >= 0: bounded iff c >= 0, optimum at 0.
        let status = if c.iter().any(|&v| v < -tol) {
            LpStatus::Unbounded
        } else {
            LpStatus::Optimal
        };
        return LpResult {
            status,
            x: DVector::zeros(n),
            objective: T::zero(),
        };
    }

    // Which rows need an artificial variable: equalities always, inequality
    // rows only when their right-hand side is negative (slack flips sign).
    let needs_artificial: Vec<bool> = (0..rows)
        .map(|r| {
            if r < m_ub {
                b_ub[r] < T::zero()
            } else {
                true
            }
        })
        .collect();
    let n_art = needs_artificial.iter().filter(|&&b| b).count();
    let cols = n + m_ub + n_art;

    let mut a = DMatrix::<T>::zeros(rows, cols);
    let mut rhs = DVector::<T>::zeros(rows);
    let mut basis = vec![0usize; rows];
    let mut art_idx = n + m_ub;
    let mut phase1_cost = DVector::<T>::zeros(cols);
    let mut phase1_obj = T::zero();

    for r in 0..rows {
        let (row_src, b_val) = if r < m_ub {
            (a_ub.row(r), b_ub[r])
        } else {
            (a_eq.row(r - m_ub), b_eq[r - m_ub])
        };
        let flip = b_val < T::zero();
        let s = if flip { -T::one() } else { T::one() };
        for j in 0..n {
            a[(r, j)] = s * row_src[j];
        }
        if r < m_ub {
            a[(r, n + r)] = s; // slack (or surplus when flipped)
        }
        rhs[r] = s * b_val;

        if needs_artificial[r] {
            a[(r, art_idx)] = T::one();
            basis[r] = art_idx;
            phase1_obj += rhs[r];
            art_idx += 1;
        } else {
            basis[r] = n + r; // the slack starts basic
        }
    }

    let mut t = Tableau {
        rows,
        cols,
        a,
        rhs,
        cost: phase1_cost,
        basis,
        first_artificial: n + m_ub,
        tol,
    };

    if n_art > 0 {
        let mut orig1 = DVector::<T>::zeros(t.cols);
        for j in t.first_artificial..t.cols {
            orig1[j] = T::one();
        }
        if t.iterate_verified(&orig1, t.cols).is_err() {
            // Phase 1 is bounded below by zero; an unbounded signal here is
            // a numerical artefact, treat as infeasible.
            return LpResult {
                status: LpStatus::Infeasible,
                x: DVector::zeros(n),
                objective: T::zero(),
            };
        }
        // Artificial mass left in the basis, summed directly (the running
        // objective estimate drifts under degenerate pivoting).
        let mut art_left = T::zero();
        for r in 0..t.rows {
            if t.basis[r] >= t.first_artificial {
                art_left += t.rhs[r].max(T::zero());
            }
        }
        if std::env::var("LP_DEBUG").is_ok() {
            eprintln!("phase1 end: art_left={:e}", art_left.to_f64().unwrap());
        }
        if art_left > cast::<T>(1e-7) * (T::one() + phase1_obj.abs()) {
            return LpResult {
                status: LpStatus::Infeasible,
                x: DVector::zeros(n),
                objective: T::zero(),
            };
        }
        // Drive leftover artificials out of the basis where possible. Rows
        // that cannot pivot are identically zero over the real columns and
        // stay inert for phase 2.
        for r in 0..t.rows {
            if t.basis[r] >= t.first_artificial {
                let col = (0..t.first_artificial).find(|&j| t.a[(r, j)].abs() > t.tol);
                if let Some(col) = col {
                    t.pivot(r, col);
                }
            }
        }
    }

    // Phase 2 with the real objective; artificials may not re-enter.
    let mut orig2 = DVector::<T>::zeros(t.cols);
    for j in 0..n {
        orig2[j] = c[j];
    }
    let allowed = t.first_artificial;
    if t.iterate_verified(&orig2, allowed).is_err() {
        return LpResult {
            status: LpStatus::Unbounded,
            x: DVector::zeros(n),
            objective: T::zero(),
        };
    }

    let mut x = DVector::<T>::zeros(n);
    for r in 0..t.rows {
        if t.basis[r] < n {
            x[t.basis[r]] = t.rhs[r];
        }
    }
    let objective = c.dot(&x);
    LpResult {
        status: LpStatus::Optimal,
        x,
        objective,
    }
}


#[cfg(test)]
mod hull_instance_tests {
    use super::*;

    #[test]
    fn hull_distance_instance_from_closed_loop() {
        let verts: Vec<Vec<f64>> = vec![
            vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.1045284632227246, 0.0, 0.0, 0.0],
            vec![0.0, 0.1045284632227246, 0.2079116907680631, 0.0, 0.0, 0.0],
            vec![0.1045284632227246, 0.2079116907680631, 0.309016994132535, 0.0, 0.0, 0.0],
            vec![0.2079116907680631, 0.309016994132535, 0.36573426356386873, 0.0, 0.0, -0.001045284632227246],
            vec![0.309016994132535, 0.36573426356386873, -0.3290638013432479, 0.0, -0.001045284632227246, -0.004169686172135124],
            vec![0.36573426356386873, -0.3290638013432479, -0.21937587018562066, -0.001045284632227246, -0.004169686172135124, -0.01038425765336835],
            vec![-0.3290638013432479, -0.21937587018562066, -0.14625058002612565, -0.004169686172135124, -0.01038425765336835, -0.020256171770240264],
        ];
        let xi = [
            -0.21937587018562066, -0.14625058002612565, -0.09750038662892502,
            -0.01038425765336835, -0.020256171770240264, -0.0268374478736797,
        ];
        let dim = 6;
        let nv = verts.len();
        let nvars = nv + 1;
        let mut c = DVector::<f64>::zeros(nvars);
        c[nv] = 1.0;
        let mut a_ub = DMatrix::<f64>::zeros(2 * dim, nvars);
        let mut b_ub = DVector::<f64>::zeros(2 * dim);
        for (k, v) in verts.iter().enumerate() {
            for r in 0..dim {
                a_ub[(r, k)] = v[r];
                a_ub[(dim + r, k)] = -v[r];
            }
        }
        for r in 0..dim {
            a_ub[(r, nv)] = -1.0;
            a_ub[(dim + r, nv)] = -1.0;
            b_ub[r] = xi[r];
            b_ub[dim + r] = -xi[r];
        }
        let mut a_eq = DMatrix::<f64>::zeros(1, nvars);
        for k in 0..nv {
            a_eq[(0, k)] = 1.0;
        }
        let b_eq = DVector::from_element(1, 1.0);
        let res = solve_lp(&c, &a_ub, &b_ub, &a_eq, &b_eq);
        println!("status {:?} objective {}", res.status, res.objective);
        assert_eq!(res.status, LpStatus::Optimal);
        assert!(res.objective <= 0.10968793115762726 + 1e-9);
    }
}
