//! The safety-filter core: assembles the receding-horizon QP from the Hankel
//! pair, the measured history window, the constraint sets and the sampled
//! terminal safe set; returns the minimally modified safe input together with
//! its backup trajectory; and runs the online / offline set-expansion loops.
//!
//! The QP decision vector is `z = [alpha; u_window; y_window; beta]`:
//! - `alpha` are the combination weights over the Hankel columns (the
//!   implicit model: `[Hu; Hy] alpha = [u_window; y_window]`),
//! - the windows span the `T_ini` history steps, the `N` constrained
//!   prediction steps, and a further `T_ini`-step terminal tail (total
//!   window depth `N + 2 T_ini`, which is also the excitation order the
//!   data must support). The history blocks are pinned to the measured
//!   samples,
//! - `beta` are hull weights tying the terminal extended state -- the
//!   trailing `T_ini` window of the prediction -- to the safe set:
//!   `V beta = xi_terminal`, `sum beta = 1`, `beta >= 0`,
//! - per-step constraint rows bound the first `N` predicted inputs and
//!   outputs; the tail needs no rows of its own because it is pinned into
//!   the hull of states that satisfy the constraints block-wise.
//!
//! Placing the terminal window past the constrained steps is what makes the
//! set expansion non-degenerate: if the terminal window overlapped the last
//! constrained steps, an input-delayed plant started at the equilibrium
//! would admit only the all-zero plan and the safe set could never grow.
//!
//! The cost is `(u_0 - u_learning)' R (u_0 - u_learning)` plus a small
//! `eps_reg ||alpha||^2` regularizer that makes the problem strictly convex
//! for the solver without moving the filtered input at the tolerances of
//! interest.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datamat::{
    build_hankel, validate_assumptions, ExtendedState, HankelPair, Trajectory,
};
use crate::error::{Error, Result};
use crate::plant::DelayedLtiPlant;
use crate::qpcore::{AdmmSettings, AdmmSolver, QpProblem, QpSolution, QpStatus};
use crate::safeset::SampledSafeSet;
use crate::scalar::{cast, Scalar};

/// Filter parameters. `horizon` must exceed `t_ini`, the input-cost weight
/// must be symmetric positive definite.
#[derive(Debug, Clone)]
pub struct FilterConfig<T: Scalar = f64> {
    pub horizon: usize,
    pub t_ini: usize,
    pub r: DMatrix<T>,
    pub eps_reg: T,
    pub feas_tol: T,
    pub novelty_tol: T,
    pub n_bar: usize,
}

impl<T: Scalar> FilterConfig<T> {
    pub fn new(
        horizon: usize,
        t_ini: usize,
        r: DMatrix<T>,
        eps_reg: T,
        feas_tol: T,
        novelty_tol: T,
        n_bar: usize,
    ) -> Result<Self> {
        if horizon <= t_ini {
            return Err(Error::InvalidArgument(format!(
                "prediction horizon ({horizon}) must exceed the history depth ({t_ini})"
            )));
        }
        if t_ini == 0 {
            return Err(Error::InvalidArgument("t_ini must be >= 1".into()));
        }
        if r.nrows() != r.ncols() || r.nrows() == 0 {
            return Err(Error::InvalidArgument(
                "input cost weight R must be square and non-empty".into(),
            ));
        }
        let sym_tol: T = cast(1e-12);
        for i in 0..r.nrows() {
            for j in i + 1..r.ncols() {
                if (r[(i, j)] - r[(j, i)]).abs() > sym_tol {
                    return Err(Error::InvalidArgument("R must be symmetric".into()));
                }
            }
        }
        if nalgebra::Cholesky::new(r.clone()).is_none() {
            return Err(Error::InvalidArgument(
                "R must be positive definite".into(),
            ));
        }
        if eps_reg <= T::zero() || feas_tol <= T::zero() || novelty_tol <= T::zero() {
            return Err(Error::InvalidArgument(
                "tolerances must be strictly positive".into(),
            ));
        }
        Ok(Self {
            horizon,
            t_ini,
            r,
            eps_reg,
            feas_tol,
            novelty_tol,
            n_bar,
        })
    }

    /// Identity input cost and the project-wide default tolerances.
    pub fn with_identity_cost(horizon: usize, t_ini: usize, m: usize) -> Result<Self> {
        Self::new(
            horizon,
            t_ini,
            DMatrix::identity(m, m),
            cast(1e-8),
            cast(crate::consets::FEAS_TOL),
            cast(crate::safeset::NOVELTY_TOL),
            4,
        )
    }

    /// Hankel window depth consumed by the trajectory parameterization:
    /// history, constrained horizon, and the terminal tail.
    pub fn window_len(&self) -> usize {
        self.horizon + 2 * self.t_ini
    }

    /// Number of predicted steps (constrained horizon plus terminal tail).
    pub fn prediction_len(&self) -> usize {
        self.horizon + self.t_ini
    }
}

/// Mutable filter state: the implicit model, the rolling measurement window,
/// the terminal safe set, and the solver workspace (whose cached
/// factorization and previous solution provide warm starts).
pub struct FilterState<T: Scalar = f64> {
    hankel: HankelPair<T>,
    history: VecDeque<(DVector<T>, DVector<T>)>,
    safe_set: SampledSafeSet<T>,
    last_solution: Option<QpSolution<T>>,
    solver: AdmmSolver<T>,
}

impl<T: Scalar> FilterState<T> {
    /// Validate the data assumptions, build the Hankel pair and set up the
    /// state. `initial_history` must hold exactly `t_ini` (input, output)
    /// pairs, oldest first.
    pub fn new(
        traj: &Trajectory<T>,
        cfg: &FilterConfig<T>,
        safe_set: SampledSafeSet<T>,
        initial_history: Vec<(DVector<T>, DVector<T>)>,
    ) -> Result<Self> {
        let report = validate_assumptions(traj, cfg.horizon, cfg.t_ini, cfg.n_bar);
        if !report.all_passed() {
            return Err(Error::ValidationFailed(report.to_string()));
        }
        if safe_set.t_ini() != cfg.t_ini
            || safe_set.input_dim() != traj.input_dim()
            || safe_set.output_dim() != traj.output_dim()
        {
            return Err(Error::InvalidArgument(
                "safe set shape does not match the data / config".into(),
            ));
        }
        if cfg.r.nrows() != traj.input_dim() {
            return Err(Error::DimMismatch {
                context: "input cost weight R",
                expected: traj.input_dim(),
                got: cfg.r.nrows(),
            });
        }
        if initial_history.len() != cfg.t_ini {
            return Err(Error::DimMismatch {
                context: "initial history length",
                expected: cfg.t_ini,
                got: initial_history.len(),
            });
        }
        for (u, y) in &initial_history {
            if u.len() != traj.input_dim() || y.len() != traj.output_dim() {
                return Err(Error::InvalidArgument(
                    "initial history sample has wrong dimensions".into(),
                ));
            }
        }
        let hankel = build_hankel(traj, cfg.window_len())?;
        Ok(Self {
            hankel,
            history: initial_history.into_iter().collect(),
            safe_set,
            last_solution: None,
            solver: AdmmSolver::new(AdmmSettings::default()),
        })
    }

    /// Start at an equilibrium: the history window holds `t_ini` copies of
    /// the equilibrium pair.
    pub fn from_equilibrium(
        traj: &Trajectory<T>,
        cfg: &FilterConfig<T>,
        safe_set: SampledSafeSet<T>,
        u_s: &DVector<T>,
        y_s: &DVector<T>,
    ) -> Result<Self> {
        let history = vec![(u_s.clone(), y_s.clone()); cfg.t_ini];
        Self::new(traj, cfg, safe_set, history)
    }

    pub fn hankel(&self) -> &HankelPair<T> {
        &self.hankel
    }

    pub fn safe_set(&self) -> &SampledSafeSet<T> {
        &self.safe_set
    }

    pub fn safe_set_mut(&mut self) -> &mut SampledSafeSet<T> {
        &mut self.safe_set
    }

    pub fn history(&self) -> impl Iterator<Item = &(DVector<T>, DVector<T>)> {
        self.history.iter()
    }

    /// Roll the measurement window by one sample.
    pub fn push_measurement(&mut self, u: DVector<T>, y: DVector<T>) {
        self.history.pop_front();
        self.history.push_back((u, y));
    }

    /// The extended state of the current history window.
    pub fn current_extended_state(&self) -> ExtendedState<T> {
        let u_win: Vec<DVector<T>> = self.history.iter().map(|(u, _)| u.clone()).collect();
        let y_win: Vec<DVector<T>> = self.history.iter().map(|(_, y)| y.clone()).collect();
        ExtendedState::from_window(&u_win, &y_win).expect("history window is well-formed")
    }

    pub fn last_solution(&self) -> Option<&QpSolution<T>> {
        self.last_solution.as_ref()
    }
}

/// Column/row layout of the assembled QP.
#[derive(Debug, Clone, Copy)]
pub(crate) struct QpLayout {
    pub m: usize,
    pub p: usize,
    pub t_ini: usize,
    pub horizon: usize,
    /// predicted steps: horizon + t_ini (terminal tail included)
    pub pred_steps: usize,
    pub window: usize,
    pub n_alpha: usize,
    pub n_v: usize,
    pub off_u: usize,
    pub off_y: usize,
    pub off_beta: usize,
    pub dim: usize,
    /// rows before the trailing beta >= 0 identity block
    pub rows_before_beta: usize,
    pub rows: usize,
}

impl QpLayout {
    fn u_block(&self, window_idx: usize) -> usize {
        self.off_u + window_idx * self.m
    }

    fn y_block(&self, window_idx: usize) -> usize {
        self.off_y + window_idx * self.p
    }

    /// Window index of prediction step k (k = 0 is the first future step).
    fn prediction_idx(&self, k: usize) -> usize {
        self.t_ini + k
    }
}

/// Assemble the safety-filter QP for the current state and learning input.
pub fn assemble_qp<T: Scalar>(
    state: &FilterState<T>,
    cfg: &FilterConfig<T>,
    u_learning: &DVector<T>,
) -> Result<QpProblem<T>> {
    let history: Vec<(DVector<T>, DVector<T>)> = state.history.iter().cloned().collect();
    build_qp(&state.hankel, &history, &state.safe_set, cfg, u_learning).map(|(p, _)| p)
}

pub(crate) fn build_qp<T: Scalar>(
    hankel: &HankelPair<T>,
    history: &[(DVector<T>, DVector<T>)],
    safe_set: &SampledSafeSet<T>,
    cfg: &FilterConfig<T>,
    u_learning: &DVector<T>,
) -> Result<(QpProblem<T>, QpLayout)> {
    let m = hankel.input_dim();
    let p = hankel.output_dim();
    let window = cfg.window_len();
    if hankel.depth() != window {
        return Err(Error::DimMismatch {
            context: "hankel depth vs config window",
            expected: window,
            got: hankel.depth(),
        });
    }
    if history.len() != cfg.t_ini {
        return Err(Error::DimMismatch {
            context: "history window",
            expected: cfg.t_ini,
            got: history.len(),
        });
    }
    if u_learning.len() != m {
        return Err(Error::DimMismatch {
            context: "learning input",
            expected: m,
            got: u_learning.len(),
        });
    }
    if safe_set.t_ini() != cfg.t_ini || safe_set.input_dim() != m || safe_set.output_dim() != p {
        return Err(Error::InvalidArgument(
            "safe set shape does not match the problem".into(),
        ));
    }

    let n_alpha = hankel.num_columns();
    let n_v = safe_set.len();
    let off_u = n_alpha;
    let off_y = off_u + m * window;
    let off_beta = off_y + p * window;
    let dim = off_beta + n_v;

    let u_set = safe_set.u_set();
    let y_set = safe_set.y_set();
    let rows_hankel = (m + p) * window;
    let rows_history = (m + p) * cfg.t_ini;
    let rows_terminal = (m + p) * cfg.t_ini + 1;
    let rows_box = cfg.horizon * (u_set.num_rows() + y_set.num_rows());
    let rows_before_beta = rows_hankel + rows_history + rows_terminal + rows_box;
    let rows = rows_before_beta + n_v;

    let layout = QpLayout {
        m,
        p,
        t_ini: cfg.t_ini,
        horizon: cfg.horizon,
        pred_steps: cfg.prediction_len(),
        window,
        n_alpha,
        n_v,
        off_u,
        off_y,
        off_beta,
        dim,
        rows_before_beta,
        rows,
    };

    let inf = T::infinity();
    let mut a = DMatrix::<T>::zeros(rows, dim);
    let mut l = DVector::<T>::zeros(rows);
    let mut u = DVector::<T>::zeros(rows);
    let mut row = 0;

    // (implicit model) [Hu; Hy] alpha = [u_window; y_window]
    let hu = hankel.hu();
    for i in 0..m * window {
        for j in 0..n_alpha {
            a[(row, j)] = hu[(i, j)];
        }
        a[(row, off_u + i)] = -T::one();
        row += 1;
    }
    let hy = hankel.hy();
    for i in 0..p * window {
        for j in 0..n_alpha {
            a[(row, j)] = hy[(i, j)];
        }
        a[(row, off_y + i)] = -T::one();
        row += 1;
    }

    // (initial condition) history blocks pinned to the measurements
    for (k, (u_meas, _)) in history.iter().enumerate() {
        for c in 0..m {
            a[(row, layout.u_block(k) + c)] = T::one();
            l[row] = u_meas[c];
            u[row] = u_meas[c];
            row += 1;
        }
    }
    for (k, (_, y_meas)) in history.iter().enumerate() {
        for c in 0..p {
            a[(row, layout.y_block(k) + c)] = T::one();
            l[row] = y_meas[c];
            u[row] = y_meas[c];
            row += 1;
        }
    }

    // (terminal set) V beta = xi_terminal over the trailing t_ini window,
    // plus sum beta = 1
    let verts = safe_set.vertices();
    for k in 0..cfg.t_ini {
        let wi = layout.prediction_idx(layout.pred_steps - cfg.t_ini + k);
        for c in 0..m {
            a[(row, layout.u_block(wi) + c)] = -T::one();
            for (j, v) in verts.iter().enumerate() {
                a[(row, off_beta + j)] = v[k * m + c];
            }
            row += 1;
        }
    }
    for k in 0..cfg.t_ini {
        let wi = layout.prediction_idx(layout.pred_steps - cfg.t_ini + k);
        for c in 0..p {
            a[(row, layout.y_block(wi) + c)] = -T::one();
            for (j, v) in verts.iter().enumerate() {
                a[(row, off_beta + j)] = v[cfg.t_ini * m + k * p + c];
            }
            row += 1;
        }
    }
    for j in 0..n_v {
        a[(row, off_beta + j)] = T::one();
    }
    l[row] = T::one();
    u[row] = T::one();
    row += 1;

    // (per-step constraints) on every predicted input and output
    for k in 0..cfg.horizon {
        let wi = layout.prediction_idx(k);
        for r in 0..u_set.num_rows() {
            for c in 0..m {
                a[(row, layout.u_block(wi) + c)] = u_set.a_mat()[(r, c)];
            }
            l[row] = -inf;
            u[row] = u_set.b()[r];
            row += 1;
        }
        for r in 0..y_set.num_rows() {
            for c in 0..p {
                a[(row, layout.y_block(wi) + c)] = y_set.a_mat()[(r, c)];
            }
            l[row] = -inf;
            u[row] = y_set.b()[r];
            row += 1;
        }
    }

    // (hull weights) beta >= 0
    for j in 0..n_v {
        a[(row, off_beta + j)] = T::one();
        l[row] = T::zero();
        u[row] = inf;
        row += 1;
    }
    debug_assert_eq!(row, rows);

    // Cost: (u_0 - u_learning)' R (u_0 - u_learning) + eps_reg ||alpha||^2,
    // in 1/2 z'Pz + q'z form (the constant term is dropped).
    let two: T = cast(2.0);
    let mut pmat = DMatrix::<T>::zeros(dim, dim);
    for j in 0..n_alpha {
        pmat[(j, j)] = two * cfg.eps_reg;
    }
    let u0 = layout.u_block(layout.prediction_idx(0));
    for i in 0..m {
        for j in 0..m {
            pmat[(u0 + i, u0 + j)] = two * cfg.r[(i, j)];
        }
    }
    let mut q = DVector::<T>::zeros(dim);
    let ru = &cfg.r * u_learning;
    for i in 0..m {
        q[u0 + i] = -two * ru[i];
    }

    Ok((QpProblem::new(pmat, q, a, l, u)?, layout))
}

/// The certified trajectory produced by one filter solve: the N constrained
/// steps followed by the T_ini-step terminal tail that lands in the safe
/// set. Every step satisfies the constraint sets.
#[derive(Debug, Clone)]
pub struct BackupTrajectory<T: Scalar = f64> {
    pub u_bar: Vec<DVector<T>>,
    pub y_bar: Vec<DVector<T>>,
    pub alpha: DVector<T>,
    pub beta: DVector<T>,
    pub objective: T,
}

impl<T: Scalar> BackupTrajectory<T> {
    /// Extended state after the final predicted step (the point constrained
    /// to lie in the terminal safe set).
    pub fn terminal_extended_state(&self, t_ini: usize) -> ExtendedState<T> {
        let n = self.u_bar.len();
        ExtendedState::from_window(&self.u_bar[n - t_ini..], &self.y_bar[n - t_ini..])
            .expect("backup windows are well-formed")
    }
}

fn extract_backup<T: Scalar>(
    sol: &QpSolution<T>,
    layout: &QpLayout,
    cfg: &FilterConfig<T>,
    u_learning: &DVector<T>,
) -> BackupTrajectory<T> {
    let z = &sol.z;
    let u_bar: Vec<DVector<T>> = (0..layout.pred_steps)
        .map(|k| {
            z.rows(layout.u_block(layout.prediction_idx(k)), layout.m)
                .into_owned()
        })
        .collect();
    let y_bar: Vec<DVector<T>> = (0..layout.pred_steps)
        .map(|k| {
            z.rows(layout.y_block(layout.prediction_idx(k)), layout.p)
                .into_owned()
        })
        .collect();
    let alpha = z.rows(0, layout.n_alpha).into_owned();
    let beta = z.rows(layout.off_beta, layout.n_v).into_owned();
    let du = &u_bar[0] - u_learning;
    let objective = (du.transpose() * &cfg.r * &du)[(0, 0)] + cfg.eps_reg * alpha.norm_squared();
    BackupTrajectory {
        u_bar,
        y_bar,
        alpha,
        beta,
        objective,
    }
}

fn validate_backup<T: Scalar>(
    backup: &BackupTrajectory<T>,
    safe_set: &SampledSafeSet<T>,
    cfg: &FilterConfig<T>,
) -> Result<()> {
    let tol = cfg.feas_tol;
    for (k, ub) in backup.u_bar.iter().enumerate() {
        if !safe_set.u_set().contains_with_tol(ub, tol)? {
            return Err(Error::ConstraintViolation(format!(
                "backup input at step {k} violates the input set"
            )));
        }
    }
    for (k, yb) in backup.y_bar.iter().enumerate() {
        if !safe_set.y_set().contains_with_tol(yb, tol)? {
            return Err(Error::ConstraintViolation(format!(
                "backup output at step {k} violates the output set"
            )));
        }
    }
    let xi_term = backup.terminal_extended_state(cfg.t_ini);
    if !safe_set.contains(&xi_term, tol)? {
        return Err(Error::ConstraintViolation(
            "backup terminal extended state lies outside the safe set".into(),
        ));
    }
    let mut sum = T::zero();
    for &b in backup.beta.iter() {
        if b < -tol {
            return Err(Error::ConstraintViolation(
                "hull weights must be nonnegative".into(),
            ));
        }
        sum += b;
    }
    if (sum - T::one()).abs() > tol {
        return Err(Error::ConstraintViolation(
            "hull weights must sum to one".into(),
        ));
    }
    Ok(())
}

/// Solve to a residual quality well below the feasibility tolerance the
/// backup checks use; when the first pass lands short (polish did not take),
/// re-run with tighter solver tolerances warm-started from it.
fn solve_to_quality<T: Scalar>(
    solver: &mut AdmmSolver<T>,
    prob: &QpProblem<T>,
    z0: Option<&DVector<T>>,
    y0: Option<&DVector<T>>,
    target: T,
    context: &str,
) -> Result<QpSolution<T>> {
    let mut sol = solver.solve_warm(prob, z0, y0)?;
    match sol.status {
        QpStatus::Optimal => {}
        QpStatus::Infeasible => return Err(Error::Infeasible(context.to_string())),
        QpStatus::MaxIter => {
            return Err(Error::SolverStalled {
                iterations: sol.iterations,
                context: context.to_string(),
            })
        }
    }
    if sol.primal_residual.max(sol.dual_residual) > target {
        let tighter = solver.resolve_tighter(prob, &sol, target)?;
        if tighter.status == QpStatus::Optimal
            && tighter
                .primal_residual
                .max(tighter.dual_residual)
                < sol.primal_residual.max(sol.dual_residual)
        {
            sol = tighter;
        }
    }
    Ok(sol)
}

/// Map the previous solution onto the new layout as a warm start: the
/// combination weights shift one column forward, the windows shift one block
/// back, and the hull weights are renormalized (padded with zeros for
/// vertices inserted since).
fn warm_start_from<T: Scalar>(
    prev: &QpSolution<T>,
    prev_layout: &QpLayout,
    layout: &QpLayout,
) -> (Option<DVector<T>>, Option<DVector<T>>) {
    if prev_layout.n_alpha != layout.n_alpha
        || prev_layout.window != layout.window
        || prev_layout.n_v > layout.n_v
    {
        return (None, None);
    }
    let mut z0 = DVector::<T>::zeros(layout.dim);
    for j in 1..layout.n_alpha {
        z0[j] = prev.z[j - 1];
    }
    for b in 0..layout.window {
        let src = (b + 1).min(layout.window - 1);
        for c in 0..layout.m {
            z0[layout.u_block(b) + c] = prev.z[prev_layout.u_block(src) + c];
        }
        for c in 0..layout.p {
            z0[layout.y_block(b) + c] = prev.z[prev_layout.y_block(src) + c];
        }
    }
    let mut sum = T::zero();
    for j in 0..prev_layout.n_v {
        let b = prev.z[prev_layout.off_beta + j].max(T::zero());
        z0[layout.off_beta + j] = b;
        sum += b;
    }
    if sum > cast(1e-12) {
        for j in 0..layout.n_v {
            z0[layout.off_beta + j] /= sum;
        }
    } else {
        let uniform = T::one() / cast(layout.n_v as f64);
        for j in 0..layout.n_v {
            z0[layout.off_beta + j] = uniform;
        }
    }

    // Dual warm start: shared row prefix, per-vertex rows aligned by index.
    let mut y0 = DVector::<T>::zeros(layout.rows);
    for r in 0..prev_layout.rows_before_beta.min(layout.rows_before_beta) {
        y0[r] = prev.dual[r];
    }
    for j in 0..prev_layout.n_v {
        y0[layout.rows_before_beta + j] = prev.dual[prev_layout.rows_before_beta + j];
    }
    (Some(z0), Some(y0))
}

/// One filter evaluation: the nearest safe input to `u_learning` plus the
/// backup trajectory certifying it.
pub fn filter_input<T: Scalar>(
    state: &mut FilterState<T>,
    cfg: &FilterConfig<T>,
    u_learning: &DVector<T>,
) -> Result<(DVector<T>, BackupTrajectory<T>)> {
    let history: Vec<(DVector<T>, DVector<T>)> = state.history.iter().cloned().collect();
    let (prob, layout) = build_qp(&state.hankel, &history, &state.safe_set, cfg, u_learning)?;

    let (z0, y0) = match (&state.last_solution, state.last_layout()) {
        (Some(prev), Some(prev_layout)) => warm_start_from(prev, &prev_layout, &layout),
        _ => (None, None),
    };

    let quality = cfg.feas_tol * cast::<T>(0.01);
    let sol = solve_to_quality(
        &mut state.solver,
        &prob,
        z0.as_ref(),
        y0.as_ref(),
        quality,
        "safety filter QP",
    )?;
    let backup = extract_backup(&sol, &layout, cfg, u_learning);
    validate_backup(&backup, &state.safe_set, cfg)?;
    let u_safe = backup.u_bar[0].clone();
    state.last_solution = Some(sol);
    Ok((u_safe, backup))
}

impl<T: Scalar> FilterState<T> {
    /// Layout of the last solved QP, reconstructed from stored dimensions.
    fn last_layout(&self) -> Option<QpLayout> {
        let sol = self.last_solution.as_ref()?;
        let m = self.hankel.input_dim();
        let p = self.hankel.output_dim();
        let window = self.hankel.depth();
        let n_alpha = self.hankel.num_columns();
        let off_u = n_alpha;
        let off_y = off_u + m * window;
        let off_beta = off_y + p * window;
        if sol.z.len() < off_beta {
            return None;
        }
        let n_v = sol.z.len() - off_beta;
        let t_ini = self.safe_set.t_ini();
        let horizon = window - 2 * t_ini;
        let rows = sol.dual.len();
        let rows_before_beta = rows - n_v;
        Some(QpLayout {
            m,
            p,
            t_ini,
            horizon,
            pred_steps: horizon + t_ini,
            window,
            n_alpha,
            n_v,
            off_u,
            off_y,
            off_beta,
            dim: sol.z.len(),
            rows_before_beta,
            rows,
        })
    }
}

/// Feasibility probe: is the unmodified learning input itself certifiable?
/// Builds the same QP with the first predicted input pinned to `u_learning`
/// and asks only for feasibility.
pub fn certify_input<T: Scalar>(
    state: &FilterState<T>,
    cfg: &FilterConfig<T>,
    u_learning: &DVector<T>,
) -> Result<bool> {
    let history: Vec<(DVector<T>, DVector<T>)> = state.history.iter().cloned().collect();
    let (prob, layout) = build_qp(&state.hankel, &history, &state.safe_set, cfg, u_learning)?;

    let extra = layout.m;
    let rows = layout.rows + extra;
    let mut a = DMatrix::<T>::zeros(rows, layout.dim);
    a.view_mut((0, 0), (layout.rows, layout.dim))
        .copy_from(prob.a_con());
    let mut l = DVector::<T>::zeros(rows);
    let mut u = DVector::<T>::zeros(rows);
    l.rows_mut(0, layout.rows).copy_from(prob.l());
    u.rows_mut(0, layout.rows).copy_from(prob.u());
    let u0 = layout.u_block(layout.prediction_idx(0));
    for c in 0..layout.m {
        a[(layout.rows + c, u0 + c)] = T::one();
        l[layout.rows + c] = u_learning[c];
        u[layout.rows + c] = u_learning[c];
    }
    // Pure feasibility: keep only the small alpha regularizer as objective.
    let mut pmat = DMatrix::<T>::zeros(layout.dim, layout.dim);
    let two: T = cast(2.0);
    for j in 0..layout.n_alpha {
        pmat[(j, j)] = two * cfg.eps_reg;
    }
    let prob = QpProblem::new(pmat, DVector::zeros(layout.dim), a, l, u)?;

    let mut solver = AdmmSolver::new(AdmmSettings::default());
    let sol = solver.solve(&prob)?;
    match sol.status {
        QpStatus::Optimal => Ok(true),
        QpStatus::Infeasible => Ok(false),
        QpStatus::MaxIter => Err(Error::SolverStalled {
            iterations: sol.iterations,
            context: "input certification QP".into(),
        }),
    }
}

/// Everything observable about one closed-loop step.
#[derive(Debug, Clone)]
pub struct StepRecord<T: Scalar = f64> {
    pub t: usize,
    pub u_learning: DVector<T>,
    pub u_safe: DVector<T>,
    pub y: DVector<T>,
    pub objective: T,
    pub qp_status: QpStatus,
    pub qp_iters: usize,
    pub n_vertices: usize,
    pub growth_metric: T,
    pub hull_grew: bool,
}

impl<T: Scalar> StepRecord<T> {
    /// CSV header matching [`csv_record`](Self::csv_record). Vector signals
    /// expand into indexed columns; scalar signals keep the plain names.
    pub fn csv_header(m: usize, p: usize) -> Vec<String> {
        let mut h = vec!["t".to_string(), "seconds".to_string()];
        let push_group = |h: &mut Vec<String>, name: &str, d: usize| {
            if d == 1 {
                h.push(name.to_string());
            } else {
                h.extend((0..d).map(|i| format!("{name}_{i}")));
            }
        };
        push_group(&mut h, "u_learning", m);
        push_group(&mut h, "u_safe", m);
        push_group(&mut h, "y", p);
        h.extend(
            ["objective", "qp_status", "qp_iters", "n_vertices", "growth_metric"]
                .map(String::from),
        );
        h
    }

    pub fn csv_record(&self, seconds: T) -> Vec<String> {
        let mut r = vec![self.t.to_string(), format!("{}", seconds)];
        r.extend(self.u_learning.iter().map(|v| format!("{}", v)));
        r.extend(self.u_safe.iter().map(|v| format!("{}", v)));
        r.extend(self.y.iter().map(|v| format!("{}", v)));
        r.push(format!("{}", self.objective));
        r.push(self.qp_status.to_string());
        r.push(self.qp_iters.to_string());
        r.push(self.n_vertices.to_string());
        r.push(format!("{}", self.growth_metric));
        r
    }
}

fn step_closed_loop<T: Scalar>(
    state: &mut FilterState<T>,
    cfg: &FilterConfig<T>,
    plant: &mut DelayedLtiPlant<T>,
    t: usize,
    u_learning: &DVector<T>,
    expand: bool,
) -> Result<StepRecord<T>> {
    let (u_safe, backup) = filter_input(state, cfg, u_learning)?;
    let sol = state.last_solution.as_ref().expect("just solved");
    let (qp_status, qp_iters) = (sol.status, sol.iterations);

    let y = plant.step(&u_safe)?;
    state.push_measurement(u_safe.clone(), y.clone());

    let (growth, hull_grew) = if expand {
        let xi = state.current_extended_state();
        let gen_before = state.safe_set.generation();
        let grew = state.safe_set.insert(&xi)?;
        let growth = state
            .safe_set
            .growth_metric(gen_before, std::slice::from_ref(&xi))?;
        state.safe_set.prune_if_due()?;
        (growth, grew)
    } else {
        (T::zero(), false)
    };

    Ok(StepRecord {
        t,
        u_learning: u_learning.clone(),
        u_safe,
        y,
        objective: backup.objective,
        qp_status,
        qp_iters,
        n_vertices: state.safe_set.len(),
        growth_metric: growth,
        hull_grew,
    })
}

/// One loop body of the online expansion: filter, apply to the plant, roll
/// the history, insert the new extended state into the safe set and measure
/// hull growth.
pub fn step_online<T: Scalar>(
    state: &mut FilterState<T>,
    cfg: &FilterConfig<T>,
    plant: &mut DelayedLtiPlant<T>,
    t: usize,
    u_learning: &DVector<T>,
) -> Result<StepRecord<T>> {
    step_closed_loop(state, cfg, plant, t, u_learning, true)
}

/// Closed-loop step with a frozen terminal set (no expansion).
pub fn step_filtered<T: Scalar>(
    state: &mut FilterState<T>,
    cfg: &FilterConfig<T>,
    plant: &mut DelayedLtiPlant<T>,
    t: usize,
    u_learning: &DVector<T>,
) -> Result<StepRecord<T>> {
    step_closed_loop(state, cfg, plant, t, u_learning, false)
}

/// Controls for the offline expansion loop.
#[derive(Debug, Clone)]
pub struct OfflineOptions<T: Scalar = f64> {
    pub rng_seed: u64,
    pub max_iters: usize,
    /// Probing learning inputs cycled across iterations (typically the
    /// vertices of the input constraint box).
    pub probe_inputs: Vec<DVector<T>>,
    /// Iteration indices at which to snapshot the vertex list.
    pub checkpoints: Vec<usize>,
    pub convergence_window: usize,
}

impl<T: Scalar> OfflineOptions<T> {
    pub fn new(rng_seed: u64, max_iters: usize, probe_inputs: Vec<DVector<T>>) -> Self {
        Self {
            rng_seed,
            max_iters,
            probe_inputs,
            checkpoints: Vec::new(),
            convergence_window: crate::safeset::OFFLINE_CONVERGENCE_WINDOW,
        }
    }
}

/// Result of the offline expansion.
#[derive(Debug, Clone)]
pub struct OfflineOutcome<T: Scalar = f64> {
    pub set: SampledSafeSet<T>,
    pub iterations_run: usize,
    pub converged_at: Option<usize>,
    pub growth_history: Vec<T>,
    /// (iteration, vertex list) snapshots; always includes the final state.
    pub snapshots: Vec<(usize, Vec<DVector<T>>)>,
}

/// Grow a safe set using only the recorded batch: repeatedly solve the
/// filter QP from a frontier point of the current set under a probing
/// learning input, and insert the extended states of every predicted step.
/// No plant interaction occurs.
pub fn expand_offline<T: Scalar>(
    hankel: &HankelPair<T>,
    cfg: &FilterConfig<T>,
    seed_set: SampledSafeSet<T>,
    opts: &OfflineOptions<T>,
) -> Result<OfflineOutcome<T>> {
    if opts.probe_inputs.is_empty() {
        return Err(Error::InvalidArgument(
            "offline expansion needs at least one probing input".into(),
        ));
    }
    for probe in &opts.probe_inputs {
        if !seed_set.u_set().contains(probe)? {
            return Err(Error::ConstraintViolation(
                "probing input lies outside the input set".into(),
            ));
        }
    }

    let mut set = seed_set;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.rng_seed);
    let mut solver = AdmmSolver::new(AdmmSettings::default());
    let phase: usize = rng.random_range(0..opts.probe_inputs.len());

    let mut xi_init =
        ExtendedState::from_vector(set.vertices()[0].clone(), cfg.t_ini, set.input_dim(), set.output_dim())?;
    let mut prev: Option<(QpSolution<T>, QpLayout)> = None;
    let mut growth_history = Vec::new();
    let mut snapshots: Vec<(usize, Vec<DVector<T>>)> = Vec::new();
    let mut consecutive_still = 0usize;
    let mut converged_at = None;
    let mut iterations_run = 0usize;

    for l in 0..opts.max_iters {
        if opts.checkpoints.contains(&l) {
            snapshots.push((l, set.vertices().to_vec()));
        }

        let history: Vec<(DVector<T>, DVector<T>)> = (0..cfg.t_ini)
            .map(|k| (xi_init.input_block(k), xi_init.output_block(k)))
            .collect();
        let u_probe = &opts.probe_inputs[(phase + l) % opts.probe_inputs.len()];
        let (prob, layout) = build_qp(hankel, &history, &set, cfg, u_probe)?;
        let (z0, y0) = match &prev {
            Some((sol, prev_layout)) => warm_start_from(sol, prev_layout, &layout),
            None => (None, None),
        };
        let sol = solve_to_quality(
            &mut solver,
            &prob,
            z0.as_ref(),
            y0.as_ref(),
            cfg.feas_tol * cast::<T>(0.01),
            &if l == 0 {
                "offline expansion iteration 0 (seed set unreachable within the horizon?)"
                    .to_string()
            } else {
                format!("offline expansion iteration {l}")
            },
        )?;
        let backup = extract_backup(&sol, &layout, cfg, u_probe);
        validate_backup(&backup, &set, cfg)?;

        // Candidate extended states: the trailing window after each predicted
        // step of the combined (history + predicted) sequence.
        let mut u_full: Vec<DVector<T>> = history.iter().map(|(u, _)| u.clone()).collect();
        let mut y_full: Vec<DVector<T>> = history.iter().map(|(_, y)| y.clone()).collect();
        u_full.extend(backup.u_bar.iter().cloned());
        y_full.extend(backup.y_bar.iter().cloned());

        let gen_before = set.generation();
        let mut round_growth = T::zero();
        let mut frontier: Option<(T, ExtendedState<T>)> = None;
        for j in 0..cfg.prediction_len() {
            let xi = ExtendedState::from_window(
                &u_full[j + 1..j + 1 + cfg.t_ini],
                &y_full[j + 1..j + 1 + cfg.t_ini],
            )?;
            let dist = set.distance_to_generation(xi.vector(), gen_before)?;
            if dist > round_growth {
                round_growth = dist;
            }
            let accepted = set.insert(&xi)?;
            if accepted {
                let better = frontier.as_ref().map_or(true, |(best, _)| dist > *best);
                if better {
                    frontier = Some((dist, xi));
                }
            }
        }
        set.prune_if_due()?;
        growth_history.push(round_growth);
        prev = Some((sol, layout));
        iterations_run = l + 1;

        xi_init = match frontier {
            Some((_, xi)) => xi,
            None => {
                let pick = rng.random_range(0..set.len());
                ExtendedState::from_vector(
                    set.vertices()[pick].clone(),
                    cfg.t_ini,
                    set.input_dim(),
                    set.output_dim(),
                )?
            }
        };

        if round_growth <= cfg.novelty_tol {
            consecutive_still += 1;
            if consecutive_still >= opts.convergence_window {
                converged_at = Some(l);
                break;
            }
        } else {
            consecutive_still = 0;
        }
    }

    if snapshots.last().map(|(i, _)| *i) != Some(iterations_run) {
        snapshots.push((iterations_run, set.vertices().to_vec()));
    }

    Ok(OfflineOutcome {
        set,
        iterations_run,
        converged_at,
        growth_history,
        snapshots,
    })
}
