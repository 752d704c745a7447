//! Reference implementations used as oracles by the test suites. Everything
//! here is deliberately brute-force and independent of the solver paths it
//! checks: QPs are solved by enumerating candidate active sets, trajectories
//! are replayed on the ground-truth simulator after reconstructing the
//! initial state by least squares.

use nalgebra::{DMatrix, DVector};

use ddsf::plant::DelayedLtiPlant;
use ddsf::qpcore::QpProblem;

/// The benchmark plant used throughout the experiments: a marginally stable
/// second-order system with a scalar input and output.
pub fn benchmark_plant(tau_d: usize) -> DelayedLtiPlant<f64> {
    DelayedLtiPlant::new(
        DMatrix::from_row_slice(2, 2, &[1.0, -0.1, 0.0, 1.0]),
        DMatrix::from_row_slice(2, 1, &[0.0, 0.1]),
        DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        DMatrix::from_row_slice(1, 1, &[0.0]),
        tau_d,
    )
    .expect("benchmark plant matrices are consistent")
}

/// Solve a strictly convex QP by enumerating active sets, smallest first.
///
/// For each candidate subset of rows (equality rows always included, each
/// inequality row pinned at its lower or upper bound) the equality-KKT
/// system is solved; the first candidate whose solution is primal feasible
/// and whose multipliers have the right signs is the unique optimum.
/// Exponential, so only suitable for small instances.
pub fn solve_qp_by_enumeration(prob: &QpProblem<f64>) -> Option<DVector<f64>> {
    let d = prob.num_vars();
    let n_c = prob.num_constraints();
    let p = prob.p();
    let q = prob.q();
    let a = prob.a_con();
    let l = prob.l();
    let u = prob.u();
    let feas_tol = 1e-8;

    let mut eq_rows = Vec::new();
    let mut ineq_rows = Vec::new();
    for i in 0..n_c {
        if l[i] == u[i] {
            eq_rows.push(i);
        } else {
            ineq_rows.push(i);
        }
    }

    // Candidate active rows with their pinned side: false = lower bound,
    // true = upper bound.
    let try_active = |active: &[(usize, bool)]| -> Option<DVector<f64>> {
        let k = eq_rows.len() + active.len();
        let n = d + k;
        let mut kkt = DMatrix::<f64>::zeros(n, n);
        kkt.view_mut((0, 0), (d, d)).copy_from(p);
        let mut rhs = DVector::<f64>::zeros(n);
        rhs.rows_mut(0, d).copy_from(&(-q));
        let mut rows: Vec<(usize, f64)> = eq_rows.iter().map(|&i| (i, l[i])).collect();
        rows.extend(active.iter().map(|&(i, upper)| {
            (i, if upper { u[i] } else { l[i] })
        }));
        for (r, (row, b)) in rows.iter().enumerate() {
            for j in 0..d {
                kkt[(d + r, j)] = a[(*row, j)];
                kkt[(j, d + r)] = a[(*row, j)];
            }
            rhs[d + r] = *b;
        }
        let sol = kkt.full_piv_lu().solve(&rhs)?;
        let z = sol.rows(0, d).into_owned();

        // primal feasibility of the remaining rows
        let az = a * &z;
        for i in 0..n_c {
            if l[i].is_finite() && az[i] < l[i] - feas_tol {
                return None;
            }
            if u[i].is_finite() && az[i] > u[i] + feas_tol {
                return None;
            }
        }
        // dual sign conditions on the pinned inequality rows
        for (r, &(_, upper)) in active.iter().enumerate() {
            let lambda = sol[d + eq_rows.len() + r];
            if upper && lambda < -feas_tol {
                return None;
            }
            if !upper && lambda > feas_tol {
                return None;
            }
        }
        // stationarity check guards against singular KKT solves
        let station = p * &z + q + a.transpose() * {
            let mut dual = DVector::<f64>::zeros(n_c);
            for (r, (row, _)) in rows.iter().enumerate() {
                dual[*row] = sol[d + r];
            }
            dual
        };
        if station.amax() > 1e-6 {
            return None;
        }
        Some(z)
    };

    // enumerate subsets of inequality rows, smallest active sets first
    let nn = ineq_rows.len();
    for size in 0..=nn.min(d) {
        let mut subset: Vec<usize> = (0..size).collect();
        loop {
            // all lower/upper side assignments for this subset
            for mask in 0..(1u32 << size) {
                let active: Vec<(usize, bool)> = subset
                    .iter()
                    .enumerate()
                    .map(|(b, &idx)| (ineq_rows[idx], mask >> b & 1 == 1))
                    .filter(|&(row, upper)| {
                        if upper {
                            u[row].is_finite()
                        } else {
                            l[row].is_finite()
                        }
                    })
                    .collect();
                if active.len() != size {
                    continue; // a pinned side was infinite; covered elsewhere
                }
                if let Some(z) = try_active(&active) {
                    return Some(z);
                }
            }
            if !next_combination(&mut subset, nn) {
                break;
            }
        }
    }
    None
}

/// Advance a sorted index combination in lexicographic order.
fn next_combination(subset: &mut [usize], n: usize) -> bool {
    let k = subset.len();
    if k == 0 {
        return false;
    }
    let mut i = k;
    while i > 0 {
        i -= 1;
        if subset[i] < n - k + i {
            subset[i] += 1;
            for j in i + 1..k {
                subset[j] = subset[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Least-squares reconstruction of a delay-free plant's initial state from
/// an input/output window: solves `O x0 = y_win - T u_win` where `O` is the
/// observability matrix and `T` the forced-response block Toeplitz operator.
/// Returns `None` when the residual indicates the window is inconsistent.
pub fn infer_initial_state(
    plant: &DelayedLtiPlant<f64>,
    u_win: &[DVector<f64>],
    y_win: &[DVector<f64>],
) -> Option<DVector<f64>> {
    assert_eq!(plant.tau_d(), 0, "state inference expects a delay-free plant");
    let dims = plant.dims();
    let steps = u_win.len();
    assert_eq!(steps, y_win.len());

    // Build O and T by simulating basis responses; this stays independent of
    // any model manipulation in the library under test.
    let mut obs = DMatrix::<f64>::zeros(dims.p * steps, dims.n);
    for j in 0..dims.n {
        let mut sim = plant.clone();
        let mut x0 = DVector::zeros(dims.n);
        x0[j] = 1.0;
        sim.reset(&x0, &[]).unwrap();
        for k in 0..steps {
            let y = sim.step(&DVector::zeros(dims.m)).unwrap();
            obs.view_mut((k * dims.p, j), (dims.p, 1)).copy_from(&y);
        }
    }
    let mut forced = DVector::<f64>::zeros(dims.p * steps);
    {
        let mut sim = plant.clone();
        sim.reset(&DVector::zeros(dims.n), &[]).unwrap();
        for k in 0..steps {
            let y = sim.step(&u_win[k]).unwrap();
            forced.rows_mut(k * dims.p, dims.p).copy_from(&y);
        }
    }
    let mut rhs = DVector::<f64>::zeros(dims.p * steps);
    for k in 0..steps {
        rhs.rows_mut(k * dims.p, dims.p)
            .copy_from(&(&y_win[k] - forced.rows(k * dims.p, dims.p)));
    }

    let svd = obs.clone().svd(true, true);
    let x0 = svd.solve(&rhs, 1e-12).ok()?;
    let residual = (&obs * &x0 - &rhs).amax();
    if residual > 1e-7 {
        return None;
    }
    Some(x0)
}

/// Replay an input sequence on the plant from a reconstructed initial state
/// and return the outputs. The plant is augmented first when it has a delay,
/// so the window must describe the augmented state (length >= its lag).
pub fn replay_outputs(
    plant: &DelayedLtiPlant<f64>,
    u_win: &[DVector<f64>],
    y_win: &[DVector<f64>],
    u_rest: &[DVector<f64>],
) -> Option<Vec<DVector<f64>>> {
    let mut free = if plant.tau_d() > 0 {
        plant.augment().ok()?
    } else {
        plant.clone()
    };
    let x0 = infer_initial_state(&free, u_win, y_win)?;
    free.reset(&x0, &[]).unwrap();
    let mut outputs = Vec::with_capacity(u_win.len() + u_rest.len());
    for u in u_win.iter().chain(u_rest) {
        outputs.push(free.step(u).unwrap());
    }
    Some(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumeration_solves_clamped_scalar() {
        // min (z-2)^2 s.t. -1 <= z <= 1
        let prob = QpProblem::new(
            DMatrix::from_element(1, 1, 2.0),
            DVector::from_element(1, -4.0),
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, -1.0),
            DVector::from_element(1, 1.0),
        )
        .unwrap();
        let z = solve_qp_by_enumeration(&prob).unwrap();
        assert!((z[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn enumeration_solves_equality_case() {
        let prob = QpProblem::new(
            DMatrix::from_diagonal(&DVector::from_element(2, 2.0)),
            DVector::zeros(2),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 1.0),
        )
        .unwrap();
        let z = solve_qp_by_enumeration(&prob).unwrap();
        assert!((z[0] - 0.5).abs() < 1e-9);
        assert!((z[1] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn initial_state_recovery_round_trip() {
        let plant = benchmark_plant(0);
        let mut sim = plant.clone();
        let x0 = DVector::from_column_slice(&[0.3, -0.2]);
        sim.reset(&x0, &[]).unwrap();
        let inputs: Vec<DVector<f64>> = (0..4)
            .map(|k| DVector::from_element(1, (k as f64 * 0.7).sin()))
            .collect();
        let outputs: Vec<DVector<f64>> =
            inputs.iter().map(|u| sim.step(u).unwrap()).collect();
        let rec = infer_initial_state(&plant, &inputs, &outputs).unwrap();
        assert!((rec - x0).amax() < 1e-9);
    }
}
