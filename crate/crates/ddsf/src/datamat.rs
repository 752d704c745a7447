//! Trajectory records, block-Hankel construction, persistent-excitation
//! checks and extended-state extraction. These are the data structures the
//! implicit model is made of.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};

/// Relative singular-value cutoff for numerical rank decisions.
/// Conservative against roundoff; the data is assumed noise-free.
pub const RANK_TOL: f64 = 1e-9;

/// A recorded input-output trajectory: `u` and `y` have equal length and
/// dimensionally uniform entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T: Scalar = f64> {
    u: Vec<DVector<T>>,
    y: Vec<DVector<T>>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn new(u: Vec<DVector<T>>, y: Vec<DVector<T>>) -> Result<Self> {
        if u.is_empty() || u.len() != y.len() {
            return Err(Error::InvalidArgument(format!(
                "trajectory needs equal nonzero input/output lengths, got {} and {}",
                u.len(),
                y.len()
            )));
        }
        let m = u[0].len();
        let p = y[0].len();
        if m == 0 || p == 0 {
            return Err(Error::InvalidArgument(
                "trajectory samples must be non-empty vectors".into(),
            ));
        }
        if u.iter().any(|v| v.len() != m) || y.iter().any(|v| v.len() != p) {
            return Err(Error::InvalidArgument(
                "trajectory samples must be dimensionally uniform".into(),
            ));
        }
        Ok(Self { u, y })
    }

    /// Number of recorded samples (N0).
    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the constructor rejects empty trajectories
    }

    pub fn input_dim(&self) -> usize {
        self.u[0].len()
    }

    pub fn output_dim(&self) -> usize {
        self.y[0].len()
    }

    pub fn inputs(&self) -> &[DVector<T>] {
        &self.u
    }

    pub fn outputs(&self) -> &[DVector<T>] {
        &self.y
    }

    /// Write as CSV with header `t,u_0..u_{m-1},y_0..y_{p-1}`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string()];
        header.extend((0..self.input_dim()).map(|i| format!("u_{i}")));
        header.extend((0..self.output_dim()).map(|i| format!("y_{i}")));
        w.write_record(&header)?;
        for t in 0..self.len() {
            let mut row = vec![t.to_string()];
            row.extend(self.u[t].iter().map(|v| format!("{}", v)));
            row.extend(self.y[t].iter().map(|v| format!("{}", v)));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_file<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let m = header.iter().filter(|h| h.starts_with("u_")).count();
        let p = header.iter().filter(|h| h.starts_with("y_")).count();
        if header.get(0) != Some("t") || m == 0 || p == 0 {
            return Err(Error::Parse(
                "trajectory CSV must have header t,u_0..,y_0..".into(),
            ));
        }
        let mut u = Vec::new();
        let mut y = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != 1 + m + p {
                return Err(Error::Parse(format!(
                    "trajectory CSV row has {} fields, expected {}",
                    rec.len(),
                    1 + m + p
                )));
            }
            let parse = |s: &str| -> Result<T> {
                s.parse::<f64>()
                    .map(cast)
                    .map_err(|e| Error::Parse(format!("bad float {s:?}: {e}")))
            };
            let mut ut = DVector::zeros(m);
            for i in 0..m {
                ut[i] = parse(&rec[1 + i])?;
            }
            let mut yt = DVector::zeros(p);
            for i in 0..p {
                yt[i] = parse(&rec[1 + m + i])?;
            }
            u.push(ut);
            y.push(yt);
        }
        Self::new(u, y)
    }

    pub fn read_csv_file<P: AsRef<Path>>(path: P) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// Stacked input/output block-Hankel matrices of a common window depth; the
/// implicit model of the recorded system.
#[derive(Debug, Clone, PartialEq)]
pub struct HankelPair<T: Scalar = f64> {
    hu: DMatrix<T>,
    hy: DMatrix<T>,
    depth: usize,
    m: usize,
    p: usize,
}

impl<T: Scalar> HankelPair<T> {
    pub fn hu(&self) -> &DMatrix<T> {
        &self.hu
    }

    pub fn hy(&self) -> &DMatrix<T> {
        &self.hy
    }

    /// Window depth L.
    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Number of columns, N0 - L + 1.
    pub fn num_columns(&self) -> usize {
        self.hu.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn output_dim(&self) -> usize {
        self.p
    }
}

/// Block-Hankel matrix of a vector signal: column j stacks
/// `signal[j] .. signal[j+depth-1]`.
pub fn hankel_matrix<T: Scalar>(signal: &[DVector<T>], depth: usize) -> Result<DMatrix<T>> {
    if depth == 0 {
        return Err(Error::InvalidArgument("Hankel depth must be >= 1".into()));
    }
    if signal.is_empty() {
        return Err(Error::InvalidArgument("Hankel of empty signal".into()));
    }
    let n0 = signal.len();
    if depth > n0 {
        return Err(Error::InvalidArgument(format!(
            "Hankel depth {depth} exceeds signal length {n0}"
        )));
    }
    let d = signal[0].len();
    let cols = n0 - depth + 1;
    let mut h = DMatrix::zeros(d * depth, cols);
    for j in 0..cols {
        for i in 0..depth {
            h.view_mut((i * d, j), (d, 1)).copy_from(&signal[j + i]);
        }
    }
    Ok(h)
}

/// Build the input/output Hankel pair of depth `l` from a trajectory.
pub fn build_hankel<T: Scalar>(traj: &Trajectory<T>, l: usize) -> Result<HankelPair<T>> {
    if l > traj.len() {
        return Err(Error::InvalidArgument(format!(
            "Hankel depth {l} exceeds trajectory length {}",
            traj.len()
        )));
    }
    Ok(HankelPair {
        hu: hankel_matrix(traj.inputs(), l)?,
        hy: hankel_matrix(traj.outputs(), l)?,
        depth: l,
        m: traj.input_dim(),
        p: traj.output_dim(),
    })
}

/// Numerical rank: singular values above `rank_tol` times the largest one.
fn numerical_rank<T: Scalar>(mat: &DMatrix<T>, rank_tol: T) -> usize {
    let sv = mat.clone().singular_values();
    if sv.is_empty() {
        return 0;
    }
    let max = sv[0]; // singular values come sorted descending
    if max <= T::zero() {
        return 0;
    }
    sv.iter().filter(|&&s| s > rank_tol * max).count()
}

/// True iff the signal is persistently exciting of the given order, i.e.
/// `rank(H_order(u)) = m * order`. Short signals are simply not exciting.
pub fn is_persistently_exciting<T: Scalar>(u: &[DVector<T>], order: usize) -> bool {
    is_persistently_exciting_with_tol(u, order, cast(RANK_TOL))
}

pub fn is_persistently_exciting_with_tol<T: Scalar>(
    u: &[DVector<T>],
    order: usize,
    rank_tol: T,
) -> bool {
    measured_pe_rank(u, order, rank_tol).map_or(false, |(rank, full)| rank == full)
}

/// Measured numerical rank of `H_order(u)` together with the full-rank target
/// `m * order`; `None` when the signal is too short to form the matrix.
pub fn measured_pe_rank<T: Scalar>(
    u: &[DVector<T>],
    order: usize,
    rank_tol: T,
) -> Option<(usize, usize)> {
    if order == 0 || u.is_empty() || u.len() < order {
        return None;
    }
    let m = u[0].len();
    let h = hankel_matrix(u, order).ok()?;
    Some((numerical_rank(&h, rank_tol), m * order))
}

/// Stacked last `t_ini` inputs and outputs: the data-driven surrogate for the
/// internal state. Layout is the input block first, then the output block,
/// each in chronological order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedState<T: Scalar = f64> {
    xi: DVector<T>,
    t_ini: usize,
    m: usize,
    p: usize,
}

impl<T: Scalar> ExtendedState<T> {
    /// Build from explicit input/output windows of length `t_ini`.
    pub fn from_window(u_win: &[DVector<T>], y_win: &[DVector<T>]) -> Result<Self> {
        if u_win.is_empty() || u_win.len() != y_win.len() {
            return Err(Error::InvalidArgument(
                "extended state needs equal nonzero window lengths".into(),
            ));
        }
        let t_ini = u_win.len();
        let m = u_win[0].len();
        let p = y_win[0].len();
        let mut xi = DVector::zeros((m + p) * t_ini);
        for (k, u) in u_win.iter().enumerate() {
            if u.len() != m {
                return Err(Error::InvalidArgument("ragged input window".into()));
            }
            xi.rows_mut(k * m, m).copy_from(u);
        }
        for (k, y) in y_win.iter().enumerate() {
            if y.len() != p {
                return Err(Error::InvalidArgument("ragged output window".into()));
            }
            xi.rows_mut(t_ini * m + k * p, p).copy_from(y);
        }
        Ok(Self { xi, t_ini, m, p })
    }

    /// The constant window of an equilibrium pair (u_s, y_s).
    pub fn equilibrium(u_s: &DVector<T>, y_s: &DVector<T>, t_ini: usize) -> Result<Self> {
        if t_ini == 0 {
            return Err(Error::InvalidArgument("t_ini must be >= 1".into()));
        }
        let u_win = vec![u_s.clone(); t_ini];
        let y_win = vec![y_s.clone(); t_ini];
        Self::from_window(&u_win, &y_win)
    }

    /// Rebuild from a raw stacked vector with known layout.
    pub fn from_vector(xi: DVector<T>, t_ini: usize, m: usize, p: usize) -> Result<Self> {
        if xi.len() != (m + p) * t_ini {
            return Err(Error::DimMismatch {
                context: "extended state vector",
                expected: (m + p) * t_ini,
                got: xi.len(),
            });
        }
        Ok(Self { xi, t_ini, m, p })
    }

    pub fn vector(&self) -> &DVector<T> {
        &self.xi
    }

    pub fn t_ini(&self) -> usize {
        self.t_ini
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn output_dim(&self) -> usize {
        self.p
    }

    /// k-th input of the window (chronological, k in 0..t_ini).
    pub fn input_block(&self, k: usize) -> DVector<T> {
        self.xi.rows(k * self.m, self.m).into_owned()
    }

    /// k-th output of the window.
    pub fn output_block(&self, k: usize) -> DVector<T> {
        self.xi
            .rows(self.t_ini * self.m + k * self.p, self.p)
            .into_owned()
    }
}

/// Extended state at time `t` of a recorded trajectory (uses samples
/// `t - t_ini .. t - 1`).
pub fn extended_state<T: Scalar>(
    traj: &Trajectory<T>,
    t: usize,
    t_ini: usize,
) -> Result<ExtendedState<T>> {
    if t_ini == 0 {
        return Err(Error::InvalidArgument("t_ini must be >= 1".into()));
    }
    if t < t_ini {
        return Err(Error::InvalidArgument(format!(
            "extended state at t={t} needs at least t_ini={t_ini} past samples"
        )));
    }
    if t > traj.len() {
        return Err(Error::InvalidArgument(format!(
            "extended state at t={t} exceeds trajectory length {}",
            traj.len()
        )));
    }
    ExtendedState::from_window(&traj.inputs()[t - t_ini..t], &traj.outputs()[t - t_ini..t])
}

/// One validated precondition of the filter.
#[derive(Debug, Clone)]
pub struct ValidationCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Pass/fail report over the data assumptions the filter relies on. The
/// filter constructor refuses failing reports; this function itself always
/// returns a report.
#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub checks: Vec<ValidationCheck>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "  [{}] {}: {}",
                if c.passed { "pass" } else { "FAIL" },
                c.name,
                c.detail
            )?;
        }
        Ok(())
    }
}

/// Check the filter's data assumptions for horizon `n`, history depth
/// `t_ini` and order overestimate `n_bar`:
/// - the prediction horizon must exceed the history depth,
/// - the input must be persistently exciting of order `L + n_bar`, where
///   `L = n + 2 t_ini` is the window depth the filter parameterizes
///   (history, constrained horizon, terminal tail),
/// - the batch must be long enough for the Hankel rank condition.
pub fn validate_assumptions<T: Scalar>(
    traj: &Trajectory<T>,
    n: usize,
    t_ini: usize,
    n_bar: usize,
) -> ValidationReport {
    let mut checks = Vec::new();
    let m = traj.input_dim();
    let n0 = traj.len();
    let l = n + 2 * t_ini;
    let pe_order = l + n_bar;

    checks.push(ValidationCheck {
        name: "horizon exceeds history depth".into(),
        passed: n > t_ini,
        detail: format!("N = {n}, T_ini = {t_ini}"),
    });

    let rank = measured_pe_rank(traj.inputs(), pe_order, cast(RANK_TOL));
    let (pe_pass, pe_detail) = match rank {
        Some((r, full)) => (
            r == full,
            format!("order {pe_order}: measured rank {r} of {full}"),
        ),
        None => (
            false,
            format!("order {pe_order}: batch of length {n0} too short to form the Hankel"),
        ),
    };
    checks.push(ValidationCheck {
        name: "input persistently exciting".into(),
        passed: pe_pass,
        detail: pe_detail,
    });

    let cols = n0 as i64 - l as i64 + 1;
    let needed = (m * (l + n_bar)) as i64;
    checks.push(ValidationCheck {
        name: "data length sufficient".into(),
        passed: cols >= needed,
        detail: format!("N0 - L + 1 = {cols}, required m*(L + n_bar) = {needed}"),
    });

    ValidationReport { checks }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_traj(u: &[f64], y: &[f64]) -> Trajectory<f64> {
        Trajectory::new(
            u.iter().map(|&v| DVector::from_element(1, v)).collect(),
            y.iter().map(|&v| DVector::from_element(1, v)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn hankel_depth_two_pattern() {
        let traj = scalar_traj(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5]);
        let h = build_hankel(&traj, 2).unwrap();
        let expected = DMatrix::from_row_slice(2, 4, &[1.0, 2.0, 3.0, 4.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(h.hu(), &expected);
        assert_eq!(h.num_columns(), 4);
    }

    #[test]
    fn hankel_full_depth_single_column() {
        let traj = scalar_traj(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5]);
        let h = build_hankel(&traj, 5).unwrap();
        assert_eq!(h.hu().shape(), (5, 1));
    }

    #[test]
    fn hankel_depth_exceeding_length_errors() {
        let traj = scalar_traj(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5]);
        assert!(build_hankel(&traj, 6).is_err());
    }

    #[test]
    fn constant_signal_is_not_exciting() {
        let u: Vec<DVector<f64>> = (0..5).map(|_| DVector::from_element(1, 1.0)).collect();
        assert!(!is_persistently_exciting(&u, 2));
        // but any nonzero scalar signal is PE of order 1
        assert!(is_persistently_exciting(&u, 1));
    }

    #[test]
    fn random_signal_is_exciting_of_order_13() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let u: Vec<DVector<f64>> = (0..200)
            .map(|_| DVector::from_element(1, rng.random_range(-1.0..1.0)))
            .collect();
        assert!(is_persistently_exciting(&u, 13));
    }

    #[test]
    fn extended_state_layout_and_errors() {
        let traj = scalar_traj(&[0.1, 0.2], &[1.0, 2.0]);
        let xi = extended_state(&traj, 2, 2).unwrap();
        assert_eq!(xi.vector().as_slice(), &[0.1, 0.2, 1.0, 2.0]);
        assert_eq!(xi.input_block(1)[0], 0.2);
        assert_eq!(xi.output_block(0)[0], 1.0);

        assert!(extended_state(&traj, 1, 3).is_err());

        let zeros = scalar_traj(&[0.0; 4], &[0.0; 4]);
        let xi = extended_state(&zeros, 4, 3).unwrap();
        assert_eq!(xi.vector().len(), 6);
        assert!(xi.vector().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn validation_report_on_benchmark_setup() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u: Vec<f64> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
        // Outputs are irrelevant to the checks; use a running sum.
        let y: Vec<f64> = u.iter().scan(0.0, |s, &v| {
            *s += v;
            Some(*s)
        })
        .collect();
        let traj = scalar_traj(&u, &y);

        let report = validate_assumptions(&traj, 6, 3, 4);
        assert!(report.all_passed(), "{report}");

        let report = validate_assumptions(&traj, 3, 3, 4);
        assert!(!report.checks[0].passed);

        let constant = scalar_traj(&[0.5; 200], &[0.0; 200]);
        let report = validate_assumptions(&constant, 6, 3, 4);
        assert!(!report.checks[1].passed);

        let short = scalar_traj(&u[..10], &y[..10]);
        let report = validate_assumptions(&short, 6, 3, 4);
        assert!(!report.checks[2].passed, "{report}");
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let traj = scalar_traj(&[0.1, -0.25, 1.0 / 3.0], &[1.5, -2.0, 0.0]);
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let back = Trajectory::<f64>::read_csv(buf.as_slice()).unwrap();
        assert_eq!(traj, back);
    }

    proptest! {
        #[test]
        fn hankel_round_trip_reconstructs_signal(
            raw in proptest::collection::vec(-1.0f64..1.0, 3..30),
            depth in 1usize..6,
        ) {
            prop_assume!(depth <= raw.len());
            let sig: Vec<DVector<f64>> =
                raw.iter().map(|&v| DVector::from_element(1, v)).collect();
            let h = hankel_matrix(&sig, depth).unwrap();
            // First column plus last row reconstructs the signal exactly.
            let mut rebuilt: Vec<f64> = (0..depth).map(|i| h[(i, 0)]).collect();
            for j in 1..h.ncols() {
                rebuilt.push(h[(depth - 1, j)]);
            }
            prop_assert_eq!(rebuilt, raw);
        }

        #[test]
        fn pe_is_monotone_in_order(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n0 = rng.random_range(10..40);
            let u: Vec<DVector<f64>> = (0..n0)
                .map(|_| DVector::from_element(1, rng.random_range(-1.0..1.0)))
                .collect();
            let max_order = 8.min(n0);
            let pe: Vec<bool> = (1..=max_order)
                .map(|k| is_persistently_exciting(&u, k))
                .collect();
            for w in pe.windows(2) {
                // if PE of order k+1 then PE of order k
                prop_assert!(w[0] || !w[1]);
            }
        }
    }
}
