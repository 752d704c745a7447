//! Polytopic input/output constraint sets and the membership / horizon
//! replication utilities the filter builds its inequality rows from.
//!
//! Constraint sets are written with strict inequalities; QP solvers return
//! closures, so membership and all derived constraint rows use `<=` with a
//! small feasibility tolerance instead.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lp::{solve_lp, LpStatus};
use crate::scalar::{cast, Scalar};

/// Default feasibility tolerance used when relaxing strict inequalities.
pub const FEAS_TOL: f64 = 1e-7;

/// A polytope `{ v : A v <= b }` with at least one row and a designated
/// interior point (found by LP at construction when not supplied).
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope<T: Scalar = f64> {
    a_mat: DMatrix<T>,
    b: DVector<T>,
    interior: DVector<T>,
}

impl<T: Scalar> Polytope<T> {
    /// Build from rows, locating an interior point via a Chebyshev-center LP.
    pub fn new(a_mat: DMatrix<T>, b: DVector<T>) -> Result<Self> {
        Self::validate_shape(&a_mat, &b)?;
        let interior = chebyshev_interior(&a_mat, &b)?;
        Ok(Self { a_mat, b, interior })
    }

    /// Build from rows with a caller-supplied interior point (must satisfy
    /// the inequalities strictly).
    pub fn with_interior_point(
        a_mat: DMatrix<T>,
        b: DVector<T>,
        interior: DVector<T>,
    ) -> Result<Self> {
        Self::validate_shape(&a_mat, &b)?;
        if interior.len() != a_mat.ncols() {
            return Err(Error::DimMismatch {
                context: "polytope interior point",
                expected: a_mat.ncols(),
                got: interior.len(),
            });
        }
        let residuals = &a_mat * &interior - &b;
        if residuals.iter().any(|&r| r >= T::zero()) {
            return Err(Error::InvalidArgument(
                "supplied interior point does not satisfy A v < b strictly".into(),
            ));
        }
        Ok(Self { a_mat, b, interior })
    }

    fn validate_shape(a_mat: &DMatrix<T>, b: &DVector<T>) -> Result<()> {
        if a_mat.nrows() == 0 || a_mat.ncols() == 0 {
            return Err(Error::InvalidArgument(
                "polytope needs at least one row and one dimension".into(),
            ));
        }
        if b.len() != a_mat.nrows() {
            return Err(Error::DimMismatch {
                context: "polytope right-hand side",
                expected: a_mat.nrows(),
                got: b.len(),
            });
        }
        Ok(())
    }

    pub fn a_mat(&self) -> &DMatrix<T> {
        &self.a_mat
    }

    pub fn b(&self) -> &DVector<T> {
        &self.b
    }

    pub fn interior_point(&self) -> &DVector<T> {
        &self.interior
    }

    pub fn dim(&self) -> usize {
        self.a_mat.ncols()
    }

    pub fn num_rows(&self) -> usize {
        self.a_mat.nrows()
    }

    /// Membership with the default feasibility tolerance.
    pub fn contains(&self, v: &DVector<T>) -> Result<bool> {
        self.contains_with_tol(v, cast(FEAS_TOL))
    }

    pub fn contains_with_tol(&self, v: &DVector<T>, tol: T) -> Result<bool> {
        if v.len() != self.dim() {
            return Err(Error::DimMismatch {
                context: "polytope membership",
                expected: self.dim(),
                got: v.len(),
            });
        }
        let res = &self.a_mat * v - &self.b;
        Ok(res.iter().all(|&r| r <= tol))
    }

    /// Block-diagonal replication over `k` copies, so one linear block
    /// constrains a stacked horizon of vectors.
    pub fn as_rows_for_horizon(&self, k: usize) -> Result<Polytope<T>> {
        if k == 0 {
            return Err(Error::InvalidArgument(
                "horizon replication needs k >= 1".into(),
            ));
        }
        let (r, d) = (self.num_rows(), self.dim());
        let mut a = DMatrix::zeros(r * k, d * k);
        let mut b = DVector::zeros(r * k);
        let mut interior = DVector::zeros(d * k);
        for i in 0..k {
            a.view_mut((i * r, i * d), (r, d)).copy_from(&self.a_mat);
            b.rows_mut(i * r, r).copy_from(&self.b);
            interior.rows_mut(i * d, d).copy_from(&self.interior);
        }
        Ok(Polytope {
            a_mat: a,
            b,
            interior,
        })
    }
}

/// Axis-aligned box `lo <= v <= hi`, the common special case.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet<T: Scalar = f64> {
    lo: DVector<T>,
    hi: DVector<T>,
}

impl<T: Scalar> BoxSet<T> {
    pub fn new(lo: DVector<T>, hi: DVector<T>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::InvalidArgument(
                "box bounds must be non-empty vectors of equal length".into(),
            ));
        }
        if lo.iter().zip(hi.iter()).any(|(l, h)| l > h) {
            return Err(Error::InvalidArgument(
                "box lower bound exceeds upper bound".into(),
            ));
        }
        Ok(Self { lo, hi })
    }

    pub fn symmetric(half_width: T, dim: usize) -> Result<Self> {
        Self::new(
            DVector::from_element(dim, -half_width),
            DVector::from_element(dim, half_width),
        )
    }

    pub fn lo(&self) -> &DVector<T> {
        &self.lo
    }

    pub fn hi(&self) -> &DVector<T> {
        &self.hi
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, v: &DVector<T>) -> Result<bool> {
        self.contains_with_tol(v, cast(FEAS_TOL))
    }

    pub fn contains_with_tol(&self, v: &DVector<T>, tol: T) -> Result<bool> {
        if v.len() != self.dim() {
            return Err(Error::DimMismatch {
                context: "box membership",
                expected: self.dim(),
                got: v.len(),
            });
        }
        Ok(v.iter()
            .zip(self.lo.iter().zip(self.hi.iter()))
            .all(|(&x, (&l, &h))| x >= l - tol && x <= h + tol))
    }

    /// The corner points of the box (bang-bang extremes), in a fixed order.
    /// Degenerate axes (lo == hi) contribute a single value.
    pub fn vertices(&self) -> Vec<DVector<T>> {
        let d = self.dim();
        let mut out = Vec::new();
        let mut corner = vec![0usize; d];
        loop {
            let v = DVector::from_fn(d, |i, _| {
                if corner[i] == 0 {
                    self.lo[i]
                } else {
                    self.hi[i]
                }
            });
            if !out.contains(&v) {
                out.push(v);
            }
            // counting in binary over the axes
            let mut i = 0;
            loop {
                if i == d {
                    return out;
                }
                corner[i] += 1;
                if corner[i] == 2 {
                    corner[i] = 0;
                    i += 1;
                } else {
                    break;
                }
            }
        }
    }

    /// Halfspace representation `[I; -I] v <= [hi; -lo]`, interior at the
    /// midpoint. Requires a nonempty interior (lo < hi).
    pub fn to_polytope(&self) -> Result<Polytope<T>> {
        let d = self.dim();
        let mut a = DMatrix::zeros(2 * d, d);
        let mut b = DVector::zeros(2 * d);
        for i in 0..d {
            a[(i, i)] = T::one();
            b[i] = self.hi[i];
            a[(d + i, i)] = -T::one();
            b[d + i] = -self.lo[i];
        }
        let half: T = cast(0.5);
        let mid = DVector::from_fn(d, |i, _| (self.lo[i] + self.hi[i]) * half);
        Polytope::with_interior_point(a, b, mid)
    }
}

/// Chebyshev-center LP: find a point maximizing the inscribed-ball radius.
/// Free coordinates are split into positive parts for the simplex kernel,
/// and the radius is capped so a cone or slab still yields a finite center.
fn chebyshev_interior<T: Scalar>(a_mat: &DMatrix<T>, b: &DVector<T>) -> Result<DVector<T>> {
    let (rows, d) = (a_mat.nrows(), a_mat.ncols());
    let radius_cap: T = cast(1e6);
    // variables: [x_plus(d), x_minus(d), r]
    let nv = 2 * d + 1;
    let mut c = DVector::<T>::zeros(nv);
    c[2 * d] = -T::one(); // maximize r

    let mut a_ub = DMatrix::<T>::zeros(rows + 1, nv);
    let mut b_ub = DVector::<T>::zeros(rows + 1);
    for i in 0..rows {
        let norm = a_mat.row(i).norm();
        for j in 0..d {
            a_ub[(i, j)] = a_mat[(i, j)];
            a_ub[(i, d + j)] = -a_mat[(i, j)];
        }
        a_ub[(i, 2 * d)] = norm;
        b_ub[i] = b[i];
    }
    a_ub[(rows, 2 * d)] = T::one();
    b_ub[rows] = radius_cap;

    let res = solve_lp(
        &c,
        &a_ub,
        &b_ub,
        &DMatrix::zeros(0, nv),
        &DVector::zeros(0),
    );
    match res.status {
        LpStatus::Optimal => {
            let r = res.x[2 * d];
            if r <= cast(1e-9) {
                return Err(Error::InvalidArgument(
                    "polytope has an empty interior".into(),
                ));
            }
            Ok(DVector::from_fn(d, |i, _| res.x[i] - res.x[d + i]))
        }
        LpStatus::Infeasible => Err(Error::InvalidArgument(
            "polytope is empty (no interior point exists)".into(),
        )),
        LpStatus::Unbounded => Err(Error::InvalidArgument(
            "interior search failed (unbounded radius despite cap)".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_box() -> BoxSet<f64> {
        BoxSet::symmetric(1.0, 1).unwrap()
    }

    #[test]
    fn box_membership_with_boundary_convention() {
        let b = unit_box();
        assert!(b.contains(&DVector::from_element(1, 0.5)).unwrap());
        assert!(!b.contains(&DVector::from_element(1, 1.2)).unwrap());
        // boundary point accepted under the feasibility relaxation
        assert!(b.contains(&DVector::from_element(1, 1.0)).unwrap());
    }

    #[test]
    fn polytope_from_box_agrees_with_direct_evaluation() {
        let poly = unit_box().to_polytope().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let v = DVector::<f64>::from_element(1, rng.random_range(-2.0..2.0));
            let direct = v[0].abs() <= 1.0 + FEAS_TOL;
            assert_eq!(poly.contains(&v).unwrap(), direct);
        }
    }

    #[test]
    fn horizon_replication_row_counts() {
        let poly = unit_box().to_polytope().unwrap();
        assert_eq!(poly.as_rows_for_horizon(6).unwrap().num_rows(), 12);
        assert_eq!(poly.as_rows_for_horizon(1).unwrap(), poly);

        let b2 = BoxSet::symmetric(1.0, 2).unwrap().to_polytope().unwrap();
        assert_eq!(b2.as_rows_for_horizon(3).unwrap().num_rows(), 12);
    }

    #[test]
    fn horizon_membership_is_per_step_membership() {
        let poly = unit_box().to_polytope().unwrap();
        let stacked = poly.as_rows_for_horizon(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let v = DVector::<f64>::from_fn(3, |_, _| rng.random_range(-1.5..1.5));
            let per_step = (0..3).all(|k| v[k].abs() <= 1.0 + FEAS_TOL);
            assert_eq!(stacked.contains(&v).unwrap(), per_step);
        }
    }

    #[test]
    fn interior_point_is_found_or_rejected() {
        // Triangle x >= 0, y >= 0, x + y <= 1
        let a = DMatrix::from_row_slice(3, 2, &[-1.0, 0.0, 0.0, -1.0, 1.0, 1.0]);
        let b = DVector::from_column_slice(&[0.0, 0.0, 1.0]);
        let poly = Polytope::new(a, b).unwrap();
        assert!(poly.contains(poly.interior_point()).unwrap());

        // Empty set: x <= -1 and x >= 1
        let a = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let b = DVector::from_column_slice(&[-1.0, -1.0]);
        assert!(Polytope::new(a, b).is_err());
    }

    #[test]
    fn degenerate_box_has_no_interior() {
        let b = BoxSet::new(
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 1.0),
        )
        .unwrap();
        assert!(b.to_polytope().is_err());
    }

    #[test]
    fn box_vertices_enumerate_corners() {
        let b = BoxSet::symmetric(1.0, 2).unwrap();
        let v = b.vertices();
        assert_eq!(v.len(), 4);
        let b1 = BoxSet::symmetric(1.0, 1).unwrap();
        assert_eq!(b1.vertices().len(), 2);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let poly = unit_box().to_polytope().unwrap();
        assert!(poly.contains(&DVector::from_column_slice(&[0.0, 0.0])).is_err());
    }
}
