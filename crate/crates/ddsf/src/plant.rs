//! Discrete-time LTI simulator with a pure input delay, plus its delay-free
//! augmentation. Serves as the ground-truth oracle for data generation and
//! closed-loop experiments; the safety filter never reads its matrices.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// State, input and output dimensions of an LTI plant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlantDims {
    pub n: usize,
    pub m: usize,
    pub p: usize,
}

impl PlantDims {
    pub fn new(n: usize, m: usize, p: usize) -> Result<Self> {
        if n == 0 || m == 0 || p == 0 {
            return Err(Error::InvalidArgument(format!(
                "plant dimensions must be strictly positive, got n={n}, m={m}, p={p}"
            )));
        }
        Ok(Self { n, m, p })
    }
}

/// x(t+1) = A x(t) + B u(t - tau_d),  y(t) = C x(t) + D u(t - tau_d).
///
/// The delay buffer is a FIFO of the last `tau_d` applied inputs; it always
/// has exactly `tau_d` entries once constructed.
#[derive(Debug, Clone)]
pub struct DelayedLtiPlant<T: Scalar = f64> {
    a: DMatrix<T>,
    b: DMatrix<T>,
    c: DMatrix<T>,
    d: DMatrix<T>,
    tau_d: usize,
    x: DVector<T>,
    delay_buffer: VecDeque<DVector<T>>,
}

impl<T: Scalar> DelayedLtiPlant<T> {
    /// Build a plant from its matrices. The state starts at zero and the
    /// delay buffer is filled with zero inputs (equilibrium start).
    pub fn new(
        a: DMatrix<T>,
        b: DMatrix<T>,
        c: DMatrix<T>,
        d: DMatrix<T>,
        tau_d: usize,
    ) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::DimMismatch {
                context: "plant A (must be square)",
                expected: n,
                got: a.ncols(),
            });
        }
        let dims = PlantDims::new(n, b.ncols(), c.nrows())?;
        if b.nrows() != n {
            return Err(Error::DimMismatch {
                context: "plant B rows",
                expected: n,
                got: b.nrows(),
            });
        }
        if c.ncols() != n {
            return Err(Error::DimMismatch {
                context: "plant C cols",
                expected: n,
                got: c.ncols(),
            });
        }
        if d.nrows() != dims.p || d.ncols() != dims.m {
            return Err(Error::InvalidArgument(format!(
                "plant D must be {}x{}, got {}x{}",
                dims.p,
                dims.m,
                d.nrows(),
                d.ncols()
            )));
        }
        let delay_buffer = (0..tau_d).map(|_| DVector::zeros(dims.m)).collect();
        Ok(Self {
            a,
            b,
            c,
            d,
            tau_d,
            x: DVector::zeros(n),
            delay_buffer,
        })
    }

    pub fn dims(&self) -> PlantDims {
        PlantDims {
            n: self.a.nrows(),
            m: self.b.ncols(),
            p: self.c.nrows(),
        }
    }

    pub fn tau_d(&self) -> usize {
        self.tau_d
    }

    pub fn state(&self) -> &DVector<T> {
        &self.x
    }

    /// Apply input `u`, returning y(t). The output is computed from the
    /// current state before the state update.
    pub fn step(&mut self, u: &DVector<T>) -> Result<DVector<T>> {
        let m = self.b.ncols();
        if u.len() != m {
            return Err(Error::DimMismatch {
                context: "plant step input",
                expected: m,
                got: u.len(),
            });
        }
        let u_eff = if self.tau_d == 0 {
            u.clone()
        } else {
            let delayed = self.delay_buffer.pop_front().expect("buffer holds tau_d inputs");
            self.delay_buffer.push_back(u.clone());
            delayed
        };
        let y = &self.c * &self.x + &self.d * &u_eff;
        self.x = &self.a * &self.x + &self.b * &u_eff;
        Ok(y)
    }

    /// Set the state and the delay buffer exactly; subsequent trajectories
    /// are a deterministic function of the inputs.
    pub fn reset(&mut self, x0: &DVector<T>, buffer0: &[DVector<T>]) -> Result<()> {
        let n = self.a.nrows();
        let m = self.b.ncols();
        if x0.len() != n {
            return Err(Error::DimMismatch {
                context: "plant reset state",
                expected: n,
                got: x0.len(),
            });
        }
        if buffer0.len() != self.tau_d {
            return Err(Error::DimMismatch {
                context: "plant reset delay buffer",
                expected: self.tau_d,
                got: buffer0.len(),
            });
        }
        for u in buffer0 {
            if u.len() != m {
                return Err(Error::DimMismatch {
                    context: "plant reset buffered input",
                    expected: m,
                    got: u.len(),
                });
            }
        }
        self.x = x0.clone();
        self.delay_buffer = buffer0.iter().cloned().collect();
        Ok(())
    }

    /// Delay-free plant over the augmented state [x; d], where d stacks the
    /// buffered inputs oldest first. Its input-output map is identical to the
    /// delayed plant; used only for testing the equivalence.
    pub fn augment(&self) -> Result<Self> {
        if self.tau_d == 0 {
            return Err(Error::InvalidArgument(
                "augment requires tau_d >= 1 (nothing to augment)".into(),
            ));
        }
        let PlantDims { n, m, p } = self.dims();
        let tau = self.tau_d;
        let na = n + m * tau;

        let mut a_aug = DMatrix::<T>::zeros(na, na);
        a_aug.view_mut((0, 0), (n, n)).copy_from(&self.a);
        // x(t+1) picks up the oldest buffered input d_1.
        a_aug.view_mut((0, n), (n, m)).copy_from(&self.b);
        // Buffer shift: new d_i = old d_{i+1}.
        for i in 0..tau - 1 {
            let r = n + i * m;
            let c = n + (i + 1) * m;
            a_aug
                .view_mut((r, c), (m, m))
                .copy_from(&DMatrix::identity(m, m));
        }

        let mut b_aug = DMatrix::<T>::zeros(na, m);
        b_aug
            .view_mut((n + (tau - 1) * m, 0), (m, m))
            .copy_from(&DMatrix::identity(m, m));

        // y(t) = C x(t) + D d_1(t); no direct feedthrough from u(t).
        let mut c_aug = DMatrix::<T>::zeros(p, na);
        c_aug.view_mut((0, 0), (p, n)).copy_from(&self.c);
        c_aug.view_mut((0, n), (p, m)).copy_from(&self.d);
        let d_aug = DMatrix::<T>::zeros(p, m);

        let mut plant = Self::new(a_aug, b_aug, c_aug, d_aug, 0)?;
        let mut x0 = DVector::zeros(na);
        x0.rows_mut(0, n).copy_from(&self.x);
        for (i, u) in self.delay_buffer.iter().enumerate() {
            x0.rows_mut(n + i * m, m).copy_from(u);
        }
        plant.reset(&x0, &[])?;
        Ok(plant)
    }
}
