//! Finite-difference differentiation matrix for first derivatives along
//! the time axis: second-order central stencils in the interior, one-sided
//! second-order stencils at both ends.

use crate::error::GridError;
use crate::grid::Grid3;

/// The n x n first-derivative operator for a uniform grid with step `dt`,
/// stored as its three-point stencils rather than a dense matrix.
///
/// Row 0 holds (-3/2, 2, -1/2)/dt on columns (0, 1, 2); row n-1 holds
/// (1/2, -2, 3/2)/dt on columns (n-3, n-2, n-1); interior row i holds
/// (-1/2, 0, 1/2)/dt on (i-1, i, i+1). Every row sums to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct FdMatrix {
    n: usize,
    dt: f64,
}

impl FdMatrix {
    /// Build the operator. Needs `n >= 3` (the boundary stencils use three
    /// points) and `dt > 0`.
    pub fn new(n: usize, dt: f64) -> Result<Self, GridError> {
        if n < 3 {
            return Err(GridError::InvalidArgument {
                op: "build_fd_matrix",
                what: format!("n must be >= 3, got {n}"),
            });
        }
        if !(dt > 0.0) {
            return Err(GridError::InvalidArgument {
                op: "build_fd_matrix",
                what: format!("dt must be > 0, got {dt}"),
            });
        }
        Ok(FdMatrix { n, dt })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Apply to a contiguous series: `out = Phi_t * u`.
    pub fn apply_series(&self, u: &[f64], out: &mut [f64]) {
        assert_eq!(u.len(), self.n);
        assert_eq!(out.len(), self.n);
        let n = self.n;
        let inv_dt = 1.0 / self.dt;
        let half = 0.5 * inv_dt;
        out[0] = (-1.5 * u[0] + 2.0 * u[1] - 0.5 * u[2]) * inv_dt;
        for i in 1..n - 1 {
            out[i] = (u[i + 1] - u[i - 1]) * half;
        }
        out[n - 1] = (0.5 * u[n - 3] - 2.0 * u[n - 2] + 1.5 * u[n - 1]) * inv_dt;
    }

    /// Apply the transpose to a contiguous series: `out = Phi_t^T * g`.
    /// This is the adjoint used by the backward pass.
    pub fn apply_transpose_series(&self, g: &[f64], out: &mut [f64]) {
        assert_eq!(g.len(), self.n);
        assert_eq!(out.len(), self.n);
        let n = self.n;
        let inv_dt = 1.0 / self.dt;
        let half = 0.5 * inv_dt;
        out.fill(0.0);
        // Row 0 scatter.
        out[0] += -1.5 * inv_dt * g[0];
        out[1] += 2.0 * inv_dt * g[0];
        out[2] += -0.5 * inv_dt * g[0];
        // Interior rows.
        for i in 1..n - 1 {
            out[i - 1] += -half * g[i];
            out[i + 1] += half * g[i];
        }
        // Row n-1 scatter.
        out[n - 3] += 0.5 * inv_dt * g[n - 1];
        out[n - 2] += -2.0 * inv_dt * g[n - 1];
        out[n - 1] += 1.5 * inv_dt * g[n - 1];
    }

    /// Differentiate every `(entry, channel)` lane of a grid along time.
    /// The grid's time length must equal `n`.
    pub fn apply_grid(&self, u: &Grid3) -> Result<Grid3, GridError> {
        let (b, t, c) = u.shape();
        if t != self.n {
            return Err(GridError::TimeMismatch {
                op: "differentiate",
                left_t: t,
                right_t: self.n,
            });
        }
        let mut out = Grid3::zeros(b, t, c);
        let mut lane = vec![0.0; t];
        let mut dlane = vec![0.0; t];
        for bi in 0..b {
            for ci in 0..c {
                for ti in 0..t {
                    lane[ti] = u.at(bi, ti, ci);
                }
                self.apply_series(&lane, &mut dlane);
                for ti in 0..t {
                    out.set(bi, ti, ci, dlane[ti]);
                }
            }
        }
        Ok(out)
    }

    /// Apply twice: `x_tt = Phi_t (Phi_t u)`.
    pub fn apply_grid_twice(&self, u: &Grid3) -> Result<Grid3, GridError> {
        let once = self.apply_grid(u)?;
        self.apply_grid(&once)
    }

    /// Dense n x n matrix, for tests and inspection.
    pub fn dense(&self) -> Vec<Vec<f64>> {
        let n = self.n;
        let inv_dt = 1.0 / self.dt;
        let mut m = vec![vec![0.0; n]; n];
        m[0][0] = -1.5 * inv_dt;
        m[0][1] = 2.0 * inv_dt;
        m[0][2] = -0.5 * inv_dt;
        for i in 1..n - 1 {
            m[i][i - 1] = -0.5 * inv_dt;
            m[i][i + 1] = 0.5 * inv_dt;
        }
        m[n - 1][n - 3] = 0.5 * inv_dt;
        m[n - 1][n - 2] = -2.0 * inv_dt;
        m[n - 1][n - 1] = 1.5 * inv_dt;
        m
    }
}
