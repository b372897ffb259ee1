//! Matrix aliases, steering vectors and the FFT plumbing shared by the
//! synthesis and estimation code.
//!
//! All DFTs exposed here are unitary (`1/sqrt(n)` in both directions).

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::params::ScenarioConfig;

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

pub(crate) const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[inline]
pub(crate) fn cis(theta: f64) -> Complex64 {
    Complex64::from_polar(1.0, theta)
}

/// Frequency-domain steering vector `b[n] = exp(-j 2 pi n delta_f tau)`.
pub fn delay_steering(n: usize, delta_f: f64, tau: f64) -> CVector {
    CVector::from_fn(n, |k, _| cis(-2.0 * PI * k as f64 * delta_f * tau))
}

/// Temporal steering vector `c[m] = exp(-j 2 pi m f_d T_s)`.
pub fn doppler_steering(m: usize, fd: f64, ts: f64) -> CVector {
    CVector::from_fn(m, |k, _| cis(-2.0 * PI * k as f64 * fd * ts))
}

/// `b(tau) c^H(f_d)` for the configured grid.
pub fn steering_outer(cfg: &ScenarioConfig, tau: f64, fd: f64) -> CMatrix {
    let b = delay_steering(cfg.n, cfg.delta_f, tau);
    let c = doppler_steering(cfg.m, fd, cfg.total_symbol_time());
    &b * c.adjoint()
}

/// Squared Frobenius norm.
pub fn energy(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum()
}

/// `Y .* conj(S)`.
pub fn strip_symbols(y: &CMatrix, s: &CMatrix) -> CMatrix {
    y.zip_map(s, |a, b| a * b.conj())
}

/// Relative Frobenius distance `||a - b|| / ||b||`.
pub fn relative_error(a: &CMatrix, b: &CMatrix) -> f64 {
    let diff: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm_sqr()).sum();
    (diff / energy(b)).sqrt()
}

/// Cached FFT plans for an `n x m` grid with unitary helpers along either axis.
#[derive(Clone)]
pub struct GridFft {
    n: usize,
    m: usize,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for GridFft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "GridFft({}x{})", self.n, self.m)
    }
}

impl GridFft {
    pub fn new(n: usize, m: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n,
            m,
            col_fwd: planner.plan_fft_forward(n),
            col_inv: planner.plan_fft_inverse(n),
            row_fwd: planner.plan_fft_forward(m),
            row_inv: planner.plan_fft_inverse(m),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.n, self.m)
    }

    /// Unnormalized transform of every column (length `n`).
    pub fn columns_raw(&self, x: &mut CMatrix, inverse: bool) {
        debug_assert_eq!(x.nrows(), self.n);
        let plan = if inverse { &self.col_inv } else { &self.col_fwd };
        let mut scratch = vec![ZERO; plan.get_inplace_scratch_len()];
        plan.process_with_scratch(x.as_mut_slice(), &mut scratch);
    }

    /// Unnormalized transform of every row (length `m`).
    pub fn rows_raw(&self, x: &mut CMatrix, inverse: bool) {
        debug_assert_eq!(x.ncols(), self.m);
        let plan = if inverse { &self.row_inv } else { &self.row_fwd };
        let (rows, cols) = (x.nrows(), x.ncols());
        let mut buf = vec![ZERO; cols];
        let mut scratch = vec![ZERO; plan.get_inplace_scratch_len()];
        let data = x.as_mut_slice();
        for r in 0..rows {
            for c in 0..cols {
                buf[c] = data[r + c * rows];
            }
            plan.process_with_scratch(&mut buf, &mut scratch);
            for c in 0..cols {
                data[r + c * rows] = buf[c];
            }
        }
    }

    pub fn columns_unitary(&self, x: &mut CMatrix, inverse: bool) {
        self.columns_raw(x, inverse);
        let s = (self.n as f64).sqrt().recip();
        x.iter_mut().for_each(|z| *z *= s);
    }

    pub fn rows_unitary(&self, x: &mut CMatrix, inverse: bool) {
        self.rows_raw(x, inverse);
        let s = (self.m as f64).sqrt().recip();
        x.iter_mut().for_each(|z| *z *= s);
    }

    /// Unnormalized 2-D transform.
    pub fn full_raw(&self, x: &mut CMatrix, inverse: bool) {
        self.columns_raw(x, inverse);
        self.rows_raw(x, inverse);
    }

    /// Applies the ISI/ICI phase matrix of a target with `excess` lost samples
    /// to every column of `x`, i.e. `F diag(w) F^H x` with `w[i] = 1` for
    /// `i < excess`. Uses FFTs instead of the dense `N x N` product.
    pub fn apply_phase_matrix(&self, x: &mut CMatrix, excess: usize) {
        if excess == 0 {
            x.fill(ZERO);
            return;
        }
        if excess >= self.n {
            return;
        }
        self.columns_raw(x, true);
        let n = self.n;
        for col in x.as_mut_slice().chunks_mut(n) {
            col[excess..].fill(ZERO);
        }
        self.columns_raw(x, false);
        let s = (n as f64).recip();
        x.iter_mut().for_each(|z| *z *= s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_dft(x: &[Complex64], sign: f64) -> Vec<Complex64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(i, v)| v * cis(sign * 2.0 * PI * (k * i) as f64 / n as f64))
                    .sum::<Complex64>()
                    / (n as f64).sqrt()
            })
            .collect()
    }

    #[test]
    fn unitary_transforms_match_direct_sums() {
        let x = CMatrix::from_fn(6, 4, |r, c| Complex64::new(r as f64 - 1.5, (c * r) as f64 * 0.3));
        let fft = GridFft::new(6, 4);
        let mut cols = x.clone();
        fft.columns_unitary(&mut cols, false);
        for c in 0..4 {
            let want = naive_dft(x.column(c).as_slice(), -1.0);
            for r in 0..6 {
                assert!((cols[(r, c)] - want[r]).norm() < 1e-12);
            }
        }
        let mut rows = x.clone();
        fft.rows_unitary(&mut rows, true);
        for r in 0..6 {
            let line: Vec<_> = (0..4).map(|c| x[(r, c)]).collect();
            let want = naive_dft(&line, 1.0);
            for c in 0..4 {
                assert!((rows[(r, c)] - want[c]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn steering_vectors_start_at_one() {
        let b = delay_steering(8, 120e3, 3.1e-6);
        let c = doppler_steering(5, 900.0, 8.9e-6);
        assert_eq!(b[0], Complex64::new(1.0, 0.0));
        assert_eq!(c[0], Complex64::new(1.0, 0.0));
        assert!((b[3] - cis(-2.0 * PI * 3.0 * 120e3 * 3.1e-6)).norm() < 1e-15);
    }
}
