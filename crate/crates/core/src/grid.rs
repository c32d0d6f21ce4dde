//! Discretization backbone: frequency/time grids, quadrature weights and the
//! symplectic Fourier transform between the two bases.
//!
//! Conventions used throughout the crate:
//!
//! * Frequency grids hold angular-frequency *offsets* from a carrier; the
//!   absolute carrier only enters explicitly frequency-dependent phases.
//! * Kernels are stored "weight-embedded": entry (i,j) carries a factor
//!   sqrt(w_i w_j), so operator composition is a plain matrix product and
//!   Hilbert-Schmidt norms are plain Frobenius norms.
//! * The forward single-argument transform is
//!   `f~(t) = (2 pi)^{-1/2} Integral dw e^{-i w t} f(w)`,
//!   fixed so that a linear spectral phase `exp(i w tau)` delays by `+tau`.
//!   Pair (anomalous) kernels transform with this kernel on *both* arguments,
//!   which sends the pump direction `w_+` to the mean arrival time `t_+`;
//!   normal (population) kernels transform with the adjoint on the second
//!   argument. Conjugated-slot quantities use the conjugate kernel.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::linalg::C64;

const REL_TOL: f64 = 1e-9;

/// Uniform grid of angular-frequency offsets with trapezoidal weights.
#[derive(Debug, Clone)]
pub struct FrequencyGrid {
    /// Offsets from the carrier (rad/s), strictly increasing.
    pub points: Array1<f64>,
    /// Quadrature weights (rad/s), strictly positive.
    pub weights: Array1<f64>,
    /// Absolute carrier angular frequency (rad/s).
    pub carrier: f64,
}

/// Uniform time grid with rectangle-rule weights.
#[derive(Debug, Clone)]
pub struct TimeGrid {
    /// Times (s), strictly increasing.
    pub points: Array1<f64>,
    /// Quadrature weights (s), strictly positive.
    pub weights: Array1<f64>,
}

fn validate_axis(points: &Array1<f64>, weights: &Array1<f64>) -> Result<()> {
    if points.len() != weights.len() || points.len() < 2 {
        return Err(Error::Grid("grid needs at least two points".into()));
    }
    if !points.iter().all(|x| x.is_finite()) || !weights.iter().all(|w| w.is_finite()) {
        return Err(Error::Grid("non-finite grid data".into()));
    }
    if points.windows(2).into_iter().any(|w| w[1] <= w[0]) {
        return Err(Error::Grid("grid points must be strictly increasing".into()));
    }
    if weights.iter().any(|&w| w <= 0.0) {
        return Err(Error::Grid("grid weights must be strictly positive".into()));
    }
    Ok(())
}

/// Uniform frequency grid symmetric about zero offset, trapezoidal weights.
pub fn make_grid(center: f64, half_width: f64, n_points: usize) -> Result<FrequencyGrid> {
    if !center.is_finite() || !half_width.is_finite() {
        return Err(Error::Grid("non-finite grid parameters".into()));
    }
    if n_points < 2 {
        return Err(Error::Grid("grid needs n_points >= 2".into()));
    }
    if half_width <= 0.0 {
        return Err(Error::Grid("half_width must be positive".into()));
    }
    let n = n_points;
    let step = 2.0 * half_width / (n as f64 - 1.0);
    let points = Array1::from_iter((0..n).map(|k| -half_width + step * k as f64));
    let mut weights = Array1::from_elem(n, step);
    weights[0] = 0.5 * step;
    weights[n - 1] = 0.5 * step;
    let g = FrequencyGrid { points, weights, carrier: center };
    validate_axis(&g.points, &g.weights)?;
    debug_assert!({
        let covered = 2.0 * half_width;
        (g.weights.sum() - covered).abs() <= 1e-12 * covered
    });
    Ok(g)
}

impl FrequencyGrid {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn step(&self) -> f64 {
        (self.points[self.points.len() - 1] - self.points[0]) / (self.points.len() as f64 - 1.0)
    }

    /// Span covered by the grid cells (n * step).
    pub fn cell_span(&self) -> f64 {
        self.step() * self.points.len() as f64
    }

    /// Build a non-uniform view keeping only the masked points (used by the
    /// WDM reduction). Keeps the original per-point weights: this is the
    /// discrete orthogonal projection.
    pub fn masked(&self, keep: &[usize]) -> Result<FrequencyGrid> {
        if keep.is_empty() || keep.len() < 2 {
            return Err(Error::Grid("masked grid needs at least two points".into()));
        }
        let points = Array1::from_iter(keep.iter().map(|&i| self.points[i]));
        let weights = Array1::from_iter(keep.iter().map(|&i| self.weights[i]));
        validate_axis(&points, &weights)?;
        Ok(FrequencyGrid { points, weights, carrier: self.carrier })
    }

    fn is_uniform(&self) -> bool {
        let step = self.step();
        self.points
            .windows(2)
            .into_iter()
            .all(|w| ((w[1] - w[0]) - step).abs() <= REL_TOL * step.abs().max(1e-300))
    }
}

impl TimeGrid {
    /// Uniform grid `start + k*step`, rectangle weights. Rectangle weights keep
    /// integer-step delays exact; functions are assumed negligible at the ends.
    pub fn uniform(start: f64, step: f64, n: usize) -> Result<TimeGrid> {
        if !(start.is_finite() && step.is_finite()) || step <= 0.0 || n < 2 {
            return Err(Error::Grid("invalid uniform time grid parameters".into()));
        }
        let points = Array1::from_iter((0..n).map(|k| start + step * k as f64));
        let weights = Array1::from_elem(n, step);
        Ok(TimeGrid { points, weights })
    }

    /// DFT-dual companion of a frequency grid: same point count, spacing
    /// `2 pi / (n * dw)`, starting at `start`.
    pub fn dual_to(freq: &FrequencyGrid, start: f64) -> Result<TimeGrid> {
        let n = freq.len();
        let dt = 2.0 * PI / (n as f64 * freq.step());
        TimeGrid::uniform(start, dt, n)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn step(&self) -> f64 {
        (self.points[self.points.len() - 1] - self.points[0]) / (self.points.len() as f64 - 1.0)
    }

    pub fn cell_span(&self) -> f64 {
        self.step() * self.points.len() as f64
    }

    /// Integer number of grid steps equivalent to `delay`; errors when the
    /// delay is not commensurate with the grid.
    pub fn shift_steps(&self, delay: f64) -> Result<i64> {
        let dt = self.step();
        let steps = delay / dt;
        let rounded = steps.round();
        if (steps - rounded).abs() > 1e-6 {
            return Err(Error::Grid(format!(
                "delay {delay:.6e} s is not a multiple of the grid step {dt:.6e} s"
            )));
        }
        Ok(rounded as i64)
    }

    /// Index range covering the half-open interval [t0, t1).
    pub fn interval_indices(&self, t0: f64, t1: f64) -> std::ops::Range<usize> {
        let dt = self.step();
        let start = self.points[0];
        let lo = ((t0 - start) / dt).ceil().max(0.0) as usize;
        let hi = (((t1 - start) / dt).ceil().max(0.0) as usize).min(self.len());
        lo.min(self.len())..hi
    }
}

/// Which axis a kernel dimension lives on.
#[derive(Debug, Clone)]
pub enum AxisGrid {
    Freq(Arc<FrequencyGrid>),
    Time(Arc<TimeGrid>),
}

impl AxisGrid {
    pub fn len(&self) -> usize {
        match self {
            AxisGrid::Freq(g) => g.len(),
            AxisGrid::Time(g) => g.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn points(&self) -> &Array1<f64> {
        match self {
            AxisGrid::Freq(g) => &g.points,
            AxisGrid::Time(g) => &g.points,
        }
    }

    pub fn weights(&self) -> &Array1<f64> {
        match self {
            AxisGrid::Freq(g) => &g.weights,
            AxisGrid::Time(g) => &g.weights,
        }
    }

    pub fn is_frequency(&self) -> bool {
        matches!(self, AxisGrid::Freq(_))
    }

    pub fn same_axis(&self, other: &AxisGrid) -> bool {
        if self.len() != other.len() {
            return false;
        }
        let (a, b) = (self.points(), other.points());
        let scale = a[a.len() - 1].abs().max(a[0].abs()).max(1e-300);
        a.iter()
            .zip(b.iter())
            .all(|(x, y)| (x - y).abs() <= 1e-9 * scale)
            && self.is_frequency() == other.is_frequency()
    }
}

/// Discretized two-argument kernel (integral operator).
#[derive(Debug, Clone)]
pub struct DiscretizedKernel {
    pub data: Array2<C64>,
    pub row: AxisGrid,
    pub col: AxisGrid,
    pub weight_embedded: bool,
}

/// Block role for the symplectic transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// Anomalous (pair-amplitude) block: both arguments transform forward.
    Pair,
    /// Population block: second argument transforms with the adjoint kernel.
    Normal,
}

impl DiscretizedKernel {
    pub fn new(data: Array2<C64>, row: AxisGrid, col: AxisGrid) -> Result<Self> {
        if data.nrows() != row.len() || data.ncols() != col.len() {
            return Err(Error::Grid("kernel shape does not match grids".into()));
        }
        Ok(DiscretizedKernel { data, row, col, weight_embedded: false })
    }

    pub fn sample<F: Fn(f64, f64) -> C64>(row: AxisGrid, col: AxisGrid, f: F) -> Self {
        let data = Array2::from_shape_fn((row.len(), col.len()), |(i, j)| {
            f(row.points()[i], col.points()[j])
        });
        DiscretizedKernel { data, row, col, weight_embedded: false }
    }

    /// Hilbert-Schmidt norm; quadrature-weighted for plain kernels, plain
    /// Frobenius for weight-embedded ones.
    pub fn hs_norm(&self) -> f64 {
        if self.weight_embedded {
            crate::linalg::hs_norm(&self.data)
        } else {
            let wr = self.row.weights();
            let wc = self.col.weights();
            let mut acc = 0.0;
            for i in 0..self.data.nrows() {
                for j in 0..self.data.ncols() {
                    acc += self.data[[i, j]].norm_sqr() * wr[i] * wc[j];
                }
            }
            acc.sqrt()
        }
    }
}

/// Scale kernel entries by sqrt(w_row w_col) so compositions become matrix
/// products. Rejects kernels that are already embedded.
pub fn embed_weights(kernel: &DiscretizedKernel) -> Result<DiscretizedKernel> {
    if kernel.weight_embedded {
        return Err(Error::Grid("kernel weights already embedded".into()));
    }
    let wr: Vec<f64> = kernel.row.weights().iter().map(|w| w.sqrt()).collect();
    let wc: Vec<f64> = kernel.col.weights().iter().map(|w| w.sqrt()).collect();
    let mut data = kernel.data.clone();
    for ((i, j), v) in data.indexed_iter_mut() {
        *v *= wr[i] * wc[j];
    }
    Ok(DiscretizedKernel {
        data,
        row: kernel.row.clone(),
        col: kernel.col.clone(),
        weight_embedded: true,
    })
}

/// Undo [`embed_weights`].
pub fn unembed_weights(kernel: &DiscretizedKernel) -> Result<DiscretizedKernel> {
    if !kernel.weight_embedded {
        return Err(Error::Grid("kernel weights not embedded".into()));
    }
    let wr: Vec<f64> = kernel.row.weights().iter().map(|w| w.sqrt()).collect();
    let wc: Vec<f64> = kernel.col.weights().iter().map(|w| w.sqrt()).collect();
    let mut data = kernel.data.clone();
    for ((i, j), v) in data.indexed_iter_mut() {
        *v /= wr[i] * wc[j];
    }
    Ok(DiscretizedKernel {
        data,
        row: kernel.row.clone(),
        col: kernel.col.clone(),
        weight_embedded: false,
    })
}

fn nyquist_check(freq: &FrequencyGrid, time: &TimeGrid) -> Result<()> {
    let w_span = freq.cell_span();
    let t_span = time.cell_span();
    let tol = 1.0 + 1e-6;
    if time.step() * w_span > 2.0 * PI * tol {
        return Err(Error::Grid(format!(
            "Nyquist violation: time step {:.3e} s cannot resolve frequency span {:.3e} rad/s",
            time.step(),
            w_span
        )));
    }
    if freq.step() * t_span > 2.0 * PI * tol {
        return Err(Error::Grid(format!(
            "Nyquist violation: frequency step {:.3e} rad/s cannot resolve time span {:.3e} s",
            freq.step(),
            t_span
        )));
    }
    Ok(())
}

/// Dense transform matrix `F[j,k] = exp(-i w_k t_j) sqrt(w_j w_k) / sqrt(2 pi)`
/// acting on weight-embedded vectors. `conjugate` flips the kernel sign
/// (conjugated-slot transform).
pub fn fourier_matrix(freq: &FrequencyGrid, time: &TimeGrid, conjugate: bool) -> Array2<C64> {
    let norm = 1.0 / (2.0 * PI).sqrt();
    let sign = if conjugate { 1.0 } else { -1.0 };
    Array2::from_shape_fn((time.len(), freq.len()), |(j, k)| {
        let phase = sign * freq.points[k] * time.points[j];
        C64::from_polar(norm * (time.weights[j] * freq.weights[k]).sqrt(), phase)
    })
}

fn grids_dual(freq: &FrequencyGrid, time: &TimeGrid) -> bool {
    freq.len() == time.len()
        && freq.is_uniform()
        && {
            let r = freq.step() * time.step() * freq.len() as f64 / (2.0 * PI);
            (r - 1.0).abs() < 1e-9
        }
}

/// Transform the columns of a weight-embedded mode matrix from the frequency
/// to the time basis. Uses an FFT when the grids are DFT-dual, otherwise a
/// dense matrix product. `conjugate` selects the conjugated-slot transform.
pub fn fourier_modes(
    freq: &FrequencyGrid,
    time: &TimeGrid,
    modes: &Array2<C64>,
    conjugate: bool,
) -> Result<Array2<C64>> {
    nyquist_check(freq, time)?;
    if modes.nrows() != freq.len() {
        return Err(Error::Grid("mode matrix rows do not match frequency grid".into()));
    }
    if grids_dual(freq, time) {
        let n = freq.len();
        let mut planner = FftPlanner::<f64>::new();
        let fft = if conjugate { planner.plan_fft_inverse(n) } else { planner.plan_fft_forward(n) };
        let sign = if conjugate { 1.0 } else { -1.0 };
        let norm = 1.0 / (2.0 * PI).sqrt();
        let t0 = time.points[0];
        let w0 = freq.points[0];
        let dw = freq.step();
        let mut out = Array2::zeros((n, modes.ncols()));
        let mut buf: Vec<C64> = vec![C64::new(0.0, 0.0); n];
        for c in 0..modes.ncols() {
            for k in 0..n {
                let tw = C64::from_polar(freq.weights[k].sqrt(), sign * dw * k as f64 * t0);
                buf[k] = modes[[k, c]] * tw;
            }
            fft.process(&mut buf);
            for j in 0..n {
                let post = C64::from_polar(
                    norm * time.weights[j].sqrt(),
                    sign * w0 * time.points[j],
                );
                out[[j, c]] = buf[j] * post;
            }
        }
        Ok(out)
    } else {
        let f = fourier_matrix(freq, time, conjugate);
        Ok(crate::linalg::matmul(&f, modes))
    }
}

fn expect_freq(axis: &AxisGrid) -> Result<Arc<FrequencyGrid>> {
    match axis {
        AxisGrid::Freq(g) => Ok(g.clone()),
        AxisGrid::Time(_) => Err(Error::Grid("kernel axis is not in the frequency basis".into())),
    }
}

/// Symplectic Fourier transform of a weight-embedded frequency-basis kernel
/// onto `target`. Pair blocks transform forward on both arguments; normal
/// blocks with the adjoint on the second argument.
pub fn symplectic_fourier_block(
    kernel: &DiscretizedKernel,
    target: &TimeGrid,
    kind: BlockKind,
) -> Result<DiscretizedKernel> {
    if !kernel.weight_embedded {
        return Err(Error::Grid("symplectic transform requires an embedded kernel".into()));
    }
    let row_freq = expect_freq(&kernel.row)?;
    let col_freq = expect_freq(&kernel.col)?;
    nyquist_check(&row_freq, target)?;
    nyquist_check(&col_freq, target)?;
    let f_row = fourier_matrix(&row_freq, target, false);
    let tmp = crate::linalg::matmul(&f_row, &kernel.data);
    // second argument: psi F^T for pair blocks, psi F^dagger for normal blocks
    let f_col = fourier_matrix(&col_freq, target, false);
    let right = match kind {
        BlockKind::Pair => f_col.t().to_owned(),
        BlockKind::Normal => crate::linalg::adjoint(&f_col),
    };
    let data = crate::linalg::matmul(&tmp, &right);
    let tg = Arc::new(target.clone());
    Ok(DiscretizedKernel {
        data,
        row: AxisGrid::Time(tg.clone()),
        col: AxisGrid::Time(tg),
        weight_embedded: true,
    })
}

/// Pair-block symplectic transform (the JSA case).
pub fn symplectic_fourier(kernel: &DiscretizedKernel, target: &TimeGrid) -> Result<DiscretizedKernel> {
    symplectic_fourier_block(kernel, target, BlockKind::Pair)
}

/// Inverse of [`symplectic_fourier_block`].
pub fn inverse_symplectic_fourier_block(
    kernel: &DiscretizedKernel,
    target: &FrequencyGrid,
    kind: BlockKind,
) -> Result<DiscretizedKernel> {
    if !kernel.weight_embedded {
        return Err(Error::Grid("symplectic transform requires an embedded kernel".into()));
    }
    let row_time = match &kernel.row {
        AxisGrid::Time(g) => g.clone(),
        AxisGrid::Freq(_) => {
            return Err(Error::Grid("kernel axis is not in the time basis".into()))
        }
    };
    let col_time = match &kernel.col {
        AxisGrid::Time(g) => g.clone(),
        AxisGrid::Freq(_) => {
            return Err(Error::Grid("kernel axis is not in the time basis".into()))
        }
    };
    nyquist_check(target, &row_time)?;
    nyquist_check(target, &col_time)?;
    let f_row = fourier_matrix(target, &row_time, false);
    let tmp = crate::linalg::matmul(&crate::linalg::adjoint(&f_row), &kernel.data);
    let f_col = fourier_matrix(target, &col_time, false);
    let right = match kind {
        BlockKind::Pair => f_col.mapv(|z| z.conj()),
        BlockKind::Normal => f_col,
    };
    let data = crate::linalg::matmul(&tmp, &right);
    let tg = Arc::new(target.clone());
    Ok(DiscretizedKernel {
        data,
        row: AxisGrid::Freq(tg.clone()),
        col: AxisGrid::Freq(tg),
        weight_embedded: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn trapezoid_weights_small_grid() {
        let g = make_grid(0.0, 1.0, 3).unwrap();
        assert_eq!(g.points.to_vec(), vec![-1.0, 0.0, 1.0]);
        assert_eq!(g.weights.to_vec(), vec![0.5, 1.0, 0.5]);
    }

    #[test]
    fn weights_sum_to_covered_bandwidth() {
        let w = 3.7e9;
        let g = make_grid(0.0, w, 2).unwrap();
        assert_relative_eq!(g.weights.sum(), 2.0 * w, max_relative = 1e-12);
        let g = make_grid(1.0e15, w, 257).unwrap();
        assert_relative_eq!(g.weights.sum(), 2.0 * w, max_relative = 1e-12);
    }

    #[test]
    fn gaussian_quadrature_oracle() {
        // integral of a unit Gaussian density over a wide grid
        let sigma = 0.8;
        let g = make_grid(0.0, 8.0 * sigma, 129).unwrap();
        let norm = 1.0 / (sigma * (2.0 * PI).sqrt());
        let integral: f64 = g
            .points
            .iter()
            .zip(g.weights.iter())
            .map(|(&x, &w)| w * norm * (-x * x / (2.0 * sigma * sigma)).exp())
            .sum();
        assert!((integral - 1.0).abs() < 1e-6, "integral = {integral}");
    }

    #[test]
    fn make_grid_rejects_bad_input() {
        assert!(make_grid(f64::NAN, 1.0, 8).is_err());
        assert!(make_grid(0.0, -1.0, 8).is_err());
        assert!(make_grid(0.0, f64::INFINITY, 8).is_err());
        assert!(make_grid(0.0, 1.0, 1).is_err());
    }

    fn identity_kernel(g: &Arc<FrequencyGrid>) -> DiscretizedKernel {
        let n = g.len();
        DiscretizedKernel {
            data: Array2::from_shape_fn((n, n), |(i, j)| {
                if i == j { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) }
            }),
            row: AxisGrid::Freq(g.clone()),
            col: AxisGrid::Freq(g.clone()),
            weight_embedded: false,
        }
    }

    #[test]
    fn embed_identity_unit_weights_unchanged() {
        let g = Arc::new(FrequencyGrid {
            points: Array1::from(vec![0.0, 1.0]),
            weights: Array1::from(vec![1.0, 1.0]),
            carrier: 0.0,
        });
        let k = identity_kernel(&g);
        let e = embed_weights(&k).unwrap();
        assert!(e.weight_embedded);
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(e.data[[i, j]].re, k.data[[i, j]].re);
            }
        }
        assert!(embed_weights(&e).is_err());
    }

    #[test]
    fn embed_scales_by_four_for_weight_four() {
        let g = Arc::new(FrequencyGrid {
            points: Array1::from(vec![0.0, 1.0]),
            weights: Array1::from(vec![4.0, 4.0]),
            carrier: 0.0,
        });
        let mut k = identity_kernel(&g);
        k.data[[0, 1]] = C64::new(2.0, -1.0);
        let e = embed_weights(&k).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(e.data[[i, j]].re, 4.0 * k.data[[i, j]].re);
                assert_relative_eq!(e.data[[i, j]].im, 4.0 * k.data[[i, j]].im);
            }
        }
    }

    #[test]
    fn rank_one_composition_matches_gaussian_integrals() {
        // kernel f(w) g(w'), f,g Gaussians; trace of K K^dag equals
        // (int |f|^2)(int |g|^2)
        let g = Arc::new(make_grid(0.0, 6.0, 201).unwrap());
        let (sf, sg) = (0.7, 1.3);
        let k = DiscretizedKernel::sample(AxisGrid::Freq(g.clone()), AxisGrid::Freq(g.clone()), |x, y| {
            C64::new((-x * x / (2.0 * sf * sf)).exp() * (-y * y / (2.0 * sg * sg)).exp(), 0.0)
        });
        let e = embed_weights(&k).unwrap();
        let prod = crate::linalg::matmul(&e.data, &crate::linalg::adjoint(&e.data));
        let trace: f64 = (0..prod.nrows()).map(|i| prod[[i, i]].re).sum();
        let int_f2 = sf * PI.sqrt(); // int exp(-x^2/s^2) = s sqrt(pi)
        let int_g2 = sg * PI.sqrt();
        assert_relative_eq!(trace, int_f2 * int_g2, max_relative = 1e-8);
    }

    fn gaussian_pair_kernel(
        g: &Arc<FrequencyGrid>,
        d_plus: f64,
        d_minus: f64,
    ) -> DiscretizedKernel {
        DiscretizedKernel::sample(AxisGrid::Freq(g.clone()), AxisGrid::Freq(g.clone()), |a, b| {
            let wp = a + b;
            let wm = a - b;
            C64::new(
                (-wp * wp / (2.0 * d_plus * d_plus)).exp() * (-wm * wm / (2.0 * d_minus * d_minus)).exp(),
                0.0,
            )
        })
    }

    #[test]
    fn fourier_of_narrowband_pump_is_flat_along_t_plus() {
        // delta-like in w_+ -> nearly constant along t_+
        let g = Arc::new(make_grid(0.0, 40.0, 256).unwrap());
        let k = embed_weights(&gaussian_pair_kernel(&g, 0.05, 8.0)).unwrap();
        let t = TimeGrid::dual_to(&g, -0.5 * 2.0 * PI / g.step()).unwrap();
        let kt = symplectic_fourier(&k, &t).unwrap();
        let plain = unembed_weights(&kt).unwrap();
        // compare |psi(t,t)| at several points along the diagonal (t_+ direction)
        let n = t.len();
        let mid = plain.data[[n / 2, n / 2]].norm();
        let off = plain.data[[n / 2 + n / 8, n / 2 + n / 8]].norm();
        assert!(mid > 0.0);
        assert!((off / mid - 1.0).abs() < 0.05, "ratio {}", off / mid);
    }

    #[test]
    fn gaussian_fourier_pair_widths() {
        let d_plus = 1.4;
        let d_minus = 6.0;
        let g = Arc::new(make_grid(0.0, 40.0, 256).unwrap());
        let k = embed_weights(&gaussian_pair_kernel(&g, d_plus, d_minus)).unwrap();
        let t = TimeGrid::dual_to(&g, -0.5 * 2.0 * PI / g.step()).unwrap();
        let kt = symplectic_fourier(&k, &t).unwrap();
        let plain = unembed_weights(&kt).unwrap();
        // second moments of |psi|^2 along t_+ and t_- directions
        let (mut m0, mut mp, mut mm) = (0.0, 0.0, 0.0);
        for (i, &ta) in t.points.iter().enumerate() {
            for (j, &tb) in t.points.iter().enumerate() {
                let p = plain.data[[i, j]].norm_sqr();
                let tp = ta + tb;
                let tm = ta - tb;
                m0 += p;
                mp += p * tp * tp;
                mm += p * tm * tm;
            }
        }
        // exp(-wp^2/(2 dp^2)) -> time kernel exp(-tp^2 dp^2 / 8)-type: the
        // analytic standard deviations of |psi~|^2 in t_{+,-} are 1/d_{+,-}
        // up to the common sqrt(2) bookkeeping, so the *ratio* check below
        // pins both widths against 1/d.
        let sp = (mp / m0).sqrt();
        let sm = (mm / m0).sqrt();
        let expect_sp = 2.0f64.sqrt() / d_plus;
        let expect_sm = 2.0f64.sqrt() / d_minus;
        assert!((sp / expect_sp - 1.0).abs() < 0.01, "sp {sp} vs {expect_sp}");
        assert!((sm / expect_sm - 1.0).abs() < 0.01, "sm {sm} vs {expect_sm}");
    }

    #[test]
    fn parseval_and_round_trip() {
        let g = Arc::new(make_grid(0.0, 30.0, 128).unwrap());
        let k = embed_weights(&gaussian_pair_kernel(&g, 1.0, 5.0)).unwrap();
        let t = TimeGrid::dual_to(&g, -0.5 * 2.0 * PI / g.step()).unwrap();
        let kt = symplectic_fourier(&k, &t).unwrap();
        let n_f = crate::linalg::hs_norm(&k.data);
        let n_t = crate::linalg::hs_norm(&kt.data);
        assert_relative_eq!(n_f, n_t, max_relative = 1e-10);
        let back = inverse_symplectic_fourier_block(&kt, &g, BlockKind::Pair).unwrap();
        let diff = (&back.data - &k.data).mapv(|z| z.norm()).into_iter().fold(0.0, f64::max);
        assert!(diff < 1e-9 * crate::linalg::max_abs(&k.data), "round trip diff {diff}");
    }

    #[test]
    fn nyquist_violation_reported() {
        let g = Arc::new(make_grid(0.0, 30.0, 64).unwrap());
        let k = embed_weights(&gaussian_pair_kernel(&g, 1.0, 5.0)).unwrap();
        // far too coarse a time grid for this bandwidth
        let t = TimeGrid::uniform(-1.0, 1.0, 16).unwrap();
        assert!(symplectic_fourier(&k, &t).is_err());
    }

    #[test]
    fn delay_phase_shifts_time_kernel() {
        // linear spectral phase exp(i w tau) on both arguments delays the
        // time kernel by +tau on both axes
        let g = Arc::new(make_grid(0.0, 20.0, 128).unwrap());
        let t = TimeGrid::dual_to(&g, -0.5 * 2.0 * PI / g.step()).unwrap();
        let tau = 8.0 * t.step();
        let base = embed_weights(&gaussian_pair_kernel(&g, 1.0, 4.0)).unwrap();
        let mut delayed = base.clone();
        for ((i, j), v) in delayed.data.indexed_iter_mut() {
            let ph = (g.points[i] + g.points[j]) * tau;
            *v *= C64::from_polar(1.0, ph);
        }
        let kt0 = symplectic_fourier(&base, &t).unwrap();
        let kt1 = symplectic_fourier(&delayed, &t).unwrap();
        let steps = t.shift_steps(tau).unwrap() as usize;
        let n = t.len();
        let mut max_diff = 0.0f64;
        for i in steps..n {
            for j in steps..n {
                max_diff = max_diff.max((kt1.data[[i, j]] - kt0.data[[i - steps, j - steps]]).norm());
            }
        }
        assert!(max_diff < 1e-9 * crate::linalg::max_abs(&kt0.data), "shift mismatch {max_diff}");
    }

    #[test]
    fn fft_path_matches_dense_path() {
        let g = Arc::new(make_grid(0.0, 25.0, 128).unwrap());
        let t = TimeGrid::dual_to(&g, -0.37 * 2.0 * PI / g.step()).unwrap();
        let modes = Array2::from_shape_fn((g.len(), 3), |(i, c)| {
            let x = g.points[i];
            C64::new((-x * x / (2.0 + c as f64)).exp(), 0.1 * x.sin())
        });
        // embed weights into columns
        let mut emb = modes.clone();
        for ((i, _), v) in emb.indexed_iter_mut() {
            *v *= g.weights[i].sqrt();
        }
        for conj in [false, true] {
            let fast = fourier_modes(&g, &t, &emb, conj).unwrap();
            let dense = crate::linalg::matmul(&fourier_matrix(&g, &t, conj), &emb);
            let diff = (&fast - &dense).mapv(|z| z.norm()).into_iter().fold(0.0, f64::max);
            assert!(diff < 1e-10, "fft/dense mismatch {diff} (conj={conj})");
        }
    }

    #[test]
    fn quadrature_convergence_is_second_order() {
        // compose two kernels with non-vanishing boundary values so the
        // trapezoid boundary error dominates; halving the spacing should
        // reduce the composition error by ~4.
        let reference = {
            let g = Arc::new(make_grid(0.0, 2.0, 4097).unwrap());
            composition_value(&g)
        };
        let errs: Vec<f64> = [65usize, 129, 257]
            .iter()
            .map(|&n| {
                let g = Arc::new(make_grid(0.0, 2.0, n).unwrap());
                (composition_value(&g) - reference).abs()
            })
            .collect();
        let r1 = errs[0] / errs[1];
        let r2 = errs[1] / errs[2];
        assert!(r1 > 3.0 && r1 < 5.0, "ratio1 {r1} errs {errs:?}");
        assert!(r2 > 3.0 && r2 < 5.0, "ratio2 {r2} errs {errs:?}");
    }

    fn composition_value(g: &Arc<FrequencyGrid>) -> f64 {
        // trace of K K^dag = quadrature of |k|^2; kernel truncated at +-2
        // sigma so boundary derivatives are nonzero
        let mut acc = 0.0;
        for (i, (&x, &wx)) in g.points.iter().zip(g.weights.iter()).enumerate() {
            let _ = i;
            for (&y, &wy) in g.points.iter().zip(g.weights.iter()) {
                let k = (-(x * x + y * y) / 2.0).exp() * (1.0 + 0.3 * x * y);
                acc += k * k * wx * wy;
            }
        }
        acc
    }
}
