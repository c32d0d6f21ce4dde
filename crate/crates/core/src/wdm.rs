//! Spectral reduction for the type-0 path: iterated-kernel bandwidth
//! bookkeeping, restriction of the JSA to the frequencies that can affect
//! the wavelength channels, the post-WDM covariance and the
//! channel-asymmetry coincidence study.

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::covariance::{
    covariance_series_kernel, gain_for_mu, schmidt_kernel, vacuum_probability, BlockWeight,
    CovarianceForm, ProcessType, RenormalizedCovariance, SchmidtOptions,
};
use crate::error::{Error, Result};
use crate::grid::{AxisGrid, DiscretizedKernel, FrequencyGrid};
use crate::jsa::{ChannelTransmission, JointSpectralAmplitude};
use crate::linalg::{self, C64};

/// Relative magnitude threshold for support checks (band checks cannot use
/// exact zeros since smooth tails never vanish).
pub const SUPPORT_REL_THRESHOLD: f64 = 1e-10;

/// Default truncation order of the covariance expansion.
pub const DEFAULT_ORDER: usize = 5;

/// A pair of WDM channels with the interval bookkeeping of the reduction.
#[derive(Debug, Clone)]
pub struct ChannelPair {
    pub channel_a: ChannelTransmission,
    pub channel_b: ChannelTransmission,
    /// Alice interval [a_lo, a_hi], entirely at nonpositive offsets.
    pub a_bounds: (f64, f64),
    /// Bob interval [b_lo, b_hi], entirely at nonnegative offsets.
    pub b_bounds: (f64, f64),
    /// Innermost channel bound min(-a_hi, b_lo).
    pub c_inner: f64,
    /// Outermost channel bound max(-a_lo, b_hi).
    pub c_outer: f64,
}

impl ChannelPair {
    pub fn new(channel_a: ChannelTransmission, channel_b: ChannelTransmission) -> Result<Self> {
        let a_bounds = channel_a.nominal_bounds;
        let b_bounds = channel_b.nominal_bounds;
        if !(a_bounds.0 <= a_bounds.1 && a_bounds.1 <= 0.0) {
            return Err(Error::Wdm(format!(
                "channel A must lie at nonpositive offsets (bounds {:.3e}..{:.3e})",
                a_bounds.0, a_bounds.1
            )));
        }
        if !(0.0 <= b_bounds.0 && b_bounds.0 <= b_bounds.1) {
            return Err(Error::Wdm(format!(
                "channel B must lie at nonnegative offsets (bounds {:.3e}..{:.3e})",
                b_bounds.0, b_bounds.1
            )));
        }
        let c_inner = (-a_bounds.1).min(b_bounds.0);
        let c_outer = (-a_bounds.0).max(b_bounds.1);
        Ok(ChannelPair { channel_a, channel_b, a_bounds, b_bounds, c_inner, c_outer })
    }

    /// Shift channel A by `offset` (rad/s), keeping B fixed.
    pub fn with_channel_a_offset(&self, offset: f64) -> Result<ChannelPair> {
        ChannelPair::new(self.channel_a.shifted(offset), self.channel_b.clone())
    }
}

/// n-fold alternating composition psi psi^dag psi ... as embedded matrix
/// products (n = 1 is psi itself).
pub fn iterated_kernel(jsa: &JointSpectralAmplitude, n: usize) -> Result<DiscretizedKernel> {
    if n < 1 {
        return Err(Error::Wdm("iterated kernel needs n >= 1".into()));
    }
    let psi = &jsa.kernel;
    let mut data = psi.data.clone();
    let mut row = psi.row.clone();
    let mut col = psi.col.clone();
    for k in 2..=n {
        if k % 2 == 0 {
            data = linalg::matmul(&data, &linalg::adjoint(&psi.data));
            col = psi.row.clone();
        } else {
            data = linalg::matmul(&data, &psi.data);
            col = psi.col.clone();
        }
    }
    if n % 2 == 0 {
        col = row.clone();
    } else {
        row = psi.row.clone();
    }
    Ok(DiscretizedKernel { data, row, col, weight_embedded: true })
}

/// Largest relative magnitude of the n-th iterated kernel outside the band
/// |w1 - (-1)^n w_{n+1}| <= n Delta_+ / 2.
pub fn support_bound_excess(kernel: &DiscretizedKernel, n: usize, delta_plus: f64) -> f64 {
    let peak = linalg::max_abs(&kernel.data).max(1e-300);
    let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
    let half = n as f64 * delta_plus / 2.0;
    let rows = kernel.row.points();
    let cols = kernel.col.points();
    let mut excess: f64 = 0.0;
    for (i, &wr) in rows.iter().enumerate() {
        for (j, &wc) in cols.iter().enumerate() {
            if (wr - sign * wc).abs() > half {
                excess = excess.max(kernel.data[[i, j]].norm() / peak);
            }
        }
    }
    excess
}

/// Sufficient condition preventing both photons of a pair from entering the
/// same channel: c_inner > N Delta_+ / 4 (strict).
pub fn check_no_double_photon(pair: &ChannelPair, delta_plus: f64, order: usize) -> bool {
    pair.c_inner > order as f64 * delta_plus / 4.0
}

/// JSA restricted to the frequencies that can affect the channels.
#[derive(Debug, Clone)]
pub struct ReducedJsa {
    /// Restricted kernel on the masked grid (weight-embedded, subnormalized).
    pub kernel: DiscretizedKernel,
    /// Indices of the full grid retained by the projection.
    pub keep: Vec<usize>,
    pub full_grid: Arc<FrequencyGrid>,
    pub order: usize,
    /// Retained |offset| band [lo, hi] (lo clipped at zero).
    pub band: (f64, f64),
    pub delta_plus: f64,
    pub process: ProcessType,
}

impl ReducedJsa {
    pub fn grid(&self) -> Result<Arc<FrequencyGrid>> {
        match &self.kernel.row {
            AxisGrid::Freq(g) => Ok(g.clone()),
            AxisGrid::Time(_) => Err(Error::Wdm("reduced kernel not in frequency basis".into())),
        }
    }

    /// Scatter a masked-grid vector back onto the full grid (zero-filled).
    pub fn scatter_to_full(&self, masked: &Array2<C64>) -> Array2<C64> {
        let mut out = Array2::zeros((self.full_grid.len(), masked.ncols()));
        for (r, &i) in self.keep.iter().enumerate() {
            for c in 0..masked.ncols() {
                out[[i, c]] = masked[[r, c]];
            }
        }
        out
    }
}

/// Restrict the JSA to the band `c_inner - N Delta_+/2 <= |w| <= c_outer +
/// N Delta_+/2` (Eq.-25-style projection).
pub fn reduce_jsa(jsa: &JointSpectralAmplitude, pair: &ChannelPair, order: usize) -> Result<ReducedJsa> {
    let grid = jsa.grid()?;
    let margin = order as f64 * jsa.delta_plus / 2.0;
    let lo = (pair.c_inner - margin).max(0.0);
    let w_max = grid.points[grid.len() - 1].max(-grid.points[0]);
    // the channels themselves must be visible on the grid; the +N Delta_+/2
    // margin may clip at the grid edge where the JSA has no support anyway
    if pair.c_outer > w_max + grid.step() {
        return Err(Error::Wdm(format!(
            "channel band (|w| up to {:.3e} rad/s) exceeds the JSA grid (up to {w_max:.3e} rad/s)",
            pair.c_outer
        )));
    }
    let hi = (pair.c_outer + margin).min(w_max + grid.step());
    let keep: Vec<usize> = grid
        .points
        .iter()
        .enumerate()
        .filter(|(_, &w)| {
            let a = w.abs();
            a >= lo && a <= hi
        })
        .map(|(i, _)| i)
        .collect();
    if keep.len() < 2 {
        return Err(Error::Wdm("channel band retains fewer than two grid points".into()));
    }
    let masked_grid = Arc::new(grid.masked(&keep)?);
    let mut data = Array2::zeros((keep.len(), keep.len()));
    for (r, &i) in keep.iter().enumerate() {
        for (c, &j) in keep.iter().enumerate() {
            data[[r, c]] = jsa.kernel.data[[i, j]];
        }
    }
    let axis = AxisGrid::Freq(masked_grid);
    Ok(ReducedJsa {
        kernel: DiscretizedKernel { data, row: axis.clone(), col: axis, weight_embedded: true },
        keep,
        full_grid: grid,
        order,
        band: (lo, hi),
        delta_plus: jsa.delta_plus,
        process: jsa.process,
    })
}

/// Truncated hyperbolic series: (c_N(s) - 1)/2 and s_N(s)/2 diagonals used
/// by the post-WDM covariance; `None` keeps the full cosh/sinh.
fn hyperbolic_series(sigma: &Array1<f64>, order: Option<usize>) -> (Array1<f64>, Array1<f64>) {
    match order {
        None => (
            sigma.mapv(|s| 0.5 * (s.cosh() - 1.0)),
            sigma.mapv(|s| 0.5 * s.sinh()),
        ),
        Some(n) => {
            let cosh_part = sigma.mapv(|s| {
                let mut acc = 0.0;
                let mut term = 1.0;
                for k in 1..=n {
                    term *= s / k as f64;
                    if k % 2 == 0 {
                        acc += term;
                    }
                }
                0.5 * acc
            });
            let sinh_part = sigma.mapv(|s| {
                let mut acc = 0.0;
                let mut term = 1.0;
                for k in 1..=n {
                    term *= s / k as f64;
                    if k % 2 == 1 {
                        acc += term;
                    }
                }
                0.5 * acc
            });
            (cosh_part, sinh_part)
        }
    }
}

fn scale_columns(modes: &Array2<C64>, t: &Array1<f64>) -> Array2<C64> {
    let mut out = modes.clone();
    for ((i, _), v) in out.indexed_iter_mut() {
        *v *= t[i];
    }
    out
}

fn sandwich(modes: &Array2<C64>, diag: &Array1<f64>, other: &Array2<C64>) -> Array2<C64> {
    let mut scaled = modes.clone();
    for ((_, k), v) in scaled.indexed_iter_mut() {
        *v *= diag[k];
    }
    linalg::matmul(&scaled, &linalg::adjoint(other))
}

/// Post-WDM covariance of the reduced state.
///
/// With `reordered` the conjugate-pair basis reordering is applied, giving a
/// halved two-party covariance with channel transmissions folded into the
/// (no longer orthonormal) mode matrices; this requires the no-double-photon
/// condition. Otherwise the full-form covariance is kept and the channel
/// transmissions act as a diagonal amplitude loss eta on both slots.
pub fn post_wdm_covariance(
    reduced: &ReducedJsa,
    pair: &ChannelPair,
    gain: f64,
    order: Option<usize>,
    reordered: bool,
) -> Result<RenormalizedCovariance> {
    let grid = reduced.grid()?;
    if reordered {
        if !check_no_double_photon(pair, reduced.delta_plus, order.unwrap_or(DEFAULT_ORDER)) {
            return Err(Error::Wdm(
                "reordered post-WDM covariance requires c_inner > N Delta_+ / 4".into(),
            ));
        }
        let sd = schmidt_kernel(&reduced.kernel, gain, ProcessType::Type0, SchmidtOptions::default())?;
        let sigma = sd.squeezing();
        let (cosh_d, sinh_d) = hyperbolic_series(&sigma, order);
        let t_a = pair.channel_a.amplitude_on(&grid);
        let t_b = pair.channel_b.amplitude_on(&grid);
        let u_a = scale_columns(&sd.modes_signal, &t_a);
        let v_b = scale_columns(&sd.modes_idler, &t_b);
        let aa = sandwich(&u_a, &cosh_d, &u_a);
        let ab = sandwich(&u_a, &sinh_d, &v_b);
        let ba = linalg::adjoint(&ab);
        let bb = sandwich(&v_b, &cosh_d, &v_b);
        Ok(RenormalizedCovariance {
            aa,
            ab,
            ba,
            bb,
            grid_a: reduced.kernel.row.clone(),
            grid_b: reduced.kernel.col.clone(),
            process: ProcessType::Type0,
            form: CovarianceForm::Halved,
            truncation_order: order,
        })
    } else {
        let n = order.unwrap_or(DEFAULT_ORDER);
        let cov = covariance_series_kernel(&reduced.kernel, gain, ProcessType::Type0, n)?;
        let t_a = pair.channel_a.amplitude_on(&grid);
        let t_b = pair.channel_b.amplitude_on(&grid);
        let eta = Array1::from_iter(t_a.iter().zip(t_b.iter()).map(|(a, b)| a.max(*b)));
        Ok(apply_diagonal_loss(&cov, &eta))
    }
}

/// eta Gamma eta with a diagonal amplitude transmission on both slots.
pub fn apply_diagonal_loss(cov: &RenormalizedCovariance, eta: &Array1<f64>) -> RenormalizedCovariance {
    let d = |m: &Array2<C64>| {
        let mut out = m.clone();
        for ((i, j), v) in out.indexed_iter_mut() {
            *v *= eta[i] * eta[j];
        }
        out
    };
    RenormalizedCovariance {
        aa: d(&cov.aa),
        ab: d(&cov.ab),
        ba: d(&cov.ba),
        bb: d(&cov.bb),
        grid_a: cov.grid_a.clone(),
        grid_b: cov.grid_b.clone(),
        process: cov.process,
        form: cov.form,
        truncation_order: cov.truncation_order,
    }
}

/// One point of the channel-offset coincidence study.
#[derive(Debug, Clone, Copy)]
pub struct OffsetPoint {
    pub offset: f64,
    /// P(click A and click B) per pulse, full-window, no noise.
    pub coincidence: f64,
    pub singles_a: f64,
    pub singles_b: f64,
    /// Coincidence normalized to the zero-offset value.
    pub normalized: f64,
}

/// Coincidence probability between the two channels as a function of an
/// additional offset of channel A's center frequency. The gain is calibrated
/// once from `mu` at the symmetric baseline and then held fixed.
pub fn coincidence_vs_offset(
    jsa: &JointSpectralAmplitude,
    pair: &ChannelPair,
    offsets: &[f64],
    mu: f64,
    order: usize,
) -> Result<Vec<OffsetPoint>> {
    let baseline = reduce_jsa(jsa, pair, order)?;
    let sd = schmidt_kernel(&baseline.kernel, 1.0, ProcessType::Type0, SchmidtOptions::default())?;
    let gain = gain_for_mu(&sd.coefficients, ProcessType::Type0, (1.0, 0.0), mu)?;
    let zero = channel_click_stats(jsa, pair, gain, order)?;
    let points: Result<Vec<OffsetPoint>> = offsets
        .par_iter()
        .map(|&offset| {
            let shifted = pair.with_channel_a_offset(offset)?;
            let (c, sa, sb) = channel_click_stats(jsa, &shifted, gain, order)?;
            Ok(OffsetPoint {
                offset,
                coincidence: c,
                singles_a: sa,
                singles_b: sb,
                normalized: c / zero.0,
            })
        })
        .collect();
    points
}

/// (coincidence, singles A, singles B) for one channel geometry.
fn channel_click_stats(
    jsa: &JointSpectralAmplitude,
    pair: &ChannelPair,
    gain: f64,
    order: usize,
) -> Result<(f64, f64, f64)> {
    let reduced = reduce_jsa(jsa, pair, order)?;
    let cov = post_wdm_covariance(&reduced, pair, gain, Some(order), true)?;
    let na = cov.dim_a();
    let nb = cov.dim_b();
    let ones_a = Array1::from_elem(na, 1.0);
    let zeros_a = Array1::from_elem(na, 0.0);
    let ones_b = Array1::from_elem(nb, 1.0);
    let zeros_b = Array1::from_elem(nb, 0.0);
    let p_vac_a = vacuum_probability(
        &cov,
        &BlockWeight::Diagonal { a: ones_a.clone(), b: zeros_b.clone() },
    )?;
    let p_vac_b = vacuum_probability(
        &cov,
        &BlockWeight::Diagonal { a: zeros_a, b: ones_b.clone() },
    )?;
    let p_vac_ab = vacuum_probability(&cov, &BlockWeight::Diagonal { a: ones_a, b: ones_b })?;
    let coincidence = (1.0 - p_vac_a - p_vac_b + p_vac_ab).max(0.0);
    Ok((coincidence, 1.0 - p_vac_a, 1.0 - p_vac_b))
}
