//! Joint-spectral-amplitude construction: pump models, phase-matching
//! models (analytic and reconstructed from measured spectra), spectrum
//! symmetrization and WDM channel transmissions.

pub mod fit;

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2};

use crate::covariance::ProcessType;
use crate::error::{Error, Result};
use crate::grid::{AxisGrid, DiscretizedKernel, FrequencyGrid};
use crate::linalg::{self, C64};

/// Relative amplitude below which the JSA is considered unsupported; used
/// for the pump full width Delta_+ and the iterated-kernel band checks.
pub const SUPPORT_THRESHOLD: f64 = 1e-12;

/// Coherent pump pulse amplitude on a frequency-offset grid, L2-normalized.
#[derive(Debug, Clone)]
pub struct PumpAmplitude {
    pub grid: Arc<FrequencyGrid>,
    pub amplitude: Array1<C64>,
    /// Intensity FWHM of the pulse (s).
    pub pulse_duration: f64,
}

impl PumpAmplitude {
    pub fn from_samples(
        grid: Arc<FrequencyGrid>,
        mut amplitude: Array1<C64>,
        pulse_duration: f64,
    ) -> Result<Self> {
        if amplitude.len() != grid.len() {
            return Err(Error::Jsa("pump samples do not match the grid".into()));
        }
        let norm2: f64 = amplitude
            .iter()
            .zip(grid.weights.iter())
            .map(|(a, w)| w * a.norm_sqr())
            .sum();
        if norm2 <= 0.0 || !norm2.is_finite() {
            return Err(Error::Jsa("pump amplitude has no L2 mass".into()));
        }
        let inv = 1.0 / norm2.sqrt();
        amplitude.mapv_inplace(|z| z * inv);
        Ok(PumpAmplitude { grid, amplitude, pulse_duration })
    }

    /// Transform-limited Gaussian with the given intensity FWHM (s).
    pub fn gaussian_transform_limited(grid: Arc<FrequencyGrid>, fwhm: f64) -> Result<Self> {
        if fwhm <= 0.0 {
            return Err(Error::Jsa("pump FWHM must be positive".into()));
        }
        let sigma_t = fwhm / (2.0 * (2.0 * (2.0f64).ln()).sqrt());
        let amp = Array1::from_iter(
            grid.points.iter().map(|&w| C64::new((-sigma_t * sigma_t * w * w).exp(), 0.0)),
        );
        PumpAmplitude::from_samples(grid, amp, fwhm)
    }

    /// Raised-cosine pump with exact support [-width/2, width/2]; useful when
    /// hard band-limits are needed.
    pub fn raised_cosine(grid: Arc<FrequencyGrid>, width: f64, equiv_duration: f64) -> Result<Self> {
        if width <= 0.0 {
            return Err(Error::Jsa("pump width must be positive".into()));
        }
        let amp = Array1::from_iter(grid.points.iter().map(|&w| {
            if w.abs() <= width / 2.0 {
                let c = (PI * w / width).cos();
                C64::new(c * c, 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        }));
        PumpAmplitude::from_samples(grid, amp, equiv_duration)
    }

    /// Full width of the support at the given relative amplitude threshold.
    pub fn support_width(&self, rel_threshold: f64) -> f64 {
        let peak = self.amplitude.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (z, &w) in self.amplitude.iter().zip(self.grid.points.iter()) {
            if z.norm() >= rel_threshold * peak {
                lo = lo.min(w);
                hi = hi.max(w);
            }
        }
        if hi > lo {
            2.0 * hi.abs().max(lo.abs())
        } else {
            0.0
        }
    }

    fn interp(&self, w: f64) -> C64 {
        interp_complex(&self.grid.points, &self.amplitude, w)
    }
}

/// Phase-matching amplitude on a frequency-difference grid together with the
/// crystal-model parameters it was built from.
#[derive(Debug, Clone)]
pub struct PhaseMatching {
    pub grid: Arc<FrequencyGrid>,
    pub amplitude: Array1<C64>,
    /// Crystal length L (m).
    pub crystal_length: f64,
    /// Group-delay mismatch Delta k' (s/m).
    pub dk_prime: f64,
    /// Collinear mismatch offset Delta k0 (1/m).
    pub dk0: f64,
    /// Linear waveguide-imperfection coefficient delta k' (1/m^2).
    pub imperfection_linear: f64,
    /// Quadratic waveguide-imperfection coefficient delta k'' (1/m^3).
    pub imperfection_quadratic: f64,
    /// Normalized RMS residual of the spectrum fit, when fitted.
    pub fit_residual: Option<f64>,
}

/// Number of crystal quadrature points for the z-integral.
pub const CRYSTAL_GRID_POINTS: usize = 513;

/// Evaluate the crystal model
/// `Phi(w) = (1/L) Int_{-L/2}^{L/2} exp(i [dk(w) (z + L/2)
///   + dkp (z^2 - L^2/4)/2 + dkpp (z^3 + L^3/8)/6]) dz`
/// with `dk(w) = dk0 + dk_prime * w`, by Simpson quadrature over z.
pub fn phase_matching_model(
    omega_minus: &[f64],
    length: f64,
    dk_prime: f64,
    dk0: f64,
    imperfection_linear: f64,
    imperfection_quadratic: f64,
) -> Vec<C64> {
    let n_z = CRYSTAL_GRID_POINTS;
    let dz = length / (n_z as f64 - 1.0);
    let mut out = vec![C64::new(0.0, 0.0); omega_minus.len()];
    let mut z_phase = Vec::with_capacity(n_z);
    let mut z_half = Vec::with_capacity(n_z);
    let mut z_weight = Vec::with_capacity(n_z);
    for j in 0..n_z {
        let z = -length / 2.0 + dz * j as f64;
        let crystal = imperfection_linear * (z * z - length * length / 4.0) / 2.0
            + imperfection_quadratic * (z * z * z + length.powi(3) / 8.0) / 6.0;
        z_phase.push(crystal);
        z_half.push(z + length / 2.0);
        let w = if j == 0 || j == n_z - 1 {
            1.0
        } else if j % 2 == 1 {
            4.0
        } else {
            2.0
        };
        z_weight.push(w * dz / 3.0 / length);
    }
    for (i, &w) in omega_minus.iter().enumerate() {
        let dk = dk0 + dk_prime * w;
        let mut acc = C64::new(0.0, 0.0);
        for j in 0..n_z {
            acc += C64::from_polar(z_weight[j], dk * z_half[j] + z_phase[j]);
        }
        out[i] = acc;
    }
    out
}

impl PhaseMatching {
    /// Ideal uniform crystal (sinc profile).
    pub fn uniform_crystal(
        grid: Arc<FrequencyGrid>,
        length: f64,
        dk_prime: f64,
        dk0: f64,
    ) -> Self {
        let amp = phase_matching_model(grid.points.as_slice().unwrap(), length, dk_prime, dk0, 0.0, 0.0);
        PhaseMatching {
            amplitude: Array1::from(amp),
            grid,
            crystal_length: length,
            dk_prime,
            dk0,
            imperfection_linear: 0.0,
            imperfection_quadratic: 0.0,
            fit_residual: None,
        }
    }

    /// Gaussian stand-in profile with the given RMS spectral width (rad/s).
    pub fn gaussian(grid: Arc<FrequencyGrid>, width: f64) -> Result<Self> {
        if width <= 0.0 {
            return Err(Error::Jsa("phase-matching width must be positive".into()));
        }
        let amp = Array1::from_iter(
            grid.points.iter().map(|&w| C64::new((-w * w / (2.0 * width * width)).exp(), 0.0)),
        );
        Ok(PhaseMatching {
            amplitude: amp,
            grid,
            crystal_length: 0.0,
            dk_prime: 0.0,
            dk0: 0.0,
            imperfection_linear: 0.0,
            imperfection_quadratic: 0.0,
            fit_residual: None,
        })
    }

    fn interp(&self, w: f64) -> C64 {
        interp_complex(&self.grid.points, &self.amplitude, w)
    }
}

/// Linear interpolation, zero outside the sample range.
fn interp_complex(xs: &Array1<f64>, ys: &Array1<C64>, x: f64) -> C64 {
    let n = xs.len();
    if x < xs[0] || x > xs[n - 1] {
        return C64::new(0.0, 0.0);
    }
    let step = (xs[n - 1] - xs[0]) / (n as f64 - 1.0);
    let pos = (x - xs[0]) / step;
    let i = (pos.floor() as usize).min(n - 2);
    let frac = pos - i as f64;
    ys[i] * (1.0 - frac) + ys[i + 1] * frac
}

fn interp_real(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    if x <= xs[0] {
        return if x < xs[0] { 0.0 } else { ys[0] };
    }
    if x >= xs[n - 1] {
        return if x > xs[n - 1] { 0.0 } else { ys[n - 1] };
    }
    let mut i = match xs.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
        Ok(i) => i,
        Err(i) => i - 1,
    };
    if i >= n - 1 {
        i = n - 2;
    }
    let frac = (x - xs[i]) / (xs[i + 1] - xs[i]);
    ys[i] * (1.0 - frac) + ys[i + 1] * frac
}

/// Discretized JSA with pump-width metadata.
#[derive(Debug, Clone)]
pub struct JointSpectralAmplitude {
    /// Weight-embedded kernel over (w_s, w_i), unit L2 norm.
    pub kernel: DiscretizedKernel,
    /// Full pump-side width Delta_+ (rad/s) at the support threshold.
    pub delta_plus: f64,
    pub process: ProcessType,
    /// Set when the pump/phase-matching aspect ratio is below 10 and the
    /// factorized construction is questionable.
    pub factorization_warning: bool,
}

impl JointSpectralAmplitude {
    pub fn grid(&self) -> Result<Arc<FrequencyGrid>> {
        match &self.kernel.row {
            AxisGrid::Freq(g) => Ok(g.clone()),
            AxisGrid::Time(_) => Err(Error::Jsa("JSA kernel is not in the frequency basis".into())),
        }
    }

    /// Build a JSA directly from a closed-form kernel function (tests and
    /// synthetic studies).
    pub fn from_kernel_fn<F: Fn(f64, f64) -> C64>(
        grid: Arc<FrequencyGrid>,
        process: ProcessType,
        f: F,
    ) -> Result<Self> {
        let axis = AxisGrid::Freq(grid);
        let plain = DiscretizedKernel::sample(axis.clone(), axis, f);
        let mut emb = crate::grid::embed_weights(&plain)?;
        let norm = linalg::hs_norm(&emb.data);
        if norm <= 0.0 || !norm.is_finite() {
            return Err(Error::Jsa("kernel has no L2 mass".into()));
        }
        emb.data.mapv_inplace(|z| z / norm);
        let delta_plus = pump_support_width(&emb)?;
        Ok(JointSpectralAmplitude {
            kernel: emb,
            delta_plus,
            process,
            factorization_warning: false,
        })
    }
}

/// Full width of the kernel support along w_+ at [`SUPPORT_THRESHOLD`].
fn pump_support_width(kernel: &DiscretizedKernel) -> Result<f64> {
    let row = match &kernel.row {
        AxisGrid::Freq(g) => g.clone(),
        _ => return Err(Error::Jsa("kernel not in frequency basis".into())),
    };
    let col = match &kernel.col {
        AxisGrid::Freq(g) => g.clone(),
        _ => return Err(Error::Jsa("kernel not in frequency basis".into())),
    };
    let peak = linalg::max_abs(&kernel.data);
    let mut width: f64 = 0.0;
    for (i, &ws) in row.points.iter().enumerate() {
        for (j, &wi) in col.points.iter().enumerate() {
            if kernel.data[[i, j]].norm() >= SUPPORT_THRESHOLD * peak {
                width = width.max((ws + wi).abs());
            }
        }
    }
    Ok(2.0 * width)
}

/// Assemble the factorized JSA `psi(w_s, w_i) = alpha(w_+) Phi(w_-)` on the
/// given signal/idler grid, weight-embedded and L2-normalized.
pub fn assemble_jsa(
    pump: &PumpAmplitude,
    pm: &PhaseMatching,
    grid: Arc<FrequencyGrid>,
    process: ProcessType,
) -> Result<JointSpectralAmplitude> {
    // the pump grid must cover the pump support
    let edge = pump.amplitude[0].norm().max(pump.amplitude[pump.amplitude.len() - 1].norm());
    let peak = pump.amplitude.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if edge > 1e-9 * peak {
        return Err(Error::Jsa(
            "pump grid does not cover the pump support (non-negligible edge amplitude)".into(),
        ));
    }
    let axis = AxisGrid::Freq(grid.clone());
    let plain = DiscretizedKernel::sample(axis.clone(), axis, |ws, wi| {
        pump.interp(ws + wi) * pm.interp(ws - wi)
    });
    let mut emb = crate::grid::embed_weights(&plain)?;
    let norm = linalg::hs_norm(&emb.data);
    if norm <= 0.0 || !norm.is_finite() {
        return Err(Error::Jsa("assembled JSA has no L2 mass".into()));
    }
    emb.data.mapv_inplace(|z| z / norm);
    let delta_plus = pump.support_width(SUPPORT_THRESHOLD).min(2.0 * grid.points[grid.len() - 1].abs() + grid.step());
    // aspect ratio: phase-matching support over pump support
    let pm_peak = pm.amplitude.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let mut pm_lo = f64::INFINITY;
    let mut pm_hi = f64::NEG_INFINITY;
    for (z, &w) in pm.amplitude.iter().zip(pm.grid.points.iter()) {
        if z.norm() >= 0.5 * pm_peak {
            pm_lo = pm_lo.min(w);
            pm_hi = pm_hi.max(w);
        }
    }
    let pump_fwhm = pump.support_width(0.5).max(1e-300);
    let aspect = (pm_hi - pm_lo).abs() / pump_fwhm;
    let factorization_warning = aspect < 10.0;
    if factorization_warning {
        tracing::warn!(aspect, "JSA aspect ratio below 10; the alpha(w_+) Phi(w_-) factorization is weak");
    }
    Ok(JointSpectralAmplitude { kernel: emb, delta_plus, process, factorization_warning })
}

/// Symmetrized spectrum `S_sym(w) = (S(w) + S(-w)) / 2` resampled onto a
/// symmetric uniform grid. Errors on one-sided input.
pub fn symmetrize_spectrum(freq: &[f64], values: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if freq.len() != values.len() || freq.len() < 3 {
        return Err(Error::Jsa("symmetrize: need matching sample arrays (>= 3 points)".into()));
    }
    if freq.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Jsa("symmetrize: frequencies must be strictly increasing".into()));
    }
    let lo = freq[0];
    let hi = freq[freq.len() - 1];
    if lo >= 0.0 || hi <= 0.0 {
        return Err(Error::Jsa("symmetrize: samples must cover both sides of zero offset".into()));
    }
    let half = (-lo).min(hi);
    // sample density taken from the positive side so an already-symmetric
    // grid is reproduced exactly (symmetrization is idempotent)
    let n_half = freq.iter().filter(|&&f| f > 0.0 && f <= half + 1e-12 * half).count().max(2);
    let step = half / n_half as f64;
    let mut out_f = Vec::with_capacity(2 * n_half + 1);
    let mut out_v = Vec::with_capacity(2 * n_half + 1);
    let mut upper = Vec::with_capacity(n_half + 1);
    for k in 0..=n_half {
        let w = step * k as f64;
        let s = 0.5 * (interp_real(freq, values, w) + interp_real(freq, values, -w));
        upper.push(s);
    }
    for k in (1..=n_half).rev() {
        out_f.push(-step * k as f64);
        out_v.push(upper[k]);
    }
    for k in 0..=n_half {
        out_f.push(step * k as f64);
        out_v.push(upper[k]);
    }
    Ok((out_f, out_v))
}

/// Frequency-dependent power transmission of one WDM channel.
#[derive(Debug, Clone)]
pub struct ChannelTransmission {
    /// Angular-frequency offsets (rad/s), strictly increasing.
    pub freq_offsets: Vec<f64>,
    /// Power transmission T^2 in [0, 1].
    pub power: Vec<f64>,
    /// Outermost -30 dB crossing points (rad/s).
    pub nominal_bounds: (f64, f64),
}

impl ChannelTransmission {
    pub fn from_samples(freq_offsets: Vec<f64>, power: Vec<f64>) -> Result<Self> {
        if freq_offsets.is_empty() || freq_offsets.len() != power.len() {
            return Err(Error::Jsa("channel: empty or mismatched samples".into()));
        }
        if freq_offsets.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Jsa("channel: frequencies must be strictly increasing".into()));
        }
        if power.iter().any(|&p| !(0.0..=1.0 + 1e-6).contains(&p)) {
            return Err(Error::Jsa("channel: power transmission outside [0, 1]".into()));
        }
        let power: Vec<f64> = power.into_iter().map(|p| p.min(1.0)).collect();
        let peak = power.iter().cloned().fold(0.0, f64::max);
        if peak <= 0.0 {
            return Err(Error::Jsa("channel: transmission identically zero".into()));
        }
        let thresh = peak * 1e-3; // -30 dB
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (&f, &p) in freq_offsets.iter().zip(power.iter()) {
            if p >= thresh {
                lo = lo.min(f);
                hi = hi.max(f);
            }
        }
        Ok(ChannelTransmission { freq_offsets, power, nominal_bounds: (lo, hi) })
    }

    /// Flat-top super-Gaussian helper: T^2 = peak * exp(-((w-center)/hw)^(2m)).
    pub fn super_gaussian(center: f64, half_width: f64, order: u32, peak: f64, grid: &[f64]) -> Result<Self> {
        let power = grid
            .iter()
            .map(|&w| peak * (-(((w - center) / half_width).powi(2)).powi(order as i32)).exp())
            .collect();
        ChannelTransmission::from_samples(grid.to_vec(), power)
    }

    /// Amplitude transmission sqrt(T^2) sampled on a grid, zero outside.
    pub fn amplitude_on(&self, grid: &FrequencyGrid) -> Array1<f64> {
        Array1::from_iter(
            grid.points
                .iter()
                .map(|&w| interp_real(&self.freq_offsets, &self.power, w).max(0.0).sqrt()),
        )
    }

    pub fn power_on(&self, grid: &FrequencyGrid) -> Array1<f64> {
        Array1::from_iter(
            grid.points.iter().map(|&w| interp_real(&self.freq_offsets, &self.power, w).max(0.0)),
        )
    }

    /// Shift the channel center by `offset` (rad/s).
    pub fn shifted(&self, offset: f64) -> ChannelTransmission {
        ChannelTransmission {
            freq_offsets: self.freq_offsets.iter().map(|f| f + offset).collect(),
            power: self.power.clone(),
            nominal_bounds: (self.nominal_bounds.0 + offset, self.nominal_bounds.1 + offset),
        }
    }

    /// Width of the support above the -30 dB threshold.
    pub fn support_width(&self) -> f64 {
        self.nominal_bounds.1 - self.nominal_bounds.0
    }

    /// Write the channel as a CSV file (linear power, Hz offsets).
    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("# unit: linear, axis: Hz-offset\n");
        for (&f, &p) in self.freq_offsets.iter().zip(self.power.iter()) {
            s.push_str(&format!("{:.9e},{:.9e}\n", f / (2.0 * PI), p));
        }
        std::fs::write(path, s)?;
        Ok(())
    }
}

/// Load a channel (or spectrum) CSV: header `# unit: dB|linear, axis:
/// Hz-offset`, then `freq,value` rows with frequency offsets in Hz.
pub fn load_channel(path: &Path) -> Result<ChannelTransmission> {
    let (freq, vals) = load_spectrum_csv(path)?;
    ChannelTransmission::from_samples(freq, vals)
}

/// Shared CSV reader for channels and measured spectra; returns angular
/// frequency offsets (rad/s) and linear values.
pub fn load_spectrum_csv(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let text = std::fs::read_to_string(path)?;
    let mut unit_db = false;
    let mut freqs = Vec::new();
    let mut vals = Vec::new();
    let mut saw_header = false;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('#') {
            let body = line.trim_start_matches('#').to_ascii_lowercase();
            if body.contains("unit:") {
                saw_header = true;
                if body.contains("db") {
                    unit_db = true;
                } else if body.contains("linear") {
                    unit_db = false;
                } else {
                    return Err(Error::Jsa(format!(
                        "{}: unknown unit in header '{line}'",
                        path.display()
                    )));
                }
                if !body.contains("hz-offset") {
                    return Err(Error::Jsa(format!(
                        "{}: expected 'axis: Hz-offset' in header",
                        path.display()
                    )));
                }
            }
            continue;
        }
        let mut parts = line.split(',');
        let f: f64 = parts
            .next()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::Jsa(format!("{}:{}: bad frequency field", path.display(), lineno + 1)))?;
        let v: f64 = parts
            .next()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::Jsa(format!("{}:{}: bad value field", path.display(), lineno + 1)))?;
        freqs.push(2.0 * PI * f);
        vals.push(v);
    }
    if freqs.is_empty() {
        return Err(Error::Jsa(format!("{}: no data rows", path.display())));
    }
    if !saw_header {
        return Err(Error::Jsa(format!(
            "{}: missing '# unit: dB|linear, axis: Hz-offset' header",
            path.display()
        )));
    }
    if unit_db {
        for v in vals.iter_mut() {
            *v = 10f64.powf(*v / 10.0);
        }
    }
    Ok((freqs, vals))
}

/// Apply a cosine-ramp taper over the outer `fraction` of a sampled
/// amplitude, forcing it smoothly to zero at the grid edges. Used to control
/// truncation of slowly decaying (sinc-like) spectra.
pub fn taper_edges(values: &mut Array1<C64>, fraction: f64) {
    let n = values.len();
    if fraction <= 0.0 || n < 4 {
        return;
    }
    let ramp = ((n as f64 * fraction).round() as usize).clamp(1, n / 2);
    for k in 0..ramp {
        let x = (k as f64 + 0.5) / ramp as f64;
        let w = 0.5 * (1.0 - (PI * x).cos());
        values[k] *= w;
        values[n - 1 - k] *= w;
    }
}

/// Marginal spectral density of the signal photon.
pub fn signal_marginal(jsa: &JointSpectralAmplitude) -> Result<Array1<f64>> {
    let kernel = crate::grid::unembed_weights(&jsa.kernel)?;
    let col = kernel.col.weights().clone();
    let n = kernel.data.nrows();
    let mut out = Array1::zeros(n);
    for i in 0..n {
        out[i] = (0..kernel.data.ncols())
            .map(|j| kernel.data[[i, j]].norm_sqr() * col[j])
            .sum();
    }
    Ok(out)
}

/// Schmidt number K = 1 / sum_k lambda_k^2 for normalized coefficients.
pub fn schmidt_number(coefficients: &Array1<f64>) -> f64 {
    let l2: f64 = coefficients.iter().map(|s| s.powi(4)).sum();
    1.0 / l2
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{schmidt, SchmidtOptions};
    use crate::grid::make_grid;
    use approx::assert_relative_eq;

    #[test]
    fn pump_is_normalized() {
        let g = Arc::new(make_grid(0.0, 5e10, 301).unwrap());
        let p = PumpAmplitude::gaussian_transform_limited(g.clone(), 0.4e-9).unwrap();
        let norm2: f64 = p
            .amplitude
            .iter()
            .zip(g.weights.iter())
            .map(|(a, w)| w * a.norm_sqr())
            .sum();
        assert_relative_eq!(norm2, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn uniform_crystal_is_sinc() {
        let g = Arc::new(make_grid(0.0, 1.0e12, 257).unwrap());
        let length = 0.024;
        let dkp = 3.0e-13 / 1e-3; // s/m
        let pm = PhaseMatching::uniform_crystal(g.clone(), length, dkp, 0.0);
        for (i, &w) in g.points.iter().enumerate().step_by(16) {
            let x = dkp * w * length / 2.0;
            let sinc = if x.abs() < 1e-12 { 1.0 } else { x.sin() / x };
            assert_relative_eq!(pm.amplitude[i].norm(), sinc.abs(), epsilon = 2e-4);
        }
    }

    fn desk_jsa(pump_sigma: f64, pm_sigma: f64) -> JointSpectralAmplitude {
        let grid = Arc::new(make_grid(0.0, 8.0 * pm_sigma, 161).unwrap());
        let pump_grid = Arc::new(make_grid(0.0, 14.0 * pump_sigma, 301).unwrap());
        let pm_grid = Arc::new(make_grid(0.0, 18.0 * pm_sigma, 601).unwrap());
        let pump = PumpAmplitude::from_samples(
            pump_grid.clone(),
            Array1::from_iter(
                pump_grid.points.iter().map(|&w| C64::new((-w * w / (4.0 * pump_sigma * pump_sigma)).exp(), 0.0)),
            ),
            1e-9,
        )
        .unwrap();
        let pm = PhaseMatching::gaussian(pm_grid, pm_sigma * 2.0f64.sqrt()).unwrap();
        assemble_jsa(&pump, &pm, grid, ProcessType::TypeII).unwrap()
    }

    #[test]
    fn gaussian_jsa_schmidt_number_matches_closed_form() {
        // |psi|^2 ~ exp(-w_+^2/(2 a^2)) exp(-w_-^2/(2 b^2)): K = (r + 1/r)/2
        let a = 1.0;
        let b = 7.0;
        let jsa = desk_jsa(a, b);
        let sd = schmidt(&jsa, 0.1, SchmidtOptions::default()).unwrap();
        let k_num = schmidt_number(&sd.coefficients);
        let r = b / a;
        let k_expect = 0.5 * (r + 1.0 / r);
        assert!((k_num / k_expect - 1.0).abs() < 0.01, "K {k_num} vs {k_expect}");
    }

    #[test]
    fn gaussian_jsa_schmidt_spectrum_geometric() {
        let a = 1.0;
        let b = 6.0;
        let jsa = desk_jsa(a, b);
        let sd = schmidt(&jsa, 0.1, SchmidtOptions::default()).unwrap();
        let r = b / a;
        let q = ((r - 1.0) / (r + 1.0)).powi(2);
        for k in 0..10 {
            let expect = ((1.0 - q) * q.powi(k as i32)).sqrt();
            assert!(
                (sd.coefficients[k] / expect - 1.0).abs() < 0.01,
                "mode {k}: {} vs {expect}",
                sd.coefficients[k]
            );
        }
    }

    #[test]
    fn cw_pump_marginal_follows_phase_matching() {
        // very narrow pump: signal marginal ~ |Phi(2 w_s)|^2
        let pm_sigma = 5.0;
        let grid = Arc::new(make_grid(0.0, 2.5 * pm_sigma, 221).unwrap());
        let pump_grid = Arc::new(make_grid(0.0, 1.0, 801).unwrap());
        let pump = PumpAmplitude::gaussian_transform_limited(pump_grid, 60.0).unwrap();
        let pm_grid = Arc::new(make_grid(0.0, 8.0 * pm_sigma, 801).unwrap());
        let pm = PhaseMatching::gaussian(pm_grid, pm_sigma).unwrap();
        let jsa = assemble_jsa(&pump, &pm, grid.clone(), ProcessType::Type0).unwrap();
        let marg = signal_marginal(&jsa).unwrap();
        let peak_idx = grid.len() / 2;
        for k in (0..grid.len()).step_by(17) {
            let expect = (-(2.0 * grid.points[k]).powi(2) / (pm_sigma * pm_sigma)).exp();
            let got = marg[k] / marg[peak_idx];
            assert!((got - expect).abs() < 2e-2, "marginal at {k}: {got} vs {expect}");
        }
    }

    #[test]
    fn real_even_pump_and_pm_give_symmetric_kernel() {
        let jsa = desk_jsa(1.0, 6.0);
        let k = &jsa.kernel.data;
        let mut max_asym: f64 = 0.0;
        for i in 0..k.nrows() {
            for j in 0..k.ncols() {
                max_asym = max_asym.max((k[[i, j]] - k[[j, i]]).norm());
            }
        }
        assert!(max_asym < 1e-12);
    }

    #[test]
    fn aspect_ratio_warning_flag() {
        let jsa = desk_jsa(1.0, 3.0); // aspect ~ 3
        assert!(jsa.factorization_warning);
        let jsa = desk_jsa(1.0, 30.0);
        assert!(!jsa.factorization_warning);
    }

    #[test]
    fn symmetrize_removes_odd_part() {
        let freq: Vec<f64> = (0..81).map(|k| -1.0 + k as f64 * 0.025).collect();
        let vals: Vec<f64> = freq.iter().map(|&w| 1.0 + w).collect();
        let (f, v) = symmetrize_spectrum(&freq, &vals).unwrap();
        for (i, &val) in v.iter().enumerate() {
            assert_relative_eq!(val, 1.0, epsilon = 1e-12);
            let mirrored = v[f.len() - 1 - i];
            assert_eq!(val, mirrored, "exact evenness");
        }
    }

    #[test]
    fn symmetrize_idempotent_and_even() {
        let freq: Vec<f64> = (0..120).map(|k| -1.3 + k as f64 * 0.02).collect();
        let vals: Vec<f64> = freq
            .iter()
            .map(|&w| (-(w - 0.4).powi(2) * 8.0).exp() + 0.7 * (-(w + 0.55).powi(2) * 6.0).exp())
            .collect();
        let (f1, v1) = symmetrize_spectrum(&freq, &vals).unwrap();
        // exactly even
        for i in 0..v1.len() {
            assert_eq!(v1[i], v1[v1.len() - 1 - i]);
        }
        let (_, v2) = symmetrize_spectrum(&f1, &v1).unwrap();
        let max_dev = v1
            .iter()
            .zip(v2.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_dev < 1e-10, "idempotence violated by {max_dev}");
    }

    #[test]
    fn symmetrize_rejects_one_sided() {
        let freq: Vec<f64> = (0..60).map(|k| 0.01 + k as f64 * 0.02).collect();
        let vals = vec![1.0; 60];
        assert!(symmetrize_spectrum(&freq, &vals).is_err());

        let jsa_already_symmetric = {
            let freq: Vec<f64> = (0..61).map(|k| -0.6 + k as f64 * 0.02).collect();
            let vals: Vec<f64> = freq.iter().map(|&w| (-w * w * 4.0).exp()).collect();
            let (f, v) = symmetrize_spectrum(&freq, &vals).unwrap();
            (f, v, freq, vals)
        };
        let (f, v, freq, vals) = jsa_already_symmetric;
        for (ff, vv) in f.iter().zip(v.iter()) {
            let orig = super::interp_real(&freq, &vals, *ff);
            assert!((vv - orig).abs() < 1e-10);
        }
    }

    #[test]
    fn channel_csv_round_trip_and_db() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flat.csv");
        let mut s = String::from("# unit: dB, axis: Hz-offset\n");
        for k in 0..64 {
            let f = -25.0e9 + k as f64 * 50.0e9 / 63.0;
            s.push_str(&format!("{f},-3.0103\n"));
        }
        std::fs::write(&path, s).unwrap();
        let ch = load_channel(&path).unwrap();
        for &p in ch.power.iter() {
            assert!((p - 0.5).abs() < 1e-4, "dB conversion {p}");
        }
    }

    #[test]
    fn channel_50ghz_support_width() {
        let grid: Vec<f64> = (0..801)
            .map(|k| 2.0 * PI * (-60.0e9 + k as f64 * 120.0e9 / 800.0))
            .collect();
        let ch = ChannelTransmission::super_gaussian(0.0, 2.0 * PI * 25.0e9, 8, 0.9, &grid).unwrap();
        let width = ch.support_width();
        let nominal = 2.0 * PI * 50.0e9;
        assert!(
            (width / nominal - 1.0).abs() < 0.2,
            "support width {width:.3e} vs nominal {nominal:.3e}"
        );
    }

    #[test]
    fn channel_rejects_bad_input() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.csv");
        std::fs::write(&empty, "# unit: linear, axis: Hz-offset\n").unwrap();
        assert!(load_channel(&empty).is_err());

        let over = dir.path().join("over.csv");
        std::fs::write(&over, "# unit: linear, axis: Hz-offset\n0.0,1.5\n1.0e9,0.5\n").unwrap();
        assert!(load_channel(&over).is_err());

        let nonmono = dir.path().join("nonmono.csv");
        std::fs::write(&nonmono, "# unit: linear, axis: Hz-offset\n1.0e9,0.5\n0.0,0.5\n").unwrap();
        assert!(load_channel(&nonmono).is_err());
    }
}
