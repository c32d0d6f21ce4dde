//! Everything between source and detectors: fiber loss and chromatic
//! dispersion, receiver interferometers with mode mismatch, the reduced
//! per-party transformation, time-domain path-projection kernels and the
//! low-rank assembly of the final weighted covariance.

pub mod poisson;

use std::sync::Arc;

use ndarray::{Array1, Array2};

use crate::covariance::{
    CovarianceForm, ProcessType, PumpSplitState, RenormalizedCovariance,
};
use crate::error::{Error, Result};
use crate::grid::{fourier_modes, AxisGrid, FrequencyGrid, TimeGrid};
use crate::jsa::JointSpectralAmplitude;
use crate::linalg::{self, C64};

/// Optical fiber link parameters.
#[derive(Debug, Clone, Copy)]
pub struct FiberLink {
    pub length_km: f64,
    pub loss_db_per_km: f64,
    /// Group-velocity dispersion beta_2 (s^2/km).
    pub beta2_s2_per_km: f64,
}

impl FiberLink {
    pub fn lossless(length_km: f64, beta2_s2_per_km: f64) -> Self {
        FiberLink { length_km, loss_db_per_km: 0.0, beta2_s2_per_km }
    }

    /// Amplitude transmittivity exp[-L/(2 L0)] with the characteristic loss
    /// distance L0 = 10^3 / ln(10^{0.1 alpha * 1 km}); equals the power law
    /// 10^{-alpha L / 20}.
    pub fn amplitude_transmittivity(&self) -> f64 {
        if self.loss_db_per_km == 0.0 {
            return 1.0;
        }
        let l0 = 1e3 / (10f64.powf(0.1 * self.loss_db_per_km).ln());
        (-(self.length_km * 1e3) / (2.0 * l0)).exp()
    }

    /// Quadratic dispersion phase coefficient: phi(w) = (beta2 L / 2) w^2.
    pub fn half_beta2_length(&self) -> f64 {
        0.5 * self.beta2_s2_per_km * self.length_km
    }

    pub fn dispersion_phase(&self, w: f64) -> f64 {
        self.half_beta2_length() * w * w
    }
}

/// Imbalanced receiver interferometer (Michelson geometry) with the virtual
/// mode-mismatch beam splitter.
#[derive(Debug, Clone, Copy)]
pub struct ReceiverInterferometer {
    /// Beam-splitter amplitude transmittivity.
    pub splitter_t: f64,
    /// Constant arm phases phi_0^{(s)}, phi_0^{(l)}.
    pub phase_short: f64,
    pub phase_long: f64,
    /// Arm delays tau^{(s)}, tau^{(l)} (s).
    pub delay_short: f64,
    pub delay_long: f64,
    /// Frequency-independent path-to-detector amplitude transmittivities
    /// eta[path][detector] for path in {s, l}, detector in {0, 1}.
    pub eta: [[f64; 2]; 2],
    /// Mode-match amplitude w.r.t. the pump interferometer.
    pub mode_match: f64,
}

impl ReceiverInterferometer {
    pub fn ideal(delay: f64) -> Self {
        ReceiverInterferometer {
            splitter_t: std::f64::consts::FRAC_1_SQRT_2,
            phase_short: 0.0,
            phase_long: 0.0,
            delay_short: 0.0,
            delay_long: delay,
            eta: [[1.0, 1.0], [1.0, 1.0]],
            mode_match: 1.0,
        }
    }

    pub fn reflectivity(&self) -> f64 {
        (1.0 - self.splitter_t * self.splitter_t).max(0.0).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.splitter_t) {
            return Err(Error::Optics("splitter transmittivity must be in [0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.mode_match) {
            return Err(Error::Optics("mode match must be in [0,1]".into()));
        }
        for row in &self.eta {
            for &e in row {
                if !(0.0..=1.0).contains(&e) {
                    return Err(Error::Optics("path transmittivities must be in [0,1]".into()));
                }
            }
        }
        Ok(())
    }
}

/// Interferometer path label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Path {
    Short,
    Long,
}

impl Path {
    pub fn index(self) -> usize {
        match self {
            Path::Short => 0,
            Path::Long => 1,
        }
    }
}

/// One amplitude term of a transformation row: `coeff e^{i phase}` applied
/// with time delay `delay`.
#[derive(Debug, Clone, Copy)]
pub struct AmpTerm {
    pub coeff: f64,
    pub phase: f64,
    pub delay: f64,
    pub path: Path,
}

/// One output mode of the reduced transformation (detector + interference
/// class).
#[derive(Debug, Clone)]
pub struct TransformationRow {
    pub detector: usize,
    pub interfering: bool,
    pub terms: Vec<AmpTerm>,
}

/// Per-party reduced transformation: six output amplitude rows (two
/// interfering, four mismatch).
#[derive(Debug, Clone)]
pub struct ReducedTransformation {
    pub rows: Vec<TransformationRow>,
}

/// Build the per-party reduced transformation from the interferometer
/// parameters and the frequency-independent fiber amplitude transmittivity.
/// The output beam splitter is the Hermitian adjoint of the input one
/// (Michelson geometry); both are represented by [[T, R], [R, -T]].
pub fn build_reduced_transformation(
    rx: &ReceiverInterferometer,
    fiber_amplitude: f64,
) -> Result<ReducedTransformation> {
    rx.validate()?;
    if !(0.0..=1.0).contains(&fiber_amplitude) {
        return Err(Error::Optics("fiber amplitude transmittivity must be in [0,1]".into()));
    }
    let t = rx.splitter_t;
    let r = rx.reflectivity();
    let xi = rx.mode_match;
    let xi_bar = (1.0 - xi * xi).max(0.0).sqrt();
    let f = fiber_amplitude;
    let term = |coeff: f64, path: Path| AmpTerm {
        coeff: coeff * f,
        phase: match path {
            Path::Short => rx.phase_short,
            Path::Long => rx.phase_long,
        },
        delay: match path {
            Path::Short => rx.delay_short,
            Path::Long => rx.delay_long,
        },
        path,
    };
    let rows = vec![
        TransformationRow {
            detector: 0,
            interfering: true,
            terms: vec![
                term(xi * t * t * rx.eta[0][0], Path::Short),
                term(xi * r * r * rx.eta[1][0], Path::Long),
            ],
        },
        TransformationRow {
            detector: 1,
            interfering: true,
            terms: vec![
                term(xi * t * r * rx.eta[0][1], Path::Short),
                term(-xi * t * r * rx.eta[1][1], Path::Long),
            ],
        },
        TransformationRow {
            detector: 0,
            interfering: false,
            terms: vec![term(xi_bar * t * t * rx.eta[0][0], Path::Short)],
        },
        TransformationRow {
            detector: 0,
            interfering: false,
            terms: vec![term(xi_bar * r * r * rx.eta[1][0], Path::Long)],
        },
        TransformationRow {
            detector: 1,
            interfering: false,
            terms: vec![term(xi_bar * t * r * rx.eta[0][1], Path::Short)],
        },
        TransformationRow {
            detector: 1,
            interfering: false,
            terms: vec![term(-xi_bar * t * r * rx.eta[1][1], Path::Long)],
        },
    ];
    Ok(ReducedTransformation { rows })
}

impl ReducedTransformation {
    /// Total outgoing power for a monochromatic input when both arm delays
    /// coincide (used by the power audit; with distinct delays the cross
    /// terms average out and the power is the plain coefficient square sum).
    pub fn power_at_equal_delays(&self) -> f64 {
        self.rows
            .iter()
            .map(|row| {
                let acc: C64 = row
                    .terms
                    .iter()
                    .map(|t| C64::from_polar(1.0, t.phase) * t.coeff)
                    .sum();
                acc.norm_sqr()
            })
            .sum()
    }

    /// Sum of squared term coefficients (upper bound on outgoing power).
    pub fn coefficient_power(&self) -> f64 {
        self.rows
            .iter()
            .flat_map(|row| row.terms.iter())
            .map(|t| t.coeff * t.coeff)
            .sum()
    }
}

/// One (x, y) term of the windowed projection operator
/// `sum K e^{i(phi_y - phi_x)} rect_I(t + tau_x) delta(t - t' + tau_x - tau_y)`.
#[derive(Debug, Clone, Copy)]
pub struct ProjTerm {
    /// Real signed coefficient K^{(D)}_{x,y}.
    pub coeff: f64,
    /// Constant phase phi_0^{(y)} - phi_0^{(x)}.
    pub phase: f64,
    /// Bra-path delay tau^{(x)}.
    pub delay_bra: f64,
    /// Ket-path delay tau^{(y)}.
    pub delay_ket: f64,
    pub path_bra: Path,
    pub path_ket: Path,
}

/// The operator s^dag P s for one detector over a set of time windows,
/// as a sum of windowed, relatively shifted delta terms.
#[derive(Debug, Clone)]
pub struct PathProjectionKernel {
    pub detector: usize,
    /// Disjoint half-open windows [t0, t1).
    pub intervals: Vec<(f64, f64)>,
    pub terms: Vec<ProjTerm>,
}

/// Build the path-projection kernel of one detector and window set from the
/// reduced transformation: coefficients are the per-output-mode products
/// conj(c_x) c_y summed over the detector's rows.
pub fn path_projection_kernel(
    rt: &ReducedTransformation,
    detector: usize,
    intervals: &[(f64, f64)],
) -> Result<PathProjectionKernel> {
    if detector > 1 {
        return Err(Error::Optics("detector index must be 0 or 1".into()));
    }
    for w in intervals {
        if !(w.0 < w.1) {
            return Err(Error::Optics("empty or reversed window".into()));
        }
    }
    let mut terms: Vec<ProjTerm> = Vec::new();
    for row in rt.rows.iter().filter(|r| r.detector == detector) {
        for bra in &row.terms {
            for ket in &row.terms {
                let coeff = bra.coeff * ket.coeff;
                if coeff == 0.0 {
                    continue;
                }
                // merge into an existing (x, y) slot when delays/phases match
                if let Some(t) = terms.iter_mut().find(|t| {
                    t.path_bra == bra.path
                        && t.path_ket == ket.path
                        && (t.delay_bra - bra.delay).abs() < 1e-18
                        && (t.delay_ket - ket.delay).abs() < 1e-18
                        && (t.phase - (ket.phase - bra.phase)).abs() < 1e-15
                }) {
                    t.coeff += coeff;
                } else {
                    terms.push(ProjTerm {
                        coeff,
                        phase: ket.phase - bra.phase,
                        delay_bra: bra.delay,
                        delay_ket: ket.delay,
                        path_bra: bra.path,
                        path_ket: ket.path,
                    });
                }
            }
        }
    }
    Ok(PathProjectionKernel { detector, intervals: intervals.to_vec(), terms })
}

impl PathProjectionKernel {
    /// Coefficient K^{(D)}_{x,y} summed over output modes.
    pub fn table_coefficient(&self, bra: Path, ket: Path) -> f64 {
        self.terms
            .iter()
            .filter(|t| t.path_bra == bra && t.path_ket == ket)
            .map(|t| t.coeff)
            .sum()
    }

    /// Flip the sign of the cross-path terms (fault-injection hook for the
    /// mutation test of the coefficient table).
    pub fn inject_cross_sign_fault(&mut self) {
        for t in self.terms.iter_mut() {
            if t.path_bra != t.path_ket {
                t.coeff = -t.coeff;
            }
        }
    }

    /// Grid row ranges covered by the windows after shifting by `delay`.
    /// Boundaries are snapped to grid indices (half-open [lo, hi)), keeping
    /// the discrete operator exactly Hermitian for commensurate delays.
    fn row_ranges(&self, grid: &TimeGrid, delay: f64) -> Vec<std::ops::Range<usize>> {
        let dt = grid.step();
        let t0 = grid.points[0];
        let n = grid.len() as f64;
        self.intervals
            .iter()
            .map(|&(a, b)| {
                let lo = (((a - delay - t0) / dt) - 1e-6).ceil().clamp(0.0, n) as usize;
                let hi = (((b - delay - t0) / dt) - 1e-6).ceil().clamp(0.0, n) as usize;
                lo..hi
            })
            .collect()
    }

    /// Apply W to a time-mode matrix: (W M)[i, :] = sum_terms coeff e^{i phi}
    /// rect(t_i + tau_x) M[i + (tau_x - tau_y)/dt, :].
    pub fn apply_to_modes(
        &self,
        grid: &TimeGrid,
        modes: &Array2<C64>,
    ) -> Result<Array2<C64>> {
        let n = grid.len();
        if modes.nrows() != n {
            return Err(Error::Optics("mode matrix does not match the time grid".into()));
        }
        let mut out = Array2::zeros((n, modes.ncols()));
        for term in &self.terms {
            let shift = grid.shift_steps(term.delay_bra - term.delay_ket)?;
            let c = C64::from_polar(1.0, term.phase) * term.coeff;
            for range in self.row_ranges(grid, term.delay_bra) {
                for i in range {
                    let j = i as i64 + shift;
                    if j < 0 || j >= n as i64 {
                        continue;
                    }
                    let j = j as usize;
                    for col in 0..modes.ncols() {
                        out[[i, col]] += c * modes[[j, col]];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Dense materialization of W on the grid (oracle/test use).
    pub fn materialize(&self, grid: &TimeGrid) -> Result<Array2<C64>> {
        let n = grid.len();
        let eye = Array2::from_shape_fn((n, n), |(i, j)| {
            if i == j { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) }
        });
        self.apply_to_modes(grid, &eye)
    }
}

/// Apply chromatic dispersion phases to a frequency-basis JSA (both photons
/// delayed through their respective fibers).
pub fn apply_dispersion(
    jsa: &JointSpectralAmplitude,
    link_a: &FiberLink,
    link_b: &FiberLink,
) -> Result<JointSpectralAmplitude> {
    let grid = jsa.grid()?;
    let mut out = jsa.clone();
    for ((i, j), v) in out.kernel.data.indexed_iter_mut() {
        let ph = link_a.dispersion_phase(grid.points[i]) + link_b.dispersion_phase(grid.points[j]);
        *v *= C64::from_polar(1.0, ph);
    }
    Ok(out)
}

/// Apply chromatic dispersion to a frequency-basis covariance: physical
/// modes of slot A pick up e^{i phi_A(w)}, of slot B e^{i phi_B(w)}.
pub fn apply_dispersion_cov(
    cov: &RenormalizedCovariance,
    link_a: &FiberLink,
    link_b: &FiberLink,
) -> Result<RenormalizedCovariance> {
    let ga = match &cov.grid_a {
        AxisGrid::Freq(g) => g.clone(),
        AxisGrid::Time(_) => {
            return Err(Error::Optics("dispersion must be applied in the frequency basis".into()))
        }
    };
    let gb = match &cov.grid_b {
        AxisGrid::Freq(g) => g.clone(),
        AxisGrid::Time(_) => {
            return Err(Error::Optics("dispersion must be applied in the frequency basis".into()))
        }
    };
    let da: Vec<C64> =
        ga.points.iter().map(|&w| C64::from_polar(1.0, link_a.dispersion_phase(w))).collect();
    let db: Vec<C64> =
        gb.points.iter().map(|&w| C64::from_polar(1.0, link_b.dispersion_phase(w))).collect();
    let mut out = cov.clone();
    for ((i, j), v) in out.aa.indexed_iter_mut() {
        *v *= da[i] * da[j].conj();
    }
    // pair block carries same-sign physical phases on both arguments
    for ((i, j), v) in out.ab.indexed_iter_mut() {
        *v *= da[i] * db[j];
    }
    for ((i, j), v) in out.ba.indexed_iter_mut() {
        *v *= da[j].conj() * db[i].conj();
    }
    for ((i, j), v) in out.bb.indexed_iter_mut() {
        *v *= db[i].conj() * db[j];
    }
    Ok(out)
}

/// Per-pump-path time-domain mode data.
#[derive(Debug, Clone)]
pub struct PumpPathModes {
    pub k_coeff: f64,
    pub phase: f64,
    pub delay: f64,
    /// Alice time modes (physical), n_t x K, weight-embedded.
    pub modes_a: Array2<C64>,
    /// Bob time modes (physical), n_t x K, weight-embedded.
    pub modes_b: Array2<C64>,
    /// (c_N(sigma_z) - 1)/2 per mode.
    pub diag_cosh: Array1<f64>,
    /// s_N(sigma_z)/2 per mode.
    pub diag_sinh: Array1<f64>,
}

/// Time-basis source state in mode-factorized form (the pump split keeps one
/// subnormalized squeezer per pump path).
#[derive(Debug, Clone)]
pub struct TimeModeState {
    pub time_grid: Arc<TimeGrid>,
    pub paths: Vec<PumpPathModes>,
    pub form: CovarianceForm,
    pub process: ProcessType,
}

/// Truncated hyperbolic diagonals ((c_N - 1)/2, s_N/2); `None` = exact.
pub fn hyperbolic_diagonals(sigma: &Array1<f64>, order: Option<usize>) -> (Array1<f64>, Array1<f64>) {
    match order {
        None => (
            sigma.mapv(|s| 0.5 * (s.cosh() - 1.0)),
            sigma.mapv(|s| 0.5 * s.sinh()),
        ),
        Some(n) => {
            let mut cosh_part = Array1::zeros(sigma.len());
            let mut sinh_part = Array1::zeros(sigma.len());
            for (k, &s) in sigma.iter().enumerate() {
                let mut term = 1.0;
                let (mut c, mut sn) = (0.0, 0.0);
                for j in 1..=n {
                    term *= s / j as f64;
                    if j % 2 == 0 {
                        c += term;
                    } else {
                        sn += term;
                    }
                }
                cosh_part[k] = 0.5 * c;
                sinh_part[k] = 0.5 * sn;
            }
            (cosh_part, sinh_part)
        }
    }
}

fn shift_rows(m: &Array2<C64>, steps: i64) -> Array2<C64> {
    let n = m.nrows() as i64;
    let mut out = Array2::zeros(m.raw_dim());
    for i in 0..m.nrows() as i64 {
        let src = i - steps;
        if src < 0 || src >= n {
            continue;
        }
        for c in 0..m.ncols() {
            out[[i as usize, c]] = m[[src as usize, c]];
        }
    }
    out
}

/// Inputs for [`build_time_mode_state`]: frequency-domain physical mode
/// matrices on a full uniform grid.
pub struct FreqModeInputs<'a> {
    pub freq_grid: &'a FrequencyGrid,
    /// Physical Alice modes (columns), embedded.
    pub modes_a: Array2<C64>,
    /// Physical Bob modes (columns), embedded.
    pub modes_b: Array2<C64>,
    /// Base squeezing parameters per mode (before pump-path scaling).
    pub sigma: Array1<f64>,
}

/// Transform the source to the time basis: apply dispersion phases, Fourier
/// transform the physical modes and realize pump delays as exact grid
/// shifts.
pub fn build_time_mode_state(
    inputs: &FreqModeInputs,
    split: &PumpSplitState,
    link_a: &FiberLink,
    link_b: &FiberLink,
    time_grid: Arc<TimeGrid>,
    truncation: Option<usize>,
    process: ProcessType,
    form: CovarianceForm,
) -> Result<TimeModeState> {
    let g = inputs.freq_grid;
    let mut ma = inputs.modes_a.clone();
    let mut mb = inputs.modes_b.clone();
    for ((i, _), v) in ma.indexed_iter_mut() {
        *v *= C64::from_polar(1.0, link_a.dispersion_phase(g.points[i]));
    }
    for ((i, _), v) in mb.indexed_iter_mut() {
        *v *= C64::from_polar(1.0, link_b.dispersion_phase(g.points[i]));
    }
    let ta = fourier_modes(g, &time_grid, &ma, false)?;
    let tb = fourier_modes(g, &time_grid, &mb, false)?;
    let mut paths = Vec::new();
    for p in split.paths() {
        let steps = time_grid.shift_steps(p.delay)?;
        let (dc, ds) = hyperbolic_diagonals(&inputs.sigma.mapv(|s| p.k_coeff * s), truncation);
        paths.push(PumpPathModes {
            k_coeff: p.k_coeff,
            phase: p.phase,
            delay: p.delay,
            modes_a: shift_rows(&ta, steps),
            modes_b: shift_rows(&tb, steps),
            diag_cosh: dc,
            diag_sinh: ds,
        });
    }
    let state = TimeModeState { time_grid, paths, form, process };
    state.check_edge_mass()?;
    Ok(state)
}

impl TimeModeState {
    /// Photon-weighted relative mode mass in the outermost grid cells; large
    /// values mean the time window clips the physically relevant state.
    /// Modes are weighted by their population so that numerically tiny
    /// Schmidt tail modes (which can be delocalized eigenvector noise) do
    /// not trigger false alarms.
    pub fn edge_mass(&self) -> f64 {
        let n = self.time_grid.len();
        let edge = 4.min(n / 2);
        let mut worst: f64 = 0.0;
        for p in &self.paths {
            for m in [&p.modes_a, &p.modes_b] {
                let mut weighted_total = 0.0;
                let mut weighted_edge = 0.0;
                for c in 0..m.ncols() {
                    let total: f64 = (0..n).map(|i| m[[i, c]].norm_sqr()).sum();
                    let e: f64 = (0..edge)
                        .map(|i| m[[i, c]].norm_sqr() + m[[n - 1 - i, c]].norm_sqr())
                        .sum();
                    weighted_total += p.diag_cosh[c] * total;
                    weighted_edge += p.diag_cosh[c] * e;
                }
                if weighted_total > 0.0 {
                    worst = worst.max(weighted_edge / weighted_total);
                }
            }
        }
        worst
    }

    fn check_edge_mass(&self) -> Result<()> {
        let e = self.edge_mass();
        if e > 1e-6 {
            return Err(Error::Numerical(format!(
                "time window clips the state (edge mass {e:.3e}); enlarge the time grid"
            )));
        }
        Ok(())
    }

    pub fn n_modes(&self) -> usize {
        self.paths.first().map_or(0, |p| p.diag_cosh.len())
    }

    /// Mean photons per repetition arriving at the selected party behind the
    /// given full-time projection kernel (real part of Tr[W Gamma_slot]).
    pub fn mean_photons(&self, kernel: &PathProjectionKernel, party_b: bool) -> Result<f64> {
        let mut acc = 0.0;
        for p in &self.paths {
            let modes = if party_b { &p.modes_b } else { &p.modes_a };
            let w_modes = kernel.apply_to_modes(&self.time_grid, modes)?;
            // Tr(W M D M^H) = sum_k D_k <m_k, W m_k>
            for k in 0..modes.ncols() {
                let mut dot = C64::new(0.0, 0.0);
                for i in 0..modes.nrows() {
                    dot += modes[[i, k]].conj() * w_modes[[i, k]];
                }
                acc += p.diag_cosh[k] * dot.re;
            }
        }
        Ok(acc)
    }

    /// Total mean photons at both parties (2 mu for the halved form).
    pub fn total_photons(&self) -> f64 {
        let mut acc = 0.0;
        for p in &self.paths {
            for (m, _) in [(&p.modes_a, 0), (&p.modes_b, 1)] {
                for k in 0..m.ncols() {
                    let norm: f64 = (0..m.nrows()).map(|i| m[[i, k]].norm_sqr()).sum();
                    acc += p.diag_cosh[k] * norm;
                }
            }
        }
        acc
    }

    /// Dense time-basis covariance (oracle/test use; scales with n_t^2).
    pub fn dense_covariance(&self) -> RenormalizedCovariance {
        let n = self.time_grid.len();
        let mut aa = Array2::<C64>::zeros((n, n));
        let mut ab = Array2::<C64>::zeros((n, n));
        let mut bb = Array2::<C64>::zeros((n, n));
        for p in &self.paths {
            let vst = p.modes_b.mapv(|z| z.conj());
            let scaled = |m: &Array2<C64>, d: &Array1<f64>| {
                let mut s = m.clone();
                for ((_, k), v) in s.indexed_iter_mut() {
                    *v *= d[k];
                }
                s
            };
            aa = aa + linalg::matmul(&scaled(&p.modes_a, &p.diag_cosh), &linalg::adjoint(&p.modes_a));
            bb = bb + linalg::matmul(&scaled(&vst, &p.diag_cosh), &linalg::adjoint(&vst));
            let ph = C64::from_polar(1.0, p.phase);
            let mut ab_z =
                linalg::matmul(&scaled(&p.modes_a, &p.diag_sinh), &linalg::adjoint(&vst));
            ab_z.mapv_inplace(|z| z * ph);
            ab = ab + ab_z;
        }
        let ba = linalg::adjoint(&ab);
        RenormalizedCovariance {
            aa,
            ab,
            ba,
            bb,
            grid_a: AxisGrid::Time(self.time_grid.clone()),
            grid_b: AxisGrid::Time(self.time_grid.clone()),
            process: self.process,
            form: self.form,
            truncation_order: None,
        }
    }
}

/// The reduced weighted operator: det(1 + W Gamma) evaluated on the
/// pump-path mode basis via the determinant reduction.
pub struct AssembledOperator {
    /// D X^H W X, dimension 2 K n_paths.
    pub matrix: Array2<C64>,
    pub form: CovarianceForm,
}

/// Assemble the final weighted covariance in reduced (mode-basis) form from
/// per-party window kernels. The B-party kernels act on the conjugated slot.
pub fn final_covariance(
    state: &TimeModeState,
    kernels_a: &[PathProjectionKernel],
    kernels_b: &[PathProjectionKernel],
) -> Result<AssembledOperator> {
    let k = state.n_modes();
    let np = state.paths.len();
    let dim = 2 * k * np;
    let grid = &state.time_grid;
    // W-applied mode stacks per path
    let mut wa: Vec<Array2<C64>> = Vec::with_capacity(np);
    let mut wb: Vec<Array2<C64>> = Vec::with_capacity(np);
    for p in &state.paths {
        let mut acc_a = Array2::zeros((grid.len(), k));
        for kern in kernels_a {
            acc_a = acc_a + kern.apply_to_modes(grid, &p.modes_a)?;
        }
        let mut acc_b = Array2::zeros((grid.len(), k));
        for kern in kernels_b {
            acc_b = acc_b + kern.apply_to_modes(grid, &p.modes_b)?;
        }
        wa.push(acc_a);
        wb.push(acc_b);
    }
    // G[z, z'] blocks: a-slot = A_z^H W_A A_z', b-slot = conj(B_z^H W_B B_z')
    let mut g = Array2::<C64>::zeros((dim, dim));
    for (zi, pz) in state.paths.iter().enumerate() {
        for (zj, _) in state.paths.iter().enumerate() {
            let ga = linalg::matmul(&linalg::adjoint(&pz.modes_a), &wa[zj]);
            let gb = linalg::matmul(&linalg::adjoint(&pz.modes_b), &wb[zj]);
            let (r0, c0) = (2 * k * zi, 2 * k * zj);
            for i in 0..k {
                for j in 0..k {
                    g[[r0 + i, c0 + j]] = ga[[i, j]];
                    g[[r0 + k + i, c0 + k + j]] = gb[[i, j]].conj();
                }
            }
        }
    }
    // D = blockdiag over paths of [[Dc, e^{i phi} Ds], [e^{-i phi} Ds, Dc]]
    let mut m = Array2::<C64>::zeros((dim, dim));
    for (zi, p) in state.paths.iter().enumerate() {
        let ph = C64::from_polar(1.0, p.phase);
        let r0 = 2 * k * zi;
        for i in 0..k {
            let dc = p.diag_cosh[i];
            let ds = p.diag_sinh[i];
            for c in 0..dim {
                let row_a = g[[r0 + i, c]];
                let row_b = g[[r0 + k + i, c]];
                m[[r0 + i, c]] = dc * row_a + ph * ds * row_b;
                m[[r0 + k + i, c]] = ph.conj() * ds * row_a + dc * row_b;
            }
        }
    }
    Ok(AssembledOperator { matrix: m, form: state.form })
}

impl AssembledOperator {
    /// Vacuum probability |det(1 + W Gamma)|^{-1} (halved form) or
    /// det^{-1/2} (full form).
    pub fn vacuum_probability(&self) -> Result<f64> {
        let lu = linalg::lu_det(&linalg::one_plus(&self.matrix));
        let lu = match lu {
            Ok(l) => l,
            Err(_) => {
                // singular 1 + M means vanishing vacuum probability support;
                // treat hard singularity as numerical breakdown
                return Err(Error::Numerical("determinant breakdown in vacuum probability".into()));
            }
        };
        let p = match self.form {
            CovarianceForm::Full => {
                if lu.phase.re < 0.5 {
                    return Err(Error::Numerical(
                        "non-positive determinant for full-form covariance".into(),
                    ));
                }
                (-0.5 * lu.log_abs).exp()
            }
            CovarianceForm::Halved => (-lu.log_abs).exp(),
        };
        if !p.is_finite() {
            return Err(Error::Numerical("vacuum probability not finite".into()));
        }
        if p > 1.001 {
            return Err(Error::Numerical(format!(
                "vacuum probability {p:.6} exceeds one (invalid state or weights)"
            )));
        }
        Ok(p.min(1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{schmidt, split_pump, SchmidtOptions};
    use crate::grid::{make_grid, symplectic_fourier, unembed_weights, BlockKind};
    use crate::jsa::{assemble_jsa, PhaseMatching, PumpAmplitude};
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    const GHZ: f64 = 2.0 * PI * 1e9;

    #[test]
    fn fiber_loss_matches_power_law() {
        let link = FiberLink { length_km: 27.3, loss_db_per_km: 0.2, beta2_s2_per_km: 0.0 };
        let amp = link.amplitude_transmittivity();
        let power_law = 10f64.powf(-0.2 * 27.3 / 10.0);
        assert_relative_eq!(amp * amp, power_law, max_relative = 1e-12);
    }

    fn test_jsa() -> JointSpectralAmplitude {
        let grid = Arc::new(make_grid(0.0, 12.0 * GHZ, 192).unwrap());
        let pump_grid = Arc::new(make_grid(0.0, 6.0 * GHZ, 257).unwrap());
        let pump = PumpAmplitude::gaussian_transform_limited(pump_grid, 0.4e-9).unwrap();
        let pm_grid = Arc::new(make_grid(0.0, 30.0 * GHZ, 769).unwrap());
        let pm = PhaseMatching::gaussian(pm_grid, 2.5 * GHZ).unwrap();
        assemble_jsa(&pump, &pm, grid, ProcessType::TypeII).unwrap()
    }

    #[test]
    fn dispersion_identity_and_pure_phase() {
        let jsa = test_jsa();
        let zero = FiberLink::lossless(0.0, -2.17e-26 * 1e3);
        let out = apply_dispersion(&jsa, &zero, &zero).unwrap();
        assert!(linalg::max_abs(&(&out.kernel.data - &jsa.kernel.data)) == 0.0);
        let link = FiberLink::lossless(40.0, -2.17e-26 * 1e3);
        let disp = apply_dispersion(&jsa, &link, &link).unwrap();
        for (a, b) in disp.kernel.data.iter().zip(jsa.kernel.data.iter()) {
            assert!((a.norm() - b.norm()).abs() < 1e-14);
        }
    }

    #[test]
    fn equal_fiber_dispersion_broadens_t_minus_only() {
        // broad anti-diagonal JSA (narrow in time) so dispersion doubles the
        // t_- width while the pump-limited t_+ width stays put
        let grid = Arc::new(make_grid(0.0, 60.0 * GHZ, 384).unwrap());
        let pump_grid = Arc::new(make_grid(0.0, 6.0 * GHZ, 257).unwrap());
        let pump = PumpAmplitude::gaussian_transform_limited(pump_grid, 0.4e-9).unwrap();
        let pm_grid = Arc::new(make_grid(0.0, 150.0 * GHZ, 769).unwrap());
        let pm = PhaseMatching::gaussian(pm_grid, 15.0 * GHZ).unwrap();
        let jsa = assemble_jsa(&pump, &pm, grid.clone(), ProcessType::TypeII).unwrap();
        let link = FiberLink::lossless(107.0, -2.17e-26 * 1e3);
        let disp = apply_dispersion(&jsa, &link, &link).unwrap();
        let t = crate::grid::TimeGrid::dual_to(&grid, -0.5 * 2.0 * PI / grid.step()).unwrap();
        let moments = |j: &JointSpectralAmplitude| {
            let kt = symplectic_fourier(&j.kernel, &t).unwrap();
            let plain = unembed_weights(&kt).unwrap();
            let (mut m0, mut mp, mut mm) = (0.0, 0.0, 0.0);
            for (i, &ta) in t.points.iter().enumerate() {
                for (jj, &tb) in t.points.iter().enumerate() {
                    let p = plain.data[[i, jj]].norm_sqr();
                    m0 += p;
                    mp += p * (ta + tb) * (ta + tb);
                    mm += p * (ta - tb) * (ta - tb);
                }
            }
            ((mp / m0).sqrt(), (mm / m0).sqrt())
        };
        let (sp0, sm0) = moments(&jsa);
        let (sp1, sm1) = moments(&disp);
        assert!(sm1 > 2.0 * sm0, "t_- should broaden: {sm0} -> {sm1}");
        assert!((sp1 / sp0 - 1.0).abs() < 0.01, "t_+ should be unchanged: {sp0} -> {sp1}");
    }

    #[test]
    fn balanced_michelson_dark_port() {
        let rx = ReceiverInterferometer {
            delay_long: 0.0,
            ..ReceiverInterferometer::ideal(0.0)
        };
        let rt = build_reduced_transformation(&rx, 1.0).unwrap();
        // detector-1 interfering row must vanish for matched phases/delays
        let row = rt.rows.iter().find(|r| r.detector == 1 && r.interfering).unwrap();
        let acc: C64 = row.terms.iter().map(|t| C64::from_polar(1.0, t.phase) * t.coeff).sum();
        assert!(acc.norm() < 1e-15, "dark port leaks {}", acc.norm());
    }

    #[test]
    fn zero_mode_match_kills_interfering_rows() {
        let mut rx = ReceiverInterferometer::ideal(1e-9);
        rx.mode_match = 0.0;
        let rt = build_reduced_transformation(&rx, 1.0).unwrap();
        for row in rt.rows.iter().filter(|r| r.interfering) {
            for t in &row.terms {
                assert_eq!(t.coeff, 0.0);
            }
        }
        let mm_power: f64 = rt
            .rows
            .iter()
            .filter(|r| !r.interfering)
            .flat_map(|r| r.terms.iter())
            .map(|t| t.coeff * t.coeff)
            .sum();
        assert!(mm_power > 0.0);
    }

    #[test]
    fn lossless_power_audit() {
        for xi in [1.0, 0.83, 0.4] {
            for t in [std::f64::consts::FRAC_1_SQRT_2, 0.6, 0.9] {
                let mut rx = ReceiverInterferometer::ideal(0.0);
                rx.mode_match = xi;
                rx.splitter_t = t;
                rx.phase_short = 0.3;
                rx.phase_long = -0.9;
                let rt = build_reduced_transformation(&rx, 1.0).unwrap();
                // time-integrated power with distinct delays: T^4 + R^4 +
                // 2 T^2 R^2 = 1 from the coefficient square sum
                assert_relative_eq!(rt.coefficient_power(), 1.0, epsilon = 1e-12);
                // equal-delay monochromatic audit also equals one
                assert_relative_eq!(rt.power_at_equal_delays(), 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn table_coefficients_match_closed_form() {
        let mut rx = ReceiverInterferometer::ideal(2e-9);
        rx.mode_match = 0.9;
        rx.splitter_t = 0.75;
        rx.eta = [[0.95, 0.85], [0.9, 0.8]];
        let rt = build_reduced_transformation(&rx, 1.0).unwrap();
        let t2 = rx.splitter_t * rx.splitter_t;
        let r2 = 1.0 - t2;
        let xi2 = rx.mode_match * rx.mode_match;
        let k0 = path_projection_kernel(&rt, 0, &[(0.0, 1e-9)]).unwrap();
        assert_relative_eq!(
            k0.table_coefficient(Path::Short, Path::Short),
            rx.eta[0][0] * rx.eta[0][0] * t2 * t2,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            k0.table_coefficient(Path::Short, Path::Long),
            rx.eta[0][0] * rx.eta[1][0] * xi2 * t2 * r2,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            k0.table_coefficient(Path::Long, Path::Long),
            rx.eta[1][0] * rx.eta[1][0] * r2 * r2,
            max_relative = 1e-12
        );
        let k1 = path_projection_kernel(&rt, 1, &[(0.0, 1e-9)]).unwrap();
        assert_relative_eq!(
            k1.table_coefficient(Path::Short, Path::Short),
            rx.eta[0][1] * rx.eta[0][1] * t2 * r2,
            max_relative = 1e-12
        );
        // the cross term of detector 1 carries the minus sign
        assert_relative_eq!(
            k1.table_coefficient(Path::Short, Path::Long),
            -rx.eta[0][1] * rx.eta[1][1] * xi2 * t2 * r2,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            k1.table_coefficient(Path::Long, Path::Long),
            rx.eta[1][1] * rx.eta[1][1] * t2 * r2,
            max_relative = 1e-12
        );
    }

    #[test]
    fn single_path_interferometer_keeps_only_ss() {
        let mut rx = ReceiverInterferometer::ideal(2e-9);
        rx.splitter_t = 1.0; // R = 0
        rx.eta = [[0.9, 0.9], [0.9, 0.9]];
        let rt = build_reduced_transformation(&rx, 1.0).unwrap();
        let k0 = path_projection_kernel(&rt, 0, &[(0.0, 1e-9)]).unwrap();
        assert_relative_eq!(
            k0.table_coefficient(Path::Short, Path::Short),
            0.9 * 0.9,
            max_relative = 1e-12
        );
        assert_eq!(k0.table_coefficient(Path::Short, Path::Long), 0.0);
        assert_eq!(k0.table_coefficient(Path::Long, Path::Long), 0.0);
    }

    #[test]
    fn projection_kernel_hermitian() {
        let mut rx = ReceiverInterferometer::ideal(2e-10);
        rx.phase_short = 0.4;
        rx.phase_long = 1.1;
        rx.eta = [[0.9, 0.8], [0.85, 0.7]];
        rx.mode_match = 0.93;
        let rt = build_reduced_transformation(&rx, 0.9).unwrap();
        let grid = TimeGrid::uniform(-1e-9, 1e-10, 40).unwrap();
        let k = path_projection_kernel(&rt, 0, &[(-0.4e-9, 0.9e-9)]).unwrap();
        let w = k.materialize(&grid).unwrap();
        let dev = linalg::max_abs(&(&w - &linalg::adjoint(&w)));
        assert!(dev < 1e-14, "W not Hermitian: {dev}");
    }

    fn small_state_with_tp(mu: f64, delay_steps: i64, phi_p: f64, t_pump: f64) -> TimeModeState {
        let jsa = test_jsa();
        let r_pump = (1.0 - t_pump * t_pump).max(0.0).sqrt();
        let norm = (t_pump.powi(4) + r_pump.powi(4)).sqrt();
        let ks = (t_pump * t_pump / norm, r_pump * r_pump / norm);
        let sd = schmidt(&jsa, 1.0, SchmidtOptions::default()).unwrap();
        let gain =
            crate::covariance::gain_for_mu(&sd.coefficients, ProcessType::TypeII, ks, mu).unwrap();
        let sd = schmidt(&jsa, gain, SchmidtOptions::default()).unwrap();
        let grid = jsa.grid().unwrap();
        let time = Arc::new(
            TimeGrid::dual_to(&grid, -0.35 * 2.0 * PI / grid.step()).unwrap(),
        );
        let delay = delay_steps as f64 * time.step();
        let split = split_pump(&sd, t_pump, phi_p, delay, 0.4e-9).unwrap();
        let inputs = FreqModeInputs {
            freq_grid: &grid,
            modes_a: sd.modes_signal.clone(),
            modes_b: sd.modes_idler.mapv(|z| z.conj()),
            sigma: sd.squeezing(),
        };
        build_time_mode_state(
            &inputs,
            &split,
            &FiberLink::lossless(0.0, 0.0),
            &FiberLink::lossless(0.0, 0.0),
            time,
            None,
            ProcessType::TypeII,
            CovarianceForm::Halved,
        )
        .unwrap()
    }

    fn small_state(mu: f64, delay_steps: i64, phi_p: f64) -> TimeModeState {
        small_state_with_tp(mu, delay_steps, phi_p, crate::covariance::BALANCED)
    }

    #[test]
    fn time_state_preserves_photon_number() {
        let mu = 0.05;
        let state = small_state(mu, 0, 0.0);
        // total photons = 2 mu (pairs at A and B)
        assert_relative_eq!(state.total_photons(), 2.0 * mu, max_relative = 1e-6);
    }

    #[test]
    fn trivial_window_reduces_to_scalar_times_state() {
        // trivial receivers, full window: vacuum probability of everything =
        // product over pump paths and modes of 1/cosh^2(sigma_z/2). The pump
        // delay keeps the two pulses independent.
        let mu = 0.04;
        let state = small_state_with_tp(mu, 0, 0.0, 1.0); // single pump path
        let grid = state.time_grid.clone();
        let span = (grid.points[0], grid.points[grid.len() - 1] + grid.step());
        let rx = ReceiverInterferometer::ideal(0.0);
        let rt = build_reduced_transformation(&rx, 1.0).unwrap();
        let k0 = path_projection_kernel(&rt, 0, &[span]).unwrap();
        let k1 = path_projection_kernel(&rt, 1, &[span]).unwrap();
        let op = final_covariance(&state, &[k0.clone(), k1.clone()], &[k0, k1]).unwrap();
        let p = op.vacuum_probability().unwrap();
        let jsa = test_jsa();
        let sd = schmidt(&jsa, 1.0, SchmidtOptions::default()).unwrap();
        let gain = crate::covariance::gain_for_mu(
            &sd.coefficients,
            ProcessType::TypeII,
            (1.0, 0.0),
            mu,
        )
        .unwrap();
        let expect: f64 = sd
            .coefficients
            .iter()
            .map(|s| 1.0 / (0.5 * gain * s).cosh().powi(2))
            .product();
        assert_relative_eq!(p, expect, max_relative = 1e-8);
    }

    #[test]
    fn reduced_pipeline_matches_dense_time_covariance() {
        let state = small_state(0.03, 12, 0.7);
        let grid = state.time_grid.clone();
        let dt = grid.step();
        let mut rx = ReceiverInterferometer::ideal(8.0 * dt);
        rx.phase_long = 0.6;
        rx.eta = [[0.9, 0.8], [0.7, 0.95]];
        rx.mode_match = 0.9;
        let rt = build_reduced_transformation(&rx, 0.8).unwrap();
        let win_a = (grid.points[grid.len() / 4], grid.points[grid.len() / 2]);
        let win_b = (grid.points[grid.len() / 3], grid.points[2 * grid.len() / 3]);
        let ka = path_projection_kernel(&rt, 0, &[win_a]).unwrap();
        let kb = path_projection_kernel(&rt, 1, &[win_b]).unwrap();
        let op = final_covariance(&state, &[ka.clone()], &[kb.clone()]).unwrap();
        let p_fast = op.vacuum_probability().unwrap();
        // dense route
        let cov = state.dense_covariance();
        let wa = ka.materialize(&grid).unwrap();
        let wb = kb.materialize(&grid).unwrap();
        let p_dense = crate::covariance::vacuum_probability(
            &cov,
            &crate::covariance::BlockWeight::Dense { a: wa, b: wb },
        )
        .unwrap();
        assert!(
            (p_fast - p_dense).abs() < 1e-9,
            "low-rank {p_fast} vs dense {p_dense}"
        );
    }

    #[test]
    fn delays_must_be_commensurate() {
        let state = small_state(0.02, 0, 0.0);
        let grid = state.time_grid.clone();
        let rx = ReceiverInterferometer::ideal(0.5 * grid.step());
        let rt = build_reduced_transformation(&rx, 1.0).unwrap();
        let k = path_projection_kernel(&rt, 0, &[(0.0, 1e-9)]).unwrap();
        assert!(k.apply_to_modes(&grid, &state.paths[0].modes_a).is_err());
    }
}

