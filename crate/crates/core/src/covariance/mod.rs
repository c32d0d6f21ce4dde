//! Renormalized-covariance machinery: Schmidt decomposition, exact and
//! series-truncated covariances, Fredholm determinants, pump-interferometer
//! splitting and the mean-pair-number calibration.
//!
//! Two storage forms are used. Type-0 sources over a single mode family keep
//! the full doubled (a, a-dagger) structure; type-II sources and the
//! reordered post-WDM type-0 state keep one half of the conjugate-pair
//! structure, with the second party living in the conjugated slot. Vacuum
//! probabilities are `det^{-1/2}` for the full form and `|det|^{-1}` for the
//! halved form.
//!
//! Slot conventions for the halved form (fixed by requiring that physical
//! phases add up as `phi_A + phi_B - phi_p` in the central-bin coincidence):
//! physical operators acting on party B enter complex-conjugated, and the
//! B-side frequency-to-time transform uses the conjugate Fourier kernel.

pub mod fock;

use std::f64::consts::SQRT_2;

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::{AxisGrid, DiscretizedKernel};
use crate::jsa::JointSpectralAmplitude;
use crate::linalg::{self, C64};

/// Down-conversion process class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProcessType {
    /// Co-polarized pairs in a single mode family (type-0/I).
    Type0,
    /// Cross-polarized pairs in two mode families.
    TypeII,
}

impl ProcessType {
    /// Multiplier mapping Schmidt coefficients to squeezing parameters.
    pub fn squeezing_factor(self) -> f64 {
        match self {
            ProcessType::Type0 => 2.0,
            ProcessType::TypeII => 1.0,
        }
    }
}

/// Options for the Schmidt decomposition.
#[derive(Debug, Clone, Copy)]
pub struct SchmidtOptions {
    /// Drop modes with coefficients below `rel_tol * sigma_max`.
    pub rel_tol: f64,
    /// Hard cap on the retained mode count.
    pub max_modes: usize,
}

impl Default for SchmidtOptions {
    fn default() -> Self {
        SchmidtOptions { rel_tol: 1e-6, max_modes: 256 }
    }
}

/// Schmidt decomposition of a JSA kernel with derived squeezing parameters.
#[derive(Debug, Clone)]
pub struct SchmidtDecomposition {
    /// Signal-side modes (columns, weight-embedded basis).
    pub modes_signal: Array2<C64>,
    /// Idler-side modes (columns, weight-embedded basis).
    pub modes_idler: Array2<C64>,
    /// Schmidt coefficients, descending.
    pub coefficients: Array1<f64>,
    /// Gain coefficient C.
    pub gain: f64,
    pub process: ProcessType,
    pub grid_signal: AxisGrid,
    pub grid_idler: AxisGrid,
}

impl SchmidtDecomposition {
    /// Squeezing parameters `sigma_k` (2 C Sigma for type-0, C Sigma for type-II).
    pub fn squeezing(&self) -> Array1<f64> {
        let f = self.process.squeezing_factor() * self.gain;
        self.coefficients.mapv(|s| f * s)
    }

    pub fn n_modes(&self) -> usize {
        self.coefficients.len()
    }
}

/// Schmidt decomposition of a weight-embedded kernel via the Gram
/// eigenproblem (idler side), with signal modes recovered as `psi V / sigma`.
pub fn schmidt_kernel(
    kernel: &DiscretizedKernel,
    gain: f64,
    process: ProcessType,
    opts: SchmidtOptions,
) -> Result<SchmidtDecomposition> {
    if !kernel.weight_embedded {
        return Err(Error::Covariance("schmidt requires a weight-embedded kernel".into()));
    }
    if !kernel.data.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        return Err(Error::Covariance("schmidt: non-finite kernel entries".into()));
    }
    let psi = &kernel.data;
    let gram = linalg::matmul(&linalg::adjoint(psi), psi);
    let (vals, vecs) = linalg::hermitian_eigen(&gram)?;
    let sigma_max = vals[0].max(0.0).sqrt();
    if sigma_max == 0.0 {
        return Err(Error::Covariance("schmidt: zero kernel".into()));
    }
    let mut keep = 0usize;
    for k in 0..vals.len() {
        let s = vals[k].max(0.0).sqrt();
        if s >= opts.rel_tol * sigma_max && keep < opts.max_modes {
            keep += 1;
        } else {
            break;
        }
    }
    let n_rows = psi.nrows();
    let n_cols = psi.ncols();
    let mut v = Array2::zeros((n_cols, keep));
    let mut sig = Array1::zeros(keep);
    for k in 0..keep {
        sig[k] = vals[k].max(0.0).sqrt();
        for i in 0..n_cols {
            v[[i, k]] = vecs[[i, k]];
        }
    }
    let psi_v = linalg::matmul(psi, &v);
    let mut u = Array2::zeros((n_rows, keep));
    for k in 0..keep {
        let inv = 1.0 / sig[k];
        for i in 0..n_rows {
            u[[i, k]] = psi_v[[i, k]] * inv;
        }
    }
    Ok(SchmidtDecomposition {
        modes_signal: u,
        modes_idler: v,
        coefficients: sig,
        gain,
        process,
        grid_signal: kernel.row.clone(),
        grid_idler: kernel.col.clone(),
    })
}

/// Schmidt decomposition of a [`JointSpectralAmplitude`].
pub fn schmidt(jsa: &JointSpectralAmplitude, gain: f64, opts: SchmidtOptions) -> Result<SchmidtDecomposition> {
    schmidt_kernel(&jsa.kernel, gain, jsa.process, opts)
}

/// Storage form of a renormalized covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovarianceForm {
    /// Doubled (a, a-dagger) structure over a single mode space; vacuum
    /// probabilities are det^{-1/2}.
    Full,
    /// One half of the conjugate-pair ("+ c.c.") structure; vacuum
    /// probabilities are |det|^{-1}.
    Halved,
}

/// Block renormalized covariance Gamma = (gamma - 1)/2.
#[derive(Debug, Clone)]
pub struct RenormalizedCovariance {
    pub aa: Array2<C64>,
    pub ab: Array2<C64>,
    pub ba: Array2<C64>,
    pub bb: Array2<C64>,
    pub grid_a: AxisGrid,
    pub grid_b: AxisGrid,
    pub process: ProcessType,
    pub form: CovarianceForm,
    /// Series truncation order, `None` for the exact construction.
    pub truncation_order: Option<usize>,
}

impl RenormalizedCovariance {
    pub fn dim_a(&self) -> usize {
        self.aa.nrows()
    }

    pub fn dim_b(&self) -> usize {
        self.bb.nrows()
    }

    /// Assemble the dense 2x2 block matrix.
    pub fn assemble(&self) -> Array2<C64> {
        let (na, nb) = (self.dim_a(), self.dim_b());
        let mut m = Array2::zeros((na + nb, na + nb));
        m.slice_mut(ndarray::s![..na, ..na]).assign(&self.aa);
        m.slice_mut(ndarray::s![..na, na..]).assign(&self.ab);
        m.slice_mut(ndarray::s![na.., ..na]).assign(&self.ba);
        m.slice_mut(ndarray::s![na.., na..]).assign(&self.bb);
        m
    }

    /// Mean photon number per repetition: (Tr aa + Tr bb)/2. For the halved
    /// form this is half of (photons at A + photons at B), i.e. the mean
    /// number of generated pairs.
    pub fn mu_photocount(&self) -> f64 {
        let ta: f64 = (0..self.dim_a()).map(|i| self.aa[[i, i]].re).sum();
        let tb: f64 = (0..self.dim_b()).map(|i| self.bb[[i, i]].re).sum();
        0.5 * (ta + tb)
    }

    /// Hermiticity residual max(|aa - aa^H|, |bb - bb^H|, |ab - ba^H|).
    pub fn hermiticity_residual(&self) -> f64 {
        let r1 = linalg::max_abs(&(&self.aa - &linalg::adjoint(&self.aa)));
        let r2 = linalg::max_abs(&(&self.bb - &linalg::adjoint(&self.bb)));
        let r3 = linalg::max_abs(&(&self.ab - &linalg::adjoint(&self.ba)));
        r1.max(r2).max(r3)
    }

    /// Validity check gamma = 1 + 2 Gamma >= 0 (state positivity).
    pub fn gamma_min_eigenvalue(&self) -> Result<f64> {
        let mut g = self.assemble();
        g.mapv_inplace(|z| z * 2.0);
        for i in 0..g.nrows() {
            g[[i, i]] += 1.0;
        }
        let (vals, _) = linalg::hermitian_eigen(&g)?;
        Ok(vals[vals.len() - 1])
    }
}

fn sandwich(modes: &Array2<C64>, diag: &Array1<f64>, other: &Array2<C64>) -> Array2<C64> {
    // modes * diag * other^H
    let mut scaled = modes.clone();
    for ((_, k), v) in scaled.indexed_iter_mut() {
        *v *= diag[k];
    }
    linalg::matmul(&scaled, &linalg::adjoint(other))
}

/// Exact covariance from a Schmidt decomposition (Eqs. of the hyperbolic
/// block form). Type-II (and the reordered post-WDM type-0) produce the
/// halved form, full-spectrum type-0 the full form.
pub fn covariance_exact(sd: &SchmidtDecomposition) -> RenormalizedCovariance {
    let sigma = sd.squeezing();
    let cosh_m1: Array1<f64> = sigma.mapv(|s| 0.5 * (s.cosh() - 1.0));
    let sinh_h: Array1<f64> = sigma.mapv(|s| 0.5 * s.sinh());
    let aa = sandwich(&sd.modes_signal, &cosh_m1, &sd.modes_signal);
    let ab = sandwich(&sd.modes_signal, &sinh_h, &sd.modes_idler);
    let ba = linalg::adjoint(&ab);
    let bb = sandwich(&sd.modes_idler, &cosh_m1, &sd.modes_idler);
    let form = match sd.process {
        ProcessType::Type0 => CovarianceForm::Full,
        ProcessType::TypeII => CovarianceForm::Halved,
    };
    RenormalizedCovariance {
        aa,
        ab,
        ba,
        bb,
        grid_a: sd.grid_signal.clone(),
        grid_b: sd.grid_idler.clone(),
        process: sd.process,
        form,
        truncation_order: None,
    }
}

/// Truncated series covariance Gamma_N = sum_{n=1}^{N} M^n / (2 n!) with
/// M the off-diagonal squeezing generator (2C psi for type-0, C psi for
/// type-II in the halved representation).
pub fn covariance_series(
    jsa: &JointSpectralAmplitude,
    gain: f64,
    order: usize,
) -> Result<RenormalizedCovariance> {
    covariance_series_kernel(&jsa.kernel, gain, jsa.process, order)
}

pub fn covariance_series_kernel(
    kernel: &DiscretizedKernel,
    gain: f64,
    process: ProcessType,
    order: usize,
) -> Result<RenormalizedCovariance> {
    if order < 1 {
        return Err(Error::Covariance("series order must be >= 1".into()));
    }
    if !kernel.weight_embedded {
        return Err(Error::Covariance("series covariance requires an embedded kernel".into()));
    }
    let scale = process.squeezing_factor() * gain;
    let m_ab = kernel.data.mapv(|z| z * scale);
    let m_ba = linalg::adjoint(&m_ab);
    let (na, nb) = (m_ab.nrows(), m_ab.ncols());
    // powers of the block matrix [[0, m_ab], [m_ba, 0]]: odd powers are
    // off-diagonal, even powers diagonal.
    let mut pow_ab = m_ab.clone(); // current off-diagonal top block (odd n)
    let mut pow_ba = m_ba.clone();
    let mut aa = Array2::<C64>::zeros((na, na));
    let mut ab = Array2::<C64>::zeros((na, nb));
    let mut ba = Array2::<C64>::zeros((nb, na));
    let mut bb = Array2::<C64>::zeros((nb, nb));
    let mut factorial = 1.0f64;
    // n = 1
    ab += &pow_ab.mapv(|z| z * 0.5);
    ba += &pow_ba.mapv(|z| z * 0.5);
    let mut diag_aa = Array2::<C64>::zeros((na, na));
    let mut diag_bb = Array2::<C64>::zeros((nb, nb));
    for n in 2..=order {
        factorial *= n as f64;
        if n % 2 == 0 {
            diag_aa = linalg::matmul(&pow_ab, &m_ba);
            diag_bb = linalg::matmul(&pow_ba, &m_ab);
            let w = 0.5 / factorial;
            aa += &diag_aa.mapv(|z| z * w);
            bb += &diag_bb.mapv(|z| z * w);
        } else {
            pow_ab = linalg::matmul(&diag_aa, &m_ab);
            pow_ba = linalg::matmul(&diag_bb, &m_ba);
            let w = 0.5 / factorial;
            ab += &pow_ab.mapv(|z| z * w);
            ba += &pow_ba.mapv(|z| z * w);
        }
    }
    let form = match process {
        ProcessType::Type0 => CovarianceForm::Full,
        ProcessType::TypeII => CovarianceForm::Halved,
    };
    Ok(RenormalizedCovariance {
        aa,
        ab,
        ba,
        bb,
        grid_a: kernel.row.clone(),
        grid_b: kernel.col.clone(),
        process,
        form,
        truncation_order: Some(order),
    })
}

/// Projection/transformation weight applied ahead of a determinant. Entries
/// are expressed on the *physical* mode spaces; the slot conjugation of the
/// halved form (and of the a-dagger copy of the full form) is applied
/// internally.
#[derive(Debug, Clone)]
pub enum BlockWeight {
    /// W = 1 on both slots.
    Full,
    /// Diagonal nonnegative weights per slot (frequency- or time-local
    /// transmissions T^2 or window indicators).
    Diagonal { a: Array1<f64>, b: Array1<f64> },
    /// Dense Hermitian physical operators per slot.
    Dense { a: Array2<C64>, b: Array2<C64> },
}

fn weight_times_block(
    weight: &BlockWeight,
    slot_b: bool,
    conjugate_slot: bool,
    block: &Array2<C64>,
) -> Array2<C64> {
    match weight {
        BlockWeight::Full => block.clone(),
        BlockWeight::Diagonal { a, b } => {
            let d = if slot_b { b } else { a };
            let mut out = block.clone();
            for ((i, _), v) in out.indexed_iter_mut() {
                *v *= d[i];
            }
            out
        }
        BlockWeight::Dense { a, b } => {
            let m = if slot_b { b } else { a };
            if conjugate_slot {
                let mc = m.mapv(|z| z.conj());
                linalg::matmul(&mc, block)
            } else {
                linalg::matmul(m, block)
            }
        }
    }
}

/// Assemble T = W Gamma with the form-dependent slot conjugation.
pub fn weighted_covariance(cov: &RenormalizedCovariance, weight: &BlockWeight) -> Array2<C64> {
    let (na, nb) = (cov.dim_a(), cov.dim_b());
    // Full form: the second slot is the conjugated copy of the same physical
    // space; halved form: the second slot is party B, conjugated.
    let conj_b = true;
    let waa = weight_times_block(weight, false, false, &cov.aa);
    let wab = weight_times_block(weight, false, false, &cov.ab);
    let wba = weight_times_block(weight, true, conj_b, &cov.ba);
    let wbb = weight_times_block(weight, true, conj_b, &cov.bb);
    let mut t = Array2::zeros((na + nb, na + nb));
    t.slice_mut(ndarray::s![..na, ..na]).assign(&waa);
    t.slice_mut(ndarray::s![..na, na..]).assign(&wab);
    t.slice_mut(ndarray::s![na.., ..na]).assign(&wba);
    t.slice_mut(ndarray::s![na.., na..]).assign(&wbb);
    t
}

/// Determinant evaluation strategy.
#[derive(Debug, Clone, Copy)]
pub enum DetPath {
    /// LU below the dimension cap, log-trace series above it.
    Auto,
    Lu,
    Series { order: usize },
}

/// Dimension above which [`DetPath::Auto`] switches to the series expansion.
pub const LU_DIM_CAP: usize = 4096;

/// Vacuum probability 1/sqrt(det(1 + W Gamma)) (full form) or
/// 1/|det(1 + W Gamma)| (halved form).
pub fn vacuum_probability(cov: &RenormalizedCovariance, weight: &BlockWeight) -> Result<f64> {
    vacuum_probability_opts(cov, weight, DetPath::Auto)
}

pub fn vacuum_probability_opts(
    cov: &RenormalizedCovariance,
    weight: &BlockWeight,
    path: DetPath,
) -> Result<f64> {
    if let BlockWeight::Dense { a, b } = weight {
        if cov.form == CovarianceForm::Full {
            let diff = linalg::max_abs(&(a - b));
            if diff > 1e-12 * linalg::max_abs(a).max(1.0) {
                return Err(Error::Covariance(
                    "full-form covariance requires identical weights on both slots".into(),
                ));
            }
        }
    }
    let t = weighted_covariance(cov, weight);
    let dim = t.nrows();
    let use_lu = match path {
        DetPath::Lu => true,
        DetPath::Series { .. } => false,
        DetPath::Auto => dim <= LU_DIM_CAP,
    };
    let log_det = if use_lu {
        let lu = linalg::lu_det(&linalg::one_plus(&t))?;
        if !lu.log_abs.is_finite() {
            return Err(Error::Numerical(format!(
                "determinant breakdown (rcond ~ {:.3e})",
                lu.rcond_estimate
            )));
        }
        if cov.form == CovarianceForm::Full && lu.phase.re < 0.5 {
            return Err(Error::Numerical(format!(
                "non-positive determinant for full-form covariance (phase {:+.3e}{:+.3e}i, rcond ~ {:.3e})",
                lu.phase.re, lu.phase.im, lu.rcond_estimate
            )));
        }
        C64::new(lu.log_abs, lu.phase.arg())
    } else {
        let order = match path {
            DetPath::Series { order } => order,
            _ => 24,
        };
        logdet_expansion(&t, order)?
    };
    let p = match cov.form {
        CovarianceForm::Full => (-0.5 * log_det.re).exp(),
        CovarianceForm::Halved => (-log_det.re).exp(),
    };
    if !p.is_finite() {
        return Err(Error::Numerical("vacuum probability not finite".into()));
    }
    Ok(p.min(1.0 + 1e-9).min(1.0).max(0.0))
}

/// Crude spectral-radius estimate by power iteration on T.
fn spectral_radius_estimate(t: &Array2<C64>) -> f64 {
    let n = t.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut v = Array1::from_elem(n, C64::new(1.0 / (n as f64).sqrt(), 0.0));
    let mut rho = 0.0;
    for _ in 0..12 {
        let mut w = Array1::<C64>::zeros(n);
        for i in 0..n {
            let mut acc = C64::new(0.0, 0.0);
            for j in 0..n {
                acc += t[[i, j]] * v[j];
            }
            w[i] = acc;
        }
        let norm = w.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        rho = norm;
        v = w.mapv(|z| z / norm);
    }
    rho
}

/// Truncated log-determinant series
/// `log det(1 + T) = sum_{n>=1} (-1)^{n+1}/n Tr(T^n)`,
/// valid for spectral radius of T below one.
pub fn logdet_expansion(t: &Array2<C64>, order: usize) -> Result<C64> {
    if order < 1 {
        return Err(Error::Covariance("logdet series order must be >= 1".into()));
    }
    let rho = spectral_radius_estimate(t);
    if rho >= 0.98 {
        return Err(Error::Numerical(format!(
            "logdet series precondition violated (spectral radius ~ {rho:.3}); use the direct LU path"
        )));
    }
    let mut acc = C64::new(0.0, 0.0);
    let mut power = t.clone();
    for n in 1..=order {
        if n > 1 {
            power = linalg::matmul(&power, t);
        }
        let tr: C64 = (0..power.nrows()).map(|i| power[[i, i]]).sum();
        let sign = if n % 2 == 1 { 1.0 } else { -1.0 };
        acc += tr * (sign / n as f64);
    }
    Ok(acc)
}

/// First two trace invariants of T = W Gamma: (Tr T, Tr T^2). Order-2
/// truncation of the log-determinant series is
/// `Tr T - Tr(T^2)/2`, the pieces used by the Poisson approximation.
pub fn trace_invariants(t: &Array2<C64>) -> (C64, C64) {
    let n = t.nrows();
    let tr: C64 = (0..n).map(|i| t[[i, i]]).sum();
    let mut tr2 = C64::new(0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            tr2 += t[[i, j]] * t[[j, i]];
        }
    }
    (tr, tr2)
}

/// Pump-interferometer split: one squeezed source per pump-interferometer
/// path, with subnormalized squeezing K_z sigma, phase and delay metadata.
#[derive(Debug, Clone)]
pub struct PumpPath {
    /// Subnormalization coefficient K_{p,z}.
    pub k_coeff: f64,
    /// Constant phase phi_{p,0}^{(z)}.
    pub phase: f64,
    /// Time shift tau_p^{(z)} (s).
    pub delay: f64,
}

/// Source state after the pump interferometer: Gamma = Gamma_s + Gamma_l.
#[derive(Debug, Clone)]
pub struct PumpSplitState {
    pub schmidt: SchmidtDecomposition,
    pub short: PumpPath,
    pub long: PumpPath,
    /// Set when the delay does not exceed the pump duration and the
    /// independent-excitation assumption is doubtful.
    pub overlap_warning: bool,
}

/// Split the source over the two pump-interferometer paths (short/long).
/// `t_p` is the pump beam-splitter amplitude transmittivity.
pub fn split_pump(
    sd: &SchmidtDecomposition,
    t_p: f64,
    phi_p: f64,
    tau_delay: f64,
    pump_duration: f64,
) -> Result<PumpSplitState> {
    if !(0.0..=1.0).contains(&t_p) {
        return Err(Error::Covariance("pump splitter transmittivity must be in [0,1]".into()));
    }
    let r_p = (1.0 - t_p * t_p).max(0.0).sqrt();
    let norm = (t_p.powi(4) + r_p.powi(4)).sqrt();
    let (k_s, k_l) = if norm > 0.0 { (t_p * t_p / norm, r_p * r_p / norm) } else { (1.0, 0.0) };
    let overlap_warning = tau_delay <= pump_duration;
    if overlap_warning {
        tracing::warn!(
            tau_delay, pump_duration,
            "pump interferometer delay does not exceed the pulse duration; \
             the independent-excitation assumption is violated"
        );
    }
    Ok(PumpSplitState {
        schmidt: sd.clone(),
        short: PumpPath { k_coeff: k_s, phase: 0.0, delay: 0.0 },
        long: PumpPath { k_coeff: k_l, phase: phi_p, delay: tau_delay },
        overlap_warning,
    })
}

impl PumpSplitState {
    pub fn paths(&self) -> [&PumpPath; 2] {
        [&self.short, &self.long]
    }

    /// Covariance summand for one pump path in the frequency basis: the
    /// squeezing is scaled by K_z, the delay enters as linear spectral
    /// phases on both mode sets and the pump phase multiplies the
    /// anomalous blocks.
    pub fn summand_covariance(&self, which: usize) -> Result<RenormalizedCovariance> {
        let path = self.paths()[which].clone();
        let sd = &self.schmidt;
        let sigma = sd.squeezing().mapv(|s| path.k_coeff * s);
        let cosh_m1: Array1<f64> = sigma.mapv(|s| 0.5 * (s.cosh() - 1.0));
        let sinh_h: Array1<f64> = sigma.mapv(|s| 0.5 * s.sinh());
        let phase_a = delay_phases(&sd.grid_signal, path.delay)?;
        let phase_b = delay_phases(&sd.grid_idler, path.delay)?;
        let mut u = sd.modes_signal.clone();
        for ((i, _), v) in u.indexed_iter_mut() {
            *v *= phase_a[i];
        }
        // idler modes in the physical convention pick up e^{+i w tau}; the
        // stored V columns are conjugates of the physical amplitudes, so the
        // stored columns pick up e^{-i w tau}.
        let mut v_modes = sd.modes_idler.clone();
        for ((i, _), v) in v_modes.indexed_iter_mut() {
            *v *= phase_b[i].conj();
        }
        let aa = sandwich(&u, &cosh_m1, &u);
        let mut ab = sandwich(&u, &sinh_h, &v_modes);
        let ph = C64::from_polar(1.0, path.phase);
        ab.mapv_inplace(|z| z * ph);
        let ba = linalg::adjoint(&ab);
        let bb = sandwich(&v_modes, &cosh_m1, &v_modes);
        let form = match sd.process {
            ProcessType::Type0 => CovarianceForm::Full,
            ProcessType::TypeII => CovarianceForm::Halved,
        };
        Ok(RenormalizedCovariance {
            aa,
            ab,
            ba,
            bb,
            grid_a: sd.grid_signal.clone(),
            grid_b: sd.grid_idler.clone(),
            process: sd.process,
            form,
            truncation_order: None,
        })
    }

    /// Total covariance Gamma_s + Gamma_l.
    pub fn total_covariance(&self) -> Result<RenormalizedCovariance> {
        let s = self.summand_covariance(0)?;
        let l = self.summand_covariance(1)?;
        Ok(RenormalizedCovariance {
            aa: &s.aa + &l.aa,
            ab: &s.ab + &l.ab,
            ba: &s.ba + &l.ba,
            bb: &s.bb + &l.bb,
            grid_a: s.grid_a,
            grid_b: s.grid_b,
            process: s.process,
            form: s.form,
            truncation_order: None,
        })
    }

    /// Mean pair number mu = sum_z sum_k sinh^2(K_z sigma_k / 2).
    pub fn mu(&self) -> f64 {
        let sigma = self.schmidt.squeezing();
        self.paths()
            .iter()
            .map(|p| sigma.iter().map(|s| (0.5 * p.k_coeff * s).sinh().powi(2)).sum::<f64>())
            .sum()
    }
}

fn delay_phases(grid: &AxisGrid, delay: f64) -> Result<Array1<C64>> {
    match grid {
        AxisGrid::Freq(g) => {
            Ok(Array1::from_iter(g.points.iter().map(|&w| C64::from_polar(1.0, w * delay))))
        }
        AxisGrid::Time(_) => {
            Err(Error::Covariance("pump split delays require the frequency basis".into()))
        }
    }
}

/// Mean pair number for gain C over a normalized Schmidt spectrum with pump
/// split coefficients: mu(C) = sum_z sum_k sinh^2(K_z f C Sigma_k / 2).
pub fn mu_of_gain(coefficients: &Array1<f64>, process: ProcessType, pump_ks: (f64, f64), gain: f64) -> f64 {
    let f = process.squeezing_factor() * gain;
    [pump_ks.0, pump_ks.1]
        .iter()
        .map(|k| {
            coefficients
                .iter()
                .map(|s| (0.5 * k * f * s).sinh().powi(2))
                .sum::<f64>()
        })
        .sum()
}

/// Invert [`mu_of_gain`] for C (monotone; bisection refined by Newton).
pub fn gain_for_mu(
    coefficients: &Array1<f64>,
    process: ProcessType,
    pump_ks: (f64, f64),
    mu: f64,
) -> Result<f64> {
    if mu <= 0.0 {
        return Err(Error::Covariance("mu must be positive".into()));
    }
    let f = |c: f64| mu_of_gain(coefficients, process, pump_ks, c) - mu;
    let mut hi = 1.0;
    while f(hi) < 0.0 {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::Covariance("mu calibration failed to bracket".into()));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if (hi - lo) <= 1e-14 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Balanced-splitter constant 1/sqrt(2).
pub const BALANCED: f64 = 1.0 / SQRT_2;

/// Draw a random weight-embedded kernel with unit L2 norm (test/oracle use).
pub fn random_kernel<R: Rng>(rng: &mut R, rows: usize, cols: usize, grid: AxisGrid, grid_col: AxisGrid) -> DiscretizedKernel {
    let mut data = Array2::zeros((rows, cols));
    for v in data.iter_mut() {
        *v = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    }
    let norm = linalg::hs_norm(&data);
    data.mapv_inplace(|z| z / norm);
    DiscretizedKernel { data, row: grid, col: grid_col, weight_embedded: true }
}
