//! Brute-force Fock-space oracle for squeezed pair sources at desk scale.
//!
//! The state is expanded over Schmidt modes into pair-number configurations;
//! probabilities and no-click functionals are evaluated through per-photon
//! transition operators, never through a Fredholm determinant, so the oracle
//! is an independent cross-check of the covariance pipeline.

use ndarray::{Array1, Array2};

use crate::covariance::{schmidt_kernel, ProcessType, SchmidtOptions};
use crate::error::{Error, Result};
use crate::grid::DiscretizedKernel;
use crate::linalg::{self, C64};

/// Caps keeping the oracle at desk scale.
pub const MAX_GRID: usize = 12;
pub const MAX_CUTOFF: usize = 6;

/// Fock-expansion oracle over the Schmidt modes of a small JSA kernel.
#[derive(Debug, Clone)]
pub struct FockOracle {
    process: ProcessType,
    /// tanh(sigma_k / 2) per Schmidt mode.
    tanh_half: Vec<f64>,
    /// Physical pair tensor with tanh-rescaled coefficients, embedded basis.
    pair_tensor: Array2<C64>,
    cutoff: usize,
}

/// Complete homogeneous symmetric functions h_n of `vals` via the power-sum
/// recursion n h_n = sum_j p_j h_{n-j}.
fn h_poly(vals: &[f64], n_max: usize) -> Vec<f64> {
    newton_series(vals, n_max, 1.0)
}

/// Coefficients of prod (1 - t v)^{-1/2}: n g_n = (1/2) sum_j p_j g_{n-j}.
fn g_poly(vals: &[f64], n_max: usize) -> Vec<f64> {
    newton_series(vals, n_max, 0.5)
}

fn newton_series(vals: &[f64], n_max: usize, weight: f64) -> Vec<f64> {
    let p: Vec<f64> = (1..=n_max)
        .map(|j| vals.iter().map(|v| v.powi(j as i32)).sum::<f64>())
        .collect();
    let mut h = vec![0.0; n_max + 1];
    h[0] = 1.0;
    for n in 1..=n_max {
        let mut acc = 0.0;
        for j in 1..=n {
            acc += weight * p[j - 1] * h[n - j];
        }
        h[n] = acc / n as f64;
    }
    h
}

impl FockOracle {
    /// Build the oracle from a weight-embedded kernel (unit L2 norm expected
    /// for the usual calibration, subnormalized kernels are accepted).
    pub fn new(
        kernel: &DiscretizedKernel,
        gain: f64,
        process: ProcessType,
        cutoff: usize,
    ) -> Result<FockOracle> {
        if kernel.data.nrows() > MAX_GRID || kernel.data.ncols() > MAX_GRID {
            return Err(Error::Covariance(format!(
                "fock oracle grid capped at {MAX_GRID}x{MAX_GRID}"
            )));
        }
        if cutoff > MAX_CUTOFF {
            return Err(Error::Covariance(format!(
                "fock oracle pair-number cutoff capped at {MAX_CUTOFF}"
            )));
        }
        let sd = schmidt_kernel(
            kernel,
            gain,
            process,
            SchmidtOptions { rel_tol: 1e-13, max_modes: MAX_GRID },
        )?;
        let sigma = sd.squeezing();
        let tanh_half: Vec<f64> = sigma.iter().map(|s| (0.5 * s).tanh()).collect();
        // physical pair tensor sum_k u_k tanh_k v_k^*(col) = U diag(tanh) V^H
        let mut scaled = sd.modes_signal.clone();
        for ((_, k), v) in scaled.indexed_iter_mut() {
            *v *= tanh_half[k];
        }
        let pair_tensor = linalg::matmul(&scaled, &linalg::adjoint(&sd.modes_idler));
        let oracle = FockOracle { process, tanh_half, pair_tensor, cutoff };
        oracle.check_tail()?;
        Ok(oracle)
    }

    fn norm_prefactor(&self) -> f64 {
        match self.process {
            ProcessType::TypeII => self.tanh_half.iter().map(|x| 1.0 - x * x).product(),
            ProcessType::Type0 => {
                self.tanh_half.iter().map(|x| (1.0 - x * x).sqrt()).product()
            }
        }
    }

    fn series(&self, vals: &[f64]) -> Vec<f64> {
        match self.process {
            ProcessType::TypeII => h_poly(vals, self.cutoff),
            ProcessType::Type0 => g_poly(vals, self.cutoff),
        }
    }

    fn check_tail(&self) -> Result<()> {
        let tail = self.tail_mass();
        if tail > 1e-8 {
            return Err(Error::Covariance(format!(
                "fock oracle cutoff {} insufficient: tail mass {tail:.3e}",
                self.cutoff
            )));
        }
        Ok(())
    }

    /// Probability mass beyond the pair-number cutoff.
    pub fn tail_mass(&self) -> f64 {
        (1.0 - self.pair_distribution().iter().sum::<f64>()).max(0.0)
    }

    /// P(n pairs) for n = 0..=cutoff.
    pub fn pair_distribution(&self) -> Vec<f64> {
        let x: Vec<f64> = self.tanh_half.iter().map(|t| t * t).collect();
        let a2 = self.norm_prefactor();
        self.series(&x).into_iter().map(|h| a2 * h).collect()
    }

    /// Vacuum probability of the detection operators `m_signal`, `m_idler`
    /// (Hermitian, 0 <= M <= 1, physical embedded basis). For type-0 both
    /// photons live in the same mode family and the two operators must
    /// coincide.
    pub fn vacuum_probability(
        &self,
        m_signal: &Array2<C64>,
        m_idler: &Array2<C64>,
    ) -> Result<f64> {
        if self.process == ProcessType::Type0 {
            let diff = linalg::max_abs(&(m_signal - m_idler));
            if diff > 1e-12 {
                return Err(Error::Covariance(
                    "type-0 oracle needs identical click operators on both slots".into(),
                ));
            }
        }
        let t_s = survival(m_signal)?;
        let t_i = survival(m_idler)?;
        let st_s = linalg::hermitian_sqrt(&t_s)?;
        let st_i = linalg::hermitian_sqrt(&t_i)?;
        // per-photon transitions: psi_T = sqrt(T_s) psi sqrt(T_i)^T
        let tmp = linalg::matmul(&st_s, &self.pair_tensor);
        let psi_t = linalg::matmul(&tmp, &st_i.t().to_owned());
        let sv = linalg::singular_values(&psi_t)?;
        let y: Vec<f64> = sv.iter().map(|s| (s * s).min(1.0)).collect();
        let series = self.series(&y);
        let p = self.norm_prefactor() * series.iter().sum::<f64>();
        Ok(p.clamp(0.0, 1.0))
    }
}

fn survival(m: &Array2<C64>) -> Result<Array2<C64>> {
    if m.nrows() != m.ncols() {
        return Err(Error::Covariance("click operator must be square".into()));
    }
    let herm = linalg::max_abs(&(m - &linalg::adjoint(m)));
    if herm > 1e-10 {
        return Err(Error::Covariance("click operator must be Hermitian".into()));
    }
    let mut t = m.mapv(|z| -z);
    for i in 0..t.nrows() {
        t[[i, i]] += 1.0;
    }
    Ok(t)
}

/// Spec-named constructor alias.
pub fn fock_oracle(
    jsa_small: &DiscretizedKernel,
    gain: f64,
    process: ProcessType,
    cutoff: usize,
) -> Result<FockOracle> {
    FockOracle::new(jsa_small, gain, process, cutoff)
}
