//! Poisson-approximation engine for the low-gain type-II path: vacuum
//! probabilities from the order-2 truncation of the log-determinant series,
//! with the single- and two-photon interference terms evaluated as windowed
//! overlap integrals of the factorized time-domain JSA.
//!
//! Valid for equal fiber lengths (the dispersion phase then factorizes over
//! the w_+ / w_- coordinates) and mean pair numbers well below one.

use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::jsa::{PhaseMatching, PumpAmplitude};
use crate::linalg::C64;
use crate::optics::{path_projection_kernel, FiberLink, ProjTerm, ReducedTransformation};

/// Default oscillation-filter threshold (cycles per grid cell).
pub const DEFAULT_OSCILLATION_THRESHOLD: f64 = 8.0;

/// One-dimensional sampled factor (A on the t_+ lattice or P on the t_-
/// lattice), indexed by integer steps of the time grid.
#[derive(Debug, Clone)]
struct LatticeFactor {
    lo: i64,
    vals: Vec<C64>,
}

impl LatticeFactor {
    #[inline]
    fn get(&self, m: i64) -> C64 {
        let idx = m - self.lo;
        if idx < 0 || idx as usize >= self.vals.len() {
            C64::new(0.0, 0.0)
        } else {
            self.vals[idx as usize]
        }
    }

    fn hi(&self) -> i64 {
        self.lo + self.vals.len() as i64 - 1
    }

    fn trim(&mut self, rel: f64) {
        let peak = self.vals.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let thr = rel * peak;
        let mut first = 0;
        while first < self.vals.len() && self.vals[first].norm() < thr {
            first += 1;
        }
        let mut last = self.vals.len();
        while last > first && self.vals[last - 1].norm() < thr {
            last -= 1;
        }
        self.lo += first as i64;
        self.vals = self.vals[first..last].to_vec();
    }
}

/// Pump-interferometer path data for the Poisson engine.
#[derive(Debug, Clone, Copy)]
pub struct PoissonPumpPath {
    pub k_coeff: f64,
    pub phase: f64,
    /// Pump delay in integer grid steps.
    pub delay_steps: i64,
}

/// Window selection per party and detector (absolute times, half-open).
#[derive(Debug, Clone, Default)]
pub struct WindowSelection {
    pub a: [Vec<(f64, f64)>; 2],
    pub b: [Vec<(f64, f64)>; 2],
}

impl WindowSelection {
    pub fn shifted(&self, dt_shift: f64) -> WindowSelection {
        let sh = |w: &Vec<(f64, f64)>| w.iter().map(|&(a, b)| (a + dt_shift, b + dt_shift)).collect();
        WindowSelection {
            a: [sh(&self.a[0]), sh(&self.a[1])],
            b: [sh(&self.b[0]), sh(&self.b[1])],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.a.iter().chain(self.b.iter()).all(|w| w.is_empty())
    }
}

/// The Poisson-approximation evaluation engine.
pub struct PoissonEngine {
    time_grid: Arc<TimeGrid>,
    a_factor: LatticeFactor,
    p_factor: LatticeFactor,
    /// Normalization |N|^2 with psi = N A((i+j) dt + 2 t0) P((i-j) dt).
    norm2: f64,
    pub mu: f64,
    pub paths: Vec<PoissonPumpPath>,
    rt_a: ReducedTransformation,
    rt_b: ReducedTransformation,
    /// Quadratic chirp coefficient c2 = beta2 L / 4 shared by both axes.
    chirp: f64,
    /// Oscillation-filter threshold in cycles per grid cell.
    pub oscillation_threshold: f64,
    /// Estimated relative mass dropped by the oscillation filter so far.
    pub dropped_mass: std::sync::Mutex<f64>,
}

fn transform_half_kernel(
    grid_points: &[f64],
    weights: &[f64],
    values: &[C64],
    chirp: f64,
    dt: f64,
    offset: f64,
    m_lo: i64,
    m_hi: i64,
) -> LatticeFactor {
    // F(m) = sum_k w_k f(w_k) e^{i c2 w_k^2} e^{-i w_k (m dt + offset) / 2}
    //
    // The discrete sum is periodic in its argument with period 4 pi / dw;
    // restrict the lattice to the alias-free window around the requested
    // center so the trim cannot latch onto aliased copies.
    let dw = (grid_points[grid_points.len() - 1] - grid_points[0]) / (grid_points.len() as f64 - 1.0);
    let half_period = (0.45 * 4.0 * std::f64::consts::PI / (dw * dt)) as i64;
    let center = (m_lo + m_hi) / 2;
    let m_lo = m_lo.max(center - half_period);
    let m_hi = m_hi.min(center + half_period);
    let mut vals = Vec::with_capacity((m_hi - m_lo + 1) as usize);
    for m in m_lo..=m_hi {
        let u = m as f64 * dt + offset;
        let mut acc = C64::new(0.0, 0.0);
        for ((&w, &wt), &f) in grid_points.iter().zip(weights.iter()).zip(values.iter()) {
            let phase = chirp * w * w - 0.5 * w * u;
            acc += C64::from_polar(wt, phase) * f;
        }
        vals.push(acc);
    }
    let mut lf = LatticeFactor { lo: m_lo, vals };
    lf.trim(1e-9);
    lf
}

impl PoissonEngine {
    /// Build the engine from the factorized source model. Requires equal
    /// dispersion on both links.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pump: &PumpAmplitude,
        pm: &PhaseMatching,
        time_grid: Arc<TimeGrid>,
        link_a: &FiberLink,
        link_b: &FiberLink,
        paths: Vec<PoissonPumpPath>,
        rt_a: ReducedTransformation,
        rt_b: ReducedTransformation,
        mu: f64,
    ) -> Result<PoissonEngine> {
        let ba = link_a.half_beta2_length();
        let bb = link_b.half_beta2_length();
        if (ba - bb).abs() > 1e-30 + 1e-12 * ba.abs().max(bb.abs()) {
            return Err(Error::Optics(
                "the Poisson engine requires equal dispersion on both links; \
                 use the determinant engine for asymmetric fibers"
                    .into(),
            ));
        }
        if mu > 0.1 {
            tracing::warn!(mu, "Poisson approximation used above mu = 0.1; accuracy degrades");
        }
        let dt = time_grid.step();
        let t0 = time_grid.points[0];
        let n = time_grid.len() as i64;
        // chirp coefficient on both +- axes: (beta2/2) L (w_A^2 + w_B^2)
        // = (beta2 L / 4)(w_+^2 + w_-^2)
        let c2 = 0.5 * (ba + bb) / 2.0;
        // A on the u-lattice u = m dt + 2 t0, m in [0, 2(n-1)] plus margins
        let margin = n;
        let a_factor = transform_half_kernel(
            pump.grid.points.as_slice().unwrap(),
            pump.grid.weights.as_slice().unwrap(),
            pump.amplitude.as_slice().unwrap(),
            c2,
            dt,
            2.0 * t0,
            -margin,
            2 * (n - 1) + margin,
        );
        // P on the v-lattice v = m dt, m in [-(n-1), n-1] plus margins
        let p_factor = transform_half_kernel(
            pm.grid.points.as_slice().unwrap(),
            pm.grid.weights.as_slice().unwrap(),
            pm.amplitude.as_slice().unwrap(),
            c2,
            dt,
            0.0,
            -(n - 1) - margin,
            (n - 1) + margin,
        );
        if a_factor.vals.is_empty() || p_factor.vals.is_empty() {
            return Err(Error::Optics("factorized kernel has no support on the grid".into()));
        }
        // normalization: sum over (i, j) of |A(i+j)|^2 |P(i-j)|^2 dt^2 = 1.
        // i+j and i-j share parity; use the parity-split identity.
        let split = |f: &LatticeFactor, parity_phase: bool| -> f64 {
            f.vals
                .iter()
                .enumerate()
                .map(|(k, z)| {
                    let m = f.lo + k as i64;
                    let s = if parity_phase && m.rem_euclid(2) == 1 { -1.0 } else { 1.0 };
                    s * z.norm_sqr()
                })
                .sum()
        };
        let s_even = split(&a_factor, false) * split(&p_factor, false);
        let s_parity = split(&a_factor, true) * split(&p_factor, true);
        let total = 0.5 * (s_even + s_parity);
        if total <= 0.0 || !total.is_finite() {
            return Err(Error::Optics("Poisson normalization failed".into()));
        }
        let norm2 = 1.0 / (dt * dt * total);
        Ok(PoissonEngine {
            time_grid,
            a_factor,
            p_factor,
            norm2,
            mu,
            paths,
            rt_a,
            rt_b,
            chirp: c2,
            oscillation_threshold: DEFAULT_OSCILLATION_THRESHOLD,
            dropped_mass: std::sync::Mutex::new(0.0),
        })
    }

    fn window_rows(&self, windows: &[(f64, f64)]) -> Vec<std::ops::Range<i64>> {
        let dt = self.time_grid.step();
        let t0 = self.time_grid.points[0];
        let n = self.time_grid.len() as f64;
        windows
            .iter()
            .map(|&(a, b)| {
                let lo = (((a - t0) / dt) - 1e-6).ceil().clamp(0.0, n) as i64;
                let hi = (((b - t0) / dt) - 1e-6).ceil().clamp(0.0, n) as i64;
                lo..hi
            })
            .collect()
    }

    fn steps(&self, delay: f64) -> Result<i64> {
        self.time_grid.shift_steps(delay)
    }

    /// Single-party trace contribution over the given detector windows
    /// (Tr[W_rho Gamma_slot] at Poisson order). `party_b` flips the
    /// constant-phase sign (conjugated slot).
    fn trace_term(&self, rt: &ReducedTransformation, party_b: bool, detector: usize, windows: &[(f64, f64)]) -> Result<C64> {
        if windows.is_empty() {
            return Ok(C64::new(0.0, 0.0));
        }
        let kernel = path_projection_kernel(rt, detector, windows)?;
        let dt = self.time_grid.step();
        let rows = self.window_rows(windows);
        let mut acc = C64::new(0.0, 0.0);
        for z in &self.paths {
            let kz2 = z.k_coeff * z.k_coeff;
            if kz2 == 0.0 {
                continue;
            }
            for term in &kernel.terms {
                let s_ket = self.steps(term.delay_ket)? + z.delay_steps;
                let s_bra = self.steps(term.delay_bra)? + z.delay_steps;
                let phase = if party_b { -term.phase } else { term.phase };
                let c = C64::from_polar(term.coeff * kz2, phase);
                let mut overlap = C64::new(0.0, 0.0);
                for range in &rows {
                    for i in range.clone() {
                        overlap += self.pair_overlap(i - s_ket, i - s_bra, party_b);
                    }
                }
                acc += c * overlap * dt * dt;
            }
        }
        Ok(acc * self.mu)
    }

    /// sum_t psi(a, t) conj(psi(b, t)) for party A (arguments in the first
    /// slot) or sum_t psi(t, a) conj(psi(t, b)) for party B.
    #[inline]
    fn pair_overlap(&self, a: i64, b: i64, party_b: bool) -> C64 {
        // A(u) with u-index i+j and P(v) with v-index i-j:
        //   party A: psi(a, t): u = a + t, v = a - t
        //   party B: psi(t, b): u = t + b, v = t - b
        let n = self.time_grid.len() as i64;
        let mut acc = C64::new(0.0, 0.0);
        // iterate t over the A-factor support for the ket argument
        let (t_lo, t_hi) = if party_b {
            (self.a_factor.lo - b, self.a_factor.hi() - b)
        } else {
            (self.a_factor.lo - a, self.a_factor.hi() - a)
        };
        let t_lo = t_lo.max(0);
        let t_hi = t_hi.min(n - 1);
        for t in t_lo..=t_hi {
            let (u1, v1, u2, v2) = if party_b {
                (t + a, t - a, t + b, t - b)
            } else {
                (a + t, a - t, b + t, b - t)
            };
            let k = self.a_factor.get(u1) * self.p_factor.get(v1);
            if k == C64::new(0.0, 0.0) {
                continue;
            }
            let kb = self.a_factor.get(u2) * self.p_factor.get(v2);
            acc += k * kb.conj();
        }
        acc * self.norm2
    }

    /// Two-photon (Hilbert-Schmidt) contribution for one pair of detector
    /// window sets: 2 Tr[W_A Gamma_ab conj(W_B) Gamma_ba] at Poisson order.
    fn hs_term(
        &self,
        det_a: usize,
        windows_a: &[(f64, f64)],
        det_b: usize,
        windows_b: &[(f64, f64)],
    ) -> Result<C64> {
        if windows_a.is_empty() || windows_b.is_empty() {
            return Ok(C64::new(0.0, 0.0));
        }
        let ka = path_projection_kernel(&self.rt_a, det_a, windows_a)?;
        let kb = path_projection_kernel(&self.rt_b, det_b, windows_b)?;
        let rows_a = self.window_rows(windows_a);
        let rows_b = self.window_rows(windows_b);
        let dt = self.time_grid.step();
        let pairs = self.build_hs_pairs(&ka.terms, &kb.terms)?;
        let (kept, dropped) = fast_oscillation_filter(
            &pairs,
            self.oscillation_threshold,
            self.chirp,
            dt,
            (self.a_factor.lo, self.a_factor.hi()),
            (self.p_factor.lo, self.p_factor.hi()),
        );
        *self.dropped_mass.lock().unwrap() += dropped;
        let mut acc = C64::new(0.0, 0.0);
        for pair in &kept {
            let mut overlap = C64::new(0.0, 0.0);
            for ra in &rows_a {
                for i in ra.clone() {
                    for rb in &rows_b {
                        for j in rb.clone() {
                            let ket = self.a_factor.get(i + j - pair.u_ket)
                                * self.p_factor.get(i - j - pair.v_ket);
                            if ket == C64::new(0.0, 0.0) {
                                continue;
                            }
                            let bra = self.a_factor.get(i + j - pair.u_bra)
                                * self.p_factor.get(i - j - pair.v_bra);
                            overlap += ket * bra.conj();
                        }
                    }
                }
            }
            acc += pair.weight * overlap * self.norm2 * dt * dt;
        }
        Ok(acc * 2.0 * self.mu)
    }

    fn build_hs_pairs(&self, terms_a: &[ProjTerm], terms_b: &[ProjTerm]) -> Result<Vec<HsPairTerm>> {
        let mut out = Vec::new();
        for z in &self.paths {
            for zp in &self.paths {
                let kzz = z.k_coeff * zp.k_coeff;
                if kzz == 0.0 {
                    continue;
                }
                let pump_phase = z.phase - zp.phase;
                for ta in terms_a {
                    for tb in terms_b {
                        // ket: pump path z with A-shift tau_A^(y), B-shift tau_B^(y')
                        // bra: pump path z' with tau_A^(x), tau_B^(x')
                        let u_ket = z.delay_steps * 2
                            + self.steps(ta.delay_ket)?
                            + self.steps(tb.delay_ket)?;
                        let v_ket = self.steps(ta.delay_ket)? - self.steps(tb.delay_ket)?;
                        let u_bra = zp.delay_steps * 2
                            + self.steps(ta.delay_bra)?
                            + self.steps(tb.delay_bra)?;
                        let v_bra = self.steps(ta.delay_bra)? - self.steps(tb.delay_bra)?;
                        let phase = pump_phase + ta.phase + tb.phase;
                        out.push(HsPairTerm {
                            weight: C64::from_polar(kzz * ta.coeff * tb.coeff, phase),
                            u_ket,
                            v_ket,
                            u_bra,
                            v_bra,
                        });
                    }
                }
            }
        }
        Ok(out)
    }

    /// Joint bare vacuum expectation (no noise factors) of the selection.
    pub fn bare_vacuum(&self, sel: &WindowSelection) -> Result<f64> {
        let mut t1 = C64::new(0.0, 0.0);
        for d in 0..2 {
            t1 += self.trace_term(&self.rt_a, false, d, &sel.a[d])?;
            t1 += self.trace_term(&self.rt_b, true, d, &sel.b[d])?;
        }
        let mut t2 = C64::new(0.0, 0.0);
        for da in 0..2 {
            for db in 0..2 {
                t2 += self.hs_term(da, &sel.a[da], db, &sel.b[db])?;
            }
        }
        let log_p = -t1.re + 0.5 * t2.re;
        let p = log_p.exp();
        if !p.is_finite() {
            return Err(Error::Numerical("Poisson vacuum probability not finite".into()));
        }
        Ok(p.min(1.0))
    }

    /// Single- and two-photon interference pieces (Tr, HS^2) for the
    /// selection; the Poisson vacuum probability is exp(-Tr + HS^2/2).
    pub fn poisson_terms(&self, sel: &WindowSelection) -> Result<(f64, f64)> {
        let mut t1 = C64::new(0.0, 0.0);
        for d in 0..2 {
            t1 += self.trace_term(&self.rt_a, false, d, &sel.a[d])?;
            t1 += self.trace_term(&self.rt_b, true, d, &sel.b[d])?;
        }
        let mut t2 = C64::new(0.0, 0.0);
        for da in 0..2 {
            for db in 0..2 {
                t2 += self.hs_term(da, &sel.a[da], db, &sel.b[db])?;
            }
        }
        Ok((t1.re, t2.re))
    }

    /// Mean photons per repetition arriving at the given detector.
    pub fn mean_photons(&self, party_b: bool, detector: usize) -> Result<f64> {
        let grid = &self.time_grid;
        let full = vec![(
            grid.points[0] - 64.0 * grid.step(),
            grid.points[grid.len() - 1] + 64.0 * grid.step(),
        )];
        let rt = if party_b { &self.rt_b } else { &self.rt_a };
        Ok(self.trace_term(rt, party_b, detector, &full)?.re)
    }
}

/// One two-photon integrand term pair with its lattice shifts.
#[derive(Debug, Clone, Copy)]
pub struct HsPairTerm {
    pub weight: C64,
    pub u_ket: i64,
    pub v_ket: i64,
    pub u_bra: i64,
    pub v_bra: i64,
}

/// Drop term pairs whose chirp-induced oscillation exceeds `threshold`
/// cycles per grid cell or whose shifted supports are disjoint. Returns the
/// kept terms and an estimate of the dropped relative mass.
pub fn fast_oscillation_filter(
    terms: &[HsPairTerm],
    threshold: f64,
    chirp: f64,
    dt: f64,
    a_range: (i64, i64),
    p_range: (i64, i64),
) -> (Vec<HsPairTerm>, f64) {
    let mut kept = Vec::with_capacity(terms.len());
    let mut dropped_mass = 0.0;
    let total_mass: f64 = terms.iter().map(|t| t.weight.norm()).sum();
    for t in terms {
        let du = (t.u_ket - t.u_bra).abs();
        let dv = (t.v_ket - t.v_bra).abs();
        // support rule: ket and bra factor supports must overlap
        let a_len = a_range.1 - a_range.0;
        let p_len = p_range.1 - p_range.0;
        if du > a_len || dv > p_len {
            continue; // exactly zero overlap, no mass estimate needed
        }
        // chirped factors oscillate with constant rate shift/(8 c2) in their
        // argument; in grid cells: rate * dt / (2 pi)
        if chirp != 0.0 && threshold.is_finite() {
            let rate_u = du as f64 * dt * dt / (8.0 * chirp.abs()) / (2.0 * std::f64::consts::PI);
            let rate_v = dv as f64 * dt * dt / (8.0 * chirp.abs()) / (2.0 * std::f64::consts::PI);
            if rate_u.max(rate_v) > threshold {
                // averaged-out term: bound its mass by weight / (2 pi cycles)
                let cycles = rate_u.max(rate_v);
                if total_mass > 0.0 {
                    dropped_mass += t.weight.norm() / total_mass / (1.0 + cycles);
                }
                continue;
            }
        }
        kept.push(*t);
    }
    (kept, dropped_mass)
}

/// Convenience alias matching the operation name: evaluates the Poisson
/// pieces (single-photon trace, two-photon HS norm squared) for a selection.
pub fn poisson_terms(engine: &PoissonEngine, sel: &WindowSelection) -> Result<(f64, f64)> {
    engine.poisson_terms(sel)
}

pub type Complex = Complex64;
