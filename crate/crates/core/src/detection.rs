//! Detector physics and event statistics: vacuum/detection/key POVMs,
//! noise-rate self-consistency, dead-time live probabilities, cross-talk
//! between interleaved repetitions and the QBER / sifted-rate assembly.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::optics::poisson::{PoissonEngine, WindowSelection};
use crate::optics::{final_covariance, path_projection_kernel, ReducedTransformation, TimeModeState};

/// Single-photon detector parameters.
#[derive(Debug, Clone, Copy)]
pub struct DetectorModel {
    /// Amplitude detection-efficiency factor (folded into the path
    /// transmittivities of the receiver when the transformation is built).
    pub efficiency_amplitude: f64,
    /// Dark-count rate (1/s).
    pub dark_rate: f64,
    /// Afterpulse probability per detection event.
    pub afterpulse_prob: f64,
    /// Dead time (s).
    pub dead_time: f64,
}

impl DetectorModel {
    pub fn ideal() -> Self {
        DetectorModel { efficiency_amplitude: 1.0, dark_rate: 0.0, afterpulse_prob: 0.0, dead_time: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.afterpulse_prob) {
            return Err(Error::Detection("afterpulse probability must be in [0, 1)".into()));
        }
        if self.dark_rate < 0.0 || self.dead_time < 0.0 {
            return Err(Error::Detection("rates and dead times must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.efficiency_amplitude) {
            return Err(Error::Detection("efficiency amplitude must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Time-bin labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Bin {
    Early,
    Central,
    Late,
}

pub const BINS: [Bin; 3] = [Bin::Early, Bin::Central, Bin::Late];

/// The three disjoint detection intervals within one repetition.
#[derive(Debug, Clone, Copy)]
pub struct TimeBinning {
    pub early: (f64, f64),
    pub central: (f64, f64),
    pub late: (f64, f64),
    /// Repetition period 1/r_p (s).
    pub rep_period: f64,
    pub interleaved: bool,
}

impl TimeBinning {
    /// Bins of width `width` centered on arrival offsets 0, delay, 2 delay.
    pub fn from_delay(delay: f64, width: f64, rep_period: f64, interleaved: bool) -> Result<Self> {
        let half = width / 2.0;
        let b = TimeBinning {
            early: (-half, half),
            central: (delay - half, delay + half),
            late: (2.0 * delay - half, 2.0 * delay + half),
            rep_period,
            interleaved,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let bins = [self.early, self.central, self.late];
        for w in &bins {
            if !(w.0 < w.1) {
                return Err(Error::Detection("empty time bin".into()));
            }
        }
        if !(self.early.1 <= self.central.0 && self.central.1 <= self.late.0) {
            return Err(Error::Detection("time bins must be disjoint and ordered".into()));
        }
        if self.late.1 - self.early.0 > self.rep_period + 1e-15 {
            return Err(Error::Detection("time bins exceed one repetition period".into()));
        }
        if self.rep_period <= 0.0 {
            return Err(Error::Detection("repetition period must be positive".into()));
        }
        Ok(())
    }

    pub fn interval(&self, bin: Bin) -> (f64, f64) {
        match bin {
            Bin::Early => self.early,
            Bin::Central => self.central,
            Bin::Late => self.late,
        }
    }

    /// Intervals strictly preceding `bin` (dead-time ordering).
    pub fn preceding(&self, bin: Bin) -> Vec<(f64, f64)> {
        match bin {
            Bin::Early => vec![],
            Bin::Central => vec![self.early],
            Bin::Late => vec![self.early, self.central],
        }
    }

    /// Union of all three bins.
    pub fn full(&self) -> Vec<(f64, f64)> {
        vec![self.early, self.central, self.late]
    }
}

/// Detector indices: A0, A1, B0, B1.
pub const DETECTORS: [(bool, usize); 4] = [(false, 0), (false, 1), (true, 0), (true, 1)];

pub fn detector_index(party_b: bool, det: usize) -> usize {
    (party_b as usize) * 2 + det
}

/// Vacuum-probability engine: the determinant pipeline or the Poisson
/// approximation, behind one interface.
pub enum Engine {
    Determinant(DeterminantEngine),
    Poisson(Box<PoissonEngine>),
}

/// Determinant-pipeline engine: time-basis mode state plus the per-party
/// reduced transformations.
pub struct DeterminantEngine {
    pub state: TimeModeState,
    pub rt_a: ReducedTransformation,
    pub rt_b: ReducedTransformation,
}

impl DeterminantEngine {
    pub fn bare_vacuum(&self, sel: &WindowSelection) -> Result<f64> {
        if sel.is_empty() {
            return Ok(1.0);
        }
        let mut kernels_a = Vec::new();
        for d in 0..2 {
            if !sel.a[d].is_empty() {
                kernels_a.push(path_projection_kernel(&self.rt_a, d, &sel.a[d])?);
            }
        }
        let mut kernels_b = Vec::new();
        for d in 0..2 {
            if !sel.b[d].is_empty() {
                kernels_b.push(path_projection_kernel(&self.rt_b, d, &sel.b[d])?);
            }
        }
        let op = final_covariance(&self.state, &kernels_a, &kernels_b)?;
        op.vacuum_probability()
    }

    pub fn mean_photons(&self, party_b: bool, det: usize) -> Result<f64> {
        let grid = &self.state.time_grid;
        let full = vec![(
            grid.points[0] - 64.0 * grid.step(),
            grid.points[grid.len() - 1] + 64.0 * grid.step(),
        )];
        let rt = if party_b { &self.rt_b } else { &self.rt_a };
        let kernel = path_projection_kernel(rt, det, &full)?;
        self.state.mean_photons(&kernel, party_b)
    }
}

impl Engine {
    pub fn bare_vacuum(&self, sel: &WindowSelection) -> Result<f64> {
        match self {
            Engine::Determinant(e) => e.bare_vacuum(sel),
            Engine::Poisson(e) => e.bare_vacuum(sel),
        }
    }

    pub fn mean_photons(&self, party_b: bool, det: usize) -> Result<f64> {
        match self {
            Engine::Determinant(e) => e.mean_photons(party_b, det),
            Engine::Poisson(e) => e.mean_photons(party_b, det),
        }
    }
}

/// Noise rate from the afterpulse self-consistency (closed form):
/// r_noise = (r_dc + p_ap r_p <n>) / (1 - p_ap).
pub fn solve_noise_rate(det: &DetectorModel, mean_photons: f64, rep_rate: f64) -> Result<f64> {
    det.validate()?;
    if mean_photons < 0.0 || rep_rate < 0.0 {
        return Err(Error::Detection("negative photon numbers or rates".into()));
    }
    let r_ph = rep_rate * mean_photons;
    let r_noise = (det.dark_rate + det.afterpulse_prob * r_ph) / (1.0 - det.afterpulse_prob);
    // self-consistency: r_noise = r_dc + p_ap (r_noise + r_ph)
    debug_assert!(
        (r_noise - (det.dark_rate + det.afterpulse_prob * (r_noise + r_ph))).abs()
            <= 1e-12 * r_noise.max(1.0)
    );
    Ok(r_noise)
}

/// Statistical dead-time live probability P_live = 1/(1 + r_click tau_dt).
pub fn live_probability(det: &DetectorModel, click_rate: f64) -> f64 {
    1.0 / (1.0 + click_rate.max(0.0) * det.dead_time)
}

/// Per-detector steady-state rate bookkeeping.
#[derive(Debug, Clone, Copy)]
pub struct DetectorRates {
    pub mean_photons: f64,
    pub photon_rate: f64,
    pub noise_rate: f64,
    pub event_rate: f64,
    pub live: f64,
}

pub fn detector_rates(det: &DetectorModel, mean_photons: f64, rep_rate: f64) -> Result<DetectorRates> {
    let noise_rate = solve_noise_rate(det, mean_photons, rep_rate)?;
    let photon_rate = rep_rate * mean_photons;
    let event_rate = noise_rate + photon_rate;
    Ok(DetectorRates {
        mean_photons,
        photon_rate,
        noise_rate,
        event_rate,
        live: live_probability(det, event_rate),
    })
}

fn windows_length(windows: &[(f64, f64)]) -> f64 {
    windows.iter().map(|(a, b)| (b - a).max(0.0)).sum()
}

/// Noise suppression factor e^{-sum_D r_noise^(D) |windows_D|}.
fn noise_factor(sel: &WindowSelection, noise_rates: &[f64; 4]) -> f64 {
    let mut exponent = 0.0;
    for d in 0..2 {
        exponent += noise_rates[detector_index(false, d)] * windows_length(&sel.a[d]);
        exponent += noise_rates[detector_index(true, d)] * windows_length(&sel.b[d]);
    }
    (-exponent).exp()
}

/// Cross-talk settings: number of adjacent repetitions considered per side.
#[derive(Debug, Clone, Copy)]
pub struct CrosstalkWindow(pub usize);

/// Vacuum POVM expectation of a window selection, including noise factors
/// and the cross-talk product over adjacent repetitions (noise counted only
/// in the central repetition).
pub fn crosstalk_product(
    engine: &Engine,
    sel: &WindowSelection,
    noise_rates: &[f64; 4],
    rep_period: f64,
    window: CrosstalkWindow,
) -> Result<f64> {
    let mut p = noise_factor(sel, noise_rates) * engine.bare_vacuum(sel)?;
    for n in 1..=window.0 {
        for sign in [-1.0, 1.0] {
            let shifted = sel.shifted(sign * n as f64 * rep_period);
            p *= engine.bare_vacuum(&shifted)?;
        }
    }
    Ok(p)
}

/// Vacuum POVM expectation for a single detector over an interval set.
pub fn vacuum_povm_expectation(
    engine: &Engine,
    party_b: bool,
    det: usize,
    intervals: &[(f64, f64)],
    noise_rate: f64,
) -> Result<f64> {
    let mut sel = WindowSelection::default();
    if party_b {
        sel.b[det] = intervals.to_vec();
    } else {
        sel.a[det] = intervals.to_vec();
    }
    let bare = engine.bare_vacuum(&sel)?;
    Ok((-noise_rate * windows_length(intervals)).exp() * bare)
}

/// Detection POVM of Eq.-39 structure: click in `bin` with no earlier click,
/// via inclusion-exclusion of vacuum expectations.
#[allow(clippy::too_many_arguments)]
pub fn detection_povm(
    engine: &Engine,
    party_b: bool,
    det: usize,
    binning: &TimeBinning,
    bin: Bin,
    noise_rates: &[f64; 4],
    crosstalk: CrosstalkWindow,
) -> Result<f64> {
    let preceding = binning.preceding(bin);
    let mut with_bin = preceding.clone();
    with_bin.push(binning.interval(bin));
    let mut sel_pre = WindowSelection::default();
    let mut sel_all = WindowSelection::default();
    if party_b {
        sel_pre.b[det] = preceding;
        sel_all.b[det] = with_bin;
    } else {
        sel_pre.a[det] = preceding;
        sel_all.a[det] = with_bin;
    }
    let v_pre = crosstalk_product(engine, &sel_pre, noise_rates, binning.rep_period, crosstalk)?;
    let v_all = crosstalk_product(engine, &sel_all, noise_rates, binning.rep_period, crosstalk)?;
    Ok((v_pre - v_all).max(0.0))
}

/// The sifted interval pairs of the protocol.
pub const SIFTED_PAIRS: [(Bin, Bin); 5] = [
    (Bin::Early, Bin::Early),
    (Bin::Early, Bin::Late),
    (Bin::Central, Bin::Central),
    (Bin::Late, Bin::Early),
    (Bin::Late, Bin::Late),
];

fn is_sifted(pair: (Bin, Bin)) -> bool {
    SIFTED_PAIRS.contains(&pair)
}

/// Key-generation event probability P_key for detectors (D_A, D_B) clicking
/// in (I_A, I_B): coincidence with no earlier clicks, vacuum in the two
/// complementary detectors over all bins, and the product of the four live
/// probabilities.
#[allow(clippy::too_many_arguments)]
pub fn key_event_probability(
    engine: &Engine,
    d_a: usize,
    d_b: usize,
    bin_a: Bin,
    bin_b: Bin,
    binning: &TimeBinning,
    noise_rates: &[f64; 4],
    live: &[f64; 4],
    crosstalk: CrosstalkWindow,
) -> Result<f64> {
    if !is_sifted((bin_a, bin_b)) {
        return Err(Error::Detection(format!(
            "interval pair ({bin_a:?}, {bin_b:?}) is not in the sifted set"
        )));
    }
    let other_a = 1 - d_a;
    let other_b = 1 - d_b;
    let full = binning.full();
    // Pi_key = Pi_vac(other A) Pi_vac(other B)
    //          [Pi_vac(pre_A) - Pi_vac(pre_A + I_A)]
    //          [Pi_vac(pre_B) - Pi_vac(pre_B + I_B)]:
    // a click in the requested bin with no earlier click on the same
    // detector, vacuum on the complementary detectors over all bins.
    let pre_a = binning.preceding(bin_a);
    let mut all_a = pre_a.clone();
    all_a.push(binning.interval(bin_a));
    let pre_b = binning.preceding(bin_b);
    let mut all_b = pre_b.clone();
    all_b.push(binning.interval(bin_b));

    let make_sel = |wa: &Vec<(f64, f64)>, wb: &Vec<(f64, f64)>| {
        let mut sel = WindowSelection::default();
        sel.a[other_a] = full.clone();
        sel.b[other_b] = full.clone();
        sel.a[d_a] = wa.clone();
        sel.b[d_b] = wb.clone();
        sel
    };
    let period = binning.rep_period;
    let t_pp = crosstalk_product(engine, &make_sel(&pre_a, &pre_b), noise_rates, period, crosstalk)?;
    let t_pa = crosstalk_product(engine, &make_sel(&pre_a, &all_b), noise_rates, period, crosstalk)?;
    let t_ap = crosstalk_product(engine, &make_sel(&all_a, &pre_b), noise_rates, period, crosstalk)?;
    let t_aa = crosstalk_product(engine, &make_sel(&all_a, &all_b), noise_rates, period, crosstalk)?;
    let expectation = (t_pp - t_pa - t_ap + t_aa).max(0.0);
    let live_product = live[detector_index(false, d_a)]
        * live[detector_index(false, other_a)]
        * live[detector_index(true, d_b)]
        * live[detector_index(true, other_b)];
    Ok(live_product * expectation)
}

/// Complete event statistics of one scenario point.
#[derive(Debug, Clone)]
pub struct EventProbabilities {
    pub rates: [DetectorRates; 4],
    /// P_key per (D_A, D_B, I_A, I_B) over the sifted set.
    pub key: BTreeMap<(usize, usize, Bin, Bin), f64>,
    /// Per detector, per bin: P(click in bin, no earlier click).
    pub singles_bins: [[f64; 3]; 4],
    pub qber_time: Option<f64>,
    pub qber_phase: Option<f64>,
    /// Sifted key rate (1/s).
    pub sifted_rate: f64,
}

/// QBER and sifted-rate summary from a key-event table.
pub fn qber_and_sifted_rate(
    key: &BTreeMap<(usize, usize, Bin, Bin), f64>,
    rep_rate: f64,
) -> (Option<f64>, Option<f64>, f64) {
    let sum_over_bins = |ba: Bin, bb: Bin| -> f64 {
        key.iter().filter(|((_, _, a, b), _)| *a == ba && *b == bb).map(|(_, p)| p).sum()
    };
    let p_ee = sum_over_bins(Bin::Early, Bin::Early);
    let p_el = sum_over_bins(Bin::Early, Bin::Late);
    let p_le = sum_over_bins(Bin::Late, Bin::Early);
    let p_ll = sum_over_bins(Bin::Late, Bin::Late);
    let time_total = p_ee + p_el + p_le + p_ll;
    let qber_time = if time_total > 0.0 { Some((p_el + p_le) / time_total) } else { None };
    let p_cc_all: f64 = key
        .iter()
        .filter(|((_, _, a, b), _)| *a == Bin::Central && *b == Bin::Central)
        .map(|(_, p)| p)
        .sum();
    let p_cc_err: f64 = key
        .iter()
        .filter(|((da, db, a, b), _)| *a == Bin::Central && *b == Bin::Central && da != db)
        .map(|(_, p)| p)
        .sum();
    let qber_phase = if p_cc_all > 0.0 { Some(p_cc_err / p_cc_all) } else { None };
    let sifted: f64 = key.values().sum();
    (qber_time, qber_phase, rep_rate * sifted)
}

/// Assemble the full event table for one configuration point.
pub fn assemble_event_table(
    engine: &Engine,
    binning: &TimeBinning,
    detectors: &[DetectorModel; 4],
    rep_rate: f64,
    crosstalk: CrosstalkWindow,
) -> Result<EventProbabilities> {
    binning.validate()?;
    let mut rates = [DetectorRates {
        mean_photons: 0.0,
        photon_rate: 0.0,
        noise_rate: 0.0,
        event_rate: 0.0,
        live: 1.0,
    }; 4];
    for (idx, (party_b, det)) in DETECTORS.iter().enumerate() {
        let n = engine.mean_photons(*party_b, *det)?;
        rates[idx] = detector_rates(&detectors[idx], n, rep_rate)?;
    }
    let noise_rates = [
        rates[0].noise_rate,
        rates[1].noise_rate,
        rates[2].noise_rate,
        rates[3].noise_rate,
    ];
    let live = [rates[0].live, rates[1].live, rates[2].live, rates[3].live];

    // sifted key events, parallel across table cells
    let cells: Vec<(usize, usize, Bin, Bin)> = SIFTED_PAIRS
        .iter()
        .flat_map(|&(ba, bb)| {
            (0..2).flat_map(move |da| (0..2).map(move |db| (da, db, ba, bb)))
        })
        .collect();
    let entries: Result<Vec<((usize, usize, Bin, Bin), f64)>> = cells
        .par_iter()
        .map(|&(da, db, ba, bb)| {
            let p = key_event_probability(
                engine, da, db, ba, bb, binning, &noise_rates, &live, crosstalk,
            )?;
            Ok(((da, db, ba, bb), p))
        })
        .collect();
    let key: BTreeMap<_, _> = entries?.into_iter().collect();

    let mut singles_bins = [[0.0; 3]; 4];
    for (idx, (party_b, det)) in DETECTORS.iter().enumerate() {
        for (bi, bin) in BINS.iter().enumerate() {
            singles_bins[idx][bi] =
                detection_povm(engine, *party_b, *det, binning, *bin, &noise_rates, crosstalk)?;
        }
    }
    let (qber_time, qber_phase, sifted_rate) = qber_and_sifted_rate(&key, rep_rate);
    Ok(EventProbabilities { rates, key, singles_bins, qber_time, qber_phase, sifted_rate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{gain_for_mu, schmidt, split_pump, ProcessType, SchmidtOptions};
    use crate::grid::{make_grid, TimeGrid};
    use crate::jsa::{assemble_jsa, PhaseMatching, PumpAmplitude};
    use crate::optics::{
        build_reduced_transformation, build_time_mode_state, FiberLink, FreqModeInputs,
        ReceiverInterferometer,
    };
    use approx::assert_relative_eq;
    use std::f64::consts::PI;
    use std::sync::Arc;

    const GHZ: f64 = 2.0 * PI * 1e9;

    #[test]
    fn noise_rate_closed_form() {
        let det = DetectorModel {
            efficiency_amplitude: 1.0,
            dark_rate: 100.0,
            afterpulse_prob: 0.1,
            dead_time: 10e-6,
        };
        // p_ap = 0 -> r_dc
        let det0 = DetectorModel { afterpulse_prob: 0.0, ..det };
        assert_relative_eq!(solve_noise_rate(&det0, 0.5, 1e6).unwrap(), 100.0);
        // r_dc = 100, p_ap = 0.1, r_p <n> = 1000 -> (100 + 100)/0.9
        let r = solve_noise_rate(&det, 1e-3, 1e6).unwrap();
        assert_relative_eq!(r, 200.0 / 0.9, max_relative = 1e-12);
        // substitution into the defining relation closes
        let r_ph = 1e6 * 1e-3;
        assert_relative_eq!(r, det.dark_rate + det.afterpulse_prob * (r + r_ph), epsilon = 1e-12);
        // p_ap >= 1 rejected
        let bad = DetectorModel { afterpulse_prob: 1.0, ..det };
        assert!(solve_noise_rate(&bad, 0.0, 0.0).is_err());
    }

    #[test]
    fn live_probability_values() {
        let mut det = DetectorModel::ideal();
        assert_relative_eq!(live_probability(&det, 1e9), 1.0);
        det.dead_time = 1.0;
        assert_relative_eq!(live_probability(&det, 1.0), 0.5);
        det.dead_time = 10e-6;
        assert_relative_eq!(live_probability(&det, 5e4), 1.0 / 1.5, max_relative = 1e-12);
    }

    struct TestBed {
        engine: Engine,
        binning: TimeBinning,
        time: Arc<TimeGrid>,
    }

    /// Ideal lossless type-II testbed with matched interferometers.
    fn testbed(mu: f64, phi_a: f64, phi_b: f64, phi_p: f64) -> TestBed {
        let grid = Arc::new(make_grid(0.0, 12.0 * GHZ, 256).unwrap());
        let pump_grid = Arc::new(make_grid(0.0, 6.0 * GHZ, 257).unwrap());
        let pump = PumpAmplitude::gaussian_transform_limited(pump_grid, 0.4e-9).unwrap();
        let pm_grid = Arc::new(make_grid(0.0, 30.0 * GHZ, 513).unwrap());
        let pm = PhaseMatching::gaussian(pm_grid, 2.5 * GHZ).unwrap();
        let jsa = assemble_jsa(&pump, &pm, grid.clone(), ProcessType::TypeII).unwrap();
        let time = Arc::new(TimeGrid::dual_to(&grid, -0.3 * 2.0 * PI / grid.step()).unwrap());
        let dt = time.step();
        let delay = 64.0 * dt;
        let sd0 = schmidt(&jsa, 1.0, SchmidtOptions::default()).unwrap();
        let gain = gain_for_mu(
            &sd0.coefficients,
            ProcessType::TypeII,
            (crate::covariance::BALANCED, crate::covariance::BALANCED),
            mu.max(1e-12),
        )
        .unwrap();
        let sd = schmidt(&jsa, gain, SchmidtOptions::default()).unwrap();
        let split =
            split_pump(&sd, crate::covariance::BALANCED, phi_p, delay, 0.4e-9).unwrap();
        let inputs = FreqModeInputs {
            freq_grid: &grid,
            modes_a: sd.modes_signal.clone(),
            modes_b: sd.modes_idler.mapv(|z| z.conj()),
            sigma: sd.squeezing(),
        };
        let state = build_time_mode_state(
            &inputs,
            &split,
            &FiberLink::lossless(0.0, 0.0),
            &FiberLink::lossless(0.0, 0.0),
            time.clone(),
            None,
            ProcessType::TypeII,
            crate::covariance::CovarianceForm::Halved,
        )
        .unwrap();
        let mut rx_a = ReceiverInterferometer::ideal(delay);
        rx_a.phase_long = phi_a;
        let mut rx_b = ReceiverInterferometer::ideal(delay);
        rx_b.phase_long = phi_b;
        let rt_a = build_reduced_transformation(&rx_a, 1.0).unwrap();
        let rt_b = build_reduced_transformation(&rx_b, 1.0).unwrap();
        let binning =
            TimeBinning::from_delay(delay, 40.0 * dt, 1024.0 * dt, false).unwrap();
        TestBed {
            engine: Engine::Determinant(DeterminantEngine { state, rt_a, rt_b }),
            binning,
            time,
        }
    }

    #[test]
    fn vacuum_povm_with_noise_only() {
        let tb = testbed(1e-12, 0.0, 0.0, 0.0);
        // Gamma ~ 0, r_noise = 0 -> 1
        let p = vacuum_povm_expectation(&tb.engine, false, 0, &[tb.binning.early], 0.0).unwrap();
        assert_relative_eq!(p, 1.0, epsilon = 1e-9);
        // Gamma ~ 0, r |I| = ln 2 -> 1/2
        let len = tb.binning.early.1 - tb.binning.early.0;
        let r = (2.0f64).ln() / len;
        let p = vacuum_povm_expectation(&tb.engine, false, 0, &[tb.binning.early], r).unwrap();
        assert_relative_eq!(p, 0.5, epsilon = 1e-9);
    }

    #[test]
    fn single_detector_outcomes_are_exhaustive() {
        let tb = testbed(0.05, 0.3, 0.0, 0.1);
        let noise_rates = [2e5, 1e5, 0.0, 3e5];
        let crosstalk = CrosstalkWindow(0);
        for (party_b, det) in [(false, 0), (false, 1), (true, 0)] {
            let mut total = 0.0;
            for bin in BINS {
                total +=
                    detection_povm(&tb.engine, party_b, det, &tb.binning, bin, &noise_rates, crosstalk)
                        .unwrap();
            }
            // plus no-click over the whole window
            let full = tb.binning.full();
            let idx = detector_index(party_b, det);
            let none =
                vacuum_povm_expectation(&tb.engine, party_b, det, &full, noise_rates[idx]).unwrap();
            total += none;
            assert!((total - 1.0).abs() < 1e-8, "outcomes sum to {total}");
        }
    }

    #[test]
    fn noise_only_key_events_factorize() {
        let tb = testbed(1e-12, 0.0, 0.0, 0.0);
        let noise_rates = [1e5, 5e4, 8e4, 1.2e5];
        let live = [1.0; 4];
        let p_key = key_event_probability(
            &tb.engine,
            0,
            1,
            Bin::Early,
            Bin::Late,
            &tb.binning,
            &noise_rates,
            &live,
            CrosstalkWindow(0),
        )
        .unwrap();
        // independent Poisson noise: product of per-detector factors
        let len = |w: (f64, f64)| w.1 - w.0;
        let full_len: f64 = tb.binning.full().iter().map(|&w| len(w)).sum();
        let click_e = 1.0 - (-noise_rates[0] * len(tb.binning.early)).exp();
        let click_l_after = (-noise_rates[3] * (len(tb.binning.early) + len(tb.binning.central))).exp()
            * (1.0 - (-noise_rates[3] * len(tb.binning.late)).exp());
        let vac_a1 = (-noise_rates[1] * full_len).exp();
        let vac_b0 = (-noise_rates[2] * full_len).exp();
        let expect = click_e * click_l_after * vac_a1 * vac_b0;
        assert_relative_eq!(p_key, expect, max_relative = 1e-10);
    }

    #[test]
    fn non_sifted_pairs_rejected() {
        let tb = testbed(0.01, 0.0, 0.0, 0.0);
        let res = key_event_probability(
            &tb.engine,
            0,
            0,
            Bin::Early,
            Bin::Central,
            &tb.binning,
            &[0.0; 4],
            &[1.0; 4],
            CrosstalkWindow(0),
        );
        assert!(res.is_err());
    }

    #[test]
    fn franson_phase_selects_correlated_detectors() {
        // phi_A + phi_B - phi_p = 0: anti-correlated central-bin
        // coincidences vanish
        let tb = testbed(1e-3, 0.0, 0.0, 0.0);
        let live = [1.0; 4];
        let same = key_event_probability(
            &tb.engine, 0, 0, Bin::Central, Bin::Central, &tb.binning, &[0.0; 4], &live,
            CrosstalkWindow(0),
        )
        .unwrap();
        let anti = key_event_probability(
            &tb.engine, 0, 1, Bin::Central, Bin::Central, &tb.binning, &[0.0; 4], &live,
            CrosstalkWindow(0),
        )
        .unwrap();
        assert!(
            anti < 2e-3 * same,
            "anti-correlated {anti:.3e} should vanish against {same:.3e}"
        );
    }

    #[test]
    fn crosstalk_identity_when_wavepacket_inside_period() {
        let tb = testbed(0.02, 0.4, 0.2, 0.3);
        let noise_rates = [1e4; 4];
        let mut sel = WindowSelection::default();
        sel.a[0] = vec![tb.binning.early, tb.binning.central];
        sel.b[1] = vec![tb.binning.late];
        let p0 = crosstalk_product(&tb.engine, &sel, &noise_rates, tb.binning.rep_period, CrosstalkWindow(0)).unwrap();
        let p1 = crosstalk_product(&tb.engine, &sel, &noise_rates, tb.binning.rep_period, CrosstalkWindow(1)).unwrap();
        let p2 = crosstalk_product(&tb.engine, &sel, &noise_rates, tb.binning.rep_period, CrosstalkWindow(2)).unwrap();
        assert_relative_eq!(p0, p1, epsilon = 1e-10);
        assert!((p1 - p2).abs() < 1e-10, "adjacent windows differ: {p1} vs {p2}");
        let _ = tb.time;
    }

    #[test]
    fn event_table_ideal_config() {
        let tb = testbed(1e-3, 0.0, 0.0, 0.0);
        let detectors = [DetectorModel::ideal(); 4];
        let table = assemble_event_table(
            &tb.engine,
            &tb.binning,
            &detectors,
            110e6,
            CrosstalkWindow(0),
        )
        .unwrap();
        let qt = table.qber_time.unwrap();
        let qp = table.qber_phase.unwrap();
        assert!(qt < 1e-6, "ideal time QBER {qt}");
        assert!(qp < 1e-3, "ideal phase QBER {qp}");
        assert!(table.sifted_rate > 0.0);
    }

    #[test]
    fn phase_quarter_turn_gives_half_phase_qber() {
        // phi_A + phi_B - phi_p = pi/2: cos = 0 -> QBER_phase = 1/2
        let tb = testbed(1e-3, PI / 2.0, 0.0, 0.0);
        let detectors = [DetectorModel::ideal(); 4];
        let table = assemble_event_table(
            &tb.engine,
            &tb.binning,
            &detectors,
            110e6,
            CrosstalkWindow(0),
        )
        .unwrap();
        let qp = table.qber_phase.unwrap();
        assert!((qp - 0.5).abs() < 1e-3, "phase QBER {qp}");
    }
}
