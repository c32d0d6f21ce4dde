//! Scenario orchestration: build the full pipeline from a configuration,
//! evaluate single points, parameter sweeps and best/worst-case envelopes.

pub mod config;

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;

pub use config::{
    apply_sweep_point, parse_axis, EnvelopeCase, EnvelopeMode, ScenarioConfig, SweepAxis,
};

use crate::covariance::{
    gain_for_mu, schmidt, schmidt_kernel, split_pump, CovarianceForm, ProcessType,
    SchmidtDecomposition, SchmidtOptions,
};
use crate::detection::{
    assemble_event_table, CrosstalkWindow, DetectorModel, DeterminantEngine, Engine,
    EventProbabilities, TimeBinning,
};
use crate::error::{Error, Result};
use crate::grid::{make_grid, FrequencyGrid, TimeGrid};
use crate::jsa::{
    assemble_jsa, load_channel, taper_edges, ChannelTransmission, JointSpectralAmplitude,
    PhaseMatching, PumpAmplitude,
};
use crate::linalg::C64;
use crate::optics::poisson::{PoissonEngine, PoissonPumpPath};
use crate::optics::{
    build_reduced_transformation, build_time_mode_state, FiberLink, FreqModeInputs,
    ReceiverInterferometer,
};
use crate::scenario::config::{DetectorConfig, ReceiverConfig};
use crate::wdm::{check_no_double_photon, reduce_jsa, ChannelPair, ReducedJsa};

/// Largest grid for which the dense Schmidt decomposition is attempted.
pub const SCHMIDT_GRID_CAP: usize = 1024;

/// One evaluated scenario point.
#[derive(Debug, Clone)]
pub struct ResultRow {
    pub sweep_value: f64,
    pub envelope: &'static str,
    pub sifted_rate_hz: f64,
    pub qber_time: f64,
    pub qber_phase: f64,
    /// Per-detector total event rates (1/s): A0, A1, B0, B1.
    pub singles_hz: [f64; 4],
    /// Per-detector live probabilities: A0, A1, B0, B1.
    pub live: [f64; 4],
}

#[derive(Debug, Clone)]
pub struct SweepFailure {
    pub sweep_value: f64,
    pub envelope: &'static str,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct SweepTable {
    pub rows: Vec<ResultRow>,
    pub failures: Vec<SweepFailure>,
}

/// Source objects reusable across sweep points.
pub struct PreparedSource {
    pub pump: PumpAmplitude,
    pub pm: PhaseMatching,
    pub jsa: JointSpectralAmplitude,
    pub freq_grid: Arc<FrequencyGrid>,
    pub channels: Option<(ChannelTransmission, ChannelTransmission)>,
    /// Unit-gain Schmidt decomposition (full JSA for type-II).
    pub unit_sd: Option<SchmidtDecomposition>,
    /// Unit-gain reduction at the prepared channel offset (type-0).
    pub reduced_unit: Option<(ReducedJsa, ChannelPair, SchmidtDecomposition, f64)>,
}

fn dual_grids(cfg: &ScenarioConfig) -> Result<(Arc<FrequencyGrid>, Arc<TimeGrid>)> {
    let dt = cfg.grids.time_step_ps * 1e-12;
    let n = cfg.grids.time_points;
    let dw = 2.0 * PI / (n as f64 * dt);
    let hw = dw * (n as f64 - 1.0) / 2.0;
    let freq = Arc::new(make_grid(0.0, hw, n)?);
    let time = Arc::new(TimeGrid::uniform(cfg.grids.time_start_ps * 1e-12, dt, n)?);
    Ok((freq, time))
}

fn build_phase_matching(cfg: &ScenarioConfig, hw_signal: f64) -> Result<PhaseMatching> {
    let span = 2.0 * hw_signal * 1.001;
    let n_pm = 4097;
    let grid = Arc::new(make_grid(0.0, span, n_pm)?);
    let mut pm = match cfg.source.pm_model.as_str() {
        "gaussian" => {
            let width = 2.0 * PI * 1e9 * cfg.source.pm_gaussian_width_ghz.unwrap();
            PhaseMatching::gaussian(grid, width)?
        }
        "sinc" | "fitted" => {
            let length = cfg.source.crystal_length_mm.unwrap() * 1e-3;
            let dk_prime = cfg.source.dk_prime_ps_per_mm.unwrap() * 1e-12 / 1e-3;
            if cfg.source.pm_model == "fitted" {
                let path = cfg.source.spectrum_csv.as_ref().unwrap();
                let (omega, vals) = crate::jsa::load_spectrum_csv(path)?;
                let fit = crate::jsa::fit::phase_matching_from_fit(
                    &omega,
                    &vals,
                    length,
                    dk_prime,
                    &crate::jsa::fit::FitOptions::default(),
                )?;
                // evaluate the fitted crystal model on the simulation grid
                let amp = crate::jsa::phase_matching_model(
                    grid.points.as_slice().unwrap(),
                    length,
                    dk_prime,
                    fit.params.dk0,
                    fit.params.imperfection_linear,
                    fit.params.imperfection_quadratic,
                );
                PhaseMatching {
                    amplitude: ndarray::Array1::from(amp),
                    grid,
                    crystal_length: length,
                    dk_prime,
                    dk0: fit.params.dk0,
                    imperfection_linear: fit.params.imperfection_linear,
                    imperfection_quadratic: fit.params.imperfection_quadratic,
                    fit_residual: Some(fit.residual),
                }
            } else {
                let amp = crate::jsa::phase_matching_model(
                    grid.points.as_slice().unwrap(),
                    length,
                    dk_prime,
                    cfg.source.dk0_per_m,
                    cfg.source.imperfection_linear_per_m2,
                    cfg.source.imperfection_quadratic_per_m3,
                );
                PhaseMatching {
                    amplitude: ndarray::Array1::from(amp),
                    grid,
                    crystal_length: length,
                    dk_prime,
                    dk0: cfg.source.dk0_per_m,
                    imperfection_linear: cfg.source.imperfection_linear_per_m2,
                    imperfection_quadratic: cfg.source.imperfection_quadratic_per_m3,
                    fit_residual: None,
                }
            }
        }
        _ => unreachable!("validated"),
    };
    if cfg.source.spectral_taper_fraction > 0.0 {
        taper_edges(&mut pm.amplitude, cfg.source.spectral_taper_fraction);
    }
    Ok(pm)
}

fn schmidt_options(cfg: &ScenarioConfig) -> SchmidtOptions {
    SchmidtOptions {
        rel_tol: cfg.grids.schmidt_rel_tol,
        max_modes: cfg.grids.schmidt_modes_max,
    }
}

fn offset_rad(cfg: &ScenarioConfig) -> f64 {
    cfg.wdm.as_ref().map_or(0.0, |w| 2.0 * PI * 1e9 * w.offset_ghz)
}

fn reduce_for_offset(
    cfg: &ScenarioConfig,
    jsa: &JointSpectralAmplitude,
    channels: &(ChannelTransmission, ChannelTransmission),
    offset: f64,
) -> Result<(ReducedJsa, ChannelPair, SchmidtDecomposition)> {
    let wdm = cfg.wdm.as_ref().unwrap();
    let pair = ChannelPair::new(channels.0.shifted(offset), channels.1.clone())?;
    let reduced = reduce_jsa(jsa, &pair, wdm.order_n)?;
    if reduced.keep.len() > SCHMIDT_GRID_CAP {
        return Err(Error::Config(format!(
            "reduced grid has {} points (> {SCHMIDT_GRID_CAP}); coarsen the grid or narrow the channels",
            reduced.keep.len()
        )));
    }
    let sd = schmidt_kernel(&reduced.kernel, 1.0, ProcessType::Type0, schmidt_options(cfg))?;
    Ok((reduced, pair, sd))
}

/// Build the heavy, sweep-invariant source objects.
pub fn prepare_source(cfg: &ScenarioConfig) -> Result<PreparedSource> {
    let process = cfg.process_type()?;
    let (freq, _time) = dual_grids(cfg)?;
    let hw = freq.points[freq.len() - 1];
    // pump grid: covers the pump support comfortably
    let fwhm = cfg.source.pump_fwhm_ps * 1e-12;
    let sigma_t = fwhm / (2.0 * (2.0 * (2.0f64).ln()).sqrt());
    let sigma_w = 1.0 / (2.0 * sigma_t);
    let pump_grid = Arc::new(make_grid(0.0, 11.0 * sigma_w, 1025)?);
    let pump = PumpAmplitude::gaussian_transform_limited(pump_grid, fwhm)?;
    let pm = build_phase_matching(cfg, hw)?;
    let jsa = assemble_jsa(&pump, &pm, freq.clone(), process)?;
    let mut prepared = PreparedSource {
        pump,
        pm,
        jsa,
        freq_grid: freq,
        channels: None,
        unit_sd: None,
        reduced_unit: None,
    };
    match process {
        ProcessType::TypeII => {
            if cfg.engine.kind == config::EngineKind::Determinant {
                if cfg.grids.time_points > SCHMIDT_GRID_CAP {
                    return Err(Error::Config(format!(
                        "determinant engine caps the dense Schmidt decomposition at {SCHMIDT_GRID_CAP} grid points; \
                         reduce grids.time_points or use the poisson engine"
                    )));
                }
                prepared.unit_sd =
                    Some(schmidt(&prepared.jsa, 1.0, schmidt_options(cfg))?);
            }
        }
        ProcessType::Type0 => {
            let wdm = cfg.wdm.as_ref().unwrap();
            let a = load_channel(&wdm.channel_a_csv)?;
            let b = load_channel(&wdm.channel_b_csv)?;
            let channels = (a, b);
            let offs = offset_rad(cfg);
            let (reduced, pair, sd) = reduce_for_offset(cfg, &prepared.jsa, &channels, offs)?;
            prepared.reduced_unit = Some((reduced, pair, sd, offs));
            prepared.channels = Some(channels);
        }
    }
    Ok(prepared)
}

fn receiver_from_config(rc: &ReceiverConfig, eff: [f64; 2]) -> ReceiverInterferometer {
    ReceiverInterferometer {
        splitter_t: rc.splitter_t,
        phase_short: 0.0,
        phase_long: rc.phase_rad,
        delay_short: 0.0,
        delay_long: rc.delay_ps * 1e-12,
        eta: [
            [rc.eta_d0_short * eff[0], rc.eta_d1_short * eff[1]],
            [rc.eta_d0_long * eff[0], rc.eta_d1_long * eff[1]],
        ],
        mode_match: rc.mode_match,
    }
}

fn detector_model(dc: &DetectorConfig) -> DetectorModel {
    DetectorModel {
        efficiency_amplitude: dc.efficiency.sqrt(),
        dark_rate: dc.dark_count_rate_hz,
        afterpulse_prob: dc.afterpulse_prob,
        dead_time: dc.dead_time_us * 1e-6,
    }
}

/// Evaluate one configuration point against prepared source objects.
pub fn evaluate_point(cfg: &ScenarioConfig, src: &PreparedSource) -> Result<EventProbabilities> {
    let process = cfg.process_type()?;
    let (freq, time) = dual_grids(cfg)?;
    let delay = cfg.receiver_a.delay_ps * 1e-12;
    let delay_steps = time.shift_steps(delay).map_err(|e| {
        Error::Config(format!("receiver delay must be commensurate with the grid: {e}"))
    })?;
    // repetition period snapped to the grid
    let period_exact = 1.0 / (cfg.binning.rep_rate_mhz * 1e6);
    let period_steps = (period_exact / time.step()).round();
    let period = period_steps * time.step();
    if (period - period_exact).abs() > 1e-3 * period_exact {
        return Err(Error::Config(format!(
            "repetition period {period_exact:.6e} s is not commensurate with the time grid \
             (nearest multiple {period:.6e} s); adjust rep_rate_mhz or time_step_ps"
        )));
    }
    let rep_rate = 1.0 / period;

    let link_a = FiberLink {
        length_km: cfg.links.length_a_km,
        loss_db_per_km: cfg.links.loss_db_per_km,
        beta2_s2_per_km: cfg.links.beta2_ps2_per_km * 1e-24,
    };
    let link_b = FiberLink { length_km: cfg.links.length_b_km, ..link_a };

    let det_cfgs = cfg.detectors.as_array();
    let eff_a = [det_cfgs[0].efficiency.sqrt(), det_cfgs[1].efficiency.sqrt()];
    let eff_b = [det_cfgs[2].efficiency.sqrt(), det_cfgs[3].efficiency.sqrt()];
    let rx_a = receiver_from_config(&cfg.receiver_a, eff_a);
    let rx_b = receiver_from_config(&cfg.receiver_b, eff_b);
    let rt_a = build_reduced_transformation(&rx_a, link_a.amplitude_transmittivity())?;
    let rt_b = build_reduced_transformation(&rx_b, link_b.amplitude_transmittivity())?;

    let t_p = cfg.source.pump_splitter_t;
    let r_p = (1.0 - t_p * t_p).max(0.0).sqrt();
    let norm = (t_p.powi(4) + r_p.powi(4)).sqrt();
    let pump_ks = (t_p * t_p / norm, r_p * r_p / norm);
    let pump_duration = cfg.source.pump_fwhm_ps * 1e-12;

    let engine = match cfg.engine.kind {
        config::EngineKind::Poisson => {
            if process != ProcessType::TypeII {
                return Err(Error::Config("the poisson engine supports type2 sources only".into()));
            }
            let mut engine = PoissonEngine::new(
                &src.pump,
                &src.pm,
                time.clone(),
                &link_a,
                &link_b,
                vec![
                    PoissonPumpPath { k_coeff: pump_ks.0, phase: 0.0, delay_steps: 0 },
                    PoissonPumpPath {
                        k_coeff: pump_ks.1,
                        phase: cfg.source.pump_phase_rad,
                        delay_steps,
                    },
                ],
                rt_a,
                rt_b,
                cfg.source.mu,
            )?;
            engine.oscillation_threshold = cfg.engine.oscillation_threshold;
            Engine::Poisson(Box::new(engine))
        }
        config::EngineKind::Determinant => {
            let (inputs_sigma, modes_a, modes_b, sd_for_split, trunc) = match process {
                ProcessType::TypeII => {
                    let unit = src.unit_sd.as_ref().ok_or_else(|| {
                        Error::Config("missing prepared Schmidt decomposition".into())
                    })?;
                    let gain =
                        gain_for_mu(&unit.coefficients, process, pump_ks, cfg.source.mu)?;
                    let mut sd = unit.clone();
                    sd.gain = gain;
                    let sigma = sd.squeezing();
                    let modes_a = sd.modes_signal.clone();
                    let modes_b = sd.modes_idler.mapv(|z: C64| z.conj());
                    (sigma, modes_a, modes_b, sd, None)
                }
                ProcessType::Type0 => {
                    let wdm = cfg.wdm.as_ref().unwrap();
                    let offs = offset_rad(cfg);
                    let owned;
                    let (reduced, pair, unit) = match &src.reduced_unit {
                        Some((r, p, s, prepared_offset))
                            if (prepared_offset - offs).abs() <= 1e-6 =>
                        {
                            (r, p, s)
                        }
                        _ => {
                            let channels = src.channels.as_ref().ok_or_else(|| {
                                Error::Config("missing prepared channels".into())
                            })?;
                            owned = reduce_for_offset(cfg, &src.jsa, channels, offs)?;
                            (&owned.0, &owned.1, &owned.2)
                        }
                    };
                    if !check_no_double_photon(pair, reduced.delta_plus, wdm.order_n) {
                        return Err(Error::Wdm(
                            "channels too close to the center frequency: c_inner <= N Delta_+/4, \
                             the reordered two-party form is invalid"
                                .into(),
                        ));
                    }
                    let gain =
                        gain_for_mu(&unit.coefficients, process, pump_ks, cfg.source.mu)?;
                    let mut sd = unit.clone();
                    sd.gain = gain;
                    let sigma = sd.squeezing();
                    let rgrid = reduced.grid()?;
                    let t_a = pair.channel_a.amplitude_on(&rgrid);
                    let t_b = pair.channel_b.amplitude_on(&rgrid);
                    let mut u_a = sd.modes_signal.clone();
                    for ((i, _), v) in u_a.indexed_iter_mut() {
                        *v *= t_a[i];
                    }
                    let mut v_b = sd.modes_idler.mapv(|z: C64| z.conj());
                    for ((i, _), v) in v_b.indexed_iter_mut() {
                        *v *= t_b[i];
                    }
                    let modes_a = reduced.scatter_to_full(&u_a);
                    let modes_b = reduced.scatter_to_full(&v_b);
                    (sigma, modes_a, modes_b, sd, Some(wdm.order_n))
                }
            };
            let split = split_pump(
                &sd_for_split,
                t_p,
                cfg.source.pump_phase_rad,
                delay,
                pump_duration,
            )?;
            let inputs = FreqModeInputs {
                freq_grid: &freq,
                modes_a,
                modes_b,
                sigma: inputs_sigma,
            };
            let state = build_time_mode_state(
                &inputs,
                &split,
                &link_a,
                &link_b,
                time.clone(),
                trunc,
                process,
                CovarianceForm::Halved,
            )?;
            Engine::Determinant(DeterminantEngine { state, rt_a, rt_b })
        }
    };

    let binning = TimeBinning::from_delay(
        delay,
        cfg.binning.bin_width_ps * 1e-12,
        period,
        cfg.binning.interleaved,
    )?;
    let detectors = [
        detector_model(det_cfgs[0]),
        detector_model(det_cfgs[1]),
        detector_model(det_cfgs[2]),
        detector_model(det_cfgs[3]),
    ];
    assemble_event_table(
        &engine,
        &binning,
        &detectors,
        rep_rate,
        CrosstalkWindow(cfg.binning.crosstalk_window),
    )
}

fn row_from_table(
    table: &EventProbabilities,
    sweep_value: f64,
    envelope: &'static str,
) -> Result<ResultRow> {
    let qber_time = table.qber_time.ok_or_else(|| {
        Error::Numerical("time-basis QBER undefined (no sifted time-basis events)".into())
    })?;
    let qber_phase = table.qber_phase.ok_or_else(|| {
        Error::Numerical("phase-basis QBER undefined (no central-bin coincidences)".into())
    })?;
    Ok(ResultRow {
        sweep_value,
        envelope,
        sifted_rate_hz: table.sifted_rate,
        qber_time,
        qber_phase,
        singles_hz: [
            table.rates[0].event_rate,
            table.rates[1].event_rate,
            table.rates[2].event_rate,
            table.rates[3].event_rate,
        ],
        live: [
            table.rates[0].live,
            table.rates[1].live,
            table.rates[2].live,
            table.rates[3].live,
        ],
    })
}

fn envelope_cases(mode: EnvelopeMode) -> Vec<EnvelopeCase> {
    match mode {
        EnvelopeMode::None => vec![EnvelopeCase::Nominal],
        EnvelopeMode::Best => vec![EnvelopeCase::Best],
        EnvelopeMode::Worst => vec![EnvelopeCase::Worst],
        EnvelopeMode::Both => vec![EnvelopeCase::Best, EnvelopeCase::Worst],
    }
}

/// Single-point evaluation through the full pipeline (one row per envelope
/// case).
pub fn run_simulate(cfg: &ScenarioConfig) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for case in envelope_cases(cfg.envelope.mode) {
        let case_cfg = cfg.envelope_case(case);
        let src = prepare_source(&case_cfg)?;
        let table = evaluate_point(&case_cfg, &src)?;
        rows.push(row_from_table(&table, 0.0, case.label())?);
    }
    Ok(rows)
}

/// Parameter sweep: one row per (value, envelope case), deterministic
/// ordering; per-point failures are recorded and the sweep continues.
pub fn run_sweep(cfg: &ScenarioConfig) -> Result<SweepTable> {
    cfg.validate()?;
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("run_sweep needs a [sweep] section".into()))?
        .clone();
    let axis = parse_axis(&sweep.axis)?;
    let mut table = SweepTable::default();
    for case in envelope_cases(cfg.envelope.mode) {
        let case_cfg = cfg.envelope_case(case);
        let src = prepare_source(&case_cfg)?;
        let results: Vec<(f64, Result<ResultRow>)> = sweep
            .values
            .par_iter()
            .enumerate()
            .map(|(i, &value)| {
                let ap = sweep.afterpulse_values.as_ref().map(|v| v[i]);
                let point = (|| -> Result<ResultRow> {
                    let point_cfg = apply_sweep_point(&case_cfg, axis, value, ap)?;
                    let table = evaluate_point(&point_cfg, &src)?;
                    row_from_table(&table, value, case.label())
                })();
                (value, point)
            })
            .collect();
        for (value, res) in results {
            match res {
                Ok(row) => table.rows.push(row),
                Err(e) => table.failures.push(SweepFailure {
                    sweep_value: value,
                    envelope: case.label(),
                    message: e.to_string(),
                }),
            }
        }
    }
    Ok(table)
}
