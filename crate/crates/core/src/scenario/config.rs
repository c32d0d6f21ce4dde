//! Scenario configuration: a single TOML file with explicit units in the
//! key names. Unit errors are the dominant user hazard, so every physical
//! key carries its unit suffix.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BALANCED_T: f64 = std::f64::consts::FRAC_1_SQRT_2;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub source: SourceConfig,
    pub grids: GridConfig,
    #[serde(default)]
    pub engine: EngineConfig,
    pub links: LinksConfig,
    pub receiver_a: ReceiverConfig,
    pub receiver_b: ReceiverConfig,
    pub detectors: DetectorsConfig,
    pub binning: BinningConfig,
    #[serde(default)]
    pub wdm: Option<WdmConfig>,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub envelope: EnvelopeConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    /// "type0" or "type2".
    pub process: String,
    /// Mean number of generated photon pairs per (double) pulse.
    pub mu: f64,
    #[serde(default = "default_pump_fwhm_ps")]
    pub pump_fwhm_ps: f64,
    #[serde(default = "default_balanced")]
    pub pump_splitter_t: f64,
    #[serde(default)]
    pub pump_phase_rad: f64,
    /// "gaussian", "sinc" or "fitted".
    pub pm_model: String,
    #[serde(default)]
    pub pm_gaussian_width_ghz: Option<f64>,
    #[serde(default)]
    pub crystal_length_mm: Option<f64>,
    #[serde(default)]
    pub dk_prime_ps_per_mm: Option<f64>,
    #[serde(default)]
    pub dk0_per_m: f64,
    #[serde(default)]
    pub imperfection_linear_per_m2: f64,
    #[serde(default)]
    pub imperfection_quadratic_per_m3: f64,
    /// Measured |Phi|^2 spectrum CSV for pm_model = "fitted".
    #[serde(default)]
    pub spectrum_csv: Option<PathBuf>,
    /// Cosine edge taper fraction applied to the phase-matching samples.
    #[serde(default)]
    pub spectral_taper_fraction: f64,
}

fn default_pump_fwhm_ps() -> f64 {
    400.0
}

fn default_balanced() -> f64 {
    BALANCED_T
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Time grid step (ps); all delays and bin edges must be multiples.
    pub time_step_ps: f64,
    /// Number of time/frequency grid points (the grids are DFT-dual).
    pub time_points: usize,
    /// Start of the time window (ps).
    pub time_start_ps: f64,
    #[serde(default = "default_modes_max")]
    pub schmidt_modes_max: usize,
    #[serde(default = "default_schmidt_tol")]
    pub schmidt_rel_tol: f64,
}

fn default_modes_max() -> usize {
    128
}

fn default_schmidt_tol() -> f64 {
    1e-6
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    /// "determinant" (default) or "poisson".
    #[serde(default)]
    pub kind: EngineKind,
    #[serde(default = "default_threshold")]
    pub oscillation_threshold: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum EngineKind {
    #[default]
    Determinant,
    Poisson,
}

fn default_threshold() -> f64 {
    crate::optics::poisson::DEFAULT_OSCILLATION_THRESHOLD
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinksConfig {
    pub length_a_km: f64,
    pub length_b_km: f64,
    #[serde(default = "default_loss")]
    pub loss_db_per_km: f64,
    #[serde(default = "default_beta2")]
    pub beta2_ps2_per_km: f64,
}

fn default_loss() -> f64 {
    0.2
}

fn default_beta2() -> f64 {
    -21.7
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReceiverConfig {
    #[serde(default = "default_balanced")]
    pub splitter_t: f64,
    #[serde(default)]
    pub phase_rad: f64,
    /// Long-short arm delay (ps); must match the pump interferometer.
    pub delay_ps: f64,
    #[serde(default = "default_unity")]
    pub eta_d0_short: f64,
    #[serde(default = "default_unity")]
    pub eta_d0_long: f64,
    #[serde(default = "default_unity")]
    pub eta_d1_short: f64,
    #[serde(default = "default_unity")]
    pub eta_d1_long: f64,
    #[serde(default = "default_unity")]
    pub mode_match: f64,
}

fn default_unity() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorsConfig {
    pub a0: DetectorConfig,
    pub a1: DetectorConfig,
    pub b0: DetectorConfig,
    pub b1: DetectorConfig,
}

impl DetectorsConfig {
    pub fn as_array(&self) -> [&DetectorConfig; 4] {
        [&self.a0, &self.a1, &self.b0, &self.b1]
    }

    pub fn as_array_mut(&mut self) -> [&mut DetectorConfig; 4] {
        [&mut self.a0, &mut self.a1, &mut self.b0, &mut self.b1]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    /// Power detection efficiency (folded into the path transmittivities as
    /// an amplitude factor).
    #[serde(default = "default_unity")]
    pub efficiency: f64,
    #[serde(default)]
    pub dark_count_rate_hz: f64,
    #[serde(default)]
    pub afterpulse_prob: f64,
    #[serde(default)]
    pub dead_time_us: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinningConfig {
    pub rep_rate_mhz: f64,
    pub bin_width_ps: f64,
    #[serde(default)]
    pub interleaved: bool,
    #[serde(default = "default_crosstalk")]
    pub crosstalk_window: usize,
}

fn default_crosstalk() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WdmConfig {
    pub channel_a_csv: PathBuf,
    pub channel_b_csv: PathBuf,
    #[serde(default = "default_order")]
    pub order_n: usize,
    /// Additional channel-A center-frequency offset (GHz); usually driven
    /// by the offset sweep axis.
    #[serde(default)]
    pub offset_ghz: f64,
}

fn default_order() -> usize {
    crate::wdm::DEFAULT_ORDER
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// One of: mu, dead_time_us, phase_a_rad, offset_ghz, length_plus_km,
    /// rep_rate_mhz.
    pub axis: String,
    pub values: Vec<f64>,
    /// Optional afterpulse probabilities paired 1:1 with dead-time sweep
    /// values (per-setting detector tomography).
    #[serde(default)]
    pub afterpulse_values: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EnvelopeConfig {
    #[serde(default)]
    pub mode: EnvelopeMode,
    #[serde(default)]
    pub uncertainty: Option<UncertaintyConfig>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum EnvelopeMode {
    #[default]
    None,
    Best,
    Worst,
    Both,
}

/// Uncertainty ranges [low, high]. Best case: highest transmissions and
/// mode matches, lowest dead times, afterpulse probabilities and dark
/// rates; worst case the opposite.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct UncertaintyConfig {
    #[serde(default)]
    pub transmission_scale: Option<[f64; 2]>,
    #[serde(default)]
    pub mode_match: Option<[f64; 2]>,
    #[serde(default)]
    pub dead_time_us: Option<[f64; 2]>,
    #[serde(default)]
    pub afterpulse_prob: Option<[f64; 2]>,
    #[serde(default)]
    pub dark_rate_scale: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvelopeCase {
    Nominal,
    Best,
    Worst,
}

impl EnvelopeCase {
    pub fn label(&self) -> &'static str {
        match self {
            EnvelopeCase::Nominal => "nominal",
            EnvelopeCase::Best => "best",
            EnvelopeCase::Worst => "worst",
        }
    }
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<ScenarioConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(|p| p.to_path_buf()).unwrap_or_default();
        let mut cfg: ScenarioConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        // resolve file paths relative to the config location
        if let Some(wdm) = cfg.wdm.as_mut() {
            if wdm.channel_a_csv.is_relative() {
                wdm.channel_a_csv = base.join(&wdm.channel_a_csv);
            }
            if wdm.channel_b_csv.is_relative() {
                wdm.channel_b_csv = base.join(&wdm.channel_b_csv);
            }
        }
        if let Some(csv) = cfg.source.spectrum_csv.as_mut() {
            if csv.is_relative() {
                *csv = base.join(&*csv);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_str_no_files(text: &str) -> Result<ScenarioConfig> {
        let cfg: ScenarioConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn process_type(&self) -> Result<crate::covariance::ProcessType> {
        match self.source.process.as_str() {
            "type0" => Ok(crate::covariance::ProcessType::Type0),
            "type2" => Ok(crate::covariance::ProcessType::TypeII),
            other => Err(Error::Config(format!(
                "unknown process '{other}' (expected 'type0' or 'type2')"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.process_type()?;
        if self.source.mu <= 0.0 {
            return Err(Error::Config("source.mu must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.source.pump_splitter_t) {
            return Err(Error::Config("pump splitter transmittivity must be in [0,1]".into()));
        }
        match self.source.pm_model.as_str() {
            "gaussian" => {
                if self.source.pm_gaussian_width_ghz.unwrap_or(0.0) <= 0.0 {
                    return Err(Error::Config(
                        "pm_model = gaussian needs pm_gaussian_width_ghz > 0".into(),
                    ));
                }
            }
            "sinc" => {
                if self.source.crystal_length_mm.unwrap_or(0.0) <= 0.0
                    || self.source.dk_prime_ps_per_mm.unwrap_or(0.0) == 0.0
                {
                    return Err(Error::Config(
                        "pm_model = sinc needs crystal_length_mm > 0 and dk_prime_ps_per_mm != 0"
                            .into(),
                    ));
                }
            }
            "fitted" => {
                if self.source.spectrum_csv.is_none()
                    || self.source.crystal_length_mm.unwrap_or(0.0) <= 0.0
                    || self.source.dk_prime_ps_per_mm.unwrap_or(0.0) == 0.0
                {
                    return Err(Error::Config(
                        "pm_model = fitted needs spectrum_csv, crystal_length_mm and dk_prime_ps_per_mm".into(),
                    ));
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown pm_model '{other}' (gaussian | sinc | fitted)"
                )))
            }
        }
        if self.grids.time_points < 16 || self.grids.time_points > 16384 {
            return Err(Error::Config("grids.time_points must be in [16, 16384]".into()));
        }
        if self.grids.time_step_ps <= 0.0 {
            return Err(Error::Config("grids.time_step_ps must be positive".into()));
        }
        for (name, rx) in [("receiver_a", &self.receiver_a), ("receiver_b", &self.receiver_b)] {
            if rx.delay_ps <= 0.0 {
                return Err(Error::Config(format!("{name}.delay_ps must be positive")));
            }
            for (k, v) in [
                ("splitter_t", rx.splitter_t),
                ("eta_d0_short", rx.eta_d0_short),
                ("eta_d0_long", rx.eta_d0_long),
                ("eta_d1_short", rx.eta_d1_short),
                ("eta_d1_long", rx.eta_d1_long),
                ("mode_match", rx.mode_match),
            ] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Config(format!("{name}.{k} must be in [0, 1]")));
                }
            }
        }
        if (self.receiver_a.delay_ps - self.receiver_b.delay_ps).abs()
            > 1e-9 * self.receiver_a.delay_ps.abs()
        {
            return Err(Error::Config(
                "receiver delays must match (matched interferometers; mismatch is modeled by mode_match)"
                    .into(),
            ));
        }
        for det in self.detectors.as_array() {
            if !(0.0..=1.0).contains(&det.efficiency) {
                return Err(Error::Config("detector efficiency must be in [0, 1]".into()));
            }
            if !(0.0..1.0).contains(&det.afterpulse_prob) {
                return Err(Error::Config("afterpulse probability must be in [0, 1)".into()));
            }
            if det.dark_count_rate_hz < 0.0 || det.dead_time_us < 0.0 {
                return Err(Error::Config("detector rates must be nonnegative".into()));
            }
        }
        if self.binning.rep_rate_mhz <= 0.0 || self.binning.bin_width_ps <= 0.0 {
            return Err(Error::Config("binning rates and widths must be positive".into()));
        }
        if self.process_type()? == crate::covariance::ProcessType::Type0 && self.wdm.is_none() {
            return Err(Error::Config("type0 sources need a [wdm] section".into()));
        }
        if let Some(sweep) = &self.sweep {
            parse_axis(&sweep.axis)?;
            if sweep.values.is_empty() {
                return Err(Error::Config("sweep.values must not be empty".into()));
            }
            if let Some(ap) = &sweep.afterpulse_values {
                if ap.len() != sweep.values.len() {
                    return Err(Error::Config(
                        "sweep.afterpulse_values must pair 1:1 with sweep.values".into(),
                    ));
                }
            }
        }
        if self.envelope.mode != EnvelopeMode::None && self.envelope.uncertainty.is_none() {
            return Err(Error::Config(
                "envelope.mode requires an [envelope.uncertainty] section".into(),
            ));
        }
        Ok(())
    }

    /// Substitute the best/worst-case parameter estimates.
    pub fn envelope_case(&self, case: EnvelopeCase) -> ScenarioConfig {
        let mut cfg = self.clone();
        if case == EnvelopeCase::Nominal {
            return cfg;
        }
        let Some(unc) = &self.envelope.uncertainty else {
            return cfg;
        };
        let pick = |range: &Option<[f64; 2]>, hi_is_best: bool, nominal: f64| -> f64 {
            match range {
                None => nominal,
                Some([lo, hi]) => match (case, hi_is_best) {
                    (EnvelopeCase::Best, true) | (EnvelopeCase::Worst, false) => *hi,
                    _ => *lo,
                },
            }
        };
        let t_scale = pick(&unc.transmission_scale, true, 1.0);
        for rx in [&mut cfg.receiver_a, &mut cfg.receiver_b] {
            rx.eta_d0_short = (rx.eta_d0_short * t_scale).min(1.0);
            rx.eta_d0_long = (rx.eta_d0_long * t_scale).min(1.0);
            rx.eta_d1_short = (rx.eta_d1_short * t_scale).min(1.0);
            rx.eta_d1_long = (rx.eta_d1_long * t_scale).min(1.0);
            if let Some(mm) = unc.mode_match {
                rx.mode_match = if case == EnvelopeCase::Best { mm[1] } else { mm[0] };
            }
        }
        let dark_scale = pick(&unc.dark_rate_scale, false, 1.0);
        for det in cfg.detectors.as_array_mut() {
            if let Some(dt) = unc.dead_time_us {
                det.dead_time_us = if case == EnvelopeCase::Best { dt[0] } else { dt[1] };
            }
            if let Some(ap) = unc.afterpulse_prob {
                det.afterpulse_prob = if case == EnvelopeCase::Best { ap[0] } else { ap[1] };
            }
            det.dark_count_rate_hz *= dark_scale;
        }
        cfg
    }
}

/// Sweep axes supported by run_sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Mu,
    DeadTimeUs,
    PhaseARad,
    OffsetGhz,
    LengthPlusKm,
    RepRateMhz,
}

pub fn parse_axis(name: &str) -> Result<SweepAxis> {
    match name {
        "mu" => Ok(SweepAxis::Mu),
        "dead_time_us" => Ok(SweepAxis::DeadTimeUs),
        "phase_a_rad" => Ok(SweepAxis::PhaseARad),
        "offset_ghz" => Ok(SweepAxis::OffsetGhz),
        "length_plus_km" => Ok(SweepAxis::LengthPlusKm),
        "rep_rate_mhz" => Ok(SweepAxis::RepRateMhz),
        other => Err(Error::Config(format!(
            "unknown sweep axis '{other}' (mu | dead_time_us | phase_a_rad | offset_ghz | length_plus_km | rep_rate_mhz)"
        ))),
    }
}

/// Apply one sweep point to a copy of the configuration.
pub fn apply_sweep_point(
    cfg: &ScenarioConfig,
    axis: SweepAxis,
    value: f64,
    afterpulse: Option<f64>,
) -> Result<ScenarioConfig> {
    let mut out = cfg.clone();
    match axis {
        SweepAxis::Mu => out.source.mu = value,
        SweepAxis::DeadTimeUs => {
            for det in out.detectors.as_array_mut() {
                det.dead_time_us = value;
                if let Some(ap) = afterpulse {
                    det.afterpulse_prob = ap;
                }
            }
        }
        SweepAxis::PhaseARad => out.receiver_a.phase_rad = value,
        SweepAxis::OffsetGhz => {
            let Some(wdm) = out.wdm.as_mut() else {
                return Err(Error::Config("offset sweep needs a [wdm] section".into()));
            };
            wdm.offset_ghz = value;
        }
        SweepAxis::LengthPlusKm => {
            out.links.length_a_km = value / 2.0;
            out.links.length_b_km = value / 2.0;
        }
        SweepAxis::RepRateMhz => out.binning.rep_rate_mhz = value,
    }
    out.validate()?;
    Ok(out)
}
