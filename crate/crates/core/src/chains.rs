//! Conversion chain topologies: IQ mixing with an output amplifier and
//! bandpass, and double frequency conversion from an RF DAC through two LO
//! stages with fixed filters.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::mixers::{iq_mix, rf_mix, CompensationParams, IqMixerModel, LoHarmonic, RfMixerModel};
use crate::signal::{
    bin_frequency, fft_forward, fft_inverse, iq_modulate, power_spectrum,
    EnvelopePair, Peak, SampledWaveform, Spectrum, ToneSpec, Window,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    Lowpass,
    Bandpass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterFamily {
    Brickwall,
    #[default]
    Butterworth,
}

fn default_order() -> u32 {
    7
}

fn default_floor() -> Option<f64> {
    Some(100.0)
}

/// Zero-phase analog filter applied in the frequency domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSpec {
    pub kind: FilterKind,
    /// Cutoff for a lowpass, `[low, high]` band edges for a bandpass.
    pub edges_hz: Vec<f64>,
    #[serde(default = "default_order")]
    pub order: u32,
    #[serde(default)]
    pub family: FilterFamily,
    /// Maximum stopband attenuation in dB; `None` lets the response fall
    /// without limit (and makes the brickwall stopband exactly zero).
    #[serde(default = "default_floor")]
    pub stopband_floor_db: Option<f64>,
}

impl FilterSpec {
    pub fn lowpass(cutoff: f64) -> Self {
        Self {
            kind: FilterKind::Lowpass,
            edges_hz: vec![cutoff],
            order: default_order(),
            family: FilterFamily::Butterworth,
            stopband_floor_db: default_floor(),
        }
    }

    pub fn bandpass(low: f64, high: f64) -> Self {
        Self { kind: FilterKind::Bandpass, edges_hz: vec![low, high], ..Self::lowpass(0.0) }
    }

    pub fn brickwall(mut self) -> Self {
        self.family = FilterFamily::Brickwall;
        self
    }

    pub fn with_order(mut self, order: u32) -> Self {
        self.order = order;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let want = match self.kind {
            FilterKind::Lowpass => 1,
            FilterKind::Bandpass => 2,
        };
        if self.edges_hz.len() != want {
            return param(format!("{:?} filter needs {want} edge(s)", self.kind));
        }
        if self.edges_hz.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
            return param("filter edges must be positive");
        }
        if want == 2 && self.edges_hz[1] <= self.edges_hz[0] {
            return param("band edges must be increasing");
        }
        if self.order < 1 {
            return param("filter order must be at least 1");
        }
        if matches!(self.stopband_floor_db, Some(f) if !(f > 0.0)) {
            return param("stopband floor must be positive");
        }
        Ok(())
    }

    /// Pass-band as `(low, high)`; a lowpass starts at zero.
    pub fn passband(&self) -> (f64, f64) {
        match self.kind {
            FilterKind::Lowpass => (0.0, self.edges_hz[0]),
            FilterKind::Bandpass => (self.edges_hz[0], self.edges_hz[1]),
        }
    }

    pub fn passes(&self, f: f64) -> bool {
        let (lo, hi) = self.passband();
        f >= lo && f <= hi
    }

    /// Magnitude response at frequency `f` (sign ignored).
    pub fn response(&self, f: f64) -> f64 {
        let f = f.abs();
        let floor = self.stopband_floor_db.map_or(0.0, |d| 10f64.powf(-d / 20.0));
        let h = match self.family {
            FilterFamily::Brickwall => {
                if self.passes(f) {
                    1.0
                } else {
                    0.0
                }
            }
            FilterFamily::Butterworth => {
                let x = match self.kind {
                    FilterKind::Lowpass => f / self.edges_hz[0],
                    FilterKind::Bandpass => {
                        let (a, b) = (self.edges_hz[0], self.edges_hz[1]);
                        if f == 0.0 {
                            f64::INFINITY
                        } else {
                            (f * f - a * b) / (f * (b - a))
                        }
                    }
                };
                1.0 / (1.0 + x.abs().powi(2 * self.order as i32)).sqrt()
            }
        };
        h.max(floor)
    }

    pub fn attenuation_db(&self, f: f64) -> f64 {
        -20.0 * self.response(f).log10()
    }

    pub fn apply(&self, w: &SampledWaveform) -> Result<SampledWaveform> {
        self.validate()?;
        let n = w.len();
        let fs = w.sample_rate();
        let mut spec = fft_forward(w.samples());
        for (k, x) in spec.iter_mut().enumerate() {
            *x *= self.response(bin_frequency(k, n, fs));
        }
        Ok(w.with_samples(fft_inverse(spec).into_iter().map(|c| c.re).collect()))
    }
}

fn default_images() -> usize {
    2
}

fn default_true() -> bool {
    true
}

/// RF DAC: a digital waveform at `sample_rate_hz` reconstructed onto the
/// analog simulation grid at `analog_rate_hz`, with sampling images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DacModel {
    pub sample_rate_hz: f64,
    #[serde(default = "default_images")]
    pub num_alias_images: usize,
    #[serde(default = "default_true")]
    pub sinc_rolloff: bool,
    pub analog_rate_hz: f64,
}

impl Default for DacModel {
    fn default() -> Self {
        Self { sample_rate_hz: 6e9, num_alias_images: 2, sinc_rolloff: true, analog_rate_hz: 80e9 }
    }
}

impl DacModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate_hz > 0.0) || !(self.analog_rate_hz > 0.0) {
            return param("DAC and analog rates must be positive");
        }
        let top = (self.num_alias_images as f64 + 0.5) * self.sample_rate_hz;
        if top >= self.analog_rate_hz / 2.0 {
            return param(format!(
                "analog rate {} Sa/s cannot represent alias images up to {top} Hz",
                self.analog_rate_hz
            ));
        }
        Ok(())
    }
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Reconstructs `digital` on the analog grid. Each component at `f` appears
/// at `f` and at `k f_S +- f` for `k = 1..=num_alias_images`, optionally
/// weighted by `sinc(f_out / f_S)`.
pub fn rfdac_output(digital: &SampledWaveform, dac: &DacModel) -> Result<SampledWaveform> {
    dac.validate()?;
    if (digital.sample_rate() - dac.sample_rate_hz).abs() > 1e-6 * dac.sample_rate_hz {
        return param("digital waveform is not at the DAC sample rate");
    }
    let n = digital.len();
    let ratio = dac.analog_rate_hz / dac.sample_rate_hz;
    let m_exact = n as f64 * ratio;
    let m = m_exact.round() as usize;
    if (m_exact - m as f64).abs() > 1e-6 {
        return param(format!(
            "{n} DAC samples do not map onto an integer number of analog samples"
        ));
    }
    let spec = fft_forward(digital.samples());
    let scale = m as f64 / n as f64;
    let df = dac.sample_rate_hz / n as f64;
    let weight = |bin: usize| {
        if dac.sinc_rolloff {
            sinc(bin as f64 * df / dac.sample_rate_hz)
        } else {
            1.0
        }
    };
    let mut out = vec![Complex64::new(0.0, 0.0); m];
    let mut put = |bin: usize, x: Complex64| {
        out[bin] += x;
        if bin != 0 {
            out[m - bin] += x.conj();
        }
    };
    put(0, spec[0] * scale);
    for (k, &x) in spec.iter().enumerate().take(n.div_ceil(2)).skip(1) {
        let x = x * scale;
        put(k, x * weight(k));
        for j in 1..=dac.num_alias_images {
            let up = j * n + k;
            let down = j * n - k;
            put(up, x * weight(up));
            put(down, x.conj() * weight(down));
        }
    }
    // The Nyquist bin is its own mirror: half of it goes to each of the
    // two analog bins at fs/2, and likewise for its images.
    if n % 2 == 0 {
        let x = spec[n / 2] * (0.5 * scale);
        for j in 0..=dac.num_alias_images {
            let bin = j * n + n / 2;
            put(bin, x * weight(bin));
        }
    }
    let samples = fft_inverse(out).into_iter().map(|c| c.re).collect();
    SampledWaveform::new(samples, dac.analog_rate_hz, digital.t0())
}

/// Analyzer and grid settings shared by chain runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSettings {
    pub sample_rate_hz: f64,
    pub duration_s: f64,
    #[serde(default)]
    pub window: Window,
    pub rbw_hz: f64,
    /// Peaks are reported down to this level relative to the strongest one.
    #[serde(default = "default_peak_floor")]
    pub peak_floor_dbc: f64,
}

fn default_peak_floor() -> f64 {
    -100.0
}

impl SimSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate_hz > 0.0 && self.duration_s > 0.0 && self.rbw_hz > 0.0) {
            return param("simulation rate, duration and rbw must be positive");
        }
        if self.rbw_hz * self.duration_s < 1.0 - 1e-9 {
            return param("rbw finer than 1/duration");
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        (self.sample_rate_hz * self.duration_s).round() as usize
    }
}

/// Nominal IF amplitude that yields a 0 dBm output from the default IQ chain.
pub const IQ_DEFAULT_IF_AMPLITUDE: f64 = 0.028_183_829_312_644_54;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IqChainConfig {
    pub mixer: IqMixerModel,
    #[serde(default)]
    pub comp: CompensationParams,
    pub lo: ToneSpec,
    pub amp_gain_db: f64,
    pub output_filter: FilterSpec,
    pub sim: SimSettings,
}

impl Default for IqChainConfig {
    fn default() -> Self {
        Self {
            mixer: IqMixerModel::ideal(),
            comp: CompensationParams::identity(),
            lo: ToneSpec::lo(5.9e9),
            amp_gain_db: 21.0,
            output_filter: FilterSpec::bandpass(4e9, 8e9),
            sim: SimSettings {
                sample_rate_hz: 40e9,
                duration_s: 1e-6,
                window: Window::Flattop,
                rbw_hz: 1e6,
                peak_floor_dbc: -100.0,
            },
        }
    }
}

impl IqChainConfig {
    pub fn validate(&self) -> Result<()> {
        self.mixer.validate()?;
        self.comp.validate()?;
        self.output_filter.validate()?;
        self.sim.validate()
    }

    /// Constant-envelope drive on the simulation grid.
    pub fn cw_envelope(&self, amplitude: f64) -> Result<EnvelopePair> {
        EnvelopePair::constant(amplitude, 0.0, self.sim.duration_s, self.sim.sample_rate_hz)
    }

    /// Power gain from IF amplitude to output sideband amplitude, linear.
    pub fn amplitude_gain(&self) -> f64 {
        10f64.powf((self.amp_gain_db + self.mixer.path_i.conversion_gain_db) / 20.0)
    }
}

/// Spectrum of a chain run plus the labelled peak table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRun {
    pub spectrum: Spectrum,
    pub peaks: Vec<Peak>,
    pub fundamental_hz: f64,
}

impl ChainRun {
    pub fn fundamental(&self) -> Peak {
        self.spectrum.peak_near(self.fundamental_hz, 1)
    }

    /// Level of a frequency relative to the fundamental, dBc.
    pub fn dbc_at(&self, f: f64) -> f64 {
        self.spectrum.power_at(f) - self.fundamental().power_dbm
    }
}

/// Time-domain output of the IQ chain after amplifier and filter.
pub fn iq_chain_waveform(cfg: &IqChainConfig, env: &EnvelopePair, f_if: f64) -> Result<SampledWaveform> {
    cfg.validate()?;
    if (env.sample_rate() - cfg.sim.sample_rate_hz).abs() > 1e-6 * cfg.sim.sample_rate_hz {
        return param("envelope is not sampled at the chain simulation rate");
    }
    let f_sig = cfg.lo.frequency + f_if;
    if !cfg.output_filter.passes(f_sig) {
        return Err(Error::Configuration(format!(
            "signal at {f_sig} Hz falls outside the output filter band {:?}",
            cfg.output_filter.passband()
        )));
    }
    let (v_i, v_q) = iq_modulate(env, f_if, 0.0)?;
    let mixed = iq_mix(&cfg.mixer, &cfg.comp, &v_i, &v_q, &cfg.lo)?;
    let amplified = mixed.scale(10f64.powf(cfg.amp_gain_db / 20.0));
    cfg.output_filter.apply(&amplified)
}

/// IQ modulation, imperfect IQ mixer, amplifier, output bandpass and spectrum.
pub fn run_iq_chain(cfg: &IqChainConfig, env: &EnvelopePair, f_if: f64) -> Result<ChainRun> {
    let out = iq_chain_waveform(cfg, env, f_if)?;
    let spectrum = power_spectrum(&out, cfg.sim.window, cfg.sim.rbw_hz)?;
    let fundamental_hz = cfg.lo.frequency + f_if;
    let bases = [
        Basis { name: "LO", freq: cfg.lo.frequency, max_order: 3 },
        Basis { name: "IF", freq: f_if, max_order: 5 },
    ];
    let peaks = labelled_peaks(&spectrum, fundamental_hz, cfg.sim.peak_floor_dbc, &bases, &[]);
    Ok(ChainRun { spectrum, peaks, fundamental_hz })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Crosstalk {
    pub offset_hz: f64,
    pub level_dbc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoubleChainConfig {
    pub dac: DacModel,
    pub if1_filter: FilterSpec,
    pub lo1: ToneSpec,
    pub stage1_filter: FilterSpec,
    /// Phase and power of the second LO; its frequency is set by the plan.
    pub lo2: ToneSpec,
    pub output_filter: FilterSpec,
    pub ref_crosstalk: Option<Crosstalk>,
    pub mixer1: RfMixerModel,
    pub mixer2: RfMixerModel,
    pub output_gain_db: f64,
    pub if1_band_hz: [f64; 2],
    pub lo2_band_hz: [f64; 2],
    /// Preferred first IF when the plan leaves a choice.
    pub if1_preferred_hz: f64,
    pub sim: SimSettings,
}

/// Digital CW amplitude used with the default double chain.
pub const DOUBLE_DEFAULT_DAC_AMPLITUDE: f64 = 0.5;

impl Default for DoubleChainConfig {
    fn default() -> Self {
        let c2 = 2.0 * 10f64.powf(-50.0 / 20.0) / DOUBLE_DEFAULT_DAC_AMPLITUDE;
        Self {
            dac: DacModel::default(),
            if1_filter: FilterSpec::lowpass(2.5e9),
            lo1: ToneSpec::lo(10e9),
            stage1_filter: FilterSpec::bandpass(11.5e9, 12.5e9),
            lo2: ToneSpec::lo(18e9),
            output_filter: FilterSpec::lowpass(8.5e9),
            ref_crosstalk: Some(Crosstalk { offset_hz: 100e6, level_dbc: -72.0 }),
            mixer1: RfMixerModel {
                conversion_gain_db: 0.0,
                if_poly: vec![1.0, c2],
                lo_harmonics: vec![LoHarmonic { order: 2, level_dbc: -25.0 }],
                ac_coupled_products: false,
            },
            mixer2: RfMixerModel::ideal(),
            output_gain_db: 9.93,
            if1_band_hz: [1.5e9, 2.5e9],
            lo2_band_hz: [13e9, 20e9],
            if1_preferred_hz: 2e9,
            sim: SimSettings {
                sample_rate_hz: 80e9,
                duration_s: 1e-6,
                window: Window::Flattop,
                rbw_hz: 1e6,
                peak_floor_dbc: -100.0,
            },
        }
    }
}

impl DoubleChainConfig {
    pub fn validate(&self) -> Result<()> {
        self.dac.validate()?;
        for f in [&self.if1_filter, &self.stage1_filter, &self.output_filter] {
            f.validate()?;
        }
        self.mixer1.validate()?;
        self.mixer2.validate()?;
        self.sim.validate()?;
        if (self.dac.analog_rate_hz - self.sim.sample_rate_hz).abs() > 1e-6 * self.sim.sample_rate_hz {
            return Err(Error::Configuration(
                "DAC analog rate must equal the chain simulation rate".into(),
            ));
        }
        let [a, b] = self.if1_band_hz;
        let [c, d] = self.lo2_band_hz;
        if !(a > 0.0 && b >= a && c > 0.0 && d >= c) {
            return Err(Error::Configuration("IF1 and LO2 bands must be ordered".into()));
        }
        if b >= self.dac.sample_rate_hz / 2.0 {
            return Err(Error::Configuration("IF1 band exceeds the DAC Nyquist frequency".into()));
        }
        let (s_lo, s_hi) = self.stage1_filter.passband();
        if self.lo1.frequency + a < s_lo - 1.0 || self.lo1.frequency + b > s_hi + 1.0 {
            return Err(Error::Configuration(
                "stage-1 band LO1 + IF1 is not inside the stage-1 filter pass-band".into(),
            ));
        }
        Ok(())
    }

    pub fn cw_envelope(&self, amplitude: f64) -> Result<EnvelopePair> {
        EnvelopePair::constant(amplitude, 0.0, self.sim.duration_s, self.dac.sample_rate_hz)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyPlan {
    pub target_hz: f64,
    pub f_if1_hz: f64,
    pub f_lo2_hz: f64,
    /// Unwanted sum product of the second stage, `f_LO2 + f_LO1 + f_IF1`.
    pub image_hz: f64,
    /// The lower-sideband second conversion mirrors the spectrum, so the
    /// digital IF must be generated with inverted sign.
    pub if_sign_inverted: bool,
}

/// Chooses `(f_IF1, f_LO2)` with `target = f_LO2 - f_LO1 - f_IF1`, keeping both
/// inside their bands and `f_IF1` as close as possible to the preferred value.
pub fn plan_frequencies(target: f64, cfg: &DoubleChainConfig) -> Result<FrequencyPlan> {
    let [if_lo, if_hi] = cfg.if1_band_hz;
    let [lo2_lo, lo2_hi] = cfg.lo2_band_hz;
    let f1 = cfg.lo1.frequency;
    let lo = if_lo.max(lo2_lo - f1 - target);
    let hi = if_hi.min(lo2_hi - f1 - target);
    let tol = 1e-6;
    if !(target > 0.0) || lo > hi + tol {
        return Err(Error::Planning(format!(
            "no IF1 in [{if_lo}, {if_hi}] Hz reaches {target} Hz with LO2 in [{lo2_lo}, {lo2_hi}] Hz"
        )));
    }
    let f_if1 = cfg.if1_preferred_hz.clamp(lo, hi.max(lo));
    let f_lo2 = target + f1 + f_if1;
    Ok(FrequencyPlan {
        target_hz: target,
        f_if1_hz: f_if1,
        f_lo2_hz: f_lo2,
        image_hz: f_lo2 + f1 + f_if1,
        if_sign_inverted: true,
    })
}

/// Time-domain output of the double conversion chain and the plan used.
pub fn double_chain_waveform(
    cfg: &DoubleChainConfig,
    env: &EnvelopePair,
    target: f64,
) -> Result<(SampledWaveform, FrequencyPlan)> {
    cfg.validate()?;
    let plan = plan_frequencies(target, cfg).map_err(|e| Error::Configuration(e.to_string()))?;
    if !cfg.output_filter.passes(target) {
        return Err(Error::Configuration(format!(
            "target {target} Hz is outside the output filter band"
        )));
    }
    if (env.sample_rate() - cfg.dac.sample_rate_hz).abs() > 1e-6 * cfg.dac.sample_rate_hz {
        return param("envelope is not sampled at the DAC rate");
    }
    let (digital, _) = iq_modulate(env, -plan.f_if1_hz, 0.0)?;
    let analog = rfdac_output(&digital, &cfg.dac)?;
    let if1 = cfg.if1_filter.apply(&analog)?;
    let stage1 = cfg.stage1_filter.apply(&rf_mix(&cfg.mixer1, &if1, &cfg.lo1)?)?;
    let lo2 = ToneSpec { frequency: plan.f_lo2_hz, ..cfg.lo2 };
    let mixed2 = rf_mix(&cfg.mixer2, &stage1, &lo2)?;
    let out = cfg.output_filter.apply(&mixed2)?.scale(10f64.powf(cfg.output_gain_db / 20.0));
    Ok((out, plan))
}

/// Runs the double conversion chain for `target` and adds the reference
/// crosstalk tones at `target +- offset`, scaled to the measured fundamental.
pub fn run_double_chain(cfg: &DoubleChainConfig, env: &EnvelopePair, target: f64) -> Result<ChainRun> {
    let (mut out, plan) = double_chain_waveform(cfg, env, target)?;
    let window = cfg.sim.window;
    let mut spectrum = power_spectrum(&out, window, cfg.sim.rbw_hz)?;
    let mut extra = Vec::new();
    if let Some(x) = cfg.ref_crosstalk {
        let p_fund = spectrum.power_at(target);
        let amp = crate::signal::dbm_to_amplitude(p_fund + x.level_dbc);
        let spur = SampledWaveform::from_fn(out.len(), out.sample_rate(), out.t0(), |t| {
            let w = 2.0 * std::f64::consts::PI;
            amp * ((w * (target - x.offset_hz) * t).cos() + (w * (target + x.offset_hz) * t).cos())
        })?;
        out = out.add(&spur)?;
        spectrum = power_spectrum(&out, window, cfg.sim.rbw_hz)?;
        extra.push(("crosstalk".to_string(), target - x.offset_hz));
        extra.push(("crosstalk".to_string(), target + x.offset_hz));
    }
    let bases = [
        Basis { name: "LO1", freq: cfg.lo1.frequency, max_order: 2 },
        Basis { name: "LO2", freq: plan.f_lo2_hz, max_order: 2 },
        Basis { name: "FS", freq: cfg.dac.sample_rate_hz, max_order: cfg.dac.num_alias_images as i32 },
        Basis { name: "IF1", freq: plan.f_if1_hz, max_order: 3 },
    ];
    let peaks = labelled_peaks(&spectrum, target, cfg.sim.peak_floor_dbc, &bases, &extra);
    Ok(ChainRun { spectrum, peaks, fundamental_hz: target })
}

/// A chain together with its drive, as used by sweeps and the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "topology", rename_all = "snake_case", deny_unknown_fields)]
pub enum Chain {
    Iq { config: IqChainConfig, f_if_hz: f64, drive_amplitude: f64 },
    Double { config: DoubleChainConfig, target_hz: f64, drive_amplitude: f64 },
}

impl Chain {
    pub fn drive_amplitude(&self) -> f64 {
        match self {
            Chain::Iq { drive_amplitude, .. } | Chain::Double { drive_amplitude, .. } => *drive_amplitude,
        }
    }

    pub fn fundamental_hz(&self) -> f64 {
        match self {
            Chain::Iq { config, f_if_hz, .. } => config.lo.frequency + f_if_hz,
            Chain::Double { target_hz, .. } => *target_hz,
        }
    }

    pub fn peak_floor_dbc(&self) -> f64 {
        match self {
            Chain::Iq { config, .. } => config.sim.peak_floor_dbc,
            Chain::Double { config, .. } => config.sim.peak_floor_dbc,
        }
    }

    /// Runs the chain with a CW drive of the given amplitude.
    pub fn run_cw(&self, amplitude: f64) -> Result<ChainRun> {
        match self {
            Chain::Iq { config, f_if_hz, .. } => run_iq_chain(config, &config.cw_envelope(amplitude)?, *f_if_hz),
            Chain::Double { config, target_hz, .. } => {
                run_double_chain(config, &config.cw_envelope(amplitude)?, *target_hz)
            }
        }
    }

    pub fn run(&self) -> Result<ChainRun> {
        self.run_cw(self.drive_amplitude())
    }

    /// Adds `db` of gain after the last mixer.
    pub fn with_extra_gain(&self, db: f64) -> Self {
        let mut c = self.clone();
        match &mut c {
            Chain::Iq { config, .. } => config.amp_gain_db += db,
            Chain::Double { config, .. } => config.output_gain_db += db,
        }
        c
    }
}

/// A reference frequency for the peak explainer.
#[derive(Debug, Clone, Copy)]
pub struct Basis {
    pub name: &'static str,
    pub freq: f64,
    pub max_order: i32,
}

fn combo_label(bases: &[Basis], coeffs: &[i32]) -> String {
    let mut s = String::new();
    for (b, &c) in bases.iter().zip(coeffs) {
        if c == 0 {
            continue;
        }
        let sign = if c < 0 { "-" } else if s.is_empty() { "" } else { "+" };
        let mag = c.unsigned_abs();
        if mag == 1 {
            s.push_str(&format!("{sign}{}", b.name));
        } else {
            s.push_str(&format!("{sign}{mag}{}", b.name));
        }
    }
    if s.is_empty() {
        "DC".into()
    } else {
        s
    }
}

/// Lowest-order integer combination of the bases within `tol` of `f`.
pub fn explain_frequency(f: f64, bases: &[Basis], tol: f64) -> Option<String> {
    let mut best: Option<(i32, Vec<i32>)> = None;
    let mut coeffs = vec![0; bases.len()];
    fn walk(
        i: usize,
        acc: f64,
        f: f64,
        tol: f64,
        bases: &[Basis],
        coeffs: &mut Vec<i32>,
        best: &mut Option<(i32, Vec<i32>)>,
    ) {
        if i == bases.len() {
            if (acc.abs() - f).abs() <= tol {
                let neg_first = coeffs.iter().find(|&&c| c != 0).is_some_and(|&c| c < 0);
                let order: i32 = coeffs.iter().map(|c| c.abs()).sum();
                if best.as_ref().is_none_or(|(o, _)| order < *o) {
                    let c = if neg_first { coeffs.iter().map(|c| -c).collect() } else { coeffs.clone() };
                    *best = Some((order, c));
                }
            }
            return;
        }
        let m = bases[i].max_order;
        for c in -m..=m {
            coeffs[i] = c;
            walk(i + 1, acc + c as f64 * bases[i].freq, f, tol, bases, coeffs, best);
        }
        coeffs[i] = 0;
    }
    walk(0, 0.0, f, tol, bases, &mut coeffs, &mut best);
    best.map(|(_, c)| combo_label(bases, &c))
}

/// Peaks above `floor_dbc` relative to the strongest peak, each labelled as
/// the fundamental, a named extra tone, or a product of the bases.
pub fn labelled_peaks(
    spectrum: &Spectrum,
    fundamental: f64,
    floor_dbc: f64,
    bases: &[Basis],
    extra: &[(String, f64)],
) -> Vec<Peak> {
    let floor = spectrum.max_power() + floor_dbc;
    let tol = 1.5 * spectrum.rbw;
    spectrum
        .peaks(floor)
        .into_iter()
        .map(|mut p| {
            p.label = if (p.freq_hz - fundamental).abs() <= tol {
                "fundamental".to_string()
            } else if let Some((name, _)) = extra.iter().find(|(_, f)| (p.freq_hz - f).abs() <= tol) {
                name.clone()
            } else {
                explain_frequency(p.freq_hz, bases, tol).unwrap_or_else(|| "unexplained".into())
            };
            p
        })
        .collect()
}
