//! Waveform and spectrum primitives: pulse envelopes, digital IQ modulation,
//! ideal IQ up-conversion and a Welch-averaged spectrum analyzer.

use std::f64::consts::PI;
use std::io::{Read, Write};

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};

/// Reference impedance for every dBm value in the crate.
pub const REFERENCE_IMPEDANCE: f64 = 50.0;

/// Power floor applied before taking logarithms (-270 dBm).
const POWER_FLOOR_WATTS: f64 = 1e-30;

/// Power in dBm of a sinusoid with peak amplitude `amplitude` volts.
pub fn amplitude_to_dbm(amplitude: f64) -> f64 {
    watts_to_dbm(amplitude * amplitude / (2.0 * REFERENCE_IMPEDANCE))
}

/// Peak amplitude in volts of a sinusoid carrying `dbm`.
pub fn dbm_to_amplitude(dbm: f64) -> f64 {
    (2.0 * REFERENCE_IMPEDANCE * dbm_to_watts(dbm)).sqrt()
}

pub fn watts_to_dbm(watts: f64) -> f64 {
    10.0 * (watts.max(POWER_FLOOR_WATTS) / 1e-3).log10()
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    1e-3 * 10f64.powf(dbm / 10.0)
}

/// Uniformly sampled real waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledWaveform {
    samples: Vec<f64>,
    sample_rate: f64,
    t0: f64,
}

impl SampledWaveform {
    pub fn new(samples: Vec<f64>, sample_rate: f64, t0: f64) -> Result<Self> {
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return param(format!("sample rate must be positive, got {sample_rate}"));
        }
        if samples.is_empty() {
            return param("waveform needs at least one sample");
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return param("waveform contains non-finite samples");
        }
        Ok(Self { samples, sample_rate, t0 })
    }

    pub fn zeros(len: usize, sample_rate: f64, t0: f64) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate, t0)
    }

    /// Samples `f(t)` on `len` points starting at `t0`.
    pub fn from_fn(len: usize, sample_rate: f64, t0: f64, f: impl Fn(f64) -> f64) -> Result<Self> {
        let samples = (0..len)
            .map(|k| f(t0 + k as f64 / sample_rate))
            .collect();
        Self::new(samples, sample_rate, t0)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.sample_rate
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 / self.sample_rate
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len()).map(|k| self.time(k))
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    /// Same grid, new sample values.
    pub(crate) fn with_samples(&self, samples: Vec<f64>) -> Self {
        debug_assert_eq!(samples.len(), self.samples.len());
        Self { samples, sample_rate: self.sample_rate, t0: self.t0 }
    }

    pub fn same_grid(&self, other: &Self) -> bool {
        self.len() == other.len()
            && (self.sample_rate - other.sample_rate).abs() <= 1e-12 * self.sample_rate
            && (self.t0 - other.t0).abs() <= 0.25 / self.sample_rate
    }

    pub(crate) fn check_grid(&self, other: &Self) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            param("waveforms do not share a sample grid")
        }
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.with_samples(self.samples.iter().map(|s| s * factor).collect())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_grid(other)?;
        Ok(self.with_samples(
            self.samples.iter().zip(&other.samples).map(|(a, b)| a + b).collect(),
        ))
    }

    /// Little-endian binary form: an 8-byte `f64` sample rate followed by the
    /// samples as `f64`. The start time is not stored.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.sample_rate.to_le_bytes())?;
        for s in &self.samples {
            w.write_all(&s.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < 16 || bytes.len() % 8 != 0 {
            return param(format!("waveform file has invalid length {}", bytes.len()));
        }
        let mut words = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let rate = words.next().expect("length checked");
        Self::new(words.collect(), rate, 0.0)
    }
}

/// Carrier descriptor. Mixers treat LO tones as unit-amplitude switching
/// signals, so `power_dbm` only matters for tones that are added to a signal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToneSpec {
    pub frequency: f64,
    #[serde(default)]
    pub power_dbm: f64,
    #[serde(default)]
    pub phase: f64,
}

impl ToneSpec {
    pub fn new(frequency: f64, power_dbm: f64, phase: f64) -> Result<Self> {
        if !(frequency >= 0.0 && frequency.is_finite()) {
            return param(format!("tone frequency must be >= 0, got {frequency}"));
        }
        Ok(Self { frequency, power_dbm, phase })
    }

    /// LO tone with zero phase.
    pub fn lo(frequency: f64) -> Self {
        Self { frequency, power_dbm: 0.0, phase: 0.0 }
    }

    pub fn amplitude(&self) -> f64 {
        dbm_to_amplitude(self.power_dbm)
    }

    pub fn omega(&self) -> f64 {
        2.0 * PI * self.frequency
    }
}

/// Truncated Gaussian with a first-order DRAG quadrature, evaluated
/// analytically. `value` is lifted so it vanishes at both truncation edges and
/// peaks at `amplitude`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DragShape {
    pub sigma: f64,
    pub truncation: f64,
    pub amplitude: f64,
    pub drag_coeff: f64,
}

impl DragShape {
    pub fn new(sigma: f64, truncation: f64, amplitude: f64, drag_coeff: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return param(format!("sigma must be positive, got {sigma}"));
        }
        if !(truncation > 0.0 && truncation.is_finite()) {
            return param(format!("truncation must be positive, got {truncation}"));
        }
        Ok(Self { sigma, truncation, amplitude, drag_coeff })
    }

    pub fn duration(&self) -> f64 {
        2.0 * self.truncation * self.sigma
    }

    fn edge(&self) -> f64 {
        (-0.5 * self.truncation * self.truncation).exp()
    }

    /// In-phase envelope at time `t` in `[0, duration]`, zero outside.
    pub fn value(&self, t: f64) -> f64 {
        if !(0.0..=self.duration()).contains(&t) {
            return 0.0;
        }
        let x = (t - 0.5 * self.duration()) / self.sigma;
        let edge = self.edge();
        self.amplitude * ((-0.5 * x * x).exp() - edge) / (1.0 - edge)
    }

    pub fn derivative(&self, t: f64) -> f64 {
        if !(0.0..=self.duration()).contains(&t) {
            return 0.0;
        }
        let x = (t - 0.5 * self.duration()) / self.sigma;
        let edge = self.edge();
        -self.amplitude * x / self.sigma * (-0.5 * x * x).exp() / (1.0 - edge)
    }

    /// Quadrature envelope `drag_coeff * d/dt value`.
    pub fn quadrature(&self, t: f64) -> f64 {
        self.drag_coeff * self.derivative(t)
    }

    /// Integral of `value` over the pulse, in closed form.
    pub fn area(&self) -> f64 {
        let c = self.truncation;
        let gauss = self.sigma * (2.0 * PI).sqrt() * erf(c / std::f64::consts::SQRT_2);
        self.amplitude * (gauss - self.duration() * self.edge()) / (1.0 - self.edge())
    }
}

/// Maclaurin series below |x| = 3, asymptotic erfc expansion above.
fn erf(x: f64) -> f64 {
    if x.abs() >= 3.0 {
        let x2 = x * x;
        let series = 1.0 - 1.0 / (2.0 * x2) + 3.0 / (4.0 * x2 * x2) - 15.0 / (8.0 * x2 * x2 * x2);
        let erfc = (-x2).exp() / (x.abs() * PI.sqrt()) * series;
        return x.signum() * (1.0 - erfc);
    }
    let mut term = x;
    let mut sum = x;
    let x2 = x * x;
    for n in 1..200 {
        term *= -x2 / n as f64;
        let add = term / (2 * n + 1) as f64;
        sum += add;
        if add.abs() < 1e-17 {
            break;
        }
    }
    2.0 / PI.sqrt() * sum
}

/// The two envelope functions on one shared grid starting at t = 0.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopePair {
    pub i: SampledWaveform,
    pub q: SampledWaveform,
    pub duration: f64,
}

impl EnvelopePair {
    pub fn new(i: SampledWaveform, q: SampledWaveform, duration: f64) -> Result<Self> {
        i.check_grid(&q)?;
        if !(duration > 0.0) {
            return param("envelope duration must be positive");
        }
        Ok(Self { i, q, duration })
    }

    /// Constant envelopes spanning `duration`, sampled on `round(duration * rate)` points.
    pub fn constant(amp_i: f64, amp_q: f64, duration: f64, sample_rate: f64) -> Result<Self> {
        let n = (duration * sample_rate).round() as usize;
        if n == 0 {
            return param("constant envelope needs at least one sample");
        }
        Self::new(
            SampledWaveform::new(vec![amp_i; n], sample_rate, 0.0)?,
            SampledWaveform::new(vec![amp_q; n], sample_rate, 0.0)?,
            duration,
        )
    }

    /// Sum of envelope tones. Each `(offset_hz, amplitude)` places a tone at
    /// `offset_hz` relative to the carrier once the pair is modulated.
    pub fn tones(tones: &[(f64, f64)], duration: f64, sample_rate: f64) -> Result<Self> {
        let n = (duration * sample_rate).round() as usize;
        if n == 0 {
            return param("envelope needs at least one sample");
        }
        let eval = |t: f64, quad: bool| -> f64 {
            tones
                .iter()
                .map(|&(df, a)| {
                    let x = 2.0 * PI * df * t;
                    if quad { -a * x.sin() } else { a * x.cos() }
                })
                .sum()
        };
        Self::new(
            SampledWaveform::from_fn(n, sample_rate, 0.0, |t| eval(t, false))?,
            SampledWaveform::from_fn(n, sample_rate, 0.0, |t| eval(t, true))?,
            duration,
        )
    }

    pub fn sample_rate(&self) -> f64 {
        self.i.sample_rate()
    }

    pub fn len(&self) -> usize {
        self.i.len()
    }

    pub fn is_empty(&self) -> bool {
        self.i.is_empty()
    }
}

/// Samples a DRAG pulse on `round(duration * sample_rate) + 1` points so both
/// truncation edges are on the grid.
pub fn drag_envelope(
    sigma: f64,
    truncation: f64,
    amplitude: f64,
    drag_coeff: f64,
    sample_rate: f64,
) -> Result<EnvelopePair> {
    let shape = DragShape::new(sigma, truncation, amplitude, drag_coeff)?;
    if !(sample_rate > 0.0) || sample_rate * sigma < 4.0 {
        return param(format!(
            "sample rate {sample_rate} does not resolve sigma {sigma} (need rate*sigma >= 4)"
        ));
    }
    let n = (shape.duration() * sample_rate).round() as usize + 1;
    EnvelopePair::new(
        SampledWaveform::from_fn(n, sample_rate, 0.0, |t| shape.value(t))?,
        SampledWaveform::from_fn(n, sample_rate, 0.0, |t| shape.quadrature(t))?,
        shape.duration(),
    )
}

/// Digital modulation of the envelope pair onto an intermediate frequency.
/// A negative `f_if` inverts the sideband that the pair is later
/// up-converted to.
pub fn iq_modulate(
    env: &EnvelopePair,
    f_if: f64,
    phase: f64,
) -> Result<(SampledWaveform, SampledWaveform)> {
    let fs = env.sample_rate();
    if f_if.abs() >= fs / 2.0 {
        return param(format!("IF {f_if} Hz aliases at sample rate {fs} Sa/s"));
    }
    let w = 2.0 * PI * f_if;
    let (vi, vq): (Vec<f64>, Vec<f64>) = env
        .i
        .times()
        .zip(env.i.samples().iter().zip(env.q.samples()))
        .map(|(t, (&ei, &eq))| {
            let (s, c) = (w * t + phase).sin_cos();
            (ei * c + eq * s, -ei * s + eq * c)
        })
        .unzip();
    Ok((env.i.with_samples(vi), env.i.with_samples(vq)))
}

/// Output of an ideal IQ mixer: `v_i cos(w_lo t + phase) + v_q sin(w_lo t + phase)`.
pub fn ideal_iq_upconvert(
    v_i: &SampledWaveform,
    v_q: &SampledWaveform,
    lo: &ToneSpec,
) -> Result<SampledWaveform> {
    v_i.check_grid(v_q)?;
    if lo.frequency >= v_i.sample_rate() / 2.0 {
        return param("LO frequency above Nyquist");
    }
    let w = lo.omega();
    let out = v_i
        .times()
        .zip(v_i.samples().iter().zip(v_q.samples()))
        .map(|(t, (&a, &b))| {
            let (s, c) = (w * t + lo.phase).sin_cos();
            a * c + b * s
        })
        .collect();
    Ok(v_i.with_samples(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Rect,
    Hann,
    #[default]
    Flattop,
}

const FLATTOP: [f64; 5] = [
    0.215_578_95,
    0.416_631_58,
    0.277_263_158,
    0.083_578_947,
    0.006_947_368,
];

impl Window {
    /// Periodic (DFT-even) window of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        let x = |k: usize| 2.0 * PI * k as f64 / n as f64;
        (0..n)
            .map(|k| match self {
                Window::Rect => 1.0,
                Window::Hann => 0.5 - 0.5 * x(k).cos(),
                Window::Flattop => FLATTOP
                    .iter()
                    .enumerate()
                    .map(|(j, &a)| (if j % 2 == 0 { a } else { -a }) * (j as f64 * x(k)).cos())
                    .sum(),
            })
            .collect()
    }

    /// Half-width of the main lobe of a bin-centred tone, in bins.
    pub fn mainlobe_half_width(self) -> usize {
        match self {
            Window::Rect => 1,
            Window::Hann => 2,
            Window::Flattop => 5,
        }
    }

    /// Equivalent noise bandwidth in bins.
    pub fn enbw_bins(self, n: usize) -> f64 {
        let w = self.coefficients(n);
        let s1: f64 = w.iter().sum();
        let s2: f64 = w.iter().map(|x| x * x).sum();
        n as f64 * s2 / (s1 * s1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub freq_hz: f64,
    pub power_dbm: f64,
    #[serde(default)]
    pub label: String,
}

/// One-sided power spectrum in dBm per bin with sinusoid-peak scaling, so a
/// tone reads its own power in the bin it falls in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub freq_hz: Vec<f64>,
    pub power_dbm: Vec<f64>,
    /// Bin spacing of the analyzer, Hz.
    pub rbw: f64,
    /// Equivalent noise bandwidth of the window, Hz.
    pub enbw_hz: f64,
    pub window: Window,
    pub reference_impedance: f64,
    pub segments: usize,
}

impl Spectrum {
    pub fn from_bins(freq_hz: Vec<f64>, power_dbm: Vec<f64>) -> Result<Self> {
        if freq_hz.len() != power_dbm.len() || freq_hz.is_empty() {
            return param("spectrum needs matching, non-empty frequency and power columns");
        }
        if freq_hz.windows(2).any(|w| w[1] <= w[0]) {
            return param("spectrum frequencies must be strictly increasing");
        }
        let rbw = if freq_hz.len() > 1 { freq_hz[1] - freq_hz[0] } else { 1.0 };
        Ok(Self {
            freq_hz,
            power_dbm,
            rbw,
            enbw_hz: rbw,
            window: Window::Rect,
            reference_impedance: REFERENCE_IMPEDANCE,
            segments: 1,
        })
    }

    pub fn len(&self) -> usize {
        self.freq_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freq_hz.is_empty()
    }

    pub fn bin_of(&self, freq: f64) -> usize {
        let k = ((freq - self.freq_hz[0]) / self.rbw).round();
        (k.max(0.0) as usize).min(self.len() - 1)
    }

    /// Largest bin within `±half_width` bins of `freq`.
    pub fn peak_near(&self, freq: f64, half_width: usize) -> Peak {
        let c = self.bin_of(freq);
        let lo = c.saturating_sub(half_width);
        let hi = (c + half_width).min(self.len() - 1);
        let k = (lo..=hi)
            .max_by(|&a, &b| self.power_dbm[a].total_cmp(&self.power_dbm[b]))
            .expect("non-empty range");
        Peak { freq_hz: self.freq_hz[k], power_dbm: self.power_dbm[k], label: String::new() }
    }

    /// Power reading at `freq`, searching the window's main lobe.
    pub fn power_at(&self, freq: f64) -> f64 {
        self.peak_near(freq, 1).power_dbm
    }

    /// Peak amplitude in volts read at `freq`.
    pub fn amplitude_at(&self, freq: f64) -> f64 {
        dbm_to_amplitude(self.power_at(freq))
    }

    pub fn max_power(&self) -> f64 {
        self.power_dbm.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Local maxima strictly above `floor_dbm`.
    pub fn peaks(&self, floor_dbm: f64) -> Vec<Peak> {
        let p = &self.power_dbm;
        (0..p.len())
            .filter(|&k| {
                let left = if k == 0 { f64::NEG_INFINITY } else { p[k - 1] };
                let right = if k + 1 == p.len() { f64::NEG_INFINITY } else { p[k + 1] };
                p[k] > floor_dbm && p[k] > left && p[k] >= right
            })
            .map(|k| Peak { freq_hz: self.freq_hz[k], power_dbm: p[k], label: String::new() })
            .collect()
    }

    /// Same spectrum with every bin shifted by `db`.
    pub fn offset(&self, db: f64) -> Self {
        let mut s = self.clone();
        s.power_dbm.iter_mut().for_each(|p| *p += db);
        s
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "freq_hz,power_dbm")?;
        for (f, p) in self.freq_hz.iter().zip(&self.power_dbm) {
            writeln!(w, "{f},{p}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(mut r: R) -> Result<Self> {
        let mut text = String::new();
        r.read_to_string(&mut text)?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        match lines.next().map(str::trim) {
            Some("freq_hz,power_dbm") => {}
            other => return param(format!("unexpected spectrum header {other:?}")),
        }
        let mut freqs = Vec::new();
        let mut powers = Vec::new();
        for (n, line) in lines.enumerate() {
            let mut cols = line.split(',');
            let mut next = || -> Result<f64> {
                cols.next()
                    .and_then(|c| c.trim().parse().ok())
                    .ok_or_else(|| Error::Parameter(format!("bad spectrum row {}", n + 2)))
            };
            freqs.push(next()?);
            powers.push(next()?);
        }
        Self::from_bins(freqs, powers)
    }
}

pub(crate) fn fft_forward(data: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = data.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf
}

/// Inverse FFT including the 1/N normalisation.
pub(crate) fn fft_inverse(mut buf: Vec<Complex64>) -> Vec<Complex64> {
    let n = buf.len() as f64;
    FftPlanner::new().plan_fft_inverse(buf.len()).process(&mut buf);
    buf.iter_mut().for_each(|x| *x /= n);
    buf
}

/// Signed frequency of FFT bin `k` for a transform of length `n`.
pub(crate) fn bin_frequency(k: usize, n: usize, sample_rate: f64) -> f64 {
    let k = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
    k * sample_rate / n as f64
}

/// Welch-averaged periodogram with 50 % overlap. `rbw` sets the bin spacing,
/// so the segment length is `round(sample_rate / rbw)`.
pub fn power_spectrum(w: &SampledWaveform, window: Window, rbw: f64) -> Result<Spectrum> {
    let fs = w.sample_rate();
    if !(rbw > 0.0) || rbw < fs / w.len() as f64 * (1.0 - 1e-9) {
        return param(format!(
            "rbw {rbw} Hz is below the achievable resolution {} Hz",
            fs / w.len() as f64
        ));
    }
    let n = ((fs / rbw).round() as usize).clamp(2, w.len());
    let hop = (n / 2).max(1);
    let coeffs = window.coefficients(n);
    let gain: f64 = coeffs.iter().sum();
    let planner_fft = FftPlanner::new().plan_fft_forward(n);
    let bins = n / 2 + 1;
    let mut acc = vec![0.0; bins];
    let mut segments = 0;
    let mut start = 0;
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    while start + n <= w.len() {
        for (b, (x, c)) in buf.iter_mut().zip(w.samples()[start..start + n].iter().zip(&coeffs)) {
            *b = Complex64::new(x * c, 0.0);
        }
        planner_fft.process(&mut buf);
        for (k, a) in acc.iter_mut().enumerate() {
            let amp = buf[k].norm() / gain;
            let one_sided = k != 0 && !(n % 2 == 0 && k == n / 2);
            let watts = if one_sided {
                (2.0 * amp).powi(2) / (2.0 * REFERENCE_IMPEDANCE)
            } else {
                amp * amp / REFERENCE_IMPEDANCE
            };
            *a += watts;
        }
        segments += 1;
        start += hop;
    }
    let bin_width = fs / n as f64;
    Ok(Spectrum {
        freq_hz: (0..bins).map(|k| k as f64 * bin_width).collect(),
        power_dbm: acc.iter().map(|a| watts_to_dbm(a / segments as f64)).collect(),
        rbw: bin_width,
        enbw_hz: window.enbw_bins(n) * bin_width,
        window,
        reference_impedance: REFERENCE_IMPEDANCE,
        segments,
    })
}

/// Band-limited resampling by spectral zero-padding or truncation. The
/// output length `len * new_rate / rate` must be an integer.
pub fn resample(w: &SampledWaveform, new_rate: f64) -> Result<SampledWaveform> {
    let ratio = new_rate / w.sample_rate();
    let m_exact = w.len() as f64 * ratio;
    let m = m_exact.round() as usize;
    if m == 0 || (m_exact - m as f64).abs() > 1e-6 {
        return param(format!(
            "resampling {} samples by {ratio} does not give an integer length",
            w.len()
        ));
    }
    if m == w.len() {
        return Ok(w.clone());
    }
    let n = w.len();
    let spec = fft_forward(w.samples());
    let mut out = vec![Complex64::new(0.0, 0.0); m];
    let scale = m as f64 / n as f64;
    let keep = n.min(m);
    for k in 0..n {
        let f = bin_frequency(k, n, 1.0) * n as f64;
        let fk = f.round() as i64;
        // drop the ambiguous Nyquist bin of the shorter grid
        if 2 * fk.unsigned_abs() as usize >= keep {
            continue;
        }
        let idx = if fk >= 0 { fk as usize } else { (m as i64 + fk) as usize };
        out[idx] += spec[k] * scale;
    }
    let samples = fft_inverse(out).into_iter().map(|c| c.re).collect();
    SampledWaveform::new(samples, new_rate, w.t0())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, amp: f64, n: usize, fs: f64) -> SampledWaveform {
        SampledWaveform::from_fn(n, fs, 0.0, |t| amp * (2.0 * PI * freq * t).cos()).unwrap()
    }

    #[test]
    fn drag_duration_and_edges() {
        let env = drag_envelope(10e-9, 2.5, 1.0, 0.0, 10e9).unwrap();
        assert!((env.duration - 50e-9).abs() < 1e-18);
        assert_eq!(env.len(), 501);
        assert!(env.i.samples()[0].abs() < 1e-15);
        assert!(env.i.samples()[500].abs() < 1e-15);
        assert!((env.i.samples()[250] - 1.0).abs() < 1e-15);
        assert!(env.q.samples().iter().all(|&q| q == 0.0));
    }

    #[test]
    fn drag_quadrature_peaks_at_inflection_points() {
        let env = drag_envelope(10e-9, 2.5, 1.0, 1e-9, 10e9).unwrap();
        let q = env.q.samples();
        let (kmax, _) = q.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        let (kmin, _) = q.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        // rising edge is positive derivative at duration/2 - sigma
        assert_eq!(kmax, 150);
        assert_eq!(kmin, 350);
    }

    #[test]
    fn drag_rejects_bad_parameters() {
        assert!(drag_envelope(0.0, 2.5, 1.0, 0.0, 1e9).is_err());
        assert!(drag_envelope(10e-9, 2.5, 1.0, 0.0, 1e8).is_err());
        assert!(drag_envelope(10e-9, -1.0, 1.0, 0.0, 1e9).is_err());
    }

    #[test]
    fn drag_area_matches_quadrature() {
        let shape = DragShape::new(10e-9, 2.5, 1.0, 0.0).unwrap();
        let n = 100_000;
        let h = shape.duration() / n as f64;
        let numeric: f64 = (0..n).map(|k| shape.value((k as f64 + 0.5) * h)).sum::<f64>() * h;
        assert!((numeric - shape.area()).abs() < 1e-9 * shape.area());
    }

    #[test]
    fn modulate_unit_envelope() {
        let env = EnvelopePair::constant(1.0, 0.0, 1e-6, 1e9).unwrap();
        let (vi, vq) = iq_modulate(&env, 50e6, 0.0).unwrap();
        for (k, t) in vi.times().enumerate() {
            let x = 2.0 * PI * 50e6 * t;
            assert!((vi.samples()[k] - x.cos()).abs() < 1e-12);
            assert!((vq.samples()[k] + x.sin()).abs() < 1e-12);
        }
    }

    #[test]
    fn modulate_zero_if_is_identity() {
        let env = drag_envelope(10e-9, 2.5, 0.3, 2e-9, 4e9).unwrap();
        let (vi, vq) = iq_modulate(&env, 0.0, 0.0).unwrap();
        assert_eq!(vi.samples(), env.i.samples());
        assert_eq!(vq.samples(), env.q.samples());
    }

    #[test]
    fn modulate_rejects_aliasing() {
        let env = EnvelopePair::constant(1.0, 0.0, 1e-6, 1e9).unwrap();
        assert!(iq_modulate(&env, 0.5e9, 0.0).is_err());
        assert!(iq_modulate(&env, -0.6e9, 0.0).is_err());
    }

    #[test]
    fn upconvert_rejects_grid_mismatch() {
        let a = SampledWaveform::zeros(10, 1e9, 0.0).unwrap();
        let b = SampledWaveform::zeros(11, 1e9, 0.0).unwrap();
        assert!(ideal_iq_upconvert(&a, &b, &ToneSpec::lo(1e8)).is_err());
    }

    #[test]
    fn upconvert_zero_input() {
        let a = SampledWaveform::zeros(64, 1e9, 0.0).unwrap();
        let out = ideal_iq_upconvert(&a, &a, &ToneSpec::lo(1e8)).unwrap();
        assert!(out.samples().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_sideband_placement() {
        let fs = 10e9;
        let env = EnvelopePair::constant(0.5, 0.0, 1e-6, fs).unwrap();
        let lo = ToneSpec::lo(2e9);
        for (f_if, want, image) in [(100e6, 2.1e9, 1.9e9), (-100e6, 1.9e9, 2.1e9)] {
            let (vi, vq) = iq_modulate(&env, f_if, 0.0).unwrap();
            let out = ideal_iq_upconvert(&vi, &vq, &lo).unwrap();
            let s = power_spectrum(&out, Window::Rect, 1e6).unwrap();
            let sig = s.power_at(want);
            assert!((sig - amplitude_to_dbm(0.5)).abs() < 1e-6);
            assert!(s.power_at(image) - sig < -200.0);
        }
    }

    #[test]
    fn rect_bin_centred_tone_reads_exact_power() {
        let amp = dbm_to_amplitude(0.0);
        let w = tone(100e6, amp, 10_000, 10e9);
        let s = power_spectrum(&w, Window::Rect, 1e6).unwrap();
        assert!((s.power_at(100e6) - 0.0).abs() < 1e-9);
        let total: f64 = s.power_dbm.iter().map(|&p| dbm_to_watts(p)).sum();
        assert!((watts_to_dbm(total)).abs() < 0.1);
    }

    #[test]
    fn zero_waveform_is_below_floor() {
        let w = SampledWaveform::zeros(4096, 1e9, 0.0).unwrap();
        let s = power_spectrum(&w, Window::Hann, 1e9 / 1024.0).unwrap();
        assert!(s.power_dbm.iter().all(|&p| p < -200.0));
    }

    #[test]
    fn flattop_reads_off_bin_tones() {
        let fs = 1e9;
        let n = 20_000;
        let a0 = dbm_to_amplitude(0.0);
        let a1 = dbm_to_amplitude(-52.0);
        let w = SampledWaveform::from_fn(n, fs, 0.0, |t| {
            a0 * (2.0 * PI * 101.37e6 * t).cos() + a1 * (2.0 * PI * 203.71e6 * t + 0.3).cos()
        })
        .unwrap();
        let s = power_spectrum(&w, Window::Flattop, 0.5e6).unwrap();
        assert!(s.segments > 1);
        assert!((s.power_at(101.37e6) - 0.0).abs() < 0.2);
        assert!((s.power_at(203.71e6) + 52.0).abs() < 0.2);
    }

    #[test]
    fn rbw_below_resolution_is_rejected() {
        let w = SampledWaveform::zeros(1000, 1e9, 0.0).unwrap();
        assert!(power_spectrum(&w, Window::Rect, 0.5e6).is_err());
    }

    #[test]
    fn spectrum_csv_round_trip() {
        let s = Spectrum::from_bins(vec![1.0, 2.0, 3.0], vec![-10.0, 0.0, -52.5]).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("freq_hz,power_dbm\n"));
        let back = Spectrum::read_csv(&buf[..]).unwrap();
        assert_eq!(back.freq_hz, s.freq_hz);
        assert_eq!(back.power_dbm, s.power_dbm);
    }

    #[test]
    fn waveform_binary_layout() {
        let w = SampledWaveform::new(vec![1.5, -2.0], 6e9, 0.0).unwrap();
        let mut buf = Vec::new();
        w.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 24);
        assert_eq!(&buf[..8], &6e9f64.to_le_bytes());
        assert_eq!(&buf[16..], &(-2.0f64).to_le_bytes());
        assert_eq!(SampledWaveform::read_binary(&buf[..]).unwrap(), w);
        assert!(SampledWaveform::read_binary(&buf[..12]).is_err());
    }

    #[test]
    fn resample_preserves_tone() {
        let w = tone(1e9, 0.3, 6000, 6e9);
        let up = resample(&w, 80e9).unwrap();
        assert_eq!(up.len(), 80_000);
        for k in (0..80_000).step_by(997) {
            let t = up.time(k);
            assert!((up.samples()[k] - 0.3 * (2.0 * PI * 1e9 * t).cos()).abs() < 1e-9);
        }
        assert!(resample(&tone(1e9, 1.0, 6001, 6e9), 80e9).is_err());
    }

    #[test]
    fn invalid_waveforms_rejected() {
        assert!(SampledWaveform::new(vec![], 1.0, 0.0).is_err());
        assert!(SampledWaveform::new(vec![1.0], 0.0, 0.0).is_err());
        assert!(SampledWaveform::new(vec![f64::NAN], 1.0, 0.0).is_err());
    }
}
