//! Mixer models: a single RF mixer with a memoryless IF polynomial and LO
//! harmonics, and an IQ mixer with carrier leakage and path imbalance.

use std::f64::consts::{FRAC_PI_2, PI};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::signal::{fft_forward, SampledWaveform, ToneSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoHarmonic {
    pub order: u32,
    pub level_dbc: f64,
}

/// Single mixer: `gain * P(x) * [cos(w t) + sum_n a_n cos(n w t)]` with
/// `P(x) = sum_k c_k x^k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RfMixerModel {
    pub conversion_gain_db: f64,
    /// `c_1 .. c_M`, in V^(1-k).
    pub if_poly: Vec<f64>,
    #[serde(default)]
    pub lo_harmonics: Vec<LoHarmonic>,
    /// Removes the time average of every product of order >= 2, so rectified
    /// IF power does not reappear as carrier at the output.
    #[serde(default)]
    pub ac_coupled_products: bool,
}

impl Default for RfMixerModel {
    fn default() -> Self {
        Self::ideal()
    }
}

impl RfMixerModel {
    pub fn ideal() -> Self {
        Self {
            conversion_gain_db: 0.0,
            if_poly: vec![1.0],
            lo_harmonics: Vec::new(),
            ac_coupled_products: false,
        }
    }

    pub fn with_poly(if_poly: Vec<f64>) -> Result<Self> {
        let m = Self { if_poly, ..Self::ideal() };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        match self.if_poly.first() {
            None => return param("mixer polynomial needs at least the linear term"),
            Some(&c1) if c1 == 0.0 || !c1.is_finite() => {
                return param("linear mixer coefficient must be non-zero")
            }
            _ => {}
        }
        if self.if_poly.iter().any(|c| !c.is_finite()) {
            return param("mixer coefficients must be finite");
        }
        for h in &self.lo_harmonics {
            if h.order < 1 || h.level_dbc > 0.0 {
                return param(format!("invalid LO harmonic {h:?}"));
            }
        }
        Ok(())
    }

    pub fn gain(&self) -> f64 {
        10f64.powf(self.conversion_gain_db / 20.0)
    }

    pub fn order(&self) -> usize {
        self.if_poly.len()
    }

    fn max_lo_order(&self) -> u32 {
        self.lo_harmonics.iter().map(|h| h.order).max().unwrap_or(1).max(1)
    }

    /// Polynomial applied sample by sample.
    pub(crate) fn polynomial(&self, x: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = x.iter().map(|v| self.if_poly[0] * v).collect();
        let mut power = x.to_vec();
        for &c in &self.if_poly[1..] {
            power.iter_mut().zip(x).for_each(|(p, v)| *p *= v);
            if c == 0.0 {
                continue;
            }
            let mean = if self.ac_coupled_products {
                power.iter().sum::<f64>() / power.len() as f64
            } else {
                0.0
            };
            out.iter_mut().zip(&power).for_each(|(o, p)| *o += c * (p - mean));
        }
        out
    }

    /// LO switching waveform including harmonics, at phase offset `shift`.
    pub(crate) fn lo_wave(&self, t: f64, omega: f64, shift: f64) -> f64 {
        let theta = omega * t + shift;
        theta.cos()
            + self
                .lo_harmonics
                .iter()
                .map(|h| 10f64.powf(h.level_dbc / 20.0) * (h.order as f64 * theta).cos())
                .sum::<f64>()
    }

    /// Checks that every product `n f_LO + m f_IF` stays below Nyquist.
    pub(crate) fn check_nyquist(&self, if_wave: &SampledWaveform, lo: &ToneSpec) -> Result<()> {
        let f_if = significant_bandwidth(if_wave);
        let highest = self.max_lo_order() as f64 * lo.frequency + self.order() as f64 * f_if;
        let nyquist = if_wave.sample_rate() / 2.0;
        if highest >= nyquist {
            return param(format!(
                "mixer products reach {highest:.4e} Hz, above Nyquist {nyquist:.4e} Hz"
            ));
        }
        Ok(())
    }
}

/// Highest frequency carrying content within 80 dB of the strongest bin.
pub(crate) fn significant_bandwidth(w: &SampledWaveform) -> f64 {
    let spec = fft_forward(w.samples());
    let n = spec.len();
    let mags: Vec<f64> = spec[..n / 2 + 1].iter().map(|c| c.norm()).collect();
    let peak = mags.iter().copied().fold(0.0, f64::max);
    if peak == 0.0 {
        return 0.0;
    }
    let k = mags.iter().rposition(|&m| m > 1e-4 * peak).unwrap_or(0);
    k as f64 * w.sample_rate() / n as f64
}

/// Frequency-conversion by one RF mixer.
pub fn rf_mix(model: &RfMixerModel, if_wave: &SampledWaveform, lo: &ToneSpec) -> Result<SampledWaveform> {
    model.validate()?;
    model.check_nyquist(if_wave, lo)?;
    let poly = model.polynomial(if_wave.samples());
    let g = model.gain();
    let w = lo.omega();
    let out = if_wave
        .times()
        .zip(poly)
        .map(|(t, p)| g * p * model.lo_wave(t, w, lo.phase))
        .collect();
    Ok(if_wave.with_samples(out))
}

/// Imperfect IQ mixer. Leakage follows `L_I cos(w t + th_I) + L_Q sin(w t + th_Q)`;
/// the Q path carries the relative gain `alpha_tilde` and LO phase error
/// `phi_tilde`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IqMixerModel {
    pub path_i: RfMixerModel,
    pub path_q: RfMixerModel,
    #[serde(rename = "l_i_v")]
    pub l_i: f64,
    #[serde(rename = "theta_i_rad")]
    pub theta_i: f64,
    #[serde(rename = "l_q_v")]
    pub l_q: f64,
    #[serde(rename = "theta_q_rad")]
    pub theta_q: f64,
    pub alpha_tilde: f64,
    #[serde(rename = "phi_tilde_rad")]
    pub phi_tilde: f64,
    /// Coupling of the product `v_I * v_Q` into the I-path mixer, 1/V.
    #[serde(rename = "iq_cross_per_v", default)]
    pub iq_cross: f64,
}

impl Default for IqMixerModel {
    fn default() -> Self {
        Self::ideal()
    }
}

impl IqMixerModel {
    pub fn ideal() -> Self {
        Self {
            path_i: RfMixerModel::ideal(),
            path_q: RfMixerModel::ideal(),
            l_i: 0.0,
            theta_i: 0.0,
            l_q: 0.0,
            theta_q: 0.0,
            alpha_tilde: 1.0,
            phi_tilde: 0.0,
            iq_cross: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.path_i.validate()?;
        self.path_q.validate()?;
        if !(self.alpha_tilde > 0.0) {
            return param("alpha_tilde must be positive");
        }
        if self.l_i < 0.0 || self.l_q < 0.0 {
            return param("leakage amplitudes must be non-negative");
        }
        Ok(())
    }

    /// Complex leakage phasor `L_I e^{i th_I} - i L_Q e^{i th_Q}`.
    pub fn leakage_phasor(&self) -> Complex64 {
        Complex64::from_polar(self.l_i, self.theta_i)
            - Complex64::i() * Complex64::from_polar(self.l_q, self.theta_q)
    }

    /// DC offsets that null the carrier.
    pub fn lo_optimum(&self) -> (f64, f64) {
        let c = self.leakage_phasor();
        (-c.re, c.im)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompensationParams {
    #[serde(rename = "v_i_dc_v")]
    pub v_i_dc: f64,
    #[serde(rename = "v_q_dc_v")]
    pub v_q_dc: f64,
    pub alpha: f64,
    #[serde(rename = "phi_rad")]
    pub phi: f64,
}

impl Default for CompensationParams {
    fn default() -> Self {
        Self::identity()
    }
}

impl CompensationParams {
    pub fn identity() -> Self {
        Self { v_i_dc: 0.0, v_q_dc: 0.0, alpha: 1.0, phi: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return param("compensation alpha must be positive");
        }
        Ok(())
    }

    /// Phase-rotates the Q waveform by `phi` using I as its quadrature
    /// partner and divides by `alpha`, so `-sin(w t)` becomes
    /// `-sin(w t + phi) / alpha`.
    pub fn apply(&self, v_i: &SampledWaveform, v_q: &SampledWaveform) -> Result<SampledWaveform> {
        self.validate()?;
        v_i.check_grid(v_q)?;
        let (s, c) = self.phi.sin_cos();
        Ok(v_q.with_samples(
            v_i.samples()
                .iter()
                .zip(v_q.samples())
                .map(|(i, q)| (q * c - i * s) / self.alpha)
                .collect(),
        ))
    }
}

/// IQ up-conversion through an imperfect mixer, after applying `comp`.
///
/// DC offsets and carrier leakage enter at the fundamental LO with the I-path
/// conversion gain; signal products pass through each path's polynomial.
pub fn iq_mix(
    model: &IqMixerModel,
    comp: &CompensationParams,
    v_i: &SampledWaveform,
    v_q: &SampledWaveform,
    lo: &ToneSpec,
) -> Result<SampledWaveform> {
    model.validate()?;
    let vq_c = comp.apply(v_i, v_q)?;
    model.path_i.check_nyquist(v_i, lo)?;
    model.path_q.check_nyquist(&vq_c, lo)?;

    let mut drive_i = model.path_i.polynomial(v_i.samples());
    if model.iq_cross != 0.0 {
        let cross: Vec<f64> = v_i.samples().iter().zip(vq_c.samples()).map(|(a, b)| a * b).collect();
        let mean = cross.iter().sum::<f64>() / cross.len() as f64;
        drive_i
            .iter_mut()
            .zip(&cross)
            .for_each(|(d, x)| *d += model.iq_cross * (x - mean));
    }
    let drive_q = model.path_q.polynomial(vq_c.samples());

    let gi = model.path_i.gain();
    let gq = model.path_q.gain() * model.alpha_tilde;
    let w = lo.omega();
    let ph = lo.phase;
    let q_shift = ph - FRAC_PI_2 + model.phi_tilde;
    let out = v_i
        .times()
        .zip(drive_i.iter().zip(&drive_q))
        .map(|(t, (di, dq))| {
            let theta = w * t + ph;
            let (s, c) = theta.sin_cos();
            let carrier = comp.v_i_dc * c
                + comp.v_q_dc * s
                + model.l_i * (theta + model.theta_i).cos()
                + model.l_q * (theta + model.theta_q).sin();
            gi * (di * model.path_i.lo_wave(t, w, ph) + carrier)
                + gq * dq * model.path_q.lo_wave(t, w, q_shift)
        })
        .collect();
    Ok(v_i.with_samples(out))
}

/// Residual carrier amplitude `|V_I + L_I e^{i th_I} - i V_Q - i L_Q e^{i th_Q}|`.
pub fn carrier_leakage_amplitude(model: &IqMixerModel, v_i_dc: f64, v_q_dc: f64) -> f64 {
    (Complex64::new(v_i_dc, -v_q_dc) + model.leakage_phasor()).norm()
}

/// Residual image amplitude `1/2 |1 - (alpha_tilde / alpha) e^{i(phi_tilde - phi)}|`
/// relative to a unit-amplitude drive.
pub fn image_amplitude(model: &IqMixerModel, alpha: f64, phi: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return param(format!("alpha must be positive, got {alpha}"));
    }
    let z = Complex64::from_polar(model.alpha_tilde / alpha, model.phi_tilde - phi);
    Ok(0.5 * (Complex64::new(1.0, 0.0) - z).norm())
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_phase(x: f64) -> f64 {
    let y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y == -PI { PI } else { y }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{
        amplitude_to_dbm, ideal_iq_upconvert, iq_modulate, power_spectrum, EnvelopePair, Window,
    };
    use proptest::prelude::*;

    const FS: f64 = 40e9;
    const F_LO: f64 = 5.9e9;
    const F_IF: f64 = 100e6;

    fn cw(amp: f64) -> (SampledWaveform, SampledWaveform) {
        let env = EnvelopePair::constant(amp, 0.0, 1e-6, FS).unwrap();
        iq_modulate(&env, F_IF, 0.0).unwrap()
    }

    fn if_tone(amp: f64) -> SampledWaveform {
        SampledWaveform::from_fn(40_000, FS, 0.0, |t| amp * (2.0 * PI * F_IF * t).cos()).unwrap()
    }

    #[test]
    fn linear_mixer_gives_two_equal_sidebands() {
        let out = rf_mix(&RfMixerModel::ideal(), &if_tone(0.1), &ToneSpec::lo(F_LO)).unwrap();
        let s = power_spectrum(&out, Window::Rect, 1e6).unwrap();
        let up = s.power_at(F_LO + F_IF);
        let down = s.power_at(F_LO - F_IF);
        assert!((up - down).abs() < 1e-9);
        assert!((up - amplitude_to_dbm(0.05)).abs() < 1e-9);
        let others = s
            .peaks(-200.0)
            .into_iter()
            .filter(|p| (p.freq_hz - F_LO).abs() > 2.0 * F_IF)
            .count();
        assert_eq!(others, 0);
    }

    #[test]
    fn cubic_spur_scales_with_slope_three() {
        let model = RfMixerModel::with_poly(vec![1.0, 0.0, 0.5]).unwrap();
        let mut pts = Vec::new();
        for db in [-10.0, -5.0, 0.0, 5.0, 10.0] {
            let amp = 0.05 * 10f64.powf(db / 20.0);
            let out = rf_mix(&model, &if_tone(amp), &ToneSpec::lo(F_LO)).unwrap();
            let s = power_spectrum(&out, Window::Rect, 1e6).unwrap();
            assert!(s.power_at(F_LO + 2.0 * F_IF) < -250.0);
            pts.push((amplitude_to_dbm(amp), s.power_at(F_LO + 3.0 * F_IF)));
        }
        let slope = crate::fit::linear_slope(&pts);
        assert!((slope - 3.0).abs() < 0.05, "slope {slope}");
    }

    #[test]
    fn quadratic_spur_scales_with_slope_two() {
        let model = RfMixerModel::with_poly(vec![1.0, 0.3]).unwrap();
        let pts: Vec<(f64, f64)> = [-10.0, 0.0, 10.0]
            .iter()
            .map(|db| {
                let amp = 0.05 * 10f64.powf(db / 20.0);
                let out = rf_mix(&model, &if_tone(amp), &ToneSpec::lo(F_LO)).unwrap();
                let s = power_spectrum(&out, Window::Rect, 1e6).unwrap();
                (amplitude_to_dbm(amp), s.power_at(F_LO + 2.0 * F_IF))
            })
            .collect();
        let slope = crate::fit::linear_slope(&pts);
        assert!((slope - 2.0).abs() < 0.05, "slope {slope}");
    }

    #[test]
    fn spurs_land_on_the_product_grid() {
        let model = RfMixerModel {
            if_poly: vec![1.0, 0.4, 0.2],
            lo_harmonics: vec![LoHarmonic { order: 2, level_dbc: -20.0 }],
            ..RfMixerModel::ideal()
        };
        let out = rf_mix(&model, &if_tone(0.2), &ToneSpec::lo(3e9)).unwrap();
        let s = power_spectrum(&out, Window::Rect, 1e6).unwrap();
        for p in s.peaks(-150.0) {
            let on_grid = (0..=2).any(|n| {
                (-3i32..=3).any(|m| {
                    let f = (n as f64 * 3e9 + m as f64 * F_IF).abs();
                    (p.freq_hz - f).abs() < 0.5 * s.rbw
                })
            });
            assert!(on_grid, "peak at {} Hz is off the product grid", p.freq_hz);
        }
    }

    #[test]
    fn nyquist_violation_is_rejected() {
        let model = RfMixerModel::with_poly(vec![1.0, 0.1, 0.1]).unwrap();
        assert!(rf_mix(&model, &if_tone(0.1), &ToneSpec::lo(19.8e9)).is_err());
    }

    #[test]
    fn invalid_models_rejected() {
        assert!(RfMixerModel::with_poly(vec![]).is_err());
        assert!(RfMixerModel::with_poly(vec![0.0, 1.0]).is_err());
        let m = RfMixerModel {
            lo_harmonics: vec![LoHarmonic { order: 2, level_dbc: 3.0 }],
            ..RfMixerModel::ideal()
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn ideal_iq_mixer_matches_ideal_upconversion() {
        let (vi, vq) = cw(0.2);
        let lo = ToneSpec::lo(F_LO);
        let a = iq_mix(&IqMixerModel::ideal(), &CompensationParams::identity(), &vi, &vq, &lo).unwrap();
        let b = ideal_iq_upconvert(&vi, &vq, &lo).unwrap();
        let err = a.samples().iter().zip(b.samples()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12);
        let s = power_spectrum(&a, Window::Flattop, 1e6).unwrap();
        assert!(s.power_at(F_LO - F_IF) - s.power_at(F_LO + F_IF) < -120.0);
    }

    fn image_ratio(model: &IqMixerModel, comp: &CompensationParams, amp: f64) -> f64 {
        let (vi, vq) = cw(amp);
        let out = iq_mix(model, comp, &vi, &vq, &ToneSpec::lo(F_LO)).unwrap();
        let s = power_spectrum(&out, Window::Rect, 1e6).unwrap();
        s.amplitude_at(F_LO - F_IF) / amp
    }

    #[test]
    fn uncompensated_image_matches_closed_form() {
        let model = IqMixerModel { alpha_tilde: 1.05, phi_tilde: 0.02, ..IqMixerModel::ideal() };
        let want = image_amplitude(&model, 1.0, 0.0).unwrap();
        assert!((want - 0.0270).abs() < 2e-4);
        let got = image_ratio(&model, &CompensationParams::identity(), 0.1);
        assert!((20.0 * (got / want).log10()).abs() < 0.01);
    }

    #[test]
    fn leakage_only_gives_carrier_tone() {
        let model = IqMixerModel { l_i: 0.01, ..IqMixerModel::ideal() };
        let zero = SampledWaveform::zeros(40_000, FS, 0.0).unwrap();
        let out = iq_mix(&model, &CompensationParams::identity(), &zero, &zero, &ToneSpec::lo(F_LO)).unwrap();
        let s = power_spectrum(&out, Window::Rect, 1e6).unwrap();
        assert!((s.amplitude_at(F_LO) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn carrier_leakage_examples() {
        let mut m = IqMixerModel::ideal();
        assert!((carrier_leakage_amplitude(&m, 0.3, 0.4) - 0.5).abs() < 1e-15);
        m.l_i = 0.1;
        assert!((carrier_leakage_amplitude(&m, 0.0, 0.0) - 0.1).abs() < 1e-15);
        m = IqMixerModel { l_i: 0.03, theta_i: 0.4, l_q: 0.02, theta_q: -0.1, ..m };
        let vi = -(m.l_i * m.theta_i.cos() + m.l_q * m.theta_q.sin());
        let vq = m.l_i * m.theta_i.sin() - m.l_q * m.theta_q.cos();
        assert!(carrier_leakage_amplitude(&m, vi, vq) < 1e-16);
        assert_eq!(m.lo_optimum(), (vi, vq));
    }

    #[test]
    fn image_amplitude_examples() {
        let m = IqMixerModel { alpha_tilde: 1.07, phi_tilde: 0.12, ..IqMixerModel::ideal() };
        assert_eq!(image_amplitude(&m, 1.07, 0.12).unwrap(), 0.0);
        assert!((image_amplitude(&m, 1.07, 0.12 + PI).unwrap() - 1.0).abs() < 1e-15);
        let m = IqMixerModel { alpha_tilde: 1.05, ..IqMixerModel::ideal() };
        assert!((image_amplitude(&m, 1.0, 0.0).unwrap() - 0.025).abs() < 1e-15);
        assert!(image_amplitude(&m, 0.0, 0.0).is_err());
        assert!(image_amplitude(&m, -1.0, 0.0).is_err());
    }

    #[test]
    fn measured_carrier_matches_closed_form() {
        let model = IqMixerModel {
            l_i: 0.004,
            theta_i: 0.3,
            l_q: 0.003,
            theta_q: -0.5,
            ..IqMixerModel::ideal()
        };
        let comp = CompensationParams { v_i_dc: 0.001, v_q_dc: -0.002, ..CompensationParams::identity() };
        let zero = SampledWaveform::zeros(40_000, FS, 0.0).unwrap();
        let out = iq_mix(&model, &comp, &zero, &zero, &ToneSpec::lo(F_LO)).unwrap();
        let s = power_spectrum(&out, Window::Flattop, 1e6).unwrap();
        let want = carrier_leakage_amplitude(&model, comp.v_i_dc, comp.v_q_dc);
        assert!((20.0 * (s.amplitude_at(F_LO) / want).log10()).abs() < 0.1);
    }

    #[test]
    fn serialization_uses_flat_si_names() {
        let m = IqMixerModel { l_i: 0.01, ..IqMixerModel::ideal() };
        let v = serde_json::to_value(&m).unwrap();
        for key in ["l_i_v", "theta_i_rad", "l_q_v", "theta_q_rad", "alpha_tilde", "phi_tilde_rad"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        let back: IqMixerModel = serde_json::from_value(v).unwrap();
        assert_eq!(back, m);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn image_peak_ratio_tracks_closed_form(
            at in 0.8f64..1.2, pt in -0.3f64..0.3, a in 0.8f64..1.2, p in -0.3f64..0.3,
        ) {
            let model = IqMixerModel { alpha_tilde: at, phi_tilde: pt, ..IqMixerModel::ideal() };
            let comp = CompensationParams { alpha: a, phi: p, ..CompensationParams::identity() };
            let want = image_amplitude(&model, a, p).unwrap();
            prop_assume!(want > 1e-9);
            let got = image_ratio(&model, &comp, 0.1);
            prop_assert!((20.0 * (got / want).log10()).abs() < 0.1);
        }
    }
}
