use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{param, Result};

/// Single-sideband phase noise `L(f)` in dBc/Hz at offsets from the carrier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseNoiseProfile {
    /// `(offset_hz, dbc_per_hz)`, offsets strictly increasing.
    pub points: Vec<(f64, f64)>,
    pub carrier_hz: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RamseyEstimate {
    pub tau_s: f64,
    pub infidelity: f64,
    /// The profile had to be extended beyond its points to cover
    /// `[1/(10 tau), 10/tau]`.
    pub extrapolated: bool,
}

impl PhaseNoiseProfile {
    pub fn new(points: Vec<(f64, f64)>, carrier_hz: f64) -> Result<Self> {
        let p = Self { points, carrier_hz };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return param("phase-noise profile is empty");
        }
        if self.points.iter().any(|&(f, l)| !(f > 0.0) || l.is_nan() || l == f64::INFINITY) {
            return param("phase-noise offsets must be positive and levels finite or -inf");
        }
        if self.points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return param("phase-noise offsets must be strictly increasing");
        }
        Ok(())
    }

    /// `L(f)` interpolated linearly in `log f`, extended along the end
    /// segments outside the tabulated range.
    pub fn level_dbc(&self, f: f64) -> f64 {
        let pts = &self.points;
        if pts.len() == 1 {
            return pts[0].1;
        }
        let k = match pts.iter().position(|&(x, _)| x >= f) {
            Some(0) => 0,
            Some(k) => k - 1,
            None => pts.len() - 2,
        };
        let (f0, l0) = pts[k];
        let (f1, l1) = pts[k + 1];
        if l0 == f64::NEG_INFINITY || l1 == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        let t = (f.ln() - f0.ln()) / (f1.ln() - f0.ln());
        l0 + t * (l1 - l0)
    }

    /// One-sided phase PSD `S_phi(f) = 2 * 10^(L/10)` in rad^2/Hz.
    pub fn s_phi(&self, f: f64) -> f64 {
        2.0 * 10f64.powf(self.level_dbc(f) / 10.0)
    }

    pub fn offset_db(&self, db: f64) -> Self {
        Self { points: self.points.iter().map(|&(f, l)| (f, l + db)).collect(), carrier_hz: self.carrier_hz }
    }
}

fn trapezoid(grid: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    grid.windows(2).map(|w| 0.5 * (w[1] - w[0]) * (f(w[0]) + f(w[1]))).sum()
}

fn log_grid(a: f64, b: f64, per_decade: usize) -> Vec<f64> {
    if b <= a {
        return vec![a];
    }
    let n = ((b / a).log10() * per_decade as f64).ceil().max(1.0) as usize;
    (0..=n).map(|k| a * (b / a).powf(k as f64 / n as f64)).collect()
}

/// First-order Ramsey infidelity from phase noise,
/// `1 - F = (2/3) * integral S_phi(f) sin^2(pi f tau) df`.
///
/// The kernel is integrated exactly up to `100/tau`; beyond that the
/// oscillating `sin^2` is replaced by its mean of one half.
pub fn ramsey_infidelity(profile: &PhaseNoiseProfile, tau: f64) -> Result<RamseyEstimate> {
    profile.validate()?;
    if !(tau > 0.0) {
        return param("Ramsey delay must be positive");
    }
    let f_first = profile.points[0].0;
    let f_last = profile.points[profile.points.len() - 1].0;
    let need_lo = 0.1 / tau;
    let need_hi = 10.0 / tau;
    let extrapolated = f_first > need_lo || f_last < need_hi;
    let a = f_first.min(need_lo);
    let b = f_last.max(need_hi);
    let osc_end = (100.0 / tau).min(b);
    let kernel = |f: f64| {
        let s = (PI * f * tau).sin();
        profile.s_phi(f) * s * s
    };

    let mut total = 0.0;
    let knee = (1.0 / tau).min(osc_end);
    if a < knee {
        total += trapezoid(&log_grid(a, knee, 400), kernel);
    }
    let start = a.max(knee);
    if start < osc_end {
        let n = (((osc_end - start) * tau) * 64.0).ceil().max(1.0) as usize;
        let lin: Vec<f64> = (0..=n).map(|k| start + (osc_end - start) * k as f64 / n as f64).collect();
        total += trapezoid(&lin, kernel);
    }
    if b > osc_end {
        total += trapezoid(&log_grid(osc_end.max(a), b, 400), |f| 0.5 * profile.s_phi(f));
    }
    Ok(RamseyEstimate { tau_s: tau, infidelity: 2.0 / 3.0 * total, extrapolated })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn falling() -> PhaseNoiseProfile {
        PhaseNoiseProfile::new(vec![(1e2, -80.0), (1e4, -110.0), (1e6, -130.0), (1e8, -150.0)], 6e9).unwrap()
    }

    #[test]
    fn zero_noise_gives_zero() {
        let p = PhaseNoiseProfile::new(vec![(1e3, f64::NEG_INFINITY), (1e7, f64::NEG_INFINITY)], 6e9).unwrap();
        assert_eq!(ramsey_infidelity(&p, 1e-6).unwrap().infidelity, 0.0);
    }

    #[test]
    fn halving_psd_halves_infidelity() {
        let p = falling();
        let a = ramsey_infidelity(&p, 2e-6).unwrap().infidelity;
        let b = ramsey_infidelity(&p.offset_db(-10.0 * 2f64.log10()), 2e-6).unwrap().infidelity;
        assert!((b / a - 0.5).abs() < 1e-12);
    }

    #[test]
    fn falling_profile_is_monotone_in_delay() {
        let p = falling();
        let mut last = 0.0;
        for k in 0..20 {
            let tau = 1e-7 * 1.4f64.powi(k);
            let v = ramsey_infidelity(&p, tau).unwrap().infidelity;
            assert!(v >= last, "tau {tau}");
            last = v;
        }
    }

    #[test]
    fn white_phase_noise_matches_closed_form() {
        // For flat S the mean of sin^2 is 1/2, so the integral is S * (b - a) / 2
        // to within the oscillating remainder.
        let p = PhaseNoiseProfile::new(vec![(1e3, -120.0), (1e8, -120.0)], 6e9).unwrap();
        let tau = 1e-6;
        let got = ramsey_infidelity(&p, tau).unwrap();
        let s = 2.0 * 1e-12;
        let want = 2.0 / 3.0 * s * 0.5 * (1e8 - 1e3);
        assert!((got.infidelity / want - 1.0).abs() < 1e-4);
        assert!(!got.extrapolated);
    }

    #[test]
    fn extrapolation_is_flagged() {
        let p = PhaseNoiseProfile::new(vec![(1e5, -100.0), (1e6, -120.0)], 6e9).unwrap();
        assert!(ramsey_infidelity(&p, 1e-6).unwrap().extrapolated);
        assert!((p.level_dbc(1e7) + 140.0).abs() < 1e-9);
    }

    #[test]
    fn invalid_profiles_rejected() {
        assert!(PhaseNoiseProfile::new(vec![], 1.0).is_err());
        assert!(PhaseNoiseProfile::new(vec![(2.0, -1.0), (1.0, -1.0)], 1.0).is_err());
        assert!(ramsey_infidelity(&falling(), 0.0).is_err());
    }
}
