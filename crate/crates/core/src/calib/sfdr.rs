use serde::{Deserialize, Serialize};

use crate::chains::Chain;
use crate::error::{Error, Result};
use crate::fit::linear_fit;
use crate::signal::{dbm_to_amplitude, Peak, Spectrum};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SfdrResult {
    pub sfdr_db: f64,
    pub fundamental: Peak,
    pub limiting_spur: Option<Peak>,
    /// No spur rose above the detection floor; `sfdr_db` is then the floor.
    pub floor_limited: bool,
}

/// Fundamental power minus the strongest other local maximum. Peaks within
/// the window's main lobe (at least one RBW) of the fundamental are ignored,
/// and only peaks above `floor_dbc` relative to the fundamental count.
pub fn compute_sfdr(spec: &Spectrum, fundamental: f64, floor_dbc: f64) -> Result<SfdrResult> {
    let half = spec.window.mainlobe_half_width().max(1);
    let fund = spec.peak_near(fundamental, half);
    let k = spec.bin_of(fund.freq_hz);
    let is_local_max = (k == 0 || spec.power_dbm[k - 1] <= fund.power_dbm)
        && (k + 1 == spec.len() || spec.power_dbm[k + 1] <= fund.power_dbm);
    if !is_local_max || fund.power_dbm <= crate::signal::watts_to_dbm(0.0) + 1.0 {
        return Err(Error::Analysis(format!("no fundamental peak near {fundamental} Hz")));
    }
    let exclusion = (half as f64 * spec.rbw).max(spec.rbw) + 0.5 * spec.rbw;
    let floor = fund.power_dbm + floor_dbc;
    let spur = spec
        .peaks(floor)
        .into_iter()
        .filter(|p| (p.freq_hz - fund.freq_hz).abs() > exclusion)
        .max_by(|a, b| a.power_dbm.total_cmp(&b.power_dbm));
    Ok(match spur {
        Some(s) => SfdrResult {
            sfdr_db: fund.power_dbm - s.power_dbm,
            fundamental: fund,
            limiting_spur: Some(s),
            floor_limited: false,
        },
        None => SfdrResult { sfdr_db: -floor_dbc, fundamental: fund, limiting_spur: None, floor_limited: true },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpurScaling {
    pub spur_hz: f64,
    /// dB of spur power per dB of drive power.
    pub slope: f64,
    pub intercept_dbm: f64,
    /// `(drive power, spur power)` in dBm.
    pub points: Vec<(f64, f64)>,
}

/// Sweeps the drive power of `chain` through `p_if_sweep` (dBm of the drive
/// amplitude) and fits the spur power at `spur_freq` against it in dB.
pub fn spur_power_scaling(chain: &Chain, spur_freq: f64, p_if_sweep: &[f64]) -> Result<SpurScaling> {
    if p_if_sweep.len() < 2 {
        return Err(Error::Analysis("spur scaling needs at least two drive powers".into()));
    }
    let floor_dbc = chain.peak_floor_dbc();
    let mut points = Vec::with_capacity(p_if_sweep.len());
    for &p in p_if_sweep {
        let run = chain.run_cw(dbm_to_amplitude(p))?;
        let top = run.spectrum.max_power();
        let spur = run.spectrum.peak_near(spur_freq, 1);
        let k = run.spectrum.bin_of(spur.freq_hz);
        let s = &run.spectrum.power_dbm;
        let local = (k == 0 || s[k - 1] <= spur.power_dbm) && (k + 1 == s.len() || s[k + 1] <= spur.power_dbm);
        if !local || spur.power_dbm < top + floor_dbc {
            return Err(Error::Analysis(format!(
                "spur at {spur_freq} Hz is below the detection floor at drive {p} dBm"
            )));
        }
        points.push((p, spur.power_dbm));
    }
    let (slope, intercept_dbm) = linear_fit(&points);
    Ok(SpurScaling { spur_hz: spur_freq, slope, intercept_dbm, points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::Spectrum;

    fn two_peak() -> Spectrum {
        let f: Vec<f64> = (0..100).map(|k| k as f64 * 1e6).collect();
        let mut p = vec![-150.0; 100];
        p[50] = 0.0;
        p[70] = -52.0;
        Spectrum::from_bins(f, p).unwrap()
    }

    #[test]
    fn sfdr_definition() {
        let r = compute_sfdr(&two_peak(), 50e6, -100.0).unwrap();
        assert_eq!(r.sfdr_db, 52.0);
        assert_eq!(r.limiting_spur.unwrap().freq_hz, 70e6);
        assert!(!r.floor_limited);
    }

    #[test]
    fn sfdr_is_offset_invariant() {
        let s = two_peak();
        let a = compute_sfdr(&s, 50e6, -100.0).unwrap().sfdr_db;
        let b = compute_sfdr(&s.offset(-13.7), 50e6, -100.0).unwrap().sfdr_db;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn single_tone_is_floor_limited() {
        let mut s = two_peak();
        s.power_dbm[70] = -150.0;
        let r = compute_sfdr(&s, 50e6, -100.0).unwrap();
        assert!(r.floor_limited);
        assert_eq!(r.sfdr_db, 100.0);
    }

    #[test]
    fn missing_fundamental_is_an_error() {
        let s = Spectrum::from_bins(vec![0.0, 1.0, 2.0], vec![-300.0; 3]).unwrap();
        assert!(compute_sfdr(&s, 1.0, -100.0).is_err());
    }
}
