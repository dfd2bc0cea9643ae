use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sfdr::compute_sfdr;
use crate::chains::{plan_frequencies, Chain};
use crate::error::{param, Result};

/// Linear temperature coefficients of the mixer parameters with a single
/// first-order thermal lag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftModel {
    pub d_alpha_tilde_per_k: f64,
    pub d_phi_tilde_rad_per_k: f64,
    pub d_l_i_v_per_k: f64,
    pub d_l_q_v_per_k: f64,
    pub d_theta_i_rad_per_k: f64,
    pub d_theta_q_rad_per_k: f64,
    /// Gain change of the analog output stage.
    pub d_gain_db_per_k: f64,
    pub thermal_time_constant_s: f64,
}

impl DriftModel {
    pub fn zero(thermal_time_constant_s: f64) -> Self {
        Self {
            d_alpha_tilde_per_k: 0.0,
            d_phi_tilde_rad_per_k: 0.0,
            d_l_i_v_per_k: 0.0,
            d_l_q_v_per_k: 0.0,
            d_theta_i_rad_per_k: 0.0,
            d_theta_q_rad_per_k: 0.0,
            d_gain_db_per_k: 0.0,
            thermal_time_constant_s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.thermal_time_constant_s > 0.0) {
            return param("thermal time constant must be positive");
        }
        Ok(())
    }

    /// The chain after its hardware warmed by `dt_k` kelvin.
    pub fn apply(&self, chain: &Chain, dt_k: f64) -> Chain {
        let mut c = chain.with_extra_gain(self.d_gain_db_per_k * dt_k);
        if let Chain::Iq { config, .. } = &mut c {
            let m = &mut config.mixer;
            m.alpha_tilde += self.d_alpha_tilde_per_k * dt_k;
            m.phi_tilde += self.d_phi_tilde_rad_per_k * dt_k;
            m.l_i = (m.l_i + self.d_l_i_v_per_k * dt_k).max(0.0);
            m.l_q = (m.l_q + self.d_l_q_v_per_k * dt_k).max(0.0);
            m.theta_i += self.d_theta_i_rad_per_k * dt_k;
            m.theta_q += self.d_theta_q_rad_per_k * dt_k;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftPoint {
    pub time_s: f64,
    pub ambient_c: f64,
    pub hardware_c: f64,
    pub sfdr_db: f64,
    /// Fundamental minus carrier power.
    pub lo_suppression_db: f64,
    /// Fundamental minus image power.
    pub image_suppression_db: f64,
}

/// Ambient profile holding `t0_c` until `t_step`, then `t1_c`, sampled every `dt`.
pub fn step_profile(t_step: f64, t_end: f64, dt: f64, t0_c: f64, t1_c: f64) -> Vec<(f64, f64)> {
    let n = (t_end / dt).round() as usize;
    (0..=n)
        .map(|k| {
            let t = k as f64 * dt;
            (t, if t < t_step { t0_c } else { t1_c })
        })
        .collect()
}

/// Replays an ambient temperature profile. Each ambient sample holds until
/// the next one; the hardware temperature follows with the model's time
/// constant, starting at the first ambient value, which is also the
/// calibration temperature. Compensation parameters stay frozen.
pub fn simulate_temperature_step(chain: &Chain, drift: &DriftModel, profile: &[(f64, f64)]) -> Result<Vec<DriftPoint>> {
    drift.validate()?;
    if profile.is_empty() {
        return param("temperature profile is empty");
    }
    if profile.windows(2).any(|w| w[1].0 < w[0].0) {
        return param("temperature profile must be monotone in time");
    }
    let t_ref = profile[0].1;
    let mut hw = Vec::with_capacity(profile.len());
    let mut temp = t_ref;
    for (k, &(t, amb)) in profile.iter().enumerate() {
        if k > 0 {
            let (t_prev, amb_prev) = profile[k - 1];
            temp = amb_prev + (temp - amb_prev) * (-(t - t_prev) / drift.thermal_time_constant_s).exp();
        }
        hw.push((t, amb, temp));
    }
    let fund = chain.fundamental_hz();
    let (lo_hz, image_hz) = match chain {
        Chain::Iq { config, f_if_hz, .. } => (config.lo.frequency, config.lo.frequency - f_if_hz),
        Chain::Double { config, target_hz, .. } => {
            let p = plan_frequencies(*target_hz, config)?;
            (p.f_lo2_hz, p.image_hz)
        }
    };
    let floor = chain.peak_floor_dbc();
    hw.par_iter()
        .map(|&(time_s, ambient_c, hardware_c)| {
            let run = drift.apply(chain, hardware_c - t_ref).run()?;
            let sfdr = compute_sfdr(&run.spectrum, fund, floor)?;
            let p0 = sfdr.fundamental.power_dbm;
            Ok(DriftPoint {
                time_s,
                ambient_c,
                hardware_c,
                sfdr_db: sfdr.sfdr_db,
                lo_suppression_db: p0 - run.spectrum.power_at(lo_hz),
                image_suppression_db: p0 - run.spectrum.power_at(image_hz),
            })
        })
        .collect()
}
