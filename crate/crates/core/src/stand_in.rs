//! Default device models. The mixer nonlinearity, leakage, imbalance and drift
//! values are stand-ins chosen so that the simulated chains show realistic
//! spur levels; they are not measured properties of any particular device.

use num_complex::Complex64;

use crate::calib::DriftModel;
use crate::chains::{Chain, DoubleChainConfig, IqChainConfig, DOUBLE_DEFAULT_DAC_AMPLITUDE, IQ_DEFAULT_IF_AMPLITUDE};
use crate::mixers::{CompensationParams, IqMixerModel, RfMixerModel};

/// Level of the `f_LO + 2 f_IF` spur of the default IQ mixer at 0 dBm output.
pub const IQ_SPUR_2IF_DBC: f64 = -52.0;
/// Level of the `f_LO - 3 f_IF` spur of the default IQ mixer at 0 dBm output.
pub const IQ_SPUR_3IF_DBC: f64 = -65.0;
/// Carrier and image left over by the default calibration.
pub const CALIBRATED_RESIDUAL_DBC: f64 = -70.0;

fn db(x: f64) -> f64 {
    10f64.powf(x / 20.0)
}

/// IF polynomial of each IQ-mixer path.
///
/// The quadratic term, together with the equal `v_I v_Q` cross coupling,
/// puts the upper `f_LO + 2 f_IF` spur a factor `sqrt 5` above the lower one,
/// with amplitude `c2 A^2 sqrt(5) / 4` for drive amplitude `A`.
pub fn iq_path_model() -> RfMixerModel {
    let a = IQ_DEFAULT_IF_AMPLITUDE;
    let c2 = 4.0 * db(IQ_SPUR_2IF_DBC) / (5f64.sqrt() * a);
    let c3 = 4.0 * db(IQ_SPUR_3IF_DBC) / (a * a);
    RfMixerModel {
        conversion_gain_db: 0.0,
        if_poly: vec![1.0, c2, c3],
        lo_harmonics: Vec::new(),
        ac_coupled_products: true,
    }
}

pub fn iq_mixer() -> IqMixerModel {
    let path = iq_path_model();
    let c2 = path.if_poly[1];
    IqMixerModel {
        path_i: path.clone(),
        path_q: path,
        l_i: 0.004,
        theta_i: 0.3,
        l_q: 0.003,
        theta_q: -0.5,
        alpha_tilde: 1.03,
        phi_tilde: 0.04,
        iq_cross: c2,
    }
}

pub fn iq_drift() -> DriftModel {
    DriftModel {
        d_alpha_tilde_per_k: 3.2e-4,
        d_phi_tilde_rad_per_k: 1e-4,
        d_l_i_v_per_k: 4.5e-6,
        d_l_q_v_per_k: 4.5e-6,
        d_theta_i_rad_per_k: 0.0,
        d_theta_q_rad_per_k: 0.0,
        d_gain_db_per_k: -0.01,
        thermal_time_constant_s: 300.0,
    }
}

pub fn double_drift() -> DriftModel {
    DriftModel { d_gain_db_per_k: -0.01, ..DriftModel::zero(300.0) }
}

/// Compensation that leaves carrier and image at `residual_dbc` below a drive of
/// amplitude `amplitude`, with the residuals pointing along the direction in
/// which `drift` moves the mixer, so a warming mixer degrades monotonically.
pub fn calibrated_comp(model: &IqMixerModel, drift: &DriftModel, amplitude: f64, residual_dbc: f64) -> CompensationParams {
    let r = db(residual_dbc);
    let dc = Complex64::from_polar(drift.d_l_i_v_per_k, model.theta_i)
        + Complex64::i() * model.l_i * drift.d_theta_i_rad_per_k * Complex64::from_polar(1.0, model.theta_i)
        - Complex64::i() * Complex64::from_polar(drift.d_l_q_v_per_k, model.theta_q)
        + model.l_q * drift.d_theta_q_rad_per_k * Complex64::from_polar(1.0, model.theta_q);
    let dir = if dc.norm() > 0.0 { dc / dc.norm() } else { Complex64::new(1.0, 0.0) };
    // carrier = |V_I - i V_Q + c|; choose V_I - i V_Q = -c + k dir
    let v = -model.leakage_phasor() + amplitude * r * dir;

    let dz = Complex64::new(drift.d_alpha_tilde_per_k / model.alpha_tilde, drift.d_phi_tilde_rad_per_k);
    let uz = if dz.norm() > 0.0 { dz / dz.norm() } else { Complex64::new(1.0, 0.0) };
    let z0 = Complex64::new(1.0, 0.0) + 2.0 * r * uz;
    CompensationParams {
        v_i_dc: v.re,
        v_q_dc: -v.im,
        alpha: model.alpha_tilde / z0.norm(),
        phi: model.phi_tilde - z0.arg(),
    }
}

pub fn iq_chain_config_uncalibrated() -> IqChainConfig {
    IqChainConfig { mixer: iq_mixer(), ..IqChainConfig::default() }
}

pub fn iq_chain_config_calibrated() -> IqChainConfig {
    let mixer = iq_mixer();
    let comp = calibrated_comp(&mixer, &iq_drift(), IQ_DEFAULT_IF_AMPLITUDE, CALIBRATED_RESIDUAL_DBC);
    IqChainConfig { mixer, comp, ..IqChainConfig::default() }
}

pub fn iq_chain(config: IqChainConfig) -> Chain {
    Chain::Iq { config, f_if_hz: 100e6, drive_amplitude: IQ_DEFAULT_IF_AMPLITUDE }
}

pub fn double_chain() -> Chain {
    Chain::Double {
        config: DoubleChainConfig::default(),
        target_hz: 6e9,
        drive_amplitude: DOUBLE_DEFAULT_DAC_AMPLITUDE,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixers::{carrier_leakage_amplitude, image_amplitude};

    #[test]
    fn calibrated_residuals_sit_at_target() {
        let m = iq_mixer();
        let c = calibrated_comp(&m, &iq_drift(), 0.03, -70.0);
        let lo = carrier_leakage_amplitude(&m, c.v_i_dc, c.v_q_dc) / 0.03;
        assert!((20.0 * lo.log10() + 70.0).abs() < 1e-9);
        let im = image_amplitude(&m, c.alpha, c.phi).unwrap();
        assert!((20.0 * im.log10() + 70.0).abs() < 1e-9);
    }

    #[test]
    fn calibrated_chain_spectrum_levels() {
        let chain = iq_chain(iq_chain_config_calibrated());
        let run = chain.run().unwrap();
        assert!(run.fundamental().power_dbm.abs() < 0.05);
        let lo = run.dbc_at(5.9e9);
        let image = run.dbc_at(5.8e9);
        let usb2 = run.dbc_at(6.1e9);
        let lsb2 = run.dbc_at(5.7e9);
        assert!((lo + 70.0).abs() < 0.3, "lo {lo}");
        assert!((image + 70.0).abs() < 2.0, "image {image}");
        assert!((usb2 + 52.0).abs() < 0.6, "usb {usb2}");
        assert!(lsb2 < usb2 - 5.0, "lsb {lsb2}");
        assert!((run.dbc_at(5.6e9) + 65.0).abs() < 0.3);
    }
}
