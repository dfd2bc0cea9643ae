//! Calibration sweeps and fits, SFDR and spur analysis, temperature drift and
//! phase-noise limited Ramsey infidelity.

mod drift;
mod phase_noise;
mod sfdr;
mod surface;

pub use drift::{simulate_temperature_step, step_profile, DriftModel, DriftPoint};
pub use phase_noise::{ramsey_infidelity, PhaseNoiseProfile, RamseyEstimate};
pub use sfdr::{compute_sfdr, spur_power_scaling, SfdrResult, SpurScaling};
pub use surface::{
    fit_image, fit_lo_leakage, linspace, sweep_image, sweep_lo_leakage, CalKind, CalResult, CalSurface,
};
