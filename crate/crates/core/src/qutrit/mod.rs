//! Driven three-level transmon with Lindblad decoherence and a
//! randomized-benchmarking harness. Times are in nanoseconds and rates in
//! rad/ns unless a name says otherwise.

mod clifford;
mod gates;
mod model;
mod rb;

pub use clifford::{
    clifford_group, clifford_sequence, find_clifford, mean_pulses_per_clifford, recovery, rotation_of,
    rotation_unitary, Clifford, PhysicalPulse, U2,
};
pub use gates::{calibrate_pulse, subspace_fidelity, DecompositionMode, GatePulse, PulseConfig, PulseLibrary, Spur};
pub use model::{
    apply_superop, propagate, superoperator, unitary, Drive, DriveSample, Idle, QutritState, SampledDrive, Superop,
    TransmonParams, C3,
};
pub use rb::{
    coherence_limit, fit_leakage, fit_rb_decay, leakage_model, means, run_rb, LeakageFit, RbFit, RbResult, RbSample,
    RbSpec,
};
