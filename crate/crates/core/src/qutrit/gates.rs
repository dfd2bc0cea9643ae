use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::clifford::{clifford_group, rotation_of, rotation_unitary, PhysicalPulse};
use super::model::{superoperator, unitary, Drive, DriveSample, Superop, TransmonParams, C3};
use crate::error::{param, Result};
use crate::fit::nelder_mead;
use crate::signal::DragShape;

/// How Cliffords are turned into pulses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecompositionMode {
    /// Products of `{I, X, Y, +-X/2, +-Y/2}`, 1.875 pulses per Clifford.
    #[default]
    Standard,
    /// One shaped rotation per Clifford; z components are applied as a
    /// detuning that follows the envelope.
    OnePulse,
}

/// Truncated-Gaussian DRAG pulse settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PulseConfig {
    pub sigma_ns: f64,
    /// Half-length of the pulse in units of sigma.
    pub truncation: f64,
    /// Multiplier on the first-order DRAG coefficient `-1/alpha`.
    pub drag_scale: f64,
    /// Integrator step.
    pub dt_ns: f64,
    /// Tune amplitude and frequency offset of each pulse on the coherent model.
    pub calibrate: bool,
}

impl Default for PulseConfig {
    fn default() -> Self {
        Self { sigma_ns: 10.0, truncation: 2.5, drag_scale: 1.0, dt_ns: 0.1, calibrate: true }
    }
}

impl PulseConfig {
    pub fn validate(&self) -> Result<()> {
        DragShape::new(self.sigma_ns, self.truncation, 1.0, 0.0)?;
        if !(self.dt_ns > 0.0) || self.dt_ns > self.sigma_ns / 4.0 {
            return param("integrator step must be positive and resolve sigma");
        }
        if !self.drag_scale.is_finite() {
            return param("DRAG scale must be finite");
        }
        Ok(())
    }

    pub fn duration_ns(&self) -> f64 {
        2.0 * self.truncation * self.sigma_ns
    }
}

/// Off-resonant tone riding on every pulse, at `offset_mhz` from the drive
/// and `level_dbc` below it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Spur {
    pub offset_mhz: f64,
    pub level_dbc: f64,
}

impl Spur {
    fn tone(&self) -> (f64, f64) {
        (self.offset_mhz * 1e-3, 10f64.powf(self.level_dbc / 20.0))
    }
}

/// A rotation played as one DRAG pulse.
#[derive(Debug, Clone)]
pub struct GatePulse {
    shape: DragShape,
    area: f64,
    pub axis: [f64; 3],
    pub angle: f64,
    pub scale: f64,
    /// Constant qubit-drive detuning during the pulse, rad/ns.
    pub detuning: f64,
    /// Tones `(offset GHz, amplitude ratio)`.
    pub tones: Vec<(f64, f64)>,
    /// Absolute start time, which sets the spur phases.
    pub t0_ns: f64,
}

impl GatePulse {
    pub fn new(axis: [f64; 3], angle: f64, cfg: &PulseConfig, params: &TransmonParams) -> Result<Self> {
        let beta = -cfg.drag_scale / params.alpha();
        let shape = DragShape::new(cfg.sigma_ns, cfg.truncation, 1.0, beta)?;
        Ok(Self { area: shape.area(), shape, axis, angle, scale: 1.0, detuning: 0.0, tones: Vec::new(), t0_ns: 0.0 })
    }

    fn is_idle(&self) -> bool {
        self.angle == 0.0
    }
}

impl Drive for GatePulse {
    fn duration_ns(&self) -> f64 {
        self.shape.duration()
    }

    fn sample(&self, t: f64) -> DriveSample {
        if self.is_idle() {
            return DriveSample::IDLE;
        }
        let f = self.shape.value(t) / self.area;
        let fq = self.shape.quadrature(t) / self.area;
        let th = self.scale * self.angle;
        let xy = Complex64::new(self.axis[0], self.axis[1]) * th;
        let mut eps = xy * Complex64::new(f, fq);
        if !self.tones.is_empty() {
            let spur: Complex64 = self
                .tones
                .iter()
                .map(|&(fr, r)| Complex64::from_polar(r, 2.0 * PI * fr * (self.t0_ns + t)))
                .sum();
            eps += eps * spur;
        }
        DriveSample { eps, detuning: -th * self.axis[2] * f + if f != 0.0 { self.detuning } else { 0.0 } }
    }
}

/// Average gate fidelity of `u` on the qubit subspace against rotation
/// `target`, `(|Tr M|^2 + Tr M M^dag) / 6` with `M = P U_t^dag U P`.
pub fn subspace_fidelity(u: &C3, target: &super::clifford::U2) -> f64 {
    let p = u.fixed_view::<2, 2>(0, 0).into_owned();
    let m = target.adjoint() * p;
    (m.trace().norm_sqr() + (m * m.adjoint()).trace().re) / 6.0
}

/// Tunes amplitude scale and detuning of `pulse` to realize its rotation on
/// the decoherence-free model.
pub fn calibrate_pulse(pulse: &mut GatePulse, params: &TransmonParams, dt_ns: f64) -> Result<f64> {
    let target = rotation_unitary(pulse.axis, pulse.angle);
    if pulse.is_idle() {
        return Ok(subspace_fidelity(&unitary(pulse, params, dt_ns)?, &target));
    }
    let coherent = params.coherent();
    let mut base = pulse.clone();
    base.tones.clear();
    let cost = |x: &[f64]| {
        if (x[0] - 1.0).abs() > 0.5 || x[1].abs() > 0.05 {
            return f64::INFINITY;
        }
        let mut trial = base.clone();
        trial.scale = x[0];
        trial.detuning = x[1];
        match unitary(&trial, &coherent, dt_ns) {
            Ok(u) => 1.0 - subspace_fidelity(&u, &target),
            Err(_) => f64::INFINITY,
        }
    };
    let (x, _) = nelder_mead(cost, &[1.0, 0.0], &[0.02, 0.002], 1e-13, 400);
    pulse.scale = x[0];
    pulse.detuning = x[1];
    let mut check = pulse.clone();
    check.tones.clear();
    Ok(subspace_fidelity(&unitary(&check, &coherent, dt_ns)?, &target))
}

/// Calibrated pulses of one decomposition mode, with cached superoperators
/// when the spur phases repeat from slot to slot.
#[derive(Debug, Clone)]
pub struct PulseLibrary {
    pub mode: DecompositionMode,
    pub pulses: Vec<GatePulse>,
    /// Pulse indices per Clifford.
    pub cliffords: Vec<Vec<usize>>,
    pub slot_ns: f64,
    superops: Option<Vec<Superop>>,
    params: TransmonParams,
    dt_ns: f64,
}

impl PulseLibrary {
    pub fn build(mode: DecompositionMode, cfg: &PulseConfig, params: &TransmonParams, spurs: &[Spur]) -> Result<Self> {
        cfg.validate()?;
        params.validate()?;
        let tones: Vec<(f64, f64)> = spurs.iter().map(Spur::tone).collect();
        let mut pulses = Vec::new();
        let mut cliffords = Vec::new();
        match mode {
            DecompositionMode::Standard => {
                let mut pi = GatePulse::new([1.0, 0.0, 0.0], PI, cfg, params)?;
                let mut half = GatePulse::new([1.0, 0.0, 0.0], PI / 2.0, cfg, params)?;
                if cfg.calibrate {
                    calibrate_pulse(&mut pi, params, cfg.dt_ns)?;
                    calibrate_pulse(&mut half, params, cfg.dt_ns)?;
                }
                for p in PhysicalPulse::ALL {
                    let (axis, angle) = p.rotation();
                    let base = if angle > 2.0 { &pi } else { &half };
                    let mut g = GatePulse::new(axis, angle, cfg, params)?;
                    g.scale = base.scale;
                    g.detuning = base.detuning;
                    pulses.push(g);
                }
                for c in clifford_group() {
                    cliffords.push(
                        c.pulses.iter().map(|p| PhysicalPulse::ALL.iter().position(|q| q == p).unwrap()).collect(),
                    );
                }
            }
            DecompositionMode::OnePulse => {
                for (k, c) in clifford_group().iter().enumerate() {
                    let (axis, angle) = rotation_of(&c.unitary);
                    let mut g = GatePulse::new(axis, if k == 0 { 0.0 } else { angle }, cfg, params)?;
                    if cfg.calibrate {
                        calibrate_pulse(&mut g, params, cfg.dt_ns)?;
                    }
                    pulses.push(g);
                    cliffords.push(vec![k]);
                }
            }
        }
        for p in &mut pulses {
            if !p.is_idle() {
                p.tones = tones.clone();
            }
        }
        let slot_ns = cfg.duration_ns();
        let periodic = tones.iter().all(|&(f, _)| {
            let cycles = f * slot_ns;
            (cycles - cycles.round()).abs() < 1e-9
        });
        let superops = if periodic {
            Some(pulses.iter().map(|p| superoperator(p, params, cfg.dt_ns)).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        Ok(Self { mode, pulses, cliffords, slot_ns, superops, params: params.clone(), dt_ns: cfg.dt_ns })
    }

    pub fn pulses_per_clifford(&self) -> f64 {
        self.cliffords.iter().map(|c| c.len() as f64).sum::<f64>() / self.cliffords.len() as f64
    }

    /// Mean coherent infidelity of the 24 compiled Cliffords on the qubit
    /// subspace, spurs included, each pulse starting at a slot boundary.
    pub fn mean_clifford_infidelity(&self) -> Result<f64> {
        let coherent = self.params.coherent();
        let units: Vec<C3> = self.pulses.iter().map(|p| unitary(p, &coherent, self.dt_ns)).collect::<Result<_>>()?;
        let mut total = 0.0;
        for (c, target) in self.cliffords.iter().zip(clifford_group()) {
            let u = c.iter().fold(C3::identity(), |acc, &k| units[k] * acc);
            total += 1.0 - subspace_fidelity(&u, &target.unitary);
        }
        Ok(total / self.cliffords.len() as f64)
    }

    /// Plays the Clifford sequence on `state`, one pulse per time slot.
    pub fn play(&self, state: &super::model::QutritState, seq: &[usize]) -> Result<super::model::QutritState> {
        let mut s = state.clone();
        let mut slot = 0usize;
        for &c in seq {
            for &p in &self.cliffords[c] {
                s = match &self.superops {
                    Some(ops) => super::model::apply_superop(&ops[p], &s),
                    None => {
                        let mut pulse = self.pulses[p].clone();
                        pulse.t0_ns = slot as f64 * self.slot_ns;
                        super::model::propagate(&s, &pulse, &self.params, self.dt_ns)?
                    }
                };
                slot += 1;
            }
        }
        Ok(s)
    }
}
