use std::f64::consts::PI;

use nalgebra::{Matrix3, SMatrix, SVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};

pub type C3 = Matrix3<Complex64>;
pub type Superop = SMatrix<Complex64, 9, 9>;
type Vec9 = SVector<Complex64, 9>;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Transmon parameters in laboratory units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransmonParams {
    pub qubit_freq_ghz: f64,
    pub anharmonicity_mhz: f64,
    pub t1_us: f64,
    pub t2_star_us: f64,
    pub t2_echo_us: f64,
    pub thermal_population: f64,
}

impl Default for TransmonParams {
    fn default() -> Self {
        Self {
            qubit_freq_ghz: 6.143,
            anharmonicity_mhz: -178.0,
            t1_us: 23.7,
            t2_star_us: 11.7,
            t2_echo_us: 16.6,
            thermal_population: 0.036,
        }
    }
}

impl TransmonParams {
    /// Same qubit without decoherence.
    pub fn coherent(&self) -> Self {
        Self { t1_us: f64::INFINITY, t2_star_us: f64::INFINITY, t2_echo_us: f64::INFINITY, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let times = [self.t1_us, self.t2_star_us, self.t2_echo_us];
        if times.iter().any(|t| !(*t > 0.0)) {
            return param("coherence times must be positive");
        }
        if self.t2_echo_us > 2.0 * self.t1_us * (1.0 + 1e-12) {
            return param("T2 echo cannot exceed 2 T1");
        }
        if !(0.0..1.0).contains(&self.thermal_population) {
            return param("thermal population must lie in [0, 1)");
        }
        if self.anharmonicity_mhz == 0.0 || !self.anharmonicity_mhz.is_finite() {
            return param("anharmonicity must be finite and non-zero");
        }
        Ok(())
    }

    /// Angular anharmonicity in rad/ns.
    pub fn alpha(&self) -> f64 {
        2.0 * PI * self.anharmonicity_mhz * 1e-3
    }

    pub fn t1_ns(&self) -> f64 {
        self.t1_us * 1e3
    }

    pub fn t2e_ns(&self) -> f64 {
        self.t2_echo_us * 1e3
    }

    /// Pure-dephasing rate `1/T2e - 1/(2 T1)` in 1/ns.
    pub fn gamma_phi(&self) -> f64 {
        (1.0 / self.t2e_ns() - 0.5 / self.t1_ns()).max(0.0)
    }
}

/// Three-level density matrix in the `{g, e, f}` basis.
#[derive(Debug, Clone, PartialEq)]
pub struct QutritState {
    pub rho: C3,
}

impl QutritState {
    pub fn new(rho: C3) -> Result<Self> {
        let s = Self { rho };
        s.check(1e-9)?;
        Ok(s)
    }

    pub fn basis(k: usize) -> Self {
        let mut rho = C3::zeros();
        rho[(k, k)] = ONE;
        Self { rho }
    }

    pub fn ground() -> Self {
        Self::basis(0)
    }

    /// Diagonal state with population `p_th` in `|e>`.
    pub fn thermal(p_th: f64) -> Self {
        let mut rho = C3::zeros();
        rho[(0, 0)] = Complex64::new(1.0 - p_th, 0.0);
        rho[(1, 1)] = Complex64::new(p_th, 0.0);
        Self { rho }
    }

    pub fn pure(psi: [Complex64; 3]) -> Self {
        let v = nalgebra::Vector3::from_column_slice(&psi);
        let n = v.norm();
        let v = v / Complex64::new(n, 0.0);
        Self { rho: v * v.adjoint() }
    }

    pub fn populations(&self) -> [f64; 3] {
        [self.rho[(0, 0)].re, self.rho[(1, 1)].re, self.rho[(2, 2)].re]
    }

    /// Checks trace, Hermiticity and positivity to `tol`.
    pub fn check(&self, tol: f64) -> Result<()> {
        let tr = self.rho.trace();
        if (tr.re - 1.0).abs() > tol || tr.im.abs() > tol {
            return Err(Error::Contract(format!("density matrix trace {tr}")));
        }
        let herm = (self.rho - self.rho.adjoint()).norm();
        if herm > tol {
            return Err(Error::Contract(format!("density matrix not Hermitian ({herm:.2e})")));
        }
        let h = (self.rho + self.rho.adjoint()) * Complex64::new(0.5, 0.0);
        let eig = h.map(|c| c.re).symmetric_eigenvalues();
        // the real part carries the spectrum only when rho is real; fall back
        // to principal minors otherwise
        let min_eig = if h.iter().all(|c| c.im.abs() < 1e-15) {
            eig.min()
        } else {
            min_eigenvalue_hermitian(&h)
        };
        if min_eig < -tol {
            return Err(Error::Contract(format!("density matrix has eigenvalue {min_eig:.3e}")));
        }
        Ok(())
    }
}

/// Smallest eigenvalue of a complex Hermitian 3x3 via its real 6x6 embedding.
fn min_eigenvalue_hermitian(h: &C3) -> f64 {
    let mut m = SMatrix::<f64, 6, 6>::zeros();
    for i in 0..3 {
        for j in 0..3 {
            let c = h[(i, j)];
            m[(i, j)] = c.re;
            m[(i + 3, j + 3)] = c.re;
            m[(i, j + 3)] = -c.im;
            m[(i + 3, j)] = c.im;
        }
    }
    m.symmetric_eigenvalues().min()
}

/// Instantaneous drive in the frame rotating at the drive frequency:
/// complex Rabi rate `eps = Omega_I + i Omega_Q` (rad/ns) and qubit detuning
/// from the drive (rad/ns).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriveSample {
    pub eps: Complex64,
    pub detuning: f64,
}

impl DriveSample {
    pub const IDLE: Self = Self { eps: ZERO, detuning: 0.0 };
}

pub(crate) fn lowering() -> C3 {
    let mut a = C3::zeros();
    a[(0, 1)] = ONE;
    a[(1, 2)] = Complex64::new(2f64.sqrt(), 0.0);
    a
}

fn number() -> C3 {
    C3::from_diagonal(&nalgebra::Vector3::new(ZERO, ONE, Complex64::new(2.0, 0.0)))
}

/// `H = D |e><e| + (2D + alpha)|f><f| + (eps a^dag + eps^* a) / 2`.
pub(crate) fn hamiltonian(alpha: f64, d: DriveSample) -> C3 {
    let a = lowering();
    let mut h = (a.adjoint() * d.eps + a * d.eps.conj()) * Complex64::new(0.5, 0.0);
    h[(1, 1)] += Complex64::new(d.detuning, 0.0);
    h[(2, 2)] += Complex64::new(2.0 * d.detuning + alpha, 0.0);
    h
}

/// Collapse operators for relaxation and pure dephasing.
pub(crate) fn collapse_ops(p: &TransmonParams) -> Vec<C3> {
    let mut ops = Vec::new();
    let g1 = 1.0 / p.t1_ns();
    if g1 > 0.0 && g1.is_finite() {
        ops.push(lowering() * Complex64::new(g1.sqrt(), 0.0));
    }
    let gphi = p.gamma_phi();
    if gphi > 0.0 && gphi.is_finite() {
        ops.push(number() * Complex64::new((2.0 * gphi).sqrt(), 0.0));
    }
    ops
}

/// Moves an operator into the frame rotating with the static anharmonic
/// term, `X_ij -> exp(i (E_i - E_j) t) X_ij` with `E = (0, 0, alpha)`.
fn to_frame(x: &C3, alpha: f64, t: f64) -> C3 {
    let ph = Complex64::from_polar(1.0, alpha * t);
    let mut y = *x;
    for i in 0..2 {
        y[(2, i)] *= ph;
        y[(i, 2)] *= ph.conj();
    }
    y
}

struct Lindblad {
    ops: Vec<C3>,
    /// `sum L^dag L / 2`, diagonal, so unchanged by the frame.
    damp: C3,
    alpha: f64,
}

impl Lindblad {
    fn new(p: &TransmonParams) -> Self {
        let ops = collapse_ops(p);
        let damp = ops.iter().fold(C3::zeros(), |acc, l| acc + l.adjoint() * l) * Complex64::new(0.5, 0.0);
        Self { ops, damp, alpha: p.alpha() }
    }

    /// Lindblad generator in the anharmonic frame.
    fn deriv(&self, rho: &C3, t: f64, d: DriveSample) -> C3 {
        let h = to_frame(&hamiltonian(0.0, d), self.alpha, t);
        let i = Complex64::i();
        let mut out = (h * rho - rho * h) * (-i);
        for l in &self.ops {
            let l = to_frame(l, self.alpha, t);
            out += l * rho * l.adjoint();
        }
        out -= self.damp * rho + rho * self.damp;
        out
    }
}

/// Time-dependent drive over `[0, duration_ns]`.
pub trait Drive {
    fn duration_ns(&self) -> f64;
    fn sample(&self, t_ns: f64) -> DriveSample;
}

fn steps(duration: f64, dt: f64) -> Result<(usize, f64)> {
    if !(dt > 0.0) {
        return param("time step must be positive");
    }
    if duration < 0.0 {
        return param("negative drive duration");
    }
    let n = (duration / dt).round().max(if duration > 0.0 { 1.0 } else { 0.0 }) as usize;
    Ok((n, if n > 0 { duration / n as f64 } else { 0.0 }))
}

fn rk4(rho: &C3, t: f64, h: f64, f: &dyn Fn(&C3, f64) -> C3) -> C3 {
    let half = Complex64::new(0.5 * h, 0.0);
    let hh = Complex64::new(h, 0.0);
    let k1 = f(rho, t);
    let k2 = f(&(rho + k1 * half), t + 0.5 * h);
    let k3 = f(&(rho + k2 * half), t + 0.5 * h);
    let k4 = f(&(rho + k3 * hh), t + h);
    rho + (k1 + k2 * Complex64::new(2.0, 0.0) + k3 * Complex64::new(2.0, 0.0) + k4) * Complex64::new(h / 6.0, 0.0)
}

/// Lindblad evolution of `state` under `drive` with fixed-step RK4 of about
/// `dt_ns` (adjusted to divide the duration). The drive is sampled at
/// `t0_ns + t`, so time-dependent spurs keep their absolute phase.
pub fn propagate(state: &QutritState, drive: &dyn Drive, params: &TransmonParams, dt_ns: f64) -> Result<QutritState> {
    state.check(1e-6)?;
    if params.alpha().abs() * dt_ns > 0.5 {
        return param("time step does not resolve the anharmonicity");
    }
    let lb = Lindblad::new(params);
    let (n, h) = steps(drive.duration_ns(), dt_ns)?;
    let mut rho = state.rho;
    let f = |r: &C3, t: f64| lb.deriv(r, t, drive.sample(t));
    for k in 0..n {
        rho = rk4(&rho, k as f64 * h, h, &f);
    }
    Ok(QutritState { rho: to_frame(&rho, lb.alpha, -drive.duration_ns()) })
}

/// Superoperator (column-stacked) of the Lindblad evolution under `drive`.
pub fn superoperator(drive: &dyn Drive, params: &TransmonParams, dt_ns: f64) -> Result<Superop> {
    let lb = Lindblad::new(params);
    let (n, h) = steps(drive.duration_ns(), dt_ns)?;
    let f = |r: &C3, t: f64| lb.deriv(r, t, drive.sample(t));
    let mut s = Superop::zeros();
    for col in 0..9 {
        let mut rho = C3::zeros();
        rho[(col % 3, col / 3)] = ONE;
        for k in 0..n {
            rho = rk4(&rho, k as f64 * h, h, &f);
        }
        let rho = to_frame(&rho, lb.alpha, -drive.duration_ns());
        for r in 0..9 {
            s[(r, col)] = rho[(r % 3, r / 3)];
        }
    }
    Ok(s)
}

pub fn apply_superop(s: &Superop, state: &QutritState) -> QutritState {
    let v = Vec9::from_iterator((0..9).map(|k| state.rho[(k % 3, k / 3)]));
    let w = s * v;
    QutritState { rho: C3::from_fn(|i, j| w[j * 3 + i]) }
}

/// Coherent propagator under `drive`, RK4 on the Schroedinger equation.
pub fn unitary(drive: &dyn Drive, params: &TransmonParams, dt_ns: f64) -> Result<C3> {
    let (n, h) = steps(drive.duration_ns(), dt_ns)?;
    let alpha = params.alpha();
    let i = Complex64::i();
    let f = |u: &C3, t: f64| -> C3 { to_frame(&hamiltonian(0.0, drive.sample(t)), alpha, t) * u * (-i) };
    let mut u = C3::identity();
    for k in 0..n {
        u = rk4(&u, k as f64 * h, h, &f);
    }
    let mut frame = C3::identity();
    frame[(2, 2)] = Complex64::from_polar(1.0, -alpha * drive.duration_ns());
    Ok(frame * u)
}

/// Constant-zero drive of fixed length.
#[derive(Debug, Clone, Copy)]
pub struct Idle(pub f64);

impl Drive for Idle {
    fn duration_ns(&self) -> f64 {
        self.0
    }
    fn sample(&self, _t: f64) -> DriveSample {
        DriveSample::IDLE
    }
}

/// Sampled I/Q Rabi-rate envelopes (rad/ns) with linear interpolation, plus
/// off-resonant tones `(offset in GHz, relative amplitude)` that follow the
/// envelope.
#[derive(Debug, Clone)]
pub struct SampledDrive {
    pub omega_i: Vec<f64>,
    pub omega_q: Vec<f64>,
    pub dt_ns: f64,
    pub tones: Vec<(f64, f64)>,
    pub t0_ns: f64,
}

impl Drive for SampledDrive {
    fn duration_ns(&self) -> f64 {
        (self.omega_i.len().saturating_sub(1)) as f64 * self.dt_ns
    }

    fn sample(&self, t: f64) -> DriveSample {
        let x = (t / self.dt_ns).clamp(0.0, (self.omega_i.len() - 1) as f64);
        let k = (x.floor() as usize).min(self.omega_i.len().saturating_sub(2));
        let frac = x - k as f64;
        let lerp = |v: &[f64]| if v.len() == 1 { v[0] } else { v[k] + frac * (v[k + 1] - v[k]) };
        let base = Complex64::new(lerp(&self.omega_i), lerp(&self.omega_q));
        let spur: Complex64 = self
            .tones
            .iter()
            .map(|&(f, r)| Complex64::from_polar(r, 2.0 * PI * f * (self.t0_ns + t)))
            .sum();
        DriveSample { eps: base * (ONE + spur), detuning: 0.0 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_expm(drive_eps: Complex64, detuning: f64, alpha: f64, t: f64) -> C3 {
        let h = hamiltonian(alpha, DriveSample { eps: drive_eps, detuning });
        (h * Complex64::new(0.0, -t)).exp()
    }

    struct Const(DriveSample, f64);
    impl Drive for Const {
        fn duration_ns(&self) -> f64 {
            self.1
        }
        fn sample(&self, _: f64) -> DriveSample {
            self.0
        }
    }

    #[test]
    fn idle_population_follows_t1() {
        let p = TransmonParams::default();
        let s = propagate(&QutritState::basis(1), &Idle(2000.0), &p, 0.2).unwrap();
        let want = (-2000.0 / p.t1_ns()).exp();
        assert!((s.populations()[1] - want).abs() < 1e-9);
        assert!((s.populations()[0] - (1.0 - want)).abs() < 1e-9);
    }

    #[test]
    fn idle_coherence_follows_t2_echo() {
        let p = TransmonParams::default();
        let h = Complex64::new(1.0, 0.0);
        let plus = QutritState::pure([h, h, ZERO]);
        let t = 1500.0;
        let s = propagate(&plus, &Idle(t), &p, 0.2).unwrap();
        let want = 0.5 * (-t / p.t2e_ns()).exp();
        assert!((s.rho[(0, 1)].norm() - want).abs() < 1e-9);
    }

    #[test]
    fn unitary_matches_matrix_exponential() {
        let p = TransmonParams::default();
        let d = DriveSample { eps: Complex64::new(0.07, -0.03), detuning: 0.01 };
        let want = dense_expm(d.eps, d.detuning, p.alpha(), 40.0);
        let coarse = (unitary(&Const(d, 40.0), &p, 0.1).unwrap() - want).norm();
        let fine = (unitary(&Const(d, 40.0), &p, 0.01).unwrap() - want).norm();
        assert!(coarse < 1e-4, "{coarse}");
        assert!(fine < 1e-8, "{fine}");
        // fourth-order convergence
        assert!(coarse / fine > 5e3);
    }

    #[test]
    fn superoperator_matches_propagate() {
        let p = TransmonParams { t1_us: 0.5, t2_echo_us: 0.6, ..TransmonParams::default() };
        let drive = Const(DriveSample { eps: Complex64::new(0.05, 0.02), detuning: 0.0 }, 30.0);
        let s = superoperator(&drive, &p, 0.1).unwrap();
        let init = QutritState::pure([Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0), Complex64::new(0.3, 0.0)]);
        let a = apply_superop(&s, &init);
        let b = propagate(&init, &drive, &p, 0.1).unwrap();
        assert!((a.rho - b.rho).norm() < 1e-12);
        a.check(1e-9).unwrap();
    }

    #[test]
    fn physicality_is_preserved_under_drive() {
        let p = TransmonParams { t1_us: 0.2, t2_echo_us: 0.1, ..TransmonParams::default() };
        let mut s = QutritState::thermal(0.1);
        let drive = Const(DriveSample { eps: Complex64::new(0.3, 0.1), detuning: 0.05 }, 5.0);
        for _ in 0..40 {
            s = propagate(&s, &drive, &p, 0.1).unwrap();
            s.check(1e-9).unwrap();
        }
    }

    #[test]
    fn non_physical_input_is_rejected() {
        let mut rho = C3::zeros();
        rho[(0, 0)] = Complex64::new(2.0, 0.0);
        assert!(QutritState::new(rho).is_err());
        let bad = QutritState { rho };
        assert!(propagate(&bad, &Idle(1.0), &TransmonParams::default(), 0.1).is_err());
    }

    #[test]
    fn params_validation() {
        let p = TransmonParams { t2_echo_us: 50.0, ..TransmonParams::default() };
        assert!(p.validate().is_err());
        assert!(TransmonParams::default().validate().is_ok());
        assert!((TransmonParams::default().gamma_phi() - (1.0 / 16600.0 - 0.5 / 23700.0)).abs() < 1e-15);
    }
}
