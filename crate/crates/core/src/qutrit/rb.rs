use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::clifford::clifford_sequence;
use super::gates::{DecompositionMode, PulseConfig, PulseLibrary, Spur};
use super::model::{QutritState, TransmonParams};
use crate::error::{param, Error, Result};
use crate::fit::{levenberg_marquardt, LmOptions};

/// Randomized-benchmarking experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RbSpec {
    pub lengths: Vec<usize>,
    pub seeds_per_length: usize,
    #[serde(default)]
    pub mode: DecompositionMode,
    #[serde(default)]
    pub pulse: PulseConfig,
    #[serde(default)]
    pub distortion: Vec<Spur>,
    /// Start from pure `|g>` instead of the thermal mixture.
    #[serde(default)]
    pub preselected: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: usize,
}

fn default_bootstrap() -> usize {
    200
}

impl RbSpec {
    pub fn new(lengths: Vec<usize>, seeds_per_length: usize) -> Self {
        Self {
            lengths,
            seeds_per_length,
            mode: DecompositionMode::Standard,
            pulse: PulseConfig::default(),
            distortion: Vec::new(),
            preselected: false,
            seed: 0,
            bootstrap: default_bootstrap(),
        }
    }
}

/// Final populations of one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RbSample {
    pub length: usize,
    pub seed_index: usize,
    pub p_g: f64,
    pub p_e: f64,
    pub p_f: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RbFit {
    pub a: f64,
    pub p: f64,
    pub b: f64,
    pub error_per_clifford: f64,
    /// Bootstrap standard deviation of the error per Clifford.
    pub uncertainty: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeakageFit {
    pub p_up: f64,
    pub p_down: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbResult {
    pub lengths: Vec<usize>,
    pub p_g: Vec<f64>,
    pub p_f: Vec<f64>,
    pub fit: RbFit,
    pub error_per_clifford: f64,
    pub uncertainty: f64,
    pub mode: DecompositionMode,
    pub pulses_per_clifford: f64,
    pub clifford_duration_ns: f64,
    pub leakage: Option<LeakageFit>,
    pub samples: Vec<RbSample>,
}

// Lengths share the seed's Clifford stream, so shorter sequences are
// prefixes of longer ones.
fn sequence_seed(base: u64, seed_index: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ seed_index as u64
}

/// Runs RB sequences and fits the ground-state return probability.
///
/// `assignment` is an optional readout confusion matrix with rows
/// `P(assigned j | state i)`; without it the exact populations are used.
pub fn run_rb(spec: &RbSpec, params: &TransmonParams, assignment: Option<&[[f64; 3]; 3]>) -> Result<RbResult> {
    if spec.lengths.is_empty() || spec.seeds_per_length == 0 {
        return param("RB needs at least one length and one seed");
    }
    if let Some(m) = assignment {
        if m.iter().any(|row| (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 || row.iter().any(|&x| x < 0.0)) {
            return param("assignment matrix rows must be probability vectors");
        }
    }
    let lib = PulseLibrary::build(spec.mode, &spec.pulse, params, &spec.distortion)?;
    let init = if spec.preselected { QutritState::ground() } else { QutritState::thermal(params.thermal_population) };

    let jobs: Vec<(usize, usize)> =
        spec.lengths.iter().flat_map(|&n| (0..spec.seeds_per_length).map(move |s| (n, s))).collect();
    let samples: Vec<RbSample> = jobs
        .par_iter()
        .map(|&(n, s)| {
            let seq = clifford_sequence(n, sequence_seed(spec.seed, s));
            let out = lib.play(&init, &seq)?;
            let pop = out.populations();
            let meas = match assignment {
                Some(m) => {
                    let mut v = [0.0; 3];
                    for (i, &pi) in pop.iter().enumerate() {
                        for j in 0..3 {
                            v[j] += pi * m[i][j];
                        }
                    }
                    v
                }
                None => pop,
            };
            let clamp = |x: f64| x.clamp(0.0, 1.0);
            Ok(RbSample { length: n, seed_index: s, p_g: clamp(meas[0]), p_e: clamp(meas[1]), p_f: clamp(meas[2]) })
        })
        .collect::<Result<_>>()?;

    let (lengths, p_g, p_f) = means(&samples);
    let fit = fit_rb_decay(&samples, spec.bootstrap, spec.seed)?;
    let leakage = if lengths.len() >= 3 && p_f.iter().any(|&x| x > 0.0) {
        let xs: Vec<f64> = lengths.iter().map(|&n| n as f64).collect();
        fit_leakage(&xs, &p_f).ok()
    } else {
        None
    };
    Ok(RbResult {
        lengths,
        p_g,
        p_f,
        fit,
        error_per_clifford: fit.error_per_clifford,
        uncertainty: fit.uncertainty,
        mode: spec.mode,
        pulses_per_clifford: lib.pulses_per_clifford(),
        clifford_duration_ns: lib.pulses_per_clifford() * lib.slot_ns,
        leakage,
        samples,
    })
}

/// Per-length means of `P_g` and `P_f`, lengths ascending.
pub fn means(samples: &[RbSample]) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let mut lengths: Vec<usize> = samples.iter().map(|s| s.length).collect();
    lengths.sort_unstable();
    lengths.dedup();
    let mut g = Vec::with_capacity(lengths.len());
    let mut f = Vec::with_capacity(lengths.len());
    for &n in &lengths {
        let sel: Vec<&RbSample> = samples.iter().filter(|s| s.length == n).collect();
        let k = sel.len() as f64;
        g.push(sel.iter().map(|s| s.p_g).sum::<f64>() / k);
        f.push(sel.iter().map(|s| s.p_f).sum::<f64>() / k);
    }
    (lengths, g, f)
}

fn fit_decay_points(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64)> {
    let b0 = 0.5;
    let (x0, y0) = (x[0], y[0]);
    let (x1, y1) = (x[x.len() - 1], y[y.len() - 1]);
    let p0 = if y0 - b0 > 1e-6 && y1 - b0 > 1e-6 && x1 > x0 {
        ((y1 - b0).ln() - (y0 - b0).ln()) / (x1 - x0)
    } else {
        -1e-3
    }
    .exp()
    .clamp(0.5, 1.0 - 1e-9);
    let a0 = (y0 - b0) / p0.powf(x0);
    let model = |q: &[f64]| -> Vec<f64> {
        x.iter().zip(y).map(|(&n, &v)| q[0] * q[1].powf(n) + q[2] - v).collect()
    };
    let r = levenberg_marquardt(model, &[a0, p0, b0], &[0.1, 1e-3, 0.1], LmOptions::default())?;
    let q = r.params;
    if !q.iter().all(|v| v.is_finite()) || q[1] <= 0.0 {
        return Err(Error::Fit(format!("RB decay fit diverged: {q:?}")));
    }
    Ok((q[0], q[1].min(1.0), q[2]))
}

/// Least-squares fit of the per-length mean `P_g` to `A p^N + B`, with a
/// bootstrap over seeds for the uncertainty of `r = (1 - p)/2`.
pub fn fit_rb_decay(samples: &[RbSample], bootstrap: usize, seed: u64) -> Result<RbFit> {
    let (lengths, g, _) = means(samples);
    if lengths.len() < 3 {
        return Err(Error::Fit("RB fit needs at least three distinct lengths".into()));
    }
    let x: Vec<f64> = lengths.iter().map(|&n| n as f64).collect();
    let (a, p, b) = fit_decay_points(&x, &g)?;
    let r = (1.0 - p) / 2.0;

    let groups: Vec<Vec<f64>> =
        lengths.iter().map(|&n| samples.iter().filter(|s| s.length == n).map(|s| s.p_g).collect()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB007);
    let mut rs = Vec::with_capacity(bootstrap);
    for _ in 0..bootstrap {
        let y: Vec<f64> = groups
            .iter()
            .map(|grp| (0..grp.len()).map(|_| grp[rng.random_range(0..grp.len())]).sum::<f64>() / grp.len() as f64)
            .collect();
        if let Ok((_, pb, _)) = fit_decay_points(&x, &y) {
            rs.push((1.0 - pb) / 2.0);
        }
    }
    let uncertainty = if rs.len() > 1 {
        let m = rs.iter().sum::<f64>() / rs.len() as f64;
        (rs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (rs.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(RbFit { a, p, b, error_per_clifford: r, uncertainty })
}

/// `p_up / s * (1 - exp(-s N))` with `s = p_up + p_down`.
pub fn leakage_model(p_up: f64, p_down: f64, n: f64) -> f64 {
    let s = p_up + p_down;
    if s * n < 1e-12 {
        return p_up * n;
    }
    p_up * -(-s * n).exp_m1() / s
}

/// Fits the rate-equation leakage model to `P_f` against sequence length.
pub fn fit_leakage(lengths: &[f64], p_f: &[f64]) -> Result<LeakageFit> {
    if lengths.len() != p_f.len() {
        return param("length and population lists differ in size");
    }
    let mut distinct = lengths.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::Fit("leakage fit needs at least three lengths".into()));
    }
    // For fixed s the model is linear in p_up; scan s and refine.
    let g = |s: f64, n: f64| if s * n < 1e-12 { n } else { -(-s * n).exp_m1() / s };
    let best_u = |s: f64| {
        let num: f64 = lengths.iter().zip(p_f).map(|(&n, &y)| g(s, n) * y).sum();
        let den: f64 = lengths.iter().map(|&n| g(s, n).powi(2)).sum();
        if den > 0.0 {
            (num / den).max(0.0)
        } else {
            0.0
        }
    };
    let sse = |u: f64, s: f64| lengths.iter().zip(p_f).map(|(&n, &y)| (u * g(s, n) - y).powi(2)).sum::<f64>();
    let n_max = distinct[distinct.len() - 1].max(1.0);
    let (mut s0, mut best) = (1e-9 / n_max, f64::INFINITY);
    for k in 0..=240 {
        let s = 1e-6 / n_max * 10f64.powf(k as f64 / 20.0);
        let e = sse(best_u(s), s);
        if e < best {
            best = e;
            s0 = s;
        }
    }
    let u0 = best_u(s0);
    if u0 == 0.0 {
        return Ok(LeakageFit { p_up: 0.0, p_down: s0 });
    }
    let resid = |q: &[f64]| -> Vec<f64> {
        let (u, s) = (q[0] * u0, q[1].exp() * s0);
        lengths.iter().zip(p_f).map(|(&n, &y)| (u * g(s, n) - y) / u0).collect()
    };
    let opts = LmOptions { max_iter: 500, ftol: 1e-20, xtol: 1e-14 };
    let r = levenberg_marquardt(resid, &[1.0, 0.0], &[1e-3, 1e-3], opts)?;
    let (u, s) = (r.params[0] * u0, r.params[1].exp() * s0);
    if !(u.is_finite() && s.is_finite()) {
        return Err(Error::Fit("leakage fit diverged".into()));
    }
    let u = u.max(0.0);
    Ok(LeakageFit { p_up: u, p_down: (s - u).max(0.0) })
}

/// Average gate infidelity of an idle of length `t_ns` under T1 and T2 echo,
/// `1 - (3 + 2 exp(-t/T2e) + exp(-t/T1)) / 6`.
pub fn coherence_limit(params: &TransmonParams, t_ns: f64) -> Result<f64> {
    if !(t_ns > 0.0) {
        return param("Clifford duration must be positive");
    }
    let e2 = (-t_ns / params.t2e_ns()).exp();
    let e1 = (-t_ns / params.t1_ns()).exp();
    Ok(1.0 - (3.0 + 2.0 * e2 + e1) / 6.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qutrit::model::{propagate, Idle};
    use num_complex::Complex64;

    fn synth(a: f64, p: f64, b: f64, lengths: &[usize], seeds: usize, noise: f64, seed: u64) -> Vec<RbSample> {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, noise.max(1e-300)).unwrap();
        let mut out = Vec::new();
        for &n in lengths {
            for s in 0..seeds {
                let e = if noise > 0.0 { d.sample(&mut rng) } else { 0.0 };
                out.push(RbSample { length: n, seed_index: s, p_g: a * p.powi(n as i32) + b + e, p_e: 0.0, p_f: 0.0 });
            }
        }
        out
    }

    fn lengths() -> Vec<usize> {
        std::iter::once(1).chain((1..=40).map(|k| 5 * k)).collect()
    }

    #[test]
    fn noiseless_decay_inverts_exactly() {
        let s = synth(0.5 + 1e-3, 0.9966, 0.5, &lengths(), 1, 0.0, 0);
        let f = fit_rb_decay(&s, 0, 0).unwrap();
        assert!((f.error_per_clifford - 0.0017).abs() < 1e-9);
    }

    #[test]
    fn flat_decay_gives_zero_error() {
        let s = synth(0.0, 1.0, 0.95, &lengths(), 1, 0.0, 0);
        let f = fit_rb_decay(&s, 0, 0).unwrap();
        assert!(f.error_per_clifford.abs() < 1e-9);
    }

    #[test]
    fn noisy_decay_recovers_p() {
        let s = synth(0.48, 0.9966, 0.5, &lengths(), 30, 0.005, 11);
        let f = fit_rb_decay(&s, 100, 1).unwrap();
        assert!((f.p - 0.9966).abs() < 1e-4, "{}", f.p);
        assert!(f.uncertainty > 0.0 && f.uncertainty < 1e-4);
    }

    #[test]
    fn too_few_lengths_rejected() {
        let s = synth(0.5, 0.99, 0.5, &[1, 2], 3, 0.0, 0);
        assert!(fit_rb_decay(&s, 0, 0).is_err());
    }

    #[test]
    fn leakage_injection_round_trip() {
        let xs: Vec<f64> = lengths().iter().map(|&n| n as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|&n| leakage_model(7e-5, 1e-2, n)).collect();
        let f = fit_leakage(&xs, &ys).unwrap();
        assert!((f.p_up / 7e-5 - 1.0).abs() < 5e-4, "{f:?}");
        assert!((f.p_down / 1e-2 - 1.0).abs() < 5e-4, "{f:?}");
        let zero = fit_leakage(&xs, &vec![0.0; xs.len()]).unwrap();
        assert!(zero.p_up <= 1e-7);
    }

    #[test]
    fn leakage_slope_at_origin_is_p_up() {
        let h = 1e-6;
        assert!((leakage_model(7e-5, 1e-2, h) / h - 7e-5).abs() < 1e-12);
    }

    #[test]
    fn coherence_limit_matches_idle_oracle() {
        let p = TransmonParams::default();
        for t in [10.0, 50.0, 100.0] {
            // average over the six cardinal states of 1 - <psi|rho(t)|psi>
            let r = Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
            let i = Complex64::new(0.0, std::f64::consts::FRAC_1_SQRT_2);
            let z = Complex64::new(0.0, 0.0);
            let o = Complex64::new(1.0, 0.0);
            let states = [[o, z], [z, o], [r, r], [r, -r], [r, i], [r, -i]];
            let mut infid = 0.0;
            for psi in states {
                let s = QutritState::pure([psi[0], psi[1], z]);
                let out = propagate(&s, &Idle(t), &p, 0.1).unwrap();
                let v = nalgebra::Vector3::new(psi[0], psi[1], z);
                infid += 1.0 - (v.adjoint() * out.rho * v)[(0, 0)].re;
            }
            infid /= 6.0;
            let lim = coherence_limit(&p, t).unwrap();
            assert!((lim / infid - 1.0).abs() < 1e-6, "{t}: {lim} {infid}");
        }
        let lim = coherence_limit(&p, 50.0).unwrap();
        assert!((lim - 1.354e-3).abs() < 2e-6, "{lim}");
        let inf = TransmonParams { t1_us: 1e30, t2_echo_us: 1e30, ..p };
        assert!(coherence_limit(&inf, 50.0).unwrap() < 1e-20);
    }

    #[test]
    fn coherent_rb_returns_to_ground() {
        let p = TransmonParams { thermal_population: 0.0, ..TransmonParams::default().coherent() };
        let spec = RbSpec { preselected: true, ..RbSpec::new(vec![0, 50, 100], 3) };
        let r = run_rb(&spec, &p, None).unwrap();
        assert!(r.p_g.iter().all(|&g| g >= 0.999), "{:?}", r.p_g);
    }

    #[test]
    fn recovery_only_gives_state_prep_limit() {
        let p = TransmonParams::default();
        let spec = RbSpec::new(vec![0, 1, 2], 4);
        let r = run_rb(&spec, &p, None).unwrap();
        assert!((r.p_g[0] - (1.0 - p.thermal_population)).abs() < 2e-3, "{}", r.p_g[0]);
    }

    #[test]
    fn assignment_matrix_is_applied() {
        let p = TransmonParams { thermal_population: 0.0, ..TransmonParams::default().coherent() };
        let spec = RbSpec { preselected: true, ..RbSpec::new(vec![0, 1, 2], 2) };
        let m = [[0.9, 0.1, 0.0], [0.05, 0.9, 0.05], [0.0, 0.1, 0.9]];
        let r = run_rb(&spec, &p, Some(&m)).unwrap();
        assert!((r.p_g[0] - 0.9).abs() < 1e-3);
        let bad = [[0.5, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(run_rb(&spec, &p, Some(&bad)).is_err());
    }
}
