use std::io::{Read, Write};

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chains::{iq_chain_waveform, IqChainConfig};
use crate::error::{param, Error, Result};
use crate::fit::{levenberg_marquardt, LmOptions};
use crate::mixers::{wrap_phase, CompensationParams};
use crate::signal::{power_spectrum, EnvelopePair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalKind {
    /// Carrier amplitude over `(V_I, V_Q)`.
    LoLeakage,
    /// Image amplitude over `(alpha, phi)`.
    Image,
}

/// Measured amplitude on a rectangular grid, row-major in `axis1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalSurface {
    pub kind: CalKind,
    pub axis1: Vec<f64>,
    pub axis2: Vec<f64>,
    pub values: Vec<f64>,
}

pub fn linspace(center: f64, half_span: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![center];
    }
    (0..n)
        .map(|k| center - half_span + 2.0 * half_span * k as f64 / (n - 1) as f64)
        .collect()
}

impl CalSurface {
    pub fn new(kind: CalKind, axis1: Vec<f64>, axis2: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if axis1.is_empty() || axis2.is_empty() {
            return param("calibration grid axes must be non-empty");
        }
        if values.len() != axis1.len() * axis2.len() {
            return param("surface values do not fill the grid");
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return param("surface values must be finite and non-negative");
        }
        Ok(Self { kind, axis1, axis2, values })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.axis2.len() + j]
    }

    pub fn points(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.axis1
            .iter()
            .enumerate()
            .flat_map(move |(i, &a)| self.axis2.iter().enumerate().map(move |(j, &b)| (a, b, self.get(i, j))))
    }

    /// Grid point with the smallest value.
    pub fn argmin(&self) -> (f64, f64, f64) {
        self.points().min_by(|x, y| x.2.total_cmp(&y.2)).expect("non-empty grid")
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Synthetic carrier surface `scale |V_I - i V_Q + leakage|`.
    pub fn lo_model(leakage: Complex64, scale: f64, v_i: Vec<f64>, v_q: Vec<f64>) -> Result<Self> {
        let values = v_i
            .iter()
            .flat_map(|&a| v_q.iter().map(move |&b| scale * (Complex64::new(a, -b) + leakage).norm()))
            .collect();
        Self::new(CalKind::LoLeakage, v_i, v_q, values)
    }

    /// Synthetic image surface `scale / 2 |1 - (alpha_tilde/alpha) e^{i(phi_tilde - phi)}|`.
    pub fn image_model(alpha_tilde: f64, phi_tilde: f64, scale: f64, alpha: Vec<f64>, phi: Vec<f64>) -> Result<Self> {
        if alpha.iter().any(|a| !(*a > 0.0)) {
            return param("alpha grid must be positive");
        }
        let values = alpha
            .iter()
            .flat_map(|&a| phi.iter().map(move |&p| scale * image_shape(alpha_tilde, phi_tilde, a, p)))
            .collect();
        Self::new(CalKind::Image, alpha, phi, values)
    }

    /// Multiplies every value by `1 + rel * n` with standard normal `n`.
    pub fn with_noise(&self, rel: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = self.clone();
        for v in &mut s.values {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v = (*v * (1.0 + rel * n)).abs();
        }
        s
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "axis1,axis2,value")?;
        for (a, b, v) in self.points() {
            writeln!(w, "{a},{b},{v}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(kind: CalKind, mut r: R) -> Result<Self> {
        let mut text = String::new();
        r.read_to_string(&mut text)?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some("axis1,axis2,value") {
            return param("surface CSV must start with header axis1,axis2,value");
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let cols: Vec<f64> = line
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Parameter(format!("bad surface row {}", n + 2)))?;
            if cols.len() != 3 {
                return param(format!("surface row {} needs three columns", n + 2));
            }
            rows.push((cols[0], cols[1], cols[2]));
        }
        let mut axis1: Vec<f64> = Vec::new();
        let mut axis2: Vec<f64> = Vec::new();
        for &(a, b, _) in &rows {
            if !axis1.contains(&a) {
                axis1.push(a);
            }
            if axis1.len() == 1 && !axis2.contains(&b) {
                axis2.push(b);
            }
        }
        let n2 = axis2.len();
        for (k, &(a, b, _)) in rows.iter().enumerate() {
            if a != axis1[k / n2.max(1)] || b != axis2[k % n2.max(1)] {
                return param("surface CSV rows do not form a row-major rectangular grid");
            }
        }
        Self::new(kind, axis1, axis2, rows.into_iter().map(|r| r.2).collect())
    }
}

fn image_shape(alpha_tilde: f64, phi_tilde: f64, alpha: f64, phi: f64) -> f64 {
    0.5 * (Complex64::new(1.0, 0.0) - Complex64::from_polar(alpha_tilde / alpha, phi_tilde - phi)).norm()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalResult {
    pub kind: CalKind,
    pub param_names: Vec<String>,
    pub fitted_params: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    /// `(V_I*, V_Q*)` or `(alpha*, phi*)`.
    pub optimum: [f64; 2],
    pub residual_rms: f64,
    pub iterations: usize,
}

impl CalResult {
    /// `comp` with the fitted pair substituted.
    pub fn apply(&self, comp: &CompensationParams) -> CompensationParams {
        let [a, b] = self.optimum;
        match self.kind {
            CalKind::LoLeakage => CompensationParams { v_i_dc: a, v_q_dc: b, ..*comp },
            CalKind::Image => CompensationParams { alpha: a, phi: b, ..*comp },
        }
    }

    pub fn param(&self, name: &str) -> Option<f64> {
        self.param_names.iter().position(|n| n == name).map(|i| self.fitted_params[i])
    }
}

fn run_grid<F>(axis1: &[f64], axis2: &[f64], f: F) -> Result<Vec<f64>>
where
    F: Fn(f64, f64) -> Result<f64> + Sync,
{
    let pts: Vec<(f64, f64)> = axis1.iter().flat_map(|&a| axis2.iter().map(move |&b| (a, b))).collect();
    pts.par_iter().map(|&(a, b)| f(a, b)).collect()
}

/// Output carrier amplitude with zero IF drive over a grid of DC offsets.
pub fn sweep_lo_leakage(chain: &IqChainConfig, v_i: &[f64], v_q: &[f64]) -> Result<CalSurface> {
    if v_i.is_empty() || v_q.is_empty() {
        return param("empty calibration grid");
    }
    let env = chain.cw_envelope(0.0)?;
    let values = run_grid(v_i, v_q, |a, b| {
        let cfg = IqChainConfig { comp: CompensationParams { v_i_dc: a, v_q_dc: b, ..chain.comp }, ..chain.clone() };
        let out = iq_chain_waveform(&cfg, &env, 0.0)?;
        Ok(power_spectrum(&out, cfg.sim.window, cfg.sim.rbw_hz)?.amplitude_at(cfg.lo.frequency))
    })?;
    CalSurface::new(CalKind::LoLeakage, v_i.to_vec(), v_q.to_vec(), values)
}

/// Output image amplitude at `f_LO - f_IF` for a CW drive over a grid of
/// imbalance compensation parameters.
pub fn sweep_image(
    chain: &IqChainConfig,
    f_if: f64,
    amplitude: f64,
    alpha: &[f64],
    phi: &[f64],
) -> Result<CalSurface> {
    if alpha.is_empty() || phi.is_empty() {
        return param("empty calibration grid");
    }
    let env: EnvelopePair = chain.cw_envelope(amplitude)?;
    let values = run_grid(alpha, phi, |a, p| {
        let cfg = IqChainConfig { comp: CompensationParams { alpha: a, phi: p, ..chain.comp }, ..chain.clone() };
        let out = iq_chain_waveform(&cfg, &env, f_if)?;
        Ok(power_spectrum(&out, cfg.sim.window, cfg.sim.rbw_hz)?.amplitude_at(cfg.lo.frequency - f_if))
    })?;
    CalSurface::new(CalKind::Image, alpha.to_vec(), phi.to_vec(), values)
}

fn span(axis: &[f64]) -> f64 {
    let lo = axis.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = axis.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (hi - lo).max(1e-12)
}

fn finish(
    kind: CalKind,
    names: &[&str],
    res: crate::fit::LmResult,
    optimum: [f64; 2],
    n: usize,
) -> Result<CalResult> {
    if !res.converged {
        return Err(Error::Fit(format!(
            "{kind:?} fit did not converge after {} iterations (cost {:.3e}, params {:?})",
            res.iterations, res.cost, res.params
        )));
    }
    let p = res.params.len();
    Ok(CalResult {
        kind,
        param_names: names.iter().map(|s| s.to_string()).collect(),
        covariance: (0..p).map(|i| (0..p).map(|j| res.covariance[(i, j)]).collect()).collect(),
        fitted_params: res.params,
        optimum,
        residual_rms: (res.cost / n as f64).sqrt(),
        iterations: res.iterations,
    })
}

/// Fits `Y = scale |V_I - i V_Q + c|` to a carrier surface.
///
/// Only the combined leakage phasor `c = L_I e^{i th_I} - i L_Q e^{i th_Q}` is
/// identifiable from such a surface, so the fitted parameters are
/// `(scale, leak_re, leak_im)` and the optimum is `(-Re c, Im c)`.
pub fn fit_lo_leakage(surface: &CalSurface) -> Result<CalResult> {
    if surface.kind != CalKind::LoLeakage {
        return param("expected a carrier-leakage surface");
    }
    let pts: Vec<(f64, f64, f64)> = surface.points().collect();
    if pts.len() < 4 {
        return param("carrier fit needs at least four grid points");
    }
    let (a0, b0, _) = surface.argmin();
    let c0 = Complex64::new(-a0, b0);
    let s0 = {
        let (num, den) = pts.iter().fold((0.0, 0.0), |(n, d), &(a, b, y)| {
            let m = (Complex64::new(a, -b) + c0).norm();
            (n + y * m, d + m * m)
        });
        if den > 0.0 { num / den } else { 1.0 }
    };
    let sc = span(&surface.axis1).max(span(&surface.axis2));
    let res = levenberg_marquardt(
        |p| {
            let c = Complex64::new(p[1], p[2]);
            pts.iter().map(|&(a, b, y)| p[0] * (Complex64::new(a, -b) + c).norm() - y).collect()
        },
        &[s0.max(1e-300), c0.re, c0.im],
        &[s0.abs().max(1e-300), sc, sc],
        LmOptions::default(),
    )?;
    let optimum = [-res.params[1], res.params[2]];
    finish(CalKind::LoLeakage, &["scale", "leak_re_v", "leak_im_v"], res, optimum, pts.len())
}

/// Fits `Y = scale / 2 |1 - (alpha_tilde/alpha) e^{i(phi_tilde - phi)}|` to an
/// image surface; the optimum is `(alpha_tilde, phi_tilde)` with the phase
/// wrapped into `(-pi, pi]`.
pub fn fit_image(surface: &CalSurface) -> Result<CalResult> {
    if surface.kind != CalKind::Image {
        return param("expected an image surface");
    }
    if surface.axis1.iter().any(|a| !(*a > 0.0)) {
        return param("alpha axis must be positive");
    }
    let pts: Vec<(f64, f64, f64)> = surface.points().collect();
    if pts.len() < 4 {
        return param("image fit needs at least four grid points");
    }
    let (a0, p0, _) = surface.argmin();
    let s0 = {
        let (num, den) = pts.iter().fold((0.0, 0.0), |(n, d), &(a, p, y)| {
            let m = image_shape(a0, p0, a, p);
            (n + y * m, d + m * m)
        });
        if den > 0.0 { num / den } else { 1.0 }
    };
    let res = levenberg_marquardt(
        |q| pts.iter().map(|&(a, p, y)| q[0] * image_shape(q[1], q[2], a, p) - y).collect(),
        &[s0.max(1e-300), a0, p0],
        &[s0.abs().max(1e-300), 1.0, 1.0],
        LmOptions::default(),
    )?;
    let optimum = [res.params[1], wrap_phase(res.params[2])];
    let mut out = finish(CalKind::Image, &["scale", "alpha_tilde", "phi_tilde_rad"], res, optimum, pts.len())?;
    out.fitted_params[2] = optimum[1];
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixers::{carrier_leakage_amplitude, image_amplitude, IqMixerModel};
    use std::f64::consts::PI;

    fn leak_model() -> IqMixerModel {
        IqMixerModel { l_i: 0.03, theta_i: 0.4, l_q: 0.02, theta_q: -0.1, ..IqMixerModel::ideal() }
    }

    #[test]
    fn lo_fit_recovers_noiseless_optimum() {
        let m = leak_model();
        let (vi, vq) = m.lo_optimum();
        let s = CalSurface::lo_model(m.leakage_phasor(), 2.5, linspace(0.0, 0.1, 21), linspace(0.0, 0.1, 21)).unwrap();
        let r = fit_lo_leakage(&s).unwrap();
        assert!((r.optimum[0] - vi).abs() < 1e-9 * vi.abs().max(1e-3));
        assert!((r.optimum[1] - vq).abs() < 1e-9 * vq.abs().max(1e-3));
        assert!(r.residual_rms < 1e-10 * s.max());
        assert!((r.fitted_params[0] / 2.5 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn lo_fit_with_noise_within_a_millivolt() {
        let m = leak_model();
        let (vi, vq) = m.lo_optimum();
        let s = CalSurface::lo_model(m.leakage_phasor(), 1.0, linspace(0.0, 0.1, 15), linspace(0.0, 0.1, 15))
            .unwrap()
            .with_noise(0.01, 7);
        let r = fit_lo_leakage(&s).unwrap();
        assert!((r.optimum[0] - vi).abs() < 1e-3 && (r.optimum[1] - vq).abs() < 1e-3);
        assert!(r.covariance[1][1] > 0.0);
        assert!(carrier_leakage_amplitude(&m, r.optimum[0], r.optimum[1]) < 1e-3);
    }

    #[test]
    fn zero_leakage_optimum_is_origin() {
        let s = CalSurface::lo_model(Complex64::new(0.0, 0.0), 1.0, linspace(0.0, 0.05, 11), linspace(0.0, 0.05, 11))
            .unwrap();
        let r = fit_lo_leakage(&s).unwrap();
        assert!(r.optimum[0].abs() < 1e-9 && r.optimum[1].abs() < 1e-9);
    }

    #[test]
    fn image_fit_recovers_injected_imbalance() {
        let s = CalSurface::image_model(1.07, 0.12, 0.3, linspace(1.05, 0.1, 15), linspace(0.1, 0.2, 15)).unwrap();
        let r = fit_image(&s).unwrap();
        assert!((r.optimum[0] - 1.07).abs() < 1e-7);
        assert!((r.optimum[1] - 0.12).abs() < 1e-7);
        assert!(r.residual_rms < 1e-10 * s.max());
        let noisy = s.with_noise(0.01, 3);
        let r = fit_image(&noisy).unwrap();
        assert!((r.optimum[0] - 1.07).abs() < 0.005 && (r.optimum[1] - 0.12).abs() < 0.005);
        let m = IqMixerModel { alpha_tilde: 1.07, phi_tilde: 0.12, ..IqMixerModel::ideal() };
        let resid = image_amplitude(&m, r.optimum[0], r.optimum[1]).unwrap();
        assert!(20.0 * resid.log10() < -70.0);
    }

    #[test]
    fn image_fit_wraps_phase() {
        let s = CalSurface::image_model(1.0, 0.12 + 2.0 * PI, 1.0, linspace(1.0, 0.1, 11), linspace(0.1, 0.2, 11))
            .unwrap();
        let r = fit_image(&s).unwrap();
        assert!((r.optimum[1] - 0.12).abs() < 1e-7);
    }

    #[test]
    fn lo_sweep_of_ideal_mixer_is_a_cone() {
        let cfg = IqChainConfig::default();
        let axis = linspace(0.0, 0.01, 5);
        let s = sweep_lo_leakage(&cfg, &axis, &axis).unwrap();
        let g = cfg.amplitude_gain() * cfg.output_filter.response(cfg.lo.frequency);
        for (a, b, v) in s.points() {
            assert!((v - g * (a * a + b * b).sqrt()).abs() < 1e-9 * g.max(1.0));
        }
        let (a, b, _) = s.argmin();
        assert_eq!((a, b), (0.0, 0.0));
    }

    #[test]
    fn image_sweep_of_ideal_mixer_matches_closed_form() {
        let cfg = IqChainConfig::default();
        let amp = 0.02;
        let s = sweep_image(&cfg, 100e6, amp, &linspace(1.0, 0.1, 3), &linspace(0.0, 0.1, 3)).unwrap();
        let g = cfg.amplitude_gain() * cfg.output_filter.response(5.8e9);
        for (a, p, v) in s.points() {
            let want = g * amp * image_shape(1.0, 0.0, a, p);
            if want > 0.0 {
                assert!((v / want - 1.0).abs() < 1e-6, "{a} {p} {v} {want}");
            }
        }
    }

    #[test]
    fn surface_csv_roundtrip_and_validation() {
        let s = CalSurface::lo_model(Complex64::new(0.01, 0.0), 1.0, vec![0.0, 0.1], vec![0.0, 0.1, 0.2]).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let back = CalSurface::read_csv(CalKind::LoLeakage, buf.as_slice()).unwrap();
        assert_eq!(back, s);
        assert!(CalSurface::new(CalKind::Image, vec![], vec![1.0], vec![]).is_err());
        assert!(CalSurface::new(CalKind::Image, vec![1.0], vec![1.0], vec![-1.0]).is_err());
        assert!(sweep_lo_leakage(&IqChainConfig::default(), &[], &[0.0]).is_err());
    }
}
