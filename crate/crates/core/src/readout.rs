//! Three-state dispersive readout: integration of the digitized signal,
//! synthetic shots, Gaussian-mixture discrimination and preselection.

use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::fit::nelder_mead;
use crate::signal::EnvelopePair;

/// Integration window of the weighted readout signal.
pub const INTEGRATION_WINDOW_S: f64 = 1.2e-6;

/// Target diagonal of the assignment matrix the stand-in model is tuned to.
pub const STAND_IN_ASSIGNMENT: [f64; 3] = [0.997, 0.958, 0.960];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QutritLabel {
    G,
    E,
    F,
}

impl QutritLabel {
    pub const ALL: [QutritLabel; 3] = [Self::G, Self::E, Self::F];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(k: usize) -> Option<Self> {
        Self::ALL.get(k).copied()
    }
}

impl fmt::Display for QutritLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::G => "g",
            Self::E => "e",
            Self::F => "f",
        })
    }
}

impl FromStr for QutritLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "g" => Ok(Self::G),
            "e" => Ok(Self::E),
            "f" => Ok(Self::F),
            other => Err(Error::Parameter(format!("unknown state label {other:?}"))),
        }
    }
}

type Cov = [[f64; 2]; 2];

fn cov_matrix(c: &Cov) -> Matrix2<f64> {
    Matrix2::new(c[0][0], c[0][1], c[1][0], c[1][1])
}

fn check_spd(c: &Cov) -> Result<()> {
    let ok = c.iter().flatten().all(|v| v.is_finite())
        && (c[0][1] - c[1][0]).abs() <= 1e-12 * (c[0][0].abs() + c[1][1].abs())
        && c[0][0] > 0.0
        && c[0][0] * c[1][1] - c[0][1] * c[1][0] > 1e-12 * c[0][0] * c[1][1];
    if ok {
        Ok(())
    } else {
        param(format!("covariance {c:?} is not symmetric positive definite"))
    }
}

/// Gaussian clouds of the integrated signal for each prepared state, plus
/// the resonator parameters they stand for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReadoutModel {
    pub means: [[f64; 2]; 3],
    pub covariances: [Cov; 3],
    pub resonator_freq_ghz: f64,
    pub dispersive_shift_mhz: f64,
    pub linewidth_mhz: f64,
}

impl ReadoutModel {
    pub fn new(means: [[f64; 2]; 3], covariances: [Cov; 3]) -> Result<Self> {
        let m = Self { means, covariances, resonator_freq_ghz: 7.141, dispersive_shift_mhz: -2.4, linewidth_mhz: 10.0 };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.covariances.iter().try_for_each(check_spd)?;
        if self.means.iter().flatten().any(|v| !v.is_finite()) {
            return param("readout means must be finite");
        }
        Ok(())
    }

    /// Unit isotropic clouds with pairwise distances `(d_ge, d_gf, d_ef)`;
    /// `g` at the origin and `e` on the positive `u1` axis.
    pub fn from_separations(seps: [f64; 3]) -> Result<Self> {
        let [d_ge, d_gf, d_ef] = seps;
        if seps.iter().any(|d| !(*d > 0.0))
            || d_ge + d_gf < d_ef
            || d_ge + d_ef < d_gf
            || d_gf + d_ef < d_ge
        {
            return param(format!("separations {seps:?} violate the triangle inequality"));
        }
        let x = (d_ge * d_ge + d_gf * d_gf - d_ef * d_ef) / (2.0 * d_ge);
        let y = (d_gf * d_gf - x * x).max(0.0).sqrt();
        let unit = [[1.0, 0.0], [0.0, 1.0]];
        Self::new([[0.0, 0.0], [d_ge, 0.0], [x, y]], [unit; 3])
    }

    /// Model tuned so that ideal discrimination reproduces
    /// [`STAND_IN_ASSIGNMENT`].
    pub fn stand_in() -> Self {
        let seps = fit_separations(STAND_IN_ASSIGNMENT).expect("stand-in separations are reachable");
        Self::from_separations(seps).expect("fitted separations form a triangle")
    }
}

/// Diagonal of the assignment matrix for unit isotropic clouds at the given
/// separations classified by nearest mean, from the exact polar integral
/// `P = (1/2 pi) \oint (1 - exp(-R(theta)^2 / 2)) d theta` over each
/// nearest-mean cell.
pub fn voronoi_assignment(seps: [f64; 3]) -> Result<[f64; 3]> {
    let m = ReadoutModel::from_separations(seps)?.means;
    let steps = 20_000;
    let mut out = [0.0; 3];
    for i in 0..3 {
        let walls: Vec<(Vector2<f64>, f64)> = (0..3)
            .filter(|&j| j != i)
            .map(|j| {
                let d = Vector2::new(m[j][0] - m[i][0], m[j][1] - m[i][1]);
                let n = d.norm();
                (d / n, 0.5 * n)
            })
            .collect();
        let mut acc = 0.0;
        for k in 0..steps {
            let th = 2.0 * PI * (k as f64 + 0.5) / steps as f64;
            let u = Vector2::new(th.cos(), th.sin());
            let r = walls
                .iter()
                .filter_map(|(n, b)| {
                    let c = n.dot(&u);
                    (c > 0.0).then(|| b / c)
                })
                .fold(f64::INFINITY, f64::min);
            acc += 1.0 - (-0.5 * r * r).exp();
        }
        out[i] = acc / steps as f64;
    }
    Ok(out)
}

/// Separations `(d_ge, d_gf, d_ef)` whose nearest-mean assignment diagonal
/// matches `target`.
pub fn fit_separations(target: [f64; 3]) -> Result<[f64; 3]> {
    if target.iter().any(|p| !(*p > 1.0 / 3.0 && *p < 1.0)) {
        return param("target assignment probabilities must lie in (1/3, 1)");
    }
    let cost = |x: &[f64]| match voronoi_assignment([x[0], x[1], x[2]]) {
        Ok(p) => p.iter().zip(&target).map(|(a, b)| ((a - b) * 1e3).powi(2)).sum(),
        Err(_) => f64::INFINITY,
    };
    let (x, c) = nelder_mead(cost, &[5.5, 6.5, 3.5], &[0.3, 0.3, 0.3], 1e-12, 2000);
    if c > 1e-4 {
        return Err(Error::Fit(format!("separation fit stalled with residual {c:.2e}")));
    }
    Ok([x[0], x[1], x[2]])
}

/// Integrated quadratures of one readout shot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IqShot {
    pub u1: f64,
    pub u2: f64,
    pub label: Option<QutritLabel>,
}

impl IqShot {
    pub fn new(u1: f64, u2: f64, label: Option<QutritLabel>) -> Self {
        Self { u1, u2, label }
    }

    fn point(&self) -> Vector2<f64> {
        Vector2::new(self.u1, self.u2)
    }
}

/// `u_k = Re sum s(t) w_k(t) dt` over the first 1.2 us of the shared grid.
/// Each pair carries the real part in `i` and the imaginary part in `q`.
pub fn integrate_readout(signal: &EnvelopePair, w1: &EnvelopePair, w2: &EnvelopePair) -> Result<IqShot> {
    for w in [w1, w2] {
        signal.i.check_grid(&w.i)?;
        signal.i.check_grid(&w.q)?;
    }
    signal.i.check_grid(&signal.q)?;
    let rate = signal.i.sample_rate();
    let dt = 1.0 / rate;
    let n = (INTEGRATION_WINDOW_S * rate).round() as usize;
    if signal.i.len() < n {
        return param(format!(
            "readout record of {} samples does not cover the {INTEGRATION_WINDOW_S} s window",
            signal.i.len()
        ));
    }
    let (sr, si) = (signal.i.samples(), signal.q.samples());
    let u = |w: &EnvelopePair| {
        let (wr, wi) = (w.i.samples(), w.q.samples());
        (0..n).map(|k| sr[k] * wr[k] - si[k] * wi[k]).sum::<f64>() * dt
    };
    let (u1, u2) = (u(w1), u(w2));
    if !(u1.is_finite() && u2.is_finite()) {
        return Err(Error::Analysis("readout integral is not finite".into()));
    }
    Ok(IqShot::new(u1, u2, None))
}

fn sample_cloud(mean: [f64; 2], cov: &Cov, label: QutritLabel, rng: &mut ChaCha8Rng) -> IqShot {
    let l = cov_matrix(cov).cholesky().expect("validated covariance").l();
    let z = Vector2::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal));
    let x = l * z;
    IqShot::new(mean[0] + x[0], mean[1] + x[1], Some(label))
}

/// `n` shots of the state `label`.
pub fn simulate_shots(label: QutritLabel, model: &ReadoutModel, n: usize, seed: u64) -> Result<Vec<IqShot>> {
    model.validate()?;
    let k = label.index();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| sample_cloud(model.means[k], &model.covariances[k], label, &mut rng)).collect())
}

/// `n` shots of a mixed state with the given populations; each shot keeps
/// its true state as label.
pub fn simulate_mixture(populations: [f64; 3], model: &ReadoutModel, n: usize, seed: u64) -> Result<Vec<IqShot>> {
    model.validate()?;
    let total: f64 = populations.iter().sum();
    if populations.iter().any(|p| *p < 0.0) || (total - 1.0).abs() > 1e-9 {
        return param("populations must be a probability vector");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let x: f64 = rng.random();
            let k = if x < populations[0] {
                0
            } else if x < populations[0] + populations[1] {
                1
            } else {
                2
            };
            sample_cloud(model.means[k], &model.covariances[k], QutritLabel::ALL[k], &mut rng)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmComponent {
    pub label: QutritLabel,
    pub weight: f64,
    pub mean: [f64; 2],
    pub covariance: Cov,
}

impl GmmComponent {
    fn log_weighted_pdf(&self, x: &Vector2<f64>) -> f64 {
        let c = cov_matrix(&self.covariance);
        let det = c.determinant();
        let inv = c.try_inverse().unwrap_or_else(Matrix2::zeros);
        let d = x - Vector2::new(self.mean[0], self.mean[1]);
        self.weight.ln() - (2.0 * PI).ln() - 0.5 * det.ln() - 0.5 * (d.transpose() * inv * d)[(0, 0)]
    }
}

/// Three labelled Gaussian components in `g, e, f` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub components: Vec<GmmComponent>,
}

impl GmmModel {
    pub fn validate(&self) -> Result<()> {
        if self.components.len() != 3 {
            return param("a readout mixture has exactly three components");
        }
        for (k, c) in self.components.iter().enumerate() {
            if c.label.index() != k {
                return param("mixture components must be ordered g, e, f");
            }
            if !(c.weight > 0.0 && c.weight < 1.0) {
                return param(format!("component weight {} outside (0, 1)", c.weight));
            }
            check_spd(&c.covariance)?;
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return param(format!("mixture weights sum to {total}"));
        }
        Ok(())
    }

    /// Posterior probability of each component at `(u1, u2)`.
    pub fn responsibilities(&self, u1: f64, u2: f64) -> [f64; 3] {
        let x = Vector2::new(u1, u2);
        let l: Vec<f64> = self.components.iter().map(|c| c.log_weighted_pdf(&x)).collect();
        let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        [e[0] / s, e[1] / s, e[2] / s]
    }

    /// Maximum-posterior state; ties go to the lower state.
    pub fn classify(&self, shot: &IqShot) -> QutritLabel {
        let r = self.responsibilities(shot.u1, shot.u2);
        let mut best = 0;
        for k in 1..3 {
            if r[k] > r[best] {
                best = k;
            }
        }
        QutritLabel::ALL[best]
    }

    pub fn log_likelihood(&self, shots: &[IqShot]) -> f64 {
        shots
            .par_iter()
            .map(|s| {
                let x = s.point();
                log_sum_exp(self.components.iter().map(|c| c.log_weighted_pdf(&x)))
            })
            .collect::<Vec<f64>>()
            .iter()
            .sum()
    }
}

fn log_sum_exp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = it.clone().fold(f64::NEG_INFINITY, f64::max);
    m + it.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Bhattacharyya distance between two Gaussian components.
pub fn bhattacharyya(a: &GmmComponent, b: &GmmComponent) -> f64 {
    let (ca, cb) = (cov_matrix(&a.covariance), cov_matrix(&b.covariance));
    let c = (ca + cb) * 0.5;
    let d = Vector2::new(a.mean[0] - b.mean[0], a.mean[1] - b.mean[1]);
    let inv = c.try_inverse().unwrap_or_else(Matrix2::zeros);
    0.125 * (d.transpose() * inv * d)[(0, 0)] + 0.5 * (c.determinant() / (ca.determinant() * cb.determinant()).sqrt()).ln()
}

/// Components closer than this Bhattacharyya distance count as one cloud.
pub const OVERLAP_DISTANCE: f64 = 0.5;

const EM_RESTARTS: usize = 5;
const EM_MAX_ITER: usize = 1000;

struct Em {
    weights: [f64; 3],
    means: [Vector2<f64>; 3],
    covs: [Matrix2<f64>; 3],
}

impl Em {
    fn components(&self) -> Vec<GmmComponent> {
        (0..3)
            .map(|k| GmmComponent {
                label: QutritLabel::ALL[k],
                weight: self.weights[k],
                mean: [self.means[k][0], self.means[k][1]],
                covariance: [[self.covs[k][(0, 0)], self.covs[k][(0, 1)]], [self.covs[k][(1, 0)], self.covs[k][(1, 1)]]],
            })
            .collect()
    }
}

fn global_cov(pts: &[Vector2<f64>]) -> Matrix2<f64> {
    let n = pts.len() as f64;
    let mean = pts.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    pts.iter().fold(Matrix2::zeros(), |a, p| a + (p - mean) * (p - mean).transpose()) / n
}

fn kmeans_pp(pts: &[Vector2<f64>], rng: &mut ChaCha8Rng) -> [Vector2<f64>; 3] {
    let mut centers = vec![pts[rng.random_range(0..pts.len())]];
    while centers.len() < 3 {
        let d2: Vec<f64> = pts.iter().map(|p| centers.iter().map(|c| (p - c).norm_squared()).fold(f64::INFINITY, f64::min)).collect();
        let total: f64 = d2.iter().sum();
        let mut x = rng.random::<f64>() * total;
        let mut pick = pts.len() - 1;
        for (i, d) in d2.iter().enumerate() {
            if x < *d {
                pick = i;
                break;
            }
            x -= d;
        }
        centers.push(pts[pick]);
    }
    [centers[0], centers[1], centers[2]]
}

/// One EM run; returns the final state and log-likelihood.
fn run_em(pts: &[Vector2<f64>], init: [Vector2<f64>; 3], cov0: Matrix2<f64>) -> Result<(Em, f64)> {
    let n = pts.len() as f64;
    let floor = 1e-8 * cov0.determinant().abs().max(1e-300);
    let mut em = Em { weights: [1.0 / 3.0; 3], means: init, covs: [cov0; 3] };
    let mut last = f64::NEG_INFINITY;
    for _ in 0..EM_MAX_ITER {
        let comps = em.components();
        let (resp, ll): (Vec<[f64; 3]>, Vec<f64>) = pts
            .par_iter()
            .map(|x| {
                let l: [f64; 3] = [0, 1, 2].map(|k| comps[k].log_weighted_pdf(x));
                let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e = l.map(|v| (v - m).exp());
                let s: f64 = e.iter().sum();
                ([e[0] / s, e[1] / s, e[2] / s], m + s.ln())
            })
            .unzip();
        let ll: f64 = ll.iter().sum();
        if ll < last - 1e-9 * last.abs() {
            return Err(Error::Contract(format!("EM log-likelihood decreased from {last} to {ll}")));
        }
        if ll - last <= 1e-10 * ll.abs() {
            return Ok((em, ll));
        }
        last = ll;
        for k in 0..3 {
            let nk: f64 = resp.iter().map(|r| r[k]).sum();
            if nk < 2.0 {
                return Err(Error::Fit(format!("component {k} collapsed to {nk:.2} shots")));
            }
            let mean = pts.iter().zip(&resp).fold(Vector2::zeros(), |a, (p, r)| a + p * r[k]) / nk;
            let cov = pts
                .iter()
                .zip(&resp)
                .fold(Matrix2::zeros(), |a, (p, r)| a + (p - mean) * (p - mean).transpose() * r[k])
                / nk;
            if cov.determinant() < floor {
                return Err(Error::Fit(format!("component {k} covariance became singular")));
            }
            em.weights[k] = nk / n;
            em.means[k] = mean;
            em.covs[k] = cov;
        }
    }
    Ok((em, last))
}

/// Fits a three-component Gaussian mixture to unlabeled shots by EM with
/// k-means++ starts, keeping the best of five restarts. Components are then
/// labelled by the assignment to `centroids` (the per-state calibration
/// means) with the least total squared distance.
pub fn fit_gmm(shots: &[IqShot], centroids: &[[f64; 2]; 3], seed: u64) -> Result<GmmModel> {
    if shots.len() < 150 {
        return param(format!("mixture fit needs at least 150 shots, got {}", shots.len()));
    }
    let pts: Vec<Vector2<f64>> = shots.iter().map(IqShot::point).collect();
    if pts.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
        return param("shots must be finite");
    }
    let cov0 = global_cov(&pts);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Em, f64)> = None;
    let mut failures = Vec::new();
    for r in 0..EM_RESTARTS {
        let init = kmeans_pp(&pts, &mut rng);
        match run_em(&pts, init, cov0) {
            Ok((em, ll)) => {
                if best.as_ref().is_none_or(|b| ll > b.1) {
                    best = Some((em, ll));
                }
            }
            Err(e @ Error::Contract(_)) => return Err(e),
            Err(e) => failures.push(format!("restart {r}: {e}")),
        }
    }
    let (em, _) = best.ok_or_else(|| Error::Fit(format!("all EM restarts degenerated: {}", failures.join("; "))))?;
    let comps = em.components();
    for i in 0..3 {
        for j in 0..i {
            let d = bhattacharyya(&comps[i], &comps[j]);
            if d < OVERLAP_DISTANCE {
                return Err(Error::Fit(format!(
                    "mixture components overlap (Bhattacharyya distance {d:.3}); data may hold fewer than three clouds"
                )));
            }
        }
    }
    const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let dist = |perm: &[usize; 3]| -> f64 {
        (0..3)
            .map(|s| {
                let m = comps[perm[s]].mean;
                (m[0] - centroids[s][0]).powi(2) + (m[1] - centroids[s][1]).powi(2)
            })
            .sum()
    };
    let perm = PERMS.iter().min_by(|a, b| dist(a).total_cmp(&dist(b))).expect("non-empty");
    let components = (0..3)
        .map(|s| GmmComponent { label: QutritLabel::ALL[s], ..comps[perm[s]].clone() })
        .collect();
    let model = GmmModel { components };
    model.validate()?;
    Ok(model)
}

/// Mean position of the shots carrying each label.
pub fn label_centroids(shots: &[IqShot]) -> Result<[[f64; 2]; 3]> {
    let mut sum = [[0.0; 2]; 3];
    let mut count = [0usize; 3];
    for s in shots {
        if let Some(l) = s.label {
            let k = l.index();
            sum[k][0] += s.u1;
            sum[k][1] += s.u2;
            count[k] += 1;
        }
    }
    if let Some(k) = count.iter().position(|&c| c == 0) {
        return param(format!("no shots labelled {}", QutritLabel::ALL[k]));
    }
    Ok([0, 1, 2].map(|k| [sum[k][0] / count[k] as f64, sum[k][1] / count[k] as f64]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `matrix[i][j] = P(assigned j | prepared i)`.
    pub matrix: [[f64; 3]; 3],
    pub average_assignment: f64,
    pub average_error: f64,
}

pub fn assignment_matrix(gmm: &GmmModel, shots: &[IqShot]) -> Result<Assignment> {
    gmm.validate()?;
    let mut counts = [[0usize; 3]; 3];
    let assigned: Vec<(usize, usize)> = shots
        .par_iter()
        .map(|s| {
            s.label
                .map(|l| (l.index(), gmm.classify(s).index()))
                .ok_or_else(|| Error::Parameter("assignment matrix needs labelled shots".into()))
        })
        .collect::<Result<_>>()?;
    for (i, j) in assigned {
        counts[i][j] += 1;
    }
    let mut matrix = [[0.0; 3]; 3];
    for i in 0..3 {
        let n: usize = counts[i].iter().sum();
        if n == 0 {
            return param(format!("no shots prepared in {}", QutritLabel::ALL[i]));
        }
        for j in 0..3 {
            matrix[i][j] = counts[i][j] as f64 / n as f64;
        }
    }
    let average_assignment = (0..3).map(|i| matrix[i][i]).sum::<f64>() / 3.0;
    Ok(Assignment { matrix, average_assignment, average_error: 1.0 - average_assignment })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preselection {
    pub kept: Vec<IqShot>,
    pub discard_fraction: f64,
}

/// Keeps main shot `i` iff pre-shot `i` is assigned to `g`.
pub fn preselect(pre: &[IqShot], main: &[IqShot], gmm: &GmmModel) -> Result<Preselection> {
    if pre.len() != main.len() {
        return param(format!("{} pre-shots for {} main shots", pre.len(), main.len()));
    }
    if pre.is_empty() {
        return param("no shots to preselect");
    }
    let keep: Vec<bool> = pre.par_iter().map(|s| gmm.classify(s) == QutritLabel::G).collect();
    let kept: Vec<IqShot> = main.iter().zip(&keep).filter(|(_, k)| **k).map(|(s, _)| *s).collect();
    let discard_fraction = 1.0 - kept.len() as f64 / main.len() as f64;
    Ok(Preselection { kept, discard_fraction })
}

/// Writes `u1,u2,label` rows; unlabeled shots leave the label empty.
pub fn write_shots_csv<W: Write>(mut w: W, shots: &[IqShot]) -> Result<()> {
    writeln!(w, "u1,u2,label")?;
    for s in shots {
        let label = s.label.map(|l| l.to_string()).unwrap_or_default();
        writeln!(w, "{:.17e},{:.17e},{label}", s.u1, s.u2)?;
    }
    Ok(())
}

pub fn read_shots_csv<R: BufRead>(r: R) -> Result<Vec<IqShot>> {
    let mut lines = r.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim() != "u1,u2,label" {
        return Err(Error::Configuration(format!("expected header u1,u2,label, found {header:?}")));
    }
    let mut out = Vec::new();
    for (k, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(Error::Configuration(format!("shots row {} has {} columns", k + 2, cols.len())));
        }
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Configuration(format!("bad number {s:?} in shots row {}", k + 2)))
        };
        let label = if cols[2].trim().is_empty() {
            None
        } else {
            Some(cols[2].parse().map_err(|_| Error::Configuration(format!("bad label in shots row {}", k + 2)))?)
        };
        out.push(IqShot::new(num(cols[0])?, num(cols[1])?, label));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::SampledWaveform;
    use proptest::prelude::*;

    fn calibration(model: &ReadoutModel, n: usize, seed: u64) -> Vec<IqShot> {
        QutritLabel::ALL
            .iter()
            .flat_map(|&l| simulate_shots(l, model, n, seed + l.index() as u64).unwrap())
            .collect()
    }

    fn far_model() -> ReadoutModel {
        ReadoutModel::from_separations([10.0, 10.0, 10.0]).unwrap()
    }

    #[test]
    fn integration_inner_product() {
        let rate = 1e9;
        let n = 1300;
        let wr: Vec<f64> = (0..n).map(|k| (k as f64 * 0.01).sin()).collect();
        let wi: Vec<f64> = (0..n).map(|k| (k as f64 * 0.003).cos()).collect();
        let mk = |v: Vec<f64>| SampledWaveform::new(v, rate, 0.0).unwrap();
        let w1 = EnvelopePair::new(mk(wr.clone()), mk(wi.clone()), 1.3e-6).unwrap();
        // s = conj(w1)
        let s = EnvelopePair::new(mk(wr.clone()), mk(wi.iter().map(|v| -v).collect()), 1.3e-6).unwrap();
        let shot = integrate_readout(&s, &w1, &w1).unwrap();
        let norm: f64 = (0..1200).map(|k| wr[k] * wr[k] + wi[k] * wi[k]).sum::<f64>() / rate;
        assert!((shot.u1 - norm).abs() < 1e-15);
        let zero = EnvelopePair::new(mk(vec![0.0; n]), mk(vec![0.0; n]), 1.3e-6).unwrap();
        let z = integrate_readout(&zero, &w1, &w1).unwrap();
        assert_eq!((z.u1, z.u2), (0.0, 0.0));
        let short = EnvelopePair::new(mk(vec![0.0; 100]), mk(vec![0.0; 100]), 1e-7).unwrap();
        assert!(integrate_readout(&short, &short, &short).is_err());
    }

    #[test]
    fn integration_is_linear() {
        let rate = 1e9;
        let mk = |f: &dyn Fn(f64) -> f64| SampledWaveform::from_fn(1200, rate, 0.0, f).unwrap();
        let pair = |a: &dyn Fn(f64) -> f64, b: &dyn Fn(f64) -> f64| EnvelopePair::new(mk(a), mk(b), 1.2e-6).unwrap();
        let w1 = pair(&|t| (3e6 * t).cos(), &|t| (5e6 * t).sin());
        let w2 = pair(&|t| 1.0 - t * 1e5, &|_| 0.3);
        let s1 = pair(&|t| (2e6 * t).sin(), &|t| t * 1e6);
        let s2 = pair(&|t| (7e6 * t).cos(), &|_| -0.2);
        let comb = pair(&|t| 2.0 * (2e6 * t).sin() - 0.5 * (7e6 * t).cos(), &|t| 2.0 * t * 1e6 + 0.1);
        let a = integrate_readout(&s1, &w1, &w2).unwrap();
        let b = integrate_readout(&s2, &w1, &w2).unwrap();
        let c = integrate_readout(&comb, &w1, &w2).unwrap();
        assert!((c.u1 - (2.0 * a.u1 - 0.5 * b.u1)).abs() < 1e-15);
        assert!((c.u2 - (2.0 * a.u2 - 0.5 * b.u2)).abs() < 1e-15);
    }

    #[test]
    fn shot_statistics_and_determinism() {
        let m = ReadoutModel::stand_in();
        let a = simulate_shots(QutritLabel::E, &m, 3000, 5).unwrap();
        assert_eq!(a, simulate_shots(QutritLabel::E, &m, 3000, 5).unwrap());
        let mean = a.iter().fold([0.0, 0.0], |acc, s| [acc[0] + s.u1, acc[1] + s.u2]);
        let bound = 5.0 / 3000f64.sqrt();
        assert!((mean[0] / 3000.0 - m.means[1][0]).abs() < bound);
        assert!((mean[1] / 3000.0 - m.means[1][1]).abs() < bound);
    }

    #[test]
    fn degenerate_covariance_rejected() {
        let c = [[1.0, 1.0], [1.0, 1.0]];
        let unit = [[1.0, 0.0], [0.0, 1.0]];
        assert!(ReadoutModel::new([[0.0; 2]; 3], [unit, unit, c]).is_err());
        assert!(ReadoutModel::from_separations([1.0, 1.0, 3.0]).is_err());
    }

    #[test]
    fn separation_fit_hits_target() {
        let seps = fit_separations(STAND_IN_ASSIGNMENT).unwrap();
        let p = voronoi_assignment(seps).unwrap();
        for k in 0..3 {
            assert!((p[k] - STAND_IN_ASSIGNMENT[k]).abs() < 1e-5);
        }
    }

    #[test]
    fn voronoi_two_cloud_limit() {
        // with f far away, g/e confusion is Phi(-d/2) each way
        let p = voronoi_assignment([3.0, 40.0, 40.0]).unwrap();
        let phi = 0.5 * (1.0 + erf_series(-1.5 / std::f64::consts::SQRT_2));
        assert!((p[0] - (1.0 - phi)).abs() < 1e-6, "{} {}", p[0], 1.0 - phi);
    }

    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        for n in 1..200 {
            term *= -x * x / n as f64;
            sum += term / (2 * n + 1) as f64;
        }
        2.0 / std::f64::consts::PI.sqrt() * sum
    }

    #[test]
    fn well_separated_fit_recovers_means() {
        let m = far_model();
        let shots = calibration(&m, 1000, 1);
        let c = label_centroids(&shots).unwrap();
        let unlabeled: Vec<IqShot> = shots.iter().map(|s| IqShot { label: None, ..*s }).collect();
        let g = fit_gmm(&unlabeled, &c, 3).unwrap();
        for k in 0..3 {
            let d = ((g.components[k].mean[0] - m.means[k][0]).powi(2) + (g.components[k].mean[1] - m.means[k][1]).powi(2)).sqrt();
            assert!(d < 0.05 + 3.0 / 1000f64.sqrt(), "{k}: {d}");
        }
        let a = assignment_matrix(&g, &shots).unwrap();
        for i in 0..3 {
            assert!(a.matrix[i][i] > 0.999);
            assert!((a.matrix[i].iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        assert!((a.average_assignment - (a.matrix[0][0] + a.matrix[1][1] + a.matrix[2][2]) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_cloud_is_flagged() {
        let m = far_model();
        let shots = simulate_shots(QutritLabel::G, &m, 900, 2).unwrap();
        let c = [[0.0, 0.0], [10.0, 0.0], [5.0, 8.66]];
        assert!(fit_gmm(&shots, &c, 0).is_err());
    }

    #[test]
    fn preselection_contracts() {
        let m = ReadoutModel::stand_in();
        let shots = calibration(&m, 1000, 9);
        let g = fit_gmm(&shots, &label_centroids(&shots).unwrap(), 0).unwrap();
        let far = far_model();
        let gs = simulate_shots(QutritLabel::G, &far, 500, 1).unwrap();
        let fs = simulate_shots(QutritLabel::F, &m, 500, 1).unwrap();
        let gfit = fit_gmm(&calibration(&far, 300, 4), &far.means, 1).unwrap();
        assert_eq!(preselect(&gs, &gs, &gfit).unwrap().discard_fraction, 0.0);
        assert!(preselect(&gs, &gs[..10], &gfit).is_err());
        // f shots of the stand-in model sit far from g
        let all_f = preselect(&fs, &fs, &g).unwrap();
        assert!(all_f.discard_fraction > 0.99);
    }

    #[test]
    fn missing_label_class_rejected() {
        let m = far_model();
        let shots = calibration(&m, 300, 1);
        let g = fit_gmm(&shots, &label_centroids(&shots).unwrap(), 0).unwrap();
        let only_g: Vec<IqShot> = shots.iter().filter(|s| s.label == Some(QutritLabel::G)).cloned().collect();
        assert!(assignment_matrix(&g, &only_g).is_err());
        assert!(label_centroids(&only_g).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let shots = vec![IqShot::new(0.1, -2.5, Some(QutritLabel::F)), IqShot::new(1e-3, 4.0, None)];
        let mut buf = Vec::new();
        write_shots_csv(&mut buf, &shots).unwrap();
        assert_eq!(read_shots_csv(&buf[..]).unwrap(), shots);
        assert!(read_shots_csv(&b"a,b\n"[..]).is_err());
        assert!(read_shots_csv(&b"u1,u2,label\n1,2,x\n"[..]).is_err());
    }

    fn rotate(s: &IqShot, a: f64) -> IqShot {
        IqShot { u1: a.cos() * s.u1 - a.sin() * s.u2, u2: a.sin() * s.u1 + a.cos() * s.u2, label: s.label }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(6))]
        #[test]
        fn fit_is_rotation_equivariant(angle in 0.0f64..(2.0 * PI)) {
            let m = ReadoutModel::from_separations([7.0, 8.0, 6.0]).unwrap();
            let shots = calibration(&m, 400, 2);
            let c = label_centroids(&shots).unwrap();
            let a = fit_gmm(&shots, &c, 7).unwrap();
            let rot: Vec<IqShot> = shots.iter().map(|s| rotate(s, angle)).collect();
            let b = fit_gmm(&rot, &label_centroids(&rot).unwrap(), 7).unwrap();
            for k in 0..3 {
                let p = a.components[k].mean;
                let want = rotate(&IqShot::new(p[0], p[1], None), angle);
                let got = b.components[k].mean;
                prop_assert!((got[0] - want.u1).abs() < 1e-6 && (got[1] - want.u2).abs() < 1e-6);
            }
        }
    }
}
