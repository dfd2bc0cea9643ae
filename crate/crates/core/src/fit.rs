//! Small numerical optimizers shared by the calibration and benchmarking code.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct LmOptions {
    pub max_iter: usize,
    /// Stop when the relative cost decrease falls below this.
    pub ftol: f64,
    /// Stop when the relative step falls below this.
    pub xtol: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self { max_iter: 200, ftol: 1e-14, xtol: 1e-12 }
    }
}

#[derive(Debug, Clone)]
pub struct LmResult {
    pub params: Vec<f64>,
    /// `s^2 (J^T J)^-1` with `s^2` the residual variance.
    pub covariance: DMatrix<f64>,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl LmResult {
    pub fn std_err(&self, i: usize) -> f64 {
        self.covariance[(i, i)].max(0.0).sqrt()
    }
}

fn jacobian<F>(f: &F, x: &[f64], r0: &DVector<f64>, scales: &[f64]) -> DMatrix<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let mut jac = DMatrix::zeros(r0.len(), x.len());
    let mut xp = x.to_vec();
    for j in 0..x.len() {
        let h = 1e-6 * x[j].abs().max(scales[j]);
        xp[j] = x[j] + h;
        let rp = f(&xp);
        xp[j] = x[j] - h;
        let rm = f(&xp);
        xp[j] = x[j];
        for i in 0..r0.len() {
            jac[(i, j)] = (rp[i] - rm[i]) / (2.0 * h);
        }
    }
    jac
}

fn sum_sq(r: &DVector<f64>) -> f64 {
    r.iter().map(|v| v * v).sum()
}

/// Nonlinear least squares by Levenberg-Marquardt with a central-difference
/// Jacobian. `scales` gives the typical magnitude of each parameter and sets
/// the finite-difference step when the parameter is near zero.
pub fn levenberg_marquardt<F>(f: F, x0: &[f64], scales: &[f64], opts: LmOptions) -> Result<LmResult>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if x0.len() != scales.len() || x0.is_empty() {
        return Err(Error::Fit("parameter and scale vectors must match".into()));
    }
    let mut x = x0.to_vec();
    let mut r = DVector::from_vec(f(&x));
    if r.len() < x.len() {
        return Err(Error::Fit(format!(
            "{} residuals cannot constrain {} parameters",
            r.len(),
            x.len()
        )));
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::Fit("residuals not finite at the starting point".into()));
    }
    let mut cost = sum_sq(&r);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    let mut jac = jacobian(&f, &x, &r, scales);
    while iterations < opts.max_iter {
        iterations += 1;
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &r;
        let mut accepted = false;
        for _ in 0..30 {
            let mut a = jtj.clone();
            for d in 0..x.len() {
                a[(d, d)] += lambda * jtj[(d, d)].max(1e-300);
            }
            let Some(step) = a.lu().solve(&(-&g)) else {
                lambda *= 10.0;
                continue;
            };
            let xn: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let rn = DVector::from_vec(f(&xn));
            let cn = sum_sq(&rn);
            if cn.is_finite() && cn <= cost {
                let rel_step = step
                    .iter()
                    .zip(&x)
                    .zip(scales)
                    .map(|((s, v), sc)| s.abs() / v.abs().max(*sc))
                    .fold(0.0, f64::max);
                let rel_cost = (cost - cn) / cost.max(1e-300);
                x = xn;
                r = rn;
                cost = cn;
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if rel_cost < opts.ftol || rel_step < opts.xtol {
                    converged = true;
                }
                break;
            }
            lambda *= 4.0;
        }
        if !accepted {
            // No downhill step at any damping: we sit at a minimum to
            // machine precision.
            converged = true;
        }
        if converged {
            break;
        }
        jac = jacobian(&f, &x, &r, scales);
    }

    let jac = jacobian(&f, &x, &r, scales);
    let dof = (r.len() - x.len()).max(1) as f64;
    let s2 = cost / dof;
    let jtj = jac.transpose() * &jac;
    let covariance = jtj
        .clone()
        .try_inverse()
        .or_else(|| jtj.pseudo_inverse(1e-300).ok())
        .ok_or_else(|| Error::Fit("singular normal matrix".into()))?
        * s2;
    Ok(LmResult { params: x, covariance, cost, iterations, converged })
}

/// Ordinary least-squares line `y = slope x + intercept`.
pub fn linear_fit(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

pub fn linear_slope(points: &[(f64, f64)]) -> f64 {
    linear_fit(points).0
}

/// Derivative-free minimization by the Nelder-Mead simplex method.
pub fn nelder_mead<F>(f: F, x0: &[f64], step: &[f64], tol: f64, max_iter: usize) -> (Vec<f64>, f64)
where
    F: Fn(&[f64]) -> f64,
{
    let n = x0.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), f(x0)));
    for i in 0..n {
        let mut p = x0.to_vec();
        p[i] += step[i];
        let v = f(&p);
        simplex.push((p, v));
    }
    let lerp = |a: &[f64], b: &[f64], t: f64| -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect()
    };
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if (simplex[n].1 - simplex[0].1).abs() <= tol * (simplex[0].1.abs() + tol) {
            break;
        }
        let mut centroid = vec![0.0; n];
        for (p, _) in &simplex[..n] {
            centroid.iter_mut().zip(p).for_each(|(c, v)| *c += v / n as f64);
        }
        let worst = simplex[n].0.clone();
        let refl = lerp(&centroid, &worst, -1.0);
        let fr = f(&refl);
        if fr < simplex[0].1 {
            let exp = lerp(&centroid, &worst, -2.0);
            let fe = f(&exp);
            simplex[n] = if fe < fr { (exp, fe) } else { (refl, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (refl, fr);
        } else {
            let contr = if fr < simplex[n].1 {
                lerp(&centroid, &refl, 0.5)
            } else {
                lerp(&centroid, &worst, 0.5)
            };
            let fc = f(&contr);
            if fc < fr.min(simplex[n].1) {
                simplex[n] = (contr, fc);
            } else {
                let best = simplex[0].0.clone();
                for s in simplex.iter_mut().skip(1) {
                    s.0 = lerp(&best, &s.0, 0.5);
                    s.1 = f(&s.0);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex.swap_remove(0)
}
