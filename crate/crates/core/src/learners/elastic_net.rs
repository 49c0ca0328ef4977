//! Elastic net by cyclic coordinate descent over a log-spaced penalty path.
//!
//! The objective is `(1/2n) sum (y - b0 - x'b)^2 + lambda * ((1-alpha)/2 |b|^2 + alpha |b|_1)`
//! on internally standardized columns; the logistic case replaces the squared loss
//! by the mean negative log-likelihood and is solved by proximal Newton steps, each
//! a weighted least-squares coordinate descent.

use nalgebra::{DMatrix, DVector};

use super::glm::{expit, LinearFit};
use crate::error::{Error, Result};
use crate::folds::FoldPlan;
use crate::rng::RngStream;

/// Convergence tolerance on the largest coefficient change in a sweep.
pub(crate) const CD_TOL: f64 = 1e-7;
const MAX_SWEEPS: usize = 100_000;
/// Logistic convergence threshold on the largest weighted squared coordinate
/// change `x_j' W x_j / n * delta^2`, relative to the null deviance per record.
const LOGISTIC_CD_TOL: f64 = 1e-7;
const MAX_OUTER: usize = 25;
const MIN_WEIGHT: f64 = 1e-5;
const PATH_DEV_CHANGE: f64 = 1e-5;
const PATH_DEV_MAX: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct EnParams {
    pub alpha: f64,
    pub lambda: Option<f64>,
    pub n_lambda: usize,
    pub cv_folds: usize,
}

fn soft(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Columns standardized to mean 0 and population SD 1; constant columns become 0
/// and are never updated.
struct Standardized {
    x: DMatrix<f64>,
    mean: Vec<f64>,
    sd: Vec<f64>,
}

impl Standardized {
    fn new(x: &DMatrix<f64>) -> Standardized {
        let n = x.nrows() as f64;
        let mut out = x.clone();
        let mut mean = Vec::with_capacity(x.ncols());
        let mut sd = Vec::with_capacity(x.ncols());
        for mut col in out.column_iter_mut() {
            let m = col.iter().sum::<f64>() / n;
            let v = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            let s = v.sqrt();
            let s = if s > 1e-12 * (1.0 + m.abs()) { s } else { 0.0 };
            for v in col.iter_mut() {
                *v = if s > 0.0 { (*v - m) / s } else { 0.0 };
            }
            mean.push(m);
            sd.push(s);
        }
        Standardized { x: out, mean, sd }
    }

    fn to_input_scale(&self, b0: f64, b: &[f64]) -> LinearFit {
        let coef: Vec<f64> = b
            .iter()
            .zip(&self.sd)
            .map(|(bj, s)| if *s > 0.0 { bj / s } else { 0.0 })
            .collect();
        let shift: f64 = coef.iter().zip(&self.mean).map(|(c, m)| c * m).sum();
        LinearFit {
            intercept: b0 - shift,
            coef,
        }
    }
}

/// Squared-loss solver in covariance form: the Gram matrix is formed once and each
/// coordinate update costs O(q).
struct GaussianSolver {
    gram: DMatrix<f64>,
    active: Vec<bool>,
    c: Vec<f64>,
    ybar: f64,
    var_y: f64,
    b: Vec<f64>,
    grad: Vec<f64>,
}

impl GaussianSolver {
    fn new(s: &Standardized, y: &[f64]) -> GaussianSolver {
        let n = y.len() as f64;
        let ybar = y.iter().sum::<f64>() / n;
        let yc = DVector::from_iterator(y.len(), y.iter().map(|v| v - ybar));
        let gram = super::linalg::gram(&s.x) / n;
        let c: Vec<f64> = (s.x.tr_mul(&yc) / n).iter().copied().collect();
        let var_y = yc.norm_squared() / n;
        let q = c.len();
        GaussianSolver {
            active: s.sd.iter().map(|&v| v > 0.0).collect(),
            grad: c.clone(),
            gram,
            c,
            ybar,
            var_y,
            b: vec![0.0; q],
        }
    }

    fn lambda_max(&self, alpha: f64) -> f64 {
        self.c.iter().fold(0.0f64, |m, v| m.max(v.abs())) / alpha.max(1e-3)
    }

    fn sweep(&mut self, lambda: f64, alpha: f64, only_nonzero: bool) -> f64 {
        let q = self.b.len();
        let mut max_change = 0.0f64;
        for j in 0..q {
            if !self.active[j] || (only_nonzero && self.b[j] == 0.0) {
                continue;
            }
            let gjj = self.gram[(j, j)];
            let old = self.b[j];
            let z = self.grad[j] + gjj * old;
            let new = soft(z, lambda * alpha) / (gjj + lambda * (1.0 - alpha));
            let delta = new - old;
            if delta != 0.0 {
                self.b[j] = new;
                for k in 0..q {
                    self.grad[k] -= self.gram[(k, j)] * delta;
                }
                max_change = max_change.max(delta.abs());
            }
        }
        max_change
    }

    fn solve(&mut self, lambda: f64, alpha: f64) -> Result<()> {
        for _ in 0..MAX_SWEEPS {
            if self.sweep(lambda, alpha, false) < CD_TOL {
                return Ok(());
            }
            let mut inner = 0;
            while self.sweep(lambda, alpha, true) >= CD_TOL {
                inner += 1;
                if inner > MAX_SWEEPS {
                    break;
                }
            }
        }
        Err(Error::Convergence(format!("coordinate descent did not converge at lambda {lambda}")))
    }

    /// Fraction of null deviance explained.
    fn dev_ratio(&self) -> f64 {
        if self.var_y == 0.0 {
            return 0.0;
        }
        // RSS/n = var_y - 2 b'c + b'Gb, and Gb = c - grad
        let bc: f64 = self.b.iter().zip(&self.c).map(|(b, c)| b * c).sum();
        let bgb: f64 = self.b.iter().enumerate().map(|(j, b)| b * (self.c[j] - self.grad[j])).sum();
        1.0 - (self.var_y - 2.0 * bc + bgb) / self.var_y
    }

    fn current(&self) -> (f64, Vec<f64>) {
        (self.ybar, self.b.clone())
    }
}

/// Logistic solver with residual (naive) coordinate updates inside proximal Newton steps.
struct LogisticSolver<'a> {
    s: &'a Standardized,
    y: &'a [f64],
    b0: f64,
    b: Vec<f64>,
    null_dev: f64,
    dev: f64,
}

fn binomial_deviance(y: &[f64], p: impl Iterator<Item = f64>) -> f64 {
    -2.0 * y
        .iter()
        .zip(p)
        .map(|(&t, pi)| {
            let pi = pi.clamp(1e-15, 1.0 - 1e-15);
            t * pi.ln() + (1.0 - t) * (1.0 - pi).ln()
        })
        .sum::<f64>()
}

impl<'a> LogisticSolver<'a> {
    fn new(s: &'a Standardized, y: &'a [f64]) -> LogisticSolver<'a> {
        let n = y.len() as f64;
        let ybar = (y.iter().sum::<f64>() / n).clamp(1e-6, 1.0 - 1e-6);
        let b0 = (ybar / (1.0 - ybar)).ln();
        let null_dev = binomial_deviance(y, std::iter::repeat(ybar));
        LogisticSolver {
            s,
            y,
            b0,
            b: vec![0.0; s.x.ncols()],
            null_dev,
            dev: null_dev,
        }
    }

    fn lambda_max(&self, alpha: f64) -> f64 {
        let n = self.y.len() as f64;
        let ybar = self.y.iter().sum::<f64>() / n;
        let r = DVector::from_iterator(self.y.len(), self.y.iter().map(|v| v - ybar));
        let g = self.s.x.tr_mul(&r) / n;
        g.iter().fold(0.0f64, |m, v| m.max(v.abs())) / alpha.max(1e-3)
    }

    fn eta(&self) -> Vec<f64> {
        let b = DVector::from_column_slice(&self.b);
        (&self.s.x * b).iter().map(|v| v + self.b0).collect()
    }

    /// Proximal Newton: each step minimizes the penalized quadratic approximation
    /// by covariance-form coordinate descent over `[intercept, b]`.
    fn solve(&mut self, lambda: f64, alpha: f64) -> Result<()> {
        let n = self.y.len();
        let nf = n as f64;
        let q = self.b.len();
        let x = &self.s.x;
        let tol = LOGISTIC_CD_TOL * self.null_dev / nf;
        for _ in 0..MAX_OUTER {
            let eta = self.eta();
            let p: Vec<f64> = eta.iter().map(|&e| expit(e)).collect();
            let w: Vec<f64> = p.iter().map(|&pi| (pi * (1.0 - pi)).max(MIN_WEIGHT)).collect();
            let wz: Vec<f64> = (0..n).map(|i| w[i] * eta[i] + (self.y[i] - p[i])).collect();
            let sw = w.iter().sum::<f64>() / nf;
            let root_w = DVector::from_iterator(n, w.iter().map(|v| v.sqrt()));
            let mut xs = x.clone();
            for mut col in xs.column_iter_mut() {
                col.component_mul_assign(&root_w);
            }
            let gram = super::linalg::gram(&xs) / nf;
            let xw: Vec<f64> = (x.tr_mul(&DVector::from_column_slice(&w)) / nf).iter().copied().collect();
            let c: Vec<f64> = (x.tr_mul(&DVector::from_column_slice(&wz)) / nf).iter().copied().collect();
            let c0 = wz.iter().sum::<f64>() / nf;
            // gradients of the quadratic at the current point
            let gb = &gram * DVector::from_column_slice(&self.b);
            let mut grad: Vec<f64> = (0..q).map(|j| c[j] - gb[j] - xw[j] * self.b0).collect();
            let mut grad0 = c0 - sw * self.b0 - xw.iter().zip(&self.b).map(|(a, b)| a * b).sum::<f64>();
            let active: Vec<bool> = (0..q).map(|j| self.s.sd[j] > 0.0 && gram[(j, j)] > 0.0).collect();
            let start_b0 = self.b0;
            let start_b = self.b.clone();
            let mut sweep = |b0: &mut f64, b: &mut [f64], only_nonzero: bool| {
                let d0 = grad0 / sw;
                *b0 += d0;
                grad0 = 0.0;
                for (g, a) in grad.iter_mut().zip(&xw) {
                    *g -= a * d0;
                }
                let mut max_change = sw * d0 * d0;
                for j in 0..q {
                    if !active[j] || (only_nonzero && b[j] == 0.0) {
                        continue;
                    }
                    let gjj = gram[(j, j)];
                    let old = b[j];
                    let new = soft(grad[j] + gjj * old, lambda * alpha) / (gjj + lambda * (1.0 - alpha));
                    let delta = new - old;
                    if delta != 0.0 {
                        b[j] = new;
                        for (k, g) in grad.iter_mut().enumerate() {
                            *g -= gram[(k, j)] * delta;
                        }
                        grad0 -= xw[j] * delta;
                        max_change = max_change.max(gjj * delta * delta);
                    }
                }
                max_change
            };
            let mut converged = false;
            for _ in 0..MAX_SWEEPS {
                if sweep(&mut self.b0, &mut self.b, false) < tol {
                    converged = true;
                    break;
                }
                let mut inner = 0;
                while sweep(&mut self.b0, &mut self.b, true) >= tol && inner < MAX_SWEEPS {
                    inner += 1;
                }
            }
            if !converged {
                return Err(Error::Convergence(format!(
                    "coordinate descent did not converge at lambda {lambda}"
                )));
            }
            let change = (0..q)
                .map(|j| gram[(j, j)] * (start_b[j] - self.b[j]).powi(2))
                .fold(sw * (start_b0 - self.b0).powi(2), f64::max);
            if change < tol {
                break;
            }
        }
        self.dev = binomial_deviance(self.y, self.eta().into_iter().map(expit));
        Ok(())
    }

    fn dev_ratio(&self) -> f64 {
        if self.null_dev > 0.0 {
            1.0 - self.dev / self.null_dev
        } else {
            0.0
        }
    }

    fn current(&self) -> (f64, Vec<f64>) {
        (self.b0, self.b.clone())
    }
}

enum Solver<'a> {
    Gaussian(GaussianSolver),
    Logistic(LogisticSolver<'a>),
}

impl Solver<'_> {
    fn lambda_max(&self, alpha: f64) -> f64 {
        match self {
            Solver::Gaussian(s) => s.lambda_max(alpha),
            Solver::Logistic(s) => s.lambda_max(alpha),
        }
    }
    fn solve(&mut self, lambda: f64, alpha: f64) -> Result<()> {
        match self {
            Solver::Gaussian(s) => s.solve(lambda, alpha),
            Solver::Logistic(s) => s.solve(lambda, alpha),
        }
    }
    fn dev_ratio(&self) -> f64 {
        match self {
            Solver::Gaussian(s) => s.dev_ratio(),
            Solver::Logistic(s) => s.dev_ratio(),
        }
    }
    fn current(&self) -> (f64, Vec<f64>) {
        match self {
            Solver::Gaussian(s) => s.current(),
            Solver::Logistic(s) => s.current(),
        }
    }
}

fn solver<'a>(s: &'a Standardized, y: &'a [f64], logistic: bool) -> Solver<'a> {
    if logistic {
        Solver::Logistic(LogisticSolver::new(s, y))
    } else {
        Solver::Gaussian(GaussianSolver::new(s, y))
    }
}

/// Fits along `lambdas` with warm starts. With `early_stop`, the path ends once the
/// explained deviance saturates.
fn fit_path(x: &DMatrix<f64>, y: &[f64], alpha: f64, lambdas: &[f64], logistic: bool, early_stop: bool) -> Result<Vec<LinearFit>> {
    let s = Standardized::new(x);
    let mut sol = solver(&s, y, logistic);
    let mut fits = Vec::with_capacity(lambdas.len());
    let mut prev_ratio = 0.0;
    for (k, &lambda) in lambdas.iter().enumerate() {
        sol.solve(lambda, alpha)?;
        let (b0, b) = sol.current();
        fits.push(s.to_input_scale(b0, &b));
        if early_stop && k > 0 {
            let ratio = sol.dev_ratio();
            if ratio - prev_ratio < PATH_DEV_CHANGE * ratio || ratio > PATH_DEV_MAX {
                break;
            }
            prev_ratio = ratio;
        } else {
            prev_ratio = sol.dev_ratio();
        }
    }
    Ok(fits)
}

/// Log-spaced penalty sequence from the smallest penalty zeroing every slope.
pub(crate) fn lambda_path(x: &DMatrix<f64>, y: &[f64], alpha: f64, n_lambda: usize, logistic: bool) -> Vec<f64> {
    let s = Standardized::new(x);
    let lmax = solver(&s, y, logistic).lambda_max(alpha);
    if !(lmax > 0.0) || n_lambda == 1 {
        return vec![lmax.max(0.0)];
    }
    let ratio: f64 = if x.nrows() > x.ncols() { 1e-4 } else { 1e-2 };
    (0..n_lambda)
        .map(|k| lmax * ratio.powf(k as f64 / (n_lambda - 1) as f64))
        .collect()
}

fn loss(pred: f64, y: f64, logistic: bool) -> f64 {
    if logistic {
        let p = expit(pred).clamp(1e-15, 1.0 - 1e-15);
        -2.0 * (y * p.ln() + (1.0 - y) * (1.0 - p).ln())
    } else {
        (y - pred) * (y - pred)
    }
}

/// Selected fit plus the penalty chosen.
pub(crate) struct EnFit {
    pub fit: LinearFit,
    pub lambda: f64,
}

pub(crate) fn fit_elastic_net(x: &DMatrix<f64>, y: &[f64], params: EnParams, logistic: bool, rng: &mut RngStream) -> Result<EnFit> {
    if !(0.0..=1.0).contains(&params.alpha) {
        return Err(Error::invalid(format!("elastic-net alpha {} outside [0, 1]", params.alpha)));
    }
    if let Some(lambda) = params.lambda {
        if !(lambda >= 0.0) {
            return Err(Error::invalid("elastic-net lambda must be non-negative"));
        }
        let fit = fit_path(x, y, params.alpha, &[lambda], logistic, false)?.pop().unwrap();
        return Ok(EnFit { fit, lambda });
    }
    let lambdas = lambda_path(x, y, params.alpha, params.n_lambda.max(1), logistic);
    let full = fit_path(x, y, params.alpha, &lambdas, logistic, true)?;
    let lambdas = &lambdas[..full.len()];
    let n = y.len();
    let folds = if logistic {
        let minority = y.iter().filter(|&&v| v == 1.0).count().min(y.iter().filter(|&&v| v != 1.0).count());
        let k = params.cv_folds.min(minority);
        if k < 2 {
            return Err(Error::Degenerate("too few minority-class records for elastic-net CV".into()));
        }
        FoldPlan::stratified(y, k, rng)?
    } else {
        FoldPlan::random(n, params.cv_folds.min(n), rng)?
    };
    let mut cv_loss = vec![0.0; lambdas.len()];
    for f in 0..folds.k() {
        let train = folds.complement(f);
        let test = folds.members(f);
        let xt = x.select_rows(&train);
        let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let fits = fit_path(&xt, &yt, params.alpha, lambdas, logistic, false)?;
        let xv = x.select_rows(&test);
        for (k, fit) in fits.iter().enumerate() {
            let eta = fit.linear_predictor(&xv);
            cv_loss[k] += test.iter().zip(&eta).map(|(&i, &e)| loss(e, y[i], logistic)).sum::<f64>();
        }
    }
    let best = (0..cv_loss.len()).fold(0, |b, k| if cv_loss[k] < cv_loss[b] { k } else { b });
    Ok(EnFit {
        fit: full[best].clone(),
        lambda: lambdas[best],
    })
}
