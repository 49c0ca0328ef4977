//! Least squares and IRLS logistic regression on standardized designs.

use nalgebra::{DMatrix, DVector};

use super::linalg::{independent_columns, solve_psd_dropping, weighted_normal_equations};
use crate::error::{Error, Result};

pub(crate) const IRLS_MAX_ITER: usize = 50;
pub(crate) const IRLS_TOL: f64 = 1e-8;
/// Mean-loss-scale ridge penalty used when the unpenalized fit separates.
pub(crate) const SEPARATION_RIDGE: f64 = 1e-4;
/// A linear predictor this large means fitted probabilities are numerically 0 or 1.
const SEPARATION_ETA: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LinearFit {
    pub intercept: f64,
    pub coef: Vec<f64>,
}

impl LinearFit {
    pub fn linear_predictor(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let b = DVector::from_column_slice(&self.coef);
        let eta = x * b;
        eta.iter().map(|v| v + self.intercept).collect()
    }
}

pub(crate) fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.clone().insert_column(0, 1.0)
}

/// Reduces an over-wide design to an independent column subset (intercept first).
fn reduce(z: DMatrix<f64>) -> (DMatrix<f64>, Option<Vec<usize>>) {
    if z.ncols() <= z.nrows() {
        return (z, None);
    }
    let keep = independent_columns(&z);
    (z.select_columns(&keep), Some(keep))
}

fn scatter(b: DVector<f64>, keep: &Option<Vec<usize>>, q: usize) -> LinearFit {
    let mut full = vec![0.0; q + 1];
    match keep {
        None => full.copy_from_slice(b.as_slice()),
        Some(k) => {
            for (pos, &j) in k.iter().enumerate() {
                full[j] = b[pos];
            }
        }
    }
    LinearFit {
        intercept: full[0],
        coef: full[1..].to_vec(),
    }
}

fn penalty_vec(cols: usize, ridge: f64) -> Vec<f64> {
    let mut pen = vec![ridge; cols];
    pen[0] = 0.0;
    pen
}

/// Ordinary (ridge > 0: penalized) least squares with an unpenalized intercept.
pub(crate) fn fit_gaussian(x: &DMatrix<f64>, y: &[f64], ridge: f64) -> LinearFit {
    let q = x.ncols();
    let (z, keep) = reduce(with_intercept(x));
    let (a, r) = weighted_normal_equations(&z, None, y);
    let b = solve_psd_dropping(&a, &penalty_vec(z.ncols(), ridge), &r);
    scatter(b, &keep, q)
}

fn deviance(eta: &[f64], y: &[f64]) -> f64 {
    -2.0 * eta
        .iter()
        .zip(y)
        .map(|(&e, &t)| {
            let p = expit(e).clamp(1e-300, 1.0 - 1e-16);
            t * p.ln() + (1.0 - t) * (1.0 - p).ln()
        })
        .sum::<f64>()
}

struct IrlsOutcome {
    fit: DVector<f64>,
    converged: bool,
    max_abs_eta: f64,
}

fn irls(z: &DMatrix<f64>, y: &[f64], ridge: f64) -> IrlsOutcome {
    let cols = z.ncols();
    let pen = penalty_vec(cols, ridge);
    let ybar = (y.iter().sum::<f64>() / y.len() as f64).clamp(1e-6, 1.0 - 1e-6);
    let mut b = DVector::zeros(cols);
    b[0] = logit(ybar);
    let objective = |b: &DVector<f64>| {
        let eta: Vec<f64> = (z * b).iter().copied().collect();
        let pen_term: f64 = (1..cols).map(|j| b[j] * b[j]).sum::<f64>() * ridge;
        (deviance(&eta, y) + pen_term, eta)
    };
    let (mut obj, mut eta) = objective(&b);
    let mut converged = false;
    for _ in 0..IRLS_MAX_ITER {
        let p: Vec<f64> = eta.iter().map(|&e| expit(e)).collect();
        let w: Vec<f64> = p.iter().map(|&pi| (pi * (1.0 - pi)).max(1e-10)).collect();
        let work: Vec<f64> = (0..y.len()).map(|i| eta[i] + (y[i] - p[i]) / w[i]).collect();
        let (a, r) = weighted_normal_equations(z, Some(&w), &work);
        let mut b_new = solve_psd_dropping(&a, &pen, &r);
        let (mut obj_new, mut eta_new) = objective(&b_new);
        // step halving keeps the penalized deviance monotone
        let mut halvings = 0;
        while !(obj_new <= obj + 1e-12 * obj.abs()) && halvings < 30 {
            b_new = (&b_new + &b) * 0.5;
            let (o, e) = objective(&b_new);
            obj_new = o;
            eta_new = e;
            halvings += 1;
        }
        let rel = (obj_new - obj).abs() / (obj_new.abs() + 0.1);
        b = b_new;
        obj = obj_new;
        eta = eta_new;
        if rel < IRLS_TOL {
            converged = true;
            break;
        }
        // separation is already evident; the caller refits with a penalty
        if ridge == 0.0 && eta.iter().any(|e| e.abs() > SEPARATION_ETA) {
            break;
        }
    }
    let max_abs_eta = eta.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    IrlsOutcome {
        fit: b,
        converged,
        max_abs_eta,
    }
}

/// Logistic regression by IRLS. If the unpenalized fit fails to converge or
/// separates the classes, it is refitted with a small ridge penalty.
pub(crate) fn fit_logistic(x: &DMatrix<f64>, y: &[f64], ridge: f64) -> Result<(LinearFit, bool)> {
    let n = y.len();
    let ones = y.iter().filter(|&&v| v == 1.0).count();
    if ones == 0 || ones == n {
        return Err(Error::Degenerate("single-class probability target".into()));
    }
    let q = x.ncols();
    let (z, keep) = reduce(with_intercept(x));
    let first = irls(&z, y, ridge);
    if first.converged && first.max_abs_eta <= SEPARATION_ETA {
        return Ok((scatter(first.fit, &keep, q), false));
    }
    let fallback = ridge.max(SEPARATION_RIDGE * n as f64);
    let second = irls(&z, y, fallback);
    if !second.converged {
        log::debug!("penalized IRLS stopped after {IRLS_MAX_ITER} iterations");
    }
    Ok((scatter(second.fit, &keep, q), true))
}
