//! Super Learner: V-fold cross-validated predictions from a library of learners,
//! convex meta-weights minimizing the cross-validated risk, and the weighted
//! combination of learners refitted on all training rows.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::folds::FoldPlan;
use crate::learners::{check_target, fit_learner, DesignMatrix, FittedLearner, LearnerKind, LearnerSpec, Task, PROB_CLAMP};
use crate::rng::RngStream;

/// Default number of Super Learner cross-validation folds.
pub const DEFAULT_SL_FOLDS: usize = 10;

const PGD_TOL: f64 = 1e-8;
const PGD_MAX_ITER: usize = 10_000;
const MAX_HALVINGS: usize = 60;
/// Substream reserved for the final refits on all training rows.
const REFIT_STREAM: u64 = 1 << 32;

/// An ordered set of candidate learners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Library {
    pub label: String,
    pub learners: Vec<LearnerKind>,
}

impl Library {
    pub fn new(label: impl Into<String>, learners: Vec<LearnerKind>) -> Result<Library> {
        let lib = Library {
            label: label.into(),
            learners,
        };
        lib.validate()?;
        Ok(lib)
    }

    /// GLM, GLM with pairwise interactions, ridge GLM, spline GLM, lasso and elastic net.
    pub fn reduced() -> Library {
        Library {
            label: "reduced".into(),
            learners: vec![
                LearnerKind::GlmMain,
                LearnerKind::GlmInteractions,
                LearnerKind::ridge_glm(),
                LearnerKind::spline_glm(),
                LearnerKind::elastic_net(1.0),
                LearnerKind::elastic_net(0.5),
            ],
        }
    }

    /// The reduced library plus a random forest and gradient-boosted trees.
    pub fn full() -> Library {
        let mut lib = Library::reduced();
        lib.label = "full".into();
        lib.learners.push(LearnerKind::random_forest());
        lib.learners.push(LearnerKind::gradient_boosting());
        lib
    }

    /// Looks up a built-in library by label.
    pub fn named(label: &str) -> Option<Library> {
        match label {
            "reduced" => Some(Library::reduced()),
            "full" => Some(Library::full()),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        self.learners.len()
    }

    pub fn is_empty(&self) -> bool {
        self.learners.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.learners.is_empty() {
            return Err(Error::invalid(format!("library '{}' is empty", self.label)));
        }
        for (i, a) in self.learners.iter().enumerate() {
            a.validate()?;
            if self.learners[..i].contains(a) {
                return Err(Error::invalid(format!(
                    "library '{}' lists {} twice with identical settings",
                    self.label,
                    a.label()
                )));
            }
        }
        Ok(())
    }
}

/// Out-of-fold predictions: column `l` holds learner `learners[l]`'s predictions,
/// each produced by a fit that excluded the record's fold.
#[derive(Debug, Clone)]
pub struct CvPredictionMatrix {
    pub z: DMatrix<f64>,
    pub folds: FoldPlan,
    pub task: Task,
    /// Library positions of the columns of `z`; learners that failed to fit in
    /// any fold are left out.
    pub learners: Vec<usize>,
}

/// Largest admissible V: every training complement must be non-degenerate.
fn admissible_folds(task: Task, target: &[f64]) -> usize {
    match task {
        Task::Regression => target.len(),
        Task::Probability => {
            let ones = target.iter().filter(|&&v| v == 1.0).count();
            ones.min(target.len() - ones)
        }
    }
}

fn check_inputs(library: &Library, design: &DesignMatrix, target: &[f64], task: Task) -> Result<()> {
    library.validate()?;
    if design.nrows() != target.len() {
        return Err(Error::invalid("design rows and target length differ"));
    }
    check_target(task, target)?;
    if task == Task::Regression && target.iter().all(|&v| v == target[0]) {
        return Err(Error::Degenerate("constant regression target".into()));
    }
    Ok(())
}

fn make_plan(task: Task, target: &[f64], v: usize, rng: &RngStream) -> Result<FoldPlan> {
    if v < 2 {
        return Err(Error::invalid(format!("SL folds must satisfy V >= 2, got {v}")));
    }
    let cap = admissible_folds(task, target);
    let used = v.min(cap);
    if used < 2 {
        return Err(Error::Degenerate(format!(
            "cannot form 2 cross-validation folds (admissible maximum {cap})"
        )));
    }
    if used < v {
        log::warn!("Super Learner folds reduced from {v} to {used}");
    }
    let mut stream = rng.substream(0);
    match task {
        Task::Probability => FoldPlan::stratified(target, used, &mut stream),
        Task::Regression => FoldPlan::random(target.len(), used, &mut stream),
    }
}

/// Cross-validated predictions of every library learner.
pub fn cv_prediction_matrix(
    library: &Library,
    design: &DesignMatrix,
    target: &[f64],
    v: usize,
    task: Task,
    rng: &RngStream,
) -> Result<CvPredictionMatrix> {
    check_inputs(library, design, target, task)?;
    let plan = make_plan(task, target, v, rng)?;
    cv_prediction_matrix_with_plan(library, design, target, plan, task, rng)
}

/// As [`cv_prediction_matrix`] with a caller-supplied fold plan.
pub fn cv_prediction_matrix_with_plan(
    library: &Library,
    design: &DesignMatrix,
    target: &[f64],
    plan: FoldPlan,
    task: Task,
    rng: &RngStream,
) -> Result<CvPredictionMatrix> {
    check_inputs(library, design, target, task)?;
    if plan.len() != target.len() {
        return Err(Error::invalid("fold plan length does not match the data"));
    }
    let n = target.len();
    let l = library.len();
    let jobs: Vec<(usize, usize)> = (0..plan.k()).flat_map(|f| (0..l).map(move |j| (f, j))).collect();
    let results: Vec<Result<Vec<f64>>> = jobs
        .par_iter()
        .map(|&(f, j)| {
            let train = plan.complement(f);
            let test = plan.members(f);
            let ytrain: Vec<f64> = train.iter().map(|&i| target[i]).collect();
            let spec = LearnerSpec::new(library.learners[j].clone(), task);
            let mut stream = rng.substream(1 + f as u64).substream(j as u64);
            let fit = fit_learner(&spec, &design.rows(&train), &ytrain, &mut stream)?;
            fit.predict(&design.rows(&test))
        })
        .collect();
    let mut z = DMatrix::zeros(n, l);
    let mut ok = vec![true; l];
    for (&(f, j), res) in jobs.iter().zip(results) {
        match res {
            Ok(pred) => {
                for (&i, p) in plan.members(f).iter().zip(pred) {
                    z[(i, j)] = p;
                }
            }
            Err(e) => {
                if ok[j] {
                    log::warn!("learner {} failed in CV fold {f}: {e}", library.learners[j].label());
                }
                ok[j] = false;
            }
        }
    }
    let learners: Vec<usize> = (0..l).filter(|&j| ok[j]).collect();
    if learners.is_empty() {
        return Err(Error::Degenerate("every library learner failed to fit".into()));
    }
    let z = z.select_columns(&learners);
    Ok(CvPredictionMatrix {
        z,
        folds: plan,
        task,
        learners,
    })
}

/// Mean loss of a prediction vector: squared error, or log-loss for probabilities.
pub fn risk(pred: &[f64], target: &[f64], task: Task) -> f64 {
    let n = target.len() as f64;
    match task {
        Task::Regression => pred.iter().zip(target).map(|(p, y)| (y - p) * (y - p)).sum::<f64>() / n,
        Task::Probability => {
            -pred
                .iter()
                .zip(target)
                .map(|(&p, &y)| {
                    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                    y * p.ln() + (1.0 - y) * (1.0 - p).ln()
                })
                .sum::<f64>()
                / n
        }
    }
}

fn combine(z: &DMatrix<f64>, w: &[f64]) -> Vec<f64> {
    (z * DVector::from_column_slice(w)).iter().copied().collect()
}

/// Euclidean projection onto the probability simplex.
fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut css = 0.0;
    let mut theta = 0.0;
    for (k, &uk) in u.iter().enumerate() {
        css += uk;
        let t = (css - 1.0) / (k + 1) as f64;
        if uk - t > 0.0 {
            theta = t;
        }
    }
    let mut w: Vec<f64> = v.iter().map(|x| (x - theta).max(0.0)).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    w
}

/// Lawson-Hanson non-negative least squares.
pub fn nnls(a: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
    let m = a.ncols();
    let bv = DVector::from_column_slice(b);
    let mut x = DVector::zeros(m);
    let mut passive = vec![false; m];
    let tol = 1e-12 * (1.0 + a.norm() * bv.norm());
    for _ in 0..(3 * m + 10) {
        let grad = a.tr_mul(&(&bv - a * &x));
        let cand = (0..m)
            .filter(|&j| !passive[j] && grad[j] > tol)
            .max_by(|&i, &j| grad[i].total_cmp(&grad[j]));
        let Some(j) = cand else { break };
        passive[j] = true;
        loop {
            let idx: Vec<usize> = (0..m).filter(|&k| passive[k]).collect();
            let sub = a.select_columns(&idx);
            let s = sub
                .clone()
                .svd(true, true)
                .solve(&bv, 1e-12)
                .unwrap_or_else(|_| DVector::zeros(idx.len()));
            if s.iter().all(|&v| v > 0.0) {
                for (pos, &k) in idx.iter().enumerate() {
                    x[k] = s[pos];
                }
                break;
            }
            // step back towards the previous feasible point
            let mut alpha = f64::INFINITY;
            for (pos, &k) in idx.iter().enumerate() {
                if s[pos] <= 0.0 {
                    let denom = x[k] - s[pos];
                    if denom > 0.0 {
                        alpha = alpha.min(x[k] / denom);
                    }
                }
            }
            if !alpha.is_finite() {
                alpha = 0.0;
            }
            for (pos, &k) in idx.iter().enumerate() {
                x[k] += alpha * (s[pos] - x[k]);
                if x[k] <= 1e-15 {
                    x[k] = 0.0;
                    passive[k] = false;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    x.iter().copied().collect()
}

fn gradient(z: &DMatrix<f64>, target: &[f64], w: &[f64], task: Task) -> Vec<f64> {
    let n = target.len() as f64;
    let pred = combine(z, w);
    let resid: Vec<f64> = match task {
        Task::Regression => pred.iter().zip(target).map(|(p, y)| 2.0 * (p - y) / n).collect(),
        Task::Probability => pred
            .iter()
            .zip(target)
            .map(|(&p, &y)| {
                let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                (-(y / p) + (1.0 - y) / (1.0 - p)) / n
            })
            .collect(),
    };
    z.tr_mul(&DVector::from_vec(resid)).iter().copied().collect()
}

/// Monotone projected gradient descent on the simplex with step halving.
fn simplex_descent(z: &DMatrix<f64>, target: &[f64], start: Vec<f64>, task: Task) -> Vec<f64> {
    let n = target.len() as f64;
    // squared loss has a known Lipschitz bound; the log-loss step is found by halving
    let lip = 2.0 * z.norm_squared() / n;
    let mut step = match task {
        Task::Regression if lip > 0.0 => 1.0 / lip,
        _ => 1.0,
    };
    let mut w = start;
    let mut r = risk(&combine(z, &w), target, task);
    for _ in 0..PGD_MAX_ITER {
        let g = gradient(z, target, &w, task);
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let trial: Vec<f64> = w.iter().zip(&g).map(|(wi, gi)| wi - step * gi).collect();
            let cand = project_simplex(&trial);
            let rc = risk(&combine(z, &cand), target, task);
            if rc < r {
                accepted = Some((cand, rc));
                break;
            }
            step /= 2.0;
        }
        let Some((cand, rc)) = accepted else { break };
        let change = cand.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        w = cand;
        r = rc;
        step *= 2.0;
        if change < PGD_TOL {
            break;
        }
    }
    w
}

/// Convex weights and whether the discrete (best single learner) fallback was used.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaWeights {
    pub weights: Vec<f64>,
    pub discrete_fallback: bool,
}

/// Meta-learner. Regression: non-negative least squares, normalized to the
/// simplex and refined by projected gradient on the simplex-constrained squared
/// loss (the normalized solution and the best single learner both seed the
/// refinement, so the result is never worse than either). If the non-negative
/// solution is identically zero the best single learner gets all the weight.
/// Probability: projected gradient on the log-loss from the best single learner.
pub fn solve_meta_weights(z: &DMatrix<f64>, target: &[f64], task: Task) -> Result<MetaWeights> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite cross-validated prediction"));
    }
    if z.nrows() != target.len() || z.ncols() == 0 {
        return Err(Error::invalid("cross-validated prediction matrix has the wrong shape"));
    }
    let l = z.ncols();
    if l == 1 {
        return Ok(MetaWeights {
            weights: vec![1.0],
            discrete_fallback: false,
        });
    }
    let risks: Vec<f64> = (0..l)
        .map(|j| risk(z.column(j).as_slice(), target, task))
        .collect();
    let best = (0..l).fold(0, |b, j| if risks[j] < risks[b] { j } else { b });
    let vertex = |j: usize| {
        let mut w = vec![0.0; l];
        w[j] = 1.0;
        w
    };
    let start = match task {
        Task::Regression => {
            let raw = nnls(z, target);
            let total: f64 = raw.iter().sum();
            if !(total > 0.0) {
                return Ok(MetaWeights {
                    weights: vertex(best),
                    discrete_fallback: true,
                });
            }
            let normalized: Vec<f64> = raw.iter().map(|w| w / total).collect();
            if risk(&combine(z, &normalized), target, task) <= risks[best] {
                normalized
            } else {
                vertex(best)
            }
        }
        Task::Probability => vertex(best),
    };
    let mut weights = simplex_descent(z, target, start, task);
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(MetaWeights {
        weights,
        discrete_fallback: false,
    })
}

/// Per-learner diagnostics exported with estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlSummary {
    pub learners: Vec<String>,
    pub weights: Vec<f64>,
    /// Cross-validated risk per learner; `None` when the learner failed to fit.
    pub cv_risk: Vec<Option<f64>>,
    pub combined_cv_risk: f64,
    pub folds: usize,
    pub discrete_fallback: bool,
}

/// A fitted Super Learner.
#[derive(Debug, Clone)]
pub struct SlFit {
    library: Library,
    task: Task,
    weights: Vec<f64>,
    fits: Vec<Option<FittedLearner>>,
    cv_risk: Vec<Option<f64>>,
    combined_cv_risk: f64,
    folds: usize,
    discrete_fallback: bool,
}

/// Fits the Super Learner: cross-validated predictions, meta-weights, then a
/// refit of every learner with positive weight on all rows (zero-weight learners
/// cannot affect predictions and are not refitted).
pub fn fit_super_learner(
    library: &Library,
    design: &DesignMatrix,
    target: &[f64],
    v: usize,
    task: Task,
    rng: &RngStream,
) -> Result<SlFit> {
    let cv = cv_prediction_matrix(library, design, target, v, task, rng)?;
    fit_from_cv(library, design, target, cv, rng)
}

/// Completes a Super Learner fit from an already computed CV prediction matrix.
pub fn fit_from_cv(
    library: &Library,
    design: &DesignMatrix,
    target: &[f64],
    cv: CvPredictionMatrix,
    rng: &RngStream,
) -> Result<SlFit> {
    let l = library.len();
    let task = cv.task;
    let meta = solve_meta_weights(&cv.z, target, task)?;
    let mut weights = vec![0.0; l];
    let mut cv_risk = vec![None; l];
    for (col, &j) in cv.learners.iter().enumerate() {
        weights[j] = meta.weights[col];
        cv_risk[j] = Some(risk(cv.z.column(col).as_slice(), target, task));
    }
    let combined_cv_risk = risk(&combine(&cv.z, &meta.weights), target, task);
    let refit: Vec<usize> = (0..l).filter(|&j| weights[j] > 0.0).collect();
    let fitted: Vec<Result<FittedLearner>> = refit
        .par_iter()
        .map(|&j| {
            let spec = LearnerSpec::new(library.learners[j].clone(), task);
            let mut stream = rng.substream(REFIT_STREAM).substream(j as u64);
            fit_learner(&spec, design, target, &mut stream)
        })
        .collect();
    let mut fits = vec![None; l];
    for (&j, res) in refit.iter().zip(fitted) {
        fits[j] = Some(res?);
    }
    Ok(SlFit {
        library: library.clone(),
        task,
        weights,
        fits,
        cv_risk,
        combined_cv_risk,
        folds: cv.folds.k(),
        discrete_fallback: meta.discrete_fallback,
    })
}

impl SlFit {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn library(&self) -> &Library {
        &self.library
    }

    pub fn cv_risk(&self) -> &[Option<f64>] {
        &self.cv_risk
    }

    /// Cross-validated risk of the weighted combination.
    pub fn combined_cv_risk(&self) -> f64 {
        self.combined_cv_risk
    }

    /// Refitted learner at library position `j`, if it carries weight.
    pub fn learner(&self, j: usize) -> Option<&FittedLearner> {
        self.fits[j].as_ref()
    }

    pub fn summary(&self) -> SlSummary {
        SlSummary {
            learners: self.library.learners.iter().map(|k| k.label()).collect(),
            weights: self.weights.clone(),
            cv_risk: self.cv_risk.clone(),
            combined_cv_risk: self.combined_cv_risk,
            folds: self.folds,
            discrete_fallback: self.discrete_fallback,
        }
    }

    pub fn predict(&self, design: &DesignMatrix) -> Result<Vec<f64>> {
        let mut out = vec![0.0; design.nrows()];
        for (w, fit) in self.weights.iter().zip(&self.fits) {
            if let Some(fit) = fit {
                for (o, p) in out.iter_mut().zip(fit.predict(design)?) {
                    *o += w * p;
                }
            }
        }
        if self.task == Task::Probability {
            out.iter_mut().for_each(|p| *p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP));
        }
        Ok(out)
    }
}

/// Weighted combination of the refitted learners.
pub fn sl_predict(fit: &SlFit, design: &DesignMatrix) -> Result<Vec<f64>> {
    fit.predict(design)
}
