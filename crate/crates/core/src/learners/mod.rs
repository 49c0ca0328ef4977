//! Prediction learners for the outcome regression and the propensity score.
//!
//! Every learner takes a base (main-effects) [`DesignMatrix`] and a target. Linear
//! learners expand and standardize the base design internally and replay the
//! same transformation at prediction time; tree learners work on the raw columns.

mod boosting;
pub mod design;
mod elastic_net;
mod forest;
pub(crate) mod glm;
mod linalg;
mod tree;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::ColumnKind;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use boosting::{BoostParams, Boosted};
pub use design::{expand_design, DesignColumn, DesignMatrix, Expansion, ExpansionPlan, Provenance, Standardization};
use elastic_net::{fit_elastic_net, EnParams};
use forest::{Forest, ForestParams};
use glm::{expit, fit_gaussian, fit_logistic, LinearFit};

/// Probability predictions are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Continuous target, squared-error loss.
    Regression,
    /// Binary 0/1 target, predictions are probabilities.
    Probability,
}

fn default_penalty() -> f64 {
    1.0
}
fn default_knots() -> usize {
    3
}
fn default_n_lambda() -> usize {
    100
}
fn default_cv_folds() -> usize {
    5
}
fn default_trees() -> usize {
    500
}
fn default_forest_leaf() -> usize {
    5
}
fn default_true() -> bool {
    true
}
fn default_rounds() -> usize {
    100
}
fn default_rate() -> f64 {
    0.1
}
fn default_boost_depth() -> usize {
    3
}
fn default_boost_leaf() -> usize {
    10
}

/// Learner family and hyperparameters. Serialized with a `kind` tag, e.g.
/// `{"kind": "elastic-net", "alpha": 0.5}`; omitted hyperparameters take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LearnerKind {
    /// Training mean of the target.
    MeanOnly,
    /// Linear or logistic regression on main effects.
    GlmMain,
    /// Linear or logistic regression on main effects and all pairwise products.
    GlmInteractions,
    /// Ridge-penalized GLM on standardized main effects (MAP under a Gaussian prior).
    RidgeGlm {
        #[serde(default = "default_penalty")]
        penalty: f64,
    },
    /// GLM on natural cubic spline bases of the continuous columns.
    SplineGlm {
        #[serde(default = "default_knots")]
        interior_knots: usize,
    },
    /// Elastic net on main effects; `lambda` fixed or chosen by internal CV.
    ElasticNet {
        alpha: f64,
        #[serde(default)]
        lambda: Option<f64>,
        #[serde(default = "default_n_lambda")]
        n_lambda: usize,
        #[serde(default = "default_cv_folds")]
        cv_folds: usize,
    },
    RandomForest {
        #[serde(default = "default_trees")]
        trees: usize,
        #[serde(default)]
        max_depth: Option<usize>,
        /// Features tried per split; defaults to the square root of the width.
        #[serde(default)]
        mtry: Option<usize>,
        #[serde(default = "default_forest_leaf")]
        min_leaf: usize,
        #[serde(default = "default_true")]
        bootstrap: bool,
    },
    GradientBoosting {
        #[serde(default = "default_rounds")]
        rounds: usize,
        #[serde(default = "default_rate")]
        learning_rate: f64,
        #[serde(default = "default_boost_depth")]
        max_depth: usize,
        #[serde(default = "default_boost_leaf")]
        min_leaf: usize,
    },
    /// Data-independent linear predictor on named columns (identity link for
    /// regression, logistic for probability). Columns absent from a design are ignored.
    Fixed {
        intercept: f64,
        #[serde(default)]
        slopes: BTreeMap<String, f64>,
    },
}

impl LearnerKind {
    pub fn elastic_net(alpha: f64) -> LearnerKind {
        LearnerKind::ElasticNet {
            alpha,
            lambda: None,
            n_lambda: default_n_lambda(),
            cv_folds: default_cv_folds(),
        }
    }

    pub fn ridge_glm() -> LearnerKind {
        LearnerKind::RidgeGlm {
            penalty: default_penalty(),
        }
    }

    pub fn spline_glm() -> LearnerKind {
        LearnerKind::SplineGlm {
            interior_knots: default_knots(),
        }
    }

    pub fn random_forest() -> LearnerKind {
        LearnerKind::RandomForest {
            trees: default_trees(),
            max_depth: None,
            mtry: None,
            min_leaf: default_forest_leaf(),
            bootstrap: true,
        }
    }

    pub fn gradient_boosting() -> LearnerKind {
        LearnerKind::GradientBoosting {
            rounds: default_rounds(),
            learning_rate: default_rate(),
            max_depth: default_boost_depth(),
            min_leaf: default_boost_leaf(),
        }
    }

    /// Short human-readable name used in diagnostics.
    pub fn label(&self) -> String {
        match self {
            LearnerKind::MeanOnly => "mean-only".into(),
            LearnerKind::GlmMain => "glm-main".into(),
            LearnerKind::GlmInteractions => "glm-interactions".into(),
            LearnerKind::RidgeGlm { .. } => "ridge-glm".into(),
            LearnerKind::SplineGlm { .. } => "spline-glm".into(),
            LearnerKind::ElasticNet { alpha, .. } => format!("elastic-net(alpha={alpha})"),
            LearnerKind::RandomForest { .. } => "random-forest".into(),
            LearnerKind::GradientBoosting { .. } => "gradient-boosting".into(),
            LearnerKind::Fixed { .. } => "fixed".into(),
        }
    }

    /// Checks hyperparameter ranges.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::invalid(format!("{}: {msg}", self.label())));
        match *self {
            LearnerKind::RidgeGlm { penalty } if !(penalty >= 0.0 && penalty.is_finite()) => {
                bad("penalty must be finite and non-negative")
            }
            LearnerKind::SplineGlm { interior_knots } if interior_knots > 50 => bad("at most 50 interior knots"),
            LearnerKind::ElasticNet {
                alpha,
                lambda,
                n_lambda,
                cv_folds,
            } => {
                if !(0.0..=1.0).contains(&alpha) {
                    bad("alpha must lie in [0, 1]")
                } else if lambda.is_some_and(|l| !(l >= 0.0 && l.is_finite())) {
                    bad("lambda must be finite and non-negative")
                } else if n_lambda == 0 {
                    bad("n_lambda must be positive")
                } else if cv_folds < 2 {
                    bad("cv_folds must be at least 2")
                } else {
                    Ok(())
                }
            }
            LearnerKind::RandomForest {
                trees, mtry, min_leaf, ..
            } => {
                if trees == 0 || min_leaf == 0 || mtry == Some(0) {
                    bad("trees, mtry and min_leaf must be positive")
                } else {
                    Ok(())
                }
            }
            LearnerKind::GradientBoosting {
                learning_rate,
                min_leaf,
                ..
            } => {
                if !(learning_rate > 0.0 && learning_rate <= 1.0) || min_leaf == 0 {
                    bad("learning_rate must lie in (0, 1] and min_leaf be positive")
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerSpec {
    #[serde(flatten)]
    pub kind: LearnerKind,
    pub task: Task,
}

impl LearnerSpec {
    pub fn new(kind: LearnerKind, task: Task) -> LearnerSpec {
        LearnerSpec { kind, task }
    }
}

#[derive(Debug, Clone)]
enum Model {
    Constant(f64),
    Linear {
        plan: ExpansionPlan,
        standardization: Standardization,
        fit: LinearFit,
    },
    Fixed {
        intercept: f64,
        slopes: BTreeMap<String, f64>,
    },
    Forest(Forest),
    Boosted(Boosted),
}

/// A learner fitted on training rows, bound to the column contract it was trained on.
#[derive(Debug, Clone)]
pub struct FittedLearner {
    spec: LearnerSpec,
    input: Vec<(String, ColumnKind)>,
    model: Model,
    separation_fallback: bool,
    lambda: Option<f64>,
}

pub(crate) fn check_target(task: Task, target: &[f64]) -> Result<()> {
    if target.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("target contains non-finite values"));
    }
    if task == Task::Probability {
        if target.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("probability target must be 0/1"));
        }
        let ones = target.iter().filter(|&&v| v == 1.0).count();
        if ones == 0 || ones == target.len() {
            return Err(Error::Degenerate("single-class probability target".into()));
        }
    }
    Ok(())
}

fn fit_linear(
    spec: &LearnerSpec,
    design: &DesignMatrix,
    target: &[f64],
    expansion: Expansion,
    rng: &mut RngStream,
) -> Result<(Model, bool, Option<f64>)> {
    let plan = ExpansionPlan::fit_with(design, expansion, false)?;
    let expanded = plan.apply(design)?;
    let standardization = Standardization::fit(expanded.values());
    let z = standardization.apply(expanded.values());
    let logistic = spec.task == Task::Probability;
    let mut fallback = false;
    let mut lambda = None;
    let fit = match &spec.kind {
        LearnerKind::ElasticNet {
            alpha,
            lambda: fixed,
            n_lambda,
            cv_folds,
        } => {
            let params = EnParams {
                alpha: *alpha,
                lambda: *fixed,
                n_lambda: *n_lambda,
                cv_folds: *cv_folds,
            };
            let en = fit_elastic_net(&z, target, params, logistic, rng)?;
            lambda = Some(en.lambda);
            en.fit
        }
        kind => {
            let ridge = match kind {
                LearnerKind::RidgeGlm { penalty } => *penalty,
                _ => 0.0,
            };
            if logistic {
                let (fit, fell_back) = fit_logistic(&z, target, ridge)?;
                fallback = fell_back;
                fit
            } else {
                fit_gaussian(&z, target, ridge)
            }
        }
    };
    Ok((
        Model::Linear {
            plan,
            standardization,
            fit,
        },
        fallback,
        lambda,
    ))
}

/// Fits a learner. Deterministic given `rng`; only the elastic net (CV folds) and
/// the forest (bootstrap, feature sampling) consume randomness.
pub fn fit_learner(spec: &LearnerSpec, design: &DesignMatrix, target: &[f64], rng: &mut RngStream) -> Result<FittedLearner> {
    if design.ncols() == 0 || design.nrows() == 0 {
        return Err(Error::invalid("empty design"));
    }
    if design.nrows() != target.len() {
        return Err(Error::invalid(format!(
            "design has {} rows but target has {}",
            design.nrows(),
            target.len()
        )));
    }
    spec.kind.validate()?;
    check_target(spec.task, target)?;
    let n = target.len();
    let logistic = spec.task == Task::Probability;
    let mut separation_fallback = false;
    let mut lambda = None;
    let model = match &spec.kind {
        LearnerKind::MeanOnly => Model::Constant(target.iter().sum::<f64>() / n as f64),
        LearnerKind::GlmMain | LearnerKind::RidgeGlm { .. } | LearnerKind::ElasticNet { .. } => {
            let (m, f, l) = fit_linear(spec, design, target, Expansion::Main, rng)?;
            separation_fallback = f;
            lambda = l;
            m
        }
        LearnerKind::GlmInteractions => {
            let (m, f, _) = fit_linear(spec, design, target, Expansion::Pairwise, rng)?;
            separation_fallback = f;
            m
        }
        LearnerKind::SplineGlm { interior_knots } => {
            let expansion = Expansion::Spline {
                interior_knots: *interior_knots,
            };
            let (m, f, _) = fit_linear(spec, design, target, expansion, rng)?;
            separation_fallback = f;
            m
        }
        LearnerKind::RandomForest {
            trees,
            max_depth,
            mtry,
            min_leaf,
            bootstrap,
        } => {
            let q = design.ncols();
            let params = ForestParams {
                trees: *trees,
                max_depth: *max_depth,
                mtry: mtry.unwrap_or(((q as f64).sqrt().floor() as usize).max(1)),
                min_leaf: *min_leaf,
                bootstrap: *bootstrap,
            };
            Model::Forest(Forest::fit(design.values(), target, params, rng))
        }
        LearnerKind::GradientBoosting {
            rounds,
            learning_rate,
            max_depth,
            min_leaf,
        } => {
            let params = BoostParams {
                rounds: *rounds,
                learning_rate: *learning_rate,
                max_depth: *max_depth,
                min_leaf: *min_leaf,
            };
            Model::Boosted(Boosted::fit(design.values(), target, params, logistic))
        }
        LearnerKind::Fixed { intercept, slopes } => Model::Fixed {
            intercept: *intercept,
            slopes: slopes.clone(),
        },
    };
    Ok(FittedLearner {
        spec: spec.clone(),
        input: design.signature(),
        model,
        separation_fallback,
        lambda,
    })
}

fn clamp_probability(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

impl FittedLearner {
    pub fn spec(&self) -> &LearnerSpec {
        &self.spec
    }

    /// Whether a logistic fit had to fall back to the ridge penalty after separation.
    pub fn separation_fallback(&self) -> bool {
        self.separation_fallback
    }

    /// Penalty selected by an elastic-net fit.
    pub fn selected_lambda(&self) -> Option<f64> {
        self.lambda
    }

    /// Intercept and slopes of a linear learner on the scale of its expanded
    /// (unstandardized) design columns.
    pub fn coefficients(&self) -> Option<(f64, Vec<f64>)> {
        match &self.model {
            Model::Linear {
                standardization, fit, ..
            } => Some(standardization.unscale(fit.intercept, &fit.coef)),
            _ => None,
        }
    }

    pub fn predict(&self, design: &DesignMatrix) -> Result<Vec<f64>> {
        if design.signature() != self.input {
            return Err(Error::ContractMismatch(format!(
                "learner trained on {} columns, design has {}",
                self.input.len(),
                design.ncols()
            )));
        }
        let n = design.nrows();
        let logistic = self.spec.task == Task::Probability;
        let raw = match &self.model {
            Model::Constant(m) => return Ok(vec![if logistic { clamp_probability(*m) } else { *m }; n]),
            Model::Linear {
                plan,
                standardization,
                fit,
            } => {
                let expanded = plan.apply(design)?;
                let eta = fit.linear_predictor(&standardization.apply(expanded.values()));
                if logistic {
                    eta.into_iter().map(expit).collect()
                } else {
                    eta
                }
            }
            Model::Fixed { intercept, slopes } => {
                let cols: Vec<(usize, f64)> = design
                    .columns()
                    .iter()
                    .enumerate()
                    .filter_map(|(j, c)| slopes.get(&c.name).map(|s| (j, *s)))
                    .collect();
                let v = design.values();
                let eta: Vec<f64> = (0..n)
                    .map(|i| intercept + cols.iter().map(|&(j, s)| s * v[(i, j)]).sum::<f64>())
                    .collect();
                if logistic {
                    eta.into_iter().map(expit).collect()
                } else {
                    eta
                }
            }
            Model::Forest(f) => f.predict(design.values()),
            Model::Boosted(b) => b.predict(design.values()),
        };
        Ok(if logistic {
            raw.into_iter().map(clamp_probability).collect()
        } else {
            raw
        })
    }
}

/// Predictions of a fitted learner on a design matching its training contract.
pub fn predict_learner(fit: &FittedLearner, design: &DesignMatrix) -> Result<Vec<f64>> {
    fit.predict(design)
}
