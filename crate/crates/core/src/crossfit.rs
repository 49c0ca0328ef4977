//! Nuisance estimation with or without K-fold cross-fitting, and the end-to-end
//! effect estimate.
//!
//! Without cross-fitting both Super Learners are fitted on all records and
//! predict in-sample. With cross-fitting each fold is predicted by learners fitted
//! on its complement, so every record gets exactly one out-of-fold prediction
//! triple; propensity truncation and the TMLE targeting step then run once on the
//! pooled out-of-fold predictions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimators::{estimate_with, truncate_propensity, EffectEstimate, Method, NuisancePredictions, Provenance, DEFAULT_TRUNCATION};
use crate::folds::{make_folds, FoldPlan};
use crate::learners::{DesignMatrix, Task};
use crate::rng::RngStream;
use crate::superlearner::{fit_super_learner, Library, SlSummary, DEFAULT_SL_FOLDS};

/// A library given by built-in name (`"reduced"`, `"full"`) or inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LibraryRef {
    Named(String),
    Inline(Library),
}

impl LibraryRef {
    pub fn resolve(&self) -> Result<Library> {
        match self {
            LibraryRef::Named(name) => {
                Library::named(name).ok_or_else(|| Error::invalid(format!("unknown library '{name}' (expected 'reduced' or 'full')")))
            }
            LibraryRef::Inline(lib) => {
                lib.validate()?;
                Ok(lib.clone())
            }
        }
    }
}

fn default_sl_folds() -> usize {
    DEFAULT_SL_FOLDS
}

fn default_truncation() -> Option<(f64, f64)> {
    Some(DEFAULT_TRUNCATION)
}

fn default_library() -> Option<LibraryRef> {
    Some(LibraryRef::Named("reduced".into()))
}

/// Configuration of a single effect estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub method: Method,
    /// Library for both nuisance models unless overridden below.
    #[serde(default = "default_library")]
    pub library: Option<LibraryRef>,
    #[serde(default)]
    pub outcome_library: Option<LibraryRef>,
    #[serde(default)]
    pub exposure_library: Option<LibraryRef>,
    /// Cross-fitting folds K (>= 2); `None` fits nuisances on all records.
    #[serde(default)]
    pub crossfit: Option<usize>,
    /// Super Learner cross-validation folds V.
    #[serde(default = "default_sl_folds")]
    pub sl_folds: usize,
    /// Propensity truncation percentiles; `null` disables truncation.
    #[serde(default = "default_truncation")]
    pub truncation: Option<(f64, f64)>,
    #[serde(default)]
    pub seed: u64,
}

impl EstimatorConfig {
    pub fn new(method: Method, library: Library, crossfit: Option<usize>, seed: u64) -> EstimatorConfig {
        EstimatorConfig {
            method,
            library: Some(LibraryRef::Inline(library)),
            outcome_library: None,
            exposure_library: None,
            crossfit,
            sl_folds: DEFAULT_SL_FOLDS,
            truncation: Some(DEFAULT_TRUNCATION),
            seed,
        }
    }

    pub fn from_json_file(path: impl AsRef<std::path::Path>) -> Result<EstimatorConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: EstimatorConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn outcome_library(&self) -> Result<Library> {
        self.outcome_library
            .as_ref()
            .or(self.library.as_ref())
            .ok_or_else(|| Error::invalid("no outcome library configured"))?
            .resolve()
    }

    pub fn exposure_library(&self) -> Result<Library> {
        self.exposure_library
            .as_ref()
            .or(self.library.as_ref())
            .ok_or_else(|| Error::invalid("no exposure library configured"))?
            .resolve()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(k) = self.crossfit {
            if k < 2 {
                return Err(Error::invalid(format!("cross-fitting requires K >= 2, got K = {k}")));
            }
        }
        if self.sl_folds < 2 {
            return Err(Error::invalid(format!("Super Learner folds must satisfy V >= 2, got {}", self.sl_folds)));
        }
        if let Some((lo, hi)) = self.truncation {
            if !(0.0 <= lo && lo < hi && hi <= 100.0) {
                return Err(Error::invalid(format!("invalid truncation percentiles ({lo}, {hi})")));
            }
        }
        self.outcome_library()?;
        self.exposure_library()?;
        Ok(())
    }
}

/// Nuisance predictions together with the Super Learner fits that produced them.
#[derive(Debug, Clone)]
pub struct NuisanceFit {
    /// Untruncated predictions.
    pub predictions: NuisancePredictions,
    pub outcome_sl: Vec<SlSummary>,
    pub exposure_sl: Vec<SlSummary>,
    pub folds: Option<FoldPlan>,
}

struct FoldFit {
    rows: Vec<usize>,
    e1: Vec<f64>,
    e0: Vec<f64>,
    ps: Vec<f64>,
    outcome: SlSummary,
    exposure: SlSummary,
}

/// Fits both Super Learners on `train` and predicts on `test`.
fn fit_and_predict(
    data: &Dataset,
    train: &[usize],
    test: &[usize],
    outcome_lib: &Library,
    exposure_lib: &Library,
    sl_folds: usize,
    rng: &RngStream,
) -> Result<FoldFit> {
    let sub = data.subset(train);
    let out_design = DesignMatrix::outcome_design_from(&sub.w, &sub.x, data.columns(), None);
    let exp_design = DesignMatrix::exposure_design(data).rows(train);
    let outcome = fit_super_learner(outcome_lib, &out_design, &sub.y, sl_folds, Task::Regression, &rng.substream(0))?;
    let exposure = fit_super_learner(exposure_lib, &exp_design, &sub.x, sl_folds, Task::Probability, &rng.substream(1))?;
    let pred = data.subset(test);
    let treated = DesignMatrix::outcome_design_from(&pred.w, &pred.x, data.columns(), Some(1.0));
    let control = DesignMatrix::outcome_design_from(&pred.w, &pred.x, data.columns(), Some(0.0));
    Ok(FoldFit {
        rows: test.to_vec(),
        e1: outcome.predict(&treated)?,
        e0: outcome.predict(&control)?,
        ps: exposure.predict(&DesignMatrix::exposure_design(data).rows(test))?,
        outcome: outcome.summary(),
        exposure: exposure.summary(),
    })
}

/// Fits the nuisance models, with K-fold cross-fitting when `crossfit` is set.
/// Randomness: folds from substream 0 of `rng`, fold `k`'s learners from substream `k + 1`
/// (the no-cross-fitting fit uses substream 1).
pub fn fit_nuisances(
    data: &Dataset,
    outcome_lib: &Library,
    exposure_lib: &Library,
    crossfit: Option<usize>,
    sl_folds: usize,
    rng: &RngStream,
) -> Result<NuisanceFit> {
    let n = data.n();
    let all: Vec<usize> = (0..n).collect();
    let Some(k) = crossfit else {
        let fit = fit_and_predict(data, &all, &all, outcome_lib, exposure_lib, sl_folds, &rng.substream(1))?;
        return Ok(NuisanceFit {
            predictions: NuisancePredictions {
                e1: fit.e1,
                e0: fit.e0,
                ps: fit.ps,
                provenance: Provenance::NoCrossFit,
                truncation: None,
            },
            outcome_sl: vec![fit.outcome],
            exposure_sl: vec![fit.exposure],
            folds: None,
        });
    };
    let plan = make_folds(n, data.x(), k, &mut rng.substream(0))?;
    fit_nuisances_with_plan(data, outcome_lib, exposure_lib, plan, sl_folds, rng)
}

/// Cross-fitted nuisances over a given fold plan.
pub fn fit_nuisances_with_plan(
    data: &Dataset,
    outcome_lib: &Library,
    exposure_lib: &Library,
    plan: FoldPlan,
    sl_folds: usize,
    rng: &RngStream,
) -> Result<NuisanceFit> {
    let (n, k) = (data.n(), plan.k());
    if plan.len() != n {
        return Err(Error::invalid("fold plan length does not match the data"));
    }
    let fits: Vec<Result<FoldFit>> = (0..k)
        .into_par_iter()
        .map(|f| {
            fit_and_predict(
                data,
                &plan.complement(f),
                &plan.members(f),
                outcome_lib,
                exposure_lib,
                sl_folds,
                &rng.substream(f as u64 + 1),
            )
            .map_err(|e| Error::Fold {
                fold: f,
                source: Box::new(e),
            })
        })
        .collect();
    let (mut e1, mut e0, mut ps) = (vec![f64::NAN; n], vec![f64::NAN; n], vec![f64::NAN; n]);
    let mut outcome_sl = Vec::with_capacity(k);
    let mut exposure_sl = Vec::with_capacity(k);
    for fit in fits {
        let fit = fit?;
        for (pos, &i) in fit.rows.iter().enumerate() {
            e1[i] = fit.e1[pos];
            e0[i] = fit.e0[pos];
            ps[i] = fit.ps[pos];
        }
        outcome_sl.push(fit.outcome);
        exposure_sl.push(fit.exposure);
    }
    Ok(NuisanceFit {
        predictions: NuisancePredictions {
            e1,
            e0,
            ps,
            provenance: Provenance::CrossFit {
                k,
                assignment: plan.assignment().to_vec(),
            },
            truncation: None,
        },
        outcome_sl,
        exposure_sl,
        folds: Some(plan),
    })
}

/// Out-of-fold nuisance predictions using one library for both models.
pub fn crossfit_nuisances(data: &Dataset, library: &Library, k: usize, rng: &RngStream) -> Result<NuisancePredictions> {
    Ok(fit_nuisances(data, library, library, Some(k), DEFAULT_SL_FOLDS, rng)?.predictions)
}

/// Applies propensity truncation to fitted nuisances and runs `method`.
pub fn estimate_from_nuisances(
    data: &Dataset,
    fit: &NuisanceFit,
    method: Method,
    truncation: Option<(f64, f64)>,
) -> Result<EffectEstimate> {
    let mut nuis = fit.predictions.clone();
    if let Some((lo, hi)) = truncation {
        let (ps, bounds) = truncate_propensity(&nuis.ps, lo, hi)?;
        nuis.ps = ps;
        nuis.truncation = Some(bounds);
    }
    let mut est = estimate_with(method, data.x(), data.y(), &nuis)?;
    est.k = fit.folds.as_ref().map(|p| p.k());
    est.truncation_bounds = nuis.truncation;
    est.sl_weights_outcome = fit.outcome_sl.clone();
    est.sl_weights_exposure = fit.exposure_sl.clone();
    est.flag_non_finite();
    Ok(est)
}

/// Full pipeline with an explicit random stream.
pub fn estimate_effect_with_rng(data: &Dataset, config: &EstimatorConfig, rng: &RngStream) -> Result<EffectEstimate> {
    config.validate()?;
    let fit = fit_nuisances(
        data,
        &config.outcome_library()?,
        &config.exposure_library()?,
        config.crossfit,
        config.sl_folds,
        rng,
    )?;
    estimate_from_nuisances(data, &fit, config.method, config.truncation)
}

/// Estimates the average causal effect as configured; randomness comes from
/// stream 0 of `config.seed`.
pub fn estimate_effect(data: &Dataset, config: &EstimatorConfig) -> Result<EffectEstimate> {
    estimate_effect_with_rng(data, config, &RngStream::new(config.seed, 0))
}
