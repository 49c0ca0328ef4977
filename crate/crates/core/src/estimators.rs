//! Effect estimators computed from nuisance predictions: propensity truncation,
//! g-computation, inverse probability weighting, AIPW and TMLE.
//!
//! The estimand is the average causal effect `E[Y(1)] - E[Y(0)]`. It is identified
//! by these estimators under consistency, conditional exchangeability given the
//! confounders, and positivity (propensity scores bounded away from 0 and 1).

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::learners::design::quantile_sorted;
use crate::learners::glm::{expit, logit};
use crate::superlearner::SlSummary;

/// Default propensity truncation percentiles.
pub const DEFAULT_TRUNCATION: (f64, f64) = (5.0, 95.0);
/// Scaled initial outcome predictions are kept inside this band before the logit.
pub const TMLE_PRED_BOUND: f64 = 0.005;
pub const TMLE_MAX_ITER: usize = 100;
/// Targeting stops once the mean score is below this value.
pub const TMLE_SCORE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "AIPW")]
    Aipw,
    #[serde(rename = "TMLE")]
    Tmle,
    #[serde(rename = "GCOMP")]
    Gcomp,
    #[serde(rename = "IPW")]
    Ipw,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Aipw => "AIPW",
            Method::Tmle => "TMLE",
            Method::Gcomp => "GCOMP",
            Method::Ipw => "IPW",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How nuisance predictions were produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Provenance {
    /// Fitted and predicted on the same records.
    NoCrossFit,
    /// Out-of-fold predictions; `assignment` holds zero-based fold labels.
    CrossFit { k: usize, assignment: Vec<usize> },
    /// Supplied directly by the caller.
    External,
}

/// Per-record predictions `E[Y|X=1,W]`, `E[Y|X=0,W]` and `P(X=1|W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisancePredictions {
    pub e1: Vec<f64>,
    pub e0: Vec<f64>,
    pub ps: Vec<f64>,
    pub provenance: Provenance,
    /// Propensity truncation bounds, once truncation has been applied.
    pub truncation: Option<(f64, f64)>,
}

impl NuisancePredictions {
    pub fn new(e1: Vec<f64>, e0: Vec<f64>, ps: Vec<f64>) -> Result<NuisancePredictions> {
        let n = NuisancePredictions {
            e1,
            e0,
            ps,
            provenance: Provenance::External,
            truncation: None,
        };
        n.validate()?;
        Ok(n)
    }

    pub fn len(&self) -> usize {
        self.ps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ps.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.e1.len() != self.ps.len() || self.e0.len() != self.ps.len() {
            return Err(Error::invalid("nuisance prediction vectors differ in length"));
        }
        if self.e1.iter().chain(&self.e0).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite outcome prediction"));
        }
        if self.ps.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return Err(Error::invalid("propensity scores must lie strictly inside (0, 1)"));
        }
        Ok(())
    }

    /// Copy with the propensity scores truncated at the given percentiles.
    pub fn truncated(&self, lower_pct: f64, upper_pct: f64) -> Result<NuisancePredictions> {
        let (ps, bounds) = truncate_propensity(&self.ps, lower_pct, upper_pct)?;
        Ok(NuisancePredictions {
            ps,
            truncation: Some(bounds),
            ..self.clone()
        })
    }
}

/// Clamps propensity scores into their empirical `[lower_pct, upper_pct]`
/// percentiles (type-7 interpolation). Percentiles are in percent.
pub fn truncate_propensity(ps: &[f64], lower_pct: f64, upper_pct: f64) -> Result<(Vec<f64>, (f64, f64))> {
    if ps.is_empty() {
        return Err(Error::invalid("empty propensity vector"));
    }
    if ps.iter().any(|p| !p.is_finite()) {
        return Err(Error::invalid("non-finite propensity score"));
    }
    if !(0.0 <= lower_pct && lower_pct < upper_pct && upper_pct <= 100.0) {
        return Err(Error::invalid(format!(
            "truncation percentiles must satisfy 0 <= lower < upper <= 100, got ({lower_pct}, {upper_pct})"
        )));
    }
    let mut sorted = ps.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = quantile_sorted(&sorted, lower_pct / 100.0);
    let hi = quantile_sorted(&sorted, upper_pct / 100.0);
    Ok((ps.iter().map(|p| p.clamp(lo, hi)).collect(), (lo, hi)))
}

/// Two-sided Wald interval `psi -/+ z * se`.
pub fn wald_ci(psi: f64, se: f64, level: f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("confidence level must lie in (0, 1), got {level}")));
    }
    if se < 0.0 {
        return Err(Error::invalid("standard error must be non-negative"));
    }
    let z = Normal::standard().inverse_cdf((1.0 + level) / 2.0);
    Ok((psi - z * se, psi + z * se))
}

/// Summary of the per-record influence-function contributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EifSummary {
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
    /// `mean(phi) - psi`; zero for AIPW by construction, and zero for TMLE when
    /// the targeting step has solved the score equation.
    pub score_mean: f64,
}

impl EifSummary {
    fn new(phi: &[f64], psi: f64) -> EifSummary {
        let n = phi.len() as f64;
        let mean = phi.iter().sum::<f64>() / n;
        let var = if phi.len() > 1 {
            phi.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        EifSummary {
            mean,
            sd: var.sqrt(),
            min: phi.iter().copied().fold(f64::INFINITY, f64::min),
            max: phi.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            score_mean: mean - psi,
        }
    }
}

/// Targeting-step diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TmleDiagnostics {
    pub epsilon: f64,
    pub iterations: usize,
    pub outcome_bounds: (f64, f64),
    /// Means of the targeted predictions under exposure and no exposure.
    pub arm_means: (f64, f64),
}

/// An average causal effect estimate with its inference and diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub method: Method,
    pub psi: f64,
    /// Absent for g-computation, which has no valid analytic standard error.
    pub se: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub n: usize,
    /// Cross-fitting folds; `None` without cross-fitting.
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub truncation_bounds: Option<(f64, f64)>,
    /// Outcome Super Learner summaries, one per fitted fold.
    pub sl_weights_outcome: Vec<SlSummary>,
    /// Exposure Super Learner summaries, one per fitted fold.
    pub sl_weights_exposure: Vec<SlSummary>,
    pub eif: Option<EifSummary>,
    pub tmle: Option<TmleDiagnostics>,
    pub flags: Vec<String>,
}

impl EffectEstimate {
    fn bare(method: Method, psi: f64, se: Option<f64>, n: usize) -> Result<EffectEstimate> {
        let ci = match se {
            Some(s) if s.is_finite() && psi.is_finite() => Some(wald_ci(psi, s, 0.95)?),
            _ => None,
        };
        let mut est = EffectEstimate {
            method,
            psi,
            se,
            ci,
            n,
            k: None,
            truncation_bounds: None,
            sl_weights_outcome: Vec::new(),
            sl_weights_exposure: Vec::new(),
            eif: None,
            tmle: None,
            flags: Vec::new(),
        };
        est.flag_non_finite();
        Ok(est)
    }

    /// Marks (without failing) an estimate whose point estimate or SE is not finite.
    pub fn flag_non_finite(&mut self) {
        let bad = !self.psi.is_finite() || self.se.is_some_and(|s| !s.is_finite());
        if bad && !self.flags.iter().any(|f| f == "non-finite") {
            self.flags.push("non-finite".into());
        }
    }

    pub fn is_finite(&self) -> bool {
        self.psi.is_finite() && self.se.is_none_or(|s| s.is_finite())
    }
}

/// Standard error from influence-function contributions: the sample variance
/// (divisor n-1) divided by n, square-rooted.
pub fn eif_se(phi: &[f64]) -> f64 {
    let n = phi.len() as f64;
    let mean = phi.iter().sum::<f64>() / n;
    let var = phi.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (var / n).sqrt()
}

/// Per-record AIPW contributions for given outcome predictions.
pub fn eif_contributions(x: &[f64], y: &[f64], e1: &[f64], e0: &[f64], ps: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|i| e1[i] - e0[i] + x[i] * (y[i] - e1[i]) / ps[i] - (1.0 - x[i]) * (y[i] - e0[i]) / (1.0 - ps[i]))
        .collect()
}

fn check_arrays(x: &[f64], y: &[f64], nuis: &NuisancePredictions) -> Result<()> {
    nuis.validate()?;
    if x.len() != nuis.len() || y.len() != nuis.len() {
        return Err(Error::invalid("exposure, outcome and nuisance lengths differ"));
    }
    if x.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("exposure must be 0/1"));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite outcome"));
    }
    Ok(())
}

/// Plug-in g-computation: mean of `E1 - E0`. No standard error.
pub fn gcomp_estimate(e1: &[f64], e0: &[f64]) -> Result<EffectEstimate> {
    if e1.is_empty() || e1.len() != e0.len() {
        return Err(Error::invalid("g-computation needs two non-empty vectors of equal length"));
    }
    let n = e1.len();
    let psi = e1.iter().zip(e0).map(|(a, b)| a - b).sum::<f64>() / n as f64;
    EffectEstimate::bare(Method::Gcomp, psi, None, n)
}

/// Horvitz-Thompson inverse probability weighting (a singly robust baseline).
pub fn ipw_estimate(x: &[f64], y: &[f64], nuis: &NuisancePredictions) -> Result<EffectEstimate> {
    check_arrays(x, y, nuis)?;
    let n = x.len();
    if n < 2 {
        return Err(Error::invalid("need at least 2 records"));
    }
    let phi: Vec<f64> = (0..n)
        .map(|i| x[i] * y[i] / nuis.ps[i] - (1.0 - x[i]) * y[i] / (1.0 - nuis.ps[i]))
        .collect();
    let psi = phi.iter().sum::<f64>() / n as f64;
    let mut est = EffectEstimate::bare(Method::Ipw, psi, Some(eif_se(&phi)), n)?;
    est.eif = Some(EifSummary::new(&phi, psi));
    est.truncation_bounds = nuis.truncation;
    Ok(est)
}

/// Augmented inverse probability weighting.
pub fn aipw_estimate(x: &[f64], y: &[f64], nuis: &NuisancePredictions) -> Result<EffectEstimate> {
    check_arrays(x, y, nuis)?;
    let n = x.len();
    if n < 2 {
        return Err(Error::invalid("AIPW needs at least 2 records"));
    }
    let phi = eif_contributions(x, y, &nuis.e1, &nuis.e0, &nuis.ps);
    let psi = phi.iter().sum::<f64>() / n as f64;
    let mut est = EffectEstimate::bare(Method::Aipw, psi, Some(eif_se(&phi)), n)?;
    est.eif = Some(EifSummary::new(&phi, psi));
    est.truncation_bounds = nuis.truncation;
    Ok(est)
}

/// Result of the TMLE fluctuation step.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetingResult {
    pub epsilon: f64,
    /// Outcome scaling bounds `(min Y, max Y)`.
    pub bounds: (f64, f64),
    pub e1_star: Vec<f64>,
    pub e0_star: Vec<f64>,
    pub iterations: usize,
}

/// Log-likelihood, score and information of the one-parameter fluctuation.
fn fluctuation(eps: f64, ys: &[f64], h: &[f64], offset: &[f64]) -> (f64, f64, f64) {
    let (mut ll, mut score, mut info) = (0.0, 0.0, 0.0);
    for i in 0..ys.len() {
        let eta = offset[i] + eps * h[i];
        let mu = expit(eta);
        // log(mu) and log(1 - mu) computed stably from eta
        let log_mu = -softplus(-eta);
        let log_1m = -softplus(eta);
        ll += ys[i] * log_mu + (1.0 - ys[i]) * log_1m;
        score += h[i] * (ys[i] - mu);
        info += h[i] * h[i] * mu * (1.0 - mu);
    }
    (ll, score, info)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic fluctuation of min-max scaled outcome predictions along the clever
/// covariate `H = X/P - (1-X)/(1-P)`, fitted by Newton's method with step halving.
pub fn tmle_target(x: &[f64], y: &[f64], nuis: &NuisancePredictions) -> Result<TargetingResult> {
    check_arrays(x, y, nuis)?;
    let a = y.iter().copied().fold(f64::INFINITY, f64::min);
    let b = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(b > a) {
        return Err(Error::Degenerate("constant outcome: targeting needs max(Y) > min(Y)".into()));
    }
    let range = b - a;
    let n = y.len();
    let scale = |v: f64| ((v - a) / range).clamp(TMLE_PRED_BOUND, 1.0 - TMLE_PRED_BOUND);
    let ys: Vec<f64> = y.iter().map(|v| (v - a) / range).collect();
    let q1: Vec<f64> = nuis.e1.iter().map(|&v| logit(scale(v))).collect();
    let q0: Vec<f64> = nuis.e0.iter().map(|&v| logit(scale(v))).collect();
    let h: Vec<f64> = (0..n).map(|i| x[i] / nuis.ps[i] - (1.0 - x[i]) / (1.0 - nuis.ps[i])).collect();
    let offset: Vec<f64> = (0..n).map(|i| if x[i] == 1.0 { q1[i] } else { q0[i] }).collect();

    let mut eps = 0.0;
    let (mut ll, mut score, mut info) = fluctuation(eps, &ys, &h, &offset);
    let mut iterations = 0;
    while (score / n as f64).abs() >= TMLE_SCORE_TOL {
        if iterations == TMLE_MAX_ITER {
            return Err(Error::Convergence(format!(
                "TMLE targeting did not converge in {TMLE_MAX_ITER} iterations (mean score {:e})",
                score / n as f64
            )));
        }
        iterations += 1;
        if !(info > 0.0) {
            return Err(Error::Convergence("TMLE targeting has zero information".into()));
        }
        let mut step = score / info;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = eps + step;
            let (ll_c, score_c, info_c) = fluctuation(cand, &ys, &h, &offset);
            if ll_c >= ll - 1e-12 * ll.abs() {
                eps = cand;
                ll = ll_c;
                score = score_c;
                info = info_c;
                accepted = true;
                break;
            }
            step /= 2.0;
        }
        if !accepted {
            return Err(Error::Convergence("TMLE targeting step could not increase the likelihood".into()));
        }
    }
    let e1_star = (0..n).map(|i| a + range * expit(q1[i] + eps / nuis.ps[i])).collect();
    let e0_star = (0..n).map(|i| a + range * expit(q0[i] - eps / (1.0 - nuis.ps[i]))).collect();
    Ok(TargetingResult {
        epsilon: eps,
        bounds: (a, b),
        e1_star,
        e0_star,
        iterations,
    })
}

/// TMLE: targeting followed by the substitution estimate `mean(E1*) - mean(E0*)`.
pub fn tmle_estimate(x: &[f64], y: &[f64], nuis: &NuisancePredictions) -> Result<EffectEstimate> {
    let t = tmle_target(x, y, nuis)?;
    let n = x.len();
    let m1 = t.e1_star.iter().sum::<f64>() / n as f64;
    let m0 = t.e0_star.iter().sum::<f64>() / n as f64;
    let psi = m1 - m0;
    let phi = eif_contributions(x, y, &t.e1_star, &t.e0_star, &nuis.ps);
    let mut est = EffectEstimate::bare(Method::Tmle, psi, Some(eif_se(&phi)), n)?;
    est.eif = Some(EifSummary::new(&phi, psi));
    est.truncation_bounds = nuis.truncation;
    est.tmle = Some(TmleDiagnostics {
        epsilon: t.epsilon,
        iterations: t.iterations,
        outcome_bounds: t.bounds,
        arm_means: (m1, m0),
    });
    Ok(est)
}

/// Runs `method` on prepared nuisance predictions.
pub fn estimate_with(method: Method, x: &[f64], y: &[f64], nuis: &NuisancePredictions) -> Result<EffectEstimate> {
    match method {
        Method::Aipw => aipw_estimate(x, y, nuis),
        Method::Tmle => tmle_estimate(x, y, nuis),
        Method::Ipw => ipw_estimate(x, y, nuis),
        Method::Gcomp => {
            let mut e = gcomp_estimate(&nuis.e1, &nuis.e0)?;
            e.truncation_bounds = nuis.truncation;
            Ok(e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn nuis(e1: &[f64], e0: &[f64], ps: &[f64]) -> NuisancePredictions {
        NuisancePredictions::new(e1.to_vec(), e0.to_vec(), ps.to_vec()).unwrap()
    }

    #[test]
    fn truncation_constant_and_small_vector() {
        let (out, b) = truncate_propensity(&[0.5; 6], 5.0, 95.0).unwrap();
        assert_eq!(out, vec![0.5; 6]);
        assert_eq!(b, (0.5, 0.5));
        let ps = [0.01, 0.2, 0.5, 0.8, 0.99];
        let (out, (lo, hi)) = truncate_propensity(&ps, 5.0, 95.0).unwrap();
        // type 7: h = 4 * 0.05 = 0.2 -> 0.01 + 0.2 * 0.19
        assert!((lo - 0.048).abs() < 1e-15);
        assert!((hi - (0.8 + 0.8 * 0.19)).abs() < 1e-15);
        assert_eq!(out.iter().copied().fold(f64::INFINITY, f64::min), lo);
        assert_eq!(out.iter().copied().fold(0.0, f64::max), hi);
    }

    #[test]
    fn truncation_grid_alters_five_each_side() {
        let ps: Vec<f64> = (0..100).map(|i| 0.005 + 0.01 * i as f64).collect();
        let (out, (lo, hi)) = truncate_propensity(&ps, 5.0, 95.0).unwrap();
        // independent percentile: position 99 * 0.05 = 4.95 between the 5th and 6th values
        let lo_oracle = ps[4] + 0.95 * (ps[5] - ps[4]);
        let hi_oracle = ps[94] + 0.05 * (ps[95] - ps[94]);
        assert!((lo - lo_oracle).abs() < 1e-12 && (hi - hi_oracle).abs() < 1e-12);
        let changed: Vec<usize> = (0..100).filter(|&i| out[i] != ps[i]).collect();
        let expected: Vec<usize> = (0..5).chain(95..100).collect();
        assert_eq!(changed, expected);
    }

    #[test]
    fn gcomp_examples() {
        assert_eq!(gcomp_estimate(&[1.0, 3.0], &[0.0, 1.0]).unwrap().psi, 1.5);
        assert_eq!(gcomp_estimate(&[2.0, 2.0], &[2.0, 2.0]).unwrap().psi, 0.0);
        assert!(gcomp_estimate(&[], &[]).is_err());
        assert!(gcomp_estimate(&[1.0], &[0.0]).unwrap().se.is_none());
    }

    #[test]
    fn aipw_two_record_examples() {
        let n = nuis(&[1.0, 1.0], &[0.0, 0.0], &[0.5, 0.5]);
        let e = aipw_estimate(&[1.0, 0.0], &[1.0, 0.0], &n).unwrap();
        assert_eq!((e.psi, e.se), (1.0, Some(0.0)));
        let e = aipw_estimate(&[1.0, 0.0], &[2.0, 1.0], &n).unwrap();
        assert_eq!(e.psi, 1.0);
        assert!((e.se.unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn aipw_reduces_to_ipw_with_zero_outcome_model() {
        let x = [1.0, 0.0, 1.0, 0.0, 0.0];
        let y = [2.0, -1.0, 0.5, 3.0, 1.0];
        let p = 0.3;
        let n = nuis(&[0.0; 5], &[0.0; 5], &[p; 5]);
        let ipw: f64 = (0..5).map(|i| x[i] * y[i] / p - (1.0 - x[i]) * y[i] / (1.0 - p)).sum::<f64>() / 5.0;
        assert!((aipw_estimate(&x, &y, &n).unwrap().psi - ipw).abs() < 1e-14);
    }

    #[test]
    fn wald_examples() {
        let (lo, hi) = wald_ci(1.0, 0.5, 0.95).unwrap();
        assert!((lo - 0.020018).abs() < 1e-6 && (hi - 1.979982).abs() < 1e-6);
        assert_eq!(wald_ci(1.0, 0.0, 0.95).unwrap(), (1.0, 1.0));
        assert!(wald_ci(1.0, 0.5, 1.0).is_err());
    }

    /// Independent one-parameter logistic MLE: grid search then Newton refinement.
    fn oracle_epsilon(ys: &[f64], h: &[f64], off: &[f64]) -> f64 {
        let ll = |e: f64| -> f64 {
            (0..ys.len())
                .map(|i| {
                    let m = 1.0 / (1.0 + (-(off[i] + e * h[i])).exp());
                    ys[i] * m.ln() + (1.0 - ys[i]) * (1.0 - m).ln()
                })
                .sum()
        };
        let mut best = (f64::NEG_INFINITY, 0.0);
        for k in -4000..=4000 {
            let e = k as f64 * 1e-3;
            let v = ll(e);
            if v > best.0 {
                best = (v, e);
            }
        }
        let mut e = best.1;
        for _ in 0..50 {
            let (mut s, mut info) = (0.0, 0.0);
            for i in 0..ys.len() {
                let m = 1.0 / (1.0 + (-(off[i] + e * h[i])).exp());
                s += h[i] * (ys[i] - m);
                info += h[i] * h[i] * m * (1.0 - m);
            }
            e += s / info;
        }
        e
    }

    #[test]
    fn four_record_targeting_oracle() {
        let x = [1.0, 1.0, 0.0, 0.0];
        let y = [1.0, 0.0, 1.0, 0.0];
        let n = nuis(&[0.6; 4], &[0.4; 4], &[0.5; 4]);
        let t = tmle_target(&x, &y, &n).unwrap();
        let off = [logit(0.6), logit(0.6), logit(0.4), logit(0.4)];
        let eps = oracle_epsilon(&y, &[2.0, 2.0, -2.0, -2.0], &off);
        assert!((t.epsilon - eps).abs() < 1e-8);
        // closed form for this symmetric case
        assert!((t.epsilon + logit(0.6) / 2.0).abs() < 1e-10);
        for v in t.e1_star.iter().chain(&t.e0_star) {
            assert!((v - 0.5).abs() < 1e-8);
        }
        let e = tmle_estimate(&x, &y, &n).unwrap();
        assert!(e.psi.abs() < 1e-8);
    }

    #[test]
    fn perfect_initial_fit_needs_no_targeting() {
        // The records at min(Y) and max(Y) have their scaled predictions clamped
        // away from 0 and 1; giving them equal clever covariates makes the two
        // clamping residuals cancel so the score is exactly solved at zero.
        let x = [1.0, 0.0, 1.0, 0.0];
        let y = [0.1, 0.5, 0.9, 0.3];
        let e1 = [0.1, 0.7, 0.9, 0.4];
        let e0 = [0.0, 0.5, 0.6, 0.3];
        let n = nuis(&e1, &e0, &[0.4, 0.6, 0.4, 0.3]);
        let t = tmle_target(&x, &y, &n).unwrap();
        assert_eq!(t.epsilon, 0.0);
    }

    #[test]
    fn zero_fluctuation_reproduces_gcomp() {
        // residuals cancel within each arm at equal propensity, so epsilon = 0
        let x = [1.0, 1.0, 0.0, 0.0];
        let y = [0.2, 0.8, 0.0, 1.0];
        let e1 = [0.5, 0.5, 0.7, 0.6];
        let e0 = [0.3, 0.2, 0.5, 0.5];
        let n = nuis(&e1, &e0, &[0.5; 4]);
        let est = tmle_estimate(&x, &y, &n).unwrap();
        assert_eq!(est.tmle.as_ref().unwrap().epsilon, 0.0);
        let g = gcomp_estimate(&e1, &e0).unwrap();
        assert!((est.psi - g.psi).abs() < 1e-12);
    }

    #[test]
    fn constant_outcome_rejected() {
        let n = nuis(&[1.0; 4], &[1.0; 4], &[0.5; 4]);
        assert!(tmle_target(&[1.0, 1.0, 0.0, 0.0], &[1.0; 4], &n).is_err());
    }

    proptest! {
        #[test]
        fn tmle_score_bounds_and_affine_equivariance(
            seed in any::<u64>(),
            c in 0.2f64..5.0,
            d in -3.0f64..3.0,
        ) {
            let mut rng = crate::rng::RngStream::new(seed, 0);
            let n = 40;
            let mut x = vec![0.0; n];
            let mut y = vec![0.0; n];
            let (mut e1, mut e0, mut ps) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
            for i in 0..n {
                x[i] = if i % 3 == 0 { 1.0 } else { 0.0 };
                y[i] = rng.uniform() * 4.0 - 1.0 + x[i];
                e1[i] = rng.uniform() * 3.0;
                e0[i] = rng.uniform() * 3.0 - 1.0;
                ps[i] = 0.2 + 0.6 * rng.uniform();
            }
            let base = nuis(&e1, &e0, &ps);
            let est = tmle_estimate(&x, &y, &base).unwrap();
            let eif = est.eif.as_ref().unwrap();
            prop_assert!(eif.score_mean.abs() < 1e-6);
            let (lo, hi) = (y.iter().copied().fold(f64::INFINITY, f64::min), y.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            let (m1, m0) = est.tmle.as_ref().unwrap().arm_means;
            prop_assert!(m1 >= lo && m1 <= hi && m0 >= lo && m0 <= hi);
            prop_assert!(est.psi.abs() <= hi - lo);

            let t = |v: &[f64]| v.iter().map(|a| c * a + d).collect::<Vec<_>>();
            let moved = nuis(&t(&e1), &t(&e0), &ps);
            let est2 = tmle_estimate(&x, &t(&y), &moved).unwrap();
            prop_assert!((est2.psi - c * est.psi).abs() < 1e-6);

            // textbook variance: two-pass sample variance over n
            let phi = eif_contributions(&x, &y, &e1, &e0, &ps);
            let m = phi.iter().sum::<f64>() / n as f64;
            let v = phi.iter().map(|p| (p - m).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            let aipw = aipw_estimate(&x, &y, &base).unwrap();
            prop_assert!((aipw.se.unwrap() - (v / n as f64).sqrt()).abs() < 1e-12);
        }
    }
}
