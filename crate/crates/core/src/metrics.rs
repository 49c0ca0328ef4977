//! Simulation performance measures with Monte Carlo standard errors, and the
//! instability flagging rule.

use serde::{Deserialize, Serialize};

use crate::data::format_value;
use crate::error::{Error, Result};
use crate::estimators::{EffectEstimate, Method};

/// Flag when the standard error exceeds this multiple of the median standard error.
pub const SE_RATIO_LIMIT: f64 = 10.0;
/// Flag when `|psi|` exceeds this multiple of `|median psi|`.
pub const PSI_RATIO_LIMIT: f64 = 5.0;

/// One estimate from one simulated dataset. Records are never deleted; exclusion
/// happens only when aggregating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub scenario: String,
    pub replication: usize,
    pub method: Method,
    pub library: String,
    /// Cross-fitting folds; `None` without cross-fitting.
    pub cf_folds: Option<usize>,
    pub n: usize,
    pub psi: f64,
    /// NaN when the estimator has no standard error.
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub non_finite: bool,
    pub unstable: bool,
    /// Estimation error message, when the replication failed.
    pub error: Option<String>,
    /// `mean(EIF)` after targeting (TMLE only).
    pub score_mean: Option<f64>,
    /// TMLE only: both targeted arm means inside the observed outcome range and
    /// `psi` inside the range of possible differences.
    pub within_range: Option<bool>,
    /// Super Learner fits behind this estimate.
    pub sl_fits: usize,
    /// Fits whose combined CV risk exceeds the best single learner's by more than 1e-8.
    pub sl_violations: usize,
}

impl ReplicationRecord {
    pub fn from_estimate(
        scenario: &str,
        replication: usize,
        library: &str,
        n: usize,
        est: &EffectEstimate,
        outcome_range: (f64, f64),
    ) -> ReplicationRecord {
        let se = est.se.unwrap_or(f64::NAN);
        let (lo, hi) = est.ci.unwrap_or((f64::NAN, f64::NAN));
        let (ymin, ymax) = outcome_range;
        let within_range = est.tmle.as_ref().map(|t| {
            let inside = |v: f64| ymin <= v && v <= ymax;
            inside(t.arm_means.0) && inside(t.arm_means.1) && est.psi.abs() <= ymax - ymin
        });
        let summaries = est.sl_weights_outcome.iter().chain(&est.sl_weights_exposure);
        let sl_violations = summaries
            .clone()
            .filter(|s| {
                let best = s.cv_risk.iter().flatten().copied().fold(f64::INFINITY, f64::min);
                !(s.combined_cv_risk <= best + 1e-8)
            })
            .count();
        ReplicationRecord {
            scenario: scenario.to_string(),
            replication,
            method: est.method,
            library: library.to_string(),
            cf_folds: est.k,
            n,
            psi: est.psi,
            se,
            ci_lower: lo,
            ci_upper: hi,
            non_finite: !est.is_finite(),
            unstable: false,
            error: None,
            score_mean: if est.method == Method::Tmle { est.eif.as_ref().map(|e| e.score_mean) } else { None },
            within_range,
            sl_fits: summaries.count(),
            sl_violations,
        }
    }

    pub fn failed(
        scenario: &str,
        replication: usize,
        method: Method,
        library: &str,
        cf_folds: Option<usize>,
        n: usize,
        error: String,
    ) -> ReplicationRecord {
        ReplicationRecord {
            scenario: scenario.to_string(),
            replication,
            method,
            library: library.to_string(),
            cf_folds,
            n,
            psi: f64::NAN,
            se: f64::NAN,
            ci_lower: f64::NAN,
            ci_upper: f64::NAN,
            non_finite: true,
            unstable: false,
            error: Some(error),
            score_mean: None,
            within_range: None,
            sl_fits: 0,
            sl_violations: 0,
        }
    }

    /// Usable in aggregates: no error and a finite estimate. Estimators without a
    /// standard error (g-computation) are usable for bias and empirical SE only.
    pub fn is_usable(&self) -> bool {
        !self.non_finite && self.error.is_none() && self.psi.is_finite()
    }

    pub const CSV_HEADER: [&'static str; 17] = [
        "scenario",
        "replication",
        "method",
        "library",
        "cf_folds",
        "n",
        "psi",
        "se",
        "ci_lower",
        "ci_upper",
        "non_finite",
        "unstable",
        "error",
        "score_mean",
        "within_range",
        "sl_fits",
        "sl_violations",
    ];

    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.scenario.clone(),
            self.replication.to_string(),
            self.method.as_str().to_string(),
            self.library.clone(),
            cf_label(self.cf_folds),
            self.n.to_string(),
            format_value(self.psi),
            format_value(self.se),
            format_value(self.ci_lower),
            format_value(self.ci_upper),
            self.non_finite.to_string(),
            self.unstable.to_string(),
            self.error.clone().unwrap_or_default(),
            self.score_mean.map(format_value).unwrap_or_default(),
            self.within_range.map(|b| b.to_string()).unwrap_or_default(),
            self.sl_fits.to_string(),
            self.sl_violations.to_string(),
        ]
    }
}

pub fn cf_label(k: Option<usize>) -> String {
    k.map_or_else(|| "none".to_string(), |k| k.to_string())
}

/// Median of finite values; `None` when there are none.
fn median(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Instability flags for one (scenario, method, configuration) group: a record is
/// flagged iff `se > 10 * median(se)` or `|psi| > 5 * |median(psi)|`, with the
/// medians taken over the finite values of the group.
pub fn flag_unstable(psi: &[f64], se: &[f64]) -> Result<Vec<bool>> {
    if psi.len() != se.len() {
        return Err(Error::invalid("psi and se lengths differ"));
    }
    if psi.len() < 3 {
        return Err(Error::invalid(format!("instability flagging needs >= 3 records, got {}", psi.len())));
    }
    let med_se = median(se.iter().copied());
    let med_psi = median(psi.iter().copied());
    Ok(psi
        .iter()
        .zip(se)
        .map(|(&p, &s)| {
            med_se.is_some_and(|m| s > SE_RATIO_LIMIT * m) || med_psi.is_some_and(|m| p.abs() > PSI_RATIO_LIMIT * m.abs())
        })
        .collect())
}

/// Sets `unstable` on every record, grouping by (scenario, method, library,
/// cross-fitting, n). Groups with fewer than 3 records are left unflagged.
pub fn flag_records(records: &mut [ReplicationRecord]) {
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<(String, Method, String, Option<usize>, usize), Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups
            .entry((r.scenario.clone(), r.method, r.library.clone(), r.cf_folds, r.n))
            .or_default()
            .push(i);
    }
    for idx in groups.values() {
        let psi: Vec<f64> = idx.iter().map(|&i| records[i].psi).collect();
        let se: Vec<f64> = idx.iter().map(|&i| records[i].se).collect();
        if let Ok(flags) = flag_unstable(&psi, &se) {
            for (&i, f) in idx.iter().zip(flags) {
                records[i].unstable = f;
            }
        }
    }
}

/// Monte Carlo standard error of a coverage proportion, in percent.
pub fn coverage_mcse(coverage: f64, s: usize) -> f64 {
    100.0 * (coverage * (1.0 - coverage) / s as f64).sqrt()
}

/// Performance of one estimator configuration in one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceReport {
    /// Records used.
    pub s: usize,
    pub total: usize,
    pub flagged: usize,
    /// Flagged records left out (0 unless exclusion is enabled).
    pub excluded: usize,
    /// Records unusable because their estimate failed or is non-finite.
    pub unusable: usize,
    pub bias: f64,
    pub bias_mcse: f64,
    /// Absent when the true effect is 0.
    pub relbias_pct: Option<f64>,
    pub relbias_mcse: Option<f64>,
    pub empse: f64,
    pub empse_mcse: f64,
    /// `sqrt(mean(se^2))`.
    pub modse: f64,
    pub modse_relerr_pct: f64,
    pub modse_relerr_mcse: f64,
    pub coverage_pct: f64,
    pub coverage_mcse: f64,
}

/// Aggregates records against the true effect `truth`.
pub fn compute_performance(records: &[ReplicationRecord], truth: f64, exclude_flagged: bool) -> Result<PerformanceReport> {
    let total = records.len();
    let flagged = records.iter().filter(|r| r.unstable).count();
    let unusable = records.iter().filter(|r| !r.is_usable()).count();
    let used: Vec<&ReplicationRecord> = records
        .iter()
        .filter(|r| r.is_usable() && !(exclude_flagged && r.unstable))
        .collect();
    let excluded = if exclude_flagged { flagged } else { 0 };
    let s = used.len();
    if s < 2 {
        return Err(Error::invalid(format!("performance needs >= 2 usable records, got {s}")));
    }
    let sf = s as f64;
    let mean_psi = used.iter().map(|r| r.psi).sum::<f64>() / sf;
    let bias = mean_psi - truth;
    let empse = (used.iter().map(|r| (r.psi - mean_psi).powi(2)).sum::<f64>() / (sf - 1.0)).sqrt();
    let bias_mcse = empse / sf.sqrt();
    let empse_mcse = empse / (2.0 * (sf - 1.0)).sqrt();
    let mean_var = used.iter().map(|r| r.se * r.se).sum::<f64>() / sf;
    let modse = mean_var.sqrt();
    let var_of_var = used.iter().map(|r| (r.se * r.se - mean_var).powi(2)).sum::<f64>() / (sf - 1.0);
    let ratio = modse / empse;
    let modse_relerr_pct = 100.0 * (ratio - 1.0);
    let modse_relerr_mcse = 100.0 * ratio * (var_of_var / (4.0 * sf * mean_var * mean_var) + 1.0 / (2.0 * (sf - 1.0))).sqrt();
    let covered = if used.iter().all(|r| r.ci_lower.is_finite() && r.ci_upper.is_finite()) {
        used.iter().filter(|r| r.ci_lower <= truth && truth <= r.ci_upper).count() as f64 / sf
    } else {
        f64::NAN
    };
    let (relbias_pct, relbias_mcse) = if truth == 0.0 {
        (None, None)
    } else {
        (Some(100.0 * bias / truth), Some(100.0 * bias_mcse / truth.abs()))
    };
    Ok(PerformanceReport {
        s,
        total,
        flagged,
        excluded,
        unusable,
        bias,
        bias_mcse,
        relbias_pct,
        relbias_mcse,
        empse,
        empse_mcse,
        modse,
        modse_relerr_pct,
        modse_relerr_mcse,
        coverage_pct: 100.0 * covered,
        coverage_mcse: coverage_mcse(covered, s),
    })
}

/// A [`PerformanceReport`] with its grouping keys, as written to `performance.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceRow {
    pub scenario: String,
    pub method: Method,
    pub library: String,
    pub cf_folds: Option<usize>,
    pub n: usize,
    pub report: PerformanceReport,
}

impl PerformanceRow {
    pub const CSV_HEADER: [&'static str; 17] = [
        "scenario",
        "method",
        "library",
        "cf_folds",
        "n",
        "S",
        "excluded",
        "bias",
        "bias_mcse",
        "relbias_pct",
        "empse",
        "empse_mcse",
        "modse",
        "modse_relerr_pct",
        "modse_relerr_mcse",
        "coverage_pct",
        "coverage_mcse",
    ];

    pub fn csv_row(&self) -> Vec<String> {
        let r = &self.report;
        vec![
            self.scenario.clone(),
            self.method.as_str().to_string(),
            self.library.clone(),
            cf_label(self.cf_folds),
            self.n.to_string(),
            r.s.to_string(),
            r.excluded.to_string(),
            format_value(r.bias),
            format_value(r.bias_mcse),
            r.relbias_pct.map(format_value).unwrap_or_default(),
            format_value(r.empse),
            format_value(r.empse_mcse),
            format_value(r.modse),
            format_value(r.modse_relerr_pct),
            format_value(r.modse_relerr_mcse),
            format_value(r.coverage_pct),
            format_value(r.coverage_mcse),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(psi: f64, se: f64, lo: f64, hi: f64) -> ReplicationRecord {
        ReplicationRecord {
            scenario: "s".into(),
            replication: 0,
            method: Method::Aipw,
            library: "reduced".into(),
            cf_folds: None,
            n: 100,
            psi,
            se,
            ci_lower: lo,
            ci_upper: hi,
            non_finite: false,
            unstable: false,
            error: None,
            score_mean: None,
            within_range: None,
            sl_fits: 0,
            sl_violations: 0,
        }
    }

    #[test]
    fn psi_rule() {
        assert_eq!(flag_unstable(&[1.0, 1.0, 1.0, 100.0], &[1.0; 4]).unwrap(), [false, false, false, true]);
    }

    #[test]
    fn se_rule() {
        assert_eq!(flag_unstable(&[1.0; 4], &[1.0, 1.0, 1.0, 20.0]).unwrap(), [false, false, false, true]);
    }

    #[test]
    fn thresholds_unmet() {
        assert_eq!(flag_unstable(&[1.0, 2.0, 3.0], &[1.0, 1.0, 2.0]).unwrap(), [false; 3]);
        assert!(flag_unstable(&[1.0, 2.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn perfect_estimates() {
        let recs: Vec<_> = (0..5).map(|_| rec(2.0, 0.5, 1.0, 3.0)).collect();
        let p = compute_performance(&recs, 2.0, false).unwrap();
        assert_eq!(p.bias, 0.0);
        assert_eq!(p.empse, 0.0);
        assert_eq!(p.coverage_pct, 100.0);
        assert_eq!(p.coverage_mcse, 0.0);
    }

    #[test]
    fn coverage_mcse_design_value() {
        assert!((coverage_mcse(0.95, 2000) - 0.487339717).abs() < 1e-8);
    }

    #[test]
    fn relbias_absent_at_zero_truth() {
        let recs = vec![rec(0.1, 1.0, -1.0, 1.0), rec(-0.3, 1.0, -1.0, 1.0)];
        let p = compute_performance(&recs, 0.0, false).unwrap();
        assert_eq!(p.relbias_pct, None);
        assert!((p.bias + 0.1).abs() < 1e-15);
    }

    #[test]
    fn exclusion_only_changes_aggregates() {
        let mut recs: Vec<_> = (0..6).map(|i| rec(1.0 + 0.01 * i as f64, 0.1, 0.8, 1.2)).collect();
        recs.push(rec(50.0, 0.1, 49.8, 50.2));
        flag_records(&mut recs);
        assert_eq!(recs.iter().filter(|r| r.unstable).count(), 1);
        let all = compute_performance(&recs, 1.0, false).unwrap();
        let kept = compute_performance(&recs, 1.0, true).unwrap();
        assert_eq!((all.s, all.excluded), (7, 0));
        assert_eq!((kept.s, kept.excluded, kept.flagged), (6, 1, 1));
        assert_eq!(recs.len(), 7);
        // bounded contamination of coverage
        assert!((all.coverage_pct - kept.coverage_pct).abs() <= 100.0 / 7.0 + 1e-12);
    }

    #[test]
    fn point_only_estimates_have_no_se_measures() {
        let recs = vec![rec(1.0, f64::NAN, f64::NAN, f64::NAN), rec(1.2, f64::NAN, f64::NAN, f64::NAN)];
        let p = compute_performance(&recs, 1.0, false).unwrap();
        assert!((p.bias - 0.1).abs() < 1e-15);
        assert!(p.modse.is_nan() && p.coverage_pct.is_nan());
    }

    #[test]
    fn failed_records_are_unusable() {
        let recs = vec![
            rec(1.0, 0.1, 0.8, 1.2),
            rec(1.1, 0.1, 0.9, 1.3),
            ReplicationRecord::failed("s", 2, Method::Aipw, "reduced", None, 100, "boom".into()),
        ];
        let p = compute_performance(&recs, 1.0, false).unwrap();
        assert_eq!((p.s, p.unusable, p.total), (2, 1, 3));
    }
}
