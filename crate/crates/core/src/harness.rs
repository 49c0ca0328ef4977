//! Simulation benchmark: scenarios × estimator configurations × replications,
//! with truth caching, per-replication random streams and deterministic outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::crossfit::{estimate_from_nuisances, fit_nuisances, EstimatorConfig};
use crate::dgm::{generate, recenter, true_ace, DgmSpec, TruthRecord, RECENTER_N, TRUTH_N};
use crate::error::{Error, Result};
use crate::estimators::Method;
use crate::metrics::{compute_performance, flag_records, PerformanceRow, ReplicationRecord};
use crate::rng::RngStream;
use crate::estimators::DEFAULT_TRUNCATION;
use crate::superlearner::{Library, DEFAULT_SL_FOLDS};

/// Seed of the truth oracle and of the recentering after a `beta` override.
/// Fixed so that cached truths are shared by every benchmark.
pub const TRUTH_SEED: u64 = 0x74_7275_7468;

fn default_truth_n() -> usize {
    TRUTH_N
}

/// One data-generating scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Built-in spec name or path to a spec JSON file.
    pub spec: String,
    pub n: usize,
    /// Replication count S.
    pub reps: usize,
    /// Overrides the spec's exposure effect; the outcome is then recentered.
    #[serde(default)]
    pub beta: Option<f64>,
    /// Scenario id; defaults to `<spec name>-n<n>`.
    #[serde(default)]
    pub id: Option<String>,
}

/// A full benchmark grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub scenarios: Vec<Scenario>,
    /// Estimator configurations; their `seed` fields are ignored in favour of
    /// the per-replication streams.
    pub estimators: Vec<EstimatorConfig>,
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Leave flagged records out of `performance.csv`.
    #[serde(default)]
    pub exclude_flagged: bool,
    /// Worker threads; 0 uses all cores.
    #[serde(default)]
    pub workers: usize,
    #[serde(default = "default_truth_n")]
    pub truth_n: usize,
    /// Directory of cached truths keyed by spec hash; defaults to `<out>/truth`.
    #[serde(default)]
    pub truth_cache: Option<PathBuf>,
}

/// A scenario with its spec resolved and its stream fixed.
#[derive(Debug, Clone)]
struct ResolvedScenario {
    id: String,
    spec: DgmSpec,
    n: usize,
    reps: usize,
    stream: u64,
}

impl BenchmarkConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<BenchmarkConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: BenchmarkConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenarios.is_empty() || self.estimators.is_empty() {
            return Err(Error::invalid("benchmark grid is empty"));
        }
        for s in &self.scenarios {
            if s.reps < 2 {
                return Err(Error::invalid(format!("scenario '{}' needs S >= 2 replications, got {}", s.spec, s.reps)));
            }
            DgmSpec::resolve(&s.spec)?;
        }
        let mut keys = Vec::new();
        for e in &self.estimators {
            e.validate()?;
            let key = (e.method, library_label(e)?, e.crossfit);
            if keys.contains(&key) {
                return Err(Error::invalid(format!(
                    "estimator configurations {} {} CF={:?} are listed twice",
                    key.0.as_str(),
                    key.1,
                    key.2
                )));
            }
            keys.push(key);
        }
        let mut ids: Vec<String> = self.resolve()?.into_iter().map(|s| s.id).collect();
        let total = ids.len();
        ids.sort();
        ids.dedup();
        if ids.len() != total {
            return Err(Error::invalid("scenario ids must be unique"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, leaving out the settings that cannot
    /// change results (worker count, output and cache locations).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.workers = 0;
        c.out = None;
        c.truth_cache = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    fn resolve(&self) -> Result<Vec<ResolvedScenario>> {
        self.scenarios
            .iter()
            .map(|s| {
                let mut spec = DgmSpec::resolve(&s.spec)?;
                if let Some(beta) = s.beta {
                    spec = recenter(&spec.with_beta(beta), RECENTER_N, &RngStream::new(TRUTH_SEED, 1))?;
                }
                let id = s.id.clone().unwrap_or_else(|| format!("{}-n{}", spec.name, s.n));
                let stream = stream_id(&id);
                Ok(ResolvedScenario {
                    id,
                    spec,
                    n: s.n,
                    reps: s.reps,
                    stream,
                })
            })
            .collect()
    }
}

/// Stream id of a scenario, derived from its id so that adding or reordering
/// scenarios leaves the others unchanged.
fn stream_id(id: &str) -> u64 {
    let d = Sha256::digest(id.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Label of the libraries used by a configuration, with the Super Learner folds
/// and truncation appended when they differ from the defaults. Together with the
/// method and cross-fitting it identifies a configuration in the outputs.
pub fn library_label(cfg: &EstimatorConfig) -> Result<String> {
    let (q, g) = (cfg.outcome_library()?, cfg.exposure_library()?);
    let mut label = if q == g { q.label } else { format!("Q:{}/g:{}", q.label, g.label) };
    if cfg.sl_folds != DEFAULT_SL_FOLDS {
        label.push_str(&format!(";V={}", cfg.sl_folds));
    }
    match cfg.truncation {
        Some(t) if t == DEFAULT_TRUNCATION => {}
        Some((lo, hi)) => label.push_str(&format!(";trunc={lo}-{hi}")),
        None => label.push_str(";trunc=none"),
    }
    Ok(label)
}

/// Configurations that can share one nuisance fit.
#[derive(Debug, Clone)]
struct NuisanceGroup {
    outcome: Library,
    exposure: Library,
    crossfit: Option<usize>,
    sl_folds: usize,
    members: Vec<usize>,
}

fn nuisance_groups(estimators: &[EstimatorConfig]) -> Result<Vec<NuisanceGroup>> {
    let mut groups: Vec<NuisanceGroup> = Vec::new();
    for (i, e) in estimators.iter().enumerate() {
        let (q, g) = (e.outcome_library()?, e.exposure_library()?);
        match groups
            .iter_mut()
            .find(|gr| gr.outcome == q && gr.exposure == g && gr.crossfit == e.crossfit && gr.sl_folds == e.sl_folds)
        {
            Some(gr) => gr.members.push(i),
            None => groups.push(NuisanceGroup {
                outcome: q,
                exposure: g,
                crossfit: e.crossfit,
                sl_folds: e.sl_folds,
                members: vec![i],
            }),
        }
    }
    Ok(groups)
}

/// Truth for a spec, read from or written to the cache directory when given.
pub fn cached_truth(spec: &DgmSpec, n: usize, cache: Option<&Path>) -> Result<TruthRecord> {
    let hash = spec.hash();
    let path = cache.map(|d| d.join(format!("{hash}-{n}.json")));
    if let Some(p) = &path {
        if p.exists() {
            let rec: TruthRecord = serde_json::from_str(&std::fs::read_to_string(p)?)?;
            if rec.spec_hash == hash && rec.n == n {
                return Ok(rec);
            }
        }
    }
    let rec = true_ace(spec, n, &RngStream::new(TRUTH_SEED, 0))?;
    if let Some(p) = &path {
        std::fs::create_dir_all(p.parent().expect("cache file has a parent"))?;
        std::fs::write(p, serde_json::to_string_pretty(&rec)?)?;
    }
    Ok(rec)
}

/// Per-scenario entry of the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioManifest {
    pub id: String,
    pub spec: String,
    pub spec_hash: String,
    pub beta: f64,
    pub n: usize,
    pub reps: usize,
    /// Stream id under the root seed; replication `r` uses its substream `r`.
    pub stream: u64,
    pub truth: TruthRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config_sha256: String,
    pub root_seed: u64,
    pub scenarios: Vec<ScenarioManifest>,
    pub records: usize,
    pub failed: usize,
    pub flagged: usize,
    /// TMLE records whose `|mean(EIF)|` exceeds 1e-6.
    pub tmle_score_violations: usize,
    /// TMLE records outside the outcome bounds.
    pub tmle_bound_violations: usize,
    pub sl_fits: usize,
    pub sl_violations: usize,
}

/// Everything a benchmark run produces.
#[derive(Debug, Clone)]
pub struct BenchmarkResult {
    pub records: Vec<ReplicationRecord>,
    /// Flagged records included.
    pub performance_all: Vec<PerformanceRow>,
    /// Flagged records excluded.
    pub performance_excluded: Vec<PerformanceRow>,
    pub manifest: Manifest,
    pub exclude_flagged: bool,
}

/// Largest tolerated `|mean(EIF)|` after targeting.
pub const SCORE_TOL: f64 = 1e-6;

fn run_replication(
    sc: &ResolvedScenario,
    r: usize,
    root: &RngStream,
    estimators: &[EstimatorConfig],
    groups: &[NuisanceGroup],
    labels: &[String],
) -> Vec<(usize, ReplicationRecord)> {
    let rng = root.substream(sc.stream).substream(r as u64);
    let fail_all = |members: &[usize], msg: &str| -> Vec<(usize, ReplicationRecord)> {
        members
            .iter()
            .map(|&i| {
                let e = &estimators[i];
                (i, ReplicationRecord::failed(&sc.id, r, e.method, &labels[i], e.crossfit, sc.n, msg.to_string()))
            })
            .collect()
    };
    let data = match generate(&sc.spec, sc.n, &rng.substream(0)) {
        Ok(d) => d,
        Err(err) => return fail_all(&(0..estimators.len()).collect::<Vec<_>>(), &err.to_string()),
    };
    let analysis = rng.substream(1);
    let mut out = Vec::new();
    for g in groups {
        let fit = match fit_nuisances(&data, &g.outcome, &g.exposure, g.crossfit, g.sl_folds, &analysis) {
            Ok(f) => f,
            Err(err) => {
                out.extend(fail_all(&g.members, &err.to_string()));
                continue;
            }
        };
        for &i in &g.members {
            let e = &estimators[i];
            let rec = match estimate_from_nuisances(&data, &fit, e.method, e.truncation) {
                Ok(est) => ReplicationRecord::from_estimate(&sc.id, r, &labels[i], sc.n, &est, data.outcome_range()),
                Err(err) => ReplicationRecord::failed(&sc.id, r, e.method, &labels[i], e.crossfit, sc.n, err.to_string()),
            };
            out.push((i, rec));
        }
    }
    out
}

/// Runs the grid. Flagged, failed and non-finite replications are recorded,
/// never fatal.
pub fn run_benchmark(config: &BenchmarkConfig) -> Result<BenchmarkResult> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
    pool.install(|| run_in_pool(config))
}

fn run_in_pool(config: &BenchmarkConfig) -> Result<BenchmarkResult> {
    let scenarios = config.resolve()?;
    let cache = config
        .truth_cache
        .clone()
        .or_else(|| config.out.as_ref().map(|o| o.join("truth")));
    let mut truths: BTreeMap<String, TruthRecord> = BTreeMap::new();
    for sc in &scenarios {
        let hash = sc.spec.hash();
        if !truths.contains_key(&hash) {
            log::info!("truth for {} ({} draws)", sc.spec.name, config.truth_n);
            truths.insert(hash.clone(), cached_truth(&sc.spec, config.truth_n, cache.as_deref())?);
        }
    }

    let groups = nuisance_groups(&config.estimators)?;
    let labels: Vec<String> = config.estimators.iter().map(library_label).collect::<Result<_>>()?;
    let root = RngStream::new(config.seed, 0);
    let jobs: Vec<(usize, usize)> = scenarios
        .iter()
        .enumerate()
        .flat_map(|(s, sc)| (0..sc.reps).map(move |r| (s, r)))
        .collect();
    let mut tagged: Vec<(usize, usize, usize, ReplicationRecord)> = jobs
        .par_iter()
        .flat_map_iter(|&(s, r)| {
            run_replication(&scenarios[s], r, &root, &config.estimators, &groups, &labels)
                .into_iter()
                .map(move |(i, rec)| (s, i, r, rec))
        })
        .collect();
    tagged.sort_by_key(|t| (t.0, t.1, t.2));
    let mut records: Vec<ReplicationRecord> = tagged.into_iter().map(|t| t.3).collect();
    flag_records(&mut records);

    let mut performance_all = Vec::new();
    let mut performance_excluded = Vec::new();
    for sc in &scenarios {
        let truth = truths[&sc.spec.hash()].psi;
        for (i, e) in config.estimators.iter().enumerate() {
            let group: Vec<ReplicationRecord> = records
                .iter()
                .filter(|rec| rec.scenario == sc.id && rec.method == e.method && rec.library == labels[i] && rec.cf_folds == e.crossfit)
                .cloned()
                .collect();
            let row = |exclude| -> Option<PerformanceRow> {
                match compute_performance(&group, truth, exclude) {
                    Ok(report) => Some(PerformanceRow {
                        scenario: sc.id.clone(),
                        method: e.method,
                        library: labels[i].clone(),
                        cf_folds: e.crossfit,
                        n: sc.n,
                        report,
                    }),
                    Err(err) => {
                        log::warn!("{} {} {}: {err}", sc.id, e.method.as_str(), labels[i]);
                        None
                    }
                }
            };
            performance_all.extend(row(false));
            performance_excluded.extend(row(true));
        }
    }

    let tmle: Vec<&ReplicationRecord> = records.iter().filter(|r| r.method == Method::Tmle && r.error.is_none()).collect();
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: config.hash(),
        root_seed: config.seed,
        scenarios: scenarios
            .iter()
            .map(|sc| ScenarioManifest {
                id: sc.id.clone(),
                spec: sc.spec.name.clone(),
                spec_hash: sc.spec.hash(),
                beta: sc.spec.outcome.beta,
                n: sc.n,
                reps: sc.reps,
                stream: sc.stream,
                truth: truths[&sc.spec.hash()].clone(),
            })
            .collect(),
        records: records.len(),
        failed: records.iter().filter(|r| r.error.is_some()).count(),
        flagged: records.iter().filter(|r| r.unstable).count(),
        tmle_score_violations: tmle.iter().filter(|r| !r.score_mean.is_some_and(|m| m.abs() < SCORE_TOL)).count(),
        tmle_bound_violations: tmle.iter().filter(|r| r.within_range != Some(true)).count(),
        sl_fits: records.iter().map(|r| r.sl_fits).sum(),
        sl_violations: records.iter().map(|r| r.sl_violations).sum(),
    };
    if manifest.tmle_score_violations > 0 {
        log::warn!("{} TMLE replications did not solve the score equation", manifest.tmle_score_violations);
    }
    Ok(BenchmarkResult {
        records,
        performance_all,
        performance_excluded,
        manifest,
        exclude_flagged: config.exclude_flagged,
    })
}

fn write_rows<'a>(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>> + 'a) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

impl BenchmarkResult {
    /// Writes `replications.csv`, `performance.csv` (per the exclusion toggle),
    /// `performance_all.csv`, `performance_excluded.csv` and `manifest.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_rows(
            &dir.join("replications.csv"),
            &ReplicationRecord::CSV_HEADER,
            self.records.iter().map(ReplicationRecord::csv_row),
        )?;
        let perf = |rows: &[PerformanceRow], name: &str| {
            write_rows(&dir.join(name), &PerformanceRow::CSV_HEADER, rows.iter().map(PerformanceRow::csv_row))
        };
        perf(&self.performance_all, "performance_all.csv")?;
        perf(&self.performance_excluded, "performance_excluded.csv")?;
        perf(
            if self.exclude_flagged { &self.performance_excluded } else { &self.performance_all },
            "performance.csv",
        )?;
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)? + "\n")?;
        Ok(())
    }

    /// The performance row of one (scenario, method, library, cross-fitting) cell.
    pub fn performance(&self, scenario: &str, method: Method, library: &str, cf: Option<usize>, excluded: bool) -> Option<&PerformanceRow> {
        let rows = if excluded { &self.performance_excluded } else { &self.performance_all };
        rows.iter()
            .find(|r| r.scenario == scenario && r.method == method && r.library == library && r.cf_folds == cf)
    }
}
