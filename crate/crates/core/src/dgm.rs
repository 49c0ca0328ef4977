//! Synthetic data-generating mechanisms with a high-dimensional confounder set,
//! an empirical truth oracle and power-targeted effect calibration.
//!
//! Variables are drawn in a fixed order: confounders (each may depend on earlier
//! ones), then the exposure from a logistic model, then the outcome from a
//! Gaussian linear model. Confounders, exposure and outcome noise use separate
//! random substreams, so changing the exposure or outcome model never changes
//! the confounder draws.

use std::collections::{BTreeMap, HashMap};

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::crossfit::{fit_nuisances, estimate_from_nuisances};
use crate::data::{Column, ColumnKind, Dataset};
use crate::error::{Error, Result};
use crate::estimators::Method;
use crate::learners::glm::expit;
use crate::rng::RngStream;
use crate::superlearner::Library;

/// Default oracle size for [`true_ace`].
pub const TRUTH_N: usize = 5_000_000;
/// Rows per independently seeded chunk in large oracle computations.
const CHUNK: usize = 100_000;
/// Sample size used to re-center the outcome intercept.
pub const RECENTER_N: usize = 1_000_000;

const W_STREAM: u64 = 0;
const X_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

/// Names of the shipped mechanisms.
pub const BUILTIN_SPECS: [&str; 5] = ["simple-1", "complex-1a", "complex-1b", "simple-2", "complex-2"];

fn one() -> f64 {
    1.0
}

/// One step of the sequential confounder generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Confounder {
    /// `intercept + coef . W_prev + sd * N(0, 1)`.
    Gaussian {
        name: String,
        #[serde(default)]
        intercept: f64,
        #[serde(default)]
        coef: BTreeMap<String, f64>,
        #[serde(default = "one")]
        sd: f64,
    },
    /// Bernoulli with logit `intercept + coef . W_prev`.
    Bernoulli {
        name: String,
        intercept: f64,
        #[serde(default)]
        coef: BTreeMap<String, f64>,
    },
    /// Multinomial logit over `levels`; the first level is the reference. Stored
    /// as one indicator column `name_level` per non-reference level.
    Categorical {
        name: String,
        levels: Vec<String>,
        /// Logit intercepts of the non-reference levels.
        intercepts: Vec<f64>,
        /// Per non-reference level slopes on earlier confounders.
        #[serde(default)]
        coef: Vec<BTreeMap<String, f64>>,
    },
    /// `count` correlated continuous columns `prefix01..` driven by latent standard
    /// normal factors. Column `j` loads on factor `j mod factors` with
    /// `primary_loading` and on the next factor with `secondary_loading`, plus
    /// idiosyncratic noise giving unit variance.
    FactorBlock {
        prefix: String,
        count: usize,
        factors: usize,
        primary_loading: f64,
        #[serde(default)]
        secondary_loading: f64,
        /// Factor mean shifts: earlier confounder name to per-factor slopes.
        #[serde(default)]
        shifts: BTreeMap<String, Vec<f64>>,
    },
}

impl Confounder {
    fn column_names(&self) -> Vec<(String, ColumnKind)> {
        match self {
            Confounder::Gaussian { name, .. } => vec![(name.clone(), ColumnKind::Continuous)],
            Confounder::Bernoulli { name, .. } => vec![(name.clone(), ColumnKind::Binary)],
            Confounder::Categorical { name, levels, .. } => levels
                .iter()
                .skip(1)
                .map(|l| (format!("{name}_{l}"), ColumnKind::Binary))
                .collect(),
            Confounder::FactorBlock { prefix, count, .. } => {
                let width = count.to_string().len().max(2);
                (1..=*count)
                    .map(|j| (format!("{prefix}{j:0width$}"), ColumnKind::Continuous))
                    .collect()
            }
        }
    }

    /// Number of confounder variables (a categorical variable counts once).
    fn variables(&self) -> usize {
        match self {
            Confounder::FactorBlock { count, .. } => *count,
            _ => 1,
        }
    }
}

/// Linear predictor with optional squared terms and pairwise interactions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearTerms {
    pub intercept: f64,
    #[serde(default)]
    pub main: BTreeMap<String, f64>,
    #[serde(default)]
    pub squared: BTreeMap<String, f64>,
    /// `(a, b, coef)` confounder-confounder products, scaled by the interaction
    /// multiplier.
    #[serde(default)]
    pub interactions: Vec<(String, String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeModel {
    pub intercept: f64,
    /// Exposure main effect.
    pub beta: f64,
    pub noise_sd: f64,
    #[serde(default)]
    pub main: BTreeMap<String, f64>,
    #[serde(default)]
    pub squared: BTreeMap<String, f64>,
    #[serde(default)]
    pub interactions: Vec<(String, String, f64)>,
    /// Exposure-confounder interaction slopes, scaled by the interaction multiplier.
    #[serde(default)]
    pub exposure_interactions: BTreeMap<String, f64>,
}

impl OutcomeModel {
    fn confounder_terms(&self) -> LinearTerms {
        LinearTerms {
            intercept: self.intercept,
            main: self.main.clone(),
            squared: self.squared.clone(),
            interactions: self.interactions.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgmSpec {
    pub name: String,
    #[serde(default)]
    pub description: String,
    /// Multiplier applied to every interaction coefficient.
    #[serde(default = "one")]
    pub interaction_scale: f64,
    pub confounders: Vec<Confounder>,
    pub exposure: LinearTerms,
    pub outcome: OutcomeModel,
}

impl DgmSpec {
    pub fn from_json(text: &str) -> Result<DgmSpec> {
        let spec: DgmSpec = serde_json::from_str(text)?;
        spec.compile()?;
        Ok(spec)
    }

    pub fn from_json_file(path: impl AsRef<std::path::Path>) -> Result<DgmSpec> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// One of the shipped mechanisms by name.
    pub fn builtin(name: &str) -> Result<DgmSpec> {
        let text = match name {
            "simple-1" => include_str!("../specs/simple-1.json"),
            "complex-1a" => include_str!("../specs/complex-1a.json"),
            "complex-1b" => include_str!("../specs/complex-1b.json"),
            "simple-2" => include_str!("../specs/simple-2.json"),
            "complex-2" => include_str!("../specs/complex-2.json"),
            other => return Err(Error::invalid(format!("unknown mechanism '{other}'"))),
        };
        Self::from_json(text)
    }

    /// Builtin name or path to a JSON file.
    pub fn resolve(name_or_path: &str) -> Result<DgmSpec> {
        if BUILTIN_SPECS.contains(&name_or_path) {
            Self::builtin(name_or_path)
        } else {
            Self::from_json_file(name_or_path)
        }
    }

    /// Number of confounder variables.
    pub fn p(&self) -> usize {
        self.confounders.iter().map(Confounder::variables).sum()
    }

    pub fn columns(&self) -> Vec<Column> {
        self.confounders
            .iter()
            .flat_map(|c| c.column_names())
            .map(|(name, kind)| Column { name, kind })
            .collect()
    }

    /// True when the outcome has no exposure-confounder interaction, so the ACE
    /// equals `beta`.
    pub fn homogeneous_effect(&self) -> bool {
        self.outcome.exposure_interactions.values().all(|&c| c == 0.0) || self.interaction_scale == 0.0
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn with_beta(&self, beta: f64) -> DgmSpec {
        let mut s = self.clone();
        s.outcome.beta = beta;
        s
    }

    fn compile(&self) -> Result<Compiled> {
        Compiled::new(self)
    }

    /// Implied mean off-diagonal correlation inside each factor block, ignoring
    /// the (small) confounder-driven factor shifts.
    pub fn implied_block_correlation(&self) -> Vec<(String, f64)> {
        self.confounders
            .iter()
            .filter_map(|c| match c {
                Confounder::FactorBlock {
                    prefix,
                    count,
                    factors,
                    primary_loading,
                    secondary_loading,
                    ..
                } => {
                    let l = loadings(*count, *factors, *primary_loading, *secondary_loading);
                    let mut total = 0.0;
                    for j in 0..*count {
                        for k in 0..*count {
                            if j != k {
                                total += (0..*factors).map(|f| l[j][f] * l[k][f]).sum::<f64>();
                            }
                        }
                    }
                    Some((prefix.clone(), total / (*count * (*count - 1)) as f64))
                }
                _ => None,
            })
            .collect()
    }
}

fn loadings(count: usize, factors: usize, primary: f64, secondary: f64) -> Vec<Vec<f64>> {
    (0..count)
        .map(|j| {
            let mut row = vec![0.0; factors];
            row[j % factors] += primary;
            row[(j + 1) % factors] += secondary;
            row
        })
        .collect()
}

type Slopes = Vec<(usize, f64)>;

enum Step {
    Gaussian {
        col: usize,
        intercept: f64,
        slopes: Slopes,
        sd: f64,
    },
    Bernoulli {
        col: usize,
        intercept: f64,
        slopes: Slopes,
    },
    Categorical {
        first_col: usize,
        intercepts: Vec<f64>,
        slopes: Vec<Slopes>,
    },
    FactorBlock {
        first_col: usize,
        loadings: Vec<Vec<f64>>,
        unique_sd: Vec<f64>,
        shifts: Vec<(usize, Vec<f64>)>,
    },
}

#[derive(Debug, Clone)]
struct CompiledLinear {
    intercept: f64,
    main: Slopes,
    squared: Slopes,
    interactions: Vec<(usize, usize, f64)>,
}

impl CompiledLinear {
    fn new(terms: &LinearTerms, scale: f64, index: &HashMap<String, usize>, what: &str) -> Result<CompiledLinear> {
        let lookup = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::invalid(format!("{what} references unknown confounder '{name}'")))
        };
        let slopes = |m: &BTreeMap<String, f64>| -> Result<Slopes> { m.iter().map(|(k, &v)| Ok((lookup(k)?, v))).collect() };
        Ok(CompiledLinear {
            intercept: terms.intercept,
            main: slopes(&terms.main)?,
            squared: slopes(&terms.squared)?,
            interactions: terms
                .interactions
                .iter()
                .map(|(a, b, c)| Ok((lookup(a)?, lookup(b)?, scale * c)))
                .collect::<Result<_>>()?,
        })
    }

    fn eval(&self, w: &[f64]) -> f64 {
        let mut v = self.intercept;
        for &(j, c) in &self.main {
            v += c * w[j];
        }
        for &(j, c) in &self.squared {
            v += c * w[j] * w[j];
        }
        for &(a, b, c) in &self.interactions {
            v += c * w[a] * w[b];
        }
        v
    }
}

struct Compiled {
    steps: Vec<Step>,
    columns: Vec<Column>,
    exposure: CompiledLinear,
    outcome: CompiledLinear,
    beta: f64,
    noise_sd: f64,
    effect_mod: Slopes,
}

fn dot(slopes: &Slopes, w: &[f64]) -> f64 {
    slopes.iter().map(|&(j, c)| c * w[j]).sum()
}

impl Compiled {
    fn new(spec: &DgmSpec) -> Result<Compiled> {
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut columns = Vec::new();
        let mut steps = Vec::new();
        for conf in &spec.confounders {
            let slopes = |m: &BTreeMap<String, f64>, index: &HashMap<String, usize>| -> Result<Slopes> {
                m.iter()
                    .map(|(k, &v)| {
                        index
                            .get(k)
                            .map(|&j| (j, v))
                            .ok_or_else(|| Error::invalid(format!("confounder depends on '{k}', which is not generated before it")))
                    })
                    .collect()
            };
            let col = columns.len();
            let step = match conf {
                Confounder::Gaussian { intercept, coef, sd, .. } => {
                    if !(*sd >= 0.0) {
                        return Err(Error::invalid("Gaussian confounder needs sd >= 0"));
                    }
                    Step::Gaussian {
                        col,
                        intercept: *intercept,
                        slopes: slopes(coef, &index)?,
                        sd: *sd,
                    }
                }
                Confounder::Bernoulli { intercept, coef, .. } => Step::Bernoulli {
                    col,
                    intercept: *intercept,
                    slopes: slopes(coef, &index)?,
                },
                Confounder::Categorical {
                    name,
                    levels,
                    intercepts,
                    coef,
                } => {
                    if levels.len() < 2 || intercepts.len() != levels.len() - 1 || !(coef.is_empty() || coef.len() == intercepts.len()) {
                        return Err(Error::invalid(format!(
                            "categorical '{name}' needs >= 2 levels and one intercept (and slope map) per non-reference level"
                        )));
                    }
                    let per_level = if coef.is_empty() {
                        vec![Vec::new(); intercepts.len()]
                    } else {
                        coef.iter().map(|m| slopes(m, &index)).collect::<Result<_>>()?
                    };
                    Step::Categorical {
                        first_col: col,
                        intercepts: intercepts.clone(),
                        slopes: per_level,
                    }
                }
                Confounder::FactorBlock {
                    prefix,
                    count,
                    factors,
                    primary_loading,
                    secondary_loading,
                    shifts,
                } => {
                    let l = loadings(*count, *factors, *primary_loading, *secondary_loading);
                    let unique_sd = l
                        .iter()
                        .map(|row| {
                            let common: f64 = row.iter().map(|v| v * v).sum();
                            (1.0 - common).max(0.0).sqrt()
                        })
                        .collect();
                    if *count == 0 || *factors == 0 || l.iter().any(|row| row.iter().map(|v| v * v).sum::<f64>() > 1.0) {
                        return Err(Error::invalid(format!(
                            "factor block '{prefix}' needs count, factors >= 1 and squared loadings summing to <= 1"
                        )));
                    }
                    let mut sh = Vec::new();
                    for (k, v) in shifts {
                        let j = *index
                            .get(k)
                            .ok_or_else(|| Error::invalid(format!("factor block '{prefix}' shifts on unknown confounder '{k}'")))?;
                        if v.len() != *factors {
                            return Err(Error::invalid(format!("factor block '{prefix}': shift '{k}' needs {factors} slopes")));
                        }
                        sh.push((j, v.clone()));
                    }
                    Step::FactorBlock {
                        first_col: col,
                        loadings: l,
                        unique_sd,
                        shifts: sh,
                    }
                }
            };
            for (name, kind) in conf.column_names() {
                if index.insert(name.clone(), columns.len()).is_some() {
                    return Err(Error::invalid(format!("duplicate confounder column '{name}'")));
                }
                columns.push(Column { name, kind });
            }
            steps.push(step);
        }
        if columns.is_empty() {
            return Err(Error::invalid("mechanism has no confounders"));
        }
        let m = spec.interaction_scale;
        let o = &spec.outcome;
        if !(o.noise_sd >= 0.0) {
            return Err(Error::invalid("outcome noise_sd must be >= 0"));
        }
        let effect_mod = o
            .exposure_interactions
            .iter()
            .map(|(k, &c)| {
                index
                    .get(k)
                    .map(|&j| (j, m * c))
                    .ok_or_else(|| Error::invalid(format!("outcome references unknown confounder '{k}'")))
            })
            .collect::<Result<_>>()?;
        Ok(Compiled {
            steps,
            exposure: CompiledLinear::new(&spec.exposure, m, &index, "exposure model")?,
            outcome: CompiledLinear::new(&o.confounder_terms(), m, &index, "outcome model")?,
            columns,
            beta: o.beta,
            noise_sd: o.noise_sd,
            effect_mod,
        })
    }

    fn q(&self) -> usize {
        self.columns.len()
    }

    fn draw_confounders(&self, rng: &mut RngStream, w: &mut [f64]) {
        for step in &self.steps {
            match step {
                Step::Gaussian {
                    col,
                    intercept,
                    slopes,
                    sd,
                } => {
                    let z: f64 = StandardNormal.sample(rng);
                    w[*col] = intercept + dot(slopes, w) + sd * z;
                }
                Step::Bernoulli { col, intercept, slopes } => {
                    let p = expit(intercept + dot(slopes, w));
                    w[*col] = if rng.uniform() < p { 1.0 } else { 0.0 };
                }
                Step::Categorical {
                    first_col,
                    intercepts,
                    slopes,
                } => {
                    let eta: Vec<f64> = intercepts.iter().zip(slopes).map(|(a, s)| a + dot(s, w)).collect();
                    let top = eta.iter().copied().fold(0.0f64, f64::max);
                    let weights: Vec<f64> = std::iter::once((-top).exp()).chain(eta.iter().map(|e| (e - top).exp())).collect();
                    let total: f64 = weights.iter().sum();
                    let u = rng.uniform() * total;
                    let mut level = weights.len() - 1;
                    let mut acc = 0.0;
                    for (l, wt) in weights.iter().enumerate() {
                        acc += wt;
                        if u < acc {
                            level = l;
                            break;
                        }
                    }
                    for k in 0..intercepts.len() {
                        w[first_col + k] = if level == k + 1 { 1.0 } else { 0.0 };
                    }
                }
                Step::FactorBlock {
                    first_col,
                    loadings,
                    unique_sd,
                    shifts,
                } => {
                    let nf = loadings[0].len();
                    let mut f = vec![0.0; nf];
                    for (k, fk) in f.iter_mut().enumerate() {
                        let z: f64 = StandardNormal.sample(rng);
                        *fk = z + shifts.iter().map(|(j, s)| s[k] * w[*j]).sum::<f64>();
                    }
                    for (j, (row, sd)) in loadings.iter().zip(unique_sd).enumerate() {
                        let z: f64 = StandardNormal.sample(rng);
                        w[first_col + j] = row.iter().zip(&f).map(|(l, v)| l * v).sum::<f64>() + sd * z;
                    }
                }
            }
        }
    }

    fn propensity(&self, w: &[f64]) -> f64 {
        expit(self.exposure.eval(w))
    }

    /// Conditional outcome mean `E[Y | X = x, W = w]`.
    fn outcome_mean(&self, x: f64, w: &[f64]) -> f64 {
        self.outcome.eval(w) + x * (self.beta + dot(&self.effect_mod, w))
    }

    /// Individual effect `E[Y | 1, w] - E[Y | 0, w]`.
    fn effect(&self, w: &[f64]) -> f64 {
        self.beta + dot(&self.effect_mod, w)
    }
}

/// Draws `n` records. Deterministic given `rng`'s identity.
pub fn generate(spec: &DgmSpec, n: usize, rng: &RngStream) -> Result<Dataset> {
    if n < 4 {
        return Err(Error::invalid(format!("need n >= 4, got {n}")));
    }
    let c = spec.compile()?;
    let q = c.q();
    let mut wrng = rng.substream(W_STREAM);
    let mut xrng = rng.substream(X_STREAM);
    let mut nrng = rng.substream(NOISE_STREAM);
    let mut w = DMatrix::zeros(n, q);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut row = vec![0.0; q];
    for i in 0..n {
        c.draw_confounders(&mut wrng, &mut row);
        let xi = if xrng.uniform() < c.propensity(&row) { 1.0 } else { 0.0 };
        let z: f64 = StandardNormal.sample(&mut nrng);
        x.push(xi);
        y.push(c.outcome_mean(xi, &row) + c.noise_sd * z);
        for (j, v) in row.iter().enumerate() {
            w[(i, j)] = *v;
        }
    }
    Dataset::new(w, x, y, c.columns)
}

/// Per-chunk sums used by the large-sample oracles.
#[derive(Default, Clone, Copy)]
struct Moments {
    n: f64,
    effect: f64,
    effect_sq: f64,
    propensity: f64,
    mean: f64,
}

impl Moments {
    fn add(self, o: Moments) -> Moments {
        Moments {
            n: self.n + o.n,
            effect: self.effect + o.effect,
            effect_sq: self.effect_sq + o.effect_sq,
            propensity: self.propensity + o.propensity,
            mean: self.mean + o.mean,
        }
    }
}

/// Confounder-only moments over `n` draws in fixed chunks: the individual effect,
/// the propensity and the marginal outcome mean (exposure integrated out).
fn oracle_moments(c: &Compiled, n: usize, rng: &RngStream) -> Moments {
    let chunks = n.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|k| {
            let rows = CHUNK.min(n - k * CHUNK);
            let mut r = rng.substream(k as u64);
            let mut w = vec![0.0; c.q()];
            let mut m = Moments::default();
            for _ in 0..rows {
                c.draw_confounders(&mut r, &mut w);
                let d = c.effect(&w);
                let p = c.propensity(&w);
                m.n += 1.0;
                m.effect += d;
                m.effect_sq += d * d;
                m.propensity += p;
                m.mean += c.outcome_mean(0.0, &w) + p * d;
            }
            m
        })
        .reduce(Moments::default, Moments::add)
}

/// Empirical true average causal effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub spec: String,
    pub spec_hash: String,
    pub psi: f64,
    pub n: usize,
    pub mcse: f64,
}

/// True ACE from `n` confounder draws, using the noiseless conditional outcome
/// means under both exposure levels.
pub fn true_ace(spec: &DgmSpec, n: usize, rng: &RngStream) -> Result<TruthRecord> {
    if n < 1_000_000 {
        return Err(Error::invalid(format!("truth oracle needs N >= 1e6, got {n}")));
    }
    let c = spec.compile()?;
    let m = oracle_moments(&c, n, rng);
    let psi = m.effect / m.n;
    let var = ((m.effect_sq - m.n * psi * psi) / (m.n - 1.0)).max(0.0);
    Ok(TruthRecord {
        spec: spec.name.clone(),
        spec_hash: spec.hash(),
        psi,
        n,
        mcse: (var / m.n).sqrt(),
    })
}

/// Shifts the outcome intercept so that the marginal mean of `Y` is zero.
pub fn recenter(spec: &DgmSpec, n: usize, rng: &RngStream) -> Result<DgmSpec> {
    let c = spec.compile()?;
    let m = oracle_moments(&c, n, rng);
    let mut out = spec.clone();
    out.outcome.intercept -= m.mean / m.n;
    Ok(out)
}

/// Marginal exposure prevalence from `n` confounder draws.
pub fn prevalence(spec: &DgmSpec, n: usize, rng: &RngStream) -> Result<f64> {
    let c = spec.compile()?;
    let m = oracle_moments(&c, n, rng);
    Ok(m.propensity / m.n)
}

/// Sets the exposure intercept so the marginal prevalence matches `target`
/// (bisection with common confounder draws).
pub fn calibrate_prevalence(spec: &DgmSpec, target: f64, n: usize, rng: &RngStream) -> Result<DgmSpec> {
    if !(0.0 < target && target < 1.0) {
        return Err(Error::invalid("target prevalence must lie in (0, 1)"));
    }
    let mut s = spec.clone();
    let base = s.exposure.intercept;
    let (mut lo, mut hi) = (base - 15.0, base + 15.0);
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        s.exposure.intercept = mid;
        if prevalence(&s, n, rng)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    s.exposure.intercept = 0.5 * (lo + hi);
    Ok(s)
}

/// One evaluated candidate of the power search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerPoint {
    pub beta: f64,
    pub power: f64,
    pub mean_se: f64,
    pub median_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub beta: f64,
    pub achieved_power: f64,
    pub n: usize,
    pub reps: usize,
    pub target_power: f64,
    pub steps: Vec<PowerPoint>,
    /// The input mechanism with the calibrated `beta` and a re-centered intercept.
    pub spec: DgmSpec,
}

/// Super Learner folds in the calibration reference analysis.
pub const REFERENCE_SL_FOLDS: usize = 5;

/// Reference analysis used for calibration: AIPW, reduced library, no
/// cross-fitting, 5-fold Super Learner. Returns `(psi, se)`.
pub fn reference_analysis(data: &Dataset, rng: &RngStream) -> Result<(f64, f64)> {
    let lib = Library::reduced();
    let fit = fit_nuisances(data, &lib, &lib, None, REFERENCE_SL_FOLDS, rng)?;
    let est = estimate_from_nuisances(data, &fit, Method::Aipw, Some(crate::estimators::DEFAULT_TRUNCATION))?;
    Ok((est.psi, est.se.unwrap_or(f64::NAN)))
}

pub const CALIBRATION_TOL: f64 = 0.02;
pub const CALIBRATION_MAX_STEPS: usize = 12;
/// Power error beyond which the next candidate is re-derived from the median SE.
pub const CALIBRATION_JUMP: f64 = 0.1;
const ALPHA: f64 = 0.05;

/// Rejection rate of `H0: ACE = 0` over `reps` datasets at the given `beta`.
/// Replication `r` uses substream `r` of `rng` for every candidate, so the
/// confounders, exposures and noise are shared across candidates.
pub fn power_at<F>(spec: &DgmSpec, beta: f64, n: usize, reps: usize, rng: &RngStream, analysis: &F) -> Result<PowerPoint>
where
    F: Fn(&Dataset, &RngStream) -> Result<(f64, f64)> + Sync,
{
    let s = spec.with_beta(beta);
    let z = Normal::standard().inverse_cdf(1.0 - ALPHA / 2.0);
    let results: Vec<Option<(bool, f64)>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let rr = rng.substream(r as u64);
            let data = generate(&s, n, &rr.substream(0)).ok()?;
            let (psi, se) = analysis(&data, &rr.substream(1)).ok()?;
            (psi.is_finite() && se.is_finite() && se > 0.0).then(|| ((psi / se).abs() > z, se))
        })
        .collect();
    let ok: Vec<(bool, f64)> = results.into_iter().flatten().collect();
    if ok.is_empty() {
        return Err(Error::Degenerate("every calibration replication failed".into()));
    }
    if ok.len() < reps {
        log::warn!("{} of {reps} calibration replications failed at beta = {beta}", reps - ok.len());
    }
    let k = ok.len() as f64;
    let mut ses: Vec<f64> = ok.iter().map(|(_, se)| *se).collect();
    ses.sort_by(f64::total_cmp);
    let m = ses.len() / 2;
    Ok(PowerPoint {
        beta,
        power: ok.iter().filter(|(rej, _)| *rej).count() as f64 / k,
        mean_se: ses.iter().sum::<f64>() / k,
        median_se: if ses.len() % 2 == 1 { ses[m] } else { 0.5 * (ses[m - 1] + ses[m]) },
    })
}

/// Finds the exposure main effect giving the target rejection rate with the
/// reference analysis.
pub fn calibrate_effect(spec: &DgmSpec, n: usize, target_power: f64, reps: usize, rng: &RngStream) -> Result<Calibration> {
    calibrate_effect_with(spec, n, target_power, reps, rng, &reference_analysis)
}

/// [`calibrate_effect`] with a caller-supplied analysis returning `(psi, se)`.
///
/// The bracket starts at `beta = 0`, where the rejection rate is the test size.
/// The first candidate is the normal-theory value `(z_{1-a/2} + z_power) * se`
/// with `se` from a pilot dataset. A candidate whose power misses the target by
/// more than [`CALIBRATION_JUMP`] is followed by the normal-theory value at the
/// median standard error of its replications, when that lies inside the
/// bracket. Otherwise the next candidate is the normal-theory step from the
/// last point, taken when it falls inside the bracket; when it does not, the
/// bracket is split where the power curve, linear on the probit scale between
/// the bracket ends, reaches the target (restricted to the middle 80%).
pub fn calibrate_effect_with<F>(
    spec: &DgmSpec,
    n: usize,
    target_power: f64,
    reps: usize,
    rng: &RngStream,
    analysis: &F,
) -> Result<Calibration>
where
    F: Fn(&Dataset, &RngStream) -> Result<(f64, f64)> + Sync,
{
    if !(0.0 < target_power && target_power < 1.0) {
        return Err(Error::invalid("target power must lie in (0, 1)"));
    }
    if reps < 200 {
        return Err(Error::invalid(format!("calibration needs reps >= 200, got {reps}")));
    }
    if target_power <= ALPHA {
        return Err(Error::invalid(format!(
            "bracket failure: power at beta = 0 is the test size {ALPHA}, which is not below the target {target_power}"
        )));
    }
    let normal = Normal::standard();
    let multiplier = normal.inverse_cdf(1.0 - ALPHA / 2.0) + normal.inverse_cdf(target_power);
    let pilot_rng = rng.substream(u64::MAX);
    let pilot = generate(&spec.with_beta(0.0), n, &pilot_rng)?;
    let (_, pilot_se) = analysis(&pilot, &pilot_rng.substream(1))?;
    if !(pilot_se.is_finite() && pilot_se > 0.0) {
        return Err(Error::Degenerate("pilot analysis returned no usable standard error".into()));
    }

    // bracket ends as (beta, power); beta = 0 has power equal to the test size
    let mut lo = (0.0, ALPHA);
    let mut hi: Option<(f64, f64)> = None;
    let probit = |p: f64| {
        let eps = 0.5 / reps as f64;
        normal.inverse_cdf(p.clamp(eps, 1.0 - eps))
    };
    let goal = probit(target_power);
    let mut candidate = multiplier * pilot_se;
    let mut steps: Vec<PowerPoint> = Vec::new();
    for _ in 0..CALIBRATION_MAX_STEPS {
        let pt = power_at(spec, candidate, n, reps, rng, analysis)?;
        log::info!("calibration n = {n}: beta = {:.5}, power = {:.3}", pt.beta, pt.power);
        let done = (pt.power - target_power).abs() <= CALIBRATION_TOL;
        if pt.power < target_power {
            if candidate > lo.0 {
                lo = (candidate, pt.power);
            }
        } else if hi.is_none_or(|(b, _)| candidate < b) {
            hi = Some((candidate, pt.power));
        }
        let last = (pt.beta, pt.power);
        let jump = multiplier * pt.median_se;
        let far = (pt.power - target_power).abs() > CALIBRATION_JUMP;
        steps.push(pt);
        if done {
            break;
        }
        if far && jump > lo.0 && hi.is_none_or(|(b, _)| jump < b) && steps.iter().all(|p| p.beta != jump) {
            candidate = jump;
            continue;
        }
        // normal-theory step from the last point: power = Phi(beta / se - z)
        let se_eff = last.0 / (probit(last.1) + multiplier - goal).max(1e-3);
        let newton = (se_eff * multiplier).min(10.0 * last.0);
        candidate = match hi {
            Some((hb, _)) if newton > lo.0 + 0.02 * (hb - lo.0) && newton < hb - 0.02 * (hb - lo.0) && steps.iter().all(|p| p.beta != newton) => newton,
            // split the bracket where the probit-linear power curve crosses the
            // target, kept away from the ends so the bracket always shrinks
            Some((hb, hp)) => {
                let (pl, ph) = (probit(lo.1), probit(hp));
                let t = if ph > pl { ((goal - pl) / (ph - pl)).clamp(0.1, 0.9) } else { 0.5 };
                lo.0 + t * (hb - lo.0)
            }
            None => newton.max(1.05 * last.0),
        };
    }
    let best = steps
        .iter()
        .min_by(|a, b| (a.power - target_power).abs().total_cmp(&(b.power - target_power).abs()))
        .expect("at least one step")
        .clone();
    let calibrated = recenter(&spec.with_beta(best.beta), RECENTER_N, &rng.substream(u64::MAX - 1))?;
    Ok(Calibration {
        beta: best.beta,
        achieved_power: best.power,
        n,
        reps,
        target_power,
        steps,
        spec: calibrated,
    })
}

/// Confounder matrix of `n` draws (no exposure or outcome), for structure checks.
pub fn draw_confounders(spec: &DgmSpec, n: usize, rng: &RngStream) -> Result<DMatrix<f64>> {
    let c = spec.compile()?;
    let mut wrng = rng.substream(W_STREAM);
    let mut out = DMatrix::zeros(n, c.q());
    let mut row = vec![0.0; c.q()];
    for i in 0..n {
        c.draw_confounders(&mut wrng, &mut row);
        for (j, v) in row.iter().enumerate() {
            out[(i, j)] = *v;
        }
    }
    Ok(out)
}
