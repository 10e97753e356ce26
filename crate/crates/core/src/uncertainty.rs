//! Pedigree-based distribution inference and seeded Monte Carlo propagation.
//!
//! Pedigree scores translate qualitative data quality into a lognormal
//! spread: `sigma_ln^2 = ln(basic)^2 + sum_i ln(U(indicator_i, score_i))^2`,
//! with the median pinned to the deterministic value so the deterministic
//! result stays the 50th percentile.
//!
//! Sampling is counter-based: each sample index gets its own ChaCha stream
//! derived from (master seed, index), so results are independent of worker
//! count and execution order.

use std::collections::BTreeMap;

use rand::distributions::Distribution as _;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compute::{
    evaluate_models, CharacterizationTable, ComputeError, DemandSpec, EvalOptions,
    EvaluationStrategy, ModelSet, Overrides,
};
use crate::manifest::{ModelBody, ModelId, PedigreeScores};
use crate::units::UnitTable;

#[derive(Debug, Error)]
pub enum UncertaintyError {
    #[error("value must be positive for lognormal uncertainty, got {0}")]
    NonPositiveValue(f64),
    #[error("invalid factor table: {0}")]
    InvalidTable(String),
    #[error("no samples to summarize")]
    EmptySamples,
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("factor table has no entry for ({indicator}, {score})")]
    MissingFactor { indicator: String, score: u8 },
    #[error("parameter '{param}' of '{model}' carries pedigree scores but no factor table was supplied")]
    MissingFactorTable { model: ModelId, param: String },
    #[error("sample {index} failed: {source}")]
    SampleFailed {
        index: u64,
        #[source]
        source: Box<ComputeError>,
    },
    #[error(transparent)]
    Compute(#[from] ComputeError),
}

/// Uncertainty factor table: `U(indicator, score) >= 1`, `U(_, 1) = 1`,
/// non-decreasing in score. Loaded from a data file; nothing is hardcoded.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactorTable {
    pub table_id: String,
    pub version: String,
    pub factors: BTreeMap<String, BTreeMap<String, f64>>,
}

impl FactorTable {
    pub fn from_json_str(text: &str) -> Result<FactorTable, UncertaintyError> {
        let table: FactorTable = serde_json::from_str(text)
            .map_err(|e| UncertaintyError::InvalidTable(e.to_string()))?;
        table.validate()?;
        Ok(table)
    }

    pub fn load(path: &std::path::Path) -> Result<FactorTable, UncertaintyError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UncertaintyError::InvalidTable(format!("{}: {e}", path.display())))?;
        FactorTable::from_json_str(&text)
    }

    fn validate(&self) -> Result<(), UncertaintyError> {
        for (indicator, by_score) in &self.factors {
            let mut prev = None;
            for score in 1..=5u8 {
                let u = by_score.get(&score.to_string()).copied().ok_or_else(|| {
                    UncertaintyError::MissingFactor { indicator: indicator.clone(), score }
                })?;
                if !(u.is_finite() && u >= 1.0) {
                    return Err(UncertaintyError::InvalidTable(format!(
                        "U({indicator},{score}) = {u} must be >= 1"
                    )));
                }
                if score == 1 && u != 1.0 {
                    return Err(UncertaintyError::InvalidTable(format!(
                        "U({indicator},1) must be exactly 1"
                    )));
                }
                if let Some(p) = prev {
                    if u < p {
                        return Err(UncertaintyError::InvalidTable(format!(
                            "U({indicator},{score}) decreases"
                        )));
                    }
                }
                prev = Some(u);
            }
        }
        Ok(())
    }

    pub fn factor(&self, indicator: &str, score: u8) -> Result<f64, UncertaintyError> {
        self.factors
            .get(indicator)
            .and_then(|m| m.get(&score.to_string()))
            .copied()
            .ok_or_else(|| UncertaintyError::MissingFactor {
                indicator: indicator.to_string(),
                score,
            })
    }
}

/// A univariate distribution for one uncertain value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "distribution", rename_all = "snake_case")]
pub enum Distribution {
    Point { value: f64 },
    Lognormal { median: f64, sigma_ln: f64 },
    Normal { mean: f64, sd: f64 },
    Uniform { lo: f64, hi: f64 },
    Triangular { lo: f64, mode: f64, hi: f64 },
}

impl Distribution {
    pub fn validate(&self) -> Result<(), UncertaintyError> {
        let bad = |msg: String| Err(UncertaintyError::InvalidDistribution(msg));
        match *self {
            Distribution::Point { value } => {
                if !value.is_finite() {
                    return bad("point value must be finite".into());
                }
            }
            Distribution::Lognormal { median, sigma_ln } => {
                if !(median.is_finite() && median > 0.0) {
                    return bad(format!("lognormal median must be > 0, got {median}"));
                }
                if !(sigma_ln.is_finite() && sigma_ln >= 0.0) {
                    return bad(format!("sigma_ln must be >= 0, got {sigma_ln}"));
                }
            }
            Distribution::Normal { mean, sd } => {
                if !mean.is_finite() || !(sd.is_finite() && sd >= 0.0) {
                    return bad(format!("normal({mean},{sd}) is invalid"));
                }
            }
            Distribution::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                    return bad(format!("uniform({lo},{hi}) is invalid"));
                }
            }
            Distribution::Triangular { lo, mode, hi } => {
                if !(lo.is_finite() && hi.is_finite() && mode.is_finite() && lo <= mode && mode <= hi)
                {
                    return bad(format!("triangular({lo},{mode},{hi}) is invalid"));
                }
            }
        }
        Ok(())
    }

    /// The distribution's median; the deterministic stand-in value.
    pub fn median(&self) -> f64 {
        match *self {
            Distribution::Point { value } => value,
            Distribution::Lognormal { median, .. } => median,
            Distribution::Normal { mean, .. } => mean,
            Distribution::Uniform { lo, hi } => 0.5 * (lo + hi),
            Distribution::Triangular { lo, mode, hi } => {
                // Standard closed form, split at the mode's cdf value.
                let f_mode = (mode - lo) / (hi - lo);
                if f_mode >= 0.5 {
                    lo + ((hi - lo) * (mode - lo) * 0.5).sqrt()
                } else {
                    hi - ((hi - lo) * (hi - mode) * 0.5).sqrt()
                }
            }
        }
    }
}

/// Draws one variate. `Point` returns its value exactly; a degenerate
/// lognormal (`sigma_ln = 0`) returns the median exactly.
pub fn sample<R: Rng>(d: &Distribution, rng: &mut R) -> f64 {
    match *d {
        Distribution::Point { value } => value,
        Distribution::Lognormal { median, sigma_ln } => {
            if sigma_ln == 0.0 {
                return median;
            }
            let normal = rand_distr::Normal::new(median.ln(), sigma_ln).expect("validated");
            normal.sample(rng).exp()
        }
        Distribution::Normal { mean, sd } => {
            if sd == 0.0 {
                return mean;
            }
            rand_distr::Normal::new(mean, sd).expect("validated").sample(rng)
        }
        Distribution::Uniform { lo, hi } => {
            if lo == hi {
                return lo;
            }
            rng.gen_range(lo..=hi)
        }
        Distribution::Triangular { lo, mode, hi } => {
            if lo == hi {
                return lo;
            }
            rand_distr::Triangular::new(lo, hi, mode).expect("validated").sample(rng)
        }
    }
}

/// Translates pedigree scores into a median-preserving lognormal.
pub fn pedigree_to_distribution(
    value: f64,
    scores: Option<&PedigreeScores>,
    basic_factor: f64,
    table: &FactorTable,
) -> Result<Distribution, UncertaintyError> {
    if !(value > 0.0) {
        return Err(UncertaintyError::NonPositiveValue(value));
    }
    if !(basic_factor.is_finite() && basic_factor >= 1.0) {
        return Err(UncertaintyError::InvalidDistribution(format!(
            "basic uncertainty factor must be >= 1, got {basic_factor}"
        )));
    }
    let mut var = basic_factor.ln().powi(2);
    if let Some(scores) = scores {
        for indicator in PedigreeScores::INDICATORS {
            let score = scores.get(indicator).expect("known indicator");
            let u = table.factor(indicator, score)?;
            var += u.ln().powi(2);
        }
    }
    Ok(Distribution::Lognormal { median: value, sigma_ln: var.sqrt() })
}

/// Per-sample substream for sample index `k` under a master seed.
/// ChaCha streams make this counter-based: no sequential dependency
/// between samples, so any parallel schedule yields identical draws.
pub fn sample_rng(master_seed: u64, sample_index: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(master_seed);
    rng.set_stream(sample_index);
    rng
}

/// Monte Carlo configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MCConfig {
    pub samples: u64,
    pub seed: u64,
    pub quantiles: Vec<f64>,
}

impl Default for MCConfig {
    fn default() -> Self {
        MCConfig { samples: 1000, seed: 0, quantiles: vec![0.025, 0.5, 0.975] }
    }
}

/// Summary statistics for one impact category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub mean: f64,
    pub median: f64,
    pub sd: f64,
    pub quantiles: BTreeMap<String, f64>,
    /// The deterministic (all-medians) value for reference.
    pub deterministic: f64,
}

/// Result of a Monte Carlo run; includes seed and N for replication.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MCResult {
    pub samples: u64,
    pub seed: u64,
    pub categories: BTreeMap<String, CategoryStats>,
    /// Degradation notes, e.g. non-positive values falling back to Point.
    pub notes: Vec<String>,
}

/// Population mean/sd and linear-interpolation quantiles over raw samples.
pub fn summarize(
    samples: &[f64],
    quantiles: &[f64],
    deterministic: f64,
) -> Result<CategoryStats, UncertaintyError> {
    if samples.is_empty() {
        return Err(UncertaintyError::EmptySamples);
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let mut out = BTreeMap::new();
    for &q in quantiles {
        out.insert(format_quantile(q), quantile_linear(&sorted, q));
    }
    Ok(CategoryStats {
        mean,
        median: quantile_linear(&sorted, 0.5),
        sd: var.sqrt(),
        quantiles: out,
        deterministic,
    })
}

fn format_quantile(q: f64) -> String {
    // 0.025 -> "p2.5", 0.5 -> "p50"
    let pct = q * 100.0;
    if (pct - pct.round()).abs() < 1e-9 {
        format!("p{}", pct.round() as i64)
    } else {
        format!("p{pct}")
    }
}

/// What a draw feeds into: a parameter's value, or a multiplicative factor
/// on a biosphere exchange amount.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum DrawTarget {
    Param { model: ModelId, name: String },
    Exchange { model: ModelId, index: usize },
}

#[derive(Debug, Clone)]
struct UncertainItem {
    target: DrawTarget,
    distribution: Distribution,
}

/// Collects every uncertain value in the closure, in a deterministic order
/// (sorted model id, then parameter name / exchange index).
///
/// Sources, weakest to strongest: pedigree scores or a basic uncertainty
/// factor on a parameter or biosphere exchange, then explicit distributions
/// from an attached uncertainty model, which override pedigree inference for
/// the same parameter. Parameters bound by a parent never draw; the binding
/// is the value's provenance.
fn collect_uncertain(
    models: &ModelSet,
    factor_table: Option<&FactorTable>,
    units: &UnitTable,
    notes: &mut Vec<String>,
) -> Result<Vec<UncertainItem>, UncertaintyError> {
    let mut bound: std::collections::BTreeSet<(ModelId, String)> = Default::default();
    for (_, m) in models.iter() {
        for dep in &m.dependencies {
            if dep.analogic || dep.cut_off.is_some() {
                continue;
            }
            for param in dep.bindings.keys() {
                bound.insert((dep.model_id.clone(), param.clone()));
            }
        }
    }

    let mut by_target: BTreeMap<DrawTarget, Distribution> = BTreeMap::new();
    for (id, m) in models.iter() {
        for p in &m.params {
            if bound.contains(&(id.clone(), p.name.clone())) {
                continue;
            }
            let has_pedigree = p.pedigree.is_some();
            let basic = p.basic_uncertainty_factor.unwrap_or(1.0);
            if !has_pedigree && basic <= 1.0 {
                continue;
            }
            if has_pedigree && factor_table.is_none() {
                return Err(UncertaintyError::MissingFactorTable {
                    model: id.clone(),
                    param: p.name.clone(),
                });
            }
            let Some(default) = &p.default else { continue };
            let value = units
                .quantity(default.value, &default.unit)
                .map(|q| q.base_value())
                .unwrap_or(default.value);
            let target = DrawTarget::Param { model: id.clone(), name: p.name.clone() };
            match pedigree_sigma(value, p.pedigree.as_ref(), basic, factor_table) {
                Ok(d) => {
                    by_target.insert(target, d);
                }
                Err(UncertaintyError::NonPositiveValue(v)) => {
                    notes.push(format!(
                        "parameter '{}' of '{id}' has non-positive value {v}; treated as a point value",
                        p.name
                    ));
                    by_target.insert(target, Distribution::Point { value });
                }
                Err(e) => return Err(e),
            }
        }
        if let ModelBody::Process { biosphere, .. } = &m.body {
            for (index, e) in biosphere.iter().enumerate() {
                let has_pedigree = e.pedigree.is_some();
                let basic = e.basic_uncertainty_factor.unwrap_or(1.0);
                if !has_pedigree && basic <= 1.0 {
                    continue;
                }
                if has_pedigree && factor_table.is_none() {
                    return Err(UncertaintyError::MissingFactorTable {
                        model: id.clone(),
                        param: format!("biosphere exchange {index}"),
                    });
                }
                // Multiplicative factor with median 1 keeps the exchange's
                // deterministic amount the 50th percentile.
                let d = pedigree_sigma(1.0, e.pedigree.as_ref(), basic, factor_table)?;
                by_target
                    .insert(DrawTarget::Exchange { model: id.clone(), index }, d);
            }
        }
    }

    // Explicit uncertainty-model targets override inferred distributions.
    for (parent_id, m) in models.iter() {
        for dep in &m.dependencies {
            if dep.analogic || dep.cut_off.is_some() {
                continue;
            }
            let Ok(child) = models.get(&dep.model_id) else { continue };
            let ModelBody::UncertaintyModel { targets } = &child.body else { continue };
            for (param, dist) in targets {
                if bound.contains(&(parent_id.clone(), param.clone())) {
                    continue;
                }
                if m.param(param).is_none() {
                    continue;
                }
                by_target.insert(
                    DrawTarget::Param { model: parent_id.clone(), name: param.clone() },
                    dist.clone(),
                );
            }
        }
    }

    Ok(by_target
        .into_iter()
        .map(|(target, distribution)| UncertainItem { target, distribution })
        .collect())
}

fn pedigree_sigma(
    value: f64,
    scores: Option<&PedigreeScores>,
    basic: f64,
    table: Option<&FactorTable>,
) -> Result<Distribution, UncertaintyError> {
    match (scores, table) {
        (Some(s), Some(t)) => pedigree_to_distribution(value, Some(s), basic, t),
        (None, _) => {
            if !(value > 0.0) {
                return Err(UncertaintyError::NonPositiveValue(value));
            }
            Ok(Distribution::Lognormal { median: value, sigma_ln: basic.ln() })
        }
        (Some(_), None) => unreachable!("checked by caller"),
    }
}

/// Seeded Monte Carlo propagation through the full evaluation.
///
/// For each sample index a substream is derived from (master seed, index),
/// every uncertain value is drawn in a fixed order, and the whole evaluation
/// runs with the drawn overrides. Identical (seed, N, corpus, tables) give
/// identical results regardless of execution parallelism.
#[allow(clippy::too_many_arguments)]
pub fn monte_carlo(
    models: &ModelSet,
    demand: &DemandSpec,
    strategy: EvaluationStrategy,
    table: &CharacterizationTable,
    units: &UnitTable,
    options: &EvalOptions,
    factor_table: Option<&FactorTable>,
    cfg: &MCConfig,
) -> Result<MCResult, UncertaintyError> {
    let mut notes = Vec::new();
    let items = collect_uncertain(models, factor_table, units, &mut notes)?;

    let deterministic = evaluate_models(
        models,
        demand,
        strategy,
        table,
        units,
        options,
        &Overrides::default(),
    )?;
    let deterministic_values: BTreeMap<String, f64> = deterministic
        .impacts
        .iter()
        .map(|(k, q)| (k.clone(), q.base_value()))
        .collect();

    let mut samples: BTreeMap<String, Vec<f64>> = deterministic_values
        .keys()
        .map(|k| (k.clone(), Vec::with_capacity(cfg.samples as usize)))
        .collect();

    for k in 0..cfg.samples {
        let mut rng = sample_rng(cfg.seed, k);
        let mut overrides = Overrides::default();
        for item in &items {
            let value = sample(&item.distribution, &mut rng);
            match &item.target {
                DrawTarget::Param { model, name } => {
                    overrides.params.insert((model.clone(), name.clone()), value);
                }
                DrawTarget::Exchange { model, index } => {
                    overrides.exchange_factors.insert((model.clone(), *index), value);
                }
            }
        }
        let result = evaluate_models(models, demand, strategy, table, units, options, &overrides)
            .map_err(|e| UncertaintyError::SampleFailed { index: k, source: Box::new(e) })?;
        for (category, series) in samples.iter_mut() {
            let v = result.impacts.get(category).map(|q| q.base_value()).unwrap_or(0.0);
            series.push(v);
        }
    }

    let mut categories = BTreeMap::new();
    for (category, series) in &samples {
        categories.insert(
            category.clone(),
            summarize(series, &cfg.quantiles, deterministic_values[category])?,
        );
    }
    Ok(MCResult { samples: cfg.samples, seed: cfg.seed, categories, notes })
}

/// Linear-interpolation quantile over sorted samples: the q-quantile of
/// [1,3] at q=0.5 is 2.
fn quantile_linear(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let idx = pos.floor() as usize;
    let frac = pos - idx as f64;
    if idx + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[idx] + (sorted[idx + 1] - sorted[idx]) * frac
    }
}
