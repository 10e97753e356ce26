//! Two-pass validation pipeline: Pass 1 loads and instantiates sources into
//! a staging store (fault-isolating, never fail-fast); Pass 2 aggregates and
//! propagates constraints across the pinned model graph, checks every
//! enabled rule, and emits a standardized, hash-chained validation record.
//!
//! Rule sets are data: a PCR-style methodology profile is a named selection
//! of rule codes and severities, not code. Violations are data too; only
//! infrastructure faults abort.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::canon;
use crate::compute::{
    self, allocation_coefficients, resolve_instances, CharacterizationTable, ComputeError,
    DemandSpec, EvalOptions, EvaluationStrategy, Instances, ModelSet, Overrides,
};
use crate::expr::ExprError;
use crate::graph::{DepGraph, GraphEdge, GraphNode, NodeKey, TaintStatus};
use crate::manifest::{
    self, check_taxonomy_grammar, ContentHash, DepRole, Direction, ModelBody, ModelId, ModelKind,
    ModelManifest, ParameterSpec, QuantityRange, ScopeDeclaration,
};
use crate::registry::{Advisory, AdvisorySeverity, Lockfile};
use crate::units::{Dimension, Quantity, UnitTable};
use crate::version::Version;

#[derive(Debug, Error)]
pub enum IntegrityError {
    #[error("pinned model {id}@{version} is not staged; run pass 1 over its source")]
    NotStaged { id: ModelId, version: Version },
    #[error("invalid ruleset: {0}")]
    InvalidRuleSet(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Hash)]
pub enum RuleCode {
    #[serde(rename = "UNIT_CONSISTENCY")]
    UnitConsistency,
    #[serde(rename = "RANGE_CHECK")]
    RangeCheck,
    #[serde(rename = "TYPE_SAFETY")]
    TypeSafety,
    #[serde(rename = "MANDATORY_PARAMS")]
    MandatoryParams,
    #[serde(rename = "TAXONOMY_GRAMMAR")]
    TaxonomyGrammar,
    #[serde(rename = "SCOPE_TEMPORAL")]
    ScopeTemporal,
    #[serde(rename = "SCOPE_GEOGRAPHIC")]
    ScopeGeographic,
    #[serde(rename = "SCOPE_TECHNOLOGICAL")]
    ScopeTechnological,
    #[serde(rename = "SCOPE_OPERATING_RANGE")]
    ScopeOperatingRange,
    #[serde(rename = "ALLOCATION_SUM")]
    AllocationSum,
    #[serde(rename = "MASS_BALANCE")]
    MassBalance,
    #[serde(rename = "SHORTCUT_CONSISTENCY")]
    ShortcutConsistency,
    #[serde(rename = "CYCLE_STRUCTURAL")]
    CycleStructural,
    #[serde(rename = "ADVISORY_TAINT")]
    AdvisoryTaint,
}

impl RuleCode {
    pub const ALL: [RuleCode; 14] = [
        RuleCode::UnitConsistency,
        RuleCode::RangeCheck,
        RuleCode::TypeSafety,
        RuleCode::MandatoryParams,
        RuleCode::TaxonomyGrammar,
        RuleCode::ScopeTemporal,
        RuleCode::ScopeGeographic,
        RuleCode::ScopeTechnological,
        RuleCode::ScopeOperatingRange,
        RuleCode::AllocationSum,
        RuleCode::MassBalance,
        RuleCode::ShortcutConsistency,
        RuleCode::CycleStructural,
        RuleCode::AdvisoryTaint,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RuleCode::UnitConsistency => "UNIT_CONSISTENCY",
            RuleCode::RangeCheck => "RANGE_CHECK",
            RuleCode::TypeSafety => "TYPE_SAFETY",
            RuleCode::MandatoryParams => "MANDATORY_PARAMS",
            RuleCode::TaxonomyGrammar => "TAXONOMY_GRAMMAR",
            RuleCode::ScopeTemporal => "SCOPE_TEMPORAL",
            RuleCode::ScopeGeographic => "SCOPE_GEOGRAPHIC",
            RuleCode::ScopeTechnological => "SCOPE_TECHNOLOGICAL",
            RuleCode::ScopeOperatingRange => "SCOPE_OPERATING_RANGE",
            RuleCode::AllocationSum => "ALLOCATION_SUM",
            RuleCode::MassBalance => "MASS_BALANCE",
            RuleCode::ShortcutConsistency => "SHORTCUT_CONSISTENCY",
            RuleCode::CycleStructural => "CYCLE_STRUCTURAL",
            RuleCode::AdvisoryTaint => "ADVISORY_TAINT",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Rule {
    pub rule_code: RuleCode,
    pub severity: Severity,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub params: Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RuleSet {
    pub ruleset_id: String,
    pub version: String,
    pub rules: Vec<Rule>,
}

impl RuleSet {
    /// All fourteen built-in rules at Error severity, mass balance at 1%.
    pub fn default_rules() -> RuleSet {
        RuleSet {
            ruleset_id: crate::registry::DEFAULT_RULESET_ID.to_string(),
            version: crate::registry::DEFAULT_RULESET_VERSION.to_string(),
            rules: RuleCode::ALL
                .into_iter()
                .map(|rule_code| Rule {
                    rule_code,
                    severity: Severity::Error,
                    params: if rule_code == RuleCode::MassBalance {
                        serde_json::json!({ "tolerance": 0.01 })
                    } else {
                        Value::Null
                    },
                })
                .collect(),
        }
    }

    pub fn from_json_str(text: &str) -> Result<RuleSet, IntegrityError> {
        let rs: RuleSet = serde_json::from_str(text)
            .map_err(|e| IntegrityError::InvalidRuleSet(e.to_string()))?;
        let mut seen = BTreeSet::new();
        for rule in &rs.rules {
            if !seen.insert(rule.rule_code) {
                return Err(IntegrityError::InvalidRuleSet(format!(
                    "duplicate rule code {}",
                    rule.rule_code.as_str()
                )));
            }
        }
        Ok(rs)
    }

    pub fn load(path: &Path) -> Result<RuleSet, IntegrityError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| IntegrityError::Io { path: path.to_path_buf(), source })?;
        RuleSet::from_json_str(&text)
    }

    fn rule(&self, code: RuleCode) -> Option<&Rule> {
        self.rules.iter().find(|r| r.rule_code == code)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub rule_code: RuleCode,
    pub severity: Severity,
    pub model_id: String,
    pub version: String,
    pub path: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub involved: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationStatus {
    Pass,
    Fail,
}

/// Standardized validation record, hash-chained to its lockfile.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub lockfile_hash: ContentHash,
    pub ruleset_id: String,
    pub ruleset_version: String,
    pub timestamp: String,
    pub status: ValidationStatus,
    pub violations: Vec<Violation>,
    pub record_hash: ContentHash,
}

impl ValidationRecord {
    fn compute_hash(&self) -> ContentHash {
        let mut value = serde_json::to_value(self).expect("serializable");
        value.as_object_mut().expect("object").remove("record_hash");
        ContentHash::of_bytes(&canon::to_canonical_bytes(&value))
    }

    pub fn to_canonical_bytes(&self) -> Vec<u8> {
        canon::to_canonical_bytes(&serde_json::to_value(self).expect("serializable"))
    }

    pub fn from_slice(bytes: &[u8]) -> Result<ValidationRecord, String> {
        serde_json::from_slice(bytes).map_err(|e| format!("invalid validation record: {e}"))
    }
}

/// Recomputes the record hash and status linkage; true iff intact.
pub fn verify_record(record: &ValidationRecord) -> bool {
    let has_error = record
        .violations
        .iter()
        .any(|v| v.severity == Severity::Error);
    let status_ok = match record.status {
        ValidationStatus::Fail => has_error,
        ValidationStatus::Pass => !has_error,
    };
    status_ok && record.compute_hash() == record.record_hash
}

#[derive(Debug, Clone)]
pub struct StagedModel {
    pub manifest: ModelManifest,
    pub hash: ContentHash,
    pub source: PathBuf,
}

/// In-memory result of Pass 1.
#[derive(Debug, Clone, Default)]
pub struct StagingStore {
    entries: BTreeMap<(ModelId, Version), StagedModel>,
}

impl StagingStore {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &ModelId, version: Version) -> Option<&StagedModel> {
        self.entries.get(&(id.clone(), version))
    }

    pub fn iter(&self) -> impl Iterator<Item = &StagedModel> {
        self.entries.values()
    }

    pub fn insert(&mut self, staged: StagedModel) {
        self.entries
            .insert((staged.manifest.id.clone(), staged.manifest.version), staged);
    }

    /// The pinned subset as a model set; every pin must be staged.
    pub fn model_set(&self, lock: &Lockfile) -> Result<ModelSet, IntegrityError> {
        let mut manifests = Vec::new();
        for pin in &lock.pins {
            let staged = self
                .get(&pin.model_id, pin.version)
                .ok_or_else(|| IntegrityError::NotStaged {
                    id: pin.model_id.clone(),
                    version: pin.version,
                })?;
            manifests.push(staged.manifest.clone());
        }
        Ok(ModelSet::from_manifests(manifests))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParseFailure {
    pub source: PathBuf,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct Pass1Report {
    pub store: StagingStore,
    pub errors: Vec<ParseFailure>,
}

/// Pass 1: loads sources, instantiates manifests, and stages them. Partial
/// failures are collected per file; the pipeline continues.
pub fn pass1_load(paths: &[PathBuf]) -> Pass1Report {
    let mut files = Vec::new();
    for p in paths {
        collect_manifest_files(p, &mut files);
    }
    files.sort();
    files.dedup();

    let mut report = Pass1Report::default();
    for file in files {
        let bytes = match std::fs::read(&file) {
            Ok(b) => b,
            Err(e) => {
                report
                    .errors
                    .push(ParseFailure { source: file, message: e.to_string() });
                continue;
            }
        };
        match manifest::parse_manifest(&bytes) {
            Ok(m) => {
                let hash = manifest::hash(&m);
                report.store.insert(StagedModel { manifest: m, hash, source: file });
            }
            Err(e) => {
                report
                    .errors
                    .push(ParseFailure { source: file, message: e.to_string() });
            }
        }
    }
    report
}

fn collect_manifest_files(path: &Path, out: &mut Vec<PathBuf>) {
    if path.is_dir() {
        let Ok(entries) = std::fs::read_dir(path) else { return };
        for entry in entries.flatten() {
            collect_manifest_files(&entry.path(), out);
        }
    } else if path
        .file_name()
        .and_then(|n| n.to_str())
        .map(|n| n.ends_with(".lcam.json"))
        .unwrap_or(false)
        || (path.is_file() && path.extension().and_then(|e| e.to_str()) == Some("json"))
    {
        out.push(path.to_path_buf());
    }
}

/// A scope incompatibility between a consumer and one of its providers.
#[derive(Debug, Clone, PartialEq)]
pub enum ScopeIssue {
    TemporalDisjoint {
        consumer: (i64, i64),
        provider: (i64, i64),
    },
    GeographicUncovered {
        missing: Vec<String>,
    },
    TechnologicalUncovered {
        missing: Vec<String>,
    },
    OperatingRangeExceeded {
        param: String,
        value: f64,
        min: f64,
        max: f64,
    },
}

/// Checks mutual compatibility of a consumer's scope against a provider's:
/// temporal intervals must intersect, the consumer's geography and
/// technology context must be covered, and values bound into the provider
/// must sit inside its declared operating ranges.
pub fn check_scope_compat(
    consumer: &ScopeDeclaration,
    provider: &ScopeDeclaration,
    bound: &BTreeMap<String, Quantity>,
) -> Vec<ScopeIssue> {
    let mut issues = Vec::new();
    if !consumer.temporal.intersects(&provider.temporal) {
        issues.push(ScopeIssue::TemporalDisjoint {
            consumer: (consumer.temporal.start, consumer.temporal.end),
            provider: (provider.temporal.start, provider.temporal.end),
        });
    }
    let provider_geo: BTreeSet<&str> = provider.geographic.iter().map(|s| s.as_str()).collect();
    if !provider_geo.contains("GLO") {
        let missing: Vec<String> = consumer
            .geographic
            .iter()
            .filter(|g| !provider_geo.contains(g.as_str()))
            .cloned()
            .collect();
        if !missing.is_empty() {
            issues.push(ScopeIssue::GeographicUncovered { missing });
        }
    }
    let provider_tech: BTreeSet<&str> =
        provider.technological.iter().map(|s| s.as_str()).collect();
    let missing_tech: Vec<String> = consumer
        .technological
        .iter()
        .filter(|t| !provider_tech.contains(t.as_str()))
        .cloned()
        .collect();
    if !missing_tech.is_empty() {
        issues.push(ScopeIssue::TechnologicalUncovered { missing: missing_tech });
    }
    for (param, value) in bound {
        if let Some(range) = provider.operating_ranges.get(param) {
            if let Some(issue) = range_issue(param, value, range) {
                issues.push(issue);
            }
        }
    }
    issues
}

fn range_issue(param: &str, value: &Quantity, range: &QuantityRange) -> Option<ScopeIssue> {
    // Ranges with unit errors are reported by the unit-consistency rule.
    let table = UnitTable::builtin();
    let min = table.quantity(range.min.value, &range.min.unit).ok()?;
    let max = table.quantity(range.max.value, &range.max.unit).ok()?;
    if min.dimension() != value.dimension() || max.dimension() != value.dimension() {
        return None;
    }
    let v = value.base_value();
    if v < min.base_value() || v > max.base_value() {
        Some(ScopeIssue::OperatingRangeExceeded {
            param: param.to_string(),
            value: v,
            min: min.base_value(),
            max: max.base_value(),
        })
    } else {
        None
    }
}

/// One mass-balance finding for a process.
#[derive(Debug, Clone, PartialEq)]
pub struct MassBalanceIssue {
    pub mass_in: f64,
    pub mass_out: f64,
    pub declared_loss: f64,
    pub residual: f64,
    pub tolerance: f64,
}

/// Conservation check over a process's mass-dimension exchanges:
/// |sum(in) - sum(out) - declared loss| <= tolerance * sum(in).
/// Processes with no mass flows are skipped (returns None).
pub fn check_mass_balance(
    models: &ModelSet,
    instances: &Instances,
    units: &UnitTable,
    process_id: &ModelId,
    tolerance: f64,
) -> Result<Option<MassBalanceIssue>, ComputeError> {
    let process = models.get(process_id)?;
    let env = instances.env(process_id);
    let ModelBody::Process { technosphere, biosphere, declared_loss } = &process.body else {
        return Ok(None);
    };
    let mass = Dimension::base("mass");
    let mut mass_in = 0.0;
    let mut mass_out = 0.0;
    let mut saw_mass = false;

    for e in technosphere {
        let q = compute_eval(process_id, &e.amount, &env, units)?;
        if q.dimension() == &mass {
            saw_mass = true;
            match e.direction {
                Direction::In => mass_in += q.base_value(),
                Direction::Out => mass_out += q.base_value(),
            }
        }
    }
    for e in biosphere {
        let q = compute_eval(process_id, &e.amount, &env, units)?;
        if q.dimension() == &mass {
            saw_mass = true;
            match e.direction {
                Direction::In => mass_in += q.base_value(),
                Direction::Out => mass_out += q.base_value(),
            }
        }
    }
    if !saw_mass {
        return Ok(None);
    }
    let loss = match declared_loss {
        None => 0.0,
        Some(expr) => {
            let q = compute_eval(process_id, expr, &env, units)?;
            if q.dimension() != &mass {
                return Err(ComputeError::Dimension(format!(
                    "declared loss of '{process_id}' must be a mass, got {}",
                    q.dimension()
                )));
            }
            q.base_value()
        }
    };
    let residual = (mass_in - mass_out - loss).abs();
    if residual > tolerance * mass_in.abs() {
        Ok(Some(MassBalanceIssue {
            mass_in,
            mass_out,
            declared_loss: loss,
            residual,
            tolerance,
        }))
    } else {
        Ok(None)
    }
}

fn compute_eval(
    model: &ModelId,
    expr: &crate::expr::CheckedExpr,
    env: &compute::Env,
    units: &UnitTable,
) -> Result<Quantity, ComputeError> {
    expr.ast()
        .evaluate(env, units)
        .map_err(|e| ComputeError::Expr { model: model.clone(), source: e })
}

/// Everything Pass 2 needs in one place.
pub struct Pass2Input<'a> {
    pub staging: &'a StagingStore,
    pub lock: &'a Lockfile,
    pub ruleset: &'a RuleSet,
    pub advisories: &'a [Advisory],
    pub units: &'a UnitTable,
    /// Needed only for SHORTCUT_CONSISTENCY; the rule is skipped without it.
    pub char_table: Option<&'a CharacterizationTable>,
}

/// Pass 2: evaluates every enabled rule over the pinned graph. Violations
/// are sorted by (model id, rule code, path); the record timestamp is the
/// lockfile's creation time, keeping the output a pure function of inputs.
pub fn pass2_check(input: &Pass2Input) -> Result<ValidationRecord, IntegrityError> {
    let models = input.staging.model_set(input.lock)?;
    let mut checker = Checker {
        models: &models,
        lock: input.lock,
        ruleset: input.ruleset,
        advisories: input.advisories,
        units: input.units,
        char_table: input.char_table,
        instances: Instances::default(),
        violations: Vec::new(),
        flow_dimensions: BTreeMap::new(),
    };
    checker.resolve_all_instances();
    checker.check_all();

    let mut violations = checker.violations;
    violations.sort_by(|a, b| {
        (&a.model_id, a.rule_code, &a.path, &a.message).cmp(&(
            &b.model_id,
            b.rule_code,
            &b.path,
            &b.message,
        ))
    });
    violations.dedup();
    let status = if violations.iter().any(|v| v.severity == Severity::Error) {
        ValidationStatus::Fail
    } else {
        ValidationStatus::Pass
    };
    let mut record = ValidationRecord {
        lockfile_hash: input.lock.hash(),
        ruleset_id: input.ruleset.ruleset_id.clone(),
        ruleset_version: input.ruleset.version.clone(),
        timestamp: input.lock.created_at.clone(),
        status,
        violations,
        record_hash: ContentHash([0u8; 32]),
    };
    record.record_hash = record.compute_hash();
    Ok(record)
}

struct Checker<'a> {
    models: &'a ModelSet,
    lock: &'a Lockfile,
    ruleset: &'a RuleSet,
    advisories: &'a [Advisory],
    units: &'a UnitTable,
    char_table: Option<&'a CharacterizationTable>,
    instances: Instances,
    violations: Vec<Violation>,
    flow_dimensions: BTreeMap<String, (Dimension, ModelId)>,
}

impl Checker<'_> {
    fn push(&mut self, rule: RuleCode, m: &ModelManifest, path: &str, message: String) {
        self.push_involved(rule, m, path, message, Vec::new());
    }

    fn push_involved(
        &mut self,
        rule: RuleCode,
        m: &ModelManifest,
        path: &str,
        message: String,
        involved: Vec<String>,
    ) {
        let Some(r) = self.ruleset.rule(rule) else { return };
        self.violations.push(Violation {
            rule_code: rule,
            severity: r.severity,
            model_id: m.id.to_string(),
            version: m.version.to_string(),
            path: path.to_string(),
            message,
            involved,
        });
    }

    fn enabled(&self, rule: RuleCode) -> bool {
        self.ruleset.rule(rule).is_some()
    }

    fn rule_tolerance(&self, rule: RuleCode, default: f64) -> f64 {
        self.ruleset
            .rule(rule)
            .and_then(|r| r.params.get("tolerance"))
            .and_then(|v| v.as_f64())
            .unwrap_or(default)
    }

    /// Resolves environments from the lockfile root, then from any product
    /// or process left unreached (e.g. linked only by analogy).
    fn resolve_all_instances(&mut self) {
        let mut merged = Instances::default();
        let mut roots: Vec<ModelId> = vec![self.lock.root.model_id.clone()];
        for (id, m) in self.models.iter() {
            if matches!(m.kind, ModelKind::Product | ModelKind::Process) {
                roots.push(id.clone());
            }
        }
        for root in roots {
            if merged.has(&root) {
                continue;
            }
            match resolve_instances(self.models, &root, self.units, &Overrides::default()) {
                Ok(instances) => merged.absorb(instances),
                Err(e) => {
                    let m = self.models.get(&root).expect("root exists").clone();
                    match e {
                        ComputeError::CyclicBinding(_) | ComputeError::BindingConflict { .. } => {
                            self.push(RuleCode::TypeSafety, &m, "/dependencies", e.to_string());
                        }
                        ComputeError::Expr { .. } | ComputeError::Unit(_) => {
                            // Reported per-expression by the unit rule.
                        }
                        other => {
                            self.push(RuleCode::TypeSafety, &m, "/", other.to_string());
                        }
                    }
                }
            }
        }
        self.instances = merged;
    }

    fn check_all(&mut self) {
        let models: Vec<ModelManifest> =
            self.models.iter().map(|(_, m)| m.clone()).collect();
        for m in &models {
            self.check_unit_consistency(m);
            self.check_type_safety(m);
            self.check_range(m);
            self.check_mandatory(m);
            self.check_taxonomy(m);
            self.check_scopes(m);
            self.check_allocation(m);
            self.check_mass_balance_rule(m);
        }
        self.check_shortcut_consistency(&models);
        self.check_cycles();
        self.check_advisory_taint();
    }

    fn param_dims(m: &ModelManifest) -> BTreeMap<String, Dimension> {
        m.params
            .iter()
            .map(|p| (p.name.clone(), p.dimension.clone()))
            .collect()
    }

    fn infer(
        &mut self,
        m: &ModelManifest,
        path: &str,
        expr: &crate::expr::CheckedExpr,
        dims: &BTreeMap<String, Dimension>,
    ) -> Option<Dimension> {
        match expr.ast().infer_dimension(dims, self.units) {
            Ok(d) => Some(d),
            Err(ExprError::Unit(e)) => {
                self.push(RuleCode::UnitConsistency, m, path, e.to_string());
                None
            }
            Err(ExprError::NonConstantExponent) | Err(ExprError::UnknownParameter(_)) => {
                let msg = expr
                    .ast()
                    .infer_dimension(dims, self.units)
                    .unwrap_err()
                    .to_string();
                self.push(RuleCode::TypeSafety, m, path, msg);
                None
            }
            Err(e) => {
                self.push(RuleCode::TypeSafety, m, path, e.to_string());
                None
            }
        }
    }

    fn reference_dimension(&mut self, product: &ModelId) -> Option<Dimension> {
        let m = self.models.get(product).ok()?;
        match &m.body {
            ModelBody::Product { reference_unit, .. } => {
                self.units.parse_unit(reference_unit).ok().map(|u| u.dimension)
            }
            _ => None,
        }
    }

    fn check_unit_consistency(&mut self, m: &ModelManifest) {
        if !self.enabled(RuleCode::UnitConsistency) {
            return;
        }
        let dims = Self::param_dims(m);

        // Parameter defaults and ranges against declared dimensions.
        for (i, p) in m.params.iter().enumerate() {
            if let Some(d) = &p.default {
                match self.units.parse_unit(&d.unit) {
                    Err(e) => self.push(
                        RuleCode::UnitConsistency,
                        m,
                        &format!("/params/{i}/default"),
                        e.to_string(),
                    ),
                    Ok(u) => {
                        if u.dimension != p.dimension {
                            self.push(
                                RuleCode::UnitConsistency,
                                m,
                                &format!("/params/{i}/default"),
                                format!(
                                    "default unit '{}' has dimension {}, parameter declares {}",
                                    d.unit, u.dimension, p.dimension
                                ),
                            );
                        }
                    }
                }
            }
            if let Some(r) = &p.range {
                self.check_range_units(m, &format!("/params/{i}/range"), r, &p.dimension);
            }
        }

        // Functional unit of a product must match its reference flow.
        if let ModelBody::Product { reference_unit, .. } = &m.body {
            match (
                self.units.parse_unit(reference_unit),
                self.units.parse_unit(&m.scope.functional_unit.unit),
            ) {
                (Ok(r), Ok(f)) => {
                    if r.dimension != f.dimension {
                        self.push(
                            RuleCode::UnitConsistency,
                            m,
                            "/scope/functional_unit",
                            format!(
                                "functional unit dimension {} differs from reference flow {}",
                                f.dimension, r.dimension
                            ),
                        );
                    }
                }
                (Err(e), _) => {
                    self.push(RuleCode::UnitConsistency, m, "/body/reference_unit", e.to_string())
                }
                (_, Err(e)) => {
                    self.push(RuleCode::UnitConsistency, m, "/scope/functional_unit", e.to_string())
                }
            }
        }

        // Operating ranges against the declared parameter dimension.
        for (name, range) in &m.scope.operating_ranges {
            if let Some(p) = m.param(name) {
                let dim = p.dimension.clone();
                self.check_range_units(m, &format!("/scope/operating_ranges/{name}"), range, &dim);
            }
        }

        // Body expressions.
        match &m.body.clone() {
            ModelBody::Process { technosphere, biosphere, declared_loss } => {
                for (i, e) in technosphere.iter().enumerate() {
                    let path = format!("/body/technosphere/{i}/amount");
                    let Some(d) = self.infer(m, &path, &e.amount, &dims) else { continue };
                    if let Some(expected) = self.reference_dimension(&e.product_id) {
                        if d != expected {
                            self.push(
                                RuleCode::UnitConsistency,
                                m,
                                &path,
                                format!(
                                    "exchange with '{}' has dimension {}, its reference flow is {}",
                                    e.product_id, d, expected
                                ),
                            );
                        }
                    }
                }
                for (i, e) in biosphere.iter().enumerate() {
                    let path = format!("/body/biosphere/{i}/amount");
                    let Some(d) = self.infer(m, &path, &e.amount, &dims) else { continue };
                    match self.flow_dimensions.get(&e.flow_id) {
                        None => {
                            self.flow_dimensions
                                .insert(e.flow_id.clone(), (d, m.id.clone()));
                        }
                        Some((existing, first_user)) => {
                            if existing != &d {
                                let msg = format!(
                                    "flow '{}' has dimension {} here but {} in '{}'",
                                    e.flow_id, d, existing, first_user
                                );
                                self.push(RuleCode::UnitConsistency, m, &path, msg);
                            }
                        }
                    }
                }
                if let Some(loss) = declared_loss {
                    if let Some(d) = self.infer(m, "/body/declared_loss", loss, &dims) {
                        if d != Dimension::base("mass") {
                            self.push(
                                RuleCode::UnitConsistency,
                                m,
                                "/body/declared_loss",
                                format!("declared loss must be a mass, got {d}"),
                            );
                        }
                    }
                }
            }
            ModelBody::MidpointImpactModel { impacts, .. } => {
                for (category, expr) in impacts {
                    let path = format!("/body/impacts/{category}");
                    let Some(d) = self.infer(m, &path, expr, &dims) else { continue };
                    let expected = Dimension::base(&format!("impact:{category}"));
                    if d != expected {
                        self.push(
                            RuleCode::UnitConsistency,
                            m,
                            &path,
                            format!("impact expression has dimension {d}, expected {expected}"),
                        );
                    }
                }
            }
            ModelBody::AllocationModel { coefficients } => {
                for (co, expr) in coefficients {
                    let path = format!("/body/coefficients/{co}");
                    let Some(d) = self.infer(m, &path, expr, &dims) else { continue };
                    if !d.is_dimensionless() {
                        self.push(
                            RuleCode::UnitConsistency,
                            m,
                            &path,
                            format!("allocation coefficient has dimension {d}, must be dimensionless"),
                        );
                    }
                }
            }
            ModelBody::ProductFlowModel { outputs }
            | ModelBody::ParameterConversionModel { outputs } => {
                for (name, expr) in outputs {
                    self.infer(m, &format!("/body/outputs/{name}"), expr, &dims);
                }
            }
            ModelBody::HandprintFootprintModel { service_proxy, resource_proxy } => {
                self.infer(m, "/body/service_proxy", service_proxy, &dims);
                self.infer(m, "/body/resource_proxy", resource_proxy, &dims);
            }
            ModelBody::Product { .. } | ModelBody::UncertaintyModel { .. } => {}
        }

        // Bindings: the child's parameter receives the parent expression's
        // inferred dimension; they must agree. Conversion outputs likewise.
        for (i, dep) in m.dependencies.iter().enumerate() {
            if dep.analogic {
                continue;
            }
            let Ok(child) = self.models.get(&dep.model_id) else { continue };
            let child = child.clone();
            for (param, expr) in &dep.bindings {
                let path = format!("/dependencies/{i}/bindings/{param}");
                let Some(d) = self.infer(m, &path, expr, &dims) else { continue };
                if let Some(spec) = child.param(param) {
                    if spec.dimension != d {
                        self.push(
                            RuleCode::UnitConsistency,
                            m,
                            &path,
                            format!(
                                "binding for '{param}' of '{}' has dimension {}, parameter declares {}",
                                dep.model_id, d, spec.dimension
                            ),
                        );
                    }
                }
            }
            if matches!(dep.role, DepRole::Conversion | DepRole::Property) {
                if let ModelBody::ParameterConversionModel { outputs }
                | ModelBody::ProductFlowModel { outputs } = &child.body
                {
                    let child_dims = Self::param_dims(&child);
                    for (name, expr) in outputs {
                        let Some(spec) = m.param(name) else { continue };
                        let Ok(d) = expr.ast().infer_dimension(&child_dims, self.units) else {
                            continue; // reported on the child itself
                        };
                        if d != spec.dimension {
                            self.push(
                                RuleCode::UnitConsistency,
                                m,
                                &format!("/dependencies/{i}"),
                                format!(
                                    "conversion output '{name}' from '{}' has dimension {}, parameter declares {}",
                                    dep.model_id, d, spec.dimension
                                ),
                            );
                        }
                    }
                }
            }
        }
    }

    fn check_range_units(
        &mut self,
        m: &ModelManifest,
        path: &str,
        range: &QuantityRange,
        expected: &Dimension,
    ) {
        let min = self.units.parse_unit(&range.min.unit);
        let max = self.units.parse_unit(&range.max.unit);
        match (min, max) {
            (Ok(min_u), Ok(max_u)) => {
                if &min_u.dimension != expected || &max_u.dimension != expected {
                    self.push(
                        RuleCode::UnitConsistency,
                        m,
                        path,
                        format!(
                            "range dimensions ({}, {}) do not match the parameter's {}",
                            min_u.dimension, max_u.dimension, expected
                        ),
                    );
                } else if range.min.value * min_u.scale > range.max.value * max_u.scale {
                    self.push(
                        RuleCode::UnitConsistency,
                        m,
                        path,
                        "range minimum exceeds maximum".to_string(),
                    );
                }
            }
            (Err(e), _) | (_, Err(e)) => {
                self.push(RuleCode::UnitConsistency, m, path, e.to_string());
            }
        }
    }

    fn check_type_safety(&mut self, m: &ModelManifest) {
        if !self.enabled(RuleCode::TypeSafety) {
            return;
        }
        for (i, dep) in m.dependencies.iter().enumerate() {
            if dep.analogic {
                continue;
            }
            let Ok(child) = self.models.get(&dep.model_id) else {
                continue;
            };
            let child = child.clone();
            for param in dep.bindings.keys() {
                if child.param(param).is_none() {
                    self.push(
                        RuleCode::TypeSafety,
                        m,
                        &format!("/dependencies/{i}/bindings/{param}"),
                        format!("'{}' declares no parameter '{param}'", dep.model_id),
                    );
                }
            }
            // A process must declare an input dependency for every consumed
            // product.
            if let ModelBody::Process { technosphere, .. } = &m.body {
                for (j, e) in technosphere.iter().enumerate() {
                    if e.direction == Direction::In
                        && !m.dependencies.iter().any(|d| {
                            !d.analogic && d.role == DepRole::Input && d.model_id == e.product_id
                        })
                    {
                        self.push(
                            RuleCode::TypeSafety,
                            m,
                            &format!("/body/technosphere/{j}"),
                            format!("input exchange '{}' has no input dependency", e.product_id),
                        );
                    }
                }
            }
        }
    }

    fn check_range(&mut self, m: &ModelManifest) {
        if !self.enabled(RuleCode::RangeCheck) {
            return;
        }
        let env = self.instances.env(&m.id);
        for (i, p) in m.params.iter().enumerate() {
            let Some(range) = &p.range else { continue };
            let Some(value) = env.get(&p.name) else { continue };
            if let Some(ScopeIssue::OperatingRangeExceeded { value, min, max, .. }) =
                range_issue(&p.name, value, range)
            {
                self.push(
                    RuleCode::RangeCheck,
                    m,
                    &format!("/params/{i}"),
                    format!("value {value} of '{}' is outside [{min}, {max}]", p.name),
                );
            }
        }
    }

    fn check_mandatory(&mut self, m: &ModelManifest) {
        if !self.enabled(RuleCode::MandatoryParams) {
            return;
        }
        let mandatory: Vec<&ParameterSpec> = m.params.iter().filter(|p| p.mandatory).collect();
        if mandatory.is_empty() {
            return;
        }
        match m.kind {
            ModelKind::Product | ModelKind::Process => {
                let env = self.instances.env(&m.id);
                for p in mandatory {
                    if !env.contains_key(&p.name) {
                        self.push(
                            RuleCode::MandatoryParams,
                            m,
                            &format!("/params/{}", p.name),
                            format!("mandatory parameter '{}' has no value", p.name),
                        );
                    }
                }
            }
            _ => {
                // Attached models: satisfied by a default or by any parent
                // edge binding it.
                let bound: BTreeSet<String> = self
                    .models
                    .iter()
                    .flat_map(|(_, parent)| parent.dependencies.iter())
                    .filter(|d| d.model_id == m.id && !d.analogic)
                    .flat_map(|d| d.bindings.keys().cloned())
                    .collect();
                for p in mandatory {
                    if p.default.is_none() && !bound.contains(&p.name) {
                        self.push(
                            RuleCode::MandatoryParams,
                            m,
                            &format!("/params/{}", p.name),
                            format!("mandatory parameter '{}' has no value", p.name),
                        );
                    }
                }
            }
        }
    }

    fn check_taxonomy(&mut self, m: &ModelManifest) {
        if !self.enabled(RuleCode::TaxonomyGrammar) {
            return;
        }
        let kinds: BTreeMap<ModelId, ModelKind> = self
            .models
            .iter()
            .map(|(id, m)| (id.clone(), m.kind))
            .collect();
        for v in check_taxonomy_grammar(m, &kinds) {
            self.push(
                RuleCode::TaxonomyGrammar,
                m,
                &format!("/dependencies/{}", v.dependency_index),
                v.message,
            );
        }
    }

    fn check_scopes(&mut self, m: &ModelManifest) {
        let any_scope_rule = self.enabled(RuleCode::ScopeTemporal)
            || self.enabled(RuleCode::ScopeGeographic)
            || self.enabled(RuleCode::ScopeTechnological)
            || self.enabled(RuleCode::ScopeOperatingRange);
        if !any_scope_rule {
            return;
        }
        let parent_env = self.instances.env(&m.id);
        for (i, dep) in m.dependencies.iter().enumerate() {
            if dep.analogic || dep.cut_off.is_some() {
                continue;
            }
            let Ok(child) = self.models.get(&dep.model_id) else { continue };
            let child = child.clone();
            let mut bound: BTreeMap<String, Quantity> = BTreeMap::new();
            for (param, expr) in &dep.bindings {
                if let Ok(q) = expr.ast().evaluate(&parent_env, self.units) {
                    bound.insert(param.clone(), q);
                }
            }
            // Values resolved inside the child (defaults and bindings) are
            // also subject to its own operating ranges.
            if matches!(child.kind, ModelKind::Product | ModelKind::Process) {
                for (name, value) in self.instances.env(&child.id) {
                    bound.entry(name).or_insert(value);
                }
            }
            let path = format!("/dependencies/{i}");
            for issue in check_scope_compat(&m.scope, &child.scope, &bound) {
                match issue {
                    ScopeIssue::TemporalDisjoint { consumer, provider } => self.push(
                        RuleCode::ScopeTemporal,
                        m,
                        &path,
                        format!(
                            "temporal scopes are disjoint: [{}, {}] vs '{}' [{}, {}]",
                            consumer.0, consumer.1, dep.model_id, provider.0, provider.1
                        ),
                    ),
                    ScopeIssue::GeographicUncovered { missing } => self.push_involved(
                        RuleCode::ScopeGeographic,
                        m,
                        &path,
                        format!("'{}' does not cover regions {:?}", dep.model_id, missing),
                        missing,
                    ),
                    ScopeIssue::TechnologicalUncovered { missing } => self.push_involved(
                        RuleCode::ScopeTechnological,
                        m,
                        &path,
                        format!("'{}' does not cover technology tags {:?}", dep.model_id, missing),
                        missing,
                    ),
                    ScopeIssue::OperatingRangeExceeded { param, value, min, max } => self.push(
                        RuleCode::ScopeOperatingRange,
                        m,
                        &path,
                        format!(
                            "bound value {value} for '{param}' of '{}' is outside its operating range [{min}, {max}]",
                            dep.model_id
                        ),
                    ),
                }
            }
        }
    }

    fn check_allocation(&mut self, m: &ModelManifest) {
        if !self.enabled(RuleCode::AllocationSum) || m.kind != ModelKind::Process {
            return;
        }
        let has_allocation = m
            .dependencies
            .iter()
            .any(|d| !d.analogic && d.cut_off.is_none() && d.role == DepRole::Allocation);
        if !has_allocation {
            return;
        }
        match allocation_coefficients(self.models, &self.instances, self.units, &m.id) {
            Ok(coeffs) => {
                for out in m.body.output_exchanges() {
                    if !coeffs.contains_key(&out.product_id) {
                        self.push(
                            RuleCode::AllocationSum,
                            m,
                            "/dependencies",
                            format!("no allocation coefficient for co-product '{}'", out.product_id),
                        );
                    }
                }
            }
            Err(
                e @ (ComputeError::CoefficientSum { .. }
                | ComputeError::NegativeCoefficient { .. }
                | ComputeError::MissingCoefficient { .. }),
            ) => {
                self.push(RuleCode::AllocationSum, m, "/dependencies", e.to_string());
            }
            Err(_) => {} // evaluation faults surface through other rules
        }
    }

    fn check_mass_balance_rule(&mut self, m: &ModelManifest) {
        if !self.enabled(RuleCode::MassBalance) || m.kind != ModelKind::Process {
            return;
        }
        let tolerance = self.rule_tolerance(RuleCode::MassBalance, 0.01);
        match check_mass_balance(self.models, &self.instances, self.units, &m.id, tolerance) {
            Ok(None) => {}
            Ok(Some(issue)) => {
                self.push_involved(
                    RuleCode::MassBalance,
                    m,
                    "/body",
                    format!(
                        "mass imbalance: in {} kg, out {} kg, declared loss {} kg, residual {} kg exceeds {}%",
                        issue.mass_in,
                        issue.mass_out,
                        issue.declared_loss,
                        issue.residual,
                        issue.tolerance * 100.0
                    ),
                    vec![
                        issue.mass_in.to_string(),
                        issue.mass_out.to_string(),
                        issue.declared_loss.to_string(),
                    ],
                );
            }
            Err(_) => {} // expression faults surface through other rules
        }
    }

    fn check_shortcut_consistency(&mut self, models: &[ModelManifest]) {
        if !self.enabled(RuleCode::ShortcutConsistency) {
            return;
        }
        let Some(table) = self.char_table else { return };
        for m in models {
            if m.kind != ModelKind::Product {
                continue;
            }
            let has_shortcut = m
                .dependencies
                .iter()
                .any(|d| !d.analogic && d.cut_off.is_none() && d.role == DepRole::Shortcut);
            let has_production = m
                .dependencies
                .iter()
                .any(|d| !d.analogic && d.cut_off.is_none() && d.role == DepRole::Production);
            if !(has_shortcut && has_production) {
                continue;
            }
            let Ok(amount) = self
                .units
                .quantity(m.scope.functional_unit.value, &m.scope.functional_unit.unit)
            else {
                continue;
            };
            let demand = DemandSpec { root_product: m.id.clone(), amount };
            let result = compute::evaluate_models(
                self.models,
                &demand,
                EvaluationStrategy::Compare,
                table,
                self.units,
                &EvalOptions::default(),
                &Overrides::default(),
            );
            let tolerance = shortcut_tolerance(self.models, m);
            match result {
                Err(e) => {
                    self.push(
                        RuleCode::ShortcutConsistency,
                        m,
                        "/dependencies",
                        format!("shortcut comparison failed: {e}"),
                    );
                }
                Ok(r) => {
                    let Some(deviation) = r.deviation else { continue };
                    for (category, d) in deviation {
                        let exceeded = match d.relative {
                            Some(rel) => rel > tolerance,
                            None => true,
                        };
                        if exceeded {
                            self.push_involved(
                                RuleCode::ShortcutConsistency,
                                m,
                                &format!("/impacts/{category}"),
                                format!(
                                    "shortcut {} vs expanded {} deviates beyond {}% for '{category}'",
                                    d.shortcut,
                                    d.expanded,
                                    tolerance * 100.0
                                ),
                                vec![d.shortcut.to_string(), d.expanded.to_string()],
                            );
                        }
                    }
                }
            }
        }
    }

    fn check_cycles(&mut self) {
        if !self.enabled(RuleCode::CycleStructural) {
            return;
        }
        let graph = self.staged_graph();
        let report = graph.detect_cycles(false);
        for cycle in &report.cycles {
            // Product/process loops are legitimate feedback and resolve
            // through the linear system; anything else is structural.
            let structural = cycle.iter().any(|key| {
                graph
                    .node_index(&key.model_id)
                    .map(|i| {
                        !matches!(
                            graph.nodes()[i].kind,
                            ModelKind::Product | ModelKind::Process
                        )
                    })
                    .unwrap_or(false)
            });
            if !structural {
                continue;
            }
            let first = &cycle[0];
            let Ok(m) = self.models.get(&first.model_id) else { continue };
            let m = m.clone();
            let rendered: Vec<String> = cycle.iter().map(|k| k.to_string()).collect();
            self.push_involved(
                RuleCode::CycleStructural,
                &m,
                "/dependencies",
                format!("structural dependency cycle: {}", rendered.join(" -> ")),
                rendered,
            );
        }
    }

    fn check_advisory_taint(&mut self) {
        if !self.enabled(RuleCode::AdvisoryTaint) {
            return;
        }
        let graph = self.staged_graph();
        let report = graph.propagate_taint(self.advisories, false);
        for (i, status) in report.tainted() {
            let TaintStatus::Tainted { severity, advisory_ids, path } = status else { continue };
            if *severity != AdvisorySeverity::Invalidated {
                continue;
            }
            let key = &graph.nodes()[i].key;
            let Ok(m) = self.models.get(&key.model_id) else { continue };
            let m = m.clone();
            let rendered: Vec<String> = path.iter().map(|k| k.to_string()).collect();
            self.push_involved(
                RuleCode::AdvisoryTaint,
                &m,
                "/",
                format!(
                    "invalidated by {} via {}",
                    advisory_ids.join(", "),
                    rendered.join(" -> ")
                ),
                advisory_ids.clone(),
            );
        }
    }

    fn staged_graph(&self) -> DepGraph {
        let mut nodes: Vec<GraphNode> = self
            .lock
            .pins
            .iter()
            .filter_map(|pin| {
                let m = self.models.get(&pin.model_id).ok()?;
                Some(GraphNode {
                    key: NodeKey { model_id: pin.model_id.clone(), version: pin.version },
                    hash: pin.hash,
                    kind: m.kind,
                    evidence: m.own_evidence_level(),
                })
            })
            .collect();
        nodes.sort_by(|a, b| a.key.cmp(&b.key));
        let index: BTreeMap<ModelId, usize> = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.key.model_id.clone(), i))
            .collect();
        let mut edges = Vec::new();
        let mut seen = BTreeSet::new();
        for node in &nodes {
            let Ok(m) = self.models.get(&node.key.model_id) else { continue };
            for dep in &m.dependencies {
                if dep.cut_off.is_some() {
                    continue;
                }
                let (Some(&from), Some(&to)) =
                    (index.get(&node.key.model_id), index.get(&dep.model_id))
                else {
                    continue;
                };
                if seen.insert((from, to, dep.role)) {
                    edges.push(GraphEdge {
                        from,
                        to,
                        role: dep.role,
                        analogic: dep.analogic,
                        has_bindings: !dep.bindings.is_empty(),
                    });
                }
            }
        }
        edges.sort_by_key(|e| (e.from, e.to, e.role));
        DepGraph::from_parts(nodes, edges)
    }
}

fn shortcut_tolerance(models: &ModelSet, product: &ModelManifest) -> f64 {
    product
        .dependencies
        .iter()
        .find(|d| !d.analogic && d.cut_off.is_none() && d.role == DepRole::Shortcut)
        .and_then(|d| models.get(&d.model_id).ok())
        .and_then(|m| match &m.body {
            ModelBody::MidpointImpactModel { tolerance, .. } => Some(*tolerance),
            _ => None,
        })
        .unwrap_or(0.01)
}

#[cfg(test)]
mod tests;
