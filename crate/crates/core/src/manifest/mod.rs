//! Versioned model manifests: schema, canonicalization, content hashing,
//! and the taxonomy grammar over dependency edges.
//!
//! A manifest is a UTF-8 JSON document (`.lcam.json`) with top-level keys
//! exactly `{id, version, kind, scope, params, dependencies, body, evidence,
//! metadata}`. Canonical bytes sort object keys, keep arrays in declared
//! order, and print numbers in shortest round-trip form; the content hash is
//! SHA-256 over those bytes in lowercase hex.

mod parse;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::canon;
use crate::expr::CheckedExpr;
use crate::uncertainty::Distribution;
use crate::units::Dimension;
use crate::version::{Version, VersionReq};

pub use parse::{parse_manifest, ManifestError};

/// Model identifier: lowercase `[a-z0-9-]`, at most 64 characters.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct ModelId(String);

impl ModelId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for ModelId {
    type Err = String;

    fn from_str(s: &str) -> Result<ModelId, String> {
        if s.is_empty() || s.len() > 64 {
            return Err(format!("model id '{s}' must be 1..=64 characters"));
        }
        if !s.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-') {
            return Err(format!("model id '{s}' may only contain [a-z0-9-]"));
        }
        Ok(ModelId(s.to_string()))
    }
}

impl<'de> Deserialize<'de> for ModelId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The model taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Product,
    Process,
    MidpointImpactModel,
    ProductFlowModel,
    HandprintFootprintModel,
    ParameterConversionModel,
    AllocationModel,
    UncertaintyModel,
}

impl ModelKind {
    pub const ALL: [ModelKind; 8] = [
        ModelKind::Product,
        ModelKind::Process,
        ModelKind::MidpointImpactModel,
        ModelKind::ProductFlowModel,
        ModelKind::HandprintFootprintModel,
        ModelKind::ParameterConversionModel,
        ModelKind::AllocationModel,
        ModelKind::UncertaintyModel,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Product => "product",
            ModelKind::Process => "process",
            ModelKind::MidpointImpactModel => "midpoint_impact_model",
            ModelKind::ProductFlowModel => "product_flow_model",
            ModelKind::HandprintFootprintModel => "handprint_footprint_model",
            ModelKind::ParameterConversionModel => "parameter_conversion_model",
            ModelKind::AllocationModel => "allocation_model",
            ModelKind::UncertaintyModel => "uncertainty_model",
        }
    }
}

/// A literal value with a unit symbol, resolved against a unit table later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantityLit {
    pub value: f64,
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantityRange {
    pub min: QuantityLit,
    pub max: QuantityLit,
}

/// Closed year interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct YearInterval {
    pub start: i64,
    pub end: i64,
}

impl YearInterval {
    pub fn intersects(&self, other: &YearInterval) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

/// Domain of validity of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ScopeDeclaration {
    pub functional_unit: QuantityLit,
    pub temporal: YearInterval,
    pub geographic: Vec<String>,
    pub technological: Vec<String>,
    pub operating_ranges: BTreeMap<String, QuantityRange>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceLevel {
    Conjectural,
    Calibrated,
    Measured,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceRecord {
    pub level: EvidenceLevel,
    pub source_id: String,
    pub date: String,
    pub note: String,
}

/// Data-quality scores, each in 1..=5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PedigreeScores {
    pub reliability: u8,
    pub completeness: u8,
    pub temporal_correlation: u8,
    pub geographical_correlation: u8,
    pub technological_correlation: u8,
}

impl PedigreeScores {
    pub const INDICATORS: [&'static str; 5] = [
        "reliability",
        "completeness",
        "temporal_correlation",
        "geographical_correlation",
        "technological_correlation",
    ];

    pub fn get(&self, indicator: &str) -> Option<u8> {
        match indicator {
            "reliability" => Some(self.reliability),
            "completeness" => Some(self.completeness),
            "temporal_correlation" => Some(self.temporal_correlation),
            "geographical_correlation" => Some(self.geographical_correlation),
            "technological_correlation" => Some(self.technological_correlation),
            _ => None,
        }
    }

    pub fn valid(&self) -> bool {
        Self::INDICATORS
            .iter()
            .all(|i| matches!(self.get(i), Some(1..=5)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSpec {
    pub name: String,
    pub dimension: Dimension,
    pub default: Option<QuantityLit>,
    pub range: Option<QuantityRange>,
    pub mandatory: bool,
    pub pedigree: Option<PedigreeScores>,
    pub basic_uncertainty_factor: Option<f64>,
}

/// Edge roles of the taxonomy grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepRole {
    Production,
    Component,
    Shortcut,
    Property,
    Conversion,
    Uncertainty,
    Input,
    Allocation,
    Proxy,
}

impl DepRole {
    pub const ALL: [DepRole; 9] = [
        DepRole::Production,
        DepRole::Component,
        DepRole::Shortcut,
        DepRole::Property,
        DepRole::Conversion,
        DepRole::Uncertainty,
        DepRole::Input,
        DepRole::Allocation,
        DepRole::Proxy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DepRole::Production => "production",
            DepRole::Component => "component",
            DepRole::Shortcut => "shortcut",
            DepRole::Property => "property",
            DepRole::Conversion => "conversion",
            DepRole::Uncertainty => "uncertainty",
            DepRole::Input => "input",
            DepRole::Allocation => "allocation",
            DepRole::Proxy => "proxy",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DependencyDecl {
    pub model_id: ModelId,
    pub version_req: VersionReq,
    pub role: DepRole,
    /// child-parameter name -> expression over this manifest's parameters.
    pub bindings: BTreeMap<String, CheckedExpr>,
    /// Validated-by-analogy link; not a computational dependency.
    pub analogic: bool,
    /// Justification string when the dependency is cut off from evaluation.
    pub cut_off: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    In,
    Out,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TechnosphereExchange {
    pub product_id: ModelId,
    pub direction: Direction,
    pub amount: CheckedExpr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiosphereExchange {
    pub flow_id: String,
    pub direction: Direction,
    pub amount: CheckedExpr,
    pub pedigree: Option<PedigreeScores>,
    pub basic_uncertainty_factor: Option<f64>,
}

/// Kind-specific payload.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelBody {
    Product {
        flow_id: String,
        reference_unit: String,
        properties: BTreeMap<String, QuantityLit>,
    },
    Process {
        technosphere: Vec<TechnosphereExchange>,
        biosphere: Vec<BiosphereExchange>,
        declared_loss: Option<CheckedExpr>,
    },
    MidpointImpactModel {
        impacts: BTreeMap<String, CheckedExpr>,
        /// Allowed relative deviation against the expanded sub-tree.
        tolerance: f64,
    },
    ProductFlowModel {
        outputs: BTreeMap<String, CheckedExpr>,
    },
    ParameterConversionModel {
        outputs: BTreeMap<String, CheckedExpr>,
    },
    HandprintFootprintModel {
        service_proxy: CheckedExpr,
        resource_proxy: CheckedExpr,
    },
    AllocationModel {
        coefficients: BTreeMap<String, CheckedExpr>,
    },
    UncertaintyModel {
        targets: BTreeMap<String, Distribution>,
    },
}

impl ModelBody {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelBody::Product { .. } => ModelKind::Product,
            ModelBody::Process { .. } => ModelKind::Process,
            ModelBody::MidpointImpactModel { .. } => ModelKind::MidpointImpactModel,
            ModelBody::ProductFlowModel { .. } => ModelKind::ProductFlowModel,
            ModelBody::HandprintFootprintModel { .. } => ModelKind::HandprintFootprintModel,
            ModelBody::ParameterConversionModel { .. } => ModelKind::ParameterConversionModel,
            ModelBody::AllocationModel { .. } => ModelKind::AllocationModel,
            ModelBody::UncertaintyModel { .. } => ModelKind::UncertaintyModel,
        }
    }

    /// Output technosphere exchanges of a process body.
    pub fn output_exchanges(&self) -> Vec<&TechnosphereExchange> {
        match self {
            ModelBody::Process { technosphere, .. } => technosphere
                .iter()
                .filter(|e| e.direction == Direction::Out)
                .collect(),
            _ => Vec::new(),
        }
    }
}

/// One versioned model of any taxonomy kind.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelManifest {
    pub id: ModelId,
    pub version: Version,
    pub kind: ModelKind,
    pub scope: ScopeDeclaration,
    pub params: Vec<ParameterSpec>,
    pub dependencies: Vec<DependencyDecl>,
    pub body: ModelBody,
    pub evidence: Vec<EvidenceRecord>,
    pub metadata: BTreeMap<String, Value>,
}

impl ModelManifest {
    pub fn param(&self, name: &str) -> Option<&ParameterSpec> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Best (strongest) own evidence level; no records means conjectural.
    pub fn own_evidence_level(&self) -> EvidenceLevel {
        self.evidence
            .iter()
            .map(|e| e.level)
            .max()
            .unwrap_or(EvidenceLevel::Conjectural)
    }
}

/// 32-byte digest of the canonical manifest serialization, lowercase hex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContentHash(pub [u8; 32]);

impl ContentHash {
    pub fn of_bytes(bytes: &[u8]) -> ContentHash {
        ContentHash(canon::sha256(bytes))
    }

    pub fn to_hex(self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl FromStr for ContentHash {
    type Err = String;

    fn from_str(s: &str) -> Result<ContentHash, String> {
        let bytes = hex::decode(s).map_err(|e| format!("invalid hash hex: {e}"))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| "hash must be 32 bytes".to_string())?;
        Ok(ContentHash(arr))
    }
}

impl Serialize for ContentHash {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ContentHash {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn quantity_value(q: &QuantityLit) -> Value {
    json!({ "unit": q.unit, "value": canon::json_f64(q.value) })
}

fn range_value(r: &QuantityRange) -> Value {
    json!({ "max": quantity_value(&r.max), "min": quantity_value(&r.min) })
}

/// Deterministic canonical bytes of a manifest.
pub fn canonicalize(m: &ModelManifest) -> Vec<u8> {
    canon::to_canonical_bytes(&manifest_value(m))
}

/// SHA-256 of the canonical bytes.
pub fn hash(m: &ModelManifest) -> ContentHash {
    ContentHash::of_bytes(&canonicalize(m))
}

fn manifest_value(m: &ModelManifest) -> Value {
    let mut top = Map::new();
    top.insert("id".into(), json!(m.id.as_str()));
    top.insert("version".into(), json!(m.version.to_string()));
    top.insert("kind".into(), json!(m.kind.as_str()));
    top.insert("scope".into(), scope_value(&m.scope));
    top.insert(
        "params".into(),
        Value::Array(m.params.iter().map(param_value).collect()),
    );
    top.insert(
        "dependencies".into(),
        Value::Array(m.dependencies.iter().map(dependency_value).collect()),
    );
    top.insert("body".into(), body_value(&m.body));
    top.insert(
        "evidence".into(),
        Value::Array(m.evidence.iter().map(evidence_value).collect()),
    );
    top.insert(
        "metadata".into(),
        Value::Object(m.metadata.iter().map(|(k, v)| (k.clone(), v.clone())).collect()),
    );
    Value::Object(top)
}

fn scope_value(s: &ScopeDeclaration) -> Value {
    let mut geographic = s.geographic.clone();
    geographic.sort();
    geographic.dedup();
    let mut technological = s.technological.clone();
    technological.sort();
    technological.dedup();
    json!({
        "functional_unit": quantity_value(&s.functional_unit),
        "geographic": geographic,
        "operating_ranges": s.operating_ranges.iter()
            .map(|(k, r)| (k.clone(), range_value(r)))
            .collect::<Map<_, _>>(),
        "technological": technological,
        "temporal": { "end": s.temporal.end, "start": s.temporal.start },
    })
}

fn param_value(p: &ParameterSpec) -> Value {
    let mut obj = Map::new();
    obj.insert("name".into(), json!(p.name));
    obj.insert("dimension".into(), serde_json::to_value(&p.dimension).unwrap());
    if let Some(d) = &p.default {
        obj.insert("default".into(), quantity_value(d));
    }
    if let Some(r) = &p.range {
        obj.insert("range".into(), range_value(r));
    }
    obj.insert("mandatory".into(), json!(p.mandatory));
    if let Some(ped) = &p.pedigree {
        obj.insert("pedigree".into(), serde_json::to_value(ped).unwrap());
    }
    if let Some(f) = p.basic_uncertainty_factor {
        obj.insert("basic_uncertainty_factor".into(), canon::json_f64(f));
    }
    Value::Object(obj)
}

fn dependency_value(d: &DependencyDecl) -> Value {
    let mut obj = Map::new();
    obj.insert("model_id".into(), json!(d.model_id.as_str()));
    obj.insert("version_req".into(), json!(d.version_req.to_string()));
    obj.insert("role".into(), json!(d.role.as_str()));
    obj.insert(
        "bindings".into(),
        Value::Object(
            d.bindings
                .iter()
                .map(|(k, e)| (k.clone(), json!(e.source())))
                .collect(),
        ),
    );
    obj.insert("analogic".into(), json!(d.analogic));
    if let Some(j) = &d.cut_off {
        obj.insert("cut_off".into(), json!(j));
    }
    Value::Object(obj)
}

fn evidence_value(e: &EvidenceRecord) -> Value {
    json!({
        "date": e.date,
        "level": serde_json::to_value(e.level).unwrap(),
        "note": e.note,
        "source_id": e.source_id,
    })
}

fn expr_map_value(map: &BTreeMap<String, CheckedExpr>) -> Value {
    Value::Object(map.iter().map(|(k, e)| (k.clone(), json!(e.source()))).collect())
}

fn body_value(b: &ModelBody) -> Value {
    match b {
        ModelBody::Product { flow_id, reference_unit, properties } => json!({
            "flow_id": flow_id,
            "properties": properties.iter()
                .map(|(k, q)| (k.clone(), quantity_value(q)))
                .collect::<Map<_, _>>(),
            "reference_unit": reference_unit,
        }),
        ModelBody::Process { technosphere, biosphere, declared_loss } => {
            let mut obj = Map::new();
            obj.insert(
                "technosphere".into(),
                Value::Array(
                    technosphere
                        .iter()
                        .map(|e| {
                            json!({
                                "amount": e.amount.source(),
                                "direction": serde_json::to_value(e.direction).unwrap(),
                                "product_id": e.product_id.as_str(),
                            })
                        })
                        .collect(),
                ),
            );
            obj.insert(
                "biosphere".into(),
                Value::Array(
                    biosphere
                        .iter()
                        .map(|e| {
                            let mut x = Map::new();
                            x.insert("amount".into(), json!(e.amount.source()));
                            x.insert(
                                "direction".into(),
                                serde_json::to_value(e.direction).unwrap(),
                            );
                            x.insert("flow_id".into(), json!(e.flow_id));
                            if let Some(p) = &e.pedigree {
                                x.insert("pedigree".into(), serde_json::to_value(p).unwrap());
                            }
                            if let Some(f) = e.basic_uncertainty_factor {
                                x.insert(
                                    "basic_uncertainty_factor".into(),
                                    canon::json_f64(f),
                                );
                            }
                            Value::Object(x)
                        })
                        .collect(),
                ),
            );
            if let Some(loss) = declared_loss {
                obj.insert("declared_loss".into(), json!(loss.source()));
            }
            Value::Object(obj)
        }
        ModelBody::MidpointImpactModel { impacts, tolerance } => json!({
            "impacts": expr_map_value(impacts),
            "tolerance": canon::json_f64(*tolerance),
        }),
        ModelBody::ProductFlowModel { outputs }
        | ModelBody::ParameterConversionModel { outputs } => json!({
            "outputs": expr_map_value(outputs),
        }),
        ModelBody::HandprintFootprintModel { service_proxy, resource_proxy } => json!({
            "resource_proxy": resource_proxy.source(),
            "service_proxy": service_proxy.source(),
        }),
        ModelBody::AllocationModel { coefficients } => json!({
            "coefficients": expr_map_value(coefficients),
        }),
        ModelBody::UncertaintyModel { targets } => json!({
            "targets": targets.iter()
                .map(|(k, d)| (k.clone(), serde_json::to_value(d).unwrap()))
                .collect::<Map<_, _>>(),
        }),
    }
}

/// A taxonomy-grammar finding. Violations are data, not errors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaxonomyViolation {
    pub code: String,
    pub dependency_index: usize,
    pub message: String,
}

/// True iff the edge (parent kind, role, child kind) is in the allowed table.
pub fn edge_allowed(parent: ModelKind, role: DepRole, child: ModelKind) -> bool {
    use DepRole::*;
    use ModelKind::*;
    matches!(
        (parent, role, child),
        (Product, Production, Process)
            | (Product, Component, Product)
            | (Product, Shortcut, MidpointImpactModel)
            | (Product, Property, ProductFlowModel)
            | (Product, Conversion, ParameterConversionModel)
            | (Product, Uncertainty, UncertaintyModel)
            | (Product, Proxy, HandprintFootprintModel)
            | (Process, Input, Product)
            | (Process, Allocation, AllocationModel)
            | (Process, Conversion, ParameterConversionModel)
            | (Process, Uncertainty, UncertaintyModel)
            | (Process, Shortcut, MidpointImpactModel)
            | (Process, Proxy, HandprintFootprintModel)
            | (ParameterConversionModel, Conversion, ParameterConversionModel)
    )
}

/// Checks every non-analogic dependency edge against the allowed-edge table.
/// Analogic links are claims, not structure, and are exempt.
pub fn check_taxonomy_grammar(
    m: &ModelManifest,
    dep_kinds: &BTreeMap<ModelId, ModelKind>,
) -> Vec<TaxonomyViolation> {
    let mut violations = Vec::new();
    let output_count = m.body.output_exchanges().len();
    for (i, dep) in m.dependencies.iter().enumerate() {
        if dep.analogic {
            continue;
        }
        let Some(&child_kind) = dep_kinds.get(&dep.model_id) else {
            violations.push(TaxonomyViolation {
                code: "unknown-dependency-kind".to_string(),
                dependency_index: i,
                message: format!("kind of dependency '{}' is unknown", dep.model_id),
            });
            continue;
        };
        if !edge_allowed(m.kind, dep.role, child_kind) {
            violations.push(TaxonomyViolation {
                code: "disallowed-edge".to_string(),
                dependency_index: i,
                message: format!(
                    "{} -({})-> {} is not an allowed parent-child structure",
                    m.kind.as_str(),
                    dep.role.as_str(),
                    child_kind.as_str(),
                ),
            });
        } else if dep.role == DepRole::Allocation && output_count < 2 {
            violations.push(TaxonomyViolation {
                code: "allocation-requires-multi-output".to_string(),
                dependency_index: i,
                message: format!(
                    "allocation model '{}' attached to a process with {} output(s)",
                    dep.model_id, output_count,
                ),
            });
        }
    }
    violations
}

#[cfg(test)]
mod tests;
