//! Pass-1 manifest parsing: schema validation with JSON-pointer error paths
//! and expression compilation.

use std::collections::{BTreeMap, BTreeSet};

use serde_json::Value;
use thiserror::Error;

use super::{
    BiosphereExchange, DependencyDecl, DepRole, Direction, EvidenceLevel, EvidenceRecord,
    ModelBody, ModelId, ModelKind, ModelManifest, ParameterSpec, PedigreeScores, QuantityLit,
    QuantityRange, ScopeDeclaration, TechnosphereExchange, YearInterval,
};
use crate::expr::{CheckedExpr, ExprError};
use crate::uncertainty::Distribution;
use crate::units::Dimension;
use crate::version::Version;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("expression error at {path}: {source}")]
    Expr {
        path: String,
        #[source]
        source: ExprError,
    },
    #[error("document is not valid JSON: {0}")]
    Json(String),
}

impl ManifestError {
    fn at(path: &str, message: impl Into<String>) -> ManifestError {
        ManifestError::Schema { path: path.to_string(), message: message.into() }
    }
}

type Result<T> = std::result::Result<T, ManifestError>;

/// Parses and fully validates a manifest document.
pub fn parse_manifest(document: &[u8]) -> Result<ModelManifest> {
    let value: Value =
        serde_json::from_slice(document).map_err(|e| ManifestError::Json(e.to_string()))?;
    let root = as_object(&value, "")?;

    const KNOWN: [&str; 10] = [
        "id", "version", "kind", "scope", "params", "dependencies", "body", "evidence",
        "metadata", "schema_version",
    ];
    for key in root.keys() {
        if !KNOWN.contains(&key.as_str()) {
            return Err(ManifestError::at(&format!("/{key}"), "unknown top-level key"));
        }
    }
    if let Some(sv) = root.get("schema_version") {
        if sv.as_i64() != Some(1) {
            return Err(ManifestError::at("/schema_version", "only schema_version 1 is supported"));
        }
    }

    let id: ModelId = req_str(root, "", "id")?
        .parse()
        .map_err(|e: String| ManifestError::at("/id", e))?;
    let version: Version = req_str(root, "", "version")?
        .parse()
        .map_err(|e| ManifestError::at("/version", format!("{e}")))?;
    let kind = parse_kind(req_str(root, "", "kind")?).ok_or_else(|| {
        ManifestError::at("/kind", "expected one of the eight model kinds")
    })?;

    let scope_val = root
        .get("scope")
        .ok_or_else(|| ManifestError::at("/scope", "missing required field"))?;
    let scope = parse_scope(scope_val, "/scope")?;

    let params = match root.get("params") {
        None => Vec::new(),
        Some(v) => parse_params(v, "/params")?,
    };
    let dependencies = match root.get("dependencies") {
        None => Vec::new(),
        Some(v) => parse_dependencies(v, "/dependencies")?,
    };

    let body_val = root
        .get("body")
        .ok_or_else(|| ManifestError::at("/body", "missing required field"))?;
    let body = parse_body(kind, body_val, "/body")?;

    let evidence = match root.get("evidence") {
        None => Vec::new(),
        Some(v) => parse_evidence(v, "/evidence")?,
    };
    let metadata = match root.get("metadata") {
        None => BTreeMap::new(),
        Some(v) => as_object(v, "/metadata")?
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect(),
    };

    let manifest = ModelManifest {
        id,
        version,
        kind,
        scope,
        params,
        dependencies,
        body,
        evidence,
        metadata,
    };
    check_manifest_invariants(&manifest)?;
    Ok(manifest)
}

fn parse_kind(s: &str) -> Option<ModelKind> {
    ModelKind::ALL.into_iter().find(|k| k.as_str() == s)
}

fn parse_scope(v: &Value, path: &str) -> Result<ScopeDeclaration> {
    let obj = as_object(v, path)?;
    let functional_unit = parse_quantity_lit(
        obj.get("functional_unit")
            .ok_or_else(|| ManifestError::at(&format!("{path}/functional_unit"), "missing required field"))?,
        &format!("{path}/functional_unit"),
    )?;
    let temporal_path = format!("{path}/temporal");
    let temporal_obj = as_object(
        obj.get("temporal")
            .ok_or_else(|| ManifestError::at(&temporal_path, "missing required field"))?,
        &temporal_path,
    )?;
    let start = req_int(temporal_obj, &temporal_path, "start")?;
    let end = req_int(temporal_obj, &temporal_path, "end")?;
    if start > end {
        return Err(ManifestError::at(&temporal_path, "start must not exceed end"));
    }
    let geo_path = format!("{path}/geographic");
    let geographic = as_str_array(
        obj.get("geographic")
            .ok_or_else(|| ManifestError::at(&geo_path, "missing required field"))?,
        &geo_path,
    )?;
    if geographic.is_empty() {
        return Err(ManifestError::at(&geo_path, "geographic set must be non-empty"));
    }
    let technological = match obj.get("technological") {
        None => Vec::new(),
        Some(v) => as_str_array(v, &format!("{path}/technological"))?,
    };
    let mut operating_ranges = BTreeMap::new();
    if let Some(v) = obj.get("operating_ranges") {
        let ranges_path = format!("{path}/operating_ranges");
        for (name, rv) in as_object(v, &ranges_path)? {
            let rp = format!("{ranges_path}/{name}");
            operating_ranges.insert(name.clone(), parse_range(rv, &rp)?);
        }
    }
    Ok(ScopeDeclaration {
        functional_unit,
        temporal: YearInterval { start, end },
        geographic,
        technological,
        operating_ranges,
    })
}

fn parse_quantity_lit(v: &Value, path: &str) -> Result<QuantityLit> {
    let obj = as_object(v, path)?;
    let value = req_f64(obj, path, "value")?;
    if !value.is_finite() {
        return Err(ManifestError::at(&format!("{path}/value"), "value must be finite"));
    }
    let unit = req_str(obj, path, "unit")?.to_string();
    Ok(QuantityLit { value, unit })
}

fn parse_range(v: &Value, path: &str) -> Result<QuantityRange> {
    let obj = as_object(v, path)?;
    let min = parse_quantity_lit(
        obj.get("min").ok_or_else(|| ManifestError::at(&format!("{path}/min"), "missing required field"))?,
        &format!("{path}/min"),
    )?;
    let max = parse_quantity_lit(
        obj.get("max").ok_or_else(|| ManifestError::at(&format!("{path}/max"), "missing required field"))?,
        &format!("{path}/max"),
    )?;
    Ok(QuantityRange { min, max })
}

fn parse_pedigree(v: &Value, path: &str) -> Result<PedigreeScores> {
    let scores: PedigreeScores = serde_json::from_value(v.clone())
        .map_err(|e| ManifestError::at(path, format!("invalid pedigree scores: {e}")))?;
    if !scores.valid() {
        return Err(ManifestError::at(path, "pedigree scores must be in 1..=5"));
    }
    Ok(scores)
}

fn parse_params(v: &Value, path: &str) -> Result<Vec<ParameterSpec>> {
    let arr = as_array(v, path)?;
    let mut out = Vec::with_capacity(arr.len());
    let mut seen = BTreeSet::new();
    for (i, pv) in arr.iter().enumerate() {
        let pp = format!("{path}/{i}");
        let obj = as_object(pv, &pp)?;
        let name = req_str(obj, &pp, "name")?.to_string();
        if !seen.insert(name.clone()) {
            return Err(ManifestError::at(&pp, format!("duplicate parameter '{name}'")));
        }
        let dim_path = format!("{pp}/dimension");
        let dimension: Dimension = serde_json::from_value(
            obj.get("dimension")
                .ok_or_else(|| ManifestError::at(&dim_path, "missing required field"))?
                .clone(),
        )
        .map_err(|e| ManifestError::at(&dim_path, format!("invalid dimension map: {e}")))?;
        let default = match obj.get("default") {
            None => None,
            Some(d) => Some(parse_quantity_lit(d, &format!("{pp}/default"))?),
        };
        let range = match obj.get("range") {
            None => None,
            Some(r) => Some(parse_range(r, &format!("{pp}/range"))?),
        };
        let mandatory = opt_bool(obj, &pp, "mandatory")?.unwrap_or(false);
        let pedigree = match obj.get("pedigree") {
            None => None,
            Some(p) => Some(parse_pedigree(p, &format!("{pp}/pedigree"))?),
        };
        let basic_uncertainty_factor = match obj.get("basic_uncertainty_factor") {
            None => None,
            Some(f) => {
                let fp = format!("{pp}/basic_uncertainty_factor");
                let f = f
                    .as_f64()
                    .ok_or_else(|| ManifestError::at(&fp, "expected a number"))?;
                if !(f.is_finite() && f >= 1.0) {
                    return Err(ManifestError::at(&fp, "must be a finite number >= 1"));
                }
                Some(f)
            }
        };
        out.push(ParameterSpec {
            name,
            dimension,
            default,
            range,
            mandatory,
            pedigree,
            basic_uncertainty_factor,
        });
    }
    Ok(out)
}

fn parse_dependencies(v: &Value, path: &str) -> Result<Vec<DependencyDecl>> {
    let arr = as_array(v, path)?;
    let mut out = Vec::with_capacity(arr.len());
    for (i, dv) in arr.iter().enumerate() {
        let dp = format!("{path}/{i}");
        let obj = as_object(dv, &dp)?;
        let model_id: ModelId = req_str(obj, &dp, "model_id")?
            .parse()
            .map_err(|e: String| ManifestError::at(&format!("{dp}/model_id"), e))?;
        let version_req = req_str(obj, &dp, "version_req")?
            .parse()
            .map_err(|e| ManifestError::at(&format!("{dp}/version_req"), format!("{e}")))?;
        let role_str = req_str(obj, &dp, "role")?;
        let role = DepRole::ALL
            .into_iter()
            .find(|r| r.as_str() == role_str)
            .ok_or_else(|| ManifestError::at(&format!("{dp}/role"), format!("unknown role '{role_str}'")))?;
        let mut bindings = BTreeMap::new();
        if let Some(bv) = obj.get("bindings") {
            let bp = format!("{dp}/bindings");
            for (param, ev) in as_object(bv, &bp)? {
                let ep = format!("{bp}/{param}");
                bindings.insert(param.clone(), parse_expr_value(ev, &ep)?);
            }
        }
        let analogic = opt_bool(obj, &dp, "analogic")?.unwrap_or(false);
        let cut_off = match obj.get("cut_off") {
            None => None,
            Some(Value::String(s)) if !s.is_empty() => Some(s.clone()),
            Some(_) => {
                return Err(ManifestError::at(
                    &format!("{dp}/cut_off"),
                    "cut_off must be a non-empty justification string",
                ))
            }
        };
        out.push(DependencyDecl { model_id, version_req, role, bindings, analogic, cut_off });
    }
    Ok(out)
}

fn parse_expr_value(v: &Value, path: &str) -> Result<CheckedExpr> {
    let source = v
        .as_str()
        .ok_or_else(|| ManifestError::at(path, "expected an expression string"))?;
    CheckedExpr::parse(source).map_err(|e| ManifestError::Expr { path: path.to_string(), source: e })
}

fn parse_expr_map(v: &Value, path: &str) -> Result<BTreeMap<String, CheckedExpr>> {
    let mut out = BTreeMap::new();
    for (k, ev) in as_object(v, path)? {
        out.insert(k.clone(), parse_expr_value(ev, &format!("{path}/{k}"))?);
    }
    Ok(out)
}

fn parse_direction(v: &Value, path: &str) -> Result<Direction> {
    match v.as_str() {
        Some("in") => Ok(Direction::In),
        Some("out") => Ok(Direction::Out),
        _ => Err(ManifestError::at(path, "direction must be \"in\" or \"out\"")),
    }
}

fn parse_body(kind: ModelKind, v: &Value, path: &str) -> Result<ModelBody> {
    let obj = as_object(v, path)?;
    match kind {
        ModelKind::Product => {
            let flow_id = req_str(obj, path, "flow_id")?.to_string();
            let reference_unit = req_str(obj, path, "reference_unit")?.to_string();
            let mut properties = BTreeMap::new();
            if let Some(pv) = obj.get("properties") {
                let pp = format!("{path}/properties");
                for (k, qv) in as_object(pv, &pp)? {
                    properties.insert(k.clone(), parse_quantity_lit(qv, &format!("{pp}/{k}"))?);
                }
            }
            Ok(ModelBody::Product { flow_id, reference_unit, properties })
        }
        ModelKind::Process => {
            let techno_path = format!("{path}/technosphere");
            let techno_val = obj
                .get("technosphere")
                .ok_or_else(|| ManifestError::at(&techno_path, "missing required field"))?;
            let mut technosphere = Vec::new();
            for (i, ev) in as_array(techno_val, &techno_path)?.iter().enumerate() {
                let ep = format!("{techno_path}/{i}");
                let eobj = as_object(ev, &ep)?;
                technosphere.push(TechnosphereExchange {
                    product_id: req_str(eobj, &ep, "product_id")?
                        .parse()
                        .map_err(|e: String| ManifestError::at(&format!("{ep}/product_id"), e))?,
                    direction: parse_direction(
                        eobj.get("direction")
                            .ok_or_else(|| ManifestError::at(&format!("{ep}/direction"), "missing required field"))?,
                        &format!("{ep}/direction"),
                    )?,
                    amount: parse_expr_value(
                        eobj.get("amount")
                            .ok_or_else(|| ManifestError::at(&format!("{ep}/amount"), "missing required field"))?,
                        &format!("{ep}/amount"),
                    )?,
                });
            }
            let mut biosphere = Vec::new();
            if let Some(bv) = obj.get("biosphere") {
                let bio_path = format!("{path}/biosphere");
                for (i, ev) in as_array(bv, &bio_path)?.iter().enumerate() {
                    let ep = format!("{bio_path}/{i}");
                    let eobj = as_object(ev, &ep)?;
                    let pedigree = match eobj.get("pedigree") {
                        None => None,
                        Some(p) => Some(parse_pedigree(p, &format!("{ep}/pedigree"))?),
                    };
                    let basic_uncertainty_factor = match eobj.get("basic_uncertainty_factor") {
                        None => None,
                        Some(f) => {
                            let fp = format!("{ep}/basic_uncertainty_factor");
                            let f = f.as_f64().ok_or_else(|| ManifestError::at(&fp, "expected a number"))?;
                            if !(f.is_finite() && f >= 1.0) {
                                return Err(ManifestError::at(&fp, "must be a finite number >= 1"));
                            }
                            Some(f)
                        }
                    };
                    biosphere.push(BiosphereExchange {
                        flow_id: req_str(eobj, &ep, "flow_id")?.to_string(),
                        direction: parse_direction(
                            eobj.get("direction")
                                .ok_or_else(|| ManifestError::at(&format!("{ep}/direction"), "missing required field"))?,
                            &format!("{ep}/direction"),
                        )?,
                        amount: parse_expr_value(
                            eobj.get("amount")
                                .ok_or_else(|| ManifestError::at(&format!("{ep}/amount"), "missing required field"))?,
                            &format!("{ep}/amount"),
                        )?,
                        pedigree,
                        basic_uncertainty_factor,
                    });
                }
            }
            let declared_loss = match obj.get("declared_loss") {
                None => None,
                Some(lv) => Some(parse_expr_value(lv, &format!("{path}/declared_loss"))?),
            };
            Ok(ModelBody::Process { technosphere, biosphere, declared_loss })
        }
        ModelKind::MidpointImpactModel => {
            let impacts_path = format!("{path}/impacts");
            let impacts = parse_expr_map(
                obj.get("impacts")
                    .ok_or_else(|| ManifestError::at(&impacts_path, "missing required field"))?,
                &impacts_path,
            )?;
            let tolerance = match obj.get("tolerance") {
                None => 0.01,
                Some(t) => {
                    let tp = format!("{path}/tolerance");
                    let t = t.as_f64().ok_or_else(|| ManifestError::at(&tp, "expected a number"))?;
                    if !(t.is_finite() && t >= 0.0) {
                        return Err(ManifestError::at(&tp, "tolerance must be finite and >= 0"));
                    }
                    t
                }
            };
            Ok(ModelBody::MidpointImpactModel { impacts, tolerance })
        }
        ModelKind::ProductFlowModel | ModelKind::ParameterConversionModel => {
            let outputs_path = format!("{path}/outputs");
            let outputs = parse_expr_map(
                obj.get("outputs")
                    .ok_or_else(|| ManifestError::at(&outputs_path, "missing required field"))?,
                &outputs_path,
            )?;
            if kind == ModelKind::ProductFlowModel {
                Ok(ModelBody::ProductFlowModel { outputs })
            } else {
                Ok(ModelBody::ParameterConversionModel { outputs })
            }
        }
        ModelKind::HandprintFootprintModel => Ok(ModelBody::HandprintFootprintModel {
            service_proxy: parse_expr_value(
                obj.get("service_proxy")
                    .ok_or_else(|| ManifestError::at(&format!("{path}/service_proxy"), "missing required field"))?,
                &format!("{path}/service_proxy"),
            )?,
            resource_proxy: parse_expr_value(
                obj.get("resource_proxy")
                    .ok_or_else(|| ManifestError::at(&format!("{path}/resource_proxy"), "missing required field"))?,
                &format!("{path}/resource_proxy"),
            )?,
        }),
        ModelKind::AllocationModel => {
            let coeff_path = format!("{path}/coefficients");
            let coefficients = parse_expr_map(
                obj.get("coefficients")
                    .ok_or_else(|| ManifestError::at(&coeff_path, "missing required field"))?,
                &coeff_path,
            )?;
            if coefficients.is_empty() {
                return Err(ManifestError::at(&coeff_path, "allocation needs at least one coefficient"));
            }
            Ok(ModelBody::AllocationModel { coefficients })
        }
        ModelKind::UncertaintyModel => {
            let targets_path = format!("{path}/targets");
            let mut targets = BTreeMap::new();
            for (k, dv) in as_object(
                obj.get("targets")
                    .ok_or_else(|| ManifestError::at(&targets_path, "missing required field"))?,
                &targets_path,
            )? {
                let tp = format!("{targets_path}/{k}");
                let dist: Distribution = serde_json::from_value(dv.clone())
                    .map_err(|e| ManifestError::at(&tp, format!("invalid distribution: {e}")))?;
                dist.validate().map_err(|e| ManifestError::at(&tp, e.to_string()))?;
                targets.insert(k.clone(), dist);
            }
            Ok(ModelBody::UncertaintyModel { targets })
        }
    }
}

fn parse_evidence(v: &Value, path: &str) -> Result<Vec<EvidenceRecord>> {
    let arr = as_array(v, path)?;
    let mut out = Vec::with_capacity(arr.len());
    for (i, ev) in arr.iter().enumerate() {
        let ep = format!("{path}/{i}");
        let obj = as_object(ev, &ep)?;
        let level: EvidenceLevel = serde_json::from_value(
            obj.get("level")
                .ok_or_else(|| ManifestError::at(&format!("{ep}/level"), "missing required field"))?
                .clone(),
        )
        .map_err(|_| ManifestError::at(&format!("{ep}/level"), "expected measured, calibrated, or conjectural"))?;
        let source_id = req_str(obj, &ep, "source_id")?.to_string();
        if matches!(level, EvidenceLevel::Measured | EvidenceLevel::Calibrated)
            && source_id.is_empty()
        {
            return Err(ManifestError::at(
                &format!("{ep}/source_id"),
                "measured and calibrated evidence require a source",
            ));
        }
        let date = req_str(obj, &ep, "date")?.to_string();
        if !is_iso_date(&date) {
            return Err(ManifestError::at(&format!("{ep}/date"), "expected an ISO date YYYY-MM-DD"));
        }
        let note = match obj.get("note") {
            None => String::new(),
            Some(n) => n
                .as_str()
                .ok_or_else(|| ManifestError::at(&format!("{ep}/note"), "expected a string"))?
                .to_string(),
        };
        out.push(EvidenceRecord { level, source_id, date, note });
    }
    Ok(out)
}

fn is_iso_date(s: &str) -> bool {
    let b = s.as_bytes();
    if b.len() != 10
        || b[4] != b'-'
        || b[7] != b'-'
        || ![0usize, 1, 2, 3, 5, 6, 8, 9].iter().all(|&i| b[i].is_ascii_digit())
    {
        return false;
    }
    let month: u32 = s[5..7].parse().unwrap_or(0);
    let day: u32 = s[8..10].parse().unwrap_or(0);
    (1..=12).contains(&month) && (1..=31).contains(&day)
}

/// Manifest-level invariants checked after structural parse.
fn check_manifest_invariants(m: &ModelManifest) -> Result<()> {
    // A process must produce something.
    if m.kind == ModelKind::Process && m.body.output_exchanges().is_empty() {
        return Err(ManifestError::at("/body/technosphere", "a process needs at least one output exchange"));
    }

    let declared: BTreeSet<&str> = m.params.iter().map(|p| p.name.as_str()).collect();
    let check_refs = |expr: &CheckedExpr, path: &str| -> Result<()> {
        for name in expr.ast().param_refs() {
            if !declared.contains(name.as_str()) {
                return Err(ManifestError::at(
                    path,
                    format!("expression references undeclared parameter '{name}'"),
                ));
            }
        }
        Ok(())
    };

    for (i, dep) in m.dependencies.iter().enumerate() {
        for (param, expr) in &dep.bindings {
            check_refs(expr, &format!("/dependencies/{i}/bindings/{param}"))?;
        }
    }
    match &m.body {
        ModelBody::Process { technosphere, biosphere, declared_loss } => {
            for (i, e) in technosphere.iter().enumerate() {
                check_refs(&e.amount, &format!("/body/technosphere/{i}/amount"))?;
            }
            for (i, e) in biosphere.iter().enumerate() {
                check_refs(&e.amount, &format!("/body/biosphere/{i}/amount"))?;
            }
            if let Some(loss) = declared_loss {
                check_refs(loss, "/body/declared_loss")?;
            }
        }
        ModelBody::MidpointImpactModel { impacts, .. } => {
            for (k, e) in impacts {
                check_refs(e, &format!("/body/impacts/{k}"))?;
            }
        }
        ModelBody::ProductFlowModel { outputs } | ModelBody::ParameterConversionModel { outputs } => {
            for (k, e) in outputs {
                check_refs(e, &format!("/body/outputs/{k}"))?;
            }
        }
        ModelBody::HandprintFootprintModel { service_proxy, resource_proxy } => {
            check_refs(service_proxy, "/body/service_proxy")?;
            check_refs(resource_proxy, "/body/resource_proxy")?;
        }
        ModelBody::AllocationModel { coefficients } => {
            for (k, e) in coefficients {
                check_refs(e, &format!("/body/coefficients/{k}"))?;
            }
        }
        ModelBody::Product { .. } | ModelBody::UncertaintyModel { .. } => {}
    }

    // Operating ranges refer to this model's own parameters.
    for (name, range) in &m.scope.operating_ranges {
        if !declared.contains(name.as_str()) {
            return Err(ManifestError::at(
                &format!("/scope/operating_ranges/{name}"),
                "operating range refers to an undeclared parameter",
            ));
        }
        let _ = range;
    }
    Ok(())
}

fn as_object<'a>(v: &'a Value, path: &str) -> Result<&'a serde_json::Map<String, Value>> {
    v.as_object()
        .ok_or_else(|| ManifestError::at(if path.is_empty() { "/" } else { path }, "expected an object"))
}

fn as_array<'a>(v: &'a Value, path: &str) -> Result<&'a Vec<Value>> {
    v.as_array().ok_or_else(|| ManifestError::at(path, "expected an array"))
}

fn as_str_array(v: &Value, path: &str) -> Result<Vec<String>> {
    let arr = as_array(v, path)?;
    let mut out = Vec::with_capacity(arr.len());
    for (i, item) in arr.iter().enumerate() {
        out.push(
            item.as_str()
                .ok_or_else(|| ManifestError::at(&format!("{path}/{i}"), "expected a string"))?
                .to_string(),
        );
    }
    Ok(out)
}

fn req_str<'a>(obj: &'a serde_json::Map<String, Value>, path: &str, key: &str) -> Result<&'a str> {
    let field_path = format!("{path}/{key}");
    obj.get(key)
        .ok_or_else(|| ManifestError::at(&field_path, "missing required field"))?
        .as_str()
        .ok_or_else(|| ManifestError::at(&field_path, "expected a string"))
}

fn req_f64(obj: &serde_json::Map<String, Value>, path: &str, key: &str) -> Result<f64> {
    let field_path = format!("{path}/{key}");
    obj.get(key)
        .ok_or_else(|| ManifestError::at(&field_path, "missing required field"))?
        .as_f64()
        .ok_or_else(|| ManifestError::at(&field_path, "expected a number"))
}

fn req_int(obj: &serde_json::Map<String, Value>, path: &str, key: &str) -> Result<i64> {
    let field_path = format!("{path}/{key}");
    obj.get(key)
        .ok_or_else(|| ManifestError::at(&field_path, "missing required field"))?
        .as_i64()
        .ok_or_else(|| ManifestError::at(&field_path, "expected an integer"))
}

fn opt_bool(obj: &serde_json::Map<String, Value>, path: &str, key: &str) -> Result<Option<bool>> {
    match obj.get(key) {
        None => Ok(None),
        Some(v) => v
            .as_bool()
            .map(Some)
            .ok_or_else(|| ManifestError::at(&format!("{path}/{key}"), "expected a boolean")),
    }
}
