use super::*;
use proptest::prelude::*;

fn minimal_process_doc() -> String {
    r#"{
        "id": "electricity-fr",
        "version": "1.0.0",
        "kind": "process",
        "scope": {
            "functional_unit": {"value": 1.0, "unit": "kWh"},
            "temporal": {"start": 2020, "end": 2025},
            "geographic": ["FR"]
        },
        "params": [
            {"name": "co2_per_kwh", "dimension": {"mass": 1},
             "default": {"value": 0.06, "unit": "kg"}}
        ],
        "body": {
            "technosphere": [
                {"product_id": "electricity", "direction": "out", "amount": "1 [kWh]"}
            ],
            "biosphere": [
                {"flow_id": "co2", "direction": "out", "amount": "co2_per_kwh"}
            ]
        }
    }"#
    .to_string()
}

#[test]
fn parses_minimal_process_fixture() {
    let m = parse_manifest(minimal_process_doc().as_bytes()).unwrap();
    assert_eq!(m.id.as_str(), "electricity-fr");
    assert_eq!(m.kind, ModelKind::Process);
    assert_eq!(m.body.output_exchanges().len(), 1);
    assert_eq!(m.scope.temporal, YearInterval { start: 2020, end: 2025 });
}

#[test]
fn missing_version_reports_path() {
    let doc = minimal_process_doc().replace("\"version\": \"1.0.0\",", "");
    match parse_manifest(doc.as_bytes()) {
        Err(ManifestError::Schema { path, .. }) => assert_eq!(path, "/version"),
        other => panic!("expected schema error, got {other:?}"),
    }
}

#[test]
fn bad_expression_reports_syntax_error() {
    let doc = minimal_process_doc().replace("\"co2_per_kwh\"}", "\"1 +\"}");
    match parse_manifest(doc.as_bytes()) {
        Err(ManifestError::Expr { path, .. }) => {
            assert_eq!(path, "/body/biosphere/0/amount");
        }
        other => panic!("expected expression error, got {other:?}"),
    }
}

#[test]
fn unhoused_parameter_reference_is_rejected() {
    let doc = minimal_process_doc().replace("\"co2_per_kwh\"}", "\"mystery_param\"}");
    match parse_manifest(doc.as_bytes()) {
        Err(ManifestError::Schema { message, .. }) => {
            assert!(message.contains("mystery_param"));
        }
        other => panic!("expected schema error, got {other:?}"),
    }
}

#[test]
fn process_without_output_is_rejected() {
    let doc = minimal_process_doc().replace("\"direction\": \"out\", \"amount\": \"1 [kWh]\"", "\"direction\": \"in\", \"amount\": \"1 [kWh]\"");
    assert!(parse_manifest(doc.as_bytes()).is_err());
}

#[test]
fn key_order_does_not_affect_canonical_bytes() {
    let reordered = r#"{
        "kind": "process",
        "id": "electricity-fr",
        "body": {
            "biosphere": [
                {"amount": "co2_per_kwh", "direction": "out", "flow_id": "co2"}
            ],
            "technosphere": [
                {"amount": "1 [kWh]", "direction": "out", "product_id": "electricity"}
            ]
        },
        "version": "1.0.0",
        "params": [
            {"dimension": {"mass": 1}, "name": "co2_per_kwh",
             "default": {"unit": "kg", "value": 0.06}}
        ],
        "scope": {
            "geographic": ["FR"],
            "temporal": {"end": 2025, "start": 2020},
            "functional_unit": {"unit": "kWh", "value": 1.0}
        }
    }"#;
    let a = parse_manifest(minimal_process_doc().as_bytes()).unwrap();
    let b = parse_manifest(reordered.as_bytes()).unwrap();
    assert_eq!(canonicalize(&a), canonicalize(&b));
}

#[test]
fn float_spelling_does_not_affect_canonical_bytes() {
    let doc_100 = minimal_process_doc().replace("\"value\": 1.0,", "\"value\": 1.00,");
    let a = parse_manifest(minimal_process_doc().as_bytes()).unwrap();
    let b = parse_manifest(doc_100.as_bytes()).unwrap();
    assert_eq!(canonicalize(&a), canonicalize(&b));
}

#[test]
fn note_field_changes_bytes() {
    let mut a = parse_manifest(minimal_process_doc().as_bytes()).unwrap();
    let b = a.clone();
    a.evidence.push(EvidenceRecord {
        level: EvidenceLevel::Conjectural,
        source_id: String::new(),
        date: "2024-01-01".to_string(),
        note: "estimate".to_string(),
    });
    assert_ne!(canonicalize(&a), canonicalize(&b));
}

#[test]
fn hash_is_a_fixed_point_of_parse_canonicalize() {
    let m = parse_manifest(minimal_process_doc().as_bytes()).unwrap();
    let bytes = canonicalize(&m);
    let reparsed = parse_manifest(&bytes).unwrap();
    assert_eq!(hash(&m), hash(&reparsed));
    assert_eq!(bytes, canonicalize(&reparsed));
}

#[test]
fn empty_and_absent_metadata_hash_identically() {
    let with_empty = minimal_process_doc().replace(
        "\"kind\": \"process\",",
        "\"kind\": \"process\", \"metadata\": {},",
    );
    let a = parse_manifest(minimal_process_doc().as_bytes()).unwrap();
    let b = parse_manifest(with_empty.as_bytes()).unwrap();
    assert_eq!(hash(&a), hash(&b));
}

#[test]
fn field_flip_changes_hash() {
    let altered = minimal_process_doc().replace("0.06", "0.07");
    let a = parse_manifest(minimal_process_doc().as_bytes()).unwrap();
    let b = parse_manifest(altered.as_bytes()).unwrap();
    assert_ne!(hash(&a), hash(&b));
}

fn product_manifest(id: &str, deps: Vec<DependencyDecl>) -> ModelManifest {
    ModelManifest {
        id: id.parse().unwrap(),
        version: "1.0.0".parse().unwrap(),
        kind: ModelKind::Product,
        scope: ScopeDeclaration {
            functional_unit: QuantityLit { value: 1.0, unit: "unit".to_string() },
            temporal: YearInterval { start: 2020, end: 2030 },
            geographic: vec!["GLO".to_string()],
            technological: vec![],
            operating_ranges: BTreeMap::new(),
        },
        params: vec![],
        dependencies: deps,
        body: ModelBody::Product {
            flow_id: id.to_string(),
            reference_unit: "unit".to_string(),
            properties: BTreeMap::new(),
        },
        evidence: vec![],
        metadata: BTreeMap::new(),
    }
}

fn dep(id: &str, role: DepRole) -> DependencyDecl {
    DependencyDecl {
        model_id: id.parse().unwrap(),
        version_req: "^1.0.0".parse().unwrap(),
        role,
        bindings: BTreeMap::new(),
        analogic: false,
        cut_off: None,
    }
}

#[test]
fn product_production_process_is_allowed() {
    let m = product_manifest("widget", vec![dep("widget-making", DepRole::Production)]);
    let kinds: BTreeMap<ModelId, ModelKind> =
        [("widget-making".parse().unwrap(), ModelKind::Process)].into();
    assert!(check_taxonomy_grammar(&m, &kinds).is_empty());
}

#[test]
fn uncertainty_model_cannot_have_component() {
    let mut m = product_manifest("u-model", vec![dep("widget", DepRole::Component)]);
    m.kind = ModelKind::UncertaintyModel;
    m.body = ModelBody::UncertaintyModel { targets: BTreeMap::new() };
    let kinds: BTreeMap<ModelId, ModelKind> =
        [("widget".parse().unwrap(), ModelKind::Product)].into();
    let violations = check_taxonomy_grammar(&m, &kinds);
    assert_eq!(violations.len(), 1);
    assert_eq!(violations[0].code, "disallowed-edge");
}

#[test]
fn allocation_on_single_output_process_is_flagged() {
    let mut m = product_manifest("smelter", vec![dep("alloc", DepRole::Allocation)]);
    m.kind = ModelKind::Process;
    m.body = ModelBody::Process {
        technosphere: vec![TechnosphereExchange {
            product_id: "ingot".parse().unwrap(),
            direction: Direction::Out,
            amount: crate::expr::CheckedExpr::parse("1 [kg]").unwrap(),
        }],
        biosphere: vec![],
        declared_loss: None,
    };
    let kinds: BTreeMap<ModelId, ModelKind> =
        [("alloc".parse().unwrap(), ModelKind::AllocationModel)].into();
    let violations = check_taxonomy_grammar(&m, &kinds);
    assert_eq!(violations.len(), 1);
    assert_eq!(violations[0].code, "allocation-requires-multi-output");
}

#[test]
fn analogic_edges_are_exempt_from_the_grammar() {
    let mut d = dep("widget", DepRole::Component);
    d.analogic = true;
    let mut m = product_manifest("u-model", vec![d]);
    m.kind = ModelKind::UncertaintyModel;
    m.body = ModelBody::UncertaintyModel { targets: BTreeMap::new() };
    let kinds: BTreeMap<ModelId, ModelKind> =
        [("widget".parse().unwrap(), ModelKind::Product)].into();
    assert!(check_taxonomy_grammar(&m, &kinds).is_empty());
}

// The grammar's reference relation, written out flat so the check above is
// compared against an independent spelling of the same table.
fn reference_allowed() -> std::collections::BTreeSet<(ModelKind, DepRole, ModelKind)> {
    use DepRole::*;
    use ModelKind::*;
    [
        (Product, Production, Process),
        (Product, Component, Product),
        (Product, Shortcut, MidpointImpactModel),
        (Product, Property, ProductFlowModel),
        (Product, Conversion, ParameterConversionModel),
        (Product, Uncertainty, UncertaintyModel),
        (Product, Proxy, HandprintFootprintModel),
        (Process, Input, Product),
        (Process, Allocation, AllocationModel),
        (Process, Conversion, ParameterConversionModel),
        (Process, Uncertainty, UncertaintyModel),
        (Process, Shortcut, MidpointImpactModel),
        (Process, Proxy, HandprintFootprintModel),
        (ParameterConversionModel, Conversion, ParameterConversionModel),
    ]
    .into_iter()
    .collect()
}

proptest! {
    #[test]
    fn taxonomy_check_matches_table_lookup(
        parent_idx in 0usize..8,
        role_idx in 0usize..9,
        child_idx in 0usize..8,
    ) {
        let parent = ModelKind::ALL[parent_idx];
        let role = DepRole::ALL[role_idx];
        let child = ModelKind::ALL[child_idx];
        prop_assert_eq!(
            edge_allowed(parent, role, child),
            reference_allowed().contains(&(parent, role, child))
        );
    }

    #[test]
    fn canonicalization_is_idempotent(seed_note in "[a-z ]{0,12}") {
        let mut m = parse_manifest(minimal_process_doc().as_bytes()).unwrap();
        m.metadata.insert("note".to_string(), serde_json::json!(seed_note));
        let once = canonicalize(&m);
        let again = canonicalize(&parse_manifest(&once).unwrap());
        prop_assert_eq!(once, again);
    }
}
