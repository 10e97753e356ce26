use super::*;
use crate::manifest::parse_manifest;
use crate::registry::{LockPin, LockRoot};

fn units() -> &'static UnitTable {
    UnitTable::builtin()
}

fn m(json: &str) -> ModelManifest {
    parse_manifest(json.as_bytes()).unwrap_or_else(|e| panic!("fixture: {e}\n{json}"))
}

fn scope_block(unit: &str, start: i64, end: i64, geo: &str) -> String {
    format!(
        r#""scope": {{
            "functional_unit": {{"value": 1.0, "unit": "{unit}"}},
            "temporal": {{"start": {start}, "end": {end}}},
            "geographic": [{geo}]
        }}"#
    )
}

fn scope_decl(start: i64, end: i64, geo: &[&str], tech: &[&str]) -> ScopeDeclaration {
    ScopeDeclaration {
        functional_unit: crate::manifest::QuantityLit { value: 1.0, unit: "unit".to_string() },
        temporal: crate::manifest::YearInterval { start, end },
        geographic: geo.iter().map(|s| s.to_string()).collect(),
        technological: tech.iter().map(|s| s.to_string()).collect(),
        operating_ranges: BTreeMap::new(),
    }
}

#[test]
fn overlapping_intervals_are_compatible() {
    let a = scope_decl(2020, 2025, &["FR"], &[]);
    let b = scope_decl(2023, 2030, &["FR"], &[]);
    assert!(check_scope_compat(&a, &b, &BTreeMap::new()).is_empty());
}

#[test]
fn disjoint_intervals_are_flagged() {
    let a = scope_decl(2010, 2015, &["FR"], &[]);
    let b = scope_decl(2020, 2025, &["FR"], &[]);
    let issues = check_scope_compat(&a, &b, &BTreeMap::new());
    assert!(matches!(issues[0], ScopeIssue::TemporalDisjoint { .. }));
}

#[test]
fn glo_provider_covers_any_consumer() {
    let a = scope_decl(2020, 2025, &["FR"], &[]);
    let b = scope_decl(2020, 2025, &["GLO"], &[]);
    assert!(check_scope_compat(&a, &b, &BTreeMap::new()).is_empty());
}

#[test]
fn uncovered_region_is_flagged() {
    let a = scope_decl(2020, 2025, &["FR", "DE"], &[]);
    let b = scope_decl(2020, 2025, &["FR"], &[]);
    let issues = check_scope_compat(&a, &b, &BTreeMap::new());
    assert_eq!(issues.len(), 1);
    assert!(matches!(&issues[0], ScopeIssue::GeographicUncovered { missing } if missing == &vec!["DE".to_string()]));
}

#[test]
fn bound_value_outside_operating_range_is_flagged() {
    let a = scope_decl(2020, 2025, &["FR"], &[]);
    let mut b = scope_decl(2020, 2025, &["FR"], &[]);
    b.operating_ranges.insert(
        "power".to_string(),
        QuantityRange {
            min: crate::manifest::QuantityLit { value: 10.0, unit: "W".to_string() },
            max: crate::manifest::QuantityLit { value: 100.0, unit: "W".to_string() },
        },
    );
    let mut bound = BTreeMap::new();
    bound.insert("power".to_string(), units().quantity(250.0, "W").unwrap());
    let issues = check_scope_compat(&a, &b, &bound);
    assert!(matches!(&issues[0], ScopeIssue::OperatingRangeExceeded { param, .. } if param == "power"));
}

fn balanced_process(in_kg: f64, out_kg: f64, loss: Option<f64>) -> (ModelSet, Instances) {
    let loss_field = match loss {
        Some(l) => format!(r#", "declared_loss": "{l} [kg]""#),
        None => String::new(),
    };
    let process = m(&format!(
        r#"{{
            "id": "proc", "version": "1.0.0", "kind": "process",
            {scope},
            "dependencies": [
                {{"model_id": "feed", "version_req": "^1.0.0", "role": "input"}}
            ],
            "body": {{
                "technosphere": [
                    {{"product_id": "out-prod", "direction": "out", "amount": "{out_kg} [kg]"}},
                    {{"product_id": "feed", "direction": "in", "amount": "{in_kg} [kg]"}}
                ],
                "biosphere": []{loss_field}
            }}
        }}"#,
        scope = scope_block("kg", 2020, 2030, "\"GLO\""),
    ));
    let models = ModelSet::from_manifests([process]);
    (models, Instances::default())
}

#[test]
fn mass_balance_passes_when_in_equals_out() {
    let (models, instances) = balanced_process(2.0, 2.0, None);
    let r = check_mass_balance(&models, &instances, units(), &"proc".parse().unwrap(), 0.01)
        .unwrap();
    assert!(r.is_none());
}

#[test]
fn mass_balance_flags_missing_mass() {
    let (models, instances) = balanced_process(2.0, 1.0, None);
    let r = check_mass_balance(&models, &instances, units(), &"proc".parse().unwrap(), 0.01)
        .unwrap();
    let issue = r.expect("imbalance");
    assert_eq!(issue.mass_in, 2.0);
    assert_eq!(issue.mass_out, 1.0);
}

#[test]
fn declared_loss_balances_the_books() {
    let (models, instances) = balanced_process(2.0, 1.8, Some(0.2));
    let r = check_mass_balance(&models, &instances, units(), &"proc".parse().unwrap(), 0.01)
        .unwrap();
    assert!(r.is_none());
}

#[test]
fn processes_without_mass_flows_are_skipped() {
    let process = m(&format!(
        r#"{{
            "id": "gen", "version": "1.0.0", "kind": "process",
            {scope},
            "body": {{
                "technosphere": [
                    {{"product_id": "electricity", "direction": "out", "amount": "1 [kWh]"}}
                ],
                "biosphere": []
            }}
        }}"#,
        scope = scope_block("kWh", 2020, 2030, "\"GLO\""),
    ));
    let models = ModelSet::from_manifests([process]);
    let r = check_mass_balance(
        &models,
        &Instances::default(),
        units(),
        &"gen".parse().unwrap(),
        0.01,
    )
    .unwrap();
    assert!(r.is_none());
}

fn tiny_corpus() -> (StagingStore, Lockfile) {
    let laptop = m(&format!(
        r#"{{
            "id": "laptop", "version": "1.0.0", "kind": "product",
            {scope},
            "dependencies": [
                {{"model_id": "assembly", "version_req": "^1.0.0", "role": "production"}}
            ],
            "body": {{"flow_id": "laptop", "reference_unit": "unit"}}
        }}"#,
        scope = scope_block("unit", 2020, 2030, "\"GLO\""),
    ));
    let assembly = m(&format!(
        r#"{{
            "id": "assembly", "version": "1.0.0", "kind": "process",
            {scope},
            "body": {{
                "technosphere": [
                    {{"product_id": "laptop", "direction": "out", "amount": "1 [unit]"}}
                ],
                "biosphere": [
                    {{"flow_id": "fuel", "direction": "in", "amount": "0.5 [kg]"}},
                    {{"flow_id": "co2", "direction": "out", "amount": "0.5 [kg]"}}
                ]
            }}
        }}"#,
        scope = scope_block("unit", 2020, 2030, "\"GLO\""),
    ));
    staged(vec![laptop, assembly], "laptop")
}

fn staged(manifests: Vec<ModelManifest>, root: &str) -> (StagingStore, Lockfile) {
    let mut store = StagingStore::default();
    let mut pins = Vec::new();
    let mut root_version = None;
    for manifest in manifests {
        let hash = crate::manifest::hash(&manifest);
        if manifest.id.as_str() == root {
            root_version = Some(manifest.version);
        }
        pins.push(LockPin {
            model_id: manifest.id.clone(),
            version: manifest.version,
            hash,
        });
        store.insert(StagedModel {
            manifest,
            hash,
            source: PathBuf::from("memory"),
        });
    }
    pins.sort();
    let lock = Lockfile {
        root: LockRoot {
            model_id: root.parse().unwrap(),
            version: root_version.expect("root staged"),
        },
        pins,
        ruleset_id: "default".to_string(),
        ruleset_version: "1.0.0".to_string(),
        created_at: "2025-01-01T00:00:00Z".to_string(),
        registry_snapshot_hash: ContentHash([0u8; 32]),
    };
    (store, lock)
}

fn run_pass2(store: &StagingStore, lock: &Lockfile) -> ValidationRecord {
    let ruleset = RuleSet::default_rules();
    pass2_check(&Pass2Input {
        staging: store,
        lock,
        ruleset: &ruleset,
        advisories: &[],
        units: units(),
        char_table: None,
    })
    .unwrap()
}

#[test]
fn clean_corpus_passes() {
    let (store, lock) = tiny_corpus();
    let record = run_pass2(&store, &lock);
    assert_eq!(record.status, ValidationStatus::Pass, "{:#?}", record.violations);
    assert!(record.violations.is_empty());
}

#[test]
fn litre_bound_to_kilogram_is_a_unit_violation() {
    let laptop = m(&format!(
        r#"{{
            "id": "laptop", "version": "1.0.0", "kind": "product",
            {scope},
            "params": [
                {{"name": "coolant_l", "dimension": {{"length": 3}},
                  "default": {{"value": 1.0, "unit": "L"}}}}
            ],
            "dependencies": [
                {{"model_id": "assembly", "version_req": "^1.0.0", "role": "production",
                  "bindings": {{"coolant_mass": "coolant_l"}}}}
            ],
            "body": {{"flow_id": "laptop", "reference_unit": "unit"}}
        }}"#,
        scope = scope_block("unit", 2020, 2030, "\"GLO\""),
    ));
    let assembly = m(&format!(
        r#"{{
            "id": "assembly", "version": "1.0.0", "kind": "process",
            {scope},
            "params": [
                {{"name": "coolant_mass", "dimension": {{"mass": 1}}, "mandatory": true}}
            ],
            "body": {{
                "technosphere": [
                    {{"product_id": "laptop", "direction": "out", "amount": "1 [unit]"}}
                ],
                "biosphere": []
            }}
        }}"#,
        scope = scope_block("unit", 2020, 2030, "\"GLO\""),
    ));
    let (store, lock) = staged(vec![laptop, assembly], "laptop");
    let record = run_pass2(&store, &lock);
    assert_eq!(record.status, ValidationStatus::Fail);
    assert!(record
        .violations
        .iter()
        .any(|v| v.rule_code == RuleCode::UnitConsistency && v.path.contains("coolant_mass")));
}

#[test]
fn out_of_operating_range_binding_is_flagged() {
    let device = m(&format!(
        r#"{{
            "id": "device", "version": "1.0.0", "kind": "product",
            {scope},
            "params": [
                {{"name": "draw", "dimension": {{"mass": 1, "length": 2, "time": -3}},
                  "default": {{"value": 250.0, "unit": "W"}}}}
            ],
            "dependencies": [
                {{"model_id": "psu", "version_req": "^1.0.0", "role": "production",
                  "bindings": {{"power": "draw"}}}}
            ],
            "body": {{"flow_id": "device", "reference_unit": "unit"}}
        }}"#,
        scope = scope_block("unit", 2020, 2030, "\"GLO\""),
    ));
    let psu = m(&format!(
        r#"{{
            "id": "psu", "version": "1.0.0", "kind": "process",
            "scope": {{
                "functional_unit": {{"value": 1.0, "unit": "unit"}},
                "temporal": {{"start": 2020, "end": 2030}},
                "geographic": ["GLO"],
                "operating_ranges": {{
                    "power": {{"min": {{"value": 10.0, "unit": "W"}},
                               "max": {{"value": 100.0, "unit": "W"}}}}
                }}
            }},
            "params": [
                {{"name": "power", "dimension": {{"mass": 1, "length": 2, "time": -3}}, "mandatory": true}}
            ],
            "body": {{
                "technosphere": [
                    {{"product_id": "device", "direction": "out", "amount": "1 [unit]"}}
                ],
                "biosphere": []
            }}
        }}"#,
    ));
    let (store, lock) = staged(vec![device, psu], "device");
    let record = run_pass2(&store, &lock);
    assert!(record
        .violations
        .iter()
        .any(|v| v.rule_code == RuleCode::ScopeOperatingRange));
}

#[test]
fn disjoint_temporal_scopes_are_flagged() {
    let (store, lock) = {
        let laptop = m(&format!(
            r#"{{
                "id": "laptop", "version": "1.0.0", "kind": "product",
                {scope},
                "dependencies": [
                    {{"model_id": "assembly", "version_req": "^1.0.0", "role": "production"}}
                ],
                "body": {{"flow_id": "laptop", "reference_unit": "unit"}}
            }}"#,
            scope = scope_block("unit", 2010, 2015, "\"GLO\""),
        ));
        let assembly = m(&format!(
            r#"{{
                "id": "assembly", "version": "1.0.0", "kind": "process",
                {scope},
                "body": {{
                    "technosphere": [
                        {{"product_id": "laptop", "direction": "out", "amount": "1 [unit]"}}
                    ],
                    "biosphere": []
                }}
            }}"#,
            scope = scope_block("unit", 2020, 2030, "\"GLO\""),
        ));
        staged(vec![laptop, assembly], "laptop")
    };
    let record = run_pass2(&store, &lock);
    assert!(record.violations.iter().any(|v| v.rule_code == RuleCode::ScopeTemporal));
}

#[test]
fn severity_downgrade_flips_status_not_violations() {
    let (store, lock) = {
        let laptop = m(&format!(
            r#"{{
                "id": "laptop", "version": "1.0.0", "kind": "product",
                {scope},
                "dependencies": [
                    {{"model_id": "assembly", "version_req": "^1.0.0", "role": "production"}}
                ],
                "body": {{"flow_id": "laptop", "reference_unit": "unit"}}
            }}"#,
            scope = scope_block("unit", 2010, 2015, "\"GLO\""),
        ));
        let assembly = m(&format!(
            r#"{{
                "id": "assembly", "version": "1.0.0", "kind": "process",
                {scope},
                "body": {{
                    "technosphere": [
                        {{"product_id": "laptop", "direction": "out", "amount": "1 [unit]"}}
                    ],
                    "biosphere": []
                }}
            }}"#,
            scope = scope_block("unit", 2020, 2030, "\"GLO\""),
        ));
        staged(vec![laptop, assembly], "laptop")
    };
    let strict = run_pass2(&store, &lock);
    assert_eq!(strict.status, ValidationStatus::Fail);

    let mut soft_rules = RuleSet::default_rules();
    for rule in &mut soft_rules.rules {
        rule.severity = Severity::Warning;
    }
    let soft = pass2_check(&Pass2Input {
        staging: &store,
        lock: &lock,
        ruleset: &soft_rules,
        advisories: &[],
        units: units(),
        char_table: None,
    })
    .unwrap();
    assert_eq!(soft.status, ValidationStatus::Pass);
    let strict_keys: Vec<(RuleCode, String)> = strict
        .violations
        .iter()
        .map(|v| (v.rule_code, v.path.clone()))
        .collect();
    let soft_keys: Vec<(RuleCode, String)> = soft
        .violations
        .iter()
        .map(|v| (v.rule_code, v.path.clone()))
        .collect();
    assert_eq!(strict_keys, soft_keys);
}

#[test]
fn record_verification_detects_tampering() {
    let (store, lock) = tiny_corpus();
    let record = run_pass2(&store, &lock);
    assert!(verify_record(&record));

    let mut tampered = record.clone();
    tampered.violations.push(Violation {
        rule_code: RuleCode::MassBalance,
        severity: Severity::Warning,
        model_id: "laptop".to_string(),
        version: "1.0.0".to_string(),
        path: "/".to_string(),
        message: "injected".to_string(),
        involved: vec![],
    });
    assert!(!verify_record(&tampered));

    let mut relinked = record.clone();
    relinked.lockfile_hash = ContentHash([9u8; 32]);
    assert!(!verify_record(&relinked));
}

#[test]
fn pass1_isolates_malformed_files() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.lcam.json");
    std::fs::write(
        &good,
        format!(
            r#"{{
                "id": "solo", "version": "1.0.0", "kind": "product",
                {scope},
                "body": {{"flow_id": "solo", "reference_unit": "unit"}}
            }}"#,
            scope = scope_block("unit", 2020, 2030, "\"GLO\""),
        ),
    )
    .unwrap();
    let bad = dir.path().join("bad.lcam.json");
    std::fs::write(&bad, "{not json").unwrap();

    let report = pass1_load(&[dir.path().to_path_buf()]);
    assert_eq!(report.store.len(), 1);
    assert_eq!(report.errors.len(), 1);
    assert!(report.errors[0].source.ends_with("bad.lcam.json"));
}

#[test]
fn pass1_on_empty_directory_is_empty() {
    let dir = tempfile::tempdir().unwrap();
    let report = pass1_load(&[dir.path().to_path_buf()]);
    assert!(report.store.is_empty());
    assert!(report.errors.is_empty());
}
