//! Registry store semantics and deterministic resolution, checked against
//! brute-force oracles on small instances.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lcaforge_core::manifest::{DepRole, ModelId, ModelManifest};
use lcaforge_core::registry::{
    Advisory, AdvisorySeverity, Lockfile, Registry, RegistryError, ResolveOptions,
};
use lcaforge_core::testkit::{dep, product, random_registry};
use lcaforge_core::version::{Version, VersionReq};

fn t0() -> DateTime<Utc> {
    DateTime::<Utc>::from_timestamp(1_700_000_000, 0).unwrap()
}

fn fresh() -> (tempfile::TempDir, Registry) {
    let dir = tempfile::tempdir().unwrap();
    let registry = Registry::init(dir.path()).unwrap();
    (dir, registry)
}

fn publish_all(registry: &Registry, manifests: &[ModelManifest]) {
    for m in manifests {
        registry.publish(m, t0()).unwrap();
    }
}

fn id(s: &str) -> ModelId {
    s.parse().unwrap()
}

fn v(s: &str) -> Version {
    s.parse().unwrap()
}

#[test]
fn publish_records_hash_in_index() {
    let (_dir, registry) = fresh();
    let m = product("widget", "1.0.0", vec![]);
    let outcome = registry.publish(&m, t0()).unwrap();
    assert!(!outcome.idempotent);
    let versions = registry.list_versions(&id("widget")).unwrap();
    assert_eq!(versions.len(), 1);
    assert_eq!(versions[0].hash, outcome.hash);
    assert!(!versions[0].yanked);
}

#[test]
fn identical_republish_is_a_noop() {
    let (_dir, registry) = fresh();
    let m = product("widget", "1.0.0", vec![]);
    let first = registry.publish(&m, t0()).unwrap();
    let index_before = registry.snapshot_hash().unwrap();
    let second = registry.publish(&m, t0()).unwrap();
    assert!(second.idempotent);
    assert_eq!(first.hash, second.hash);
    assert_eq!(registry.snapshot_hash().unwrap(), index_before);
}

#[test]
fn altered_republish_is_rejected() {
    let (_dir, registry) = fresh();
    let m = product("widget", "1.0.0", vec![]);
    registry.publish(&m, t0()).unwrap();
    let mut altered = m.clone();
    altered.metadata.insert("note".to_string(), serde_json::json!("changed"));
    match registry.publish(&altered, t0()) {
        Err(RegistryError::DuplicateVersion { id: mid, version, .. }) => {
            assert_eq!(mid, id("widget"));
            assert_eq!(version, v("1.0.0"));
        }
        other => panic!("expected DuplicateVersion, got {other:?}"),
    }
}

#[test]
fn yanked_versions_stay_retrievable_but_unresolvable() {
    let (_dir, registry) = fresh();
    publish_all(
        &registry,
        &[product("widget", "1.0.0", vec![]), product("widget", "1.1.0", vec![])],
    );
    registry.yank(&id("widget"), v("1.1.0"), None).unwrap();

    // Still archived and citable.
    let (m, entry) = registry.get(&id("widget"), v("1.1.0")).unwrap();
    assert_eq!(m.version, v("1.1.0"));
    assert!(entry.yanked);
    let versions = registry.list_versions(&id("widget")).unwrap();
    assert_eq!(versions.iter().filter(|e| e.yanked).count(), 1);

    // Fresh resolution takes the highest non-yanked version.
    let lock = registry
        .resolve(&id("widget"), &"^1.0.0".parse().unwrap(), &ResolveOptions::default())
        .unwrap();
    assert_eq!(lock.root.version, v("1.0.0"));
}

#[test]
fn yank_of_unknown_version_is_not_found() {
    let (_dir, registry) = fresh();
    publish_all(&registry, &[product("widget", "1.0.0", vec![])]);
    assert!(matches!(
        registry.yank(&id("widget"), v("9.9.9"), None),
        Err(RegistryError::NotFound(_))
    ));
}

#[test]
fn exact_pin_with_override_resolves_yanked_version() {
    let (_dir, registry) = fresh();
    publish_all(
        &registry,
        &[product("widget", "1.0.0", vec![]), product("widget", "1.1.0", vec![])],
    );
    registry.yank(&id("widget"), v("1.1.0"), None).unwrap();

    let exact: VersionReq = "=1.1.0".parse().unwrap();
    assert!(registry.resolve(&id("widget"), &exact, &ResolveOptions::default()).is_err());
    let opts = ResolveOptions { allow_yanked_exact: true, ..Default::default() };
    let lock = registry.resolve(&id("widget"), &exact, &opts).unwrap();
    assert_eq!(lock.root.version, v("1.1.0"));
}

#[test]
fn caret_resolution_picks_highest_compatible() {
    let (_dir, registry) = fresh();
    publish_all(
        &registry,
        &[
            product("widget", "1.0.0", vec![]),
            product("widget", "1.2.3", vec![]),
            product("widget", "2.0.0", vec![]),
        ],
    );
    let lock = registry
        .resolve(&id("widget"), &"^1.0.0".parse().unwrap(), &ResolveOptions::default())
        .unwrap();
    assert_eq!(lock.root.version, v("1.2.3"));
    assert_eq!(lock.pins.len(), 1);
}

#[test]
fn diamond_conflict_reports_requirement_chains() {
    // a -> b, c; b needs exactly d 1.0.0, c needs ^1.1.0.
    let (_dir, registry) = fresh();
    publish_all(
        &registry,
        &[
            product("d", "1.0.0", vec![]),
            product("d", "1.1.0", vec![]),
            product("b", "1.0.0", vec![dep("d", "=1.0.0", DepRole::Component)]),
            product("c", "1.0.0", vec![dep("d", "^1.1.0", DepRole::Component)]),
            product(
                "a",
                "1.0.0",
                vec![
                    dep("b", "^1.0.0", DepRole::Component),
                    dep("c", "^1.0.0", DepRole::Component),
                ],
            ),
        ],
    );
    match registry.resolve(&id("a"), &"^1.0.0".parse().unwrap(), &ResolveOptions::default()) {
        Err(RegistryError::Unsatisfiable { id: mid, constraints }) => {
            assert_eq!(mid, id("d"));
            assert_eq!(constraints.len(), 2);
            // Brute force over d's versions confirms the conjunction is empty.
            for version in [v("1.0.0"), v("1.1.0")] {
                assert!(!constraints.iter().all(|c| c.requirement.matches(version)));
            }
            // Chains lead back to the root.
            for c in &constraints {
                assert_eq!(c.chain.first().map(|(m, _)| m.clone()), Some(id("a")));
            }
        }
        other => panic!("expected Unsatisfiable, got {other:?}"),
    }
}

#[test]
fn resolve_is_byte_deterministic() {
    let (_dir, registry) = fresh();
    publish_all(
        &registry,
        &[
            product("leaf", "1.0.0", vec![]),
            product("leaf", "1.1.0", vec![]),
            product("mid", "1.0.0", vec![dep("leaf", "^1.0.0", DepRole::Component)]),
            product("root", "1.0.0", vec![dep("mid", "^1.0.0", DepRole::Component)]),
        ],
    );
    let req: VersionReq = "^1.0.0".parse().unwrap();
    let a = registry.resolve(&id("root"), &req, &ResolveOptions::default()).unwrap();
    let b = registry.resolve(&id("root"), &req, &ResolveOptions::default()).unwrap();
    assert_eq!(a.to_canonical_bytes(), b.to_canonical_bytes());
}

#[test]
fn lockfile_round_trips_canonically() {
    let (_dir, registry) = fresh();
    publish_all(&registry, &[product("widget", "1.0.0", vec![])]);
    let lock = registry
        .resolve(&id("widget"), &"^1.0.0".parse().unwrap(), &ResolveOptions::default())
        .unwrap();
    let bytes = lock.to_canonical_bytes();
    let back = Lockfile::from_slice(&bytes).unwrap();
    assert_eq!(back.to_canonical_bytes(), bytes);
    assert_eq!(back.hash(), lock.hash());
}

/// Requirements collected for each pinned model, recomputed independently
/// from the lockfile closure.
fn collected_requirements(
    registry: &Registry,
    lock: &Lockfile,
    root_req: &VersionReq,
) -> BTreeMap<ModelId, Vec<VersionReq>> {
    let mut reqs: BTreeMap<ModelId, Vec<VersionReq>> = BTreeMap::new();
    reqs.entry(lock.root.model_id.clone()).or_default().push(root_req.clone());
    for pin in &lock.pins {
        let (m, _) = registry.get(&pin.model_id, pin.version).unwrap();
        for d in &m.dependencies {
            if d.cut_off.is_some() {
                continue;
            }
            reqs.entry(d.model_id.clone()).or_default().push(d.version_req.clone());
        }
    }
    reqs
}

#[test]
fn randomized_resolution_is_deterministic_and_maximal() {
    let mut rng = ChaCha8Rng::seed_from_u64(20250809);
    let mut resolved = 0;
    for _ in 0..40 {
        let spec = random_registry(&mut rng, 5, 4);
        let dir = tempfile::tempdir().unwrap();
        let registry = Registry::init(dir.path()).unwrap();
        publish_all(&registry, &spec.manifests);
        for (yid, yv) in &spec.yanks {
            registry.yank(yid, *yv, None).unwrap();
        }

        let first = registry.resolve(&spec.root, &spec.root_req, &ResolveOptions::default());
        let second = registry.resolve(&spec.root, &spec.root_req, &ResolveOptions::default());
        match (first, second) {
            (Ok(a), Ok(b)) => {
                assert_eq!(a.to_canonical_bytes(), b.to_canonical_bytes());
                resolved += 1;

                // Maximality: no higher non-yanked version of any pin
                // satisfies all requirements collected for it.
                let reqs = collected_requirements(&registry, &a, &spec.root_req);
                for pin in &a.pins {
                    let pin_reqs = &reqs[&pin.model_id];
                    assert!(pin_reqs.iter().all(|r| r.matches(pin.version)));
                    for entry in registry.list_versions(&pin.model_id).unwrap() {
                        if entry.version > pin.version && !entry.yanked {
                            assert!(
                                !pin_reqs.iter().all(|r| r.matches(entry.version)),
                                "{}@{} should beat {}",
                                pin.model_id,
                                entry.version,
                                pin.version
                            );
                        }
                    }
                }
            }
            (Err(RegistryError::Unsatisfiable { id: uid, constraints }), Err(_)) => {
                // The reported conjunction must truly be empty.
                for entry in registry.list_versions(&uid).unwrap() {
                    if !entry.yanked {
                        assert!(!constraints.iter().all(|c| c.requirement.matches(entry.version)));
                    }
                }
            }
            (a, b) => panic!("non-deterministic outcomes: {a:?} vs {b:?}"),
        }
    }
    assert!(resolved > 5, "generator should produce mostly resolvable registries");
}

#[test]
fn advisory_lifecycle() {
    let (_dir, registry) = fresh();
    publish_all(&registry, &[product("pcb-model", "1.0.0", vec![])]);
    let advisory = Advisory {
        advisory_id: "LCA-2025-0001".to_string(),
        model_id: id("pcb-model"),
        affected: ">=1.0.0,<=1.2.0".parse().unwrap(),
        severity: AdvisorySeverity::Invalidated,
        reason: "probe drift in source measurements".to_string(),
        published_at: "2025-03-01T00:00:00Z".to_string(),
        superseded_by: None,
    };
    registry.publish_advisory(&advisory).unwrap();
    let listed = registry.advisories().unwrap();
    assert_eq!(listed.len(), 1);
    assert_eq!(listed[0].advisory_id, "LCA-2025-0001");

    // Duplicate id is rejected.
    assert!(matches!(
        registry.publish_advisory(&advisory),
        Err(RegistryError::DuplicateAdvisoryId(_))
    ));

    // Dangling supersede is rejected.
    let mut successor = advisory.clone();
    successor.advisory_id = "LCA-2025-0002".to_string();
    successor.superseded_by = Some("LCA-2099-9999".to_string());
    assert!(matches!(
        registry.publish_advisory(&successor),
        Err(RegistryError::DanglingSupersede { .. })
    ));

    // Advisory against an unknown model is rejected.
    let mut unknown = advisory.clone();
    unknown.advisory_id = "LCA-2025-0003".to_string();
    unknown.model_id = id("ghost");
    assert!(matches!(registry.publish_advisory(&unknown), Err(RegistryError::NotFound(_))));
}

#[test]
fn invalidated_advisory_requires_reason() {
    let (_dir, registry) = fresh();
    publish_all(&registry, &[product("widget", "1.0.0", vec![])]);
    let advisory = Advisory {
        advisory_id: "LCA-2025-0010".to_string(),
        model_id: id("widget"),
        affected: "^1.0.0".parse().unwrap(),
        severity: AdvisorySeverity::Invalidated,
        reason: "  ".to_string(),
        published_at: "2025-03-01T00:00:00Z".to_string(),
        superseded_by: None,
    };
    assert!(matches!(
        registry.publish_advisory(&advisory),
        Err(RegistryError::InvalidAdvisory(_))
    ));
}

#[test]
fn list_versions_of_unknown_model_is_not_found() {
    let (_dir, registry) = fresh();
    assert!(matches!(
        registry.list_versions(&id("ghost")),
        Err(RegistryError::NotFound(_))
    ));
}

#[test]
fn index_is_append_only_across_operations() {
    let (_dir, registry) = fresh();
    publish_all(
        &registry,
        &[product("widget", "1.0.0", vec![]), product("widget", "1.1.0", vec![])],
    );
    let before = registry.index().unwrap();
    registry.yank(&id("widget"), v("1.0.0"), None).unwrap();
    publish_all(&registry, &[product("other", "1.0.0", vec![])]);
    let after = registry.index().unwrap();

    for (mid, entries) in &before.models {
        let later = &after.models[mid];
        for e in entries {
            let found = later
                .iter()
                .find(|x| x.version == e.version)
                .expect("entries never disappear");
            assert_eq!(found.hash, e.hash, "hashes never change");
        }
    }
}
