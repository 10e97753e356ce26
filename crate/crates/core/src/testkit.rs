//! Deterministic builders and randomized generators backing the verification
//! suites (resolver maximality, taint reachability, tree/matrix agreement).
//! Not part of the stable API surface.

use std::collections::BTreeMap;

use rand::Rng;

use crate::expr::CheckedExpr;
use crate::manifest::{
    BiosphereExchange, DependencyDecl, DepRole, Direction, ModelBody, ModelId, ModelManifest,
    ModelKind, QuantityLit, ScopeDeclaration, TechnosphereExchange, YearInterval,
};
use crate::version::{Version, VersionReq};

pub fn scope_glo(unit: &str) -> ScopeDeclaration {
    ScopeDeclaration {
        functional_unit: QuantityLit { value: 1.0, unit: unit.to_string() },
        temporal: YearInterval { start: 2020, end: 2030 },
        geographic: vec!["GLO".to_string()],
        technological: vec![],
        operating_ranges: BTreeMap::new(),
    }
}

pub fn dep(model_id: &str, req: &str, role: DepRole) -> DependencyDecl {
    DependencyDecl {
        model_id: model_id.parse().expect("valid id"),
        version_req: req.parse().expect("valid requirement"),
        role,
        bindings: BTreeMap::new(),
        analogic: false,
        cut_off: None,
    }
}

pub fn expr(text: &str) -> CheckedExpr {
    CheckedExpr::parse(text).expect("valid expression")
}

/// A product with component dependencies; the simplest resolvable kind.
pub fn product(id: &str, version: &str, deps: Vec<DependencyDecl>) -> ModelManifest {
    ModelManifest {
        id: id.parse().expect("valid id"),
        version: version.parse().expect("valid version"),
        kind: ModelKind::Product,
        scope: scope_glo("unit"),
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

pub fn process(
    id: &str,
    version: &str,
    outputs: Vec<(&str, &str)>,
    inputs: Vec<(&str, &str)>,
    biosphere: Vec<(&str, &str)>,
    deps: Vec<DependencyDecl>,
) -> ModelManifest {
    let technosphere = outputs
        .iter()
        .map(|(product_id, amount)| TechnosphereExchange {
            product_id: product_id.parse().expect("valid id"),
            direction: Direction::Out,
            amount: expr(amount),
        })
        .chain(inputs.iter().map(|(product_id, amount)| TechnosphereExchange {
            product_id: product_id.parse().expect("valid id"),
            direction: Direction::In,
            amount: expr(amount),
        }))
        .collect();
    let biosphere = biosphere
        .iter()
        .map(|(flow_id, amount)| BiosphereExchange {
            flow_id: flow_id.to_string(),
            direction: Direction::Out,
            amount: expr(amount),
            pedigree: None,
            basic_uncertainty_factor: None,
        })
        .collect();
    ModelManifest {
        id: id.parse().expect("valid id"),
        version: version.parse().expect("valid version"),
        kind: ModelKind::Process,
        scope: scope_glo("unit"),
        params: vec![],
        dependencies: deps,
        body: ModelBody::Process { technosphere, biosphere, declared_loss: None },
        evidence: vec![],
        metadata: BTreeMap::new(),
    }
}

/// A randomized registry population: products `m0..m{n-1}` where each
/// version may depend on higher-indexed models, so the id space is acyclic
/// but version requirements can still conflict.
pub struct RandomRegistry {
    pub manifests: Vec<ModelManifest>,
    pub root: ModelId,
    pub root_req: VersionReq,
    /// (id, version) pairs to yank after publication.
    pub yanks: Vec<(ModelId, Version)>,
}

pub fn random_registry<R: Rng>(rng: &mut R, max_models: usize, max_versions: usize) -> RandomRegistry {
    let n = rng.gen_range(2..=max_models.max(2));
    let versions_of = |rng: &mut R| -> Vec<Version> {
        let count = rng.gen_range(1..=max_versions.max(1));
        (0..count).map(|minor| Version::new(1, minor as u64, 0)).collect()
    };

    let mut manifests = Vec::new();
    let mut all_versions: Vec<Vec<Version>> = Vec::new();
    for i in 0..n {
        all_versions.push(versions_of(rng));
        let id = format!("m{i}");
        for &version in all_versions[i].iter() {
            let mut deps = Vec::new();
            if i + 1 < n {
                let dep_count = rng.gen_range(0..=3.min(n - i - 1));
                let mut targets: Vec<usize> = (i + 1..n).collect();
                for _ in 0..dep_count {
                    if targets.is_empty() {
                        break;
                    }
                    let pick = rng.gen_range(0..targets.len());
                    let target = targets.swap_remove(pick);
                    deps.push(dep(
                        &format!("m{target}"),
                        &random_req(rng, max_versions),
                        DepRole::Component,
                    ));
                }
            }
            manifests.push(product(&id, &version.to_string(), deps));
        }
    }

    let mut yanks = Vec::new();
    for (i, versions) in all_versions.iter().enumerate() {
        for &v in versions {
            // Keep at least one version alive per model.
            if versions.len() > 1 && rng.gen_bool(0.1) {
                yanks.push((format!("m{i}").parse().expect("valid"), v));
            }
        }
    }
    // Never yank every version of the root's highest pick trivially; the
    // resolver reports Unsatisfiable in that case, which callers handle.
    RandomRegistry {
        manifests,
        root: "m0".parse().expect("valid"),
        root_req: random_req(rng, max_versions).parse().expect("valid"),
        yanks,
    }
}

fn random_req<R: Rng>(rng: &mut R, max_versions: usize) -> String {
    let minor = rng.gen_range(0..max_versions.max(1)) as u64;
    match rng.gen_range(0..4) {
        0 => format!("=1.{minor}.0"),
        1 => format!("^1.{minor}.0"),
        2 => {
            let hi = rng.gen_range(minor..max_versions.max(1) as u64);
            format!(">=1.{minor}.0,<=1.{hi}.0")
        }
        _ => "^1.0.0".to_string(),
    }
}

/// A random acyclic product/process system for scaling agreement checks:
/// `n` product/process pairs, each process consuming a random sample of
/// strictly higher-indexed products and emitting one or two flows.
pub fn random_acyclic_system<R: Rng>(rng: &mut R, n: usize) -> (Vec<ModelManifest>, ModelId) {
    let n = n.max(1);
    let mut manifests = Vec::new();
    for i in 0..n {
        let pid = format!("p{i}");
        let proc_id = format!("make-p{i}");
        manifests.push(product(
            &pid,
            "1.0.0",
            vec![dep(&proc_id, "=1.0.0", DepRole::Production)],
        ));
        let out_amount = format!("{} [unit]", rng.gen_range(1..=4));
        let mut inputs = Vec::new();
        let mut deps = Vec::new();
        let mut amounts: Vec<String> = Vec::new();
        if i + 1 < n {
            let input_count = rng.gen_range(0..=2.min(n - i - 1));
            let mut targets: Vec<usize> = (i + 1..n).collect();
            for _ in 0..input_count {
                let pick = rng.gen_range(0..targets.len());
                let target = targets.swap_remove(pick);
                amounts.push(format!(
                    "{:.3} [unit]",
                    rng.gen_range(0.1..3.0_f64)
                ));
                inputs.push(target);
                deps.push(dep(&format!("p{target}"), "=1.0.0", DepRole::Input));
            }
        }
        let input_pairs: Vec<(String, String)> = inputs
            .iter()
            .zip(&amounts)
            .map(|(t, a)| (format!("p{t}"), a.clone()))
            .collect();
        let bio_amount = format!("{:.3} [kg]", rng.gen_range(0.01..5.0_f64));
        manifests.push(process(
            &proc_id,
            "1.0.0",
            vec![(pid.as_str(), out_amount.as_str())],
            input_pairs
                .iter()
                .map(|(p, a)| (p.as_str(), a.as_str()))
                .collect(),
            vec![("co2", bio_amount.as_str())],
            deps,
        ));
    }
    (manifests, "p0".parse().expect("valid"))
}
