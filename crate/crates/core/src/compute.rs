//! Evaluation of a resolved model graph for a demanded functional unit:
//! process scaling, biosphere aggregation, characterization into midpoint
//! impacts, allocation of multi-output processes, and the dual
//! shortcut/expand evaluation paths.
//!
//! The computational core is the standard matrix formulation: scale the
//! technosphere with `A s = f`, aggregate the inventory `g = B s`, and
//! characterize `h = Q g`. Acyclic systems take an equivalent top-down tree
//! scaling path, which also yields a path-nested contribution tree; cyclic
//! systems fall back to a dense direct solve with partial pivoting (systems
//! here are desk-scale) and a flat contribution listing.
//!
//! Summation order is fixed (sorted node ids, then exchange index) so
//! results are bitwise independent of scheduling.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{CheckedExpr, ExprError};
use crate::manifest::{
    DependencyDecl, DepRole, Direction, ModelBody, ModelId, ModelKind, ModelManifest, QuantityLit,
};
use crate::registry::{Lockfile, Registry, RegistryError};
use crate::units::{Dimension, Quantity, Unit, UnitError, UnitTable};

#[derive(Debug, Error)]
pub enum ComputeError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("'{0}' has no midpoint impact model to use as a shortcut")]
    MissingShortcut(ModelId),
    #[error("product '{0}' has no production process")]
    NoProduction(ModelId),
    #[error("product '{0}' has more than one production process")]
    AmbiguousProduction(ModelId),
    #[error("process '{process}' does not declare an output exchange for '{product}'")]
    MissingOutput { process: ModelId, product: ModelId },
    #[error("process '{process}' consumes '{product}' without an input dependency on it")]
    MissingDependency { process: ModelId, product: ModelId },
    #[error("multi-output process '{0}' has no allocation model")]
    MissingAllocation(ModelId),
    #[error("allocation for '{process}' lacks a coefficient for co-product '{co_product}'")]
    MissingCoefficient { process: ModelId, co_product: ModelId },
    #[error("allocation coefficient for '{co_product}' of '{process}' is negative ({value})")]
    NegativeCoefficient { process: ModelId, co_product: ModelId, value: f64 },
    #[error("allocation coefficients of '{process}' sum to {sum}, expected 1")]
    CoefficientSum { process: ModelId, sum: f64 },
    #[error("technosphere system is singular: no unique scaling exists")]
    SingularSystem,
    #[error("technosphere system is not square: {products} products vs {processes} process partitions")]
    NonSquare { products: usize, processes: usize },
    #[error("parameter bindings of '{0}' form a reference cycle")]
    CyclicBinding(ModelId),
    #[error("parameter '{param}' of '{model}' is bound by more than one parent")]
    BindingConflict { model: ModelId, param: String },
    #[error("output of '{process}' for '{product}' must be positive")]
    NonPositiveOutput { process: ModelId, product: ModelId },
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("demand error: {0}")]
    InvalidDemand(String),
    #[error("invalid characterization table: {0}")]
    InvalidTable(String),
    #[error("in model '{model}': {source}")]
    Expr {
        model: ModelId,
        #[source]
        source: ExprError,
    },
    #[error(transparent)]
    Unit(#[from] UnitError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

type Result<T> = std::result::Result<T, ComputeError>;

/// What is demanded: a root product and the functional-unit amount.
#[derive(Debug, Clone)]
pub struct DemandSpec {
    pub root_product: ModelId,
    pub amount: Quantity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluationStrategy {
    Shortcut,
    Expand,
    Compare,
}

impl EvaluationStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            EvaluationStrategy::Shortcut => "shortcut",
            EvaluationStrategy::Expand => "expand",
            EvaluationStrategy::Compare => "compare",
        }
    }
}

impl std::str::FromStr for EvaluationStrategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "shortcut" => Ok(EvaluationStrategy::Shortcut),
            "expand" => Ok(EvaluationStrategy::Expand),
            "compare" => Ok(EvaluationStrategy::Compare),
            _ => Err(format!("unknown strategy '{s}', expected shortcut|expand|compare")),
        }
    }
}

/// Characterization factors keyed by (biosphere flow, impact category).
/// Factor units must satisfy `dim(factor) * dim(flow) = impact:<category>`.
#[derive(Debug, Clone)]
pub struct CharacterizationTable {
    pub table_id: String,
    pub version: String,
    factors: BTreeMap<String, BTreeMap<String, Quantity>>,
}

#[derive(Deserialize)]
struct CharTableFile {
    table_id: String,
    version: String,
    factors: Vec<CharRow>,
}

#[derive(Deserialize)]
struct CharRow {
    flow: String,
    category: String,
    value: f64,
    unit: String,
}

impl CharacterizationTable {
    pub fn from_json_str(text: &str, units: &UnitTable) -> Result<CharacterizationTable> {
        let file: CharTableFile =
            serde_json::from_str(text).map_err(|e| ComputeError::InvalidTable(e.to_string()))?;
        let mut factors: BTreeMap<String, BTreeMap<String, Quantity>> = BTreeMap::new();
        for row in file.factors {
            let q = units.quantity(row.value, &row.unit)?;
            factors.entry(row.flow).or_default().insert(row.category, q);
        }
        Ok(CharacterizationTable { table_id: file.table_id, version: file.version, factors })
    }

    pub fn load(path: &std::path::Path, units: &UnitTable) -> Result<CharacterizationTable> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ComputeError::NotFound(format!("{}: {e}", path.display())))?;
        CharacterizationTable::from_json_str(&text, units)
    }

    pub fn factors_for(&self, flow: &str) -> Option<&BTreeMap<String, Quantity>> {
        self.factors.get(flow)
    }
}

/// One version per model id; the working set of an evaluation.
#[derive(Debug, Clone, Default)]
pub struct ModelSet {
    models: BTreeMap<ModelId, ModelManifest>,
}

impl ModelSet {
    pub fn from_manifests<I: IntoIterator<Item = ModelManifest>>(iter: I) -> ModelSet {
        ModelSet { models: iter.into_iter().map(|m| (m.id.clone(), m)).collect() }
    }

    pub fn from_lockfile(lock: &Lockfile, registry: &Registry) -> Result<ModelSet> {
        let mut models = BTreeMap::new();
        for pin in &lock.pins {
            let (m, _) = registry.get(&pin.model_id, pin.version)?;
            models.insert(pin.model_id.clone(), m);
        }
        Ok(ModelSet { models })
    }

    pub fn get(&self, id: &ModelId) -> Result<&ModelManifest> {
        self.models
            .get(id)
            .ok_or_else(|| ComputeError::NotFound(format!("model '{id}'")))
    }

    pub fn contains(&self, id: &ModelId) -> bool {
        self.models.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ModelId, &ModelManifest)> {
        self.models.iter()
    }
}

/// Externally injected values for a run (Monte Carlo draws).
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// (model, parameter) -> value in coherent base units of the parameter's
    /// dimension. Ignored for parameters bound by a parent.
    pub params: BTreeMap<(ModelId, String), f64>,
    /// (process, biosphere exchange index) -> multiplicative factor.
    pub exchange_factors: BTreeMap<(ModelId, usize), f64>,
}

/// Evaluation tuning: per-node strategy overrides for mixed-depth paths.
#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Products evaluated through their impact-model shortcut instead of
    /// their production sub-tree.
    pub shortcut_at: BTreeSet<ModelId>,
}

/// Resolved parameter values of one model.
pub type Env = BTreeMap<String, Quantity>;

/// Parameter environments per model id.
#[derive(Debug, Clone, Default)]
pub struct Instances {
    envs: BTreeMap<ModelId, Env>,
}

impl Instances {
    pub fn env(&self, id: &ModelId) -> Env {
        self.envs.get(id).cloned().unwrap_or_default()
    }

    pub fn has(&self, id: &ModelId) -> bool {
        self.envs.contains_key(id)
    }

    /// Merges another resolution result; existing entries win.
    pub fn absorb(&mut self, other: Instances) {
        for (id, env) in other.envs {
            self.envs.entry(id).or_insert(env);
        }
    }
}

fn quantity_from_lit(lit: &QuantityLit, units: &UnitTable) -> Result<Quantity> {
    Ok(units.quantity(lit.value, &lit.unit)?)
}

fn eval_in(model: &ModelId, expr: &CheckedExpr, env: &Env, units: &UnitTable) -> Result<Quantity> {
    expr.ast()
        .evaluate(env, units)
        .map_err(|e| ComputeError::Expr { model: model.clone(), source: e })
}

/// Environment of a model attached to a parent edge (impact, allocation,
/// conversion, uncertainty, proxy models): its own defaults, the edge's
/// bindings evaluated in the parent environment, then any conversion chains
/// hanging below it.
pub fn attached_env(
    models: &ModelSet,
    units: &UnitTable,
    parent: &ModelId,
    parent_env: &Env,
    dep: &DependencyDecl,
) -> Result<Env> {
    let child = models.get(&dep.model_id)?;
    let mut env: Env = BTreeMap::new();
    for p in &child.params {
        if let Some(d) = &p.default {
            env.insert(p.name.clone(), quantity_from_lit(d, units)?);
        }
    }
    for (param, expr) in &dep.bindings {
        let value = eval_in(parent, expr, parent_env, units)?;
        if child.param(param).is_some() {
            env.insert(param.clone(), value);
        }
    }
    for sub in &child.dependencies {
        if sub.analogic || sub.cut_off.is_some() || sub.role != DepRole::Conversion {
            continue;
        }
        for (name, value) in conversion_outputs(models, units, &dep.model_id, &env, sub)? {
            if child.param(&name).is_some() {
                env.insert(name, value);
            }
        }
    }
    Ok(env)
}

/// Evaluates a conversion/property child's outputs against a snapshot of
/// the parent environment.
fn conversion_outputs(
    models: &ModelSet,
    units: &UnitTable,
    parent: &ModelId,
    parent_env: &Env,
    dep: &DependencyDecl,
) -> Result<Vec<(String, Quantity)>> {
    let child_env = attached_env(models, units, parent, parent_env, dep)?;
    let child = models.get(&dep.model_id)?;
    let outputs = match &child.body {
        ModelBody::ParameterConversionModel { outputs } | ModelBody::ProductFlowModel { outputs } => {
            outputs
        }
        _ => return Ok(Vec::new()),
    };
    let mut out = Vec::new();
    for (name, expr) in outputs {
        out.push((name.clone(), eval_in(&dep.model_id, expr, &child_env, units)?));
    }
    Ok(out)
}

/// Resolves parameter environments for every product and process reachable
/// from `root`.
///
/// Values come from, in order: declared defaults, parent bindings (a
/// parent's expression evaluated in the parent's environment), override
/// injections for unbound parameters, then conversion/property model outputs
/// merged in topological order of their input references. Binding cycles and
/// stalled conversion chains are errors.
pub fn resolve_instances(
    models: &ModelSet,
    root: &ModelId,
    units: &UnitTable,
    overrides: &Overrides,
) -> Result<Instances> {
    let mut incoming: BTreeMap<ModelId, Vec<(ModelId, String, CheckedExpr)>> = BTreeMap::new();
    let mut closure: Vec<ModelId> = Vec::new();
    let mut queue = vec![root.clone()];
    let mut seen = BTreeSet::new();
    while let Some(id) = queue.pop() {
        if !seen.insert(id.clone()) {
            continue;
        }
        closure.push(id.clone());
        let m = models.get(&id)?;
        for dep in &m.dependencies {
            if dep.analogic || dep.cut_off.is_some() {
                continue;
            }
            for (param, expr) in &dep.bindings {
                incoming
                    .entry(dep.model_id.clone())
                    .or_default()
                    .push((id.clone(), param.clone(), expr.clone()));
            }
            if models.contains(&dep.model_id) {
                queue.push(dep.model_id.clone());
            }
        }
    }
    closure.sort();

    #[derive(PartialEq)]
    enum State {
        Open,
        Done,
    }
    struct Resolver<'a> {
        models: &'a ModelSet,
        units: &'a UnitTable,
        overrides: &'a Overrides,
        incoming: &'a BTreeMap<ModelId, Vec<(ModelId, String, CheckedExpr)>>,
        state: BTreeMap<ModelId, State>,
        envs: BTreeMap<ModelId, Env>,
    }

    impl Resolver<'_> {
        fn env(&mut self, id: &ModelId) -> Result<Env> {
            match self.state.get(id) {
                Some(State::Done) => return Ok(self.envs[id].clone()),
                Some(State::Open) => return Err(ComputeError::CyclicBinding(id.clone())),
                None => {}
            }
            self.state.insert(id.clone(), State::Open);
            let m = self.models.get(id)?.clone();

            let mut env: Env = BTreeMap::new();
            for p in &m.params {
                if let Some(d) = &p.default {
                    env.insert(p.name.clone(), quantity_from_lit(d, self.units)?);
                }
            }

            let mut bound: BTreeSet<String> = BTreeSet::new();
            for (parent, param, expr) in self.incoming.get(id).cloned().unwrap_or_default() {
                if !bound.insert(param.clone()) {
                    return Err(ComputeError::BindingConflict { model: id.clone(), param });
                }
                let parent_env = self.env(&parent)?;
                let value = eval_in(&parent, &expr, &parent_env, self.units)?;
                if m.param(&param).is_some() {
                    env.insert(param, value);
                }
            }

            for ((mid, param), value) in &self.overrides.params {
                if mid == id && !bound.contains(param) {
                    if let Some(spec) = m.param(param) {
                        env.insert(
                            param.clone(),
                            Quantity::new(*value, Unit::base_of(spec.dimension.clone()))
                                .map_err(ComputeError::Unit)?,
                        );
                    }
                }
            }

            // Conversion and property models feed computed parameters back
            // into this model, in topological order of what they need.
            let mut pending: Vec<&DependencyDecl> = m
                .dependencies
                .iter()
                .filter(|d| {
                    !d.analogic
                        && d.cut_off.is_none()
                        && matches!(d.role, DepRole::Conversion | DepRole::Property)
                })
                .collect();
            while !pending.is_empty() {
                let mut progressed = false;
                let mut remaining = Vec::new();
                for dep in pending {
                    let needed: BTreeSet<String> = dep
                        .bindings
                        .values()
                        .flat_map(|e| e.ast().param_refs())
                        .collect();
                    if needed.iter().all(|n| env.contains_key(n)) {
                        for (name, value) in
                            conversion_outputs(self.models, self.units, id, &env, dep)?
                        {
                            if m.param(&name).is_some() {
                                env.insert(name, value);
                            }
                        }
                        progressed = true;
                    } else {
                        remaining.push(dep);
                    }
                }
                if !progressed {
                    return Err(ComputeError::CyclicBinding(id.clone()));
                }
                pending = remaining;
            }

            self.envs.insert(id.clone(), env.clone());
            self.state.insert(id.clone(), State::Done);
            Ok(env)
        }
    }

    let mut r = Resolver {
        models,
        units,
        overrides,
        incoming: &incoming,
        state: BTreeMap::new(),
        envs: BTreeMap::new(),
    };
    for id in &closure {
        if !models.contains(id) {
            continue;
        }
        // Attached models get their environments at their point of use; the
        // global map carries the bodies that are evaluated standalone.
        if matches!(models.get(id)?.kind, ModelKind::Product | ModelKind::Process) {
            r.env(id)?;
        }
    }
    Ok(Instances { envs: r.envs })
}

/// One column of the technosphere system: a process, optionally narrowed to
/// a single co-product partition of a multi-output process.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct PartitionKey {
    pub process: ModelId,
    pub co_product: Option<ModelId>,
}

impl PartitionKey {
    pub fn label(&self) -> String {
        match &self.co_product {
            Some(co) => format!("{}#{}", self.process, co),
            None => self.process.to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CutOffRecord {
    pub model_id: String,
    pub dependency: String,
    pub justification: String,
}

/// Aggregated biosphere flows plus the process scaling that produced them.
#[derive(Debug, Clone)]
pub struct InventoryResult {
    pub flows: BTreeMap<String, Quantity>,
    pub scaling: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ContributionNode {
    pub node: String,
    /// Direct per-category impact of this node, in base units.
    pub direct: BTreeMap<String, f64>,
    pub children: Vec<ContributionNode>,
}

impl ContributionNode {
    fn empty(node: String) -> ContributionNode {
        ContributionNode { node, direct: BTreeMap::new(), children: Vec::new() }
    }

    /// Sums direct contributions over the whole tree, per category.
    pub fn totals(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        self.fold_into(&mut out);
        out
    }

    fn fold_into(&self, out: &mut BTreeMap<String, f64>) {
        for (cat, v) in &self.direct {
            *out.entry(cat.clone()).or_insert(0.0) += v;
        }
        for c in &self.children {
            c.fold_into(out);
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DeviationEntry {
    pub shortcut: f64,
    pub expanded: f64,
    /// |shortcut - expanded| / |expanded|; None when expanded is 0 and the
    /// shortcut is not.
    pub relative: Option<f64>,
}

/// Per-category characterized impacts with provenance.
#[derive(Debug, Clone)]
pub struct ImpactResult {
    pub strategy: EvaluationStrategy,
    pub impacts: BTreeMap<String, Quantity>,
    pub uncharacterized: Vec<String>,
    pub cut_offs: Vec<CutOffRecord>,
    pub inventory: InventoryResult,
    pub contributions: ContributionNode,
    pub deviation: Option<BTreeMap<String, DeviationEntry>>,
}

/// Evaluated allocation coefficients of a multi-output process, checked for
/// sign and unit sum.
pub fn allocation_coefficients(
    models: &ModelSet,
    instances: &Instances,
    units: &UnitTable,
    process_id: &ModelId,
) -> Result<BTreeMap<ModelId, f64>> {
    let process = models.get(process_id)?;
    let alloc_dep = process
        .dependencies
        .iter()
        .find(|d| !d.analogic && d.cut_off.is_none() && d.role == DepRole::Allocation)
        .ok_or_else(|| ComputeError::MissingAllocation(process_id.clone()))?;
    let alloc = models.get(&alloc_dep.model_id)?;
    let ModelBody::AllocationModel { coefficients } = &alloc.body else {
        return Err(ComputeError::MissingAllocation(process_id.clone()));
    };
    let parent_env = instances.env(process_id);
    let alloc_env = attached_env(models, units, process_id, &parent_env, alloc_dep)?;
    let mut out = BTreeMap::new();
    let mut sum = 0.0;
    for (co, expr) in coefficients {
        let co_id: ModelId = co
            .parse()
            .map_err(|e: String| ComputeError::InvalidDemand(format!("allocation key: {e}")))?;
        let q = eval_in(&alloc_dep.model_id, expr, &alloc_env, units)?;
        if !q.dimension().is_dimensionless() {
            return Err(ComputeError::Dimension(format!(
                "allocation coefficient '{co}' of '{}' must be dimensionless",
                alloc_dep.model_id
            )));
        }
        let v = q.base_value();
        if v < 0.0 {
            return Err(ComputeError::NegativeCoefficient {
                process: process_id.clone(),
                co_product: co_id,
                value: v,
            });
        }
        sum += v;
        out.insert(co_id, v);
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(ComputeError::CoefficientSum { process: process_id.clone(), sum });
    }
    Ok(out)
}

/// Scaled biosphere flows of one process partition, in base units.
fn process_biosphere(
    models: &ModelSet,
    instances: &Instances,
    units: &UnitTable,
    overrides: &Overrides,
    process_id: &ModelId,
    coeff: f64,
    runs: f64,
) -> Result<BTreeMap<String, Quantity>> {
    let process = models.get(process_id)?;
    let env = instances.env(process_id);
    let ModelBody::Process { biosphere, .. } = &process.body else {
        return Ok(BTreeMap::new());
    };
    let mut out: BTreeMap<String, Quantity> = BTreeMap::new();
    for (idx, e) in biosphere.iter().enumerate() {
        let qty = eval_in(process_id, &e.amount, &env, units)?;
        let factor = overrides
            .exchange_factors
            .get(&(process_id.clone(), idx))
            .copied()
            .unwrap_or(1.0);
        let scaled = qty.base_value() * factor * coeff * runs;
        match out.get_mut(&e.flow_id) {
            None => {
                out.insert(
                    e.flow_id.clone(),
                    Quantity::new(scaled, Unit::base_of(qty.dimension().clone()))
                        .map_err(ComputeError::Unit)?,
                );
            }
            Some(existing) => {
                if existing.dimension() != qty.dimension() {
                    return Err(ComputeError::Dimension(format!(
                        "flow '{}' used with dimensions {} and {}",
                        e.flow_id,
                        existing.dimension(),
                        qty.dimension()
                    )));
                }
                *existing = Quantity::new(existing.base_value() + scaled, existing.unit().clone())
                    .map_err(ComputeError::Unit)?;
            }
        }
    }
    Ok(out)
}

/// Aggregates scaled biosphere exchanges per flow id; linear in scaling.
pub fn aggregate_biosphere(
    models: &ModelSet,
    instances: &Instances,
    units: &UnitTable,
    overrides: &Overrides,
    runs: &BTreeMap<PartitionKey, f64>,
) -> Result<BTreeMap<String, Quantity>> {
    let mut flows: BTreeMap<String, Quantity> = BTreeMap::new();
    for (key, &s) in runs {
        let coeff = match &key.co_product {
            None => 1.0,
            Some(co) => allocation_coefficients(models, instances, units, &key.process)?
                .get(co)
                .copied()
                .unwrap_or(0.0),
        };
        let partial = process_biosphere(models, instances, units, overrides, &key.process, coeff, s)?;
        for (flow, qty) in partial {
            match flows.get_mut(&flow) {
                None => {
                    flows.insert(flow, qty);
                }
                Some(existing) => {
                    if existing.dimension() != qty.dimension() {
                        return Err(ComputeError::Dimension(format!(
                            "flow '{flow}' used with inconsistent dimensions"
                        )));
                    }
                    *existing = Quantity::new(
                        existing.base_value() + qty.base_value(),
                        existing.unit().clone(),
                    )
                    .map_err(ComputeError::Unit)?;
                }
            }
        }
    }
    Ok(flows)
}

/// Characterizes an inventory: per category, sum of flow x factor. Flows
/// without any factor are reported, never silently dropped.
pub fn characterize(
    flows: &BTreeMap<String, Quantity>,
    table: &CharacterizationTable,
) -> Result<(BTreeMap<String, Quantity>, Vec<String>)> {
    let mut impacts: BTreeMap<String, f64> = BTreeMap::new();
    let mut uncharacterized = Vec::new();
    for (flow_id, qty) in flows {
        match table.factors_for(flow_id) {
            None => uncharacterized.push(flow_id.clone()),
            Some(factors) => {
                for (category, factor) in factors {
                    check_factor_dimension(category, factor, qty)?;
                    *impacts.entry(category.clone()).or_insert(0.0) +=
                        qty.base_value() * factor.base_value();
                }
            }
        }
    }
    let impacts = impacts
        .into_iter()
        .map(|(category, v)| {
            Quantity::new(v, impact_unit(&category))
                .map_err(ComputeError::Unit)
                .map(|q| (category, q))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok((impacts, uncharacterized))
}

fn impact_unit(category: &str) -> Unit {
    Unit::base_of(Dimension::base(&format!("impact:{category}")))
}

fn check_factor_dimension(category: &str, factor: &Quantity, flow: &Quantity) -> Result<()> {
    let expected = Dimension::base(&format!("impact:{category}"));
    let got = factor.dimension().mul(flow.dimension());
    if got != expected {
        return Err(ComputeError::Dimension(format!(
            "characterization factor for ({category}) times flow dimension {} gives {}, expected {}",
            flow.dimension(),
            got,
            expected
        )));
    }
    Ok(())
}

/// Splits a multi-output process's biosphere exchanges by allocation
/// coefficient per co-product (per unit run). Summing the partitions over
/// co-products reproduces the unallocated totals.
pub fn apply_allocation(
    models: &ModelSet,
    instances: &Instances,
    units: &UnitTable,
    process_id: &ModelId,
) -> Result<BTreeMap<ModelId, BTreeMap<String, Quantity>>> {
    let coeffs = allocation_coefficients(models, instances, units, process_id)?;
    let overrides = Overrides::default();
    let mut out = BTreeMap::new();
    for (co_product, coeff) in &coeffs {
        let flows =
            process_biosphere(models, instances, units, &overrides, process_id, *coeff, 1.0)?;
        out.insert(co_product.clone(), flows);
    }
    Ok(out)
}

/// Dense direct solve with partial pivoting. Systems are desk-scale.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).expect("finite"))
            .expect("non-empty");
        if a[pivot_row][col].abs() < 1e-12 {
            return Err(ComputeError::SingularSystem);
        }
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        for row in (col + 1)..n {
            let factor = a[row][col] / a[col][col];
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in (row + 1)..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Ok(x)
}

struct EvalCtx<'a> {
    models: &'a ModelSet,
    instances: Instances,
    units: &'a UnitTable,
    table: &'a CharacterizationTable,
    overrides: &'a Overrides,
    options: &'a EvalOptions,
    runs: BTreeMap<PartitionKey, f64>,
    /// Demand routed into shortcut-overridden products, in base units.
    leaf_demand: BTreeMap<ModelId, f64>,
    cut_offs: Vec<CutOffRecord>,
    uncharacterized: BTreeSet<String>,
}

/// A process partition prepared for scaling: reference output amount and
/// allocated input shares, in base units per run.
struct Partition {
    key: PartitionKey,
    output_product: ModelId,
    output_amount: f64,
    coeff: f64,
    inputs: Vec<(ModelId, f64)>,
}

impl<'a> EvalCtx<'a> {
    fn production_dep(&self, product: &ModelId) -> Result<Option<&DependencyDecl>> {
        let m = self.models.get(product)?;
        let mut found = None;
        for dep in &m.dependencies {
            if dep.analogic || dep.role != DepRole::Production {
                continue;
            }
            if found.is_some() {
                return Err(ComputeError::AmbiguousProduction(product.clone()));
            }
            found = Some(dep);
        }
        Ok(found)
    }

    fn shortcut_dep(&self, id: &ModelId) -> Result<Option<&DependencyDecl>> {
        let m = self.models.get(id)?;
        Ok(m.dependencies
            .iter()
            .find(|d| !d.analogic && d.cut_off.is_none() && d.role == DepRole::Shortcut))
    }

    fn reference_dimension(&self, product: &ModelId) -> Result<Dimension> {
        let m = self.models.get(product)?;
        match &m.body {
            ModelBody::Product { reference_unit, .. } => {
                Ok(self.units.parse_unit(reference_unit)?.dimension)
            }
            _ => Err(ComputeError::InvalidDemand(format!("'{product}' is not a product"))),
        }
    }

    /// Partitions a process for one demanded co-product: resolves output and
    /// input exchange amounts and the allocation coefficient.
    fn partition(&self, process_id: &ModelId, co_product: &ModelId) -> Result<Partition> {
        let process = self.models.get(process_id)?;
        let env = self.instances.env(process_id);
        let ModelBody::Process { technosphere, .. } = &process.body else {
            return Err(ComputeError::InvalidDemand(format!("'{process_id}' is not a process")));
        };
        let outputs: Vec<&crate::manifest::TechnosphereExchange> = technosphere
            .iter()
            .filter(|e| e.direction == Direction::Out)
            .collect();
        let out_exchange = outputs
            .iter()
            .find(|e| &e.product_id == co_product)
            .ok_or_else(|| ComputeError::MissingOutput {
                process: process_id.clone(),
                product: co_product.clone(),
            })?;
        let out_qty = eval_in(process_id, &out_exchange.amount, &env, self.units)?;
        let expected_dim = self.reference_dimension(co_product)?;
        if out_qty.dimension() != &expected_dim {
            return Err(ComputeError::Dimension(format!(
                "output of '{process_id}' for '{co_product}' has dimension {}, product reference is {}",
                out_qty.dimension(),
                expected_dim
            )));
        }
        if out_qty.base_value() <= 0.0 {
            return Err(ComputeError::NonPositiveOutput {
                process: process_id.clone(),
                product: co_product.clone(),
            });
        }

        let (coeff, key) = if outputs.len() >= 2 {
            let coeffs =
                allocation_coefficients(self.models, &self.instances, self.units, process_id)?;
            let coeff = *coeffs.get(co_product).ok_or_else(|| ComputeError::MissingCoefficient {
                process: process_id.clone(),
                co_product: co_product.clone(),
            })?;
            (
                coeff,
                PartitionKey { process: process_id.clone(), co_product: Some(co_product.clone()) },
            )
        } else {
            (1.0, PartitionKey { process: process_id.clone(), co_product: None })
        };

        let mut inputs = Vec::new();
        for e in technosphere.iter().filter(|e| e.direction == Direction::In) {
            let dep = process
                .dependencies
                .iter()
                .find(|d| !d.analogic && d.role == DepRole::Input && d.model_id == e.product_id)
                .ok_or_else(|| ComputeError::MissingDependency {
                    process: process_id.clone(),
                    product: e.product_id.clone(),
                })?;
            if dep.cut_off.is_some() {
                continue; // recorded in collect_cut_offs, contributes zero
            }
            let qty = eval_in(process_id, &e.amount, &env, self.units)?;
            let expected = self.reference_dimension(&e.product_id)?;
            if qty.dimension() != &expected {
                return Err(ComputeError::Dimension(format!(
                    "input of '{process_id}' for '{}' has dimension {}, product reference is {}",
                    e.product_id,
                    qty.dimension(),
                    expected
                )));
            }
            inputs.push((e.product_id.clone(), qty.base_value() * coeff));
        }

        Ok(Partition {
            key,
            output_product: co_product.clone(),
            output_amount: out_qty.base_value(),
            coeff,
            inputs,
        })
    }

    fn is_impact_leaf(&self, product: &ModelId) -> bool {
        self.options.shortcut_at.contains(product)
    }

    /// Detects whether the technosphere reachable from `root` is cyclic.
    fn technosphere_cyclic(&self, root: &ModelId) -> Result<bool> {
        #[derive(Clone, Copy, PartialEq)]
        enum State {
            Open,
            Done,
        }
        let mut state: BTreeMap<ModelId, State> = BTreeMap::new();
        let mut stack: Vec<(ModelId, bool)> = vec![(root.clone(), false)];
        while let Some((product, finished)) = stack.pop() {
            if finished {
                state.insert(product, State::Done);
                continue;
            }
            match state.get(&product) {
                Some(State::Done) => continue,
                Some(State::Open) => return Ok(true),
                None => {}
            }
            if self.is_impact_leaf(&product) {
                state.insert(product, State::Done);
                continue;
            }
            let Some(dep) = self.production_dep(&product)? else {
                state.insert(product, State::Done);
                continue;
            };
            if dep.cut_off.is_some() {
                state.insert(product, State::Done);
                continue;
            }
            let process_id = dep.model_id.clone();
            state.insert(product.clone(), State::Open);
            stack.push((product.clone(), true));
            let process = self.models.get(&process_id)?;
            if let ModelBody::Process { technosphere, .. } = &process.body {
                for e in technosphere.iter().filter(|e| e.direction == Direction::In) {
                    let cut = process.dependencies.iter().any(|d| {
                        !d.analogic
                            && d.role == DepRole::Input
                            && d.model_id == e.product_id
                            && d.cut_off.is_some()
                    });
                    if cut {
                        continue;
                    }
                    match state.get(&e.product_id) {
                        Some(State::Open) => return Ok(true),
                        Some(State::Done) => {}
                        None => stack.push((e.product_id.clone(), false)),
                    }
                }
            }
        }
        Ok(false)
    }

    /// Registers every cut-off dependency reachable from the root closure.
    fn collect_cut_offs(&mut self, root: &ModelId) -> Result<()> {
        let mut queue = vec![root.clone()];
        let mut seen = BTreeSet::new();
        while let Some(id) = queue.pop() {
            if !seen.insert(id.clone()) {
                continue;
            }
            let m = self.models.get(&id)?.clone();
            for dep in &m.dependencies {
                if dep.analogic {
                    continue;
                }
                if let Some(justification) = &dep.cut_off {
                    self.cut_offs.push(CutOffRecord {
                        model_id: id.to_string(),
                        dependency: dep.model_id.to_string(),
                        justification: justification.clone(),
                    });
                    continue;
                }
                if self.models.contains(&dep.model_id) {
                    queue.push(dep.model_id.clone());
                }
            }
        }
        self.cut_offs
            .sort_by(|a, b| (&a.model_id, &a.dependency).cmp(&(&b.model_id, &b.dependency)));
        Ok(())
    }

    /// Top-down tree scaling for an acyclic technosphere. Returns the
    /// path-nested contribution node for this demand.
    fn expand_tree(&mut self, product: &ModelId, amount_base: f64) -> Result<ContributionNode> {
        let mut node = ContributionNode::empty(product.to_string());
        if self.is_impact_leaf(product) {
            *self.leaf_demand.entry(product.clone()).or_insert(0.0) += amount_base;
            node.direct = self.shortcut_impacts(product, amount_base)?;
            return Ok(node);
        }
        let Some(dep) = self.production_dep(product)?.cloned() else {
            return Err(ComputeError::NoProduction(product.clone()));
        };
        if dep.cut_off.is_some() {
            return Ok(node);
        }
        let process_id = dep.model_id.clone();
        let partition = self.partition(&process_id, product)?;
        let runs = amount_base / partition.output_amount;
        *self.runs.entry(partition.key.clone()).or_insert(0.0) += runs;

        let mut process_node = ContributionNode::empty(partition.key.label());
        process_node.direct = self.direct_impacts(&process_id, partition.coeff, runs)?;
        for (input_product, input_amount) in &partition.inputs {
            let child = self.expand_tree(input_product, input_amount * runs)?;
            process_node.children.push(child);
        }
        node.children.push(process_node);
        Ok(node)
    }

    /// Matrix scaling for a cyclic technosphere: builds the square system
    /// A s = f over product rows and partition columns.
    fn expand_matrix(&mut self, root: &ModelId, demand_base: f64) -> Result<ContributionNode> {
        let mut partitions: BTreeMap<PartitionKey, Partition> = BTreeMap::new();
        let mut products: BTreeSet<ModelId> = BTreeSet::new();
        let mut leaves: BTreeSet<ModelId> = BTreeSet::new();
        let mut queue = vec![root.clone()];
        let mut visited = BTreeSet::new();
        while let Some(product) = queue.pop() {
            if !visited.insert(product.clone()) {
                continue;
            }
            if self.is_impact_leaf(&product) {
                leaves.insert(product);
                continue;
            }
            let Some(dep) = self.production_dep(&product)?.cloned() else {
                return Err(ComputeError::NoProduction(product.clone()));
            };
            if dep.cut_off.is_some() {
                continue;
            }
            products.insert(product.clone());
            let partition = self.partition(&dep.model_id, &product)?;
            for (input, _) in &partition.inputs {
                queue.push(input.clone());
            }
            partitions.insert(partition.key.clone(), partition);
        }

        let product_rows: Vec<ModelId> = products.iter().cloned().collect();
        let row_of: BTreeMap<&ModelId, usize> =
            product_rows.iter().enumerate().map(|(i, p)| (p, i)).collect();
        let cols: Vec<&Partition> = partitions.values().collect();
        if product_rows.len() != cols.len() {
            return Err(ComputeError::NonSquare {
                products: product_rows.len(),
                processes: cols.len(),
            });
        }
        let n = cols.len();
        let mut a = vec![vec![0.0f64; n]; n];
        let mut f = vec![0.0f64; n];
        for (j, part) in cols.iter().enumerate() {
            a[row_of[&part.output_product]][j] += part.output_amount;
            for (input, amount) in &part.inputs {
                if let Some(&i) = row_of.get(input) {
                    a[i][j] -= amount;
                }
            }
        }
        let root_row = row_of
            .get(root)
            .copied()
            .ok_or_else(|| ComputeError::NoProduction(root.clone()))?;
        f[root_row] = demand_base;
        let s = solve_dense(a, f)?;

        let mut flat = ContributionNode::empty(root.to_string());
        for (j, part) in cols.iter().enumerate() {
            self.runs.insert(part.key.clone(), s[j]);
            for (input, amount) in &part.inputs {
                if leaves.contains(input) {
                    *self.leaf_demand.entry(input.clone()).or_insert(0.0) += amount * s[j];
                }
            }
            let mut node = ContributionNode::empty(part.key.label());
            node.direct = self.direct_impacts(&part.key.process, part.coeff, s[j])?;
            flat.children.push(node);
        }
        for leaf in &leaves {
            let demanded = self.leaf_demand.get(leaf).copied().unwrap_or(0.0);
            let mut node = ContributionNode::empty(leaf.to_string());
            node.direct = self.shortcut_impacts(leaf, demanded)?;
            flat.children.push(node);
        }
        flat.children.sort_by(|a, b| a.node.cmp(&b.node));
        Ok(flat)
    }

    /// Characterized direct impacts of one process partition at `runs`.
    fn direct_impacts(
        &mut self,
        process_id: &ModelId,
        coeff: f64,
        runs: f64,
    ) -> Result<BTreeMap<String, f64>> {
        let flows = process_biosphere(
            self.models,
            &self.instances,
            self.units,
            self.overrides,
            process_id,
            coeff,
            runs,
        )?;
        let mut out = BTreeMap::new();
        for (flow_id, qty) in &flows {
            match self.table.factors_for(flow_id) {
                None => {
                    self.uncharacterized.insert(flow_id.clone());
                }
                Some(factors) => {
                    for (category, factor) in factors {
                        check_factor_dimension(category, factor, qty)?;
                        *out.entry(category.clone()).or_insert(0.0) +=
                            qty.base_value() * factor.base_value();
                    }
                }
            }
        }
        Ok(out)
    }

    /// Impacts of a product through its midpoint impact model, per
    /// `amount_base` of its reference flow.
    fn shortcut_impacts(
        &self,
        product: &ModelId,
        amount_base: f64,
    ) -> Result<BTreeMap<String, f64>> {
        let dep = self
            .shortcut_dep(product)?
            .cloned()
            .ok_or_else(|| ComputeError::MissingShortcut(product.clone()))?;
        let impact_model = self.models.get(&dep.model_id)?;
        let ModelBody::MidpointImpactModel { impacts, .. } = &impact_model.body else {
            return Err(ComputeError::MissingShortcut(product.clone()));
        };
        let parent_env = self.instances.env(product);
        let env = attached_env(self.models, self.units, product, &parent_env, &dep)?;
        let mut out = BTreeMap::new();
        for (category, expr) in impacts {
            let q = eval_in(&dep.model_id, expr, &env, self.units)?;
            let expected = Dimension::base(&format!("impact:{category}"));
            if q.dimension() != &expected {
                return Err(ComputeError::Dimension(format!(
                    "impact expression for '{category}' in '{}' has dimension {}, expected {}",
                    dep.model_id,
                    q.dimension(),
                    expected
                )));
            }
            out.insert(category.clone(), q.base_value() * amount_base);
        }
        Ok(out)
    }
}

/// Scales the technosphere for a demand: tree scaling when acyclic, the
/// linear system otherwise. Exposed for the dual-route agreement checks.
pub fn scale_processes(
    models: &ModelSet,
    demand: &DemandSpec,
    units: &UnitTable,
    options: &EvalOptions,
) -> Result<BTreeMap<String, f64>> {
    let empty = CharacterizationTable {
        table_id: String::new(),
        version: String::new(),
        factors: BTreeMap::new(),
    };
    let result = evaluate_models(
        models,
        demand,
        EvaluationStrategy::Expand,
        &empty,
        units,
        options,
        &Overrides::default(),
    )?;
    Ok(result.inventory.scaling)
}

/// Full evaluation of a lockfile-backed model set.
pub fn evaluate(
    lock: &Lockfile,
    registry: &Registry,
    demand: &DemandSpec,
    strategy: EvaluationStrategy,
    table: &CharacterizationTable,
    units: &UnitTable,
    options: &EvalOptions,
) -> Result<ImpactResult> {
    let models = ModelSet::from_lockfile(lock, registry)?;
    evaluate_models(&models, demand, strategy, table, units, options, &Overrides::default())
}

/// Evaluation against an in-memory model set, with override injection for
/// Monte Carlo sampling.
pub fn evaluate_models(
    models: &ModelSet,
    demand: &DemandSpec,
    strategy: EvaluationStrategy,
    table: &CharacterizationTable,
    units: &UnitTable,
    options: &EvalOptions,
    overrides: &Overrides,
) -> Result<ImpactResult> {
    match strategy {
        EvaluationStrategy::Shortcut => {
            let mut opts = options.clone();
            opts.shortcut_at.insert(demand.root_product.clone());
            run_eval(models, demand, EvaluationStrategy::Shortcut, table, units, &opts, overrides)
        }
        EvaluationStrategy::Expand => {
            run_eval(models, demand, EvaluationStrategy::Expand, table, units, options, overrides)
        }
        EvaluationStrategy::Compare => {
            let expanded =
                run_eval(models, demand, EvaluationStrategy::Expand, table, units, options, overrides)?;
            let mut opts = options.clone();
            opts.shortcut_at.insert(demand.root_product.clone());
            let shortcut = run_eval(
                models,
                demand,
                EvaluationStrategy::Shortcut,
                table,
                units,
                &opts,
                overrides,
            )?;
            let mut deviation = BTreeMap::new();
            let categories: BTreeSet<&String> =
                expanded.impacts.keys().chain(shortcut.impacts.keys()).collect();
            for category in categories {
                let e = expanded.impacts.get(category).map(|q| q.base_value()).unwrap_or(0.0);
                let s = shortcut.impacts.get(category).map(|q| q.base_value()).unwrap_or(0.0);
                let relative = if e != 0.0 {
                    Some(((s - e) / e).abs())
                } else if s == 0.0 {
                    Some(0.0)
                } else {
                    None
                };
                deviation
                    .insert(category.clone(), DeviationEntry { shortcut: s, expanded: e, relative });
            }
            Ok(ImpactResult {
                strategy: EvaluationStrategy::Compare,
                deviation: Some(deviation),
                ..expanded
            })
        }
    }
}

fn run_eval(
    models: &ModelSet,
    demand: &DemandSpec,
    strategy: EvaluationStrategy,
    table: &CharacterizationTable,
    units: &UnitTable,
    options: &EvalOptions,
    overrides: &Overrides,
) -> Result<ImpactResult> {
    let instances = resolve_instances(models, &demand.root_product, units, overrides)?;
    let mut ctx = EvalCtx {
        models,
        instances,
        units,
        table,
        overrides,
        options,
        runs: BTreeMap::new(),
        leaf_demand: BTreeMap::new(),
        cut_offs: Vec::new(),
        uncharacterized: BTreeSet::new(),
    };

    let ref_dim = ctx.reference_dimension(&demand.root_product)?;
    if demand.amount.dimension() != &ref_dim {
        return Err(ComputeError::InvalidDemand(format!(
            "demand dimension {} does not match reference flow dimension {} of '{}'",
            demand.amount.dimension(),
            ref_dim,
            demand.root_product
        )));
    }
    let demand_base = demand.amount.base_value();

    ctx.collect_cut_offs(&demand.root_product)?;
    let contributions = if ctx.technosphere_cyclic(&demand.root_product)? {
        ctx.expand_matrix(&demand.root_product, demand_base)?
    } else {
        ctx.expand_tree(&demand.root_product, demand_base)?
    };

    let flows =
        aggregate_biosphere(models, &ctx.instances, units, overrides, &ctx.runs)?;
    let (mut impacts, mut uncharacterized) = characterize(&flows, table)?;
    for flow in &ctx.uncharacterized {
        if !uncharacterized.contains(flow) {
            uncharacterized.push(flow.clone());
        }
    }
    uncharacterized.sort();

    // Shortcut leaves contribute impacts without inventory flows.
    for (leaf, demanded) in ctx.leaf_demand.clone() {
        let leaf_impacts = ctx.shortcut_impacts(&leaf, demanded)?;
        for (category, v) in leaf_impacts {
            match impacts.get_mut(&category) {
                None => {
                    impacts.insert(
                        category.clone(),
                        Quantity::new(v, impact_unit(&category)).map_err(ComputeError::Unit)?,
                    );
                }
                Some(q) => {
                    *q = Quantity::new(q.base_value() + v, q.unit().clone())
                        .map_err(ComputeError::Unit)?;
                }
            }
        }
    }

    let scaling: BTreeMap<String, f64> = ctx.runs.iter().map(|(k, &v)| (k.label(), v)).collect();
    Ok(ImpactResult {
        strategy,
        impacts,
        uncharacterized,
        cut_offs: ctx.cut_offs,
        inventory: InventoryResult { flows, scaling },
        contributions,
        deviation: None,
    })
}
