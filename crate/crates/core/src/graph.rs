//! Typed dependency graph over pinned (id, version, hash) nodes, with
//! lineage, cycle, support-level, and invalidation-propagation queries.
//!
//! Edges point from a dependent model to the model it relies on, so
//! `ancestors` follows edges forward (what a node is built on) and
//! `descendants` follows them backward (what would be affected by it).
//!
//! Analogy links are claims, not computation paths: by default they carry
//! neither taint nor support. A strict mode makes them transmit taint.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::manifest::{self, ContentHash, DepRole, EvidenceLevel, ModelId, ModelKind};
use crate::registry::{Advisory, AdvisorySeverity, Lockfile, Registry, RegistryError};
use crate::version::Version;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("stored manifest for {id}@{version} does not match its pinned hash (pinned {pinned}, stored {stored})")]
    HashMismatch {
        id: ModelId,
        version: Version,
        pinned: ContentHash,
        stored: ContentHash,
    },
    #[error("not found: {0}")]
    NotFound(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct NodeKey {
    pub model_id: ModelId,
    pub version: Version,
}

impl fmt::Display for NodeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.model_id, self.version)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GraphNode {
    pub key: NodeKey,
    pub hash: ContentHash,
    pub kind: ModelKind,
    /// The node's own best evidence level (not yet folded over ancestors).
    pub evidence: EvidenceLevel,
}

#[derive(Debug, Clone, Serialize)]
pub struct GraphEdge {
    pub from: usize,
    pub to: usize,
    pub role: DepRole,
    pub analogic: bool,
    pub has_bindings: bool,
}

/// Weakest-link support level; identical lattice to evidence levels.
pub type SupportLevel = EvidenceLevel;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum TaintStatus {
    Clean,
    Tainted {
        severity: AdvisorySeverity,
        /// Advisory ids matched at the path's seed node.
        advisory_ids: Vec<String>,
        /// Causal path from the advisory-matched node to this node.
        path: Vec<NodeKey>,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct TaintReport {
    /// Status per node index, aligned with the graph's node list.
    pub status: Vec<TaintStatus>,
}

impl TaintReport {
    pub fn tainted(&self) -> impl Iterator<Item = (usize, &TaintStatus)> {
        self.status
            .iter()
            .enumerate()
            .filter(|(_, s)| !matches!(s, TaintStatus::Clean))
    }

    pub fn max_severity(&self) -> Option<AdvisorySeverity> {
        self.status
            .iter()
            .filter_map(|s| match s {
                TaintStatus::Tainted { severity, .. } => Some(*severity),
                TaintStatus::Clean => None,
            })
            .max()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SccSummary {
    pub members: Vec<NodeKey>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CycleReport {
    /// Elementary cycles as node-key sequences (first node repeated
    /// implicitly). Enumeration is capped; see `truncated`.
    pub cycles: Vec<Vec<NodeKey>>,
    pub truncated: bool,
    pub total_found: usize,
    /// Non-trivial strongly connected components, as a summary when the
    /// cycle list is capped.
    pub sccs: Vec<SccSummary>,
}

const MAX_CYCLES: usize = 1000;

#[derive(Debug, Clone)]
pub struct DepGraph {
    nodes: Vec<GraphNode>,
    edges: Vec<GraphEdge>,
    out: Vec<Vec<usize>>,
    incoming: Vec<Vec<usize>>,
    by_id: BTreeMap<ModelId, usize>,
}

impl DepGraph {
    /// Builds the pinned closure from a lockfile, verifying every stored
    /// manifest against its pinned hash (tamper detection).
    pub fn build(lock: &Lockfile, registry: &Registry) -> Result<DepGraph, GraphError> {
        let mut manifests = BTreeMap::new();
        let mut nodes = Vec::new();
        for pin in &lock.pins {
            let (m, _) = registry.get(&pin.model_id, pin.version)?;
            let stored = manifest::hash(&m);
            if stored != pin.hash {
                return Err(GraphError::HashMismatch {
                    id: pin.model_id.clone(),
                    version: pin.version,
                    pinned: pin.hash,
                    stored,
                });
            }
            nodes.push(GraphNode {
                key: NodeKey { model_id: pin.model_id.clone(), version: pin.version },
                hash: pin.hash,
                kind: m.kind,
                evidence: m.own_evidence_level(),
            });
            manifests.insert(pin.model_id.clone(), m);
        }
        nodes.sort_by(|a, b| a.key.cmp(&b.key));
        let by_id: BTreeMap<ModelId, usize> = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.key.model_id.clone(), i))
            .collect();

        let mut edges = Vec::new();
        let mut seen = BTreeSet::new();
        for node in &nodes {
            let m = &manifests[&node.key.model_id];
            let from = by_id[&node.key.model_id];
            for dep in &m.dependencies {
                if dep.cut_off.is_some() {
                    continue;
                }
                let Some(&to) = by_id.get(&dep.model_id) else {
                    return Err(GraphError::NotFound(format!(
                        "dependency '{}' of {} is not pinned in the lockfile",
                        dep.model_id, node.key
                    )));
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
        Ok(DepGraph::from_parts(nodes, edges))
    }

    /// Assembles a graph from already-checked parts. Used by tests and by
    /// callers that stage manifests outside a registry.
    pub fn from_parts(nodes: Vec<GraphNode>, edges: Vec<GraphEdge>) -> DepGraph {
        let mut out = vec![Vec::new(); nodes.len()];
        let mut incoming = vec![Vec::new(); nodes.len()];
        for (i, e) in edges.iter().enumerate() {
            out[e.from].push(i);
            incoming[e.to].push(i);
        }
        let by_id = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.key.model_id.clone(), i))
            .collect();
        DepGraph { nodes, edges, out, incoming, by_id }
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[GraphEdge] {
        &self.edges
    }

    pub fn node_index(&self, id: &ModelId) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    /// Transitive closure of what `node` relies on, analogy links included.
    pub fn ancestors(&self, node: usize) -> BTreeSet<usize> {
        self.reach(node, true, |e| true_edge(e))
    }

    /// Transitive closure of what relies on `node`, analogy links included.
    pub fn descendants(&self, node: usize) -> BTreeSet<usize> {
        self.reach(node, false, |e| true_edge(e))
    }

    fn reach<F: Fn(&GraphEdge) -> bool>(
        &self,
        start: usize,
        forward: bool,
        admit: F,
    ) -> BTreeSet<usize> {
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([start]);
        while let Some(n) = queue.pop_front() {
            let edge_ids = if forward { &self.out[n] } else { &self.incoming[n] };
            for &ei in edge_ids {
                let e = &self.edges[ei];
                if !admit(e) {
                    continue;
                }
                let next = if forward { e.to } else { e.from };
                if seen.insert(next) {
                    queue.push_back(next);
                }
            }
        }
        seen.remove(&start);
        seen
    }

    /// Reports every elementary cycle (up to a cap) plus an SCC summary.
    /// With `include_analogic`, analogy edges participate; such cycles can
    /// reveal mutually-justifying validation claims.
    pub fn detect_cycles(&self, include_analogic: bool) -> CycleReport {
        let admit = |e: &GraphEdge| include_analogic || !e.analogic;
        let n = self.nodes.len();
        let adj: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                let mut targets: Vec<usize> = self.out[i]
                    .iter()
                    .map(|&ei| &self.edges[ei])
                    .filter(|e| admit(e))
                    .map(|e| e.to)
                    .collect();
                targets.sort_unstable();
                targets.dedup();
                targets
            })
            .collect();

        let mut cycles: Vec<Vec<usize>> = Vec::new();
        let mut total_found = 0usize;
        let mut exhausted = false;
        // Johnson-style enumeration: for each start node s (ascending),
        // search only among nodes >= s so each elementary cycle is reported
        // exactly once, rooted at its smallest node.
        for start in 0..n {
            let mut path = vec![start];
            let mut on_path = vec![false; n];
            on_path[start] = true;
            enumerate_from(
                start,
                start,
                &adj,
                &mut path,
                &mut on_path,
                &mut cycles,
                &mut total_found,
                &mut exhausted,
            );
        }

        let sccs = self.sccs(&adj);
        CycleReport {
            truncated: exhausted,
            total_found,
            cycles: cycles
                .into_iter()
                .map(|c| c.into_iter().map(|i| self.nodes[i].key.clone()).collect())
                .collect(),
            sccs: sccs
                .into_iter()
                .map(|members| SccSummary {
                    members: members.into_iter().map(|i| self.nodes[i].key.clone()).collect(),
                })
                .collect(),
        }
    }

    /// Non-trivial SCCs (size >= 2 or a self-loop), members sorted.
    fn sccs(&self, adj: &[Vec<usize>]) -> Vec<Vec<usize>> {
        let n = adj.len();
        let mut index = vec![usize::MAX; n];
        let mut low = vec![0usize; n];
        let mut on_stack = vec![false; n];
        let mut stack = Vec::new();
        let mut counter = 0usize;
        let mut out = Vec::new();

        // Iterative Tarjan to avoid recursion depth limits.
        enum Frame {
            Enter(usize),
            Resume(usize, usize),
        }
        for root in 0..n {
            if index[root] != usize::MAX {
                continue;
            }
            let mut frames = vec![Frame::Enter(root)];
            while let Some(frame) = frames.pop() {
                match frame {
                    Frame::Enter(v) => {
                        index[v] = counter;
                        low[v] = counter;
                        counter += 1;
                        stack.push(v);
                        on_stack[v] = true;
                        frames.push(Frame::Resume(v, 0));
                    }
                    Frame::Resume(v, mut i) => {
                        let mut descended = false;
                        while i < adj[v].len() {
                            let w = adj[v][i];
                            i += 1;
                            if index[w] == usize::MAX {
                                frames.push(Frame::Resume(v, i));
                                frames.push(Frame::Enter(w));
                                descended = true;
                                break;
                            } else if on_stack[w] {
                                low[v] = low[v].min(index[w]);
                            }
                        }
                        if descended {
                            continue;
                        }
                        if low[v] == index[v] {
                            let mut comp = Vec::new();
                            loop {
                                let w = stack.pop().expect("non-empty tarjan stack");
                                on_stack[w] = false;
                                comp.push(w);
                                if w == v {
                                    break;
                                }
                            }
                            let trivial =
                                comp.len() == 1 && !adj[comp[0]].contains(&comp[0]);
                            if !trivial {
                                comp.sort_unstable();
                                out.push(comp);
                            }
                        } else if let Some(Frame::Resume(parent, _)) = frames.last() {
                            low[*parent] = low[*parent].min(low[v]);
                        }
                    }
                }
            }
        }
        out.sort();
        out
    }

    /// Propagates advisory invalidation to every dependent. A node is
    /// tainted iff it matches an active advisory or any node it relies on
    /// through non-analogic edges is tainted; severity is the maximum along
    /// causal paths. `strict_analogic` additionally lets analogy edges
    /// transmit taint.
    pub fn propagate_taint(&self, advisories: &[Advisory], strict_analogic: bool) -> TaintReport {
        let admit = |e: &GraphEdge| strict_analogic || !e.analogic;
        let mut status = vec![TaintStatus::Clean; self.nodes.len()];

        // Seeds grouped by severity so stronger taints win deterministically.
        let mut seeds_by_severity: BTreeMap<AdvisorySeverity, BTreeMap<usize, Vec<String>>> =
            BTreeMap::new();
        for a in advisories {
            if !a.is_active() {
                continue;
            }
            for (i, node) in self.nodes.iter().enumerate() {
                if a.matches(&node.key.model_id, node.key.version) {
                    seeds_by_severity
                        .entry(a.severity)
                        .or_default()
                        .entry(i)
                        .or_default()
                        .push(a.advisory_id.clone());
                }
            }
        }

        for (&severity, seeds) in seeds_by_severity.iter().rev() {
            // Multi-source BFS over reverse edges (to dependents).
            let mut pred: BTreeMap<usize, usize> = BTreeMap::new();
            let mut origin: BTreeMap<usize, usize> = BTreeMap::new();
            let mut queue = VecDeque::new();
            for (&seed, _) in seeds {
                if matches!(status[seed], TaintStatus::Clean) {
                    origin.insert(seed, seed);
                    queue.push_back(seed);
                }
            }
            let mut visited: BTreeSet<usize> = queue.iter().copied().collect();
            while let Some(v) = queue.pop_front() {
                for &ei in &self.incoming[v] {
                    let e = &self.edges[ei];
                    if !admit(e) {
                        continue;
                    }
                    let dependent = e.from;
                    if visited.insert(dependent) && matches!(status[dependent], TaintStatus::Clean)
                    {
                        pred.insert(dependent, v);
                        origin.insert(dependent, origin[&v]);
                        queue.push_back(dependent);
                    }
                }
            }
            for &v in &visited {
                if !matches!(status[v], TaintStatus::Clean) {
                    continue;
                }
                let seed = origin[&v];
                let mut path = Vec::new();
                let mut cur = v;
                path.push(self.nodes[cur].key.clone());
                while cur != seed {
                    cur = pred[&cur];
                    path.push(self.nodes[cur].key.clone());
                }
                path.reverse();
                status[v] = TaintStatus::Tainted {
                    severity,
                    advisory_ids: seeds[&seed].clone(),
                    path,
                };
            }
        }
        TaintReport { status }
    }

    /// Weakest evidence over the node itself and everything it relies on
    /// through non-analogic edges.
    pub fn support_level(&self, node: usize) -> SupportLevel {
        let mut level = self.nodes[node].evidence;
        for i in self.reach(node, true, |e| !e.analogic) {
            level = level.min(self.nodes[i].evidence);
        }
        level
    }
}

fn true_edge(_e: &GraphEdge) -> bool {
    true
}

fn enumerate_from(
    start: usize,
    current: usize,
    adj: &[Vec<usize>],
    path: &mut Vec<usize>,
    on_path: &mut [bool],
    cycles: &mut Vec<Vec<usize>>,
    total_found: &mut usize,
) {
    for &next in &adj[current] {
        if next < start {
            continue;
        }
        if next == start {
            *total_found += 1;
            if cycles.len() < MAX_CYCLES {
                cycles.push(path.clone());
            }
            continue;
        }
        if on_path[next] {
            continue;
        }
        if *total_found >= MAX_CYCLES {
            // Keep counting would be exponential; the SCC summary covers
            // the remainder once the cap is hit.
            continue;
        }
        on_path[next] = true;
        path.push(next);
        enumerate_from(start, next, adj, path, on_path, cycles, total_found);
        path.pop();
        on_path[next] = false;
    }
}
