//! Graph queries checked against brute-force oracles on random instances.

use std::collections::BTreeSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lcaforge_core::graph::{DepGraph, GraphEdge, GraphNode, NodeKey, TaintStatus};
use lcaforge_core::manifest::{ContentHash, DepRole, EvidenceLevel, ModelKind};
use lcaforge_core::registry::{Advisory, AdvisorySeverity};

fn node(i: usize, evidence: EvidenceLevel) -> GraphNode {
    GraphNode {
        key: NodeKey {
            model_id: format!("n{i:03}").parse().unwrap(),
            version: "1.0.0".parse().unwrap(),
        },
        hash: ContentHash([0u8; 32]),
        kind: ModelKind::Product,
        evidence,
    }
}

fn edge(from: usize, to: usize) -> GraphEdge {
    GraphEdge { from, to, role: DepRole::Component, analogic: false, has_bindings: false }
}

/// Random DAG: edges only from lower to higher indices.
fn random_dag(rng: &mut ChaCha8Rng, n: usize, density: f64) -> (Vec<GraphNode>, Vec<GraphEdge>) {
    let levels = [EvidenceLevel::Conjectural, EvidenceLevel::Calibrated, EvidenceLevel::Measured];
    let nodes: Vec<GraphNode> = (0..n)
        .map(|i| node(i, levels[rng.gen_range(0..3)]))
        .collect();
    let mut edges = Vec::new();
    for from in 0..n {
        for to in (from + 1)..n {
            if rng.gen_bool(density) {
                edges.push(edge(from, to));
            }
        }
    }
    (nodes, edges)
}

/// Transitive closure by repeated squaring of the adjacency relation; the
/// independent oracle for every reachability-flavored query.
fn closure(n: usize, edges: &[GraphEdge]) -> Vec<Vec<bool>> {
    let mut reach = vec![vec![false; n]; n];
    for e in edges {
        reach[e.from][e.to] = true;
    }
    for k in 0..n {
        for i in 0..n {
            if reach[i][k] {
                for j in 0..n {
                    if reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
    }
    reach
}

#[test]
fn ancestors_and_descendants_match_reachability_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..25 {
        let n = rng.gen_range(2..=50);
        let (nodes, edges) = random_dag(&mut rng, n, 0.12);
        let reach = closure(n, &edges);
        let g = DepGraph::from_parts(nodes, edges);
        for i in 0..n {
            let expected_anc: BTreeSet<usize> = (0..n).filter(|&j| reach[i][j]).collect();
            let expected_desc: BTreeSet<usize> = (0..n).filter(|&j| reach[j][i]).collect();
            assert_eq!(g.ancestors(i), expected_anc, "ancestors of {i}");
            assert_eq!(g.descendants(i), expected_desc, "descendants of {i}");
        }
    }
}

#[test]
fn ancestors_descendants_are_mutually_consistent() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (nodes, edges) = random_dag(&mut rng, 30, 0.15);
    let g = DepGraph::from_parts(nodes, edges);
    for a in 0..30 {
        for &b in &g.ancestors(a) {
            assert!(g.descendants(b).contains(&a));
        }
    }
}

fn advisory_on(i: usize, severity: AdvisorySeverity) -> Advisory {
    Advisory {
        advisory_id: format!("LCA-2025-{i:04}"),
        model_id: format!("n{i:03}").parse().unwrap(),
        affected: "^1.0.0".parse().unwrap(),
        severity,
        reason: "planted".to_string(),
        published_at: "2025-01-01T00:00:00Z".to_string(),
        superseded_by: None,
    }
}

#[test]
fn taint_matches_brute_force_reachability_on_random_dags() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let n = rng.gen_range(2..=50);
        let (nodes, edges) = random_dag(&mut rng, n, 0.1);
        let reach = closure(n, &edges);
        let seed_count = rng.gen_range(1..=3.min(n));
        let seeds: Vec<usize> = (0..seed_count).map(|_| rng.gen_range(0..n)).collect();
        let advisories: Vec<Advisory> = seeds
            .iter()
            .map(|&s| advisory_on(s, AdvisorySeverity::Invalidated))
            .collect();

        let expected: BTreeSet<usize> = (0..n)
            .filter(|&i| seeds.iter().any(|&s| i == s || reach[i][s]))
            .collect();

        let g = DepGraph::from_parts(nodes, edges);
        let report = g.propagate_taint(&advisories, false);
        let tainted: BTreeSet<usize> = report.tainted().map(|(i, _)| i).collect();
        assert_eq!(tainted, expected);
    }
}

#[test]
fn taint_is_monotone_in_advisories() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (nodes, edges) = random_dag(&mut rng, 30, 0.12);
    let g = DepGraph::from_parts(nodes, edges);
    let first = vec![advisory_on(10, AdvisorySeverity::Warning)];
    let mut second = first.clone();
    second.push(advisory_on(20, AdvisorySeverity::Invalidated));
    let before: BTreeSet<usize> = g.propagate_taint(&first, false).tainted().map(|(i, _)| i).collect();
    let after: BTreeSet<usize> = g.propagate_taint(&second, false).tainted().map(|(i, _)| i).collect();
    assert!(before.is_subset(&after));
}

#[test]
fn taint_severity_is_max_along_paths() {
    // 0 -> 1 -> 2, advisory Warning on 1 and Invalidated on 2.
    let nodes = vec![
        node(0, EvidenceLevel::Measured),
        node(1, EvidenceLevel::Measured),
        node(2, EvidenceLevel::Measured),
    ];
    let g = DepGraph::from_parts(nodes, vec![edge(0, 1), edge(1, 2)]);
    let advisories = vec![
        advisory_on(1, AdvisorySeverity::Warning),
        advisory_on(2, AdvisorySeverity::Invalidated),
    ];
    let report = g.propagate_taint(&advisories, false);
    for i in 0..3 {
        match &report.status[i] {
            TaintStatus::Tainted { severity, .. } => {
                assert_eq!(*severity, AdvisorySeverity::Invalidated, "node {i}");
            }
            TaintStatus::Clean => panic!("node {i} should be tainted"),
        }
    }
}

#[test]
fn every_tainted_node_has_a_causal_path_to_a_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (nodes, edges) = random_dag(&mut rng, 40, 0.1);
    let g = DepGraph::from_parts(nodes, edges);
    let advisories = vec![advisory_on(35, AdvisorySeverity::Invalidated)];
    let report = g.propagate_taint(&advisories, false);
    for (_, status) in report.tainted() {
        let TaintStatus::Tainted { path, advisory_ids, .. } = status else { unreachable!() };
        assert!(!path.is_empty());
        assert_eq!(path[0].model_id.as_str(), "n035");
        assert_eq!(advisory_ids, &vec!["LCA-2025-0035".to_string()]);
    }
}

/// Exhaustive min-over-paths oracle for support levels.
fn support_oracle(n: usize, edges: &[GraphEdge], nodes: &[GraphNode]) -> Vec<EvidenceLevel> {
    let reach = closure(n, edges);
    (0..n)
        .map(|i| {
            let mut level = nodes[i].evidence;
            for j in 0..n {
                if reach[i][j] && !edges.iter().any(|e| e.analogic && involved(e, i, j)) {
                    level = level.min(nodes[j].evidence);
                }
            }
            level
        })
        .collect()
}

fn involved(_e: &GraphEdge, _i: usize, _j: usize) -> bool {
    false // generated DAGs here carry no analogy edges
}

#[test]
fn support_level_matches_exhaustive_walk_on_random_trees() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let n = rng.gen_range(2..=30);
        // Random forest: each node points to at most one later node, which
        // keeps paths enumerable by eye.
        let levels =
            [EvidenceLevel::Conjectural, EvidenceLevel::Calibrated, EvidenceLevel::Measured];
        let nodes: Vec<GraphNode> = (0..n)
            .map(|i| node(i, levels[rng.gen_range(0..3)]))
            .collect();
        let mut edges = Vec::new();
        for from in 0..n.saturating_sub(1) {
            if rng.gen_bool(0.8) {
                let to = rng.gen_range(from + 1..n);
                edges.push(edge(from, to));
            }
        }
        let expected = support_oracle(n, &edges, &nodes);
        let g = DepGraph::from_parts(nodes, edges);
        for (i, want) in expected.iter().enumerate() {
            assert_eq!(g.support_level(i), *want, "node {i}");
        }
    }
}

#[test]
fn support_level_is_antitone_under_edge_addition() {
    let nodes = vec![
        node(0, EvidenceLevel::Measured),
        node(1, EvidenceLevel::Measured),
        node(2, EvidenceLevel::Conjectural),
    ];
    let before = DepGraph::from_parts(nodes.clone(), vec![edge(0, 1)]);
    let after = DepGraph::from_parts(nodes, vec![edge(0, 1), edge(0, 2)]);
    assert!(after.support_level(0) <= before.support_level(0));
}

#[test]
fn planted_cycles_are_always_detected() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let n = rng.gen_range(3..=20);
        let (nodes, mut edges) = random_dag(&mut rng, n, 0.1);
        // Plant one cycle over a random subset of >= 2 nodes.
        let len = rng.gen_range(2..=n.min(5));
        let mut members: Vec<usize> = (0..n).collect();
        while members.len() > len {
            let k = rng.gen_range(0..members.len());
            members.swap_remove(k);
        }
        members.sort_unstable();
        for w in 0..members.len() {
            edges.push(edge(members[w], members[(w + 1) % members.len()]));
        }
        let g = DepGraph::from_parts(nodes, edges);
        let report = g.detect_cycles(true);
        assert!(
            !report.cycles.is_empty(),
            "planted cycle over {members:?} must be found"
        );
        assert!(!report.sccs.is_empty());
    }
}

#[test]
fn random_dags_have_no_cycles() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let n = rng.gen_range(2..=40);
        let (nodes, edges) = random_dag(&mut rng, n, 0.15);
        let g = DepGraph::from_parts(nodes, edges);
        let report = g.detect_cycles(true);
        assert!(report.cycles.is_empty());
        assert_eq!(report.total_found, 0);
    }
}

#[test]
fn cycle_enumeration_is_capped_with_scc_summary() {
    // A complete digraph on 9 nodes has far more than 1000 elementary
    // cycles; the report must cap and still summarize the component.
    let n = 9;
    let nodes: Vec<GraphNode> = (0..n).map(|i| node(i, EvidenceLevel::Measured)).collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                edges.push(edge(i, j));
            }
        }
    }
    let g = DepGraph::from_parts(nodes, edges);
    let report = g.detect_cycles(false);
    assert!(report.truncated);
    assert_eq!(report.cycles.len(), 1000);
    assert_eq!(report.sccs.len(), 1);
    assert_eq!(report.sccs[0].members.len(), n);
}
