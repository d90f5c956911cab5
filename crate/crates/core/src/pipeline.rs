//! Divide-and-conquer estimation.
//!
//! The network is cut at its joint nodes into independent trees. A tree
//! rooted at a joint node (or a source tree that meets no other tree) is a
//! *descendant* tree: it is estimated as an ordinary multicast tree fed by a
//! virtual source that sends `n*` probes, the estimated number of probes
//! reaching its root. Every other tree hangs from a source and ends in one
//! or more joint nodes; it is an *ancestor* tree, estimated bottom-up with
//! the path rates already solved at those joint nodes standing in for the
//! subtrees that were cut away.

use std::collections::{BTreeMap, BTreeSet};

use crate::consistency::{Action, Flag};
use crate::error::Result;
use crate::path::{
    self, EstimateReport, LinkEstimate, NodeRate, PathEstimatorConfig, PathRateTable, Prepared, RootStrategy,
};
use crate::solver;
use crate::stats::StatTable;
use crate::topology::{LinkId, NodeId, SourceId, Subject, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    Ancestor,
    Descendant,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Ancestor => "ancestor",
            Group::Descendant => "descendant",
        }
    }
}

/// One independent tree of a decomposition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Piece {
    pub id: usize,
    pub group: Group,
    pub root: NodeId,
    pub links: Vec<LinkId>,
    /// Cut nodes that are leaves of this piece.
    pub cut_leaves: BTreeSet<NodeId>,
    /// The source whose root is the root of this piece, if any.
    pub source: Option<SourceId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decomposition {
    pub cuts: BTreeSet<NodeId>,
    pub pieces: Vec<Piece>,
}

impl Decomposition {
    pub fn piece_of(&self, link: LinkId) -> Option<&Piece> {
        self.pieces.iter().find(|p| p.links.contains(&link))
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Split the links at the given cut nodes. Two links end up in the same
/// piece when they meet at a node that is not cut, or when both leave the
/// same cut node.
pub fn pieces_for_cuts(topology: &Topology, cuts: &BTreeSet<NodeId>) -> Decomposition {
    let ids: Vec<LinkId> = topology.links().map(|l| l.id).collect();
    let index: BTreeMap<LinkId, usize> = ids.iter().enumerate().map(|(k, &l)| (l, k)).collect();
    let mut parent: Vec<usize> = (0..ids.len()).collect();
    let union = |a: LinkId, b: LinkId, parent: &mut Vec<usize>| {
        let (ra, rb) = (find(parent, index[&a]), find(parent, index[&b]));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    };
    for node in topology.nodes() {
        let outs = topology.child_links(node);
        let mut incident: Vec<LinkId> = outs.to_vec();
        if !cuts.contains(&node) {
            incident.extend_from_slice(topology.parent_links(node));
        }
        for w in incident.windows(2) {
            union(w[0], w[1], &mut parent);
        }
    }

    let mut groups: BTreeMap<usize, Vec<LinkId>> = BTreeMap::new();
    for (k, &l) in ids.iter().enumerate() {
        groups.entry(find(&mut parent, k)).or_default().push(l);
    }
    let mut pieces: Vec<Piece> = groups
        .into_values()
        .map(|links| {
            let set: BTreeSet<LinkId> = links.iter().copied().collect();
            let children: BTreeSet<NodeId> = links
                .iter()
                .filter_map(|&l| topology.link(l).ok().map(|x| x.child))
                .collect();
            let root = links
                .iter()
                .filter_map(|&l| topology.link(l).ok().map(|x| x.parent))
                .find(|p| !children.contains(p))
                .unwrap_or_default();
            let cut_leaves = children
                .iter()
                .copied()
                .filter(|c| cuts.contains(c) && !topology.child_links(*c).iter().any(|l| set.contains(l)))
                .collect::<BTreeSet<_>>();
            let source = topology.root_source(root);
            let group = if cuts.contains(&root) || cut_leaves.is_empty() {
                Group::Descendant
            } else {
                Group::Ancestor
            };
            Piece {
                id: 0,
                group,
                root,
                links,
                cut_leaves,
                source,
            }
        })
        .collect();
    pieces.sort_by_key(|p| (p.group, p.root, p.links[0]));
    for (k, p) in pieces.iter_mut().enumerate() {
        p.id = k;
    }
    Decomposition {
        cuts: cuts.clone(),
        pieces,
    }
}

/// Cut at every joint node.
pub fn decompose(topology: &Topology) -> Decomposition {
    pieces_for_cuts(topology, &topology.joint_nodes().joint)
}

/// True when every piece is a tree: a single root and at most one parent
/// per node inside the piece.
pub fn pieces_are_trees(topology: &Topology, d: &Decomposition) -> bool {
    d.pieces.iter().all(|p| {
        let mut parents: BTreeMap<NodeId, usize> = BTreeMap::new();
        let mut nodes = BTreeSet::new();
        for &l in &p.links {
            let Ok(link) = topology.link(l) else { return false };
            *parents.entry(link.child).or_default() += 1;
            nodes.insert(link.parent);
            nodes.insert(link.child);
        }
        parents.values().all(|&c| c == 1) && nodes.iter().filter(|n| !parents.contains_key(n)).count() == 1
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PieceEstimate {
    pub piece: Piece,
    /// Probes the (possibly virtual) source at the root is taken to send.
    pub virtual_probes: Option<f64>,
    /// Path rates from the piece root.
    pub path_rates: BTreeMap<NodeId, f64>,
}

#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub decomposition: Decomposition,
    pub pieces: Vec<PieceEstimate>,
    pub estimate: EstimateReport,
}

/// Estimate one piece as an ordinary tree.
///
/// `sources` are the sources whose counts are pooled, `root_probes` the
/// number of probes the root is assumed to emit and `known` the path rates
/// (relative to the root) of the piece's cut leaves.
#[allow(clippy::too_many_arguments)]
fn estimate_piece(
    t: &Topology,
    stats: &StatTable,
    piece: &Piece,
    sources: &BTreeSet<SourceId>,
    root_probes: f64,
    known: &BTreeMap<NodeId, Option<f64>>,
    prepared: &mut Prepared,
    cfg: &PathEstimatorConfig,
) -> Result<PieceEstimate> {
    let links: BTreeSet<LinkId> = piece.links.iter().copied().collect();
    let kids = |v: NodeId| -> Vec<NodeId> {
        t.child_links(v)
            .iter()
            .filter(|l| links.contains(l))
            .filter_map(|&l| t.link(l).ok().map(|x| x.child))
            .collect()
    };
    let gamma = |v: NodeId| -> Result<f64> { Ok(stats.pooled_n1(t, v, sources)? / root_probes) };

    let mut order = vec![piece.root];
    let mut k = 0;
    while k < order.len() {
        if !piece.cut_leaves.contains(&order[k]) || order[k] == piece.root {
            order.extend(kids(order[k]));
        }
        k += 1;
    }

    let mut rates: BTreeMap<NodeId, Option<f64>> = BTreeMap::new();
    for &v in order.iter().rev() {
        let a = if v == piece.root {
            Some(1.0)
        } else if let Some(&a) = known.get(&v) {
            a
        } else {
            let g = gamma(v)?;
            let children = kids(v);
            if children.is_empty() {
                Some(g)
            } else if prepared.plan.skips(v) || g == 0.0 {
                None
            } else {
                let solved = match cfg.strategy {
                    RootStrategy::Polynomial => {
                        let cg: Vec<f64> = children.iter().map(|&c| gamma(c)).collect::<Result<_>>()?;
                        solver::solve_tree_path(g, &cg, &cfg.solver).map(|r| r.value)
                    }
                    RootStrategy::BinaryMerge => path::merged_beta(t, stats, v).map(|b| g / b),
                };
                match solved {
                    Ok(a) => Some(a),
                    Err(crate::Error::NoInteriorRoot { .. }) => {
                        let flag = if t.sources_of(v).len() > 1 {
                            Flag::MultiSourcePartition
                        } else {
                            Flag::Partition
                        };
                        prepared
                            .report
                            .push(Subject::Node(v), None, flag, Action::SkippedPolynomial);
                        None
                    }
                    Err(e) => return Err(e),
                }
            }
        };
        rates.insert(v, a);
    }
    Ok(PieceEstimate {
        piece: piece.clone(),
        virtual_probes: Some(root_probes),
        path_rates: rates.into_iter().filter_map(|(v, a)| a.map(|a| (v, a))).collect(),
    })
}

/// Run the whole pipeline: path rates at the joint nodes, descendant trees,
/// then ancestor trees. The report covers every segment of the collapsed
/// topology.
pub fn run_pipeline(
    topology: &Topology,
    stats: &StatTable,
    cfg: &PathEstimatorConfig,
) -> Result<PipelineReport> {
    let mut prepared = path::prepare(topology, stats, &cfg.policy)?;
    let t = prepared.collapse.topology.clone();
    let decomposition = decompose(&t);

    let mut joint_rates = PathRateTable::default();
    for &j in &decomposition.cuts {
        let r: NodeRate = path::solve_node(&t, stats, j, &prepared.plan, cfg, &mut prepared.report)?;
        joint_rates.nodes.insert(j, r);
    }

    let mut estimates = Vec::new();
    for piece in &decomposition.pieces {
        let (sources, root_probes) = match piece.source {
            Some(s) => (BTreeSet::from([s]), stats.probes(s)?),
            None => {
                let sources = t.sources_of(piece.root).clone();
                let n = match joint_rates.nodes.get(&piece.root).and_then(|r| r.n_star) {
                    Some(n) => n,
                    // the root's polynomial was skipped: ratios below it do
                    // not depend on the scale, links out of it stay null
                    None => stats.pooled_n1(&t, piece.root, &sources)?,
                };
                (sources, n)
            }
        };
        let mut known = BTreeMap::new();
        for &j in &piece.cut_leaves {
            let mut total = 0.0;
            let mut missing = false;
            for &s in &sources {
                match joint_rates.nodes.get(&j).and_then(|r| r.a(s)) {
                    Some(a) => total += stats.probes(s)? * a,
                    None => missing = true,
                }
            }
            known.insert(j, (!missing && root_probes > 0.0).then(|| total / root_probes));
        }
        if root_probes <= 0.0 {
            estimates.push(PieceEstimate {
                piece: piece.clone(),
                virtual_probes: None,
                path_rates: BTreeMap::new(),
            });
            continue;
        }
        estimates.push(estimate_piece(
            &t,
            stats,
            piece,
            &sources,
            root_probes,
            &known,
            &mut prepared,
            cfg,
        )?);
    }

    let mut links = BTreeMap::new();
    for est in &estimates {
        for &l in &est.piece.links {
            let link = *t.link(l)?;
            let mut flags = prepared.report.flags_for(Subject::Link(l));
            let rate = if !prepared.plan.estimable(l) {
                None
            } else {
                match (est.path_rates.get(&link.child), est.path_rates.get(&link.parent)) {
                    (Some(&below), Some(&above)) if above > 0.0 => {
                        let r = below / above;
                        if r > 1.0 {
                            flags.insert(Flag::InfeasibleRate);
                            prepared.report.push(
                                Subject::Link(l),
                                None,
                                Flag::InfeasibleRate,
                                Action::Clamped,
                            );
                            prepared.plan.clamp_infeasible.then_some(1.0)
                        } else {
                            Some(r.max(0.0))
                        }
                    }
                    _ => None,
                }
            };
            links.insert(
                l,
                LinkEstimate {
                    link: l,
                    links: prepared.collapse.physical_links(l).to_vec(),
                    pass_rate: rate,
                    flags,
                    tree: Some(est.piece.id),
                },
            );
        }
    }
    let Prepared {
        collapse, mut report, ..
    } = prepared;
    report.findings.sort();
    Ok(PipelineReport {
        decomposition,
        pieces: estimates,
        estimate: EstimateReport {
            links,
            path_rates: joint_rates,
            consistency: report,
            collapse,
        },
    })
}

/// Estimate a descendant tree on its own, given the probe count at its root.
pub fn estimate_descendant_tree(
    topology: &Topology,
    stats: &StatTable,
    piece: &Piece,
    root_probes: f64,
    cfg: &PathEstimatorConfig,
) -> Result<PieceEstimate> {
    let mut prepared = path::prepare(topology, stats, &cfg.policy)?;
    let t = prepared.collapse.topology.clone();
    let sources = match piece.source {
        Some(s) => BTreeSet::from([s]),
        None => t.sources_of(piece.root).clone(),
    };
    estimate_piece(
        &t,
        stats,
        piece,
        &sources,
        root_probes,
        &BTreeMap::new(),
        &mut prepared,
        cfg,
    )
}

/// Estimate an ancestor tree of `source`, given the path rates from the
/// source to each of the tree's cut leaves.
pub fn estimate_ancestor_tree(
    topology: &Topology,
    stats: &StatTable,
    piece: &Piece,
    leaf_rates: &BTreeMap<NodeId, f64>,
    cfg: &PathEstimatorConfig,
) -> Result<PieceEstimate> {
    let mut prepared = path::prepare(topology, stats, &cfg.policy)?;
    let t = prepared.collapse.topology.clone();
    let source = piece
        .source
        .ok_or_else(|| crate::Error::input("an ancestor tree hangs from a source"))?;
    let known = piece
        .cut_leaves
        .iter()
        .map(|j| (*j, leaf_rates.get(j).copied()))
        .collect();
    let n = stats.probes(source)?;
    estimate_piece(
        &t,
        stats,
        piece,
        &BTreeSet::from([source]),
        n,
        &known,
        &mut prepared,
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::path::estimate_all_paths;
    use crate::sim::{equal_counts, simulate, LossModel};
    use crate::stats::build_stats;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_tree_is_one_descendant_piece() {
        let t = fixtures::f1();
        let d = decompose(&t);
        assert_eq!(d.len(), 1);
        assert_eq!(d.pieces[0].group, Group::Descendant);
        assert_eq!(d.pieces[0].root, 0);
        assert_eq!(d.pieces[0].links, vec![1, 2, 3]);
    }

    #[test]
    fn f2_splits_into_three() {
        let t = fixtures::f2();
        let d = decompose(&t);
        assert_eq!(d.len(), 3);
        let desc: Vec<_> = d.pieces.iter().filter(|p| p.group == Group::Descendant).collect();
        assert_eq!(desc.len(), 1);
        assert_eq!(desc[0].root, fixtures::F2_J);
        assert_eq!(desc[0].links, vec![5, 6]);
        let anc: Vec<_> = d.pieces.iter().filter(|p| p.group == Group::Ancestor).collect();
        assert_eq!(anc[0].links, vec![1, 2]);
        assert_eq!(anc[1].links, vec![3, 4]);
        assert!(anc
            .iter()
            .all(|p| p.cut_leaves == BTreeSet::from([fixtures::F2_J])));
        assert!(pieces_are_trees(&t, &d));
    }

    #[test]
    fn f3_pieces_cover_every_link_once() {
        let t = fixtures::f3();
        let d = decompose(&t);
        assert_eq!(d.len(), 3);
        let mut all: Vec<LinkId> = d.pieces.iter().flat_map(|p| p.links.clone()).collect();
        all.sort();
        assert_eq!(all, t.links().map(|l| l.id).collect::<Vec<_>>());
        let desc = d.piece_of(fixtures::F3_HIGH_LOSS_LINK).unwrap();
        let mut want = fixtures::F3_INTERSECTION.to_vec();
        want.sort();
        assert_eq!(desc.links, want);
    }

    #[test]
    fn joint_cuts_are_minimal() {
        for name in ["F2", "F3"] {
            let t = fixtures::builtin(name).unwrap();
            let base = decompose(&t);
            let inner: Vec<NodeId> = t.nodes().filter(|&n| !t.is_root(n) && !t.is_leaf(n)).collect();
            assert!(inner.len() <= 16);
            for mask in 0u32..(1 << inner.len()) {
                let cuts: BTreeSet<NodeId> = (0..inner.len())
                    .filter(|k| mask & (1 << k) != 0)
                    .map(|k| inner[k])
                    .collect();
                let d = pieces_for_cuts(&t, &cuts);
                if !pieces_are_trees(&t, &d) {
                    assert!(!cuts.is_superset(&base.cuts), "{name}: {cuts:?}");
                    continue;
                }
                assert!(cuts.is_superset(&base.cuts), "{name}: {cuts:?}");
                if cuts != base.cuts {
                    assert!(d.len() > base.len(), "{name}: {cuts:?}");
                }
            }
        }
    }

    fn compare(topology: &Topology, stats: &StatTable) -> f64 {
        let cfg = PathEstimatorConfig::default();
        let direct = estimate_all_paths(topology, stats, &cfg).unwrap();
        let piped = run_pipeline(topology, stats, &cfg).unwrap();
        let mut worst: f64 = 0.0;
        for (l, e) in &direct.links {
            let p = &piped.estimate.links[l];
            match (e.pass_rate, p.pass_rate) {
                (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                (None, None) => {}
                other => panic!("link {l}: {other:?}"),
            }
        }
        worst
    }

    #[test]
    fn pipeline_matches_path_estimator() {
        for (name, seed) in [("F1", 1), ("F2", 2), ("F3", 3)] {
            let t = fixtures::builtin(name).unwrap();
            let loss = fixtures::builtin_loss(name).unwrap();
            let (obs, _) = simulate(&t, &loss, &equal_counts(&t, 20_000), seed).unwrap();
            let s = build_stats(&t, &obs).unwrap();
            assert!(compare(&t, &s) < 1e-9, "{name}");
        }
    }

    #[test]
    fn pipeline_matches_on_expected_statistics() {
        let t = fixtures::f3();
        let counts = t.source_ids().map(|s| (s, 5000.0)).collect();
        let s = StatTable::expected(&t, &fixtures::f3_loss(), &counts).unwrap();
        assert!(compare(&t, &s) < 1e-9);
        let r = run_pipeline(&t, &s, &PathEstimatorConfig::default()).unwrap();
        for l in fixtures::F3_INTERSECTION {
            let want = fixtures::f3_loss().theta(l);
            assert!((r.estimate.theta(l).unwrap() - want).abs() < 1e-9, "{l}");
        }
    }

    #[test]
    fn random_networks_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for k in 0..20 {
            let t = fixtures::random_network(&mut rng, 12);
            let loss = fixtures::random_loss(&mut rng, &t, 0.02, 0.2);
            let (obs, _) = simulate(&t, &loss, &equal_counts(&t, 5000), k).unwrap();
            let s = build_stats(&t, &obs).unwrap();
            assert!(compare(&t, &s) < 1e-9, "case {k}");
        }
    }

    #[test]
    fn descendant_tree_two_leaf_closed_form() {
        let t = fixtures::f1();
        let text = "kind,node,source,n1,n0,children\n\
                    probes,,0,1000,,\n\
                    node,1,0,784,,\n\
                    node,2,0,720,,\n\
                    node,3,0,640,,\n\
                    joint,1,0,576,,2;3\n";
        let s = StatTable::read_csv(&t, text.as_bytes()).unwrap();
        let piece = decompose(&t).pieces[0].clone();
        let e = estimate_descendant_tree(&t, &s, &piece, 1000.0, &PathEstimatorConfig::default()).unwrap();
        assert!((e.path_rates[&1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn lossless_descendant_tree() {
        let t = fixtures::f2();
        let loss = LossModel::uniform(&t, 0.0).unwrap();
        let (obs, _) = simulate(&t, &loss, &equal_counts(&t, 500), 4).unwrap();
        let s = build_stats(&t, &obs).unwrap();
        let r = run_pipeline(&t, &s, &PathEstimatorConfig::default()).unwrap();
        for e in r.estimate.links.values() {
            assert_eq!(e.theta(), Some(0.0));
        }
        let root = r
            .pieces
            .iter()
            .find(|p| p.piece.group == Group::Descendant)
            .unwrap();
        assert_eq!(root.virtual_probes, Some(1000.0));
    }

    #[test]
    fn ancestor_tree_with_side_branch() {
        // source 0 -> 1; 1 -> 2 (joint with source 9) and 1 -> 3 (own leaf);
        // 2 -> 4, 2 -> 5 shared
        let t = crate::topology::TopologyBuilder::new()
            .source(0, 0)
            .source(9, 9)
            .link(1, 0, 1, &[0])
            .link(2, 1, 2, &[0])
            .link(3, 1, 3, &[0])
            .link(9, 9, 2, &[9])
            .link(4, 2, 4, &[0, 9])
            .link(5, 2, 5, &[0, 9])
            .build();
        let counts = BTreeMap::from([(0, 1000.0), (9, 1000.0)]);
        let theta = BTreeMap::from([(1, 0.1), (2, 0.2), (3, 0.05), (9, 0.3), (4, 0.1), (5, 0.15)]);
        let loss = LossModel::new(&t, theta).unwrap();
        let s = StatTable::expected(&t, &loss, &counts).unwrap();
        let d = decompose(&t);
        let anc = d.pieces.iter().find(|p| p.source == Some(0)).unwrap();
        assert_eq!(anc.group, Group::Ancestor);
        // the exact path rate to the joint node
        let a_joint = 0.9 * 0.8;
        let e = estimate_ancestor_tree(
            &t,
            &s,
            anc,
            &BTreeMap::from([(2, a_joint)]),
            &PathEstimatorConfig::default(),
        )
        .unwrap();
        // one unknown: 1 - g1/A = (1 - a_joint beta2 / A)(1 - g3/A), linear in A
        assert!((e.path_rates[&1] - 0.9).abs() < 1e-12, "{}", e.path_rates[&1]);
        assert!((e.path_rates[&2] / e.path_rates[&1] - 0.8).abs() < 1e-12);
    }
}
