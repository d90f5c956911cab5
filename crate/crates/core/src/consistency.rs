//! Detection and handling of degenerate data.
//!
//! Three situations make a node's polynomial useless: nothing was observed
//! below the node, the children's observations partition the node's
//! observations (no probe is seen by two children), or an estimate falls
//! outside `[0, 1]`. The precheck records each situation as a [`Finding`];
//! [`apply`] turns findings into an [`EstimationPlan`] that the estimators
//! follow. Clamping happens during estimation and is recorded there.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::error::Result;
use crate::stats::StatTable;
use crate::topology::{LinkId, NodeId, SourceId, Subject, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Flag {
    /// A single-source node where the source observed nothing below it.
    ZeroGammaSbrl,
    /// A shared node where one source observed nothing but others did.
    ZeroGammaSsnl,
    InfeasibleRate,
    Partition,
    /// A shared node where no source observed anything below it.
    MultiSourceZeroSum,
    /// A shared node whose pooled observations partition among its children.
    MultiSourcePartition,
}

impl Flag {
    pub fn as_str(self) -> &'static str {
        match self {
            Flag::ZeroGammaSbrl => "ZERO_GAMMA_SBRL",
            Flag::ZeroGammaSsnl => "ZERO_GAMMA_SSNL",
            Flag::InfeasibleRate => "INFEASIBLE_RATE",
            Flag::Partition => "PARTITION",
            Flag::MultiSourceZeroSum => "MULTI_SOURCE_ZERO_SUM",
            Flag::MultiSourcePartition => "MULTI_SOURCE_PARTITION",
        }
    }
}

impl fmt::Display for Flag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Join flags into the `A|B` form used in report columns.
pub fn format_flags(flags: &BTreeSet<Flag>) -> String {
    flags.iter().map(|f| f.as_str()).collect::<Vec<_>>().join("|")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Action {
    PrunedSubtree,
    Clamped,
    SkippedPolynomial,
    RescuedByPooledSources,
    Unestimable,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Action::PrunedSubtree => "pruned subtree",
            Action::Clamped => "clamped",
            Action::SkippedPolynomial => "skipped polynomial",
            Action::RescuedByPooledSources => "rescued by pooled sources",
            Action::Unestimable => "unestimable",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Finding {
    pub subject: Subject,
    pub source: Option<SourceId>,
    pub flag: Flag,
    pub action: Action,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConsistencyReport {
    pub findings: Vec<Finding>,
}

impl ConsistencyReport {
    pub fn push(&mut self, subject: Subject, source: Option<SourceId>, flag: Flag, action: Action) {
        let f = Finding {
            subject,
            source,
            flag,
            action,
        };
        if !self.findings.contains(&f) {
            self.findings.push(f);
        }
    }

    pub fn has(&self, subject: Subject, flag: Flag) -> bool {
        self.findings
            .iter()
            .any(|f| f.subject == subject && f.flag == flag)
    }

    pub fn flags_for(&self, subject: Subject) -> BTreeSet<Flag> {
        self.findings
            .iter()
            .filter(|f| f.subject == subject)
            .map(|f| f.flag)
            .collect()
    }

    /// Number of findings per flag.
    pub fn summary(&self) -> BTreeMap<Flag, usize> {
        let mut out = BTreeMap::new();
        for f in &self.findings {
            *out.entry(f.flag).or_default() += 1;
        }
        out
    }

    pub fn merge(&mut self, other: &ConsistencyReport) {
        for f in &other.findings {
            self.push(f.subject, f.source, f.flag, f.action);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConsistencyPolicy {
    /// Report links with no observations below them as unestimable rather
    /// than estimating them from zero counts.
    pub prune_unobserved: bool,
    /// Clamp infeasible rates to 1; otherwise they are reported as nulls.
    pub clamp_infeasible: bool,
}

impl Default for ConsistencyPolicy {
    fn default() -> Self {
        ConsistencyPolicy {
            prune_unobserved: true,
            clamp_infeasible: true,
        }
    }
}

/// What the estimators should skip.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EstimationPlan {
    /// Nodes whose polynomial is not solved; their path rates stay unknown.
    pub skip_nodes: BTreeSet<NodeId>,
    /// Links reported as nulls.
    pub unestimable_links: BTreeSet<LinkId>,
    pub clamp_infeasible: bool,
}

impl EstimationPlan {
    pub fn skips(&self, node: NodeId) -> bool {
        self.skip_nodes.contains(&node)
    }

    pub fn estimable(&self, link: LinkId) -> bool {
        !self.unestimable_links.contains(&link)
    }
}

/// Flag zero-observation and partition nodes and the links they make
/// unestimable.
pub fn precheck(topology: &Topology, stats: &StatTable) -> Result<ConsistencyReport> {
    let mut report = ConsistencyReport::default();

    for node in topology.nodes() {
        if topology.is_root(node) {
            continue;
        }
        let sources = topology.sources_of(node);
        let pooled = stats.n1_total(topology, node)?;
        let shared = sources.len() > 1;

        for &s in sources {
            if stats.n1(topology, node, s)? > 0.0 {
                continue;
            }
            // only report where the zero starts
            let parent = topology.parent(s, node).expect("non-root tree node has a parent");
            if stats.n1(topology, parent, s)? == 0.0 {
                continue;
            }
            let subject = Subject::Node(node);
            match (shared, pooled > 0.0) {
                (false, _) => report.push(subject, Some(s), Flag::ZeroGammaSbrl, Action::PrunedSubtree),
                (true, true) => report.push(
                    subject,
                    Some(s),
                    Flag::ZeroGammaSsnl,
                    Action::RescuedByPooledSources,
                ),
                (true, false) => report.push(subject, None, Flag::MultiSourceZeroSum, Action::PrunedSubtree),
            }
        }

        let kids = topology.children(node);
        if kids.is_empty() || pooled == 0.0 {
            continue;
        }
        let child_sum: f64 = kids
            .iter()
            .map(|&c| stats.pooled_n1(topology, c, sources))
            .sum::<Result<f64>>()?;
        if child_sum <= pooled {
            let flag = if shared {
                Flag::MultiSourcePartition
            } else {
                Flag::Partition
            };
            report.push(Subject::Node(node), None, flag, Action::SkippedPolynomial);
            for &l in topology
                .parent_links(node)
                .iter()
                .chain(topology.child_links(node))
            {
                report.push(Subject::Link(l), None, flag, Action::Unestimable);
            }
        } else if shared {
            for &s in sources {
                let own = stats.n1(topology, node, s)?;
                let own_kids: f64 = kids
                    .iter()
                    .map(|&c| stats.n1(topology, c, s))
                    .sum::<Result<f64>>()?;
                if own > 0.0 && own_kids <= own {
                    report.push(
                        Subject::Node(node),
                        Some(s),
                        Flag::Partition,
                        Action::RescuedByPooledSources,
                    );
                }
            }
        }
    }

    for l in topology.links() {
        let members = topology.membership(l.id);
        if stats.pooled_n1(topology, l.child, members)? > 0.0 {
            continue;
        }
        let flag = if topology.sources_of(l.child).len() > 1 {
            if stats.n1_total(topology, l.child)? == 0.0 {
                Flag::MultiSourceZeroSum
            } else {
                Flag::ZeroGammaSsnl
            }
        } else {
            Flag::ZeroGammaSbrl
        };
        report.push(Subject::Link(l.id), None, flag, Action::Unestimable);
    }

    report.findings.sort();
    Ok(report)
}

/// Turn findings into a plan under `policy`.
pub fn apply(report: &ConsistencyReport, policy: &ConsistencyPolicy) -> EstimationPlan {
    let mut plan = EstimationPlan {
        clamp_infeasible: policy.clamp_infeasible,
        ..EstimationPlan::default()
    };
    for f in &report.findings {
        match (f.subject, f.action) {
            (Subject::Node(n), Action::SkippedPolynomial) => {
                plan.skip_nodes.insert(n);
            }
            (Subject::Link(l), Action::Unestimable) => {
                let partition = matches!(f.flag, Flag::Partition | Flag::MultiSourcePartition);
                if partition || policy.prune_unobserved {
                    plan.unestimable_links.insert(l);
                }
            }
            _ => {}
        }
    }
    plan
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::topology::TopologyBuilder;

    fn table(t: &Topology, probes: &[(SourceId, f64)], counts: &[(NodeId, SourceId, f64)]) -> StatTable {
        // build a CSV and parse it so the table goes through the public path
        let mut text = String::from("kind,node,source,n1,n0,children\n");
        for (s, n) in probes {
            text += &format!("probes,,{s},{n},,\n");
        }
        for (v, s, n) in counts {
            text += &format!("node,{v},{s},{n},,\n");
        }
        for &(v, s, _) in counts {
            let kids = t.children(v);
            if kids.len() == 2 {
                text += &format!("joint,{v},{s},0,,{};{}\n", kids[0], kids[1]);
            }
        }
        StatTable::read_csv(t, text.as_bytes()).unwrap()
    }

    #[test]
    fn zero_subtree_in_single_tree_is_pruned() {
        // 0 -> 1 -> {2 -> {4, 5}, 3}
        let t = TopologyBuilder::new()
            .source(0, 0)
            .link(1, 0, 1, &[0])
            .link(2, 1, 2, &[0])
            .link(3, 1, 3, &[0])
            .link(4, 2, 4, &[0])
            .link(5, 2, 5, &[0])
            .build();
        let s = table(
            &t,
            &[(0, 100.0)],
            &[(1, 0, 60.0), (2, 0, 0.0), (3, 0, 60.0), (4, 0, 0.0), (5, 0, 0.0)],
        );
        let r = precheck(&t, &s).unwrap();
        assert!(r.has(Subject::Node(2), Flag::ZeroGammaSbrl));
        assert!(!r.has(Subject::Node(4), Flag::ZeroGammaSbrl));
        let plan = apply(&r, &ConsistencyPolicy::default());
        assert_eq!(plan.unestimable_links, BTreeSet::from([2, 4, 5, 1, 3]));
        // node 1 partitions once the empty child is gone
        assert!(r.has(Subject::Node(1), Flag::Partition));
    }

    #[test]
    fn one_silent_source_at_shared_node_is_rescued() {
        let t = fixtures::f2();
        use fixtures::*;
        let s = table(
            &t,
            &[(F2_S1, 100.0), (F2_S2, 100.0)],
            &[
                (F2_A, F2_S1, 0.0),
                (F2_J, F2_S1, 0.0),
                (F2_R1, F2_S1, 0.0),
                (F2_R2, F2_S1, 0.0),
                (F2_B, F2_S2, 70.0),
                (F2_J, F2_S2, 70.0),
                (F2_R1, F2_S2, 60.0),
                (F2_R2, F2_S2, 50.0),
            ],
        );
        let c = t.collapse_serial().topology;
        let r = precheck(&c, &s).unwrap();
        assert!(r.has(Subject::Node(F2_J), Flag::ZeroGammaSsnl));
        assert!(!r.has(Subject::Node(F2_J), Flag::MultiSourceZeroSum));
        let plan = apply(&r, &ConsistencyPolicy::default());
        assert!(plan.estimable(5) && plan.estimable(6) && plan.estimable(3));
        assert!(!plan.estimable(1));
        assert!(plan.skip_nodes.is_empty());
    }

    #[test]
    fn partition_flagged_and_skipped() {
        let t = fixtures::f1();
        let s = table(&t, &[(0, 1000.0)], &[(1, 0, 700.0), (2, 0, 400.0), (3, 0, 300.0)]);
        let r = precheck(&t, &s).unwrap();
        assert!(r.has(Subject::Node(1), Flag::Partition));
        let plan = apply(&r, &ConsistencyPolicy::default());
        assert!(plan.skips(1));
        assert_eq!(plan.unestimable_links, BTreeSet::from([1, 2, 3]));
    }

    #[test]
    fn partition_of_one_source_rescued_by_the_other() {
        use fixtures::*;
        let t = f2();
        let s = table(
            &t,
            &[(F2_S1, 100.0), (F2_S2, 100.0)],
            &[
                (F2_A, F2_S1, 70.0),
                (F2_J, F2_S1, 70.0),
                (F2_R1, F2_S1, 40.0),
                (F2_R2, F2_S1, 30.0),
                (F2_B, F2_S2, 80.0),
                (F2_J, F2_S2, 80.0),
                (F2_R1, F2_S2, 60.0),
                (F2_R2, F2_S2, 50.0),
            ],
        );
        let r = precheck(&t.collapse_serial().topology, &s).unwrap();
        assert!(r.findings.iter().any(|f| f.subject == Subject::Node(F2_J)
            && f.flag == Flag::Partition
            && f.action == Action::RescuedByPooledSources));
        let plan = apply(&r, &ConsistencyPolicy::default());
        assert!(!plan.skips(F2_J));
    }

    #[test]
    fn pooled_partition_is_multi_source() {
        use fixtures::*;
        let t = f2();
        let s = table(
            &t,
            &[(F2_S1, 100.0), (F2_S2, 100.0)],
            &[
                (F2_A, F2_S1, 70.0),
                (F2_J, F2_S1, 70.0),
                (F2_R1, F2_S1, 40.0),
                (F2_R2, F2_S1, 30.0),
                (F2_B, F2_S2, 80.0),
                (F2_J, F2_S2, 80.0),
                (F2_R1, F2_S2, 50.0),
                (F2_R2, F2_S2, 30.0),
            ],
        );
        let r = precheck(&t, &s).unwrap();
        assert!(r.has(Subject::Node(F2_J), Flag::MultiSourcePartition));
    }

    #[test]
    fn all_silent_shared_node_is_zero_sum() {
        use fixtures::*;
        let t = f2();
        let s = table(
            &t,
            &[(F2_S1, 100.0), (F2_S2, 100.0)],
            &[
                (F2_A, F2_S1, 0.0),
                (F2_J, F2_S1, 0.0),
                (F2_R1, F2_S1, 0.0),
                (F2_R2, F2_S1, 0.0),
                (F2_B, F2_S2, 0.0),
                (F2_J, F2_S2, 0.0),
                (F2_R1, F2_S2, 0.0),
                (F2_R2, F2_S2, 0.0),
            ],
        );
        // collapse so that j is entered directly from the roots
        let c = t.collapse_serial().topology;
        let r = precheck(&c, &s).unwrap();
        assert!(r.has(Subject::Node(F2_J), Flag::MultiSourceZeroSum));
        let plan = apply(&r, &ConsistencyPolicy::default());
        assert_eq!(plan.unestimable_links.len(), 4);
        let keep = apply(
            &r,
            &ConsistencyPolicy {
                prune_unobserved: false,
                clamp_infeasible: true,
            },
        );
        assert!(keep.unestimable_links.is_empty());
    }
}
