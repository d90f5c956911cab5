//! Path-based maximum likelihood estimation.
//!
//! At every branching node the pooled child ratios of all sources reaching
//! it determine one subtree pass rate `beta`; each source's path rate then
//! follows as `A(s,i) = gamma_i(s)/beta`. Link rates are ratios of path
//! rates weighted by probe counts over the sources that use the link.
//!
//! Serial chains are collapsed first: only their end-to-end rate is
//! identifiable, so they are reported as composite segments.

use std::collections::{BTreeMap, BTreeSet};

use crate::consistency::{self, Action, ConsistencyPolicy, ConsistencyReport, EstimationPlan, Flag};
use crate::error::{Error, Result};
use crate::solver::{self, SolverConfig};
use crate::stats::StatTable;
use crate::topology::{LinkId, NodeId, SerialCollapse, SourceId, Subject, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RootStrategy {
    /// Bisection on the full polynomial of the node.
    #[default]
    Polynomial,
    /// Merge the children into two virtual links and use the quadratic
    /// closed form.
    BinaryMerge,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PathEstimatorConfig {
    pub solver: SolverConfig,
    pub strategy: RootStrategy,
    pub policy: ConsistencyPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceRate {
    pub gamma: f64,
    /// Path rate after clamping to `[0, 1]`.
    pub a: Option<f64>,
    pub a_raw: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeRate {
    pub node: NodeId,
    pub beta: Option<f64>,
    /// Estimated number of probes (all sources) reaching the node.
    pub n_star: Option<f64>,
    /// Source with the most confirmed passes at the node.
    pub reference: Option<SourceId>,
    pub sources: BTreeMap<SourceId, SourceRate>,
    pub flags: BTreeSet<Flag>,
}

impl NodeRate {
    pub fn a(&self, source: SourceId) -> Option<f64> {
        self.sources.get(&source).and_then(|r| r.a)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PathRateTable {
    pub nodes: BTreeMap<NodeId, NodeRate>,
}

impl PathRateTable {
    /// `A(s, node)`, with the source's root at 1.
    pub fn a(&self, topology: &Topology, source: SourceId, node: NodeId) -> Option<f64> {
        if topology.source(source).ok()?.root == node {
            return Some(1.0);
        }
        self.nodes.get(&node)?.a(source)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkEstimate {
    /// Segment id (the id of its first physical link).
    pub link: LinkId,
    /// Physical links covered, top to bottom.
    pub links: Vec<LinkId>,
    pub pass_rate: Option<f64>,
    pub flags: BTreeSet<Flag>,
    /// Decomposition piece the estimate came from, if any.
    pub tree: Option<usize>,
}

impl LinkEstimate {
    pub fn theta(&self) -> Option<f64> {
        self.pass_rate.map(|p| 1.0 - p)
    }

    pub fn is_composite(&self) -> bool {
        self.links.len() > 1
    }
}

#[derive(Debug, Clone)]
pub struct EstimateReport {
    pub links: BTreeMap<LinkId, LinkEstimate>,
    pub path_rates: PathRateTable,
    pub consistency: ConsistencyReport,
    pub collapse: SerialCollapse,
}

impl EstimateReport {
    /// Estimated loss of a segment, by segment id.
    pub fn theta(&self, segment: LinkId) -> Option<f64> {
        self.links.get(&segment)?.theta()
    }

    /// Estimated loss of a physical link that is not part of a longer chain.
    pub fn link_theta(&self, link: LinkId) -> Option<f64> {
        let e = self.links.get(&link)?;
        if e.is_composite() {
            None
        } else {
            e.theta()
        }
    }

    /// Estimated loss per segment id (nulls dropped).
    pub fn thetas(&self) -> BTreeMap<LinkId, f64> {
        self.links
            .iter()
            .filter_map(|(&l, e)| e.theta().map(|t| (l, t)))
            .collect()
    }
}

/// `gamma_i(s) = n_i(s,1)/n^s`.
pub fn gamma_hat(topology: &Topology, stats: &StatTable, node: NodeId, source: SourceId) -> Result<f64> {
    if !topology.has_node(node) {
        return Err(Error::UnknownNode(node));
    }
    if !topology.in_tree(source, node) {
        topology.source(source)?;
        return Err(Error::NotInTree {
            source_id: source,
            node,
        });
    }
    stats.gamma_hat(topology, node, source)
}

/// Path rates of every source from the reference source's rate:
/// `A(s,i) = A(k,i) gamma_i(s)/gamma_i(k)`, clamped to `[0, 1]`.
/// Returns the rates and whether any was clamped.
pub fn propagate_sources(
    a_ref: f64,
    gamma_ref: f64,
    gammas: &BTreeMap<SourceId, f64>,
) -> (BTreeMap<SourceId, f64>, bool) {
    let mut clamped = false;
    let out = gammas
        .iter()
        .map(|(&s, &g)| {
            let a = a_ref * g / gamma_ref;
            if a > 1.0 {
                clamped = true;
            }
            (s, a.clamp(0.0, 1.0))
        })
        .collect();
    (out, clamped)
}

/// `n*_i = (A(k,i)/gamma_i(k)) sum_s n^s gamma_i(s)`.
pub fn n_star(a_ref: f64, gamma_ref: f64, probes_and_gammas: &[(f64, f64)]) -> f64 {
    let seen: f64 = probes_and_gammas.iter().map(|(n, g)| n * g).sum();
    a_ref / gamma_ref * seen
}

/// `beta_i = gamma_i(s)/A(s,i)`.
pub fn beta_hat(a: f64, gamma: f64) -> f64 {
    gamma / a
}

/// Probe-weighted ratio of path rates below and above a link, one
/// `(n^s, A(s,child), A(s,parent))` triple per source using the link.
pub fn path_to_link(terms: &[(f64, f64, f64)]) -> Result<f64> {
    let num: f64 = terms.iter().map(|(n, a, _)| n * a).sum();
    let den: f64 = terms.iter().map(|(n, _, a)| n * a).sum();
    if den <= 0.0 {
        return Err(Error::Consistency("zero denominator in the link rate".into()));
    }
    Ok(num / den)
}

/// Pooled child ratios `c_j = sum_s n_j(s,1) / sum_s n_i(s,1)` over `S(i)`.
pub(crate) fn child_ratios(topology: &Topology, stats: &StatTable, node: NodeId) -> Result<Vec<f64>> {
    let sources = topology.sources_of(node);
    let pooled = stats.pooled_n1(topology, node, sources)?;
    topology
        .children(node)
        .iter()
        .map(|&c| Ok(stats.pooled_n1(topology, c, sources)? / pooled))
        .collect()
}

/// Subtree pass rate of an internal node from pooled statistics.
pub(crate) fn node_beta(
    topology: &Topology,
    stats: &StatTable,
    node: NodeId,
    cfg: &PathEstimatorConfig,
) -> Result<f64> {
    match cfg.strategy {
        RootStrategy::Polynomial => {
            let c = child_ratios(topology, stats, node)?;
            Ok(solver::solve_beta(&c, &cfg.solver)?.value)
        }
        RootStrategy::BinaryMerge => merged_beta(topology, stats, node),
    }
}

/// Closed form after merging the children into two virtual links: the
/// first half of the child list and the rest.
pub fn merged_beta(topology: &Topology, stats: &StatTable, node: NodeId) -> Result<f64> {
    let d = topology.children(node).len();
    if d < 2 {
        return Err(Error::Domain(format!("node {node} has fewer than two children")));
    }
    if d == 2 {
        let c = child_ratios(topology, stats, node)?;
        return solver::binary_beta(c[0], c[1]);
    }
    let all = (1usize << d) - 1;
    let left = (1usize << d.div_ceil(2)) - 1;
    let right = all & !left;
    let pooled = stats.n1_total(topology, node)?;
    let c1 = stats.merge_children(topology, node, left)?.total / pooled;
    let c2 = stats.merge_children(topology, node, right)?.total / pooled;
    solver::binary_beta(c1, c2)
}

/// Solve one node: `beta`, per-source path rates and `n*`.
pub(crate) fn solve_node(
    topology: &Topology,
    stats: &StatTable,
    node: NodeId,
    plan: &EstimationPlan,
    cfg: &PathEstimatorConfig,
    report: &mut ConsistencyReport,
) -> Result<NodeRate> {
    let sources = topology.sources_of(node);
    let mut gammas = BTreeMap::new();
    let mut weighted = Vec::new();
    for &s in sources {
        let g = stats.gamma_hat(topology, node, s)?;
        gammas.insert(s, g);
        weighted.push((stats.probes(s)?, g));
    }
    let pooled = stats.n1_total(topology, node)?;
    let mut reference = None;
    let mut best = 0.0;
    for &s in sources {
        let n1 = stats.n1(topology, node, s)?;
        if n1 > best {
            best = n1;
            reference = Some(s);
        }
    }

    let mut flags = report.flags_for(Subject::Node(node));
    let beta = if topology.is_leaf(node) {
        Some(1.0)
    } else if plan.skips(node) || pooled == 0.0 {
        None
    } else {
        match node_beta(topology, stats, node, cfg) {
            Ok(b) => Some(b),
            Err(Error::NoInteriorRoot { .. }) => {
                let flag = if sources.len() > 1 {
                    Flag::MultiSourcePartition
                } else {
                    Flag::Partition
                };
                report.push(Subject::Node(node), None, flag, Action::SkippedPolynomial);
                flags.insert(flag);
                None
            }
            Err(e) => return Err(e),
        }
    };

    let mut rates = BTreeMap::new();
    for (&s, &g) in &gammas {
        let a_raw = beta.map(|b| beta_hat(b, g));
        let a = a_raw.and_then(|a| {
            if a > 1.0 {
                flags.insert(Flag::InfeasibleRate);
                report.push(
                    Subject::Node(node),
                    Some(s),
                    Flag::InfeasibleRate,
                    Action::Clamped,
                );
                plan.clamp_infeasible.then_some(1.0)
            } else {
                Some(a)
            }
        });
        rates.insert(s, SourceRate { gamma: g, a, a_raw });
    }
    let n_star = match (beta, reference) {
        (Some(b), Some(k)) => Some(n_star(gammas[&k] / b, gammas[&k], &weighted)),
        _ => None,
    };
    Ok(NodeRate {
        node,
        beta,
        n_star,
        reference,
        sources: rates,
        flags,
    })
}

/// Eq.-6 style link rate for a segment of the collapsed topology.
pub(crate) fn link_rate(
    topology: &Topology,
    stats: &StatTable,
    rates: &PathRateTable,
    link: LinkId,
    plan: &EstimationPlan,
    report: &mut ConsistencyReport,
) -> Result<(Option<f64>, BTreeSet<Flag>)> {
    let l = *topology.link(link)?;
    let mut flags = report.flags_for(Subject::Link(link));
    if !plan.estimable(link) {
        return Ok((None, flags));
    }
    let mut terms = Vec::new();
    for &s in topology.membership(link) {
        let (Some(below), Some(above)) = (rates.a(topology, s, l.child), rates.a(topology, s, l.parent))
        else {
            return Ok((None, flags));
        };
        terms.push((stats.probes(s)?, below, above));
    }
    let rate = match path_to_link(&terms) {
        Ok(r) => r,
        Err(_) => return Ok((None, flags)),
    };
    if rate > 1.0 {
        flags.insert(Flag::InfeasibleRate);
        report.push(Subject::Link(link), None, Flag::InfeasibleRate, Action::Clamped);
        return Ok((plan.clamp_infeasible.then_some(1.0), flags));
    }
    Ok((Some(rate.max(0.0)), flags))
}

/// Everything the estimators share: the collapsed topology, the
/// consistency report and the plan derived from it.
pub(crate) struct Prepared {
    pub collapse: SerialCollapse,
    pub report: ConsistencyReport,
    pub plan: EstimationPlan,
}

pub(crate) fn prepare(
    topology: &Topology,
    stats: &StatTable,
    policy: &ConsistencyPolicy,
) -> Result<Prepared> {
    topology.ensure_valid()?;
    stats.check_against(topology)?;
    let collapse = topology.collapse_serial();
    let report = consistency::precheck(&collapse.topology, stats)?;
    let plan = consistency::apply(&report, policy);
    Ok(Prepared {
        collapse,
        report,
        plan,
    })
}

/// Path rates for every node and link rates for every segment.
pub fn estimate_all_paths(
    topology: &Topology,
    stats: &StatTable,
    cfg: &PathEstimatorConfig,
) -> Result<EstimateReport> {
    let Prepared {
        collapse,
        mut report,
        plan,
    } = prepare(topology, stats, &cfg.policy)?;
    let t = &collapse.topology;

    let mut rates = PathRateTable::default();
    for node in t.nodes() {
        if t.is_root(node) {
            continue;
        }
        let r = solve_node(t, stats, node, &plan, cfg, &mut report)?;
        rates.nodes.insert(node, r);
    }

    let mut links = BTreeMap::new();
    for l in t.links() {
        let (pass_rate, flags) = link_rate(t, stats, &rates, l.id, &plan, &mut report)?;
        links.insert(
            l.id,
            LinkEstimate {
                link: l.id,
                links: collapse.physical_links(l.id).to_vec(),
                pass_rate,
                flags,
                tree: None,
            },
        );
    }
    report.findings.sort();
    Ok(EstimateReport {
        links,
        path_rates: rates,
        consistency: report,
        collapse,
    })
}
