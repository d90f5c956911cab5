//! Sufficient statistics: confirmed-pass counts per (node, source) and
//! joint counts over subsets of a node's children.
//!
//! Counts are stored as `f64` so that expected-value tables (model-exact
//! statistics) and sampled tables share one type. Sampled counts are whole
//! numbers and every operation on them is exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use fixedbitset::FixedBitSet;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::sim::{LossModel, ObservationSet};
use crate::topology::{NodeId, SourceId, Topology};

/// Joint counts are tabulated for nodes with at most this many children.
pub const MAX_JOINT_DEGREE: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct StatTable {
    topology_hash: u64,
    probes: BTreeMap<SourceId, f64>,
    /// `n_i(s,1)` for every non-root node of every source tree.
    confirmed: BTreeMap<(NodeId, SourceId), f64>,
    /// Per internal node and source: entry `mask` is the number of probes
    /// seen below every child whose bit is set (bit `k` is the `k`-th child
    /// link of the node). Entry 0 is the node's own confirmed count.
    joint: BTreeMap<(NodeId, SourceId), Vec<f64>>,
}

/// Count of probes seen below at least one child of a subset, per source.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedCount {
    pub per_source: BTreeMap<SourceId, f64>,
    pub total: f64,
}

impl StatTable {
    pub fn topology_hash(&self) -> u64 {
        self.topology_hash
    }

    /// `n^s`.
    pub fn probes(&self, source: SourceId) -> Result<f64> {
        self.probes
            .get(&source)
            .copied()
            .ok_or(Error::UnknownSource(source))
    }

    pub fn sources(&self) -> impl Iterator<Item = (SourceId, f64)> + '_ {
        self.probes.iter().map(|(&s, &n)| (s, n))
    }

    /// `n_i(s,1)`; the root of `source` counts every emitted probe.
    pub fn n1(&self, topology: &Topology, node: NodeId, source: SourceId) -> Result<f64> {
        if topology.source(source)?.root == node {
            return self.probes(source);
        }
        self.confirmed
            .get(&(node, source))
            .copied()
            .ok_or(Error::NotInTree {
                source_id: source,
                node,
            })
    }

    /// `n_i(s,0)`: confirmed at the parent (towards `source`) but not below
    /// `node`.
    pub fn n0(&self, topology: &Topology, node: NodeId, source: SourceId) -> Result<f64> {
        let parent = topology.parent(source, node).ok_or(Error::NotInTree {
            source_id: source,
            node,
        })?;
        Ok(self.n1(topology, parent, source)? - self.n1(topology, node, source)?)
    }

    /// `n_i(1)` summed over the given sources.
    pub fn pooled_n1<'a>(
        &self,
        topology: &Topology,
        node: NodeId,
        sources: impl IntoIterator<Item = &'a SourceId>,
    ) -> Result<f64> {
        sources.into_iter().map(|&s| self.n1(topology, node, s)).sum()
    }

    /// `n_i(1) = sum over S(i)`.
    pub fn n1_total(&self, topology: &Topology, node: NodeId) -> Result<f64> {
        self.pooled_n1(topology, node, topology.sources_of(node))
    }

    /// `n_i(0) = sum over S(i)`.
    pub fn n0_total(&self, topology: &Topology, node: NodeId) -> Result<f64> {
        topology
            .sources_of(node)
            .iter()
            .map(|&s| self.n0(topology, node, s))
            .sum()
    }

    /// `gamma_i(s) = n_i(s,1) / n^s`.
    pub fn gamma_hat(&self, topology: &Topology, node: NodeId, source: SourceId) -> Result<f64> {
        let n = self.probes(source)?;
        if n <= 0.0 {
            return Err(Error::input(format!("source {source} sent no probes")));
        }
        Ok(self.n1(topology, node, source)? / n)
    }

    /// Joint count for the children selected by `mask`.
    pub fn joint_count(&self, node: NodeId, source: SourceId, mask: usize) -> Result<f64> {
        let table = self.joint.get(&(node, source)).ok_or(Error::NotInTree {
            source_id: source,
            node,
        })?;
        table
            .get(mask)
            .copied()
            .ok_or_else(|| Error::input(format!("child mask {mask:#b} out of range at node {node}")))
    }

    /// Positions of `children` among the child links of `node`, as a mask.
    pub fn child_mask(topology: &Topology, node: NodeId, children: &[NodeId]) -> Result<usize> {
        let kids = topology.children(node);
        let mut mask = 0usize;
        for c in children {
            let k = kids
                .iter()
                .position(|x| x == c)
                .ok_or_else(|| Error::input(format!("node {c} is not a child of node {node}")))?;
            mask |= 1 << k;
        }
        Ok(mask)
    }

    /// Virtual-link count for the children in `mask`: probes seen below at
    /// least one of them, by inclusion and exclusion over joint counts.
    pub fn merge_children(&self, topology: &Topology, node: NodeId, mask: usize) -> Result<MergedCount> {
        if mask == 0 {
            return Err(Error::input("cannot merge an empty child set"));
        }
        let mut per_source = BTreeMap::new();
        for &s in topology.sources_of(node) {
            let mut sum = 0.0;
            let mut sub = mask;
            while sub != 0 {
                let term = self.joint_count(node, s, sub)?;
                if sub.count_ones() % 2 == 1 {
                    sum += term;
                } else {
                    sum -= term;
                }
                sub = (sub - 1) & mask;
            }
            per_source.insert(s, sum);
        }
        let total = per_source.values().sum();
        Ok(MergedCount { per_source, total })
    }

    /// Expected statistics under `loss` with `counts[s]` probes per source.
    pub fn expected(topology: &Topology, loss: &LossModel, counts: &BTreeMap<SourceId, f64>) -> Result<Self> {
        topology.ensure_valid()?;
        // beta_i: probability a probe at i is seen below it
        let mut beta: BTreeMap<NodeId, f64> = BTreeMap::new();
        for &v in topology.topological_nodes().iter().rev() {
            let links = topology.child_links(v);
            let b = if links.is_empty() {
                1.0
            } else {
                1.0 - links
                    .iter()
                    .map(|&l| {
                        let c = topology.link(l).map(|x| x.child).unwrap_or(v);
                        1.0 - (1.0 - loss.theta(l)) * beta[&c]
                    })
                    .product::<f64>()
            };
            beta.insert(v, b);
        }
        let mut probes = BTreeMap::new();
        let mut confirmed = BTreeMap::new();
        let mut joint = BTreeMap::new();
        for src in topology.source_ids() {
            let n = *counts
                .get(&src)
                .ok_or_else(|| Error::input(format!("no probe count for source {src}")))?;
            probes.insert(src, n);
            let root = topology.source(src)?.root;
            let mut reach = BTreeMap::from([(root, 1.0)]);
            for link in topology.tree_links(src)? {
                let l = topology.link(link)?;
                reach.insert(l.child, reach[&l.parent] * (1.0 - loss.theta(link)));
            }
            for (&v, &a) in &reach {
                if v == root {
                    continue;
                }
                confirmed.insert((v, src), n * a * beta[&v]);
                let kids = topology.child_links(v);
                if kids.is_empty() || kids.len() > MAX_JOINT_DEGREE {
                    continue;
                }
                let seen: Vec<f64> = kids
                    .iter()
                    .map(|&l| {
                        let c = topology.link(l).map(|x| x.child).unwrap_or(v);
                        (1.0 - loss.theta(l)) * beta[&c]
                    })
                    .collect();
                let table = (0..1usize << kids.len())
                    .map(|mask| {
                        if mask == 0 {
                            return n * a * beta[&v];
                        }
                        let p: f64 = (0..kids.len())
                            .filter(|k| mask & (1 << k) != 0)
                            .map(|k| seen[k])
                            .product();
                        n * a * p
                    })
                    .collect();
                joint.insert((v, src), table);
            }
        }
        Ok(StatTable {
            topology_hash: topology.hash64(),
            probes,
            confirmed,
            joint,
        })
    }

    /// CSV export with rows `probes`, `node` and `joint`.
    pub fn write_csv<W: Write>(&self, topology: &Topology, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["kind", "node", "source", "n1", "n0", "children"])?;
        for (&s, &n) in &self.probes {
            out.write_record(["probes", "", &s.to_string(), &fmt_count(n), "", ""])?;
        }
        for (&(v, s), &n1) in &self.confirmed {
            let n0 = self.n0(topology, v, s)?;
            out.write_record([
                "node",
                &v.to_string(),
                &s.to_string(),
                &fmt_count(n1),
                &fmt_count(n0),
                "",
            ])?;
        }
        for (&(v, s), table) in &self.joint {
            let kids = topology.children(v);
            for (mask, &count) in table.iter().enumerate().skip(1) {
                if mask.count_ones() < 2 {
                    continue;
                }
                let members: Vec<String> = (0..kids.len())
                    .filter(|k| mask & (1 << k) != 0)
                    .map(|k| kids[k].to_string())
                    .collect();
                out.write_record([
                    "joint",
                    &v.to_string(),
                    &s.to_string(),
                    &fmt_count(count),
                    "",
                    &members.join(";"),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(topology: &Topology, r: R) -> Result<Self> {
        let mut probes = BTreeMap::new();
        let mut confirmed = BTreeMap::new();
        let mut pairs: Vec<(NodeId, SourceId, Vec<NodeId>, f64)> = Vec::new();
        for rec in csv::Reader::from_reader(r).records() {
            let rec = rec?;
            let get = |k: usize| rec.get(k).unwrap_or("").trim().to_string();
            let bad = || Error::Format(format!("bad statistics row {:?}", rec));
            let source: SourceId = get(2).parse().map_err(|_| bad())?;
            let n1: f64 = get(3).parse().map_err(|_| bad())?;
            match get(0).as_str() {
                "probes" => {
                    probes.insert(source, n1);
                }
                "node" => {
                    let node: NodeId = get(1).parse().map_err(|_| bad())?;
                    confirmed.insert((node, source), n1);
                }
                "joint" => {
                    let node: NodeId = get(1).parse().map_err(|_| bad())?;
                    let kids = get(5)
                        .split(';')
                        .map(|c| c.trim().parse::<NodeId>().map_err(|_| bad()))
                        .collect::<Result<Vec<_>>>()?;
                    pairs.push((node, source, kids, n1));
                }
                other => return Err(Error::Format(format!("unknown statistics row kind {other:?}"))),
            }
        }
        let mut joint: BTreeMap<(NodeId, SourceId), Vec<f64>> = BTreeMap::new();
        for (&(v, s), &n1) in &confirmed {
            let kids = topology.child_links(v);
            if kids.is_empty() || kids.len() > MAX_JOINT_DEGREE {
                continue;
            }
            let mut table = vec![f64::NAN; 1 << kids.len()];
            table[0] = n1;
            for (k, c) in topology.children(v).into_iter().enumerate() {
                table[1 << k] = *confirmed.get(&(c, s)).ok_or(Error::NotInTree {
                    source_id: s,
                    node: c,
                })?;
            }
            joint.insert((v, s), table);
        }
        for (v, s, kids, count) in pairs {
            let mask = Self::child_mask(topology, v, &kids)?;
            let table = joint.get_mut(&(v, s)).ok_or(Error::NotInTree {
                source_id: s,
                node: v,
            })?;
            table[mask] = count;
        }
        if joint.values().any(|t| t.iter().any(|x| x.is_nan())) {
            return Err(Error::Format("statistics file is missing joint counts".into()));
        }
        let table = StatTable {
            topology_hash: topology.hash64(),
            probes,
            confirmed,
            joint,
        };
        table.check_against(topology)?;
        Ok(table)
    }

    /// Check that every tree node of every source has a count.
    pub fn check_against(&self, topology: &Topology) -> Result<()> {
        for src in topology.source_ids() {
            self.probes(src)?;
            let root = topology.source(src)?.root;
            for &v in topology.tree_nodes(src)? {
                if v != root && !self.confirmed.contains_key(&(v, src)) {
                    return Err(Error::Format(format!("missing count for node {v}, source {src}")));
                }
            }
        }
        Ok(())
    }
}

fn fmt_count(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x:e}")
    }
}

/// Probes sent by one source and `(node, n1, joint counts)` per node.
type SourceCounts = (SourceId, f64, Vec<(NodeId, f64, Option<Vec<f64>>)>);

/// Reduce receiver bitmaps to sufficient statistics.
pub fn build_stats(topology: &Topology, obs: &ObservationSet) -> Result<StatTable> {
    topology.ensure_valid()?;
    obs.check_against(topology)?;

    let per_source: Vec<SourceCounts> = topology
        .source_ids()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|src| -> Result<_> {
            let o = &obs.sources[&src];
            let root = topology.source(src)?.root;
            // Y bitmaps bottom-up
            let mut y: BTreeMap<NodeId, FixedBitSet> = BTreeMap::new();
            for &v in topology.tree_nodes(src)?.iter().rev() {
                let kids = topology.children(v);
                let bits = if kids.is_empty() {
                    o.receiver_bits(v)
                        .cloned()
                        .ok_or_else(|| Error::input(format!("no bitmap for receiver {v}")))?
                } else {
                    let mut acc = FixedBitSet::with_capacity(o.probes as usize);
                    for c in &kids {
                        acc.union_with(&y[c]);
                    }
                    acc
                };
                y.insert(v, bits);
            }
            let rows = topology
                .tree_nodes(src)?
                .iter()
                .filter(|&&v| v != root)
                .map(|&v| {
                    let n1 = y[&v].count_ones(..) as f64;
                    let kids = topology.children(v);
                    let table = (!kids.is_empty() && kids.len() <= MAX_JOINT_DEGREE)
                        .then(|| joint_table(&y[&v], &kids, &y));
                    (v, n1, table)
                })
                .collect();
            Ok((src, o.probes as f64, rows))
        })
        .collect::<Result<_>>()?;

    let mut probes = BTreeMap::new();
    let mut confirmed = BTreeMap::new();
    let mut joint = BTreeMap::new();
    for (src, n, rows) in per_source {
        probes.insert(src, n);
        for (v, n1, table) in rows {
            confirmed.insert((v, src), n1);
            if let Some(t) = table {
                joint.insert((v, src), t);
            }
        }
    }
    Ok(StatTable {
        topology_hash: topology.hash64(),
        probes,
        confirmed,
        joint,
    })
}

/// Intersection popcounts for every subset of `kids`, built incrementally
/// from the subset without its lowest member.
fn joint_table(own: &FixedBitSet, kids: &[NodeId], y: &BTreeMap<NodeId, FixedBitSet>) -> Vec<f64> {
    let size = 1usize << kids.len();
    let mut sets: Vec<Option<FixedBitSet>> = vec![None; size];
    let mut counts = vec![0.0; size];
    counts[0] = own.count_ones(..) as f64;
    for mask in 1..size {
        let low = mask.trailing_zeros() as usize;
        let rest = mask & (mask - 1);
        let set = if rest == 0 {
            y[&kids[low]].clone()
        } else {
            let mut s = sets[rest].clone().expect("smaller subsets come first");
            s.intersect_with(&y[&kids[low]]);
            s
        };
        counts[mask] = set.count_ones(..) as f64;
        sets[mask] = Some(set);
    }
    counts
}
