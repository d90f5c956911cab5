//! General networks covered by overlapping source-rooted multicast trees.
//!
//! A [`Topology`] stores every physical link once and records which source
//! trees use it. Derived structures (per-source parent maps, receiver sets,
//! the sources reaching each node) are computed at construction so that all
//! queries are pure reads afterwards.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type NodeId = u32;
pub type LinkId = u32;
pub type SourceId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Link {
    pub id: LinkId,
    pub parent: NodeId,
    pub child: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Source {
    pub id: SourceId,
    pub root: NodeId,
}

/// JSON interchange form of a topology.
#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyFile {
    pub nodes: Vec<NodeId>,
    pub links: Vec<Link>,
    pub sources: Vec<Source>,
    /// link id -> ids of the sources whose multicast tree uses the link
    pub tree_membership: BTreeMap<LinkId, Vec<SourceId>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Subject {
    Node(NodeId),
    Link(LinkId),
    Source(SourceId),
}

impl fmt::Display for Subject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Subject::Node(id) => write!(f, "node {id}"),
            Subject::Link(id) => write!(f, "link {id}"),
            Subject::Source(id) => write!(f, "source {id}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Rule {
    DuplicateId,
    UnknownReference,
    SelfLoop,
    RootHasParent,
    SharedRoot,
    RootLinkRule,
    NoMembership,
    MultipleParents,
    Unreachable,
    Cycle,
    SubtreeConsistency,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Rule::DuplicateId => "duplicate id",
            Rule::UnknownReference => "unknown reference",
            Rule::SelfLoop => "self loop",
            Rule::RootHasParent => "root has parent",
            Rule::SharedRoot => "shared root",
            Rule::RootLinkRule => "root link rule",
            Rule::NoMembership => "no tree membership",
            Rule::MultipleParents => "multiple parents",
            Rule::Unreachable => "unreachable",
            Rule::Cycle => "cycle",
            Rule::SubtreeConsistency => "subtree consistency",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Violation {
    pub rule: Rule,
    pub subject: Subject,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({}): {}", self.rule, self.subject, self.message)
    }
}

fn violation(rule: Rule, subject: Subject, message: impl Into<String>) -> Violation {
    Violation {
        rule,
        subject,
        message: message.into(),
    }
}

/// One source's multicast tree as seen through the membership table.
#[derive(Debug, Clone, Default, PartialEq)]
struct SourceTree {
    root: NodeId,
    /// Node -> link entering it within this tree (first one if several).
    parent_link: BTreeMap<NodeId, LinkId>,
    /// Node -> links leaving it within this tree.
    children: BTreeMap<NodeId, Vec<LinkId>>,
    /// Reachable nodes in breadth-first order from the root.
    order: Vec<NodeId>,
    receivers: BTreeSet<NodeId>,
    /// Links of this source whose parent is never reached from the root.
    stray_links: Vec<LinkId>,
    /// Nodes entered by two or more links of this tree.
    multi_parent: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    nodes: BTreeSet<NodeId>,
    links: BTreeMap<LinkId, Link>,
    sources: BTreeMap<SourceId, Source>,
    membership: BTreeMap<LinkId, BTreeSet<SourceId>>,
    intake: Vec<Violation>,
    out_links: BTreeMap<NodeId, Vec<LinkId>>,
    in_links: BTreeMap<NodeId, Vec<LinkId>>,
    trees: BTreeMap<SourceId, SourceTree>,
    node_sources: BTreeMap<NodeId, BTreeSet<SourceId>>,
}

/// The joint nodes of a topology together with `S(i)` for every node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointNodeSet {
    pub joint: BTreeSet<NodeId>,
    /// `S(i)`: sources whose tree contains node `i`.
    pub node_sources: BTreeMap<NodeId, BTreeSet<SourceId>>,
    /// For each joint node, the parent through which each source enters.
    pub entry_parents: BTreeMap<NodeId, BTreeMap<SourceId, NodeId>>,
}

impl JointNodeSet {
    pub fn contains(&self, node: NodeId) -> bool {
        self.joint.contains(&node)
    }
}

/// Result of collapsing serial chains into composite segments.
#[derive(Debug, Clone)]
pub struct SerialCollapse {
    /// Topology whose links are the segments; a segment keeps the id of its
    /// first physical link.
    pub topology: Topology,
    /// Segment id -> physical links from top to bottom.
    pub segments: BTreeMap<LinkId, Vec<LinkId>>,
}

impl SerialCollapse {
    pub fn physical_links(&self, segment: LinkId) -> &[LinkId] {
        self.segments.get(&segment).map(Vec::as_slice).unwrap_or(&[])
    }
}

impl Topology {
    pub fn from_file(file: TopologyFile) -> Self {
        let mut intake = Vec::new();
        let mut nodes = BTreeSet::new();
        for &n in &file.nodes {
            if !nodes.insert(n) {
                intake.push(violation(
                    Rule::DuplicateId,
                    Subject::Node(n),
                    "node id listed twice",
                ));
            }
        }
        let mut links = BTreeMap::new();
        for l in &file.links {
            if links.insert(l.id, *l).is_some() {
                intake.push(violation(
                    Rule::DuplicateId,
                    Subject::Link(l.id),
                    "link id listed twice",
                ));
            }
        }
        let mut sources = BTreeMap::new();
        for s in &file.sources {
            if sources.insert(s.id, *s).is_some() {
                intake.push(violation(
                    Rule::DuplicateId,
                    Subject::Source(s.id),
                    "source id listed twice",
                ));
            }
        }
        let mut membership = BTreeMap::new();
        for (&link, members) in &file.tree_membership {
            let set: BTreeSet<SourceId> = members.iter().copied().collect();
            if set.len() != members.len() {
                intake.push(violation(
                    Rule::DuplicateId,
                    Subject::Link(link),
                    "source listed twice in tree membership",
                ));
            }
            membership.insert(link, set);
        }
        Self::assemble(nodes, links, sources, membership, intake)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TopologyFile = serde_json::from_str(text)?;
        Ok(Self::from_file(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_file(&self) -> TopologyFile {
        TopologyFile {
            nodes: self.nodes.iter().copied().collect(),
            links: self.links.values().copied().collect(),
            sources: self.sources.values().copied().collect(),
            tree_membership: self
                .membership
                .iter()
                .map(|(&l, s)| (l, s.iter().copied().collect()))
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("topology serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    /// Stable 64-bit digest of the canonical JSON form.
    pub fn hash64(&self) -> u64 {
        let canonical = serde_json::to_vec(&self.to_file()).expect("topology serializes");
        let digest = Sha256::digest(&canonical);
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(bytes)
    }

    fn assemble(
        nodes: BTreeSet<NodeId>,
        links: BTreeMap<LinkId, Link>,
        sources: BTreeMap<SourceId, Source>,
        membership: BTreeMap<LinkId, BTreeSet<SourceId>>,
        intake: Vec<Violation>,
    ) -> Self {
        let mut out_links: BTreeMap<NodeId, Vec<LinkId>> = BTreeMap::new();
        let mut in_links: BTreeMap<NodeId, Vec<LinkId>> = BTreeMap::new();
        for l in links.values() {
            out_links.entry(l.parent).or_default().push(l.id);
            in_links.entry(l.child).or_default().push(l.id);
        }

        let mut trees = BTreeMap::new();
        let mut node_sources: BTreeMap<NodeId, BTreeSet<SourceId>> = BTreeMap::new();
        for s in sources.values() {
            let tree = build_tree(s, &links, &membership);
            for &n in &tree.order {
                node_sources.entry(n).or_default().insert(s.id);
            }
            trees.insert(s.id, tree);
        }

        Topology {
            nodes,
            links,
            sources,
            membership,
            intake,
            out_links,
            in_links,
            trees,
            node_sources,
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().copied()
    }

    pub fn links(&self) -> impl Iterator<Item = &Link> + '_ {
        self.links.values()
    }

    pub fn link(&self, id: LinkId) -> Result<&Link> {
        self.links.get(&id).ok_or(Error::UnknownLink(id))
    }

    pub fn num_links(&self) -> usize {
        self.links.len()
    }

    pub fn sources(&self) -> impl Iterator<Item = &Source> + '_ {
        self.sources.values()
    }

    pub fn source_ids(&self) -> impl Iterator<Item = SourceId> + '_ {
        self.sources.keys().copied()
    }

    pub fn source(&self, id: SourceId) -> Result<&Source> {
        self.sources.get(&id).ok_or(Error::UnknownSource(id))
    }

    pub fn has_node(&self, node: NodeId) -> bool {
        self.nodes.contains(&node)
    }

    /// Sources whose tree uses `link`.
    pub fn membership(&self, link: LinkId) -> &BTreeSet<SourceId> {
        static EMPTY: BTreeSet<SourceId> = BTreeSet::new();
        self.membership.get(&link).unwrap_or(&EMPTY)
    }

    /// `S(i)`: the sources whose tree contains `node`.
    pub fn sources_of(&self, node: NodeId) -> &BTreeSet<SourceId> {
        static EMPTY: BTreeSet<SourceId> = BTreeSet::new();
        self.node_sources.get(&node).unwrap_or(&EMPTY)
    }

    pub fn is_root(&self, node: NodeId) -> bool {
        self.sources.values().any(|s| s.root == node)
    }

    pub fn root_source(&self, node: NodeId) -> Option<SourceId> {
        self.sources.values().find(|s| s.root == node).map(|s| s.id)
    }

    pub fn child_links(&self, node: NodeId) -> &[LinkId] {
        self.out_links.get(&node).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn parent_links(&self, node: NodeId) -> &[LinkId] {
        self.in_links.get(&node).map(Vec::as_slice).unwrap_or(&[])
    }

    /// `d_i`: child nodes of `node` (identical for every source reaching it
    /// in a valid topology).
    pub fn children(&self, node: NodeId) -> Vec<NodeId> {
        self.child_links(node)
            .iter()
            .map(|l| self.links[l].child)
            .collect()
    }

    pub fn is_leaf(&self, node: NodeId) -> bool {
        self.child_links(node).is_empty()
    }

    /// Link entering `node` in the tree of `source`.
    pub fn parent_link(&self, source: SourceId, node: NodeId) -> Option<LinkId> {
        self.trees.get(&source)?.parent_link.get(&node).copied()
    }

    /// `f^s(i)`.
    pub fn parent(&self, source: SourceId, node: NodeId) -> Option<NodeId> {
        self.parent_link(source, node).map(|l| self.links[&l].parent)
    }

    pub fn in_tree(&self, source: SourceId, node: NodeId) -> bool {
        self.sources_of(node).contains(&source)
    }

    /// `R(s)`: leaves of the tree of `source`.
    pub fn receivers(&self, source: SourceId) -> Result<&BTreeSet<NodeId>> {
        self.trees
            .get(&source)
            .map(|t| &t.receivers)
            .ok_or(Error::UnknownSource(source))
    }

    /// Nodes of the tree of `source` in breadth-first order from its root.
    pub fn tree_nodes(&self, source: SourceId) -> Result<&[NodeId]> {
        self.trees
            .get(&source)
            .map(|t| t.order.as_slice())
            .ok_or(Error::UnknownSource(source))
    }

    /// Links of the tree of `source`, parents before children.
    pub fn tree_links(&self, source: SourceId) -> Result<Vec<LinkId>> {
        let tree = self.trees.get(&source).ok_or(Error::UnknownSource(source))?;
        Ok(tree
            .order
            .iter()
            .flat_map(|n| tree.children.get(n).into_iter().flatten().copied())
            .collect())
    }

    fn check_member(&self, source: SourceId, node: NodeId) -> Result<()> {
        if !self.sources.contains_key(&source) {
            return Err(Error::UnknownSource(source));
        }
        if !self.nodes.contains(&node) {
            return Err(Error::UnknownNode(node));
        }
        if !self.in_tree(source, node) {
            return Err(Error::NotInTree {
                source_id: source,
                node,
            });
        }
        Ok(())
    }

    /// `Rs(i)`: receivers of the tree of `source` at or below `node`.
    pub fn subtree_receivers(&self, source: SourceId, node: NodeId) -> Result<BTreeSet<NodeId>> {
        self.check_member(source, node)?;
        let tree = &self.trees[&source];
        let mut out = BTreeSet::new();
        let mut stack = vec![node];
        while let Some(n) = stack.pop() {
            match tree.children.get(&n) {
                Some(kids) if !kids.is_empty() => {
                    stack.extend(kids.iter().map(|l| self.links[l].child));
                }
                _ => {
                    out.insert(n);
                }
            }
        }
        Ok(out)
    }

    /// `a(s,i)`: ancestors of `node` towards `source`, nearest first and
    /// ending at the root.
    pub fn ancestors(&self, source: SourceId, node: NodeId) -> Result<Vec<NodeId>> {
        self.check_member(source, node)?;
        let mut out = Vec::new();
        let mut cur = node;
        while let Some(p) = self.parent(source, cur) {
            if out.len() > self.nodes.len() {
                return Err(Error::InvalidTopology(format!(
                    "parent chain of node {node} for source {source} does not terminate"
                )));
            }
            out.push(p);
            cur = p;
        }
        Ok(out)
    }

    /// Roots of maximal intersections: nodes reached by several sources
    /// through different parents.
    pub fn joint_nodes(&self) -> JointNodeSet {
        let mut joint = BTreeSet::new();
        let mut entry_parents = BTreeMap::new();
        for (&node, srcs) in &self.node_sources {
            if srcs.len() < 2 {
                continue;
            }
            let parents: BTreeMap<SourceId, NodeId> = srcs
                .iter()
                .filter_map(|&s| self.parent(s, node).map(|p| (s, p)))
                .collect();
            let distinct: BTreeSet<NodeId> = parents.values().copied().collect();
            if distinct.len() > 1 {
                joint.insert(node);
                entry_parents.insert(node, parents);
            }
        }
        JointNodeSet {
            joint,
            node_sources: self.node_sources.clone(),
            entry_parents,
        }
    }

    /// Nodes ordered so that every parent precedes its children.
    pub fn topological_nodes(&self) -> Vec<NodeId> {
        let mut indeg: BTreeMap<NodeId, usize> = self.nodes.iter().map(|&n| (n, 0)).collect();
        for l in self.links.values() {
            *indeg.entry(l.child).or_default() += 1;
            indeg.entry(l.parent).or_default();
        }
        let mut queue: VecDeque<NodeId> = indeg.iter().filter(|(_, &d)| d == 0).map(|(&n, _)| n).collect();
        let mut out = Vec::with_capacity(indeg.len());
        while let Some(n) = queue.pop_front() {
            out.push(n);
            for l in self.child_links(n) {
                let c = self.links[l].child;
                let d = indeg.get_mut(&c).expect("child indexed");
                *d -= 1;
                if *d == 0 {
                    queue.push_back(c);
                }
            }
        }
        out
    }

    /// Every invariant violation; empty iff the topology is well formed.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = self.intake.clone();

        for l in self.links.values() {
            for (end, n) in [("parent", l.parent), ("child", l.child)] {
                if !self.nodes.contains(&n) {
                    out.push(violation(
                        Rule::UnknownReference,
                        Subject::Link(l.id),
                        format!("{end} node {n} is not declared"),
                    ));
                }
            }
            if l.parent == l.child {
                out.push(violation(
                    Rule::SelfLoop,
                    Subject::Link(l.id),
                    "parent equals child",
                ));
            }
            match self.membership.get(&l.id) {
                Some(m) if !m.is_empty() => {}
                _ => out.push(violation(
                    Rule::NoMembership,
                    Subject::Link(l.id),
                    "link belongs to no source tree",
                )),
            }
        }

        for (&link, members) in &self.membership {
            if !self.links.contains_key(&link) {
                out.push(violation(
                    Rule::UnknownReference,
                    Subject::Link(link),
                    "tree membership names an undeclared link",
                ));
            }
            for s in members {
                if !self.sources.contains_key(s) {
                    out.push(violation(
                        Rule::UnknownReference,
                        Subject::Link(link),
                        format!("tree membership names undeclared source {s}"),
                    ));
                }
            }
        }

        let mut roots: BTreeMap<NodeId, SourceId> = BTreeMap::new();
        for s in self.sources.values() {
            if !self.nodes.contains(&s.root) {
                out.push(violation(
                    Rule::UnknownReference,
                    Subject::Source(s.id),
                    format!("root node {} is not declared", s.root),
                ));
            }
            if let Some(other) = roots.insert(s.root, s.id) {
                out.push(violation(
                    Rule::SharedRoot,
                    Subject::Source(s.id),
                    format!("root node {} is also the root of source {other}", s.root),
                ));
            }
            if !self.parent_links(s.root).is_empty() {
                out.push(violation(
                    Rule::RootHasParent,
                    Subject::Node(s.root),
                    format!("root of source {} has an incoming link", s.id),
                ));
            }
            let tree = &self.trees[&s.id];
            let kids = tree.children.get(&s.root).map_or(0, Vec::len);
            if kids != 1 {
                out.push(violation(
                    Rule::RootLinkRule,
                    Subject::Node(s.root),
                    format!(
                        "root of source {} has {kids} children, expected exactly one",
                        s.id
                    ),
                ));
            }
            for &l in &tree.stray_links {
                out.push(violation(
                    Rule::Unreachable,
                    Subject::Link(l),
                    format!(
                        "link is assigned to source {} but not reachable from its root",
                        s.id
                    ),
                ));
            }
            for &n in &tree.multi_parent {
                out.push(violation(
                    Rule::MultipleParents,
                    Subject::Node(n),
                    format!("node has several parents within the tree of source {}", s.id),
                ));
            }
        }

        let order = self.topological_nodes();
        if order.len() < self.nodes.len() {
            let seen: BTreeSet<NodeId> = order.into_iter().collect();
            for &n in self.nodes.iter().filter(|n| !seen.contains(n)) {
                out.push(violation(
                    Rule::Cycle,
                    Subject::Node(n),
                    "node lies on a directed cycle",
                ));
            }
        }

        for &n in &self.nodes {
            if !self.node_sources.contains_key(&n) {
                out.push(violation(
                    Rule::Unreachable,
                    Subject::Node(n),
                    "node is not reached by any source",
                ));
            }
        }

        for (&node, srcs) in &self.node_sources {
            let mut sets = srcs.iter().map(|s| {
                let kids: BTreeSet<LinkId> = self.trees[s]
                    .children
                    .get(&node)
                    .into_iter()
                    .flatten()
                    .copied()
                    .collect();
                (*s, kids)
            });
            if let Some((first_s, first)) = sets.next() {
                for (s, kids) in sets {
                    if kids != first {
                        out.push(violation(
                            Rule::SubtreeConsistency,
                            Subject::Node(node),
                            format!("sources {first_s} and {s} use different child links"),
                        ));
                    }
                }
            }
        }

        out.sort();
        out.dedup();
        out
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_empty()
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            let msgs: Vec<String> = v.iter().map(ToString::to_string).collect();
            Err(Error::InvalidTopology(msgs.join("; ")))
        }
    }

    /// Replace every serial chain (through non-root nodes with exactly one
    /// child) by a single composite link.
    pub fn collapse_serial(&self) -> SerialCollapse {
        let serial: BTreeSet<NodeId> = self
            .nodes
            .iter()
            .copied()
            .filter(|&n| !self.is_root(n) && self.child_links(n).len() == 1)
            .collect();

        let mut links = BTreeMap::new();
        let mut membership = BTreeMap::new();
        let mut segments = BTreeMap::new();
        for l in self.links.values() {
            if serial.contains(&l.parent) {
                continue;
            }
            let mut chain = vec![l.id];
            let mut end = l.child;
            while serial.contains(&end) && chain.len() <= self.links.len() {
                let next = self.child_links(end)[0];
                chain.push(next);
                end = self.links[&next].child;
            }
            links.insert(
                l.id,
                Link {
                    id: l.id,
                    parent: l.parent,
                    child: end,
                },
            );
            membership.insert(l.id, self.membership(l.id).clone());
            segments.insert(l.id, chain);
        }
        let nodes = self
            .nodes
            .iter()
            .copied()
            .filter(|n| !serial.contains(n))
            .collect();
        SerialCollapse {
            topology: Self::assemble(nodes, links, self.sources.clone(), membership, Vec::new()),
            segments,
        }
    }
}

fn build_tree(
    source: &Source,
    links: &BTreeMap<LinkId, Link>,
    membership: &BTreeMap<LinkId, BTreeSet<SourceId>>,
) -> SourceTree {
    let own: Vec<&Link> = links
        .values()
        .filter(|l| membership.get(&l.id).is_some_and(|m| m.contains(&source.id)))
        .collect();
    let mut children: BTreeMap<NodeId, Vec<LinkId>> = BTreeMap::new();
    for l in &own {
        children.entry(l.parent).or_default().push(l.id);
    }

    let mut parent_link = BTreeMap::new();
    let mut multi_parent = Vec::new();
    let mut order = Vec::new();
    let mut seen = BTreeSet::new();
    let mut queue = VecDeque::from([source.root]);
    seen.insert(source.root);
    while let Some(n) = queue.pop_front() {
        order.push(n);
        for l in children.get(&n).into_iter().flatten() {
            let child = links[l].child;
            if seen.insert(child) {
                parent_link.insert(child, *l);
                queue.push_back(child);
            } else if !multi_parent.contains(&child) {
                multi_parent.push(child);
            }
        }
    }
    let stray_links = own
        .iter()
        .filter(|l| !seen.contains(&l.parent))
        .map(|l| l.id)
        .collect();
    let receivers = order
        .iter()
        .copied()
        .filter(|n| children.get(n).is_none_or(Vec::is_empty))
        .collect();
    SourceTree {
        root: source.root,
        parent_link,
        children,
        order,
        receivers,
        stray_links,
        multi_parent,
    }
}

/// Incremental construction, mostly for fixtures and tests.
#[derive(Debug, Default, Clone)]
pub struct TopologyBuilder {
    file: TopologyFile,
}

impl TopologyBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn touch(&mut self, node: NodeId) {
        if !self.file.nodes.contains(&node) {
            self.file.nodes.push(node);
        }
    }

    pub fn source(mut self, id: SourceId, root: NodeId) -> Self {
        self.touch(root);
        self.file.sources.push(Source { id, root });
        self
    }

    pub fn link(mut self, id: LinkId, parent: NodeId, child: NodeId, sources: &[SourceId]) -> Self {
        self.touch(parent);
        self.touch(child);
        self.file.links.push(Link { id, parent, child });
        self.file.tree_membership.insert(id, sources.to_vec());
        self
    }

    pub fn build(self) -> Topology {
        Topology::from_file(self.file)
    }
}
