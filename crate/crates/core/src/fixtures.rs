//! Built-in topologies and random topology generators.
//!
//! * `F1`: one source, a root link and two leaves.
//! * `F2`: two sources whose paths meet at a joint node `j` above two
//!   shared leaves.
//! * `F3`: two sources with binary branching, 24 links and a six-link
//!   shared intersection; one intersection link is lossier than the rest.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::sim::LossModel;
use crate::topology::{LinkId, NodeId, SourceId, Topology, TopologyBuilder};

pub const F2_S1: SourceId = 1;
pub const F2_S2: SourceId = 2;
pub const F2_A: NodeId = 1;
pub const F2_B: NodeId = 3;
pub const F2_J: NodeId = 4;
pub const F2_R1: NodeId = 5;
pub const F2_R2: NodeId = 6;

pub const F3_S1: SourceId = 0;
pub const F3_S2: SourceId = 1;
pub const F3_JOINT: NodeId = 3;
/// The lossy intersection link and its low-loss sibling.
pub const F3_HIGH_LOSS_LINK: LinkId = 8;
pub const F3_SIBLING_LINK: LinkId = 9;
pub const F3_INTERSECTION: [LinkId; 6] = [4, 5, 8, 9, 10, 11];

pub fn f1() -> Topology {
    TopologyBuilder::new()
        .source(0, 0)
        .link(1, 0, 1, &[0])
        .link(2, 1, 2, &[0])
        .link(3, 1, 3, &[0])
        .build()
}

pub fn f2() -> Topology {
    let both = [F2_S1, F2_S2];
    TopologyBuilder::new()
        .source(F2_S1, 0)
        .source(F2_S2, 2)
        .link(1, 0, F2_A, &[F2_S1])
        .link(2, F2_A, F2_J, &[F2_S1])
        .link(3, 2, F2_B, &[F2_S2])
        .link(4, F2_B, F2_J, &[F2_S2])
        .link(5, F2_J, F2_R1, &both)
        .link(6, F2_J, F2_R2, &both)
        .build()
}

pub fn f3() -> Topology {
    let s1 = [F3_S1];
    let s2 = [F3_S2];
    let both = [F3_S1, F3_S2];
    TopologyBuilder::new()
        .source(F3_S1, 0)
        .source(F3_S2, 16)
        .link(1, 0, 1, &s1)
        .link(2, 1, 2, &s1)
        .link(3, 1, 3, &s1)
        .link(6, 2, 6, &s1)
        .link(7, 2, 7, &s1)
        .link(12, 6, 12, &s1)
        .link(13, 6, 13, &s1)
        .link(14, 7, 14, &s1)
        .link(15, 7, 15, &s1)
        .link(4, 3, 4, &both)
        .link(5, 3, 5, &both)
        .link(8, 4, 8, &both)
        .link(9, 4, 9, &both)
        .link(10, 5, 10, &both)
        .link(11, 5, 11, &both)
        .link(16, 16, 17, &s2)
        .link(17, 17, 3, &s2)
        .link(18, 17, 18, &s2)
        .link(19, 18, 19, &s2)
        .link(20, 18, 20, &s2)
        .link(21, 19, 21, &s2)
        .link(22, 19, 22, &s2)
        .link(23, 20, 23, &s2)
        .link(24, 20, 24, &s2)
        .build()
}

pub fn f3_loss() -> LossModel {
    let t = f3();
    let mut theta: BTreeMap<LinkId, f64> = t.links().map(|l| (l.id, 0.01)).collect();
    theta.insert(F3_HIGH_LOSS_LINK, 0.10);
    LossModel::new(&t, theta).expect("fixture loss model is valid")
}

pub fn builtin(name: &str) -> Option<Topology> {
    match name.to_ascii_uppercase().as_str() {
        "F1" => Some(f1()),
        "F2" => Some(f2()),
        "F3" => Some(f3()),
        _ => None,
    }
}

/// Default loss model for a built-in topology.
pub fn builtin_loss(name: &str) -> Option<LossModel> {
    let t = builtin(name)?;
    if name.eq_ignore_ascii_case("F3") {
        return Some(f3_loss());
    }
    Some(LossModel::uniform(&t, 0.01).expect("uniform loss is valid"))
}

/// Grows trees link by link, handing out fresh node and link ids.
struct Grower {
    next_node: NodeId,
    next_link: LinkId,
    links: Vec<(LinkId, NodeId, NodeId)>,
}

impl Grower {
    fn new(next_node: NodeId, next_link: LinkId) -> Self {
        Grower {
            next_node,
            next_link,
            links: Vec::new(),
        }
    }

    fn add(&mut self, parent: NodeId) -> NodeId {
        let child = self.next_node;
        self.next_node += 1;
        self.links.push((self.next_link, parent, child));
        self.next_link += 1;
        child
    }

    /// Expand leaves below `start` until `budget` links have been added.
    fn grow<R: Rng + ?Sized>(&mut self, rng: &mut R, start: NodeId, budget: usize) {
        let mut leaves = vec![start];
        let mut used = 0;
        while used + 2 <= budget && !leaves.is_empty() {
            let pick = rng.gen_range(0..leaves.len());
            let node = leaves.swap_remove(pick);
            let k = if used + 3 <= budget && rng.gen_bool(0.3) {
                3
            } else {
                2
            };
            for _ in 0..k {
                leaves.push(self.add(node));
            }
            used += k;
        }
    }
}

/// Random single-source tree with at most `max_links` links. Every internal
/// node below the root link branches into two or three children.
pub fn random_tree<R: Rng + ?Sized>(rng: &mut R, max_links: usize) -> Topology {
    assert!(max_links >= 3, "a branching tree needs at least three links");
    let budget = rng.gen_range(2..=max_links - 1);
    let mut g = Grower::new(1, 1);
    let top = g.add(0);
    g.grow(rng, top, budget);
    let mut b = TopologyBuilder::new().source(0, 0);
    for (id, p, c) in g.links {
        b = b.link(id, p, c, &[0]);
    }
    b.build()
}

/// Random two-source network with at most `max_links` links. The first
/// source owns a random branching tree; the second source reaches one or two
/// non-nested nodes of it, optionally through a side branch of its own.
pub fn random_two_source<R: Rng + ?Sized>(rng: &mut R, max_links: usize) -> Topology {
    assert!(max_links >= 6, "two-source networks need at least six links");
    loop {
        if let Some(t) = try_two_source(rng, max_links) {
            return t;
        }
    }
}

fn try_two_source<R: Rng + ?Sized>(rng: &mut R, max_links: usize) -> Option<Topology> {
    let first_budget = rng.gen_range(2..=(max_links - 4).max(2));
    let mut g = Grower::new(1, 1);
    let top = g.add(0);
    g.grow(rng, top, first_budget);

    let mut kids: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    for &(_, p, c) in &g.links {
        kids.entry(p).or_default().push(c);
    }
    let below = |n: NodeId| {
        let mut out = BTreeSet::from([n]);
        let mut stack = vec![n];
        while let Some(v) = stack.pop() {
            for &c in kids.get(&v).into_iter().flatten() {
                out.insert(c);
                stack.push(c);
            }
        }
        out
    };

    let candidates: Vec<NodeId> = g.links.iter().map(|&(_, _, c)| c).collect();
    let first_joint = *candidates.choose(rng)?;
    let mut joints = vec![first_joint];
    let remaining = max_links - g.links.len();
    if remaining >= 4 && rng.gen_bool(0.35) {
        let blocked = below(first_joint);
        let others: Vec<NodeId> = candidates
            .iter()
            .copied()
            .filter(|&c| !blocked.contains(&c) && !below(c).contains(&first_joint))
            .collect();
        if let Some(&second) = others.choose(rng) {
            joints.push(second);
        }
    }

    let s2_root = g.next_node;
    g.next_node += 1;
    let own_start = g.links.len();
    if joints.len() == 1 && (remaining < 4 || rng.gen_bool(0.5)) {
        g.links.push((g.next_link, s2_root, joints[0]));
        g.next_link += 1;
    } else {
        let hub = g.add(s2_root);
        for &j in &joints {
            g.links.push((g.next_link, hub, j));
            g.next_link += 1;
        }
        let spare = max_links.saturating_sub(g.links.len());
        if joints.len() == 1 || (spare >= 1 && rng.gen_bool(0.5)) {
            let side = g.add(hub);
            let spare = max_links.saturating_sub(g.links.len());
            if spare >= 2 && rng.gen_bool(0.5) {
                g.grow(rng, side, spare.min(3));
            }
        }
    }
    if g.links.len() > max_links {
        return None;
    }

    let shared: BTreeSet<NodeId> = joints.iter().flat_map(|&j| below(j)).collect();
    let mut b = TopologyBuilder::new().source(1, 0).source(2, s2_root);
    for (k, &(id, p, c)) in g.links.iter().enumerate() {
        let members: &[SourceId] = if k >= own_start {
            &[2]
        } else if shared.contains(&p) {
            &[1, 2]
        } else {
            &[1]
        };
        b = b.link(id, p, c, members);
    }
    let t = b.build();
    t.is_valid().then_some(t)
}

/// Random one- or two-source network with at most `max_links` links.
pub fn random_network<R: Rng + ?Sized>(rng: &mut R, max_links: usize) -> Topology {
    if max_links >= 6 && rng.gen_bool(0.5) {
        random_two_source(rng, max_links)
    } else {
        random_tree(rng, max_links)
    }
}

/// Loss model with every link drawn uniformly from `[lo, hi)`.
pub fn random_loss<R: Rng + ?Sized>(rng: &mut R, topology: &Topology, lo: f64, hi: f64) -> LossModel {
    let theta = topology.links().map(|l| (l.id, rng.gen_range(lo..hi))).collect();
    LossModel::new(topology, theta).expect("range lies inside [0, 1)")
}
