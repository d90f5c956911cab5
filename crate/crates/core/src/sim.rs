//! Probe simulation under independent Bernoulli link losses.
//!
//! Every probe owns a fixed window of a ChaCha8 keystream: the stream number
//! is the source id and the probe index selects the word offset. A probe
//! draws one value per link of its source's tree (parents first), whether or
//! not the probe reached the link, so the outcome of a probe never depends on
//! how probes are scheduled across threads.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use fixedbitset::FixedBitSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::{LinkId, NodeId, SourceId, Topology};

/// Probes generated per parallel task. A multiple of 64 keeps chunk
/// bitmaps block aligned.
const CHUNK: u64 = 4096;
const BLOCK_BITS: usize = usize::BITS as usize;
const TRACE_MAGIC: &[u8; 8] = b"MLTOBS01";

/// Per-link loss probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossModel {
    theta: BTreeMap<LinkId, f64>,
}

impl LossModel {
    pub fn new(topology: &Topology, theta: BTreeMap<LinkId, f64>) -> Result<Self> {
        for l in topology.links() {
            match theta.get(&l.id) {
                None => return Err(Error::input(format!("no loss rate for link {}", l.id))),
                Some(&t) if !(0.0..1.0).contains(&t) => {
                    return Err(Error::input(format!(
                        "loss rate {t} of link {} is outside [0, 1)",
                        l.id
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = theta.keys().find(|id| topology.link(**id).is_err()) {
            return Err(Error::UnknownLink(*extra));
        }
        Ok(LossModel { theta })
    }

    pub fn uniform(topology: &Topology, theta: f64) -> Result<Self> {
        Self::new(topology, topology.links().map(|l| (l.id, theta)).collect())
    }

    /// Uniform loss with per-link overrides.
    pub fn with_overrides(
        topology: &Topology,
        default: f64,
        overrides: &BTreeMap<LinkId, f64>,
    ) -> Result<Self> {
        let mut theta: BTreeMap<LinkId, f64> = topology.links().map(|l| (l.id, default)).collect();
        for (&l, &t) in overrides {
            theta.insert(l, t);
        }
        Self::new(topology, theta)
    }

    pub fn theta(&self, link: LinkId) -> f64 {
        self.theta[&link]
    }

    pub fn rates(&self) -> &BTreeMap<LinkId, f64> {
        &self.theta
    }
}

/// Receiver bitmaps of one source: bit `o` of receiver `r` is set when probe
/// `o` was observed at `r`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceObservations {
    pub source: SourceId,
    pub probes: u64,
    pub receivers: Vec<NodeId>,
    pub bits: Vec<FixedBitSet>,
}

impl SourceObservations {
    pub fn receiver_bits(&self, receiver: NodeId) -> Option<&FixedBitSet> {
        let k = self.receivers.iter().position(|&r| r == receiver)?;
        Some(&self.bits[k])
    }

    pub fn observed(&self, receiver: NodeId, probe: u64) -> Option<bool> {
        Some(self.receiver_bits(receiver)?.contains(probe as usize))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationSet {
    pub topology_hash: u64,
    pub seed: u64,
    pub sources: BTreeMap<SourceId, SourceObservations>,
}

impl ObservationSet {
    pub fn probes(&self, source: SourceId) -> Option<u64> {
        self.sources.get(&source).map(|s| s.probes)
    }

    /// Check that the bitmaps fit `topology`.
    pub fn check_against(&self, topology: &Topology) -> Result<()> {
        if self.topology_hash != topology.hash64() {
            return Err(Error::input(
                "observation set was recorded on a different topology",
            ));
        }
        for src in topology.source_ids() {
            let obs = self
                .sources
                .get(&src)
                .ok_or_else(|| Error::input(format!("no observations for source {src}")))?;
            let expected: Vec<NodeId> = topology.receivers(src)?.iter().copied().collect();
            if obs.receivers != expected {
                return Err(Error::input(format!(
                    "receiver list of source {src} does not match"
                )));
            }
            if obs.bits.len() != expected.len() || obs.bits.iter().any(|b| b.len() != obs.probes as usize) {
                return Err(Error::input(format!(
                    "bitmap dimensions of source {src} do not match"
                )));
            }
        }
        if let Some(extra) = self.sources.keys().find(|s| topology.source(**s).is_err()) {
            return Err(Error::UnknownSource(*extra));
        }
        Ok(())
    }

    /// Binary trace: magic, topology hash, seed, source count, then per
    /// source its id, probe count, receivers and receiver-major bitmap words.
    /// All integers little endian.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(TRACE_MAGIC)?;
        w.write_all(&self.topology_hash.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.sources.len() as u32).to_le_bytes())?;
        for obs in self.sources.values() {
            w.write_all(&obs.source.to_le_bytes())?;
            w.write_all(&obs.probes.to_le_bytes())?;
            w.write_all(&(obs.receivers.len() as u32).to_le_bytes())?;
            for r in &obs.receivers {
                w.write_all(&r.to_le_bytes())?;
            }
            for bits in &obs.bits {
                for word in words_u64(bits) {
                    w.write_all(&word.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != TRACE_MAGIC {
            return Err(Error::Format("not an observation trace".into()));
        }
        let topology_hash = read_u64(&mut r)?;
        let seed = read_u64(&mut r)?;
        let count = read_u32(&mut r)?;
        let mut sources = BTreeMap::new();
        for _ in 0..count {
            let source = read_u32(&mut r)?;
            let probes = read_u64(&mut r)?;
            let nrecv = read_u32(&mut r)? as usize;
            let receivers = (0..nrecv).map(|_| read_u32(&mut r)).collect::<Result<Vec<_>>>()?;
            let nwords = probes.div_ceil(64) as usize;
            let mut bits = Vec::with_capacity(nrecv);
            for _ in 0..nrecv {
                let words = (0..nwords)
                    .map(|_| read_u64(&mut r))
                    .collect::<Result<Vec<_>>>()?;
                bits.push(bitset_from_u64(probes as usize, &words)?);
            }
            sources.insert(
                source,
                SourceObservations {
                    source,
                    probes,
                    receivers,
                    bits,
                },
            );
        }
        Ok(ObservationSet {
            topology_hash,
            seed,
            sources,
        })
    }

    pub fn save_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_binary(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_binary(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_binary(std::io::BufReader::new(f))
    }

    /// Textual form, one row per (source, probe, receiver).
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["source", "probe", "receiver", "bit"])?;
        for obs in self.sources.values() {
            for o in 0..obs.probes as usize {
                for (r, bits) in obs.receivers.iter().zip(&obs.bits) {
                    let bit = if bits.contains(o) { "1" } else { "0" };
                    out.write_record([
                        obs.source.to_string(),
                        o.to_string(),
                        r.to_string(),
                        bit.to_string(),
                    ])?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Parse the textual form for `topology`; the header fields that the CSV
    /// does not carry are taken from the topology and `seed`.
    pub fn read_csv<R: Read>(topology: &Topology, seed: u64, r: R) -> Result<Self> {
        let mut rows: BTreeMap<SourceId, Vec<(u64, NodeId, bool)>> = BTreeMap::new();
        for rec in csv::Reader::from_reader(r).records() {
            let rec = rec?;
            let field = |k: usize| -> Result<u64> {
                rec.get(k)
                    .and_then(|v| v.trim().parse().ok())
                    .ok_or_else(|| Error::Format(format!("bad trace row {:?}", rec)))
            };
            let bit = match field(3)? {
                0 => false,
                1 => true,
                _ => return Err(Error::Format(format!("bit must be 0 or 1 in {:?}", rec))),
            };
            rows.entry(field(0)? as SourceId)
                .or_default()
                .push((field(1)?, field(2)? as NodeId, bit));
        }
        let mut sources = BTreeMap::new();
        for src in topology.source_ids() {
            let receivers: Vec<NodeId> = topology.receivers(src)?.iter().copied().collect();
            let entries = rows.remove(&src).unwrap_or_default();
            let probes = entries.iter().map(|e| e.0 + 1).max().unwrap_or(0);
            let mut bits = vec![FixedBitSet::with_capacity(probes as usize); receivers.len()];
            for (o, r, bit) in entries {
                let k = receivers
                    .iter()
                    .position(|&x| x == r)
                    .ok_or_else(|| Error::Format(format!("node {r} is not a receiver of source {src}")))?;
                bits[k].set(o as usize, bit);
            }
            sources.insert(
                src,
                SourceObservations {
                    source: src,
                    probes,
                    receivers,
                    bits,
                },
            );
        }
        if let Some(src) = rows.keys().next() {
            return Err(Error::UnknownSource(*src));
        }
        Ok(ObservationSet {
            topology_hash: topology.hash64(),
            seed,
            sources,
        })
    }
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn words_u64(bits: &FixedBitSet) -> Vec<u64> {
    let nwords = bits.len().div_ceil(64);
    (0..nwords)
        .map(|w| {
            (0..64)
                .filter(|b| {
                    let i = w * 64 + b;
                    i < bits.len() && bits.contains(i)
                })
                .fold(0u64, |acc, b| acc | (1u64 << b))
        })
        .collect()
}

fn bitset_from_u64(len: usize, words: &[u64]) -> Result<FixedBitSet> {
    let mut bits = FixedBitSet::with_capacity(len);
    for (w, &word) in words.iter().enumerate() {
        let mut rest = word;
        while rest != 0 {
            let b = rest.trailing_zeros() as usize;
            let i = w * 64 + b;
            if i >= len {
                return Err(Error::Format("bitmap has bits beyond the probe count".into()));
            }
            bits.insert(i);
            rest &= rest - 1;
        }
    }
    Ok(bits)
}

/// Actual per-link passes and losses, split by source, for the simulated
/// probes that reached each link.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroundTruth {
    tally: BTreeMap<(LinkId, SourceId), (u64, u64)>,
}

impl GroundTruth {
    /// `(passes, losses)` of `link` for probes of `source`.
    pub fn tally(&self, link: LinkId, source: SourceId) -> (u64, u64) {
        self.tally.get(&(link, source)).copied().unwrap_or((0, 0))
    }

    /// `(passes, losses)` of `link` over all sources.
    pub fn link_tally(&self, link: LinkId) -> (u64, u64) {
        self.tally
            .range((link, SourceId::MIN)..=(link, SourceId::MAX))
            .fold((0, 0), |(p, l), (_, &(a, b))| (p + a, l + b))
    }

    /// Observed loss frequency of a chain of links (top to bottom): probes
    /// that entered the first link but did not leave the last one.
    pub fn chain_loss(&self, chain: &[LinkId]) -> Option<f64> {
        let (first, last) = (chain.first()?, chain.last()?);
        let (p, l) = self.link_tally(*first);
        let entered = p + l;
        let (survived, _) = self.link_tally(*last);
        (entered > 0).then(|| 1.0 - survived as f64 / entered as f64)
    }

    pub fn entries(&self) -> impl Iterator<Item = ((LinkId, SourceId), (u64, u64))> + '_ {
        self.tally.iter().map(|(k, v)| (*k, *v))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["link", "source", "passes", "losses"])?;
        for ((link, src), (p, l)) in self.entries() {
            out.write_record([link.to_string(), src.to_string(), p.to_string(), l.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// One source's tree flattened for fast per-probe replay.
struct Plan {
    source: SourceId,
    /// (link id, parent slot, child slot) with parents first; slot 0 is the root.
    steps: Vec<(LinkId, usize, usize)>,
    theta: Vec<f64>,
    slots: usize,
    receiver_slots: Vec<usize>,
    receivers: Vec<NodeId>,
}

impl Plan {
    fn new(topology: &Topology, loss: &LossModel, source: SourceId) -> Result<Self> {
        let root = topology.source(source)?.root;
        let mut slot = BTreeMap::from([(root, 0usize)]);
        let mut steps = Vec::new();
        let mut theta = Vec::new();
        for link in topology.tree_links(source)? {
            let l = topology.link(link)?;
            let next = slot.len();
            let child = *slot.entry(l.child).or_insert(next);
            steps.push((link, slot[&l.parent], child));
            theta.push(loss.theta(link));
        }
        let receivers: Vec<NodeId> = topology.receivers(source)?.iter().copied().collect();
        let receiver_slots = receivers.iter().map(|r| slot[r]).collect();
        Ok(Plan {
            source,
            steps,
            theta,
            slots: slot.len(),
            receiver_slots,
            receivers,
        })
    }
}

struct ChunkResult {
    blocks: Vec<Vec<usize>>,
    tally: Vec<(u64, u64)>,
}

fn run_chunk(plan: &Plan, seed: u64, first: u64, count: u64) -> ChunkResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(plan.source as u64);
    // each f64 draw consumes two 32-bit words
    rng.set_word_pos(first as u128 * 2 * plan.steps.len() as u128);

    let nblocks = (count as usize).div_ceil(BLOCK_BITS);
    let mut blocks = vec![vec![0usize; nblocks]; plan.receivers.len()];
    let mut tally = vec![(0u64, 0u64); plan.steps.len()];
    let mut reached = vec![false; plan.slots];
    for o in 0..count as usize {
        reached[0] = true;
        for (k, &(_, parent, child)) in plan.steps.iter().enumerate() {
            let lost = rng.gen::<f64>() < plan.theta[k];
            let arrived = reached[parent];
            reached[child] = arrived && !lost;
            if arrived {
                if lost {
                    tally[k].1 += 1;
                } else {
                    tally[k].0 += 1;
                }
            }
        }
        for (r, &s) in plan.receiver_slots.iter().enumerate() {
            if reached[s] {
                blocks[r][o / BLOCK_BITS] |= 1 << (o % BLOCK_BITS);
            }
        }
    }
    ChunkResult { blocks, tally }
}

/// Simulate `counts[s]` probes from every source, using probe indices
/// starting at `first_probe`. Disjoint index windows give independent
/// samples from the same seed.
pub fn simulate_window(
    topology: &Topology,
    loss: &LossModel,
    counts: &BTreeMap<SourceId, u64>,
    seed: u64,
    first_probe: u64,
) -> Result<(ObservationSet, GroundTruth)> {
    topology.ensure_valid()?;
    let checked = LossModel::new(topology, loss.theta.clone())?;
    let mut sources = BTreeMap::new();
    let mut truth = GroundTruth::default();
    for src in topology.source_ids() {
        let n = *counts
            .get(&src)
            .ok_or_else(|| Error::input(format!("no probe count for source {src}")))?;
        let plan = Plan::new(topology, &checked, src)?;
        let starts: Vec<u64> = (0..n.div_ceil(CHUNK)).map(|c| c * CHUNK).collect();
        let chunks: Vec<ChunkResult> = starts
            .par_iter()
            .map(|&start| run_chunk(&plan, seed, first_probe + start, CHUNK.min(n - start)))
            .collect();

        let mut bits = Vec::with_capacity(plan.receivers.len());
        for r in 0..plan.receivers.len() {
            let blocks = chunks.iter().flat_map(|c| c.blocks[r].iter().copied());
            bits.push(FixedBitSet::with_capacity_and_blocks(n as usize, blocks));
        }
        for (k, &(link, _, _)) in plan.steps.iter().enumerate() {
            let (p, l) = chunks
                .iter()
                .fold((0, 0), |(p, l), c| (p + c.tally[k].0, l + c.tally[k].1));
            truth.tally.insert((link, src), (p, l));
        }
        sources.insert(
            src,
            SourceObservations {
                source: src,
                probes: n,
                receivers: plan.receivers,
                bits,
            },
        );
    }
    if let Some(extra) = counts.keys().find(|s| topology.source(**s).is_err()) {
        return Err(Error::UnknownSource(*extra));
    }
    Ok((
        ObservationSet {
            topology_hash: topology.hash64(),
            seed,
            sources,
        },
        truth,
    ))
}

pub fn simulate(
    topology: &Topology,
    loss: &LossModel,
    counts: &BTreeMap<SourceId, u64>,
    seed: u64,
) -> Result<(ObservationSet, GroundTruth)> {
    simulate_window(topology, loss, counts, seed, 0)
}

/// The same probe count for every source.
pub fn equal_counts(topology: &Topology, n: u64) -> BTreeMap<SourceId, u64> {
    topology.source_ids().map(|s| (s, n)).collect()
}
