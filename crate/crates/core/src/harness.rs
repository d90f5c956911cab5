//! Repeated simulate / reduce / estimate runs and their relative errors.
//!
//! For every seed, each group size gets its own disjoint window of probe
//! indices, so the groups of one seed are independent samples. The actual
//! loss rate of a link in a run is taken from the simulator's tally of
//! passes and losses in that window, not from the configured model.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consistency::{format_flags, Flag};
use crate::error::{Error, Result};
use crate::fixtures;
use crate::likelihood::{self, OracleConfig};
use crate::path::{estimate_all_paths, PathEstimatorConfig};
use crate::pipeline::run_pipeline;
use crate::sim::{simulate_window, LossModel};
use crate::stats::build_stats;
use crate::topology::{LinkId, SourceId, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    #[default]
    Path,
    Decompose,
    Oracle,
}

impl EstimatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::Path => "path",
            EstimatorKind::Decompose => "decompose",
            EstimatorKind::Oracle => "oracle",
        }
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "path" => Ok(EstimatorKind::Path),
            "decompose" => Ok(EstimatorKind::Decompose),
            "oracle" => Ok(EstimatorKind::Oracle),
            other => Err(Error::input(format!("unknown estimator {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LossSpec {
    /// Loss rate of every link not listed in `links`.
    pub default: f64,
    #[serde(default)]
    pub links: BTreeMap<LinkId, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// A built-in name (`F1`, `F2`, `F3`) or a topology file.
    pub topology: String,
    /// Defaults to the built-in loss model of a built-in topology.
    #[serde(default)]
    pub loss: Option<LossSpec>,
    /// Probes available per source and seed; defaults to the sum of the
    /// group sizes.
    #[serde(default)]
    pub probes_per_source: Option<u64>,
    pub group_sizes: Vec<u64>,
    #[serde(default = "one")]
    pub replications: usize,
    /// Explicit seeds; otherwise `base_seed, base_seed + 1, ...`.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub estimator: EstimatorKind,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn one() -> usize {
    1
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn seeds(&self) -> Vec<u64> {
        match &self.seeds {
            Some(s) => s.clone(),
            None => (0..self.replications as u64)
                .map(|k| self.base_seed + k)
                .collect(),
        }
    }

    pub fn resolve_topology(&self) -> Result<Topology> {
        match fixtures::builtin(&self.topology) {
            Some(t) => Ok(t),
            None => Topology::load(&self.topology),
        }
    }

    pub fn resolve_loss(&self, topology: &Topology) -> Result<LossModel> {
        match &self.loss {
            Some(spec) => LossModel::with_overrides(topology, spec.default, &spec.links),
            None => fixtures::builtin_loss(&self.topology)
                .ok_or_else(|| Error::input("a loss model is required for a topology file")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_sizes.is_empty() || self.group_sizes.contains(&0) {
            return Err(Error::input("group sizes must be positive"));
        }
        if self.seeds().is_empty() {
            return Err(Error::input("at least one replication is required"));
        }
        let need: u64 = self.group_sizes.iter().sum();
        if let Some(n) = self.probes_per_source {
            if need > n {
                return Err(Error::input(format!(
                    "group sizes need {need} probes per source, only {n} are available"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorRow {
    pub seed: u64,
    pub group_size: u64,
    /// Segment of the collapsed topology.
    pub link: LinkId,
    pub links: Vec<LinkId>,
    pub actual: Option<f64>,
    pub estimate: Option<f64>,
    pub flags: BTreeSet<Flag>,
}

impl ErrorRow {
    /// `|actual - estimate| / actual`; `None` without both values or when
    /// the link lost nothing.
    pub fn relative_error(&self) -> Option<f64> {
        match (self.actual, self.estimate) {
            (Some(a), Some(e)) if a > 0.0 => Some((a - e).abs() / a),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MedianRow {
    pub group_size: u64,
    pub link: LinkId,
    pub links: Vec<LinkId>,
    /// Every physical link of the segment is shared by several trees.
    pub intersection: bool,
    pub median: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub seed: u64,
    pub group_size: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RelativeErrorReport {
    pub rows: Vec<ErrorRow>,
    pub medians: Vec<MedianRow>,
    pub failures: Vec<Failure>,
    /// Flag counts per group size.
    pub flag_counts: BTreeMap<u64, BTreeMap<Flag, usize>>,
}

impl RelativeErrorReport {
    pub fn median(&self, group_size: u64, link: LinkId) -> Option<f64> {
        self.medians
            .iter()
            .find(|m| m.group_size == group_size && m.link == link)
            .and_then(|m| m.median)
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

struct Run {
    seed: u64,
    group_size: u64,
    result: std::result::Result<Vec<ErrorRow>, String>,
}

fn one_run(
    topology: &Topology,
    loss: &LossModel,
    kind: EstimatorKind,
    seed: u64,
    group_size: u64,
    offset: u64,
) -> Result<Vec<ErrorRow>> {
    let counts: BTreeMap<SourceId, u64> = topology.source_ids().map(|s| (s, group_size)).collect();
    let (obs, truth) = simulate_window(topology, loss, &counts, seed, offset)?;
    let stats = build_stats(topology, &obs)?;
    let cfg = PathEstimatorConfig::default();
    let (estimates, collapse) = match kind {
        EstimatorKind::Path => {
            let r = estimate_all_paths(topology, &stats, &cfg)?;
            (
                r.links
                    .values()
                    .map(|e| (e.link, e.theta(), e.flags.clone()))
                    .collect::<Vec<_>>(),
                r.collapse,
            )
        }
        EstimatorKind::Decompose => {
            let r = run_pipeline(topology, &stats, &cfg)?.estimate;
            (
                r.links
                    .values()
                    .map(|e| (e.link, e.theta(), e.flags.clone()))
                    .collect(),
                r.collapse,
            )
        }
        EstimatorKind::Oracle => {
            let r = likelihood::maximize(topology, &stats, None, &OracleConfig::default())?;
            (
                r.theta
                    .iter()
                    .map(|(&l, &th)| (l, Some(th), BTreeSet::new()))
                    .collect(),
                r.collapse,
            )
        }
    };
    Ok(estimates
        .into_iter()
        .map(|(link, estimate, flags)| {
            let links = collapse.physical_links(link).to_vec();
            ErrorRow {
                seed,
                group_size,
                link,
                actual: truth.chain_loss(&links),
                links,
                estimate,
                flags,
            }
        })
        .collect())
}

/// Run every (seed, group size) combination and aggregate.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RelativeErrorReport> {
    config.validate()?;
    let topology = config.resolve_topology()?;
    topology.ensure_valid()?;
    let loss = config.resolve_loss(&topology)?;

    let mut offsets = Vec::new();
    let mut next = 0;
    for &g in &config.group_sizes {
        offsets.push((g, next));
        next += g;
    }
    let jobs: Vec<(u64, u64, u64)> = config
        .seeds()
        .into_iter()
        .flat_map(|s| offsets.iter().map(move |&(g, o)| (s, g, o)))
        .collect();
    let mut runs: Vec<Run> = jobs
        .par_iter()
        .map(|&(seed, group_size, offset)| Run {
            seed,
            group_size,
            result: one_run(&topology, &loss, config.estimator, seed, group_size, offset)
                .map_err(|e| e.to_string()),
        })
        .collect();
    runs.sort_by_key(|r| (r.group_size, r.seed));

    let collapse = topology.collapse_serial();
    let mut report = RelativeErrorReport::default();
    for run in runs {
        match run.result {
            Ok(rows) => {
                let counts = report.flag_counts.entry(run.group_size).or_default();
                for row in &rows {
                    for f in &row.flags {
                        *counts.entry(*f).or_default() += 1;
                    }
                }
                report.rows.extend(rows);
            }
            Err(message) => report.failures.push(Failure {
                seed: run.seed,
                group_size: run.group_size,
                message,
            }),
        }
    }
    report.rows.sort_by_key(|r| (r.group_size, r.seed, r.link));

    let mut groups: BTreeMap<(u64, LinkId), Vec<f64>> = BTreeMap::new();
    for row in &report.rows {
        groups
            .entry((row.group_size, row.link))
            .or_default()
            .push(row.relative_error().unwrap_or(f64::NAN));
    }
    for ((group_size, link), values) in groups {
        let links = collapse.physical_links(link).to_vec();
        let intersection = links.iter().all(|l| topology.membership(*l).len() > 1);
        let count = values.iter().filter(|v| !v.is_nan()).count();
        report.medians.push(MedianRow {
            group_size,
            link,
            links,
            intersection,
            median: median(&values),
            count,
        });
    }
    Ok(report)
}

fn fmt(x: Option<f64>) -> String {
    x.map(|v| format!("{v}")).unwrap_or_default()
}

fn joined(links: &[LinkId]) -> String {
    links
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(";")
}

/// Write `relative_errors.csv`, `medians.csv` and `run_log.txt` into `dir`.
pub fn write_report(dir: &Path, config: &ExperimentConfig, report: &RelativeErrorReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("relative_errors.csv"))?;
    w.write_record([
        "seed",
        "group_size",
        "link",
        "links",
        "actual",
        "estimate",
        "relative_error",
        "flags",
    ])?;
    for r in &report.rows {
        w.write_record([
            r.seed.to_string(),
            r.group_size.to_string(),
            r.link.to_string(),
            joined(&r.links),
            fmt(r.actual),
            fmt(r.estimate),
            fmt(r.relative_error()),
            format_flags(&r.flags),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("medians.csv"))?;
    w.write_record([
        "group_size",
        "link",
        "links",
        "intersection",
        "median_relative_error",
        "count",
    ])?;
    for m in &report.medians {
        w.write_record([
            m.group_size.to_string(),
            m.link.to_string(),
            joined(&m.links),
            m.intersection.to_string(),
            fmt(m.median),
            m.count.to_string(),
        ])?;
    }
    w.flush()?;

    let mut log = String::new();
    writeln!(log, "losstomo {}", env!("CARGO_PKG_VERSION")).ok();
    writeln!(log, "topology: {}", config.topology).ok();
    writeln!(log, "estimator: {}", config.estimator.as_str()).ok();
    writeln!(log, "group sizes: {:?}", config.group_sizes).ok();
    writeln!(log, "groups use disjoint probe windows, in the order listed").ok();
    writeln!(log, "seeds: {:?}", config.seeds()).ok();
    writeln!(log, "runs failed: {}", report.failures.len()).ok();
    for f in &report.failures {
        writeln!(log, "  seed {} group {}: {}", f.seed, f.group_size, f.message).ok();
    }
    for (g, counts) in &report.flag_counts {
        let parts: Vec<String> = counts.iter().map(|(f, n)| format!("{f}={n}")).collect();
        writeln!(log, "flags at group size {g}: {}", parts.join(" ")).ok();
    }
    fs::write(dir.join("run_log.txt"), log)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiblingPoint {
    pub group_size: u64,
    pub high: Option<f64>,
    pub low: Option<f64>,
}

/// The lossiest link that has a sibling with lower loss, and that sibling.
pub fn sibling_pair(topology: &Topology, loss: &LossModel) -> Option<(LinkId, LinkId)> {
    let mut best: Option<(LinkId, LinkId)> = None;
    for l in topology.links() {
        let sib = topology
            .child_links(l.parent)
            .iter()
            .copied()
            .filter(|&o| o != l.id && loss.theta(o) < loss.theta(l.id))
            .min_by(|a, b| loss.theta(*a).total_cmp(&loss.theta(*b)));
        if let Some(o) = sib {
            if best.is_none_or(|(h, _)| loss.theta(l.id) > loss.theta(h)) {
                best = Some((l.id, o));
            }
        }
    }
    best
}

/// Median relative error of a high-loss link and its low-loss sibling per
/// group size.
pub fn sibling_information_probe(
    report: &RelativeErrorReport,
    high: LinkId,
    low: LinkId,
) -> Vec<SiblingPoint> {
    let sizes: BTreeSet<u64> = report.medians.iter().map(|m| m.group_size).collect();
    sizes
        .into_iter()
        .map(|g| SiblingPoint {
            group_size: g,
            high: report.median(g, high),
            low: report.median(g, low),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(topology: &str, sizes: Vec<u64>, reps: usize) -> ExperimentConfig {
        ExperimentConfig {
            topology: topology.into(),
            loss: None,
            probes_per_source: None,
            group_sizes: sizes,
            replications: reps,
            seeds: None,
            base_seed: 100,
            estimator: EstimatorKind::Path,
            out: None,
        }
    }

    #[test]
    fn config_json() {
        let c = ExperimentConfig::from_json(
            r#"{"topology":"F1","loss":{"default":0.01,"links":{"2":0.1}},
                "group_sizes":[200,400],"replications":3,"estimator":"decompose"}"#,
        )
        .unwrap();
        assert_eq!(c.seeds(), vec![0, 1, 2]);
        assert_eq!(c.estimator, EstimatorKind::Decompose);
        let loss = c.resolve_loss(&c.resolve_topology().unwrap()).unwrap();
        assert_eq!(loss.theta(2), 0.1);
        assert!(ExperimentConfig::from_json(r#"{"topology":"F1","group_sizes":[1],"bogus":1}"#).is_err());
        let mut bad = c.clone();
        bad.probes_per_source = Some(500);
        assert!(bad.validate().is_err());
        bad.group_sizes = vec![0];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn medians_skip_missing_values() {
        assert_eq!(median(&[3.0, f64::NAN, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[1.0, 4.0]), Some(2.5));
        assert_eq!(median(&[f64::NAN]), None);
    }

    #[test]
    fn f1_errors_shrink_with_more_probes() {
        // at 1% loss a leaf's error is about its sibling's loss rate until
        // probes lost on both leaves become common, far beyond 1000 probes
        let report = run_experiment(&config("F1", vec![200, 100_000], 30)).unwrap();
        assert!(report.failures.is_empty());
        for link in [1, 2, 3] {
            let small = report.median(200, link).unwrap();
            let large = report.median(100_000, link).unwrap();
            assert!(
                small.is_finite() && large < small,
                "link {link}: {small} vs {large}"
            );
        }
    }

    #[test]
    fn sibling_pair_on_f3() {
        let t = fixtures::f3();
        assert_eq!(
            sibling_pair(&t, &fixtures::f3_loss()),
            Some((fixtures::F3_HIGH_LOSS_LINK, fixtures::F3_SIBLING_LINK))
        );
        let flat = LossModel::uniform(&t, 0.01).unwrap();
        assert_eq!(sibling_pair(&t, &flat), None);
    }

    #[test]
    fn writes_are_deterministic() {
        let c = config("F2", vec![300, 600], 4);
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        write_report(&a, &c, &run_experiment(&c).unwrap()).unwrap();
        write_report(&b, &c, &run_experiment(&c).unwrap()).unwrap();
        for f in ["relative_errors.csv", "medians.csv", "run_log.txt"] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
        }
    }
}
