//! The link-level log-likelihood and a brute-force maximizer.
//!
//! With `xi_l = theta_l + (1 - theta_l) P_c`, the probability that a probe
//! at the parent of `l` leaves no trace below it (`P_c` is the probability
//! that nothing is seen below the child `c`, a product of the `xi` of the
//! child's out-links, and 0 at a receiver), the log-likelihood is
//!
//! ```text
//! L(theta) = sum_l  n_l(1) log(1 - theta_l) + n_l(0) log xi_l
//! ```
//!
//! with counts pooled over the sources whose trees contain `l`. This module
//! evaluates `L` and its gradient, maximizes it numerically and offers the
//! diagnostics used to cross-check the closed-form estimators.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::stats::StatTable;
use crate::topology::{LinkId, NodeId, SerialCollapse, SourceId, Topology};

/// The four kinds of link distinguished by the stationarity equations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LinkClass {
    /// Leaves a source root.
    Root,
    /// Internal link in a single tree.
    SingleSourceBranch,
    /// Internal link shared by several trees.
    SharedNonLeaf,
    /// Ends at a receiver.
    Leaf,
}

impl LinkClass {
    pub fn as_str(self) -> &'static str {
        match self {
            LinkClass::Root => "RL",
            LinkClass::SingleSourceBranch => "SBRL",
            LinkClass::SharedNonLeaf => "SSNL",
            LinkClass::Leaf => "AOL",
        }
    }
}

pub fn link_class(topology: &Topology, link: LinkId) -> Result<LinkClass> {
    let l = topology.link(link)?;
    Ok(if topology.is_root(l.parent) {
        LinkClass::Root
    } else if topology.is_leaf(l.child) {
        LinkClass::Leaf
    } else if topology.membership(link).len() > 1 {
        LinkClass::SharedNonLeaf
    } else {
        LinkClass::SingleSourceBranch
    })
}

/// The log-likelihood of one set of statistics over the collapsed topology.
#[derive(Debug, Clone)]
pub struct Likelihood {
    collapse: SerialCollapse,
    stats: StatTable,
    links: Vec<LinkId>,
    parent: Vec<NodeId>,
    child: Vec<NodeId>,
    n1: Vec<f64>,
    n0: Vec<f64>,
    /// Out-link indices per node.
    out: BTreeMap<NodeId, Vec<usize>>,
    /// In-link indices per node.
    inc: BTreeMap<NodeId, Vec<usize>>,
    /// Nodes, parents before children.
    order: Vec<NodeId>,
}

/// `xi` per link and `P` per node at some `theta`.
struct Forward {
    xi: Vec<f64>,
    p: BTreeMap<NodeId, f64>,
}

impl Likelihood {
    pub fn new(topology: &Topology, stats: &StatTable) -> Result<Self> {
        topology.ensure_valid()?;
        stats.check_against(topology)?;
        let collapse = topology.collapse_serial();
        let t = &collapse.topology;
        let links: Vec<LinkId> = t.links().map(|l| l.id).collect();
        let mut parent = Vec::new();
        let mut child = Vec::new();
        let mut n1 = Vec::new();
        let mut n0 = Vec::new();
        let mut out: BTreeMap<NodeId, Vec<usize>> = BTreeMap::new();
        let mut inc: BTreeMap<NodeId, Vec<usize>> = BTreeMap::new();
        for (k, &id) in links.iter().enumerate() {
            let l = *t.link(id)?;
            parent.push(l.parent);
            child.push(l.child);
            out.entry(l.parent).or_default().push(k);
            inc.entry(l.child).or_default().push(k);
            let mut a = 0.0;
            let mut b = 0.0;
            for &s in t.membership(id) {
                a += stats.n1(t, l.child, s)?;
                b += stats.n0(t, l.child, s)?;
            }
            n1.push(a);
            n0.push(b);
        }
        let order = t.topological_nodes();
        Ok(Likelihood {
            collapse: collapse.clone(),
            stats: stats.clone(),
            links,
            parent,
            child,
            n1,
            n0,
            out,
            inc,
            order,
        })
    }

    /// Segment ids of the collapsed topology, in parameter order.
    pub fn links(&self) -> &[LinkId] {
        &self.links
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn collapse(&self) -> &SerialCollapse {
        &self.collapse
    }

    /// Pooled `(n_l(1), n_l(0))` per segment.
    pub fn counts(&self) -> impl Iterator<Item = (LinkId, f64, f64)> + '_ {
        (0..self.links.len()).map(|k| (self.links[k], self.n1[k], self.n0[k]))
    }

    /// Parameter vector from a map keyed by segment id.
    pub fn vector(&self, theta: &BTreeMap<LinkId, f64>) -> Result<Vec<f64>> {
        self.links
            .iter()
            .map(|l| theta.get(l).copied().ok_or(Error::UnknownLink(*l)))
            .collect()
    }

    pub fn map(&self, theta: &[f64]) -> BTreeMap<LinkId, f64> {
        self.links.iter().copied().zip(theta.iter().copied()).collect()
    }

    fn forward(&self, theta: &[f64]) -> Forward {
        let mut xi = vec![0.0; self.links.len()];
        let mut p = BTreeMap::new();
        for &v in self.order.iter().rev() {
            let pv = match self.out.get(&v) {
                None => 0.0,
                Some(outs) => outs.iter().map(|&k| xi[k]).product(),
            };
            p.insert(v, pv);
            for &k in self.inc.get(&v).into_iter().flatten() {
                xi[k] = theta[k] + (1.0 - theta[k]) * pv;
            }
        }
        Forward { xi, p }
    }

    fn check(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.links.len() {
            return Err(Error::input(format!(
                "expected {} loss rates, got {}",
                self.links.len(),
                theta.len()
            )));
        }
        Ok(())
    }

    /// `L` on `[0, 1)`; may be `-inf` where a positive count has zero
    /// probability.
    pub fn eval(&self, theta: &[f64]) -> f64 {
        let f = self.forward(theta);
        let mut total = 0.0;
        for (k, th) in theta.iter().enumerate().take(self.links.len()) {
            if self.n1[k] > 0.0 {
                total += self.n1[k] * (1.0 - th).ln();
            }
            if self.n0[k] > 0.0 {
                total += self.n0[k] * f.xi[k].ln();
            }
        }
        total
    }

    /// `L` at an interior point.
    pub fn loglik(&self, theta: &[f64]) -> Result<f64> {
        self.check(theta)?;
        if let Some(bad) = theta.iter().find(|x| !(**x > 0.0 && **x < 1.0)) {
            return Err(Error::Domain(format!("loss rate {bad} is not interior")));
        }
        Ok(self.eval(theta))
    }

    /// Analytic gradient by reverse accumulation through the `xi` recursion.
    pub fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.check(theta)?;
        Ok(self.grad(theta))
    }

    fn grad(&self, theta: &[f64]) -> Vec<f64> {
        let f = self.forward(theta);
        let m = self.links.len();
        // dL/dxi per link
        let mut gx = vec![0.0; m];
        for &v in &self.order {
            let Some(outs) = self.out.get(&v) else { continue };
            // dL/dP_v
            let gp: f64 = self
                .inc
                .get(&v)
                .into_iter()
                .flatten()
                .map(|&u| gx[u] * (1.0 - theta[u]))
                .sum();
            let d = outs.len();
            let mut prefix = vec![1.0; d + 1];
            for i in 0..d {
                prefix[i + 1] = prefix[i] * f.xi[outs[i]];
            }
            let mut suffix = 1.0;
            for i in (0..d).rev() {
                let k = outs[i];
                let own = if self.n0[k] > 0.0 {
                    self.n0[k] / f.xi[k]
                } else {
                    0.0
                };
                gx[k] = own + gp * prefix[i] * suffix;
                suffix *= f.xi[k];
            }
        }
        (0..m)
            .map(|k| {
                let pass = if self.n1[k] > 0.0 {
                    -self.n1[k] / (1.0 - theta[k])
                } else {
                    0.0
                };
                pass + gx[k] * (1.0 - f.p[&self.child[k]])
            })
            .collect()
    }

    /// `beta_v = 1 - P_v` for every node.
    pub fn subtree_rates(&self, theta: &[f64]) -> Result<BTreeMap<NodeId, f64>> {
        self.check(theta)?;
        Ok(self
            .forward(theta)
            .p
            .into_iter()
            .map(|(v, p)| (v, 1.0 - p))
            .collect())
    }

    /// Expected number of probes from `source` that reached `node` without
    /// being seen below it, given the observations and `theta`. Only
    /// defined on single-source trees.
    pub fn unconfirmed_arrivals(&self, theta: &[f64], source: SourceId, node: NodeId) -> Result<f64> {
        self.check(theta)?;
        let t = &self.collapse.topology;
        if t.sources().count() != 1 {
            return Err(Error::input(
                "unconfirmed arrivals are computed on single-source trees",
            ));
        }
        let f = self.forward(theta);
        let index: BTreeMap<LinkId, usize> = self.links.iter().enumerate().map(|(k, &l)| (l, k)).collect();
        let mut chain = t.ancestors(source, node)?;
        chain.reverse();
        chain.push(node);
        if chain.len() == 1 {
            return Ok(0.0);
        }
        let into = |v: NodeId| index[&t.parent_link(source, v).expect("node below the root")];
        let n = |v: NodeId| self.stats.n1(t, v, source);

        let mut total = 0.0;
        for m in 0..chain.len() - 1 {
            let lost = n(chain[m])? - n(chain[m + 1])?;
            if lost == 0.0 {
                continue;
            }
            let mut w = f.p[&node];
            for k in m + 1..chain.len() {
                w *= 1.0 - theta[into(chain[k])];
            }
            for k in m + 1..chain.len() - 1 {
                let next = into(chain[k + 1]);
                for &o in self.out.get(&chain[k]).into_iter().flatten() {
                    if o != next {
                        w *= f.xi[o];
                    }
                }
            }
            total += lost * w / f.xi[into(chain[m + 1])];
        }
        Ok(total)
    }

    /// Residual of `(1 - theta_l) beta_c (n_f(1) + imp(f)) = n_c(1)` per
    /// link of a single-source tree, divided by `n^s`.
    pub fn stationarity_residuals(&self, theta: &[f64]) -> Result<BTreeMap<LinkId, (LinkClass, f64)>> {
        let t = &self.collapse.topology;
        let source = t
            .source_ids()
            .next()
            .ok_or_else(|| Error::input("topology has no source"))?;
        let beta = self.subtree_rates(theta)?;
        let n = self.stats.probes(source)?;
        let mut out = BTreeMap::new();
        for (k, &id) in self.links.iter().enumerate() {
            let (f, c) = (self.parent[k], self.child[k]);
            let arrivals = self.stats.n1(t, f, source)? + self.unconfirmed_arrivals(theta, source, f)?;
            let lhs = (1.0 - theta[k]) * beta[&c] * arrivals;
            let rhs = self.stats.n1(t, c, source)?;
            out.insert(id, (link_class(t, id)?, (lhs - rhs) / n));
        }
        Ok(out)
    }
}

/// Largest relative gap between the analytic gradient and central finite
/// differences, `|a - fd| / max(|a|, |fd|, 1)`.
pub fn gradient_check(lik: &Likelihood, theta: &[f64], step: f64) -> Result<f64> {
    let g = lik.gradient(theta)?;
    let mut worst: f64 = 0.0;
    let mut x = theta.to_vec();
    for k in 0..theta.len() {
        x[k] = theta[k] + step;
        let up = lik.loglik(&x)?;
        x[k] = theta[k] - step;
        let down = lik.loglik(&x)?;
        x[k] = theta[k];
        let fd = (up - down) / (2.0 * step);
        worst = worst.max((g[k] - fd).abs() / g[k].abs().max(fd.abs()).max(1.0));
    }
    Ok(worst)
}

/// Smallest `L(z) - chord(z)` over interior points of the segment `x..y`.
/// Negative values mean `L` dips below its chord.
pub fn chord_gap(lik: &Likelihood, x: &[f64], y: &[f64], points: usize) -> f64 {
    let (lx, ly) = (lik.eval(x), lik.eval(y));
    (1..points)
        .map(|k| {
            let w = k as f64 / points as f64;
            let z: Vec<f64> = x.iter().zip(y).map(|(a, b)| (1.0 - w) * a + w * b).collect();
            lik.eval(&z) - ((1.0 - w) * lx + w * ly)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Worst chord gap over random segments inside the box of half-width
/// `radius` around `center`, kept inside `[lo, 1 - lo]`.
pub fn concavity_probe<R: Rng + ?Sized>(
    lik: &Likelihood,
    center: &[f64],
    radius: f64,
    segments: usize,
    rng: &mut R,
) -> f64 {
    let lo = 1e-4;
    let point = |rng: &mut R| -> Vec<f64> {
        center
            .iter()
            .map(|c| (c + rng.gen_range(-radius..=radius)).clamp(lo, 1.0 - lo))
            .collect()
    };
    (0..segments)
        .map(|_| {
            let x = point(rng);
            let y = point(rng);
            chord_gap(lik, &x, &y, 20)
        })
        .fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleConfig {
    /// Stop once no single coordinate improves `L` by more than this.
    pub tol: f64,
    pub max_rounds: usize,
    pub max_newton: usize,
    pub max_links: usize,
    /// Upper bound on every loss rate.
    pub upper: f64,
    /// Starting loss rate for links without an explicit start.
    pub start: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            tol: 1e-10,
            max_rounds: 50,
            max_newton: 200,
            max_links: 16,
            upper: 1.0 - 1e-9,
            start: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OracleResult {
    /// Loss rate per segment of the collapsed topology.
    pub theta: BTreeMap<LinkId, f64>,
    pub loglik: f64,
    pub rounds: usize,
    /// Largest single-coordinate improvement in the last sweep.
    pub last_improvement: f64,
    pub collapse: SerialCollapse,
}

fn project(x: &mut [f64], upper: f64) {
    for v in x.iter_mut() {
        *v = v.clamp(0.0, upper);
    }
}

/// Coordinates not pinned at a bound by the gradient.
fn free_coordinates(theta: &[f64], g: &[f64], upper: f64) -> Vec<usize> {
    (0..theta.len())
        .filter(|&k| !(theta[k] <= 0.0 && g[k] < 0.0) && !(theta[k] >= upper && g[k] > 0.0))
        .collect()
}

/// Newton direction on the free coordinates, with a finite-difference
/// Hessian of the analytic gradient shifted until it is negative definite.
fn newton_direction(lik: &Likelihood, theta: &[f64], g: &[f64], free: &[usize], upper: f64) -> Vec<f64> {
    let nf = free.len();
    let mut h = DMatrix::<f64>::zeros(nf, nf);
    for (a, &k) in free.iter().enumerate() {
        let step = 1e-7 * theta[k].max(1e-3);
        let mut x = theta.to_vec();
        let (lo, hi) = ((theta[k] - step).max(0.0), (theta[k] + step).min(upper));
        x[k] = hi;
        let gu = lik.grad(&x);
        x[k] = lo;
        let gd = lik.grad(&x);
        for (b, &j) in free.iter().enumerate() {
            h[(b, a)] = (gu[j] - gd[j]) / (hi - lo);
        }
    }
    let h = (&h + h.transpose()) * 0.5;
    let neg = -h;
    let rhs = DVector::from_iterator(nf, free.iter().map(|&k| g[k]));
    let scale = (0..nf).map(|k| neg[(k, k)].abs()).fold(1.0, f64::max);
    let mut lambda = 0.0;
    for _ in 0..20 {
        let shifted = &neg + DMatrix::<f64>::identity(nf, nf) * lambda;
        if let Some(ch) = shifted.cholesky() {
            return ch.solve(&rhs).iter().copied().collect();
        }
        lambda = if lambda == 0.0 {
            1e-10 * scale
        } else {
            lambda * 10.0
        };
    }
    let norm = rhs.norm().max(1e-300);
    rhs.iter().map(|v| 0.01 * v / norm).collect()
}

fn free_norm(g: &[f64], free: &[usize]) -> f64 {
    free.iter().map(|&k| g[k] * g[k]).sum::<f64>().sqrt()
}

/// Full Newton steps that are kept while they shrink the gradient. Near
/// the maximum `L` changes by less than its rounding error, so the value
/// alone cannot tell a better point from a worse one.
fn polish(lik: &Likelihood, theta: &mut Vec<f64>, cfg: &OracleConfig) {
    for _ in 0..10 {
        let g = lik.grad(theta);
        let free = free_coordinates(theta, &g, cfg.upper);
        if free.is_empty() {
            return;
        }
        let d = newton_direction(lik, theta, &g, &free, cfg.upper);
        let mut x = theta.clone();
        for (a, &k) in free.iter().enumerate() {
            x[k] += d[a];
        }
        project(&mut x, cfg.upper);
        let gx = lik.grad(&x);
        let before = lik.eval(theta);
        let after = lik.eval(&x);
        let noise = 1e-12 * before.abs().max(1.0);
        if free_norm(&gx, &free_coordinates(&x, &gx, cfg.upper)) < free_norm(&g, &free)
            && after >= before - noise
        {
            *theta = x;
        } else {
            return;
        }
    }
}

/// Projected Newton with a line search on `L`. Returns the number of
/// accepted steps.
fn newton(lik: &Likelihood, theta: &mut Vec<f64>, cfg: &OracleConfig) -> usize {
    let mut value = lik.eval(theta);
    let mut accepted = 0;
    for _ in 0..cfg.max_newton {
        let g = lik.grad(theta);
        let free = free_coordinates(theta, &g, cfg.upper);
        if free.is_empty() {
            break;
        }
        let d = newton_direction(lik, theta, &g, &free, cfg.upper);

        let mut alpha = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let mut x = theta.clone();
            for (a, &k) in free.iter().enumerate() {
                x[k] += alpha * d[a];
            }
            project(&mut x, cfg.upper);
            let v = lik.eval(&x);
            if v > value {
                let shift = x
                    .iter()
                    .zip(theta.iter())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                let gain = v - value;
                *theta = x;
                value = v;
                moved = true;
                accepted += 1;
                if gain < 1e-15 * value.abs().max(1.0) && shift < 1e-13 {
                    return accepted;
                }
                break;
            }
            alpha *= 0.5;
        }
        if !moved {
            break;
        }
    }
    accepted
}

/// Golden-section maximum of `L` along coordinate `k` over `[0, upper]`.
/// `L` is concave along every coordinate axis, so the search is exact up
/// to the bracket width.
fn golden(lik: &Likelihood, theta: &[f64], k: usize, upper: f64) -> (f64, f64) {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut x = theta.to_vec();
    let mut f = |v: f64| {
        x[k] = v;
        lik.eval(&x)
    };
    let (mut a, mut b) = (0.0, upper);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if b - a < 1e-15 {
            break;
        }
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    let candidates = [(c, fc), (d, fd), (0.0, f(0.0)), (upper, f(upper))];
    candidates
        .into_iter()
        .fold((theta[k], f64::NEG_INFINITY), |best, cand| {
            if cand.1 > best.1 {
                cand
            } else {
                best
            }
        })
}

/// Maximize `L` over `[0, upper]^m`: Newton steps, then a coordinate sweep
/// that must find no improvement above `cfg.tol`.
pub fn maximize(
    topology: &Topology,
    stats: &StatTable,
    init: Option<&BTreeMap<LinkId, f64>>,
    cfg: &OracleConfig,
) -> Result<OracleResult> {
    let lik = Likelihood::new(topology, stats)?;
    maximize_likelihood(&lik, init, cfg)
}

pub fn maximize_likelihood(
    lik: &Likelihood,
    init: Option<&BTreeMap<LinkId, f64>>,
    cfg: &OracleConfig,
) -> Result<OracleResult> {
    if lik.len() > cfg.max_links {
        return Err(Error::Domain(format!(
            "the oracle handles at most {} links, the collapsed topology has {}",
            cfg.max_links,
            lik.len()
        )));
    }
    let mut theta: Vec<f64> = lik
        .links()
        .iter()
        .map(|l| init.and_then(|m| m.get(l).copied()).unwrap_or(cfg.start))
        .collect();
    project(&mut theta, cfg.upper);

    let mut last = f64::INFINITY;
    for round in 1..=cfg.max_rounds {
        newton(lik, &mut theta, cfg);
        polish(lik, &mut theta, cfg);
        let mut biggest: f64 = 0.0;
        for k in 0..theta.len() {
            let before = lik.eval(&theta);
            let (x, v) = golden(lik, &theta, k, cfg.upper);
            // gains below the rounding error of L are not improvements
            if v - before > 1e-13 * before.abs().max(1.0) {
                biggest = biggest.max(v - before);
                theta[k] = x;
            }
        }
        last = biggest;
        if biggest < cfg.tol {
            polish(lik, &mut theta, cfg);
            return Ok(OracleResult {
                theta: lik.map(&theta),
                loglik: lik.eval(&theta),
                rounds: round,
                last_improvement: biggest,
                collapse: lik.collapse().clone(),
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: cfg.max_rounds,
        best_loglik: lik.eval(&theta),
        last_improvement: last,
        best_theta: theta,
    })
}
