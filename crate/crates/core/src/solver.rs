//! Root finding for the per-node likelihood polynomial.
//!
//! With pooled child ratios `c_j` the path rate `A` of a node solves
//! `H(A) = 1 - gamma/A - prod_j (1 - gamma c_j / A) = 0`. Substituting
//! `B = gamma/A` (the subtree pass rate) gives `g(B) = 1 - B - prod_j (1 - B c_j)`,
//! which always vanishes at `B = 0`. Dividing that trivial root out leaves
//! `q(B) = g(B)/B`, positive at 0 when `sum c_j > 1`, non-positive at 1 and
//! decreasing in between, so plain bisection on `[0, 1]` finds the unique
//! interior root. `q` is evaluated by a recursion that never subtracts two
//! nearly equal products.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// Largest accepted `|H|` at the returned root.
    pub tol: f64,
    pub max_iter: usize,
    /// Offset from `gamma` for the lower end of the bracket in the
    /// path-rate parametrisation.
    pub eps: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: 1e-12,
            max_iter: 200,
            eps: 1e-15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Root {
    pub value: f64,
    pub iterations: usize,
    /// `|H|` at `value`.
    pub residual: f64,
}

/// `q(B) = g(B)/B`.
pub fn reduced(b: f64, c: &[f64]) -> f64 {
    let mut u = 0.0;
    let mut p = 1.0;
    for &cj in c {
        u += p * cj;
        p *= 1.0 - b * cj;
    }
    u - 1.0
}

/// `g(B) = 1 - B - prod (1 - B c_j)`, equal to `H(gamma/B)`.
pub fn subtree_poly(b: f64, c: &[f64]) -> f64 {
    b * reduced(b, c)
}

/// `H(A)` for a node with observed rate `gamma` and child ratios `c`.
pub fn joint_poly(a: f64, gamma: f64, c: &[f64]) -> f64 {
    let b = gamma / a;
    1.0 - b - c.iter().map(|&cj| 1.0 - b * cj).product::<f64>()
}

/// Fixed-point form in `x = 1 - beta`: `x - prod ((1 - c_j) + c_j x)`.
pub fn complement_residual(x: f64, c: &[f64]) -> f64 {
    x - c.iter().map(|&cj| (1.0 - cj) + cj * x).product::<f64>()
}

fn check_ratios(c: &[f64]) -> Result<f64> {
    if c.is_empty() {
        return Err(Error::Domain("a node without children has no polynomial".into()));
    }
    if let Some(bad) = c.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::Domain(format!("child ratio {bad} is outside [0, 1]")));
    }
    let sum: f64 = c.iter().sum();
    if sum <= 1.0 {
        return Err(Error::NoInteriorRoot { sum_c: sum });
    }
    Ok(sum)
}

/// Subtree pass rate `beta` solving `g(beta) = 0` in `(0, 1]`.
pub fn solve_beta(c: &[f64], cfg: &SolverConfig) -> Result<Root> {
    check_ratios(c)?;
    if reduced(1.0, c) >= 0.0 {
        // some child sees every probe the node sees
        return Ok(Root {
            value: 1.0,
            iterations: 0,
            residual: subtree_poly(1.0, c).abs(),
        });
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        iterations += 1;
        if reduced(mid, c) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let value = 0.5 * (lo + hi);
    let residual = subtree_poly(value, c).abs();
    if residual > cfg.tol {
        return Err(Error::NonConvergence {
            iterations,
            best_loglik: f64::NAN,
            last_improvement: residual,
            best_theta: vec![value],
        });
    }
    Ok(Root {
        value,
        iterations,
        residual,
    })
}

/// Path rate `A` of a node: the root of `H` in `(gamma, 1]`, returned
/// unclamped (sampled data may put it above 1).
pub fn solve_joint_polynomial(gamma: f64, c: &[f64], cfg: &SolverConfig) -> Result<Root> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Consistency(format!(
            "observed rate {gamma} leaves the path rate undetermined"
        )));
    }
    let beta = solve_beta(c, cfg)?;
    let a = gamma / beta.value;
    Ok(Root {
        value: a,
        iterations: beta.iterations,
        residual: joint_poly(a, gamma, c).abs(),
    })
}

/// Closed form for a node with exactly two (possibly virtual) children.
pub fn binary_beta(c1: f64, c2: f64) -> Result<f64> {
    check_ratios(&[c1, c2])?;
    Ok(((c1 + c2 - 1.0) / (c1 * c2)).min(1.0))
}

/// The single-tree path equation in its original parametrisation,
/// `1 - gamma/A = prod_j (1 - gamma_j/A)`, bisected directly in `A`.
/// The bracket starts at `(gamma + eps, 1]` and is widened upwards when
/// sampled data put the root above 1.
pub fn solve_tree_path(gamma: f64, child_gammas: &[f64], cfg: &SolverConfig) -> Result<Root> {
    if gamma.is_nan() || gamma <= 0.0 {
        return Err(Error::Consistency(format!(
            "observed rate {gamma} leaves the path rate undetermined"
        )));
    }
    if child_gammas.is_empty() {
        return Err(Error::Domain("a node without children has no polynomial".into()));
    }
    if let Some(bad) = child_gammas.iter().find(|g| !(0.0..=gamma).contains(*g)) {
        return Err(Error::Domain(format!(
            "child rate {bad} exceeds the parent rate {gamma}"
        )));
    }
    let sum: f64 = child_gammas.iter().sum();
    if sum <= gamma {
        return Err(Error::NoInteriorRoot { sum_c: sum / gamma });
    }
    let h = |a: f64| 1.0 - gamma / a - child_gammas.iter().map(|g| 1.0 - g / a).product::<f64>();

    let mut lo = gamma;
    let mut hi = 1.0f64.max(gamma * (1.0 + cfg.eps));
    let mut widen = 0;
    while h(hi) <= 0.0 {
        widen += 1;
        if widen > cfg.max_iter {
            return Err(Error::NonConvergence {
                iterations: widen,
                best_loglik: f64::NAN,
                last_improvement: h(hi),
                best_theta: vec![hi],
            });
        }
        lo = hi;
        hi *= 2.0;
    }
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        iterations += 1;
        if h(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let value = 0.5 * (lo + hi);
    let residual = h(value).abs();
    if residual > cfg.tol {
        return Err(Error::NonConvergence {
            iterations,
            best_loglik: f64::NAN,
            last_improvement: residual,
            best_theta: vec![value],
        });
    }
    Ok(Root {
        value,
        iterations,
        residual,
    })
}
