//! CSV output for estimates, path rates and oracle results.

use std::collections::BTreeMap;
use std::io::Write;

use crate::consistency::format_flags;
use crate::error::Result;
use crate::likelihood::OracleResult;
use crate::path::{EstimateReport, PathRateTable};
use crate::sim::LossModel;
use crate::topology::{LinkId, SerialCollapse};

fn num(x: Option<f64>) -> String {
    match x {
        Some(v) if v.is_finite() => format!("{v}"),
        _ => String::new(),
    }
}

fn joined(links: &[LinkId]) -> String {
    links
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(";")
}

/// Loss rate of a serial chain under `loss`.
pub fn chain_theta(loss: &LossModel, links: &[LinkId]) -> f64 {
    1.0 - links.iter().map(|&l| 1.0 - loss.theta(l)).product::<f64>()
}

/// One row per segment: `link, links, true_theta, theta_hat, flags, tree,
/// composite`.
pub fn write_estimates<W: Write>(w: W, report: &EstimateReport, truth: Option<&LossModel>) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "link",
        "links",
        "true_theta",
        "theta_hat",
        "flags",
        "tree",
        "composite",
    ])?;
    for (id, e) in &report.links {
        out.write_record([
            id.to_string(),
            joined(&e.links),
            num(truth.map(|t| chain_theta(t, &e.links))),
            num(e.theta()),
            format_flags(&e.flags),
            e.tree.map(|t| t.to_string()).unwrap_or_default(),
            e.is_composite().to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// `node, source, gamma, a, beta, n_star, flags`.
pub fn write_path_rates<W: Write>(w: W, table: &PathRateTable) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["node", "source", "gamma", "a", "beta", "n_star", "flags"])?;
    for (node, r) in &table.nodes {
        for (s, sr) in &r.sources {
            out.write_record([
                node.to_string(),
                s.to_string(),
                num(Some(sr.gamma)),
                num(sr.a),
                num(r.beta),
                num(r.n_star),
                format_flags(&r.flags),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// `link, links, theta_hat` for a map over segments.
pub fn write_thetas<W: Write>(w: W, collapse: &SerialCollapse, theta: &BTreeMap<LinkId, f64>) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["link", "links", "theta_hat"])?;
    for (id, th) in theta {
        out.write_record([
            id.to_string(),
            joined(collapse.physical_links(*id)),
            num(Some(*th)),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_oracle<W: Write>(w: W, result: &OracleResult) -> Result<()> {
    write_thetas(w, &result.collapse, &result.theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::path::{estimate_all_paths, PathEstimatorConfig};
    use crate::stats::StatTable;

    #[test]
    fn estimate_rows() {
        let t = fixtures::f2();
        let loss = LossModel::uniform(&t, 0.1).unwrap();
        let counts = t.source_ids().map(|s| (s, 1000.0)).collect();
        let s = StatTable::expected(&t, &loss, &counts).unwrap();
        let r = estimate_all_paths(&t, &s, &PathEstimatorConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_estimates(&mut buf, &r, Some(&loss)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "link,links,true_theta,theta_hat,flags,tree,composite");
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("1,1;2,0.18"), "{}", lines[1]);
        assert!(lines[1].ends_with(",,true"));

        let mut buf = Vec::new();
        write_path_rates(&mut buf, &r.path_rates).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("node,source,gamma,a,beta,n_star,flags\n"));
        // the joint node has one row per source
        assert_eq!(text.lines().filter(|l| l.starts_with("4,")).count(), 2);
    }

    #[test]
    fn chain_loss_composes() {
        let t = fixtures::f2();
        let loss = LossModel::uniform(&t, 0.5).unwrap();
        assert!((chain_theta(&loss, &[1, 2]) - 0.75).abs() < 1e-15);
        assert_eq!(num(None), "");
        assert_eq!(num(Some(f64::NAN)), "");
    }
}
