use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{build_curve, summarize, Curve, CurveSummary, PredictionRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetRow {
    pub subset: String,
    pub summary: CurveSummary,
    pub curve: Curve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetReport {
    pub rows: Vec<SubsetRow>,
    pub mean_auaf: f64,
}

pub fn multi_subset_report(subsets: &BTreeMap<String, Vec<PredictionRecord>>) -> Result<SubsetReport> {
    if subsets.is_empty() {
        return Err(Error::invalid("report needs at least one subset"));
    }
    let rows = subsets
        .iter()
        .map(|(name, records)| {
            let curve = build_curve(records).map_err(|e| Error::invalid(format!("subset `{name}`: {e}")))?;
            Ok(SubsetRow {
                subset: name.clone(),
                summary: summarize(&curve),
                curve,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_auaf = rows.iter().map(|r| r.summary.auaf).sum::<f64>() / rows.len() as f64;
    Ok(SubsetReport { rows, mean_auaf })
}

const PALETTE: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"];

impl SubsetReport {
    /// Values on the 0-100 scale, two decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subset,auaf,ff95,facc,auroc\n");
        for r in &self.rows {
            let s = &r.summary;
            let _ = writeln!(
                out,
                "{},{:.2},{:.2},{:.2},{:.2}",
                r.subset,
                100.0 * s.auaf,
                100.0 * s.ff95,
                100.0 * s.facc,
                100.0 * s.auroc
            );
        }
        let _ = writeln!(out, "average,{:.2},,,", 100.0 * self.mean_auaf);
        out
    }

    /// ACC-FPR curves of every subset in one standalone SVG.
    pub fn to_svg(&self) -> String {
        let (w, h, pad) = (480.0, 360.0, 48.0);
        let (pw, ph) = (w - 2.0 * pad, h - 2.0 * pad);
        let x = |f: f64| pad + f * pw;
        let y = |a: f64| h - pad - a * ph;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<path d="M{:.1} {:.1} V{:.1} H{:.1}" fill="none" stroke="black"/>"#,
            x(0.0),
            y(1.0),
            y(0.0),
            x(1.0)
        );
        for t in 0..=4 {
            let v = t as f64 / 4.0;
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{v:.2}</text>"#, x(v), y(0.0) + 16.0);
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, x(0.0) - 6.0, y(v) + 4.0);
        }
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">FPR</text>"#, x(0.5), h - 8.0);
        let _ = writeln!(
            s,
            r#"<text transform="translate(14 {:.1}) rotate(-90)" text-anchor="middle">ACC</text>"#,
            y(0.5)
        );
        for (i, r) in self.rows.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let pts: Vec<String> = r
                .curve
                .points
                .iter()
                .map(|p| format!("{:.2},{:.2}", x(p.fpr), y(p.acc)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                pts.join(" ")
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" fill="{color}">{} (AUAF {:.2})</text>"#,
                x(0.55),
                y(0.35) + 14.0 * i as f64,
                escape(&r.subset),
                100.0 * r.summary.auaf
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subset(auaf_like: f64) -> Vec<PredictionRecord> {
        // constant detector: AUAF = FACC / 2
        let n = 10;
        let correct = (2.0 * auaf_like * n as f64).round() as usize;
        let mut r: Vec<PredictionRecord> = (0..n)
            .map(|i| PredictionRecord::aq(format!("a{i}"), 0.5, i < correct))
            .collect();
        r.push(PredictionRecord::uq("u", 0.5));
        r
    }

    #[test]
    fn mean_of_two_subsets() {
        let m = BTreeMap::from([("a".to_string(), subset(0.4)), ("b".to_string(), subset(0.3))]);
        let rep = multi_subset_report(&m).unwrap();
        assert!((rep.mean_auaf - 0.35).abs() < 1e-12);
        assert!(rep.to_csv().ends_with("average,35.00,,,\n"));
        let svg = rep.to_svg();
        assert!(svg.starts_with("<svg") && svg.matches("<polyline").count() == 2);
    }

    #[test]
    fn single_subset_average_is_itself() {
        let m = BTreeMap::from([("only".to_string(), subset(0.25))]);
        let rep = multi_subset_report(&m).unwrap();
        assert_eq!(rep.mean_auaf, rep.rows[0].summary.auaf);
        assert!(multi_subset_report(&BTreeMap::new()).is_err());
    }
}
