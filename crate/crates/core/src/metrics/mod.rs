//! ACC-FPR curves and their summaries, ROC, and corpus analyses.

mod prefix;
mod report;

pub use prefix::{prefix_distribution, PrefixNode};
pub use report::{multi_subset_report, SubsetReport, SubsetRow};

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub question_id: String,
    pub is_uq: bool,
    pub vqa_correct: Option<bool>,
    pub confidence: f64,
    pub predicted_answer: Option<String>,
}

impl PredictionRecord {
    pub fn aq(id: impl Into<String>, confidence: f64, correct: bool) -> Self {
        Self {
            question_id: id.into(),
            is_uq: false,
            vqa_correct: Some(correct),
            confidence,
            predicted_answer: None,
        }
    }

    pub fn uq(id: impl Into<String>, confidence: f64) -> Self {
        Self {
            question_id: id.into(),
            is_uq: true,
            vqa_correct: None,
            confidence,
            predicted_answer: None,
        }
    }
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let r: PredictionRecord = serde_json::from_str(l).map_err(|e| Error::Parse {
                file: path.display().to_string(),
                line: i + 1,
                field: "<record>".into(),
                message: e.to_string(),
            })?;
            if !r.confidence.is_finite() {
                return Err(Error::Parse {
                    file: path.display().to_string(),
                    line: i + 1,
                    field: "confidence".into(),
                    message: "must be finite".into(),
                });
            }
            Ok(r)
        })
        .collect()
}

/// One operating point, with the counts it was computed from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub fpr: f64,
    pub acc: f64,
    pub uq_accepted: usize,
    pub aq_correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    /// Upper envelope, FPR strictly increasing from 0 to 1.
    pub points: Vec<CurvePoint>,
    pub facc: f64,
    pub n_aq: usize,
    pub n_uq: usize,
    /// Area under the ROC of AQ-vs-UQ acceptance, from the same records.
    pub auroc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub auaf: f64,
    pub ff95: f64,
    pub facc: f64,
    pub auroc: f64,
}

/// Cumulative (accepted AQ, accepted correct AQ, accepted UQ) after each
/// group of tied confidences, strictest threshold first. Starts at zero.
fn sweep(records: &[PredictionRecord]) -> Result<Vec<(usize, usize, usize)>> {
    for r in records {
        if !r.confidence.is_finite() {
            return Err(Error::invalid(format!("`{}`: confidence must be finite", r.question_id)));
        }
        match (r.is_uq, r.vqa_correct) {
            (false, None) => {
                return Err(Error::invalid(format!("AQ `{}` lacks vqa_correct", r.question_id)));
            }
            (true, Some(_)) => {
                return Err(Error::invalid(format!("UQ `{}` carries vqa_correct", r.question_id)));
            }
            _ => {}
        }
    }
    let mut sorted: Vec<&PredictionRecord> = records.iter().collect();
    sorted.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut out = vec![(0, 0, 0)];
    let (mut aq, mut correct, mut uq) = (0, 0, 0);
    for (i, r) in sorted.iter().enumerate() {
        if r.is_uq {
            uq += 1;
        } else {
            aq += 1;
            correct += usize::from(r.vqa_correct == Some(true));
        }
        // ties are accepted together
        if sorted.get(i + 1).is_none_or(|n| n.confidence != r.confidence) {
            out.push((aq, correct, uq));
        }
    }
    Ok(out)
}

fn trapezoid(points: impl IntoIterator<Item = (f64, f64)>) -> f64 {
    let mut area = 0.0;
    let mut prev: Option<(f64, f64)> = None;
    for (x, y) in points {
        if let Some((px, py)) = prev {
            area += (x - px) * (y + py) / 2.0;
        }
        prev = Some((x, y));
    }
    area
}

/// Keep the largest `y` at each `x` of a sweep whose `x` never decreases.
fn envelope(sweep: impl IntoIterator<Item = (usize, usize)>) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for (x, y) in sweep {
        match out.last_mut() {
            Some(last) if last.0 == x => last.1 = last.1.max(y),
            _ => out.push((x, y)),
        }
    }
    out
}

/// Accept iff `confidence > theta`, for every threshold.
pub fn build_curve(records: &[PredictionRecord]) -> Result<Curve> {
    let n_aq = records.iter().filter(|r| !r.is_uq).count();
    let n_uq = records.len() - n_aq;
    if n_aq == 0 || n_uq == 0 {
        return Err(Error::invalid(format!(
            "curve needs at least one AQ and one UQ (got {n_aq} AQ, {n_uq} UQ)"
        )));
    }
    let sw = sweep(records)?;
    let (fa, fu) = (n_aq as f64, n_uq as f64);
    let points: Vec<CurvePoint> = envelope(sw.iter().map(|&(_, c, u)| (u, c)))
        .into_iter()
        .map(|(u, c)| CurvePoint {
            fpr: u as f64 / fu,
            acc: c as f64 / fa,
            uq_accepted: u,
            aq_correct: c,
        })
        .collect();
    let roc = envelope(sw.iter().map(|&(a, _, u)| (u, a)));
    let auroc = trapezoid(roc.into_iter().map(|(u, a)| (u as f64 / fu, a as f64 / fa)));
    let facc = points.last().expect("sweep ends at accept-all").acc;
    Ok(Curve {
        points,
        facc,
        n_aq,
        n_uq,
        auroc,
    })
}

/// Area (trapezoidal), FPR at the first point reaching 95% of FACC, FACC.
pub fn summarize(curve: &Curve) -> CurveSummary {
    let auaf = trapezoid(curve.points.iter().map(|p| (p.fpr, p.acc)));
    let full = curve.points.last().map_or(0, |p| p.aq_correct);
    // exact in integers: correct / n >= 0.95 * full / n
    let ff95 = curve
        .points
        .iter()
        .find(|p| 20 * p.aq_correct >= 19 * full)
        .map_or(1.0, |p| p.fpr);
    CurveSummary {
        auaf,
        ff95,
        facc: curve.facc,
        auroc: curve.auroc,
    }
}

pub fn evaluate(records: &[PredictionRecord]) -> Result<CurveSummary> {
    Ok(summarize(&build_curve(records)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocComparison {
    pub auaf: f64,
    pub auroc: f64,
    /// Largest |ACC - TPR| over shared FPRs.
    pub max_gap: f64,
}

/// With every AQ answered correctly, the ACC-FPR curve is the ROC curve.
pub fn compare_roc(records: &[PredictionRecord]) -> Result<RocComparison> {
    if let Some(r) = records.iter().find(|r| !r.is_uq && r.vqa_correct != Some(true)) {
        return Err(Error::invalid(format!(
            "AQ `{}` is not answered correctly; the ROC identity needs all AQs correct",
            r.question_id
        )));
    }
    let curve = build_curve(records)?;
    let sw = sweep(records)?;
    let roc = envelope(sw.iter().map(|&(a, _, u)| (u, a)));
    let mut max_gap = 0.0f64;
    for p in &curve.points {
        if let Some(&(_, a)) = roc.iter().find(|(u, _)| *u == p.uq_accepted) {
            max_gap = max_gap.max((p.acc - a as f64 / curve.n_aq as f64).abs());
        }
    }
    let s = summarize(&curve);
    Ok(RocComparison {
        auaf: s.auaf,
        auroc: s.auroc,
        max_gap,
    })
}
