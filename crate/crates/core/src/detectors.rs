//! Post-hoc confidence scorers. Every scorer returns "larger = more answerable".

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::corpus::{ObjectFeatures, Question};
use crate::error::{Error, Result};
use crate::lexicon::Lexicon;
use crate::model::{argmax, Input, Model};
use crate::scalar::Scalar;
use crate::text::stem;
use crate::uqgen::extract_terms;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DetectorKind {
    Msp,
    Odin,
    Energy,
    Mahalanobis,
    FrcnnRule,
}

impl DetectorKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "msp" => Some(Self::Msp),
            "odin" => Some(Self::Odin),
            "energy" => Some(Self::Energy),
            "mahalanobis" | "maha" => Some(Self::Mahalanobis),
            "frcnn" | "frcnnrule" | "frcnn-rule" => Some(Self::FrcnnRule),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub kind: DetectorKind,
    pub temperature: f64,
    pub noise: f64,
    pub top_m: usize,
    pub cov_reg: f64,
    pub min_class_count: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            kind: DetectorKind::Msp,
            temperature: 1e5,
            noise: 1e-4,
            top_m: 2,
            cov_reg: 1e-3,
            min_class_count: 5,
        }
    }
}

pub fn score_msp<T: Scalar>(scores: &[T]) -> T {
    scores.iter().copied().fold(T::neg_infinity(), T::max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdinScore<T> {
    /// `max_k sigmoid(z_k / T)` on the perturbed input.
    pub confidence: T,
    /// `max_k z_k / T`; order-equivalent to `confidence` and usable when
    /// large temperatures flatten the sigmoids.
    pub ranking: T,
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Temperature scaling plus a signed-gradient step on the region features.
///
/// The step follows the gradient of `log max_k sigmoid(z_k)` before
/// temperature scaling; its sign matches the post-temperature gradient.
pub fn score_odin<T: Scalar>(model: &Model<T>, input: &Input<'_, T>, temperature: f64, noise: f64) -> Result<OdinScore<T>> {
    if !(temperature > 0.0) || !(noise >= 0.0) {
        return Err(Error::invalid("ODIN needs temperature > 0 and noise >= 0"));
    }
    let params = &model.vqa;
    let t = T::of(temperature);
    let perturbed;
    let regions = if noise > 0.0 {
        let fwd = params.forward(input);
        let k = argmax(&fwd.logits);
        let mut dz = vec![T::zero(); fwd.logits.len()];
        // d/dz log sigmoid(z) = 1 - sigmoid(z)
        dz[k] = T::one() - fwd.logits[k].sigmoid();
        let mut scratch = crate::model::ModelParams::zeros(params.shape);
        let d_mean = params.backward(&fwd, &dz, fwd.aux.map(|_| T::zero()), &mut scratch);
        let grad = params.region_gradient(&d_mean, input.regions.m);
        let eps = T::of(noise);
        let data = input
            .regions
            .data
            .iter()
            .zip(&grad)
            .map(|(&x, &g)| x + eps * sign(g))
            .collect();
        perturbed = ObjectFeatures::new(input.regions.image_id.clone(), input.regions.m, input.regions.dim, data)?;
        &perturbed
    } else {
        input.regions
    };
    let fwd = params.forward(&Input {
        regions,
        tokens: input.tokens,
    });
    let scaled: Vec<T> = fwd.logits.iter().map(|&z| z / t).collect();
    let ranking = scaled.iter().copied().fold(T::neg_infinity(), T::max);
    Ok(OdinScore {
        confidence: scaled.iter().map(|z| z.sigmoid()).fold(T::neg_infinity(), T::max),
        ranking,
    })
}

/// Sum of softplus over the `top_m` largest logits.
pub fn score_energy<T: Scalar>(logits: &[T], top_m: usize) -> Result<T> {
    if top_m == 0 || top_m > logits.len() {
        return Err(Error::invalid(format!(
            "top_m must be in 1..={}, got {top_m}",
            logits.len()
        )));
    }
    let mut z = logits.to_vec();
    z.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    Ok(z[..top_m].iter().map(|v| v.softplus()).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mahalanobis {
    /// `(answer id, mean)` for every retained class.
    pub class_means: Vec<(usize, Vec<f64>)>,
    /// Row-major `dim x dim` inverse of the pooled, ridge-regularized covariance.
    pub precision: Vec<f64>,
    pub dim: usize,
    /// Classes with fewer than `min_class_count` samples.
    pub dropped: Vec<usize>,
}

/// Class means and a shared covariance, pooled over retained classes.
pub fn fit_mahalanobis<T: Scalar>(features: &[(Vec<T>, usize)], cov_reg: f64, min_class_count: usize) -> Result<Mahalanobis> {
    if !(cov_reg > 0.0) {
        return Err(Error::invalid("cov_reg must be > 0"));
    }
    let dim = features
        .first()
        .map(|(h, _)| h.len())
        .ok_or_else(|| Error::invalid("no features to fit"))?;
    if let Some((h, _)) = features.iter().find(|(h, _)| h.len() != dim) {
        return Err(Error::Shape(format!("feature of dim {} among dim {dim}", h.len())));
    }
    let mut by_class: std::collections::BTreeMap<usize, Vec<DVector<f64>>> = Default::default();
    for (h, c) in features {
        by_class
            .entry(*c)
            .or_default()
            .push(DVector::from_iterator(dim, h.iter().map(|v| v.as_f64())));
    }
    let mut dropped = Vec::new();
    let mut class_means = Vec::new();
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    let mut n = 0usize;
    for (c, xs) in &by_class {
        if xs.len() < min_class_count.max(1) {
            dropped.push(*c);
            continue;
        }
        let mean = xs.iter().fold(DVector::zeros(dim), |acc, x| acc + x) / xs.len() as f64;
        for x in xs {
            let d = x - &mean;
            cov += &d * d.transpose();
        }
        n += xs.len();
        class_means.push((*c, mean.iter().copied().collect()));
    }
    if class_means.is_empty() {
        return Err(Error::invalid(format!(
            "no class has at least {min_class_count} samples"
        )));
    }
    cov /= n as f64;
    for i in 0..dim {
        cov[(i, i)] += cov_reg;
    }
    let chol = cov.cholesky().ok_or(Error::SingularCovariance { cov_reg })?;
    let inv = chol.inverse();
    if inv.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularCovariance { cov_reg });
    }
    // row-major; the inverse is symmetric anyway
    let precision = (0..dim).flat_map(|i| (0..dim).map(move |j| (i, j))).map(|(i, j)| inv[(i, j)]).collect();
    Ok(Mahalanobis {
        class_means,
        precision,
        dim,
        dropped,
    })
}

impl Mahalanobis {
    pub fn distance(&self, h: &[f64], mean: &[f64]) -> f64 {
        let d: Vec<f64> = h.iter().zip(mean).map(|(a, b)| a - b).collect();
        let mut acc = 0.0;
        for i in 0..self.dim {
            let row = &self.precision[i * self.dim..(i + 1) * self.dim];
            acc += d[i] * row.iter().zip(&d).map(|(p, x)| p * x).sum::<f64>();
        }
        acc
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MahalanobisManifest {
    dim: usize,
    classes: Vec<usize>,
    dropped: Vec<usize>,
}

/// Manifest JSON plus a little-endian `f64` blob (class means, then the
/// precision matrix) next to it with a `.bin` extension.
pub fn save_mahalanobis(path: &Path, fitted: &Mahalanobis) -> Result<PathBuf> {
    let manifest = MahalanobisManifest {
        dim: fitted.dim,
        classes: fitted.class_means.iter().map(|(c, _)| *c).collect(),
        dropped: fitted.dropped.clone(),
    };
    fs::write(path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(path, e))?;
    let blob: Vec<u8> = fitted
        .class_means
        .iter()
        .flat_map(|(_, m)| m.iter())
        .chain(&fitted.precision)
        .flat_map(|v| v.to_le_bytes())
        .collect();
    let bin = path.with_extension("bin");
    fs::write(&bin, blob).map_err(|e| Error::io(&bin, e))?;
    Ok(bin)
}

pub fn load_mahalanobis(path: &Path) -> Result<Mahalanobis> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: MahalanobisManifest = serde_json::from_str(&raw).map_err(|e| Error::Parse {
        file: path.display().to_string(),
        line: e.line(),
        field: "<manifest>".into(),
        message: e.to_string(),
    })?;
    let bin = path.with_extension("bin");
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let expected = (m.classes.len() + m.dim) * m.dim * 8;
    if bytes.len() != expected {
        return Err(Error::Shape(format!("{}: {} bytes, expected {expected}", bin.display(), bytes.len())));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let (means, precision) = values.split_at(m.classes.len() * m.dim);
    Ok(Mahalanobis {
        class_means: m.classes.iter().zip(means.chunks(m.dim.max(1))).map(|(c, v)| (*c, v.to_vec())).collect(),
        precision: precision.to_vec(),
        dim: m.dim,
        dropped: m.dropped,
    })
}

/// Negated distance to the closest class mean.
pub fn score_mahalanobis<T: Scalar>(h: &[T], fitted: &Mahalanobis) -> Result<f64> {
    if h.len() != fitted.dim {
        return Err(Error::Shape(format!("feature dim {} vs fitted {}", h.len(), fitted.dim)));
    }
    let h: Vec<f64> = h.iter().map(|v| v.as_f64()).collect();
    let best = fitted
        .class_means
        .iter()
        .map(|(_, mu)| fitted.distance(&h, mu))
        .fold(f64::INFINITY, f64::min);
    Ok(-best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RuleDecision {
    AQ,
    UQ,
}

/// Nouns of a question: lexicon objects, with each object word stemmed.
fn question_noun_stems(q: &Question, lex: &Lexicon) -> BTreeSet<String> {
    extract_terms(q, lex)
        .objects
        .iter()
        .map(|m| q.tokens[m.span.0..=m.span.1].iter().map(|w| stem(w)).collect::<Vec<_>>().join(" "))
        .collect()
}

/// UQ iff the question names an object whose stem is not among the detected
/// object names' stems.
pub fn score_frcnn_rule<'a>(
    q: &Question,
    detected: impl IntoIterator<Item = &'a str>,
    lex: &Lexicon,
) -> RuleDecision {
    let detected: BTreeSet<String> = detected
        .into_iter()
        .map(|n| n.split_whitespace().map(|w| stem(&w.to_lowercase())).collect::<Vec<_>>().join(" "))
        .collect();
    if question_noun_stems(q, lex).iter().all(|n| detected.contains(n)) {
        RuleDecision::AQ
    } else {
        RuleDecision::UQ
    }
}
