//! Similarity-ranked candidate selection over precomputed image/question
//! embeddings, plus the AQ-vs-UQ score-distribution comparison.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::corpus::{load_features, ObjectFeatures, Provenance, Question, QuestionKind};
use crate::error::{Error, Result};
use crate::seed::rng_from;

/// Row-per-id embedding matrix. Stored as given; cosine makes scale irrelevant.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    ids: Vec<String>,
    dim: usize,
    vectors: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new(ids: Vec<String>, dim: usize, vectors: Vec<f32>) -> Result<Self> {
        if dim == 0 || vectors.len() != ids.len() * dim {
            return Err(Error::Shape(format!(
                "{} ids x dim {dim} needs {} values, got {}",
                ids.len(),
                ids.len() * dim,
                vectors.len()
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (row, id) in ids.iter().enumerate() {
            let v = &vectors[row * dim..(row + 1) * dim];
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("embedding `{id}` has non-finite entries")));
            }
            if v.iter().all(|x| *x == 0.0) {
                return Err(Error::invalid(format!("embedding `{id}` is the zero vector")));
            }
            if index.insert(id.clone(), row).is_some() {
                return Err(Error::invalid(format!("duplicate embedding id `{id}`")));
            }
        }
        Ok(Self {
            ids,
            dim,
            vectors,
            index,
        })
    }

    /// Build from single-region feature blocks.
    pub fn from_features(blocks: Vec<ObjectFeatures<f32>>) -> Result<Self> {
        let dim = blocks.first().map_or(0, |b| b.dim);
        let mut ids = Vec::with_capacity(blocks.len());
        let mut vectors = Vec::with_capacity(blocks.len() * dim);
        for b in blocks {
            if b.m != 1 {
                return Err(Error::Shape(format!("embedding `{}` has m = {}, expected 1", b.image_id, b.m)));
            }
            if b.dim != dim {
                return Err(Error::Shape(format!("embedding `{}` has dim {}, expected {dim}", b.image_id, b.dim)));
            }
            ids.push(b.image_id);
            vectors.extend(b.data);
        }
        Self::new(ids, dim, vectors)
    }

    pub fn load(manifest: &Path) -> Result<Self> {
        Self::from_features(load_features(manifest)?)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        let row = *self.index.get(id)?;
        Some(&self.vectors[row * self.dim..(row + 1) * self.dim])
    }

    fn require(&self, id: &str) -> Result<&[f32]> {
        self.get(id).ok_or_else(|| Error::MissingEmbedding(id.to_string()))
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRanking {
    pub image_id: String,
    pub ranked: Vec<(String, f64)>,
}

impl SimilarityRanking {
    pub fn len(&self) -> usize {
        self.ranked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranked.is_empty()
    }
}

/// "Is there …", "Are there …" (with or without "any").
pub fn is_existence_question(tokens: &[String]) -> bool {
    matches!(
        tokens,
        [first, second, ..] if (first == "is" || first == "are") && second == "there"
    )
}

/// Rank every question by cosine similarity to the image, highest first,
/// ties by question id. Existence questions and questions asked about this
/// image are left out.
pub fn rank_candidates(
    image_id: &str,
    img_emb: &EmbeddingTable,
    q_emb: &EmbeddingTable,
    questions: &[Question],
) -> Result<SimilarityRanking> {
    let iv = img_emb.require(image_id)?;
    let mut ranked = Vec::with_capacity(questions.len());
    let mut seen = std::collections::HashSet::new();
    for q in questions {
        if q.image_id == image_id || is_existence_question(&q.tokens) || !seen.insert(q.id.as_str()) {
            continue;
        }
        ranked.push((q.id.clone(), cosine(iv, q_emb.require(&q.id)?)));
    }
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0)));
    Ok(SimilarityRanking {
        image_id: image_id.to_string(),
        ranked,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClipMode {
    ClipHard,
    ClipEasy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectParams {
    pub hard_pool: usize,
    pub hard_k: usize,
    pub easy_k: usize,
}

impl Default for SelectParams {
    fn default() -> Self {
        Self {
            hard_pool: 2500,
            hard_k: 85,
            easy_k: 50,
        }
    }
}

/// Ranking positions chosen for `mode`, in rank order.
pub fn select_positions(len: usize, mode: ClipMode, params: &SelectParams, seed: u64) -> Vec<usize> {
    match mode {
        ClipMode::ClipHard => {
            let pool = params.hard_pool.min(len);
            let k = params.hard_k.min(pool);
            if pool < params.hard_pool || k < params.hard_k {
                warn!(
                    "ranking has {len} entries; sampling {k} of top {pool} instead of {} of top {}",
                    params.hard_k, params.hard_pool
                );
            }
            let mut idx = sample(&mut rng_from(seed), pool, k).into_vec();
            idx.sort_unstable();
            idx
        }
        ClipMode::ClipEasy => {
            let k = params.easy_k.min(len);
            if k < params.easy_k {
                warn!("ranking has {len} entries; taking all instead of the last {}", params.easy_k);
            }
            (len - k..len).collect()
        }
    }
}

/// Turn the selected ranking entries into candidate UQs on the ranked image.
/// `questions` must hold every ranked id.
pub fn select_candidates(
    r: &SimilarityRanking,
    questions: &HashMap<&str, &Question>,
    mode: ClipMode,
    params: &SelectParams,
    seed: u64,
) -> Result<Vec<Question>> {
    let provenance = match mode {
        ClipMode::ClipHard => Provenance::ClipHard,
        ClipMode::ClipEasy => Provenance::ClipEasy,
    };
    select_positions(r.len(), mode, params, seed)
        .into_iter()
        .map(|i| {
            let qid = &r.ranked[i].0;
            let src = questions
                .get(qid.as_str())
                .ok_or_else(|| Error::invalid(format!("ranked question `{qid}` not in the question set")))?;
            Question::new(
                format!("{qid}@{}", r.image_id),
                r.image_id.clone(),
                src.text.clone(),
                None,
                QuestionKind::CandidateUQ,
                provenance,
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub overlap: f64,
    pub mean_distance: f64,
    /// `bins + 1` shared bin edges.
    pub edges: Vec<f64>,
    /// Densities; each histogram integrates to 1 over the grid.
    pub aq_hist: Vec<f64>,
    pub uq_hist: Vec<f64>,
}

impl SimilarityReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,aq_density,uq_density\n");
        for b in 0..self.aq_hist.len() {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                self.edges[b],
                self.edges[b + 1],
                self.aq_hist[b],
                self.uq_hist[b]
            );
        }
        out
    }
}

fn density(scores: &[f64], lo: f64, width: f64, bins: usize) -> Vec<f64> {
    let mut counts = vec![0usize; bins];
    for &s in scores {
        let b = (((s - lo) / width).floor() as isize).clamp(0, bins as isize - 1) as usize;
        counts[b] += 1;
    }
    let n = scores.len() as f64;
    counts.into_iter().map(|c| c as f64 / (n * width)).collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn similarity_report(aq_scores: &[f64], uq_scores: &[f64], bins: usize) -> Result<SimilarityReport> {
    if aq_scores.is_empty() || uq_scores.is_empty() {
        return Err(Error::invalid("similarity report needs nonempty AQ and UQ score lists"));
    }
    if bins < 2 {
        return Err(Error::invalid(format!("bins must be >= 2, got {bins}")));
    }
    if aq_scores.iter().chain(uq_scores).any(|s| !s.is_finite()) {
        return Err(Error::invalid("similarity scores must be finite"));
    }
    let pooled = aq_scores.iter().chain(uq_scores);
    let mut lo = pooled.clone().copied().fold(f64::INFINITY, f64::min);
    let mut hi = pooled.copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|b| if b == bins { hi } else { lo + b as f64 * width }).collect();
    let aq_hist = density(aq_scores, lo, width, bins);
    let uq_hist = density(uq_scores, lo, width, bins);
    let overlap = aq_hist.iter().zip(&uq_hist).map(|(a, u)| a.min(*u) * width).sum::<f64>();
    Ok(SimilarityReport {
        overlap: overlap.clamp(0.0, 1.0),
        mean_distance: (mean(aq_scores) - mean(uq_scores)).abs(),
        edges,
        aq_hist,
        uq_hist,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: &[(&str, &[f32])]) -> EmbeddingTable {
        let dim = rows[0].1.len();
        EmbeddingTable::new(
            rows.iter().map(|(id, _)| id.to_string()).collect(),
            dim,
            rows.iter().flat_map(|(_, v)| v.iter().copied()).collect(),
        )
        .unwrap()
    }

    fn q(id: &str, img: &str, text: &str) -> Question {
        Question::aq(id, img, text, "x")
    }

    #[test]
    fn ranks_by_cosine_and_excludes() {
        let img = table(&[("i", &[1.0, 0.0])]);
        let qe = table(&[
            ("a", &[0.9, (1.0f32 - 0.81).sqrt()]),
            ("b", &[0.1, (1.0f32 - 0.01).sqrt()]),
            ("c", &[0.5, (1.0f32 - 0.25).sqrt()]),
            ("d", &[1.0, 0.0]),
            ("e", &[1.0, 0.0]),
        ]);
        let qs = [
            q("a", "j", "What is it?"),
            q("b", "j", "Who is it?"),
            q("c", "j", "Why is it?"),
            q("d", "j", "Are there any cats?"),
            q("e", "i", "What color is the cup?"),
        ];
        let r = rank_candidates("i", &img, &qe, &qs).unwrap();
        let ids: Vec<&str> = r.ranked.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(ids, ["a", "c", "b"]);
        assert!((r.ranked[0].1 - 0.9).abs() < 1e-6);
    }

    #[test]
    fn missing_embedding_names_the_id() {
        let img = table(&[("i", &[1.0])]);
        let qe = table(&[("a", &[1.0])]);
        let err = rank_candidates("i", &img, &qe, &[q("zz", "j", "What?")]).unwrap_err();
        assert!(err.to_string().contains("zz"));
        assert!(rank_candidates("nope", &img, &qe, &[]).is_err());
    }

    #[test]
    fn ties_break_by_id() {
        let img = table(&[("i", &[1.0])]);
        let qe = table(&[("b", &[2.0]), ("a", &[1.0])]);
        let r = rank_candidates("i", &img, &qe, &[q("b", "j", "x"), q("a", "j", "y")]).unwrap();
        assert_eq!(r.ranked[0].0, "a");
    }

    #[test]
    fn zero_vectors_rejected() {
        assert!(EmbeddingTable::new(vec!["a".into()], 2, vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn easy_takes_the_tail() {
        let pos = select_positions(3000, ClipMode::ClipEasy, &SelectParams::default(), 0);
        assert_eq!(pos, (2950..3000).collect::<Vec<_>>());
    }

    #[test]
    fn hard_truncates_to_short_rankings() {
        let pos = select_positions(100, ClipMode::ClipHard, &SelectParams::default(), 4);
        assert_eq!(pos.len(), 85);
        assert!(pos.iter().all(|&p| p < 100));
        assert_eq!(pos, select_positions(100, ClipMode::ClipHard, &SelectParams::default(), 4));
    }

    #[test]
    fn report_hand_example() {
        let r = similarity_report(&[0.0, 0.0, 1.0, 1.0], &[0.0, 1.0, 1.0, 1.0], 2).unwrap();
        assert!((r.overlap - 0.75).abs() < 1e-12);
        assert!((r.mean_distance - 0.25).abs() < 1e-12);
    }

    #[test]
    fn report_identical_and_disjoint() {
        let a = [0.1, 0.2, 0.4];
        let r = similarity_report(&a, &a, 10).unwrap();
        assert!((r.overlap - 1.0).abs() < 1e-12);
        assert_eq!(r.mean_distance, 0.0);
        let d = similarity_report(&[0.0, 0.1], &[0.9, 1.0], 4).unwrap();
        assert_eq!(d.overlap, 0.0);
        assert_eq!(similarity_report(&[0.3], &[0.3], 2).unwrap().overlap, 1.0);
        assert!(r.to_csv().lines().count() == 11);
    }
}
