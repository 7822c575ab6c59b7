//! Background UQs from random image/question pairing, and RoI Mixup.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::distr::Open01;
use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::clipsel::SimilarityRanking;
use crate::corpus::{ObjectFeatures, Provenance, Question, QuestionKind};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed::{rng_from, Rng};

pub type LabelVector<T> = Vec<T>;

/// A training instance. An all-zero target marks a UQ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct Example<T = f32> {
    pub image_id: String,
    pub question_id: String,
    pub target: LabelVector<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mix_lambda: Option<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixed_with: Option<String>,
    #[serde(default = "original")]
    pub provenance: Provenance,
}

fn original() -> Provenance {
    Provenance::Original
}

impl<T: Scalar> Example<T> {
    pub fn aq(image_id: impl Into<String>, question_id: impl Into<String>, answer: usize, k: usize) -> Self {
        let mut target = vec![T::zero(); k];
        target[answer] = T::one();
        Self {
            image_id: image_id.into(),
            question_id: question_id.into(),
            target,
            mix_lambda: None,
            mixed_with: None,
            provenance: Provenance::Original,
        }
    }

    pub fn uq(image_id: impl Into<String>, question_id: impl Into<String>, k: usize, provenance: Provenance) -> Self {
        Self {
            image_id: image_id.into(),
            question_id: question_id.into(),
            target: vec![T::zero(); k],
            mix_lambda: None,
            mixed_with: None,
            provenance,
        }
    }

    pub fn is_uq(&self) -> bool {
        self.target.iter().all(|t| t.is_zero())
    }

    pub fn k(&self) -> usize {
        self.target.len()
    }
}

/// The image each question was asked about, and the set of pool images.
fn pool_index<T>(pool: &[Example<T>]) -> (BTreeSet<&str>, BTreeMap<&str, &str>) {
    let images = pool.iter().map(|e| e.image_id.as_str()).collect();
    let source = pool
        .iter()
        .map(|e| (e.question_id.as_str(), e.image_id.as_str()))
        .collect();
    (images, source)
}

fn pool_k<T: Scalar>(pool: &[Example<T>]) -> Result<usize> {
    let k = pool.first().map_or(0, Example::k);
    if pool.iter().any(|e| e.k() != k) {
        return Err(Error::Shape("examples in the pool disagree on K".into()));
    }
    Ok(k)
}

/// Draw `n` pairs uniformly from all (image, foreign question) combinations.
pub fn sample_pseudo_uq<T: Scalar>(aq_pool: &[Example<T>], n: usize, seed: u64) -> Result<Vec<Example<T>>> {
    let k = pool_k(aq_pool)?;
    let (images, source) = pool_index(aq_pool);
    let images: Vec<&str> = images.into_iter().collect();
    let questions: Vec<(&str, &str)> = source.into_iter().collect();
    if n > 0 && images.len() < 2 {
        return Err(Error::Exhausted {
            what: "a foreign question (pool has fewer than two images)",
            attempts: 0,
        });
    }
    let mut rng = rng_from(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        // uniform over the product, rejecting same-image pairs
        let v = images[rng.random_range(0..images.len())];
        let (q, src) = questions[rng.random_range(0..questions.len())];
        if src != v {
            out.push(Example::uq(v, q, k, Provenance::PseudoPair));
        }
    }
    Ok(out)
}

/// Like [`sample_pseudo_uq`] but each image only pairs with the first
/// `top_n` entries of its similarity ranking.
pub fn select_hard_pseudo<T: Scalar>(
    aq_pool: &[Example<T>],
    rankings: &BTreeMap<String, SimilarityRanking>,
    top_n: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<Example<T>>> {
    let k = pool_k(aq_pool)?;
    let (images, source) = pool_index(aq_pool);
    let mut lists: Vec<(&str, Vec<&str>)> = Vec::with_capacity(images.len());
    for v in images {
        let r = rankings
            .get(v)
            .ok_or_else(|| Error::invalid(format!("no similarity ranking for image `{v}`")))?;
        let valid: Vec<&str> = r
            .ranked
            .iter()
            .take(top_n)
            .map(|(q, _)| q.as_str())
            .filter(|q| source.get(q).is_none_or(|src| *src != v))
            .collect();
        if !valid.is_empty() {
            lists.push((v, valid));
        }
    }
    if n > 0 && lists.is_empty() {
        return Err(Error::Exhausted {
            what: "a ranked foreign question",
            attempts: 0,
        });
    }
    let cumulative: Vec<usize> = lists
        .iter()
        .scan(0, |acc, (_, l)| {
            *acc += l.len();
            Some(*acc)
        })
        .collect();
    let total = cumulative.last().copied().unwrap_or(0);
    let mut rng = rng_from(seed);
    Ok((0..n)
        .map(|_| {
            let r = rng.random_range(0..total);
            let li = cumulative.partition_point(|&c| c <= r);
            let offset = r - if li == 0 { 0 } else { cumulative[li - 1] };
            let (v, l) = &lists[li];
            Example::uq(*v, l[offset], k, Provenance::PseudoPair)
        })
        .collect())
}

/// Materialize pseudo pairs as questions: the foreign question's text asked
/// about the paired image.
pub fn pseudo_questions<T>(pairs: &[Example<T>], questions: &HashMap<&str, &Question>) -> Result<Vec<Question>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let src = questions
                .get(e.question_id.as_str())
                .ok_or_else(|| Error::invalid(format!("unknown question `{}`", e.question_id)))?;
            Question::new(
                format!("pseudo{i}:{}@{}", e.question_id, e.image_id),
                e.image_id.clone(),
                src.text.clone(),
                None,
                QuestionKind::UQ,
                Provenance::PseudoPair,
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixupConfig {
    pub beta: f64,
    pub apply_prob: f64,
}

impl MixupConfig {
    pub const BUTD: Self = Self::with_beta(0.7);
    pub const LXMERT: Self = Self::with_beta(5.0);
    pub const UNITER: Self = Self::with_beta(3.0);

    pub const fn with_beta(beta: f64) -> Self {
        Self { beta, apply_prob: 0.5 }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "butd" => Some(Self::BUTD),
            "lxmert" => Some(Self::LXMERT),
            "uniter" => Some(Self::UNITER),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!("mixup beta must be > 0, got {}", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.apply_prob) {
            return Err(Error::invalid(format!("apply_prob must be in [0, 1], got {}", self.apply_prob)));
        }
        Ok(())
    }
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self::BUTD
    }
}

/// Beta(1, beta) by inverse transform.
pub fn sample_beta_with(rng: &mut Rng, beta: f64) -> Result<f64> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::invalid(format!("beta must be > 0, got {beta}")));
    }
    let u: f64 = rng.sample(Open01);
    Ok(1.0 - u.powf(1.0 / beta))
}

pub fn sample_beta(beta: f64, seed: u64) -> Result<f64> {
    sample_beta_with(&mut rng_from(seed), beta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mixed<T> {
    pub features: ObjectFeatures<T>,
    pub target: LabelVector<T>,
    pub lambda_effective: T,
    /// Own region indices kept, in slot order.
    pub kept: Vec<usize>,
    /// `(slot, donor region)` for every replaced slot.
    pub donor: Vec<(usize, usize)>,
}

impl<T: Scalar> Mixed<T> {
    /// The example relabelled with the realized mixture.
    pub fn example(&self, ex: &Example<T>, donor_image: &str) -> Example<T> {
        Example {
            target: self.target.clone(),
            mix_lambda: Some(self.lambda_effective),
            mixed_with: Some(donor_image.to_string()),
            ..ex.clone()
        }
    }
}

/// Regions to keep for a given lambda.
pub fn keep_count(lambda: f64, m: usize) -> usize {
    let raw = (lambda * m as f64).round() as usize;
    if lambda > 0.0 && lambda < 1.0 {
        raw.clamp(1, m.saturating_sub(1).max(1))
    } else {
        raw.min(m)
    }
}

/// RoI Mixup with an explicit lambda.
pub fn roi_mixup_with_lambda<T: Scalar>(
    ex: &Example<T>,
    own: &ObjectFeatures<T>,
    donor: &ObjectFeatures<T>,
    lambda: f64,
    rng: &mut Rng,
) -> Result<Mixed<T>> {
    if own.m != donor.m || own.dim != donor.dim {
        return Err(Error::Shape(format!(
            "own `{}` is {}x{}, donor `{}` is {}x{}",
            own.image_id, own.m, own.dim, donor.image_id, donor.m, donor.dim
        )));
    }
    if own.image_id == donor.image_id {
        return Err(Error::invalid(format!("donor image equals own image `{}`", own.image_id)));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda must be in [0, 1], got {lambda}")));
    }
    let m = own.m;
    let m_keep = keep_count(lambda, m);
    let mut kept = sample(rng, m, m_keep).into_vec();
    kept.sort_unstable();
    let donor_regions = sample(rng, m, m - m_keep).into_vec();

    let mut data = own.data.clone();
    let mut donor_map = Vec::with_capacity(m - m_keep);
    let mut next = donor_regions.into_iter();
    for slot in (0..m).filter(|s| kept.binary_search(s).is_err()) {
        let d = next.next().expect("one donor region per dropped slot");
        data[slot * own.dim..(slot + 1) * own.dim].copy_from_slice(donor.region(d));
        donor_map.push((slot, d));
    }
    let lambda_hat = T::of(m_keep as f64) / T::of(m as f64);
    Ok(Mixed {
        features: ObjectFeatures::new(own.image_id.clone(), m, own.dim, data)?,
        target: ex.target.iter().map(|&y| lambda_hat * y).collect(),
        lambda_effective: lambda_hat,
        kept,
        donor: donor_map,
    })
}

/// RoI Mixup with lambda drawn from Beta(1, cfg.beta).
pub fn roi_mixup<T: Scalar>(
    ex: &Example<T>,
    donor: &ObjectFeatures<T>,
    own: &ObjectFeatures<T>,
    cfg: &MixupConfig,
    seed: u64,
) -> Result<Mixed<T>> {
    let mut rng = rng_from(seed);
    let lambda = sample_beta_with(&mut rng, cfg.beta)?;
    roi_mixup_with_lambda(ex, own, donor, lambda, &mut rng)
}
