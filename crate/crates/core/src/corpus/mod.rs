//! Corpus records: questions, scene graphs, region features and splits.

mod assemble;
mod io;
mod synth;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::text::tokenize;
use crate::uqgen::Perturbation;

pub use assemble::{assemble_dataset, AssembleReport};
pub use io::{
    load_corpus, load_features, load_questions, load_scene_graphs, write_corpus, write_features,
    write_questions, write_scene_graphs, CorpusPaths,
};
pub use synth::{derive_answer, synth_corpus, SynthConfig, COLORS, MATERIALS, OBJECT_NAMES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QuestionKind {
    AQ,
    CandidateUQ,
    UQ,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Provenance {
    Original,
    PTEasy,
    PTHard,
    ClipEasy,
    ClipHard,
    PseudoPair,
    FilterQ,
}

impl QuestionKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "AQ" => Some(Self::AQ),
            "CandidateUQ" => Some(Self::CandidateUQ),
            "UQ" => Some(Self::UQ),
            _ => None,
        }
    }
}

impl Provenance {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "Original" => Self::Original,
            "PTEasy" => Self::PTEasy,
            "PTHard" => Self::PTHard,
            "ClipEasy" => Self::ClipEasy,
            "ClipHard" => Self::ClipHard,
            "PseudoPair" => Self::PseudoPair,
            "FilterQ" => Self::FilterQ,
            _ => return None,
        })
    }
}

/// A natural-language question about one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub image_id: String,
    pub text: String,
    #[serde(skip)]
    pub tokens: Vec<String>,
    pub answer: Option<String>,
    pub kind: QuestionKind,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub perturbations: Vec<Perturbation>,
}

impl Question {
    pub fn new(
        id: impl Into<String>,
        image_id: impl Into<String>,
        text: impl Into<String>,
        answer: Option<String>,
        kind: QuestionKind,
        provenance: Provenance,
    ) -> Result<Self> {
        let q = Question {
            id: id.into(),
            image_id: image_id.into(),
            tokens: Vec::new(),
            text: text.into(),
            answer,
            kind,
            provenance,
            perturbations: Vec::new(),
        };
        q.check_kind()?;
        Ok(q.retokenized())
    }

    /// Answerable question from the original corpus.
    pub fn aq(id: &str, image_id: &str, text: &str, answer: &str) -> Self {
        Self::new(id, image_id, text, Some(answer.to_string()), QuestionKind::AQ, Provenance::Original)
            .expect("AQ with answer is valid")
    }

    pub fn retokenized(mut self) -> Self {
        self.tokens = tokenize(&self.text);
        self
    }

    pub(crate) fn check_kind(&self) -> Result<()> {
        match (self.kind, &self.answer) {
            (QuestionKind::AQ, None) => Err(Error::invalid(format!("AQ `{}` has no answer", self.id))),
            (QuestionKind::CandidateUQ | QuestionKind::UQ, Some(_)) => Err(Error::invalid(format!(
                "{:?} `{}` must not carry an answer",
                self.kind, self.id
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub predicate: String,
    /// Index of the target object within the same scene graph.
    pub object: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub name: String,
    pub attributes: BTreeSet<String>,
    #[serde(default)]
    pub relations: Vec<Relation>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneGraph {
    pub image_id: String,
    pub objects: Vec<SceneObject>,
}

impl SceneGraph {
    pub fn validate(&self) -> Result<()> {
        for (i, obj) in self.objects.iter().enumerate() {
            if !is_lower_nonempty(&obj.name) {
                return Err(Error::invalid(format!(
                    "image `{}` object {i}: name must be nonempty lowercase, got {:?}",
                    self.image_id, obj.name
                )));
            }
            if let Some(a) = obj.attributes.iter().find(|a| !is_lower_nonempty(a)) {
                return Err(Error::invalid(format!(
                    "image `{}` object {i}: attribute must be nonempty lowercase, got {a:?}",
                    self.image_id
                )));
            }
            if let Some(r) = obj.relations.iter().find(|r| r.object >= self.objects.len()) {
                return Err(Error::invalid(format!(
                    "image `{}` object {i}: relation target {} out of range",
                    self.image_id, r.object
                )));
            }
        }
        Ok(())
    }

    pub fn has_object(&self, name: &str) -> bool {
        self.objects.iter().any(|o| o.name == name)
    }

    /// True if some `subject` object relates to some `target` object via `predicate`.
    pub fn has_relation(&self, subject: &str, predicate: &str, target: &str) -> bool {
        self.objects.iter().any(|o| {
            o.name == subject
                && o.relations
                    .iter()
                    .any(|r| r.predicate == predicate && self.objects[r.object].name == target)
        })
    }
}

fn is_lower_nonempty(s: &str) -> bool {
    !s.trim().is_empty() && s.to_lowercase() == s
}

/// `m` region feature vectors of width `dim`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectFeatures<T = f32> {
    pub image_id: String,
    pub m: usize,
    pub dim: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> ObjectFeatures<T> {
    pub fn new(image_id: impl Into<String>, m: usize, dim: usize, data: Vec<T>) -> Result<Self> {
        let image_id = image_id.into();
        if m == 0 || dim == 0 {
            return Err(Error::Shape(format!("image `{image_id}`: m and dim must be >= 1")));
        }
        if data.len() != m * dim {
            return Err(Error::Shape(format!(
                "image `{image_id}`: expected {}x{} values, got {}",
                m,
                dim,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("image `{image_id}`: non-finite feature value")));
        }
        Ok(Self { image_id, m, dim, data })
    }

    pub fn region(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn regions(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.dim)
    }

    /// Mean over regions.
    pub fn mean_region(&self) -> Vec<T> {
        let mut acc = vec![T::zero(); self.dim];
        for r in self.regions() {
            for (a, &v) in acc.iter_mut().zip(r) {
                *a += v;
            }
        }
        let inv = T::one() / T::of(self.m as f64);
        acc.iter_mut().for_each(|a| *a *= inv);
        acc
    }

    pub fn cast<U: Scalar>(&self) -> ObjectFeatures<U> {
        ObjectFeatures {
            image_id: self.image_id.clone(),
            m: self.m,
            dim: self.dim,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Ordered answer vocabulary; an answer's index is its class id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerVocab {
    answers: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl AnswerVocab {
    pub fn new(answers: Vec<String>) -> Result<Self> {
        if answers.len() < 2 {
            return Err(Error::invalid("answer vocabulary needs at least 2 answers"));
        }
        let mut index = HashMap::with_capacity(answers.len());
        for (i, a) in answers.iter().enumerate() {
            if index.insert(a.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate answer `{a}`")));
            }
        }
        Ok(Self { answers, index })
    }

    /// Sorted distinct answers of the given AQs.
    pub fn from_questions<'a>(qs: impl IntoIterator<Item = &'a Question>) -> Result<Self> {
        let set: BTreeSet<String> = qs.into_iter().filter_map(|q| q.answer.clone()).collect();
        Self::new(set.into_iter().collect())
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn index_of(&self, answer: &str) -> Option<usize> {
        self.index.get(answer).copied()
    }

    pub fn answer(&self, i: usize) -> &str {
        &self.answers[i]
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitRole {
    TrainAQ,
    TestAQ,
    TestUQ,
    BackgroundUQ,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub name: String,
    pub role: SplitRole,
    /// `(image_id, question_id)` pairs.
    pub examples: Vec<(String, String)>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Check that every id resolves and that UQ splits only hold UQs.
    pub fn validate(&self, questions: &HashMap<&str, &Question>) -> Result<()> {
        for (img, qid) in &self.examples {
            let q = questions
                .get(qid.as_str())
                .ok_or_else(|| Error::invalid(format!("split `{}`: unknown question `{qid}`", self.name)))?;
            if self.role == SplitRole::TestUQ && q.kind != QuestionKind::UQ {
                return Err(Error::invalid(format!(
                    "split `{}`: question `{qid}` is {:?}, expected UQ",
                    self.name, q.kind
                )));
            }
            if self.role != SplitRole::BackgroundUQ && q.image_id != *img {
                return Err(Error::invalid(format!(
                    "split `{}`: question `{qid}` belongs to `{}`, not `{img}`",
                    self.name, q.image_id
                )));
            }
        }
        Ok(())
    }
}

/// In-memory corpus. Maps are ordered so that iteration is reproducible.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub graphs: BTreeMap<String, SceneGraph>,
    pub questions: Vec<Question>,
    pub features: BTreeMap<String, ObjectFeatures<f32>>,
}

impl Corpus {
    pub fn question_index(&self) -> HashMap<&str, &Question> {
        self.questions.iter().map(|q| (q.id.as_str(), q)).collect()
    }

    pub fn aqs(&self) -> impl Iterator<Item = &Question> {
        self.questions.iter().filter(|q| q.kind == QuestionKind::AQ)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_invariants_are_enforced() {
        assert!(Question::new("a", "i", "What?", None, QuestionKind::AQ, Provenance::Original).is_err());
        assert!(Question::new(
            "u",
            "i",
            "What?",
            Some("x".into()),
            QuestionKind::UQ,
            Provenance::PTEasy
        )
        .is_err());
        let q = Question::aq("a", "i", "What color is the chair?", "red");
        assert_eq!(q.tokens, ["what", "color", "is", "the", "chair"]);
    }

    #[test]
    fn vocab_rejects_duplicates_and_singletons() {
        assert!(AnswerVocab::new(vec!["yes".into()]).is_err());
        assert!(AnswerVocab::new(vec!["yes".into(), "yes".into()]).is_err());
        let v = AnswerVocab::new(vec!["no".into(), "yes".into()]).unwrap();
        assert_eq!(v.index_of("yes"), Some(1));
        assert_eq!(v.answer(0), "no");
    }

    #[test]
    fn scene_graph_validation_catches_bad_targets() {
        let g = SceneGraph {
            image_id: "img".into(),
            objects: vec![SceneObject {
                name: "cup".into(),
                attributes: BTreeSet::new(),
                relations: vec![Relation {
                    predicate: "on".into(),
                    object: 3,
                }],
            }],
        };
        assert!(g.validate().is_err());
    }

    #[test]
    fn mean_region_is_permutation_invariant() {
        let a = ObjectFeatures::new("i", 2, 2, vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let b = ObjectFeatures::new("i", 2, 2, vec![3.0f64, 4.0, 1.0, 2.0]).unwrap();
        assert_eq!(a.mean_region(), b.mean_region());
        assert_eq!(a.mean_region(), vec![2.0, 3.0]);
    }
}
