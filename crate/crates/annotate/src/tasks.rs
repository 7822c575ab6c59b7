use std::collections::BTreeMap;

use log::warn;
use rand::Rng as _;
use rvqa_core::corpus::{Question, QuestionKind, SceneGraph};
use rvqa_core::lexicon::Lexicon;
use rvqa_core::seed::named_rng;
use rvqa_core::uqgen::{gen_filter_question, Decision, FilterKind};
use serde::{Deserialize, Serialize};

/// Server-side task record. Never serialized to clients; see [`TaskView`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: String,
    pub image_ref: String,
    pub candidate: Question,
    pub filter: Question,
    pub filter_slot: usize,
    pub expected_filter_decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewQuestion {
    /// Opaque per-slot id; does not reveal which question is the filter.
    pub question_id: String,
    pub text: String,
}

/// The wire form of a task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskView {
    pub task_id: String,
    pub image_ref: String,
    pub questions: [ViewQuestion; 2],
}

impl AnnotationTask {
    pub fn candidate_slot(&self) -> usize {
        1 - self.filter_slot
    }

    pub fn question_at(&self, slot: usize) -> &Question {
        if slot == self.filter_slot {
            &self.filter
        } else {
            &self.candidate
        }
    }

    pub fn view(&self) -> TaskView {
        let q = |slot: usize| ViewQuestion {
            question_id: format!("{}/{}", self.task_id, slot),
            text: self.question_at(slot).text.clone(),
        };
        TaskView {
            task_id: self.task_id.clone(),
            image_ref: self.image_ref.clone(),
            questions: [q(0), q(1)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedCandidate {
    pub question_id: String,
    pub reason: String,
}

/// Pair each candidate with a filter question, alternating answerable and
/// unanswerable filters, and shuffle the two slots per task.
///
/// `image_ref` is a template; `{image_id}` is replaced by the candidate's image.
pub fn create_tasks(
    candidates: &[Question],
    graphs: &BTreeMap<String, SceneGraph>,
    lex: &Lexicon,
    seed: u64,
    image_ref: &str,
) -> (Vec<AnnotationTask>, Vec<SkippedCandidate>) {
    let mut rng = named_rng(seed, "annotate/tasks");
    let mut tasks = Vec::with_capacity(candidates.len());
    let mut skipped = Vec::new();
    for (i, c) in candidates.iter().enumerate() {
        let mut skip = |reason: String| {
            warn!("skipping candidate `{}`: {reason}", c.id);
            skipped.push(SkippedCandidate {
                question_id: c.id.clone(),
                reason,
            });
        };
        if c.kind != QuestionKind::CandidateUQ {
            skip(format!("kind is {:?}, expected CandidateUQ", c.kind));
            continue;
        }
        let Some(graph) = graphs.get(&c.image_id) else {
            skip(format!("no scene graph for image `{}`", c.image_id));
            continue;
        };
        let kind = if i % 2 == 0 {
            FilterKind::AnswerableFilter
        } else {
            FilterKind::UnanswerableFilter
        };
        let task_id = format!("t{i:05}");
        let (filter, expected) = match gen_filter_question(&format!("filter/{task_id}"), graph, lex, kind, &mut rng) {
            Ok(f) => f,
            Err(e) => {
                skip(e.to_string());
                continue;
            }
        };
        let filter_slot = usize::from(rng.random_bool(0.5));
        tasks.push(AnnotationTask {
            image_ref: image_ref.replace("{image_id}", &c.image_id),
            task_id,
            candidate: c.clone(),
            filter,
            filter_slot,
            expected_filter_decision: expected,
        });
    }
    (tasks, skipped)
}
