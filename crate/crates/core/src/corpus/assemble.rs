use std::collections::HashSet;

use log::warn;
use rand::Rng as _;

use super::synth::questions_by_image;
use super::{DatasetSplit, Question, QuestionKind, SplitRole};
use crate::seed::rng_from;
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssembleReport {
    pub n_uq: usize,
    pub n_aq: usize,
    /// UQs whose image had no original AQ to pair with.
    pub unpaired_uqs: Vec<String>,
}

/// Pair every UQ with one AQ drawn uniformly from the AQs originally asked
/// about the same image, then drop duplicate AQs.
///
/// The draw for a UQ depends only on `(seed, uq.id)`, so reordering the input
/// does not change which AQ a UQ picks.
pub fn assemble_dataset(
    name: &str,
    uqs: &[Question],
    original_aqs: &[Question],
    seed: u64,
) -> (DatasetSplit, DatasetSplit, AssembleReport) {
    let by_image = questions_by_image(original_aqs);
    let mut seen = HashSet::new();
    let mut aq_examples = Vec::new();
    let mut uq_examples = Vec::with_capacity(uqs.len());
    let mut unpaired = Vec::new();

    for uq in uqs {
        debug_assert_eq!(uq.kind, QuestionKind::UQ);
        uq_examples.push((uq.image_id.clone(), uq.id.clone()));
        let pool: Vec<&Question> = by_image
            .get(uq.image_id.as_str())
            .map(|qs| qs.iter().copied().filter(|q| q.kind == QuestionKind::AQ).collect())
            .unwrap_or_default();
        if pool.is_empty() {
            warn!("UQ `{}`: image `{}` has no original AQ", uq.id, uq.image_id);
            unpaired.push(uq.id.clone());
            continue;
        }
        let mut rng = rng_from(derive_seed(seed, &uq.id));
        let aq = pool[rng.random_range(0..pool.len())];
        if seen.insert(aq.id.clone()) {
            aq_examples.push((aq.image_id.clone(), aq.id.clone()));
        }
    }

    let report = AssembleReport {
        n_uq: uq_examples.len(),
        n_aq: aq_examples.len(),
        unpaired_uqs: unpaired,
    };
    (
        DatasetSplit {
            name: format!("{name}/aq"),
            role: SplitRole::TestAQ,
            examples: aq_examples,
        },
        DatasetSplit {
            name: format!("{name}/uq"),
            role: SplitRole::TestUQ,
            examples: uq_examples,
        },
        report,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Provenance;

    fn uq(id: &str, img: &str) -> Question {
        Question::new(id, img, "What color is the hat?", None, QuestionKind::UQ, Provenance::ClipHard).unwrap()
    }

    #[test]
    fn two_uqs_one_aq_dedups_to_one() {
        let aqs = [Question::aq("a1", "img1", "What color is the cup?", "red")];
        let (aq, uqs, rep) = assemble_dataset("t", &[uq("u1", "img1"), uq("u2", "img1")], &aqs, 3);
        assert_eq!(aq.examples, [("img1".to_string(), "a1".to_string())]);
        assert_eq!(uqs.len(), 2);
        assert_eq!((rep.n_aq, rep.n_uq), (1, 2));
    }

    #[test]
    fn draw_is_deterministic_and_same_image() {
        let aqs: Vec<Question> = ["a", "b", "c"]
            .iter()
            .map(|id| Question::aq(id, "img1", "Is there a cup?", "yes"))
            .chain([Question::aq("z", "img2", "Is there a cup?", "no")])
            .collect();
        let first = assemble_dataset("t", &[uq("u", "img1")], &aqs, 9).0;
        let again = assemble_dataset("t", &[uq("u", "img1")], &aqs, 9).0;
        assert_eq!(first, again);
        assert_eq!(first.len(), 1);
        assert!(["a", "b", "c"].contains(&first.examples[0].1.as_str()));
    }

    #[test]
    fn uq_without_aqs_is_reported() {
        let (aq, _, rep) = assemble_dataset("t", &[uq("u", "lonely")], &[], 0);
        assert!(aq.is_empty());
        assert_eq!(rep.unpaired_uqs, ["u"]);
    }
}
