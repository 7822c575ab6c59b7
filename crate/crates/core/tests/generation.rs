use std::collections::HashMap;

use proptest::prelude::*;
use rvqa_core::clipsel::{cosine, select_positions, similarity_report, ClipMode, SelectParams};
use rvqa_core::corpus::{
    assemble_dataset, derive_answer, load_corpus, synth_corpus, write_corpus, Corpus, CorpusPaths, Provenance,
    Question, QuestionKind, SynthConfig,
};
use rvqa_core::lexicon::build_lexicon;
use rvqa_core::text::tokenize;
use rvqa_core::uqgen::{filter_conflicts, gen_pt_batch, ConflictRules, PtMode};

fn corpus(seed: u64) -> Corpus {
    synth_corpus(&SynthConfig { n_images: 40, seed, ..Default::default() }).unwrap()
}

/// Source tokens with every perturbed span replaced by its replacement.
fn splice(source: &Question, cand: &Question) -> Vec<String> {
    let mut spans: Vec<_> = cand.perturbations.iter().collect();
    spans.sort_by_key(|p| p.span.0);
    let mut out = Vec::new();
    let mut at = 0;
    for p in spans {
        out.extend_from_slice(&source.tokens[at..p.span.0]);
        out.extend(tokenize(&p.replacement));
        at = p.span.1 + 1;
    }
    out.extend_from_slice(&source.tokens[at..]);
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn synth_answers_follow_the_scene_graph(seed in any::<u64>()) {
        let c = corpus(seed);
        prop_assert!(c.aqs().count() > 0);
        for q in c.aqs() {
            let derived = derive_answer(&c.graphs[&q.image_id], &q.text);
            prop_assert_eq!(derived.as_ref(), q.answer.as_ref(), "{}", q.text);
        }
    }

    #[test]
    fn pt_candidates_only_touch_their_spans(seed in any::<u64>()) {
        let c = corpus(seed);
        let lex = build_lexicon(c.graphs.values()).unwrap();
        let index = c.question_index();
        let aqs: Vec<Question> = c.aqs().cloned().collect();
        for mode in [PtMode::Easy, PtMode::Hard] {
            for cand in gen_pt_batch(&aqs, &lex, mode, seed) {
                prop_assert_eq!(cand.kind, QuestionKind::CandidateUQ);
                prop_assert!(cand.answer.is_none());
                prop_assert!(!cand.perturbations.is_empty());
                let src = index[cand.perturbations[0].source_question_id.as_str()];
                prop_assert_eq!(&cand.image_id, &src.image_id);
                prop_assert_eq!(splice(src, &cand), cand.tokens.clone());
                prop_assert!(cand.perturbations.iter().any(|p| p.original != p.replacement));
                if mode == PtMode::Easy {
                    prop_assert_eq!(cand.provenance, Provenance::PTEasy);
                }
            }
        }
    }

    #[test]
    fn generation_is_a_function_of_the_seed(seed in any::<u64>()) {
        let c = corpus(seed);
        let lex = build_lexicon(c.graphs.values()).unwrap();
        let aqs: Vec<Question> = c.aqs().cloned().collect();
        for mode in [PtMode::Easy, PtMode::Hard] {
            prop_assert_eq!(gen_pt_batch(&aqs, &lex, mode, seed), gen_pt_batch(&aqs, &lex, mode, seed));
        }
        prop_assert_eq!(corpus(seed), c);
    }

    #[test]
    fn conflict_filter_keeps_an_ordered_subset(seed in any::<u64>()) {
        let c = corpus(seed);
        let lex = build_lexicon(c.graphs.values()).unwrap();
        let aqs: Vec<Question> = c.aqs().cloned().collect();
        let cands = gen_pt_batch(&aqs, &lex, PtMode::Hard, seed);
        let kept = filter_conflicts(&cands, &aqs, &ConflictRules::default());
        let mut it = cands.iter();
        for k in &kept {
            prop_assert!(it.any(|c| c == k), "`{}` out of order or invented", k.id);
        }
        // idempotent
        prop_assert_eq!(filter_conflicts(&kept, &aqs, &ConflictRules::default()), kept.clone());
    }

    #[test]
    fn assembled_aqs_are_unique_and_on_the_uq_image(seed in any::<u64>(), take in 1usize..60) {
        let c = corpus(seed);
        let lex = build_lexicon(c.graphs.values()).unwrap();
        let aqs: Vec<Question> = c.aqs().cloned().collect();
        let uqs: Vec<Question> = gen_pt_batch(&aqs, &lex, PtMode::Easy, seed)
            .into_iter()
            .take(take)
            .map(|mut q| { q.kind = QuestionKind::UQ; q })
            .collect();
        let (aq_split, uq_split, report) = assemble_dataset("t", &uqs, &aqs, seed);
        prop_assert_eq!(uq_split.len(), uqs.len());
        prop_assert_eq!(report.n_aq, aq_split.len());
        let mut seen = std::collections::HashSet::new();
        let uq_images: std::collections::HashSet<&str> = uqs.iter().map(|q| q.image_id.as_str()).collect();
        let index: HashMap<&str, &Question> = aqs.iter().map(|q| (q.id.as_str(), q)).collect();
        for (img, qid) in &aq_split.examples {
            prop_assert!(seen.insert(qid.clone()), "duplicate AQ {}", qid);
            prop_assert!(uq_images.contains(img.as_str()));
            prop_assert_eq!(&index[qid.as_str()].image_id, img);
        }
        // reordering the UQs does not change the AQ set
        let mut rev = uqs.clone();
        rev.reverse();
        let (aq_rev, _, _) = assemble_dataset("t", &rev, &aqs, seed);
        let mut a: Vec<_> = aq_split.examples.clone();
        let mut b = aq_rev.examples;
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn cosine_ignores_positive_scale(
        v in prop::collection::vec(-10.0f32..10.0, 1..16),
        w in prop::collection::vec(-10.0f32..10.0, 16),
        a in 0.01f32..100.0,
        b in 0.01f32..100.0,
    ) {
        let w = &w[..v.len()];
        prop_assume!(v.iter().any(|x| x.abs() > 1e-3) && w.iter().any(|x| x.abs() > 1e-3));
        let va: Vec<f32> = v.iter().map(|x| x * a).collect();
        let wb: Vec<f32> = w.iter().map(|x| x * b).collect();
        let c = cosine(&v, w);
        prop_assert!((-1.0..=1.0).contains(&c));
        prop_assert!((cosine(&va, &wb) - c).abs() < 1e-5);
        prop_assert!((cosine(&v, &v) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn hard_and_easy_positions_are_disjoint(
        len in 1usize..400,
        pool in 1usize..300,
        hard_k in 1usize..80,
        easy_k in 1usize..100,
        seed in any::<u64>(),
    ) {
        let params = SelectParams { hard_pool: pool, hard_k, easy_k };
        let hard = select_positions(len, ClipMode::ClipHard, &params, seed);
        let easy = select_positions(len, ClipMode::ClipEasy, &params, seed);
        prop_assert_eq!(hard.len(), hard_k.min(pool).min(len));
        prop_assert_eq!(easy.len(), easy_k.min(len));
        prop_assert!(hard.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(hard.iter().all(|&i| i < pool.min(len)));
        if pool + easy_k <= len {
            prop_assert!(hard.iter().all(|i| !easy.contains(i)));
        }
        prop_assert_eq!(select_positions(len, ClipMode::ClipHard, &params, seed), hard);
    }

    #[test]
    fn overlap_is_a_fraction(
        aq in prop::collection::vec(-1.0f64..1.0, 1..50),
        uq in prop::collection::vec(-1.0f64..1.0, 1..50),
        bins in 2usize..40,
    ) {
        let r = similarity_report(&aq, &uq, bins).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.overlap));
        prop_assert_eq!(r.edges.len(), bins + 1);
        let width = r.edges[1] - r.edges[0];
        for h in [&r.aq_hist, &r.uq_hist] {
            prop_assert!((h.iter().sum::<f64>() * width - 1.0).abs() < 1e-9);
        }
        let same = similarity_report(&aq, &aq, bins).unwrap();
        prop_assert!((same.overlap - 1.0).abs() < 1e-9);
        prop_assert_eq!(same.mean_distance, 0.0);
    }
}

#[test]
fn corpus_round_trips_through_disk() {
    let c = corpus(9);
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), &c).unwrap();
    assert_eq!(load_corpus(&CorpusPaths::in_dir(dir.path())).unwrap(), c);
}
