//! Perturbation-based candidate UQs, conflict filtering and filter questions.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{Provenance, Question, QuestionKind, SceneGraph};
use crate::error::{Error, Result};
use crate::lexicon::{phrase_stem, Lexicon};
use crate::seed::{derive_seed, rng_from, Rng};
use crate::text::{match_case, pluralize, tokenize, tokenize_spans};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PerturbationKind {
    ObjectSwap,
    AttributeSwap,
    RelationAntonym,
}

/// One edit applied to a source question. `span` is an inclusive token range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Perturbation {
    pub source_question_id: String,
    pub kind: PerturbationKind,
    pub span: (usize, usize),
    pub original: String,
    pub replacement: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// A lexicon term found in a question; `span` is an inclusive token range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TermMatch {
    pub span: (usize, usize),
    pub term: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Terms {
    pub objects: Vec<TermMatch>,
    pub attributes: Vec<TermMatch>,
}

/// Longest-match-first, non-overlapping lexicon matching.
///
/// Objects are matched by stem (so plurals resolve to the singular name) and
/// take precedence; attributes are matched verbatim on the remaining tokens.
pub fn extract_terms(q: &Question, lex: &Lexicon) -> Terms {
    let toks: Vec<&str> = q.tokens.iter().map(String::as_str).collect();
    let mut covered = vec![false; toks.len()];
    let mut terms = Terms::default();

    let max_obj = lex.max_object_words();
    let mut i = 0;
    while i < toks.len() {
        let mut hit = None;
        for len in (1..=max_obj.min(toks.len() - i)).rev() {
            if let Some(name) = lex.object_for_stem(&phrase_stem(&toks[i..i + len])) {
                hit = Some((len, name.to_string()));
                break;
            }
        }
        match hit {
            Some((len, name)) => {
                covered[i..i + len].iter_mut().for_each(|c| *c = true);
                terms.objects.push(TermMatch {
                    span: (i, i + len - 1),
                    term: name,
                });
                i += len;
            }
            None => i += 1,
        }
    }

    let pool = lex.attribute_pool();
    let max_attr = lex.max_attribute_words();
    let mut i = 0;
    while i < toks.len() {
        let mut hit = None;
        for len in (1..=max_attr.min(toks.len() - i)).rev() {
            if covered[i..i + len].iter().any(|&c| c) {
                continue;
            }
            let phrase = toks[i..i + len].join(" ");
            if pool.contains(phrase.as_str()) {
                hit = Some((len, phrase));
                break;
            }
        }
        match hit {
            Some((len, attr)) => {
                terms.attributes.push(TermMatch {
                    span: (i, i + len - 1),
                    term: attr,
                });
                i += len;
            }
            None => i += 1,
        }
    }
    terms
}

/// Replace token spans of `text` (inclusive token ranges, non-overlapping).
fn rewrite(text: &str, edits: &[((usize, usize), String)]) -> String {
    let spans = tokenize_spans(text);
    let mut edits: Vec<&((usize, usize), String)> = edits.iter().collect();
    edits.sort_by_key(|(span, _)| span.0);
    let mut out = String::with_capacity(text.len() + 16);
    let mut cursor = 0;
    for ((start, end), replacement) in edits {
        let from = spans[*start].bytes.start;
        let to = spans[*end].bytes.end;
        out.push_str(&text[cursor..from]);
        out.push_str(&match_case(replacement, &text[from..to]));
        cursor = to;
    }
    out.push_str(&text[cursor..]);
    out
}

fn candidate(source: &Question, suffix: &str, provenance: Provenance, text: String, perturbations: Vec<Perturbation>) -> Question {
    let mut q = Question::new(
        format!("{}/{suffix}", source.id),
        source.image_id.clone(),
        text,
        None,
        QuestionKind::CandidateUQ,
        provenance,
    )
    .expect("candidate UQ without answer is valid");
    q.perturbations = perturbations;
    q
}

fn pick<'a>(rng: &mut Rng, pool: &[&'a str]) -> &'a str {
    pool[rng.random_range(0..pool.len())]
}

/// PT-Easy: swap every detected object for a different, uniformly drawn
/// lexicon object. Plural surface forms are re-inflected.
pub fn gen_pt_easy(q: &Question, lex: &Lexicon, seed: u64) -> Vec<Question> {
    let terms = extract_terms(q, lex);
    if terms.objects.is_empty() {
        return Vec::new();
    }
    let mut rng = rng_from(seed);
    let mut edits = Vec::new();
    let mut perturbations = Vec::new();
    for m in &terms.objects {
        let pool: Vec<&str> = lex.objects.iter().map(String::as_str).filter(|o| *o != m.term).collect();
        if pool.is_empty() {
            return Vec::new();
        }
        let replacement = pick(&mut rng, &pool);
        let surface = q.tokens[m.span.0..=m.span.1].join(" ");
        let (text, note) = if surface == m.term {
            (replacement.to_string(), None)
        } else if surface == pluralize(&m.term) {
            (pluralize(replacement), None)
        } else {
            (replacement.to_string(), Some(format!("irregular inflection `{surface}` not reproduced")))
        };
        edits.push((m.span, text.clone()));
        perturbations.push(Perturbation {
            source_question_id: q.id.clone(),
            kind: PerturbationKind::ObjectSwap,
            span: m.span,
            original: surface,
            replacement: text,
            note,
        });
    }
    vec![candidate(q, "pt-easy", Provenance::PTEasy, rewrite(&q.text, &edits), perturbations)]
}

/// PT-Hard: keep objects, swap the attributes modifying them for another
/// attribute of the same object, and flip spatial terms via the antonym map.
pub fn gen_pt_hard(q: &Question, lex: &Lexicon, seed: u64) -> Vec<Question> {
    let terms = extract_terms(q, lex);
    let mut rng = rng_from(seed);
    let mut edits = Vec::new();
    let mut perturbations = Vec::new();

    let attr_at: HashMap<usize, &TermMatch> = terms.attributes.iter().map(|a| (a.span.1, a)).collect();
    let global: Vec<&str> = lex.attribute_pool().into_iter().collect();
    for obj in &terms.objects {
        // walk back over the contiguous run of modifiers
        let mut end = obj.span.0;
        while end > 0 {
            let Some(attr) = attr_at.get(&(end - 1)) else { break };
            let own: Vec<&str> = lex
                .attributes
                .get(&obj.term)
                .map(|s| s.iter().map(String::as_str).filter(|a| *a != attr.term).collect())
                .unwrap_or_default();
            let pool = if own.is_empty() {
                global.iter().copied().filter(|a| *a != attr.term).collect()
            } else {
                own
            };
            if !pool.is_empty() {
                let replacement = pick(&mut rng, &pool).to_string();
                edits.push((attr.span, replacement.clone()));
                perturbations.push(Perturbation {
                    source_question_id: q.id.clone(),
                    kind: PerturbationKind::AttributeSwap,
                    span: attr.span,
                    original: attr.term.clone(),
                    replacement,
                    note: None,
                });
            }
            end = attr.span.0;
        }
    }

    let in_term = |i: usize| {
        terms
            .objects
            .iter()
            .chain(&terms.attributes)
            .any(|t| (t.span.0..=t.span.1).contains(&i))
    };
    for (i, tok) in q.tokens.iter().enumerate() {
        if in_term(i) {
            continue;
        }
        if let Some(ant) = lex.antonym(tok) {
            edits.push(((i, i), ant.to_string()));
            perturbations.push(Perturbation {
                source_question_id: q.id.clone(),
                kind: PerturbationKind::RelationAntonym,
                span: (i, i),
                original: tok.clone(),
                replacement: ant.to_string(),
                note: None,
            });
        }
    }

    if edits.is_empty() {
        return Vec::new();
    }
    perturbations.sort_by_key(|p| p.span.0);
    vec![candidate(q, "pt-hard", Provenance::PTHard, rewrite(&q.text, &edits), perturbations)]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PtMode {
    Easy,
    Hard,
}

/// Run a generator over many AQs with per-question seeds `hash(seed, id)`.
pub fn gen_pt_batch(aqs: &[Question], lex: &Lexicon, mode: PtMode, seed: u64) -> Vec<Question> {
    aqs.iter()
        .filter(|q| q.kind == QuestionKind::AQ)
        .flat_map(|q| {
            let s = derive_seed(seed, &q.id);
            match mode {
                PtMode::Easy => gen_pt_easy(q, lex, s),
                PtMode::Hard => gen_pt_hard(q, lex, s),
            }
        })
        .collect()
}

/// Property categories whose values must not already modify the queried object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictRules {
    pub categories: BTreeMap<String, BTreeSet<String>>,
}

impl Default for ConflictRules {
    fn default() -> Self {
        let set = |ws: &[&str]| ws.iter().map(|w| w.to_string()).collect::<BTreeSet<_>>();
        Self {
            categories: BTreeMap::from([
                (
                    "color".to_string(),
                    set(&[
                        "red", "blue", "green", "yellow", "white", "black", "brown", "gray", "grey", "orange",
                        "pink", "purple", "silver", "gold", "tan", "beige",
                    ]),
                ),
                (
                    "material".to_string(),
                    set(&[
                        "wooden", "wood", "metal", "metallic", "plastic", "glass", "leather", "ceramic", "stone",
                        "concrete", "brick", "cloth", "paper",
                    ]),
                ),
                (
                    "shape".to_string(),
                    set(&["round", "square", "rectangular", "triangular", "circular", "oval"]),
                ),
            ]),
        }
    }
}

const COPULAS: &[&str] = &["is", "are", "was", "were"];
const DETERMINERS: &[&str] = &["the", "a", "an", "this", "that", "these", "those"];
const PHRASE_BREAKS: &[&str] = &[
    "to", "on", "in", "of", "at", "near", "next", "behind", "left", "right", "above", "below", "under",
    "beside", "by", "with", "that", "which", "who", "and", "or", "in", "inside", "outside", "front",
    "top", "bottom", "around", "over", "for",
];

impl ConflictRules {
    /// True if the question asks for a property category that a modifier of
    /// the queried noun phrase already states.
    pub fn conflicts(&self, tokens: &[String]) -> bool {
        let t: Vec<&str> = tokens.iter().map(String::as_str).collect();
        let (category, np_start) = match t.as_slice() {
            ["what" | "which", cat, ..] if self.categories.contains_key(*cat) => (*cat, 2),
            ["what", cop, "the", cat, "of", ..] if COPULAS.contains(cop) && self.categories.contains_key(*cat) => {
                (*cat, 5)
            }
            _ => return false,
        };
        let values = &self.categories[category];
        t[np_start..]
            .iter()
            .skip_while(|w| COPULAS.contains(w) || DETERMINERS.contains(w))
            .take_while(|w| !PHRASE_BREAKS.contains(w))
            .any(|w| values.contains(*w))
    }
}

/// Drop self-contradicting candidates and candidates that repeat an existing
/// AQ on the same image. Order is preserved.
pub fn filter_conflicts(candidates: &[Question], existing_aqs: &[Question], rules: &ConflictRules) -> Vec<Question> {
    let existing: HashSet<(&str, &[String])> = existing_aqs
        .iter()
        .map(|q| (q.image_id.as_str(), q.tokens.as_slice()))
        .collect();
    candidates
        .iter()
        .filter(|c| !rules.conflicts(&c.tokens))
        .filter(|c| !existing.contains(&(c.image_id.as_str(), c.tokens.as_slice())))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Valid,
    Invalid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterKind {
    AnswerableFilter,
    UnanswerableFilter,
}

pub const FIXED_ANSWERABLE_FILTERS: &[&str] =
    &["Is this indoor or outdoor?", "Is this a color image?", "What place is this ?"];

pub const FILTER_RELATIONS: &[&str] = &["next to", "around", "under", "on", "above"];

const FILTER_ATTEMPTS: usize = 64;

/// Build an attention-check question with a known expected decision.
///
/// Answerable filters use the existence template or a fixed image-level
/// question. Unanswerable filters ask for the color of an object that is
/// absent from `graph`, related to another object.
pub fn gen_filter_question(
    id: &str,
    graph: &SceneGraph,
    lex: &Lexicon,
    kind: FilterKind,
    rng: &mut Rng,
) -> Result<(Question, Decision)> {
    let objects: Vec<&str> = lex.objects.iter().map(String::as_str).collect();
    if objects.is_empty() {
        return Err(Error::invalid("filter questions need a nonempty lexicon"));
    }
    let (text, decision) = match kind {
        FilterKind::AnswerableFilter => {
            if rng.random_bool(0.5) {
                (format!("Is there a {}?", pick(rng, &objects)), Decision::Valid)
            } else {
                (pick(rng, FIXED_ANSWERABLE_FILTERS).to_string(), Decision::Valid)
            }
        }
        FilterKind::UnanswerableFilter => {
            let absent: Vec<&str> = objects.iter().copied().filter(|o| !graph.has_object(o)).collect();
            if absent.is_empty() || objects.len() < 2 {
                return Err(Error::Exhausted {
                    what: "an absent configuration",
                    attempts: 0,
                });
            }
            let mut found = None;
            for _ in 0..FILTER_ATTEMPTS {
                let subject = pick(rng, &absent);
                let target = pick(rng, &objects);
                let rel = pick(rng, FILTER_RELATIONS);
                if subject != target && !graph.has_relation(subject, rel, target) {
                    found = Some(format!("What color is the {subject} {rel} the {target}?"));
                    break;
                }
            }
            let text = found.ok_or(Error::Exhausted {
                what: "an absent configuration",
                attempts: FILTER_ATTEMPTS,
            })?;
            (text, Decision::Invalid)
        }
    };
    let q = Question::new(
        id,
        graph.image_id.clone(),
        text,
        None,
        QuestionKind::CandidateUQ,
        Provenance::FilterQ,
    )?;
    Ok((q, decision))
}

/// Tokens of `text` outside the perturbed spans, for diffing a candidate
/// against its source.
pub fn untouched_tokens(text: &str, spans: &[(usize, usize)]) -> Vec<String> {
    tokenize(text)
        .into_iter()
        .enumerate()
        .filter(|(i, _)| !spans.iter().any(|(s, e)| (*s..=*e).contains(i)))
        .map(|(_, t)| t)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SceneObject;

    fn lex(objects: &[&str], attrs: &[(&str, &[&str])]) -> Lexicon {
        let attributes = attrs
            .iter()
            .map(|(o, a)| (o.to_string(), a.iter().map(|s| s.to_string()).collect()))
            .collect();
        Lexicon::from_parts(objects.iter().map(|s| s.to_string()), attributes)
    }

    fn aq(text: &str) -> Question {
        Question::aq("q1", "img1", text, "x")
    }

    #[test]
    fn extracts_object_and_attribute_spans() {
        let l = lex(&["chair", "table"], &[("chair", &["wooden"])]);
        let t = extract_terms(&aq("what color is the wooden chair"), &l);
        assert_eq!(t.objects, [TermMatch { span: (5, 5), term: "chair".into() }]);
        assert_eq!(t.attributes, [TermMatch { span: (4, 4), term: "wooden".into() }]);
    }

    #[test]
    fn extracts_plural_via_stem() {
        let l = lex(&["jar"], &[]);
        let t = extract_terms(&aq("are there any jars"), &l);
        assert_eq!(t.objects, [TermMatch { span: (3, 3), term: "jar".into() }]);
    }

    #[test]
    fn extracts_nothing_without_lexicon_hits() {
        let l = lex(&["chair"], &[]);
        assert_eq!(extract_terms(&aq("is it sunny"), &l), Terms::default());
    }

    #[test]
    fn prefers_longest_object_match() {
        let l = lex(&["tv", "tv stand", "stand"], &[]);
        let t = extract_terms(&aq("Is there a tv stand?"), &l);
        assert_eq!(t.objects, [TermMatch { span: (3, 4), term: "tv stand".into() }]);
    }

    #[test]
    fn pt_easy_swaps_object() {
        let l = lex(&["chair", "table"], &[]);
        let out = gen_pt_easy(&aq("What color is the chair?"), &l, 0);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].text, "What color is the table?");
        assert_eq!(out[0].kind, QuestionKind::CandidateUQ);
        assert_eq!(out[0].provenance, Provenance::PTEasy);
        assert_eq!(out[0].perturbations[0].kind, PerturbationKind::ObjectSwap);
    }

    #[test]
    fn pt_easy_never_keeps_the_object() {
        let l = lex(&["chair", "table", "lamp", "cup", "bowl"], &[]);
        let q = aq("Is the lamp left of the chair?");
        for seed in 0..1000 {
            let out = &gen_pt_easy(&q, &l, seed)[0];
            assert_ne!(out.tokens[2], "lamp", "{}", out.text);
            assert_ne!(out.tokens[6], "chair", "{}", out.text);
            assert_eq!(out.tokens.len(), q.tokens.len());
        }
    }

    #[test]
    fn pt_easy_reinflects_plurals() {
        let l = lex(&["jar", "box"], &[]);
        let out = gen_pt_easy(&aq("Where are the jars?"), &l, 0);
        assert_eq!(out[0].text, "Where are the boxes?");
    }

    #[test]
    fn pt_easy_without_objects_is_empty() {
        let l = lex(&["chair"], &[]);
        assert!(gen_pt_easy(&aq("Is it raining?"), &l, 0).is_empty());
    }

    #[test]
    fn pt_hard_swaps_attribute_of_same_object() {
        let l = lex(&["chair"], &[("chair", &["wooden", "metal"])]);
        let out = gen_pt_hard(&aq("What color is the wooden chair?"), &l, 0);
        assert_eq!(out[0].text, "What color is the metal chair?");
    }

    #[test]
    fn pt_hard_flips_spatial_relation() {
        let l = lex(&["cup", "plate"], &[]);
        let out = gen_pt_hard(&aq("Is the cup on the left of the plate?"), &l, 0);
        assert_eq!(out[0].text, "Is the cup on the right of the plate?");
        assert_eq!(out[0].perturbations[0].kind, PerturbationKind::RelationAntonym);
    }

    #[test]
    fn pt_hard_without_site_is_empty() {
        let l = lex(&["chair"], &[("chair", &["red"])]);
        assert!(gen_pt_hard(&aq("Is there a chair?"), &l, 0).is_empty());
    }

    #[test]
    fn pt_hard_falls_back_to_global_pool() {
        let l = lex(&["chair", "table"], &[("chair", &["red"]), ("table", &["oak"])]);
        let out = gen_pt_hard(&aq("Is the red chair big?"), &l, 0);
        assert_eq!(out[0].text, "Is the oak chair big?");
    }

    #[test]
    fn conflict_rule_fires_only_on_category_modifiers() {
        let r = ConflictRules::default();
        let toks = |s: &str| tokenize(s);
        assert!(r.conflicts(&toks("What color are the black shoes?")));
        assert!(!r.conflicts(&toks("What color are the leather shoes?")));
        assert!(r.conflicts(&toks("What material is the wooden table?")));
        assert!(!r.conflicts(&toks("What color is the cup to the left of the red plate?")));
        assert!(r.conflicts(&toks("What is the color of the white plate?")));
    }

    #[test]
    fn filter_drops_conflicts_and_existing_aqs_in_order() {
        let mk = |id: &str, text: &str| {
            Question::new(id, "img1", text, None, QuestionKind::CandidateUQ, Provenance::PTHard).unwrap()
        };
        let cands = vec![
            mk("a", "What color are the black shoes?"),
            mk("b", "What color are the leather shoes?"),
            mk("c", "Is the cup on the right?"),
            mk("d", "Is the mug red?"),
        ];
        let aqs = [Question::aq("o", "img1", "is the cup on the right", "yes")];
        let kept = filter_conflicts(&cands, &aqs, &ConflictRules::default());
        let ids: Vec<&str> = kept.iter().map(|q| q.id.as_str()).collect();
        assert_eq!(ids, ["b", "d"]);
    }

    fn graph_with(names: &[&str]) -> SceneGraph {
        SceneGraph {
            image_id: "img".into(),
            objects: names
                .iter()
                .map(|n| SceneObject {
                    name: n.to_string(),
                    attributes: BTreeSet::new(),
                    relations: vec![],
                })
                .collect(),
        }
    }

    #[test]
    fn answerable_filters_come_from_templates() {
        let l = lex(&["tv stand"], &[]);
        let g = graph_with(&["cat"]);
        let mut rng = rng_from(1);
        for i in 0..50 {
            let (q, d) = gen_filter_question(&format!("f{i}"), &g, &l, FilterKind::AnswerableFilter, &mut rng).unwrap();
            assert_eq!(d, Decision::Valid);
            assert!(q.text == "Is there a tv stand?" || FIXED_ANSWERABLE_FILTERS.contains(&q.text.as_str()));
            assert_eq!(q.provenance, Provenance::FilterQ);
        }
    }

    #[test]
    fn unanswerable_filter_names_an_absent_subject() {
        let l = lex(&["hills", "cat"], &[]);
        let g = graph_with(&["cat"]);
        let mut rng = rng_from(3);
        let (q, d) = gen_filter_question("f", &g, &l, FilterKind::UnanswerableFilter, &mut rng).unwrap();
        assert_eq!(d, Decision::Invalid);
        assert!(q.text.starts_with("What color is the hills "), "{}", q.text);
        assert!(q.text.ends_with(" the cat?"));
    }

    #[test]
    fn unanswerable_filter_fails_when_everything_is_present() {
        let l = lex(&["cat", "dog"], &[]);
        let g = graph_with(&["cat", "dog"]);
        let mut rng = rng_from(0);
        assert!(gen_filter_question("f", &g, &l, FilterKind::UnanswerableFilter, &mut rng).is_err());
    }
}
