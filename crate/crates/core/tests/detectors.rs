use std::collections::BTreeMap;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rvqa_core::corpus::{Question, OBJECT_NAMES};
use rvqa_core::detectors::{
    fit_mahalanobis, load_mahalanobis, save_mahalanobis, score_energy, score_frcnn_rule, score_mahalanobis,
    score_msp, RuleDecision,
};
use rvqa_core::lexicon::Lexicon;
use rvqa_core::text::pluralize;

fn lexicon() -> Lexicon {
    Lexicon::from_parts(OBJECT_NAMES.iter().map(|s| s.to_string()), BTreeMap::new())
}

fn logits() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0f64..30.0, 1..12)
}

/// Labelled features clustered around per-class centres.
fn labelled(dim: usize) -> impl Strategy<Value = Vec<(Vec<f64>, usize)>> {
    prop::collection::vec((prop::collection::vec(-1.0f64..1.0, dim), 0usize..3), 12..40).prop_map(|v| {
        v.into_iter()
            .map(|(mut h, c)| {
                let d = c % h.len();
                h[d] += 4.0 * c as f64;
                (h, c)
            })
            .collect()
    })
}

fn orthogonal(dim: usize, seed: &[f64]) -> DMatrix<f64> {
    let a = DMatrix::from_iterator(dim, dim, seed.iter().copied().cycle().take(dim * dim));
    (a + DMatrix::identity(dim, dim) * 3.0).qr().q()
}

proptest! {
    #[test]
    fn scores_are_pure(z in logits(), m in 1usize..4) {
        prop_assert_eq!(score_msp(&z), score_msp(&z));
        if m <= z.len() {
            prop_assert_eq!(score_energy(&z, m).unwrap(), score_energy(&z, m).unwrap());
        }
    }

    #[test]
    fn energy_grows_with_any_logit(z in logits(), m in 1usize..6, i in 0usize..12, bump in 0.01f64..5.0) {
        prop_assume!(m <= z.len());
        let mut up = z.clone();
        let i = i % z.len();
        up[i] += bump;
        let (e0, e1) = (score_energy(&z, m).unwrap(), score_energy(&up, m).unwrap());
        prop_assert!(e1 >= e0);
    }

    #[test]
    fn mahalanobis_ignores_rotations(
        feats in labelled(4),
        probe in prop::collection::vec(-5.0f64..5.0, 4),
        seed in prop::collection::vec(-1.0f64..1.0, 16),
    ) {
        let q = orthogonal(4, &seed);
        let rot = |h: &[f64]| (&q * nalgebra::DVector::from_column_slice(h)).iter().copied().collect::<Vec<f64>>();
        let fit = fit_mahalanobis(&feats, 1e-3, 2).unwrap();
        let rotated: Vec<(Vec<f64>, usize)> = feats.iter().map(|(h, c)| (rot(h), *c)).collect();
        let fit_r = fit_mahalanobis(&rotated, 1e-3, 2).unwrap();
        let a = score_mahalanobis(&probe, &fit).unwrap();
        let b = score_mahalanobis(&rot(&probe), &fit_r).unwrap();
        prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{} vs {}", a, b);
        prop_assert!(a <= 0.0);
    }

    #[test]
    fn rule_ignores_inflection(
        asked in 0usize..OBJECT_NAMES.len(),
        other in 0usize..OBJECT_NAMES.len(),
        plural_q in any::<bool>(),
        plural_d in any::<bool>(),
    ) {
        let lex = lexicon();
        let name = OBJECT_NAMES[asked];
        let surface = |plural: bool, n: &str| if plural { pluralize(n) } else { n.to_string() };
        let text = if plural_q {
            format!("Are there any {}?", surface(true, name))
        } else {
            format!("Is there a {name}?")
        };
        let q = Question::aq("q", "img", &text, "yes");
        let found = surface(plural_d, name);
        prop_assert_eq!(score_frcnn_rule(&q, [found.as_str()], &lex), RuleDecision::AQ);
        let upper = found.to_uppercase();
        prop_assert_eq!(score_frcnn_rule(&q, [upper.as_str()], &lex), RuleDecision::AQ);
        if other != asked {
            let miss = surface(plural_d, OBJECT_NAMES[other]);
            prop_assert_eq!(score_frcnn_rule(&q, [miss.as_str()], &lex), RuleDecision::UQ);
        }
    }
}

#[test]
fn saved_fit_scores_identically() {
    let feats: Vec<(Vec<f64>, usize)> = (0..30)
        .map(|i| (vec![(i % 7) as f64, (i * i % 11) as f64 / 3.0, i as f64 / 10.0], i % 3))
        .collect();
    let fit = fit_mahalanobis(&feats, 1e-2, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    let bin = save_mahalanobis(&path, &fit).unwrap();
    assert_eq!(bin, dir.path().join("m.bin"));
    let back = load_mahalanobis(&path).unwrap();
    for (h, _) in &feats {
        assert_eq!(score_mahalanobis(h, &back).unwrap(), score_mahalanobis(h, &fit).unwrap());
    }
}
