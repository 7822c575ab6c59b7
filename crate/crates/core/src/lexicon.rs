//! Object/attribute vocabulary mined from scene graphs.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::SceneGraph;
use crate::error::{Error, Result};
use crate::text::{pluralize, stem};

/// Spatial antonym pairs loaded into every lexicon.
pub const SPATIAL_ANTONYMS: &[(&str, &str)] = &[
    ("left", "right"),
    ("top", "bottom"),
    ("above", "below"),
    ("front", "behind"),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    pub objects: BTreeSet<String>,
    pub attributes: BTreeMap<String, BTreeSet<String>>,
    pub antonyms: BTreeMap<String, String>,
    /// Stem of each object name (word by word) to its surface forms.
    pub stem_index: BTreeMap<String, BTreeSet<String>>,
}

/// Stem every word of a (possibly multi-word) phrase.
pub fn phrase_stem(words: &[&str]) -> String {
    words.iter().map(|w| stem(w)).collect::<Vec<_>>().join(" ")
}

impl Lexicon {
    pub fn from_parts(
        objects: impl IntoIterator<Item = String>,
        attributes: BTreeMap<String, BTreeSet<String>>,
    ) -> Self {
        let objects: BTreeSet<String> = objects.into_iter().collect();
        let mut stem_index: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for name in &objects {
            let words: Vec<&str> = name.split(' ').collect();
            let entry = stem_index.entry(phrase_stem(&words)).or_default();
            entry.insert(name.clone());
            entry.insert(pluralize(name));
        }
        let mut lex = Lexicon {
            objects,
            attributes,
            antonyms: BTreeMap::new(),
            stem_index,
        };
        lex.add_antonyms(SPATIAL_ANTONYMS.iter().map(|(a, b)| (a.to_string(), b.to_string())))
            .expect("seed antonym list is an involution");
        lex
    }

    /// Add antonym pairs, keeping the map an involution.
    pub fn add_antonyms(&mut self, pairs: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        for (a, b) in pairs {
            if a == b {
                return Err(Error::invalid(format!("`{a}` cannot be its own antonym")));
            }
            for (w, partner) in [(&a, &b), (&b, &a)] {
                if let Some(existing) = self.antonyms.get(w) {
                    if existing != partner {
                        return Err(Error::invalid(format!(
                            "`{w}` already pairs with `{existing}`, cannot also pair with `{partner}`"
                        )));
                    }
                }
            }
            self.antonyms.insert(a.clone(), b.clone());
            self.antonyms.insert(b, a);
        }
        Ok(())
    }

    pub fn antonym(&self, word: &str) -> Option<&str> {
        self.antonyms.get(word).map(String::as_str)
    }

    /// Canonical object name whose stem equals `phrase_stem`, if any.
    pub fn object_for_stem(&self, phrase_stem: &str) -> Option<&str> {
        self.stem_index
            .get(phrase_stem)?
            .iter()
            .find(|s| self.objects.contains(*s))
            .map(String::as_str)
    }

    /// Union of all attributes, over all objects.
    pub fn attribute_pool(&self) -> BTreeSet<&str> {
        self.attributes.values().flatten().map(String::as_str).collect()
    }

    /// Longest object name, in words.
    pub fn max_object_words(&self) -> usize {
        self.objects.iter().map(|o| o.split(' ').count()).max().unwrap_or(0)
    }

    pub fn max_attribute_words(&self) -> usize {
        self.attributes
            .values()
            .flatten()
            .map(|a| a.split(' ').count())
            .max()
            .unwrap_or(0)
    }
}

pub fn build_lexicon<'a>(graphs: impl IntoIterator<Item = &'a SceneGraph>) -> Result<Lexicon> {
    let mut objects = BTreeSet::new();
    let mut attributes: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut any = false;
    for g in graphs {
        any = true;
        for o in &g.objects {
            objects.insert(o.name.clone());
            attributes
                .entry(o.name.clone())
                .or_default()
                .extend(o.attributes.iter().cloned());
        }
    }
    if !any {
        return Err(Error::invalid("cannot build a lexicon from zero scene graphs"));
    }
    Ok(Lexicon::from_parts(objects, attributes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SceneObject;

    fn graph(id: &str, objs: &[(&str, &[&str])]) -> SceneGraph {
        SceneGraph {
            image_id: id.into(),
            objects: objs
                .iter()
                .map(|(n, attrs)| SceneObject {
                    name: n.to_string(),
                    attributes: attrs.iter().map(|a| a.to_string()).collect(),
                    relations: vec![],
                })
                .collect(),
        }
    }

    #[test]
    fn unions_objects_and_attributes() {
        let g1 = graph("img1", &[("chair", &["red"]), ("table", &["wooden"])]);
        let g2 = graph("img2", &[("chair", &["blue"])]);
        let lex = build_lexicon([&g1, &g2]).unwrap();
        assert_eq!(lex.objects, BTreeSet::from(["chair".into(), "table".into()]));
        assert_eq!(lex.attributes["chair"], BTreeSet::from(["blue".into(), "red".into()]));
        assert_eq!(lex.attributes["table"], BTreeSet::from(["wooden".into()]));
    }

    #[test]
    fn spatial_antonyms_are_preloaded() {
        let lex = build_lexicon([&graph("i", &[("cup", &[])])]).unwrap();
        assert_eq!(lex.antonym("left"), Some("right"));
        assert_eq!(lex.antonym("right"), Some("left"));
        assert_eq!(lex.antonym("bottom"), Some("top"));
        for (w, a) in &lex.antonyms {
            assert_eq!(lex.antonym(a), Some(w.as_str()));
        }
    }

    #[test]
    fn antonym_extension_keeps_involution() {
        let mut lex = build_lexicon([&graph("i", &[("cup", &[])])]).unwrap();
        lex.add_antonyms([("inside".to_string(), "outside".to_string())]).unwrap();
        assert_eq!(lex.antonym("outside"), Some("inside"));
        assert!(lex.add_antonyms([("left".to_string(), "up".to_string())]).is_err());
    }

    #[test]
    fn empty_collection_is_an_error() {
        assert!(build_lexicon(std::iter::empty()).is_err());
    }

    #[test]
    fn stem_index_covers_objects() {
        let lex = build_lexicon([&graph("i", &[("jar", &[]), ("tv stand", &[])])]).unwrap();
        assert_eq!(lex.object_for_stem(&stem("jars")), Some("jar"));
        assert_eq!(lex.object_for_stem(&phrase_stem(&["tv", "stands"])), Some("tv stand"));
    }
}
