use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::Question;

/// Counts of questions sharing a token prefix.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixNode {
    pub count: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub children: BTreeMap<String, PrefixNode>,
}

impl PrefixNode {
    /// Questions that end at this node instead of continuing to a child.
    pub fn other(&self) -> usize {
        self.count - self.children.values().map(|c| c.count).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// One row per node: `prefix,count,other`.
    pub fn to_csv(&self) -> String {
        fn walk(node: &PrefixNode, path: &mut Vec<String>, out: &mut String) {
            for (w, c) in &node.children {
                path.push(w.clone());
                let _ = writeln!(out, "{},{},{}", path.join(" "), c.count, c.other());
                walk(c, path, out);
                path.pop();
            }
        }
        let mut out = String::from("prefix,count,other\n");
        walk(self, &mut Vec::new(), &mut out);
        out
    }
}

pub fn prefix_distribution(questions: &[Question], depth: usize) -> PrefixNode {
    let mut root = PrefixNode::default();
    for q in questions {
        root.count += 1;
        let mut node = &mut root;
        for tok in q.tokens.iter().take(depth) {
            node = node.children.entry(tok.clone()).or_default();
            node.count += 1;
        }
    }
    root
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qs(texts: &[&str]) -> Vec<Question> {
        texts.iter().enumerate().map(|(i, t)| Question::aq(&i.to_string(), "i", t, "x")).collect()
    }

    #[test]
    fn counts_first_three_words() {
        let t = prefix_distribution(&qs(&["What color is the cup?", "What color are the shoes?"]), 3);
        let what = &t.children["what"];
        assert_eq!(what.count, 2);
        assert_eq!(what.children["color"].count, 2);
        assert_eq!(what.children["color"].children["is"].count, 1);
        assert_eq!(what.children["color"].children["are"].count, 1);
        assert!(what.children["color"].children["is"].children.is_empty());
    }

    #[test]
    fn empty_and_depth_one() {
        assert!(prefix_distribution(&[], 3).is_empty());
        let t = prefix_distribution(&qs(&["Is it?", "Is there?", "Why?"]), 1);
        assert_eq!(t.children["is"].count, 2);
        assert!(t.children["is"].children.is_empty());
        assert_eq!(t.other(), 0);
    }

    #[test]
    fn short_questions_count_as_other() {
        let t = prefix_distribution(&qs(&["Why?", "Why not?"]), 3);
        assert_eq!(t.children["why"].other(), 1);
        assert!(t.to_csv().contains("why,2,1"));
    }
}
