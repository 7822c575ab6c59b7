//! Seeded synthetic scene-graph corpus.
//!
//! Every image holds `objects_per_image` distinct objects, each with one color
//! and optionally one material. Object names carry a preferred color so that
//! a question alone is predictive of its answer; the image is needed to be
//! sure. Each region feature is a Gaussian draw around a mean that depends on
//! the `(object, color)` pair, so answers are recoverable from the pooled
//! regions.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Corpus, ObjectFeatures, Question, Relation, SceneGraph, SceneObject};
use crate::error::{Error, Result};
use crate::seed::{named_rng, stable_hash};
use crate::text::tokenize;

pub const OBJECT_NAMES: &[&str] = &[
    "chair", "table", "cup", "plate", "lamp", "book", "bottle", "car", "dog", "cat", "bag", "shirt",
    "hat", "shoe", "window", "door", "bench", "clock", "phone", "bowl", "box", "pillow", "tree",
    "bike", "vase", "sign", "fence", "jar", "desk", "sofa", "truck", "horse", "bird", "kite", "boat",
    "umbrella", "laptop", "mirror", "towel", "bucket", "basket", "helmet", "jacket", "glove",
    "candle", "fork", "spoon", "train",
];

pub const COLORS: &[&str] = &[
    "red", "blue", "green", "yellow", "white", "black", "brown", "gray", "orange", "pink", "purple",
    "silver",
];

pub const MATERIALS: &[&str] = &["wooden", "metal", "plastic", "glass", "leather", "ceramic"];

pub const LEFT_OF: &str = "left of";
pub const RIGHT_OF: &str = "right of";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_images: usize,
    pub objects_per_image: usize,
    /// Number of distinct object names.
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub seed: u64,
    pub n_colors: usize,
    /// Probability that an object takes its name's preferred color.
    pub color_prior: f64,
    /// Standard deviation of region noise around the class mean.
    pub feature_noise: f64,
    pub material_prob: f64,
    pub relation_questions: bool,
    pub image_prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_images: 100,
            objects_per_image: 4,
            vocab_size: 16,
            feature_dim: 32,
            seed: 0,
            n_colors: 6,
            color_prior: 0.6,
            feature_noise: 0.35,
            material_prob: 0.5,
            relation_questions: true,
            image_prefix: "img".into(),
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_images", self.n_images),
            ("objects_per_image", self.objects_per_image),
            ("vocab_size", self.vocab_size),
            ("feature_dim", self.feature_dim),
            ("n_colors", self.n_colors),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be >= 1")));
            }
        }
        if self.vocab_size < self.objects_per_image {
            return Err(Error::invalid(format!(
                "vocab_size ({}) < objects_per_image ({})",
                self.vocab_size, self.objects_per_image
            )));
        }
        if self.n_colors > COLORS.len() {
            return Err(Error::invalid(format!("n_colors must be <= {}", COLORS.len())));
        }
        if !(0.0..=1.0).contains(&self.color_prior) || !(0.0..=1.0).contains(&self.material_prob) {
            return Err(Error::invalid("probabilities must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vec<String> {
        (0..self.vocab_size)
            .map(|i| match OBJECT_NAMES.get(i) {
                Some(n) => (*n).to_string(),
                None => format!("thing{i}"),
            })
            .collect()
    }
}

fn preferred_color(name: &str, n_colors: usize) -> usize {
    (stable_hash(name.as_bytes()) % n_colors as u64) as usize
}

/// Deterministic per-class feature means, keyed by `(object, color)`.
struct ClassMeans {
    seed: u64,
    dim: usize,
    cache: HashMap<(String, String), Vec<f32>>,
}

impl ClassMeans {
    fn get(&mut self, object: &str, color: &str) -> &[f32] {
        let (seed, dim) = (self.seed, self.dim);
        self.cache
            .entry((object.to_string(), color.to_string()))
            .or_insert_with(|| {
                let mut rng = named_rng(seed, &format!("class-mean/{object}/{color}"));
                (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
            })
    }
}

pub fn synth_corpus(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let vocab = cfg.vocabulary();
    let colors = &COLORS[..cfg.n_colors];
    let mut rng = named_rng(cfg.seed, "synth/scenes");
    let mut means = ClassMeans {
        seed: cfg.seed,
        dim: cfg.feature_dim,
        cache: HashMap::new(),
    };
    let width = cfg.n_images.to_string().len().max(4);
    let mut corpus = Corpus::default();

    for i in 0..cfg.n_images {
        let image_id = format!("{}{:0width$}", cfg.image_prefix, i);
        let picked: Vec<usize> = sample(&mut rng, vocab.len(), cfg.objects_per_image).into_vec();
        let n = picked.len();

        let mut objects = Vec::with_capacity(n);
        let mut colors_of = Vec::with_capacity(n);
        for (pos, &vi) in picked.iter().enumerate() {
            let name = &vocab[vi];
            let c = if rng.random::<f64>() < cfg.color_prior {
                preferred_color(name, cfg.n_colors)
            } else {
                rng.random_range(0..cfg.n_colors)
            };
            let mut attributes = BTreeSet::from([colors[c].to_string()]);
            if rng.random::<f64>() < cfg.material_prob {
                attributes.insert(MATERIALS[rng.random_range(0..MATERIALS.len())].to_string());
            }
            // list order is left-to-right
            let mut relations = Vec::with_capacity(n.saturating_sub(1));
            for other in 0..n {
                if other != pos {
                    relations.push(Relation {
                        predicate: if pos < other { LEFT_OF } else { RIGHT_OF }.to_string(),
                        object: other,
                    });
                }
            }
            objects.push(SceneObject {
                name: name.clone(),
                attributes,
                relations,
            });
            colors_of.push(colors[c]);
        }

        let mut data = Vec::with_capacity(n * cfg.feature_dim);
        for (obj, color) in objects.iter().zip(&colors_of) {
            let mean = means.get(&obj.name, color).to_vec();
            for mu in mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(mu + (cfg.feature_noise * z) as f32);
            }
        }

        let mut next_q = 0usize;
        let mut push = |text: String, answer: &str, corpus: &mut Corpus| {
            let id = format!("{image_id}-q{next_q}");
            next_q += 1;
            corpus.questions.push(Question::aq(&id, &image_id, &text, answer));
        };
        for (obj, color) in objects.iter().zip(&colors_of) {
            push(format!("What color is the {}?", obj.name), color, &mut corpus);
        }
        let present = &objects[rng.random_range(0..n)].name;
        push(format!("Is there a {present}?"), "yes", &mut corpus);
        let absent: Vec<&String> = vocab.iter().filter(|v| !picked.iter().any(|&p| &vocab[p] == *v)).collect();
        if !absent.is_empty() {
            let a = absent[rng.random_range(0..absent.len())];
            push(format!("Is there a {a}?"), "no", &mut corpus);
        }
        if cfg.relation_questions && n >= 2 {
            let pair = sample(&mut rng, n, 2).into_vec();
            let (a, b) = (pair[0], pair[1]);
            let answer = if a < b { "yes" } else { "no" };
            push(
                format!("Is the {} to the left of the {}?", objects[a].name, objects[b].name),
                answer,
                &mut corpus,
            );
        }

        corpus.features.insert(
            image_id.clone(),
            ObjectFeatures::new(image_id.clone(), n, cfg.feature_dim, data)?,
        );
        corpus.graphs.insert(image_id.clone(), SceneGraph { image_id, objects });
    }
    Ok(corpus)
}

/// Answer a templated question from the scene graph alone.
///
/// Returns `None` when the question is unanswerable for this image (it refers
/// to an absent object) or does not follow one of the synthetic templates.
pub fn derive_answer(graph: &SceneGraph, text: &str) -> Option<String> {
    let toks = tokenize(text);
    let toks: Vec<&str> = toks.iter().map(String::as_str).collect();
    let find = |name: &[&str]| {
        let name = name.join(" ");
        graph.objects.iter().position(|o| o.name == name)
    };
    match toks.as_slice() {
        ["what", "color", "is" | "are", "the", name @ ..] => {
            let obj = &graph.objects[find(name)?];
            obj.attributes.iter().find(|a| COLORS.contains(&a.as_str())).cloned()
        }
        ["is" | "are", "there", "a" | "an" | "any", name @ ..] => {
            Some(if find(name).is_some() { "yes" } else { "no" }.to_string())
        }
        ["is", "the", rest @ ..] => {
            let to = rest.iter().position(|t| *t == "to")?;
            let (a, tail) = rest.split_at(to);
            let (predicate, b) = match tail {
                ["to", "the", side @ ("left" | "right"), "of", "the", b @ ..] => {
                    (if *side == "left" { LEFT_OF } else { RIGHT_OF }, b)
                }
                _ => return None,
            };
            let (ai, bi) = (find(a)?, find(b)?);
            let related = graph.objects[ai]
                .relations
                .iter()
                .any(|r| r.object == bi && r.predicate == predicate);
            Some(if related { "yes" } else { "no" }.to_string())
        }
        _ => None,
    }
}

/// Per-image questions, in corpus order.
pub(crate) fn questions_by_image(questions: &[Question]) -> BTreeMap<&str, Vec<&Question>> {
    let mut out: BTreeMap<&str, Vec<&Question>> = BTreeMap::new();
    for q in questions {
        out.entry(q.image_id.as_str()).or_default().push(q);
    }
    out
}
