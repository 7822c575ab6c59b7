use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{Corpus, ObjectFeatures, Provenance, Question, QuestionKind, SceneGraph, SceneObject};
use crate::error::{Error, Result};
use crate::uqgen::Perturbation;

#[derive(Debug, Clone, Default)]
pub struct CorpusPaths {
    pub scene_graphs: Option<PathBuf>,
    pub questions: PathBuf,
    /// Feature manifest; the blob lives next to it with a `.bin` extension.
    pub features: Option<PathBuf>,
}

impl CorpusPaths {
    /// The standard file layout inside a corpus directory.
    pub fn in_dir(dir: &Path) -> Self {
        let sg = dir.join("scene_graphs.json");
        let feat = dir.join("features.json");
        Self {
            scene_graphs: sg.exists().then_some(sg),
            questions: dir.join("questions.jsonl"),
            features: feat.exists().then_some(feat),
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn file_name(path: &Path) -> String {
    path.display().to_string()
}

pub fn load_corpus(paths: &CorpusPaths) -> Result<Corpus> {
    let graphs = match &paths.scene_graphs {
        Some(p) => load_scene_graphs(p)?,
        None => BTreeMap::new(),
    };
    let questions = load_questions(&paths.questions)?;
    if paths.scene_graphs.is_some() {
        let dangling: BTreeSet<&str> = questions
            .iter()
            .filter(|q| !graphs.contains_key(&q.image_id))
            .map(|q| q.image_id.as_str())
            .collect();
        if !dangling.is_empty() {
            return Err(Error::Dangling {
                ids: dangling.into_iter().map(String::from).collect(),
            });
        }
    }
    let features = match &paths.features {
        Some(p) => load_features(p)?
            .into_iter()
            .map(|f| (f.image_id.clone(), f))
            .collect(),
        None => BTreeMap::new(),
    };
    Ok(Corpus {
        graphs,
        questions,
        features,
    })
}

// ---------------------------------------------------------------------------
// scene graphs

#[derive(Serialize, Deserialize)]
struct GraphRecord {
    objects: Vec<SceneObject>,
}

pub fn load_scene_graphs(path: &Path) -> Result<BTreeMap<String, SceneGraph>> {
    let file = file_name(path);
    let raw = read(path)?;
    let records: BTreeMap<String, Value> = serde_json::from_str(&raw).map_err(|e| Error::Parse {
        file: file.clone(),
        line: e.line(),
        field: "<root>".into(),
        message: e.to_string(),
    })?;
    let mut out = BTreeMap::new();
    for (image_id, value) in records {
        let rec: GraphRecord = serde_json::from_value(value).map_err(|e| Error::Parse {
            file: file.clone(),
            line: 0,
            field: format!("{image_id}.objects"),
            message: e.to_string(),
        })?;
        let graph = SceneGraph {
            image_id: image_id.clone(),
            objects: rec.objects,
        };
        graph.validate()?;
        out.insert(image_id, graph);
    }
    Ok(out)
}

pub fn write_scene_graphs(path: &Path, graphs: &BTreeMap<String, SceneGraph>) -> Result<()> {
    let records: BTreeMap<&str, GraphRecord> = graphs
        .iter()
        .map(|(id, g)| {
            (
                id.as_str(),
                GraphRecord {
                    objects: g.objects.clone(),
                },
            )
        })
        .collect();
    let text = serde_json::to_string_pretty(&records)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// questions

fn field<'a>(obj: &'a Map<String, Value>, name: &str, file: &str, line: usize) -> Result<&'a Value> {
    obj.get(name).ok_or_else(|| Error::Parse {
        file: file.into(),
        line,
        field: name.into(),
        message: "missing".into(),
    })
}

fn str_field(obj: &Map<String, Value>, name: &str, file: &str, line: usize) -> Result<String> {
    field(obj, name, file, line)?
        .as_str()
        .map(String::from)
        .ok_or_else(|| Error::Parse {
            file: file.into(),
            line,
            field: name.into(),
            message: "expected a string".into(),
        })
}

fn parse_question(line_text: &str, file: &str, line: usize) -> Result<Question> {
    let value: Value = serde_json::from_str(line_text).map_err(|e| Error::Parse {
        file: file.into(),
        line,
        field: "<record>".into(),
        message: e.to_string(),
    })?;
    let obj = value.as_object().ok_or_else(|| Error::Parse {
        file: file.into(),
        line,
        field: "<record>".into(),
        message: "expected a JSON object".into(),
    })?;
    let bad = |name: &str, message: String| Error::Parse {
        file: file.into(),
        line,
        field: name.into(),
        message,
    };
    let id = str_field(obj, "id", file, line)?;
    let image_id = str_field(obj, "image_id", file, line)?;
    let text = str_field(obj, "text", file, line)?;
    let answer = match obj.get("answer") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(bad("answer", "expected a string or null".into())),
    };
    let kind_s = str_field(obj, "kind", file, line)?;
    let kind = QuestionKind::parse(&kind_s).ok_or_else(|| bad("kind", format!("unknown kind `{kind_s}`")))?;
    let prov_s = str_field(obj, "provenance", file, line)?;
    let provenance =
        Provenance::parse(&prov_s).ok_or_else(|| bad("provenance", format!("unknown provenance `{prov_s}`")))?;
    let perturbations: Vec<Perturbation> = match obj.get("perturbations") {
        None | Some(Value::Null) => Vec::new(),
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| bad("perturbations", e.to_string()))?,
    };
    let mut q = Question::new(id, image_id, text, answer, kind, provenance)
        .map_err(|e| bad(if kind == QuestionKind::AQ { "answer" } else { "kind" }, e.to_string()))?;
    q.perturbations = perturbations;
    Ok(q)
}

pub fn load_questions(path: &Path) -> Result<Vec<Question>> {
    let file = file_name(path);
    let raw = read(path)?;
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_question(l, &file, i + 1))
        .collect()
}

pub fn write_questions(path: &Path, questions: &[Question]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for q in questions {
        serde_json::to_writer(&mut w, q)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// features

#[derive(Debug, Serialize, Deserialize)]
struct FeatureManifest {
    dim: usize,
    m: usize,
    ids: Vec<String>,
}

pub(crate) fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Read a manifest plus its little-endian `f32` blob of shape `ids x m x dim`.
pub fn load_features(manifest_path: &Path) -> Result<Vec<ObjectFeatures<f32>>> {
    let file = file_name(manifest_path);
    let manifest: FeatureManifest = serde_json::from_str(&read(manifest_path)?).map_err(|e| Error::Parse {
        file: file.clone(),
        line: e.line(),
        field: "<manifest>".into(),
        message: e.to_string(),
    })?;
    if manifest.m == 0 || manifest.dim == 0 {
        return Err(Error::Parse {
            file,
            line: 1,
            field: if manifest.m == 0 { "m" } else { "dim" }.into(),
            message: "must be >= 1".into(),
        });
    }
    let bin = blob_path(manifest_path);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let per_row = manifest.m * manifest.dim;
    let expected = manifest.ids.len() * per_row * 4;
    if bytes.len() != expected {
        return Err(Error::Shape(format!(
            "{}: expected {expected} bytes for {} ids x {} x {}, found {}",
            bin.display(),
            manifest.ids.len(),
            manifest.m,
            manifest.dim,
            bytes.len()
        )));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    manifest
        .ids
        .into_iter()
        .enumerate()
        .map(|(row, image_id)| {
            let data = values[row * per_row..(row + 1) * per_row].to_vec();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    file: bin.display().to_string(),
                    row,
                    image_id,
                });
            }
            ObjectFeatures::new(image_id, manifest.m, manifest.dim, data)
        })
        .collect()
}

pub fn write_features<'a>(
    manifest_path: &Path,
    features: impl IntoIterator<Item = &'a ObjectFeatures<f32>>,
) -> Result<()> {
    let features: Vec<&ObjectFeatures<f32>> = features.into_iter().collect();
    let (m, dim) = match features.first() {
        Some(f) => (f.m, f.dim),
        None => return Err(Error::invalid("no feature blocks to write")),
    };
    if let Some(f) = features.iter().find(|f| f.m != m || f.dim != dim) {
        return Err(Error::Shape(format!(
            "image `{}` is {}x{}, corpus is {m}x{dim}",
            f.image_id, f.m, f.dim
        )));
    }
    let manifest = FeatureManifest {
        dim,
        m,
        ids: features.iter().map(|f| f.image_id.clone()).collect(),
    };
    fs::write(manifest_path, serde_json::to_string(&manifest)? + "\n").map_err(|e| Error::io(manifest_path, e))?;
    let mut blob = Vec::with_capacity(features.len() * m * dim * 4);
    for f in &features {
        for v in &f.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let bin = blob_path(manifest_path);
    fs::write(&bin, blob).map_err(|e| Error::io(&bin, e))
}

/// Write a corpus in the standard directory layout.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<CorpusPaths> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = CorpusPaths {
        scene_graphs: (!corpus.graphs.is_empty()).then(|| dir.join("scene_graphs.json")),
        questions: dir.join("questions.jsonl"),
        features: (!corpus.features.is_empty()).then(|| dir.join("features.json")),
    };
    if let Some(p) = &paths.scene_graphs {
        write_scene_graphs(p, &corpus.graphs)?;
    }
    write_questions(&paths.questions, &corpus.questions)?;
    if let Some(p) = &paths.features {
        write_features(p, corpus.features.values())?;
    }
    Ok(paths)
}
