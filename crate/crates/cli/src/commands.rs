//! Subcommand implementations. Each returns the artifact paths it wrote.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use anyhow::{anyhow, bail, ensure, Context, Result};
use log::info;
use rvqa_annotate::{create_tasks, export_uqs, load_results, AnnotationStore, AnnotationTask, ExportParams, StaticDirs};
use rvqa_core::clipsel::{rank_candidates, select_candidates, ClipMode, EmbeddingTable, SelectParams, SimilarityRanking};
use rvqa_core::corpus::{
    load_corpus, load_questions, synth_corpus, write_corpus, write_questions, AnswerVocab, Corpus, CorpusPaths, Question,
    QuestionKind, SynthConfig,
};
use rvqa_core::detectors::{
    fit_mahalanobis, load_mahalanobis, save_mahalanobis, score_energy, score_frcnn_rule, score_mahalanobis, score_odin, DetectorConfig, DetectorKind,
    RuleDecision,
};
use rvqa_core::lexicon::build_lexicon;
use rvqa_core::metrics::{
    build_curve, load_predictions, multi_subset_report, summarize, write_predictions, CurveSummary, PredictionRecord,
};
use rvqa_core::model::{load_model, save_model, train, Architecture, Input, Model, ModelConfig, Store, TrainConfig};
use rvqa_core::pseudo::{pseudo_questions, roi_mixup, sample_pseudo_uq, select_hard_pseudo, Example, MixupConfig};
use rvqa_core::seed::derive_seed;
use rvqa_core::uqgen::{filter_conflicts, gen_pt_batch, ConflictRules, PtMode};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::experiment::{self, aggregate, aggregate_csv, ExperimentConfig};
use crate::manifest::{config_hash, RunManifest};

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Common {
    pub seed: Option<u64>,
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Common {
    fn out(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| anyhow!("--out is required"))
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// The config file parsed as `T`, or `T::default()` without `--config`.
    fn load<T: DeserializeOwned + Default>(&self) -> Result<T> {
        match &self.config {
            Some(p) => {
                let raw = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&raw).with_context(|| format!("parsing {}", p.display()))
            }
            None => Ok(T::default()),
        }
    }
}

fn create_parent(p: &Path) -> Result<()> {
    if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    Ok(())
}

fn write_json(p: &Path, v: &impl Serialize) -> Result<()> {
    create_parent(p)?;
    fs::write(p, serde_json::to_string_pretty(v)? + "\n").with_context(|| format!("writing {}", p.display()))
}

fn write_jsonl<T: Serialize>(p: &Path, items: &[T]) -> Result<()> {
    create_parent(p)?;
    let mut out = Vec::new();
    for it in items {
        serde_json::to_writer(&mut out, it)?;
        out.push(b'\n');
    }
    fs::write(p, out).with_context(|| format!("writing {}", p.display()))
}

fn read_jsonl<T: DeserializeOwned>(p: &Path) -> Result<Vec<T>> {
    let raw = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", p.display(), i + 1)))
        .collect()
}

/// Manifest next to a file output, or inside a directory output.
fn manifest_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("manifest.json")
    } else {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        out.with_file_name(name)
    }
}

fn finish(
    command: &str,
    seed: u64,
    config: &impl Serialize,
    out: &Path,
    is_dir: bool,
    mut outputs: Vec<PathBuf>,
) -> Result<Vec<PathBuf>> {
    let config = serde_json::to_value(config)?;
    let m = RunManifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        config_hash: config_hash(&config),
        config,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    let path = manifest_path(out, is_dir);
    write_json(&path, &m)?;
    outputs.push(path);
    Ok(outputs)
}

fn open_corpus(dir: &Path) -> Result<Corpus> {
    load_corpus(&CorpusPaths::in_dir(dir)).with_context(|| format!("loading corpus from {}", dir.display()))
}

// synth / lexicon

pub fn synth(c: &Common, images: Option<usize>) -> Result<Vec<PathBuf>> {
    let mut cfg: SynthConfig = c.load()?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(n) = images {
        cfg.n_images = n;
    }
    let out = c.out()?;
    let corpus = synth_corpus(&cfg)?;
    let paths = write_corpus(out, &corpus)?;
    let mut written = vec![paths.questions];
    written.extend(paths.scene_graphs);
    written.extend(paths.features);
    finish("synth", cfg.seed, &cfg, out, true, written)
}

pub fn lexicon(c: &Common, corpus: &Path) -> Result<Vec<PathBuf>> {
    let corpus = open_corpus(corpus)?;
    ensure!(!corpus.graphs.is_empty(), "corpus has no scene graphs");
    let lex = build_lexicon(corpus.graphs.values())?;
    let out = c.out()?;
    write_json(out, &lex)?;
    finish("lexicon", c.seed(), &serde_json::json!({}), out, false, vec![out.into()])
}

// candidate generation

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenPtConfig {
    pub mode: Option<PtMode>,
    pub conflict_rules: ConflictRules,
}

pub fn gen_pt(c: &Common, corpus: &Path, mode: Option<PtMode>) -> Result<Vec<PathBuf>> {
    let mut cfg: GenPtConfig = c.load()?;
    cfg.mode = mode.or(cfg.mode);
    let m = cfg.mode.ok_or_else(|| anyhow!("--mode is required (easy or hard)"))?;
    let corpus = open_corpus(corpus)?;
    let lex = build_lexicon(corpus.graphs.values())?;
    let aqs: Vec<Question> = corpus.aqs().cloned().collect();
    let raw = gen_pt_batch(&aqs, &lex, m, derive_seed(c.seed(), "gen-pt"));
    let kept = filter_conflicts(&raw, &aqs, &cfg.conflict_rules);
    info!("gen-pt: {} candidates, {} after conflict filtering", raw.len(), kept.len());
    let out = c.out()?;
    create_parent(out)?;
    write_questions(out, &kept)?;
    finish("gen-pt", c.seed(), &cfg, out, false, vec![out.into()])
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenClipConfig {
    pub mode: Option<ClipMode>,
    pub select: SelectParams,
}

pub struct ClipArgs<'a> {
    pub corpus: &'a Path,
    pub image_embeddings: &'a Path,
    pub question_embeddings: &'a Path,
    pub mode: Option<ClipMode>,
    pub rankings_out: Option<&'a Path>,
}

pub fn gen_clip(c: &Common, a: ClipArgs<'_>) -> Result<Vec<PathBuf>> {
    let mut cfg: GenClipConfig = c.load()?;
    cfg.mode = a.mode.or(cfg.mode);
    let mode = cfg.mode.ok_or_else(|| anyhow!("--mode is required (hard or easy)"))?;
    let corpus = open_corpus(a.corpus)?;
    let img = EmbeddingTable::load(a.image_embeddings)?;
    let qemb = EmbeddingTable::load(a.question_embeddings)?;
    let aqs: Vec<Question> = corpus.aqs().cloned().collect();
    let index: HashMap<&str, &Question> = aqs.iter().map(|q| (q.id.as_str(), q)).collect();
    let mut candidates = Vec::new();
    let mut rankings = Vec::new();
    for image in img.ids() {
        if !corpus.graphs.is_empty() && !corpus.graphs.contains_key(image) {
            continue;
        }
        let r = rank_candidates(image, &img, &qemb, &aqs)?;
        candidates.extend(select_candidates(&r, &index, mode, &cfg.select, derive_seed(c.seed(), image))?);
        rankings.push(r);
    }
    let out = c.out()?;
    create_parent(out)?;
    write_questions(out, &candidates)?;
    let mut written = vec![out.to_path_buf()];
    if let Some(p) = a.rankings_out {
        write_jsonl(p, &rankings)?;
        written.push(p.into());
    }
    finish("gen-clip", c.seed(), &cfg, out, false, written)
}

// pseudo UQs and mixup

fn answer_vocab(corpus: &Corpus) -> Result<AnswerVocab> {
    Ok(AnswerVocab::from_questions(corpus.aqs())?)
}

fn aq_examples(corpus: &Corpus, vocab: &AnswerVocab) -> Result<Vec<Example<f32>>> {
    corpus
        .aqs()
        .map(|q| {
            let a = q.answer.as_deref().context("AQ without answer")?;
            let idx = vocab
                .index_of(a)
                .ok_or_else(|| anyhow!("answer `{a}` of `{}` is outside the vocabulary", q.id))?;
            Ok(Example::aq(&q.image_id, &q.id, idx, vocab.len()))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoConfig {
    pub n: usize,
    /// Restrict each image to the top of its similarity ranking.
    pub top_n: Option<usize>,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        Self { n: 1000, top_n: None }
    }
}

pub fn pseudo_pair(
    c: &Common,
    corpus: &Path,
    n: Option<usize>,
    rankings: Option<&Path>,
    top_n: Option<usize>,
) -> Result<Vec<PathBuf>> {
    let mut cfg: PseudoConfig = c.load()?;
    cfg.n = n.unwrap_or(cfg.n);
    cfg.top_n = top_n.or(cfg.top_n);
    let corpus = open_corpus(corpus)?;
    let vocab = answer_vocab(&corpus)?;
    let pool = aq_examples(&corpus, &vocab)?;
    let seed = derive_seed(c.seed(), "pseudo-pair");
    let pairs = match rankings {
        Some(p) => {
            let rs: Vec<SimilarityRanking> = read_jsonl(p)?;
            let map: BTreeMap<String, SimilarityRanking> = rs.into_iter().map(|r| (r.image_id.clone(), r)).collect();
            select_hard_pseudo(&pool, &map, cfg.top_n.unwrap_or(1000), cfg.n, seed)?
        }
        None => sample_pseudo_uq(&pool, cfg.n, seed)?,
    };
    let out = c.out()?;
    write_jsonl(out, &pairs)?;
    let mut written = vec![out.to_path_buf()];
    let qpath = out.with_extension("questions.jsonl");
    write_questions(&qpath, &pseudo_questions(&pairs, &corpus.question_index())?)?;
    written.push(qpath);
    finish("pseudo-pair", c.seed(), &cfg, out, false, written)
}

#[derive(Debug, Serialize)]
struct MixPreview {
    image_id: String,
    question_id: String,
    donor_image: String,
    lambda_effective: f32,
    kept: Vec<usize>,
    /// `(slot, donor region)` pairs.
    donor: Vec<(usize, usize)>,
    target: BTreeMap<String, f32>,
}

pub fn mixup_preview(c: &Common, corpus: &Path, question: &str, donor: &str, beta: Option<f64>) -> Result<Vec<PathBuf>> {
    let mut cfg: MixupConfig = c.load()?;
    if let Some(b) = beta {
        cfg.beta = b;
    }
    cfg.validate()?;
    let corpus = open_corpus(corpus)?;
    let vocab = answer_vocab(&corpus)?;
    let q = corpus
        .questions
        .iter()
        .find(|q| q.id == question)
        .ok_or_else(|| anyhow!("unknown question `{question}`"))?;
    let ex = match &q.answer {
        Some(a) => Example::aq(&q.image_id, &q.id, vocab.index_of(a).context("answer outside vocabulary")?, vocab.len()),
        None => Example::uq(&q.image_id, &q.id, vocab.len(), q.provenance),
    };
    let feats = |id: &str| corpus.features.get(id).ok_or_else(|| anyhow!("no features for image `{id}`"));
    let mixed = roi_mixup(&ex, feats(donor)?, feats(&q.image_id)?, &cfg, derive_seed(c.seed(), "mixup-preview"))?;
    let preview = MixPreview {
        image_id: q.image_id.clone(),
        question_id: q.id.clone(),
        donor_image: donor.to_string(),
        lambda_effective: mixed.lambda_effective,
        kept: mixed.kept,
        donor: mixed.donor,
        target: vocab
            .answers()
            .iter()
            .zip(&mixed.target)
            .filter(|(_, &t)| t != 0.0)
            .map(|(a, &t)| (a.clone(), t))
            .collect(),
    };
    match &c.out {
        Some(out) => {
            write_json(out, &preview)?;
            finish("mixup-preview", c.seed(), &cfg, out, false, vec![out.clone()])
        }
        None => {
            println!("{}", serde_json::to_string_pretty(&preview)?);
            Ok(Vec::new())
        }
    }
}

// training and scoring

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub arch: Architecture,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            arch: Architecture::Integrated,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Stored in the checkpoint so `score` can map outputs back to answers.
#[derive(Debug, Clone, Serialize)]
struct CheckpointConfig {
    answers: Vec<String>,
    run: TrainRunConfig,
}

pub fn train_cmd(
    c: &Common,
    corpus: &Path,
    arch: Option<Architecture>,
    pseudo: Option<&Path>,
    mixup: Option<&str>,
) -> Result<Vec<PathBuf>> {
    let mut cfg: TrainRunConfig = c.load()?;
    if let Some(a) = arch {
        cfg.arch = a;
    }
    if let Some(s) = c.seed {
        cfg.train.seed = s;
    }
    match mixup {
        Some("none") => cfg.train.mixup = None,
        Some(name) => {
            cfg.train.mixup =
                Some(MixupConfig::preset(name).ok_or_else(|| anyhow!("unknown mixup preset `{name}`"))?);
        }
        None => {}
    }
    let corpus = open_corpus(corpus)?;
    let vocab = answer_vocab(&corpus)?;
    let aq = aq_examples(&corpus, &vocab)?;
    let pseudo: Vec<Example<f32>> = match pseudo {
        Some(p) => read_jsonl(p)?,
        None => Vec::new(),
    };
    let store: Store<f32> = Store::from_corpus(&corpus);
    let (model, log) = train(&aq, &pseudo, &store, &cfg.model, &cfg.train, cfg.arch)?;
    let out = c.out()?;
    create_parent(out)?;
    let ck = CheckpointConfig {
        answers: vocab.answers().to_vec(),
        run: cfg.clone(),
    };
    let bin = save_model(out, &model, cfg.train.seed, serde_json::to_value(&ck)?)?;
    let log_path = out.with_extension("log.json");
    write_json(&log_path, &log)?;
    finish("train", cfg.train.seed, &cfg, out, false, vec![out.into(), bin, log_path])
}

fn load_checkpoint(p: &Path) -> Result<(Model<f32>, AnswerVocab)> {
    let (model, manifest) = load_model::<f32>(p)?;
    let answers: Vec<String> = manifest
        .config
        .get("answers")
        .cloned()
        .map(serde_json::from_value)
        .transpose()?
        .ok_or_else(|| anyhow!("checkpoint {} lacks its answer vocabulary", p.display()))?;
    let vocab = AnswerVocab::new(answers)?;
    ensure!(vocab.len() == model.k(), "checkpoint vocabulary has {} answers, model K = {}", vocab.len(), model.k());
    Ok((model, vocab))
}

pub struct ScoreArgs<'a> {
    pub model: &'a Path,
    pub corpus: &'a Path,
    pub questions: &'a Path,
    pub detector: Option<DetectorKind>,
    /// A saved Mahalanobis fit; fitted on the corpus AQs when absent.
    pub mahalanobis_fit: Option<&'a Path>,
}

pub fn score(c: &Common, a: ScoreArgs<'_>) -> Result<Vec<PathBuf>> {
    let ScoreArgs {
        model: model_path,
        corpus,
        questions,
        detector,
        mahalanobis_fit,
    } = a;
    let mut cfg: DetectorConfig = c.load()?;
    if let Some(k) = detector {
        cfg.kind = k;
    }
    let (model, vocab) = load_checkpoint(model_path)?;
    let corpus = open_corpus(corpus)?;
    let qs = load_questions(questions)?;
    let mut store: Store<f32> = Store::from_corpus(&corpus);
    for q in &qs {
        store.tokens.insert(q.id.clone(), q.tokens.clone());
    }

    let out = c.out()?;
    create_parent(out)?;
    let mut written = vec![out.to_path_buf()];
    let maha = if cfg.kind != DetectorKind::Mahalanobis {
        None
    } else if let Some(p) = mahalanobis_fit {
        Some(load_mahalanobis(p)?)
    } else {
        let feats = corpus
            .aqs()
            .map(|q| {
                let y = q.answer.as_deref().and_then(|a| vocab.index_of(a));
                let y = y.ok_or_else(|| anyhow!("training answer of `{}` outside the vocabulary", q.id))?;
                Ok((model.hidden(&store.input(&q.image_id, &q.id)?), y))
            })
            .collect::<Result<Vec<_>>>()?;
        let fit = fit_mahalanobis(&feats, cfg.cov_reg, cfg.min_class_count)?;
        let p = out.with_extension("maha.json");
        let bin = save_mahalanobis(&p, &fit)?;
        written.extend([p, bin]);
        Some(fit)
    };
    let lex = match cfg.kind {
        DetectorKind::FrcnnRule => Some(build_lexicon(corpus.graphs.values())?),
        _ => None,
    };

    let mut records = Vec::with_capacity(qs.len());
    for q in &qs {
        let input: Input<'_, f32> = store.input(&q.image_id, &q.id)?;
        let s = model.scores(&input);
        let best = s.argmax();
        let confidence = match cfg.kind {
            DetectorKind::Msp => s.confidence() as f64,
            DetectorKind::Odin => score_odin(&model, &input, cfg.temperature, cfg.noise)?.confidence as f64,
            DetectorKind::Energy => score_energy(&s.logits, cfg.top_m)? as f64,
            DetectorKind::Mahalanobis => score_mahalanobis(&model.hidden(&input), maha.as_ref().expect("fitted"))?,
            DetectorKind::FrcnnRule => {
                let g = corpus
                    .graphs
                    .get(&q.image_id)
                    .ok_or_else(|| anyhow!("no scene graph for `{}`", q.image_id))?;
                let names = g.objects.iter().map(|o| o.name.as_str());
                match score_frcnn_rule(q, names, lex.as_ref().expect("built")) {
                    RuleDecision::AQ => 1.0,
                    RuleDecision::UQ => 0.0,
                }
            }
        };
        let predicted = vocab.answer(best).to_string();
        let rec = match (&q.answer, q.kind) {
            (Some(gold), QuestionKind::AQ) => PredictionRecord::aq(&q.id, confidence, *gold == predicted),
            _ => PredictionRecord::uq(&q.id, confidence),
        };
        records.push(PredictionRecord {
            predicted_answer: Some(predicted),
            ..rec
        });
    }
    write_predictions(out, &records)?;
    finish("score", c.seed(), &cfg, out, false, written)
}

// evaluation and reports

pub fn eval(c: &Common, predictions: &Path) -> Result<Vec<PathBuf>> {
    let records = load_predictions(predictions)?;
    let curve = build_curve(&records)?;
    let s = summarize(&curve);
    let text = serde_json::to_string_pretty(&s)?;
    println!("{text}");
    match &c.out {
        Some(out) => {
            write_json(out, &s)?;
            let cfg = serde_json::json!({ "predictions": predictions.display().to_string() });
            finish("eval", c.seed(), &cfg, out, false, vec![out.clone()])
        }
        None => Ok(Vec::new()),
    }
}

fn parse_subset(s: &str) -> Result<(String, PathBuf)> {
    let (name, path) = s
        .split_once('=')
        .ok_or_else(|| anyhow!("--subset expects NAME=PATH, got `{s}`"))?;
    ensure!(!name.is_empty(), "empty subset name in `{s}`");
    Ok((name.to_string(), PathBuf::from(path)))
}

/// `<run>/<method>/<subset>.jsonl` → per-method, per-subset summaries.
fn collect_runs(runs: &[PathBuf]) -> Result<BTreeMap<String, BTreeMap<String, Vec<CurveSummary>>>> {
    let mut out: BTreeMap<String, BTreeMap<String, Vec<CurveSummary>>> = BTreeMap::new();
    let mut methods_of_first: Option<Vec<String>> = None;
    for run in runs {
        let mut methods = Vec::new();
        let mut entries: Vec<PathBuf> = fs::read_dir(run)
            .with_context(|| format!("reading run directory {}", run.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for dir in entries.into_iter().filter(|p| p.is_dir()) {
            let method = dir.file_name().unwrap_or_default().to_string_lossy().to_string();
            let mut files: Vec<PathBuf> = fs::read_dir(&dir)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            files.sort();
            for f in files.into_iter().filter(|f| f.extension().is_some_and(|e| e == "jsonl")) {
                let subset = f.file_stem().unwrap_or_default().to_string_lossy().to_string();
                let s = summarize(&build_curve(&load_predictions(&f)?)?);
                out.entry(method.clone()).or_default().entry(subset).or_default().push(s);
            }
            methods.push(method);
        }
        match &methods_of_first {
            None => methods_of_first = Some(methods),
            Some(first) => {
                if let Some(m) = first.iter().find(|m| !methods.contains(m)) {
                    bail!("run {} is missing method directory `{m}`", run.display());
                }
                if let Some(m) = methods.iter().find(|m| !first.contains(m)) {
                    bail!("method directory `{m}` only exists in run {}", run.display());
                }
            }
        }
    }
    ensure!(!out.is_empty(), "no prediction files found under the given runs");
    Ok(out)
}

pub fn report(c: &Common, subsets: &[String], runs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let out = c.out()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match (subsets.is_empty(), runs.is_empty()) {
        (false, true) => {
            let mut map = BTreeMap::new();
            for s in subsets {
                let (name, path) = parse_subset(s)?;
                map.insert(name, load_predictions(&path)?);
            }
            let rep = multi_subset_report(&map)?;
            let csv = out.join("report.csv");
            let svg = out.join("report.svg");
            fs::write(&csv, rep.to_csv())?;
            fs::write(&svg, rep.to_svg())?;
            let cfg = serde_json::json!({ "subsets": subsets });
            finish("report", c.seed(), &cfg, out, true, vec![csv, svg])
        }
        (true, false) => {
            let rows = aggregate(&collect_runs(runs)?)?;
            let csv = out.join("aggregate.csv");
            fs::write(&csv, aggregate_csv(&rows))?;
            let cfg = serde_json::json!({ "runs": runs.iter().map(|r| r.display().to_string()).collect::<Vec<_>>() });
            finish("report", c.seed(), &cfg, out, true, vec![csv])
        }
        _ => bail!("report takes either --subset NAME=FILE or --runs DIR, not both or neither"),
    }
}

// annotation

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotateConfig {
    pub redundancy: usize,
    pub image_ref: String,
}

impl Default for AnnotateConfig {
    fn default() -> Self {
        Self {
            redundancy: 1,
            image_ref: "/images/{image_id}.jpg".into(),
        }
    }
}

pub struct ServeArgs<'a> {
    pub corpus: &'a Path,
    pub candidates: &'a Path,
    pub addr: SocketAddr,
    pub ui: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub redundancy: Option<usize>,
}

/// Builds the task queue under `--out` (tasks.jsonl) and serves it until
/// interrupted. Results go to `--out/results.jsonl`.
pub fn serve_annotate(c: &Common, a: ServeArgs<'_>) -> Result<Vec<PathBuf>> {
    let mut cfg: AnnotateConfig = c.load()?;
    if let Some(r) = a.redundancy {
        cfg.redundancy = r;
    }
    ensure!(cfg.redundancy >= 1, "redundancy must be >= 1");
    let corpus = open_corpus(a.corpus)?;
    let lex = build_lexicon(corpus.graphs.values())?;
    let candidates = load_questions(a.candidates)?;
    let out = c.out()?;
    fs::create_dir_all(out)?;
    let tasks_path = out.join("tasks.jsonl");
    let tasks = if tasks_path.exists() {
        read_jsonl::<AnnotationTask>(&tasks_path)?
    } else {
        let (tasks, skipped) = create_tasks(&candidates, &corpus.graphs, &lex, c.seed(), &cfg.image_ref);
        if !skipped.is_empty() {
            write_jsonl(&out.join("skipped.jsonl"), &skipped)?;
        }
        write_jsonl(&tasks_path, &tasks)?;
        tasks
    };
    let results = out.join("results.jsonl");
    let store = AnnotationStore::new(tasks, cfg.redundancy).with_log(&results)?;
    let written = finish("serve-annotate", c.seed(), &cfg, out, true, vec![tasks_path, results])?;
    let app = rvqa_annotate::router(Arc::new(Mutex::new(store)), &StaticDirs { ui: a.ui, images: a.images });
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(a.addr).await?;
        eprintln!("serving on http://{}", listener.local_addr()?);
        let _ = std::io::stderr().flush();
        rvqa_annotate::serve(listener, app).await
    })?;
    Ok(written)
}

pub fn import_annotations(c: &Common, tasks: &Path, results: &Path, params: ExportParams) -> Result<Vec<PathBuf>> {
    let tasks: Vec<AnnotationTask> = read_jsonl(tasks)?;
    let log = load_results(results)?;
    let uqs = export_uqs(&tasks, &log, &params);
    info!("{} of {} candidates exported as UQs", uqs.len(), tasks.len());
    let out = c.out()?;
    create_parent(out)?;
    write_questions(out, &uqs)?;
    finish("import-annotations", c.seed(), &params, out, false, vec![out.into()])
}

// experiment

pub fn experiment(c: &Common, seeds: &[u64]) -> Result<Vec<PathBuf>> {
    let mut cfg: ExperimentConfig = c.load()?;
    if !seeds.is_empty() {
        cfg.seeds = seeds.to_vec();
    } else if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    let out = c.out()?;
    fs::create_dir_all(out)?;
    let config_path = out.join("config.toml");
    fs::write(&config_path, toml::to_string(&cfg)?)?;

    let runs = experiment::run_all(&cfg)?;
    let mut written = vec![config_path];
    for r in &runs {
        written.extend(experiment::write_run(out, &cfg, r)?);
    }
    let rows = aggregate(&experiment::summaries_by_method(&runs))?;
    let csv = out.join("aggregate.csv");
    fs::write(&csv, aggregate_csv(&rows))?;
    written.push(csv);
    let seed = cfg.seeds[0];
    finish("experiment", seed, &cfg, out, true, written)
}
