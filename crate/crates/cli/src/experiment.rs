//! Multi-seed comparison of the MSP baseline against pseudo-UQ training.
//!
//! Per seed: a synthetic corpus is split by image into train and test, test
//! UQs are object-swapped test questions that the scene graph cannot answer,
//! and four methods are scored on the same test set.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use anyhow::{bail, ensure, Context, Result};
use log::info;
use rvqa_core::corpus::{derive_answer, synth_corpus, AnswerVocab, Provenance, Question, QuestionKind, SynthConfig};
use rvqa_core::lexicon::build_lexicon;
use rvqa_core::metrics::{build_curve, summarize, write_predictions, CurveSummary, PredictionRecord};
use rvqa_core::model::{
    ensemble_scores, save_model, train, Architecture, Model, ModelConfig, Optimizer, Store, TrainConfig,
};
use rvqa_core::pseudo::{sample_pseudo_uq, Example, MixupConfig};
use rvqa_core::seed::{derive_seed, named_rng};
use rvqa_core::uqgen::{gen_pt_batch, PtMode};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Msp,
    Rp,
    Mix,
    Ens,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Msp, Method::Rp, Method::Mix, Method::Ens];

    pub fn name(self) -> &'static str {
        match self {
            Method::Msp => "msp",
            Method::Rp => "rp",
            Method::Mix => "mix",
            Method::Ens => "ens",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    /// Scene settings; `seed` and `n_images` are derived per run.
    pub synth: SynthConfig,
    pub train_aqs: usize,
    pub test_aqs: usize,
    pub test_uqs: usize,
    /// Size of the pseudo-UQ pool, as a multiple of `train_aqs`.
    pub pseudo_pool: f64,
    pub model: ModelConfig,
    /// `seed` and `mixup` are set per run and method.
    pub train: TrainConfig,
    pub mixup: MixupConfig,
    /// Worker threads; 0 runs one per seed.
    pub threads: usize,
    pub save_checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            synth: SynthConfig {
                relation_questions: false,
                ..SynthConfig::default()
            },
            train_aqs: 2000,
            test_aqs: 500,
            test_uqs: 500,
            pseudo_pool: 4.0,
            model: ModelConfig {
                buckets: 1024,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                optimizer: Optimizer::AdaptiveMoment,
                learning_rate: 0.003,
                epochs: 60,
                ..TrainConfig::default()
            },
            mixup: MixupConfig::BUTD,
            threads: 0,
            save_checkpoints: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.seeds.is_empty(), "experiment needs at least one seed");
        ensure!(self.train_aqs > 0 && self.test_aqs > 0 && self.test_uqs > 0, "split sizes must be >= 1");
        ensure!(self.pseudo_pool > 0.0 && self.pseudo_pool.is_finite(), "pseudo_pool must be > 0");
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        ensure!(seen.len() == self.seeds.len(), "duplicate seeds");
        self.train.validate()?;
        self.mixup.validate()?;
        Ok(())
    }
}

/// Held-out data of one seed.
pub struct SeedData {
    pub store: Store<f32>,
    pub vocab: AnswerVocab,
    pub train: Vec<Example<f32>>,
    pub pseudo: Vec<Example<f32>>,
    pub test_aqs: Vec<Question>,
    pub test_uqs: Vec<Question>,
}

fn questions_per_image(s: &SynthConfig) -> usize {
    s.objects_per_image + 1 + usize::from(s.vocab_size > s.objects_per_image) + usize::from(s.relation_questions)
}

pub fn build_seed_data(cfg: &ExperimentConfig, seed: u64) -> Result<SeedData> {
    let s = &cfg.synth;
    let per = questions_per_image(s);
    let n_train = cfg.train_aqs.div_ceil(per);
    let n_test = (2 * cfg.test_uqs).div_ceil(s.objects_per_image).max(cfg.test_aqs.div_ceil(per));
    let synth = SynthConfig {
        seed: derive_seed(seed, "synth"),
        n_images: n_train + n_test,
        ..s.clone()
    };
    let corpus = synth_corpus(&synth)?;
    let lex = build_lexicon(corpus.graphs.values())?;
    let train_images: Vec<&String> = corpus.graphs.keys().take(n_train).collect();
    let is_train = |img: &str| train_images.binary_search_by(|t| t.as_str().cmp(img)).is_ok();

    let (train_q, test_q): (Vec<&Question>, Vec<&Question>) = corpus.aqs().partition(|q| is_train(&q.image_id));
    ensure!(train_q.len() >= cfg.train_aqs, "synthetic corpus yielded only {} train AQs", train_q.len());
    let train_q = &train_q[..cfg.train_aqs];
    let vocab = AnswerVocab::from_questions(corpus.aqs())?;
    let k = vocab.len();
    let example = |q: &Question| -> Result<Example<f32>> {
        let answer = q.answer.as_deref().context("AQ without answer")?;
        let idx = vocab.index_of(answer).context("answer outside vocabulary")?;
        Ok(Example::aq(&q.image_id, &q.id, idx, k))
    };
    let train = train_q.iter().map(|q| example(q)).collect::<Result<Vec<_>>>()?;
    let pool = (cfg.pseudo_pool * cfg.train_aqs as f64).round() as usize;
    let pseudo = sample_pseudo_uq(&train, pool, derive_seed(seed, "pseudo"))?;

    let test_aqs = sample_questions(&test_q, cfg.test_aqs, seed, "test-aq")?;
    let sources: Vec<Question> = test_q.iter().map(|q| (*q).clone()).collect();
    let candidates: Vec<Question> = gen_pt_batch(&sources, &lex, PtMode::Easy, derive_seed(seed, "pt-easy"))
        .into_iter()
        .filter(|c| derive_answer(&corpus.graphs[&c.image_id], &c.text).is_none())
        .map(|mut c| {
            c.kind = QuestionKind::UQ;
            c.provenance = Provenance::PTEasy;
            c
        })
        .collect();
    let refs: Vec<&Question> = candidates.iter().collect();
    let test_uqs = sample_questions(&refs, cfg.test_uqs, seed, "test-uq")?;

    let mut store = Store::from_corpus(&corpus);
    for q in &test_uqs {
        store.tokens.insert(q.id.clone(), q.tokens.clone());
    }
    Ok(SeedData {
        store,
        vocab,
        train,
        pseudo,
        test_aqs,
        test_uqs,
    })
}

fn sample_questions(pool: &[&Question], n: usize, seed: u64, name: &str) -> Result<Vec<Question>> {
    if pool.len() < n {
        bail!("{name}: need {n} questions, only {} available", pool.len());
    }
    let mut rng = named_rng(seed, name);
    let mut idx = rvqa_core::seed::sample_indices(&mut rng, pool.len(), n);
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| pool[i].clone()).collect())
}

fn records(data: &SeedData, score: impl Fn(&str, &str) -> Result<Vec<f32>>) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::with_capacity(data.test_aqs.len() + data.test_uqs.len());
    for q in data.test_aqs.iter().chain(&data.test_uqs) {
        let s = score(&q.image_id, &q.id)?;
        let best = rvqa_core::model::argmax(&s);
        let predicted = data.vocab.answer(best).to_string();
        let confidence = s[best] as f64;
        out.push(match &q.answer {
            Some(gold) => PredictionRecord {
                predicted_answer: Some(predicted.clone()),
                ..PredictionRecord::aq(&q.id, confidence, *gold == predicted)
            },
            None => PredictionRecord {
                predicted_answer: Some(predicted),
                ..PredictionRecord::uq(&q.id, confidence)
            },
        });
    }
    Ok(out)
}

pub struct SeedRun {
    pub seed: u64,
    pub answers: Vec<String>,
    pub models: BTreeMap<Method, Model<f32>>,
    pub predictions: BTreeMap<Method, Vec<PredictionRecord>>,
    pub summaries: BTreeMap<Method, CurveSummary>,
}

pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    let data = build_seed_data(cfg, seed)?;
    let mut models = BTreeMap::new();
    for (method, pseudo, mixup) in [
        (Method::Msp, &[][..], None),
        (Method::Rp, &data.pseudo[..], None),
        (Method::Mix, &data.pseudo[..], Some(cfg.mixup)),
    ] {
        let tc = TrainConfig {
            seed: derive_seed(seed, method.name()),
            mixup,
            ..cfg.train.clone()
        };
        let (model, log) = train(&data.train, pseudo, &data.store, &cfg.model, &tc, Architecture::Integrated)
            .with_context(|| format!("seed {seed}: training {}", method.name()))?;
        info!(
            "seed {seed} {}: final loss {:.4}",
            method.name(),
            log.epoch_loss.last().copied().unwrap_or(f64::NAN)
        );
        models.insert(method, model);
    }

    let mut predictions = BTreeMap::new();
    for m in [Method::Msp, Method::Rp, Method::Mix] {
        let model = &models[&m];
        let recs = records(&data, |img, q| Ok(model.scores(&data.store.input(img, q)?).answer))?;
        predictions.insert(m, recs);
    }
    let members = [&models[&Method::Rp], &models[&Method::Mix]];
    let ens = records(&data, |img, q| Ok(ensemble_scores(&members, &data.store.input(img, q)?)?))?;
    predictions.insert(Method::Ens, ens);

    let summaries = predictions
        .iter()
        .map(|(m, r)| Ok((*m, summarize(&build_curve(r)?))))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(SeedRun {
        seed,
        answers: data.vocab.answers().to_vec(),
        models,
        predictions,
        summaries,
    })
}

/// Runs every seed on its own thread (bounded by `cfg.threads`) and returns
/// the runs in seed order.
pub fn run_all(cfg: &ExperimentConfig) -> Result<Vec<SeedRun>> {
    cfg.validate()?;
    let width = if cfg.threads == 0 { cfg.seeds.len() } else { cfg.threads };
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for chunk in cfg.seeds.chunks(width) {
        let results: Vec<Result<SeedRun>> = thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|&seed| s.spawn(move || run_seed(cfg, seed))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| bail!("worker panicked")))
                .collect()
        });
        for r in results {
            runs.push(r?);
        }
    }
    Ok(runs)
}

pub const SUBSET: &str = "pt-easy";

/// Writes checkpoints and prediction dumps under `out/seed-<n>/`.
pub fn write_run(out: &Path, cfg: &ExperimentConfig, run: &SeedRun) -> Result<Vec<PathBuf>> {
    let dir = out.join(format!("seed-{}", run.seed));
    let mut written = Vec::new();
    for (m, recs) in &run.predictions {
        let d = dir.join(m.name());
        fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
        let p = d.join(format!("{SUBSET}.jsonl"));
        write_predictions(&p, recs)?;
        written.push(p);
    }
    if cfg.save_checkpoints {
        for (m, model) in &run.models {
            let p = dir.join(m.name()).join("model.json");
            let config = serde_json::json!({ "answers": run.answers, "train": cfg.train, "model": cfg.model });
            save_model(&p, model, derive_seed(run.seed, m.name()), config)?;
            written.push(p);
        }
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub method: String,
    pub subset: String,
    pub n: usize,
    pub mean: CurveSummary,
    pub sd: CurveSummary,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean and sample standard deviation per method and subset.
pub fn aggregate(runs: &BTreeMap<String, BTreeMap<String, Vec<CurveSummary>>>) -> Result<Vec<AggregateRow>> {
    let mut subsets: Option<Vec<&String>> = None;
    let mut rows = Vec::new();
    for (method, per_subset) in runs {
        let names: Vec<&String> = per_subset.keys().collect();
        match &subsets {
            None => subsets = Some(names),
            Some(s) if *s != names => bail!("method `{method}` has subsets {names:?}, expected {s:?}"),
            _ => {}
        }
        for (subset, sums) in per_subset {
            ensure!(!sums.is_empty(), "method `{method}` subset `{subset}` has no runs");
            let col = |f: fn(&CurveSummary) -> f64| mean_sd(&sums.iter().map(f).collect::<Vec<_>>());
            let (auaf, ff95, facc, auroc) = (col(|s| s.auaf), col(|s| s.ff95), col(|s| s.facc), col(|s| s.auroc));
            rows.push(AggregateRow {
                method: method.clone(),
                subset: subset.clone(),
                n: sums.len(),
                mean: CurveSummary {
                    auaf: auaf.0,
                    ff95: ff95.0,
                    facc: facc.0,
                    auroc: auroc.0,
                },
                sd: CurveSummary {
                    auaf: auaf.1,
                    ff95: ff95.1,
                    facc: facc.1,
                    auroc: auroc.1,
                },
            });
        }
    }
    ensure!(!rows.is_empty(), "nothing to aggregate");
    Ok(rows)
}

/// Scaled by 100. `single_run` flags rows whose sd is 0 only because n = 1.
pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::from(
        "method,subset,n,auaf_mean,auaf_sd,ff95_mean,ff95_sd,facc_mean,facc_sd,auroc_mean,auroc_sd,single_run\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2},{}",
            r.method,
            r.subset,
            r.n,
            100.0 * r.mean.auaf,
            100.0 * r.sd.auaf,
            100.0 * r.mean.ff95,
            100.0 * r.sd.ff95,
            100.0 * r.mean.facc,
            100.0 * r.sd.facc,
            100.0 * r.mean.auroc,
            100.0 * r.sd.auroc,
            r.n == 1
        );
    }
    out
}

pub fn summaries_by_method(runs: &[SeedRun]) -> BTreeMap<String, BTreeMap<String, Vec<CurveSummary>>> {
    let mut out: BTreeMap<String, BTreeMap<String, Vec<CurveSummary>>> = BTreeMap::new();
    for m in Method::ALL {
        let v = runs.iter().map(|r| r.summaries[&m]).collect();
        out.entry(m.name().to_string()).or_default().insert(SUBSET.to_string(), v);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(auaf: f64) -> CurveSummary {
        CurveSummary {
            auaf,
            ff95: 0.0,
            facc: 0.0,
            auroc: 0.0,
        }
    }

    #[test]
    fn mean_and_sample_sd() {
        let runs = BTreeMap::from([(
            "rp".to_string(),
            BTreeMap::from([("a".to_string(), vec![summary(0.5), summary(0.7)])]),
        )]);
        let rows = aggregate(&runs).unwrap();
        assert!((rows[0].mean.auaf - 0.6).abs() < 1e-12);
        assert!((rows[0].sd.auaf - 0.1414).abs() < 1e-4);
    }

    #[test]
    fn single_run_is_flagged() {
        let runs = BTreeMap::from([("rp".to_string(), BTreeMap::from([("a".to_string(), vec![summary(0.5)])]))]);
        let rows = aggregate(&runs).unwrap();
        assert_eq!(rows[0].sd.auaf, 0.0);
        assert!(aggregate_csv(&rows).lines().nth(1).unwrap().ends_with(",true"));
    }

    #[test]
    fn inconsistent_subsets_are_rejected() {
        let runs = BTreeMap::from([
            ("a".to_string(), BTreeMap::from([("x".to_string(), vec![summary(0.5)])])),
            ("b".to_string(), BTreeMap::from([("y".to_string(), vec![summary(0.5)])])),
        ]);
        assert!(aggregate(&runs).is_err());
    }
}
