use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rvqa_annotate::{create_tasks, AnnotationStore, AnnotationTask, Submission};
use rvqa_core::corpus::{load_corpus, load_questions, write_features, CorpusPaths, ObjectFeatures};
use rvqa_core::lexicon::build_lexicon;
use rvqa_core::uqgen::Decision;
use serde_json::Value;

fn rvqa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rvqa"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn rvqa")
}

fn ok(dir: &Path, args: &[&str]) -> Vec<String> {
    let o = rvqa(dir, args);
    assert!(
        o.status.success(),
        "rvqa {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap().lines().map(String::from).collect()
}

fn small_corpus(dir: &Path) {
    fs::write(dir.join("synth.toml"), "n_images = 30\n").unwrap();
    ok(dir, &["synth", "--config", "synth.toml", "--seed", "4", "--out", "corpus"]);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = rvqa(dir.path(), &["eval", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn runtime_failure_is_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let o = rvqa(dir.path(), &["eval", "--predictions", "missing.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    let v: Value = serde_json::from_str(&err).unwrap();
    assert!(v["error"].as_str().unwrap().contains("missing.jsonl"));
}

#[test]
fn eval_reproduces_the_worked_example() {
    let dir = tempfile::tempdir().unwrap();
    let recs = [
        r#"{"question_id":"a1","is_uq":false,"vqa_correct":true,"confidence":0.9}"#,
        r#"{"question_id":"a2","is_uq":false,"vqa_correct":false,"confidence":0.6}"#,
        r#"{"question_id":"a3","is_uq":false,"vqa_correct":true,"confidence":0.4}"#,
        r#"{"question_id":"u1","is_uq":true,"confidence":0.8}"#,
        r#"{"question_id":"u2","is_uq":true,"confidence":0.3}"#,
    ];
    fs::write(dir.path().join("p.jsonl"), recs.join("\n") + "\n").unwrap();
    let printed = ok(dir.path(), &["eval", "--predictions", "p.jsonl", "--out", "summary.json"]);
    assert_eq!(printed.last().unwrap(), "summary.json.manifest.json");
    let s: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert!((s["auaf"].as_f64().unwrap() - 7.0 / 12.0).abs() < 1e-12);
    assert_eq!(s["ff95"].as_f64().unwrap(), 0.5);
    assert!((s["facc"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("s.toml"), "n_images = 12\nseed = 9\n").unwrap();
    ok(dir.path(), &["synth", "--config", "s.toml", "--seed", "2", "--out", "c"]);
    let m: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("c/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 2);
    assert_eq!(m["config"]["n_images"], 12);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);

    fs::write(dir.path().join("bad.toml"), "n_imagez = 12\n").unwrap();
    let o = rvqa(dir.path(), &["synth", "--config", "bad.toml", "--out", "d"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn pipeline_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_corpus(d);
    let run = |tag: &str| -> Vec<PathBuf> {
        let pt = format!("{tag}/pt.jsonl");
        let pseudo = format!("{tag}/pseudo.jsonl");
        let model = format!("{tag}/model.json");
        let preds = format!("{tag}/preds.jsonl");
        ok(d, &["gen-pt", "--corpus", "corpus", "--mode", "hard", "--seed", "1", "--out", &pt]);
        ok(d, &["pseudo-pair", "--corpus", "corpus", "--n", "100", "--seed", "1", "--out", &pseudo]);
        ok(d, &["train", "--corpus", "corpus", "--pseudo", &pseudo, "--mixup", "butd", "--seed", "1", "--out", &model]);
        ok(d, &["score", "--model", &model, "--corpus", "corpus", "--questions", &pt, "--detector", "odin", "--out", &preds]);
        [pt, pseudo, model, format!("{tag}/model.bin"), preds]
            .iter()
            .map(|p| d.join(p))
            .collect()
    };
    let a = run("a");
    let b = run("b");
    for (x, y) in a.iter().zip(&b) {
        assert!(fs::metadata(x).unwrap().len() > 0, "{}", x.display());
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{} differs", x.display());
    }
}

#[test]
fn every_detector_scores_a_trained_model() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_corpus(d);
    fs::write(d.join("t.toml"), "[train]\nepochs = 3\n").unwrap();
    ok(d, &["gen-pt", "--corpus", "corpus", "--mode", "easy", "--out", "pt.jsonl"]);
    ok(d, &["train", "--corpus", "corpus", "--config", "t.toml", "--arch", "branched", "--out", "m.json"]);
    let mut all = fs::read_to_string(d.join("corpus/questions.jsonl")).unwrap();
    all += &fs::read_to_string(d.join("pt.jsonl")).unwrap();
    fs::write(d.join("mixed.jsonl"), all).unwrap();
    for det in ["msp", "odin", "energy", "mahalanobis", "frcnn-rule"] {
        let out = format!("{det}.jsonl");
        ok(d, &["score", "--model", "m.json", "--corpus", "corpus", "--questions", "mixed.jsonl", "--detector", det, "--out", &out]);
        let summary = ok(d, &["eval", "--predictions", &out]).join("\n");
        let s: Value = serde_json::from_str(&summary).unwrap();
        assert!(s["auaf"].as_f64().unwrap() <= s["facc"].as_f64().unwrap() + 1e-12);
    }
    assert!(d.join("mahalanobis.maha.json").exists() && d.join("mahalanobis.maha.bin").exists());
    ok(d, &["report", "--subset", "msp=msp.jsonl", "--subset", "energy=energy.jsonl", "--out", "rep"]);
    let csv = fs::read_to_string(d.join("rep/report.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "subset,auaf,ff95,facc,auroc");
    assert!(csv.lines().last().unwrap().starts_with("average,"));
}

#[test]
fn gen_clip_reads_embedding_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_corpus(d);
    let corpus = load_corpus(&CorpusPaths::in_dir(&d.join("corpus"))).unwrap();
    let emb = |id: &str, salt: u64| {
        let h = rvqa_core::seed::stable_hash(format!("{salt}{id}").as_bytes());
        let v: Vec<f32> = (0..4).map(|i| ((h >> (i * 8)) & 0xff) as f32 / 255.0 - 0.5).collect();
        ObjectFeatures::new(id, 1, 4, v).unwrap()
    };
    let images: Vec<_> = corpus.graphs.keys().map(|id| emb(id, 0)).collect();
    let qs: Vec<_> = corpus.questions.iter().map(|q| emb(&q.id, 1)).collect();
    write_features(&d.join("img.json"), &images).unwrap();
    write_features(&d.join("q.json"), &qs).unwrap();
    for mode in ["hard", "easy"] {
        let out = format!("clip-{mode}.jsonl");
        let mut args = vec![
            "gen-clip", "--corpus", "corpus", "--image-embeddings", "img.json", "--question-embeddings", "q.json",
            "--mode", mode, "--out", &out,
        ];
        if mode == "hard" {
            args.extend(["--rankings-out", "rankings.jsonl"]);
        }
        ok(d, &args);
        let cands = load_questions(&d.join(&out)).unwrap();
        // 30 images, each ranking far shorter than either selection size
        assert!(!cands.is_empty());
        assert!(cands.iter().all(|q| q.answer.is_none()));
    }
    ok(d, &["pseudo-pair", "--corpus", "corpus", "--rankings", "rankings.jsonl", "--top-n", "5", "--n", "40", "--out", "hp.jsonl"]);
    assert_eq!(fs::read_to_string(d.join("hp.jsonl")).unwrap().lines().count(), 40);
}

#[test]
fn mixup_preview_prints_the_mix() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_corpus(d);
    let q = load_questions(&d.join("corpus/questions.jsonl")).unwrap().remove(0);
    let donor = if q.image_id == "img0001" { "img0002" } else { "img0001" };
    let out = ok(d, &["mixup-preview", "--corpus", "corpus", "--question", &q.id, "--donor", donor]).join("\n");
    let v: Value = serde_json::from_str(&out).unwrap();
    let lambda = v["lambda_effective"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&lambda));
    let total: f64 = v["target"].as_object().unwrap().values().map(|t| t.as_f64().unwrap()).sum();
    assert!((total - lambda).abs() < 1e-6);
}

#[test]
fn report_over_runs_needs_every_method() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let rec = r#"{"question_id":"a","is_uq":false,"vqa_correct":true,"confidence":0.9}
{"question_id":"u","is_uq":true,"confidence":0.1}
"#;
    for (run, methods) in [("r1", &["msp", "rp"][..]), ("r2", &["msp", "rp"]), ("r3", &["msp"])] {
        for m in methods {
            fs::create_dir_all(d.join(run).join(m)).unwrap();
            fs::write(d.join(run).join(m).join("pt-easy.jsonl"), rec).unwrap();
        }
    }
    ok(d, &["report", "--runs", "r1", "r2", "--out", "agg"]);
    let csv = fs::read_to_string(d.join("agg/aggregate.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("rp,pt-easy,2,")), "{csv}");

    let o = rvqa(d, &["report", "--runs", "r1", "r3", "--out", "agg2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("`rp`"));
}

#[test]
fn import_annotations_exports_flagged_candidates() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_corpus(d);
    ok(d, &["gen-pt", "--corpus", "corpus", "--mode", "easy", "--out", "pt.jsonl"]);
    let corpus = load_corpus(&CorpusPaths::in_dir(&d.join("corpus"))).unwrap();
    let lex = build_lexicon(corpus.graphs.values()).unwrap();
    let mut cands = load_questions(&d.join("pt.jsonl")).unwrap();
    cands.truncate(6);
    let (tasks, _) = create_tasks(&cands, &corpus.graphs, &lex, 0, "{image_id}");
    let lines: Vec<String> = tasks.iter().map(|t| serde_json::to_string(t).unwrap()).collect();
    fs::write(d.join("tasks.jsonl"), lines.join("\n") + "\n").unwrap();

    // the annotator passes every filter and rejects the candidate on even tasks
    let mut store = AnnotationStore::new(tasks.clone(), 1).with_log(&d.join("results.jsonl")).unwrap();
    let mut expected = Vec::new();
    while let Some(view) = store.next_task("ann").unwrap() {
        let t: &AnnotationTask = tasks.iter().find(|t| t.task_id == view.task_id).unwrap();
        let i: usize = t.task_id[1..].parse().unwrap();
        let mut decisions = [Decision::Valid; 2];
        decisions[t.filter_slot] = t.expected_filter_decision;
        if i % 2 == 0 {
            decisions[t.candidate_slot()] = Decision::Invalid;
            expected.push(t.candidate.id.clone());
        }
        store
            .submit(Submission {
                task_id: t.task_id.clone(),
                annotator_id: "ann".into(),
                decisions,
            })
            .unwrap();
    }
    drop(store);
    ok(d, &["import-annotations", "--tasks", "tasks.jsonl", "--results", "results.jsonl", "--out", "uqs.jsonl"]);
    let uqs = load_questions(&d.join("uqs.jsonl")).unwrap();
    assert_eq!(uqs.iter().map(|q| q.id.clone()).collect::<Vec<_>>(), expected);
}

#[test]
fn experiment_writes_runs_and_an_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("exp.toml"),
        "seeds = [1, 2]\ntrain_aqs = 120\ntest_aqs = 40\ntest_uqs = 40\n[train]\nepochs = 3\n[model]\nbuckets = 128\n",
    )
    .unwrap();
    let printed = ok(d, &["experiment", "--config", "exp.toml", "--out", "exp"]);
    assert!(printed.iter().any(|l| l.ends_with("aggregate.csv")));
    for seed in [1, 2] {
        for m in ["msp", "rp", "mix", "ens"] {
            assert!(d.join(format!("exp/seed-{seed}/{m}/pt-easy.jsonl")).exists(), "{seed} {m}");
        }
        assert!(d.join(format!("exp/seed-{seed}/rp/model.bin")).exists());
    }
    let csv = fs::read_to_string(d.join("exp/aggregate.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5, "{csv}");
    assert!(d.join("exp/config.toml").exists() && d.join("exp/manifest.json").exists());

    // the same directories aggregate to the same table through `report --runs`
    ok(d, &["report", "--runs", "exp/seed-1", "exp/seed-2", "--out", "agg"]);
    assert_eq!(fs::read_to_string(d.join("agg/aggregate.csv")).unwrap(), csv);

    // checkpoints carry their vocabulary, so `score` can reuse them
    let synth = "n_images = 20\nrelation_questions = false\n";
    fs::write(d.join("s.toml"), synth).unwrap();
    ok(d, &["synth", "--config", "s.toml", "--out", "c"]);
    ok(d, &["score", "--model", "exp/seed-1/mix/model.json", "--corpus", "c", "--questions", "c/questions.jsonl", "--out", "p.jsonl"]);
    assert!(fs::read_to_string(d.join("p.jsonl")).unwrap().contains("predicted_answer"));
}
