use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rvqa_core::corpus::{Question, QuestionKind};
use rvqa_core::uqgen::Decision;
use serde::{Deserialize, Serialize};

use crate::tasks::{AnnotationTask, TaskView};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("task `{task}` was not assigned to annotator `{annotator}`")]
    NotAssigned { task: String, annotator: String },
    #[error("annotator `{annotator}` already submitted task `{task}`")]
    Duplicate { task: String, annotator: String },
    #[error("annotator id must be nonempty")]
    EmptyAnnotator,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
}

/// Body of `POST /api/decision`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Submission {
    pub task_id: String,
    pub annotator_id: String,
    /// One decision per displayed slot, in display order.
    pub decisions: [Decision; 2],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationResult {
    pub task_id: String,
    pub annotator_id: String,
    pub decisions: [Decision; 2],
    /// Unix seconds.
    pub timestamp: u64,
    pub filter_passed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RedundancyRule {
    #[default]
    Any,
    Majority,
    Unanimous,
}

impl RedundancyRule {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "any" => Some(Self::Any),
            "majority" => Some(Self::Majority),
            "unanimous" => Some(Self::Unanimous),
            _ => None,
        }
    }

    fn accepts(self, invalid: usize, total: usize) -> bool {
        match self {
            Self::Any => invalid >= 1,
            Self::Majority => 2 * invalid > total,
            Self::Unanimous => total > 0 && invalid == total,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExportParams {
    pub min_filter_pass_rate: f64,
    pub rule: RedundancyRule,
    /// Keep results whose own filter check failed.
    pub include_failed: bool,
}

impl Default for ExportParams {
    fn default() -> Self {
        Self {
            min_filter_pass_rate: 0.8,
            rule: RedundancyRule::Any,
            include_failed: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorStats {
    pub submitted: usize,
    pub filter_passed: usize,
    pub pass_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub tasks: usize,
    /// Tasks that reached the redundancy target.
    pub completed: usize,
    pub results: usize,
    pub annotators: BTreeMap<String, AnnotatorStats>,
}

pub fn annotator_stats(results: &[AnnotationResult]) -> BTreeMap<String, AnnotatorStats> {
    let mut out: BTreeMap<String, AnnotatorStats> = BTreeMap::new();
    for r in results {
        let s = out.entry(r.annotator_id.clone()).or_default();
        s.submitted += 1;
        s.filter_passed += usize::from(r.filter_passed);
    }
    for s in out.values_mut() {
        s.pass_rate = s.filter_passed as f64 / s.submitted as f64;
    }
    out
}

/// Candidates judged unanswerable, in task order.
///
/// Results of annotators below the pass-rate threshold are dropped, then the
/// redundancy rule runs over the remaining decisions on each candidate.
pub fn export_uqs(tasks: &[AnnotationTask], results: &[AnnotationResult], params: &ExportParams) -> Vec<Question> {
    let stats = annotator_stats(results);
    let trusted: BTreeSet<&str> = stats
        .iter()
        .filter(|(_, s)| s.pass_rate >= params.min_filter_pass_rate)
        .map(|(a, _)| a.as_str())
        .collect();
    let mut by_task: HashMap<&str, Vec<&AnnotationResult>> = HashMap::new();
    for r in results {
        if trusted.contains(r.annotator_id.as_str()) && (params.include_failed || r.filter_passed) {
            by_task.entry(r.task_id.as_str()).or_default().push(r);
        }
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for t in tasks {
        let Some(rs) = by_task.get(t.task_id.as_str()) else {
            continue;
        };
        let slot = t.candidate_slot();
        let invalid = rs.iter().filter(|r| r.decisions[slot] == Decision::Invalid).count();
        if params.rule.accepts(invalid, rs.len()) && seen.insert(t.candidate.id.clone()) {
            let mut q = t.candidate.clone();
            q.kind = QuestionKind::UQ;
            out.push(q);
        }
    }
    out
}

/// Reads a result log written by [`AnnotationStore`].
pub fn load_results(path: &Path) -> Result<Vec<AnnotationResult>, StoreError> {
    let file = File::open(path).map_err(|source| StoreError::Io {
        path: path.into(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| StoreError::Io {
            path: path.into(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| StoreError::Corrupt {
            path: path.into(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Task queue, assignments and the append-only result log.
#[derive(Debug)]
pub struct AnnotationStore {
    tasks: Vec<AnnotationTask>,
    index: HashMap<String, usize>,
    redundancy: usize,
    /// (task, annotator) pairs handed out, submitted or not.
    assigned: BTreeSet<(usize, String)>,
    /// Per task: annotators that have been handed the task.
    holders: Vec<usize>,
    results: Vec<AnnotationResult>,
    submitted: BTreeSet<(usize, String)>,
    log: Option<(PathBuf, File)>,
}

impl AnnotationStore {
    pub fn new(tasks: Vec<AnnotationTask>, redundancy: usize) -> Self {
        let index = tasks.iter().enumerate().map(|(i, t)| (t.task_id.clone(), i)).collect();
        let holders = vec![0; tasks.len()];
        Self {
            tasks,
            index,
            redundancy: redundancy.max(1),
            assigned: BTreeSet::new(),
            holders,
            results: Vec::new(),
            submitted: BTreeSet::new(),
            log: None,
        }
    }

    /// Replays an existing log, then appends new results to it.
    pub fn with_log(mut self, path: &Path) -> Result<Self, StoreError> {
        if path.exists() {
            for r in load_results(path)? {
                let i = *self.index.get(&r.task_id).ok_or_else(|| StoreError::Corrupt {
                    path: path.into(),
                    line: 0,
                    message: format!("result for unknown task `{}`", r.task_id),
                })?;
                if self.assigned.insert((i, r.annotator_id.clone())) {
                    self.holders[i] += 1;
                }
                self.submitted.insert((i, r.annotator_id.clone()));
                self.results.push(r);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|source| StoreError::Io {
                path: path.into(),
                source,
            })?;
        self.log = Some((path.into(), file));
        Ok(self)
    }

    pub fn tasks(&self) -> &[AnnotationTask] {
        &self.tasks
    }

    pub fn results(&self) -> &[AnnotationResult] {
        &self.results
    }

    /// The annotator's outstanding task if any, else the oldest task they
    /// have not seen that still needs annotators.
    pub fn next_task(&mut self, annotator: &str) -> Result<Option<TaskView>, StoreError> {
        if annotator.is_empty() {
            return Err(StoreError::EmptyAnnotator);
        }
        let pending = self
            .assigned
            .iter()
            .filter(|(i, a)| a == annotator && !self.submitted.contains(&(*i, a.clone())))
            .map(|(i, _)| *i)
            .min();
        if let Some(i) = pending {
            return Ok(Some(self.tasks[i].view()));
        }
        let free = (0..self.tasks.len())
            .find(|&i| self.holders[i] < self.redundancy && !self.assigned.contains(&(i, annotator.to_string())));
        Ok(free.map(|i| {
            self.assigned.insert((i, annotator.to_string()));
            self.holders[i] += 1;
            self.tasks[i].view()
        }))
    }

    pub fn submit(&mut self, s: Submission) -> Result<AnnotationResult, StoreError> {
        let i = *self
            .index
            .get(&s.task_id)
            .ok_or_else(|| StoreError::UnknownTask(s.task_id.clone()))?;
        let key = (i, s.annotator_id.clone());
        if self.submitted.contains(&key) {
            return Err(StoreError::Duplicate {
                task: s.task_id,
                annotator: s.annotator_id,
            });
        }
        if !self.assigned.contains(&key) {
            return Err(StoreError::NotAssigned {
                task: s.task_id,
                annotator: s.annotator_id,
            });
        }
        let t = &self.tasks[i];
        let result = AnnotationResult {
            filter_passed: s.decisions[t.filter_slot] == t.expected_filter_decision,
            task_id: s.task_id,
            annotator_id: s.annotator_id,
            decisions: s.decisions,
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        };
        if let Some((path, file)) = &mut self.log {
            let mut line = serde_json::to_string(&result).expect("result serializes");
            line.push('\n');
            file.write_all(line.as_bytes())
                .and_then(|()| file.flush())
                .map_err(|source| StoreError::Io {
                    path: path.clone(),
                    source,
                })?;
        }
        self.submitted.insert(key);
        self.results.push(result.clone());
        Ok(result)
    }

    pub fn progress(&self) -> Progress {
        let mut per_task = vec![0usize; self.tasks.len()];
        for (i, _) in &self.submitted {
            per_task[*i] += 1;
        }
        Progress {
            tasks: self.tasks.len(),
            completed: per_task.iter().filter(|&&n| n >= self.redundancy).count(),
            results: self.results.len(),
            annotators: annotator_stats(&self.results),
        }
    }

    pub fn export(&self, params: &ExportParams) -> Vec<Question> {
        export_uqs(&self.tasks, &self.results, params)
    }
}
