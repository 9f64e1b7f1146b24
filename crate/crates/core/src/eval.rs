//! Batch evaluation: answer and grounding accuracy over a dataset, and
//! sweeps over the step budget or the evidence window.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::normalize_answer;
use crate::backend::Backends;
use crate::episode::{load_dataset_dir, ManifestError};
use crate::episode::{validate_episode, window_run, Episode, Question};
use crate::orchestrator::{run_trajectory, ConfigError, RunConfig, RunError, Termination, Trajectory};
use crate::reward::{answer_matches, score_trajectory, DEFAULT_ALPHA};

/// Which grounding call counts for Grounding Accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundingMetric {
    /// The last grounding call; re-grounding supersedes earlier ones.
    #[default]
    Last,
    /// Any grounding call.
    Any,
}

impl std::str::FromStr for GroundingMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "last" => Ok(GroundingMetric::Last),
            "any" => Ok(GroundingMetric::Any),
            other => Err(format!("unknown grounding metric `{other}` (expected last or any)")),
        }
    }
}

/// Whether the gold clip lies in the window run around a grounded clip.
pub fn grounding_correct(
    trajectory: &Trajectory,
    question: &Question,
    episode: &Episode,
    window: usize,
    metric: GroundingMetric,
) -> bool {
    let Some(gold) = episode.clip_index(&question.gold_clip_id) else {
        return false;
    };
    let n = episode.clips.len();
    let hits = |clip_id: &String| {
        episode
            .clip_index(clip_id)
            .is_some_and(|c| window_run(n, c, window.max(1)).contains(&gold))
    };
    match metric {
        GroundingMetric::Last => trajectory.grounded_clips.last().is_some_and(hits),
        GroundingMetric::Any => trajectory.grounded_clips.iter().any(hits),
    }
}

/// The choice label an answer points at: its own leading label, else the
/// label of the choice whose text it matches.
pub fn predicted_label(answer: &str, question: &Question) -> Option<String> {
    let norm = normalize_answer(answer);
    if let Some(label) = norm.label {
        return Some(label);
    }
    if norm.text.is_empty() {
        return None;
    }
    question
        .choices
        .iter()
        .position(|c| normalize_answer(c).text == norm.text)
        .map(Question::choice_label)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionResult {
    pub question_id: String,
    pub episode_id: String,
    pub predicted_label: Option<String>,
    pub correct: bool,
    pub grounding_correct: bool,
    pub n_turns: usize,
    pub n_vision_calls: usize,
    pub n_grounding_calls: usize,
    pub terminated_by: Option<Termination>,
    #[serde(rename = "return")]
    pub total_return: f64,
    /// Set when a backend failed; such results are left out of the accuracies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl QuestionResult {
    pub fn errored(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub run: RunConfig,
    pub parallelism: usize,
    pub strict: bool,
    pub grounding_metric: GroundingMetric,
    pub alpha: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            run: RunConfig::default(),
            parallelism: 4,
            strict: false,
            grounding_metric: GroundingMetric::Last,
            alpha: DEFAULT_ALPHA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_id: String,
    /// Free-form description of the backends, e.g. `scripted`.
    pub method: String,
    pub config: EvalConfig,
    pub results: Vec<QuestionResult>,
    pub n_scored: usize,
    pub n_errored: usize,
    pub answer_accuracy: f64,
    pub grounding_accuracy: f64,
    pub mean_turns: f64,
    pub warnings: Vec<String>,
    /// Seconds; kept out of `report.json` so reruns are byte-identical.
    #[serde(skip)]
    pub wall_time: f64,
}

impl EvalReport {
    /// Recomputes the aggregate fields from `results`.
    pub fn aggregate(
        dataset_id: String,
        method: String,
        config: EvalConfig,
        results: Vec<QuestionResult>,
        mut warnings: Vec<String>,
    ) -> Self {
        let scored: Vec<&QuestionResult> = results.iter().filter(|r| !r.errored()).collect();
        let n = scored.len();
        let pct = |k: usize| if n == 0 { 0.0 } else { 100.0 * k as f64 / n as f64 };
        if results.is_empty() {
            warnings.push("empty dataset: no questions were evaluated".into());
        } else if n == 0 {
            warnings.push("every question errored; accuracies are 0 by convention".into());
        }
        let n_errored = results.len() - n;
        EvalReport {
            dataset_id,
            method,
            config,
            answer_accuracy: pct(scored.iter().filter(|r| r.correct).count()),
            grounding_accuracy: pct(scored.iter().filter(|r| r.grounding_correct).count()),
            mean_turns: if n == 0 {
                0.0
            } else {
                scored.iter().map(|r| r.n_turns).sum::<usize>() as f64 / n as f64
            },
            n_scored: n,
            n_errored,
            results,
            warnings,
            wall_time: 0.0,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// A named collection of episode manifests.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub id: String,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    /// Loads every manifest in `dir`; the id is the directory name.
    pub fn load(dir: &Path) -> Result<Self, ManifestError> {
        let id = dir
            .canonicalize()
            .ok()
            .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .unwrap_or_else(|| dir.display().to_string());
        Ok(Dataset {
            id,
            episodes: load_dataset_dir(dir)?,
        })
    }

    pub fn n_questions(&self) -> usize {
        self.episodes.iter().map(|e| e.questions.len()).sum()
    }

    pub fn questions(&self) -> impl Iterator<Item = (&Episode, &Question)> {
        self.episodes
            .iter()
            .flat_map(|e| e.questions.iter().map(move |q| (e, q)))
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("episode {episode_id} is invalid: {details}")]
    InvalidEpisode { episode_id: String, details: String },
    #[error("parallelism must be at least 1")]
    ZeroParallelism,
    #[error("strict mode: question {question_id} failed: {source}")]
    Aborted {
        question_id: String,
        source: Box<RunError>,
    },
    #[error("could not build the worker pool: {0}")]
    Pool(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// The outcome for one question.
#[derive(Debug, Clone)]
pub struct Evaluated {
    pub result: QuestionResult,
    /// The finished trajectory, or the partial one when a backend failed.
    pub trajectory: Trajectory,
}

fn evaluate_one(
    episode: &Episode,
    question: &Question,
    backends: &Backends,
    config: &EvalConfig,
) -> Result<Evaluated, RunError> {
    let outcome = run_trajectory(episode, question, backends, &config.run);
    let (trajectory, error) = match outcome {
        Ok(t) => (t, None),
        Err(e) if config.strict => return Err(e),
        Err(e) => {
            let msg = e.to_string();
            (*e.partial, Some(msg))
        }
    };
    let answer = trajectory.scored_answer();
    let reward = score_trajectory(&trajectory, question, config.alpha);
    let result = QuestionResult {
        question_id: question.question_id.clone(),
        episode_id: episode.episode_id.clone(),
        predicted_label: answer.and_then(|a| predicted_label(a, question)),
        correct: error.is_none() && answer.is_some_and(|a| answer_matches(a, question)),
        grounding_correct: error.is_none()
            && grounding_correct(
                &trajectory,
                question,
                episode,
                config.run.window,
                config.grounding_metric,
            ),
        n_turns: trajectory.turns.len(),
        n_vision_calls: trajectory.vision_calls(),
        n_grounding_calls: trajectory.grounding_calls(),
        terminated_by: error.is_none().then_some(trajectory.terminated_by),
        total_return: reward.total,
        error,
    };
    Ok(Evaluated { result, trajectory })
}

/// Runs every question of `dataset`, up to `config.parallelism` at a time.
///
/// Results come back in dataset order whatever the parallelism.
pub fn run_eval_detailed(
    dataset: &Dataset,
    backends: &Backends,
    method: &str,
    config: &EvalConfig,
) -> Result<(EvalReport, Vec<Trajectory>), EvalError> {
    config.run.validate()?;
    if config.parallelism == 0 {
        return Err(EvalError::ZeroParallelism);
    }
    for ep in &dataset.episodes {
        let violations = validate_episode(ep);
        if !violations.is_empty() {
            let details = violations
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join("; ");
            return Err(EvalError::InvalidEpisode {
                episode_id: ep.episode_id.clone(),
                details,
            });
        }
    }

    let started = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.parallelism)
        .build()
        .map_err(|e| EvalError::Pool(e.to_string()))?;
    let items: Vec<(&Episode, &Question)> = dataset.questions().collect();
    let outcomes: Result<Vec<Evaluated>, EvalError> = pool.install(|| {
        items
            .par_iter()
            .map(|&(ep, q)| {
                evaluate_one(ep, q, backends, config).map_err(|e| EvalError::Aborted {
                    question_id: q.question_id.clone(),
                    source: Box::new(e),
                })
            })
            .collect()
    });
    let outcomes = outcomes?;

    let mut results = Vec::with_capacity(outcomes.len());
    let mut trajectories = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        results.push(o.result);
        trajectories.push(o.trajectory);
    }
    let mut report = EvalReport::aggregate(
        dataset.id.clone(),
        method.to_string(),
        config.clone(),
        results,
        Vec::new(),
    );
    report.wall_time = started.elapsed().as_secs_f64();
    Ok((report, trajectories))
}

pub fn run_eval(
    dataset: &Dataset,
    backends: &Backends,
    method: &str,
    config: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    run_eval_detailed(dataset, backends, method, config).map(|(r, _)| r)
}

/// The parameter varied by a sweep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "values", rename_all = "kebab-case")]
pub enum SweepAxis {
    MaxSteps(Vec<usize>),
    Window(Vec<usize>),
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::MaxSteps(_) => "max-steps",
            SweepAxis::Window(_) => "window",
        }
    }

    pub fn values(&self) -> &[usize] {
        match self {
            SweepAxis::MaxSteps(v) | SweepAxis::Window(v) => v,
        }
    }

    fn apply(&self, base: &EvalConfig, value: usize) -> EvalConfig {
        let mut c = base.clone();
        match self {
            SweepAxis::MaxSteps(_) => c.run.max_steps = value,
            SweepAxis::Window(_) => c.run.window = value,
        }
        c
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = String;

    /// Parses `max-steps=2,5,10` or `window=1,2,3`.
    fn from_str(s: &str) -> Result<Self, String> {
        let (name, list) = s
            .split_once('=')
            .ok_or_else(|| format!("axis `{s}` should look like max-steps=2,5,10"))?;
        let values = list
            .split(',')
            .map(|v| match v.trim().parse::<usize>() {
                Ok(0) => Err(format!("axis values must be positive, got 0 in `{s}`")),
                Ok(n) => Ok(n),
                Err(_) => Err(format!("bad axis value `{v}` in `{s}`")),
            })
            .collect::<Result<Vec<_>, _>>()?;
        match name.trim() {
            "max-steps" | "max_steps" | "k" | "K" => Ok(SweepAxis::MaxSteps(values)),
            "window" => Ok(SweepAxis::Window(values)),
            other => Err(format!("unknown axis `{other}` (expected max-steps or window)")),
        }
    }
}

/// One report per axis value, all other settings held fixed.
pub fn sweep(
    dataset: &Dataset,
    backends: &Backends,
    method: &str,
    axis: &SweepAxis,
    base: &EvalConfig,
) -> Result<Vec<EvalReport>, EvalError> {
    axis.values()
        .iter()
        .map(|&v| run_eval(dataset, backends, method, &axis.apply(base, v)))
        .collect()
}

/// A plain-text table in the shape of a results table: one row per report.
pub fn summary_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:<10} {:>4} {:>6} {:>9} {:>8} {:>8} {:>10}",
        "Method", "Dataset", "K", "Window", "Questions", "Acc (%)", "GAcc (%)", "Mean turns"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<16} {:<10} {:>4} {:>6} {:>9} {:>8.2} {:>8.2} {:>10.2}",
            r.method,
            r.dataset_id,
            r.config.run.max_steps,
            r.config.run.window,
            r.n_scored,
            r.answer_accuracy,
            r.grounding_accuracy,
            r.mean_turns
        );
    }
    for r in reports {
        for w in &r.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        if r.n_errored > 0 {
            let ids: Vec<&str> = r
                .results
                .iter()
                .filter(|x| x.errored())
                .map(|x| x.question_id.as_str())
                .collect();
            let _ = writeln!(out, "errored ({}): {}", r.n_errored, ids.join(", "));
        }
    }
    out
}

/// A file name safe on every platform for an arbitrary question id.
pub fn artifact_name(question_id: &str) -> String {
    question_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn write(path: &Path, contents: &str) -> Result<(), EvalError> {
    fs::write(path, contents).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<(), EvalError> {
    fs::create_dir_all(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes the report artifacts under `out`:
/// `report.json`, `results.jsonl`, `summary.txt`, `trajectories/<qid>.json`
/// and `run_log.json` (the only file with timing information).
pub fn persist(out: &Path, report: &EvalReport, trajectories: &[Trajectory]) -> Result<(), EvalError> {
    create_dir(out)?;
    write(&out.join("report.json"), &report.to_json())?;
    let mut lines = String::new();
    for r in &report.results {
        lines.push_str(&serde_json::to_string(r).expect("result serializes"));
        lines.push('\n');
    }
    write(&out.join("results.jsonl"), &lines)?;
    write(&out.join("summary.txt"), &summary_table(std::slice::from_ref(report)))?;

    let traj_dir = out.join("trajectories");
    create_dir(&traj_dir)?;
    for t in trajectories {
        write(
            &traj_dir.join(format!("{}.json", artifact_name(&t.question_id))),
            &t.to_json(),
        )?;
    }
    let log = serde_json::json!({
        "finished_unix_s": std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        "wall_time_s": report.wall_time,
        "n_questions": report.results.len(),
    });
    write(
        &out.join("run_log.json"),
        &format!("{}\n", serde_json::to_string_pretty(&log).expect("log serializes")),
    )
}

/// Persists each sweep point under `out/<axis>=<value>/` plus a comparison
/// table at `out/comparison.txt`.
pub fn persist_sweep(
    out: &Path,
    axis: &SweepAxis,
    reports: &[EvalReport],
) -> Result<(), EvalError> {
    create_dir(out)?;
    for (v, r) in axis.values().iter().zip(reports) {
        persist(&out.join(format!("{}={v}", axis.name())), r, &[])?;
    }
    write(&out.join("comparison.txt"), &summary_table(reports))
}
