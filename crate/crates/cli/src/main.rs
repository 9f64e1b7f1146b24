//! `lva`: build datasets, run and evaluate the master loop, sweep
//! ablations, score rollouts, and simulate with scripted backends.
//!
//! Settings resolve as flags > environment > config file > defaults.
//! API keys are read from the environment only.

use std::collections::BTreeMap;
use std::io::IsTerminal;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use lva_core::backend::remote::{
    ChatClient, EndpointConfig, RemoteGrounding, RemoteMaster, RemoteVision, GROUNDING_KEY_ENV,
    MASTER_KEY_ENV, VISION_KEY_ENV,
};
use lva_core::backend::scripted::{ScriptedBackend, ScriptedFixture};
use lva_core::backend::Backends;
use lva_core::config::{FileConfig, CONFIG_ENV};
use lva_core::episode::{build_dataset_dir, validate_episode, Episode};
use lva_core::eval::{
    artifact_name, persist, persist_sweep, run_eval_detailed, summary_table, sweep, Dataset,
    EvalConfig, EvalError, GroundingMetric, SweepAxis,
};
use lva_core::grpo::{export_batch, RolloutGroup};
use lva_core::orchestrator::{run_trajectory, Trajectory};
use lva_core::reward::{score_trajectory, DEFAULT_ALPHA};
use lva_core::synth::{generate, SynthSpec};

#[derive(Parser, Debug)]
#[command(name = "lva", version, about = "Multi-agent long-video question answering toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one question and print the answer and reward breakdown.
    Run(RunArgs),
    /// Evaluate every question of a dataset.
    Eval(EvalArgs),
    /// Evaluate once per value of a swept setting.
    Sweep(SweepArgs),
    /// Aggregate clip-level records into episode manifests.
    BuildDataset(BuildArgs),
    /// Score rollout groups and export a training batch.
    ScoreRollouts(ScoreArgs),
    /// Generate a synthetic dataset with scripted fixtures and evaluate it.
    Simulate(SimulateArgs),
    /// Check manifests (and optionally fixtures) for invariant violations.
    Validate(ValidateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum BackendChoice {
    Scripted,
    Remote,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum MetricChoice {
    Last,
    Any,
}

impl From<MetricChoice> for GroundingMetric {
    fn from(m: MetricChoice) -> Self {
        match m {
            MetricChoice::Last => GroundingMetric::Last,
            MetricChoice::Any => GroundingMetric::Any,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct ConfigArg {
    /// Config file (TOML, or JSON by extension).
    #[arg(long, env = CONFIG_ENV)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct BackendArgs {
    #[arg(long, value_enum, default_value = "scripted")]
    backend: BackendChoice,
    /// Scripted fixture file (required for the scripted backend).
    #[arg(long)]
    fixtures: Option<PathBuf>,
    /// Overrides the fixture's grounding RNG seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
struct LoopArgs {
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    /// After step exhaustion, ask the master once more for an answer.
    #[arg(long)]
    force_answer: bool,
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Args, Debug, Clone)]
struct EvalFlags {
    #[arg(long)]
    parallelism: Option<usize>,
    /// Abort on the first backend failure instead of recording it.
    #[arg(long)]
    strict: bool,
    #[arg(long, value_enum)]
    grounding_metric: Option<MetricChoice>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    #[arg(long)]
    episode: PathBuf,
    #[arg(long)]
    question: String,
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    run: LoopArgs,
    /// Directory for the trajectory JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    run: LoopArgs,
    #[command(flatten)]
    eval: EvalFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    #[arg(long)]
    dataset: PathBuf,
    /// `max-steps=2,5,10` or `window=1,2,3`.
    #[arg(long)]
    axis: SweepAxis,
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    run: LoopArgs,
    #[command(flatten)]
    eval: EvalFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BuildArgs {
    /// Clip-level source directory (`clips/`, `qa.jsonl`, `boxes.jsonl`).
    #[arg(long)]
    dataset: PathBuf,
    /// Directory for the episode manifests.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// Directory of episode manifests.
    #[arg(long, conflicts_with = "episode")]
    dataset: Option<PathBuf>,
    #[arg(long)]
    episode: Option<PathBuf>,
    /// Restrict to one question.
    #[arg(long)]
    question: Option<String>,
    /// Score recorded trajectory JSON files from this directory instead of
    /// generating rollouts.
    #[arg(long)]
    trajectories: Option<PathBuf>,
    /// Rollouts per question when generating.
    #[arg(long)]
    rollouts: Option<usize>,
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    run: LoopArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    #[arg(long, default_value_t = 200)]
    questions: usize,
    #[arg(long, default_value_t = 12)]
    clips: usize,
    #[arg(long, default_value_t = 0.0)]
    error_rate: f64,
    #[arg(long)]
    noise_radius: Option<usize>,
    #[arg(long, default_value_t = 1)]
    vision_calls: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    run: LoopArgs,
    #[command(flatten)]
    eval: EvalFlags,
    /// Also sweep this axis over the generated dataset.
    #[arg(long)]
    axis: Option<SweepAxis>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[arg(long, required_unless_present = "episode")]
    dataset: Option<PathBuf>,
    #[arg(long, conflicts_with = "dataset")]
    episode: Option<PathBuf>,
    /// Also check a scripted fixture against the episodes.
    #[arg(long)]
    fixtures: Option<PathBuf>,
}

/// How a command failed, mapped onto the exit status.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
    StrictAbort(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow!(msg.into()))
}

fn eval_failure(e: EvalError) -> Failure {
    match e {
        EvalError::Aborted { .. } => Failure::StrictAbort(e.into()),
        EvalError::Config(_) | EvalError::ZeroParallelism => Failure::Usage(e.into()),
        other => Failure::Runtime(other.into()),
    }
}

fn load_file_config(arg: &ConfigArg) -> Result<FileConfig, Failure> {
    match &arg.config {
        Some(p) => FileConfig::load(p).map_err(|e| Failure::Usage(e.into())),
        None => Ok(FileConfig::default()),
    }
}

fn eval_config(file: &FileConfig, run: &LoopArgs, eval: Option<&EvalFlags>) -> Result<EvalConfig, Failure> {
    let mut cfg = EvalConfig::default();
    if let Some(r) = &file.run {
        cfg.run = r.clone();
    }
    if let Some(k) = run.max_steps {
        cfg.run.max_steps = k;
    }
    if let Some(w) = run.window {
        cfg.run.window = w;
    }
    if run.force_answer {
        cfg.run.force_answer = true;
    }
    cfg.alpha = run.alpha.or(file.alpha).unwrap_or(DEFAULT_ALPHA);
    if !(cfg.alpha >= 0.0 && cfg.alpha.is_finite()) {
        return Err(usage("--alpha must be a finite non-negative number"));
    }
    cfg.parallelism = eval
        .and_then(|e| e.parallelism)
        .or(file.parallelism)
        .unwrap_or(cfg.parallelism);
    cfg.grounding_metric = eval
        .and_then(|e| e.grounding_metric.map(Into::into))
        .or(file.grounding_metric)
        .unwrap_or_default();
    cfg.strict = eval.is_some_and(|e| e.strict);
    cfg.run.validate().map_err(|e| Failure::Usage(e.into()))?;
    if cfg.parallelism == 0 {
        return Err(usage("--parallelism must be at least 1"));
    }
    Ok(cfg)
}

fn load_fixture(args: &BackendArgs, file: &FileConfig) -> Result<ScriptedFixture, Failure> {
    let path = args
        .fixtures
        .as_ref()
        .ok_or_else(|| usage("the scripted backend needs --fixtures"))?;
    let mut fx = ScriptedFixture::load(path).map_err(|e| Failure::Runtime(e.into()))?;
    if let Some(seed) = args.seed.or(file.seed) {
        fx.rng_seed = seed;
    }
    for w in fx.warnings() {
        tracing::warn!("fixture: {w}");
    }
    Ok(fx)
}

fn endpoint(section: &Option<EndpointConfig>, name: &str) -> Result<EndpointConfig, Failure> {
    section
        .clone()
        .ok_or_else(|| usage(format!("the remote backend needs a [{name}] section in the config file")))
}

/// Builds the backends and a short label for reports.
fn make_backends(args: &BackendArgs, file: &FileConfig) -> Result<(Backends, String), Failure> {
    match args.backend {
        BackendChoice::Scripted => {
            let fx = load_fixture(args, file)?;
            Ok((Backends::uniform(Arc::new(ScriptedBackend::new(fx))), "scripted".into()))
        }
        BackendChoice::Remote => {
            let master = endpoint(&file.master, "master")?;
            let grounding = endpoint(&file.grounding, "grounding")?;
            let vision = endpoint(&file.vision, "vision")?;
            let label = format!("remote:{}", master.model);
            let client = |cfg, env| ChatClient::from_env(cfg, env).map_err(|e| usage(e.to_string()));
            let backends = Backends::new(
                Arc::new(RemoteMaster::new(client(master, MASTER_KEY_ENV)?)),
                Arc::new(RemoteGrounding::new(client(grounding, GROUNDING_KEY_ENV)?)),
                Arc::new(RemoteVision::new(client(vision, VISION_KEY_ENV)?)),
            );
            Ok((backends, label))
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_run(a: RunArgs) -> Result<(), Failure> {
    let file = load_file_config(&a.cfg)?;
    let cfg = eval_config(&file, &a.run, None)?;
    let episode = Episode::load_manifest(&a.episode).map_err(|e| Failure::Runtime(e.into()))?;
    let question = episode
        .question(&a.question)
        .ok_or_else(|| usage(format!("question `{}` is not in {}", a.question, a.episode.display())))?;
    let (backends, _) = make_backends(&a.backend, &file)?;
    let trajectory = match run_trajectory(&episode, question, &backends, &cfg.run) {
        Ok(t) => t,
        Err(e) => {
            if let Some(out) = &a.out {
                let path = out.join(format!("{}.partial.json", artifact_name(&a.question)));
                write_file(&path, &e.partial.to_json())?;
            }
            return Err(Failure::Runtime(e.into()));
        }
    };
    if let Some(out) = &a.out {
        write_file(&out.join(format!("{}.json", artifact_name(&a.question))), &trajectory.to_json())?;
    }
    let reward = score_trajectory(&trajectory, question, cfg.alpha);
    for t in &trajectory.turns {
        let kind = serde_json::to_value(&t.dispatch).expect("dispatch serializes");
        println!(
            "step {}: {} (r_fmt={})",
            t.step,
            kind["kind"].as_str().unwrap_or("?"),
            reward.per_step_fmt[t.step]
        );
    }
    match (&trajectory.final_response, &trajectory.forced_answer) {
        (Some(r), _) => println!("{r}"),
        (None, Some(f)) => println!("no answer within {} steps; forced answer: {f}", cfg.run.max_steps),
        (None, None) => println!("no answer within {} steps", cfg.run.max_steps),
    }
    println!(
        "reward: r_fmt={:?} r_ans={} alpha={} R={}",
        reward.per_step_fmt, reward.answer_reward, reward.alpha, reward.total
    );
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset, Failure> {
    Dataset::load(path).map_err(|e| Failure::Runtime(e.into()))
}

fn cmd_eval(a: EvalArgs) -> Result<(), Failure> {
    let file = load_file_config(&a.cfg)?;
    let cfg = eval_config(&file, &a.run, Some(&a.eval))?;
    let dataset = load_dataset(&a.dataset)?;
    let (backends, method) = make_backends(&a.backend, &file)?;
    let (report, trajectories) =
        run_eval_detailed(&dataset, &backends, &method, &cfg).map_err(eval_failure)?;
    persist(&a.out, &report, &trajectories).map_err(|e| Failure::Runtime(e.into()))?;
    print!("{}", summary_table(std::slice::from_ref(&report)));
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<(), Failure> {
    let file = load_file_config(&a.cfg)?;
    let cfg = eval_config(&file, &a.run, Some(&a.eval))?;
    let dataset = load_dataset(&a.dataset)?;
    let (backends, method) = make_backends(&a.backend, &file)?;
    let reports = sweep(&dataset, &backends, &method, &a.axis, &cfg).map_err(eval_failure)?;
    persist_sweep(&a.out, &a.axis, &reports).map_err(|e| Failure::Runtime(e.into()))?;
    print!("{}", summary_table(&reports));
    Ok(())
}

fn cmd_build(a: BuildArgs) -> Result<(), Failure> {
    let episodes = build_dataset_dir(&a.dataset).map_err(|e| Failure::Runtime(e.into()))?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for ep in &episodes {
        let violations = validate_episode(ep);
        if !violations.is_empty() {
            return Err(Failure::Runtime(anyhow!(
                "built episode {} has {} violation(s), first: {}",
                ep.episode_id,
                violations.len(),
                violations[0]
            )));
        }
        let path = a.out.join(format!("{}.json", ep.episode_id));
        ep.save_manifest(&path).map_err(|e| Failure::Runtime(e.into()))?;
        println!(
            "{}: {} clips, {:.1} s, {} subtitles, {} questions, {} boxes -> {}",
            ep.episode_id,
            ep.clips.len(),
            ep.total_duration_s(),
            ep.subtitles.len(),
            ep.questions.len(),
            ep.boxes.len(),
            path.display()
        );
    }
    Ok(())
}

fn load_episodes(dataset: &Option<PathBuf>, episode: &Option<PathBuf>) -> Result<Vec<Episode>, Failure> {
    match (dataset, episode) {
        (Some(d), _) => Ok(load_dataset(d)?.episodes),
        (None, Some(e)) => Ok(vec![Episode::load_manifest(e).map_err(|e| Failure::Runtime(e.into()))?]),
        (None, None) => Err(usage("pass --dataset or --episode")),
    }
}

fn load_trajectories(dir: &Path) -> Result<Vec<Trajectory>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        })
        .collect()
}

fn cmd_score(a: ScoreArgs) -> Result<(), Failure> {
    let file = load_file_config(&a.cfg)?;
    let cfg = eval_config(&file, &a.run, None)?;
    let episodes = load_episodes(&a.dataset, &a.episode)?;
    let grpo = file.grpo.to_config();
    let n_rollouts = a.rollouts.unwrap_or(file.training.n_rollouts);
    if n_rollouts < 2 {
        return Err(usage("--rollouts must be at least 2"));
    }
    let wanted = |qid: &str| a.question.as_deref().is_none_or(|q| q == qid);

    let mut by_context: BTreeMap<(String, String), Vec<Trajectory>> = BTreeMap::new();
    if let Some(dir) = &a.trajectories {
        for t in load_trajectories(dir)? {
            if wanted(&t.question_id) {
                by_context
                    .entry((t.episode_id.clone(), t.question_id.clone()))
                    .or_default()
                    .push(t);
            }
        }
    } else {
        let base = match a.backend.backend {
            BackendChoice::Scripted => Some(load_fixture(&a.backend, &file)?),
            BackendChoice::Remote => None,
        };
        let remote = match &base {
            None => Some(make_backends(&a.backend, &file)?.0),
            Some(_) => None,
        };
        for r in 0..n_rollouts {
            // Scripted rollouts differ only through their grounding seed.
            let backends = match (&base, &remote) {
                (Some(fx), _) => {
                    let mut fx = fx.clone();
                    fx.rng_seed = fx.rng_seed.wrapping_add(r as u64);
                    Backends::uniform(Arc::new(ScriptedBackend::new(fx)))
                }
                (None, Some(b)) => b.clone(),
                (None, None) => unreachable!("one backend source is always set"),
            };
            for ep in &episodes {
                for q in ep.questions.iter().filter(|q| wanted(&q.question_id)) {
                    let t = run_trajectory(ep, q, &backends, &cfg.run)
                        .map_err(|e| Failure::Runtime(e.into()))?;
                    by_context
                        .entry((ep.episode_id.clone(), q.question_id.clone()))
                        .or_default()
                        .push(t);
                }
            }
        }
    }

    let mut groups = Vec::new();
    for ((episode_id, question_id), trajectories) in by_context {
        let ep = episodes
            .iter()
            .find(|e| e.episode_id == episode_id)
            .ok_or_else(|| Failure::Runtime(anyhow!("no manifest for episode {episode_id}")))?;
        let q = ep
            .question(&question_id)
            .ok_or_else(|| Failure::Runtime(anyhow!("episode {episode_id} has no question {question_id}")))?;
        let group = RolloutGroup::score(ep, q, trajectories, cfg.alpha, &grpo)
            .map_err(|e| Failure::Runtime(e.into()))?;
        let returns: Vec<String> = group.rollouts.iter().map(|r| format!("{:.3}", r.reward.total)).collect();
        let adv: Vec<String> = group.advantages.iter().map(|x| format!("{x:+.3}")).collect();
        println!("{}: R=[{}] A=[{}]", group.context_id, returns.join(", "), adv.join(", "));
        groups.push(group);
    }
    let path = a.out.join("batch.jsonl");
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    export_batch(&groups, &file.batch_metadata(cfg.alpha), &path)
        .with_context(|| format!("writing {}", path.display()))?;
    println!("{} group(s) -> {}", groups.len(), path.display());
    Ok(())
}

fn cmd_simulate(a: SimulateArgs) -> Result<(), Failure> {
    let file = load_file_config(&a.cfg)?;
    let cfg = eval_config(&file, &a.run, Some(&a.eval))?;
    if !(0.0..=1.0).contains(&a.error_rate) {
        return Err(usage("--error-rate must lie in [0, 1]"));
    }
    if a.clips == 0 {
        return Err(usage("--clips must be at least 1"));
    }
    let spec = SynthSpec {
        clips_per_episode: a.clips,
        seed: a.seed.or(file.seed).unwrap_or(0),
        grounding_error_rate: a.error_rate,
        grounding_noise_radius: a.noise_radius,
        vision_calls: a.vision_calls,
        ..SynthSpec::default()
    }
    .with_questions(a.questions);
    let synth = generate(&spec);

    let data_dir = a.out.join("dataset");
    std::fs::create_dir_all(&data_dir).with_context(|| format!("creating {}", data_dir.display()))?;
    for ep in &synth.episodes {
        ep.save_manifest(&data_dir.join(format!("{}.json", ep.episode_id)))
            .map_err(|e| Failure::Runtime(e.into()))?;
    }
    synth
        .fixture
        .save(&a.out.join("fixtures.json"))
        .map_err(|e| Failure::Runtime(e.into()))?;

    let dataset = Dataset {
        id: "synthetic".into(),
        episodes: synth.episodes,
    };
    let backends = Backends::uniform(Arc::new(ScriptedBackend::new(synth.fixture)));
    if let Some(axis) = &a.axis {
        let reports = sweep(&dataset, &backends, "scripted", axis, &cfg).map_err(eval_failure)?;
        persist_sweep(&a.out.join("sweep"), axis, &reports).map_err(|e| Failure::Runtime(e.into()))?;
        print!("{}", summary_table(&reports));
    } else {
        let (report, trajectories) =
            run_eval_detailed(&dataset, &backends, "scripted", &cfg).map_err(eval_failure)?;
        persist(&a.out.join("eval"), &report, &trajectories).map_err(|e| Failure::Runtime(e.into()))?;
        print!("{}", summary_table(std::slice::from_ref(&report)));
    }
    Ok(())
}

fn cmd_validate(a: ValidateArgs) -> Result<(), Failure> {
    let episodes = load_episodes(&a.dataset, &a.episode)?;
    let mut problems = 0usize;
    for ep in &episodes {
        let v = validate_episode(ep);
        for x in &v {
            println!("{}: {x}", ep.episode_id);
        }
        problems += v.len();
    }
    if let Some(path) = &a.fixtures {
        let fx = ScriptedFixture::load(path).map_err(|e| Failure::Runtime(e.into()))?;
        for w in fx.warnings() {
            println!("fixture warning: {w}");
        }
        for ep in &episodes {
            for q in &ep.questions {
                match fx.questions.get(&q.question_id) {
                    None => println!("fixture: no entry for question {}", q.question_id),
                    Some(entry) if entry.gold_clip_id != q.gold_clip_id => {
                        problems += 1;
                        println!(
                            "fixture: {} gold clip {} differs from the manifest's {}",
                            q.question_id, entry.gold_clip_id, q.gold_clip_id
                        );
                    }
                    Some(_) => {}
                }
            }
        }
    }
    let n_questions: usize = episodes.iter().map(|e| e.questions.len()).sum();
    println!(
        "{} episode(s), {} question(s), {} violation(s)",
        episodes.len(),
        n_questions,
        problems
    );
    if problems > 0 {
        return Err(Failure::Runtime(anyhow!("validation found {problems} violation(s)")));
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();

    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::BuildDataset(a) => cmd_build(a),
        Command::ScoreRollouts(a) => cmd_score(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Validate(a) => cmd_validate(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {}", describe(&e));
            eprintln!("run `lva --help` for usage");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(2)
        }
        Err(Failure::StrictAbort(e)) => {
            eprintln!("aborted: {}", describe(&e));
            ExitCode::from(3)
        }
    }
}

/// The error chain, skipping causes whose text the outer message already includes.
fn describe(err: &anyhow::Error) -> String {
    let mut out = err.to_string();
    for cause in err.chain().skip(1) {
        let text = cause.to_string();
        if !out.contains(&text) {
            out = format!("{out}: {text}");
        }
    }
    out
}
