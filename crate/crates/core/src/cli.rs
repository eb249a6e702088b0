//! `mnemo` command line.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::engine::{Engine, RetrievalPolicy, ScriptedUser, SessionOptions, SessionOutcome, UserSource};
use crate::eval::{self, EvalOptions, FeatureInstance, SimulatedUser, TestInstance, TruthLabel};
use crate::forge::{self, Forge, ForgePlan, ForgedDataset};
use crate::gateway::{ChatBackend, EmbedBackend, LiveBackend, MockBackend};
use crate::ranker::{self, ContextWindow, PreferencePair, RankerModel, CONTEXT_WIDTH};
use crate::service::{self, ServiceState};
use crate::store::{load_bundles, read_jsonl, Dialogue, HistoryBundle, Speaker, Utterance};
use crate::summarizer::TopicEntry;

type DynError = Box<dyn std::error::Error + Send + Sync>;

/// `--mock` value selecting the built-in template-aware mock.
pub const SYNTHETIC_MOCK: &str = "synthetic";

#[derive(Debug, Parser)]
#[command(name = "mnemo", about = "Memory-aware proactive dialogue engine", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Flat TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub policy: Option<RetrievalPolicy>,
    #[arg(long, global = true)]
    pub max_turns: Option<u32>,
    /// Mock fixture directory, or `synthetic` for the built-in mock.
    #[arg(long, global = true, value_name = "FIXTURE_DIR")]
    pub mock: Option<PathBuf>,
    /// Accept test instances with other than ten candidates.
    #[arg(long, global = true)]
    pub allow_n: bool,
    /// Keep talking after a shift until the turn cap.
    #[arg(long, global = true)]
    pub run_to_cap: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Forge {
        #[arg(long)]
        out: PathBuf,
        /// `small` or `chmap-test`.
        #[arg(long, default_value = "small")]
        preset: String,
        /// Also write `testset.jsonl` and `test_bundles.jsonl`.
        #[arg(long)]
        testset: bool,
    },
    /// Train the ranker from a forged dataset or from precomputed pairs.
    TrainRanker {
        #[arg(long, conflicts_with = "pairs", required_unless_present = "pairs")]
        data: Option<PathBuf>,
        /// JSONL of `{pos, neg}` feature pairs.
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a ranker on a test set; prints the report as JSON.
    EvalRetrieval {
        /// JSONL of text instances or of `{features, truth_index}` instances.
        #[arg(long)]
        testset: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value = "corresponding")]
        truth: String,
    },
    /// Run one session; prints the transcript and the shift turn.
    RunSession {
        /// Session file; defaults to `session.json` in the mock directory.
        #[arg(long)]
        session: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        /// JSONL of history bundles addressable by anchor id.
        #[arg(long)]
        bundles: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Print corpus statistics of a forged dataset as JSON.
    Stats {
        #[arg(long)]
        data: PathBuf,
    },
}

/// Contents of a `run-session` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionFile {
    pub bundle: HistoryBundle,
    /// Ends with the user's first utterance.
    pub opening: Vec<Utterance>,
    /// Later user turns; when absent, the user is simulated.
    #[serde(default)]
    pub user_lines: Option<Vec<String>>,
}

struct Backends {
    chat: Arc<dyn ChatBackend>,
    embed: Arc<dyn EmbedBackend>,
}

fn backends(mock: Option<&Path>, config: &Config) -> Result<Backends, DynError> {
    match mock {
        Some(p) if p.as_os_str() == SYNTHETIC_MOCK => {
            let m = Arc::new(MockBackend::synthetic(config.embedding_dim));
            Ok(Backends { chat: m.clone(), embed: m })
        }
        Some(dir) => {
            let m = Arc::new(MockBackend::from_dir(dir)?);
            Ok(Backends { chat: m.clone(), embed: m })
        }
        None => {
            let live = Arc::new(LiveBackend::new(config.live_config()));
            Ok(Backends { chat: live.clone(), embed: live })
        }
    }
}

/// `--model`, else `ranker.json` under the models path, else the cosine baseline.
fn load_model(path: Option<&Path>, config: &Config, dim: usize) -> Result<RankerModel, DynError> {
    let default = config.models_path.join("ranker.json");
    let model = match path {
        Some(p) => RankerModel::load(p)?,
        None if default.exists() => RankerModel::load(&default)?,
        None => return Ok(RankerModel::cosine(dim)),
    };
    model.validate()?;
    if model.embedding_dim != dim {
        return Err(format!("model expects {}-dim embeddings, backend gives {dim}", model.embedding_dim).into());
    }
    Ok(model)
}

fn write_json(out: &mut dyn Write, value: &impl Serialize) -> Result<(), DynError> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

fn read_dataset(dir: &Path) -> Result<ForgedDataset, DynError> {
    Ok(ForgedDataset {
        historical: read_jsonl::<Dialogue>(&dir.join("historical.jsonl"))?,
        bundles: load_bundles(dir.join("bundles.jsonl"))?,
        current: read_jsonl::<Dialogue>(&dir.join("current.jsonl"))?,
        dropped_historical: 0,
        dropped_malformed: 0,
    })
}

/// Judge-labelled pairs for every current conversation: the context is its
/// opening window, the target its anchor's topic.
pub fn dataset_pairs(
    data: &ForgedDataset,
    judge: &dyn ChatBackend,
    embed: &dyn EmbedBackend,
    seed: u64,
) -> Result<Vec<PreferencePair>, DynError> {
    let pool: Vec<TopicEntry> =
        data.historical.iter().filter_map(|d| d.topic.as_ref().map(|t| TopicEntry::provided(&d.id, t))).collect();
    let mut pairs = Vec::new();
    for (i, (bundle, current)) in data.bundles.iter().zip(&data.current).enumerate() {
        let anchor = bundle.anchor().ok_or("bundle without anchor")?;
        let target = TopicEntry::provided(&anchor.id, anchor.topic.clone().unwrap_or_default());
        let context = ContextWindow::new(current.turns[..current.turns.len().min(CONTEXT_WIDTH)].to_vec())?;
        match ranker::build_preference_pairs(&context, &target, &pool, judge, embed, seed.wrapping_add(i as u64)) {
            Ok(j) => pairs.extend(j.pairs),
            Err(ranker::RankerError::NoNegatives) => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(pairs)
}

fn run_session_cmd(
    g: &GlobalArgs,
    config: &Config,
    session: Option<PathBuf>,
    model: Option<PathBuf>,
    out: &mut dyn Write,
) -> Result<(), DynError> {
    let path = match (session, g.mock.as_deref()) {
        (Some(p), _) => p,
        (None, Some(dir)) if dir.as_os_str() != SYNTHETIC_MOCK => dir.join("session.json"),
        _ => return Err("no session file: pass --session or a --mock fixture directory".into()),
    };
    let file: SessionFile = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
    let b = backends(g.mock.as_deref(), config)?;
    let model = load_model(model.as_deref(), config, b.embed.dim())?;
    let engine = Engine::new(Arc::new(model), b.chat.clone(), b.embed);
    let mut user: Box<dyn UserSource> = match file.user_lines {
        Some(lines) => Box::new(ScriptedUser::new(lines)),
        None => Box::new(SimulatedUser::new(b.chat)),
    };
    let options = SessionOptions { policy: config.policy, max_turns: config.max_turns, run_to_cap: config.run_to_cap };
    let outcome = engine.run_session(file.bundle, &file.opening, user.as_mut(), options)?;
    print_outcome(&outcome, out)?;
    Ok(())
}

fn print_outcome(o: &SessionOutcome, out: &mut dyn Write) -> std::io::Result<()> {
    for u in &o.transcript {
        match (u.speaker, u.shift) {
            (Speaker::Bot, Some(true)) => writeln!(out, "Bot [shift]: {}", u.text)?,
            _ => writeln!(out, "{}: {}", u.speaker, u.text)?,
        }
    }
    if let Some(t) = &o.retrieved_topic {
        writeln!(out, "retrieved: {} ({})", t.topic, t.dialogue_id)?;
    }
    match o.shift_turn {
        Some(tau) => writeln!(out, "tau: {tau}"),
        None => writeln!(out, "tau: none"),
    }
}

fn eval_cmd(
    g: &GlobalArgs,
    config: &Config,
    testset: &Path,
    model: Option<&Path>,
    truth: &str,
    out: &mut dyn Write,
) -> Result<(), DynError> {
    let truth = match truth {
        "corresponding" => TruthLabel::Corresponding,
        "top_ranked" => TruthLabel::TopRanked,
        other => return Err(format!("unknown truth label `{other}`").into()),
    };
    let text = std::fs::read_to_string(testset)?;
    let first = text.lines().find(|l| !l.trim().is_empty()).ok_or("empty test set")?;
    let report = if serde_json::from_str::<serde_json::Value>(first)?.get("features").is_some() {
        let instances: Vec<FeatureInstance> = read_jsonl(testset)?;
        let model = RankerModel::load(model.ok_or("feature test sets need --model")?)?;
        eval::evaluate_features(&model, &instances, g.allow_n)?
    } else {
        let instances: Vec<TestInstance> = read_jsonl(testset)?;
        let b = backends(g.mock.as_deref(), config)?;
        let model = load_model(model, config, b.embed.dim())?;
        eval::evaluate_retrieval(&model, &instances, b.embed.as_ref(), EvalOptions { allow_n: g.allow_n, truth })?
    };
    write_json(out, &report)
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<(), DynError> {
    let g = &cli.global;
    let mut config = match &g.config {
        Some(p) => Config::load(p)?,
        None => Config::default().with_env(),
    };
    if let Some(s) = g.seed {
        config.seed = s;
    }
    if let Some(p) = g.policy {
        config.policy = p;
    }
    if let Some(m) = g.max_turns {
        config.max_turns = m;
    }
    config.run_to_cap |= g.run_to_cap;
    config.validate()?;
    eprintln!("seed={} config_hash={}", config.seed, config.hash());

    match cli.command {
        Command::Forge { out: dir, preset, testset } => {
            let plan = ForgePlan::preset(&preset).ok_or_else(|| format!("unknown preset `{preset}`"))?;
            let plan = ForgePlan { seed: config.seed, max_turns: config.max_turns, ..plan };
            let b = backends(g.mock.as_deref(), &config)?;
            let data = Forge::new(b.chat.as_ref(), plan)?.run()?;
            let stats = forge::write_dataset(&dir, &data)?;
            if testset {
                let (instances, bundles, skipped) = forge::forge_testset(&data, b.chat.as_ref(), config.seed)?;
                crate::store::write_jsonl(&dir.join("testset.jsonl"), &instances)?;
                crate::store::save_bundles(dir.join("test_bundles.jsonl"), &bundles)?;
                eprintln!("testset: {} instances, {skipped} skipped", instances.len());
            }
            eprintln!("dropped: {} historical, {} malformed sessions", data.dropped_historical, data.dropped_malformed);
            write_json(out, &stats)
        }
        Command::TrainRanker { data, pairs, out: path } => {
            let pairs = match (pairs, data) {
                (Some(p), _) => read_jsonl::<PreferencePair>(&p)?,
                (None, Some(dir)) => {
                    let b = backends(g.mock.as_deref(), &config)?;
                    dataset_pairs(&read_dataset(&dir)?, b.chat.as_ref(), b.embed.as_ref(), config.seed)?
                }
                (None, None) => unreachable!("clap requires one of --data/--pairs"),
            };
            let model = ranker::train(&pairs, &config.train_config())?;
            model.save(&path)?;
            writeln!(
                out,
                "trained on {} pairs, final loss {:.6}",
                pairs.len(),
                model.train_meta.final_loss.unwrap_or(f64::NAN)
            )?;
            Ok(())
        }
        Command::EvalRetrieval { testset, model, truth } => {
            eval_cmd(g, &config, &testset, model.as_deref(), &truth, out)
        }
        Command::RunSession { session, model } => run_session_cmd(g, &config, session, model, out),
        Command::Serve { addr, bundles, model } => {
            let b = backends(g.mock.as_deref(), &config)?;
            let model = load_model(model.as_deref(), &config, b.embed.dim())?;
            let bundles = match bundles {
                Some(p) => load_bundles(p)?,
                None => Vec::new(),
            };
            let engine = Arc::new(Engine::new(Arc::new(model), b.chat, b.embed));
            let defaults =
                SessionOptions { policy: config.policy, max_turns: config.max_turns, run_to_cap: config.run_to_cap };
            let state = Arc::new(ServiceState::new(engine, bundles, defaults));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(service::serve(state, &addr))?;
            Ok(())
        }
        Command::Stats { data } => {
            let historical = read_jsonl::<Dialogue>(&data.join("historical.jsonl"))?;
            let current = read_jsonl::<Dialogue>(&data.join("current.jsonl"))?;
            write_json(out, &forge::forge_stats(&historical, &current))
        }
    }
}

/// Parses `argv` (program name first), runs the command, and returns the
/// exit code. Normal output goes to `out`, diagnostics to stderr.
pub fn dispatch<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
